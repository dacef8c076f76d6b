//! Decoder-only micro transformer: pre-norm blocks, learned absolute
//! positions, ReLU MLP. Serves as both the prompt generator and the actor.

pub(crate) mod checkpoint;
mod decode;
mod forward;
mod sft;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Parameters, Tensor};

pub use checkpoint::{load_microlm, read_microlm, save_microlm, write_microlm, MICROLM_MAGIC};
pub use decode::{
    generate_with,
    decode_greedy, sample_with_temperature, DecodeOptions, DecodeResult, IncrementalDecoder,
    Sampling, StopReason,
};
pub use forward::{block_forward, embed_forward, forward, head_forward, ForwardOutput};
pub use sft::{sequence_loss, sft_step, SeqExample};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchConfig {
    pub vocab_size: usize,
    /// Fixed window; also the padded length of tapped hidden states.
    pub context_len: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
}

impl ArchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size == 0 || self.context_len == 0 || self.d_model == 0 || self.n_heads == 0 {
            return Err(Error::Config(format!("degenerate architecture {self:?}")));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn mlp_hidden(&self) -> usize {
        4 * self.d_model
    }

    /// Closed-form number of scalar parameters.
    pub fn param_count(&self) -> usize {
        let (v, c, d, k) = (self.vocab_size, self.context_len, self.d_model, self.n_layers);
        let h = self.mlp_hidden();
        let block = 2 * d + 4 * d * d + 2 * d + d * h + h + h * d + d;
        v * d + c * d + k * block + 2 * d + d * v
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Embeddings {
    pub tok: Tensor,
    pub pos: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub ln1_g: Tensor,
    pub ln1_b: Tensor,
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub ln2_g: Tensor,
    pub ln2_b: Tensor,
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

/// Final layer norm and output projection.
#[derive(Debug, Clone, PartialEq)]
pub struct LmHead {
    pub ln_g: Tensor,
    pub ln_b: Tensor,
    pub w: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MicroLm {
    pub cfg: ArchConfig,
    pub embed: Embeddings,
    pub blocks: Vec<Block>,
    pub head: LmHead,
}

/// Borrowed view of a full stack, possibly assembled from separately owned
/// pieces (shared encoder + private decoder).
#[derive(Debug, Clone)]
pub struct LmParts<'a> {
    pub cfg: &'a ArchConfig,
    pub embed: &'a Embeddings,
    pub blocks: Vec<&'a Block>,
    pub head: &'a LmHead,
}

impl Embeddings {
    pub fn init<R: Rng + ?Sized>(cfg: &ArchConfig, rng: &mut R) -> Self {
        Embeddings {
            tok: Tensor::randn(&[cfg.vocab_size, cfg.d_model], 0.3, rng),
            pos: Tensor::randn(&[cfg.context_len, cfg.d_model], 0.3, rng),
        }
    }
}

impl Block {
    pub fn init<R: Rng + ?Sized>(cfg: &ArchConfig, rng: &mut R) -> Self {
        let d = cfg.d_model;
        let h = cfg.mlp_hidden();
        let std = 1.0 / (d as f64).sqrt();
        let out_std = std / (2.0 * cfg.n_layers.max(1) as f64).sqrt();
        Block {
            ln1_g: Tensor::filled(&[d], 1.0),
            ln1_b: Tensor::zeros(&[d]),
            wq: Tensor::randn(&[d, d], std, rng),
            wk: Tensor::randn(&[d, d], std, rng),
            wv: Tensor::randn(&[d, d], std, rng),
            wo: Tensor::randn(&[d, d], out_std, rng),
            ln2_g: Tensor::filled(&[d], 1.0),
            ln2_b: Tensor::zeros(&[d]),
            w1: Tensor::randn(&[d, h], std, rng),
            b1: Tensor::zeros(&[h]),
            w2: Tensor::randn(&[h, d], 1.0 / (h as f64).sqrt() / (2.0 * cfg.n_layers.max(1) as f64).sqrt(), rng),
            b2: Tensor::zeros(&[d]),
        }
    }
}

impl LmHead {
    pub fn init<R: Rng + ?Sized>(cfg: &ArchConfig, rng: &mut R) -> Self {
        let d = cfg.d_model;
        LmHead {
            ln_g: Tensor::filled(&[d], 1.0),
            ln_b: Tensor::zeros(&[d]),
            w: Tensor::randn(&[d, cfg.vocab_size], 1.0 / (d as f64).sqrt(), rng),
        }
    }
}

impl MicroLm {
    pub fn init<R: Rng + ?Sized>(cfg: ArchConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let embed = Embeddings::init(&cfg, rng);
        let blocks = (0..cfg.n_layers).map(|_| Block::init(&cfg, rng)).collect();
        let head = LmHead::init(&cfg, rng);
        Ok(MicroLm {
            cfg,
            embed,
            blocks,
            head,
        })
    }

    pub fn parts(&self) -> LmParts<'_> {
        LmParts {
            cfg: &self.cfg,
            embed: &self.embed,
            blocks: self.blocks.iter().collect(),
            head: &self.head,
        }
    }

    /// Parameters with stable dotted names, in [`Parameters`] order.
    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![
            ("embed.tok".to_string(), &self.embed.tok),
            ("embed.pos".to_string(), &self.embed.pos),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            for (n, t) in Block::NAMES.iter().zip(b.params()) {
                out.push((format!("blocks.{i}.{n}"), t));
            }
        }
        for (n, t) in LmHead::NAMES.iter().zip(self.head.params()) {
            out.push((format!("head.{n}"), t));
        }
        out
    }
}

impl Block {
    pub const NAMES: [&'static str; 12] = [
        "ln1_g", "ln1_b", "wq", "wk", "wv", "wo", "ln2_g", "ln2_b", "w1", "b1", "w2", "b2",
    ];
}

impl LmHead {
    pub const NAMES: [&'static str; 3] = ["ln_g", "ln_b", "w"];
}

impl Parameters for Embeddings {
    fn params(&self) -> Vec<&Tensor> {
        vec![&self.tok, &self.pos]
    }
    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.tok, &mut self.pos]
    }
}

impl Parameters for Block {
    fn params(&self) -> Vec<&Tensor> {
        vec![
            &self.ln1_g, &self.ln1_b, &self.wq, &self.wk, &self.wv, &self.wo, &self.ln2_g,
            &self.ln2_b, &self.w1, &self.b1, &self.w2, &self.b2,
        ]
    }
    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![
            &mut self.ln1_g,
            &mut self.ln1_b,
            &mut self.wq,
            &mut self.wk,
            &mut self.wv,
            &mut self.wo,
            &mut self.ln2_g,
            &mut self.ln2_b,
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
        ]
    }
}

impl Parameters for LmHead {
    fn params(&self) -> Vec<&Tensor> {
        vec![&self.ln_g, &self.ln_b, &self.w]
    }
    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.ln_g, &mut self.ln_b, &mut self.w]
    }
}

impl Parameters for MicroLm {
    fn params(&self) -> Vec<&Tensor> {
        let mut v = self.embed.params();
        v.extend(self.blocks.params());
        v.extend(self.head.params());
        v
    }
    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = self.embed.params_mut();
        v.extend(self.blocks.params_mut());
        v.extend(self.head.params_mut());
        v
    }
}
