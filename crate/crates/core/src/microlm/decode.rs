use std::borrow::Cow;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{LmParts, MicroLm};
use crate::error::{Error, Result};
use crate::numerics::{kernels, LAYER_NORM_EPS};
use crate::tasks::vocab::{TokenId, EOS, PAD};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    Eos,
    MaxLen,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecodeResult {
    /// Generated ids, excluding the terminating EOS.
    pub tokens: Vec<TokenId>,
    /// Logits that produced each emitted token (including the EOS step).
    pub step_logits: Vec<Vec<f64>>,
    pub stop: StopReason,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Sampling {
    Greedy,
    /// Draws from softmax(logits / t) using ChaCha8 seeded with `seed`;
    /// one uniform draw per emitted token, inverse-CDF over ids in
    /// ascending order. `t == 0` is exactly greedy.
    Temperature { t: f64, seed: u64 },
}

#[derive(Debug, Clone)]
pub struct DecodeOptions {
    pub eos: TokenId,
    /// Ids that are never emitted.
    pub banned: Vec<TokenId>,
}

impl Default for DecodeOptions {
    fn default() -> Self {
        DecodeOptions {
            eos: EOS,
            banned: vec![PAD],
        }
    }
}

/// Cached single-row evaluation of a stack. Produces logits bit-identical to
/// the tape forward pass because both use the same row kernels in the same
/// order.
pub struct IncrementalDecoder<'a> {
    parts: LmParts<'a>,
    o_proj: Vec<Cow<'a, [f64]>>,
    keys: Vec<Vec<f64>>,
    values: Vec<Vec<f64>>,
    len: usize,
}

impl<'a> IncrementalDecoder<'a> {
    /// `o_proj` optionally replaces every layer's attention output projection
    /// (row-major d×d each).
    pub fn new(parts: LmParts<'a>, o_proj: Option<Vec<Vec<f64>>>) -> Result<Self> {
        let d = parts.cfg.d_model;
        let o_proj: Vec<Cow<'a, [f64]>> = match o_proj {
            Some(o) => {
                if o.len() != parts.blocks.len() || o.iter().any(|w| w.len() != d * d) {
                    return Err(Error::shape("o_proj overrides", &[o.len()], &[parts.blocks.len(), d, d]));
                }
                o.into_iter().map(Cow::Owned).collect()
            }
            None => parts.blocks.iter().map(|b| Cow::Borrowed(b.wo.data.as_slice())).collect(),
        };
        let n = parts.blocks.len();
        Ok(IncrementalDecoder {
            parts,
            o_proj,
            keys: vec![Vec::new(); n],
            values: vec![Vec::new(); n],
            len: 0,
        })
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn is_full(&self) -> bool {
        self.len >= self.parts.cfg.context_len
    }

    /// Appends one token and returns the logits at its position.
    pub fn push(&mut self, token: TokenId) -> Result<Vec<f64>> {
        let cfg = self.parts.cfg;
        let (d, v) = (cfg.d_model, cfg.vocab_size);
        if self.len >= cfg.context_len {
            return Err(Error::Length {
                len: self.len + 1,
                max: cfg.context_len,
            });
        }
        if token >= v {
            return Err(Error::Index {
                index: token,
                limit: v,
                context: "decoder input".into(),
            });
        }
        let i = self.len;
        let emb = self.parts.embed;
        let mut x: Vec<f64> = emb.tok.data[token * d..(token + 1) * d]
            .iter()
            .zip(&emb.pos.data[i * d..(i + 1) * d])
            .map(|(a, b)| a + b)
            .collect();
        let heads = cfg.n_heads;
        let dh = cfg.head_dim();
        let hidden = cfg.mlp_hidden();
        let mut h = vec![0.0; d];
        let mut probs = vec![0.0; i + 1];
        for (l, block) in self.parts.blocks.iter().enumerate() {
            kernels::layer_norm_row(&x, &block.ln1_g.data, &block.ln1_b.data, LAYER_NORM_EPS, &mut h);
            let q = kernels::matmul(&h, &block.wq.data, 1, d, d);
            let k = kernels::matmul(&h, &block.wk.data, 1, d, d);
            let vv = kernels::matmul(&h, &block.wv.data, 1, d, d);
            self.keys[l].extend_from_slice(&k);
            self.values[l].extend_from_slice(&vv);
            let mut a = vec![0.0; d];
            for hh in 0..heads {
                kernels::attend_row(
                    &q,
                    &self.keys[l],
                    &self.values[l],
                    i,
                    d,
                    hh * dh,
                    dh,
                    &mut probs,
                    &mut a[hh * dh..(hh + 1) * dh],
                );
            }
            let o = kernels::matmul(&a, &self.o_proj[l], 1, d, d);
            x.iter_mut().zip(&o).for_each(|(xi, oi)| *xi += oi);

            kernels::layer_norm_row(&x, &block.ln2_g.data, &block.ln2_b.data, LAYER_NORM_EPS, &mut h);
            let mut m = kernels::matmul(&h, &block.w1.data, 1, d, hidden);
            m.iter_mut().zip(&block.b1.data).for_each(|(a, b)| *a += b);
            m.iter_mut().for_each(|a| {
                if *a <= 0.0 {
                    *a = 0.0
                }
            });
            let mut m2 = kernels::matmul(&m, &block.w2.data, 1, hidden, d);
            m2.iter_mut().zip(&block.b2.data).for_each(|(a, b)| *a += b);
            x.iter_mut().zip(&m2).for_each(|(xi, mi)| *xi += mi);
        }
        let head = self.parts.head;
        kernels::layer_norm_row(&x, &head.ln_g.data, &head.ln_b.data, LAYER_NORM_EPS, &mut h);
        self.len += 1;
        Ok(kernels::matmul(&h, &head.w.data, 1, d, v))
    }

    /// Feeds a whole prefix; returns the logits at its last position.
    pub fn prefill(&mut self, tokens: &[TokenId]) -> Result<Vec<f64>> {
        if tokens.is_empty() {
            return Err(Error::Value("empty prefix".into()));
        }
        if self.len + tokens.len() > self.parts.cfg.context_len {
            return Err(Error::Length {
                len: self.len + tokens.len(),
                max: self.parts.cfg.context_len,
            });
        }
        let mut last = Vec::new();
        for &t in tokens {
            last = self.push(t)?;
        }
        Ok(last)
    }
}

fn pick(logits: &[f64], sampling: Sampling, banned: &[TokenId], rng: &mut Option<ChaCha8Rng>) -> TokenId {
    let masked: Vec<f64> = logits
        .iter()
        .enumerate()
        .map(|(i, &l)| if banned.contains(&i) { f64::NEG_INFINITY } else { l })
        .collect();
    match sampling {
        Sampling::Temperature { t, .. } if t > 0.0 => {
            let mut p: Vec<f64> = masked.iter().map(|l| l / t).collect();
            kernels::softmax_in_place(&mut p);
            let u: f64 = rng.as_mut().expect("rng for sampling").random();
            let mut cum = 0.0;
            let mut last_ok = 0;
            for (i, &pi) in p.iter().enumerate() {
                if pi > 0.0 {
                    last_ok = i;
                }
                cum += pi;
                if u < cum {
                    return i;
                }
            }
            last_ok
        }
        _ => kernels::argmax_lowest(&masked),
    }
}

/// Autoregressive generation from `prefix` on an arbitrary stack.
pub fn generate_with(
    parts: LmParts<'_>,
    o_proj: Option<Vec<Vec<f64>>>,
    prefix: &[TokenId],
    max_new: usize,
    sampling: Sampling,
    opts: &DecodeOptions,
) -> Result<DecodeResult> {
    if let Sampling::Temperature { t, .. } = sampling {
        if !(t >= 0.0) {
            return Err(Error::Value(format!("temperature must be >= 0, got {t}")));
        }
    }
    let mut rng = match sampling {
        Sampling::Temperature { seed, t } if t > 0.0 => Some(ChaCha8Rng::seed_from_u64(seed)),
        _ => None,
    };
    let mut dec = IncrementalDecoder::new(parts, o_proj)?;
    let mut logits = dec.prefill(prefix)?;
    let mut tokens = Vec::new();
    let mut step_logits = Vec::new();
    loop {
        if tokens.len() >= max_new {
            return Ok(DecodeResult {
                tokens,
                step_logits,
                stop: StopReason::MaxLen,
            });
        }
        let next = pick(&logits, sampling, &opts.banned, &mut rng);
        step_logits.push(logits);
        if next == opts.eos {
            return Ok(DecodeResult {
                tokens,
                step_logits,
                stop: StopReason::Eos,
            });
        }
        tokens.push(next);
        if tokens.len() >= max_new {
            return Ok(DecodeResult {
                tokens,
                step_logits,
                stop: StopReason::MaxLen,
            });
        }
        logits = dec.push(next)?;
        if dec.is_full() {
            return Ok(DecodeResult {
                tokens,
                step_logits,
                stop: StopReason::MaxLen,
            });
        }
    }
}

/// Argmax decoding; ties go to the lowest id. Never emits PAD.
pub fn decode_greedy(model: &MicroLm, prefix: &[TokenId], max_new: usize) -> Result<DecodeResult> {
    generate_with(model.parts(), None, prefix, max_new, Sampling::Greedy, &DecodeOptions::default())
}

pub fn sample_with_temperature(
    model: &MicroLm,
    prefix: &[TokenId],
    max_new: usize,
    t: f64,
    rng_seed: u64,
) -> Result<DecodeResult> {
    generate_with(
        model.parts(),
        None,
        prefix,
        max_new,
        Sampling::Temperature { t, seed: rng_seed },
        &DecodeOptions::default(),
    )
}
