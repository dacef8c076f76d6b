//! The joint model: a generator split into a shared encoder (φ_s) and a
//! private prompt decoder (φ_p), a frozen snapshot of the decoder, the
//! hypernetwork (φ_q) and the frozen actor.

mod checkpoint;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapters::{
    apply_lora, apply_lora_values, generate_lora, init_hypernetwork, HyperNetwork, LoraConfig, LoraFactors, LoraVars,
};
use crate::error::{Error, Result};
use crate::microlm::{
    block_forward, embed_forward, generate_with, sequence_loss, ArchConfig, Block, DecodeOptions, Embeddings,
    IncrementalDecoder, LmHead, LmParts, MicroLm, Sampling, SeqExample,
};
use crate::numerics::{kernels, Graph, Parameters, Tensor, Var};
use crate::tasks::vocab::{TokenId, BOS, EOS, INSTR_GENERIC, SEP, STRUCTURAL};

pub use checkpoint::{load_pipeline, read_pipeline, save_pipeline, write_pipeline, PIPELINE_FORMAT_VERSION, PIPELINE_MAGIC};

/// Embeddings plus the first k generator blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct SharedEncoder {
    pub embed: Embeddings,
    pub blocks: Vec<Block>,
}

/// The remaining K−k blocks and the LM head.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptDecoder {
    pub blocks: Vec<Block>,
    pub head: LmHead,
}

impl Parameters for SharedEncoder {
    fn params(&self) -> Vec<&Tensor> {
        let mut v = self.embed.params();
        v.extend(self.blocks.params());
        v
    }
    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = self.embed.params_mut();
        v.extend(self.blocks.params_mut());
        v
    }
}

impl Parameters for PromptDecoder {
    fn params(&self) -> Vec<&Tensor> {
        let mut v = self.blocks.params();
        v.extend(self.head.params());
        v
    }
    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = self.blocks.params_mut();
        v.extend(self.head.params_mut());
        v
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    /// Number of generator blocks in the shared encoder.
    pub split_k: usize,
    pub max_prompt_len: usize,
    pub initial_prompt: Vec<TokenId>,
    /// One hypernetwork for all actor layers.
    pub shared_hypernetwork: bool,
    /// Also freeze a copy of the encoder inside the snapshot.
    pub snapshot_encoder: bool,
    /// Give the parameter branch its own encoder copy, so the branches share
    /// nothing.
    pub independent_param_encoder: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            split_k: 3,
            max_prompt_len: 8,
            initial_prompt: vec![INSTR_GENERIC],
            shared_hypernetwork: false,
            snapshot_encoder: false,
            independent_param_encoder: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptSource {
    SnapshotRollout,
    LiveGreedy,
    ExpertOracle,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptSample {
    pub query: Vec<TokenId>,
    pub prompt: Vec<TokenId>,
    pub source: PromptSource,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PromptMode {
    GreedyLive,
    SampledSnapshot { t: f64, seed: u64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetaTunerModel {
    pub gen_cfg: ArchConfig,
    pub cfg: PipelineConfig,
    /// φ_s
    pub encoder: SharedEncoder,
    /// φ_p
    pub prompt_decoder: PromptDecoder,
    /// φ′_p
    pub snapshot: PromptDecoder,
    pub snapshot_encoder: Option<SharedEncoder>,
    /// Private encoder for the parameter branch when sharing is disabled.
    pub param_encoder: Option<SharedEncoder>,
    /// φ_q
    pub hyper: HyperNetwork,
    /// Frozen.
    pub actor: MicroLm,
    pub lora: LoraConfig,
}

fn banned_in_prompts() -> Vec<TokenId> {
    STRUCTURAL.to_vec()
}

impl MetaTunerModel {
    /// Splits a (warmed) generator at `cfg.split_k` and attaches a freshly
    /// initialised hypernetwork. The actor is frozen.
    pub fn new(generator: MicroLm, mut actor: MicroLm, lora: LoraConfig, cfg: PipelineConfig, hyper_seed: u64) -> Result<Self> {
        let k = cfg.split_k;
        let big_k = generator.cfg.n_layers;
        if k > big_k {
            return Err(Error::Range {
                name: "split_k".into(),
                value: k,
                lo: 0,
                hi: big_k,
            });
        }
        if lora.d_m != actor.cfg.d_model || lora.k_m != actor.cfg.d_model {
            return Err(Error::Config(format!(
                "lora shape {}x{} does not fit actor width {}",
                lora.d_m, lora.k_m, actor.cfg.d_model
            )));
        }
        if cfg.initial_prompt.iter().any(|t| STRUCTURAL.contains(t) || *t == EOS) {
            return Err(Error::Config("initial prompt contains structural tokens".into()));
        }
        let prefix_max = 3 + cfg.initial_prompt.len();
        if prefix_max + cfg.max_prompt_len >= generator.cfg.context_len {
            return Err(Error::Config(format!(
                "generator context {} leaves no room for queries with a {}-token prompt",
                generator.cfg.context_len, cfg.max_prompt_len
            )));
        }
        actor.set_requires_grad(false);
        let hyper = init_hypernetwork(&lora, &generator.cfg, actor.cfg.n_layers, cfg.shared_hypernetwork, hyper_seed)?;
        let MicroLm {
            cfg: gen_cfg,
            embed,
            mut blocks,
            head,
        } = generator;
        let private = blocks.split_off(k);
        let encoder = SharedEncoder { embed, blocks };
        let prompt_decoder = PromptDecoder { blocks: private, head };
        Ok(MetaTunerModel {
            gen_cfg,
            snapshot: prompt_decoder.clone(),
            snapshot_encoder: cfg.snapshot_encoder.then(|| encoder.clone()),
            param_encoder: cfg.independent_param_encoder.then(|| encoder.clone()),
            encoder,
            prompt_decoder,
            hyper,
            actor,
            lora,
            cfg,
        })
    }

    /// Convenience constructor from seeds only (untrained generator/actor).
    pub fn random(gen_cfg: ArchConfig, actor_cfg: ArchConfig, lora: LoraConfig, cfg: PipelineConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let generator = MicroLm::init(gen_cfg, &mut rng)?;
        let actor = MicroLm::init(actor_cfg, &mut rng)?;
        Self::new(generator, actor, lora, cfg, seed ^ 0x9e37_79b9_7f4a_7c15)
    }

    pub fn split_k(&self) -> usize {
        self.encoder.blocks.len()
    }

    /// Generator with live weights: φ_s followed by φ_p.
    pub fn live_parts(&self) -> LmParts<'_> {
        LmParts {
            cfg: &self.gen_cfg,
            embed: &self.encoder.embed,
            blocks: self.encoder.blocks.iter().chain(&self.prompt_decoder.blocks).collect(),
            head: &self.prompt_decoder.head,
        }
    }

    /// Generator used for rollouts: live (or frozen) encoder with φ′_p.
    pub fn snapshot_parts(&self) -> LmParts<'_> {
        let enc = self.snapshot_encoder.as_ref().unwrap_or(&self.encoder);
        LmParts {
            cfg: &self.gen_cfg,
            embed: &enc.embed,
            blocks: enc.blocks.iter().chain(&self.snapshot.blocks).collect(),
            head: &self.snapshot.head,
        }
    }

    /// The live generator reassembled into one model.
    pub fn generator(&self) -> MicroLm {
        MicroLm {
            cfg: self.gen_cfg,
            embed: self.encoder.embed.clone(),
            blocks: self.encoder.blocks.iter().chain(&self.prompt_decoder.blocks).cloned().collect(),
            head: self.prompt_decoder.head.clone(),
        }
    }

    /// Encoder feeding the hypernetwork.
    pub fn meta_encoder(&self) -> &SharedEncoder {
        self.param_encoder.as_ref().unwrap_or(&self.encoder)
    }

    /// `[BOS, p̃, SEP, x]`
    pub fn generator_prefix(&self, x: &[TokenId]) -> Vec<TokenId> {
        let mut v = Vec::with_capacity(x.len() + self.cfg.initial_prompt.len() + 2);
        v.push(BOS);
        v.extend_from_slice(&self.cfg.initial_prompt);
        v.push(SEP);
        v.extend_from_slice(x);
        v
    }

    /// Hidden states after the shared layers, zero-padded to l rows.
    pub fn encode_meta(&self, g: &mut Graph, x: &[TokenId]) -> Result<Var> {
        let tokens = self.generator_prefix(x);
        let enc = self.meta_encoder();
        let mut h = embed_forward(g, &self.gen_cfg, &enc.embed, &tokens)?;
        for block in &enc.blocks {
            h = block_forward(g, &self.gen_cfg, block, h, None)?;
        }
        g.pad_rows(h, self.gen_cfg.context_len)
    }

    pub fn generate_prompt(&self, x: &[TokenId], mode: PromptMode) -> Result<PromptSample> {
        let prefix = self.generator_prefix(x);
        let opts = DecodeOptions {
            eos: EOS,
            banned: banned_in_prompts(),
        };
        let (parts, sampling, source) = match mode {
            PromptMode::GreedyLive => (self.live_parts(), Sampling::Greedy, PromptSource::LiveGreedy),
            PromptMode::SampledSnapshot { t, seed } => (
                self.snapshot_parts(),
                Sampling::Temperature { t, seed },
                PromptSource::SnapshotRollout,
            ),
        };
        let out = generate_with(parts, None, &prefix, self.cfg.max_prompt_len, sampling, &opts)?;
        Ok(PromptSample {
            query: x.to_vec(),
            prompt: out.tokens,
            source,
        })
    }

    /// LoRA factors for query `x`, on the tape.
    pub fn generate_params(&self, g: &mut Graph, x: &[TokenId]) -> Result<LoraVars> {
        let h = self.encode_meta(g, x)?;
        generate_lora(g, &self.hyper, h)
    }

    /// Concrete factors for `x` (no gradients).
    pub fn factor_values(&self, x: &[TokenId]) -> Result<LoraFactors> {
        let mut g = Graph::no_grad();
        let vars = self.generate_params(&mut g, x)?;
        vars.values(&g)
    }

    /// `[BOS, prompt, SEP, x, SEP]`
    pub fn actor_input(prompt: &[TokenId], x: &[TokenId]) -> Vec<TokenId> {
        let mut v = Vec::with_capacity(prompt.len() + x.len() + 3);
        v.push(BOS);
        v.extend_from_slice(prompt);
        v.push(SEP);
        v.extend_from_slice(x);
        v.push(SEP);
        v
    }

    /// Mean cross-entropy of `gold` + EOS under the adapted actor.
    pub fn answer_loss(&self, g: &mut Graph, x: &[TokenId], prompt: &[TokenId], factors: &LoraVars, gold: &[TokenId]) -> Result<Var> {
        let o = apply_lora(g, &self.actor, factors, &self.lora)?;
        let ex = SeqExample::completion(&Self::actor_input(prompt, x), gold);
        sequence_loss(g, &self.actor.parts(), &ex, Some(&o))
    }

    /// Adapted o_proj weights for the cached decoder.
    pub fn adapted_weights(&self, factors: &LoraFactors) -> Result<Vec<Vec<f64>>> {
        apply_lora_values(&self.actor, factors, &self.lora)
    }

    /// Greedy answer of the adapted actor.
    pub fn answer_decode(&self, x: &[TokenId], prompt: &[TokenId], weights: &[Vec<f64>]) -> Result<Vec<TokenId>> {
        actor_greedy(&self.actor, Some(weights.to_vec()), &Self::actor_input(prompt, x))
    }

    /// Sum of log-probabilities of `gold` followed by EOS.
    pub fn answer_loglik(&self, x: &[TokenId], prompt: &[TokenId], weights: &[Vec<f64>], gold: &[TokenId]) -> Result<f64> {
        actor_loglik(&self.actor, Some(weights.to_vec()), &Self::actor_input(prompt, x), gold)
    }

    /// Decoded answer, plus the answer loss when `gold` is given.
    pub fn answer(
        &self,
        x: &[TokenId],
        prompt: &PromptSample,
        factors: &LoraFactors,
        gold: Option<&[TokenId]>,
    ) -> Result<(Vec<TokenId>, Option<f64>)> {
        let weights = self.adapted_weights(factors)?;
        let decoded = self.answer_decode(x, &prompt.prompt, &weights)?;
        let loss = match gold {
            Some(gold) => {
                let mut g = Graph::no_grad();
                let vars = LoraVars {
                    layers: factors
                        .layers
                        .iter()
                        .map(|(b, a)| Ok((g.constant(b.shape(), b.data.clone())?, g.constant(a.shape(), a.data.clone())?)))
                        .collect::<Result<_>>()?,
                };
                let l = self.answer_loss(&mut g, x, &prompt.prompt, &vars, gold)?;
                Some(g.scalar(l))
            }
            None => None,
        };
        Ok((decoded, loss))
    }

    /// Greedy live prompt, generated factors, greedy answer.
    pub fn solve(&self, x: &[TokenId]) -> Result<(PromptSample, Vec<TokenId>)> {
        let prompt = self.generate_prompt(x, PromptMode::GreedyLive)?;
        let weights = self.adapted_weights(&self.factor_values(x)?)?;
        let answer = self.answer_decode(x, &prompt.prompt, &weights)?;
        Ok((prompt, answer))
    }

    /// Generator cross-entropy on `prompt` + EOS given `[BOS, p̃, SEP, x]`,
    /// through live φ_s and φ_p.
    pub fn prompt_loss(&self, g: &mut Graph, x: &[TokenId], prompt: &[TokenId]) -> Result<Var> {
        let ex = SeqExample::completion(&self.generator_prefix(x), prompt);
        sequence_loss(g, &self.live_parts(), &ex, None)
    }

    pub fn update_snapshot(&mut self) {
        self.snapshot = self.prompt_decoder.clone();
        if self.snapshot_encoder.is_some() {
            self.snapshot_encoder = Some(self.encoder.clone());
        }
    }

    pub fn snapshot_matches_live(&self) -> bool {
        self.snapshot == self.prompt_decoder
            && self.snapshot_encoder.as_ref().is_none_or(|e| *e == self.encoder)
    }
}

fn answer_options() -> DecodeOptions {
    DecodeOptions {
        eos: EOS,
        banned: STRUCTURAL.to_vec(),
    }
}

/// Greedy continuation of an actor input up to the context window.
pub fn actor_greedy(actor: &MicroLm, o_proj: Option<Vec<Vec<f64>>>, input: &[TokenId]) -> Result<Vec<TokenId>> {
    let room = actor.cfg.context_len.checked_sub(input.len()).ok_or(Error::Length {
        len: input.len(),
        max: actor.cfg.context_len,
    })?;
    Ok(generate_with(actor.parts(), o_proj, input, room.max(1), Sampling::Greedy, &answer_options())?.tokens)
}

/// Teacher-forced log-likelihood of `gold` + EOS after `input`.
pub fn actor_loglik(actor: &MicroLm, o_proj: Option<Vec<Vec<f64>>>, input: &[TokenId], gold: &[TokenId]) -> Result<f64> {
    let mut dec = IncrementalDecoder::new(actor.parts(), o_proj)?;
    let mut logits = dec.prefill(input)?;
    let mut total = 0.0;
    for (i, &t) in gold.iter().chain(std::iter::once(&EOS)).enumerate() {
        total += logits[t] - kernels::log_sum_exp(&logits);
        if i < gold.len() {
            logits = dec.push(t)?;
        }
    }
    Ok(total)
}

