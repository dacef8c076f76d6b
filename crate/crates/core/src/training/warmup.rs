use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::eval::PromptPolicy;
use super::rollout::{ExpertPair, Provenance};
use crate::error::{Error, Result};
use crate::microlm::{sequence_loss, sft_step, MicroLm, SeqExample};
use crate::numerics::{Adam, Graph, Parameters};
use crate::pipeline::{actor_greedy, actor_loglik, MetaTunerModel};
use crate::tasks::vocab::TokenId;
use crate::tasks::{reward, Example, TaskKind};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SftReport {
    /// Mean loss over the training set before the first step.
    pub loss_before: f64,
    /// Mean loss after the last epoch.
    pub loss_after: f64,
    /// Mean pre-step batch loss per epoch.
    pub epoch_losses: Vec<f64>,
}

fn mean_loss(parts_loss: impl Fn(&mut Graph, &SeqExample) -> Result<f64>, data: &[SeqExample]) -> Result<f64> {
    let mut g = Graph::no_grad();
    let mut s = 0.0;
    for ex in data {
        s += parts_loss(&mut g, ex)?;
    }
    Ok(s / data.len() as f64)
}

/// Cosine decay from `lr` to `lr / 10` over `total` steps.
fn cosine_lr(lr: f64, step: usize, total: usize) -> f64 {
    let frac = step as f64 / total.max(1) as f64;
    lr * (0.1 + 0.9 * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos()))
}

fn batches(n: usize, batch: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order.chunks(batch.max(1)).map(|c| c.to_vec()).collect()
}

/// Actor SFT on `[BOS, prompt, SEP, x, SEP] → y EOS`.
pub fn warmup_actor(
    actor: &mut MicroLm,
    d1: &[Example],
    policy: &PromptPolicy,
    epochs: usize,
    lr: f64,
    batch: usize,
    seed: u64,
) -> Result<SftReport> {
    if d1.is_empty() {
        return Err(Error::Value("actor warm-up needs a nonempty dataset".into()));
    }
    let data: Vec<SeqExample> = d1
        .iter()
        .map(|ex| SeqExample::completion(&MetaTunerModel::actor_input(&policy.prompt_for(ex.kind), &ex.x), &ex.y))
        .collect();
    let eval = |m: &MicroLm| {
        mean_loss(
            |g, ex| {
                let l = sequence_loss(g, &m.parts(), ex, None)?;
                Ok(g.scalar(l))
            },
            &data,
        )
    };
    let loss_before = eval(actor)?;
    let mut opt = Adam::new(lr);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut epoch_losses = Vec::with_capacity(epochs);
    let total = epochs * data.len().div_ceil(batch.max(1));
    for _ in 0..epochs {
        let mut sum = 0.0;
        let bs = batches(data.len(), batch, &mut rng);
        for b in &bs {
            opt.lr = cosine_lr(lr, opt.steps_taken() as usize, total);
            let chunk: Vec<SeqExample> = b.iter().map(|&i| data[i].clone()).collect();
            sum += sft_step(actor, &mut opt, &chunk)?;
        }
        epoch_losses.push(sum / bs.len() as f64);
    }
    let loss_after = if epochs == 0 { loss_before } else { eval(actor)? };
    Ok(SftReport {
        loss_before,
        loss_after,
        epoch_losses,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorWarmup {
    pub kept: Vec<ExpertPair>,
    pub proposed: usize,
    pub keep_rate: f64,
    pub sft: SftReport,
}

/// Rejection-sampled prompt SFT: the oracle proposes a prompt per query,
/// pairs survive only if the (unadapted) actor then answers correctly, and
/// the generator is fit to the survivors. Refreshes the snapshot.
pub fn warmup_generator(
    model: &mut MetaTunerModel,
    d1: &[Example],
    oracle: &dyn Fn(TaskKind) -> Vec<TokenId>,
    epochs: usize,
    lr: f64,
    batch: usize,
    seed: u64,
) -> Result<GeneratorWarmup> {
    let mut kept = Vec::new();
    for ex in d1 {
        let prompt = oracle(ex.kind);
        let input = MetaTunerModel::actor_input(&prompt, &ex.x);
        let answer = actor_greedy(&model.actor, None, &input)?;
        if reward(ex.kind, &ex.x, &answer) == 1 {
            kept.push(ExpertPair {
                x: ex.x.clone(),
                kind: ex.kind,
                actor_loglik: actor_loglik(&model.actor, None, &input, &ex.y)?,
                prompt,
                answer,
                provenance: Provenance::OracleWarmup,
            });
        }
    }
    if kept.is_empty() {
        return Err(Error::Config(
            "no oracle prompt led the actor to a correct answer; the tasks are too hard for this warm-up".into(),
        ));
    }
    let data: Vec<SeqExample> = kept
        .iter()
        .map(|p| SeqExample::completion(&model.generator_prefix(&p.x), &p.prompt))
        .collect();
    let eval = |m: &MetaTunerModel| {
        mean_loss(
            |g, ex| {
                let l = sequence_loss(g, &m.live_parts(), ex, None)?;
                Ok(g.scalar(l))
            },
            &data,
        )
    };
    let loss_before = eval(model)?;
    let mut opt = Adam::new(lr);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut epoch_losses = Vec::with_capacity(epochs);
    let total = epochs * data.len().div_ceil(batch.max(1));
    for _ in 0..epochs {
        let bs = batches(data.len(), batch, &mut rng);
        let mut sum = 0.0;
        for b in &bs {
            opt.lr = cosine_lr(lr, opt.steps_taken() as usize, total);
            let mut g = Graph::new();
            let losses = b
                .iter()
                .map(|&i| sequence_loss(&mut g, &model.live_parts(), &data[i], None))
                .collect::<Result<Vec<_>>>()?;
            let loss = g.mean_of(&losses)?;
            let v = g.scalar(loss);
            if !v.is_finite() {
                return Err(Error::Divergence {
                    step: opt.steps_taken() as usize,
                    reason: format!("non-finite generator loss {v}"),
                });
            }
            sum += v;
            g.backward(loss)?;
            model.encoder.zero_grad();
            model.prompt_decoder.zero_grad();
            g.accumulate_grads(model.encoder.params_mut());
            g.accumulate_grads(model.prompt_decoder.params_mut());
            let mut params = model.encoder.params_mut();
            params.extend(model.prompt_decoder.params_mut());
            opt.step(params);
        }
        epoch_losses.push(sum / bs.len() as f64);
    }
    let loss_after = if epochs == 0 { loss_before } else { eval(model)? };
    model.update_snapshot();
    if let Some(enc) = model.param_encoder.as_mut() {
        *enc = model.encoder.clone();
    }
    Ok(GeneratorWarmup {
        proposed: d1.len(),
        keep_rate: kept.len() as f64 / d1.len().max(1) as f64,
        kept,
        sft: SftReport {
            loss_before,
            loss_after,
            epoch_losses,
        },
    })
}
