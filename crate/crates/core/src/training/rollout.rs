use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::seeds;
use crate::adapters::LoraFactors;
use crate::error::Result;
use crate::pipeline::{MetaTunerModel, PromptMode};
use crate::tasks::vocab::TokenId;
use crate::tasks::{reward, Example, TaskKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    OracleWarmup,
    SelfRollout,
}

/// A (query, prompt) pair whose prompt produced the correct answer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertPair {
    pub x: Vec<TokenId>,
    pub kind: TaskKind,
    pub prompt: Vec<TokenId>,
    /// The answer that earned the reward at collection time.
    pub answer: Vec<TokenId>,
    pub provenance: Provenance,
    pub actor_loglik: f64,
}

impl ExpertPair {
    /// Re-scores the stored answer with the task oracle.
    pub fn reverify(&self) -> bool {
        reward(self.kind, &self.x, &self.answer) == 1
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutRecord {
    pub query: Vec<TokenId>,
    pub kind: TaskKind,
    pub prompt: Vec<TokenId>,
    /// Short hash of the generated factors.
    pub factors_hash: String,
    /// Frobenius norm of each layer's θᵇθᵃ scaled by λ.
    pub delta_norms: Vec<f64>,
    pub answer: Vec<TokenId>,
    pub reward: u8,
    pub actor_loglik: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RolloutBatch {
    /// At most one pair per query.
    pub pairs: Vec<ExpertPair>,
    /// Every sampled rollout, query-major.
    pub records: Vec<RolloutRecord>,
    /// The first sampled prompt of each query.
    pub first_prompts: Vec<Vec<TokenId>>,
}

pub fn factors_hash(f: &LoraFactors) -> String {
    let mut h = Sha256::new();
    for (b, a) in &f.layers {
        for v in b.data.iter().chain(&a.data) {
            h.update(v.to_le_bytes());
        }
    }
    hex::encode(&h.finalize()[..8])
}

pub fn delta_norms(f: &LoraFactors, lambda: f64) -> Vec<f64> {
    f.layers
        .iter()
        .map(|(b, a)| {
            let (d, r) = b.dims2();
            let k = a.shape()[1];
            let m = crate::numerics::kernels::matmul(&b.data, &a.data, d, r, k);
            lambda * m.iter().map(|x| x * x).sum::<f64>().sqrt()
        })
        .collect()
}

/// Samples `n` prompts per query from the snapshot branch, answers each
/// greedily through the adapted actor, and keeps for each query the correct
/// prompt with the highest gold log-likelihood (then shortest, then
/// lexicographically smallest). Queries without a correct prompt are skipped.
pub fn build_expert_set(model: &MetaTunerModel, batch: &[Example], t: f64, n: usize, seed: u64) -> Result<RolloutBatch> {
    let mut out = RolloutBatch {
        pairs: Vec::new(),
        records: Vec::with_capacity(batch.len() * n),
        first_prompts: Vec::with_capacity(batch.len()),
    };
    for (qi, ex) in batch.iter().enumerate() {
        let factors = model.factor_values(&ex.x)?;
        let weights = model.adapted_weights(&factors)?;
        let hash = factors_hash(&factors);
        let norms = delta_norms(&factors, model.lora.lambda);
        let mut seen: HashMap<Vec<TokenId>, (Vec<TokenId>, f64)> = HashMap::new();
        let mut best: Option<ExpertPair> = None;
        for j in 0..n {
            let s = seeds::derive(seed, &[qi as u64, j as u64]);
            let prompt = model.generate_prompt(&ex.x, PromptMode::SampledSnapshot { t, seed: s })?.prompt;
            if j == 0 {
                out.first_prompts.push(prompt.clone());
            }
            let (answer, loglik) = match seen.get(&prompt) {
                Some(v) => v.clone(),
                None => {
                    let answer = model.answer_decode(&ex.x, &prompt, &weights)?;
                    let ll = model.answer_loglik(&ex.x, &prompt, &weights, &ex.y)?;
                    seen.insert(prompt.clone(), (answer.clone(), ll));
                    (answer, ll)
                }
            };
            let r = reward(ex.kind, &ex.x, &answer);
            if r == 1 {
                let better = match &best {
                    None => true,
                    Some(b) => {
                        loglik > b.actor_loglik
                            || (loglik == b.actor_loglik
                                && (prompt.len(), &prompt) < (b.prompt.len(), &b.prompt))
                    }
                };
                if better {
                    best = Some(ExpertPair {
                        x: ex.x.clone(),
                        kind: ex.kind,
                        prompt: prompt.clone(),
                        answer: answer.clone(),
                        provenance: Provenance::SelfRollout,
                        actor_loglik: loglik,
                    });
                }
            }
            out.records.push(RolloutRecord {
                query: ex.x.clone(),
                kind: ex.kind,
                prompt,
                factors_hash: hash.clone(),
                delta_norms: norms.clone(),
                answer,
                reward: r,
                actor_loglik: loglik,
            });
        }
        out.pairs.extend(best);
    }
    Ok(out)
}
