use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{Ablation, Schedule, TrainConfig};
use super::eval::evaluate;
use super::rollout::{build_expert_set, ExpertPair};
use super::seeds;
use crate::error::{Error, Result};
use crate::numerics::{Adam, Graph, Parameters, Var};
use crate::pipeline::MetaTunerModel;
use crate::tasks::vocab::TokenId;
use crate::tasks::Example;

/// One step's objective on a tape.
pub struct JointLoss {
    pub graph: Graph,
    /// Mean answer loss through the generated adapters.
    pub term1: Option<Var>,
    /// Mean generator loss on expert prompts.
    pub term2: Option<Var>,
    /// term1 + α·term2 over the active terms.
    pub combined: Option<Var>,
}

impl JointLoss {
    pub fn term1_value(&self) -> Option<f64> {
        self.term1.map(|v| self.graph.scalar(v))
    }

    pub fn term2_value(&self) -> Option<f64> {
        self.term2.map(|v| self.graph.scalar(v))
    }

    pub fn combined_value(&self) -> Option<f64> {
        self.combined.map(|v| self.graph.scalar(v))
    }
}

/// Builds the surrogate objective. `prompts[i]` is the (detached) prompt
/// for `batch[i]`. An empty `d2` makes the prompt term absent.
pub fn loss_joint(
    model: &MetaTunerModel,
    batch: &[Example],
    prompts: &[Vec<TokenId>],
    d2: &[ExpertPair],
    alpha: f64,
    use_answer: bool,
    use_prompt: bool,
) -> Result<JointLoss> {
    if prompts.len() != batch.len() {
        return Err(Error::shape("term-1 prompts", &[prompts.len()], &[batch.len()]));
    }
    let mut g = Graph::new();
    let term1 = if use_answer && !batch.is_empty() {
        let mut losses = Vec::with_capacity(batch.len());
        for (ex, p) in batch.iter().zip(prompts) {
            let f = model.generate_params(&mut g, &ex.x)?;
            losses.push(model.answer_loss(&mut g, &ex.x, p, &f, &ex.y)?);
        }
        Some(g.mean_of(&losses)?)
    } else {
        None
    };
    let term2 = if use_prompt {
        if d2.is_empty() {
            log::warn!("expert set is empty; prompt term is zero this step");
            None
        } else {
            let losses = d2
                .iter()
                .map(|p| model.prompt_loss(&mut g, &p.x, &p.prompt))
                .collect::<Result<Vec<_>>>()?;
            Some(g.mean_of(&losses)?)
        }
    } else {
        None
    };
    let combined = match (term1, term2) {
        (Some(a), Some(b)) => {
            let b = g.scale(b, alpha);
            Some(g.add(a, b)?)
        }
        (Some(a), None) => Some(a),
        (None, Some(b)) => Some(g.scale(b, alpha)),
        (None, None) => None,
    };
    Ok(JointLoss {
        graph: g,
        term1,
        term2,
        combined,
    })
}

/// One line of the metrics stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub schedule: Schedule,
    pub term1: Option<f64>,
    pub term2: Option<f64>,
    pub alpha: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub dev_reward: Option<f64>,
    pub snapshot_age: usize,
    pub seed: u64,
    /// Expert pairs collected this step.
    pub d2_pairs: usize,
}

impl StepMetrics {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("metrics serialize")
    }
}

/// Result of checking that the answer term leaves the private decoder alone.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradAudit {
    pub step: usize,
    pub max_private_grad: f64,
}

pub struct Trainer<'a> {
    pub model: MetaTunerModel,
    pub cfg: TrainConfig,
    train: &'a [Example],
    dev: &'a [Example],
    opt_shared: Adam,
    opt_private: Adam,
    opt_hyper: Adam,
    opt_param_encoder: Adam,
    step: usize,
    snapshot_age: usize,
    order: Vec<usize>,
    cursor: usize,
    shuffle: ChaCha8Rng,
    /// Every expert pair collected so far.
    pub collected: Vec<ExpertPair>,
    pub audits: Vec<GradAudit>,
}

impl<'a> Trainer<'a> {
    pub fn new(mut model: MetaTunerModel, cfg: TrainConfig, train: &'a [Example], dev: &'a [Example]) -> Result<Self> {
        cfg.validate()?;
        if train.is_empty() || dev.is_empty() {
            return Err(Error::Config("training needs nonempty train and dev sets".into()));
        }
        if cfg.ablation == Ablation::WoS {
            if model.param_encoder.is_none() {
                model.param_encoder = Some(model.encoder.clone());
                model.cfg.independent_param_encoder = true;
            }
        } else if model.param_encoder.is_some() {
            return Err(Error::Config(format!(
                "model has an independent parameter encoder but ablation is {}",
                cfg.ablation
            )));
        }
        let lr = cfg.lr;
        Ok(Trainer {
            model,
            train,
            dev,
            opt_shared: Adam::new(lr),
            opt_private: Adam::new(lr),
            opt_hyper: Adam::new(cfg.hyper_lr.unwrap_or(lr)),
            opt_param_encoder: Adam::new(lr),
            step: 0,
            snapshot_age: 0,
            order: Vec::new(),
            cursor: 0,
            shuffle: ChaCha8Rng::seed_from_u64(seeds::derive(cfg.seed, &[0x5eed])),
            collected: Vec::new(),
            audits: Vec::new(),
            cfg,
        })
    }

    pub fn steps_done(&self) -> usize {
        self.step
    }

    fn next_batch(&mut self) -> Vec<Example> {
        let mut out = Vec::with_capacity(self.cfg.batch_size);
        while out.len() < self.cfg.batch_size {
            if self.cursor >= self.order.len() {
                self.order = (0..self.train.len()).collect();
                self.order.shuffle(&mut self.shuffle);
                self.cursor = 0;
            }
            out.push(self.train[self.order[self.cursor]].clone());
            self.cursor += 1;
        }
        out
    }

    fn dev_slice(&self) -> &'a [Example] {
        match self.cfg.eval_size {
            0 => self.dev,
            n => &self.dev[..n.min(self.dev.len())],
        }
    }

    /// Dev reward of the current model.
    pub fn dev_reward(&self) -> Result<f64> {
        Ok(evaluate(&self.model, self.dev_slice(), false)?.mean_reward)
    }

    fn audit(&mut self, batch: &[Example], prompts: &[Vec<TokenId>]) -> Result<()> {
        let mut loss = loss_joint(&self.model, batch, prompts, &[], 0.0, true, false)?;
        let Some(t1) = loss.term1 else { return Ok(()) };
        loss.graph.backward(t1)?;
        self.model.prompt_decoder.zero_grad();
        loss.graph.accumulate_grads(self.model.prompt_decoder.params_mut());
        let max = self
            .model
            .prompt_decoder
            .params()
            .iter()
            .flat_map(|t| t.grad.iter())
            .fold(0.0f64, |m, g| m.max(g.abs()));
        self.model.prompt_decoder.zero_grad();
        self.audits.push(GradAudit {
            step: self.step,
            max_private_grad: max,
        });
        Ok(())
    }

    /// Joint step on term1 + α·term2.
    pub fn step_j(&mut self, batch: &[Example]) -> Result<StepMetrics> {
        let abl = self.cfg.ablation;
        self.update(batch, abl.uses_answer_term(), abl.uses_prompt_term())
    }

    /// Alternating step: answer term on even steps, prompt term on odd ones.
    pub fn step_i(&mut self, batch: &[Example]) -> Result<StepMetrics> {
        let abl = self.cfg.ablation;
        if self.step % 2 == 0 {
            self.update(batch, abl.uses_answer_term(), false)
        } else {
            self.update(batch, false, abl.uses_prompt_term())
        }
    }

    pub fn step(&mut self) -> Result<StepMetrics> {
        let batch = self.next_batch();
        match self.cfg.schedule {
            Schedule::J => self.step_j(&batch),
            Schedule::I => self.step_i(&batch),
        }
    }

    fn update(&mut self, batch: &[Example], use_answer: bool, use_prompt: bool) -> Result<StepMetrics> {
        let cfg = self.cfg.clone();
        let step_seed = seeds::derive(cfg.seed, &[self.step as u64]);
        let rollouts = build_expert_set(&self.model, batch, cfg.temperature, cfg.rollouts, step_seed)?;
        if cfg.audit_every > 0 && self.step % cfg.audit_every == 0 && cfg.ablation.uses_answer_term() {
            self.audit(batch, &rollouts.first_prompts)?;
        }
        let mut loss = loss_joint(
            &self.model,
            batch,
            &rollouts.first_prompts,
            &rollouts.pairs,
            cfg.alpha,
            use_answer,
            use_prompt,
        )?;
        let term1 = loss.term1_value();
        let term2 = loss.term2_value();
        if let Some(c) = loss.combined {
            let v = loss.graph.scalar(c);
            if !v.is_finite() || term1.is_some_and(|t| t > cfg.divergence_limit) {
                return Err(Error::Divergence {
                    step: self.step,
                    reason: format!("loss {v}, answer term {term1:?}"),
                });
            }
            loss.graph.backward(c)?;
            let wo_s = cfg.ablation == Ablation::WoS;
            let m = &mut self.model;
            m.encoder.zero_grad();
            m.prompt_decoder.zero_grad();
            m.hyper.zero_grad();
            loss.graph.accumulate_grads(m.encoder.params_mut());
            loss.graph.accumulate_grads(m.prompt_decoder.params_mut());
            loss.graph.accumulate_grads(m.hyper.params_mut());
            if let Some(pe) = m.param_encoder.as_mut() {
                pe.zero_grad();
                loss.graph.accumulate_grads(pe.params_mut());
            }
            if (use_answer && !wo_s && loss.term1.is_some()) || loss.term2.is_some() {
                self.opt_shared.step(m.encoder.params_mut());
            }
            if loss.term2.is_some() {
                self.opt_private.step(m.prompt_decoder.params_mut());
            }
            if loss.term1.is_some() {
                self.opt_hyper.step(m.hyper.params_mut());
                if let Some(pe) = m.param_encoder.as_mut() {
                    self.opt_param_encoder.step(pe.params_mut());
                }
            }
        }
        self.collected.extend(rollouts.pairs.iter().cloned());
        let age = self.snapshot_age;
        self.step += 1;
        self.snapshot_age += 1;
        if self.step % cfg.snapshot_every == 0 {
            self.model.update_snapshot();
            self.snapshot_age = 0;
        }
        let eval_now = self.step == cfg.steps || (cfg.eval_every > 0 && self.step % cfg.eval_every == 0);
        let dev_reward = if eval_now { Some(self.dev_reward()?) } else { None };
        Ok(StepMetrics {
            step: self.step - 1,
            schedule: cfg.schedule,
            term1,
            term2,
            alpha: cfg.alpha,
            dev_reward,
            snapshot_age: age,
            seed: cfg.seed,
            d2_pairs: rollouts.pairs.len(),
        })
    }

    /// Runs the remaining configured steps, handing each record to `sink`.
    pub fn run(&mut self, mut sink: impl FnMut(&StepMetrics) -> Result<()>) -> Result<Vec<StepMetrics>> {
        let mut all = Vec::with_capacity(self.cfg.steps.saturating_sub(self.step));
        while self.step < self.cfg.steps {
            let m = self.step()?;
            sink(&m)?;
            all.push(m);
        }
        Ok(all)
    }
}
