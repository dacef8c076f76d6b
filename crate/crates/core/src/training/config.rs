use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Schedule {
    /// Alternating: even steps fit the answer term, odd steps the prompt term.
    I,
    /// Joint: one step on term1 + α·term2.
    J,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Ablation {
    #[serde(rename = "none")]
    None,
    /// No answer term; the hypernetwork never moves.
    #[serde(rename = "wo_F")]
    WoF,
    /// No prompt term; the private decoder never moves.
    #[serde(rename = "wo_P")]
    WoP,
    /// The parameter branch gets its own encoder copy.
    #[serde(rename = "wo_S")]
    WoS,
}

impl Ablation {
    pub const ALL: [Ablation; 4] = [Ablation::None, Ablation::WoF, Ablation::WoP, Ablation::WoS];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::None => "none",
            Ablation::WoF => "wo_F",
            Ablation::WoP => "wo_P",
            Ablation::WoS => "wo_S",
        }
    }

    pub fn uses_answer_term(self) -> bool {
        self != Ablation::WoF
    }

    pub fn uses_prompt_term(self) -> bool {
        self != Ablation::WoP
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Value(format!("unknown ablation {s:?} (none, wo_F, wo_P, wo_S)")))
    }
}

impl fmt::Display for Schedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Schedule::I => "I",
            Schedule::J => "J",
        })
    }
}

impl FromStr for Schedule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "I" | "i" => Ok(Schedule::I),
            "J" | "j" => Ok(Schedule::J),
            _ => Err(Error::Value(format!("unknown schedule {s:?} (I or J)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Weight of the prompt regularizer.
    pub alpha: f64,
    /// Rollout sampling temperature.
    pub temperature: f64,
    /// Prompts sampled per query when building the expert set.
    pub rollouts: usize,
    pub snapshot_every: usize,
    pub lr: f64,
    /// Learning rate of the hypernetwork; `None` uses `lr`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub hyper_lr: Option<f64>,
    pub batch_size: usize,
    pub steps: usize,
    pub schedule: Schedule,
    pub ablation: Ablation,
    pub seed: u64,
    /// Dev evaluation period in steps; 0 evaluates only at the end.
    pub eval_every: usize,
    /// Dev examples used for periodic evaluation; 0 means all.
    pub eval_size: usize,
    /// Abort when the answer loss exceeds this.
    pub divergence_limit: f64,
    /// Check that answer-term gradients on the private decoder are exactly
    /// zero every this many steps; 0 disables.
    pub audit_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            alpha: 0.5,
            temperature: 0.9,
            rollouts: 4,
            snapshot_every: 10,
            lr: 1e-3,
            hyper_lr: Some(3e-3),
            batch_size: 16,
            steps: 500,
            schedule: Schedule::J,
            ablation: Ablation::None,
            seed: 0,
            eval_every: 0,
            eval_size: 0,
            divergence_limit: 50.0,
            audit_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0) {
            return Err(Error::Config(format!("alpha must be >= 0, got {}", self.alpha)));
        }
        if !(self.temperature >= 0.0) {
            return Err(Error::Config(format!("temperature must be >= 0, got {}", self.temperature)));
        }
        if !(self.lr >= 0.0) || self.hyper_lr.is_some_and(|l| !(l >= 0.0)) {
            return Err(Error::Config("learning rates must be >= 0".into()));
        }
        for (name, v) in [
            ("rollouts", self.rollouts),
            ("snapshot_every", self.snapshot_every),
            ("batch_size", self.batch_size),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be >= 1")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WarmupConfig {
    pub actor_epochs: usize,
    pub actor_lr: f64,
    pub actor_batch: usize,
    pub generator_epochs: usize,
    pub generator_lr: f64,
    pub generator_batch: usize,
    pub seed: u64,
}

impl Default for WarmupConfig {
    fn default() -> Self {
        WarmupConfig {
            actor_epochs: 8,
            actor_lr: 3e-3,
            actor_batch: 16,
            generator_epochs: 1,
            generator_lr: 3e-3,
            generator_batch: 16,
            seed: 0,
        }
    }
}
