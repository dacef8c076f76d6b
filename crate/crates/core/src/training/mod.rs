//! Warm-up stages, expert-set construction, the joint objective and its two
//! optimisation schedules, and evaluation.

mod config;
mod eval;
mod rollout;
pub mod seeds;
mod trainer;
mod warmup;

pub use config::{Ablation, Schedule, TrainConfig, WarmupConfig};
pub use eval::{evaluate, Answerer, EvalReport, PromptPolicy, PromptedActor, ScriptedModel, TaskScore};
pub use rollout::{build_expert_set, delta_norms, factors_hash, ExpertPair, Provenance, RolloutBatch, RolloutRecord};
pub use trainer::{loss_joint, GradAudit, JointLoss, StepMetrics, Trainer};
pub use warmup::{warmup_actor, warmup_generator, GeneratorWarmup, SftReport};
