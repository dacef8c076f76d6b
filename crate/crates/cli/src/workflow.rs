//! The stages behind the commands, usable without touching the filesystem.

use anyhow::{Context, Result};
use metatuner::adapters::init_hypernetwork;
use metatuner::microlm::MicroLm;
use metatuner::pipeline::{MetaTunerModel, PromptMode};
use metatuner::tasks::{expert_prompt_oracle, generate_dataset, GeneratedData, TaskKind};
use metatuner::training::{
    evaluate, seeds, warmup_actor, warmup_generator, EvalReport, ExpertPair, GeneratorWarmup, GradAudit, PromptPolicy,
    PromptedActor, SftReport, StepMetrics, Trainer,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;

pub fn build_data(cfg: &RunConfig) -> Result<GeneratedData> {
    Ok(generate_dataset(&cfg.suite, cfg.data_seed)?)
}

fn rng(cfg: &RunConfig, stream: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seeds::derive(cfg.warmup.seed, &[stream]))
}

pub fn hyper_seed(cfg: &RunConfig) -> u64 {
    seeds::derive(cfg.warmup.seed, &[3])
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WarmupSummary {
    pub actor: SftReport,
    /// Actor reward on the pretraining dev split with instructions given.
    pub actor_dev: EvalReport,
    pub generator: SftReport,
    pub proposed: usize,
    pub kept: usize,
    pub keep_rate: f64,
    /// Fraction of seen-kind dev queries whose greedy prompt is the
    /// oracle instruction.
    pub prompt_match: f64,
}

pub struct Warmed {
    pub model: MetaTunerModel,
    pub expert_set: Vec<ExpertPair>,
    pub summary: WarmupSummary,
}

/// Actor SFT on the instructed mixture, then rejection-sampled generator SFT.
pub fn warm_up(cfg: &RunConfig, data: &GeneratedData) -> Result<Warmed> {
    cfg.validate()?;
    let w = &cfg.warmup;
    let mut actor = MicroLm::init(cfg.actor, &mut rng(cfg, 1))?;
    log::info!("actor warm-up: {} examples, {} epochs", data.pretrain_mix.train.len(), w.actor_epochs);
    let actor_rep = warmup_actor(
        &mut actor,
        &data.pretrain_mix.train,
        &PromptPolicy::Instruction,
        w.actor_epochs,
        w.actor_lr,
        w.actor_batch,
        seeds::derive(w.seed, &[4]),
    )?;
    let actor_dev = evaluate(
        &PromptedActor {
            actor: &actor,
            policy: PromptPolicy::Instruction,
        },
        &data.pretrain_mix.dev,
        false,
    )?;
    log::info!("actor dev reward {:.4}", actor_dev.mean_reward);
    let generator = MicroLm::init(cfg.generator, &mut rng(cfg, 2))?;
    let mut model = MetaTunerModel::new(generator, actor, cfg.lora_config()?, cfg.pipeline.clone(), hyper_seed(cfg))?;
    let split = cfg.split.pick(data);
    let gw: GeneratorWarmup = warmup_generator(
        &mut model,
        &split.train,
        &expert_prompt_oracle,
        w.generator_epochs,
        w.generator_lr,
        w.generator_batch,
        seeds::derive(w.seed, &[5]),
    )
    .context("generator warm-up")?;
    let prompt_match = prompt_match(&model, data)?;
    log::info!("generator keep rate {:.3}, prompt match {:.3}", gw.keep_rate, prompt_match);
    Ok(Warmed {
        model,
        summary: WarmupSummary {
            actor: actor_rep,
            actor_dev,
            generator: gw.sft.clone(),
            proposed: gw.proposed,
            kept: gw.kept.len(),
            keep_rate: gw.keep_rate,
            prompt_match,
        },
        expert_set: gw.kept,
    })
}

fn prompt_match(model: &MetaTunerModel, data: &GeneratedData) -> Result<f64> {
    let seen: Vec<_> = data
        .stress_suite
        .dev
        .iter()
        .filter(|e| TaskKind::PRETRAIN.contains(&e.kind))
        .collect();
    let mut hit = 0;
    for ex in &seen {
        let p = model.generate_prompt(&ex.x, PromptMode::GreedyLive)?;
        if p.prompt == expert_prompt_oracle(ex.kind) {
            hit += 1;
        }
    }
    Ok(hit as f64 / seen.len().max(1) as f64)
}

/// Makes a warmed model agree with the adapter section of `cfg`. The
/// hypernetwork is rebuilt (zero up-projections) when rank or scale changed.
pub fn conform_lora(cfg: &RunConfig, model: &mut MetaTunerModel) -> Result<()> {
    let want = cfg.lora_config()?;
    if model.lora != want {
        model.lora = want;
        model.hyper = init_hypernetwork(&want, &model.gen_cfg, model.actor.cfg.n_layers, model.cfg.shared_hypernetwork, hyper_seed(cfg))?;
    }
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainSummary {
    pub schedule: String,
    pub ablation: String,
    pub steps: usize,
    pub step0_dev: f64,
    pub step0_test: f64,
    pub final_dev: f64,
    pub final_test: f64,
    pub best_dev: f64,
    pub best_step: usize,
    pub final_test_report: EvalReport,
    pub expert_pairs: usize,
    pub expert_pairs_reverified: usize,
    pub max_audited_private_grad: Option<f64>,
}

pub struct Trained {
    pub model: MetaTunerModel,
    pub metrics: Vec<StepMetrics>,
    pub collected: Vec<ExpertPair>,
    pub audits: Vec<GradAudit>,
    pub summary: TrainSummary,
}

/// Runs the joint stage. `on_step` sees every record and the model after
/// that step; it reports whether the record set a new best dev reward.
pub fn train(
    cfg: &RunConfig,
    mut model: MetaTunerModel,
    data: &GeneratedData,
    mut on_step: impl FnMut(&StepMetrics, &MetaTunerModel, bool) -> Result<()>,
) -> Result<Trained> {
    cfg.validate()?;
    conform_lora(cfg, &mut model)?;
    let split = cfg.split.pick(data);
    let step0_dev = evaluate(&model, &split.dev, false)?.mean_reward;
    let step0_test = evaluate(&model, &split.test, false)?.mean_reward;
    let mut tr = Trainer::new(model, cfg.train.clone(), &split.train, &split.dev)?;
    let mut metrics = Vec::with_capacity(cfg.train.steps);
    let (mut best_dev, mut best_step) = (step0_dev, 0);
    while tr.steps_done() < cfg.train.steps {
        let m = tr.step()?;
        let improved = m.dev_reward.is_some_and(|d| d > best_dev);
        if improved {
            best_dev = m.dev_reward.unwrap_or(best_dev);
            best_step = m.step + 1;
        }
        on_step(&m, &tr.model, improved)?;
        metrics.push(m);
    }
    let final_dev = match metrics.last().and_then(|m| m.dev_reward) {
        Some(d) => d,
        None => tr.dev_reward()?,
    };
    let report = evaluate(&tr.model, &split.test, false)?;
    let reverified = tr.collected.iter().filter(|p| p.reverify()).count();
    let max_audit = tr.audits.iter().map(|a| a.max_private_grad).reduce(f64::max);
    Ok(Trained {
        summary: TrainSummary {
            schedule: cfg.train.schedule.to_string(),
            ablation: cfg.train.ablation.to_string(),
            steps: cfg.train.steps,
            step0_dev,
            step0_test,
            final_dev,
            final_test: report.mean_reward,
            best_dev,
            best_step,
            final_test_report: report,
            expert_pairs: tr.collected.len(),
            expert_pairs_reverified: reverified,
            max_audited_private_grad: max_audit,
        },
        metrics,
        collected: std::mem::take(&mut tr.collected),
        audits: std::mem::take(&mut tr.audits),
        model: tr.model,
    })
}
