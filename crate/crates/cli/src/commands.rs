use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use metatuner::microlm::save_microlm;
use metatuner::pipeline::{save_pipeline, MetaTunerModel};
use metatuner::tasks::{read_split, vocab, write_split, Example, GeneratedData, TaskKind};
use metatuner::training::{build_expert_set, evaluate, Ablation, EvalReport, Schedule};
use serde::Serialize;

use crate::checkpoint::{load_any, load_pipeline_checkpoint};
use crate::config::RunConfig;
use crate::rundir::RunDir;
use crate::workflow::{self, TrainSummary};

pub const PIPELINE_CKPT: &str = "pipeline.ckpt";
pub const ACTOR_CKPT: &str = "actor.ckpt";
pub const FINAL_CKPT: &str = "final.ckpt";
pub const BEST_CKPT: &str = "best.ckpt";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const SUMMARY_FILE: &str = "summary.json";

/// Writes every suite (pretraining mixture, stress suite, leave-one-out
/// variants) as split directories.
pub fn gen_data(cfg: &RunConfig, out: Option<&Path>) -> Result<PathBuf> {
    let dir = RunDir::create(&cfg.runs_dir, "data", out)?;
    dir.echo(cfg, "gen-data")?;
    let data = workflow::build_data(cfg)?;
    write_split(&dir.file("pretrain_mix"), &data.pretrain_mix)?;
    write_split(&dir.file("stress"), &data.stress_suite)?;
    for (kind, split) in &data.leave_one_out {
        write_split(&dir.file(&format!("leave_out_{kind}")), split)?;
    }
    dir.finish()
}

fn warm_into(dir: &RunDir, cfg: &RunConfig, data: &GeneratedData) -> Result<MetaTunerModel> {
    let w = workflow::warm_up(cfg, data)?;
    save_microlm(&dir.file(ACTOR_CKPT), &w.model.actor)?;
    save_pipeline(&dir.file(PIPELINE_CKPT), &w.model)?;
    dir.write_json("warmup.json", &w.summary)?;
    dir.write_jsonl("expert_set.jsonl", &w.expert_set)?;
    Ok(w.model)
}

pub fn warmup(cfg: &RunConfig, out: Option<&Path>) -> Result<PathBuf> {
    let dir = RunDir::create(&cfg.runs_dir, "warmup", out)?;
    dir.echo(cfg, "warmup")?;
    let data = workflow::build_data(cfg)?;
    warm_into(&dir, cfg, &data)?;
    dir.finish()
}

/// Loads `<from>/pipeline.ckpt` and checks it against the config.
pub fn load_warmed(cfg: &RunConfig, from: &Path) -> Result<MetaTunerModel> {
    let path = if from.is_dir() { from.join(PIPELINE_CKPT) } else { from.to_path_buf() };
    let model = load_pipeline_checkpoint(&path)?;
    if model.actor.cfg != cfg.actor {
        bail!("checkpoint actor {:?} does not match config actor {:?}", model.actor.cfg, cfg.actor);
    }
    if model.gen_cfg != cfg.generator {
        bail!("checkpoint generator {:?} does not match config generator {:?}", model.gen_cfg, cfg.generator);
    }
    if model.cfg != cfg.pipeline {
        bail!("checkpoint pipeline settings {:?} do not match config {:?}", model.cfg, cfg.pipeline);
    }
    Ok(model)
}

fn train_into(dir: &RunDir, cfg: &RunConfig, model: MetaTunerModel, data: &GeneratedData) -> Result<TrainSummary> {
    save_pipeline(&dir.file(BEST_CKPT), &model)?;
    let mut lines = dir.lines(METRICS_FILE)?;
    let trained = workflow::train(cfg, model, data, |m, model, improved| {
        lines.push(m)?;
        if improved {
            save_pipeline(&dir.file(BEST_CKPT), model)?;
        }
        Ok(())
    })?;
    lines.finish()?;
    save_pipeline(&dir.file(FINAL_CKPT), &trained.model)?;
    dir.write_jsonl("expert_pairs.jsonl", &trained.collected)?;
    fs::write(dir.file("test_report.txt"), trained.summary.final_test_report.to_text())?;
    dir.write_json(SUMMARY_FILE, &trained.summary)?;
    Ok(trained.summary)
}

/// Joint training from `from` (a warm-up directory or pipeline checkpoint),
/// or from a fresh warm-up in the run directory.
pub fn train(cfg: &RunConfig, from: Option<&Path>, out: Option<&Path>) -> Result<PathBuf> {
    let dir = RunDir::create(&cfg.runs_dir, "train", out)?;
    dir.echo(cfg, "train")?;
    let data = workflow::build_data(cfg)?;
    let model = match from {
        Some(p) => load_warmed(cfg, p)?,
        None => warm_into(&dir, cfg, &data)?,
    };
    let s = train_into(&dir, cfg, model, &data)?;
    log::info!("final dev {:.4}, test {:.4}", s.final_dev, s.final_test);
    dir.finish()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Part {
    Train,
    Dev,
    Test,
}

impl std::str::FromStr for Part {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "train" => Part::Train,
            "dev" => Part::Dev,
            "test" => Part::Test,
            _ => bail!("unknown split part {s:?} (train, dev, test)"),
        })
    }
}

/// Greedy evaluation of any checkpoint on one part of a split directory.
/// With `out`, writes `report.txt` and `report.json` there.
pub fn eval(checkpoint: &Path, data_dir: &Path, part: Part, with_loss: bool, out: Option<&Path>) -> Result<EvalReport> {
    let model = load_any(checkpoint)?;
    let split = read_split(data_dir).with_context(|| format!("reading split {}", data_dir.display()))?;
    let examples = match part {
        Part::Train => &split.train,
        Part::Dev => &split.dev,
        Part::Test => &split.test,
    };
    let report = evaluate(&model.answerer(split.explicit_instructions), examples, with_loss)?;
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("report.txt"), report.to_text())?;
        fs::write(dir.join("report.json"), serde_json::to_string_pretty(&report)? + "\n")?;
    }
    Ok(report)
}

/// Reads queries: split-file lines (`x<TAB>y<TAB>KIND`) or bare inputs
/// whose first token is a cue. `#` starts a comment line.
pub fn read_queries(path: &Path) -> Result<Vec<Example>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim_end();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let ex = if line.contains('\t') {
            Example::from_line(line)
        } else {
            vocab::encode(line).and_then(|x| {
                let kind = x
                    .first()
                    .and_then(|&c| TaskKind::from_cue(c))
                    .ok_or_else(|| metatuner::Error::Value("query must start with a CUE token".into()))?;
                Example::new(kind, x[0], &x[1..])
            })
        };
        out.push(ex.with_context(|| format!("{}:{}", path.display(), i + 1))?);
    }
    if out.is_empty() {
        bail!("{} holds no queries", path.display());
    }
    Ok(out)
}

#[derive(Debug, Serialize)]
pub struct RolloutDump {
    pub query: String,
    pub kind: TaskKind,
    pub samples: Vec<RolloutLine>,
    pub kept_prompt: Option<String>,
}

#[derive(Debug, Serialize)]
pub struct RolloutLine {
    pub prompt: String,
    pub answer: String,
    pub reward: u8,
    pub actor_loglik: f64,
    pub factors_hash: String,
    pub delta_norms: Vec<f64>,
}

pub fn rollout(checkpoint: &Path, queries: &Path, t: f64, n: usize, seed: u64) -> Result<Vec<RolloutDump>> {
    if n == 0 {
        bail!("--n must be at least 1");
    }
    let model = load_pipeline_checkpoint(checkpoint)?;
    let examples = read_queries(queries)?;
    let batch = build_expert_set(&model, &examples, t, n, seed)?;
    let names = |ids: &[usize]| vocab::decode(ids).expect("ids come from the vocab");
    let mut out = Vec::with_capacity(examples.len());
    for (qi, ex) in examples.iter().enumerate() {
        let samples = batch.records[qi * n..(qi + 1) * n]
            .iter()
            .map(|r| RolloutLine {
                prompt: names(&r.prompt),
                answer: names(&r.answer),
                reward: r.reward,
                actor_loglik: r.actor_loglik,
                factors_hash: r.factors_hash.clone(),
                delta_norms: r.delta_norms.clone(),
            })
            .collect();
        out.push(RolloutDump {
            query: names(&ex.x),
            kind: ex.kind,
            samples,
            kept_prompt: batch.pairs.iter().find(|p| p.x == ex.x).map(|p| names(&p.prompt)),
        });
    }
    Ok(out)
}

pub fn rollout_text(dumps: &[RolloutDump]) -> String {
    let mut s = String::new();
    for d in dumps {
        let _ = writeln!(s, "query [{}] ({})", d.query, d.kind);
        for r in &d.samples {
            let norms: Vec<String> = r.delta_norms.iter().map(|v| format!("{v:.4}")).collect();
            let _ = writeln!(
                s,
                "  prompt [{}] -> [{}] reward {} loglik {:.4} factors {} |dW| [{}]",
                r.prompt,
                r.answer,
                r.reward,
                r.actor_loglik,
                r.factors_hash,
                norms.join(" ")
            );
        }
        match &d.kept_prompt {
            Some(p) => {
                let _ = writeln!(s, "  kept [{p}]");
            }
            None => {
                let _ = writeln!(s, "  kept none");
            }
        }
    }
    s
}

#[derive(Debug, Clone, Serialize)]
pub struct PointResult {
    pub dir: String,
    pub overrides: Vec<(String, String)>,
    pub summary: TrainSummary,
}

fn summary_table(points: &[PointResult]) -> String {
    let mut s = String::from("point\tsettings\tstep0_dev\tfinal_dev\tbest_dev\tfinal_test\n");
    for p in points {
        let settings: Vec<String> = p.overrides.iter().map(|(k, v)| format!("{k}={v}")).collect();
        let _ = writeln!(
            s,
            "{}\t{}\t{:.4}\t{:.4}\t{:.4}\t{:.4}",
            p.dir,
            settings.join(","),
            p.summary.step0_dev,
            p.summary.final_dev,
            p.summary.best_dev,
            p.summary.final_test
        );
    }
    s
}

/// Warm-ups shared between sweep points whose warm-up inputs agree.
struct WarmCache<'a> {
    from: Option<&'a Path>,
    models: HashMap<String, MetaTunerModel>,
}

impl WarmCache<'_> {
    fn key(cfg: &RunConfig) -> String {
        let mut c = cfg.clone();
        c.train = Default::default();
        c.lora = Default::default();
        c.runs_dir = PathBuf::new();
        c.to_toml()
    }

    fn get(&mut self, cfg: &RunConfig, data: &GeneratedData, dir: &RunDir) -> Result<MetaTunerModel> {
        if let Some(p) = self.from {
            return load_warmed(cfg, p);
        }
        let key = Self::key(cfg);
        if let Some(m) = self.models.get(&key) {
            return Ok(m.clone());
        }
        let m = warm_into(dir, cfg, data)?;
        self.models.insert(key, m.clone());
        Ok(m)
    }
}

fn run_points(
    parent: &RunDir,
    base: &RunConfig,
    points: Vec<(String, Vec<(String, String)>)>,
    from: Option<&Path>,
) -> Result<Vec<PointResult>> {
    let mut cache = WarmCache {
        from,
        models: HashMap::new(),
    };
    let mut data_cache: HashMap<String, GeneratedData> = HashMap::new();
    let mut results = Vec::with_capacity(points.len());
    for (name, overrides) in points {
        let mut cfg = base.clone();
        for (k, v) in &overrides {
            cfg = cfg.with_override(k, v)?;
        }
        let dir = RunDir::create(parent.path(), &name, Some(&parent.file(&name)))?;
        dir.echo(&cfg, "train")?;
        let dkey = format!("{} {}", cfg.data_seed, toml::to_string(&cfg.suite)?);
        if !data_cache.contains_key(&dkey) {
            data_cache.insert(dkey.clone(), workflow::build_data(&cfg)?);
        }
        let data = &data_cache[&dkey];
        let model = cache.get(&cfg, data, &dir)?;
        let summary = train_into(&dir, &cfg, model, data)?;
        log::info!("{name}: final dev {:.4}", summary.final_dev);
        dir.finish()?;
        results.push(PointResult {
            dir: name,
            overrides,
            summary,
        });
    }
    fs::write(parent.file("summary.tsv"), summary_table(&results))?;
    parent.write_json("summary.json", &results)?;
    Ok(results)
}

/// Parses `key=v1,v2,...`.
pub fn parse_grid(spec: &str) -> Result<(String, Vec<String>)> {
    let Some((key, values)) = spec.split_once('=') else {
        bail!("grid {spec:?} is not key=v1,v2,...");
    };
    let values: Vec<String> = values.split(',').map(|v| v.trim().to_string()).filter(|v| !v.is_empty()).collect();
    if key.trim().is_empty() || values.is_empty() {
        bail!("grid {spec:?} needs a key and at least one value");
    }
    Ok((key.trim().to_string(), values))
}

/// Cartesian sweep; one run directory per point, in row-major order of the
/// grids as given.
pub fn sweep(cfg: &RunConfig, grids: &[(String, Vec<String>)], from: Option<&Path>, out: Option<&Path>) -> Result<(PathBuf, Vec<PointResult>)> {
    if grids.is_empty() {
        bail!("sweep needs at least one --grid");
    }
    for (k, vs) in grids {
        for v in vs {
            cfg.with_override(k, v)?;
        }
    }
    let parent = RunDir::create(&cfg.runs_dir, "sweep", out)?;
    parent.echo(cfg, "sweep")?;
    let mut points: Vec<Vec<(String, String)>> = vec![Vec::new()];
    for (k, vs) in grids {
        points = points
            .into_iter()
            .flat_map(|p| {
                vs.iter().map(move |v| {
                    let mut q = p.clone();
                    q.push((k.clone(), v.clone()));
                    q
                })
            })
            .collect();
    }
    let named = points
        .into_iter()
        .enumerate()
        .map(|(i, o)| (format!("point-{:03}", i + 1), o))
        .collect();
    let results = run_points(&parent, cfg, named, from)?;
    Ok((parent.finish()?, results))
}

/// The full model and its three ablations from one shared warm-up.
pub fn ablate(cfg: &RunConfig, schedule: Schedule, from: Option<&Path>, out: Option<&Path>) -> Result<(PathBuf, Vec<PointResult>)> {
    let parent = RunDir::create(&cfg.runs_dir, "ablate", out)?;
    parent.echo(cfg, "ablate")?;
    let points = Ablation::ALL
        .iter()
        .map(|a| {
            (
                a.name().to_string(),
                vec![
                    ("train.ablation".to_string(), a.name().to_string()),
                    ("train.schedule".to_string(), schedule.to_string()),
                ],
            )
        })
        .collect();
    let results = run_points(&parent, cfg, points, from)?;
    Ok((parent.finish()?, results))
}
