//! Run configuration. Every field has a default, so an empty file is a
//! valid config; unknown keys are rejected at every level.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};
use metatuner::adapters::LoraConfig;
use metatuner::microlm::ArchConfig;
use metatuner::pipeline::PipelineConfig;
use metatuner::tasks::{DatasetSplit, GeneratedData, SuiteConfig, TaskKind};
use metatuner::training::{TrainConfig, WarmupConfig};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

/// Rank and scale of the generated adapters; their shapes follow the actor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LoraSection {
    pub rank: usize,
    pub lambda: f64,
}

impl Default for LoraSection {
    fn default() -> Self {
        LoraSection { rank: 16, lambda: 0.5 }
    }
}

/// Which dataset the joint stage trains and evaluates on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainSplit {
    Stress,
    /// Train on four kinds, test on the held-out one.
    LeaveOut(TaskKind),
}

impl TrainSplit {
    pub fn pick<'a>(&self, data: &'a GeneratedData) -> &'a DatasetSplit {
        match self {
            TrainSplit::Stress => &data.stress_suite,
            TrainSplit::LeaveOut(k) => data.leave_out(*k),
        }
    }
}

impl fmt::Display for TrainSplit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TrainSplit::Stress => f.write_str("stress"),
            TrainSplit::LeaveOut(k) => write!(f, "leave_out:{k}"),
        }
    }
}

impl FromStr for TrainSplit {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "stress" {
            return Ok(TrainSplit::Stress);
        }
        match s.strip_prefix("leave_out:") {
            Some(k) => Ok(TrainSplit::LeaveOut(k.parse()?)),
            None => bail!("unknown split {s:?} (stress or leave_out:<KIND>)"),
        }
    }
}

impl Serialize for TrainSplit {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for TrainSplit {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Root under which fresh run directories are created.
    pub runs_dir: PathBuf,
    /// Seed of the synthetic task suites.
    pub data_seed: u64,
    /// Dataset of the joint stage.
    pub split: TrainSplit,
    pub suite: SuiteConfig,
    /// Replaced as a whole when given.
    pub actor: ArchConfig,
    /// Replaced as a whole when given.
    pub generator: ArchConfig,
    pub lora: LoraSection,
    pub pipeline: PipelineConfig,
    /// `warmup.seed` also seeds model initialization.
    pub warmup: WarmupConfig,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            runs_dir: PathBuf::from("runs"),
            data_seed: 0,
            split: TrainSplit::Stress,
            suite: SuiteConfig::default(),
            actor: ArchConfig {
                vocab_size: metatuner::tasks::vocab::VOCAB_SIZE,
                context_len: 32,
                d_model: 32,
                n_layers: 3,
                n_heads: 2,
            },
            generator: ArchConfig {
                vocab_size: metatuner::tasks::vocab::VOCAB_SIZE,
                context_len: 24,
                d_model: 32,
                n_layers: 4,
                n_heads: 2,
            },
            lora: LoraSection::default(),
            pipeline: PipelineConfig::default(),
            warmup: WarmupConfig::default(),
            train: TrainConfig {
                eval_every: 50,
                ..TrainConfig::default()
            },
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).context("malformed config")?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        Self::from_toml(&text).with_context(|| format!("in {}", path.display()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn lora_config(&self) -> Result<LoraConfig> {
        Ok(LoraConfig::for_actor(&self.actor, self.lora.rank, self.lora.lambda)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.suite.validate()?;
        self.actor.validate()?;
        self.generator.validate()?;
        self.train.validate()?;
        self.lora_config()?;
        if self.suite.context_len != self.actor.context_len {
            bail!(
                "suite.context_len ({}) must equal actor.context_len ({})",
                self.suite.context_len,
                self.actor.context_len
            );
        }
        if self.pipeline.split_k > self.generator.n_layers {
            bail!("pipeline.split_k exceeds generator.n_layers");
        }
        Ok(())
    }

    /// Sets a dotted key, parsing `raw` like the value it replaces.
    pub fn with_override(&self, key: &str, raw: &str) -> Result<Self> {
        let mut root = toml::Value::try_from(self)?;
        let mut slot = &mut root;
        for part in key.split('.') {
            slot = slot
                .as_table_mut()
                .and_then(|t| t.get_mut(part))
                .ok_or_else(|| anyhow!("unknown config key {key:?}"))?;
        }
        *slot = match slot {
            toml::Value::Integer(_) => toml::Value::Integer(raw.parse().with_context(|| format!("{key} wants an integer"))?),
            toml::Value::Float(_) => toml::Value::Float(raw.parse().with_context(|| format!("{key} wants a number"))?),
            toml::Value::Boolean(_) => toml::Value::Boolean(raw.parse().with_context(|| format!("{key} wants true or false"))?),
            toml::Value::String(_) => toml::Value::String(raw.to_string()),
            _ => bail!("{key} is a table or array and cannot be swept"),
        };
        let cfg: RunConfig = root.try_into().with_context(|| format!("setting {key} = {raw}"))?;
        cfg.validate()?;
        Ok(cfg)
    }
}
