use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::Serialize;

use crate::config::RunConfig;

/// Present while a command is still working in the directory.
pub const RUNNING_MARKER: &str = "RUNNING";
pub const CONFIG_FILE: &str = "config.toml";
pub const RUN_INFO_FILE: &str = "run.json";

#[derive(Debug, Serialize)]
struct RunInfo<'a> {
    command: &'a str,
    cli_version: &'static str,
    core_version: &'static str,
    pipeline_checkpoint_version: u64,
    dataset_format_version: u32,
    vocab_version: u32,
    data_seed: u64,
    warmup_seed: u64,
    train_seed: u64,
}

pub struct RunDir {
    path: PathBuf,
}

impl RunDir {
    /// Creates `explicit`, or the first unused `<root>/<prefix>-NNNN`.
    /// Existing directories are never reused.
    pub fn create(root: &Path, prefix: &str, explicit: Option<&Path>) -> Result<Self> {
        let path = match explicit {
            Some(p) => {
                if p.exists() {
                    bail!("run directory {} already exists; runs are never overwritten", p.display());
                }
                p.to_path_buf()
            }
            None => {
                fs::create_dir_all(root).with_context(|| format!("creating {}", root.display()))?;
                (1..)
                    .map(|i| root.join(format!("{prefix}-{i:04}")))
                    .find(|p| !p.exists())
                    .expect("unbounded search")
            }
        };
        fs::create_dir_all(&path).with_context(|| format!("creating {}", path.display()))?;
        fs::write(path.join(RUNNING_MARKER), "")?;
        Ok(RunDir { path })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.path.join(name)
    }

    /// Writes the resolved config and version/seed record.
    pub fn echo(&self, cfg: &RunConfig, command: &str) -> Result<()> {
        fs::write(self.file(CONFIG_FILE), cfg.to_toml())?;
        let info = RunInfo {
            command,
            cli_version: env!("CARGO_PKG_VERSION"),
            core_version: metatuner::VERSION,
            pipeline_checkpoint_version: metatuner::pipeline::PIPELINE_FORMAT_VERSION,
            dataset_format_version: metatuner::tasks::DATASET_FORMAT_VERSION,
            vocab_version: metatuner::tasks::vocab::VOCAB_VERSION,
            data_seed: cfg.data_seed,
            warmup_seed: cfg.warmup.seed,
            train_seed: cfg.train.seed,
        };
        self.write_json(RUN_INFO_FILE, &info)
    }

    pub fn write_json<T: Serialize + ?Sized>(&self, name: &str, value: &T) -> Result<()> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        fs::write(self.file(name), text)?;
        Ok(())
    }

    pub fn write_jsonl<T: Serialize>(&self, name: &str, rows: &[T]) -> Result<()> {
        let mut w = self.lines(name)?;
        for r in rows {
            w.push(r)?;
        }
        w.finish()
    }

    pub fn lines(&self, name: &str) -> Result<LineWriter> {
        let f = OpenOptions::new().create_new(true).write(true).open(self.file(name))?;
        Ok(LineWriter { w: BufWriter::new(f) })
    }

    /// Removes the in-progress marker.
    pub fn finish(self) -> Result<PathBuf> {
        fs::remove_file(self.file(RUNNING_MARKER))?;
        Ok(self.path)
    }
}

/// Append-only newline-delimited JSON, flushed per record.
pub struct LineWriter {
    w: BufWriter<File>,
}

impl LineWriter {
    pub fn push<T: Serialize>(&mut self, row: &T) -> Result<()> {
        serde_json::to_writer(&mut self.w, row)?;
        self.w.write_all(b"\n")?;
        self.w.flush()?;
        Ok(())
    }

    pub fn finish(mut self) -> Result<()> {
        self.w.flush()?;
        Ok(())
    }
}
