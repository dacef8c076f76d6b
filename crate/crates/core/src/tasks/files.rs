use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::dataset::{DatasetSplit, Example};
use super::vocab::VOCAB_VERSION;
use crate::error::{Error, Result};

pub const DATASET_FORMAT_VERSION: u32 = 1;
const HEADER: &str = "#metatuner-dataset";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Counts {
    pub train: usize,
    pub dev: usize,
    pub test: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    pub vocab_version: u32,
    pub name: String,
    pub seed: u64,
    pub explicit_instructions: bool,
    pub counts: Counts,
    pub hash: String,
}

impl Manifest {
    pub fn of(split: &DatasetSplit) -> Self {
        Manifest {
            format_version: DATASET_FORMAT_VERSION,
            vocab_version: VOCAB_VERSION,
            name: split.name.clone(),
            seed: split.seed,
            explicit_instructions: split.explicit_instructions,
            counts: Counts {
                train: split.train.len(),
                dev: split.dev.len(),
                test: split.test.len(),
            },
            hash: split.manifest_hash.clone(),
        }
    }
}

/// Writes `train.tsv`, `dev.tsv`, `test.tsv` and `manifest.json` into `dir`.
pub fn write_split(dir: &Path, split: &DatasetSplit) -> Result<()> {
    fs::create_dir_all(dir)?;
    for (part, examples) in split.parts() {
        let mut text = format!("{HEADER} v{DATASET_FORMAT_VERSION} vocab={VOCAB_VERSION}\n");
        for ex in examples {
            text.push_str(&ex.to_line());
            text.push('\n');
        }
        fs::write(dir.join(format!("{part}.tsv")), text)?;
    }
    let manifest = serde_json::to_string_pretty(&Manifest::of(split)).map_err(|e| Error::format("manifest", e.to_string()))?;
    fs::write(dir.join("manifest.json"), manifest + "\n")?;
    Ok(())
}

fn read_part(path: &Path) -> Result<Vec<Example>> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header = lines.next().unwrap_or_default();
    let expected = format!("{HEADER} v{DATASET_FORMAT_VERSION} vocab={VOCAB_VERSION}");
    if header != expected {
        return Err(Error::format(
            "dataset file",
            format!("{}: header {header:?}, expected {expected:?}", path.display()),
        ));
    }
    lines.filter(|l| !l.is_empty()).map(Example::from_line).collect()
}

/// Reads a split back and checks it against its manifest.
pub fn read_split(dir: &Path) -> Result<DatasetSplit> {
    let manifest: Manifest = serde_json::from_str(&fs::read_to_string(dir.join("manifest.json"))?)
        .map_err(|e| Error::format("manifest", e.to_string()))?;
    if manifest.format_version != DATASET_FORMAT_VERSION || manifest.vocab_version != VOCAB_VERSION {
        return Err(Error::format(
            "manifest",
            format!(
                "format v{} vocab v{} not supported",
                manifest.format_version, manifest.vocab_version
            ),
        ));
    }
    let split = DatasetSplit::new(
        manifest.name.clone(),
        manifest.seed,
        manifest.explicit_instructions,
        read_part(&dir.join("train.tsv"))?,
        read_part(&dir.join("dev.tsv"))?,
        read_part(&dir.join("test.tsv"))?,
    )?;
    if Manifest::of(&split) != manifest {
        return Err(Error::format("manifest", "counts or hash do not match the data files"));
    }
    Ok(split)
}
