//! Synthetic symbol-manipulation tasks with exact 0/1 rewards.

pub mod dataset;
pub mod files;
pub mod kinds;
pub mod vocab;

pub use dataset::{generate_dataset, DatasetSplit, Example, GeneratedData, SuiteConfig};
pub use files::{read_split, write_split, Manifest, DATASET_FORMAT_VERSION};
pub use kinds::{expert_prompt_for, expert_prompt_oracle, reward, TaskKind};
