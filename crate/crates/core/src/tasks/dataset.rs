use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::kinds::TaskKind;
use super::vocab::{self, TokenId};
use crate::error::{Error, Result};

/// One query: `x = [cue, operand...]`, `y = gold(operand)`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Example {
    pub x: Vec<TokenId>,
    pub y: Vec<TokenId>,
    pub kind: TaskKind,
}

impl Example {
    pub fn new(kind: TaskKind, cue: TokenId, operand: &[TokenId]) -> Result<Self> {
        let mut x = Vec::with_capacity(operand.len() + 1);
        x.push(cue);
        x.extend_from_slice(operand);
        Ok(Example {
            y: kind.gold(operand)?,
            x,
            kind,
        })
    }

    pub fn operand(&self) -> &[TokenId] {
        &self.x[1..]
    }

    /// Tab-separated token names: `x<TAB>y<TAB>KIND`.
    pub fn to_line(&self) -> String {
        let names = |ids: &[TokenId]| vocab::decode(ids).expect("ids come from the vocab");
        format!("{}\t{}\t{}", names(&self.x), names(&self.y), self.kind)
    }

    pub fn from_line(line: &str) -> Result<Self> {
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 3 {
            return Err(Error::format("dataset line", format!("expected 3 tab-separated columns in {line:?}")));
        }
        let x = vocab::encode(cols[0])?;
        let y = vocab::encode(cols[1])?;
        let kind: TaskKind = cols[2].parse()?;
        if x.len() < 2 {
            return Err(Error::format("dataset line", "x needs a cue and an operand"));
        }
        let ex = Example::new(kind, x[0], &x[1..])?;
        if ex.y != y {
            return Err(Error::format("dataset line", format!("y does not match the {kind} gold answer")));
        }
        Ok(ex)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub name: String,
    pub seed: u64,
    /// Whether actor inputs for this split carry the instruction token.
    pub explicit_instructions: bool,
    pub train: Vec<Example>,
    pub dev: Vec<Example>,
    pub test: Vec<Example>,
    pub manifest_hash: String,
}

impl DatasetSplit {
    pub fn new(
        name: impl Into<String>,
        seed: u64,
        explicit_instructions: bool,
        train: Vec<Example>,
        dev: Vec<Example>,
        test: Vec<Example>,
    ) -> Result<Self> {
        let name = name.into();
        for (part, v) in [("train", &train), ("dev", &dev), ("test", &test)] {
            if v.is_empty() {
                return Err(Error::Config(format!("split {name}/{part} is empty")));
            }
        }
        let mut s = DatasetSplit {
            name,
            seed,
            explicit_instructions,
            train,
            dev,
            test,
            manifest_hash: String::new(),
        };
        s.manifest_hash = s.compute_hash();
        Ok(s)
    }

    /// SHA-256 over the canonical text of all three parts.
    pub fn compute_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(format!("{}\n{}\n{}\n", self.name, self.seed, self.explicit_instructions));
        for (part, v) in self.parts() {
            h.update(format!("[{part}]\n"));
            for ex in v {
                h.update(ex.to_line());
                h.update("\n");
            }
        }
        hex::encode(h.finalize())
    }

    pub fn parts(&self) -> [(&'static str, &Vec<Example>); 3] {
        [("train", &self.train), ("dev", &self.dev), ("test", &self.test)]
    }

    pub fn kinds(&self) -> Vec<TaskKind> {
        let mut k: Vec<TaskKind> = self.train.iter().chain(&self.dev).chain(&self.test).map(|e| e.kind).collect();
        k.sort();
        k.dedup();
        k
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SuiteConfig {
    pub min_len: usize,
    pub max_len: usize,
    pub n_train: usize,
    /// Train size of the actor pretraining mixture.
    pub n_pretrain_train: usize,
    pub n_dev: usize,
    pub n_test: usize,
    /// Actor context window the examples must fit into.
    pub context_len: usize,
    /// Room reserved for the prompt inside the actor input.
    pub prompt_margin: usize,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        SuiteConfig {
            min_len: 3,
            max_len: 6,
            n_train: 2000,
            n_pretrain_train: 6000,
            n_dev: 200,
            n_test: 400,
            context_len: 32,
            prompt_margin: 8,
        }
    }
}

impl SuiteConfig {
    pub fn validate(&self) -> Result<()> {
        if self.min_len == 0 || self.min_len > self.max_len {
            return Err(Error::Config(format!(
                "operand lengths must satisfy 1 <= min_len <= max_len, got {}..={}",
                self.min_len, self.max_len
            )));
        }
        // BOS prompt SEP cue operand SEP answer, with EOS as the final target.
        let needed = 4 + self.prompt_margin + 2 * self.max_len;
        if needed > self.context_len {
            return Err(Error::Config(format!(
                "operands up to {} with a {}-token prompt need a context of {needed}, have {}",
                self.max_len, self.prompt_margin, self.context_len
            )));
        }
        for (name, n) in [
            ("n_train", self.n_train),
            ("n_pretrain_train", self.n_pretrain_train),
            ("n_dev", self.n_dev),
            ("n_test", self.n_test),
        ] {
            if n == 0 {
                return Err(Error::Config(format!("{name} is zero, which leaves a split empty")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedData {
    pub pretrain_mix: DatasetSplit,
    pub stress_suite: DatasetSplit,
    /// One variant per held-out kind: trains on the other four.
    pub leave_one_out: Vec<(TaskKind, DatasetSplit)>,
}

impl GeneratedData {
    pub fn leave_out(&self, kind: TaskKind) -> &DatasetSplit {
        &self.leave_one_out.iter().find(|(k, _)| *k == kind).expect("all kinds present").1
    }
}

struct OperandPool {
    rng: ChaCha8Rng,
    seen: HashSet<Vec<TokenId>>,
    min_len: usize,
    max_len: usize,
}

impl OperandPool {
    fn fresh(&mut self, kind: TaskKind) -> Result<Vec<TokenId>> {
        let alphabet = kind.alphabet();
        for _ in 0..10_000 {
            let len = self.rng.random_range(self.min_len..=self.max_len);
            let op: Vec<TokenId> = (0..len).map(|_| alphabet[self.rng.random_range(0..alphabet.len())]).collect();
            if self.seen.insert(op.clone()) {
                return Ok(op);
            }
        }
        Err(Error::Config(format!("operand space for {kind} is exhausted")))
    }

    fn split(
        &mut self,
        kinds: &[TaskKind],
        n: usize,
        cue: &mut dyn FnMut(&mut ChaCha8Rng, TaskKind) -> TokenId,
    ) -> Result<Vec<Example>> {
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            let kind = kinds[i % kinds.len()];
            let op = self.fresh(kind)?;
            let c = cue(&mut self.rng, kind);
            out.push(Example::new(kind, c, &op)?);
        }
        out.shuffle(&mut self.rng);
        Ok(out)
    }
}

/// Builds every suite from one seed. Operands are unique across all parts
/// of a suite, so train/dev/test never share an operand sequence.
pub fn generate_dataset(cfg: &SuiteConfig, seed: u64) -> Result<GeneratedData> {
    cfg.validate()?;
    let mut pool = OperandPool {
        rng: ChaCha8Rng::seed_from_u64(seed),
        seen: HashSet::new(),
        min_len: cfg.min_len,
        max_len: cfg.max_len,
    };

    // The cue is noise here; the instruction token tells the actor the kind.
    let mut random_cue = |rng: &mut ChaCha8Rng, _: TaskKind| vocab::cue(rng.random_range(0..vocab::N_CUES));
    let pre = TaskKind::PRETRAIN;
    let pretrain_mix = DatasetSplit::new(
        "pretrain_mix",
        seed,
        true,
        pool.split(&pre, cfg.n_pretrain_train, &mut random_cue)?,
        pool.split(&pre, cfg.n_dev, &mut random_cue)?,
        pool.split(&pre, cfg.n_test, &mut random_cue)?,
    )?;

    pool.seen.clear();
    let mut kind_cue = |_: &mut ChaCha8Rng, k: TaskKind| k.cue();
    let all = TaskKind::ALL;
    let stress_suite = DatasetSplit::new(
        "stress_suite",
        seed,
        false,
        pool.split(&all, cfg.n_train, &mut kind_cue)?,
        pool.split(&all, cfg.n_dev, &mut kind_cue)?,
        pool.split(&all, cfg.n_test, &mut kind_cue)?,
    )?;

    let mut leave_one_out = Vec::with_capacity(all.len());
    for held in all {
        let keep = |v: &[Example], want_held: bool| -> Vec<Example> {
            v.iter().filter(|e| (e.kind == held) == want_held).cloned().collect()
        };
        let split = DatasetSplit::new(
            format!("leave_one_out_{}", held.name().to_lowercase()),
            seed,
            false,
            keep(&stress_suite.train, false),
            keep(&stress_suite.dev, false),
            keep(&stress_suite.test, true),
        )?;
        leave_one_out.push((held, split));
    }
    Ok(GeneratedData {
        pretrain_mix,
        stress_suite,
        leave_one_out,
    })
}
