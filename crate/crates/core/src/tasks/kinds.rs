use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::vocab::{self, TokenId, EOS};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum TaskKind {
    Copy,
    Rev,
    Sort,
    Inc,
    Caesar,
}

impl TaskKind {
    pub const ALL: [TaskKind; 5] = [
        TaskKind::Copy,
        TaskKind::Rev,
        TaskKind::Sort,
        TaskKind::Inc,
        TaskKind::Caesar,
    ];
    /// Kinds the actor sees with explicit instructions during pretraining.
    pub const PRETRAIN: [TaskKind; 3] = [TaskKind::Copy, TaskKind::Rev, TaskKind::Sort];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Copy => "COPY",
            TaskKind::Rev => "REV",
            TaskKind::Sort => "SORT",
            TaskKind::Inc => "INC",
            TaskKind::Caesar => "CAESAR",
        }
    }

    pub fn instruction(self) -> TokenId {
        match self {
            TaskKind::Copy => vocab::INSTR_COPY,
            TaskKind::Rev => vocab::INSTR_REV,
            TaskKind::Sort => vocab::INSTR_SORT,
            TaskKind::Inc => vocab::INSTR_INC,
            TaskKind::Caesar => vocab::INSTR_CAESAR,
        }
    }

    /// Latent cue; bijective with kinds.
    pub fn cue(self) -> TokenId {
        vocab::cue(self.index())
    }

    pub fn from_cue(t: TokenId) -> Option<TaskKind> {
        vocab::is_cue(t).then(|| TaskKind::ALL[t - vocab::CUE_1])
    }

    /// Symbols legal in an operand of this kind.
    pub fn alphabet(self) -> Vec<TokenId> {
        match self {
            TaskKind::Inc => (0..10).map(vocab::digit).collect(),
            TaskKind::Caesar => (0..10).map(vocab::letter).collect(),
            _ => (0..10).map(vocab::digit).chain((0..10).map(vocab::letter)).collect(),
        }
    }

    /// The exact answer for a legal operand.
    pub fn gold(self, operand: &[TokenId]) -> Result<Vec<TokenId>> {
        let alphabet = self.alphabet();
        if let Some(&bad) = operand.iter().find(|t| !alphabet.contains(t)) {
            return Err(Error::Value(format!(
                "token {} is not a legal {} operand symbol",
                vocab::name(bad).unwrap_or_else(|_| bad.to_string()),
                self.name()
            )));
        }
        Ok(match self {
            TaskKind::Copy => operand.to_vec(),
            TaskKind::Rev => operand.iter().rev().copied().collect(),
            TaskKind::Sort => {
                let mut v = operand.to_vec();
                v.sort_unstable();
                v
            }
            TaskKind::Inc => operand
                .iter()
                .map(|&t| vocab::digit((t - vocab::DIGIT_0 + 1) % 10))
                .collect(),
            TaskKind::Caesar => operand
                .iter()
                .map(|&t| vocab::letter((t - vocab::LETTER_A + 2) % 10))
                .collect(),
        })
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TaskKind::ALL
            .into_iter()
            .find(|k| k.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Value(format!("unknown task kind {s:?}")))
    }
}

/// 1 iff `decoded`, truncated at its first EOS, equals the gold answer.
/// `x` is the query: a cue token followed by the operand.
pub fn reward(kind: TaskKind, x: &[TokenId], decoded: &[TokenId]) -> u8 {
    let trimmed = match decoded.iter().position(|&t| t == EOS) {
        Some(i) => &decoded[..i],
        None => decoded,
    };
    match x.split_first().map(|(_, op)| kind.gold(op)) {
        Some(Ok(gold)) if gold == trimmed => 1,
        _ => 0,
    }
}

/// Scripted stand-in for an expert prompt writer: the kind's instruction
/// token. It reads the task kind directly, so it is a data-generation tool
/// only and never available to a model at evaluation time.
pub fn expert_prompt_oracle(kind: TaskKind) -> Vec<TokenId> {
    vec![kind.instruction()]
}

/// Oracle lookup by kind name.
pub fn expert_prompt_for(kind_name: &str) -> Result<Vec<TokenId>> {
    Ok(expert_prompt_oracle(kind_name.parse()?))
}
