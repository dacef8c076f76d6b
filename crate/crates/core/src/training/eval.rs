use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::microlm::{sequence_loss, MicroLm, SeqExample};
use crate::numerics::Graph;
use crate::pipeline::{actor_greedy, MetaTunerModel, PromptMode};
use crate::tasks::vocab::TokenId;
use crate::tasks::{expert_prompt_oracle, reward, Example, TaskKind};

/// Anything that maps a query to a decoded answer.
pub trait Answerer {
    fn answer(&self, ex: &Example) -> Result<Vec<TokenId>>;

    /// Mean cross-entropy of the gold answer, when the model defines one.
    fn answer_loss(&self, _ex: &Example) -> Result<Option<f64>> {
        Ok(None)
    }
}

impl Answerer for MetaTunerModel {
    fn answer(&self, ex: &Example) -> Result<Vec<TokenId>> {
        Ok(self.solve(&ex.x)?.1)
    }

    fn answer_loss(&self, ex: &Example) -> Result<Option<f64>> {
        let prompt = self.generate_prompt(&ex.x, PromptMode::GreedyLive)?;
        let mut g = Graph::no_grad();
        let f = self.generate_params(&mut g, &ex.x)?;
        let l = self.answer_loss(&mut g, &ex.x, &prompt.prompt, &f, &ex.y)?;
        Ok(Some(g.scalar(l)))
    }
}

/// How the actor's prompt slot is filled.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptPolicy {
    /// The same prompt for every query.
    Fixed(Vec<TokenId>),
    /// The example's own instruction token.
    Instruction,
}

impl PromptPolicy {
    pub fn prompt_for(&self, kind: TaskKind) -> Vec<TokenId> {
        match self {
            PromptPolicy::Fixed(p) => p.clone(),
            PromptPolicy::Instruction => expert_prompt_oracle(kind),
        }
    }
}

/// A bare actor driven by a prompt policy.
pub struct PromptedActor<'a> {
    pub actor: &'a MicroLm,
    pub policy: PromptPolicy,
}

impl Answerer for PromptedActor<'_> {
    fn answer(&self, ex: &Example) -> Result<Vec<TokenId>> {
        let input = MetaTunerModel::actor_input(&self.policy.prompt_for(ex.kind), &ex.x);
        actor_greedy(self.actor, None, &input)
    }

    fn answer_loss(&self, ex: &Example) -> Result<Option<f64>> {
        let input = MetaTunerModel::actor_input(&self.policy.prompt_for(ex.kind), &ex.x);
        let mut g = Graph::no_grad();
        let l = sequence_loss(&mut g, &self.actor.parts(), &SeqExample::completion(&input, &ex.y), None)?;
        Ok(Some(g.scalar(l)))
    }
}

/// Answers with the gold function. A reference point for the harness.
#[derive(Debug, Clone, Copy, Default)]
pub struct ScriptedModel;

impl Answerer for ScriptedModel {
    fn answer(&self, ex: &Example) -> Result<Vec<TokenId>> {
        ex.kind.gold(ex.operand())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskScore {
    pub n: usize,
    pub mean_reward: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n: usize,
    pub mean_reward: f64,
    pub per_task: BTreeMap<TaskKind, TaskScore>,
    pub mean_answer_loss: Option<f64>,
}

impl EvalReport {
    /// Aligned plain-text table.
    pub fn to_text(&self) -> String {
        let mut s = format!("{:<8} {:>5} {:>8}\n", "task", "n", "reward");
        for (k, t) in &self.per_task {
            s.push_str(&format!("{:<8} {:>5} {:>8.4}\n", k.name(), t.n, t.mean_reward));
        }
        s.push_str(&format!("{:<8} {:>5} {:>8.4}\n", "ALL", self.n, self.mean_reward));
        if let Some(l) = self.mean_answer_loss {
            s.push_str(&format!("mean answer loss {l:.6}\n"));
        }
        s
    }
}

/// Greedy exact-match evaluation. Loss is averaged only when requested and
/// the model defines it.
pub fn evaluate(model: &dyn Answerer, examples: &[Example], with_loss: bool) -> Result<EvalReport> {
    if examples.is_empty() {
        return Err(Error::Value("cannot evaluate on an empty dataset".into()));
    }
    let mut per: BTreeMap<TaskKind, (usize, usize)> = BTreeMap::new();
    let mut total = 0usize;
    let mut loss_sum = 0.0;
    let mut loss_n = 0usize;
    for ex in examples {
        let r = reward(ex.kind, &ex.x, &model.answer(ex)?) as usize;
        total += r;
        let e = per.entry(ex.kind).or_default();
        e.0 += 1;
        e.1 += r;
        if with_loss {
            if let Some(l) = model.answer_loss(ex)? {
                loss_sum += l;
                loss_n += 1;
            }
        }
    }
    Ok(EvalReport {
        n: examples.len(),
        mean_reward: total as f64 / examples.len() as f64,
        per_task: per
            .into_iter()
            .map(|(k, (n, r))| {
                (
                    k,
                    TaskScore {
                        n,
                        mean_reward: r as f64 / n as f64,
                    },
                )
            })
            .collect(),
        mean_answer_loss: (loss_n > 0).then(|| loss_sum / loss_n as f64),
    })
}
