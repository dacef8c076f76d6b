use super::{forward, LmParts, MicroLm};
use crate::error::{Error, Result};
use crate::numerics::{Adam, Graph, Parameters, Var};
use crate::tasks::vocab::{TokenId, EOS};

/// Teacher-forced training sequence: `targets[i]` is the id expected after
/// `input[..=i]`, or `None` where the position is excluded from the loss.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SeqExample {
    pub input: Vec<TokenId>,
    pub targets: Vec<Option<TokenId>>,
}

impl SeqExample {
    /// Loss only on `completion` and the closing EOS.
    pub fn completion(prefix: &[TokenId], completion: &[TokenId]) -> Self {
        let mut full = prefix.to_vec();
        full.extend_from_slice(completion);
        full.push(EOS);
        let input = full[..full.len() - 1].to_vec();
        let targets = (0..input.len())
            .map(|i| if i + 1 >= prefix.len() { Some(full[i + 1]) } else { None })
            .collect();
        SeqExample { input, targets }
    }
}

/// Mean cross-entropy over the example's unmasked positions.
pub fn sequence_loss(g: &mut Graph, parts: &LmParts<'_>, ex: &SeqExample, o_proj: Option<&[Var]>) -> Result<Var> {
    if ex.input.len() != ex.targets.len() {
        return Err(Error::shape("sequence example", &[ex.input.len()], &[ex.targets.len()]));
    }
    let out = forward(g, parts, &ex.input, o_proj, None)?;
    g.cross_entropy_masked(out.logits, &ex.targets)
}

/// One Adam step on the batch-mean loss. Returns the loss before the step.
pub fn sft_step(model: &mut MicroLm, opt: &mut Adam, batch: &[SeqExample]) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Value("empty batch".into()));
    }
    let mut g = Graph::new();
    let loss = {
        let parts = model.parts();
        let losses = batch
            .iter()
            .map(|ex| sequence_loss(&mut g, &parts, ex, None))
            .collect::<Result<Vec<_>>>()?;
        g.mean_of(&losses)?
    };
    let value = g.scalar(loss);
    if !value.is_finite() {
        return Err(Error::Divergence {
            step: opt.steps_taken() as usize,
            reason: format!("non-finite SFT loss {value}"),
        });
    }
    g.backward(loss)?;
    model.zero_grad();
    g.accumulate_grads(model.params_mut());
    opt.step(model.params_mut());
    Ok(value)
}
