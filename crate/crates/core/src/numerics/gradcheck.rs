use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Outcome of a central-difference gradient audit.
#[derive(Debug, Clone, PartialEq)]
pub struct FdReport {
    /// max over entries of |g_tape − g_fd| / max(1, |g_fd|)
    pub max_rel_error: f64,
    pub entries_checked: usize,
    /// Entries whose tape gradient is nonzero.
    pub nonzero_grads: usize,
}

/// Compares tape gradients against central finite differences for every
/// scalar entry of the selected parameters.
///
/// `loss_fn` builds a fresh graph from the model and returns it with the
/// scalar loss node; `select` picks the tensors to audit (always in the same
/// order). The model is restored to its original values on return.
pub fn finite_difference_check<M, L, S>(
    model: &mut M,
    mut loss_fn: L,
    select: S,
    epsilon: f64,
) -> Result<FdReport>
where
    L: FnMut(&M) -> Result<(Graph, Var)>,
    S: Fn(&mut M) -> Vec<&mut Tensor>,
{
    if epsilon <= 0.0 {
        return Err(Error::Value(format!("epsilon must be positive, got {epsilon}")));
    }
    let (mut graph, loss) = loss_fn(model)?;
    let base = graph.scalar(loss);
    let again = {
        let (g2, l2) = loss_fn(model)?;
        g2.scalar(l2)
    };
    if base.to_bits() != again.to_bits() {
        return Err(Error::Determinism {
            first: base,
            second: again,
        });
    }
    graph.backward(loss)?;
    let tape: Vec<Vec<f64>> = {
        let mut params = select(model);
        params.iter_mut().for_each(|p| p.zero_grad());
        graph.accumulate_grads(params.iter_mut().map(|p| &mut **p));
        params
            .iter_mut()
            .map(|p| {
                let n = p.numel();
                std::mem::replace(&mut p.grad, vec![0.0; n])
            })
            .collect()
    };
    drop(graph);

    let eval = |model: &M, loss_fn: &mut L| -> Result<f64> {
        let (g, l) = loss_fn(model)?;
        Ok(g.scalar(l))
    };
    let mut report = FdReport {
        max_rel_error: 0.0,
        entries_checked: 0,
        nonzero_grads: 0,
    };
    for (pi, grads) in tape.iter().enumerate() {
        for (j, &g_tape) in grads.iter().enumerate() {
            let orig = select(model)[pi].data[j];
            select(model)[pi].data[j] = orig + epsilon;
            let plus = eval(model, &mut loss_fn);
            select(model)[pi].data[j] = orig - epsilon;
            let minus = eval(model, &mut loss_fn);
            select(model)[pi].data[j] = orig;
            let g_fd = (plus? - minus?) / (2.0 * epsilon);
            let rel = (g_tape - g_fd).abs() / g_fd.abs().max(1.0);
            report.max_rel_error = report.max_rel_error.max(rel);
            report.entries_checked += 1;
            if g_tape != 0.0 {
                report.nonzero_grads += 1;
            }
        }
    }
    Ok(report)
}
