use super::{ParamStore, Tape, Var};
use crate::error::Result;

/// Denominator floor for relative errors; differences between gradients
/// both smaller than this are compared in absolute terms.
const REL_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct ParamFdStats {
    pub name: String,
    pub checked: usize,
    pub skipped: usize,
    pub max_rel_err: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FdReport {
    pub params: Vec<ParamFdStats>,
    pub max_rel_err: f64,
    pub tol: f64,
}

impl FdReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= self.tol
    }

    pub fn checked(&self) -> usize {
        self.params.iter().map(|p| p.checked).sum()
    }

    pub fn skipped(&self) -> usize {
        self.params.iter().map(|p| p.skipped).sum()
    }
}

fn evaluate<F>(loss_fn: &F, store: &ParamStore) -> Result<(f64, u64)>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    let mut tape = Tape::with_decisions();
    let loss = loss_fn(&mut tape, store)?;
    Ok((tape.scalar(loss), tape.signature()))
}

/// Compare reverse-mode gradients with central differences
/// `(f(θ+h) − f(θ−h)) / 2h` for every scalar of every parameter.
///
/// A coordinate is skipped when either perturbation changes a discrete
/// decision of the forward pass (ReLU pattern, pooling winner, matching),
/// since the loss is not differentiable across such a boundary.
pub fn finite_difference_check<F>(store: &ParamStore, loss_fn: F, h: f64, tol: f64) -> Result<FdReport>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    let mut analytic = store.clone();
    analytic.zero_grad();
    let mut tape = Tape::with_decisions();
    let loss = loss_fn(&mut tape, &analytic)?;
    let base_sig = tape.signature();
    tape.backward(loss, &mut analytic)?;
    drop(tape);

    let mut probe = store.clone();
    let mut params = Vec::with_capacity(store.len());
    let mut overall = 0.0f64;
    for i in 0..store.len() {
        let (name, t) = analytic.by_index(i);
        let grad = t.grad().map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.len()]);
        let mut stats = ParamFdStats {
            name: name.to_string(),
            checked: 0,
            skipped: 0,
            max_rel_err: 0.0,
        };
        for (j, &analytic_j) in grad.iter().enumerate() {
            let orig = probe.by_index_mut(i).data()[j];
            probe.by_index_mut(i).data_mut()[j] = orig + h;
            let (fp, sp) = evaluate(&loss_fn, &probe)?;
            probe.by_index_mut(i).data_mut()[j] = orig - h;
            let (fm, sm) = evaluate(&loss_fn, &probe)?;
            probe.by_index_mut(i).data_mut()[j] = orig;
            if sp != base_sig || sm != base_sig {
                stats.skipped += 1;
                continue;
            }
            let fd = (fp - fm) / (2.0 * h);
            let scale = analytic_j.abs().max(fd.abs()).max(REL_FLOOR);
            let rel = (analytic_j - fd).abs() / scale;
            stats.checked += 1;
            stats.max_rel_err = stats.max_rel_err.max(rel);
        }
        overall = overall.max(stats.max_rel_err);
        params.push(stats);
    }
    Ok(FdReport {
        params,
        max_rel_err: overall,
        tol,
    })
}
