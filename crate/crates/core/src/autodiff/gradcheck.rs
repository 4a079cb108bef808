use super::params::{Grads, ParamId, ParamStore};
use super::tape::{Tape, Var};
use crate::error::{Error, Result};

/// Outcome of comparing analytic gradients with central differences.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// max over checked coordinates of `|analytic - numeric| / max(1, |numeric|)`
    pub max_relative_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub coords_checked: usize,
}

/// Evaluates `loss_fn` on a fresh tape and returns the loss value with the
/// analytic parameter gradients.
pub fn loss_and_grads<F>(store: &ParamStore, loss_fn: &F) -> Result<(f64, Grads)>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    let mut tape = Tape::new();
    let loss = loss_fn(&mut tape, store)?;
    let value = tape.value(loss).item();
    if !value.is_finite() {
        return Err(Error::numeric(format!("loss is not finite ({value})")));
    }
    tape.backward(loss)?;
    let mut grads = Grads::zeros_like(store);
    tape.accumulate_param_grads(&mut grads);
    Ok((value, grads))
}

fn loss_value<F>(store: &ParamStore, loss_fn: &F) -> Result<f64>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    let mut tape = Tape::new();
    let loss = loss_fn(&mut tape, store)?;
    let v = tape.value(loss).item();
    if !v.is_finite() {
        return Err(Error::numeric(format!("perturbed loss is not finite ({v})")));
    }
    Ok(v)
}

/// Central-difference check of every parameter coordinate.
pub fn grad_check<F>(store: &ParamStore, loss_fn: F, step: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    grad_check_report(store, loss_fn, step, None).map(|r| r.max_relative_error)
}

/// Like [`grad_check`], optionally restricted to a subset of parameters.
pub fn grad_check_report<F>(
    store: &ParamStore,
    loss_fn: F,
    step: f64,
    only: Option<&[ParamId]>,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    if step <= 0.0 || !step.is_finite() {
        return Err(Error::contract(format!("grad_check step must be > 0, got {step}")));
    }
    let (_, analytic) = loss_and_grads(store, &loss_fn)?;
    let ids: Vec<ParamId> = match only {
        Some(ids) => ids.to_vec(),
        None => store.ids().collect(),
    };
    let mut work = store.clone();
    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        coords_checked: 0,
    };
    for id in ids {
        for k in 0..store.get(id).numel() {
            let orig = store.get(id).data()[k];
            work.get_mut(id).data_mut()[k] = orig + step;
            let up = loss_value(&work, &loss_fn)?;
            work.get_mut(id).data_mut()[k] = orig - step;
            let down = loss_value(&work, &loss_fn)?;
            work.get_mut(id).data_mut()[k] = orig;
            let numeric = (up - down) / (2.0 * step);
            let a = analytic.get(id)[k];
            let rel = (a - numeric).abs() / numeric.abs().max(1.0);
            report.coords_checked += 1;
            if rel > report.max_relative_error {
                report.max_relative_error = rel;
                report.worst_param = store.name(id).to_string();
                report.worst_index = k;
            }
        }
    }
    Ok(report)
}
