//! Finite-difference gradient checking against the reverse-mode tape.

use super::params::ParameterStore;
use super::tape::{Tape, VarId};
use super::NdiffError;

/// Outcome of a gradient check over every coordinate of every parameter.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
    pub coordinates_checked: usize,
}

/// Compares the tape gradient of `f` with central differences
/// (f(p+eps) − f(p−eps)) / (2·eps) per parameter coordinate.
///
/// `f` must be deterministic given the store: any sampling noise has to be
/// frozen inside the closure. Relative error uses the denominator
/// max(|analytic|, |numeric|, 1e-8). A non-finite objective value is an
/// error, never silently skipped.
pub fn grad_check<F>(
    store: &mut ParameterStore,
    eps: f64,
    mut f: F,
) -> Result<GradCheckReport, NdiffError>
where
    F: FnMut(&ParameterStore) -> (Tape, VarId),
{
    assert!(eps > 0.0, "eps must be positive");
    let (tape, root) = f(store);
    let base = tape.value(root).item();
    if !base.is_finite() {
        return Err(NdiffError::NonFinite { context: "objective at the unperturbed point".into() });
    }
    let grads = tape.backward(root);
    let analytic = tape.param_gradients(&grads);
    drop(grads);
    drop(tape);

    let names: Vec<String> = store.names().map(str::to_string).collect();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        worst_analytic: 0.0,
        worst_numeric: 0.0,
        coordinates_checked: 0,
    };
    for name in &names {
        let dim = store.value(name).len();
        for i in 0..dim {
            let original = store.value(name).data()[i];
            store.value_mut(name).data_mut()[i] = original + eps;
            let plus = evaluate(&mut f, store, name, i)?;
            store.value_mut(name).data_mut()[i] = original - eps;
            let minus = evaluate(&mut f, store, name, i)?;
            store.value_mut(name).data_mut()[i] = original;

            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic.get(name).map_or(0.0, |g| g.data()[i]);
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            report.coordinates_checked += 1;
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst_param = name.clone();
                report.worst_index = i;
                report.worst_analytic = a;
                report.worst_numeric = numeric;
            }
        }
    }
    Ok(report)
}

fn evaluate<F>(
    f: &mut F,
    store: &ParameterStore,
    name: &str,
    index: usize,
) -> Result<f64, NdiffError>
where
    F: FnMut(&ParameterStore) -> (Tape, VarId),
{
    let (tape, root) = f(store);
    let value = tape.value(root).item();
    if value.is_finite() {
        Ok(value)
    } else {
        Err(NdiffError::NonFinite {
            context: format!("objective with {name:?}[{index}] perturbed"),
        })
    }
}
