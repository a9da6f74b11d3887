//! Central finite-difference verification of tape gradients.

use crate::error::{Error, Result};
use crate::numerics::store::ParamStore;

/// Outcome of a gradient check. `max_rel_err` is the largest relative
/// disagreement between analytic and numeric derivatives, with the
/// relative error defined as |a - n| / max(|a|, |n|, 1).
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub entries_checked: usize,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= self.tolerance
    }
}

/// Checks analytic gradients against central differences with step `h`.
///
/// `eval` must rebuild the computation from the store and return the
/// loss value plus per-parameter analytic gradients (typically via
/// [`crate::numerics::Tape::param_grads`]). Every parameter entry that
/// appears in the analytic gradient is perturbed by +h and -h. The graph
/// must touch at least one parameter, and every loss value and gradient
/// involved must be finite.
pub fn grad_check<F>(
    store: &mut ParamStore,
    tolerance: f64,
    h: f64,
    eval: F,
) -> Result<GradCheckReport>
where
    F: Fn(&ParamStore) -> Result<(f64, Vec<(String, Vec<f64>)>)>,
{
    if h <= 0.0 || tolerance <= 0.0 {
        return Err(Error::Config(format!(
            "gradient check needs positive step and tolerance, got h={h}, tol={tolerance}"
        )));
    }
    let (loss0, analytic) = eval(store)?;
    if !loss0.is_finite() {
        return Err(Error::NonFinite {
            location: "gradient check base loss".into(),
        });
    }
    if analytic.is_empty() {
        return Err(Error::Config(
            "gradient check requires a graph with at least one parameter".into(),
        ));
    }

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        entries_checked: 0,
        tolerance,
    };
    for (name, grads) in &analytic {
        for (index, &a) in grads.iter().enumerate() {
            if !a.is_finite() {
                return Err(Error::NonFinite {
                    location: format!("analytic gradient of `{name}`[{index}]"),
                });
            }
            let original = store.get(name)?.values[index];
            store.get_mut(name)?.values[index] = original + h;
            let (loss_plus, _) = eval(store)?;
            store.get_mut(name)?.values[index] = original - h;
            let (loss_minus, _) = eval(store)?;
            store.get_mut(name)?.values[index] = original;
            if !loss_plus.is_finite() || !loss_minus.is_finite() {
                return Err(Error::NonFinite {
                    location: format!("perturbed loss at `{name}`[{index}]"),
                });
            }
            let numeric = (loss_plus - loss_minus) / (2.0 * h);
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1.0);
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst_param = name.clone();
                report.worst_index = index;
            }
            report.entries_checked += 1;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{ParamStore, Tape, Tensor};

    fn quadratic_eval(store: &ParamStore) -> Result<(f64, Vec<(String, Vec<f64>)>)> {
        let mut tape = Tape::new(store);
        let w = tape.param("w")?;
        let loss = tape.dot(w, w)?;
        tape.backward(loss)?;
        Ok((tape.scalar(loss), tape.param_grads()))
    }

    #[test]
    fn passes_on_a_correct_gradient() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::from_values(3, 1, vec![0.5, -1.5, 2.0]).unwrap());
        let report = grad_check(&mut store, 1e-6, 1e-5, quadratic_eval).unwrap();
        assert!(report.passed(), "max rel err {}", report.max_rel_err);
        assert_eq!(report.entries_checked, 3);
    }

    #[test]
    fn flags_a_wrong_gradient() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::from_values(2, 1, vec![1.0, 2.0]).unwrap());
        let report = grad_check(&mut store, 1e-6, 1e-5, |s| {
            let (loss, mut grads) = quadratic_eval(s)?;
            grads[0].1[0] += 0.25;
            Ok((loss, grads))
        })
        .unwrap();
        assert!(!report.passed());
        assert_eq!(report.worst_param, "w");
        assert_eq!(report.worst_index, 0);
    }

    #[test]
    fn rejects_parameterless_graphs() {
        let mut store = ParamStore::new();
        let err = grad_check(&mut store, 1e-6, 1e-5, |_| Ok((1.0, vec![]))).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn rejects_non_finite_losses() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::from_values(1, 1, vec![1.0]).unwrap());
        let err = grad_check(&mut store, 1e-6, 1e-5, |_| {
            Ok((f64::NAN, vec![("w".into(), vec![0.0])]))
        })
        .unwrap_err();
        assert!(matches!(err, Error::NonFinite { .. }));
    }
}
