//! Central finite-difference gradient checking.
//!
//! The checker re-evaluates the loss closure from scratch for every
//! perturbation, so the closure must be deterministic: any noise it uses has
//! to be passed in as fixed tensors, not sampled inside.

use alloc::string::String;
use alloc::vec::Vec;

use crate::error::Result;
use crate::real::Real;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Worst observed deviation between analytic and numeric gradients.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// `(parameter index, element index)` of the worst deviation.
    pub worst: (usize, usize),
    pub analytic_at_worst: f64,
    pub numeric_at_worst: f64,
}

/// Relative error with a floor so that near-zero gradient pairs do not blow
/// up the ratio.
fn rel_err(a: f64, n: f64, floor: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(floor)
}

/// Checks the analytic gradient of `loss_fn` w.r.t. every tensor in `params`
/// against central finite differences with the given `step`.
///
/// `loss_fn` receives a fresh tape and the lifted parameters (same order as
/// `params`) and must return a scalar loss.
pub fn check_gradients<T, F>(
    params: &[(String, Tensor<T>)],
    loss_fn: F,
    step: f64,
    floor: f64,
) -> Result<GradCheckReport>
where
    T: Real,
    F: for<'t> Fn(&'t Tape<T>, &[Var<'t, T>]) -> Result<Var<'t, T>>,
{
    // Analytic pass.
    let analytic: Vec<Tensor<T>> = {
        let tape: Tape<T> = Tape::new();
        let vars: Vec<Var<'_, T>> =
            params.iter().map(|(_, p)| tape.leaf(p.clone())).collect();
        let loss = loss_fn(&tape, &vars)?;
        let grads = tape.backward(loss)?;
        vars.iter().map(|v| grads.wrt_or_zeros(*v)).collect()
    };

    let eval = |perturbed: &[(String, Tensor<T>)]| -> Result<f64> {
        let tape: Tape<T> = Tape::new();
        let vars: Vec<Var<'_, T>> =
            perturbed.iter().map(|(_, p)| tape.leaf(p.clone())).collect();
        Ok(loss_fn(&tape, &vars)?.value().item().as_f64())
    };

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: (0, 0),
        analytic_at_worst: 0.0,
        numeric_at_worst: 0.0,
    };
    let mut work: Vec<(String, Tensor<T>)> = params.to_vec();
    for pi in 0..params.len() {
        for ei in 0..params[pi].1.len() {
            let orig = work[pi].1.data()[ei];
            work[pi].1.data_mut()[ei] = orig + T::of_f64(step);
            let up = eval(&work)?;
            work[pi].1.data_mut()[ei] = orig - T::of_f64(step);
            let down = eval(&work)?;
            work[pi].1.data_mut()[ei] = orig;

            let numeric = (up - down) / (2.0 * step);
            let a = analytic[pi].data()[ei].as_f64();
            let err = rel_err(a, numeric, floor);
            if err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst = (pi, ei);
                report.analytic_at_worst = a;
                report.numeric_at_worst = numeric;
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::string::ToString;

    #[test]
    fn quadratic_passes_the_checker() {
        let params = vec![(
            "p".to_string(),
            Tensor::from_vec(vec![3], vec![0.5f64, -1.0, 2.0]).unwrap(),
        )];
        let report = check_gradients(
            &params,
            |_tape, vars| vars[0].mul(vars[0])?.sum_all(),
            1e-5,
            1e-6,
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-8, "{report:?}");
    }

    #[test]
    fn checker_catches_a_wrong_gradient() {
        // exp forward with a (deliberately) linear surrogate: check must fail
        let params =
            vec![("p".to_string(), Tensor::from_vec(vec![2], vec![0.3f64, -0.2]).unwrap())];
        let report = check_gradients(
            &params,
            |_tape, vars| {
                // loss = sum(2 * p): analytic grad 2, while we compare against
                // d/dp sum(p^2) by evaluating a different closure below.
                vars[0].scale(2.0).sum_all()
            },
            1e-5,
            1e-6,
        )
        .unwrap();
        // sanity: correct closure passes ...
        assert!(report.max_rel_err < 1e-9);
        // ... and a mismatched pair of closures would not; emulate by comparing
        // the analytic gradient of scale(2) against numeric of mul:
        let tape: Tape<f64> = Tape::new();
        let v = tape.leaf(params[0].1.clone());
        let loss = v.scale(2.0).sum_all().unwrap();
        let g = tape.backward(loss).unwrap().wrt(v).unwrap().clone();
        let numeric = {
            let f = |x: f64| x * x;
            (f(0.3 + 1e-5) - f(0.3 - 1e-5)) / 2e-5
        };
        assert!(rel_err(g.data()[0], numeric, 1e-6) > 1e-2);
    }
}
