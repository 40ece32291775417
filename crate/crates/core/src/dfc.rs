//! Feature correction: residual calibration of the domain-related map,
//! fusion with the domain-robust map, the correction loss, the main
//! cross-entropy loss, and the combined local objective.

use crate::error::{config_err, Result};
use crate::model::LinearView;
use crate::real::{real, Real};
use crate::tape::Var;

/// Rectifies the domain-related map: `f_star = f_minus + (1 - mask) *
/// residual`, with the residual produced by the corrector on `f_minus`.
/// The caller runs the corrector so that this stays a pure combination rule.
pub fn correct<'t, T: Real>(
    f_minus: Var<'t, T>,
    mask: Var<'t, T>,
    residual: Var<'t, T>,
) -> Result<Var<'t, T>> {
    f_minus.add(mask.one_minus().mul(residual)?)
}

/// Fused features: elementwise `f_plus + f_star`.
pub fn fuse<'t, T: Real>(f_plus: Var<'t, T>, f_star: Var<'t, T>) -> Result<Var<'t, T>> {
    f_plus.add(f_star)
}

/// Correction loss over a batch: mean negative log-probability of the truth
/// under the auxiliary head applied to the rectified embeddings.
pub fn loss_dfc<'t, T: Real>(
    l_star: Var<'t, T>,
    truths: &[usize],
    aux: &LinearView<'t, T>,
) -> Result<Var<'t, T>> {
    aux.forward(l_star)?
        .log_softmax()
        .gather_classes(truths)?
        .mean_all()
        .map(|v| v.neg())
}

/// Standard cross-entropy over a batch from raw logits.
pub fn loss_ce<'t, T: Real>(logits: Var<'t, T>, truths: &[usize]) -> Result<Var<'t, T>> {
    logits
        .log_softmax()
        .gather_classes(truths)?
        .mean_all()
        .map(|v| v.neg())
}

/// Combined local objective:
/// `ce + (1/|L|) * sum_j (lambda1 * dfd_j + lambda2 * dfc_j)` over the
/// attachment layers. The per-layer list must be nonempty.
pub fn total_loss<'t, T: Real>(
    ce: Var<'t, T>,
    per_layer: &[(Var<'t, T>, Var<'t, T>)],
    lambda1: T,
    lambda2: T,
) -> Result<Var<'t, T>> {
    if per_layer.is_empty() {
        return Err(config_err("layers", "need at least one attachment layer"));
    }
    let mut acc: Option<Var<'t, T>> = None;
    for &(dfd, dfc) in per_layer {
        let term = dfd.scale(lambda1).add(dfc.scale(lambda2))?;
        acc = Some(match acc {
            Some(a) => a.add(term)?,
            None => term,
        });
    }
    let penalty = acc.expect("nonempty").scale(T::one() / real::<T>(per_layer.len() as f64));
    ce.add(penalty)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Linear, LinearView};
    use crate::tape::Tape;
    use crate::tensor::Tensor;

    #[test]
    fn correct_gates_residual_by_mask_complement() {
        let tape: Tape<f64> = Tape::new();
        let fm = tape.leaf(Tensor::from_vec(alloc::vec![2], alloc::vec![1.0, -2.0]).unwrap());
        let residual = tape.leaf(Tensor::from_vec(alloc::vec![2], alloc::vec![10.0, 10.0]).unwrap());

        // mask of ones gates the residual off entirely
        let ones = tape.constant(Tensor::full(alloc::vec![2], 1.0));
        let fstar = correct(fm, ones, residual).unwrap();
        assert_eq!(fstar.value().data(), fm.value().data());

        // zero residual leaves the map untouched for any mask
        let half = tape.constant(Tensor::full(alloc::vec![2], 0.5));
        let zero = tape.constant(Tensor::zeros(alloc::vec![2]));
        let fstar = correct(fm, half, zero).unwrap();
        assert_eq!(fstar.value().data(), fm.value().data());
    }

    #[test]
    fn correct_matches_elementwise_oracle() {
        let tape: Tape<f64> = Tape::new();
        let fm_t = Tensor::from_vec(alloc::vec![4], alloc::vec![0.5, -1.0, 2.0, 0.0]).unwrap();
        let m_t = Tensor::from_vec(alloc::vec![4], alloc::vec![0.2, 0.9, 0.5, 0.01]).unwrap();
        let r_t = Tensor::from_vec(alloc::vec![4], alloc::vec![1.0, -2.0, 0.3, 4.0]).unwrap();
        let fm = tape.leaf(fm_t.clone());
        let m = tape.constant(m_t.clone());
        let r = tape.leaf(r_t.clone());
        let fstar = correct(fm, m, r).unwrap();
        for i in 0..4 {
            let oracle = fm_t.data()[i] + (1.0 - m_t.data()[i]) * r_t.data()[i];
            assert!((fstar.value().data()[i] - oracle).abs() < 1e-15);
        }
    }

    #[test]
    fn fuse_identities() {
        let tape: Tape<f64> = Tape::new();
        let fp = tape.leaf(Tensor::from_vec(alloc::vec![2], alloc::vec![1.0, 2.0]).unwrap());
        let zero = tape.constant(Tensor::zeros(alloc::vec![2]));
        assert_eq!(fuse(fp, zero).unwrap().value().data(), &[1.0, 2.0]);
        assert_eq!(fuse(zero, fp).unwrap().value().data(), &[1.0, 2.0]);
    }

    #[test]
    fn dfc_loss_on_uniform_softmax_is_log_c() {
        let tape: Tape<f64> = Tape::new();
        let l = tape.leaf(Tensor::from_vec(alloc::vec![1, 3], alloc::vec![0.3, -0.2, 0.9]).unwrap());
        for classes in [4usize, 10] {
            let aux = Linear::<f64> {
                weight: Tensor::zeros(alloc::vec![classes, 3]),
                bias: Tensor::zeros(alloc::vec![classes]),
            };
            let aux_view = LinearView::lift(&aux, &tape);
            let loss = loss_dfc(l, &[1], &aux_view).unwrap();
            let expect = (classes as f64).ln();
            assert!((loss.value().item() - expect).abs() < 1e-12);
        }
        assert!(((4.0f64).ln() - 1.386_294_361_119_890_6).abs() < 1e-14);
        assert!(((10.0f64).ln() - 2.302_585_092_994_046).abs() < 1e-14);
    }

    #[test]
    fn ce_loss_is_zero_at_a_confident_correct_prediction() {
        let tape: Tape<f64> = Tape::new();
        // extremely peaked logits at the truth: loss ~ 0
        let logits =
            tape.leaf(Tensor::from_vec(alloc::vec![1, 3], alloc::vec![50.0, 0.0, 0.0]).unwrap());
        let loss = loss_ce(logits, &[0]).unwrap();
        assert!(loss.value().item() >= 0.0);
        assert!(loss.value().item() < 1e-12);
    }

    #[test]
    fn total_loss_arithmetic() {
        let tape: Tape<f64> = Tape::new();
        let ce = tape.leaf(Tensor::scalar(1.0));
        let dfd = tape.leaf(Tensor::scalar(2.0));
        let dfc = tape.leaf(Tensor::scalar(3.0));

        // lambda1 = lambda2 = 0 collapses to the cross-entropy alone
        let l = total_loss(ce, &[(dfd, dfc)], 0.0, 0.0).unwrap();
        assert_eq!(l.value().item(), 1.0);

        // 1 + 0.8 * 2 + 1.0 * 3 = 5.6
        let l = total_loss(ce, &[(dfd, dfc)], 0.8, 1.0).unwrap();
        assert!((l.value().item() - 5.6).abs() < 1e-15);

        // two layers with unit weights average: 1 + ((2+2) + (4+4)) / 2 = ce + 6
        let d2 = tape.leaf(Tensor::scalar(4.0));
        let l = total_loss(ce, &[(dfd, dfd), (d2, d2)], 1.0, 1.0).unwrap();
        assert!((l.value().item() - 7.0).abs() < 1e-15);
    }

    #[test]
    fn total_loss_requires_a_layer() {
        let tape: Tape<f64> = Tape::new();
        let ce = tape.leaf(Tensor::scalar(1.0));
        assert!(matches!(
            total_loss(ce, &[], 0.8, 1.0),
            Err(crate::Error::Config { .. })
        ));
    }

    #[test]
    fn total_loss_is_linear_in_lambdas() {
        let tape: Tape<f64> = Tape::new();
        let ce = tape.leaf(Tensor::scalar(0.7));
        let dfd = tape.leaf(Tensor::scalar(1.3));
        let dfc = tape.leaf(Tensor::scalar(-0.4));
        let at = |l1: f64, l2: f64| total_loss(ce, &[(dfd, dfc)], l1, l2).unwrap().value().item();
        let base = at(0.0, 0.0);
        let d1 = at(1.0, 0.0) - base;
        let d2 = at(0.0, 1.0) - base;
        for (l1, l2) in [(0.8, 1.0), (2.0, 0.5), (0.0, 3.0)] {
            assert!((at(l1, l2) - (base + l1 * d1 + l2 * d2)).abs() < 1e-12);
        }
    }
}
