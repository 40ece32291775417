//! One local training step: lift the model onto a tape, run the decoupling /
//! correction / classification paths according to the ablation switches, and
//! combine the losses.

use alloc::string::String;
use alloc::vec::Vec;

use crate::batchnorm::BatchStats;
use crate::dfc::{correct, fuse, loss_ce, loss_dfc, total_loss};
use crate::dfd::{decouple, gumbel_mask, loss_dfd, select_wrong_labels};
use crate::error::{config_err, Result};
use crate::model::{flatten_forward, BlockView, HeadView, LinearView, ModelBundle, Phase, SharedView};
use crate::real::Real;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Ablation switches for the three components. The corrector consumes the
/// decoupler's outputs, so `dfc` requires `dfd`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PathSwitches {
    pub dfd: bool,
    pub dfc: bool,
    pub daa: bool,
}

impl PathSwitches {
    pub const ALL_ON: Self = Self { dfd: true, dfc: true, daa: true };
    pub const ALL_OFF: Self = Self { dfd: false, dfc: false, daa: false };

    pub fn validate(&self) -> Result<()> {
        if self.dfc && !self.dfd {
            return Err(config_err("dfc_on", "the corrector requires the decoupler path"));
        }
        Ok(())
    }
}

/// Loss-shaping hyper-parameters.
#[derive(Clone, Copy, Debug)]
pub struct LossHyper<T> {
    /// Mask temperature.
    pub sigma: T,
    /// Separability temperature.
    pub tau: T,
    /// Weight of the decoupler loss.
    pub lambda1: T,
    /// Weight of the corrector loss.
    pub lambda2: T,
}

/// A client model lifted onto a tape. Private heads are lifted only when
/// their path is active, so the optimizer never touches inactive modules.
pub struct BundleView<'t, T: Real> {
    pub shared: SharedView<'t, T>,
    pub decoupler: Option<HeadView<'t, T>>,
    pub corrector: Option<HeadView<'t, T>>,
    pub aux: Option<LinearView<'t, T>>,
}

impl<'t, T: Real> BundleView<'t, T> {
    /// Trainable vars in the canonical order matching
    /// [`flat_trainables`] / [`ModelBundle`] mutation order.
    pub fn trainable_vars(&self) -> Vec<Var<'t, T>> {
        let mut vars = self.shared.trainable_vars();
        if let Some(d) = &self.decoupler {
            vars.extend(d.trainable_vars());
        }
        if let Some(a) = &self.aux {
            vars.extend(a.vars());
        }
        if let Some(c) = &self.corrector {
            vars.extend(c.trainable_vars());
        }
        vars
    }
}

/// Lifts the bundle for the active paths, taking parameter values from the
/// bundle itself.
pub fn lift_bundle<'t, T: Real>(
    tape: &'t Tape<T>,
    bundle: &ModelBundle<T>,
    switches: PathSwitches,
) -> BundleView<'t, T> {
    BundleView {
        shared: bundle.shared.lift(tape),
        decoupler: switches.dfd.then(|| bundle.private.decoupler().lift(tape)),
        corrector: switches.dfc.then(|| bundle.private.corrector().lift(tape)),
        aux: switches.dfd.then(|| LinearView::lift(bundle.private.aux(), tape)),
    }
}

/// Lifts the bundle but takes the trainable tensors from `vars`, which must
/// be in the canonical order produced by [`flat_trainables`]. Buffers
/// (BN running statistics) still come from the bundle. This is how the
/// gradient checker re-evaluates the loss at perturbed parameters.
pub fn lift_bundle_from_vars<'t, T: Real>(
    _tape: &'t Tape<T>,
    bundle: &ModelBundle<T>,
    switches: PathSwitches,
    vars: &[Var<'t, T>],
) -> BundleView<'t, T> {
    let mut cursor = 0usize;
    let mut take = |expect_shape: &[usize]| -> Var<'t, T> {
        let v = vars[cursor];
        debug_assert_eq!(v.value().shape(), expect_shape, "parameter order mismatch");
        cursor += 1;
        v
    };

    let lift_block = |block: &crate::model::ConvBlock<T>,
                      take: &mut dyn FnMut(&[usize]) -> Var<'t, T>|
     -> BlockView<'t, T> {
        let weight = take(block.conv.weight.shape());
        let bias = take(block.conv.bias.shape());
        let gamma = take(block.bn.gamma.shape());
        let beta = take(block.bn.beta.shape());
        BlockView::from_parts(block, weight, bias, gamma, beta)
    };

    let backbone: Vec<BlockView<'t, T>> =
        bundle.shared.backbone.iter().map(|b| lift_block(b, &mut take)).collect();
    let classifier = LinearView {
        weight: take(bundle.shared.classifier.weight.shape()),
        bias: take(bundle.shared.classifier.bias.shape()),
    };
    let decoupler = switches.dfd.then(|| {
        let head = bundle.private.decoupler();
        HeadView {
            block1: lift_block(&head.block1, &mut take),
            block2: lift_block(&head.block2, &mut take),
        }
    });
    let aux = switches.dfd.then(|| {
        let aux = bundle.private.aux();
        LinearView { weight: take(aux.weight.shape()), bias: take(aux.bias.shape()) }
    });
    let corrector = switches.dfc.then(|| {
        let head = bundle.private.corrector();
        HeadView {
            block1: lift_block(&head.block1, &mut take),
            block2: lift_block(&head.block2, &mut take),
        }
    });
    debug_assert_eq!(cursor, vars.len(), "unused parameter vars");
    BundleView { shared: SharedView { backbone, classifier }, decoupler, corrector, aux }
}

/// Named trainable tensors of the active paths, in the canonical order.
pub fn flat_trainables<T: Real>(
    bundle: &ModelBundle<T>,
    switches: PathSwitches,
) -> Vec<(String, Tensor<T>)> {
    let mut out: Vec<(String, Tensor<T>)> = Vec::new();
    let shared = bundle.shared.named_tensors();
    for (name, t) in shared {
        if !name.contains("running_") {
            out.push((name, t));
        }
    }
    if switches.dfd {
        for (name, t) in bundle.private.named_tensors() {
            let trainable = !name.contains("running_");
            let active = name.starts_with("decoupler") || name.starts_with("aux");
            if trainable && active {
                out.push((name, t));
            }
        }
    }
    if switches.dfc {
        for (name, t) in bundle.private.named_tensors() {
            if !name.contains("running_") && name.starts_with("corrector") {
                out.push((name, t));
            }
        }
    }
    out
}

/// Everything produced by one forward/loss construction.
pub struct BatchOutcome<'t, T: Real> {
    pub total: Var<'t, T>,
    pub ce: Var<'t, T>,
    pub dfd: Option<Var<'t, T>>,
    pub dfc: Option<Var<'t, T>>,
    /// BN batch statistics in backbone order.
    pub shared_stats: Vec<BatchStats<T>>,
    /// BN batch statistics of the decoupler (two entries) when active.
    pub decoupler_stats: Vec<BatchStats<T>>,
    /// BN batch statistics of the corrector (two entries) when active.
    pub corrector_stats: Vec<BatchStats<T>>,
}

/// Builds the combined local objective for one minibatch.
///
/// With all switches off this is the plain path: backbone, pool, classifier,
/// cross-entropy. With the decoupler on, the feature map is split by a
/// Gumbel-concrete mask (noise passed in by the caller; `None` means the
/// deterministic noise-free mask) and the separability/discriminability loss
/// is added. With the corrector also on, the related part is rectified and
/// the fused map feeds the classifier; otherwise the classifier consumes the
/// original features, which equal the sum of the two decoupled parts.
pub fn batch_loss<'t, T: Real>(
    tape: &'t Tape<T>,
    view: &BundleView<'t, T>,
    images: &Tensor<T>,
    labels: &[usize],
    hyper: &LossHyper<T>,
    noise: Option<(&Tensor<T>, &Tensor<T>)>,
    phase: Phase,
) -> Result<BatchOutcome<'t, T>> {
    let x = tape.constant(images.clone());
    let mut shared_stats = Vec::new();
    let mut decoupler_stats = Vec::new();
    let mut corrector_stats = Vec::new();

    let f = view.shared.backbone_forward(x, phase, &mut shared_stats)?;

    let (ce, dfd, dfc) = match (&view.decoupler, &view.aux) {
        (Some(decoupler), Some(aux)) => {
            let scores = decoupler.forward(f, phase, &mut decoupler_stats)?;
            let shape = scores.value().shape().to_vec();
            let zeros;
            let (noise_a, noise_b) = match noise {
                Some((a, b)) => (a, b),
                None => {
                    zeros = Tensor::zeros(shape);
                    (&zeros, &zeros)
                }
            };
            let mask = gumbel_mask(scores, hyper.sigma, noise_a, noise_b)?;
            let (f_plus, f_minus) = decouple(f, mask)?;
            let l_plus = flatten_forward(f_plus)?;
            let l_minus = flatten_forward(f_minus)?;

            // Wrong labels come from the auxiliary head on the related
            // embeddings, read as values: no gradient flows through the
            // selection.
            let aux_minus_logits = aux.forward(l_minus)?;
            let wrong = select_wrong_labels(&aux_minus_logits.value(), labels)?;
            let dfd_loss = loss_dfd(l_plus, l_minus, labels, &wrong, aux, hyper.tau)?;

            let (fused, dfc_loss) = match &view.corrector {
                Some(corrector) => {
                    let residual = corrector.forward(f_minus, phase, &mut corrector_stats)?;
                    let f_star = correct(f_minus, mask, residual)?;
                    let l_star = flatten_forward(f_star)?;
                    let dfc_loss = loss_dfc(l_star, labels, aux)?;
                    (fuse(f_plus, f_star)?, Some(dfc_loss))
                }
                // No corrector: the rectified map is the related map itself,
                // so the fused map reconstructs the original features.
                None => (fuse(f_plus, f_minus)?, None),
            };

            let logits = view.shared.classify(flatten_forward(fused)?)?;
            let ce = loss_ce(logits, labels)?;
            (ce, Some(dfd_loss), dfc_loss)
        }
        _ => {
            let logits = view.shared.classify(flatten_forward(f)?)?;
            (loss_ce(logits, labels)?, None, None)
        }
    };

    let total = match dfd {
        Some(dfd_loss) => {
            let dfc_term = match dfc {
                Some(v) => v,
                None => tape.constant(Tensor::scalar(T::zero())),
            };
            total_loss(ce, &[(dfd_loss, dfc_term)], hyper.lambda1, hyper.lambda2)?
        }
        None => ce,
    };

    Ok(BatchOutcome { total, ce, dfd, dfc, shared_stats, decoupler_stats, corrector_stats })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelConfig, PrivateParams, SharedParams};
    use crate::rng::{stream, stream_rng};

    fn toy_bundle(seed: u64) -> ModelBundle<f64> {
        let cfg = ModelConfig::toy(3);
        let mut rng = stream_rng(seed, stream::GLOBAL_INIT, 0, 0);
        let shared = SharedParams::init(&cfg, &mut rng).unwrap();
        let mut prng = stream_rng(seed, stream::PRIVATE_INIT, 0, 0);
        let private = PrivateParams::init(&cfg, &mut prng).unwrap();
        ModelBundle { shared, private, config: cfg }
    }

    fn toy_batch(seed: u64) -> (Tensor<f64>, Vec<usize>) {
        let mut rng = stream_rng(seed, 77, 0, 0);
        let images = Tensor::from_fn(alloc::vec![2, 3, 8, 8], |_| {
            0.5 + 0.25 * crate::rng::standard_normal(&mut rng)
        });
        (images, alloc::vec![0, 2])
    }

    fn hyper() -> LossHyper<f64> {
        LossHyper { sigma: 0.1, tau: 0.06, lambda1: 0.8, lambda2: 1.0 }
    }

    #[test]
    fn switches_validation() {
        assert!(PathSwitches { dfd: false, dfc: true, daa: true }.validate().is_err());
        assert!(PathSwitches::ALL_ON.validate().is_ok());
        assert!(PathSwitches::ALL_OFF.validate().is_ok());
    }

    #[test]
    fn all_paths_produce_finite_losses() {
        let bundle = toy_bundle(0);
        let (images, labels) = toy_batch(0);
        let tape = Tape::new();
        let view = lift_bundle(&tape, &bundle, PathSwitches::ALL_ON);
        let out = batch_loss(&tape, &view, &images, &labels, &hyper(), None, Phase::Train).unwrap();
        assert!(out.total.value().item().is_finite());
        assert!(out.dfd.is_some() && out.dfc.is_some());
        assert_eq!(out.shared_stats.len(), 3);
        assert_eq!(out.decoupler_stats.len(), 2);
        assert_eq!(out.corrector_stats.len(), 2);
    }

    #[test]
    fn plain_path_ignores_private_modules() {
        let bundle = toy_bundle(1);
        let (images, labels) = toy_batch(1);
        let tape = Tape::new();
        let reads_before = bundle.private.access_count();
        let view = lift_bundle(&tape, &bundle, PathSwitches::ALL_OFF);
        let out = batch_loss(&tape, &view, &images, &labels, &hyper(), None, Phase::Train).unwrap();
        assert!(out.dfd.is_none() && out.dfc.is_none());
        assert_eq!(bundle.private.access_count(), reads_before);
        assert!(out.total.value().item().is_finite());
    }

    #[test]
    fn lambdas_zero_reduces_total_to_ce() {
        let bundle = toy_bundle(2);
        let (images, labels) = toy_batch(2);
        let tape = Tape::new();
        let view = lift_bundle(&tape, &bundle, PathSwitches::ALL_ON);
        let h = LossHyper { lambda1: 0.0, lambda2: 0.0, ..hyper() };
        let out = batch_loss(&tape, &view, &images, &labels, &h, None, Phase::Train).unwrap();
        assert_eq!(out.total.value().item(), out.ce.value().item());
    }

    #[test]
    fn flat_trainables_matches_var_order() {
        let bundle = toy_bundle(3);
        for switches in [PathSwitches::ALL_ON, PathSwitches::ALL_OFF] {
            let tape = Tape::new();
            let view = lift_bundle(&tape, &bundle, switches);
            let vars = view.trainable_vars();
            let flat = flat_trainables(&bundle, switches);
            assert_eq!(vars.len(), flat.len());
            for (v, (name, t)) in vars.iter().zip(&flat) {
                assert_eq!(v.value().shape(), t.shape(), "misaligned at {name}");
                assert_eq!(v.value().data(), t.data(), "misaligned at {name}");
            }
        }
    }

    #[test]
    fn lift_from_vars_reproduces_the_loss() {
        let bundle = toy_bundle(4);
        let (images, labels) = toy_batch(4);
        let switches = PathSwitches::ALL_ON;
        let noise_a = Tensor::full(alloc::vec![2, 4, 2, 2], 0.3);
        let noise_b = Tensor::full(alloc::vec![2, 4, 2, 2], -0.2);

        let tape1 = Tape::new();
        let view1 = lift_bundle(&tape1, &bundle, switches);
        let out1 = batch_loss(
            &tape1, &view1, &images, &labels, &hyper(), Some((&noise_a, &noise_b)), Phase::Train,
        )
        .unwrap();

        let tape2 = Tape::new();
        let flat = flat_trainables(&bundle, switches);
        let vars: Vec<Var<'_, f64>> = flat.iter().map(|(_, t)| tape2.leaf(t.clone())).collect();
        let view2 = lift_bundle_from_vars(&tape2, &bundle, switches, &vars);
        let out2 = batch_loss(
            &tape2, &view2, &images, &labels, &hyper(), Some((&noise_a, &noise_b)), Phase::Train,
        )
        .unwrap();

        assert_eq!(out1.total.value().item(), out2.total.value().item());
    }
}
