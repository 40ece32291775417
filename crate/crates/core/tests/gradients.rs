//! Finite-difference checks for every differentiable primitive and for the
//! full combined loss on a toy model. The numeric side is the oracle: central
//! differences with step 1e-5 at f64.

use f2dc_core::gradcheck::check_gradients;
use f2dc_core::model::{ModelBundle, ModelConfig, Phase, PrivateParams, SharedParams};
use f2dc_core::rng::{standard_normal, stream, stream_rng};
use f2dc_core::training::{
    batch_loss, flat_trainables, lift_bundle_from_vars, LossHyper, PathSwitches,
};
use f2dc_core::{dfd, Tensor};

const STEP: f64 = 1e-5;
const FLOOR: f64 = 1e-6;
const PRIMITIVE_TOL: f64 = 1e-6;

fn randn(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = stream_rng(seed, 1000, 0, 0);
    Tensor::from_fn(shape.to_vec(), |_| standard_normal(&mut rng))
}

/// Random values bounded away from zero, for kinked or log-domain primitives.
fn randn_offset(shape: &[usize], seed: u64, min_abs: f64) -> Tensor<f64> {
    let mut rng = stream_rng(seed, 1001, 0, 0);
    Tensor::from_fn(shape.to_vec(), |_| {
        let v = standard_normal(&mut rng);
        if v >= 0.0 {
            v + min_abs
        } else {
            v - min_abs
        }
    })
}

fn check_unary(
    name: &str,
    input: Tensor<f64>,
    f: impl for<'t> Fn(f2dc_core::Var<'t, f64>) -> f2dc_core::error::Result<f2dc_core::Var<'t, f64>>,
) {
    let params = vec![(name.to_string(), input)];
    let report = check_gradients(
        &params,
        |_tape, vars| f(vars[0])?.sum_all(),
        STEP,
        FLOOR,
    )
    .unwrap();
    assert!(
        report.max_rel_err < PRIMITIVE_TOL,
        "{name}: rel err {} at {:?} (analytic {}, numeric {})",
        report.max_rel_err,
        report.worst,
        report.analytic_at_worst,
        report.numeric_at_worst
    );
}

#[test]
fn elementwise_primitives() {
    check_unary("relu", randn_offset(&[3, 4], 1, 1e-2), |v| Ok(v.relu()));
    check_unary("sigmoid", randn(&[3, 4], 2), |v| Ok(v.sigmoid()));
    check_unary("exp", randn(&[3, 4], 3), |v| Ok(v.exp()));
    check_unary("ln", randn(&[3, 4], 4).map(|v| v.abs() + 0.5), |v| v.ln());
    check_unary("neg", randn(&[3, 4], 5), |v| Ok(v.neg()));
    check_unary("scale", randn(&[3, 4], 6), |v| Ok(v.scale(-1.7)));
    check_unary("add_scalar", randn(&[3, 4], 7), |v| Ok(v.add_scalar(0.4)));
    check_unary("rsub_scalar", randn(&[3, 4], 8), |v| Ok(v.rsub_scalar(1.0)));
    // clamp with inputs strictly inside the interval
    check_unary("clamp", randn(&[3, 4], 9).map(|v| v.tanh() * 0.9), |v| {
        Ok(v.clamp(-0.99, 0.99))
    });
}

#[test]
fn binary_primitives() {
    let a = randn(&[2, 5], 10);
    let b = randn(&[2, 5], 11);
    let params = vec![("a".to_string(), a), ("b".to_string(), b)];
    for (name, op) in [
        ("add", 0usize),
        ("sub", 1),
        ("mul", 2),
    ] {
        let report = check_gradients(
            &params,
            move |_tape, vars| {
                let combined = match op {
                    0 => vars[0].add(vars[1])?,
                    1 => vars[0].sub(vars[1])?,
                    _ => vars[0].mul(vars[1])?,
                };
                // a nonlinearity after the op so both grads are nontrivial
                combined.sigmoid().sum_all()
            },
            STEP,
            FLOOR,
        )
        .unwrap();
        assert!(report.max_rel_err < PRIMITIVE_TOL, "{name}: {report:?}");
    }
}

#[test]
fn softmax_and_reductions() {
    check_unary("softmax", randn(&[4, 5], 12), |v| {
        // weight the outputs so the gradient is not identically zero
        let w = v.tape().constant(Tensor::from_fn(vec![4, 5], |i| (i as f64 * 0.37).sin()));
        v.softmax().mul(w)
    });
    check_unary("log_softmax", randn(&[4, 5], 13), |v| {
        let w = v.tape().constant(Tensor::from_fn(vec![4, 5], |i| (i as f64 * 0.61).cos()));
        v.log_softmax().mul(w)
    });
    check_unary("mean_all", randn(&[3, 7], 14), |v| v.mean_all());
    check_unary("flatten", randn(&[2, 3, 2, 2], 15), |v| {
        let w = v.tape().constant(Tensor::from_fn(vec![2, 12], |i| (i as f64 * 0.23).sin()));
        v.flatten()?.mul(w)
    });
    check_unary("gather", randn(&[3, 4], 16), |v| {
        v.log_softmax().gather_classes(&[1, 0, 3])
    });
}

#[test]
fn linear_gradients() {
    let params = vec![
        ("x".to_string(), randn(&[3, 4], 17)),
        ("w".to_string(), randn(&[2, 4], 18).scale(0.5)),
        ("b".to_string(), randn(&[2], 19).scale(0.1)),
    ];
    let report = check_gradients(
        &params,
        |_tape, vars| vars[0].linear(vars[1], vars[2])?.sigmoid().sum_all(),
        STEP,
        FLOOR,
    )
    .unwrap();
    assert!(report.max_rel_err < PRIMITIVE_TOL, "{report:?}");
}

#[test]
fn cosine_gradients() {
    let params = vec![
        ("u".to_string(), randn_offset(&[3, 4], 20, 0.2)),
        ("v".to_string(), randn_offset(&[3, 4], 21, 0.2)),
    ];
    let report = check_gradients(
        &params,
        |_tape, vars| vars[0].cosine_rows(vars[1])?.mean_all(),
        STEP,
        FLOOR,
    )
    .unwrap();
    assert!(report.max_rel_err < PRIMITIVE_TOL, "{report:?}");
}

#[test]
fn conv2d_gradient_on_random_1x2x4x4_input() {
    // the named conv oracle case: random 1x2x4x4 input, stride 1, padding 1
    let params = vec![
        ("x".to_string(), randn(&[1, 2, 4, 4], 22)),
        ("w".to_string(), randn(&[3, 2, 3, 3], 23).scale(0.4)),
        ("b".to_string(), randn(&[3], 24).scale(0.1)),
    ];
    let report = check_gradients(
        &params,
        |_tape, vars| vars[0].conv2d(vars[1], vars[2], 1, 1)?.sigmoid().sum_all(),
        STEP,
        FLOOR,
    )
    .unwrap();
    assert!(report.max_rel_err < 1e-6, "{report:?}");
}

#[test]
fn conv2d_strided_gradients() {
    let params = vec![
        ("x".to_string(), randn(&[2, 2, 6, 6], 25)),
        ("w".to_string(), randn(&[2, 2, 3, 3], 26).scale(0.4)),
        ("b".to_string(), randn(&[2], 27).scale(0.1)),
    ];
    let report = check_gradients(
        &params,
        |_tape, vars| vars[0].conv2d(vars[1], vars[2], 2, 0)?.sigmoid().sum_all(),
        STEP,
        FLOOR,
    )
    .unwrap();
    assert!(report.max_rel_err < PRIMITIVE_TOL, "{report:?}");
}

#[test]
fn pooling_gradients() {
    check_unary("avg_pool2d", randn(&[2, 3, 4, 4], 28), |v| {
        let w = v.tape().constant(Tensor::from_fn(vec![2, 3, 2, 2], |i| (i as f64 * 0.41).sin()));
        v.avg_pool2d(2)?.mul(w)
    });
    check_unary("global_avg_pool", randn(&[2, 3, 4, 4], 29), |v| {
        let w = v.tape().constant(Tensor::from_fn(vec![2, 3], |i| (i as f64 * 0.73).cos()));
        v.global_avg_pool()?.mul(w)
    });
}

#[test]
fn batchnorm_gradients() {
    // training mode: gradient flows through the batch statistics
    let params = vec![
        ("x".to_string(), randn(&[2, 3, 2, 2], 30)),
        ("gamma".to_string(), randn(&[3], 31).map(|v| 1.0 + 0.2 * v.tanh())),
        ("beta".to_string(), randn(&[3], 32).scale(0.1)),
    ];
    let report = check_gradients(
        &params,
        |_tape, vars| {
            let w = vars[0]
                .tape()
                .constant(Tensor::from_fn(vec![2, 3, 2, 2], |i| (i as f64 * 0.29).sin()));
            let (y, _stats) = vars[0].batchnorm_train(vars[1], vars[2], 1e-5)?;
            y.mul(w)?.sum_all()
        },
        STEP,
        FLOOR,
    )
    .unwrap();
    assert!(report.max_rel_err < PRIMITIVE_TOL, "train: {report:?}");

    // inference mode against fixed running statistics
    let rm = Tensor::from_vec(vec![3], vec![0.1, -0.2, 0.05]).unwrap();
    let rv = Tensor::from_vec(vec![3], vec![0.8, 1.2, 1.0]).unwrap();
    let params = vec![
        ("x".to_string(), randn(&[2, 3, 2, 2], 33)),
        ("gamma".to_string(), randn(&[3], 34).map(|v| 1.0 + 0.2 * v.tanh())),
        ("beta".to_string(), randn(&[3], 35).scale(0.1)),
    ];
    let report = check_gradients(
        &params,
        move |_tape, vars| {
            let y = vars[0].batchnorm_eval(vars[1], vars[2], &rm, &rv, 1e-5)?;
            y.sigmoid().sum_all()
        },
        STEP,
        FLOOR,
    )
    .unwrap();
    assert!(report.max_rel_err < PRIMITIVE_TOL, "eval: {report:?}");
}

#[test]
fn gumbel_mask_gradients() {
    let noise_a = randn(&[2, 2, 2, 2], 36);
    let noise_b = randn(&[2, 2, 2, 2], 37);
    let feat = randn(&[2, 2, 2, 2], 38);
    let params = vec![("scores".to_string(), randn(&[2, 2, 2, 2], 39))];
    let report = check_gradients(
        &params,
        move |_tape, vars| {
            let mask = dfd::gumbel_mask(vars[0], 0.5, &noise_a, &noise_b)?;
            let f = vars[0].tape().constant(feat.clone());
            mask.mul(f)?.sum_all()
        },
        STEP,
        FLOOR,
    )
    .unwrap();
    assert!(report.max_rel_err < PRIMITIVE_TOL, "{report:?}");
}

fn toy_bundle(classes: usize, seed: u64) -> ModelBundle<f64> {
    let cfg = ModelConfig::toy(classes);
    let mut rng = stream_rng(seed, stream::GLOBAL_INIT, 0, 0);
    let shared = SharedParams::init(&cfg, &mut rng).unwrap();
    let mut prng = stream_rng(seed, stream::PRIVATE_INIT, 0, 0);
    let private = PrivateParams::init(&cfg, &mut prng).unwrap();
    ModelBundle { shared, private, config: cfg }
}

/// Error floor for whole-model checks. Central differences at f64 carry
/// roundoff noise around 1e-10 for losses of this magnitude, and parameters
/// with structurally zero gradients (conv biases absorbed by the following
/// BN) would otherwise compare that noise against an exact zero.
const MODEL_FLOOR: f64 = 1e-5;

/// Full combined loss (decoupling, correction, classification) on a toy
/// model: every trainable parameter's gradient against finite differences.
#[test]
fn full_model_loss_gradients_two_classes() {
    let bundle = toy_bundle(2, 40);
    let switches = PathSwitches::ALL_ON;
    let hyper = LossHyper { sigma: 0.1, tau: 0.06, lambda1: 0.8, lambda2: 1.0 };

    let mut rng = stream_rng(41, 500, 0, 0);
    let images = Tensor::from_fn(vec![2, 3, 8, 8], |_| 0.5 + 0.25 * standard_normal(&mut rng));
    let labels = vec![0usize, 1];
    let noise_a: Tensor<f64> = dfd::sample_gumbel(&[2, 4, 2, 2], &mut rng);
    let noise_b: Tensor<f64> = dfd::sample_gumbel(&[2, 4, 2, 2], &mut rng);

    let params = flat_trainables(&bundle, switches);
    assert!(params.iter().any(|(n, _)| n.starts_with("decoupler")));
    assert!(params.iter().any(|(n, _)| n.starts_with("corrector")));
    assert!(params.iter().any(|(n, _)| n.starts_with("aux")));

    let report = check_gradients(
        &params,
        |tape, vars| {
            let view = lift_bundle_from_vars(tape, &bundle, switches, vars);
            let out = batch_loss(
                tape,
                &view,
                &images,
                &labels,
                &hyper,
                Some((&noise_a, &noise_b)),
                Phase::Train,
            )?;
            Ok(out.total)
        },
        STEP,
        MODEL_FLOOR,
    )
    .unwrap();
    assert!(
        report.max_rel_err < 1e-4,
        "full-loss gradient check failed: {} at param {:?} (analytic {}, numeric {})",
        report.max_rel_err,
        report.worst,
        report.analytic_at_worst,
        report.numeric_at_worst
    );
}
