//! Evaluation: per-domain top-1 accuracy with AVG/STD, feature-protocol
//! probes that route a chosen feature map through the classifier, and the
//! embedding-covariance collapse diagnostic.

use alloc::vec::Vec;

use num_traits::Float;

use crate::data::SampleSet;
use crate::dfc::correct;
use crate::dfd::{decouple, mask_value};
use crate::error::{config_err, Result};
use crate::model::{flatten_forward, ModelBundle, Phase, PrivateParams, SharedParams};
use crate::ops::argmax_rows;
use crate::real::Real;
use crate::spectrum::covariance_spectrum;
use crate::tape::Tape;
use crate::tensor::Tensor;

/// Evaluation batch size; forward-only passes are cheap, this just bounds
/// peak memory.
const EVAL_BATCH: usize = 128;

/// Per-domain accuracies with their mean and population standard deviation.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainMetrics {
    pub per_domain: Vec<f64>,
    pub avg: f64,
    pub std: f64,
}

/// Population standard deviation (the domain count is tiny and fixed, so the
/// uncorrected formula is the deliberate choice).
pub fn population_std(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    let mean = xs.iter().sum::<f64>() / xs.len() as f64;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / xs.len() as f64;
    Float::sqrt(var)
}

impl DomainMetrics {
    pub fn from_accuracies(per_domain: Vec<f64>) -> Self {
        let avg = per_domain.iter().sum::<f64>() / per_domain.len().max(1) as f64;
        let std = population_std(&per_domain);
        Self { per_domain, avg, std }
    }
}

/// Which feature map feeds the flatten/classifier stage.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FeatureProtocol {
    /// Plain path: backbone features untouched (the global model's own view).
    Plain,
    /// Domain-robust part `mask * f`.
    Robust,
    /// Domain-related part `(1 - mask) * f`.
    Related,
    /// Rectified part `f_minus + (1 - mask) * corrector(f_minus)`.
    Rectified,
    /// Fused map `f_plus + f_star`.
    Fused,
}

impl FeatureProtocol {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "plain" => Ok(Self::Plain),
            "f+" => Ok(Self::Robust),
            "f-" => Ok(Self::Related),
            "f*" => Ok(Self::Rectified),
            "f~" => Ok(Self::Fused),
            other => Err(config_err("protocol", alloc::format!("unknown protocol `{other}`"))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Plain => "plain",
            Self::Robust => "f+",
            Self::Related => "f-",
            Self::Rectified => "f*",
            Self::Fused => "f~",
        }
    }
}

/// Plain-path logits for a batch of images (inference mode).
pub fn plain_logits<T: Real>(shared: &SharedParams<T>, images: &Tensor<T>) -> Result<Tensor<T>> {
    let tape: Tape<T> = Tape::new();
    let view = shared.lift(&tape);
    let mut stats = Vec::new();
    let f = view.backbone_forward(tape.constant(images.clone()), Phase::Eval, &mut stats)?;
    let logits = view.classify(flatten_forward(f)?)?;
    Ok((*logits.value()).clone())
}

/// Plain-path embeddings `(B, d)` for a batch of images (inference mode).
pub fn plain_embeddings<T: Real>(
    shared: &SharedParams<T>,
    images: &Tensor<T>,
) -> Result<Tensor<T>> {
    let tape: Tape<T> = Tape::new();
    let view = shared.lift(&tape);
    let mut stats = Vec::new();
    let f = view.backbone_forward(tape.constant(images.clone()), Phase::Eval, &mut stats)?;
    Ok((*flatten_forward(f)?.value()).clone())
}

fn batched_correct<T: Real, F>(set: &SampleSet<T>, mut logits_of: F) -> Result<usize>
where
    F: FnMut(&Tensor<T>) -> Result<Tensor<T>>,
{
    let n = set.len();
    let mut correct = 0usize;
    let mut start = 0usize;
    while start < n {
        let end = (start + EVAL_BATCH).min(n);
        let idx: Vec<usize> = (start..end).collect();
        let (images, labels) = set.batch(&idx);
        let logits = logits_of(&images)?;
        for (pred, truth) in argmax_rows(&logits).into_iter().zip(&labels) {
            if pred == *truth {
                correct += 1;
            }
        }
        start = end;
    }
    Ok(correct)
}

/// Top-1 accuracy of the plain path on one sample set.
pub fn plain_accuracy<T: Real>(shared: &SharedParams<T>, set: &SampleSet<T>) -> Result<f64> {
    let correct = batched_correct(set, |images| plain_logits(shared, images))?;
    Ok(correct as f64 / set.len().max(1) as f64)
}

/// Global-model evaluation over the per-domain test sets.
pub fn evaluate_global<T: Real>(
    shared: &SharedParams<T>,
    test_sets: &[SampleSet<T>],
) -> Result<DomainMetrics> {
    let mut per_domain = Vec::with_capacity(test_sets.len());
    for set in test_sets {
        per_domain.push(plain_accuracy(shared, set)?);
    }
    Ok(DomainMetrics::from_accuracies(per_domain))
}

/// Logits for a batch routed through the chosen feature protocol, using the
/// client's private modules with the deterministic noise-free mask.
pub fn protocol_logits<T: Real>(
    shared: &SharedParams<T>,
    private: &PrivateParams<T>,
    images: &Tensor<T>,
    sigma: T,
    protocol: FeatureProtocol,
) -> Result<Tensor<T>> {
    if protocol == FeatureProtocol::Plain {
        return plain_logits(shared, images);
    }
    let tape: Tape<T> = Tape::new();
    let view = shared.lift(&tape);
    let mut stats = Vec::new();
    let f = view.backbone_forward(tape.constant(images.clone()), Phase::Eval, &mut stats)?;

    let decoupler = private.decoupler().lift(&tape);
    let scores = decoupler.forward(f, Phase::Eval, &mut stats)?;
    let mask = tape.constant(mask_value(&scores.value(), sigma)?);
    let (f_plus, f_minus) = decouple(f, mask)?;

    let feature = match protocol {
        FeatureProtocol::Robust => f_plus,
        FeatureProtocol::Related => f_minus,
        FeatureProtocol::Rectified | FeatureProtocol::Fused => {
            let corrector = private.corrector().lift(&tape);
            let residual = corrector.forward(f_minus, Phase::Eval, &mut stats)?;
            let f_star = correct(f_minus, mask, residual)?;
            if protocol == FeatureProtocol::Rectified {
                f_star
            } else {
                f_plus.add(f_star)?
            }
        }
        FeatureProtocol::Plain => unreachable!("handled above"),
    };
    let logits = view.classify(flatten_forward(feature)?)?;
    Ok((*logits.value()).clone())
}

/// Top-1 accuracy of a feature protocol on one sample set.
pub fn protocol_accuracy<T: Real>(
    bundle: &ModelBundle<T>,
    set: &SampleSet<T>,
    sigma: T,
    protocol: FeatureProtocol,
) -> Result<f64> {
    let correct = batched_correct(set, |images| {
        protocol_logits(&bundle.shared, &bundle.private, images, sigma, protocol)
    })?;
    Ok(correct as f64 / set.len().max(1) as f64)
}

/// Plain-path embeddings pooled over several sample sets, row order following
/// the set order.
pub fn pooled_embeddings<T: Real>(
    shared: &SharedParams<T>,
    sets: &[SampleSet<T>],
) -> Result<Tensor<T>> {
    let mut rows: Vec<T> = Vec::new();
    let mut d = 0usize;
    let mut total = 0usize;
    for set in sets {
        let n = set.len();
        let mut start = 0usize;
        while start < n {
            let end = (start + EVAL_BATCH).min(n);
            let idx: Vec<usize> = (start..end).collect();
            let (images, _) = set.batch(&idx);
            let emb = plain_embeddings(shared, &images)?;
            d = emb.shape()[1];
            rows.extend_from_slice(emb.data());
            start = end;
        }
        total += n;
    }
    Ok(Tensor::from_raw(alloc::vec![total, d], rows))
}

/// Descending singular values of the embedding covariance over the pooled
/// test sets.
pub fn collapse_spectrum<T: Real>(
    shared: &SharedParams<T>,
    sets: &[SampleSet<T>],
) -> Result<Vec<T>> {
    covariance_spectrum(&pooled_embeddings(shared, sets)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{build_partition, DataConfig};
    use crate::model::ModelConfig;
    use crate::rng::{stream, stream_rng};

    fn toy_setup() -> (ModelBundle<f64>, Vec<SampleSet<f64>>) {
        let model_cfg = ModelConfig::desk(4);
        let mut grng = stream_rng(0, stream::GLOBAL_INIT, 0, 0);
        let shared = SharedParams::init(&model_cfg, &mut grng).unwrap();
        let mut prng = stream_rng(0, stream::PRIVATE_INIT, 0, 0);
        let private = PrivateParams::init(&model_cfg, &mut prng).unwrap();
        let data_cfg = DataConfig { train_per_client: 12, test_per_domain: 12, ..DataConfig::desk() };
        let (_, _, tests) = build_partition(&data_cfg, 0).unwrap();
        let tests: Vec<SampleSet<f64>> = tests.iter().map(|t| t.cast()).collect();
        (ModelBundle { shared, private, config: model_cfg }, tests)
    }

    #[test]
    fn metrics_two_point_formula() {
        let m = DomainMetrics::from_accuracies(alloc::vec![0.6, 0.8]);
        assert!((m.avg - 0.7).abs() < 1e-15);
        assert!((m.std - 0.1).abs() < 1e-15);
    }

    #[test]
    fn constant_classifier_scores_one_over_c() {
        let (mut bundle, tests) = toy_setup();
        // zero shared params: logits constant, argmax picks class 0, and the
        // label-uniform test sets make accuracy exactly 1/C per domain
        for t in bundle.shared.trainables_mut() {
            *t = Tensor::zeros(t.shape().to_vec());
        }
        let metrics = evaluate_global(&bundle.shared, &tests).unwrap();
        for &acc in &metrics.per_domain {
            assert!((acc - 0.25).abs() < 1e-12);
        }
        assert!(metrics.std < 1e-12);
    }

    #[test]
    fn protocol_parsing_roundtrip() {
        for p in ["plain", "f+", "f-", "f*", "f~"] {
            assert_eq!(FeatureProtocol::parse(p).unwrap().as_str(), p);
        }
        assert!(FeatureProtocol::parse("f?").is_err());
    }

    #[test]
    fn fused_protocol_runs_and_is_finite() {
        let (bundle, tests) = toy_setup();
        for protocol in [
            FeatureProtocol::Plain,
            FeatureProtocol::Robust,
            FeatureProtocol::Related,
            FeatureProtocol::Rectified,
            FeatureProtocol::Fused,
        ] {
            let acc = protocol_accuracy(&bundle, &tests[0], 0.1, protocol).unwrap();
            assert!((0.0..=1.0).contains(&acc));
        }
    }

    #[test]
    fn robust_protocol_with_all_ones_mask_equals_plain() {
        // the decoupling identity: with a mask of ones the robust part is the
        // feature map itself, so routing it equals the plain path
        let (bundle, tests) = toy_setup();
        let idx: Vec<usize> = (0..4).collect();
        let (images, _) = tests[0].batch(&idx);

        let tape: Tape<f64> = Tape::new();
        let view = bundle.shared.lift(&tape);
        let mut stats = Vec::new();
        let f = view
            .backbone_forward(tape.constant(images.clone()), Phase::Eval, &mut stats)
            .unwrap();
        let ones = tape.constant(Tensor::full(f.value().shape().to_vec(), 1.0));
        let (f_plus, _) = decouple(f, ones).unwrap();
        let routed = view.classify(flatten_forward(f_plus).unwrap()).unwrap();
        let plain = plain_logits(&bundle.shared, &images).unwrap();
        assert_eq!(*routed.value(), plain);
    }

    #[test]
    fn zero_network_collapse_spectrum_is_zero() {
        let (mut bundle, tests) = toy_setup();
        for t in bundle.shared.trainables_mut() {
            *t = Tensor::zeros(t.shape().to_vec());
        }
        let spec = collapse_spectrum(&bundle.shared, &tests).unwrap();
        assert!(spec.iter().all(|&v| v.abs() < 1e-18));
        // sorted contract
        assert!(spec.windows(2).all(|w| w[0] >= w[1]));
    }
}
