//! Feature decoupling: Gumbel-concrete mask generation, splitting a feature
//! map into a domain-robust part and a domain-related part, wrong-label
//! selection, and the separability/discriminability loss that trains the
//! decoupler.

use alloc::vec::Vec;

use rand::Rng;

use crate::error::{config_err, degenerate, Result};
use crate::model::LinearView;
use crate::ops::sigmoid_scalar;
use crate::real::{real, Real};
use crate::rng::uniform_open;
use crate::tape::Var;
use crate::tensor::Tensor;

/// Masks live strictly inside (0, 1); saturated sigmoid outputs are nudged
/// back by this margin.
pub const MASK_MARGIN: f64 = 1e-12;

/// Uniform draws are clamped away from {0, 1} by this much before taking
/// logs, keeping the noise finite.
pub const NOISE_CLAMP: f64 = 1e-12;

/// Logistic noise from a uniform draw: `log(u) - log(1 - u)`.
pub fn logistic_from_uniform<T: Real>(u: f64) -> T {
    let u = u.clamp(NOISE_CLAMP, 1.0 - NOISE_CLAMP);
    real::<T>(libm_ln(u) - libm_ln(1.0 - u))
}

fn libm_ln(x: f64) -> f64 {
    num_traits::Float::ln(x)
}

/// Samples elementwise logistic noise ("Gumbel noise" in the concrete
/// relaxation sense) of the given shape from the client's private stream.
pub fn sample_gumbel<T: Real>(shape: &[usize], rng: &mut impl Rng) -> Tensor<T> {
    Tensor::from_fn(shape.to_vec(), |_| logistic_from_uniform(uniform_open(rng)))
}

/// Soft binary mask from attribution scores.
///
/// The two-exponential Gumbel-concrete form reduces algebraically to a single
/// sigmoid because `log(sigmoid(s)) - log(1 - sigmoid(s)) = s`; we compute
/// `sigmoid((s + g_a - g_b) / sigma)`, which cannot overflow, and clamp the
/// result into the open interval (0, 1).
pub fn gumbel_mask<'t, T: Real>(
    scores: Var<'t, T>,
    sigma: T,
    noise_a: &Tensor<T>,
    noise_b: &Tensor<T>,
) -> Result<Var<'t, T>> {
    if !(sigma > T::zero()) {
        return Err(config_err("sigma", "temperature must be positive"));
    }
    let tape = scores.tape();
    let shift = tape.constant(noise_a.sub(noise_b)?);
    let z = scores.add(shift)?.scale(T::one() / sigma);
    let lo = real::<T>(MASK_MARGIN);
    Ok(z.sigmoid().clamp(lo, T::one() - lo))
}

/// Noise-free mask value for a plain tensor (evaluation paths).
pub fn mask_value<T: Real>(scores: &Tensor<T>, sigma: T) -> Result<Tensor<T>> {
    if !(sigma > T::zero()) {
        return Err(config_err("sigma", "temperature must be positive"));
    }
    let lo = real::<T>(MASK_MARGIN);
    let hi = T::one() - lo;
    Ok(scores.map(|s| sigmoid_scalar(s / sigma).max(lo).min(hi)))
}

/// Splits a feature map by a mask: the robust part `mask * f` and the related
/// part `(1 - mask) * f`, which reconstruct `f` exactly.
pub fn decouple<'t, T: Real>(
    features: Var<'t, T>,
    mask: Var<'t, T>,
) -> Result<(Var<'t, T>, Var<'t, T>)> {
    let robust = mask.mul(features)?;
    let related = mask.one_minus().mul(features)?;
    Ok((robust, related))
}

/// The wrong label with the highest confidence: argmax over classes other
/// than the ground truth, ties broken toward the lowest class index.
pub fn select_wrong_label<T: Real>(logits_row: &[T], truth: usize) -> Result<usize> {
    if logits_row.len() < 2 {
        return Err(degenerate("select_wrong_label", "need at least two classes"));
    }
    let mut best: Option<usize> = None;
    for (c, &v) in logits_row.iter().enumerate() {
        if c == truth {
            continue;
        }
        match best {
            Some(b) if logits_row[b] >= v => {}
            _ => best = Some(c),
        }
    }
    Ok(best.expect("at least one non-truth class"))
}

/// Row-wise wrong-label selection over a `(B, C)` logits tensor.
pub fn select_wrong_labels<T: Real>(logits: &Tensor<T>, truths: &[usize]) -> Result<Vec<usize>> {
    let c = *logits.shape().last().unwrap_or(&0);
    truths
        .iter()
        .enumerate()
        .map(|(r, &y)| select_wrong_label(&logits.data()[r * c..(r + 1) * c], y))
        .collect()
}

/// Decoupler loss over a batch: mean of
/// `cos(l_plus, l_minus) / tau - log p(y | l_plus) - log p(yhat | l_minus)`
/// where both probabilities come from the auxiliary head. The exp/log pair
/// around the separability term cancels, so the cosine is divided by `tau`
/// directly.
pub fn loss_dfd<'t, T: Real>(
    l_plus: Var<'t, T>,
    l_minus: Var<'t, T>,
    truths: &[usize],
    wrong: &[usize],
    aux: &LinearView<'t, T>,
    tau: T,
) -> Result<Var<'t, T>> {
    if !(tau > T::zero()) {
        return Err(config_err("tau", "temperature must be positive"));
    }
    let separability = l_plus.cosine_rows(l_minus)?.scale(T::one() / tau);
    let log_p_plus = aux.forward(l_plus)?.log_softmax().gather_classes(truths)?;
    let log_p_minus = aux.forward(l_minus)?.log_softmax().gather_classes(wrong)?;
    separability.sub(log_p_plus)?.sub(log_p_minus)?.mean_all()
}

/// Reference evaluation of the raw two-exponential mask formula, shared by
/// the equivalence tests. Computes
/// `e^{(log eps(s) + g_a)/sigma} / (e^{(log eps(s) + g_a)/sigma} + e^{(log(1 - eps(s)) + g_b)/sigma})`
/// with the usual max-shift so neither exponential under- or overflows, and
/// `1 - eps(s)` evaluated as `eps(-s)`.
pub fn two_exponential_mask_reference<T: Real>(
    scores: &Tensor<T>,
    sigma: T,
    noise_a: &Tensor<T>,
    noise_b: &Tensor<T>,
) -> Result<Tensor<T>> {
    if !(sigma > T::zero()) {
        return Err(config_err("sigma", "temperature must be positive"));
    }
    let mut out = Vec::with_capacity(scores.len());
    for ((&s, &ga), &gb) in scores.iter().zip(noise_a.iter()).zip(noise_b.iter()) {
        let a = (sigmoid_scalar(s).ln() + ga) / sigma;
        let b = (sigmoid_scalar(-s).ln() + gb) / sigma;
        let m = if a > b { a } else { b };
        let ea = (a - m).exp();
        let eb = (b - m).exp();
        out.push(ea / (ea + eb));
    }
    Ok(Tensor::from_raw(scores.shape().to_vec(), out))
}
