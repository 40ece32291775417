//! Federated protocol pieces: client state, local updating, domain
//! discrepancy, aggregation weights (domain-aware and vanilla), and the
//! weighted parameter aggregation itself. The round driver that runs clients
//! in parallel lives in the companion crate.

use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::data::SampleSet;
use crate::error::{config_err, contract, shape_err, Error, Result};
use crate::model::{ModelBundle, Phase, SharedParams};
use crate::optim::Sgd;
use crate::real::{real, Real};
use crate::rng::{stream, stream_rng};
use crate::tensor::pairwise_sum_scalars;
use crate::training::{batch_loss, lift_bundle, LossHyper, PathSwitches};
use crate::{dfd, ops};

/// One participant: its domain, its local data, its model (shared part
/// replaced by the broadcast each round, private part persistent), and the
/// root seed its streams derive from.
#[derive(Clone, Debug)]
pub struct ClientState<T: Real> {
    pub id: usize,
    pub domain: usize,
    pub dataset: SampleSet<T>,
    pub bundle: ModelBundle<T>,
    pub seed: u64,
}

impl<T: Real> ClientState<T> {
    pub fn sample_count(&self) -> usize {
        self.dataset.len()
    }
}

/// Server-side state between rounds.
#[derive(Clone, Debug)]
pub struct ServerState<T: Real> {
    pub global: SharedParams<T>,
    pub round: usize,
    pub total_samples: usize,
    pub domain_count: usize,
    /// Aggregation weights of the most recent round, full client vector
    /// (zero for clients that did not participate).
    pub last_weights: Vec<T>,
}

/// The two distribution vectors behind the discrepancy measure: the uniform
/// global reference (every entry `1/Q`) and the client's local vector (every
/// entry `n_k / N`), both of length `classes`.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainDistributions<T> {
    pub global: Vec<T>,
    pub local: Vec<T>,
}

impl<T: Real> DomainDistributions<T> {
    pub fn new(n_k: usize, n_total: usize, classes: usize, domains: usize) -> Self {
        let g = T::one() / real::<T>(domains as f64);
        let b = real::<T>(n_k as f64) / real::<T>(n_total as f64);
        Self { global: alloc::vec![g; classes], local: alloc::vec![b; classes] }
    }

    /// `sqrt(1/2 * sum_c (local_c - global_c)^2)`.
    pub fn discrepancy(&self) -> T {
        let mut acc = T::zero();
        for (&b, &g) in self.local.iter().zip(&self.global) {
            let d = b - g;
            acc = acc + d * d;
        }
        (acc / real::<T>(2.0)).sqrt()
    }
}

/// Domain discrepancy of a client from the uniform reference.
pub fn domain_discrepancy<T: Real>(
    n_k: usize,
    n_total: usize,
    classes: usize,
    domains: usize,
) -> T {
    DomainDistributions::new(n_k, n_total, classes, domains).discrepancy()
}

/// Domain-aware aggregation weights: normalized `sigmoid(alpha * n_k/N -
/// beta * d_k)`. Positive by construction and summing to one.
pub fn aggregation_weights<T: Real>(
    sizes: &[usize],
    discrepancies: &[T],
    alpha: T,
    beta: T,
) -> Result<Vec<T>> {
    if sizes.is_empty() || sizes.len() != discrepancies.len() {
        return Err(contract("aggregation_weights", "need one discrepancy per client"));
    }
    if sizes.iter().any(|&n| n == 0) {
        return Err(contract("aggregation_weights", "client sizes must be positive"));
    }
    let total = real::<T>(sizes.iter().sum::<usize>() as f64);
    let raw: Vec<T> = sizes
        .iter()
        .zip(discrepancies)
        .map(|(&n, &d)| ops::sigmoid_scalar(alpha * real::<T>(n as f64) / total - beta * d))
        .collect();
    let denom = pairwise_sum_scalars(&raw);
    Ok(raw.into_iter().map(|r| r / denom).collect())
}

/// Vanilla size-proportional weights `n_k / N`.
pub fn fedavg_weights<T: Real>(sizes: &[usize]) -> Vec<T> {
    let total = real::<T>(sizes.iter().sum::<usize>() as f64);
    sizes.iter().map(|&n| real::<T>(n as f64) / total).collect()
}

/// Parameter-wise convex combination of client shared parameters, reduced
/// pairwise in client order (deterministic and exact for uniform power-of-two
/// cohorts).
pub fn aggregate<T: Real>(weights: &[T], params: &[&SharedParams<T>]) -> Result<SharedParams<T>> {
    if params.is_empty() || weights.len() != params.len() {
        return Err(contract("aggregate", "need one weight per parameter set"));
    }
    let names: Vec<(alloc::string::String, crate::tensor::Tensor<T>)> = params[0].named_tensors();
    for p in params.iter().skip(1) {
        let other = p.named_tensors();
        if other.len() != names.len() {
            return Err(shape_err("aggregate", "clients disagree on parameter count"));
        }
        for ((na, ta), (nb, tb)) in names.iter().zip(&other) {
            if na != nb || ta.shape() != tb.shape() {
                return Err(shape_err("aggregate", alloc::format!("{na} vs {nb}")));
            }
        }
    }
    let mut scaled: Vec<SharedParams<T>> =
        weights.iter().zip(params).map(|(&w, p)| p.scaled(w)).collect();
    // pairwise tree over the flattened tensors, preserving structure
    while scaled.len() > 1 {
        let mut next = Vec::with_capacity(scaled.len().div_ceil(2));
        let mut it = scaled.drain(..);
        while let Some(a) = it.next() {
            match it.next() {
                Some(b) => next.push(a.add(&b)?),
                None => next.push(a),
            }
        }
        drop(it);
        scaled = next;
    }
    Ok(scaled.pop().expect("nonempty"))
}

/// Training hyper-parameters for one local update.
#[derive(Clone, Debug)]
pub struct LocalHyper<T> {
    pub epochs: usize,
    /// Learning rate; zero is the documented "frozen" degenerate case where
    /// the update returns the broadcast unchanged.
    pub lr: T,
    pub momentum: T,
    pub weight_decay: T,
    pub batch_size: usize,
    pub loss: LossHyper<T>,
    pub switches: PathSwitches,
}

/// One client's local update: replace the shared part with the broadcast,
/// train for `epochs` epochs, and return only the shared part. Private
/// modules stay on the client.
pub fn local_update<T: Real>(
    global: &SharedParams<T>,
    client: &mut ClientState<T>,
    hyper: &LocalHyper<T>,
    round: usize,
) -> Result<SharedParams<T>> {
    if client.dataset.is_empty() {
        return Err(Error::EmptyClientDataset { client: client.id });
    }
    hyper.switches.validate()?;
    if hyper.batch_size == 0 {
        return Err(config_err("batch_size", "must be positive"));
    }
    client.bundle.shared = global.clone();
    if hyper.epochs == 0 || hyper.lr == T::zero() {
        return Ok(client.bundle.shared.clone());
    }

    let mut optimizer = Sgd::new(hyper.lr, hyper.momentum, hyper.weight_decay)?;
    let mut shuffle_rng = stream_rng(client.seed, stream::SHUFFLE, client.id as u64, round as u64);
    let mut noise_rng = stream_rng(client.seed, stream::MASK_NOISE, client.id as u64, round as u64);

    let n = client.dataset.len();
    let mut order: Vec<usize> = (0..n).collect();
    for _ in 0..hyper.epochs {
        order.shuffle(&mut shuffle_rng);
        for chunk in order.chunks(hyper.batch_size) {
            let (images, labels) = client.dataset.batch(chunk);
            let tape = crate::tape::Tape::new();
            let view = lift_bundle(&tape, &client.bundle, hyper.switches);

            let noise = if hyper.switches.dfd {
                let shape = feature_shape(&client.bundle, chunk.len());
                Some((
                    dfd::sample_gumbel::<T>(&shape, &mut noise_rng),
                    dfd::sample_gumbel::<T>(&shape, &mut noise_rng),
                ))
            } else {
                None
            };
            let outcome = batch_loss(
                &tape,
                &view,
                &images,
                &labels,
                &hyper.loss,
                noise.as_ref().map(|(a, b)| (a, b)),
                Phase::Train,
            )?;

            let grads = tape.backward(outcome.total)?;
            let vars = view.trainable_vars();
            let grad_tensors: Vec<crate::tensor::Tensor<T>> =
                vars.iter().map(|v| grads.wrt_or_zeros(*v)).collect();

            let ModelBundle { shared, private, .. } = &mut client.bundle;
            let mut tensors = shared.trainables_mut();
            tensors.extend(private.active_trainables_mut(hyper.switches.dfd, hyper.switches.dfc));
            optimizer.step(&mut tensors, &grad_tensors)?;

            client.bundle.shared.absorb_bn_stats(&outcome.shared_stats);
            if hyper.switches.dfd {
                client.bundle.private.decoupler_mut().absorb_bn_stats(&outcome.decoupler_stats);
            }
            if hyper.switches.dfc {
                client.bundle.private.corrector_mut().absorb_bn_stats(&outcome.corrector_stats);
            }
        }
    }
    Ok(client.bundle.shared.clone())
}

fn feature_shape<T: Real>(bundle: &ModelBundle<T>, batch: usize) -> Vec<usize> {
    let cfg = &bundle.config;
    alloc::vec![batch, cfg.feature_channels(), cfg.feature_size(), cfg.feature_size()]
}

/// Picks the participating cohort for a round: all clients at fraction 1.0,
/// otherwise `ceil(fraction * K)` distinct clients sampled from the round's
/// selection stream. Returned indices are sorted.
pub fn select_clients(
    total: usize,
    fraction: f64,
    seed: u64,
    round: usize,
) -> Result<Vec<usize>> {
    if total == 0 {
        return Err(contract("select_clients", "no clients registered"));
    }
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(config_err("participation", "fraction must lie in (0, 1]"));
    }
    if fraction >= 1.0 {
        return Ok((0..total).collect());
    }
    let count = (num_traits::Float::ceil(fraction * total as f64) as usize).clamp(1, total);
    let mut rng = stream_rng(seed, stream::SELECT, round as u64, 0);
    let mut pool: Vec<usize> = (0..total).collect();
    let mut picked = Vec::with_capacity(count);
    for _ in 0..count {
        let at = rng.gen_range(0..pool.len());
        picked.push(pool.swap_remove(at));
    }
    picked.sort_unstable();
    Ok(picked)
}
