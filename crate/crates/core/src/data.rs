//! Synthetic multi-domain image data.
//!
//! Every client shares the same (uniform) label distribution while its pixels
//! come from a domain-specific rendering of the class prototypes: identical
//! class geometry, different low-level statistics. Generation is pure given
//! the derived per-sample streams, so datasets are reproducible and can be
//! built in any order.

use alloc::vec;
use alloc::vec::Vec;

use num_traits::Float;
use rand::Rng;

use crate::error::{config_err, Result};
use crate::real::Real;
use crate::rng::{standard_normal, stream, stream_rng};
use crate::tensor::Tensor;

/// A labeled set of stacked images `(n, channels, size, size)` drawn from a
/// single domain.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleSet<T> {
    pub images: Tensor<T>,
    pub labels: Vec<usize>,
    pub domain: usize,
}

impl<T: Real> SampleSet<T> {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Gathers the rows at `indices` into a contiguous batch.
    pub fn batch(&self, indices: &[usize]) -> (Tensor<T>, Vec<usize>) {
        let shape = self.images.shape();
        let row = shape[1] * shape[2] * shape[3];
        let mut data = Vec::with_capacity(indices.len() * row);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(&self.images.data()[i * row..(i + 1) * row]);
            labels.push(self.labels[i]);
        }
        let batch = Tensor::from_raw(vec![indices.len(), shape[1], shape[2], shape[3]], data);
        (batch, labels)
    }

    pub fn cast<U: Real>(&self) -> SampleSet<U> {
        SampleSet { images: self.images.cast(), labels: self.labels.clone(), domain: self.domain }
    }
}

/// Domain-specific input corruption. Each variant changes the conditional
/// pixel distribution without destroying the class geometry.
#[derive(Clone, Debug, PartialEq)]
pub enum DomainTransform {
    Identity,
    /// Additive square-wave texture along one axis.
    Stripes { period: usize, amplitude: f64, vertical: bool },
    /// Intensity inversion.
    Invert,
    /// Repeated 3x3 binomial blur.
    Blur { passes: usize },
    /// Cyclic channel rotation by `offset`.
    ChannelShift { offset: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub struct DomainSpec {
    pub id: usize,
    pub transform: DomainTransform,
    /// Additive Gaussian pixel noise level.
    pub noise: f64,
}

/// Per-sample geometric jitter applied before the domain transform.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct JitterSpec {
    /// Maximum toroidal shift in pixels, per axis.
    pub max_shift: usize,
    pub scale_low: f64,
    pub scale_high: f64,
}

impl JitterSpec {
    pub fn desk() -> Self {
        Self { max_shift: 2, scale_low: 0.9, scale_high: 1.1 }
    }

    /// No jitter: samples equal their transformed prototype.
    pub fn none() -> Self {
        Self { max_shift: 0, scale_low: 1.0, scale_high: 1.0 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub clients: usize,
    pub domains: usize,
    pub classes: usize,
    pub train_per_client: usize,
    pub test_per_domain: usize,
    pub image_size: usize,
    pub channels: usize,
    pub noise: f64,
    pub jitter: JitterSpec,
}

impl DataConfig {
    pub fn desk() -> Self {
        Self {
            clients: 8,
            domains: 4,
            classes: 4,
            train_per_client: 200,
            test_per_domain: 200,
            image_size: 16,
            channels: 3,
            noise: 0.02,
            jitter: JitterSpec::desk(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.clients < self.domains {
            return Err(config_err("clients", "every domain needs at least one client"));
        }
        if self.domains == 0 || self.domains > MAX_DOMAINS {
            return Err(config_err("domains", alloc::format!("supported range is 1..={MAX_DOMAINS}")));
        }
        if self.classes < 2 {
            return Err(config_err("classes", "need at least two classes"));
        }
        if self.train_per_client == 0 || self.test_per_domain == 0 {
            return Err(config_err("train_per_client", "sample counts must be positive"));
        }
        if self.image_size < 8 || self.channels != 3 {
            return Err(config_err("image_size", "images are 3-channel, at least 8x8"));
        }
        if self.noise < 0.0 {
            return Err(config_err("noise", "noise level must be nonnegative"));
        }
        Ok(())
    }
}

pub const MAX_DOMAINS: usize = 6;

/// The fixed domain roster: distinct low-level corruptions reminiscent of
/// photo / texture / negative / recolored / soft-focus / lined styles.
pub fn default_domains(count: usize, noise: f64) -> Result<Vec<DomainSpec>> {
    if count == 0 || count > MAX_DOMAINS {
        return Err(config_err("domains", alloc::format!("supported range is 1..={MAX_DOMAINS}")));
    }
    let roster = [
        DomainTransform::Identity,
        DomainTransform::Stripes { period: 2, amplitude: 0.35, vertical: false },
        DomainTransform::Invert,
        DomainTransform::ChannelShift { offset: 1 },
        DomainTransform::Blur { passes: 2 },
        DomainTransform::Stripes { period: 3, amplitude: 0.3, vertical: true },
    ];
    Ok(roster
        .into_iter()
        .take(count)
        .enumerate()
        .map(|(id, transform)| DomainSpec { id, transform, noise })
        .collect())
}

/// Which domain a client belongs to: a fixed balanced assignment.
pub fn client_domain(client: usize, domains: usize) -> usize {
    client % domains
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClientAssignment {
    pub client: usize,
    pub domain: usize,
    pub train_count: usize,
}

/// The fixed plan mapping clients to domains plus the domain roster itself.
#[derive(Clone, Debug, PartialEq)]
pub struct PartitionPlan {
    pub assignments: Vec<ClientAssignment>,
    pub domains: Vec<DomainSpec>,
    pub classes: usize,
}

/// Deterministic per-class base image, identical across domains.
///
/// Classes differ in the orientation of a thick bar through the center, the
/// position of a bright blob, and a cyclic channel emphasis, so both shape
/// and color carry label information.
pub fn class_prototype(class: usize, classes: usize, size: usize) -> Tensor<f64> {
    let s = size as f64;
    let center = (s - 1.0) / 2.0;
    let angle = core::f64::consts::PI * (class as f64 + 0.5) / classes as f64;
    let (cos_a, sin_a) = (Float::cos(angle), Float::sin(angle));
    let blob_angle = 2.0 * core::f64::consts::PI * class as f64 / classes as f64;
    let blob_x = center + 0.3 * s * Float::cos(blob_angle);
    let blob_y = center + 0.3 * s * Float::sin(blob_angle);
    let bar_width = s / 8.0;
    let blob_sigma = s / 8.0;
    let weights = [1.0, 0.72, 0.45];

    Tensor::from_fn(vec![3, size, size], |i| {
        let ch = i / (size * size);
        let rest = i % (size * size);
        let y = (rest / size) as f64;
        let x = (rest % size) as f64;
        let (dx, dy) = (x - center, y - center);
        let bar_dist = Float::abs(dx * cos_a + dy * sin_a);
        let bar = if bar_dist < bar_width { 0.7 } else { 0.0 };
        let br2 = (x - blob_x) * (x - blob_x) + (y - blob_y) * (y - blob_y);
        let blob = 0.55 * Float::exp(-br2 / (2.0 * blob_sigma * blob_sigma));
        let intensity = 0.12 + bar + blob;
        let w = weights[(ch + class) % 3];
        (intensity * w).clamp(0.0, 1.0)
    })
}

fn apply_transform(image: &mut [f64], size: usize, transform: &DomainTransform) {
    match transform {
        DomainTransform::Identity => {}
        DomainTransform::Stripes { period, amplitude, vertical } => {
            let period = (*period).max(1);
            for ch in 0..3 {
                for y in 0..size {
                    for x in 0..size {
                        let coord = if *vertical { x } else { y };
                        let sign = if (coord / period) % 2 == 0 { 1.0 } else { -1.0 };
                        let idx = (ch * size + y) * size + x;
                        image[idx] = (image[idx] + sign * amplitude / 2.0).clamp(0.0, 1.0);
                    }
                }
            }
        }
        DomainTransform::Invert => {
            for v in image.iter_mut() {
                *v = 1.0 - *v;
            }
        }
        DomainTransform::Blur { passes } => {
            // separable binomial [1 2 1] blur with replicated borders
            let mut buf = vec![0.0f64; size * size];
            for _ in 0..*passes {
                for ch in 0..3 {
                    let plane = &mut image[ch * size * size..(ch + 1) * size * size];
                    for y in 0..size {
                        for x in 0..size {
                            let xm = x.saturating_sub(1);
                            let xp = (x + 1).min(size - 1);
                            buf[y * size + x] = 0.25 * plane[y * size + xm]
                                + 0.5 * plane[y * size + x]
                                + 0.25 * plane[y * size + xp];
                        }
                    }
                    for y in 0..size {
                        let ym = y.saturating_sub(1);
                        let yp = (y + 1).min(size - 1);
                        for x in 0..size {
                            plane[y * size + x] = 0.25 * buf[ym * size + x]
                                + 0.5 * buf[y * size + x]
                                + 0.25 * buf[yp * size + x];
                        }
                    }
                }
            }
        }
        DomainTransform::ChannelShift { offset } => {
            let plane = size * size;
            let orig = image.to_vec();
            for ch in 0..3 {
                let src = (ch + offset) % 3;
                image[ch * plane..(ch + 1) * plane]
                    .copy_from_slice(&orig[src * plane..(src + 1) * plane]);
            }
        }
    }
}

/// One labeled sample: prototype, per-sample jitter, domain transform,
/// additive noise, clamp to [0, 1].
pub fn generate_sample(
    class: usize,
    classes: usize,
    size: usize,
    spec: &DomainSpec,
    jitter: &JitterSpec,
    rng: &mut impl Rng,
) -> Tensor<f64> {
    let proto = class_prototype(class, classes, size);
    let plane = size * size;
    let mut image = vec![0.0f64; 3 * plane];

    // toroidal shift + intensity scale
    let (shift_x, shift_y) = if jitter.max_shift > 0 {
        let span = 2 * jitter.max_shift + 1;
        (
            rng.gen_range(0..span) as isize - jitter.max_shift as isize,
            rng.gen_range(0..span) as isize - jitter.max_shift as isize,
        )
    } else {
        (0, 0)
    };
    let scale = if jitter.scale_low < jitter.scale_high {
        rng.gen_range(jitter.scale_low..jitter.scale_high)
    } else {
        jitter.scale_low
    };
    for ch in 0..3 {
        for y in 0..size {
            for x in 0..size {
                let sy = (y as isize - shift_y).rem_euclid(size as isize) as usize;
                let sx = (x as isize - shift_x).rem_euclid(size as isize) as usize;
                image[(ch * size + y) * size + x] = proto.data()[(ch * size + sy) * size + sx] * scale;
            }
        }
    }

    apply_transform(&mut image, size, &spec.transform);

    if spec.noise > 0.0 {
        for v in image.iter_mut() {
            *v += spec.noise * standard_normal(rng);
        }
    }
    for v in image.iter_mut() {
        *v = v.clamp(0.0, 1.0);
    }
    Tensor::from_raw(vec![3, size, size], image)
}

fn materialize_set(
    count: usize,
    classes: usize,
    size: usize,
    spec: &DomainSpec,
    jitter: &JitterSpec,
    seed: u64,
    tag: u64,
    owner: u64,
) -> SampleSet<f64> {
    let plane = 3 * size * size;
    let mut data = Vec::with_capacity(count * plane);
    let mut labels = Vec::with_capacity(count);
    for i in 0..count {
        let class = i % classes;
        let mut rng = stream_rng(seed, tag, owner, i as u64);
        let img = generate_sample(class, classes, size, spec, jitter, &mut rng);
        data.extend_from_slice(img.data());
        labels.push(class);
    }
    SampleSet {
        images: Tensor::from_raw(vec![count, 3, size, size], data),
        labels,
        domain: spec.id,
    }
}

/// Builds the full partition: one training set per client (label-uniform by
/// construction) and one held-out test set per domain.
pub fn build_partition(
    cfg: &DataConfig,
    seed: u64,
) -> Result<(PartitionPlan, Vec<SampleSet<f64>>, Vec<SampleSet<f64>>)> {
    cfg.validate()?;
    let domains = default_domains(cfg.domains, cfg.noise)?;
    let assignments: Vec<ClientAssignment> = (0..cfg.clients)
        .map(|client| ClientAssignment {
            client,
            domain: client_domain(client, cfg.domains),
            train_count: cfg.train_per_client,
        })
        .collect();

    let client_sets: Vec<SampleSet<f64>> = assignments
        .iter()
        .map(|a| {
            materialize_set(
                a.train_count,
                cfg.classes,
                cfg.image_size,
                &domains[a.domain],
                &cfg.jitter,
                seed,
                stream::TRAIN_SAMPLE,
                a.client as u64,
            )
        })
        .collect();

    let test_sets: Vec<SampleSet<f64>> = domains
        .iter()
        .map(|spec| {
            materialize_set(
                cfg.test_per_domain,
                cfg.classes,
                cfg.image_size,
                spec,
                &cfg.jitter,
                seed,
                stream::TEST_SAMPLE,
                spec.id as u64,
            )
        })
        .collect();

    let plan = PartitionPlan { assignments, domains, classes: cfg.classes };
    Ok((plan, client_sets, test_sets))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn prototypes_are_deterministic_and_in_range() {
        let a = class_prototype(1, 4, 16);
        let b = class_prototype(1, 4, 16);
        assert_eq!(a, b);
        assert!(a.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn prototypes_are_pairwise_distinct() {
        // regression floor measured once over the default class set
        let protos: Vec<Tensor<f64>> = (0..4).map(|c| class_prototype(c, 4, 16)).collect();
        for i in 0..4 {
            for j in (i + 1)..4 {
                let l2: f64 = protos[i]
                    .iter()
                    .zip(protos[j].iter())
                    .map(|(&a, &b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt();
                assert!(l2 > 0.1, "classes {i},{j} too close: {l2}");
            }
        }
    }

    #[test]
    fn identity_domain_without_jitter_or_noise_reproduces_prototype() {
        let spec = DomainSpec { id: 0, transform: DomainTransform::Identity, noise: 0.0 };
        let mut rng = stream_rng(0, 1, 0, 0);
        let sample = generate_sample(2, 4, 16, &spec, &JitterSpec::none(), &mut rng);
        assert_eq!(sample, class_prototype(2, 4, 16));
    }

    #[test]
    fn generation_is_bit_reproducible() {
        let spec = DomainSpec {
            id: 1,
            transform: DomainTransform::Stripes { period: 2, amplitude: 0.35, vertical: false },
            noise: 0.02,
        };
        let mut r1 = stream_rng(7, stream::TRAIN_SAMPLE, 3, 11);
        let mut r2 = stream_rng(7, stream::TRAIN_SAMPLE, 3, 11);
        let a = generate_sample(1, 4, 16, &spec, &JitterSpec::desk(), &mut r1);
        let b = generate_sample(1, 4, 16, &spec, &JitterSpec::desk(), &mut r2);
        assert_eq!(a, b);
    }

    #[test]
    fn per_domain_class_means_differ() {
        // regression floor measured once on seed 0
        let cfg = DataConfig { train_per_client: 40, test_per_domain: 40, ..DataConfig::desk() };
        let (_, _, tests) = build_partition(&cfg, 0).unwrap();
        let class = 0;
        let mut means: Vec<Vec<f64>> = Vec::new();
        for set in &tests {
            let rows: Vec<usize> =
                (0..set.len()).filter(|&i| set.labels[i] == class).collect();
            let pixels = 3 * 16 * 16;
            let mut mean = vec![0.0f64; pixels];
            for &r in &rows {
                for p in 0..pixels {
                    mean[p] += set.images.data()[r * pixels + p];
                }
            }
            for m in mean.iter_mut() {
                *m /= rows.len() as f64;
            }
            means.push(mean);
        }
        for i in 0..means.len() {
            for j in (i + 1)..means.len() {
                let l2: f64 = means[i]
                    .iter()
                    .zip(&means[j])
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt();
                assert!(l2 > 0.05, "domains {i},{j} mean gap {l2}");
            }
        }
    }

    #[test]
    fn partition_is_balanced_and_label_uniform() {
        let cfg = DataConfig::desk();
        let (plan, clients, tests) = build_partition(&cfg, 0).unwrap();
        assert_eq!(plan.assignments.len(), 8);
        for q in 0..4 {
            let count = plan.assignments.iter().filter(|a| a.domain == q).count();
            assert_eq!(count, 2, "domain {q}");
        }
        let total: usize = clients.iter().map(|c| c.len()).sum();
        assert_eq!(total, 8 * 200);
        for c in &clients {
            let mut hist = [0usize; 4];
            for &y in &c.labels {
                hist[y] += 1;
            }
            let (min, max) = (hist.iter().min().unwrap(), hist.iter().max().unwrap());
            assert!(max - min <= 1, "histogram {hist:?}");
        }
        assert_eq!(tests.len(), 4);
        for t in &tests {
            assert_eq!(t.len(), 200);
        }
    }

    #[test]
    fn too_few_clients_is_a_config_error() {
        let cfg = DataConfig { clients: 3, ..DataConfig::desk() };
        assert!(matches!(build_partition(&cfg, 0), Err(crate::Error::Config { .. })));
    }

    #[test]
    fn train_and_test_sets_are_disjoint() {
        let cfg = DataConfig { train_per_client: 30, test_per_domain: 30, ..DataConfig::desk() };
        let (_, clients, tests) = build_partition(&cfg, 0).unwrap();
        let pixels = 3 * 16 * 16;
        for c in &clients {
            for t in &tests {
                for i in 0..c.len() {
                    let ci = &c.images.data()[i * pixels..(i + 1) * pixels];
                    for j in 0..t.len() {
                        let tj = &t.images.data()[j * pixels..(j + 1) * pixels];
                        assert_ne!(ci, tj, "client sample {i} equals test sample {j}");
                    }
                }
            }
        }
    }

    #[test]
    fn batch_gathers_requested_rows() {
        let cfg = DataConfig { train_per_client: 10, test_per_domain: 10, ..DataConfig::desk() };
        let (_, clients, _) = build_partition(&cfg, 0).unwrap();
        let (batch, labels) = clients[0].batch(&[3, 7]);
        assert_eq!(batch.shape(), &[2, 3, 16, 16]);
        assert_eq!(labels, vec![clients[0].labels[3], clients[0].labels[7]]);
        let pixels = 3 * 16 * 16;
        assert_eq!(
            &batch.data()[..pixels],
            &clients[0].images.data()[3 * pixels..4 * pixels]
        );
    }
}
