//! The local model: a small conv-BN-ReLU backbone with global average
//! pooling and an affine classifier (shared, aggregated across clients), plus
//! three private modules that never leave a client — the decoupler, the
//! corrector, and an auxiliary classification head.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::sync::atomic::{AtomicU64, Ordering};

use num_traits::Float;
use rand::Rng;

use crate::batchnorm::{update_running, BatchStats};
use crate::error::{config_err, shape_err, Result};
use crate::real::{real, Real};
use crate::rng::standard_normal;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Forward-pass mode for batch normalization.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Train,
    Eval,
}

/// Architecture knobs. The embedding dimension always equals the final
/// channel count because the flatten stage is a global average pool.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub in_channels: usize,
    pub image_size: usize,
    /// Output channels of each backbone block.
    pub channels: Vec<usize>,
    /// Whether each block ends in a 2x average pool.
    pub pools: Vec<bool>,
    pub kernel: usize,
    pub classes: usize,
    pub bn_eps: f64,
    pub bn_momentum: f64,
}

impl ModelConfig {
    /// Desk-scale default: 3x16x16 inputs, three blocks (16, 32, 32), pooling
    /// after the first two, so feature maps end at 32x4x4 and d = 32.
    pub fn desk(classes: usize) -> Self {
        Self {
            in_channels: 3,
            image_size: 16,
            channels: alloc::vec![16, 32, 32],
            pools: alloc::vec![true, true, false],
            kernel: 3,
            classes,
            bn_eps: 1e-5,
            bn_momentum: 0.1,
        }
    }

    /// Tiny configuration for gradient checks: 3x8x8 inputs down to 4x2x2.
    pub fn toy(classes: usize) -> Self {
        Self {
            in_channels: 3,
            image_size: 8,
            channels: alloc::vec![4, 4, 4],
            pools: alloc::vec![true, true, false],
            kernel: 3,
            classes,
            bn_eps: 1e-5,
            bn_momentum: 0.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() || self.channels.len() != self.pools.len() {
            return Err(config_err("channels", "need one pool flag per block"));
        }
        if self.kernel == 0 || self.kernel % 2 == 0 {
            return Err(config_err("kernel", "kernel must be odd and positive"));
        }
        if self.classes < 2 {
            return Err(config_err("classes", "need at least two classes"));
        }
        let downs = self.pools.iter().filter(|&&p| p).count();
        if self.image_size % (1 << downs) != 0 || self.image_size >> downs == 0 {
            return Err(config_err("image_size", "not divisible by the pooling factor"));
        }
        Ok(())
    }

    /// Channel count of the final feature map (= embedding dimension d).
    pub fn feature_channels(&self) -> usize {
        *self.channels.last().expect("validated")
    }

    /// Spatial extent of the final feature map.
    pub fn feature_size(&self) -> usize {
        self.image_size >> self.pools.iter().filter(|&&p| p).count()
    }

    pub fn embed_dim(&self) -> usize {
        self.feature_channels()
    }
}

// ---------------------------------------------------------------------------
// Layers
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    pub stride: usize,
    pub padding: usize,
}

impl<T: Real> Conv2d<T> {
    /// Kaiming fan-in initialization, zero bias.
    fn init(cin: usize, cout: usize, kernel: usize, rng: &mut impl Rng) -> Self {
        let fan_in = (cin * kernel * kernel) as f64;
        let std = Float::sqrt(2.0 / fan_in);
        let weight = Tensor::from_fn(alloc::vec![cout, cin, kernel, kernel], |_| {
            real::<T>(standard_normal(rng) * std)
        });
        Self { weight, bias: Tensor::zeros(alloc::vec![cout]), stride: 1, padding: kernel / 2 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm<T> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
    pub eps: f64,
    pub momentum: f64,
}

impl<T: Real> BatchNorm<T> {
    fn init(channels: usize, eps: f64, momentum: f64) -> Self {
        Self {
            gamma: Tensor::full(alloc::vec![channels], T::one()),
            beta: Tensor::zeros(alloc::vec![channels]),
            running_mean: Tensor::zeros(alloc::vec![channels]),
            running_var: Tensor::full(alloc::vec![channels], T::one()),
            eps,
            momentum,
        }
    }

    fn absorb(&mut self, stats: &BatchStats<T>) {
        let m = real::<T>(self.momentum);
        update_running(&mut self.running_mean, &stats.mean, m);
        update_running(&mut self.running_var, &stats.var, m);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Linear<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Real> Linear<T> {
    fn init(din: usize, dout: usize, rng: &mut impl Rng) -> Self {
        let std = Float::sqrt(2.0 / din as f64);
        Self {
            weight: Tensor::from_fn(alloc::vec![dout, din], |_| real::<T>(standard_normal(rng) * std)),
            bias: Tensor::zeros(alloc::vec![dout]),
        }
    }
}

/// conv -> BN -> (ReLU) -> (2x avg pool)
#[derive(Clone, Debug, PartialEq)]
pub struct ConvBlock<T> {
    pub conv: Conv2d<T>,
    pub bn: BatchNorm<T>,
    pub relu: bool,
    pub pool: bool,
}

impl<T: Real> ConvBlock<T> {
    fn init(
        cin: usize,
        cout: usize,
        kernel: usize,
        relu: bool,
        pool: bool,
        eps: f64,
        momentum: f64,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            conv: Conv2d::init(cin, cout, kernel, rng),
            bn: BatchNorm::init(cout, eps, momentum),
            relu,
            pool,
        }
    }
}

// ---------------------------------------------------------------------------
// Shared parameters (aggregated by the server)
// ---------------------------------------------------------------------------

/// Backbone + classifier: the part of the model that participates in
/// aggregation, including the BN running statistics the global model needs
/// for inference.
#[derive(Clone, Debug, PartialEq)]
pub struct SharedParams<T> {
    pub backbone: Vec<ConvBlock<T>>,
    pub classifier: Linear<T>,
}

impl<T: Real> SharedParams<T> {
    pub fn init(cfg: &ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let mut backbone = Vec::with_capacity(cfg.channels.len());
        let mut cin = cfg.in_channels;
        for (i, &cout) in cfg.channels.iter().enumerate() {
            backbone.push(ConvBlock::init(
                cin,
                cout,
                cfg.kernel,
                true,
                cfg.pools[i],
                cfg.bn_eps,
                cfg.bn_momentum,
                rng,
            ));
            cin = cout;
        }
        let classifier = Linear::init(cfg.embed_dim(), cfg.classes, rng);
        Ok(Self { backbone, classifier })
    }

    pub fn lift<'t>(&self, tape: &'t Tape<T>) -> SharedView<'t, T> {
        SharedView {
            backbone: self.backbone.iter().map(|b| BlockView::lift(b, tape)).collect(),
            classifier: LinearView::lift(&self.classifier, tape),
        }
    }

    /// Trainable tensors in canonical order (the same order as
    /// [`SharedView::trainable_vars`]).
    pub fn trainables_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = Vec::new();
        for b in &mut self.backbone {
            out.push(&mut b.conv.weight);
            out.push(&mut b.conv.bias);
            out.push(&mut b.bn.gamma);
            out.push(&mut b.bn.beta);
        }
        out.push(&mut self.classifier.weight);
        out.push(&mut self.classifier.bias);
        out
    }

    /// Feeds one training step's batch statistics back into the BN layers,
    /// in backbone order.
    pub fn absorb_bn_stats(&mut self, stats: &[BatchStats<T>]) {
        debug_assert_eq!(stats.len(), self.backbone.len());
        for (block, s) in self.backbone.iter_mut().zip(stats) {
            block.bn.absorb(s);
        }
    }

    /// Every tensor (trainable and buffer) with a stable name, for
    /// aggregation, checkpoints, and broadcast.
    pub fn named_tensors(&self) -> Vec<(String, Tensor<T>)> {
        let mut out = Vec::new();
        for (i, b) in self.backbone.iter().enumerate() {
            out.push((format!("backbone.{i}.conv.weight"), b.conv.weight.clone()));
            out.push((format!("backbone.{i}.conv.bias"), b.conv.bias.clone()));
            out.push((format!("backbone.{i}.bn.gamma"), b.bn.gamma.clone()));
            out.push((format!("backbone.{i}.bn.beta"), b.bn.beta.clone()));
            out.push((format!("backbone.{i}.bn.running_mean"), b.bn.running_mean.clone()));
            out.push((format!("backbone.{i}.bn.running_var"), b.bn.running_var.clone()));
        }
        out.push((String::from("classifier.weight"), self.classifier.weight.clone()));
        out.push((String::from("classifier.bias"), self.classifier.bias.clone()));
        out
    }

    /// Mutable slots in the same order and under the same names as
    /// [`SharedParams::named_tensors`].
    pub fn named_slots_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out: Vec<(String, &mut Tensor<T>)> = Vec::new();
        for (i, b) in self.backbone.iter_mut().enumerate() {
            out.push((format!("backbone.{i}.conv.weight"), &mut b.conv.weight));
            out.push((format!("backbone.{i}.conv.bias"), &mut b.conv.bias));
            out.push((format!("backbone.{i}.bn.gamma"), &mut b.bn.gamma));
            out.push((format!("backbone.{i}.bn.beta"), &mut b.bn.beta));
            out.push((format!("backbone.{i}.bn.running_mean"), &mut b.bn.running_mean));
            out.push((format!("backbone.{i}.bn.running_var"), &mut b.bn.running_var));
        }
        out.push((String::from("classifier.weight"), &mut self.classifier.weight));
        out.push((String::from("classifier.bias"), &mut self.classifier.bias));
        out
    }

    /// Parameter-wise `self * w` (used by aggregation).
    pub fn scaled(&self, w: T) -> Self {
        let mut copy = self.clone();
        for (_, t) in copy.named_slots_mut() {
            *t = t.scale(w);
        }
        copy
    }

    /// Parameter-wise sum; shapes must agree.
    pub fn add(&self, other: &Self) -> Result<Self> {
        let mut copy = self.clone();
        let theirs = other.named_tensors();
        let mine = copy.named_slots_mut();
        if mine.len() != theirs.len() {
            return Err(shape_err("shared_add", "different parameter counts"));
        }
        for ((name_a, slot), (name_b, t)) in mine.into_iter().zip(theirs) {
            if name_a != name_b || slot.shape() != t.shape() {
                return Err(shape_err("shared_add", format!("{name_a} vs {name_b}")));
            }
            *slot = slot.add(&t)?;
        }
        Ok(copy)
    }
}

// ---------------------------------------------------------------------------
// Private parameters (kept on the client)
// ---------------------------------------------------------------------------

/// Two conv-BN layers, channel preserving, ReLU only between them. Serves as
/// both the decoupler (attribution scores) and the corrector (residuals);
/// neither may squash negative outputs, hence no terminal ReLU.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureHead<T> {
    pub block1: ConvBlock<T>,
    pub block2: ConvBlock<T>,
}

impl<T: Real> FeatureHead<T> {
    fn init(channels: usize, kernel: usize, eps: f64, momentum: f64, rng: &mut impl Rng) -> Self {
        Self {
            block1: ConvBlock::init(channels, channels, kernel, true, false, eps, momentum, rng),
            block2: ConvBlock::init(channels, channels, kernel, false, false, eps, momentum, rng),
        }
    }

    pub fn lift<'t>(&self, tape: &'t Tape<T>) -> HeadView<'t, T> {
        HeadView {
            block1: BlockView::lift(&self.block1, tape),
            block2: BlockView::lift(&self.block2, tape),
        }
    }

    pub fn trainables_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = Vec::new();
        for b in [&mut self.block1, &mut self.block2] {
            out.push(&mut b.conv.weight);
            out.push(&mut b.conv.bias);
            out.push(&mut b.bn.gamma);
            out.push(&mut b.bn.beta);
        }
        out
    }

    pub fn absorb_bn_stats(&mut self, stats: &[BatchStats<T>]) {
        debug_assert_eq!(stats.len(), 2);
        self.block1.bn.absorb(&stats[0]);
        self.block2.bn.absorb(&stats[1]);
    }

    fn named_tensors(&self, prefix: &str) -> Vec<(String, Tensor<T>)> {
        let mut out = Vec::new();
        for (tag, b) in [("block1", &self.block1), ("block2", &self.block2)] {
            out.push((format!("{prefix}.{tag}.conv.weight"), b.conv.weight.clone()));
            out.push((format!("{prefix}.{tag}.conv.bias"), b.conv.bias.clone()));
            out.push((format!("{prefix}.{tag}.bn.gamma"), b.bn.gamma.clone()));
            out.push((format!("{prefix}.{tag}.bn.beta"), b.bn.beta.clone()));
            out.push((format!("{prefix}.{tag}.bn.running_mean"), b.bn.running_mean.clone()));
            out.push((format!("{prefix}.{tag}.bn.running_var"), b.bn.running_var.clone()));
        }
        out
    }
}

/// Counts reads of the private modules. The tests use it to assert that
/// server-side phases never touch client-private state.
#[derive(Debug, Default)]
pub struct AccessMeter {
    reads: AtomicU64,
}

impl AccessMeter {
    fn bump(&self) {
        self.reads.fetch_add(1, Ordering::Relaxed);
    }

    pub fn reads(&self) -> u64 {
        self.reads.load(Ordering::Relaxed)
    }
}

/// Client-private trainable state: decoupler, corrector, auxiliary head.
/// All access goes through the metered getters.
#[derive(Debug)]
pub struct PrivateParams<T> {
    decoupler: FeatureHead<T>,
    corrector: FeatureHead<T>,
    aux: Linear<T>,
    meter: AccessMeter,
}

impl<T: Real> Clone for PrivateParams<T> {
    fn clone(&self) -> Self {
        Self {
            decoupler: self.decoupler.clone(),
            corrector: self.corrector.clone(),
            aux: self.aux.clone(),
            meter: AccessMeter::default(),
        }
    }
}

impl<T: Real> PartialEq for PrivateParams<T> {
    fn eq(&self, other: &Self) -> bool {
        self.decoupler == other.decoupler
            && self.corrector == other.corrector
            && self.aux == other.aux
    }
}

impl<T: Real> PrivateParams<T> {
    pub fn init(cfg: &ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.feature_channels();
        Ok(Self {
            decoupler: FeatureHead::init(c, cfg.kernel, cfg.bn_eps, cfg.bn_momentum, rng),
            corrector: FeatureHead::init(c, cfg.kernel, cfg.bn_eps, cfg.bn_momentum, rng),
            aux: Linear::init(cfg.embed_dim(), cfg.classes, rng),
            meter: AccessMeter::default(),
        })
    }

    pub fn decoupler(&self) -> &FeatureHead<T> {
        self.meter.bump();
        &self.decoupler
    }

    pub fn corrector(&self) -> &FeatureHead<T> {
        self.meter.bump();
        &self.corrector
    }

    pub fn aux(&self) -> &Linear<T> {
        self.meter.bump();
        &self.aux
    }

    pub fn decoupler_mut(&mut self) -> &mut FeatureHead<T> {
        self.meter.bump();
        &mut self.decoupler
    }

    pub fn corrector_mut(&mut self) -> &mut FeatureHead<T> {
        self.meter.bump();
        &mut self.corrector
    }

    pub fn aux_mut(&mut self) -> &mut Linear<T> {
        self.meter.bump();
        &mut self.aux
    }

    pub fn access_count(&self) -> u64 {
        self.meter.reads()
    }

    /// Mutable trainables of the active private modules, in the canonical
    /// order decoupler, auxiliary head, corrector.
    pub fn active_trainables_mut(&mut self, dfd: bool, dfc: bool) -> Vec<&mut Tensor<T>> {
        self.meter.bump();
        let mut out = Vec::new();
        if dfd {
            out.extend(self.decoupler.trainables_mut());
            out.push(&mut self.aux.weight);
            out.push(&mut self.aux.bias);
        }
        if dfc {
            out.extend(self.corrector.trainables_mut());
        }
        out
    }

    pub fn named_tensors(&self) -> Vec<(String, Tensor<T>)> {
        self.meter.bump();
        let mut out = self.decoupler.named_tensors("decoupler");
        out.extend(self.corrector.named_tensors("corrector"));
        out.push((String::from("aux.weight"), self.aux.weight.clone()));
        out.push((String::from("aux.bias"), self.aux.bias.clone()));
        out
    }
}

/// A client's full trainable state. `shared` is replaced by the broadcast
/// global model each round; `private` persists locally across rounds.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelBundle<T: Real> {
    pub shared: SharedParams<T>,
    pub private: PrivateParams<T>,
    pub config: ModelConfig,
}

impl<T: Real> ModelBundle<T> {
    pub fn named_tensors(&self) -> Vec<(String, Tensor<T>)> {
        let mut out: Vec<(String, Tensor<T>)> = self
            .shared
            .named_tensors()
            .into_iter()
            .map(|(n, t)| (format!("shared.{n}"), t))
            .collect();
        out.extend(
            self.private.named_tensors().into_iter().map(|(n, t)| (format!("private.{n}"), t)),
        );
        out
    }
}

// ---------------------------------------------------------------------------
// Tape-lifted views and forwards
// ---------------------------------------------------------------------------

pub struct ConvView<'t, T: Real> {
    pub weight: Var<'t, T>,
    pub bias: Var<'t, T>,
    stride: usize,
    padding: usize,
}

pub struct BnView<'t, T: Real> {
    pub gamma: Var<'t, T>,
    pub beta: Var<'t, T>,
    running_mean: Tensor<T>,
    running_var: Tensor<T>,
    eps: T,
}

pub struct LinearView<'t, T: Real> {
    pub weight: Var<'t, T>,
    pub bias: Var<'t, T>,
}

impl<'t, T: Real> LinearView<'t, T> {
    pub fn lift(layer: &Linear<T>, tape: &'t Tape<T>) -> Self {
        Self { weight: tape.leaf(layer.weight.clone()), bias: tape.leaf(layer.bias.clone()) }
    }

    pub fn forward(&self, x: Var<'t, T>) -> Result<Var<'t, T>> {
        x.linear(self.weight, self.bias)
    }

    pub fn vars(&self) -> [Var<'t, T>; 2] {
        [self.weight, self.bias]
    }
}

pub struct BlockView<'t, T: Real> {
    pub conv: ConvView<'t, T>,
    pub bn: BnView<'t, T>,
    relu: bool,
    pool: bool,
}

impl<'t, T: Real> BlockView<'t, T> {
    pub fn lift(block: &ConvBlock<T>, tape: &'t Tape<T>) -> Self {
        Self::from_parts(
            block,
            tape.leaf(block.conv.weight.clone()),
            tape.leaf(block.conv.bias.clone()),
            tape.leaf(block.bn.gamma.clone()),
            tape.leaf(block.bn.beta.clone()),
        )
    }

    /// Assembles a view whose trainables are the given vars; structure and
    /// running statistics come from `block`.
    pub fn from_parts(
        block: &ConvBlock<T>,
        weight: Var<'t, T>,
        bias: Var<'t, T>,
        gamma: Var<'t, T>,
        beta: Var<'t, T>,
    ) -> Self {
        Self {
            conv: ConvView { weight, bias, stride: block.conv.stride, padding: block.conv.padding },
            bn: BnView {
                gamma,
                beta,
                running_mean: block.bn.running_mean.clone(),
                running_var: block.bn.running_var.clone(),
                eps: real(block.bn.eps),
            },
            relu: block.relu,
            pool: block.pool,
        }
    }

    pub fn forward(
        &self,
        x: Var<'t, T>,
        phase: Phase,
        stats: &mut Vec<BatchStats<T>>,
    ) -> Result<Var<'t, T>> {
        let conv = x.conv2d(self.conv.weight, self.conv.bias, self.conv.stride, self.conv.padding)?;
        let normed = match phase {
            Phase::Train => {
                let (y, s) = conv.batchnorm_train(self.bn.gamma, self.bn.beta, self.bn.eps)?;
                stats.push(s);
                y
            }
            Phase::Eval => conv.batchnorm_eval(
                self.bn.gamma,
                self.bn.beta,
                &self.bn.running_mean,
                &self.bn.running_var,
                self.bn.eps,
            )?,
        };
        let activated = if self.relu { normed.relu() } else { normed };
        if self.pool {
            activated.avg_pool2d(2)
        } else {
            Ok(activated)
        }
    }

    fn vars(&self) -> [Var<'t, T>; 4] {
        [self.conv.weight, self.conv.bias, self.bn.gamma, self.bn.beta]
    }
}

pub struct SharedView<'t, T: Real> {
    pub backbone: Vec<BlockView<'t, T>>,
    pub classifier: LinearView<'t, T>,
}

impl<'t, T: Real> SharedView<'t, T> {
    /// Backbone forward: image batch `(B, in, H, W)` to feature map
    /// `(B, C, h, w)`.
    pub fn backbone_forward(
        &self,
        x: Var<'t, T>,
        phase: Phase,
        stats: &mut Vec<BatchStats<T>>,
    ) -> Result<Var<'t, T>> {
        let mut h = x;
        for block in &self.backbone {
            h = block.forward(h, phase, stats)?;
        }
        Ok(h)
    }

    /// Classifier logits from embeddings `(B, d)`.
    pub fn classify(&self, l: Var<'t, T>) -> Result<Var<'t, T>> {
        self.classifier.forward(l)
    }

    /// Trainable vars in the canonical order used by
    /// [`SharedParams::trainables_mut`].
    pub fn trainable_vars(&self) -> Vec<Var<'t, T>> {
        let mut out = Vec::new();
        for b in &self.backbone {
            out.extend(b.vars());
        }
        out.extend(self.classifier.vars());
        out
    }
}

pub struct HeadView<'t, T: Real> {
    pub block1: BlockView<'t, T>,
    pub block2: BlockView<'t, T>,
}

impl<'t, T: Real> HeadView<'t, T> {
    /// Channel-preserving forward over a feature map `(B, C, h, w)`.
    pub fn forward(
        &self,
        f: Var<'t, T>,
        phase: Phase,
        stats: &mut Vec<BatchStats<T>>,
    ) -> Result<Var<'t, T>> {
        let h = self.block1.forward(f, phase, stats)?;
        self.block2.forward(h, phase, stats)
    }

    pub fn trainable_vars(&self) -> Vec<Var<'t, T>> {
        let mut out = Vec::new();
        out.extend(self.block1.vars());
        out.extend(self.block2.vars());
        out
    }
}

/// The flatten stage: global average pool, `(B, C, h, w)` to `(B, C)`.
pub fn flatten_forward<'t, T: Real>(f: Var<'t, T>) -> Result<Var<'t, T>> {
    f.global_avg_pool()
}
