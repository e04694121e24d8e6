//! Loss, optimizers, datasets and the epoch loop.

use crate::error::{Error, Result};
use crate::exec::ExecCtx;
use crate::layers::Param;
use crate::memtrack::{Allocation, Category, MemoryReport};
use crate::models::Network;
use crate::reveng::Engine;
use crate::tensor::{BnMode, Precision, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::time::Instant;

/// Softmax cross-entropy on logits averaged over time.
///
/// `logits` is `[T, B, K]`. Returns the batch-mean loss and its gradient
/// w.r.t. every per-step logit.
pub fn cross_entropy_rate_loss(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    if logits.ndim() != 3 {
        return Err(Error::dim("cross_entropy", "logits rank", 3, logits.ndim()));
    }
    let (t, b, k) = (logits.dim(0), logits.dim(1), logits.dim(2));
    if labels.len() != b {
        return Err(Error::dim("cross_entropy", "labels", b, labels.len()));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::LabelOutOfRange { label: bad, num_classes: k });
    }
    let d = logits.data();
    let mut grad = vec![0.0; logits.len()];
    let mut loss = 0.0;
    for (bi, &label) in labels.iter().enumerate() {
        let mean: Vec<f64> = (0..k)
            .map(|c| (0..t).map(|ti| d[(ti * b + bi) * k + c]).sum::<f64>() / t as f64)
            .collect();
        let max = mean.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = mean.iter().map(|m| (m - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        loss += z.ln() + max - mean[label];
        for c in 0..k {
            let p = exps[c] / z - if c == label { 1.0 } else { 0.0 };
            let g = p / (b as f64 * t as f64);
            for ti in 0..t {
                grad[(ti * b + bi) * k + c] = g;
            }
        }
    }
    Ok((loss / b as f64, Tensor::from_vec(logits.shape().to_vec(), grad, logits.precision())?))
}

/// Index of the largest time-averaged logit per sample.
pub fn predictions(logits: &Tensor) -> Vec<usize> {
    let (t, b, k) = (logits.dim(0), logits.dim(1), logits.dim(2));
    let d = logits.data();
    (0..b)
        .map(|bi| {
            let mut best = (0, f64::NEG_INFINITY);
            for c in 0..k {
                let s: f64 = (0..t).map(|ti| d[(ti * b + bi) * k + c]).sum();
                if s > best.1 {
                    best = (c, s);
                }
            }
            best.0
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerConfig {
    Sgd {
        lr: f64,
        momentum: f64,
        weight_decay: f64,
    },
    Adamw {
        lr: f64,
        beta1: f64,
        beta2: f64,
        eps: f64,
        weight_decay: f64,
    },
}

impl OptimizerConfig {
    pub fn sgd(lr: f64, momentum: f64) -> Self {
        OptimizerConfig::Sgd {
            lr,
            momentum,
            weight_decay: 0.0,
        }
    }

    pub fn adamw(lr: f64, weight_decay: f64) -> Self {
        OptimizerConfig::Adamw {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
        }
    }
}

/// Optimizer with per-parameter moments, indexed in visit order.
#[derive(Debug, Clone)]
pub struct Optimizer {
    pub config: OptimizerConfig,
    pub steps: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig) -> Self {
        Optimizer {
            config,
            steps: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    /// Applies one update to every parameter of `net`.
    pub fn step(&mut self, net: &mut Network) {
        self.steps += 1;
        let mut idx = 0;
        net.visit_params(&mut |p| {
            self.update(idx, p);
            idx += 1;
        });
    }

    /// Applies one update to an explicit parameter list.
    pub fn step_params(&mut self, params: &mut [&mut Param]) {
        self.steps += 1;
        for (i, p) in params.iter_mut().enumerate() {
            self.update(i, p);
        }
    }

    fn update(&mut self, idx: usize, p: &mut Param) {
        if self.first.len() <= idx {
            self.first.resize(idx + 1, Vec::new());
            self.second.resize(idx + 1, Vec::new());
        }
        let n = p.value.len();
        if self.first[idx].len() != n {
            self.first[idx] = vec![0.0; n];
            self.second[idx] = vec![0.0; n];
        }
        let precision = p.value.precision();
        let grads = p.grad.data().to_vec();
        let values = p.value.data_mut();
        match self.config {
            OptimizerConfig::Sgd {
                lr,
                momentum,
                weight_decay,
            } => {
                let buf = &mut self.first[idx];
                for i in 0..n {
                    let g = grads[i] + weight_decay * values[i];
                    buf[i] = momentum * buf[i] + g;
                    values[i] = precision.round(values[i] - lr * buf[i]);
                }
            }
            OptimizerConfig::Adamw {
                lr,
                beta1,
                beta2,
                eps,
                weight_decay,
            } => {
                let t = self.steps as i32;
                let (c1, c2) = (1.0 - beta1.powi(t), 1.0 - beta2.powi(t));
                let (m, v) = (&mut self.first[idx], &mut self.second[idx]);
                for i in 0..n {
                    let g = grads[i];
                    m[i] = beta1 * m[i] + (1.0 - beta1) * g;
                    v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
                    let update = (m[i] / c1) / ((v[i] / c2).sqrt() + eps) + weight_decay * values[i];
                    values[i] = precision.round(values[i] - lr * update);
                }
            }
        }
    }
}

/// Labelled images `[N, C, H, W]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if images.ndim() != 4 {
            return Err(Error::dim("dataset", "images rank", 4, images.ndim()));
        }
        if images.dim(0) != labels.len() {
            return Err(Error::dim("dataset", "labels", images.dim(0), labels.len()));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::LabelOutOfRange { label: bad, num_classes });
        }
        Ok(Dataset {
            images,
            labels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `[C, H, W]` of one image.
    pub fn image_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    /// Images and labels at `indices`.
    pub fn gather(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let per = self.images.len() / self.len();
        let mut data = Vec::with_capacity(per * indices.len());
        for &i in indices {
            data.extend_from_slice(&self.images.data()[i * per..(i + 1) * per]);
        }
        let mut shape = self.images.shape().to_vec();
        shape[0] = indices.len();
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        Ok((Tensor::from_vec(shape, data, self.images.precision())?, labels))
    }

    pub fn to_precision(&self, precision: Precision) -> Dataset {
        Dataset {
            images: self.images.to_precision(precision),
            ..self.clone()
        }
    }

    /// Splits off the last `n` samples.
    pub fn split_tail(&self, n: usize) -> Result<(Dataset, Dataset)> {
        let n = n.min(self.len());
        let head: Vec<usize> = (0..self.len() - n).collect();
        let tail: Vec<usize> = (self.len() - n..self.len()).collect();
        let make = |idx: &[usize]| -> Result<Dataset> {
            if idx.is_empty() {
                return Err(Error::EmptyDataset);
            }
            let (images, labels) = self.gather(idx)?;
            Ok(Dataset {
                images,
                labels,
                num_classes: self.num_classes,
            })
        };
        Ok((make(&head)?, make(&tail)?))
    }
}

/// Synthetic dataset generators.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Synthetic {
    /// Two classes: a fixed ±pattern plus Gaussian noise; linearly separable.
    TwoGaussians,
    /// Two classes: the exclusive-or of two bright quadrants.
    XorPatterns,
    /// Per-class firing-rate maps sampled as binary frames.
    PoissonRate,
}

impl Synthetic {
    pub fn name(self) -> &'static str {
        match self {
            Synthetic::TwoGaussians => "two_gaussians",
            Synthetic::XorPatterns => "xor_patterns",
            Synthetic::PoissonRate => "poisson_rate",
        }
    }

    pub fn parse(s: &str) -> Option<Synthetic> {
        match s {
            "two_gaussians" => Some(Synthetic::TwoGaussians),
            "xor_patterns" => Some(Synthetic::XorPatterns),
            "poisson_rate" => Some(Synthetic::PoissonRate),
            _ => None,
        }
    }

    /// `n` single-channel `size × size` images. `classes` applies to
    /// `PoissonRate` only; the others are binary.
    pub fn generate(self, n: usize, size: usize, classes: usize, seed: u64, precision: Precision) -> Result<Dataset> {
        if n == 0 || size == 0 {
            return Err(Error::EmptyDataset);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let px = size * size;
        let mut data = Vec::with_capacity(n * px);
        let mut labels = Vec::with_capacity(n);
        let num_classes = match self {
            Synthetic::TwoGaussians => {
                let pattern: Vec<f64> = (0..px).map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 }).collect();
                let noise = Normal::new(0.0, 0.25).expect("valid sigma");
                for i in 0..n {
                    let label = i % 2;
                    let sign = if label == 0 { 1.0 } else { -1.0 };
                    data.extend(pattern.iter().map(|p| 0.75 + 0.5 * sign * p + noise.sample(&mut rng)));
                    labels.push(label);
                }
                2
            }
            Synthetic::XorPatterns => {
                let half = size.div_ceil(2);
                for _ in 0..n {
                    let (a, b) = (rng.random::<bool>(), rng.random::<bool>());
                    for r in 0..size {
                        for c in 0..size {
                            let on = (a && r < half && c < half) || (b && r >= size - half && c >= size - half);
                            let jitter = rng.random_range(0.0..0.1);
                            data.push(if on { 1.5 - jitter } else { jitter });
                        }
                    }
                    labels.push(usize::from(a ^ b));
                }
                2
            }
            Synthetic::PoissonRate => {
                let classes = classes.max(2);
                let rates: Vec<Vec<f64>> = (0..classes)
                    .map(|_| (0..px).map(|_| if rng.random::<f64>() < 0.5 { 0.9 } else { 0.1 }).collect())
                    .collect();
                for i in 0..n {
                    let label = i % classes;
                    data.extend(rates[label].iter().map(|&r| if rng.random::<f64>() < r { 1.5 } else { 0.0 }));
                    labels.push(label);
                }
                classes
            }
        };
        let images = Tensor::from_vec(vec![n, 1, size, size], data, precision)?;
        Dataset::new(images, labels, num_classes)
    }
}

/// Everything a training run mutates.
#[derive(Debug)]
pub struct TrainState {
    pub net: Network,
    pub optimizer: Optimizer,
    pub engine: Engine,
    pub seed: u64,
    pub epoch: usize,
    pub step: u64,
    _param_alloc: Allocation,
    _grad_alloc: Allocation,
}

impl TrainState {
    pub fn new(mut net: Network, optimizer: OptimizerConfig, engine: Engine, seed: u64, ctx: &ExecCtx) -> Result<Self> {
        let bytes = (net.param_count() * ctx.precision.bytes()) as u64;
        Ok(TrainState {
            net,
            optimizer: Optimizer::new(optimizer),
            engine,
            seed,
            epoch: 0,
            step: 0,
            _param_alloc: ctx.ledger.allocate(Category::Parameters, bytes)?,
            _grad_alloc: ctx.ledger.allocate(Category::Gradients, bytes)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepOutput {
    pub loss: f64,
    pub correct: usize,
}

/// One optimization step on a batch: forward, loss, backward, update.
pub fn train_step(state: &mut TrainState, images: &Tensor, labels: &[usize], ctx: &ExecCtx) -> Result<StepOutput> {
    ctx.set_bn_mode(BnMode::Train);
    state.net.zero_grads();
    let logits = state.net.forward(images, state.engine, true, ctx)?;
    let (loss, d_logits) = cross_entropy_rate_loss(&logits, labels)?;
    state.net.backward(&d_logits, state.engine, ctx)?;
    state.optimizer.step(&mut state.net);
    state.step += 1;
    let correct = predictions(&logits).iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(StepOutput { loss, correct })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub loss: f64,
    pub accuracy: f64,
    /// Peak working-set bytes (activations plus neuron state) per image.
    pub peak_mem_per_image: f64,
    pub op_count: u64,
    pub wall_ms: f64,
    pub memory: MemoryReport,
}

/// Sample order for `epoch`, reproducible from the run seed.
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    idx.shuffle(&mut rng);
    idx
}

pub fn train_epoch(state: &mut TrainState, data: &Dataset, batch_size: usize, ctx: &ExecCtx) -> Result<EpochMetrics> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if batch_size == 0 {
        return Err(Error::InvalidConfig("batch_size must be positive".into()));
    }
    let start = Instant::now();
    let ops_before = ctx.ops.total();
    let order = epoch_order(data.len(), state.seed, state.epoch);
    let (mut loss_sum, mut correct) = (0.0, 0);
    let mut peak_per_image: f64 = 0.0;
    for chunk in order.chunks(batch_size) {
        ctx.ledger.reset_peaks();
        let (images, labels) = data.gather(chunk)?;
        let out = train_step(state, &images, &labels, ctx)?;
        loss_sum += out.loss * chunk.len() as f64;
        correct += out.correct;
        peak_per_image = peak_per_image.max(ctx.ledger.peak_working_set() as f64 / chunk.len() as f64);
    }
    state.net.clear();
    let metrics = EpochMetrics {
        epoch: state.epoch,
        loss: loss_sum / data.len() as f64,
        accuracy: correct as f64 / data.len() as f64,
        peak_mem_per_image: peak_per_image,
        op_count: ctx.ops.total() - ops_before,
        wall_ms: start.elapsed().as_secs_f64() * 1e3,
        memory: ctx.ledger.snapshot(),
    };
    state.epoch += 1;
    Ok(metrics)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EvalMetrics {
    pub loss: f64,
    pub accuracy: f64,
}

/// Loss and accuracy with running normalization statistics.
pub fn evaluate(net: &mut Network, data: &Dataset, batch_size: usize, ctx: &ExecCtx) -> Result<EvalMetrics> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let saved = ctx.bn_mode();
    ctx.set_bn_mode(BnMode::Eval);
    let result = (|| {
        let (mut loss, mut correct) = (0.0, 0);
        let idx: Vec<usize> = (0..data.len()).collect();
        for chunk in idx.chunks(batch_size.max(1)) {
            let (images, labels) = data.gather(chunk)?;
            let logits = net.forward(&images, Engine::Oracle, false, ctx)?;
            loss += cross_entropy_rate_loss(&logits, &labels)?.0 * chunk.len() as f64;
            correct += predictions(&logits).iter().zip(&labels).filter(|(p, l)| p == l).count();
        }
        Ok(EvalMetrics {
            loss: loss / data.len() as f64,
            accuracy: correct as f64 / data.len() as f64,
        })
    })();
    ctx.set_bn_mode(saved);
    result
}
