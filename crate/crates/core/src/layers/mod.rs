//! Stateful spiking layers with explicit forward, cached backward and
//! statistics replay.
//!
//! Every layer consumes whole multi-step sequences: the leading axis is time
//! and the second is batch. Convolution-style layers fold `T·B` into one
//! batch axis; neurons step over `T` carrying their membrane potential.

mod attention;
mod blocks;
mod primitives;
pub mod stub;

pub use attention::{spike_attention, spike_attention_backward, MlpBlock, SsaBlock};
pub use blocks::{
    BasicBlock, DownsampleBlock, ResidualFn, SpikingTokenizer, TokenizerStage, TransformerBlock,
};
pub use primitives::{
    AvgPool, BatchNorm, Conv2d, GlobalMean, Linear, MaxPool, NormLayout, SpikingNeuron,
};

use crate::error::Result;
use crate::exec::ExecCtx;
use crate::tape::Tape;
use crate::tensor::{Precision, Tensor};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

pub type ModelRng = ChaCha8Rng;

/// Trainable tensor with its accumulated gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: &'static str,
    pub value: Tensor,
    pub grad: Tensor,
}

impl Param {
    pub fn new(name: &'static str, value: Tensor) -> Self {
        let grad = Tensor::zeros(value.shape(), value.precision());
        Param { name, value, grad }
    }

    pub fn zero_grad(&mut self) {
        self.grad = Tensor::zeros(self.value.shape(), self.value.precision());
    }

    pub fn accumulate(&mut self, g: &Tensor) -> Result<()> {
        self.grad.add_assign(g)
    }

    pub fn numel(&self) -> usize {
        self.value.len()
    }
}

/// One row of a model summary.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerProfile {
    pub kind: &'static str,
    pub output: Vec<usize>,
    pub params: usize,
    /// Forward multiply-accumulates for the given input shape.
    pub macs: u64,
    /// Counts toward the architecture's named depth.
    pub weight_layer: bool,
}

pub trait Module: Send + std::fmt::Debug {
    fn kind(&self) -> &'static str;

    /// Multi-step forward. When `tape` is given, everything the backward
    /// pass needs is recorded on it.
    fn forward(&mut self, x: &Tensor, tape: Option<&mut Tape>, ctx: &ExecCtx) -> Result<Tensor>;

    /// Consumes this module's entries from the top of `tape`, accumulates
    /// parameter gradients and returns the gradient w.r.t. the input.
    fn backward(&mut self, grad: &Tensor, tape: &mut Tape, ctx: &ExecCtx) -> Result<Tensor>;

    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param));

    fn visit_neurons(&mut self, _f: &mut dyn FnMut(&mut SpikingNeuron)) {}

    fn visit_norms(&mut self, _f: &mut dyn FnMut(&mut BatchNorm)) {}

    /// Appends summary rows for this module and returns its output shape.
    fn profile(&self, input: &[usize], out: &mut Vec<LayerProfile>) -> Result<Vec<usize>>;
}

/// Resets every neuron under `m` to its initial state.
pub fn reset_neurons(m: &mut dyn Module) {
    m.visit_neurons(&mut |n| n.reset());
}

/// True when every neuron under `m` sits at time index zero.
pub fn neurons_fresh(m: &mut dyn Module) -> bool {
    let mut fresh = true;
    m.visit_neurons(&mut |n| fresh &= n.state.is_fresh());
    fresh
}

pub fn zero_grads(m: &mut dyn Module) {
    m.visit_params(&mut |p| p.zero_grad());
}

/// Snapshot of all parameter gradients in visit order.
pub fn collect_grads(m: &mut dyn Module) -> Vec<Tensor> {
    let mut out = Vec::new();
    m.visit_params(&mut |p| out.push(p.grad.clone()));
    out
}

pub fn collect_values(m: &mut dyn Module) -> Vec<Tensor> {
    let mut out = Vec::new();
    m.visit_params(&mut |p| out.push(p.value.clone()));
    out
}

pub fn param_count(m: &mut dyn Module) -> usize {
    let mut n = 0;
    m.visit_params(&mut |p| n += p.numel());
    n
}

/// Layers applied in order.
#[derive(Debug, Default)]
pub struct Sequential {
    pub layers: Vec<Box<dyn Module>>,
}

impl Sequential {
    pub fn new(layers: Vec<Box<dyn Module>>) -> Self {
        Sequential { layers }
    }

    pub fn push(&mut self, m: impl Module + 'static) {
        self.layers.push(Box::new(m));
    }
}

impl Module for Sequential {
    fn kind(&self) -> &'static str {
        "sequential"
    }

    fn forward(&mut self, x: &Tensor, mut tape: Option<&mut Tape>, ctx: &ExecCtx) -> Result<Tensor> {
        let mut h = x.clone();
        for l in &mut self.layers {
            h = l.forward(&h, tape.as_deref_mut(), ctx)?;
        }
        Ok(h)
    }

    fn backward(&mut self, grad: &Tensor, tape: &mut Tape, ctx: &ExecCtx) -> Result<Tensor> {
        let mut g = grad.clone();
        for l in self.layers.iter_mut().rev() {
            g = l.backward(&g, tape, ctx)?;
        }
        Ok(g)
    }

    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.layers.iter_mut().for_each(|l| l.visit_params(f));
    }

    fn visit_neurons(&mut self, f: &mut dyn FnMut(&mut SpikingNeuron)) {
        self.layers.iter_mut().for_each(|l| l.visit_neurons(f));
    }

    fn visit_norms(&mut self, f: &mut dyn FnMut(&mut BatchNorm)) {
        self.layers.iter_mut().for_each(|l| l.visit_norms(f));
    }

    fn profile(&self, input: &[usize], out: &mut Vec<LayerProfile>) -> Result<Vec<usize>> {
        let mut shape = input.to_vec();
        for l in &self.layers {
            shape = l.profile(&shape, out)?;
        }
        Ok(shape)
    }
}

/// Uniform `[-bound, bound]` initialization.
pub fn uniform(shape: &[usize], bound: f64, rng: &mut ModelRng, precision: Precision) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
    Tensor::from_vec(shape.to_vec(), data, precision).expect("shape/data agree")
}
