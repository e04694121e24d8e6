//! Small deterministic modules for exercising the reversible engine in
//! isolation.

use super::{Conv2d, LayerProfile, Module, Param, Sequential, SpikingNeuron};
use crate::error::Result;
use crate::exec::ExecCtx;
use crate::neurons::NeuronParams;
use crate::tape::Tape;
use crate::tensor::{Precision, Tensor};

/// `y = x`.
#[derive(Debug, Default)]
pub struct Identity;

impl Module for Identity {
    fn kind(&self) -> &'static str {
        "identity"
    }

    fn forward(&mut self, x: &Tensor, _tape: Option<&mut Tape>, _ctx: &ExecCtx) -> Result<Tensor> {
        Ok(x.clone())
    }

    fn backward(&mut self, grad: &Tensor, _tape: &mut Tape, _ctx: &ExecCtx) -> Result<Tensor> {
        Ok(grad.clone())
    }

    fn visit_params(&mut self, _f: &mut dyn FnMut(&mut Param)) {}

    fn profile(&self, input: &[usize], _out: &mut Vec<LayerProfile>) -> Result<Vec<usize>> {
        Ok(input.to_vec())
    }
}

/// `y = a · x` with a trainable scalar `a`.
#[derive(Debug)]
pub struct Scale {
    pub a: Param,
    last: Option<Tensor>,
}

impl Scale {
    pub fn new(a: f64, precision: Precision) -> Self {
        Scale {
            a: Param::new("scale.a", Tensor::scalar(a, precision)),
            last: None,
        }
    }
}

impl Module for Scale {
    fn kind(&self) -> &'static str {
        "scale"
    }

    fn forward(&mut self, x: &Tensor, tape: Option<&mut Tape>, _ctx: &ExecCtx) -> Result<Tensor> {
        if tape.is_some() {
            self.last = Some(x.clone());
        }
        Ok(x.scale(self.a.value.data()[0]))
    }

    fn backward(&mut self, grad: &Tensor, _tape: &mut Tape, _ctx: &ExecCtx) -> Result<Tensor> {
        if let Some(x) = self.last.take() {
            let da = x.mul(grad)?.sum();
            self.a.accumulate(&Tensor::scalar(da, grad.precision()))?;
        }
        Ok(grad.scale(self.a.value.data()[0]))
    }

    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.a);
    }

    fn profile(&self, input: &[usize], _out: &mut Vec<LayerProfile>) -> Result<Vec<usize>> {
        Ok(input.to_vec())
    }
}

/// `SN(conv1×1(x))` on a single channel with weight `w`.
pub fn spike_probe(w: f64, neuron: NeuronParams, timesteps: usize, precision: Precision) -> Sequential {
    let mut s = Sequential::default();
    s.push(Conv2d::from_weight(Tensor::full(&[1, 1, 1, 1], w, precision), 1, 0));
    s.push(SpikingNeuron::new(neuron, timesteps));
    s
}

/// Smooth `conv1×1` probe over `channels` with the given `[C, C]` weights.
pub fn conv_probe(weights: &[f64], channels: usize, precision: Precision) -> Result<Conv2d> {
    let w = Tensor::from_vec(vec![channels, channels, 1, 1], weights.to_vec(), precision)?;
    Ok(Conv2d::from_weight(w, 1, 0))
}
