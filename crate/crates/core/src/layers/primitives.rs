use super::{uniform, LayerProfile, ModelRng, Module, Param};
use crate::error::{Error, Result};
use crate::exec::{ExecCtx, Fault};
use crate::memtrack::{Allocation, Category};
use crate::neurons::{self, NeuronParams, NeuronState};
use crate::tape::{LayerId, Tape, TapeEntry};
use crate::tensor::{self, BnMode, BnStats, Precision, RunningStats, Tensor, BN_EPS};

fn steps_of(x: &Tensor) -> usize {
    x.dim(0)
}

/// Folds every axis before the last three into one batch axis.
fn fold_spatial(x: &Tensor, op: &'static str) -> Result<(Vec<usize>, Tensor)> {
    if x.ndim() < 4 {
        return Err(Error::dim(op, "input rank", ">= 4", x.ndim()));
    }
    let n = x.ndim();
    let lead = x.shape()[..n - 3].to_vec();
    let folded = x.reshape(&[lead.iter().product(), x.dim(n - 3), x.dim(n - 2), x.dim(n - 1)])?;
    Ok((lead, folded))
}

fn unfold(lead: &[usize], t: Tensor) -> Result<Tensor> {
    let mut shape = lead.to_vec();
    shape.extend_from_slice(&t.shape()[1..]);
    t.into_shape(&shape)
}

fn spatial_shape_check(op: &'static str, input: &[usize]) -> Result<()> {
    if input.len() < 4 {
        return Err(Error::dim(op, "input rank", ">= 4", input.len()));
    }
    Ok(())
}

#[derive(Debug)]
pub struct Conv2d {
    id: LayerId,
    pub weight: Param,
    pub bias: Option<Param>,
    pub stride: usize,
    pub pad: usize,
    /// Whether this convolution counts toward the architecture's depth.
    pub counted: bool,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        bias: bool,
        rng: &mut ModelRng,
        precision: Precision,
    ) -> Self {
        let bound = 1.0 / ((cin * kernel * kernel) as f64).sqrt();
        Conv2d {
            id: LayerId::next(),
            weight: Param::new("conv.weight", uniform(&[cout, cin, kernel, kernel], bound, rng, precision)),
            bias: bias.then(|| Param::new("conv.bias", uniform(&[cout], bound, rng, precision))),
            stride,
            pad,
            counted: true,
        }
    }

    pub fn from_weight(weight: Tensor, stride: usize, pad: usize) -> Self {
        Conv2d {
            id: LayerId::next(),
            weight: Param::new("conv.weight", weight),
            bias: None,
            stride,
            pad,
            counted: true,
        }
    }

    pub fn uncounted(mut self) -> Self {
        self.counted = false;
        self
    }

    pub fn out_channels(&self) -> usize {
        self.weight.value.dim(0)
    }
}

impl Module for Conv2d {
    fn kind(&self) -> &'static str {
        "conv2d"
    }

    fn forward(&mut self, x: &Tensor, tape: Option<&mut Tape>, ctx: &ExecCtx) -> Result<Tensor> {
        let (lead, folded) = fold_spatial(x, "conv2d")?;
        let y = tensor::conv2d(
            &folded,
            &self.weight.value,
            self.bias.as_ref().map(|b| &b.value),
            self.stride,
            self.pad,
            &ctx.ops,
        )?;
        if let Some(tape) = tape {
            tape.push(TapeEntry::new(self.id, "conv2d", steps_of(x)).with(Category::Activations, x.clone()))?;
        }
        unfold(&lead, y)
    }

    fn backward(&mut self, grad: &Tensor, tape: &mut Tape, ctx: &ExecCtx) -> Result<Tensor> {
        let entry = tape.pop(self.id, "conv2d")?;
        let x = entry.tensor(0)?;
        let (lead, folded) = fold_spatial(x, "conv2d")?;
        let (_, gfold) = fold_spatial(grad, "conv2d")?;
        let g = tensor::conv2d_backward(
            &folded,
            &self.weight.value,
            self.bias.is_some(),
            self.stride,
            self.pad,
            &gfold,
            &ctx.ops,
        )?;
        self.weight.accumulate(&g.w)?;
        if let (Some(b), Some(gb)) = (&mut self.bias, &g.bias) {
            b.accumulate(gb)?;
        }
        unfold(&lead, g.x)
    }

    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.weight);
        if let Some(b) = &mut self.bias {
            f(b);
        }
    }

    fn profile(&self, input: &[usize], out: &mut Vec<LayerProfile>) -> Result<Vec<usize>> {
        spatial_shape_check("conv2d", input)?;
        let n = input.len();
        let w = self.weight.value.shape();
        let (cin, h, wd) = (input[n - 3], input[n - 2], input[n - 1]);
        if cin != w[1] {
            return Err(Error::dim("conv2d", "in_channels", w[1], cin));
        }
        let (oh, ow) = tensor::conv2d_output_hw(h, wd, w[2], w[3], self.stride, self.pad);
        let lead: usize = input[..n - 3].iter().product();
        let mut shape = input[..n - 3].to_vec();
        shape.extend([w[0], oh, ow]);
        out.push(LayerProfile {
            kind: "conv2d",
            output: shape.clone(),
            params: self.weight.numel() + self.bias.as_ref().map_or(0, Param::numel),
            macs: (lead * w[0] * oh * ow * w[1] * w[2] * w[3]) as u64,
            weight_layer: self.counted,
        });
        Ok(shape)
    }
}

/// Which axis carries the normalized channels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormLayout {
    /// `[..., C, H, W]`
    Spatial,
    /// `[..., D]`
    Features,
}

impl NormLayout {
    fn channel_axis(self, ndim: usize) -> usize {
        match self {
            NormLayout::Spatial => ndim - 3,
            NormLayout::Features => ndim - 1,
        }
    }

    fn view(self, x: &Tensor) -> Result<Tensor> {
        let min_rank = if self == NormLayout::Spatial { 4 } else { 2 };
        if x.ndim() < min_rank {
            return Err(Error::dim("batchnorm", "input rank", format!(">= {min_rank}"), x.ndim()));
        }
        let axis = self.channel_axis(x.ndim());
        let before: usize = x.shape()[..axis].iter().product();
        let after: usize = x.shape()[axis + 1..].iter().product();
        x.reshape(&[before, x.dim(axis), after])
    }
}

#[derive(Debug)]
pub struct BatchNorm {
    id: LayerId,
    pub gamma: Param,
    pub beta: Param,
    pub running: RunningStats,
    pub layout: NormLayout,
    stash: Option<(BnStats, Allocation)>,
}

impl BatchNorm {
    pub fn new(channels: usize, layout: NormLayout, precision: Precision) -> Self {
        BatchNorm {
            id: LayerId::next(),
            gamma: Param::new("bn.gamma", Tensor::ones(&[channels], precision)),
            beta: Param::new("bn.beta", Tensor::zeros(&[channels], precision)),
            running: RunningStats::new(channels),
            layout,
            stash: None,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.value.len()
    }

    /// Statistics kept from the last train-mode forward, if any.
    pub fn stashed(&self) -> Option<&BnStats> {
        self.stash.as_ref().map(|(s, _)| s)
    }

    pub fn clear_stash(&mut self) {
        self.stash = None;
    }

    pub fn set_stash(&mut self, stats: BnStats, ctx: &ExecCtx) -> Result<()> {
        let bytes = (2 * stats.channels() * ctx.precision.bytes()) as u64;
        let alloc = ctx.ledger.allocate(Category::Activations, bytes)?;
        self.stash = Some((stats, alloc));
        Ok(())
    }
}

impl Module for BatchNorm {
    fn kind(&self) -> &'static str {
        "batchnorm"
    }

    fn forward(&mut self, x: &Tensor, tape: Option<&mut Tape>, ctx: &ExecCtx) -> Result<Tensor> {
        let view = self.layout.view(x)?;
        let mode = ctx.bn_mode();
        let cached = match mode {
            BnMode::Replay => {
                let (mut stats, _alloc) = self.stash.take().ok_or_else(|| {
                    Error::Contract("replay of a batchnorm layer with no recorded batch statistics".into())
                })?;
                if ctx.fault == Some(Fault::CorruptStats) {
                    for (m, v) in stats.mean.iter_mut().zip(&stats.var) {
                        *m += 0.05 * (v + BN_EPS).sqrt();
                    }
                }
                Some(stats)
            }
            _ => None,
        };
        let (y, stats) = tensor::batchnorm(
            &view,
            &self.gamma.value,
            &self.beta.value,
            mode,
            cached.as_ref(),
            &mut self.running,
        )?;
        if mode == BnMode::Train && ctx.stash_stats() {
            self.set_stash(stats.clone(), ctx)?;
        }
        if let Some(tape) = tape {
            tape.push(
                TapeEntry::new(self.id, "batchnorm", steps_of(x))
                    .with(Category::Activations, x.clone())
                    .with_stats(stats, mode != BnMode::Eval),
            )?;
        }
        y.into_shape(x.shape())
    }

    fn backward(&mut self, grad: &Tensor, tape: &mut Tape, _ctx: &ExecCtx) -> Result<Tensor> {
        let entry = tape.pop(self.id, "batchnorm")?;
        let x = entry.tensor(0)?;
        let stats = entry
            .stats
            .as_ref()
            .ok_or_else(|| Error::TapeMismatch("batchnorm entry without statistics".into()))?;
        let (dx, dg, db) = tensor::batchnorm_backward(
            &self.layout.view(x)?,
            &self.gamma.value,
            &stats.stats,
            stats.from_batch,
            &self.layout.view(grad)?,
        )?;
        self.gamma.accumulate(&dg)?;
        self.beta.accumulate(&db)?;
        dx.into_shape(x.shape())
    }

    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.gamma);
        f(&mut self.beta);
    }

    fn visit_norms(&mut self, f: &mut dyn FnMut(&mut BatchNorm)) {
        f(self);
    }

    fn profile(&self, input: &[usize], out: &mut Vec<LayerProfile>) -> Result<Vec<usize>> {
        let c = input[self.layout.channel_axis(input.len())];
        if c != self.channels() {
            return Err(Error::dim("batchnorm", "channels", self.channels(), c));
        }
        out.push(LayerProfile {
            kind: "batchnorm",
            output: input.to_vec(),
            params: 2 * c,
            macs: 0,
            weight_layer: false,
        });
        Ok(input.to_vec())
    }
}

/// Multi-step spiking neuron layer.
#[derive(Debug)]
pub struct SpikingNeuron {
    id: LayerId,
    pub params: NeuronParams,
    pub state: NeuronState,
}

impl SpikingNeuron {
    pub fn new(params: NeuronParams, timesteps: usize) -> Self {
        SpikingNeuron {
            id: LayerId::next(),
            params,
            state: NeuronState::new(timesteps),
        }
    }

    pub fn reset(&mut self) {
        neurons::reset_state(&self.params, &mut self.state);
    }

    /// Moves the clock back to zero without touching the potentials.
    pub fn rewind_clock(&mut self) {
        self.state.t = 0;
        self.state.h = None;
    }
}

impl Module for SpikingNeuron {
    fn kind(&self) -> &'static str {
        "neuron"
    }

    fn forward(&mut self, x: &Tensor, tape: Option<&mut Tape>, ctx: &ExecCtx) -> Result<Tensor> {
        let out = neurons::multistep_forward(&self.params, &mut self.state, x)?;
        let edge = out
            .hidden
            .data()
            .iter()
            .fold(f64::INFINITY, |m, &h| m.min(self.params.knife_edge_distance(h)));
        ctx.report_knife_edge(edge);
        if let Some(tape) = tape {
            tape.push(TapeEntry::new(self.id, "neuron", steps_of(x)).with(Category::NeuronState, out.hidden))?;
        }
        Ok(out.spikes)
    }

    fn backward(&mut self, grad: &Tensor, tape: &mut Tape, _ctx: &ExecCtx) -> Result<Tensor> {
        let entry = tape.pop(self.id, "neuron")?;
        neurons::bptt_backward(&self.params, entry.tensor(0)?, grad)
    }

    fn visit_params(&mut self, _f: &mut dyn FnMut(&mut Param)) {}

    fn visit_neurons(&mut self, f: &mut dyn FnMut(&mut SpikingNeuron)) {
        f(self);
    }

    fn profile(&self, input: &[usize], out: &mut Vec<LayerProfile>) -> Result<Vec<usize>> {
        out.push(LayerProfile {
            kind: "neuron",
            output: input.to_vec(),
            params: 0,
            macs: 0,
            weight_layer: false,
        });
        Ok(input.to_vec())
    }
}

/// Fully connected layer over the last axis.
#[derive(Debug)]
pub struct Linear {
    id: LayerId,
    pub weight: Param,
    pub bias: Option<Param>,
    pub counted: bool,
}

impl Linear {
    pub fn new(din: usize, dout: usize, bias: bool, rng: &mut ModelRng, precision: Precision) -> Self {
        let bound = 1.0 / (din as f64).sqrt();
        Linear {
            id: LayerId::next(),
            weight: Param::new("linear.weight", uniform(&[dout, din], bound, rng, precision)),
            bias: bias.then(|| Param::new("linear.bias", uniform(&[dout], bound, rng, precision))),
            counted: true,
        }
    }

    pub fn from_weight(weight: Tensor, bias: Option<Tensor>) -> Self {
        Linear {
            id: LayerId::next(),
            weight: Param::new("linear.weight", weight),
            bias: bias.map(|b| Param::new("linear.bias", b)),
            counted: true,
        }
    }

    fn rows(x: &Tensor) -> Result<(usize, usize)> {
        let din = x.dim(x.ndim() - 1);
        Ok((x.len() / din, din))
    }
}

impl Module for Linear {
    fn kind(&self) -> &'static str {
        "linear"
    }

    fn forward(&mut self, x: &Tensor, tape: Option<&mut Tape>, ctx: &ExecCtx) -> Result<Tensor> {
        let (rows, din) = Self::rows(x)?;
        let y = tensor::linear(&x.reshape(&[rows, din])?, &self.weight.value, self.bias.as_ref().map(|b| &b.value), &ctx.ops)?;
        if let Some(tape) = tape {
            tape.push(TapeEntry::new(self.id, "linear", steps_of(x)).with(Category::Activations, x.clone()))?;
        }
        let mut shape = x.shape().to_vec();
        *shape.last_mut().expect("rank >= 1") = self.weight.value.dim(0);
        y.into_shape(&shape)
    }

    fn backward(&mut self, grad: &Tensor, tape: &mut Tape, ctx: &ExecCtx) -> Result<Tensor> {
        let entry = tape.pop(self.id, "linear")?;
        let x = entry.tensor(0)?;
        let (rows, din) = Self::rows(x)?;
        let dout = self.weight.value.dim(0);
        let g = tensor::linear_backward(
            &x.reshape(&[rows, din])?,
            &self.weight.value,
            self.bias.is_some(),
            &grad.reshape(&[rows, dout])?,
            &ctx.ops,
        )?;
        self.weight.accumulate(&g.w)?;
        if let (Some(b), Some(gb)) = (&mut self.bias, &g.bias) {
            b.accumulate(gb)?;
        }
        g.x.into_shape(x.shape())
    }

    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.weight);
        if let Some(b) = &mut self.bias {
            f(b);
        }
    }

    fn profile(&self, input: &[usize], out: &mut Vec<LayerProfile>) -> Result<Vec<usize>> {
        let (dout, din) = (self.weight.value.dim(0), self.weight.value.dim(1));
        let last = *input.last().ok_or_else(|| Error::dim("linear", "input rank", ">= 1", 0))?;
        if last != din {
            return Err(Error::dim("linear", "in_features", din, last));
        }
        let rows: usize = input[..input.len() - 1].iter().product();
        let mut shape = input.to_vec();
        *shape.last_mut().expect("rank >= 1") = dout;
        out.push(LayerProfile {
            kind: "linear",
            output: shape.clone(),
            params: self.weight.numel() + self.bias.as_ref().map_or(0, Param::numel),
            macs: (rows * din * dout) as u64,
            weight_layer: self.counted,
        });
        Ok(shape)
    }
}

#[derive(Debug)]
pub struct AvgPool {
    id: LayerId,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl AvgPool {
    pub fn new(kernel: usize, stride: usize, pad: usize) -> Self {
        AvgPool {
            id: LayerId::next(),
            kernel,
            stride,
            pad,
        }
    }
}

impl Module for AvgPool {
    fn kind(&self) -> &'static str {
        "avgpool"
    }

    fn forward(&mut self, x: &Tensor, tape: Option<&mut Tape>, _ctx: &ExecCtx) -> Result<Tensor> {
        let (lead, folded) = fold_spatial(x, "avgpool2d")?;
        let y = tensor::avgpool2d(&folded, self.kernel, self.stride, self.pad)?;
        if let Some(tape) = tape {
            tape.push(TapeEntry::new(self.id, "avgpool", steps_of(x)).with_meta(x.shape().to_vec()))?;
        }
        unfold(&lead, y)
    }

    fn backward(&mut self, grad: &Tensor, tape: &mut Tape, _ctx: &ExecCtx) -> Result<Tensor> {
        let entry = tape.pop(self.id, "avgpool")?;
        let shape = entry.meta;
        let n = shape.len();
        let folded_in = [shape[..n - 3].iter().product(), shape[n - 3], shape[n - 2], shape[n - 1]];
        let (_, gfold) = fold_spatial(grad, "avgpool2d")?;
        let gx = tensor::avgpool2d_backward(&folded_in, &gfold, self.kernel, self.stride, self.pad)?;
        gx.into_shape(&shape)
    }

    fn visit_params(&mut self, _f: &mut dyn FnMut(&mut Param)) {}

    fn profile(&self, input: &[usize], out: &mut Vec<LayerProfile>) -> Result<Vec<usize>> {
        spatial_shape_check("avgpool2d", input)?;
        let n = input.len();
        let (oh, ow) = tensor::pool_output_hw(input[n - 2], input[n - 1], self.kernel, self.stride, self.pad);
        let mut shape = input[..n - 2].to_vec();
        shape.extend([oh, ow]);
        out.push(LayerProfile {
            kind: "avgpool",
            output: shape.clone(),
            params: 0,
            macs: 0,
            weight_layer: false,
        });
        Ok(shape)
    }
}

#[derive(Debug)]
pub struct MaxPool {
    id: LayerId,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl MaxPool {
    pub fn new(kernel: usize, stride: usize, pad: usize) -> Self {
        MaxPool {
            id: LayerId::next(),
            kernel,
            stride,
            pad,
        }
    }
}

impl Module for MaxPool {
    fn kind(&self) -> &'static str {
        "maxpool"
    }

    fn forward(&mut self, x: &Tensor, tape: Option<&mut Tape>, _ctx: &ExecCtx) -> Result<Tensor> {
        let (lead, folded) = fold_spatial(x, "maxpool2d")?;
        let (y, _) = tensor::maxpool2d(&folded, self.kernel, self.stride, self.pad)?;
        if let Some(tape) = tape {
            tape.push(TapeEntry::new(self.id, "maxpool", steps_of(x)).with(Category::Activations, x.clone()))?;
        }
        unfold(&lead, y)
    }

    fn backward(&mut self, grad: &Tensor, tape: &mut Tape, _ctx: &ExecCtx) -> Result<Tensor> {
        let entry = tape.pop(self.id, "maxpool")?;
        let x = entry.tensor(0)?;
        let (_, folded) = fold_spatial(x, "maxpool2d")?;
        let (_, arg) = tensor::maxpool2d(&folded, self.kernel, self.stride, self.pad)?;
        let gx = tensor::maxpool2d_backward(folded.shape(), &arg, grad)?;
        gx.into_shape(x.shape())
    }

    fn visit_params(&mut self, _f: &mut dyn FnMut(&mut Param)) {}

    fn profile(&self, input: &[usize], out: &mut Vec<LayerProfile>) -> Result<Vec<usize>> {
        spatial_shape_check("maxpool2d", input)?;
        let n = input.len();
        let (oh, ow) = tensor::pool_output_hw(input[n - 2], input[n - 1], self.kernel, self.stride, self.pad);
        let mut shape = input[..n - 2].to_vec();
        shape.extend([oh, ow]);
        out.push(LayerProfile {
            kind: "maxpool",
            output: shape.clone(),
            params: 0,
            macs: 0,
            weight_layer: false,
        });
        Ok(shape)
    }
}

/// Mean over spatial positions (`[..., C, H, W] → [..., C]`) or tokens
/// (`[..., N, D] → [..., D]`).
#[derive(Debug)]
pub struct GlobalMean {
    id: LayerId,
    pub layout: NormLayout,
}

impl GlobalMean {
    pub fn new(layout: NormLayout) -> Self {
        GlobalMean {
            id: LayerId::next(),
            layout,
        }
    }

    /// (outer, reduced, channels, channel_last)
    fn geometry(&self, shape: &[usize]) -> Result<(usize, usize, usize)> {
        let n = shape.len();
        match self.layout {
            NormLayout::Spatial => {
                spatial_shape_check("global_mean", shape)?;
                Ok((shape[..n - 2].iter().product(), shape[n - 2] * shape[n - 1], 1))
            }
            NormLayout::Features => {
                if n < 3 {
                    return Err(Error::dim("global_mean", "input rank", ">= 3", n));
                }
                Ok((shape[..n - 2].iter().product(), shape[n - 2], shape[n - 1]))
            }
        }
    }

    fn out_shape(&self, shape: &[usize]) -> Vec<usize> {
        let n = shape.len();
        match self.layout {
            NormLayout::Spatial => shape[..n - 2].to_vec(),
            NormLayout::Features => {
                let mut s = shape[..n - 2].to_vec();
                s.push(shape[n - 1]);
                s
            }
        }
    }
}

impl Module for GlobalMean {
    fn kind(&self) -> &'static str {
        "global_mean"
    }

    fn forward(&mut self, x: &Tensor, tape: Option<&mut Tape>, _ctx: &ExecCtx) -> Result<Tensor> {
        let (outer, reduced, inner) = self.geometry(x.shape())?;
        let mut out = vec![0.0; outer * inner];
        let inv = 1.0 / reduced as f64;
        for o in 0..outer {
            for r in 0..reduced {
                for i in 0..inner {
                    out[o * inner + i] += x.data()[(o * reduced + r) * inner + i];
                }
            }
        }
        out.iter_mut().for_each(|v| *v *= inv);
        if let Some(tape) = tape {
            tape.push(TapeEntry::new(self.id, "global_mean", steps_of(x)).with_meta(x.shape().to_vec()))?;
        }
        Tensor::from_vec(self.out_shape(x.shape()), out, x.precision())
    }

    fn backward(&mut self, grad: &Tensor, tape: &mut Tape, _ctx: &ExecCtx) -> Result<Tensor> {
        let entry = tape.pop(self.id, "global_mean")?;
        let shape = entry.meta;
        let (outer, reduced, inner) = self.geometry(&shape)?;
        if grad.len() != outer * inner {
            return Err(Error::dim("global_mean_backward", "grad", outer * inner, grad.len()));
        }
        let inv = 1.0 / reduced as f64;
        let mut gx = vec![0.0; outer * reduced * inner];
        for o in 0..outer {
            for r in 0..reduced {
                for i in 0..inner {
                    gx[(o * reduced + r) * inner + i] = grad.data()[o * inner + i] * inv;
                }
            }
        }
        Tensor::from_vec(shape, gx, grad.precision())
    }

    fn visit_params(&mut self, _f: &mut dyn FnMut(&mut Param)) {}

    fn profile(&self, input: &[usize], out: &mut Vec<LayerProfile>) -> Result<Vec<usize>> {
        self.geometry(input)?;
        let shape = self.out_shape(input);
        out.push(LayerProfile {
            kind: "global_mean",
            output: shape.clone(),
            params: 0,
            macs: 0,
            weight_layer: false,
        });
        Ok(shape)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Phase;
    use rand::SeedableRng;

    const P: Precision = Precision::F64;

    #[test]
    fn conv_layer_folds_time_and_batch() {
        let ctx = ExecCtx::new(P);
        let mut rng = ModelRng::seed_from_u64(1);
        let mut conv = Conv2d::new(2, 3, 3, 1, 1, false, &mut rng, P);
        let x = Tensor::ones(&[4, 2, 2, 5, 5], P);
        let mut tape = Tape::new(None);
        let y = conv.forward(&x, Some(&mut tape), &ctx).unwrap();
        assert_eq!(y.shape(), &[4, 2, 3, 5, 5]);
        let mut rows = Vec::new();
        conv.profile(x.shape(), &mut rows).unwrap();
        assert_eq!(rows[0].macs, ctx.ops.get(Phase::Forward));
        let g = conv.backward(&Tensor::ones(y.shape(), P), &mut tape, &ctx).unwrap();
        assert_eq!(g.shape(), x.shape());
        assert!(tape.is_empty());
    }

    #[test]
    fn replay_without_stash_is_an_error() {
        let ctx = ExecCtx::new(P);
        let mut bn = BatchNorm::new(2, NormLayout::Features, P);
        ctx.set_bn_mode(BnMode::Replay);
        let err = bn.forward(&Tensor::ones(&[1, 3, 2], P), None, &ctx).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }

    #[test]
    fn stash_is_charged_and_consumed() {
        let ctx = ExecCtx::new(P);
        let mut bn = BatchNorm::new(3, NormLayout::Spatial, P);
        ctx.set_stash_stats(true);
        let x = Tensor::from_vec(vec![2, 1, 3, 1, 2], (0..12).map(|v| v as f64 * 0.3).collect(), P).unwrap();
        let y = bn.forward(&x, None, &ctx).unwrap();
        assert_eq!(ctx.ledger.live(Category::Activations), 48);
        ctx.set_bn_mode(BnMode::Replay);
        let y2 = bn.forward(&x, None, &ctx).unwrap();
        assert_eq!(y, y2);
        assert_eq!(ctx.ledger.live(Category::Activations), 0);
        assert!(bn.stashed().is_none());
    }

    #[test]
    fn neuron_layer_reports_knife_edge() {
        let ctx = ExecCtx::new(P);
        let mut n = SpikingNeuron::new(NeuronParams::if_neuron(), 2);
        n.forward(&Tensor::from_vec(vec![2, 1], vec![0.3, 0.6999], P).unwrap(), None, &ctx).unwrap();
        // H = 0.3 then 0.9999; edges sit at 1.0 and 1.0 ± 0.5
        assert!((ctx.knife_edge() - 1e-4).abs() < 1e-12);
    }

    #[test]
    fn global_mean_over_tokens() {
        let ctx = ExecCtx::new(P);
        let mut m = GlobalMean::new(NormLayout::Features);
        let x = Tensor::from_vec(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 6.0], P).unwrap();
        let mut tape = Tape::new(None);
        let y = m.forward(&x, Some(&mut tape), &ctx).unwrap();
        assert_eq!(y.shape(), &[1, 1, 2]);
        assert_eq!(y.data(), &[2.0, 4.0]);
        let g = m.backward(&Tensor::ones(&[1, 1, 2], P), &mut tape, &ctx).unwrap();
        assert_eq!(g.data(), &[0.5; 4]);
    }
}
