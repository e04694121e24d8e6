use super::{
    AvgPool, BatchNorm, Conv2d, LayerProfile, MaxPool, MlpBlock, ModelRng, Module, NormLayout, Param, Sequential,
    SpikingNeuron, SsaBlock,
};
use crate::error::{Error, Result};
use crate::exec::ExecCtx;
use crate::neurons::NeuronParams;
use crate::tape::Tape;
use crate::tensor::{Precision, Tensor};

/// `BN(conv3×3(SN(BN(conv3×3(SN(x))))))` with equal input and output shapes.
#[derive(Debug)]
pub struct ResidualFn {
    pub channels: usize,
    body: Sequential,
}

impl ResidualFn {
    pub fn new(channels: usize, neuron: NeuronParams, timesteps: usize, rng: &mut ModelRng, precision: Precision) -> Self {
        let mut body = Sequential::default();
        for _ in 0..2 {
            body.push(SpikingNeuron::new(neuron, timesteps));
            body.push(Conv2d::new(channels, channels, 3, 1, 1, false, rng, precision));
            body.push(BatchNorm::new(channels, NormLayout::Spatial, precision));
        }
        ResidualFn { channels, body }
    }

    /// Builds from explicit 3×3 weights; both must map `C → C`.
    pub fn from_weights(w1: Tensor, w2: Tensor, neuron: NeuronParams, timesteps: usize) -> Result<Self> {
        let c = w1.dim(0);
        for w in [&w1, &w2] {
            if w.ndim() != 4 || w.dim(0) != c || w.dim(1) != c || w.dim(2) != 3 || w.dim(3) != 3 {
                return Err(Error::dim("residual_fn", "weight", format!("[{c}, {c}, 3, 3]"), format!("{:?}", w.shape())));
            }
        }
        let p = w1.precision();
        let mut body = Sequential::default();
        for w in [w1, w2] {
            body.push(SpikingNeuron::new(neuron, timesteps));
            body.push(Conv2d::from_weight(w, 1, 1));
            body.push(BatchNorm::new(c, NormLayout::Spatial, p));
        }
        Ok(ResidualFn { channels: c, body })
    }
}

impl Module for ResidualFn {
    fn kind(&self) -> &'static str {
        "residual_fn"
    }

    fn forward(&mut self, x: &Tensor, tape: Option<&mut Tape>, ctx: &ExecCtx) -> Result<Tensor> {
        if x.ndim() < 4 || x.dim(x.ndim() - 3) != self.channels {
            return Err(Error::dim("residual_fn", "channels", self.channels, format!("{:?}", x.shape())));
        }
        self.body.forward(x, tape, ctx)
    }

    fn backward(&mut self, grad: &Tensor, tape: &mut Tape, ctx: &ExecCtx) -> Result<Tensor> {
        self.body.backward(grad, tape, ctx)
    }

    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.body.visit_params(f);
    }

    fn visit_neurons(&mut self, f: &mut dyn FnMut(&mut SpikingNeuron)) {
        self.body.visit_neurons(f);
    }

    fn visit_norms(&mut self, f: &mut dyn FnMut(&mut BatchNorm)) {
        self.body.visit_norms(f);
    }

    fn profile(&self, input: &[usize], out: &mut Vec<LayerProfile>) -> Result<Vec<usize>> {
        self.body.profile(input, out)
    }
}

/// `avgpool 3×3/2 → conv 1×1 → BN → SN`. Never reversible.
#[derive(Debug)]
pub struct DownsampleBlock {
    pub in_channels: usize,
    pub out_channels: usize,
    body: Sequential,
}

impl DownsampleBlock {
    pub fn new(
        cin: usize,
        cout: usize,
        neuron: NeuronParams,
        timesteps: usize,
        rng: &mut ModelRng,
        precision: Precision,
    ) -> Self {
        Self::with_conv(Conv2d::new(cin, cout, 1, 1, 0, false, rng, precision), neuron, timesteps)
    }

    pub fn with_conv(conv: Conv2d, neuron: NeuronParams, timesteps: usize) -> Self {
        let (cout, cin) = (conv.weight.value.dim(0), conv.weight.value.dim(1));
        let p = conv.weight.value.precision();
        let mut body = Sequential::default();
        body.push(AvgPool::new(3, 2, 1));
        body.push(conv);
        body.push(BatchNorm::new(cout, NormLayout::Spatial, p));
        body.push(SpikingNeuron::new(neuron, timesteps));
        DownsampleBlock {
            in_channels: cin,
            out_channels: cout,
            body,
        }
    }
}

impl Module for DownsampleBlock {
    fn kind(&self) -> &'static str {
        "downsample"
    }

    fn forward(&mut self, x: &Tensor, tape: Option<&mut Tape>, ctx: &ExecCtx) -> Result<Tensor> {
        self.body.forward(x, tape, ctx)
    }

    fn backward(&mut self, grad: &Tensor, tape: &mut Tape, ctx: &ExecCtx) -> Result<Tensor> {
        self.body.backward(grad, tape, ctx)
    }

    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.body.visit_params(f);
    }

    fn visit_neurons(&mut self, f: &mut dyn FnMut(&mut SpikingNeuron)) {
        self.body.visit_neurons(f);
    }

    fn visit_norms(&mut self, f: &mut dyn FnMut(&mut BatchNorm)) {
        self.body.visit_norms(f);
    }

    fn profile(&self, input: &[usize], out: &mut Vec<LayerProfile>) -> Result<Vec<usize>> {
        self.body.profile(input, out)
    }
}

/// Membrane-shortcut residual block of the non-reversible ResNet
/// counterpart: `x + BN(conv(SN(BN(conv(SN(x))))))`.
#[derive(Debug)]
pub struct BasicBlock {
    body: Sequential,
    shortcut: Option<Sequential>,
}

impl BasicBlock {
    pub fn new(
        cin: usize,
        cout: usize,
        stride: usize,
        neuron: NeuronParams,
        timesteps: usize,
        rng: &mut ModelRng,
        precision: Precision,
    ) -> Self {
        let mut body = Sequential::default();
        body.push(SpikingNeuron::new(neuron, timesteps));
        body.push(Conv2d::new(cin, cout, 3, stride, 1, false, rng, precision));
        body.push(BatchNorm::new(cout, NormLayout::Spatial, precision));
        body.push(SpikingNeuron::new(neuron, timesteps));
        body.push(Conv2d::new(cout, cout, 3, 1, 1, false, rng, precision));
        body.push(BatchNorm::new(cout, NormLayout::Spatial, precision));
        let shortcut = (stride != 1 || cin != cout).then(|| {
            let mut s = Sequential::default();
            s.push(SpikingNeuron::new(neuron, timesteps));
            s.push(Conv2d::new(cin, cout, 1, stride, 0, false, rng, precision).uncounted());
            s.push(BatchNorm::new(cout, NormLayout::Spatial, precision));
            s
        });
        BasicBlock { body, shortcut }
    }
}

impl Module for BasicBlock {
    fn kind(&self) -> &'static str {
        "basic_block"
    }

    fn forward(&mut self, x: &Tensor, mut tape: Option<&mut Tape>, ctx: &ExecCtx) -> Result<Tensor> {
        let y = self.body.forward(x, tape.as_deref_mut(), ctx)?;
        let skip = match &mut self.shortcut {
            Some(s) => s.forward(x, tape, ctx)?,
            None => x.clone(),
        };
        y.add(&skip)
    }

    fn backward(&mut self, grad: &Tensor, tape: &mut Tape, ctx: &ExecCtx) -> Result<Tensor> {
        let g_skip = match &mut self.shortcut {
            Some(s) => s.backward(grad, tape, ctx)?,
            None => grad.clone(),
        };
        self.body.backward(grad, tape, ctx)?.add(&g_skip)
    }

    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.body.visit_params(f);
        if let Some(s) = &mut self.shortcut {
            s.visit_params(f);
        }
    }

    fn visit_neurons(&mut self, f: &mut dyn FnMut(&mut SpikingNeuron)) {
        self.body.visit_neurons(f);
        if let Some(s) = &mut self.shortcut {
            s.visit_neurons(f);
        }
    }

    fn visit_norms(&mut self, f: &mut dyn FnMut(&mut BatchNorm)) {
        self.body.visit_norms(f);
        if let Some(s) = &mut self.shortcut {
            s.visit_norms(f);
        }
    }

    fn profile(&self, input: &[usize], out: &mut Vec<LayerProfile>) -> Result<Vec<usize>> {
        let y = self.body.profile(input, out)?;
        if let Some(s) = &self.shortcut {
            s.profile(input, out)?;
        }
        Ok(y)
    }
}

/// Non-reversible transformer block: `x' = x + SSA(x)`, `y = x' + MLP(x')`.
#[derive(Debug)]
pub struct TransformerBlock {
    pub attn: SsaBlock,
    pub mlp: MlpBlock,
}

impl TransformerBlock {
    pub fn new(
        dim: usize,
        heads: usize,
        ratio: usize,
        neuron: NeuronParams,
        timesteps: usize,
        rng: &mut ModelRng,
        precision: Precision,
    ) -> Result<Self> {
        Ok(TransformerBlock {
            attn: SsaBlock::new(dim, heads, neuron, timesteps, rng, precision)?,
            mlp: MlpBlock::new(dim, ratio, neuron, timesteps, rng, precision),
        })
    }
}

impl Module for TransformerBlock {
    fn kind(&self) -> &'static str {
        "transformer_block"
    }

    fn forward(&mut self, x: &Tensor, mut tape: Option<&mut Tape>, ctx: &ExecCtx) -> Result<Tensor> {
        let h = x.add(&self.attn.forward(x, tape.as_deref_mut(), ctx)?)?;
        h.add(&self.mlp.forward(&h, tape, ctx)?)
    }

    fn backward(&mut self, grad: &Tensor, tape: &mut Tape, ctx: &ExecCtx) -> Result<Tensor> {
        let gh = grad.add(&self.mlp.backward(grad, tape, ctx)?)?;
        gh.add(&self.attn.backward(&gh, tape, ctx)?)
    }

    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.attn.visit_params(f);
        self.mlp.visit_params(f);
    }

    fn visit_neurons(&mut self, f: &mut dyn FnMut(&mut SpikingNeuron)) {
        self.attn.visit_neurons(f);
        self.mlp.visit_neurons(f);
    }

    fn visit_norms(&mut self, f: &mut dyn FnMut(&mut BatchNorm)) {
        self.attn.visit_norms(f);
        self.mlp.visit_norms(f);
    }

    fn profile(&self, input: &[usize], out: &mut Vec<LayerProfile>) -> Result<Vec<usize>> {
        self.attn.profile(input, out)?;
        self.mlp.profile(input, out)
    }
}

/// One tokenizer stage: `conv 3×3 → BN → SN`, optionally followed by
/// `maxpool 3×3/2`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct TokenizerStage {
    pub channels: usize,
    pub pool: bool,
}

/// Projects an image `[B, C, H, W]` to tokens `[T, B, N, D]`.
#[derive(Debug)]
pub struct SpikingTokenizer {
    pub timesteps: usize,
    pub embed_dim: usize,
    pub factor: usize,
    body: Sequential,
    grid: (usize, usize),
}

impl SpikingTokenizer {
    pub fn new(
        in_channels: usize,
        stages: &[TokenizerStage],
        neuron: NeuronParams,
        timesteps: usize,
        rng: &mut ModelRng,
        precision: Precision,
    ) -> Result<Self> {
        if stages.is_empty() {
            return Err(Error::InvalidConfig("tokenizer needs at least one stage".into()));
        }
        let mut body = Sequential::default();
        let mut cin = in_channels;
        let mut factor = 1;
        for s in stages {
            body.push(Conv2d::new(cin, s.channels, 3, 1, 1, false, rng, precision));
            body.push(BatchNorm::new(s.channels, NormLayout::Spatial, precision));
            body.push(SpikingNeuron::new(neuron, timesteps));
            if s.pool {
                body.push(MaxPool::new(3, 2, 1));
                factor *= 2;
            }
            cin = s.channels;
        }
        Ok(SpikingTokenizer {
            timesteps,
            embed_dim: cin,
            factor,
            body,
            grid: (1, 1),
        })
    }

    fn check_image(&self, shape: &[usize]) -> Result<()> {
        if shape.len() != 4 {
            return Err(Error::dim("tokenizer", "image rank", 4, shape.len()));
        }
        for (axis, extent) in [("height", shape[2]), ("width", shape[3])] {
            if extent % self.factor != 0 {
                return Err(Error::dim("tokenizer", axis, format!("a multiple of {}", self.factor), extent));
            }
        }
        Ok(())
    }
}

/// `[T, B, D, H, W] → [T, B, H·W, D]`.
pub(crate) fn to_tokens(x: &Tensor) -> Result<Tensor> {
    let s = x.shape();
    let (g, d, hw) = (s[0] * s[1], s[2], s[3] * s[4]);
    let mut out = vec![0.0; x.len()];
    for gi in 0..g {
        for c in 0..d {
            for p in 0..hw {
                out[(gi * hw + p) * d + c] = x.data()[(gi * d + c) * hw + p];
            }
        }
    }
    Tensor::from_vec(vec![s[0], s[1], hw, d], out, x.precision())
}

/// Inverse of [`to_tokens`] for a known spatial extent.
pub(crate) fn from_tokens(x: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let s = x.shape();
    let (g, hw, d) = (s[0] * s[1], s[2], s[3]);
    if hw != h * w {
        return Err(Error::dim("from_tokens", "tokens", h * w, hw));
    }
    let mut out = vec![0.0; x.len()];
    for gi in 0..g {
        for p in 0..hw {
            for c in 0..d {
                out[(gi * d + c) * hw + p] = x.data()[(gi * hw + p) * d + c];
            }
        }
    }
    Tensor::from_vec(vec![s[0], s[1], d, h, w], out, x.precision())
}

impl Module for SpikingTokenizer {
    fn kind(&self) -> &'static str {
        "tokenizer"
    }

    fn forward(&mut self, image: &Tensor, tape: Option<&mut Tape>, ctx: &ExecCtx) -> Result<Tensor> {
        self.check_image(image.shape())?;
        let x = image.repeat_leading(self.timesteps);
        let y = self.body.forward(&x, tape, ctx)?;
        self.grid = (y.dim(3), y.dim(4));
        to_tokens(&y)
    }

    fn backward(&mut self, grad: &Tensor, tape: &mut Tape, ctx: &ExecCtx) -> Result<Tensor> {
        let (h, w) = self.grid;
        let g = self.body.backward(&from_tokens(grad, h, w)?, tape, ctx)?;
        let inner = g.len() / g.dim(0);
        let mut acc = vec![0.0; inner];
        for t in 0..g.dim(0) {
            for (a, v) in acc.iter_mut().zip(&g.data()[t * inner..(t + 1) * inner]) {
                *a += v;
            }
        }
        Tensor::from_vec(g.shape()[1..].to_vec(), acc, g.precision())
    }

    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.body.visit_params(f);
    }

    fn visit_neurons(&mut self, f: &mut dyn FnMut(&mut SpikingNeuron)) {
        self.body.visit_neurons(f);
    }

    fn visit_norms(&mut self, f: &mut dyn FnMut(&mut BatchNorm)) {
        self.body.visit_norms(f);
    }

    fn profile(&self, input: &[usize], out: &mut Vec<LayerProfile>) -> Result<Vec<usize>> {
        self.check_image(input)?;
        let mut shape = vec![self.timesteps];
        shape.extend_from_slice(input);
        let y = self.body.profile(&shape, out)?;
        Ok(vec![y[0], y[1], y[3] * y[4], y[2]])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::BnMode;
    use rand::SeedableRng;

    const P: Precision = Precision::F64;

    #[test]
    fn residual_fn_is_equidimensional_and_replays() {
        let ctx = ExecCtx::new(P);
        let mut rng = ModelRng::seed_from_u64(2);
        let mut f = ResidualFn::new(3, NeuronParams::if_neuron(), 2, &mut rng, P);
        let x = super::super::uniform(&[2, 2, 3, 4, 4], 3.0, &mut rng, P);
        let y = f.forward(&x, None, &ctx).unwrap();
        assert_eq!(y.shape(), x.shape());
        super::super::reset_neurons(&mut f);
        assert_eq!(f.forward(&x, None, &ctx).unwrap(), y);
        assert!(ResidualFn::from_weights(Tensor::zeros(&[2, 3, 3, 3], P), Tensor::zeros(&[2, 2, 3, 3], P), NeuronParams::lif(), 1).is_err());
    }

    #[test]
    fn residual_fn_zero_input_with_zero_beta() {
        let ctx = ExecCtx::new(P);
        ctx.set_bn_mode(BnMode::Eval);
        let mut rng = ModelRng::seed_from_u64(4);
        let mut f = ResidualFn::new(2, NeuronParams::lif(), 1, &mut rng, P);
        let y = f.forward(&Tensor::zeros(&[1, 1, 2, 3, 3], P), None, &ctx).unwrap();
        assert_eq!(y.max_abs(), 0.0);
    }

    #[test]
    fn downsample_of_ones_with_identity_conv() {
        let ctx = ExecCtx::new(P);
        ctx.set_bn_mode(BnMode::Eval);
        let conv = Conv2d::from_weight(Tensor::ones(&[1, 1, 1, 1], P), 1, 0);
        // Threshold low enough that every pooled mean fires.
        let mut d = DownsampleBlock::with_conv(conv, NeuronParams::if_neuron().with_threshold(0.1), 1);
        let x = Tensor::ones(&[1, 1, 1, 4, 4], P);
        let mut rows = Vec::new();
        assert_eq!(d.profile(x.shape(), &mut rows).unwrap(), vec![1, 1, 1, 2, 2]);
        let y = d.forward(&x, None, &ctx).unwrap();
        assert_eq!(y.data(), &[1.0; 4]);
        let pooled = &rows[0];
        assert_eq!(pooled.output, vec![1, 1, 1, 2, 2]);
    }

    #[test]
    fn tokenizer_token_count_and_divisibility() {
        let ctx = ExecCtx::new(P);
        let mut rng = ModelRng::seed_from_u64(6);
        let stages = [
            TokenizerStage { channels: 4, pool: true },
            TokenizerStage { channels: 8, pool: true },
        ];
        let mut tok = SpikingTokenizer::new(1, &stages, NeuronParams::lif(), 3, &mut rng, P).unwrap();
        let y = tok.forward(&Tensor::zeros(&[2, 1, 8, 8], P), None, &ctx).unwrap();
        assert_eq!(y.shape(), &[3, 2, 4, 8]);
        assert_eq!(y.max_abs(), 0.0);
        assert!(tok.forward(&Tensor::zeros(&[2, 1, 6, 8], P), None, &ctx).is_err());
    }

    #[test]
    fn token_layout_round_trips() {
        let x = Tensor::from_vec(vec![1, 1, 2, 2, 3], (0..12).map(f64::from).collect(), P).unwrap();
        let t = to_tokens(&x).unwrap();
        assert_eq!(t.shape(), &[1, 1, 6, 2]);
        assert_eq!(&t.data()[..4], &[0.0, 6.0, 1.0, 7.0]);
        assert_eq!(from_tokens(&t, 2, 3).unwrap(), x);
    }
}
