//! Network builders: reversible ResNet and transformer families and their
//! single-stream counterparts.

use crate::error::{Error, Result};
use crate::exec::ExecCtx;
use crate::layers::{
    self, BasicBlock, BatchNorm, Conv2d, DownsampleBlock, GlobalMean, LayerProfile, Linear, MlpBlock, ModelRng, Module,
    NormLayout, Param, ResidualFn, Sequential, SpikingNeuron, SpikingTokenizer, SsaBlock, TokenizerStage,
    TransformerBlock,
};
use crate::neurons::NeuronParams;
use crate::reveng::{CouplingBlock, Engine, ReversibleSequence};
use crate::tape::Tape;
use crate::tensor::{Phase, Precision, Tensor};
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Resnet,
    Former,
}

impl Family {
    pub fn name(self) -> &'static str {
        match self {
            Family::Resnet => "resnet",
            Family::Former => "former",
        }
    }

    pub fn parse(s: &str) -> Option<Family> {
        match s {
            "resnet" => Some(Family::Resnet),
            "former" => Some(Family::Former),
            _ => None,
        }
    }
}

/// How two-stream outputs are fused when streams are duplicated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Merge {
    Average,
    Concat,
}

/// How a stage input becomes the two coupling streams.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StreamSplit {
    /// Halve the channel axis (`[..., C, H, W]`); outputs are concatenated.
    Channel,
    /// Both streams start as the full input; outputs are fused by `Merge`.
    Duplicate(Merge),
}

impl StreamSplit {
    fn split(self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        match self {
            StreamSplit::Channel => {
                let axis = x.ndim() - 3;
                let c = x.dim(axis);
                if c % 2 != 0 {
                    return Err(Error::dim("stream_split", "channels", "an even count", c));
                }
                x.split_axis(axis, c / 2)
            }
            StreamSplit::Duplicate(_) => Ok((x.clone(), x.clone())),
        }
    }

    fn merge(self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        match self {
            StreamSplit::Channel => Tensor::concat_axis(a, b, a.ndim() - 3),
            StreamSplit::Duplicate(Merge::Average) => Ok(a.add(b)?.scale(0.5)),
            StreamSplit::Duplicate(Merge::Concat) => Tensor::concat_axis(a, b, a.ndim() - 1),
        }
    }

    fn merge_backward(self, g: &Tensor) -> Result<(Tensor, Tensor)> {
        match self {
            StreamSplit::Channel => {
                let axis = g.ndim() - 3;
                g.split_axis(axis, g.dim(axis) / 2)
            }
            StreamSplit::Duplicate(Merge::Average) => {
                let h = g.scale(0.5);
                Ok((h.clone(), h))
            }
            StreamSplit::Duplicate(Merge::Concat) => {
                let axis = g.ndim() - 1;
                g.split_axis(axis, g.dim(axis) / 2)
            }
        }
    }

    fn split_backward(self, g1: &Tensor, g2: &Tensor) -> Result<Tensor> {
        match self {
            StreamSplit::Channel => Tensor::concat_axis(g1, g2, g1.ndim() - 3),
            StreamSplit::Duplicate(_) => g1.add(g2),
        }
    }

    fn stream_shape(self, input: &[usize]) -> Vec<usize> {
        let mut s = input.to_vec();
        if self == StreamSplit::Channel {
            let axis = s.len() - 3;
            s[axis] /= 2;
        }
        s
    }

    fn merged_shape(self, stream: &[usize]) -> Vec<usize> {
        let mut s = stream.to_vec();
        match self {
            StreamSplit::Channel => {
                let axis = s.len() - 3;
                s[axis] *= 2;
            }
            StreamSplit::Duplicate(Merge::Concat) => *s.last_mut().expect("rank >= 1") *= 2,
            StreamSplit::Duplicate(Merge::Average) => {}
        }
        s
    }
}

/// Repeats a static image over `T` steps (constant-current encoding).
#[derive(Debug)]
struct RepeatEncode {
    timesteps: usize,
}

impl Module for RepeatEncode {
    fn kind(&self) -> &'static str {
        "encode"
    }

    fn forward(&mut self, x: &Tensor, _tape: Option<&mut Tape>, _ctx: &ExecCtx) -> Result<Tensor> {
        Ok(x.repeat_leading(self.timesteps))
    }

    fn backward(&mut self, grad: &Tensor, _tape: &mut Tape, _ctx: &ExecCtx) -> Result<Tensor> {
        let inner = grad.len() / grad.dim(0);
        let mut acc = vec![0.0; inner];
        for t in 0..grad.dim(0) {
            for (a, v) in acc.iter_mut().zip(&grad.data()[t * inner..(t + 1) * inner]) {
                *a += v;
            }
        }
        Tensor::from_vec(grad.shape()[1..].to_vec(), acc, grad.precision())
    }

    fn visit_params(&mut self, _f: &mut dyn FnMut(&mut Param)) {}

    fn profile(&self, input: &[usize], _out: &mut Vec<LayerProfile>) -> Result<Vec<usize>> {
        let mut s = vec![self.timesteps];
        s.extend_from_slice(input);
        Ok(s)
    }
}

#[derive(Debug)]
pub enum Component {
    /// Always cached; never reversed.
    Plain(Box<dyn Module>),
    Reversible {
        seq: ReversibleSequence,
        split: StreamSplit,
    },
}

/// A built network mapping images `[B, C, H, W]` to per-step logits
/// `[T, B, K]`.
#[derive(Debug)]
pub struct Network {
    pub name: String,
    pub family: Family,
    pub reversible: bool,
    pub timesteps: usize,
    pub num_classes: usize,
    /// `[C, H, W]` expected per image.
    pub input_shape: [usize; 3],
    pub components: Vec<Component>,
    tapes: Vec<Option<Tape>>,
}

impl Network {
    fn new(
        name: String,
        family: Family,
        timesteps: usize,
        num_classes: usize,
        input_shape: [usize; 3],
        components: Vec<Component>,
    ) -> Self {
        let reversible = components.iter().any(|c| matches!(c, Component::Reversible { .. }));
        Network {
            name,
            family,
            reversible,
            timesteps,
            num_classes,
            input_shape,
            components,
            tapes: Vec::new(),
        }
    }

    pub fn reset(&mut self) {
        for c in &mut self.components {
            match c {
                Component::Plain(m) => layers::reset_neurons(m.as_mut()),
                Component::Reversible { seq, .. } => seq.reset_all(),
            }
        }
    }

    /// Drops every cached tape and stashed statistic.
    pub fn clear(&mut self) {
        self.tapes.clear();
        for c in &mut self.components {
            if let Component::Reversible { seq, .. } = c {
                seq.clear();
            }
        }
    }

    pub fn reversible_sequences(&self) -> usize {
        self.components
            .iter()
            .filter(|c| matches!(c, Component::Reversible { .. }))
            .count()
    }

    fn check_image(&self, x: &Tensor) -> Result<()> {
        let s = x.shape();
        if s.len() != 4 || s[1..] != self.input_shape {
            return Err(Error::dim(
                "network",
                "input",
                format!("[B, {}, {}, {}]", self.input_shape[0], self.input_shape[1], self.input_shape[2]),
                format!("{s:?}"),
            ));
        }
        Ok(())
    }

    /// Resets every neuron and runs the network. With `record`, everything
    /// the engine's backward pass needs is kept.
    pub fn forward(&mut self, image: &Tensor, engine: Engine, record: bool, ctx: &ExecCtx) -> Result<Tensor> {
        self.check_image(image)?;
        self.clear();
        self.reset();
        ctx.set_phase(Phase::Forward);
        let mut x = image.clone();
        for c in &mut self.components {
            match c {
                Component::Plain(m) => {
                    let mut tape = record.then(|| Tape::tracked(&ctx.ledger));
                    x = m.forward(&x, tape.as_mut(), ctx)?;
                    self.tapes.push(tape);
                }
                Component::Reversible { seq, split } => {
                    let (x1, x2) = split.split(&x)?;
                    let (y1, y2) = seq.forward(&x1, &x2, engine, record, ctx)?;
                    x = split.merge(&y1, &y2)?;
                    self.tapes.push(None);
                }
            }
        }
        Ok(x)
    }

    /// Backpropagates `d_logits` through the recorded forward; parameter
    /// gradients accumulate.
    pub fn backward(&mut self, d_logits: &Tensor, engine: Engine, ctx: &ExecCtx) -> Result<Tensor> {
        if self.tapes.len() != self.components.len() {
            return Err(Error::Contract("network backward without a recorded forward".into()));
        }
        let mut g = d_logits.clone();
        for (c, tape) in self.components.iter_mut().zip(self.tapes.drain(..)).rev() {
            ctx.set_phase(Phase::Backward);
            match c {
                Component::Plain(m) => {
                    let mut tape =
                        tape.ok_or_else(|| Error::Contract("network backward after an unrecorded forward".into()))?;
                    g = m.backward(&g, &mut tape, ctx)?;
                }
                Component::Reversible { seq, split } => {
                    let (g1, g2) = split.merge_backward(&g)?;
                    let (d1, d2) = seq.backward(&g1, &g2, engine, ctx)?;
                    g = split.split_backward(&d1, &d2)?;
                }
            }
        }
        ctx.set_phase(Phase::Forward);
        Ok(g)
    }

    pub fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param)) {
        for c in &mut self.components {
            match c {
                Component::Plain(m) => m.visit_params(f),
                Component::Reversible { seq, .. } => seq.visit_params(f),
            }
        }
    }

    pub fn visit_neurons(&mut self, f: &mut dyn FnMut(&mut SpikingNeuron)) {
        for c in &mut self.components {
            match c {
                Component::Plain(m) => m.visit_neurons(f),
                Component::Reversible { seq, .. } => seq.visit_neurons(f),
            }
        }
    }

    pub fn visit_norms(&mut self, f: &mut dyn FnMut(&mut BatchNorm)) {
        for c in &mut self.components {
            match c {
                Component::Plain(m) => m.visit_norms(f),
                Component::Reversible { seq, .. } => seq.visit_norms(f),
            }
        }
    }

    pub fn zero_grads(&mut self) {
        self.visit_params(&mut Param::zero_grad);
    }

    pub fn grads(&mut self) -> Vec<Tensor> {
        let mut out = Vec::new();
        self.visit_params(&mut |p| out.push(p.grad.clone()));
        out
    }

    pub fn values(&mut self) -> Vec<Tensor> {
        let mut out = Vec::new();
        self.visit_params(&mut |p| out.push(p.value.clone()));
        out
    }

    pub fn param_count(&mut self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |p| n += p.numel());
        n
    }

    /// Per-layer summary for a batch of `batch` images.
    pub fn profile(&self, batch: usize) -> Result<Vec<LayerProfile>> {
        let mut out = Vec::new();
        let mut shape = vec![batch, self.input_shape[0], self.input_shape[1], self.input_shape[2]];
        for c in &self.components {
            shape = match c {
                Component::Plain(m) => m.profile(&shape, &mut out)?,
                Component::Reversible { seq, split } => {
                    let stream = seq.profile(&split.stream_shape(&shape), &mut out)?;
                    split.merged_shape(&stream)
                }
            };
        }
        Ok(out)
    }

    /// Forward multiply-accumulates for one image over all `T` steps.
    pub fn forward_macs(&self) -> Result<u64> {
        Ok(self.profile(1)?.iter().map(|r| r.macs).sum())
    }

    /// Number of weight layers (convolutions and fully connected layers on
    /// the main path).
    pub fn layer_count(&self) -> Result<usize> {
        Ok(self.profile(1)?.iter().filter(|r| r.weight_layer).count())
    }
}

/// Reversible ResNet configuration. Channel widths are per stream; each
/// stage carries twice that many channels in total.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResNetConfig {
    pub blocks: Vec<usize>,
    pub stream_channels: Vec<usize>,
    pub stem_channels: usize,
    pub stem_stride: usize,
    pub in_channels: usize,
    pub image_size: usize,
    pub num_classes: usize,
    pub timesteps: usize,
    pub neuron: NeuronParams,
}

impl ResNetConfig {
    fn full(blocks: Vec<usize>, num_classes: usize) -> Self {
        ResNetConfig {
            blocks,
            stream_channels: vec![64, 128, 256, 448],
            stem_channels: 128,
            stem_stride: 1,
            in_channels: 3,
            image_size: 32,
            num_classes,
            timesteps: 4,
            neuron: NeuronParams::if_neuron(),
        }
    }

    pub fn revsresnet21(num_classes: usize) -> Self {
        Self::full(vec![1, 1, 1, 1], num_classes)
    }

    pub fn revsresnet37(num_classes: usize) -> Self {
        Self::full(vec![1, 2, 3, 2], num_classes)
    }

    /// Three-stage variant for event data.
    pub fn revsresnet24(num_classes: usize) -> Self {
        ResNetConfig {
            blocks: vec![1, 2, 2],
            stream_channels: vec![16, 32, 48],
            stem_channels: 32,
            ..Self::full(vec![], num_classes)
        }
    }

    /// Small network for training and verification at desk scale.
    pub fn desk(blocks: Vec<usize>, stream_channels: Vec<usize>, image_size: usize, in_channels: usize, num_classes: usize, timesteps: usize) -> Self {
        ResNetConfig {
            stem_channels: 2 * stream_channels.first().copied().unwrap_or(1),
            blocks,
            stream_channels,
            stem_stride: 1,
            in_channels,
            image_size,
            num_classes,
            timesteps,
            neuron: NeuronParams::if_neuron(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.blocks.is_empty() || self.blocks.len() != self.stream_channels.len() {
            return Err(Error::InvalidConfig(format!(
                "blocks ({}) and stream_channels ({}) must be non-empty and equally long",
                self.blocks.len(),
                self.stream_channels.len()
            )));
        }
        if self.blocks.contains(&0) || self.stream_channels.contains(&0) {
            return Err(Error::InvalidConfig("blocks and stream_channels must be positive".into()));
        }
        if self.stem_channels != 2 * self.stream_channels[0] {
            return Err(Error::InvalidConfig(format!(
                "stem_channels ({}) must equal twice the first stream width ({})",
                self.stem_channels, self.stream_channels[0]
            )));
        }
        if self.timesteps == 0 || self.num_classes == 0 || self.image_size == 0 || self.stem_stride == 0 {
            return Err(Error::InvalidConfig("timesteps, num_classes, image_size and stem_stride must be positive".into()));
        }
        self.neuron.validate()
    }
}

/// Reversible transformer configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FormerConfig {
    pub blocks: usize,
    pub dim: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub tokenizer: Vec<TokenizerStage>,
    pub in_channels: usize,
    pub image_size: usize,
    pub num_classes: usize,
    pub timesteps: usize,
    pub neuron: NeuronParams,
    pub merge: Merge,
}

impl FormerConfig {
    /// `L` blocks of width `D` with the five-stage tokenizer.
    pub fn full(blocks: usize, dim: usize, num_classes: usize) -> Self {
        let widths = [dim / 8, dim / 4, dim / 2, dim, dim];
        FormerConfig {
            blocks,
            dim,
            heads: 12,
            mlp_ratio: 4,
            tokenizer: widths
                .iter()
                .enumerate()
                .map(|(i, &channels)| TokenizerStage { channels, pool: i == 2 || i == 3 })
                .collect(),
            in_channels: 3,
            image_size: 32,
            num_classes,
            timesteps: 4,
            neuron: NeuronParams::lif(),
            merge: Merge::Average,
        }
    }

    /// Two pooled tokenizer stages of widths `dim/2` and `dim`.
    pub fn desk(blocks: usize, dim: usize, heads: usize, image_size: usize, in_channels: usize, num_classes: usize, timesteps: usize) -> Self {
        FormerConfig {
            blocks,
            dim,
            heads,
            mlp_ratio: 4,
            tokenizer: vec![
                TokenizerStage { channels: (dim / 2).max(1), pool: true },
                TokenizerStage { channels: dim, pool: true },
            ],
            in_channels,
            image_size,
            num_classes,
            timesteps,
            neuron: NeuronParams::lif(),
            merge: Merge::Average,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.blocks == 0 || self.dim == 0 || self.mlp_ratio == 0 {
            return Err(Error::InvalidConfig("blocks, dim and mlp_ratio must be positive".into()));
        }
        if self.heads == 0 || self.dim % self.heads != 0 {
            return Err(Error::InvalidConfig(format!("dim {} is not divisible by heads {}", self.dim, self.heads)));
        }
        match self.tokenizer.last() {
            Some(s) if s.channels == self.dim => {}
            _ => return Err(Error::InvalidConfig("the last tokenizer stage must output dim channels".into())),
        }
        let factor = 1usize << self.tokenizer.iter().filter(|s| s.pool).count();
        if self.image_size % factor != 0 {
            return Err(Error::InvalidConfig(format!(
                "image_size {} is not divisible by the tokenizer downsampling factor {factor}",
                self.image_size
            )));
        }
        if self.timesteps == 0 || self.num_classes == 0 {
            return Err(Error::InvalidConfig("timesteps and num_classes must be positive".into()));
        }
        self.neuron.validate()
    }
}

fn resnet_stem(cfg: &ResNetConfig, rng: &mut ModelRng, p: Precision) -> Sequential {
    let mut stem = Sequential::default();
    stem.push(RepeatEncode { timesteps: cfg.timesteps });
    stem.push(Conv2d::new(cfg.in_channels, cfg.stem_channels, 3, cfg.stem_stride, 1, false, rng, p));
    stem.push(BatchNorm::new(cfg.stem_channels, NormLayout::Spatial, p));
    stem
}

fn resnet_head(channels: usize, num_classes: usize, rng: &mut ModelRng, p: Precision) -> Sequential {
    let mut head = Sequential::default();
    head.push(GlobalMean::new(NormLayout::Spatial));
    head.push(Linear::new(channels, num_classes, true, rng, p));
    head
}

pub fn build_revsresnet(cfg: &ResNetConfig, seed: u64, precision: Precision) -> Result<Network> {
    cfg.validate()?;
    let mut rng = ModelRng::seed_from_u64(seed);
    let (n, t) = (cfg.neuron, cfg.timesteps);
    let mut comps = vec![Component::Plain(Box::new(resnet_stem(cfg, &mut rng, precision)))];
    let mut total = cfg.stem_channels;
    for (i, (&blocks, &c)) in cfg.blocks.iter().zip(&cfg.stream_channels).enumerate() {
        if i > 0 {
            let d = DownsampleBlock::new(total, 2 * c, n, t, &mut rng, precision);
            comps.push(Component::Plain(Box::new(d)));
        }
        let blocks = (0..blocks)
            .map(|_| {
                CouplingBlock::new(
                    ResidualFn::new(c, n, t, &mut rng, precision),
                    ResidualFn::new(c, n, t, &mut rng, precision),
                )
            })
            .collect();
        comps.push(Component::Reversible {
            seq: ReversibleSequence::new(blocks),
            split: StreamSplit::Channel,
        });
        total = 2 * c;
    }
    comps.push(Component::Plain(Box::new(resnet_head(total, cfg.num_classes, &mut rng, precision))));
    let blocks: Vec<String> = cfg.blocks.iter().map(usize::to_string).collect();
    let mut net = Network::new(
        String::new(),
        Family::Resnet,
        t,
        cfg.num_classes,
        [cfg.in_channels, cfg.image_size, cfg.image_size],
        comps,
    );
    net.name = format!("RevSResNet{} ({})", net.layer_count()?, blocks.join("-"));
    Ok(net)
}

/// Single-stream counterpart with membrane-shortcut basic blocks. Stage
/// widths are total channels; the first block of stages 2+ strides by 2.
pub fn build_ms_resnet(
    blocks: &[usize],
    channels: &[usize],
    base: &ResNetConfig,
    seed: u64,
    precision: Precision,
) -> Result<Network> {
    if blocks.is_empty() || blocks.len() != channels.len() || blocks.contains(&0) || channels.contains(&0) {
        return Err(Error::InvalidConfig("blocks and channels must be non-empty, positive and equally long".into()));
    }
    let mut rng = ModelRng::seed_from_u64(seed);
    let (n, t) = (base.neuron, base.timesteps);
    let stem_cfg = ResNetConfig {
        stem_channels: channels[0],
        ..base.clone()
    };
    let mut comps = vec![Component::Plain(Box::new(resnet_stem(&stem_cfg, &mut rng, precision)))];
    let mut body = Sequential::default();
    let mut cin = channels[0];
    for (i, (&nb, &c)) in blocks.iter().zip(channels).enumerate() {
        for j in 0..nb {
            let stride = if i > 0 && j == 0 { 2 } else { 1 };
            body.push(BasicBlock::new(cin, c, stride, n, t, &mut rng, precision));
            cin = c;
        }
    }
    comps.push(Component::Plain(Box::new(body)));
    comps.push(Component::Plain(Box::new(resnet_head(cin, base.num_classes, &mut rng, precision))));
    let mut net = Network::new(
        String::new(),
        Family::Resnet,
        t,
        base.num_classes,
        [base.in_channels, base.image_size, base.image_size],
        comps,
    );
    let names: Vec<String> = blocks.iter().map(usize::to_string).collect();
    net.name = format!("MS-ResNet{} ({})", net.layer_count()?, names.join("-"));
    Ok(net)
}

/// Parameter count of [`build_ms_resnet`] without building it.
pub fn ms_resnet_params(blocks: &[usize], channels: &[usize], in_channels: usize, num_classes: usize) -> usize {
    let mut n = 9 * in_channels * channels[0] + 2 * channels[0];
    let mut cin = channels[0];
    for (i, (&nb, &c)) in blocks.iter().zip(channels).enumerate() {
        for j in 0..nb {
            n += 9 * cin * c + 9 * c * c + 4 * c;
            if (i > 0 && j == 0) || cin != c {
                n += cin * c + 2 * c;
            }
            cin = c;
        }
    }
    n + cin * num_classes + num_classes
}

/// Counterpart paired with a reversible config: two single-stream blocks
/// per coupling block, stage widths equal to the stream widths except the
/// last, which is chosen so the parameter counts match.
pub fn build_resnet_counterpart(cfg: &ResNetConfig, seed: u64, precision: Precision) -> Result<Network> {
    cfg.validate()?;
    let blocks: Vec<usize> = cfg.blocks.iter().map(|b| 2 * b).collect();
    let target = build_revsresnet(cfg, seed, precision)?.param_count() as f64;
    let mut channels = cfg.stream_channels.clone();
    let last = *channels.last().expect("validated non-empty");
    let best = (last..=4 * last)
        .min_by_key(|&w| {
            *channels.last_mut().expect("non-empty") = w;
            let n = ms_resnet_params(&blocks, &channels, cfg.in_channels, cfg.num_classes) as f64;
            ((n - target).abs() * 1e3 / target) as u64
        })
        .unwrap_or(last);
    *channels.last_mut().expect("non-empty") = best;
    build_ms_resnet(&blocks, &channels, cfg, seed, precision)
}

fn former_head(cfg: &FormerConfig, rng: &mut ModelRng, p: Precision) -> Sequential {
    let width = match cfg.merge {
        Merge::Average => cfg.dim,
        Merge::Concat => 2 * cfg.dim,
    };
    let mut head = Sequential::default();
    head.push(SpikingNeuron::new(cfg.neuron, cfg.timesteps));
    head.push(GlobalMean::new(NormLayout::Features));
    head.push(Linear::new(width, cfg.num_classes, true, rng, p));
    head
}

pub fn build_revsformer(cfg: &FormerConfig, seed: u64, precision: Precision) -> Result<Network> {
    cfg.validate()?;
    let mut rng = ModelRng::seed_from_u64(seed);
    let (n, t) = (cfg.neuron, cfg.timesteps);
    let tok = SpikingTokenizer::new(cfg.in_channels, &cfg.tokenizer, n, t, &mut rng, precision)?;
    let mut blocks = Vec::with_capacity(cfg.blocks);
    for _ in 0..cfg.blocks {
        let f = SsaBlock::new(cfg.dim, cfg.heads, n, t, &mut rng, precision)?;
        let g = MlpBlock::new(cfg.dim, cfg.mlp_ratio, n, t, &mut rng, precision);
        blocks.push(CouplingBlock::new(f, g));
    }
    let comps = vec![
        Component::Plain(Box::new(tok)),
        Component::Reversible {
            seq: ReversibleSequence::new(blocks),
            split: StreamSplit::Duplicate(cfg.merge),
        },
        Component::Plain(Box::new(former_head(cfg, &mut rng, precision))),
    ];
    Ok(Network::new(
        format!("RevSFormer-{}-{}", cfg.blocks, cfg.dim),
        Family::Former,
        t,
        cfg.num_classes,
        [cfg.in_channels, cfg.image_size, cfg.image_size],
        comps,
    ))
}

/// Single-stream transformer with the same tokenizer, depth and width.
pub fn build_former_counterpart(cfg: &FormerConfig, seed: u64, precision: Precision) -> Result<Network> {
    cfg.validate()?;
    let mut rng = ModelRng::seed_from_u64(seed);
    let (n, t) = (cfg.neuron, cfg.timesteps);
    let tok = SpikingTokenizer::new(cfg.in_channels, &cfg.tokenizer, n, t, &mut rng, precision)?;
    let mut body = Sequential::default();
    for _ in 0..cfg.blocks {
        body.push(TransformerBlock::new(cfg.dim, cfg.heads, cfg.mlp_ratio, n, t, &mut rng, precision)?);
    }
    let head_cfg = FormerConfig {
        merge: Merge::Average,
        ..cfg.clone()
    };
    let comps = vec![
        Component::Plain(Box::new(tok)),
        Component::Plain(Box::new(body)),
        Component::Plain(Box::new(former_head(&head_cfg, &mut rng, precision))),
    ];
    Ok(Network::new(
        format!("Spikingformer-{}-{}", cfg.blocks, cfg.dim),
        Family::Former,
        t,
        cfg.num_classes,
        [cfg.in_channels, cfg.image_size, cfg.image_size],
        comps,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    const P: Precision = Precision::F64;

    #[test]
    fn desk_resnet_shapes_and_counts() {
        let cfg = ResNetConfig::desk(vec![1, 1], vec![2, 4], 8, 1, 3, 2);
        let mut net = build_revsresnet(&cfg, 1, P).unwrap();
        // stem, head and one downsample conv plus four convs per coupling block
        assert_eq!(net.layer_count().unwrap(), 3 + 4 * 2);
        assert_eq!(net.reversible_sequences(), 2);
        let ctx = ExecCtx::new(P);
        let x = Tensor::full(&[2, 1, 8, 8], 0.7, P);
        let logits = net.forward(&x, Engine::Reversible, true, &ctx).unwrap();
        assert_eq!(logits.shape(), &[2, 2, 3]);
        let g = net.backward(&Tensor::ones(logits.shape(), P), Engine::Reversible, &ctx).unwrap();
        assert_eq!(g.shape(), x.shape());
        assert!(net.param_count() > 0);
    }

    #[test]
    fn desk_former_has_one_sequence() {
        let cfg = FormerConfig::desk(2, 8, 2, 8, 1, 3, 2);
        let mut net = build_revsformer(&cfg, 1, P).unwrap();
        assert_eq!(net.reversible_sequences(), 1);
        let ctx = ExecCtx::new(P);
        let logits = net.forward(&Tensor::full(&[1, 1, 8, 8], 1.5, P), Engine::Oracle, true, &ctx).unwrap();
        assert_eq!(logits.shape(), &[2, 1, 3]);
        net.backward(&Tensor::ones(logits.shape(), P), Engine::Oracle, &ctx).unwrap();
    }

    #[test]
    fn wrong_image_shape_is_rejected() {
        let cfg = ResNetConfig::desk(vec![1], vec![2], 8, 1, 3, 2);
        let mut net = build_revsresnet(&cfg, 1, P).unwrap();
        let err = net.forward(&Tensor::zeros(&[1, 1, 4, 4], P), Engine::Oracle, false, &ExecCtx::new(P));
        assert!(matches!(err, Err(Error::Dimension { .. })));
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut cfg = ResNetConfig::desk(vec![1, 1], vec![2], 8, 1, 3, 2);
        assert!(cfg.validate().is_err());
        cfg = ResNetConfig::desk(vec![1], vec![2], 8, 1, 3, 2);
        cfg.stem_channels = 3;
        assert!(cfg.validate().is_err());
        let f = FormerConfig::desk(1, 10, 3, 8, 1, 2, 1);
        assert!(f.validate().is_err());
        let f = FormerConfig::desk(1, 8, 2, 6, 1, 2, 1);
        assert!(f.validate().is_err());
    }
}
