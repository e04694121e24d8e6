//! Additive coupling over two streams and the forward, reset, reverse,
//! backward schedule.
//!
//! A [`CouplingBlock`] computes `Y1 = X1 + F(X2)`, `Y2 = X2 + G(Y1)` over
//! whole `[T, B, ...]` sequences. Its inverse rebuilds the inputs, and while
//! doing so records the tapes needed for backpropagation through time.

use crate::error::{Error, Result};
use crate::exec::{ExecCtx, Fault};
use crate::layers::{self, BatchNorm, LayerProfile, Module, Param, SpikingNeuron};
use crate::memtrack::{Allocation, Category};
use crate::tape::Tape;
use crate::tensor::{BnMode, Phase, Tensor};
use serde::{Deserialize, Serialize};

/// How a training step obtains the values its backward pass needs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Engine {
    /// Cache every intermediate during the forward pass.
    Oracle,
    /// Cache only the sequence output and rebuild each block in reverse.
    Reversible,
}

impl Engine {
    pub fn name(self) -> &'static str {
        match self {
            Engine::Oracle => "oracle",
            Engine::Reversible => "reversible",
        }
    }

    pub fn parse(s: &str) -> Option<Engine> {
        match s {
            "oracle" => Some(Engine::Oracle),
            "reversible" => Some(Engine::Reversible),
            _ => None,
        }
    }
}

/// The F and G tapes of one coupling block.
#[derive(Debug, Default)]
pub struct BlockTape {
    pub f: Tape,
    pub g: Tape,
}

impl BlockTape {
    pub fn tracked(ctx: &ExecCtx) -> Self {
        BlockTape {
            f: Tape::tracked(&ctx.ledger),
            g: Tape::tracked(&ctx.ledger),
        }
    }

    pub fn len(&self) -> usize {
        self.f.len() + self.g.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug)]
pub struct CouplingBlock {
    pub f: Box<dyn Module>,
    pub g: Box<dyn Module>,
}

impl CouplingBlock {
    pub fn new(f: impl Module + 'static, g: impl Module + 'static) -> Self {
        CouplingBlock {
            f: Box::new(f),
            g: Box::new(g),
        }
    }

    /// Returns every neuron in F and G to its initial state.
    pub fn reset_all(&mut self) {
        layers::reset_neurons(self.f.as_mut());
        layers::reset_neurons(self.g.as_mut());
    }

    pub fn is_fresh(&mut self) -> bool {
        layers::neurons_fresh(self.f.as_mut()) && layers::neurons_fresh(self.g.as_mut())
    }

    /// Rewinds neuron clocks while keeping their potentials.
    fn rewind_only(&mut self) {
        self.f.visit_neurons(&mut SpikingNeuron::rewind_clock);
        self.g.visit_neurons(&mut SpikingNeuron::rewind_clock);
    }

    fn check_streams(a: &Tensor, b: &Tensor, op: &'static str) -> Result<()> {
        if a.shape() != b.shape() {
            return Err(Error::dim(op, "stream", format!("{:?}", a.shape()), format!("{:?}", b.shape())));
        }
        Ok(())
    }

    fn check_fresh(&mut self, op: &str) -> Result<()> {
        if !self.is_fresh() {
            return Err(Error::UnresetState(format!("{op} requires freshly reset neurons")));
        }
        Ok(())
    }

    /// `Y1 = X1 + F(X2)`, `Y2 = X2 + G(Y1)`.
    pub fn forward(
        &mut self,
        x1: &Tensor,
        x2: &Tensor,
        tape: Option<&mut BlockTape>,
        ctx: &ExecCtx,
    ) -> Result<(Tensor, Tensor)> {
        Self::check_streams(x1, x2, "coupling_forward")?;
        self.check_fresh("coupling forward")?;
        let (tf, tg) = match tape {
            Some(t) => (Some(&mut t.f), Some(&mut t.g)),
            None => (None, None),
        };
        let fx = self.f.forward(x2, tf, ctx)?;
        Self::check_streams(x2, &fx, "coupling_forward")?;
        let y1 = x1.add(&fx)?;
        let gy = self.g.forward(&y1, tg, ctx)?;
        Self::check_streams(&y1, &gy, "coupling_forward")?;
        let y2 = x2.add(&gy)?;
        Ok((y1, y2))
    }

    /// `X2 = Y2 − G(Y1)`, `X1 = Y1 − F(X2)`, with normalization replaying
    /// the statistics stashed by the forward pass.
    pub fn reverse(
        &mut self,
        y1: &Tensor,
        y2: &Tensor,
        tape: Option<&mut BlockTape>,
        ctx: &ExecCtx,
    ) -> Result<(Tensor, Tensor)> {
        Self::check_streams(y1, y2, "coupling_reverse")?;
        self.check_fresh("coupling reverse")?;
        let (tf, tg) = match tape {
            Some(t) => (Some(&mut t.f), Some(&mut t.g)),
            None => (None, None),
        };
        let saved = ctx.bn_mode();
        ctx.set_bn_mode(BnMode::Replay);
        let result = (|| {
            let x2 = y2.sub(&self.g.forward(y1, tg, ctx)?)?;
            let x1 = y1.sub(&self.f.forward(&x2, tf, ctx)?)?;
            Ok((x1, x2))
        })();
        ctx.set_bn_mode(saved);
        result
    }

    /// Backpropagates `(dY1, dY2)` through the block using `tape`.
    pub fn backward(
        &mut self,
        tape: &mut BlockTape,
        dy1: &Tensor,
        dy2: &Tensor,
        ctx: &ExecCtx,
    ) -> Result<(Tensor, Tensor)> {
        let dg_in = self.g.backward(dy2, &mut tape.g, ctx)?;
        let dy1_total = dy1.add(&dg_in)?;
        let df_in = self.f.backward(&dy1_total, &mut tape.f, ctx)?;
        let dx2 = dy2.add(&df_in)?;
        if !tape.is_empty() {
            return Err(Error::TapeMismatch(format!("{} entries left after block backward", tape.len())));
        }
        Ok((dy1_total, dx2))
    }
}

impl CouplingBlock {
    pub fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.f.visit_params(f);
        self.g.visit_params(f);
    }

    pub fn visit_neurons(&mut self, f: &mut dyn FnMut(&mut SpikingNeuron)) {
        self.f.visit_neurons(f);
        self.g.visit_neurons(f);
    }

    pub fn visit_norms(&mut self, f: &mut dyn FnMut(&mut BatchNorm)) {
        self.f.visit_norms(f);
        self.g.visit_norms(f);
    }

    pub fn profile(&self, stream: &[usize], out: &mut Vec<LayerProfile>) -> Result<Vec<usize>> {
        let fs = self.f.profile(stream, out)?;
        let gs = self.g.profile(stream, out)?;
        if fs != stream || gs != stream {
            return Err(Error::dim("coupling_block", "F/G output", format!("{stream:?}"), format!("{fs:?} / {gs:?}")));
        }
        Ok(fs)
    }
}

/// Forward without caching; batch statistics are stashed for the reverse.
pub fn rev_forward(block: &mut CouplingBlock, x1: &Tensor, x2: &Tensor, ctx: &ExecCtx) -> Result<(Tensor, Tensor)> {
    let saved = ctx.stash_stats();
    ctx.set_stash_stats(true);
    let out = block.forward(x1, x2, None, ctx);
    ctx.set_stash_stats(saved);
    out
}

/// Rebuilds the block inputs and records the tapes for its backward pass.
pub fn rev_reverse(
    block: &mut CouplingBlock,
    y1: &Tensor,
    y2: &Tensor,
    ctx: &ExecCtx,
) -> Result<(Tensor, Tensor, BlockTape)> {
    let mut tape = BlockTape::tracked(ctx);
    let (x1, x2) = block.reverse(y1, y2, Some(&mut tape), ctx)?;
    Ok((x1, x2, tape))
}

pub fn rev_backward(
    block: &mut CouplingBlock,
    tape: &mut BlockTape,
    dy1: &Tensor,
    dy2: &Tensor,
    ctx: &ExecCtx,
) -> Result<(Tensor, Tensor)> {
    block.backward(tape, dy1, dy2, ctx)
}

/// Boundary tensor charged to the ledger while it is held.
#[derive(Debug)]
struct Held {
    tensor: Tensor,
    _alloc: Allocation,
}

impl Held {
    fn new(tensor: Tensor, ctx: &ExecCtx) -> Result<Self> {
        let alloc = ctx.ledger.allocate(Category::Activations, tensor.bytes() as u64)?;
        Ok(Held { tensor, _alloc: alloc })
    }
}

/// Values observed right after a block has been reversed.
pub struct ReverseView<'a> {
    pub block: usize,
    pub x1: &'a Tensor,
    pub x2: &'a Tensor,
    pub tape: &'a BlockTape,
}

/// Coupling blocks over a common stream shape.
#[derive(Debug, Default)]
pub struct ReversibleSequence {
    pub blocks: Vec<CouplingBlock>,
    oracle_tapes: Vec<BlockTape>,
    output: Option<(Held, Held)>,
}

impl ReversibleSequence {
    pub fn new(blocks: Vec<CouplingBlock>) -> Self {
        ReversibleSequence {
            blocks,
            oracle_tapes: Vec::new(),
            output: None,
        }
    }

    pub fn depth(&self) -> usize {
        self.blocks.len()
    }

    pub fn reset_all(&mut self) {
        self.blocks.iter_mut().for_each(CouplingBlock::reset_all);
    }

    /// Drops cached tapes, outputs and stashed statistics.
    pub fn clear(&mut self) {
        self.oracle_tapes.clear();
        self.output = None;
        for b in &mut self.blocks {
            b.visit_norms(&mut BatchNorm::clear_stash);
        }
    }

    /// Tapes kept by the last oracle forward, one per block.
    pub fn oracle_tapes(&self) -> &[BlockTape] {
        &self.oracle_tapes
    }

    /// Moves the oracle tapes out, leaving the held output and stash for a
    /// reversible backward.
    pub fn take_oracle_tapes(&mut self) -> Vec<BlockTape> {
        std::mem::take(&mut self.oracle_tapes)
    }

    /// Runs every block. With `record`, behaves as a training forward for
    /// `engine`; otherwise nothing is cached.
    pub fn forward(
        &mut self,
        x1: &Tensor,
        x2: &Tensor,
        engine: Engine,
        record: bool,
        ctx: &ExecCtx,
    ) -> Result<(Tensor, Tensor)> {
        match (record, engine) {
            (false, _) => self.run(x1, x2, false, false, false, ctx),
            (true, Engine::Oracle) => self.run(x1, x2, true, false, false, ctx),
            (true, Engine::Reversible) => self.run(x1, x2, false, true, true, ctx),
        }
    }

    /// Forward that keeps oracle tapes and also prepares a reversible
    /// backward, for comparing the two.
    pub fn forward_both(&mut self, x1: &Tensor, x2: &Tensor, ctx: &ExecCtx) -> Result<(Tensor, Tensor)> {
        self.run(x1, x2, true, true, true, ctx)
    }

    fn run(
        &mut self,
        x1: &Tensor,
        x2: &Tensor,
        tapes: bool,
        stash: bool,
        hold_output: bool,
        ctx: &ExecCtx,
    ) -> Result<(Tensor, Tensor)> {
        self.clear();
        let saved = ctx.stash_stats();
        ctx.set_stash_stats(stash);
        let result = (|| {
            let (mut h1, mut h2) = (x1.clone(), x2.clone());
            for b in &mut self.blocks {
                let mut tape = tapes.then(|| BlockTape::tracked(ctx));
                (h1, h2) = b.forward(&h1, &h2, tape.as_mut(), ctx)?;
                if let Some(t) = tape {
                    self.oracle_tapes.push(t);
                }
            }
            Ok((h1, h2))
        })();
        ctx.set_stash_stats(saved);
        let (y1, y2) = result?;
        if hold_output {
            self.output = Some((Held::new(y1.clone(), ctx)?, Held::new(y2.clone(), ctx)?));
        }
        Ok((y1, y2))
    }

    pub fn backward(&mut self, dy1: &Tensor, dy2: &Tensor, engine: Engine, ctx: &ExecCtx) -> Result<(Tensor, Tensor)> {
        match engine {
            Engine::Oracle => self.oracle_backward(dy1, dy2, ctx),
            Engine::Reversible => self.reversible_backward(dy1, dy2, ctx, &mut |_| Ok(())),
        }
    }

    fn oracle_backward(&mut self, dy1: &Tensor, dy2: &Tensor, ctx: &ExecCtx) -> Result<(Tensor, Tensor)> {
        if self.oracle_tapes.len() != self.blocks.len() {
            return Err(Error::TapeMismatch(format!(
                "{} block tapes recorded for {} blocks",
                self.oracle_tapes.len(),
                self.blocks.len()
            )));
        }
        ctx.set_phase(Phase::Backward);
        let (mut g1, mut g2) = (dy1.clone(), dy2.clone());
        for b in self.blocks.iter_mut().rev() {
            let mut tape = self.oracle_tapes.pop().expect("one tape per block");
            (g1, g2) = b.backward(&mut tape, &g1, &g2, ctx)?;
        }
        Ok((g1, g2))
    }

    /// Last block to first: reset, reverse with caching, backward, drop the
    /// tape. `inspect` sees each block's rebuilt inputs and tape.
    pub fn reversible_backward(
        &mut self,
        dy1: &Tensor,
        dy2: &Tensor,
        ctx: &ExecCtx,
        inspect: &mut dyn FnMut(ReverseView<'_>) -> Result<()>,
    ) -> Result<(Tensor, Tensor)> {
        let (mut y1, mut y2) = self
            .output
            .take()
            .ok_or_else(|| Error::Contract("reversible backward without a recorded forward".into()))?;
        let (mut g1, mut g2) = (dy1.clone(), dy2.clone());
        for (i, b) in self.blocks.iter_mut().enumerate().rev() {
            if ctx.fault == Some(Fault::SkipReset) {
                b.rewind_only();
            } else {
                b.reset_all();
            }
            ctx.set_phase(Phase::Reverse);
            let (x1, x2, mut tape) = rev_reverse(b, &y1.tensor, &y2.tensor, ctx)?;
            let (x1, x2) = (Held::new(x1, ctx)?, Held::new(x2, ctx)?);
            inspect(ReverseView {
                block: i,
                x1: &x1.tensor,
                x2: &x2.tensor,
                tape: &tape,
            })?;
            ctx.set_phase(Phase::Backward);
            (g1, g2) = rev_backward(b, &mut tape, &g1, &g2, ctx)?;
            drop(tape);
            (y1, y2) = (x1, x2);
        }
        Ok((g1, g2))
    }

    pub fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.blocks.iter_mut().for_each(|b| b.visit_params(f));
    }

    pub fn visit_neurons(&mut self, f: &mut dyn FnMut(&mut SpikingNeuron)) {
        self.blocks.iter_mut().for_each(|b| b.visit_neurons(f));
    }

    pub fn visit_norms(&mut self, f: &mut dyn FnMut(&mut BatchNorm)) {
        self.blocks.iter_mut().for_each(|b| b.visit_norms(f));
    }

    pub fn profile(&self, stream: &[usize], out: &mut Vec<LayerProfile>) -> Result<Vec<usize>> {
        let mut s = stream.to_vec();
        for b in &self.blocks {
            s = b.profile(&s, out)?;
        }
        Ok(s)
    }
}

/// Full training step through `seq` with the cached engine: forward with
/// every tape, then backward. Returns input gradients.
pub fn oracle_step(
    seq: &mut ReversibleSequence,
    x1: &Tensor,
    x2: &Tensor,
    d_out: &mut dyn FnMut(&Tensor, &Tensor) -> Result<(Tensor, Tensor)>,
    ctx: &ExecCtx,
) -> Result<(Tensor, Tensor)> {
    train_step(seq, x1, x2, d_out, Engine::Oracle, ctx)
}

/// Full training step with the reversible engine.
pub fn sequence_train_step(
    seq: &mut ReversibleSequence,
    x1: &Tensor,
    x2: &Tensor,
    d_out: &mut dyn FnMut(&Tensor, &Tensor) -> Result<(Tensor, Tensor)>,
    ctx: &ExecCtx,
) -> Result<(Tensor, Tensor)> {
    train_step(seq, x1, x2, d_out, Engine::Reversible, ctx)
}

fn train_step(
    seq: &mut ReversibleSequence,
    x1: &Tensor,
    x2: &Tensor,
    d_out: &mut dyn FnMut(&Tensor, &Tensor) -> Result<(Tensor, Tensor)>,
    engine: Engine,
    ctx: &ExecCtx,
) -> Result<(Tensor, Tensor)> {
    seq.reset_all();
    ctx.set_phase(Phase::Forward);
    let (y1, y2) = seq.forward(x1, x2, engine, true, ctx)?;
    let (dy1, dy2) = d_out(&y1, &y2)?;
    let out = seq.backward(&dy1, &dy2, engine, ctx);
    ctx.set_phase(Phase::Forward);
    out
}

/// Entry-wise comparison of two tapes recorded by the same layers.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct TapeDiff {
    pub layout_equal: bool,
    /// Every cached binary tensor matches exactly.
    pub spikes_equal: bool,
    /// Largest absolute difference over non-binary tensors and statistics.
    pub max_real_diff: f64,
}

impl TapeDiff {
    pub fn within(&self, tol: f64) -> bool {
        self.layout_equal && self.spikes_equal && self.max_real_diff <= tol
    }

    pub fn merge(self, other: TapeDiff) -> TapeDiff {
        TapeDiff {
            layout_equal: self.layout_equal && other.layout_equal,
            spikes_equal: self.spikes_equal && other.spikes_equal,
            max_real_diff: self.max_real_diff.max(other.max_real_diff),
        }
    }
}

pub fn compare_tapes(a: &Tape, b: &Tape) -> TapeDiff {
    if !a.same_layout(b) {
        return TapeDiff {
            layout_equal: false,
            spikes_equal: false,
            max_real_diff: f64::INFINITY,
        };
    }
    let mut diff = TapeDiff {
        layout_equal: true,
        spikes_equal: true,
        max_real_diff: 0.0,
    };
    for (ea, eb) in a.entries().zip(b.entries()) {
        for (ta, tb) in ea.tensors.iter().zip(&eb.tensors) {
            if ta.tensor.all_binary() {
                diff.spikes_equal &= ta.tensor == tb.tensor;
            } else {
                let d = ta.tensor.max_abs_diff(&tb.tensor).unwrap_or(f64::INFINITY);
                diff.max_real_diff = diff.max_real_diff.max(d);
            }
        }
        match (&ea.stats, &eb.stats) {
            (Some(sa), Some(sb)) => {
                let d = sa
                    .stats
                    .mean
                    .iter()
                    .zip(&sb.stats.mean)
                    .chain(sa.stats.var.iter().zip(&sb.stats.var))
                    .fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
                diff.max_real_diff = diff.max_real_diff.max(d);
            }
            (None, None) => {}
            _ => diff.layout_equal = false,
        }
    }
    diff
}

pub fn compare_block_tapes(a: &BlockTape, b: &BlockTape) -> TapeDiff {
    compare_tapes(&a.f, &b.f).merge(compare_tapes(&a.g, &b.g))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::stub::{Identity, Scale};
    use crate::tensor::Precision;

    const P: Precision = Precision::F64;

    fn t(v: f64) -> Tensor {
        Tensor::from_vec(vec![1, 1], vec![v], P).unwrap()
    }

    #[test]
    fn identity_stubs_by_hand() {
        let ctx = ExecCtx::new(P);
        let mut b = CouplingBlock::new(Identity, Identity);
        let (y1, y2) = rev_forward(&mut b, &t(1.0), &t(2.0), &ctx).unwrap();
        assert_eq!((y1.data()[0], y2.data()[0]), (3.0, 5.0));
        let (x1, x2, mut tape) = rev_reverse(&mut b, &y1, &y2, &ctx).unwrap();
        assert_eq!((x1.data()[0], x2.data()[0]), (1.0, 2.0));
        let (d1, d2) = rev_backward(&mut b, &mut tape, &t(1.0), &t(1.0), &ctx).unwrap();
        // dY1 total = 1 + 1 = 2; dX2 = 1 + 2 = 3
        assert_eq!((d1.data()[0], d2.data()[0]), (2.0, 3.0));
    }

    #[test]
    fn zero_stubs_are_identity_coupling() {
        let ctx = ExecCtx::new(P);
        let mut b = CouplingBlock::new(Scale::new(0.0, P), Scale::new(0.0, P));
        let (y1, y2) = rev_forward(&mut b, &t(1.5), &t(-2.0), &ctx).unwrap();
        assert_eq!((y1, y2.clone()), (t(1.5), t(-2.0)));
        let (x1, _, mut tape) = rev_reverse(&mut b, &t(1.5), &y2, &ctx).unwrap();
        assert_eq!(x1, t(1.5));
        let (d1, d2) = rev_backward(&mut b, &mut tape, &t(0.3), &t(0.7), &ctx).unwrap();
        assert_eq!((d1, d2), (t(0.3), t(0.7)));
    }

    #[test]
    fn mismatched_streams_are_rejected() {
        let ctx = ExecCtx::new(P);
        let mut b = CouplingBlock::new(Identity, Identity);
        let x2 = Tensor::zeros(&[1, 2], P);
        assert!(matches!(rev_forward(&mut b, &t(1.0), &x2, &ctx), Err(Error::Dimension { .. })));
    }

    #[test]
    fn engine_names_round_trip() {
        for e in [Engine::Oracle, Engine::Reversible] {
            assert_eq!(Engine::parse(e.name()), Some(e));
        }
    }
}
