use crate::memtrack::MemoryLedger;
use crate::tensor::{BnMode, OpCounter, Phase, Precision};
use serde::{Deserialize, Serialize};
use std::cell::Cell;
use std::sync::Arc;

/// Deliberate defects used as negative controls by the verification suite.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fault {
    /// The reversible schedule rewinds neuron clocks before the reverse pass
    /// but leaves membrane potentials where the forward pass left them.
    SkipReset,
    /// Batch statistics replayed during the reverse pass are perturbed.
    CorruptStats,
}

impl Fault {
    pub fn name(self) -> &'static str {
        match self {
            Fault::SkipReset => "skip_reset",
            Fault::CorruptStats => "corrupt_stats",
        }
    }

    pub fn parse(s: &str) -> Option<Fault> {
        match s {
            "skip_reset" => Some(Fault::SkipReset),
            "corrupt_stats" => Some(Fault::CorruptStats),
            _ => None,
        }
    }
}

/// Per-run execution context handed to every layer.
///
/// Counters and the ledger are shared; the mode cells are flipped by the
/// engines between passes. A context belongs to one thread.
#[derive(Debug)]
pub struct ExecCtx {
    pub ops: Arc<OpCounter>,
    pub ledger: Arc<MemoryLedger>,
    pub precision: Precision,
    pub fault: Option<Fault>,
    bn_mode: Cell<BnMode>,
    stash_stats: Cell<bool>,
    knife: Cell<f64>,
}

impl ExecCtx {
    pub fn new(precision: Precision) -> Self {
        ExecCtx {
            ops: Arc::new(OpCounter::new()),
            ledger: MemoryLedger::shared(),
            precision,
            fault: None,
            bn_mode: Cell::new(BnMode::Train),
            stash_stats: Cell::new(false),
            knife: Cell::new(f64::INFINITY),
        }
    }

    pub fn with_fault(mut self, fault: Option<Fault>) -> Self {
        self.fault = fault;
        self
    }

    pub fn bn_mode(&self) -> BnMode {
        self.bn_mode.get()
    }

    pub fn set_bn_mode(&self, mode: BnMode) {
        self.bn_mode.set(mode);
    }

    /// Whether train-mode normalization keeps its batch statistics for a
    /// later replay.
    pub fn stash_stats(&self) -> bool {
        self.stash_stats.get()
    }

    pub fn set_stash_stats(&self, on: bool) {
        self.stash_stats.set(on);
    }

    pub fn set_phase(&self, phase: Phase) {
        self.ops.set_phase(phase);
    }

    /// Smallest distance of any hidden potential to a spike or surrogate
    /// discontinuity since the last [`ExecCtx::reset_knife_edge`].
    pub fn knife_edge(&self) -> f64 {
        self.knife.get()
    }

    pub fn report_knife_edge(&self, distance: f64) {
        if distance < self.knife.get() {
            self.knife.set(distance);
        }
    }

    pub fn reset_knife_edge(&self) {
        self.knife.set(f64::INFINITY);
    }
}
