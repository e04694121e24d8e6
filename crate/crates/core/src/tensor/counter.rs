use serde::{Deserialize, Serialize};
use std::sync::atomic::{AtomicU64, AtomicU8, Ordering};

/// Training-step phase an operation is charged to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Forward = 0,
    Reverse = 1,
    Backward = 2,
}

impl Phase {
    pub const ALL: [Phase; 3] = [Phase::Forward, Phase::Reverse, Phase::Backward];

    fn from_u8(v: u8) -> Phase {
        match v {
            0 => Phase::Forward,
            1 => Phase::Reverse,
            _ => Phase::Backward,
        }
    }
}

/// Shared multiply-accumulate counter, bucketed by phase.
///
/// Only dense products are charged (convolution, linear, attention matmuls);
/// elementwise work such as normalization and neuron updates is free.
#[derive(Debug, Default)]
pub struct OpCounter {
    phase: AtomicU8,
    counts: [AtomicU64; 3],
}

impl OpCounter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set_phase(&self, phase: Phase) {
        self.phase.store(phase as u8, Ordering::SeqCst);
    }

    pub fn phase(&self) -> Phase {
        Phase::from_u8(self.phase.load(Ordering::SeqCst))
    }

    /// Charges `n` mult-adds to the current phase.
    pub fn add(&self, n: u64) {
        let p = self.phase.load(Ordering::Relaxed) as usize;
        self.counts[p].fetch_add(n, Ordering::Relaxed);
    }

    pub fn get(&self, phase: Phase) -> u64 {
        self.counts[phase as usize].load(Ordering::SeqCst)
    }

    pub fn total(&self) -> u64 {
        Phase::ALL.iter().map(|&p| self.get(p)).sum()
    }

    /// Batch-boundary reset.
    pub fn reset(&self) {
        for c in &self.counts {
            c.store(0, Ordering::SeqCst);
        }
        self.set_phase(Phase::Forward);
    }

    pub fn snapshot(&self) -> OpCounts {
        OpCounts {
            forward: self.get(Phase::Forward),
            reverse: self.get(Phase::Reverse),
            backward: self.get(Phase::Backward),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct OpCounts {
    pub forward: u64,
    pub reverse: u64,
    pub backward: u64,
}

impl OpCounts {
    pub fn total(&self) -> u64 {
        self.forward + self.reverse + self.backward
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::Arc;

    #[test]
    fn phases_are_separate() {
        let c = OpCounter::new();
        c.add(3);
        c.set_phase(Phase::Backward);
        c.add(6);
        assert_eq!(c.snapshot(), OpCounts { forward: 3, reverse: 0, backward: 6 });
        c.reset();
        assert_eq!(c.total(), 0);
        assert_eq!(c.phase(), Phase::Forward);
    }

    #[test]
    fn concurrent_increments_are_not_lost() {
        let c = Arc::new(OpCounter::new());
        let handles: Vec<_> = (0..8)
            .map(|_| {
                let c = Arc::clone(&c);
                std::thread::spawn(move || (0..1000).for_each(|_| c.add(1)))
            })
            .collect();
        handles.into_iter().for_each(|h| h.join().unwrap());
        assert_eq!(c.get(Phase::Forward), 8000);
    }
}
