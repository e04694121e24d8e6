use crate::error::{Error, Result};
use crate::memtrack::{Allocation, Category, MemoryLedger};
use crate::tensor::{BnStats, Precision, Tensor};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

/// Identity of a layer instance, stamped on the entries it records.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct LayerId(u64);

impl LayerId {
    pub fn next() -> LayerId {
        static NEXT: AtomicU64 = AtomicU64::new(1);
        LayerId(NEXT.fetch_add(1, Ordering::Relaxed))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Cached {
    pub category: Category,
    pub tensor: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CachedStats {
    pub stats: BnStats,
    /// True when the statistics were computed from the batch itself (train
    /// mode or its replay); gradients then flow through them.
    pub from_batch: bool,
}

/// What one layer kept for its backward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct TapeEntry {
    pub layer: LayerId,
    pub kind: &'static str,
    /// Time steps covered by the cached tensors.
    pub steps: usize,
    pub tensors: Vec<Cached>,
    pub stats: Option<CachedStats>,
    /// Small shape metadata (not charged to the ledger).
    pub meta: Vec<usize>,
}

impl TapeEntry {
    pub fn new(layer: LayerId, kind: &'static str, steps: usize) -> Self {
        TapeEntry {
            layer,
            kind,
            steps,
            tensors: Vec::new(),
            stats: None,
            meta: Vec::new(),
        }
    }

    pub fn with(mut self, category: Category, tensor: Tensor) -> Self {
        self.tensors.push(Cached { category, tensor });
        self
    }

    pub fn with_stats(mut self, stats: BnStats, from_batch: bool) -> Self {
        self.stats = Some(CachedStats { stats, from_batch });
        self
    }

    pub fn with_meta(mut self, meta: Vec<usize>) -> Self {
        self.meta = meta;
        self
    }

    pub fn tensor(&self, i: usize) -> Result<&Tensor> {
        self.tensors
            .get(i)
            .map(|c| &c.tensor)
            .ok_or_else(|| Error::TapeMismatch(format!("{} entry has no tensor #{i}", self.kind)))
    }

    fn precision(&self) -> Precision {
        self.tensors.first().map_or(Precision::F64, |c| c.tensor.precision())
    }

    /// Byte footprint per ledger category.
    pub fn footprint(&self) -> Vec<(Category, u64)> {
        let mut out: Vec<(Category, u64)> = self
            .tensors
            .iter()
            .map(|c| (c.category, c.tensor.bytes() as u64))
            .collect();
        if let Some(s) = &self.stats {
            let bytes = 2 * s.stats.channels() * self.precision().bytes();
            out.push((Category::Activations, bytes as u64));
        }
        out
    }
}

/// Ordered record of cached values for one backward pass. Entries are
/// consumed last-in first-out; every entry is charged to the ledger while it
/// is live.
#[derive(Debug, Default)]
pub struct Tape {
    entries: Vec<(TapeEntry, Vec<Allocation>)>,
    ledger: Option<Arc<MemoryLedger>>,
}

impl Tape {
    pub fn new(ledger: Option<Arc<MemoryLedger>>) -> Self {
        Tape {
            entries: Vec::new(),
            ledger,
        }
    }

    pub fn tracked(ledger: &Arc<MemoryLedger>) -> Self {
        Self::new(Some(Arc::clone(ledger)))
    }

    pub fn push(&mut self, entry: TapeEntry) -> Result<()> {
        let mut allocs = Vec::new();
        if let Some(ledger) = &self.ledger {
            for (cat, bytes) in entry.footprint() {
                allocs.push(ledger.allocate(cat, bytes)?);
            }
        }
        self.entries.push((entry, allocs));
        Ok(())
    }

    /// Pops the newest entry, which must belong to `layer`.
    pub fn pop(&mut self, layer: LayerId, kind: &'static str) -> Result<TapeEntry> {
        let (entry, _allocs) = self
            .entries
            .pop()
            .ok_or_else(|| Error::TapeMismatch(format!("{kind} backward found an empty tape")))?;
        if entry.layer != layer {
            return Err(Error::TapeMismatch(format!(
                "{kind} backward expected its own entry, found a {} entry",
                entry.kind
            )));
        }
        Ok(entry)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> impl Iterator<Item = &TapeEntry> {
        self.entries.iter().map(|(e, _)| e)
    }

    pub fn bytes(&self) -> u64 {
        self.entries().flat_map(|e| e.footprint()).map(|(_, b)| b).sum()
    }

    /// Entry-for-entry structural equality: same layers, kinds, steps and
    /// tensor shapes.
    pub fn same_layout(&self, other: &Tape) -> bool {
        self.len() == other.len()
            && self.entries().zip(other.entries()).all(|(a, b)| {
                a.layer == b.layer
                    && a.kind == b.kind
                    && a.steps == b.steps
                    && a.tensors.len() == b.tensors.len()
                    && a.tensors
                        .iter()
                        .zip(&b.tensors)
                        .all(|(x, y)| x.category == y.category && x.tensor.shape() == y.tensor.shape())
            })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn push_pop_charges_ledger() {
        let ledger = MemoryLedger::shared();
        let mut tape = Tape::tracked(&ledger);
        let id = LayerId::next();
        let e = TapeEntry::new(id, "probe", 1)
            .with(Category::Activations, Tensor::zeros(&[4], Precision::F64))
            .with_stats(BnStats { mean: vec![0.0], var: vec![1.0] }, true);
        tape.push(e).unwrap();
        assert_eq!(ledger.live(Category::Activations), 32 + 16);
        tape.pop(id, "probe").unwrap();
        assert_eq!(ledger.live(Category::Activations), 0);
        assert_eq!(ledger.peak(Category::Activations), 48);
    }

    #[test]
    fn pop_checks_owner() {
        let mut tape = Tape::new(None);
        tape.push(TapeEntry::new(LayerId::next(), "a", 1)).unwrap();
        assert!(matches!(tape.pop(LayerId::next(), "b"), Err(Error::TapeMismatch(_))));
        assert!(matches!(tape.pop(LayerId::next(), "b"), Err(Error::TapeMismatch(_))));
    }

    #[test]
    fn dropping_a_tape_releases_everything() {
        let ledger = MemoryLedger::shared();
        {
            let mut tape = Tape::tracked(&ledger);
            for _ in 0..3 {
                tape.push(TapeEntry::new(LayerId::next(), "x", 1).with(Category::NeuronState, Tensor::zeros(&[2], Precision::F32)))
                    .unwrap();
            }
            assert_eq!(ledger.live(Category::NeuronState), 24);
        }
        assert_eq!(ledger.live(Category::NeuronState), 0);
    }
}
