//! Byte-level ledger of cached tensors.
//!
//! The engines register every tensor they retain for a later pass (tapes,
//! boundary outputs, stashed batch statistics) and release it when the pass
//! consumes it. Peaks recorded here are the desk-scale stand-in for GPU
//! memory per image; they do not see transient working buffers.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::fmt;
use std::sync::{Arc, Mutex};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    Parameters,
    Activations,
    NeuronState,
    Gradients,
}

impl Category {
    pub const ALL: [Category; 4] = [
        Category::Parameters,
        Category::Activations,
        Category::NeuronState,
        Category::Gradients,
    ];

    fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Category::Parameters => "parameters",
            Category::Activations => "activations",
            Category::NeuronState => "neuron_state",
            Category::Gradients => "gradients",
        }
    }

    fn is_working_set(self) -> bool {
        matches!(self, Category::Activations | Category::NeuronState)
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Event {
    Alloc,
    Free,
}

#[derive(Debug, Default)]
struct Inner {
    live: [u64; 4],
    peak: [u64; 4],
    peak_total: u64,
    peak_working_set: u64,
    outstanding: HashMap<(Category, u64), u64>,
}

impl Inner {
    fn total(&self) -> u64 {
        self.live.iter().sum()
    }

    fn working_set(&self) -> u64 {
        Category::ALL
            .iter()
            .filter(|c| c.is_working_set())
            .map(|c| self.live[c.index()])
            .sum()
    }
}

/// Running account of live bytes per category with peak tracking.
#[derive(Debug, Default)]
pub struct MemoryLedger {
    inner: Mutex<Inner>,
}

impl MemoryLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn shared() -> Arc<Self> {
        Arc::new(Self::new())
    }

    /// Records an allocation or a release. A release must match an earlier
    /// allocation of identical size in the same category.
    pub fn track(&self, category: Category, size_bytes: u64, event: Event) -> Result<()> {
        let mut g = self.inner.lock().expect("ledger poisoned");
        let i = category.index();
        match event {
            Event::Alloc => {
                g.live[i] += size_bytes;
                g.peak[i] = g.peak[i].max(g.live[i]);
                let total = g.total();
                g.peak_total = g.peak_total.max(total);
                let ws = g.working_set();
                g.peak_working_set = g.peak_working_set.max(ws);
                *g.outstanding.entry((category, size_bytes)).or_default() += 1;
            }
            Event::Free => {
                let count = g.outstanding.get_mut(&(category, size_bytes)).filter(|c| **c > 0);
                let Some(count) = count else {
                    return Err(Error::LedgerCorruption(format!(
                        "free of {size_bytes} bytes in `{category}` without a matching allocation"
                    )));
                };
                *count -= 1;
                if *count == 0 {
                    g.outstanding.remove(&(category, size_bytes));
                }
                // outstanding bookkeeping guarantees live[i] >= size_bytes
                g.live[i] -= size_bytes;
            }
        }
        Ok(())
    }

    pub fn live(&self, category: Category) -> u64 {
        self.inner.lock().expect("ledger poisoned").live[category.index()]
    }

    pub fn peak(&self, category: Category) -> u64 {
        self.inner.lock().expect("ledger poisoned").peak[category.index()]
    }

    /// Peak of activations plus neuron state held at the same instant.
    pub fn peak_working_set(&self) -> u64 {
        self.inner.lock().expect("ledger poisoned").peak_working_set
    }

    /// Clears peaks down to the current live values (between training steps).
    pub fn reset_peaks(&self) {
        let mut g = self.inner.lock().expect("ledger poisoned");
        g.peak = g.live;
        g.peak_total = g.total();
        g.peak_working_set = g.working_set();
    }

    pub fn snapshot(&self) -> MemoryReport {
        let g = self.inner.lock().expect("ledger poisoned");
        MemoryReport {
            categories: Category::ALL
                .iter()
                .map(|&c| CategoryUsage {
                    category: c,
                    live: g.live[c.index()],
                    peak: g.peak[c.index()],
                })
                .collect(),
            total_live: g.total(),
            total_peak: g.peak_total,
            working_set_peak: g.peak_working_set,
            meta: None,
        }
    }

    /// Registers `bytes` and returns a guard that releases them on drop.
    pub fn allocate(self: &Arc<Self>, category: Category, bytes: u64) -> Result<Allocation> {
        self.track(category, bytes, Event::Alloc)?;
        Ok(Allocation {
            ledger: Arc::clone(self),
            category,
            bytes,
        })
    }
}

/// RAII registration of a cached buffer.
#[derive(Debug)]
pub struct Allocation {
    ledger: Arc<MemoryLedger>,
    category: Category,
    bytes: u64,
}

impl Allocation {
    pub fn bytes(&self) -> u64 {
        self.bytes
    }

    pub fn category(&self) -> Category {
        self.category
    }
}

impl Drop for Allocation {
    fn drop(&mut self) {
        self.ledger
            .track(self.category, self.bytes, Event::Free)
            .expect("allocation guard released twice");
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CategoryUsage {
    pub category: Category,
    pub live: u64,
    pub peak: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunMeta {
    pub depth: usize,
    pub timesteps: usize,
    pub batch: usize,
    pub mode: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryReport {
    pub categories: Vec<CategoryUsage>,
    pub total_live: u64,
    pub total_peak: u64,
    /// Peak of activations + neuron state.
    pub working_set_peak: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub meta: Option<RunMeta>,
}

impl MemoryReport {
    pub fn with_meta(mut self, meta: RunMeta) -> Self {
        self.meta = Some(meta);
        self
    }

    pub fn peak(&self, category: Category) -> u64 {
        self.categories
            .iter()
            .find(|u| u.category == category)
            .map_or(0, |u| u.peak)
    }

    pub fn live(&self, category: Category) -> u64 {
        self.categories
            .iter()
            .find(|u| u.category == category)
            .map_or(0, |u| u.live)
    }

    /// Activations + neuron-state peak divided by batch size.
    pub fn per_image(&self, batch: usize) -> f64 {
        self.working_set_peak as f64 / batch.max(1) as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const A: Category = Category::Activations;

    #[test]
    fn alloc_then_free() {
        let l = MemoryLedger::new();
        l.track(A, 100, Event::Alloc).unwrap();
        l.track(A, 100, Event::Free).unwrap();
        assert_eq!((l.live(A), l.peak(A)), (0, 100));
    }

    #[test]
    fn overlapping_allocations() {
        let l = MemoryLedger::new();
        l.track(A, 100, Event::Alloc).unwrap();
        l.track(A, 50, Event::Alloc).unwrap();
        l.track(A, 100, Event::Free).unwrap();
        assert_eq!((l.live(A), l.peak(A)), (50, 150));
    }

    #[test]
    fn zero_byte_allocations() {
        let l = MemoryLedger::new();
        l.track(A, 0, Event::Alloc).unwrap();
        l.track(A, 0, Event::Alloc).unwrap();
        assert_eq!(l.peak(A), 0);
    }

    #[test]
    fn unmatched_free_fails_fast() {
        let l = MemoryLedger::new();
        assert!(matches!(l.track(A, 8, Event::Free), Err(Error::LedgerCorruption(_))));
        l.track(A, 16, Event::Alloc).unwrap();
        assert!(matches!(l.track(A, 8, Event::Free), Err(Error::LedgerCorruption(_))));
        assert!(matches!(
            l.track(Category::Gradients, 16, Event::Free),
            Err(Error::LedgerCorruption(_))
        ));
        assert_eq!(l.live(A), 16);
    }

    #[test]
    fn fresh_snapshot_is_zero() {
        let r = MemoryLedger::new().snapshot();
        assert_eq!(r.categories.len(), 4);
        assert!(r.categories.iter().all(|u| u.live == 0 && u.peak == 0));
        assert_eq!((r.total_live, r.total_peak, r.working_set_peak), (0, 0, 0));
    }

    #[test]
    fn guard_releases_on_drop_and_peaks_reset() {
        let l = MemoryLedger::shared();
        {
            let _a = l.allocate(A, 64).unwrap();
            let _b = l.allocate(Category::NeuronState, 32).unwrap();
            assert_eq!(l.peak_working_set(), 96);
        }
        assert_eq!(l.live(A), 0);
        l.reset_peaks();
        assert_eq!(l.snapshot().working_set_peak, 0);
    }

    #[test]
    fn report_serializes_with_meta() {
        let l = MemoryLedger::new();
        l.track(A, 10, Event::Alloc).unwrap();
        let r = l.snapshot().with_meta(RunMeta {
            depth: 2,
            timesteps: 4,
            batch: 1,
            mode: "reversible".into(),
        });
        let v: serde_json::Value = serde_json::to_value(&r).unwrap();
        assert_eq!(v["categories"][1]["category"], "activations");
        assert_eq!(v["categories"][1]["peak"], 10);
        assert_eq!(v["meta"]["mode"], "reversible");
        let back: MemoryReport = serde_json::from_value(v).unwrap();
        assert_eq!(back, r);
    }

    #[test]
    fn concurrent_tracking_balances() {
        let l = MemoryLedger::shared();
        let hs: Vec<_> = (0..4)
            .map(|_| {
                let l = Arc::clone(&l);
                std::thread::spawn(move || {
                    for _ in 0..500 {
                        let _g = l.allocate(A, 8).unwrap();
                    }
                })
            })
            .collect();
        hs.into_iter().for_each(|h| h.join().unwrap());
        assert_eq!(l.live(A), 0);
        assert!(l.peak(A) >= 8 && l.peak(A) <= 32);
    }
}
