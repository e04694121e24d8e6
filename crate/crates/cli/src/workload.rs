//! Random reversible sequences and inputs shared by `bench` and `verify`.

use revsnn_core::layers::{MlpBlock, ModelRng, ResidualFn, SsaBlock};
use revsnn_core::models::Family;
use revsnn_core::neurons::NeuronParams;
use revsnn_core::reveng::{CouplingBlock, ReversibleSequence};
use revsnn_core::{Precision, Result, Tensor};
use rand::{Rng, SeedableRng};
use serde::Serialize;

/// Shape of one benchmarked or verified sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct SeqSpec {
    pub family: Family,
    pub depth: usize,
    pub timesteps: usize,
    /// Total channels (ResNet, split across two streams) or embedding width.
    pub dim: usize,
    pub batch: usize,
    /// Spatial side (ResNet) or token count (transformer).
    pub extent: usize,
}

impl SeqSpec {
    pub fn stream_shape(&self) -> Vec<usize> {
        match self.family {
            Family::Resnet => vec![self.timesteps, self.batch, self.dim / 2, self.extent, self.extent],
            Family::Former => vec![self.timesteps, self.batch, self.extent, self.dim],
        }
    }

    pub fn heads(&self) -> usize {
        (1..=(self.dim / 16).max(1)).rev().find(|h| self.dim % h == 0).unwrap_or(1)
    }

    pub fn build(&self, seed: u64, precision: Precision) -> Result<ReversibleSequence> {
        let mut rng = ModelRng::seed_from_u64(seed);
        let blocks = (0..self.depth)
            .map(|_| self.block(&mut rng, precision))
            .collect::<Result<Vec<_>>>()?;
        Ok(ReversibleSequence::new(blocks))
    }

    fn block(&self, rng: &mut ModelRng, p: Precision) -> Result<CouplingBlock> {
        let t = self.timesteps;
        Ok(match self.family {
            Family::Resnet => {
                let n = NeuronParams::if_neuron();
                let c = self.dim / 2;
                CouplingBlock::new(ResidualFn::new(c, n, t, rng, p), ResidualFn::new(c, n, t, rng, p))
            }
            Family::Former => {
                let n = NeuronParams::lif();
                CouplingBlock::new(
                    SsaBlock::new(self.dim, self.heads(), n, t, rng, p)?,
                    MlpBlock::new(self.dim, 4, n, t, rng, p),
                )
            }
        })
    }
}

pub fn uniform_tensor(shape: &[usize], lo: f64, hi: f64, rng: &mut ModelRng, precision: Precision) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::from_vec(shape.to_vec(), data, precision).expect("shape matches data length")
}

/// Least-squares line through `(x, y)`: slope, intercept and R².
/// A perfect fit of constant data reports R² = 1.
pub fn linear_fit(x: &[f64], y: &[f64]) -> (f64, f64, f64) {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let slope = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    let intercept = my - slope * mx;
    let ss_tot: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    let ss_res: f64 = x.iter().zip(y).map(|(a, b)| (b - intercept - slope * a).powi(2)).sum();
    let r2 = if ss_tot > 0.0 { 1.0 - ss_res / ss_tot } else if ss_res == 0.0 { 1.0 } else { 0.0 };
    (slope, intercept, r2)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fit_recovers_line() {
        let (m, b, r2) = linear_fit(&[1.0, 2.0, 4.0, 8.0], &[5.0, 7.0, 11.0, 19.0]);
        assert!((m - 2.0).abs() < 1e-12 && (b - 3.0).abs() < 1e-12 && (r2 - 1.0).abs() < 1e-12);
        assert_eq!(linear_fit(&[1.0, 2.0], &[4.0, 4.0]), (0.0, 4.0, 1.0));
    }

    #[test]
    fn stream_shapes() {
        let s = SeqSpec { family: Family::Former, depth: 1, timesteps: 2, dim: 64, batch: 3, extent: 16 };
        assert_eq!(s.stream_shape(), vec![2, 3, 16, 64]);
        assert_eq!(s.heads(), 4);
        let r = SeqSpec { family: Family::Resnet, dim: 32, extent: 8, ..s };
        assert_eq!(r.stream_shape(), vec![2, 3, 16, 8, 8]);
    }
}
