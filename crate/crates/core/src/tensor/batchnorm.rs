use super::Tensor;
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

pub const BN_EPS: f64 = 1e-5;

/// Where batch normalization takes its statistics from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BnMode {
    /// Batch statistics over every non-channel axis; running stats updated.
    Train,
    /// Previously recorded batch statistics applied verbatim; no update.
    Replay,
    /// Running statistics.
    Eval,
}

/// Per-channel mean and biased variance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BnStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl BnStats {
    pub fn channels(&self) -> usize {
        self.mean.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub momentum: f64,
}

impl RunningStats {
    pub fn new(channels: usize) -> Self {
        RunningStats {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
            momentum: 0.1,
        }
    }
}

struct Layout {
    n: usize,
    c: usize,
    inner: usize,
}

fn layout(x: &Tensor, gamma: &Tensor, beta: &Tensor) -> Result<Layout> {
    x.check_precision(gamma, "batchnorm")?;
    x.check_precision(beta, "batchnorm")?;
    if x.ndim() < 2 {
        return Err(Error::dim("batchnorm", "input rank", ">= 2", x.ndim()));
    }
    let c = x.dim(1);
    if gamma.shape() != [c] {
        return Err(Error::dim("batchnorm", "gamma", format!("[{c}]"), format!("{:?}", gamma.shape())));
    }
    if beta.shape() != [c] {
        return Err(Error::dim("batchnorm", "beta", format!("[{c}]"), format!("{:?}", beta.shape())));
    }
    Ok(Layout {
        n: x.dim(0),
        c,
        inner: x.shape()[2..].iter().product(),
    })
}

/// Channel `ch` values in fixed order: sample-major, then spatial.
fn channel_values<'a>(x: &'a [f64], l: &'a Layout, ch: usize) -> impl Iterator<Item = f64> + 'a {
    (0..l.n).flat_map(move |s| {
        let base = (s * l.c + ch) * l.inner;
        x[base..base + l.inner].iter().copied()
    })
}

fn batch_stats(x: &Tensor, l: &Layout) -> BnStats {
    let m = (l.n * l.inner) as f64;
    let p = x.precision();
    let mut mean = Vec::with_capacity(l.c);
    let mut var = Vec::with_capacity(l.c);
    for ch in 0..l.c {
        let mu = channel_values(x.data(), l, ch).sum::<f64>() / m;
        let v = channel_values(x.data(), l, ch).map(|v| (v - mu) * (v - mu)).sum::<f64>() / m;
        mean.push(p.round(mu));
        var.push(p.round(v));
    }
    BnStats { mean, var }
}

/// Batch normalization over `[N, C, ...]`.
///
/// Returns the output and the statistics that were applied. In `Train` mode
/// the running statistics are updated with the unbiased batch variance.
pub fn batchnorm(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    mode: BnMode,
    cached: Option<&BnStats>,
    running: &mut RunningStats,
) -> Result<(Tensor, BnStats)> {
    let l = layout(x, gamma, beta)?;
    let stats = match mode {
        BnMode::Train => {
            let s = batch_stats(x, &l);
            let m = (l.n * l.inner) as f64;
            let unbias = if m > 1.0 { m / (m - 1.0) } else { 1.0 };
            for ch in 0..l.c {
                let mo = running.momentum;
                running.mean[ch] = (1.0 - mo) * running.mean[ch] + mo * s.mean[ch];
                running.var[ch] = (1.0 - mo) * running.var[ch] + mo * s.var[ch] * unbias;
            }
            s
        }
        BnMode::Replay => {
            let s = cached.ok_or_else(|| {
                Error::Contract("batchnorm replay mode requires cached batch statistics".into())
            })?;
            if s.channels() != l.c {
                return Err(Error::dim("batchnorm", "cached_stats", l.c, s.channels()));
            }
            s.clone()
        }
        BnMode::Eval => BnStats {
            mean: running.mean.clone(),
            var: running.var.clone(),
        },
    };
    let y = apply(x, gamma, beta, &stats, &l);
    Ok((y, stats))
}

fn apply(x: &Tensor, gamma: &Tensor, beta: &Tensor, stats: &BnStats, l: &Layout) -> Tensor {
    let mut out = vec![0.0; x.len()];
    let xd = x.data();
    for s in 0..l.n {
        for ch in 0..l.c {
            let inv_std = 1.0 / (stats.var[ch] + BN_EPS).sqrt();
            let (g, b, mu) = (gamma.data()[ch], beta.data()[ch], stats.mean[ch]);
            let base = (s * l.c + ch) * l.inner;
            for i in base..base + l.inner {
                out[i] = g * (xd[i] - mu) * inv_std + b;
            }
        }
    }
    x.with_data(x.shape().to_vec(), out)
}

/// Gradients of [`batchnorm`].
///
/// `batch_stats` selects whether the statistics were a function of `x`
/// (train mode, and its exact replay) or constants (eval mode).
pub fn batchnorm_backward(
    x: &Tensor,
    gamma: &Tensor,
    stats: &BnStats,
    batch_stats: bool,
    grad_out: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let l = layout(x, gamma, gamma)?;
    if grad_out.shape() != x.shape() {
        return Err(Error::dim(
            "batchnorm_backward",
            "grad_out",
            format!("{:?}", x.shape()),
            format!("{:?}", grad_out.shape()),
        ));
    }
    let m = (l.n * l.inner) as f64;
    let (xd, gy) = (x.data(), grad_out.data());
    let mut dx = vec![0.0; x.len()];
    let mut dgamma = vec![0.0; l.c];
    let mut dbeta = vec![0.0; l.c];
    for ch in 0..l.c {
        let inv_std = 1.0 / (stats.var[ch] + BN_EPS).sqrt();
        let mu = stats.mean[ch];
        let g = gamma.data()[ch];
        let (mut sum_dy, mut sum_dy_xhat) = (0.0, 0.0);
        for s in 0..l.n {
            let base = (s * l.c + ch) * l.inner;
            for i in base..base + l.inner {
                let xhat = (xd[i] - mu) * inv_std;
                sum_dy += gy[i];
                sum_dy_xhat += gy[i] * xhat;
            }
        }
        dbeta[ch] = sum_dy;
        dgamma[ch] = sum_dy_xhat;
        for s in 0..l.n {
            let base = (s * l.c + ch) * l.inner;
            for i in base..base + l.inner {
                dx[i] = if batch_stats {
                    let xhat = (xd[i] - mu) * inv_std;
                    g * inv_std * (gy[i] - sum_dy / m - xhat * sum_dy_xhat / m)
                } else {
                    g * inv_std * gy[i]
                };
            }
        }
    }
    Ok((
        x.with_data(x.shape().to_vec(), dx),
        x.with_data(vec![l.c], dgamma),
        x.with_data(vec![l.c], dbeta),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Precision;

    const P: Precision = Precision::F64;

    fn affine(c: usize, g: f64, b: f64) -> (Tensor, Tensor) {
        (Tensor::full(&[c], g, P), Tensor::full(&[c], b, P))
    }

    #[test]
    fn constant_batch_normalizes_to_zero() {
        let (g, b) = affine(1, 1.0, 0.0);
        let x = Tensor::full(&[4, 1], 3.0, P);
        let (y, s) = batchnorm(&x, &g, &b, BnMode::Train, None, &mut RunningStats::new(1)).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
        assert_eq!(s.var, vec![0.0]);
    }

    #[test]
    fn two_point_batch() {
        let (g, b) = affine(1, 1.0, 0.0);
        let x = Tensor::from_vec(vec![2, 1], vec![1.0, 3.0], P).unwrap();
        let (y, s) = batchnorm(&x, &g, &b, BnMode::Train, None, &mut RunningStats::new(1)).unwrap();
        assert_eq!(s, BnStats { mean: vec![2.0], var: vec![1.0] });
        assert!((y.data()[0] + 1.0).abs() < 1e-4);
        assert!((y.data()[1] - 1.0).abs() < 1e-4);
    }

    #[test]
    fn zero_gamma_yields_beta() {
        let (g, b) = affine(2, 0.0, 0.7);
        let x = Tensor::from_vec(vec![2, 2, 2], vec![1.0, -2.0, 3.5, 0.0, 9.0, 1.0, -4.0, 2.0], P).unwrap();
        let (y, _) = batchnorm(&x, &g, &b, BnMode::Train, None, &mut RunningStats::new(2)).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.7));
    }

    #[test]
    fn replay_requires_stats_and_skips_running_update() {
        let (g, b) = affine(1, 1.0, 0.0);
        let x = Tensor::from_vec(vec![2, 1], vec![1.0, 3.0], P).unwrap();
        let mut running = RunningStats::new(1);
        let err = batchnorm(&x, &g, &b, BnMode::Replay, None, &mut running).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));

        let (y_train, stats) = batchnorm(&x, &g, &b, BnMode::Train, None, &mut running).unwrap();
        let before = running.clone();
        let (y_replay, used) = batchnorm(&x, &g, &b, BnMode::Replay, Some(&stats), &mut running).unwrap();
        assert_eq!(running, before);
        assert_eq!(used, stats);
        assert_eq!(y_train, y_replay);
    }

    #[test]
    fn running_stats_follow_momentum() {
        let (g, b) = affine(1, 1.0, 0.0);
        let x = Tensor::from_vec(vec![2, 1], vec![1.0, 3.0], P).unwrap();
        let mut running = RunningStats::new(1);
        batchnorm(&x, &g, &b, BnMode::Train, None, &mut running).unwrap();
        assert!((running.mean[0] - 0.2).abs() < 1e-15);
        // unbiased variance of {1, 3} is 2
        assert!((running.var[0] - (0.9 + 0.2)).abs() < 1e-15);
        let (y, _) = batchnorm(&x, &g, &b, BnMode::Eval, None, &mut running).unwrap();
        let expect = (1.0 - 0.2) / (1.1_f64 + BN_EPS).sqrt();
        assert!((y.data()[0] - expect).abs() < 1e-12);
    }
}
