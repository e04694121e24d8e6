//! Sequence-level sweeps over depth, time steps and width for both engines.

use crate::config::BenchSection;
use crate::error::CliError;
use crate::workload::{linear_fit, uniform_tensor, SeqSpec};
use rayon::prelude::*;
use revsnn_core::layers::ModelRng;
use revsnn_core::models::Family;
use revsnn_core::reveng::{oracle_step, sequence_train_step};
use revsnn_core::{Engine, ExecCtx, Precision, Result};
use rand::SeedableRng;
use serde::Serialize;
use std::collections::BTreeSet;
use std::path::Path;
use std::time::Instant;

pub const CSV_HEADER: [&str; 9] = [
    "family",
    "mode",
    "depth",
    "T",
    "dim",
    "batch",
    "peak_activation_bytes_per_img",
    "mult_adds",
    "wall_ms",
];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchRow {
    pub family: Family,
    pub mode: Engine,
    pub depth: usize,
    #[serde(rename = "T")]
    pub timesteps: usize,
    pub dim: usize,
    pub batch: usize,
    pub peak_activation_bytes_per_img: f64,
    pub mult_adds: u64,
    pub wall_ms: f64,
}

/// One training step of a fresh sequence with private counters and ledger.
pub fn measure(spec: SeqSpec, engine: Engine, seed: u64, precision: Precision) -> Result<BenchRow> {
    let ctx = ExecCtx::new(precision);
    let mut seq = spec.build(seed, precision)?;
    let mut rng = ModelRng::seed_from_u64(seed ^ 0x5eed);
    let shape = spec.stream_shape();
    let x1 = uniform_tensor(&shape, 0.0, 2.0, &mut rng, precision);
    let x2 = uniform_tensor(&shape, 0.0, 2.0, &mut rng, precision);
    let c1 = uniform_tensor(&shape, -1.0, 1.0, &mut rng, precision);
    let c2 = uniform_tensor(&shape, -1.0, 1.0, &mut rng, precision);
    let mut d_out = |_: &_, _: &_| Ok((c1.clone(), c2.clone()));
    let start = Instant::now();
    match engine {
        Engine::Oracle => oracle_step(&mut seq, &x1, &x2, &mut d_out, &ctx)?,
        Engine::Reversible => sequence_train_step(&mut seq, &x1, &x2, &mut d_out, &ctx)?,
    };
    let wall_ms = start.elapsed().as_secs_f64() * 1e3;
    seq.clear();
    Ok(BenchRow {
        family: spec.family,
        mode: engine,
        depth: spec.depth,
        timesteps: spec.timesteps,
        dim: spec.dim,
        batch: spec.batch,
        peak_activation_bytes_per_img: ctx.ledger.peak_working_set() as f64 / spec.batch as f64,
        mult_adds: ctx.ops.total(),
        wall_ms,
    })
}

fn spec(b: &BenchSection, family: Family, depth: usize, timesteps: usize, dim: usize) -> SeqSpec {
    SeqSpec {
        family,
        depth,
        timesteps,
        dim,
        batch: b.batch,
        extent: match family {
            Family::Resnet => b.spatial,
            Family::Former => b.tokens,
        },
    }
}

/// Distinct sweep points: each axis varied with the others at base values.
pub fn sweep_points(b: &BenchSection) -> Vec<SeqSpec> {
    let mut keys = BTreeSet::new();
    for &f in &b.families {
        let fk = f == Family::Former;
        for &d in &b.depths {
            keys.insert((fk, d, b.base_timesteps, b.base_dim));
        }
        for &t in &b.timesteps {
            keys.insert((fk, b.base_depth, t, b.base_dim));
        }
        for &w in &b.dims {
            keys.insert((fk, b.base_depth, b.base_timesteps, w));
        }
    }
    keys.into_iter()
        .map(|(fk, d, t, w)| spec(b, if fk { Family::Former } else { Family::Resnet }, d, t, w))
        .collect()
}

pub fn run_sweeps(b: &BenchSection, seed: u64, precision: Precision) -> Result<Vec<BenchRow>> {
    let jobs: Vec<(SeqSpec, Engine)> = sweep_points(b)
        .into_iter()
        .flat_map(|s| [(s, Engine::Oracle), (s, Engine::Reversible)])
        .collect();
    jobs.into_par_iter().map(|(s, e)| measure(s, e, seed, precision)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LawFit {
    pub family: Family,
    /// Swept axis: `depth`, `T` or `dim`.
    pub sweep: &'static str,
    pub mode: Engine,
    pub x: Vec<f64>,
    pub peak_bytes_per_img: Vec<f64>,
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
    pub max_over_min: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OpRatio {
    pub family: Family,
    pub depth: usize,
    #[serde(rename = "T")]
    pub timesteps: usize,
    pub dim: usize,
    pub ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub measured: f64,
    pub bound: &'static str,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchSummary {
    pub fits: Vec<LawFit>,
    pub op_ratios: Vec<OpRatio>,
    pub checks: Vec<Check>,
}

pub const REVERSIBLE_DEPTH_SPREAD: f64 = 1.05;
pub const ORACLE_DEPTH_R2: f64 = 0.99;
pub const T_SLOPE_RATIO: f64 = 0.5;
pub const T_LINEAR_R2: f64 = 0.99;
pub const OP_RATIO_BAND: (f64, f64) = (1.25, 1.45);

fn fit(rows: &[BenchRow], b: &BenchSection, family: Family, mode: Engine, sweep: &'static str) -> Option<LawFit> {
    let mut pts: Vec<(f64, f64)> = rows
        .iter()
        .filter(|r| r.family == family && r.mode == mode)
        .filter_map(|r| {
            let (x, on) = match sweep {
                "depth" => (r.depth, r.timesteps == b.base_timesteps && r.dim == b.base_dim),
                "T" => (r.timesteps, r.depth == b.base_depth && r.dim == b.base_dim),
                _ => (r.dim, r.depth == b.base_depth && r.timesteps == b.base_timesteps),
            };
            on.then_some((x as f64, r.peak_activation_bytes_per_img))
        })
        .collect();
    if pts.len() < 2 {
        return None;
    }
    pts.sort_by(|a, b| a.0.total_cmp(&b.0));
    let (x, y): (Vec<f64>, Vec<f64>) = pts.into_iter().unzip();
    let (slope, intercept, r2) = linear_fit(&x, &y);
    let max = y.iter().copied().fold(f64::MIN, f64::max);
    let min = y.iter().copied().fold(f64::MAX, f64::min);
    Some(LawFit {
        family,
        sweep,
        mode,
        x,
        peak_bytes_per_img: y,
        slope,
        intercept,
        r2,
        max_over_min: max / min,
    })
}

pub fn op_ratios(rows: &[BenchRow]) -> Vec<OpRatio> {
    rows.iter()
        .filter(|r| r.mode == Engine::Reversible)
        .filter_map(|r| {
            let o = rows.iter().find(|o| {
                o.mode == Engine::Oracle
                    && (o.family, o.depth, o.timesteps, o.dim, o.batch) == (r.family, r.depth, r.timesteps, r.dim, r.batch)
            })?;
            Some(OpRatio {
                family: r.family,
                depth: r.depth,
                timesteps: r.timesteps,
                dim: r.dim,
                ratio: r.mult_adds as f64 / o.mult_adds as f64,
            })
        })
        .collect()
}

pub fn summarize(rows: &[BenchRow], b: &BenchSection) -> BenchSummary {
    let mut fits = Vec::new();
    let mut checks = Vec::new();
    for &family in &b.families {
        for sweep in ["depth", "T", "dim"] {
            for mode in [Engine::Oracle, Engine::Reversible] {
                fits.extend(fit(rows, b, family, mode, sweep));
            }
        }
        let get = |sweep: &str, mode: Engine| fits.iter().find(|f: &&LawFit| f.family == family && f.sweep == sweep && f.mode == mode).cloned();
        if let (Some(r), Some(o)) = (get("depth", Engine::Reversible), get("depth", Engine::Oracle)) {
            checks.push(Check {
                name: if family == Family::Resnet { "resnet_depth_reversible_spread" } else { "former_depth_reversible_spread" },
                passed: r.max_over_min <= REVERSIBLE_DEPTH_SPREAD,
                measured: r.max_over_min,
                bound: "<= 1.05",
            });
            checks.push(Check {
                name: if family == Family::Resnet { "resnet_depth_oracle_r2" } else { "former_depth_oracle_r2" },
                passed: o.r2 > ORACLE_DEPTH_R2 && o.slope > 0.0,
                measured: o.r2,
                bound: "> 0.99 with positive slope",
            });
        }
        if let (Some(r), Some(o)) = (get("T", Engine::Reversible), get("T", Engine::Oracle)) {
            let ratio = r.slope / o.slope;
            checks.push(Check {
                name: if family == Family::Resnet { "resnet_t_slope_ratio" } else { "former_t_slope_ratio" },
                passed: ratio < T_SLOPE_RATIO && r.r2 > T_LINEAR_R2 && o.r2 > T_LINEAR_R2,
                measured: ratio,
                bound: "< 0.5 with both fits R2 > 0.99",
            });
        }
    }
    let op_ratios = op_ratios(rows);
    if !op_ratios.is_empty() {
        let worst = op_ratios
            .iter()
            .map(|o| o.ratio)
            .max_by(|a, b| (a - 4.0 / 3.0).abs().total_cmp(&(b - 4.0 / 3.0).abs()))
            .unwrap_or(f64::NAN);
        checks.push(Check {
            name: "op_ratio_band",
            passed: op_ratios.iter().all(|o| (OP_RATIO_BAND.0..=OP_RATIO_BAND.1).contains(&o.ratio)),
            measured: worst,
            bound: "in [1.25, 1.45] at every point",
        });
    }
    BenchSummary { fits, op_ratios, checks }
}

pub fn write_csv(rows: &[BenchRow], path: &Path) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(CSV_HEADER)?;
    for r in rows {
        w.write_record([
            r.family.name().to_string(),
            r.mode.name().to_string(),
            r.depth.to_string(),
            r.timesteps.to_string(),
            r.dim.to_string(),
            r.batch.to_string(),
            format!("{}", r.peak_activation_bytes_per_img),
            r.mult_adds.to_string(),
            format!("{:.3}", r.wall_ms),
        ])?;
    }
    w.flush().map_err(|e| CliError::io(path, e))?;
    Ok(())
}
