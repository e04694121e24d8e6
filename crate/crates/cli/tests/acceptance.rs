//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any
//! failure. Runs the default desk-scale configuration in 64-bit.

use revsnn_cli::config::RunConfig;
use revsnn_cli::verify::{expected_failures, run_selected, run_verify, PropertyResult, VerifyReport, PROPERTIES};
use revsnn_core::models::Family;
use revsnn_core::Fault;
use serde_json::Value;
use std::collections::BTreeSet;
use std::time::{Duration, Instant};

struct Verdict {
    passed: bool,
    summary: String,
}

fn measured<'a>(p: &'a PropertyResult, key: &str) -> &'a Value {
    p.measured.get(key).unwrap_or(&Value::Null)
}

fn within_budget(elapsed: Duration, budget: Duration) -> (bool, String) {
    (elapsed <= budget, format!("{:.1} s of {:.0} s", elapsed.as_secs_f64(), budget.as_secs_f64()))
}

fn select(cfg: &RunConfig, names: &[&str]) -> (VerifyReport, Duration) {
    let start = Instant::now();
    let report = run_selected(cfg, names);
    (report, start.elapsed())
}

fn prop<'a>(report: &'a VerifyReport, name: &str) -> &'a PropertyResult {
    report.get(name).unwrap_or_else(|| panic!("property {name} missing from report"))
}

fn reconstruction(cfg: &RunConfig) -> Verdict {
    let (report, elapsed) = select(cfg, &["reconstruction"]);
    let p = prop(&report, "reconstruction");
    let (fast, time) = within_budget(elapsed, Duration::from_secs(60));
    Verdict {
        passed: p.passed && fast && measured(p, "blocks") == &Value::from(50),
        summary: format!(
            "{} blocks, spikes bit-exact {}, max real error {}, knife-edge exclusions {}, {time}",
            measured(p, "blocks"),
            measured(p, "spikes_bit_exact"),
            measured(p, "max_abs_intermediate_error"),
            measured(p, "excluded_by_knife_edge"),
        ),
    }
}

fn gradient_equivalence(cfg: &RunConfig) -> Verdict {
    let (report, _) = select(cfg, &["gradient_equivalence", "hand_bptt_single_neuron"]);
    let g = prop(&report, "gradient_equivalence");
    let h = prop(&report, "hand_bptt_single_neuron");
    Verdict {
        passed: g.passed && h.passed,
        summary: format!(
            "{} sequences, max param grad rel error {}, max input grad rel error {}; hand check dL/dw {} vs {}",
            measured(g, "sequences"),
            measured(g, "max_param_grad_rel_error"),
            measured(g, "max_input_grad_rel_error"),
            measured(h, "reversible.dl_dw"),
            measured(h, "expected_dl_dw"),
        ),
    }
}

fn finite_differences(cfg: &RunConfig) -> Verdict {
    let (report, _) = select(cfg, &["kernel_finite_differences"]);
    let p = prop(&report, "kernel_finite_differences");
    let kernels: BTreeSet<&str> = p.measured.keys().filter_map(|k| k.split_once('.').map(|(kernel, _)| kernel)).collect();
    let required = ["avgpool2d", "batchnorm", "conv2d", "coupling", "linear", "loss"];
    let missing: Vec<&str> = required.iter().copied().filter(|k| !kernels.contains(k)).collect();
    let worst = p.measured.values().filter_map(Value::as_f64).fold(0.0, f64::max);
    Verdict {
        passed: p.passed && missing.is_empty(),
        summary: format!("{} checks over {kernels:?}, worst rel error {worst:.2e}, missing {missing:?}", p.measured.len()),
    }
}

fn memory_depth(cfg: &RunConfig) -> Verdict {
    let (report, elapsed) = select(cfg, &["memory_depth_law"]);
    let p = prop(&report, "memory_depth_law");
    let (fast, time) = within_budget(elapsed, Duration::from_secs(120));
    Verdict {
        passed: p.passed && fast,
        summary: format!(
            "reversible max/min resnet {} former {}; oracle R2 resnet {} former {}; {time}",
            measured(p, "resnet.reversible_max_over_min"),
            measured(p, "former.reversible_max_over_min"),
            measured(p, "resnet.oracle_r2"),
            measured(p, "former.oracle_r2"),
        ),
    }
}

fn memory_timesteps(cfg: &RunConfig) -> Verdict {
    let (report, _) = select(cfg, &["memory_timestep_law"]);
    let p = prop(&report, "memory_timestep_law");
    Verdict {
        passed: p.passed,
        summary: format!(
            "slope ratio resnet {} former {}; R2 reversible {} / {}",
            measured(p, "resnet.slope_ratio"),
            measured(p, "former.slope_ratio"),
            measured(p, "resnet.reversible_r2"),
            measured(p, "former.reversible_r2"),
        ),
    }
}

fn compute_overhead(cfg: &RunConfig) -> Verdict {
    let (report, _) = select(cfg, &["compute_overhead"]);
    let p = prop(&report, "compute_overhead");
    Verdict {
        passed: p.passed,
        summary: format!(
            "{} configurations, ratio range [{}, {}]",
            measured(p, "configurations"),
            measured(p, "min_ratio"),
            measured(p, "max_ratio"),
        ),
    }
}

fn structure_counts(cfg: &RunConfig) -> Verdict {
    let (report, _) = select(cfg, &["structure_counts"]);
    let p = prop(&report, "structure_counts");
    let summary = p
        .measured
        .iter()
        .filter(|(k, _)| !k.starts_with("RevSResNet37.flops"))
        .map(|(k, v)| format!("{k} {v}"))
        .collect::<Vec<_>>()
        .join(", ");
    Verdict {
        passed: p.passed,
        summary,
    }
}

fn training_parity(cfg: &RunConfig) -> Verdict {
    let (report, elapsed) = select(cfg, &["training_equivalence"]);
    let p = prop(&report, "training_equivalence");
    let (fast, time) = within_budget(elapsed, Duration::from_secs(300));
    Verdict {
        passed: p.passed && fast && measured(p, "seeds") == &Value::from(3),
        summary: format!(
            "{} seeds x {} epochs, max param rel error {}, accuracy gap {}; {time}",
            measured(p, "seeds"),
            measured(p, "epochs"),
            measured(p, "max_param_rel_error"),
            measured(p, "mean_accuracy_gap"),
        ),
    }
}

fn fault_controls(cfg: &RunConfig) -> Verdict {
    let clean = run_verify(cfg);
    let mut passed = clean.passed;
    let mut parts = vec![format!("clean run {}/{} pass", clean.properties.iter().filter(|p| p.passed).count(), PROPERTIES.len())];
    for fault in [Fault::SkipReset, Fault::CorruptStats] {
        let mut faulty = cfg.clone();
        faulty.verify.fault = Some(fault);
        let report = run_verify(&faulty);
        let failed: BTreeSet<&str> = report.properties.iter().filter(|p| !p.passed).map(|p| p.name).collect();
        let expected = expected_failures(Some(fault));
        passed &= failed == expected && !report.passed;
        parts.push(format!("{} fails {failed:?} (expected {expected:?})", fault.name()));
    }
    Verdict {
        passed,
        summary: parts.join("; "),
    }
}

fn main() {
    let cfg = RunConfig::with_family(Family::Resnet);
    let criteria: [(&str, fn(&RunConfig) -> Verdict); 9] = [
        ("reconstruction", reconstruction),
        ("gradient equivalence", gradient_equivalence),
        ("finite differences", finite_differences),
        ("memory vs depth", memory_depth),
        ("memory vs time steps", memory_timesteps),
        ("compute overhead", compute_overhead),
        ("structure counts", structure_counts),
        ("training parity", training_parity),
        ("fault controls", fault_controls),
    ];
    let mut failures = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let v = check(&cfg);
        failures += usize::from(!v.passed);
        println!(
            "{} {}. {name}: {} [{:.1} s]",
            if v.passed { "PASS" } else { "FAIL" },
            i + 1,
            v.summary,
            start.elapsed().as_secs_f64()
        );
    }
    println!("{} of {} criteria passed", criteria.len() - failures, criteria.len());
    if failures > 0 {
        std::process::exit(1);
    }
}
