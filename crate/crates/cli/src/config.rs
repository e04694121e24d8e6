//! Run configuration in a sectioned `key = value` text format.
//!
//! ```text
//! # comment
//! [model]
//! family = resnet
//! blocks = 1, 1
//! [run]
//! T = 4
//! ```
//!
//! Lists are comma separated. Strings may be quoted. Unknown sections and
//! keys are rejected with their line number.

use crate::error::CliError;
use revsnn_core::models::{Family, Merge};
use revsnn_core::neurons::{NeuronKind, NeuronParams};
use revsnn_core::train::{OptimizerConfig, Synthetic};
use revsnn_core::{Engine, Fault, Precision};
use serde::Serialize;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Reversible,
    Vanilla,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModelSection {
    pub family: Family,
    pub variant: Variant,
    /// Blocks per stage (ResNet) or a single block count (transformer).
    pub blocks: Vec<usize>,
    /// Per-stream stage widths (ResNet).
    pub channels: Vec<usize>,
    pub dim: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub merge: Merge,
    pub neuron: NeuronParams,
}

impl ModelSection {
    fn defaults(family: Family) -> Self {
        let neuron = match family {
            Family::Resnet => NeuronParams::if_neuron(),
            Family::Former => NeuronParams::lif(),
        };
        ModelSection {
            family,
            variant: Variant::Reversible,
            blocks: match family {
                Family::Resnet => vec![2],
                Family::Former => vec![2],
            },
            channels: vec![4],
            dim: 16,
            heads: 2,
            mlp_ratio: 4,
            merge: Merge::Average,
            neuron,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunSection {
    pub engine: Engine,
    pub timesteps: usize,
    pub batch_size: usize,
    pub precision: Precision,
    pub seed: u64,
    pub epochs: usize,
    pub output_dir: PathBuf,
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection {
            engine: Engine::Reversible,
            timesteps: 4,
            batch_size: 8,
            precision: Precision::F64,
            seed: 0,
            epochs: 5,
            output_dir: PathBuf::from("out"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum DatasetSection {
    Synthetic {
        task: Synthetic,
        num_samples: usize,
        test_samples: usize,
        num_classes: usize,
        image_size: usize,
    },
    Idx {
        images: PathBuf,
        labels: PathBuf,
        test_images: Option<PathBuf>,
        test_labels: Option<PathBuf>,
        num_classes: usize,
    },
}

impl Default for DatasetSection {
    fn default() -> Self {
        DatasetSection::Synthetic {
            task: Synthetic::TwoGaussians,
            num_samples: 64,
            test_samples: 32,
            num_classes: 2,
            image_size: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VerifySection {
    pub fault: Option<Fault>,
    pub reconstruction_blocks: usize,
    pub gradient_sequences: usize,
    pub training_seeds: usize,
    pub training_epochs: usize,
}

impl Default for VerifySection {
    fn default() -> Self {
        VerifySection {
            fault: None,
            reconstruction_blocks: 50,
            gradient_sequences: 20,
            training_seeds: 3,
            training_epochs: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchSection {
    pub families: Vec<Family>,
    pub depths: Vec<usize>,
    pub timesteps: Vec<usize>,
    pub dims: Vec<usize>,
    /// Fixed values used while another axis is swept.
    pub base_depth: usize,
    pub base_timesteps: usize,
    pub base_dim: usize,
    pub batch: usize,
    pub spatial: usize,
    pub tokens: usize,
}

impl Default for BenchSection {
    fn default() -> Self {
        BenchSection {
            families: vec![Family::Resnet, Family::Former],
            depths: vec![1, 2, 4, 8],
            timesteps: vec![1, 2, 4, 8],
            dims: vec![32, 64, 128],
            base_depth: 4,
            base_timesteps: 4,
            base_dim: 32,
            batch: 4,
            spatial: 8,
            tokens: 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunConfig {
    pub model: ModelSection,
    pub run: RunSection,
    pub optimizer: OptimizerConfig,
    pub dataset: DatasetSection,
    pub verify: VerifySection,
    pub bench: BenchSection,
}

impl RunConfig {
    pub fn with_family(family: Family) -> Self {
        RunConfig {
            model: ModelSection::defaults(family),
            run: RunSection::default(),
            optimizer: OptimizerConfig::adamw(0.01, 0.0),
            dataset: DatasetSection::default(),
            verify: VerifySection::default(),
            bench: BenchSection::default(),
        }
    }
}

struct Entry {
    line: usize,
    section: String,
    key: String,
    value: String,
}

fn err(line: usize, key: &str, message: impl Into<String>) -> CliError {
    CliError::Config {
        line,
        key: key.to_string(),
        message: message.into(),
    }
}

impl Entry {
    fn text(&self) -> String {
        let v = self.value.trim();
        v.strip_prefix('"').and_then(|s| s.strip_suffix('"')).unwrap_or(v).to_string()
    }

    fn usize(&self) -> Result<usize, CliError> {
        self.value
            .trim()
            .parse()
            .map_err(|_| err(self.line, &self.key, format!("expected a non-negative integer, found `{}`", self.value)))
    }

    fn positive(&self) -> Result<usize, CliError> {
        match self.usize()? {
            0 => Err(err(self.line, &self.key, "must be positive")),
            n => Ok(n),
        }
    }

    fn u64(&self) -> Result<u64, CliError> {
        self.value
            .trim()
            .parse()
            .map_err(|_| err(self.line, &self.key, format!("expected a non-negative integer, found `{}`", self.value)))
    }

    fn f64(&self) -> Result<f64, CliError> {
        match self.value.trim().parse::<f64>() {
            Ok(v) if v.is_finite() => Ok(v),
            _ => Err(err(self.line, &self.key, format!("expected a number, found `{}`", self.value))),
        }
    }

    fn list(&self) -> Result<Vec<usize>, CliError> {
        let items: Result<Vec<usize>, _> = self.value.split(',').map(|s| s.trim().parse::<usize>()).collect();
        match items {
            Ok(v) if !v.is_empty() && !v.contains(&0) => Ok(v),
            _ => Err(err(
                self.line,
                &self.key,
                format!("expected a comma-separated list of positive integers, found `{}`", self.value),
            )),
        }
    }

    fn choice<T>(&self, parse: impl Fn(&str) -> Option<T>, options: &str) -> Result<T, CliError> {
        parse(&self.text()).ok_or_else(|| err(self.line, &self.key, format!("expected one of {options}, found `{}`", self.value)))
    }
}

fn parse_entries(text: &str) -> Result<Vec<Entry>, CliError> {
    const SECTIONS: [&str; 6] = ["model", "run", "optimizer", "dataset", "verify", "bench"];
    let mut out = Vec::new();
    let mut section: Option<String> = None;
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        if let Some(name) = content.strip_prefix('[').and_then(|s| s.strip_suffix(']')) {
            let name = name.trim();
            if !SECTIONS.contains(&name) {
                return Err(err(line, name, "unknown section"));
            }
            if out.iter().any(|e: &Entry| e.section == name) || section.as_deref() == Some(name) {
                return Err(err(line, name, "duplicate section"));
            }
            section = Some(name.to_string());
            continue;
        }
        let (key, value) = content
            .split_once('=')
            .ok_or_else(|| err(line, content, "expected `key = value`"))?;
        let key = key.trim();
        let Some(section) = section.clone() else {
            return Err(err(line, key, "key outside of a section"));
        };
        if out.iter().any(|e: &Entry| e.section == section && e.key == key) {
            return Err(err(line, key, "duplicate key"));
        }
        out.push(Entry {
            line,
            section,
            key: key.to_string(),
            value: value.trim().to_string(),
        });
    }
    Ok(out)
}

fn parse_neuron_kind(s: &str) -> Option<NeuronKind> {
    match s {
        "lif" => Some(NeuronKind::Lif),
        "if" => Some(NeuronKind::If),
        _ => None,
    }
}

fn parse_precision(s: &str) -> Option<Precision> {
    match s {
        "f32" => Some(Precision::F32),
        "f64" => Some(Precision::F64),
        _ => None,
    }
}

fn parse_fault(s: &str) -> Option<Option<Fault>> {
    if s == "none" {
        Some(None)
    } else {
        Fault::parse(s).map(Some)
    }
}

fn parse_variant(s: &str) -> Option<Variant> {
    match s {
        "reversible" => Some(Variant::Reversible),
        "vanilla" => Some(Variant::Vanilla),
        _ => None,
    }
}

fn parse_merge(s: &str) -> Option<Merge> {
    match s {
        "average" => Some(Merge::Average),
        "concat" => Some(Merge::Concat),
        _ => None,
    }
}

fn parse_families(e: &Entry) -> Result<Vec<Family>, CliError> {
    e.text()
        .split(',')
        .map(|s| Family::parse(s.trim()).ok_or_else(|| err(e.line, &e.key, format!("unknown family `{}`", s.trim()))))
        .collect()
}

pub fn parse_config(text: &str) -> Result<RunConfig, CliError> {
    let entries = parse_entries(text)?;
    let family_entry = entries
        .iter()
        .find(|e| e.section == "model" && e.key == "family")
        .ok_or_else(|| {
            if entries.iter().any(|e| e.section == "model") || text.lines().any(|l| l.trim() == "[model]") {
                err(0, "family", "missing required key in [model]")
            } else {
                CliError::MissingSection("model".into())
            }
        })?;
    let family = family_entry.choice(Family::parse, "resnet, former")?;
    let mut cfg = RunConfig::with_family(family);
    let mut neuron_kind_set = false;

    let mut opt_kind = "adamw".to_string();
    let mut opt_kind_line = 0;
    let (mut lr, mut momentum, mut wd, mut beta1, mut beta2, mut eps) = (None, None, None, None, None, None);

    let mut source = "synthetic".to_string();
    let mut source_line = 0;
    let mut task = Synthetic::TwoGaussians;
    let (mut num_samples, mut test_samples, mut ds_classes, mut image_size) = (64, 32, 2, 8);
    let (mut images, mut labels, mut test_images, mut test_labels) = (None, None, None, None);
    let mut synthetic_keys = Vec::new();
    let mut idx_keys = Vec::new();

    for e in &entries {
        let k = e.key.as_str();
        match (e.section.as_str(), k) {
            ("model", "family") => {}
            ("model", "variant") => cfg.model.variant = e.choice(parse_variant, "reversible, vanilla")?,
            ("model", "blocks") => cfg.model.blocks = e.list()?,
            ("model", "channels") => cfg.model.channels = e.list()?,
            ("model", "dim") => cfg.model.dim = e.positive()?,
            ("model", "heads") => cfg.model.heads = e.positive()?,
            ("model", "mlp_ratio") => cfg.model.mlp_ratio = e.positive()?,
            ("model", "merge") => cfg.model.merge = e.choice(parse_merge, "average, concat")?,
            ("model", "neuron") => {
                let kind = e.choice(parse_neuron_kind, "lif, if")?;
                let base = match kind {
                    NeuronKind::Lif => NeuronParams::lif(),
                    NeuronKind::If => NeuronParams::if_neuron(),
                };
                cfg.model.neuron = NeuronParams {
                    kind,
                    tau_m: if neuron_kind_set { cfg.model.neuron.tau_m } else { base.tau_m },
                    ..cfg.model.neuron
                };
                neuron_kind_set = true;
            }
            ("model", "tau_m") => cfg.model.neuron.tau_m = e.f64()?,
            ("model", "v_th") => cfg.model.neuron.v_th = e.f64()?,
            ("model", "v_reset") => cfg.model.neuron.v_reset = e.f64()?,
            ("model", "surrogate_width") => cfg.model.neuron.surrogate_width = e.f64()?,

            ("run", "engine") => cfg.run.engine = e.choice(Engine::parse, "oracle, reversible")?,
            ("run", "T") => cfg.run.timesteps = e.positive()?,
            ("run", "batch_size") => cfg.run.batch_size = e.positive()?,
            ("run", "precision") => cfg.run.precision = e.choice(parse_precision, "f32, f64")?,
            ("run", "seed") => cfg.run.seed = e.u64()?,
            ("run", "epochs") => cfg.run.epochs = e.usize()?,
            ("run", "output_dir") => cfg.run.output_dir = PathBuf::from(e.text()),

            ("optimizer", "kind") => {
                opt_kind = e.text();
                opt_kind_line = e.line;
            }
            ("optimizer", "lr") => lr = Some(e.f64()?),
            ("optimizer", "momentum") => momentum = Some((e.f64()?, e.line)),
            ("optimizer", "weight_decay") => wd = Some(e.f64()?),
            ("optimizer", "beta1") => beta1 = Some((e.f64()?, e.line)),
            ("optimizer", "beta2") => beta2 = Some((e.f64()?, e.line)),
            ("optimizer", "eps") => eps = Some((e.f64()?, e.line)),

            ("dataset", "source") => {
                source = e.text();
                source_line = e.line;
            }
            ("dataset", "task") => {
                task = e.choice(Synthetic::parse, "two_gaussians, xor_patterns, poisson_rate")?;
                synthetic_keys.push((k, e.line));
            }
            ("dataset", "num_samples") => {
                num_samples = e.positive()?;
                synthetic_keys.push((k, e.line));
            }
            ("dataset", "test_samples") => {
                test_samples = e.usize()?;
                synthetic_keys.push((k, e.line));
            }
            ("dataset", "image_size") => {
                image_size = e.positive()?;
                synthetic_keys.push((k, e.line));
            }
            ("dataset", "num_classes") => ds_classes = e.positive()?,
            ("dataset", "images") => {
                images = Some(PathBuf::from(e.text()));
                idx_keys.push((k, e.line));
            }
            ("dataset", "labels") => {
                labels = Some(PathBuf::from(e.text()));
                idx_keys.push((k, e.line));
            }
            ("dataset", "test_images") => {
                test_images = Some(PathBuf::from(e.text()));
                idx_keys.push((k, e.line));
            }
            ("dataset", "test_labels") => {
                test_labels = Some(PathBuf::from(e.text()));
                idx_keys.push((k, e.line));
            }

            ("verify", "fault") => cfg.verify.fault = e.choice(parse_fault, "none, skip_reset, corrupt_stats")?,
            ("verify", "reconstruction_blocks") => cfg.verify.reconstruction_blocks = e.positive()?,
            ("verify", "gradient_sequences") => cfg.verify.gradient_sequences = e.positive()?,
            ("verify", "training_seeds") => cfg.verify.training_seeds = e.positive()?,
            ("verify", "training_epochs") => cfg.verify.training_epochs = e.positive()?,

            ("bench", "families") => cfg.bench.families = parse_families(e)?,
            ("bench", "depths") => cfg.bench.depths = e.list()?,
            ("bench", "timesteps") => cfg.bench.timesteps = e.list()?,
            ("bench", "dims") => cfg.bench.dims = e.list()?,
            ("bench", "base_depth") => cfg.bench.base_depth = e.positive()?,
            ("bench", "base_timesteps") => cfg.bench.base_timesteps = e.positive()?,
            ("bench", "base_dim") => cfg.bench.base_dim = e.positive()?,
            ("bench", "batch") => cfg.bench.batch = e.positive()?,
            ("bench", "spatial") => cfg.bench.spatial = e.positive()?,
            ("bench", "tokens") => cfg.bench.tokens = e.positive()?,

            (section, key) => return Err(err(e.line, key, format!("unknown key in [{section}]"))),
        }
    }

    cfg.optimizer = match opt_kind.as_str() {
        "sgd" => {
            for (name, v) in [("beta1", beta1), ("beta2", beta2), ("eps", eps)] {
                if let Some((_, line)) = v {
                    return Err(err(line, name, "not an sgd setting"));
                }
            }
            OptimizerConfig::Sgd {
                lr: lr.unwrap_or(0.1),
                momentum: momentum.map_or(0.9, |m| m.0),
                weight_decay: wd.unwrap_or(0.0),
            }
        }
        "adamw" => {
            if let Some((_, line)) = momentum {
                return Err(err(line, "momentum", "not an adamw setting"));
            }
            OptimizerConfig::Adamw {
                lr: lr.unwrap_or(0.01),
                beta1: beta1.map_or(0.9, |b| b.0),
                beta2: beta2.map_or(0.999, |b| b.0),
                eps: eps.map_or(1e-8, |b| b.0),
                weight_decay: wd.unwrap_or(0.0),
            }
        }
        other => return Err(err(opt_kind_line, "kind", format!("expected one of sgd, adamw, found `{other}`"))),
    };

    cfg.dataset = match source.as_str() {
        "synthetic" => {
            if let Some((key, line)) = idx_keys.first() {
                return Err(err(*line, key, "only valid with source = idx"));
            }
            DatasetSection::Synthetic {
                task,
                num_samples,
                test_samples,
                num_classes: ds_classes,
                image_size,
            }
        }
        "idx" => {
            if let Some((key, line)) = synthetic_keys.first() {
                return Err(err(*line, key, "only valid with source = synthetic"));
            }
            DatasetSection::Idx {
                images: images.ok_or_else(|| err(source_line, "images", "required with source = idx"))?,
                labels: labels.ok_or_else(|| err(source_line, "labels", "required with source = idx"))?,
                test_images,
                test_labels,
                num_classes: ds_classes,
            }
        }
        other => return Err(err(source_line, "source", format!("expected one of synthetic, idx, found `{other}`"))),
    };

    validate(&cfg, &entries)?;
    Ok(cfg)
}

fn line_of(entries: &[Entry], section: &str, key: &str) -> usize {
    entries
        .iter()
        .find(|e| e.section == section && e.key == key)
        .map_or(0, |e| e.line)
}

fn validate(cfg: &RunConfig, entries: &[Entry]) -> Result<(), CliError> {
    let m = &cfg.model;
    if m.family == Family::Resnet && m.blocks.len() != m.channels.len() {
        return Err(err(
            line_of(entries, "model", "channels"),
            "channels",
            format!("needs one width per stage ({} stages in blocks)", m.blocks.len()),
        ));
    }
    if m.family == Family::Former {
        if m.blocks.len() != 1 {
            return Err(err(line_of(entries, "model", "blocks"), "blocks", "transformer takes a single block count"));
        }
        if m.dim % m.heads != 0 {
            return Err(err(line_of(entries, "model", "heads"), "heads", format!("must divide dim {}", m.dim)));
        }
    }
    if let Err(e) = m.neuron.validate() {
        return Err(err(line_of(entries, "model", "tau_m").max(line_of(entries, "model", "v_th")), "neuron", e.to_string()));
    }
    let (OptimizerConfig::Sgd { lr, .. } | OptimizerConfig::Adamw { lr, .. }) = cfg.optimizer;
    if lr <= 0.0 {
        return Err(err(line_of(entries, "optimizer", "lr"), "lr", "must be positive"));
    }
    Ok(())
}

pub fn load_config(path: &Path) -> Result<RunConfig, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    parse_config(&text)
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join(", ")
}

/// Serializes to the text format; `parse_config` of the result yields an
/// equal config.
pub fn to_text(cfg: &RunConfig) -> String {
    let mut s = String::new();
    let m = &cfg.model;
    let _ = writeln!(s, "[model]");
    let _ = writeln!(s, "family = {}", m.family.name());
    let _ = writeln!(s, "variant = {}", if m.variant == Variant::Reversible { "reversible" } else { "vanilla" });
    let _ = writeln!(s, "blocks = {}", join(&m.blocks));
    let _ = writeln!(s, "channels = {}", join(&m.channels));
    let _ = writeln!(s, "dim = {}", m.dim);
    let _ = writeln!(s, "heads = {}", m.heads);
    let _ = writeln!(s, "mlp_ratio = {}", m.mlp_ratio);
    let _ = writeln!(s, "merge = {}", if m.merge == Merge::Average { "average" } else { "concat" });
    let _ = writeln!(s, "neuron = {}", if m.neuron.kind == NeuronKind::Lif { "lif" } else { "if" });
    let _ = writeln!(s, "tau_m = {:?}", m.neuron.tau_m);
    let _ = writeln!(s, "v_th = {:?}", m.neuron.v_th);
    let _ = writeln!(s, "v_reset = {:?}", m.neuron.v_reset);
    let _ = writeln!(s, "surrogate_width = {:?}", m.neuron.surrogate_width);

    let r = &cfg.run;
    let _ = writeln!(s, "\n[run]");
    let _ = writeln!(s, "engine = {}", r.engine.name());
    let _ = writeln!(s, "T = {}", r.timesteps);
    let _ = writeln!(s, "batch_size = {}", r.batch_size);
    let _ = writeln!(s, "precision = {}", r.precision.name());
    let _ = writeln!(s, "seed = {}", r.seed);
    let _ = writeln!(s, "epochs = {}", r.epochs);
    let _ = writeln!(s, "output_dir = \"{}\"", r.output_dir.display());

    let _ = writeln!(s, "\n[optimizer]");
    match cfg.optimizer {
        OptimizerConfig::Sgd {
            lr,
            momentum,
            weight_decay,
        } => {
            let _ = writeln!(s, "kind = sgd\nlr = {lr:?}\nmomentum = {momentum:?}\nweight_decay = {weight_decay:?}");
        }
        OptimizerConfig::Adamw {
            lr,
            beta1,
            beta2,
            eps,
            weight_decay,
        } => {
            let _ = writeln!(
                s,
                "kind = adamw\nlr = {lr:?}\nbeta1 = {beta1:?}\nbeta2 = {beta2:?}\neps = {eps:?}\nweight_decay = {weight_decay:?}"
            );
        }
    }

    let _ = writeln!(s, "\n[dataset]");
    match &cfg.dataset {
        DatasetSection::Synthetic {
            task,
            num_samples,
            test_samples,
            num_classes,
            image_size,
        } => {
            let _ = writeln!(
                s,
                "source = synthetic\ntask = {}\nnum_samples = {num_samples}\ntest_samples = {test_samples}\nnum_classes = {num_classes}\nimage_size = {image_size}",
                task.name()
            );
        }
        DatasetSection::Idx {
            images,
            labels,
            test_images,
            test_labels,
            num_classes,
        } => {
            let _ = writeln!(s, "source = idx\nimages = \"{}\"\nlabels = \"{}\"", images.display(), labels.display());
            if let Some(p) = test_images {
                let _ = writeln!(s, "test_images = \"{}\"", p.display());
            }
            if let Some(p) = test_labels {
                let _ = writeln!(s, "test_labels = \"{}\"", p.display());
            }
            let _ = writeln!(s, "num_classes = {num_classes}");
        }
    }

    let v = &cfg.verify;
    let _ = writeln!(s, "\n[verify]");
    let _ = writeln!(s, "fault = {}", v.fault.map_or("none", Fault::name));
    let _ = writeln!(s, "reconstruction_blocks = {}", v.reconstruction_blocks);
    let _ = writeln!(s, "gradient_sequences = {}", v.gradient_sequences);
    let _ = writeln!(s, "training_seeds = {}", v.training_seeds);
    let _ = writeln!(s, "training_epochs = {}", v.training_epochs);

    let b = &cfg.bench;
    let _ = writeln!(s, "\n[bench]");
    let fams: Vec<&str> = b.families.iter().map(|f| f.name()).collect();
    let _ = writeln!(s, "families = {}", fams.join(", "));
    let _ = writeln!(s, "depths = {}", join(&b.depths));
    let _ = writeln!(s, "timesteps = {}", join(&b.timesteps));
    let _ = writeln!(s, "dims = {}", join(&b.dims));
    let _ = writeln!(s, "base_depth = {}", b.base_depth);
    let _ = writeln!(s, "base_timesteps = {}", b.base_timesteps);
    let _ = writeln!(s, "base_dim = {}", b.base_dim);
    let _ = writeln!(s, "batch = {}", b.batch);
    let _ = writeln!(s, "spatial = {}", b.spatial);
    let _ = writeln!(s, "tokens = {}", b.tokens);
    s
}
