//! Model summaries: layer table, parameter count, FLOPs.

use revsnn_core::layers::LayerProfile;
use revsnn_core::models::{
    build_ms_resnet, build_revsformer, build_revsresnet, FormerConfig, Network, ResNetConfig,
};
use revsnn_core::{Precision, Result};
use serde::Serialize;
use std::fmt::Write as _;

/// Published architectures that can be summarized without a config file.
pub const PRESETS: [&str; 6] = [
    "revsresnet21",
    "revsresnet37",
    "revsresnet24",
    "ms-resnet18",
    "revsformer-2-384",
    "revsformer-4-384",
];

/// Builds a preset with 32-bit storage.
pub fn build_preset(name: &str, num_classes: usize) -> Option<Result<Network>> {
    let p = Precision::F32;
    Some(match name {
        "revsresnet21" => build_revsresnet(&ResNetConfig::revsresnet21(num_classes), 0, p),
        "revsresnet37" => build_revsresnet(&ResNetConfig::revsresnet37(num_classes), 0, p),
        "revsresnet24" => build_revsresnet(&ResNetConfig::revsresnet24(num_classes), 0, p),
        "ms-resnet18" => build_ms_resnet(&[2, 2, 2, 2], &[64, 128, 256, 512], &ResNetConfig::revsresnet21(num_classes), 0, p),
        "revsformer-2-384" => build_revsformer(&FormerConfig::full(2, 384, num_classes), 0, p),
        "revsformer-4-384" => build_revsformer(&FormerConfig::full(4, 384, num_classes), 0, p),
        _ => return None,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct Summary {
    pub name: String,
    pub timesteps: usize,
    pub input: [usize; 3],
    pub params: usize,
    pub forward_macs: u64,
    pub weight_layers: usize,
    pub layers: Vec<LayerProfile>,
}

pub fn summarize(net: &mut Network) -> Result<Summary> {
    let layers = net.profile(1)?;
    Ok(Summary {
        name: net.name.clone(),
        timesteps: net.timesteps,
        input: net.input_shape,
        params: net.param_count(),
        forward_macs: layers.iter().map(|l| l.macs).sum(),
        weight_layers: layers.iter().filter(|l| l.weight_layer).count(),
        layers,
    })
}

pub fn render(s: &Summary) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{}  (T = {}, input {:?})", s.name, s.timesteps, s.input);
    let _ = writeln!(out, "{:>4}  {:<14} {:<22} {:>12} {:>16}", "#", "layer", "output", "params", "macs");
    for (i, l) in s.layers.iter().enumerate() {
        let mark = if l.weight_layer { "*" } else { " " };
        let _ = writeln!(
            out,
            "{:>4}{} {:<14} {:<22} {:>12} {:>16}",
            i,
            mark,
            l.kind,
            format!("{:?}", l.output),
            l.params,
            l.macs
        );
    }
    let _ = writeln!(out, "weight layers (*): {}", s.weight_layers);
    let _ = writeln!(out, "parameters: {} ({:.3} M)", s.params, s.params as f64 / 1e6);
    let _ = writeln!(out, "forward MACs per image: {} ({:.3} G)", s.forward_macs, s.forward_macs as f64 / 1e9);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn preset_summary_counts_layers() {
        let mut net = build_preset("revsresnet21", 100).unwrap().unwrap();
        let s = summarize(&mut net).unwrap();
        assert_eq!(s.weight_layers, 21);
        assert!(render(&s).contains("weight layers (*): 21"));
        assert!(build_preset("nope", 10).is_none());
    }
}
