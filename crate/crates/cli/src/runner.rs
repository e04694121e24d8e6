//! Model and dataset construction from a [`RunConfig`], and the training
//! loop behind `revsnn train`.

use crate::config::{DatasetSection, RunConfig, Variant};
use crate::error::CliError;
use crate::idx::load_idx;
use revsnn_core::models::{
    build_former_counterpart, build_resnet_counterpart, build_revsformer, build_revsresnet, Family, FormerConfig,
    Network, ResNetConfig,
};
use revsnn_core::train::{evaluate, train_epoch, Dataset, EpochMetrics, EvalMetrics, TrainState};
use revsnn_core::{ExecCtx, Precision, Result};
use serde::Serialize;

pub fn resnet_config(cfg: &RunConfig, in_channels: usize, image_size: usize, num_classes: usize) -> ResNetConfig {
    let m = &cfg.model;
    ResNetConfig {
        neuron: m.neuron,
        ..ResNetConfig::desk(m.blocks.clone(), m.channels.clone(), image_size, in_channels, num_classes, cfg.run.timesteps)
    }
}

pub fn former_config(cfg: &RunConfig, in_channels: usize, image_size: usize, num_classes: usize) -> FormerConfig {
    let m = &cfg.model;
    FormerConfig {
        neuron: m.neuron,
        mlp_ratio: m.mlp_ratio,
        merge: m.merge,
        ..FormerConfig::desk(m.blocks[0], m.dim, m.heads, image_size, in_channels, num_classes, cfg.run.timesteps)
    }
}

/// Builds the configured network for inputs `[C, H, W]` with `H = W`.
pub fn build_network(
    cfg: &RunConfig,
    variant: Variant,
    image: [usize; 3],
    num_classes: usize,
    seed: u64,
    precision: Precision,
) -> Result<Network> {
    let [c, h, w] = image;
    if h != w {
        return Err(revsnn_core::Error::InvalidConfig(format!("images must be square, got {h}x{w}")));
    }
    match (cfg.model.family, variant) {
        (Family::Resnet, Variant::Reversible) => build_revsresnet(&resnet_config(cfg, c, h, num_classes), seed, precision),
        (Family::Resnet, Variant::Vanilla) => build_resnet_counterpart(&resnet_config(cfg, c, h, num_classes), seed, precision),
        (Family::Former, Variant::Reversible) => build_revsformer(&former_config(cfg, c, h, num_classes), seed, precision),
        (Family::Former, Variant::Vanilla) => build_former_counterpart(&former_config(cfg, c, h, num_classes), seed, precision),
    }
}

/// Train and test splits. Without a test set the training data is reused.
pub fn load_datasets(cfg: &RunConfig, seed: u64, precision: Precision) -> Result<(Dataset, Dataset), CliError> {
    match &cfg.dataset {
        DatasetSection::Synthetic {
            task,
            num_samples,
            test_samples,
            num_classes,
            image_size,
        } => {
            let all = task.generate(num_samples + test_samples, *image_size, *num_classes, seed, precision)?;
            if *test_samples == 0 {
                return Ok((all.clone(), all));
            }
            Ok(all.split_tail(*test_samples)?)
        }
        DatasetSection::Idx {
            images,
            labels,
            test_images,
            test_labels,
            num_classes,
        } => {
            let train = load_idx(images, labels, *num_classes, precision)?;
            let test = match (test_images, test_labels) {
                (Some(i), Some(l)) => load_idx(i, l, *num_classes, precision)?,
                (None, None) => train.clone(),
                _ => {
                    return Err(CliError::Config {
                        line: 0,
                        key: "test_images".into(),
                        message: "test_images and test_labels must be given together".into(),
                    })
                }
            };
            Ok((train, test))
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct EpochRecord {
    #[serde(flatten)]
    pub train: EpochMetrics,
    pub test_loss: f64,
    pub test_accuracy: f64,
}

#[derive(Debug, Serialize)]
pub struct TrainOutcome {
    pub model: String,
    pub params: usize,
    pub epochs: Vec<EpochRecord>,
    pub final_eval: EvalMetrics,
}

/// Trains `variant` of the configured model with `engine` from `cfg.run`.
pub fn train_run(
    cfg: &RunConfig,
    variant: Variant,
    seed: u64,
    epochs: usize,
    train: &Dataset,
    test: &Dataset,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<(TrainOutcome, Network)> {
    let ctx = ExecCtx::new(cfg.run.precision);
    train_run_in(cfg, variant, seed, epochs, train, test, &ctx, on_epoch)
}

/// [`train_run`] on a caller-provided context.
#[allow(clippy::too_many_arguments)]
pub fn train_run_in(
    cfg: &RunConfig,
    variant: Variant,
    seed: u64,
    epochs: usize,
    train: &Dataset,
    test: &Dataset,
    ctx: &ExecCtx,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<(TrainOutcome, Network)> {
    let precision = cfg.run.precision;
    let mut net = build_network(cfg, variant, train.image_shape(), train.num_classes, seed, precision)?;
    let params = net.param_count();
    let model = net.name.clone();
    let mut state = TrainState::new(net, cfg.optimizer, cfg.run.engine, seed, ctx)?;
    let mut records = Vec::with_capacity(epochs);
    for _ in 0..epochs {
        let m = train_epoch(&mut state, train, cfg.run.batch_size, ctx)?;
        let e = evaluate(&mut state.net, test, cfg.run.batch_size, ctx)?;
        let rec = EpochRecord {
            train: m,
            test_loss: e.loss,
            test_accuracy: e.accuracy,
        };
        on_epoch(&rec);
        records.push(rec);
    }
    let final_eval = evaluate(&mut state.net, test, cfg.run.batch_size, ctx)?;
    Ok((
        TrainOutcome {
            model,
            params,
            epochs: records,
            final_eval,
        },
        state.net,
    ))
}
