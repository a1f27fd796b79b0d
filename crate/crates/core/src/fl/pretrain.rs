use serde::{Deserialize, Serialize};

use super::config::{FedConfig, UpdateMode};
use super::local::{derive_seed, steps_per_epoch, tune, Learner, TuneSchedule};
use crate::data::{synth_task, Dataset};
use crate::error::Result;
use crate::peft::{ModuleKind, ModuleSpec};
use crate::telemetry;
use crate::vit::{build_vit, ModelConfig, ParamSet};

/// Centralized full training on an upstream task, standing in for a
/// pretrained backbone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainRecipe {
    pub classes: usize,
    pub samples_per_class: usize,
    pub noise_sigma: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_peak: f64,
    pub data_seed: u64,
    pub seed: u64,
}

impl Default for PretrainRecipe {
    fn default() -> Self {
        Self {
            classes: 8,
            samples_per_class: 64,
            noise_sigma: 0.1,
            epochs: 10,
            batch_size: 32,
            lr_peak: 0.05,
            data_seed: 1_000,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Pretrained {
    /// Backbone and upstream head, all trainable flags cleared to frozen.
    pub params: ParamSet,
    pub train_acc: f64,
}

/// Trains `cfg` on a synthetic upstream task built from `recipe`.
pub fn pretrain(cfg: &ModelConfig, recipe: &PretrainRecipe) -> Result<Pretrained> {
    let upstream = synth_task(
        recipe.classes,
        recipe.samples_per_class,
        cfg.image_size,
        recipe.noise_sigma,
        recipe.data_seed,
    )?;
    pretrain_on(cfg, &upstream, recipe)
}

pub fn pretrain_on(cfg: &ModelConfig, upstream: &Dataset, recipe: &PretrainRecipe) -> Result<Pretrained> {
    let init = build_vit(
        &cfg.clone().with_classes(upstream.num_classes),
        derive_seed(recipe.seed, "pretrain-init", &[]),
    )?;
    let (learner, w) = Learner::init(
        &init,
        cfg,
        upstream.num_classes,
        UpdateMode::Full,
        &ModuleSpec::new(ModuleKind::HeadOnly),
        derive_seed(recipe.seed, "pretrain-head", &[]),
    )?;
    let mut opt = FedConfig::new(1, recipe.lr_peak);
    opt.batch_size = recipe.batch_size;
    opt.rounds = 1;
    opt.local_epochs = recipe.epochs;
    let sched = TuneSchedule {
        epochs: recipe.epochs,
        step_offset: 0,
        total_steps: recipe.epochs * steps_per_epoch(upstream.len(), recipe.batch_size),
        shuffle_seed: derive_seed(recipe.seed, "pretrain-shuffle", &[]),
    };
    let out = tune(&learner, upstream, &w, &opt, sched)?;
    let train_acc = telemetry::accuracy(&learner.model(out.params.clone()), upstream)?;
    let mut params = out.params;
    params.freeze_all();
    Ok(Pretrained { params, train_acc })
}
