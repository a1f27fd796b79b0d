use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpdateMode {
    /// Every backbone and head parameter is trained and communicated.
    Full,
    /// A parameter-efficient module plus head on a frozen backbone.
    #[default]
    Modular,
    HeadOnly,
}

impl UpdateMode {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Full => "full",
            Self::Modular => "modular",
            Self::HeadOnly => "head_only",
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    /// Linear warmup from 0, then cosine decay to 0.
    #[default]
    WarmupCosine,
    Constant,
}

/// How the FedYolo server combines per-task uploads.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    /// Uploads are grouped by task and averaged per group.
    #[default]
    Grouped,
    /// Every client uploads a zero-padded `K·P` vector; the server sums them
    /// and normalizes each segment.
    Sparse,
}

fn d_rounds() -> usize {
    150
}
fn one() -> usize {
    1
}
fn d_batch() -> usize {
    32
}
fn d_warmup() -> f64 {
    0.1
}
fn d_momentum() -> f64 {
    0.9
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FedConfig {
    #[serde(default = "d_rounds")]
    pub rounds: usize,
    pub clients_per_round: usize,
    #[serde(default = "one")]
    pub local_epochs: usize,
    #[serde(default = "d_batch")]
    pub batch_size: usize,
    pub lr_peak: f64,
    #[serde(default = "d_warmup")]
    pub warmup_fraction: f64,
    #[serde(default = "d_momentum")]
    pub momentum: f64,
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default)]
    pub prox_mu: Option<f64>,
    #[serde(default)]
    pub update_mode: UpdateMode,
    #[serde(default)]
    pub lr_schedule: LrSchedule,
    #[serde(default)]
    pub aggregation: Aggregation,
    /// Local fine-tuning epochs after federated training (FedAvg+Local).
    #[serde(default)]
    pub personalization_epochs: usize,
    /// Evaluate every this many rounds; 0 evaluates only after the last.
    #[serde(default)]
    pub eval_every: usize,
    #[serde(default)]
    pub seed: u64,
}

impl FedConfig {
    pub fn new(clients_per_round: usize, lr_peak: f64) -> Self {
        Self {
            rounds: d_rounds(),
            clients_per_round,
            local_epochs: 1,
            batch_size: d_batch(),
            lr_peak,
            warmup_fraction: d_warmup(),
            momentum: d_momentum(),
            weight_decay: 0.0,
            prox_mu: None,
            update_mode: UpdateMode::default(),
            lr_schedule: LrSchedule::default(),
            aggregation: Aggregation::default(),
            personalization_epochs: 0,
            eval_every: 0,
            seed: 0,
        }
    }

    /// Every violated constraint as `field: reason`.
    pub fn problems(&self, num_clients: Option<usize>) -> Vec<String> {
        let mut out = Vec::new();
        if self.rounds == 0 {
            out.push("rounds: must be at least 1".into());
        }
        if self.clients_per_round == 0 {
            out.push("clients_per_round: must be at least 1".into());
        }
        if let Some(n) = num_clients {
            if self.clients_per_round > n {
                out.push(format!(
                    "clients_per_round: {} exceeds the {n} available clients",
                    self.clients_per_round
                ));
            }
        }
        if self.local_epochs == 0 {
            out.push("local_epochs: must be at least 1".into());
        }
        if self.batch_size == 0 {
            out.push("batch_size: must be at least 1".into());
        }
        if !(self.lr_peak.is_finite() && self.lr_peak > 0.0) {
            out.push(format!("lr_peak: {} must be positive", self.lr_peak));
        }
        if !(0.0..=1.0).contains(&self.warmup_fraction) {
            out.push(format!("warmup_fraction: {} is outside [0, 1]", self.warmup_fraction));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            out.push(format!("momentum: {} is outside [0, 1)", self.momentum));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            out.push(format!("weight_decay: {} must be nonnegative", self.weight_decay));
        }
        if let Some(mu) = self.prox_mu {
            if !(mu.is_finite() && mu >= 0.0) {
                out.push(format!("prox_mu: {mu} must be nonnegative"));
            }
        }
        out
    }

    pub fn validate(&self, num_clients: Option<usize>) -> Result<()> {
        let p = self.problems(num_clients);
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(p.join("; ")))
        }
    }
}

/// Learning rate at `step` of `total_steps`.
///
/// The warmup covers the first `floor(warmup_fraction · total_steps)`
/// steps, rising linearly from 0; the rest decays as
/// `lr_peak · (1 + cos(π·t)) / 2` with `t` going from 0 to `1 - 1/rest`.
pub fn lr_at(step: usize, total_steps: usize, cfg: &FedConfig) -> f64 {
    if cfg.lr_schedule == LrSchedule::Constant {
        return cfg.lr_peak;
    }
    let total = total_steps.max(1);
    let warm = ((cfg.warmup_fraction * total as f64).floor() as usize).min(total - 1);
    if step < warm {
        return cfg.lr_peak * step as f64 / warm as f64;
    }
    let t = (step - warm) as f64 / (total - warm) as f64;
    cfg.lr_peak * (1.0 + (PI * t.min(1.0)).cos()) / 2.0
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_examples() {
        let cfg = FedConfig::new(1, 0.1);
        assert_eq!(lr_at(0, 1000, &cfg), 0.0);
        assert_eq!(lr_at(100, 1000, &cfg), 0.1);
        assert!((lr_at(50, 1000, &cfg) - 0.05).abs() < 1e-15);
        let eps = 1.0 / 900.0;
        let last = lr_at(999, 1000, &cfg);
        assert!((last - 0.1 * (1.0 + (PI * (1.0 - eps)).cos()) / 2.0).abs() < 1e-15);
        assert!(last < 1e-6);
    }

    #[test]
    fn constant_schedule() {
        let mut cfg = FedConfig::new(1, 0.3);
        cfg.lr_schedule = LrSchedule::Constant;
        assert_eq!(lr_at(0, 10, &cfg), 0.3);
    }

    #[test]
    fn defaults_and_problems() {
        let cfg: FedConfig = serde_json::from_str(r#"{"clients_per_round": 2, "lr_peak": 0.01}"#).unwrap();
        assert_eq!(cfg, FedConfig::new(2, 0.01));
        assert_eq!((cfg.rounds, cfg.batch_size, cfg.momentum, cfg.warmup_fraction), (150, 32, 0.9, 0.1));
        let mut bad = cfg.clone();
        bad.momentum = 1.5;
        bad.clients_per_round = 9;
        let p = bad.problems(Some(4));
        assert_eq!(p.len(), 2, "{p:?}");
        assert!(p.iter().any(|s| s.starts_with("momentum:")));
    }
}
