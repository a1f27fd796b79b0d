use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::config::{Aggregation, FedConfig};
use super::local::{derive_seed, local_tuning, ClientState, Learner, TuneOutput};
use crate::error::{Error, Result};
use crate::peft::{encode_flat, segment};
use crate::tensor::{precision, with_precision};
use crate::vit::ParamSet;

/// `m` distinct client ids out of `num_clients`, uniformly at random for
/// `(seed, round)`, in ascending order.
pub fn sample_clients(num_clients: usize, m: usize, seed: u64, round: usize) -> Result<Vec<usize>> {
    if m == 0 || m > num_clients {
        return Err(Error::Protocol(format!("cannot sample {m} of {num_clients} clients")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "sample", &[round as u64]));
    let mut ids = rand::seq::index::sample(&mut rng, num_clients, m).into_vec();
    ids.sort_unstable();
    Ok(ids)
}

/// `Σ n_m·w_m / Σ n_m`, accumulated in the order given.
pub fn aggregate(updates: &[(usize, &ParamSet)]) -> Result<ParamSet> {
    let Some(&(_, first)) = updates.first() else {
        return Err(Error::Protocol("nothing to aggregate".into()));
    };
    let mut acc = vec![0.0; first.total_count()];
    let mut total = 0usize;
    for &(n, w) in updates {
        let flat = w.flatten();
        if flat.len() != acc.len() {
            return Err(Error::Protocol(format!(
                "update has {} parameters, expected {}",
                flat.len(),
                acc.len()
            )));
        }
        for (a, x) in acc.iter_mut().zip(&flat) {
            *a += n as f64 * x;
        }
        total += n;
    }
    finish(first, &acc, total)
}

fn finish(template: &ParamSet, sums: &[f64], total: usize) -> Result<ParamSet> {
    if total == 0 {
        return Err(Error::Protocol("aggregation weights sum to zero".into()));
    }
    let p = precision();
    let avg: Vec<f64> = sums.iter().map(|s| p.round(s / total as f64)).collect();
    template.with_values(&avg)
}

/// Shared frozen backbone plus one trainable set per task.
///
/// With `shared` set every client trains the single entry regardless of its
/// task, which is plain FedAvg over a common model.
#[derive(Debug, Clone)]
pub struct TaskRegistry {
    pub backbone: Arc<ParamSet>,
    pub learners: Vec<Arc<Learner>>,
    pub weights: Vec<ParamSet>,
    pub shared: bool,
}

impl TaskRegistry {
    pub fn num_groups(&self) -> usize {
        self.weights.len()
    }

    pub fn group_of(&self, client: &ClientState) -> Result<usize> {
        if self.shared {
            return Ok(0);
        }
        if client.task_id >= self.weights.len() {
            return Err(Error::Protocol(format!(
                "client {} has unknown task {} ({} tasks registered)",
                client.client_id,
                client.task_id,
                self.weights.len()
            )));
        }
        Ok(client.task_id)
    }

    /// Parameters a client of group `k` uploads per round.
    pub fn module_size(&self, k: usize) -> usize {
        self.weights[k].total_count()
    }
}

#[derive(Debug, Clone)]
pub struct RoundOutcome {
    pub weights: Vec<ParamSet>,
    /// `(client_id, mean training loss)` in ascending client order.
    pub losses: Vec<(usize, f64)>,
}

/// Trains `sampled` clients in parallel and returns their outputs in the
/// order of `sampled`.
pub(crate) fn train_clients(
    registry: &TaskRegistry,
    clients: &[ClientState],
    sampled: &[usize],
    cfg: &FedConfig,
    round: usize,
) -> Result<Vec<TuneOutput>> {
    let p = precision();
    sampled
        .par_iter()
        .map(|&c| {
            with_precision(p, || {
                let client = &clients[c];
                let k = registry.group_of(client)?;
                local_tuning(&registry.learners[k], client, &registry.weights[k], cfg, round)
            })
        })
        .collect()
}

/// One round over already-sampled clients: local tuning from each client's
/// task weights, then per-task averaging. Tasks nobody sampled keep their
/// weights untouched.
pub fn fedyolo_round(
    registry: &TaskRegistry,
    clients: &[ClientState],
    sampled: &[usize],
    cfg: &FedConfig,
    round: usize,
) -> Result<RoundOutcome> {
    if sampled.is_empty() {
        return Err(Error::Protocol("no clients sampled".into()));
    }
    let mut sampled = sampled.to_vec();
    sampled.sort_unstable();
    if sampled.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::Protocol("a client was sampled twice".into()));
    }
    if let Some(&c) = sampled.iter().find(|&&c| c >= clients.len()) {
        return Err(Error::Protocol(format!("client {c} does not exist")));
    }
    let outs = train_clients(registry, clients, &sampled, cfg, round)?;
    let groups = sampled
        .iter()
        .map(|&c| registry.group_of(&clients[c]))
        .collect::<Result<Vec<_>>>()?;
    let weights = match cfg.aggregation {
        Aggregation::Grouped => aggregate_grouped(registry, clients, &sampled, &groups, &outs)?,
        Aggregation::Sparse => aggregate_sparse(registry, clients, &sampled, &groups, &outs)?,
    };
    Ok(RoundOutcome {
        weights,
        losses: sampled.iter().zip(&outs).map(|(&c, o)| (c, o.loss)).collect(),
    })
}

fn aggregate_grouped(
    registry: &TaskRegistry,
    clients: &[ClientState],
    sampled: &[usize],
    groups: &[usize],
    outs: &[TuneOutput],
) -> Result<Vec<ParamSet>> {
    (0..registry.num_groups())
        .map(|k| {
            let updates: Vec<(usize, &ParamSet)> = sampled
                .iter()
                .zip(groups)
                .zip(outs)
                .filter(|((_, &g), _)| g == k)
                .map(|((&c, _), o)| (clients[c].train.len(), &o.params))
                .collect();
            if updates.is_empty() {
                Ok(registry.weights[k].clone())
            } else {
                aggregate(&updates)
            }
        })
        .collect()
}

/// Each client uploads `encode(n·w)` and `encode([n])`; the server only
/// ever sees the sums.
fn aggregate_sparse(
    registry: &TaskRegistry,
    clients: &[ClientState],
    sampled: &[usize],
    groups: &[usize],
    outs: &[TuneOutput],
) -> Result<Vec<ParamSet>> {
    let k_total = registry.num_groups();
    let size = registry.module_size(0);
    if (1..k_total).any(|k| registry.module_size(k) != size) {
        return Err(Error::Protocol(
            "sparse aggregation needs every task module to have the same size".into(),
        ));
    }
    let mut sum = vec![0.0; size * k_total];
    let mut counts = vec![0.0; k_total];
    for ((&c, &k), o) in sampled.iter().zip(groups).zip(outs) {
        let n = clients[c].train.len() as f64;
        let scaled: Vec<f64> = o.params.flatten().iter().map(|x| n * x).collect();
        for (s, x) in sum.iter_mut().zip(encode_flat(&scaled, k, k_total)?) {
            *s += x;
        }
        for (s, x) in counts.iter_mut().zip(encode_flat(&[n], k, k_total)?) {
            *s += x;
        }
    }
    (0..k_total)
        .map(|k| {
            if counts[k] == 0.0 {
                Ok(registry.weights[k].clone())
            } else {
                finish(&registry.weights[k], segment(&sum, k, k_total)?, counts[k] as usize)
            }
        })
        .collect()
}

/// One FedAvg round: every client in `clients` trains from `w_global` and
/// the results are averaged by sample count in client-id order.
pub fn fedavg_round(
    learner: &Arc<Learner>,
    w_global: &ParamSet,
    clients: &[ClientState],
    cfg: &FedConfig,
    round: usize,
) -> Result<ParamSet> {
    let registry = TaskRegistry {
        backbone: Arc::clone(&learner.frozen),
        learners: vec![Arc::clone(learner)],
        weights: vec![w_global.clone()],
        shared: true,
    };
    let ids: Vec<usize> = (0..clients.len()).collect();
    let mut out = fedyolo_round(&registry, clients, &ids, cfg, round)?;
    Ok(out.weights.remove(0))
}
