use std::io::Write;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{Aggregation, FedConfig, UpdateMode};
use super::local::{derive_seed, local_tuning, personalize, ClientState, Learner};
use super::server::{fedyolo_round, sample_clients, TaskRegistry};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::peft::ModuleSpec;
use crate::telemetry::{self, CommLedger, CommTotals, Direction, MetricsRow};
use crate::tensor::{precision, with_precision};
use crate::vit::{ModelConfig, ParamSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    LocalOnly,
    #[serde(rename = "fedavg")]
    FedAvg,
    #[serde(rename = "fedavg_local")]
    FedAvgLocal,
    #[serde(rename = "fedprox")]
    FedProx,
    #[serde(rename = "fedyolo")]
    FedYolo,
}

impl Scheme {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::LocalOnly => "local_only",
            Self::FedAvg => "fedavg",
            Self::FedAvgLocal => "fedavg_local",
            Self::FedProx => "fedprox",
            Self::FedYolo => "fedyolo",
        }
    }
}

/// Everything a run needs besides the federated hyperparameters.
#[derive(Debug, Clone)]
pub struct Setup {
    pub config: ModelConfig,
    /// Pretrained (or random) backbone; its head, if any, is replaced.
    pub backbone: ParamSet,
    pub spec: ModuleSpec,
    pub task_classes: Vec<usize>,
    /// Client `i` must have `client_id == i`.
    pub clients: Vec<ClientState>,
}

impl Setup {
    pub fn num_tasks(&self) -> usize {
        self.task_classes.len()
    }

    fn validate(&self) -> Result<()> {
        if self.clients.is_empty() {
            return Err(Error::Config("no clients".into()));
        }
        if self.task_classes.is_empty() || self.task_classes.contains(&0) {
            return Err(Error::Config("every task needs at least one class".into()));
        }
        for (i, c) in self.clients.iter().enumerate() {
            if c.client_id != i {
                return Err(Error::Config(format!("client at position {i} has id {}", c.client_id)));
            }
            if c.task_id >= self.num_tasks() {
                return Err(Error::Protocol(format!("client {i} has unknown task {}", c.task_id)));
            }
            if c.train.is_empty() || c.test.is_empty() {
                return Err(Error::Data(format!("client {i} has an empty train or test split")));
            }
            for ds in [&c.train, &c.test] {
                if ds.num_classes > self.task_classes[c.task_id] {
                    return Err(Error::Config(format!(
                        "client {i} data has {} classes but task {} has {}",
                        ds.num_classes, c.task_id, self.task_classes[c.task_id]
                    )));
                }
            }
        }
        Ok(())
    }

    /// Union of the test splits of every client of `task`.
    pub fn task_test(&self, task: usize) -> Result<Dataset> {
        let parts: Vec<&Dataset> = self.clients.iter().filter(|c| c.task_id == task).map(|c| &c.test).collect();
        Dataset::concat(&parts)
    }
}

/// Per-round, per-task protocol trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub task: usize,
    pub clients: Vec<usize>,
    pub loss: f64,
    pub acc: Option<f64>,
    pub params_tx: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Personalization {
    pub epochs: usize,
    /// Mean over clients of the personalized model on its own test split.
    pub mean_local_acc: f64,
    /// Mean over clients of the global model on the pooled test set of the
    /// client's task, before and after personalization.
    pub global_acc_before: f64,
    pub global_acc_after: f64,
    pub forgetting_ratio: Option<f64>,
    pub per_client_acc: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub scheme: Scheme,
    pub update_mode: UpdateMode,
    pub num_tasks: usize,
    pub num_clients: usize,
    pub rounds: usize,
    pub clients_per_round: usize,
    /// Parameters one client uploads per round, per task.
    pub params_per_task: Vec<u64>,
    pub frozen_params: u64,
    pub metrics: Vec<MetricsRow>,
    pub trace: Vec<RoundRecord>,
    pub per_client_acc: Vec<f64>,
    pub personalization: Option<Personalization>,
    pub comm: CommTotals,
    pub backbone_digest_start: Option<String>,
    pub backbone_digest_end: Option<String>,
}

impl RunResult {
    pub fn final_metrics(&self) -> Option<&MetricsRow> {
        self.metrics.last()
    }
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub result: RunResult,
    pub ledger: CommLedger,
    pub registry: TaskRegistry,
    /// Per-client models for local-only runs and after personalization.
    pub client_models: Option<Vec<ParamSet>>,
}

pub fn run_scheme(scheme: Scheme, setup: &Setup, cfg: &FedConfig) -> Result<RunOutput> {
    run(scheme, setup, cfg)
}

pub fn run_fedyolo(setup: &Setup, cfg: &FedConfig) -> Result<RunOutput> {
    run(Scheme::FedYolo, setup, cfg)
}

pub fn run(scheme: Scheme, setup: &Setup, cfg: &FedConfig) -> Result<RunOutput> {
    setup.validate()?;
    cfg.validate(Some(setup.clients.len()))?;
    match scheme {
        Scheme::FedProx if cfg.prox_mu.is_none() => {
            return Err(Error::Config("prox_mu: required for fedprox".into()));
        }
        Scheme::FedYolo if cfg.update_mode == UpdateMode::Full => {
            return Err(Error::Config(
                "update_mode: fedyolo needs a frozen backbone (modular or head_only)".into(),
            ));
        }
        _ => {}
    }
    if cfg.aggregation == Aggregation::Sparse && scheme != Scheme::FedYolo {
        return Err(Error::Config("aggregation: sparse applies to fedyolo only".into()));
    }
    let registry = build_registry(scheme, setup, cfg)?;
    if scheme == Scheme::LocalOnly {
        run_local_only(setup, cfg, registry)
    } else {
        run_federated(scheme, setup, cfg, registry)
    }
}

fn build_registry(scheme: Scheme, setup: &Setup, cfg: &FedConfig) -> Result<TaskRegistry> {
    let shared = !matches!(scheme, Scheme::FedYolo | Scheme::LocalOnly);
    let classes: Vec<usize> = if shared {
        vec![*setup.task_classes.iter().max().expect("validated nonempty")]
    } else {
        setup.task_classes.clone()
    };
    let mut learners = Vec::new();
    let mut weights = Vec::new();
    let mut backbone: Option<Arc<ParamSet>> = None;
    for (k, &c) in classes.iter().enumerate() {
        let seed = derive_seed(cfg.seed, "init", &[k as u64]);
        let (learner, w) = Learner::init(&setup.backbone, &setup.config, c, cfg.update_mode, &setup.spec, seed)?;
        let shared_frozen = backbone.get_or_insert_with(|| Arc::clone(&learner.frozen));
        let learner = Arc::new(Learner {
            frozen: Arc::clone(shared_frozen),
            ..(*learner).clone()
        });
        learners.push(learner);
        weights.push(w);
    }
    Ok(TaskRegistry {
        backbone: backbone.expect("at least one task"),
        learners,
        weights,
        shared,
    })
}

fn digest(registry: &TaskRegistry) -> Option<String> {
    (!registry.backbone.is_empty()).then(|| registry.backbone.digest())
}

/// Accuracy bookkeeping for one evaluation point.
struct Scores {
    row: MetricsRow,
    per_client: Vec<f64>,
}

/// Scores client `i` with `models[i]` on its own test split.
fn score(setup: &Setup, models: &[(&Arc<Learner>, &ParamSet)], round: usize, loss: f64) -> Result<Scores> {
    let p = precision();
    let hits = setup
        .clients
        .par_iter()
        .zip(models.par_iter())
        .map(|(c, (l, w))| with_precision(p, || telemetry::correct(&l.model((*w).clone()), &c.test)))
        .collect::<Result<Vec<usize>>>()?;
    let mut task_hits = vec![0usize; setup.num_tasks()];
    let mut task_len = vec![0usize; setup.num_tasks()];
    let mut per_client = Vec::with_capacity(hits.len());
    for (c, &h) in setup.clients.iter().zip(&hits) {
        task_hits[c.task_id] += h;
        task_len[c.task_id] += c.test.len();
        per_client.push(h as f64 / c.test.len() as f64);
    }
    let total: usize = task_len.iter().sum();
    Ok(Scores {
        row: MetricsRow {
            round,
            global_acc: hits.iter().sum::<usize>() as f64 / total as f64,
            mean_local_acc: telemetry::mean(&per_client),
            per_task_acc: task_hits
                .iter()
                .zip(&task_len)
                .map(|(&h, &n)| if n == 0 { 0.0 } else { h as f64 / n as f64 })
                .collect(),
            loss,
        },
        per_client,
    })
}

fn due(cfg: &FedConfig, round: usize) -> bool {
    round == cfg.rounds || (cfg.eval_every > 0 && round.is_multiple_of(cfg.eval_every))
}

fn run_federated(scheme: Scheme, setup: &Setup, cfg: &FedConfig, mut registry: TaskRegistry) -> Result<RunOutput> {
    let n_clients = setup.clients.len();
    let k_total = registry.num_groups();
    let frozen = registry.backbone.total_count() as u64;
    let mut ledger = CommLedger::new();
    if frozen > 0 {
        for c in &setup.clients {
            ledger.record(0, c.client_id, c.task_id, Direction::Down, frozen);
        }
    }
    let digest_start = digest(&registry);
    let groups: Vec<usize> = setup.clients.iter().map(|c| registry.group_of(c)).collect::<Result<_>>()?;
    let upload = |k: usize, registry: &TaskRegistry| -> u64 {
        let p = registry.module_size(k) as u64;
        match cfg.aggregation {
            Aggregation::Grouped => p,
            Aggregation::Sparse => k_total as u64 * (p + 1),
        }
    };

    let mut metrics = Vec::new();
    let mut trace = Vec::new();
    let mut per_client = Vec::new();
    for round in 1..=cfg.rounds {
        let sampled = sample_clients(n_clients, cfg.clients_per_round, cfg.seed, round)?;
        for &c in &sampled {
            let k = groups[c];
            let task = setup.clients[c].task_id;
            ledger.record(round, c, task, Direction::Down, registry.module_size(k) as u64);
            ledger.record(round, c, task, Direction::Up, upload(k, &registry));
        }
        let out = fedyolo_round(&registry, &setup.clients, &sampled, cfg, round)?;
        registry.weights = out.weights;
        let loss = telemetry::mean(&out.losses.iter().map(|&(_, l)| l).collect::<Vec<_>>());

        let scores = if due(cfg, round) {
            let models: Vec<(&Arc<Learner>, &ParamSet)> = groups.iter().map(|&k| (&registry.learners[k], &registry.weights[k])).collect();
            let s = score(setup, &models, round, loss)?;
            metrics.push(s.row.clone());
            Some(s)
        } else {
            None
        };
        for task in 0..setup.num_tasks() {
            let here: Vec<(usize, f64)> = out
                .losses
                .iter()
                .copied()
                .filter(|&(c, _)| setup.clients[c].task_id == task)
                .collect();
            if here.is_empty() {
                continue;
            }
            trace.push(RoundRecord {
                round,
                task,
                clients: here.iter().map(|&(c, _)| c).collect(),
                loss: telemetry::mean(&here.iter().map(|&(_, l)| l).collect::<Vec<_>>()),
                acc: scores.as_ref().map(|s| s.row.per_task_acc[task]),
                params_tx: here.iter().map(|&(c, _)| upload(groups[c], &registry)).sum(),
            });
        }
        if let Some(s) = scores {
            per_client = s.per_client;
        }
    }
    let digest_end = digest(&registry);

    let mut client_models = None;
    let personalization = if scheme == Scheme::FedAvgLocal {
        let (p, models) = run_personalization(setup, cfg, &registry, &groups)?;
        client_models = Some(models);
        Some(p)
    } else {
        None
    };

    let result = RunResult {
        scheme,
        update_mode: cfg.update_mode,
        num_tasks: setup.num_tasks(),
        num_clients: n_clients,
        rounds: cfg.rounds,
        clients_per_round: cfg.clients_per_round,
        params_per_task: (0..setup.num_tasks())
            .map(|t| registry.module_size(if registry.shared { 0 } else { t }) as u64)
            .collect(),
        frozen_params: frozen,
        metrics,
        trace,
        per_client_acc: per_client,
        personalization,
        comm: ledger.totals(),
        backbone_digest_start: digest_start,
        backbone_digest_end: digest_end,
    };
    Ok(RunOutput {
        result,
        ledger,
        registry,
        client_models,
    })
}

fn run_personalization(
    setup: &Setup,
    cfg: &FedConfig,
    registry: &TaskRegistry,
    groups: &[usize],
) -> Result<(Personalization, Vec<ParamSet>)> {
    let p = precision();
    let tuned = setup
        .clients
        .par_iter()
        .map(|c| {
            with_precision(p, || {
                let k = groups[c.client_id];
                personalize(&registry.learners[k], c, &registry.weights[k], cfg).map(|o| o.params)
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let task_tests = (0..setup.num_tasks()).map(|t| setup.task_test(t)).collect::<Result<Vec<_>>>()?;
    let accs = setup
        .clients
        .par_iter()
        .zip(tuned.par_iter())
        .map(|(c, w)| {
            with_precision(p, || {
                let l = &registry.learners[groups[c.client_id]];
                let global = l.model(registry.weights[groups[c.client_id]].clone());
                let mine = l.model(w.clone());
                let pooled = &task_tests[c.task_id];
                Ok((
                    telemetry::accuracy(&mine, &c.test)?,
                    telemetry::accuracy(&global, pooled)?,
                    telemetry::accuracy(&mine, pooled)?,
                ))
            })
        })
        .collect::<Result<Vec<(f64, f64, f64)>>>()?;
    let local: Vec<f64> = accs.iter().map(|a| a.0).collect();
    let before = telemetry::mean(&accs.iter().map(|a| a.1).collect::<Vec<_>>());
    let after = telemetry::mean(&accs.iter().map(|a| a.2).collect::<Vec<_>>());
    Ok((
        Personalization {
            epochs: cfg.personalization_epochs,
            mean_local_acc: telemetry::mean(&local),
            global_acc_before: before,
            global_acc_after: after,
            forgetting_ratio: telemetry::forgetting_ratio(before, after).ok(),
            per_client_acc: local,
        },
        tuned,
    ))
}

/// Every client trains its own model every round; nothing is communicated.
fn run_local_only(setup: &Setup, cfg: &FedConfig, registry: TaskRegistry) -> Result<RunOutput> {
    let mut models: Vec<ParamSet> = setup.clients.iter().map(|c| registry.weights[c.task_id].clone()).collect();
    let digest_start = digest(&registry);
    let p = precision();
    let mut metrics = Vec::new();
    let mut trace = Vec::new();
    let mut per_client = Vec::new();
    for round in 1..=cfg.rounds {
        let outs = setup
            .clients
            .par_iter()
            .zip(models.par_iter())
            .map(|(c, w)| with_precision(p, || local_tuning(&registry.learners[c.task_id], c, w, cfg, round)))
            .collect::<Result<Vec<_>>>()?;
        let losses: Vec<f64> = outs.iter().map(|o| o.loss).collect();
        models = outs.into_iter().map(|o| o.params).collect();
        let loss = telemetry::mean(&losses);
        let scores = if due(cfg, round) {
            let pairs: Vec<(&Arc<Learner>, &ParamSet)> = setup
                .clients
                .iter()
                .zip(&models)
                .map(|(c, w)| (&registry.learners[c.task_id], w))
                .collect();
            let s = score(setup, &pairs, round, loss)?;
            metrics.push(s.row.clone());
            Some(s)
        } else {
            None
        };
        for task in 0..setup.num_tasks() {
            let ids: Vec<usize> = setup.clients.iter().filter(|c| c.task_id == task).map(|c| c.client_id).collect();
            if ids.is_empty() {
                continue;
            }
            trace.push(RoundRecord {
                round,
                task,
                loss: telemetry::mean(&ids.iter().map(|&c| losses[c]).collect::<Vec<_>>()),
                clients: ids,
                acc: scores.as_ref().map(|s| s.row.per_task_acc[task]),
                params_tx: 0,
            });
        }
        if let Some(s) = scores {
            per_client = s.per_client;
        }
    }
    let result = RunResult {
        scheme: Scheme::LocalOnly,
        update_mode: cfg.update_mode,
        num_tasks: setup.num_tasks(),
        num_clients: setup.clients.len(),
        rounds: cfg.rounds,
        clients_per_round: setup.clients.len(),
        params_per_task: vec![0; setup.num_tasks()],
        frozen_params: registry.backbone.total_count() as u64,
        metrics,
        trace,
        per_client_acc: per_client,
        personalization: None,
        comm: CommTotals::default(),
        backbone_digest_start: digest_start,
        backbone_digest_end: digest(&registry),
    };
    Ok(RunOutput {
        result,
        ledger: CommLedger::new(),
        registry,
        client_models: Some(models),
    })
}

/// Writes `round,task,clients,loss,acc,params_tx`; clients are
/// `;`-separated and `acc` is empty for rounds without evaluation.
pub fn write_trace_csv<W: Write>(trace: &[RoundRecord], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let err = |e: csv::Error| Error::Metric(format!("csv write: {e}"));
    w.write_record(["round", "task", "clients", "loss", "acc", "params_tx"])
        .map_err(err)?;
    for r in trace {
        let clients: Vec<String> = r.clients.iter().map(usize::to_string).collect();
        w.write_record([
            r.round.to_string(),
            r.task.to_string(),
            clients.join(";"),
            r.loss.to_string(),
            r.acc.map(|a| a.to_string()).unwrap_or_default(),
            r.params_tx.to_string(),
        ])
        .map_err(err)?;
    }
    w.flush().map_err(|e| Error::Metric(format!("csv flush: {e}")))?;
    Ok(())
}
