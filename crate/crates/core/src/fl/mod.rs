//! Federated training: local SGD, server aggregation and the run drivers
//! for Local-only, FedAvg, FedAvg+Local, FedProx and FedYolo.
//!
//! Clients train on their own threads from immutable snapshots of the
//! server state; results are always reduced in ascending client id, so a
//! run is bitwise reproducible for any thread count.

mod config;
mod local;
mod pretrain;
mod run;
mod server;

pub use config::{lr_at, Aggregation, FedConfig, LrSchedule, UpdateMode};
pub use local::{derive_seed, local_tuning, personalize, steps_per_epoch, tune, ClientState, Learner, Model, TuneOutput, TuneSchedule};
pub use pretrain::{pretrain, pretrain_on, PretrainRecipe, Pretrained};
pub use run::{run, run_fedyolo, run_scheme, write_trace_csv, Personalization, RoundRecord, RunOutput, RunResult, Scheme, Setup};
pub use server::{aggregate, fedavg_round, fedyolo_round, sample_clients, RoundOutcome, TaskRegistry};
