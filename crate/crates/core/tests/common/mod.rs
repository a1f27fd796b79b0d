#![allow(dead_code)]

use fedyolo_core::data::{partition_by_classes, split_local, synth_task};
use fedyolo_core::fl::{ClientState, Setup};
use fedyolo_core::peft::{ModuleKind, ModuleSpec};
use fedyolo_core::vit::{build_vit, ModelConfig};

pub fn micro() -> ModelConfig {
    ModelConfig::preset("micro").unwrap()
}

/// `per_task` clients for each of `tasks` 4-class tasks, `samples` samples
/// each (half train, half test), numbered task-major.
pub fn clients(tasks: usize, per_task: usize, samples: usize, classes_per_client: usize, seed: u64) -> Vec<ClientState> {
    let mut out = Vec::new();
    for task in 0..tasks {
        let per_class = (per_task * samples).div_ceil(4) + samples;
        let mut ds = synth_task(4, per_class, 16, 0.2, seed * 100 + task as u64).unwrap();
        ds.task_id = task;
        let part = partition_by_classes(&ds, per_task, classes_per_client, samples, seed + task as u64).unwrap();
        for idx in &part.client_indices {
            let split = split_local(&ds, idx, 0.5, seed).unwrap();
            out.push(ClientState {
                client_id: out.len(),
                task_id: task,
                train: ds.subset(&split.train).unwrap(),
                test: ds.subset(&split.test).unwrap(),
            });
        }
    }
    out
}

pub fn setup(tasks: usize, per_task: usize, samples: usize, kind: ModuleKind) -> Setup {
    let config = micro();
    Setup {
        backbone: build_vit(&config, 11).unwrap(),
        config,
        spec: ModuleSpec::new(kind),
        task_classes: vec![4; tasks],
        clients: clients(tasks, per_task, samples, 2, 3),
    }
}
