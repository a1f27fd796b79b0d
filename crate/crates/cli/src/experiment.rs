use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::time::Instant;

use fedyolo_core::data::{apply_client_shift, ingest_cifar10, partition_by_classes, split_local, synth_task, Dataset, PartitionSpec};
use fedyolo_core::fl::{self, derive_seed, ClientState, RunOutput, RunResult, Setup};
use fedyolo_core::telemetry::write_metrics_csv;
use fedyolo_core::tensor::with_precision;
use fedyolo_core::vit::build_vit;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{BackboneInit, ExperimentConfig, TaskData, SCHEMA_VERSION};
use crate::error::{Error, Result};

/// Everything built from a config before training starts.
pub struct Prepared {
    pub setup: Setup,
    pub partitions: Vec<PartitionSpec>,
    pub pretrain_acc: Option<f64>,
}

fn load_task(data: &TaskData, image_size: usize) -> Result<Dataset> {
    Ok(match data {
        TaskData::Synth {
            classes,
            samples_per_class,
            noise_sigma,
            data_seed,
        } => synth_task(*classes, *samples_per_class, image_size, *noise_sigma, data_seed.unwrap_or(0))?,
        TaskData::Cifar10 { path } => ingest_cifar10(path)?,
    })
}

/// Builds the backbone and every client's data. Must run under the
/// config's precision.
pub fn prepare(cfg: &ExperimentConfig) -> Result<Prepared> {
    let model = cfg.model_config();
    let (backbone, pretrain_acc) = match cfg.backbone {
        BackboneInit::Pretrained => {
            let p = fl::pretrain(&model, &cfg.pretrain)?;
            (p.params, Some(p.train_acc))
        }
        BackboneInit::Random => (build_vit(&model, derive_seed(cfg.seed, "backbone", &[]))?, None),
    };
    let mut clients = Vec::new();
    let mut partitions = Vec::new();
    let mut task_classes = Vec::new();
    for (k, task) in cfg.tasks.iter().enumerate() {
        let mut ds = load_task(&task.data, model.image_size)?;
        ds.task_id = k;
        let part = &task.partition;
        let cpc = part.classes_per_client.unwrap_or(ds.num_classes);
        let spec = partition_by_classes(
            &ds,
            part.clients,
            cpc,
            part.samples_per_client,
            derive_seed(cfg.seed, "partition", &[k as u64]),
        )?;
        for (i, idx) in spec.client_indices.iter().enumerate() {
            let split = split_local(&ds, idx, part.train_fraction, derive_seed(cfg.seed, "split", &[k as u64, i as u64]))?;
            let id = clients.len();
            let shift = |d: Dataset| apply_client_shift(&d, id, part.client_shift, derive_seed(cfg.seed, "shift", &[k as u64]));
            clients.push(ClientState {
                client_id: id,
                task_id: k,
                train: shift(ds.subset(&split.train)?),
                test: shift(ds.subset(&split.test)?),
            });
        }
        task_classes.push(ds.num_classes);
        partitions.push(spec);
    }
    Ok(Prepared {
        setup: Setup {
            config: model,
            backbone,
            spec: cfg.module.clone(),
            task_classes,
            clients,
        },
        partitions,
        pretrain_acc,
    })
}

/// Wall-clock and environment details, excluded from determinism checks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub prepare_seconds: f64,
    pub run_seconds: f64,
    pub threads: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultFile {
    pub schema_version: u32,
    pub input_hash: String,
    pub config: ExperimentConfig,
    pub pretrain_train_acc: Option<f64>,
    pub result: RunResult,
    pub timing: Timing,
}

/// Git-style blob hash of the normalized config followed by the raw bytes
/// of every dataset file it reads.
pub fn input_hash(cfg: &ExperimentConfig) -> Result<String> {
    let mut content = serde_json::to_vec(cfg).map_err(fedyolo_core::Error::from)?;
    for task in &cfg.tasks {
        if let TaskData::Cifar10 { path } = &task.data {
            content.extend(fs::read(path).map_err(|e| Error::io(path, e))?);
        }
    }
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", content.len()).as_bytes());
    h.update(&content);
    Ok(hex::encode(h.finalize()))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(|e| Error::io(path, e))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(fedyolo_core::Error::from)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Writes every artifact of `out` into `dir`.
fn write_artifacts(dir: &Path, cfg: &ExperimentConfig, prepared: &Prepared, out: &RunOutput, timing: Timing) -> Result<()> {
    let r = &out.result;
    write_metrics_csv(&r.metrics, r.num_tasks, create(&dir.join("metrics.csv"))?)?;
    out.ledger.write_csv(create(&dir.join("comm.csv"))?)?;
    fl::write_trace_csv(&r.trace, create(&dir.join("trace.csv"))?)?;
    write_json(&dir.join("partitions.json"), &prepared.partitions)?;

    let ckpt = dir.join("checkpoints");
    let header = |extra: serde_json::Value| {
        let mut h = serde_json::json!({"scheme": cfg.scheme, "update_mode": cfg.fed.update_mode, "model": cfg.model});
        h.as_object_mut()
            .expect("object")
            .extend(extra.as_object().cloned().unwrap_or_default());
        Some(h)
    };
    for (g, w) in out.registry.weights.iter().enumerate() {
        let name = if out.registry.shared {
            "global".to_string()
        } else {
            format!("task{g}")
        };
        w.save(&ckpt.join(format!("{name}.json")), header(serde_json::json!({"group": g})))?;
    }
    if let Some(models) = &out.client_models {
        for (i, w) in models.iter().enumerate() {
            w.save(&ckpt.join(format!("client{i}.json")), header(serde_json::json!({"client": i})))?;
        }
    }

    write_json(
        &dir.join("result.json"),
        &ResultFile {
            schema_version: SCHEMA_VERSION,
            input_hash: input_hash(cfg)?,
            config: cfg.clone(),
            pretrain_train_acc: prepared.pretrain_acc,
            result: r.clone(),
            timing,
        },
    )
}

/// Runs `cfg` and writes its artifacts to `dir` (default: the config's
/// `output_dir`). Nothing is written unless the run succeeds.
pub fn execute(cfg: &ExperimentConfig, dir: Option<&Path>) -> Result<(PathBuf, RunResult)> {
    let dir = dir.map_or_else(|| cfg.output_dir.clone(), Path::to_path_buf);
    with_precision(cfg.precision, || {
        let t0 = Instant::now();
        let prepared = prepare(cfg)?;
        let t1 = Instant::now();
        let out = fl::run(cfg.scheme, &prepared.setup, &cfg.fed)?;
        let timing = Timing {
            prepare_seconds: (t1 - t0).as_secs_f64(),
            run_seconds: t1.elapsed().as_secs_f64(),
            threads: rayon::current_num_threads(),
        };
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        write_artifacts(&dir, cfg, &prepared, &out, timing)?;
        Ok((dir, out.result))
    })
}
