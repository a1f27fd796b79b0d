use std::path::{Path, PathBuf};

use fedyolo_core::fl::{Aggregation, FedConfig, PretrainRecipe, Scheme, UpdateMode};
use fedyolo_core::peft::{ModuleKind, ModuleSpec};
use fedyolo_core::tensor::Precision;
use fedyolo_core::vit::ModelConfig;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackboneInit {
    /// Centralized training on a synthetic upstream task (`pretrain`).
    #[default]
    Pretrained,
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum TaskData {
    Synth {
        classes: usize,
        samples_per_class: usize,
        #[serde(default = "d_sigma")]
        noise_sigma: f64,
        /// Defaults to `100 + task index`.
        #[serde(default)]
        data_seed: Option<u64>,
    },
    Cifar10 {
        path: PathBuf,
    },
}

fn d_sigma() -> f64 {
    0.1
}

impl TaskData {
    pub fn num_classes(&self) -> usize {
        match self {
            Self::Synth { classes, .. } => *classes,
            Self::Cifar10 { .. } => fedyolo_core::data::CIFAR10_CLASSES,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartitionBlock {
    pub clients: usize,
    /// Defaults to every class of the task (homogeneous).
    #[serde(default)]
    pub classes_per_client: Option<usize>,
    pub samples_per_client: usize,
    #[serde(default = "d_half")]
    pub train_fraction: f64,
    /// Per-client affine pixel shift strength; 0 disables it.
    #[serde(default)]
    pub client_shift: f64,
}

fn d_half() -> f64 {
    0.5
}

impl PartitionBlock {
    pub fn is_homogeneous(&self, num_classes: usize) -> bool {
        self.classes_per_client.is_none_or(|c| c == num_classes)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskBlock {
    pub data: TaskData,
    pub partition: PartitionBlock,
}

/// A validated experiment with every default filled in.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub model: String,
    pub module: ModuleSpec,
    pub scheme: Scheme,
    pub fed: FedConfig,
    pub backbone: BackboneInit,
    pub pretrain: PretrainRecipe,
    pub tasks: Vec<TaskBlock>,
    pub output_dir: PathBuf,
    pub seed: u64,
    pub precision: Precision,
}

impl ExperimentConfig {
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig::preset(&self.model).expect("validated preset")
    }

    pub fn num_clients(&self) -> usize {
        self.tasks.iter().map(|t| t.partition.clients).sum()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Overrides the run seed, keeping the fed block in sync.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.fed.seed = seed;
        self
    }
}

const KEYS: [&str; 11] = [
    "schema_version",
    "model",
    "module",
    "scheme",
    "fed",
    "backbone",
    "pretrain",
    "tasks",
    "output_dir",
    "seed",
    "precision",
];

const SCHEMES: &str = "local_only, fedavg, fedavg_local, fedprox, fedyolo";

/// Collects `path: reason` problems while walking the raw JSON.
#[derive(Default)]
struct Problems(Vec<String>);

impl Problems {
    fn push(&mut self, path: &str, reason: impl std::fmt::Display) {
        self.0.push(format!("{path}: {reason}"));
    }

    fn parse<T: DeserializeOwned>(&mut self, path: &str, v: &Value) -> Option<T> {
        match serde_json::from_value(v.clone()) {
            Ok(t) => Some(t),
            Err(e) => {
                self.push(path, e);
                None
            }
        }
    }

    fn field<T: DeserializeOwned>(&mut self, obj: &Map<String, Value>, key: &str) -> Option<T> {
        obj.get(key).and_then(|v| self.parse(key, v))
    }
}

/// Parses and checks an experiment config, filling every default.
///
/// Returns all problems at once, each as `path: reason`. `base` resolves
/// relative dataset paths.
pub fn validate(text: &str, base: &Path) -> Result<ExperimentConfig, Vec<String>> {
    let root: Value = serde_json::from_str(text).map_err(|e| vec![format!("<root>: invalid JSON: {e}")])?;
    let Value::Object(obj) = root else {
        return Err(vec!["<root>: expected a JSON object".into()]);
    };
    let mut p = Problems::default();
    for key in obj.keys() {
        if !KEYS.contains(&key.as_str()) {
            p.push(key, "unknown field");
        }
    }

    let schema_version = p.field::<u32>(&obj, "schema_version").unwrap_or(SCHEMA_VERSION);
    if schema_version != SCHEMA_VERSION {
        p.push(
            "schema_version",
            format!("{schema_version} is not supported (expected {SCHEMA_VERSION})"),
        );
    }

    let model = match obj.get("model") {
        None => {
            p.push("model", "required");
            None
        }
        Some(v) => p.parse::<String>("model", v).and_then(|name| match ModelConfig::preset(&name) {
            Ok(cfg) => Some((name, cfg)),
            Err(e) => {
                p.push("model", e);
                None
            }
        }),
    };

    let module = match obj.get("module") {
        None => Some(ModuleSpec::new(ModuleKind::Adapter)),
        Some(v) => p.parse::<ModuleSpec>("module", v).filter(|m| match m.validate() {
            Ok(()) => true,
            Err(e) => {
                p.push("module", e);
                false
            }
        }),
    };

    let scheme = match obj.get("scheme") {
        None | Some(Value::Null) => {
            p.push("scheme", "required");
            None
        }
        Some(Value::String(s)) if s.is_empty() => {
            p.push("scheme", "required");
            None
        }
        Some(v) => match serde_json::from_value::<Scheme>(v.clone()) {
            Ok(s) => Some(s),
            Err(_) => {
                p.push("scheme", format!("unknown scheme {v} (expected one of {SCHEMES})"));
                None
            }
        },
    };

    let top_seed = p.field::<u64>(&obj, "seed");
    let fed = match obj.get("fed") {
        None => {
            p.push("fed", "required");
            None
        }
        Some(Value::Object(f)) => {
            let mut ok = true;
            for key in ["clients_per_round", "lr_peak"] {
                if !f.contains_key(key) {
                    p.push(&format!("fed.{key}"), "required");
                    ok = false;
                }
            }
            if ok {
                p.parse::<FedConfig>("fed", &Value::Object(f.clone()))
            } else {
                None
            }
        }
        Some(_) => {
            p.push("fed", "expected an object");
            None
        }
    };
    let fed_seed_given = matches!(obj.get("fed"), Some(Value::Object(f)) if f.contains_key("seed"));
    let seed = match (top_seed, &fed) {
        (Some(s), Some(f)) if fed_seed_given && f.seed != s => {
            p.push("fed.seed", format!("{} conflicts with seed {s}", f.seed));
            s
        }
        (Some(s), _) => s,
        (None, Some(f)) => f.seed,
        (None, None) => 0,
    };

    let backbone = p.field::<BackboneInit>(&obj, "backbone").unwrap_or_default();
    let pretrain = match obj.get("pretrain") {
        None => Some(PretrainRecipe::default()),
        Some(v) => p.parse::<PretrainRecipe>("pretrain", v),
    };
    if let Some(r) = &pretrain {
        check_recipe(&mut p, r);
    }

    let mut tasks = Vec::new();
    match obj.get("tasks") {
        None => p.push("tasks", "required"),
        Some(Value::Array(items)) if items.is_empty() => p.push("tasks", "needs at least one task"),
        Some(Value::Array(items)) => {
            for (k, item) in items.iter().enumerate() {
                let path = format!("tasks[{k}]");
                if let Some(mut t) = p.parse::<TaskBlock>(&path, item) {
                    if let TaskData::Synth { data_seed, .. } = &mut t.data {
                        data_seed.get_or_insert(100 + k as u64);
                    }
                    if let TaskData::Cifar10 { path: file } = &mut t.data {
                        if file.is_relative() {
                            *file = base.join(&*file);
                        }
                    }
                    if let Some(cpc) = t.partition.classes_per_client {
                        if cpc == t.data.num_classes() {
                            t.partition.classes_per_client = None;
                        }
                    }
                    check_task(&mut p, &path, &t, model.as_ref().map(|m| &m.1));
                    tasks.push(t);
                }
            }
        }
        Some(_) => p.push("tasks", "expected an array"),
    }

    let output_dir = p.field::<PathBuf>(&obj, "output_dir").unwrap_or_else(|| PathBuf::from("runs/out"));
    let precision = p.field::<Precision>(&obj, "precision").unwrap_or_default();

    if let Some(fed) = &fed {
        // Only count clients when every task block parsed.
        let all_tasks = obj
            .get("tasks")
            .and_then(Value::as_array)
            .is_some_and(|a| a.len() == tasks.len() && !a.is_empty());
        let n = all_tasks.then(|| tasks.iter().map(|t| t.partition.clients).sum::<usize>());
        for problem in fed.problems(n) {
            p.0.push(format!("fed.{problem}"));
        }
        if let Some(scheme) = scheme {
            check_scheme(&mut p, scheme, fed);
        }
    }

    match (p.0.is_empty(), model, module, scheme, fed, pretrain) {
        (true, Some((model, _)), Some(module), Some(scheme), Some(mut fed), Some(pretrain)) => {
            fed.seed = seed;
            Ok(ExperimentConfig {
                schema_version,
                model,
                module,
                scheme,
                fed,
                backbone,
                pretrain,
                tasks,
                output_dir,
                seed,
                precision,
            })
        }
        _ => Err(p.0),
    }
}

pub fn validate_file(path: &Path) -> Result<ExperimentConfig, Vec<String>> {
    let text = std::fs::read_to_string(path).map_err(|e| vec![format!("{}: {e}", path.display())])?;
    validate(&text, path.parent().unwrap_or(Path::new(".")))
}

fn check_recipe(p: &mut Problems, r: &PretrainRecipe) {
    for (name, v) in [
        ("classes", r.classes),
        ("samples_per_class", r.samples_per_class),
        ("epochs", r.epochs),
        ("batch_size", r.batch_size),
    ] {
        if v == 0 {
            p.push(&format!("pretrain.{name}"), "must be at least 1");
        }
    }
    if !(r.lr_peak.is_finite() && r.lr_peak > 0.0) {
        p.push("pretrain.lr_peak", format!("{} must be positive", r.lr_peak));
    }
    if !(r.noise_sigma.is_finite() && r.noise_sigma >= 0.0) {
        p.push("pretrain.noise_sigma", format!("{} must be nonnegative", r.noise_sigma));
    }
}

fn check_task(p: &mut Problems, path: &str, t: &TaskBlock, model: Option<&ModelConfig>) {
    let classes = t.data.num_classes();
    match &t.data {
        TaskData::Synth {
            classes,
            samples_per_class,
            noise_sigma,
            ..
        } => {
            if *classes == 0 {
                p.push(&format!("{path}.data.classes"), "must be at least 1");
            }
            if *samples_per_class == 0 {
                p.push(&format!("{path}.data.samples_per_class"), "must be at least 1");
            }
            if !(noise_sigma.is_finite() && *noise_sigma >= 0.0) {
                p.push(&format!("{path}.data.noise_sigma"), format!("{noise_sigma} must be nonnegative"));
            }
        }
        TaskData::Cifar10 { path: file } => {
            if !file.is_file() {
                p.push(&format!("{path}.data.path"), format!("{} does not exist", file.display()));
            }
            if let Some(m) = model.filter(|m| m.image_size != 32 || m.channels != 3) {
                p.push(
                    &format!("{path}.data"),
                    format!(
                        "CIFAR-10 images are 3x32x32 but the model expects {}x{}x{}",
                        m.channels, m.image_size, m.image_size
                    ),
                );
            }
        }
    }
    let part = &t.partition;
    let pp = format!("{path}.partition");
    if part.clients == 0 {
        p.push(&format!("{pp}.clients"), "must be at least 1");
    }
    let cpc = part.classes_per_client.unwrap_or(classes);
    if cpc == 0 || cpc > classes {
        p.push(&format!("{pp}.classes_per_client"), format!("{cpc} must be in 1..={classes}"));
        return;
    }
    if part.samples_per_client <= cpc {
        p.push(
            &format!("{pp}.samples_per_client"),
            format!("{} leaves no test sample with {cpc} classes per client", part.samples_per_client),
        );
    }
    if !(part.train_fraction > 0.0 && part.train_fraction < 1.0) {
        p.push(
            &format!("{pp}.train_fraction"),
            format!("{} is outside (0, 1)", part.train_fraction),
        );
    }
    if !(part.client_shift.is_finite() && part.client_shift >= 0.0) {
        p.push(&format!("{pp}.client_shift"), format!("{} must be nonnegative", part.client_shift));
    }
    if let TaskData::Synth { samples_per_class, .. } = &t.data {
        let worst = peak_class_demand(classes, part.clients, cpc, part.samples_per_client);
        if worst > *samples_per_class {
            p.push(
                &pp,
                format!("some class needs {worst} samples but each class has {samples_per_class}"),
            );
        }
    }
}

/// Largest per-class demand of the round-robin class assignment, which
/// depends only on the class's position in the shuffled order.
pub fn peak_class_demand(classes: usize, clients: usize, cpc: usize, samples: usize) -> usize {
    let base = samples / cpc;
    let extra = samples % cpc;
    let mut demand = vec![0usize; classes];
    for m in 0..clients {
        for j in 0..cpc {
            demand[(m * cpc + j) % classes] += base + usize::from(j < extra);
        }
    }
    demand.into_iter().max().unwrap_or(0)
}

fn check_scheme(p: &mut Problems, scheme: Scheme, fed: &FedConfig) {
    if scheme == Scheme::FedProx && fed.prox_mu.is_none() {
        p.push("fed.prox_mu", "required for fedprox");
    }
    if scheme == Scheme::FedYolo && fed.update_mode == UpdateMode::Full {
        p.push("fed.update_mode", "fedyolo needs a frozen backbone (modular or head_only)");
    }
    if scheme != Scheme::FedYolo && fed.aggregation == Aggregation::Sparse {
        p.push("fed.aggregation", "sparse applies to fedyolo only");
    }
    if scheme != Scheme::FedAvgLocal && fed.personalization_epochs > 0 {
        p.push("fed.personalization_epochs", "only fedavg_local personalizes");
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal() -> Value {
        serde_json::json!({
            "model": "micro",
            "scheme": "fedyolo",
            "fed": {"clients_per_round": 2, "lr_peak": 0.05},
            "tasks": [{
                "data": {"source": "synth", "classes": 4, "samples_per_class": 16},
                "partition": {"clients": 4, "classes_per_client": 2, "samples_per_client": 8}
            }]
        })
    }

    fn check(v: &Value) -> Result<ExperimentConfig, Vec<String>> {
        validate(&v.to_string(), Path::new("."))
    }

    #[test]
    fn minimal_config_gets_defaults() {
        let c = check(&minimal()).unwrap();
        assert_eq!(c.fed.momentum, 0.9);
        assert_eq!(c.fed.batch_size, 32);
        assert_eq!(c.fed.rounds, 150);
        assert_eq!(c.fed.warmup_fraction, 0.1);
        assert_eq!(c.module.kind, ModuleKind::Adapter);
        assert_eq!(c.schema_version, SCHEMA_VERSION);
        assert!(matches!(c.tasks[0].data, TaskData::Synth { data_seed: Some(100), .. }));
        let echo = c.to_json();
        assert!(echo.contains("\"momentum\": 0.9"), "{echo}");
    }

    #[test]
    fn normalized_config_is_a_fixed_point() {
        let c = check(&minimal()).unwrap();
        assert_eq!(validate(&c.to_json(), Path::new(".")).unwrap(), c);
    }

    #[test]
    fn empty_scheme_is_required() {
        let mut v = minimal();
        v["scheme"] = "".into();
        assert_eq!(check(&v).unwrap_err(), vec!["scheme: required"]);
        v.as_object_mut().unwrap().remove("scheme");
        assert_eq!(check(&v).unwrap_err(), vec!["scheme: required"]);
    }

    #[test]
    fn momentum_out_of_range() {
        let mut v = minimal();
        v["fed"]["momentum"] = 1.5.into();
        let errs = check(&v).unwrap_err();
        assert_eq!(errs, vec!["fed.momentum: 1.5 is outside [0, 1)"]);
    }

    #[test]
    fn errors_are_aggregated() {
        let mut v = minimal();
        v["model"] = "vit_xl".into();
        v["scheme"] = "fedsgd".into();
        v["fed"] = serde_json::json!({"lr_peak": 0.1});
        v["tasks"][0]["partition"]["classes_per_client"] = 9.into();
        v["colour"] = "red".into();
        let errs = check(&v).unwrap_err();
        let paths: Vec<&str> = errs.iter().map(|e| e.split(':').next().unwrap()).collect();
        assert_eq!(
            paths,
            vec![
                "colour",
                "model",
                "scheme",
                "fed.clients_per_round",
                "tasks[0].partition.classes_per_client"
            ],
            "{errs:?}"
        );
    }

    #[test]
    fn scheme_constraints() {
        let mut v = minimal();
        v["fed"]["update_mode"] = "full".into();
        assert_eq!(
            check(&v).unwrap_err(),
            vec!["fed.update_mode: fedyolo needs a frozen backbone (modular or head_only)"]
        );
        let mut v = minimal();
        v["scheme"] = "fedprox".into();
        assert_eq!(check(&v).unwrap_err(), vec!["fed.prox_mu: required for fedprox"]);
    }

    #[test]
    fn infeasible_partition_and_too_many_sampled_clients() {
        let mut v = minimal();
        v["tasks"][0]["data"]["samples_per_class"] = 7.into();
        v["fed"]["clients_per_round"] = 5.into();
        let errs = check(&v).unwrap_err();
        assert_eq!(
            errs,
            vec![
                "tasks[0].partition: some class needs 8 samples but each class has 7",
                "fed.clients_per_round: 5 exceeds the 4 available clients",
            ]
        );
    }

    #[test]
    fn peak_demand_matches_partitioner() {
        use fedyolo_core::data::{partition_by_classes, synth_task};
        for (classes, clients, cpc, samples) in [(4, 4, 2, 8), (5, 3, 2, 7), (10, 7, 3, 10), (3, 5, 3, 4)] {
            let peak = peak_class_demand(classes, clients, cpc, samples);
            let ds = synth_task(classes, peak, 2, 0.0, 0).unwrap();
            assert!(partition_by_classes(&ds, clients, cpc, samples, 1).is_ok());
            let ds = synth_task(classes, peak - 1, 2, 0.0, 0).unwrap();
            assert!(partition_by_classes(&ds, clients, cpc, samples, 1).is_err());
        }
    }

    #[test]
    fn conflicting_seeds() {
        let mut v = minimal();
        v["seed"] = 3.into();
        v["fed"]["seed"] = 4.into();
        assert_eq!(check(&v).unwrap_err(), vec!["fed.seed: 4 conflicts with seed 3"]);
        v["fed"]["seed"] = 3.into();
        assert_eq!(check(&v).unwrap().fed.seed, 3);
    }
}
