//! Parameter-efficient modules on a frozen backbone.
//!
//! Every module kind trains a fresh classifier head next to its own
//! tensors; the backbone is shared read-only.
//!
//! - Adapter: one residual bottleneck per block on the MLP output,
//!   `m + up(gelu(down(m)))`, with a zero-initialized up-projection.
//! - LoRA: rank-`r` factors on the query and value projections,
//!   `x·W + b + (x·A)·B`, with `B` zero-initialized and scaling 1. The
//!   factors are never folded into the frozen weights.
//! - Prompt: `prompt_len` learned tokens per block, inserted after the class
//!   token before the block and dropped after it.
//! - Head-only: just the head.

use std::path::Path;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};
use crate::vit::{self, Bindings, BlockExtension, ForwardOutput, Init, ModelConfig, ParamSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModuleKind {
    Adapter,
    Lora,
    Prompt,
    HeadOnly,
}

impl ModuleKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "adapter" => Ok(Self::Adapter),
            "lora" => Ok(Self::Lora),
            "prompt" | "vpt" => Ok(Self::Prompt),
            "head_only" | "head" => Ok(Self::HeadOnly),
            other => Err(Error::Config(format!(
                "unknown module kind `{other}` (expected adapter, lora, prompt or head_only)"
            ))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Adapter => "adapter",
            Self::Lora => "lora",
            Self::Prompt => "prompt",
            Self::HeadOnly => "head_only",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LoraTarget {
    Q,
    V,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModuleSpec {
    pub kind: ModuleKind,
    #[serde(default = "eight")]
    pub bottleneck_dim: usize,
    #[serde(default = "eight")]
    pub lora_rank: usize,
    #[serde(default = "eight")]
    pub prompt_len: usize,
    #[serde(default = "default_targets")]
    pub lora_targets: Vec<LoraTarget>,
}

fn eight() -> usize {
    8
}

fn default_targets() -> Vec<LoraTarget> {
    vec![LoraTarget::Q, LoraTarget::V]
}

impl ModuleSpec {
    pub fn new(kind: ModuleKind) -> Self {
        Self {
            kind,
            bottleneck_dim: 8,
            lora_rank: 8,
            prompt_len: 8,
            lora_targets: default_targets(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("bottleneck_dim", self.bottleneck_dim),
            ("lora_rank", self.lora_rank),
            ("prompt_len", self.prompt_len),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if self.kind == ModuleKind::Lora && self.lora_targets.is_empty() {
            return Err(Error::Config("lora_targets must not be empty".into()));
        }
        Ok(())
    }

    fn targets(&self, t: LoraTarget) -> bool {
        self.kind == ModuleKind::Lora && self.lora_targets.contains(&t)
    }

    /// Module tensors (excluding the head) for `cfg`.
    pub(crate) fn layout(&self, cfg: &ModelConfig) -> Vec<(String, Vec<usize>, Init)> {
        let d = cfg.dim;
        let fan = |n: usize| Init::Normal(1.0 / (n as f64).sqrt());
        let mut out = Vec::new();
        for i in 0..cfg.depth {
            match self.kind {
                ModuleKind::Adapter => {
                    let r = self.bottleneck_dim;
                    out.push((format!("blocks.{i}.adapter.down.weight"), vec![d, r], fan(d)));
                    out.push((format!("blocks.{i}.adapter.down.bias"), vec![r], Init::Zeros));
                    out.push((format!("blocks.{i}.adapter.up.weight"), vec![r, d], Init::Zeros));
                    out.push((format!("blocks.{i}.adapter.up.bias"), vec![d], Init::Zeros));
                }
                ModuleKind::Lora => {
                    let r = self.lora_rank;
                    for (t, name) in [(LoraTarget::Q, "q"), (LoraTarget::V, "v")] {
                        if self.targets(t) {
                            out.push((format!("blocks.{i}.attn.{name}.lora_a"), vec![d, r], fan(d)));
                            out.push((format!("blocks.{i}.attn.{name}.lora_b"), vec![r, d], Init::Zeros));
                        }
                    }
                }
                ModuleKind::Prompt => {
                    out.push((format!("blocks.{i}.prompt"), vec![self.prompt_len, d], Init::Normal(0.02)));
                }
                ModuleKind::HeadOnly => {}
            }
        }
        out
    }

    pub fn count(&self, cfg: &ModelConfig) -> ModuleCount {
        ModuleCount {
            module: self.layout(cfg).iter().map(|(_, s, _)| s.iter().product::<usize>()).sum(),
            head: cfg.head_params(),
        }
    }
}

/// Trainable parameter count of a module, split into the module proper
/// and its classifier head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModuleCount {
    pub module: usize,
    pub head: usize,
}

impl ModuleCount {
    pub fn with_head(&self) -> usize {
        self.module + self.head
    }

    pub fn without_head(&self) -> usize {
        self.module
    }
}

fn lin(g: &mut Graph, vars: &Bindings, prefix: &str, x: Var) -> Result<Var> {
    let y = g.matmul(x, vars.get(&format!("{prefix}.weight"))?)?;
    g.add_bias(y, vars.get(&format!("{prefix}.bias"))?)
}

impl BlockExtension for ModuleSpec {
    fn prompts(&self, _g: &mut Graph, vars: &Bindings, block: usize) -> Result<Option<Var>> {
        if self.kind != ModuleKind::Prompt {
            return Ok(None);
        }
        vars.get(&format!("blocks.{block}.prompt")).map(Some)
    }

    fn projection_delta(&self, g: &mut Graph, vars: &Bindings, block: usize, v_proj: bool, x: Var) -> Result<Option<Var>> {
        let (target, name) = if v_proj { (LoraTarget::V, "v") } else { (LoraTarget::Q, "q") };
        if !self.targets(target) {
            return Ok(None);
        }
        let a = vars.get(&format!("blocks.{block}.attn.{name}.lora_a"))?;
        let b = vars.get(&format!("blocks.{block}.attn.{name}.lora_b"))?;
        let low = g.matmul(x, a)?;
        g.matmul(low, b).map(Some)
    }

    fn after_mlp(&self, g: &mut Graph, vars: &Bindings, block: usize, mlp_out: Var) -> Result<Var> {
        if self.kind != ModuleKind::Adapter {
            return Ok(mlp_out);
        }
        let h = lin(g, vars, &format!("blocks.{block}.adapter.down"), mlp_out)?;
        let h = g.gelu(h)?;
        let h = lin(g, vars, &format!("blocks.{block}.adapter.up"), h)?;
        g.add(mlp_out, h)
    }
}

/// A frozen backbone plus the trainable module and head for one task.
#[derive(Debug, Clone)]
pub struct AdaptedModel {
    pub config: ModelConfig,
    pub backbone: Arc<ParamSet>,
    pub module_params: ParamSet,
    pub spec: ModuleSpec,
}

/// Initializes `spec` on `backbone` with a fresh `config.num_classes` head.
///
/// Any head already in `backbone` is dropped; the remaining entries are
/// frozen.
pub fn attach(backbone: &ParamSet, config: &ModelConfig, spec: &ModuleSpec, seed: u64) -> Result<AdaptedModel> {
    config.validate()?;
    spec.validate()?;
    for (name, shape, _) in vit::layout(config) {
        if vit::is_head_param(&name) {
            continue;
        }
        match backbone.tensor(&name) {
            None => {
                return Err(Error::ModuleMismatch {
                    tensor: name,
                    reason: "missing from backbone".into(),
                })
            }
            Some(t) if t.shape() != shape.as_slice() => {
                return Err(Error::ModuleMismatch {
                    tensor: name,
                    reason: format!("backbone shape {:?} does not match config shape {shape:?}", t.shape()),
                })
            }
            Some(_) => {}
        }
    }
    let mut frozen = backbone.select(|n| !vit::is_head_param(n));
    frozen.freeze_all();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut module_params = ParamSet::new();
    for (name, shape, init) in spec.layout(config).into_iter().chain(vit::head_layout(config)) {
        if frozen.contains(&name) {
            return Err(Error::ModuleMismatch {
                tensor: name,
                reason: "module tensor collides with a backbone tensor".into(),
            });
        }
        module_params.insert(name, vit::materialize(&shape, init, &mut rng), false);
    }
    Ok(AdaptedModel {
        config: config.clone(),
        backbone: Arc::new(frozen),
        module_params,
        spec: spec.clone(),
    })
}

impl AdaptedModel {
    pub fn trainable_count(&self) -> usize {
        self.module_params.trainable_count()
    }

    pub fn backbone_digest(&self) -> String {
        self.backbone.digest()
    }

    /// Binds backbone and module tensors and runs the model. Module tensors
    /// require gradients when `grad` is set; backbone tensors never do.
    pub fn forward(&self, g: &mut Graph, images: &Tensor, grad: bool) -> Result<(Bindings, ForwardOutput)> {
        let mut vars = Bindings::new();
        vars.bind(g, &self.backbone, false);
        vars.bind(g, &self.module_params, grad);
        let out = vit::forward(g, &vars, &self.config, &self.spec, images)?;
        Ok((vars, out))
    }

    pub fn infer(&self, images: &Tensor) -> Result<(Tensor, Tensor)> {
        vit::infer(&self.config, &[&self.backbone, &self.module_params], &self.spec, images)
    }
}

impl vit::Predict for AdaptedModel {
    fn predict(&self, images: &Tensor) -> Result<(Tensor, Tensor)> {
        self.infer(images)
    }
}

/// The communicated part of an [`AdaptedModel`]: module tensors and head.
#[derive(Debug, Clone, PartialEq)]
pub struct ModuleBlob {
    pub spec: ModuleSpec,
    pub task_id: Option<usize>,
    pub params: ParamSet,
}

#[derive(Debug, Serialize, Deserialize)]
struct BlobHeader {
    spec: ModuleSpec,
    task_id: Option<usize>,
}

impl ModuleBlob {
    pub fn len(&self) -> usize {
        self.params.total_count()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Writes the blob with its spec and task id in the manifest header.
    pub fn save(&self, manifest: &Path) -> Result<()> {
        let header = serde_json::to_value(BlobHeader {
            spec: self.spec.clone(),
            task_id: self.task_id,
        })?;
        self.params.save(manifest, Some(header))
    }

    pub fn load(manifest: &Path) -> Result<Self> {
        let (params, header) = ParamSet::load(manifest)?;
        let header: BlobHeader = header
            .ok_or_else(|| Error::Format {
                path: manifest.to_path_buf(),
                reason: "module blob has no spec header".into(),
            })
            .and_then(|h| serde_json::from_value(h).map_err(Error::from))?;
        Ok(Self {
            spec: header.spec,
            task_id: header.task_id,
            params,
        })
    }
}

pub fn extract(model: &AdaptedModel) -> ModuleBlob {
    ModuleBlob {
        spec: model.spec.clone(),
        task_id: None,
        params: model.module_params.clone(),
    }
}

/// Checks that `params` has exactly the names and shapes of `expected`.
pub(crate) fn check_compatible(expected: &ParamSet, params: &ParamSet) -> Result<()> {
    for (name, p) in expected.iter() {
        match params.tensor(name) {
            None => {
                return Err(Error::ModuleMismatch {
                    tensor: name.to_string(),
                    reason: "missing from blob".into(),
                })
            }
            Some(t) if t.shape() != p.tensor.shape() => {
                return Err(Error::ModuleMismatch {
                    tensor: name.to_string(),
                    reason: format!("shape {:?}, expected {:?}", t.shape(), p.tensor.shape()),
                })
            }
            Some(_) => {}
        }
    }
    if let Some(extra) = params.names().find(|n| !expected.contains(n)) {
        return Err(Error::ModuleMismatch {
            tensor: extra.to_string(),
            reason: "not part of this model's module".into(),
        });
    }
    Ok(())
}

/// Replaces the module tensors of `model` with those in `blob`. The
/// backbone is shared, never copied or modified.
pub fn merge(model: &AdaptedModel, blob: &ModuleBlob) -> Result<AdaptedModel> {
    if blob.spec != model.spec {
        return Err(Error::ModuleMismatch {
            tensor: "<spec>".into(),
            reason: format!("blob spec {:?} differs from model spec {:?}", blob.spec, model.spec),
        });
    }
    check_compatible(&model.module_params, &blob.params)?;
    let mut params = blob.params.clone();
    params.unfreeze_all();
    Ok(AdaptedModel {
        config: model.config.clone(),
        backbone: Arc::clone(&model.backbone),
        module_params: params,
        spec: model.spec.clone(),
    })
}

/// Zero-padded encoding of a task's module: a vector of `num_tasks`
/// segments of the module's size, with the blob in segment `task_id`.
///
/// Summing such vectors over clients and then reading each segment gives
/// per-task sums without revealing which client sent which task.
pub fn sparse_encode(blob: &ModuleBlob, task_id: usize, num_tasks: usize) -> Result<Vec<f64>> {
    encode_flat(&blob.params.flatten(), task_id, num_tasks)
}

pub(crate) fn encode_flat(flat: &[f64], task_id: usize, num_tasks: usize) -> Result<Vec<f64>> {
    if task_id >= num_tasks {
        return Err(Error::Sparse(format!("task {task_id} out of range for {num_tasks} tasks")));
    }
    let p = flat.len();
    let mut out = vec![0.0; p * num_tasks];
    out[task_id * p..(task_id + 1) * p].copy_from_slice(flat);
    Ok(out)
}

/// Segment `task_id` of a vector produced by (sums of) [`sparse_encode`].
pub fn segment(vector: &[f64], task_id: usize, num_tasks: usize) -> Result<&[f64]> {
    if num_tasks == 0 || !vector.len().is_multiple_of(num_tasks) || task_id >= num_tasks {
        return Err(Error::Sparse(format!(
            "cannot take segment {task_id} of a length-{} vector over {num_tasks} tasks",
            vector.len()
        )));
    }
    let p = vector.len() / num_tasks;
    Ok(&vector[task_id * p..(task_id + 1) * p])
}

/// Inverse of [`sparse_encode`]. Fails unless exactly one segment holds a
/// nonzero entry: sums over several tasks must be split per segment by the
/// aggregator, not decoded.
pub fn sparse_decode(vector: &[f64], num_tasks: usize, spec: &ModuleSpec, cfg: &ModelConfig) -> Result<(usize, ModuleBlob)> {
    let mut template = ParamSet::new();
    for (name, shape, _) in spec.layout(cfg).into_iter().chain(vit::head_layout(cfg)) {
        template.insert(name, Tensor::zeros(&shape), false);
    }
    let p = template.total_count();
    if vector.len() != p * num_tasks {
        return Err(Error::Sparse(format!(
            "vector length {} is not {num_tasks} x module size {p}",
            vector.len()
        )));
    }
    let live: Vec<usize> = (0..num_tasks)
        .filter(|&k| vector[k * p..(k + 1) * p].iter().any(|&x| x != 0.0))
        .collect();
    let &[task_id] = live.as_slice() else {
        return Err(Error::Sparse(format!("expected exactly one nonzero segment, found {}", live.len())));
    };
    let params = template.with_values(&vector[task_id * p..(task_id + 1) * p])?;
    Ok((
        task_id,
        ModuleBlob {
            spec: spec.clone(),
            task_id: Some(task_id),
            params,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vit::{build_vit, ModelConfig};

    fn table_cfg(preset: &str) -> ModelConfig {
        ModelConfig::preset(preset).unwrap()
    }

    #[test]
    fn adapter_vit_t_count() {
        let c = ModuleSpec::new(ModuleKind::Adapter).count(&table_cfg("vit_t"));
        assert_eq!(c.with_head(), 58_564);
        assert_eq!(c.module, 12 * ((192 * 8 + 8) + (8 * 192 + 192)));
    }

    #[test]
    fn lora_vit_s_count() {
        let c = ModuleSpec::new(ModuleKind::Lora).count(&table_cfg("vit_s"));
        assert_eq!(c.with_head(), 185_956);
    }

    #[test]
    fn prompt_vit_l_count() {
        let c = ModuleSpec::new(ModuleKind::Prompt).count(&table_cfg("vit_l"));
        assert_eq!(c.with_head(), 299_108);
    }

    #[test]
    fn adapter_vit_l_head_exclusive() {
        let c = ModuleSpec::new(ModuleKind::Adapter).count(&table_cfg("vit_l"));
        assert_eq!(c.without_head(), 417_984);
        assert_eq!(c.with_head(), 520_484);
    }

    #[test]
    fn built_count_matches_layout() {
        let cfg = table_cfg("micro");
        let backbone = build_vit(&cfg, 0).unwrap();
        for kind in [ModuleKind::Adapter, ModuleKind::Lora, ModuleKind::Prompt, ModuleKind::HeadOnly] {
            let spec = ModuleSpec::new(kind);
            let m = attach(&backbone, &cfg, &spec, 1).unwrap();
            assert_eq!(m.trainable_count(), spec.count(&cfg).with_head(), "{kind:?}");
            assert_eq!(m.backbone.trainable_count(), 0);
            assert!(m.module_params.names().all(|n| !m.backbone.contains(n)));
        }
    }

    #[test]
    fn zero_dims_rejected() {
        let mut spec = ModuleSpec::new(ModuleKind::Adapter);
        spec.bottleneck_dim = 0;
        assert!(spec.validate().is_err());
        assert!(ModuleKind::parse("bitfit").is_err());
    }

    #[test]
    fn attach_rejects_mismatched_backbone() {
        let cfg = table_cfg("micro");
        let backbone = build_vit(&cfg, 0).unwrap();
        let wider = ModelConfig { dim: 64, ..cfg };
        let err = attach(&backbone, &wider, &ModuleSpec::new(ModuleKind::Lora), 0).unwrap_err();
        assert!(matches!(err, Error::ModuleMismatch { .. }));
    }

    #[test]
    fn lora_and_adapter_start_at_backbone_function() {
        let cfg = table_cfg("micro");
        let backbone = build_vit(&cfg, 3).unwrap();
        let images = Tensor::randn(&[3, 3, 16, 16], 0.5, &mut ChaCha8Rng::seed_from_u64(9));
        for kind in [ModuleKind::Lora, ModuleKind::Adapter] {
            let m = attach(&backbone, &cfg, &ModuleSpec::new(kind), 4).unwrap();
            let head = m.module_params.select(vit::is_head_param);
            let (plain, _) = vit::infer(&cfg, &[&m.backbone, &head], &vit::NoExtension, &images).unwrap();
            let (adapted, _) = m.infer(&images).unwrap();
            assert!(plain.is_bitwise_eq(&adapted), "{kind:?}");
        }
    }

    #[test]
    fn extract_merge_round_trip() {
        let cfg = table_cfg("micro");
        let backbone = build_vit(&cfg, 0).unwrap();
        let m = attach(&backbone, &cfg, &ModuleSpec::new(ModuleKind::Prompt), 5).unwrap();
        let merged = merge(&m, &extract(&m)).unwrap();
        assert!(merged.module_params.is_bitwise_eq(&m.module_params));
    }

    #[test]
    fn merge_rejects_other_spec() {
        let cfg = table_cfg("micro");
        let backbone = build_vit(&cfg, 0).unwrap();
        let a = attach(&backbone, &cfg, &ModuleSpec::new(ModuleKind::Adapter), 5).unwrap();
        let b = attach(&backbone, &cfg, &ModuleSpec::new(ModuleKind::Lora), 5).unwrap();
        assert!(merge(&a, &extract(&b)).is_err());

        let mut blob = extract(&a);
        let t = Tensor::zeros(&[7]);
        blob.params.insert("blocks.0.adapter.up.bias", t, false);
        match merge(&a, &blob) {
            Err(Error::ModuleMismatch { tensor, .. }) => assert_eq!(tensor, "blocks.0.adapter.up.bias"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn merges_leave_backbone_untouched() {
        let cfg = table_cfg("micro");
        let backbone = build_vit(&cfg, 0).unwrap();
        let mut m = attach(&backbone, &cfg, &ModuleSpec::new(ModuleKind::Adapter), 5).unwrap();
        let before = m.backbone_digest();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..100 {
            let mut blob = extract(&m);
            for name in blob.params.names().map(str::to_string).collect::<Vec<_>>() {
                let shape = blob.params.tensor(&name).unwrap().shape().to_vec();
                blob.params.insert(name, Tensor::randn(&shape, 1.0, &mut rng), false);
            }
            m = merge(&m, &blob).unwrap();
        }
        assert_eq!(m.backbone_digest(), before);
    }

    fn tiny_blob(values: &[f64]) -> ModuleBlob {
        let mut params = ParamSet::new();
        params.insert("w", Tensor::from_vec(values.to_vec()).unwrap(), false);
        ModuleBlob {
            spec: ModuleSpec::new(ModuleKind::HeadOnly),
            task_id: None,
            params,
        }
    }

    #[test]
    fn sparse_encode_places_segment() {
        let v = sparse_encode(&tiny_blob(&[1.0, 2.0, 3.0, 4.0]), 1, 3).unwrap();
        assert_eq!(v, vec![0.0, 0.0, 0.0, 0.0, 1.0, 2.0, 3.0, 4.0, 0.0, 0.0, 0.0, 0.0]);
        assert!(sparse_encode(&tiny_blob(&[1.0]), 3, 3).is_err());
    }

    #[test]
    fn sparse_sum_is_per_task() {
        let a = sparse_encode(&tiny_blob(&[1.0, 1.0]), 0, 2).unwrap();
        let b = sparse_encode(&tiny_blob(&[2.0, 2.0]), 1, 2).unwrap();
        let sum: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x + y).collect();
        assert_eq!(sum, vec![1.0, 1.0, 2.0, 2.0]);
        assert_eq!(segment(&sum, 1, 2).unwrap(), &[2.0, 2.0]);
    }

    #[test]
    fn sparse_decode_round_trip_and_errors() {
        let cfg = table_cfg("micro");
        let backbone = build_vit(&cfg, 0).unwrap();
        let spec = ModuleSpec::new(ModuleKind::Lora);
        let mut m = attach(&backbone, &cfg, &spec, 5).unwrap();
        // B starts at zero; give it values so every tensor is exercised.
        for name in ["blocks.0.attn.q.lora_b", "blocks.1.attn.v.lora_b"] {
            *m.module_params.tensor_mut(name).unwrap() = Tensor::full(&[8, 32], 0.25);
        }
        let blob = extract(&m);
        let v = sparse_encode(&blob, 2, 4).unwrap();
        let (k, decoded) = sparse_decode(&v, 4, &spec, &cfg).unwrap();
        assert_eq!(k, 2);
        assert!(decoded.params.is_bitwise_eq(&blob.params));

        let doubled: Vec<f64> = v.iter().zip(sparse_encode(&blob, 0, 4).unwrap()).map(|(a, b)| a + b).collect();
        assert!(matches!(sparse_decode(&doubled, 4, &spec, &cfg), Err(Error::Sparse(_))));
        assert!(sparse_decode(&vec![0.0; v.len()], 4, &spec, &cfg).is_err());
    }

    #[test]
    fn blob_file_round_trip() {
        let cfg = table_cfg("micro");
        let backbone = build_vit(&cfg, 0).unwrap();
        let m = attach(&backbone, &cfg, &ModuleSpec::new(ModuleKind::Adapter), 5).unwrap();
        let mut blob = extract(&m);
        blob.task_id = Some(2);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("task2.json");
        blob.save(&path).unwrap();
        assert_eq!(ModuleBlob::load(&path).unwrap(), blob);
    }
}
