//! Vision Transformer backbone, scale presets and parameter accounting.
//!
//! Layout follows the usual pre-LN ViT: a linear patch embedding, a class
//! token, learned positional embeddings over `1 + patches` positions,
//! `depth` blocks of biased multi-head attention and a biased
//! `dim → mlp_ratio·dim → dim` MLP, a final layer norm and a biased linear
//! head on the class token.
//!
//! # Parameter accounting
//!
//! With every linear biased and every layer norm carrying a gain and a bias,
//! the total for a `p×p` patch, `c`-channel, `n`-patch model is
//!
//! ```text
//! (c·p²·d + d) + d + (n+1)·d                      patch embed, class token, positions
//!   + depth · (4d² + 4d + 2·mlp·d² + mlp·d + d + 4d)
//!   + 2d + (d·classes + classes)                   final norm, head
//! ```
//!
//! which gives 5,543,716 / 21,704,164 / 85,875,556 / 303,404,132 for the
//! tiny / small / base / large presets at 224 px with 100 classes. Whether
//! published totals include the class token and positional table is not
//! usually stated; including both is the only reading that matches all four.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::checkpoint::{self, Record};
use crate::tensor::{Graph, Tensor, Var};

pub const LN_EPS: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub depth: usize,
    pub dim: usize,
    pub heads: usize,
    #[serde(default = "default_mlp_ratio")]
    pub mlp_ratio: usize,
    pub num_classes: usize,
    #[serde(default = "yes")]
    pub includes_class_token: bool,
    #[serde(default = "yes")]
    pub includes_learned_pos_embed: bool,
}

fn default_mlp_ratio() -> usize {
    4
}

fn yes() -> bool {
    true
}

pub const PRESET_NAMES: [&str; 6] = ["vit_t", "vit_s", "vit_b", "vit_l", "micro", "mini"];

impl ModelConfig {
    fn standard(image_size: usize, patch_size: usize, depth: usize, dim: usize, heads: usize, num_classes: usize) -> Self {
        Self {
            image_size,
            patch_size,
            channels: 3,
            depth,
            dim,
            heads,
            mlp_ratio: 4,
            num_classes,
            includes_class_token: true,
            includes_learned_pos_embed: true,
        }
    }

    /// Named scale presets. The ViT presets are 224 px / 16 px patches with
    /// 100 classes; `micro` and `mini` are desk-scale models.
    pub fn preset(name: &str) -> Result<Self> {
        Ok(match name {
            "vit_t" => Self::standard(224, 16, 12, 192, 3, 100),
            "vit_s" => Self::standard(224, 16, 12, 384, 6, 100),
            "vit_b" => Self::standard(224, 16, 12, 768, 12, 100),
            "vit_l" => Self::standard(224, 16, 24, 1024, 16, 100),
            "micro" => Self::standard(16, 4, 2, 32, 2, 4),
            "mini" => Self::standard(32, 8, 4, 64, 4, 10),
            other => {
                return Err(Error::Config(format!(
                    "unknown preset `{other}` (expected one of {})",
                    PRESET_NAMES.join(", ")
                )))
            }
        })
    }

    pub fn with_classes(mut self, num_classes: usize) -> Self {
        self.num_classes = num_classes;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("image_size", self.image_size),
            ("patch_size", self.patch_size),
            ("channels", self.channels),
            ("depth", self.depth),
            ("dim", self.dim),
            ("heads", self.heads),
            ("mlp_ratio", self.mlp_ratio),
            ("num_classes", self.num_classes),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !self.image_size.is_multiple_of(self.patch_size) {
            return Err(Error::Config(format!(
                "image_size {} is not divisible by patch_size {}",
                self.image_size, self.patch_size
            )));
        }
        if !self.dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!("dim {} is not divisible by heads {}", self.dim, self.heads)));
        }
        if !self.includes_class_token {
            return Err(Error::Config("class-token-free pooling is not supported".into()));
        }
        Ok(())
    }

    pub fn num_patches(&self) -> usize {
        let side = self.image_size / self.patch_size;
        side * side
    }

    /// Token count entering the first block (class token plus patches).
    pub fn seq_len(&self) -> usize {
        self.num_patches() + usize::from(self.includes_class_token)
    }

    pub fn patch_dim(&self) -> usize {
        self.channels * self.patch_size * self.patch_size
    }

    pub fn mlp_dim(&self) -> usize {
        self.dim * self.mlp_ratio
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn head_params(&self) -> usize {
        self.dim * self.num_classes + self.num_classes
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) enum Init {
    Normal(f64),
    Zeros,
    Ones,
}

/// Every backbone tensor with its shape and initializer, in build order.
pub(crate) fn layout(cfg: &ModelConfig) -> Vec<(String, Vec<usize>, Init)> {
    let d = cfg.dim;
    let fan = |n: usize| Init::Normal(1.0 / (n as f64).sqrt());
    let mut out = vec![
        ("patch_embed.weight".to_string(), vec![cfg.patch_dim(), d], fan(cfg.patch_dim())),
        ("patch_embed.bias".to_string(), vec![d], Init::Zeros),
    ];
    if cfg.includes_class_token {
        out.push(("cls_token".into(), vec![1, d], Init::Normal(0.02)));
    }
    if cfg.includes_learned_pos_embed {
        out.push(("pos_embed".into(), vec![cfg.seq_len(), d], Init::Normal(0.02)));
    }
    for i in 0..cfg.depth {
        let p = |s: &str| format!("blocks.{i}.{s}");
        out.push((p("norm1.weight"), vec![d], Init::Ones));
        out.push((p("norm1.bias"), vec![d], Init::Zeros));
        for proj in ["q", "k", "v", "proj"] {
            out.push((p(&format!("attn.{proj}.weight")), vec![d, d], fan(d)));
            out.push((p(&format!("attn.{proj}.bias")), vec![d], Init::Zeros));
        }
        out.push((p("norm2.weight"), vec![d], Init::Ones));
        out.push((p("norm2.bias"), vec![d], Init::Zeros));
        out.push((p("mlp.fc1.weight"), vec![d, cfg.mlp_dim()], fan(d)));
        out.push((p("mlp.fc1.bias"), vec![cfg.mlp_dim()], Init::Zeros));
        out.push((p("mlp.fc2.weight"), vec![cfg.mlp_dim(), d], fan(cfg.mlp_dim())));
        out.push((p("mlp.fc2.bias"), vec![d], Init::Zeros));
    }
    out.push(("norm.weight".into(), vec![d], Init::Ones));
    out.push(("norm.bias".into(), vec![d], Init::Zeros));
    out.extend(head_layout(cfg));
    out
}

pub(crate) fn head_layout(cfg: &ModelConfig) -> Vec<(String, Vec<usize>, Init)> {
    vec![
        ("head.weight".into(), vec![cfg.dim, cfg.num_classes], Init::Normal(0.02)),
        ("head.bias".into(), vec![cfg.num_classes], Init::Zeros),
    ]
}

pub(crate) fn materialize(shape: &[usize], init: Init, rng: &mut ChaCha8Rng) -> Tensor {
    match init {
        Init::Normal(std) => Tensor::randn(shape, std, rng),
        Init::Zeros => Tensor::zeros(shape),
        Init::Ones => Tensor::full(shape, 1.0),
    }
}

/// Parameter count of the full model computed from its layout, without
/// allocating any weights.
pub fn layout_count(cfg: &ModelConfig) -> usize {
    layout(cfg).iter().map(|(_, s, _)| s.iter().product::<usize>()).sum()
}

pub fn is_head_param(name: &str) -> bool {
    name.starts_with("head.")
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub tensor: Arc<Tensor>,
    pub frozen: bool,
}

/// Named tensors with per-entry freeze flags. Iteration is lexicographic.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    entries: BTreeMap<String, Param>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor, frozen: bool) {
        self.entries.insert(
            name.into(),
            Param {
                tensor: Arc::new(tensor),
                frozen,
            },
        );
    }

    pub fn insert_shared(&mut self, name: impl Into<String>, tensor: Arc<Tensor>, frozen: bool) {
        self.entries.insert(name.into(), Param { tensor, frozen });
    }

    pub fn remove(&mut self, name: &str) -> Option<Param> {
        self.entries.remove(name)
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.entries.get(name)
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name).map(|p| p.tensor.as_ref())
    }

    /// Mutable access; copies the storage first if it is shared.
    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.get_mut(name).map(|p| Arc::make_mut(&mut p.tensor))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn set_frozen(&mut self, name: &str, frozen: bool) -> bool {
        match self.entries.get_mut(name) {
            Some(p) => {
                p.frozen = frozen;
                true
            }
            None => false,
        }
    }

    pub fn freeze_all(&mut self) {
        self.entries.values_mut().for_each(|p| p.frozen = true);
    }

    pub fn unfreeze_all(&mut self) {
        self.entries.values_mut().for_each(|p| p.frozen = false);
    }

    pub fn total_count(&self) -> usize {
        self.entries.values().map(|p| p.tensor.numel()).sum()
    }

    pub fn trainable_count(&self) -> usize {
        self.entries.values().filter(|p| !p.frozen).map(|p| p.tensor.numel()).sum()
    }

    pub fn frozen_count(&self) -> usize {
        self.entries.values().filter(|p| p.frozen).map(|p| p.tensor.numel()).sum()
    }

    fn filtered(&self, keep: impl Fn(&str, &Param) -> bool) -> ParamSet {
        ParamSet {
            entries: self
                .entries
                .iter()
                .filter(|(k, v)| keep(k, v))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    pub fn trainable(&self) -> ParamSet {
        self.filtered(|_, p| !p.frozen)
    }

    pub fn frozen(&self) -> ParamSet {
        self.filtered(|_, p| p.frozen)
    }

    pub fn select(&self, keep: impl Fn(&str) -> bool) -> ParamSet {
        self.filtered(|k, _| keep(k))
    }

    /// Moves every entry of `other` into `self`, replacing same-named ones.
    pub fn extend(&mut self, other: ParamSet) {
        self.entries.extend(other.entries);
    }

    /// All values concatenated in iteration order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.total_count());
        for p in self.entries.values() {
            out.extend_from_slice(p.tensor.data());
        }
        out
    }

    /// A copy of `self` with values replaced by consecutive chunks of `flat`.
    pub fn with_values(&self, flat: &[f64]) -> Result<ParamSet> {
        if flat.len() != self.total_count() {
            return Err(Error::Shape {
                op: "with_values",
                lhs: vec![self.total_count()],
                rhs: vec![flat.len()],
            });
        }
        let mut offset = 0;
        let mut out = ParamSet::new();
        for (name, p) in &self.entries {
            let n = p.tensor.numel();
            let t = Tensor::new(p.tensor.shape().to_vec(), flat[offset..offset + n].to_vec())?;
            out.insert(name.clone(), t, p.frozen);
            offset += n;
        }
        Ok(out)
    }

    pub fn is_bitwise_eq(&self, other: &ParamSet) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|((ka, a), (kb, b))| ka == kb && a.frozen == b.frozen && a.tensor.is_bitwise_eq(&b.tensor))
    }

    /// SHA-256 over names, shapes and the exact bits of every value.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for (name, p) in &self.entries {
            h.update((name.len() as u64).to_le_bytes());
            h.update(name.as_bytes());
            for &d in p.tensor.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for &x in p.tensor.data() {
                h.update(x.to_bits().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    pub fn save(&self, manifest: &Path, header: Option<serde_json::Value>) -> Result<()> {
        checkpoint::save(
            manifest,
            self.entries.iter().map(|(name, p)| Record {
                name,
                tensor: &p.tensor,
                frozen: p.frozen,
            }),
            header,
        )?;
        Ok(())
    }

    pub fn load(manifest: &Path) -> Result<(ParamSet, Option<serde_json::Value>)> {
        let (m, tensors) = checkpoint::load(manifest)?;
        let mut set = ParamSet::new();
        for (entry, t) in tensors {
            set.insert(entry.name, t, entry.frozen);
        }
        Ok((set, m.header))
    }
}

/// Parameter count over all entries, or only the trainable ones.
pub fn count_params(params: &ParamSet, trainable_only: bool) -> usize {
    if trainable_only {
        params.trainable_count()
    } else {
        params.total_count()
    }
}

/// A copy of `params` where only the classifier head is trainable.
pub fn head_only_mask(params: &ParamSet) -> ParamSet {
    let mut out = params.clone();
    for p in out.entries.iter_mut() {
        p.1.frozen = !is_head_param(p.0);
    }
    out
}

/// Builds a randomly initialized model; every entry starts trainable.
pub fn build_vit(cfg: &ModelConfig, seed: u64) -> Result<ParamSet> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut set = ParamSet::new();
    for (name, shape, init) in layout(cfg) {
        let t = materialize(&shape, init, &mut rng);
        set.insert(name, t, false);
    }
    Ok(set)
}

/// Replaces the classifier head with a freshly initialized one.
pub fn fresh_head(cfg: &ModelConfig, seed: u64) -> ParamSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut set = ParamSet::new();
    for (name, shape, init) in head_layout(cfg) {
        set.insert(name, materialize(&shape, init, &mut rng), false);
    }
    set
}

/// Parameter name → graph node for one forward pass.
#[derive(Debug, Default)]
pub struct Bindings {
    vars: BTreeMap<String, Var>,
}

impl Bindings {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds every entry of `set` as a leaf. Entries require gradients when
    /// `grad` is set and they are not frozen.
    pub fn bind(&mut self, g: &mut Graph, set: &ParamSet, grad: bool) {
        for (name, p) in set.iter() {
            let v = g.leaf_shared(Arc::clone(&p.tensor), grad && !p.frozen);
            self.vars.insert(name.to_string(), v);
        }
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Config(format!("missing parameter `{name}`")))
    }

    pub fn try_get(&self, name: &str) -> Option<Var> {
        self.vars.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, &v)| (k.as_str(), v))
    }
}

/// Points where a parameter-efficient module can hook into a block.
pub trait BlockExtension {
    /// Tokens inserted after the class token for the duration of `block`.
    fn prompts(&self, _g: &mut Graph, _vars: &Bindings, _block: usize) -> Result<Option<Var>> {
        Ok(None)
    }

    /// Additive term for the query (`v_proj == false`) or value projection.
    fn projection_delta(&self, _g: &mut Graph, _vars: &Bindings, _block: usize, _v_proj: bool, _x: Var) -> Result<Option<Var>> {
        Ok(None)
    }

    /// Transforms the MLP output before it joins the residual stream.
    fn after_mlp(&self, _g: &mut Graph, _vars: &Bindings, _block: usize, mlp_out: Var) -> Result<Var> {
        Ok(mlp_out)
    }
}

/// The bare backbone.
pub struct NoExtension;

impl BlockExtension for NoExtension {}

#[derive(Debug, Clone, Copy)]
pub struct ForwardOutput {
    pub logits: Var,
    /// Final-norm class-token representation, `[batch × dim]`.
    pub features: Var,
}

/// Rearranges `[B, C, H, W]` images into `[B·patches, C·p·p]` rows. Patches
/// are row-major over the grid; each row is ordered channel, then row, then
/// column inside the patch.
pub fn patchify(cfg: &ModelConfig, images: &Tensor) -> Result<Tensor> {
    let s = cfg.image_size;
    let c = cfg.channels;
    let shape = images.shape();
    if shape.len() != 4 || shape[1] != c || shape[2] != s || shape[3] != s {
        return Err(Error::Shape {
            op: "patchify",
            lhs: shape.to_vec(),
            rhs: vec![0, c, s, s],
        });
    }
    let b = shape[0];
    let p = cfg.patch_size;
    let side = s / p;
    let data = images.data();
    let mut out = Vec::with_capacity(images.numel());
    for n in 0..b {
        for py in 0..side {
            for px in 0..side {
                for ch in 0..c {
                    for dy in 0..p {
                        let row = ((n * c + ch) * s + py * p + dy) * s + px * p;
                        out.extend_from_slice(&data[row..row + p]);
                    }
                }
            }
        }
    }
    Ok(Tensor::from_parts(vec![b * side * side, cfg.patch_dim()], out))
}

fn linear(g: &mut Graph, vars: &Bindings, prefix: &str, x: Var) -> Result<Var> {
    let w = vars.get(&format!("{prefix}.weight"))?;
    let b = vars.get(&format!("{prefix}.bias"))?;
    let y = g.matmul(x, w)?;
    g.add_bias(y, b)
}

fn norm(g: &mut Graph, vars: &Bindings, prefix: &str, x: Var) -> Result<Var> {
    let gain = vars.get(&format!("{prefix}.weight"))?;
    let bias = vars.get(&format!("{prefix}.bias"))?;
    g.layer_norm(x, gain, bias, LN_EPS)
}

/// Runs the model on `images` (`[B, C, H, W]`) and returns logits and the
/// class-token representation.
pub fn forward(g: &mut Graph, vars: &Bindings, cfg: &ModelConfig, ext: &dyn BlockExtension, images: &Tensor) -> Result<ForwardOutput> {
    let batch = images.shape().first().copied().unwrap_or(0);
    let patches = g.leaf(patchify(cfg, images)?, false);
    let mut x = linear(g, vars, "patch_embed", patches)?;
    let cls = vars.get("cls_token")?;
    x = g.insert_rows(x, cls, batch, 0)?;
    if cfg.includes_learned_pos_embed {
        let pos = vars.get("pos_embed")?;
        x = g.add_rows(x, pos)?;
    }
    for i in 0..cfg.depth {
        let prefix = format!("blocks.{i}");
        let prompts = ext.prompts(g, vars, i)?;
        let prompt_len = match prompts {
            Some(p) => {
                let n = g.shape(p)[0];
                x = g.insert_rows(x, p, batch, 1)?;
                n
            }
            None => 0,
        };

        let h = norm(g, vars, &format!("{prefix}.norm1"), x)?;
        let mut q = linear(g, vars, &format!("{prefix}.attn.q"), h)?;
        if let Some(dq) = ext.projection_delta(g, vars, i, false, h)? {
            q = g.add(q, dq)?;
        }
        let k = linear(g, vars, &format!("{prefix}.attn.k"), h)?;
        let mut v = linear(g, vars, &format!("{prefix}.attn.v"), h)?;
        if let Some(dv) = ext.projection_delta(g, vars, i, true, h)? {
            v = g.add(v, dv)?;
        }
        let a = g.attention(q, k, v, batch, cfg.heads)?;
        let a = linear(g, vars, &format!("{prefix}.attn.proj"), a)?;
        x = g.add(x, a)?;

        let h = norm(g, vars, &format!("{prefix}.norm2"), x)?;
        let m = linear(g, vars, &format!("{prefix}.mlp.fc1"), h)?;
        let m = g.gelu(m)?;
        let m = linear(g, vars, &format!("{prefix}.mlp.fc2"), m)?;
        let m = ext.after_mlp(g, vars, i, m)?;
        x = g.add(x, m)?;

        if prompt_len > 0 {
            x = g.remove_rows(x, batch, 1, prompt_len)?;
        }
    }
    let x = norm(g, vars, "norm", x)?;
    let features = g.select_row(x, batch, 0)?;
    let logits = linear(g, vars, "head", features)?;
    Ok(ForwardOutput { logits, features })
}

/// Anything that maps a batch of images to `(logits, features)`.
pub trait Predict: Sync {
    fn predict(&self, images: &Tensor) -> Result<(Tensor, Tensor)>;
}

/// Gradient-free forward over `sets`, returning `(logits, features)`.
pub fn infer(cfg: &ModelConfig, sets: &[&ParamSet], ext: &dyn BlockExtension, images: &Tensor) -> Result<(Tensor, Tensor)> {
    let mut g = Graph::new();
    let mut vars = Bindings::new();
    for set in sets {
        vars.bind(&mut g, set, false);
    }
    let out = forward(&mut g, &vars, cfg, ext, images)?;
    Ok((g.value(out.logits).clone(), g.value(out.features).clone()))
}
