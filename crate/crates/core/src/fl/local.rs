use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use super::config::{lr_at, FedConfig, UpdateMode};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::peft::{self, ModuleKind, ModuleSpec};
use crate::tensor::{precision, Graph, Tensor};
use crate::vit::{self, Bindings, BlockExtension, ModelConfig, NoExtension, ParamSet, Predict};

/// Derives an independent stream seed from the run seed, a purpose tag and
/// integer coordinates such as round and client id.
pub fn derive_seed(seed: u64, tag: &str, parts: &[u64]) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(tag.as_bytes());
    for p in parts {
        h.update(p.to_le_bytes());
    }
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("digest has 32 bytes"))
}

/// Everything about a model except its trainable tensors: architecture,
/// the shared frozen tensors and the module hooks.
#[derive(Debug, Clone)]
pub struct Learner {
    pub config: ModelConfig,
    pub frozen: Arc<ParamSet>,
    pub spec: Option<ModuleSpec>,
}

impl Learner {
    /// Splits `backbone` according to `mode` for a `num_classes` task and
    /// returns the learner with its initial trainable set. The head is
    /// always fresh.
    pub fn init(
        backbone: &ParamSet,
        config: &ModelConfig,
        num_classes: usize,
        mode: UpdateMode,
        spec: &ModuleSpec,
        seed: u64,
    ) -> Result<(Arc<Learner>, ParamSet)> {
        let config = config.clone().with_classes(num_classes);
        let spec = match mode {
            UpdateMode::Full => None,
            UpdateMode::Modular => Some(spec.clone()),
            UpdateMode::HeadOnly => Some(ModuleSpec::new(ModuleKind::HeadOnly)),
        };
        let adapted = peft::attach(
            backbone,
            &config,
            spec.as_ref().unwrap_or(&ModuleSpec::new(ModuleKind::HeadOnly)),
            seed,
        )?;
        let (frozen, params) = match spec {
            Some(_) => (adapted.backbone, adapted.module_params),
            None => {
                let mut all = (*adapted.backbone).clone();
                all.extend(adapted.module_params);
                all.unfreeze_all();
                (Arc::new(ParamSet::new()), all)
            }
        };
        Ok((Arc::new(Learner { config, frozen, spec }), params))
    }

    fn ext(&self) -> &dyn BlockExtension {
        match &self.spec {
            Some(s) => s,
            None => &NoExtension,
        }
    }

    /// Mean cross-entropy on one batch and its gradient for every entry of
    /// `params`, in `params` order.
    pub fn loss_and_grads(&self, params: &ParamSet, images: &Tensor, labels: &[usize]) -> Result<(f64, Vec<Tensor>)> {
        let mut g = Graph::new();
        let mut vars = Bindings::new();
        vars.bind(&mut g, &self.frozen, false);
        vars.bind(&mut g, params, true);
        let out = vit::forward(&mut g, &vars, &self.config, self.ext(), images)?;
        let loss = g.cross_entropy(out.logits, labels)?;
        g.backward(loss)?;
        let value = g.value(loss).data()[0];
        let grads = params
            .iter()
            .map(|(name, p)| {
                let v = vars.get(name)?;
                Ok(g.grad(v).unwrap_or_else(|| Tensor::zeros(p.tensor.shape())))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok((value, grads))
    }

    pub fn infer(&self, params: &ParamSet, images: &Tensor) -> Result<(Tensor, Tensor)> {
        vit::infer(&self.config, &[&self.frozen, params], self.ext(), images)
    }

    pub fn model(self: &Arc<Self>, params: ParamSet) -> Model {
        Model {
            learner: Arc::clone(self),
            params,
        }
    }
}

/// A learner together with concrete trainable tensors.
#[derive(Debug, Clone)]
pub struct Model {
    pub learner: Arc<Learner>,
    pub params: ParamSet,
}

impl Predict for Model {
    fn predict(&self, images: &Tensor) -> Result<(Tensor, Tensor)> {
        self.learner.infer(&self.params, images)
    }
}

/// One participant: a task label and a local train/test split.
#[derive(Debug, Clone)]
pub struct ClientState {
    pub client_id: usize,
    pub task_id: usize,
    pub train: Dataset,
    pub test: Dataset,
}

/// Where a tuning run sits on its learning-rate schedule and how its
/// batches are shuffled.
#[derive(Debug, Clone, Copy)]
pub struct TuneSchedule {
    pub epochs: usize,
    /// Global step index of this run's first step.
    pub step_offset: usize,
    pub total_steps: usize,
    pub shuffle_seed: u64,
}

#[derive(Debug, Clone)]
pub struct TuneOutput {
    pub params: ParamSet,
    /// Mean training loss over all steps, proximal term included.
    pub loss: f64,
    pub steps: usize,
}

pub fn steps_per_epoch(n: usize, batch_size: usize) -> usize {
    n.div_ceil(batch_size)
}

/// Mini-batch SGD with momentum from `w_start` with fresh momentum buffers.
///
/// Per step: `v ← momentum·v + ∇L(w) + wd·w + μ·(w − w_start)` and
/// `w ← w − lr·v`, where the `μ` term is the gradient of the proximal
/// penalty `(μ/2)‖w − w_start‖²`.
pub fn tune(learner: &Learner, train: &Dataset, w_start: &ParamSet, cfg: &FedConfig, sched: TuneSchedule) -> Result<TuneOutput> {
    if train.is_empty() {
        return Err(Error::Data(format!("client train split `{}` is empty", train.name)));
    }
    let p = precision();
    let mu = cfg.prox_mu.unwrap_or(0.0);
    let start: Vec<Vec<f64>> = w_start.iter().map(|(_, q)| q.tensor.data().to_vec()).collect();
    let mut w = w_start.clone();
    let mut vel: Vec<Vec<f64>> = start.iter().map(|s| vec![0.0; s.len()]).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(sched.shuffle_seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut step = 0;
    let mut loss_sum = 0.0;
    for _ in 0..sched.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            let (images, labels) = train.batch(batch);
            let (mut loss, grads) = learner.loss_and_grads(&w, &images, &labels)?;
            let lr = lr_at(sched.step_offset + step, sched.total_steps, cfg);
            let names: Vec<String> = w.names().map(str::to_string).collect();
            for (i, name) in names.iter().enumerate() {
                let t = w.tensor_mut(name).expect("name taken from the set");
                let data = t.data_mut();
                let g = grads[i].data();
                for j in 0..data.len() {
                    let mut gj = g[j];
                    if cfg.weight_decay != 0.0 {
                        gj += cfg.weight_decay * data[j];
                    }
                    if mu != 0.0 {
                        let d = data[j] - start[i][j];
                        loss += 0.5 * mu * d * d;
                        gj += mu * d;
                    }
                    vel[i][j] = p.round(cfg.momentum * vel[i][j] + gj);
                    data[j] = p.round(data[j] - lr * vel[i][j]);
                }
                if data.iter().any(|x| !x.is_finite()) {
                    return Err(Error::NonFinite { op: "sgd step" });
                }
            }
            loss_sum += loss;
            step += 1;
        }
    }
    Ok(TuneOutput {
        params: w,
        loss: loss_sum / step as f64,
        steps: step,
    })
}

/// One client's local update in federated round `round` (1-based) of
/// `cfg.rounds`.
///
/// The learning rate follows the run-wide schedule over
/// `rounds · local_epochs · ⌈n/batch⌉` steps; batches are shuffled by
/// `(seed, round, client)`.
pub fn local_tuning(learner: &Learner, client: &ClientState, w_start: &ParamSet, cfg: &FedConfig, round: usize) -> Result<TuneOutput> {
    let per_round = cfg.local_epochs * steps_per_epoch(client.train.len(), cfg.batch_size);
    let sched = TuneSchedule {
        epochs: cfg.local_epochs,
        step_offset: round.saturating_sub(1) * per_round,
        total_steps: cfg.rounds * per_round,
        shuffle_seed: derive_seed(cfg.seed, "shuffle", &[round as u64, client.client_id as u64]),
    };
    tune(learner, &client.train, w_start, cfg, sched)
}

/// Fine-tunes from `w_start` for `cfg.personalization_epochs` on a fresh
/// schedule.
pub fn personalize(learner: &Learner, client: &ClientState, w_start: &ParamSet, cfg: &FedConfig) -> Result<TuneOutput> {
    let epochs = cfg.personalization_epochs;
    if epochs == 0 {
        return Ok(TuneOutput {
            params: w_start.clone(),
            loss: 0.0,
            steps: 0,
        });
    }
    let sched = TuneSchedule {
        epochs,
        step_offset: 0,
        total_steps: epochs * steps_per_epoch(client.train.len(), cfg.batch_size),
        shuffle_seed: derive_seed(cfg.seed, "personalize", &[client.client_id as u64]),
    };
    tune(learner, &client.train, w_start, cfg, sched)
}
