//! The three-stage training loop: one language-modeling objective over
//! stage-specific sample mixtures, AdamW with a stepped learning-rate decay,
//! deterministic given the seed.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{backward::loss_and_grad, ModelError, ModelParams};
use crate::builder::{
    apply_task_prefix, build_pretrain_sample, MarkerStyle, Task, TaskAnnotation, TaskPrefixes, TaskSample,
};
use crate::vocab::UnifiedVocab;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Pretrain,
    Multitask,
    TaskSpecific,
}

impl Stage {
    pub fn name(&self) -> &'static str {
        match self {
            Stage::Pretrain => "pretrain",
            Stage::Multitask => "multitask",
            Stage::TaskSpecific => "task_specific",
        }
    }

    pub fn from_name(s: &str) -> Option<Stage> {
        match s {
            "pretrain" => Some(Stage::Pretrain),
            "multitask" => Some(Stage::Multitask),
            "task_specific" => Some(Stage::TaskSpecific),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub stage: Stage,
    /// Required for the task-specific stage.
    pub task: Option<Task>,
    pub epochs: usize,
    pub batch_size: usize,
    /// Samples drawn per epoch (task-balanced in the multitask stage).
    pub samples_per_epoch: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Pretrain empty-input probability.
    pub p_empty: f64,
    pub use_obj_markers: bool,
    pub use_obj_close: bool,
    pub type_embedding: super::TypeEmbedding,
    pub task_prefix: bool,
    pub n_bins: u32,
    /// The learning rate steps down by `decay_factor` for this many final
    /// epochs.
    pub decay_epochs: usize,
    pub decay_factor: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            stage: Stage::Multitask,
            task: None,
            epochs: 8,
            batch_size: 32,
            samples_per_epoch: 4096,
            lr: 1e-3,
            weight_decay: 1e-4,
            seed: 0,
            p_empty: 0.5,
            use_obj_markers: true,
            use_obj_close: true,
            type_embedding: super::TypeEmbedding::None,
            task_prefix: false,
            n_bins: crate::vocab::DEFAULT_N_BINS,
            decay_epochs: 2,
            decay_factor: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn marker_style(&self) -> MarkerStyle {
        MarkerStyle::from_flags(self.use_obj_markers, self.use_obj_close)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.epochs == 0 || self.batch_size == 0 || self.samples_per_epoch == 0 {
            return Err(ModelError::Config("epochs, batch size, and epoch size must be positive".into()));
        }
        if !(self.lr > 0.0) || self.weight_decay < 0.0 {
            return Err(ModelError::Config("learning rate must be positive, weight decay non-negative".into()));
        }
        if !(0.0..=1.0).contains(&self.p_empty) {
            return Err(ModelError::Config("p_empty must lie in [0, 1]".into()));
        }
        if self.stage == Stage::TaskSpecific && self.task.is_none() {
            return Err(ModelError::Config("task_specific stage needs a task".into()));
        }
        if self.decay_epochs > self.epochs {
            return Err(ModelError::Config("decay_epochs exceeds epochs".into()));
        }
        Ok(())
    }
}

/// Pre-built samples per downstream task plus raw pretrain annotations
/// (pretrain inputs are re-flipped every epoch).
pub struct TrainData {
    pub by_task: BTreeMap<Task, Vec<TaskSample>>,
    pub pretrain: Vec<TaskAnnotation>,
    pub prefixes: Option<TaskPrefixes>,
}

impl TrainData {
    fn pool(&self, task: Task) -> Result<&[TaskSample], ModelError> {
        self.by_task
            .get(&task)
            .filter(|p| !p.is_empty())
            .map(Vec::as_slice)
            .ok_or_else(|| ModelError::Config(format!("no samples for task {}", task.name())))
    }
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub steps: usize,
    pub final_loss: f64,
    /// (step, batch loss) sampled sparsely over training.
    pub losses: Vec<(usize, f64)>,
    pub param_count: usize,
}

struct AdamW {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    decay_mask: Vec<bool>,
}

impl AdamW {
    fn new(params: &ModelParams, weight_decay: f64) -> Self {
        let n = params.data.len();
        let mut decay_mask = vec![false; n];
        for spec in &params.layout.specs {
            if spec.decay {
                for m in decay_mask
                    .iter_mut()
                    .skip(spec.t.offset)
                    .take(spec.t.len())
                {
                    *m = true;
                }
            }
        }
        Self { m: vec![0.0; n], v: vec![0.0; n], t: 0, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay, decay_mask }
    }

    fn step(&mut self, data: &mut [f64], grads: &[f64], lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..data.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            let mut update = m_hat / (v_hat.sqrt() + self.eps);
            if self.decay_mask[i] {
                update += self.weight_decay * data[i];
            }
            data[i] -= lr * update;
        }
    }
}

fn assemble_epoch(
    cfg: &TrainConfig,
    data: &TrainData,
    vocab: &UnifiedVocab,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<TaskSample>, ModelError> {
    let style = cfg.marker_style();
    let mut samples = Vec::with_capacity(cfg.samples_per_epoch);
    match cfg.stage {
        Stage::Pretrain => {
            if data.pretrain.is_empty() {
                return Err(ModelError::Config("no pretrain annotations".into()));
            }
            let mut order: Vec<usize> = (0..data.pretrain.len()).collect();
            order.shuffle(rng);
            for i in 0..cfg.samples_per_epoch {
                let ann = &data.pretrain[order[i % order.len()]];
                samples.push(build_pretrain_sample(ann, vocab, style, rng, cfg.p_empty)?);
            }
        }
        Stage::Multitask => {
            // Task-balanced draw: round-robin over the five downstream pools.
            for i in 0..cfg.samples_per_epoch {
                let task = Task::DOWNSTREAM[i % Task::DOWNSTREAM.len()];
                let pool = data.pool(task)?;
                samples.push(pool[rng.random_range(0..pool.len())].clone());
            }
            samples.shuffle(rng);
        }
        Stage::TaskSpecific => {
            let task = cfg.task.expect("validated");
            let pool = data.pool(task)?;
            for _ in 0..cfg.samples_per_epoch {
                samples.push(pool[rng.random_range(0..pool.len())].clone());
            }
        }
    }
    if cfg.task_prefix {
        let prefixes = data
            .prefixes
            .as_ref()
            .ok_or_else(|| ModelError::Config("task_prefix enabled but no prefix table in data".into()))?;
        samples = samples.into_iter().map(|s| apply_task_prefix(s, true, prefixes)).collect();
    }
    Ok(samples)
}

/// Mean loss and mean gradient over a batch. Work splits into contiguous
/// chunks processed in parallel; the merge runs in fixed chunk order, so the
/// result is deterministic regardless of scheduling.
fn batch_grad(params: &ModelParams, batch: &[TaskSample]) -> Result<(f64, Vec<f64>), ModelError> {
    let chunk = batch.len().div_ceil(rayon::current_num_threads().max(1));
    let partials: Vec<Result<(f64, Vec<f64>), ModelError>> = batch
        .par_chunks(chunk)
        .map(|samples| {
            let mut loss_sum = 0.0;
            let mut grad_sum = vec![0.0; params.layout.total];
            for s in samples {
                let (loss, grads) = loss_and_grad(params, s)?;
                loss_sum += loss;
                for (a, g) in grad_sum.iter_mut().zip(&grads) {
                    *a += g;
                }
            }
            Ok((loss_sum, grad_sum))
        })
        .collect();
    let mut loss_sum = 0.0;
    let mut grad_sum = vec![0.0; params.layout.total];
    for p in partials {
        let (l, g) = p?;
        loss_sum += l;
        for (a, gi) in grad_sum.iter_mut().zip(&g) {
            *a += gi;
        }
    }
    let n = batch.len() as f64;
    for g in grad_sum.iter_mut() {
        *g /= n;
    }
    Ok((loss_sum / n, grad_sum))
}

/// Runs one training stage. `init` carries parameters from an earlier stage
/// (the pre-finetuning recipe); otherwise parameters initialize from the
/// seed. Training aborts with a diagnostic if the loss leaves the reals.
pub fn train(
    cfg: &TrainConfig,
    model_cfg: &super::ModelConfig,
    data: &TrainData,
    init: Option<ModelParams>,
) -> Result<(ModelParams, TrainReport), ModelError> {
    cfg.validate()?;
    model_cfg.validate()?;
    if model_cfg.n_bins != cfg.n_bins {
        return Err(ModelError::Config(format!(
            "model has {} bins but the training config says {}",
            model_cfg.n_bins, cfg.n_bins
        )));
    }
    if model_cfg.type_embedding != cfg.type_embedding {
        return Err(ModelError::Config("model and training config disagree on type embedding".into()));
    }
    let mut params = match init {
        Some(p) => {
            if p.cfg != *model_cfg {
                return Err(ModelError::Config("checkpoint model config differs from requested config".into()));
            }
            p
        }
        None => ModelParams::init(model_cfg.clone(), cfg.seed)?,
    };
    let vocab = params.vocab();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x5eed));
    let mut opt = AdamW::new(&params, cfg.weight_decay);
    let mut report = TrainReport { steps: 0, final_loss: f64::NAN, losses: Vec::new(), param_count: params.param_count() };

    for epoch in 0..cfg.epochs {
        let lr = if epoch + cfg.decay_epochs >= cfg.epochs { cfg.lr * cfg.decay_factor } else { cfg.lr };
        let samples = assemble_epoch(cfg, data, &vocab, &mut rng)?;
        for batch in samples.chunks(cfg.batch_size) {
            let (loss, grads) = batch_grad(&params, batch)?;
            if !loss.is_finite() {
                return Err(ModelError::Divergence { step: report.steps, loss });
            }
            opt.step(&mut params.data, &grads, lr);
            if report.steps % 25 == 0 {
                report.losses.push((report.steps, loss));
            }
            report.steps += 1;
            report.final_loss = loss;
        }
    }
    Ok((params, report))
}
