//! AdamW with warmup and cosine decay, global-norm clipping, and early
//! stopping on validation ADE with best-weight restoration.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataio::{augment, AugmentationConfig, Play};
use crate::error::{Error, Result};
use crate::metrics::{evaluate, EvalOptions};
use crate::model::{bind_params, forward_on_graph, Formation, ModelParams};
use crate::numerics::{Graph, Tensor};
use crate::objective::{attach_loss, DisplacementTargets, LossBreakdown, LossWeights};
use crate::sampler::sample_seed;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub warmup_steps: u64,
    pub max_epochs: usize,
    pub clip_norm: f64,
    pub batch_size: usize,
    /// Epochs without a new best validation ADE before stopping.
    pub patience: usize,
    pub loss_weights: LossWeights,
    pub seed: u64,
    pub augmentation: AugmentationConfig,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            weight_decay: 0.01,
            warmup_steps: 500,
            max_epochs: 100,
            clip_norm: 1.0,
            batch_size: 32,
            patience: 10,
            loss_weights: LossWeights::default(),
            seed: 0,
            augmentation: AugmentationConfig::default(),
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} must be positive, got {v}")))
            }
        };
        positive("learning_rate", self.learning_rate)?;
        positive("clip_norm", self.clip_norm)?;
        positive("adam_eps", self.adam_eps)?;
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config(format!("weight_decay {} must be >= 0", self.weight_decay)));
        }
        if self.max_epochs == 0 || self.batch_size == 0 || self.patience == 0 {
            return Err(Error::Config("max_epochs, batch_size and patience must be at least 1".into()));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} {b} outside [0, 1)")));
            }
        }
        self.loss_weights.validate()?;
        self.augmentation.validate()
    }
}

/// Linear warmup from 0, then cosine decay to 0 at `total_steps`.
pub fn lr_schedule(step: u64, cfg: &TrainConfig, total_steps: u64) -> f64 {
    let lr = cfg.learning_rate;
    if step < cfg.warmup_steps {
        return lr * step as f64 / cfg.warmup_steps as f64;
    }
    if total_steps <= cfg.warmup_steps {
        return lr;
    }
    let progress = ((step - cfg.warmup_steps) as f64 / (total_steps - cfg.warmup_steps) as f64).min(1.0);
    0.5 * lr * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Rescales `grads` so their global L2 norm is at most `clip_norm`.
/// Returns the norm before clipping.
pub fn clip_gradients(grads: &mut [Tensor], names: &[String], clip_norm: f64) -> Result<f64> {
    for (g, name) in grads.iter().zip(names) {
        if !g.is_finite() {
            return Err(Error::NonFiniteGradient(name.clone()));
        }
    }
    let norm = grads.iter().map(Tensor::norm_squared).sum::<f64>().sqrt();
    if norm > clip_norm {
        let factor = clip_norm / norm;
        grads.iter_mut().for_each(|g| g.scale_in_place(factor));
    }
    Ok(norm)
}

/// First and second moment estimates, one per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(params: &[Tensor]) -> Self {
        let zeros: Vec<Tensor> = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }
}

/// One AdamW update at learning rate `lr`; decay is applied to the weights
/// directly, outside the adaptive term.
pub fn optimizer_step(params: &mut [Tensor], grads: &[Tensor], state: &mut OptimizerState, lr: f64, cfg: &TrainConfig) {
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut state.m).zip(&mut state.v) {
        let (p, g, m, v) = (p.data_mut(), g.data(), m.data_mut(), v.data_mut());
        for j in 0..p.len() {
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g[j];
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g[j] * g[j];
            let m_hat = m[j] / c1;
            let v_hat = v[j] / c2;
            p[j] -= lr * cfg.weight_decay * p[j];
            p[j] -= lr * m_hat / (v_hat.sqrt() + cfg.adam_eps);
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopSignal {
    Improved,
    Continue,
    Stop,
}

/// Tracks the best value seen and how long since it improved.
#[derive(Clone, Debug)]
pub struct EarlyStopping {
    patience: usize,
    best: f64,
    best_epoch: Option<usize>,
    stale: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: f64::INFINITY,
            best_epoch: None,
            stale: 0,
        }
    }

    /// Records the value for 1-based `epoch`.
    pub fn observe(&mut self, epoch: usize, value: f64) -> StopSignal {
        if value < self.best {
            self.best = value;
            self.best_epoch = Some(epoch);
            self.stale = 0;
            return StopSignal::Improved;
        }
        self.stale += 1;
        if self.stale >= self.patience {
            StopSignal::Stop
        } else {
            StopSignal::Continue
        }
    }

    pub fn best(&self) -> Option<(usize, f64)> {
        self.best_epoch.map(|e| (e, self.best))
    }
}

/// Mean loss and summed-then-averaged gradients over `batch`; per-play work
/// runs in parallel and is reduced in batch order.
pub fn batch_gradients(params: &ModelParams, batch: &[Play], weights: &LossWeights) -> Result<(Vec<Tensor>, LossBreakdown)> {
    if batch.is_empty() {
        return Err(Error::Empty("batch"));
    }
    let cfg = params.config();
    let per_play: Vec<(Vec<Tensor>, LossBreakdown)> = batch
        .par_iter()
        .map(|play| {
            let targets = DisplacementTargets::from_play(play, cfg.prediction_target)?;
            let mut g = Graph::new();
            let vars = bind_params(&mut g, params, true);
            let formation = Formation::new(&play.formation, &play.roles, &play.agent_valid);
            let out = forward_on_graph(&mut g, params, &vars, &formation, play.num_frames())?;
            let (loss, breakdown) = attach_loss(&mut g, &out, &targets, weights, cfg.covariance_floor)?;
            let mut grads = g.backward(loss)?;
            let tensors = vars
                .iter()
                .zip(&params.tensors)
                .map(|(v, p)| grads.take(*v).unwrap_or_else(|| Tensor::zeros(p.shape())))
                .collect();
            Ok((tensors, breakdown))
        })
        .collect::<Result<_>>()?;
    let scale = 1.0 / batch.len() as f64;
    let mut iter = per_play.into_iter();
    let (mut sum, first) = iter.next().expect("non-empty batch");
    let mut losses = vec![first];
    for (grads, b) in iter {
        for (s, g) in sum.iter_mut().zip(&grads) {
            s.add_assign(g);
        }
        losses.push(b);
    }
    sum.iter_mut().for_each(|s| s.scale_in_place(scale));
    Ok((sum, LossBreakdown::mean(&losses)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train: LossBreakdown,
    pub val_ade: f64,
    pub val_fde: f64,
    pub val_entropy: f64,
    pub learning_rate: f64,
    pub mean_grad_norm: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StopReason {
    MaxEpochs,
    EarlyStopped,
    Diverged { epoch: usize, step: u64, detail: String },
}

/// Training history; wall-clock time is kept out so equal seeds give equal
/// reports.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub loss_weights: LossWeights,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    pub best_val_ade: Option<f64>,
    pub steps: u64,
    pub stop: StopReason,
}

pub struct TrainOutcome {
    /// Weights from the best validation epoch, or the initial weights if no
    /// epoch finished.
    pub best: ModelParams,
    /// Weights after the last completed update.
    pub last: ModelParams,
    pub report: TrainReport,
    pub wall_seconds: f64,
}

fn epoch_order(len: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..len).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(seed, 2 * epoch as u64));
    order.shuffle(&mut rng);
    order
}

fn augmented_batch(plays: &[Play], idx: &[usize], cfg: &TrainConfig, epoch: usize) -> Vec<Play> {
    let base = sample_seed(cfg.seed, 2 * epoch as u64 + 1);
    idx.iter()
        .map(|&i| {
            let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(base, i as u64));
            augment(&plays[i], &cfg.augmentation, &mut rng)
        })
        .collect()
}

/// Runs mini-batch training. Divergence ends the run early with
/// [`StopReason::Diverged`] and the best weights found so far.
pub fn train(init: ModelParams, train_set: &[Play], val_set: &[Play], cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::Empty("training set"));
    }
    if val_set.is_empty() {
        return Err(Error::Empty("validation set"));
    }
    let started = Instant::now();
    let steps_per_epoch = train_set.len().div_ceil(cfg.batch_size) as u64;
    let total_steps = steps_per_epoch * cfg.max_epochs as u64;
    let eval_opts = EvalOptions::errors_only();

    let mut params = init;
    let mut best = params.clone();
    let mut state = OptimizerState::new(&params.tensors);
    let mut stopper = EarlyStopping::new(cfg.patience);
    let mut epochs = Vec::new();
    let mut stop = StopReason::MaxEpochs;

    'epochs: for epoch in 1..=cfg.max_epochs {
        let order = epoch_order(train_set.len(), cfg.seed, epoch);
        let mut losses = Vec::with_capacity(steps_per_epoch as usize);
        let mut norm_sum = 0.0;
        let mut lr = 0.0;
        for idx in order.chunks(cfg.batch_size) {
            let batch = augmented_batch(train_set, idx, cfg, epoch);
            let step = state.step;
            let diverged = |detail: String| StopReason::Diverged { epoch, step, detail };
            let (mut grads, loss) = batch_gradients(&params, &batch, &cfg.loss_weights)?;
            if !loss.total.is_finite() {
                stop = diverged(format!("non-finite loss {:?}", loss));
                break 'epochs;
            }
            let norm = match clip_gradients(&mut grads, params.names(), cfg.clip_norm) {
                Ok(n) => n,
                Err(e) => {
                    stop = diverged(e.to_string());
                    break 'epochs;
                }
            };
            lr = lr_schedule(state.step + 1, cfg, total_steps);
            optimizer_step(&mut params.tensors, &grads, &mut state, lr, cfg);
            if let Some(name) = params.tensors.iter().zip(params.names()).find(|(p, _)| !p.is_finite()).map(|(_, n)| n) {
                stop = diverged(format!("parameter {name} became non-finite"));
                break 'epochs;
            }
            norm_sum += norm;
            losses.push(loss);
        }

        let val = evaluate(&params, val_set, &eval_opts)?;
        let record = EpochRecord {
            epoch,
            train: LossBreakdown::mean(&losses),
            val_ade: val.ade,
            val_fde: val.fde,
            val_entropy: val.mixture_entropy,
            learning_rate: lr,
            mean_grad_norm: norm_sum / losses.len() as f64,
        };
        log::info!(
            "epoch {epoch}: loss {:.4} (nll {:.4}) val ADE {:.3} FDE {:.3} entropy {:.3}",
            record.train.total,
            record.train.nll,
            record.val_ade,
            record.val_fde,
            record.val_entropy
        );
        epochs.push(record);
        match stopper.observe(epoch, val.ade) {
            StopSignal::Improved => best = params.clone(),
            StopSignal::Continue => {}
            StopSignal::Stop => {
                stop = StopReason::EarlyStopped;
                break;
            }
        }
    }

    let (best_epoch, best_val_ade) = stopper.best().unzip();
    Ok(TrainOutcome {
        best,
        last: params,
        report: TrainReport {
            loss_weights: cfg.loss_weights,
            epochs,
            best_epoch,
            best_val_ade,
            steps: state.step,
            stop,
        },
        wall_seconds: started.elapsed().as_secs_f64(),
    })
}
