//! Minibatch training with per-sample / per-token weights.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::model::{Example, ModelConfig, ParamVector, Transformer};
use crate::{Error, Result, Scalar};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    SgdMomentum,
    Adamw,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    pub weight_decay: f64,
    /// Passes over the data. Ignored when `steps` is set.
    pub epochs: usize,
    #[serde(default)]
    pub steps: Option<usize>,
    pub batch_size: usize,
    pub seed: u64,
    pub shuffle_seed: u64,
    /// Trace interval in optimizer steps.
    #[serde(default = "default_eval_every")]
    pub eval_every: usize,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    /// Linear warmup length in steps.
    #[serde(default)]
    pub warmup_steps: usize,
    /// Global gradient-norm clip; 0 disables.
    #[serde(default)]
    pub grad_clip: f64,
}

fn default_eval_every() -> usize {
    50
}

fn default_momentum() -> f64 {
    0.9
}

impl TrainConfig {
    /// AdamW, lr 1e-3, batch 128, weight decay 0.001.
    pub fn bracket(model: ModelConfig, epochs: usize, seed: u64, shuffle_seed: u64) -> Self {
        TrainConfig {
            model,
            optimizer: OptimizerKind::Adamw,
            learning_rate: 1e-3,
            weight_decay: 0.001,
            epochs,
            steps: None,
            batch_size: 128,
            seed,
            shuffle_seed,
            eval_every: 100,
            momentum: 0.9,
            warmup_steps: 0,
            grad_clip: 0.0,
        }
    }

    /// SGD with momentum 0.9, lr 3e-3.
    pub fn toy_lm(model: ModelConfig, steps: usize, seed: u64, shuffle_seed: u64) -> Self {
        TrainConfig {
            model,
            optimizer: OptimizerKind::SgdMomentum,
            learning_rate: 3e-3,
            weight_decay: 0.0,
            epochs: 1,
            steps: Some(steps),
            batch_size: 16,
            seed,
            shuffle_seed,
            eval_every: 25,
            momentum: 0.9,
            warmup_steps: 0,
            grad_clip: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let bad = |m: &str| Err(Error::InvalidConfig(m.into()));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight_decay must be non-negative");
        }
        if self.batch_size == 0 || self.eval_every == 0 {
            return bad("batch_size and eval_every must be positive");
        }
        if self.steps == Some(0) || (self.steps.is_none() && self.epochs == 0) {
            return bad("training needs at least one step");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must be in [0, 1)");
        }
        Ok(())
    }

    pub fn total_steps(&self, n_examples: usize) -> usize {
        self.steps
            .unwrap_or_else(|| self.epochs * n_examples.div_ceil(self.batch_size))
    }
}

enum State<T> {
    Sgd { velocity: Vec<T> },
    Adam { m: Vec<T>, v: Vec<T>, t: i32 },
}

pub struct Optimizer<T> {
    kind: OptimizerKind,
    weight_decay: T,
    momentum: T,
    state: State<T>,
}

impl<T: Scalar> Optimizer<T> {
    pub fn new(cfg: &TrainConfig, n: usize) -> Self {
        let state = match cfg.optimizer {
            OptimizerKind::SgdMomentum => State::Sgd {
                velocity: vec![T::zero(); n],
            },
            OptimizerKind::Adamw => State::Adam {
                m: vec![T::zero(); n],
                v: vec![T::zero(); n],
                t: 0,
            },
        };
        Optimizer {
            kind: cfg.optimizer,
            weight_decay: T::of(cfg.weight_decay),
            momentum: T::of(cfg.momentum),
            state,
        }
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    /// One update with learning rate `lr`. SGD uses coupled L2 decay, AdamW decoupled decay.
    pub fn step(&mut self, w: &mut [T], grad: &[T], lr: T) {
        let wd = self.weight_decay;
        match &mut self.state {
            State::Sgd { velocity } => {
                for ((wi, &gi), vi) in w.iter_mut().zip(grad).zip(velocity.iter_mut()) {
                    *vi = self.momentum * *vi + gi + wd * *wi;
                    *wi -= lr * *vi;
                }
            }
            State::Adam { m, v, t } => {
                let (b1, b2) = (T::of(0.9), T::of(0.999));
                let eps = T::of(1e-8);
                *t += 1;
                let c1 = T::one() - b1.powi(*t);
                let c2 = T::one() - b2.powi(*t);
                for (((wi, &gi), mi), vi) in w.iter_mut().zip(grad).zip(m.iter_mut()).zip(v.iter_mut()) {
                    *mi = b1 * *mi + (T::one() - b1) * gi;
                    *vi = b2 * *vi + (T::one() - b2) * gi * gi;
                    let mhat = *mi / c1;
                    let vhat = *vi / c2;
                    *wi -= lr * (mhat / (vhat.sqrt() + eps) + wd * *wi);
                }
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TracePoint {
    pub step: usize,
    /// Mean minibatch loss since the previous trace point.
    pub loss: f64,
    pub metrics: Vec<(String, f64)>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome<T> {
    pub params: ParamVector<T>,
    pub trace: Vec<TracePoint>,
}

/// Train from `init_params(config.model, seed)` on `data`.
///
/// Minibatches are consecutive slices of a per-epoch shuffle drawn from
/// `shuffle_seed`. `metrics` is called at step 0, every `eval_every` steps
/// and after the last step.
pub fn train<T: Scalar>(
    cfg: &TrainConfig,
    data: &[Example],
    mut metrics: impl FnMut(usize, &ParamVector<T>) -> Result<Vec<(String, f64)>>,
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let model = Transformer::new(cfg.model.clone())?;
    let mut params: ParamVector<T> = model.init_params(cfg.seed);
    let total = cfg.total_steps(data.len());
    let mut opt = Optimizer::<T>::new(cfg, params.len());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.shuffle_seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut cursor = data.len();
    let mut batch: Vec<Example> = Vec::with_capacity(cfg.batch_size);
    let mut trace = vec![TracePoint {
        step: 0,
        loss: model.loss(&params, &data[..cfg.batch_size.min(data.len())])?.f64(),
        metrics: metrics(0, &params)?,
    }];
    let (mut acc, mut acc_n) = (0.0, 0usize);
    for step in 1..=total {
        batch.clear();
        while batch.len() < cfg.batch_size.min(data.len()) {
            if cursor == data.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(data[order[cursor]].clone());
            cursor += 1;
        }
        let (loss, mut grad) = model.loss_and_grad(&params, &batch, None)?;
        let loss = loss.f64();
        if !loss.is_finite() || loss.abs() > 1e6 {
            return Err(Error::TrainingDiverged { step, loss });
        }
        if cfg.grad_clip > 0.0 {
            let norm = grad.norm_sq().f64().sqrt();
            if norm > cfg.grad_clip {
                let s = T::of(cfg.grad_clip / norm);
                grad.values.iter_mut().for_each(|g| *g *= s);
            }
        }
        let lr = if cfg.warmup_steps > 0 && step <= cfg.warmup_steps {
            cfg.learning_rate * step as f64 / cfg.warmup_steps as f64
        } else {
            cfg.learning_rate
        };
        opt.step(&mut params.values, &grad.values, T::of(lr));
        acc += loss;
        acc_n += 1;
        if step % cfg.eval_every == 0 || step == total {
            trace.push(TracePoint {
                step,
                loss: acc / acc_n as f64,
                metrics: metrics(step, &params)?,
            });
            acc = 0.0;
            acc_n = 0;
        }
    }
    if !params.is_finite() {
        return Err(Error::TrainingDiverged {
            step: total,
            loss: f64::NAN,
        });
    }
    Ok(TrainOutcome { params, trace })
}
