//! Adam, the warmup + step-annealing learning-rate schedule, and the
//! mini-batch training loop used for both pretraining and adaptation.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::data::Utterance;
use crate::model::{BackboneModel, Teacher, TrainableMask};
use crate::params::{Grads, ParamStore, Session};
use crate::rng::{derive_seed, Rng};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Pretrain,
    Adapt,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub warmup_steps: usize,
    pub anneal_steps: Vec<usize>,
    pub anneal_rate: f64,
    pub total_steps: usize,
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    pub phase: Phase,
}

impl TrainConfig {
    /// Full-length adaptation schedule: 10k steps, 4000 warmup, ×0.3 at
    /// 6000, 7000 and 8000, batch 64.
    pub fn paper_schedule() -> Self {
        Self {
            base_lr: 5e-4,
            warmup_steps: 4000,
            anneal_steps: vec![6000, 7000, 8000],
            anneal_rate: 0.3,
            total_steps: 10_000,
            batch_size: 64,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
            phase: Phase::Adapt,
        }
    }

    /// The full-length schedule shape compressed to `total_steps`: warmup
    /// over the first 40%, annealing at 60%, 70% and 80%.
    pub fn scaled(phase: Phase, total_steps: usize, base_lr: f64, batch_size: usize, seed: u64) -> Self {
        let at = |pct: usize| (total_steps * pct / 100).max(1);
        Self {
            base_lr,
            warmup_steps: at(40),
            anneal_steps: vec![at(60), at(70), at(80)],
            total_steps,
            batch_size,
            seed,
            phase,
            ..Self::paper_schedule()
        }
    }

    pub fn desk_pretrain() -> Self {
        Self::scaled(Phase::Pretrain, 5000, 3e-3, 16, 0)
    }

    pub fn desk_adapt() -> Self {
        Self::scaled(Phase::Adapt, 1000, 5e-3, 16, 0)
    }

    pub fn validate(&self) -> Result<()> {
        let min_anneal = self.anneal_steps.iter().copied().min();
        if let Some(first) = min_anneal {
            if self.warmup_steps >= first {
                return Err(Error::Config {
                    field: "warmup_steps",
                    reason: format!("{} must precede the first anneal step {first}", self.warmup_steps),
                });
            }
            if first >= self.total_steps {
                return Err(Error::Config {
                    field: "anneal_steps",
                    reason: format!("first anneal {first} must precede total_steps {}", self.total_steps),
                });
            }
        }
        if !(self.anneal_rate > 0.0 && self.anneal_rate < 1.0) {
            return Err(Error::Config {
                field: "anneal_rate",
                reason: format!("{} is not in (0, 1)", self.anneal_rate),
            });
        }
        if self.batch_size == 0 {
            return Err(Error::Config {
                field: "batch_size",
                reason: "must be at least 1".into(),
            });
        }
        if !(self.base_lr >= 0.0 && self.base_lr.is_finite()) {
            return Err(Error::Config {
                field: "base_lr",
                reason: format!("{} is not a non-negative number", self.base_lr),
            });
        }
        for (field, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config {
                    field,
                    reason: format!("{b} is not in [0, 1)"),
                });
            }
        }
        if !(self.eps > 0.0) {
            return Err(Error::Config {
                field: "eps",
                reason: "must be positive".into(),
            });
        }
        Ok(())
    }
}

/// `base_lr · min(1, step / warmup) · rate^(anneal steps ≤ step)`.
pub fn lr_at_step(cfg: &TrainConfig, step: usize) -> f64 {
    let warm = if cfg.warmup_steps == 0 || step >= cfg.warmup_steps {
        1.0
    } else {
        step as f64 / cfg.warmup_steps as f64
    };
    let passed = cfg.anneal_steps.iter().filter(|&&a| a <= step).count();
    let mut decay = 1.0;
    for _ in 0..passed {
        decay *= cfg.anneal_rate;
    }
    cfg.base_lr * warm * decay
}

/// First and second moments per parameter, allocated on first update.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    m: Vec<Option<Vec<f64>>>,
    v: Vec<Option<Vec<f64>>>,
    t: u64,
}

impl AdamState {
    pub fn new(n_params: usize) -> Self {
        Self {
            m: vec![None; n_params],
            v: vec![None; n_params],
            t: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }
}

/// One bias-corrected Adam update of every trainable parameter. Frozen
/// parameters are skipped even if `grads` holds values for them.
pub fn adam_step(
    store: &mut ParamStore,
    grads: &Grads,
    state: &mut AdamState,
    mask: &TrainableMask,
    lr: f64,
    cfg: &TrainConfig,
) -> Result<()> {
    if mask.len() != store.len() || state.m.len() != store.len() {
        return Err(Error::Contract(format!(
            "mask ({}) and optimizer state ({}) must cover all {} parameters",
            mask.len(),
            state.m.len(),
            store.len()
        )));
    }
    let ids: Vec<_> = store.ids().filter(|&id| mask.is_trainable(id)).collect();
    for &id in &ids {
        if grads.get(id).is_none() {
            return Err(Error::Contract(format!("no gradient for trainable parameter `{}`", store.name(id))));
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - libm::pow(cfg.beta1, t as f64);
    let bc2 = 1.0 - libm::pow(cfg.beta2, t as f64);
    for id in ids {
        let g = grads.get(id).expect("checked above");
        let i = id.index();
        let n = g.len();
        let m = state.m[i].get_or_insert_with(|| vec![0.0; n]);
        let v = state.v[i].get_or_insert_with(|| vec![0.0; n]);
        let p = store.get_mut(id).data_mut();
        for k in 0..n {
            m[k] = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * g[k];
            v[k] = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * g[k] * g[k];
            let m_hat = m[k] / bc1;
            let v_hat = v[k] / bc2;
            p[k] -= lr * m_hat / (libm::sqrt(v_hat) + cfg.eps);
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
}

/// Per-epoch order of `n` examples, seeded by `(seed, epoch)`.
pub fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    Rng::new(derive_seed(seed, &[0x65706f6368, epoch as u64])).shuffle(&mut order);
    order
}

/// Mean loss and gradients over a batch, reduced in batch order.
pub fn batch_gradients(model: &BackboneModel, batch: &[&Utterance], mask: &TrainableMask) -> Result<(f64, Grads)> {
    let store = model.store();
    let mut total = Grads::zeros(store);
    let mut loss_sum = 0.0;
    for u in batch {
        let mut s = Session::with_trainable(store, mask.flags());
        let teacher = Teacher {
            durations: &u.durations,
            pitch: &u.pitch,
        };
        let l = model.loss(&mut s, &u.tokens, u.speaker, teacher, &u.frames)?;
        loss_sum += s.graph().value(l).data()[0];
        let g = s.backward(l)?;
        total.accumulate(&g);
    }
    let inv = 1.0 / batch.len() as f64;
    total.scale(inv);
    Ok((loss_sum * inv, total))
}

/// Runs `cfg.total_steps` Adam steps over mini-batches of `data`, updating
/// only parameters trainable under `mask`. Returns the per-step history.
pub fn train(model: &mut BackboneModel, data: &[Utterance], cfg: &TrainConfig, mask: &TrainableMask) -> Result<Vec<LossRecord>> {
    train_with(model, data, cfg, mask, |_| {})
}

/// [`train`] with a callback invoked after every step.
pub fn train_with(
    model: &mut BackboneModel,
    data: &[Utterance],
    cfg: &TrainConfig,
    mask: &TrainableMask,
    mut on_step: impl FnMut(&LossRecord),
) -> Result<Vec<LossRecord>> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::DegenerateInput("training set is empty"));
    }
    if mask.len() != model.store().len() {
        return Err(Error::Contract(format!(
            "mask covers {} of {} parameters",
            mask.len(),
            model.store().len()
        )));
    }
    let mut state = AdamState::new(model.store().len());
    let mut history = Vec::with_capacity(cfg.total_steps);
    let batch_size = cfg.batch_size.min(data.len());
    let mut epoch = 0;
    let mut order = epoch_order(cfg.seed, epoch, data.len());
    let mut cursor = 0;
    for step in 1..=cfg.total_steps {
        let mut batch = Vec::with_capacity(batch_size);
        while batch.len() < batch_size {
            if cursor == order.len() {
                epoch += 1;
                order = epoch_order(cfg.seed, epoch, data.len());
                cursor = 0;
            }
            batch.push(&data[order[cursor]]);
            cursor += 1;
        }
        let (loss, grads) = batch_gradients(model, &batch, mask)?;
        if !loss.is_finite() {
            return Err(Error::Divergence { step });
        }
        let lr = lr_at_step(cfg, step);
        adam_step(model.store_mut(), &grads, &mut state, mask, lr, cfg)?;
        let rec = LossRecord { step, lr, loss };
        on_step(&rec);
        history.push(rec);
    }
    Ok(history)
}

/// Mean teacher-forced loss over `data`, without gradients.
pub fn mean_loss(model: &BackboneModel, data: &[Utterance]) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::DegenerateInput("evaluation set is empty"));
    }
    let mut sum = 0.0;
    for u in data {
        let teacher = Teacher {
            durations: &u.durations,
            pitch: &u.pitch,
        };
        sum += model.loss_value(&u.tokens, u.speaker, teacher, &u.frames)?;
    }
    Ok(sum / data.len() as f64)
}
