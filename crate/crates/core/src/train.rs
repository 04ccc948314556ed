//! SGD with momentum, step schedules, and (adversarial) training epochs.

use std::fmt;
use std::str::FromStr;

use crate::attacks::{attack, batch_rng, AttackConfig, AttackFamily};
use crate::data::{batches, Dataset};
use crate::error::{Error, Result};
use crate::nn::{cross_entropy, Model};
use crate::norm::StatsMode;
use crate::tensor::{Tape, Tensor};

/// How adversarial examples enter a training step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AdvMix {
    /// Train on the perturbed batch only.
    MinMax,
    /// Train on the clean batch concatenated with its perturbed copy.
    Mixed,
}

impl AdvMix {
    pub fn as_str(self) -> &'static str {
        match self {
            AdvMix::MinMax => "minmax",
            AdvMix::Mixed => "mixed",
        }
    }
}

impl fmt::Display for AdvMix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AdvMix {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "minmax" => Ok(AdvMix::MinMax),
            "mixed" => Ok(AdvMix::Mixed),
            other => Err(Error::Unknown {
                kind: "adv_mix",
                value: other.to_string(),
            }),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub momentum: f64,
    /// `(epoch, multiplier)` milestones; multipliers accumulate.
    pub schedule: Vec<(usize, f64)>,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub adversarial: bool,
    pub adv_attack: AttackConfig,
    pub adv_mix: AdvMix,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 0.1,
            momentum: 0.9,
            schedule: desk_schedule(30),
            epochs: 30,
            batch_size: 128,
            seed: 0,
            adversarial: false,
            adv_attack: default_adv_attack(0.2),
            adv_mix: AdvMix::MinMax,
        }
    }
}

/// PGD with a random start, generated against batch statistics so the
/// tracked estimates are left alone.
pub fn default_adv_attack(eps: f64) -> AttackConfig {
    AttackConfig {
        random_start: true,
        stats_mode: StatsMode::Batch,
        ..AttackConfig::new(AttackFamily::Pgd, eps)
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidParameter(format!("lr must be >= 0, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidParameter(format!(
                "momentum must be in [0, 1), got {}",
                self.momentum
            )));
        }
        if self.batch_size < 1 {
            return Err(Error::InvalidParameter("batch_size must be at least 1".into()));
        }
        if self.schedule.windows(2).any(|w| w[0].0 > w[1].0) {
            return Err(Error::InvalidParameter("schedule milestones must be sorted".into()));
        }
        if self.schedule.iter().any(|&(_, m)| !(m > 0.0 && m.is_finite())) {
            return Err(Error::InvalidParameter("schedule multipliers must be > 0".into()));
        }
        if self.adversarial {
            self.adv_attack.validate()?;
        }
        Ok(())
    }
}

/// Two tenfold drops at one half and three quarters of the run, e.g. epochs
/// 15 and 22 for 30 epochs. Coinciding milestones collapse into one.
pub fn desk_schedule(epochs: usize) -> Vec<(usize, f64)> {
    let mut out: Vec<(usize, f64)> = Vec::new();
    for e in [epochs / 2, epochs * 3 / 4] {
        if e > 0 && out.last().is_none_or(|&(prev, _)| prev < e) {
            out.push((e, 0.1));
        }
    }
    out
}

/// Learning rate in effect during `epoch` (0-based): `base` times every
/// multiplier whose milestone is `<= epoch`.
pub fn lr_at(base: f64, schedule: &[(usize, f64)], epoch: usize) -> f64 {
    schedule
        .iter()
        .filter(|&&(e, _)| e <= epoch)
        .fold(base, |lr, &(_, m)| lr * m)
}

/// `v <- momentum * v + g; w <- w - lr * v`. Nothing is written when a
/// gradient entry is not finite.
pub fn sgd_step(params: &mut [f64], grads: &[f64], lr: f64, momentum: f64, velocity: &mut [f64]) -> Result<()> {
    if params.len() != grads.len() || params.len() != velocity.len() {
        return Err(Error::ShapeMismatch {
            op: "sgd_step",
            lhs: vec![params.len()],
            rhs: vec![grads.len(), velocity.len()],
        });
    }
    if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFiniteGradient(format!("entry {i} is {}", grads[i])));
    }
    for ((w, &g), v) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        *v = momentum * *v + g;
        *w -= lr * *v;
    }
    Ok(())
}

/// Momentum buffers for every trainable parameter of a model.
#[derive(Debug, Clone, PartialEq)]
pub struct Sgd {
    pub momentum: f64,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(model: &Model, momentum: f64) -> Self {
        let mut model = model.clone();
        let mut velocity = Vec::new();
        model
            .for_each_param_mut(|_, p| {
                velocity.push(vec![0.0; p.len()]);
                Ok(())
            })
            .expect("infallible visitor");
        Sgd { momentum, velocity }
    }

    /// Applies one step with `grads` in [`Model::param_names`] order.
    pub fn step(&mut self, model: &mut Model, grads: &[Vec<f64>], lr: f64) -> Result<()> {
        if grads.len() != self.velocity.len() {
            return Err(Error::ShapeMismatch {
                op: "sgd",
                lhs: vec![self.velocity.len()],
                rhs: vec![grads.len()],
            });
        }
        for (name, g) in model.param_names().iter().zip(grads) {
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteGradient(name.clone()));
            }
        }
        let mut i = 0;
        let momentum = self.momentum;
        let velocity = &mut self.velocity;
        model.for_each_param_mut(|_, p| {
            sgd_step(p, &grads[i], lr, momentum, &mut velocity[i])?;
            i += 1;
            Ok(())
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    /// Mean training loss over batches, weighted by batch size.
    pub loss: f64,
    /// Training accuracy in `[0, 1]`, measured on the batches as trained.
    pub accuracy: f64,
}

fn shuffle_seed(seed: u64, epoch: usize) -> u64 {
    seed ^ (epoch as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// One descent step on `(x, y)`: returns `(loss, correct)`.
pub fn train_step(model: &mut Model, sgd: &mut Sgd, x: Tensor, y: &[usize], lr: f64, batch: usize) -> Result<(f64, usize)> {
    let mut tape = Tape::new();
    let xv = tape.constant(x);
    let pass = model.forward_train(&mut tape, xv)?;
    let loss = cross_entropy(&mut tape, pass.logits, y)?;
    let loss_value = tape.value(loss).data()[0];
    if !loss_value.is_finite() {
        return Err(Error::NonFiniteLoss { batch });
    }
    let correct = tape
        .value(pass.logits)
        .argmax_rows()?
        .iter()
        .zip(y)
        .filter(|(p, t)| p == t)
        .count();
    tape.backward(loss)?;
    let grads = pass
        .params
        .iter()
        .map(|&p| tape.grad(p).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; tape.value(p).len()]))
        .collect::<Vec<_>>();
    sgd.step(model, &grads, lr)?;
    Ok((loss_value, correct))
}

fn run_epoch(
    model: &mut Model,
    data: &Dataset,
    cfg: &TrainConfig,
    sgd: &mut Sgd,
    epoch: usize,
    adversarial: bool,
) -> Result<EpochMetrics> {
    cfg.validate()?;
    let lr = lr_at(cfg.lr, &cfg.schedule, epoch);
    let mut loss_sum = 0.0;
    let mut correct = 0;
    let mut seen = 0;
    for (b, (x, y)) in batches(data, cfg.batch_size, true, shuffle_seed(cfg.seed, epoch))?.enumerate() {
        let (x, y) = if adversarial {
            let mut rng = batch_rng(cfg.seed ^ cfg.adv_attack.seed, ((epoch as u64) << 32) | b as u64);
            let adv = attack(&cfg.adv_attack, model, &x, &y, &mut rng)?;
            match cfg.adv_mix {
                AdvMix::MinMax => (adv.x_adv, y),
                AdvMix::Mixed => {
                    let both = Tensor::concat_rows(&[&x, &adv.x_adv])?;
                    let labels = y.iter().chain(&y).copied().collect::<Vec<_>>();
                    (both, labels)
                }
            }
        } else {
            (x, y)
        };
        let n = y.len();
        let (loss, ok) = train_step(model, sgd, x, &y, lr, b)?;
        loss_sum += loss * n as f64;
        correct += ok;
        seen += n;
    }
    let seen = seen.max(1) as f64;
    Ok(EpochMetrics {
        epoch,
        lr,
        loss: loss_sum / seen,
        accuracy: correct as f64 / seen,
    })
}

/// One shuffled pass over `data`; tracked statistics update every batch.
pub fn train_epoch(model: &mut Model, data: &Dataset, cfg: &TrainConfig, sgd: &mut Sgd, epoch: usize) -> Result<EpochMetrics> {
    run_epoch(model, data, cfg, sgd, epoch, false)
}

/// Like [`train_epoch`], but each batch is first replaced by (or, in
/// [`AdvMix::Mixed`], extended with) its `cfg.adv_attack` perturbation.
pub fn adv_train_epoch(model: &mut Model, data: &Dataset, cfg: &TrainConfig, sgd: &mut Sgd, epoch: usize) -> Result<EpochMetrics> {
    run_epoch(model, data, cfg, sgd, epoch, true)
}

/// Runs `cfg.epochs` epochs (adversarial when `cfg.adversarial`), calling
/// `on_epoch` after each.
pub fn fit(
    model: &mut Model,
    data: &Dataset,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&Model, &EpochMetrics) -> Result<()>,
) -> Result<Vec<EpochMetrics>> {
    cfg.validate()?;
    let mut sgd = Sgd::new(model, cfg.momentum);
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let m = run_epoch(model, data, cfg, &mut sgd, epoch, cfg.adversarial)?;
        on_epoch(model, &m)?;
        history.push(m);
    }
    Ok(history)
}
