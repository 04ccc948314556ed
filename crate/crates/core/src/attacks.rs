//! White-box attacks under an l-infinity budget and the `[0, 1]` box.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{cross_entropy, ForwardOptions, Model};
use crate::norm::{ForwardMode, StatsMode};
use crate::tensor::{ReduceKind, Tape, Tensor, Var};

/// Guard added to the per-sample l1 norm in the momentum update.
pub const MIM_EPS: f64 = 1e-12;
/// Pixels are pulled into `[CW_DELTA, 1 - CW_DELTA]` before `atanh`.
pub const CW_DELTA: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AttackFamily {
    Fgsm,
    Bim,
    Pgd,
    Mim,
    Cw,
}

impl AttackFamily {
    pub const ALL: [AttackFamily; 5] = [
        AttackFamily::Fgsm,
        AttackFamily::Bim,
        AttackFamily::Pgd,
        AttackFamily::Mim,
        AttackFamily::Cw,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            AttackFamily::Fgsm => "fgsm",
            AttackFamily::Bim => "bim",
            AttackFamily::Pgd => "pgd",
            AttackFamily::Mim => "mim",
            AttackFamily::Cw => "cw",
        }
    }

    /// Whether the family honours the l-infinity budget `eps`.
    pub fn is_linf(self) -> bool {
        self != AttackFamily::Cw
    }
}

impl fmt::Display for AttackFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AttackFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AttackFamily::ALL
            .into_iter()
            .find(|f| f.as_str() == s)
            .ok_or_else(|| Error::Unknown {
                kind: "attack",
                value: s.to_string(),
            })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttackConfig {
    pub family: AttackFamily,
    pub eps: f64,
    /// Step size of iterative families; `None` means `eps / 4`.
    pub alpha: Option<f64>,
    pub steps: usize,
    /// Momentum decay of MIM.
    pub decay: f64,
    /// Trade-off constant of CW.
    pub c: f64,
    /// CW confidence margin.
    pub confidence: f64,
    pub cw_lr: f64,
    pub cw_steps: usize,
    pub random_start: bool,
    /// Statistics used by the model while the attack is generated.
    pub stats_mode: StatsMode,
    /// Seed of the random-start stream.
    pub seed: u64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig {
            family: AttackFamily::Pgd,
            eps: 0.2,
            alpha: None,
            steps: 10,
            decay: 1.0,
            c: 10.0,
            confidence: 0.0,
            cw_lr: 1e-2,
            cw_steps: 100,
            random_start: false,
            stats_mode: StatsMode::Population,
            seed: 0,
        }
    }
}

impl AttackConfig {
    pub fn new(family: AttackFamily, eps: f64) -> Self {
        AttackConfig {
            family,
            eps,
            ..Default::default()
        }
    }

    pub fn alpha(&self) -> f64 {
        self.alpha.unwrap_or(self.eps / 4.0)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParameter(m));
        if !(self.eps >= 0.0 && self.eps.is_finite()) {
            return bad(format!("eps must be finite and >= 0, got {}", self.eps));
        }
        if let Some(a) = self.alpha {
            if !(a > 0.0 && a.is_finite()) {
                return bad(format!("alpha must be > 0, got {a}"));
            }
        }
        if self.steps < 1 {
            return bad("steps must be at least 1".into());
        }
        if !(self.decay >= 0.0 && self.decay.is_finite()) {
            return bad(format!("decay must be >= 0, got {}", self.decay));
        }
        if !(self.c > 0.0 && self.c.is_finite()) {
            return bad(format!("c must be > 0, got {}", self.c));
        }
        if !(self.confidence >= 0.0 && self.confidence.is_finite()) {
            return bad(format!("confidence must be >= 0, got {}", self.confidence));
        }
        if !(self.cw_lr > 0.0 && self.cw_lr.is_finite()) {
            return bad(format!("cw_lr must be > 0, got {}", self.cw_lr));
        }
        if self.cw_steps < 1 {
            return bad("cw_steps must be at least 1".into());
        }
        Ok(())
    }
}

/// Result of attacking one batch.
#[derive(Debug, Clone, PartialEq)]
pub struct AdvBatch {
    pub x_adv: Tensor,
    /// Per-sample `max |x_adv - x|`.
    pub linf_dist: Vec<f64>,
    /// Per-sample misclassification of `x_adv` (under the attack's
    /// statistics mode).
    pub success: Vec<bool>,
}

/// Random stream for one batch: the config seed selects the key, the batch
/// index the stream.
pub fn batch_rng(seed: u64, batch_index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(batch_index);
    rng
}

/// `(d loss / d x, loss)` of the mean cross-entropy with the model at
/// inference under `stats`.
pub fn input_gradient(model: &Model, x: &Tensor, y: &[usize], stats: StatsMode) -> Result<(Tensor, f64)> {
    let mut tape = Tape::new();
    let xv = tape.param(x.clone());
    let pass = model.forward(&mut tape, xv, ForwardMode::Eval(stats), ForwardOptions::default())?;
    let loss = cross_entropy(&mut tape, pass.logits, y)?;
    let loss_value = tape.value(loss).data()[0];
    tape.backward(loss)?;
    let g = tape.grad(xv).ok_or(Error::NoDifferentiableLeaves)?;
    if g.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteGradient("input gradient of attack loss".into()));
    }
    Ok((Tensor::new(x.shape().to_vec(), g.to_vec())?, loss_value))
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// `clamp(clamp(candidate, x - eps, x + eps), 0, 1)`, elementwise.
fn project(candidate: &mut [f64], x: &[f64], eps: f64) {
    for (c, &o) in candidate.iter_mut().zip(x) {
        *c = c.clamp(o - eps, o + eps).clamp(0.0, 1.0);
    }
}

fn finish(model: &Model, x: &Tensor, y: &[usize], x_adv: Tensor, stats: StatsMode) -> Result<AdvBatch> {
    let n = x.shape().first().copied().unwrap_or(0);
    let per = if n == 0 { 0 } else { x.len() / n };
    let linf_dist = (0..n)
        .map(|i| {
            x.data()[i * per..(i + 1) * per]
                .iter()
                .zip(&x_adv.data()[i * per..(i + 1) * per])
                .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()))
        })
        .collect();
    let pred = model.predict(&x_adv, stats)?;
    let success = pred.iter().zip(y).map(|(p, t)| p != t).collect();
    Ok(AdvBatch {
        x_adv,
        linf_dist,
        success,
    })
}

/// One signed-gradient step of size `eps`, clamped to `[0, 1]`.
pub fn fgsm(model: &Model, x: &Tensor, y: &[usize], cfg: &AttackConfig) -> Result<AdvBatch> {
    cfg.validate()?;
    let (g, _) = input_gradient(model, x, y, cfg.stats_mode)?;
    let data = x
        .data()
        .iter()
        .zip(g.data())
        .map(|(&v, &d)| (v + cfg.eps * sign(d)).clamp(0.0, 1.0))
        .collect();
    let x_adv = Tensor::new(x.shape().to_vec(), data)?;
    finish(model, x, y, x_adv, cfg.stats_mode)
}

/// Shared loop of BIM, PGD and MIM. `decay = None` disables momentum.
fn iterate(
    model: &Model,
    x: &Tensor,
    y: &[usize],
    cfg: &AttackConfig,
    start: Vec<f64>,
    decay: Option<f64>,
) -> Result<Tensor> {
    let alpha = cfg.alpha();
    let n = x.shape()[0].max(1);
    let per = x.len() / n;
    let mut cur = Tensor::new(x.shape().to_vec(), start)?;
    let mut momentum = vec![0.0; x.len()];
    for _ in 0..cfg.steps {
        let (g, _) = input_gradient(model, &cur, y, cfg.stats_mode)?;
        let direction: &[f64] = match decay {
            None => g.data(),
            Some(d) => {
                for (gs, ms) in g.data().chunks(per).zip(momentum.chunks_mut(per)) {
                    let l1: f64 = gs.iter().map(|v| v.abs()).sum::<f64>() + MIM_EPS;
                    for (m, &v) in ms.iter_mut().zip(gs) {
                        *m = d * *m + v / l1;
                    }
                }
                &momentum
            }
        };
        let mut next: Vec<f64> = cur
            .data()
            .iter()
            .zip(direction)
            .map(|(&v, &d)| v + alpha * sign(d))
            .collect();
        project(&mut next, x.data(), cfg.eps);
        cur = Tensor::new(x.shape().to_vec(), next)?;
    }
    Ok(cur)
}

/// `steps` signed-gradient steps of size `alpha`, each projected onto the
/// `eps`-ball and the box. Starts at `x`.
pub fn bim(model: &Model, x: &Tensor, y: &[usize], cfg: &AttackConfig) -> Result<AdvBatch> {
    cfg.validate()?;
    let x_adv = iterate(model, x, y, cfg, x.data().to_vec(), None)?;
    finish(model, x, y, x_adv, cfg.stats_mode)
}

/// BIM with an optional uniform random start inside the `eps`-ball.
pub fn pgd(model: &Model, x: &Tensor, y: &[usize], cfg: &AttackConfig, rng: &mut impl Rng) -> Result<AdvBatch> {
    cfg.validate()?;
    let start = if cfg.random_start && cfg.eps > 0.0 {
        x.data()
            .iter()
            .map(|&v| (v + rng.random_range(-cfg.eps..=cfg.eps)).clamp(0.0, 1.0))
            .collect()
    } else {
        x.data().to_vec()
    };
    let x_adv = iterate(model, x, y, cfg, start, None)?;
    finish(model, x, y, x_adv, cfg.stats_mode)
}

/// Momentum iterative attack: `g <- decay * g + grad / |grad|_1` per sample,
/// then a BIM step along `sign(g)`.
pub fn mim(model: &Model, x: &Tensor, y: &[usize], cfg: &AttackConfig) -> Result<AdvBatch> {
    cfg.validate()?;
    let x_adv = iterate(model, x, y, cfg, x.data().to_vec(), Some(cfg.decay))?;
    finish(model, x, y, x_adv, cfg.stats_mode)
}

/// CW objective at `theta` for reference images `x`:
/// `sum_i |x'_i - x_i|^2 + c * sum_i max(Z_y - max_{k != y} Z_k, -confidence)`
/// with `x' = (tanh(theta) + 1) / 2`.
///
/// Returns `(objective, candidate, logits, per-sample squared distance)`.
#[allow(clippy::too_many_arguments)]
pub fn cw_objective(
    tape: &mut Tape,
    model: &Model,
    theta: Var,
    x: &Tensor,
    y: &[usize],
    c: f64,
    confidence: f64,
    stats: StatsMode,
) -> Result<(Var, Var, Var, Var)> {
    let t = tape.tanh(theta)?;
    let t1 = tape.add(t, 1.0)?;
    let cand = tape.mul(t1, 0.5)?;
    let xc = tape.constant(x.clone());
    let diff = tape.sub(cand, xc)?;
    let sq = tape.mul(diff, diff)?;
    let axes: Vec<usize> = (1..x.rank()).collect();
    let dist = tape.reduce(ReduceKind::Sum, sq, &axes)?;
    let pass = model.forward(tape, cand, ForwardMode::Eval(stats), ForwardOptions::default())?;
    let margin = tape.margin(pass.logits, y)?;
    let f = tape.clamp(margin, -confidence, f64::INFINITY)?;
    let total_dist = tape.sum(dist)?;
    let total_f = tape.sum(f)?;
    let weighted = tape.mul(total_f, c)?;
    let objective = tape.add(total_dist, weighted)?;
    Ok((objective, cand, pass.logits, dist))
}

/// `atanh(2 * clamp(x, CW_DELTA, 1 - CW_DELTA) - 1)`.
pub fn cw_init(x: &Tensor) -> Tensor {
    let data = x
        .data()
        .iter()
        .map(|&v| (2.0 * v.clamp(CW_DELTA, 1.0 - CW_DELTA) - 1.0).atanh())
        .collect();
    Tensor::new(x.shape().to_vec(), data).expect("same shape")
}

/// Carlini-Wagner l2 attack by plain gradient descent on the tanh
/// parameterisation. Returns, per sample, the closest successful candidate
/// seen, or the final one if none succeeded.
pub fn cw(model: &Model, x: &Tensor, y: &[usize], cfg: &AttackConfig) -> Result<AdvBatch> {
    cfg.validate()?;
    let n = x.shape()[0];
    let per = if n == 0 { 0 } else { x.len() / n };
    let mut theta = cw_init(x);
    let mut best: Vec<Option<(f64, Vec<f64>)>> = vec![None; n];
    let mut final_candidate = Vec::new();
    for step in 0..=cfg.cw_steps {
        let mut tape = Tape::new();
        let tv = tape.param(theta.clone());
        let (objective, cand, logits, dist) =
            cw_objective(&mut tape, model, tv, x, y, cfg.c, cfg.confidence, cfg.stats_mode)?;
        let candidate = tape.value(cand).data().to_vec();
        let pred = tape.value(logits).argmax_rows()?;
        let d = tape.value(dist).data().to_vec();
        for i in 0..n {
            if pred[i] != y[i] && best[i].as_ref().is_none_or(|(bd, _)| d[i] < *bd) {
                best[i] = Some((d[i], candidate[i * per..(i + 1) * per].to_vec()));
            }
        }
        if step == cfg.cw_steps {
            final_candidate = candidate;
            break;
        }
        if !tape.value(objective).data()[0].is_finite() {
            return Err(Error::NonFinite { op: "cw objective" });
        }
        tape.backward(objective)?;
        let g = tape.grad(tv).ok_or(Error::NoDifferentiableLeaves)?;
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteGradient("cw objective".into()));
        }
        for (t, &gv) in theta.data_mut().iter_mut().zip(g) {
            *t -= cfg.cw_lr * gv;
        }
    }
    let mut out = final_candidate;
    for (i, b) in best.into_iter().enumerate() {
        if let Some((_, v)) = b {
            out[i * per..(i + 1) * per].copy_from_slice(&v);
        }
    }
    let x_adv = Tensor::new(x.shape().to_vec(), out)?;
    finish(model, x, y, x_adv, cfg.stats_mode)
}

/// Routes to the configured family.
pub fn attack(cfg: &AttackConfig, model: &Model, x: &Tensor, y: &[usize], rng: &mut impl Rng) -> Result<AdvBatch> {
    match cfg.family {
        AttackFamily::Fgsm => fgsm(model, x, y, cfg),
        AttackFamily::Bim => bim(model, x, y, cfg),
        AttackFamily::Pgd => pgd(model, x, y, cfg, rng),
        AttackFamily::Mim => mim(model, x, y, cfg),
        AttackFamily::Cw => cw(model, x, y, cfg),
    }
}
