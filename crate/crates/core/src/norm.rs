//! Normalization layers: BatchNorm with explicit statistics modes,
//! RobustNorm (mean-centred, divided by the batch range raised to a power),
//! RobustNorm with the tracked population mean, LayerNorm and identity.
//!
//! Channels live on axis 1 for both supported layouts: `[N, D]` (features
//! reduced over the batch) and `[N, C, H, W]` (channels reduced over batch
//! and spatial positions).

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::tensor::{BinaryOp, NormCenter, NormScale, ReduceKind, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum NormKind {
    BatchNorm,
    RobustNorm,
    /// RobustNorm that always centres with the tracked mean at inference.
    RobustNormPopMean,
    LayerNorm,
    Identity,
}

impl NormKind {
    pub const ALL: [NormKind; 5] = [
        NormKind::BatchNorm,
        NormKind::RobustNorm,
        NormKind::RobustNormPopMean,
        NormKind::LayerNorm,
        NormKind::Identity,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            NormKind::BatchNorm => "batchnorm",
            NormKind::RobustNorm => "robustnorm",
            NormKind::RobustNormPopMean => "robustnorm-popmean",
            NormKind::LayerNorm => "layernorm",
            NormKind::Identity => "identity",
        }
    }

    /// Whether this kind keeps running statistics.
    pub fn tracks_statistics(self) -> bool {
        matches!(
            self,
            NormKind::BatchNorm | NormKind::RobustNorm | NormKind::RobustNormPopMean
        )
    }

    pub fn is_robust(self) -> bool {
        matches!(self, NormKind::RobustNorm | NormKind::RobustNormPopMean)
    }

    /// Statistics a layer of this kind uses at inference unless told
    /// otherwise: batch statistics for RobustNorm, tracked ones elsewhere.
    pub fn default_eval_stats(self) -> StatsMode {
        match self {
            NormKind::RobustNorm => StatsMode::Batch,
            _ => StatsMode::Population,
        }
    }
}

impl fmt::Display for NormKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for NormKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        NormKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .or(match s {
                "none" | "no-norm" => Some(NormKind::Identity),
                "rn-popmean" => Some(NormKind::RobustNormPopMean),
                _ => None,
            })
            .ok_or_else(|| Error::Unknown {
                kind: "norm kind",
                value: s.to_string(),
            })
    }
}

/// Where inference-time statistics come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum StatsMode {
    /// Tracked estimates accumulated during training.
    Population,
    /// Statistics recomputed from the batch being classified.
    Batch,
}

impl StatsMode {
    pub fn as_str(self) -> &'static str {
        match self {
            StatsMode::Population => "population",
            StatsMode::Batch => "batch",
        }
    }

    /// One-letter tag used in reports: `P` or `B`.
    pub fn tag(self) -> &'static str {
        match self {
            StatsMode::Population => "P",
            StatsMode::Batch => "B",
        }
    }
}

impl fmt::Display for StatsMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for StatsMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "population" | "P" | "p" => Ok(StatsMode::Population),
            "batch" | "B" | "b" => Ok(StatsMode::Batch),
            _ => Err(Error::Unknown {
                kind: "stats mode",
                value: s.to_string(),
            }),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ForwardMode {
    /// Batch statistics; running estimates are updated afterwards.
    Train,
    /// Read-only inference with the chosen statistics source.
    Eval(StatsMode),
}

/// Per-channel statistics of one batch.
#[derive(Debug, Clone, PartialEq)]
pub struct StatsSnapshot {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub min: Vec<f64>,
    pub max: Vec<f64>,
    /// Elements reduced into each channel statistic.
    pub count: usize,
}

impl StatsSnapshot {
    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    pub fn range(&self) -> Vec<f64> {
        self.max.iter().zip(&self.min).map(|(u, l)| u - l).collect()
    }
}

fn reduction_axes(shape: &[usize]) -> Result<Vec<usize>> {
    match shape.len() {
        2 => Ok(vec![0]),
        4 => Ok(vec![0, 2, 3]),
        _ => Err(Error::InvalidShape {
            op: "norm",
            reason: format!("expected [N, D] or [N, C, H, W], got {shape:?}"),
        }),
    }
}

/// Mean, biased variance, minimum and maximum of every channel.
pub fn compute_stats(x: &Tensor) -> Result<StatsSnapshot> {
    let shape = x.shape();
    reduction_axes(shape)?;
    let (n, c) = (shape[0], shape[1]);
    let inner: usize = shape[2..].iter().product();
    let count = n * inner;
    if count == 0 {
        return Err(Error::DegenerateBatch("zero-size batch".into()));
    }
    let data = x.data();
    let mut mean = vec![0.0; c];
    let mut min = vec![f64::INFINITY; c];
    let mut max = vec![f64::NEG_INFINITY; c];
    for s in 0..n {
        for ch in 0..c {
            let base = (s * c + ch) * inner;
            for &v in &data[base..base + inner] {
                mean[ch] += v;
                min[ch] = min[ch].min(v);
                max[ch] = max[ch].max(v);
            }
        }
    }
    mean.iter_mut().for_each(|m| *m /= count as f64);
    let mut var = vec![0.0; c];
    for s in 0..n {
        for ch in 0..c {
            let base = (s * c + ch) * inner;
            for &v in &data[base..base + inner] {
                let d = v - mean[ch];
                var[ch] += d * d;
            }
        }
    }
    var.iter_mut().for_each(|v| *v /= count as f64);
    Ok(StatsSnapshot {
        mean,
        var,
        min,
        max,
        count,
    })
}

/// Exponential tracking: `est = (1 - tau) * est + tau * batch` for both
/// mean and variance.
pub fn update_tracking(state: &mut NormState, snapshot: &StatsSnapshot, tau: f64) -> Result<()> {
    if !(tau > 0.0 && tau <= 1.0) {
        return Err(Error::InvalidParameter(format!("tracking rate {tau} not in (0, 1]")));
    }
    if snapshot.channels() != state.channels() {
        return Err(Error::ShapeMismatch {
            op: "update_tracking",
            lhs: vec![state.channels()],
            rhs: vec![snapshot.channels()],
        });
    }
    for (est, &b) in state.mu_hat_p.iter_mut().zip(&snapshot.mean) {
        *est = (1.0 - tau) * *est + tau * b;
    }
    for (est, &b) in state.sigma2_hat_p.iter_mut().zip(&snapshot.var) {
        *est = (1.0 - tau) * *est + tau * b;
    }
    Ok(())
}

/// `range^2 <= 2 * M * var` for every channel, with a `1e-9` slack.
pub fn nagy_check(snapshot: &StatsSnapshot, count: usize) -> bool {
    snapshot
        .range()
        .iter()
        .zip(&snapshot.var)
        .all(|(r, v)| r * r <= 2.0 * count as f64 * v + 1e-9)
}

/// Hyperparameters and learned/tracked values of one normalization layer.
#[derive(Debug, Clone, PartialEq)]
pub struct NormState {
    pub kind: NormKind,
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub mu_hat_p: Vec<f64>,
    pub sigma2_hat_p: Vec<f64>,
    pub tau: f64,
    pub p: f64,
    pub eps: f64,
    /// Apply the learned per-channel scale and shift.
    pub affine: bool,
}

pub const DEFAULT_TAU: f64 = 0.1;
pub const DEFAULT_EPS: f64 = 1e-5;
pub const DEFAULT_POWER: f64 = 0.2;

impl NormState {
    pub fn new(kind: NormKind, channels: usize) -> Self {
        NormState {
            kind,
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            mu_hat_p: vec![0.0; channels],
            sigma2_hat_p: vec![1.0; channels],
            tau: DEFAULT_TAU,
            p: DEFAULT_POWER,
            eps: DEFAULT_EPS,
            affine: true,
        }
    }

    pub fn with_power(mut self, p: f64) -> Self {
        self.p = p;
        self
    }

    pub fn with_tau(mut self, tau: f64) -> Self {
        self.tau = tau;
        self
    }

    pub fn with_eps(mut self, eps: f64) -> Self {
        self.eps = eps;
        self
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.channels();
        if self.beta.len() != c || self.mu_hat_p.len() != c || self.sigma2_hat_p.len() != c {
            return Err(Error::InvalidParameter("norm state vectors differ in length".into()));
        }
        if self.sigma2_hat_p.iter().any(|&v| v < 0.0) {
            return Err(Error::InvalidParameter("negative tracked variance".into()));
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return Err(Error::InvalidParameter(format!("tracking rate {} not in (0, 1]", self.tau)));
        }
        if !(self.p > 0.0 && self.p <= 1.0) {
            return Err(Error::InvalidParameter(format!("norm power {} not in (0, 1]", self.p)));
        }
        if !(self.eps >= 0.0) {
            return Err(Error::InvalidParameter(format!("eps {} must be non-negative", self.eps)));
        }
        Ok(())
    }

    /// Tracking update with the layer's own rate.
    pub fn track(&mut self, snapshot: &StatsSnapshot) -> Result<()> {
        let tau = self.tau;
        update_tracking(self, snapshot, tau)
    }
}

/// Tape handles for a layer's learnable scale and shift.
#[derive(Debug, Clone, Copy)]
pub struct AffineVars {
    pub gamma: Var,
    pub beta: Var,
}

/// Result of a normalization forward.
#[derive(Debug)]
pub struct NormOutput {
    pub y: Var,
    /// Batch statistics to feed into tracking; present only in train mode.
    pub snapshot: Option<StatsSnapshot>,
}

impl AffineVars {
    /// Records `gamma`/`beta` as tape leaves.
    pub fn record(tape: &mut Tape, state: &NormState, trainable: bool) -> Self {
        let g = Tensor::from_vec(state.gamma.clone()).with_requires_grad(trainable);
        let b = Tensor::from_vec(state.beta.clone()).with_requires_grad(trainable);
        AffineVars {
            gamma: tape.leaf(g),
            beta: tape.leaf(b),
        }
    }
}

fn apply_affine(tape: &mut Tape, xn: Var, state: &NormState, affine: AffineVars) -> Result<Var> {
    if !state.affine {
        return Ok(xn);
    }
    let scaled = tape.axis_binary(BinaryOp::Mul, xn, affine.gamma, 1)?;
    tape.axis_binary(BinaryOp::Add, scaled, affine.beta, 1)
}

fn snapshot_if_training(tape: &Tape, x: Var, mode: ForwardMode) -> Result<Option<StatsSnapshot>> {
    match mode {
        ForwardMode::Train => compute_stats(tape.value(x)).map(Some),
        ForwardMode::Eval(_) => Ok(None),
    }
}

/// `y = gamma * (x - mean) / sqrt(var + eps) + beta`.
///
/// Training and `Eval(Batch)` use statistics of the presented batch (and
/// differentiate through them); `Eval(Population)` uses the tracked ones.
pub fn batchnorm_forward(
    tape: &mut Tape,
    x: Var,
    state: &NormState,
    affine: AffineVars,
    mode: ForwardMode,
) -> Result<NormOutput> {
    let axes = reduction_axes(tape.shape(x))?;
    let (center, scale) = match mode {
        ForwardMode::Eval(StatsMode::Population) => (
            NormCenter::Fixed(state.mu_hat_p.clone()),
            NormScale::Fixed(state.sigma2_hat_p.iter().map(|v| (v + state.eps).powf(0.5)).collect()),
        ),
        ForwardMode::Train | ForwardMode::Eval(StatsMode::Batch) => {
            let count: usize = axes.iter().map(|&a| tape.shape(x)[a]).product();
            if count <= 1 {
                return Err(Error::DegenerateBatch(format!(
                    "batch statistics over {count} element(s) per channel"
                )));
            }
            (NormCenter::Batch, NormScale::BatchStd { eps: state.eps })
        }
    };
    let snapshot = snapshot_if_training(tape, x, mode)?;
    let xn = tape.channel_normalize(x, center, scale)?;
    let y = apply_affine(tape, xn, state, affine)?;
    Ok(NormOutput { y, snapshot })
}

/// `y = gamma * (x - mean) / (range + eps)^p + beta`, where the range is
/// always taken from the presented batch. The mean is the batch mean except
/// for `Eval(Population)` or the pop-mean kind at inference, which use the
/// tracked mean.
pub fn robustnorm_forward(
    tape: &mut Tape,
    x: Var,
    state: &NormState,
    affine: AffineVars,
    mode: ForwardMode,
) -> Result<NormOutput> {
    reduction_axes(tape.shape(x))?;
    let center = if uses_tracked_mean(state, mode) {
        NormCenter::Fixed(state.mu_hat_p.clone())
    } else {
        NormCenter::Batch
    };
    let snapshot = snapshot_if_training(tape, x, mode)?;
    let scale = NormScale::BatchRange {
        eps: state.eps,
        power: state.p,
    };
    let xn = tape.channel_normalize(x, center, scale)?;
    let y = apply_affine(tape, xn, state, affine)?;
    Ok(NormOutput { y, snapshot })
}

fn uses_tracked_mean(state: &NormState, mode: ForwardMode) -> bool {
    match mode {
        ForwardMode::Train => false,
        ForwardMode::Eval(StatsMode::Population) => true,
        ForwardMode::Eval(StatsMode::Batch) => state.kind == NormKind::RobustNormPopMean,
    }
}

/// Per-sample normalization over every non-batch axis, followed by the
/// per-channel affine. Keeps no running state.
pub fn layernorm_forward(tape: &mut Tape, x: Var, state: &NormState, affine: AffineVars) -> Result<Var> {
    let rank = tape.shape(x).len();
    reduction_axes(tape.shape(x))?;
    let axes: Vec<usize> = (1..rank).collect();
    let mean = tape.reduce(ReduceKind::Mean, x, &axes)?;
    let var = tape.reduce(ReduceKind::VarBiased, x, &axes)?;
    let centred = tape.axis_binary(BinaryOp::Sub, x, mean, 0)?;
    let shifted = tape.add(var, state.eps)?;
    let std = tape.pow(shifted, 0.5)?;
    let xn = tape.axis_binary(BinaryOp::Div, centred, std, 0)?;
    apply_affine(tape, xn, state, affine)
}

/// Dispatches on `state.kind`.
pub fn norm_forward(
    tape: &mut Tape,
    x: Var,
    state: &NormState,
    affine: AffineVars,
    mode: ForwardMode,
) -> Result<NormOutput> {
    match state.kind {
        NormKind::BatchNorm => batchnorm_forward(tape, x, state, affine, mode),
        NormKind::RobustNorm | NormKind::RobustNormPopMean => {
            robustnorm_forward(tape, x, state, affine, mode)
        }
        NormKind::LayerNorm => Ok(NormOutput {
            y: layernorm_forward(tape, x, state, affine)?,
            snapshot: None,
        }),
        NormKind::Identity => Ok(NormOutput { y: x, snapshot: None }),
    }
}
