//! Experiment protocols and their CSV reports.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use crate::attacks::{attack, batch_rng, AttackConfig};
use crate::data::{batches, Dataset};
use crate::error::{Error, Result};
use crate::nn::{build_zoo, Arch, ForwardOptions, Layer, Model};
use crate::norm::{ForwardMode, NormKind, StatsMode};
use crate::tensor::{Tape, Tensor};
use crate::train::{fit, EpochMetrics, TrainConfig};

/// Version stamped into every report row.
pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// Default evaluation batch size, equal to the training batch size.
pub const DEFAULT_EVAL_BATCH: usize = 128;

/// Default power grid of the power sweep.
pub const DEFAULT_P_GRID: [f64; 5] = [0.05, 0.1, 0.2, 0.5, 1.0];

/// Default batch-size grid of the small-batch study.
pub const DEFAULT_SMALL_BATCHES: [usize; 8] = [1, 2, 4, 8, 16, 32, 64, 128];

/// Default l-infinity budget for a dataset id.
pub fn default_eps(dataset: &str) -> f64 {
    match dataset {
        "mnist" => 0.2,
        "fashion-mnist" => 0.06,
        _ => 0.1,
    }
}

/// Runs `f` over `items` on up to `jobs` threads; results keep item order.
pub fn par_map<T, R, F>(items: &[T], jobs: usize, f: F) -> Result<Vec<R>>
where
    T: Sync,
    R: Send,
    F: Fn(usize, &T) -> Result<R> + Sync,
{
    let jobs = jobs.max(1).min(items.len().max(1));
    if jobs == 1 {
        return items.iter().enumerate().map(|(i, t)| f(i, t)).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<Result<R>>>> = Mutex::new((0..items.len()).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..jobs {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= items.len() {
                    break;
                }
                let r = f(i, &items[i]);
                slots.lock().expect("no panics while holding the lock")[i] = Some(r);
            });
        }
    });
    slots
        .into_inner()
        .expect("workers joined")
        .into_iter()
        .map(|r| r.expect("every slot filled"))
        .collect()
}

/// A model evaluated with a fixed statistics mode, labelled for reports.
#[derive(Debug, Clone, Copy)]
pub struct EvalTarget<'a> {
    pub model: &'a Model,
    pub stats: StatsMode,
}

impl<'a> EvalTarget<'a> {
    pub fn new(model: &'a Model, stats: StatsMode) -> Self {
        EvalTarget { model, stats }
    }

    /// The model's kind evaluated its default way.
    pub fn default_for(model: &'a Model) -> Self {
        EvalTarget {
            model,
            stats: model.norm.default_eval_stats(),
        }
    }

    /// `batchnorm`, `robustnorm`, or `robustnorm-popmean` for a RobustNorm
    /// model read with its tracked mean.
    pub fn variant(&self) -> String {
        match (self.model.norm, self.stats) {
            (NormKind::RobustNorm, StatsMode::Population) => NormKind::RobustNormPopMean.to_string(),
            (kind, _) => kind.to_string(),
        }
    }
}

/// Accuracies (percent) over a dataset.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalResult {
    pub clean_acc: f64,
    pub adv_acc: f64,
    pub samples: usize,
}

/// How an evaluation pass is batched and attacked.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalOptions {
    pub batch_size: usize,
    /// Statistics used while generating attacks. `None` means the
    /// evaluation mode.
    pub attack_stats: Option<StatsMode>,
    pub jobs: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            batch_size: DEFAULT_EVAL_BATCH,
            attack_stats: None,
            jobs: 1,
        }
    }
}

fn count_correct(pred: &[usize], y: &[usize]) -> usize {
    pred.iter().zip(y).filter(|(p, t)| p == t).count()
}

fn percent(correct: usize, total: usize) -> f64 {
    if total == 0 {
        0.0
    } else {
        100.0 * correct as f64 / total as f64
    }
}

/// Clean and (optionally) adversarial accuracy of `target` on `data`.
/// Without an attack the adversarial column repeats the clean one.
pub fn evaluate(target: EvalTarget<'_>, data: &Dataset, atk: Option<&AttackConfig>, opts: &EvalOptions) -> Result<EvalResult> {
    let parts: Vec<(Tensor, Vec<usize>)> = batches(data, opts.batch_size, false, 0)?.collect();
    let cfg = atk.map(|a| AttackConfig {
        stats_mode: opts.attack_stats.unwrap_or(target.stats),
        ..a.clone()
    });
    let counts = par_map(&parts, opts.jobs, |i, (x, y)| {
        let clean = target.model.predict(x, target.stats)?;
        let c = count_correct(&clean, y);
        let a = match &cfg {
            None => c,
            Some(cfg) => {
                let adv = attack(cfg, target.model, x, y, &mut batch_rng(cfg.seed, i as u64))?;
                count_correct(&target.model.predict(&adv.x_adv, target.stats)?, y)
            }
        };
        Ok((c, a))
    })?;
    let (clean, adv) = counts.iter().fold((0, 0), |(c, a), &(x, y)| (c + x, a + y));
    Ok(EvalResult {
        clean_acc: percent(clean, data.len()),
        adv_acc: percent(adv, data.len()),
        samples: data.len(),
    })
}

/// Predicted labels over `data` in batches of `batch_size`.
pub fn predictions(target: EvalTarget<'_>, data: &Dataset, batch_size: usize) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(data.len());
    for (x, _) in batches(data, batch_size, false, 0)? {
        out.extend(target.model.predict(&x, target.stats)?);
    }
    Ok(out)
}

/// One configuration cell of a report.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub dataset: String,
    pub arch: String,
    pub norm: String,
    pub p: f64,
    /// `P` or `B`.
    pub stats_mode: String,
    pub attack: String,
    pub eps: f64,
    pub batch_size: usize,
    /// `None` for rows averaged over seeds.
    pub seed: Option<u64>,
    pub clean_acc: f64,
    pub adv_acc: f64,
    /// Additional named columns.
    pub extra: Vec<(String, String)>,
}

impl ReportRow {
    fn for_target(target: &EvalTarget<'_>) -> Self {
        let m = target.model;
        ReportRow {
            dataset: m.dataset.name.clone(),
            arch: m.arch.to_string(),
            norm: target.variant(),
            p: if m.norm.is_robust() { m.p } else { 0.0 },
            stats_mode: target.stats.tag().to_string(),
            attack: "none".into(),
            eps: 0.0,
            batch_size: DEFAULT_EVAL_BATCH,
            seed: Some(m.seed),
            clean_acc: 0.0,
            adv_acc: 0.0,
            extra: Vec::new(),
        }
    }

    /// Columns that identify the cell, everything but seed and metrics.
    fn cell_key(&self) -> String {
        format!(
            "{}|{}|{}|{}|{}|{}|{}|{}",
            self.dataset, self.arch, self.norm, self.p, self.stats_mode, self.attack, self.eps, self.batch_size
        )
    }

    pub fn extra(&self, key: &str) -> Option<&str> {
        self.extra.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }
}

const BASE_COLUMNS: [&str; 12] = [
    "schema_version",
    "dataset",
    "arch",
    "norm",
    "p",
    "stats_mode",
    "attack",
    "eps",
    "batch_size",
    "seed",
    "clean_acc",
    "adv_acc",
];

/// Tabular experiment output, one row per configuration cell.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ExperimentReport {
    pub rows: Vec<ReportRow>,
}

impl ExperimentReport {
    pub fn extra_columns(&self) -> Vec<String> {
        let mut cols: Vec<String> = Vec::new();
        for row in &self.rows {
            for (k, _) in &row.extra {
                if !cols.contains(k) {
                    cols.push(k.clone());
                }
            }
        }
        cols
    }

    pub fn to_csv(&self) -> Result<String> {
        let extra = self.extra_columns();
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header: Vec<&str> = BASE_COLUMNS.to_vec();
        header.extend(extra.iter().map(String::as_str));
        w.write_record(&header)?;
        for r in &self.rows {
            let mut rec = vec![
                REPORT_SCHEMA_VERSION.to_string(),
                r.dataset.clone(),
                r.arch.clone(),
                r.norm.clone(),
                r.p.to_string(),
                r.stats_mode.clone(),
                r.attack.clone(),
                r.eps.to_string(),
                r.batch_size.to_string(),
                r.seed.map_or_else(|| "mean".to_string(), |s| s.to_string()),
                r.clean_acc.to_string(),
                r.adv_acc.to_string(),
            ];
            rec.extend(extra.iter().map(|k| r.extra(k).unwrap_or("").to_string()));
            w.write_record(&rec)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Csv(e.into_error().into()))?;
        Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_csv()?).map_err(|e| Error::io(path, e))
    }

    /// Parses a report written by [`ExperimentReport::to_csv`].
    pub fn from_csv(text: &str) -> Result<Self> {
        let mut rd = csv::Reader::from_reader(text.as_bytes());
        let header = rd.headers()?.clone();
        if header.len() < BASE_COLUMNS.len() || header.iter().zip(BASE_COLUMNS).any(|(a, b)| a != b) {
            return Err(Error::InvalidParameter("not an experiment report header".into()));
        }
        let bad = |what: &str, v: &str| Error::InvalidParameter(format!("report column {what}: bad value {v:?}"));
        let mut rows = Vec::new();
        for rec in rd.records() {
            let rec = rec?;
            let num = |i: usize| rec[i].parse::<f64>().map_err(|_| bad(BASE_COLUMNS[i], &rec[i]));
            if rec[0] != *REPORT_SCHEMA_VERSION.to_string() {
                return Err(bad("schema_version", &rec[0]));
            }
            rows.push(ReportRow {
                dataset: rec[1].to_string(),
                arch: rec[2].to_string(),
                norm: rec[3].to_string(),
                p: num(4)?,
                stats_mode: rec[5].to_string(),
                attack: rec[6].to_string(),
                eps: num(7)?,
                batch_size: rec[8].parse().map_err(|_| bad("batch_size", &rec[8]))?,
                seed: match &rec[9] {
                    "mean" => None,
                    s => Some(s.parse().map_err(|_| bad("seed", s))?),
                },
                clean_acc: num(10)?,
                adv_acc: num(11)?,
                extra: header
                    .iter()
                    .zip(rec.iter())
                    .skip(BASE_COLUMNS.len())
                    .filter(|(_, v)| !v.is_empty())
                    .map(|(k, v)| (k.to_string(), v.to_string()))
                    .collect(),
            });
        }
        Ok(ExperimentReport { rows })
    }

    /// Averages accuracies of rows that differ only by seed.
    pub fn mean_over_seeds(&self) -> ExperimentReport {
        let mut order: Vec<String> = Vec::new();
        let mut groups: BTreeMap<String, Vec<&ReportRow>> = BTreeMap::new();
        for r in &self.rows {
            let key = r.cell_key();
            if !groups.contains_key(&key) {
                order.push(key.clone());
            }
            groups.entry(key).or_default().push(r);
        }
        let rows = order
            .iter()
            .map(|k| {
                let g = &groups[k];
                let n = g.len() as f64;
                ReportRow {
                    seed: None,
                    clean_acc: g.iter().map(|r| r.clean_acc).sum::<f64>() / n,
                    adv_acc: g.iter().map(|r| r.adv_acc).sum::<f64>() / n,
                    extra: vec![("n_seeds".into(), g.len().to_string())],
                    ..g[0].clone()
                }
            })
            .collect();
        ExperimentReport { rows }
    }
}

/// Percentage gain of batch over population statistics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Gain {
    Finite(f64),
    /// Population accuracy was zero.
    Infinite,
}

impl Gain {
    pub fn value(self) -> f64 {
        match self {
            Gain::Finite(v) => v,
            Gain::Infinite => f64::INFINITY,
        }
    }
}

impl fmt::Display for Gain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Gain::Finite(v) => write!(f, "{v}"),
            Gain::Infinite => f.write_str("inf"),
        }
    }
}

/// `100 * (acc_b - acc_p) / acc_p`.
pub fn gain(acc_p: f64, acc_b: f64) -> Gain {
    if acc_p == 0.0 {
        Gain::Infinite
    } else {
        Gain::Finite(100.0 * (acc_b - acc_p) / acc_p)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GainRow {
    pub dataset: String,
    pub arch: String,
    pub norm: String,
    pub attack: String,
    pub eps: f64,
    pub seed: Option<u64>,
    pub acc_p: f64,
    pub acc_b: f64,
    pub gain: Gain,
}

/// Pairs `P` and `B` rows of the same cell and computes their gain.
pub fn gain_metric(report: &ExperimentReport) -> Result<Vec<GainRow>> {
    let key = |r: &ReportRow| {
        (
            r.dataset.clone(),
            r.arch.clone(),
            r.norm.clone(),
            r.attack.clone(),
            r.eps.to_bits(),
            r.batch_size,
            r.seed,
        )
    };
    let mut out = Vec::new();
    for p in report.rows.iter().filter(|r| r.stats_mode == StatsMode::Population.tag()) {
        let b = report
            .rows
            .iter()
            .find(|r| r.stats_mode == StatsMode::Batch.tag() && key(r) == key(p))
            .ok_or_else(|| {
                Error::InvalidParameter(format!("no batch-statistics row pairs with {} eps={}", p.attack, p.eps))
            })?;
        out.push(GainRow {
            dataset: p.dataset.clone(),
            arch: p.arch.clone(),
            norm: p.norm.clone(),
            attack: p.attack.clone(),
            eps: p.eps,
            seed: p.seed,
            acc_p: p.adv_acc,
            acc_b: b.adv_acc,
            gain: gain(p.adv_acc, b.adv_acc),
        });
    }
    if out.is_empty() {
        return Err(Error::InvalidParameter("report has no paired P/B rows".into()));
    }
    Ok(out)
}

pub fn gain_csv(rows: &[GainRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["schema_version", "dataset", "arch", "norm", "attack", "eps", "seed", "acc_p", "acc_b", "gain_percent"])?;
    for r in rows {
        w.write_record([
            REPORT_SCHEMA_VERSION.to_string(),
            r.dataset.clone(),
            r.arch.clone(),
            r.norm.clone(),
            r.attack.clone(),
            r.eps.to_string(),
            r.seed.map_or_else(|| "mean".to_string(), |s| s.to_string()),
            r.acc_p.to_string(),
            r.acc_b.to_string(),
            r.gain.to_string(),
        ])?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Csv(e.into_error().into()))?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}

fn has_batchnorm(model: &Model) -> bool {
    model.has_norm(NormKind::BatchNorm)
}

/// Accuracy of a BatchNorm model under each attack with tracked (`P`) and
/// batch (`B`) statistics.
pub fn run_statswap(model: &Model, val: &Dataset, attacks: &[AttackConfig], opts: &EvalOptions) -> Result<ExperimentReport> {
    if !has_batchnorm(model) {
        return Err(Error::InvalidParameter("statswap needs a model with batchnorm layers".into()));
    }
    let mut rows = Vec::new();
    for atk in attacks {
        for stats in [StatsMode::Population, StatsMode::Batch] {
            let target = EvalTarget::new(model, stats);
            let r = evaluate(target, val, Some(atk), opts)?;
            rows.push(ReportRow {
                attack: atk.family.to_string(),
                eps: atk.eps,
                batch_size: opts.batch_size,
                clean_acc: r.clean_acc,
                adv_acc: r.adv_acc,
                extra: vec![(
                    "attack_stats".into(),
                    opts.attack_stats.unwrap_or(stats).tag().to_string(),
                )],
                ..ReportRow::for_target(&target)
            });
        }
    }
    Ok(ExperimentReport { rows })
}

/// One channel's deviation of batch statistics from tracked statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct StatDiffRow {
    pub layer: String,
    pub channel: usize,
    pub batch_index: usize,
    pub d_mean: f64,
    pub d_var: f64,
}

/// Per-layer, per-channel `(mu_B - mu_hat_P, sigma2_B - sigma2_hat_P)` of
/// the inputs each normalization layer sees while the model runs on tracked
/// statistics. Inputs are attacked first when `atk` is given.
pub fn stat_diff_report(
    model: &Model,
    val: &Dataset,
    atk: Option<&AttackConfig>,
    batch_size: usize,
) -> Result<Vec<StatDiffRow>> {
    let mut rows = Vec::new();
    for (b, (x, y)) in batches(val, batch_size, false, 0)?.enumerate() {
        let x = match atk {
            Some(cfg) => {
                let cfg = AttackConfig {
                    stats_mode: StatsMode::Population,
                    ..cfg.clone()
                };
                attack(&cfg, model, &x, &y, &mut batch_rng(cfg.seed, b as u64))?.x_adv
            }
            None => x,
        };
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let pass = model.forward(
            &mut tape,
            xv,
            ForwardMode::Eval(StatsMode::Population),
            ForwardOptions {
                trainable: false,
                collect_stats: true,
            },
        )?;
        for (idx, snap) in &pass.snapshots {
            let Layer::Norm { name, state } = &model.layers[*idx] else {
                continue;
            };
            for ch in 0..snap.channels() {
                rows.push(StatDiffRow {
                    layer: name.clone(),
                    channel: ch,
                    batch_index: b,
                    d_mean: snap.mean[ch] - state.mu_hat_p[ch],
                    d_var: snap.var[ch] - state.sigma2_hat_p[ch],
                });
            }
        }
    }
    Ok(rows)
}

pub fn stat_diff_csv(rows: &[StatDiffRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["schema_version", "layer", "channel", "batch_index", "d_mean", "d_var"])?;
    for r in rows {
        w.write_record([
            REPORT_SCHEMA_VERSION.to_string(),
            r.layer.clone(),
            r.channel.to_string(),
            r.batch_index.to_string(),
            r.d_mean.to_string(),
            r.d_var.to_string(),
        ])?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Csv(e.into_error().into()))?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}

/// Summary of a statistics-difference report.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StatDiffSummary {
    pub median_abs_d_mean: f64,
    pub median_abs_d_var: f64,
    /// Mean over channels of the share of batches whose `d_mean` sign
    /// matches the channel's majority sign.
    pub sign_agreement: f64,
}

fn median(mut v: Vec<f64>) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

pub fn summarize_stat_diff(rows: &[StatDiffRow]) -> StatDiffSummary {
    let mut per_channel: BTreeMap<(&str, usize), (usize, usize)> = BTreeMap::new();
    for r in rows {
        let e = per_channel.entry((r.layer.as_str(), r.channel)).or_default();
        if r.d_mean > 0.0 {
            e.0 += 1;
        } else if r.d_mean < 0.0 {
            e.1 += 1;
        }
    }
    let agreement: Vec<f64> = per_channel
        .values()
        .filter(|(pos, neg)| pos + neg > 0)
        .map(|&(pos, neg)| pos.max(neg) as f64 / (pos + neg) as f64)
        .collect();
    StatDiffSummary {
        median_abs_d_mean: median(rows.iter().map(|r| r.d_mean.abs()).collect()),
        median_abs_d_var: median(rows.iter().map(|r| r.d_var.abs()).collect()),
        sign_agreement: if agreement.is_empty() {
            1.0
        } else {
            agreement.iter().sum::<f64>() / agreement.len() as f64
        },
    }
}

/// Accuracy versus budget for every target, family and `eps`.
pub fn run_eps_sweep(
    targets: &[EvalTarget<'_>],
    attacks: &[AttackConfig],
    eps_grid: &[f64],
    opts: &EvalOptions,
    val: &Dataset,
) -> Result<ExperimentReport> {
    if eps_grid.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::InvalidParameter("eps grid must be ascending".into()));
    }
    let mut cells = Vec::new();
    for (t, target) in targets.iter().enumerate() {
        for atk in attacks {
            for &eps in eps_grid {
                cells.push((t, *target, AttackConfig { eps, ..atk.clone() }));
            }
        }
    }
    let inner = EvalOptions { jobs: 1, ..opts.clone() };
    let rows = par_map(&cells, opts.jobs, |_, (_, target, atk)| {
        let r = evaluate(*target, val, Some(atk), &inner)?;
        Ok(ReportRow {
            attack: atk.family.to_string(),
            eps: atk.eps,
            batch_size: opts.batch_size,
            clean_acc: r.clean_acc,
            adv_acc: r.adv_acc,
            ..ReportRow::for_target(target)
        })
    })?;
    Ok(ExperimentReport { rows })
}

/// Count of strict increases along a sequence.
pub fn count_inversions(values: &[f64]) -> usize {
    values.windows(2).filter(|w| w[1] > w[0]).count()
}

/// Training curve point of one power value.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurvePoint {
    pub p: f64,
    pub metrics: EpochMetrics,
}

pub fn curves_csv(points: &[CurvePoint]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["schema_version", "p", "epoch", "lr", "loss", "acc"])?;
    for c in points {
        w.write_record([
            REPORT_SCHEMA_VERSION.to_string(),
            c.p.to_string(),
            c.metrics.epoch.to_string(),
            c.metrics.lr.to_string(),
            c.metrics.loss.to_string(),
            c.metrics.accuracy.to_string(),
        ])?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Csv(e.into_error().into()))?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}

/// Training metrics as CSV: `epoch, lr, loss, acc`.
pub fn metrics_csv(history: &[EpochMetrics]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["schema_version", "epoch", "lr", "loss", "acc"])?;
    for m in history {
        w.write_record([
            REPORT_SCHEMA_VERSION.to_string(),
            m.epoch.to_string(),
            m.lr.to_string(),
            m.loss.to_string(),
            m.accuracy.to_string(),
        ])?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Csv(e.into_error().into()))?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}

/// Setup of the power sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct PSweepConfig {
    pub arch: Arch,
    pub p_grid: Vec<f64>,
    pub tau: f64,
    pub train: TrainConfig,
    pub attack: AttackConfig,
    pub eval: EvalOptions,
}

/// Trains one RobustNorm model per power, all from the same seed, and
/// reports final clean/adversarial accuracy plus the training curves.
pub fn run_p_sweep(train: &Dataset, val: &Dataset, cfg: &PSweepConfig) -> Result<(ExperimentReport, Vec<CurvePoint>)> {
    if cfg.p_grid.iter().any(|&p| !(p > 0.0 && p <= 1.0)) {
        return Err(Error::InvalidParameter("p grid values must lie in (0, 1]".into()));
    }
    let inner = EvalOptions { jobs: 1, ..cfg.eval.clone() };
    let results = par_map(&cfg.p_grid, cfg.eval.jobs, |_, &p| {
        let mut model = build_zoo(cfg.arch, &train.spec(), NormKind::RobustNorm, p, cfg.tau, cfg.train.seed)?;
        let history = fit(&mut model, train, &cfg.train, |_, _| Ok(()))?;
        let target = EvalTarget::default_for(&model);
        let r = evaluate(target, val, Some(&cfg.attack), &inner)?;
        let final_loss = history.last().map_or(f64::NAN, |m| m.loss);
        let row = ReportRow {
            attack: cfg.attack.family.to_string(),
            eps: cfg.attack.eps,
            batch_size: cfg.eval.batch_size,
            clean_acc: r.clean_acc,
            adv_acc: r.adv_acc,
            extra: vec![("final_train_loss".into(), final_loss.to_string())],
            ..ReportRow::for_target(&target)
        };
        let curve = history.into_iter().map(|metrics| CurvePoint { p, metrics }).collect::<Vec<_>>();
        Ok((row, curve))
    })?;
    let mut rows = Vec::new();
    let mut curves = Vec::new();
    for (row, curve) in results {
        rows.push(row);
        curves.extend(curve);
    }
    Ok((ExperimentReport { rows }, curves))
}

/// Clean accuracy of each target at every inference batch size.
pub fn run_small_batch(
    targets: &[EvalTarget<'_>],
    val: &Dataset,
    batch_sizes: &[usize],
    jobs: usize,
) -> Result<ExperimentReport> {
    let mut cells = Vec::new();
    for target in targets {
        for &bs in batch_sizes {
            cells.push((*target, bs));
        }
    }
    let rows = par_map(&cells, jobs, |_, &(target, bs)| {
        let pred = predictions(target, val, bs)?;
        let acc = percent(count_correct(&pred, &val.labels), val.len());
        Ok(ReportRow {
            batch_size: bs,
            clean_acc: acc,
            adv_acc: acc,
            ..ReportRow::for_target(&target)
        })
    })?;
    Ok(ExperimentReport { rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attacks::AttackFamily;
    use crate::data::synth_blobs;

    #[test]
    fn gain_examples() {
        match gain(23.1, 46.7) {
            Gain::Finite(v) => assert!((v - 102.164).abs() < 1e-2, "{v}"),
            Gain::Infinite => panic!(),
        }
        assert_eq!(gain(50.0, 50.0), Gain::Finite(0.0));
        assert_eq!(gain(0.0, 10.0).to_string(), "inf");
    }

    #[test]
    fn par_map_preserves_order() {
        let items: Vec<usize> = (0..37).collect();
        let a = par_map(&items, 4, |i, &v| Ok(i * 100 + v)).unwrap();
        let b = par_map(&items, 1, |i, &v| Ok(i * 100 + v)).unwrap();
        assert_eq!(a, b);
        let err = par_map(&items, 3, |_, &v| if v == 5 { Err(Error::BackwardTwice) } else { Ok(v) });
        assert!(err.is_err());
    }

    fn setup() -> (Model, Dataset) {
        let d = synth_blobs(3, 12, [1, 4, 4], 2).unwrap();
        let mut m = build_zoo(Arch::CnnSmall, &d.spec(), NormKind::BatchNorm, 0.2, 0.1, 3).unwrap();
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 8,
            lr: 0.05,
            schedule: Vec::new(),
            ..TrainConfig::default()
        };
        fit(&mut m, &d, &cfg, |_, _| Ok(())).unwrap();
        (m, d)
    }

    #[test]
    fn zero_eps_statswap_rows_equal_clean() {
        let (m, d) = setup();
        let atk = AttackConfig::new(AttackFamily::Pgd, 0.0);
        let opts = EvalOptions {
            batch_size: 8,
            ..EvalOptions::default()
        };
        let rep = run_statswap(&m, &d, &[atk], &opts).unwrap();
        assert_eq!(rep.rows.len(), 2);
        for r in &rep.rows {
            assert_eq!(r.clean_acc, r.adv_acc);
        }
        let g = gain_metric(&rep).unwrap();
        assert_eq!(g.len(), 1);
    }

    #[test]
    fn statswap_requires_batchnorm() {
        let d = synth_blobs(2, 4, [1, 4, 4], 0).unwrap();
        let m = build_zoo(Arch::CnnSmall, &d.spec(), NormKind::RobustNorm, 0.2, 0.1, 0).unwrap();
        assert!(run_statswap(&m, &d, &[AttackConfig::default()], &EvalOptions::default()).is_err());
    }

    #[test]
    fn report_csv_round_trip() {
        let (m, d) = setup();
        let targets = [EvalTarget::new(&m, StatsMode::Population)];
        let rep = run_eps_sweep(
            &targets,
            &[AttackConfig::new(AttackFamily::Fgsm, 0.0)],
            &[0.0, 0.1],
            &EvalOptions::default(),
            &d,
        )
        .unwrap();
        let text = rep.to_csv().unwrap();
        assert!(text.starts_with("schema_version,dataset,arch,norm,p,stats_mode,attack,eps,batch_size,seed,clean_acc,adv_acc\n"));
        assert_eq!(ExperimentReport::from_csv(&text).unwrap(), rep);
        assert_eq!(rep.rows[0].clean_acc, rep.rows[0].adv_acc);
    }

    #[test]
    fn zero_eps_stat_diff_equals_clean() {
        let (m, d) = setup();
        let clean = stat_diff_report(&m, &d, None, 8).unwrap();
        let atk = AttackConfig::new(AttackFamily::Pgd, 0.0);
        let zero = stat_diff_report(&m, &d, Some(&atk), 8).unwrap();
        assert_eq!(clean, zero);
        assert_eq!(clean.len(), 5 * (16 + 32));
        let s = summarize_stat_diff(&clean);
        assert!((0.5..=1.0).contains(&s.sign_agreement));
    }

    #[test]
    fn mean_over_seeds_averages() {
        let row = |seed, acc| ReportRow {
            dataset: "d".into(),
            arch: "a".into(),
            norm: "batchnorm".into(),
            p: 0.0,
            stats_mode: "P".into(),
            attack: "pgd".into(),
            eps: 0.1,
            batch_size: 128,
            seed: Some(seed),
            clean_acc: acc,
            adv_acc: acc / 2.0,
            extra: Vec::new(),
        };
        let rep = ExperimentReport {
            rows: vec![row(0, 90.0), row(1, 94.0)],
        };
        let m = rep.mean_over_seeds();
        assert_eq!(m.rows.len(), 1);
        assert_eq!((m.rows[0].clean_acc, m.rows[0].adv_acc, m.rows[0].seed), (92.0, 46.0, None));
    }

    #[test]
    fn inversions() {
        assert_eq!(count_inversions(&[90.0, 80.0, 80.0, 81.0, 10.0]), 1);
    }
}
