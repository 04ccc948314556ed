use std::fs::File;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use anyhow::{Context, Result};
use rnlab_core::data::{load_idx_split, resolve_data_dir, synth_blobs, Dataset, Split};
use rnlab_core::experiments::{
    evaluate, gain_csv, gain_metric, metrics_csv, run_eps_sweep, run_p_sweep, run_small_batch, run_statswap,
    stat_diff_csv, stat_diff_report, summarize_stat_diff, EvalOptions, EvalTarget, ExperimentReport, PSweepConfig,
    ReportRow,
};
use rnlab_core::nn::{build_zoo, load_checkpoint, save_checkpoint, Model};
use rnlab_core::norm::{NormKind, StatsMode};
use rnlab_core::train::fit;

use crate::config::{Command, RunConfig};

struct Log {
    file: File,
    start: Instant,
}

impl Log {
    fn line(&mut self, msg: impl AsRef<str>) -> Result<()> {
        let msg = format!("[{:>8.1}s] {}", self.start.elapsed().as_secs_f64(), msg.as_ref());
        eprintln!("{msg}");
        writeln!(self.file, "{msg}").context("writing run.log")
    }
}

fn write(dir: &Path, name: &str, text: &str) -> Result<()> {
    let path = dir.join(name);
    std::fs::write(&path, text).with_context(|| format!("writing {}", path.display()))
}

fn write_report(cfg: &RunConfig, log: &mut Log, name: &str, report: &ExperimentReport) -> Result<()> {
    write(&cfg.output_dir, &format!("{name}.csv"), &report.to_csv()?)?;
    if cfg.checkpoints.len() > 1 || cfg.seeds.len() > 1 {
        write(&cfg.output_dir, &format!("{name}_mean.csv"), &report.mean_over_seeds().to_csv()?)?;
    }
    for r in &report.rows {
        log.line(format!(
            "{} {} {} {} eps={} bs={} seed={}: clean {:.2} adv {:.2}",
            r.arch,
            r.norm,
            r.stats_mode,
            r.attack,
            r.eps,
            r.batch_size,
            r.seed.map_or("mean".into(), |s| s.to_string()),
            r.clean_acc,
            r.adv_acc
        ))?;
    }
    Ok(())
}

fn load_split(cfg: &RunConfig, split: Split) -> Result<Dataset> {
    let data = if cfg.dataset == "synth" {
        let s = &cfg.synth;
        let all = synth_blobs(s.classes, s.per_class + s.val_per_class, [1, s.size, s.size], s.seed)?;
        let n_train = s.classes * s.per_class;
        let rows: Vec<usize> = match split {
            Split::Train => (0..n_train).collect(),
            Split::Val => (n_train..all.len()).collect(),
        };
        let mut d = all.select(&rows)?;
        d.split = split;
        d
    } else {
        let dir = cfg.data_dir.clone().unwrap_or_else(|| resolve_data_dir(&cfg.dataset));
        load_idx_split(&dir, &cfg.dataset, split)
            .with_context(|| format!("loading {} {} split from {}", cfg.dataset, split.as_str(), dir.display()))?
    };
    let limit = match split {
        Split::Train => cfg.train_limit,
        Split::Val => cfg.val_limit,
    };
    Ok(match limit {
        Some(n) => data.take(n),
        None => data,
    })
}

fn load_models(cfg: &RunConfig) -> Result<Vec<Model>> {
    cfg.checkpoints
        .iter()
        .map(|p| load_checkpoint(p).with_context(|| format!("loading {}", p.display())))
        .collect()
}

fn eval_options(cfg: &RunConfig) -> EvalOptions {
    EvalOptions {
        batch_size: cfg.eval_batch_size,
        attack_stats: cfg.attack_stats,
        jobs: cfg.jobs,
    }
}

/// Statistics modes compared for one model: the configured mode if any,
/// otherwise both modes for models whose norm layers read batch statistics.
fn paired_targets<'a>(model: &'a Model, cfg: &RunConfig) -> Vec<EvalTarget<'a>> {
    if let Some(s) = cfg.eval_stats {
        return vec![EvalTarget::new(model, s)];
    }
    match model.norm {
        NormKind::BatchNorm | NormKind::RobustNorm | NormKind::RobustNormPopMean => {
            let first = model.norm.default_eval_stats();
            let other = match first {
                StatsMode::Population => StatsMode::Batch,
                StatsMode::Batch => StatsMode::Population,
            };
            vec![EvalTarget::new(model, first), EvalTarget::new(model, other)]
        }
        _ => vec![EvalTarget::default_for(model)],
    }
}

fn default_target<'a>(model: &'a Model, cfg: &RunConfig) -> EvalTarget<'a> {
    match cfg.eval_stats {
        Some(s) => EvalTarget::new(model, s),
        None => EvalTarget::default_for(model),
    }
}

fn clean_row(target: EvalTarget<'_>, val: &Dataset, cfg: &RunConfig) -> Result<ReportRow> {
    let r = evaluate(target, val, None, &eval_options(cfg))?;
    let m = target.model;
    Ok(ReportRow {
        dataset: m.dataset.name.clone(),
        arch: m.arch.to_string(),
        norm: target.variant(),
        p: if m.norm.is_robust() { m.p } else { 0.0 },
        stats_mode: target.stats.tag().into(),
        attack: "none".into(),
        eps: 0.0,
        batch_size: cfg.eval_batch_size,
        seed: Some(m.seed),
        clean_acc: r.clean_acc,
        adv_acc: r.adv_acc,
        extra: Vec::new(),
    })
}

fn train(cfg: &RunConfig, log: &mut Log) -> Result<()> {
    let train = load_split(cfg, Split::Train)?;
    let val = load_split(cfg, Split::Val)?;
    log.line(format!("train {} samples, val {} samples", train.len(), val.len()))?;
    let mut model = build_zoo(cfg.arch, &train.spec(), cfg.norm, cfg.p, cfg.tau, cfg.seed)?;
    model.set_norm_eps(cfg.norm_eps)?;
    let history = fit(&mut model, &train, &cfg.train, |_, m| {
        log.line(format!(
            "epoch {} lr {} loss {:.6} acc {:.4}",
            m.epoch, m.lr, m.loss, m.accuracy
        ))
        .map_err(|e| rnlab_core::Error::InvalidParameter(e.to_string()))
    })?;
    save_checkpoint(&model, cfg.output_dir.join("model.rnl"))?;
    write(&cfg.output_dir, "metrics.csv", &metrics_csv(&history)?)?;
    let rows = paired_targets(&model, cfg)
        .into_iter()
        .map(|t| clean_row(t, &val, cfg))
        .collect::<Result<Vec<_>>>()?;
    write_report(cfg, log, "eval", &ExperimentReport { rows })
}

fn eval(cfg: &RunConfig, log: &mut Log) -> Result<()> {
    let val = load_split(cfg, Split::Val)?;
    let models = load_models(cfg)?;
    let mut rows = Vec::new();
    for m in &models {
        for stats in [StatsMode::Population, StatsMode::Batch] {
            rows.push(clean_row(EvalTarget::new(m, stats), &val, cfg)?);
        }
    }
    write_report(cfg, log, "eval", &ExperimentReport { rows })
}

fn attack(cfg: &RunConfig, log: &mut Log) -> Result<()> {
    let val = load_split(cfg, Split::Val)?;
    let models = load_models(cfg)?;
    let targets: Vec<EvalTarget<'_>> = models.iter().map(|m| default_target(m, cfg)).collect();
    let grid: Vec<f64> = cfg.attacks.iter().map(|a| a.eps).take(1).collect();
    let report = run_eps_sweep(&targets, &cfg.attacks, &grid, &eval_options(cfg), &val)?;
    write_report(cfg, log, "attack", &report)
}

fn statswap(cfg: &RunConfig, log: &mut Log) -> Result<()> {
    let val = load_split(cfg, Split::Val)?;
    let models = load_models(cfg)?;
    let mut rows = Vec::new();
    for m in &models {
        rows.extend(run_statswap(m, &val, &cfg.attacks, &eval_options(cfg))?.rows);
    }
    let report = ExperimentReport { rows };
    write_report(cfg, log, "statswap", &report)?;
    let gains = gain_metric(&report)?;
    for g in &gains {
        log.line(format!("gain {} {} eps={}: P {:.2} B {:.2} gain {}%", g.norm, g.attack, g.eps, g.acc_p, g.acc_b, g.gain))?;
    }
    write(&cfg.output_dir, "gain.csv", &gain_csv(&gains)?)?;
    if models.len() > 1 {
        write(&cfg.output_dir, "gain_mean.csv", &gain_csv(&gain_metric(&report.mean_over_seeds())?)?)?;
    }
    Ok(())
}

fn statdiff(cfg: &RunConfig, log: &mut Log) -> Result<()> {
    let val = load_split(cfg, Split::Val)?;
    let models = load_models(cfg)?;
    let model = &models[0];
    let clean = stat_diff_report(model, &val, None, cfg.eval_batch_size)?;
    let attacked = stat_diff_report(model, &val, Some(&cfg.attacks[0]), cfg.eval_batch_size)?;
    write(&cfg.output_dir, "statdiff_clean.csv", &stat_diff_csv(&clean)?)?;
    write(&cfg.output_dir, "statdiff.csv", &stat_diff_csv(&attacked)?)?;
    for (label, rows) in [("clean", &clean), ("attacked", &attacked)] {
        let s = summarize_stat_diff(rows);
        log.line(format!(
            "{label}: median |d_mean| {:.6} median |d_var| {:.6} sign agreement {:.4}",
            s.median_abs_d_mean, s.median_abs_d_var, s.sign_agreement
        ))?;
    }
    Ok(())
}

fn sweep_eps(cfg: &RunConfig, log: &mut Log) -> Result<()> {
    let val = load_split(cfg, Split::Val)?;
    let models = load_models(cfg)?;
    let targets: Vec<EvalTarget<'_>> = models.iter().flat_map(|m| paired_targets(m, cfg)).collect();
    let report = run_eps_sweep(&targets, &cfg.attacks, &cfg.eps_grid, &eval_options(cfg), &val)?;
    write_report(cfg, log, "sweep_eps", &report)
}

fn sweep_p(cfg: &RunConfig, log: &mut Log) -> Result<()> {
    let train = load_split(cfg, Split::Train)?;
    let val = load_split(cfg, Split::Val)?;
    let mut rows = Vec::new();
    let mut curves = Vec::new();
    for &seed in &cfg.seeds {
        let sweep = PSweepConfig {
            arch: cfg.arch,
            p_grid: cfg.p_grid.clone(),
            tau: cfg.tau,
            train: rnlab_core::train::TrainConfig {
                seed,
                ..cfg.train.clone()
            },
            attack: cfg.attacks[0].clone(),
            eval: eval_options(cfg),
        };
        let (report, c) = run_p_sweep(&train, &val, &sweep)?;
        rows.extend(report.rows);
        curves.extend(c);
    }
    write_report(cfg, log, "sweep_p", &ExperimentReport { rows })?;
    write(&cfg.output_dir, "curves.csv", &rnlab_core::experiments::curves_csv(&curves)?)
}

fn small_batch(cfg: &RunConfig, log: &mut Log) -> Result<()> {
    let val = load_split(cfg, Split::Val)?;
    let models = load_models(cfg)?;
    let targets: Vec<EvalTarget<'_>> = models.iter().flat_map(|m| paired_targets(m, cfg)).collect();
    let report = run_small_batch(&targets, &val, &cfg.batch_sizes, cfg.jobs)?;
    write_report(cfg, log, "small_batch", &report)
}

pub fn run(name: &str, cfg: &RunConfig) -> Result<()> {
    std::fs::create_dir_all(&cfg.output_dir)
        .with_context(|| format!("creating {}", cfg.output_dir.display()))?;
    write(&cfg.output_dir, "config.resolved", &cfg.echo(name))?;
    let file = File::create(cfg.output_dir.join("run.log")).context("creating run.log")?;
    let mut log = Log {
        file,
        start: Instant::now(),
    };
    log.line(format!("rnlab {name} -> {}", cfg.output_dir.display()))?;
    match cfg.command {
        Command::Train => train(cfg, &mut log),
        Command::Eval => eval(cfg, &mut log),
        Command::Attack => attack(cfg, &mut log),
        Command::Statswap => statswap(cfg, &mut log),
        Command::Statdiff => statdiff(cfg, &mut log),
        Command::SweepEps => sweep_eps(cfg, &mut log),
        Command::SweepP => sweep_p(cfg, &mut log),
        Command::SmallBatch => small_batch(cfg, &mut log),
    }?;
    log.line("done")
}
