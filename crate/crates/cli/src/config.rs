//! Flat `key=value` run configuration.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rnlab_core::attacks::{AttackConfig, AttackFamily};
use rnlab_core::experiments::default_eps;
use rnlab_core::nn::Arch;
use rnlab_core::norm::{NormKind, StatsMode};
use rnlab_core::train::{desk_schedule, AdvMix, TrainConfig};

/// Every recognised key with its default and help text.
pub const KEYS: &[(&str, &str, &str)] = &[
    ("dataset", "mnist", "mnist, fashion-mnist or synth"),
    ("data_dir", "", "directory holding the IDX files; empty uses RNLAB_DATA_DIR or data/<dataset>"),
    ("train_limit", "0", "use only the first N training samples (0 = all)"),
    ("val_limit", "0", "use only the first N validation samples (0 = all)"),
    ("synth_classes", "4", "classes of the synthetic dataset"),
    ("synth_per_class", "250", "training samples per synthetic class"),
    ("synth_val_per_class", "50", "validation samples per synthetic class"),
    ("synth_size", "8", "side length of synthetic images"),
    ("data_seed", "0", "seed of the synthetic dataset"),
    ("arch", "cnn-small", "cnn-small or mlp-2x256"),
    ("norm", "batchnorm", "batchnorm, robustnorm, robustnorm-popmean, layernorm or identity"),
    ("p", "0.2", "RobustNorm power"),
    ("tau", "0.1", "tracking rate of population statistics"),
    ("norm_eps", "1e-5", "normalization stabiliser"),
    ("seed", "0", "initialisation and shuffling seed"),
    ("seeds", "", "comma-separated seeds for sweep-p; empty uses seed"),
    ("lr", "0.1", "base learning rate"),
    ("momentum", "0.9", "SGD momentum"),
    ("epochs", "30", "training epochs"),
    ("batch_size", "128", "training batch size"),
    ("schedule", "desk", "desk, none, or epoch:multiplier pairs such as 15:0.1,22:0.1"),
    ("adversarial", "false", "train on PGD examples"),
    ("adv_mix", "minmax", "minmax (adversarial only) or mixed (clean plus adversarial)"),
    ("adv_eps", "auto", "training attack budget; auto uses the dataset default"),
    ("adv_steps", "10", "PGD steps of the training attack"),
    ("adv_alpha", "auto", "PGD step size of the training attack; auto is adv_eps/4"),
    ("attack", "pgd", "comma-separated attack families: fgsm, bim, pgd, mim, cw"),
    ("eps", "auto", "attack budget; auto uses the dataset default"),
    ("alpha", "auto", "iterative step size; auto is eps/4"),
    ("steps", "10", "iterations of bim, pgd and mim"),
    ("decay", "1.0", "MIM momentum decay"),
    ("c", "10", "CW trade-off constant"),
    ("confidence", "0", "CW confidence margin"),
    ("cw_lr", "0.01", "CW step size"),
    ("cw_steps", "100", "CW iterations"),
    ("random_start", "false", "PGD uniform random start"),
    ("attack_seed", "0", "seed of attack randomness"),
    ("eval_stats", "auto", "population, batch, or auto (batch for robustnorm, population otherwise)"),
    ("attack_stats", "eval", "statistics used to generate attacks: eval, population or batch"),
    ("eval_batch_size", "128", "evaluation batch size"),
    ("checkpoint", "", "comma-separated checkpoint paths"),
    ("eps_grid", "0,0.05,0.1,0.15,0.2,0.25,0.3", "budgets of sweep-eps"),
    ("p_grid", "0.05,0.1,0.2,0.5,1", "powers of sweep-p"),
    ("batch_sizes", "1,2,4,8,16,32,64,128", "evaluation batch sizes of small-batch"),
    ("output_dir", "out", "directory receiving every output"),
    ("jobs", "1", "worker threads for independent cells"),
];

pub const COMMANDS: &[(&str, &str)] = &[
    ("train", "train a model and write model.rnl plus metrics.csv"),
    ("eval", "clean accuracy with population and batch statistics"),
    ("attack", "clean and adversarial accuracy"),
    ("statswap", "adversarial accuracy of a BatchNorm model with P and B statistics"),
    ("statdiff", "per-channel batch versus population statistic differences"),
    ("sweep-eps", "accuracy against a grid of budgets"),
    ("sweep-p", "train RobustNorm models over a grid of powers"),
    ("small-batch", "clean accuracy across evaluation batch sizes"),
];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

type Result<T> = std::result::Result<T, ConfigError>;

fn err<T>(msg: impl Into<String>) -> Result<T> {
    Err(ConfigError(msg.into()))
}

fn is_key(key: &str) -> bool {
    KEYS.iter().any(|(k, _, _)| *k == key)
}

/// Parses `key=value` lines; blank lines and `#` comments are skipped.
pub fn parse_config_text(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return err(format!("line {}: expected key=value, got {line:?}", i + 1));
        };
        let k = k.trim();
        if !is_key(k) {
            return err(format!("unknown key: {k}"));
        }
        if out.insert(k.to_string(), v.trim().to_string()).is_some() {
            return err(format!("duplicate key: {k}"));
        }
    }
    Ok(out)
}

pub fn read_config_file(path: &Path) -> Result<BTreeMap<String, String>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| ConfigError(format!("cannot read config {}: {e}", path.display())))?;
    parse_config_text(&text)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Train,
    Eval,
    Attack,
    Statswap,
    Statdiff,
    SweepEps,
    SweepP,
    SmallBatch,
}

impl FromStr for Command {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "train" => Command::Train,
            "eval" => Command::Eval,
            "attack" => Command::Attack,
            "statswap" => Command::Statswap,
            "statdiff" => Command::Statdiff,
            "sweep-eps" => Command::SweepEps,
            "sweep-p" => Command::SweepP,
            "small-batch" => Command::SmallBatch,
            other => return err(format!("unknown command: {other}")),
        })
    }
}

impl Command {
    fn needs_checkpoint(self) -> bool {
        !matches!(self, Command::Train | Command::SweepP)
    }
}

/// Source of the synthetic dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub classes: usize,
    pub per_class: usize,
    pub val_per_class: usize,
    pub size: usize,
    pub seed: u64,
}

/// A fully validated run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub command: Command,
    pub dataset: String,
    pub data_dir: Option<PathBuf>,
    pub train_limit: Option<usize>,
    pub val_limit: Option<usize>,
    pub synth: SynthSpec,
    pub arch: Arch,
    pub norm: NormKind,
    pub p: f64,
    pub tau: f64,
    pub norm_eps: f64,
    pub seed: u64,
    pub seeds: Vec<u64>,
    pub train: TrainConfig,
    /// One config per requested family, sharing every other field.
    pub attacks: Vec<AttackConfig>,
    pub eval_stats: Option<StatsMode>,
    pub attack_stats: Option<StatsMode>,
    pub eval_batch_size: usize,
    pub checkpoints: Vec<PathBuf>,
    pub eps_grid: Vec<f64>,
    pub p_grid: Vec<f64>,
    pub batch_sizes: Vec<usize>,
    pub output_dir: PathBuf,
    pub jobs: usize,
    /// Every key with its resolved value.
    pub resolved: BTreeMap<String, String>,
}

struct Values<'a>(&'a BTreeMap<String, String>);

impl Values<'_> {
    fn raw(&self, key: &str) -> &str {
        self.0.get(key).map(String::as_str).unwrap_or("")
    }

    fn get<T: FromStr>(&self, key: &str) -> Result<T> {
        let v = self.raw(key);
        v.parse()
            .map_err(|_| ConfigError(format!("invalid value for {key}: {v:?}")))
    }

    fn named<T: FromStr>(&self, key: &str) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        let v = self.raw(key);
        v.parse().map_err(|e| ConfigError(format!("invalid value for {key}: {e}")))
    }

    fn bool(&self, key: &str) -> Result<bool> {
        match self.raw(key) {
            "true" | "1" | "yes" => Ok(true),
            "false" | "0" | "no" => Ok(false),
            v => err(format!("invalid value for {key}: {v:?} (expected true or false)")),
        }
    }

    fn list<T: FromStr>(&self, key: &str) -> Result<Vec<T>> {
        let v = self.raw(key);
        if v.is_empty() {
            return Ok(Vec::new());
        }
        v.split(',')
            .map(|s| {
                s.trim()
                    .parse()
                    .map_err(|_| ConfigError(format!("invalid value for {key}: {s:?}")))
            })
            .collect()
    }

    fn limit(&self, key: &str) -> Result<Option<usize>> {
        let n: usize = self.get(key)?;
        Ok((n > 0).then_some(n))
    }

    fn auto_f64(&self, key: &str) -> Result<Option<f64>> {
        match self.raw(key) {
            "auto" => Ok(None),
            _ => self.get(key).map(Some),
        }
    }

    fn positive(&self, key: &str) -> Result<usize> {
        let n: usize = self.get(key)?;
        if n == 0 {
            return err(format!("invalid value for {key}: must be at least 1"));
        }
        Ok(n)
    }
}

fn parse_schedule(v: &str, epochs: usize) -> Result<Vec<(usize, f64)>> {
    match v {
        "desk" => Ok(desk_schedule(epochs)),
        "none" | "" => Ok(Vec::new()),
        _ => v
            .split(',')
            .map(|pair| {
                let (e, m) = pair
                    .split_once(':')
                    .ok_or_else(|| ConfigError(format!("invalid value for schedule: {pair:?}")))?;
                let e = e.trim().parse().map_err(|_| ConfigError(format!("invalid value for schedule: {pair:?}")))?;
                let m = m.trim().parse().map_err(|_| ConfigError(format!("invalid value for schedule: {pair:?}")))?;
                Ok((e, m))
            })
            .collect(),
    }
}

impl RunConfig {
    /// Merges defaults, file values and flag values (later wins), then
    /// validates everything.
    pub fn resolve(
        command: Command,
        file: &BTreeMap<String, String>,
        flags: &BTreeMap<String, String>,
    ) -> Result<RunConfig> {
        let mut map: BTreeMap<String, String> =
            KEYS.iter().map(|(k, d, _)| (k.to_string(), d.to_string())).collect();
        for (k, v) in file.iter().chain(flags) {
            if !is_key(k) {
                return err(format!("unknown key: {k}"));
            }
            map.insert(k.clone(), v.clone());
        }
        let dataset = map["dataset"].clone();
        if !matches!(dataset.as_str(), "mnist" | "fashion-mnist" | "synth") {
            return err(format!("invalid value for dataset: {dataset:?}"));
        }
        for key in ["eps", "adv_eps"] {
            if map[key] == "auto" {
                map.insert(key.into(), default_eps(&dataset).to_string());
            }
        }
        let v = Values(&map);

        let epochs: usize = v.get("epochs")?;
        let adv_eps: f64 = v.get("adv_eps")?;
        let adv_attack = AttackConfig {
            steps: v.positive("adv_steps")?,
            alpha: v.auto_f64("adv_alpha")?,
            seed: v.get("attack_seed")?,
            ..rnlab_core::train::default_adv_attack(adv_eps)
        };
        let train = TrainConfig {
            lr: v.get("lr")?,
            momentum: v.get("momentum")?,
            schedule: parse_schedule(v.raw("schedule"), epochs)?,
            epochs,
            batch_size: v.positive("batch_size")?,
            seed: v.get("seed")?,
            adversarial: v.bool("adversarial")?,
            adv_attack,
            adv_mix: v.named::<AdvMix>("adv_mix")?,
        };
        train.validate().map_err(|e| ConfigError(e.to_string()))?;

        let families: Vec<AttackFamily> = v
            .raw("attack")
            .split(',')
            .map(|s| {
                s.trim()
                    .parse()
                    .map_err(|e: rnlab_core::Error| ConfigError(format!("invalid value for attack: {e}")))
            })
            .collect::<Result<_>>()?;
        let base = AttackConfig {
            eps: v.get("eps")?,
            alpha: v.auto_f64("alpha")?,
            steps: v.positive("steps")?,
            decay: v.get("decay")?,
            c: v.get("c")?,
            confidence: v.get("confidence")?,
            cw_lr: v.get("cw_lr")?,
            cw_steps: v.positive("cw_steps")?,
            random_start: v.bool("random_start")?,
            seed: v.get("attack_seed")?,
            ..AttackConfig::default()
        };
        base.validate().map_err(|e| ConfigError(e.to_string()))?;
        let attacks = families
            .into_iter()
            .map(|family| AttackConfig { family, ..base.clone() })
            .collect();

        let eval_stats = match v.raw("eval_stats") {
            "auto" => None,
            _ => Some(v.named::<StatsMode>("eval_stats")?),
        };
        let attack_stats = match v.raw("attack_stats") {
            "eval" => None,
            _ => Some(v.named::<StatsMode>("attack_stats")?),
        };

        let checkpoints: Vec<PathBuf> = v
            .raw("checkpoint")
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(PathBuf::from)
            .collect();
        if command.needs_checkpoint() {
            if checkpoints.is_empty() {
                return err("missing required key: checkpoint");
            }
            if let Some(p) = checkpoints.iter().find(|p| !p.is_file()) {
                return err(format!("checkpoint not found: {}", p.display()));
            }
        }
        if command == Command::Statdiff && checkpoints.len() != 1 {
            return err("statdiff takes exactly one checkpoint");
        }

        let eps_grid: Vec<f64> = v.list("eps_grid")?;
        if eps_grid.is_empty() || eps_grid.windows(2).any(|w| w[0] > w[1]) || eps_grid.iter().any(|&e| !(e >= 0.0)) {
            return err("invalid value for eps_grid: must be non-empty, ascending and >= 0");
        }
        let p_grid: Vec<f64> = v.list("p_grid")?;
        if p_grid.is_empty() || p_grid.iter().any(|&p| !(p > 0.0 && p <= 1.0)) {
            return err("invalid value for p_grid: values must lie in (0, 1]");
        }
        let batch_sizes: Vec<usize> = v.list("batch_sizes")?;
        if batch_sizes.is_empty() || batch_sizes.contains(&0) {
            return err("invalid value for batch_sizes: values must be at least 1");
        }
        let p: f64 = v.get("p")?;
        if !(p > 0.0 && p <= 1.0) {
            return err("invalid value for p: must lie in (0, 1]");
        }
        let tau: f64 = v.get("tau")?;
        if !(tau > 0.0 && tau <= 1.0) {
            return err("invalid value for tau: must lie in (0, 1]");
        }
        let norm_eps: f64 = v.get("norm_eps")?;
        if !(norm_eps >= 0.0 && norm_eps.is_finite()) {
            return err("invalid value for norm_eps: must be >= 0");
        }
        let seed: u64 = v.get("seed")?;
        let mut seeds: Vec<u64> = v.list("seeds")?;
        if seeds.is_empty() {
            seeds.push(seed);
        }
        let output_dir = PathBuf::from(v.raw("output_dir"));
        if output_dir.as_os_str().is_empty() {
            return err("missing required key: output_dir");
        }

        Ok(RunConfig {
            command,
            data_dir: match v.raw("data_dir") {
                "" => None,
                d => Some(PathBuf::from(d)),
            },
            train_limit: v.limit("train_limit")?,
            val_limit: v.limit("val_limit")?,
            synth: SynthSpec {
                classes: v.get("synth_classes")?,
                per_class: v.positive("synth_per_class")?,
                val_per_class: v.positive("synth_val_per_class")?,
                size: v.get("synth_size")?,
                seed: v.get("data_seed")?,
            },
            arch: v.named("arch")?,
            norm: v.named("norm")?,
            p,
            tau,
            norm_eps,
            seed,
            seeds,
            train,
            attacks,
            eval_stats,
            attack_stats,
            eval_batch_size: v.positive("eval_batch_size")?,
            checkpoints,
            eps_grid,
            p_grid,
            batch_sizes,
            output_dir,
            jobs: v.positive("jobs")?,
            dataset,
            resolved: map,
        })
    }

    /// The resolved configuration as `key=value` lines in key order.
    pub fn echo(&self, command: &str) -> String {
        let mut out = format!("# rnlab {command}\n");
        for (k, v) in &self.resolved {
            let _ = writeln!(out, "{k}={v}");
        }
        out
    }
}
