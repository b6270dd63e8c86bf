//! Experiment config files.
//!
//! One `section.key = value` assignment per line; `#` starts a comment. Every
//! key must be known (the `reward` section is the exception: keys other than
//! `reward.name` are handed to the reward registry, which rejects unknown
//! parameters itself). Missing keys take the defaults below.
//!
//! | key | default |
//! |-----|---------|
//! | `task.kind` | `mixture` (`mixture` or `dirac`) |
//! | `task.means` | `-2,0;2,0` |
//! | `task.stds` | `0.5` (one value is broadcast to every mode) |
//! | `task.weights` | `1` |
//! | `task.target` | `0,0` (dirac only) |
//! | `reward.name` | `mixture_logdensity` |
//! | `model.hidden` | `32,32` |
//! | `pretrain.*` | `max_steps`, `batch_size`, `lr`, `lr_final`, `patience`, `rel_tol`, `seed` |
//! | `cem.*` | `candidates`, `iterations`, `elite_fraction`, `sigma_floor`, `return_mode`, `variance_center` |
//! | `grpo.*` | every [`GrpoConfig`] field by name |
//! | `experiment.name` | `default` |
//! | `experiment.modes` | `flow_grpo,smart_grpo` |
//! | `experiment.seeds` | `0` |
//! | `experiment.one_shot_candidates` / `one_shot_keep` | `25` / `12` |
//! | `experiment.sensitivity_iterations` | `1,3,5` |
//! | `experiment.stability_fraction` | `0.2` |
//! | `decode.t_grid` | `0.1,0.2,...,1.0` |
//! | `decode.dt` | `-0.05` |
//! | `decode.candidates` | `100` |
//! | `decode.full_steps` | `40` |

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use flowcem::flow::pretrain::PretrainConfig;
use flowcem::vector::{parse_scalar_list, parse_vector_list};
use flowcem::{CemConfig, DataTask, GaussianMixture, GrpoConfig, NoiseSource, ReturnMode, VarianceCenter, Vector};
use sha2::{Digest, Sha256};

use crate::error::{CliError, Result};

/// Noise policy of a training cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Mode {
    FlowGrpo,
    SmartGrpo,
    OneShot,
    RandomUpdate,
}

impl Mode {
    pub const ALL: [Mode; 4] = [Mode::FlowGrpo, Mode::SmartGrpo, Mode::OneShot, Mode::RandomUpdate];

    pub fn name(self) -> &'static str {
        match self {
            Mode::FlowGrpo => "flow_grpo",
            Mode::SmartGrpo => "smart_grpo",
            Mode::OneShot => "one_shot",
            Mode::RandomUpdate => "random_update",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mode {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Mode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| format!("unknown mode '{s}' (expected one of {})", Mode::ALL.map(Mode::name).join(", ")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecodeConfig {
    pub t_grid: Vec<f64>,
    pub dt: f64,
    pub candidates: usize,
    /// Euler steps a full decode would take over `[0, 1]`; a continuation from
    /// `t` uses `ceil(full_steps * t)` of them.
    pub full_steps: usize,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self { t_grid: (1..=10).map(|i| i as f64 / 10.0).collect(), dt: -0.05, candidates: 100, full_steps: 40 }
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub name: String,
    pub task: DataTask,
    pub reward_name: String,
    pub reward_params: BTreeMap<String, String>,
    pub pretrain: PretrainConfig,
    pub pretrain_seed: u64,
    pub cem: CemConfig,
    pub grpo: GrpoConfig,
    pub modes: Vec<Mode>,
    pub seeds: Vec<u64>,
    pub one_shot_candidates: usize,
    pub one_shot_keep: usize,
    pub sensitivity_iterations: Vec<usize>,
    pub stability_fraction: f64,
    pub decode: DecodeConfig,
    /// Hex SHA-256 of the config text.
    pub hash: String,
}

impl ExperimentConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            CliError::ConfigLine { line, msg, .. } => {
                CliError::ConfigLine { file: path.display().to_string(), line, msg }
            }
            other => other,
        })
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = Entries::parse(text)?;
        let hash = config_hash(text.as_bytes());

        let task = match entries.take_or("task.kind", "mixture".to_string())?.as_str() {
            "mixture" => {
                let means = entries.take_with("task.means", "-2,0;2,0", parse_vector_list)?;
                let n = means.len();
                let stds = entries.take_with("task.stds", "0.5", |s| broadcast(s, n))?;
                let weights = entries.take_with("task.weights", "1", |s| broadcast(s, n))?;
                DataTask::Mixture(GaussianMixture::new(means, stds, weights).map_err(CliError::config)?)
            }
            "dirac" => DataTask::Dirac(entries.take_with("task.target", "0,0", |s| s.parse::<Vector>())?),
            other => return Err(CliError::Config(format!("task.kind must be 'mixture' or 'dirac', got '{other}'"))),
        };
        if let DataTask::Dirac(_) = task {
            for key in ["task.means", "task.stds", "task.weights"] {
                if entries.contains(key) {
                    return Err(entries.error(key, "only valid with task.kind = mixture"));
                }
            }
        } else if entries.contains("task.target") {
            return Err(entries.error("task.target", "only valid with task.kind = dirac"));
        }

        let reward_name = entries.take_or("reward.name", "mixture_logdensity".to_string())?;
        let reward_params = entries.drain_prefix("reward.");

        let pd = PretrainConfig::default();
        let pretrain = PretrainConfig {
            hidden: entries.take_with("model.hidden", "32,32", parse_usize_list)?,
            max_steps: entries.take_or("pretrain.max_steps", pd.max_steps)?,
            batch_size: entries.take_or("pretrain.batch_size", pd.batch_size)?,
            lr: entries.take_or("pretrain.lr", pd.lr)?,
            lr_final: entries.take_or("pretrain.lr_final", pd.lr_final)?,
            patience: entries.take_or("pretrain.patience", pd.patience)?,
            rel_tol: entries.take_or("pretrain.rel_tol", pd.rel_tol)?,
        };
        let pretrain_seed = entries.take_or("pretrain.seed", 0u64)?;

        let cd = CemConfig::default();
        let cem = CemConfig {
            candidates: entries.take_or("cem.candidates", cd.candidates)?,
            iterations: entries.take_or("cem.iterations", cd.iterations)?,
            elite_fraction: entries.take_or("cem.elite_fraction", cd.elite_fraction)?,
            sigma_floor: entries.take_or("cem.sigma_floor", cd.sigma_floor)?,
            return_mode: entries.take_with("cem.return_mode", "mean", |s| match s {
                "mean" => Ok(ReturnMode::Mean),
                "sample" => Ok(ReturnMode::Sample),
                other => Err(format!("expected 'mean' or 'sample', got '{other}'")),
            })?,
            variance_center: entries.take_with("cem.variance_center", "sampling_mean", |s| match s {
                "sampling_mean" => Ok(VarianceCenter::SamplingMean),
                "elite_mean" => Ok(VarianceCenter::EliteMean),
                other => Err(format!("expected 'sampling_mean' or 'elite_mean', got '{other}'")),
            })?,
            seed: cd.seed,
        };
        cem.validate().map_err(CliError::config)?;

        let gd = GrpoConfig::default();
        let grpo = GrpoConfig {
            group_size: entries.take_or("grpo.group_size", gd.group_size)?,
            clip_eps: entries.take_or("grpo.clip_eps", gd.clip_eps)?,
            kl_beta: entries.take_or("grpo.kl_beta", gd.kl_beta)?,
            lr: entries.take_or("grpo.lr", gd.lr)?,
            train_steps: entries.take_or("grpo.train_steps", gd.train_steps)?,
            eval_steps: entries.take_or("grpo.eval_steps", gd.eval_steps)?,
            timestep_fraction: entries.take_or("grpo.timestep_fraction", gd.timestep_fraction)?,
            smart_t_threshold: entries.take_or("grpo.smart_t_threshold", gd.smart_t_threshold)?,
            ema_decay: entries.take_or("grpo.ema_decay", gd.ema_decay)?,
            epochs: entries.take_or("grpo.epochs", gd.epochs)?,
            seed: gd.seed,
            noise_level: entries.take_or("grpo.noise_level", gd.noise_level)?,
            groups_per_epoch: entries.take_or("grpo.groups_per_epoch", gd.groups_per_epoch)?,
            updates_per_epoch: entries.take_or("grpo.updates_per_epoch", gd.updates_per_epoch)?,
            eval_interval: entries.take_or("grpo.eval_interval", gd.eval_interval)?,
            eval_samples: entries.take_or("grpo.eval_samples", gd.eval_samples)?,
            divergence_margin: entries.take_or("grpo.divergence_margin", gd.divergence_margin)?,
            divergence_patience: entries.take_or("grpo.divergence_patience", gd.divergence_patience)?,
            record_wall_time: entries.take_or("grpo.record_wall_time", gd.record_wall_time)?,
        };
        grpo.validate().map_err(CliError::config)?;

        let name = entries.take_or("experiment.name", "default".to_string())?;
        if name.is_empty() || name.contains(['/', '\\']) || name == "." || name == ".." {
            return Err(CliError::Config(format!("experiment.name '{name}' must be a plain directory name")));
        }
        let modes = entries.take_with("experiment.modes", "flow_grpo,smart_grpo", |s| {
            s.split(',').map(|m| m.trim().parse::<Mode>()).collect::<std::result::Result<Vec<_>, _>>()
        })?;
        let seeds = entries.take_with("experiment.seeds", "0", |s| {
            s.split(',').map(|x| x.trim().parse::<u64>()).collect::<std::result::Result<Vec<_>, _>>()
        })?;
        if modes.is_empty() || seeds.is_empty() {
            return Err(CliError::Config("experiment needs at least one mode and one seed".into()));
        }
        if has_duplicates(&modes) || has_duplicates(&seeds) {
            return Err(CliError::Config("experiment.modes and experiment.seeds must not repeat".into()));
        }
        let one_shot_candidates = entries.take_or("experiment.one_shot_candidates", 25usize)?;
        let one_shot_keep = entries.take_or("experiment.one_shot_keep", 12usize)?;
        NoiseSource::OneShot { candidates: one_shot_candidates, keep: one_shot_keep }
            .validate()
            .map_err(CliError::config)?;
        let sensitivity_iterations =
            entries.take_with("experiment.sensitivity_iterations", "1,3,5", parse_usize_list)?;
        if sensitivity_iterations.is_empty() || sensitivity_iterations.contains(&0) {
            return Err(CliError::Config("experiment.sensitivity_iterations must be positive".into()));
        }
        let stability_fraction = entries.take_or("experiment.stability_fraction", 0.2)?;
        if !(stability_fraction > 0.0 && stability_fraction <= 1.0) {
            return Err(CliError::Config(format!(
                "experiment.stability_fraction must be in (0, 1], got {stability_fraction}"
            )));
        }

        let dd = DecodeConfig::default();
        let decode = DecodeConfig {
            t_grid: entries.take_with("decode.t_grid", "0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9,1", parse_scalar_list)?,
            dt: entries.take_or("decode.dt", dd.dt)?,
            candidates: entries.take_or("decode.candidates", dd.candidates)?,
            full_steps: entries.take_or("decode.full_steps", dd.full_steps)?,
        };
        if decode.t_grid.is_empty() || decode.t_grid.iter().any(|t| !(*t > 0.0 && *t <= 1.0)) {
            return Err(CliError::Config("decode.t_grid values must lie in (0, 1]".into()));
        }
        if !(decode.dt < 0.0) || decode.candidates < 2 || decode.full_steps == 0 {
            return Err(CliError::Config("decode needs dt < 0, candidates >= 2 and full_steps >= 1".into()));
        }

        entries.finish()?;
        Ok(Self {
            name,
            task,
            reward_name,
            reward_params,
            pretrain,
            pretrain_seed,
            cem,
            grpo,
            modes,
            seeds,
            one_shot_candidates,
            one_shot_keep,
            sensitivity_iterations,
            stability_fraction,
            decode,
            hash,
        })
    }

    /// Replaces every seed list (runs and pretraining) with `seed`.
    pub fn override_seed(&mut self, seed: u64) {
        self.seeds = vec![seed];
        self.pretrain_seed = seed;
    }

    pub fn reward(&self) -> Result<flowcem::RewardFn> {
        flowcem::registry_lookup(&self.reward_name, &self.reward_params).map_err(CliError::config)
    }

    pub fn noise_source(&self, mode: Mode) -> NoiseSource {
        match mode {
            Mode::FlowGrpo => NoiseSource::Gaussian,
            Mode::SmartGrpo => NoiseSource::Search(self.cem.clone()),
            Mode::OneShot => NoiseSource::OneShot { candidates: self.one_shot_candidates, keep: self.one_shot_keep },
            Mode::RandomUpdate => NoiseSource::RandomUpdate(self.cem.clone()),
        }
    }
}

/// Hex SHA-256 digest.
pub fn config_hash(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn has_duplicates<T: PartialEq>(xs: &[T]) -> bool {
    xs.iter().enumerate().any(|(i, x)| xs[..i].contains(x))
}

fn parse_usize_list(s: &str) -> std::result::Result<Vec<usize>, std::num::ParseIntError> {
    s.split(',').filter(|x| !x.trim().is_empty()).map(|x| x.trim().parse()).collect()
}

fn broadcast(s: &str, n: usize) -> std::result::Result<Vec<f64>, String> {
    let xs = parse_scalar_list(s).map_err(|e| e.to_string())?;
    match xs.len() {
        1 => Ok(vec![xs[0]; n]),
        len if len == n => Ok(xs),
        len => Err(format!("expected 1 or {n} values, got {len}")),
    }
}

struct Entry {
    value: String,
    line: usize,
}

struct Entries {
    map: BTreeMap<String, Entry>,
}

impl Entries {
    fn parse(text: &str) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let err = |msg: String| CliError::ConfigLine { file: "<config>".into(), line, msg };
            let (key, value) = content
                .split_once('=')
                .ok_or_else(|| err(format!("expected 'section.key = value', got '{content}'")))?;
            let (key, value) = (key.trim(), value.trim());
            match key.split_once('.') {
                Some((section, field)) if !section.is_empty() && !field.is_empty() => {}
                _ => return Err(err(format!("key '{key}' is not of the form section.key"))),
            }
            if value.is_empty() {
                return Err(err(format!("'{key}' has no value")));
            }
            if let Some(prev) = map.insert(key.to_string(), Entry { value: value.to_string(), line }) {
                return Err(err(format!("'{key}' already set on line {}", prev.line)));
            }
        }
        Ok(Self { map })
    }

    fn contains(&self, key: &str) -> bool {
        self.map.contains_key(key)
    }

    fn error(&self, key: &str, msg: &str) -> CliError {
        let line = self.map.get(key).map_or(0, |e| e.line);
        CliError::ConfigLine { file: "<config>".into(), line, msg: format!("{key}: {msg}") }
    }

    fn take_with<T, E: fmt::Display>(
        &mut self,
        key: &str,
        default: &str,
        parse: impl FnOnce(&str) -> std::result::Result<T, E>,
    ) -> Result<T> {
        match self.map.remove(key) {
            Some(e) => parse(&e.value).map_err(|err| CliError::ConfigLine {
                file: "<config>".into(),
                line: e.line,
                msg: format!("{key} = {}: {err}", e.value),
            }),
            None => parse(default).map_err(|err| CliError::Config(format!("default for {key}: {err}"))),
        }
    }

    fn take_or<T: FromStr>(&mut self, key: &str, default: T) -> Result<T>
    where
        T::Err: fmt::Display,
    {
        match self.map.remove(key) {
            Some(e) => e.value.parse().map_err(|err: T::Err| CliError::ConfigLine {
                file: "<config>".into(),
                line: e.line,
                msg: format!("{key} = {}: {err}", e.value),
            }),
            None => Ok(default),
        }
    }

    fn drain_prefix(&mut self, prefix: &str) -> BTreeMap<String, String> {
        let keys: Vec<String> = self.map.keys().filter(|k| k.starts_with(prefix)).cloned().collect();
        keys.into_iter()
            .map(|k| {
                let e = self.map.remove(&k).expect("key listed above");
                (k[prefix.len()..].to_string(), e.value)
            })
            .collect()
    }

    fn finish(self) -> Result<()> {
        match self.map.iter().min_by_key(|(_, e)| e.line) {
            None => Ok(()),
            Some((key, e)) => {
                Err(CliError::ConfigLine { file: "<config>".into(), line: e.line, msg: format!("unknown key '{key}'") })
            }
        }
    }
}
