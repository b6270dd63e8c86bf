//! The `flowcem` subcommands.
//!
//! Output layout under `<out>/<experiment.name>/`:
//!
//! ```text
//! pretrain/{checkpoint.txt, loss.csv, manifest.txt}
//! train_rl/<mode>_<seed>/{metrics.csv, eval.csv, checkpoint.txt, checkpoint_ema.txt, manifest.txt}
//! train_rl/{summary.csv, summary_by_cell.csv}
//! ablation/...     cells iterative, one_shot, greedy, random_update
//! sensitivity/...  cells n<N> for each N in experiment.sensitivity_iterations
//! decode/{decode.csv, decode_trend.csv, manifest.txt}
//! ```

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use flowcem::flow::pretrain::pretrain;
use flowcem::metrics::read_metrics_csv;
use flowcem::rl::train;
use flowcem::{CemConfig, Checkpoint, Mlp, NoiseSource, Phase, RewardFn, VelocityField};
use rayon::prelude::*;

use crate::config::{ExperimentConfig, Mode};
use crate::decode::{decode_study, error_trend, DecodeRow, DECODE_HEADER};
use crate::error::{CliError, Result};
use crate::manifest::Manifest;
use crate::stats::{late_std, mean};

pub const CHECKPOINT_FILE: &str = "checkpoint.txt";
pub const EMA_CHECKPOINT_FILE: &str = "checkpoint_ema.txt";
pub const SUMMARY_FILE: &str = "summary.csv";
pub const SUMMARY_BY_CELL_FILE: &str = "summary_by_cell.csv";

/// Directory tree of one experiment.
#[derive(Debug, Clone)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(out: &Path, cfg: &ExperimentConfig) -> Self {
        Self { root: out.join(&cfg.name) }
    }

    pub fn pretrain_dir(&self) -> PathBuf {
        self.root.join("pretrain")
    }

    pub fn checkpoint(&self) -> PathBuf {
        self.pretrain_dir().join(CHECKPOINT_FILE)
    }

    pub fn train_rl_dir(&self) -> PathBuf {
        self.root.join("train_rl")
    }

    pub fn ablation_dir(&self) -> PathBuf {
        self.root.join("ablation")
    }

    pub fn sensitivity_dir(&self) -> PathBuf {
        self.root.join("sensitivity")
    }

    pub fn decode_dir(&self) -> PathBuf {
        self.root.join("decode")
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| CliError::io(path, e))
}

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainReport {
    pub checkpoint: PathBuf,
    pub steps: usize,
    pub final_loss: Option<f64>,
    pub plateaued: bool,
}

/// Flow-matching pretraining; writes the checkpoint, `loss.csv` (`step,loss`)
/// and a manifest.
pub fn cmd_pretrain(cfg: &ExperimentConfig, out: &Path) -> Result<PretrainReport> {
    let layout = Layout::new(out, cfg);
    let dir = layout.pretrain_dir();
    create_dir(&dir)?;
    let mut manifest = Manifest::begin("pretrain", &cfg.hash);
    manifest.set("seed", cfg.pretrain_seed);

    let outcome = pretrain(&cfg.task, &cfg.pretrain, cfg.pretrain_seed)?;
    let mut loss_csv = String::from("step,loss\n");
    for (i, l) in outcome.losses.iter().enumerate() {
        let _ = writeln!(loss_csv, "{},{l}", i + 1);
    }
    write_file(&dir.join("loss.csv"), &loss_csv)?;
    let checkpoint = layout.checkpoint();
    Checkpoint::new(outcome.mlp, cfg.pretrain_seed).save(&checkpoint).map_err(|e| match e {
        flowcem::Error::Io(source) => CliError::io(&checkpoint, source),
        other => other.into(),
    })?;

    let final_loss = outcome.losses.last().copied();
    manifest.set("steps", outcome.losses.len());
    manifest.set("plateaued", outcome.plateaued);
    manifest.set("final_loss", final_loss.map_or("none".to_string(), |l| l.to_string()));
    manifest.finish();
    manifest.write(&dir)?;
    Ok(PretrainReport { checkpoint, steps: outcome.losses.len(), final_loss, plateaued: outcome.plateaued })
}

/// Loads the pretrained checkpoint, failing with a pointer to `pretrain`.
pub fn load_pretrained(cfg: &ExperimentConfig, out: &Path) -> Result<Mlp> {
    let path = Layout::new(out, cfg).checkpoint();
    if !path.is_file() {
        return Err(CliError::MissingPrerequisite { what: "pretrained checkpoint", path, command: "pretrain" });
    }
    let ckpt = Checkpoint::load(&path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    let d = cfg.task.dim();
    if ckpt.mlp.input_dim() != d + 1 || ckpt.mlp.output_dim() != d {
        return Err(CliError::Config(format!(
            "checkpoint {} has dims {:?}, but the task is {d}-dimensional",
            path.display(),
            ckpt.mlp.dims()
        )));
    }
    Ok(ckpt.mlp)
}

/// One `(label, noise source, seed)` training run.
#[derive(Debug, Clone)]
pub struct CellSpec {
    pub label: String,
    pub source: NoiseSource,
    pub seed: u64,
}

impl CellSpec {
    pub fn dir_name(&self) -> String {
        format!("{}_{}", self.label, self.seed)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CellStatus {
    Ok,
    Diverged,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellSummary {
    pub label: String,
    pub seed: u64,
    pub status: CellStatus,
    pub initial_eval_reward: f64,
    pub final_eval_reward: f64,
    pub best_eval_reward: f64,
    /// Std of the train reward curve over the final `stability_fraction` of epochs.
    pub late_reward_std: f64,
    /// Train-reward curve, one value per epoch.
    pub train_curve: Vec<f64>,
    /// `None` for diverged cells.
    pub reward_calls: Option<u64>,
    pub expected_reward_calls: Option<u64>,
    pub search_invocations: Option<u64>,
    pub groups: Option<u64>,
}

/// Per-label aggregate over seeds.
#[derive(Debug, Clone, PartialEq)]
pub struct CellAggregate {
    pub label: String,
    pub seeds: usize,
    pub mean_final_eval_reward: f64,
    pub mean_best_eval_reward: f64,
    pub mean_late_reward_std: f64,
    /// 1 = highest mean final reward.
    pub rank_by_final_reward: usize,
    /// 1 = smallest mean late std.
    pub rank_by_smoothness: usize,
}

#[derive(Debug, Clone)]
pub struct GridReport {
    pub dir: PathBuf,
    pub cells: Vec<CellSummary>,
    pub aggregates: Vec<CellAggregate>,
}

impl GridReport {
    pub fn aggregate(&self, label: &str) -> Option<&CellAggregate> {
        self.aggregates.iter().find(|a| a.label == label)
    }

    /// `Err(Diverged)` when any cell tripped the divergence guard.
    pub fn check_diverged(self) -> Result<Self> {
        let bad: Vec<String> = self
            .cells
            .iter()
            .filter(|c| c.status == CellStatus::Diverged)
            .map(|c| format!("{}_{}", c.label, c.seed))
            .collect();
        if bad.is_empty() {
            Ok(self)
        } else {
            Err(CliError::Diverged { cells: bad, total: self.cells.len() })
        }
    }
}

fn read_rows(path: &Path) -> Result<Vec<flowcem::MetricsRow>> {
    read_metrics_csv(path).map_err(|e| match e {
        flowcem::Error::Io(source) => CliError::io(path, source),
        other => CliError::Core(other),
    })
}

fn run_cell(
    cfg: &ExperimentConfig,
    command: &str,
    pretrained: &Mlp,
    reward: &RewardFn,
    spec: &CellSpec,
    dir: &Path,
) -> Result<CellSummary> {
    let grpo = flowcem::GrpoConfig { seed: spec.seed, ..cfg.grpo.clone() };
    let mut manifest = Manifest::begin(command, &cfg.hash);
    manifest.set("cell", &spec.label);
    manifest.set("seed", spec.seed);
    let mut sink = flowcem::metrics::CsvMetricsSink::create(dir).map_err(|e| match e {
        flowcem::Error::Io(source) => CliError::io(dir, source),
        other => other.into(),
    })?;

    let mut counts = None;
    let status = match train(pretrained, reward, &grpo, &spec.source, &mut sink) {
        Ok(out) => {
            Checkpoint::new(out.policy, spec.seed).save(dir.join(CHECKPOINT_FILE))?;
            Checkpoint::new(out.ema, spec.seed).save(dir.join(EMA_CHECKPOINT_FILE))?;
            let expected = spec.source.evaluations_per_search() as u64 * out.search_invocations
                + grpo.group_size as u64 * out.groups;
            manifest.set("reward_calls", out.train_reward_calls);
            manifest.set("expected_reward_calls", expected);
            manifest.set("search_invocations", out.search_invocations);
            manifest.set("groups", out.groups);
            manifest.set("non_finite_rewards", out.non_finite_rewards);
            counts = Some((out.train_reward_calls, expected, out.search_invocations, out.groups));
            manifest.set("status", "ok");
            CellStatus::Ok
        }
        Err(flowcem::Error::Diverged(d)) => {
            manifest.set("status", "diverged");
            manifest.set("diagnostic", &d);
            CellStatus::Diverged
        }
        Err(e) => return Err(e.into()),
    };
    drop(sink);
    manifest.finish();
    manifest.write(dir)?;

    let train_curve: Vec<f64> = read_rows(&dir.join("metrics.csv"))?.iter().map(|r| r.mean_reward).collect();
    let evals: Vec<f64> =
        read_rows(&dir.join("eval.csv"))?.iter().filter(|r| r.phase == Phase::Eval).map(|r| r.mean_reward).collect();
    let first = evals.first().copied().unwrap_or(f64::NAN);
    Ok(CellSummary {
        label: spec.label.clone(),
        seed: spec.seed,
        status,
        initial_eval_reward: first,
        final_eval_reward: evals.last().copied().unwrap_or(f64::NAN),
        best_eval_reward: evals.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        late_reward_std: late_std(&train_curve, cfg.stability_fraction),
        train_curve,
        reward_calls: counts.map(|c| c.0),
        expected_reward_calls: counts.map(|c| c.1),
        search_invocations: counts.map(|c| c.2),
        groups: counts.map(|c| c.3),
    })
}

fn aggregate(cells: &[CellSummary]) -> Vec<CellAggregate> {
    let mut labels: Vec<&str> = Vec::new();
    for c in cells {
        if !labels.contains(&c.label.as_str()) {
            labels.push(&c.label);
        }
    }
    let mut out: Vec<CellAggregate> = labels
        .iter()
        .map(|&label| {
            let mine: Vec<&CellSummary> = cells.iter().filter(|c| c.label == label).collect();
            let col = |f: fn(&CellSummary) -> f64| mean(&mine.iter().map(|c| f(c)).collect::<Vec<_>>());
            CellAggregate {
                label: label.to_string(),
                seeds: mine.len(),
                mean_final_eval_reward: col(|c| c.final_eval_reward),
                mean_best_eval_reward: col(|c| c.best_eval_reward),
                mean_late_reward_std: col(|c| c.late_reward_std),
                rank_by_final_reward: 0,
                rank_by_smoothness: 0,
            }
        })
        .collect();
    let mut order: Vec<usize> = (0..out.len()).collect();
    order.sort_by(|&a, &b| out[b].mean_final_eval_reward.total_cmp(&out[a].mean_final_eval_reward).then(a.cmp(&b)));
    for (rank, &i) in order.iter().enumerate() {
        out[i].rank_by_final_reward = rank + 1;
    }
    order.sort_by(|&a, &b| out[a].mean_late_reward_std.total_cmp(&out[b].mean_late_reward_std).then(a.cmp(&b)));
    for (rank, &i) in order.iter().enumerate() {
        out[i].rank_by_smoothness = rank + 1;
    }
    out
}

fn opt(v: Option<u64>) -> String {
    v.map_or(String::new(), |x| x.to_string())
}

fn write_summaries(dir: &Path, cells: &[CellSummary], aggregates: &[CellAggregate]) -> Result<()> {
    let mut s = String::from(
        "cell,seed,status,initial_eval_reward,final_eval_reward,best_eval_reward,late_reward_std,\
         reward_calls,expected_reward_calls,search_invocations,groups\n",
    );
    for c in cells {
        let status = match c.status {
            CellStatus::Ok => "ok",
            CellStatus::Diverged => "diverged",
        };
        let _ = writeln!(
            s,
            "{},{},{status},{},{},{},{},{},{},{},{}",
            c.label,
            c.seed,
            c.initial_eval_reward,
            c.final_eval_reward,
            c.best_eval_reward,
            c.late_reward_std,
            opt(c.reward_calls),
            opt(c.expected_reward_calls),
            opt(c.search_invocations),
            opt(c.groups)
        );
    }
    write_file(&dir.join(SUMMARY_FILE), &s)?;

    let mut s = String::from(
        "cell,seeds,mean_final_eval_reward,mean_best_eval_reward,mean_late_reward_std,rank_by_final_reward,rank_by_smoothness\n",
    );
    for a in aggregates {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{}",
            a.label,
            a.seeds,
            a.mean_final_eval_reward,
            a.mean_best_eval_reward,
            a.mean_late_reward_std,
            a.rank_by_final_reward,
            a.rank_by_smoothness
        );
    }
    write_file(&dir.join(SUMMARY_BY_CELL_FILE), &s)
}

/// Runs every cell (in parallel) below `dir` and writes the summaries.
/// Diverged cells are reported in the result, not as an error.
pub fn run_grid(
    cfg: &ExperimentConfig,
    out: &Path,
    command: &str,
    dir: &Path,
    cells: &[CellSpec],
) -> Result<GridReport> {
    let pretrained = load_pretrained(cfg, out)?;
    let reward = cfg.reward()?;
    for spec in cells {
        spec.source.validate().map_err(CliError::config)?;
    }
    create_dir(dir)?;
    let summaries = cells
        .par_iter()
        .map(|spec| run_cell(cfg, command, &pretrained, &reward, spec, &dir.join(spec.dir_name())))
        .collect::<Result<Vec<_>>>()?;
    let aggregates = aggregate(&summaries);
    write_summaries(dir, &summaries, &aggregates)?;
    Ok(GridReport { dir: dir.to_path_buf(), cells: summaries, aggregates })
}

fn grid(labels: &[(String, NoiseSource)], seeds: &[u64]) -> Vec<CellSpec> {
    labels
        .iter()
        .flat_map(|(label, source)| {
            seeds.iter().map(move |&seed| CellSpec { label: label.clone(), source: source.clone(), seed })
        })
        .collect()
}

/// Every configured mode for every seed.
pub fn train_rl_cells(cfg: &ExperimentConfig) -> Vec<CellSpec> {
    let labels: Vec<(String, NoiseSource)> =
        cfg.modes.iter().map(|&m| (m.name().to_string(), cfg.noise_source(m))).collect();
    grid(&labels, &cfg.seeds)
}

/// Iterative vs one-shot search and greedy vs random elite selection. The
/// iterative and greedy cells are both the full search with the configured
/// `cem` settings; each is the reference arm of its own comparison.
pub fn ablation_cells(cfg: &ExperimentConfig) -> Vec<CellSpec> {
    let labels = vec![
        ("iterative".to_string(), cfg.noise_source(Mode::SmartGrpo)),
        ("one_shot".to_string(), cfg.noise_source(Mode::OneShot)),
        ("greedy".to_string(), cfg.noise_source(Mode::SmartGrpo)),
        ("random_update".to_string(), cfg.noise_source(Mode::RandomUpdate)),
    ];
    grid(&labels, &cfg.seeds)
}

/// The full search with each configured iteration count.
pub fn sensitivity_cells(cfg: &ExperimentConfig) -> Vec<CellSpec> {
    let labels: Vec<(String, NoiseSource)> = cfg
        .sensitivity_iterations
        .iter()
        .map(|&n| (format!("n{n}"), NoiseSource::Search(CemConfig { iterations: n, ..cfg.cem.clone() })))
        .collect();
    grid(&labels, &cfg.seeds)
}

pub fn cmd_train_rl(cfg: &ExperimentConfig, out: &Path) -> Result<GridReport> {
    run_grid(cfg, out, "train-rl", &Layout::new(out, cfg).train_rl_dir(), &train_rl_cells(cfg))
}

pub fn cmd_ablation(cfg: &ExperimentConfig, out: &Path) -> Result<GridReport> {
    run_grid(cfg, out, "ablation", &Layout::new(out, cfg).ablation_dir(), &ablation_cells(cfg))
}

pub fn cmd_sensitivity(cfg: &ExperimentConfig, out: &Path) -> Result<GridReport> {
    run_grid(cfg, out, "sensitivity", &Layout::new(out, cfg).sensitivity_dir(), &sensitivity_cells(cfg))
}

#[derive(Debug, Clone)]
pub struct DecodeReport {
    pub dir: PathBuf,
    pub rows: Vec<DecodeRow>,
    /// Per seed: Spearman correlation between `t` and decode error.
    pub trend: Vec<(u64, f64)>,
}

impl DecodeReport {
    pub fn mean_trend(&self) -> f64 {
        mean(&self.trend.iter().map(|t| t.1).collect::<Vec<_>>())
    }
}

/// One-step-decode reliability of the pretrained field across the `t` grid.
pub fn cmd_decode_study(cfg: &ExperimentConfig, out: &Path) -> Result<DecodeReport> {
    let layout = Layout::new(out, cfg);
    let field = VelocityField::Mlp(load_pretrained(cfg, out)?);
    let reward = cfg.reward()?;
    let dir = layout.decode_dir();
    create_dir(&dir)?;
    let mut manifest = Manifest::begin("decode-study", &cfg.hash);
    manifest.set("seeds", cfg.seeds.iter().map(u64::to_string).collect::<Vec<_>>().join(","));

    let rows = decode_study(&field, &reward, &cfg.decode, cfg.grpo.noise_level, &cfg.seeds)?;
    let trend = error_trend(&rows);
    let mut s = format!("{DECODE_HEADER}\n");
    for r in &rows {
        let _ = writeln!(s, "{}", r.to_csv_line());
    }
    write_file(&dir.join("decode.csv"), &s)?;
    let mut s = String::from("seed,t_error_spearman\n");
    for (seed, rho) in &trend {
        let _ = writeln!(s, "{seed},{rho}");
    }
    write_file(&dir.join("decode_trend.csv"), &s)?;
    manifest.finish();
    manifest.write(&dir)?;
    Ok(DecodeReport { dir, rows, trend })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn summary(label: &str, seed: u64, fin: f64, late: f64) -> CellSummary {
        CellSummary {
            label: label.into(),
            seed,
            status: CellStatus::Ok,
            initial_eval_reward: 0.0,
            final_eval_reward: fin,
            best_eval_reward: fin,
            late_reward_std: late,
            train_curve: vec![],
            reward_calls: None,
            expected_reward_calls: None,
            search_invocations: None,
            groups: None,
        }
    }

    #[test]
    fn aggregates_rank_arms() {
        let cells = vec![
            summary("a", 0, 1.0, 0.5),
            summary("a", 1, 3.0, 0.5),
            summary("b", 0, 5.0, 2.0),
            summary("b", 1, 5.0, 2.0),
            summary("c", 0, -1.0, 0.1),
        ];
        let agg = aggregate(&cells);
        assert_eq!(agg.iter().map(|a| a.label.as_str()).collect::<Vec<_>>(), ["a", "b", "c"]);
        assert_eq!(agg[0].mean_final_eval_reward, 2.0);
        assert_eq!(agg[0].seeds, 2);
        assert_eq!(agg.iter().map(|a| a.rank_by_final_reward).collect::<Vec<_>>(), [2, 1, 3]);
        assert_eq!(agg.iter().map(|a| a.rank_by_smoothness).collect::<Vec<_>>(), [2, 3, 1]);
    }

    #[test]
    fn grid_shapes() {
        let cfg =
            ExperimentConfig::parse("experiment.seeds = 0,1,2\nexperiment.modes = flow_grpo,smart_grpo\n").unwrap();
        let cells = train_rl_cells(&cfg);
        assert_eq!(cells.len(), 6);
        assert_eq!(cells[4].dir_name(), "smart_grpo_1");
        let ab = ablation_cells(&cfg);
        assert_eq!(ab.len(), 12);
        assert_eq!(ab[0].source, ab[6].source);
        assert_eq!(ab[3].source, NoiseSource::OneShot { candidates: 25, keep: 12 });
        let sens = sensitivity_cells(&cfg);
        assert_eq!(
            sens.iter().map(|c| c.label.as_str()).collect::<Vec<_>>(),
            ["n1", "n1", "n1", "n3", "n3", "n3", "n5", "n5", "n5"]
        );
        match &sens[8].source {
            NoiseSource::Search(c) => assert_eq!(c.iterations, 5),
            other => panic!("{other:?}"),
        }
    }
}
