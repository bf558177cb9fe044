//! Command implementations behind the `sejd` binary.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use sejd_core::conditioner::ConditionerHyper;
use sejd_core::data::DatasetId;
use sejd_core::decode::{
    convergence_study, decode_batch, redundancy_analysis, write_redundancy_csv, BatchDecodeOutput,
};
use sejd_core::flow::{log_likelihood, NetworkFlow};
use sejd_core::train::{train, write_loss_csv, TrainConfig, TrainError};
use sejd_core::{load_checkpoint, save_checkpoint, CheckpointError, DecodeConfig, DecodeMode, Error, Matrix, Rng};

pub const THREADS_ENV: &str = "SEJD_THREADS";
pub const CHECKPOINT_FILE: &str = "model.sejd";
pub const LOSS_FILE: &str = "loss.csv";
pub const ABLATION_CSV_HEADER: &str = "tau,time_s,max_dev,mean_iters";
pub const DEFAULT_TAUS: [f64; 6] = [0.05, 0.1, 0.25, 0.5, 1.0, 2.0];

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::Contract(msg) => CliError::Usage(msg),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

pub type CliResult<T> = Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(
    name = "sejd",
    version,
    about = "Autoregressive flow training, sampling benchmarks and decoding analysis"
)]
pub struct Cli {
    /// Worker threads (default: hardware concurrency). SEJD_THREADS takes precedence.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a flow by maximum likelihood and write a checkpoint plus loss log.
    Train(TrainArgs),
    /// Time the samplers on shared noise and compare their outputs.
    Bench(BenchArgs),
    /// Masked-context redundancy or Jacobi convergence dynamics.
    Analyze(AnalyzeArgs),
    /// Sweep the Jacobi stopping threshold under selective decoding.
    AblateTau(AblateArgs),
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    #[arg(long, default_value = "gradient-patches")]
    pub dataset: String,
    #[arg(long, default_value_t = 4)]
    pub layers: usize,
    #[arg(long, default_value_t = 32)]
    pub channels: usize,
    #[arg(long, default_value_t = 2)]
    pub blocks: usize,
    #[arg(long, default_value_t = 2000)]
    pub steps: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 32)]
    pub batch: usize,
    /// Dataset size before the 90/10 train/held-out split.
    #[arg(long, default_value_t = 4000)]
    pub samples: usize,
    #[arg(long, default_value_t = 2.0)]
    pub scale_clamp: f64,
    /// Keep every layer in the same generation order.
    #[arg(long)]
    pub no_flip: bool,
    /// Output directory for the checkpoint and loss log.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct BenchArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "sequential,ujd,sejd")]
    pub modes: Vec<DecodeMode>,
    #[arg(long, default_value_t = 0.5)]
    pub tau: f64,
    #[arg(long, default_value_t = 64)]
    pub batch: usize,
    /// Timed repeats after one warm-up run; the median is reported.
    #[arg(long, default_value_t = 5)]
    pub repeats: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Layers (1-based, generation order) decoded sequentially under sejd.
    #[arg(long, value_delimiter = ',', default_value = "1")]
    pub sequential_layers: Vec<usize>,
    #[arg(long)]
    pub json: Option<PathBuf>,
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum AnalysisKind {
    Redundancy,
    Convergence,
}

#[derive(Debug, Clone, Args)]
pub struct AnalyzeArgs {
    #[arg(value_enum)]
    pub kind: AnalysisKind,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Number of nearest preceding patches hidden in the redundancy study.
    #[arg(long = "o", default_value_t = 5)]
    pub mask_offset: usize,
    /// Jacobi iterations per layer in the convergence study (default: L).
    #[arg(long)]
    pub max_iters: Option<usize>,
    /// Noise samples averaged in the redundancy study.
    #[arg(long, default_value_t = 16)]
    pub samples: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Write the CSV here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "0.05,0.1,0.25,0.5,1.0,2.0")]
    pub taus: Vec<f64>,
    #[arg(long, default_value_t = 64)]
    pub batch: usize,
    #[arg(long, default_value_t = 5)]
    pub repeats: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Thread count from `SEJD_THREADS`, then `--threads`; `None` keeps the
/// rayon default.
pub fn resolve_threads(flag: Option<usize>, env: Option<&str>) -> CliResult<Option<usize>> {
    let n = match env {
        Some(v) => Some(
            v.trim()
                .parse::<usize>()
                .map_err(|_| CliError::Usage(format!("{THREADS_ENV}='{v}' is not a thread count")))?,
        ),
        None => flag,
    };
    if n == Some(0) {
        return Err(CliError::Usage("thread count must be at least 1".into()));
    }
    Ok(n)
}

pub fn run(cli: Cli) -> CliResult<()> {
    let env = std::env::var(THREADS_ENV).ok();
    if let Some(n) = resolve_threads(cli.threads, env.as_deref())? {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Runtime(e.to_string()))?;
    }
    match cli.command {
        Command::Train(a) => {
            let s = cmd_train(&a)?;
            println!("{}", serde_json::to_string_pretty(&s).expect("serializable"));
        }
        Command::Bench(a) => {
            let report = cmd_bench(&a)?;
            if a.json.is_none() {
                println!("{}", serde_json::to_string_pretty(&report).expect("serializable"));
            }
        }
        Command::Analyze(a) => {
            let csv = cmd_analyze(&a)?;
            emit(a.out.as_deref(), &csv)?;
        }
        Command::AblateTau(a) => {
            let rows = cmd_ablate_tau(&a)?;
            emit(a.out.as_deref(), &ablation_csv(&rows))?;
        }
    }
    Ok(())
}

fn emit(path: Option<&Path>, text: &str) -> CliResult<()> {
    match path {
        Some(p) => fs::write(p, text)?,
        None => std::io::stdout().write_all(text.as_bytes())?,
    }
    Ok(())
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct TrainSummary {
    pub checkpoint: PathBuf,
    pub loss_log: PathBuf,
    pub steps: usize,
    pub baseline_nll: f64,
    pub heldout_nll: f64,
    pub improvement: f64,
}

pub fn train_config(a: &TrainArgs) -> CliResult<TrainConfig> {
    let dataset: DatasetId = a.dataset.parse()?;
    let base = TrainConfig::default();
    let cfg = TrainConfig {
        steps: a.steps,
        batch: a.batch,
        lr: a.lr,
        seed: a.seed,
        dataset,
        samples: a.samples,
        layers: a.layers,
        hyper: ConditionerHyper {
            channels: a.channels,
            blocks: a.blocks,
            scale_clamp: a.scale_clamp,
            ..base.hyper
        },
        flips: !a.no_flip,
        ..base
    };
    cfg.validate()?;
    Ok(cfg)
}

pub fn cmd_train(a: &TrainArgs) -> CliResult<TrainSummary> {
    let cfg = train_config(a)?;
    fs::create_dir_all(&a.out)?;
    let checkpoint = a.out.join(CHECKPOINT_FILE);
    let loss_log = a.out.join(LOSS_FILE);
    match train(&cfg) {
        Ok(out) => {
            save_checkpoint(&out.model, &checkpoint)?;
            write_loss_csv(&out.loss_log, fs::File::create(&loss_log)?)?;
            Ok(TrainSummary {
                checkpoint,
                loss_log,
                steps: cfg.steps,
                baseline_nll: out.baseline_nll,
                heldout_nll: out.heldout_nll,
                improvement: out.improvement(),
            })
        }
        Err(TrainError::Diverged(d)) => {
            save_checkpoint(&d.last_finite, &checkpoint)?;
            write_loss_csv(&d.loss_log, fs::File::create(&loss_log)?)?;
            Err(CliError::Runtime(format!(
                "{d}; last finite checkpoint written to {}",
                checkpoint.display()
            )))
        }
        Err(TrainError::Other(e)) => Err(e.into()),
    }
}

/// Standard-normal noise shared by every sampler in a run.
pub fn shared_noise(model: &NetworkFlow, batch: usize, seed: u64) -> Vec<Matrix<f32>> {
    let mut rng = Rng::new(seed);
    (0..batch)
        .map(|_| rng.normal_matrix(model.seq_len(), model.patch_dim(), 1.0))
        .collect()
}

pub fn max_abs_deviation(a: &[Matrix<f32>], b: &[Matrix<f32>]) -> f64 {
    a.iter()
        .zip(b)
        .flat_map(|(x, y)| x.data().iter().zip(y.data()))
        .fold(0.0f64, |m, (p, q)| m.max((p - q).abs() as f64))
}

pub fn mean_nll(model: &NetworkFlow, xs: &[Matrix<f32>]) -> CliResult<f64> {
    let mut total = 0.0;
    for x in xs {
        total -= log_likelihood(model, x)?;
    }
    Ok(total / xs.len() as f64)
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// One warm-up run, then `repeats` timed runs; returns the median wall-clock
/// time and the output of the last run.
pub fn timed_decode(
    model: &NetworkFlow,
    noise: &[Matrix<f32>],
    cfg: &DecodeConfig,
    repeats: usize,
) -> CliResult<(f64, BatchDecodeOutput<f32>)> {
    let mut last = decode_batch(model, noise, cfg)?;
    let mut times = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        last = decode_batch(model, noise, cfg)?;
        times.push(last.seconds);
    }
    Ok((median(times), last))
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ModeReport {
    pub mode: String,
    pub median_seconds: f64,
    pub speedup: f64,
    pub mean_iterations: Vec<f64>,
    pub max_abs_deviation: f64,
    pub mean_nll: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct BenchReport {
    pub checkpoint: String,
    pub tau: f64,
    pub batch: usize,
    pub repeats: usize,
    pub seed: u64,
    pub threads: usize,
    pub sequential_layers: Vec<usize>,
    pub modes: Vec<ModeReport>,
}

impl BenchReport {
    pub fn mode(&self, mode: DecodeMode) -> Option<&ModeReport> {
        self.modes.iter().find(|m| m.mode == mode.name())
    }

    pub fn to_csv(&self) -> String {
        let k = self.modes.first().map_or(0, |m| m.mean_iterations.len());
        let mut s = String::from("mode,median_s,speedup,max_dev,mean_nll");
        for l in 1..=k {
            s.push_str(&format!(",iters_layer{l}"));
        }
        s.push('\n');
        for m in &self.modes {
            s.push_str(&format!(
                "{},{},{},{},{}",
                m.mode, m.median_seconds, m.speedup, m.max_abs_deviation, m.mean_nll
            ));
            for it in &m.mean_iterations {
                s.push_str(&format!(",{it}"));
            }
            s.push('\n');
        }
        s
    }
}

fn check_batch(batch: usize, repeats: usize) -> CliResult<()> {
    if batch == 0 {
        return Err(CliError::Usage("--batch must be at least 1".into()));
    }
    if repeats == 0 {
        return Err(CliError::Usage("--repeats must be at least 1".into()));
    }
    Ok(())
}

pub fn cmd_bench(a: &BenchArgs) -> CliResult<BenchReport> {
    check_batch(a.batch, a.repeats)?;
    if a.modes.is_empty() {
        return Err(CliError::Usage("--modes must name at least one sampler".into()));
    }
    let model = load_checkpoint(&a.checkpoint)?;
    let noise = shared_noise(&model, a.batch, a.seed);
    let config = |mode| {
        let mut c = DecodeConfig::new(mode, a.tau);
        c.sequential_layers = a.sequential_layers.iter().copied().collect();
        c
    };
    for &m in &a.modes {
        config(m).validate(model.num_layers())?;
    }

    let (seq_time, seq_out) = timed_decode(&model, &noise, &config(DecodeMode::Sequential), a.repeats)?;
    let mut modes = Vec::with_capacity(a.modes.len());
    for &mode in &a.modes {
        let (time, out) = if mode == DecodeMode::Sequential {
            (seq_time, seq_out.clone())
        } else {
            timed_decode(&model, &noise, &config(mode), a.repeats)?
        };
        modes.push(ModeReport {
            mode: mode.name().to_string(),
            median_seconds: time,
            speedup: if mode == DecodeMode::Sequential {
                1.0
            } else {
                seq_time / time
            },
            mean_iterations: out.mean_iterations(),
            max_abs_deviation: max_abs_deviation(&out.xs, &seq_out.xs),
            mean_nll: mean_nll(&model, &out.xs)?,
        });
    }
    let report = BenchReport {
        checkpoint: a.checkpoint.display().to_string(),
        tau: a.tau,
        batch: a.batch,
        repeats: a.repeats,
        seed: a.seed,
        threads: rayon::current_num_threads(),
        sequential_layers: a.sequential_layers.clone(),
        modes,
    };
    if let Some(p) = &a.json {
        fs::write(p, serde_json::to_string_pretty(&report).expect("serializable") + "\n")?;
    }
    if let Some(p) = &a.csv {
        fs::write(p, report.to_csv())?;
    }
    Ok(report)
}

pub fn cmd_analyze(a: &AnalyzeArgs) -> CliResult<String> {
    let model = load_checkpoint(&a.checkpoint)?;
    let mut buf = Vec::new();
    match a.kind {
        AnalysisKind::Redundancy => {
            if a.mask_offset >= model.seq_len() {
                return Err(CliError::Usage(format!(
                    "--o {} must be below the sequence length {}",
                    a.mask_offset,
                    model.seq_len()
                )));
            }
            if a.samples == 0 {
                return Err(CliError::Usage("--samples must be at least 1".into()));
            }
            let noise = shared_noise(&model, a.samples, a.seed);
            let rows = redundancy_analysis(&model, &noise, a.mask_offset)?;
            write_redundancy_csv(&rows, &mut buf)?;
        }
        AnalysisKind::Convergence => {
            let max_iters = a.max_iters.unwrap_or(model.seq_len());
            if max_iters == 0 {
                return Err(CliError::Usage("--max-iters must be at least 1".into()));
            }
            let noise = shared_noise(&model, 1, a.seed);
            convergence_study(&model, &noise[0], max_iters)?.write_csv(&mut buf)?;
        }
    }
    Ok(String::from_utf8(buf).expect("csv is ascii"))
}

#[derive(Clone, Debug, PartialEq)]
pub struct TauRow {
    pub tau: f64,
    pub time_s: f64,
    pub max_dev: f64,
    pub mean_iters: f64,
}

pub fn cmd_ablate_tau(a: &AblateArgs) -> CliResult<Vec<TauRow>> {
    if a.taus.is_empty() {
        return Err(CliError::Usage("--taus must list at least one threshold".into()));
    }
    if let Some(t) = a.taus.iter().find(|t| !(**t >= 0.0 && t.is_finite())) {
        return Err(CliError::Usage(format!(
            "threshold {t} must be finite and non-negative"
        )));
    }
    check_batch(a.batch, a.repeats)?;
    let model = load_checkpoint(&a.checkpoint)?;
    let noise = shared_noise(&model, a.batch, a.seed);
    let reference = decode_batch(&model, &noise, &DecodeConfig::new(DecodeMode::Sequential, 0.0))?;
    a.taus
        .iter()
        .map(|&tau| {
            let (time_s, out) = timed_decode(&model, &noise, &DecodeConfig::new(DecodeMode::Sejd, tau), a.repeats)?;
            let per_layer = out.mean_iterations();
            Ok(TauRow {
                tau,
                time_s,
                max_dev: max_abs_deviation(&out.xs, &reference.xs),
                mean_iters: per_layer.iter().sum::<f64>() / per_layer.len() as f64,
            })
        })
        .collect()
}

pub fn ablation_csv(rows: &[TauRow]) -> String {
    let mut s = format!("{ABLATION_CSV_HEADER}\n");
    for r in rows {
        s.push_str(&format!("{},{},{},{}\n", r.tau, r.time_s, r.max_dev, r.mean_iters));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn env_overrides_flag() {
        assert_eq!(resolve_threads(Some(2), Some("3")).unwrap(), Some(3));
        assert_eq!(resolve_threads(Some(2), None).unwrap(), Some(2));
        assert_eq!(resolve_threads(None, None).unwrap(), None);
        assert_eq!(resolve_threads(None, Some("x")).unwrap_err().exit_code(), 2);
        assert_eq!(resolve_threads(Some(0), None).unwrap_err().exit_code(), 2);
    }

    #[test]
    fn median_of_odd_and_even() {
        assert_eq!(median(vec![3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(vec![4.0, 1.0, 2.0, 3.0]), 2.5);
    }

    #[test]
    fn ablation_csv_layout() {
        let rows = [TauRow {
            tau: 0.5,
            time_s: 0.25,
            max_dev: 0.0,
            mean_iters: 3.0,
        }];
        assert_eq!(ablation_csv(&rows), "tau,time_s,max_dev,mean_iters\n0.5,0.25,0,3\n");
    }
}
