//! Command-line front end.
//!
//! Exit codes: 0 success, 1 user error (bad flags, missing or malformed
//! input), 2 numerical failure (NaN, divergence, failed gradient check).
//! Every command that writes a directory also writes `run_config.json` with
//! the fully resolved arguments.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::error::ErrorKind;
use clap::{Args, CommandFactory, Parser, Subcommand};
use serde::Serialize;
use thiserror::Error;

use crate::analysis::{
    analyze_k, buckets_csv, linspace, lm_gradcheck, losscurve, losscurve_csv, sweep_beta,
    sweep_csv, AnalysisError, PolicyMargin, GRADCHECK_TOLERANCE,
};
use crate::data::{generate_corpus, read_jsonl, split, write_jsonl, CorpusSpec, DataError, PreferencePair};
use crate::objectives::PairStats;
use crate::tinylm::{checkpoint_hash, load_checkpoint, save_checkpoint, ModelConfig, TinyLm};
use crate::trainer::{
    precompute_pair_stats_cached, read_stats_jsonl, train_align, train_sft, AlignConfig, CacheOutcome,
    Method, SftConfig, TrainError,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USER: i32 = 1;
pub const EXIT_NUMERICAL: i32 = 2;

pub const SEED_ENV: &str = "MIPO_SEED";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    User(String),
    #[error("{0}")]
    Numerical(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::User(_) => EXIT_USER,
            CliError::Numerical(_) => EXIT_NUMERICAL,
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        if e.is_numerical() {
            CliError::Numerical(e.to_string())
        } else {
            CliError::User(e.to_string())
        }
    }
}

impl From<AnalysisError> for CliError {
    fn from(e: AnalysisError) -> Self {
        match e {
            AnalysisError::Train(t) => t.into(),
            AnalysisError::NonFinite(_) => CliError::Numerical(e.to_string()),
            other => CliError::User(other.to_string()),
        }
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        CliError::User(e.to_string())
    }
}

fn user(e: impl std::fmt::Display) -> CliError {
    CliError::User(e.to_string())
}

fn positive(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|_| format!("not a number: {s}"))?;
    if v > 0.0 && v.is_finite() {
        Ok(v)
    } else {
        Err("must be > 0".to_string())
    }
}

fn beta_value(s: &str) -> Result<f64, String> {
    positive(s).map_err(|_| "beta must be > 0".to_string())
}

fn fraction(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|_| format!("not a number: {s}"))?;
    if (0.0..=1.0).contains(&v) {
        Ok(v)
    } else {
        Err("must be in [0, 1]".to_string())
    }
}

#[derive(Debug, Parser, Serialize)]
#[command(name = "mipo", version, about = "Preference-optimization laboratory on a tiny language model")]
pub struct Cli {
    /// Master seed for every stochastic step.
    #[arg(long, global = true, env = SEED_ENV, default_value_t = 0)]
    pub seed: u64,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand, Serialize)]
#[serde(tag = "command", rename_all = "kebab-case")]
pub enum Command {
    /// Generate a synthetic preference corpus as JSONL.
    GenData(GenDataArgs),
    /// Supervised fine-tuning of the reference model on chosen responses.
    Sft(SftArgs),
    /// Reference log-likelihoods and K for every pair (cached sidecar).
    Stats(StatsArgs),
    /// Preference alignment of a policy initialized from the reference.
    Align(AlignArgs),
    /// Per-bucket margin change from an alignment eval log.
    AnalyzeK(AnalyzeKArgs),
    /// One alignment run per β.
    SweepBeta(SweepArgs),
    /// Tabulate the loss over a grid of margins and K values.
    Losscurve(LosscurveArgs),
    /// Compare autodiff gradients with finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args, Serialize)]
pub struct GenDataArgs {
    /// Output JSONL path.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 2000)]
    pub n_pairs: usize,
    /// Per-position edit probability of the low tier.
    #[arg(long, default_value_t = 0.05, value_parser = fraction)]
    pub low_rate: f64,
    /// Per-position edit probability of the high tier.
    #[arg(long, default_value_t = 0.4, value_parser = fraction)]
    pub high_rate: f64,
    /// Share of pairs drawn from the high tier.
    #[arg(long, default_value_t = 0.5, value_parser = fraction)]
    pub high_fraction: f64,
}

#[derive(Debug, Args, Serialize, Clone, Copy)]
pub struct ModelArgs {
    #[arg(long, default_value_t = 32)]
    pub d_model: usize,
    #[arg(long, default_value_t = 2)]
    pub n_layers: usize,
    #[arg(long, default_value_t = 64)]
    pub d_ff: usize,
    #[arg(long, default_value_t = 32)]
    pub context_len: usize,
}

#[derive(Debug, Args, Serialize)]
pub struct SftArgs {
    /// Training corpus (JSONL).
    #[arg(long)]
    pub data: PathBuf,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 2000)]
    pub steps: usize,
    #[arg(long, default_value_t = 16)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 3e-4, value_parser = positive)]
    pub lr: f64,
    #[arg(long, default_value_t = 10)]
    pub warmup: usize,
    #[command(flatten)]
    pub model: ModelArgs,
}

#[derive(Debug, Args, Serialize)]
pub struct StatsArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// JSONL sidecar; reused when it matches the checkpoint hash.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize, Clone)]
pub struct TrainArgs {
    /// Reference checkpoint.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Preference pairs (JSONL).
    #[arg(long)]
    pub data: PathBuf,
    /// Held-out pairs; when absent a seeded split of --data is used.
    #[arg(long)]
    pub eval: Option<PathBuf>,
    #[arg(long, default_value_t = 0.2, value_parser = fraction)]
    pub eval_fraction: f64,
    #[arg(long, value_enum, default_value_t = Method::Mipo)]
    pub method: Method,
    /// SimPO margin (only with --method simpo).
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long, default_value_t = 1e-5, value_parser = positive)]
    pub lr: f64,
    #[arg(long, default_value_t = 1)]
    pub epochs: usize,
    /// Total optimizer steps; overrides --epochs.
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long, default_value_t = 16)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 10)]
    pub warmup: usize,
    #[arg(long, default_value_t = 1e3, value_parser = positive)]
    pub grad_norm_ceiling: f64,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

impl TrainArgs {
    fn config(&self, beta: f64, seed: u64) -> AlignConfig {
        AlignConfig {
            method: self.method,
            beta,
            gamma: self.gamma,
            lr: self.lr,
            epochs: self.epochs,
            steps: self.steps,
            batch_size: self.batch_size,
            warmup: self.warmup,
            seed,
            grad_norm_ceiling: self.grad_norm_ceiling,
        }
    }
}

#[derive(Debug, Args, Serialize)]
pub struct AlignArgs {
    #[arg(long, default_value_t = 10.0, value_parser = beta_value)]
    pub beta: f64,
    #[command(flatten)]
    pub train: TrainArgs,
}

#[derive(Debug, Args, Serialize)]
pub struct SweepArgs {
    /// Comma-separated β values.
    #[arg(long, value_delimiter = ',', default_value = "1,5,10,25,50", value_parser = beta_value)]
    pub betas: Vec<f64>,
    #[command(flatten)]
    pub train: TrainArgs,
}

#[derive(Debug, Args, Serialize)]
pub struct AnalyzeKArgs {
    /// `eval.csv` written by `align`.
    #[arg(long)]
    pub eval_log: PathBuf,
    /// Reference stats JSONL; defaults to the K column of the log.
    #[arg(long)]
    pub stats: Option<PathBuf>,
    /// Output CSV.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct LosscurveArgs {
    #[arg(long, default_value_t = 1.0, value_parser = beta_value)]
    pub beta: f64,
    /// Comma-separated K values.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true, default_value = "-5,-2,0,1,3,10")]
    pub ks: Vec<f64>,
    #[arg(long, default_value_t = -5.0, allow_hyphen_values = true)]
    pub f_min: f64,
    #[arg(long, default_value_t = 10.0, allow_hyphen_values = true)]
    pub f_max: f64,
    #[arg(long, default_value_t = 61)]
    pub f_points: usize,
    /// Output CSV.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct GradcheckArgs {
    /// Number of seeds, starting at --seed.
    #[arg(long, default_value_t = 20)]
    pub seeds: u64,
    /// Random parameter coordinates per seed.
    #[arg(long, default_value_t = 50)]
    pub coords: usize,
    /// Finite-difference step.
    #[arg(long, default_value_t = 1e-4, value_parser = positive)]
    pub h: f64,
    #[arg(long, value_enum, default_value_t = Method::Mipo)]
    pub method: Method,
    #[arg(long, default_value_t = 10.0, value_parser = beta_value)]
    pub beta: f64,
    #[command(flatten)]
    pub model: ModelArgs,
}

impl ModelArgs {
    fn config(&self, seed: u64) -> ModelConfig {
        ModelConfig {
            d_model: self.d_model,
            n_layers: self.n_layers,
            d_ff: self.d_ff,
            context_len: self.context_len,
            seed,
            ..ModelConfig::default()
        }
    }
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code. Diagnostics go to standard error.
pub fn run_from<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_USER,
            };
            let _ = e.print();
            return code;
        }
    };
    match run(&cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            if let CliError::User(_) = e {
                eprintln!("\n{}", Cli::command().render_usage());
                eprintln!("For more information, try '--help'.");
            }
            e.exit_code()
        }
    }
}

pub fn run(cli: &Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::GenData(a) => gen_data(cli, a),
        Command::Sft(a) => sft(cli, a),
        Command::Stats(a) => stats(a),
        Command::Align(a) => align(cli, a),
        Command::AnalyzeK(a) => analyze(a),
        Command::SweepBeta(a) => sweep(cli, a),
        Command::Losscurve(a) => curve(a),
        Command::Gradcheck(a) => gradcheck(cli, a),
    }
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
    fs::write(path, contents).map_err(|e| user(format!("cannot write {}: {e}", path.display())))
}

fn prepare_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| user(format!("cannot create {}: {e}", dir.display())))
}

#[derive(Serialize)]
struct RunConfig<'a, E: Serialize> {
    version: &'static str,
    cli: &'a Cli,
    resolved: E,
}

fn write_run_config(dir: &Path, cli: &Cli, resolved: impl Serialize) -> Result<(), CliError> {
    let rc = RunConfig {
        version: env!("CARGO_PKG_VERSION"),
        cli,
        resolved,
    };
    let text = serde_json::to_string_pretty(&rc).expect("config serializes");
    write(&dir.join("run_config.json"), text + "\n")
}

fn load_model(path: &Path) -> Result<TinyLm, CliError> {
    load_checkpoint(path).map_err(|e| user(format!("{}: {e}", path.display())))
}

fn gen_data(cli: &Cli, a: &GenDataArgs) -> Result<(), CliError> {
    let spec = CorpusSpec {
        n_pairs: a.n_pairs,
        low_rate: a.low_rate,
        high_rate: a.high_rate,
        high_fraction: a.high_fraction,
        seed: cli.seed,
        ..CorpusSpec::default()
    };
    let pairs = generate_corpus(&spec)?;
    if let Some(dir) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        prepare_dir(dir)?;
    }
    write_jsonl(&pairs, &a.out)?;
    println!("wrote {} pairs to {}", pairs.len(), a.out.display());
    Ok(())
}

fn sft(cli: &Cli, a: &SftArgs) -> Result<(), CliError> {
    let corpus = read_jsonl(&a.data)?;
    let config = SftConfig {
        steps: a.steps,
        batch_size: a.batch_size,
        lr: a.lr,
        warmup: a.warmup,
        seed: cli.seed,
    };
    let model_config = a.model.config(cli.seed);
    let mut model = TinyLm::new(model_config).map_err(user)?;
    prepare_dir(&a.out)?;
    write_run_config(&a.out, cli, (&config, &model_config))?;
    let report = train_sft(&mut model, &corpus, &config)?;
    let ckpt = a.out.join("reference.ckpt");
    save_checkpoint(&model, &ckpt).map_err(user)?;
    write(&a.out.join("sft_loss.csv"), report.to_csv())?;
    match (report.losses.first(), report.losses.last()) {
        (Some(first), Some(last)) => println!("sft: {} steps, loss {first} -> {last}", report.losses.len()),
        _ => println!("sft: 0 steps"),
    }
    println!("checkpoint {} ({})", ckpt.display(), checkpoint_hash(&model));
    Ok(())
}

fn stats(a: &StatsArgs) -> Result<(), CliError> {
    let model = load_model(&a.checkpoint)?;
    let pairs = read_jsonl(&a.data)?;
    let (stats, outcome) = precompute_pair_stats_cached(&model, &pairs, &a.out)?;
    let neg = stats.iter().filter(|s| s.k < 0.0).count();
    let cache = match outcome {
        CacheOutcome::Hit => "reused",
        CacheOutcome::Missing => "computed",
        CacheOutcome::Stale => "recomputed",
    };
    println!("{} pairs ({cache}); K < 0 for {neg}", stats.len());
    Ok(())
}

struct Prepared {
    reference: TinyLm,
    train: Vec<PreferencePair>,
    eval: Vec<PreferencePair>,
    train_stats: Vec<PairStats>,
    eval_stats: Vec<PairStats>,
}

fn prepare(cli: &Cli, t: &TrainArgs) -> Result<Prepared, CliError> {
    let reference = load_model(&t.checkpoint)?;
    let data = read_jsonl(&t.data)?;
    let (train, eval) = match &t.eval {
        Some(path) => (data, read_jsonl(path)?),
        None => split(&data, t.eval_fraction, cli.seed)?,
    };
    prepare_dir(&t.out)?;
    let (train_stats, _) = precompute_pair_stats_cached(&reference, &train, t.out.join("train_stats.jsonl"))?;
    let (eval_stats, _) = precompute_pair_stats_cached(&reference, &eval, t.out.join("eval_stats.jsonl"))?;
    Ok(Prepared {
        reference,
        train,
        eval,
        train_stats,
        eval_stats,
    })
}

fn align(cli: &Cli, a: &AlignArgs) -> Result<(), CliError> {
    let config = a.train.config(a.beta, cli.seed);
    config.validate()?;
    let p = prepare(cli, &a.train)?;
    write_run_config(&a.train.out, cli, config)?;
    let out = train_align(
        &p.reference,
        &p.train,
        &p.train_stats,
        &config,
        Some((&p.eval, &p.eval_stats)),
    )?;
    save_checkpoint(&out.policy, a.train.out.join("policy.ckpt")).map_err(user)?;
    out.log.write_csvs(&a.train.out)?;
    println!(
        "{} beta={}: {} steps, mean loss {} (first epoch {}), eval margin {}",
        config.method.label(),
        config.beta,
        out.log.steps.len(),
        out.log.final_epoch_mean_loss(),
        out.log.first_epoch_mean_loss(),
        out.log.final_eval_mean_margin()
    );
    Ok(())
}

/// `(pair id, K)` per pair plus before/after margins.
pub type EvalLog = (Vec<(String, f64)>, Vec<PolicyMargin>, Vec<PolicyMargin>);

/// Parses an `eval.csv` into reference stats keyed by the K column and
/// before/after margins from its first and last epochs.
pub fn read_eval_log(text: &str) -> Result<EvalLog, CliError> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim_end_matches('\r') == crate::trainer::EVAL_CSV_HEADER => {}
        _ => return Err(user("eval log: missing or unexpected header")),
    }
    let mut rows: Vec<(usize, String, f64, f64)> = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line.trim_end_matches('\r');
        if line.is_empty() {
            continue;
        }
        let bad = || user(format!("eval log line {}: malformed row", i + 2));
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 4 {
            return Err(bad());
        }
        rows.push((
            cols[0].parse().map_err(|_| bad())?,
            cols[1].to_string(),
            cols[2].parse().map_err(|_| bad())?,
            cols[3].parse().map_err(|_| bad())?,
        ));
    }
    let last = rows.iter().map(|r| r.0).max().ok_or_else(|| user("eval log has no rows"))?;
    let first = rows.iter().map(|r| r.0).min().expect("non-empty");
    let pick = |epoch| {
        rows.iter()
            .filter(|r| r.0 == epoch)
            .map(|r| PolicyMargin {
                pair_id: r.1.clone(),
                margin: r.3,
            })
            .collect::<Vec<_>>()
    };
    let ks = rows
        .iter()
        .filter(|r| r.0 == first)
        .map(|r| (r.1.clone(), r.2))
        .collect();
    Ok((ks, pick(first), pick(last)))
}

fn analyze(a: &AnalyzeKArgs) -> Result<(), CliError> {
    let text = fs::read_to_string(&a.eval_log).map_err(|e| user(format!("{}: {e}", a.eval_log.display())))?;
    let (ks, before, after) = read_eval_log(&text)?;
    let reference: Vec<PairStats> = match &a.stats {
        Some(path) => read_stats_jsonl(path)?.into_iter().map(|(_, s)| s).collect(),
        None => ks
            .into_iter()
            .map(|(id, k)| PairStats {
                id,
                ref_w: crate::tinylm::SequenceLogLik::new(k, 1).expect("n = 1"),
                ref_l: crate::tinylm::SequenceLogLik::new(0.0, 1).expect("n = 1"),
                k,
            })
            .collect(),
    };
    let reports = analyze_k(&before, &after, &reference)?;
    if let Some(dir) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        prepare_dir(dir)?;
    }
    write(&a.out, buckets_csv(&reports))?;
    for r in &reports {
        println!(
            "{:<9} n={:<5} mean K {:>9.4}  margin {:>9.4} -> {:>9.4}  delta {:>+9.4}",
            r.bucket.label(),
            r.n,
            r.mean_k,
            r.mean_margin_before,
            r.mean_margin_after,
            r.delta
        );
    }
    Ok(())
}

fn sweep(cli: &Cli, a: &SweepArgs) -> Result<(), CliError> {
    let base = a.train.config(a.betas.first().copied().unwrap_or(1.0), cli.seed);
    base.validate()?;
    let p = prepare(cli, &a.train)?;
    write_run_config(&a.train.out, cli, base)?;
    let runs = sweep_beta(
        &p.reference,
        &p.train,
        &p.train_stats,
        (&p.eval, &p.eval_stats),
        &base,
        &a.betas,
    )?;
    for run in &runs {
        let dir = a.train.out.join(format!("beta_{}", run.row.beta));
        prepare_dir(&dir)?;
        if let Some(out) = &run.outcome {
            save_checkpoint(&out.policy, dir.join("policy.ckpt")).map_err(user)?;
            out.log.write_csvs(&dir)?;
        }
        let r = &run.row;
        match &run.error {
            None => println!(
                "beta {:>6}: first-epoch loss {:.6}, final loss {:.6}, eval margin {:.6}",
                r.beta, r.first_epoch_mean_loss, r.final_mean_loss, r.mean_eval_margin
            ),
            Some(e) => println!("beta {:>6}: diverged ({e})", r.beta),
        }
    }
    let rows: Vec<_> = runs.iter().map(|r| r.row.clone()).collect();
    write(&a.train.out.join("sweep.csv"), sweep_csv(&rows))?;
    if rows.iter().any(|r| r.diverged) {
        return Err(CliError::Numerical("one or more β runs diverged".into()));
    }
    Ok(())
}

fn curve(a: &LosscurveArgs) -> Result<(), CliError> {
    if a.f_points == 0 {
        return Err(user("empty grid: --f-points must be >= 1"));
    }
    let rows = losscurve(a.beta, &a.ks, &linspace(a.f_min, a.f_max, a.f_points))?;
    if let Some(dir) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        prepare_dir(dir)?;
    }
    write(&a.out, losscurve_csv(&rows))?;
    println!("wrote {} rows to {}", rows.len(), a.out.display());
    Ok(())
}

fn gradcheck(cli: &Cli, a: &GradcheckArgs) -> Result<(), CliError> {
    if a.seeds == 0 || a.coords == 0 {
        return Err(user("--seeds and --coords must be >= 1"));
    }
    let mut worst: f64 = 0.0;
    for seed in cli.seed..cli.seed + a.seeds {
        let r = lm_gradcheck(a.model.config(seed), a.method, a.beta, seed, a.coords, a.h)?;
        println!(
            "seed {seed}: max relative error {:.3e} at {}[{}]",
            r.max_relative_error, r.worst.0, r.worst.1
        );
        worst = worst.max(r.max_relative_error);
    }
    println!("max relative error {worst:.3e} (tolerance {GRADCHECK_TOLERANCE:.0e})");
    if worst < GRADCHECK_TOLERANCE {
        Ok(())
    } else {
        Err(CliError::Numerical(format!(
            "gradient check failed: {worst:.3e} >= {GRADCHECK_TOLERANCE:.0e}"
        )))
    }
}
