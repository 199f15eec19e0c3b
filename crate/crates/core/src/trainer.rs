//! Supervised fine-tuning of the reference model and preference alignment of
//! the policy.
//!
//! Both loops are single-threaded and fully seeded: the same inputs give
//! bit-identical parameters and logs.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use log::warn;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{DataError, PreferencePair};
use crate::diffcore::{DiffError, Graph, Var};
use crate::objectives::{
    dpo_loss_var, mipo_loss_var, simpo_loss_var, ObjectiveError, PairStats,
};
use crate::tinylm::{checkpoint_hash, CheckpointError, ModelError, ModelParams, TinyLm, Vocab};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training diverged at step {step}: {reason}")]
    Divergence { step: usize, reason: String },
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("pair statistics missing for ids: {}", .0.join(", "))]
    MissingStats(Vec<String>),
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("pair {id}: {source}")]
    Encode { id: String, source: ModelError },
    #[error("reference parameters changed during alignment")]
    ReferenceModified,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Graph(#[from] DiffError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

impl TrainError {
    /// Failures caused by numerics rather than by the caller's inputs.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            TrainError::Divergence { .. }
                | TrainError::Graph(DiffError::NonFinite { .. })
                | TrainError::Model(ModelError::Graph(DiffError::NonFinite { .. }))
        )
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TrainError + '_ {
    move |source| TrainError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Adam with linear learning-rate warmup.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub warmup: usize,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(params: &ModelParams, lr: f64, warmup: usize) -> Self {
        let zeros: Vec<Vec<f64>> = params.iter().map(|(_, t)| vec![0.0; t.len()]).collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            warmup,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn current_lr(&self) -> f64 {
        if self.warmup == 0 {
            self.lr
        } else {
            self.lr * ((self.t + 1) as f64 / self.warmup as f64).min(1.0)
        }
    }

    /// Applies one update from the gradients stored in `params`.
    pub fn step(&mut self, params: &mut ModelParams) {
        let lr = self.current_lr();
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, (_, p)) in params.iter_mut().enumerate() {
            let Some(g) = p.grad().map(|g| g.to_vec()) else { continue };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, w) in p.values_mut().iter_mut().enumerate() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                let mh = m[j] / bc1;
                let vh = v[j] / bc2;
                *w -= lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }
}

/// Token ids for one pair, specials excluded.
#[derive(Debug, Clone)]
pub struct EncodedPair {
    pub id: String,
    pub prompt: Vec<usize>,
    pub chosen: Vec<usize>,
    pub rejected: Vec<usize>,
}

pub fn encode_pairs(pairs: &[PreferencePair], context_len: usize) -> Result<Vec<EncodedPair>, TrainError> {
    let vocab = Vocab::standard();
    pairs
        .iter()
        .map(|p| {
            let enc = |s: &str| {
                vocab.encode_plain(s).map_err(|source| TrainError::Encode {
                    id: p.id.clone(),
                    source,
                })
            };
            let e = EncodedPair {
                id: p.id.clone(),
                prompt: enc(&p.prompt)?,
                chosen: enc(&p.chosen)?,
                rejected: enc(&p.rejected)?,
            };
            let longest = e.prompt.len() + e.chosen.len().max(e.rejected.len()) + 3;
            if longest > context_len {
                return Err(TrainError::Encode {
                    id: p.id.clone(),
                    source: ModelError::TooLong {
                        len: longest,
                        max: context_len,
                    },
                });
            }
            Ok(e)
        })
        .collect()
}

/// Epoch-shuffled index stream.
struct BatchSampler {
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl BatchSampler {
    fn new(n: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        Self { order, pos: 0, rng }
    }

    fn next_batch(&mut self, size: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(size);
        while out.len() < size {
            if self.pos == self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.pos = 0;
            }
            let take = (size - out.len()).min(self.order.len() - self.pos);
            out.extend_from_slice(&self.order[self.pos..self.pos + take]);
            self.pos += take;
        }
        out
    }
}

fn grad_norm(params: &ModelParams) -> f64 {
    params
        .iter()
        .filter_map(|(_, t)| t.grad())
        .flat_map(|g| g.iter())
        .map(|g| g * g)
        .sum::<f64>()
        .sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SftConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup: usize,
    pub seed: u64,
}

impl Default for SftConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 16,
            lr: 3e-4,
            warmup: 10,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct SftReport {
    /// Batch loss before each optimizer step.
    pub losses: Vec<f64>,
}

impl SftReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,loss\n");
        for (i, l) in self.losses.iter().enumerate() {
            out.push_str(&format!("{i},{l}\n"));
        }
        out
    }
}

/// Cross-entropy training on `(prompt, chosen)`; updates `model` in place.
pub fn train_sft(model: &mut TinyLm, corpus: &[PreferencePair], config: &SftConfig) -> Result<SftReport, TrainError> {
    if corpus.is_empty() {
        return Err(TrainError::EmptyCorpus);
    }
    if config.batch_size == 0 {
        return Err(TrainError::InvalidConfig("batch_size must be positive".into()));
    }
    let encoded = encode_pairs(corpus, model.config.context_len)?;
    let examples: Vec<(Vec<usize>, Vec<usize>)> = encoded
        .into_iter()
        .map(|e| (e.prompt, e.chosen))
        .collect();
    let mut sampler = BatchSampler::new(examples.len(), config.seed);
    let mut adam = Adam::new(&model.params, config.lr, config.warmup);
    let mut report = SftReport::default();

    for step in 0..config.steps {
        let batch: Vec<(Vec<usize>, Vec<usize>)> = sampler
            .next_batch(config.batch_size)
            .into_iter()
            .map(|i| examples[i].clone())
            .collect();
        let mut g = Graph::new();
        let bound = model.bind(&mut g, true);
        let loss = model.sft_loss(&mut g, &bound, &batch)?;
        let value = g.scalar(loss);
        if !value.is_finite() || g.non_finite_op().is_some() {
            return Err(TrainError::Divergence {
                step,
                reason: format!("loss is {value}"),
            });
        }
        let grads = g.backward(loss).map_err(|e| TrainError::Divergence {
            step,
            reason: e.to_string(),
        })?;
        model.params.zero_grad();
        model.absorb_grads(&bound, &grads)?;
        adam.step(&mut model.params);
        report.losses.push(value);
    }
    Ok(report)
}

/// Reference statistics for every pair, evaluated without gradient tracking.
pub fn precompute_pair_stats(reference: &TinyLm, pairs: &[PreferencePair]) -> Result<Vec<PairStats>, TrainError> {
    let encoded = encode_pairs(pairs, reference.config.context_len)?;
    encoded
        .iter()
        .map(|e| {
            let w = reference.sequence_loglik(&e.prompt, &e.chosen)?;
            let l = reference.sequence_loglik(&e.prompt, &e.rejected)?;
            Ok(PairStats::new(e.id.clone(), w, l))
        })
        .collect()
}

#[derive(Debug, Serialize, Deserialize)]
struct CachedStats {
    checkpoint: String,
    #[serde(flatten)]
    stats: PairStats,
}

/// How a stats sidecar was used.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CacheOutcome {
    Hit,
    Missing,
    Stale,
}

pub fn stats_to_jsonl(checkpoint: &str, stats: &[PairStats]) -> String {
    let mut out = String::new();
    for s in stats {
        let rec = CachedStats {
            checkpoint: checkpoint.to_string(),
            stats: s.clone(),
        };
        out.push_str(&serde_json::to_string(&rec).expect("stats serialize"));
        out.push('\n');
    }
    out
}

/// Reads a stats sidecar, returning `(checkpoint hash, stats)` per line.
pub fn read_stats_jsonl(path: impl AsRef<Path>) -> Result<Vec<(String, PairStats)>, TrainError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let rec: CachedStats = serde_json::from_str(line).map_err(|e| {
            TrainError::Data(DataError::Malformed {
                line: i + 1,
                msg: e.to_string(),
            })
        })?;
        out.push((rec.checkpoint, rec.stats));
    }
    Ok(out)
}

/// [`precompute_pair_stats`] backed by a JSONL sidecar keyed by
/// `(checkpoint hash, pair id)`. A stale or incomplete cache is recomputed
/// and rewritten.
pub fn precompute_pair_stats_cached(
    reference: &TinyLm,
    pairs: &[PreferencePair],
    cache: impl AsRef<Path>,
) -> Result<(Vec<PairStats>, CacheOutcome), TrainError> {
    let cache = cache.as_ref();
    let hash = checkpoint_hash(reference);
    let mut outcome = CacheOutcome::Missing;
    if cache.exists() {
        match read_stats_jsonl(cache) {
            Ok(entries) => {
                if entries.iter().any(|(h, _)| h != &hash) {
                    warn!(
                        "stats cache {} was built from a different checkpoint; recomputing",
                        cache.display()
                    );
                    outcome = CacheOutcome::Stale;
                } else {
                    let by_id: HashMap<&str, &PairStats> =
                        entries.iter().map(|(_, s)| (s.id.as_str(), s)).collect();
                    let found: Option<Vec<PairStats>> = pairs
                        .iter()
                        .map(|p| by_id.get(p.id.as_str()).map(|s| (*s).clone()))
                        .collect();
                    if let Some(stats) = found {
                        return Ok((stats, CacheOutcome::Hit));
                    }
                }
            }
            Err(e) => {
                warn!("unreadable stats cache {}: {e}; recomputing", cache.display());
                outcome = CacheOutcome::Stale;
            }
        }
    }
    let stats = precompute_pair_stats(reference, pairs)?;
    fs::write(cache, stats_to_jsonl(&hash, &stats)).map_err(io_err(cache))?;
    Ok((stats, outcome))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Mipo,
    Dpo,
    Simpo,
}

impl Method {
    pub fn label(self) -> &'static str {
        match self {
            Method::Mipo => "mipo",
            Method::Dpo => "dpo",
            Method::Simpo => "simpo",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlignConfig {
    pub method: Method,
    pub beta: f64,
    /// SimPO margin; only valid with [`Method::Simpo`].
    pub gamma: Option<f64>,
    pub lr: f64,
    pub epochs: usize,
    /// Total optimizer steps; `None` runs `epochs` full passes.
    pub steps: Option<usize>,
    pub batch_size: usize,
    pub warmup: usize,
    pub seed: u64,
    pub grad_norm_ceiling: f64,
}

impl Default for AlignConfig {
    fn default() -> Self {
        Self {
            method: Method::Mipo,
            beta: 10.0,
            gamma: None,
            lr: 1e-5,
            epochs: 1,
            steps: None,
            batch_size: 16,
            warmup: 10,
            seed: 0,
            grad_norm_ceiling: 1e3,
        }
    }
}

impl AlignConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.to_string()));
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return bad("beta must be > 0");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("learning rate must be > 0");
        }
        if self.epochs == 0 {
            return bad("epochs must be >= 1");
        }
        if self.steps == Some(0) {
            return bad("steps must be >= 1");
        }
        if self.batch_size == 0 {
            return bad("batch size must be >= 1");
        }
        match (self.method, self.gamma) {
            (Method::Simpo, Some(g)) if !(g >= 0.0 && g.is_finite()) => bad("gamma must be >= 0"),
            (Method::Mipo | Method::Dpo, Some(_)) => bad("gamma is only valid with method simpo"),
            _ => Ok(()),
        }
    }

    pub fn steps_per_epoch(&self, n_train: usize) -> usize {
        n_train.div_ceil(self.batch_size).max(1)
    }

    pub fn total_steps(&self, n_train: usize) -> usize {
        self.steps
            .unwrap_or(self.epochs * self.steps_per_epoch(n_train))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub mean_loss: f64,
    pub mean_f_theta: f64,
    pub mean_dpo_margin: f64,
    pub grad_norm: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalRecord {
    /// 0 is the policy before any update.
    pub epoch: usize,
    pub pair_id: String,
    pub k: f64,
    pub policy_margin: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub steps_per_epoch: usize,
    pub steps: Vec<StepRecord>,
    pub eval: Vec<EvalRecord>,
}

pub const STEP_CSV_HEADER: &str = "step,mean_loss,mean_f_theta,mean_dpo_margin,grad_norm";
pub const EVAL_CSV_HEADER: &str = "epoch,pair_id,k,policy_margin";

impl TrainLog {
    pub fn steps_csv(&self) -> String {
        let mut out = format!("{STEP_CSV_HEADER}\n");
        for r in &self.steps {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                r.step, r.mean_loss, r.mean_f_theta, r.mean_dpo_margin, r.grad_norm
            ));
        }
        out
    }

    pub fn eval_csv(&self) -> String {
        let mut out = format!("{EVAL_CSV_HEADER}\n");
        for r in &self.eval {
            out.push_str(&format!("{},{},{},{}\n", r.epoch, r.pair_id, r.k, r.policy_margin));
        }
        out
    }

    pub fn write_csvs(&self, dir: impl AsRef<Path>) -> Result<(), TrainError> {
        let dir = dir.as_ref();
        let steps = dir.join("steps.csv");
        fs::write(&steps, self.steps_csv()).map_err(io_err(&steps))?;
        let eval = dir.join("eval.csv");
        fs::write(&eval, self.eval_csv()).map_err(io_err(&eval))?;
        Ok(())
    }

    fn epoch_losses(&self, epoch: usize) -> impl Iterator<Item = f64> + '_ {
        let per = self.steps_per_epoch.max(1);
        self.steps
            .iter()
            .filter(move |r| r.step / per == epoch)
            .map(|r| r.mean_loss)
    }

    fn mean(it: impl Iterator<Item = f64>) -> f64 {
        let (s, n) = it.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
        if n == 0 {
            f64::NAN
        } else {
            s / n as f64
        }
    }

    pub fn first_epoch_mean_loss(&self) -> f64 {
        Self::mean(self.epoch_losses(0))
    }

    /// Mean step loss over the last (possibly partial) epoch.
    pub fn final_epoch_mean_loss(&self) -> f64 {
        match self.steps.last() {
            Some(last) => Self::mean(self.epoch_losses(last.step / self.steps_per_epoch.max(1))),
            None => f64::NAN,
        }
    }

    pub fn last_eval_epoch(&self) -> Option<usize> {
        self.eval.iter().map(|r| r.epoch).max()
    }

    pub fn eval_at(&self, epoch: usize) -> Vec<&EvalRecord> {
        self.eval.iter().filter(|r| r.epoch == epoch).collect()
    }

    pub fn final_eval_mean_margin(&self) -> f64 {
        match self.last_eval_epoch() {
            Some(e) => Self::mean(self.eval_at(e).into_iter().map(|r| r.policy_margin)),
            None => f64::NAN,
        }
    }
}

#[derive(Debug, Clone)]
pub struct AlignOutcome {
    pub policy: TinyLm,
    pub log: TrainLog,
}

fn stats_for<'a>(pairs: &[EncodedPair], stats: &'a [PairStats]) -> Result<Vec<&'a PairStats>, TrainError> {
    let by_id: HashMap<&str, &PairStats> = stats.iter().map(|s| (s.id.as_str(), s)).collect();
    let mut missing = Vec::new();
    let found: Vec<&PairStats> = pairs
        .iter()
        .filter_map(|p| {
            let s = by_id.get(p.id.as_str()).copied();
            if s.is_none() {
                missing.push(p.id.clone());
            }
            s
        })
        .collect();
    if missing.is_empty() {
        Ok(found)
    } else {
        Err(TrainError::MissingStats(missing))
    }
}

/// Policy average-log-likelihood margin `f` for each pair.
pub fn policy_margins(policy: &TinyLm, pairs: &[EncodedPair]) -> Result<Vec<f64>, TrainError> {
    pairs
        .iter()
        .map(|e| {
            let w = policy.sequence_loglik(&e.prompt, &e.chosen)?;
            let l = policy.sequence_loglik(&e.prompt, &e.rejected)?;
            Ok(w.avg_logp - l.avg_logp)
        })
        .collect()
}

/// Per-pair differentiable loss plus the logged `f` and DPO margin values.
struct PairTerms {
    loss: Var,
    f_theta: f64,
    dpo_margin: f64,
}

fn pair_terms(
    policy: &TinyLm,
    g: &mut Graph,
    bound: &crate::tinylm::BoundParams,
    pair: &EncodedPair,
    stats: &PairStats,
    config: &AlignConfig,
) -> Result<PairTerms, TrainError> {
    let (sum_w, avg_w, _) = policy.response_avg_logp(g, bound, &pair.prompt, &pair.chosen)?;
    let (sum_l, avg_l, _) = policy.response_avg_logp(g, bound, &pair.prompt, &pair.rejected)?;
    let f = g.sub(avg_w, avg_l)?;
    let loss = match config.method {
        Method::Mipo => mipo_loss_var(g, f, stats.k, config.beta)?,
        Method::Dpo => dpo_loss_var(
            g,
            sum_w,
            sum_l,
            stats.ref_w.sum_logp,
            stats.ref_l.sum_logp,
            config.beta,
        )?,
        Method::Simpo => simpo_loss_var(g, f, config.beta, config.gamma.unwrap_or(0.0))?,
    };
    let dpo_margin = (g.scalar(sum_w) - stats.ref_w.sum_logp) - (g.scalar(sum_l) - stats.ref_l.sum_logp);
    Ok(PairTerms {
        loss,
        f_theta: g.scalar(f),
        dpo_margin,
    })
}

/// Batch-mean preference loss of `policy` on `batch` with its gradient graph.
/// Returns `(graph, bound params, loss node, mean f, mean DPO margin)`.
#[allow(clippy::type_complexity)]
pub fn batch_loss(
    policy: &TinyLm,
    batch: &[(&EncodedPair, &PairStats)],
    config: &AlignConfig,
) -> Result<(Graph, crate::tinylm::BoundParams, Var, f64, f64), TrainError> {
    let mut g = Graph::new();
    let bound = policy.bind(&mut g, true);
    let mut losses = Vec::with_capacity(batch.len());
    let (mut f_sum, mut m_sum) = (0.0, 0.0);
    for (pair, stats) in batch {
        let t = pair_terms(policy, &mut g, &bound, pair, stats, config)?;
        losses.push(t.loss);
        f_sum += t.f_theta;
        m_sum += t.dpo_margin;
    }
    let stacked = g.stack(&losses)?;
    let loss = g.mean(stacked);
    let n = batch.len() as f64;
    Ok((g, bound, loss, f_sum / n, m_sum / n))
}

/// Preference alignment starting from a copy of `reference`.
///
/// `stats` must cover every training pair (and `eval` its own pairs). The
/// reference is only read; its fingerprint is checked before returning.
pub fn train_align(
    reference: &TinyLm,
    train: &[PreferencePair],
    stats: &[PairStats],
    config: &AlignConfig,
    eval: Option<(&[PreferencePair], &[PairStats])>,
) -> Result<AlignOutcome, TrainError> {
    config.validate()?;
    if train.is_empty() {
        return Err(TrainError::EmptyCorpus);
    }
    let ref_fp = reference.params.fingerprint();
    let ctx = reference.config.context_len;
    let train_enc = encode_pairs(train, ctx)?;
    let train_stats = stats_for(&train_enc, stats)?;
    let eval_data = match eval {
        Some((pairs, st)) => {
            let enc = encode_pairs(pairs, ctx)?;
            let s: Vec<PairStats> = stats_for(&enc, st)?.into_iter().cloned().collect();
            Some((enc, s))
        }
        None => None,
    };

    let mut policy = reference.clone();
    let steps_per_epoch = config.steps_per_epoch(train_enc.len());
    let total = config.total_steps(train_enc.len());
    let mut log = TrainLog {
        steps_per_epoch,
        ..TrainLog::default()
    };
    let record_eval = |policy: &TinyLm, epoch: usize, log: &mut TrainLog| -> Result<(), TrainError> {
        if let Some((enc, st)) = &eval_data {
            for (m, (e, s)) in policy_margins(policy, enc)?.into_iter().zip(enc.iter().zip(st)) {
                log.eval.push(EvalRecord {
                    epoch,
                    pair_id: e.id.clone(),
                    k: s.k,
                    policy_margin: m,
                });
            }
        }
        Ok(())
    };
    record_eval(&policy, 0, &mut log)?;

    let mut sampler = BatchSampler::new(train_enc.len(), config.seed);
    let mut adam = Adam::new(&policy.params, config.lr, config.warmup);
    for step in 0..total {
        let batch: Vec<(&EncodedPair, &PairStats)> = sampler
            .next_batch(config.batch_size.min(train_enc.len()))
            .into_iter()
            .map(|i| (&train_enc[i], train_stats[i]))
            .collect();
        let (g, bound, loss, mean_f, mean_margin) = batch_loss(&policy, &batch, config)?;
        let value = g.scalar(loss);
        if !value.is_finite() || g.non_finite_op().is_some() {
            return Err(TrainError::Divergence {
                step,
                reason: format!("loss is {value}"),
            });
        }
        let grads = g.backward(loss).map_err(|e| TrainError::Divergence {
            step,
            reason: e.to_string(),
        })?;
        policy.params.zero_grad();
        policy.absorb_grads(&bound, &grads)?;
        let norm = grad_norm(&policy.params);
        if !norm.is_finite() || norm > config.grad_norm_ceiling {
            return Err(TrainError::Divergence {
                step,
                reason: format!(
                    "gradient norm {norm} exceeds ceiling {}",
                    config.grad_norm_ceiling
                ),
            });
        }
        adam.step(&mut policy.params);
        log.steps.push(StepRecord {
            step,
            mean_loss: value,
            mean_f_theta: mean_f,
            mean_dpo_margin: mean_margin,
            grad_norm: norm,
        });
        let done = step + 1;
        if done % steps_per_epoch == 0 || done == total {
            record_eval(&policy, done.div_ceil(steps_per_epoch), &mut log)?;
        }
    }

    if reference.params.fingerprint() != ref_fp {
        return Err(TrainError::ReferenceModified);
    }
    Ok(AlignOutcome { policy, log })
}
