//! K-bucket dynamics, β sweeps and loss-curve tables, all emitted as CSV.
//!
//! CSV numbers use Rust's shortest round-trip `Display` form, which is
//! locale independent and parses back to the identical `f64`.

use std::collections::{BTreeSet, HashMap};

use log::warn;
use thiserror::Error;

use crate::diffcore::gradcheck::relative_error;
use crate::data::{generate_corpus, split, CorpusSpec, PreferencePair};
use crate::objectives::{mipo_loss, mipo_loss_modulated, Modulator, ObjectiveError, PairStats};
use crate::tinylm::{ModelConfig, TinyLm};
use crate::trainer::{
    batch_loss, encode_pairs, precompute_pair_stats, train_align, train_sft, AlignConfig, AlignOutcome, Method, SftConfig,
    TrainError, TrainLog,
};

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("pair ids differ between inputs; missing: {}", .0.join(", "))]
    IdMismatch(Vec<String>),
    #[error("empty evaluation set")]
    Empty,
    #[error("empty grid: {0}")]
    EmptyGrid(&'static str),
    #[error("non-finite input: {0}")]
    NonFinite(&'static str),
    #[error("no betas requested")]
    NoBetas,
    #[error("training log has no evaluation records")]
    NoEval,
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Train(#[from] TrainError),
}

/// Policy average-log-likelihood margin for one pair at one point in training.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyMargin {
    pub pair_id: String,
    pub margin: f64,
}

/// Before/after margins from the first and last eval epochs of a log.
pub fn margins_from_log(log: &TrainLog) -> Result<(Vec<PolicyMargin>, Vec<PolicyMargin>), AnalysisError> {
    let last = log.last_eval_epoch().ok_or(AnalysisError::NoEval)?;
    let take = |epoch| {
        log.eval_at(epoch)
            .into_iter()
            .map(|r| PolicyMargin {
                pair_id: r.pair_id.clone(),
                margin: r.policy_margin,
            })
            .collect::<Vec<_>>()
    };
    Ok((take(0), take(last)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Bucket {
    Bottom20,
    Middle60,
    Top20,
}

impl Bucket {
    pub fn label(self) -> &'static str {
        match self {
            Bucket::Bottom20 => "bottom20",
            Bucket::Middle60 => "middle60",
            Bucket::Top20 => "top20",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BucketReport {
    pub bucket: Bucket,
    pub n: usize,
    pub mean_k: f64,
    pub mean_margin_before: f64,
    pub mean_margin_after: f64,
    /// Mean over pairs of `after - before`.
    pub delta: f64,
}

pub const BUCKET_CSV_HEADER: &str = "bucket,n,mean_k,mean_margin_before,mean_margin_after,delta";

pub fn buckets_csv(reports: &[BucketReport]) -> String {
    let mut out = format!("{BUCKET_CSV_HEADER}\n");
    for r in reports {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.bucket.label(),
            r.n,
            r.mean_k,
            r.mean_margin_before,
            r.mean_margin_after,
            r.delta
        ));
    }
    out
}

/// Assigns each pair to a bucket by ascending reference K, ties broken by
/// pair id. Returns ids in sorted order with their bucket.
pub fn assign_buckets(reference: &[PairStats]) -> Vec<(&str, Bucket)> {
    let mut order: Vec<&PairStats> = reference.iter().collect();
    order.sort_by(|a, b| a.k.total_cmp(&b.k).then_with(|| a.id.cmp(&b.id)));
    let n = order.len();
    let tail = n / 5;
    order
        .into_iter()
        .enumerate()
        .map(|(i, s)| {
            let b = if i < tail {
                Bucket::Bottom20
            } else if i >= n - tail {
                Bucket::Top20
            } else {
                Bucket::Middle60
            };
            (s.id.as_str(), b)
        })
        .collect()
}

fn index_margins<'a>(
    name: &str,
    margins: &'a [PolicyMargin],
    ids: &BTreeSet<&str>,
    missing: &mut Vec<String>,
) -> HashMap<&'a str, f64> {
    let map: HashMap<&str, f64> = margins
        .iter()
        .map(|m| (m.pair_id.as_str(), m.margin))
        .collect();
    for id in ids {
        if !map.contains_key(id) {
            missing.push(format!("{id} ({name})"));
        }
    }
    for id in map.keys() {
        if !ids.contains(id) {
            missing.push(format!("{id} (reference)"));
        }
    }
    map
}

/// Per-bucket mean margins before and after training.
pub fn analyze_k(
    before: &[PolicyMargin],
    after: &[PolicyMargin],
    reference: &[PairStats],
) -> Result<Vec<BucketReport>, AnalysisError> {
    if reference.is_empty() {
        return Err(AnalysisError::Empty);
    }
    let ids: BTreeSet<&str> = reference.iter().map(|s| s.id.as_str()).collect();
    let mut missing = Vec::new();
    let b = index_margins("before", before, &ids, &mut missing);
    let a = index_margins("after", after, &ids, &mut missing);
    if !missing.is_empty() || before.len() != ids.len() || after.len() != ids.len() {
        missing.sort();
        missing.dedup();
        return Err(AnalysisError::IdMismatch(missing));
    }
    let k_of: HashMap<&str, f64> = reference.iter().map(|s| (s.id.as_str(), s.k)).collect();

    let mut acc: [(usize, f64, f64, f64, f64); 3] = [(0, 0.0, 0.0, 0.0, 0.0); 3];
    for (id, bucket) in assign_buckets(reference) {
        let slot = &mut acc[bucket as usize];
        slot.0 += 1;
        slot.1 += k_of[id];
        slot.2 += b[id];
        slot.3 += a[id];
        slot.4 += a[id] - b[id];
    }
    Ok([Bucket::Bottom20, Bucket::Middle60, Bucket::Top20]
        .into_iter()
        .zip(acc)
        .map(|(bucket, (n, k, mb, ma, d))| {
            let m = |x: f64| if n == 0 { f64::NAN } else { x / n as f64 };
            BucketReport {
                bucket,
                n,
                mean_k: m(k),
                mean_margin_before: m(mb),
                mean_margin_after: m(ma),
                delta: m(d),
            }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossCurveRow {
    pub f: f64,
    pub k: f64,
    pub variant: &'static str,
    pub loss: f64,
}

pub const LOSSCURVE_CSV_HEADER: &str = "f,k,variant,loss";

/// Label of the rows evaluated at `f = K` (policy equal to the reference).
pub const AT_INIT_VARIANT: &str = "mipo_at_init";

/// Loss table over `fs × ks` for the modulated loss and the two fixed-offset
/// variants (`q = K`, `q = 0`), plus one row per K at `f = K`.
pub fn losscurve(beta: f64, ks: &[f64], fs: &[f64]) -> Result<Vec<LossCurveRow>, AnalysisError> {
    if ks.is_empty() {
        return Err(AnalysisError::EmptyGrid("no K values"));
    }
    if fs.is_empty() {
        return Err(AnalysisError::EmptyGrid("no f values"));
    }
    if ks.iter().chain(fs).any(|x| !x.is_finite()) {
        return Err(AnalysisError::NonFinite("losscurve grid"));
    }
    let mut rows = Vec::with_capacity(ks.len() * (3 * fs.len() + 1));
    for &k in ks {
        for m in [Modulator::Softplus, Modulator::Identity, Modulator::Zero] {
            for &f in fs {
                rows.push(LossCurveRow {
                    f,
                    k,
                    variant: m.label(),
                    loss: mipo_loss_modulated(f, k, beta, m)?.loss,
                });
            }
        }
        rows.push(LossCurveRow {
            f: k,
            k,
            variant: AT_INIT_VARIANT,
            loss: mipo_loss(k, k, beta)?.loss,
        });
    }
    Ok(rows)
}

pub fn losscurve_csv(rows: &[LossCurveRow]) -> String {
    let mut out = format!("{LOSSCURVE_CSV_HEADER}\n");
    for r in rows {
        out.push_str(&format!("{},{},{},{}\n", r.f, r.k, r.variant, r.loss));
    }
    out
}

/// `n` evenly spaced points from `lo` to `hi` inclusive.
pub fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => vec![],
        1 => vec![lo],
        _ => (0..n)
            .map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64)
            .collect(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub beta: f64,
    pub first_epoch_mean_loss: f64,
    pub final_mean_loss: f64,
    pub mean_eval_margin: f64,
    pub diverged: bool,
}

pub const SWEEP_CSV_HEADER: &str = "beta,first_epoch_mean_loss,final_mean_loss,mean_eval_margin,diverged";

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = format!("{SWEEP_CSV_HEADER}\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.beta, r.first_epoch_mean_loss, r.final_mean_loss, r.mean_eval_margin, r.diverged
        ));
    }
    out
}

#[derive(Debug)]
pub struct SweepRun {
    pub row: SweepRow,
    /// `None` when the run diverged.
    pub outcome: Option<AlignOutcome>,
    pub error: Option<TrainError>,
}

/// Drops repeated betas (first occurrence wins), warning for each.
pub fn dedup_betas(betas: &[f64]) -> Vec<f64> {
    let mut out: Vec<f64> = Vec::with_capacity(betas.len());
    for &b in betas {
        if out.iter().any(|x| x.to_bits() == b.to_bits()) {
            warn!("duplicate beta {b} ignored");
        } else {
            out.push(b);
        }
    }
    out
}

/// One alignment run per distinct β with everything else taken from `base`.
/// A numerical failure flags its row; configuration errors abort the sweep.
pub fn sweep_beta(
    reference: &TinyLm,
    train: &[PreferencePair],
    stats: &[PairStats],
    eval: (&[PreferencePair], &[PairStats]),
    base: &AlignConfig,
    betas: &[f64],
) -> Result<Vec<SweepRun>, AnalysisError> {
    if betas.is_empty() {
        return Err(AnalysisError::NoBetas);
    }
    let betas = dedup_betas(betas);
    for &beta in &betas {
        AlignConfig { beta, ..*base }.validate()?;
    }
    let mut runs = Vec::with_capacity(betas.len());
    for beta in betas {
        let config = AlignConfig { beta, ..*base };
        match train_align(reference, train, stats, &config, Some(eval)) {
            Ok(outcome) => {
                let log = &outcome.log;
                let row = SweepRow {
                    beta,
                    first_epoch_mean_loss: log.first_epoch_mean_loss(),
                    final_mean_loss: log.final_epoch_mean_loss(),
                    mean_eval_margin: log.final_eval_mean_margin(),
                    diverged: false,
                };
                runs.push(SweepRun {
                    row,
                    outcome: Some(outcome),
                    error: None,
                });
            }
            Err(e) if e.is_numerical() => {
                warn!("beta {beta} diverged: {e}");
                runs.push(SweepRun {
                    row: SweepRow {
                        beta,
                        first_epoch_mean_loss: f64::NAN,
                        final_mean_loss: f64::NAN,
                        mean_eval_margin: f64::NAN,
                        diverged: true,
                    },
                    outcome: None,
                    error: Some(e),
                });
            }
            Err(e) => return Err(e.into()),
        }
    }
    Ok(runs)
}

/// End-to-end MIPO versus DPO bucket comparison on a fresh synthetic corpus:
/// generate, split, SFT a reference, then align both methods from it with the
/// same seed, steps and learning rate.
#[derive(Debug, Clone, PartialEq)]
pub struct BucketExperiment {
    pub seed: u64,
    pub corpus: CorpusSpec,
    pub model: ModelConfig,
    pub sft: SftConfig,
    pub eval_fraction: f64,
    pub mipo_beta: f64,
    pub dpo_beta: f64,
    pub lr: f64,
    pub epochs: usize,
}

impl BucketExperiment {
    /// Settings used by the acceptance run and the `k_buckets` example.
    pub fn standard(seed: u64) -> Self {
        Self {
            seed,
            corpus: CorpusSpec {
                seed,
                ..CorpusSpec::default()
            },
            model: ModelConfig {
                seed,
                ..ModelConfig::default()
            },
            sft: SftConfig {
                seed,
                ..SftConfig::default()
            },
            eval_fraction: 0.2,
            mipo_beta: 10.0,
            dpo_beta: 0.3,
            lr: 3e-4,
            epochs: 5,
        }
    }

    pub fn align_config(&self, method: Method) -> AlignConfig {
        AlignConfig {
            method,
            beta: match method {
                Method::Dpo => self.dpo_beta,
                _ => self.mipo_beta,
            },
            lr: self.lr,
            epochs: self.epochs,
            seed: self.seed,
            ..AlignConfig::default()
        }
    }

    pub fn run(&self) -> Result<BucketComparison, AnalysisError> {
        let pairs = generate_corpus(&self.corpus).map_err(TrainError::from)?;
        let (train, eval) = split(&pairs, self.eval_fraction, self.seed).map_err(TrainError::from)?;
        let mut reference = TinyLm::new(self.model).map_err(TrainError::from)?;
        train_sft(&mut reference, &train, &self.sft)?;
        let train_stats = precompute_pair_stats(&reference, &train)?;
        let eval_stats = precompute_pair_stats(&reference, &eval)?;
        let run = |method| -> Result<Vec<BucketReport>, AnalysisError> {
            let out = train_align(
                &reference,
                &train,
                &train_stats,
                &self.align_config(method),
                Some((&eval, &eval_stats)),
            )?;
            let (before, after) = margins_from_log(&out.log)?;
            analyze_k(&before, &after, &eval_stats)
        };
        Ok(BucketComparison {
            mipo: run(Method::Mipo)?,
            dpo: run(Method::Dpo)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BucketComparison {
    pub mipo: Vec<BucketReport>,
    pub dpo: Vec<BucketReport>,
}

impl BucketComparison {
    fn delta(reports: &[BucketReport], bucket: Bucket) -> f64 {
        reports
            .iter()
            .find(|r| r.bucket == bucket)
            .map_or(f64::NAN, |r| r.delta)
    }

    /// `(mipo, dpo)` margin change for one bucket.
    pub fn deltas(&self, bucket: Bucket) -> (f64, f64) {
        (Self::delta(&self.mipo, bucket), Self::delta(&self.dpo, bucket))
    }

    /// MIPO gains more on the bottom bucket and less on the top bucket.
    pub fn direction_holds(&self) -> bool {
        let (mb, db) = self.deltas(Bucket::Bottom20);
        let (mt, dt) = self.deltas(Bucket::Top20);
        mb > db && mt < dt
    }
}

/// Gradient threshold used by the `gradcheck` command.
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub seed: u64,
    pub coords: usize,
    pub max_relative_error: f64,
    /// Parameter name and flat index of the worst coordinate.
    pub worst: (String, usize),
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.max_relative_error < GRADCHECK_TOLERANCE
    }
}

/// Compares the autodiff gradient of a batch-mean preference loss with
/// central finite differences at `n_coords` random parameter coordinates.
///
/// The policy and reference are independently initialized from `seed`, so K
/// and `f` differ per pair. The batch is a few pairs from a seeded corpus.
pub fn lm_gradcheck(
    model: ModelConfig,
    method: Method,
    beta: f64,
    seed: u64,
    n_coords: usize,
    h: f64,
) -> Result<GradcheckReport, AnalysisError> {
    use rand::{Rng, SeedableRng};

    let pairs = generate_corpus(&CorpusSpec {
        n_pairs: 4,
        seed,
        ..CorpusSpec::default()
    })
    .map_err(TrainError::from)?;
    let reference = TinyLm::new(ModelConfig { seed, ..model }).map_err(TrainError::from)?;
    let policy = TinyLm::new(ModelConfig {
        seed: seed ^ 0x9e37_79b9_7f4a_7c15,
        ..model
    })
    .map_err(TrainError::from)?;
    let stats = precompute_pair_stats(&reference, &pairs)?;
    let encoded = encode_pairs(&pairs, model.context_len)?;
    let batch: Vec<_> = encoded.iter().zip(stats.iter()).collect();
    let config = AlignConfig {
        method,
        beta,
        ..AlignConfig::default()
    };

    let (g, bound, loss, _, _) = batch_loss(&policy, &batch, &config)?;
    let grads = g.backward(loss).map_err(TrainError::from)?;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let total = policy.params.count();
    let sizes: Vec<usize> = policy.params.iter().map(|(_, t)| t.len()).collect();

    let mut worst = (0.0, String::new(), 0);
    let mut probe = policy.clone();
    for _ in 0..n_coords {
        let mut flat = rng.random_range(0..total);
        let mut ti = 0;
        while flat >= sizes[ti] {
            flat -= sizes[ti];
            ti += 1;
        }
        let analytic = grads.get(bound.vars()[ti]).map_or(0.0, |g| g[flat]);
        let mut eval = |delta: f64| -> Result<f64, AnalysisError> {
            let orig = probe.params.tensor(ti).values()[flat];
            probe.params.tensor_mut(ti).values_mut()[flat] = orig + delta;
            let (g, _, loss, _, _) = batch_loss(&probe, &batch, &config)?;
            probe.params.tensor_mut(ti).values_mut()[flat] = orig;
            Ok(g.scalar(loss))
        };
        let numeric = (eval(h)? - eval(-h)?) / (2.0 * h);
        let err = relative_error(analytic, numeric);
        if !err.is_finite() {
            return Err(AnalysisError::NonFinite("gradient check"));
        }
        if err >= worst.0 || worst.1.is_empty() {
            let name = policy.params.iter().nth(ti).map(|(n, _)| n.to_string()).unwrap_or_default();
            worst = (err, name, flat);
        }
    }
    Ok(GradcheckReport {
        seed,
        coords: n_coords,
        max_relative_error: worst.0,
        worst: (worst.1, worst.2),
    })
}
