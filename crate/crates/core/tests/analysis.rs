use mipo::analysis::{
    analyze_k, assign_buckets, dedup_betas, linspace, losscurve, losscurve_csv, margins_from_log, sweep_beta,
    AnalysisError, Bucket, PolicyMargin, AT_INIT_VARIANT,
};
use mipo::data::{generate_corpus, CorpusSpec};
use mipo::objectives::{q_of_k, PairStats};
use mipo::tinylm::{checkpoint::to_bytes, ModelConfig, SequenceLogLik, TinyLm};
use mipo::trainer::{precompute_pair_stats, train_align, AlignConfig};
use proptest::prelude::*;

fn stats_with_k(id: &str, k: f64) -> PairStats {
    // one-token responses so that avg == sum
    let w = SequenceLogLik::new(-1.0, 1).unwrap();
    let l = SequenceLogLik::new(-1.0 - k, 1).unwrap();
    PairStats::new(id, w, l)
}

#[test]
fn losscurve_passes_through_ln2_at_modulated_offset() {
    for beta in [0.5, 1.0, 10.0] {
        for k in [-5.0, -1.0, 0.0, 2.0, 8.0] {
            let q = q_of_k(k);
            let rows = losscurve(beta, &[k], &[q]).unwrap();
            let mipo = rows.iter().find(|r| r.variant == "mipo").unwrap();
            assert!((mipo.loss - std::f64::consts::LN_2).abs() < 1e-15);
        }
    }
}

#[test]
fn losscurve_init_rows_match_closed_form() {
    let ks = linspace(-10.0, 10.0, 41);
    let rows = losscurve(1.0, &ks, &[0.0]).unwrap();
    let init: Vec<_> = rows.iter().filter(|r| r.variant == AT_INIT_VARIANT).collect();
    assert_eq!(init.len(), ks.len());
    for r in init {
        assert_eq!(r.f, r.k);
        let want = (2.0 + (-r.k).exp()).ln();
        assert!((r.loss - want).abs() < 1e-12, "k {}", r.k);
    }
}

#[test]
fn losscurve_variant_ordering() {
    let fs = linspace(-5.0, 10.0, 31);
    let ks = [0.5, 1.0, 3.0, 10.0];
    let rows = losscurve(2.0, &ks, &fs).unwrap();
    let get = |v: &str, k: f64, f: f64| {
        rows.iter()
            .find(|r| r.variant == v && r.k == k && r.f == f)
            .unwrap()
            .loss
    };
    for &k in &ks {
        for &f in &fs {
            let m = get("mipo", k, f);
            assert!(m > get("q_eq_k", k, f));
            assert!(m > get("q_zero", k, f));
        }
        // decreasing in f
        for w in fs.windows(2) {
            assert!(get("mipo", k, w[1]) < get("mipo", k, w[0]));
        }
    }
    let csv = losscurve_csv(&rows);
    assert!(csv.starts_with("f,k,variant,loss\n"));
    assert_eq!(csv.lines().count(), rows.len() + 1);
}

#[test]
fn losscurve_rejects_empty_grids() {
    assert!(matches!(losscurve(1.0, &[], &[0.0]), Err(AnalysisError::EmptyGrid(_))));
    assert!(matches!(losscurve(1.0, &[0.0], &[]), Err(AnalysisError::EmptyGrid(_))));
    assert!(losscurve(0.0, &[0.0], &[0.0]).is_err());
}

#[test]
fn dedup_keeps_first_occurrence() {
    assert_eq!(dedup_betas(&[5.0, 1.0, 5.0, 10.0, 1.0]), vec![5.0, 1.0, 10.0]);
}

#[test]
fn single_beta_sweep_equals_direct_alignment() {
    let pairs = generate_corpus(&CorpusSpec {
        n_pairs: 40,
        seed: 21,
        ..CorpusSpec::default()
    })
    .unwrap();
    let (train, eval) = pairs.split_at(30);
    let reference = TinyLm::new(ModelConfig {
        d_model: 12,
        d_ff: 20,
        n_layers: 1,
        seed: 21,
        ..ModelConfig::default()
    })
    .unwrap();
    let ts = precompute_pair_stats(&reference, train).unwrap();
    let es = precompute_pair_stats(&reference, eval).unwrap();
    let base = AlignConfig {
        lr: 1e-3,
        batch_size: 8,
        epochs: 2,
        ..AlignConfig::default()
    };
    let runs = sweep_beta(&reference, train, &ts, (eval, &es), &base, &[5.0]).unwrap();
    assert_eq!(runs.len(), 1);
    let swept = runs[0].outcome.as_ref().unwrap();
    let direct = train_align(
        &reference,
        train,
        &ts,
        &AlignConfig { beta: 5.0, ..base },
        Some((eval, &es)),
    )
    .unwrap();
    assert_eq!(to_bytes(&swept.policy), to_bytes(&direct.policy));
    assert_eq!(swept.log.steps_csv(), direct.log.steps_csv());
    assert_eq!(swept.log.eval_csv(), direct.log.eval_csv());
    assert!(!runs[0].row.diverged);

    let (before, after) = margins_from_log(&direct.log).unwrap();
    let reports = analyze_k(&before, &after, &es).unwrap();
    assert_eq!(reports.iter().map(|r| r.n).sum::<usize>(), 10);
}

#[test]
fn analyze_k_names_missing_ids() {
    let reference = vec![stats_with_k("a", 0.0), stats_with_k("b", 1.0)];
    let m = |id: &str| PolicyMargin {
        pair_id: id.into(),
        margin: 0.0,
    };
    let before = vec![m("a"), m("b")];
    let after = vec![m("a"), m("c")];
    match analyze_k(&before, &after, &reference) {
        Err(AnalysisError::IdMismatch(ids)) => {
            assert_eq!(ids, vec!["b (after)".to_string(), "c (reference)".to_string()]);
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn analyze_k_bucket_means() {
    let reference: Vec<PairStats> = (0..10).map(|i| stats_with_k(&format!("p{i}"), i as f64)).collect();
    let before: Vec<PolicyMargin> = (0..10)
        .map(|i| PolicyMargin {
            pair_id: format!("p{i}"),
            margin: 0.0,
        })
        .collect();
    let after: Vec<PolicyMargin> = (0..10)
        .map(|i| PolicyMargin {
            pair_id: format!("p{i}"),
            margin: i as f64 * 2.0,
        })
        .collect();
    let r = analyze_k(&before, &after, &reference).unwrap();
    assert_eq!((r[0].bucket, r[0].n), (Bucket::Bottom20, 2));
    assert_eq!((r[1].bucket, r[1].n), (Bucket::Middle60, 6));
    assert_eq!((r[2].bucket, r[2].n), (Bucket::Top20, 2));
    assert!((r[0].mean_k - 0.5).abs() < 1e-12);
    assert!((r[0].delta - 1.0).abs() < 1e-12);
    assert!((r[2].delta - 17.0).abs() < 1e-12);
}

proptest! {
    #[test]
    fn buckets_partition_sorted_by_k(ks in prop::collection::vec(-20.0f64..20.0, 1..200)) {
        let stats: Vec<PairStats> = ks
            .iter()
            .enumerate()
            .map(|(i, &k)| stats_with_k(&format!("id{i:03}"), k))
            .collect();
        let assigned = assign_buckets(&stats);
        let n = stats.len();
        prop_assert_eq!(assigned.len(), n);
        let count = |b| assigned.iter().filter(|(_, x)| *x == b).count();
        prop_assert_eq!(count(Bucket::Bottom20), n / 5);
        prop_assert_eq!(count(Bucket::Top20), n / 5);
        prop_assert_eq!(count(Bucket::Middle60), n - 2 * (n / 5));
        let k_of = |id: &str| stats.iter().find(|s| s.id == id).unwrap().k;
        for w in assigned.windows(2) {
            prop_assert!(k_of(w[0].0) <= k_of(w[1].0));
            prop_assert!(w[0].1 as usize <= w[1].1 as usize);
        }
        let mut ids: Vec<&str> = assigned.iter().map(|(id, _)| *id).collect();
        ids.sort();
        ids.dedup();
        prop_assert_eq!(ids.len(), n);
    }
}
