//! Acceptance suite. Each test prints one `PASS`/`FAIL` line; run with
//! `cargo test --test acceptance -- --nocapture` to see them.

use std::fs;
use std::path::Path;
use std::process::Command;

use mipo::analysis::{lm_gradcheck, sweep_beta, Bucket, BucketExperiment};
use mipo::data::{generate_corpus, parse_jsonl, split, to_jsonl, CorpusSpec};
use mipo::diffcore::{Graph, Tensor};
use mipo::objectives::{dpo_loss, mipo_loss, mipo_loss_var, q_of_k, DpoMargins};
use mipo::tinylm::checkpoint::{from_bytes, to_bytes};
use mipo::tinylm::{load_checkpoint, save_checkpoint, ModelConfig, TinyLm};
use mipo::trainer::{
    batch_loss, encode_pairs, precompute_pair_stats, train_align, train_sft, AlignConfig, Method, SftConfig,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn report(id: u32, name: &str, pass: bool, detail: String) {
    println!("[{}] criterion {id} {name}: {detail}", if pass { "PASS" } else { "FAIL" });
    assert!(pass, "criterion {id} ({name}) failed: {detail}");
}

#[test]
fn criterion_1_modulator_limits() {
    let upper = [15.0, 20.0, 50.0].map(|k: f64| (q_of_k(k) - k).abs());
    let lower = [-15.0, -20.0, -50.0].map(q_of_k);
    let pass = upper.iter().chain(&lower).all(|&e| e < 1e-6);
    report(
        1,
        "modulator limits",
        pass,
        format!("max |q(K)-K| = {:.3e}, max q(K) for negative K = {:.3e}", max(&upper), max(&lower)),
    );
}

fn max(xs: &[f64]) -> f64 {
    xs.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

#[test]
fn criterion_2_early_stage_closed_form() {
    let mut worst_mipo = 0.0f64;
    let mut worst_dpo = 0.0f64;
    for k in [-5.0f64, -2.0, 0.0, 1.0, 3.0, 10.0] {
        let want = (2.0 + (-k).exp()).ln();
        worst_mipo = worst_mipo.max((mipo_loss(k, k, 1.0).unwrap().loss - want).abs());
        let d = dpo_loss(DpoMargins::from_sums(-3.0 * k, -3.0 * k, -7.0, -7.0), 1.0).unwrap();
        worst_dpo = worst_dpo.max((d - std::f64::consts::LN_2).abs());
    }

    // the same through the language model, one pair per batch, policy == reference
    let pairs = generate_corpus(&CorpusSpec {
        n_pairs: 50,
        seed: 2,
        ..CorpusSpec::default()
    })
    .unwrap();
    let model = TinyLm::new(ModelConfig {
        seed: 2,
        ..ModelConfig::default()
    })
    .unwrap();
    let stats = precompute_pair_stats(&model, &pairs).unwrap();
    let enc = encode_pairs(&pairs, model.config.context_len).unwrap();
    let mut k_range = (f64::INFINITY, f64::NEG_INFINITY);
    for (e, s) in enc.iter().zip(&stats) {
        k_range = (k_range.0.min(s.k), k_range.1.max(s.k));
        for method in [Method::Mipo, Method::Dpo] {
            let cfg = AlignConfig {
                method,
                beta: 1.0,
                ..AlignConfig::default()
            };
            let (g, _, loss, _, _) = batch_loss(&model, &[(e, s)], &cfg).unwrap();
            let got = g.scalar(loss);
            match method {
                Method::Mipo => worst_mipo = worst_mipo.max((got - (2.0 + (-s.k).exp()).ln()).abs()),
                _ => worst_dpo = worst_dpo.max((got - std::f64::consts::LN_2).abs()),
            }
        }
    }
    let pass = worst_mipo <= 1e-12 && worst_dpo <= 1e-12;
    report(
        2,
        "early-stage closed form",
        pass,
        format!(
            "max MIPO error {worst_mipo:.2e}, max DPO error {worst_dpo:.2e} (6 fixed K plus 50 model pairs, K in [{:.3}, {:.3}])",
            k_range.0, k_range.1
        ),
    );
}

#[test]
fn criterion_3_loss_ordering() {
    // K2 in [-10, 10], K1 = K2 + d with d in [0.01, 10], alpha in (0, 5], beta in [0.1, 50]
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut violations = 0;
    for _ in 0..1000 {
        let k2 = rng.random_range(-10.0..=10.0);
        let k1 = k2 + rng.random_range(0.01..=10.0);
        let alpha = 5.0 - rng.random_range(0.0..5.0);
        let beta = rng.random_range(0.1..=50.0);
        let low = mipo_loss(k2 + alpha, k2, beta).unwrap().loss;
        let high = mipo_loss(k1 + alpha, k1, beta).unwrap().loss;
        if low <= high {
            violations += 1;
        }
    }
    report(3, "loss ordering", violations == 0, format!("{violations} violations in 1000 triples"));
}

#[test]
fn criterion_4_dpo_alignment_blindness() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst = 0.0f64;
    let mut mipo_spread = 0.0f64;
    let mut offset_changes = 0;
    // dyadic values keep every sum exact
    let dyadic = |rng: &mut ChaCha8Rng, lo: i64, hi: i64| rng.random_range(lo * 1024..hi * 1024) as f64 / 1024.0;
    for _ in 0..1000 {
        let beta = rng.random_range(0.01..20.0);
        let (dw, dl) = (dyadic(&mut rng, -10, 10), dyadic(&mut rng, -10, 10));
        let (rw_a, rl_a) = (dyadic(&mut rng, -80, -1), dyadic(&mut rng, -80, -1));
        let (rw_b, rl_b) = (dyadic(&mut rng, -80, -1), dyadic(&mut rng, -80, -1));
        let a = DpoMargins::from_sums(rw_a + dw, rw_a, rl_a + dl, rl_a);
        let b = DpoMargins::from_sums(rw_b + dw, rw_b, rl_b + dl, rl_b);
        let la = dpo_loss(a, beta).unwrap();
        worst = worst.max((la - dpo_loss(b, beta).unwrap()).abs());

        let c = dyadic(&mut rng, -20, 20);
        let shifted = DpoMargins::from_sums(rw_a + dw + c, rw_a + c, rl_a + dl + c, rl_a + c);
        if dpo_loss(shifted, beta).unwrap() != la {
            offset_changes += 1;
        }

        // the length-normalized margin sees the two tuples differently
        let (nw, nl) = (rng.random_range(2..16) as f64, rng.random_range(2..16) as f64);
        let mipo = |rw: f64, rl: f64| {
            let k = rw / nw - rl / nl;
            mipo_loss((rw + dw) / nw - (rl + dl) / nl, k, beta).unwrap().loss
        };
        mipo_spread = mipo_spread.max((mipo(rw_a, rl_a) - mipo(rw_b, rl_b)).abs());
    }
    let pass = worst <= 1e-12 && offset_changes == 0;
    report(
        4,
        "DPO alignment-blindness",
        pass,
        format!(
            "max DPO disagreement {worst:.2e}, {offset_changes} loss changes under shared offset; MIPO differs by up to {mipo_spread:.3}"
        ),
    );
}

#[test]
fn criterion_5_gradient_fidelity() {
    let mut worst = 0.0f64;
    let mut worst_seed = 0;
    for seed in 0..20 {
        let r = lm_gradcheck(ModelConfig::default(), Method::Mipo, 10.0, seed, 50, 1e-4).unwrap();
        if r.max_relative_error > worst {
            worst = r.max_relative_error;
            worst_seed = seed;
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst_df = 0.0f64;
    for _ in 0..1000 {
        let (f, k, beta) = (
            rng.random_range(-10.0..10.0),
            rng.random_range(-10.0..10.0),
            rng.random_range(0.1..50.0),
        );
        let mut g = Graph::new();
        let fv = g.leaf(&Tensor::scalar(f).with_grad());
        let loss = mipo_loss_var(&mut g, fv, k, beta).unwrap();
        let auto = g.backward(loss).unwrap().get(fv).unwrap()[0];
        worst_df = worst_df.max((auto - mipo_loss(f, k, beta).unwrap().dloss_df).abs());
    }
    let pass = worst < 1e-4 && worst_df <= 1e-8;
    report(
        5,
        "gradient fidelity",
        pass,
        format!(
            "max relative error {worst:.2e} (seed {worst_seed}) over 20 seeds x 50 coords; closed-form dloss/df vs autodiff {worst_df:.2e}"
        ),
    );
}

#[test]
fn criterion_6_k_bucket_dynamics() {
    let mut lines = Vec::new();
    let mut held = 0;
    for seed in [1, 2, 3] {
        let cmp = BucketExperiment::standard(seed).run().unwrap();
        let (mb, db) = cmp.deltas(Bucket::Bottom20);
        let (mt, dt) = cmp.deltas(Bucket::Top20);
        if cmp.direction_holds() {
            held += 1;
        }
        lines.push(format!(
            "seed {seed}: bottom {mb:.3} vs {db:.3}, top {mt:.3} vs {dt:.3}"
        ));
    }
    report(
        6,
        "K-bucket dynamics",
        held == 3,
        format!("{held}/3 seeds (MIPO vs DPO margin change) [{}]", lines.join("; ")),
    );
}

#[test]
fn criterion_7_beta_robustness() {
    let pairs = generate_corpus(&CorpusSpec {
        seed: 1,
        ..CorpusSpec::default()
    })
    .unwrap();
    let (train, eval) = split(&pairs, 0.2, 1).unwrap();
    let mut reference = TinyLm::new(ModelConfig {
        seed: 1,
        ..ModelConfig::default()
    })
    .unwrap();
    train_sft(
        &mut reference,
        &train,
        &SftConfig {
            seed: 1,
            ..SftConfig::default()
        },
    )
    .unwrap();
    let ts = precompute_pair_stats(&reference, &train).unwrap();
    let es = precompute_pair_stats(&reference, &eval).unwrap();
    let base = AlignConfig {
        lr: 3e-4,
        epochs: 2,
        seed: 1,
        ..AlignConfig::default()
    };
    let runs = sweep_beta(&reference, &train, &ts, (&eval, &es), &base, &[1.0, 5.0, 10.0, 25.0, 50.0]).unwrap();
    let mut ok = runs.len() == 5;
    let mut parts = Vec::new();
    for run in &runs {
        let r = &run.row;
        let finite_log = run.outcome.as_ref().is_some_and(|o| {
            o.log
                .steps
                .iter()
                .all(|s| s.mean_loss.is_finite() && s.grad_norm.is_finite())
        });
        ok &= !r.diverged && finite_log && r.final_mean_loss.is_finite() && r.mean_eval_margin.is_finite();
        let peak = run
            .outcome
            .as_ref()
            .map_or(f64::NAN, |o| o.log.steps.iter().map(|s| s.grad_norm).fold(0.0, f64::max));
        parts.push(format!("beta {}: final loss {:.4}, peak grad {:.1}", r.beta, r.final_mean_loss, peak));
    }
    report(7, "beta robustness", ok, parts.join("; "));
}

#[test]
fn criterion_8_determinism_and_formats() {
    let mut failures: Vec<String> = Vec::new();
    let mut check = |ok: bool, what: &str| {
        if !ok {
            failures.push(what.to_string());
        }
    };

    // same seed, bit-identical artefacts
    let run = |seed: u64| {
        let pairs = generate_corpus(&CorpusSpec {
            n_pairs: 80,
            seed,
            ..CorpusSpec::default()
        })
        .unwrap();
        let mut reference = TinyLm::new(ModelConfig {
            d_model: 16,
            d_ff: 32,
            seed,
            ..ModelConfig::default()
        })
        .unwrap();
        let sft = train_sft(
            &mut reference,
            &pairs,
            &SftConfig {
                steps: 30,
                seed,
                ..SftConfig::default()
            },
        )
        .unwrap();
        let (train, eval) = split(&pairs, 0.25, seed).unwrap();
        let ts = precompute_pair_stats(&reference, &train).unwrap();
        let es = precompute_pair_stats(&reference, &eval).unwrap();
        let cfg = AlignConfig {
            lr: 1e-3,
            epochs: 2,
            seed,
            ..AlignConfig::default()
        };
        let out = train_align(&reference, &train, &ts, &cfg, Some((&eval, &es))).unwrap();
        (
            to_jsonl(&pairs),
            to_bytes(&reference),
            sft.to_csv(),
            to_bytes(&out.policy),
            out.log.steps_csv(),
            out.log.eval_csv(),
            reference,
        )
    };
    let a = run(8);
    let b = run(8);
    check(a.0 == b.0, "corpus bytes");
    check(a.1 == b.1, "reference checkpoint");
    check(a.2 == b.2, "sft csv");
    check(a.3 == b.3, "policy checkpoint");
    check(a.4 == b.4 && a.5 == b.5, "alignment csvs");
    check(run(9).3 != a.3, "different seed changes the policy");

    // round trips
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("ref.ckpt");
    save_checkpoint(&a.6, &ckpt).unwrap();
    let loaded = load_checkpoint(&ckpt).unwrap();
    check(to_bytes(&loaded) == a.1, "checkpoint file round trip");
    check(from_bytes(&a.1).map(|m| to_bytes(&m)).ok() == Some(a.1.clone()), "checkpoint byte round trip");
    let parsed = parse_jsonl(&a.0).unwrap();
    check(to_jsonl(&parsed) == a.0, "jsonl round trip");

    // diagnostics and exit codes
    let bin = env!("CARGO_BIN_EXE_mipo");
    let cli = |args: &[&str]| {
        let o = Command::new(bin).args(args).env_remove("MIPO_SEED").output().unwrap();
        (o.status.code(), String::from_utf8_lossy(&o.stderr).into_owned())
    };
    let p = |x: &Path| x.to_str().unwrap().to_string();
    let bad_jsonl = dir.path().join("bad.jsonl");
    fs::write(&bad_jsonl, format!("{}\n{{\"id\":\"x\",\"prompt\":\"0ab\",\"chosen\":\"cd\"}}\n", a.0.lines().next().unwrap())).unwrap();
    let truncated = dir.path().join("trunc.ckpt");
    fs::write(&truncated, &a.1[..a.1.len() / 3]).unwrap();
    let bad_magic = dir.path().join("magic.ckpt");
    fs::write(&bad_magic, b"not a checkpoint at all").unwrap();
    let out = p(&dir.path().join("o"));
    let cases: Vec<(Vec<String>, i32, &str)> = vec![
        (vec!["sft".into(), "--data".into(), p(&bad_jsonl), "--out".into(), out.clone()], 1, "line 2: missing field rejected"),
        (vec!["stats".into(), "--checkpoint".into(), p(&truncated), "--data".into(), p(&bad_jsonl), "--out".into(), out.clone()], 1, "truncated checkpoint"),
        (vec!["stats".into(), "--checkpoint".into(), p(&bad_magic), "--data".into(), p(&bad_jsonl), "--out".into(), out.clone()], 1, "bad magic"),
        (vec!["align".into(), "--checkpoint".into(), p(&ckpt), "--data".into(), "x".into(), "--out".into(), out.clone(), "--beta".into(), "0".into()], 1, "beta must be > 0"),
        (vec!["align".into(), "--checkpoint".into(), p(&ckpt), "--data".into(), "x".into(), "--out".into(), out.clone(), "--method".into(), "dpo".into(), "--gamma".into(), "1".into()], 1, "gamma is only valid with method simpo"),
        (vec!["stats".into(), "--checkpoint".into(), p(&dir.path().join("absent.ckpt")), "--data".into(), "x".into(), "--out".into(), out.clone()], 1, "absent.ckpt"),
    ];
    let n_cases = cases.len();
    for (args, code, needle) in cases {
        let argv: Vec<&str> = args.iter().map(String::as_str).collect();
        let (got, err) = cli(&argv);
        check(got == Some(code) && err.contains(needle), &format!("{} -> {got:?} {err:?}", argv[0]));
    }

    let pass = failures.is_empty();
    let detail = if pass {
        format!("bit-identical artefacts across runs, exact round trips, {n_cases} diagnostic cases")
    } else {
        failures.join("; ")
    };
    report(8, "determinism and formats", pass, detail);
}
