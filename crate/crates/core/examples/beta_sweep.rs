//! MIPO over several betas from one SFT reference.
//!
//! `cargo run --release --example beta_sweep -- [sft steps]`

use mipo::analysis::{sweep_beta, sweep_csv};
use mipo::data::{generate_corpus, split, CorpusSpec};
use mipo::tinylm::{ModelConfig, TinyLm};
use mipo::trainer::{precompute_pair_stats, train_sft, AlignConfig, SftConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let steps = std::env::args().nth(1).map(|s| s.parse()).transpose()?.unwrap_or(2000);
    let pairs = generate_corpus(&CorpusSpec::default())?;
    let (train, eval) = split(&pairs, 0.2, 0)?;
    let mut reference = TinyLm::new(ModelConfig::default())?;
    train_sft(
        &mut reference,
        &train,
        &SftConfig {
            steps,
            ..SftConfig::default()
        },
    )?;
    let train_stats = precompute_pair_stats(&reference, &train)?;
    let eval_stats = precompute_pair_stats(&reference, &eval)?;
    let base = AlignConfig {
        lr: 3e-4,
        epochs: 2,
        ..AlignConfig::default()
    };
    let runs = sweep_beta(
        &reference,
        &train,
        &train_stats,
        (&eval, &eval_stats),
        &base,
        &[1.0, 5.0, 10.0, 25.0, 50.0],
    )?;
    let rows: Vec<_> = runs.iter().map(|r| r.row.clone()).collect();
    print!("{}", sweep_csv(&rows));
    Ok(())
}
