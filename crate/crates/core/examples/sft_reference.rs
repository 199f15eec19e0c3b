//! Trains a reference model with SFT and summarizes the K distribution it
//! assigns to held-out pairs.
//!
//! `cargo run --release --example sft_reference -- [steps] [out.ckpt]`

use mipo::data::{generate_corpus, CorpusSpec};
use mipo::tinylm::{save_checkpoint, ModelConfig, TinyLm};
use mipo::trainer::{precompute_pair_stats, train_sft, SftConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let steps = args.next().map(|s| s.parse()).transpose()?.unwrap_or(2000);
    let train = generate_corpus(&CorpusSpec {
        seed: 1,
        ..CorpusSpec::default()
    })?;
    let held_out = generate_corpus(&CorpusSpec {
        n_pairs: 500,
        seed: 2,
        ..CorpusSpec::default()
    })?;

    let mut model = TinyLm::new(ModelConfig::default())?;
    println!("{} parameters", model.params.count());
    let report = train_sft(
        &mut model,
        &train,
        &SftConfig {
            steps,
            ..SftConfig::default()
        },
    )?;
    let window = (steps / 10).max(1);
    for (i, chunk) in report.losses.chunks(window).enumerate() {
        let mean = chunk.iter().sum::<f64>() / chunk.len() as f64;
        println!("steps {:>5}..: mean loss {mean:.4}", i * window);
    }

    let mut ks: Vec<f64> = precompute_pair_stats(&model, &held_out)?.iter().map(|s| s.k).collect();
    ks.sort_by(f64::total_cmp);
    let at = |p: f64| ks[((ks.len() - 1) as f64 * p).round() as usize];
    println!(
        "held-out K: min {:.3}, q1 {:.3}, median {:.3}, q3 {:.3}, max {:.3}, negative {}",
        ks[0],
        at(0.25),
        at(0.5),
        at(0.75),
        ks[ks.len() - 1],
        ks.iter().filter(|&&k| k < 0.0).count()
    );
    if let Some(out) = args.next() {
        save_checkpoint(&model, &out)?;
        println!("saved {out}");
    }
    Ok(())
}
