//! Generates the synthetic preference corpus and prints a few pairs.
//!
//! `cargo run --example synthetic_corpus -- [seed] [out.jsonl]`

use mipo::data::{generate_corpus, write_jsonl, CorpusSpec};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let seed = args.next().map(|s| s.parse()).transpose()?.unwrap_or(0);
    let spec = CorpusSpec {
        seed,
        ..CorpusSpec::default()
    };
    let pairs = generate_corpus(&spec)?;
    for p in pairs.iter().take(6) {
        println!("{}  prompt {:<7} chosen {:<15} rejected {}", p.id, p.prompt, p.chosen, p.rejected);
    }
    let mean = |f: fn(&mipo::data::PreferencePair) -> usize| {
        pairs.iter().map(f).sum::<usize>() as f64 / pairs.len() as f64
    };
    println!(
        "{} pairs, mean chosen length {:.2}, mean rejected length {:.2}",
        pairs.len(),
        mean(|p| p.chosen.len()),
        mean(|p| p.rejected.len())
    );
    if let Some(out) = args.next() {
        write_jsonl(&pairs, &out)?;
        println!("wrote {out}");
    }
    Ok(())
}
