//! MIPO versus DPO margin change per reference-K bucket on one seed.
//! Takes about a minute in release mode.
//!
//! `cargo run --release --example k_buckets -- [seed]`

use mipo::analysis::{buckets_csv, BucketExperiment};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let seed = std::env::args().nth(1).map(|s| s.parse()).transpose()?.unwrap_or(1);
    let experiment = BucketExperiment::standard(seed);
    let cmp = experiment.run()?;
    println!("MIPO (beta {})", experiment.mipo_beta);
    print!("{}", buckets_csv(&cmp.mipo));
    println!("DPO (beta {})", experiment.dpo_beta);
    print!("{}", buckets_csv(&cmp.dpo));
    println!(
        "MIPO gains more on the bottom bucket and less on the top: {}",
        cmp.direction_holds()
    );
    Ok(())
}
