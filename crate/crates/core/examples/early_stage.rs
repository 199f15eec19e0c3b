//! Loss of the first step, when the policy still equals the reference: MIPO
//! depends on K, DPO does not.

use mipo::objectives::{dpo_loss, mipo_loss, DpoMargins};

fn main() {
    let beta = 1.0;
    println!("{:>5} {:>12} {:>14} {:>10}", "K", "MIPO", "ln(2 + e^-K)", "DPO");
    for k in [-5.0f64, -2.0, 0.0, 1.0, 3.0, 10.0] {
        let mipo = mipo_loss(k, k, beta).expect("finite inputs").loss;
        // any reference sums work; the policy repeats them
        let dpo = dpo_loss(DpoMargins::from_sums(-12.0, -12.0, -15.0, -15.0), beta).expect("finite inputs");
        println!("{k:>5} {mipo:>12.9} {:>14.9} {dpo:>10.6}", (2.0 + (-k).exp()).ln());
    }
}
