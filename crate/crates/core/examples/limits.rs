//! How the modulator q(K) = softplus(K) approaches its two limits.

use mipo::objectives::q_of_k;

fn main() {
    println!("{:>6} {:>14} {:>14}", "K", "q(K)", "q(K) - max(K,0)");
    for k in [-50.0, -20.0, -15.0, -5.0, -1.0, 0.0, 1.0, 5.0, 15.0, 20.0, 50.0] {
        let q = q_of_k(k);
        println!("{k:>6} {q:>14.6e} {:>14.6e}", q - f64::max(k, 0.0));
    }
}
