//! Autodiff against central differences for each objective on the default
//! model.

use mipo::analysis::lm_gradcheck;
use mipo::tinylm::ModelConfig;
use mipo::trainer::Method;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    for (method, beta) in [(Method::Mipo, 10.0), (Method::Dpo, 0.5), (Method::Simpo, 2.0)] {
        for seed in 0..3 {
            let r = lm_gradcheck(ModelConfig::default(), method, beta, seed, 50, 1e-4)?;
            println!(
                "{:<5} seed {seed}: max relative error {:.2e} at {}[{}] ({})",
                method.label(),
                r.max_relative_error,
                r.worst.0,
                r.worst.1,
                if r.passed() { "ok" } else { "FAILED" }
            );
        }
    }
    Ok(())
}
