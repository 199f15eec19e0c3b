//! Loss as a function of the policy margin f for a few K, comparing the
//! softplus offset with q = K and q = 0. Prints CSV.

use mipo::analysis::{linspace, losscurve, losscurve_csv};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let ks = [-3.0, 0.0, 3.0];
    let rows = losscurve(2.0, &ks, &linspace(-4.0, 6.0, 11))?;
    print!("{}", losscurve_csv(&rows));
    Ok(())
}
