//! Stationary path of the macrovariable action in a harmonic well, against
//! the classical solution.

use phasebranch::macrovariable::{stationary_path, MacroSystem, Sigma0};
use phasebranch::Potential;

fn main() -> phasebranch::Result<()> {
    let sys = MacroSystem::new(1000, 1.0, Potential::harmonic(1.0, 1.0), Sigma0::Scaled(1.0))?;
    let path = stationary_path(&sys, 1.0, 0.0, 3.0, 1e-3)?;
    println!(
        "iterations {}  residual {:.2e}  action {:.6}",
        path.iterations, path.residual, path.action_value
    );
    let mut worst: f64 = 0.0;
    for (k, x) in path.x_values.iter().enumerate() {
        worst = worst.max((x - path.t(k).cos()).abs());
    }
    println!("max |X(t) - cos t| = {worst:.2e}");
    Ok(())
}
