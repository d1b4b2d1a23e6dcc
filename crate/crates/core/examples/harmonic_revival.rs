//! A coherent state in a harmonic well returns to its start after a period.

use phasebranch::config::RevivalConfig;
use phasebranch::experiments::revival;

fn main() -> phasebranch::Result<()> {
    for steps in [100, 250, 500, 1000] {
        let cfg = RevivalConfig {
            steps_per_period: steps,
            ..RevivalConfig::default()
        };
        let r = revival(&cfg, 1.0, 1.0)?;
        println!("dt {:.5}  <x>(T) = {:.9}  error {:.2e}", r.dt, r.mean_x, r.error);
    }
    Ok(())
}
