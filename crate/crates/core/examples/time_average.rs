//! Basins of the noise-free flow: the initial weight carried into each branch.

use phasebranch::config::DetectorConfig;
use phasebranch::experiments::{detector_run, time_average};

fn main() -> phasebranch::Result<()> {
    let run = detector_run(&DetectorConfig::default())?;
    let ta = time_average(&run.frames)?;
    println!("basin boundaries {:?}", ta.boundaries);
    for (a, (f, e)) in ta.fractions.iter().zip(&ta.expected).enumerate() {
        println!("branch {a}: M_a/M = {f:.5} (weight {e:.5})");
    }
    Ok(())
}
