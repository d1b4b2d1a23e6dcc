//! Monte Carlo estimate of one path-sum slice and its error against the
//! deterministic step as the sample density grows.

use phasebranch::config::PathSumBlock;
use phasebranch::experiments::mc_pathsum;

fn main() -> phasebranch::Result<()> {
    let seed = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(42);
    let cfg = PathSumBlock {
        replicas: 64,
        ..PathSumBlock::default()
    };
    let r = mc_pathsum(&cfg, seed)?;
    println!("rho*ell_d  points  rms_dev    rms_stderr");
    for p in &r.summary.sweep {
        println!(
            "{:9.1}  {:6}  {:.3e}  {:.3e}",
            p.rho_ell, p.points_per_slice, p.rms_deviation, p.rms_stderr
        );
    }
    if let Some(f) = r.summary.fit {
        println!("slope {:.3} +/- {:.3}", f.slope, f.slope_stderr);
    }
    Ok(())
}
