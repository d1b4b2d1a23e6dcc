//! Trajectory ensemble through the two-branch detector: branch counts,
//! group densities and widths.

use phasebranch::config::{DetectorConfig, EnsembleConfig};
use phasebranch::experiments::{branch_mc, detector_run};

fn main() -> phasebranch::Result<()> {
    let seed = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(42);
    let run = detector_run(&DetectorConfig::default())?;
    let (_, r) = branch_mc(&run.frames, &EnsembleConfig::default(), seed)?;
    println!("noise {:.4}  frames {}", r.noise, run.frames.frames.len());
    for a in 0..r.counts.len() {
        println!(
            "branch {a}: {} samples, fraction {:.4} +/- {:.4} (weight {:.4})",
            r.counts[a], r.fractions[a], r.stderr[a], r.expected[a]
        );
        let (k, w) = (r.kappa[a], r.widths[a]);
        println!(
            "  kappa before {:.3}, own peak {:.3}, other peak {:.3}; width ratio {:.3}",
            k.before, k.after_own, k.after_other, w.ratio
        );
    }
    for p in &r.equivariance {
        println!("t {:.3}: KS {:.4} (band {:.4})", p.t, p.distance, p.band);
    }
    Ok(())
}
