//! Free Gaussian packet under the path-sum propagator, compared with the
//! closed form and the Crank–Nicolson reference.

use phasebranch::config::GridConfig;
use phasebranch::experiments::propagate;

fn main() -> phasebranch::Result<()> {
    let cfg = GridConfig::default();
    let r = propagate(&cfg)?;
    let s = &r.summary;
    println!("steps {} (lattice ratio {})", s.steps, s.lattice_ratio);
    println!("L2 vs closed form  {:.3e}", s.l2_vs_oracle);
    println!("L2 vs reference    {:.3e}", s.l2_vs_reference);
    println!("width {:.6} (closed form {:.6})", s.width, s.width_closed_form);
    let path = std::env::temp_dir().join("psi_pathsum.csv");
    r.pathsum.write_csv(std::fs::File::create(&path)?)?;
    println!("amplitudes written to {}", path.display());
    Ok(())
}
