//! Fluctuation width and spreading time of a mean coordinate against N.

use phasebranch::config::MacroConfig;
use phasebranch::experiments::macro_scaling;

fn main() -> phasebranch::Result<()> {
    let r = macro_scaling(&MacroConfig::default())?;
    println!("width at fixed t: slope {:.4}", r.width.width_fit.slope);
    r.width.write_csv(std::io::stdout().lock())?;
    if let Some(f) = r.spreading.spreading_fit {
        println!("10% spreading time: slope {:.4}", f.slope);
    }
    r.spreading.write_csv(std::io::stdout().lock())
}
