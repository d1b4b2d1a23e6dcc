//! JSON run configuration. Every block has defaults; unknown keys are errors.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grids::{Potential, SpaceGrid};
use crate::macrovariable::COHERENCE_SEPARATION;
use crate::measurement::DetectorModel;
use crate::pathsum::Scheme;
use crate::schrodinger_ref::OracleCase;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Experiment {
    Propagate,
    McPathsum,
    MacroScaling,
    Measure,
    BranchMc,
    TimeAverage,
    AcceptAll,
}

impl Experiment {
    pub fn name(&self) -> &'static str {
        match self {
            Experiment::Propagate => "propagate",
            Experiment::McPathsum => "mc-pathsum",
            Experiment::MacroScaling => "macro-scaling",
            Experiment::Measure => "measure",
            Experiment::BranchMc => "branch-mc",
            Experiment::TimeAverage => "time-average",
            Experiment::AcceptAll => "accept-all",
        }
    }
}

/// Harmonic revival run: a coherent state over whole periods.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RevivalConfig {
    pub x_min: f64,
    pub x_max: f64,
    pub n: usize,
    pub x0: f64,
    pub omega: f64,
    pub periods: u32,
    pub steps_per_period: usize,
}

impl Default for RevivalConfig {
    fn default() -> Self {
        Self {
            x_min: -10.0,
            x_max: 10.0,
            n: 512,
            x0: 1.0,
            omega: 1.0,
            periods: 1,
            steps_per_period: 500,
        }
    }
}

/// The `grid` block: path-sum propagation against oracle and reference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridConfig {
    pub x_min: f64,
    pub x_max: f64,
    pub n: usize,
    pub mass: f64,
    pub hbar: f64,
    /// Initial state and potential.
    pub case: OracleCase,
    pub t_total: f64,
    pub dt: f64,
    pub scheme: Scheme,
    /// Reference solver step; `None` uses `dt`.
    pub reference_dt: Option<f64>,
    pub revival: RevivalConfig,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            x_min: -16.0,
            x_max: 16.0,
            n: 1024,
            mass: 1.0,
            hbar: 1.0,
            case: OracleCase::FreeGaussian {
                x0: 0.0,
                p0: 0.0,
                sigma: 1.0,
            },
            t_total: 2.0,
            dt: 1e-3,
            scheme: Scheme::Midpoint,
            reference_dt: None,
            revival: RevivalConfig::default(),
        }
    }
}

impl GridConfig {
    pub fn space_grid(&self) -> Result<SpaceGrid> {
        SpaceGrid::new(self.x_min, self.x_max, self.n)
    }
}

/// The `pathsum` block: the Monte Carlo path-sum estimator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathSumBlock {
    pub x_min: f64,
    pub x_max: f64,
    pub n: usize,
    pub mass: f64,
    pub case: OracleCase,
    pub potential: Potential,
    pub dt: f64,
    pub n_slices: usize,
    /// Points per diffusion length; ignored when `rho` is set.
    pub rho_ell: f64,
    /// Points per unit length.
    pub rho: Option<f64>,
    pub truncation_radius: Option<f64>,
    /// `None` uses the run seed.
    pub seed: Option<u64>,
    pub replicas: usize,
    /// Densities (per diffusion length) for the error-scaling fit.
    pub sweep: Vec<f64>,
}

impl Default for PathSumBlock {
    fn default() -> Self {
        Self {
            x_min: -12.0,
            x_max: 12.0,
            n: 512,
            mass: 1.0,
            case: OracleCase::FreeGaussian {
                x0: 0.0,
                p0: 0.5,
                sigma: 1.0,
            },
            potential: Potential::Free,
            dt: 0.05,
            n_slices: 1,
            rho_ell: 64.0,
            rho: None,
            truncation_radius: Some(4.0),
            seed: None,
            replicas: 256,
            sweep: vec![16.0, 32.0, 64.0, 128.0, 256.0],
        }
    }
}

/// The `macro` block: fluctuation-width and 10% spreading-time scaling.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MacroConfig {
    pub mu: f64,
    pub potential: Potential,
    /// Spread `s` of the scaled mode, `σ0 = s/√N`.
    pub scaled_spread: f64,
    pub width_t: f64,
    pub width_ns: Vec<u64>,
    /// `σ0` of the fixed mode.
    pub fixed_sigma0: f64,
    pub spreading_ns: Vec<u64>,
}

impl Default for MacroConfig {
    fn default() -> Self {
        Self {
            mu: 1.0,
            potential: Potential::Free,
            scaled_spread: 1.0,
            width_t: 1.0,
            width_ns: vec![100, 1_000, 10_000, 100_000, 1_000_000],
            fixed_sigma0: 1.0,
            spreading_ns: vec![10, 100, 1_000, 10_000],
        }
    }
}

/// The `detector` block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectorConfig {
    pub model: DetectorModel,
    /// Reference solver step.
    pub dt: f64,
    /// `None` runs to `t_s + 3 (t_B+ - t_s)`.
    pub t_end: Option<f64>,
    /// Separation threshold in units of `d_N`.
    pub threshold_multiple: f64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            model: DetectorModel::two_branch(0.3),
            dt: 2e-3,
            t_end: None,
            threshold_multiple: COHERENCE_SEPARATION,
        }
    }
}

/// The `ensemble` block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnsembleConfig {
    pub samples: usize,
    /// `None` uses the detector's default noise.
    pub noise: Option<f64>,
    /// Write `trajectories.csv` every this many frames.
    pub trajectory_stride: Option<usize>,
    /// Seeds `seed, seed+1, ...` used for the binomial-band repetition.
    pub band_seeds: usize,
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        Self {
            samples: 10_000,
            noise: None,
            trajectory_stride: None,
            band_seeds: 100,
        }
    }
}

fn default_seed() -> u64 {
    42
}

fn default_output() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub experiment: Experiment,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub grid: GridConfig,
    #[serde(default)]
    pub pathsum: PathSumBlock,
    #[serde(default, rename = "macro")]
    pub macro_scaling: MacroConfig,
    #[serde(default)]
    pub detector: DetectorConfig,
    #[serde(default)]
    pub ensemble: EnsembleConfig,
}

impl RunConfig {
    pub fn new(experiment: Experiment) -> Self {
        Self {
            experiment,
            seed: default_seed(),
            output_dir: default_output(),
            grid: GridConfig::default(),
            pathsum: PathSumBlock::default(),
            macro_scaling: MacroConfig::default(),
            detector: DetectorConfig::default(),
            ensemble: EnsembleConfig::default(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::ConfigInvalid(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::ConfigInvalid(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::ConfigInvalid(m));
        let g = &self.grid;
        if !(g.x_max > g.x_min) || g.n < 16 || !(g.mass > 0.0) || !(g.hbar > 0.0) || !(g.dt > 0.0) || g.t_total < 0.0 {
            return bad("grid: need x_max > x_min, n >= 16, mass, hbar, dt > 0 and t_total >= 0".into());
        }
        let r = &g.revival;
        if !(r.x_max > r.x_min) || r.n < 16 || !(r.omega > 0.0) || r.periods == 0 || r.steps_per_period == 0 {
            return bad("grid.revival: need a valid box, omega > 0, periods and steps_per_period >= 1".into());
        }
        let p = &self.pathsum;
        if !(p.x_max > p.x_min) || p.n < 16 || !(p.dt > 0.0) || p.replicas < 2 || !(p.mass > 0.0) {
            return bad("pathsum: need a valid box, dt > 0, mass > 0 and replicas >= 2".into());
        }
        if p.sweep.iter().any(|v| !(*v > 0.0)) {
            return bad("pathsum.sweep: densities must be positive".into());
        }
        let m = &self.macro_scaling;
        if m.width_ns.len() < 2 || m.spreading_ns.len() < 2 || !(m.mu > 0.0) || !(m.fixed_sigma0 > 0.0) {
            return bad("macro: need two or more N values per study, mu > 0 and fixed_sigma0 > 0".into());
        }
        let d = &self.detector;
        d.model
            .validate()
            .map_err(|e| Error::ConfigInvalid(format!("detector.model: {e}")))?;
        if !(d.dt > 0.0) || !(d.threshold_multiple >= 0.0) {
            return bad("detector: need dt > 0 and threshold_multiple >= 0".into());
        }
        let e = &self.ensemble;
        if e.samples == 0 || e.band_seeds == 0 {
            return bad("ensemble: samples and band_seeds must be positive".into());
        }
        if matches!(e.noise, Some(v) if !(v >= 0.0)) {
            return bad("ensemble.noise must be non-negative".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_fills_defaults() {
        let cfg = RunConfig::from_json(r#"{"experiment": "accept-all"}"#).unwrap();
        assert_eq!(cfg.seed, 42);
        assert_eq!(cfg.grid, GridConfig::default());
    }

    #[test]
    fn unknown_keys_rejected() {
        for text in [
            r#"{"experiment": "measure", "colour": 1}"#,
            r#"{"experiment": "measure", "grid": {"nx": 3}}"#,
            r#"{"experiment": "measure", "detector": {"model": {"mu": 1}}}"#,
            r#"{"experiment": "teleport"}"#,
        ] {
            assert!(
                matches!(RunConfig::from_json(text), Err(Error::ConfigInvalid(_))),
                "{text}"
            );
        }
    }

    #[test]
    fn round_trip() {
        let cfg = RunConfig::new(Experiment::BranchMc);
        assert_eq!(RunConfig::from_json(&cfg.to_json()).unwrap(), cfg);
    }

    #[test]
    fn bad_amplitudes_rejected() {
        let mut cfg = RunConfig::new(Experiment::Measure);
        cfg.detector.model.amplitudes[0] *= 2.0;
        assert!(cfg.validate().is_err());
    }
}
