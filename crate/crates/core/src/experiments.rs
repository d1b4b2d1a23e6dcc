//! The runnable experiments behind the command line, and their artifacts.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::Serialize;
use serde_json::{json, Value};

use crate::config::{
    DetectorConfig, EnsembleConfig, Experiment, GridConfig, MacroConfig, PathSumBlock, RevivalConfig, RunConfig,
};
use crate::ensemble::{
    analyze_ensemble, evolve_ensemble, time_average_fraction, BranchReport, EnsembleSettings, FlowFrames, FlowPlan,
    SampleEnsemble, TimeAverage,
};
use crate::error::{Error, Result};
use crate::grids::{diagnostics, Potential, SpaceGrid, WaveFunction};
use crate::macrovariable::{scaling_study, MacroSystem, ScalingStudy, Sigma0};
use crate::measurement::{peak_weights, separation_time, BranchSet, PairSeparation};
use crate::pathsum::{
    deterministic_slices, monte_carlo_path_sum, propagate_pathsum, propagate_with, MonteCarloEstimate, PathSumConfig,
    ShortTimeKernel,
};
use crate::schrodinger_ref::{analytic_oracle, propagate_reference, OracleCase, ReferenceConfig};
use crate::stats::{binomial_stderr, loglog_fit, LinearFit};

#[derive(Debug, Clone)]
pub struct PropagateResult {
    pub pathsum: WaveFunction,
    pub reference: WaveFunction,
    pub oracle: WaveFunction,
    pub summary: PropagateSummary,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PropagateSummary {
    pub steps: usize,
    pub lattice_ratio: usize,
    pub lattice_density: f64,
    pub l2_vs_oracle: f64,
    pub l2_vs_reference: f64,
    pub width: f64,
    pub width_closed_form: f64,
    pub mean_x: f64,
    pub mean_x_closed_form: f64,
    pub max_step_drift: f64,
}

/// Path-sum evolution of the configured packet, with the reference solver
/// and the closed form at the final time.
pub fn propagate(cfg: &GridConfig) -> Result<PropagateResult> {
    let grid = cfg.space_grid()?;
    let psi0 = analytic_oracle(&cfg.case, &grid, cfg.mass, cfg.hbar, 0.0)?;
    let pot = cfg.case.potential(cfg.mass);
    let kernel = ShortTimeKernel::for_wave(&psi0, pot.clone(), cfg.dt)?.with_scheme(cfg.scheme);
    let run = propagate_with(&psi0, &kernel, cfg.t_total)?;
    let reference = propagate_reference(
        &psi0,
        &pot,
        cfg.t_total,
        &ReferenceConfig::new(cfg.reference_dt.unwrap_or(cfg.dt)),
    )?;
    let oracle = analytic_oracle(&cfg.case, &grid, cfg.mass, cfg.hbar, cfg.t_total)?;
    let d = diagnostics(&run.psi, &pot);
    let summary = PropagateSummary {
        steps: run.steps,
        lattice_ratio: run.lattice_ratio,
        lattice_density: run.lattice_density,
        l2_vs_oracle: run.psi.l2_distance(&oracle),
        l2_vs_reference: run.psi.l2_distance(&reference),
        width: d.var_x.sqrt(),
        width_closed_form: cfg.case.variance(cfg.mass, cfg.hbar, cfg.t_total).sqrt(),
        mean_x: d.mean_x,
        mean_x_closed_form: cfg.case.center(cfg.mass, cfg.t_total),
        max_step_drift: run.max_step_drift,
    };
    Ok(PropagateResult {
        pathsum: run.psi,
        reference,
        oracle,
        summary,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RevivalSummary {
    pub periods: u32,
    pub dt: f64,
    pub x0: f64,
    pub mean_x: f64,
    pub error: f64,
}

/// Coherent state in a harmonic well over whole periods.
pub fn revival(cfg: &RevivalConfig, mass: f64, hbar: f64) -> Result<RevivalSummary> {
    let grid = SpaceGrid::new(cfg.x_min, cfg.x_max, cfg.n)?;
    let case = OracleCase::HarmonicCoherent {
        x0: cfg.x0,
        p0: 0.0,
        omega: cfg.omega,
    };
    let psi0 = analytic_oracle(&case, &grid, mass, hbar, 0.0)?;
    let period = 2.0 * std::f64::consts::PI / cfg.omega;
    let dt = period / cfg.steps_per_period as f64;
    let pot = Potential::harmonic(mass, cfg.omega);
    let out = propagate_pathsum(&psi0, &pot, cfg.periods as f64 * period, dt)?;
    let mean_x = diagnostics(&out, &pot).mean_x;
    Ok(RevivalSummary {
        periods: cfg.periods,
        dt,
        x0: cfg.x0,
        mean_x,
        error: (mean_x - cfg.x0).abs(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SweepPoint {
    pub rho_ell: f64,
    pub points_per_slice: usize,
    pub rms_deviation: f64,
    pub rms_stderr: f64,
}

#[derive(Debug, Clone)]
pub struct McResult {
    pub estimate: MonteCarloEstimate,
    pub reference: WaveFunction,
    pub summary: McSummary,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct McSummary {
    pub seed: u64,
    pub replicas: usize,
    pub n_slices: usize,
    pub main: SweepPoint,
    pub coverage_2se: f64,
    pub sweep: Vec<SweepPoint>,
    /// log RMS deviation against log density.
    pub fit: Option<LinearFit>,
}

fn mc_config(cfg: &PathSumBlock, psi0: &WaveFunction, rho_ell: f64, seed: u64) -> Result<PathSumConfig> {
    let kernel = ShortTimeKernel::for_wave(psi0, cfg.potential.clone(), cfg.dt)?;
    let mut pc = PathSumConfig::from_rho_ell(rho_ell, kernel.ell_d, seed);
    pc.truncation_radius = cfg.truncation_radius;
    pc.replicas = cfg.replicas;
    Ok(pc)
}

/// Monte Carlo path sum at the configured density, and its error against
/// the deterministic step over a sweep of densities.
pub fn mc_pathsum(cfg: &PathSumBlock, run_seed: u64) -> Result<McResult> {
    let seed = cfg.seed.unwrap_or(run_seed);
    let grid = SpaceGrid::new(cfg.x_min, cfg.x_max, cfg.n)?;
    let psi0 = analytic_oracle(&cfg.case, &grid, cfg.mass, 1.0, 0.0)?;
    let mut main_cfg = mc_config(cfg, &psi0, cfg.rho_ell, seed)?;
    if let Some(rho) = cfg.rho {
        main_cfg.rho = rho;
    }
    let estimate = monte_carlo_path_sum(&psi0, &cfg.potential, cfg.n_slices, cfg.dt, &main_cfg)?;
    let reference = deterministic_slices(&psi0, &estimate.kernel, cfg.n_slices)?;
    let point = |est: &MonteCarloEstimate| {
        let (dev, se) = est.rms_against(&reference);
        SweepPoint {
            rho_ell: est.rho_ell,
            points_per_slice: est.points_per_slice,
            rms_deviation: dev,
            rms_stderr: se,
        }
    };
    let main = point(&estimate);
    let mut sweep = Vec::with_capacity(cfg.sweep.len());
    for &rho_ell in &cfg.sweep {
        if cfg.rho.is_none() && rho_ell == cfg.rho_ell {
            sweep.push(main);
            continue;
        }
        let pc = mc_config(cfg, &psi0, rho_ell, seed)?;
        sweep.push(point(&monte_carlo_path_sum(
            &psi0,
            &cfg.potential,
            cfg.n_slices,
            cfg.dt,
            &pc,
        )?));
    }
    let fit = (sweep.len() >= 2).then(|| {
        loglog_fit(
            &sweep.iter().map(|p| p.rho_ell).collect::<Vec<_>>(),
            &sweep.iter().map(|p| p.rms_deviation).collect::<Vec<_>>(),
        )
    });
    let summary = McSummary {
        seed,
        replicas: cfg.replicas,
        n_slices: cfg.n_slices,
        main,
        coverage_2se: estimate.coverage(&reference, 2.0),
        sweep,
        fit,
    };
    Ok(McResult {
        estimate,
        reference,
        summary,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MacroResult {
    /// Scaled mode: width at fixed `t`.
    pub width: ScalingStudy,
    /// Fixed mode: time to spread by 10%.
    pub spreading: ScalingStudy,
}

pub fn macro_scaling(cfg: &MacroConfig) -> Result<MacroResult> {
    let scaled = MacroSystem::new(1, cfg.mu, cfg.potential.clone(), Sigma0::Scaled(cfg.scaled_spread))?;
    let width = scaling_study(&scaled, &cfg.width_ns, cfg.width_t, false)?;
    let fixed = MacroSystem::new(1, cfg.mu, Potential::Free, Sigma0::Fixed(cfg.fixed_sigma0))?;
    let spreading = scaling_study(&fixed, &cfg.spreading_ns, cfg.width_t, true)?;
    Ok(MacroResult { width, spreading })
}

/// Branch evolution with the flow tabulated for the ensemble.
#[derive(Debug, Clone)]
pub struct DetectorRun {
    pub plan: FlowPlan,
    pub set: BranchSet,
    pub frames: FlowFrames,
}

pub fn detector_run(cfg: &DetectorConfig) -> Result<DetectorRun> {
    let plan = FlowPlan::for_detector(&cfg.model, cfg.dt, cfg.t_end)?;
    let (set, frames) = FlowFrames::build(&cfg.model, &plan)?;
    Ok(DetectorRun { plan, set, frames })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MeasureSummary {
    pub separations: Vec<PairSeparation>,
    pub t_end: f64,
    pub d_n: f64,
    pub peak_positions: Vec<f64>,
    pub peak_weights: Vec<f64>,
    pub expected: Vec<f64>,
    pub max_overlap: f64,
    pub freezing_drift: f64,
    pub max_tracking_error: f64,
    pub grid_points: usize,
    pub dx: f64,
}

pub fn measure_summary(run: &DetectorRun, cfg: &DetectorConfig) -> Result<MeasureSummary> {
    let det = &cfg.model;
    let t = run.set.t_end;
    let d_n = det.d_n(t);
    Ok(MeasureSummary {
        separations: separation_time(det, cfg.threshold_multiple)?,
        t_end: t,
        d_n,
        peak_positions: run.set.peak_positions(),
        peak_weights: peak_weights(&run.set.signal(), det, t, d_n)?,
        expected: det.weights(),
        max_overlap: run.set.max_overlap(),
        freezing_drift: run.set.freezing_drift,
        max_tracking_error: run.set.max_tracking_error,
        grid_points: run.set.grid.len(),
        dx: run.set.grid.dx(),
    })
}

fn settings(cfg: &EnsembleConfig, seed: u64) -> EnsembleSettings {
    EnsembleSettings {
        samples: cfg.samples,
        seed,
        noise: cfg.noise,
        record_stride: cfg.trajectory_stride,
    }
}

pub fn branch_mc(frames: &FlowFrames, cfg: &EnsembleConfig, seed: u64) -> Result<(SampleEnsemble, BranchReport)> {
    let ens = evolve_ensemble(frames, &settings(cfg, seed))?;
    let report = analyze_ensemble(&ens, frames)?;
    Ok((ens, report))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BandSummary {
    pub branch: usize,
    pub expected: f64,
    /// Three binomial standard errors.
    pub half_width: f64,
    pub seeds: Vec<u64>,
    pub fractions: Vec<f64>,
    pub within: usize,
    pub max_unassigned_fraction: f64,
}

/// Branch-0 fraction over `band_seeds` consecutive seeds starting at `seed`.
pub fn born_band(frames: &FlowFrames, cfg: &EnsembleConfig, seed: u64) -> Result<BandSummary> {
    let expected = frames.detector.weights()[0];
    let half_width = 3.0 * binomial_stderr(expected, cfg.samples);
    let plain = EnsembleConfig {
        trajectory_stride: None,
        ..cfg.clone()
    };
    let mut fractions = Vec::with_capacity(cfg.band_seeds);
    let mut max_unassigned: f64 = 0.0;
    let seeds: Vec<u64> = (0..cfg.band_seeds as u64).map(|k| seed.wrapping_add(k)).collect();
    for &s in &seeds {
        let ens = evolve_ensemble(frames, &settings(&plain, s))?;
        let hits = ens.labels.iter().filter(|l| **l == Some(0)).count();
        let unassigned = ens.labels.iter().filter(|l| l.is_none()).count();
        fractions.push(hits as f64 / cfg.samples as f64);
        max_unassigned = max_unassigned.max(unassigned as f64 / cfg.samples as f64);
    }
    let within = fractions
        .iter()
        .filter(|f| (**f - expected).abs() <= half_width)
        .count();
    Ok(BandSummary {
        branch: 0,
        expected,
        half_width,
        seeds,
        fractions,
        within,
        max_unassigned_fraction: max_unassigned,
    })
}

pub fn time_average(frames: &FlowFrames) -> Result<TimeAverage> {
    time_average_fraction(frames)
}

/// Writes `value` as pretty JSON followed by a newline.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value).map_err(|e| Error::Io(e.to_string()))?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

fn write_with(path: &Path, f: impl FnOnce(&mut BufWriter<File>) -> Result<()>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    f(&mut w)?;
    w.flush()?;
    Ok(())
}

/// What a run produced.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunOutcome {
    pub experiment: String,
    pub pass: bool,
    pub summary: Value,
    pub artifacts: Vec<String>,
}

fn manifest(cfg: &RunConfig, artifacts: &[String]) -> Value {
    json!({
        "experiment": cfg.experiment.name(),
        "package": env!("CARGO_PKG_NAME"),
        "version": env!("CARGO_PKG_VERSION"),
        "config": cfg,
        "artifacts": artifacts,
    })
}

/// Runs the configured experiment, writing artifacts and `manifest.json`
/// into `out`.
pub fn run(cfg: &RunConfig, out: &Path) -> Result<RunOutcome> {
    run_with(cfg, out, |_, _| {})
}

/// As [`run`], reporting each acceptance criterion as it settles.
pub fn run_with(
    cfg: &RunConfig,
    out: &Path,
    on_result: impl FnMut(&crate::acceptance::CriterionResult, std::time::Duration),
) -> Result<RunOutcome> {
    cfg.validate()?;
    fs::create_dir_all(out)?;
    let mut artifacts: Vec<String> = Vec::new();
    let mut emit = |name: &str| artifacts.push(name.to_string());
    let (pass, summary) = match cfg.experiment {
        Experiment::Propagate => {
            let r = propagate(&cfg.grid)?;
            write_with(&out.join("psi_pathsum.csv"), |w| r.pathsum.write_csv(w))?;
            write_with(&out.join("psi_reference.csv"), |w| r.reference.write_csv(w))?;
            write_with(&out.join("psi_oracle.csv"), |w| r.oracle.write_csv(w))?;
            ["psi_pathsum.csv", "psi_reference.csv", "psi_oracle.csv"]
                .iter()
                .for_each(|n| emit(n));
            let rv = revival(&cfg.grid.revival, cfg.grid.mass, cfg.grid.hbar)?;
            let pass = crate::acceptance::propagate_checks(&r.summary).iter().all(|c| c.1)
                && crate::acceptance::revival_checks(&rv).iter().all(|c| c.1);
            (pass, json!({ "propagate": r.summary, "revival": rv }))
        }
        Experiment::McPathsum => {
            let r = mc_pathsum(&cfg.pathsum, cfg.seed)?;
            write_with(&out.join("mc_estimate.csv"), |w| {
                writeln!(w, "x,re_est,im_est,stderr,re_ref,im_ref")?;
                let g = r.estimate.estimate.grid();
                for (k, ((e, s), d)) in r
                    .estimate
                    .estimate
                    .amp()
                    .iter()
                    .zip(&r.estimate.stderr)
                    .zip(r.reference.amp())
                    .enumerate()
                {
                    writeln!(
                        w,
                        "{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e}",
                        g.x(k),
                        e.re,
                        e.im,
                        s,
                        d.re,
                        d.im
                    )?;
                }
                Ok(())
            })?;
            emit("mc_estimate.csv");
            let pass = crate::acceptance::mc_checks(&r.summary).iter().all(|c| c.1);
            (pass, json!(r.summary))
        }
        Experiment::MacroScaling => {
            let r = macro_scaling(&cfg.macro_scaling)?;
            write_with(&out.join("width_scaling.csv"), |w| r.width.write_csv(w))?;
            write_with(&out.join("spreading_scaling.csv"), |w| r.spreading.write_csv(w))?;
            emit("width_scaling.csv");
            emit("spreading_scaling.csv");
            let pass = crate::acceptance::macro_checks(&r).iter().all(|c| c.1);
            (pass, json!(r))
        }
        Experiment::Measure => {
            let run = detector_run(&cfg.detector)?;
            let s = measure_summary(&run, &cfg.detector)?;
            write_with(&out.join("branch_tracks.csv"), |w| run.set.write_tracks_csv(w))?;
            write_with(&out.join("signal.csv"), |w| run.set.signal().write_csv(w))?;
            write_with(&out.join("signal_frames.csv"), |w| write_signal_frames(w, &run.frames))?;
            ["branch_tracks.csv", "signal.csv", "signal_frames.csv"]
                .iter()
                .for_each(|n| emit(n));
            let pass = crate::acceptance::measure_checks(&s).iter().all(|c| c.1);
            (pass, json!(s))
        }
        Experiment::BranchMc => {
            let run = detector_run(&cfg.detector)?;
            let (ens, report) = branch_mc(&run.frames, &cfg.ensemble, cfg.seed)?;
            write_json(&out.join("branch_report.json"), &report)?;
            emit("branch_report.json");
            if let Some(stride) = cfg.ensemble.trajectory_stride {
                write_with(&out.join("trajectories.csv"), |w| {
                    ens.write_trajectories_csv(w, &run.frames, stride)
                })?;
                emit("trajectories.csv");
            }
            let pass = crate::acceptance::report_checks(&report).iter().all(|c| c.1);
            (pass, json!(report))
        }
        Experiment::TimeAverage => {
            let run = detector_run(&cfg.detector)?;
            let ta = time_average(&run.frames)?;
            write_json(&out.join("time_average.json"), &ta)?;
            emit("time_average.json");
            let pass = crate::acceptance::time_average_checks(&ta, None).iter().all(|c| c.1);
            (pass, json!(ta))
        }
        Experiment::AcceptAll => {
            let report = crate::acceptance::run_acceptance(cfg, on_result)?;
            (report.pass, json!(report))
        }
    };
    write_json(&out.join("summary.json"), &summary)?;
    emit("summary.json");
    artifacts.push("manifest.json".into());
    write_json(&out.join("manifest.json"), &manifest(cfg, &artifacts))?;
    Ok(RunOutcome {
        experiment: cfg.experiment.name().into(),
        pass,
        summary,
        artifacts,
    })
}

/// Rows `t,X,J` for every frame, on the coarse frame grid.
pub fn write_signal_frames<W: Write>(mut w: W, frames: &FlowFrames) -> Result<()> {
    writeln!(w, "t,X,J")?;
    for f in &frames.frames {
        for (k, j) in f.density.iter().enumerate() {
            writeln!(w, "{:.16e},{:.16e},{:.16e}", f.t, frames.x(k), j)?;
        }
    }
    Ok(())
}
