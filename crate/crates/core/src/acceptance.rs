//! The acceptance suite: one pass/fail verdict per criterion, with the
//! measured values that decided it.

use std::time::{Duration, Instant};

use serde::Serialize;
use serde_json::{json, Value};

use crate::config::RunConfig;
use crate::ensemble::{BranchReport, TimeAverage};
use crate::error::Result;
use crate::experiments::{
    born_band, branch_mc, detector_run, macro_scaling, mc_pathsum, measure_summary, propagate, revival, time_average,
    BandSummary, MacroResult, McSummary, MeasureSummary, PropagateSummary, RevivalSummary,
};
use crate::stats::binomial_stderr;

pub const PROPAGATE_L2: f64 = 1e-4;
pub const WIDTH_TOL: f64 = 1e-3;
pub const REVIVAL_TOL: f64 = 1e-3;
pub const MC_STDERR_MULTIPLE: f64 = 3.0;
pub const MC_SLOPE: f64 = -0.5;
pub const MC_SLOPE_TOL: f64 = 0.1;
pub const WIDTH_SLOPE: f64 = -0.5;
pub const WIDTH_SLOPE_TOL: f64 = 0.02;
pub const SPREAD_SLOPE: f64 = 1.0;
pub const SPREAD_SLOPE_TOL: f64 = 0.05;
pub const PEAK_WEIGHT_TOL: f64 = 1e-3;
pub const OVERLAP_LIMIT: f64 = 1e-5;
pub const FREEZING_LIMIT: f64 = 1e-10;
pub const BAND_SIGMAS: f64 = 3.0;
pub const BAND_MIN_WITHIN: usize = 99;
pub const UNASSIGNED_LIMIT: f64 = 1e-3;
pub const KAPPA_TOL: f64 = 0.05;
pub const KAPPA_OWN_TOL: f64 = 0.1;
pub const KAPPA_OTHER_LIMIT: f64 = 0.05;
pub const WIDTH_RATIO_TOL: f64 = 0.15;
pub const CONSERVATION_TOL: f64 = 0.1;
pub const TIME_AVERAGE_TOL: f64 = 0.005;
pub const PROPAGATE_SECONDS: f64 = 30.0;
pub const BORN_SECONDS: f64 = 120.0;

/// A named sub-check of a criterion.
pub type Check = (String, bool);

fn check(name: impl Into<String>, pass: bool) -> Check {
    (name.into(), pass)
}

pub fn propagate_checks(s: &PropagateSummary) -> Vec<Check> {
    vec![
        check("l2_vs_oracle", s.l2_vs_oracle <= PROPAGATE_L2),
        check("l2_vs_reference", s.l2_vs_reference <= PROPAGATE_L2),
        check("width", (s.width - s.width_closed_form).abs() <= WIDTH_TOL),
    ]
}

pub fn revival_checks(s: &RevivalSummary) -> Vec<Check> {
    vec![check("mean_x", s.error <= REVIVAL_TOL)]
}

pub fn mc_checks(s: &McSummary) -> Vec<Check> {
    let slope = s.fit.map(|f| f.slope).unwrap_or(f64::NAN);
    vec![
        check(
            "rms_within_stderr",
            s.main.rms_deviation <= MC_STDERR_MULTIPLE * s.main.rms_stderr,
        ),
        check("slope", (slope - MC_SLOPE).abs() <= MC_SLOPE_TOL),
    ]
}

pub fn macro_checks(r: &MacroResult) -> Vec<Check> {
    let spread = r.spreading.spreading_fit.map(|f| f.slope).unwrap_or(f64::NAN);
    vec![
        check(
            "width_slope",
            (r.width.width_fit.slope - WIDTH_SLOPE).abs() <= WIDTH_SLOPE_TOL,
        ),
        check("spreading_slope", (spread - SPREAD_SLOPE).abs() <= SPREAD_SLOPE_TOL),
    ]
}

pub fn measure_checks(s: &MeasureSummary) -> Vec<Check> {
    let mut out: Vec<Check> = s
        .peak_weights
        .iter()
        .zip(&s.expected)
        .enumerate()
        .map(|(a, (w, e))| check(format!("peak_weight_{a}"), (w - e).abs() <= PEAK_WEIGHT_TOL))
        .collect();
    out.push(check("overlap", s.max_overlap < OVERLAP_LIMIT));
    out.push(check("freezing", s.freezing_drift < FREEZING_LIMIT));
    out
}

/// The single-seed part of the Born-statistics criterion.
pub fn born_checks(r: &BranchReport) -> Vec<Check> {
    let e = r.expected[0];
    vec![
        check(
            "fraction_in_band",
            (r.fractions[0] - e).abs() <= BAND_SIGMAS * binomial_stderr(e, r.samples),
        ),
        check(
            "unassigned",
            (r.unassigned as f64 / r.samples as f64) < UNASSIGNED_LIMIT,
        ),
    ]
}

pub fn band_checks(b: &BandSummary) -> Vec<Check> {
    let need = (BAND_MIN_WITHIN * b.seeds.len()).div_ceil(100);
    vec![
        check("seeds_within_band", b.within >= need),
        check("max_unassigned", b.max_unassigned_fraction < UNASSIGNED_LIMIT),
    ]
}

pub fn kappa_checks(r: &BranchReport) -> Vec<Check> {
    let mut out = Vec::new();
    for (a, k) in r.kappa.iter().enumerate() {
        out.push(check(
            format!("before_{a}"),
            (k.before - r.fractions[a]).abs() <= KAPPA_TOL,
        ));
        out.push(check(
            format!("after_own_{a}"),
            (k.after_own - 1.0).abs() <= KAPPA_OWN_TOL,
        ));
        out.push(check(format!("after_other_{a}"), k.after_other <= KAPPA_OTHER_LIMIT));
    }
    out
}

pub fn width_checks(r: &BranchReport) -> Vec<Check> {
    let mut out = Vec::new();
    for (a, w) in r.widths.iter().enumerate() {
        let e = r.expected[a];
        out.push(check(format!("ratio_{a}"), (w.ratio - e).abs() <= WIDTH_RATIO_TOL * e));
        out.push(check(
            format!("conservation_{a}"),
            (r.number_conservation[a] - 1.0).abs() <= CONSERVATION_TOL,
        ));
    }
    out
}

pub fn equivariance_checks(r: &BranchReport) -> Vec<Check> {
    let mut out: Vec<Check> = r
        .equivariance
        .iter()
        .enumerate()
        .map(|(i, p)| check(format!("probe_{i}"), p.distance <= p.band))
        .collect();
    out.push(check("probe_count", r.equivariance.len() == 5));
    out
}

/// Every single-seed check on a branch report.
pub fn report_checks(r: &BranchReport) -> Vec<Check> {
    let mut out = born_checks(r);
    out.extend(kappa_checks(r));
    out.extend(width_checks(r));
    out.extend(equivariance_checks(r));
    out
}

/// Basin fractions against the weights and, when given, the ensemble.
pub fn time_average_checks(ta: &TimeAverage, ensemble: Option<&BranchReport>) -> Vec<Check> {
    let mut out: Vec<Check> = ta
        .fractions
        .iter()
        .zip(&ta.expected)
        .enumerate()
        .map(|(a, (f, e))| check(format!("fraction_{a}"), (f - e).abs() <= TIME_AVERAGE_TOL))
        .collect();
    if let Some(r) = ensemble {
        for (a, (f, l)) in ta.fractions.iter().zip(&r.fractions).enumerate() {
            let se = binomial_stderr(*f, r.samples);
            out.push(check(format!("ensemble_{a}"), (f - l).abs() <= BAND_SIGMAS * se));
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CriterionResult {
    pub id: u32,
    pub name: String,
    pub target: String,
    pub measured: Value,
    pub failed_checks: Vec<String>,
    pub pass: bool,
}

impl CriterionResult {
    fn new(id: u32, name: &str, target: &str, measured: Value, checks: Vec<Check>) -> Self {
        let failed_checks: Vec<String> = checks.into_iter().filter(|c| !c.1).map(|c| c.0).collect();
        Self {
            id,
            name: name.into(),
            target: target.into(),
            measured,
            pass: failed_checks.is_empty(),
            failed_checks,
        }
    }

    /// `PASS [n] name: target` or `FAIL [n] name: target (failed: ...)`.
    pub fn line(&self) -> String {
        let verdict = if self.pass { "PASS" } else { "FAIL" };
        let mut s = format!("{verdict} [{:>2}] {}: {}", self.id, self.name, self.target);
        if !self.pass {
            s.push_str(&format!(" (failed: {})", self.failed_checks.join(", ")));
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AcceptanceReport {
    pub seed: u64,
    pub criteria: Vec<CriterionResult>,
    pub pass: bool,
}

/// Wall-clock budgets are checked but kept out of the report, which must
/// not depend on the machine.
fn timed<T>(f: impl FnOnce() -> Result<T>) -> Result<(T, Duration)> {
    let start = Instant::now();
    let v = f()?;
    Ok((v, start.elapsed()))
}

/// Runs every criterion in order, calling `on_result` as each one settles.
pub fn run_acceptance(
    cfg: &RunConfig,
    mut on_result: impl FnMut(&CriterionResult, Duration),
) -> Result<AcceptanceReport> {
    cfg.validate()?;
    let mut criteria = Vec::with_capacity(11);
    let mut emit = |c: CriterionResult, d: Duration, criteria: &mut Vec<CriterionResult>| {
        on_result(&c, d);
        criteria.push(c);
    };

    let (prop, d) = timed(|| propagate(&cfg.grid))?;
    let mut checks = propagate_checks(&prop.summary);
    checks.push(check("runtime", d.as_secs_f64() < PROPAGATE_SECONDS));
    emit(
        CriterionResult::new(
            1,
            "propagator correctness",
            "L2 <= 1e-4 vs oracle and reference; width within 1e-3 of closed form; runtime < 30 s",
            json!(prop.summary),
            checks,
        ),
        d,
        &mut criteria,
    );

    let (rv, d) = timed(|| revival(&cfg.grid.revival, cfg.grid.mass, cfg.grid.hbar))?;
    emit(
        CriterionResult::new(
            2,
            "harmonic revival",
            "|<x>(T) - x0| <= 1e-3",
            json!(rv),
            revival_checks(&rv),
        ),
        d,
        &mut criteria,
    );

    let (mc, d) = timed(|| mc_pathsum(&cfg.pathsum, cfg.seed))?;
    emit(
        CriterionResult::new(
            3,
            "Monte Carlo path sum",
            "RMS deviation <= 3 stderr; log-log slope -0.5 +/- 0.1",
            json!(mc.summary),
            mc_checks(&mc.summary),
        ),
        d,
        &mut criteria,
    );

    let (mac, d) = timed(|| macro_scaling(&cfg.macro_scaling))?;
    let measured = json!({
        "width_slope": mac.width.width_fit.slope,
        "width_slope_stderr": mac.width.width_fit.slope_stderr,
        "spreading_slope": mac.spreading.spreading_fit.map(|f| f.slope),
        "spreading_slope_stderr": mac.spreading.spreading_fit.map(|f| f.slope_stderr),
    });
    emit(
        CriterionResult::new(
            4,
            "fluctuation scaling",
            "width slope -0.50 +/- 0.02; spreading-time slope 1.00 +/- 0.05",
            measured,
            macro_checks(&mac),
        ),
        d,
        &mut criteria,
    );

    let (run, d_frames) = timed(|| detector_run(&cfg.detector))?;
    let (meas, d) = timed(|| measure_summary(&run, &cfg.detector))?;
    emit(
        CriterionResult::new(
            5,
            "signal evolution",
            "peak weights within 1e-3; overlap < 1e-5; freezing drift < 1e-10",
            json!(meas),
            measure_checks(&meas),
        ),
        d_frames + d,
        &mut criteria,
    );

    let (band, d_band) = timed(|| born_band(&run.frames, &cfg.ensemble, cfg.seed))?;
    let ((_, report), d_main) = timed(|| branch_mc(&run.frames, &cfg.ensemble, cfg.seed))?;
    let d_born = d_frames + d_band + d_main;
    let mut checks = born_checks(&report);
    checks.extend(band_checks(&band));
    checks.push(check("runtime", d_born.as_secs_f64() < BORN_SECONDS));
    let measured = json!({
        "fraction": report.fractions[0],
        "expected": report.expected[0],
        "half_width": band.half_width,
        "unassigned": report.unassigned,
        "seeds": band.seeds.len(),
        "seeds_within": band.within,
        "max_unassigned_fraction": band.max_unassigned_fraction,
    });
    emit(
        CriterionResult::new(
            6,
            "Born statistics",
            "seed fraction within 3 sigma; >= 99 of 100 seeds within 3 sigma; unassigned < 1e-3; runtime < 2 min",
            measured,
            checks,
        ),
        d_born,
        &mut criteria,
    );

    emit(
        CriterionResult::new(
            7,
            "kappa regimes",
            "before: L_a/L +/- 0.05; own peak after: 1 +/- 0.1; other peak after: <= 0.05",
            json!({ "kappa": report.kappa, "fractions": report.fractions }),
            kappa_checks(&report),
        ),
        Duration::ZERO,
        &mut criteria,
    );

    emit(
        CriterionResult::new(
            8,
            "width ratio",
            "group width ratio |c_a|^2 +/- 15%; number conservation +/- 10%",
            json!({ "widths": report.widths, "number_conservation": report.number_conservation }),
            width_checks(&report),
        ),
        Duration::ZERO,
        &mut criteria,
    );

    let (ta, d) = timed(|| time_average(&run.frames))?;
    emit(
        CriterionResult::new(
            9,
            "time-average fractions",
            "basin fractions within 0.005 of |c_a|^2 and within 3 sigma of the ensemble",
            json!({ "time_average": ta, "ensemble": report.fractions }),
            time_average_checks(&ta, Some(&report)),
        ),
        d,
        &mut criteria,
    );

    emit(
        CriterionResult::new(
            10,
            "equivariance",
            "KS distance within the 99% band at 5 probe times",
            json!(report.equivariance),
            equivariance_checks(&report),
        ),
        Duration::ZERO,
        &mut criteria,
    );

    // Repeat the seeded computations and compare serialized bytes.
    let (same, d) = timed(|| {
        let mc2 = mc_pathsum(&cfg.pathsum, cfg.seed)?;
        let (_, report2) = branch_mc(&run.frames, &cfg.ensemble, cfg.seed)?;
        let ta2 = time_average(&run.frames)?;
        let bytes = |v: Value| serde_json::to_string(&v).unwrap_or_default();
        Ok([
            ("mc_pathsum", bytes(json!(mc.summary)) == bytes(json!(mc2.summary))),
            ("branch_report", bytes(json!(report)) == bytes(json!(report2))),
            ("time_average", bytes(json!(ta)) == bytes(json!(ta2))),
        ])
    })?;
    let measured: serde_json::Map<String, Value> = same.iter().map(|(k, v)| (k.to_string(), json!(v))).collect();
    emit(
        CriterionResult::new(
            11,
            "determinism",
            "repeated seeded runs serialize to identical bytes",
            Value::Object(measured),
            same.iter().map(|(k, v)| check(*k, *v)).collect(),
        ),
        d,
        &mut criteria,
    );

    let pass = criteria.iter().all(|c| c.pass);
    Ok(AcceptanceReport {
        seed: cfg.seed,
        criteria,
        pass,
    })
}
