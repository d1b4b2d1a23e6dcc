//! Center-of-mass macrovariable `X = Σ y_i / N`.
//!
//! X moves with mass `Nμ` in the potential `N·V(X)`, where `V` is the
//! per-degree potential stored in [`MacroSystem`]. The stationary path is
//! the discrete Euler–Lagrange solution of the Störmer–Verlet Lagrangian
//! `Nμ(X_{k+1}-X_k)²/(2dt) - N dt (V(X_k)+V(X_{k+1}))/2`.

use std::io::Write;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grids::{diagnostics, gaussian_packet, spectral_kinetic, Potential, SpaceGrid, TimeGrid, WaveFunction};
use crate::schrodinger_ref::{propagate_reference_observed, ReferenceConfig};
use crate::stats::{loglog_fit, LinearFit};

/// Two peaks belong to different coherence groups past this many `d_N`.
pub const COHERENCE_SEPARATION: f64 = 10.0;
const NEWTON_MAX_ITER: usize = 100;
const MAX_GRID_POINTS: usize = 1 << 20;

/// Initial X-packet width convention.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sigma0 {
    /// Width independent of N.
    Fixed(f64),
    /// Width `s/√N`, the spread of a mean of N i.i.d. coordinates of spread `s`.
    Scaled(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MacroSystem {
    pub n: u64,
    pub mu: f64,
    /// Potential per microdegree; X feels `n` times this.
    pub potential: Potential,
    pub sigma0: Sigma0,
    #[serde(default = "one")]
    pub hbar: f64,
}

fn one() -> f64 {
    1.0
}

impl MacroSystem {
    pub fn new(n: u64, mu: f64, potential: Potential, sigma0: Sigma0) -> Result<Self> {
        let s = Self {
            n,
            mu,
            potential,
            sigma0,
            hbar: 1.0,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n < 1 {
            return Err(Error::InvalidParameter("N must be >= 1".into()));
        }
        if !(self.mu > 0.0) || !(self.hbar > 0.0) {
            return Err(Error::InvalidParameter(format!("mu {}, hbar {}", self.mu, self.hbar)));
        }
        let s = match self.sigma0 {
            Sigma0::Fixed(s) | Sigma0::Scaled(s) => s,
        };
        if !(s > 0.0) {
            return Err(Error::InvalidParameter(format!("sigma0 {s}")));
        }
        Ok(())
    }

    pub fn effective_mass(&self) -> f64 {
        self.n as f64 * self.mu
    }

    pub fn sigma0_value(&self) -> f64 {
        match self.sigma0 {
            Sigma0::Fixed(s) => s,
            Sigma0::Scaled(s) => s / (self.n as f64).sqrt(),
        }
    }

    /// The potential acting on X, `N·V`.
    pub fn potential_x(&self) -> Potential {
        self.potential.scaled(self.n as f64)
    }

    /// Time for the free packet width to change appreciably, `2Nμσ0²/ħ`.
    pub fn spreading_scale(&self) -> f64 {
        2.0 * self.effective_mass() * self.sigma0_value().powi(2) / self.hbar
    }

    /// Closed-form width of the Gaussian X packet released at rest.
    pub fn closed_form_width(&self, t: f64) -> Option<f64> {
        let s0 = self.sigma0_value();
        match self.potential {
            Potential::Free | Potential::Linear { .. } => {
                Some(s0 * (1.0 + (t / self.spreading_scale()).powi(2)).sqrt())
            }
            Potential::Harmonic { mass, omega } => {
                // per-degree V = m ω² X²/2; X oscillates at ω√(m/μ)
                let w = omega * (mass / self.mu).sqrt();
                let s1 = self.hbar / (2.0 * self.effective_mass() * w * s0);
                Some(((s0 * (w * t).cos()).powi(2) + (s1 * (w * t).sin()).powi(2)).sqrt())
            }
            Potential::Tabulated { .. } => None,
        }
    }

    fn oscillation_frequency(&self) -> Option<f64> {
        match self.potential {
            Potential::Harmonic { mass, omega } => Some(omega * (mass / self.mu).sqrt()),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StationaryPath {
    pub times: TimeGrid,
    pub x_values: Vec<f64>,
    pub action_value: f64,
    /// Largest |∂S/∂X_k| over the conditions imposed.
    pub residual: f64,
    /// |∂S/∂X_k| per node (zero where the node is fixed).
    pub defects: Vec<f64>,
    pub iterations: usize,
}

impl StationaryPath {
    pub fn t(&self, k: usize) -> f64 {
        self.times.t(k)
    }

    /// Velocity from the discrete Legendre transform.
    pub fn velocity(&self, system: &MacroSystem, k: usize) -> f64 {
        let dt = self.times.dt;
        let n = self.x_values.len() - 1;
        let g = |x: f64| system.potential.gradient(x) / system.mu;
        if k < n {
            (self.x_values[k + 1] - self.x_values[k]) / dt + 0.5 * dt * g(self.x_values[k])
        } else {
            (self.x_values[n] - self.x_values[n - 1]) / dt - 0.5 * dt * g(self.x_values[n])
        }
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "t,X,residual")?;
        for (k, (x, r)) in self.x_values.iter().zip(&self.defects).enumerate() {
            writeln!(w, "{:.16e},{:.16e},{:.16e}", self.t(k), x, r)?;
        }
        Ok(())
    }
}

/// Discrete action of the Störmer–Verlet Lagrangian along `xs`.
pub fn discrete_action(system: &MacroSystem, dt: f64, xs: &[f64]) -> f64 {
    let nm = system.effective_mass();
    let n = system.n as f64;
    xs.windows(2)
        .map(|p| {
            let v = (p[1] - p[0]) / dt;
            0.5 * nm * v * v * dt - n * dt * 0.5 * (system.potential.value(p[0]) + system.potential.value(p[1]))
        })
        .sum()
}

/// `∂S/∂X_k` at the interior nodes (index 0 and the last entry are zero).
fn interior_gradient(system: &MacroSystem, dt: f64, xs: &[f64]) -> Vec<f64> {
    let n = system.n as f64;
    let mu = system.mu;
    let mut g = vec![0.0; xs.len()];
    for k in 1..xs.len() - 1 {
        g[k] = n * (mu * (2.0 * xs[k] - xs[k - 1] - xs[k + 1]) / dt - dt * system.potential.gradient(xs[k]));
    }
    g
}

fn step_count(t_total: f64, dt: f64) -> Result<(usize, f64)> {
    if !(t_total > 0.0) || !(dt > 0.0) {
        return Err(Error::InvalidParameter(format!("T {t_total}, dt {dt}")));
    }
    let n = ((t_total / dt) - 1e-9).ceil().max(1.0) as usize;
    Ok((n, t_total / n as f64))
}

fn tolerance(action: f64) -> f64 {
    1e-10 * action.abs().max(1.0)
}

/// Stationary path from `X(0) = x0`, `Ẋ(0) = v0`. The step is shrunk to
/// `T/ceil(T/dt)` so the path ends exactly at `T`.
///
/// The unknowns `X_1..X_n` solve the initial-momentum condition plus the
/// interior Euler–Lagrange equations. Newton starts from the straight line
/// `x0 + v0 t`; its Jacobian is lower triangular with three bands, so each
/// iteration is a forward substitution.
pub fn stationary_path(system: &MacroSystem, x0: f64, v0: f64, t_total: f64, dt: f64) -> Result<StationaryPath> {
    system.validate()?;
    let (n, dt) = step_count(t_total, dt)?;
    let mu = system.mu;
    let nn = system.n as f64;
    let pot = &system.potential;
    let mut xs: Vec<f64> = (0..=n).map(|k| x0 + v0 * k as f64 * dt).collect();
    // per-unit-N residuals r_0 (momentum) and r_k (interior)
    let residuals = |xs: &[f64]| -> Vec<f64> {
        let mut r = vec![0.0; n];
        r[0] = mu * (xs[1] - xs[0]) / dt + 0.5 * dt * pot.gradient(xs[0]) - mu * v0;
        for k in 1..n {
            r[k] = mu * (2.0 * xs[k] - xs[k - 1] - xs[k + 1]) / dt - dt * pot.gradient(xs[k]);
        }
        r
    };
    let mut iterations = 0;
    loop {
        let r = residuals(&xs);
        let worst = r.iter().fold(0.0f64, |m, v| m.max(v.abs())) * nn;
        let action = discrete_action(system, dt, &xs);
        if worst <= tolerance(action) {
            let mut defects = interior_gradient(system, dt, &xs);
            defects[0] = (r[0] * nn).abs();
            defects.iter_mut().for_each(|d| *d = d.abs());
            let times = TimeGrid::new(0.0, dt, n)?;
            return Ok(StationaryPath {
                times,
                x_values: xs,
                action_value: action,
                residual: worst,
                defects,
                iterations,
            });
        }
        if iterations == NEWTON_MAX_ITER {
            return Err(Error::NewtonNoConvergence {
                iterations,
                residual: worst,
            });
        }
        // row k: d r_k / d X_{k+1} = -μ/dt (μ/dt for k = 0),
        //        d r_k / d X_k = 2μ/dt - dt V''(X_k), d r_k / d X_{k-1} = -μ/dt
        let mut delta = vec![0.0; n + 1];
        delta[1] = -r[0] / (mu / dt);
        for k in 1..n {
            let diag = 2.0 * mu / dt - dt * pot.curvature(xs[k]);
            let rhs = -r[k] - diag * delta[k] + mu / dt * delta[k - 1];
            delta[k + 1] = rhs / (-mu / dt);
        }
        let mut moved = 0.0f64;
        for k in 1..=n {
            xs[k] += delta[k];
            moved = moved.max(delta[k].abs());
        }
        iterations += 1;
        if !moved.is_finite() {
            return Err(Error::NewtonNoConvergence {
                iterations,
                residual: f64::NAN,
            });
        }
    }
}

/// Stationary path between fixed end points `X(0) = x0`, `X(T) = xt`.
/// A singular action Hessian (a conjugate point) is reported, not solved.
pub fn stationary_path_bvp(system: &MacroSystem, x0: f64, xt: f64, t_total: f64, dt: f64) -> Result<StationaryPath> {
    system.validate()?;
    let (n, dt) = step_count(t_total, dt)?;
    if n < 2 {
        return Err(Error::InvalidParameter(
            "boundary-value path needs at least two steps".into(),
        ));
    }
    let mu = system.mu;
    let nn = system.n as f64;
    let pot = &system.potential;
    let mut xs: Vec<f64> = (0..=n).map(|k| x0 + (xt - x0) * k as f64 / n as f64).collect();
    let mut iterations = 0;
    loop {
        let g = interior_gradient(system, dt, &xs);
        let worst = g.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let action = discrete_action(system, dt, &xs);
        if worst <= tolerance(action) {
            let times = TimeGrid::new(0.0, dt, n)?;
            let defects = g.iter().map(|d| d.abs()).collect();
            return Ok(StationaryPath {
                times,
                x_values: xs,
                action_value: action,
                residual: worst,
                defects,
                iterations,
            });
        }
        if iterations == NEWTON_MAX_ITER {
            return Err(Error::NewtonNoConvergence {
                iterations,
                residual: worst,
            });
        }
        // symmetric tridiagonal Hessian over interior nodes 1..n-1
        let m = n - 1;
        let off = -nn * mu / dt;
        let scale = 2.0 * nn * mu / dt;
        let mut cp = vec![0.0; m];
        let mut dp = vec![0.0; m];
        for i in 0..m {
            let k = i + 1;
            let diag = nn * (2.0 * mu / dt - dt * pot.curvature(xs[k]));
            let denom = if i == 0 { diag } else { diag - off * cp[i - 1] };
            if denom.abs() < 1e-9 * scale {
                return Err(Error::CausticDetected(denom / scale));
            }
            cp[i] = off / denom;
            dp[i] = if i == 0 {
                -g[k] / denom
            } else {
                (-g[k] - off * dp[i - 1]) / denom
            };
        }
        for i in (0..m - 1).rev() {
            dp[i] -= cp[i] * dp[i + 1];
        }
        let mut moved = 0.0f64;
        for i in 0..m {
            xs[i + 1] += dp[i];
            moved = moved.max(dp[i].abs());
        }
        iterations += 1;
        if !moved.is_finite() {
            return Err(Error::NewtonNoConvergence {
                iterations,
                residual: f64::NAN,
            });
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct WidthMeasurement {
    pub t: f64,
    pub measured: f64,
    pub closed_form: f64,
    pub rel_diff: f64,
}

/// Grid for an X packet: ±12 widths around the region it visits, spacing
/// a 24th of the narrowest width.
fn packet_grid(system: &MacroSystem, t_max: f64, v0: f64, path: Option<&[f64]>) -> Result<SpaceGrid> {
    let s0 = system.sigma0_value();
    let (wmin, wmax) = match system.oscillation_frequency() {
        Some(w) => {
            let s1 = system.hbar / (2.0 * system.effective_mass() * w * s0);
            (s0.min(s1), s0.max(s1))
        }
        None => (s0, system.closed_form_width(t_max).unwrap_or(s0)),
    };
    let (lo, hi) = match path {
        Some(xs) => xs
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x))),
        None => (0.0, 0.0),
    };
    let mut dx = wmin / 24.0;
    if v0 != 0.0 {
        dx = dx.min(0.1 * system.hbar / (system.effective_mass() * v0.abs()));
    }
    let span = hi - lo + 24.0 * wmax;
    let n = (span / dx).ceil() as usize + 1;
    if n > MAX_GRID_POINTS {
        return Err(Error::InvalidParameter(format!("X grid would need {n} points")));
    }
    SpaceGrid::new(lo - 12.0 * wmax, hi + 12.0 * wmax, n.max(256))
}

fn reference_dt(system: &MacroSystem, t: f64) -> f64 {
    let mut scale = t.min(system.spreading_scale());
    if let Some(w) = system.oscillation_frequency() {
        scale = scale.min(2.0 * std::f64::consts::PI / w);
    }
    scale / 200.0
}

/// Width of the X packet at `t`, measured from a reference-solver run and
/// compared with the closed form.
pub fn fluctuation_width(system: &MacroSystem, t: f64) -> Result<WidthMeasurement> {
    system.validate()?;
    let closed = system
        .closed_form_width(t)
        .ok_or_else(|| Error::UnsupportedCase("no closed-form width for a tabulated potential".into()))?;
    let grid = packet_grid(system, t, 0.0, None)?;
    let psi0 = gaussian_packet(
        &grid,
        0.0,
        0.0,
        system.sigma0_value(),
        system.effective_mass(),
        system.hbar,
    )?;
    let measured = if t == 0.0 {
        diagnostics(&psi0, &Potential::Free).var_x.sqrt()
    } else {
        let (steps, dt) = step_count(t, reference_dt(system, t))?;
        let out = propagate_reference_observed(
            &psi0,
            &system.potential_x(),
            steps,
            &ReferenceConfig::new(dt),
            |_, _| Ok(()),
        )?;
        out.check_boundary()?;
        diagnostics(&out, &Potential::Free).var_x.sqrt()
    };
    Ok(WidthMeasurement {
        t,
        measured,
        closed_form: closed,
        rel_diff: (measured - closed).abs() / closed,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SpreadingTime {
    pub growth: f64,
    pub measured: f64,
    pub closed_form: f64,
}

/// First time the free X packet width exceeds `(1 + growth)·σ0`.
///
/// The variance of a free Gaussian is exactly quadratic in t, so the
/// crossing between two samples is located by interpolating the variance
/// linearly in t².
pub fn spreading_time(system: &MacroSystem, growth: f64) -> Result<SpreadingTime> {
    system.validate()?;
    if !matches!(system.potential, Potential::Free | Potential::Linear { .. }) {
        return Err(Error::UnsupportedCase(
            "spreading time is defined for free or uniform-force pointers".into(),
        ));
    }
    if !(growth > 0.0) {
        return Err(Error::InvalidParameter(format!("growth {growth}")));
    }
    let closed = system.spreading_scale() * ((1.0 + growth).powi(2) - 1.0).sqrt();
    let t_max = 1.3 * closed;
    let grid = packet_grid(system, t_max, 0.0, None)?;
    let s0 = system.sigma0_value();
    let psi0 = gaussian_packet(&grid, 0.0, 0.0, s0, system.effective_mass(), system.hbar)?;
    let target = ((1.0 + growth) * s0).powi(2);
    let steps = 400;
    let dt = t_max / steps as f64;
    let var_of = |amp: &[Complex64]| -> f64 {
        let w: Vec<f64> = amp.iter().map(|a| a.norm_sqr()).collect();
        let m: f64 = w.iter().sum();
        let mean = w.iter().enumerate().map(|(k, wk)| grid.x(k) * wk).sum::<f64>() / m;
        w.iter()
            .enumerate()
            .map(|(k, wk)| (grid.x(k) - mean).powi(2) * wk)
            .sum::<f64>()
            / m
    };
    let mut prev = (0.0, var_of(psi0.amp()));
    let mut found = None;
    propagate_reference_observed(
        &psi0,
        &system.potential_x(),
        steps,
        &ReferenceConfig::new(dt),
        |n, amp| {
            if found.is_none() {
                let t = n as f64 * dt;
                let v = var_of(amp);
                if v >= target {
                    let (t0, v0) = prev;
                    let u = t0 * t0 + (target - v0) / (v - v0) * (t * t - t0 * t0);
                    found = Some(u.sqrt());
                }
                prev = (t, v);
            }
            Ok(())
        },
    )?;
    let measured = found.ok_or(Error::NeverSeparates(t_max))?;
    Ok(SpreadingTime {
        growth,
        measured,
        closed_form: closed,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScalingRow {
    pub n: u64,
    pub sigma0: f64,
    pub t: f64,
    pub d_n_measured: f64,
    pub d_n_closed: f64,
    pub spreading_measured: Option<f64>,
    pub spreading_closed: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScalingStudy {
    pub rows: Vec<ScalingRow>,
    /// log d_N against log N.
    pub width_fit: LinearFit,
    /// log (10% spreading time) against log N, when computed.
    pub spreading_fit: Option<LinearFit>,
}

impl ScalingStudy {
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(
            w,
            "N,sigma0,t,d_n_measured,d_n_closed,spread_time_measured,spread_time_closed"
        )?;
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.16e}")).unwrap_or_default();
        for r in &self.rows {
            writeln!(
                w,
                "{},{:.16e},{:.16e},{:.16e},{:.16e},{},{}",
                r.n,
                r.sigma0,
                r.t,
                r.d_n_measured,
                r.d_n_closed,
                opt(r.spreading_measured),
                opt(r.spreading_closed)
            )?;
        }
        writeln!(
            w,
            "# width_slope={:.16e},width_slope_stderr={:.16e}",
            self.width_fit.slope, self.width_fit.slope_stderr
        )?;
        if let Some(f) = &self.spreading_fit {
            writeln!(
                w,
                "# spreading_slope={:.16e},spreading_slope_stderr={:.16e}",
                f.slope, f.slope_stderr
            )?;
        }
        Ok(())
    }
}

/// Width at `t` (and optionally the 10% spreading time) over a range of N.
pub fn scaling_study(base: &MacroSystem, ns: &[u64], t: f64, with_spreading: bool) -> Result<ScalingStudy> {
    use rayon::prelude::*;
    let rows: Vec<ScalingRow> = ns
        .par_iter()
        .map(|&n| {
            let sys = MacroSystem { n, ..base.clone() };
            let w = fluctuation_width(&sys, t)?;
            let sp = if with_spreading {
                Some(spreading_time(&sys, 0.1)?)
            } else {
                None
            };
            Ok(ScalingRow {
                n,
                sigma0: sys.sigma0_value(),
                t,
                d_n_measured: w.measured,
                d_n_closed: w.closed_form,
                spreading_measured: sp.map(|s| s.measured),
                spreading_closed: sp.map(|s| s.closed_form),
            })
        })
        .collect::<Result<_>>()?;
    let nf: Vec<f64> = rows.iter().map(|r| r.n as f64).collect();
    let width_fit = loglog_fit(&nf, &rows.iter().map(|r| r.d_n_measured).collect::<Vec<_>>());
    let spreading_fit = if with_spreading {
        Some(loglog_fit(
            &nf,
            &rows.iter().map(|r| r.spreading_measured.unwrap()).collect::<Vec<_>>(),
        ))
    } else {
        None
    };
    Ok(ScalingStudy {
        rows,
        width_fit,
        spreading_fit,
    })
}

/// Ψ(x, X) on a product grid, stored row-major with X fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct JointWaveFunction {
    pub x_grid: SpaceGrid,
    pub big_x_grid: SpaceGrid,
    pub amp: Vec<Complex64>,
}

impl JointWaveFunction {
    pub fn product(phi: &WaveFunction, pointer: &WaveFunction) -> Self {
        Self::superpose(&[(Complex64::new(1.0, 0.0), phi, pointer)]).expect("single term")
    }

    /// `Σ c · φ(x) Ψ(X)`; every term must share the same two grids.
    pub fn superpose(terms: &[(Complex64, &WaveFunction, &WaveFunction)]) -> Result<Self> {
        let (_, phi0, big0) = terms
            .first()
            .ok_or_else(|| Error::InvalidParameter("no terms".into()))?;
        let (xg, bg) = (*phi0.grid(), *big0.grid());
        let mut amp = vec![Complex64::new(0.0, 0.0); xg.len() * bg.len()];
        for (c, phi, big) in terms {
            if *phi.grid() != xg || *big.grid() != bg {
                return Err(Error::GridMismatch("superposed terms live on different grids".into()));
            }
            for (i, p) in phi.amp().iter().enumerate() {
                let cp = c * p;
                let row = &mut amp[i * bg.len()..(i + 1) * bg.len()];
                row.iter_mut().zip(big.amp()).for_each(|(a, b)| *a += cp * b);
            }
        }
        Ok(Self {
            x_grid: xg,
            big_x_grid: bg,
            amp,
        })
    }

    pub fn norm_sq(&self) -> f64 {
        self.amp.iter().map(|a| a.norm_sqr()).sum::<f64>() * self.x_grid.dx() * self.big_x_grid.dx()
    }

    pub fn normalize(&mut self) {
        let n = self.norm_sq().sqrt();
        self.amp.iter_mut().for_each(|a| *a /= n);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SignalFunction {
    pub x_min: f64,
    pub dx: f64,
    pub j: Vec<f64>,
}

impl SignalFunction {
    pub fn x(&self, k: usize) -> f64 {
        self.x_min + k as f64 * self.dx
    }

    pub fn integral(&self) -> f64 {
        self.j.iter().sum::<f64>() * self.dx
    }

    /// `∫ over |X - center| ≤ half_width` of J, with fractional end cells.
    pub fn window_mass(&self, center: f64, half_width: f64) -> f64 {
        let (a, b) = (center - half_width, center + half_width);
        self.j
            .iter()
            .enumerate()
            .map(|(k, jk)| {
                let (lo, hi) = (self.x(k) - 0.5 * self.dx, self.x(k) + 0.5 * self.dx);
                let overlap = (hi.min(b) - lo.max(a)).max(0.0);
                jk * overlap
            })
            .sum()
    }

    pub fn mean(&self) -> f64 {
        self.j.iter().enumerate().map(|(k, j)| self.x(k) * j).sum::<f64>() * self.dx / self.integral()
    }

    pub fn std(&self) -> f64 {
        let m = self.mean();
        (self
            .j
            .iter()
            .enumerate()
            .map(|(k, j)| (self.x(k) - m).powi(2) * j)
            .sum::<f64>()
            * self.dx
            / self.integral())
        .sqrt()
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "X,J")?;
        for (k, j) in self.j.iter().enumerate() {
            writeln!(w, "{:.16e},{:.16e}", self.x(k), j)?;
        }
        Ok(())
    }
}

/// `J(X) = ∫ |Ψ(x, X)|² dx`.
pub fn signal_function(psi: &JointWaveFunction) -> SignalFunction {
    let (nx, nb) = (psi.x_grid.len(), psi.big_x_grid.len());
    let mut j = vec![0.0; nb];
    for i in 0..nx {
        j.iter_mut()
            .zip(&psi.amp[i * nb..(i + 1) * nb])
            .for_each(|(jk, a)| *jk += a.norm_sqr());
    }
    let dx = psi.x_grid.dx();
    j.iter_mut().for_each(|v| *v *= dx);
    SignalFunction {
        x_min: psi.big_x_grid.x_min(),
        dx: psi.big_x_grid.dx(),
        j,
    }
}

/// Ψ(x, y_1..y_n) with every `y_i` on the same grid; `x` optional.
/// Index order is x slowest, then y_1, ..., y_n.
#[derive(Debug, Clone, PartialEq)]
pub struct MicroWaveFunction {
    pub object: Option<SpaceGrid>,
    pub micro: SpaceGrid,
    pub n_micro: usize,
    pub amp: Vec<Complex64>,
}

impl MicroWaveFunction {
    /// Product state `φ(x) Π χ_i(y_i)`.
    pub fn product(object: Option<&WaveFunction>, factors: &[&WaveFunction]) -> Result<Self> {
        let n = factors.len();
        if n > 3 {
            return Err(Error::DimensionTooLarge(n));
        }
        if n == 0 {
            return Err(Error::InvalidParameter("at least one micro-coordinate".into()));
        }
        let micro = *factors[0].grid();
        if factors.iter().any(|f| *f.grid() != micro) {
            return Err(Error::GridMismatch("micro factors on different grids".into()));
        }
        let mut amp = vec![Complex64::new(1.0, 0.0)];
        let extend = |amp: &mut Vec<Complex64>, f: &[Complex64]| {
            let mut next = Vec::with_capacity(amp.len() * f.len());
            for a in amp.iter() {
                next.extend(f.iter().map(|b| a * b));
            }
            *amp = next;
        };
        if let Some(o) = object {
            extend(&mut amp, o.amp());
        }
        for f in factors {
            extend(&mut amp, f.amp());
        }
        Ok(Self {
            object: object.map(|o| *o.grid()),
            micro,
            n_micro: n,
            amp,
        })
    }

    pub fn cell_volume(&self) -> f64 {
        self.object.map_or(1.0, |g| g.dx()) * self.micro.dx().powi(self.n_micro as i32)
    }
}

/// Binned `J(X) = ∫dx ∫dy δ(X - Σ f(y_i)/n) |Ψ|²` with bins of width
/// `bin_width` aligned to multiples of it.
pub fn generalized_signal(psi: &MicroWaveFunction, f: impl Fn(f64) -> f64, bin_width: f64) -> Result<SignalFunction> {
    let n = psi.n_micro;
    if n > 3 {
        return Err(Error::DimensionTooLarge(n));
    }
    if !(bin_width > 0.0) {
        return Err(Error::InvalidParameter(format!("bin width {bin_width}")));
    }
    let ny = psi.micro.len();
    let fy: Vec<f64> = psi.micro.points().map(&f).collect();
    let per_object = ny.pow(n as u32);
    let x_of = |idx: usize| -> f64 {
        let mut r = idx;
        let mut s = 0.0;
        for _ in 0..n {
            s += fy[r % ny];
            r /= ny;
        }
        s / n as f64
    };
    let (lo, hi) = (0..per_object)
        .map(x_of)
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), x| (a.min(x), b.max(x)));
    let first = (lo / bin_width).floor() - 1.0;
    let count = ((hi / bin_width).ceil() - first) as usize + 2;
    let mut j = vec![0.0; count];
    let vol = psi.cell_volume();
    for (idx, a) in psi.amp.iter().enumerate() {
        let b = ((x_of(idx % per_object) / bin_width).floor() - first) as usize;
        j[b] += a.norm_sqr() * vol;
    }
    j.iter_mut().for_each(|v| *v /= bin_width);
    Ok(SignalFunction {
        x_min: (first + 0.5) * bin_width,
        dx: bin_width,
        j,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ClassicalLimit {
    pub t: f64,
    pub mean_x_error: f64,
    /// `<P²/2Nμ> - Nμ Ẋ²/2`.
    pub energy_error: f64,
    /// `ħ²/(8Nμσ0²)`, the kinetic energy of the packet's momentum spread.
    pub zero_point: f64,
    pub kinetic_quantum: f64,
    pub kinetic_classical: f64,
}

/// Evolves the Gaussian X packet with the reference solver alongside
/// `path` (same step) and compares `<X>` and the kinetic energy at `t`.
pub fn classical_limit_check(system: &MacroSystem, path: &StationaryPath, t: f64) -> Result<ClassicalLimit> {
    system.validate()?;
    let dt = path.times.dt;
    let k = steps_for_path(t, dt, path.x_values.len() - 1)?;
    let m = system.effective_mass();
    let v0 = path.velocity(system, 0);
    let vmax = (0..path.x_values.len())
        .map(|i| path.velocity(system, i).abs())
        .fold(0.0, f64::max);
    let grid = packet_grid(system, path.times.t_end(), vmax.max(v0.abs()), Some(&path.x_values))?;
    let s0 = system.sigma0_value();
    let psi0 = gaussian_packet(&grid, path.x_values[0], m * v0, s0, m, system.hbar)?;
    let out = if k == 0 {
        psi0.clone()
    } else {
        propagate_reference_observed(
            &psi0,
            &system.potential_x(),
            k,
            &ReferenceConfig::new(dt),
            |_, _| Ok(()),
        )?
    };
    out.check_boundary()?;
    let d = diagnostics(&out, &Potential::Free);
    let kinetic_quantum = spectral_kinetic(&out);
    let v = path.velocity(system, k);
    let kinetic_classical = 0.5 * m * v * v;
    Ok(ClassicalLimit {
        t,
        mean_x_error: (d.mean_x - path.x_values[k]).abs(),
        energy_error: kinetic_quantum - kinetic_classical,
        zero_point: system.hbar * system.hbar / (8.0 * m * s0 * s0),
        kinetic_quantum,
        kinetic_classical,
    })
}

fn steps_for_path(t: f64, dt: f64, n: usize) -> Result<usize> {
    let k = (t / dt).round();
    if (t / dt - k).abs() > 1e-6 || k < 0.0 || k as usize > n {
        return Err(Error::StepMismatch { total: t, dt });
    }
    Ok(k as usize)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn sys(n: u64, pot: Potential, s: Sigma0) -> MacroSystem {
        MacroSystem::new(n, 1.0, pot, s).unwrap()
    }

    #[test]
    fn free_path_is_straight() {
        let p = stationary_path(&sys(1, Potential::Free, Sigma0::Fixed(1.0)), 0.0, 1.0, 2.0, 0.01).unwrap();
        for (k, x) in p.x_values.iter().enumerate() {
            assert!((x - p.t(k)).abs() < 1e-12);
        }
        assert!(p.residual < 1e-12);
    }

    #[test]
    fn harmonic_quarter_period() {
        let p = stationary_path(
            &sys(1, Potential::harmonic(1.0, 1.0), Sigma0::Fixed(1.0)),
            1.0,
            0.0,
            PI / 2.0,
            1e-3,
        )
        .unwrap();
        assert!(p.x_values.last().unwrap().abs() < 1e-6);
        assert!(p.residual <= 1e-10 * p.action_value.abs().max(1.0));
    }

    #[test]
    fn uniform_force_closed_form() {
        let g = 0.7;
        let s = sys(50, Potential::linear(g), Sigma0::Fixed(1.0));
        let p = stationary_path(&s, 0.0, 0.0, 1.5, 0.01).unwrap();
        assert!((p.x_values.last().unwrap() - g * 1.5 * 1.5 / 2.0).abs() < 1e-8);
    }

    #[test]
    fn action_is_stationary() {
        let s = sys(3, Potential::harmonic(1.0, 1.3), Sigma0::Fixed(1.0));
        let p = stationary_path(&s, 0.4, -0.2, 2.0, 0.01).unwrap();
        let n = p.x_values.len();
        let bump: Vec<f64> = (0..n).map(|k| (PI * k as f64 / (n - 1) as f64).sin().powi(2)).collect();
        let s_of = |e: f64| {
            let xs: Vec<f64> = p.x_values.iter().zip(&bump).map(|(x, b)| x + e * b).collect();
            discrete_action(&s, p.times.dt, &xs)
        };
        let e = 1e-3;
        let linear = (s_of(e) - s_of(-e)) / (2.0 * e);
        assert!(linear.abs() < 1e-8, "{linear}");
        let quad = (s_of(e) + s_of(-e) - 2.0 * s_of(0.0)) / (e * e);
        assert!(quad.abs() > 1e-3);
    }

    #[test]
    fn caustic_is_flagged() {
        let dt = 0.01;
        let n = 300usize;
        let omega = 2.0 * (PI / (2.0 * n as f64)).sin() / dt;
        let s = sys(1, Potential::harmonic(1.0, omega), Sigma0::Fixed(1.0));
        let r = stationary_path_bvp(&s, 1.0, -0.5, n as f64 * dt, dt);
        assert!(matches!(r, Err(Error::CausticDetected(_))), "{r:?}");
        let ok = stationary_path_bvp(&s, 1.0, -0.5, 0.5 * n as f64 * dt, dt).unwrap();
        assert!((ok.x_values.last().unwrap() + 0.5).abs() < 1e-15);
    }

    #[test]
    fn bvp_matches_ivp() {
        let s = sys(1, Potential::harmonic(1.0, 1.0), Sigma0::Fixed(1.0));
        let ivp = stationary_path(&s, 1.0, 0.3, 1.0, 0.01).unwrap();
        let bvp = stationary_path_bvp(&s, 1.0, *ivp.x_values.last().unwrap(), 1.0, 0.01).unwrap();
        for (a, b) in ivp.x_values.iter().zip(&bvp.x_values) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn width_at_zero_scaled() {
        let w = fluctuation_width(&sys(100, Potential::Free, Sigma0::Scaled(1.0)), 0.0).unwrap();
        assert!((w.measured - 0.1).abs() < 1e-12);
        assert_eq!(w.closed_form, 0.1);
    }

    #[test]
    fn width_matches_closed_form() {
        let w = fluctuation_width(&sys(10, Potential::Free, Sigma0::Fixed(0.5)), 7.0).unwrap();
        assert!(w.rel_diff < 1e-4, "{w:?}");
        let h = fluctuation_width(&sys(4, Potential::harmonic(1.0, 0.6), Sigma0::Fixed(0.3)), 1.1).unwrap();
        assert!(h.rel_diff < 1e-4, "{h:?}");
    }

    #[test]
    fn spreading_time_measured() {
        let s = spreading_time(&sys(10, Potential::Free, Sigma0::Fixed(1.0)), 0.1).unwrap();
        assert!(((s.measured - s.closed_form) / s.closed_form).abs() < 1e-4, "{s:?}");
    }

    #[test]
    fn factorized_signal() {
        let xg = SpaceGrid::new(-5.0, 5.0, 32).unwrap();
        let bg = SpaceGrid::new(-4.0, 4.0, 64).unwrap();
        let phi = crate::grids::gaussian_packet(&xg, 0.0, 1.0, 1.0, 1.0, 1.0).unwrap();
        let big = crate::grids::gaussian_packet(&bg, 0.3, 0.0, 0.5, 1.0, 1.0).unwrap();
        let mut joint = JointWaveFunction::product(&phi, &big);
        joint.normalize();
        let j = signal_function(&joint);
        let norm = phi.norm_sq();
        for (a, b) in j.j.iter().zip(big.density()) {
            assert!((a - b / big.norm_sq() * norm / norm).abs() < 1e-12);
        }
        assert!((j.integral() - 1.0).abs() < 1e-10);
    }

    #[test]
    fn signal_invariant_under_object_rotation() {
        use rand::Rng;
        let xg = SpaceGrid::new(-5.0, 5.0, 64).unwrap();
        let bg = SpaceGrid::new(-4.0, 4.0, 64).unwrap();
        let a = crate::grids::gaussian_packet(&xg, -0.5, 0.0, 0.6, 1.0, 1.0).unwrap();
        let b = crate::grids::gaussian_packet(&xg, 0.5, 1.0, 0.6, 1.0, 1.0).unwrap();
        let pa = crate::grids::gaussian_packet(&bg, -1.0, 0.0, 0.5, 1.0, 1.0).unwrap();
        let pb = crate::grids::gaussian_packet(&bg, 1.0, 0.0, 0.5, 1.0, 1.0).unwrap();
        let mut joint =
            JointWaveFunction::superpose(&[(Complex64::new(0.6, 0.0), &a, &pa), (Complex64::new(0.0, 0.8), &b, &pb)])
                .unwrap();
        joint.normalize();
        let base = signal_function(&joint);
        // random unitary from Gram–Schmidt
        let n = xg.len();
        let mut rng = crate::rng::stream(3, 0);
        let mut u: Vec<Vec<Complex64>> = Vec::new();
        for _ in 0..n {
            let mut v: Vec<Complex64> = (0..n)
                .map(|_| Complex64::new(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5))
                .collect();
            for w in &u {
                let p: Complex64 = w.iter().zip(&v).map(|(a, b)| a.conj() * b).sum();
                v.iter_mut().zip(w).for_each(|(x, y)| *x -= p * y);
            }
            let nv = v.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
            v.iter_mut().for_each(|z| *z /= nv);
            u.push(v);
        }
        let nb = bg.len();
        let mut rotated = joint.clone();
        for i in 0..n {
            for k in 0..nb {
                rotated.amp[i * nb + k] = (0..n).map(|j| u[i][j] * joint.amp[j * nb + k]).sum();
            }
        }
        let mut phased = joint.clone();
        phased
            .amp
            .iter_mut()
            .for_each(|z| *z *= Complex64::from_polar(1.0, 2.1));
        for other in [signal_function(&rotated), signal_function(&phased)] {
            for (x, y) in base.j.iter().zip(&other.j) {
                assert!((x - y).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn disjoint_branch_masses() {
        let xg = SpaceGrid::new(-4.0, 4.0, 64).unwrap();
        let bg = SpaceGrid::new(-10.0, 10.0, 400).unwrap();
        let a = crate::grids::gaussian_packet(&xg, -1.5, 0.0, 0.4, 1.0, 1.0).unwrap();
        let b = crate::grids::gaussian_packet(&xg, 1.5, 0.0, 0.4, 1.0, 1.0).unwrap();
        let pa = crate::grids::gaussian_packet(&bg, -5.0, 0.0, 0.5, 1.0, 1.0).unwrap();
        let pb = crate::grids::gaussian_packet(&bg, 5.0, 0.0, 0.5, 1.0, 1.0).unwrap();
        let mut joint = JointWaveFunction::superpose(&[
            (Complex64::new(0.3f64.sqrt(), 0.0), &a, &pa),
            (Complex64::new(0.7f64.sqrt(), 0.0), &b, &pb),
        ])
        .unwrap();
        joint.normalize();
        let j = signal_function(&joint);
        assert!((j.window_mass(-5.0, 4.0) - 0.3).abs() < 1e-6);
        assert!((j.window_mass(5.0, 4.0) - 0.7).abs() < 1e-6);
    }

    #[test]
    fn generalized_signal_cases() {
        let g = SpaceGrid::new(-6.0, 6.0, 241).unwrap();
        let s = 1.0;
        let chi = crate::grids::gaussian_packet(&g, 0.0, 0.0, s, 1.0, 1.0).unwrap();
        let psi = MicroWaveFunction::product(None, &[&chi, &chi]).unwrap();
        let j = generalized_signal(&psi, |y| y, 0.05).unwrap();
        assert!((j.integral() - 1.0).abs() < 1e-10);
        assert!((j.std() / (s / 2f64.sqrt()) - 1.0).abs() < 0.02);

        let a = crate::grids::gaussian_packet(&g, 1.0, 0.0, 0.2, 1.0, 1.0).unwrap();
        let b = crate::grids::gaussian_packet(&g, -2.0, 0.0, 0.2, 1.0, 1.0).unwrap();
        let peaked = generalized_signal(&MicroWaveFunction::product(None, &[&a, &b]).unwrap(), |y| y, 0.05).unwrap();
        let kmax = (0..peaked.j.len())
            .max_by(|&x, &y| peaked.j[x].total_cmp(&peaked.j[y]))
            .unwrap();
        assert!((peaked.x(kmax) + 0.5).abs() <= 0.05);

        let ground = crate::grids::gaussian_packet(&g, 0.0, 0.0, 0.5f64.sqrt(), 1.0, 1.0).unwrap();
        let small = SpaceGrid::new(-4.0, 4.0, 41).unwrap();
        let g3 = crate::grids::gaussian_packet(&small, 0.0, 0.0, 0.7, 1.0, 1.0).unwrap();
        let three = MicroWaveFunction::product(Some(&g3), &[&g3, &g3, &g3]).unwrap();
        let j3 = generalized_signal(&three, |y| y, 0.05).unwrap();
        assert!((j3.integral() - 1.0).abs() < 1e-10);
        let psi = MicroWaveFunction::product(None, &[&ground, &ground]).unwrap();
        let sq = generalized_signal(&psi, |y| y * y, 0.01).unwrap();
        assert!((sq.mean() / 0.5 - 1.0).abs() < 0.01, "{}", sq.mean());
        assert!(matches!(
            MicroWaveFunction::product(None, &[&ground, &ground, &ground, &ground]),
            Err(Error::DimensionTooLarge(4))
        ));
    }

    #[test]
    fn ehrenfest_harmonic_full_period() {
        let s = MacroSystem::new(1, 1.0, Potential::harmonic(1.0, 1.0), Sigma0::Fixed(0.5f64.sqrt())).unwrap();
        let path = stationary_path(&s, 1.0, 0.0, 2.0 * PI, 2.5e-4).unwrap();
        let n = path.x_values.len() - 1;
        for k in [n / 4, n / 2, n] {
            let c = classical_limit_check(&s, &path, path.t(k)).unwrap();
            assert!(c.mean_x_error < 1e-6, "{c:?}");
        }
    }

    #[test]
    fn static_packet_energy_is_zero_point() {
        let s = sys(20, Potential::Free, Sigma0::Fixed(0.7));
        let path = stationary_path(&s, 0.0, 0.0, 1.0, 0.01).unwrap();
        let c = classical_limit_check(&s, &path, 1.0).unwrap();
        assert!((c.energy_error - c.zero_point).abs() < 1e-8, "{c:?}");
    }

    #[test]
    fn zero_point_contamination_scaling() {
        let ns = [10u64, 100, 1000, 10000];
        let mut abs_err = Vec::new();
        for &n in &ns {
            let s = sys(n, Potential::Free, Sigma0::Fixed(1.0));
            let path = stationary_path(&s, 0.0, 0.01, 1.0, 0.01).unwrap();
            abs_err.push(classical_limit_check(&s, &path, 1.0).unwrap().energy_error);
        }
        let nf: Vec<f64> = ns.iter().map(|&n| n as f64).collect();
        let fit = loglog_fit(&nf, &abs_err);
        assert!((fit.slope + 1.0).abs() < 0.1, "{fit:?}");
    }
}
