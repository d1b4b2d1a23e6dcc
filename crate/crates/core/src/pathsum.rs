//! Coarse-grained path sum.
//!
//! One step sums the short-time kernel
//! `K(x, q) = e^{-iπ/4}/ℓ_d · exp(i m (x-q)²/(2ħ dt)) · e^{-i V dt/ħ}`
//! against ψ over intermediate points with weight `1/(ρ ℓ_d)`. The
//! deterministic propagator places the points on a lattice of spacing
//! `h = dx/s` (so `ρ = 1/h`), with ψ carried onto that lattice by
//! band-limited interpolation. The Monte Carlo estimator draws the points
//! uniformly at random instead.
//!
//! With `ℓ_d²/h` the distance at which lattice images of the kernel
//! appear, the kernel is cut off smoothly before half that distance.

use std::f64::consts::PI;
use std::sync::Arc;

use num_complex::Complex64;
use rand::Rng;
use rayon::prelude::*;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grids::{steps_for, Potential, SpaceGrid, WaveFunction};
use crate::rng;

/// Points per diffusion length on the deterministic quadrature lattice.
pub const DEFAULT_LATTICE_DENSITY: f64 = 24.0;
/// Default kernel support, in units of `ℓ_d`.
pub const DEFAULT_RADIUS_ELLS: f64 = 12.0;
/// Fraction of the truncation radius over which the window is exactly 1.
pub const TAPER_CORE: f64 = 0.5;
/// Largest relative norm change tolerated in one step.
pub const STEP_DRIFT_LIMIT: f64 = 1e-2;
/// Spectral weight allowed above the wavenumber the windowed kernel resolves.
const SPECTRAL_LEAK_LIMIT: f64 = 1e-10;
/// Refinement used to interpolate ψ at random points.
const INTERP_REFINE: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    /// `V((x+q)/2)` in the phase.
    #[default]
    Midpoint,
    /// `(V(x) + V(q))/2` in the phase.
    SymmetricSplit,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShortTimeKernel {
    pub dt: f64,
    pub mass: f64,
    pub hbar: f64,
    pub ell_d: f64,
    pub potential: Potential,
    pub scheme: Scheme,
    pub truncation_radius: f64,
    /// Minimum `ρ ℓ_d` of the deterministic lattice.
    pub lattice_density: f64,
}

fn smoothstep(t: f64) -> f64 {
    if t <= 0.0 {
        0.0
    } else if t >= 1.0 {
        1.0
    } else {
        let a = (-1.0 / t).exp();
        let b = (-1.0 / (1.0 - t)).exp();
        a / (a + b)
    }
}

impl ShortTimeKernel {
    pub fn new(dt: f64, mass: f64, hbar: f64, potential: Potential, scheme: Scheme) -> Result<Self> {
        if !(dt > 0.0) || !(mass > 0.0) || !(hbar > 0.0) {
            return Err(Error::InvalidParameter(format!("dt {dt}, mass {mass}, hbar {hbar}")));
        }
        let ell_d = (2.0 * PI * hbar * dt / mass).sqrt();
        Ok(Self {
            dt,
            mass,
            hbar,
            ell_d,
            potential,
            scheme,
            truncation_radius: DEFAULT_RADIUS_ELLS * ell_d,
            lattice_density: DEFAULT_LATTICE_DENSITY,
        })
    }

    pub fn for_wave(psi: &WaveFunction, potential: Potential, dt: f64) -> Result<Self> {
        Self::new(dt, psi.mass(), psi.hbar(), potential, Scheme::Midpoint)
    }

    pub fn with_scheme(mut self, scheme: Scheme) -> Self {
        self.scheme = scheme;
        self
    }

    pub fn with_truncation_radius(mut self, radius: f64) -> Result<Self> {
        if !(radius > 2.0 * self.ell_d) {
            return Err(Error::InvalidParameter(format!(
                "truncation radius {radius} must exceed 2 ell_d = {}",
                2.0 * self.ell_d
            )));
        }
        self.truncation_radius = radius;
        Ok(self)
    }

    pub fn with_lattice_density(mut self, rho_ell: f64) -> Result<Self> {
        if !(rho_ell >= 4.0) {
            return Err(Error::DensityTooLow(rho_ell));
        }
        self.lattice_density = rho_ell;
        Ok(self)
    }

    /// Untruncated free kernel `e^{-iπ/4}/ℓ_d · exp(iπ(u/ℓ_d)²)`.
    #[inline]
    pub fn free(&self, u: f64) -> Complex64 {
        let r = u / self.ell_d;
        Complex64::from_polar(1.0 / self.ell_d, PI * r * r - 0.25 * PI)
    }

    /// Smooth cutoff: 1 up to `TAPER_CORE·R`, 0 from `R` on, C∞ in between.
    #[inline]
    pub fn window(&self, u: f64) -> f64 {
        let t = (u.abs() / self.truncation_radius - TAPER_CORE) / (1.0 - TAPER_CORE);
        1.0 - smoothstep(t)
    }

    #[inline]
    pub fn potential_phase(&self, x: f64, fraction: f64) -> Complex64 {
        Complex64::from_polar(1.0, -fraction * self.potential.value(x) * self.dt / self.hbar)
    }

    /// Full windowed kernel between an output point `x` and a source point `q`.
    pub fn amplitude(&self, x: f64, q: f64) -> Complex64 {
        let u = x - q;
        let w = self.window(u);
        if w == 0.0 {
            return Complex64::new(0.0, 0.0);
        }
        let free = self.free(u) * w;
        match (&self.potential, self.scheme) {
            (Potential::Free, _) => free,
            (_, Scheme::Midpoint) => free * self.potential_phase(0.5 * (x + q), 1.0),
            (_, Scheme::SymmetricSplit) => free * self.potential_phase(x, 0.5) * self.potential_phase(q, 0.5),
        }
    }

    /// Highest wavenumber the flat part of the window propagates exactly.
    pub fn resolved_wavenumber(&self) -> f64 {
        self.mass * TAPER_CORE * self.truncation_radius / (self.hbar * self.dt)
    }

    /// Spacing `dx/s` of the quadrature lattice used on `grid`.
    pub fn lattice_ratio(&self, dx: f64) -> usize {
        let density = self
            .lattice_density
            .max(2.0 * self.truncation_radius / self.ell_d * (1.0 + 1e-9));
        ((density * dx / self.ell_d).ceil() as usize).max(1)
    }
}

/// Band-limited periodic interpolation of `amp` onto `s` times as many points.
pub(crate) struct Refiner {
    n: usize,
    s: usize,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl Refiner {
    pub(crate) fn new(n: usize, s: usize) -> Self {
        let mut planner = FftPlanner::new();
        Self {
            n,
            s,
            forward: planner.plan_fft_forward(n),
            inverse: planner.plan_fft_inverse(n * s),
        }
    }

    pub(crate) fn refine(&self, amp: &[Complex64]) -> Vec<Complex64> {
        if self.s == 1 {
            return amp.to_vec();
        }
        let (n, nf) = (self.n, self.n * self.s);
        let mut spec = amp.to_vec();
        self.forward.process(&mut spec);
        let mut fine = vec![Complex64::new(0.0, 0.0); nf];
        let half = n / 2;
        if n % 2 == 0 {
            fine[..half].copy_from_slice(&spec[..half]);
            for j in 1..half {
                fine[nf - j] = spec[n - j];
            }
            fine[half] = spec[half] * 0.5;
            fine[nf - half] = spec[half] * 0.5;
        } else {
            fine[..=half].copy_from_slice(&spec[..=half]);
            for j in 1..=half {
                fine[nf - j] = spec[n - j];
            }
        }
        self.inverse.process(&mut fine);
        let scale = 1.0 / n as f64;
        fine.iter_mut().for_each(|z| *z *= scale);
        fine
    }
}

/// Fraction of the spectral weight of `amp` above wavenumber `k`.
fn spectral_weight_above(amp: &[Complex64], dx: f64, k: f64) -> f64 {
    let n = amp.len();
    let mut spec = amp.to_vec();
    FftPlanner::new().plan_fft_forward(n).process(&mut spec);
    let dk = 2.0 * PI / (n as f64 * dx);
    let (mut above, mut total) = (0.0, 0.0);
    for (j, z) in spec.iter().enumerate() {
        let kj = dk * j.min(n - j) as f64;
        let p = z.norm_sqr();
        total += p;
        if kj > k {
            above += p;
        }
    }
    if total > 0.0 {
        above / total
    } else {
        0.0
    }
}

/// Deterministic transfer step on a fixed grid, with all tables precomputed.
pub struct PathSumPropagator {
    kernel: ShortTimeKernel,
    grid: SpaceGrid,
    s: usize,
    h: f64,
    half_width: usize,
    /// `h · K_free(d h) · window`, indexed by `d + half_width`.
    taps: Vec<Complex64>,
    /// Midpoint phases on the half lattice `x_min + m h/2`.
    mid_phase: Option<Vec<Complex64>>,
    /// Half-step phases on the fine lattice (symmetric split).
    split_phase: Option<Vec<Complex64>>,
    refiner: Refiner,
}

impl PathSumPropagator {
    pub fn new(kernel: ShortTimeKernel, grid: SpaceGrid) -> Result<Self> {
        let dx = grid.dx();
        let s = kernel.lattice_ratio(dx);
        let h = dx / s as f64;
        let alias_distance = kernel.ell_d * kernel.ell_d / h;
        if kernel.truncation_radius > 0.5 * alias_distance * (1.0 + 1e-9) {
            return Err(Error::AliasingDetected(format!(
                "kernel radius {} exceeds half the lattice image distance {}",
                kernel.truncation_radius, alias_distance
            )));
        }
        let half_width = (kernel.truncation_radius / h).floor() as usize;
        let taps = (0..=2 * half_width)
            .map(|i| {
                let u = (i as f64 - half_width as f64) * h;
                kernel.free(u) * (kernel.window(u) * h)
            })
            .collect();
        let nf = grid.len() * s;
        let (mid_phase, split_phase) = match (&kernel.potential, kernel.scheme) {
            (Potential::Free, _) => (None, None),
            (_, Scheme::Midpoint) => (
                Some(
                    (0..2 * nf - 1)
                        .map(|m| kernel.potential_phase(grid.x_min() + 0.5 * m as f64 * h, 1.0))
                        .collect(),
                ),
                None,
            ),
            (_, Scheme::SymmetricSplit) => (
                None,
                Some(
                    (0..nf)
                        .map(|j| kernel.potential_phase(grid.x_min() + j as f64 * h, 0.5))
                        .collect(),
                ),
            ),
        };
        let refiner = Refiner::new(grid.len(), s);
        Ok(Self {
            kernel,
            grid,
            s,
            h,
            half_width,
            taps,
            mid_phase,
            split_phase,
            refiner,
        })
    }

    pub fn kernel(&self) -> &ShortTimeKernel {
        &self.kernel
    }

    pub fn lattice_ratio(&self) -> usize {
        self.s
    }

    pub fn lattice_spacing(&self) -> f64 {
        self.h
    }

    /// `ρ ℓ_d` of the quadrature lattice.
    pub fn lattice_density(&self) -> f64 {
        self.kernel.ell_d / self.h
    }

    /// ψ on the quadrature lattice.
    pub fn refine(&self, amp: &[Complex64]) -> Vec<Complex64> {
        self.refiner.refine(amp)
    }

    /// Refuses states carrying momenta the windowed kernel cannot propagate.
    pub fn check_resolved(&self, amp: &[Complex64]) -> Result<()> {
        let k = self.kernel.resolved_wavenumber();
        if k * self.grid.dx() >= PI {
            return Ok(());
        }
        let leak = spectral_weight_above(amp, self.grid.dx(), k);
        if leak > SPECTRAL_LEAK_LIMIT {
            return Err(Error::AliasingDetected(format!(
                "{leak:.3e} of the spectral weight lies above k = {k:.4}, where the kernel phase changes by more than pi per lattice step"
            )));
        }
        Ok(())
    }

    /// One application, ends pinned to zero.
    pub fn apply(&self, amp: &[Complex64]) -> Vec<Complex64> {
        let n = self.grid.len();
        let mut fine = self.refine(amp);
        if let Some(p) = &self.split_phase {
            fine.iter_mut().zip(p).for_each(|(f, p)| *f *= p);
        }
        let nf = fine.len();
        let jw = self.half_width;
        let zero = Complex64::new(0.0, 0.0);
        let mut out: Vec<Complex64> = (0..n)
            .into_par_iter()
            .map(|k| {
                let i = k * self.s;
                let lo = i.saturating_sub(jw);
                let hi = (i + jw).min(nf - 1);
                let mut acc = zero;
                match &self.mid_phase {
                    None => {
                        for j in lo..=hi {
                            acc += self.taps[i + jw - j] * fine[j];
                        }
                    }
                    Some(p) => {
                        for j in lo..=hi {
                            acc += self.taps[i + jw - j] * p[i + j] * fine[j];
                        }
                    }
                }
                if let Some(p) = &self.split_phase {
                    acc *= p[i];
                }
                acc
            })
            .collect();
        out[0] = zero;
        out[n - 1] = zero;
        out
    }
}

fn norm_of(amp: &[Complex64], dx: f64) -> f64 {
    (amp.iter().map(|a| a.norm_sqr()).sum::<f64>() * dx).sqrt()
}

/// One kernel application. Not renormalized.
pub fn path_sum_step(psi: &WaveFunction, kernel: &ShortTimeKernel) -> Result<WaveFunction> {
    if (kernel.mass - psi.mass()).abs() > 1e-12 * psi.mass() || (kernel.hbar - psi.hbar()).abs() > 1e-12 * psi.hbar() {
        return Err(Error::InvalidParameter(
            "kernel mass/hbar differ from the wave function's".into(),
        ));
    }
    let prop = PathSumPropagator::new(kernel.clone(), *psi.grid())?;
    prop.check_resolved(psi.amp())?;
    let out = prop.apply(psi.amp());
    let (before, after) = (psi.norm(), norm_of(&out, psi.grid().dx()));
    let drift = (after / before - 1.0).abs();
    if drift > STEP_DRIFT_LIMIT {
        return Err(Error::NormDrift {
            drift,
            limit: STEP_DRIFT_LIMIT,
        });
    }
    psi.with_amp(out)
}

#[derive(Debug, Clone)]
pub struct PathSumRun {
    pub psi: WaveFunction,
    pub steps: usize,
    pub lattice_ratio: usize,
    pub lattice_density: f64,
    /// Largest single-step relative norm change.
    pub max_step_drift: f64,
    /// Relative norm change accumulated before the final renormalization.
    pub cumulative_drift: f64,
}

/// Path-sum evolution over `T` with the midpoint kernel and default window.
pub fn propagate_pathsum(psi0: &WaveFunction, potential: &Potential, t_total: f64, dt: f64) -> Result<WaveFunction> {
    let kernel = ShortTimeKernel::for_wave(psi0, potential.clone(), dt)?;
    Ok(propagate_with(psi0, &kernel, t_total)?.psi)
}

/// `T/dt` kernel applications, renormalized once at the end.
pub fn propagate_with(psi0: &WaveFunction, kernel: &ShortTimeKernel, t_total: f64) -> Result<PathSumRun> {
    let steps = steps_for(t_total, kernel.dt)?;
    let prop = PathSumPropagator::new(kernel.clone(), *psi0.grid())?;
    if steps == 0 {
        return Ok(PathSumRun {
            psi: psi0.clone(),
            steps,
            lattice_ratio: prop.lattice_ratio(),
            lattice_density: prop.lattice_density(),
            max_step_drift: 0.0,
            cumulative_drift: 0.0,
        });
    }
    prop.check_resolved(psi0.amp())?;
    let dx = psi0.grid().dx();
    let norm0 = psi0.norm();
    let mut amp = psi0.amp().to_vec();
    let mut prev = norm0;
    let mut max_step_drift: f64 = 0.0;
    for _ in 0..steps {
        amp = prop.apply(&amp);
        let now = norm_of(&amp, dx);
        if !now.is_finite() {
            return Err(Error::NonFinite(
                amp.iter()
                    .position(|a| !a.re.is_finite() || !a.im.is_finite())
                    .unwrap_or(0),
            ));
        }
        let drift = (now / prev - 1.0).abs();
        if drift > STEP_DRIFT_LIMIT {
            return Err(Error::NormDrift {
                drift,
                limit: STEP_DRIFT_LIMIT,
            });
        }
        max_step_drift = max_step_drift.max(drift);
        prev = now;
    }
    let cumulative_drift = (prev / norm0 - 1.0).abs();
    let psi = psi0.with_amp(amp)?.normalized();
    Ok(PathSumRun {
        psi,
        steps,
        lattice_ratio: prop.lattice_ratio(),
        lattice_density: prop.lattice_density(),
        max_step_drift,
        cumulative_drift,
    })
}

fn default_replicas() -> usize {
    256
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathSumConfig {
    /// Intermediate points per unit length.
    pub rho: f64,
    /// Kernel support; `None` keeps the kernel default.
    #[serde(default)]
    pub truncation_radius: Option<f64>,
    pub seed: u64,
    #[serde(default = "default_replicas")]
    pub replicas: usize,
}

impl PathSumConfig {
    /// Config with density given as points per diffusion length.
    pub fn from_rho_ell(rho_ell: f64, ell_d: f64, seed: u64) -> Self {
        Self {
            rho: rho_ell / ell_d,
            truncation_radius: None,
            seed,
            replicas: default_replicas(),
        }
    }
}

/// Cubic Lagrange interpolation on a uniform table; zero outside.
pub(crate) struct CubicTable {
    x0: f64,
    h: f64,
    values: Vec<Complex64>,
}

impl CubicTable {
    pub(crate) fn new(x0: f64, h: f64, values: Vec<Complex64>) -> Self {
        Self { x0, h, values }
    }

    pub(crate) fn eval(&self, x: f64) -> Complex64 {
        let n = self.values.len();
        let s = (x - self.x0) / self.h;
        if !(s >= 0.0 && s <= (n - 1) as f64) {
            return Complex64::new(0.0, 0.0);
        }
        let j = (s.floor() as usize).clamp(1, n.saturating_sub(3).max(1));
        let t = s - j as f64;
        let w = [
            -t * (t - 1.0) * (t - 2.0) / 6.0,
            (t + 1.0) * (t - 1.0) * (t - 2.0) / 2.0,
            -(t + 1.0) * t * (t - 2.0) / 2.0,
            (t + 1.0) * t * (t - 1.0) / 6.0,
        ];
        let mut acc = Complex64::new(0.0, 0.0);
        for (i, wi) in w.iter().enumerate() {
            if let Some(v) = self.values.get(j + i - 1) {
                acc += v * *wi;
            }
        }
        acc
    }
}

/// `Σ_q (1/ρ) K(x, q) f(q)` over sorted source points, for every target `x`.
pub fn sum_over_points(
    kernel: &ShortTimeKernel,
    points: &[f64],
    values: &[Complex64],
    rho: f64,
    targets: &[f64],
) -> Vec<Complex64> {
    let r = kernel.truncation_radius;
    let weight = 1.0 / rho;
    targets
        .iter()
        .map(|&x| {
            let lo = points.partition_point(|&q| q <= x - r);
            let mut acc = Complex64::new(0.0, 0.0);
            for (q, f) in points[lo..].iter().zip(&values[lo..]) {
                if *q >= x + r {
                    break;
                }
                acc += kernel.amplitude(x, *q) * f;
            }
            acc * weight
        })
        .collect()
}

/// The quadrature limit of the random-point sum: intermediate points on the
/// deterministic lattice itself. Reproduces [`path_sum_step`].
pub fn quadrature_limit(psi: &WaveFunction, kernel: &ShortTimeKernel) -> Result<WaveFunction> {
    let grid = *psi.grid();
    let prop = PathSumPropagator::new(kernel.clone(), grid)?;
    let fine = prop.refine(psi.amp());
    let h = prop.lattice_spacing();
    let points: Vec<f64> = (0..fine.len()).map(|j| grid.x_min() + j as f64 * h).collect();
    let targets: Vec<f64> = grid.points().collect();
    let mut out = sum_over_points(kernel, &points, &fine, 1.0 / h, &targets);
    let n = out.len();
    out[0] = Complex64::new(0.0, 0.0);
    out[n - 1] = Complex64::new(0.0, 0.0);
    psi.with_amp(out)
}

#[derive(Debug, Clone)]
pub struct MonteCarloEstimate {
    /// Replica mean; not renormalized.
    pub estimate: WaveFunction,
    /// Standard error of the mean at each grid point.
    pub stderr: Vec<f64>,
    pub replicas: usize,
    pub rho_ell: f64,
    pub points_per_slice: usize,
    pub kernel: ShortTimeKernel,
}

impl MonteCarloEstimate {
    /// RMS over grid points of `|estimate - reference|` and of the stderr.
    pub fn rms_against(&self, reference: &WaveFunction) -> (f64, f64) {
        let n = self.stderr.len() as f64;
        let dev = self
            .estimate
            .amp()
            .iter()
            .zip(reference.amp())
            .map(|(a, b)| (a - b).norm_sqr())
            .sum::<f64>()
            / n;
        let se = self.stderr.iter().map(|s| s * s).sum::<f64>() / n;
        (dev.sqrt(), se.sqrt())
    }

    /// Fraction of grid points where the estimate is within `k` stderr of `reference`.
    pub fn coverage(&self, reference: &WaveFunction, k: f64) -> f64 {
        let hits = self
            .estimate
            .amp()
            .iter()
            .zip(reference.amp())
            .zip(&self.stderr)
            .filter(|((a, b), s)| (*a - *b).norm() <= k * **s + 1e-300)
            .count();
        hits as f64 / self.stderr.len() as f64
    }
}

/// Sample-average path sum over `n_slices ≤ 3` steps of `dt`.
///
/// Each replica draws `round(ρ·(x_max-x_min))` uniform points per slice.
/// ψ0 is read at the first slice's points by cubic interpolation of its
/// band-limited refinement; every later slice reads the previous slice's
/// values, and the last slice lands on the grid.
pub fn monte_carlo_path_sum(
    psi0: &WaveFunction,
    potential: &Potential,
    n_slices: usize,
    dt: f64,
    config: &PathSumConfig,
) -> Result<MonteCarloEstimate> {
    if n_slices == 0 {
        return Err(Error::InvalidParameter("n_slices must be >= 1".into()));
    }
    if n_slices > 3 {
        return Err(Error::TooManySlices(n_slices));
    }
    if config.replicas < 2 {
        return Err(Error::InvalidParameter(
            "at least two replicas are needed for a standard error".into(),
        ));
    }
    let mut kernel = ShortTimeKernel::for_wave(psi0, potential.clone(), dt)?;
    if let Some(r) = config.truncation_radius {
        kernel = kernel.with_truncation_radius(r)?;
    }
    let rho_ell = config.rho * kernel.ell_d;
    if !(rho_ell >= 4.0) {
        return Err(Error::DensityTooLow(rho_ell));
    }
    let grid = *psi0.grid();
    let refiner = Refiner::new(grid.len(), INTERP_REFINE);
    let table = CubicTable::new(
        grid.x_min(),
        grid.dx() / INTERP_REFINE as f64,
        refiner.refine(psi0.amp()),
    );
    let n_points = (config.rho * grid.length()).round() as usize;
    let targets: Vec<f64> = grid.points().collect();

    let replicas: Vec<Vec<Complex64>> = (0..config.replicas)
        .into_par_iter()
        .map(|r| {
            let mut rng = rng::stream(config.seed, r as u64);
            let draw = |rng: &mut rand_chacha::ChaCha8Rng| {
                let mut p: Vec<f64> = (0..n_points)
                    .map(|_| grid.x_min() + rng.random::<f64>() * grid.length())
                    .collect();
                p.sort_by(f64::total_cmp);
                p
            };
            let mut points = draw(&mut rng);
            let mut values: Vec<Complex64> = points.iter().map(|&q| table.eval(q)).collect();
            for slice in 0..n_slices {
                if slice + 1 == n_slices {
                    let mut out = sum_over_points(&kernel, &points, &values, config.rho, &targets);
                    let n = out.len();
                    out[0] = Complex64::new(0.0, 0.0);
                    out[n - 1] = Complex64::new(0.0, 0.0);
                    return out;
                }
                let next = draw(&mut rng);
                values = sum_over_points(&kernel, &points, &values, config.rho, &next);
                points = next;
            }
            unreachable!()
        })
        .collect();

    let n = grid.len();
    let count = replicas.len() as f64;
    let mut mean = vec![Complex64::new(0.0, 0.0); n];
    for rep in &replicas {
        mean.iter_mut().zip(rep).for_each(|(m, v)| *m += v);
    }
    mean.iter_mut().for_each(|m| *m /= count);
    let mut var = vec![0.0; n];
    for rep in &replicas {
        var.iter_mut()
            .zip(rep.iter().zip(&mean))
            .for_each(|(s, (v, m))| *s += (v - m).norm_sqr());
    }
    let stderr: Vec<f64> = var.iter().map(|s| (s / (count * (count - 1.0))).sqrt()).collect();
    if mean.iter().zip(&stderr).all(|(m, s)| *s > m.norm()) {
        return Err(Error::StderrDominates);
    }
    Ok(MonteCarloEstimate {
        estimate: psi0.with_amp(mean)?,
        stderr,
        replicas: config.replicas,
        rho_ell,
        points_per_slice: n_points,
        kernel,
    })
}

/// Deterministic counterpart of [`monte_carlo_path_sum`]: `n_slices`
/// lattice steps with the same kernel, not renormalized.
pub fn deterministic_slices(psi0: &WaveFunction, kernel: &ShortTimeKernel, n_slices: usize) -> Result<WaveFunction> {
    let prop = PathSumPropagator::new(kernel.clone(), *psi0.grid())?;
    let mut amp = psi0.amp().to_vec();
    for _ in 0..n_slices {
        amp = prop.apply(&amp);
    }
    psi0.with_amp(amp)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grids::{diagnostics, gaussian_packet};
    use crate::schrodinger_ref::{analytic_oracle, OracleCase};

    #[test]
    fn kernel_magnitude_is_inverse_diffusion_length() {
        let k = ShortTimeKernel::new(0.01, 1.3, 1.0, Potential::Free, Scheme::Midpoint).unwrap();
        for u in [-0.7, -0.1, 0.0, 0.05, 0.3, 1.1] {
            assert!((k.free(u).norm() - 1.0 / k.ell_d).abs() < 1e-12);
        }
        assert!((k.ell_d - (2.0 * PI * 0.01 / 1.3).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn window_shape() {
        let k = ShortTimeKernel::new(0.01, 1.0, 1.0, Potential::Free, Scheme::Midpoint).unwrap();
        let r = k.truncation_radius;
        assert_eq!(k.window(0.0), 1.0);
        assert_eq!(k.window(0.49 * r), 1.0);
        assert_eq!(k.window(r), 0.0);
        assert!((k.window(0.75 * r) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn fresnel_normalization_on_plateau() {
        let g = SpaceGrid::new(-20.0, 20.0, 1024).unwrap();
        let psi = WaveFunction::from_fn(g, 1.0, 1.0, |x| {
            let t = ((x.abs() - 8.0) / 6.0).clamp(0.0, 1.0);
            Complex64::new(1.0 - smoothstep(t), 0.0)
        })
        .unwrap();
        let k = ShortTimeKernel::new(0.01, 1.0, 1.0, Potential::Free, Scheme::Midpoint).unwrap();
        let out = path_sum_step(&psi, &k).unwrap();
        for (i, x) in g.points().enumerate() {
            if x.abs() < 6.0 {
                assert!(
                    (out.amp()[i] - Complex64::new(1.0, 0.0)).norm() < 1e-3,
                    "{x}: {}",
                    out.amp()[i]
                );
            }
        }
    }

    #[test]
    fn one_step_free_spreading() {
        let g = SpaceGrid::new(-20.0, 20.0, 1024).unwrap();
        let psi = gaussian_packet(&g, 0.0, 0.0, 1.0, 1.0, 1.0).unwrap();
        let k = ShortTimeKernel::for_wave(&psi, Potential::Free, 0.01).unwrap();
        let out = path_sum_step(&psi, &k).unwrap().normalized();
        let var = diagnostics(&out, &Potential::Free).var_x;
        assert!((var - (1.0 + (0.01f64 / 2.0).powi(2))).abs() < 1e-6, "{var}");
    }

    #[test]
    fn one_step_harmonic_center() {
        let g = SpaceGrid::new(-10.0, 10.0, 512).unwrap();
        let pot = Potential::harmonic(1.0, 1.0);
        let psi = gaussian_packet(&g, 1.0, 0.0, 0.5f64.sqrt(), 1.0, 1.0).unwrap();
        let dt = 0.01;
        let k = ShortTimeKernel::for_wave(&psi, pot.clone(), dt).unwrap();
        let out = path_sum_step(&psi, &k).unwrap().normalized();
        let mx = diagnostics(&out, &pot).mean_x;
        assert!((mx - dt.cos()).abs() < 1e-6, "{mx}");
    }

    #[test]
    fn zero_time_is_identity() {
        let g = SpaceGrid::new(-10.0, 10.0, 256).unwrap();
        let psi = gaussian_packet(&g, 0.3, 0.2, 1.0, 1.0, 1.0).unwrap();
        let out = propagate_pathsum(&psi, &Potential::Free, 0.0, 0.01).unwrap();
        assert_eq!(out, psi);
    }

    #[test]
    fn step_mismatch_rejected() {
        let g = SpaceGrid::new(-10.0, 10.0, 256).unwrap();
        let psi = gaussian_packet(&g, 0.0, 0.0, 1.0, 1.0, 1.0).unwrap();
        assert!(matches!(
            propagate_pathsum(&psi, &Potential::Free, 0.105, 0.01),
            Err(Error::StepMismatch { .. })
        ));
    }

    #[test]
    fn unresolved_momentum_flagged() {
        let g = SpaceGrid::new(-10.0, 10.0, 2048).unwrap();
        let psi = gaussian_packet(&g, 0.0, 150.0, 1.0, 1.0, 1.0).unwrap();
        // dt = 0.05: the flat window core reaches k ≈ 67 only
        let k = ShortTimeKernel::for_wave(&psi, Potential::Free, 0.05).unwrap();
        assert!(matches!(path_sum_step(&psi, &k), Err(Error::AliasingDetected(_))));
    }

    #[test]
    fn hundred_step_unitarity() {
        let g = SpaceGrid::new(-16.0, 16.0, 512).unwrap();
        let psi = gaussian_packet(&g, 0.0, 1.0, 1.0, 1.0, 1.0).unwrap();
        let k = ShortTimeKernel::for_wave(&psi, Potential::Free, 0.01).unwrap();
        let run = propagate_with(&psi, &k, 1.0).unwrap();
        assert_eq!(run.steps, 100);
        assert!(run.cumulative_drift < 1e-2, "{}", run.cumulative_drift);
    }

    #[test]
    fn radius_doubling_converged() {
        let g = SpaceGrid::new(-16.0, 16.0, 512).unwrap();
        let psi = gaussian_packet(&g, 0.0, 0.5, 1.0, 1.0, 1.0).unwrap();
        let base = ShortTimeKernel::for_wave(&psi, Potential::Free, 0.01).unwrap();
        let r = base.ell_d * 8.0;
        let a = path_sum_step(&psi, &base.clone().with_truncation_radius(r).unwrap()).unwrap();
        let b = path_sum_step(&psi, &base.with_truncation_radius(2.0 * r).unwrap()).unwrap();
        assert!(a.l2_distance(&b) < 1e-6, "{}", a.l2_distance(&b));
    }

    #[test]
    fn second_order_in_dt() {
        let g = SpaceGrid::new(-10.0, 10.0, 512).unwrap();
        let pot = Potential::harmonic(1.0, 1.0);
        let case = OracleCase::HarmonicCoherent {
            x0: 1.0,
            p0: 0.5,
            omega: 1.0,
        };
        let psi = analytic_oracle(&case, &g, 1.0, 1.0, 0.0).unwrap();
        let exact = analytic_oracle(&case, &g, 1.0, 1.0, 1.0).unwrap();
        let err = |dt: f64| propagate_pathsum(&psi, &pot, 1.0, dt).unwrap().l2_distance(&exact);
        let (e1, e2) = (err(0.04), err(0.02));
        assert!(e1 / e2 >= 3.5, "{e1} {e2}");
    }

    #[test]
    fn split_and_midpoint_agree_for_smooth_potential() {
        let g = SpaceGrid::new(-10.0, 10.0, 256).unwrap();
        let pot = Potential::harmonic(1.0, 1.0);
        let psi = gaussian_packet(&g, 0.5, 0.0, 0.8, 1.0, 1.0).unwrap();
        let k = ShortTimeKernel::for_wave(&psi, pot, 0.01).unwrap();
        let a = path_sum_step(&psi, &k).unwrap();
        let b = path_sum_step(&psi, &k.clone().with_scheme(Scheme::SymmetricSplit)).unwrap();
        assert!(a.l2_distance(&b) < 1e-4);
    }

    #[test]
    fn quadrature_limit_matches_step() {
        let g = SpaceGrid::new(-12.0, 12.0, 256).unwrap();
        let pot = Potential::harmonic(1.0, 0.8);
        let psi = gaussian_packet(&g, 0.4, 0.3, 1.0, 1.0, 1.0).unwrap();
        let k = ShortTimeKernel::for_wave(&psi, pot, 0.05).unwrap();
        let a = path_sum_step(&psi, &k).unwrap();
        let b = quadrature_limit(&psi, &k).unwrap();
        assert!(a.l2_distance(&b) < 1e-12, "{}", a.l2_distance(&b));
    }

    #[test]
    fn mc_slice_limits() {
        let g = SpaceGrid::new(-12.0, 12.0, 128).unwrap();
        let psi = gaussian_packet(&g, 0.0, 0.0, 1.0, 1.0, 1.0).unwrap();
        let cfg = PathSumConfig {
            rho: 100.0,
            truncation_radius: None,
            seed: 1,
            replicas: 4,
        };
        assert!(matches!(
            monte_carlo_path_sum(&psi, &Potential::Free, 4, 0.05, &cfg),
            Err(Error::TooManySlices(4))
        ));
        let sparse = PathSumConfig { rho: 2.0, ..cfg };
        assert!(matches!(
            monte_carlo_path_sum(&psi, &Potential::Free, 1, 0.05, &sparse),
            Err(Error::DensityTooLow(_))
        ));
    }

    #[test]
    fn mc_two_slices_consistent() {
        let g = SpaceGrid::new(-12.0, 12.0, 128).unwrap();
        let psi = gaussian_packet(&g, 0.0, 0.5, 1.0, 1.0, 1.0).unwrap();
        let pot = Potential::harmonic(1.0, 0.5);
        let k = ShortTimeKernel::for_wave(&psi, pot.clone(), 0.05).unwrap();
        let cfg = PathSumConfig {
            rho: 32.0 / k.ell_d,
            truncation_radius: Some(6.0 * k.ell_d),
            seed: 9,
            replicas: 64,
        };
        let est = monte_carlo_path_sum(&psi, &pot, 2, 0.05, &cfg).unwrap();
        let reference = deterministic_slices(&psi, &est.kernel, 2).unwrap();
        let (dev, se) = est.rms_against(&reference);
        assert!(dev < 3.0 * se, "{dev} vs {se}");
    }

    #[test]
    fn mc_reproducible() {
        let g = SpaceGrid::new(-12.0, 12.0, 128).unwrap();
        let psi = gaussian_packet(&g, 0.0, 0.0, 1.0, 1.0, 1.0).unwrap();
        let cfg = PathSumConfig {
            rho: 60.0,
            truncation_radius: Some(3.0),
            seed: 5,
            replicas: 8,
        };
        let a = monte_carlo_path_sum(&psi, &Potential::Free, 1, 0.05, &cfg).unwrap();
        let b = monte_carlo_path_sum(&psi, &Potential::Free, 1, 0.05, &cfg).unwrap();
        assert_eq!(a.estimate, b.estimate);
        assert_eq!(a.stderr, b.stderr);
    }
}
