//! Uniform space/time discretizations, the wave-function container and the
//! basic observables every other module relies on.
//!
//! Amplitudes carry units of length^(-1/2); norms and moments are plain
//! grid sums times `dx`. The grid ends are hard walls: propagators pin the
//! first and last amplitude to zero, and [`WaveFunction::check_boundary`]
//! enforces that nothing reaches the outer 5% of the box.

use std::f64::consts::PI;
use std::io::{BufRead, Write};

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Amplitude limit inside the outer 5% of the grid.
pub const BOUNDARY_AMPLITUDE_LIMIT: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpaceGrid {
    x_min: f64,
    x_max: f64,
    n_points: usize,
    dx: f64,
}

impl SpaceGrid {
    pub fn new(x_min: f64, x_max: f64, n_points: usize) -> Result<Self> {
        if n_points < 16 {
            return Err(Error::InvalidGrid(format!("n_points = {n_points} < 16")));
        }
        if !(x_min.is_finite() && x_max.is_finite()) || x_max <= x_min {
            return Err(Error::InvalidGrid(format!("bad bounds [{x_min}, {x_max}]")));
        }
        let dx = (x_max - x_min) / (n_points - 1) as f64;
        Ok(Self {
            x_min,
            x_max,
            n_points,
            dx,
        })
    }

    /// Grid with spacing close to `dx_target`, rounded so both ends are nodes.
    pub fn with_spacing(x_min: f64, x_max: f64, dx_target: f64) -> Result<Self> {
        if dx_target <= 0.0 {
            return Err(Error::InvalidGrid(format!("dx_target = {dx_target}")));
        }
        let n = ((x_max - x_min) / dx_target).ceil() as usize + 1;
        Self::new(x_min, x_max, n.max(16))
    }

    pub fn x_min(&self) -> f64 {
        self.x_min
    }

    pub fn x_max(&self) -> f64 {
        self.x_max
    }

    pub fn len(&self) -> usize {
        self.n_points
    }

    pub fn is_empty(&self) -> bool {
        self.n_points == 0
    }

    pub fn dx(&self) -> f64 {
        self.dx
    }

    pub fn length(&self) -> f64 {
        self.x_max - self.x_min
    }

    #[inline]
    pub fn x(&self, k: usize) -> f64 {
        self.x_min + k as f64 * self.dx
    }

    pub fn points(&self) -> impl Iterator<Item = f64> + '_ {
        (0..self.n_points).map(move |k| self.x(k))
    }

    /// Fractional node index of position `x` (not clamped).
    #[inline]
    pub fn fractional_index(&self, x: f64) -> f64 {
        (x - self.x_min) / self.dx
    }

    /// Number of nodes in each outer 5% band.
    pub fn edge_band(&self) -> usize {
        ((0.05 * self.n_points as f64).ceil() as usize).max(1)
    }

    pub fn contains(&self, x: f64) -> bool {
        x >= self.x_min && x <= self.x_max
    }
}

/// Coarse time axis. `fine_ratio` is the number of fine-scale instants per
/// coarse step; nothing below the coarse step is ever simulated.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    pub t_start: f64,
    pub dt: f64,
    pub n_steps: usize,
    pub fine_ratio: usize,
}

impl TimeGrid {
    pub fn new(t_start: f64, dt: f64, n_steps: usize) -> Result<Self> {
        if !(dt > 0.0) || !dt.is_finite() {
            return Err(Error::InvalidParameter(format!("dt = {dt}")));
        }
        if n_steps < 1 {
            return Err(Error::InvalidParameter("n_steps must be >= 1".into()));
        }
        Ok(Self {
            t_start,
            dt,
            n_steps,
            fine_ratio: 1,
        })
    }

    /// Splits `duration` into steps of `dt`; the ratio must be an integer to
    /// within 1e-9 relative.
    pub fn from_duration(t_start: f64, duration: f64, dt: f64) -> Result<Self> {
        let n = steps_for(duration, dt)?;
        Self::new(t_start, dt, n.max(1))
    }

    pub fn with_fine_ratio(mut self, fine_ratio: usize) -> Result<Self> {
        if fine_ratio < 1 {
            return Err(Error::InvalidParameter("fine_ratio must be >= 1".into()));
        }
        self.fine_ratio = fine_ratio;
        Ok(self)
    }

    pub fn t(&self, n: usize) -> f64 {
        self.t_start + n as f64 * self.dt
    }

    pub fn t_end(&self) -> f64 {
        self.t(self.n_steps)
    }

    pub fn fine_dt(&self) -> f64 {
        self.dt / self.fine_ratio as f64
    }
}

/// Number of steps of size `dt` in `total`, rejecting non-integer ratios.
pub fn steps_for(total: f64, dt: f64) -> Result<usize> {
    if !(dt > 0.0) {
        return Err(Error::InvalidParameter(format!("dt = {dt}")));
    }
    if total < 0.0 {
        return Err(Error::InvalidParameter(format!("negative duration {total}")));
    }
    let ratio = total / dt;
    let n = ratio.round();
    if (ratio - n).abs() > 1e-9 * n.max(1.0) {
        return Err(Error::StepMismatch { total, dt });
    }
    Ok(n as usize)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Potential {
    Free,
    /// `V = m ω² x² / 2`.
    Harmonic {
        mass: f64,
        omega: f64,
    },
    /// `V = -F x`, a uniform force `F`.
    Linear {
        force: f64,
    },
    /// Values on a uniform grid starting at `x_min`, linearly interpolated
    /// and clamped at the ends.
    Tabulated {
        x_min: f64,
        dx: f64,
        values: Vec<f64>,
    },
}

impl Potential {
    pub fn harmonic(mass: f64, omega: f64) -> Self {
        Potential::Harmonic { mass, omega }
    }

    pub fn linear(force: f64) -> Self {
        Potential::Linear { force }
    }

    pub fn tabulated(grid: &SpaceGrid, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::GridMismatch(format!(
                "tabulated potential has {} values for {} grid points",
                values.len(),
                grid.len()
            )));
        }
        if let Some(k) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(k));
        }
        Ok(Potential::Tabulated {
            x_min: grid.x_min(),
            dx: grid.dx(),
            values,
        })
    }

    pub fn value(&self, x: f64) -> f64 {
        match self {
            Potential::Free => 0.0,
            Potential::Harmonic { mass, omega } => 0.5 * mass * omega * omega * x * x,
            Potential::Linear { force } => -force * x,
            Potential::Tabulated { x_min, dx, values } => {
                let s = ((x - x_min) / dx).clamp(0.0, (values.len() - 1) as f64);
                let k = (s.floor() as usize).min(values.len() - 2);
                let f = s - k as f64;
                values[k] * (1.0 - f) + values[k + 1] * f
            }
        }
    }

    /// dV/dx; finite differences for tabulated data.
    pub fn gradient(&self, x: f64) -> f64 {
        match self {
            Potential::Free => 0.0,
            Potential::Harmonic { mass, omega } => mass * omega * omega * x,
            Potential::Linear { force } => -force,
            Potential::Tabulated { dx, .. } => {
                let h = 0.5 * dx;
                (self.value(x + h) - self.value(x - h)) / (2.0 * h)
            }
        }
    }

    /// d²V/dx²; finite differences for tabulated data.
    pub fn curvature(&self, x: f64) -> f64 {
        match self {
            Potential::Free | Potential::Linear { .. } => 0.0,
            Potential::Harmonic { mass, omega } => mass * omega * omega,
            Potential::Tabulated { dx, .. } => {
                let h = *dx;
                (self.value(x + h) - 2.0 * self.value(x) + self.value(x - h)) / (h * h)
            }
        }
    }

    pub fn sample(&self, grid: &SpaceGrid) -> Vec<f64> {
        grid.points().map(|x| self.value(x)).collect()
    }

    /// Same potential with every value multiplied by `factor`.
    pub fn scaled(&self, factor: f64) -> Potential {
        match self {
            Potential::Free => Potential::Free,
            Potential::Harmonic { mass, omega } => Potential::Harmonic {
                mass: mass * factor,
                omega: *omega,
            },
            Potential::Linear { force } => Potential::Linear { force: force * factor },
            Potential::Tabulated { x_min, dx, values } => Potential::Tabulated {
                x_min: *x_min,
                dx: *dx,
                values: values.iter().map(|v| v * factor).collect(),
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WaveFunction {
    grid: SpaceGrid,
    amp: Vec<Complex64>,
    mass: f64,
    hbar: f64,
}

impl WaveFunction {
    pub fn new(grid: SpaceGrid, amp: Vec<Complex64>, mass: f64, hbar: f64) -> Result<Self> {
        if amp.len() != grid.len() {
            return Err(Error::GridMismatch(format!(
                "{} amplitudes for {} points",
                amp.len(),
                grid.len()
            )));
        }
        if !(mass > 0.0) || !(hbar > 0.0) {
            return Err(Error::InvalidParameter(format!("mass {mass}, hbar {hbar}")));
        }
        let psi = Self { grid, amp, mass, hbar };
        psi.check_finite()?;
        Ok(psi)
    }

    pub fn from_fn(grid: SpaceGrid, mass: f64, hbar: f64, f: impl Fn(f64) -> Complex64) -> Result<Self> {
        let amp = grid.points().map(f).collect();
        Self::new(grid, amp, mass, hbar)
    }

    pub fn grid(&self) -> &SpaceGrid {
        &self.grid
    }

    pub fn amp(&self) -> &[Complex64] {
        &self.amp
    }

    pub fn amp_mut(&mut self) -> &mut [Complex64] {
        &mut self.amp
    }

    pub fn into_amp(self) -> Vec<Complex64> {
        self.amp
    }

    pub fn mass(&self) -> f64 {
        self.mass
    }

    pub fn hbar(&self) -> f64 {
        self.hbar
    }

    /// Copy with new amplitudes on the same grid.
    pub fn with_amp(&self, amp: Vec<Complex64>) -> Result<Self> {
        Self::new(self.grid, amp, self.mass, self.hbar)
    }

    pub fn with_mass(mut self, mass: f64) -> Self {
        self.mass = mass;
        self
    }

    pub fn norm_sq(&self) -> f64 {
        self.amp.iter().map(|a| a.norm_sqr()).sum::<f64>() * self.grid.dx()
    }

    pub fn norm(&self) -> f64 {
        self.norm_sq().sqrt()
    }

    pub fn normalize(&mut self) {
        let n = self.norm();
        if n > 0.0 {
            let inv = 1.0 / n;
            self.amp.iter_mut().for_each(|a| *a *= inv);
        }
    }

    pub fn normalized(mut self) -> Self {
        self.normalize();
        self
    }

    pub fn density(&self) -> Vec<f64> {
        self.amp.iter().map(|a| a.norm_sqr()).collect()
    }

    /// `<self|other>` with the grid measure.
    pub fn inner(&self, other: &WaveFunction) -> Complex64 {
        self.amp
            .iter()
            .zip(&other.amp)
            .map(|(a, b)| a.conj() * b)
            .sum::<Complex64>()
            * self.grid.dx()
    }

    pub fn l2_distance(&self, other: &WaveFunction) -> f64 {
        let s: f64 = self.amp.iter().zip(&other.amp).map(|(a, b)| (a - b).norm_sqr()).sum();
        (s * self.grid.dx()).sqrt()
    }

    pub fn check_finite(&self) -> Result<()> {
        match self.amp.iter().position(|a| !(a.re.is_finite() && a.im.is_finite())) {
            Some(k) => Err(Error::NonFinite(k)),
            None => Ok(()),
        }
    }

    pub fn max_edge_amplitude(&self) -> f64 {
        let band = self.grid.edge_band();
        let n = self.amp.len();
        self.amp[..band]
            .iter()
            .chain(&self.amp[n - band..])
            .map(|a| a.norm())
            .fold(0.0, f64::max)
    }

    /// Hard-wall guard: nothing above 1e-8 in the outer 5% on either side.
    pub fn check_boundary(&self) -> Result<()> {
        let amp = self.max_edge_amplitude();
        if amp >= BOUNDARY_AMPLITUDE_LIMIT {
            return Err(Error::BoundaryLeak { amp });
        }
        Ok(())
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(
            w,
            "# dx={:.16e},mass={:.16e},hbar={:.16e}",
            self.grid.dx(),
            self.mass,
            self.hbar
        )?;
        writeln!(w, "x,re_amp,im_amp")?;
        for (k, a) in self.amp.iter().enumerate() {
            writeln!(w, "{:.16e},{:.16e},{:.16e}", self.grid.x(k), a.re, a.im)?;
        }
        Ok(())
    }

    pub fn read_csv<R: BufRead>(r: R) -> Result<Self> {
        let mut mass = None;
        let mut hbar = None;
        let mut xs = Vec::new();
        let mut amp = Vec::new();
        let bad = |s: &str| Error::Io(format!("malformed wave-function CSV: {s}"));
        for line in r.lines() {
            let line = line?;
            let line = line.trim();
            if line.is_empty() || line.starts_with("x,") {
                continue;
            }
            if let Some(meta) = line.strip_prefix('#') {
                for kv in meta.trim().split(',') {
                    let (k, v) = kv.split_once('=').ok_or_else(|| bad(kv))?;
                    let v: f64 = v.trim().parse().map_err(|_| bad(kv))?;
                    match k.trim() {
                        "mass" => mass = Some(v),
                        "hbar" => hbar = Some(v),
                        _ => {}
                    }
                }
                continue;
            }
            let cols: Vec<f64> = line
                .split(',')
                .map(|c| c.trim().parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| bad(line))?;
            if cols.len() != 3 {
                return Err(bad(line));
            }
            xs.push(cols[0]);
            amp.push(Complex64::new(cols[1], cols[2]));
        }
        if xs.len() < 2 {
            return Err(bad("fewer than two rows"));
        }
        let grid = SpaceGrid::new(xs[0], *xs.last().unwrap(), xs.len())?;
        Self::new(
            grid,
            amp,
            mass.ok_or_else(|| bad("missing mass"))?,
            hbar.ok_or_else(|| bad("missing hbar"))?,
        )
    }
}

/// Normalized Gaussian packet `exp(-(x-x0)²/(4σ²) + i p0 x/ħ)`, so that
/// `Var(x) = σ²` and `<p> = p0`.
pub fn gaussian_packet(grid: &SpaceGrid, x0: f64, p0: f64, sigma: f64, mass: f64, hbar: f64) -> Result<WaveFunction> {
    if !(sigma >= 3.0 * grid.dx()) {
        return Err(Error::PacketTooNarrow { sigma, dx: grid.dx() });
    }
    let (lo, hi) = (x0 - 5.0 * sigma, x0 + 5.0 * sigma);
    if lo < grid.x_min() || hi > grid.x_max() {
        return Err(Error::PacketOutsideGrid {
            lo,
            hi,
            x_min: grid.x_min(),
            x_max: grid.x_max(),
        });
    }
    let pref = (2.0 * PI * sigma * sigma).powf(-0.25);
    let psi = WaveFunction::from_fn(*grid, mass, hbar, |x| {
        let u = x - x0;
        Complex64::from_polar(pref * (-u * u / (4.0 * sigma * sigma)).exp(), p0 * x / hbar)
    })?;
    Ok(psi.normalized())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Diagnostics {
    pub norm: f64,
    pub mean_x: f64,
    pub var_x: f64,
    pub mean_p: f64,
    pub mean_kinetic: f64,
    pub mean_energy: f64,
    /// Set when any amplitude is NaN or infinite; the moments are then meaningless.
    pub non_finite: bool,
}

/// Moments of `psi`. Expectation values are divided by the norm, which is
/// reported as-is.
///
/// `<p>` is the phase gradient `arg(ψ_k* ψ_{k+1})/dx` averaged with weights
/// `|ψ_k ψ_{k+1}|`, which is exact for a Gaussian times a plane wave. The kinetic
/// term uses the five-point centered second difference with zero amplitude
/// beyond the walls.
pub fn diagnostics(psi: &WaveFunction, potential: &Potential) -> Diagnostics {
    let non_finite = psi.check_finite().is_err();
    let grid = psi.grid();
    let dx = grid.dx();
    let a = psi.amp();
    let n = a.len();
    let w: Vec<f64> = a.iter().map(|z| z.norm_sqr()).collect();
    let mass_total: f64 = w.iter().sum::<f64>() * dx;
    let norm = mass_total.sqrt();
    let safe = if mass_total > 0.0 { mass_total } else { f64::NAN };

    let mean_x = w.iter().enumerate().map(|(k, wk)| grid.x(k) * wk).sum::<f64>() * dx / safe;
    let var_x = w
        .iter()
        .enumerate()
        .map(|(k, wk)| (grid.x(k) - mean_x).powi(2) * wk)
        .sum::<f64>()
        * dx
        / safe;

    let (mut flux, mut pair_weight) = (0.0, 0.0);
    for p in a.windows(2) {
        let w = p[0].norm() * p[1].norm();
        flux += (p[0].conj() * p[1]).arg() * w;
        pair_weight += w;
    }
    let mean_p = psi.hbar() * flux / (pair_weight * dx);

    let at = |k: isize| -> Complex64 {
        if k < 0 || k as usize >= n {
            Complex64::new(0.0, 0.0)
        } else {
            a[k as usize]
        }
    };
    let mut lap = 0.0;
    for k in 0..n as isize {
        let d2 = (-at(k + 2) + at(k + 1) * 16.0 - at(k) * 30.0 + at(k - 1) * 16.0 - at(k - 2)) / (12.0 * dx * dx);
        lap += (at(k).conj() * d2).re;
    }
    let mean_kinetic = -psi.hbar() * psi.hbar() / (2.0 * psi.mass()) * lap * dx / safe;
    let mean_v = w
        .iter()
        .enumerate()
        .map(|(k, wk)| potential.value(grid.x(k)) * wk)
        .sum::<f64>()
        * dx
        / safe;

    Diagnostics {
        norm,
        mean_x,
        var_x,
        mean_p,
        mean_kinetic,
        mean_energy: mean_kinetic + mean_v,
        non_finite,
    }
}

/// `<P²>/2m` from the discrete Fourier transform, spectrally accurate for
/// band-limited states. Divided by the norm.
pub fn spectral_kinetic(psi: &WaveFunction) -> f64 {
    let n = psi.amp().len();
    let mut spec = psi.amp().to_vec();
    rustfft::FftPlanner::new().plan_fft_forward(n).process(&mut spec);
    let dk = 2.0 * PI / (n as f64 * psi.grid().dx());
    let (mut num, mut den) = (0.0, 0.0);
    for (j, z) in spec.iter().enumerate() {
        let k = if j <= n / 2 { j as f64 } else { j as f64 - n as f64 } * dk;
        let w = z.norm_sqr();
        num += k * k * w;
        den += w;
    }
    psi.hbar() * psi.hbar() * num / (2.0 * psi.mass() * den)
}
