//! Crank–Nicolson reference solver and closed-form oracles.
//!
//! The spatial operator uses the compact fourth-order (Numerov) form
//! `iħ B ψ_t = -(ħ²/2m) D² ψ + B V ψ` with `B = (1, 10, 1)/12` and `D²` the
//! three-point second difference, so each step is one tridiagonal solve.
//! `B⁻¹D²` is symmetric, which keeps the Cayley step exactly unitary.
//! The plain three-point stencil is kept as an option.

use std::f64::consts::PI;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grids::{steps_for, Potential, SpaceGrid, WaveFunction};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stencil {
    #[default]
    Numerov,
    ThreePoint,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReferenceConfig {
    pub dt: f64,
    #[serde(default = "default_tolerance")]
    pub tolerance: f64,
    #[serde(default)]
    pub stencil: Stencil,
}

fn default_tolerance() -> f64 {
    1e-12
}

impl ReferenceConfig {
    pub fn new(dt: f64) -> Self {
        Self {
            dt,
            tolerance: default_tolerance(),
            stencil: Stencil::Numerov,
        }
    }

    pub fn with_stencil(mut self, stencil: Stencil) -> Self {
        self.stencil = stencil;
        self
    }
}

/// Amplitude components below this are set to zero during a step.
pub const FLUSH_BELOW: f64 = 1e-150;

/// Factored Crank–Nicolson step for a fixed grid, potential and `dt`.
/// The end points are hard walls and stay zero.
#[derive(Debug, Clone)]
pub struct CrankNicolson {
    n: usize,
    tolerance: f64,
    // left-hand matrix (for the residual check)
    l_diag: Vec<Complex64>,
    l_up: Vec<Complex64>,
    l_lo: Vec<Complex64>,
    // right-hand matrix
    r_diag: Vec<Complex64>,
    r_up: Vec<Complex64>,
    r_lo: Vec<Complex64>,
    // Thomas factors
    c_prime: Vec<Complex64>,
    inv_denom: Vec<Complex64>,
    rhs: Vec<Complex64>,
    work: Vec<Complex64>,
}

impl CrankNicolson {
    pub fn new(
        grid: &SpaceGrid,
        potential: &Potential,
        mass: f64,
        hbar: f64,
        config: &ReferenceConfig,
    ) -> Result<Self> {
        if !(config.dt > 0.0) {
            return Err(Error::InvalidParameter(format!("dt = {}", config.dt)));
        }
        let v: Vec<f64> = (1..grid.len() - 1).map(|k| potential.value(grid.x(k))).collect();
        let n = v.len();
        let dx2 = grid.dx() * grid.dx();
        let c = -hbar * hbar / (2.0 * mass);
        let (bd, bo) = match config.stencil {
            Stencil::Numerov => (10.0 / 12.0, 1.0 / 12.0),
            Stencil::ThreePoint => (1.0, 0.0),
        };
        let z = Complex64::new(0.0, 0.5 * config.dt / hbar);
        let a_diag: Vec<f64> = v.iter().map(|vi| -2.0 * c / dx2 + bd * vi).collect();
        let a_up: Vec<f64> = (0..n - 1).map(|i| c / dx2 + bo * v[i + 1]).collect();
        let a_lo: Vec<f64> = (0..n - 1).map(|i| c / dx2 + bo * v[i]).collect();
        let one = Complex64::new(1.0, 0.0);
        let l_diag: Vec<Complex64> = a_diag.iter().map(|a| one * bd + z * a).collect();
        let l_up: Vec<Complex64> = a_up.iter().map(|a| one * bo + z * a).collect();
        let l_lo: Vec<Complex64> = a_lo.iter().map(|a| one * bo + z * a).collect();
        let r_diag = a_diag.iter().map(|a| one * bd - z * a).collect();
        let r_up = a_up.iter().map(|a| one * bo - z * a).collect();
        let r_lo = a_lo.iter().map(|a| one * bo - z * a).collect();

        let mut c_prime = vec![Complex64::new(0.0, 0.0); n];
        let mut inv_denom = vec![Complex64::new(0.0, 0.0); n];
        inv_denom[0] = l_diag[0].inv();
        if n > 1 {
            c_prime[0] = l_up[0] * inv_denom[0];
        }
        for i in 1..n {
            let d = l_diag[i] - l_lo[i - 1] * c_prime[i - 1];
            if d.norm() < 1e-300 {
                return Err(Error::SolverDivergence(f64::INFINITY));
            }
            inv_denom[i] = d.inv();
            if i + 1 < n {
                c_prime[i] = l_up[i] * inv_denom[i];
            }
        }
        Ok(Self {
            n,
            tolerance: config.tolerance,
            l_diag,
            l_up,
            l_lo,
            r_diag,
            r_up,
            r_lo,
            c_prime,
            inv_denom,
            rhs: vec![Complex64::new(0.0, 0.0); n],
            work: vec![Complex64::new(0.0, 0.0); n],
        })
    }

    /// Advances `amp` (full grid, ends included) by one step in place.
    pub fn step(&mut self, amp: &mut [Complex64]) -> Result<()> {
        let n = self.n;
        let p = &mut amp[1..=n];
        for i in 0..n {
            let mut r = self.r_diag[i] * p[i];
            if i + 1 < n {
                r += self.r_up[i] * p[i + 1];
            }
            if i > 0 {
                r += self.r_lo[i - 1] * p[i - 1];
            }
            self.rhs[i] = flush_c(r);
        }
        let d = &mut self.work;
        d[0] = self.rhs[0] * self.inv_denom[0];
        for i in 1..n {
            d[i] = flush_c((self.rhs[i] - self.l_lo[i - 1] * d[i - 1]) * self.inv_denom[i]);
        }
        for i in (0..n - 1).rev() {
            let next = d[i + 1];
            d[i] = flush_c(d[i] - self.c_prime[i] * next);
        }
        // residual of the solve, relative to the right-hand side
        let mut res: f64 = 0.0;
        let mut scale: f64 = 0.0;
        for i in 0..n {
            let mut lx = self.l_diag[i] * d[i];
            if i + 1 < n {
                lx += self.l_up[i] * d[i + 1];
            }
            if i > 0 {
                lx += self.l_lo[i - 1] * d[i - 1];
            }
            res = res.max((lx - self.rhs[i]).norm_sqr());
            scale = scale.max(self.rhs[i].norm_sqr());
        }
        let rel = if scale > 0.0 { (res / scale).sqrt() } else { 0.0 };
        if !(rel <= self.tolerance) {
            return Err(Error::SolverDivergence(rel));
        }
        p.copy_from_slice(d);
        amp[0] = Complex64::new(0.0, 0.0);
        amp[n + 1] = Complex64::new(0.0, 0.0);
        Ok(())
    }
}

// Far tails would otherwise pass through the subnormal range, which is
// two orders of magnitude slower.
fn flush_c(z: Complex64) -> Complex64 {
    let f = |v: f64| if v.abs() < FLUSH_BELOW { 0.0 } else { v };
    Complex64::new(f(z.re), f(z.im))
}

/// Crank–Nicolson evolution over `T = n·dt`. No renormalization.
pub fn propagate_reference(
    psi0: &WaveFunction,
    potential: &Potential,
    t_total: f64,
    config: &ReferenceConfig,
) -> Result<WaveFunction> {
    let steps = steps_for(t_total, config.dt)?;
    if steps == 0 {
        return Ok(psi0.clone());
    }
    let mut cn = CrankNicolson::new(psi0.grid(), potential, psi0.mass(), psi0.hbar(), config)?;
    let mut amp = psi0.amp().to_vec();
    for _ in 0..steps {
        cn.step(&mut amp)?;
    }
    psi0.with_amp(amp)
}

/// Crank–Nicolson evolution calling `observe(step, amp)` after every step.
pub fn propagate_reference_observed(
    psi0: &WaveFunction,
    potential: &Potential,
    steps: usize,
    config: &ReferenceConfig,
    mut observe: impl FnMut(usize, &[Complex64]) -> Result<()>,
) -> Result<WaveFunction> {
    let mut cn = CrankNicolson::new(psi0.grid(), potential, psi0.mass(), psi0.hbar(), config)?;
    let mut amp = psi0.amp().to_vec();
    for n in 1..=steps {
        cn.step(&mut amp)?;
        observe(n, &amp)?;
    }
    psi0.with_amp(amp)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "case", rename_all = "snake_case", deny_unknown_fields)]
pub enum OracleCase {
    FreeGaussian {
        x0: f64,
        p0: f64,
        sigma: f64,
    },
    /// Minimum-uncertainty packet of width `√(ħ/2mω)` in `V = mω²x²/2`.
    HarmonicCoherent {
        x0: f64,
        p0: f64,
        omega: f64,
    },
}

impl OracleCase {
    /// Looks a case up by name, as used in configs.
    pub fn by_name(name: &str, x0: f64, p0: f64, width_or_omega: f64) -> Result<Self> {
        match name {
            "free_gaussian" => Ok(OracleCase::FreeGaussian {
                x0,
                p0,
                sigma: width_or_omega,
            }),
            "harmonic_coherent" => Ok(OracleCase::HarmonicCoherent {
                x0,
                p0,
                omega: width_or_omega,
            }),
            other => Err(Error::UnsupportedCase(other.to_string())),
        }
    }

    /// Closed-form `<x>(t)`.
    pub fn center(&self, mass: f64, t: f64) -> f64 {
        match *self {
            OracleCase::FreeGaussian { x0, p0, .. } => x0 + p0 * t / mass,
            OracleCase::HarmonicCoherent { x0, p0, omega } => {
                x0 * (omega * t).cos() + p0 / (mass * omega) * (omega * t).sin()
            }
        }
    }

    /// Closed-form `Var(x)(t)`.
    pub fn variance(&self, mass: f64, hbar: f64, t: f64) -> f64 {
        match *self {
            OracleCase::FreeGaussian { sigma, .. } => {
                let g = hbar * t / (2.0 * mass * sigma * sigma);
                sigma * sigma * (1.0 + g * g)
            }
            OracleCase::HarmonicCoherent { omega, .. } => hbar / (2.0 * mass * omega),
        }
    }

    pub fn potential(&self, mass: f64) -> Potential {
        match *self {
            OracleCase::FreeGaussian { .. } => Potential::Free,
            OracleCase::HarmonicCoherent { omega, .. } => Potential::harmonic(mass, omega),
        }
    }
}

/// Closed-form amplitudes on `grid` at time `t`. Phases follow
/// [`crate::grids::gaussian_packet`], so both agree at `t = 0`.
pub fn analytic_oracle(case: &OracleCase, grid: &SpaceGrid, mass: f64, hbar: f64, t: f64) -> Result<WaveFunction> {
    match *case {
        OracleCase::FreeGaussian { x0, p0, sigma } => {
            if !(sigma > 0.0) {
                return Err(Error::UnsupportedCase(format!("free_gaussian with sigma {sigma}")));
            }
            let st = Complex64::new(sigma * sigma, hbar * t / (2.0 * mass));
            let pref = (2.0 * PI).powf(-0.25) * sigma.sqrt() / st.sqrt();
            WaveFunction::from_fn(*grid, mass, hbar, |x| {
                let u = x - x0 - p0 * t / mass;
                let arg = -u * u / (4.0 * st) + Complex64::new(0.0, p0 * x / hbar - p0 * p0 * t / (2.0 * mass * hbar));
                pref * arg.exp()
            })
        }
        OracleCase::HarmonicCoherent { x0, p0, omega } => {
            if !(omega > 0.0) {
                return Err(Error::UnsupportedCase(format!("harmonic_coherent with omega {omega}")));
            }
            let s2 = hbar / (2.0 * mass * omega);
            let (c, s) = ((omega * t).cos(), (omega * t).sin());
            let xc = x0 * c + p0 / (mass * omega) * s;
            let pc = p0 * c - mass * omega * x0 * s;
            let phase0 = -0.5 * omega * t + (pc * xc + p0 * x0) / (2.0 * hbar);
            let pref = (2.0 * PI * s2).powf(-0.25);
            WaveFunction::from_fn(*grid, mass, hbar, |x| {
                let u = x - xc;
                Complex64::from_polar(pref * (-u * u / (4.0 * s2)).exp(), pc * u / hbar + phase0)
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grids::{diagnostics, gaussian_packet};

    #[test]
    fn free_width_after_two() {
        let g = SpaceGrid::new(-16.0, 16.0, 1024).unwrap();
        let psi = gaussian_packet(&g, 0.0, 0.0, 1.0, 1.0, 1.0).unwrap();
        let out = propagate_reference(&psi, &Potential::Free, 2.0, &ReferenceConfig::new(1e-3)).unwrap();
        let w = diagnostics(&out, &Potential::Free).var_x.sqrt();
        assert!((w - 2f64.sqrt()).abs() < 1e-4, "{w}");
        let exact = analytic_oracle(
            &OracleCase::FreeGaussian {
                x0: 0.0,
                p0: 0.0,
                sigma: 1.0,
            },
            &g,
            1.0,
            1.0,
            2.0,
        )
        .unwrap();
        assert!(out.l2_distance(&exact) < 1e-6);
    }

    #[test]
    fn ground_state_stationary() {
        let g = SpaceGrid::new(-10.0, 10.0, 1024).unwrap();
        let pot = Potential::harmonic(1.0, 1.0);
        let psi = gaussian_packet(&g, 0.0, 0.0, 0.5f64.sqrt(), 1.0, 1.0).unwrap();
        let out = propagate_reference(&psi, &pot, 3.7, &ReferenceConfig::new(1e-2)).unwrap();
        let dev = out
            .amp()
            .iter()
            .zip(psi.amp())
            .map(|(a, b)| (a.norm() - b.norm()).abs())
            .fold(0.0, f64::max);
        assert!(dev < 1e-8, "{dev}");
    }

    #[test]
    fn norm_after_many_steps() {
        let g = SpaceGrid::new(-12.0, 12.0, 256).unwrap();
        let pot = Potential::harmonic(1.0, 1.0);
        let psi = gaussian_packet(&g, 1.0, 0.5, 0.9, 1.0, 1.0).unwrap();
        let out = propagate_reference(&psi, &pot, 100.0, &ReferenceConfig::new(1e-2)).unwrap();
        assert!((out.norm() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn per_step_norm() {
        let g = SpaceGrid::new(-12.0, 12.0, 256).unwrap();
        let pot = Potential::harmonic(1.0, 1.3);
        let psi = gaussian_packet(&g, 1.5, 0.0, 0.7, 1.0, 1.0).unwrap();
        let mut prev = psi.norm();
        propagate_reference_observed(&psi, &pot, 50, &ReferenceConfig::new(0.02), |_, amp| {
            let n = (amp.iter().map(|a| a.norm_sqr()).sum::<f64>() * g.dx()).sqrt();
            assert!((n - prev).abs() < 1e-10);
            prev = n;
            Ok(())
        })
        .unwrap();
    }

    #[test]
    fn three_point_matches_less_well() {
        let g = SpaceGrid::new(-16.0, 16.0, 512).unwrap();
        let case = OracleCase::FreeGaussian {
            x0: 0.0,
            p0: 1.0,
            sigma: 1.0,
        };
        let psi = analytic_oracle(&case, &g, 1.0, 1.0, 0.0).unwrap();
        let exact = analytic_oracle(&case, &g, 1.0, 1.0, 1.0).unwrap();
        let cfg = ReferenceConfig::new(1e-3);
        let e4 = propagate_reference(&psi, &Potential::Free, 1.0, &cfg)
            .unwrap()
            .l2_distance(&exact);
        let e2 = propagate_reference(&psi, &Potential::Free, 1.0, &cfg.with_stencil(Stencil::ThreePoint))
            .unwrap()
            .l2_distance(&exact);
        assert!(e4 < e2 / 10.0, "{e4} {e2}");
    }

    #[test]
    fn oracle_at_zero_matches_packet() {
        let g = SpaceGrid::new(-20.0, 20.0, 1024).unwrap();
        let a = analytic_oracle(
            &OracleCase::FreeGaussian {
                x0: 0.0,
                p0: 0.0,
                sigma: 1.0,
            },
            &g,
            1.0,
            1.0,
            0.0,
        )
        .unwrap();
        let b = gaussian_packet(&g, 0.0, 0.0, 1.0, 1.0, 1.0).unwrap();
        assert!(a.l2_distance(&b) < 1e-12);
        let c = analytic_oracle(
            &OracleCase::HarmonicCoherent {
                x0: 1.0,
                p0: 0.4,
                omega: 2.0,
            },
            &g,
            1.0,
            1.0,
            0.0,
        )
        .unwrap();
        let d = gaussian_packet(&g, 1.0, 0.4, 0.5, 1.0, 1.0).unwrap();
        assert!(c.l2_distance(&d) < 1e-12);
    }

    #[test]
    fn oracle_closed_forms() {
        let h = OracleCase::HarmonicCoherent {
            x0: 1.0,
            p0: 0.0,
            omega: 1.0,
        };
        assert_eq!(h.center(1.0, PI), -1.0);
        let f = OracleCase::FreeGaussian {
            x0: 0.0,
            p0: 0.0,
            sigma: 1.0,
        };
        assert_eq!(f.variance(1.0, 1.0, 2.0), 2.0);
        assert!(matches!(
            OracleCase::by_name("square_well", 0.0, 0.0, 1.0),
            Err(Error::UnsupportedCase(_))
        ));
    }

    #[test]
    fn coherent_oracle_solves_schrodinger() {
        let g = SpaceGrid::new(-10.0, 10.0, 1024).unwrap();
        let case = OracleCase::HarmonicCoherent {
            x0: 1.0,
            p0: -0.5,
            omega: 1.0,
        };
        let psi = analytic_oracle(&case, &g, 1.0, 1.0, 0.0).unwrap();
        let out = propagate_reference(&psi, &case.potential(1.0), 2.0, &ReferenceConfig::new(2e-3)).unwrap();
        let exact = analytic_oracle(&case, &g, 1.0, 1.0, 2.0).unwrap();
        assert!(out.l2_distance(&exact) < 1e-5, "{}", out.l2_distance(&exact));
        let d = diagnostics(&exact, &case.potential(1.0));
        assert!((d.mean_x - case.center(1.0, 2.0)).abs() < 1e-10);
    }
}
