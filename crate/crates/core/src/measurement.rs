//! Pointer detector with linear coupling.
//!
//! With object eigenstates `|a⟩` frozen, branch `a` of the pointer evolves
//! under `H_a = P²/(2Nμ) - g N λ_a X` once the coupling is switched on at
//! `t_s`, and freely before. Branch `a` picks up the object phase
//! `e^{-iω_a t}`. The signal is `J(X) = Σ |c_a|² |Ψ_a(X)|²` because the
//! object states are orthogonal.

use std::f64::consts::PI;
use std::io::Write;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grids::{gaussian_packet, steps_for, Potential, SpaceGrid, WaveFunction};
use crate::macrovariable::{JointWaveFunction, SignalFunction, COHERENCE_SEPARATION};
use crate::schrodinger_ref::{CrankNicolson, ReferenceConfig};

/// Half-width, in `d_N`, of the window integrated around each peak.
pub const PEAK_WINDOW: f64 = 5.0;
/// Pointer grid margin beyond the outermost branch, in `d_N(T)`.
const GRID_MARGIN: f64 = 12.0;
/// Pointer grid spacing bounds: `d_N(0)/24`, and `0.1/k` at the fastest carrier.
const WIDTH_RESOLUTION: f64 = 24.0;
const PHASE_PER_CELL: f64 = 0.1;
const MAX_PHASE_PER_CELL: f64 = 0.5;

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectorModel {
    pub mu: f64,
    pub n: u64,
    /// Force per unit eigenvalue and per microdegree.
    pub coupling: f64,
    pub eigenvalues: Vec<f64>,
    /// `[re, im]` pairs.
    pub amplitudes: Vec<Complex64>,
    /// `ω_a`; empty means all zero.
    #[serde(default)]
    pub omega: Vec<f64>,
    pub t_s: f64,
    pub x0: f64,
    /// Initial pointer width `d_N(0)`.
    pub sigma0: f64,
    #[serde(default = "one")]
    pub hbar: f64,
}

impl DetectorModel {
    /// Two-branch detector with real amplitudes `√w`, `√(1-w)`.
    pub fn two_branch(weight0: f64) -> Self {
        Self {
            mu: 1.0,
            n: 100,
            coupling: 1.0,
            eigenvalues: vec![-1.0, 1.0],
            amplitudes: vec![
                Complex64::new(weight0.sqrt(), 0.0),
                Complex64::new((1.0 - weight0).sqrt(), 0.0),
            ],
            omega: vec![],
            t_s: 0.25,
            x0: 0.0,
            sigma0: 0.1,
            hbar: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let nb = self.eigenvalues.len();
        if nb == 0 || self.amplitudes.len() != nb {
            return Err(Error::InvalidParameter(format!(
                "{} eigenvalues but {} amplitudes",
                nb,
                self.amplitudes.len()
            )));
        }
        if !self.omega.is_empty() && self.omega.len() != nb {
            return Err(Error::InvalidParameter(
                "omega must be empty or one per eigenvalue".into(),
            ));
        }
        let total: f64 = self.amplitudes.iter().map(|c| c.norm_sqr()).sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidParameter(format!("sum |c_a|^2 = {total}, not 1")));
        }
        for i in 0..nb {
            for j in 0..i {
                if self.eigenvalues[i] == self.eigenvalues[j] {
                    return Err(Error::InvalidParameter(format!(
                        "degenerate eigenvalue {}",
                        self.eigenvalues[i]
                    )));
                }
            }
        }
        if self.n < 1 || !(self.mu > 0.0) || !(self.sigma0 > 0.0) || !(self.hbar > 0.0) || self.t_s < 0.0 {
            return Err(Error::InvalidParameter(
                "N >= 1, mu, sigma0, hbar > 0 and t_s >= 0 required".into(),
            ));
        }
        Ok(())
    }

    pub fn branch_count(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn mass(&self) -> f64 {
        self.n as f64 * self.mu
    }

    pub fn weights(&self) -> Vec<f64> {
        self.amplitudes.iter().map(|c| c.norm_sqr()).collect()
    }

    pub fn omega(&self, a: usize) -> f64 {
        self.omega.get(a).copied().unwrap_or(0.0)
    }

    /// Pointer width, identical for every branch (a uniform force does not
    /// change the spreading).
    pub fn d_n(&self, t: f64) -> f64 {
        let tau = 2.0 * self.mass() * self.sigma0 * self.sigma0 / self.hbar;
        self.sigma0 * (1.0 + (t / tau).powi(2)).sqrt()
    }

    /// `X_a(t) = X⁰ + g λ_a (t - t_s)²/(2μ)` after switch-on.
    pub fn trajectory(&self, a: usize, t: f64) -> f64 {
        let u = (t - self.t_s).max(0.0);
        self.x0 + self.coupling * self.eigenvalues[a] * u * u / (2.0 * self.mu)
    }

    pub fn velocity(&self, a: usize, t: f64) -> f64 {
        self.coupling * self.eigenvalues[a] * (t - self.t_s).max(0.0) / self.mu
    }

    /// Pointer potential of branch `a` after switch-on: force `g N λ_a`.
    pub fn branch_potential(&self, a: usize) -> Potential {
        Potential::linear(self.coupling * self.n as f64 * self.eigenvalues[a])
    }

    /// Branch indices in ascending `λ`.
    pub fn order(&self) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.branch_count()).collect();
        idx.sort_by(|&a, &b| self.eigenvalues[a].total_cmp(&self.eigenvalues[b]));
        idx
    }

    /// Grid covering every branch up to `t_end`, resolving both the packet
    /// width and the fastest carrier wavelength.
    pub fn pointer_grid(&self, t_end: f64) -> Result<SpaceGrid> {
        let ends: Vec<f64> = (0..self.branch_count())
            .map(|a| self.trajectory(a, t_end))
            .chain([self.x0])
            .collect();
        let lo = ends.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = ends.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        // the extra 6% keeps the boundary check band clear of the packets
        let margin = GRID_MARGIN * self.d_n(t_end) + 0.06 * (hi - lo);
        let (lo, hi) = (lo - margin, hi + margin);
        let vmax = (0..self.branch_count())
            .map(|a| self.velocity(a, t_end).abs())
            .fold(0.0, f64::max);
        let mut dx = self.sigma0 / WIDTH_RESOLUTION;
        if vmax > 0.0 {
            dx = dx.min(PHASE_PER_CELL * self.hbar / (self.mass() * vmax));
        }
        SpaceGrid::with_spacing(lo, hi, dx)
    }

    /// Discrete box eigenstate `φ_a` of the object on `grid`.
    pub fn object_state(&self, a: usize, grid: &SpaceGrid) -> Result<WaveFunction> {
        let l = grid.length();
        WaveFunction::from_fn(*grid, 1.0, self.hbar, |x| {
            Complex64::new(
                (2.0 / l).sqrt() * (PI * (a + 1) as f64 * (x - grid.x_min()) / l).sin(),
                0.0,
            )
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TrackPoint {
    pub t: f64,
    pub x_classical: f64,
    pub mean_x: f64,
    pub norm_sq: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Branch {
    pub index: usize,
    pub lambda: f64,
    pub c: Complex64,
    pub omega: f64,
    /// Pointer state at the end of the run (normalized up to solver drift).
    pub psi: WaveFunction,
    pub track: Vec<TrackPoint>,
}

impl Branch {
    pub fn phase(&self, t: f64) -> Complex64 {
        Complex64::from_polar(1.0, -self.omega * t)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BranchSet {
    pub detector: DetectorModel,
    pub grid: SpaceGrid,
    pub t_end: f64,
    pub dt: f64,
    /// Same order as the detector's eigenvalue list.
    pub branches: Vec<Branch>,
    /// Largest `|<X>_a - X_a(t)|` over all steps and branches.
    pub max_tracking_error: f64,
    /// Largest change of an object population `|c_a|² ‖Ψ_a‖²`.
    pub freezing_drift: f64,
}

impl BranchSet {
    /// Signal function at the end of the run.
    pub fn signal(&self) -> SignalFunction {
        signal_from_branches(
            &self.grid,
            &self.detector.weights(),
            &self.branches.iter().map(|b| b.psi.amp()).collect::<Vec<_>>(),
        )
    }

    /// `|<Ψ_a|Ψ_b>|` of the pointer states at the end of the run.
    pub fn overlap(&self, a: usize, b: usize) -> f64 {
        self.branches[a].psi.inner(&self.branches[b].psi).norm()
    }

    pub fn max_overlap(&self) -> f64 {
        let n = self.branches.len();
        let mut worst: f64 = 0.0;
        for a in 0..n {
            for b in 0..a {
                worst = worst.max(self.overlap(a, b));
            }
        }
        worst
    }

    pub fn peak_positions(&self) -> Vec<f64> {
        (0..self.branches.len())
            .map(|a| self.detector.trajectory(a, self.t_end))
            .collect()
    }

    /// The coherent total `Σ c_a e^{-iω_a t} φ_a ⊗ Ψ_a` on an object grid.
    pub fn joint(&self, object_grid: &SpaceGrid) -> Result<JointWaveFunction> {
        let phis: Vec<WaveFunction> = (0..self.branches.len())
            .map(|a| self.detector.object_state(a, object_grid))
            .collect::<Result<_>>()?;
        let terms: Vec<(Complex64, &WaveFunction, &WaveFunction)> = self
            .branches
            .iter()
            .zip(&phis)
            .map(|(b, phi)| (b.c * b.phase(self.t_end), phi, &b.psi))
            .collect();
        JointWaveFunction::superpose(&terms)
    }

    pub fn write_tracks_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "t,branch,lambda,x_classical,mean_x,norm_sq")?;
        for b in &self.branches {
            for p in &b.track {
                writeln!(
                    w,
                    "{:.16e},{},{:.16e},{:.16e},{:.16e},{:.16e}",
                    p.t, b.index, b.lambda, p.x_classical, p.mean_x, p.norm_sq
                )?;
            }
        }
        Ok(())
    }
}

pub(crate) fn signal_from_branches(grid: &SpaceGrid, weights: &[f64], amps: &[&[Complex64]]) -> SignalFunction {
    let mut j = vec![0.0; grid.len()];
    for (w, amp) in weights.iter().zip(amps) {
        j.iter_mut().zip(amp.iter()).for_each(|(jk, a)| *jk += w * a.norm_sqr());
    }
    SignalFunction {
        x_min: grid.x_min(),
        dx: grid.dx(),
        j,
    }
}

fn moments(grid: &SpaceGrid, amp: &[Complex64]) -> (f64, f64) {
    let (mut m0, mut m1) = (0.0, 0.0);
    for (k, a) in amp.iter().enumerate() {
        let w = a.norm_sqr();
        m0 += w;
        m1 += w * grid.x(k);
    }
    (m0 * grid.dx(), m1 / m0)
}

/// Evolves every branch from `t = 0` to `T` on the detector's pointer grid.
pub fn branch_evolve(det: &DetectorModel, t_end: f64, dt: f64) -> Result<BranchSet> {
    branch_evolve_observed(det, t_end, dt, None, |_, _, _| Ok(()))
}

/// As [`branch_evolve`], on `grid` if given, calling
/// `observe(step, t, amplitudes)` at step 0 and after every step.
pub fn branch_evolve_observed(
    det: &DetectorModel,
    t_end: f64,
    dt: f64,
    grid: Option<SpaceGrid>,
    mut observe: impl FnMut(usize, f64, &[Vec<Complex64>]) -> Result<()>,
) -> Result<BranchSet> {
    det.validate()?;
    if !(t_end > 0.0) {
        return Err(Error::InvalidParameter(format!("T = {t_end}")));
    }
    let steps = steps_for(t_end, dt)?;
    let pre_steps = steps_for(det.t_s, dt)?;
    let grid = match grid {
        Some(g) => g,
        None => det.pointer_grid(t_end)?,
    };
    if det.sigma0 < 3.0 * grid.dx() {
        return Err(Error::UnresolvedPacket(format!(
            "d_N = {} below 3 dx = {}",
            det.sigma0,
            3.0 * grid.dx()
        )));
    }
    let vmax = (0..det.branch_count())
        .map(|a| det.velocity(a, t_end).abs())
        .fold(0.0, f64::max);
    if det.mass() * vmax / det.hbar * grid.dx() > MAX_PHASE_PER_CELL {
        return Err(Error::UnresolvedPacket(format!(
            "carrier phase {} per cell at the final velocity",
            det.mass() * vmax / det.hbar * grid.dx()
        )));
    }
    for a in 0..det.branch_count() {
        let xa = det.trajectory(a, t_end);
        let reach = PEAK_WINDOW * det.d_n(t_end);
        if xa - reach < grid.x_min() || xa + reach > grid.x_max() {
            let t = bisect_exit(det, a, &grid, t_end, reach);
            return Err(Error::BranchLeftGrid { branch: a, t });
        }
    }

    let mass = det.mass();
    let psi0 = gaussian_packet(&grid, det.x0, 0.0, det.sigma0, mass, det.hbar)?;
    let cfg = ReferenceConfig::new(dt);
    let mut free = CrankNicolson::new(&grid, &Potential::Free, mass, det.hbar, &cfg)?;
    let mut coupled: Vec<CrankNicolson> = (0..det.branch_count())
        .map(|a| CrankNicolson::new(&grid, &det.branch_potential(a), mass, det.hbar, &cfg))
        .collect::<Result<_>>()?;
    let weights = det.weights();
    let mut amps: Vec<Vec<Complex64>> = vec![psi0.amp().to_vec(); det.branch_count()];
    let mut tracks: Vec<Vec<TrackPoint>> = vec![Vec::with_capacity(steps + 1); det.branch_count()];
    let mut max_tracking_error: f64 = 0.0;
    let mut freezing_drift: f64 = 0.0;
    let mut record = |t: f64, amps: &[Vec<Complex64>], tracks: &mut Vec<Vec<TrackPoint>>| {
        for (a, amp) in amps.iter().enumerate() {
            let (n2, mx) = moments(&grid, amp);
            let xc = det.trajectory(a, t);
            max_tracking_error = max_tracking_error.max((mx - xc).abs());
            freezing_drift = freezing_drift.max((weights[a] * n2 - weights[a]).abs());
            tracks[a].push(TrackPoint {
                t,
                x_classical: xc,
                mean_x: mx,
                norm_sq: n2,
            });
        }
    };
    record(0.0, &amps, &mut tracks);
    observe(0, 0.0, &amps)?;
    for step in 1..=steps {
        if step <= pre_steps {
            // identical free evolution for every branch before switch-on
            free.step(&mut amps[0])?;
            let first = amps[0].clone();
            for amp in amps.iter_mut().skip(1) {
                amp.copy_from_slice(&first);
            }
        } else {
            for (amp, cn) in amps.iter_mut().zip(coupled.iter_mut()) {
                cn.step(amp)?;
            }
        }
        let t = step as f64 * dt;
        record(t, &amps, &mut tracks);
        observe(step, t, &amps)?;
    }
    let branches: Vec<Branch> = amps
        .into_iter()
        .zip(tracks)
        .enumerate()
        .map(|(a, (amp, track))| {
            let psi = psi0.with_amp(amp)?;
            psi.check_boundary()?;
            Ok(Branch {
                index: a,
                lambda: det.eigenvalues[a],
                c: det.amplitudes[a],
                omega: det.omega(a),
                psi,
                track,
            })
        })
        .collect::<Result<_>>()?;
    Ok(BranchSet {
        detector: det.clone(),
        grid,
        t_end,
        dt,
        branches,
        max_tracking_error,
        freezing_drift,
    })
}

fn bisect_exit(det: &DetectorModel, a: usize, grid: &SpaceGrid, t_end: f64, reach: f64) -> f64 {
    let outside = |t: f64| {
        let x = det.trajectory(a, t);
        x - reach < grid.x_min() || x + reach > grid.x_max()
    };
    let (mut lo, mut hi) = (det.t_s, t_end);
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        if outside(mid) {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    hi
}

/// Integrated weight of `J` within `±PEAK_WINDOW·d_N` of each branch peak at `t`.
pub fn peak_weights(j: &SignalFunction, det: &DetectorModel, t: f64, d_n: f64) -> Result<Vec<f64>> {
    let nb = det.branch_count();
    let pos: Vec<f64> = (0..nb).map(|a| det.trajectory(a, t)).collect();
    let threshold = COHERENCE_SEPARATION * d_n;
    for a in 0..nb {
        for b in 0..a {
            let separation = (pos[a] - pos[b]).abs();
            if separation <= threshold {
                return Err(Error::BranchesNotSeparated { separation, threshold });
            }
        }
    }
    Ok(pos.iter().map(|&x| j.window_mass(x, PEAK_WINDOW * d_n)).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PairSeparation {
    pub a: usize,
    pub b: usize,
    /// Absolute time at which the pair separates.
    pub t: f64,
}

/// Smallest `t ≥ t_s` with `g|λ_a-λ_b|(t-t_s)²/(2μ) > m·d_N(t)` for a pair.
pub fn pair_separation_time(det: &DetectorModel, a: usize, b: usize, threshold_multiple: f64) -> Result<f64> {
    let accel = det.coupling * (det.eigenvalues[a] - det.eigenvalues[b]).abs() / (2.0 * det.mu);
    if threshold_multiple <= 0.0 {
        return Ok(det.t_s);
    }
    if !(accel > 0.0) {
        return Err(Error::NeverSeparates(f64::INFINITY));
    }
    let gap = |t: f64| accel * (t - det.t_s).powi(2) - threshold_multiple * det.d_n(t);
    let budget = det.t_s + 1e6;
    let mut hi = det.t_s + 1.0;
    while gap(hi) <= 0.0 {
        hi = det.t_s + 2.0 * (hi - det.t_s);
        if hi > budget {
            return Err(Error::NeverSeparates(budget));
        }
    }
    let mut lo = det.t_s;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if gap(mid) > 0.0 {
            hi = mid;
        } else {
            lo = mid;
        }
        if hi - lo <= 1e-15 * hi.abs().max(1.0) {
            break;
        }
    }
    Ok(hi)
}

/// Separation times for every pair of branches.
pub fn separation_time(det: &DetectorModel, threshold_multiple: f64) -> Result<Vec<PairSeparation>> {
    det.validate()?;
    let nb = det.branch_count();
    let mut out = Vec::new();
    for a in 0..nb {
        for b in a + 1..nb {
            out.push(PairSeparation {
                a,
                b,
                t: pair_separation_time(det, a, b, threshold_multiple)?,
            });
        }
    }
    Ok(out)
}

/// Time by which every pair is separated: the end of the branching region.
pub fn full_separation_time(det: &DetectorModel, threshold_multiple: f64) -> Result<f64> {
    Ok(separation_time(det, threshold_multiple)?
        .iter()
        .map(|p| p.t)
        .fold(det.t_s, f64::max))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(weight0: f64) -> DetectorModel {
        DetectorModel {
            n: 20,
            sigma0: 0.2,
            t_s: 0.0,
            ..DetectorModel::two_branch(weight0)
        }
    }

    #[test]
    fn zero_coupling_freezes_pointer() {
        let det = DetectorModel {
            coupling: 0.0,
            ..small(0.3)
        };
        let set = branch_evolve(&det, 0.5, 0.01).unwrap();
        for a in 0..2 {
            assert_eq!(det.trajectory(a, 0.5), det.x0);
        }
        assert!(set.overlap(0, 1) > 1.0 - 1e-12);
    }

    #[test]
    fn opposite_branches_uniform_acceleration() {
        let det = DetectorModel {
            eigenvalues: vec![1.0, -1.0],
            ..small(0.5)
        };
        assert!((det.trajectory(0, 1.0) - 0.5).abs() < 1e-8);
        assert!((det.trajectory(1, 1.0) + 0.5).abs() < 1e-8);
        let set = branch_evolve(&det, 1.0, 4e-4).unwrap();
        assert!(set.max_tracking_error < 1e-6, "{}", set.max_tracking_error);
        assert!(set.freezing_drift < 1e-10);
    }

    #[test]
    fn omega_phases_cancel_in_signal() {
        let base = small(0.4);
        let spun = DetectorModel {
            omega: vec![3.7, -11.2],
            ..base.clone()
        };
        let obj = SpaceGrid::new(0.0, 1.0, 16).unwrap();
        let a = branch_evolve(&base, 0.6, 0.01).unwrap();
        let b = branch_evolve(&spun, 0.6, 0.01).unwrap();
        let ja = crate::macrovariable::signal_function(&a.joint(&obj).unwrap());
        let jb = crate::macrovariable::signal_function(&b.joint(&obj).unwrap());
        let direct = a.signal();
        for ((x, y), z) in ja.j.iter().zip(&jb.j).zip(&direct.j) {
            assert!((x - y).abs() < 1e-12);
            assert!((x - z).abs() < 1e-10);
        }
    }

    #[test]
    fn object_states_orthonormal() {
        let det = small(0.5);
        let g = SpaceGrid::new(0.0, 1.0, 16).unwrap();
        let p0 = det.object_state(0, &g).unwrap();
        let p1 = det.object_state(1, &g).unwrap();
        assert!((p0.norm_sq() - 1.0).abs() < 1e-12);
        assert!(p0.inner(&p1).norm() < 1e-12);
    }

    #[test]
    fn separation_time_closed_form() {
        let det = DetectorModel {
            n: 100_000_000,
            t_s: 0.0,
            ..DetectorModel::two_branch(0.5)
        };
        let t = pair_separation_time(&det, 0, 1, 5.0).unwrap();
        assert!((t - 0.5f64.sqrt()).abs() < 1e-3, "{t}");
        assert_eq!(pair_separation_time(&det, 0, 1, 0.0).unwrap(), 0.0);
        let strong = DetectorModel {
            coupling: 2.0,
            ..det.clone()
        };
        let t2 = pair_separation_time(&strong, 0, 1, 5.0).unwrap();
        assert!((t / t2 - 2f64.sqrt()).abs() < 1e-3);
        let never = DetectorModel { coupling: 1e-20, ..det };
        assert!(matches!(
            pair_separation_time(&never, 0, 1, 5.0),
            Err(Error::NeverSeparates(_))
        ));
    }

    #[test]
    fn weights_refused_inside_branching_region() {
        let det = small(0.3);
        let set = branch_evolve(&det, 0.2, 0.01).unwrap();
        let r = peak_weights(&set.signal(), &det, 0.2, det.d_n(0.2));
        assert!(matches!(r, Err(Error::BranchesNotSeparated { .. })));
    }

    #[test]
    fn single_and_uniform_weights() {
        let single = DetectorModel {
            amplitudes: vec![Complex64::new(1.0, 0.0), Complex64::new(0.0, 0.0)],
            ..small(1.0)
        };
        let t = full_separation_time(&single, COHERENCE_SEPARATION).unwrap() + 0.2;
        let t = (t / 0.01).ceil() * 0.01;
        let set = branch_evolve(&single, t, 0.01).unwrap();
        let w = peak_weights(&set.signal(), &single, t, single.d_n(t)).unwrap();
        assert!((w[0] - 1.0).abs() < 1e-6 && w[1].abs() < 1e-6, "{w:?}");

        let c = Complex64::new(0.5, 0.0);
        let four = DetectorModel {
            eigenvalues: vec![-3.0, -1.0, 1.0, 3.0],
            amplitudes: vec![c, c * Complex64::i(), -c, c],
            ..small(0.5)
        };
        let t = full_separation_time(&four, COHERENCE_SEPARATION).unwrap() + 0.1;
        let t = (t / 0.01).ceil() * 0.01;
        let set = branch_evolve(&four, t, 0.01).unwrap();
        for w in peak_weights(&set.signal(), &four, t, four.d_n(t)).unwrap() {
            assert!((w - 0.25).abs() < 1e-3);
        }
    }

    #[test]
    fn rescaled_amplitudes_give_same_weights() {
        let det = small(0.3);
        let t = full_separation_time(&det, COHERENCE_SEPARATION).unwrap();
        let t = (t / 0.01).ceil() * 0.01;
        let set = branch_evolve(&det, t, 0.01).unwrap();
        let w1 = peak_weights(&set.signal(), &det, t, det.d_n(t)).unwrap();
        // common rescaling of c, then renormalization
        let scaled: Vec<Complex64> = det.amplitudes.iter().map(|c| c * Complex64::new(0.0, 7.0)).collect();
        let norm: f64 = scaled.iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt();
        let det2 = DetectorModel {
            amplitudes: scaled.iter().map(|c| c / norm).collect(),
            ..det.clone()
        };
        let set2 = branch_evolve(&det2, t, 0.01).unwrap();
        let w2 = peak_weights(&set2.signal(), &det2, t, det2.d_n(t)).unwrap();
        for (a, b) in w1.iter().zip(&w2) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn grid_exit_reported() {
        let det = small(0.5);
        let g = SpaceGrid::with_spacing(-1.5, 1.5, 0.005).unwrap();
        let r = branch_evolve_observed(&det, 2.0, 0.01, Some(g), |_, _, _| Ok(()));
        assert!(matches!(r, Err(Error::BranchLeftGrid { .. })), "{r:?}");
    }

    #[test]
    fn invalid_amplitudes_rejected() {
        let det = DetectorModel {
            amplitudes: vec![Complex64::new(0.5, 0.0), Complex64::new(0.5, 0.0)],
            ..small(0.5)
        };
        assert!(det.validate().is_err());
    }
}
