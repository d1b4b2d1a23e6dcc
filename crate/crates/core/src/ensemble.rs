//! Ensemble of pointer sample points driven by the signal flow.
//!
//! Each sample follows `dQ = (v + ε²/2 ∂_X ln J) dt + ε dW`, where `v` is the
//! current velocity of the pointer marginal and `J` its density. The drift
//! keeps `J` equivariant for every `ε`, and `ε = 0` is the deterministic flow.
//! The fields are tabulated on a coarse grid at a sequence of frames taken
//! from the reference evolution of the branches.

use std::collections::BTreeSet;
use std::io::Write;

use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::grids::WaveFunction;
use crate::macrovariable::COHERENCE_SEPARATION;
use crate::measurement::{branch_evolve_observed, full_separation_time, BranchSet, DetectorModel};
use crate::rng;
use crate::stats::{binomial_stderr, kde, ks_band_99, ks_distance, mean_std};

/// Half-width, in `d_N`, of the window used to label a sample.
pub const LABEL_WINDOW: f64 = 5.0;
/// Density below this fraction of its maximum counts as a node.
pub const NODE_DENSITY: f64 = 1e-24;
/// Default noise `ε = 3 d_N(0) / √(t_B+ - t_B-)`.
pub const DEFAULT_NOISE_MULTIPLE: f64 = 3.0;
/// Coarse grid spacing is `d_N(0)` over this.
pub const COARSE_PER_WIDTH: f64 = 16.0;
/// Largest displacement per frame, in coarse cells.
pub const MAX_CELLS_PER_STEP: f64 = 4.0;
/// Kernel bandwidth is `d_N(t)` over this.
pub const KDE_PER_WIDTH: f64 = 4.0;
/// Groups smaller than this are flagged unreliable.
pub const MIN_GROUP: usize = 30;
/// Run length in units of the branching duration `t_B+ - t_s`.
pub const RUN_LENGTH_MULTIPLE: f64 = 3.0;

/// `(v, ∂ ln|ψ|²)` at node `i` from phase and log-modulus differences.
/// Exact for a Gaussian times a chirp.
fn nodal_fields(amp: &[Complex64], i: usize, dx: f64) -> Option<(f64, f64)> {
    let (a, b, c) = (amp[i - 1], amp[i], amp[i + 1]);
    let (ra, rb, rc) = (a.norm_sqr(), b.norm_sqr(), c.norm_sqr());
    if !(ra > f64::MIN_POSITIVE && rb > f64::MIN_POSITIVE && rc > f64::MIN_POSITIVE) {
        return None;
    }
    let phase = ((a.conj() * b).arg() + (b.conj() * c).arg()) / (2.0 * dx);
    let dlog = (rc.ln() - ra.ln()) / (2.0 * dx);
    Some((phase, dlog))
}

fn label_in(peaks: &[f64], half: f64, q: f64) -> (Option<usize>, bool) {
    let mut hits = (0..peaks.len()).filter(|&a| (q - peaks[a]).abs() <= half);
    let first = hits.next();
    (first, hits.next().is_some())
}

/// Cubic Lagrange stencil `(first node, weights)` for `q` on `n` nodes.
fn stencil(x_min: f64, dx: f64, n: usize, q: f64) -> Option<(usize, [f64; 4])> {
    let u = (q - x_min) / dx;
    if !(u >= 0.0 && u <= (n - 1) as f64) {
        return None;
    }
    let k = (u.floor() as usize).clamp(1, n - 3);
    let s = u - k as f64;
    let w = [
        -s * (s - 1.0) * (s - 2.0) / 6.0,
        (s + 1.0) * (s - 1.0) * (s - 2.0) / 2.0,
        -(s + 1.0) * s * (s - 2.0) / 2.0,
        (s + 1.0) * s * (s - 1.0) / 6.0,
    ];
    Some((k - 1, w))
}

fn apply(w: &[f64; 4], v: &[f64], first: usize) -> f64 {
    w[0] * v[first] + w[1] * v[first + 1] + w[2] * v[first + 2] + w[3] * v[first + 3]
}

/// Guidance velocity `(ħ/m) Im(∂ψ/ψ)` at `q`.
pub fn guidance_velocity(psi: &WaveFunction, q: f64) -> Result<f64> {
    let g = psi.grid();
    let amp = psi.amp();
    let n = g.len();
    let (first, w) = stencil(g.x_min(), g.dx(), n, q).ok_or(Error::NodeEncountered { q })?;
    let max = amp.iter().map(|a| a.norm_sqr()).fold(0.0, f64::max);
    let dens: Vec<f64> = (first..first + 4).map(|i| amp[i].norm_sqr()).collect();
    let rho = w[0] * dens[0] + w[1] * dens[1] + w[2] * dens[2] + w[3] * dens[3];
    if !(rho > NODE_DENSITY * max) {
        return Err(Error::NodeEncountered { q });
    }
    let mut vel = [0.0; 4];
    for (slot, i) in vel.iter_mut().zip(first..first + 4) {
        if i == 0 || i + 1 >= n {
            return Err(Error::NodeEncountered { q });
        }
        *slot = nodal_fields(amp, i, g.dx()).ok_or(Error::NodeEncountered { q })?.0;
    }
    Ok(psi.hbar() / psi.mass() * apply(&w, &vel, 0))
}

/// Piecewise-linear density with its exact CDF.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityTable {
    pub x_min: f64,
    pub dx: f64,
    pub rho: Vec<f64>,
    cum: Vec<f64>,
}

impl DensityTable {
    pub fn new(x_min: f64, dx: f64, density: &[f64]) -> Self {
        let rho: Vec<f64> = density.iter().map(|r| r.max(0.0)).collect();
        let mut cum = Vec::with_capacity(rho.len());
        let mut acc = 0.0;
        cum.push(0.0);
        for k in 1..rho.len() {
            acc += 0.5 * dx * (rho[k - 1] + rho[k]);
            cum.push(acc);
        }
        Self { x_min, dx, rho, cum }
    }

    pub fn total(&self) -> f64 {
        *self.cum.last().unwrap_or(&0.0)
    }

    pub fn cdf(&self, q: f64) -> f64 {
        let n = self.rho.len();
        let u = (q - self.x_min) / self.dx;
        if u <= 0.0 {
            return 0.0;
        }
        if u >= (n - 1) as f64 {
            return 1.0;
        }
        let k = u.floor() as usize;
        let s = (u - k as f64) * self.dx;
        let slope = (self.rho[k + 1] - self.rho[k]) / self.dx;
        (self.cum[k] + self.rho[k] * s + 0.5 * slope * s * s) / self.total()
    }

    /// Inverse of [`DensityTable::cdf`].
    pub fn quantile(&self, p: f64) -> f64 {
        let target = p.clamp(0.0, 1.0) * self.total();
        let n = self.rho.len();
        let k = (self.cum.partition_point(|&c| c <= target)).clamp(1, n - 1) - 1;
        let r = target - self.cum[k];
        let (r0, slope) = (self.rho[k], (self.rho[k + 1] - self.rho[k]) / self.dx);
        let s = if slope.abs() * r < 1e-12 * r0 * r0 {
            if r0 > 0.0 {
                r / r0
            } else {
                0.0
            }
        } else {
            2.0 * r / (r0 + (r0 * r0 + 2.0 * slope * r).max(0.0).sqrt())
        };
        self.x_min + k as f64 * self.dx + s.clamp(0.0, self.dx)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlowFrame {
    pub t: f64,
    pub density: Vec<f64>,
    pub velocity: Vec<f64>,
    /// `∂_X ln J`.
    pub dlog: Vec<f64>,
    pub max_density: f64,
}

/// Frame schedule for a detector run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FlowPlan {
    /// Reference solver step.
    pub dt: f64,
    pub t_end: f64,
    /// Solver steps per frame.
    pub frame_stride: usize,
    /// Fine grid points per coarse point.
    pub coarse_stride: usize,
}

impl FlowPlan {
    /// Runs to `t_s + 3 (t_B+ - t_s)` with frames no further apart than
    /// [`MAX_CELLS_PER_STEP`] coarse cells at the fastest branch velocity.
    pub fn for_detector(det: &DetectorModel, dt: f64, t_end: Option<f64>) -> Result<Self> {
        det.validate()?;
        let t_sep = full_separation_time(det, COHERENCE_SEPARATION)?;
        let t_end = t_end.unwrap_or(det.t_s + RUN_LENGTH_MULTIPLE * (t_sep - det.t_s));
        let grid = det.pointer_grid(t_end)?;
        let coarse_stride = ((det.sigma0 / COARSE_PER_WIDTH / grid.dx()).round() as usize).max(1);
        let dx_c = coarse_stride as f64 * grid.dx();
        let vmax = (0..det.branch_count())
            .map(|a| det.velocity(a, t_end).abs())
            .fold(0.0, f64::max);
        let frame_stride = if vmax > 0.0 {
            ((MAX_CELLS_PER_STEP * dx_c / (vmax * dt)).floor() as usize).max(1)
        } else {
            1
        };
        let frame_dt = frame_stride as f64 * dt;
        let t_end = (t_end / frame_dt - 1e-9).ceil() * frame_dt;
        Ok(Self {
            dt,
            t_end,
            frame_stride,
            coarse_stride,
        })
    }
}

/// Frames at which an ensemble is characterized.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct KeyFrames {
    /// `t_B-`: switch-on.
    pub before: usize,
    /// `t_B+`: first frame with every pair separated.
    pub after: usize,
    pub probes: [usize; 5],
    pub last: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlowFrames {
    pub detector: DetectorModel,
    pub x_min: f64,
    pub dx: f64,
    pub n: usize,
    pub t_sep: f64,
    pub frames: Vec<FlowFrame>,
}

impl FlowFrames {
    /// Evolves the branches under `plan`, tabulating the flow every
    /// `frame_stride` steps.
    pub fn build(det: &DetectorModel, plan: &FlowPlan) -> Result<(BranchSet, FlowFrames)> {
        let grid = det.pointer_grid(plan.t_end)?;
        let cs = plan.coarse_stride;
        let n_coarse = (grid.len() - 1) / cs + 1;
        let weights = det.weights();
        let ratio = det.hbar / det.mass();
        let dx = grid.dx();
        let mut frames = Vec::new();
        let set = branch_evolve_observed(det, plan.t_end, plan.dt, Some(grid), |step, t, amps| {
            if step % plan.frame_stride != 0 {
                return Ok(());
            }
            let mut frame = FlowFrame {
                t,
                density: vec![0.0; n_coarse],
                velocity: vec![0.0; n_coarse],
                dlog: vec![0.0; n_coarse],
                max_density: 0.0,
            };
            for k in 0..n_coarse {
                let i = k * cs;
                let (mut j, mut jv, mut jd) = (0.0, 0.0, 0.0);
                for (w, amp) in weights.iter().zip(amps) {
                    let rho = w * amp[i].norm_sqr();
                    j += rho;
                    if i == 0 || i + 1 >= amp.len() {
                        continue;
                    }
                    if let Some((phase, dlog)) = nodal_fields(amp, i, dx) {
                        jv += rho * phase;
                        jd += rho * dlog;
                    }
                }
                frame.density[k] = j;
                if j > 0.0 {
                    frame.velocity[k] = ratio * jv / j;
                    frame.dlog[k] = jd / j;
                }
            }
            frame.max_density = frame.density.iter().cloned().fold(0.0, f64::max);
            frames.push(frame);
            Ok(())
        })?;
        let flow = FlowFrames {
            detector: det.clone(),
            x_min: grid.x_min(),
            dx: cs as f64 * dx,
            n: n_coarse,
            t_sep: full_separation_time(det, COHERENCE_SEPARATION)?,
            frames,
        };
        flow.check_spacing()?;
        Ok((set, flow))
    }

    fn check_spacing(&self) -> Result<()> {
        if self.frames.len() < 2 {
            return Err(Error::InsufficientFrames(format!("{} frames", self.frames.len())));
        }
        let det = &self.detector;
        for w in self.frames.windows(2) {
            let vmax = (0..det.branch_count())
                .map(|a| det.velocity(a, w[1].t).abs())
                .fold(0.0, f64::max);
            let cells = vmax * (w[1].t - w[0].t) / self.dx;
            if cells > MAX_CELLS_PER_STEP * (1.0 + 1e-9) {
                return Err(Error::InsufficientFrames(format!(
                    "{cells:.2} cells per frame at t = {}",
                    w[1].t
                )));
            }
        }
        Ok(())
    }

    pub fn times(&self) -> Vec<f64> {
        self.frames.iter().map(|f| f.t).collect()
    }

    pub fn x(&self, k: usize) -> f64 {
        self.x_min + k as f64 * self.dx
    }

    /// First frame at or after `t`.
    pub fn frame_at(&self, t: f64) -> usize {
        let eps = 1e-9 * (self.frames[1].t - self.frames[0].t);
        self.frames
            .partition_point(|f| f.t < t - eps)
            .min(self.frames.len() - 1)
    }

    pub fn key_frames(&self) -> KeyFrames {
        let last = self.frames.len() - 1;
        let t_end = self.frames[last].t;
        let mut probes = [0; 5];
        for (i, p) in probes.iter_mut().enumerate() {
            *p = self.frame_at(t_end * (i + 1) as f64 / 6.0);
        }
        KeyFrames {
            before: self.frame_at(self.detector.t_s),
            after: self.frame_at(self.t_sep),
            probes,
            last,
        }
    }

    pub fn density_table(&self, f: usize) -> DensityTable {
        DensityTable::new(self.x_min, self.dx, &self.frames[f].density)
    }

    /// Drift `v + ε²/2 ∂ ln J` at `q` in frame `f`.
    pub fn drift(&self, f: usize, q: f64, noise: f64) -> Result<f64> {
        let frame = &self.frames[f];
        let (first, w) = stencil(self.x_min, self.dx, self.n, q).ok_or(Error::NodeEncountered { q })?;
        if !(apply(&w, &frame.density, first) > NODE_DENSITY * frame.max_density) {
            return Err(Error::NodeEncountered { q });
        }
        Ok(apply(&w, &frame.velocity, first) + 0.5 * noise * noise * apply(&w, &frame.dlog, first))
    }

    /// Branch whose peak is within [`LABEL_WINDOW`] `d_N` of `q` at frame `f`.
    /// The second value is true if more than one window contains `q`.
    pub fn label(&self, f: usize, q: f64) -> (Option<usize>, bool) {
        let det = &self.detector;
        let t = self.frames[f].t;
        let peaks: Vec<f64> = (0..det.branch_count()).map(|a| det.trajectory(a, t)).collect();
        label_in(&peaks, LABEL_WINDOW * det.d_n(t), q)
    }

    fn nearest(&self, f: usize, q: f64) -> usize {
        let det = &self.detector;
        let t = self.frames[f].t;
        (0..det.branch_count())
            .min_by(|&a, &b| {
                (q - det.trajectory(a, t))
                    .abs()
                    .total_cmp(&(q - det.trajectory(b, t)).abs())
            })
            .unwrap_or(0)
    }

    /// Default noise for this detector.
    pub fn default_noise(&self) -> f64 {
        let det = &self.detector;
        DEFAULT_NOISE_MULTIPLE * det.sigma0 / (self.t_sep - det.t_s).max(f64::MIN_POSITIVE).sqrt()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleSettings {
    pub samples: usize,
    pub seed: u64,
    /// `None` means [`FlowFrames::default_noise`].
    pub noise: Option<f64>,
    /// Also record every `stride`-th frame for trajectory output.
    pub record_stride: Option<usize>,
}

impl EnsembleSettings {
    pub fn new(samples: usize, seed: u64) -> Self {
        Self {
            samples,
            seed,
            noise: None,
            record_stride: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleEnsemble {
    pub samples: usize,
    pub seed: u64,
    pub noise: f64,
    pub record_frames: Vec<usize>,
    /// `snapshots[r][l]`: sample `l` at frame `record_frames[r]`, NaN after a node.
    pub snapshots: Vec<Vec<f64>>,
    /// Label at the final frame.
    pub labels: Vec<Option<usize>>,
    /// Samples whose label changed after separation.
    pub label_flips: usize,
    /// Samples found within two label windows at once.
    pub double_assigned: usize,
    /// Samples stopped at a node or at the grid edge.
    pub node_hits: usize,
}

impl SampleEnsemble {
    pub fn snapshot(&self, frame: usize) -> Option<&[f64]> {
        self.record_frames
            .iter()
            .position(|&f| f == frame)
            .map(|r| self.snapshots[r].as_slice())
    }

    pub fn initial(&self) -> &[f64] {
        &self.snapshots[0]
    }

    /// Rows `sample,t,Q` at recorded frames that are multiples of `stride`.
    pub fn write_trajectories_csv<W: Write>(&self, mut w: W, frames: &FlowFrames, stride: usize) -> Result<()> {
        writeln!(w, "sample,t,Q")?;
        let stride = stride.max(1);
        for l in 0..self.samples {
            for (r, &f) in self.record_frames.iter().enumerate() {
                if f % stride == 0 {
                    writeln!(w, "{},{:.16e},{:.16e}", l, frames.frames[f].t, self.snapshots[r][l])?;
                }
            }
        }
        Ok(())
    }
}

const WALKER_CHUNK: usize = 1024;

struct Walker {
    rng: rand_chacha::ChaCha8Rng,
    q: f64,
    label: Option<usize>,
    settled: Option<usize>,
    flipped: bool,
    double: bool,
    node: bool,
}

/// Integrates `samples` points drawn from the initial density, each with
/// its own random stream, by stochastic Heun steps between frames.
pub fn evolve_ensemble(frames: &FlowFrames, settings: &EnsembleSettings) -> Result<SampleEnsemble> {
    if settings.samples == 0 {
        return Err(Error::InvalidParameter("need at least one sample".into()));
    }
    let noise = settings.noise.unwrap_or_else(|| frames.default_noise());
    if !(noise >= 0.0) {
        return Err(Error::InvalidParameter(format!("noise {noise}")));
    }
    let keys = frames.key_frames();
    let mut record: BTreeSet<usize> = [0, keys.before, keys.after, keys.last]
        .into_iter()
        .chain(keys.probes)
        .collect();
    if let Some(stride) = settings.record_stride {
        record.extend((0..frames.frames.len()).step_by(stride.max(1)));
    }
    let record_frames: Vec<usize> = record.into_iter().collect();
    let initial = frames.density_table(0);
    let mut walkers: Vec<Walker> = (0..settings.samples)
        .map(|l| {
            let mut rng = rng::stream(settings.seed, l as u64);
            let q = initial.quantile(rng.random::<f64>());
            Walker {
                rng,
                q,
                label: None,
                settled: None,
                flipped: false,
                double: false,
                node: false,
            }
        })
        .collect();
    let mut snapshots = Vec::with_capacity(record_frames.len());

    // frames outer, samples inner: each frame stays in cache
    for f in 0..frames.frames.len() {
        if record_frames.binary_search(&f).is_ok() {
            snapshots.push(
                walkers
                    .iter()
                    .map(|w| if w.node { f64::NAN } else { w.q })
                    .collect::<Vec<f64>>(),
            );
        }
        let dt = if f < keys.last {
            frames.frames[f + 1].t - frames.frames[f].t
        } else {
            0.0
        };
        let t = frames.frames[f].t;
        let det = &frames.detector;
        let peaks: Vec<f64> = (0..det.branch_count()).map(|a| det.trajectory(a, t)).collect();
        let half = LABEL_WINDOW * det.d_n(t);
        walkers.par_chunks_mut(WALKER_CHUNK).for_each(|chunk| {
            for w in chunk.iter_mut().filter(|w| !w.node) {
                if f >= keys.after {
                    let (label, double) = label_in(&peaks, half, w.q);
                    w.double |= double;
                    if let (Some(prev), Some(now)) = (w.settled, label) {
                        w.flipped |= prev != now;
                    }
                    if label.is_some() {
                        w.settled = label;
                    }
                    w.label = label;
                }
                if f == keys.last {
                    continue;
                }
                let z: f64 = w.rng.sample(StandardNormal);
                let dw = noise * dt.sqrt() * z;
                let q = w.q;
                let step = frames.drift(f, q, noise).and_then(|a0| {
                    let qp = q + a0 * dt + dw;
                    frames.drift(f + 1, qp, noise).map(|a1| q + 0.5 * (a0 + a1) * dt + dw)
                });
                match step {
                    Ok(next) => w.q = next,
                    Err(_) => {
                        w.node = true;
                        w.label = None;
                    }
                }
            }
        });
        if f == keys.last {
            break;
        }
    }
    Ok(SampleEnsemble {
        samples: settings.samples,
        seed: settings.seed,
        noise,
        record_frames,
        snapshots,
        labels: walkers.iter().map(|w| w.label).collect(),
        label_flips: walkers.iter().filter(|w| w.flipped).count(),
        double_assigned: walkers.iter().filter(|w| w.double).count(),
        node_hits: walkers.iter().filter(|w| w.node).count(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Kappa {
    pub before: f64,
    pub after_own: f64,
    pub after_other: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct WidthRatio {
    /// Standard deviation of all samples at `t_B-`.
    pub before: f64,
    /// Standard deviation of group `a` at `t_B+`.
    pub after: f64,
    pub ratio: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct KsProbe {
    pub t: f64,
    pub distance: f64,
    pub band: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BranchReport {
    pub samples: usize,
    pub seed: u64,
    pub noise: f64,
    pub t_before: f64,
    pub t_after: f64,
    pub counts: Vec<usize>,
    pub fractions: Vec<f64>,
    pub stderr: Vec<f64>,
    pub expected: Vec<f64>,
    pub unassigned: usize,
    pub node_hits: usize,
    pub label_flips: usize,
    pub double_assigned: usize,
    pub kappa: Vec<Kappa>,
    pub widths: Vec<WidthRatio>,
    /// `ρ_a(X_a) √(2π) σ_a / L_a` at `t_B+`; 1 when the group is conserved.
    pub number_conservation: Vec<f64>,
    pub reliable: Vec<bool>,
    pub equivariance: Vec<KsProbe>,
}

fn finite(values: &[f64]) -> Vec<f64> {
    values.iter().cloned().filter(|q| q.is_finite()).collect()
}

/// Kolmogorov–Smirnov distance of a snapshot from the frame density.
pub fn equivariance_probe(ens: &SampleEnsemble, frames: &FlowFrames, f: usize) -> Option<KsProbe> {
    let mut q = finite(ens.snapshot(f)?);
    q.sort_by(f64::total_cmp);
    let table = frames.density_table(f);
    Some(KsProbe {
        t: frames.frames[f].t,
        distance: ks_distance(&q, |x| table.cdf(x)),
        band: ks_band_99(q.len()),
    })
}

/// Branch counts, group densities and widths around the branching region.
pub fn analyze_ensemble(ens: &SampleEnsemble, frames: &FlowFrames) -> Result<BranchReport> {
    let det = &frames.detector;
    let nb = det.branch_count();
    let keys = frames.key_frames();
    let missing = |f: usize| Error::InsufficientFrames(format!("frame {f} not recorded"));
    let before = ens.snapshot(keys.before).ok_or_else(|| missing(keys.before))?;
    let after = ens.snapshot(keys.after).ok_or_else(|| missing(keys.after))?;
    let (t_b, t_a) = (frames.frames[keys.before].t, frames.frames[keys.after].t);
    let (h_b, h_a) = (det.d_n(t_b) / KDE_PER_WIDTH, det.d_n(t_a) / KDE_PER_WIDTH);
    let l = ens.samples as f64;

    let all_before = finite(before);
    let rho_ref = kde(&all_before, det.x0, h_b, 1.0);
    let (_, std_before) = mean_std(&all_before);
    let mut counts = vec![0usize; nb];
    for lab in ens.labels.iter().flatten() {
        counts[*lab] += 1;
    }
    let mut kappa = Vec::with_capacity(nb);
    let mut widths = Vec::with_capacity(nb);
    let mut conservation = Vec::with_capacity(nb);
    for a in 0..nb {
        let pick = |snap: &[f64]| -> Vec<f64> {
            snap.iter()
                .zip(&ens.labels)
                .filter(|(q, lab)| **lab == Some(a) && q.is_finite())
                .map(|(q, _)| *q)
                .collect()
        };
        let g_before = pick(before);
        let g_after = pick(after);
        let own = det.trajectory(a, t_a);
        let other = (0..nb)
            .filter(|&b| b != a)
            .map(|b| kde(&g_after, det.trajectory(b, t_a), h_a, 1.0))
            .fold(0.0, f64::max);
        let peak = kde(&g_after, own, h_a, 1.0);
        kappa.push(Kappa {
            before: kde(&g_before, det.x0, h_b, 1.0) / rho_ref,
            after_own: peak / rho_ref,
            after_other: other / rho_ref,
        });
        let (_, std_after) = if g_after.len() > 1 {
            mean_std(&g_after)
        } else {
            (0.0, 0.0)
        };
        widths.push(WidthRatio {
            before: std_before,
            after: std_after,
            ratio: std_after / std_before,
        });
        conservation.push(if counts[a] > 0 {
            peak * (2.0 * std::f64::consts::PI).sqrt() * std_after / counts[a] as f64
        } else {
            f64::NAN
        });
    }
    let fractions: Vec<f64> = counts.iter().map(|&c| c as f64 / l).collect();
    let equivariance = keys
        .probes
        .iter()
        .filter_map(|&f| equivariance_probe(ens, frames, f))
        .collect();
    Ok(BranchReport {
        samples: ens.samples,
        seed: ens.seed,
        noise: ens.noise,
        t_before: t_b,
        t_after: t_a,
        stderr: fractions.iter().map(|&p| binomial_stderr(p, ens.samples)).collect(),
        counts: counts.clone(),
        fractions,
        expected: det.weights(),
        unassigned: ens.labels.iter().filter(|l| l.is_none()).count(),
        node_hits: ens.node_hits,
        label_flips: ens.label_flips,
        double_assigned: ens.double_assigned,
        kappa,
        widths,
        number_conservation: conservation,
        reliable: counts.iter().map(|&c| c >= MIN_GROUP).collect(),
        equivariance,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TimeAverage {
    /// Initial positions separating consecutive basins, in ascending order.
    pub boundaries: Vec<f64>,
    /// `M_a / M` per branch.
    pub fractions: Vec<f64>,
    pub expected: Vec<f64>,
}

/// Branch reached from `q0` under the noise-free flow, as a rank in
/// ascending peak position.
fn basin_rank(frames: &FlowFrames, q0: f64, rank: &[usize]) -> Result<usize> {
    let keys = frames.key_frames();
    let mut q = q0;
    for f in 0..keys.last {
        let dt = frames.frames[f + 1].t - frames.frames[f].t;
        let step = frames
            .drift(f, q, 0.0)
            .and_then(|a0| frames.drift(f + 1, q + a0 * dt, 0.0).map(|a1| q + 0.5 * (a0 + a1) * dt));
        match step {
            Ok(next) => q = next,
            // past separation a stalled point sits between peaks
            Err(_) if f >= keys.after => return Ok(rank[frames.nearest(f, q)]),
            Err(e) => return Err(e),
        }
    }
    Ok(rank[frames.nearest(keys.last, q)])
}

/// Fraction of initial weight that the noise-free flow carries into each
/// branch. Basins are intervals because the 1D flow preserves order.
pub fn time_average_fraction(frames: &FlowFrames) -> Result<TimeAverage> {
    let det = &frames.detector;
    let nb = det.branch_count();
    let keys = frames.key_frames();
    let t_last = frames.frames[keys.last].t;
    let mut by_position: Vec<usize> = (0..nb).collect();
    by_position.sort_by(|&a, &b| det.trajectory(a, t_last).total_cmp(&det.trajectory(b, t_last)));
    let mut rank = vec![0; nb];
    for (r, &a) in by_position.iter().enumerate() {
        rank[a] = r;
    }
    let table = frames.density_table(0);
    let reach = 10.0 * det.sigma0;
    let lo0 = (det.x0 - reach).max(frames.x(1));
    let hi0 = (det.x0 + reach).min(frames.x(frames.n - 2));
    let (r_lo, r_hi) = (basin_rank(frames, lo0, &rank)?, basin_rank(frames, hi0, &rank)?);
    let mut boundaries = Vec::with_capacity(nb.saturating_sub(1));
    for r in 0..nb.saturating_sub(1) {
        let b = if r_lo > r {
            lo0
        } else if r_hi <= r {
            hi0
        } else {
            let (mut lo, mut hi) = (lo0, hi0);
            for _ in 0..100 {
                if hi - lo < 1e-12 {
                    break;
                }
                let mid = 0.5 * (lo + hi);
                if basin_rank(frames, mid, &rank)? <= r {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            0.5 * (lo + hi)
        };
        boundaries.push(b);
    }
    let weights = det.weights();
    let mut fractions = vec![0.0; nb];
    for (r, &a) in by_position.iter().enumerate() {
        let left = if r == 0 { lo0 } else { boundaries[r - 1] };
        let right = if r + 1 == nb { hi0 } else { boundaries[r] };
        if weights[a] > 0.0 && right - left < frames.dx {
            return Err(Error::BasinBoundaryUnresolved {
                width: right - left,
                dx: frames.dx,
            });
        }
        fractions[a] = table.cdf(right) - table.cdf(left);
    }
    Ok(TimeAverage {
        boundaries,
        fractions,
        expected: weights,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grids::{gaussian_packet, SpaceGrid};

    fn small() -> DetectorModel {
        DetectorModel {
            n: 20,
            sigma0: 0.2,
            t_s: 0.1,
            ..DetectorModel::two_branch(0.3)
        }
    }

    fn flow(det: &DetectorModel) -> FlowFrames {
        let plan = FlowPlan::for_detector(det, 5e-3, None).unwrap();
        FlowFrames::build(det, &plan).unwrap().1
    }

    fn small_flow() -> &'static FlowFrames {
        static FLOW: std::sync::OnceLock<FlowFrames> = std::sync::OnceLock::new();
        FLOW.get_or_init(|| flow(&small()))
    }

    #[test]
    fn plane_wave_velocity_exact() {
        let g = SpaceGrid::new(-10.0, 10.0, 401).unwrap();
        let p = 1.7;
        let psi = WaveFunction::from_fn(g, 2.0, 1.0, |x| Complex64::from_polar(1.0, p * x)).unwrap();
        let v = guidance_velocity(&psi, 0.123).unwrap();
        assert!((v - p / 2.0).abs() < 1e-12);
    }

    #[test]
    fn real_state_has_no_velocity() {
        let g = SpaceGrid::new(-10.0, 10.0, 401).unwrap();
        let psi = gaussian_packet(&g, 0.5, 0.0, 1.0, 1.0, 1.0).unwrap();
        assert_eq!(guidance_velocity(&psi, 0.77).unwrap(), 0.0);
    }

    #[test]
    fn node_refused() {
        let g = SpaceGrid::new(-5.0, 5.0, 201).unwrap();
        let psi = WaveFunction::from_fn(g, 1.0, 1.0, |x| Complex64::new(x * (-x * x).exp(), 0.0)).unwrap();
        assert!(matches!(
            guidance_velocity(&psi, 0.0),
            Err(Error::NodeEncountered { .. })
        ));
    }

    #[test]
    fn accelerating_packet_velocity() {
        let det = DetectorModel {
            amplitudes: vec![Complex64::new(1.0, 0.0), Complex64::new(0.0, 0.0)],
            ..small()
        };
        let set = crate::measurement::branch_evolve(&det, 0.8, 2e-3).unwrap();
        let psi = &set.branches[0].psi;
        let v = guidance_velocity(psi, det.trajectory(0, 0.8)).unwrap();
        assert!((v - det.velocity(0, 0.8)).abs() < 1e-4, "{v}");
    }

    #[test]
    fn density_table_round_trip() {
        let dens: Vec<f64> = (0..50).map(|k| (-(k as f64 - 25.0).powi(2) / 40.0).exp()).collect();
        let t = DensityTable::new(-1.0, 0.04, &dens);
        for p in [0.01, 0.2, 0.5, 0.77, 0.99] {
            assert!((t.cdf(t.quantile(p)) - p).abs() < 1e-12);
        }
    }

    #[test]
    fn same_seed_same_ensemble() {
        let fl = small_flow();
        let s = EnsembleSettings::new(200, 9);
        let a = evolve_ensemble(fl, &s).unwrap();
        let b = evolve_ensemble(fl, &s).unwrap();
        assert_eq!(a, b);
        let c = evolve_ensemble(fl, &EnsembleSettings::new(200, 10)).unwrap();
        assert_ne!(a.labels, c.labels);
    }

    #[test]
    fn single_branch_takes_everything() {
        let det = DetectorModel {
            amplitudes: vec![Complex64::new(0.0, 0.0), Complex64::new(1.0, 0.0)],
            ..small()
        };
        let fl = flow(&det);
        let ens = evolve_ensemble(&fl, &EnsembleSettings::new(300, 1)).unwrap();
        let rep = analyze_ensemble(&ens, &fl).unwrap();
        assert_eq!(rep.counts, vec![0, 300]);
        assert!(rep.kappa[1].before > 0.95);
        assert!(!rep.reliable[0]);
    }

    #[test]
    fn labels_stay_put_and_fractions_born() {
        let fl = small_flow();
        let ens = evolve_ensemble(fl, &EnsembleSettings::new(2000, 4)).unwrap();
        let rep = analyze_ensemble(&ens, fl).unwrap();
        assert_eq!(rep.label_flips, 0);
        assert_eq!(rep.double_assigned, 0);
        assert_eq!(rep.node_hits, 0);
        assert!(
            (rep.fractions[0] - 0.3).abs() < 4.0 * rep.stderr[0],
            "{:?}",
            rep.fractions
        );
        for probe in &rep.equivariance {
            assert!(probe.distance < 2.0 * probe.band, "{probe:?}");
        }
        for c in &rep.number_conservation {
            assert!((c - 1.0).abs() < 0.1, "{c}");
        }
    }

    #[test]
    fn deterministic_flow_basins_carry_weights() {
        let fl = small_flow();
        let ta = time_average_fraction(fl).unwrap();
        assert!((ta.fractions[0] - 0.3).abs() < 5e-3, "{:?}", ta.fractions);
        assert!((ta.fractions.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        // boundary is the initial 0.3 quantile
        let q = fl.density_table(0).quantile(0.3);
        assert!((ta.boundaries[0] - q).abs() < 0.05 * small().sigma0);
    }

    #[test]
    fn noise_free_symmetric_split_by_sign() {
        let det = DetectorModel {
            n: 20,
            sigma0: 0.2,
            t_s: 0.1,
            ..DetectorModel::two_branch(0.5)
        };
        let fl = flow(&det);
        let settings = EnsembleSettings {
            noise: Some(0.0),
            record_stride: Some(1),
            ..EnsembleSettings::new(2000, 3)
        };
        let ens = evolve_ensemble(&fl, &settings).unwrap();
        let rep = analyze_ensemble(&ens, &fl).unwrap();
        assert!((rep.fractions[0] - 0.5).abs() < 0.015, "{:?}", rep.fractions);
        let start = ens.snapshot(0).unwrap();
        for (q, lab) in start.iter().zip(&ens.labels) {
            if q.abs() > 1e-3 * det.sigma0 {
                assert_eq!(*lab, Some(if *q < 0.0 { 0 } else { 1 }), "{q}");
            }
        }
    }

    #[test]
    fn tiny_basin_unresolved() {
        let w: f64 = 1e-7;
        let side = Complex64::new(((1.0 - w) / 2.0).sqrt(), 0.0);
        let det = DetectorModel {
            eigenvalues: vec![-1.0, 0.0, 1.0],
            amplitudes: vec![side, Complex64::new(w.sqrt(), 0.0), side],
            ..small()
        };
        let fl = flow(&det);
        assert!(matches!(
            time_average_fraction(&fl),
            Err(Error::BasinBoundaryUnresolved { .. })
        ));
    }
}
