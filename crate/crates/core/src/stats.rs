//! Small statistics helpers: least-squares fits, KDE, KS distance.

use std::f64::consts::PI;

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct LinearFit {
    pub slope: f64,
    pub intercept: f64,
    /// Standard error of the slope (zero for two points or exact data).
    pub slope_stderr: f64,
}

pub fn linear_fit(xs: &[f64], ys: &[f64]) -> LinearFit {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let slope_stderr = if xs.len() > 2 {
        let ssr: f64 = xs
            .iter()
            .zip(ys)
            .map(|(x, y)| (y - intercept - slope * x).powi(2))
            .sum();
        (ssr / (n - 2.0) / sxx).sqrt()
    } else {
        0.0
    };
    LinearFit {
        slope,
        intercept,
        slope_stderr,
    }
}

/// Fit of `ln y = a + b ln x`.
pub fn loglog_fit(xs: &[f64], ys: &[f64]) -> LinearFit {
    let lx: Vec<f64> = xs.iter().map(|x| x.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|y| y.ln()).collect();
    linear_fit(&lx, &ly)
}

/// Gaussian kernel density of `points` at `x`, normalized by `total`
/// (pass `points.len()` for a probability density).
pub fn kde(points: &[f64], x: f64, bandwidth: f64, total: f64) -> f64 {
    let inv = 1.0 / bandwidth;
    let s: f64 = points
        .iter()
        .map(|q| {
            let u = (x - q) * inv;
            if u.abs() > 10.0 {
                0.0
            } else {
                (-0.5 * u * u).exp()
            }
        })
        .sum();
    s * inv / ((2.0 * PI).sqrt() * total)
}

pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let m = values.iter().sum::<f64>() / n;
    let v = values.iter().map(|q| (q - m).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    (m, v.sqrt())
}

/// Two-sided Kolmogorov–Smirnov distance between sorted samples and a CDF.
pub fn ks_distance(sorted: &[f64], cdf: impl Fn(f64) -> f64) -> f64 {
    let n = sorted.len() as f64;
    sorted
        .iter()
        .enumerate()
        .map(|(i, &q)| {
            let f = cdf(q);
            (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
        })
        .fold(0.0, f64::max)
}

/// Asymptotic 99% critical value of the one-sample KS statistic.
pub fn ks_band_99(n: usize) -> f64 {
    1.628 / (n as f64).sqrt()
}

pub fn binomial_stderr(p: f64, n: usize) -> f64 {
    (p * (1.0 - p) / n as f64).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fits() {
        let xs = [1.0, 10.0, 100.0, 1000.0];
        let ys: Vec<f64> = xs.iter().map(|x: &f64| 3.0 * x.powf(-0.5)).collect();
        let f = loglog_fit(&xs, &ys);
        assert!((f.slope + 0.5).abs() < 1e-12);
        assert!((f.intercept - 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn kde_integrates() {
        let pts = [0.0, 0.1, -0.2];
        let s: f64 = (-400..=400).map(|i| kde(&pts, i as f64 * 0.01, 0.1, 3.0) * 0.01).sum();
        assert!((s - 1.0).abs() < 1e-6);
    }

    #[test]
    fn ks_uniform() {
        let pts: Vec<f64> = (0..100).map(|i| (i as f64 + 0.5) / 100.0).collect();
        assert!((ks_distance(&pts, |x| x) - 0.005).abs() < 1e-12);
    }
}
