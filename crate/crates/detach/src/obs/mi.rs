//! Gaussian-approximation mutual information between the two streams and
//! the discounted disentanglement score built on it.

use crate::autodiff::Tensor;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum MiError {
    #[error("sample counts differ: {x} vs {y}")]
    RowMismatch { x: usize, y: usize },
    #[error("need at least 2 samples, got {0}")]
    NotEnoughSamples(usize),
    #[error("series has {rows} rows but horizon {horizon} needs at least horizon+1")]
    ShortSeries { rows: usize, horizon: usize },
    #[error("covariance not factorizable even at ridge {0}")]
    Unfactorizable(f64),
}

/// Result of one MI estimate.
#[derive(Debug, Clone, Copy)]
pub struct MiEstimate {
    /// Mutual information in nats, clamped at 0.
    pub nats: f64,
    /// Diagonal ridge that made the joint covariance factorizable; 0 when
    /// none was needed.
    pub ridge_used: f64,
}

/// Lower-triangular Cholesky log-determinant; `None` when the matrix is not
/// positive definite.
fn cholesky_logdet(mat: &[f64], n: usize) -> Option<f64> {
    let mut l = vec![0.0; n * n];
    let mut logdet = 0.0;
    for i in 0..n {
        for j in 0..=i {
            let mut sum = mat[i * n + j];
            for k in 0..j {
                sum -= l[i * n + k] * l[j * n + k];
            }
            if i == j {
                if sum <= 0.0 || !sum.is_finite() {
                    return None;
                }
                let d = sum.sqrt();
                l[i * n + i] = d;
                logdet += 2.0 * d.ln();
            } else {
                l[i * n + j] = sum / l[j * n + j];
            }
        }
    }
    Some(logdet)
}

/// Standardize columns in place (mean 0, sample variance 1; zero-variance
/// columns collapse to 0). MI is invariant under per-variable scaling, so
/// this only improves conditioning.
fn standardized(t: &Tensor) -> Vec<f64> {
    let (n, d) = (t.rows(), t.cols());
    let mut out = t.data().to_vec();
    for c in 0..d {
        let mean: f64 = (0..n).map(|r| t.at(r, c)).sum::<f64>() / n as f64;
        let var: f64 = (0..n).map(|r| (t.at(r, c) - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0);
        let inv = if var > 1e-24 { 1.0 / var.sqrt() } else { 0.0 };
        for r in 0..n {
            out[r * d + c] = (t.at(r, c) - mean) * inv;
        }
    }
    out
}

/// Mutual information between streams under a joint-Gaussian approximation:
/// `0.5 * ln(det(Σxx) * det(Σyy) / det(Σ))` over sample covariances.
///
/// A singular joint covariance (duplicated or constant features, or too few
/// samples) is ridge-regularized on the diagonal — `ridge`, escalating
/// tenfold until factorizable — and the ridge actually used is reported, so
/// perfectly dependent streams yield a finite capped value instead of ∞.
pub fn mi_estimate(x: &Tensor, y: &Tensor, ridge: f64) -> Result<MiEstimate, MiError> {
    let n = x.rows();
    if n != y.rows() {
        return Err(MiError::RowMismatch { x: n, y: y.rows() });
    }
    if n < 2 {
        return Err(MiError::NotEnoughSamples(n));
    }
    let (dx, dy) = (x.cols(), y.cols());
    let d = dx + dy;

    let xs = standardized(x);
    let ys = standardized(y);
    // joint covariance of [x y]
    let mut cov = vec![0.0; d * d];
    let norm = 1.0 / (n as f64 - 1.0);
    let col = |r: usize, c: usize| -> f64 {
        if c < dx {
            xs[r * dx + c]
        } else {
            ys[r * dy + (c - dx)]
        }
    };
    for i in 0..d {
        for j in 0..=i {
            let mut acc = 0.0;
            for r in 0..n {
                acc += col(r, i) * col(r, j);
            }
            let v = acc * norm;
            cov[i * d + j] = v;
            cov[j * d + i] = v;
        }
    }

    let logdets = |cov: &[f64]| -> Option<(f64, f64, f64)> {
        let mut cxx = vec![0.0; dx * dx];
        for i in 0..dx {
            for j in 0..dx {
                cxx[i * dx + j] = cov[i * d + j];
            }
        }
        let mut cyy = vec![0.0; dy * dy];
        for i in 0..dy {
            for j in 0..dy {
                cyy[i * dy + j] = cov[(dx + i) * d + dx + j];
            }
        }
        Some((cholesky_logdet(&cxx, dx)?, cholesky_logdet(&cyy, dy)?, cholesky_logdet(cov, d)?))
    };

    let mut ridge_used = 0.0;
    let mut attempt = cov.clone();
    let mut step = ridge;
    let result = loop {
        if let Some(r) = logdets(&attempt) {
            break r;
        }
        if step > 1e6 {
            return Err(MiError::Unfactorizable(ridge_used));
        }
        attempt.copy_from_slice(&cov);
        for i in 0..d {
            attempt[i * d + i] += step;
        }
        ridge_used = step;
        step *= 10.0;
    };
    let (ld_xx, ld_yy, ld_joint) = result;
    let nats = (0.5 * (ld_xx + ld_yy - ld_joint)).max(0.0);
    Ok(MiEstimate { nats, ridge_used })
}

/// Configuration for [`disentanglement_score`].
#[derive(Debug, Clone, Copy)]
pub struct DisentanglementConfig {
    /// Sliding sample window per time step, centered and edge-truncated.
    pub window: usize,
    /// Floor applied to each per-step MI before inversion.
    pub mi_floor: f64,
    /// Discount on later steps.
    pub gamma: f64,
    /// Ridge forwarded to [`mi_estimate`].
    pub ridge: f64,
}

impl Default for DisentanglementConfig {
    fn default() -> Self {
        DisentanglementConfig { window: 256, mi_floor: 1e-3, gamma: 0.99, ridge: 1e-6 }
    }
}

#[derive(Debug, Clone)]
pub struct DisentanglementReport {
    /// `sum_t gamma^t / max(I_t, mi_floor)` for `t = 0..=horizon`; higher
    /// means the streams carry more independent information.
    pub score: f64,
    pub mi_per_step: Vec<f64>,
}

/// Discounted inverse-MI score over a rollout. `env_series`/`self_series`
/// are `[steps, d]` feature series covering at least `horizon + 1` rows;
/// the MI at step `t` is estimated over a window of rows centered on `t`.
pub fn disentanglement_score(
    env_series: &Tensor,
    self_series: &Tensor,
    horizon: usize,
    cfg: &DisentanglementConfig,
) -> Result<DisentanglementReport, MiError> {
    let rows = env_series.rows();
    if rows != self_series.rows() {
        return Err(MiError::RowMismatch { x: rows, y: self_series.rows() });
    }
    if rows < horizon + 1 {
        return Err(MiError::ShortSeries { rows, horizon });
    }
    let slice_rows = |t: &Tensor, lo: usize, hi: usize| {
        let d = t.cols();
        Tensor::new(&[hi - lo, d], t.data()[lo * d..hi * d].to_vec())
    };
    let half = cfg.window / 2;
    let mut score = 0.0;
    let mut mi_per_step = Vec::with_capacity(horizon + 1);
    let mut discount = 1.0;
    for t in 0..=horizon {
        let lo = t.saturating_sub(half);
        let hi = (t + cfg.window - half).min(rows);
        let mi = mi_estimate(&slice_rows(env_series, lo, hi), &slice_rows(self_series, lo, hi), cfg.ridge)?;
        mi_per_step.push(mi.nats);
        score += discount / mi.nats.max(cfg.mi_floor);
        discount *= cfg.gamma;
    }
    Ok(DisentanglementReport { score, mi_per_step })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn correlated_pair(rng: &mut ChaCha8Rng, n: usize, rho: f64) -> (Tensor, Tensor) {
        let mut x = Vec::with_capacity(n);
        let mut y = Vec::with_capacity(n);
        for _ in 0..n {
            let a: f64 = rng.sample(StandardNormal);
            let b: f64 = rng.sample(StandardNormal);
            x.push(a);
            y.push(rho * a + (1.0 - rho * rho).sqrt() * b);
        }
        (Tensor::new(&[n, 1], x), Tensor::new(&[n, 1], y))
    }

    #[test]
    fn independent_streams_have_near_zero_mi() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (x, y) = correlated_pair(&mut rng, 10_000, 0.0);
        let mi = mi_estimate(&x, &y, 1e-6).unwrap();
        assert!(mi.nats < 0.05, "nats = {}", mi.nats);
        assert_eq!(mi.ridge_used, 0.0);
    }

    #[test]
    fn correlated_streams_match_closed_form() {
        // bivariate normal: MI = -0.5 ln(1 - rho^2)
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for rho in [0.5, 0.8] {
            let (x, y) = correlated_pair(&mut rng, 10_000, rho);
            let want = -0.5 * (1.0 - rho * rho).ln();
            let got = mi_estimate(&x, &y, 1e-6).unwrap().nats;
            assert!((got - want).abs() < 0.05, "rho {rho}: got {got}, want {want}");
        }
    }

    #[test]
    fn identical_streams_are_capped_finite_via_ridge() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (x, _) = correlated_pair(&mut rng, 500, 0.0);
        let mi = mi_estimate(&x, &x, 1e-6).unwrap();
        assert!(mi.nats.is_finite());
        assert!(mi.ridge_used > 0.0);
        assert!(mi.nats > 3.0, "perfect dependence should read large, got {}", mi.nats);
    }

    #[test]
    fn row_mismatch_rejected() {
        let x = Tensor::new(&[3, 1], vec![0.0, 1.0, 2.0]);
        let y = Tensor::new(&[2, 1], vec![0.0, 1.0]);
        assert_eq!(mi_estimate(&x, &y, 1e-6).unwrap_err(), MiError::RowMismatch { x: 3, y: 2 });
    }

    #[test]
    fn score_matches_direct_formula_on_stationary_series() {
        // Constant-correlation series: every window sees the same
        // distribution, so D should approach the closed-form
        // sum_t gamma^t / MI(rho) computed independently here.
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let rho = 0.8;
        let n = 4000;
        let (x, y) = correlated_pair(&mut rng, n, rho);
        let cfg = DisentanglementConfig { window: 1024, gamma: 0.9, ..Default::default() };
        let horizon = 10;
        let report = disentanglement_score(&x, &y, horizon, &cfg).unwrap();
        let mi_true = -0.5 * (1.0f64 - rho * rho).ln();
        let mut want = 0.0;
        for t in 0..=horizon {
            want += cfg.gamma.powi(t as i32) / mi_true;
        }
        let rel = (report.score - want).abs() / want;
        assert!(rel < 0.15, "score {} vs closed form {want}", report.score);
        assert_eq!(report.mi_per_step.len(), horizon + 1);
    }

    #[test]
    fn more_entangled_streams_score_lower() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (x1, y1) = correlated_pair(&mut rng, 2000, 0.1);
        let (x2, y2) = correlated_pair(&mut rng, 2000, 0.9);
        let cfg = DisentanglementConfig::default();
        let loose = disentanglement_score(&x1, &y1, 20, &cfg).unwrap().score;
        let tight = disentanglement_score(&x2, &y2, 20, &cfg).unwrap().score;
        assert!(loose > tight, "loose {loose} tight {tight}");
    }

    #[test]
    fn mi_floor_caps_independent_series_score() {
        // Near-zero MI inverts to at most 1/mi_floor per step.
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (x, y) = correlated_pair(&mut rng, 3000, 0.0);
        let cfg = DisentanglementConfig { gamma: 1.0, ..Default::default() };
        let report = disentanglement_score(&x, &y, 5, &cfg).unwrap();
        assert!(report.score <= 6.0 / cfg.mi_floor + 1e-9);
    }

    #[test]
    fn short_series_rejected() {
        let x = Tensor::new(&[3, 1], vec![0.0, 1.0, 2.0]);
        let err = disentanglement_score(&x, &x, 5, &DisentanglementConfig::default()).unwrap_err();
        assert_eq!(err, MiError::ShortSeries { rows: 3, horizon: 5 });
    }
}
