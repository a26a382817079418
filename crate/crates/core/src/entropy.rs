//! Differential-entropy estimators (nats) for sample ensembles, with a jackknife
//! standard-error proxy.

use std::collections::BinaryHeap;
use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::{digamma, ln_gamma};

use crate::error::{invalid, Error, Result};
use crate::gmm::log_sum_exp;

const DISTANCE_FLOOR: f64 = 1e-12;
const JACKKNIFE_GROUPS: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EstimatorKind {
    Spacing1d,
    Knn,
    KdeMc,
    GaussianAnalytic,
}

impl EstimatorKind {
    pub fn name(self) -> &'static str {
        match self {
            EstimatorKind::Spacing1d => "spacing-1d",
            EstimatorKind::Knn => "knn",
            EstimatorKind::KdeMc => "kde-mc",
            EstimatorKind::GaussianAnalytic => "gaussian-analytic",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntropyEstimate {
    pub value: f64,
    pub estimator: EstimatorKind,
    pub n: usize,
    /// Delete-a-group jackknife standard error over 10 contiguous blocks.
    pub stderr_proxy: f64,
    /// Set when zero spacings or coincident points hit the distance floor.
    pub floored: bool,
}

impl EntropyEstimate {
    /// `sqrt(se_a^2 + se_b^2)`.
    pub fn combined_stderr(&self, other: &EntropyEstimate) -> f64 {
        self.stderr_proxy.hypot(other.stderr_proxy)
    }
}

/// Order-statistic correction in the spacing estimator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SpacingVariant {
    #[default]
    Vasicek,
    /// Boundary-weighted variant with reduced bias for small `n`.
    Ebrahimi,
}

/// Kernel bandwidth for the KDE estimator.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Bandwidth {
    /// `n^{-1/(d+4)}` times the per-dimension sample standard deviation.
    #[default]
    Scott,
    Fixed(f64),
}

/// Estimator choice used by the harness.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum EntropyMethod {
    Spacing {
        #[serde(default)]
        variant: SpacingVariant,
        #[serde(default)]
        window: Option<usize>,
    },
    Knn {
        #[serde(default = "default_k")]
        k: usize,
    },
    KdeMc {
        #[serde(default)]
        bandwidth: Bandwidth,
    },
}

fn default_k() -> usize {
    3
}

impl Default for EntropyMethod {
    fn default() -> Self {
        EntropyMethod::Spacing {
            variant: SpacingVariant::Vasicek,
            window: None,
        }
    }
}

impl EntropyMethod {
    pub fn estimate(&self, samples: &[DVector<f64>]) -> Result<EntropyEstimate> {
        match *self {
            EntropyMethod::Spacing { variant, window } => {
                if samples.iter().any(|s| s.len() != 1) {
                    return Err(invalid("spacing_entropy_1d", "samples must be one-dimensional"));
                }
                let xs: Vec<f64> = samples.iter().map(|s| s[0]).collect();
                spacing_entropy_1d(&xs, window, variant)
            }
            EntropyMethod::Knn { k } => knn_entropy(samples, k),
            EntropyMethod::KdeMc { bandwidth } => kde_mc_entropy(samples, bandwidth),
        }
    }
}

/// Default spacing window `round(sqrt(n))`.
pub fn default_window(n: usize) -> usize {
    ((n as f64).sqrt() + 0.5).floor() as usize
}

fn check_finite(op: &'static str, xs: impl IntoIterator<Item = f64>) -> Result<()> {
    if xs.into_iter().all(f64::is_finite) {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

/// Delete-a-group jackknife; infinite when a sub-sample falls below the estimator minimum.
fn jackknife<T: Clone>(samples: &[T], estimate: impl Fn(&[T]) -> Result<f64>) -> f64 {
    let n = samples.len();
    let g = JACKKNIFE_GROUPS.min(n);
    let mut values = Vec::with_capacity(g);
    let mut buf = Vec::with_capacity(n);
    for j in 0..g {
        let (lo, hi) = (j * n / g, (j + 1) * n / g);
        buf.clear();
        buf.extend_from_slice(&samples[..lo]);
        buf.extend_from_slice(&samples[hi..]);
        match estimate(&buf) {
            Ok(v) if v.is_finite() => values.push(v),
            _ => return f64::INFINITY,
        }
    }
    let mean = values.iter().sum::<f64>() / g as f64;
    let ss: f64 = values.iter().map(|v| (v - mean).powi(2)).sum();
    ((g as f64 - 1.0) / g as f64 * ss).sqrt()
}

fn spacing_value(xs: &[f64], window: Option<usize>, variant: SpacingVariant) -> Result<(f64, bool)> {
    let n = xs.len();
    if n < 10 {
        return Err(invalid("spacing_entropy_1d", format!("need n >= 10, got {n}")));
    }
    let m = window.unwrap_or_else(|| default_window(n));
    if m == 0 || n < 2 * m + 1 {
        return Err(invalid(
            "spacing_entropy_1d",
            format!("window m = {m} requires 1 <= m and n >= 2m + 1 (n = {n})"),
        ));
    }
    let mut sorted = xs.to_vec();
    sorted.sort_by(f64::total_cmp);
    let nf = n as f64;
    let mf = m as f64;
    let mut floored = false;
    let mut acc = 0.0;
    for i in 0..n {
        let hi = sorted[(i + m).min(n - 1)];
        let lo = sorted[i.saturating_sub(m)];
        let mut spacing = hi - lo;
        if spacing < DISTANCE_FLOOR {
            spacing = DISTANCE_FLOOR;
            floored = true;
        }
        // 1-based rank i + 1
        let weight = match variant {
            SpacingVariant::Vasicek => 2.0,
            SpacingVariant::Ebrahimi => {
                if i < m {
                    1.0 + i as f64 / mf
                } else if i >= n - m {
                    1.0 + (n - 1 - i) as f64 / mf
                } else {
                    2.0
                }
            }
        };
        acc += (nf / (weight * mf) * spacing).ln();
    }
    Ok((acc / nf, floored))
}

/// m-spacing estimator of a scalar sample; `window` defaults to `round(sqrt(n))`.
pub fn spacing_entropy_1d(
    samples: &[f64],
    window: Option<usize>,
    variant: SpacingVariant,
) -> Result<EntropyEstimate> {
    check_finite("spacing_entropy_1d", samples.iter().copied())?;
    let (value, floored) = spacing_value(samples, window, variant)?;
    // The window is rescaled with the sub-sample size unless fixed by the caller.
    let stderr_proxy = jackknife(samples, |s| spacing_value(s, window, variant).map(|r| r.0));
    Ok(EntropyEstimate {
        value,
        estimator: EstimatorKind::Spacing1d,
        n: samples.len(),
        stderr_proxy,
        floored,
    })
}

fn unit_ball_log_volume(d: usize) -> f64 {
    let h = d as f64 / 2.0;
    h * PI.ln() - ln_gamma(h + 1.0)
}

fn check_points(op: &'static str, samples: &[DVector<f64>]) -> Result<usize> {
    let d = samples
        .first()
        .map(|s| s.len())
        .ok_or_else(|| invalid(op, "empty sample"))?;
    if d == 0 || samples.iter().any(|s| s.len() != d) {
        return Err(invalid(op, "samples must share a positive dimension"));
    }
    check_finite(op, samples.iter().flat_map(|s| s.iter().copied()))?;
    Ok(d)
}

#[derive(PartialEq)]
struct MaxDist(f64);

impl Eq for MaxDist {}

impl PartialOrd for MaxDist {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for MaxDist {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.0.total_cmp(&other.0)
    }
}

/// Squared distance to the k-th nearest neighbour of every point.
///
/// Points are swept in order of their first coordinate; the sweep in each direction
/// stops once the first-coordinate gap alone exceeds the current k-th distance.
fn kth_neighbour_sq(points: &[DVector<f64>], k: usize) -> Vec<f64> {
    let n = points.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| points[a][0].total_cmp(&points[b][0]));
    let keys: Vec<f64> = order.iter().map(|&i| points[i][0]).collect();
    let sq = |a: &DVector<f64>, b: &DVector<f64>| -> f64 {
        a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
    };
    let mut out = vec![0.0; n];
    let mut heap: BinaryHeap<MaxDist> = BinaryHeap::with_capacity(k + 1);
    for (pos, &i) in order.iter().enumerate() {
        heap.clear();
        let p = &points[i];
        let consider = |j: usize, heap: &mut BinaryHeap<MaxDist>| {
            let d2 = sq(p, &points[order[j]]);
            if heap.len() < k {
                heap.push(MaxDist(d2));
            } else if d2 < heap.peek().map_or(f64::INFINITY, |m| m.0) {
                heap.pop();
                heap.push(MaxDist(d2));
            }
        };
        let (mut left, mut right) = (pos, pos + 1);
        loop {
            let bound = if heap.len() < k {
                f64::INFINITY
            } else {
                heap.peek().map_or(f64::INFINITY, |m| m.0)
            };
            let gap_left = (left > 0).then(|| (keys[pos] - keys[left - 1]).powi(2));
            let gap_right = (right < n).then(|| (keys[right] - keys[pos]).powi(2));
            let go_left = match (gap_left, gap_right) {
                (None, None) => break,
                (Some(l), Some(r)) => l <= r,
                (Some(_), None) => true,
                (None, Some(_)) => false,
            };
            let gap = if go_left { gap_left } else { gap_right }.unwrap_or(f64::INFINITY);
            if gap > bound {
                break;
            }
            if go_left {
                left -= 1;
                consider(left, &mut heap);
            } else {
                consider(right, &mut heap);
                right += 1;
            }
        }
        out[i] = heap.peek().map_or(f64::INFINITY, |m| m.0);
    }
    out
}

fn knn_value(samples: &[DVector<f64>], k: usize) -> Result<(f64, bool)> {
    let n = samples.len();
    if k == 0 || n <= k {
        return Err(invalid("knn_entropy", format!("need n > k >= 1 (n = {n}, k = {k})")));
    }
    let d = samples[0].len();
    let mut floored = false;
    let mut log_sum = 0.0;
    for r2 in kth_neighbour_sq(samples, k) {
        let mut r = r2.sqrt();
        if r < DISTANCE_FLOOR {
            r = DISTANCE_FLOOR;
            floored = true;
        }
        log_sum += r.ln();
    }
    let nf = n as f64;
    let value = digamma(nf) - digamma(k as f64) + unit_ball_log_volume(d) + d as f64 / nf * log_sum;
    Ok((value, floored))
}

/// Kozachenko-Leonenko k-nearest-neighbour estimator.
pub fn knn_entropy(samples: &[DVector<f64>], k: usize) -> Result<EntropyEstimate> {
    check_points("knn_entropy", samples)?;
    let (value, floored) = knn_value(samples, k)?;
    let stderr_proxy = jackknife(samples, |s| knn_value(s, k).map(|r| r.0));
    Ok(EntropyEstimate {
        value,
        estimator: EstimatorKind::Knn,
        n: samples.len(),
        stderr_proxy,
        floored,
    })
}

/// Product Gaussian kernel density estimate.
#[derive(Debug, Clone)]
pub struct GaussianKde {
    centers: Vec<DVector<f64>>,
    inv_widths: Vec<f64>,
    log_norm: f64,
}

impl GaussianKde {
    pub fn fit(samples: &[DVector<f64>], bandwidth: Bandwidth) -> Result<Self> {
        let d = check_points("gaussian_kde", samples)?;
        let n = samples.len() as f64;
        let widths: Vec<f64> = match bandwidth {
            Bandwidth::Fixed(h) => vec![h; d],
            Bandwidth::Scott => {
                if samples.len() < 2 {
                    return Err(invalid("gaussian_kde", "the bandwidth rule needs two samples"));
                }
                let factor = n.powf(-1.0 / (d as f64 + 4.0));
                (0..d)
                    .map(|j| {
                        let mean = samples.iter().map(|x| x[j]).sum::<f64>() / n;
                        let var = samples.iter().map(|x| (x[j] - mean).powi(2)).sum::<f64>() / (n - 1.0);
                        factor * var.sqrt()
                    })
                    .collect()
            }
        };
        if widths.iter().any(|h| !h.is_finite() || *h <= 0.0) {
            return Err(invalid("gaussian_kde", "degenerate (zero) bandwidth"));
        }
        let log_norm = -n.ln()
            - widths.iter().map(|h| h.ln()).sum::<f64>()
            - 0.5 * d as f64 * (2.0 * PI).ln();
        Ok(GaussianKde {
            centers: samples.to_vec(),
            inv_widths: widths.iter().map(|h| 1.0 / h).collect(),
            log_norm,
        })
    }

    pub fn dim(&self) -> usize {
        self.inv_widths.len()
    }

    pub fn bandwidths(&self) -> Vec<f64> {
        self.inv_widths.iter().map(|v| 1.0 / v).collect()
    }

    pub fn log_density(&self, x: &DVector<f64>) -> f64 {
        let mut terms = Vec::with_capacity(self.centers.len());
        self.log_density_with(x, &mut terms)
    }

    fn log_density_with(&self, x: &DVector<f64>, terms: &mut Vec<f64>) -> f64 {
        terms.clear();
        terms.extend(self.centers.iter().map(|c| {
            let mut q = 0.0;
            for (j, inv) in self.inv_widths.iter().enumerate() {
                let z = (x[j] - c[j]) * inv;
                q += z * z;
            }
            -0.5 * q
        }));
        log_sum_exp(terms) + self.log_norm
    }
}

fn kde_value(samples: &[DVector<f64>], bandwidth: Bandwidth) -> Result<f64> {
    let n = samples.len();
    if n < 20 {
        return Err(invalid("kde_mc_entropy", format!("need n >= 20, got {n}")));
    }
    let fit: Vec<DVector<f64>> = samples.iter().step_by(2).cloned().collect();
    let kde = GaussianKde::fit(&fit, bandwidth).map_err(|_| invalid("kde_mc_entropy", "degenerate (zero) bandwidth"))?;
    let mut terms = Vec::with_capacity(fit.len());
    let held: Vec<&DVector<f64>> = samples.iter().skip(1).step_by(2).collect();
    let acc: f64 = held.iter().map(|x| kde.log_density_with(x, &mut terms)).sum();
    Ok(-acc / held.len() as f64)
}

/// Gaussian-kernel density fitted on even-indexed samples, `-log p` averaged over the
/// odd-indexed ones.
pub fn kde_mc_entropy(samples: &[DVector<f64>], bandwidth: Bandwidth) -> Result<EntropyEstimate> {
    check_points("kde_mc_entropy", samples)?;
    let value = kde_value(samples, bandwidth)?;
    let stderr_proxy = jackknife(samples, |s| kde_value(s, bandwidth));
    Ok(EntropyEstimate {
        value,
        estimator: EstimatorKind::KdeMc,
        n: samples.len(),
        stderr_proxy,
        floored: false,
    })
}

/// `1/2 ln((2 pi e)^d det cov)`.
pub fn gaussian_entropy(cov: &DMatrix<f64>) -> Result<f64> {
    let d = cov.nrows();
    if d == 0 || cov.ncols() != d {
        return Err(invalid("gaussian_entropy", "covariance must be square and non-empty"));
    }
    check_finite("gaussian_entropy", cov.iter().copied())?;
    let chol = cov
        .clone()
        .cholesky()
        .ok_or_else(|| invalid("gaussian_entropy", "covariance is not positive definite"))?;
    let log_det = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    Ok(0.5 * (d as f64 * (2.0 * PI * std::f64::consts::E).ln() + log_det))
}
