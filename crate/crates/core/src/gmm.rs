//! Gaussian mixture target and its closed-form diffusion functionals.
//!
//! The target is `p* = sum_y w_y N(mu_y, Sigma)` with a shared covariance. Under the
//! Ornstein-Uhlenbeck forward process `dz = -z dt + sqrt(2) dB`, component `y` at time
//! `t` is `N(e^{-t} mu_y, Sigma_t)` with `Sigma_t = e^{-2t} Sigma + (1 - e^{-2t}) I`, so
//! every score, posterior and guidance field below is exact.
//!
//! `Sigma` is diagonalised once at construction (`Sigma = Q diag(lambda) Q^T`). Then
//! `Sigma_t = Q diag(e^{-2t} lambda + 1 - e^{-2t}) Q^T` for every `t`, and all solves
//! reduce to elementwise scaling in the eigenbasis. No per-time state is cached, so a
//! model can be shared freely across threads.

use std::borrow::Cow;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const SYMMETRY_TOL: f64 = 1e-12;
const WEIGHT_TOL: f64 = 1e-12;

/// Which reverse-time sampler a drift belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sampler {
    /// Deterministic probability-flow ODE.
    Ddim,
    /// Reverse SDE with `sqrt(2) dB` diffusion.
    Ddpm,
}

impl Sampler {
    /// Multiplier on the score and guidance terms (1 for the ODE, 2 for the SDE).
    pub fn score_factor(self) -> f64 {
        match self {
            Sampler::Ddim => 1.0,
            Sampler::Ddpm => 2.0,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Sampler::Ddim => "ddim",
            Sampler::Ddpm => "ddpm",
        }
    }
}

/// Guided drift evaluated at one state and backward time.
#[derive(Debug, Clone)]
pub struct DriftEval {
    pub drift: DVector<f64>,
    /// `q_tau(x, .)`.
    pub posterior: Vec<f64>,
    /// The part of `drift` proportional to the guidance strength.
    pub guidance_term: DVector<f64>,
}

/// Outcome of checking the separation/isotropy assumption for a guided label.
#[derive(Debug, Clone, Serialize)]
pub struct Assumption1Report {
    pub center: Vec<f64>,
    pub epsilon: f64,
    /// `max_{y' != y} |<mu_y - mu0, mu_y' - mu0>|`.
    pub max_cross_inner: f64,
    /// `||mu_y - mu0||^2`.
    pub guided_sq_dist: f64,
    /// Cross-inner clause with `y' = y` excluded (the interpretation used for `satisfied`).
    pub cross_bound: bool,
    /// Cross-inner clause with `y' = y` included; forces `||mu_y - mu0||^2 <= epsilon`.
    pub cross_bound_including_self: bool,
    /// `epsilon <= ||mu_y - mu0||^2 / 3` and `||mu_y - mu0|| > 0`.
    pub epsilon_bound: bool,
    pub positive_weights: bool,
    pub isotropic: bool,
    pub satisfied: bool,
}

#[derive(Debug, Clone)]
struct Spectrum {
    /// `None` when `Sigma` is exactly the identity.
    basis: Option<DMatrix<f64>>,
    eigenvalues: Vec<f64>,
    /// `Q^T mu_y`, row-major `|Y| x d`.
    rotated_means: Vec<f64>,
}

/// Gaussian mixture with shared covariance.
#[derive(Debug, Clone)]
pub struct MixtureModel {
    weights: Vec<f64>,
    log_weights: Vec<f64>,
    means: Vec<DVector<f64>>,
    covariance: DMatrix<f64>,
    spectrum: Spectrum,
}

/// Per-time quantities in the eigenbasis of `Sigma`.
pub(crate) struct TimeSlice<'a> {
    decay: f64,
    inv: Vec<f64>,
    /// `Sigma_t^{-1} mu_y` in the eigenbasis.
    proj: Cow<'a, [f64]>,
    /// `ln w_y - e^{-2t} <mu_y, Sigma_t^{-1} mu_y> / 2`.
    offsets: Vec<f64>,
}

/// Reusable buffers for allocation-free drift evaluation.
#[derive(Debug, Clone)]
pub(crate) struct Workspace {
    rot: Vec<f64>,
    out_rot: Vec<f64>,
    mix: Vec<f64>,
    pub(crate) q: Vec<f64>,
}

impl Workspace {
    pub(crate) fn new(model: &MixtureModel) -> Self {
        let d = model.dim();
        Workspace {
            rot: vec![0.0; d],
            out_rot: vec![0.0; d],
            mix: vec![0.0; d],
            q: vec![0.0; model.num_components()],
        }
    }
}

fn check_finite_vec(op: &'static str, x: &DVector<f64>) -> Result<()> {
    if x.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

fn check_time(op: &'static str, t: f64) -> Result<()> {
    if !t.is_finite() {
        return Err(Error::NonFinite { op });
    }
    if t < 0.0 {
        return Err(crate::error::invalid(op, format!("time must be >= 0, got {t}")));
    }
    Ok(())
}

/// In-place softmax with max shift. Returns the log normaliser.
pub(crate) fn softmax_in_place(logits: &mut [f64]) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for l in logits.iter_mut() {
        *l = (*l - max).exp();
        total += *l;
    }
    for l in logits.iter_mut() {
        *l /= total;
    }
    max + total.ln()
}

/// `ln sum exp(values)` with max shift.
pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

impl MixtureModel {
    /// Builds a model, validating weights, dimensions and positive definiteness.
    pub fn new(weights: Vec<f64>, means: Vec<DVector<f64>>, covariance: DMatrix<f64>) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::InvalidModel("at least one component is required".into()));
        }
        if weights.len() != means.len() {
            return Err(Error::InvalidModel(format!(
                "{} weights but {} means",
                weights.len(),
                means.len()
            )));
        }
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::InvalidModel("weights must be finite and non-negative".into()));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > WEIGHT_TOL {
            return Err(Error::InvalidModel(format!("weights sum to {total}, expected 1")));
        }
        let d = covariance.nrows();
        if d == 0 || covariance.ncols() != d {
            return Err(Error::InvalidModel("covariance must be a non-empty square matrix".into()));
        }
        if let Some((i, m)) = means.iter().enumerate().find(|(_, m)| m.len() != d) {
            return Err(Error::InvalidModel(format!(
                "mean {i} has length {}, expected {d}",
                m.len()
            )));
        }
        if means.iter().any(|m| m.iter().any(|v| !v.is_finite()))
            || covariance.iter().any(|v| !v.is_finite())
        {
            return Err(Error::InvalidModel("non-finite mean or covariance entry".into()));
        }
        for i in 0..d {
            for j in 0..i {
                if (covariance[(i, j)] - covariance[(j, i)]).abs() > SYMMETRY_TOL {
                    return Err(Error::InvalidModel(format!(
                        "covariance not symmetric at ({i}, {j})"
                    )));
                }
            }
        }

        let identity = DMatrix::<f64>::identity(d, d);
        let spectrum = if covariance == identity {
            let mut rotated = Vec::with_capacity(means.len() * d);
            for m in &means {
                rotated.extend(m.iter());
            }
            Spectrum {
                basis: None,
                eigenvalues: vec![1.0; d],
                rotated_means: rotated,
            }
        } else {
            let sym = (&covariance + covariance.transpose()) * 0.5;
            let eig = SymmetricEigen::new(sym);
            let min = eig.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min);
            if min <= 0.0 {
                return Err(Error::InvalidModel(format!(
                    "covariance is not positive definite (smallest eigenvalue {min:e})"
                )));
            }
            let q = eig.eigenvectors;
            let mut rotated = Vec::with_capacity(means.len() * d);
            for m in &means {
                rotated.extend((q.transpose() * m).iter());
            }
            Spectrum {
                basis: Some(q),
                eigenvalues: eig.eigenvalues.iter().copied().collect(),
                rotated_means: rotated,
            }
        };

        let log_weights = weights.iter().map(|w| w.ln()).collect();
        Ok(MixtureModel {
            weights,
            log_weights,
            means,
            covariance,
            spectrum,
        })
    }

    /// Mixture with identity covariance.
    pub fn isotropic(weights: Vec<f64>, means: Vec<DVector<f64>>) -> Result<Self> {
        let d = means.first().map(|m| m.len()).unwrap_or(0);
        Self::new(weights, means, DMatrix::identity(d, d))
    }

    /// `1/2 N(1, 1) + 1/2 N(-1, 1)`; label 0 is the `+1` component.
    pub fn symmetric_1d() -> Self {
        Self::isotropic(
            vec![0.5, 0.5],
            vec![DVector::from_element(1, 1.0), DVector::from_element(1, -1.0)],
        )
        .expect("valid model")
    }

    /// Three equal-weight unit-variance components centred on an equilateral triangle.
    pub fn equidistant_three() -> Self {
        let h = 3f64.sqrt() / 2.0;
        Self::isotropic(
            vec![1.0 / 3.0; 3],
            vec![
                DVector::from_vec(vec![h, 0.5]),
                DVector::from_vec(vec![-h, 0.5]),
                DVector::from_vec(vec![0.0, -1.0]),
            ],
        )
        .expect("valid model")
    }

    /// Aligned model `N(-mu, I)/3 + N(0, I)/3 + N(mu, I)/3`; label 1 is the centre.
    pub fn aligned_three(mu: DVector<f64>) -> Result<Self> {
        if mu.iter().all(|v| *v == 0.0) {
            return Err(Error::InvalidModel("aligned model needs a non-zero side mean".into()));
        }
        let d = mu.len();
        Self::isotropic(vec![1.0 / 3.0; 3], vec![-mu.clone(), DVector::zeros(d), mu])
    }

    /// Equal-weight model whose means are the first `k` standard basis vectors of `R^d`.
    pub fn orthonormal(d: usize, k: usize) -> Result<Self> {
        if k == 0 || k > d {
            return Err(Error::InvalidModel(format!("need 1 <= k <= d, got k = {k}, d = {d}")));
        }
        let means = (0..k)
            .map(|i| {
                let mut v = DVector::zeros(d);
                v[i] = 1.0;
                v
            })
            .collect();
        Self::isotropic(vec![1.0 / k as f64; k], means)
    }

    pub fn dim(&self) -> usize {
        self.covariance.nrows()
    }

    pub fn num_components(&self) -> usize {
        self.weights.len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn means(&self) -> &[DVector<f64>] {
        &self.means
    }

    pub fn covariance(&self) -> &DMatrix<f64> {
        &self.covariance
    }

    /// Smallest eigenvalue of `Sigma`.
    pub fn sigma_min(&self) -> f64 {
        self.spectrum
            .eigenvalues
            .iter()
            .copied()
            .fold(f64::INFINITY, f64::min)
    }

    pub fn is_identity_covariance(&self) -> bool {
        self.spectrum.basis.is_none()
    }

    pub(crate) fn check_label(&self, y: usize) -> Result<()> {
        if y < self.num_components() {
            Ok(())
        } else {
            Err(Error::LabelOutOfRange {
                label: y,
                components: self.num_components(),
            })
        }
    }

    fn check_state(&self, op: &'static str, x: &DVector<f64>) -> Result<()> {
        if x.len() != self.dim() {
            return Err(crate::error::invalid(
                op,
                format!("state has length {}, model dimension is {}", x.len(), self.dim()),
            ));
        }
        check_finite_vec(op, x)
    }

    fn rotated_mean(&self, y: usize) -> &[f64] {
        let d = self.dim();
        &self.spectrum.rotated_means[y * d..(y + 1) * d]
    }

    pub(crate) fn to_eigen(&self, x: &[f64], out: &mut [f64]) {
        match &self.spectrum.basis {
            None => out.copy_from_slice(x),
            Some(q) => {
                let d = self.dim();
                for (j, o) in out.iter_mut().enumerate() {
                    let col = q.column(j);
                    let mut acc = 0.0;
                    for i in 0..d {
                        acc += col[i] * x[i];
                    }
                    *o = acc;
                }
            }
        }
    }

    pub(crate) fn back_from_eigen(&self, x: &[f64], out: &mut [f64]) {
        match &self.spectrum.basis {
            None => out.copy_from_slice(x),
            Some(q) => {
                out.iter_mut().for_each(|o| *o = 0.0);
                for (j, xj) in x.iter().enumerate() {
                    let col = q.column(j);
                    for (i, o) in out.iter_mut().enumerate() {
                        *o += col[i] * xj;
                    }
                }
            }
        }
    }

    fn rotate_vec(&self, x: &DVector<f64>) -> Vec<f64> {
        let mut out = vec![0.0; self.dim()];
        self.to_eigen(x.as_slice(), &mut out);
        out
    }

    fn unrotate_vec(&self, x: &[f64]) -> DVector<f64> {
        let mut out = DVector::zeros(self.dim());
        self.back_from_eigen(x, out.as_mut_slice());
        out
    }

    pub(crate) fn time_slice(&self, t: f64) -> TimeSlice<'_> {
        let d = self.dim();
        let decay = (-t).exp();
        let decay_sq = decay * decay;
        let inv: Vec<f64> = self
            .spectrum
            .eigenvalues
            .iter()
            .map(|l| 1.0 / (decay_sq * l + (1.0 - decay_sq)))
            .collect();
        let proj: Cow<'_, [f64]> = if self.spectrum.basis.is_none() {
            Cow::Borrowed(&self.spectrum.rotated_means)
        } else {
            Cow::Owned(
                self.spectrum
                    .rotated_means
                    .chunks(d)
                    .flat_map(|m| m.iter().zip(&inv).map(|(a, b)| a * b))
                    .collect(),
            )
        };
        let offsets = (0..self.num_components())
            .map(|y| {
                let quad: f64 = self
                    .rotated_mean(y)
                    .iter()
                    .zip(&proj[y * d..(y + 1) * d])
                    .map(|(a, b)| a * b)
                    .sum();
                self.log_weights[y] - 0.5 * decay_sq * quad
            })
            .collect();
        TimeSlice {
            decay,
            inv,
            proj,
            offsets,
        }
    }

    /// Posterior over labels for a state already in the eigenbasis; writes into `q`.
    fn posterior_rotated(&self, slice: &TimeSlice<'_>, x_rot: &[f64], q: &mut [f64]) {
        let d = self.dim();
        for (y, qy) in q.iter_mut().enumerate() {
            let proj = &slice.proj[y * d..(y + 1) * d];
            let dot: f64 = proj.iter().zip(x_rot).map(|(a, b)| a * b).sum();
            *qy = slice.offsets[y] + slice.decay * dot;
        }
        softmax_in_place(q);
    }

    /// Allocation-free guided drift. `x` and `out` are in the original coordinates.
    /// After the call `ws.q` holds the posterior at `tau`.
    #[allow(clippy::too_many_arguments, clippy::needless_range_loop)]
    pub(crate) fn drift_into(
        &self,
        x: &[f64],
        y: usize,
        eta: f64,
        tau: f64,
        sampler: Sampler,
        out: &mut [f64],
        ws: &mut Workspace,
    ) {
        let d = self.dim();
        let slice = self.time_slice(tau);
        self.to_eigen(x, &mut ws.rot);
        self.posterior_rotated(&slice, &ws.rot, &mut ws.q);
        let factor = sampler.score_factor();

        ws.mix.iter_mut().for_each(|m| *m = 0.0);
        for (yp, qy) in ws.q.iter().enumerate() {
            let proj = &slice.proj[yp * d..(yp + 1) * d];
            for (m, p) in ws.mix.iter_mut().zip(proj) {
                *m += qy * p;
            }
        }
        let proj_y = &slice.proj[y * d..(y + 1) * d];
        let a = factor * slice.decay * (1.0 + eta);
        let b = factor * slice.decay * eta;
        for i in 0..d {
            ws.out_rot[i] =
                ws.rot[i] - factor * slice.inv[i] * ws.rot[i] + a * proj_y[i] - b * ws.mix[i];
        }
        self.back_from_eigen(&ws.out_rot, out);
    }

    /// `Sigma_t = e^{-2t} Sigma + (1 - e^{-2t}) I`.
    pub fn sigma_t(&self, t: f64) -> Result<DMatrix<f64>> {
        check_time("sigma_t", t)?;
        let decay_sq = (-2.0 * t).exp();
        let d = self.dim();
        Ok(&self.covariance * decay_sq + DMatrix::identity(d, d) * (1.0 - decay_sq))
    }

    /// Label posterior `q_t(x, .)`, computed with log-sum-exp.
    pub fn posterior(&self, x: &DVector<f64>, t: f64) -> Result<Vec<f64>> {
        self.check_state("posterior", x)?;
        check_time("posterior", t)?;
        let slice = self.time_slice(t);
        let rot = self.rotate_vec(x);
        let mut q = vec![0.0; self.num_components()];
        self.posterior_rotated(&slice, &rot, &mut q);
        Ok(q)
    }

    /// Log of the posterior, computed without exponentiating the logits.
    pub fn log_posterior(&self, x: &DVector<f64>, t: f64) -> Result<Vec<f64>> {
        self.check_state("log_posterior", x)?;
        check_time("log_posterior", t)?;
        let slice = self.time_slice(t);
        let rot = self.rotate_vec(x);
        let d = self.dim();
        let logits: Vec<f64> = (0..self.num_components())
            .map(|y| {
                let dot: f64 = slice.proj[y * d..(y + 1) * d]
                    .iter()
                    .zip(&rot)
                    .map(|(a, b)| a * b)
                    .sum();
                slice.offsets[y] + slice.decay * dot
            })
            .collect();
        let norm = log_sum_exp(&logits);
        Ok(logits.into_iter().map(|l| l - norm).collect())
    }

    /// `grad_x log p_t(x | y) = -Sigma_t^{-1} x + e^{-t} Sigma_t^{-1} mu_y`.
    pub fn conditional_score(&self, x: &DVector<f64>, y: usize, t: f64) -> Result<DVector<f64>> {
        self.check_label(y)?;
        self.check_state("conditional_score", x)?;
        check_time("conditional_score", t)?;
        let slice = self.time_slice(t);
        let rot = self.rotate_vec(x);
        let d = self.dim();
        let proj = &slice.proj[y * d..(y + 1) * d];
        let s: Vec<f64> = (0..d)
            .map(|i| -slice.inv[i] * rot[i] + slice.decay * proj[i])
            .collect();
        Ok(self.unrotate_vec(&s))
    }

    /// `grad_x log q_t(x, y) = e^{-t} Sigma_t^{-1} (mu_y - sum_y' q_t(x, y') mu_y')`.
    pub fn classifier_gradient(&self, x: &DVector<f64>, y: usize, t: f64) -> Result<DVector<f64>> {
        self.check_label(y)?;
        self.check_state("classifier_gradient", x)?;
        check_time("classifier_gradient", t)?;
        let slice = self.time_slice(t);
        let rot = self.rotate_vec(x);
        let d = self.dim();
        let mut q = vec![0.0; self.num_components()];
        self.posterior_rotated(&slice, &rot, &mut q);
        let mut g: Vec<f64> = slice.proj[y * d..(y + 1) * d].to_vec();
        for (yp, qy) in q.iter().enumerate() {
            for (gi, p) in g.iter_mut().zip(&slice.proj[yp * d..(yp + 1) * d]) {
                *gi -= qy * p;
            }
        }
        g.iter_mut().for_each(|v| *v *= slice.decay);
        Ok(self.unrotate_vec(&g))
    }

    /// `grad_x log p_t(x)` of the full mixture.
    pub fn unconditional_score(&self, x: &DVector<f64>, t: f64) -> Result<DVector<f64>> {
        self.check_state("unconditional_score", x)?;
        check_time("unconditional_score", t)?;
        let slice = self.time_slice(t);
        let rot = self.rotate_vec(x);
        let d = self.dim();
        let mut q = vec![0.0; self.num_components()];
        self.posterior_rotated(&slice, &rot, &mut q);
        let mut s: Vec<f64> = (0..d).map(|i| -slice.inv[i] * rot[i]).collect();
        for (yp, qy) in q.iter().enumerate() {
            for (si, p) in s.iter_mut().zip(&slice.proj[yp * d..(yp + 1) * d]) {
                *si += slice.decay * qy * p;
            }
        }
        Ok(self.unrotate_vec(&s))
    }

    /// Classification confidence `q_0(x, y)`.
    pub fn confidence(&self, x: &DVector<f64>, y: usize) -> Result<f64> {
        self.check_label(y)?;
        Ok(self.posterior(x, 0.0)?[y])
    }

    /// Log density of the time-`t` marginal, or of component `y` alone when given.
    pub fn marginal_log_density(
        &self,
        x: &DVector<f64>,
        t: f64,
        conditional_on: Option<usize>,
    ) -> Result<f64> {
        self.check_state("marginal_log_density", x)?;
        check_time("marginal_log_density", t)?;
        if let Some(y) = conditional_on {
            self.check_label(y)?;
        }
        let d = self.dim();
        let slice = self.time_slice(t);
        let log_det: f64 = slice.inv.iter().map(|v| -v.ln()).sum();
        let base = -0.5 * (d as f64 * (2.0 * std::f64::consts::PI).ln() + log_det);
        let rot = self.rotate_vec(x);
        let component = |y: usize| -> f64 {
            let mean = self.rotated_mean(y);
            let quad: f64 = (0..d)
                .map(|i| {
                    let r = rot[i] - slice.decay * mean[i];
                    r * r * slice.inv[i]
                })
                .sum();
            base - 0.5 * quad
        };
        match conditional_on {
            Some(y) => Ok(component(y)),
            None => {
                let terms: Vec<f64> = (0..self.num_components())
                    .map(|y| self.log_weights[y] + component(y))
                    .collect();
                Ok(log_sum_exp(&terms))
            }
        }
    }

    /// Guided drift at backward time `tau = T - t` for either sampler.
    pub fn guided_drift(
        &self,
        x: &DVector<f64>,
        y: usize,
        eta: f64,
        tau: f64,
        sampler: Sampler,
    ) -> Result<DriftEval> {
        let op = match sampler {
            Sampler::Ddim => "guided_drift_ddim",
            Sampler::Ddpm => "guided_drift_ddpm",
        };
        self.check_label(y)?;
        self.check_state(op, x)?;
        check_time(op, tau)?;
        if !eta.is_finite() || eta < 0.0 {
            return Err(crate::error::invalid(op, format!("guidance strength must be >= 0, got {eta}")));
        }
        let mut ws = Workspace::new(self);
        let mut drift = DVector::zeros(self.dim());
        self.drift_into(x.as_slice(), y, eta, tau, sampler, drift.as_mut_slice(), &mut ws);

        let d = self.dim();
        let slice = self.time_slice(tau);
        let b = sampler.score_factor() * slice.decay * eta;
        let proj_y = &slice.proj[y * d..(y + 1) * d];
        let mut g: Vec<f64> = proj_y.iter().map(|p| b * p).collect();
        for (yp, qy) in ws.q.iter().enumerate() {
            for (gi, p) in g.iter_mut().zip(&slice.proj[yp * d..(yp + 1) * d]) {
                *gi -= b * qy * p;
            }
        }
        Ok(DriftEval {
            drift,
            posterior: ws.q,
            guidance_term: self.unrotate_vec(&g),
        })
    }

    /// DDIM drift `x + s_tau(x, y) + eta grad log q_tau(x, y)`.
    pub fn guided_drift_ddim(&self, x: &DVector<f64>, y: usize, eta: f64, tau: f64) -> Result<DriftEval> {
        self.guided_drift(x, y, eta, tau, Sampler::Ddim)
    }

    /// DDPM drift `x + 2 s_tau(x, y) + 2 eta grad log q_tau(x, y)`.
    pub fn guided_drift_ddpm(&self, x: &DVector<f64>, y: usize, eta: f64, tau: f64) -> Result<DriftEval> {
        self.guided_drift(x, y, eta, tau, Sampler::Ddpm)
    }

    /// Checks the separation assumption for label `y` around `mu0`.
    ///
    /// With `epsilon = None` the smallest admissible value (the largest cross inner
    /// product) is used.
    pub fn check_assumption1(
        &self,
        y: usize,
        mu0: &DVector<f64>,
        epsilon: Option<f64>,
    ) -> Result<Assumption1Report> {
        self.check_label(y)?;
        self.check_state("check_assumption1", mu0)?;
        let centered_y = &self.means[y] - mu0;
        let guided_sq_dist = centered_y.norm_squared();
        let max_cross_inner = self
            .means
            .iter()
            .enumerate()
            .filter(|(yp, _)| *yp != y)
            .map(|(_, m)| centered_y.dot(&(m - mu0)).abs())
            .fold(0.0, f64::max);
        let epsilon = epsilon.unwrap_or(max_cross_inner);
        if !epsilon.is_finite() || epsilon < 0.0 {
            return Err(crate::error::invalid("check_assumption1", "epsilon must be finite and >= 0"));
        }
        let cross_bound = max_cross_inner <= epsilon;
        let cross_bound_including_self = cross_bound && guided_sq_dist <= epsilon;
        let epsilon_bound = guided_sq_dist > 0.0 && epsilon <= guided_sq_dist / 3.0;
        let positive_weights = self.weights.iter().all(|w| *w > 0.0);
        let d = self.dim();
        let identity = DMatrix::<f64>::identity(d, d);
        let isotropic = (&self.covariance - identity).amax() <= SYMMETRY_TOL;
        Ok(Assumption1Report {
            center: mu0.iter().copied().collect(),
            epsilon,
            max_cross_inner,
            guided_sq_dist,
            cross_bound,
            cross_bound_including_self,
            epsilon_bound,
            positive_weights,
            isotropic,
            satisfied: cross_bound && epsilon_bound && positive_weights && isotropic,
        })
    }

    /// Returns the side mean `mu` when this is the aligned model guided to its centre.
    pub fn aligned_side_mean(&self, y: usize) -> Option<DVector<f64>> {
        if self.num_components() != 3 || !self.is_identity_covariance() {
            return None;
        }
        if self.weights.iter().any(|w| (w - 1.0 / 3.0).abs() > 1e-9) {
            return None;
        }
        if self.means[y].iter().any(|v| *v != 0.0) {
            return None;
        }
        let others: Vec<&DVector<f64>> = (0..3).filter(|i| *i != y).map(|i| &self.means[i]).collect();
        let (a, b) = (others[0], others[1]);
        if (a + b).amax() > 1e-12 || a.amax() == 0.0 {
            return None;
        }
        // orientation: the side mean with a positive leading non-zero coordinate
        let lead = a.iter().find(|v| **v != 0.0).copied().unwrap_or(0.0);
        Some(if lead > 0.0 { a.clone() } else { b.clone() })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn v(xs: &[f64]) -> DVector<f64> {
        DVector::from_vec(xs.to_vec())
    }

    fn anisotropic() -> MixtureModel {
        let cov = DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 0.5]);
        MixtureModel::new(vec![0.2, 0.5, 0.3], vec![v(&[1.0, 0.0]), v(&[-1.0, 2.0]), v(&[0.5, -1.5])], cov)
            .unwrap()
    }

    #[test]
    fn sigma_t_examples() {
        let m = anisotropic();
        assert_relative_eq!(m.sigma_t(0.0).unwrap(), m.covariance().clone(), epsilon = 1e-15);
        let id = MixtureModel::symmetric_1d();
        assert_relative_eq!(id.sigma_t(3.7).unwrap()[(0, 0)], 1.0, epsilon = 1e-15);
        let m4 = MixtureModel::new(vec![1.0], vec![v(&[0.0])], DMatrix::from_element(1, 1, 4.0)).unwrap();
        assert_relative_eq!(m4.sigma_t(2f64.ln()).unwrap()[(0, 0)], 1.75, epsilon = 1e-14);
        assert!(m4.sigma_t(f64::NAN).is_err());
        assert!(m4.sigma_t(-1.0).is_err());
    }

    #[test]
    fn posterior_symmetric_cases() {
        let m = MixtureModel::symmetric_1d();
        for t in [0.0, 0.3, 5.0] {
            let q = m.posterior(&v(&[0.0]), t).unwrap();
            assert_relative_eq!(q[0], 0.5, epsilon = 1e-15);
        }
        let single = MixtureModel::isotropic(vec![1.0], vec![v(&[0.3, 1.0])]).unwrap();
        assert_eq!(single.posterior(&v(&[4.0, -2.0]), 0.1).unwrap(), vec![1.0]);
        let tri = MixtureModel::equidistant_three();
        for q in tri.posterior(&v(&[0.0, 0.0]), 0.0).unwrap() {
            assert_relative_eq!(q, 1.0 / 3.0, epsilon = 1e-15);
        }
    }

    #[test]
    fn posterior_survives_huge_states() {
        let m = MixtureModel::symmetric_1d();
        let q = m.posterior(&v(&[1e6]), 0.0).unwrap();
        assert_eq!(q[0], 1.0);
        assert!(q[1] >= 0.0);
        assert!(m.posterior(&v(&[f64::INFINITY]), 0.0).is_err());
    }

    #[test]
    fn score_limits() {
        let m = MixtureModel::isotropic(vec![0.5, 0.5], vec![v(&[1.0, 2.0]), v(&[-1.0, 0.0])]).unwrap();
        let x = v(&[0.3, -0.4]);
        let s0 = m.conditional_score(&x, 0, 0.0).unwrap();
        assert_relative_eq!(s0, v(&[0.7, 2.4]), epsilon = 1e-14);
        let s_inf = m.conditional_score(&x, 0, 60.0).unwrap();
        assert_relative_eq!(s_inf, -x.clone(), epsilon = 1e-14);
        assert!(matches!(
            m.conditional_score(&x, 2, 0.0),
            Err(Error::LabelOutOfRange { .. })
        ));
    }

    #[test]
    fn classifier_gradient_examples() {
        let single = MixtureModel::isotropic(vec![1.0], vec![v(&[0.3, 1.0])]).unwrap();
        let g = single.classifier_gradient(&v(&[1.0, 1.0]), 0, 0.4).unwrap();
        assert!(g.amax() < 1e-15);
        let m = MixtureModel::symmetric_1d();
        let g = m.classifier_gradient(&v(&[0.0]), 0, 0.0).unwrap();
        assert_relative_eq!(g[0], 1.0, epsilon = 1e-15);
    }

    #[test]
    fn confidence_matches_logistic() {
        let m = MixtureModel::symmetric_1d();
        assert_relative_eq!(m.confidence(&v(&[0.0]), 0).unwrap(), 0.5);
        let x = 1.0 - (-10f64).exp();
        let expected = 1.0 / (1.0 + (-2.0 * x).exp());
        assert_relative_eq!(m.confidence(&v(&[x]), 0).unwrap(), expected, epsilon = 1e-15);
        assert_relative_eq!(expected, 0.88075, epsilon = 1e-4);
        assert_eq!(m.confidence(&v(&[800.0]), 0).unwrap(), 1.0);
    }

    #[test]
    fn marginal_log_density_examples() {
        let single = MixtureModel::isotropic(vec![1.0], vec![v(&[0.3, 1.0, -2.0])]).unwrap();
        let peak = single
            .marginal_log_density(&v(&[0.3, 1.0, -2.0]), 0.0, Some(0))
            .unwrap();
        assert_relative_eq!(peak, -1.5 * (2.0 * std::f64::consts::PI).ln(), epsilon = 1e-14);
        let m = MixtureModel::symmetric_1d();
        let val = m.marginal_log_density(&v(&[0.0]), 0.0, None).unwrap();
        let expected = ((-0.5f64).exp() / (2.0 * std::f64::consts::PI).sqrt()).ln();
        assert_relative_eq!(val, expected, epsilon = 1e-14);
        assert_relative_eq!(val, -1.41894, epsilon = 1e-5);
    }

    #[test]
    fn ddim_drift_examples() {
        let m = anisotropic();
        let x = v(&[0.4, -0.9]);
        let d0 = m.guided_drift_ddim(&x, 1, 0.0, 0.7).unwrap();
        let s = m.conditional_score(&x, 1, 0.7).unwrap();
        assert_relative_eq!(d0.drift, &x + s, epsilon = 1e-13);
        assert!(d0.guidance_term.amax() == 0.0);

        let single = MixtureModel::new(vec![1.0], vec![v(&[1.0, -1.0])], m.covariance().clone()).unwrap();
        let a = single.guided_drift_ddim(&x, 0, 0.0, 0.3).unwrap();
        let b = single.guided_drift_ddim(&x, 0, 7.0, 0.3).unwrap();
        assert_relative_eq!(a.drift, b.drift, epsilon = 1e-13);

        let iso = MixtureModel::orthonormal(3, 3).unwrap();
        let x = v(&[0.2, -0.1, 0.5]);
        let (eta, tau) = (2.5, 0.8);
        let e = iso.guided_drift_ddim(&x, 0, eta, tau).unwrap();
        let mut expected = iso.means()[0].clone() * (1.0 + eta);
        for (q, mu) in e.posterior.iter().zip(iso.means()) {
            expected -= mu * (eta * q);
        }
        expected *= (-tau).exp();
        assert_relative_eq!(e.drift, expected, epsilon = 1e-14);
        assert!(iso.guided_drift_ddim(&x, 0, -1.0, tau).is_err());
    }

    #[test]
    fn ddpm_drift_examples() {
        let iso = MixtureModel::orthonormal(3, 3).unwrap();
        let x = v(&[0.2, -0.1, 0.5]);
        let tau = 1.3;
        let e = iso.guided_drift_ddpm(&x, 2, 0.0, tau).unwrap();
        let expected = -&x + &iso.means()[2] * (2.0 * (-tau).exp());
        assert_relative_eq!(e.drift, expected, epsilon = 1e-14);
        let single = MixtureModel::isotropic(vec![1.0], vec![v(&[1.0])]).unwrap();
        let e = single.guided_drift_ddpm(&v(&[0.3]), 0, 4.0, 0.2).unwrap();
        assert!(e.guidance_term.amax() < 1e-15);

        let m = anisotropic();
        let x = v(&[-0.6, 1.1]);
        let (eta, tau) = (1.7, 0.45);
        let diff = m.guided_drift_ddpm(&x, 0, eta, tau).unwrap().drift
            - m.guided_drift_ddim(&x, 0, eta, tau).unwrap().drift;
        let expected = m.conditional_score(&x, 0, tau).unwrap()
            + m.classifier_gradient(&x, 0, tau).unwrap() * eta;
        assert_relative_eq!(diff, expected, epsilon = 1e-12);
    }

    #[test]
    fn assumption1_examples() {
        let ortho = MixtureModel::orthonormal(3, 3).unwrap();
        let r = ortho.check_assumption1(0, &DVector::zeros(3), Some(0.0)).unwrap();
        assert!(r.satisfied && r.cross_bound && r.epsilon_bound && r.positive_weights && r.isotropic);
        assert!(!r.cross_bound_including_self);

        let aligned = MixtureModel::aligned_three(v(&[2.0, 2.0])).unwrap();
        for eps in [None, Some(1e-6), Some(0.5), Some(10.0)] {
            let r = aligned.check_assumption1(1, &DVector::zeros(2), eps).unwrap();
            assert!(!r.satisfied, "epsilon {eps:?}");
        }

        let scaled = MixtureModel::new(
            vec![1.0 / 3.0; 3],
            ortho.means().to_vec(),
            DMatrix::identity(3, 3) * 2.0,
        )
        .unwrap();
        let r = scaled.check_assumption1(0, &DVector::zeros(3), Some(0.0)).unwrap();
        assert!(!r.isotropic && !r.satisfied);
    }

    #[test]
    fn rejects_bad_models() {
        let m = |w: Vec<f64>, cov: DMatrix<f64>| MixtureModel::new(w, vec![v(&[0.0, 0.0]), v(&[1.0, 0.0])], cov);
        assert!(m(vec![0.5, 0.6], DMatrix::identity(2, 2)).is_err());
        assert!(m(vec![0.5, 0.5], DMatrix::from_row_slice(2, 2, &[1.0, 0.1, 0.0, 1.0])).is_err());
        assert!(m(vec![0.5, 0.5], DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0])).is_err());
        assert!(MixtureModel::isotropic(vec![0.5, 0.5], vec![v(&[0.0]), v(&[1.0, 0.0])]).is_err());
    }

    #[test]
    fn aligned_detection() {
        let aligned = MixtureModel::aligned_three(v(&[2.0, 2.0])).unwrap();
        assert_eq!(aligned.aligned_side_mean(1), Some(v(&[2.0, 2.0])));
        assert_eq!(aligned.aligned_side_mean(0), None);
        assert_eq!(MixtureModel::equidistant_three().aligned_side_mean(0), None);
    }
}
