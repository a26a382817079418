//! Centre-label guidance on the aligned model `(-mu, 0, mu)`: along `v = <x, mu>` the
//! discrete DDIM update reads `v_{k+1} = -v_k - h(v_k, k)`.

use nalgebra::DVector;
use serde::Serialize;

use crate::dynamics::Schedule;
use crate::error::{invalid, Result};

const ROOT_GRID: usize = 20_000;

#[derive(Debug, Clone, PartialEq)]
pub struct PhaseInputs {
    pub mu: DVector<f64>,
    pub schedule: Schedule,
    pub eta: f64,
}

impl PhaseInputs {
    pub fn new(mu: DVector<f64>, schedule: Schedule, eta: f64) -> Result<Self> {
        if mu.iter().any(|v| !v.is_finite()) || mu.norm_squared() == 0.0 {
            return Err(invalid("phase_inputs", "mu must be finite and non-zero"));
        }
        if !eta.is_finite() || eta < 0.0 {
            return Err(invalid("phase_inputs", "eta must be finite and >= 0"));
        }
        Ok(PhaseInputs { mu, schedule, eta })
    }

    pub fn with_eta(&self, eta: f64) -> Result<Self> {
        Self::new(self.mu.clone(), self.schedule.clone(), eta)
    }

    pub fn mu_sq(&self) -> f64 {
        self.mu.norm_squared()
    }

    pub fn horizon(&self) -> f64 {
        self.schedule.horizon()
    }

    /// `a_k = e^{-T + t_k}`.
    pub fn scale(&self, k: usize) -> f64 {
        (-self.horizon() + self.schedule.knots()[k]).exp()
    }

    /// Steps with `e^{-T + t_k} >= 1/2`, the range over which the thresholds are uniform.
    pub fn admissible_steps(&self) -> Vec<usize> {
        (0..self.schedule.len()).filter(|&k| self.scale(k) >= 0.5).collect()
    }

    /// Coordinate `v = <x, mu>`.
    pub fn coordinate(&self, x: &DVector<f64>) -> f64 {
        x.dot(&self.mu)
    }

    fn check_step(&self, op: &'static str, k: usize) -> Result<()> {
        if k < self.schedule.len() {
            Ok(())
        } else {
            Err(invalid(op, format!("step {k} out of range for K = {}", self.schedule.len())))
        }
    }
}

/// `(e^{av} - e^{-av}) / (A + e^{av} + e^{-av})` for `v >= 0`, scaled by `e^{-av}`.
fn ratio(a: f64, ln_big_a: f64, v: f64) -> f64 {
    let e1 = (-a * v).exp();
    let e2 = e1 * e1;
    (1.0 - e2) / ((ln_big_a - a * v).exp() + 1.0 + e2)
}

fn log_big_a(inputs: &PhaseInputs, a: f64) -> f64 {
    a * a * inputs.mu_sq() / 2.0
}

/// `h(v, k) = delta_k eta a_k ||mu||^2 (e^{a v} - e^{-a v}) / (A + e^{a v} + e^{-a v}) - 2 v`
/// with `a = e^{-T + t_k}` and `A = exp(a^2 ||mu||^2 / 2)`; odd in `v`.
pub fn phase_h(v: f64, k: usize, inputs: &PhaseInputs) -> Result<f64> {
    inputs.check_step("phase_h", k)?;
    let a = inputs.scale(k);
    let delta = inputs.schedule.steps()[k];
    let gain = delta * inputs.eta * a * inputs.mu_sq();
    let r = ratio(a, log_big_a(inputs, a), v.abs());
    Ok(v.signum() * gain * r - 2.0 * v)
}

/// `dh/dv = delta_k eta a^2 ||mu||^2 (A s + 4) / (A + s)^2 - 2` with `s = e^{av} + e^{-av}`.
pub fn phase_h_derivative(v: f64, k: usize, inputs: &PhaseInputs) -> Result<f64> {
    inputs.check_step("phase_h_derivative", k)?;
    let a = inputs.scale(k);
    let delta = inputs.schedule.steps()[k];
    let ln_big_a = log_big_a(inputs, a);
    let av = a * v.abs();
    // numerator and denominator divided by e^{2av}
    let e1 = (-av).exp();
    let e2 = e1 * e1;
    let big_a_e1 = (ln_big_a - av).exp();
    let num = big_a_e1 * (1.0 + e2) + 4.0 * e2;
    let den = (big_a_e1 + 1.0 + e2).powi(2);
    Ok(delta * inputs.eta * a * a * inputs.mu_sq() * num / den - 2.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Convergent,
    Splitting,
    Indeterminate,
}

/// Strength thresholds and, for splitting strengths, the interval endpoints.
///
/// `a` and `b` are implementation-defined: `a` is the largest `v` keeping
/// `e^{a_k v} + e^{-a_k v} <= s0` for every admissible step, and `b` is the largest
/// root of `h(., k)` over the admissible steps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PhaseThresholds {
    pub eta0: f64,
    pub eta0_prime: f64,
    pub s0: Option<f64>,
    pub s1: Option<f64>,
    pub a: Option<f64>,
    pub b: Option<f64>,
    pub b_prime: Option<f64>,
}

fn eta0(mu_sq: f64, schedule: &Schedule) -> f64 {
    1.0 / (mu_sq * schedule.delta_max())
}

fn eta0_prime(mu_sq: f64, schedule: &Schedule) -> f64 {
    let e8 = (mu_sq / 8.0).exp();
    let e2 = (mu_sq / 2.0).exp();
    let e1 = mu_sq.exp();
    let combined = (16.0 + 16.0 * e2 + f64::max(16.0, 8.0 * e1)) / (mu_sq * e8 * schedule.delta_min());
    let s1_requirement = (16.0 + 16.0 * e8) / (mu_sq * e2 * schedule.delta_max());
    combined.max(s1_requirement).max(eta0(mu_sq, schedule))
}

fn s0(inputs: &PhaseInputs) -> Option<f64> {
    let m = inputs.mu_sq();
    let p = inputs.schedule.delta_min() * inputs.eta * m * (m / 8.0).exp();
    let disc = (p / 8.0 - 2.0 * (m / 2.0).exp()).powi(2) - 4.0 * m.exp();
    (disc >= 0.0)
        .then(|| p / 16.0 - (m / 2.0).exp() + disc.sqrt() / 2.0)
        .filter(|s| *s >= 2.0)
}

fn s1(inputs: &PhaseInputs) -> Option<f64> {
    let m = inputs.mu_sq();
    let q = inputs.schedule.delta_max() * inputs.eta * m;
    let p = q * (m / 2.0).exp();
    let disc = (p / 2.0 - 2.0 * (m / 8.0).exp()).powi(2) - 4.0 * (m / 4.0).exp() + 8.0 * q;
    (disc >= 0.0)
        .then(|| p / 4.0 - (m / 8.0).exp() + disc.sqrt() / 2.0)
        .filter(|s| *s >= 2.0)
}

/// Largest positive root of `h(., k)`, or `0` when `h < 0` on `(0, inf)`.
fn largest_root(inputs: &PhaseInputs, k: usize) -> Result<f64> {
    let a = inputs.scale(k);
    // h(v) <= delta eta a ||mu||^2 - 2v, so every root lies below the cap
    let cap = inputs.schedule.steps()[k] * inputs.eta * a * inputs.mu_sq() / 2.0 + 1.0;
    let h = |v: f64| phase_h(v, k, inputs);
    let step = cap / ROOT_GRID as f64;
    let mut last_positive = None;
    for i in (1..=ROOT_GRID).rev() {
        if h(i as f64 * step)? > 0.0 {
            last_positive = Some(i);
            break;
        }
    }
    let Some(i) = last_positive else {
        return Ok(0.0);
    };
    let (mut lo, mut hi) = (i as f64 * step, (i + 1) as f64 * step);
    for _ in 0..200 {
        if hi - lo <= 1e-12 * hi.max(1.0) {
            break;
        }
        let mid = 0.5 * (lo + hi);
        if h(mid)? > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(hi)
}

pub fn phase_thresholds(inputs: &PhaseInputs) -> Result<PhaseThresholds> {
    let m = inputs.mu_sq();
    let eta0 = eta0(m, &inputs.schedule);
    let eta0_prime = eta0_prime(m, &inputs.schedule);
    let s0 = s0(inputs);
    let s1 = s1(inputs);
    let admissible = inputs.admissible_steps();
    let mut out = PhaseThresholds {
        eta0,
        eta0_prime,
        s0,
        s1,
        a: None,
        b: None,
        b_prime: None,
    };
    if inputs.eta < eta0_prime || admissible.is_empty() {
        return Ok(out);
    }
    let scales: Vec<f64> = admissible.iter().map(|&k| inputs.scale(k)).collect();
    let a_max = scales.iter().copied().fold(0.0, f64::max);
    let a_min = scales.iter().copied().fold(f64::INFINITY, f64::min);
    out.a = s0.map(|s| (s / 2.0).acosh() / a_max);
    out.b_prime = s1.map(|s| (s / 2.0).acosh() / a_min);
    let mut b = 0.0f64;
    for &k in &admissible {
        b = b.max(largest_root(inputs, k)?);
    }
    out.b = Some(b);
    Ok(out)
}

pub fn classify_phase(inputs: &PhaseInputs) -> Phase {
    let m = inputs.mu_sq();
    if inputs.eta <= eta0(m, &inputs.schedule) {
        Phase::Convergent
    } else if inputs.eta >= eta0_prime(m, &inputs.schedule) {
        Phase::Splitting
    } else {
        Phase::Indeterminate
    }
}
