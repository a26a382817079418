use nalgebra::DVector;
use serde::Serialize;

use crate::dynamics::{Schedule, Trajectory};
use crate::error::{invalid, Error, Result};
use crate::gmm::{MixtureModel, Sampler};

const BISECTION_TOL: f64 = 1e-10;

/// `F(p, u) = (1 - p) e^{-u} / (p + (1 - p) e^{-u})`; decreasing in both arguments.
pub fn cal_f(p: f64, u: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&p) {
        return Err(invalid("cal_f", format!("p must lie in [0, 1], got {p}")));
    }
    if u.is_nan() || u < 0.0 {
        return Err(invalid("cal_f", format!("u must be >= 0, got {u}")));
    }
    Ok(f_unchecked(p, u))
}

fn f_unchecked(p: f64, u: f64) -> f64 {
    let tail = (1.0 - p) * (-u).exp();
    let denom = p + tail;
    if denom == 0.0 {
        // p = 0 and e^{-u} underflowed: the limit is 1
        1.0
    } else {
        tail / denom
    }
}

/// Constants of the two-component specialisation, with `mu = (mu_y - mu_other) / 2`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TwoClusterInputs {
    pub mu_sq: f64,
    /// `2 <x_0 - z_0, mu>`.
    pub init_gap: f64,
    pub w_other: f64,
    pub delta1: f64,
}

/// Everything the quantitative bounds consume for one (model, label, strength, run).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoundInputs {
    pub label: usize,
    pub xi_w: f64,
    pub delta: f64,
    pub mu0: Vec<f64>,
    pub epsilon: f64,
    /// `||mu_y - mu_0||^2`.
    pub guided_sq_dist: f64,
    pub eta: f64,
    pub horizon: f64,
    /// `<x_0 - z_0, mu_y - mu_y'>` for every `y' != y`.
    pub init_gaps: Vec<f64>,
    pub max_unguided_conf: f64,
    pub terminal_unguided_conf: f64,
    /// Confidence of the guided initial state.
    pub initial_guided_conf: f64,
    /// `min_y' (1 - e^{-T}) <mu_y, mu_y - mu_y'>`, used by the asymptotic diagnostic.
    pub c0: f64,
    pub delta_max: Option<f64>,
    pub two_cluster: Option<TwoClusterInputs>,
}

impl BoundInputs {
    /// Collects the bound ingredients from the model, the guided initial state and the
    /// recorded unguided baseline run.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        model: &MixtureModel,
        y: usize,
        mu0: &DVector<f64>,
        epsilon: f64,
        eta: f64,
        horizon: f64,
        x0: &DVector<f64>,
        baseline: &Trajectory,
    ) -> Result<Self> {
        model.check_label(y)?;
        if model.num_components() < 2 {
            return Err(invalid("bound_inputs", "need at least two components"));
        }
        if mu0.len() != model.dim() || x0.len() != model.dim() {
            return Err(invalid("bound_inputs", "dimension mismatch"));
        }
        if !(eta.is_finite() && eta >= 0.0 && horizon.is_finite() && horizon > 0.0) {
            return Err(invalid("bound_inputs", "need eta >= 0 and a positive horizon"));
        }
        if !epsilon.is_finite() || epsilon < 0.0 {
            return Err(invalid("bound_inputs", "epsilon must be finite and >= 0"));
        }
        if baseline.is_empty() || baseline.label != y {
            return Err(invalid("bound_inputs", "baseline must be a recorded run for the same label"));
        }
        let means = model.means();
        let weights = model.weights();
        let my = &means[y];
        let z0 = &baseline.states[0];
        let diff0 = x0 - z0;
        let others = || (0..means.len()).filter(move |yp| *yp != y);
        let w_min_other = others().map(|yp| weights[yp]).fold(f64::INFINITY, f64::min);
        let xi_w = 1.0 - weights[y] / (weights[y] + w_min_other);
        let ny = my.norm_squared();
        let delta = means
            .iter()
            .map(|m| (ny - m.norm_squared()).abs())
            .fold(0.0, f64::max);
        let init_gaps = others().map(|yp| diff0.dot(&(my - &means[yp]))).collect();
        let decay = 1.0 - (-horizon).exp();
        let c0 = means
            .iter()
            .map(|m| decay * my.dot(&(my - m)))
            .fold(f64::INFINITY, f64::min);
        let two_cluster = (means.len() == 2).then(|| {
            let other = 1 - y;
            let half = (my - &means[other]) / 2.0;
            TwoClusterInputs {
                mu_sq: half.norm_squared(),
                init_gap: 2.0 * diff0.dot(&half),
                w_other: weights[other],
                delta1: (ny - means[other].norm_squared()).abs(),
            }
        });
        Ok(BoundInputs {
            label: y,
            xi_w,
            delta,
            mu0: mu0.iter().copied().collect(),
            epsilon,
            guided_sq_dist: (my - mu0).norm_squared(),
            eta,
            horizon,
            init_gaps,
            max_unguided_conf: baseline.max_confidence(),
            terminal_unguided_conf: baseline.terminal_confidence(),
            initial_guided_conf: model.confidence(x0, y)?,
            c0,
            delta_max: None,
            two_cluster,
        })
    }

    /// Attaches the largest step of the schedule, as used by the discrete bounds.
    pub fn with_schedule(mut self, schedule: &Schedule) -> Self {
        self.delta_max = Some(schedule.delta_max());
        self
    }

    /// Same inputs at another guidance strength.
    pub fn with_eta(mut self, eta: f64) -> Self {
        self.eta = eta;
        self
    }

    pub fn min_init_gap(&self) -> f64 {
        self.init_gaps.iter().copied().fold(f64::INFINITY, f64::min)
    }

    /// `||mu_y - mu_0||^2 - 3 epsilon`; the bounds are vacuous when this is not positive.
    pub fn separation(&self) -> f64 {
        self.guided_sq_dist - 3.0 * self.epsilon
    }

    fn validate(&self, op: &'static str) -> Result<()> {
        let probs = [self.max_unguided_conf, self.terminal_unguided_conf];
        if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(invalid(op, "baseline confidences must lie in [0, 1]"));
        }
        let scalars = [self.xi_w, self.delta, self.epsilon, self.eta, self.horizon, self.min_init_gap()];
        if scalars.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op });
        }
        Ok(())
    }

    fn two_cluster(&self, op: &'static str) -> Result<&TwoClusterInputs> {
        self.two_cluster
            .as_ref()
            .ok_or_else(|| invalid(op, "the two-cluster bound needs exactly two components"))
    }

    fn discrete_delta_max(&self, op: &'static str, sampler: Sampler) -> Result<f64> {
        let dm = self
            .delta_max
            .ok_or_else(|| invalid(op, "discrete bounds need the schedule's largest step"))?;
        if sampler == Sampler::Ddpm && dm > 0.5 {
            return Err(invalid(
                op,
                format!("the discrete DDPM bound assumes the largest step is <= 1/2, got {dm}"),
            ));
        }
        Ok(dm)
    }
}

/// Result of a self-consistent bound: the supremal `U` and the implied lower bound on
/// the guided terminal confidence.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ConfidenceBound {
    pub u_star: f64,
    pub bound: f64,
    /// Unguided terminal confidence the bound improves on.
    pub baseline: f64,
    /// Set when the separation term is not positive and the bound falls back to the baseline.
    pub degenerate: bool,
}

/// Inequality `U < gap + coeff * min{F(p_max, f_scale U), cap}` with bound
/// `p / (p + (1 - p) e^{-exp_scale U})`.
struct Inequality {
    gap: f64,
    coeff: f64,
    f_scale: f64,
    cap: f64,
    exp_scale: f64,
}

impl Inequality {
    fn slack(&self, p_max: f64, u: f64) -> f64 {
        self.gap + self.coeff * f_unchecked(p_max, self.f_scale * u).min(self.cap) - u
    }

    fn solve(&self, p_max: f64, p_terminal: f64) -> ConfidenceBound {
        // slack is strictly decreasing in u, so the admissible set is [0, u*)
        let u_star = if self.slack(p_max, 0.0) <= 0.0 {
            0.0
        } else {
            let mut lo = 0.0;
            let mut hi = (self.gap.max(0.0) + self.coeff.max(0.0) * self.cap).max(1.0);
            while self.slack(p_max, hi) > 0.0 {
                hi *= 2.0;
            }
            for _ in 0..400 {
                if hi - lo <= BISECTION_TOL {
                    break;
                }
                let mid = 0.5 * (lo + hi);
                if self.slack(p_max, mid) > 0.0 {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            lo
        };
        ConfidenceBound {
            u_star,
            bound: lift(p_terminal, self.exp_scale * u_star),
            baseline: p_terminal,
            degenerate: false,
        }
    }
}

fn lift(p: f64, u: f64) -> f64 {
    let denom = p + (1.0 - p) * (-u).exp();
    if denom == 0.0 {
        0.0
    } else {
        p / denom
    }
}

fn degenerate(inputs: &BoundInputs) -> ConfidenceBound {
    ConfidenceBound {
        u_star: 0.0,
        bound: inputs.terminal_unguided_conf,
        baseline: inputs.terminal_unguided_conf,
        degenerate: true,
    }
}

fn guidance_gain(inputs: &BoundInputs) -> f64 {
    inputs.eta * (-inputs.delta / 8.0).exp() * inputs.separation()
}

fn two_cluster_gain(inputs: &BoundInputs, tc: &TwoClusterInputs) -> f64 {
    4.0 * inputs.eta * (-tc.delta1 / 8.0).exp() * tc.mu_sq
}

/// Lower bound on the guided DDIM terminal confidence.
pub fn ddim_confidence_bound(inputs: &BoundInputs) -> Result<ConfidenceBound> {
    inputs.validate("ddim_confidence_bound")?;
    if inputs.separation() <= 0.0 {
        return Ok(degenerate(inputs));
    }
    let t = inputs.horizon;
    Ok(Inequality {
        gap: inputs.min_init_gap(),
        coeff: (1.0 - (-t).exp()) * guidance_gain(inputs),
        f_scale: 1.0,
        cap: inputs.xi_w,
        exp_scale: 1.0,
    }
    .solve(inputs.max_unguided_conf, inputs.terminal_unguided_conf))
}

/// Almost-sure lower bound on the guided DDPM terminal confidence.
pub fn ddpm_confidence_bound(inputs: &BoundInputs) -> Result<ConfidenceBound> {
    inputs.validate("ddpm_confidence_bound")?;
    if inputs.separation() <= 0.0 {
        return Ok(degenerate(inputs));
    }
    let t = inputs.horizon;
    Ok(Inequality {
        gap: (-t).exp() * inputs.min_init_gap(),
        coeff: (1.0 - (-2.0 * t).exp()) * guidance_gain(inputs),
        f_scale: t.exp(),
        cap: inputs.xi_w,
        exp_scale: 1.0,
    }
    .solve(inputs.max_unguided_conf, inputs.terminal_unguided_conf))
}

/// Two-component bound, valid without the cross-inner-product condition.
pub fn two_cluster_bound(inputs: &BoundInputs, sampler: Sampler) -> Result<ConfidenceBound> {
    inputs.validate("two_cluster_bound")?;
    let tc = inputs.two_cluster("two_cluster_bound")?;
    let t = inputs.horizon;
    let gain = two_cluster_gain(inputs, tc);
    let ineq = match sampler {
        Sampler::Ddim => Inequality {
            gap: tc.init_gap,
            coeff: (1.0 - (-t).exp()) * gain,
            f_scale: 1.0,
            cap: tc.w_other,
            exp_scale: 1.0,
        },
        Sampler::Ddpm => Inequality {
            gap: (-t).exp() * tc.init_gap,
            coeff: (1.0 - (-2.0 * t).exp()) * gain,
            f_scale: t.exp(),
            cap: tc.w_other,
            exp_scale: 1.0,
        },
    };
    Ok(ineq.solve(inputs.max_unguided_conf, inputs.terminal_unguided_conf))
}

fn discrete_inequality(
    sampler: Sampler,
    t: f64,
    delta_max: f64,
    gap: f64,
    gain: f64,
    cap: f64,
) -> Inequality {
    match sampler {
        Sampler::Ddim => Inequality {
            gap,
            coeff: (-delta_max).exp() * (1.0 - (-t).exp()) * gain,
            f_scale: 1.0,
            cap,
            exp_scale: 1.0,
        },
        Sampler::Ddpm => Inequality {
            gap: (-t - delta_max).exp() * gap,
            coeff: ((-t).exp() - (-3.0 * t).exp()) * gain,
            f_scale: 1.0,
            cap,
            exp_scale: (-2.0 * t).exp(),
        },
    }
}

/// Bound on the terminal confidence of the discretised samplers; needs
/// [`BoundInputs::with_schedule`].
pub fn discrete_confidence_bound(inputs: &BoundInputs, sampler: Sampler) -> Result<ConfidenceBound> {
    inputs.validate("discrete_confidence_bound")?;
    let dm = inputs.discrete_delta_max("discrete_confidence_bound", sampler)?;
    if inputs.separation() <= 0.0 {
        return Ok(degenerate(inputs));
    }
    Ok(discrete_inequality(
        sampler,
        inputs.horizon,
        dm,
        inputs.min_init_gap(),
        guidance_gain(inputs),
        inputs.xi_w,
    )
    .solve(inputs.max_unguided_conf, inputs.terminal_unguided_conf))
}

/// Discrete bound with the two-component constants substituted.
pub fn discrete_two_cluster_bound(inputs: &BoundInputs, sampler: Sampler) -> Result<ConfidenceBound> {
    inputs.validate("discrete_two_cluster_bound")?;
    let dm = inputs.discrete_delta_max("discrete_two_cluster_bound", sampler)?;
    let tc = inputs.two_cluster("discrete_two_cluster_bound")?;
    Ok(discrete_inequality(
        sampler,
        inputs.horizon,
        dm,
        tc.init_gap,
        two_cluster_gain(inputs, tc),
        tc.w_other,
    )
    .solve(inputs.max_unguided_conf, inputs.terminal_unguided_conf))
}

/// Large-strength DDIM estimate `1 - (-C0 - logit P(x_0, y) + log eta) / (eta C1)`.
///
/// Only meaningful for "sufficiently large" strengths, so it is reported, never relied on.
pub fn asymptotic_diagnostic(inputs: &BoundInputs) -> Option<f64> {
    let c1 = (-inputs.delta / 8.0).exp() * inputs.separation();
    let p = inputs.initial_guided_conf;
    if inputs.eta <= 0.0 || c1 <= 0.0 || p <= 0.0 || p >= 1.0 {
        return None;
    }
    let logit = (p / (1.0 - p)).ln();
    Some(1.0 - (-inputs.c0 - logit + inputs.eta.ln()) / (inputs.eta * c1))
}

/// The two step-size conditions at one step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StepCheck {
    pub step: usize,
    pub delta: f64,
    /// `delta / (sigma_min ∧ 1) + delta eta sup||mu||^2 / (sigma_min^2 ∧ 1)`.
    pub drift_terms: f64,
    /// `1 + delta > drift_terms`.
    pub first: bool,
    /// `delta + drift_terms < 1/2`.
    pub second: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepConditionReport {
    pub steps: Vec<StepCheck>,
    pub all_hold: bool,
    /// Supremum of the strengths for which every step passes; `None` when even
    /// `eta = 0` fails.
    pub eta_limit: Option<f64>,
}

/// Step-size conditions under which discrete guided DDIM cannot increase entropy.
pub fn entropy_step_condition(
    model: &MixtureModel,
    eta: f64,
    schedule: &Schedule,
) -> Result<StepConditionReport> {
    if !eta.is_finite() || eta < 0.0 {
        return Err(invalid("entropy_step_condition", "eta must be finite and >= 0"));
    }
    let sigma = model.sigma_min();
    let s1 = sigma.min(1.0);
    let s2 = (sigma * sigma).min(1.0);
    let sup_mu = model
        .means()
        .iter()
        .map(|m| m.norm_squared())
        .fold(0.0, f64::max);
    let mut eta_limit = Some(f64::INFINITY);
    let steps: Vec<StepCheck> = schedule
        .steps()
        .iter()
        .enumerate()
        .map(|(k, &delta)| {
            let base = delta / s1;
            let per_eta = delta * sup_mu / s2;
            let drift_terms = base + eta * per_eta;
            // both conditions read `base + eta * per_eta < room`
            let room = (1.0 + delta).min(0.5 - delta);
            let limit = if base >= room {
                None
            } else if per_eta == 0.0 {
                Some(f64::INFINITY)
            } else {
                Some((room - base) / per_eta)
            };
            eta_limit = match (eta_limit, limit) {
                (Some(a), Some(b)) => Some(a.min(b)),
                _ => None,
            };
            StepCheck {
                step: k,
                delta,
                drift_terms,
                first: 1.0 + delta > drift_terms,
                second: delta + drift_terms < 0.5,
            }
        })
        .collect();
    let all_hold = steps.iter().all(|s| s.first && s.second);
    Ok(StepConditionReport {
        steps,
        all_hold,
        eta_limit,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{integrate_ddim, Integrator};
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn v(xs: &[f64]) -> DVector<f64> {
        DVector::from_vec(xs.to_vec())
    }

    fn inputs(eta: f64, gap: f64) -> BoundInputs {
        BoundInputs {
            label: 0,
            xi_w: 0.5,
            delta: 0.0,
            mu0: vec![0.0; 3],
            epsilon: 0.0,
            guided_sq_dist: 1.0,
            eta,
            horizon: 10.0,
            init_gaps: vec![gap, gap + 1.0],
            max_unguided_conf: 0.6,
            terminal_unguided_conf: 0.5761,
            initial_guided_conf: 1.0 / 3.0,
            c0: 0.0,
            delta_max: Some(0.01),
            two_cluster: None,
        }
    }

    #[test]
    fn cal_f_examples() {
        for p in [0.0, 0.3, 0.9] {
            assert_relative_eq!(cal_f(p, 0.0).unwrap(), 1.0 - p, epsilon = 1e-15);
        }
        assert_eq!(cal_f(0.0, 5.0).unwrap(), 1.0);
        assert_eq!(cal_f(0.0, 1e4).unwrap(), 1.0);
        assert_eq!(cal_f(1.0, 2.0).unwrap(), 0.0);
        assert!(cal_f(1.5, 0.0).is_err());
        assert!(cal_f(0.5, -1.0).is_err());
    }

    #[test]
    fn zero_strength_and_gap_collapse_to_baseline() {
        let i = inputs(0.0, 0.0);
        for b in [
            ddim_confidence_bound(&i).unwrap(),
            ddpm_confidence_bound(&i).unwrap(),
            discrete_confidence_bound(&i, Sampler::Ddim).unwrap(),
            discrete_confidence_bound(&i, Sampler::Ddpm).unwrap(),
        ] {
            assert_eq!(b.u_star, 0.0);
            assert_eq!(b.bound, i.terminal_unguided_conf);
            assert!(!b.degenerate);
        }
    }

    #[test]
    fn bound_solves_its_inequality() {
        let i = inputs(50.0, 0.2);
        let b = ddim_confidence_bound(&i).unwrap();
        let rhs = |u: f64| {
            i.min_init_gap()
                + (1.0 - (-10f64).exp()) * 50.0 * f_unchecked(0.6, u).min(0.5)
        };
        assert!(b.u_star < rhs(b.u_star));
        assert!(b.u_star + 1e-8 >= rhs(b.u_star + 1e-8));
        assert_relative_eq!(b.bound, 0.5761 / (0.5761 + 0.4239 * (-b.u_star).exp()), epsilon = 1e-15);
        assert!(b.bound >= i.terminal_unguided_conf && b.bound < 1.0);
    }

    #[test]
    fn decay_rate_on_reference_inputs() {
        // 1 - bound at eta = 10, 100, 1000 from an independent root finder
        let expected = [0.1460, 0.03127, 0.004989];
        for (eta, e) in [10.0, 100.0, 1000.0].into_iter().zip(expected) {
            let mut i = inputs(eta, 0.0);
            i.max_unguided_conf = i.terminal_unguided_conf;
            let b = ddim_confidence_bound(&i).unwrap();
            assert!(((1.0 - b.bound) - e).abs() / e < 1e-3, "eta {eta}: {}", 1.0 - b.bound);
        }
    }

    #[test]
    fn degenerate_separation_is_flagged() {
        let mut i = inputs(10.0, 0.0);
        i.epsilon = 0.5;
        let b = ddim_confidence_bound(&i).unwrap();
        assert!(b.degenerate);
        assert_eq!(b.bound, i.terminal_unguided_conf);
    }

    #[test]
    fn discrete_ddpm_rejects_coarse_steps() {
        let mut i = inputs(1.0, 0.0);
        i.delta_max = Some(0.6);
        assert!(discrete_confidence_bound(&i, Sampler::Ddpm).is_err());
        assert!(discrete_confidence_bound(&i, Sampler::Ddim).is_ok());
        i.delta_max = None;
        assert!(discrete_confidence_bound(&i, Sampler::Ddim).is_err());
    }

    #[test]
    fn vanishing_steps_recover_continuous_ddim() {
        let mut i = inputs(20.0, 0.1);
        i.delta_max = Some(0.0);
        let a = discrete_confidence_bound(&i, Sampler::Ddim).unwrap();
        let b = ddim_confidence_bound(&i).unwrap();
        assert_relative_eq!(a.u_star, b.u_star, epsilon = 1e-9);
    }

    #[test]
    fn inputs_from_runs() {
        let m = MixtureModel::symmetric_1d();
        let z0 = v(&[0.0]);
        let base = integrate_ddim(&m, 0, 0.0, &z0, 10.0, 1000, Integrator::Rk4).unwrap();
        let i = BoundInputs::new(&m, 0, &v(&[0.0]), 0.0, 2.0, 10.0, &z0, &base).unwrap();
        assert_relative_eq!(i.xi_w, 0.5);
        assert_eq!(i.delta, 0.0);
        assert_eq!(i.init_gaps, vec![0.0]);
        let tc = i.two_cluster.as_ref().unwrap();
        assert_eq!(tc.delta1, 0.0);
        assert_eq!(tc.w_other, 0.5);
        assert_relative_eq!(tc.mu_sq, 1.0);
        // the conditional flow from 0 ends at (1 - e^{-10}) mu_0
        assert_relative_eq!(i.terminal_unguided_conf, 0.880_787_544_2, epsilon = 1e-8);
        let b = two_cluster_bound(&i.clone().with_eta(0.0), Sampler::Ddim).unwrap();
        assert_eq!(b.bound, i.terminal_unguided_conf);
        let three = MixtureModel::equidistant_three();
        let base3 = integrate_ddim(&three, 0, 0.0, &v(&[0.0, 0.0]), 1.0, 10, Integrator::Rk4).unwrap();
        let i3 = BoundInputs::new(&three, 0, &v(&[0.0, 0.0]), 0.0, 1.0, 1.0, &v(&[0.0, 0.0]), &base3).unwrap();
        assert!(two_cluster_bound(&i3, Sampler::Ddim).is_err());
    }

    #[test]
    fn two_cluster_constants_versus_general_form() {
        // mu_0 at the midpoint and epsilon = 0: identical gap term, guidance gain four times larger.
        let m = MixtureModel::isotropic(vec![0.3, 0.7], vec![v(&[1.0, 0.5]), v(&[-0.2, 0.1])]).unwrap();
        let x0 = v(&[0.4, -0.3]);
        let z0 = v(&[0.1, 0.2]);
        let base = integrate_ddim(&m, 0, 0.0, &z0, 3.0, 300, Integrator::Rk4).unwrap();
        let mid = (&m.means()[0] + &m.means()[1]) / 2.0;
        let i = BoundInputs::new(&m, 0, &mid, 0.0, 5.0, 3.0, &x0, &base).unwrap();
        let tc = i.two_cluster.as_ref().unwrap();
        assert_relative_eq!(tc.init_gap, i.init_gaps[0], epsilon = 1e-14);
        // general gain uses separation(); the two-cluster gain uses 4 * mu_sq
        assert_relative_eq!(tc.mu_sq, i.separation(), epsilon = 1e-14);
        assert_relative_eq!(tc.delta1, i.delta, epsilon = 1e-14);
        assert_relative_eq!(tc.w_other, 0.7);
        assert_relative_eq!(i.xi_w, 0.7, epsilon = 1e-14);
    }

    #[test]
    fn step_condition_substitutions() {
        let m = MixtureModel::isotropic(vec![0.5, 0.5], vec![v(&[1.0, 1.0]), v(&[-1.0, 1.0])]).unwrap();
        let r = entropy_step_condition(&m, 1.0, &Schedule::constant_step(1.0, 0.01).unwrap()).unwrap();
        let s = r.steps[0];
        assert_relative_eq!(s.drift_terms, 0.03, epsilon = 1e-15);
        assert_relative_eq!(1.0 + s.delta, 1.01);
        assert_relative_eq!(s.delta + s.drift_terms, 0.04, epsilon = 1e-15);
        assert!(s.first && s.second && r.all_hold);
        let r = entropy_step_condition(&m, 1.0, &Schedule::constant_step(0.8, 0.4).unwrap()).unwrap();
        let s = r.steps[0];
        assert_relative_eq!(s.delta + s.drift_terms, 1.6, epsilon = 1e-15);
        assert!(s.first && !s.second && !r.all_hold);
        let r = entropy_step_condition(&m, 0.0, &Schedule::constant_step(2.4, 0.24).unwrap()).unwrap();
        assert!(r.all_hold);
        assert_relative_eq!(r.eta_limit.unwrap(), 0.02 / 0.48, epsilon = 1e-12);
        let r = entropy_step_condition(&m, 0.0, &Schedule::constant_step(1.0, 0.01).unwrap()).unwrap();
        assert_relative_eq!(r.eta_limit.unwrap(), 0.48 / 0.02, epsilon = 1e-12);
        let r = entropy_step_condition(&m, 0.0, &Schedule::constant_step(1.0, 0.25).unwrap()).unwrap();
        assert!(!r.all_hold);
        assert_eq!(r.eta_limit, None);
    }

    proptest! {
        #[test]
        fn cal_f_is_decreasing(p in 0.0..1.0f64, dp in 0.0..0.5f64, u in 0.0..20.0f64, du in 0.0..5.0f64) {
            let q = (p + dp).min(1.0);
            prop_assert!(cal_f(q, u).unwrap() <= cal_f(p, u).unwrap() + 1e-15);
            prop_assert!(cal_f(p, u + du).unwrap() <= cal_f(p, u).unwrap() + 1e-15);
            let f = cal_f(p, u).unwrap();
            prop_assert!((0.0..=1.0).contains(&f));
        }

        #[test]
        fn bounds_are_monotone_in_eta(
            eta in 0.0..500.0f64,
            step in 0.0..500.0f64,
            gap in -1.0..2.0f64,
            p_max in 0.05..0.95f64,
            frac in 0.1..1.0f64,
        ) {
            let mut lo = inputs(eta, gap);
            lo.max_unguided_conf = p_max;
            lo.terminal_unguided_conf = p_max * frac;
            let hi = lo.clone().with_eta(eta + step);
            for (a, b) in [
                (ddim_confidence_bound(&lo).unwrap(), ddim_confidence_bound(&hi).unwrap()),
                (ddpm_confidence_bound(&lo).unwrap(), ddpm_confidence_bound(&hi).unwrap()),
                (
                    discrete_confidence_bound(&lo, Sampler::Ddim).unwrap(),
                    discrete_confidence_bound(&hi, Sampler::Ddim).unwrap(),
                ),
                (
                    discrete_confidence_bound(&lo, Sampler::Ddpm).unwrap(),
                    discrete_confidence_bound(&hi, Sampler::Ddpm).unwrap(),
                ),
            ] {
                prop_assert!(b.bound + 1e-12 >= a.bound);
                prop_assert!(a.bound + 1e-15 >= lo.terminal_unguided_conf);
                prop_assert!(a.bound <= 1.0);
            }
        }
    }
}
