//! End-to-end property suite behind the `verify` command.
//!
//! Every property is a seeded, deterministic check; the report carries no timings so
//! it is byte-stable for a fixed seed.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::Serialize;
use serde_json::{json, Value};

use crate::dynamics::{
    run_coupled, sample_ensemble, step_ddim_discrete, InitLaw, Integrator, NoiseTape, SamplerKind, SamplerSpec,
    Schedule,
};
use crate::entropy::{kde_mc_entropy, knn_entropy, spacing_entropy_1d, Bandwidth, EntropyMethod, SpacingVariant};
use crate::error::{Error, Result};
use crate::gmm::{MixtureModel, Sampler};
use crate::theory::{
    ddim_confidence_bound, ddpm_confidence_bound, discrete_confidence_bound, discrete_two_cluster_bound,
    entropy_step_condition, phase_h, phase_thresholds, two_cluster_bound, BoundInputs, ConfidenceBound, Phase,
    PhaseInputs,
};

/// The two gradient functionals under test, so a deliberately broken build can be
/// checked against the same oracles.
pub trait Functionals: Sync {
    fn name(&self) -> &'static str;
    fn conditional_score(&self, model: &MixtureModel, x: &DVector<f64>, y: usize, t: f64) -> Result<DVector<f64>>;
    fn classifier_gradient(&self, model: &MixtureModel, x: &DVector<f64>, y: usize, t: f64) -> Result<DVector<f64>>;
}

pub struct Reference;

impl Functionals for Reference {
    fn name(&self) -> &'static str {
        "reference"
    }

    fn conditional_score(&self, model: &MixtureModel, x: &DVector<f64>, y: usize, t: f64) -> Result<DVector<f64>> {
        model.conditional_score(x, y, t)
    }

    fn classifier_gradient(&self, model: &MixtureModel, x: &DVector<f64>, y: usize, t: f64) -> Result<DVector<f64>> {
        model.classifier_gradient(x, y, t)
    }
}

/// Mutation fixture: the classifier gradient with its sign flipped.
pub struct FlippedClassifierGradient;

impl Functionals for FlippedClassifierGradient {
    fn name(&self) -> &'static str {
        "flipped-classifier-gradient"
    }

    fn conditional_score(&self, model: &MixtureModel, x: &DVector<f64>, y: usize, t: f64) -> Result<DVector<f64>> {
        model.conditional_score(x, y, t)
    }

    fn classifier_gradient(&self, model: &MixtureModel, x: &DVector<f64>, y: usize, t: f64) -> Result<DVector<f64>> {
        Ok(-model.classifier_gradient(x, y, t)?)
    }
}

fn gaussian(rng: &mut ChaCha8Rng, d: usize) -> DVector<f64> {
    DVector::from_fn(d, |_, _| rng.sample(StandardNormal))
}

fn unit_sphere(rng: &mut ChaCha8Rng, d: usize) -> DVector<f64> {
    loop {
        let v = gaussian(rng, d);
        let n = v.norm();
        if n > 1e-12 {
            return v / n;
        }
    }
}

/// Random mixture with at most five components, `d` dimensions, random weights and a
/// random well-conditioned covariance.
pub fn random_model(rng: &mut ChaCha8Rng, d: usize, k: usize) -> Result<MixtureModel> {
    let raw: Vec<f64> = (0..k).map(|_| rng.random_range(0.5..1.5)).collect();
    let total: f64 = raw.iter().sum();
    let weights = raw.iter().map(|w| w / total).collect();
    let means = (0..k).map(|_| gaussian(rng, d) * 1.5).collect();
    let a = DMatrix::from_fn(d, d, |_, _| rng.sample::<f64, _>(StandardNormal));
    let cov = &a * a.transpose() / d as f64 + DMatrix::identity(d, d) * 0.5;
    MixtureModel::new(weights, means, (&cov + cov.transpose()) / 2.0)
}

/// Identity-covariance mixture with means uniform on the unit sphere, redrawn until
/// label 0 satisfies the separation assumption around the origin.
pub fn random_separated_model(rng: &mut ChaCha8Rng, d: usize, k: usize) -> Result<MixtureModel> {
    loop {
        let means: Vec<DVector<f64>> = (0..k).map(|_| unit_sphere(rng, d)).collect();
        let raw: Vec<f64> = (0..k).map(|_| rng.random_range(0.5..1.5)).collect();
        let total: f64 = raw.iter().sum();
        let model = MixtureModel::isotropic(raw.iter().map(|w| w / total).collect(), means)?;
        if model.check_assumption1(0, &DVector::zeros(d), None)?.satisfied {
            return Ok(model);
        }
    }
}

/// One dominance scenario: a model, the guided label, and its separation centre.
#[derive(Debug, Clone)]
pub struct DominanceCase {
    pub model: MixtureModel,
    pub label: usize,
    pub x0: DVector<f64>,
    pub mu0: DVector<f64>,
    /// `Some` when the separation assumption holds; selects the general bounds.
    pub epsilon: Option<f64>,
}

impl DominanceCase {
    pub fn new(model: MixtureModel, label: usize, x0: DVector<f64>) -> Result<Self> {
        let mu0 = DVector::zeros(model.dim());
        let report = model.check_assumption1(label, &mu0, None)?;
        let epsilon = report.satisfied.then_some(report.epsilon);
        Ok(DominanceCase {
            model,
            label,
            x0,
            mu0,
            epsilon,
        })
    }
}

/// Worst margins over every knot, strength and path of a dominance check.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DominanceOutcome {
    /// `min (P(x_t, y) - P(z_t, y))`.
    pub worst_margin: f64,
    /// `max (bound - P(x_T, y))`; `-inf` when no bound applies.
    pub worst_bound_excess: f64,
    pub bounds_checked: usize,
    pub runs: usize,
}

impl DominanceOutcome {
    pub fn holds(&self, slack: f64) -> bool {
        self.worst_margin >= -slack
    }

    pub fn bounds_hold(&self, slack: f64) -> bool {
        self.worst_bound_excess <= slack
    }

    pub fn merge(self, other: DominanceOutcome) -> DominanceOutcome {
        DominanceOutcome {
            worst_margin: self.worst_margin.min(other.worst_margin),
            worst_bound_excess: self.worst_bound_excess.max(other.worst_bound_excess),
            bounds_checked: self.bounds_checked + other.bounds_checked,
            runs: self.runs + other.runs,
        }
    }
}

impl Default for DominanceOutcome {
    fn default() -> Self {
        DominanceOutcome {
            worst_margin: f64::INFINITY,
            worst_bound_excess: f64::NEG_INFINITY,
            bounds_checked: 0,
            runs: 0,
        }
    }
}

fn applicable_bounds(case: &DominanceCase, spec: &SamplerSpec, inputs: &BoundInputs) -> Result<Vec<ConfidenceBound>> {
    let mut out = Vec::new();
    let schedule = match spec {
        SamplerSpec::DdimContinuous { .. } => None,
        SamplerSpec::DdpmContinuous { schedule }
        | SamplerSpec::DdimDiscrete { schedule }
        | SamplerSpec::DdpmDiscrete { schedule } => Some(schedule),
    };
    let sampler = spec.kind().sampler();
    let discrete = matches!(spec.kind(), SamplerKind::DdimDisc | SamplerKind::DdpmDisc);
    let inputs = match schedule {
        Some(s) => inputs.clone().with_schedule(s),
        None => inputs.clone(),
    };
    if case.epsilon.is_some() {
        out.push(match (discrete, sampler) {
            (false, Sampler::Ddim) => ddim_confidence_bound(&inputs)?,
            (false, Sampler::Ddpm) => ddpm_confidence_bound(&inputs)?,
            (true, s) => discrete_confidence_bound(&inputs, s)?,
        });
    }
    if case.model.num_components() == 2 && case.model.is_identity_covariance() {
        out.push(if discrete {
            discrete_two_cluster_bound(&inputs, sampler)?
        } else {
            two_cluster_bound(&inputs, sampler)?
        });
    }
    Ok(out)
}

/// Runs coupled guided/unguided paths `0..paths` and records the worst dominance margin
/// and the worst bound excess.
pub fn check_dominance(
    case: &DominanceCase,
    etas: &[f64],
    spec: &SamplerSpec,
    seed: u64,
    paths: u64,
) -> Result<DominanceOutcome> {
    let mut grid = vec![0.0];
    grid.extend(etas.iter().copied().filter(|e| *e != 0.0));
    let per_path = (0..paths)
        .into_par_iter()
        .map(|path| -> Result<DominanceOutcome> {
            let runs = run_coupled(&case.model, case.label, &grid, &case.x0, spec, seed, path)?;
            let mut acc = DominanceOutcome::default();
            for run in runs.iter().filter(|r| r.eta != 0.0) {
                let margin = run
                    .guided
                    .confidence
                    .iter()
                    .zip(&run.unguided.confidence)
                    .map(|(g, u)| g - u)
                    .fold(f64::INFINITY, f64::min);
                acc.worst_margin = acc.worst_margin.min(margin);
                acc.runs += 1;
                let inputs = BoundInputs::new(
                    &case.model,
                    case.label,
                    &case.mu0,
                    case.epsilon.unwrap_or(0.0),
                    run.eta,
                    spec.horizon(),
                    &case.x0,
                    &run.unguided,
                )?;
                let observed = run.guided.terminal_confidence();
                for b in applicable_bounds(case, spec, &inputs)? {
                    acc.worst_bound_excess = acc.worst_bound_excess.max(b.bound - observed);
                    acc.bounds_checked += 1;
                }
            }
            Ok(acc)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(per_path.into_iter().fold(DominanceOutcome::default(), DominanceOutcome::merge))
}

/// Five-point central difference of a scalar function's gradient.
pub fn fd_gradient(f: impl Fn(&DVector<f64>) -> Result<f64>, x: &DVector<f64>, h: f64) -> Result<DVector<f64>> {
    let mut g = DVector::zeros(x.len());
    for i in 0..x.len() {
        let at = |s: f64| {
            let mut p = x.clone();
            p[i] += s * h;
            f(&p)
        };
        g[i] = (-at(2.0)? + 8.0 * at(1.0)? - 8.0 * at(-1.0)? + at(-2.0)?) / (12.0 * h);
    }
    Ok(g)
}

/// `||a - b|| / max(||b||, 1)`.
pub fn relative_error(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    (a - b).norm() / b.norm().max(1.0)
}

/// Worst relative errors of the score and classifier gradient against finite
/// differences of the log densities, over `points` random draws.
pub fn gradient_oracle(functionals: &dyn Functionals, seed: u64, points: usize) -> Result<(f64, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = (0.0f64, 0.0f64);
    for _ in 0..points {
        let d = rng.random_range(1..=16);
        let k = rng.random_range(1..=5);
        let model = random_model(&mut rng, d, k)?;
        let y = rng.random_range(0..k);
        let t = rng.random_range(0.0..5.0);
        let x = gaussian(&mut rng, d) * 2.0;
        let score = functionals.conditional_score(&model, &x, y, t)?;
        let fd_score = fd_gradient(|p| model.marginal_log_density(p, t, Some(y)), &x, 1e-3)?;
        let grad = functionals.classifier_gradient(&model, &x, y, t)?;
        let fd_grad = fd_gradient(|p| Ok(model.log_posterior(p, t)?[y]), &x, 1e-3)?;
        worst.0 = worst.0.max(relative_error(&score, &fd_score));
        worst.1 = worst.1.max(relative_error(&grad, &fd_grad));
    }
    Ok(worst)
}

/// Least-squares slope of `log(1 - bound)` against `log eta`.
pub fn bound_decay_slope(model: &MixtureModel, y: usize, etas: &[f64]) -> Result<f64> {
    let d = model.dim();
    let x0 = DVector::zeros(d);
    let mu0 = DVector::zeros(d);
    let eps = model.check_assumption1(y, &mu0, None)?.epsilon;
    let spec = SamplerSpec::DdimContinuous {
        horizon: 10.0,
        substeps: 1000,
        method: Integrator::Rk4,
    };
    let baseline = spec.run(model, y, 0.0, &x0, &NoiseTape::zero(), 0)?;
    let base = BoundInputs::new(model, y, &mu0, eps, 0.0, 10.0, &x0, &baseline)?;
    let pts: Vec<(f64, f64)> = etas
        .iter()
        .map(|&eta| Ok((eta.ln(), (1.0 - ddim_confidence_bound(&base.clone().with_eta(eta))?.bound).ln())))
        .collect::<Result<_>>()?;
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    Ok(sxy / sxx)
}

/// Sign checks of `h` on uniform grids; returns the number of violations.
pub fn h_sign_violations(inputs: &PhaseInputs, k: usize, lo: f64, hi: f64, points: usize, want_positive: bool) -> Result<usize> {
    let mut bad = 0;
    for i in 1..=points {
        let v = lo + (hi - lo) * i as f64 / points as f64;
        let h = phase_h(v, k, inputs)?;
        if (want_positive && h <= 0.0) || (!want_positive && h >= 0.0) {
            bad += 1;
        }
    }
    Ok(bad)
}

/// Split statistics of centre-guided discrete DDIM on the aligned model.
pub fn split_fraction(mu: &DVector<f64>, schedule: &Schedule, eta: f64, n: usize, seed: u64) -> Result<(f64, f64)> {
    let model = MixtureModel::aligned_three(mu.clone())?;
    let spec = SamplerSpec::DdimDiscrete {
        schedule: schedule.clone(),
    };
    let finals = sample_ensemble(&model, 1, eta, n, &spec, &InitLaw::StandardGaussian, seed)?;
    let norm = mu.norm();
    let proj: Vec<f64> = finals.iter().map(|x| x.dot(mu) / norm).collect();
    let split = proj.iter().filter(|p| p.abs() > norm / 2.0).count() as f64 / n as f64;
    let positive = proj.iter().filter(|p| **p > 0.0).count() as f64 / n as f64;
    Ok((split, positive))
}

#[derive(Debug, Clone, Serialize)]
pub struct PropertyResult {
    pub name: &'static str,
    pub claim: &'static str,
    pub passed: bool,
    pub details: Value,
}

#[derive(Debug, Clone, Serialize)]
pub struct VerifyReport {
    pub functionals: &'static str,
    pub seed: u64,
    pub passed: bool,
    pub properties: Vec<PropertyResult>,
}

fn property(
    name: &'static str,
    claim: &'static str,
    check: impl FnOnce() -> Result<(bool, Value)>,
) -> PropertyResult {
    let (passed, details) = check().unwrap_or_else(|e| (false, json!({ "error": e.to_string() })));
    PropertyResult {
        name,
        claim,
        passed,
        details,
    }
}

fn symmetric_case() -> Result<DominanceCase> {
    DominanceCase::new(MixtureModel::symmetric_1d(), 0, DVector::from_element(1, 0.0))
}

fn separated_cases(seed: u64, count: usize) -> Result<Vec<DominanceCase>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|i| {
            let model = random_separated_model(&mut rng, 32, 2 + i % 4)?;
            let x0 = gaussian(&mut rng, 32);
            DominanceCase::new(model, 0, x0)
        })
        .collect()
}

fn dominance_over(cases: &[DominanceCase], specs: &[SamplerSpec], seed: u64, paths: u64) -> Result<DominanceOutcome> {
    let etas = [0.5, 1.0, 2.0, 5.0];
    let mut acc = DominanceOutcome::default();
    for case in cases {
        for spec in specs {
            acc = acc.merge(check_dominance(case, &etas, spec, seed, paths)?);
        }
    }
    Ok(acc)
}

fn outcome_json(o: &DominanceOutcome) -> Value {
    json!({
        "worst_margin": o.worst_margin,
        "worst_bound_excess": o.worst_bound_excess,
        "bounds_checked": o.bounds_checked,
        "runs": o.runs,
    })
}

/// Runs the full property suite.
pub fn run_verify(functionals: &dyn Functionals, seed: u64) -> VerifyReport {
    let schedule = || Schedule::constant_step(10.0, 0.01);
    let ddim_specs = || -> Result<Vec<SamplerSpec>> {
        Ok(vec![
            SamplerSpec::DdimContinuous {
                horizon: 10.0,
                substeps: 1000,
                method: Integrator::Rk4,
            },
            SamplerSpec::DdimDiscrete { schedule: schedule()? },
        ])
    };
    let ddpm_specs = || -> Result<Vec<SamplerSpec>> {
        Ok(vec![
            SamplerSpec::DdpmContinuous { schedule: schedule()? },
            SamplerSpec::DdpmDiscrete { schedule: schedule()? },
        ])
    };
    let mut props = Vec::new();

    props.push(property(
        "gradient_oracle",
        "the conditional score and the classifier gradient are the gradients of the log conditional density and the log posterior",
        || {
            let (score, grad) = gradient_oracle(functionals, seed, 40)?;
            Ok((score < 1e-6 && grad < 1e-6, json!({ "score_rel_err": score, "classifier_rel_err": grad, "points": 40 })))
        },
    ));

    props.push(property(
        "cfg_identity",
        "the conditional score equals the unconditional score plus the classifier gradient",
        || {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
            let mut worst = 0.0f64;
            for _ in 0..40 {
                let d = rng.random_range(1..=16);
                let k = rng.random_range(1..=5);
                let model = random_model(&mut rng, d, k)?;
                let y = rng.random_range(0..k);
                let t = rng.random_range(0.0..5.0);
                let x = gaussian(&mut rng, d) * 2.0;
                let lhs = functionals.conditional_score(&model, &x, y, t)?;
                let rhs = model.unconditional_score(&x, t)? + functionals.classifier_gradient(&model, &x, y, t)?;
                worst = worst.max(relative_error(&lhs, &rhs));
            }
            Ok((worst < 1e-10, json!({ "max_rel_err": worst })))
        },
    ));

    let cases = separated_cases(seed, 4).and_then(|mut c| {
        c.push(symmetric_case()?);
        Ok(c)
    });
    let simulate = |specs: Result<Vec<SamplerSpec>>, paths: u64| -> std::result::Result<DominanceOutcome, String> {
        let cases = cases.as_ref().map_err(|e| e.to_string())?;
        dominance_over(cases, &specs.map_err(|e| e.to_string())?, seed, paths).map_err(|e| e.to_string())
    };
    let ddim = simulate(ddim_specs(), 1);
    let ddpm = simulate(ddpm_specs(), 8);
    let reuse = |o: &std::result::Result<DominanceOutcome, String>| o.clone().map_err(Error::Config);

    props.push(property(
        "ddim_dominance",
        "deterministic guided sampling never lowers the confidence of the guided class, continuous and discrete",
        || {
            let o = reuse(&ddim)?;
            Ok((o.holds(1e-8), outcome_json(&o)))
        },
    ));

    props.push(property(
        "ddpm_dominance",
        "stochastic guided sampling never lowers the confidence of the guided class under shared noise, continuous and discrete",
        || {
            let o = reuse(&ddpm)?;
            Ok((o.holds(1e-8), outcome_json(&o)))
        },
    ));

    props.push(property(
        "two_cluster_dominance",
        "for any two-component mixture guidance raises the confidence of the guided class without a separation condition",
        || {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x2c);
            let mut acc = DominanceOutcome::default();
            let mut specs = ddim_specs()?;
            specs.extend(ddpm_specs()?);
            for _ in 0..3 {
                let means = vec![gaussian(&mut rng, 4) * 1.5, gaussian(&mut rng, 4) * 1.5];
                let w = rng.random_range(0.2..0.8);
                let model = MixtureModel::isotropic(vec![w, 1.0 - w], means)?;
                let case = DominanceCase::new(model, 0, gaussian(&mut rng, 4))?;
                for spec in &specs {
                    acc = acc.merge(check_dominance(&case, &[0.5, 1.0, 2.0, 5.0], spec, seed, 4)?);
                }
            }
            Ok((acc.holds(1e-8) && acc.bounds_hold(1e-6), outcome_json(&acc)))
        },
    ));

    props.push(property(
        "bounds_vs_simulation",
        "the quantitative confidence lower bounds never exceed the simulated guided confidence, and 1 - bound decays at the stated rate",
        || {
            let o = reuse(&ddim)?.merge(reuse(&ddpm)?);
            let slope = bound_decay_slope(&MixtureModel::orthonormal(3, 3)?, 0, &[10.0, 100.0, 1000.0])?;
            let ok = o.bounds_hold(1e-6) && o.bounds_checked > 0 && (-1.3..=-0.7).contains(&slope);
            Ok((ok, json!({ "simulation": outcome_json(&o), "decay_slope": slope })))
        },
    ));

    props.push(property(
        "entropy_reduction",
        "guidance does not increase the differential entropy of the continuous deterministic sampler's output",
        || {
            let model = MixtureModel::symmetric_1d();
            let spec = SamplerSpec::DdimContinuous {
                horizon: 10.0,
                substeps: 200,
                method: Integrator::Rk4,
            };
            let method = EntropyMethod::default();
            let mut est = Vec::new();
            for eta in [0.0, 8.0] {
                let xs = sample_ensemble(&model, 0, eta, 2000, &spec, &InitLaw::StandardGaussian, seed)?;
                est.push(method.estimate(&xs)?);
            }
            let se = est[0].combined_stderr(&est[1]);
            let ok = est[1].value < est[0].value - 3.0 * se;
            Ok((ok, json!({ "h_eta0": est[0].value, "h_eta8": est[1].value, "combined_stderr": se })))
        },
    ));

    props.push(property(
        "discrete_entropy",
        "under the step-size conditions discrete guided sampling does not increase entropy",
        || {
            let one = |sq: f64| MixtureModel::isotropic(vec![0.5, 0.5], vec![DVector::from_vec(vec![sq.sqrt(), 0.0]), DVector::zeros(2)]);
            let m2 = one(2.0)?;
            let pass = entropy_step_condition(&m2, 1.0, &Schedule::constant_step(1.0, 0.01)?)?;
            let fail = entropy_step_condition(&m2, 1.0, &Schedule::from_steps(0.4, vec![0.4])?)?;
            let zero = entropy_step_condition(&m2, 0.0, &Schedule::constant_step(2.4, 0.24)?)?;
            let examples = pass.all_hold
                && (pass.steps[0].drift_terms - 0.03).abs() < 1e-12
                && !fail.steps[0].second
                && (fail.steps[0].delta + fail.steps[0].drift_terms - 1.6).abs() < 1e-12
                && zero.all_hold;
            let model = MixtureModel::symmetric_1d();
            let sched = Schedule::constant_step(10.0, 0.01)?;
            let cond = entropy_step_condition(&model, 1.0, &sched)?;
            let spec = SamplerSpec::DdimDiscrete { schedule: sched };
            let method = EntropyMethod::default();
            let mut est = Vec::new();
            for eta in [0.0, 1.0] {
                let xs = sample_ensemble(&model, 0, eta, 2000, &spec, &InitLaw::StandardGaussian, seed)?;
                est.push(method.estimate(&xs)?);
            }
            let se = est[0].combined_stderr(&est[1]);
            let ok = examples && cond.all_hold && est[1].value <= est[0].value + 3.0 * se;
            Ok((
                ok,
                json!({
                    "substitution_examples": examples,
                    "condition_holds": cond.all_hold,
                    "h_unguided": est[0].value,
                    "h_guided": est[1].value,
                    "combined_stderr": se,
                }),
            ))
        },
    ));

    props.push(property(
        "phase_transition",
        "centre-label guidance contracts the middle cluster below a strength threshold and splits it above a second threshold",
        || {
            let mu = DVector::from_vec(vec![2.0, 2.0]);
            let coarse = PhaseInputs::new(mu.clone(), Schedule::constant_step(10.0, 0.1)?, 1.0)?;
            let fine = PhaseInputs::new(mu.clone(), Schedule::constant_step(10.0, 0.04)?, 1.0)?;
            let eta0_coarse = phase_thresholds(&coarse)?.eta0;
            let eta0_fine = phase_thresholds(&fine)?.eta0;
            let thresholds_ok = (eta0_coarse - 1.25).abs() < 1e-12 && (eta0_fine - 3.125).abs() < 1e-12;
            let mut contract_bad = 0;
            for &k in &coarse.admissible_steps() {
                contract_bad += h_sign_violations(&coarse, k, 0.0, 10.0, 500, false)?;
            }
            let model = MixtureModel::aligned_three(mu.clone())?;
            let mut trajectory_bad = 0;
            for v0 in [-6.0, -1.0, 0.3, 4.0] {
                let mut x = &mu * (v0 / coarse.mu_sq());
                let mut v = coarse.coordinate(&x);
                for k in 0..coarse.schedule.len() {
                    x = step_ddim_discrete(&model, 1, 1.0, &x, k, &coarse.schedule)?;
                    let next = coarse.coordinate(&x);
                    if next.abs() >= v.abs() {
                        trajectory_bad += 1;
                    }
                    v = next;
                }
            }
            let split = coarse.with_eta(2.0 * phase_thresholds(&coarse)?.eta0_prime)?;
            let th = phase_thresholds(&split)?;
            let mut split_bad = 0;
            if let (Some(a), Some(b)) = (th.a, th.b) {
                for &k in &split.admissible_steps() {
                    split_bad += h_sign_violations(&split, k, 0.0, a, 500, true)?;
                    split_bad += h_sign_violations(&split, k, b, 10.0 * b, 500, false)?;
                }
            } else {
                split_bad = usize::MAX;
            }
            let (frac, balance) = split_fraction(&mu, &coarse.schedule, split.eta, 500, seed)?;
            let (frac_low, _) = split_fraction(&mu, &coarse.schedule, 1.0, 500, seed)?;
            let phase = crate::theory::classify_phase(&split);
            let ok = thresholds_ok
                && contract_bad == 0
                && trajectory_bad == 0
                && split_bad == 0
                && phase == Phase::Splitting
                && frac > 0.9
                && frac > frac_low
                && (0.3..=0.7).contains(&balance);
            Ok((
                ok,
                json!({
                    "eta0": [eta0_coarse, eta0_fine],
                    "contraction_violations": contract_bad,
                    "trajectory_violations": trajectory_bad,
                    "split_violations": split_bad,
                    "a": th.a,
                    "b": th.b,
                    "frac_split_low": frac_low,
                    "frac_split_high": frac,
                    "sign_balance": balance,
                }),
            ))
        },
    ));

    props.push(property(
        "estimator_calibration",
        "the entropy estimators recover the entropy of standard Gaussians",
        || {
            let target1 = 0.5 * (2.0 * std::f64::consts::PI * std::f64::consts::E).ln();
            let tape = NoiseTape::new(seed);
            let draw = |d: usize, n: usize| -> Vec<DVector<f64>> { (0..n as u64).map(|i| tape.initial_state(i, d)).collect() };
            let one: Vec<f64> = draw(1, 4000).iter().map(|x| x[0]).collect();
            let spacing = spacing_entropy_1d(&one, None, SpacingVariant::Vasicek)?.value;
            let knn = knn_entropy(&draw(2, 4000), 3)?.value;
            let kde = kde_mc_entropy(&draw(1, 2000), Bandwidth::Scott)?.value;
            let ok = (spacing - target1).abs() < 0.05 && (knn - 2.0 * target1).abs() < 0.08 && (kde - target1).abs() < 0.10;
            Ok((ok, json!({ "spacing": spacing, "knn_2d": knn, "kde_mc": kde, "target_1d": target1 })))
        },
    ));

    let passed = props.iter().all(|p| p.passed);
    VerifyReport {
        functionals: functionals.name(),
        seed,
        passed,
        properties: props,
    }
}
