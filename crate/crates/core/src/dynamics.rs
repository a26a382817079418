//! Reverse-time samplers: fine-step integration of the guided ODE/SDE, the Euler
//! discretisations applied verbatim, and shared-noise coupling of guided and unguided
//! paths.

use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::gmm::{MixtureModel, Sampler, Workspace};

/// Fixed-step ODE scheme.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Integrator {
    Euler,
    #[default]
    Rk4,
}

/// Time grid `0 = t_0 < t_1 < ... < t_K <= T`.
#[derive(Debug, Clone, PartialEq)]
pub struct Schedule {
    knots: Vec<f64>,
    steps: Vec<f64>,
    horizon: f64,
}

impl Schedule {
    /// Builds a grid from explicit step sizes; `t_{k+1} = sum_{i <= k} delta_i`.
    pub fn from_steps(horizon: f64, steps: Vec<f64>) -> Result<Self> {
        if !horizon.is_finite() || horizon <= 0.0 {
            return Err(invalid("schedule", format!("horizon must be positive, got {horizon}")));
        }
        if steps.is_empty() {
            return Err(invalid("schedule", "at least one step is required"));
        }
        if let Some(bad) = steps.iter().find(|d| !d.is_finite() || **d <= 0.0) {
            return Err(invalid("schedule", format!("step sizes must be positive, got {bad}")));
        }
        let mut knots = Vec::with_capacity(steps.len() + 1);
        let mut t = 0.0;
        knots.push(t);
        for d in &steps {
            t += d;
            knots.push(t);
        }
        if t > horizon * (1.0 + 1e-12) {
            return Err(invalid(
                "schedule",
                format!("steps sum to {t}, beyond the horizon {horizon}"),
            ));
        }
        Ok(Schedule {
            knots,
            steps,
            horizon,
        })
    }

    /// `K` equal steps of size `T / K`.
    pub fn uniform(horizon: f64, num_steps: usize) -> Result<Self> {
        if num_steps == 0 {
            return Err(invalid("schedule", "at least one step is required"));
        }
        Self::from_steps(horizon, vec![horizon / num_steps as f64; num_steps])
    }

    /// Constant step `delta`, as many steps as fit in `[0, T]`.
    pub fn constant_step(horizon: f64, delta: f64) -> Result<Self> {
        if !delta.is_finite() || delta <= 0.0 {
            return Err(invalid("schedule", format!("step size must be positive, got {delta}")));
        }
        let ratio = horizon / delta;
        let k = if (ratio - ratio.round()).abs() < 1e-9 {
            ratio.round()
        } else {
            ratio.floor()
        } as usize;
        Self::from_steps(horizon, vec![delta; k.max(1)])
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    pub fn steps(&self) -> &[f64] {
        &self.steps
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    /// Number of steps `K`.
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn delta_max(&self) -> f64 {
        self.steps.iter().copied().fold(0.0, f64::max)
    }

    pub fn delta_min(&self) -> f64 {
        self.steps.iter().copied().fold(f64::INFINITY, f64::min)
    }

    /// Backward time `T - t_k` seen by step `k`.
    pub fn backward_time(&self, k: usize) -> f64 {
        (self.horizon - self.knots[k]).max(0.0)
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Counter-based source of standard normal increments.
///
/// The increment for `(path, step)` depends only on `(seed, path, step)`, so paths can be
/// generated in any order or in parallel and replayed bit-identically.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NoiseTape {
    seed: Option<u64>,
}

const INIT_STEP: u64 = u64::MAX;

impl NoiseTape {
    pub fn new(seed: u64) -> Self {
        NoiseTape { seed: Some(seed) }
    }

    /// Tape whose increments are all zero.
    pub fn zero() -> Self {
        NoiseTape { seed: None }
    }

    pub fn seed(&self) -> Option<u64> {
        self.seed
    }

    fn fill_counter(&self, path: u64, counter: u64, out: &mut [f64]) {
        match self.seed {
            None => out.iter_mut().for_each(|v| *v = 0.0),
            Some(seed) => {
                let key = splitmix64(splitmix64(splitmix64(seed) ^ path) ^ counter);
                let mut rng = ChaCha8Rng::seed_from_u64(key);
                for v in out.iter_mut() {
                    *v = StandardNormal.sample(&mut rng);
                }
            }
        }
    }

    /// Writes the step-`step` increment of path `path` into `out`.
    pub fn fill(&self, path: u64, step: usize, out: &mut [f64]) {
        self.fill_counter(path, step as u64, out);
    }

    pub fn increment(&self, path: u64, step: usize, dim: usize) -> DVector<f64> {
        let mut out = DVector::zeros(dim);
        self.fill(path, step, out.as_mut_slice());
        out
    }

    /// Standard normal initial state for `path`, drawn from a counter reserved for it.
    pub fn initial_state(&self, path: u64, dim: usize) -> DVector<f64> {
        let mut out = DVector::zeros(dim);
        self.fill_counter(path, INIT_STEP, out.as_mut_slice());
        out
    }

    fn materialize(&self, path: u64, steps: usize, dim: usize) -> Vec<f64> {
        let mut out = vec![0.0; steps * dim];
        for (k, chunk) in out.chunks_mut(dim).enumerate() {
            self.fill(path, k, chunk);
        }
        out
    }
}

/// Which process produced a trajectory.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SamplerKind {
    DdimCont,
    DdpmCont,
    DdimDisc,
    DdpmDisc,
}

impl SamplerKind {
    pub fn sampler(self) -> Sampler {
        match self {
            SamplerKind::DdimCont | SamplerKind::DdimDisc => Sampler::Ddim,
            SamplerKind::DdpmCont | SamplerKind::DdpmDisc => Sampler::Ddpm,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            SamplerKind::DdimCont => "ddim-cont",
            SamplerKind::DdpmCont => "ddpm-cont",
            SamplerKind::DdimDisc => "ddim-disc",
            SamplerKind::DdpmDisc => "ddpm-disc",
        }
    }
}

/// States and confidences recorded at the knots of a run.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<DVector<f64>>,
    pub confidence: Vec<f64>,
    pub label: usize,
    pub eta: f64,
    pub kind: SamplerKind,
}

impl Trajectory {
    pub fn terminal(&self) -> &DVector<f64> {
        self.states.last().expect("trajectory has at least the initial state")
    }

    pub fn terminal_confidence(&self) -> f64 {
        *self.confidence.last().expect("non-empty")
    }

    pub fn max_confidence(&self) -> f64 {
        self.confidence.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }
}

/// Complete description of a sampler run, minus the model, label and strength.
#[derive(Debug, Clone, PartialEq)]
pub enum SamplerSpec {
    /// Probability-flow ODE integrated with `substeps` equal steps.
    DdimContinuous {
        horizon: f64,
        substeps: usize,
        method: Integrator,
    },
    /// Euler-Maruyama on the reverse SDE.
    DdpmContinuous { schedule: Schedule },
    /// Euler update of the guided ODE with the score terms applied verbatim.
    DdimDiscrete { schedule: Schedule },
    /// Euler update of the guided SDE with injected `sqrt(2 delta_k) W_k`.
    DdpmDiscrete { schedule: Schedule },
}

impl SamplerSpec {
    pub fn kind(&self) -> SamplerKind {
        match self {
            SamplerSpec::DdimContinuous { .. } => SamplerKind::DdimCont,
            SamplerSpec::DdpmContinuous { .. } => SamplerKind::DdpmCont,
            SamplerSpec::DdimDiscrete { .. } => SamplerKind::DdimDisc,
            SamplerSpec::DdpmDiscrete { .. } => SamplerKind::DdpmDisc,
        }
    }

    pub fn horizon(&self) -> f64 {
        match self {
            SamplerSpec::DdimContinuous { horizon, .. } => *horizon,
            SamplerSpec::DdpmContinuous { schedule }
            | SamplerSpec::DdimDiscrete { schedule }
            | SamplerSpec::DdpmDiscrete { schedule } => schedule.horizon(),
        }
    }

    pub fn is_stochastic(&self) -> bool {
        matches!(
            self,
            SamplerSpec::DdpmContinuous { .. } | SamplerSpec::DdpmDiscrete { .. }
        )
    }

    /// Number of knots after the initial one.
    pub fn num_steps(&self) -> usize {
        match self {
            SamplerSpec::DdimContinuous { substeps, .. } => *substeps,
            SamplerSpec::DdpmContinuous { schedule }
            | SamplerSpec::DdimDiscrete { schedule }
            | SamplerSpec::DdpmDiscrete { schedule } => schedule.len(),
        }
    }

    /// Runs one path and records every knot.
    pub fn run(
        &self,
        model: &MixtureModel,
        y: usize,
        eta: f64,
        x0: &DVector<f64>,
        noise: &NoiseTape,
        path: u64,
    ) -> Result<Trajectory> {
        let increments = self.increments(model, noise, path);
        let mut rec = Recorder::new(model, y, true);
        evolve(model, y, eta, x0, self, increments.as_deref(), &mut rec)?;
        Ok(rec.finish(y, eta, self.kind()))
    }

    /// Runs one path and returns the terminal state only.
    pub fn terminal(
        &self,
        model: &MixtureModel,
        y: usize,
        eta: f64,
        x0: &DVector<f64>,
        noise: &NoiseTape,
        path: u64,
    ) -> Result<DVector<f64>> {
        let increments = self.increments(model, noise, path);
        let mut rec = Recorder::new(model, y, false);
        evolve(model, y, eta, x0, self, increments.as_deref(), &mut rec)
    }

    fn increments(&self, model: &MixtureModel, noise: &NoiseTape, path: u64) -> Option<Vec<f64>> {
        self.is_stochastic()
            .then(|| noise.materialize(path, self.num_steps(), model.dim()))
    }
}

struct Recorder<'a> {
    model: &'a MixtureModel,
    label: usize,
    enabled: bool,
    times: Vec<f64>,
    states: Vec<DVector<f64>>,
    confidence: Vec<f64>,
}

impl<'a> Recorder<'a> {
    fn new(model: &'a MixtureModel, label: usize, enabled: bool) -> Self {
        Recorder {
            model,
            label,
            enabled,
            times: Vec::new(),
            states: Vec::new(),
            confidence: Vec::new(),
        }
    }

    fn push(&mut self, t: f64, x: &DVector<f64>, step: usize, eta: f64, kind: SamplerKind) -> Result<()> {
        if self.enabled {
            let c = self.model.confidence(x, self.label)?;
            if !c.is_finite() {
                return Err(Error::Diverged {
                    step,
                    eta,
                    sampler: kind.name(),
                });
            }
            self.confidence.push(c);
            self.times.push(t);
            self.states.push(x.clone());
        }
        Ok(())
    }

    fn finish(self, label: usize, eta: f64, kind: SamplerKind) -> Trajectory {
        Trajectory {
            times: self.times,
            states: self.states,
            confidence: self.confidence,
            label,
            eta,
            kind,
        }
    }
}

fn check_eta(op: &'static str, eta: f64) -> Result<()> {
    if eta.is_finite() && eta >= 0.0 {
        Ok(())
    } else {
        Err(invalid(op, format!("guidance strength must be >= 0, got {eta}")))
    }
}

fn ensure_finite(x: &DVector<f64>, step: usize, eta: f64, sampler: &'static str) -> Result<()> {
    if x.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Diverged { step, eta, sampler })
    }
}

fn evolve(
    model: &MixtureModel,
    y: usize,
    eta: f64,
    x0: &DVector<f64>,
    spec: &SamplerSpec,
    increments: Option<&[f64]>,
    rec: &mut Recorder<'_>,
) -> Result<DVector<f64>> {
    model.check_label(y)?;
    check_eta("sampler", eta)?;
    if x0.len() != model.dim() {
        return Err(invalid("sampler", "initial state has the wrong dimension"));
    }
    if x0.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { op: "sampler" });
    }
    let d = model.dim();
    let kind = spec.kind();
    let mut x = x0.clone();
    rec.push(0.0, &x, 0, eta, kind)?;
    match spec {
        SamplerSpec::DdimContinuous {
            horizon,
            substeps,
            method,
        } => {
            if *substeps == 0 || !horizon.is_finite() || *horizon <= 0.0 {
                return Err(invalid("integrate_ddim", "need substeps >= 1 and a positive horizon"));
            }
            let h = horizon / *substeps as f64;
            let mut ws = Workspace::new(model);
            let mut k1 = vec![0.0; d];
            let mut k2 = vec![0.0; d];
            let mut k3 = vec![0.0; d];
            let mut k4 = vec![0.0; d];
            let mut tmp = vec![0.0; d];
            let tau = |t: f64| (horizon - t).max(0.0);
            for j in 0..*substeps {
                let t = j as f64 * h;
                let xs = x.as_mut_slice();
                match method {
                    Integrator::Euler => {
                        model.drift_into(xs, y, eta, tau(t), Sampler::Ddim, &mut k1, &mut ws);
                        for i in 0..d {
                            xs[i] += h * k1[i];
                        }
                    }
                    Integrator::Rk4 => {
                        model.drift_into(xs, y, eta, tau(t), Sampler::Ddim, &mut k1, &mut ws);
                        for i in 0..d {
                            tmp[i] = xs[i] + 0.5 * h * k1[i];
                        }
                        model.drift_into(&tmp, y, eta, tau(t + 0.5 * h), Sampler::Ddim, &mut k2, &mut ws);
                        for i in 0..d {
                            tmp[i] = xs[i] + 0.5 * h * k2[i];
                        }
                        model.drift_into(&tmp, y, eta, tau(t + 0.5 * h), Sampler::Ddim, &mut k3, &mut ws);
                        for i in 0..d {
                            tmp[i] = xs[i] + h * k3[i];
                        }
                        model.drift_into(&tmp, y, eta, tau(t + h), Sampler::Ddim, &mut k4, &mut ws);
                        for i in 0..d {
                            xs[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
                        }
                    }
                }
                ensure_finite(&x, j, eta, kind.name())?;
                rec.push((j + 1) as f64 * h, &x, j, eta, kind)?;
            }
        }
        SamplerSpec::DdpmContinuous { schedule } => {
            let mut ws = Workspace::new(model);
            let mut drift = vec![0.0; d];
            for k in 0..schedule.len() {
                let delta = schedule.steps()[k];
                model.drift_into(
                    x.as_slice(),
                    y,
                    eta,
                    schedule.backward_time(k),
                    Sampler::Ddpm,
                    &mut drift,
                    &mut ws,
                );
                let noise_scale = (2.0 * delta).sqrt();
                let xs = x.as_mut_slice();
                for i in 0..d {
                    let w = increments.map_or(0.0, |inc| inc[k * d + i]);
                    xs[i] += delta * drift[i] + noise_scale * w;
                }
                ensure_finite(&x, k, eta, kind.name())?;
                rec.push(schedule.knots()[k + 1], &x, k, eta, kind)?;
            }
        }
        SamplerSpec::DdimDiscrete { schedule } => {
            for k in 0..schedule.len() {
                x = step_ddim_discrete(model, y, eta, &x, k, schedule)?;
                ensure_finite(&x, k, eta, kind.name())?;
                rec.push(schedule.knots()[k + 1], &x, k, eta, kind)?;
            }
        }
        SamplerSpec::DdpmDiscrete { schedule } => {
            let mut w = DVector::zeros(d);
            for k in 0..schedule.len() {
                if let Some(inc) = increments {
                    w.as_mut_slice().copy_from_slice(&inc[k * d..(k + 1) * d]);
                }
                x = step_ddpm_discrete(model, y, eta, &x, k, schedule, &w)?;
                ensure_finite(&x, k, eta, kind.name())?;
                rec.push(schedule.knots()[k + 1], &x, k, eta, kind)?;
            }
        }
    }
    Ok(x)
}

/// Integrates the guided probability-flow ODE over `[0, T]` with `substeps` equal steps.
pub fn integrate_ddim(
    model: &MixtureModel,
    y: usize,
    eta: f64,
    x0: &DVector<f64>,
    horizon: f64,
    substeps: usize,
    method: Integrator,
) -> Result<Trajectory> {
    SamplerSpec::DdimContinuous {
        horizon,
        substeps,
        method,
    }
    .run(model, y, eta, x0, &NoiseTape::zero(), 0)
}

/// Euler-Maruyama on the guided reverse SDE using increments of `path` from `noise`.
pub fn integrate_ddpm(
    model: &MixtureModel,
    y: usize,
    eta: f64,
    x0: &DVector<f64>,
    schedule: &Schedule,
    noise: &NoiseTape,
    path: u64,
) -> Result<Trajectory> {
    SamplerSpec::DdpmContinuous {
        schedule: schedule.clone(),
    }
    .run(model, y, eta, x0, noise, path)
}

fn check_step_index(op: &'static str, k: usize, schedule: &Schedule) -> Result<()> {
    if k < schedule.len() {
        Ok(())
    } else {
        Err(invalid(op, format!("step index {k} out of range for K = {}", schedule.len())))
    }
}

/// `X_{k+1} = X_k + delta_k (X_k + grad log p(X_k | y) + eta grad log p(y | X_k))`,
/// all functionals taken at backward time `T - t_k`.
pub fn step_ddim_discrete(
    model: &MixtureModel,
    y: usize,
    eta: f64,
    x: &DVector<f64>,
    k: usize,
    schedule: &Schedule,
) -> Result<DVector<f64>> {
    check_step_index("step_ddim_discrete", k, schedule)?;
    check_eta("step_ddim_discrete", eta)?;
    let tau = schedule.backward_time(k);
    let delta = schedule.steps()[k];
    let score = model.conditional_score(x, y, tau)?;
    let guide = model.classifier_gradient(x, y, tau)?;
    Ok(x + (x + score + guide * eta) * delta)
}

/// Discrete DDPM update with doubled score and guidance terms and injected noise `w`.
pub fn step_ddpm_discrete(
    model: &MixtureModel,
    y: usize,
    eta: f64,
    x: &DVector<f64>,
    k: usize,
    schedule: &Schedule,
    w: &DVector<f64>,
) -> Result<DVector<f64>> {
    check_step_index("step_ddpm_discrete", k, schedule)?;
    check_eta("step_ddpm_discrete", eta)?;
    let tau = schedule.backward_time(k);
    let delta = schedule.steps()[k];
    let score = model.conditional_score(x, y, tau)?;
    let guide = model.classifier_gradient(x, y, tau)?;
    Ok(x + (x + score * 2.0 + guide * (2.0 * eta)) * delta + w * (2.0 * delta).sqrt())
}

/// Guided and unguided trajectories sharing initialisation and noise.
#[derive(Debug, Clone)]
pub struct CoupledRun {
    pub eta: f64,
    pub guided: Trajectory,
    pub unguided: Trajectory,
    pub shared_init: DVector<f64>,
    /// Present for stochastic samplers.
    pub shared_noise: Option<NoiseTape>,
}

/// Runs one path per guidance strength, all sharing `init` and the noise of `path`.
///
/// `etas` must contain `0`, the comparison baseline.
pub fn run_coupled(
    model: &MixtureModel,
    y: usize,
    etas: &[f64],
    init: &DVector<f64>,
    spec: &SamplerSpec,
    seed: u64,
    path: u64,
) -> Result<Vec<CoupledRun>> {
    if !etas.contains(&0.0) {
        return Err(invalid("run_coupled", "the guidance list must contain 0"));
    }
    let tape = NoiseTape::new(seed);
    let increments = spec.increments(model, &tape, path);
    let run = |eta: f64| -> Result<Trajectory> {
        let mut rec = Recorder::new(model, y, true);
        evolve(model, y, eta, init, spec, increments.as_deref(), &mut rec)?;
        Ok(rec.finish(y, eta, spec.kind()))
    };
    let unguided = run(0.0)?;
    let shared_noise = spec.is_stochastic().then_some(tape);
    etas.iter()
        .map(|&eta| {
            let guided = if eta == 0.0 { unguided.clone() } else { run(eta)? };
            Ok(CoupledRun {
                eta,
                guided,
                unguided: unguided.clone(),
                shared_init: init.clone(),
                shared_noise,
            })
        })
        .collect()
}

/// Initial law of an ensemble.
#[derive(Debug, Clone, PartialEq)]
pub enum InitLaw {
    Point(DVector<f64>),
    StandardGaussian,
}

impl InitLaw {
    pub fn sample(&self, dim: usize, tape: &NoiseTape, path: u64) -> DVector<f64> {
        match self {
            InitLaw::Point(x) => x.clone(),
            InitLaw::StandardGaussian => tape.initial_state(path, dim),
        }
    }
}

/// Terminal states of `n` independent paths; path `i` uses counter `i` of the tape
/// seeded with `seed`, so ensembles for different strengths are coupled.
pub fn sample_ensemble(
    model: &MixtureModel,
    y: usize,
    eta: f64,
    n: usize,
    spec: &SamplerSpec,
    init: &InitLaw,
    seed: u64,
) -> Result<Vec<DVector<f64>>> {
    if n == 0 {
        return Err(invalid("sample_ensemble", "need at least one sample"));
    }
    if let InitLaw::Point(x) = init {
        if x.len() != model.dim() {
            return Err(invalid("sample_ensemble", "initial point has the wrong dimension"));
        }
    }
    let tape = NoiseTape::new(seed);
    (0..n as u64)
        .into_par_iter()
        .map(|i| {
            let x0 = init.sample(model.dim(), &tape, i);
            spec.terminal(model, y, eta, &x0, &tape, i)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn v(xs: &[f64]) -> DVector<f64> {
        DVector::from_vec(xs.to_vec())
    }

    #[test]
    fn schedule_invariants() {
        let s = Schedule::uniform(10.0, 1000).unwrap();
        assert_eq!(s.len(), 1000);
        assert!(s.steps().iter().all(|d| *d == 0.01));
        let mut acc = 0.0;
        for k in 0..s.len() {
            acc += s.steps()[k];
            assert!((s.knots()[k + 1] - acc).abs() <= 1e-12);
        }
        let c = Schedule::constant_step(10.0, 0.1).unwrap();
        assert_eq!(c.len(), 100);
        let odd = Schedule::constant_step(1.0, 0.3).unwrap();
        assert_eq!(odd.len(), 3);
        assert!(odd.knots()[3] <= 1.0);
        assert!(Schedule::from_steps(1.0, vec![0.5, 0.0]).is_err());
        assert!(Schedule::from_steps(1.0, vec![0.6, 0.6]).is_err());
        let mixed = Schedule::from_steps(2.0, vec![0.5, 1.0, 0.25]).unwrap();
        assert_eq!(mixed.delta_max(), 1.0);
        assert_eq!(mixed.delta_min(), 0.25);
    }

    #[test]
    fn tape_is_counter_based() {
        let t = NoiseTape::new(42);
        let a = t.increment(3, 17, 5);
        let _ = t.increment(0, 0, 5);
        assert_eq!(a, t.increment(3, 17, 5));
        assert_ne!(a, t.increment(3, 18, 5));
        assert_ne!(a, t.increment(4, 17, 5));
        assert_ne!(a, NoiseTape::new(43).increment(3, 17, 5));
        assert_eq!(NoiseTape::zero().increment(1, 1, 3), DVector::zeros(3));
    }

    #[test]
    fn ddim_closed_form_single_component() {
        let mu = v(&[1.0, -2.0, 0.5]);
        let m = MixtureModel::isotropic(vec![1.0], vec![mu.clone()]).unwrap();
        let traj = integrate_ddim(&m, 0, 0.0, &DVector::zeros(3), 10.0, 1000, Integrator::Rk4).unwrap();
        let expected = &mu * (1.0 - (-10f64).exp());
        assert!((traj.terminal() - expected).amax() < 1e-6);
        assert_eq!(traj.len(), 1001);
        assert_relative_eq!(*traj.times.last().unwrap(), 10.0, epsilon = 1e-12);
    }

    #[test]
    fn eta_zero_equals_unguided_field() {
        let m = MixtureModel::equidistant_three();
        let x0 = v(&[0.3, -0.2]);
        let a = integrate_ddim(&m, 1, 0.0, &x0, 2.0, 50, Integrator::Euler).unwrap();
        // explicit Euler on x + s_tau(x, y)
        let mut x = x0.clone();
        let h = 2.0 / 50.0;
        for j in 0..50 {
            let tau = 2.0 - j as f64 * h;
            x = &x + (&x + m.conditional_score(&x, 1, tau).unwrap()) * h;
        }
        assert_relative_eq!(a.terminal().clone(), x, epsilon = 1e-12);
    }

    #[test]
    fn ddpm_zero_noise_is_deterministic_euler() {
        let m = MixtureModel::isotropic(vec![1.0], vec![v(&[2.0])]).unwrap();
        let s = Schedule::uniform(3.0, 300).unwrap();
        let traj = integrate_ddpm(&m, 0, 0.0, &v(&[0.5]), &s, &NoiseTape::zero(), 0).unwrap();
        let mut x = 0.5;
        for k in 0..300 {
            let tau = s.backward_time(k);
            x += 0.01 * (-x + 2.0 * (-tau).exp() * 2.0);
        }
        assert_relative_eq!(traj.terminal()[0], x, epsilon = 1e-12);
    }

    #[test]
    fn ddpm_replay_is_bit_identical() {
        let m = MixtureModel::equidistant_three();
        let s = Schedule::uniform(5.0, 200).unwrap();
        let tape = NoiseTape::new(9);
        let a = integrate_ddpm(&m, 0, 2.0, &v(&[0.0, 0.0]), &s, &tape, 4).unwrap();
        let b = integrate_ddpm(&m, 0, 2.0, &v(&[0.0, 0.0]), &s, &tape, 4).unwrap();
        assert_eq!(a, b);
        let c = integrate_ddpm(&m, 0, 2.0, &v(&[0.0, 0.0]), &s, &tape, 5).unwrap();
        assert_ne!(a.terminal(), c.terminal());
    }

    #[test]
    fn discrete_ddim_single_component_update() {
        let mu = v(&[1.0, 3.0]);
        let m = MixtureModel::isotropic(vec![1.0], vec![mu.clone()]).unwrap();
        let s = Schedule::from_steps(4.0, vec![0.5, 0.25, 1.0]).unwrap();
        let x = v(&[-0.4, 0.9]);
        for k in 0..3 {
            let next = step_ddim_discrete(&m, 0, 0.0, &x, k, &s).unwrap();
            let expected = &x + &mu * (s.steps()[k] * (-(4.0 - s.knots()[k])).exp());
            assert_relative_eq!(next, expected, epsilon = 1e-14);
        }
        assert!(step_ddim_discrete(&m, 0, 0.0, &x, 3, &s).is_err());
    }

    #[test]
    fn discrete_ddpm_minus_ddim_is_score_plus_guidance() {
        let m = MixtureModel::equidistant_three();
        let s = Schedule::uniform(2.0, 8).unwrap();
        let x = v(&[0.7, -1.2]);
        let (eta, k) = (3.0, 5);
        let zero = DVector::zeros(2);
        let a = step_ddpm_discrete(&m, 2, eta, &x, k, &s, &zero).unwrap();
        let b = step_ddim_discrete(&m, 2, eta, &x, k, &s).unwrap();
        let tau = s.backward_time(k);
        let expected = (m.conditional_score(&x, 2, tau).unwrap()
            + m.classifier_gradient(&x, 2, tau).unwrap() * eta)
            * s.steps()[k];
        assert_relative_eq!(a - b, expected, epsilon = 1e-13);
    }

    #[test]
    fn continuous_ddpm_matches_discrete_ddpm_on_the_same_grid() {
        let m = MixtureModel::equidistant_three();
        let s = Schedule::uniform(3.0, 150).unwrap();
        let tape = NoiseTape::new(11);
        let x0 = v(&[0.1, 0.2]);
        let cont = SamplerSpec::DdpmContinuous { schedule: s.clone() }
            .run(&m, 0, 1.5, &x0, &tape, 2)
            .unwrap();
        let disc = SamplerSpec::DdpmDiscrete { schedule: s }
            .run(&m, 0, 1.5, &x0, &tape, 2)
            .unwrap();
        for (a, b) in cont.states.iter().zip(&disc.states) {
            assert!((a - b).amax() < 1e-11);
        }
    }

    #[test]
    fn coupled_runs_share_init_and_noise() {
        let m = MixtureModel::equidistant_three();
        let spec = SamplerSpec::DdpmDiscrete {
            schedule: Schedule::uniform(2.0, 100).unwrap(),
        };
        let runs = run_coupled(&m, 0, &[0.0, 1.0, 4.0], &v(&[0.2, 0.1]), &spec, 5, 0).unwrap();
        assert_eq!(runs.len(), 3);
        assert_eq!(runs[0].guided, runs[0].unguided);
        for r in &runs {
            assert_eq!(r.unguided, runs[0].unguided);
            assert_eq!(r.guided.states[0], r.shared_init);
            assert_eq!(r.shared_noise, Some(NoiseTape::new(5)));
        }
        assert!(run_coupled(&m, 0, &[1.0], &v(&[0.0, 0.0]), &spec, 5, 0).is_err());
    }

    #[test]
    fn ensemble_basics() {
        let m = MixtureModel::isotropic(vec![1.0], vec![v(&[1.0, 1.0])]).unwrap();
        let spec = SamplerSpec::DdimContinuous {
            horizon: 5.0,
            substeps: 100,
            method: Integrator::Rk4,
        };
        let x0 = v(&[0.5, 0.0]);
        let out = sample_ensemble(&m, 0, 1.0, 4, &spec, &InitLaw::Point(x0.clone()), 1).unwrap();
        assert!(out.iter().all(|x| x == &out[0]));
        let single = integrate_ddim(&m, 0, 1.0, &x0, 5.0, 100, Integrator::Rk4).unwrap();
        assert_eq!(&out[0], single.terminal());
        let g1 = sample_ensemble(&m, 0, 1.0, 6, &spec, &InitLaw::StandardGaussian, 8).unwrap();
        let g2 = sample_ensemble(&m, 0, 1.0, 6, &spec, &InitLaw::StandardGaussian, 8).unwrap();
        assert_eq!(g1, g2);
        assert_ne!(g1[0], g1[1]);
    }

    #[test]
    fn divergence_is_reported_with_step() {
        let m = MixtureModel::aligned_three(v(&[30.0])).unwrap();
        let spec = SamplerSpec::DdimDiscrete {
            schedule: Schedule::constant_step(10.0, 5.0).unwrap(),
        };
        match spec.run(&m, 1, 1e308, &v(&[1.0]), &NoiseTape::zero(), 0) {
            Err(Error::Diverged { eta, .. }) => assert_eq!(eta, 1e308),
            other => panic!("expected divergence, got {other:?}"),
        }
    }
}
