use std::path::PathBuf;

use nalgebra::DVector;
use rayon::prelude::*;

use super::config::{Experiment, InitSpec};
use super::output::{fmt_f, fmt_opt, line_chart, scatter_panels, write_text, Table};
use crate::dynamics::{run_coupled, sample_ensemble, InitLaw, NoiseTape, SamplerKind};
use crate::entropy::{Bandwidth, EntropyMethod, GaussianKde};
use crate::error::{Error, Result};
use crate::theory::{classify_phase, phase_thresholds, PhaseInputs};

/// Linear-interpolation quantile of sorted data.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let pos = q * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

fn emit(exp: &Experiment, name: &str, table: &Table, files: &mut Vec<PathBuf>) -> Result<()> {
    if exp.config.emit.csv {
        let path = exp.out.join(name);
        table.write_csv(&path)?;
        files.push(path);
    }
    Ok(())
}

fn emit_svg(exp: &Experiment, name: &str, svg: impl FnOnce() -> String, files: &mut Vec<PathBuf>) -> Result<()> {
    if exp.config.emit.svg {
        let path = exp.out.join(name);
        write_text(&path, &svg())?;
        files.push(path);
    }
    Ok(())
}

fn column_points(table: &Table, x: &str, y: &str) -> Vec<(f64, f64)> {
    let (xi, yi) = (table.column(x).unwrap(), table.column(y).unwrap());
    table
        .rows
        .iter()
        .map(|r| (r[xi].parse().unwrap_or(f64::NAN), r[yi].parse().unwrap_or(f64::NAN)))
        .collect()
}

fn sibling_kinds(exp: &Experiment) -> (SamplerKind, SamplerKind) {
    if exp.config.sampler.is_discrete() {
        (SamplerKind::DdimDisc, SamplerKind::DdpmDisc)
    } else {
        (SamplerKind::DdimCont, SamplerKind::DdpmCont)
    }
}

/// Coupled guided/unguided trajectories of `record_paths` paths per strength.
pub fn simulate(exp: &Experiment) -> Result<Table> {
    let d = exp.model.dim();
    let mut header: Vec<String> = ["eta", "path", "step", "t", "confidence", "unguided_confidence"]
        .map(String::from)
        .to_vec();
    header.extend((1..=d).map(|i| format!("x{i}")));
    let mut table = Table::new(header);
    let spec = exp.config.sampler.spec()?;
    let mut etas = exp.etas().to_vec();
    if !etas.contains(&0.0) {
        etas.push(0.0);
    }
    let tape = NoiseTape::new(exp.seed);
    let init = exp.init_law();
    for path in 0..exp.config.record_paths as u64 {
        let x0 = init.sample(d, &tape, path);
        let runs = run_coupled(&exp.model, exp.label, &etas, &x0, &spec, exp.seed, path)?;
        for run in runs.iter().filter(|r| exp.etas().contains(&r.eta)) {
            let g = &run.guided;
            for k in 0..g.len() {
                let mut row = vec![
                    fmt_f(run.eta),
                    path.to_string(),
                    k.to_string(),
                    fmt_f(g.times[k]),
                    fmt_f(g.confidence[k]),
                    fmt_f(run.unguided.confidence[k]),
                ];
                row.extend(g.states[k].iter().map(|v| fmt_f(*v)));
                table.push(row);
            }
        }
    }
    Ok(table)
}

/// Deterministic DDIM confidence and DDPM confidence statistics from a fixed start.
pub fn confidence_sweep(exp: &Experiment) -> Result<Table> {
    let mut table = Table::new(["eta", "ddim_conf", "ddpm_mean", "ddpm_q025", "ddpm_q975", "n", "seed"]);
    let x0 = match &exp.config.init {
        InitSpec::Point { x0 } => DVector::from_vec(x0.clone()),
        InitSpec::StandardGaussian => DVector::zeros(exp.model.dim()),
    };
    let (ddim_kind, ddpm_kind) = sibling_kinds(exp);
    let ddim = exp.config.sampler.spec_for(ddim_kind)?;
    let ddpm = exp.config.sampler.spec_for(ddpm_kind)?;
    let n = exp.config.n_samples;
    for &eta in exp.etas() {
        let det = ddim.terminal(&exp.model, exp.label, eta, &x0, &NoiseTape::zero(), 0)?;
        let ddim_conf = exp.model.confidence(&det, exp.label)?;
        let finals = sample_ensemble(&exp.model, exp.label, eta, n, &ddpm, &InitLaw::Point(x0.clone()), exp.seed)?;
        let mut confs = finals
            .iter()
            .map(|x| exp.model.confidence(x, exp.label))
            .collect::<Result<Vec<f64>>>()?;
        let mean = confs.iter().sum::<f64>() / n as f64;
        confs.sort_by(f64::total_cmp);
        table.push(vec![
            fmt_f(eta),
            fmt_f(ddim_conf),
            fmt_f(mean),
            fmt_f(quantile(&confs, 0.025)),
            fmt_f(quantile(&confs, 0.975)),
            n.to_string(),
            exp.seed.to_string(),
        ]);
    }
    Ok(table)
}

fn entropy_method(exp: &Experiment) -> EntropyMethod {
    exp.config.entropy.unwrap_or(if exp.model.dim() == 1 {
        EntropyMethod::default()
    } else {
        EntropyMethod::KdeMc {
            bandwidth: Bandwidth::Scott,
        }
    })
}

/// Differential entropy of terminal ensembles started from a standard Gaussian.
pub fn entropy_sweep(exp: &Experiment) -> Result<Table> {
    let mut table = Table::new(["eta", "entropy", "stderr_proxy", "estimator", "n", "seed"]);
    let spec = exp.config.sampler.spec()?;
    let method = entropy_method(exp);
    for &eta in exp.etas() {
        let samples = sample_ensemble(
            &exp.model,
            exp.label,
            eta,
            exp.config.n_samples,
            &spec,
            &InitLaw::StandardGaussian,
            exp.seed,
        )?;
        let est = method.estimate(&samples)?;
        table.push(vec![
            fmt_f(eta),
            fmt_f(est.value),
            fmt_f(est.stderr_proxy),
            est.estimator.name().to_string(),
            est.n.to_string(),
            exp.seed.to_string(),
        ]);
    }
    Ok(table)
}

pub struct DensityOutput {
    pub samples: Table,
    pub grid: Option<Table>,
    pub svg: Option<String>,
}

/// Terminal samples per strength plus a KDE evaluated on a shared grid.
pub fn density_grid(exp: &Experiment) -> Result<DensityOutput> {
    let d = exp.model.dim();
    let spec = exp.config.sampler.spec()?;
    let init = exp.init_law();
    let mut header: Vec<String> = vec!["eta".into(), "sample_id".into()];
    header.extend((1..=d).map(|i| format!("x{i}")));
    let mut samples = Table::new(header);
    let mut ensembles = Vec::new();
    for &eta in exp.etas() {
        let xs = sample_ensemble(&exp.model, exp.label, eta, exp.config.n_samples, &spec, &init, exp.seed)?;
        for (i, x) in xs.iter().enumerate() {
            let mut row = vec![fmt_f(eta), i.to_string()];
            row.extend(x.iter().map(|v| fmt_f(*v)));
            samples.push(row);
        }
        ensembles.push((eta, xs));
    }
    let grid = match exp.config.density.per_axis(d) {
        None => None,
        Some(per_axis) => {
            let mut lo = vec![f64::INFINITY; d];
            let mut hi = vec![f64::NEG_INFINITY; d];
            for x in ensembles.iter().flat_map(|(_, xs)| xs) {
                for j in 0..d {
                    lo[j] = lo[j].min(x[j]);
                    hi[j] = hi[j].max(x[j]);
                }
            }
            let axes: Vec<Vec<f64>> = (0..d)
                .map(|j| {
                    let pad = 0.1 * (hi[j] - lo[j]).max(1e-6);
                    let (a, b) = (lo[j] - pad, hi[j] + pad);
                    (0..per_axis)
                        .map(|i| a + (b - a) * i as f64 / (per_axis - 1) as f64)
                        .collect()
                })
                .collect();
            let total = per_axis.pow(d as u32);
            let points: Vec<DVector<f64>> = (0..total)
                .map(|mut idx| {
                    DVector::from_fn(d, |j, _| {
                        let _ = j;
                        let v = axes[j][idx % per_axis];
                        idx /= per_axis;
                        v
                    })
                })
                .collect();
            let mut header: Vec<String> = vec!["eta".into()];
            header.extend((1..=d).map(|i| format!("g{i}")));
            header.push("kde_value".into());
            let mut table = Table::new(header);
            for (eta, xs) in &ensembles {
                let values: Vec<f64> = match GaussianKde::fit(xs, Bandwidth::Scott) {
                    Ok(kde) => points.par_iter().map(|p| kde.log_density(p).exp()).collect(),
                    // a collapsed ensemble has no density to draw
                    Err(Error::InvalidArgument { .. }) => vec![f64::NAN; points.len()],
                    Err(e) => return Err(e),
                };
                for (p, v) in points.iter().zip(values) {
                    let mut row = vec![fmt_f(*eta)];
                    row.extend(p.iter().map(|g| fmt_f(*g)));
                    row.push(fmt_f(v));
                    table.push(row);
                }
            }
            Some(table)
        }
    };
    let svg = (d <= 3).then(|| {
        if d == 1 {
            let series: Vec<(String, Vec<(f64, f64)>)> = match &grid {
                Some(g) => exp
                    .etas()
                    .iter()
                    .map(|eta| {
                        let key = fmt_f(*eta);
                        let pts = g
                            .rows
                            .iter()
                            .filter(|r| r[0] == key)
                            .map(|r| (r[1].parse().unwrap(), r[2].parse().unwrap()))
                            .collect();
                        (format!("eta = {eta}"), pts)
                    })
                    .collect(),
                None => Vec::new(),
            };
            line_chart("kde density", &series)
        } else {
            let panels: Vec<(String, Vec<(f64, f64)>)> = ensembles
                .iter()
                .map(|(eta, xs)| (format!("eta = {eta}"), xs.iter().map(|x| (x[0], x[1])).collect()))
                .collect();
            scatter_panels(&panels)
        }
    });
    Ok(DensityOutput { samples, grid, svg })
}

/// Splitting statistics of centre-label guidance on the aligned model.
pub fn phase_scan(exp: &Experiment) -> Result<Table> {
    let mu = exp.model.aligned_side_mean(exp.label).ok_or_else(|| {
        Error::Config(
            "phase-scan needs the aligned model (-mu, 0, mu) with equal weights and identity \
             covariance, guided to its centre label"
                .into(),
        )
    })?;
    let mu_norm = mu.norm();
    let radius = exp.config.phase.split_radius.unwrap_or(mu_norm / 2.0);
    let deltas = exp
        .config
        .phase
        .deltas
        .clone()
        .unwrap_or_else(|| vec![exp.config.sampler.delta()]);
    let kind = match exp.config.sampler.kind {
        SamplerKind::DdpmDisc => SamplerKind::DdpmDisc,
        _ => SamplerKind::DdimDisc,
    };
    let mut table = Table::new([
        "eta", "delta", "phase", "eta0", "eta0_prime", "a", "b", "frac_split", "sign_balance", "n", "seed",
    ]);
    let n = exp.config.n_samples;
    for &delta in &deltas {
        let schedule = exp.config.sampler.schedule_with_delta(delta)?;
        let mut sampler = exp.config.sampler.clone();
        sampler.delta = Some(delta);
        sampler.steps = None;
        let spec = sampler.spec_for(kind)?;
        let base = PhaseInputs::new(mu.clone(), schedule, 0.0)?;
        let eta0_prime = phase_thresholds(&base)?.eta0_prime;
        let mut etas = exp.etas().to_vec();
        etas.extend(exp.config.phase.eta_prime_multiples.iter().map(|m| m * eta0_prime));
        for eta in etas {
            let inputs = base.with_eta(eta)?;
            let th = phase_thresholds(&inputs)?;
            let phase = classify_phase(&inputs);
            let finals = sample_ensemble(&exp.model, exp.label, eta, n, &spec, &InitLaw::StandardGaussian, exp.seed)?;
            let proj: Vec<f64> = finals.iter().map(|x| x.dot(&mu) / mu_norm).collect();
            let split = proj.iter().filter(|p| p.abs() > radius).count();
            let positive = proj.iter().filter(|p| **p > 0.0).count();
            table.push(vec![
                fmt_f(eta),
                fmt_f(delta),
                serde_json::to_value(phase)
                    .ok()
                    .and_then(|v| v.as_str().map(String::from))
                    .unwrap_or_default(),
                fmt_f(th.eta0),
                fmt_f(th.eta0_prime),
                fmt_opt(th.a),
                fmt_opt(th.b),
                fmt_f(split as f64 / n as f64),
                fmt_f(positive as f64 / n as f64),
                n.to_string(),
                exp.seed.to_string(),
            ]);
        }
    }
    Ok(table)
}

/// Command names accepted by [`run`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Simulate,
    ConfidenceSweep,
    EntropySweep,
    DensityGrid,
    PhaseScan,
}

/// Runs `cmd` and writes its outputs under the experiment's output directory.
pub fn run(cmd: Command, exp: &Experiment) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    match cmd {
        Command::Simulate => {
            let t = simulate(exp)?;
            emit(exp, "trajectories.csv", &t, &mut files)?;
        }
        Command::ConfidenceSweep => {
            let t = confidence_sweep(exp)?;
            emit(exp, "confidence_sweep.csv", &t, &mut files)?;
            emit_svg(
                exp,
                "confidence_sweep.svg",
                || {
                    line_chart(
                        "confidence vs eta",
                        &[
                            ("ddim".into(), column_points(&t, "eta", "ddim_conf")),
                            ("ddpm mean".into(), column_points(&t, "eta", "ddpm_mean")),
                            ("ddpm q025".into(), column_points(&t, "eta", "ddpm_q025")),
                            ("ddpm q975".into(), column_points(&t, "eta", "ddpm_q975")),
                        ],
                    )
                },
                &mut files,
            )?;
        }
        Command::EntropySweep => {
            let t = entropy_sweep(exp)?;
            emit(exp, "entropy_sweep.csv", &t, &mut files)?;
            emit_svg(
                exp,
                "entropy_sweep.svg",
                || line_chart("entropy vs eta", &[("entropy".into(), column_points(&t, "eta", "entropy"))]),
                &mut files,
            )?;
        }
        Command::DensityGrid => {
            let out = density_grid(exp)?;
            emit(exp, "density_samples.csv", &out.samples, &mut files)?;
            if let Some(g) = &out.grid {
                emit(exp, "density_grid.csv", g, &mut files)?;
            }
            if let Some(svg) = out.svg {
                emit_svg(exp, "density.svg", || svg, &mut files)?;
            }
        }
        Command::PhaseScan => {
            let t = phase_scan(exp)?;
            emit(exp, "phase_scan.csv", &t, &mut files)?;
            emit_svg(
                exp,
                "phase_scan.svg",
                || line_chart("split fraction vs eta", &[("frac_split".into(), column_points(&t, "eta", "frac_split"))]),
                &mut files,
            )?;
        }
    }
    Ok(files)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::config::ExperimentConfig;

    fn experiment(text: &str) -> Experiment {
        Experiment::new(ExperimentConfig::parse(text).unwrap(), None, None, None).unwrap()
    }

    #[test]
    fn quantiles_interpolate() {
        let xs = [0.0, 1.0, 2.0, 3.0, 4.0];
        assert_eq!(quantile(&xs, 0.5), 2.0);
        assert_eq!(quantile(&xs, 0.025), 0.1);
        assert_eq!(quantile(&[7.0], 0.9), 7.0);
    }

    #[test]
    fn confidence_sweep_baseline_row() {
        let exp = experiment(
            "seed = 1\nn_samples = 50\n[model]\nweights=[0.5,0.5]\nmeans=[[1.0],[-1.0]]\n\
             [guidance]\netas=[0.0, 2.0]\n[sampler]\nkind='ddpm-cont'\nsubsteps=500\ndelta=0.05\n\
             [init]\nkind='point'\nx0=[0.0]",
        );
        let t = confidence_sweep(&exp).unwrap();
        assert_eq!(t.header, ["eta", "ddim_conf", "ddpm_mean", "ddpm_q025", "ddpm_q975", "n", "seed"]);
        let c0: f64 = t.rows[0][1].parse().unwrap();
        let expected = 1.0 / (1.0 + (-2.0 * (1.0 - (-10f64).exp())).exp());
        assert!((c0 - expected).abs() < 1e-8);
        let c1: f64 = t.rows[1][1].parse().unwrap();
        assert!(c1 >= c0);
        for r in &t.rows {
            let (lo, mean, hi): (f64, f64, f64) = (r[3].parse().unwrap(), r[2].parse().unwrap(), r[4].parse().unwrap());
            assert!(lo <= mean && mean <= hi);
        }
    }

    #[test]
    fn phase_scan_refuses_other_models() {
        let exp = experiment("seed = 1\n[model]\nweights=[0.5,0.5]\nmeans=[[1.0],[-1.0]]");
        assert!(matches!(phase_scan(&exp), Err(Error::Config(_))));
    }

    #[test]
    fn density_grid_shapes() {
        let exp = experiment(
            "seed = 2\nn_samples = 30\n[model]\nweights=[0.5,0.5]\nmeans=[[1.0, 0.0],[-1.0, 0.0]]\n\
             [guidance]\netas=[0.0, 1.0]\n[sampler]\nsubsteps=50\n[density]\ngrid_points=5",
        );
        let out = density_grid(&exp).unwrap();
        assert_eq!(out.samples.rows.len(), 60);
        assert_eq!(out.samples.header, ["eta", "sample_id", "x1", "x2"]);
        let grid = out.grid.unwrap();
        assert_eq!(grid.rows.len(), 2 * 25);
        assert_eq!(grid.header, ["eta", "g1", "g2", "kde_value"]);
        assert!(out.svg.unwrap().contains("<circle"));
    }
}
