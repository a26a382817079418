use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_gmm-guidance");

fn run(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().expect("binary runs")
}

fn header(path: &Path) -> String {
    fs::read_to_string(path).unwrap().lines().next().unwrap().to_string()
}

const SYMMETRIC: &str = "seed = 11\nn_samples = 64\n[model]\nweights = [0.5, 0.5]\nmeans = [[1.0], [-1.0]]\n\
[guidance]\netas = [0.0, 2.0]\n[sampler]\nkind = \"ddpm-cont\"\nsubsteps = 200\ndelta = 0.05\n\
[init]\nkind = \"point\"\nx0 = [0.0]\n";

#[test]
fn csv_headers_match_schemas() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    fs::write(&cfg, SYMMETRIC).unwrap();
    let out = dir.path().join("out");
    let (cfg, out_s) = (cfg.to_str().unwrap(), out.to_str().unwrap());
    for cmd in ["simulate", "confidence-sweep", "entropy-sweep", "density-grid"] {
        let o = run(&["--config", cfg, "--out", out_s, cmd]);
        assert!(o.status.success(), "{cmd}: {}", String::from_utf8_lossy(&o.stderr));
    }
    assert_eq!(header(&out.join("trajectories.csv")), "eta,path,step,t,confidence,unguided_confidence,x1");
    assert_eq!(header(&out.join("confidence_sweep.csv")), "eta,ddim_conf,ddpm_mean,ddpm_q025,ddpm_q975,n,seed");
    assert_eq!(header(&out.join("entropy_sweep.csv")), "eta,entropy,stderr_proxy,estimator,n,seed");
    assert_eq!(header(&out.join("density_samples.csv")), "eta,sample_id,x1");
    assert_eq!(header(&out.join("density_grid.csv")), "eta,g1,kde_value");
    // svg only when requested
    assert!(!out.join("density.svg").exists());

    let text = fs::read_to_string(out.join("confidence_sweep.csv")).unwrap();
    let row: Vec<&str> = text.lines().nth(1).unwrap().split(',').collect();
    let c: f64 = row[1].parse().unwrap();
    assert!((c - 0.8807970779778823).abs() < 1e-3, "{c}");
    assert_eq!(row[1].split('e').next().unwrap().replace(['-', '.'], "").len(), 17);
}

#[test]
fn phase_scan_schema_and_rows() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["--preset", "fig4", "--n-samples", "50", "--out", dir.path().to_str().unwrap(), "phase-scan"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = fs::read_to_string(dir.path().join("phase_scan.csv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), "eta,delta,phase,eta0,eta0_prime,a,b,frac_split,sign_balance,n,seed");
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    // 8 strengths plus one multiple of the splitting threshold, for two step sizes
    assert_eq!(rows.len(), 18);
    let first = &rows[0];
    assert_eq!(first[2], "convergent");
    assert_eq!(first[3].parse::<f64>().unwrap(), 1.25);
    assert_eq!(rows[9][3].parse::<f64>().unwrap(), 3.125);
    assert_eq!(rows[8][2], "splitting");
    assert!(!rows[8][5].is_empty() && !rows[8][6].is_empty());
}

#[test]
fn exit_codes() {
    assert_eq!(run(&["simulate"]).status.code(), Some(2));
    assert_eq!(run(&["--preset", "missing", "simulate"]).status.code(), Some(2));
    assert_eq!(run(&["--preset", "fig2a", "phase-scan"]).status.code(), Some(2));
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "seed = 1\n[model]\nweights = [0.5,\n").unwrap();
    let o = run(&["--config", bad.to_str().unwrap(), "simulate"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("line"));
    let no_seed = dir.path().join("noseed.toml");
    fs::write(&no_seed, "[model]\nweights = [1.0]\nmeans = [[0.0]]\n").unwrap();
    assert_eq!(run(&["--config", no_seed.to_str().unwrap(), "entropy-sweep"]).status.code(), Some(2));
    assert_eq!(run(&["presets"]).status.code(), Some(0));
}

#[test]
fn verify_report_is_deterministic_and_catches_the_mutant() {
    let dir = tempfile::tempdir().unwrap();
    let a = run(&["--out", dir.path().to_str().unwrap(), "verify"]);
    assert_eq!(a.status.code(), Some(0), "{}", String::from_utf8_lossy(&a.stdout));
    let b = run(&["verify"]);
    assert_eq!(a.stdout, b.stdout);
    assert_eq!(fs::read(dir.path().join("verify.json")).unwrap(), a.stdout);
    let report: serde_json::Value = serde_json::from_slice(&a.stdout).unwrap();
    let names: Vec<&str> = report["properties"]
        .as_array()
        .unwrap()
        .iter()
        .map(|p| p["name"].as_str().unwrap())
        .collect();
    for expected in [
        "gradient_oracle",
        "cfg_identity",
        "ddim_dominance",
        "ddpm_dominance",
        "two_cluster_dominance",
        "bounds_vs_simulation",
        "entropy_reduction",
        "discrete_entropy",
        "phase_transition",
        "estimator_calibration",
    ] {
        assert!(names.contains(&expected), "{expected}");
    }
    assert!(report["properties"].as_array().unwrap().iter().all(|p| p["claim"].is_string()));

    let m = run(&["verify", "--mutate-classifier-sign"]);
    assert_eq!(m.status.code(), Some(1));
    let report: serde_json::Value = serde_json::from_slice(&m.stdout).unwrap();
    let oracle = report["properties"]
        .as_array()
        .unwrap()
        .iter()
        .find(|p| p["name"] == "gradient_oracle")
        .unwrap();
    assert_eq!(oracle["passed"], false);
}
