use std::path::{Path, PathBuf};
use std::process::Command;

use cclqr::config::{ConfigError, PenaltySpec, ProblemSpec, RunConfig, SolverSpec};
use cclqr::{run, Experiment};
use cclqr_core::lqr::ARE_TOL;
use cclqr_core::Vector;

fn bundled() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("configs/sec5.json")
}

fn sec5(experiment: Experiment) -> RunConfig {
    let mut cfg = RunConfig::load(&bundled()).unwrap();
    cfg.experiment = experiment;
    cfg
}

fn read(dir: &Path, name: &str) -> String {
    std::fs::read_to_string(dir.join(name)).unwrap()
}

fn column(csv: &str, name: &str) -> Vec<f64> {
    let mut lines = csv.lines();
    let idx = lines.next().unwrap().split(',').position(|c| c == name).unwrap();
    lines.map(|l| l.split(',').nth(idx).unwrap().parse().unwrap()).collect()
}

#[test]
fn bundled_config_loads() {
    let cfg = RunConfig::load(&bundled()).unwrap();
    let prep = cfg.prepare().unwrap();
    assert_eq!(prep.problem.limits(), &Vector::from_vec(vec![10.0, 6.0]));
    assert_eq!(prep.k0.k()[(0, 1)], 0.5);
    assert!(!prep.solver.warm_start);
}

#[test]
fn missing_file_and_unknown_fields_are_reported() {
    assert!(matches!(
        RunConfig::load(Path::new("/nonexistent/cfg.json")),
        Err(ConfigError::Io { .. })
    ));
    let text = std::fs::read_to_string(bundled()).unwrap().replace("\"seed\": 0", "\"sead\": 0");
    let err = RunConfig::from_json(&text).unwrap_err();
    assert!(matches!(err, ConfigError::Parse { .. }), "{err}");
    assert!(err.to_string().contains("sead"));
}

#[test]
fn nonpositive_r0_is_named() {
    let mut cfg = sec5(Experiment::Solve);
    cfg.problem.penalties[0].r = vec![vec![1.0, 0.0], vec![0.0, 0.0]];
    let err = cfg.prepare().unwrap_err().to_string();
    assert!(err.contains("R_0 not positive definite"), "{err}");
}

#[test]
fn config_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = sec5(Experiment::Verify);
    cfg.solver.omega_upper = Some(vec![12.5, 0.1 + 0.2]);
    cfg.lab.assertions = Some(vec!["strong_duality".into()]);
    cfg.problem.sigma0 = Some(vec![
        vec![2.0, 0.1, 0.0, 0.0],
        vec![0.1, 1.0, 0.0, 0.0],
        vec![0.0, 0.0, 1.0 / 3.0, 0.0],
        vec![0.0, 0.0, 0.0, 1.0],
    ]);
    let path = dir.path().join("cfg.json");
    cfg.save(&path).unwrap();
    let back = RunConfig::load(&path).unwrap();
    assert_eq!(back, cfg);
    assert_eq!(back.to_json(), cfg.to_json());
}

#[test]
fn trace_has_one_row_per_iteration_and_consistent_regret() {
    let dir = tempfile::tempdir().unwrap();
    let outcome = run(&sec5(Experiment::Solve), dir.path()).unwrap();
    assert!(outcome.success(), "{}", outcome.summary);
    let csv = read(dir.path(), "trace.csv");
    assert!(!csv.contains('\r'));
    assert_eq!(csv.lines().count(), 51);
    assert_eq!(
        csv.lines().next().unwrap(),
        "k,lambda_1,lambda_2,J_0,J_1,J_2,D,regret,subgrad_norm,pg_steps,eps_est"
    );

    // Recover D* from the first row, then rebuild the running average.
    let d = column(&csv, "D");
    let regret = column(&csv, "regret");
    let d_star = regret[0] + d[0];
    let mut sum = 0.0;
    for (k, (dk, rk)) in d.iter().zip(&regret).enumerate() {
        sum += d_star - dk;
        let expected = sum / (k + 1) as f64;
        assert!((expected - rk).abs() <= 1e-12 * (1.0 + d_star), "row {}: {expected} vs {rk}", k + 1);
    }
    for line in csv.lines().skip(1) {
        let field = line.split(',').nth(1).unwrap();
        let mantissa = field.split('e').next().unwrap().trim_start_matches('-');
        assert_eq!(mantissa.len(), 18, "17 digits plus the point: {field}");
    }
}

#[test]
fn identical_config_gives_identical_bytes() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let mut cfg = sec5(Experiment::ReproduceSec5);
    cfg.seed = 7;
    run(&cfg, a.path()).unwrap();
    run(&cfg, b.path()).unwrap();
    for name in ["trace.csv", "trace_pg50.csv", "trace_pg100.csv", "trace_pg1000.csv", "certificate.csv", "summary.txt", "plot.gp"] {
        assert_eq!(read(a.path(), name), read(b.path(), name), "{name}");
    }
    cfg.experiment = Experiment::Probes;
    run(&cfg, a.path()).unwrap();
    run(&cfg, b.path()).unwrap();
    assert_eq!(read(a.path(), "probes.csv"), read(b.path(), "probes.csv"));
}

#[test]
fn unconstrained_solve_is_plain_policy_gradient() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = RunConfig {
        problem: ProblemSpec {
            a: vec![vec![1.0, 0.2], vec![0.0, 1.1]],
            b: vec![vec![0.0], vec![0.5]],
            penalties: vec![PenaltySpec {
                q: vec![vec![1.0, 0.0], vec![0.0, 1.0]],
                r: vec![vec![1.0]],
            }],
            limits: vec![],
            sigma0: None,
        },
        solver: SolverSpec {
            k0: Some(vec![vec![0.5, 1.5]]),
            warm_start: true,
            dual_iters: 20,
            ..SolverSpec::default()
        },
        experiment: Experiment::Solve,
        seed: 0,
        output_dir: dir.path().to_path_buf(),
        lab: Default::default(),
    };
    let outcome = run(&cfg, dir.path()).unwrap();
    assert!(outcome.success(), "{}", outcome.summary);
    let csv = read(dir.path(), "trace.csv");
    assert_eq!(csv.lines().next().unwrap(), "k,J_0,D,regret,subgrad_norm,pg_steps,eps_est");
    let j0 = column(&csv, "J_0");
    assert!(j0.windows(2).all(|w| w[1] <= w[0] + 1e-12), "descent: {j0:?}");
    let prob = cfg.prepare().unwrap().problem;
    let optimum = prob.cost(&prob.solve_are(&Vector::zeros(0), ARE_TOL).unwrap().gain, 0).unwrap();
    assert!(j0[j0.len() - 1] - optimum < 1e-3 * optimum);
    assert!(column(&csv, "regret").iter().all(|r| *r == 0.0));
}

#[test]
fn unknown_assertion_is_a_config_error() {
    let mut cfg = sec5(Experiment::GradCheck);
    cfg.lab.assertions = Some(vec!["strong_duality".into()]);
    let dir = tempfile::tempdir().unwrap();
    assert!(run(&cfg, dir.path()).is_err());
}

#[test]
fn failed_assertion_gives_nonzero_exit() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = sec5(Experiment::ReproduceSec5);
    cfg.lab.assertions = Some(vec!["regret_ordered".into(), "regret_bound".into()]);
    let path = dir.path().join("cfg.json");
    cfg.save(&path).unwrap();
    let out = dir.path().join("out");
    let status = Command::new(env!("CARGO_BIN_EXE_cclqr"))
        .args(["reproduce-sec5", "--config"])
        .arg(&path)
        .arg("--out")
        .arg(&out)
        .status()
        .unwrap();
    assert!(!status.success());
    let summary = read(&out, "summary.txt");
    assert!(summary.contains("PASS regret_ordered"));
    assert!(summary.contains("FAIL regret_bound"));
    assert!(summary.ends_with("result: FAIL\n"));
}

#[test]
fn binary_runs_grad_check_and_honours_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let output = Command::new(env!("CARGO_BIN_EXE_cclqr"))
        .args(["grad-check", "--config"])
        .arg(bundled())
        .arg("--out")
        .arg(dir.path())
        .args(["--seed", "11"])
        .output()
        .unwrap();
    assert!(output.status.success(), "{}", String::from_utf8_lossy(&output.stdout));
    let summary = read(dir.path(), "summary.txt");
    assert!(summary.starts_with("experiment: grad-check\nseed: 11\n"));
    let table = read(dir.path(), "gradcheck.csv");
    assert_eq!(table.lines().count(), 1 + 20 + 25);
    assert!(dir.path().join("plot.gp").exists());
}

#[test]
fn bad_config_exits_with_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    std::fs::write(&path, "{\"problem\": {}}").unwrap();
    let status = Command::new(env!("CARGO_BIN_EXE_cclqr"))
        .args(["solve", "--config"])
        .arg(&path)
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(2));
}

#[test]
fn stage_failure_is_named_in_summary() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = sec5(Experiment::Solve);
    // A huge stepsize drives the first PG phase out of the stabilizing set.
    cfg.solver.zeta = 10.0;
    let outcome = run(&cfg, dir.path()).unwrap();
    assert!(!outcome.success());
    let summary = read(dir.path(), "summary.txt");
    assert!(summary.contains("FAIL stage solve"), "{summary}");
}
