//! The five experiments behind `cclqr <experiment>`.

use std::path::{Path, PathBuf};

use cclqr_core::duality::{
    concavity_margin, continuity_probe, default_slater_candidates, kkt_check, max_increase,
    monotonicity_probe, multiplier_program_grid, slater_check, smoothness_probe, z_sweep, ZSweepEntry,
};
use cclqr_core::lqr::ARE_TOL;
use cclqr_core::primal_dual::{
    dual_gradient_exact, estimate_bias_slope, reference_dual_optimum, regret, regret_bound, solve,
    BoundConstants, InnerStop, OmegaBox, SolveTrace, SolverConfig,
};
use cclqr_core::{par, CcLqrProblem, Gain, Mat, Vector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::config::{ConfigError, Experiment, Prepared, RunConfig};
use crate::report::{self, CertificateRow, Check, Table};

/// Tolerance of the reference dual optimum used for regret.
pub const D_STAR_TOL: f64 = 1e-10;
pub const POLICY_FD_STEP: f64 = 1e-6;
pub const POLICY_FD_TOL: f64 = 1e-5;
pub const DUAL_FD_TOL: f64 = 1e-4;
pub const MONOTONICITY_TOL: f64 = 1e-8;
pub const CONCAVITY_SLACK: f64 = 1e-8;
pub const SMOOTHNESS_DRIFT: f64 = 0.2;
pub const VIOLATION_TOL: f64 = 5e-2;
const CONCAVITY_TRIPLES: usize = 200;

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("cannot write output: {0}")]
    Io(#[from] std::io::Error),
}

/// Checks an experiment can evaluate, and whether each is enforced unless the
/// configuration names its own set.
pub fn available_checks(experiment: Experiment) -> &'static [(&'static str, bool)] {
    const SOLVE: &[(&str, bool)] = &[
        ("lambda_in_box", true),
        ("gains_stabilizing", true),
        ("regret_nonnegative", true),
    ];
    const VERIFY: &[(&str, bool)] = &[
        ("lambda_in_box", true),
        ("gains_stabilizing", true),
        ("regret_nonnegative", true),
        ("slater", true),
        ("strong_duality", true),
        ("gap_shrinks", true),
    ];
    const SEC5: &[(&str, bool)] = &[
        ("lambda_in_box", true),
        ("gains_stabilizing", true),
        ("regret_nonnegative", true),
        ("slater", true),
        ("strong_duality", true),
        ("regret_sqrtk_bounded", true),
        ("regret_ordered", true),
        ("violations", true),
        ("regret_bound", false),
    ];
    const GRAD: &[(&str, bool)] = &[("policy_gradient", true), ("dual_gradient", true)];
    const PROBES: &[(&str, bool)] = &[
        ("monotonicity", true),
        ("continuity", true),
        ("smoothness_stable", true),
        ("concavity", true),
    ];
    match experiment {
        Experiment::Solve => SOLVE,
        Experiment::Verify => VERIFY,
        Experiment::ReproduceSec5 => SEC5,
        Experiment::GradCheck => GRAD,
        Experiment::Probes => PROBES,
    }
}

/// What a run produced. Stage failures are reported here rather than as an
/// `Err`, so that `summary.txt` is always written.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub checks: Vec<Check>,
    /// Failing stage and its error message.
    pub failure: Option<(String, String)>,
    pub files: Vec<PathBuf>,
    pub summary: String,
}

impl RunOutcome {
    pub fn success(&self) -> bool {
        self.failure.is_none() && self.checks.iter().all(|c| !c.enforced || c.passed)
    }

    pub fn check(&self, name: &str) -> Option<&Check> {
        self.checks.iter().find(|c| c.name == name)
    }
}

struct StageError {
    stage: &'static str,
    message: String,
}

fn at<E: std::fmt::Display>(stage: &'static str) -> impl Fn(E) -> StageError {
    move |e| StageError {
        stage,
        message: e.to_string(),
    }
}

struct Run<'a> {
    cfg: &'a RunConfig,
    prep: Prepared,
    out: &'a Path,
    enforced: Vec<&'static str>,
    checks: Vec<Check>,
    files: Vec<PathBuf>,
}

impl Run<'_> {
    fn check(&mut self, name: &'static str, passed: bool, detail: String) {
        let enforced = self.enforced.contains(&name);
        self.checks.push(Check {
            name,
            passed,
            detail,
            enforced,
        });
    }

    fn write(&mut self, name: &str, contents: &str) -> Result<(), StageError> {
        let path = self.out.join(name);
        std::fs::write(&path, contents).map_err(at("write"))?;
        self.files.push(path);
        Ok(())
    }

    fn rng(&self, stream: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        rng.set_stream(stream);
        rng
    }

    fn prob(&self) -> &CcLqrProblem {
        &self.prep.problem
    }

    fn omega(&self) -> &OmegaBox {
        &self.prep.solver.omega
    }
}

/// Runs `cfg.experiment`, writing every output file into `out`.
pub fn run(cfg: &RunConfig, out: &Path) -> Result<RunOutcome, RunError> {
    let prep = cfg.prepare()?;
    let available = available_checks(cfg.experiment);
    let enforced: Vec<&'static str> = match &cfg.lab.assertions {
        None => available.iter().filter(|(_, on)| *on).map(|(n, _)| *n).collect(),
        Some(names) => names
            .iter()
            .map(|name| {
                available
                    .iter()
                    .find(|(n, _)| n == name)
                    .map(|(n, _)| *n)
                    .ok_or_else(|| {
                        ConfigError::Invalid(format!(
                            "assertion '{name}' is not evaluated by experiment {}",
                            cfg.experiment
                        ))
                    })
            })
            .collect::<Result<_, _>>()?,
    };
    std::fs::create_dir_all(out)?;
    let mut run = Run {
        cfg,
        prep,
        out,
        enforced,
        checks: Vec::new(),
        files: Vec::new(),
    };
    let result = match cfg.experiment {
        Experiment::Solve => run_solve(&mut run, false),
        Experiment::Verify => run_solve(&mut run, true),
        Experiment::ReproduceSec5 => run_sec5(&mut run),
        Experiment::GradCheck => run_grad_check(&mut run),
        Experiment::Probes => run_probes(&mut run),
    };
    let failure = result.err().map(|e| (e.stage.to_string(), e.message));
    let summary = report::summary(
        &cfg.experiment.to_string(),
        cfg.seed,
        &run.checks,
        failure.as_ref().map(|(s, m)| (s.as_str(), m.as_str())),
    );
    let path = out.join("summary.txt");
    std::fs::write(&path, &summary)?;
    run.files.push(path);
    Ok(RunOutcome {
        checks: run.checks,
        failure,
        files: run.files,
        summary,
    })
}

/// `D*` over the configured box; with no constraints it is the plain LQR
/// optimum.
fn reference_value(prob: &CcLqrProblem, omega: &OmegaBox) -> Result<f64, StageError> {
    if prob.num_constraints() == 0 {
        return prob.dual_value(&Vector::zeros(0)).map_err(at("reference optimum"));
    }
    Ok(reference_dual_optimum(prob, omega, D_STAR_TOL)
        .map_err(at("reference optimum"))?
        .value)
}

fn solve_with(prob: &CcLqrProblem, solver: &SolverConfig, k0: &Gain, lambda0: &Vector, d_star: f64)
    -> Result<(SolveTrace, Vec<f64>), StageError>
{
    let trace = solve(prob, solver, k0, lambda0)
        .map_err(|e| StageError {
            stage: "solve",
            message: format!("dual iteration {}: {}", e.iteration, e.source),
        })?
        .with_reference(d_star);
    let r = regret(&trace, d_star).map_err(at("regret"))?;
    Ok((trace, r))
}

fn trace_checks(run: &mut Run<'_>, trace: &SolveTrace, regret: &[f64]) {
    let in_box = trace.iterations.iter().all(|r| run.omega().contains(&r.lambda_next));
    run.check("lambda_in_box", in_box, format!("{} iterates checked", trace.len()));
    let worst_rho = trace.iterations.iter().map(|r| r.gain.rho()).fold(0.0, f64::max);
    run.check(
        "gains_stabilizing",
        worst_rho < 1.0,
        format!("largest closed-loop spectral radius {worst_rho:.6}"),
    );
    let min_regret = regret.iter().copied().fold(f64::INFINITY, f64::min);
    run.check(
        "regret_nonnegative",
        min_regret >= 0.0,
        format!("smallest regret {min_regret:.3e}"),
    );
}

fn j0_star(prob: &CcLqrProblem) -> Result<f64, StageError> {
    let k = prob
        .solve_are(&Vector::zeros(prob.num_constraints()), ARE_TOL)
        .map_err(at("plot baseline"))?
        .gain;
    prob.cost(&k, 0).map_err(at("plot baseline"))
}

fn run_solve(run: &mut Run<'_>, certify: bool) -> Result<(), StageError> {
    let prob = run.prob().clone();
    let d_star = reference_value(&prob, run.omega())?;
    let (trace, r) = solve_with(&prob, &run.prep.solver, &run.prep.k0, &run.prep.lambda0, d_star)?;
    let n = prob.num_constraints();
    run.write("trace.csv", &report::trace_csv(&trace, n, &r))?;
    trace_checks(run, &trace, &r);
    if certify {
        certificate(run, true)?;
    }
    let plot = report::plot_script(&[("trace.csv".into(), "trace".into())], prob.limits(), j0_star(&prob)?);
    run.write("plot.gp", &plot)
}

/// Multiplier program, KKT certificate and Slater check; writes
/// `certificate.csv`.
fn certificate(run: &mut Run<'_>, refine_check: bool) -> Result<(), StageError> {
    let prob = run.prob().clone();
    let n = prob.num_constraints();
    let cfg = run.cfg;
    let lab = &cfg.lab;
    let zs: Vec<Vector> = if lab.z_sweep.is_empty() {
        vec![lab.z.clone().map_or_else(|| Vector::from_element(n, 1.0), Vector::from_vec)]
    } else {
        lab.z_sweep.iter().map(|z| Vector::from_vec(z.clone())).collect()
    };
    let (grid_res, refinements, tol) = (lab.grid_res, lab.refinements, lab.kkt_tol);

    let slater = slater_check(&prob, &default_slater_candidates(&prob));
    let detail = match &slater {
        Some(g) => format!("strictly feasible gain found (costs {:?})", rounded(&prob.costs(g).unwrap_or_default())),
        None => "no strictly feasible candidate".into(),
    };
    run.check("slater", slater.is_some(), detail);

    let mut entries: Vec<ZSweepEntry> =
        z_sweep(&prob, &zs, grid_res, run.omega(), refinements, tol).map_err(at("multiplier program"))?;
    for e in &mut entries {
        e.certificate.slater_point = slater.clone();
    }
    let limits = prob.limits().clone();
    let rows: Vec<CertificateRow<'_>> = entries
        .iter()
        .map(|e| CertificateRow {
            z: &e.z,
            cert: &e.certificate,
        })
        .collect();
    let csv = report::certificate_csv(&rows, &limits);
    run.write("certificate.csv", &csv)?;

    let worst = entries
        .iter()
        .map(|e| e.certificate.duality_gap_rel)
        .fold(0.0, f64::max);
    let all_pass = entries.iter().all(|e| e.certificate.passes(&limits));
    let first = &entries[0].certificate;
    let slack_rel: Vec<f64> = first
        .slackness_residuals
        .iter()
        .zip(limits.iter())
        .map(|(s, c)| s / c)
        .collect();
    run.check(
        "strong_duality",
        all_pass,
        format!(
            "lambda* {:?}, largest gap {worst:.3e}, relative slackness {:?}, stationarity {:.1e} (tol {tol})",
            rounded(first.lambda_star.as_slice()),
            rounded(&slack_rel),
            first.stationarity_norm
        ),
    );

    if refine_check {
        let finer = multiplier_program_grid(&prob, &zs[0], grid_res, run.omega(), refinements + 1)
            .map_err(at("multiplier program"))?;
        let cert = kkt_check(&prob, &finer.gain, &finer.lambda, tol).map_err(at("certificate"))?;
        let before = first.duality_gap_rel;
        run.check(
            "gap_shrinks",
            cert.duality_gap_rel < before || before == 0.0,
            format!("gap {before:.3e} -> {:.3e} with one more refinement", cert.duality_gap_rel),
        );
    }
    Ok(())
}

fn rounded(xs: &[f64]) -> Vec<f64> {
    xs.iter().map(|x| (x * 1e4).round() / 1e4).collect()
}

/// `Regret_k · √k`.
pub fn scaled_regret(regret: &[f64]) -> Vec<f64> {
    regret
        .iter()
        .enumerate()
        .map(|(i, r)| r * ((i + 1) as f64).sqrt())
        .collect()
}

/// Boundedness of `Regret_k·√k` on a finite run: the maximum over the second
/// half of the iterations does not exceed the maximum over the first half.
pub fn sqrtk_bounded(regret: &[f64]) -> (bool, f64, f64) {
    let s = scaled_regret(regret);
    let half = s.len().div_ceil(2);
    let first = s[..half].iter().copied().fold(0.0, f64::max);
    let second = s[half..].iter().copied().fold(0.0, f64::max);
    (second <= first, first, second)
}

/// Largest relative violation `|J_i − c_i| / c_i` at the final iterate.
pub fn final_violation(trace: &SolveTrace, limits: &Vector) -> f64 {
    trace.last().map_or(0.0, |rec| {
        limits
            .iter()
            .enumerate()
            .map(|(i, c)| ((rec.costs[i + 1] - c) / c).abs())
            .fold(0.0, f64::max)
    })
}

/// Empirical regret-bound constants for one trace.
pub fn bound_constants<R: Rng + ?Sized>(
    prob: &CcLqrProblem,
    solver: &SolverConfig,
    trace: &SolveTrace,
    mu_hat: f64,
    rng: &mut R,
) -> cclqr_core::Result<BoundConstants> {
    let picks: Vec<Vector> = [0, trace.len() / 2, trace.len().saturating_sub(1)]
        .iter()
        .filter_map(|&i| trace.iterations.get(i).map(|r| r.lambda.clone()))
        .collect();
    let c_hat = estimate_bias_slope(prob, &picks, &[1e-2, 1e-3], 8, rng)?;
    Ok(BoundConstants {
        mu_hat,
        c_hat,
        dbar_hat: trace.max_subgradient_norm(),
        omega_norm: solver.omega.radius(),
        eta: solver.eta,
        eps: trace.epsilon_est,
    })
}

fn run_sec5(run: &mut Run<'_>) -> Result<(), StageError> {
    let prob = run.prob().clone();
    let n = prob.num_constraints();
    let solver = run.prep.solver.clone();
    let (k0, lambda0) = (run.prep.k0.clone(), run.prep.lambda0.clone());
    let d_star = reference_value(&prob, &solver.omega)?;

    let mut budgets = run.cfg.solver.budgets.clone();
    budgets.sort_unstable();
    budgets.dedup();
    let configured = match solver.inner {
        InnerStop::Steps(s) if budgets.contains(&s) => None,
        other => Some(other),
    };
    let mut jobs: Vec<InnerStop> = budgets.iter().map(|&b| InnerStop::Steps(b)).collect();
    jobs.extend(configured);
    let results = par::map(&jobs, |inner| {
        let cfg = SolverConfig {
            inner: *inner,
            ..solver.clone()
        };
        solve_with(&prob, &cfg, &k0, &lambda0, d_star)
    });
    let mut runs = Vec::with_capacity(results.len());
    for r in results {
        runs.push(r?);
    }

    let mut plotted = Vec::new();
    for (b, (trace, r)) in budgets.iter().zip(&runs) {
        let name = format!("trace_pg{b}.csv");
        run.write(&name, &report::trace_csv(trace, n, r))?;
        plotted.push((name, format!("{b} PG steps")));
    }
    let main_idx = match solver.inner {
        InnerStop::Steps(s) if configured.is_none() => budgets.iter().position(|&b| b == s).unwrap_or(0),
        _ => runs.len() - 1,
    };
    let (main_trace, main_regret) = &runs[main_idx];
    run.write("trace.csv", &report::trace_csv(main_trace, n, main_regret))?;
    trace_checks(run, main_trace, main_regret);

    let largest = &runs[budgets.len() - 1].1;
    let (ok, first, second) = sqrtk_bounded(largest);
    run.check(
        "regret_sqrtk_bounded",
        ok,
        format!(
            "budget {}: max Regret_k*sqrt(k) {first:.4e} over the first half, {second:.4e} over the second",
            budgets[budgets.len() - 1]
        ),
    );

    let finals: Vec<f64> = runs[..budgets.len()].iter().map(|(_, r)| r[r.len() - 1]).collect();
    let ordered = finals.len() >= 2 && finals.windows(2).all(|w| w[1] < w[0]);
    let listing: Vec<String> = budgets
        .iter()
        .zip(&finals)
        .map(|(b, f)| format!("{b}: {f:.4e}"))
        .collect();
    run.check("regret_ordered", ordered, format!("final regret by budget {}", listing.join(", ")));

    let violation = final_violation(main_trace, prob.limits());
    run.check(
        "violations",
        violation <= VIOLATION_TOL,
        format!("largest final |J_i - c_i|/c_i {violation:.3e} (limit {VIOLATION_TOL:e})"),
    );

    certificate(run, false)?;
    regret_bound_check(run, &prob, &solver, &budgets, &runs, d_star)?;

    let plot = report::plot_script(&plotted, prob.limits(), j0_star(&prob)?);
    run.write("plot.gp", &plot)
}

fn regret_bound_check(
    run: &mut Run<'_>,
    prob: &CcLqrProblem,
    solver: &SolverConfig,
    budgets: &[usize],
    runs: &[(SolveTrace, Vec<f64>)],
    d_star: f64,
) -> Result<(), StageError> {
    let cfg = run.cfg;
    let lab = &cfg.lab;
    let mut rng = run.rng(1);
    let mu_hat = if prob.num_constraints() == 0 {
        0.0
    } else {
        smoothness_probe(prob, &solver.omega, lab.smoothness_pairs, lab.smoothness_radius, &mut rng)
            .map_err(at("smoothness probe"))?
            .mu_hat
    };
    let mut passed = true;
    let mut notes = Vec::new();
    for (b, (trace, r)) in budgets.iter().zip(runs) {
        let constants = bound_constants(prob, solver, trace, mu_hat, &mut rng).map_err(at("bias slope"))?;
        match regret_bound(trace.len(), d_star, &constants) {
            Ok(bound) => {
                let violated = r.iter().zip(&bound).filter(|(m, b)| m > b).count();
                passed &= violated == 0;
                notes.push(format!("budget {b}: {violated} of {} iterations above the bound", r.len()));
            }
            Err(e) => {
                passed = false;
                notes.push(format!("budget {b}: {e}"));
            }
        }
    }
    run.check("regret_bound", passed, format!("mu_hat {mu_hat:.4e}; {}", notes.join("; ")));
    Ok(())
}

fn random_in<R: Rng + ?Sized>(rng: &mut R, hi: &Vector) -> Vector {
    Vector::from_fn(hi.len(), |i, _| rng.random_range(0.0..=hi[i]))
}

/// Box `[0, min(upper, cap)]` used to keep probes in a well-conditioned range.
fn capped(omega: &OmegaBox, cap: f64) -> Vector {
    omega.upper().map(|u| u.min(cap))
}

/// Central finite-difference gradient of the Lagrangian in `K`.
pub fn policy_gradient_fd(prob: &CcLqrProblem, k: &Mat, lambda: &Vector, h: f64) -> cclqr_core::Result<Mat> {
    let mut g = Mat::zeros(k.nrows(), k.ncols());
    for r in 0..k.nrows() {
        for c in 0..k.ncols() {
            let mut plus = k.clone();
            plus[(r, c)] += h;
            let mut minus = k.clone();
            minus[(r, c)] -= h;
            let lp = prob.lagrangian(&prob.gain(plus)?, lambda)?;
            let lm = prob.lagrangian(&prob.gain(minus)?, lambda)?;
            g[(r, c)] = (lp - lm) / (2.0 * h);
        }
    }
    Ok(g)
}

/// Central finite-difference gradient of `D` with step `1e-5 (1 + |λ_j|)`.
pub fn dual_gradient_fd(prob: &CcLqrProblem, lambda: &Vector) -> cclqr_core::Result<Vector> {
    let mut g = Vector::zeros(lambda.len());
    for j in 0..lambda.len() {
        let h = 1e-5 * (1.0 + lambda[j].abs());
        let mut plus = lambda.clone();
        plus[j] += h;
        let mut minus = lambda.clone();
        minus[j] -= h;
        g[j] = (prob.dual_value(&plus)? - prob.dual_value(&minus)?) / (2.0 * h);
    }
    Ok(g)
}

/// Lattice of `points` values per coordinate on `[hi/20, hi]`.
fn lattice(hi: &Vector, points: usize) -> Vec<Vector> {
    let n = hi.len();
    let mut out = vec![Vector::zeros(n)];
    for j in 0..n {
        let lo = hi[j] / 20.0;
        let step = (hi[j] - lo) / (points - 1) as f64;
        out = out
            .into_iter()
            .flat_map(|base| {
                (0..points).map(move |p| {
                    let mut v = base.clone();
                    v[j] = lo + step * p as f64;
                    v
                })
            })
            .collect();
    }
    out
}

fn run_grad_check(run: &mut Run<'_>) -> Result<(), StageError> {
    let prob = run.prob().clone();
    let n = prob.num_constraints();
    let hi = capped(run.omega(), 10.0);
    let mut rng = run.rng(2);

    // Policy gradient at perturbed Riccati gains.
    let mut points = Vec::new();
    while points.len() < run.cfg.lab.fd_points {
        let lambda = random_in(&mut rng, &hi);
        let base = prob.solve_are(&lambda, ARE_TOL).map_err(at("grad-check"))?.gain;
        let dir = Mat::from_fn(base.k().nrows(), base.k().ncols(), |_, _| rng.random_range(-1.0..1.0));
        let scale = 0.1 * (1.0 + base.k().norm()) / dir.norm().max(1e-12);
        let k = base.k() + dir * scale;
        let gain = prob.gain(k).map_err(at("grad-check"))?;
        if gain.rho() < 0.99 {
            points.push((gain, lambda));
        }
    }
    let policy = par::try_map(&points, |(gain, lambda)| -> cclqr_core::Result<f64> {
        let g = prob.policy_gradient(gain, lambda)?;
        let fd = policy_gradient_fd(&prob, gain.k(), lambda, POLICY_FD_STEP)?;
        Ok((g - &fd).norm() / fd.norm())
    })
    .map_err(at("grad-check"))?;

    let grid = if n <= 3 {
        lattice(&hi, 5)
    } else {
        (0..25).map(|_| random_in(&mut rng, &hi).map(|x| x.max(1e-3))).collect()
    };
    let dual = par::try_map(&grid, |lambda| -> cclqr_core::Result<f64> {
        let g = dual_gradient_exact(&prob, lambda)?;
        let fd = dual_gradient_fd(&prob, lambda)?;
        Ok((g - &fd).norm() / fd.norm())
    })
    .map_err(at("grad-check"))?;

    let mut table = Table::new("kind,point,rel_err");
    for (i, e) in policy.iter().enumerate() {
        table.push("policy", i, *e);
    }
    for (i, e) in dual.iter().enumerate() {
        table.push("dual", i, *e);
    }
    run.write("gradcheck.csv", &table.render())?;
    let worst_policy = policy.iter().copied().fold(0.0, f64::max);
    let worst_dual = dual.iter().copied().fold(0.0, f64::max);
    run.check(
        "policy_gradient",
        worst_policy <= POLICY_FD_TOL,
        format!("max relative error {worst_policy:.3e} over {} gains (limit {POLICY_FD_TOL:e})", policy.len()),
    );
    run.check(
        "dual_gradient",
        worst_dual <= DUAL_FD_TOL,
        format!("max relative error {worst_dual:.3e} over {} multipliers (limit {DUAL_FD_TOL:e})", dual.len()),
    );
    run.write("plot.gp", &table_plot("gradcheck.csv", "relative error", &["policy", "dual"]))
}

fn table_plot(file: &str, ylabel: &str, kinds: &[&str]) -> String {
    let mut s = format!(
        "set datafile separator ','\nset terminal pngcairo size 900,600\nset output '{}.png'\n\
         set logscale y\nset xlabel 'index'\nset ylabel '{ylabel}'\nplot ",
        file.trim_end_matches(".csv")
    );
    let curves: Vec<String> = kinds
        .iter()
        .map(|k| format!("'{file}' using 2:(strcol(1) eq '{k}' ? abs($3) : NaN) with points title '{k}'"))
        .collect();
    s.push_str(&curves.join(", \\\n     "));
    s.push('\n');
    s
}

fn run_probes(run: &mut Run<'_>) -> Result<(), StageError> {
    let prob = run.prob().clone();
    let n = prob.num_constraints();
    let omega = run.omega().clone();
    let lab = run.cfg.lab.clone();
    let mut table = Table::new("probe,index,value");
    let mut rng = run.rng(3);

    // Coordinate sweeps of J_j(K*_λ).
    let hi = capped(&omega, 50.0);
    let mut worst_increase: f64 = 0.0;
    for j in 1..=n {
        let values: Vec<f64> = (0..21).map(|s| hi[j - 1] * s as f64 / 20.0).collect();
        for _ in 0..3 {
            let base = random_in(&mut rng, &hi);
            let seq = monotonicity_probe(&prob, &base, j, &values).map_err(at("monotonicity probe"))?;
            worst_increase = worst_increase.max(max_increase(&seq));
        }
        table.push("monotonicity", j, worst_increase);
    }
    run.check(
        "monotonicity",
        worst_increase <= MONOTONICITY_TOL,
        format!("largest increase along a sweep {worst_increase:.3e} (tol {MONOTONICITY_TOL:e})"),
    );

    // Continuity of λ ↦ K*_λ around the reference optimum.
    let center = if n == 0 {
        Vector::zeros(0)
    } else {
        reference_dual_optimum(&prob, &omega, D_STAR_TOL)
            .map_err(at("reference optimum"))?
            .lambda
    };
    let radii = [1e-1, 1e-2, 1e-3, 1e-4];
    let moves = continuity_probe(&prob, &center, &radii, 8, &mut rng).map_err(at("continuity probe"))?;
    for (i, m) in moves.iter().enumerate() {
        table.push("continuity", i, *m);
    }
    let shrinking = moves.windows(2).all(|w| w[1] <= w[0]);
    let ratio = if moves[0] > 0.0 { moves[moves.len() - 1] / moves[0] } else { 0.0 };
    run.check(
        "continuity",
        shrinking && ratio <= 1e-2,
        format!(
            "max gain change {} at radii {radii:?}",
            moves.iter().map(|m| format!("{m:.3e}")).collect::<Vec<_>>().join(", ")
        ),
    );

    // Smoothness estimate at two radii on the same sampled multipliers.
    if n > 0 {
        let r = lab.smoothness_radius;
        let coarse = smoothness_probe(&prob, &omega, lab.smoothness_pairs, r, &mut run.rng(4))
            .map_err(at("smoothness probe"))?;
        let fine = smoothness_probe(&prob, &omega, lab.smoothness_pairs, r / 2.0, &mut run.rng(4))
            .map_err(at("smoothness probe"))?;
        table.push("smoothness", 0, coarse.mu_hat);
        table.push("smoothness", 1, fine.mu_hat);
        let drift = (fine.mu_hat / coarse.mu_hat - 1.0).abs();
        run.check(
            "smoothness_stable",
            coarse.mu_hat.is_finite() && drift <= SMOOTHNESS_DRIFT,
            format!("mu_hat {:.4e} at radius {r:e}, {:.4e} at half radius", coarse.mu_hat, fine.mu_hat),
        );
    } else {
        run.check("smoothness_stable", true, "no multipliers to probe".into());
    }

    // Midpoint concavity on random triples.
    let hi = capped(&omega, 20.0);
    let triples: Vec<(Vector, Vector, f64)> = (0..CONCAVITY_TRIPLES)
        .map(|_| (random_in(&mut rng, &hi), random_in(&mut rng, &hi), rng.random_range(0.0..1.0)))
        .collect();
    let margins = par::try_map(&triples, |(a, b, t)| concavity_margin(&prob, a, b, *t))
        .map_err(at("concavity probe"))?;
    for (i, m) in margins.iter().enumerate() {
        table.push("concavity", i, *m);
    }
    let worst = margins.iter().copied().fold(f64::INFINITY, f64::min);
    run.check(
        "concavity",
        worst >= -CONCAVITY_SLACK,
        format!("smallest margin {worst:.3e} over {CONCAVITY_TRIPLES} triples"),
    );

    run.write("probes.csv", &table.render())?;
    run.write(
        "plot.gp",
        &table_plot("probes.csv", "probe value", &["monotonicity", "continuity", "smoothness", "concavity"]),
    )
}
