//! JSON run configuration. Matrices are row-major nested arrays.

use std::fmt;
use std::path::{Path, PathBuf};

use cclqr_core::lqr::{CcLqrProblem, Gain, Penalty, ARE_TOL};
use cclqr_core::matcore::{from_rows, to_rows, Mat, Vector};
use cclqr_core::primal_dual::{InnerStop, OmegaBox, SolverConfig, DEFAULT_LAMBDA_MAX};
use cclqr_core::problems;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

impl From<serde_json::Error> for ConfigError {
    fn from(e: serde_json::Error) -> Self {
        ConfigError::Parse {
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Experiment {
    Solve,
    Verify,
    #[serde(rename = "reproduce-sec5")]
    #[value(name = "reproduce-sec5")]
    ReproduceSec5,
    GradCheck,
    Probes,
}

impl fmt::Display for Experiment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Experiment::Solve => "solve",
            Experiment::Verify => "verify",
            Experiment::ReproduceSec5 => "reproduce-sec5",
            Experiment::GradCheck => "grad-check",
            Experiment::Probes => "probes",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PenaltySpec {
    pub q: Vec<Vec<f64>>,
    pub r: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemSpec {
    pub a: Vec<Vec<f64>>,
    pub b: Vec<Vec<f64>>,
    /// `(Q_0, R_0)` first, then one pair per constraint.
    pub penalties: Vec<PenaltySpec>,
    pub limits: Vec<f64>,
    /// `E[x₀x₀ᵀ]`; identity when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma0: Option<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverSpec {
    #[serde(default = "default_zeta")]
    pub zeta: f64,
    #[serde(default = "default_eta")]
    pub eta: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pg_steps: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pg_grad_tol: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pg_max_steps: Option<usize>,
    #[serde(default = "default_dual_iters")]
    pub dual_iters: usize,
    /// Upper corner of the multiplier box; `lambda_max` in every coordinate
    /// when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub omega_upper: Option<Vec<f64>>,
    #[serde(default = "default_lambda_max")]
    pub lambda_max: f64,
    #[serde(default = "default_true")]
    pub warm_start: bool,
    /// Initial gain; the Riccati gain at `λ = 0` when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k0: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda0: Option<Vec<f64>>,
    /// PG budgets compared by `reproduce-sec5`.
    #[serde(default = "default_budgets")]
    pub budgets: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabSpec {
    #[serde(default = "default_grid_res")]
    pub grid_res: usize,
    #[serde(default = "default_refinements")]
    pub refinements: usize,
    #[serde(default = "default_kkt_tol")]
    pub kkt_tol: f64,
    /// Weight of the multiplier program; all ones when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub z: Option<Vec<f64>>,
    #[serde(default)]
    pub z_sweep: Vec<Vec<f64>>,
    #[serde(default = "default_pairs")]
    pub smoothness_pairs: usize,
    #[serde(default = "default_radius")]
    pub smoothness_radius: f64,
    #[serde(default = "default_fd_points")]
    pub fd_points: usize,
    /// Assertion names checked by the run; each experiment has a default set.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub assertions: Option<Vec<String>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub problem: ProblemSpec,
    #[serde(default)]
    pub solver: SolverSpec,
    #[serde(default = "default_experiment")]
    pub experiment: Experiment,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub lab: LabSpec,
}

fn default_zeta() -> f64 {
    1e-3
}
fn default_eta() -> f64 {
    0.5
}
fn default_dual_iters() -> usize {
    50
}
fn default_lambda_max() -> f64 {
    DEFAULT_LAMBDA_MAX
}
fn default_true() -> bool {
    true
}
fn default_budgets() -> Vec<usize> {
    vec![50, 100, 1000]
}
fn default_grid_res() -> usize {
    60
}
fn default_refinements() -> usize {
    2
}
fn default_kkt_tol() -> f64 {
    1e-2
}
fn default_pairs() -> usize {
    200
}
fn default_radius() -> f64 {
    1e-3
}
fn default_fd_points() -> usize {
    20
}
fn default_experiment() -> Experiment {
    Experiment::Solve
}
fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

impl Default for SolverSpec {
    fn default() -> Self {
        Self {
            zeta: default_zeta(),
            eta: default_eta(),
            pg_steps: Some(100),
            pg_grad_tol: None,
            pg_max_steps: None,
            dual_iters: default_dual_iters(),
            omega_upper: None,
            lambda_max: default_lambda_max(),
            warm_start: true,
            k0: None,
            lambda0: None,
            budgets: default_budgets(),
        }
    }
}

impl Default for LabSpec {
    fn default() -> Self {
        Self {
            grid_res: default_grid_res(),
            refinements: default_refinements(),
            kkt_tol: default_kkt_tol(),
            z: None,
            z_sweep: Vec::new(),
            smoothness_pairs: default_pairs(),
            smoothness_radius: default_radius(),
            fd_points: default_fd_points(),
            assertions: None,
        }
    }
}

fn invalid(e: impl fmt::Display) -> ConfigError {
    ConfigError::Invalid(e.to_string())
}

fn matrix(rows: &[Vec<f64>], name: &str) -> Result<Mat, ConfigError> {
    from_rows(rows).map_err(|e| ConfigError::Invalid(format!("{name}: {e}")))
}

impl ProblemSpec {
    pub fn build(&self) -> Result<CcLqrProblem, ConfigError> {
        let a = matrix(&self.a, "A")?;
        let b = matrix(&self.b, "B")?;
        let penalties = self
            .penalties
            .iter()
            .enumerate()
            .map(|(i, p)| {
                Ok(Penalty {
                    q: matrix(&p.q, &format!("Q_{i}"))?,
                    r: matrix(&p.r, &format!("R_{i}"))?,
                })
            })
            .collect::<Result<Vec<_>, ConfigError>>()?;
        let limits = Vector::from_vec(self.limits.clone());
        let sigma0 = match &self.sigma0 {
            Some(rows) => matrix(rows, "sigma0")?,
            None => Mat::identity(a.nrows(), a.nrows()),
        };
        CcLqrProblem::new(a, b, penalties, limits, sigma0).map_err(invalid)
    }

    pub fn from_problem(prob: &CcLqrProblem, explicit_sigma0: bool) -> Self {
        Self {
            a: to_rows(prob.a()),
            b: to_rows(prob.b()),
            penalties: prob
                .penalties()
                .iter()
                .map(|p| PenaltySpec {
                    q: to_rows(&p.q),
                    r: to_rows(&p.r),
                })
                .collect(),
            limits: prob.limits().iter().copied().collect(),
            sigma0: explicit_sigma0.then(|| to_rows(prob.sigma0())),
        }
    }
}

impl SolverSpec {
    pub fn inner_stop(&self) -> Result<InnerStop, ConfigError> {
        match (self.pg_steps, self.pg_grad_tol) {
            (Some(n), None) => Ok(InnerStop::Steps(n)),
            (None, Some(tol)) => Ok(InnerStop::GradTol {
                tol,
                max_steps: self.pg_max_steps.unwrap_or(1_000_000),
            }),
            _ => Err(ConfigError::Invalid(
                "exactly one of pg_steps and pg_grad_tol must be given".into(),
            )),
        }
    }

    pub fn omega(&self, n_constraints: usize) -> Result<OmegaBox, ConfigError> {
        let upper = match &self.omega_upper {
            Some(u) => Vector::from_vec(u.clone()),
            None => Vector::from_element(n_constraints, self.lambda_max),
        };
        if upper.len() != n_constraints {
            return Err(ConfigError::Invalid(format!(
                "omega_upper needs {n_constraints} entries, got {}",
                upper.len()
            )));
        }
        OmegaBox::new(Vector::zeros(n_constraints), upper).map_err(invalid)
    }

    pub fn solver_config(&self, n_constraints: usize) -> Result<SolverConfig, ConfigError> {
        let cfg = SolverConfig {
            zeta: self.zeta,
            eta: self.eta,
            inner: self.inner_stop()?,
            dual_iters: self.dual_iters,
            omega: self.omega(n_constraints)?,
            warm_start: self.warm_start,
        };
        cfg.validate(n_constraints).map_err(invalid)?;
        Ok(cfg)
    }
}

/// Everything a run needs, built and validated from a [`RunConfig`].
#[derive(Debug, Clone)]
pub struct Prepared {
    pub problem: CcLqrProblem,
    pub solver: SolverConfig,
    pub k0: Gain,
    pub lambda0: Vector,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let cfg: RunConfig = serde_json::from_str(text)?;
        cfg.prepare()?;
        Ok(cfg)
    }

    /// Reads, parses and validates a configuration file.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serialises");
        s.push('\n');
        s
    }

    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        std::fs::write(path, self.to_json())
    }

    pub fn prepare(&self) -> Result<Prepared, ConfigError> {
        let problem = self.problem.build()?;
        let n = problem.num_constraints();
        let solver = self.solver.solver_config(n)?;
        for &b in &self.solver.budgets {
            if b == 0 {
                return Err(ConfigError::Invalid("PG budgets must be positive".into()));
            }
        }
        let k0 = match &self.solver.k0 {
            Some(rows) => problem.gain(matrix(rows, "k0")?).map_err(invalid)?,
            None => problem
                .solve_are(&Vector::zeros(n), ARE_TOL)
                .map_err(invalid)?
                .gain,
        };
        if !k0.is_stabilizing() {
            return Err(ConfigError::Invalid(format!(
                "k0 is not stabilizing (spectral radius {})",
                k0.rho()
            )));
        }
        let lambda0 = match &self.solver.lambda0 {
            Some(l) => Vector::from_vec(l.clone()),
            None => Vector::zeros(n),
        };
        if !solver.omega.contains(&lambda0) {
            return Err(ConfigError::Invalid("lambda0 must lie in the multiplier box".into()));
        }
        let lab = &self.lab;
        if lab.grid_res < 2 {
            return Err(ConfigError::Invalid("grid_res must be at least 2".into()));
        }
        if !(lab.kkt_tol > 0.0) || !(lab.smoothness_radius > 0.0) {
            return Err(ConfigError::Invalid("kkt_tol and smoothness_radius must be positive".into()));
        }
        if lab.smoothness_pairs < 10 {
            return Err(ConfigError::Invalid("smoothness_pairs must be at least 10".into()));
        }
        for z in lab.z.iter().chain(lab.z_sweep.iter()) {
            if z.len() != n || z.iter().any(|x| !(*x > 0.0)) {
                return Err(ConfigError::Invalid(format!(
                    "z vectors need {n} positive entries"
                )));
            }
        }
        Ok(Prepared {
            problem,
            solver,
            k0,
            lambda0,
        })
    }

    /// The planar double-integrator benchmark with its published parameters.
    pub fn double_integrator() -> Self {
        let prob = problems::double_integrator();
        Self {
            problem: ProblemSpec::from_problem(&prob, false),
            solver: SolverSpec {
                k0: Some(to_rows(&problems::double_integrator_initial_gain())),
                warm_start: false,
                ..SolverSpec::default()
            },
            experiment: Experiment::ReproduceSec5,
            seed: 0,
            output_dir: default_output_dir(),
            lab: LabSpec {
                z_sweep: vec![vec![1.0, 1.0], vec![1.0, 4.0], vec![4.0, 1.0]],
                ..LabSpec::default()
            },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bundled_config_matches_builtin_benchmark() {
        let text = include_str!("../configs/sec5.json");
        let cfg = RunConfig::from_json(text).unwrap();
        assert_eq!(cfg, RunConfig::double_integrator());
        let prepared = cfg.prepare().unwrap();
        assert_eq!(prepared.problem, problems::double_integrator());
        assert_eq!(prepared.solver.zeta, 1e-3);
        assert_eq!(prepared.solver.eta, 0.5);
    }

    #[test]
    fn zero_q0_is_rejected() {
        let mut cfg = RunConfig::double_integrator();
        cfg.problem.penalties[0].q = vec![vec![0.0; 4]; 4];
        let err = cfg.prepare().unwrap_err().to_string();
        assert!(err.contains("Q_0 not positive definite"), "{err}");
    }

    #[test]
    fn uncontrollable_pair_is_rejected() {
        let mut cfg = RunConfig::double_integrator();
        cfg.problem.a = to_rows(&Mat::identity(4, 4));
        cfg.problem.b = vec![vec![0.0; 2]; 4];
        let err = cfg.prepare().unwrap_err().to_string();
        assert!(err.contains("not controllable"), "{err}");
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        let err = RunConfig::from_json("{\n  \"seed\": 1,\n  \"lab\" {}\n}").unwrap_err();
        assert!(matches!(err, ConfigError::Parse { line: 3, .. }), "{err:?}");
    }

    #[test]
    fn inner_stop_needs_exactly_one_rule() {
        let mut s = SolverSpec::default();
        s.pg_grad_tol = Some(1e-6);
        assert!(s.inner_stop().is_err());
        s.pg_steps = None;
        assert!(matches!(s.inner_stop().unwrap(), InnerStop::GradTol { .. }));
        s.pg_grad_tol = None;
        assert!(s.inner_stop().is_err());
    }

    #[test]
    fn unstable_k0_is_rejected() {
        let mut cfg = RunConfig::double_integrator();
        cfg.solver.k0 = Some(vec![vec![0.0; 4]; 2]);
        assert!(cfg.prepare().unwrap_err().to_string().contains("not stabilizing"));
    }
}
