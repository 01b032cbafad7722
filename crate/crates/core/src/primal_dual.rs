//! The policy-gradient primal-dual method: gradient descent on the Lagrangian
//! for a fixed multiplier, an approximate dual gradient from the resulting
//! gain, and projected dual ascent over a box.

use rand::Rng;
use thiserror::Error;

use crate::error::{Error, Result};
use crate::lqr::{CcLqrProblem, DualPoint, Gain};
use crate::matcore::{Mat, Vector};

/// Default per-coordinate upper bound of the multiplier box.
pub const DEFAULT_LAMBDA_MAX: f64 = 100.0;

/// Coordinate box `[lower, upper]` that dual iterates are projected onto.
#[derive(Debug, Clone, PartialEq)]
pub struct OmegaBox {
    lower: Vector,
    upper: Vector,
}

impl OmegaBox {
    pub fn new(lower: Vector, upper: Vector) -> Result<Self> {
        if lower.len() != upper.len() {
            return Err(Error::Dimension {
                op: "OmegaBox::new",
                expected: format!("upper of length {}", lower.len()),
                got: format!("length {}", upper.len()),
            });
        }
        for (i, (lo, hi)) in lower.iter().zip(upper.iter()).enumerate() {
            if !(lo.is_finite() && hi.is_finite() && 0.0 <= *lo && lo <= hi) {
                return Err(Error::Domain(format!(
                    "box coordinate {} needs 0 <= lower <= upper, got [{lo}, {hi}]",
                    i + 1
                )));
            }
        }
        Ok(Self { lower, upper })
    }

    /// `[0, lambda_max]^n`.
    pub fn uniform(n: usize, lambda_max: f64) -> Result<Self> {
        Self::new(Vector::zeros(n), Vector::from_element(n, lambda_max))
    }

    pub fn lower(&self) -> &Vector {
        &self.lower
    }

    pub fn upper(&self) -> &Vector {
        &self.upper
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn contains(&self, lambda: &Vector) -> bool {
        lambda.len() == self.dim()
            && lambda
                .iter()
                .zip(self.lower.iter().zip(self.upper.iter()))
                .all(|(x, (lo, hi))| lo <= x && x <= hi)
    }

    /// Euclidean projection, i.e. a componentwise clamp.
    pub fn project(&self, lambda: &Vector) -> Vector {
        lambda.zip_zip_map(&self.lower, &self.upper, |x, lo, hi| x.clamp(lo, hi))
    }

    /// `ω = max_{λ ∈ Ω} ‖λ‖`, attained at the upper corner.
    pub fn radius(&self) -> f64 {
        self.upper.norm()
    }
}

/// Stopping rule of the inner policy-gradient loop.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum InnerStop {
    /// A fixed number of gradient steps per multiplier.
    Steps(usize),
    /// Run until `‖∇_K L‖ <= tol`, failing after `max_steps`.
    GradTol { tol: f64, max_steps: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolverConfig {
    /// Primal stepsize.
    pub zeta: f64,
    /// Dual stepsize.
    pub eta: f64,
    pub inner: InnerStop,
    pub dual_iters: usize,
    pub omega: OmegaBox,
    pub warm_start: bool,
}

impl SolverConfig {
    /// Double-integrator defaults: `ζ = 1e-3`, `η = 0.5`, 100 PG steps,
    /// 50 dual iterations, `Ω = [0, 100]^N`, every PG phase restarted from `K⁰`.
    pub fn benchmark(n_constraints: usize) -> Self {
        Self {
            zeta: 1e-3,
            eta: 0.5,
            inner: InnerStop::Steps(100),
            dual_iters: 50,
            omega: OmegaBox::uniform(n_constraints, DEFAULT_LAMBDA_MAX)
                .expect("default box is valid"),
            warm_start: false,
        }
    }

    pub fn validate(&self, n_constraints: usize) -> Result<()> {
        if !(self.zeta.is_finite() && self.zeta > 0.0) {
            return Err(Error::Domain(format!("zeta must be positive, got {}", self.zeta)));
        }
        if !(self.eta.is_finite() && self.eta > 0.0) {
            return Err(Error::Domain(format!("eta must be positive, got {}", self.eta)));
        }
        match self.inner {
            InnerStop::Steps(0) => return Err(Error::Domain("pg_steps must be positive".into())),
            InnerStop::GradTol { tol, max_steps } if !(tol > 0.0) || max_steps == 0 => {
                return Err(Error::Domain("pg_grad_tol and its step cap must be positive".into()))
            }
            _ => {}
        }
        if self.dual_iters == 0 {
            return Err(Error::Domain("dual_iters must be positive".into()));
        }
        if self.omega.dim() != n_constraints {
            return Err(Error::Dimension {
                op: "SolverConfig",
                expected: format!("box of dimension {n_constraints}"),
                got: format!("dimension {}", self.omega.dim()),
            });
        }
        Ok(())
    }
}

/// One dual iteration: the primal solve at `lambda`, its costs and
/// subgradient, and the multiplier it produced.
#[derive(Debug, Clone, PartialEq)]
pub struct IterationRecord {
    pub lambda: Vector,
    pub gain: Gain,
    /// `J_0..J_N` at `gain`.
    pub costs: Vec<f64>,
    /// `D(lambda)`.
    pub dual: f64,
    pub subgradient: Vector,
    pub pg_steps: usize,
    /// `‖gain − K*_lambda‖_F`.
    pub eps_est: f64,
    pub lambda_next: Vector,
    /// `D(lambda_next)`.
    pub dual_next: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SolveTrace {
    pub iterations: Vec<IterationRecord>,
    /// Reference dual optimum `D*` used for regret.
    pub d_star_ref: Option<f64>,
    /// Largest `eps_est` over the run.
    pub epsilon_est: f64,
}

impl SolveTrace {
    pub fn with_reference(mut self, d_star: f64) -> Self {
        self.d_star_ref = Some(d_star);
        self
    }

    pub fn len(&self) -> usize {
        self.iterations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.iterations.is_empty()
    }

    pub fn last(&self) -> Option<&IterationRecord> {
        self.iterations.last()
    }

    /// `max_k ‖d^k‖`.
    pub fn max_subgradient_norm(&self) -> f64 {
        self.iterations
            .iter()
            .map(|r| r.subgradient.norm())
            .fold(0.0, f64::max)
    }
}

/// A failed solve together with everything recorded before the failure.
#[derive(Debug, Error)]
#[error("primal-dual solve failed at dual iteration {iteration}: {source}")]
pub struct SolveError {
    pub iteration: usize,
    #[source]
    pub source: Error,
    pub partial: SolveTrace,
}

/// Gradient descent `K ← K − ζ ∇_K L(K, λ)` from `init`.
///
/// Every iterate must stay stabilizing; leaving the set is reported as a
/// stepsize error rather than clamped.
pub fn pg_minimize(
    prob: &CcLqrProblem,
    lambda: &Vector,
    init: &Gain,
    zeta: f64,
    stop: InnerStop,
) -> Result<(Gain, usize)> {
    if !init.is_stabilizing() {
        return Err(Error::Precondition(format!(
            "initial gain is not stabilizing (spectral radius {})",
            init.rho()
        )));
    }
    let w = prob.weighted_penalty(lambda)?;
    let mut gain = init.clone();
    let (budget, tol) = match stop {
        InnerStop::Steps(n) => (n, None),
        InnerStop::GradTol { tol, max_steps } => (max_steps, Some(tol)),
    };
    for step in 0..budget {
        let (grad, _) = prob.gradient_with(&w, gain.k())?;
        if let Some(tol) = tol {
            if grad.norm() <= tol {
                return Ok((gain, step));
            }
        }
        let next = prob.gain(gain.k() - grad * zeta)?;
        if !next.is_stabilizing() {
            return Err(Error::Stepsize {
                step: step + 1,
                rho: next.rho(),
            });
        }
        gain = next;
    }
    if let Some(tol) = tol {
        let (grad, _) = prob.gradient_with(&w, gain.k())?;
        if grad.norm() > tol {
            return Err(Error::Convergence {
                what: "policy gradient descent",
                iters: budget,
                residual: grad.norm(),
            });
        }
    }
    Ok((gain, budget))
}

/// `∇D(λ) = [J_i(K*_λ) − c_i]` with `K*_λ` from the Riccati equation.
pub fn dual_gradient_exact(prob: &CcLqrProblem, lambda: &Vector) -> Result<Vector> {
    Ok(prob.dual_point(lambda)?.gradient(prob.limits()))
}

/// `d = [J_i(K) − c_i]` at an approximate minimiser `K`.
pub fn dual_gradient_approx(prob: &CcLqrProblem, gain: &Gain) -> Result<Vector> {
    let costs = prob.costs(gain)?;
    Ok(constraint_residuals(prob, &costs))
}

fn constraint_residuals(prob: &CcLqrProblem, costs: &[f64]) -> Vector {
    Vector::from_iterator(
        prob.num_constraints(),
        costs[1..].iter().zip(prob.limits().iter()).map(|(j, c)| j - c),
    )
}

/// `Π_Ω(λ + η d)`.
pub fn dual_ascent_step(lambda: &Vector, d: &Vector, eta: f64, omega: &OmegaBox) -> Vector {
    omega.project(&(lambda + d * eta))
}

/// Runs `cfg.dual_iters` alternations of the primal-dual method from
/// `(k0, lambda0)`.
pub fn solve(
    prob: &CcLqrProblem,
    cfg: &SolverConfig,
    k0: &Gain,
    lambda0: &Vector,
) -> std::result::Result<SolveTrace, SolveError> {
    let mut trace = SolveTrace::default();
    let fail = |iteration, source, partial| SolveError {
        iteration,
        source,
        partial,
    };
    if let Err(e) = cfg.validate(prob.num_constraints()) {
        return Err(fail(0, e, trace));
    }
    if !cfg.omega.contains(lambda0) {
        return Err(fail(0, Error::Precondition("lambda0 lies outside the box".into()), trace));
    }
    if !k0.is_stabilizing() {
        return Err(fail(
            0,
            Error::Precondition(format!("K0 is not stabilizing (spectral radius {})", k0.rho())),
            trace,
        ));
    }

    let mut lambda = lambda0.clone();
    let mut here = match prob.dual_point(&lambda) {
        Ok(p) => p,
        Err(e) => return Err(fail(0, e, trace)),
    };
    let mut gain = k0.clone();
    for it in 0..cfg.dual_iters {
        let step = |here: &DualPoint, gain: &Gain| -> Result<(IterationRecord, DualPoint)> {
            let start = if cfg.warm_start { gain } else { k0 };
            let (k, pg_steps) = pg_minimize(prob, &lambda, start, cfg.zeta, cfg.inner)?;
            let costs = prob.costs(&k)?;
            let d = constraint_residuals(prob, &costs);
            let eps_est = (k.k() - here.gain.k()).norm();
            let lambda_next = dual_ascent_step(&lambda, &d, cfg.eta, &cfg.omega);
            let next = prob.dual_point(&lambda_next)?;
            let record = IterationRecord {
                lambda: lambda.clone(),
                gain: k,
                costs,
                dual: here.value,
                subgradient: d,
                pg_steps,
                eps_est,
                lambda_next,
                dual_next: next.value,
            };
            Ok((record, next))
        };
        match step(&here, &gain) {
            Ok((record, next)) => {
                trace.epsilon_est = trace.epsilon_est.max(record.eps_est);
                gain = record.gain.clone();
                lambda = record.lambda_next.clone();
                here = next;
                trace.iterations.push(record);
            }
            Err(e) => return Err(fail(it, e, trace)),
        }
    }
    Ok(trace)
}

/// Running-average dual regret
/// `Regret_k = (1/k) Σ_{i<k} (D* − D(λ^{i+1}))` for `k = 1..len`.
pub fn regret(trace: &SolveTrace, d_star: f64) -> Result<Vec<f64>> {
    if trace.is_empty() {
        return Err(Error::Precondition("trace has no dual iterations".into()));
    }
    let slack = 1e-9 * d_star.abs().max(1.0);
    let mut out = Vec::with_capacity(trace.len());
    let mut sum = 0.0;
    for (k, rec) in trace.iterations.iter().enumerate() {
        if rec.dual_next > d_star + slack {
            return Err(Error::InconsistentReference {
                d_star,
                recorded: rec.dual_next,
            });
        }
        sum += (d_star - rec.dual_next).max(0.0);
        out.push(sum / (k + 1) as f64);
    }
    Ok(out)
}

/// Empirical constants plugged into the regret bound.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundConstants {
    /// Smoothness constant of the dual function.
    pub mu_hat: f64,
    /// Slope of the dual-gradient bias in the primal solution error.
    pub c_hat: f64,
    /// Bound on the approximate dual gradient norm.
    pub dbar_hat: f64,
    /// `max_{λ ∈ Ω} ‖λ‖`.
    pub omega_norm: f64,
    pub eta: f64,
    /// Primal solution error.
    pub eps: f64,
}

impl BoundConstants {
    /// `p_1 = ηcε(1 − μη/2)(ηcε + 2d̄) + cεω`.
    pub fn p1(&self) -> f64 {
        let Self { mu_hat, c_hat, dbar_hat, omega_norm, eta, eps } = *self;
        eta * c_hat * eps * (1.0 - mu_hat * eta / 2.0) * (eta * c_hat * eps + 2.0 * dbar_hat)
            + c_hat * eps * omega_norm
    }

    /// `p_2 = (1 − μη/2) ω² / η²`.
    pub fn p2(&self) -> f64 {
        (1.0 - self.mu_hat * self.eta / 2.0) * self.omega_norm.powi(2) / self.eta.powi(2)
    }
}

/// Regret upper bound `√(p_2 D*)/√k + √(p_1 p_2)` for `k = 1..trace.len()`,
/// using the trace's reference optimum.
pub fn theorem2_bound(trace: &SolveTrace, constants: &BoundConstants) -> Result<Vec<f64>> {
    let d_star = trace
        .d_star_ref
        .ok_or_else(|| Error::Precondition("trace carries no reference optimum".into()))?;
    regret_bound(trace.len(), d_star, constants)
}

/// [`theorem2_bound`] for an explicit horizon and optimum.
pub fn regret_bound(len: usize, d_star: f64, constants: &BoundConstants) -> Result<Vec<f64>> {
    let BoundConstants { mu_hat, c_hat, dbar_hat, omega_norm, eta, eps } = *constants;
    if [mu_hat, c_hat, dbar_hat, omega_norm, eps]
        .iter()
        .any(|x| !(x.is_finite() && *x >= 0.0))
    {
        return Err(Error::Domain("bound constants must be finite and nonnegative".into()));
    }
    if !(eta > 0.0) {
        return Err(Error::Domain(format!("eta must be positive, got {eta}")));
    }
    if mu_hat > 0.0 && eta > 2.0 / mu_hat {
        return Err(Error::StepsizeCondition {
            eta,
            limit: 2.0 / mu_hat,
        });
    }
    if d_star < 0.0 {
        return Err(Error::Domain(format!("reference optimum must be nonnegative, got {d_star}")));
    }
    let (p1, p2) = (constants.p1(), constants.p2());
    let bias = (p1 * p2).sqrt();
    let lead = (p2 * d_star).sqrt();
    Ok((1..=len).map(|k| lead / (k as f64).sqrt() + bias).collect())
}

/// Maximiser of the dual function over a box: projected gradient ascent with
/// backtracking, then projected Newton steps on the free coordinates, then a
/// coordinate-search polish.
#[derive(Debug, Clone, PartialEq)]
pub struct DualOptimum {
    pub lambda: Vector,
    pub value: f64,
    /// `‖Π_Ω(λ + ∇D(λ)) − λ‖` at the returned point.
    pub projected_gradient: f64,
    pub iterations: usize,
}

fn projected_gradient_norm(omega: &OmegaBox, lambda: &Vector, grad: &Vector) -> f64 {
    (omega.project(&(lambda + grad)) - lambda).norm()
}

pub fn reference_dual_optimum(
    prob: &CcLqrProblem,
    omega: &OmegaBox,
    tol: f64,
) -> Result<DualOptimum> {
    const ASCENT_ITERS: usize = 2_000;
    const NEWTON_ITERS: usize = 100;
    let limits = prob.limits();
    let noise = |v: f64| 1e-13 * v.abs().max(1.0);
    let mut lambda = omega.lower().clone();
    let mut point = prob.dual_point(&lambda)?;
    let mut iterations = 0;

    let mut t = 1.0;
    while iterations < ASCENT_ITERS {
        let grad = point.gradient(limits);
        if projected_gradient_norm(omega, &lambda, &grad) <= tol.max(1e-4) {
            break;
        }
        iterations += 1;
        let mut accepted = false;
        for _ in 0..40 {
            let cand = omega.project(&(&lambda + &grad * t));
            let step = &cand - &lambda;
            let next = prob.dual_point(&cand)?;
            if next.value >= point.value + grad.dot(&step) - step.norm_squared() / (2.0 * t) - noise(point.value) {
                lambda = cand;
                point = next;
                accepted = true;
                t *= 2.0;
                break;
            }
            t *= 0.5;
        }
        if !accepted {
            break;
        }
    }

    for _ in 0..NEWTON_ITERS {
        let grad = point.gradient(limits);
        if projected_gradient_norm(omega, &lambda, &grad) <= tol {
            break;
        }
        iterations += 1;
        let free: Vec<usize> = (0..lambda.len())
            .filter(|&i| {
                let at_lower = lambda[i] <= omega.lower()[i] && grad[i] <= 0.0;
                let at_upper = lambda[i] >= omega.upper()[i] && grad[i] >= 0.0;
                !(at_lower || at_upper)
            })
            .collect();
        if free.is_empty() {
            break;
        }
        let hess = dual_hessian(prob, omega, &lambda, &free)?;
        let g_free = Vector::from_iterator(free.len(), free.iter().map(|&i| grad[i]));
        let direction = match nalgebra::Cholesky::new(-hess) {
            Some(chol) => chol.solve(&g_free),
            None => g_free.clone(),
        };
        let mut step = Vector::zeros(lambda.len());
        for (slot, &i) in free.iter().enumerate() {
            step[i] = direction[slot];
        }
        let mut scale = 1.0;
        let mut accepted = false;
        for _ in 0..40 {
            let cand = omega.project(&(&lambda + &step * scale));
            let next = prob.dual_point(&cand)?;
            if next.value >= point.value - noise(point.value) {
                lambda = cand;
                point = next;
                accepted = true;
                break;
            }
            scale *= 0.5;
        }
        if !accepted {
            break;
        }
    }

    let mut h = 1e-3;
    while h > 1e-12 {
        let mut improved = false;
        for i in 0..lambda.len() {
            for dir in [1.0, -1.0] {
                let mut cand = lambda.clone();
                cand[i] += dir * h;
                let cand = omega.project(&cand);
                if cand == lambda {
                    continue;
                }
                let next = prob.dual_point(&cand)?;
                if next.value > point.value + noise(point.value) {
                    lambda = cand;
                    point = next;
                    improved = true;
                }
            }
        }
        if !improved {
            h *= 0.1;
        }
    }
    let grad = point.gradient(limits);
    Ok(DualOptimum {
        projected_gradient: projected_gradient_norm(omega, &lambda, &grad),
        lambda,
        value: point.value,
        iterations,
    })
}

// Central-difference Hessian of D restricted to `free`, one-sided at the box
// faces, symmetrised.
fn dual_hessian(prob: &CcLqrProblem, omega: &OmegaBox, lambda: &Vector, free: &[usize]) -> Result<Mat> {
    let f = free.len();
    let mut hess = Mat::zeros(f, f);
    for (col, &j) in free.iter().enumerate() {
        let h = 1e-5 * (1.0 + lambda[j].abs());
        let mut hi = lambda.clone();
        hi[j] = (hi[j] + h).min(omega.upper()[j]);
        let mut lo = lambda.clone();
        lo[j] = (lo[j] - h).max(omega.lower()[j]);
        let width = hi[j] - lo[j];
        if width <= 0.0 {
            continue;
        }
        let diff = (dual_gradient_exact(prob, &hi)? - dual_gradient_exact(prob, &lo)?) / width;
        for (row, &i) in free.iter().enumerate() {
            hess[(row, col)] = diff[i];
        }
    }
    Ok((&hess + hess.transpose()) * 0.5)
}

/// Largest observed ratio `‖d(K) − ∇D(λ)‖ / ‖K − K*_λ‖` for gains sampled on
/// spheres of the given radii around `K*_λ`, over every multiplier in
/// `lambdas`. Sampled gains that are not stabilizing are skipped.
pub fn estimate_bias_slope<R: Rng + ?Sized>(
    prob: &CcLqrProblem,
    lambdas: &[Vector],
    radii: &[f64],
    directions: usize,
    rng: &mut R,
) -> Result<f64> {
    let (m, n) = (prob.input_dim(), prob.state_dim());
    let mut slope: f64 = 0.0;
    for lambda in lambdas {
        let point = prob.dual_point(lambda)?;
        let exact = point.gradient(prob.limits());
        for &r in radii {
            for _ in 0..directions {
                let dir = Mat::from_fn(m, n, |_, _| rng.random_range(-1.0..1.0));
                let norm = dir.norm();
                if norm == 0.0 {
                    continue;
                }
                let k = point.gain.k() + dir * (r / norm);
                let gain = prob.gain(k)?;
                if !gain.is_stabilizing() {
                    continue;
                }
                let d = dual_gradient_approx(prob, &gain)?;
                slope = slope.max((d - &exact).norm() / r);
            }
        }
    }
    Ok(slope)
}
