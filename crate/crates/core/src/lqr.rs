//! Problem container and the LQR machinery: Lyapunov and Riccati solvers,
//! constraint costs, the Lagrangian and its exact policy gradient.
//!
//! Gains act as `u = -K x`, so the closed loop is `A - B K`.

use nalgebra::Cholesky;

use crate::error::{Error, Result};
use crate::matcore::{
    asymmetry, ensure_finite, ensure_shape, ensure_square, is_controllable, is_pd, is_psd,
    spectral_radius, symmetrize, trace_product, Mat, Vector, SYMMETRY_TOL,
};

/// Guard below one used by every stability test.
pub const STABILITY_GUARD: f64 = 1e-12;
/// Default Lyapunov tolerance: the doubling loop stops once the squared norm of
/// the remaining closed-loop power falls below it.
pub const LYAP_TOL: f64 = 1e-15;
/// Default relative tolerance on successive Riccati iterates.
pub const ARE_TOL: f64 = 1e-12;

const MAX_DOUBLINGS: usize = 80;
const ARE_MAX_ITER: usize = 1_000_000;
// Fixed-point iterations after which Hewer refinement is tried.
const ARE_FALLBACK_AFTER: usize = 20_000;

/// One `(Q_i, R_i)` pair of the penalty family.
#[derive(Debug, Clone, PartialEq)]
pub struct Penalty {
    pub q: Mat,
    pub r: Mat,
}

/// A cost-constrained LQR instance: minimise `J_0(K)` subject to
/// `J_i(K) <= c_i` for `i = 1..N`.
#[derive(Debug, Clone, PartialEq)]
pub struct CcLqrProblem {
    a: Mat,
    b: Mat,
    penalties: Vec<Penalty>,
    limits: Vector,
    sigma0: Mat,
}

/// A feedback matrix together with the spectral radius of its closed loop.
#[derive(Debug, Clone, PartialEq)]
pub struct Gain {
    k: Mat,
    rho: f64,
}

/// `Q_λ = Q_0 + Σ λ_i Q_i` and `R_λ = R_0 + Σ λ_i R_i`.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightedPenalty {
    pub q: Mat,
    pub r: Mat,
    pub lambda: Vector,
}

/// Stabilizing solution of the Riccati equation and the gain it induces.
#[derive(Debug, Clone, PartialEq)]
pub struct AreSolution {
    pub p: Mat,
    pub gain: Gain,
    pub iterations: usize,
}

fn validation(msg: impl Into<String>) -> Error {
    Error::Validation(msg.into())
}

fn check_symmetric(m: &Mat, name: &str) -> Result<()> {
    if asymmetry(m) > SYMMETRY_TOL {
        return Err(validation(format!("{name} is not symmetric")));
    }
    Ok(())
}

impl CcLqrProblem {
    /// Validates dimensions, the penalty assumptions (`Q_0, R_0 > 0`,
    /// `Q_i, R_i >= 0`), positive limits, a positive definite `sigma0` and
    /// controllability of `(A, B)`.
    pub fn new(
        a: Mat,
        b: Mat,
        penalties: Vec<Penalty>,
        limits: Vector,
        sigma0: Mat,
    ) -> Result<Self> {
        ensure_square(&a, "CcLqrProblem::new (A)")?;
        let n = a.nrows();
        if b.nrows() != n || b.ncols() == 0 {
            return Err(validation(format!(
                "B must be {n}xm with m >= 1, got {}x{}",
                b.nrows(),
                b.ncols()
            )));
        }
        let m = b.ncols();
        for (name, x) in [("A", &a), ("B", &b), ("sigma0", &sigma0)] {
            ensure_finite(x, "CcLqrProblem::new").map_err(|_| validation(format!("{name} has non-finite entries")))?;
        }
        if penalties.is_empty() {
            return Err(validation("the penalty list must contain at least (Q_0, R_0)"));
        }
        if limits.len() + 1 != penalties.len() {
            return Err(validation(format!(
                "{} penalty pairs need {} limits, got {}",
                penalties.len(),
                penalties.len() - 1,
                limits.len()
            )));
        }
        for (i, p) in penalties.iter().enumerate() {
            if p.q.shape() != (n, n) {
                return Err(validation(format!("Q_{i} must be {n}x{n}")));
            }
            if p.r.shape() != (m, m) {
                return Err(validation(format!("R_{i} must be {m}x{m}")));
            }
            if !p.q.iter().chain(p.r.iter()).all(|x| x.is_finite()) {
                return Err(validation(format!("penalty pair {i} has non-finite entries")));
            }
            check_symmetric(&p.q, &format!("Q_{i}"))?;
            check_symmetric(&p.r, &format!("R_{i}"))?;
            if i == 0 {
                if !is_pd(&p.q, 1e-12)? {
                    return Err(validation("Q_0 not positive definite"));
                }
                if !is_pd(&p.r, 1e-12)? {
                    return Err(validation("R_0 not positive definite"));
                }
            } else {
                if !is_psd(&p.q, 1e-10 * (1.0 + p.q.norm()))? {
                    return Err(validation(format!("Q_{i} not positive semidefinite")));
                }
                if !is_psd(&p.r, 1e-10 * (1.0 + p.r.norm()))? {
                    return Err(validation(format!("R_{i} not positive semidefinite")));
                }
            }
        }
        for (i, c) in limits.iter().enumerate() {
            if !(c.is_finite() && *c > 0.0) {
                return Err(validation(format!("limit c_{} must be positive, got {c}", i + 1)));
            }
        }
        if sigma0.shape() != (n, n) {
            return Err(validation(format!("sigma0 must be {n}x{n}")));
        }
        check_symmetric(&sigma0, "sigma0")?;
        if !is_pd(&sigma0, 1e-12)? {
            return Err(validation("sigma0 not positive definite"));
        }
        if !is_controllable(&a, &b) {
            return Err(validation("(A, B) is not controllable"));
        }
        let penalties = penalties
            .into_iter()
            .map(|p| Penalty {
                q: symmetrize(&p.q),
                r: symmetrize(&p.r),
            })
            .collect();
        Ok(Self {
            a,
            b,
            penalties,
            limits,
            sigma0: symmetrize(&sigma0),
        })
    }

    /// Same as [`CcLqrProblem::new`] with `E[x₀x₀ᵀ] = I`.
    pub fn with_identity_covariance(
        a: Mat,
        b: Mat,
        penalties: Vec<Penalty>,
        limits: Vector,
    ) -> Result<Self> {
        let n = a.nrows();
        Self::new(a, b, penalties, limits, Mat::identity(n, n))
    }

    pub fn a(&self) -> &Mat {
        &self.a
    }

    pub fn b(&self) -> &Mat {
        &self.b
    }

    pub fn penalties(&self) -> &[Penalty] {
        &self.penalties
    }

    pub fn limits(&self) -> &Vector {
        &self.limits
    }

    pub fn sigma0(&self) -> &Mat {
        &self.sigma0
    }

    pub fn state_dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.b.ncols()
    }

    /// Number of constraints `N`.
    pub fn num_constraints(&self) -> usize {
        self.limits.len()
    }

    /// Copy of the problem with different limits.
    pub fn with_limits(&self, limits: Vector) -> Result<Self> {
        Self::new(
            self.a.clone(),
            self.b.clone(),
            self.penalties.clone(),
            limits,
            self.sigma0.clone(),
        )
    }

    pub fn closed_loop(&self, k: &Mat) -> Mat {
        &self.a - &self.b * k
    }

    fn check_gain_shape(&self, k: &Mat) -> Result<()> {
        ensure_shape(k, self.input_dim(), self.state_dim(), "gain")
    }

    /// True iff `ρ(A − BK) < 1` (with a `1e-12` guard).
    pub fn is_stabilizing(&self, k: &Mat) -> Result<bool> {
        self.check_gain_shape(k)?;
        Ok(spectral_radius(&self.closed_loop(k))? < 1.0 - STABILITY_GUARD)
    }

    /// Wraps `k` with its closed-loop spectral radius. The gain need not be
    /// stabilizing; cost evaluations reject it later if it is not.
    pub fn gain(&self, k: Mat) -> Result<Gain> {
        self.check_gain_shape(&k)?;
        ensure_finite(&k, "gain")?;
        let rho = spectral_radius(&self.closed_loop(&k))?;
        Ok(Gain { k, rho })
    }

    fn require_stabilizing(&self, gain: &Gain) -> Result<()> {
        self.check_gain_shape(&gain.k)?;
        if gain.is_stabilizing() {
            Ok(())
        } else {
            Err(Error::Unstable { rho: gain.rho })
        }
    }

    fn check_multiplier(&self, lambda: &Vector) -> Result<()> {
        if lambda.len() != self.num_constraints() {
            return Err(Error::Dimension {
                op: "multiplier",
                expected: format!("length {}", self.num_constraints()),
                got: format!("length {}", lambda.len()),
            });
        }
        if let Some((i, v)) = lambda
            .iter()
            .enumerate()
            .find(|(_, v)| !(v.is_finite() && **v >= 0.0))
        {
            return Err(Error::Domain(format!("lambda_{} = {v} must be nonnegative", i + 1)));
        }
        Ok(())
    }

    pub fn weighted_penalty(&self, lambda: &Vector) -> Result<WeightedPenalty> {
        self.check_multiplier(lambda)?;
        let mut q = self.penalties[0].q.clone();
        let mut r = self.penalties[0].r.clone();
        for (l, p) in lambda.iter().zip(&self.penalties[1..]) {
            q += &p.q * *l;
            r += &p.r * *l;
        }
        Ok(WeightedPenalty {
            q,
            r,
            lambda: lambda.clone(),
        })
    }

    /// `J_i(K) = Tr(P_i Σ₀)` with `P_i = Q_i + KᵀR_iK + (A−BK)ᵀP_i(A−BK)`.
    pub fn cost(&self, gain: &Gain, i: usize) -> Result<f64> {
        self.require_stabilizing(gain)?;
        let pen = self.penalties.get(i).ok_or_else(|| {
            Error::Domain(format!(
                "cost index {i} out of range 0..={}",
                self.num_constraints()
            ))
        })?;
        let k = &gain.k;
        let stage = &pen.q + k.transpose() * &pen.r * k;
        let p = lyapunov_doubling(&self.closed_loop(k), &stage, LYAP_TOL)?;
        Ok(trace_product(&p, &self.sigma0))
    }

    /// All costs `J_0..J_N` from one state-correlation solve:
    /// `J_i = Tr((Q_i + KᵀR_iK) Σ_K)`.
    pub fn costs(&self, gain: &Gain) -> Result<Vec<f64>> {
        self.require_stabilizing(gain)?;
        let k = &gain.k;
        let sigma = lyapunov_doubling(&self.closed_loop(k).transpose(), &self.sigma0, LYAP_TOL)?;
        Ok(self.costs_from_correlation(k, &sigma))
    }

    fn costs_from_correlation(&self, k: &Mat, sigma: &Mat) -> Vec<f64> {
        self.penalties
            .iter()
            .map(|p| trace_product(&(&p.q + k.transpose() * &p.r * k), sigma))
            .collect()
    }

    /// `L(K, λ) = J_0(K) + Σ λ_i (J_i(K) − c_i)`, evaluated cost by cost.
    pub fn lagrangian(&self, gain: &Gain, lambda: &Vector) -> Result<f64> {
        self.check_multiplier(lambda)?;
        self.require_stabilizing(gain)?;
        let mut value = self.cost(gain, 0)?;
        for (i, (l, c)) in lambda.iter().zip(self.limits.iter()).enumerate() {
            value += l * (self.cost(gain, i + 1)? - c);
        }
        Ok(value)
    }

    /// The same Lagrangian as one weighted LQR cost minus `λᵀc`.
    pub fn lagrangian_weighted(&self, gain: &Gain, lambda: &Vector) -> Result<f64> {
        let w = self.weighted_penalty(lambda)?;
        self.require_stabilizing(gain)?;
        let k = &gain.k;
        let stage = &w.q + k.transpose() * &w.r * k;
        let p = lyapunov_doubling(&self.closed_loop(k), &stage, LYAP_TOL)?;
        Ok(trace_product(&p, &self.sigma0) - lambda.dot(&self.limits))
    }

    /// Exact gradient `∇_K L = 2[(R_λ + BᵀP_λB)K − BᵀP_λA] Σ_K`.
    pub fn policy_gradient(&self, gain: &Gain, lambda: &Vector) -> Result<Mat> {
        let w = self.weighted_penalty(lambda)?;
        self.require_stabilizing(gain)?;
        Ok(self.gradient_with(&w, &gain.k)?.0)
    }

    // Gradient and the Lagrangian value (without the −λᵀc offset) at `k`.
    pub(crate) fn gradient_with(&self, w: &WeightedPenalty, k: &Mat) -> Result<(Mat, f64)> {
        let acl = self.closed_loop(k);
        let stage = &w.q + k.transpose() * &w.r * k;
        let p = lyapunov_doubling(&acl, &stage, LYAP_TOL)?;
        let sigma = lyapunov_doubling(&acl.transpose(), &self.sigma0, LYAP_TOL)?;
        let btp = self.b.transpose() * &p;
        let e = (&w.r + &btp * &self.b) * k - &btp * &self.a;
        let grad = 2.0 * e * &sigma;
        ensure_finite(&grad, "policy_gradient")?;
        Ok((grad, trace_product(&p, &self.sigma0)))
    }

    /// Solves the Riccati equation for `(Q_λ, R_λ)` by fixed-point iteration
    /// and returns `P*` with the Lagrangian minimiser `K*_λ`.
    pub fn solve_are(&self, lambda: &Vector, tol: f64) -> Result<AreSolution> {
        let w = self.weighted_penalty(lambda)?;
        let (p, iterations) = riccati_fixed_point(&self.a, &self.b, &w.q, &w.r, tol)?;
        let k = riccati_gain(&self.a, &self.b, &w.r, &p)?;
        let gain = self.gain(k)?;
        if !gain.is_stabilizing() {
            return Err(Error::Unstable { rho: gain.rho });
        }
        Ok(AreSolution { p, gain, iterations })
    }

    /// `D(λ) = min_K L(K, λ) = Tr(P*_λ Σ₀) − λᵀc`.
    pub fn dual_value(&self, lambda: &Vector) -> Result<f64> {
        let sol = self.solve_are(lambda, ARE_TOL)?;
        Ok(trace_product(&sol.p, &self.sigma0) - lambda.dot(&self.limits))
    }

    /// Dual value together with the costs `J_0..J_N` at `K*_λ`.
    pub fn dual_point(&self, lambda: &Vector) -> Result<DualPoint> {
        let sol = self.solve_are(lambda, ARE_TOL)?;
        let value = trace_product(&sol.p, &self.sigma0) - lambda.dot(&self.limits);
        let costs = self.costs(&sol.gain)?;
        Ok(DualPoint {
            value,
            costs,
            gain: sol.gain,
        })
    }
}

/// Dual function data at one multiplier.
#[derive(Debug, Clone, PartialEq)]
pub struct DualPoint {
    pub value: f64,
    /// `J_0..J_N` evaluated at `K*_λ`.
    pub costs: Vec<f64>,
    pub gain: Gain,
}

impl DualPoint {
    /// `∇D(λ) = [J_i(K*_λ) − c_i]`.
    pub fn gradient(&self, limits: &Vector) -> Vector {
        Vector::from_iterator(
            limits.len(),
            self.costs[1..].iter().zip(limits.iter()).map(|(j, c)| j - c),
        )
    }
}

impl Gain {
    pub fn k(&self) -> &Mat {
        &self.k
    }

    /// Spectral radius of `A − BK` for the problem this gain was built against.
    pub fn rho(&self) -> f64 {
        self.rho
    }

    pub fn is_stabilizing(&self) -> bool {
        self.rho < 1.0 - STABILITY_GUARD
    }

    pub fn into_inner(self) -> Mat {
        self.k
    }
}

/// Solves `P = M + A_clᵀ P A_cl` for a Schur-stable `A_cl`.
pub fn solve_dlyap(acl: &Mat, m: &Mat, tol: f64) -> Result<Mat> {
    ensure_square(acl, "solve_dlyap")?;
    ensure_shape(m, acl.nrows(), acl.nrows(), "solve_dlyap")?;
    ensure_finite(m, "solve_dlyap")?;
    let rho = spectral_radius(acl)?;
    if rho >= 1.0 - STABILITY_GUARD {
        return Err(Error::Unstable { rho });
    }
    lyapunov_doubling(acl, m, tol)
}

/// Solves `Σ = Σ₀ + A_cl Σ A_clᵀ` for a Schur-stable `A_cl`.
pub fn solve_dsigma(acl: &Mat, sigma0: &Mat, tol: f64) -> Result<Mat> {
    ensure_square(acl, "solve_dsigma")?;
    solve_dlyap(&acl.transpose(), sigma0, tol)
}

// Doubling: P ← P + AᵀPA, A ← A². After k rounds P holds the first 2ᵏ series
// terms and the exact tail is A_kᵀ P_∞ A_k, so the loop stops once ‖A_k‖² ≤ tol.
pub(crate) fn lyapunov_doubling(acl: &Mat, m: &Mat, tol: f64) -> Result<Mat> {
    let mut p = symmetrize(m);
    let mut a = acl.clone();
    for _ in 0..MAX_DOUBLINGS {
        let inc = a.transpose() * &p * &a;
        p += inc;
        p = symmetrize(&p);
        a = &a * &a;
        ensure_finite(&p, "solve_dlyap")?;
        let tail = a.norm_squared();
        if !tail.is_finite() {
            return Err(Error::NonFinite("solve_dlyap"));
        }
        if tail <= tol {
            return Ok(p);
        }
    }
    Err(Error::Convergence {
        what: "Lyapunov doubling",
        iters: MAX_DOUBLINGS,
        residual: a.norm_squared(),
    })
}

/// `K = (R + BᵀPB)⁻¹ BᵀPA`.
pub fn riccati_gain(a: &Mat, b: &Mat, r: &Mat, p: &Mat) -> Result<Mat> {
    let btp = b.transpose() * p;
    let s = symmetrize(&(r + &btp * b));
    let chol = Cholesky::new(s).ok_or_else(|| Error::Domain("R + BᵀPB is not positive definite".into()))?;
    let k = chol.solve(&(&btp * a));
    ensure_finite(&k, "riccati_gain")?;
    Ok(k)
}

/// Right-hand side of the Riccati equation,
/// `AᵀPA + Q − AᵀPB (R + BᵀPB)⁻¹ BᵀPA`.
pub fn riccati_map(a: &Mat, b: &Mat, q: &Mat, r: &Mat, p: &Mat) -> Result<Mat> {
    let k = riccati_gain(a, b, r, p)?;
    let atp = a.transpose() * p;
    let next = &atp * a + q - &atp * b * k;
    Ok(symmetrize(&next))
}

/// `‖P − riccati_map(P)‖_F`.
pub fn riccati_residual(a: &Mat, b: &Mat, q: &Mat, r: &Mat, p: &Mat) -> Result<f64> {
    Ok((p - riccati_map(a, b, q, r, p)?).norm())
}

fn riccati_fixed_point(a: &Mat, b: &Mat, q: &Mat, r: &Mat, tol: f64) -> Result<(Mat, usize)> {
    let mut p = q.clone();
    for it in 1..=ARE_MAX_ITER {
        let next = riccati_map(a, b, q, r, &p)?;
        ensure_finite(&next, "solve_are")?;
        let step = (&next - &p).norm();
        p = next;
        if step <= tol * (1.0 + p.norm()) {
            return Ok((p, it));
        }
        if it == ARE_FALLBACK_AFTER {
            if let Some(refined) = hewer_refine(a, b, q, r, &p, tol) {
                return Ok((refined, it));
            }
        }
    }
    let residual = riccati_residual(a, b, q, r, &p)?;
    Err(Error::Convergence {
        what: "Riccati fixed-point iteration",
        iters: ARE_MAX_ITER,
        residual,
    })
}

// Policy-iteration polish for slowly contracting instances; `None` when the
// current iterate's gain is not yet stabilizing or the refinement stalls.
fn hewer_refine(a: &Mat, b: &Mat, q: &Mat, r: &Mat, p0: &Mat, tol: f64) -> Option<Mat> {
    let mut p = p0.clone();
    for _ in 0..50 {
        let k = riccati_gain(a, b, r, &p).ok()?;
        let acl = a - b * &k;
        if spectral_radius(&acl).ok()? >= 1.0 - STABILITY_GUARD {
            return None;
        }
        let next = lyapunov_doubling(&acl, &(q + k.transpose() * r * &k), LYAP_TOL).ok()?;
        let step = (&next - &p).norm();
        p = next;
        if step <= tol * (1.0 + p.norm()) {
            return Some(p);
        }
    }
    None
}
