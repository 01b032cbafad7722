//! Numerical checks of the duality theory: Slater points, the constructive
//! multiplier program solved by grid search, KKT certificates, the
//! multiplier-set sweep over `z`, and monotonicity, continuity and
//! smoothness probes of `λ ↦ K*_λ` and the dual function.
//!
//! Grid points and probe samples are evaluated independently (in parallel
//! with the `parallel` feature) and reduced in input order.

use rand::Rng;

use crate::error::{Error, Result};
use crate::lqr::{CcLqrProblem, Gain, ARE_TOL};
use crate::matcore::Vector;
use crate::par;
use crate::primal_dual::{dual_gradient_exact, OmegaBox};

/// Relative slack on `J_i <= c_i` when classifying grid points.
pub const FEASIBILITY_SLACK: f64 = 1e-9;
/// Shrink factor of each grid refinement round.
pub const REFINE_SHRINK: f64 = 5.0;

/// Residuals of the saddle-point conditions at a policy-multiplier pair.
#[derive(Debug, Clone, PartialEq)]
pub struct DualityCertificate {
    pub lambda_star: Vector,
    pub k_star: Gain,
    pub tol: f64,
    /// `|J_0(K) − D(λ)| / max(1, D(λ))`.
    pub duality_gap_rel: f64,
    /// `|λ_i (J_i(K) − c_i)|`.
    pub slackness_residuals: Vector,
    /// `c_i − J_i(K)`.
    pub feasibility_margins: Vector,
    /// `‖∇_K L(K, λ)‖_F`.
    pub stationarity_norm: f64,
    pub costs: Vec<f64>,
    pub dual_value: f64,
    pub slater_point: Option<Gain>,
}

impl DualityCertificate {
    pub fn gap_ok(&self) -> bool {
        self.duality_gap_rel <= self.tol
    }

    /// Slackness residuals are judged relative to their limits.
    pub fn slackness_ok(&self, limits: &Vector) -> bool {
        self.slackness_residuals
            .iter()
            .zip(limits.iter())
            .all(|(s, c)| *s <= self.tol * c)
    }

    pub fn feasibility_ok(&self, limits: &Vector) -> bool {
        self.feasibility_margins
            .iter()
            .zip(limits.iter())
            .all(|(m, c)| *m >= -self.tol * c)
    }

    pub fn stationarity_ok(&self) -> bool {
        self.stationarity_norm <= self.tol
    }

    pub fn passes(&self, limits: &Vector) -> bool {
        self.gap_ok() && self.slackness_ok(limits) && self.feasibility_ok(limits) && self.stationarity_ok()
    }
}

/// Output of the multiplier program: the feasible grid point minimising `zᵀλ`.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiplierSolution {
    pub lambda: Vector,
    pub objective: f64,
    /// `J_0..J_N` at `K*_λ`.
    pub costs: Vec<f64>,
    pub gain: Gain,
    /// Grid spacing per coordinate in the last round.
    pub spacing: Vector,
    pub rounds: usize,
}

/// Empirical Lipschitz constant of `∇D` from sampled nearby pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct SmoothnessProbe {
    pub pairs: Vec<(Vector, Vector)>,
    pub ratios: Vec<f64>,
    pub mu_hat: f64,
}

fn feasible(costs: &[f64], limits: &Vector) -> bool {
    costs[1..]
        .iter()
        .zip(limits.iter())
        .all(|(j, c)| *j <= c * (1.0 + FEASIBILITY_SLACK))
}

/// First candidate whose constraint costs are all strictly below their limits.
pub fn slater_check(prob: &CcLqrProblem, candidates: &[Gain]) -> Option<Gain> {
    candidates.iter().find_map(|g| {
        let costs = prob.costs(g).ok()?;
        costs[1..]
            .iter()
            .zip(prob.limits().iter())
            .all(|(j, c)| j < c)
            .then(|| g.clone())
    })
}

/// Riccati gains `K*_λ` on a coarse ray grid: `λ = s·u` for every nonzero
/// `u ∈ {0, 1, 2, 3}^N` and `s` on a log grid from 1e-2 to 1e4, plus `λ = 0`.
pub fn default_slater_candidates(prob: &CcLqrProblem) -> Vec<Gain> {
    let n = prob.num_constraints();
    let mut rays: Vec<Vector> = vec![Vector::zeros(n)];
    for i in 0..n {
        rays = rays
            .into_iter()
            .flat_map(|u| {
                (0..4).map(move |c| {
                    let mut w = u.clone();
                    w[i] = c as f64;
                    w
                })
            })
            .collect();
    }
    let mut lambdas = vec![Vector::zeros(n)];
    for u in rays.iter().filter(|u| u.iter().any(|x| *x > 0.0)) {
        for p in 0..=18 {
            let s = 10f64.powf(-2.0 + p as f64 / 3.0);
            lambdas.push(u * s);
        }
    }
    par::map(&lambdas, |l| prob.solve_are(l, ARE_TOL).ok().map(|s| s.gain))
        .into_iter()
        .flatten()
        .collect()
}

fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 || hi == lo {
        return vec![lo];
    }
    (0..n)
        .map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64)
        .collect()
}

fn grid_points(lower: &Vector, upper: &Vector, res: usize) -> Vec<Vector> {
    let axes: Vec<Vec<f64>> = lower
        .iter()
        .zip(upper.iter())
        .map(|(lo, hi)| linspace(*lo, *hi, res))
        .collect();
    let mut out = vec![Vector::zeros(lower.len())];
    for (i, axis) in axes.iter().enumerate() {
        out = out
            .into_iter()
            .flat_map(|p| {
                axis.iter().map(move |&x| {
                    let mut q = p.clone();
                    q[i] = x;
                    q
                })
            })
            .collect();
    }
    out
}

fn lexicographic_lt(a: &Vector, b: &Vector) -> bool {
    for (x, y) in a.iter().zip(b.iter()) {
        if x < y {
            return true;
        }
        if x > y {
            return false;
        }
    }
    false
}

/// Brute-force solution of `min zᵀλ s.t. J_i(K*_λ) <= c_i` over a grid on
/// `omega`, followed by `refinements` rounds of re-gridding a window shrunk by
/// [`REFINE_SHRINK`] around the incumbent.
pub fn multiplier_program_grid(
    prob: &CcLqrProblem,
    z: &Vector,
    grid_res: usize,
    omega: &OmegaBox,
    refinements: usize,
) -> Result<MultiplierSolution> {
    let n = prob.num_constraints();
    if z.len() != n || omega.dim() != n {
        return Err(Error::Dimension {
            op: "multiplier_program_grid",
            expected: format!("z and box of dimension {n}"),
            got: format!("z {} / box {}", z.len(), omega.dim()),
        });
    }
    if z.iter().any(|x| !(x.is_finite() && *x > 0.0)) {
        return Err(Error::Domain("z must be positive componentwise".into()));
    }
    if grid_res < 2 {
        return Err(Error::Domain("grid_res must be at least 2".into()));
    }

    let mut lower = omega.lower().clone();
    let mut upper = omega.upper().clone();
    let mut best: Option<MultiplierSolution> = None;
    for round in 0..=refinements {
        let points = grid_points(&lower, &upper, grid_res);
        let evaluated = par::try_map(&points, |l| -> Result<Option<(Vec<f64>, Gain)>> {
            let sol = prob.solve_are(l, ARE_TOL)?;
            let costs = prob.costs(&sol.gain)?;
            Ok(feasible(&costs, prob.limits()).then_some((costs, sol.gain)))
        })?;
        let spacing = (&upper - &lower) / (grid_res - 1) as f64;
        for (l, hit) in points.into_iter().zip(evaluated) {
            let Some((costs, gain)) = hit else { continue };
            let objective = z.dot(&l);
            let better = match &best {
                None => true,
                Some(b) => {
                    objective < b.objective || (objective == b.objective && lexicographic_lt(&l, &b.lambda))
                }
            };
            if better {
                best = Some(MultiplierSolution {
                    lambda: l,
                    objective,
                    costs,
                    gain,
                    spacing: spacing.clone(),
                    rounds: round,
                });
            }
        }
        let Some(incumbent) = best.as_mut() else {
            let reason = if slater_check(prob, &default_slater_candidates(prob)).is_some() {
                "a strictly feasible gain exists, so the grid is too coarse or the box too small"
            } else {
                "no strictly feasible gain was found; the limits may be infeasible"
            };
            return Err(Error::Infeasible(reason.into()));
        };
        incumbent.spacing = spacing;
        incumbent.rounds = round;
        let half = (&upper - &lower) / (2.0 * REFINE_SHRINK);
        lower = omega.project(&(&incumbent.lambda - &half));
        upper = omega.project(&(&incumbent.lambda + &half));
    }
    Ok(best.expect("a feasible incumbent exists after the first round"))
}

/// Evaluates stationarity, feasibility, complementary slackness and the
/// duality gap at `(gain, lambda)`.
pub fn kkt_check(prob: &CcLqrProblem, gain: &Gain, lambda: &Vector, tol: f64) -> Result<DualityCertificate> {
    let costs = prob.costs(gain)?;
    let stationarity_norm = prob.policy_gradient(gain, lambda)?.norm();
    let dual_value = prob.dual_value(lambda)?;
    let limits = prob.limits();
    let n = prob.num_constraints();
    let slack = Vector::from_iterator(n, (0..n).map(|i| (lambda[i] * (costs[i + 1] - limits[i])).abs()));
    let margins = Vector::from_iterator(n, (0..n).map(|i| limits[i] - costs[i + 1]));
    Ok(DualityCertificate {
        lambda_star: lambda.clone(),
        k_star: gain.clone(),
        tol,
        duality_gap_rel: (costs[0] - dual_value).abs() / dual_value.max(1.0),
        slackness_residuals: slack,
        feasibility_margins: margins,
        stationarity_norm,
        costs,
        dual_value,
        slater_point: None,
    })
}

/// One row of the multiplier-set sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct ZSweepEntry {
    pub z: Vector,
    pub lambda: Vector,
    /// `J_0(K*_λ)` at the returned multiplier.
    pub primal_value: f64,
    pub certificate: DualityCertificate,
}

/// Runs the multiplier program for every `z`.
pub fn z_sweep(
    prob: &CcLqrProblem,
    zs: &[Vector],
    grid_res: usize,
    omega: &OmegaBox,
    refinements: usize,
    tol: f64,
) -> Result<Vec<ZSweepEntry>> {
    zs.iter()
        .map(|z| {
            let sol = multiplier_program_grid(prob, z, grid_res, omega, refinements)?;
            let certificate = kkt_check(prob, &sol.gain, &sol.lambda, tol)?;
            Ok(ZSweepEntry {
                z: z.clone(),
                lambda: sol.lambda,
                primal_value: sol.costs[0],
                certificate,
            })
        })
        .collect()
}

/// `J_j(K*_λ)` as `λ_j` runs through `values` with the other coordinates held
/// at `base`. `j` is 1-based, matching the constraint index.
pub fn monotonicity_probe(prob: &CcLqrProblem, base: &Vector, j: usize, values: &[f64]) -> Result<Vec<f64>> {
    if j == 0 || j > prob.num_constraints() {
        return Err(Error::Domain(format!("constraint index {j} out of range")));
    }
    if values.windows(2).any(|w| w[0] >= w[1]) || values.iter().any(|v| *v < 0.0) {
        return Err(Error::Precondition("sweep values must be nonnegative and increasing".into()));
    }
    let lambdas: Vec<Vector> = values
        .iter()
        .map(|&v| {
            let mut l = base.clone();
            l[j - 1] = v;
            l
        })
        .collect();
    par::try_map(&lambdas, |l| Ok(prob.dual_point(l)?.costs[j]))
}

/// Largest increase between consecutive entries, `0` for a non-increasing
/// sequence.
pub fn max_increase(seq: &[f64]) -> f64 {
    seq.windows(2).map(|w| w[1] - w[0]).fold(0.0, f64::max)
}

fn random_unit<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vector {
    loop {
        let u = Vector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
        let norm = u.norm();
        if norm > 1e-3 && norm <= 1.0 {
            return u / norm;
        }
    }
}

/// For each radius, `max ‖K*_{λ+δ} − K*_λ‖` over `directions` sampled
/// perturbations with `‖δ‖ = radius` (projected back onto `λ >= 0`).
pub fn continuity_probe<R: Rng + ?Sized>(
    prob: &CcLqrProblem,
    lambda: &Vector,
    radii: &[f64],
    directions: usize,
    rng: &mut R,
) -> Result<Vec<f64>> {
    if radii.windows(2).any(|w| w[0] <= w[1]) || radii.iter().any(|r| *r < 0.0) {
        return Err(Error::Precondition("radii must be nonnegative and decreasing".into()));
    }
    let n = prob.num_constraints();
    let base = prob.solve_are(lambda, ARE_TOL)?.gain;
    let dirs: Vec<Vector> = (0..directions.max(1)).map(|_| random_unit(rng, n)).collect();
    radii
        .iter()
        .map(|&r| {
            if r == 0.0 || n == 0 {
                return Ok(0.0);
            }
            let diffs = par::try_map(&dirs, |u| -> Result<f64> {
                let shifted = (lambda + u * r).map(|x| x.max(0.0));
                let k = prob.solve_are(&shifted, ARE_TOL)?.gain;
                Ok((k.k() - base.k()).norm())
            })?;
            Ok(diffs.into_iter().fold(0.0, f64::max))
        })
        .collect()
}

/// Samples `n_pairs` multipliers uniformly in `omega`, pairs each with a
/// neighbour at distance `radius` (projected into the box), and returns the
/// ratios `‖∇D(λ') − ∇D(λ)‖ / ‖λ' − λ‖` and their maximum.
pub fn smoothness_probe<R: Rng + ?Sized>(
    prob: &CcLqrProblem,
    omega: &OmegaBox,
    n_pairs: usize,
    radius: f64,
    rng: &mut R,
) -> Result<SmoothnessProbe> {
    if !(radius > 0.0) {
        return Err(Error::Precondition("radius must be positive".into()));
    }
    if n_pairs < 10 {
        return Err(Error::Precondition("at least 10 pairs are required".into()));
    }
    let n = omega.dim();
    let mut pairs = Vec::with_capacity(n_pairs);
    while pairs.len() < n_pairs {
        let lambda = Vector::from_fn(n, |i, _| {
            let (lo, hi) = (omega.lower()[i], omega.upper()[i]);
            if hi > lo { rng.random_range(lo..=hi) } else { lo }
        });
        let other = omega.project(&(&lambda + random_unit(rng, n) * radius));
        if (&other - &lambda).norm() > 0.0 {
            pairs.push((lambda, other));
        }
    }
    let ratios = par::try_map(&pairs, |(a, b)| -> Result<f64> {
        let ga = dual_gradient_exact(prob, a)?;
        let gb = dual_gradient_exact(prob, b)?;
        Ok((gb - ga).norm() / (b - a).norm())
    })?;
    if ratios.iter().any(|r| !r.is_finite()) {
        return Err(Error::NonFinite("smoothness_probe"));
    }
    let mu_hat = ratios.iter().copied().fold(0.0, f64::max);
    Ok(SmoothnessProbe { pairs, ratios, mu_hat })
}

/// `D(tλ + (1−t)λ') − [t D(λ) + (1−t) D(λ')]`; nonnegative for a concave `D`.
pub fn concavity_margin(prob: &CcLqrProblem, a: &Vector, b: &Vector, t: f64) -> Result<f64> {
    let mid = a * t + b * (1.0 - t);
    Ok(prob.dual_value(&mid)? - t * prob.dual_value(a)? - (1.0 - t) * prob.dual_value(b)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lqr::Penalty;
    use crate::matcore::Mat;
    use crate::problems;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn v(x: &[f64]) -> Vector {
        Vector::from_row_slice(x)
    }

    #[test]
    fn grid_enumerates_cartesian_product() {
        let pts = grid_points(&v(&[0.0, 10.0]), &v(&[1.0, 12.0]), 3);
        assert_eq!(pts.len(), 9);
        assert_eq!(pts[0], v(&[0.0, 10.0]));
        assert_eq!(pts[8], v(&[1.0, 12.0]));
        assert!(lexicographic_lt(&v(&[0.0, 2.0]), &v(&[1.0, 0.0])));
        assert!(!lexicographic_lt(&v(&[1.0, 0.0]), &v(&[1.0, 0.0])));
    }

    #[test]
    fn huge_limits_make_zero_optimal() {
        let prob = problems::double_integrator().with_limits(v(&[1e6, 1e6])).unwrap();
        let omega = OmegaBox::uniform(2, 100.0).unwrap();
        let sol = multiplier_program_grid(&prob, &v(&[1.0, 1.0]), 5, &omega, 2).unwrap();
        assert_eq!(sol.lambda, v(&[0.0, 0.0]));
        let are = prob.solve_are(&v(&[0.0, 0.0]), ARE_TOL).unwrap();
        assert_eq!(slater_check(&prob, &[are.gain.clone()]), Some(are.gain.clone()));
        let cert = kkt_check(&prob, &are.gain, &v(&[0.0, 0.0]), 1e-6).unwrap();
        assert!(cert.passes(prob.limits()), "{cert:?}");
        assert!(cert.duality_gap_rel < 1e-10);
    }

    #[test]
    fn infeasible_limits_are_reported() {
        // J_2 >= its own unconstrained minimum, so half of it cannot be met
        let base = problems::double_integrator();
        let mut pens = base.penalties().to_vec();
        pens[2].q = problems::position_mismatch_penalty() + Mat::identity(4, 4) * 0.1;
        let prob = CcLqrProblem::with_identity_covariance(base.a().clone(), base.b().clone(), pens, v(&[10.0, 1.0])).unwrap();
        let only_j2 = CcLqrProblem::with_identity_covariance(
            base.a().clone(),
            base.b().clone(),
            vec![Penalty { q: prob.penalties()[2].q.clone() + Mat::identity(4, 4) * 1e-9, r: Mat::identity(2, 2) * 1e-9 }],
            Vector::zeros(0),
        )
        .unwrap();
        let floor = only_j2.dual_value(&Vector::zeros(0)).unwrap();
        let prob = prob.with_limits(v(&[10.0, 0.5 * floor])).unwrap();
        assert!(slater_check(&prob, &default_slater_candidates(&prob)).is_none());
        let omega = OmegaBox::uniform(2, 100.0).unwrap();
        assert!(matches!(
            multiplier_program_grid(&prob, &v(&[1.0, 1.0]), 4, &omega, 0),
            Err(Error::Infeasible(_))
        ));
    }

    #[test]
    fn benchmark_has_a_slater_point() {
        let prob = problems::double_integrator();
        let k = slater_check(&prob, &default_slater_candidates(&prob)).expect("Slater point");
        let costs = prob.costs(&k).unwrap();
        assert!(costs[1] < 10.0 && costs[2] < 6.0);
    }

    #[test]
    fn monotonicity_of_zero_constraint_is_flat() {
        let base = problems::double_integrator();
        let mut pens = base.penalties().to_vec();
        pens.push(Penalty { q: Mat::zeros(4, 4), r: Mat::zeros(2, 2) });
        let prob = CcLqrProblem::with_identity_covariance(base.a().clone(), base.b().clone(), pens, v(&[10.0, 6.0, 1.0])).unwrap();
        let seq = monotonicity_probe(&prob, &v(&[1.0, 1.0, 0.0]), 3, &[0.0, 1.0, 5.0]).unwrap();
        assert!(seq.iter().all(|x| x.abs() < 1e-12));
        assert!(monotonicity_probe(&prob, &v(&[1.0, 1.0, 0.0]), 0, &[0.0]).is_err());
        assert!(monotonicity_probe(&prob, &v(&[1.0, 1.0, 0.0]), 1, &[1.0, 0.5]).is_err());
    }

    #[test]
    fn benchmark_energy_cost_decreases_in_its_multiplier() {
        let prob = problems::double_integrator();
        let values: Vec<f64> = (0..=10).map(|i| 0.5 * i as f64).collect();
        let seq = monotonicity_probe(&prob, &v(&[0.0, 1.0]), 1, &values).unwrap();
        assert!(max_increase(&seq) <= 1e-8, "{seq:?}");
        assert!(seq[0] > seq[10]);
    }

    #[test]
    fn continuity_probe_vanishes() {
        let prob = problems::double_integrator();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let d = continuity_probe(&prob, &v(&[2.0, 3.5]), &[1e-1, 1e-3, 1e-8, 0.0], 8, &mut rng).unwrap();
        assert_eq!(d[3], 0.0);
        assert!(d[0] > d[1] && d[1] > d[2]);
        assert!(d[2] <= 1e-6 * (1.0 + v(&[2.0, 3.5]).norm()));
        assert!(continuity_probe(&prob, &v(&[1.0, 1.0]), &[1e-3, 1e-1], 2, &mut rng).is_err());
    }

    #[test]
    fn smoothness_probe_preconditions() {
        let prob = problems::double_integrator();
        let omega = OmegaBox::uniform(2, 10.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        assert!(smoothness_probe(&prob, &omega, 5, 1e-3, &mut rng).is_err());
        assert!(smoothness_probe(&prob, &omega, 20, 0.0, &mut rng).is_err());
        let probe = smoothness_probe(&prob, &omega, 20, 1e-3, &mut rng).unwrap();
        assert_eq!(probe.ratios.len(), 20);
        assert!(probe.mu_hat.is_finite() && probe.mu_hat > 0.0);
    }

    #[test]
    fn concavity_on_benchmark() {
        let prob = problems::double_integrator();
        let m = concavity_margin(&prob, &v(&[0.0, 5.0]), &v(&[4.0, 0.0]), 0.3).unwrap();
        assert!(m >= -1e-8);
    }
}
