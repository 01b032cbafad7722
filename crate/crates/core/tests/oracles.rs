//! Independent reference computations for the Lyapunov, Riccati and gradient
//! kernels. The oracles here deliberately avoid the library's own solvers.

use cclqr_core::lqr::{solve_dlyap, solve_dsigma, ARE_TOL, LYAP_TOL};
use cclqr_core::matcore::spectral_radius;
use cclqr_core::problems::{self, random_instance, random_pd, random_psd, random_stable};
use cclqr_core::{par, CcLqrProblem, Gain, Mat, Vector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// `Σ_t (Aᵀ)^t M A^t`, summed until the terms stop mattering.
fn lyapunov_series(acl: &Mat, m: &Mat) -> Mat {
    let mut sum = m.clone();
    let mut term = m.clone();
    for _ in 0..200_000 {
        term = acl.transpose() * &term * acl;
        sum += &term;
        if term.norm() <= 1e-18 * sum.norm() {
            break;
        }
    }
    sum
}

fn riccati_residual_oracle(prob: &CcLqrProblem, lambda: &Vector, p: &Mat) -> f64 {
    let (a, b) = (prob.a(), prob.b());
    let mut q = prob.penalties()[0].q.clone();
    let mut r = prob.penalties()[0].r.clone();
    for (i, pen) in prob.penalties()[1..].iter().enumerate() {
        q += &pen.q * lambda[i];
        r += &pen.r * lambda[i];
    }
    let bpa = b.transpose() * p * a;
    let inv = (r + b.transpose() * p * b).try_inverse().unwrap();
    let rhs = q + a.transpose() * p * a - bpa.transpose() * inv * bpa;
    (p - rhs).norm()
}

fn random_lambda<R: Rng>(rng: &mut R, n: usize, hi: f64) -> Vector {
    Vector::from_fn(n, |_, _| rng.random_range(0.0..hi))
}

/// A stabilizing gain at moderate distance from the Riccati gain.
fn perturbed_gain<R: Rng>(rng: &mut R, prob: &CcLqrProblem, lambda: &Vector) -> Gain {
    let base = prob.solve_are(lambda, ARE_TOL).unwrap().gain;
    loop {
        let dir = Mat::from_fn(prob.input_dim(), prob.state_dim(), |_, _| rng.random_range(-1.0..1.0));
        let scale = rng.random_range(0.02..0.3) * (1.0 + base.k().norm()) / dir.norm();
        let g = prob.gain(base.k() + dir * scale).unwrap();
        if g.rho() < 0.98 {
            return g;
        }
    }
}

#[test]
fn dlyap_matches_truncated_series() {
    let mut rng = ChaCha8Rng::seed_from_u64(100);
    let mut worst: f64 = 0.0;
    for case in 0..100 {
        let n = 1 + case % 6;
        let rho = rng.random_range(0.05..0.97);
        let acl = random_stable(&mut rng, n, rho);
        let m = random_psd(&mut rng, n, 1 + case % n);
        let p = solve_dlyap(&acl, &m, LYAP_TOL).unwrap();
        let oracle = lyapunov_series(&acl, &m);
        let rel = (&p - &oracle).norm() / oracle.norm();
        worst = worst.max(rel);
    }
    assert!(worst <= 1e-8, "worst relative error {worst:e}");
}

#[test]
fn cost_trace_duality() {
    // Tr(P_M Σ₀) = Tr(M Σ_K) for every stabilizing closed loop.
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    for _ in 0..50 {
        let n = rng.random_range(1..6);
        let rho = rng.random_range(0.1..0.95);
        let acl = random_stable(&mut rng, n, rho);
        let m = random_psd(&mut rng, n, n);
        let sigma0 = random_pd(&mut rng, n, 0.1);
        let p = solve_dlyap(&acl, &m, LYAP_TOL).unwrap();
        let s = solve_dsigma(&acl, &sigma0, LYAP_TOL).unwrap();
        let lhs = (&p * &sigma0).trace();
        let rhs = (&m * &s).trace();
        assert!((lhs - rhs).abs() <= 1e-9 * lhs.abs().max(1.0), "{lhs} vs {rhs}");
    }
}

#[test]
fn are_residual_and_stability_on_random_instances() {
    let mut rng = ChaCha8Rng::seed_from_u64(102);
    for case in 0..100 {
        let n = 1 + case % 5;
        let m = 1 + case % n.min(3);
        let nc = case % 4;
        let prob = random_instance(&mut rng, n, m, nc);
        let lambda = random_lambda(&mut rng, nc, 10.0);
        let sol = prob.solve_are(&lambda, ARE_TOL).unwrap();
        let residual = riccati_residual_oracle(&prob, &lambda, &sol.p);
        assert!(
            residual <= 1e-9 * (1.0 + sol.p.norm()),
            "case {case}: residual {residual:e}, |P| {}",
            sol.p.norm()
        );
        let acl = prob.a() - prob.b() * sol.gain.k();
        assert!(spectral_radius(&acl).unwrap() < 1.0, "case {case}");
    }
}

#[test]
fn policy_gradient_matches_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(103);
    let h = 1e-6;
    for case in 0..20 {
        let n = 2 + case % 3;
        let nc = case % 3;
        let prob = random_instance(&mut rng, n, 1 + case % 2, nc);
        let lambda = random_lambda(&mut rng, nc, 5.0);
        let gain = perturbed_gain(&mut rng, &prob, &lambda);
        let g = prob.policy_gradient(&gain, &lambda).unwrap();
        let mut fd = Mat::zeros(g.nrows(), g.ncols());
        for idx in 0..g.len() {
            let mut plus = gain.k().clone();
            plus[idx] += h;
            let mut minus = gain.k().clone();
            minus[idx] -= h;
            let lp = prob.lagrangian(&prob.gain(plus).unwrap(), &lambda).unwrap();
            let lm = prob.lagrangian(&prob.gain(minus).unwrap(), &lambda).unwrap();
            fd[idx] = (lp - lm) / (2.0 * h);
        }
        let rel = (&g - &fd).norm() / fd.norm();
        assert!(rel <= 1e-5, "case {case}: relative error {rel:e}");
    }
}

#[test]
fn dual_gradient_matches_central_differences() {
    let prob = problems::double_integrator();
    let grid = [0.5, 2.0, 4.0, 7.0, 10.0];
    for &l1 in &grid {
        for &l2 in &grid {
            let lambda = Vector::from_vec(vec![l1, l2]);
            let g = cclqr_core::primal_dual::dual_gradient_exact(&prob, &lambda).unwrap();
            let mut fd = Vector::zeros(2);
            for j in 0..2 {
                let h = 1e-5 * (1.0 + lambda[j].abs());
                let (mut plus, mut minus) = (lambda.clone(), lambda.clone());
                plus[j] += h;
                minus[j] -= h;
                fd[j] = (prob.dual_value(&plus).unwrap() - prob.dual_value(&minus).unwrap()) / (2.0 * h);
            }
            let rel = (&g - &fd).norm() / fd.norm();
            assert!(rel <= 1e-4, "lambda ({l1}, {l2}): relative error {rel:e}");
        }
    }
}

#[test]
fn monte_carlo_rollouts_match_cost() {
    let prob = problems::double_integrator();
    let gain = prob.gain(problems::double_integrator_initial_gain()).unwrap();
    let acl = prob.closed_loop(gain.k());
    let stage = &prob.penalties()[0].q + gain.k().transpose() * &prob.penalties()[0].r * gain.k();
    let horizon = (30.0_f64.ln() / -gain.rho().ln()).ceil() as usize * 2;

    // 64 independent streams of 1600 rollouts each.
    let streams: Vec<u64> = (0..64).collect();
    let sums = par::map(&streams, |&s| {
        let mut rng = ChaCha8Rng::seed_from_u64(104);
        rng.set_stream(s);
        let mut total = 0.0;
        for _ in 0..1600 {
            let mut x = Vector::from_fn(4, |_, _| StandardNormal.sample(&mut rng));
            for _ in 0..horizon {
                total += x.dot(&(&stage * &x));
                x = &acl * x;
            }
        }
        total
    });
    let estimate = sums.iter().sum::<f64>() / (64.0 * 1600.0);
    let exact = prob.cost(&gain, 0).unwrap();
    assert!((estimate - exact).abs() <= 1e-2 * exact, "{estimate} vs {exact}");
}

#[test]
fn riccati_gain_minimises_the_lagrangian() {
    let mut rng = ChaCha8Rng::seed_from_u64(105);
    for case in 0..10 {
        let nc = case % 3;
        let prob = random_instance(&mut rng, 3, 2, nc);
        let lambda = random_lambda(&mut rng, nc, 5.0);
        let best = prob.solve_are(&lambda, ARE_TOL).unwrap();
        let l_star = prob.lagrangian(&best.gain, &lambda).unwrap();
        for _ in 0..100 {
            let other = perturbed_gain(&mut rng, &prob, &lambda);
            let l = prob.lagrangian(&other, &lambda).unwrap();
            assert!(l_star <= l + 1e-10 * l.abs(), "case {case}: {l_star} > {l}");
        }
    }
}

#[test]
fn weak_duality_against_feasible_gains() {
    // D(λ) <= L(K, λ) <= J_0(K) for every feasible K and every λ >= 0.
    let prob = problems::double_integrator();
    let mut rng = ChaCha8Rng::seed_from_u64(106);
    let mut feasible = Vec::new();
    while feasible.len() < 20 {
        let lambda = random_lambda(&mut rng, 2, 20.0);
        let gain = perturbed_gain(&mut rng, &prob, &lambda);
        let costs = prob.costs(&gain).unwrap();
        if costs[1] <= 10.0 && costs[2] <= 6.0 {
            feasible.push(gain);
        }
    }
    for _ in 0..50 {
        let lambda = random_lambda(&mut rng, 2, 30.0);
        let d = prob.dual_value(&lambda).unwrap();
        for gain in &feasible {
            let l = prob.lagrangian(gain, &lambda).unwrap();
            assert!(d <= l + 1e-9 * l.abs(), "D {d} exceeds L {l}");
            assert!(l <= prob.cost(gain, 0).unwrap() + 1e-9);
        }
    }
}
