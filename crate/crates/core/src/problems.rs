//! Built-in instances: the planar double-integrator benchmark and seeded
//! random generators used by the probes and tests.

use rand::Rng;

use crate::lqr::{CcLqrProblem, Penalty};
use crate::matcore::{is_controllable, spectral_radius, Mat, Vector};

/// Energy limit `c_1` of the double-integrator benchmark.
pub const DI_ENERGY_LIMIT: f64 = 10.0;
/// Position-mismatch limit `c_2` of the double-integrator benchmark.
pub const DI_MISMATCH_LIMIT: f64 = 6.0;

pub fn double_integrator_a() -> Mat {
    Mat::from_row_slice(
        4,
        4,
        &[
            1.0, 0.5, 0.0, 0.0, //
            0.0, 1.0, 0.0, 0.0, //
            0.0, 0.0, 1.0, 0.5, //
            0.0, 0.0, 0.0, 1.0,
        ],
    )
}

pub fn double_integrator_b() -> Mat {
    Mat::from_row_slice(
        4,
        2,
        &[
            0.125, 0.0, //
            0.5, 0.0, //
            0.0, 0.125, //
            0.0, 0.5,
        ],
    )
}

/// Penalises `(x₁ − x₃)²`, keeping the two positions close.
pub fn position_mismatch_penalty() -> Mat {
    Mat::from_row_slice(
        4,
        4,
        &[
            1.0, 0.0, -1.0, 0.0, //
            0.0, 0.0, 0.0, 0.0, //
            -1.0, 0.0, 1.0, 0.0, //
            0.0, 0.0, 0.0, 0.0,
        ],
    )
}

/// Planar UAV double integrator with an energy budget (`R_1 = 2I`, `c_1 = 10`)
/// and a position-mismatch budget (`Q_2`, `c_2 = 6`).
pub fn double_integrator() -> CcLqrProblem {
    let penalties = vec![
        Penalty {
            q: Mat::identity(4, 4),
            r: Mat::identity(2, 2),
        },
        Penalty {
            q: Mat::zeros(4, 4),
            r: Mat::identity(2, 2) * 2.0,
        },
        Penalty {
            q: position_mismatch_penalty(),
            r: Mat::zeros(2, 2),
        },
    ];
    CcLqrProblem::with_identity_covariance(
        double_integrator_a(),
        double_integrator_b(),
        penalties,
        Vector::from_vec(vec![DI_ENERGY_LIMIT, DI_MISMATCH_LIMIT]),
    )
    .expect("double-integrator benchmark is a valid instance")
}

/// Initial stabilizing gain of the benchmark run.
pub fn double_integrator_initial_gain() -> Mat {
    Mat::from_row_slice(
        2,
        4,
        &[
            0.5, 0.5, 0.0, 0.0, //
            0.0, 0.0, 0.5, 0.5,
        ],
    )
}

fn uniform_mat<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize, scale: f64) -> Mat {
    Mat::from_fn(rows, cols, |_, _| rng.random_range(-scale..scale))
}

/// Random symmetric PSD matrix `GᵀG` with `G` of the given rank.
pub fn random_psd<R: Rng + ?Sized>(rng: &mut R, n: usize, rank: usize) -> Mat {
    let g = uniform_mat(rng, rank.max(1), n, 1.0);
    g.transpose() * g
}

/// Random symmetric positive definite matrix with eigenvalues bounded below
/// by `floor`.
pub fn random_pd<R: Rng + ?Sized>(rng: &mut R, n: usize, floor: f64) -> Mat {
    random_psd(rng, n, n) + Mat::identity(n, n) * floor
}

/// Random matrix rescaled so its spectral radius equals `rho`.
pub fn random_stable<R: Rng + ?Sized>(rng: &mut R, n: usize, rho: f64) -> Mat {
    loop {
        let m = uniform_mat(rng, n, n, 1.0);
        let r = spectral_radius(&m).unwrap_or(0.0);
        if r > 1e-3 {
            return m * (rho / r);
        }
    }
}

/// Random controllable instance with `n` states, `m` inputs and
/// `n_constraints` PSD constraint penalties (some deliberately rank
/// deficient). Limits are all one; callers override them as needed.
pub fn random_instance<R: Rng + ?Sized>(
    rng: &mut R,
    n: usize,
    m: usize,
    n_constraints: usize,
) -> CcLqrProblem {
    loop {
        let a = uniform_mat(rng, n, n, 1.0);
        let b = uniform_mat(rng, n, m, 1.0);
        if !is_controllable(&a, &b) {
            continue;
        }
        let mut penalties = vec![Penalty {
            q: random_pd(rng, n, 0.1),
            r: random_pd(rng, m, 0.1),
        }];
        for _ in 0..n_constraints {
            let q_rank = rng.random_range(0..=n);
            let r_rank = rng.random_range(0..=m);
            let q = if q_rank == 0 { Mat::zeros(n, n) } else { random_psd(rng, n, q_rank) };
            let r = if r_rank == 0 { Mat::zeros(m, m) } else { random_psd(rng, m, r_rank) };
            penalties.push(Penalty { q, r });
        }
        if let Ok(p) = CcLqrProblem::with_identity_covariance(
            a,
            b,
            penalties,
            Vector::from_element(n_constraints, 1.0),
        ) {
            return p;
        }
    }
}
