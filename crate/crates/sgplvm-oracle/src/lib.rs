//! Dense brute-force reference implementations used by tests.
//!
//! Everything here materializes the full `n×m` and `m×m` matrices and
//! evaluates the bound, psi statistics, KL divergences, and predictive
//! densities by direct dense linear algebra. None of the structured
//! (Kronecker-factored) code paths are used; the only shared module is the
//! kernel evaluation itself, so agreement between this crate and the
//! structured implementation is evidence rather than tautology.

use nalgebra::{DMatrix, DVector};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use sgplvm::kernels::{kernel_matrix, KernelSpec};

const LOG_2PI: f64 = 1.8378770664093453;

/// Fully materialized model state.
pub struct DenseModelState {
    pub kuu: DMatrix<f64>,
    pub psi0: f64,
    pub psi1: DMatrix<f64>,
    pub psi2: DMatrix<f64>,
}

/// Dense Kronecker product (row index of the first factor is slowest).
pub fn kron(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let (ra, ca) = a.shape();
    let (rb, cb) = b.shape();
    let mut out = DMatrix::zeros(ra * rb, ca * cb);
    for i in 0..ra {
        for j in 0..ca {
            for p in 0..rb {
                for q in 0..cb {
                    out[(i * rb + p, j * cb + q)] = a[(i, j)] * b[(p, q)];
                }
            }
        }
    }
    out
}

pub fn kron_all(factors: &[DMatrix<f64>]) -> DMatrix<f64> {
    let mut out = DMatrix::from_element(1, 1, 1.0);
    for f in factors {
        out = kron(&out, f);
    }
    out
}

fn chol(a: &DMatrix<f64>) -> DMatrix<f64> {
    nalgebra::Cholesky::new(a.clone())
        .or_else(|| {
            let n = a.nrows();
            let scale = a.diagonal().iter().map(|d| d.abs()).sum::<f64>() / n as f64;
            nalgebra::Cholesky::new(a + DMatrix::identity(n, n) * (1e-10 * scale.max(1e-12)))
        })
        .expect("dense Cholesky failed")
        .l()
}

fn log_det_from_chol(l: &DMatrix<f64>) -> f64 {
    l.diagonal().iter().map(|d| d.ln()).sum::<f64>() * 2.0
}

fn solve_spd(a: &DMatrix<f64>, rhs: &DMatrix<f64>) -> DMatrix<f64> {
    let l = chol(a);
    let mut out = rhs.clone();
    l.solve_lower_triangular_mut(&mut out);
    l.transpose().solve_upper_triangular_mut(&mut out);
    out
}

/// Literal dense evaluation of the collapsed bound.
pub fn dense_collapsed_bound(state: &DenseModelState, y: &DMatrix<f64>, beta: f64, kl: f64) -> f64 {
    let n = y.nrows() as f64;
    let d_y = y.ncols() as f64;
    let m = state.kuu.nrows() as f64;
    let l = chol(&state.kuu);
    // C = L⁻¹ Ψ₂ L⁻ᵀ
    let mut c = state.psi2.clone();
    l.solve_lower_triangular_mut(&mut c);
    let mut ct = c.transpose();
    l.solve_lower_triangular_mut(&mut ct);
    let c = ct.transpose();
    let a = DMatrix::identity(state.kuu.nrows(), state.kuu.nrows()) / beta + &c;
    let log_det_a = log_det_from_chol(&chol(&a));
    // K_ψ = β⁻¹K_uu + Ψ₂
    let kpsi = &state.kuu / beta + &state.psi2;
    let p1ty = state.psi1.transpose() * y;
    let fit = (p1ty.transpose() * solve_spd(&kpsi, &p1ty)).trace();
    let tr_yy: f64 = y.iter().map(|v| v * v).sum();
    0.5 * d_y * ((n - m) * beta.ln() - n * LOG_2PI - log_det_a)
        - 0.5 * beta * (tr_yy - fit)
        - 0.5 * beta * d_y * (state.psi0 - c.trace())
        - kl
}

/// KL between the inducing-output posterior and its GP prior,
/// `Σ_j KL(N(ū_j, Σ_u) ‖ N(0, K_uu))`.
pub fn kl_inducing(kuu: &DMatrix<f64>, u_bar: &DMatrix<f64>, sigma_u: &DMatrix<f64>) -> f64 {
    let m = kuu.nrows() as f64;
    let d_y = u_bar.ncols() as f64;
    let l = chol(kuu);
    let log_det_kuu = log_det_from_chol(&l);
    let log_det_sigma = log_det_from_chol(&chol(sigma_u));
    let kinv_sigma = solve_spd(kuu, sigma_u);
    let quad = (u_bar.transpose() * solve_spd(kuu, u_bar)).trace();
    0.5 * (d_y * (kinv_sigma.trace() - m + log_det_kuu - log_det_sigma) + quad)
}

/// Dense uncollapsed bound at an arbitrary q(U) = Π_j N(ū_j, Σ_u).
///
/// Includes the conditional-GP trace correction `−(βd_y/2)(ψ₀ − tr(K_uu⁻¹Ψ₂))`;
/// without it the bound does not reduce to the collapsed form at the optimal
/// q(U).
pub fn dense_uncollapsed_bound(
    state: &DenseModelState,
    y: &DMatrix<f64>,
    u_bar: &DMatrix<f64>,
    sigma_u: &DMatrix<f64>,
    beta: f64,
    kl_x: f64,
) -> f64 {
    let n = y.nrows() as f64;
    let d_y = y.ncols() as f64;
    let tr_yy: f64 = y.iter().map(|v| v * v).sum();
    let kinv_u = solve_spd(&state.kuu, u_bar);
    let cross = (kinv_u.transpose() * state.psi1.transpose() * y).trace();
    let kinv_psi2_kinv = solve_spd(&state.kuu, &solve_spd(&state.kuu, &state.psi2).transpose());
    let second_moment = u_bar * u_bar.transpose() + sigma_u * d_y;
    let quad = (&kinv_psi2_kinv * second_moment).trace();
    let trace_corr = state.psi0 - solve_spd(&state.kuu, &state.psi2).trace();
    -0.5 * n * d_y * (LOG_2PI - beta.ln()) - 0.5 * beta * tr_yy + beta * cross
        - 0.5 * beta * quad
        - 0.5 * beta * d_y * trace_corr
        - kl_inducing(&state.kuu, u_bar, sigma_u)
        - kl_x
}

/// Test-data terms of the uncollapsed bound at a fixed q(U): the same
/// expression with the inducing KL omitted (it belongs to the training part).
#[allow(clippy::too_many_arguments)]
pub fn dense_test_bound(
    kuu: &DMatrix<f64>,
    psi0_star: f64,
    psi1_star: &DMatrix<f64>,
    psi2_star: &DMatrix<f64>,
    y_star: &DMatrix<f64>,
    u_bar: &DMatrix<f64>,
    sigma_u: &DMatrix<f64>,
    beta: f64,
    kl_x_star: f64,
) -> f64 {
    if y_star.nrows() == 0 {
        return -kl_x_star;
    }
    let n = y_star.nrows() as f64;
    let d_y = y_star.ncols() as f64;
    let tr_yy: f64 = y_star.iter().map(|v| v * v).sum();
    let kinv_u = solve_spd(kuu, u_bar);
    let cross = (kinv_u.transpose() * psi1_star.transpose() * y_star).trace();
    let kinv_psi2_kinv = solve_spd(kuu, &solve_spd(kuu, psi2_star).transpose());
    let second_moment = u_bar * u_bar.transpose() + sigma_u * d_y;
    let quad = (&kinv_psi2_kinv * second_moment).trace();
    let trace_corr = psi0_star - solve_spd(kuu, psi2_star).trace();
    -0.5 * n * d_y * (LOG_2PI - beta.ln()) - 0.5 * beta * tr_yy + beta * cross
        - 0.5 * beta * quad
        - 0.5 * beta * d_y * trace_corr
        - kl_x_star
}

/// Optimal q(U) computed densely: `Ū* = K_uu K_ψ⁻¹ Ψ₁ᵀ Y`,
/// `Σ_u* = β⁻¹ K_uu K_ψ⁻¹ K_uu`.
pub fn dense_optimal_qu(
    state: &DenseModelState,
    y: &DMatrix<f64>,
    beta: f64,
) -> (DMatrix<f64>, DMatrix<f64>) {
    let kpsi = &state.kuu / beta + &state.psi2;
    let u_bar = &state.kuu * solve_spd(&kpsi, &(state.psi1.transpose() * y));
    let sigma = (&state.kuu * solve_spd(&kpsi, &state.kuu)) / beta;
    let sigma = (&sigma + sigma.transpose()) * 0.5;
    (u_bar, sigma)
}

/// Monte-Carlo estimate of the kernel expectations under diagonal Gaussian
/// marginals, with elementwise standard errors.
pub struct McPsi {
    pub psi0: f64,
    pub psi0_se: f64,
    pub psi1: DMatrix<f64>,
    pub psi1_se: DMatrix<f64>,
    pub psi2: DMatrix<f64>,
    pub psi2_se: DMatrix<f64>,
}

pub fn mc_psi(
    mean: &DMatrix<f64>,
    var: &DMatrix<f64>,
    z: &DMatrix<f64>,
    spec: &KernelSpec,
    n_samples: usize,
    seed: u64,
) -> McPsi {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n, d) = mean.shape();
    let m = z.nrows();
    let mut s0 = 0.0;
    let mut s0_sq = 0.0;
    let mut s1 = DMatrix::zeros(n, m);
    let mut s1_sq = DMatrix::zeros(n, m);
    let mut s2 = DMatrix::zeros(m, m);
    let mut s2_sq = DMatrix::zeros(m, m);
    for _ in 0..n_samples {
        let x = DMatrix::from_fn(n, d, |i, j| {
            mean[(i, j)] + var[(i, j)].sqrt() * standard_normal(&mut rng)
        });
        let kfu = kernel_matrix(spec, &x, z).expect("kernel");
        let p0: f64 = (0..n)
            .map(|i| {
                let xm = DMatrix::from_fn(1, d, |_, c| x[(i, c)]);
                kernel_matrix(spec, &xm, &xm).expect("kernel")[(0, 0)]
            })
            .sum();
        s0 += p0;
        s0_sq += p0 * p0;
        let p2 = kfu.transpose() * &kfu;
        for idx in 0..(n * m) {
            s1[idx] += kfu[idx];
            s1_sq[idx] += kfu[idx] * kfu[idx];
        }
        for idx in 0..(m * m) {
            s2[idx] += p2[idx];
            s2_sq[idx] += p2[idx] * p2[idx];
        }
    }
    let ns = n_samples as f64;
    let se = |sum: f64, sum_sq: f64| {
        let mean = sum / ns;
        let var = (sum_sq / ns - mean * mean).max(0.0);
        (var / ns).sqrt()
    };
    let mut psi1 = DMatrix::zeros(n, m);
    let mut psi1_se = DMatrix::zeros(n, m);
    for idx in 0..(n * m) {
        psi1[idx] = s1[idx] / ns;
        psi1_se[idx] = se(s1[idx], s1_sq[idx]);
    }
    let mut psi2 = DMatrix::zeros(m, m);
    let mut psi2_se = DMatrix::zeros(m, m);
    for idx in 0..(m * m) {
        psi2[idx] = s2[idx] / ns;
        psi2_se[idx] = se(s2[idx], s2_sq[idx]);
    }
    McPsi {
        psi0: s0 / ns,
        psi0_se: se(s0, s0_sq),
        psi1,
        psi1_se,
        psi2,
        psi2_se,
    }
}

pub fn standard_normal(rng: &mut impl Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Dense predictive density at test inputs given the model state.
pub fn dense_predict(
    state: &DenseModelState,
    y: &DMatrix<f64>,
    beta: f64,
    k_su: &DMatrix<f64>,
    k_ss: &DMatrix<f64>,
) -> (DMatrix<f64>, DMatrix<f64>) {
    let kpsi = &state.kuu / beta + &state.psi2;
    let mean = k_su * solve_spd(&kpsi, &(state.psi1.transpose() * y));
    let kuu_inv_kus = solve_spd(&state.kuu, &k_su.transpose());
    let kpsi_inv_kus = solve_spd(&kpsi, &k_su.transpose());
    let cov = k_ss - k_su * (kuu_inv_kus - kpsi_inv_kus / beta);
    (mean, (&cov + cov.transpose()) * 0.5)
}

/// `KL(N(m1,S1) ‖ N(m0,S0))` by direct dense evaluation.
pub fn kl_mvn(m1: &DVector<f64>, s1: &DMatrix<f64>, m0: &DVector<f64>, s0: &DMatrix<f64>) -> f64 {
    let n = m1.len() as f64;
    let l0 = chol(s0);
    let l1 = chol(s1);
    let diff = m0 - m1;
    let quad = (diff.transpose()
        * solve_spd(s0, &DMatrix::from_column_slice(diff.len(), 1, diff.as_slice())))[(0, 0)];
    let tr = solve_spd(s0, s1).trace();
    0.5 * (tr + quad - n + log_det_from_chol(&l0) - log_det_from_chol(&l1))
}
