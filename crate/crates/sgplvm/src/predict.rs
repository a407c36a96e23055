//! Forward predictive densities and Gaussian conditioning.
//!
//! All outputs are in standardized units; callers destandardize through the
//! model's per-channel transform.

use crate::bound::BoundWorkspace;
use crate::error::{Error, Result};
use crate::kernels::{
    kernel_matrix, product_kernel_cross, product_kernel_matrix, KernelSpec,
};
use crate::kron::mode_apply;
use crate::latent::LatentMode;
use crate::model::SgplvmModel;
use crate::psi::psi1_rbf;
use nalgebra::{DMatrix, DVector};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

/// Test spatial inputs: either per-factor grids (predictions over the full
/// Cartesian product, super-resolution included) or an arbitrary set of
/// joined points (missing-pixel subsets).
#[derive(Debug, Clone)]
pub enum SpatialPoints {
    Factored(Vec<DMatrix<f64>>),
    Joined(DMatrix<f64>),
}

impl SpatialPoints {
    pub fn n_points(&self) -> usize {
        match self {
            SpatialPoints::Factored(f) => f.iter().map(|x| x.nrows()).product(),
            SpatialPoints::Joined(x) => x.nrows(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct PredictiveGaussian {
    pub mean: DMatrix<f64>,
    /// diagonal of the latent-function covariance (no observation noise)
    pub var: DVector<f64>,
    /// full covariance over the prediction points, when requested
    pub cov: Option<DMatrix<f64>>,
}

#[derive(Debug, Clone)]
pub struct MixturePrediction {
    pub components: Vec<PredictiveGaussian>,
}

/// Prediction weights cached from a trained model's workspace.
pub struct Predictor {
    /// `α = K_ψ⁻¹ Ψ₁ᵀ Y` (m×d_y)
    alpha: DMatrix<f64>,
    /// per factor `L_f⁻ᵀ Q_f`
    lq_t: Vec<DMatrix<f64>>,
    /// `1 − β⁻¹/d_I`
    w: DVector<f64>,
    pub beta: f64,
    pub d_y: usize,
    latent_kernel: KernelSpec,
    spatial_kernels: Vec<KernelSpec>,
    z_xi: DMatrix<f64>,
    z_s: Vec<DMatrix<f64>>,
}

fn apply_factors(factors: &[DMatrix<f64>], m: &DMatrix<f64>) -> DMatrix<f64> {
    let rows: usize = factors.iter().map(|f| f.nrows()).product();
    let mut out = DMatrix::zeros(rows, m.ncols());
    for j in 0..m.ncols() {
        let col: Vec<f64> = m.column(j).iter().copied().collect();
        out.column_mut(j).copy_from_slice(&mode_apply(factors, &col));
    }
    out
}

impl Predictor {
    pub fn new(model: &SgplvmModel, ws: &BoundWorkspace) -> Self {
        let d_vals = ws.d.values();
        let mut g = ws.b.clone();
        for j in 0..g.ncols() {
            for i in 0..g.nrows() {
                g[(i, j)] /= d_vals[i];
            }
        }
        let qg = apply_factors(&ws.q_factors, &g);
        let lt_inv: Vec<DMatrix<f64>> = ws
            .l_factors
            .iter()
            .map(|l| {
                let mut inv = DMatrix::identity(l.nrows(), l.nrows());
                l.solve_lower_triangular_mut(&mut inv);
                inv.transpose()
            })
            .collect();
        let alpha = apply_factors(&lt_inv, &qg);
        let lq_t: Vec<DMatrix<f64>> = lt_inv
            .iter()
            .zip(ws.q_factors.iter())
            .map(|(lt, q)| lt * q)
            .collect();
        let w = d_vals.map(|d| 1.0 - 1.0 / (ws.beta * d));
        Predictor {
            alpha,
            lq_t,
            w,
            beta: ws.beta,
            d_y: ws.d_y,
            latent_kernel: model.latent_kernel.clone(),
            spatial_kernels: model.spatial_kernels.clone(),
            z_xi: model.z_xi.clone(),
            z_s: model.z_s.clone(),
        }
    }

    pub fn prior_variance(&self) -> f64 {
        self.latent_kernel.variance
            * self
                .spatial_kernels
                .iter()
                .map(|s| s.variance)
                .product::<f64>()
    }

    /// Cross-covariance factors between test inputs and the inducing grid:
    /// the latent factor followed by the spatial side (factored or joined).
    fn cross_factors(
        &self,
        x_xi_star: &DMatrix<f64>,
        spatial: &SpatialPoints,
    ) -> Result<Vec<DMatrix<f64>>> {
        let mut factors = vec![kernel_matrix(&self.latent_kernel, x_xi_star, &self.z_xi)?];
        match spatial {
            SpatialPoints::Factored(xs) => {
                if xs.len() != self.z_s.len() {
                    return Err(Error::Shape("spatial factor count mismatch".into()));
                }
                for ((spec, z), x) in self
                    .spatial_kernels
                    .iter()
                    .zip(self.z_s.iter())
                    .zip(xs.iter())
                {
                    factors.push(kernel_matrix(spec, x, z)?);
                }
            }
            SpatialPoints::Joined(x) => {
                factors.push(product_kernel_cross(&self.spatial_kernels, &self.z_s, x)?);
            }
        }
        Ok(factors)
    }

    /// The spatial-side `L⁻ᵀQ` as matched to `cross_factors`: per factor in
    /// the factored case, one joined block otherwise.
    fn v_factors(&self, cross: &[DMatrix<f64>], joined: bool) -> Vec<DMatrix<f64>> {
        let mut v = vec![&cross[0] * &self.lq_t[0]];
        if joined {
            // single spatial block: multiply by ⊗(L_f⁻ᵀQ_f) from the right
            let vt = apply_factors(
                &self.lq_t[1..].iter().map(|m| m.transpose()).collect::<Vec<_>>(),
                &cross[1].transpose(),
            );
            v.push(vt.transpose());
        } else {
            for (f, c) in cross[1..].iter().enumerate() {
                v.push(c * &self.lq_t[f + 1]);
            }
        }
        v
    }

    /// Predictive density at deterministic latent/spatial test inputs.
    pub fn predict_at(
        &self,
        x_xi_star: &DMatrix<f64>,
        spatial: &SpatialPoints,
        want_full_cov: bool,
    ) -> Result<PredictiveGaussian> {
        let cross = self.cross_factors(x_xi_star, spatial)?;
        let joined = matches!(spatial, SpatialPoints::Joined(_));
        let mean = apply_factors(&cross, &self.alpha);
        let v = self.v_factors(&cross, joined);

        // diag(Σ*) = k** − Σ_I V[p,I]²·w_I via squared-factor products
        let v_sq: Vec<DMatrix<f64>> = v.iter().map(|m| m.component_mul(m)).collect();
        let wv: Vec<f64> = self.w.iter().copied().collect();
        let sub = mode_apply(&v_sq, &wv);
        let kss = self.prior_variance();
        let n_star = mean.nrows();
        let mut var = DVector::zeros(n_star);
        for p in 0..n_star {
            let raw = kss - sub[p];
            if raw < -1e-10 * kss.max(1.0) {
                return Err(Error::NonFinite(format!(
                    "negative predictive variance {raw}"
                )));
            }
            var[p] = raw.max(0.0);
        }

        let cov = if want_full_cov {
            if x_xi_star.nrows() != 1 {
                return Err(Error::Input(
                    "full covariance is computed per test case (one latent point)".into(),
                ));
            }
            let k_ss_spatial = match spatial {
                SpatialPoints::Joined(x) => {
                    product_kernel_matrix(&self.spatial_kernels, x, x, true)?
                }
                SpatialPoints::Factored(xs) => {
                    let mut gram = DMatrix::from_element(1, 1, 1.0);
                    for (spec, x) in self.spatial_kernels.iter().zip(xs.iter()) {
                        let k = kernel_matrix(spec, x, x)?;
                        gram = crate::kron::dense_kron(&gram, &k);
                    }
                    gram
                }
            };
            let kss_full = k_ss_spatial * self.latent_kernel.variance;
            // V = a ⊗ P rows; Σ* = K** − P diag(ω) Pᵀ with
            // ω_s = Σ_k a_k² w_(k,s)
            let a = &v[0]; // 1×m_ξ
            let p_mat = if joined {
                v[1].clone()
            } else {
                let mut p = DMatrix::from_element(1, 1, 1.0);
                for vf in &v[1..] {
                    p = row_kron(&p, vf);
                }
                p
            };
            let m_s = p_mat.ncols();
            let m_xi = a.ncols();
            let mut omega = DVector::zeros(m_s);
            for s in 0..m_s {
                let mut acc = 0.0;
                for kxi in 0..m_xi {
                    acc += a[(0, kxi)] * a[(0, kxi)] * self.w[kxi * m_s + s];
                }
                omega[s] = acc;
            }
            let mut scaled = p_mat.clone();
            for s in 0..m_s {
                for p in 0..scaled.nrows() {
                    scaled[(p, s)] *= omega[s];
                }
            }
            let cov = kss_full - &scaled * p_mat.transpose();
            Some((&cov + cov.transpose()) * 0.5)
        } else {
            None
        };

        Ok(PredictiveGaussian { mean, var, cov })
    }

    /// Marginal predictive mean under a diagonal Gaussian latent posterior:
    /// `μ̄* = Ψ₁* K_ψ⁻¹ Ψ₁ᵀ Y`.
    pub fn predict_marginal_mean(
        &self,
        q_mean: &DVector<f64>,
        q_var: &DVector<f64>,
        spatial: &SpatialPoints,
    ) -> Result<DMatrix<f64>> {
        let d = self.z_xi.ncols();
        if q_mean.len() != d || q_var.len() != d {
            return Err(Error::Shape("latent posterior dimension mismatch".into()));
        }
        let mean_m = DMatrix::from_fn(1, d, |_, j| q_mean[j]);
        let var_m = DMatrix::from_fn(1, d, |_, j| q_var[j]);
        let psi1_star = psi1_rbf(&mean_m, &var_m, &self.z_xi, &self.latent_kernel)?;
        let mut factors = vec![psi1_star];
        match spatial {
            SpatialPoints::Factored(xs) => {
                for ((spec, z), x) in self
                    .spatial_kernels
                    .iter()
                    .zip(self.z_s.iter())
                    .zip(xs.iter())
                {
                    factors.push(kernel_matrix(spec, x, z)?);
                }
            }
            SpatialPoints::Joined(x) => {
                factors.push(product_kernel_cross(&self.spatial_kernels, &self.z_s, x)?);
            }
        }
        Ok(apply_factors(&factors, &self.alpha))
    }

    /// Mixture-of-Gaussians approximation: one predictive component per
    /// latent sample from the posterior. Deterministic under `seed`.
    pub fn predict_mixture(
        &self,
        q_mean: &DVector<f64>,
        q_var: &DVector<f64>,
        spatial: &SpatialPoints,
        n_mog: usize,
        seed: u64,
        want_full_cov: bool,
    ) -> Result<MixturePrediction> {
        if n_mog == 0 {
            return Err(Error::Input("mixture needs at least one component".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = q_mean.len();
        let mut components = Vec::with_capacity(n_mog);
        for _ in 0..n_mog {
            let x = DMatrix::from_fn(1, d, |_, j| {
                q_mean[j] + q_var[j].sqrt() * standard_normal(&mut rng)
            });
            components.push(self.predict_at(&x, spatial, want_full_cov)?);
        }
        Ok(MixturePrediction { components })
    }
}

fn standard_normal(rng: &mut impl Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Row-wise Kronecker product (same row count semantics as V = a ⊗ P).
fn row_kron(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let rows = a.nrows() * b.nrows();
    let cols = a.ncols() * b.ncols();
    let mut out = DMatrix::zeros(rows, cols);
    for i in 0..a.nrows() {
        for p in 0..b.nrows() {
            for j in 0..a.ncols() {
                for q in 0..b.ncols() {
                    out[(i * b.nrows() + p, j * b.ncols() + q)] = a[(i, j)] * b[(p, q)];
                }
            }
        }
    }
    out
}

/// Mixture moments: the equally-weighted component mean and, per channel,
/// the covariance `E[Σ_c + μ_cμ_cᵀ] − μ̄μ̄ᵀ` centered at that sample mean
/// (guaranteed PSD).
pub fn mixture_moments(
    mix: &MixturePrediction,
) -> Result<(DMatrix<f64>, Vec<DMatrix<f64>>)> {
    let first = mix
        .components
        .first()
        .ok_or_else(|| Error::State("empty mixture".into()))?;
    let s = mix.components.len() as f64;
    let n = first.mean.nrows();
    let d_y = first.mean.ncols();
    let mut mean = DMatrix::zeros(n, d_y);
    let mut covs = vec![DMatrix::zeros(n, n); d_y];
    for comp in &mix.components {
        let cov = comp
            .cov
            .as_ref()
            .ok_or_else(|| Error::State("mixture moments need full-covariance components".into()))?;
        mean += &comp.mean / s;
        for c in 0..d_y {
            let mu_c = comp.mean.column(c);
            for i in 0..n {
                for j in 0..n {
                    covs[c][(i, j)] += (cov[(i, j)] + mu_c[i] * mu_c[j]) / s;
                }
            }
        }
    }
    for c in 0..d_y {
        let ctr = mean.column(c);
        for i in 0..n {
            for j in 0..n {
                covs[c][(i, j)] -= ctr[i] * ctr[j];
            }
        }
        let sym = (&covs[c] + covs[c].transpose()) * 0.5;
        covs[c] = sym;
    }
    Ok((mean, covs))
}

/// Gaussian conditioning of a joint prediction on observed values at a
/// subset of its points, evaluated at `query_idx`.
pub fn conditional_at(
    mean: &DMatrix<f64>,
    cov: &DMatrix<f64>,
    observed_idx: &[usize],
    observed_values: &DMatrix<f64>,
    query_idx: &[usize],
    channel: usize,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let n = mean.nrows();
    for &i in observed_idx.iter().chain(query_idx.iter()) {
        if i >= n {
            return Err(Error::Shape(format!("index {i} outside {n} prediction points")));
        }
    }
    if observed_values.nrows() != observed_idx.len() {
        return Err(Error::Shape("observed values/index length mismatch".into()));
    }
    let q = query_idx.len();
    let o = observed_idx.len();
    if o == 0 {
        let mut mu = DVector::zeros(q);
        let mut cv = DMatrix::zeros(q, q);
        for (a, &i) in query_idx.iter().enumerate() {
            mu[a] = mean[(i, channel)];
            for (b, &j) in query_idx.iter().enumerate() {
                cv[(a, b)] = cov[(i, j)];
            }
        }
        return Ok((mu, cv));
    }
    let mut s_oo = DMatrix::zeros(o, o);
    for (a, &i) in observed_idx.iter().enumerate() {
        for (b, &j) in observed_idx.iter().enumerate() {
            s_oo[(a, b)] = cov[(i, j)];
        }
    }
    let scale = (s_oo.trace() / o as f64).max(1e-12);
    let mut jitter = 1e-10 * scale;
    let chol = loop {
        let mut attempt = s_oo.clone();
        for a in 0..o {
            attempt[(a, a)] += jitter;
        }
        if let Some(c) = nalgebra::Cholesky::new(attempt) {
            break c;
        }
        jitter *= 10.0;
        if jitter > 1e-4 * scale {
            return Err(Error::Conditioning(
                "observed-block covariance not PD after jitter escalation".into(),
            ));
        }
    };
    let mut resid = DVector::zeros(o);
    for (a, &i) in observed_idx.iter().enumerate() {
        resid[a] = observed_values[(a, channel)] - mean[(i, channel)];
    }
    let mut s_qo = DMatrix::zeros(q, o);
    for (a, &i) in query_idx.iter().enumerate() {
        for (b, &j) in observed_idx.iter().enumerate() {
            s_qo[(a, b)] = cov[(i, j)];
        }
    }
    let alpha = chol.solve(&DMatrix::from_column_slice(o, 1, resid.as_slice()));
    let mut mu = DVector::zeros(q);
    for (a, &i) in query_idx.iter().enumerate() {
        mu[a] = mean[(i, channel)];
        for b in 0..o {
            mu[a] += s_qo[(a, b)] * alpha[(b, 0)];
        }
    }
    let sol = chol.solve(&s_qo.transpose());
    let mut cv = DMatrix::zeros(q, q);
    for (a, &i) in query_idx.iter().enumerate() {
        for (b, &j) in query_idx.iter().enumerate() {
            let mut corr = 0.0;
            for t in 0..o {
                corr += s_qo[(a, t)] * sol[(t, b)];
            }
            cv[(a, b)] = cov[(i, j)] - corr;
        }
    }
    Ok((mu, (&cv + cv.transpose()) * 0.5))
}

/// Conditioning on observed pixels, returning the density over missing ones.
pub fn condition_on_observed(
    pred: &PredictiveGaussian,
    observed_idx: &[usize],
    observed_values: &DMatrix<f64>,
) -> Result<PredictiveGaussian> {
    let cov = pred
        .cov
        .as_ref()
        .ok_or_else(|| Error::State("conditioning requires a full covariance".into()))?;
    let n = pred.mean.nrows();
    let observed: std::collections::HashSet<usize> = observed_idx.iter().copied().collect();
    let missing: Vec<usize> = (0..n).filter(|i| !observed.contains(i)).collect();
    let d_y = pred.mean.ncols();
    let mut mean = DMatrix::zeros(missing.len(), d_y);
    let mut cov_out = DMatrix::zeros(missing.len(), missing.len());
    for c in 0..d_y {
        let (mu, cv) = conditional_at(&pred.mean, cov, observed_idx, observed_values, &missing, c)?;
        for (a, v) in mu.iter().enumerate() {
            mean[(a, c)] = *v;
        }
        if c == 0 {
            cov_out = cv;
        }
    }
    let var = DVector::from_fn(missing.len(), |i, _| cov_out[(i, i)].max(0.0));
    Ok(PredictiveGaussian {
        mean,
        var,
        cov: Some(cov_out),
    })
}

/// Dynamical latent posterior at new times: per latent dimension,
/// `N(K_*x μ_j, k_t(t*,t*) − K_*x(K_xx + Λ_j⁻¹)⁻¹K_x*)`.
pub fn dynamical_latent_at(
    model: &SgplvmModel,
    t_star: &[f64],
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    if model.q_latent.mode != LatentMode::Dynamical {
        return Err(Error::State("dynamical posterior on an iid model".into()));
    }
    let temporal = model
        .temporal
        .as_ref()
        .ok_or_else(|| Error::State("missing temporal kernel".into()))?;
    let t = model
        .q_latent
        .timestamps
        .as_ref()
        .ok_or_else(|| Error::State("missing timestamps".into()))?;
    let n = t.len();
    let d = model.d_latent();
    let kxx = crate::latent::temporal_gram(temporal, t)?;
    let tm = DMatrix::from_fn(n, 1, |i, _| t[i]);
    let sm = DMatrix::from_fn(t_star.len(), 1, |i, _| t_star[i]);
    let k_star_x = kernel_matrix(temporal, &sm, &tm)?;
    let k_ss = temporal.variance;

    let mut mean = DMatrix::zeros(t_star.len(), d);
    let mut var = DMatrix::zeros(t_star.len(), d);
    for j in 0..d {
        let mu_j = model.q_latent.mu.column(j).into_owned();
        let m = &k_star_x * &mu_j;
        // (K + Λ⁻¹)⁻¹ = P(PKP + I)⁻¹P with P = Λ^{1/2}
        let p: DVector<f64> = model.q_latent.log_scale.column(j).map(|l| (0.5 * l).exp());
        let mut w = DMatrix::identity(n, n);
        for a in 0..n {
            for b in 0..n {
                w[(a, b)] += p[a] * kxx[(a, b)] * p[b];
            }
        }
        let chol = nalgebra::Cholesky::new(w)
            .ok_or_else(|| Error::Decomposition("dynamical whitening not PD".into()))?;
        // rows of K_*x scaled by P
        let mut pk = k_star_x.transpose();
        for a in 0..n {
            for c in 0..t_star.len() {
                pk[(a, c)] *= p[a];
            }
        }
        let mut z = pk.clone();
        chol.l().solve_lower_triangular_mut(&mut z);
        for (i, _) in t_star.iter().enumerate() {
            let mut corr = 0.0;
            for a in 0..n {
                corr += z[(a, i)] * z[(a, i)];
            }
            mean[(i, j)] = m[i];
            var[(i, j)] = (k_ss - corr).max(1e-12);
        }
    }
    Ok((mean, var))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn conditioning_two_point_textbook() {
        // joint N([1, 2], [[2, 1],[1, 3]]) conditioned on x₀ = 2:
        // mean₁ = 2 + (1/2)(2−1) = 2.5, var₁ = 3 − 1/2 = 2.5
        let mean = DMatrix::from_column_slice(2, 1, &[1.0, 2.0]);
        let cov = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 3.0]);
        let pred = PredictiveGaussian {
            mean,
            var: cov.diagonal(),
            cov: Some(cov),
        };
        let obs = DMatrix::from_element(1, 1, 2.0);
        let cond = condition_on_observed(&pred, &[0], &obs).unwrap();
        assert_relative_eq!(cond.mean[(0, 0)], 2.5, epsilon = 1e-8);
        assert_relative_eq!(cond.var[0], 2.5, epsilon = 1e-6);
    }

    #[test]
    fn conditioning_zero_observed_is_identity() {
        let mean = DMatrix::from_column_slice(2, 1, &[0.5, -0.5]);
        let cov = DMatrix::from_row_slice(2, 2, &[1.0, 0.2, 0.2, 1.0]);
        let pred = PredictiveGaussian {
            mean: mean.clone(),
            var: cov.diagonal(),
            cov: Some(cov.clone()),
        };
        let obs = DMatrix::zeros(0, 1);
        let cond = condition_on_observed(&pred, &[], &obs).unwrap();
        assert_relative_eq!(cond.mean, mean, epsilon = 1e-14);
        assert_relative_eq!(cond.cov.unwrap(), cov, epsilon = 1e-14);
    }

    #[test]
    fn conditioning_all_observed_is_empty() {
        let mean = DMatrix::from_column_slice(2, 1, &[0.5, -0.5]);
        let cov = DMatrix::from_row_slice(2, 2, &[1.0, 0.2, 0.2, 1.0]);
        let pred = PredictiveGaussian {
            mean,
            var: cov.diagonal(),
            cov: Some(cov),
        };
        let obs = DMatrix::from_column_slice(2, 1, &[0.1, 0.2]);
        let cond = condition_on_observed(&pred, &[0, 1], &obs).unwrap();
        assert_eq!(cond.mean.nrows(), 0);
    }

    #[test]
    fn conditioning_reduces_variance() {
        let mean = DMatrix::zeros(3, 1);
        let cov = DMatrix::from_row_slice(
            3,
            3,
            &[1.0, 0.5, 0.2, 0.5, 1.0, 0.4, 0.2, 0.4, 1.0],
        );
        let pred = PredictiveGaussian {
            mean,
            var: cov.diagonal(),
            cov: Some(cov.clone()),
        };
        let obs = DMatrix::from_element(1, 1, 1.0);
        let cond = condition_on_observed(&pred, &[0], &obs).unwrap();
        // remaining points are original indices 1 and 2
        assert!(cond.var[0] <= cov[(1, 1)] + 1e-10);
        assert!(cond.var[1] <= cov[(2, 2)] + 1e-10);
    }
}
