//! Test-time latent inference by maximizing the partially-collapsed bound.
//!
//! The training terms are constant once the model is frozen, so only the
//! test part L* is optimized over the per-case variational parameters.

use crate::bound::{test_bound_terms, BoundWorkspace, TestCaseContext, TestSideModel};
use crate::error::{Error, Result};
use crate::kernels::product_kernel_cross;
use crate::latent::LatentMode;
use crate::model::SgplvmModel;
use crate::opt::adam_maximize;
use crate::predict::{
    dynamical_latent_at, mixture_moments, PredictiveGaussian, Predictor, SpatialPoints,
};
use crate::psi::{psi1_rbf, psi2_rbf, psi_backprop};
use nalgebra::{DMatrix, DVector};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

/// One held-out example: observed values at a subset of spatial points.
#[derive(Debug, Clone)]
pub struct TestCase {
    /// observed values, raw units (n_s*×d_y)
    pub y_star: DMatrix<f64>,
    /// joined spatial coordinates of the observed points (n_s*×Σd_sf)
    pub xs_star: DMatrix<f64>,
    /// which full-grid points are observed, for mask provenance
    pub observed_idx: Vec<usize>,
    pub t_star: Option<f64>,
}

impl TestCase {
    pub fn validate(&self) -> Result<()> {
        if self.y_star.nrows() != self.xs_star.nrows() {
            return Err(Error::Shape(format!(
                "{} observations at {} spatial points",
                self.y_star.nrows(),
                self.xs_star.nrows()
            )));
        }
        for v in self.y_star.iter() {
            if !v.is_finite() {
                return Err(Error::Input("NaN in observed test values".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct InferConfig {
    pub max_iters: usize,
    pub tolerance: f64,
    pub restarts: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for InferConfig {
    fn default() -> Self {
        Self {
            max_iters: 200,
            tolerance: 1e-6,
            restarts: 5,
            learning_rate: 0.05,
            seed: 0,
        }
    }
}

/// Inferred q(x*) with the attained L*.
#[derive(Debug, Clone)]
pub struct InferredLatent {
    pub mean: DVector<f64>,
    pub var: DVector<f64>,
    pub l_star: f64,
}

/// Gaussian prior for the test latent: standard normal in the iid model,
/// the conditional temporal posterior at t* in the dynamical model.
fn test_prior(model: &SgplvmModel, t_star: Option<f64>) -> Result<(DVector<f64>, DVector<f64>)> {
    let d = model.d_latent();
    match model.q_latent.mode {
        LatentMode::Iid => Ok((DVector::zeros(d), DVector::from_element(d, 1.0))),
        LatentMode::Dynamical => {
            let t = t_star.ok_or_else(|| {
                Error::Input("dynamical test inference requires a timestamp".into())
            })?;
            let (m, v) = dynamical_latent_at(model, &[t])?;
            Ok((
                DVector::from_fn(d, |j, _| m[(0, j)]),
                DVector::from_fn(d, |j, _| v[(0, j)]),
            ))
        }
    }
}

/// KL(N(μ,c) ‖ N(m0,v0)) per dimension plus gradients w.r.t. (μ, log c).
fn kl_diag(
    mu: &DVector<f64>,
    c: &DVector<f64>,
    m0: &DVector<f64>,
    v0: &DVector<f64>,
) -> (f64, DVector<f64>, DVector<f64>) {
    let d = mu.len();
    let mut kl = 0.0;
    let mut g_mu = DVector::zeros(d);
    let mut g_logc = DVector::zeros(d);
    for j in 0..d {
        let diff = mu[j] - m0[j];
        kl += 0.5 * ((c[j] + diff * diff) / v0[j] - 1.0 + (v0[j] / c[j]).ln());
        g_mu[j] = diff / v0[j];
        g_logc[j] = 0.5 * (c[j] / v0[j] - 1.0);
    }
    (kl, g_mu, g_logc)
}

pub struct InferenceEngine<'a> {
    model: &'a SgplvmModel,
    side: TestSideModel,
    spatial_variance_prod: f64,
}

impl<'a> InferenceEngine<'a> {
    pub fn new(model: &'a SgplvmModel, ws: &BoundWorkspace) -> Self {
        let side = TestSideModel::from_workspace(ws);
        let spatial_variance_prod = model.spatial_kernels.iter().map(|s| s.variance).product();
        InferenceEngine {
            model,
            side,
            spatial_variance_prod,
        }
    }

    pub fn side(&self) -> &TestSideModel {
        &self.side
    }

    /// L* (with the test KL) and its gradient at packed (μ*, log c*).
    fn objective(
        &self,
        ctx: &TestCaseContext,
        prior: &(DVector<f64>, DVector<f64>),
        params: &[f64],
    ) -> Result<(f64, Vec<f64>)> {
        let d = self.model.d_latent();
        let mean = DMatrix::from_fn(1, d, |_, j| params[j]);
        let var = DMatrix::from_fn(1, d, |_, j| params[d + j].exp());
        let spec = &self.model.latent_kernel;
        let psi0_xi = spec.variance;
        let psi1 = psi1_rbf(&mean, &var, &self.model.z_xi, spec)?;
        let psi2 = psi2_rbf(&mean, &var, &self.model.z_xi, spec)?;
        let psi1_vec = DVector::from_fn(psi1.ncols(), |k, _| psi1[(0, k)]);
        let (value, grads) = test_bound_terms(&self.side, ctx, psi0_xi, &psi1_vec, &psi2, true);
        let (p1_bar, p2_bar) = grads.expect("requested");
        let p1_bar_m = DMatrix::from_fn(1, p1_bar.len(), |_, k| p1_bar[k]);
        let pg = psi_backprop(&mean, &var, &self.model.z_xi, spec, &psi1, 0.0, &p1_bar_m, &p2_bar)?;

        let mu_v = DVector::from_fn(d, |j, _| mean[(0, j)]);
        let c_v = DVector::from_fn(d, |j, _| var[(0, j)]);
        let (kl, kl_mu, kl_logc) = kl_diag(&mu_v, &c_v, &prior.0, &prior.1);

        let mut grad = vec![0.0; 2 * d];
        for j in 0..d {
            grad[j] = pg.mean[(0, j)] - kl_mu[j];
            grad[d + j] = pg.var[(0, j)] * c_v[j] - kl_logc[j];
        }
        Ok((value - kl, grad))
    }

    /// Optimize q(x*) for one test case with multiple restarts.
    pub fn infer_latent(&self, case: &TestCase, cfg: &InferConfig) -> Result<InferredLatent> {
        case.validate()?;
        let d = self.model.d_latent();
        let y_std = self.model.standardization.apply(&case.y_star);
        let k_s_star = product_kernel_cross(
            &self.model.spatial_kernels,
            &self.model.z_s,
            &case.xs_star,
        )?;
        let ctx = TestCaseContext::build(&self.side, &k_s_star, &y_std, self.spatial_variance_prod)?;
        let prior = test_prior(self.model, case.t_star)?;

        // restart inits: nearest training latent by predicted fit, then random
        let mut inits: Vec<DVector<f64>> = Vec::new();
        inits.push(self.nearest_latent_init(&k_s_star, &y_std)?);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        for _ in 1..cfg.restarts.max(1) {
            inits.push(DVector::from_fn(d, |j, _| {
                prior.0[j] + prior.1[j].sqrt() * crate::io::synth::standard_normal(&mut rng)
            }));
        }

        let mut best: Option<InferredLatent> = None;
        for init in inits {
            let mut x0 = vec![0.0; 2 * d];
            for j in 0..d {
                x0[j] = init[j];
                x0[d + j] = 0.5f64.ln();
            }
            let run = adam_maximize(
                |p| self.objective(&ctx, &prior, p),
                &x0,
                cfg.max_iters,
                cfg.learning_rate,
                cfg.tolerance,
                0,
            )?;
            if !run.value.is_finite() {
                continue;
            }
            let cand = InferredLatent {
                mean: DVector::from_fn(d, |j, _| run.params[j]),
                var: DVector::from_fn(d, |j, _| run.params[d + j].exp()),
                l_star: run.value,
            };
            if best.as_ref().map_or(true, |b| cand.l_star > b.l_star) {
                best = Some(cand);
            }
        }
        best.ok_or_else(|| Error::Inference("all restarts produced non-finite L*".into()))
    }

    /// Initialization at the training latent whose forward prediction best
    /// matches the observed values.
    fn nearest_latent_init(
        &self,
        k_s_star: &DMatrix<f64>,
        y_std: &DMatrix<f64>,
    ) -> Result<DVector<f64>> {
        let (means, _) = self.model.latent_marginals()?;
        let d = means.ncols();
        if y_std.nrows() == 0 {
            return Ok(DVector::zeros(d));
        }
        // predicted mean for latent x: (k_ξ(x,Z)⊗K_s*)·α with α = K_ψ⁻¹Ψ₁ᵀY.
        // Reuse H = K_uu⁻¹Ū = K_ψ⁻¹Ψ₁ᵀY... these differ; use the side's
        // u_bar through K_uu⁻¹: μ(x) = k_ξ(x,Z)⊗K_s* · K_uu⁻¹ Ū = cross·H.
        let mut best = (f64::INFINITY, 0usize);
        for i in 0..means.nrows() {
            let x = DMatrix::from_fn(1, d, |_, j| means[(i, j)]);
            let kx = crate::kernels::kernel_matrix(&self.model.latent_kernel, &x, &self.model.z_xi)?;
            let mut sse = 0.0;
            for c in 0..y_std.ncols() {
                for p in 0..y_std.nrows() {
                    let mut pred = 0.0;
                    for kxi in 0..self.side.m_xi {
                        let mut inner = 0.0;
                        for s in 0..self.side.m_s {
                            inner += k_s_star[(p, s)] * self.side.h[(kxi * self.side.m_s + s, c)];
                        }
                        pred += kx[(0, kxi)] * inner;
                    }
                    let r = pred - y_std[(p, c)];
                    sse += r * r;
                }
            }
            if sse < best.0 {
                best = (sse, i);
            }
        }
        Ok(DVector::from_fn(d, |j, _| means[(best.1, j)]))
    }
}

/// Result of imputing the missing points of one test case.
#[derive(Debug, Clone)]
pub struct Imputation {
    pub latent: InferredLatent,
    pub missing_idx: Vec<usize>,
    /// imputed values, raw units
    pub mean: DMatrix<f64>,
    /// predictive variance including observation noise, raw units²,
    /// per channel
    pub var: Vec<DVector<f64>>,
}

/// Full imputation pipeline: infer the latent, predict over the whole grid,
/// condition on the observed pixels, return the missing-pixel density.
#[allow(clippy::too_many_arguments)]
pub fn impute(
    model: &SgplvmModel,
    predictor: &Predictor,
    engine: &InferenceEngine,
    case: &TestCase,
    full_grid: &SpatialPoints,
    n_mog: usize,
    seed: u64,
    infer_cfg: &InferConfig,
) -> Result<Imputation> {
    let latent = engine.infer_latent(case, infer_cfg)?;
    let n_full = full_grid.n_points();
    let observed: std::collections::HashSet<usize> = case.observed_idx.iter().copied().collect();
    if case.observed_idx.len() != case.y_star.nrows() {
        return Err(Error::Shape("observed index/value length mismatch".into()));
    }
    let missing_idx: Vec<usize> = (0..n_full).filter(|i| !observed.contains(i)).collect();
    let d_y = case.y_star.ncols();
    if missing_idx.is_empty() {
        return Ok(Imputation {
            latent,
            missing_idx,
            mean: DMatrix::zeros(0, d_y),
            var: vec![DVector::zeros(0); d_y],
        });
    }

    let center = predictor.predict_marginal_mean(&latent.mean, &latent.var, full_grid)?;
    let mix = predictor.predict_mixture(&latent.mean, &latent.var, full_grid, n_mog, seed, true)?;
    let (_, covs) = mixture_moments(&mix)?;

    let y_std = model.standardization.apply(&case.y_star);
    let mut mean = DMatrix::zeros(missing_idx.len(), d_y);
    let mut var = vec![DVector::zeros(missing_idx.len()); d_y];
    for c in 0..d_y {
        let pred = PredictiveGaussian {
            mean: center.clone(),
            var: covs[c].diagonal(),
            cov: Some(covs[c].clone()),
        };
        let cond = crate::predict::conditional_at(
            &pred.mean,
            pred.cov.as_ref().expect("full cov"),
            &case.observed_idx,
            &y_std,
            &missing_idx,
            c,
        )?;
        for (a, v) in cond.0.iter().enumerate() {
            mean[(a, c)] = *v;
        }
        for a in 0..missing_idx.len() {
            var[c][a] = cond.1[(a, a)].max(0.0) + 1.0 / predictor.beta;
        }
    }
    // destandardize
    let mean_raw = model.standardization.invert(&mean);
    for c in 0..d_y {
        let s2 = model.standardization.scale[c] * model.standardization.scale[c];
        for a in 0..missing_idx.len() {
            var[c][a] *= s2;
        }
    }
    Ok(Imputation {
        latent,
        missing_idx,
        mean: mean_raw,
        var,
    })
}
