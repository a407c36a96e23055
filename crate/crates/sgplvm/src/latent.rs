//! Variational posteriors over the per-example latent variables.
//!
//! Two parameterizations share one container: independent Gaussians per
//! entry (`mu`, `log c`), or the dynamical form where the posterior over a
//! latent dimension is `N(K_xx μ_j, (K_xx⁻¹ + Λ_j)⁻¹)` with `Λ_j` diagonal
//! and `K_xx` built from timestamps by a temporal kernel.

use crate::error::{Error, Result};
use crate::kernels::{kernel_grad_hyper, kernel_matrix, KernelSpec};
use nalgebra::{DMatrix, DVector};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LatentMode {
    Iid,
    Dynamical,
}

#[derive(Debug, Clone)]
pub struct VariationalLatent {
    pub mode: LatentMode,
    /// iid: posterior means. dynamical: the μ^(ξ) reparameterization with
    /// posterior mean `K_xx μ`.
    pub mu: DMatrix<f64>,
    /// iid: log posterior variances. dynamical: log diagonal of Λ.
    pub log_scale: DMatrix<f64>,
    pub timestamps: Option<DVector<f64>>,
}

impl VariationalLatent {
    pub fn new_iid(mu: DMatrix<f64>, log_var: DMatrix<f64>) -> Result<Self> {
        if mu.shape() != log_var.shape() {
            return Err(Error::Shape("latent mean/variance shapes differ".into()));
        }
        Ok(Self {
            mode: LatentMode::Iid,
            mu,
            log_scale: log_var,
            timestamps: None,
        })
    }

    pub fn new_dynamical(
        mu: DMatrix<f64>,
        log_lambda: DMatrix<f64>,
        timestamps: DVector<f64>,
    ) -> Result<Self> {
        if mu.shape() != log_lambda.shape() {
            return Err(Error::Shape("latent mean/lambda shapes differ".into()));
        }
        if timestamps.len() != mu.nrows() {
            return Err(Error::Shape(format!(
                "{} timestamps for {} latent points",
                timestamps.len(),
                mu.nrows()
            )));
        }
        for i in 1..timestamps.len() {
            if timestamps[i] <= timestamps[i - 1] {
                return Err(Error::Input("timestamps must be strictly increasing".into()));
            }
        }
        Ok(Self {
            mode: LatentMode::Dynamical,
            mu,
            log_scale: log_lambda,
            timestamps: Some(timestamps),
        })
    }

    pub fn n_points(&self) -> usize {
        self.mu.nrows()
    }

    pub fn latent_dim(&self) -> usize {
        self.mu.ncols()
    }
}

/// KL(q ‖ N(0,1) per entry) for the iid parameterization.
pub fn kl_iid(q: &VariationalLatent) -> f64 {
    let mut kl = 0.0;
    for j in 0..q.mu.ncols() {
        for i in 0..q.mu.nrows() {
            let mu = q.mu[(i, j)];
            let c = q.log_scale[(i, j)].exp();
            kl += 0.5 * (mu * mu + c - q.log_scale[(i, j)] - 1.0);
        }
    }
    kl
}

/// Per-dimension chain state for the dynamical posterior.
struct DynDim {
    /// Λ^{1/2}
    p: DVector<f64>,
    /// W = I + P K P
    w_inv: DMatrix<f64>,
    /// posterior covariance Σ = K − KPW⁻¹PK
    sigma: DMatrix<f64>,
    /// M = K⁻¹Σ = I − PW⁻¹PK
    m: DMatrix<f64>,
}

/// Evaluated latent state: the per-point marginals the psi statistics need,
/// the KL against the prior, and enough intermediates to backpropagate.
pub struct LatentState {
    pub mean: DMatrix<f64>,
    pub var: DMatrix<f64>,
    pub kl: f64,
    kxx: Option<DMatrix<f64>>,
    dyn_dims: Vec<DynDim>,
}

/// Relative jitter applied to K_xx; scales with the kernel variance so the
/// identity ∂K/∂log σ² = K still holds on the jittered matrix.
pub const KXX_JITTER_REL: f64 = 1e-8;

pub fn temporal_gram(temporal: &KernelSpec, t: &DVector<f64>) -> Result<DMatrix<f64>> {
    let tm = DMatrix::from_fn(t.len(), 1, |i, _| t[i]);
    let mut kxx = kernel_matrix(temporal, &tm, &tm)?;
    let jitter = KXX_JITTER_REL * temporal.variance;
    for i in 0..kxx.nrows() {
        kxx[(i, i)] += jitter;
    }
    Ok(kxx)
}

impl LatentState {
    pub fn evaluate(q: &VariationalLatent, temporal: Option<&KernelSpec>) -> Result<Self> {
        match q.mode {
            LatentMode::Iid => {
                let var = q.log_scale.map(f64::exp);
                for v in var.iter() {
                    if *v <= 0.0 || !v.is_finite() {
                        return Err(Error::Input(format!("non-positive latent variance {v}")));
                    }
                }
                Ok(LatentState {
                    mean: q.mu.clone(),
                    var,
                    kl: kl_iid(q),
                    kxx: None,
                    dyn_dims: Vec::new(),
                })
            }
            LatentMode::Dynamical => {
                let temporal = temporal.ok_or_else(|| {
                    Error::State("dynamical latent requires a temporal kernel".into())
                })?;
                let t = q.timestamps.as_ref().ok_or_else(|| {
                    Error::State("dynamical latent requires timestamps".into())
                })?;
                let n = q.n_points();
                let d = q.latent_dim();
                let kxx = temporal_gram(temporal, t)?;
                let mut mean = DMatrix::zeros(n, d);
                let mut var = DMatrix::zeros(n, d);
                let mut dyn_dims = Vec::with_capacity(d);
                let mut kl = 0.0;
                for j in 0..d {
                    let mu_j = q.mu.column(j).into_owned();
                    let p: DVector<f64> = q.log_scale.column(j).map(|l| (0.5 * l).exp());
                    // W = I + P K P
                    let mut w = DMatrix::identity(n, n);
                    for a in 0..n {
                        for b in 0..n {
                            w[(a, b)] += p[a] * kxx[(a, b)] * p[b];
                        }
                    }
                    let chol = nalgebra::Cholesky::new(w).ok_or_else(|| {
                        Error::Decomposition(
                            "temporal posterior whitening matrix not PD".into(),
                        )
                    })?;
                    // Z = Lw⁻¹ P K;  Σ = K − Zᵀ Z
                    let mut pk = kxx.clone();
                    for a in 0..n {
                        for b in 0..n {
                            pk[(a, b)] *= p[a];
                        }
                    }
                    let mut z = pk.clone();
                    chol.l().solve_lower_triangular_mut(&mut z);
                    let sigma = &kxx - z.transpose() * &z;
                    // M = I − P W⁻¹ P K = I − P·(W⁻¹(PK))
                    let w_inv_pk = chol.solve(&pk);
                    let mut m = DMatrix::identity(n, n);
                    for a in 0..n {
                        for b in 0..n {
                            m[(a, b)] -= p[a] * w_inv_pk[(a, b)];
                        }
                    }
                    let w_inv = chol.solve(&DMatrix::identity(n, n));
                    // KL = ½[tr(W⁻¹) + μᵀKμ − n + logdet W]
                    let log_det_w: f64 =
                        chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>() * 2.0;
                    let quad = (mu_j.transpose() * &kxx * &mu_j)[(0, 0)];
                    kl += 0.5 * (w_inv.trace() + quad - n as f64 + log_det_w);

                    let post_mean = &kxx * &mu_j;
                    for i in 0..n {
                        mean[(i, j)] = post_mean[i];
                        var[(i, j)] = sigma[(i, i)];
                        if var[(i, j)] <= 0.0 {
                            return Err(Error::Decomposition(format!(
                                "non-positive dynamical marginal variance at ({i},{j})"
                            )));
                        }
                    }
                    dyn_dims.push(DynDim {
                        p,
                        w_inv,
                        sigma,
                        m,
                    });
                }
                Ok(LatentState {
                    mean,
                    var,
                    kl,
                    kxx: Some(kxx),
                    dyn_dims,
                })
            }
        }
    }

    /// Chain adjoints on the marginal means/variances (plus the −KL term of
    /// the bound) back to the variational parameters and, in the dynamical
    /// case, the temporal kernel hyperparameters.
    ///
    /// `mean_bar`/`var_bar` are ∂(data terms)/∂marginal; the returned grads
    /// are for the full bound, i.e. the −KL contribution is included.
    pub fn backprop(
        &self,
        q: &VariationalLatent,
        temporal: Option<&KernelSpec>,
        mean_bar: &DMatrix<f64>,
        var_bar: &DMatrix<f64>,
    ) -> Result<LatentGrads> {
        let n = q.n_points();
        let d = q.latent_dim();
        match q.mode {
            LatentMode::Iid => {
                let mut mu_bar = DMatrix::zeros(n, d);
                let mut log_scale_bar = DMatrix::zeros(n, d);
                for j in 0..d {
                    for i in 0..n {
                        let c = self.var[(i, j)];
                        // data path minus KL path
                        mu_bar[(i, j)] = mean_bar[(i, j)] - q.mu[(i, j)];
                        log_scale_bar[(i, j)] = c * var_bar[(i, j)] - 0.5 * (c - 1.0);
                    }
                }
                Ok(LatentGrads {
                    mu: mu_bar,
                    log_scale: log_scale_bar,
                    temporal_log_variance: 0.0,
                    temporal_log_lengthscales: DVector::zeros(0),
                })
            }
            LatentMode::Dynamical => {
                let kxx = self.kxx.as_ref().expect("dynamical state");
                let temporal = temporal.expect("temporal spec");
                let t = q.timestamps.as_ref().expect("timestamps");
                let mut mu_bar = DMatrix::zeros(n, d);
                let mut log_scale_bar = DMatrix::zeros(n, d);
                let mut kxx_bar = DMatrix::zeros(n, n);
                for (j, dimst) in self.dyn_dims.iter().enumerate() {
                    let mu_j = q.mu.column(j).into_owned();
                    let mb = mean_bar.column(j).into_owned();
                    let vb = var_bar.column(j).into_owned();

                    // mean path: mean = K μ
                    let mu_grad = kxx * &mb;
                    for i in 0..n {
                        mu_bar[(i, j)] += mu_grad[i];
                    }
                    kxx_bar += &mb * mu_j.transpose();

                    // variance path: var = diag Σ, Σ = (K⁻¹+Λ)⁻¹
                    // K̄ += M diag(vb) Mᵀ ;  ∂/∂logλ_i = −λ_i (Σ diag(vb) Σ)_ii
                    let mjv = {
                        // M · diag(vb)
                        let mut md = dimst.m.clone();
                        for b in 0..n {
                            for a in 0..n {
                                md[(a, b)] *= vb[b];
                            }
                        }
                        md
                    };
                    kxx_bar += &mjv * dimst.m.transpose();
                    for i in 0..n {
                        let mut s = 0.0;
                        for k in 0..n {
                            s += vb[k] * dimst.sigma[(i, k)] * dimst.sigma[(i, k)];
                        }
                        let lambda = q.log_scale[(i, j)].exp();
                        log_scale_bar[(i, j)] += -lambda * s;
                    }

                    // −KL path
                    // ∂KL/∂μ = Kμ  →  contributes −Kμ
                    let kmu = kxx * &mu_j;
                    for i in 0..n {
                        mu_bar[(i, j)] -= kmu[i];
                    }
                    // W̄ = ½(W⁻¹ − W⁻²) for +KL; negate for the bound
                    let w_bar_kl = {
                        let w2 = &dimst.w_inv * &dimst.w_inv;
                        (&dimst.w_inv - w2) * 0.5
                    };
                    // K̄_KL = P W̄ P + ½ μμᵀ
                    let mut pwp = w_bar_kl.clone();
                    for a in 0..n {
                        for b in 0..n {
                            pwp[(a, b)] *= dimst.p[a] * dimst.p[b];
                        }
                    }
                    kxx_bar -= &pwp;
                    kxx_bar -= (&mu_j * mu_j.transpose()) * 0.5;
                    // ∂KL/∂logλ_i = p_i [K P W̄]_ii
                    let kpw = {
                        let mut kp = kxx.clone();
                        for b in 0..n {
                            for a in 0..n {
                                kp[(a, b)] *= dimst.p[b];
                            }
                        }
                        kp * &w_bar_kl
                    };
                    for i in 0..n {
                        log_scale_bar[(i, j)] -= dimst.p[i] * kpw[(i, i)];
                    }
                }

                // contract K̄ with temporal hyperparameter gradients
                let tm = DMatrix::from_fn(n, 1, |i, _| t[i]);
                let grads = kernel_grad_hyper(temporal, &tm, &tm)?;
                // relative jitter scales with σ², so ∂K_jittered/∂log σ² = K_jittered
                let mut dv = grads.d_log_variance.clone();
                let jitter = KXX_JITTER_REL * temporal.variance;
                for i in 0..n {
                    dv[(i, i)] += jitter;
                }
                let sym = (&kxx_bar + kxx_bar.transpose()) * 0.5;
                let temporal_log_variance = sym.dot(&dv);
                let mut temporal_log_lengthscales = DVector::zeros(grads.d_log_lengthscales.len());
                for (di, g) in grads.d_log_lengthscales.iter().enumerate() {
                    temporal_log_lengthscales[di] = sym.dot(g);
                }
                Ok(LatentGrads {
                    mu: mu_bar,
                    log_scale: log_scale_bar,
                    temporal_log_variance,
                    temporal_log_lengthscales,
                })
            }
        }
    }
}

/// Gradients of the bound with respect to the latent variational parameters
/// (KL contribution folded in) and the temporal kernel when dynamical.
pub struct LatentGrads {
    pub mu: DMatrix<f64>,
    pub log_scale: DMatrix<f64>,
    pub temporal_log_variance: f64,
    pub temporal_log_lengthscales: DVector<f64>,
}

/// KL(q ‖ GP prior) for the dynamical parameterization; see
/// [`LatentState::evaluate`] which computes it alongside the marginals.
pub fn kl_dynamical(q: &VariationalLatent, temporal: &KernelSpec) -> Result<f64> {
    if q.mode != LatentMode::Dynamical {
        return Err(Error::State("kl_dynamical on an iid latent".into()));
    }
    Ok(LatentState::evaluate(q, Some(temporal))?.kl)
}
