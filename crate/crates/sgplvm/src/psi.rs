//! Analytic kernel expectations under Gaussian per-point latent marginals,
//! for the ARD-RBF latent kernel, plus their structured combination with the
//! spatial factors.
//!
//! Rows of Ψ₁ and the per-example terms of Ψ₂ are accumulated in data-index
//! order; the reduction order is fixed and independent of threading.

use crate::error::{Error, Result};
use crate::kernels::{kernel_diag, kernel_matrix, KernelFamily, KernelSpec};
use nalgebra::{DMatrix, DVector};

/// Latent-factor statistics ψ₀, Ψ₁, Ψ₂.
#[derive(Debug, Clone)]
pub struct PsiSet {
    pub psi0: f64,
    pub psi1: DMatrix<f64>,
    pub psi2: DMatrix<f64>,
}

fn check_rbf(spec: &KernelSpec) -> Result<()> {
    if spec.family != KernelFamily::ArdRbf {
        return Err(Error::Input(
            "analytic psi statistics require the ARD-RBF latent kernel".into(),
        ));
    }
    Ok(())
}

fn check_marginals(mean: &DMatrix<f64>, var: &DMatrix<f64>, z: &DMatrix<f64>, spec: &KernelSpec) -> Result<()> {
    if mean.shape() != var.shape() {
        return Err(Error::Shape("latent marginal mean/variance shapes differ".into()));
    }
    if mean.ncols() != spec.input_dim() || z.ncols() != spec.input_dim() {
        return Err(Error::Shape(format!(
            "latent dimension mismatch: marginals {}, inducing {}, kernel {}",
            mean.ncols(),
            z.ncols(),
            spec.input_dim()
        )));
    }
    for v in var.iter() {
        if *v < 0.0 || !v.is_finite() {
            return Err(Error::Input(format!("invalid latent marginal variance {v}")));
        }
    }
    Ok(())
}

/// `ψ₀ = E[tr K_ff] = n_ξ σ²` (constant ARD-RBF diagonal).
pub fn psi0_rbf(n_points: usize, spec: &KernelSpec) -> Result<f64> {
    check_rbf(spec)?;
    Ok(n_points as f64 * spec.variance)
}

/// `Ψ₁[i,k] = E_q[k(x_i, z_k)]` for diagonal Gaussian marginals.
pub fn psi1_rbf(
    mean: &DMatrix<f64>,
    var: &DMatrix<f64>,
    z: &DMatrix<f64>,
    spec: &KernelSpec,
) -> Result<DMatrix<f64>> {
    check_rbf(spec)?;
    check_marginals(mean, var, z, spec)?;
    let (n, m) = (mean.nrows(), z.nrows());
    let dim = spec.input_dim();
    let mut out = DMatrix::zeros(n, m);
    for i in 0..n {
        for k in 0..m {
            let mut log_g = 0.0;
            for d in 0..dim {
                let l2 = spec.lengthscales[d] * spec.lengthscales[d];
                let s = l2 + var[(i, d)];
                let r = mean[(i, d)] - z[(k, d)];
                log_g += 0.5 * (l2 / s).ln() - 0.5 * r * r / s;
            }
            out[(i, k)] = spec.variance * log_g.exp();
        }
    }
    Ok(out)
}

/// `Ψ₂[k,k'] = Σ_i E_q[k(x_i,z_k)k(x_i,z_k')]`.
pub fn psi2_rbf(
    mean: &DMatrix<f64>,
    var: &DMatrix<f64>,
    z: &DMatrix<f64>,
    spec: &KernelSpec,
) -> Result<DMatrix<f64>> {
    check_rbf(spec)?;
    check_marginals(mean, var, z, spec)?;
    let (n, m) = (mean.nrows(), z.nrows());
    let dim = spec.input_dim();
    let s4 = spec.variance * spec.variance;
    let mut out = DMatrix::zeros(m, m);
    for i in 0..n {
        for k in 0..m {
            for kp in k..m {
                let mut log_h = 0.0;
                for d in 0..dim {
                    let l2 = spec.lengthscales[d] * spec.lengthscales[d];
                    let t = l2 + 2.0 * var[(i, d)];
                    let u = z[(k, d)] - z[(kp, d)];
                    let v = mean[(i, d)] - 0.5 * (z[(k, d)] + z[(kp, d)]);
                    log_h += 0.5 * (l2 / t).ln() - u * u / (4.0 * l2) - v * v / t;
                }
                let val = s4 * log_h.exp();
                out[(k, kp)] += val;
                if kp != k {
                    out[(kp, k)] += val;
                }
            }
        }
    }
    Ok(out)
}

/// Gradients produced by contracting adjoint matrices against the psi
/// statistics' closed forms.
pub struct PsiGrads {
    /// ∂/∂ marginal means (n×d)
    pub mean: DMatrix<f64>,
    /// ∂/∂ marginal variances, raw (not log) units (n×d)
    pub var: DMatrix<f64>,
    /// ∂/∂ inducing inputs (m×d)
    pub z: DMatrix<f64>,
    /// ∂/∂ log σ²
    pub log_variance: f64,
    /// ∂/∂ log ℓ_d
    pub log_lengthscales: DVector<f64>,
}

/// Backpropagate `psi0_bar·dψ₀ + tr(psi1_barᵀ·dΨ₁) + tr(psi2_barᵀ·dΨ₂)`
/// to the latent marginals, the inducing inputs, and the kernel
/// hyperparameters (log space).
pub fn psi_backprop(
    mean: &DMatrix<f64>,
    var: &DMatrix<f64>,
    z: &DMatrix<f64>,
    spec: &KernelSpec,
    psi1: &DMatrix<f64>,
    psi0_bar: f64,
    psi1_bar: &DMatrix<f64>,
    psi2_bar: &DMatrix<f64>,
) -> Result<PsiGrads> {
    check_rbf(spec)?;
    let (n, m) = (mean.nrows(), z.nrows());
    let dim = spec.input_dim();
    let mut g = PsiGrads {
        mean: DMatrix::zeros(n, dim),
        var: DMatrix::zeros(n, dim),
        z: DMatrix::zeros(m, dim),
        log_variance: psi0_bar * n as f64 * spec.variance,
        log_lengthscales: DVector::zeros(dim),
    };

    // Ψ₁ path
    for i in 0..n {
        for k in 0..m {
            let w = psi1_bar[(i, k)] * psi1[(i, k)];
            if w == 0.0 {
                continue;
            }
            g.log_variance += w; // ∂logΨ₁/∂logσ² = 1
            for d in 0..dim {
                let l2 = spec.lengthscales[d] * spec.lengthscales[d];
                let s = l2 + var[(i, d)];
                let r = mean[(i, d)] - z[(k, d)];
                g.mean[(i, d)] += w * (-r / s);
                g.z[(k, d)] += w * (r / s);
                g.var[(i, d)] += w * (r * r - s) / (2.0 * s * s);
                g.log_lengthscales[d] += w * (1.0 - l2 / s + l2 * r * r / (s * s));
            }
        }
    }

    // Ψ₂ path; accumulate per-example terms in index order
    let s4 = spec.variance * spec.variance;
    for i in 0..n {
        for k in 0..m {
            for kp in 0..m {
                let bar = psi2_bar[(k, kp)];
                if bar == 0.0 {
                    continue;
                }
                let mut log_h = 0.0;
                for d in 0..dim {
                    let l2 = spec.lengthscales[d] * spec.lengthscales[d];
                    let t = l2 + 2.0 * var[(i, d)];
                    let u = z[(k, d)] - z[(kp, d)];
                    let v = mean[(i, d)] - 0.5 * (z[(k, d)] + z[(kp, d)]);
                    log_h += 0.5 * (l2 / t).ln() - u * u / (4.0 * l2) - v * v / t;
                }
                let term = s4 * log_h.exp();
                let w = bar * term;
                g.log_variance += 2.0 * w;
                for d in 0..dim {
                    let l2 = spec.lengthscales[d] * spec.lengthscales[d];
                    let t = l2 + 2.0 * var[(i, d)];
                    let u = z[(k, d)] - z[(kp, d)];
                    let v = mean[(i, d)] - 0.5 * (z[(k, d)] + z[(kp, d)]);
                    g.mean[(i, d)] += w * (-2.0 * v / t);
                    g.var[(i, d)] += w * (-1.0 / t + 2.0 * v * v / (t * t));
                    g.z[(k, d)] += w * (-u / (2.0 * l2) + v / t);
                    g.z[(kp, d)] += w * (u / (2.0 * l2) + v / t);
                    g.log_lengthscales[d] +=
                        w * (1.0 - l2 / t + u * u / (2.0 * l2) + 2.0 * l2 * v * v / (t * t));
                }
            }
        }
    }
    Ok(g)
}

/// Structured statistics: the latent-factor PsiSet plus the spatial cross
/// matrices, combined without ever materializing the full `n×m` objects.
#[derive(Debug, Clone)]
pub struct StructuredPsiSet {
    pub psi0_full: f64,
    /// latent Ψ₁^(ξ), Ψ₂^(ξ)
    pub latent: PsiSet,
    /// per spatial factor: K_fu^(sf)
    pub kfu_s: Vec<DMatrix<f64>>,
    /// per spatial factor: tr K_ff^(sf)
    pub tr_kff_s: Vec<f64>,
}

impl StructuredPsiSet {
    /// Factors of Ψ₁ = Ψ₁^(ξ) ⊗ K_fu^(s1) ⊗ ...
    pub fn psi1_factors(&self) -> Vec<DMatrix<f64>> {
        let mut f = vec![self.latent.psi1.clone()];
        f.extend(self.kfu_s.iter().cloned());
        f
    }

    /// Factors of Ψ₂ = Ψ₂^(ξ) ⊗ (K_uf K_fu)^(s1) ⊗ ...
    pub fn psi2_factors(&self) -> Vec<DMatrix<f64>> {
        let mut f = vec![self.latent.psi2.clone()];
        f.extend(self.kfu_s.iter().map(|k| k.transpose() * k));
        f
    }
}

/// Assemble the structured statistics for training inputs.
pub fn structured_psi(
    mean: &DMatrix<f64>,
    var: &DMatrix<f64>,
    z_xi: &DMatrix<f64>,
    z_s: &[DMatrix<f64>],
    x_s: &[DMatrix<f64>],
    latent_spec: &KernelSpec,
    spatial_specs: &[KernelSpec],
) -> Result<StructuredPsiSet> {
    if z_s.len() != x_s.len() || z_s.len() != spatial_specs.len() {
        return Err(Error::Shape("spatial factor count mismatch".into()));
    }
    let latent = PsiSet {
        psi0: psi0_rbf(mean.nrows(), latent_spec)?,
        psi1: psi1_rbf(mean, var, z_xi, latent_spec)?,
        psi2: psi2_rbf(mean, var, z_xi, latent_spec)?,
    };
    let mut kfu_s = Vec::with_capacity(z_s.len());
    let mut tr_kff_s = Vec::with_capacity(z_s.len());
    for ((spec, z), x) in spatial_specs.iter().zip(z_s.iter()).zip(x_s.iter()) {
        kfu_s.push(kernel_matrix(spec, x, z)?);
        tr_kff_s.push(kernel_diag(spec, x)?.sum());
    }
    let psi0_full = latent.psi0 * tr_kff_s.iter().product::<f64>();
    Ok(StructuredPsiSet {
        psi0_full,
        latent,
        kfu_s,
        tr_kff_s,
    })
}
