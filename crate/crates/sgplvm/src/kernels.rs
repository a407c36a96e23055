//! Covariance functions over latent, spatial, and temporal inputs.

use crate::error::{Error, Result};
use nalgebra::{DMatrix, DVector};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KernelFamily {
    ArdRbf,
    Matern32,
    White,
}

impl KernelFamily {
    pub fn name(&self) -> &'static str {
        match self {
            KernelFamily::ArdRbf => "ard_rbf",
            KernelFamily::Matern32 => "matern32",
            KernelFamily::White => "white",
        }
    }

    pub fn from_name(s: &str) -> Result<Self> {
        match s {
            "ard_rbf" | "rbf" | "gaussian" => Ok(KernelFamily::ArdRbf),
            "matern32" => Ok(KernelFamily::Matern32),
            "white" => Ok(KernelFamily::White),
            other => Err(Error::Config(format!("unknown kernel family `{other}`"))),
        }
    }

    pub fn code(&self) -> f64 {
        match self {
            KernelFamily::ArdRbf => 0.0,
            KernelFamily::Matern32 => 1.0,
            KernelFamily::White => 2.0,
        }
    }

    pub fn from_code(c: f64) -> Result<Self> {
        match c as i64 {
            0 => Ok(KernelFamily::ArdRbf),
            1 => Ok(KernelFamily::Matern32),
            2 => Ok(KernelFamily::White),
            other => Err(Error::Config(format!("unknown kernel code {other}"))),
        }
    }
}

/// Stationary kernel with an output variance and per-dimension lengthscales.
#[derive(Debug, Clone)]
pub struct KernelSpec {
    pub family: KernelFamily,
    pub variance: f64,
    pub lengthscales: DVector<f64>,
}

impl KernelSpec {
    pub fn new(family: KernelFamily, variance: f64, lengthscales: Vec<f64>) -> Result<Self> {
        if variance <= 0.0 {
            return Err(Error::Input(format!("variance must be positive, got {variance}")));
        }
        if lengthscales.is_empty() {
            return Err(Error::Input("lengthscale vector is empty".into()));
        }
        for &l in &lengthscales {
            if l <= 0.0 {
                return Err(Error::Input(format!("lengthscale must be positive, got {l}")));
            }
        }
        Ok(Self {
            family,
            variance,
            lengthscales: DVector::from_vec(lengthscales),
        })
    }

    pub fn input_dim(&self) -> usize {
        self.lengthscales.len()
    }
}

fn check_dims(spec: &KernelSpec, x1: &DMatrix<f64>, x2: &DMatrix<f64>) -> Result<()> {
    if x1.ncols() != spec.input_dim() || x2.ncols() != spec.input_dim() {
        return Err(Error::Shape(format!(
            "kernel over {}-d inputs applied to {}- and {}-column matrices",
            spec.input_dim(),
            x1.ncols(),
            x2.ncols()
        )));
    }
    Ok(())
}

/// Whether two input matrices denote the same point set. The white kernel is
/// an index-identity nugget: it is `σ²I` only when both sides are the same
/// inputs and zero across distinct matrices.
fn same_inputs(x1: &DMatrix<f64>, x2: &DMatrix<f64>) -> bool {
    std::ptr::eq(x1, x2) || (x1.shape() == x2.shape() && x1 == x2)
}

/// Scaled distance pieces shared by the stationary families.
fn scaled_sq_dist(spec: &KernelSpec, a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for d in 0..a.len() {
        let z = (a[d] - b[d]) / spec.lengthscales[d];
        s += z * z;
    }
    s
}

pub fn kernel_value(spec: &KernelSpec, a: &[f64], b: &[f64]) -> f64 {
    match spec.family {
        KernelFamily::ArdRbf => spec.variance * (-0.5 * scaled_sq_dist(spec, a, b)).exp(),
        KernelFamily::Matern32 => {
            let r = scaled_sq_dist(spec, a, b).sqrt();
            let t = 3f64.sqrt() * r;
            spec.variance * (1.0 + t) * (-t).exp()
        }
        KernelFamily::White => 0.0, // handled at matrix level
    }
}

/// `K[i,j] = k(x1_i, x2_j)`.
pub fn kernel_matrix(spec: &KernelSpec, x1: &DMatrix<f64>, x2: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    check_dims(spec, x1, x2)?;
    let (n1, n2) = (x1.nrows(), x2.nrows());
    if spec.family == KernelFamily::White {
        let mut k = DMatrix::zeros(n1, n2);
        if same_inputs(x1, x2) {
            for i in 0..n1.min(n2) {
                k[(i, i)] = spec.variance;
            }
        } else {
            // nugget across distinct matrices: nonzero only where the rows
            // are the same stored point, so a test-time subset of the grid
            // still sees its own pixels
            for i in 0..n1 {
                for j in 0..n2 {
                    if x1.row(i) == x2.row(j) {
                        k[(i, j)] = spec.variance;
                    }
                }
            }
        }
        return Ok(k);
    }
    let mut k = DMatrix::zeros(n1, n2);
    let r1: Vec<Vec<f64>> = (0..n1).map(|i| x1.row(i).iter().copied().collect()).collect();
    let r2: Vec<Vec<f64>> = (0..n2).map(|j| x2.row(j).iter().copied().collect()).collect();
    for i in 0..n1 {
        for j in 0..n2 {
            k[(i, j)] = kernel_value(spec, &r1[i], &r2[j]);
        }
    }
    Ok(k)
}

/// `k(x_i, x_i)` for each row: `σ²` for every supported family.
pub fn kernel_diag(spec: &KernelSpec, x: &DMatrix<f64>) -> Result<DVector<f64>> {
    if x.ncols() != spec.input_dim() {
        return Err(Error::Shape(format!(
            "kernel over {}-d inputs applied to {}-column matrix",
            spec.input_dim(),
            x.ncols()
        )));
    }
    Ok(DVector::from_element(x.nrows(), spec.variance))
}

/// Gradients of the kernel matrix with respect to log-space hyperparameters.
pub struct KernelHyperGrads {
    /// ∂K/∂log σ²
    pub d_log_variance: DMatrix<f64>,
    /// ∂K/∂log ℓ_d, one matrix per input dimension
    pub d_log_lengthscales: Vec<DMatrix<f64>>,
}

pub fn kernel_grad_hyper(
    spec: &KernelSpec,
    x1: &DMatrix<f64>,
    x2: &DMatrix<f64>,
) -> Result<KernelHyperGrads> {
    let k = kernel_matrix(spec, x1, x2)?;
    let (n1, n2) = k.shape();
    let dim = spec.input_dim();
    match spec.family {
        KernelFamily::White => Ok(KernelHyperGrads {
            d_log_variance: k,
            d_log_lengthscales: vec![DMatrix::zeros(n1, n2); dim],
        }),
        KernelFamily::ArdRbf => {
            let mut grads = vec![DMatrix::zeros(n1, n2); dim];
            for i in 0..n1 {
                for j in 0..n2 {
                    for d in 0..dim {
                        let diff = x1[(i, d)] - x2[(j, d)];
                        let l = spec.lengthscales[d];
                        grads[d][(i, j)] = k[(i, j)] * diff * diff / (l * l);
                    }
                }
            }
            Ok(KernelHyperGrads {
                d_log_variance: k,
                d_log_lengthscales: grads,
            })
        }
        KernelFamily::Matern32 => {
            let mut grads = vec![DMatrix::zeros(n1, n2); dim];
            let sqrt3 = 3f64.sqrt();
            for i in 0..n1 {
                for j in 0..n2 {
                    let a: Vec<f64> = x1.row(i).iter().copied().collect();
                    let b: Vec<f64> = x2.row(j).iter().copied().collect();
                    let r = scaled_sq_dist(spec, &a, &b).sqrt();
                    let e = (-sqrt3 * r).exp();
                    for d in 0..dim {
                        let diff = a[d] - b[d];
                        let l = spec.lengthscales[d];
                        // d k / d log ℓ_d = 3 σ² e^{-√3 r} Δ_d² / ℓ_d², smooth at r = 0
                        grads[d][(i, j)] = 3.0 * spec.variance * e * diff * diff / (l * l);
                    }
                }
            }
            Ok(KernelHyperGrads {
                d_log_variance: k,
                d_log_lengthscales: grads,
            })
        }
    }
}

/// Accumulate `∂ tr(K̄ᵀ K(Z,Z)) / ∂Z` for the ARD-RBF family; used when the
/// latent inducing inputs are optimized. `k_bar` need not be symmetric.
pub fn ard_rbf_symmetric_input_grad(
    spec: &KernelSpec,
    z: &DMatrix<f64>,
    k: &DMatrix<f64>,
    k_bar: &DMatrix<f64>,
    out: &mut DMatrix<f64>,
) {
    let m = z.nrows();
    let dim = spec.input_dim();
    for a in 0..m {
        for b in 0..m {
            if a == b {
                continue;
            }
            let w = (k_bar[(a, b)] + k_bar[(b, a)]) * k[(a, b)];
            if w == 0.0 {
                continue;
            }
            for d in 0..dim {
                let l = spec.lengthscales[d];
                out[(a, d)] += w * (-(z[(a, d)] - z[(b, d)]) / (l * l));
            }
        }
    }
}

/// Cross-covariance between arbitrary joined spatial points and a grid of
/// per-factor inducing inputs under the product kernel `Π_f k_f`.
///
/// `x_star` has `Σ_f d_f` columns, split by `dims`; the result column index
/// runs over the inducing grid with the last factor fastest.
pub fn product_kernel_cross(
    specs: &[KernelSpec],
    z_factors: &[DMatrix<f64>],
    x_star: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    let dims: Vec<usize> = specs.iter().map(|s| s.input_dim()).collect();
    let total: usize = dims.iter().sum();
    if x_star.ncols() != total {
        return Err(Error::Shape(format!(
            "joined spatial points have {} columns, expected {total}",
            x_star.ncols()
        )));
    }
    // Per-factor cross blocks against the factor's slice of coordinates.
    let mut blocks = Vec::with_capacity(specs.len());
    let mut offset = 0;
    for (spec, z) in specs.iter().zip(z_factors.iter()) {
        let cols = spec.input_dim();
        let xf = x_star.columns(offset, cols).into_owned();
        // The white kernel has no off-grid extension; cross rows are zero
        // unless the points coincide with the stored inducing inputs.
        let block = if spec.family == KernelFamily::White {
            kernel_matrix(spec, &xf, z)?
        } else {
            kernel_matrix(spec, &xf, z)?
        };
        blocks.push(block);
        offset += cols;
    }
    let n = x_star.nrows();
    let m: usize = z_factors.iter().map(|z| z.nrows()).product();
    let mut out = DMatrix::from_element(n, m, 1.0);
    for p in 0..n {
        let mut row = vec![1.0];
        for block in &blocks {
            let mut next = Vec::with_capacity(row.len() * block.ncols());
            for &r in &row {
                for j in 0..block.ncols() {
                    next.push(r * block[(p, j)]);
                }
            }
            row = next;
        }
        for (j, v) in row.into_iter().enumerate() {
            out[(p, j)] = v;
        }
    }
    Ok(out)
}

/// Diagonal of the product kernel at joined points: `Π_f σ²_f` per row.
pub fn product_kernel_diag(specs: &[KernelSpec], n: usize) -> DVector<f64> {
    let v: f64 = specs.iter().map(|s| s.variance).product();
    DVector::from_element(n, v)
}

/// Product-kernel Gram matrix over joined points (test-side covariance).
pub fn product_kernel_matrix(
    specs: &[KernelSpec],
    x1: &DMatrix<f64>,
    x2: &DMatrix<f64>,
    same: bool,
) -> Result<DMatrix<f64>> {
    let dims: Vec<usize> = specs.iter().map(|s| s.input_dim()).collect();
    let total: usize = dims.iter().sum();
    if x1.ncols() != total || x2.ncols() != total {
        return Err(Error::Shape("joined spatial point dimensions".into()));
    }
    let mut out = DMatrix::from_element(x1.nrows(), x2.nrows(), 1.0);
    let mut offset = 0;
    for spec in specs {
        let cols = spec.input_dim();
        let a = x1.columns(offset, cols).into_owned();
        let b = x2.columns(offset, cols).into_owned();
        let k = if spec.family == KernelFamily::White && same {
            let mut k = DMatrix::zeros(a.nrows(), b.nrows());
            for i in 0..a.nrows().min(b.nrows()) {
                k[(i, i)] = spec.variance;
            }
            k
        } else {
            kernel_matrix(spec, &a, &b)?
        };
        out.component_mul_assign(&k);
        offset += cols;
    }
    Ok(out)
}
