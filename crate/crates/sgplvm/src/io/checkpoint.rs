//! Model persistence. A checkpoint is a binary MatrixFile holding every
//! parameter plus the `Ψ₁ᵀY` sufficient statistic, so prediction and
//! test-time inference need no access to the training data.

use crate::error::{Error, Result};
use crate::io::matrix_file::MatrixFile;
use crate::kernels::{KernelFamily, KernelSpec};
use crate::latent::{LatentMode, VariationalLatent};
use crate::model::{SgplvmModel, Standardization};
use nalgebra::{DMatrix, DVector};
use std::path::Path;

pub const CHECKPOINT_VERSION: f64 = 1.0;
/// ordering-convention tag: 1 = latent-major rows, spatial fastest
pub const ORDER_XI_MAJOR: f64 = 1.0;

pub struct CheckpointData {
    pub model: SgplvmModel,
    pub x_s: Vec<DMatrix<f64>>,
    pub psi1t_y: DMatrix<f64>,
    pub tr_yy: f64,
}

fn kernel_row(spec: &KernelSpec) -> DMatrix<f64> {
    let d = spec.input_dim();
    DMatrix::from_fn(1, 2 + d, |_, c| match c {
        0 => spec.family.code(),
        1 => spec.variance,
        _ => spec.lengthscales[c - 2],
    })
}

fn kernel_from_row(row: &DMatrix<f64>) -> Result<KernelSpec> {
    if row.ncols() < 3 {
        return Err(Error::Parse {
            file: "checkpoint".into(),
            message: "kernel row too short".into(),
        });
    }
    let family = KernelFamily::from_code(row[(0, 0)])?;
    let ls: Vec<f64> = (2..row.ncols()).map(|c| row[(0, c)]).collect();
    KernelSpec::new(family, row[(0, 1)], ls)
}

pub fn save_checkpoint(
    path: &Path,
    model: &SgplvmModel,
    x_s: &[DMatrix<f64>],
    psi1t_y: &DMatrix<f64>,
    tr_yy: f64,
) -> Result<()> {
    let mut f = MatrixFile::new();
    let dynamical = matches!(model.q_latent.mode, LatentMode::Dynamical);
    let meta = DMatrix::from_fn(1, 8, |_, c| match c {
        0 => CHECKPOINT_VERSION,
        1 => ORDER_XI_MAJOR,
        2 => if dynamical { 1.0 } else { 0.0 },
        3 => model.spatial_kernels.len() as f64,
        4 => psi1t_y.ncols() as f64,
        5 => model.n_xi() as f64,
        6 => if model.optimize_inducing { 1.0 } else { 0.0 },
        _ => if model.tie_spatial_lengthscales { 1.0 } else { 0.0 },
    });
    f.push("meta", meta);
    f.push("latent_kernel", kernel_row(&model.latent_kernel));
    for (i, spec) in model.spatial_kernels.iter().enumerate() {
        f.push(&format!("spatial_kernel_{i}"), kernel_row(spec));
    }
    if let Some(t) = &model.temporal {
        f.push("temporal_kernel", kernel_row(t));
    }
    f.push("log_beta", DMatrix::from_element(1, 1, model.beta.ln()));
    f.push("z_xi", model.z_xi.clone());
    for (i, z) in model.z_s.iter().enumerate() {
        f.push(&format!("z_s_{i}"), z.clone());
    }
    for (i, x) in x_s.iter().enumerate() {
        f.push(&format!("x_s_{i}"), x.clone());
    }
    f.push("q_mu", model.q_latent.mu.clone());
    f.push("q_log_scale", model.q_latent.log_scale.clone());
    if let Some(t) = &model.q_latent.timestamps {
        f.push("timestamps", DMatrix::from_fn(t.len(), 1, |i, _| t[i]));
    }
    f.push(
        "standardize_mean",
        DMatrix::from_fn(1, model.standardization.mean.len(), |_, c| {
            model.standardization.mean[c]
        }),
    );
    f.push(
        "standardize_scale",
        DMatrix::from_fn(1, model.standardization.scale.len(), |_, c| {
            model.standardization.scale[c]
        }),
    );
    f.push("psi1t_y", psi1t_y.clone());
    f.push("tr_yy", DMatrix::from_element(1, 1, tr_yy));
    f.save_binary(path)
}

pub fn load_checkpoint(path: &Path) -> Result<CheckpointData> {
    let f = MatrixFile::load_binary(path)?;
    let meta = f.get("meta")?;
    if meta[(0, 0)] != CHECKPOINT_VERSION {
        return Err(Error::Parse {
            file: path.display().to_string(),
            message: format!("unsupported checkpoint version {}", meta[(0, 0)]),
        });
    }
    if meta[(0, 1)] != ORDER_XI_MAJOR {
        return Err(Error::Parse {
            file: path.display().to_string(),
            message: "unknown row-ordering convention tag".into(),
        });
    }
    let dynamical = meta[(0, 2)] != 0.0;
    let n_spatial = meta[(0, 3)] as usize;
    let latent_kernel = kernel_from_row(f.get("latent_kernel")?)?;
    let mut spatial_kernels = Vec::with_capacity(n_spatial);
    let mut z_s = Vec::with_capacity(n_spatial);
    let mut x_s = Vec::with_capacity(n_spatial);
    for i in 0..n_spatial {
        spatial_kernels.push(kernel_from_row(f.get(&format!("spatial_kernel_{i}"))?)?);
        z_s.push(f.get(&format!("z_s_{i}"))?.clone());
        x_s.push(f.get(&format!("x_s_{i}"))?.clone());
    }
    let temporal = if dynamical {
        Some(kernel_from_row(f.get("temporal_kernel")?)?)
    } else {
        None
    };
    let beta = f.get("log_beta")?[(0, 0)].exp();
    let z_xi = f.get("z_xi")?.clone();
    let q_mu = f.get("q_mu")?.clone();
    let q_log_scale = f.get("q_log_scale")?.clone();
    let q_latent = if dynamical {
        let ts = f.get("timestamps")?;
        let t = DVector::from_fn(ts.nrows(), |i, _| ts[(i, 0)]);
        VariationalLatent::new_dynamical(q_mu, q_log_scale, t)?
    } else {
        VariationalLatent::new_iid(q_mu, q_log_scale)?
    };
    let standardization = Standardization {
        mean: f.get("standardize_mean")?.iter().copied().collect(),
        scale: f.get("standardize_scale")?.iter().copied().collect(),
    };
    let model = SgplvmModel {
        latent_kernel,
        spatial_kernels,
        temporal,
        beta,
        z_xi,
        z_s,
        q_latent,
        standardization,
        tie_spatial_lengthscales: meta[(0, 7)] != 0.0,
        optimize_inducing: meta[(0, 6)] != 0.0,
    };
    Ok(CheckpointData {
        model,
        x_s,
        psi1t_y: f.get("psi1t_y")?.clone(),
        tr_yy: f.get("tr_yy")?[(0, 0)],
    })
}
