//! Synthetic datasets drawn from the model's own generative process:
//! latent points (iid or a smooth temporal GP), a product spatial kernel,
//! and additive observation noise. Desk-scale stand-ins for external image
//! and video corpora.

use crate::error::Result;
use crate::kernels::{kernel_matrix, KernelFamily, KernelSpec};
use crate::kron::{jittered_cholesky, mode_apply};
use crate::model::ObservationGrid;
use nalgebra::{DMatrix, DVector};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

pub fn standard_normal(rng: &mut impl Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

#[derive(Debug, Clone)]
pub struct GpImagesParams {
    pub n_examples: usize,
    pub width: usize,
    pub height: usize,
    pub d_y: usize,
    pub d_latent: usize,
    pub latent_lengthscale: f64,
    pub spatial_lengthscale: f64,
    pub spatial_family: KernelFamily,
    pub signal_variance: f64,
    pub noise_std: f64,
}

impl Default for GpImagesParams {
    fn default() -> Self {
        Self {
            n_examples: 40,
            width: 12,
            height: 12,
            d_y: 1,
            d_latent: 2,
            latent_lengthscale: 1.0,
            spatial_lengthscale: 1.5,
            spatial_family: KernelFamily::Matern32,
            signal_variance: 1.0,
            noise_std: 0.05,
        }
    }
}

pub struct SynthData {
    pub grid: ObservationGrid,
    /// generating latent coordinates (n_ξ×d_ξ)
    pub latents: DMatrix<f64>,
    /// noise-free function draw, same layout as grid.y
    pub noiseless: DMatrix<f64>,
}

/// Unit-spaced integer pixel centers.
pub fn pixel_grid(n: usize) -> DMatrix<f64> {
    DMatrix::from_fn(n, 1, |i, _| i as f64)
}

fn draw_structured(
    latents: &DMatrix<f64>,
    latent_spec: &KernelSpec,
    spatial_factors: &[DMatrix<f64>],
    spatial_specs: &[KernelSpec],
    d_y: usize,
    noise_std: f64,
    rng: &mut impl Rng,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let n_xi = latents.nrows();
    let k_xi = kernel_matrix(latent_spec, latents, latents)?;
    let mut chols = vec![jittered_cholesky(&k_xi, 1e-8)?];
    for (spec, x) in spatial_specs.iter().zip(spatial_factors.iter()) {
        let k = kernel_matrix(spec, x, x)?;
        chols.push(jittered_cholesky(&k, 1e-10)?);
    }
    let n: usize = n_xi * spatial_factors.iter().map(|x| x.nrows()).product::<usize>();
    let mut noiseless = DMatrix::zeros(n, d_y);
    let mut y = DMatrix::zeros(n, d_y);
    for c in 0..d_y {
        let eps: Vec<f64> = (0..n).map(|_| standard_normal(rng)).collect();
        let f = mode_apply(&chols, &eps);
        for i in 0..n {
            noiseless[(i, c)] = f[i];
            y[(i, c)] = f[i] + noise_std * standard_normal(rng);
        }
    }
    Ok((y, noiseless))
}

/// Independent latent points, spatially-correlated images.
pub fn gp_images(params: &GpImagesParams, seed: u64) -> Result<SynthData> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let latents = DMatrix::from_fn(params.n_examples, params.d_latent, |_, _| {
        standard_normal(&mut rng)
    });
    let latent_spec = KernelSpec::new(
        KernelFamily::ArdRbf,
        params.signal_variance,
        vec![params.latent_lengthscale; params.d_latent],
    )?;
    let x1 = pixel_grid(params.height);
    let x2 = pixel_grid(params.width);
    let s1 = KernelSpec::new(params.spatial_family, 1.0, vec![params.spatial_lengthscale])?;
    let s2 = s1.clone();
    let (y, noiseless) = draw_structured(
        &latents,
        &latent_spec,
        &[x1.clone(), x2.clone()],
        &[s1, s2],
        params.d_y,
        params.noise_std,
        &mut rng,
    )?;
    let grid = ObservationGrid::new(y, vec![x1, x2], params.n_examples, None)?;
    Ok(SynthData {
        grid,
        latents,
        noiseless,
    })
}

#[derive(Debug, Clone)]
pub struct DynamicVideoParams {
    pub n_frames: usize,
    pub width: usize,
    pub height: usize,
    pub d_y: usize,
    pub d_latent: usize,
    pub temporal_lengthscale: f64,
    pub latent_lengthscale: f64,
    pub spatial_lengthscale: f64,
    pub signal_variance: f64,
    pub noise_std: f64,
}

impl Default for DynamicVideoParams {
    fn default() -> Self {
        Self {
            n_frames: 60,
            width: 16,
            height: 16,
            d_y: 1,
            d_latent: 2,
            temporal_lengthscale: 6.0,
            latent_lengthscale: 1.0,
            spatial_lengthscale: 2.0,
            signal_variance: 1.0,
            noise_std: 0.05,
        }
    }
}

/// Latents follow a smooth temporal GP over unit-spaced frame times.
pub fn dynamic_video(params: &DynamicVideoParams, seed: u64) -> Result<SynthData> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let t = DVector::from_fn(params.n_frames, |i, _| i as f64);
    let tm = DMatrix::from_fn(params.n_frames, 1, |i, _| t[i]);
    let temporal = KernelSpec::new(
        KernelFamily::ArdRbf,
        1.0,
        vec![params.temporal_lengthscale],
    )?;
    let kt = kernel_matrix(&temporal, &tm, &tm)?;
    let lt = jittered_cholesky(&kt, 1e-8)?;
    let mut latents = DMatrix::zeros(params.n_frames, params.d_latent);
    for j in 0..params.d_latent {
        let eps = DVector::from_fn(params.n_frames, |_, _| standard_normal(&mut rng));
        let x = &lt * eps;
        for i in 0..params.n_frames {
            latents[(i, j)] = x[i];
        }
    }
    let latent_spec = KernelSpec::new(
        KernelFamily::ArdRbf,
        params.signal_variance,
        vec![params.latent_lengthscale; params.d_latent],
    )?;
    let x1 = pixel_grid(params.height);
    let x2 = pixel_grid(params.width);
    let s1 = KernelSpec::new(KernelFamily::Matern32, 1.0, vec![params.spatial_lengthscale])?;
    let s2 = s1.clone();
    let (y, noiseless) = draw_structured(
        &latents,
        &latent_spec,
        &[x1.clone(), x2.clone()],
        &[s1, s2],
        params.d_y,
        params.noise_std,
        &mut rng,
    )?;
    let grid = ObservationGrid::new(y, vec![x1, x2], params.n_frames, Some(t))?;
    Ok(SynthData {
        grid,
        latents,
        noiseless,
    })
}
