//! Shared helpers for the integration and acceptance suites: random model
//! instances, dense materialization, and small GP-regression baselines.

#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use sgplvm::io::synth::standard_normal;
use sgplvm::kernels::{kernel_matrix, KernelFamily, KernelSpec};
use sgplvm::latent::LatentState;
use sgplvm::model::{initialize, join_spatial, ModelConfig, ObservationGrid, SgplvmModel};
use sgplvm::psi::structured_psi;
use sgplvm_oracle::{kron_all, DenseModelState};

pub struct Instance {
    pub model: SgplvmModel,
    pub grid: ObservationGrid,
}

pub struct InstanceSpec {
    pub n_xi: usize,
    pub n_s: (usize, usize),
    pub m_xi: usize,
    pub m_s: (usize, usize),
    pub d_xi: usize,
    pub d_y: usize,
    pub dynamical: bool,
    pub spatial_family: KernelFamily,
}

impl InstanceSpec {
    pub fn random(rng: &mut impl Rng, dynamical: bool) -> Self {
        InstanceSpec {
            n_xi: rng.gen_range(2..=8),
            n_s: (rng.gen_range(2..=3), rng.gen_range(2..=4)),
            m_xi: 0, // filled below
            m_s: (0, 0),
            d_xi: rng.gen_range(1..=3),
            d_y: rng.gen_range(1..=3),
            dynamical,
            spatial_family: if rng.gen_bool(0.5) {
                KernelFamily::Matern32
            } else {
                KernelFamily::ArdRbf
            },
        }
        .fill_inducing(rng)
    }

    fn fill_inducing(mut self, rng: &mut impl Rng) -> Self {
        self.d_xi = self
            .d_xi
            .min(self.n_xi)
            .min(self.n_s.0 * self.n_s.1 * self.d_y)
            .max(1);
        self.m_xi = rng.gen_range(1..=self.n_xi.min(5));
        self.m_s = (
            rng.gen_range(1..=self.n_s.0),
            rng.gen_range(1..=self.n_s.1),
        );
        self
    }
}

/// A fully randomized, structurally valid model/data pair. Hyperparameters,
/// latent posteriors, and inducing inputs are all perturbed away from their
/// initialization so nothing sits at a special point.
pub fn random_instance(seed: u64, spec: &InstanceSpec) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = spec.n_xi * spec.n_s.0 * spec.n_s.1;
    let y = DMatrix::from_fn(n, spec.d_y, |_, _| rng.gen_range(-1.5..1.5));
    let x1 = DMatrix::from_fn(spec.n_s.0, 1, |i, _| i as f64);
    let x2 = DMatrix::from_fn(spec.n_s.1, 1, |i, _| i as f64);
    let t = if spec.dynamical {
        Some(DVector::from_fn(spec.n_xi, |i, _| {
            i as f64 + rng.gen_range(0.0..0.3)
        }))
    } else {
        None
    };
    let grid = ObservationGrid::new(y, vec![x1, x2], spec.n_xi, t).unwrap();
    let mut cfg = ModelConfig::new(spec.d_xi, spec.m_xi, vec![spec.m_s.0, spec.m_s.1]);
    cfg.seed = seed;
    cfg.dynamical = spec.dynamical;
    cfg.spatial_family = spec.spatial_family;
    let mut model = initialize(&grid, &cfg).unwrap();

    // randomize away from the init
    model.beta = rng.gen_range(0.5..8.0);
    model.latent_kernel.variance = rng.gen_range(0.4..2.0);
    for d in 0..spec.d_xi {
        model.latent_kernel.lengthscales[d] = rng.gen_range(0.6..1.8);
    }
    for spec_s in model.spatial_kernels.iter_mut() {
        spec_s.variance = rng.gen_range(0.4..2.0);
        for d in 0..spec_s.input_dim() {
            spec_s.lengthscales[d] = rng.gen_range(0.8..2.5);
        }
    }
    if let Some(tk) = model.temporal.as_mut() {
        tk.variance = rng.gen_range(0.5..1.5);
        tk.lengthscales[0] = rng.gen_range(1.0..3.0);
    }
    for v in model.q_latent.mu.iter_mut() {
        *v = rng.gen_range(-1.2..1.2);
    }
    for v in model.q_latent.log_scale.iter_mut() {
        *v = rng.gen_range(-2.5..0.3);
    }
    // redraw inducing inputs until K_uu^(ξ) is comfortably conditioned;
    // coalesced points make the whitened psi2 factor blow up and drown
    // finite-difference checks in round-off
    for _ in 0..50 {
        for v in model.z_xi.iter_mut() {
            *v = rng.gen_range(-1.2..1.2);
        }
        let kuu = kernel_matrix(&model.latent_kernel, &model.z_xi, &model.z_xi).unwrap();
        let (_, lam) = sgplvm::kron::eig_sym(&kuu).unwrap();
        if lam[0] / lam[lam.len() - 1] > 1e-5 {
            break;
        }
    }
    Instance { model, grid }
}

/// Dense materialization of the structured state (same psi inputs, all
/// Kronecker combinations expanded).
pub fn dense_state(model: &SgplvmModel, grid: &ObservationGrid) -> (DenseModelState, DMatrix<f64>, f64) {
    let y_std = model.standardization.apply(&grid.y);
    let st = LatentState::evaluate(&model.q_latent, model.temporal.as_ref()).unwrap();
    let psi = structured_psi(
        &st.mean,
        &st.var,
        &model.z_xi,
        &model.z_s,
        &grid.x_s,
        &model.latent_kernel,
        &model.spatial_kernels,
    )
    .unwrap();
    let kuu = kron_all(&model.kuu_factors().unwrap());
    let psi1 = kron_all(&psi.psi1_factors());
    let psi2 = kron_all(&psi.psi2_factors());
    (
        DenseModelState {
            kuu,
            psi0: psi.psi0_full,
            psi1,
            psi2,
        },
        y_std,
        st.kl,
    )
}

/// Exact GP regression on one image: matern-3/2 over the observed pixels,
/// a few fixed-lengthscale candidates scored by marginal likelihood.
pub struct ImageGpBaseline {
    pub mean: DVector<f64>,
    pub var: DVector<f64>,
}

pub fn per_image_gp(
    x_obs: &DMatrix<f64>,
    y_obs: &DVector<f64>,
    x_query: &DMatrix<f64>,
    noise_var: f64,
) -> ImageGpBaseline {
    let d = x_obs.ncols();
    let mut best: Option<(f64, KernelSpec, f64)> = None;
    let y_mean = y_obs.iter().sum::<f64>() / y_obs.len().max(1) as f64;
    let yc = y_obs.map(|v| v - y_mean);
    let y_var = (yc.iter().map(|v| v * v).sum::<f64>() / y_obs.len().max(1) as f64).max(1e-6);
    for ell in [1.0, 1.5, 2.5, 4.0] {
        for sig in [0.5 * y_var, y_var, 2.0 * y_var] {
            let spec = KernelSpec::new(KernelFamily::Matern32, sig, vec![ell; d]).unwrap();
            let mut k = kernel_matrix(&spec, x_obs, x_obs).unwrap();
            for i in 0..k.nrows() {
                k[(i, i)] += noise_var + 1e-8;
            }
            let Some(chol) = nalgebra::Cholesky::new(k) else {
                continue;
            };
            let alpha = chol.solve(&DMatrix::from_column_slice(yc.len(), 1, yc.as_slice()));
            let quad: f64 = yc.iter().zip(alpha.column(0).iter()).map(|(a, b)| a * b).sum();
            let logdet: f64 = chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>() * 2.0;
            let lml = -0.5 * quad - 0.5 * logdet;
            if best.as_ref().map_or(true, |(b, _, _)| lml > *b) {
                best = Some((lml, spec, y_mean));
            }
        }
    }
    let (_, spec, mean_off) = best.expect("at least one candidate factorizes");
    let mut k = kernel_matrix(&spec, x_obs, x_obs).unwrap();
    for i in 0..k.nrows() {
        k[(i, i)] += noise_var + 1e-8;
    }
    let chol = nalgebra::Cholesky::new(k).unwrap();
    let alpha = chol.solve(&DMatrix::from_column_slice(yc.len(), 1, yc.as_slice()));
    let k_qo = kernel_matrix(&spec, x_query, x_obs).unwrap();
    let mean = DVector::from_fn(x_query.nrows(), |q, _| {
        mean_off
            + (0..x_obs.nrows())
                .map(|o| k_qo[(q, o)] * alpha[(o, 0)])
                .sum::<f64>()
    });
    let sol = chol.solve(&k_qo.transpose());
    let var = DVector::from_fn(x_query.nrows(), |q, _| {
        let corr: f64 = (0..x_obs.nrows()).map(|o| k_qo[(q, o)] * sol[(o, q)]).sum();
        (spec.variance - corr).max(0.0) + noise_var
    });
    ImageGpBaseline { mean, var }
}

/// Structured (Kronecker) GP regression over time × space, for the video
/// interpolation baseline: kernel k_t ⊗ k_s1 ⊗ k_s2 fit on training frames,
/// predicting whole frames at the training spatial resolution.
pub struct SpaceTimeGp {
    q_factors: Vec<DMatrix<f64>>,
    inv_eigs: Vec<f64>,
    alpha: DMatrix<f64>,
    t_train: DMatrix<f64>,
    gram_s: Vec<DMatrix<f64>>,
    temporal: KernelSpec,
    spatial: Vec<KernelSpec>,
    noise_var: f64,
    y_mean: Vec<f64>,
}

impl SpaceTimeGp {
    pub fn fit(
        t_train: &DVector<f64>,
        x_s: &[DMatrix<f64>],
        y: &DMatrix<f64>,
        temporal: KernelSpec,
        spatial: Vec<KernelSpec>,
        noise_var: f64,
    ) -> Self {
        let n_t = t_train.len();
        let tm = DMatrix::from_fn(n_t, 1, |i, _| t_train[i]);
        let mut factors = vec![kernel_matrix(&temporal, &tm, &tm).unwrap()];
        let mut gram_s = Vec::new();
        for (spec, x) in spatial.iter().zip(x_s.iter()) {
            let k = kernel_matrix(spec, x, x).unwrap();
            gram_s.push(k.clone());
            factors.push(k);
        }
        let mut q_factors = Vec::new();
        let mut eig_vecs: Vec<Vec<f64>> = Vec::new();
        for f in &factors {
            let (q, l) = sgplvm::kron::eig_sym(f).unwrap();
            q_factors.push(q);
            eig_vecs.push(l.iter().copied().collect());
        }
        let lambdas = sgplvm::kron::kron_vecs(&eig_vecs);
        let inv_eigs: Vec<f64> = lambdas.iter().map(|l| 1.0 / (l.max(0.0) + noise_var)).collect();
        let n = y.nrows();
        let d_y = y.ncols();
        let y_mean: Vec<f64> = (0..d_y)
            .map(|c| y.column(c).iter().sum::<f64>() / n as f64)
            .collect();
        let qt: Vec<DMatrix<f64>> = q_factors.iter().map(|q| q.transpose()).collect();
        let mut alpha = DMatrix::zeros(n, d_y);
        for c in 0..d_y {
            let yc: Vec<f64> = y.column(c).iter().map(|v| v - y_mean[c]).collect();
            let mut w = sgplvm::kron::mode_apply(&qt, &yc);
            for (wi, ie) in w.iter_mut().zip(inv_eigs.iter()) {
                *wi *= ie;
            }
            let a = sgplvm::kron::mode_apply(&q_factors, &w);
            for i in 0..n {
                alpha[(i, c)] = a[i];
            }
        }
        SpaceTimeGp {
            q_factors,
            inv_eigs,
            alpha,
            t_train: tm,
            gram_s,
            temporal,
            spatial,
            noise_var,
            y_mean,
        }
    }

    /// Mean and variance at one test frame time over the full spatial grid.
    pub fn predict_frame(&self, t_star: f64) -> (DMatrix<f64>, DVector<f64>) {
        let sm = DMatrix::from_element(1, 1, t_star);
        let k_t = kernel_matrix(&self.temporal, &sm, &self.t_train).unwrap();
        let n_s: usize = self.gram_s.iter().map(|g| g.nrows()).product();
        let d_y = self.alpha.ncols();
        let mut cross = vec![k_t.clone()];
        cross.extend(self.gram_s.iter().cloned());
        let mut mean = DMatrix::zeros(n_s, d_y);
        for c in 0..d_y {
            let a: Vec<f64> = self.alpha.column(c).iter().copied().collect();
            let m = sgplvm::kron::mode_apply(&cross, &a);
            for i in 0..n_s {
                mean[(i, c)] = m[i] + self.y_mean[c];
            }
        }
        // diag var = k** − Σ_I V²_I/(λ_I+σ²), V = ⊗(cross_f Q_f)
        let v_sq: Vec<DMatrix<f64>> = cross
            .iter()
            .zip(self.q_factors.iter())
            .map(|(c, q)| {
                let v = c * q;
                v.component_mul(&v)
            })
            .collect();
        let sub = sgplvm::kron::mode_apply(&v_sq, &self.inv_eigs);
        let prior =
            self.temporal.variance * self.spatial.iter().map(|s| s.variance).product::<f64>();
        let var = DVector::from_fn(n_s, |i, _| (prior - sub[i]).max(0.0) + self.noise_var);
        (mean, var)
    }
}

/// Random binary mask over `n` points keeping `keep` of them, seeded.
pub fn random_mask(n: usize, keep: usize, rng: &mut impl Rng) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx.truncate(keep);
    idx.sort_unstable();
    idx
}

pub fn gaussian_vector(rng: &mut impl Rng, n: usize) -> DVector<f64> {
    DVector::from_fn(n, |_, _| standard_normal(rng))
}
