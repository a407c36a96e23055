//! The partially-collapsed test bound against the dense oracle, and
//! test-time latent inference behavior.

mod common;

use common::{dense_state, random_instance, InstanceSpec};
use nalgebra::{DMatrix, DVector};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use sgplvm::bound::{optimal_q_u, test_bound_terms, TestCaseContext, TestSideModel};
use sgplvm::infer::{impute, InferConfig, InferenceEngine, TestCase};
use sgplvm::kernels::product_kernel_cross;
use sgplvm::model::join_spatial;
use sgplvm::predict::{Predictor, SpatialPoints};
use sgplvm::psi::{psi1_rbf, psi2_rbf};
use sgplvm_oracle as oracle;

struct TestSetup {
    inst: common::Instance,
    side: TestSideModel,
    xs_star: DMatrix<f64>,
    y_star: DMatrix<f64>,
    k_s_star: DMatrix<f64>,
    ctx: TestCaseContext,
}

fn build_setup(seed: u64, n_obs: usize) -> TestSetup {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spec = InstanceSpec::random(&mut rng, false);
    let inst = random_instance(seed, &spec);
    let model = &inst.model;
    let y_std = model.standardization.apply(&inst.grid.y);
    let state = model.fit_state_standardized(&y_std, &inst.grid.x_s).unwrap();
    let side = TestSideModel::from_workspace(&state.ws);

    let joined = join_spatial(&inst.grid.x_s);
    let n_s = joined.nrows();
    let keep = n_obs.min(n_s);
    let idx = common::random_mask(n_s, keep, &mut rng);
    let xs_star = DMatrix::from_fn(keep, joined.ncols(), |r, c| joined[(idx[r], c)]);
    let y_star = DMatrix::from_fn(keep, model.standardization.mean.len(), |_, _| {
        rng.gen_range(-1.0..1.0)
    });
    let k_s_star = product_kernel_cross(&model.spatial_kernels, &model.z_s, &xs_star).unwrap();
    let svp: f64 = model.spatial_kernels.iter().map(|s| s.variance).product();
    let ctx = TestCaseContext::build(&side, &k_s_star, &y_star, svp).unwrap();
    TestSetup {
        inst,
        side,
        xs_star,
        y_star,
        k_s_star,
        ctx,
    }
}

#[test]
fn test_bound_matches_dense_oracle() {
    for seed in 0..12u64 {
        let setup = build_setup(seed, 5);
        let model = &setup.inst.model;
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 1000);
        let d = model.d_latent();
        let q_mean = DMatrix::from_fn(1, d, |_, _| rng.gen_range(-1.0..1.0));
        let q_var = DMatrix::from_fn(1, d, |_, _| rng.gen_range(0.05..0.6));

        let psi0_xi = model.latent_kernel.variance;
        let psi1 = psi1_rbf(&q_mean, &q_var, &model.z_xi, &model.latent_kernel).unwrap();
        let psi2 = psi2_rbf(&q_mean, &q_var, &model.z_xi, &model.latent_kernel).unwrap();
        let psi1_vec = DVector::from_fn(psi1.ncols(), |k, _| psi1[(0, k)]);
        let (l_struct, _) =
            test_bound_terms(&setup.side, &setup.ctx, psi0_xi, &psi1_vec, &psi2, false);

        // dense route
        let (state, y_std, _) = dense_state(model, &setup.inst.grid);
        let _ = y_std;
        let (u_bar, sigma_u) = (
            setup.side.u_bar.clone(),
            optimal_q_u(
                &model
                    .fit_state_standardized(
                        &model.standardization.apply(&setup.inst.grid.y),
                        &setup.inst.grid.x_s,
                    )
                    .unwrap()
                    .ws,
            )
            .cov_dense(),
        );
        let psi1_star = oracle::kron(&psi1, &setup.k_s_star);
        let psi2_star = oracle::kron(&psi2, &(setup.k_s_star.transpose() * &setup.k_s_star));
        let svp: f64 = model.spatial_kernels.iter().map(|s| s.variance).product();
        let psi0_star = psi0_xi * setup.y_star.nrows() as f64 * svp;
        let l_dense = oracle::dense_test_bound(
            &state.kuu,
            psi0_star,
            &psi1_star,
            &psi2_star,
            &setup.y_star,
            &u_bar,
            &sigma_u,
            model.beta,
            0.0,
        );
        let rel = (l_struct - l_dense).abs() / l_dense.abs().max(1e-9);
        assert!(
            rel < 1e-8,
            "seed {seed}: structured L* {l_struct} vs dense {l_dense} (rel {rel})"
        );
    }
}

#[test]
fn empty_test_case_reduces_to_minus_kl() {
    let setup = build_setup(40, 0);
    let model = &setup.inst.model;
    let d = model.d_latent();
    let q_mean = DMatrix::from_element(1, d, 0.3);
    let q_var = DMatrix::from_element(1, d, 0.2);
    let psi1 = psi1_rbf(&q_mean, &q_var, &model.z_xi, &model.latent_kernel).unwrap();
    let psi2 = psi2_rbf(&q_mean, &q_var, &model.z_xi, &model.latent_kernel).unwrap();
    let psi1_vec = DVector::from_fn(psi1.ncols(), |k, _| psi1[(0, k)]);
    let (terms, _) = test_bound_terms(
        &setup.side,
        &setup.ctx,
        model.latent_kernel.variance,
        &psi1_vec,
        &psi2,
        false,
    );
    assert_eq!(terms, 0.0, "no observations → only the KL remains");
}

#[test]
fn test_bound_gradient_matches_fd() {
    let setup = build_setup(50, 6);
    let model = &setup.inst.model;
    let state = model.fit_state(&setup.inst.grid).unwrap();
    let engine = InferenceEngine::new(model, &state.ws);
    let d = model.d_latent();
    let mut rng = ChaCha8Rng::seed_from_u64(51);
    let params: Vec<f64> = (0..2 * d)
        .map(|i| {
            if i < d {
                rng.gen_range(-0.8..0.8)
            } else {
                rng.gen_range(-2.0..0.0)
            }
        })
        .collect();
    // reuse the engine objective through infer from a single evaluation:
    // finite differences on L* via a tiny local optimizer run is awkward, so
    // expose it through the public objective shape: evaluate by calling
    // infer's internals indirectly with zero iterations is not possible;
    // instead rebuild the objective here.
    let case = TestCase {
        y_star: model.standardization.invert(&setup.y_star),
        xs_star: setup.xs_star.clone(),
        observed_idx: (0..setup.y_star.nrows()).collect(),
        t_star: None,
    };
    let f = |p: &[f64]| engine_objective(&engine, model, &case, p);
    let (_, grad) = f(&params);
    let h = 1e-5;
    for i in 0..2 * d {
        let mut pp = params.clone();
        let mut pm = params.clone();
        pp[i] += h;
        pm[i] -= h;
        let fd = (f(&pp).0 - f(&pm).0) / (2.0 * h);
        let denom = fd.abs().max(grad[i].abs()).max(1e-6);
        assert!(
            (grad[i] - fd).abs() / denom < 1e-4,
            "param {i}: {} vs {fd}",
            grad[i]
        );
    }
}

// L* objective identical to the one inside InferenceEngine::infer_latent,
// reconstructed through public APIs for finite-difference checking.
fn engine_objective(
    engine: &InferenceEngine,
    model: &sgplvm::SgplvmModel,
    case: &TestCase,
    params: &[f64],
) -> (f64, Vec<f64>) {
    let _ = engine;
    let d = model.d_latent();
    let y_std = model.standardization.apply(&case.y_star);
    let k_s_star =
        product_kernel_cross(&model.spatial_kernels, &model.z_s, &case.xs_star).unwrap();
    let state = model
        .fit_state_standardized(
            &DMatrix::zeros(0, 0),
            &[],
        )
        .err();
    let _ = state;
    // build the side model freshly
    let grid_state = model;
    let _ = grid_state;
    // evaluate through the public pieces
    let mean = DMatrix::from_fn(1, d, |_, j| params[j]);
    let var = DMatrix::from_fn(1, d, |_, j| params[d + j].exp());
    let psi1 = psi1_rbf(&mean, &var, &model.z_xi, &model.latent_kernel).unwrap();
    let psi2 = psi2_rbf(&mean, &var, &model.z_xi, &model.latent_kernel).unwrap();
    let psi1_vec = DVector::from_fn(psi1.ncols(), |k, _| psi1[(0, k)]);
    let svp: f64 = model.spatial_kernels.iter().map(|s| s.variance).product();
    let side = engine.side();
    let ctx = TestCaseContext::build(side, &k_s_star, &y_std, svp).unwrap();
    let (value, grads) = test_bound_terms(
        side,
        &ctx,
        model.latent_kernel.variance,
        &psi1_vec,
        &psi2,
        true,
    );
    let (p1_bar, p2_bar) = grads.unwrap();
    let p1m = DMatrix::from_fn(1, p1_bar.len(), |_, k| p1_bar[k]);
    let pg = sgplvm::psi::psi_backprop(
        &mean,
        &var,
        &model.z_xi,
        &model.latent_kernel,
        &psi1,
        0.0,
        &p1m,
        &p2_bar,
    )
    .unwrap();
    // standard normal prior KL
    let mut kl = 0.0;
    let mut grad = vec![0.0; 2 * d];
    for j in 0..d {
        let mu = mean[(0, j)];
        let c = var[(0, j)];
        kl += 0.5 * (mu * mu + c - c.ln() - 1.0);
        grad[j] = pg.mean[(0, j)] - mu;
        grad[d + j] = pg.var[(0, j)] * c - 0.5 * (c - 1.0);
    }
    (value - kl, grad)
}

#[test]
fn latent_grid_scan_peaks_at_generating_latent() {
    // 1-D latent: generate a test observation from the model's own forward
    // prediction at x₀; L* over a grid of delta posteriors peaks near x₀.
    let mut rng = ChaCha8Rng::seed_from_u64(60);
    let spec = InstanceSpec {
        n_xi: 6,
        n_s: (3, 4),
        m_xi: 6,
        m_s: (3, 4),
        d_xi: 1,
        d_y: 1,
        dynamical: false,
        spatial_family: sgplvm::KernelFamily::Matern32,
    };
    let mut inst = random_instance(61, &spec);
    // the property needs the near-noiseless regime and data with real latent
    // signal: redraw Y from the model's own generative process at the
    // current latent means, and concentrate the posterior there
    inst.model.beta = 400.0;
    for v in inst.model.q_latent.log_scale.iter_mut() {
        *v = -6.0;
    }
    {
        let means = inst.model.q_latent.mu.clone();
        let k_xi =
            sgplvm::kernels::kernel_matrix(&inst.model.latent_kernel, &means, &means).unwrap();
        let mut chols = vec![sgplvm::kron::jittered_cholesky(&k_xi, 1e-8).unwrap()];
        for (spec_s, x) in inst
            .model
            .spatial_kernels
            .iter()
            .zip(inst.grid.x_s.iter())
        {
            let k = sgplvm::kernels::kernel_matrix(spec_s, x, x).unwrap();
            chols.push(sgplvm::kron::jittered_cholesky(&k, 1e-10).unwrap());
        }
        let n = inst.grid.y.nrows();
        let eps: Vec<f64> = (0..n)
            .map(|_| sgplvm::io::synth::standard_normal(&mut rng))
            .collect();
        let f = sgplvm::kron::mode_apply(&chols, &eps);
        for i in 0..n {
            inst.grid.y[(i, 0)] = f[i];
        }
        inst.model.standardization = sgplvm::model::Standardization::identity(1);
    }
    let model = &inst.model;
    let state = model.fit_state(&inst.grid).unwrap();
    let predictor = Predictor::new(model, &state.ws);
    let side = TestSideModel::from_workspace(&state.ws);

    let joined = join_spatial(&inst.grid.x_s);
    let x0 = 0.4;
    let x_star = DMatrix::from_element(1, 1, x0);
    let pred = predictor
        .predict_at(&x_star, &SpatialPoints::Joined(joined.clone()), false)
        .unwrap();
    let y_star = pred.mean.clone();

    let k_s_star = product_kernel_cross(&model.spatial_kernels, &model.z_s, &joined).unwrap();
    let svp: f64 = model.spatial_kernels.iter().map(|s| s.variance).product();
    let ctx = TestCaseContext::build(&side, &k_s_star, &y_star, svp).unwrap();
    let mut best = (f64::NEG_INFINITY, f64::NAN);
    let mut x = -2.0;
    while x <= 2.0 {
        let mean = DMatrix::from_element(1, 1, x);
        let var = DMatrix::from_element(1, 1, 1e-6);
        let psi1 = psi1_rbf(&mean, &var, &model.z_xi, &model.latent_kernel).unwrap();
        let psi2 = psi2_rbf(&mean, &var, &model.z_xi, &model.latent_kernel).unwrap();
        let psi1_vec = DVector::from_fn(psi1.ncols(), |k, _| psi1[(0, k)]);
        let (value, _) = test_bound_terms(
            &side,
            &ctx,
            model.latent_kernel.variance,
            &psi1_vec,
            &psi2,
            false,
        );
        if value > best.0 {
            best = (value, x);
        }
        x += 0.05;
    }
    assert!(
        (best.1 - x0).abs() < 0.3,
        "L* peak at {} but data generated at {x0}",
        best.1
    );
}

#[test]
fn zero_observations_recover_prior() {
    let setup = build_setup(70, 0);
    let model = &setup.inst.model;
    let state = model.fit_state(&setup.inst.grid).unwrap();
    let engine = InferenceEngine::new(model, &state.ws);
    let case = TestCase {
        y_star: DMatrix::zeros(0, model.standardization.mean.len()),
        xs_star: DMatrix::zeros(0, join_spatial(&setup.inst.grid.x_s).ncols()),
        observed_idx: vec![],
        t_star: None,
    };
    let cfg = InferConfig {
        max_iters: 400,
        learning_rate: 0.05,
        ..InferConfig::default()
    };
    let inferred = engine.infer_latent(&case, &cfg).unwrap();
    for j in 0..model.d_latent() {
        assert!(inferred.mean[j].abs() < 0.05, "mean {}", inferred.mean[j]);
        assert!(
            (inferred.var[j] - 1.0).abs() < 0.05,
            "var {}",
            inferred.var[j]
        );
    }
}

#[test]
fn inference_deterministic_under_seed() {
    let setup = build_setup(80, 6);
    let model = &setup.inst.model;
    let state = model.fit_state(&setup.inst.grid).unwrap();
    let engine = InferenceEngine::new(model, &state.ws);
    let case = TestCase {
        y_star: model.standardization.invert(&setup.y_star),
        xs_star: setup.xs_star.clone(),
        observed_idx: (0..setup.y_star.nrows()).collect(),
        t_star: None,
    };
    let cfg = InferConfig::default();
    let a = engine.infer_latent(&case, &cfg).unwrap();
    let b = engine.infer_latent(&case, &cfg).unwrap();
    assert_eq!(a.mean, b.mean);
    assert_eq!(a.var, b.var);
    assert_eq!(a.l_star, b.l_star);
}

#[test]
fn imputation_trivial_and_diagnostic_interpolation() {
    let mut rng = ChaCha8Rng::seed_from_u64(90);
    let mut spec = InstanceSpec::random(&mut rng, false);
    spec.d_y = 1;
    let inst = random_instance(91, &spec);
    let model = &inst.model;
    let state = model.fit_state(&inst.grid).unwrap();
    let predictor = Predictor::new(model, &state.ws);
    let engine = InferenceEngine::new(model, &state.ws);
    let joined = join_spatial(&inst.grid.x_s);
    let n_s = joined.nrows();

    // all pixels observed → nothing to impute, pipeline still succeeds
    let case = TestCase {
        y_star: DMatrix::from_fn(n_s, 1, |_, _| rng.gen_range(-1.0..1.0)),
        xs_star: joined.clone(),
        observed_idx: (0..n_s).collect(),
        t_star: None,
    };
    let full = SpatialPoints::Joined(joined.clone());
    let cfg = InferConfig {
        max_iters: 50,
        restarts: 2,
        ..InferConfig::default()
    };
    let imp = impute(model, &predictor, &engine, &case, &full, 4, 0, &cfg).unwrap();
    assert!(imp.missing_idx.is_empty());
    assert_eq!(imp.mean.nrows(), 0);

    // diagnostic: conditioning reproduces observed values at observed points
    let obs_idx: Vec<usize> = (0..n_s / 2).collect();
    let y_obs = DMatrix::from_fn(obs_idx.len(), 1, |r, _| 0.3 * (r as f64) - 0.5);
    let x_star = DMatrix::from_element(1, model.d_latent(), 0.1);
    let pred = predictor.predict_at(&x_star, &full, true).unwrap();
    let (mu, _) = sgplvm::predict::conditional_at(
        &pred.mean,
        pred.cov.as_ref().unwrap(),
        &obs_idx,
        &y_obs,
        &obs_idx,
        0,
    )
    .unwrap();
    for (a, &i) in obs_idx.iter().enumerate() {
        let _ = i;
        assert!(
            (mu[a] - y_obs[(a, 0)]).abs() < 1e-6,
            "conditioned mean must interpolate observations: {} vs {}",
            mu[a],
            y_obs[(a, 0)]
        );
    }
}
