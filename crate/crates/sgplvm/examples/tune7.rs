// scratch harness for tuning the end-to-end imputation comparison
use nalgebra::{DMatrix, DVector};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use sgplvm::infer::{impute, InferConfig, InferenceEngine, TestCase};
use sgplvm::io::synth::{gp_images, GpImagesParams};
use sgplvm::kernels::{KernelFamily, KernelSpec};
use sgplvm::model::{initialize, join_spatial, train, ModelConfig, ObservationGrid, TrainConfig};
use sgplvm::predict::{Predictor, SpatialPoints};

fn rmse_missing(truth: &DMatrix<f64>, imp_mean: &DMatrix<f64>) -> f64 {
    let mut s = 0.0;
    for (a, b) in truth.iter().zip(imp_mean.iter()) { s += (a-b)*(a-b); }
    (s / truth.len() as f64).sqrt()
}

fn main() {
    let t0 = std::time::Instant::now();
    let seed = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(0u64);
    let params = GpImagesParams {
        n_examples: 60, width: 12, height: 12, d_y: 1, d_latent: 2,
        latent_lengthscale: 1.0, spatial_lengthscale: 1.3,
        spatial_family: KernelFamily::Matern32,
        signal_variance: 1.0, noise_std: 0.07,
    };
    let data = gp_images(&params, seed).unwrap();
    let n_s = 144;
    let n_train = 40;
    let n_test = 20;
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 500);

    // split rows
    let y_train = DMatrix::from_fn(n_train * n_s, 1, |r, c| data.grid.y[(r, c)]);
    let grid = ObservationGrid::new(y_train, data.grid.x_s.clone(), n_train, None).unwrap();
    let joined = join_spatial(&grid.x_s);

    let mut results = Vec::new();
    for family in [KernelFamily::Matern32, KernelFamily::White] {
        let mut mc = ModelConfig::new(4, 25, vec![12, 12]);
        mc.spatial_family = family;
        mc.seed = seed;
        mc.spatial_lengthscale_init = Some(2.0);
        let mut model = initialize(&grid, &mc).unwrap();
        let tc = TrainConfig { max_iters: 250, fixed_beta_iters: 60, learning_rate: 0.03, tolerance: 1e-8, ..TrainConfig::default() };
        let tr = train(&mut model, &grid, &tc).unwrap();
        eprintln!("[{:?}] bound {:.1} -> {:.1}, beta {:.1}, ls_spatial {:?} t={:.1}s", family, tr.initial_bound, tr.final_bound, model.beta, model.spatial_kernels[0].lengthscales.as_slice(), t0.elapsed().as_secs_f64());
        let state = model.fit_state(&grid).unwrap();
        let predictor = Predictor::new(&model, &state.ws);
        let engine = InferenceEngine::new(&model, &state.ws);
        let icfg = InferConfig { max_iters: 150, restarts: 3, learning_rate: 0.05, tolerance: 1e-7, seed };
        let full = SpatialPoints::Joined(joined.clone());

        let mut rmses = Vec::new();
        let mut rng_mask = ChaCha8Rng::seed_from_u64(seed + 900);
        for case_i in 0..n_test {
            let base = (n_train + case_i) * n_s;
            let mut idx: Vec<usize> = (0..n_s).collect();
            idx.shuffle(&mut rng_mask);
            let observed: Vec<usize> = { let mut o = idx[..n_s/2].to_vec(); o.sort_unstable(); o };
            let missing: Vec<usize> = (0..n_s).filter(|p| !observed.contains(p)).collect();
            let y_star = DMatrix::from_fn(observed.len(), 1, |r, _| data.grid.y[(base + observed[r], 0)]);
            let xs_star = DMatrix::from_fn(observed.len(), 2, |r, c| joined[(observed[r], c)]);
            let case = TestCase { y_star, xs_star, observed_idx: observed, t_star: None };
            let imp = impute(&model, &predictor, &engine, &case, &full, 16, seed + case_i as u64, &icfg).unwrap();
            let truth = DMatrix::from_fn(missing.len(), 1, |r, _| data.grid.y[(base + missing[r], 0)]);
            rmses.push(rmse_missing(&truth, &imp.mean));
        }
        let mean: f64 = rmses.iter().sum::<f64>() / rmses.len() as f64;
        eprintln!("[{:?}] mean RMSE {:.4}  t={:.1}s", family, mean, t0.elapsed().as_secs_f64());
        results.push(mean);
        let _ = &mut rng;
    }

    // per-image GP baseline
    let mut rng_mask = ChaCha8Rng::seed_from_u64(seed + 900);
    let mut rmses = Vec::new();
    for case_i in 0..n_test {
        let base = (n_train + case_i) * n_s;
        let mut idx: Vec<usize> = (0..n_s).collect();
        idx.shuffle(&mut rng_mask);
        let observed: Vec<usize> = { let mut o = idx[..n_s/2].to_vec(); o.sort_unstable(); o };
        let missing: Vec<usize> = (0..n_s).filter(|p| !observed.contains(p)).collect();
        let x_obs = DMatrix::from_fn(observed.len(), 2, |r, c| joined[(observed[r], c)]);
        let y_obs = DVector::from_fn(observed.len(), |r, _| data.grid.y[(base + observed[r], 0)]);
        let x_q = DMatrix::from_fn(missing.len(), 2, |r, c| joined[(missing[r], c)]);
        let b = per_image_gp(&x_obs, &y_obs, &x_q, 0.07 * 0.07);
        let truth = DVector::from_fn(missing.len(), |r, _| data.grid.y[(base + missing[r], 0)]);
        let mut s = 0.0;
        for (a, v) in truth.iter().zip(b.mean.iter()) { s += (a - v) * (a - v); }
        rmses.push((s / truth.len() as f64).sqrt());
    }
    let mean: f64 = rmses.iter().sum::<f64>() / rmses.len() as f64;
    eprintln!("[PerImageGP] mean RMSE {:.4}", mean);
    println!("seed {seed}: sgplvm {:.4} white {:.4} perimage {:.4}  wall {:.1}s", results[0], results[1], mean, t0.elapsed().as_secs_f64());
}

// inline copy of the test-helper baseline
struct ImageGpBaseline { mean: DVector<f64> }
fn per_image_gp(x_obs: &DMatrix<f64>, y_obs: &DVector<f64>, x_query: &DMatrix<f64>, noise_var: f64) -> ImageGpBaseline {
    let d = x_obs.ncols();
    let y_mean = y_obs.iter().sum::<f64>() / y_obs.len().max(1) as f64;
    let yc = y_obs.map(|v| v - y_mean);
    let y_var = (yc.iter().map(|v| v * v).sum::<f64>() / y_obs.len().max(1) as f64).max(1e-6);
    let mut best: Option<(f64, KernelSpec)> = None;
    for ell in [1.0, 1.5, 2.5, 4.0] {
        for sig in [0.5 * y_var, y_var, 2.0 * y_var] {
            let spec = KernelSpec::new(KernelFamily::Matern32, sig, vec![ell; d]).unwrap();
            let mut k = sgplvm::kernels::kernel_matrix(&spec, x_obs, x_obs).unwrap();
            for i in 0..k.nrows() { k[(i, i)] += noise_var + 1e-8; }
            let Some(chol) = nalgebra::Cholesky::new(k) else { continue };
            let alpha = chol.solve(&DMatrix::from_column_slice(yc.len(), 1, yc.as_slice()));
            let quad: f64 = yc.iter().zip(alpha.column(0).iter()).map(|(a, b)| a * b).sum();
            let logdet: f64 = chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>() * 2.0;
            let lml = -0.5 * quad - 0.5 * logdet;
            if best.as_ref().map_or(true, |(b, _)| lml > *b) { best = Some((lml, spec)); }
        }
    }
    let (_, spec) = best.unwrap();
    let mut k = sgplvm::kernels::kernel_matrix(&spec, x_obs, x_obs).unwrap();
    for i in 0..k.nrows() { k[(i, i)] += noise_var + 1e-8; }
    let chol = nalgebra::Cholesky::new(k).unwrap();
    let alpha = chol.solve(&DMatrix::from_column_slice(yc.len(), 1, yc.as_slice()));
    let k_qo = sgplvm::kernels::kernel_matrix(&spec, x_query, x_obs).unwrap();
    let mean = DVector::from_fn(x_query.nrows(), |q, _| {
        y_mean + (0..x_obs.nrows()).map(|o| k_qo[(q, o)] * alpha[(o, 0)]).sum::<f64>()
    });
    ImageGpBaseline { mean }
}
