// scratch harness for the dynamical interpolation comparison
use nalgebra::{DMatrix, DVector};
use sgplvm::io::synth::{dynamic_video, DynamicVideoParams};
use sgplvm::kernels::{kernel_matrix, KernelFamily, KernelSpec};
use sgplvm::model::{initialize, train, ModelConfig, ObservationGrid, TrainConfig};
use sgplvm::predict::{dynamical_latent_at, Predictor, SpatialPoints};

const LOG_2PI: f64 = 1.8378770664093453;

fn frame_mnlp(truth: &[f64], mean: &[f64], var: &[f64]) -> f64 {
    let mut nlps: Vec<f64> = truth
        .iter()
        .zip(mean.iter().zip(var.iter()))
        .map(|(t, (m, v))| {
            let vv = v.max(1e-12);
            0.5 * (LOG_2PI + vv.ln() + (t - m) * (t - m) / vv)
        })
        .collect();
    nlps.sort_by(f64::total_cmp);
    let n = nlps.len();
    if n % 2 == 1 { nlps[n / 2] } else { 0.5 * (nlps[n / 2 - 1] + nlps[n / 2]) }
}

fn main() {
    let t0 = std::time::Instant::now();
    let args: Vec<String> = std::env::args().collect();
    let seed: u64 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(0);
    let t_ls_gen: f64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(5.0);
    let iters: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(250);
    let lr: f64 = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(0.03);
    let noise_gen: f64 = args.get(5).and_then(|s| s.parse().ok()).unwrap_or(0.05);
    let params = DynamicVideoParams {
        n_frames: 60, width: 16, height: 16, d_y: 1, d_latent: 2,
        temporal_lengthscale: t_ls_gen, latent_lengthscale: 1.0,
        spatial_lengthscale: 2.0, signal_variance: 1.0, noise_std: noise_gen,
    };
    let data = dynamic_video(&params, seed).unwrap();
    let n_s = 256;
    let t_all = data.grid.timestamps.as_ref().unwrap();
    let train_idx: Vec<usize> = (0..60).step_by(2).collect();
    let test_idx: Vec<usize> = (0..60).skip(1).step_by(2).collect();

    let y_train = DMatrix::from_fn(train_idx.len() * n_s, 1, |r, c| {
        data.grid.y[(train_idx[r / n_s] * n_s + r % n_s, c)]
    });
    let t_train = DVector::from_fn(train_idx.len(), |i, _| t_all[train_idx[i]]);
    let grid = ObservationGrid::new(y_train.clone(), data.grid.x_s.clone(), train_idx.len(), Some(t_train.clone())).unwrap();

    // dynamical SGPLVM
    let mut mc = ModelConfig::new(3, 24, vec![16, 16]);
    mc.dynamical = true;
    mc.seed = seed;
    mc.spatial_lengthscale_init = Some(2.5);
    mc.temporal_lengthscale_init = Some(4.0);
    let mut model = initialize(&grid, &mc).unwrap();
    let tc = TrainConfig { max_iters: iters, fixed_beta_iters: 60, learning_rate: lr, tolerance: 1e-9, ..TrainConfig::default() };
    let tr = train(&mut model, &grid, &tc).unwrap();
    eprintln!("bound {:.1} -> {:.1}, beta {:.1}, t_ls {:.2}, t={:.1}s", tr.initial_bound, tr.final_bound, model.beta, model.temporal.as_ref().unwrap().lengthscales[0], t0.elapsed().as_secs_f64());
    let state = model.fit_state(&grid).unwrap();
    let predictor = Predictor::new(&model, &state.ws);
    let spatial = SpatialPoints::Factored(grid.x_s.clone());

    let mut sg_mnlps = Vec::new();
    let mut sg_rmses: Vec<f64> = Vec::new();
    for &fi in &test_idx {
        let t_star = t_all[fi];
        let (qm, qv) = dynamical_latent_at(&model, &[t_star]).unwrap();
        let qm = DVector::from_fn(model.d_latent(), |j, _| qm[(0, j)]);
        let qv = DVector::from_fn(model.d_latent(), |j, _| qv[(0, j)]);
        let mean_std = predictor.predict_marginal_mean(&qm, &qv, &spatial).unwrap();
        let mix = predictor.predict_mixture(&qm, &qv, &spatial, 16, seed + fi as u64, false).unwrap();
        let mut second = vec![0.0; n_s];
        let mut first = vec![0.0; n_s];
        for comp in &mix.components {
            for p in 0..n_s {
                first[p] += comp.mean[(p, 0)] / 16.0;
                second[p] += (comp.var[p] + comp.mean[(p, 0)] * comp.mean[(p, 0)]) / 16.0;
            }
        }
        // variance in standardized units + noise, then destandardize
        let scale2 = model.standardization.scale[0] * model.standardization.scale[0];
        let mean_raw = model.standardization.invert(&mean_std);
        let var_raw: Vec<f64> = (0..n_s)
            .map(|p| ((second[p] - first[p] * first[p]).max(0.0) + 1.0 / model.beta) * scale2)
            .collect();
        let truth: Vec<f64> = (0..n_s).map(|p| data.grid.y[(fi * n_s + p, 0)]).collect();
        let mean_v: Vec<f64> = (0..n_s).map(|p| mean_raw[(p, 0)]).collect();
        sg_mnlps.push(frame_mnlp(&truth, &mean_v, &var_raw));
        let sse: f64 = truth.iter().zip(mean_v.iter()).map(|(a, b)| (a - b) * (a - b)).sum();
        sg_rmses.push((sse / n_s as f64).sqrt());
    }
    let sg_mean: f64 = sg_mnlps.iter().sum::<f64>() / sg_mnlps.len() as f64;
    let sg_rmse: f64 = sg_rmses.iter().sum::<f64>() / sg_rmses.len() as f64;
    eprintln!("sgplvm mean MNLP {:.4} rmse {:.4} t={:.1}s", sg_mean, sg_rmse, t0.elapsed().as_secs_f64());

    // space-time kron GP baseline with LML model selection
    let mut best: Option<(f64, f64, f64, f64)> = None; // (lml, t_ls, s_ls, noise)
    for t_ls in [2.0, 4.0, 8.0] {
        for s_ls in [1.5, 2.5, 4.0] {
            for noise in [0.01, 0.05, 0.2] {
                let lml = kron_gp_lml(&t_train, &grid.x_s, &y_train, t_ls, s_ls, noise);
                if best.map_or(true, |(b, _, _, _)| lml > b) {
                    best = Some((lml, t_ls, s_ls, noise));
                }
            }
        }
    }
    let (_, t_ls, s_ls, noise) = best.unwrap();
    eprintln!("baseline hypers: t_ls {t_ls} s_ls {s_ls} noise {noise}");
    let temporal = KernelSpec::new(KernelFamily::ArdRbf, 1.0, vec![t_ls]).unwrap();
    let s1 = KernelSpec::new(KernelFamily::Matern32, 1.0, vec![s_ls]).unwrap();
    let gp = SpaceTimeGpLocal::fit(&t_train, &grid.x_s, &y_train, temporal, vec![s1.clone(), s1], noise);
    let mut gp_mnlps = Vec::new();
    let mut gp_rmses: Vec<f64> = Vec::new();
    for &fi in &test_idx {
        let (mean, var) = gp.predict_frame(t_all[fi]);
        let truth: Vec<f64> = (0..n_s).map(|p| data.grid.y[(fi * n_s + p, 0)]).collect();
        let mean_v: Vec<f64> = (0..n_s).map(|p| mean[(p, 0)]).collect();
        let var_v: Vec<f64> = (0..n_s).map(|p| var[p]).collect();
        gp_mnlps.push(frame_mnlp(&truth, &mean_v, &var_v));
        let sse: f64 = truth.iter().zip(mean_v.iter()).map(|(a, b)| (a - b) * (a - b)).sum();
        gp_rmses.push((sse / n_s as f64).sqrt());
    }
    let gp_mean: f64 = gp_mnlps.iter().sum::<f64>() / gp_mnlps.len() as f64;
    let gp_rmse: f64 = gp_rmses.iter().sum::<f64>() / gp_rmses.len() as f64;
    eprintln!("baseline rmse {:.4}", gp_rmse);
    println!("seed {seed}: sgplvm MNLP {sg_mean:.4} vs spacetime GP {gp_mean:.4}  wall {:.1}s", t0.elapsed().as_secs_f64());
}

fn kron_gp_lml(t: &DVector<f64>, x_s: &[DMatrix<f64>], y: &DMatrix<f64>, t_ls: f64, s_ls: f64, noise: f64) -> f64 {
    let temporal = KernelSpec::new(KernelFamily::ArdRbf, 1.0, vec![t_ls]).unwrap();
    let s1 = KernelSpec::new(KernelFamily::Matern32, 1.0, vec![s_ls]).unwrap();
    let tm = DMatrix::from_fn(t.len(), 1, |i, _| t[i]);
    let mut factors = vec![kernel_matrix(&temporal, &tm, &tm).unwrap()];
    for x in x_s {
        factors.push(kernel_matrix(&s1, x, x).unwrap());
    }
    let mut qs = Vec::new();
    let mut eigs: Vec<Vec<f64>> = Vec::new();
    for f in &factors {
        let (q, l) = sgplvm::kron::eig_sym(f).unwrap();
        qs.push(q.transpose());
        eigs.push(l.iter().copied().collect());
    }
    let lam = sgplvm::kron::kron_vecs(&eigs);
    let n = y.nrows();
    let ymean = y.iter().sum::<f64>() / n as f64;
    let yc: Vec<f64> = y.iter().map(|v| v - ymean).collect();
    let w = sgplvm::kron::mode_apply(&qs, &yc);
    let mut quad = 0.0;
    let mut logdet = 0.0;
    for i in 0..n {
        let d = lam[i].max(0.0) + noise;
        quad += w[i] * w[i] / d;
        logdet += d.ln();
    }
    -0.5 * (quad + logdet + n as f64 * LOG_2PI)
}

// local copy of the test-helper baseline
struct SpaceTimeGpLocal {
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

impl SpaceTimeGpLocal {
    fn fit(t_train: &DVector<f64>, x_s: &[DMatrix<f64>], y: &DMatrix<f64>, temporal: KernelSpec, spatial: Vec<KernelSpec>, noise_var: f64) -> Self {
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
        let y_mean: Vec<f64> = (0..d_y).map(|c| y.column(c).iter().sum::<f64>() / n as f64).collect();
        let qt: Vec<DMatrix<f64>> = q_factors.iter().map(|q| q.transpose()).collect();
        let mut alpha = DMatrix::zeros(n, d_y);
        for c in 0..d_y {
            let yc: Vec<f64> = y.column(c).iter().map(|v| v - y_mean[c]).collect();
            let mut w = sgplvm::kron::mode_apply(&qt, &yc);
            for (wi, ie) in w.iter_mut().zip(inv_eigs.iter()) { *wi *= ie; }
            let a = sgplvm::kron::mode_apply(&q_factors, &w);
            for i in 0..n { alpha[(i, c)] = a[i]; }
        }
        SpaceTimeGpLocal { q_factors, inv_eigs, alpha, t_train: tm, gram_s, temporal, spatial, noise_var, y_mean }
    }

    fn predict_frame(&self, t_star: f64) -> (DMatrix<f64>, DVector<f64>) {
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
            for i in 0..n_s { mean[(i, c)] = m[i] + self.y_mean[c]; }
        }
        let v_sq: Vec<DMatrix<f64>> = cross.iter().zip(self.q_factors.iter()).map(|(c, q)| { let v = c * q; v.component_mul(&v) }).collect();
        let sub = sgplvm::kron::mode_apply(&v_sq, &self.inv_eigs);
        let prior = self.temporal.variance * self.spatial.iter().map(|s| s.variance).product::<f64>();
        let var = DVector::from_fn(n_s, |i, _| (prior - sub[i]).max(0.0) + self.noise_var);
        (mean, var)
    }
}
