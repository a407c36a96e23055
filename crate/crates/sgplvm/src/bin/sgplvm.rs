//! Command-line front end: train / infer / impute / predict / eval /
//! export-latents / synth over MatrixFile data and flat-text configs.

use clap::{Parser, Subcommand};
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use sgplvm::error::Error;
use sgplvm::infer::{impute, InferConfig, InferenceEngine, TestCase};
use sgplvm::io::checkpoint::{load_checkpoint, save_checkpoint, CheckpointData};
use sgplvm::io::config::Config;
use sgplvm::io::matrix_file::MatrixFile;
use sgplvm::io::metrics::{aggregate, case_metrics};
use sgplvm::io::synth;
use sgplvm::kernels::KernelFamily;
use sgplvm::model::{
    initialize, join_spatial, train, FittedState, InitMethod, ModelConfig, ObservationGrid,
    TrainConfig,
};
use sgplvm::opt::OptAlg;
use sgplvm::predict::{dynamical_latent_at, Predictor, SpatialPoints};
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(name = "sgplvm", about = "Structured GP latent variable model", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit a model and write a checkpoint plus the bound trace.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// bound-trace CSV (default: <out>.trace.csv)
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Infer test latent posteriors for partially observed cases.
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        test: PathBuf,
        /// observation mask (1 = observed); all pixels observed when absent
        #[arg(long)]
        mask: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        threads: usize,
    },
    /// Impute missing pixels of masked test cases.
    Impute {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        test: PathBuf,
        #[arg(long)]
        mask: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// per-case RMSE/MNLP against the test file's held-out values
        #[arg(long)]
        metrics: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        threads: usize,
        /// report MNLP in raw (destandardized) units
        #[arg(long, default_value_t = false)]
        raw_mnlp: bool,
    },
    /// Forward predictions at given latents or times, any spatial grid.
    Predict {
        #[arg(long)]
        ckpt: PathBuf,
        /// file with a `latents` array (k×d_ξ, optional `variances`)
        #[arg(long)]
        latents: Option<PathBuf>,
        /// file with a `times` array (dynamical models)
        #[arg(long)]
        times: Option<PathBuf>,
        /// file with spatial factor arrays x_s_0, x_s_1, ...
        #[arg(long)]
        spatial: Option<PathBuf>,
        /// predict on the training grid refined by this integer factor
        #[arg(long)]
        super_res: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// RMSE/MNLP of stored predictions against ground truth.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        /// mask (1 = observed); metrics cover only held-out entries
        #[arg(long)]
        mask: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        cases: usize,
        #[arg(long, default_value_t = false)]
        raw_mnlp: bool,
        /// per-channel scales for standardized MNLP (default 1)
        #[arg(long)]
        scales: Option<String>,
    },
    /// Dump latent posteriors and inverse lengthscales.
    ExportLatents {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a synthetic dataset from the generative model.
    Synth {
        /// gp_images | dynamic_video
        #[arg(long)]
        kind: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn main() {
    let cli = Cli::parse();
    let code = match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_)
                | Error::Parse { .. }
                | Error::Input(_)
                | Error::Shape(_)
                | Error::Io(_) => 2,
                Error::Decomposition(_)
                | Error::Singular(_)
                | Error::NonFinite(_)
                | Error::State(_)
                | Error::Inference(_)
                | Error::Conditioning(_) => 3,
            }
        }
    };
    std::process::exit(code);
}

fn run(cli: Cli) -> sgplvm::Result<()> {
    match cli.command {
        Command::Train {
            data,
            config,
            out,
            trace,
        } => cmd_train(&data, &config, &out, trace.as_deref()),
        Command::Infer {
            ckpt,
            test,
            mask,
            out,
            config,
            threads,
        } => cmd_infer(&ckpt, &test, mask.as_deref(), &out, config.as_deref(), threads),
        Command::Impute {
            ckpt,
            test,
            mask,
            out,
            metrics,
            config,
            threads,
            raw_mnlp,
        } => cmd_impute(
            &ckpt,
            &test,
            &mask,
            &out,
            metrics.as_deref(),
            config.as_deref(),
            threads,
            raw_mnlp,
        ),
        Command::Predict {
            ckpt,
            latents,
            times,
            spatial,
            super_res,
            out,
        } => cmd_predict(
            &ckpt,
            latents.as_deref(),
            times.as_deref(),
            spatial.as_deref(),
            super_res,
            &out,
        ),
        Command::Eval {
            pred,
            truth,
            mask,
            out,
            cases,
            raw_mnlp,
            scales,
        } => cmd_eval(
            &pred,
            &truth,
            mask.as_deref(),
            &out,
            cases,
            raw_mnlp,
            scales.as_deref(),
        ),
        Command::ExportLatents { ckpt, out } => cmd_export(&ckpt, &out),
        Command::Synth {
            kind,
            out,
            config,
            seed,
        } => cmd_synth(&kind, &out, config.as_deref(), seed),
    }
}

fn load_grid(data_path: &Path, cfg: &Config) -> sgplvm::Result<ObservationGrid> {
    let file = MatrixFile::load(data_path)?;
    let y = file.get("y").or_else(|_| file.get("data"))?.clone();
    let n_xi = cfg.require_usize("n_xi")?;
    let mut x_s = Vec::new();
    let mut i = 0;
    while let Some(x) = file.maybe(&format!("x_s_{i}")) {
        x_s.push(x.clone());
        i += 1;
    }
    if x_s.is_empty() {
        let sizes = cfg.get_usize_list("spatial_sizes")?.ok_or_else(|| {
            Error::Config(
                "need x_s_* arrays in the data file or `spatial_sizes` in the config".into(),
            )
        })?;
        for s in sizes {
            x_s.push(synth::pixel_grid(s));
        }
    }
    let timestamps = file
        .maybe("timestamps")
        .map(|t| DVector::from_fn(t.nrows(), |i, _| t[(i, 0)]));
    ObservationGrid::new(y, x_s, n_xi, timestamps)
}

fn model_config(cfg: &Config, grid: &ObservationGrid) -> sgplvm::Result<ModelConfig> {
    let d_latent = cfg.require_usize("d_latent")?;
    let m_xi = cfg.get_usize("m_xi", grid.n_xi.min(20))?;
    let m_s = match cfg.get_usize_list("m_s")? {
        Some(v) if v.len() == grid.x_s.len() => v,
        Some(v) if v.len() == 1 => vec![v[0]; grid.x_s.len()],
        Some(_) => {
            return Err(Error::Config(
                "`m_s` length must match the spatial factor count".into(),
            ))
        }
        None => grid.x_s.iter().map(|x| x.nrows()).collect(),
    };
    let mut mc = ModelConfig::new(d_latent, m_xi, m_s);
    mc.spatial_family = KernelFamily::from_name(cfg.get_str("spatial_kernel", "matern32"))?;
    mc.dynamical = cfg.get_bool("dynamical", false)?;
    mc.temporal_family = KernelFamily::from_name(cfg.get_str("temporal_kernel", "ard_rbf"))?;
    mc.init = InitMethod::from_name(cfg.get_str("init", "pca"))?;
    mc.seed = cfg.get_usize("seed", 0)? as u64;
    mc.beta_init = cfg.get_f64("beta_init", 100.0)?;
    mc.latent_variance_init = cfg.get_f64("latent_variance_init", 0.1)?;
    mc.tie_spatial_lengthscales = cfg.get_bool("tie_spatial_lengthscales", false)?;
    mc.optimize_inducing = cfg.get_bool("optimize_inducing", true)?;
    if let Some(v) = cfg.get("spatial_lengthscale_init") {
        mc.spatial_lengthscale_init = Some(
            v.parse()
                .map_err(|_| Error::Config("bad `spatial_lengthscale_init`".into()))?,
        );
    }
    if let Some(v) = cfg.get("temporal_lengthscale_init") {
        mc.temporal_lengthscale_init = Some(
            v.parse()
                .map_err(|_| Error::Config("bad `temporal_lengthscale_init`".into()))?,
        );
    }
    Ok(mc)
}

fn train_config(cfg: &Config) -> sgplvm::Result<TrainConfig> {
    Ok(TrainConfig {
        optimizer: OptAlg::from_name(cfg.get_str("optimizer", "adam"))?,
        max_iters: cfg.get_usize("max_iters", 500)?,
        learning_rate: cfg.get_f64("learning_rate", 0.02)?,
        tolerance: cfg.get_f64("tolerance", 1e-7)?,
        fixed_beta_iters: cfg.get_usize("fixed_beta_iters", 100)?,
        seed: cfg.get_usize("seed", 0)? as u64,
    })
}

fn infer_config(cfg: &Config) -> sgplvm::Result<InferConfig> {
    Ok(InferConfig {
        max_iters: cfg.get_usize("infer_max_iters", 200)?,
        tolerance: cfg.get_f64("infer_tolerance", 1e-6)?,
        restarts: cfg.get_usize("restarts", 5)?,
        learning_rate: cfg.get_f64("infer_learning_rate", 0.05)?,
        seed: cfg.get_usize("seed", 0)? as u64,
    })
}

fn cmd_train(data: &Path, config: &Path, out: &Path, trace: Option<&Path>) -> sgplvm::Result<()> {
    let cfg = Config::from_file(config)?;
    let grid = load_grid(data, &cfg)?;
    let mc = model_config(&cfg, &grid)?;
    let tc = train_config(&cfg)?;
    let mut model = initialize(&grid, &mc)?;
    let result = train(&mut model, &grid, &tc)?;
    let state = model.fit_state(&grid)?;
    save_checkpoint(out, &model, &grid.x_s, &state.ws.psi1t_y(), state.ws.tr_yy)?;

    let trace_path = trace
        .map(|p| p.to_path_buf())
        .unwrap_or_else(|| out.with_extension("trace.csv"));
    let mut csv = String::from("iter,bound,beta,grad_norm,wall_ms\n");
    for row in &result.trace {
        csv.push_str(&format!(
            "{},{:.10e},{:.10e},{:.10e},{:.3}\n",
            row.iter, row.bound, row.beta, row.grad_norm, row.wall_ms
        ));
    }
    std::fs::write(&trace_path, csv)?;
    println!(
        "trained: bound {:.4} -> {:.4} ({} iterations), checkpoint {}",
        result.initial_bound,
        result.final_bound,
        result.trace.len(),
        out.display()
    );
    Ok(())
}

struct LoadedModel {
    ckpt: CheckpointData,
    state: FittedState,
}

fn load_model(ckpt_path: &Path) -> sgplvm::Result<LoadedModel> {
    let ckpt = load_checkpoint(ckpt_path)?;
    let state = ckpt
        .model
        .fit_state_from_stats(&ckpt.x_s, &ckpt.psi1t_y, ckpt.tr_yy)?;
    Ok(LoadedModel { ckpt, state })
}

/// Split a stacked test file into per-case observations using the mask
/// (1 = observed). Absent mask means fully observed.
fn split_cases(
    x_s: &[DMatrix<f64>],
    test: &MatrixFile,
    mask: Option<&MatrixFile>,
) -> sgplvm::Result<Vec<TestCase>> {
    let y = test.get("y").or_else(|_| test.get("data"))?;
    let joined = join_spatial(x_s);
    let n_s = joined.nrows();
    if y.nrows() % n_s != 0 {
        return Err(Error::Shape(format!(
            "test rows {} not a multiple of the spatial grid size {n_s}",
            y.nrows()
        )));
    }
    let n_cases = y.nrows() / n_s;
    let mask_col = match mask {
        Some(m) => {
            let arr = m.get("mask").or_else(|_| m.get("data"))?;
            if arr.nrows() != y.nrows() {
                return Err(Error::Shape(format!(
                    "mask has {} rows for {} test rows",
                    arr.nrows(),
                    y.nrows()
                )));
            }
            Some(arr.clone())
        }
        None => None,
    };
    let times = test
        .maybe("timestamps")
        .map(|t| DVector::from_fn(t.nrows(), |i, _| t[(i, 0)]));
    if let Some(t) = &times {
        if t.len() != n_cases {
            return Err(Error::Shape(format!(
                "{} timestamps for {n_cases} test cases",
                t.len()
            )));
        }
    }
    let d_y = y.ncols();
    let mut cases = Vec::with_capacity(n_cases);
    for c in 0..n_cases {
        let mut observed = Vec::new();
        for p in 0..n_s {
            let is_obs = mask_col
                .as_ref()
                .map(|m| m[(c * n_s + p, 0)] != 0.0)
                .unwrap_or(true);
            if is_obs {
                observed.push(p);
            }
        }
        let y_star =
            DMatrix::from_fn(observed.len(), d_y, |r, col| y[(c * n_s + observed[r], col)]);
        let xs_star = DMatrix::from_fn(observed.len(), joined.ncols(), |r, col| {
            joined[(observed[r], col)]
        });
        cases.push(TestCase {
            y_star,
            xs_star,
            observed_idx: observed,
            t_star: times.as_ref().map(|t| t[c]),
        });
    }
    Ok(cases)
}

fn with_threads<T: Send, F: Fn(usize) -> sgplvm::Result<T> + Sync>(
    n: usize,
    threads: usize,
    f: F,
) -> sgplvm::Result<Vec<T>> {
    if threads <= 1 {
        (0..n).map(f).collect()
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| Error::State(format!("thread pool: {e}")))?;
        pool.install(|| (0..n).into_par_iter().map(&f).collect())
    }
}

fn cmd_infer(
    ckpt: &Path,
    test: &Path,
    mask: Option<&Path>,
    out: &Path,
    config: Option<&Path>,
    threads: usize,
) -> sgplvm::Result<()> {
    let cfg = config.map(Config::from_file).transpose()?.unwrap_or_default();
    let lm = load_model(ckpt)?;
    let test_file = MatrixFile::load(test)?;
    let mask_file = mask.map(MatrixFile::load).transpose()?;
    let cases = split_cases(&lm.ckpt.x_s, &test_file, mask_file.as_ref())?;
    let engine = InferenceEngine::new(&lm.ckpt.model, &lm.state.ws);
    let icfg = infer_config(&cfg)?;
    let results = with_threads(cases.len(), threads, |i| engine.infer_latent(&cases[i], &icfg))?;

    let d = lm.ckpt.model.d_latent();
    let mut f = MatrixFile::new();
    f.push(
        "latent_mean",
        DMatrix::from_fn(results.len(), d, |i, j| results[i].mean[j]),
    );
    f.push(
        "latent_var",
        DMatrix::from_fn(results.len(), d, |i, j| results[i].var[j]),
    );
    f.push(
        "l_star",
        DMatrix::from_fn(results.len(), 1, |i, _| results[i].l_star),
    );
    f.save_binary(out)?;
    println!("inferred {} cases -> {}", results.len(), out.display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_impute(
    ckpt: &Path,
    test: &Path,
    mask: &Path,
    out: &Path,
    metrics: Option<&Path>,
    config: Option<&Path>,
    threads: usize,
    raw_mnlp: bool,
) -> sgplvm::Result<()> {
    let cfg = config.map(Config::from_file).transpose()?.unwrap_or_default();
    let lm = load_model(ckpt)?;
    let model = &lm.ckpt.model;
    let test_file = MatrixFile::load(test)?;
    let mask_file = MatrixFile::load(mask)?;
    let cases = split_cases(&lm.ckpt.x_s, &test_file, Some(&mask_file))?;
    let engine = InferenceEngine::new(model, &lm.state.ws);
    let predictor = Predictor::new(model, &lm.state.ws);
    let icfg = infer_config(&cfg)?;
    let n_mog = cfg.get_usize("n_mog", 20)?;
    let seed = cfg.get_usize("seed", 0)? as u64;
    let full = SpatialPoints::Joined(join_spatial(&lm.ckpt.x_s));
    let imputations = with_threads(cases.len(), threads, |i| {
        impute(
            model,
            &predictor,
            &engine,
            &cases[i],
            &full,
            n_mog,
            seed.wrapping_add(i as u64),
            &icfg,
        )
    })?;

    // full-grid outputs: observed entries pass through, missing get the
    // imputed density
    let y = test_file.get("y").or_else(|_| test_file.get("data"))?;
    let n_s = join_spatial(&lm.ckpt.x_s).nrows();
    let d_y = y.ncols();
    let mut mean_out = DMatrix::zeros(y.nrows(), d_y);
    let mut var_out = DMatrix::zeros(y.nrows(), d_y);
    let mut miss_out = DMatrix::zeros(y.nrows(), 1);
    for (c, (case, imp)) in cases.iter().zip(imputations.iter()).enumerate() {
        for (r, &p) in case.observed_idx.iter().enumerate() {
            for col in 0..d_y {
                mean_out[(c * n_s + p, col)] = case.y_star[(r, col)];
            }
        }
        for (r, &p) in imp.missing_idx.iter().enumerate() {
            miss_out[(c * n_s + p, 0)] = 1.0;
            for col in 0..d_y {
                mean_out[(c * n_s + p, col)] = imp.mean[(r, col)];
                var_out[(c * n_s + p, col)] = imp.var[col][r];
            }
        }
    }
    let mut f = MatrixFile::new();
    f.push("mean", mean_out);
    f.push("var", var_out);
    f.push("missing_mask", miss_out);
    f.save_binary(out)?;

    if let Some(metrics_path) = metrics {
        let mut rows = Vec::new();
        for (c, (case, imp)) in cases.iter().zip(imputations.iter()).enumerate() {
            let _ = case;
            let truth = DMatrix::from_fn(imp.missing_idx.len(), d_y, |r, col| {
                y[(c * n_s + imp.missing_idx[r], col)]
            });
            rows.push(case_metrics(
                c,
                &truth,
                &imp.mean,
                &imp.var,
                &model.standardization.scale,
                !raw_mnlp,
            )?);
        }
        let report = aggregate(rows)?;
        report.write_csv(metrics_path)?;
        println!(
            "imputed {} cases: mean RMSE {:.4}, mean MNLP {:.4}",
            cases.len(),
            report.mean_rmse,
            report.mean_mnlp
        );
    } else {
        println!("imputed {} cases -> {}", cases.len(), out.display());
    }
    Ok(())
}

/// Split each training cell into `factor` sub-cells centered inside it
/// (the factor-2 case puts new points at half-integer offsets).
fn refine_grid(x: &DMatrix<f64>, factor: usize) -> DMatrix<f64> {
    let n = x.nrows();
    let h = if n > 1 { x[(1, 0)] - x[(0, 0)] } else { 1.0 };
    DMatrix::from_fn(n * factor, x.ncols(), |i, c| {
        let base = x[(i / factor, c)];
        let off = ((i % factor) as f64 + 0.5) / factor as f64 - 0.5;
        base + off * h
    })
}

fn cmd_predict(
    ckpt: &Path,
    latents: Option<&Path>,
    times: Option<&Path>,
    spatial: Option<&Path>,
    super_res: Option<usize>,
    out: &Path,
) -> sgplvm::Result<()> {
    let lm = load_model(ckpt)?;
    let model = &lm.ckpt.model;
    let predictor = Predictor::new(model, &lm.state.ws);
    let d = model.d_latent();

    let (latent_means, latent_vars): (DMatrix<f64>, Option<DMatrix<f64>>) = match (latents, times)
    {
        (Some(path), None) => {
            let f = MatrixFile::load(path)?;
            let means = f.get("latents").or_else(|_| f.get("data"))?.clone();
            if means.ncols() != d {
                return Err(Error::Shape(format!(
                    "latents have {} columns, model has d_ξ = {d}",
                    means.ncols()
                )));
            }
            (means, f.maybe("variances").cloned())
        }
        (None, Some(path)) => {
            let f = MatrixFile::load(path)?;
            let t = f.get("times").or_else(|_| f.get("data"))?;
            let ts: Vec<f64> = (0..t.nrows()).map(|i| t[(i, 0)]).collect();
            let (m, v) = dynamical_latent_at(model, &ts)?;
            (m, Some(v))
        }
        _ => {
            return Err(Error::Config(
                "provide exactly one of --latents or --times".into(),
            ))
        }
    };

    let x_s: Vec<DMatrix<f64>> = match (spatial, super_res) {
        (Some(path), None) => {
            let f = MatrixFile::load(path)?;
            let mut xs = Vec::new();
            let mut i = 0;
            while let Some(x) = f.maybe(&format!("x_s_{i}")) {
                xs.push(x.clone());
                i += 1;
            }
            if xs.is_empty() {
                return Err(Error::Config("spatial file has no x_s_* arrays".into()));
            }
            xs
        }
        (None, Some(factor)) => lm.ckpt.x_s.iter().map(|x| refine_grid(x, factor)).collect(),
        (None, None) => lm.ckpt.x_s.clone(),
        (Some(_), Some(_)) => {
            return Err(Error::Config(
                "--spatial and --super-res are mutually exclusive".into(),
            ))
        }
    };
    let spatial_points = SpatialPoints::Factored(x_s);
    let n_s = spatial_points.n_points();
    let d_y = model.standardization.mean.len();

    let k = latent_means.nrows();
    let mut mean_out = DMatrix::zeros(k * n_s, d_y);
    let mut var_out = DMatrix::zeros(k * n_s, 1);
    for i in 0..k {
        let (mean_std, var_std) = match &latent_vars {
            Some(v) => {
                let qm = DVector::from_fn(d, |j, _| latent_means[(i, j)]);
                let qv = DVector::from_fn(d, |j, _| v[(i, j)]);
                let mean = predictor.predict_marginal_mean(&qm, &qv, &spatial_points)?;
                // per-pixel variance from a small Gaussian mixture
                let n_comp = 16usize;
                let mix =
                    predictor.predict_mixture(&qm, &qv, &spatial_points, n_comp, i as u64, false)?;
                let mut first: DVector<f64> = DVector::zeros(n_s);
                let mut second: DVector<f64> = DVector::zeros(n_s);
                for comp in &mix.components {
                    for p in 0..n_s {
                        first[p] += comp.mean[(p, 0)] / n_comp as f64;
                        second[p] +=
                            (comp.var[p] + comp.mean[(p, 0)] * comp.mean[(p, 0)]) / n_comp as f64;
                    }
                }
                let var = DVector::from_fn(n_s, |p, _| (second[p] - first[p] * first[p]).max(0.0));
                (mean, var)
            }
            None => {
                let x = DMatrix::from_fn(1, d, |_, j| latent_means[(i, j)]);
                let pred = predictor.predict_at(&x, &spatial_points, false)?;
                (pred.mean, pred.var)
            }
        };
        let mean_raw = model.standardization.invert(&mean_std);
        for p in 0..n_s {
            for c in 0..d_y {
                mean_out[(i * n_s + p, c)] = mean_raw[(p, c)];
            }
            var_out[(i * n_s + p, 0)] = var_std[p];
        }
    }
    let mut f = MatrixFile::new();
    f.push("mean", mean_out);
    f.push("var", var_out);
    f.save_binary(out)?;
    println!("predicted {k} cases x {n_s} points -> {}", out.display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_eval(
    pred: &Path,
    truth: &Path,
    mask: Option<&Path>,
    out: &Path,
    cases: usize,
    raw_mnlp: bool,
    scales: Option<&str>,
) -> sgplvm::Result<()> {
    let pred_file = MatrixFile::load(pred)?;
    let truth_file = MatrixFile::load(truth)?;
    let mean = pred_file.get("mean")?;
    let var = pred_file.get("var")?;
    let y = truth_file.get("y").or_else(|_| truth_file.get("data"))?;
    if mean.shape() != y.shape() {
        return Err(Error::Shape(format!(
            "prediction shape {:?} vs truth {:?}",
            mean.shape(),
            y.shape()
        )));
    }
    let d_y = y.ncols();
    let scales: Vec<f64> = match scales {
        Some(s) => s
            .split(',')
            .map(|v| v.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::Config("bad --scales list".into()))?,
        None => vec![1.0; d_y],
    };
    let mask_arr = mask
        .map(|p| -> sgplvm::Result<DMatrix<f64>> {
            let f = MatrixFile::load(p)?;
            Ok(f.get("mask").or_else(|_| f.get("data"))?.clone())
        })
        .transpose()?;
    if cases == 0 || y.nrows() % cases != 0 {
        return Err(Error::Config(format!(
            "--cases {cases} must divide the {} truth rows",
            y.nrows()
        )));
    }
    let rows_per_case = y.nrows() / cases;
    let mut metrics_rows = Vec::new();
    for c in 0..cases {
        let mut idx = Vec::new();
        for r in 0..rows_per_case {
            let global = c * rows_per_case + r;
            let held_out = mask_arr
                .as_ref()
                .map(|m| m[(global, 0)] == 0.0)
                .unwrap_or(true);
            if held_out {
                idx.push(global);
            }
        }
        let t = DMatrix::from_fn(idx.len(), d_y, |r, col| y[(idx[r], col)]);
        let m = DMatrix::from_fn(idx.len(), d_y, |r, col| mean[(idx[r], col)]);
        let v: Vec<DVector<f64>> = (0..d_y)
            .map(|col| {
                DVector::from_fn(idx.len(), |r, _| {
                    if var.ncols() > col {
                        var[(idx[r], col)]
                    } else {
                        var[(idx[r], 0)]
                    }
                })
            })
            .collect();
        metrics_rows.push(case_metrics(c, &t, &m, &v, &scales, !raw_mnlp)?);
    }
    let report = aggregate(metrics_rows)?;
    report.write_csv(out)?;
    println!(
        "eval: mean RMSE {:.6}, mean MNLP {:.6} -> {}",
        report.mean_rmse,
        report.mean_mnlp,
        out.display()
    );
    Ok(())
}

fn cmd_export(ckpt: &Path, out: &Path) -> sgplvm::Result<()> {
    let ckpt = load_checkpoint(ckpt)?;
    let model = &ckpt.model;
    let (means, vars) = model.latent_marginals()?;
    let mut f = MatrixFile::new();
    f.push("latent_mean", means);
    f.push("latent_var", vars);
    f.push(
        "inverse_lengthscales",
        DMatrix::from_fn(1, model.d_latent(), |_, j| {
            1.0 / model.latent_kernel.lengthscales[j]
        }),
    );
    if let Some(t) = &model.q_latent.timestamps {
        f.push("timestamps", DMatrix::from_fn(t.len(), 1, |i, _| t[i]));
    }
    f.save_binary(out)?;
    println!("exported latents -> {}", out.display());
    Ok(())
}

fn cmd_synth(kind: &str, out: &Path, config: Option<&Path>, seed: u64) -> sgplvm::Result<()> {
    let cfg = config.map(Config::from_file).transpose()?.unwrap_or_default();
    match kind {
        "gp_images" => {
            let params = synth::GpImagesParams {
                n_examples: cfg.get_usize("n_examples", 40)?,
                width: cfg.get_usize("width", 12)?,
                height: cfg.get_usize("height", 12)?,
                d_y: cfg.get_usize("d_y", 1)?,
                d_latent: cfg.get_usize("synth_d_latent", 2)?,
                latent_lengthscale: cfg.get_f64("synth_latent_lengthscale", 1.0)?,
                spatial_lengthscale: cfg.get_f64("synth_spatial_lengthscale", 1.5)?,
                spatial_family: KernelFamily::from_name(
                    cfg.get_str("synth_spatial_kernel", "matern32"),
                )?,
                signal_variance: cfg.get_f64("synth_signal_variance", 1.0)?,
                noise_std: cfg.get_f64("synth_noise_std", 0.05)?,
            };
            let data = synth::gp_images(&params, seed)?;
            write_synth(out, &data)?;
        }
        "dynamic_video" => {
            let params = synth::DynamicVideoParams {
                n_frames: cfg.get_usize("n_frames", 60)?,
                width: cfg.get_usize("width", 16)?,
                height: cfg.get_usize("height", 16)?,
                d_y: cfg.get_usize("d_y", 1)?,
                d_latent: cfg.get_usize("synth_d_latent", 2)?,
                temporal_lengthscale: cfg.get_f64("synth_temporal_lengthscale", 6.0)?,
                latent_lengthscale: cfg.get_f64("synth_latent_lengthscale", 1.0)?,
                spatial_lengthscale: cfg.get_f64("synth_spatial_lengthscale", 2.0)?,
                signal_variance: cfg.get_f64("synth_signal_variance", 1.0)?,
                noise_std: cfg.get_f64("synth_noise_std", 0.05)?,
            };
            let data = synth::dynamic_video(&params, seed)?;
            write_synth(out, &data)?;
        }
        other => {
            return Err(Error::Config(format!(
                "unknown synth kind `{other}` (gp_images | dynamic_video)"
            )))
        }
    }
    println!("synthetic dataset -> {}", out.display());
    Ok(())
}

fn write_synth(out: &Path, data: &synth::SynthData) -> sgplvm::Result<()> {
    let mut f = MatrixFile::new();
    f.push("y", data.grid.y.clone());
    for (i, x) in data.grid.x_s.iter().enumerate() {
        f.push(&format!("x_s_{i}"), x.clone());
    }
    if let Some(t) = &data.grid.timestamps {
        f.push("timestamps", DMatrix::from_fn(t.len(), 1, |i, _| t[i]));
    }
    f.push("latents", data.latents.clone());
    f.push("noiseless", data.noiseless.clone());
    f.save_binary(out)
}
