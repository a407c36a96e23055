//! Evidence lower bound machinery.
//!
//! The collapsed training bound is evaluated entirely through per-factor
//! Cholesky and eigendecompositions of the whitened psi-statistics; the full
//! `m×m` matrices `C`, `A`, `K_ψ` are never formed. The reverse pass
//! propagates adjoints through the same factored representation using
//! resolvent identities, so no eigenvector derivatives appear and repeated
//! eigenvalues (the white-kernel case) are harmless.

use crate::error::{Error, Result};
use crate::kron::{
    jittered_cholesky, kron_vecs, mode_apply, mode_apply_skipping, DiagPlusConst, KronMatrix,
};
use crate::psi::StructuredPsiSet;
use nalgebra::{DMatrix, DVector};

const LOG_2PI: f64 = 1.8378770664093453;

/// Factored state shared by the bound, its gradients, and predictions.
pub struct BoundWorkspace {
    pub n: usize,
    pub m: usize,
    pub d_y: usize,
    pub beta: f64,
    /// per-factor lower Cholesky of K_uu factors (latent first)
    pub l_factors: Vec<DMatrix<f64>>,
    /// T_f = L_f⁻¹ P_fᵀ with P₀ = Ψ₁^(ξ), P_f = K_fu^(sf)
    pub t_factors: Vec<DMatrix<f64>>,
    /// whitened psi2 factors C_f
    pub c_factors: Vec<DMatrix<f64>>,
    /// eigenvectors / eigenvalues of each C_f
    pub q_factors: Vec<DMatrix<f64>>,
    pub lambda_factors: Vec<DVector<f64>>,
    /// D = β⁻¹ + Λ_C
    pub d: DiagPlusConst,
    /// R = L⁻¹ Ψ₁ᵀ Y
    pub r: DMatrix<f64>,
    /// B = Q_Cᵀ R
    pub b: DMatrix<f64>,
    pub tr_c: f64,
    pub log_det_a: f64,
    pub tr_yy: f64,
}

fn solve_lower(l: &DMatrix<f64>, rhs: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = rhs.clone();
    l.solve_lower_triangular_mut(&mut out);
    out
}

fn solve_lower_transpose(l: &DMatrix<f64>, rhs: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = rhs.clone();
    l.transpose().solve_upper_triangular_mut(&mut out);
    out
}

fn apply_factors(factors: &[DMatrix<f64>], m: &DMatrix<f64>) -> DMatrix<f64> {
    let rows: usize = factors.iter().map(|f| f.nrows()).product();
    let mut out = DMatrix::zeros(rows, m.ncols());
    for j in 0..m.ncols() {
        let col: Vec<f64> = m.column(j).iter().copied().collect();
        out.column_mut(j).copy_from_slice(&mode_apply(factors, &col));
    }
    out
}

impl BoundWorkspace {
    /// Whitened C eigensystem, D, and `B = Q_Cᵀ L⁻¹ Ψ₁ᵀ Y` computed
    /// factor-wise, with the Y product applied last (O(n·d_y)).
    pub fn build(
        psi: &StructuredPsiSet,
        kuu_factors: &[DMatrix<f64>],
        y: &DMatrix<f64>,
        beta: f64,
    ) -> Result<Self> {
        if beta <= 0.0 || !beta.is_finite() {
            return Err(Error::Input(format!("noise precision must be positive, got {beta}")));
        }
        let p_factors: Vec<&DMatrix<f64>> = std::iter::once(&psi.latent.psi1)
            .chain(psi.kfu_s.iter())
            .collect();
        if kuu_factors.len() != p_factors.len() {
            return Err(Error::Shape(format!(
                "{} K_uu factors for {} psi1 factors",
                kuu_factors.len(),
                p_factors.len()
            )));
        }
        let n: usize = p_factors.iter().map(|p| p.nrows()).product();
        let m: usize = p_factors.iter().map(|p| p.ncols()).product();
        if y.nrows() != n {
            return Err(Error::Shape(format!(
                "Y has {} rows, expected n = {n} under the ξ⊗s ordering",
                y.nrows()
            )));
        }
        let d_y = y.ncols();

        let mut l_factors = Vec::with_capacity(kuu_factors.len());
        for (i, k) in kuu_factors.iter().enumerate() {
            if k.nrows() != k.ncols() || k.nrows() != p_factors[i].ncols() {
                return Err(Error::Shape(format!("K_uu factor {i} shape mismatch")));
            }
            l_factors.push(
                jittered_cholesky(k, 0.0)
                    .map_err(|e| Error::Decomposition(format!("K_uu factor {i}: {e}")))?,
            );
        }

        let mut t_factors = Vec::with_capacity(l_factors.len());
        for (l, p) in l_factors.iter().zip(p_factors.iter()) {
            t_factors.push(solve_lower(l, &p.transpose()));
        }

        // C factors: latent from Ψ₂^(ξ), spatial from T Tᵀ (identical value).
        let mut c_factors = Vec::with_capacity(l_factors.len());
        let c0 = {
            let tmp = solve_lower(&l_factors[0], &psi.latent.psi2);
            let tmp = solve_lower(&l_factors[0], &tmp.transpose());
            (&tmp + tmp.transpose()) * 0.5
        };
        c_factors.push(c0);
        for t in t_factors.iter().skip(1) {
            let c = t * t.transpose();
            c_factors.push((&c + c.transpose()) * 0.5);
        }

        let mut q_factors = Vec::with_capacity(c_factors.len());
        let mut lambda_factors = Vec::with_capacity(c_factors.len());
        for (i, c) in c_factors.iter().enumerate() {
            let (q, mut lam) = crate::kron::eig_sym(c)
                .map_err(|e| Error::Decomposition(format!("C factor {i}: {e}")))?;
            // C is PSD in exact arithmetic; clamp round-off negatives.
            let scale = lam.iter().cloned().fold(0.0f64, |a, b| a.max(b.abs()));
            for v in lam.iter_mut() {
                if *v < 0.0 {
                    if *v < -1e-10 * scale.max(1e-300) {
                        return Err(Error::Decomposition(format!(
                            "C factor {i} has negative eigenvalue {v}"
                        )));
                    }
                    *v = 0.0;
                }
            }
            q_factors.push(q);
            lambda_factors.push(lam);
        }

        let lambda_full = DVector::from_vec(kron_vecs(
            &lambda_factors
                .iter()
                .map(|l| l.iter().copied().collect::<Vec<_>>())
                .collect::<Vec<_>>(),
        ));
        let d = DiagPlusConst::new(lambda_full, 1.0 / beta)?;

        let r = apply_factors(&t_factors, y);
        let q_t: Vec<DMatrix<f64>> = q_factors.iter().map(|q| q.transpose()).collect();
        let b = apply_factors(&q_t, &r);

        let tr_c: f64 = lambda_factors.iter().map(|l| l.sum()).product();
        let log_det_a: f64 = d.values().iter().map(|v| v.ln()).sum();
        let tr_yy = y.iter().map(|v| v * v).sum();

        Ok(BoundWorkspace {
            n,
            m,
            d_y,
            beta,
            l_factors,
            t_factors,
            c_factors,
            q_factors,
            lambda_factors,
            d,
            r,
            b,
            tr_c,
            log_det_a,
            tr_yy,
        })
    }

    /// Rebuild from the sufficient statistic `Ψ₁ᵀY` (m×d_y) instead of raw
    /// data; `R = L⁻¹(Ψ₁ᵀY)` here rather than a product over Y rows.
    pub fn build_from_stats(
        psi: &StructuredPsiSet,
        kuu_factors: &[DMatrix<f64>],
        psi1t_y: &DMatrix<f64>,
        tr_yy: f64,
        beta: f64,
    ) -> Result<Self> {
        let n: usize = std::iter::once(psi.latent.psi1.nrows())
            .chain(psi.kfu_s.iter().map(|k| k.nrows()))
            .product();
        let m: usize = std::iter::once(psi.latent.psi1.ncols())
            .chain(psi.kfu_s.iter().map(|k| k.ncols()))
            .product();
        if psi1t_y.nrows() != m {
            return Err(Error::Shape(format!(
                "Ψ₁ᵀY statistic has {} rows, expected m = {m}",
                psi1t_y.nrows()
            )));
        }
        let d_y = psi1t_y.ncols();
        // Build with a zero Y of matching shape, then overwrite the data
        // dependent pieces from the statistic.
        let y0 = DMatrix::zeros(n, d_y);
        let mut ws = Self::build(psi, kuu_factors, &y0, beta)?;
        let l_inv: Vec<DMatrix<f64>> = ws
            .l_factors
            .iter()
            .map(|l| {
                let mut inv = DMatrix::identity(l.nrows(), l.nrows());
                l.solve_lower_triangular_mut(&mut inv);
                inv
            })
            .collect();
        ws.r = apply_factors(&l_inv, psi1t_y);
        let q_t: Vec<DMatrix<f64>> = ws.q_factors.iter().map(|q| q.transpose()).collect();
        ws.b = apply_factors(&q_t, &ws.r);
        ws.tr_yy = tr_yy;
        Ok(ws)
    }

    /// `Ψ₁ᵀY` for persisting a trained model without the raw data.
    pub fn psi1t_y(&self) -> DMatrix<f64> {
        apply_factors(
            &self.l_factors.iter().map(|l| l.clone()).collect::<Vec<_>>(),
            &self.r,
        )
    }

    /// `Σ_{I,j} b_{Ij}² / d_I`, the data-fit trace `tr(Yᵀ Ψ₁ K_ψ⁻¹ Ψ₁ᵀ Y)`.
    pub fn data_fit(&self) -> f64 {
        let d = self.d.values();
        let mut s = 0.0;
        for j in 0..self.b.ncols() {
            for i in 0..self.b.nrows() {
                s += self.b[(i, j)] * self.b[(i, j)] / d[i];
            }
        }
        s
    }
}

/// The collapsed training bound.
pub fn collapsed_bound(
    ws: &BoundWorkspace,
    psi0_full: f64,
    y: &DMatrix<f64>,
    kl: f64,
) -> Result<f64> {
    if y.shape() != (ws.n, ws.d_y) {
        return Err(Error::Shape("Y inconsistent with workspace".into()));
    }
    let (n, m, d_y, beta) = (ws.n as f64, ws.m as f64, ws.d_y as f64, ws.beta);
    let fit = ws.data_fit();
    let terms = [
        ("log-det", 0.5 * d_y * ((n - m) * beta.ln() - n * LOG_2PI - ws.log_det_a)),
        ("data-fit", -0.5 * beta * (ws.tr_yy - fit)),
        ("trace-correction", -0.5 * beta * d_y * (psi0_full - ws.tr_c)),
        ("kl", -kl),
    ];
    let mut total = 0.0;
    for (name, v) in terms {
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("bound term `{name}`")));
        }
        total += v;
    }
    Ok(total)
}

/// Adjoints of the collapsed bound with respect to the factored inputs.
/// KL enters the bound as `−kl`, so the caller subtracts its own KL grads.
pub struct BoundAdjoints {
    /// per-factor ∂L/∂K_uu^(f), symmetric
    pub kuu_bar: Vec<DMatrix<f64>>,
    /// ∂L/∂Ψ₁^(ξ)
    pub psi1_latent_bar: DMatrix<f64>,
    /// ∂L/∂Ψ₂^(ξ), symmetric
    pub psi2_latent_bar: DMatrix<f64>,
    /// per spatial factor ∂L/∂K_fu^(sf)
    pub kfu_s_bar: Vec<DMatrix<f64>>,
    /// ∂L/∂ψ₀_full
    pub psi0_full_bar: f64,
    /// ∂L/∂β, raw units
    pub beta_bar: f64,
}

pub fn collapsed_bound_adjoints(
    ws: &BoundWorkspace,
    y: &DMatrix<f64>,
    psi0_full: f64,
) -> Result<BoundAdjoints> {
    let k = ws.l_factors.len();
    let (nf, mf, d_yf, beta) = (ws.n as f64, ws.m as f64, ws.d_y as f64, ws.beta);
    let d_vals = ws.d.values();
    // G = D⁻¹ B
    let mut g = ws.b.clone();
    for j in 0..g.ncols() {
        for i in 0..g.nrows() {
            g[(i, j)] /= d_vals[i];
        }
    }

    // β̄: direct terms plus the β⁻¹I inside A.
    let fit = ws.data_fit();
    let sum_dinv: f64 = d_vals.iter().map(|v| 1.0 / v).sum();
    let sum_g2: f64 = g.iter().map(|v| v * v).sum();
    let beta_bar = 0.5 * d_yf * (nf - mf) / beta - 0.5 * (ws.tr_yy - fit)
        - 0.5 * d_yf * (psi0_full - ws.tr_c)
        + (0.5 * d_yf * sum_dinv + 0.5 * beta * sum_g2) / (beta * beta);

    let dims: Vec<usize> = ws.lambda_factors.iter().map(|l| l.len()).collect();
    let lambda_rows: Vec<DMatrix<f64>> = ws
        .lambda_factors
        .iter()
        .map(|l| DMatrix::from_fn(1, l.len(), |_, j| l[j]))
        .collect();
    let d_inv: Vec<f64> = d_vals.iter().map(|v| 1.0 / v).collect();

    // C̄_f = −(d_y/2)·Q diag(w_f) Qᵀ − (β/2)·Q M_f Qᵀ + (β d_y/2)·κ_f·I
    let mut c_bars = Vec::with_capacity(k);
    for f in 0..k {
        let m_f = dims[f];
        let outer: usize = dims[..f].iter().product();
        let inner: usize = dims[f + 1..].iter().product();

        let w_f = mode_apply_skipping(&lambda_rows, &d_inv, f);
        debug_assert_eq!(w_f.len(), m_f);

        let w_other = kron_vecs(
            &(0..k)
                .filter(|&gix| gix != f)
                .map(|gix| ws.lambda_factors[gix].iter().copied().collect::<Vec<_>>())
                .collect::<Vec<_>>(),
        );
        let mut m_mat = DMatrix::zeros(m_f, m_f);
        let mut gvec = vec![0.0; m_f];
        for j in 0..ws.d_y {
            for o in 0..outer {
                for r in 0..inner {
                    let w = w_other[o * inner + r];
                    if w == 0.0 {
                        continue;
                    }
                    for (a, gv) in gvec.iter_mut().enumerate() {
                        *gv = g[((o * m_f + a) * inner + r, j)];
                    }
                    for a in 0..m_f {
                        let ga = w * gvec[a];
                        if ga == 0.0 {
                            continue;
                        }
                        for b in 0..m_f {
                            m_mat[(a, b)] += ga * gvec[b];
                        }
                    }
                }
            }
        }

        let q = &ws.q_factors[f];
        let mut core = -0.5 * beta * m_mat;
        for i in 0..m_f {
            core[(i, i)] += -0.5 * d_yf * w_f[i];
        }
        let mut c_bar = q * core * q.transpose();
        let kappa: f64 = (0..k)
            .filter(|&gix| gix != f)
            .map(|gix| ws.lambda_factors[gix].sum())
            .product();
        for i in 0..m_f {
            c_bar[(i, i)] += 0.5 * beta * d_yf * kappa;
        }
        c_bars.push((&c_bar + c_bar.transpose()) * 0.5);
    }

    // R̄ = β Q_C G; T̄_f accumulates the R path, then the spatial C path.
    let r_bar = {
        let qmats: Vec<DMatrix<f64>> = ws.q_factors.to_vec();
        apply_factors(&qmats, &g) * beta
    };
    let t_dims_in: Vec<usize> = ws.t_factors.iter().map(|t| t.ncols()).collect();
    let mut t_bars: Vec<DMatrix<f64>> = ws
        .t_factors
        .iter()
        .map(|t| DMatrix::zeros(t.nrows(), t.ncols()))
        .collect();
    for f in 0..k {
        let m_f = dims[f];
        let n_f = t_dims_in[f];
        let outer: usize = dims[..f].iter().product();
        let inner: usize = dims[f + 1..].iter().product();
        for j in 0..ws.d_y {
            let yj: Vec<f64> = y.column(j).iter().copied().collect();
            let u = mode_apply_skipping(&ws.t_factors, &yj, f);
            // contract R̄[outer, a, inner]·U[outer, b, inner]
            for o in 0..outer {
                for a in 0..m_f {
                    let rb_base = (o * m_f + a) * inner;
                    for b in 0..n_f {
                        let u_base = (o * n_f + b) * inner;
                        let mut s = 0.0;
                        for r in 0..inner {
                            s += r_bar[(rb_base + r, j)] * u[u_base + r];
                        }
                        t_bars[f][(a, b)] += s;
                    }
                }
            }
        }
    }
    for f in 1..k {
        // spatial C_f = T_f T_fᵀ
        t_bars[f] += (&c_bars[f] + c_bars[f].transpose()) * &ws.t_factors[f];
    }

    // latent Ψ₂ path: C₀ = L₀⁻¹ S L₀⁻ᵀ
    let l0 = &ws.l_factors[0];
    let psi2_latent_bar = {
        let tmp = solve_lower_transpose(l0, &c_bars[0]);
        let s = solve_lower_transpose(l0, &tmp.transpose());
        (&s + s.transpose()) * 0.5
    };

    // L̄ accumulation: latent C path, every factor's T path; then Cholesky
    // reverse to K̄.
    let mut kuu_bar = Vec::with_capacity(k);
    let mut psi1_latent_bar = DMatrix::zeros(0, 0);
    let mut kfu_s_bar = Vec::with_capacity(k.saturating_sub(1));
    for f in 0..k {
        let l = &ws.l_factors[f];
        let mut l_bar = -solve_lower_transpose(l, &(&t_bars[f] * ws.t_factors[f].transpose()));
        if f == 0 {
            l_bar += -2.0 * solve_lower_transpose(l, &(&c_bars[0] * &ws.c_factors[0]));
        }
        // P̄ = T̄ᵀ L⁻¹ computed as (L⁻ᵀ T̄)ᵀ
        let p_bar = solve_lower_transpose(l, &t_bars[f]).transpose();
        if f == 0 {
            psi1_latent_bar = p_bar;
        } else {
            kfu_s_bar.push(p_bar);
        }
        kuu_bar.push(cholesky_reverse(l, &l_bar));
    }

    Ok(BoundAdjoints {
        kuu_bar,
        psi1_latent_bar,
        psi2_latent_bar,
        kfu_s_bar,
        psi0_full_bar: -0.5 * beta * d_yf,
        beta_bar,
    })
}

/// Reverse-mode of the Cholesky factorization: given `K = LLᵀ` and `L̄`,
/// return symmetric `K̄` with `df = Σ_ij K̄_ij dK_ij`.
pub fn cholesky_reverse(l: &DMatrix<f64>, l_bar: &DMatrix<f64>) -> DMatrix<f64> {
    let n = l.nrows();
    // Φ(LᵀL̄): lower triangle, diagonal halved
    let p = l.transpose() * l_bar;
    let mut phi = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            phi[(i, j)] = if i == j { 0.5 * p[(i, j)] } else { p[(i, j)] };
        }
    }
    let sym = (&phi + phi.transpose()) * 0.5;
    // K̄ = L⁻ᵀ sym L⁻¹
    let tmp = solve_lower_transpose(l, &sym);
    let out = solve_lower_transpose(l, &tmp.transpose());
    (&out + out.transpose()) * 0.5
}

/// Optimal variational posterior over inducing outputs at the current
/// workspace: mean `Ū* = K_uu K_ψ⁻¹ Ψ₁ᵀ Y`, covariance
/// `Σ_u* = β⁻¹ K_uu K_ψ⁻¹ K_uu` held in factored form.
pub struct OptimalInducingPosterior {
    pub mean: DMatrix<f64>,
    /// per-factor L_f Q_f (columns span the covariance representation)
    pub lq_factors: Vec<DMatrix<f64>>,
    pub d_values: DVector<f64>,
    pub beta: f64,
}

impl OptimalInducingPosterior {
    /// Dense Σ_u* = β⁻¹·(LQ) D⁻¹ (LQ)ᵀ. Test-scale use only.
    pub fn cov_dense(&self) -> DMatrix<f64> {
        let lq = KronMatrix::new(self.lq_factors.clone()).expect("factors").dense();
        let mut scaled = lq.clone();
        for j in 0..scaled.ncols() {
            for i in 0..scaled.nrows() {
                scaled[(i, j)] /= self.d_values[j];
            }
        }
        scaled * lq.transpose() / self.beta
    }
}

pub fn optimal_q_u(ws: &BoundWorkspace) -> OptimalInducingPosterior {
    let d_vals = ws.d.values();
    let mut g = ws.b.clone();
    for j in 0..g.ncols() {
        for i in 0..g.nrows() {
            g[(i, j)] /= d_vals[i];
        }
    }
    let qg = apply_factors(&ws.q_factors, &g);
    let mean = apply_factors(&ws.l_factors, &qg);
    let lq_factors: Vec<DMatrix<f64>> = ws
        .l_factors
        .iter()
        .zip(ws.q_factors.iter())
        .map(|(l, q)| l * q)
        .collect();
    OptimalInducingPosterior {
        mean,
        lq_factors,
        d_values: d_vals,
        beta: ws.beta,
    }
}

/// Frozen per-model state reused across test cases: `Ū*`, `H = K_uu⁻¹Ū*`,
/// and the spatial sides of the training eigensystem.
pub struct TestSideModel {
    pub u_bar: DMatrix<f64>,
    pub h: DMatrix<f64>,
    pub m_xi: usize,
    pub m_s: usize,
    pub d_y: usize,
    pub beta: f64,
    /// latent-factor L₀ and Q₀
    pub l_xi: DMatrix<f64>,
    pub q_xi: DMatrix<f64>,
    /// spatial factors of L and Q (everything after the latent factor)
    pub l_s: Vec<DMatrix<f64>>,
    pub q_s: Vec<DMatrix<f64>>,
    pub d_values: DVector<f64>,
}

impl TestSideModel {
    pub fn from_workspace(ws: &BoundWorkspace) -> Self {
        let opt = optimal_q_u(ws);
        // H = K_uu⁻¹ Ū = L⁻ᵀ Q D⁻¹ B
        let d_vals = ws.d.values();
        let mut g = ws.b.clone();
        for j in 0..g.ncols() {
            for i in 0..g.nrows() {
                g[(i, j)] /= d_vals[i];
            }
        }
        let qg = apply_factors(&ws.q_factors, &g);
        let lt_inv: Vec<DMatrix<f64>> = ws
            .l_factors
            .iter()
            .map(|l| {
                let mut inv = DMatrix::identity(l.nrows(), l.nrows());
                l.solve_lower_triangular_mut(&mut inv);
                inv.transpose()
            })
            .collect();
        let h = apply_factors(&lt_inv, &qg);
        let m_xi = ws.l_factors[0].nrows();
        let m_s: usize = ws.l_factors[1..].iter().map(|l| l.nrows()).product();
        TestSideModel {
            u_bar: opt.mean,
            h,
            m_xi,
            m_s,
            d_y: ws.d_y,
            beta: ws.beta,
            l_xi: ws.l_factors[0].clone(),
            q_xi: ws.q_factors[0].clone(),
            l_s: ws.l_factors[1..].to_vec(),
            q_s: ws.q_factors[1..].to_vec(),
            d_values: d_vals,
        }
    }
}

/// Per-test-case precomputation: everything in L* that does not depend on
/// the test latent posterior.
pub struct TestCaseContext {
    pub n_star: usize,
    /// βΣ_k ψ₁^(ξ,*)[k]·w1[k] is the cross term
    pub w1: DVector<f64>,
    /// quadratic form weights against ψ₂^(ξ,*)
    pub w2_mean: DMatrix<f64>,
    /// Σ_s diag(G_s)[s] / d[(k,s)] per latent eigenindex k
    pub v_xi: DVector<f64>,
    /// tr over the spatial side of L⁻¹Ψ₂*L⁻ᵀ
    pub c_s: f64,
    pub tr_ystar: f64,
    /// spatial part of ψ₀*: Σ_p Π_f σ²_f
    pub psi0_spatial: f64,
}

impl TestCaseContext {
    /// `k_s_star` is the cross covariance between observed test spatial
    /// points and the inducing spatial grid (n_s*×m_s); `y_star` the
    /// observations at those points.
    pub fn build(
        side: &TestSideModel,
        k_s_star: &DMatrix<f64>,
        y_star: &DMatrix<f64>,
        spatial_variance_prod: f64,
    ) -> Result<Self> {
        let n_star = y_star.nrows();
        if k_s_star.nrows() != n_star {
            return Err(Error::Shape(format!(
                "{} spatial rows for {} test observations",
                k_s_star.nrows(),
                n_star
            )));
        }
        if k_s_star.ncols() != side.m_s {
            return Err(Error::Shape("test spatial cross width != m_s".into()));
        }
        if y_star.ncols() != side.d_y {
            return Err(Error::Shape("test observation channels != d_y".into()));
        }
        for v in y_star.iter() {
            if !v.is_finite() {
                return Err(Error::Input("NaN in observed test values".into()));
            }
        }
        let (m_xi, m_s) = (side.m_xi, side.m_s);

        // w1[k] = Σ_{s,j} H[(k,s),j]·(K_s*ᵀ Y*)[s,j]
        let ky = k_s_star.transpose() * y_star;
        let mut w1 = DVector::zeros(m_xi);
        for j in 0..side.d_y {
            for k in 0..m_xi {
                let mut s = 0.0;
                for sidx in 0..m_s {
                    s += side.h[(k * m_s + sidx, j)] * ky[(sidx, j)];
                }
                w1[k] += s;
            }
        }

        // S_s* = K_s*ᵀ K_s*
        let s_s = k_s_star.transpose() * k_s_star;

        // W2 = Σ_j H̃_j S_s* H̃_jᵀ (mean part of the quadratic)
        let mut w2_mean = DMatrix::zeros(m_xi, m_xi);
        for j in 0..side.d_y {
            let hj = DMatrix::from_fn(m_xi, m_s, |k, s| side.h[(k * m_s + s, j)]);
            w2_mean += &hj * &s_s * hj.transpose();
        }

        // diag(G_s): Vsᵀ = ⊗(Q_fᵀ L_f⁻¹) K_s*ᵀ, diag = column sums of squares
        let ql_inv: Vec<DMatrix<f64>> = side
            .l_s
            .iter()
            .zip(side.q_s.iter())
            .map(|(l, q)| {
                let mut inv = DMatrix::identity(l.nrows(), l.nrows());
                l.solve_lower_triangular_mut(&mut inv);
                q.transpose() * inv
            })
            .collect();
        let vs_t = if ql_inv.is_empty() {
            k_s_star.transpose()
        } else {
            apply_factors(&ql_inv, &k_s_star.transpose())
        };
        let mut diag_gs = DVector::zeros(m_s);
        for s in 0..m_s {
            let mut acc = 0.0;
            for p in 0..n_star {
                acc += vs_t[(s, p)] * vs_t[(s, p)];
            }
            diag_gs[s] = acc;
        }
        let mut v_xi = DVector::zeros(m_xi);
        for k in 0..m_xi {
            let mut acc = 0.0;
            for s in 0..m_s {
                acc += diag_gs[s] / side.d_values[k * m_s + s];
            }
            v_xi[k] = acc;
        }

        // c_s = ‖⊗L_f⁻¹ K_s*ᵀ‖²
        let l_inv: Vec<DMatrix<f64>> = side
            .l_s
            .iter()
            .map(|l| {
                let mut inv = DMatrix::identity(l.nrows(), l.nrows());
                l.solve_lower_triangular_mut(&mut inv);
                inv
            })
            .collect();
        let ts = if l_inv.is_empty() {
            k_s_star.transpose()
        } else {
            apply_factors(&l_inv, &k_s_star.transpose())
        };
        let c_s: f64 = ts.iter().map(|v| v * v).sum();

        Ok(TestCaseContext {
            n_star,
            w1,
            w2_mean,
            v_xi,
            c_s,
            tr_ystar: y_star.iter().map(|v| v * v).sum(),
            psi0_spatial: n_star as f64 * spatial_variance_prod,
        })
    }
}

/// L* evaluated at the test latent psi statistics, excluding the test KL
/// (the caller owns the prior). Also returns the adjoints with respect to
/// ψ₁^(ξ,*) and ψ₂^(ξ,*) when requested.
pub fn test_bound_terms(
    side: &TestSideModel,
    ctx: &TestCaseContext,
    psi0_xi_star: f64,
    psi1_xi_star: &DVector<f64>,
    psi2_xi_star: &DMatrix<f64>,
    want_grad: bool,
) -> (f64, Option<(DVector<f64>, DMatrix<f64>)>) {
    let beta = side.beta;
    let d_y = side.d_y as f64;
    let n_star = ctx.n_star as f64;

    if ctx.n_star == 0 {
        let zero_grad = if want_grad {
            Some((
                DVector::zeros(side.m_xi),
                DMatrix::zeros(side.m_xi, side.m_xi),
            ))
        } else {
            None
        };
        return (0.0, zero_grad);
    }

    let constant = -0.5 * n_star * d_y * (LOG_2PI - beta.ln()) - 0.5 * beta * ctx.tr_ystar;
    let cross = beta * psi1_xi_star.dot(&ctx.w1);
    let quad_mean = -0.5 * beta * psi2_xi_star.dot(&ctx.w2_mean);

    // Σ_u part: −(d_y/2) Σ_k diag(Q₀ᵀL₀⁻¹ψ₂*L₀⁻ᵀQ₀)[k]·v_ξ[k]
    let lt = solve_lower(&side.l_xi, psi2_xi_star);
    let lpsil = solve_lower(&side.l_xi, &lt.transpose());
    let gxi = side.q_xi.transpose() * &lpsil * &side.q_xi;
    let mut quad_cov = 0.0;
    for k in 0..side.m_xi {
        quad_cov += gxi[(k, k)] * ctx.v_xi[k];
    }
    quad_cov *= -0.5 * d_y;

    // trace correction: −(βd_y/2)(ψ₀* − c_s·tr(L₀⁻¹ψ₂*L₀⁻ᵀ))
    let t_xi = lpsil.trace();
    let psi0_star = psi0_xi_star * ctx.psi0_spatial;
    let trace_corr = -0.5 * beta * d_y * (psi0_star - ctx.c_s * t_xi);

    let value = constant + cross + quad_mean + quad_cov + trace_corr;

    let grads = if want_grad {
        let psi1_bar = &ctx.w1 * beta;
        // ψ̄₂ = −(β/2)W2 − (d_y/2)L⁻ᵀQ diag(v_ξ) QᵀL⁻¹ + (βd_y/2)c_s L⁻ᵀL⁻¹
        let qdq = {
            let mut qd = side.q_xi.clone();
            for k in 0..side.m_xi {
                let scale = ctx.v_xi[k];
                for i in 0..side.m_xi {
                    qd[(i, k)] *= scale;
                }
            }
            qd * side.q_xi.transpose()
        };
        let ltinv = {
            let mut inv = DMatrix::identity(side.m_xi, side.m_xi);
            side.l_xi.solve_lower_triangular_mut(&mut inv);
            inv
        };
        let sandwich = ltinv.transpose() * qdq * &ltinv;
        let ll = ltinv.transpose() * &ltinv;
        let mut psi2_bar = -0.5 * beta * &ctx.w2_mean;
        psi2_bar += sandwich * (-0.5 * d_y);
        psi2_bar += ll * (0.5 * beta * d_y * ctx.c_s);
        let psi2_bar = (&psi2_bar + psi2_bar.transpose()) * 0.5;
        Some((psi1_bar, psi2_bar))
    } else {
        None
    };
    (value, grads)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::{KernelFamily, KernelSpec};
    use crate::psi::structured_psi;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn random_instance(
        rng: &mut impl Rng,
        n_xi: usize,
        n_s: (usize, usize),
        m_xi: usize,
        m_s: (usize, usize),
        d_xi: usize,
        d_y: usize,
    ) -> (
        StructuredPsiSet,
        Vec<DMatrix<f64>>,
        DMatrix<f64>,
        f64,
        f64,
    ) {
        let latent = KernelSpec::new(
            KernelFamily::ArdRbf,
            rng.gen_range(0.5..2.0),
            (0..d_xi).map(|_| rng.gen_range(0.6..1.6)).collect(),
        )
        .unwrap();
        let s1 = KernelSpec::new(KernelFamily::Matern32, rng.gen_range(0.5..1.5), vec![rng.gen_range(0.8..2.0)]).unwrap();
        let s2 = KernelSpec::new(KernelFamily::ArdRbf, rng.gen_range(0.5..1.5), vec![rng.gen_range(0.8..2.0)]).unwrap();
        let mean = DMatrix::from_fn(n_xi, d_xi, |_, _| rng.gen_range(-1.0..1.0));
        let var = DMatrix::from_fn(n_xi, d_xi, |_, _| rng.gen_range(0.05..0.5));
        let z_xi = DMatrix::from_fn(m_xi, d_xi, |_, _| rng.gen_range(-1.0..1.0));
        let x1 = DMatrix::from_fn(n_s.0, 1, |i, _| i as f64);
        let x2 = DMatrix::from_fn(n_s.1, 1, |i, _| i as f64);
        let z1 = DMatrix::from_fn(m_s.0, 1, |i, _| i as f64 + 0.3);
        let z2 = DMatrix::from_fn(m_s.1, 1, |i, _| i as f64 + 0.2);
        let psi = structured_psi(&mean, &var, &z_xi, &[z1.clone(), z2.clone()], &[x1, x2], &latent, &[s1.clone(), s2.clone()]).unwrap();
        let kuu = vec![
            crate::kernels::kernel_matrix(&latent, &z_xi, &z_xi).unwrap()
                + DMatrix::identity(m_xi, m_xi) * 1e-6,
            crate::kernels::kernel_matrix(&s1, &z1, &z1).unwrap()
                + DMatrix::identity(m_s.0, m_s.0) * 1e-6,
            crate::kernels::kernel_matrix(&s2, &z2, &z2).unwrap()
                + DMatrix::identity(m_s.1, m_s.1) * 1e-6,
        ];
        let n = n_xi * n_s.0 * n_s.1;
        let y = DMatrix::from_fn(n, d_y, |_, _| rng.gen_range(-1.0..1.0));
        let beta = rng.gen_range(0.5..4.0);
        let psi0_full = psi.psi0_full;
        (psi, kuu, y, beta, psi0_full)
    }

    #[test]
    fn zero_psi2_degenerate_case() {
        // Ψ₂ = 0 → C = 0, D = β⁻¹ everywhere
        let mut psi = {
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            random_instance(&mut rng, 3, (2, 2), 2, (2, 2), 2, 1).0
        };
        psi.latent.psi2.fill(0.0);
        for kf in psi.kfu_s.iter_mut() {
            kf.fill(0.0);
        }
        let kuu = vec![
            DMatrix::identity(2, 2),
            DMatrix::identity(2, 2),
            DMatrix::identity(2, 2),
        ];
        let y = DMatrix::zeros(12, 1);
        let ws = BoundWorkspace::build(&psi, &kuu, &y, 2.0).unwrap();
        for v in ws.d.values().iter() {
            approx::assert_relative_eq!(*v, 0.5, epsilon = 1e-12);
        }
        assert_eq!(ws.b.norm(), 0.0, "Y = 0 → B = 0");
    }

    #[test]
    fn bound_closed_form_limit() {
        // Ψ = 0, Y = 0: L = (d_y/2)(n lnβ − n ln2π) − kl
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (mut psi, kuu, _, _, _) = random_instance(&mut rng, 3, (2, 2), 2, (2, 2), 2, 1);
        psi.latent.psi2.fill(0.0);
        psi.latent.psi1.fill(0.0);
        for kf in psi.kfu_s.iter_mut() {
            kf.fill(0.0);
        }
        let y = DMatrix::zeros(12, 2);
        let beta = 50.0;
        let ws = BoundWorkspace::build(&psi, &kuu, &y, beta).unwrap();
        let kl = 0.7;
        let got = collapsed_bound(&ws, 0.0, &y, kl).unwrap();
        let n = 12.0;
        let d_y = 2.0;
        let want = 0.5 * d_y * (n * beta.ln() - n * LOG_2PI) - kl;
        approx::assert_relative_eq!(got, want, epsilon = 1e-10);
    }

    #[test]
    fn cholesky_reverse_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let n = 4;
        let a = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
        let k = &a * a.transpose() + DMatrix::identity(n, n);
        let l_bar = DMatrix::from_fn(n, n, |i, j| if i >= j { rng.gen_range(-1.0..1.0) } else { 0.0 });
        let f = |k: &DMatrix<f64>| -> f64 {
            let l = nalgebra::Cholesky::new(k.clone()).unwrap().l();
            l_bar.dot(&l)
        };
        let l = nalgebra::Cholesky::new(k.clone()).unwrap().l();
        let k_bar = cholesky_reverse(&l, &l_bar);
        let h = 1e-6;
        for i in 0..n {
            for j in 0..n {
                let mut kp = k.clone();
                let mut km = k.clone();
                kp[(i, j)] += h;
                kp[(j, i)] += if i == j { 0.0 } else { h };
                km[(i, j)] -= h;
                km[(j, i)] -= if i == j { 0.0 } else { h };
                let fd = (f(&kp) - f(&km)) / (2.0 * h);
                let analytic = if i == j {
                    k_bar[(i, j)]
                } else {
                    k_bar[(i, j)] + k_bar[(j, i)]
                };
                assert!(
                    (analytic - fd).abs() < 1e-5 * fd.abs().max(1.0),
                    "({i},{j}): {analytic} vs {fd}"
                );
            }
        }
    }

    #[test]
    fn adjoints_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (psi, kuu, y, beta, psi0) = random_instance(&mut rng, 3, (2, 3), 2, (2, 2), 2, 2);
        let eval = |psi: &StructuredPsiSet, kuu: &[DMatrix<f64>], beta: f64| -> f64 {
            let psi0_full = psi.latent.psi0 * psi.tr_kff_s.iter().product::<f64>();
            let ws = BoundWorkspace::build(psi, kuu, &y, beta).unwrap();
            collapsed_bound(&ws, psi0_full, &y, 0.0).unwrap()
        };
        let ws = BoundWorkspace::build(&psi, &kuu, &y, beta).unwrap();
        let adj = collapsed_bound_adjoints(&ws, &y, psi0).unwrap();
        let h = 1e-6;
        let rel = |a: f64, b: f64| (a - b).abs() / b.abs().max(a.abs()).max(1e-4);

        // Ψ₁^(ξ) entries
        for i in 0..psi.latent.psi1.nrows() {
            for k in 0..psi.latent.psi1.ncols() {
                let mut pp = psi.clone();
                pp.latent.psi1[(i, k)] += h;
                let mut pm = psi.clone();
                pm.latent.psi1[(i, k)] -= h;
                let fd = (eval(&pp, &kuu, beta) - eval(&pm, &kuu, beta)) / (2.0 * h);
                assert!(
                    rel(adj.psi1_latent_bar[(i, k)], fd) < 1e-4,
                    "psi1 ({i},{k}): {} vs {}",
                    adj.psi1_latent_bar[(i, k)],
                    fd
                );
            }
        }
        // Ψ₂^(ξ) entries (symmetric perturbation)
        for i in 0..psi.latent.psi2.nrows() {
            for k in 0..=i {
                let mut pp = psi.clone();
                let mut pm = psi.clone();
                pp.latent.psi2[(i, k)] += h;
                pm.latent.psi2[(i, k)] -= h;
                if i != k {
                    pp.latent.psi2[(k, i)] += h;
                    pm.latent.psi2[(k, i)] -= h;
                }
                let fd = (eval(&pp, &kuu, beta) - eval(&pm, &kuu, beta)) / (2.0 * h);
                let analytic = if i == k {
                    adj.psi2_latent_bar[(i, k)]
                } else {
                    adj.psi2_latent_bar[(i, k)] + adj.psi2_latent_bar[(k, i)]
                };
                assert!(rel(analytic, fd) < 1e-4, "psi2 ({i},{k}): {analytic} vs {fd}");
            }
        }
        // spatial K_fu entries
        for (f, kf) in psi.kfu_s.iter().enumerate() {
            for i in 0..kf.nrows() {
                for k in 0..kf.ncols() {
                    let mut pp = psi.clone();
                    let mut pm = psi.clone();
                    pp.kfu_s[f][(i, k)] += h;
                    pm.kfu_s[f][(i, k)] -= h;
                    let fd = (eval(&pp, &kuu, beta) - eval(&pm, &kuu, beta)) / (2.0 * h);
                    assert!(
                        rel(adj.kfu_s_bar[f][(i, k)], fd) < 1e-4,
                        "kfu[{f}] ({i},{k}): {} vs {}",
                        adj.kfu_s_bar[f][(i, k)],
                        fd
                    );
                }
            }
        }
        // K_uu factors (symmetric perturbation)
        for f in 0..kuu.len() {
            for i in 0..kuu[f].nrows() {
                for k in 0..=i {
                    let mut kp = kuu.clone();
                    let mut km = kuu.clone();
                    kp[f][(i, k)] += h;
                    km[f][(i, k)] -= h;
                    if i != k {
                        kp[f][(k, i)] += h;
                        km[f][(k, i)] -= h;
                    }
                    let fd = (eval(&psi, &kp, beta) - eval(&psi, &km, beta)) / (2.0 * h);
                    let analytic = if i == k {
                        adj.kuu_bar[f][(i, k)]
                    } else {
                        adj.kuu_bar[f][(i, k)] + adj.kuu_bar[f][(k, i)]
                    };
                    assert!(rel(analytic, fd) < 1e-4, "kuu[{f}] ({i},{k}): {analytic} vs {fd}");
                }
            }
        }
        // β
        let fd = (eval(&psi, &kuu, beta + h) - eval(&psi, &kuu, beta - h)) / (2.0 * h);
        assert!(rel(adj.beta_bar, fd) < 1e-4, "beta: {} vs {}", adj.beta_bar, fd);
    }

    #[test]
    fn bound_invariant_to_inducing_permutation() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (psi, kuu, y, beta, psi0) = random_instance(&mut rng, 4, (3, 2), 3, (2, 2), 2, 1);
        let ws = BoundWorkspace::build(&psi, &kuu, &y, beta).unwrap();
        let l0 = collapsed_bound(&ws, psi0, &y, 0.3).unwrap();

        // permute latent inducing index (swap 0 and 2) consistently
        let perm = [2usize, 1, 0];
        let mut psi_p = psi.clone();
        for i in 0..psi.latent.psi1.nrows() {
            for (knew, &kold) in perm.iter().enumerate() {
                psi_p.latent.psi1[(i, knew)] = psi.latent.psi1[(i, kold)];
            }
        }
        for (a_new, &a_old) in perm.iter().enumerate() {
            for (b_new, &b_old) in perm.iter().enumerate() {
                psi_p.latent.psi2[(a_new, b_new)] = psi.latent.psi2[(a_old, b_old)];
            }
        }
        let mut kuu_p = kuu.clone();
        for (a_new, &a_old) in perm.iter().enumerate() {
            for (b_new, &b_old) in perm.iter().enumerate() {
                kuu_p[0][(a_new, b_new)] = kuu[0][(a_old, b_old)];
            }
        }
        let ws_p = BoundWorkspace::build(&psi_p, &kuu_p, &y, beta).unwrap();
        let l1 = collapsed_bound(&ws_p, psi0, &y, 0.3).unwrap();
        assert!((l0 - l1).abs() < 1e-10 * l0.abs().max(1.0), "{l0} vs {l1}");
    }

    #[test]
    fn data_fit_monotone_in_noise() {
        // increasing β⁻¹ never increases tr(D⁻¹BBᵀ)
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (psi, kuu, y, _, _) = random_instance(&mut rng, 3, (2, 2), 2, (2, 2), 2, 1);
        let mut last = f64::INFINITY;
        for beta in [8.0, 4.0, 2.0, 1.0, 0.5] {
            let ws = BoundWorkspace::build(&psi, &kuu, &y, beta).unwrap();
            let fit = ws.data_fit();
            assert!(fit <= last + 1e-12, "fit {fit} increased from {last}");
            last = fit;
        }
    }
}
