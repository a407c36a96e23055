//! Kronecker-product linear algebra on small dense factors.
//!
//! A matrix `A_1 ⊗ ... ⊗ A_k` is stored as its factor list and never
//! materialized. Row/column multi-indices follow the convention that the
//! last factor's index varies fastest, so for the model's `K^(ξ) ⊗ K^(s)`
//! structure a flat row `r` of an `n_ξ·n_s` vector maps to `(i_ξ, i_s)`
//! with `i_s` fastest.

use crate::error::{Error, Result};
use nalgebra::{DMatrix, DVector};

/// A matrix represented as the Kronecker product of dense factors.
#[derive(Debug, Clone)]
pub struct KronMatrix {
    factors: Vec<DMatrix<f64>>,
}

impl KronMatrix {
    pub fn new(factors: Vec<DMatrix<f64>>) -> Result<Self> {
        if factors.is_empty() {
            return Err(Error::Input("Kronecker factor list is empty".into()));
        }
        Ok(Self { factors })
    }

    pub fn factors(&self) -> &[DMatrix<f64>] {
        &self.factors
    }

    pub fn nrows(&self) -> usize {
        self.factors.iter().map(|f| f.nrows()).product()
    }

    pub fn ncols(&self) -> usize {
        self.factors.iter().map(|f| f.ncols()).product()
    }

    /// Dense materialization. Test and small-instance use only.
    pub fn dense(&self) -> DMatrix<f64> {
        let mut out = DMatrix::from_element(1, 1, 1.0);
        for f in &self.factors {
            out = dense_kron(&out, f);
        }
        out
    }

    /// `(A_1 ⊗ ... ⊗ A_k)·v` without forming the dense product.
    pub fn matvec(&self, v: &DVector<f64>) -> Result<DVector<f64>> {
        if v.len() != self.ncols() {
            return Err(Error::Shape(format!(
                "kron matvec: vector length {} != column count {}",
                v.len(),
                self.ncols()
            )));
        }
        let out = mode_apply(&self.factors, v.as_slice());
        Ok(DVector::from_vec(out))
    }

    /// Column-wise [`Self::matvec`].
    pub fn matmat(&self, m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if m.nrows() != self.ncols() {
            return Err(Error::Shape(format!(
                "kron matmat: operand rows {} != column count {}",
                m.nrows(),
                self.ncols()
            )));
        }
        let mut out = DMatrix::zeros(self.nrows(), m.ncols());
        for j in 0..m.ncols() {
            let col: Vec<f64> = m.column(j).iter().copied().collect();
            let r = mode_apply(&self.factors, &col);
            out.column_mut(j).copy_from_slice(&r);
        }
        Ok(out)
    }

    /// The transposed operator `(A_1ᵀ ⊗ ... ⊗ A_kᵀ)`.
    pub fn transpose(&self) -> KronMatrix {
        KronMatrix {
            factors: self.factors.iter().map(|f| f.transpose()).collect(),
        }
    }

    /// Elementwise Kronecker combination of the factor diagonals.
    pub fn diag(&self) -> Result<DVector<f64>> {
        for (i, f) in self.factors.iter().enumerate() {
            if f.nrows() != f.ncols() {
                return Err(Error::Shape(format!(
                    "kron diag: factor {i} is {}x{} (not square)",
                    f.nrows(),
                    f.ncols()
                )));
            }
        }
        let diags: Vec<Vec<f64>> = self
            .factors
            .iter()
            .map(|f| f.diagonal().iter().copied().collect())
            .collect();
        Ok(DVector::from_vec(kron_vecs(&diags)))
    }
}

/// Factored eigendecomposition `Q diag(λ) Qᵀ` of a symmetric Kronecker product.
#[derive(Debug, Clone)]
pub struct KronEig {
    pub q_factors: Vec<DMatrix<f64>>,
    pub lambda_factors: Vec<DVector<f64>>,
}

impl KronEig {
    pub fn q(&self) -> KronMatrix {
        KronMatrix {
            factors: self.q_factors.clone(),
        }
    }

    /// All eigenvalues of the represented matrix: the Kronecker combination
    /// of the factor eigenvalues, last factor fastest.
    pub fn lambdas(&self) -> DVector<f64> {
        let vecs: Vec<Vec<f64>> = self
            .lambda_factors
            .iter()
            .map(|l| l.iter().copied().collect())
            .collect();
        DVector::from_vec(kron_vecs(&vecs))
    }
}

/// Diagonal-plus-constant vector `β⁻¹ + λ_I`, stored explicitly (m entries).
#[derive(Debug, Clone)]
pub struct DiagPlusConst {
    pub diag: DVector<f64>,
    pub constant: f64,
}

impl DiagPlusConst {
    pub fn new(diag: DVector<f64>, constant: f64) -> Result<Self> {
        for (i, &d) in diag.iter().enumerate() {
            if constant + d <= 0.0 {
                return Err(Error::Input(format!(
                    "diag-plus-const entry {i} is non-positive: {} + {} = {}",
                    constant,
                    d,
                    constant + d
                )));
            }
        }
        Ok(Self { diag, constant })
    }

    pub fn values(&self) -> DVector<f64> {
        self.diag.map(|d| d + self.constant)
    }
}

/// Per-factor lower Cholesky of `⊗(K_i + jitter_i·I)` with escalating jitter.
///
/// Jitter starts at `base_jitter` (or `1e-8 × mean diagonal` when zero is
/// passed and the bare factorization fails) and multiplies by 10 up to
/// `1e-2 × mean diagonal` before giving up.
pub fn factored_cholesky(k: &KronMatrix, base_jitter: f64) -> Result<KronMatrix> {
    let mut factors = Vec::with_capacity(k.factors.len());
    for (i, f) in k.factors.iter().enumerate() {
        factors.push(jittered_cholesky(f, base_jitter).map_err(|e| {
            Error::Decomposition(format!("Kronecker factor {i}: {e}"))
        })?);
    }
    KronMatrix::new(factors)
}

/// Cholesky of a single symmetric factor with jitter escalation.
pub fn jittered_cholesky(f: &DMatrix<f64>, base_jitter: f64) -> Result<DMatrix<f64>> {
    let n = f.nrows();
    if n != f.ncols() {
        return Err(Error::Shape(format!("factor is {}x{}", n, f.ncols())));
    }
    let mean_diag = f.diagonal().iter().map(|d| d.abs()).sum::<f64>() / n as f64;
    let mut jitter = base_jitter;
    loop {
        let attempt = if jitter == 0.0 {
            f.clone()
        } else {
            let mut a = f.clone();
            for i in 0..n {
                a[(i, i)] += jitter;
            }
            a
        };
        if let Some(chol) = nalgebra::Cholesky::new(attempt) {
            return Ok(chol.l());
        }
        let scale = if mean_diag > 0.0 { mean_diag } else { 1.0 };
        jitter = if jitter == 0.0 {
            1e-8 * scale
        } else {
            jitter * 10.0
        };
        if jitter > 1e-2 * scale {
            return Err(Error::Decomposition(format!(
                "not positive definite after jitter escalation to {jitter:.3e}"
            )));
        }
    }
}

/// Per-factor symmetric eigendecomposition, eigenvalues sorted ascending.
pub fn factored_eig_sym(k: &KronMatrix) -> Result<KronEig> {
    let mut q_factors = Vec::with_capacity(k.factors.len());
    let mut lambda_factors = Vec::with_capacity(k.factors.len());
    for (i, f) in k.factors.iter().enumerate() {
        let (q, l) = eig_sym(f)
            .map_err(|e| Error::Input(format!("Kronecker factor {i}: {e}")))?;
        q_factors.push(q);
        lambda_factors.push(l);
    }
    Ok(KronEig {
        q_factors,
        lambda_factors,
    })
}

/// Symmetric eigendecomposition of one dense factor; (Q, λ) with λ ascending.
///
/// Cyclic Jacobi iterated to machine precision: the factors are small, and
/// the fully-converged rotations keep the bound smooth enough for tight
/// finite-difference gradient checks.
pub fn eig_sym(f: &DMatrix<f64>) -> Result<(DMatrix<f64>, DVector<f64>)> {
    let n = f.nrows();
    if n != f.ncols() {
        return Err(Error::Shape(format!("matrix is {}x{}", n, f.ncols())));
    }
    let mut asym: f64 = 0.0;
    let mut scale: f64 = 0.0;
    for i in 0..n {
        for j in 0..n {
            asym = asym.max((f[(i, j)] - f[(j, i)]).abs());
            scale = scale.max(f[(i, j)].abs());
        }
    }
    if asym > 1e-8 * scale.max(1.0) {
        return Err(Error::Input(format!(
            "matrix not symmetric (max asymmetry {asym:.3e})"
        )));
    }
    let mut a = (f + f.transpose()) * 0.5;
    let mut v = DMatrix::identity(n, n);
    let fro = a.norm().max(1e-300);
    for _sweep in 0..60 {
        let mut off = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                off += a[(i, j)] * a[(i, j)];
            }
        }
        if off.sqrt() <= 1e-15 * fro {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[(p, q)];
                if apq.abs() <= 1e-300 {
                    continue;
                }
                let tau = (a[(q, q)] - a[(p, p)]) / (2.0 * apq);
                let t = if tau >= 0.0 {
                    1.0 / (tau + (1.0 + tau * tau).sqrt())
                } else {
                    -1.0 / (-tau + (1.0 + tau * tau).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[(k, p)];
                    let akq = a[(k, q)];
                    a[(k, p)] = c * akp - s * akq;
                    a[(k, q)] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[(p, k)];
                    let aqk = a[(q, k)];
                    a[(p, k)] = c * apk - s * aqk;
                    a[(q, k)] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let vkp = v[(k, p)];
                    let vkq = v[(k, q)];
                    v[(k, p)] = c * vkp - s * vkq;
                    v[(k, q)] = s * vkp + c * vkq;
                }
            }
        }
    }
    // Sort ascending for a canonical, deterministic order.
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&x, &y| a[(x, x)].total_cmp(&a[(y, y)]));
    let mut q = DMatrix::zeros(n, n);
    let mut l = DVector::zeros(n);
    for (new, &old) in idx.iter().enumerate() {
        l[new] = a[(old, old)];
        q.column_mut(new).copy_from(&v.column(old));
    }
    Ok((q, l))
}

/// `L⁻¹·B` where `L` is a Kronecker product of lower-triangular factors.
pub fn kron_tri_solve(l: &KronMatrix, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if b.nrows() != l.nrows() {
        return Err(Error::Shape(format!(
            "kron tri-solve: rhs rows {} != operator size {}",
            b.nrows(),
            l.nrows()
        )));
    }
    for (i, f) in l.factors.iter().enumerate() {
        if f.nrows() != f.ncols() {
            return Err(Error::Shape(format!("triangular factor {i} not square")));
        }
        for d in 0..f.nrows() {
            if f[(d, d)] == 0.0 {
                return Err(Error::Singular(format!(
                    "triangular factor {i} has zero diagonal entry {d}"
                )));
            }
        }
    }
    let inv_factors: Vec<DMatrix<f64>> = l
        .factors
        .iter()
        .map(|f| lower_tri_inverse_apply_identity(f))
        .collect();
    let op = KronMatrix::new(inv_factors)?;
    op.matmat(b)
}

fn lower_tri_inverse_apply_identity(l: &DMatrix<f64>) -> DMatrix<f64> {
    let n = l.nrows();
    let mut inv = DMatrix::identity(n, n);
    l.solve_lower_triangular_mut(&mut inv);
    inv
}

/// Dense Kronecker product of two matrices. Small-factor helper.
pub fn dense_kron(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let (ra, ca) = a.shape();
    let (rb, cb) = b.shape();
    let mut out = DMatrix::zeros(ra * rb, ca * cb);
    for i in 0..ra {
        for j in 0..ca {
            let v = a[(i, j)];
            if v == 0.0 {
                continue;
            }
            for p in 0..rb {
                for q in 0..cb {
                    out[(i * rb + p, j * cb + q)] = v * b[(p, q)];
                }
            }
        }
    }
    out
}

/// Kronecker combination of vectors (last vector fastest-varying).
pub fn kron_vecs(vs: &[Vec<f64>]) -> Vec<f64> {
    let mut out = vec![1.0];
    for v in vs {
        let mut next = Vec::with_capacity(out.len() * v.len());
        for &o in &out {
            for &x in v {
                next.push(o * x);
            }
        }
        out = next;
    }
    out
}

/// Apply `⊗A_f` to a flat vector via successive mode products.
///
/// Intermediate tensor shapes are `(m_0,..,m_{f-1}, n_f,..,n_{k-1})`;
/// memory stays proportional to the largest intermediate, never `Πm × Πn`.
pub fn mode_apply(factors: &[DMatrix<f64>], v: &[f64]) -> Vec<f64> {
    let in_dims: Vec<usize> = factors.iter().map(|f| f.ncols()).collect();
    let out_dims: Vec<usize> = factors.iter().map(|f| f.nrows()).collect();
    debug_assert_eq!(v.len(), in_dims.iter().product::<usize>());
    let mut cur = v.to_vec();
    for (f, a) in factors.iter().enumerate() {
        let outer: usize = out_dims[..f].iter().product();
        let inner: usize = in_dims[f + 1..].iter().product();
        cur = mode_product(a, &cur, outer, in_dims[f], inner);
    }
    cur
}

/// One mode product: view `v` as `outer` blocks of row-major `(rows_in × inner)`
/// and left-multiply each block by `a` (`rows_out × rows_in`).
fn mode_product(a: &DMatrix<f64>, v: &[f64], outer: usize, rows_in: usize, inner: usize) -> Vec<f64> {
    let rows_out = a.nrows();
    let mut out = vec![0.0; outer * rows_out * inner];
    for o in 0..outer {
        let in_base = o * rows_in * inner;
        let out_base = o * rows_out * inner;
        for i in 0..rows_out {
            let row_out = &mut out[out_base + i * inner..out_base + (i + 1) * inner];
            for j in 0..rows_in {
                let c = a[(i, j)];
                if c == 0.0 {
                    continue;
                }
                let row_in = &v[in_base + j * inner..in_base + (j + 1) * inner];
                for (ro, ri) in row_out.iter_mut().zip(row_in.iter()) {
                    *ro += c * ri;
                }
            }
        }
    }
    out
}

/// Apply `⊗A_f` to every column of a matrix.
pub fn apply_factors(factors: &[DMatrix<f64>], m: &DMatrix<f64>) -> DMatrix<f64> {
    let rows: usize = factors.iter().map(|f| f.nrows()).product();
    let mut out = DMatrix::zeros(rows, m.ncols());
    for j in 0..m.ncols() {
        let col: Vec<f64> = m.column(j).iter().copied().collect();
        out.column_mut(j).copy_from_slice(&mode_apply(factors, &col));
    }
    out
}

/// Apply all factors except `skip`, leaving that mode untouched.
/// Used by the gradient pass to form mode-open contractions.
pub fn mode_apply_skipping(factors: &[DMatrix<f64>], v: &[f64], skip: usize) -> Vec<f64> {
    let mut cur = v.to_vec();
    // dims of the current tensor, updated as factors are applied
    let mut dims: Vec<usize> = factors.iter().map(|f| f.ncols()).collect();
    for (f, a) in factors.iter().enumerate() {
        if f == skip {
            continue;
        }
        let outer: usize = dims[..f].iter().product();
        let inner: usize = dims[f + 1..].iter().product();
        cur = mode_product(a, &cur, outer, dims[f], inner);
        dims[f] = a.nrows();
    }
    cur
}

/// Log-determinant of a symmetric PD Kronecker product from its factors:
/// `Σ_f (N/n_f)·logdet(K_f)` with `N = Πn_f`.
pub fn factored_log_det(k: &KronMatrix) -> Result<f64> {
    let n: usize = k.factors.iter().map(|f| f.nrows()).product();
    let mut total = 0.0;
    for (i, f) in k.factors.iter().enumerate() {
        let l = jittered_cholesky(f, 0.0)
            .map_err(|e| Error::Decomposition(format!("factor {i}: {e}")))?;
        let ld: f64 = (0..l.nrows()).map(|d| l[(d, d)].ln()).sum::<f64>() * 2.0;
        total += (n / f.nrows()) as f64 * ld;
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rng: &mut impl Rng, r: usize, c: usize) -> DMatrix<f64> {
        DMatrix::from_fn(r, c, |_, _| rng.gen_range(-1.0..1.0))
    }

    fn random_spd(rng: &mut impl Rng, n: usize) -> DMatrix<f64> {
        let a = random_matrix(rng, n, n);
        &a * a.transpose() + DMatrix::identity(n, n) * 0.5
    }

    #[test]
    fn matvec_identity_factors() {
        let k = KronMatrix::new(vec![DMatrix::identity(2, 2), DMatrix::identity(3, 3)]).unwrap();
        let v = DVector::from_vec((1..=6).map(|x| x as f64).collect());
        let r = k.matvec(&v).unwrap();
        assert_eq!(r, v);
    }

    #[test]
    fn matvec_scalar_factors() {
        let k = KronMatrix::new(vec![
            DMatrix::from_element(1, 1, 2.0),
            DMatrix::from_element(1, 1, 3.0),
        ])
        .unwrap();
        let r = k.matvec(&DVector::from_vec(vec![5.0])).unwrap();
        assert_relative_eq!(r[0], 30.0);
    }

    #[test]
    fn matvec_matches_dense_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = random_matrix(&mut rng, 2, 2);
        let b = random_matrix(&mut rng, 3, 3);
        let k = KronMatrix::new(vec![a.clone(), b.clone()]).unwrap();
        let v = DVector::from_fn(6, |_, _| rng.gen_range(-1.0..1.0));
        let dense = dense_kron(&a, &b);
        let want = &dense * &v;
        let got = k.matvec(&v).unwrap();
        assert_relative_eq!(got, want, epsilon = 1e-12);
    }

    #[test]
    fn matvec_shape_error() {
        let k = KronMatrix::new(vec![DMatrix::identity(2, 2)]).unwrap();
        assert!(matches!(
            k.matvec(&DVector::zeros(3)),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn empty_factor_list_rejected() {
        assert!(KronMatrix::new(vec![]).is_err());
    }

    #[test]
    fn matmat_identity() {
        let k = KronMatrix::new(vec![DMatrix::identity(2, 2), DMatrix::identity(2, 2)]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = random_matrix(&mut rng, 4, 3);
        assert_relative_eq!(k.matmat(&m).unwrap(), m, epsilon = 1e-14);
    }

    #[test]
    fn matmat_rectangular_matches_dense() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = random_matrix(&mut rng, 3, 2);
        let b = random_matrix(&mut rng, 4, 3);
        let k = KronMatrix::new(vec![a.clone(), b.clone()]).unwrap();
        let m = random_matrix(&mut rng, 6, 5);
        let want = dense_kron(&a, &b) * &m;
        let got = k.matmat(&m).unwrap();
        assert_eq!(got.nrows(), 12);
        assert_relative_eq!(got, want, epsilon = 1e-12);
    }

    #[test]
    fn cholesky_identity_and_scalar() {
        let k = KronMatrix::new(vec![DMatrix::identity(2, 2), DMatrix::identity(3, 3)]).unwrap();
        let l = factored_cholesky(&k, 0.0).unwrap();
        assert_relative_eq!(l.dense(), DMatrix::identity(6, 6), epsilon = 1e-14);

        let k = KronMatrix::new(vec![DMatrix::from_element(1, 1, 4.0)]).unwrap();
        let l = factored_cholesky(&k, 0.0).unwrap();
        assert_relative_eq!(l.factors()[0][(0, 0)], 2.0);
    }

    #[test]
    fn cholesky_matches_dense_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let spd = random_spd(&mut rng, 4);
        let k = KronMatrix::new(vec![spd.clone()]).unwrap();
        let l = factored_cholesky(&k, 0.0).unwrap();
        let want = nalgebra::Cholesky::new(spd).unwrap().l();
        assert_relative_eq!(l.factors()[0], &want, epsilon = 1e-10);
    }

    #[test]
    fn cholesky_rejects_indefinite_factor() {
        let bad = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        let k = KronMatrix::new(vec![DMatrix::identity(2, 2), bad]).unwrap();
        let err = factored_cholesky(&k, 0.0).unwrap_err();
        assert!(err.to_string().contains("factor 1"), "got: {err}");
    }

    #[test]
    fn eig_diagonal_products() {
        let k = KronMatrix::new(vec![
            DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 2.0])),
            DMatrix::from_diagonal(&DVector::from_vec(vec![3.0, 4.0])),
        ])
        .unwrap();
        let e = factored_eig_sym(&k).unwrap();
        let mut lam: Vec<f64> = e.lambdas().iter().copied().collect();
        lam.sort_by(f64::total_cmp);
        let want = [3.0, 4.0, 6.0, 8.0];
        for (a, b) in lam.iter().zip(want.iter()) {
            assert_relative_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn eig_identity_all_ones() {
        let k = KronMatrix::new(vec![DMatrix::identity(2, 2), DMatrix::identity(2, 2)]).unwrap();
        let e = factored_eig_sym(&k).unwrap();
        for l in e.lambdas().iter() {
            assert_relative_eq!(*l, 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn eig_matches_dense_eigensolver() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = random_spd(&mut rng, 3);
        let b = random_spd(&mut rng, 4);
        let k = KronMatrix::new(vec![a.clone(), b.clone()]).unwrap();
        let e = factored_eig_sym(&k).unwrap();
        let mut got: Vec<f64> = e.lambdas().iter().copied().collect();
        got.sort_by(f64::total_cmp);
        let dense = dense_kron(&a, &b);
        let mut want: Vec<f64> = nalgebra::SymmetricEigen::new(dense)
            .eigenvalues
            .iter()
            .copied()
            .collect();
        want.sort_by(f64::total_cmp);
        for (g, w) in got.iter().zip(want.iter()) {
            assert_relative_eq!(g, w, epsilon = 1e-8, max_relative = 1e-8);
        }
    }

    #[test]
    fn eig_rejects_asymmetric() {
        let bad = DMatrix::from_row_slice(2, 2, &[1.0, 5.0, 0.0, 1.0]);
        let k = KronMatrix::new(vec![bad]).unwrap();
        assert!(factored_eig_sym(&k).is_err());
    }

    #[test]
    fn eig_reconstructs_factor() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = random_spd(&mut rng, 5);
        let k = KronMatrix::new(vec![a.clone()]).unwrap();
        let e = factored_eig_sym(&k).unwrap();
        let q = &e.q_factors[0];
        // orthogonality
        assert_relative_eq!(
            q.transpose() * q,
            DMatrix::identity(5, 5),
            epsilon = 1e-10
        );
        // reconstruction
        let rec = q * DMatrix::from_diagonal(&e.lambda_factors[0]) * q.transpose();
        let err = (&rec - &a).norm() / a.norm();
        assert!(err < 1e-8, "reconstruction error {err}");
    }

    #[test]
    fn tri_solve_identity_and_scalar() {
        let l = KronMatrix::new(vec![DMatrix::identity(2, 2), DMatrix::identity(2, 2)]).unwrap();
        let b = DMatrix::from_fn(4, 2, |i, j| (i * 2 + j) as f64);
        assert_relative_eq!(kron_tri_solve(&l, &b).unwrap(), b, epsilon = 1e-14);

        let l = KronMatrix::new(vec![
            DMatrix::from_element(1, 1, 2.0),
            DMatrix::from_element(1, 1, 4.0),
        ])
        .unwrap();
        let b = DMatrix::from_element(1, 1, 8.0);
        assert_relative_eq!(kron_tri_solve(&l, &b).unwrap()[(0, 0)], 1.0);
    }

    #[test]
    fn tri_solve_matches_dense() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut a = random_matrix(&mut rng, 3, 3).lower_triangle();
        let mut b2 = random_matrix(&mut rng, 2, 2).lower_triangle();
        for i in 0..3 {
            a[(i, i)] += 2.0;
        }
        for i in 0..2 {
            b2[(i, i)] += 2.0;
        }
        let l = KronMatrix::new(vec![a.clone(), b2.clone()]).unwrap();
        let rhs = random_matrix(&mut rng, 6, 2);
        let got = kron_tri_solve(&l, &rhs).unwrap();
        let dense = dense_kron(&a, &b2);
        let mut want = rhs.clone();
        dense.solve_lower_triangular_mut(&mut want);
        assert_relative_eq!(got, want, epsilon = 1e-10);
    }

    #[test]
    fn tri_solve_zero_diag_errors() {
        let mut a = DMatrix::identity(2, 2);
        a[(1, 1)] = 0.0;
        let l = KronMatrix::new(vec![a]).unwrap();
        assert!(matches!(
            kron_tri_solve(&l, &DMatrix::zeros(2, 1)),
            Err(Error::Singular(_))
        ));
    }

    #[test]
    fn diag_identities_and_products() {
        let k = KronMatrix::new(vec![DMatrix::identity(2, 2), DMatrix::identity(3, 3)]).unwrap();
        for v in k.diag().unwrap().iter() {
            assert_relative_eq!(*v, 1.0);
        }
        let k = KronMatrix::new(vec![
            DMatrix::from_diagonal(&DVector::from_vec(vec![2.0, 3.0])),
            DMatrix::from_diagonal(&DVector::from_vec(vec![5.0])),
        ])
        .unwrap();
        let d = k.diag().unwrap();
        assert_relative_eq!(d[0], 10.0);
        assert_relative_eq!(d[1], 15.0);
    }

    #[test]
    fn diag_matches_dense() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let a = random_matrix(&mut rng, 3, 3);
        let b = random_matrix(&mut rng, 2, 2);
        let k = KronMatrix::new(vec![a.clone(), b.clone()]).unwrap();
        let want = dense_kron(&a, &b).diagonal();
        assert_relative_eq!(k.diag().unwrap(), want, epsilon = 1e-12);
    }

    #[test]
    fn log_det_identity_matches_dense() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = random_spd(&mut rng, 3);
        let b = random_spd(&mut rng, 4);
        let k = KronMatrix::new(vec![a.clone(), b.clone()]).unwrap();
        let got = factored_log_det(&k).unwrap();
        let dense = dense_kron(&a, &b);
        let want = nalgebra::Cholesky::new(dense)
            .unwrap()
            .l()
            .diagonal()
            .iter()
            .map(|d| d.ln())
            .sum::<f64>()
            * 2.0;
        assert!((got - want).abs() < 1e-8, "got {got} want {want}");
    }

    #[test]
    fn three_factor_matvec() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let f: Vec<DMatrix<f64>> = vec![
            random_matrix(&mut rng, 2, 2),
            random_matrix(&mut rng, 3, 2),
            random_matrix(&mut rng, 2, 3),
        ];
        let k = KronMatrix::new(f.clone()).unwrap();
        let v = DVector::from_fn(12, |_, _| rng.gen_range(-1.0..1.0));
        let dense = dense_kron(&dense_kron(&f[0], &f[1]), &f[2]);
        assert_relative_eq!(k.matvec(&v).unwrap(), &dense * &v, epsilon = 1e-12);
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(40))]

        #[test]
        fn prop_matvec_matches_dense(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let r1 = rng.gen_range(1..=8);
            let c1 = rng.gen_range(1..=8);
            let r2 = rng.gen_range(1..=8);
            let c2 = rng.gen_range(1..=8);
            let a = random_matrix(&mut rng, r1, c1);
            let b = random_matrix(&mut rng, r2, c2);
            let k = KronMatrix::new(vec![a.clone(), b.clone()]).unwrap();
            let v = DVector::from_fn(c1 * c2, |_, _| rng.gen_range(-1.0..1.0));
            let want = dense_kron(&a, &b) * &v;
            let got = k.matvec(&v).unwrap();
            let denom = want.norm().max(1.0);
            proptest::prop_assert!((got - want).norm() / denom < 1e-10);
        }

        #[test]
        fn prop_eig_reconstruction(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n1 = rng.gen_range(1..=5);
            let n2 = rng.gen_range(1..=5);
            let a = random_spd(&mut rng, n1);
            let b = random_spd(&mut rng, n2);
            let k = KronMatrix::new(vec![a.clone(), b.clone()]).unwrap();
            let e = factored_eig_sym(&k).unwrap();
            let dense = k.dense();
            let q = e.q().dense();
            let rec = &q * DMatrix::from_diagonal(&e.lambdas()) * q.transpose();
            let err = (&rec - &dense).norm() / dense.norm();
            proptest::prop_assert!(err < 1e-8, "reconstruction error {}", err);
        }

        #[test]
        fn prop_mixed_product(seed in 0u64..1000) {
            // (A⊗B)(C⊗D) = (AC)⊗(BD)
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (p, q, r) = (rng.gen_range(1..=4), rng.gen_range(1..=4), rng.gen_range(1..=4));
            let (s, t, u) = (rng.gen_range(1..=4), rng.gen_range(1..=4), rng.gen_range(1..=4));
            let a = random_matrix(&mut rng, p, q);
            let c = random_matrix(&mut rng, q, r);
            let b = random_matrix(&mut rng, s, t);
            let d = random_matrix(&mut rng, t, u);
            let left = KronMatrix::new(vec![a.clone(), b.clone()]).unwrap();
            let right = KronMatrix::new(vec![c.clone(), d.clone()]).unwrap();
            let m = random_matrix(&mut rng, r * u, 2);
            let composed = left.matmat(&right.matmat(&m).unwrap()).unwrap();
            let direct = KronMatrix::new(vec![&a * &c, &b * &d]).unwrap().matmat(&m).unwrap();
            let denom = direct.norm().max(1.0);
            proptest::prop_assert!((composed - direct).norm() / denom < 1e-10);
        }

        #[test]
        fn prop_factored_log_det(seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n1 = rng.gen_range(1..=5);
            let n2 = rng.gen_range(1..=5);
            let a = random_spd(&mut rng, n1);
            let b = random_spd(&mut rng, n2);
            let k = KronMatrix::new(vec![a, b]).unwrap();
            let got = factored_log_det(&k).unwrap();
            let dense = k.dense();
            let want = nalgebra::Cholesky::new(dense).unwrap()
                .l().diagonal().iter().map(|d| d.ln()).sum::<f64>() * 2.0;
            proptest::prop_assert!((got - want).abs() < 1e-8, "got {} want {}", got, want);
        }
    }
}
