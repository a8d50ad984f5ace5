//! Small dense linear-algebra helpers on top of nalgebra.

use nalgebra::{DMatrix, DVector, SVD};

/// Thin SVD with singular values in descending order and each singular
/// vector pair oriented so that the left vector's largest-magnitude entry is positive.
#[derive(Debug, Clone)]
pub struct Svd {
    pub u: DMatrix<f64>,
    pub s: DVector<f64>,
    pub vt: DMatrix<f64>,
}

pub fn svd(m: &DMatrix<f64>) -> Svd {
    let dec = SVD::new(m.clone(), true, true);
    let mut u = dec.u.expect("u requested");
    let mut vt = dec.v_t.expect("v requested");
    let s = dec.singular_values;
    for k in 0..s.len() {
        let col = u.column(k);
        let mut best = 0;
        for r in 1..col.len() {
            if col[r].abs() > col[best].abs() {
                best = r;
            }
        }
        if col[best] < 0.0 {
            u.column_mut(k).neg_mut();
            vt.row_mut(k).neg_mut();
        }
    }
    Svd { u, s, vt }
}

pub fn singular_values(m: &DMatrix<f64>) -> DVector<f64> {
    SVD::new(m.clone(), false, false).singular_values
}

pub fn nuclear_norm(m: &DMatrix<f64>) -> f64 {
    singular_values(m).sum()
}

pub fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    singular_values(m).iter().fold(0.0, |a, b| a.max(*b))
}

/// Singular-value soft-thresholding: returns the shrunk matrix and its nuclear norm.
pub fn soft_threshold(m: &DMatrix<f64>, threshold: f64) -> (DMatrix<f64>, f64) {
    let dec = SVD::new(m.clone(), true, true);
    let u = dec.u.as_ref().expect("u requested");
    let vt = dec.v_t.as_ref().expect("v requested");
    let mut out = DMatrix::zeros(m.nrows(), m.ncols());
    let mut nuc = 0.0;
    for (k, &sv) in dec.singular_values.iter().enumerate() {
        let shrunk = sv - threshold;
        if shrunk > 0.0 {
            nuc += shrunk;
            out.ger(shrunk, &u.column(k), &vt.row(k).transpose(), 1.0);
        }
    }
    (out, nuc)
}

/// Best rank-`r` approximation from a precomputed SVD.
pub fn truncate(dec: &Svd, r: usize) -> DMatrix<f64> {
    let (n, t) = (dec.u.nrows(), dec.vt.ncols());
    let mut out = DMatrix::zeros(n, t);
    for k in 0..r.min(dec.s.len()) {
        out.ger(dec.s[k], &dec.u.column(k), &dec.vt.row(k).transpose(), 1.0);
    }
    out
}

/// Frobenius inner product ⟨A, B⟩.
pub fn inner(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

/// Solve a symmetric positive semidefinite system, falling back to the
/// pseudo-inverse when the Cholesky factorization fails.
pub fn solve_psd(a: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    if let Some(ch) = a.clone().cholesky() {
        return ch.solve(b);
    }
    let dec = SVD::new(a.clone(), true, true);
    let tol = dec.singular_values.max() * a.nrows().max(1) as f64 * f64::EPSILON;
    dec.solve(b, tol).expect("svd solve")
}

/// Soft-thresholding through the eigendecomposition of the smaller Gram
/// matrix: L = G·V·diag(1 − τ/σ)₊·Vᵀ (or its transpose), which avoids forming U.
pub fn soft_threshold_gram(m: &DMatrix<f64>, threshold: f64) -> (DMatrix<f64>, f64) {
    let wide = m.nrows() < m.ncols();
    let mt = m.transpose();
    let gram = if wide { m * &mt } else { &mt * m };
    let eig = nalgebra::SymmetricEigen::new(gram);
    let k = eig.eigenvalues.len();
    let mut nuc = 0.0;
    let mut keep = Vec::new();
    for j in 0..k {
        let sv = eig.eigenvalues[j].max(0.0).sqrt();
        if sv > threshold {
            nuc += sv - threshold;
            keep.push((j, 1.0 - threshold / sv));
        }
    }
    if keep.is_empty() {
        return (DMatrix::zeros(m.nrows(), m.ncols()), 0.0);
    }
    let mut v = DMatrix::<f64>::zeros(k, keep.len());
    let mut vs = DMatrix::<f64>::zeros(k, keep.len());
    for (c, &(j, f)) in keep.iter().enumerate() {
        v.set_column(c, &eig.eigenvectors.column(j));
        vs.set_column(c, &(eig.eigenvectors.column(j) * f));
    }
    let p = &vs * v.transpose();
    let out = if wide { &p * m } else { m * &p };
    (out, nuc)
}
