//! Reference implementations and instance generators shared by the integration
//! tests. Everything here is written independently of the library's solvers, so
//! agreement between the two is evidence rather than tautology.
#![allow(dead_code)]

use nalgebra::{DMatrix, DVector, SVD};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use trop_core::panel::Panel;

pub fn normal_matrix<R: Rng + ?Sized>(rng: &mut R, r: usize, c: usize) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| StandardNormal.sample(&mut *rng))
}

/// Block panel with the last `n1` units treated in the last `t1` periods.
pub fn block_w(n: usize, t: usize, n1: usize, t1: usize) -> DMatrix<f64> {
    DMatrix::from_fn(n, t, |i, s| if i >= n - n1 && s >= t - t1 { 1.0 } else { 0.0 })
}

/// Random additive-plus-factor panel with noise on a block design.
pub fn random_block_panel<R: Rng + ?Sized>(rng: &mut R, n: usize, t: usize, n1: usize, t1: usize) -> Panel {
    let g = normal_matrix(rng, n, 2);
    let l = normal_matrix(rng, t, 2);
    let a = normal_matrix(rng, n, 1);
    let b = normal_matrix(rng, t, 1);
    let e = normal_matrix(rng, n, t) * 0.3;
    let y = DMatrix::from_fn(n, t, |i, s| a[i] + b[s] + e[(i, s)]) + &g * l.transpose();
    Panel::from_matrices(y, block_w(n, t, n1, t1)).unwrap()
}

/// Weighted two-way least squares through a dense design matrix and a
/// pseudo-inverse. Returns fitted values α_i + β_t on every cell.
pub fn dense_twfe_fitted(y: &DMatrix<f64>, w: &DMatrix<f64>) -> DMatrix<f64> {
    let (n, t) = y.shape();
    let p = n + t;
    let mut xtwx = DMatrix::<f64>::zeros(p, p);
    let mut xtwy = DVector::<f64>::zeros(p);
    for i in 0..n {
        for s in 0..t {
            let wv = w[(i, s)];
            if wv == 0.0 {
                continue;
            }
            let idx = [i, n + s];
            for &a in &idx {
                xtwy[a] += wv * y[(i, s)];
                for &b in &idx {
                    xtwx[(a, b)] += wv;
                }
            }
        }
    }
    let coef = pinv_solve(&xtwx, &xtwy);
    DMatrix::from_fn(n, t, |i, s| coef[i] + coef[n + s])
}

fn pinv_solve(a: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    let svd = SVD::new(a.clone(), true, true);
    let tol = 1e-12 * svd.singular_values.max();
    svd.solve(b, tol).expect("pseudo-inverse solve")
}

/// Singular-value soft-thresholding computed from a fresh SVD.
pub fn svt(m: &DMatrix<f64>, threshold: f64) -> DMatrix<f64> {
    let svd = SVD::new(m.clone(), true, true);
    let u = svd.u.unwrap();
    let vt = svd.v_t.unwrap();
    let s = svd.singular_values.map(|v| (v - threshold).max(0.0));
    u * DMatrix::from_diagonal(&s) * vt
}

pub fn nuclear(m: &DMatrix<f64>) -> f64 {
    SVD::new(m.clone(), false, false).singular_values.sum()
}

/// Two-way centering: subtract row and column means, add back the grand mean.
pub fn two_way_demean(m: &DMatrix<f64>) -> DMatrix<f64> {
    let (n, t) = m.shape();
    let rows: Vec<f64> = (0..n).map(|i| m.row(i).mean()).collect();
    let cols: Vec<f64> = (0..t).map(|s| m.column(s).mean()).collect();
    let g = m.mean();
    DMatrix::from_fn(n, t, |i, s| m[(i, s)] - rows[i] - cols[s] + g)
}

/// Minimum of Σ (Y − α − β − L)² + λ‖L‖_* with all weights one: L = SVT of the
/// two-way demeaned Y at λ/2, and the fixed effects absorb the additive part.
pub fn full_uniform_objective(y: &DMatrix<f64>, lambda: f64) -> f64 {
    let d = two_way_demean(y);
    let l = svt(&d, lambda / 2.0);
    (&d - &l).norm_squared() + lambda * nuclear(&l)
}

/// Soft-impute for Σ_{observed} (Y − L)² + λ‖L‖_* (no fixed effects), iterated to a
/// fixed point. Each step is the exact minimizer of a majorizer, so it is monotone.
pub fn soft_impute_objective(y: &DMatrix<f64>, mask: &DMatrix<f64>, lambda: f64) -> f64 {
    let mut l = DMatrix::<f64>::zeros(y.nrows(), y.ncols());
    let obj = |l: &DMatrix<f64>| -> f64 {
        let r = (y - l).component_mul(mask);
        r.norm_squared() + lambda * nuclear(l)
    };
    let mut prev = obj(&l);
    for _ in 0..200_000 {
        let filled = DMatrix::from_fn(y.nrows(), y.ncols(), |i, s| if mask[(i, s)] > 0.0 { y[(i, s)] } else { l[(i, s)] });
        l = svt(&filled, lambda / 2.0);
        let cur = obj(&l);
        if prev - cur <= 1e-15 * prev.max(1e-300) {
            return cur;
        }
        prev = cur;
    }
    prev
}

/// Joint minimization over (τ, α, β, L) of
/// Σ w (Y − α − β − L − τ·1{target})² + penalty‖L‖_*, with the target cell weighted.
/// Alternates an exact dense least-squares solve for (α, β, τ) with proximal steps on L.
pub fn joint_tau_oracle(y: &DMatrix<f64>, w: &DMatrix<f64>, target: (usize, usize), penalty: f64) -> f64 {
    let (n, t) = y.shape();
    let p = n + t + 1;
    let design = |i: usize, s: usize| -> Vec<usize> {
        let mut idx = vec![i, n + s];
        if (i, s) == target {
            idx.push(n + t);
        }
        idx
    };
    let mut xtwx = DMatrix::<f64>::zeros(p, p);
    for i in 0..n {
        for s in 0..t {
            for &a in &design(i, s) {
                for &b in &design(i, s) {
                    xtwx[(a, b)] += w[(i, s)];
                }
            }
        }
    }
    let pinv = xtwx.clone().pseudo_inverse(1e-12 * xtwx.amax()).unwrap();
    let solve_fe = |z: &DMatrix<f64>| -> DVector<f64> {
        let mut xtwy = DVector::<f64>::zeros(p);
        for i in 0..n {
            for s in 0..t {
                for &a in &design(i, s) {
                    xtwy[a] += w[(i, s)] * z[(i, s)];
                }
            }
        }
        &pinv * xtwy
    };
    let fitted = |c: &DVector<f64>| DMatrix::from_fn(n, t, |i, s| c[i] + c[n + s] + if (i, s) == target { c[n + t] } else { 0.0 });
    let mut l = DMatrix::<f64>::zeros(n, t);
    let mut coef = solve_fe(y);
    if penalty.is_infinite() {
        return coef[n + t];
    }
    let step = 1.0 / (2.0 * w.max());
    // plain proximal gradient, run until L stops moving
    for _ in 0..2_000_000 {
        let r = y - fitted(&coef) - &l;
        let grad = r.component_mul(w) * (-2.0);
        let next = svt(&(&l - grad * step), penalty * step);
        let change = (&next - &l).amax();
        l = next;
        coef = solve_fe(&(y - &l));
        if change <= 1e-15 {
            break;
        }
    }
    coef[n + t]
}

/// Uniform random orthogonal matrix from the QR decomposition of a Gaussian matrix.
pub fn random_orthogonal<R: Rng + ?Sized>(rng: &mut R, k: usize) -> DMatrix<f64> {
    let g = normal_matrix(rng, k, k);
    let qr = g.qr();
    let q = qr.q();
    let r = qr.r();
    // fix column signs so the draw is Haar distributed
    let signs = DMatrix::from_diagonal(&DVector::from_fn(k, |i, _| r[(i, i)].signum()));
    q * signs
}
