//! Simplex-constrained least squares: min ‖Aω − b‖² + ρ‖ω‖² over ω ≥ 0, 1ᵀω = 1.

use nalgebra::{DMatrix, DVector};

/// Solver result.
#[derive(Debug, Clone, PartialEq)]
pub struct SimplexFit {
    pub weights: DVector<f64>,
    pub objective: f64,
    pub iterations: usize,
    /// Norm of the gradient mapping at the solution.
    pub kkt_residual: f64,
}

pub const TOL: f64 = 1e-10;
pub const MAX_ITER: usize = 10_000;

/// Euclidean projection onto the probability simplex.
pub fn project_simplex(v: &DVector<f64>) -> DVector<f64> {
    let mut u: Vec<f64> = v.iter().copied().collect();
    u.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let mut css = 0.0;
    let mut theta = 0.0;
    for (k, &uk) in u.iter().enumerate() {
        css += uk;
        let t = (css - 1.0) / (k + 1) as f64;
        if uk - t > 0.0 {
            theta = t;
        }
    }
    v.map(|x| (x - theta).max(0.0))
}

struct Quad {
    h: DMatrix<f64>,
    c: DVector<f64>,
    b2: f64,
}

impl Quad {
    fn value(&self, w: &DVector<f64>) -> f64 {
        ((&self.h * w).dot(w) - 2.0 * self.c.dot(w) + self.b2).max(0.0)
    }

    fn grad(&self, w: &DVector<f64>) -> DVector<f64> {
        (&self.h * w - &self.c) * 2.0
    }
}

/// Accelerated projected gradient from the uniform vector, with adaptive
/// restart, followed by an exact equality-constrained solve on the detected support.
pub fn simplex_ls(a: &DMatrix<f64>, b: &DVector<f64>, ridge: f64) -> SimplexFit {
    let m = a.ncols();
    let mut h = a.tr_mul(a);
    for k in 0..m {
        h[(k, k)] += ridge;
    }
    let q = Quad { c: a.tr_mul(b), b2: b.dot(b), h };
    let lip = 2.0 * nalgebra::SymmetricEigen::new(q.h.clone()).eigenvalues.max().max(1e-300);
    let mut w = DVector::from_element(m, 1.0 / m as f64);
    if m == 1 {
        let objective = q.value(&w);
        return SimplexFit { weights: w, objective, iterations: 0, kkt_residual: 0.0 };
    }
    let mut z = w.clone();
    let mut tk = 1.0f64;
    let mut f = q.value(&w);
    let mut iterations = 0;
    while iterations < MAX_ITER {
        iterations += 1;
        let w_new = project_simplex(&(&z - q.grad(&z) / lip));
        let f_new = q.value(&w_new);
        let t_next = (1.0 + (1.0 + 4.0 * tk * tk).sqrt()) / 2.0;
        if f_new > f {
            // restart momentum from the current iterate
            tk = 1.0;
            z = w.clone();
            continue;
        }
        z = &w_new + (&w_new - &w) * ((tk - 1.0) / t_next);
        tk = t_next;
        let done = (f - f_new).abs() <= TOL * f.abs().max(1e-300) || f_new == 0.0;
        w = w_new;
        f = f_new;
        if done && gradient_mapping(&q, &w, lip) < 1e-9 {
            break;
        }
    }
    if let Some((wp, fp)) = polish(&q, &w) {
        if fp <= f {
            w = wp;
            f = fp;
        }
    }
    let kkt_residual = gradient_mapping(&q, &w, lip);
    SimplexFit { weights: w, objective: f, iterations, kkt_residual }
}

fn gradient_mapping(q: &Quad, w: &DVector<f64>, lip: f64) -> f64 {
    let p = project_simplex(&(w - q.grad(w) / lip));
    (w - p).norm() * lip
}

/// Solve the KKT system restricted to the support of `w`; returns the point
/// when it is feasible and optimal for the full problem.
fn polish(q: &Quad, w: &DVector<f64>) -> Option<(DVector<f64>, f64)> {
    let m = w.len();
    let support: Vec<usize> = (0..m).filter(|&j| w[j] > 1e-12).collect();
    let k = support.len();
    if k == 0 {
        return None;
    }
    let mut kkt = DMatrix::zeros(k + 1, k + 1);
    let mut rhs = DVector::zeros(k + 1);
    for (a, &ja) in support.iter().enumerate() {
        for (b, &jb) in support.iter().enumerate() {
            kkt[(a, b)] = 2.0 * q.h[(ja, jb)];
        }
        kkt[(a, k)] = 1.0;
        kkt[(k, a)] = 1.0;
        rhs[a] = 2.0 * q.c[ja];
    }
    rhs[k] = 1.0;
    let dec = nalgebra::SVD::new(kkt, true, true);
    let tol = dec.singular_values.max() * 1e-13;
    let sol = dec.solve(&rhs, tol).ok()?;
    let mut out = DVector::zeros(m);
    for (a, &j) in support.iter().enumerate() {
        if sol[a] < 0.0 {
            return None;
        }
        out[j] = sol[a];
    }
    let s = out.sum();
    if !((s - 1.0).abs() < 1e-9) {
        return None;
    }
    out /= s;
    let g = q.grad(&out);
    // on the support the gradient equals -sol[k]; off it, it must not be smaller
    let level = -sol[k];
    let scale = g.amax().max(1.0);
    if (0..m).any(|j| out[j] == 0.0 && g[j] < level - 1e-9 * scale) {
        return None;
    }
    let f = q.value(&out);
    Some((out, f))
}
