//! Weighted two-way fixed effects with a nuclear-norm penalized low-rank term.
//!
//! The fixed-effects block is solved exactly from the normal equations
//! (one dimension eliminated, the other solved by Cholesky). The low-rank
//! block takes proximal-gradient steps with singular-value soft-thresholding.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg;

/// Nonnegative per-cell loss weights.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightMask(DMatrix<f64>);

impl WeightMask {
    pub fn new(w: DMatrix<f64>) -> Result<Self> {
        if w.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::InvalidInput("loss weights must be finite and nonnegative".into()));
        }
        Ok(Self(w))
    }

    pub fn uniform(n: usize, t: usize) -> Self {
        Self(DMatrix::from_element(n, t, 1.0))
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn shape(&self) -> (usize, usize) {
        self.0.shape()
    }
}

/// Two-way fixed-effects solution.
#[derive(Debug, Clone, PartialEq)]
pub struct TwfeFit {
    pub alpha: DVector<f64>,
    pub beta: DVector<f64>,
    /// Units with zero total weight (effect set to 0).
    pub empty_units: Vec<usize>,
    /// Periods with zero total weight (effect set to 0).
    pub empty_periods: Vec<usize>,
}

/// Precomputed normal-equation factorization for repeated fixed-effects solves
/// under one weight mask, optionally with additive covariates.
#[derive(Debug, Clone)]
pub(crate) struct FixedEffects {
    n: usize,
    t: usize,
    transposed: bool,
    w: DMatrix<f64>,
    unit_tot: Vec<f64>,
    period_tot: Vec<f64>,
    /// Indices along the solved (non-eliminated) dimension with positive weight.
    active: Vec<usize>,
    schur: Schur,
    empty_units: Vec<usize>,
    empty_periods: Vec<usize>,
    cov: Option<CovariateBlock>,
}

#[derive(Debug, Clone)]
enum Schur {
    Chol(nalgebra::Cholesky<f64, nalgebra::Dyn>),
    Pinv(DMatrix<f64>),
}

#[derive(Debug, Clone)]
struct CovariateBlock {
    x: Vec<DMatrix<f64>>,
    active: Vec<usize>,
    resid: Vec<DMatrix<f64>>,
    gram: nalgebra::Cholesky<f64, nalgebra::Dyn>,
}

impl FixedEffects {
    pub(crate) fn new(w: &DMatrix<f64>, x: &[DMatrix<f64>], strict: bool) -> Result<Self> {
        let (n, t) = w.shape();
        if !(w.sum() > 0.0) {
            return Err(Error::AllZeroWeights);
        }
        let unit_tot: Vec<f64> = (0..n).map(|i| w.row(i).sum()).collect();
        let period_tot: Vec<f64> = (0..t).map(|s| w.column(s).sum()).collect();
        let empty_units: Vec<usize> = (0..n).filter(|&i| unit_tot[i] <= 0.0).collect();
        let empty_periods: Vec<usize> = (0..t).filter(|&s| period_tot[s] <= 0.0).collect();
        if strict {
            if let Some(i) = empty_units.first() {
                return Err(Error::EmptyRowOrColumn(format!("unit {i}")));
            }
            if let Some(s) = empty_periods.first() {
                return Err(Error::EmptyRowOrColumn(format!("period {s}")));
            }
        }
        let transposed = t > n;
        let wo = if transposed { w.transpose() } else { w.clone() };
        let (row_tot, col_tot) = if transposed {
            (period_tot.clone(), unit_tot.clone())
        } else {
            (unit_tot.clone(), period_tot.clone())
        };
        let active_cols: Vec<usize> = (0..wo.ncols()).filter(|&s| col_tot[s] > 0.0).collect();
        let m = active_cols.len();
        let mut scaled = DMatrix::<f64>::zeros(wo.nrows(), m);
        for e in 0..wo.nrows() {
            if row_tot[e] > 0.0 {
                let f = 1.0 / row_tot[e].sqrt();
                for (k, &s) in active_cols.iter().enumerate() {
                    scaled[(e, k)] = wo[(e, s)] * f;
                }
            }
        }
        let mut a = -scaled.tr_mul(&scaled);
        let total: f64 = active_cols.iter().map(|&s| col_tot[s]).sum();
        for (k, &s) in active_cols.iter().enumerate() {
            a[(k, k)] += col_tot[s];
        }
        for (k, &s) in active_cols.iter().enumerate() {
            for (l, &u) in active_cols.iter().enumerate() {
                a[(k, l)] += col_tot[s] * col_tot[u] / total;
            }
        }
        let schur = match a.clone().cholesky() {
            Some(ch) => Schur::Chol(ch),
            None => {
                let dec = nalgebra::SVD::new(a.clone(), true, true);
                let tol = dec.singular_values.max() * m.max(1) as f64 * 1e-12;
                Schur::Pinv(dec.pseudo_inverse(tol).map_err(|e| Error::Numerical(e.to_string()))?)
            }
        };
        let mut fe = Self {
            n,
            t,
            transposed,
            w: w.clone(),
            unit_tot,
            period_tot,
            active: active_cols,
            schur,
            empty_units,
            empty_periods,
            cov: None,
        };
        if !x.is_empty() {
            fe.cov = Some(fe.covariate_block(w, x)?);
        }
        Ok(fe)
    }

    fn covariate_block(&self, w: &DMatrix<f64>, x: &[DMatrix<f64>]) -> Result<CovariateBlock> {
        let active: Vec<usize> = (0..x.len()).filter(|&k| x[k].iter().any(|v| *v != 0.0)).collect();
        let resid: Vec<DMatrix<f64>> = active
            .iter()
            .map(|&k| {
                let (a, b) = self.solve_twfe(&x[k]);
                DMatrix::from_fn(self.n, self.t, |i, s| x[k][(i, s)] - a[i] - b[s])
            })
            .collect();
        let p = active.len();
        let mut g = DMatrix::<f64>::zeros(p, p);
        for a in 0..p {
            for b in a..p {
                let v: f64 = w.iter().zip(resid[a].iter().zip(resid[b].iter())).map(|(w, (u, v))| w * u * v).sum();
                g[(a, b)] = v;
                g[(b, a)] = v;
            }
        }
        let scale = (0..p).map(|a| g[(a, a)]).fold(0.0, f64::max);
        let raw: f64 = active.iter().map(|&k| x[k].iter().zip(w.iter()).map(|(v, w)| w * v * v).sum::<f64>()).fold(0.0, f64::max);
        if p > 0 && !(scale > 1e-12 * raw.max(f64::MIN_POSITIVE)) {
            return Err(Error::RankDeficientCovariates);
        }
        let gram = g.clone().cholesky().ok_or(Error::RankDeficientCovariates)?;
        let l = gram.l();
        let dmin = (0..p).map(|a| l[(a, a)]).fold(f64::INFINITY, f64::min);
        let dmax = (0..p).map(|a| l[(a, a)]).fold(0.0, f64::max);
        if p > 0 && dmin < 1e-7 * dmax {
            return Err(Error::RankDeficientCovariates);
        }
        Ok(CovariateBlock { x: x.to_vec(), active, resid, gram })
    }

    pub(crate) fn empty_units(&self) -> &[usize] {
        &self.empty_units
    }

    pub(crate) fn empty_periods(&self) -> &[usize] {
        &self.empty_periods
    }

    pub(crate) fn n_covariates(&self) -> usize {
        self.cov.as_ref().map_or(0, |c| c.x.len())
    }

    /// Exact weighted least squares of `z` on unit and period effects.
    pub(crate) fn solve_twfe(&self, z: &DMatrix<f64>) -> (DVector<f64>, DVector<f64>) {
        let (n, t) = (self.n, self.t);
        let w = self.w.as_slice();
        let zs = z.as_slice();
        // weighted row (unit) and column (period) sums of z
        let mut a = vec![0.0; n];
        let mut b = vec![0.0; t];
        for s in 0..t {
            let (wc, zc) = (&w[s * n..(s + 1) * n], &zs[s * n..(s + 1) * n]);
            let mut acc = 0.0;
            for i in 0..n {
                let v = wc[i] * zc[i];
                a[i] += v;
                acc += v;
            }
            b[s] = acc;
        }
        let unit_tot = &self.unit_tot;
        let period_tot = &self.period_tot;
        let inv = |x: f64| if x > 0.0 { 1.0 / x } else { 0.0 };
        let mut alpha = DVector::<f64>::zeros(n);
        let mut beta = DVector::<f64>::zeros(t);
        if !self.transposed {
            // eliminate units, solve for periods
            let ra: Vec<f64> = (0..n).map(|i| a[i] * inv(unit_tot[i])).collect();
            let mut rhs = DVector::<f64>::zeros(self.active.len());
            for (k, &s) in self.active.iter().enumerate() {
                let wc = &w[s * n..(s + 1) * n];
                rhs[k] = b[s] - wc.iter().zip(&ra).map(|(w, r)| w * r).sum::<f64>();
            }
            let g = self.schur_solve(&rhs);
            for (k, &s) in self.active.iter().enumerate() {
                beta[s] = g[k];
            }
            let mut acc = a.clone();
            for s in 0..t {
                let bs = beta[s];
                if bs != 0.0 {
                    let wc = &w[s * n..(s + 1) * n];
                    for i in 0..n {
                        acc[i] -= wc[i] * bs;
                    }
                }
            }
            for i in 0..n {
                alpha[i] = acc[i] * inv(unit_tot[i]);
            }
        } else {
            // eliminate periods, solve for units
            let rb: Vec<f64> = (0..t).map(|s| b[s] * inv(period_tot[s])).collect();
            let mut full = a.clone();
            for s in 0..t {
                let r = rb[s];
                if r != 0.0 {
                    let wc = &w[s * n..(s + 1) * n];
                    for i in 0..n {
                        full[i] -= wc[i] * r;
                    }
                }
            }
            let rhs = DVector::from_iterator(self.active.len(), self.active.iter().map(|&i| full[i]));
            let g = self.schur_solve(&rhs);
            for (k, &i) in self.active.iter().enumerate() {
                alpha[i] = g[k];
            }
            for s in 0..t {
                let wc = &w[s * n..(s + 1) * n];
                let dot: f64 = wc.iter().zip(alpha.iter()).map(|(w, a)| w * a).sum();
                beta[s] = (b[s] - dot) * inv(period_tot[s]);
            }
        }
        self.pin(&mut alpha, &mut beta);
        (alpha, beta)
    }

    fn schur_solve(&self, rhs: &DVector<f64>) -> DVector<f64> {
        match &self.schur {
            Schur::Chol(ch) => ch.solve(rhs),
            Schur::Pinv(p) => p * rhs,
        }
    }

    /// Shift the level so the weighted mean of β is zero.
    fn pin(&self, alpha: &mut DVector<f64>, beta: &mut DVector<f64>) {
        let tot: f64 = self.period_tot.iter().sum();
        let m: f64 = self.period_tot.iter().zip(beta.iter()).map(|(c, b)| c * b).sum::<f64>() / tot;
        for s in 0..self.t {
            if self.period_tot[s] > 0.0 {
                beta[s] -= m;
            }
        }
        for i in 0..self.n {
            if !self.empty_units.contains(&i) {
                alpha[i] += m;
            }
        }
    }

    /// Joint solve for (α, β, b) given `z`, where b are covariate coefficients.
    pub(crate) fn solve(&self, z: &DMatrix<f64>, w: &DMatrix<f64>) -> (DVector<f64>, DVector<f64>, DVector<f64>) {
        match &self.cov {
            None => {
                let (a, b) = self.solve_twfe(z);
                (a, b, DVector::<f64>::zeros(0))
            }
            Some(cov) => {
                let p = cov.active.len();
                let rhs = DVector::from_fn(p, |k, _| {
                    w.iter().zip(cov.resid[k].iter().zip(z.iter())).map(|(w, (r, z))| w * r * z).sum()
                });
                let coef = cov.gram.solve(&rhs);
                let mut bx = DVector::<f64>::zeros(cov.x.len());
                let mut zr = z.clone();
                for (k, &j) in cov.active.iter().enumerate() {
                    bx[j] = coef[k];
                    zr -= &cov.x[j] * coef[k];
                }
                let (a, b) = self.solve_twfe(&zr);
                (a, b, bx)
            }
        }
    }

    pub(crate) fn covariate_fit(&self, bx: &DVector<f64>) -> Option<DMatrix<f64>> {
        let cov = self.cov.as_ref()?;
        let mut out = DMatrix::<f64>::zeros(self.n, self.t);
        for &j in &cov.active {
            out += &cov.x[j] * bx[j];
        }
        Some(out)
    }
}

/// Minimize Σ w_js (Y_js − α_j − β_s)².
pub fn fit_weighted_twfe(y: &DMatrix<f64>, w: &WeightMask) -> Result<TwfeFit> {
    check_shapes(y, w)?;
    let fe = FixedEffects::new(w.matrix(), &[], false)?;
    let (alpha, beta) = fe.solve_twfe(y);
    Ok(TwfeFit { alpha, beta, empty_units: fe.empty_units.clone(), empty_periods: fe.empty_periods.clone() })
}

fn check_shapes(y: &DMatrix<f64>, w: &WeightMask) -> Result<()> {
    if y.shape() != w.shape() {
        return Err(Error::InvalidInput("outcome and weight shapes differ".into()));
    }
    Ok(())
}

/// Iteration controls for [`fit_weighted_lowrank_with`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverOptions {
    /// Stop when the relative objective decrease falls below this.
    pub tol: f64,
    pub max_iter: usize,
    /// Hold α = β = 0 (pure weighted nuclear-norm regression).
    pub freeze_fixed_effects: bool,
    /// Error on units or periods with zero total weight instead of zeroing their effect.
    pub strict: bool,
    /// Also require the largest entry change in L to fall below this. The objective
    /// decrease stalls at rounding level long before L settles along flat directions.
    pub step_tol: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self { tol: 1e-7, max_iter: 500, freeze_fixed_effects: false, strict: false, step_tol: f64::INFINITY }
    }
}

/// Solution of the weighted penalized two-way factor regression.
#[derive(Debug, Clone, PartialEq)]
pub struct TwoWayFactorFit {
    pub alpha: DVector<f64>,
    pub beta: DVector<f64>,
    pub l: DMatrix<f64>,
    /// Covariate coefficients (empty without covariates).
    pub beta_x: DVector<f64>,
    pub objective: f64,
    pub nuclear_norm: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Objective after each outer iteration, starting from the initial point.
    pub trace: Vec<f64>,
    /// False if any iteration increased the objective beyond 1e-12 slack.
    pub monotone: bool,
    pub empty_units: Vec<usize>,
    pub empty_periods: Vec<usize>,
    covariate_part: Option<DMatrix<f64>>,
}

impl TwoWayFactorFit {
    /// Fitted value α_i + β_t + L_it (+ X_it·β_x).
    pub fn predict(&self, i: usize, t: usize) -> f64 {
        let c = self.covariate_part.as_ref().map_or(0.0, |c| c[(i, t)]);
        self.alpha[i] + self.beta[t] + self.l[(i, t)] + c
    }

    pub fn fitted(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.l.nrows(), self.l.ncols(), |i, t| self.predict(i, t))
    }
}

fn weighted_loss(y: &DMatrix<f64>, w: &DMatrix<f64>, alpha: &DVector<f64>, beta: &DVector<f64>, fixed: &DMatrix<f64>) -> f64 {
    let n = y.nrows();
    let (ys, ws, fs) = (y.as_slice(), w.as_slice(), fixed.as_slice());
    let mut acc = 0.0;
    for (s, b) in beta.iter().enumerate() {
        let r0 = s * n;
        for i in 0..n {
            let wv = ws[r0 + i];
            if wv != 0.0 {
                let r = ys[r0 + i] - alpha[i] - b - fs[r0 + i];
                acc += wv * r * r;
            }
        }
    }
    acc
}

/// [`fit_weighted_lowrank_with`] with default options, no covariates, and a cold start.
pub fn fit_weighted_lowrank(y: &DMatrix<f64>, w: &WeightMask, lambda_nn: f64) -> Result<TwoWayFactorFit> {
    fit_weighted_lowrank_with(y, w, lambda_nn, &[], &SolverOptions::default(), None)
}

/// Block-coordinate minimization of
/// Σ w_js (Y_js − α_j − β_s − X_js·b − L_js)² + λ_nn ‖L‖_*.
pub fn fit_weighted_lowrank_with(
    y: &DMatrix<f64>,
    w: &WeightMask,
    lambda_nn: f64,
    x: &[DMatrix<f64>],
    opts: &SolverOptions,
    warm: Option<&DMatrix<f64>>,
) -> Result<TwoWayFactorFit> {
    check_shapes(y, w)?;
    if !(lambda_nn >= 0.0) {
        return Err(Error::InvalidInput("lambda_nn must be nonnegative".into()));
    }
    let (n, t) = y.shape();
    let wm = w.matrix();
    let wmax = wm.max();
    if !(wmax > 0.0) {
        return Err(Error::AllZeroWeights);
    }
    let fe = if opts.freeze_fixed_effects {
        None
    } else {
        Some(FixedEffects::new(wm, x, opts.strict)?)
    };
    let solve_fe = |z: &DMatrix<f64>| -> (DVector<f64>, DVector<f64>, DVector<f64>, DMatrix<f64>) {
        match &fe {
            None => (DVector::<f64>::zeros(n), DVector::<f64>::zeros(t), DVector::<f64>::zeros(0), DMatrix::<f64>::zeros(n, t)),
            Some(fe) => {
                let (a, b, bx) = fe.solve(z, wm);
                let c = fe.covariate_fit(&bx).unwrap_or_else(|| DMatrix::<f64>::zeros(n, t));
                (a, b, bx, c)
            }
        }
    };
    let (empty_units, empty_periods) = match &fe {
        Some(fe) => (fe.empty_units().to_vec(), fe.empty_periods().to_vec()),
        None => (Vec::new(), Vec::new()),
    };
    let has_cov = fe.as_ref().is_some_and(|f| f.n_covariates() > 0);

    if lambda_nn.is_infinite() {
        let l = DMatrix::<f64>::zeros(n, t);
        let (alpha, beta, beta_x, cpart) = solve_fe(y);
        let objective = weighted_loss(y, wm, &alpha, &beta, &cpart);
        return Ok(TwoWayFactorFit {
            alpha,
            beta,
            l,
            beta_x,
            objective,
            nuclear_norm: 0.0,
            iterations: 0,
            converged: true,
            trace: vec![objective],
            monotone: true,
            empty_units,
            empty_periods,
            covariate_part: if has_cov { Some(cpart) } else { None },
        });
    }

    let penalty = |nuc: f64| if lambda_nn == 0.0 { 0.0 } else { lambda_nn * nuc };
    let mut l = match warm {
        Some(l0) if l0.shape() == (n, t) => l0.clone(),
        _ => DMatrix::<f64>::zeros(n, t),
    };
    let mut nuc = if l.iter().any(|v| *v != 0.0) { linalg::nuclear_norm(&l) } else { 0.0 };
    let (mut alpha, mut beta, mut beta_x, mut cpart) = solve_fe(&(y - &l));
    let mut objective = weighted_loss(y, wm, &alpha, &beta, &(&cpart + &l)) + penalty(nuc);
    let mut trace = vec![objective];
    let mut monotone = true;
    let mut converged = false;
    let mut iterations = 0;
    let step = wm / wmax;
    let threshold = lambda_nn / (2.0 * wmax);

    // Proximal step from `z`, given the fixed-effects fit (a, b, c) at `z`.
    let prox = |z: &DMatrix<f64>, a: &DVector<f64>, b: &DVector<f64>, c: &DMatrix<f64>| {
        let mut g = z.clone();
        {
            let (gs, ys, zs, cs, ss) = (g.as_mut_slice(), y.as_slice(), z.as_slice(), c.as_slice(), step.as_slice());
            for s in 0..t {
                let r0 = s * n;
                for i in 0..n {
                    let sw = ss[r0 + i];
                    if sw != 0.0 {
                        let r = ys[r0 + i] - a[i] - b[s] - cs[r0 + i];
                        gs[r0 + i] += sw * (r - zs[r0 + i]);
                    }
                }
            }
        }
        let (l_new, nuc_new) = linalg::soft_threshold_gram(&g, threshold);
        let (a_new, b_new, bx_new, c_new) = solve_fe(&(y - &l_new));
        let obj_new = weighted_loss(y, wm, &a_new, &b_new, &(&c_new + &l_new)) + penalty(nuc_new);
        (l_new, nuc_new, a_new, b_new, bx_new, c_new, obj_new)
    };

    let mut l_prev = l.clone();
    let mut tk = 1.0f64;
    while iterations < opts.max_iter {
        iterations += 1;
        let t_next = (1.0 + (1.0 + 4.0 * tk * tk).sqrt()) / 2.0;
        let mom = (tk - 1.0) / t_next;
        let mut cand = None;
        if mom > 0.0 {
            let z = &l + (&l - &l_prev) * mom;
            let (az, bz, _, cz) = solve_fe(&(y - &z));
            let c = prox(&z, &az, &bz, &cz);
            if c.6 <= objective {
                cand = Some(c);
                tk = t_next;
            }
        }
        let (l_new, nuc_new, a_new, b_new, bx_new, c_new, obj_new) = match cand {
            Some(c) => c,
            None => {
                // plain step; a rejected extrapolation restarts the momentum
                tk = if mom > 0.0 { 1.0 } else { t_next };
                prox(&l, &alpha, &beta, &cpart)
            }
        };
        if obj_new > objective + 1e-12 {
            monotone = false;
        }
        let decrease = objective - obj_new;
        let settled = opts.step_tol.is_infinite() || (&l_new - &l).amax() <= opts.step_tol;
        l_prev = std::mem::replace(&mut l, l_new);
        nuc = nuc_new;
        alpha = a_new;
        beta = b_new;
        beta_x = bx_new;
        cpart = c_new;
        objective = obj_new;
        trace.push(objective);
        if objective <= f64::MIN_POSITIVE || (decrease <= opts.tol * objective.abs() && settled) {
            converged = true;
            break;
        }
    }

    if fe.is_some() {
        center(&mut alpha, &mut beta, &mut l, wm, &empty_units, &empty_periods);
        nuc = linalg::nuclear_norm(&l);
        let centered = weighted_loss(y, wm, &alpha, &beta, &(&cpart + &l)) + penalty(nuc);
        if centered > objective + 1e-12 {
            monotone = false;
        }
        objective = centered;
        if let Some(last) = trace.last_mut() {
            *last = objective;
        }
    }

    Ok(TwoWayFactorFit {
        alpha,
        beta,
        l,
        beta_x,
        objective,
        nuclear_norm: nuc,
        iterations,
        converged,
        trace,
        monotone,
        empty_units,
        empty_periods,
        covariate_part: if has_cov { Some(cpart) } else { None },
    })
}

/// Move the two-way means of L into (α, β): L ← J_N L J_T. The loss is unchanged
/// and the nuclear norm cannot grow, since J_N and J_T are orthogonal projections.
fn center(
    alpha: &mut DVector<f64>,
    beta: &mut DVector<f64>,
    l: &mut DMatrix<f64>,
    w: &DMatrix<f64>,
    empty_units: &[usize],
    empty_periods: &[usize],
) {
    let (n, t) = l.shape();
    let row: Vec<f64> = (0..n).map(|i| l.row(i).mean()).collect();
    let col: Vec<f64> = (0..t).map(|s| l.column(s).mean()).collect();
    let grand = l.mean();
    for i in 0..n {
        for s in 0..t {
            l[(i, s)] -= row[i] + col[s] - grand;
        }
    }
    for i in 0..n {
        alpha[i] += row[i] - grand;
    }
    for s in 0..t {
        beta[s] += col[s];
    }
    // keep empty units/periods at zero effect: fold their shift back into L
    for &i in empty_units {
        for s in 0..t {
            l[(i, s)] += alpha[i];
        }
        alpha[i] = 0.0;
    }
    for &s in empty_periods {
        for i in 0..n {
            l[(i, s)] += beta[s];
        }
        beta[s] = 0.0;
    }
    let tot: f64 = (0..t).map(|s| w.column(s).sum()).sum();
    let m: f64 = (0..t).map(|s| w.column(s).sum() * beta[s]).sum::<f64>() / tot;
    for s in 0..t {
        if !empty_periods.contains(&s) {
            beta[s] -= m;
        }
    }
    for i in 0..n {
        if !empty_units.contains(&i) {
            alpha[i] += m;
        }
    }
}

/// Best rank-`r` approximation of `y` in Frobenius norm.
pub fn fit_truncated_rank(y: &DMatrix<f64>, r: usize) -> Result<DMatrix<f64>> {
    let k = y.nrows().min(y.ncols());
    if r < 1 || r > k {
        return Err(Error::InvalidInput(format!("rank {r} outside 1..={k}")));
    }
    Ok(linalg::truncate(&linalg::svd(y), r))
}
