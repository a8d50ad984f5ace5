//! Finite-sample identities behind the balancing view of TROP: the four-term
//! counterfactual, its rank-one representation, and the bias decompositions.
//!
//! Conventions: a single treated cell at (N, T) (the last unit and period);
//! ω ranges over the first N−1 units and θ over the first T−1 periods, both on the simplex.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Exp1, StandardNormal};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg;

const NORMALIZATION_TOL: f64 = 1e-10;

/// True factor structure L = ΓΛᵀ plus the bias matrix B of a regression adjustment
/// with E[L̂ | L] = Γ(I + B)Λᵀ.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorGroundTruth {
    /// N × K unit loadings.
    pub gamma: DMatrix<f64>,
    /// T × K period factors.
    pub lambda: DMatrix<f64>,
    /// K × K.
    pub b: DMatrix<f64>,
}

impl FactorGroundTruth {
    pub fn new(gamma: DMatrix<f64>, lambda: DMatrix<f64>, b: DMatrix<f64>) -> Result<Self> {
        let k = gamma.ncols();
        if lambda.ncols() != k || b.shape() != (k, k) {
            return Err(Error::InvalidInput("loadings, factors, and B must share the factor dimension".into()));
        }
        if gamma.nrows() < 2 || lambda.nrows() < 2 {
            return Err(Error::InvalidInput("need at least two units and two periods".into()));
        }
        Ok(Self { gamma, lambda, b })
    }

    /// Factor a matrix of rank ≤ k as Γ = U√S, Λ = V√S, with B = 0.
    pub fn from_low_rank(l: &DMatrix<f64>, k: usize) -> Result<Self> {
        let dec = linalg::svd(l);
        let k = k.min(dec.s.len());
        let gamma = DMatrix::from_fn(l.nrows(), k, |i, r| dec.u[(i, r)] * dec.s[r].sqrt());
        let lambda = DMatrix::from_fn(l.ncols(), k, |t, r| dec.vt[(r, t)] * dec.s[r].sqrt());
        Self::new(gamma, lambda, DMatrix::zeros(k, k))
    }

    pub fn n_units(&self) -> usize {
        self.gamma.nrows()
    }

    pub fn n_periods(&self) -> usize {
        self.lambda.nrows()
    }

    pub fn rank(&self) -> usize {
        self.gamma.ncols()
    }

    /// L = ΓΛᵀ.
    pub fn l(&self) -> DMatrix<f64> {
        &self.gamma * self.lambda.transpose()
    }

    /// Γ(I + B)Λᵀ.
    pub fn biased_adjustment(&self) -> DMatrix<f64> {
        let k = self.rank();
        &self.gamma * (DMatrix::identity(k, k) + &self.b) * self.lambda.transpose()
    }

    /// (ΓQ, ΛQ, QᵀBQ) for orthogonal Q.
    pub fn rotate(&self, q: &DMatrix<f64>) -> Self {
        Self { gamma: &self.gamma * q, lambda: &self.lambda * q, b: q.transpose() * &self.b * q }
    }
}

/// Bias of the balancing counterfactual under a biased regression adjustment.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BiasReport {
    /// Δᵘ = Γ̄₀(ω) − Γ_N.
    pub delta_u: Vec<f64>,
    /// Δᵗ = Λ̄₀(θ) − Λ_T.
    pub delta_t: Vec<f64>,
    /// ‖Δᵘ‖₂·‖Δᵗ‖₂·‖B‖_*.
    pub bound: f64,
    /// Same product with the spectral norm of B (never larger than `bound`).
    pub spectral_bound: f64,
    /// Counterfactual minus the true noiseless outcome.
    pub realized: f64,
    /// Δᵘᵀ B Δᵗ.
    pub formula: f64,
}

fn check_simplex(v: &DVector<f64>) -> Result<()> {
    let s = v.sum();
    if v.iter().any(|x| !x.is_finite()) || (s - 1.0).abs() > NORMALIZATION_TOL {
        return Err(Error::WeightsNotNormalized(s));
    }
    Ok(())
}

fn check_sizes(n: usize, t: usize, theta: &DVector<f64>, omega: &DVector<f64>) -> Result<()> {
    if theta.len() + 1 != t || omega.len() + 1 != n {
        return Err(Error::InvalidInput(format!(
            "weights must cover {} units and {} periods, got {} and {}",
            n - 1,
            t - 1,
            omega.len(),
            theta.len()
        )));
    }
    Ok(())
}

/// Four-term counterfactual for the cell (N, T):
/// L̂_NT + Σ_t θ_t(Y_Nt − L̂_Nt) + Σ_i ω_i(Y_iT − L̂_iT) − Σ_i Σ_t ω_iθ_t(Y_it − L̂_it).
pub fn balancing_counterfactual(y: &DMatrix<f64>, lhat: &DMatrix<f64>, theta: &DVector<f64>, omega: &DVector<f64>) -> Result<f64> {
    if y.shape() != lhat.shape() {
        return Err(Error::InvalidInput("Y and L̂ shapes differ".into()));
    }
    let (n, t) = y.shape();
    check_sizes(n, t, theta, omega)?;
    check_simplex(theta)?;
    check_simplex(omega)?;
    let r = y - lhat;
    let (nn, tt) = (n - 1, t - 1);
    let own: f64 = (0..tt).map(|s| theta[s] * r[(nn, s)]).sum();
    let peer: f64 = (0..nn).map(|i| omega[i] * r[(i, tt)]).sum();
    let mut cross = 0.0;
    for s in 0..tt {
        let col: f64 = (0..nn).map(|i| omega[i] * r[(i, s)]).sum();
        cross += theta[s] * col;
    }
    Ok(lhat[(nn, tt)] + own + peer - cross)
}

/// M(θ, ω) = (e_N − U_ω)(V_θ − e_T)ᵀ.
pub fn rank_one_mask(theta: &DVector<f64>, omega: &DVector<f64>, n: usize, t: usize) -> Result<DMatrix<f64>> {
    check_sizes(n, t, theta, omega)?;
    check_simplex(theta)?;
    check_simplex(omega)?;
    let (a, b) = mask_factors(theta, omega);
    Ok(&a * b.transpose())
}

fn mask_factors(theta: &DVector<f64>, omega: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
    let (n, t) = (omega.len() + 1, theta.len() + 1);
    let a = DVector::from_fn(n, |i, _| if i + 1 == n { 1.0 } else { -omega[i] });
    let b = DVector::from_fn(t, |s, _| if s + 1 == t { -1.0 } else { theta[s] });
    (a, b)
}

/// Γ̄₀(ω) − Γ_N.
pub fn unit_discrepancy(gamma: &DMatrix<f64>, omega: &DVector<f64>) -> DVector<f64> {
    let n = gamma.nrows();
    let mut d = -gamma.row(n - 1).transpose();
    for i in 0..n - 1 {
        d += gamma.row(i).transpose() * omega[i];
    }
    d
}

/// Λ̄₀(θ) − Λ_T.
pub fn time_discrepancy(lambda: &DMatrix<f64>, theta: &DVector<f64>) -> DVector<f64> {
    unit_discrepancy(lambda, theta)
}

/// Errors τ̂ − τ of the classical estimators on a noiseless factor panel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MethodBiases {
    /// (Γ_N − Γ̄⁰)ᵀ(Λ_T − Λ̄⁰) with plain means over controls and pre-periods.
    pub did: f64,
    /// (Γ_N − Γ̄₀(ω))ᵀΛ_T.
    pub sc: f64,
    /// (Γ̄₀(ω) − Γ_N)ᵀ(Λ̄₀(θ) − Λ_T).
    pub sdid: f64,
}

/// Closed-form DID, SC, and SDID errors for the cell (N, T).
pub fn bias_formulas(gt: &FactorGroundTruth, theta: &DVector<f64>, omega: &DVector<f64>) -> Result<MethodBiases> {
    let (n, t) = (gt.n_units(), gt.n_periods());
    check_sizes(n, t, theta, omega)?;
    check_simplex(theta)?;
    check_simplex(omega)?;
    let uniform_u = DVector::from_element(n - 1, 1.0 / (n - 1) as f64);
    let uniform_t = DVector::from_element(t - 1, 1.0 / (t - 1) as f64);
    let du_bar = unit_discrepancy(&gt.gamma, &uniform_u);
    let dt_bar = time_discrepancy(&gt.lambda, &uniform_t);
    let du = unit_discrepancy(&gt.gamma, omega);
    let dt = time_discrepancy(&gt.lambda, theta);
    let lam_t = gt.lambda.row(t - 1).transpose();
    Ok(MethodBiases { did: du_bar.dot(&dt_bar), sc: -du.dot(&lam_t), sdid: du.dot(&dt) })
}

/// Realized bias of the balancing counterfactual on the noiseless panel with
/// L̂ = Γ(I + B)Λᵀ, alongside Δᵘᵀ B Δᵗ and the norm bound.
pub fn triple_robustness_check(gt: &FactorGroundTruth, theta: &DVector<f64>, omega: &DVector<f64>) -> Result<BiasReport> {
    let (n, t) = (gt.n_units(), gt.n_periods());
    let l = gt.l();
    let lhat = gt.biased_adjustment();
    let cf = balancing_counterfactual(&l, &lhat, theta, omega)?;
    let realized = cf - l[(n - 1, t - 1)];
    let du = unit_discrepancy(&gt.gamma, omega);
    let dt = time_discrepancy(&gt.lambda, theta);
    let formula = du.dot(&(&gt.b * &dt));
    let norms = du.norm() * dt.norm();
    Ok(BiasReport {
        delta_u: du.iter().copied().collect(),
        delta_t: dt.iter().copied().collect(),
        bound: norms * linalg::nuclear_norm(&gt.b),
        spectral_bound: norms * linalg::spectral_norm(&gt.b),
        realized,
        formula,
    })
}

/// Bias decomposition when the adjustment also estimates covariate coefficients.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CovariateBiasReport {
    /// Counterfactual minus the true noiseless outcome.
    pub realized: f64,
    /// Δᵘᵀ B Δᵗ − g(θ,ω)ᵀ δ_β.
    pub formula: f64,
    /// g(θ,ω) = Σ_it M_it X_it.
    pub g: Vec<f64>,
    /// ‖E‖_max (1 + ‖ω‖₁)(1 + ‖θ‖₁), bounding |realized − formula|.
    pub remainder_bound: f64,
}

/// Covariate contrast g(θ,ω) = (e_N − U_ω)ᵀ X (V_θ − e_T), one entry per covariate.
pub fn covariate_contrast(x: &[DMatrix<f64>], theta: &DVector<f64>, omega: &DVector<f64>) -> Result<DVector<f64>> {
    let Some(first) = x.first() else {
        return Ok(DVector::zeros(0));
    };
    let m = rank_one_mask(theta, omega, first.nrows(), first.ncols())?;
    Ok(DVector::from_iterator(x.len(), x.iter().map(|xk| linalg::inner(xk, &m))))
}

/// Y(0) = R + Xβ with R = ΓΛᵀ and L̂ − L = Xδ_β + ΓBΛᵀ + E_⊥.
#[allow(clippy::too_many_arguments)]
pub fn covariate_bias_check(
    gt: &FactorGroundTruth,
    x: &[DMatrix<f64>],
    beta: &DVector<f64>,
    beta_bias: &DVector<f64>,
    e_perp: &DMatrix<f64>,
    theta: &DVector<f64>,
    omega: &DVector<f64>,
) -> Result<CovariateBiasReport> {
    let (n, t) = (gt.n_units(), gt.n_periods());
    if x.len() != beta.len() || x.len() != beta_bias.len() {
        return Err(Error::InvalidInput("covariate count must match β and δ_β".into()));
    }
    if x.iter().any(|xk| xk.shape() != (n, t)) || e_perp.shape() != (n, t) {
        return Err(Error::InvalidInput("covariate and remainder matrices must be N×T".into()));
    }
    if theta.iter().chain(omega.iter()).any(|v| *v < 0.0) {
        return Err(Error::InvalidInput("weights must be nonnegative".into()));
    }
    let r = gt.l();
    let mut l = r.clone();
    let mut xd = DMatrix::zeros(n, t);
    for (k, xk) in x.iter().enumerate() {
        l += xk * beta[k];
        xd += xk * beta_bias[k];
    }
    let lhat = &l + xd + &gt.gamma * &gt.b * gt.lambda.transpose() + e_perp;
    let cf = balancing_counterfactual(&l, &lhat, theta, omega)?;
    let realized = cf - l[(n - 1, t - 1)];
    let g = covariate_contrast(x, theta, omega)?;
    let du = unit_discrepancy(&gt.gamma, omega);
    let dt = time_discrepancy(&gt.lambda, theta);
    let formula = du.dot(&(&gt.b * &dt)) - g.dot(beta_bias);
    let emax = e_perp.amax();
    let remainder_bound = emax * (1.0 + omega.lp_norm(1)) * (1.0 + theta.lp_norm(1));
    Ok(CovariateBiasReport { realized, formula, g: g.iter().copied().collect(), remainder_bound })
}

/// ε̄⁰(θ,ω) = Σ_{i<N} ω_i ε_iT + Σ_{t<T} θ_t ε_Nt − Σ_{i<N} Σ_{t<T} ω_iθ_t ε_it,
/// checked against ⟨ε, M(θ,ω)⟩ + ε_NT.
pub fn noise_decomposition(theta: &DVector<f64>, omega: &DVector<f64>, eps: &DMatrix<f64>) -> Result<f64> {
    let (n, t) = eps.shape();
    let m = rank_one_mask(theta, omega, n, t)?;
    let (nn, tt) = (n - 1, t - 1);
    let peer: f64 = (0..nn).map(|i| omega[i] * eps[(i, tt)]).sum();
    let own: f64 = (0..tt).map(|s| theta[s] * eps[(nn, s)]).sum();
    let mut cross = 0.0;
    for i in 0..nn {
        for s in 0..tt {
            cross += omega[i] * theta[s] * eps[(i, s)];
        }
    }
    let direct = peer + own - cross;
    let via_mask = linalg::inner(eps, &m) + eps[(nn, tt)];
    let scale = 1.0 + eps.amax();
    if (direct - via_mask).abs() > 1e-12 * scale {
        return Err(Error::Numerical(format!("noise identity off by {:e}", (direct - via_mask).abs())));
    }
    Ok(direct)
}

/// Both sides of τ̂(0) − Y_NT(0) = ⟨L − L̂, M⟩ + ε̄⁰ − ε_NT with Y = L + ε.
pub fn error_decomposition(
    l: &DMatrix<f64>,
    lhat: &DMatrix<f64>,
    eps: &DMatrix<f64>,
    theta: &DVector<f64>,
    omega: &DVector<f64>,
) -> Result<(f64, f64)> {
    let (n, t) = l.shape();
    let y = l + eps;
    let lhs = balancing_counterfactual(&y, lhat, theta, omega)? - y[(n - 1, t - 1)];
    let m = rank_one_mask(theta, omega, n, t)?;
    let rhs = linalg::inner(&(l - lhat), &m) + noise_decomposition(theta, omega, eps)? - eps[(n - 1, t - 1)];
    Ok((lhs, rhs))
}

fn normal_matrix<R: Rng + ?Sized>(rng: &mut R, r: usize, c: usize) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| StandardNormal.sample(&mut *rng))
}

/// Uniform draw from the simplex (normalized unit exponentials).
pub fn random_simplex<R: Rng + ?Sized>(rng: &mut R, m: usize) -> DVector<f64> {
    let v = DVector::from_fn(m, |_, _| Exp1.sample(&mut *rng));
    let s: f64 = v.sum();
    v / s
}

/// Random noiseless instance: N, T ∈ [5, 12], standard normal Γ, Λ, B, random simplex weights.
pub fn random_instance<R: Rng + ?Sized>(rng: &mut R, k: usize) -> (FactorGroundTruth, DVector<f64>, DVector<f64>) {
    let n = rng.random_range(5..=12);
    let t = rng.random_range(5..=12);
    let gt = FactorGroundTruth {
        gamma: normal_matrix(rng, n, k),
        lambda: normal_matrix(rng, t, k),
        b: normal_matrix(rng, k, k),
    };
    let theta = random_simplex(rng, t - 1);
    let omega = random_simplex(rng, n - 1);
    (gt, theta, omega)
}

/// Replace Γ_N by Γ̄₀(ω) so that the unit discrepancy vanishes.
pub fn balance_units(gt: &mut FactorGroundTruth, omega: &DVector<f64>) {
    let n = gt.n_units();
    let d = unit_discrepancy(&gt.gamma, omega);
    for r in 0..gt.rank() {
        gt.gamma[(n - 1, r)] += d[r];
    }
}

/// Replace Λ_T by Λ̄₀(θ) so that the time discrepancy vanishes.
pub fn balance_periods(gt: &mut FactorGroundTruth, theta: &DVector<f64>) {
    let t = gt.n_periods();
    let d = time_discrepancy(&gt.lambda, theta);
    for r in 0..gt.rank() {
        gt.lambda[(t - 1, r)] += d[r];
    }
}

/// Outcome of one identity check over a batch of random instances.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TheoryCheck {
    pub name: String,
    pub instances: usize,
    pub max_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl TheoryCheck {
    fn new(name: &str, instances: usize, max_error: f64, tolerance: f64) -> Self {
        Self { name: name.into(), instances, max_error, tolerance, passed: max_error <= tolerance }
    }
}

/// Run the representation and triple-robustness identities on random instances.
pub fn theory_battery<R: Rng + ?Sized>(rng: &mut R, instances: usize) -> Result<Vec<TheoryCheck>> {
    let mut rep = 0.0f64;
    let mut formula = 0.0f64;
    let mut bound = 0.0f64;
    let mut zero = [0.0f64; 3];
    let mut noise = 0.0f64;
    for _ in 0..instances {
        // rank-one representation on a 6×5 instance with arbitrary Y, L̂
        let y = normal_matrix(rng, 6, 5);
        let lhat = normal_matrix(rng, 6, 5);
        let theta = random_simplex(rng, 4);
        let omega = random_simplex(rng, 5);
        let m = rank_one_mask(&theta, &omega, 6, 5)?;
        let cf = balancing_counterfactual(&y, &lhat, &theta, &omega)?;
        rep = rep.max((cf - (y[(5, 4)] + linalg::inner(&(&y - &lhat), &m))).abs());
        let eps = normal_matrix(rng, 6, 5);
        let (lhs, rhs) = error_decomposition(&y, &lhat, &eps, &theta, &omega)?;
        noise = noise.max((lhs - rhs).abs());

        let (gt, theta, omega) = random_instance(rng, 2);
        let r = triple_robustness_check(&gt, &theta, &omega)?;
        formula = formula.max((r.realized - r.formula).abs());
        bound = bound.max(r.realized.abs() - r.bound);
        let mut g0 = gt.clone();
        g0.b.fill(0.0);
        zero[0] = zero[0].max(triple_robustness_check(&g0, &theta, &omega)?.realized.abs());
        let mut gu = gt.clone();
        balance_units(&mut gu, &omega);
        zero[1] = zero[1].max(triple_robustness_check(&gu, &theta, &omega)?.realized.abs());
        let mut gtm = gt.clone();
        balance_periods(&mut gtm, &theta);
        zero[2] = zero[2].max(triple_robustness_check(&gtm, &theta, &omega)?.realized.abs());
    }
    Ok(vec![
        TheoryCheck::new("rank_one_representation", instances, rep, 1e-10),
        TheoryCheck::new("error_decomposition", instances, noise, 1e-10),
        TheoryCheck::new("bias_equals_formula", instances, formula, 1e-10),
        TheoryCheck::new("bias_within_bound", instances, bound.max(0.0), 1e-10),
        TheoryCheck::new("zero_bias_exact_adjustment", instances, zero[0], 1e-10),
        TheoryCheck::new("zero_bias_unit_balance", instances, zero[1], 1e-10),
        TheoryCheck::new("zero_bias_time_balance", instances, zero[2], 1e-10),
    ])
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn mask_entries() {
        let theta = DVector::from_vec(vec![0.25, 0.75]);
        let omega = DVector::from_vec(vec![0.6, 0.4]);
        let m = rank_one_mask(&theta, &omega, 3, 3).unwrap();
        assert_eq!(m[(2, 0)], 0.25);
        assert_eq!(m[(2, 1)], 0.75);
        assert_eq!(m[(0, 2)], 0.6);
        assert_eq!(m[(1, 2)], 0.4);
        assert!((m[(0, 1)] + 0.6 * 0.75).abs() < 1e-15);
        assert_eq!(m[(2, 2)], -1.0);
    }

    #[test]
    fn unnormalized_weights_rejected() {
        let theta = DVector::from_vec(vec![0.5, 0.6]);
        let omega = DVector::from_vec(vec![0.5, 0.5]);
        assert!(matches!(rank_one_mask(&theta, &omega, 3, 3), Err(Error::WeightsNotNormalized(_))));
    }

    #[test]
    fn battery_passes() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for c in theory_battery(&mut rng, 50).unwrap() {
            assert!(c.passed, "{c:?}");
        }
    }
}
