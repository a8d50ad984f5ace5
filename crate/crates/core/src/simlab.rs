//! Semi-synthetic placebo studies: calibrate a factor-plus-AR(2) design from a
//! seed panel, draw panels from it, and score estimators by counterfactual RMSE.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::baselines::{run_method, sdid_zeta, Method};
use crate::error::{Error, Result};
use crate::linalg;
use crate::panel::{detect_block, normalize_outcomes, Panel};
use crate::simplex::simplex_ls;
use crate::solver::fit_truncated_rank;
use crate::trop::{QCells, TropConfig};
use crate::weights::TuningTriple;

mod rows {
    use nalgebra::DMatrix;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(m: &DMatrix<f64>, s: S) -> std::result::Result<S::Ok, S::Error> {
        crate::panel::matrix_rows(m).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<DMatrix<f64>, D::Error> {
        let rows = Vec::<Vec<f64>>::deserialize(d)?;
        crate::panel::matrix_from_rows(&rows).map_err(serde::de::Error::custom)
    }
}

/// How placebo treated units are drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AssignmentMode {
    /// n_tr units without replacement, probabilities ∝ the logistic propensity.
    Logistic,
    UniformRandom,
    /// Probabilities ∝ penalized SC weights fitted to the seed's treated unit.
    ScWeighted,
    /// The seed's own treated unit, scored over its last pre-treatment periods.
    ActualUnit,
}

impl FromStr for AssignmentMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "logistic" => Ok(Self::Logistic),
            "uniform_random" | "uniform" => Ok(Self::UniformRandom),
            "sc_weighted" => Ok(Self::ScWeighted),
            "actual_unit" => Ok(Self::ActualUnit),
            other => Err(Error::InvalidInput(format!("unknown assignment mode {other:?}"))),
        }
    }
}

/// Pooled AR(2) fit of the calibration residuals.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ArParams {
    pub rho1: f64,
    pub rho2: f64,
    /// Innovation variance.
    pub sigma2: f64,
    /// Shrinkage factor applied to restore stationarity (1 = none).
    pub shrink: f64,
}

impl ArParams {
    /// Largest modulus of the inverse characteristic roots.
    pub fn spectral_radius(&self) -> f64 {
        ar2_radius(self.rho1, self.rho2)
    }
}

fn ar2_radius(r1: f64, r2: f64) -> f64 {
    // roots of z² − ρ₁z − ρ₂
    let disc = r1 * r1 + 4.0 * r2;
    if disc >= 0.0 {
        let s = disc.sqrt();
        ((r1 + s) / 2.0).abs().max(((r1 - s) / 2.0).abs())
    } else {
        (-r2).sqrt()
    }
}

/// Simulation design.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DgpSpec {
    /// Rank used for L.
    pub rank: usize,
    #[serde(rename = "L", with = "rows")]
    pub l: DMatrix<f64>,
    #[serde(rename = "F", with = "rows")]
    pub f: DMatrix<f64>,
    #[serde(rename = "M", with = "rows")]
    pub m: DMatrix<f64>,
    pub ar: ArParams,
    #[serde(rename = "Sigma", with = "rows")]
    pub sigma: DMatrix<f64>,
    /// (φ_α, φ_M).
    pub phi: (f64, f64),
    /// Per-unit (α_i, M_i).
    pub unit_scores: Vec<(f64, f64)>,
    pub n_tr: usize,
    pub t_post: usize,
    pub assignment_mode: AssignmentMode,
    pub effect: f64,
    /// Selection probabilities for `sc_weighted`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sc_probs: Option<Vec<f64>>,
    /// Seed treated unit and its first treated period, for `actual_unit`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub actual_unit: Option<(usize, usize)>,
    #[serde(default)]
    pub ablations: Vec<String>,
}

impl DgpSpec {
    pub fn n_units(&self) -> usize {
        self.l.nrows()
    }

    pub fn n_periods(&self) -> usize {
        self.l.ncols()
    }

    pub fn validate(&self) -> Result<()> {
        let (n, t) = self.l.shape();
        if self.f.shape() != (n, t) || self.m.shape() != (n, t) || self.sigma.shape() != (t, t) {
            return Err(Error::InvalidInput("design matrices have inconsistent shapes".into()));
        }
        if self.unit_scores.len() != n {
            return Err(Error::InvalidInput("unit score count must equal N".into()));
        }
        if self.n_tr == 0 || self.n_tr + 1 > n {
            return Err(Error::InsufficientControls(format!("n_tr = {} with N = {n}", self.n_tr)));
        }
        if self.t_post == 0 || self.t_post + 2 > self.effective_periods() {
            return Err(Error::InvalidInput(format!("t_post = {} too large for T = {}", self.t_post, self.effective_periods())));
        }
        if let Some(p) = &self.sc_probs {
            if p.len() != n || p.iter().any(|v| !(*v >= 0.0)) {
                return Err(Error::InvalidInput("sc_probs must be N nonnegative values".into()));
            }
        }
        Ok(())
    }

    fn effective_periods(&self) -> usize {
        match (self.assignment_mode, self.actual_unit) {
            (AssignmentMode::ActualUnit, Some((_, t0))) => t0,
            _ => self.n_periods(),
        }
    }

    /// Canonical JSON of the full numeric payload.
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("design serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let spec: Self = serde_json::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    /// SHA-256 of the canonical JSON, hex encoded.
    pub fn fingerprint(&self) -> String {
        let digest = Sha256::digest(self.to_json().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// The design restricted to the last `keep` periods.
    pub fn last_periods(&self, keep: usize) -> Result<Self> {
        let t = self.n_periods();
        if keep < self.t_post + 2 || keep > t {
            return Err(Error::InfeasibleSweepValue { axis: "t_pre".into(), value: keep.saturating_sub(self.t_post) });
        }
        let start = t - keep;
        let l = self.l.columns(start, keep).into_owned();
        let (f, m) = additive_split(&l);
        let mut out = self.clone();
        out.l = &f + &m;
        out.f = f;
        out.m = m;
        out.sigma = self.sigma.view((start, start), (keep, keep)).into_owned();
        out.actual_unit = self.actual_unit.and_then(|(i, t0)| (t0 > start).then(|| (i, t0 - start)));
        Ok(out)
    }
}

/// F_it = row mean + column mean − grand mean of L, M = L − F.
pub fn additive_split(l: &DMatrix<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
    let (n, t) = l.shape();
    let row: Vec<f64> = (0..n).map(|i| l.row(i).mean()).collect();
    let col: Vec<f64> = (0..t).map(|s| l.column(s).mean()).collect();
    let grand = l.mean();
    let f = DMatrix::from_fn(n, t, |i, s| row[i] + col[s] - grand);
    let m = l - &f;
    (f, m)
}

/// Pooled least-squares AR(2) on the rows of `e`, without intercept.
pub fn fit_pooled_ar2(e: &DMatrix<f64>) -> Result<ArParams> {
    let (n, t) = e.shape();
    if t < 3 {
        return Err(Error::TooFewPeriods(format!("AR(2) needs T ≥ 3, got {t}")));
    }
    let (mut s11, mut s12, mut s22, mut b1, mut b2, mut yy, mut k) = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0usize);
    for i in 0..n {
        for s in 2..t {
            let (y, x1, x2) = (e[(i, s)], e[(i, s - 1)], e[(i, s - 2)]);
            s11 += x1 * x1;
            s12 += x1 * x2;
            s22 += x2 * x2;
            b1 += x1 * y;
            b2 += x2 * y;
            yy += y * y;
            k += 1;
        }
    }
    let det = s11 * s22 - s12 * s12;
    let (rho1, rho2) = if det > 1e-14 * (s11 * s22).max(f64::MIN_POSITIVE) {
        ((s22 * b1 - s12 * b2) / det, (s11 * b2 - s12 * b1) / det)
    } else {
        (0.0, 0.0)
    };
    let ssr = yy - 2.0 * (rho1 * b1 + rho2 * b2) + rho1 * rho1 * s11 + 2.0 * rho1 * rho2 * s12 + rho2 * rho2 * s22;
    let sigma2 = (ssr / k as f64).max(0.0);
    Ok(stationary(ArParams { rho1, rho2, sigma2, shrink: 1.0 }))
}

/// Shrink (ρ₁, ρ₂) toward 0 by the smallest amount that keeps every inverse root within 0.98.
pub fn stationary(ar: ArParams) -> ArParams {
    const LIMIT: f64 = 0.98;
    if ar.spectral_radius() <= LIMIT {
        return ar;
    }
    let (mut lo, mut hi) = (0.0, 1.0);
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        if ar2_radius(mid * ar.rho1, mid * ar.rho2) <= LIMIT {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    ArParams { rho1: lo * ar.rho1, rho2: lo * ar.rho2, sigma2: ar.sigma2, shrink: lo }
}

/// Stationary AR(2) autocovariance Toeplitz matrix of size T.
pub fn ar2_covariance(ar: &ArParams, t: usize) -> DMatrix<f64> {
    let (r1, r2) = (ar.rho1, ar.rho2);
    let mut gamma = vec![0.0; t.max(2)];
    gamma[0] = ar.sigma2 * (1.0 - r2) / ((1.0 + r2) * ((1.0 - r2).powi(2) - r1 * r1));
    gamma[1] = r1 * gamma[0] / (1.0 - r2);
    for k in 2..t {
        gamma[k] = r1 * gamma[k - 1] + r2 * gamma[k - 2];
    }
    DMatrix::from_fn(t, t, |a, b| gamma[a.abs_diff(b)])
}

/// Logistic regression of `d` on the columns of `x`, no intercept. Falls back to a
/// ridge penalty of 1e−4 when the unpenalized fit does not converge (separation).
pub fn fit_logistic(x: &DMatrix<f64>, d: &[f64]) -> (DVector<f64>, bool) {
    if let Some(b) = newton_logistic(x, d, 0.0) {
        return (b, false);
    }
    (newton_logistic(x, d, 1e-4).unwrap_or_else(|| DVector::zeros(x.ncols())), true)
}

fn newton_logistic(x: &DMatrix<f64>, d: &[f64], ridge: f64) -> Option<DVector<f64>> {
    let (n, p) = x.shape();
    let loglik = |b: &DVector<f64>| -> f64 {
        let eta = x * b;
        let mut ll = 0.0;
        for i in 0..n {
            let e = eta[i];
            // log(1 + e^e) computed stably
            let softplus = if e > 0.0 { e + (-e).exp().ln_1p() } else { e.exp().ln_1p() };
            ll += d[i] * e - softplus;
        }
        ll - 0.5 * ridge * b.norm_squared()
    };
    let mut b = DVector::<f64>::zeros(p);
    let mut ll = loglik(&b);
    for _ in 0..100 {
        let eta = x * &b;
        let pr: Vec<f64> = eta.iter().map(|e| 1.0 / (1.0 + (-e).exp())).collect();
        let mut grad = -&b * ridge;
        let mut hess = DMatrix::<f64>::identity(p, p) * ridge;
        for i in 0..n {
            let xi = x.row(i).transpose();
            grad += &xi * (d[i] - pr[i]);
            hess += &xi * xi.transpose() * (pr[i] * (1.0 - pr[i]));
        }
        let step = hess.clone().cholesky()?.solve(&grad);
        let mut scale = 1.0;
        let mut next = &b + &step * scale;
        let mut ll_next = loglik(&next);
        while ll_next < ll - 1e-12 && scale > 1e-8 {
            scale *= 0.5;
            next = &b + &step * scale;
            ll_next = loglik(&next);
        }
        if ll_next < ll - 1e-12 {
            return None;
        }
        let moved = (&next - &b).amax();
        b = next;
        ll = ll_next;
        if b.amax() > 1e3 {
            return None;
        }
        if moved < 1e-10 * (1.0 + b.amax()) {
            return Some(b);
        }
    }
    None
}

/// Options for [`calibrate`] beyond the factor rank.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CalibrationOptions {
    pub rank: usize,
    pub n_tr: usize,
    pub t_post: usize,
    pub assignment_mode: AssignmentMode,
}

impl Default for CalibrationOptions {
    fn default() -> Self {
        Self { rank: 4, n_tr: 10, t_post: 10, assignment_mode: AssignmentMode::Logistic }
    }
}

/// Fit a design to a seed panel; outcomes are standardized first.
pub fn calibrate(panel: &Panel, rank: usize) -> Result<DgpSpec> {
    calibrate_with(panel, &CalibrationOptions { rank, ..Default::default() })
}

pub fn calibrate_with(panel: &Panel, opts: &CalibrationOptions) -> Result<DgpSpec> {
    let (n, t) = (panel.n_units(), panel.n_periods());
    if t < 5 {
        return Err(Error::TooFewPeriods(format!("calibration needs T ≥ 5, got {t}")));
    }
    let (std_panel, _) = normalize_outcomes(panel)?;
    let y = std_panel.y();
    let rank = opts.rank.clamp(1, n.min(t));
    let l = fit_truncated_rank(y, rank)?;
    let (f, m) = additive_split(&l);
    let ar = fit_pooled_ar2(&(y - &l))?;
    let sigma = ar2_covariance(&ar, t);
    // store L as F + M so the decomposition holds bit for bit
    let l = &f + &m;

    let grand = f.mean();
    let alpha: Vec<f64> = (0..n).map(|i| f.row(i).mean() - grand).collect();
    let dec = linalg::svd(&m);
    let m_score: Vec<f64> = (0..n).map(|i| dec.u[(i, 0)] * dec.s[0]).collect();
    let unit_scores: Vec<(f64, f64)> = alpha.iter().copied().zip(m_score.iter().copied()).collect();
    let d: Vec<f64> = (0..n).map(|i| if (0..t).any(|s| panel.is_treated(i, s)) { 1.0 } else { 0.0 }).collect();
    let x = DMatrix::from_fn(n, 2, |i, c| if c == 0 { alpha[i] } else { m_score[i] });
    let (phi, _) = fit_logistic(&x, &d);

    let (mut sc_probs, mut actual_unit) = (None, None);
    if let Some(b) = detect_block(&std_panel) {
        let target = b.treated_units[0];
        actual_unit = Some((target, b.t0));
        let a = DMatrix::from_fn(b.t0, b.n0, |r, j| y[(b.control_units[j], b.pre_periods[r])]);
        let rhs = DVector::from_fn(b.t0, |r, _| y[(target, b.pre_periods[r])]);
        let zeta = sdid_zeta(&std_panel, &b);
        let w = simplex_ls(&a, &rhs, zeta * zeta * b.t0 as f64).weights;
        let mut probs = vec![0.0; n];
        for (j, &u) in b.control_units.iter().enumerate() {
            probs[u] = w[j];
        }
        sc_probs = Some(probs);
    }
    let spec = DgpSpec {
        rank,
        l,
        f,
        m,
        ar,
        sigma,
        phi: (phi[0], phi[1]),
        unit_scores,
        n_tr: opts.n_tr.min(n - 1).max(1),
        t_post: opts.t_post.min(t - 2).max(1),
        assignment_mode: opts.assignment_mode,
        effect: 0.0,
        sc_probs,
        actual_unit,
        ablations: Vec::new(),
    };
    spec.validate()?;
    Ok(spec)
}

/// Components that [`ablate`] can zero out.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    NoAr,
    #[serde(rename = "no_M")]
    NoM,
    #[serde(rename = "no_F")]
    NoF,
    OnlyNoise,
}

impl Ablation {
    pub fn name(&self) -> &'static str {
        match self {
            Self::NoAr => "no_ar",
            Self::NoM => "no_M",
            Self::NoF => "no_F",
            Self::OnlyNoise => "only_noise",
        }
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "no_ar" => Ok(Self::NoAr),
            "no_M" | "no_m" => Ok(Self::NoM),
            "no_F" | "no_f" => Ok(Self::NoF),
            "only_noise" => Ok(Self::OnlyNoise),
            other => Err(Error::InvalidInput(format!("unknown ablation {other:?}"))),
        }
    }
}

/// Zero one component of the outcome model; assignment scores are left as calibrated.
pub fn ablate(spec: &DgpSpec, component: Ablation) -> DgpSpec {
    let mut out = spec.clone();
    let zero_m = |o: &mut DgpSpec| {
        o.m.fill(0.0);
        o.l = o.f.clone();
    };
    let zero_f = |o: &mut DgpSpec| {
        o.f.fill(0.0);
        o.l = o.m.clone();
    };
    match component {
        Ablation::NoAr => {
            // white noise with the same marginal variance
            let t = spec.n_periods();
            let v = spec.sigma.trace() / t as f64;
            out.ar = ArParams { rho1: 0.0, rho2: 0.0, sigma2: v, shrink: spec.ar.shrink };
            out.sigma = DMatrix::identity(t, t) * v;
        }
        Ablation::NoM => zero_m(&mut out),
        Ablation::NoF => zero_f(&mut out),
        Ablation::OnlyNoise => {
            zero_m(&mut out);
            zero_f(&mut out);
        }
    }
    out.ablations.push(component.name().into());
    out
}

/// Sampler for rows of N(0, Σ) through the symmetric square root.
#[derive(Debug, Clone)]
pub struct NoiseSampler {
    root: DMatrix<f64>,
}

impl NoiseSampler {
    pub fn new(sigma: &DMatrix<f64>) -> Self {
        let eig = nalgebra::SymmetricEigen::new(sigma.clone());
        let t = sigma.nrows();
        let mut root = DMatrix::zeros(t, t);
        for k in 0..t {
            let s = eig.eigenvalues[k].max(0.0).sqrt();
            if s > 0.0 {
                let v = eig.eigenvectors.column(k);
                root.ger(s, &v, &v, 1.0);
            }
        }
        Self { root }
    }

    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R, n: usize) -> DMatrix<f64> {
        let t = self.root.nrows();
        let z = DMatrix::from_fn(t, n, |_, _| StandardNormal.sample(&mut *rng));
        (&self.root * z).transpose()
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Selection probabilities of the logistic model for each unit.
pub fn propensities(spec: &DgpSpec) -> Vec<f64> {
    spec.unit_scores.iter().map(|(a, m)| sigmoid(spec.phi.0 * a + spec.phi.1 * m)).collect()
}

fn sample_units<R: Rng + ?Sized>(rng: &mut R, probs: &[f64], k: usize) -> Result<Vec<usize>> {
    let positive = probs.iter().filter(|p| **p > 0.0).count();
    if positive < k {
        return Err(Error::InsufficientControls(format!("only {positive} units have positive selection probability, need {k}")));
    }
    let idx = index::sample_weighted(rng, probs.len(), |i| probs[i], k).map_err(|e| Error::Numerical(e.to_string()))?;
    let mut out: Vec<usize> = idx.into_iter().collect();
    out.sort_unstable();
    Ok(out)
}

/// One draw: the observed panel and the true untreated outcomes Y(0).
pub fn generate<R: Rng + ?Sized>(spec: &DgpSpec, rng: &mut R) -> Result<(Panel, DMatrix<f64>)> {
    spec.validate()?;
    let n = spec.n_units();
    let t = spec.effective_periods();
    let l = spec.l.columns(0, t);
    let sigma = spec.sigma.view((0, 0), (t, t)).into_owned();
    let eps = NoiseSampler::new(&sigma).draw(rng, n);
    let y0 = l + eps;
    let treated = match spec.assignment_mode {
        AssignmentMode::Logistic => sample_units(rng, &propensities(spec), spec.n_tr)?,
        AssignmentMode::UniformRandom => {
            let mut v: Vec<usize> = index::sample(rng, n, spec.n_tr).into_iter().collect();
            v.sort_unstable();
            v
        }
        AssignmentMode::ScWeighted => {
            let probs = spec.sc_probs.as_ref().ok_or_else(|| Error::InvalidInput("design has no SC selection weights".into()))?;
            sample_units(rng, probs, spec.n_tr)?
        }
        AssignmentMode::ActualUnit => {
            let (u, _) = spec.actual_unit.ok_or_else(|| Error::InvalidInput("design has no actual treated unit".into()))?;
            vec![u]
        }
    };
    let mut w = DMatrix::zeros(n, t);
    for &i in &treated {
        for s in t - spec.t_post..t {
            w[(i, s)] = 1.0;
        }
    }
    let y = &y0 + &w * spec.effect;
    Ok((Panel::from_matrices(y, w)?, y0))
}

/// Per-replication generator: stream 0 is reserved for the tuning pilot.
pub fn replication_rng(seed: u64, rep: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(rep as u64 + 1);
    rng
}

fn pilot_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(0);
    rng
}

/// One row of a study table.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MethodScore {
    pub method: String,
    pub rmse: f64,
    /// Mean of τ̂_it − τ_it over treated cells.
    pub bias: f64,
    pub rmse_normalized: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimReport {
    pub rows: Vec<MethodScore>,
    pub reps: usize,
    pub seed: u64,
    /// Regularizers used by tuned methods.
    pub lambdas: Vec<(String, TuningTriple)>,
}

impl SimReport {
    pub fn header() -> &'static str {
        "method,rmse,bias,rmse_normalized,reps,seed"
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(Self::header());
        out.push('\n');
        for r in &self.rows {
            out.push_str(&format!("{},{},{},{},{},{}\n", r.method, r.rmse, r.bias, r.rmse_normalized, self.reps, self.seed));
        }
        out
    }

    pub fn score(&self, method: &str) -> Option<&MethodScore> {
        self.rows.iter().find(|r| r.method == method)
    }
}

/// Study settings.
#[derive(Debug, Clone, PartialEq)]
pub struct StudyOptions {
    /// Estimator settings; `q_cells` applies to pilot tuning.
    pub config: TropConfig,
    /// Fixed regularizers per tuned method, skipping the pilot.
    pub lambdas: Vec<(Method, TuningTriple)>,
    /// Re-tune on every replication instead of once on the pilot draw.
    pub retune_each_rep: bool,
}

impl Default for StudyOptions {
    fn default() -> Self {
        Self {
            config: TropConfig { q_cells: QCells::Sample(200), ..Default::default() },
            lambdas: Vec::new(),
            retune_each_rep: false,
        }
    }
}

/// λ for each tuned method, chosen on the pilot draw (stream 0) unless given.
pub fn pilot_lambdas(spec: &DgpSpec, methods: &[Method], seed: u64, opts: &StudyOptions) -> Result<Vec<(Method, TuningTriple)>> {
    let mut out = Vec::new();
    let mut pilot: Option<Panel> = None;
    for &m in methods {
        if !m.is_tuned() {
            continue;
        }
        if let Some((_, l)) = opts.lambdas.iter().find(|(k, _)| *k == m) {
            out.push((m, *l));
            continue;
        }
        if pilot.is_none() {
            pilot = Some(generate(spec, &mut pilot_rng(seed))?.0);
        }
        let p = pilot.as_ref().unwrap();
        let g = run_method(p, m, None, &opts.config)?;
        out.push((m, g.lambda.expect("tuned method reports λ")));
    }
    Ok(out)
}

struct RepErrors {
    sq: Vec<f64>,
    sum: Vec<f64>,
    cells: Vec<usize>,
}

fn score_replication(
    panel: &Panel,
    y0: &DMatrix<f64>,
    methods: &[Method],
    lambdas: &[(Method, TuningTriple)],
    opts: &StudyOptions,
) -> Result<RepErrors> {
    let mut rep = RepErrors { sq: Vec::new(), sum: Vec::new(), cells: Vec::new() };
    for &m in methods {
        let lambda = if opts.retune_each_rep { None } else { lambdas.iter().find(|(k, _)| *k == m).map(|(_, l)| *l) };
        let g = run_method(panel, m, lambda, &opts.config)?;
        let (mut sq, mut sum) = (0.0, 0.0);
        for c in &g.cells {
            let err = y0[(c.unit, c.time)] - c.yhat0;
            sq += err * err;
            sum += err;
        }
        rep.sq.push(sq);
        rep.sum.push(sum);
        rep.cells.push(g.cells.len());
    }
    Ok(rep)
}

fn summarize(methods: &[Method], reps: Vec<RepErrors>, seed: u64, lambdas: &[(Method, TuningTriple)]) -> SimReport {
    let k = methods.len();
    let (mut sq, mut sum, mut cnt) = (vec![0.0; k], vec![0.0; k], vec![0usize; k]);
    for r in &reps {
        for j in 0..k {
            sq[j] += r.sq[j];
            sum[j] += r.sum[j];
            cnt[j] += r.cells[j];
        }
    }
    let rmse: Vec<f64> = (0..k).map(|j| (sq[j] / cnt[j] as f64).sqrt()).collect();
    let names: Vec<String> = methods.iter().map(|m| m.name()).collect();
    let mut best = 0;
    for j in 1..k {
        if rmse[j] < rmse[best] || (rmse[j] == rmse[best] && names[j] < names[best]) {
            best = j;
        }
    }
    let rows = (0..k)
        .map(|j| {
            let mut norm = if rmse[best] > 0.0 { rmse[j] / rmse[best] } else if rmse[j] > 0.0 { f64::INFINITY } else { 1.0 };
            if j != best && norm <= 1.0 {
                // exact tie with the winner: keep the winner unique
                norm = f64::from_bits(1f64.to_bits() + 1);
            }
            if j == best {
                norm = 1.0;
            }
            MethodScore { method: names[j].clone(), rmse: rmse[j], bias: sum[j] / cnt[j] as f64, rmse_normalized: norm }
        })
        .collect();
    SimReport {
        rows,
        reps: reps.len(),
        seed,
        lambdas: lambdas.iter().map(|(m, l)| (m.name(), *l)).collect(),
    }
}

/// Monte Carlo placebo study; replications run in parallel with ordered reduction.
pub fn run_study(spec: &DgpSpec, methods: &[Method], reps: usize, seed: u64, opts: &StudyOptions) -> Result<SimReport> {
    run_study_with(spec, methods, reps, seed, opts, |p, _| Ok(p))
}

fn run_study_with(
    spec: &DgpSpec,
    methods: &[Method],
    reps: usize,
    seed: u64,
    opts: &StudyOptions,
    transform: impl Fn((Panel, DMatrix<f64>), &mut ChaCha8Rng) -> Result<(Panel, DMatrix<f64>)> + Sync,
) -> Result<SimReport> {
    if reps == 0 {
        return Err(Error::InvalidInput("reps must be at least 1".into()));
    }
    if methods.is_empty() {
        return Err(Error::InvalidInput("no methods given".into()));
    }
    spec.validate()?;
    let lambdas = if opts.retune_each_rep { Vec::new() } else { pilot_lambdas(spec, methods, seed, opts)? };
    let results: Vec<Result<RepErrors>> = (0..reps)
        .into_par_iter()
        .map(|r| {
            let mut rng = replication_rng(seed, r);
            let draw = generate(spec, &mut rng)?;
            let (panel, y0) = transform(draw, &mut rng)?;
            score_replication(&panel, &y0, methods, &lambdas, opts)
        })
        .collect();
    let reps_out = results.into_iter().collect::<Result<Vec<_>>>()?;
    Ok(summarize(methods, reps_out, seed, &lambdas))
}

/// Design dimension varied by [`sweep`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    NControl,
    TPre,
    NTreated,
    TPost,
}

impl SweepAxis {
    pub fn name(&self) -> &'static str {
        match self {
            Self::NControl => "n_control",
            Self::TPre => "t_pre",
            Self::NTreated => "n_treated",
            Self::TPost => "t_post",
        }
    }
}

impl FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "n_control" => Ok(Self::NControl),
            "t_pre" => Ok(Self::TPre),
            "n_treated" => Ok(Self::NTreated),
            "t_post" => Ok(Self::TPost),
            other => Err(Error::InvalidInput(format!("unknown sweep axis {other:?}"))),
        }
    }
}

impl fmt::Display for SweepAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepPoint {
    pub axis: SweepAxis,
    pub value: usize,
    pub report: SimReport,
}

pub fn sweep_csv(points: &[SweepPoint]) -> String {
    let mut out = format!("axis,value,{}\n", SimReport::header());
    for p in points {
        for r in &p.report.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                p.axis, p.value, r.method, r.rmse, r.bias, r.rmse_normalized, p.report.reps, p.report.seed
            ));
        }
    }
    out
}

fn infeasible(axis: SweepAxis, value: usize) -> Error {
    Error::InfeasibleSweepValue { axis: axis.name().into(), value }
}

/// Keep the treated units plus `k` control units drawn uniformly.
fn subsample_controls(draw: (Panel, DMatrix<f64>), rng: &mut ChaCha8Rng, k: usize) -> Result<(Panel, DMatrix<f64>)> {
    let (panel, y0) = draw;
    let b = detect_block(&panel).ok_or(Error::NotBlockDesign)?;
    if k > b.n0 {
        return Err(infeasible(SweepAxis::NControl, k));
    }
    if k == b.n0 {
        return Ok((panel, y0));
    }
    let pick = index::sample(rng, b.n0, k);
    let mut rows: Vec<usize> = pick.into_iter().map(|j| b.control_units[j]).chain(b.treated_units.iter().copied()).collect();
    rows.sort_unstable();
    let cols: Vec<usize> = (0..panel.n_periods()).collect();
    let sub = panel.select(&rows, &cols)?;
    let y0s = DMatrix::from_fn(rows.len(), cols.len(), |a, s| y0[(rows[a], s)]);
    Ok((sub, y0s))
}

/// One study per value of `axis`.
pub fn sweep(
    spec: &DgpSpec,
    axis: SweepAxis,
    values: &[usize],
    methods: &[Method],
    reps: usize,
    seed: u64,
    opts: &StudyOptions,
) -> Result<Vec<SweepPoint>> {
    let (n, t) = (spec.n_units(), spec.n_periods());
    let mut out = Vec::new();
    for &v in values {
        let report = match axis {
            SweepAxis::NControl => {
                if v < 2 || v + spec.n_tr > n {
                    return Err(infeasible(axis, v));
                }
                run_study_with(spec, methods, reps, seed, opts, |d, rng| subsample_controls(d, rng, v))?
            }
            SweepAxis::TPre => {
                if v < 2 || v + spec.t_post > t {
                    return Err(infeasible(axis, v));
                }
                run_study(&spec.last_periods(v + spec.t_post)?, methods, reps, seed, opts)?
            }
            SweepAxis::NTreated => {
                if v < 1 || v + 2 > n {
                    return Err(infeasible(axis, v));
                }
                let mut s = spec.clone();
                s.n_tr = v;
                run_study(&s, methods, reps, seed, opts)?
            }
            SweepAxis::TPost => {
                if v < 1 || v + 2 > spec.effective_periods() {
                    return Err(infeasible(axis, v));
                }
                let mut s = spec.clone();
                s.t_post = v;
                run_study(&s, methods, reps, seed, opts)?
            }
        };
        out.push(SweepPoint { axis, value: v, report });
    }
    Ok(out)
}

/// Names of the bundled seed panels.
pub const BUNDLED_SEEDS: [&str; 2] = ["factor50", "factor17"];

/// Seed of the generator behind the bundled panels.
pub const BUNDLED_SEED: u64 = 20_240_601;

/// Fixed-seed factor-model panels standing in for the empirical seeds.
///
/// `factor50`: 50 units × 40 periods, rank-4 factors with a strong interactive
/// part, AR(2) noise, and a policy indicator whose probability rises with the
/// first interactive loading; adopters are treated in the last 10 periods.
/// `factor17`: 17 units × 44 periods, rank-3 factors, one treated unit (the
/// unit with the largest first loading) treated in the last 14 periods.
pub fn bundled_seed(name: &str) -> Result<Panel> {
    let mut rng = ChaCha8Rng::seed_from_u64(BUNDLED_SEED);
    match name {
        "factor50" => {
            rng.set_stream(50);
            seed_panel(&mut rng, 50, 40, &[1.6, 1.1, 0.8, 0.5], 0.35, |rng, g| {
                let mut d: Vec<bool> = (0..g.nrows()).map(|i| rng.random::<f64>() < sigmoid(2.5 * g[(i, 0)] - 1.6)).collect();
                // keep at least two adopters and two non-adopters
                for i in 0..2 {
                    d[i] = true;
                    d[g.nrows() - 1 - i] = false;
                }
                (d, 10)
            })
        }
        "factor17" => {
            rng.set_stream(17);
            seed_panel(&mut rng, 17, 44, &[1.4, 0.9, 0.6], 0.25, |_, g| {
                let top = (0..g.nrows()).max_by(|&a, &b| g[(a, 0)].partial_cmp(&g[(b, 0)]).unwrap()).unwrap();
                ((0..g.nrows()).map(|i| i == top).collect(), 14)
            })
        }
        other => Err(Error::InvalidInput(format!("unknown bundled seed {other:?}; choose one of {BUNDLED_SEEDS:?}"))),
    }
}

fn seed_panel(
    rng: &mut ChaCha8Rng,
    n: usize,
    t: usize,
    scales: &[f64],
    noise_sd: f64,
    adopt: impl Fn(&mut ChaCha8Rng, &DMatrix<f64>) -> (Vec<bool>, usize),
) -> Result<Panel> {
    let k = scales.len();
    let normal = |rng: &mut ChaCha8Rng| -> f64 { StandardNormal.sample(rng) };
    let alpha: Vec<f64> = (0..n).map(|_| normal(rng)).collect();
    let trend: Vec<f64> = (0..t).map(|s| 0.03 * s as f64 + 0.2 * (s as f64 / 4.0).sin()).collect();
    let gamma = DMatrix::from_fn(n, k, |_, _| normal(rng));
    // smooth period factors: standardized random walks
    let mut lambda = DMatrix::zeros(t, k);
    for c in 0..k {
        let mut v = 0.0;
        for s in 0..t {
            v += normal(rng);
            lambda[(s, c)] = v;
        }
        let col = lambda.column(c).into_owned();
        let mean = col.mean();
        let sd = (col.map(|x| (x - mean).powi(2)).sum() / t as f64).sqrt().max(1e-12);
        for s in 0..t {
            lambda[(s, c)] = (lambda[(s, c)] - mean) / sd * scales[c];
        }
    }
    let (d, t_post) = adopt(rng, &gamma);
    let (r1, r2) = (0.3, 0.1);
    let mut y = DMatrix::zeros(n, t);
    for i in 0..n {
        let (mut e1, mut e2) = (0.0, 0.0);
        // burn-in so the noise starts near stationarity
        for _ in 0..50 {
            let e = r1 * e1 + r2 * e2 + noise_sd * normal(rng);
            e2 = e1;
            e1 = e;
        }
        for s in 0..t {
            let e = r1 * e1 + r2 * e2 + noise_sd * normal(rng);
            e2 = e1;
            e1 = e;
            let inter: f64 = (0..k).map(|c| gamma[(i, c)] * lambda[(s, c)]).sum();
            y[(i, s)] = alpha[i] + trend[s] + inter + e;
        }
    }
    let w = DMatrix::from_fn(n, t, |i, s| if d[i] && s >= t - t_post { 1.0 } else { 0.0 });
    Panel::from_matrices(y, w)
}

/// The bundled strong-interactive design with confounded assignment.
pub fn bundled_design(name: &str) -> Result<DgpSpec> {
    let panel = bundled_seed(name)?;
    let opts = match name {
        "factor17" => CalibrationOptions { n_tr: 1, t_post: 10, assignment_mode: AssignmentMode::UniformRandom, ..Default::default() },
        _ => CalibrationOptions::default(),
    };
    calibrate_with(&panel, &opts)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ar2_covariance_matches_recursion() {
        let ar = ArParams { rho1: 0.5, rho2: -0.2, sigma2: 1.0, shrink: 1.0 };
        let s = ar2_covariance(&ar, 6);
        // Yule-Walker: γ0 = ρ1γ1 + ρ2γ2 + σ²
        assert!((s[(0, 0)] - (0.5 * s[(0, 1)] - 0.2 * s[(0, 2)] + 1.0)).abs() < 1e-12);
        assert!((s[(0, 1)] - (0.5 * s[(0, 0)] - 0.2 * s[(0, 1)])).abs() < 1e-12);
    }

    #[test]
    fn nonstationary_fit_is_shrunk() {
        let ar = stationary(ArParams { rho1: 1.2, rho2: 0.1, sigma2: 1.0, shrink: 1.0 });
        assert!(ar.shrink < 1.0);
        assert!((ar.spectral_radius() - 0.98).abs() < 1e-9);
    }

    #[test]
    fn logistic_recovers_coefficients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = 4000;
        let x = DMatrix::from_fn(n, 2, |_, _| StandardNormal.sample(&mut rng));
        let d: Vec<f64> = (0..n).map(|i| if rng.random::<f64>() < sigmoid(1.0 * x[(i, 0)] - 0.5 * x[(i, 1)]) { 1.0 } else { 0.0 }).collect();
        let (b, ridge) = fit_logistic(&x, &d);
        assert!(!ridge);
        assert!((b[0] - 1.0).abs() < 0.15 && (b[1] + 0.5).abs() < 0.15, "{b:?}");
    }

    #[test]
    fn separation_uses_ridge() {
        let x = DMatrix::from_column_slice(4, 2, &[-2.0, -1.0, 1.0, 2.0, 0.0, 0.0, 0.0, 0.0]);
        let (b, ridge) = fit_logistic(&x, &[0.0, 0.0, 1.0, 1.0]);
        assert!(ridge);
        assert!(b.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn additive_seed_has_no_interactive_part() {
        let y = DMatrix::from_fn(8, 7, |i, s| i as f64 * 0.5 + (s as f64).sqrt());
        let mut w = DMatrix::zeros(8, 7);
        w[(7, 6)] = 1.0;
        let p = Panel::from_matrices(y, w).unwrap();
        let spec = calibrate_with(&p, &CalibrationOptions { n_tr: 1, t_post: 1, ..Default::default() }).unwrap();
        assert!(spec.m.norm() < 1e-9);
    }
}
