//! The TROP estimator: per-cell effects, the leave-one-out criterion Q(λ),
//! cyclic grid search over (λ_unit, λ_time, λ_nn), and the ATT.

use std::collections::HashMap;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::panel::Panel;
use crate::solver::{fit_weighted_lowrank_with, SolverOptions, TwoWayFactorFit, WeightMask};
use crate::weights::{cell_weights, CellWeights, TuningTriple};

/// Candidate values for each regularizer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuningGrid {
    pub unit: Vec<f64>,
    pub time: Vec<f64>,
    #[serde(with = "inf_vec")]
    pub nn: Vec<f64>,
}

mod inf_vec {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(v: &[f64], s: S) -> std::result::Result<S::Ok, S::Error> {
        let out: Vec<serde_json::Value> = v
            .iter()
            .map(|x| if x.is_infinite() { serde_json::Value::from("inf") } else { serde_json::Value::from(*x) })
            .collect();
        out.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<Vec<f64>, D::Error> {
        let raw = Vec::<serde_json::Value>::deserialize(d)?;
        raw.into_iter()
            .map(|v| match v {
                serde_json::Value::String(s) if s == "inf" => Ok(f64::INFINITY),
                other => other.as_f64().ok_or_else(|| serde::de::Error::custom("expected number or \"inf\"")),
            })
            .collect()
    }
}

/// Default kernel-rate grid for λ_unit and λ_time.
pub const DEFAULT_RATE_GRID: [f64; 11] = [0.0, 0.025, 0.05, 0.1, 0.2, 0.3, 0.4, 0.5, 1.0, 2.0, 4.0];

impl TuningGrid {
    /// Default grids; λ_nn candidates are scaled by the TWFE residual sd of the panel.
    pub fn default_for(panel: &Panel) -> Result<Self> {
        let sigma = twfe_residual_sd(panel)?;
        let mut nn: Vec<f64> = (0..13).map(|k| 10f64.powf(-3.0 + 0.25 * k as f64) * sigma).collect();
        nn.push(f64::INFINITY);
        Ok(Self { unit: DEFAULT_RATE_GRID.to_vec(), time: DEFAULT_RATE_GRID.to_vec(), nn })
    }

    /// A single-point grid.
    pub fn fixed(lambda: TuningTriple) -> Self {
        Self { unit: vec![lambda.lambda_unit], time: vec![lambda.lambda_time], nn: vec![lambda.lambda_nn] }
    }

    fn normalized(&self) -> Result<Self> {
        let clean = |v: &[f64], name: &str| -> Result<Vec<f64>> {
            let mut out: Vec<f64> = v.to_vec();
            if out.is_empty() {
                return Err(Error::InvalidInput(format!("empty {name} grid")));
            }
            if out.iter().any(|x| x.is_nan() || *x < 0.0) {
                return Err(Error::InvalidInput(format!("{name} grid must be nonnegative")));
            }
            out.sort_by(|a, b| a.partial_cmp(b).unwrap());
            out.dedup();
            Ok(out)
        };
        let g = Self { unit: clean(&self.unit, "unit")?, time: clean(&self.time, "time")?, nn: clean(&self.nn, "nn")? };
        if g.unit.iter().chain(g.time.iter()).any(|v| v.is_infinite()) {
            return Err(Error::InvalidInput("unit and time grids must be finite".into()));
        }
        Ok(g)
    }
}

/// Standard deviation of unweighted TWFE residuals over control cells.
pub fn twfe_residual_sd(panel: &Panel) -> Result<f64> {
    let w = panel.w().map(|v| 1.0 - v);
    let fit = crate::solver::fit_weighted_twfe(panel.y(), &WeightMask::new(w.clone())?)?;
    let (mut ss, mut k) = (0.0, 0.0);
    for i in 0..panel.n_units() {
        for t in 0..panel.n_periods() {
            if w[(i, t)] > 0.0 {
                ss += (panel.y()[(i, t)] - fit.alpha[i] - fit.beta[t]).powi(2);
                k += 1.0;
            }
        }
    }
    let sd = (ss / k).sqrt();
    Ok(if sd > 0.0 { sd } else { 1e-8 })
}

/// Which control cells enter Q(λ).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum QCells {
    /// All cells when N·T ≤ 4000, else a fixed-seed sample of 2000.
    Auto,
    All,
    Sample(usize),
}

/// Estimator settings.
#[derive(Debug, Clone, PartialEq)]
pub struct TropConfig {
    /// Tuning grid; `None` uses [`TuningGrid::default_for`].
    pub grid: Option<TuningGrid>,
    pub q_cells: QCells,
    /// Seed for the Q subsample.
    pub seed: u64,
    pub solver: SolverOptions,
    /// Use the panel's covariates additively when present.
    pub use_covariates: bool,
    pub max_cycles: usize,
    /// Warm-start consecutive fits from the previous solution.
    pub warm_start: bool,
}

impl Default for TropConfig {
    fn default() -> Self {
        Self {
            grid: None,
            q_cells: QCells::Auto,
            seed: 42,
            solver: SolverOptions::default(),
            use_covariates: true,
            max_cycles: 10,
            warm_start: true,
        }
    }
}

/// One evaluated point of the Q surface.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QPoint {
    pub lambda: TuningTriple,
    pub q: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TuneResult {
    pub lambda: TuningTriple,
    pub surface: Vec<QPoint>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CellEffect {
    pub unit: usize,
    pub time: usize,
    pub tau: f64,
}

/// Estimated effects for every treated cell.
#[derive(Debug, Clone, PartialEq)]
pub struct AttResult {
    pub tau_cells: Vec<CellEffect>,
    pub att: f64,
    pub lambda: TuningTriple,
    pub q_surface: Vec<QPoint>,
    pub se: Option<f64>,
    /// False if any per-cell fit hit the iteration cap.
    pub converged: bool,
    /// Count of (cell, unit) pairs dropped for lack of shared control periods.
    pub dropped_units: usize,
}

/// Covariate coefficients plus the remaining two-way factor fit.
#[derive(Debug, Clone, PartialEq)]
pub struct CovariateFit {
    pub beta_x: nalgebra::DVector<f64>,
    pub fit: TwoWayFactorFit,
}

/// Penalty handed to the solver for a given λ_nn.
///
/// The estimator measures fit by the weighted mean of squared residuals, so the summed
/// objective of the solver is penalized by λ_nn · Σ w. This keeps λ_nn comparable across
/// panel sizes and kernel rates.
pub fn solver_penalty(lambda_nn: f64, w: &DMatrix<f64>) -> f64 {
    if lambda_nn.is_infinite() {
        lambda_nn
    } else {
        lambda_nn * w.sum()
    }
}

/// Sequential per-cell fitting with reuse of identical masks and warm starts.
pub(crate) struct CellEngine<'a> {
    panel: &'a Panel,
    x: &'a [DMatrix<f64>],
    opts: SolverOptions,
    warm_start: bool,
    last: Option<(DMatrix<f64>, f64, TwoWayFactorFit)>,
    pub(crate) converged: bool,
    pub(crate) dropped: usize,
}

impl<'a> CellEngine<'a> {
    pub(crate) fn new(panel: &'a Panel, use_covariates: bool, opts: SolverOptions, warm_start: bool) -> Self {
        let x = if use_covariates { panel.x().unwrap_or(&[]) } else { &[] };
        Self { panel, x, opts, warm_start, last: None, converged: true, dropped: 0 }
    }

    /// Fit for `weights` and return the prediction at the target cell.
    pub(crate) fn predict_with(&mut self, weights: &CellWeights, lambda_nn: f64) -> Result<f64> {
        self.dropped += weights.dropped.len();
        let w = weights.loss_weights(self.panel);
        if let Some((lw, ln, fit)) = &self.last {
            if *ln == lambda_nn && *lw == w {
                return Ok(fit.predict(weights.target.0, weights.target.1));
            }
        }
        let warm = if self.warm_start { self.last.as_ref().map(|(_, _, f)| f.l.clone()) } else { None };
        let penalty = solver_penalty(lambda_nn, &w);
        let fit = fit_weighted_lowrank_with(self.panel.y(), &WeightMask::new(w.clone())?, penalty, self.x, &self.opts, warm.as_ref())?;
        self.converged &= fit.converged;
        let pred = fit.predict(weights.target.0, weights.target.1);
        self.last = Some((w, lambda_nn, fit));
        Ok(pred)
    }

    pub(crate) fn tau(&mut self, target: (usize, usize), lambda: &TuningTriple) -> Result<f64> {
        let weights = cell_weights(self.panel, target, lambda)?;
        let pred = self.predict_with(&weights, lambda.lambda_nn)?;
        Ok(self.panel.y()[target] - pred)
    }

    pub(crate) fn last_fit(&self) -> Option<&TwoWayFactorFit> {
        self.last.as_ref().map(|(_, _, f)| f)
    }
}

/// τ̂_it = Y_it − α̂_i − β̂_t − L̂_it, fitted with the target cell's loss weight set to zero.
pub fn estimate_cell(panel: &Panel, target: (usize, usize), lambda: &TuningTriple) -> Result<f64> {
    estimate_cell_with(panel, target, lambda, &SolverOptions::default())
}

pub fn estimate_cell_with(panel: &Panel, target: (usize, usize), lambda: &TuningTriple, opts: &SolverOptions) -> Result<f64> {
    lambda.validate()?;
    CellEngine::new(panel, false, *opts, false).tau(target, lambda)
}

/// [`estimate_cell`] with explicitly supplied kernel weights.
pub fn estimate_cell_with_weights(panel: &Panel, weights: &CellWeights, lambda_nn: f64, opts: &SolverOptions) -> Result<f64> {
    let pred = CellEngine::new(panel, false, *opts, false).predict_with(weights, lambda_nn)?;
    Ok(panel.y()[weights.target] - pred)
}

/// Per-cell effect with the panel's covariates entering additively.
pub fn estimate_cell_with_covariates(panel: &Panel, target: (usize, usize), lambda: &TuningTriple) -> Result<f64> {
    Ok(fit_cell_with_covariates(panel, target, lambda, &SolverOptions::default())?.0)
}

/// Effect and covariate fit for one target cell.
pub fn fit_cell_with_covariates(
    panel: &Panel,
    target: (usize, usize),
    lambda: &TuningTriple,
    opts: &SolverOptions,
) -> Result<(f64, CovariateFit)> {
    lambda.validate()?;
    if panel.x().is_none() {
        return Err(Error::InvalidInput("panel has no covariates".into()));
    }
    let mut engine = CellEngine::new(panel, true, *opts, false);
    let tau = engine.tau(target, lambda)?;
    let fit = engine.last_fit().expect("fit stored").clone();
    Ok((tau, CovariateFit { beta_x: fit.beta_x.clone(), fit }))
}

/// Control cells entering Q under `mode`, ordered by period then unit.
pub fn q_cells(panel: &Panel, mode: QCells, seed: u64) -> Vec<(usize, usize)> {
    let all = panel.control_cells();
    let k = match mode {
        QCells::All => all.len(),
        QCells::Auto => {
            if panel.n_units() * panel.n_periods() <= 4000 {
                all.len()
            } else {
                2000
            }
        }
        QCells::Sample(k) => k,
    };
    let mut cells = if k >= all.len() {
        all
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let idx = rand::seq::index::sample(&mut rng, all.len(), k);
        idx.into_iter().map(|j| all[j]).collect()
    };
    cells.sort_by_key(|&(i, t)| (t, i));
    cells
}

/// Q(λ) = Σ τ̂_it(λ)² over control cells (or the given subsample).
pub fn loocv_q(panel: &Panel, lambda: &TuningTriple, cells: Option<&[(usize, usize)]>) -> Result<f64> {
    let owned;
    let cells = match cells {
        Some(c) => c,
        None => {
            owned = panel.control_cells();
            &owned
        }
    };
    q_value(panel, lambda, cells, &TropConfig::default())
}

fn q_value(panel: &Panel, lambda: &TuningTriple, cells: &[(usize, usize)], config: &TropConfig) -> Result<f64> {
    lambda.validate()?;
    let mut engine = CellEngine::new(panel, config.use_covariates, config.solver, config.warm_start);
    let mut q = 0.0;
    for &c in cells {
        if panel.is_treated(c.0, c.1) {
            return Err(Error::InvalidInput(format!("Q cell {c:?} is treated")));
        }
        let tau = engine.tau(c, lambda)?;
        q += tau * tau;
    }
    Ok(q)
}

type Key = (u64, u64, u64);

fn key(l: &TuningTriple) -> Key {
    (l.lambda_unit.to_bits(), l.lambda_time.to_bits(), l.lambda_nn.to_bits())
}

struct Surface<'a> {
    panel: &'a Panel,
    cells: Vec<(usize, usize)>,
    config: &'a TropConfig,
    cache: HashMap<Key, f64>,
    points: Vec<QPoint>,
}

impl<'a> Surface<'a> {
    /// Evaluate a batch (in parallel), returning Q for each in order.
    fn eval(&mut self, batch: &[TuningTriple]) -> Result<Vec<f64>> {
        let mut todo: Vec<TuningTriple> = Vec::new();
        for l in batch {
            if !self.cache.contains_key(&key(l)) && !todo.iter().any(|t| key(t) == key(l)) {
                todo.push(*l);
            }
        }
        let (panel, cells, config) = (self.panel, &self.cells, self.config);
        let vals: Vec<Result<f64>> = todo.par_iter().map(|l| q_value(panel, l, cells, config)).collect();
        for (l, v) in todo.iter().zip(vals) {
            let v = v?;
            let v = if v.is_finite() { v } else { f64::INFINITY };
            self.cache.insert(key(l), v);
            self.points.push(QPoint { lambda: *l, q: v });
        }
        Ok(batch.iter().map(|l| self.cache[&key(l)]).collect())
    }

    /// Grid values minimizing Q along one coordinate; ties go to the smaller value.
    fn line_search(&mut self, values: &[f64], make: impl Fn(f64) -> TuningTriple) -> Result<f64> {
        let batch: Vec<TuningTriple> = values.iter().map(|v| make(*v)).collect();
        let qs = self.eval(&batch)?;
        let mut best = 0;
        for k in 1..qs.len() {
            if better(qs[k], qs[best]) {
                best = k;
            }
        }
        Ok(values[best])
    }
}

fn better(q: f64, best: f64) -> bool {
    q < best - 1e-12 * best.abs()
}

/// Values of `grid` up to `bound`, with midpoints inserted between neighbours.
fn refine(grid: &[f64], bound: f64) -> Vec<f64> {
    let kept: Vec<f64> = grid.iter().copied().filter(|v| *v <= bound).collect();
    let finite: Vec<f64> = kept.iter().copied().filter(|v| v.is_finite()).collect();
    let mut out = finite.clone();
    for w in finite.windows(2) {
        let mid = if w[0] > 0.0 { (w[0] * w[1]).sqrt() } else { 0.5 * (w[0] + w[1]) };
        out.push(mid);
    }
    if kept.iter().any(|v| v.is_infinite()) {
        out.push(f64::INFINITY);
    }
    out.sort_by(|a, b| a.partial_cmp(b).unwrap());
    out.dedup();
    out
}

/// Cyclic coordinate search for the λ triple minimizing Q.
pub fn tune(panel: &Panel, grid: &TuningGrid, config: &TropConfig) -> Result<TuneResult> {
    let grid = grid.normalized()?;
    let cells = q_cells(panel, config.q_cells, config.seed);
    if cells.is_empty() {
        return Err(Error::InvalidInput("no control cells for cross-validation".into()));
    }
    let mut s = Surface { panel, cells, config, cache: HashMap::new(), points: Vec::new() };
    // stage 1: one-dimensional searches from the simplest model (grids are sorted,
    // so the base point is 0 for the kernel rates and ∞ for λ_nn when available)
    let nn_base = *grid.nn.last().unwrap();
    let (u_base, t_base) = (grid.unit[0], grid.time[0]);
    let tri = |u: f64, t: f64, n: f64| TuningTriple { lambda_unit: u, lambda_time: t, lambda_nn: n };
    let t_star = s.line_search(&grid.time, |v| tri(u_base, v, nn_base))?;
    let u_star = s.line_search(&grid.unit, |v| tri(v, t_base, nn_base))?;
    let nn_star = s.line_search(&grid.nn, |v| tri(u_base, t_base, v))?;

    // stage 2: cycle over refined grids bounded above by the stage-1 optima
    let (gt, gu, gn) = (refine(&grid.time, t_star), refine(&grid.unit, u_star), refine(&grid.nn, nn_star));
    let mut cur = tri(u_star, t_star, nn_star);
    for _ in 0..config.max_cycles {
        let before = cur;
        cur.lambda_time = s.line_search(&gt, |v| tri(cur.lambda_unit, v, cur.lambda_nn))?;
        cur.lambda_unit = s.line_search(&gu, |v| tri(v, cur.lambda_time, cur.lambda_nn))?;
        cur.lambda_nn = s.line_search(&gn, |v| tri(cur.lambda_unit, cur.lambda_time, v))?;
        if key(&cur) == key(&before) {
            break;
        }
    }
    s.eval(&[cur])?;
    // report the best evaluated point; ties broken toward smaller (λ_time, λ_unit, λ_nn)
    let mut best = s.points[0];
    for p in &s.points[1..] {
        if better(p.q, best.q) || (!better(best.q, p.q) && p.lambda.tie_key() < best.lambda.tie_key()) {
            best = *p;
        }
    }
    Ok(TuneResult { lambda: best.lambda, surface: s.points })
}

/// ATT over all treated cells, tuning λ first when not supplied.
pub fn estimate_att(panel: &Panel, lambda: Option<TuningTriple>, config: &TropConfig) -> Result<AttResult> {
    let treated = panel.treated_cells();
    if treated.is_empty() {
        return Err(Error::NoTreatedCells);
    }
    let (lambda, q_surface) = match lambda {
        Some(l) => {
            l.validate()?;
            (l, Vec::new())
        }
        None => {
            let grid = match &config.grid {
                Some(g) => g.clone(),
                None => TuningGrid::default_for(panel)?,
            };
            let r = tune(panel, &grid, config)?;
            (r.lambda, r.surface)
        }
    };
    let mut engine = CellEngine::new(panel, config.use_covariates, config.solver, config.warm_start);
    let mut tau_cells = Vec::with_capacity(treated.len());
    let mut order = treated.clone();
    order.sort_by_key(|&(i, t)| (i, t));
    for (i, t) in order {
        let tau = engine.tau((i, t), &lambda)?;
        tau_cells.push(CellEffect { unit: i, time: t, tau });
    }
    let att = tau_cells.iter().map(|c| c.tau).sum::<f64>() / tau_cells.len() as f64;
    Ok(AttResult {
        tau_cells,
        att,
        lambda,
        q_surface,
        se: None,
        converged: engine.converged,
        dropped_units: engine.dropped,
    })
}
