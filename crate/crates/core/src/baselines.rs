//! Comparison estimators: DID/TWFE, SC, DIFP, SDID, and MC.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::panel::{require_block, BlockAssignment, Panel};
use crate::simplex::simplex_ls;
use crate::solver::{fit_weighted_lowrank_with, fit_weighted_twfe, SolverOptions, WeightMask};
use crate::trop::{self, TropConfig, TuningGrid};
use crate::weights::TuningTriple;

/// Which λ axes a restricted TROP variant shuts off.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default, Serialize, Deserialize)]
pub struct Shutdown {
    pub unit: bool,
    pub time: bool,
    pub nn: bool,
}

/// Estimator tag.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Method {
    Trop(Shutdown),
    Did,
    Sc,
    Difp,
    Sdid,
    Mc,
}

impl Method {
    pub const TROP: Method = Method::Trop(Shutdown { unit: false, time: false, nn: false });

    /// The six estimators compared in the benchmark tables.
    pub fn standard() -> Vec<Method> {
        vec![Method::TROP, Method::Sdid, Method::Sc, Method::Did, Method::Mc, Method::Difp]
    }

    pub fn name(&self) -> String {
        match self {
            Method::Trop(s) => {
                let mut out = String::from("trop");
                if s.unit || s.time || s.nn {
                    out.push_str("_no");
                    for (flag, tag) in [(s.unit, "_unit"), (s.time, "_time"), (s.nn, "_nn")] {
                        if flag {
                            out.push_str(tag);
                        }
                    }
                }
                out
            }
            Method::Did => "did".into(),
            Method::Sc => "sc".into(),
            Method::Difp => "difp".into(),
            Method::Sdid => "sdid".into(),
            Method::Mc => "mc".into(),
        }
    }

    /// Restrict a tuning grid to the axes this TROP variant keeps.
    pub fn restrict(&self, grid: &TuningGrid) -> TuningGrid {
        let mut g = grid.clone();
        if let Method::Trop(s) = self {
            if s.unit {
                g.unit = vec![0.0];
            }
            if s.time {
                g.time = vec![0.0];
            }
            if s.nn {
                g.nn = vec![f64::INFINITY];
            }
        }
        if let Method::Mc = self {
            g.unit = vec![0.0];
            g.time = vec![0.0];
        }
        g
    }

    /// True for methods whose fit depends on a λ triple.
    pub fn is_tuned(&self) -> bool {
        matches!(self, Method::Trop(_) | Method::Mc)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase();
        Ok(match s.as_str() {
            "did" | "twfe" => Method::Did,
            "sc" => Method::Sc,
            "difp" => Method::Difp,
            "sdid" => Method::Sdid,
            "mc" => Method::Mc,
            "trop" => Method::TROP,
            other => {
                let rest = other
                    .strip_prefix("trop_no")
                    .ok_or_else(|| Error::InvalidInput(format!("unknown method {other:?}")))?;
                let mut sd = Shutdown::default();
                let mut r = rest;
                while !r.is_empty() {
                    if let Some(x) = r.strip_prefix("_unit") {
                        sd.unit = true;
                        r = x;
                    } else if let Some(x) = r.strip_prefix("_time") {
                        sd.time = true;
                        r = x;
                    } else if let Some(x) = r.strip_prefix("_nn") {
                        sd.nn = true;
                        r = x;
                    } else {
                        return Err(Error::InvalidInput(format!("unknown method {other:?}")));
                    }
                }
                if !(sd.unit || sd.time || sd.nn) {
                    return Err(Error::InvalidInput(format!("unknown method {other:?}")));
                }
                Method::Trop(sd)
            }
        })
    }
}

/// Counterfactual prediction for one treated cell.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CellPrediction {
    pub unit: usize,
    pub time: usize,
    pub yhat0: f64,
    pub tau: f64,
}

/// Per-cell Y(0) predictions and the implied ATT.
#[derive(Debug, Clone, PartialEq)]
pub struct CounterfactualGrid {
    pub method: Method,
    pub cells: Vec<CellPrediction>,
    pub att: f64,
    /// Unit weights over control units, one vector per treated unit (SC/DIFP) or a single vector (SDID).
    pub unit_weights: Vec<(usize, DVector<f64>)>,
    /// Time weights over pre-periods (SDID).
    pub time_weights: Option<DVector<f64>>,
    /// λ used by tuned methods.
    pub lambda: Option<TuningTriple>,
    pub converged: bool,
}

impl CounterfactualGrid {
    fn from_predictions(method: Method, panel: &Panel, preds: Vec<(usize, usize, f64)>) -> Self {
        let cells: Vec<CellPrediction> = preds
            .into_iter()
            .map(|(i, t, yhat0)| CellPrediction { unit: i, time: t, yhat0, tau: panel.y()[(i, t)] - yhat0 })
            .collect();
        let att = cells.iter().map(|c| c.tau).sum::<f64>() / cells.len() as f64;
        Self { method, cells, att, unit_weights: Vec::new(), time_weights: None, lambda: None, converged: true }
    }
}

fn block_cells(b: &BlockAssignment) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for &i in &b.treated_units {
        for &t in &b.post_periods {
            out.push((i, t));
        }
    }
    out
}

/// Y(0) from unweighted TWFE on control cells.
pub fn did(panel: &Panel) -> Result<CounterfactualGrid> {
    let b = require_block(panel)?;
    let w = WeightMask::new(panel.w().map(|v| 1.0 - v))?;
    let fit = fit_weighted_twfe(panel.y(), &w)?;
    let preds = block_cells(&b).into_iter().map(|(i, t)| (i, t, fit.alpha[i] + fit.beta[t])).collect();
    Ok(CounterfactualGrid::from_predictions(Method::Did, panel, preds))
}

fn pre_matrix(panel: &Panel, rows: &[usize], cols: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), cols.len(), |a, b| panel.y()[(rows[a], cols[b])])
}

/// Synthetic control, one simplex weight vector per treated unit; `intercept = true` gives DIFP.
pub fn sc(panel: &Panel, intercept: bool) -> Result<CounterfactualGrid> {
    let b = require_block(panel)?;
    let method = if intercept { Method::Difp } else { Method::Sc };
    // T0 × N0 design: one column per control unit
    let a = pre_matrix(panel, &b.control_units, &b.pre_periods).transpose();
    let col_means = DVector::from_fn(a.ncols(), |j, _| a.column(j).mean());
    let a_fit = if intercept {
        DMatrix::from_fn(a.nrows(), a.ncols(), |r, j| a[(r, j)] - col_means[j])
    } else {
        a.clone()
    };
    let mut preds = Vec::new();
    let mut unit_weights = Vec::new();
    for &i in &b.treated_units {
        let target = DVector::from_fn(b.t0, |r, _| panel.y()[(i, b.pre_periods[r])]);
        let tmean = target.mean();
        let rhs = if intercept { target.map(|v| v - tmean) } else { target.clone() };
        let fit = simplex_ls(&a_fit, &rhs, 0.0);
        let omega = fit.weights;
        let mu = if intercept { tmean - col_means.dot(&omega) } else { 0.0 };
        for (i2, t) in block_cells(&b).into_iter().filter(|c| c.0 == i) {
            let synth: f64 = b.control_units.iter().zip(omega.iter()).map(|(&j, w)| w * panel.y()[(j, t)]).sum();
            preds.push((i2, t, mu + synth));
        }
        unit_weights.push((i, omega));
    }
    let mut g = CounterfactualGrid::from_predictions(method, panel, preds);
    g.unit_weights = unit_weights;
    Ok(g)
}

/// SC prediction with a fixed weight vector over control units.
pub fn sc_with_weights(panel: &Panel, omega: &DVector<f64>, intercept: bool) -> Result<CounterfactualGrid> {
    let b = require_block(panel)?;
    if omega.len() != b.n0 {
        return Err(Error::InvalidInput("weight vector length must equal the control count".into()));
    }
    let mut preds = Vec::new();
    for &i in &b.treated_units {
        let gap: f64 = b
            .pre_periods
            .iter()
            .map(|&s| panel.y()[(i, s)] - b.control_units.iter().zip(omega.iter()).map(|(&j, w)| w * panel.y()[(j, s)]).sum::<f64>())
            .sum::<f64>()
            / b.t0 as f64;
        let mu = if intercept { gap } else { 0.0 };
        for &t in &b.post_periods {
            let synth: f64 = b.control_units.iter().zip(omega.iter()).map(|(&j, w)| w * panel.y()[(j, t)]).sum();
            preds.push((i, t, mu + synth));
        }
    }
    Ok(CounterfactualGrid::from_predictions(if intercept { Method::Difp } else { Method::Sc }, panel, preds))
}

/// Regularization level ζ = (N_tr·T_post)^{1/4}·sd(first differences of control pre-period outcomes).
pub fn sdid_zeta(panel: &Panel, b: &BlockAssignment) -> f64 {
    let mut diffs = Vec::new();
    for &j in &b.control_units {
        for w in b.pre_periods.windows(2) {
            diffs.push(panel.y()[(j, w[1])] - panel.y()[(j, w[0])]);
        }
    }
    let sd = if diffs.len() > 1 {
        let m = diffs.iter().sum::<f64>() / diffs.len() as f64;
        (diffs.iter().map(|d| (d - m).powi(2)).sum::<f64>() / (diffs.len() - 1) as f64).sqrt()
    } else {
        0.0
    };
    ((b.n1() * b.t1()) as f64).powf(0.25) * sd
}

/// Synthetic difference-in-differences.
pub fn sdid(panel: &Panel) -> Result<CounterfactualGrid> {
    let b = require_block(panel)?;
    let y = panel.y();
    let yco = pre_matrix(panel, &b.control_units, &b.pre_periods); // N0 × T0
    // unit weights: demeaned over pre-periods, ridge ζ²·T0
    let tr_pre = DVector::from_fn(b.t0, |r, _| b.treated_units.iter().map(|&i| y[(i, b.pre_periods[r])]).sum::<f64>() / b.n1() as f64);
    let a_u = {
        let a = yco.transpose();
        DMatrix::from_fn(a.nrows(), a.ncols(), |r, j| a[(r, j)] - a.column(j).mean())
    };
    let b_u = tr_pre.map(|v| v - tr_pre.mean());
    let zeta = sdid_zeta(panel, &b);
    let omega = simplex_ls(&a_u, &b_u, zeta * zeta * b.t0 as f64).weights;
    // time weights: demeaned over control units, no ridge
    let co_post = DVector::from_fn(b.n0, |r, _| b.post_periods.iter().map(|&t| y[(b.control_units[r], t)]).sum::<f64>() / b.t1() as f64);
    let a_t = DMatrix::from_fn(b.n0, b.t0, |r, c| yco[(r, c)] - yco.column(c).mean());
    let b_t = co_post.map(|v| v - co_post.mean());
    let theta = simplex_ls(&a_t, &b_t, 0.0).weights;
    let mut g = balancing_predictions(Method::Sdid, panel, &b, &omega, &theta);
    g.unit_weights = vec![(usize::MAX, omega)];
    g.time_weights = Some(theta);
    Ok(g)
}

/// Per-cell Y(0) from the balancing form with zero regression adjustment:
/// Σ_s θ_s Y_is + Σ_j ω_j Y_jt − Σ_j Σ_s ω_j θ_s Y_js.
pub fn balancing_predictions(method: Method, panel: &Panel, b: &BlockAssignment, omega: &DVector<f64>, theta: &DVector<f64>) -> CounterfactualGrid {
    let y = panel.y();
    let mut cross = 0.0;
    for (a, &j) in b.control_units.iter().enumerate() {
        for (c, &s) in b.pre_periods.iter().enumerate() {
            cross += omega[a] * theta[c] * y[(j, s)];
        }
    }
    let preds = block_cells(b)
        .into_iter()
        .map(|(i, t)| {
            let own: f64 = b.pre_periods.iter().zip(theta.iter()).map(|(&s, w)| w * y[(i, s)]).sum();
            let peer: f64 = b.control_units.iter().zip(omega.iter()).map(|(&j, w)| w * y[(j, t)]).sum();
            (i, t, own + peer - cross)
        })
        .collect();
    CounterfactualGrid::from_predictions(method, panel, preds)
}

/// Matrix completion: uniform weights, λ_nn chosen by the TROP criterion along the λ_nn axis.
pub fn mc(panel: &Panel, config: &TropConfig) -> Result<CounterfactualGrid> {
    let grid = match &config.grid {
        Some(g) => Method::Mc.restrict(g),
        None => Method::Mc.restrict(&TuningGrid::default_for(panel)?),
    };
    let tuned = trop::tune(panel, &grid, config)?;
    mc_with_lambda(panel, tuned.lambda.lambda_nn, &config.solver)
}

/// Matrix completion at a fixed λ_nn; any assignment pattern.
pub fn mc_with_lambda(panel: &Panel, lambda_nn: f64, opts: &SolverOptions) -> Result<CounterfactualGrid> {
    let treated = panel.treated_cells();
    if treated.is_empty() {
        return Err(Error::NoTreatedCells);
    }
    let w = WeightMask::new(panel.w().map(|v| 1.0 - v))?;
    let fit = fit_weighted_lowrank_with(panel.y(), &w, crate::trop::solver_penalty(lambda_nn, w.matrix()), &[], opts, None)?;
    let mut order = treated;
    order.sort();
    let preds = order.into_iter().map(|(i, t)| (i, t, fit.predict(i, t))).collect();
    let mut g = CounterfactualGrid::from_predictions(Method::Mc, panel, preds);
    g.lambda = Some(TuningTriple { lambda_unit: 0.0, lambda_time: 0.0, lambda_nn });
    g.converged = fit.converged;
    Ok(g)
}

/// TROP results in counterfactual form.
pub fn trop_grid(panel: &Panel, method: Method, lambda: Option<TuningTriple>, config: &TropConfig) -> Result<CounterfactualGrid> {
    let mut cfg = config.clone();
    if lambda.is_none() {
        let base = match &config.grid {
            Some(g) => g.clone(),
            None => TuningGrid::default_for(panel)?,
        };
        cfg.grid = Some(method.restrict(&base));
    }
    let r = trop::estimate_att(panel, lambda, &cfg)?;
    let preds = r.tau_cells.iter().map(|c| (c.unit, c.time, panel.y()[(c.unit, c.time)] - c.tau)).collect();
    let mut g = CounterfactualGrid::from_predictions(method, panel, preds);
    g.lambda = Some(r.lambda);
    g.converged = r.converged;
    Ok(g)
}

/// Run any method; `lambda` fixes the regularizers of tuned methods.
pub fn run_method(panel: &Panel, method: Method, lambda: Option<TuningTriple>, config: &TropConfig) -> Result<CounterfactualGrid> {
    match method {
        Method::Did => did(panel),
        Method::Sc => sc(panel, false),
        Method::Difp => sc(panel, true),
        Method::Sdid => sdid(panel),
        Method::Mc => match lambda {
            Some(l) => mc_with_lambda(panel, l.lambda_nn, &config.solver),
            None => mc(panel, config),
        },
        Method::Trop(_) => trop_grid(panel, method, lambda, config),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn method_names_round_trip() {
        for name in ["trop", "did", "sc", "difp", "sdid", "mc", "trop_no_unit", "trop_no_time_nn", "trop_no_unit_time_nn"] {
            let m: Method = name.parse().unwrap();
            assert_eq!(m.name(), name);
        }
        assert!("trop_no".parse::<Method>().is_err());
        assert!("ols".parse::<Method>().is_err());
    }

    #[test]
    fn textbook_did() {
        let y = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 7.0]);
        let mut w = DMatrix::zeros(2, 2);
        w[(1, 1)] = 1.0;
        let p = Panel::from_matrices(y, w).unwrap();
        let g = did(&p).unwrap();
        assert!((g.att - ((7.0 - 3.0) - (2.0 - 1.0))).abs() < 1e-12);
    }
}
