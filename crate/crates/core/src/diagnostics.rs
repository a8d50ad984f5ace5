//! Descriptive checks of a panel: stability of unit effects across halves of
//! the sample, the out-of-sample value of one interactive factor, and how
//! concentrated the TROP kernel weights are.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::panel::{require_block, Panel};
use crate::solver::{fit_weighted_twfe, WeightMask};
use crate::weights::{cell_weights, unit_distance, TuningTriple};

/// Two-sided standard normal critical value for `level`.
pub fn normal_critical(level: f64) -> f64 {
    Normal::standard().inverse_cdf(1.0 - level / 2.0)
}

/// Percentage of units whose effect differs between the first and second half of the periods.
///
/// Each half is fit by TWFE on its control cells. Unit effects are centered across units
/// within each half (the halves' levels are not comparable), and unit i is rejected when
/// |α̂ᵢ⁽¹⁾ − α̂ᵢ⁽²⁾| / √(s²ᵢ₁/Tᵢ₁ + s²ᵢ₂/Tᵢ₂) exceeds the normal critical value, with s²ᵢₕ
/// the unit's residual variance in half h.
pub fn split_half_fe_test(panel: &Panel, level: f64) -> Result<f64> {
    let (n, t) = (panel.n_units(), panel.n_periods());
    if t < 6 {
        return Err(Error::TooFewPeriods(format!("split-half test needs T ≥ 6, got {t}")));
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::InvalidInput("level must lie in (0, 1)".into()));
    }
    let half = t / 2;
    let fit_half = |start: usize, len: usize| -> Result<(Vec<f64>, Vec<f64>, Vec<usize>)> {
        let y = panel.y().columns(start, len).into_owned();
        let w = panel.w().columns(start, len).map(|v| 1.0 - v);
        let fit = fit_weighted_twfe(&y, &WeightMask::new(w.clone())?)?;
        let mut var = vec![f64::NAN; n];
        let mut cnt = vec![0usize; n];
        for i in 0..n {
            let mut ss = 0.0;
            for s in 0..len {
                if w[(i, s)] > 0.0 {
                    ss += (y[(i, s)] - fit.alpha[i] - fit.beta[s]).powi(2);
                    cnt[i] += 1;
                }
            }
            if cnt[i] > 1 {
                var[i] = ss / (cnt[i] - 1) as f64;
            }
        }
        let present: Vec<usize> = (0..n).filter(|&i| cnt[i] > 0).collect();
        let mean = present.iter().map(|&i| fit.alpha[i]).sum::<f64>() / present.len().max(1) as f64;
        let alpha = (0..n).map(|i| fit.alpha[i] - mean).collect();
        Ok((alpha, var, cnt))
    };
    let (a1, v1, c1) = fit_half(0, half)?;
    let (a2, v2, c2) = fit_half(half, t - half)?;
    let crit = normal_critical(level);
    let (mut tested, mut rejected) = (0usize, 0usize);
    for i in 0..n {
        if c1[i] < 2 || c2[i] < 2 {
            continue;
        }
        tested += 1;
        let se = (v1[i] / c1[i] as f64 + v2[i] / c2[i] as f64).sqrt();
        let diff = a1[i] - a2[i];
        let reject = if se > 0.0 { (diff / se).abs() > crit } else { diff.abs() > 1e-12 * (1.0 + a1[i].abs()) };
        if reject {
            rejected += 1;
        }
    }
    if tested == 0 {
        return Err(Error::InvalidInput("no unit has control periods in both halves".into()));
    }
    Ok(100.0 * rejected as f64 / tested as f64)
}

/// Holdout RMSE of TWFE and of TWFE plus one factor fitted on the training residuals.
pub fn factor_gain(panel: &Panel, holdout_frac: f64, seed: u64) -> Result<(f64, f64)> {
    let g = factor_gain_detail(panel, holdout_frac, seed)?;
    Ok((g.rmse_twfe, g.rmse_plus_factor))
}

/// Holdout and training errors behind [`factor_gain`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FactorGain {
    pub rmse_twfe: f64,
    pub rmse_plus_factor: f64,
    pub train_rmse_twfe: f64,
    pub train_rmse_plus_factor: f64,
}

pub fn factor_gain_detail(panel: &Panel, holdout_frac: f64, seed: u64) -> Result<FactorGain> {
    if !(holdout_frac > 0.0 && holdout_frac < 1.0) {
        return Err(Error::InvalidInput("holdout fraction must lie in (0, 1)".into()));
    }
    let controls = panel.control_cells();
    let k = ((controls.len() as f64) * holdout_frac).round() as usize;
    if k == 0 || k >= controls.len() {
        return Err(Error::InvalidInput("too few control cells for a holdout".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut hold: Vec<(usize, usize)> = rand::seq::index::sample(&mut rng, controls.len(), k).into_iter().map(|j| controls[j]).collect();
    hold.sort_unstable();
    let (n, t) = (panel.n_units(), panel.n_periods());
    let mut train = panel.w().map(|v| 1.0 - v);
    for &(i, s) in &hold {
        train[(i, s)] = 0.0;
    }
    let y = panel.y();
    let fit = fit_weighted_twfe(y, &WeightMask::new(train.clone())?)?;
    let resid = DMatrix::from_fn(n, t, |i, s| y[(i, s)] - fit.alpha[i] - fit.beta[s]);
    let (u, v) = rank_one_als(&resid, &train);
    let rmse = |cells: &[(usize, usize)], extra: &dyn Fn(usize, usize) -> f64| -> f64 {
        let ss: f64 = cells.iter().map(|&(i, s)| (resid[(i, s)] - extra(i, s)).powi(2)).sum();
        (ss / cells.len() as f64).sqrt()
    };
    let train_cells: Vec<(usize, usize)> = controls.iter().copied().filter(|&(i, s)| train[(i, s)] > 0.0).collect();
    Ok(FactorGain {
        rmse_twfe: rmse(&hold, &|_, _| 0.0),
        rmse_plus_factor: rmse(&hold, &|i, s| u[i] * v[s]),
        train_rmse_twfe: rmse(&train_cells, &|_, _| 0.0),
        train_rmse_plus_factor: rmse(&train_cells, &|i, s| u[i] * v[s]),
    })
}

/// Rank-one least squares on the cells with positive mask, by alternating updates
/// from the leading singular pair of the zero-filled matrix. Returns (0, 0) if that
/// would not lower the training error.
fn rank_one_als(r: &DMatrix<f64>, mask: &DMatrix<f64>) -> (DVector<f64>, DVector<f64>) {
    let (n, t) = r.shape();
    let filled = r.component_mul(&mask.map(|m| if m > 0.0 { 1.0 } else { 0.0 }));
    let dec = crate::linalg::svd(&filled);
    let s = dec.s[0].sqrt();
    let mut u = DVector::from_fn(n, |i, _| dec.u[(i, 0)] * s);
    let mut v = DVector::from_fn(t, |c, _| dec.vt[(0, c)] * s);
    let loss = |u: &DVector<f64>, v: &DVector<f64>| -> f64 {
        let mut acc = 0.0;
        for i in 0..n {
            for c in 0..t {
                if mask[(i, c)] > 0.0 {
                    acc += (r[(i, c)] - u[i] * v[c]).powi(2);
                }
            }
        }
        acc
    };
    let base = loss(&DVector::zeros(n), &DVector::zeros(t));
    let mut prev = loss(&u, &v);
    for _ in 0..500 {
        for i in 0..n {
            let (mut num, mut den) = (0.0, 0.0);
            for c in 0..t {
                if mask[(i, c)] > 0.0 {
                    num += r[(i, c)] * v[c];
                    den += v[c] * v[c];
                }
            }
            u[i] = if den > 0.0 { num / den } else { 0.0 };
        }
        for c in 0..t {
            let (mut num, mut den) = (0.0, 0.0);
            for i in 0..n {
                if mask[(i, c)] > 0.0 {
                    num += r[(i, c)] * u[i];
                    den += u[i] * u[i];
                }
            }
            v[c] = if den > 0.0 { num / den } else { 0.0 };
        }
        let cur = loss(&u, &v);
        if prev - cur <= 1e-12 * prev.max(f64::MIN_POSITIVE) {
            prev = cur;
            break;
        }
        prev = cur;
    }
    if prev > base {
        return (DVector::zeros(n), DVector::zeros(t));
    }
    (u, v)
}

/// Average shares of normalized kernel weight near each treated cell.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct WeightConcentration {
    /// Time-weight mass on the last 5 pre-treatment periods.
    pub time_last5: f64,
    /// Unit-weight mass on the 5 control units closest to the treated unit.
    pub unit_closest5: f64,
    /// Unit-weight mass on the closest half of the control units.
    pub unit_closest_half: f64,
}

pub fn weight_concentration(panel: &Panel, lambda: &TuningTriple) -> Result<WeightConcentration> {
    let b = require_block(panel)?;
    let mut acc = [0.0f64; 3];
    let mut cells = 0usize;
    for &i in &b.treated_units {
        // unit ranking by distance does not depend on the post period
        let t_ref = b.post_periods[0];
        let mut ranked: Vec<(f64, usize)> = b
            .control_units
            .iter()
            .map(|&j| (unit_distance(panel, j, i, t_ref).unwrap_or(f64::INFINITY), j))
            .collect();
        ranked.sort_by(|a, c| a.0.partial_cmp(&c.0).unwrap().then(a.1.cmp(&c.1)));
        let half = b.n0.div_ceil(2);
        for &t in &b.post_periods {
            let cw = cell_weights(panel, (i, t), lambda)?;
            let pre_total: f64 = b.pre_periods.iter().map(|&s| cw.theta[s]).sum();
            let last5: f64 = b.pre_periods.iter().rev().take(5).map(|&s| cw.theta[s]).sum();
            let unit_total: f64 = b.control_units.iter().map(|&j| cw.omega[j]).sum();
            let close5: f64 = ranked.iter().take(5).map(|&(_, j)| cw.omega[j]).sum();
            let close_half: f64 = ranked.iter().take(half).map(|&(_, j)| cw.omega[j]).sum();
            acc[0] += last5 / pre_total;
            acc[1] += if unit_total > 0.0 { close5 / unit_total } else { 0.0 };
            acc[2] += if unit_total > 0.0 { close_half / unit_total } else { 0.0 };
            cells += 1;
        }
    }
    let c = cells as f64;
    Ok(WeightConcentration { time_last5: acc[0] / c, unit_closest5: acc[1] / c, unit_closest_half: acc[2] / c })
}

/// Everything `diagnose` reports for one panel.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DiagnosticReport {
    pub rejection_pct: f64,
    pub rmse_twfe: f64,
    pub rmse_plus_factor: f64,
    pub pct_decrease: f64,
    /// Weight shares in percent; absent when the panel is not a block design.
    pub cum_time_last5: Option<f64>,
    pub cum_unit_closest5: Option<f64>,
    pub cum_unit_closest_half: Option<f64>,
    pub lambda: Option<TuningTriple>,
    pub seed: u64,
}

/// Run all diagnostics; weight shares use `lambda` when given and the panel is a block design.
pub fn diagnose(panel: &Panel, lambda: Option<TuningTriple>, holdout_frac: f64, level: f64, seed: u64) -> Result<DiagnosticReport> {
    let rejection_pct = split_half_fe_test(panel, level)?;
    let (rmse_twfe, rmse_plus_factor) = factor_gain(panel, holdout_frac, seed)?;
    let pct_decrease = if rmse_twfe > 0.0 { 100.0 * (1.0 - rmse_plus_factor / rmse_twfe) } else { 0.0 };
    let shares = match lambda {
        Some(l) if require_block(panel).is_ok() => Some(weight_concentration(panel, &l)?),
        _ => None,
    };
    Ok(DiagnosticReport {
        rejection_pct,
        rmse_twfe,
        rmse_plus_factor,
        pct_decrease,
        cum_time_last5: shares.map(|s| 100.0 * s.time_last5),
        cum_unit_closest5: shares.map(|s| 100.0 * s.unit_closest5),
        cum_unit_closest_half: shares.map(|s| 100.0 * s.unit_closest_half),
        lambda,
        seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn critical_value() {
        assert!((normal_critical(0.05) - 1.959964).abs() < 1e-5);
    }

    #[test]
    fn identical_halves_never_reject() {
        let base: Vec<f64> = vec![0.3, -0.1, 0.7, 0.2];
        let y = DMatrix::from_fn(5, 8, |i, s| i as f64 + base[s % 4] + if i % 2 == 0 { 0.1 } else { -0.1 } * base[(s + i) % 4]);
        let p = Panel::from_matrices(y, DMatrix::zeros(5, 8)).unwrap();
        assert_eq!(split_half_fe_test(&p, 0.05).unwrap(), 0.0);
    }

    #[test]
    fn uniform_time_weights_share() {
        let y = DMatrix::from_fn(12, 35, |i, s| ((i * 31 + s * 17) % 11) as f64 * 0.1);
        let w = DMatrix::from_fn(12, 35, |i, s| if i >= 10 && s >= 30 { 1.0 } else { 0.0 });
        let p = Panel::from_matrices(y, w).unwrap();
        let c = weight_concentration(&p, &TuningTriple::new(0.0, 0.0, f64::INFINITY).unwrap()).unwrap();
        assert!((c.time_last5 - 5.0 / 30.0).abs() < 1e-12);
        let big = weight_concentration(&p, &TuningTriple::new(0.0, 50.0, f64::INFINITY).unwrap()).unwrap();
        assert!(big.time_last5 > 0.999);
    }
}
