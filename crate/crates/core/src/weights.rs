//! Distances and exponential-decay weight kernels for a target cell.

use std::fmt;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::panel::Panel;

/// Regularization triple (λ_unit, λ_time, λ_nn); `lambda_nn = ∞` disables the low-rank term.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TuningTriple {
    pub lambda_unit: f64,
    pub lambda_time: f64,
    pub lambda_nn: f64,
}

impl TuningTriple {
    pub fn new(lambda_unit: f64, lambda_time: f64, lambda_nn: f64) -> Result<Self> {
        let t = Self { lambda_unit, lambda_time, lambda_nn };
        t.validate()?;
        Ok(t)
    }

    /// λ = (0, 0, ∞): unweighted TWFE.
    pub fn did() -> Self {
        Self { lambda_unit: 0.0, lambda_time: 0.0, lambda_nn: f64::INFINITY }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v >= 0.0 && !v.is_nan();
        if !ok(self.lambda_unit) || !ok(self.lambda_time) || !ok(self.lambda_nn) {
            return Err(Error::InvalidInput(format!("lambda components must be nonnegative: {self}")));
        }
        if !self.lambda_unit.is_finite() || !self.lambda_time.is_finite() {
            return Err(Error::InvalidInput("lambda_unit and lambda_time must be finite".into()));
        }
        Ok(())
    }

    /// Parse `unit,time,nn`; `inf` is accepted for any component that may be infinite.
    pub fn parse(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(',').map(str::trim).collect();
        if parts.len() != 3 {
            return Err(Error::InvalidInput(format!("expected unit,time,nn, got {s:?}")));
        }
        let num = |p: &str| -> Result<f64> {
            match p.to_ascii_lowercase().as_str() {
                "inf" | "+inf" | "infinity" => Ok(f64::INFINITY),
                _ => p.parse::<f64>().map_err(|_| Error::InvalidInput(format!("bad lambda value {p:?}"))),
            }
        };
        Self::new(num(parts[0])?, num(parts[1])?, num(parts[2])?)
    }

    /// Lexicographic order used for tie-breaking: λ_time, then λ_unit, then λ_nn.
    pub(crate) fn tie_key(&self) -> (f64, f64, f64) {
        (self.lambda_time, self.lambda_unit, self.lambda_nn)
    }
}

impl fmt::Display for TuningTriple {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {})", self.lambda_unit, self.lambda_time, fmt_lambda(self.lambda_nn))
    }
}

pub(crate) fn fmt_lambda(v: f64) -> String {
    if v.is_infinite() {
        "inf".to_string()
    } else {
        v.to_string()
    }
}

#[derive(Serialize, Deserialize)]
struct TripleJson {
    unit: f64,
    time: f64,
    nn: NnValue,
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum NnValue {
    Num(f64),
    Text(String),
}

impl Serialize for TuningTriple {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let nn = if self.lambda_nn.is_infinite() { NnValue::Text("inf".into()) } else { NnValue::Num(self.lambda_nn) };
        TripleJson { unit: self.lambda_unit, time: self.lambda_time, nn }.serialize(s)
    }
}

impl<'de> Deserialize<'de> for TuningTriple {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let j = TripleJson::deserialize(d)?;
        let nn = match j.nn {
            NnValue::Num(v) => v,
            NnValue::Text(t) if t == "inf" => f64::INFINITY,
            NnValue::Text(t) => return Err(serde::de::Error::custom(format!("bad nn value {t:?}"))),
        };
        Ok(TuningTriple { lambda_unit: j.unit, lambda_time: j.time, lambda_nn: nn })
    }
}

/// Kernel weights for one target cell.
#[derive(Debug, Clone, PartialEq)]
pub struct CellWeights {
    pub target: (usize, usize),
    /// Time weights θ_s, length T.
    pub theta: DVector<f64>,
    /// Unit weights ω_j, length N.
    pub omega: DVector<f64>,
    /// Units given weight 0 because they share no control period with the target unit.
    pub dropped: Vec<usize>,
}

impl CellWeights {
    /// Loss weights ω_j θ_s (1 − W_js), with the target cell zeroed.
    pub fn loss_weights(&self, panel: &Panel) -> DMatrix<f64> {
        let (n, t) = (panel.n_units(), panel.n_periods());
        let w = panel.w();
        let mut m = DMatrix::from_fn(n, t, |j, s| self.omega[j] * self.theta[s] * (1.0 - w[(j, s)]));
        m[self.target] = 0.0;
        m
    }
}

pub fn time_distance(s: usize, t: usize) -> f64 {
    s.abs_diff(t) as f64
}

/// RMS outcome gap between units `j` and `i` over periods where both are untreated, excluding `exclude_t`.
pub fn unit_distance(panel: &Panel, j: usize, i: usize, exclude_t: usize) -> Result<f64> {
    let (y, w) = (panel.y(), panel.w());
    let mut sum = 0.0;
    let mut count = 0usize;
    for u in 0..panel.n_periods() {
        if u == exclude_t || w[(i, u)] != 0.0 || w[(j, u)] != 0.0 {
            continue;
        }
        sum += (y[(i, u)] - y[(j, u)]).powi(2);
        count += 1;
    }
    if count == 0 {
        return Err(Error::NoSharedControlPeriods(j, i));
    }
    Ok((sum / count as f64).sqrt())
}

/// Exponential-decay weights for `target` under `lambda`.
pub fn cell_weights(panel: &Panel, target: (usize, usize), lambda: &TuningTriple) -> Result<CellWeights> {
    let (n, t) = (panel.n_units(), panel.n_periods());
    let (i, tt) = target;
    if i >= n || tt >= t {
        return Err(Error::InvalidInput(format!("target {target:?} outside {n}x{t} panel")));
    }
    let theta = if lambda.lambda_time == 0.0 {
        DVector::from_element(t, 1.0)
    } else {
        DVector::from_fn(t, |s, _| (-lambda.lambda_time * time_distance(s, tt)).exp())
    };
    let mut dropped = Vec::new();
    let omega = if lambda.lambda_unit == 0.0 {
        DVector::from_element(n, 1.0)
    } else {
        DVector::from_fn(n, |j, _| {
            if j == i {
                return 1.0;
            }
            match unit_distance(panel, j, i, tt) {
                Ok(d) => (-lambda.lambda_unit * d).exp(),
                Err(_) => {
                    dropped.push(j);
                    0.0
                }
            }
        })
    };
    Ok(CellWeights { target, theta, omega, dropped })
}

/// Rescale entries on `support` to sum to one; entries off the support become 0.
pub fn normalize_to_simplex(w: &DVector<f64>, support: &[usize]) -> Result<DVector<f64>> {
    let total: f64 = support.iter().map(|&k| w[k]).sum();
    if !(total > 0.0) || !total.is_finite() {
        return Err(Error::AllZeroWeights);
    }
    let mut out = DVector::zeros(w.len());
    for &k in support {
        out[k] = w[k] / total;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn time_distances() {
        assert_eq!(time_distance(3, 3), 0.0);
        assert_eq!(time_distance(0, 9), 9.0);
        assert_eq!(time_distance(2, 7), time_distance(7, 2));
    }

    #[test]
    fn constant_gap_distance() {
        let y = DMatrix::from_row_slice(2, 3, &[1.0, 1.0, 1.0, 3.0, 3.0, 3.0]);
        let p = Panel::from_matrices(y, DMatrix::zeros(2, 3)).unwrap();
        assert_eq!(unit_distance(&p, 1, 0, 2).unwrap(), 2.0);
        assert_eq!(unit_distance(&p, 0, 0, 2).unwrap(), 0.0);
    }

    #[test]
    fn no_shared_periods_drops_unit() {
        let y = DMatrix::from_row_slice(3, 2, &[0.0, 1.0, 2.0, 3.0, 4.0, 5.0]);
        let mut w = DMatrix::zeros(3, 2);
        w[(1, 0)] = 1.0;
        let p = Panel::from_matrices(y, w).unwrap();
        assert!(matches!(unit_distance(&p, 1, 0, 1), Err(Error::NoSharedControlPeriods(1, 0))));
        let cw = cell_weights(&p, (0, 1), &TuningTriple::new(1.0, 0.0, f64::INFINITY).unwrap()).unwrap();
        assert_eq!(cw.dropped, vec![1]);
        assert_eq!(cw.omega[1], 0.0);
        assert_eq!(cw.omega[0], 1.0);
    }

    #[test]
    fn kernel_values() {
        let p = Panel::from_matrices(DMatrix::from_fn(3, 4, |i, t| (i * t) as f64), DMatrix::zeros(3, 4)).unwrap();
        let cw = cell_weights(&p, (1, 2), &TuningTriple::new(0.0, 0.0, 1.0).unwrap()).unwrap();
        assert!(cw.theta.iter().chain(cw.omega.iter()).all(|v| *v == 1.0));
        let cw = cell_weights(&p, (1, 2), &TuningTriple::new(0.0, 2f64.ln(), 1.0).unwrap()).unwrap();
        assert!((cw.theta[1] - 0.5).abs() < 1e-15);
        assert!((cw.theta[3] - 0.5).abs() < 1e-15);
        assert_eq!(cw.theta[2], 1.0);
    }

    #[test]
    fn simplex_normalization() {
        let v = normalize_to_simplex(&DVector::from_vec(vec![2.0, 2.0, 0.0]), &[0, 1]).unwrap();
        assert_eq!(v.as_slice(), &[0.5, 0.5, 0.0]);
        let v = normalize_to_simplex(&DVector::from_vec(vec![1.0, 0.0, 0.0]), &[0, 1, 2]).unwrap();
        assert_eq!(v.as_slice(), &[1.0, 0.0, 0.0]);
        assert!(matches!(normalize_to_simplex(&DVector::from_vec(vec![0.0, 1.0]), &[0]), Err(Error::AllZeroWeights)));
    }

    #[test]
    fn parse_triples() {
        let t = TuningTriple::parse("0,0.1,inf").unwrap();
        assert_eq!(t, TuningTriple::new(0.0, 0.1, f64::INFINITY).unwrap());
        assert!(TuningTriple::parse("0,-1,2").is_err());
        assert!(TuningTriple::parse("0,1").is_err());
        let j = serde_json::to_string(&t).unwrap();
        assert_eq!(j, r#"{"unit":0.0,"time":0.1,"nn":"inf"}"#);
        assert_eq!(serde_json::from_str::<TuningTriple>(&j).unwrap(), t);
    }
}
