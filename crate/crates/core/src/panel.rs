//! Balanced panels, block-assignment detection, and file I/O.

use std::cmp::Ordering;
use std::collections::HashMap;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Balanced N×T panel with a binary treatment matrix and optional covariates.
#[derive(Debug, Clone, PartialEq)]
pub struct Panel {
    y: DMatrix<f64>,
    w: DMatrix<f64>,
    units: Vec<String>,
    times: Vec<String>,
    x: Option<Vec<DMatrix<f64>>>,
}

impl Panel {
    /// Build a panel, validating shapes and treatment values.
    pub fn new(
        y: DMatrix<f64>,
        w: DMatrix<f64>,
        units: Vec<String>,
        times: Vec<String>,
        x: Option<Vec<DMatrix<f64>>>,
    ) -> Result<Self> {
        let (n, t) = y.shape();
        if n < 2 || t < 2 {
            return Err(Error::InvalidInput(format!("panel must be at least 2x2, got {n}x{t}")));
        }
        if w.shape() != (n, t) {
            return Err(Error::InvalidInput("Y and W shapes differ".into()));
        }
        if units.len() != n || times.len() != t {
            return Err(Error::InvalidInput("label counts do not match Y".into()));
        }
        if let Some(v) = w.iter().find(|v| **v != 0.0 && **v != 1.0) {
            return Err(Error::NonBinaryTreatment(v.to_string()));
        }
        if !w.iter().any(|v| *v == 0.0) {
            return Err(Error::InvalidInput("panel has no control cells".into()));
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("outcome contains non-finite values".into()));
        }
        if let Some(xs) = &x {
            for (k, xk) in xs.iter().enumerate() {
                if xk.shape() != (n, t) {
                    return Err(Error::InvalidInput(format!("covariate {k} has wrong shape")));
                }
                if xk.iter().any(|v| !v.is_finite()) {
                    return Err(Error::InvalidInput(format!("covariate {k} has non-finite values")));
                }
            }
        }
        let x = x.filter(|xs| !xs.is_empty());
        Ok(Self { y, w, units, times, x })
    }

    /// Panel with default labels `0..N` and `0..T`.
    pub fn from_matrices(y: DMatrix<f64>, w: DMatrix<f64>) -> Result<Self> {
        let units = (0..y.nrows()).map(|i| i.to_string()).collect();
        let times = (0..y.ncols()).map(|t| t.to_string()).collect();
        Self::new(y, w, units, times, None)
    }

    pub fn y(&self) -> &DMatrix<f64> {
        &self.y
    }

    pub fn w(&self) -> &DMatrix<f64> {
        &self.w
    }

    pub fn units(&self) -> &[String] {
        &self.units
    }

    pub fn times(&self) -> &[String] {
        &self.times
    }

    pub fn x(&self) -> Option<&[DMatrix<f64>]> {
        self.x.as_deref()
    }

    pub fn n_units(&self) -> usize {
        self.y.nrows()
    }

    pub fn n_periods(&self) -> usize {
        self.y.ncols()
    }

    pub fn n_covariates(&self) -> usize {
        self.x.as_ref().map_or(0, |x| x.len())
    }

    pub fn is_treated(&self, i: usize, t: usize) -> bool {
        self.w[(i, t)] == 1.0
    }

    /// Treated cells in row-major order.
    pub fn treated_cells(&self) -> Vec<(usize, usize)> {
        self.cells_where(true)
    }

    /// Control cells in row-major order.
    pub fn control_cells(&self) -> Vec<(usize, usize)> {
        self.cells_where(false)
    }

    fn cells_where(&self, treated: bool) -> Vec<(usize, usize)> {
        let (n, t) = self.y.shape();
        let mut out = Vec::new();
        for i in 0..n {
            for s in 0..t {
                if self.is_treated(i, s) == treated {
                    out.push((i, s));
                }
            }
        }
        out
    }

    /// Same panel with a replaced outcome matrix.
    pub fn with_y(&self, y: DMatrix<f64>) -> Result<Self> {
        Self::new(y, self.w.clone(), self.units.clone(), self.times.clone(), self.x.clone())
    }

    /// Same panel with a replaced treatment matrix.
    pub fn with_w(&self, w: DMatrix<f64>) -> Result<Self> {
        Self::new(self.y.clone(), w, self.units.clone(), self.times.clone(), self.x.clone())
    }

    /// Same panel with covariates attached (or removed).
    pub fn with_x(&self, x: Option<Vec<DMatrix<f64>>>) -> Result<Self> {
        Self::new(self.y.clone(), self.w.clone(), self.units.clone(), self.times.clone(), x)
    }

    /// Sub-panel on the given rows and columns, in the given order.
    pub fn select(&self, rows: &[usize], cols: &[usize]) -> Result<Self> {
        let pick = |m: &DMatrix<f64>| DMatrix::from_fn(rows.len(), cols.len(), |a, b| m[(rows[a], cols[b])]);
        let x = self.x.as_ref().map(|xs| xs.iter().map(pick).collect());
        Self::new(
            pick(&self.y),
            pick(&self.w),
            rows.iter().map(|&i| self.units[i].clone()).collect(),
            cols.iter().map(|&t| self.times[t].clone()).collect(),
            x,
        )
    }
}

/// Treated-block layout: treatment occupies exactly `treated_units × post_periods`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockAssignment {
    pub n0: usize,
    pub t0: usize,
    pub control_units: Vec<usize>,
    pub treated_units: Vec<usize>,
    pub pre_periods: Vec<usize>,
    pub post_periods: Vec<usize>,
}

impl BlockAssignment {
    pub fn n1(&self) -> usize {
        self.treated_units.len()
    }

    pub fn t1(&self) -> usize {
        self.post_periods.len()
    }
}

/// Detect block form: the treated cells must be the full product of the
/// ever-treated rows and the ever-treated columns.
pub fn detect_block(panel: &Panel) -> Option<BlockAssignment> {
    let (n, t) = panel.y.shape();
    let treated_units: Vec<usize> = (0..n).filter(|&i| (0..t).any(|s| panel.is_treated(i, s))).collect();
    let post_periods: Vec<usize> = (0..t).filter(|&s| (0..n).any(|i| panel.is_treated(i, s))).collect();
    if treated_units.is_empty() {
        return None;
    }
    for &i in &treated_units {
        for &s in &post_periods {
            if !panel.is_treated(i, s) {
                return None;
            }
        }
    }
    let control_units: Vec<usize> = (0..n).filter(|i| !treated_units.contains(i)).collect();
    let pre_periods: Vec<usize> = (0..t).filter(|s| !post_periods.contains(s)).collect();
    if control_units.is_empty() || pre_periods.is_empty() {
        return None;
    }
    Some(BlockAssignment {
        n0: control_units.len(),
        t0: pre_periods.len(),
        control_units,
        treated_units,
        pre_periods,
        post_periods,
    })
}

/// Block layout or `NotBlockDesign`.
pub fn require_block(panel: &Panel) -> Result<BlockAssignment> {
    detect_block(panel).ok_or(Error::NotBlockDesign)
}

/// Grand-mean / grand-sd scaling of the outcome.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scale {
    pub mean: f64,
    pub sd: f64,
}

impl Scale {
    pub fn denormalize(&self, y: &DMatrix<f64>) -> DMatrix<f64> {
        y.map(|v| v * self.sd + self.mean)
    }
}

/// Standardize Y to grand mean 0 and (population) sd 1.
pub fn normalize_outcomes(panel: &Panel) -> Result<(Panel, Scale)> {
    let y = panel.y();
    let n = y.len() as f64;
    let mean = y.sum() / n;
    let var = y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let sd = var.sqrt();
    if !(sd.is_finite() && sd > 0.0) || sd <= 1e-300 {
        return Err(Error::DegenerateOutcome);
    }
    let z = y.map(|v| (v - mean) / sd);
    Ok((panel.with_y(z)?, Scale { mean, sd }))
}

fn compare_labels(numeric: bool) -> impl Fn(&String, &String) -> Ordering {
    move |a, b| {
        if numeric {
            let (x, y): (f64, f64) = (a.trim().parse().unwrap(), b.trim().parse().unwrap());
            x.partial_cmp(&y).unwrap_or(Ordering::Equal).then_with(|| a.cmp(b))
        } else {
            a.cmp(b)
        }
    }
}

/// Sort labels numerically if every label parses as a number, else lexicographically.
pub fn sort_labels(labels: &mut [String]) {
    let numeric = labels.iter().all(|l| l.trim().parse::<f64>().map(|v| v.is_finite()).unwrap_or(false));
    labels.sort_by(compare_labels(numeric));
}

/// Load a long-format CSV: `unit,time,outcome,treated[,x1..xp]`.
pub fn load_panel(path: impl AsRef<Path>) -> Result<Panel> {
    let text = std::fs::read_to_string(path.as_ref())?;
    parse_long_csv(&text)
}

/// Parse long-format CSV text.
pub fn parse_long_csv(text: &str) -> Result<Panel> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
    let header = rdr.headers().map_err(|e| Error::Parse(e.to_string()))?.clone();
    let cols: Vec<&str> = header.iter().collect();
    if cols.len() < 4 || cols[..4] != ["unit", "time", "outcome", "treated"] {
        return Err(Error::Parse("header must start with unit,time,outcome,treated".into()));
    }
    let p = cols.len() - 4;
    let mut rows: Vec<(String, String, f64, f64, Vec<f64>)> = Vec::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| Error::Parse(e.to_string()))?;
        if rec.len() != cols.len() {
            return Err(Error::Parse(format!("row {} has {} fields", line + 2, rec.len())));
        }
        let num = |k: usize| -> Result<f64> {
            rec[k].parse::<f64>().map_err(|_| Error::Parse(format!("row {}: bad number {:?}", line + 2, &rec[k])))
        };
        let outcome = num(2)?;
        let treated = num(3)?;
        if treated != 0.0 && treated != 1.0 {
            return Err(Error::NonBinaryTreatment(rec[3].to_string()));
        }
        let xs = (0..p).map(|k| num(4 + k)).collect::<Result<Vec<_>>>()?;
        rows.push((rec[0].to_string(), rec[1].to_string(), outcome, treated, xs));
    }
    let mut units: Vec<String> = rows.iter().map(|r| r.0.clone()).collect();
    let mut times: Vec<String> = rows.iter().map(|r| r.1.clone()).collect();
    sort_labels(&mut units);
    units.dedup();
    sort_labels(&mut times);
    times.dedup();
    let ui: HashMap<&str, usize> = units.iter().enumerate().map(|(k, u)| (u.as_str(), k)).collect();
    let ti: HashMap<&str, usize> = times.iter().enumerate().map(|(k, u)| (u.as_str(), k)).collect();
    let (n, t) = (units.len(), times.len());
    let mut y = DMatrix::from_element(n, t, f64::NAN);
    let mut w = DMatrix::zeros(n, t);
    let mut x = vec![DMatrix::zeros(n, t); p];
    let mut seen = DMatrix::from_element(n, t, false);
    for (u, s, outcome, treated, xs) in &rows {
        let (i, j) = (ui[u.as_str()], ti[s.as_str()]);
        if seen[(i, j)] {
            return Err(Error::UnbalancedPanel(format!("duplicate cell ({u}, {s})")));
        }
        seen[(i, j)] = true;
        y[(i, j)] = *outcome;
        w[(i, j)] = *treated;
        for (k, v) in xs.iter().enumerate() {
            x[k][(i, j)] = *v;
        }
    }
    let missing: Vec<String> = (0..n)
        .flat_map(|i| (0..t).map(move |j| (i, j)))
        .filter(|&(i, j)| !seen[(i, j)])
        .map(|(i, j)| format!("({}, {})", units[i], times[j]))
        .collect();
    if !missing.is_empty() {
        let shown: Vec<&str> = missing.iter().take(20).map(|s| s.as_str()).collect();
        let more = if missing.len() > 20 { format!(" and {} more", missing.len() - 20) } else { String::new() };
        return Err(Error::UnbalancedPanel(format!("missing cells {}{more}", shown.join(", "))));
    }
    Panel::new(y, w, units, times, if p > 0 { Some(x) } else { None })
}

/// Render a panel as long-format CSV text.
pub fn to_long_csv(panel: &Panel) -> String {
    let p = panel.n_covariates();
    let mut out = String::from("unit,time,outcome,treated");
    for k in 1..=p {
        out.push_str(&format!(",x{k}"));
    }
    out.push('\n');
    for i in 0..panel.n_units() {
        for t in 0..panel.n_periods() {
            out.push_str(&format!(
                "{},{},{},{}",
                csv_field(&panel.units[i]),
                csv_field(&panel.times[t]),
                panel.y[(i, t)],
                panel.w[(i, t)] as u8
            ));
            if let Some(xs) = &panel.x {
                for xk in xs {
                    out.push_str(&format!(",{}", xk[(i, t)]));
                }
            }
            out.push('\n');
        }
    }
    out
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Write a panel as long-format CSV.
pub fn save_panel(panel: &Panel, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, to_long_csv(panel))?;
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct PanelJson {
    units: Vec<String>,
    times: Vec<String>,
    #[serde(rename = "Y")]
    y: Vec<Vec<f64>>,
    #[serde(rename = "W")]
    w: Vec<Vec<u8>>,
    #[serde(rename = "X", default, skip_serializing_if = "Option::is_none")]
    x: Option<Vec<Vec<Vec<f64>>>>,
}

pub(crate) fn matrix_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

pub(crate) fn matrix_from_rows(rows: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let n = rows.len();
    let t = rows.first().map_or(0, |r| r.len());
    if rows.iter().any(|r| r.len() != t) {
        return Err(Error::Parse("ragged matrix rows".into()));
    }
    Ok(DMatrix::from_fn(n, t, |i, j| rows[i][j]))
}

impl Panel {
    /// JSON document with keys `units`, `times`, `Y`, `W`, optional `X` (indexed `[i][t][k]`).
    pub fn to_json(&self) -> serde_json::Value {
        let x = self.x.as_ref().map(|xs| {
            (0..self.n_units())
                .map(|i| (0..self.n_periods()).map(|t| xs.iter().map(|xk| xk[(i, t)]).collect()).collect())
                .collect()
        });
        let doc = PanelJson {
            units: self.units.clone(),
            times: self.times.clone(),
            y: matrix_rows(&self.y),
            w: (0..self.n_units()).map(|i| self.w.row(i).iter().map(|v| *v as u8).collect()).collect(),
            x,
        };
        serde_json::to_value(doc).expect("panel serializes")
    }

    pub fn from_json(value: &serde_json::Value) -> Result<Self> {
        let doc: PanelJson = serde_json::from_value(value.clone()).map_err(|e| Error::Parse(e.to_string()))?;
        let y = matrix_from_rows(&doc.y)?;
        let wf: Vec<Vec<f64>> = doc.w.iter().map(|r| r.iter().map(|v| *v as f64).collect()).collect();
        let w = matrix_from_rows(&wf)?;
        let x = match doc.x {
            None => None,
            Some(cube) => {
                let (n, t) = y.shape();
                let p = cube.first().and_then(|r| r.first()).map_or(0, |c| c.len());
                if cube.len() != n || cube.iter().any(|r| r.len() != t || r.iter().any(|c| c.len() != p)) {
                    return Err(Error::Parse("X has wrong shape".into()));
                }
                Some((0..p).map(|k| DMatrix::from_fn(n, t, |i, s| cube[i][s][k])).collect())
            }
        };
        Panel::new(y, w, doc.units, doc.times, x)
    }
}
