//! Unit-level bootstrap variance for block designs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::baselines::{run_method, Method};
use crate::error::{Error, Result};
use crate::panel::{require_block, Panel};
use crate::trop::TropConfig;
use crate::weights::TuningTriple;

const MAX_RETRIES: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BootstrapResult {
    /// (1/B) Σ_b (τ̂⁽ᵇ⁾ − τ̄)².
    pub variance: f64,
    pub draws: Vec<f64>,
    pub b: usize,
    pub seed: u64,
}

impl BootstrapResult {
    pub fn se(&self) -> f64 {
        self.variance.sqrt()
    }
}

/// Bootstrap settings.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct BootstrapOptions {
    /// Tune λ again inside every draw instead of holding it fixed.
    pub retune: bool,
    pub config: TropConfig,
}

/// Resample control and treated rows with replacement, re-estimate the ATT, and
/// return the mean squared deviation of the draws.
pub fn bootstrap_variance(
    panel: &Panel,
    method: Method,
    b: usize,
    seed: u64,
    lambda: Option<TuningTriple>,
    opts: &BootstrapOptions,
) -> Result<BootstrapResult> {
    let block = require_block(panel)?;
    if block.n0 < 2 {
        return Err(Error::InsufficientControls(format!("bootstrap needs at least 2 control units, got {}", block.n0)));
    }
    if b == 0 {
        return Err(Error::InvalidInput("B must be at least 1".into()));
    }
    if method.is_tuned() && lambda.is_none() && !opts.retune {
        return Err(Error::InvalidInput("a fixed λ is required unless retuning".into()));
    }
    let lambda = if opts.retune { None } else { lambda };
    let cols: Vec<usize> = (0..panel.n_periods()).collect();
    let draws: Vec<Result<f64>> = (0..b)
        .into_par_iter()
        .map(|d| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(d as u64 + 1);
            let mut controls = Vec::new();
            for attempt in 0..=MAX_RETRIES {
                controls = (0..block.n0).map(|_| block.control_units[rng.random_range(0..block.n0)]).collect();
                if controls.iter().any(|&c| c != controls[0]) {
                    break;
                }
                if attempt == MAX_RETRIES {
                    return Err(Error::DegenerateResample(d));
                }
            }
            let treated: Vec<usize> = (0..block.n1()).map(|_| block.treated_units[rng.random_range(0..block.n1())]).collect();
            let rows: Vec<usize> = controls.into_iter().chain(treated).collect();
            let sample = panel.select(&rows, &cols)?;
            Ok(run_method(&sample, method, lambda, &opts.config)?.att)
        })
        .collect();
    let draws = draws.into_iter().collect::<Result<Vec<f64>>>()?;
    let mean = draws.iter().sum::<f64>() / b as f64;
    let variance = draws.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / b as f64;
    Ok(BootstrapResult { variance, draws, b, seed })
}
