use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

use trop_core::baselines::{run_method, Method};
use trop_core::diagnostics::diagnose;
use trop_core::inference::{bootstrap_variance, BootstrapOptions};
use trop_core::panel::{load_panel, Panel};
use trop_core::simlab::{
    ablate, bundled_design, bundled_seed, calibrate_with, run_study, sweep, sweep_csv, Ablation, AssignmentMode,
    CalibrationOptions, DgpSpec, StudyOptions, SweepAxis,
};
use trop_core::theory::theory_battery;
use trop_core::trop::{estimate_att, QCells, TropConfig, TuningGrid};
use trop_core::weights::TuningTriple;
use trop_core::Error;

const DEFAULT_SEED: u64 = 42;

#[derive(Parser)]
#[command(name = "trop", version, about = "Triply robust panel estimation and simulation")]
struct Cli {
    /// Worker threads (default: all cores). Results do not depend on this.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Estimate the ATT on a long-format CSV panel.
    Estimate(EstimateArgs),
    /// Fit a simulation design to a seed panel.
    Calibrate(CalibrateArgs),
    /// Run a placebo Monte Carlo study and write a CSV table.
    Simulate(SimulateArgs),
    /// Panel diagnostics, or the theory identity battery with --theory.
    Diagnose(DiagnoseArgs),
}

#[derive(Args)]
struct Common {
    /// RNG seed (default: $TROP_SEED, else 42).
    #[arg(long)]
    seed: Option<u64>,
    /// Output path; stdout when omitted.
    #[arg(long, short)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct GridArgs {
    /// Comma-separated λ_unit candidates.
    #[arg(long, value_delimiter = ',')]
    grid_unit: Option<Vec<String>>,
    /// Comma-separated λ_time candidates.
    #[arg(long, value_delimiter = ',')]
    grid_time: Option<Vec<String>>,
    /// Comma-separated λ_nn candidates; `inf` allowed.
    #[arg(long, value_delimiter = ',')]
    grid_nn: Option<Vec<String>>,
    /// Number of control cells used in cross-validation (default: all up to 4000 cells).
    #[arg(long)]
    q_sample: Option<usize>,
}

#[derive(Args)]
struct EstimateArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, short)]
    input: PathBuf,
    /// trop, trop_no_unit, ..., did (twfe), sc, difp, sdid, mc.
    #[arg(long, default_value = "trop")]
    method: String,
    /// Fixed regularizers `unit,time,nn`, skipping tuning.
    #[arg(long)]
    lambda: Option<String>,
    /// Bootstrap draws for the standard error.
    #[arg(long)]
    bootstrap: Option<usize>,
    /// Re-tune λ inside every bootstrap draw.
    #[arg(long)]
    retune: bool,
    /// Exit with status 3 when a solver hits its iteration cap.
    #[arg(long)]
    strict: bool,
    #[command(flatten)]
    grid: GridArgs,
}

#[derive(Args)]
struct CalibrateArgs {
    #[command(flatten)]
    common: Common,
    /// Seed panel CSV.
    #[arg(long, short, conflicts_with = "bundled", required_unless_present = "bundled")]
    input: Option<PathBuf>,
    /// Use a bundled seed panel (factor50, factor17).
    #[arg(long)]
    bundled: Option<String>,
    #[arg(long, default_value_t = 4)]
    rank: usize,
    #[arg(long, default_value_t = 10)]
    n_tr: usize,
    #[arg(long, default_value_t = 10)]
    t_post: usize,
    /// logistic, uniform_random, sc_weighted, actual_unit.
    #[arg(long, default_value = "logistic")]
    assignment: String,
}

#[derive(Args)]
struct SimulateArgs {
    #[command(flatten)]
    common: Common,
    /// Design JSON written by `calibrate`.
    #[arg(long, conflicts_with = "bundled", required_unless_present = "bundled")]
    design: Option<PathBuf>,
    /// Use a bundled design (factor50, factor17).
    #[arg(long)]
    bundled: Option<String>,
    /// Comma-separated methods (default: trop,sdid,sc,did,mc,difp).
    #[arg(long, value_delimiter = ',')]
    methods: Option<Vec<String>>,
    #[arg(long, default_value_t = 200)]
    reps: usize,
    /// Remove a design component: no_ar, no_M, no_F, only_noise. Repeatable.
    #[arg(long)]
    ablate: Vec<String>,
    #[arg(long)]
    n_tr: Option<usize>,
    #[arg(long)]
    t_post: Option<usize>,
    #[arg(long)]
    assignment: Option<String>,
    /// Fixed λ for a tuned method, `method=unit,time,nn`. Repeatable.
    #[arg(long)]
    lambda: Vec<String>,
    /// Tune on every replication instead of once on a pilot draw.
    #[arg(long)]
    retune: bool,
    /// Sweep axis: n_control, t_pre, n_treated, t_post.
    #[arg(long, requires = "sweep_values")]
    sweep_axis: Option<String>,
    #[arg(long, value_delimiter = ',', requires = "sweep_axis")]
    sweep_values: Option<Vec<usize>>,
    #[command(flatten)]
    grid: GridArgs,
}

#[derive(Args)]
struct DiagnoseArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, short, required_unless_present = "theory")]
    input: Option<PathBuf>,
    /// Run the theory identity battery instead of panel diagnostics.
    #[arg(long)]
    theory: bool,
    /// Random instances per theory check.
    #[arg(long, default_value_t = 200)]
    instances: usize,
    /// λ for the weight-concentration summary.
    #[arg(long)]
    lambda: Option<String>,
    /// Tune λ for the weight-concentration summary.
    #[arg(long, conflicts_with = "lambda")]
    tune: bool,
    #[arg(long, default_value_t = 0.1)]
    holdout: f64,
    #[arg(long, default_value_t = 0.05)]
    level: f64,
    /// Exit with status 3 if any theory check fails.
    #[arg(long)]
    strict: bool,
}

/// Failure classes mapped to exit codes.
enum Failure {
    Input(String),
    Numerical(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        if e.is_numerical() {
            Failure::Numerical(e.to_string())
        } else {
            Failure::Input(e.to_string())
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Input(e.to_string())
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(k) = cli.jobs {
        if k == 0 {
            eprintln!("error: --jobs must be at least 1");
            return ExitCode::from(2);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(k).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    }
    let res = match cli.command {
        Command::Estimate(a) => cmd_estimate(a),
        Command::Calibrate(a) => cmd_calibrate(a),
        Command::Simulate(a) => cmd_simulate(a),
        Command::Diagnose(a) => cmd_diagnose(a),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Input(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Numerical(m)) => {
            eprintln!("numerical failure: {m}");
            ExitCode::from(3)
        }
    }
}

fn resolve_seed(flag: Option<u64>) -> CliResult<u64> {
    if let Some(s) = flag {
        return Ok(s);
    }
    match std::env::var("TROP_SEED") {
        Ok(v) => v.trim().parse().map_err(|_| Failure::Input(format!("TROP_SEED is not an integer: {v:?}"))),
        Err(_) => Ok(DEFAULT_SEED),
    }
}

/// Write via a temporary file in the target directory, then rename into place.
fn write_output(path: Option<&Path>, content: &str) -> CliResult<()> {
    match path {
        None => {
            let mut out = std::io::stdout().lock();
            out.write_all(content.as_bytes())?;
            out.flush()?;
        }
        Some(p) => {
            let dir = match p.parent() {
                Some(d) if !d.as_os_str().is_empty() => d,
                _ => Path::new("."),
            };
            let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
            tmp.write_all(content.as_bytes())?;
            tmp.as_file().sync_all()?;
            tmp.persist(p).map_err(|e| Failure::Input(e.error.to_string()))?;
        }
    }
    Ok(())
}

fn json_text(v: &Value) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("json values serialize");
    s.push('\n');
    s
}

fn parse_values(raw: &[String], name: &str) -> CliResult<Vec<f64>> {
    raw.iter()
        .map(|v| match v.trim().to_ascii_lowercase().as_str() {
            "inf" | "+inf" | "infinity" => Ok(f64::INFINITY),
            t => t.parse::<f64>().map_err(|_| Failure::Input(format!("bad {name} grid value {v:?}"))),
        })
        .collect()
}

fn build_config(panel: Option<&Panel>, g: &GridArgs, seed: u64, base: TropConfig) -> CliResult<TropConfig> {
    let mut cfg = TropConfig { seed, ..base };
    if let Some(k) = g.q_sample {
        cfg.q_cells = QCells::Sample(k);
    }
    if g.grid_unit.is_some() || g.grid_time.is_some() || g.grid_nn.is_some() {
        let mut grid = match panel {
            Some(p) => TuningGrid::default_for(p)?,
            None => TuningGrid {
                unit: trop_core::trop::DEFAULT_RATE_GRID.to_vec(),
                time: trop_core::trop::DEFAULT_RATE_GRID.to_vec(),
                nn: vec![f64::INFINITY],
            },
        };
        if panel.is_none() && g.grid_nn.is_none() {
            return Err(Failure::Input("--grid-nn is required when overriding the grid of a simulation".into()));
        }
        if let Some(v) = &g.grid_unit {
            grid.unit = parse_values(v, "unit")?;
        }
        if let Some(v) = &g.grid_time {
            grid.time = parse_values(v, "time")?;
        }
        if let Some(v) = &g.grid_nn {
            grid.nn = parse_values(v, "nn")?;
        }
        cfg.grid = Some(grid);
    }
    Ok(cfg)
}

fn parse_method(s: &str) -> CliResult<Method> {
    s.trim().parse::<Method>().map_err(Failure::from)
}

fn cmd_estimate(a: EstimateArgs) -> CliResult<()> {
    let seed = resolve_seed(a.common.seed)?;
    let panel = load_panel(&a.input)?;
    let method = parse_method(&a.method)?;
    let lambda = a.lambda.as_deref().map(TuningTriple::parse).transpose()?;
    let config = build_config(Some(&panel), &a.grid, seed, TropConfig::default())?;

    let mut doc = serde_json::Map::new();
    doc.insert("method".into(), json!(method.name()));
    doc.insert("seed".into(), json!(seed));
    doc.insert("n_units".into(), json!(panel.n_units()));
    doc.insert("n_periods".into(), json!(panel.n_periods()));
    let (att, used_lambda, converged, cells) = match method {
        Method::TROP => {
            let r = estimate_att(&panel, lambda, &config)?;
            doc.insert("dropped_units".into(), json!(r.dropped_units));
            if !r.q_surface.is_empty() {
                let best = r.q_surface.iter().map(|p| p.q).fold(f64::INFINITY, f64::min);
                doc.insert("q_min".into(), json!(best));
                doc.insert("q_evaluations".into(), json!(r.q_surface.len()));
            }
            let cells: Vec<(usize, usize, f64)> = r.tau_cells.iter().map(|c| (c.unit, c.time, c.tau)).collect();
            (r.att, Some(r.lambda), r.converged, cells)
        }
        _ => {
            let g = run_method(&panel, method, lambda, &config)?;
            let cells = g.cells.iter().map(|c| (c.unit, c.time, c.tau)).collect();
            (g.att, g.lambda, g.converged, cells)
        }
    };
    doc.insert("att".into(), json!(att));
    doc.insert("lambda".into(), serde_json::to_value(used_lambda).expect("lambda serializes"));
    doc.insert("converged".into(), json!(converged));
    if !converged {
        eprintln!("warning: a solver reached its iteration cap");
        if a.strict {
            return Err(Failure::Numerical("solver did not converge (strict mode)".into()));
        }
    }
    if let Some(b) = a.bootstrap {
        let opts = BootstrapOptions { retune: a.retune, config: config.clone() };
        let r = bootstrap_variance(&panel, method, b, seed, used_lambda, &opts)?;
        doc.insert("se".into(), json!(r.se()));
        doc.insert("bootstrap".into(), json!({ "B": r.b, "variance": r.variance, "seed": r.seed }));
    }
    let taus: Vec<Value> = cells
        .iter()
        .map(|&(i, t, tau)| json!({ "unit": panel.units()[i], "time": panel.times()[t], "tau": tau }))
        .collect();
    doc.insert("taus".into(), Value::Array(taus));
    write_output(a.common.output.as_deref(), &json_text(&Value::Object(doc)))
}

fn cmd_calibrate(a: CalibrateArgs) -> CliResult<()> {
    let seed = resolve_seed(a.common.seed)?;
    let panel = match (&a.input, &a.bundled) {
        (Some(p), _) => load_panel(p)?,
        (None, Some(name)) => bundled_seed(name)?,
        (None, None) => unreachable!("clap requires one source"),
    };
    let assignment_mode: AssignmentMode = a.assignment.parse()?;
    let opts = CalibrationOptions { rank: a.rank, n_tr: a.n_tr, t_post: a.t_post, assignment_mode };
    let spec = calibrate_with(&panel, &opts)?;
    let mut v: Value = serde_json::from_str(&spec.to_json()).expect("spec json parses");
    v["seed"] = json!(seed);
    v["fingerprint"] = json!(spec.fingerprint());
    write_output(a.common.output.as_deref(), &json_text(&v))
}

fn load_design(a: &SimulateArgs) -> CliResult<DgpSpec> {
    let mut spec = match (&a.design, &a.bundled) {
        (Some(p), _) => DgpSpec::from_json(&std::fs::read_to_string(p)?)?,
        (None, Some(name)) => bundled_design(name)?,
        (None, None) => unreachable!("clap requires one source"),
    };
    if let Some(k) = a.n_tr {
        spec.n_tr = k;
    }
    if let Some(k) = a.t_post {
        spec.t_post = k;
    }
    if let Some(m) = &a.assignment {
        spec.assignment_mode = m.parse()?;
    }
    for name in &a.ablate {
        let which: Ablation = name.parse()?;
        spec = ablate(&spec, which);
    }
    spec.validate()?;
    Ok(spec)
}

fn cmd_simulate(a: SimulateArgs) -> CliResult<()> {
    let seed = resolve_seed(a.common.seed)?;
    let spec = load_design(&a)?;
    let methods = match &a.methods {
        Some(v) => v.iter().map(|s| parse_method(s)).collect::<CliResult<Vec<_>>>()?,
        None => Method::standard(),
    };
    let mut lambdas = Vec::new();
    for entry in &a.lambda {
        let (m, l) = entry
            .split_once('=')
            .ok_or_else(|| Failure::Input(format!("expected method=unit,time,nn, got {entry:?}")))?;
        lambdas.push((parse_method(m)?, TuningTriple::parse(l)?));
    }
    let base = StudyOptions::default();
    let config = build_config(None, &a.grid, seed, base.config)?;
    let opts = StudyOptions { config, lambdas, retune_each_rep: a.retune };
    eprintln!("design {} seed {seed}", spec.fingerprint());
    let csv = match (&a.sweep_axis, &a.sweep_values) {
        (Some(axis), Some(values)) => {
            let axis: SweepAxis = axis.parse()?;
            sweep_csv(&sweep(&spec, axis, values, &methods, a.reps, seed, &opts)?)
        }
        _ => {
            let report = run_study(&spec, &methods, a.reps, seed, &opts)?;
            for (m, l) in &report.lambdas {
                eprintln!("lambda {m} {l}");
            }
            report.to_csv()
        }
    };
    write_output(a.common.output.as_deref(), &csv)
}

fn cmd_diagnose(a: DiagnoseArgs) -> CliResult<()> {
    let seed = resolve_seed(a.common.seed)?;
    if a.theory {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let checks = theory_battery(&mut rng, a.instances)?;
        let passed = checks.iter().filter(|c| c.passed).count();
        let failed = checks.len() - passed;
        let doc = json!({ "checks": checks, "passed": passed, "failed": failed, "seed": seed });
        write_output(a.common.output.as_deref(), &json_text(&doc))?;
        if failed > 0 && a.strict {
            return Err(Failure::Numerical(format!("{failed} theory checks failed")));
        }
        return Ok(());
    }
    let path = a.input.as_ref().expect("clap requires --input without --theory");
    let panel = load_panel(path)?;
    let lambda = match (&a.lambda, a.tune) {
        (Some(l), _) => Some(TuningTriple::parse(l)?),
        (None, true) => Some(estimate_att(&panel, None, &TropConfig { seed, ..Default::default() })?.lambda),
        (None, false) => None,
    };
    let report = diagnose(&panel, lambda, a.holdout, a.level, seed)?;
    let doc = serde_json::to_value(&report).expect("report serializes");
    write_output(a.common.output.as_deref(), &json_text(&doc))
}
