//! Acceptance checks, one line per criterion. Runs as a plain binary so the
//! Monte Carlo studies report their numbers instead of a bare ok.

#[path = "../../core/tests/common/mod.rs"]
mod common;

use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use common::*;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use trop_core::baselines::{did, mc_with_lambda, sc, sdid, Method};
use trop_core::inference::{bootstrap_variance, BootstrapOptions};
use trop_core::linalg;
use trop_core::panel::Panel;
use trop_core::simlab::*;
use trop_core::solver::{fit_weighted_lowrank, SolverOptions, WeightMask};
use trop_core::theory::*;
use trop_core::trop::{estimate_att, estimate_cell_with, solver_penalty, TropConfig};
use trop_core::weights::{cell_weights, TuningTriple};

type Check = Result<String, String>;
type Criterion = (&'static str, fn() -> Check);

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(elapsed: Duration, limit: f64) -> Result<(), String> {
    ensure(elapsed.as_secs_f64() < limit, || format!("took {:.1} s, limit {limit} s", elapsed.as_secs_f64()))
}

fn rank_one_representation() -> Check {
    let st = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0f64;
    for _ in 0..500 {
        let y = normal_matrix(&mut rng, 6, 5);
        let lhat = normal_matrix(&mut rng, 6, 5);
        let theta = random_simplex(&mut rng, 4);
        let omega = random_simplex(&mut rng, 5);
        let cf = balancing_counterfactual(&y, &lhat, &theta, &omega).map_err(|e| e.to_string())?;
        let m = rank_one_mask(&theta, &omega, 6, 5).map_err(|e| e.to_string())?;
        worst = worst.max((cf - (y[(5, 4)] + linalg::inner(&(&y - &lhat), &m))).abs());
    }
    ensure(worst <= 1e-10, || format!("max error {worst:e}"))?;
    within(st.elapsed(), 5.0)?;
    Ok(format!("500 instances, max error {worst:.1e}"))
}

fn triple_robustness() -> Check {
    let st = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut formula_gap, mut bound_slack, mut zero_bias) = (0.0f64, f64::INFINITY, 0.0f64);
    for _ in 0..200 {
        let (gt, theta, omega) = random_instance(&mut rng, 2);
        let r = triple_robustness_check(&gt, &theta, &omega).map_err(|e| e.to_string())?;
        formula_gap = formula_gap.max((r.realized - r.formula).abs());
        bound_slack = bound_slack.min(r.bound + 1e-10 - r.realized.abs());
        let mut exact = gt.clone();
        exact.b.fill(0.0);
        let mut ub = gt.clone();
        balance_units(&mut ub, &omega);
        let mut tb = gt.clone();
        balance_periods(&mut tb, &theta);
        for g in [exact, ub, tb] {
            let z = triple_robustness_check(&g, &theta, &omega).map_err(|e| e.to_string())?;
            zero_bias = zero_bias.max(z.realized.abs());
        }
    }
    ensure(formula_gap <= 1e-10, || format!("bias vs formula {formula_gap:e}"))?;
    ensure(bound_slack >= 0.0, || "bound violated".into())?;
    ensure(zero_bias < 1e-10, || format!("zero-bias case reached {zero_bias:e}"))?;
    within(st.elapsed(), 10.0)?;
    Ok(format!("200 instances, formula gap {formula_gap:.1e}, zero-bias max {zero_bias:.1e}"))
}

fn classical_bias_formulas() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let k = rng.random_range(1..4);
        let (gt, _, _) = random_instance(&mut rng, k);
        let (n, t) = (gt.n_units(), gt.n_periods());
        let tau = rng.random_range(-2.0..2.0);
        let mut y = gt.l();
        y[(n - 1, t - 1)] += tau;
        let p = Panel::from_matrices(y, block_w(n, t, 1, 1)).map_err(|e| e.to_string())?;
        let uniform_t = DVector::from_element(t - 1, 1.0 / (t - 1) as f64);
        let uniform_u = DVector::from_element(n - 1, 1.0 / (n - 1) as f64);

        let d = did(&p).map_err(|e| e.to_string())?;
        let f = bias_formulas(&gt, &uniform_t, &uniform_u).map_err(|e| e.to_string())?;
        worst = worst.max((d.att - tau - f.did).abs());
        let s = sc(&p, false).map_err(|e| e.to_string())?;
        let f = bias_formulas(&gt, &uniform_t, &s.unit_weights[0].1).map_err(|e| e.to_string())?;
        worst = worst.max((s.att - tau - f.sc).abs());
        let sd = sdid(&p).map_err(|e| e.to_string())?;
        let theta = sd.time_weights.clone().ok_or("sdid returned no time weights")?;
        let f = bias_formulas(&gt, &theta, &sd.unit_weights[0].1).map_err(|e| e.to_string())?;
        worst = worst.max((sd.att - tau - f.sdid).abs());
    }
    ensure(worst <= 1e-9, || format!("max error {worst:e}"))?;
    Ok(format!("100 instances × did/sc/sdid, max error {worst:.1e}"))
}

fn reduction_ladder() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (mut gap_did, mut gap_mc) = (0.0f64, 0.0f64);
    for _ in 0..20 {
        let (n, t) = (rng.random_range(6..15), rng.random_range(6..12));
        let (n1, t1) = (rng.random_range(1..3), rng.random_range(1..3));
        let p = random_block_panel(&mut rng, n, t, n1, t1);
        let a = estimate_att(&p, Some(TuningTriple::did()), &TropConfig::default()).map_err(|e| e.to_string())?;
        gap_did = gap_did.max((a.att - did(&p).map_err(|e| e.to_string())?.att).abs());
        let nn = rng.random_range(0.001..0.5);
        let l = TuningTriple::new(0.0, 0.0, nn).map_err(|e| e.to_string())?;
        let a = estimate_att(&p, Some(l), &TropConfig::default()).map_err(|e| e.to_string())?;
        let m = mc_with_lambda(&p, nn, &SolverOptions::default()).map_err(|e| e.to_string())?;
        gap_mc = gap_mc.max((a.att - m.att).abs());
    }
    ensure(gap_did <= 1e-6 && gap_mc <= 1e-6, || format!("did gap {gap_did:e}, mc gap {gap_mc:e}"))?;
    Ok(format!("20 panels, did gap {gap_did:.1e}, mc gap {gap_mc:.1e}"))
}

fn solver_oracle() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let (n, t) = (rng.random_range(6..14), rng.random_range(5..12));
        let y = &normal_matrix(&mut rng, n, 2) * normal_matrix(&mut rng, 2, t) + normal_matrix(&mut rng, n, t) * 0.3;
        let lambda = rng.random_range(0.5..3.0);
        let fit = fit_weighted_lowrank(&y, &WeightMask::uniform(n, t), lambda).map_err(|e| e.to_string())?;
        let oracle = full_uniform_objective(&y, lambda);
        worst = worst.max((fit.objective - oracle).abs() / oracle.abs().max(1e-300));
        ensure(fit.monotone, || "objective increased during a fit".into())?;
    }
    ensure(worst <= 1e-6, || format!("max relative gap {worst:e}"))?;
    Ok(format!("20 instances, max relative gap {worst:.1e}, all monotone"))
}

fn loocv_equivalence() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let tight = SolverOptions { tol: 1e-15, step_tol: 1e-14, max_iter: 2_000_000, ..Default::default() };
    let mut worst = 0.0f64;
    for k in 0..50 {
        let y = normal_matrix(&mut rng, 5, 5) + normal_matrix(&mut rng, 5, 1) * normal_matrix(&mut rng, 1, 5);
        let w = DMatrix::from_fn(5, 5, |i, s| if i == 4 && s == 4 { 1.0 } else { 0.0 });
        let p = Panel::from_matrices(y.clone(), w).map_err(|e| e.to_string())?;
        let target = (rng.random_range(0..4), rng.random_range(0..4));
        let nn = if k % 5 == 0 { f64::INFINITY } else { rng.random_range(0.02..0.5) };
        let lambda = TuningTriple::new(rng.random_range(0.0..1.0), rng.random_range(0.0..1.0), nn).map_err(|e| e.to_string())?;
        let tau = estimate_cell_with(&p, target, &lambda, &tight).map_err(|e| e.to_string())?;
        let cw = cell_weights(&p, target, &lambda).map_err(|e| e.to_string())?;
        let zeroed = cw.loss_weights(&p);
        let mut joint = zeroed.clone();
        joint[target] = cw.omega[target.0] * cw.theta[target.1];
        let oracle = joint_tau_oracle(&y, &joint, target, solver_penalty(nn, &zeroed));
        worst = worst.max((tau - oracle).abs());
    }
    ensure(worst <= 1e-8, || format!("max gap {worst:e}"))?;
    Ok(format!("50 instances, max gap {worst:.1e}"))
}

fn dgp_algebra() -> Check {
    let st = Instant::now();
    let spec = bundled_design("factor50").map_err(|e| e.to_string())?;
    let (n, t) = (spec.n_units(), spec.n_periods());
    ensure(&spec.f + &spec.m == spec.l, || "F + M differs from L".into())?;
    let means = (0..n).map(|i| spec.m.row(i).mean().abs()).chain((0..t).map(|s| spec.m.column(s).mean().abs())).fold(0.0, f64::max);
    ensure(means < 1e-10, || format!("M mean {means:e}"))?;
    let min_eig = nalgebra::SymmetricEigen::new(spec.sigma.clone()).eigenvalues.min();
    ensure(min_eig > -1e-12, || format!("Σ eigenvalue {min_eig:e}"))?;
    let draws = 10_000;
    let mut cov = DMatrix::zeros(t, t);
    for r in 0..draws {
        let (_, y0) = generate(&spec, &mut replication_rng(7, r)).map_err(|e| e.to_string())?;
        let e = y0 - &spec.l;
        cov += e.transpose() * &e;
    }
    let cov = cov / (draws * n) as f64;
    let rel = (&cov - &spec.sigma).norm() / spec.sigma.norm();
    ensure(rel < 0.05, || format!("relative covariance error {rel:.3}"))?;
    within(st.elapsed(), 30.0)?;
    Ok(format!("F+M=L exact, M means {means:.1e}, min eig {min_eig:.2e}, cov error {:.2}% over {draws} panels", 100.0 * rel))
}

fn rmse(r: &SimReport, m: &str) -> Result<f64, String> {
    r.score(m).map(|s| s.rmse).ok_or_else(|| format!("no row for {m}"))
}

fn monte_carlo_orderings() -> Check {
    let spec = bundled_design("factor50").map_err(|e| e.to_string())?;
    let opts = StudyOptions::default();
    let r = run_study(&spec, &Method::standard(), 200, 42, &opts).map_err(|e| e.to_string())?;
    let trop = rmse(&r, "trop")?;
    let didv = rmse(&r, "did")?;
    let best_other = ["sdid", "sc", "mc", "difp"].iter().map(|m| rmse(&r, m)).collect::<Result<Vec<_>, _>>()?.into_iter().fold(f64::INFINITY, f64::min);
    let table = r.rows.iter().map(|s| format!("{} {:.3}", s.method, s.rmse)).collect::<Vec<_>>().join(", ");
    ensure(trop <= didv, || format!("trop {trop:.3} > did {didv:.3} [{table}]"))?;
    ensure(trop <= 1.15 * best_other, || format!("trop {trop:.3} > 1.15 × {best_other:.3} [{table}]"))?;

    let plain = ablate(&ablate(&spec, Ablation::NoM), Ablation::NoAr);
    let q = run_study(&plain, &[Method::TROP, Method::Did], 200, 42, &opts).map_err(|e| e.to_string())?;
    let (t2, d2) = (rmse(&q, "trop")?, rmse(&q, "did")?);
    ensure(d2 <= 1.25 * t2, || format!("no-M no-AR: did {d2:.3} > 1.25 × trop {t2:.3}"))?;
    Ok(format!("factor50 [{table}]; no-M no-AR did {d2:.3} vs trop {t2:.3}"))
}

/// Uniformly assigned placebo design: 30 units, 10 periods, 10 treated, 3 post.
fn placebo_design() -> Result<DgpSpec, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let y = DMatrix::from_fn(30, 10, |i, s| 0.05 * i as f64 + 0.1 * s as f64)
        + normal_matrix(&mut rng, 30, 2) * normal_matrix(&mut rng, 2, 10) * 0.5
        + normal_matrix(&mut rng, 30, 10) * 0.5;
    let p = Panel::from_matrices(y, block_w(30, 10, 10, 3)).map_err(|e| e.to_string())?;
    let opts = CalibrationOptions { rank: 2, n_tr: 10, t_post: 3, assignment_mode: AssignmentMode::UniformRandom };
    calibrate_with(&p, &opts).map_err(|e| e.to_string())
}

fn bootstrap_coverage() -> Check {
    let st = Instant::now();
    let spec = placebo_design()?;
    let lambda = Some(TuningTriple::new(0.1, 0.1, f64::INFINITY).map_err(|e| e.to_string())?);
    let opts = BootstrapOptions::default();
    let z = trop_core::diagnostics::normal_critical(0.05);

    let (p0, _) = generate(&spec, &mut replication_rng(11, 0)).map_err(|e| e.to_string())?;
    let a = bootstrap_variance(&p0, Method::TROP, 200, 5, lambda, &opts).map_err(|e| e.to_string())?;
    let b = bootstrap_variance(&p0, Method::TROP, 200, 5, lambda, &opts).map_err(|e| e.to_string())?;
    ensure(a.variance.to_bits() == b.variance.to_bits() && a.draws == b.draws, || "bootstrap not deterministic".into())?;

    let reps = 200;
    let mut covered = 0;
    for r in 0..reps {
        let (p, _) = generate(&spec, &mut replication_rng(11, r + 1)).map_err(|e| e.to_string())?;
        let att = estimate_att(&p, lambda, &TropConfig::default()).map_err(|e| e.to_string())?.att;
        let se = bootstrap_variance(&p, Method::TROP, 200, r as u64, lambda, &opts).map_err(|e| e.to_string())?.se();
        if att.abs() <= z * se {
            covered += 1;
        }
    }
    let pct = 100.0 * covered as f64 / reps as f64;
    ensure((90.0..=99.0).contains(&pct), || format!("coverage {pct:.1}%"))?;
    within(st.elapsed(), 900.0)?;
    Ok(format!("deterministic; coverage {pct:.1}% over {reps} placebo reps at B=200"))
}

fn covariate_decomposition() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let (gt, theta, omega) = random_instance(&mut rng, 2);
        let (n, t) = (gt.n_units(), gt.n_periods());
        let p = rng.random_range(1..4);
        let x: Vec<DMatrix<f64>> = (0..p).map(|_| normal_matrix(&mut rng, n, t)).collect();
        let beta = DVector::from_fn(p, |_, _| rng.random_range(-1.0..1.0));
        let dbeta = DVector::from_fn(p, |_, _| rng.random_range(-0.5..0.5));
        let r = covariate_bias_check(&gt, &x, &beta, &dbeta, &DMatrix::zeros(n, t), &theta, &omega).map_err(|e| e.to_string())?;
        worst = worst.max((r.realized - r.formula).abs());
    }
    ensure(worst <= 1e-9, || format!("max error {worst:e}"))?;
    Ok(format!("100 instances, max error {worst:.1e}"))
}

fn simulate_determinism() -> Check {
    let dir = std::env::temp_dir().join(format!("trop-acceptance-{}", std::process::id()));
    std::fs::create_dir_all(&dir).map_err(|e| e.to_string())?;
    let run = |jobs: &str, name: &str| -> Result<Vec<u8>, String> {
        let out = dir.join(name);
        let status = Command::new(env!("CARGO_BIN_EXE_trop"))
            .args(["--jobs", jobs, "simulate", "--bundled", "factor50", "--reps", "6", "--seed", "3"])
            .args(["--lambda", "trop=0.1,0.2,0.05", "--lambda", "mc=0,0,0.01", "-o"])
            .arg(&out)
            .env_remove("TROP_SEED")
            .status()
            .map_err(|e| e.to_string())?;
        ensure(status.success(), || format!("simulate exited with {status}"))?;
        std::fs::read(&out).map_err(|e| e.to_string())
    };
    let a = run("1", "a.csv")?;
    let b = run("1", "b.csv")?;
    let c = run("2", "c.csv")?;
    let _ = std::fs::remove_dir_all(&dir);
    ensure(a == b, || "two runs differ".into())?;
    ensure(a == c, || "--jobs 1 and --jobs 2 differ".into())?;
    Ok(format!("{} bytes identical across runs and job counts", a.len()))
}

fn main() -> ExitCode {
    let checks: [Criterion; 11] = [
        ("rank-one representation", rank_one_representation),
        ("triple robustness", triple_robustness),
        ("classical bias formulas", classical_bias_formulas),
        ("reduction ladder", reduction_ladder),
        ("solver oracle", solver_oracle),
        ("LOOCV equivalence", loocv_equivalence),
        ("DGP algebra", dgp_algebra),
        ("Monte Carlo orderings", monte_carlo_orderings),
        ("bootstrap", bootstrap_coverage),
        ("covariate decomposition", covariate_decomposition),
        ("simulate determinism", simulate_determinism),
    ];
    let only: Option<usize> = std::env::var("ACCEPTANCE_ONLY").ok().and_then(|v| v.parse().ok());
    let mut failed = 0;
    for (k, (name, f)) in checks.iter().enumerate() {
        let id = k + 1;
        if only.is_some_and(|o| o != id) {
            continue;
        }
        let st = Instant::now();
        let res = f();
        let secs = st.elapsed().as_secs_f64();
        match res {
            Ok(detail) => println!("criterion {id:>2} PASS  {name}: {detail} ({secs:.1} s)"),
            Err(why) => {
                failed += 1;
                println!("criterion {id:>2} FAIL  {name}: {why} ({secs:.1} s)");
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}
