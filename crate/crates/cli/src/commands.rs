use std::sync::Arc;

use mbrw::branching::{run_series, series_csv, summarize, Caps, Functionals, Prune};
use mbrw::cone::{Direction, PosMatrix};
use mbrw::experiments::{run_experiment, ExperimentConfig, ExperimentKind};
use mbrw::model::ModelSpec;
use mbrw::renewal::{
    cllt_slope_check, estimate_v, estimate_v_point, green_functional, renewal_scan, reversed_bound_check,
    spitzer_bound_check, GreenFn, Indicator, Walker, DEFAULT_V_SCHEDULE,
};
use mbrw::rng::Streams;
use mbrw::spectral::{
    apply_ps, calibrate_boundary, dominant_eigen, ell_alpha, BoundaryData, CalibrationMode, DirectionGrid,
    SpectralData, DEFAULT_TOL,
};
use mbrw::spine::{
    many_to_one_exact, simulate_with_spine, spine_vs_chain, verify_exchangeability, verify_many_to_one,
    verify_spinal_measure, HarmonicEvaluator, PathFn,
};
use mbrw::stats::{ks_two_sample, CheckReport, Verdict};
use mbrw::{Error, Result};
use serde::Serialize;
use serde_json::{json, Value};

use crate::run::{read_input, InputFile, Run};
use crate::{Cli, Command, RenewalTask};

/// What a command found, beyond having run to completion.
pub struct Outcome {
    pub verdict: Verdict,
    pub summary: String,
}

impl Outcome {
    fn done(summary: impl Into<String>) -> Self {
        Outcome { verdict: Verdict::Pass, summary: summary.into() }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct CheckLine {
    pub name: String,
    /// Deterministic checks are hard; the rest are statistical.
    pub hard: bool,
    pub verdict: Verdict,
    pub detail: String,
}

impl CheckLine {
    fn hard(name: impl Into<String>, pass: bool, detail: impl Into<String>) -> Self {
        CheckLine {
            name: name.into(),
            hard: true,
            verdict: if pass { Verdict::Pass } else { Verdict::Fail },
            detail: detail.into(),
        }
    }

    fn stat(r: &CheckReport) -> Self {
        CheckLine {
            name: r.statistic.clone(),
            hard: false,
            verdict: r.verdict,
            detail: format!("{} vs {} (se {:.3e})", r.lhs, r.rhs, r.se),
        }
    }
}

fn combine(verdicts: impl IntoIterator<Item = Verdict>) -> Verdict {
    let mut out = Verdict::Pass;
    for v in verdicts {
        match v {
            Verdict::Fail => return Verdict::Fail,
            Verdict::Inconclusive => out = Verdict::Inconclusive,
            Verdict::Pass => {}
        }
    }
    out
}

struct Inputs {
    spec: ModelSpec,
    boundary: Option<BoundaryData>,
    files: Vec<InputFile>,
    config: Option<String>,
}

fn load(cli: &Cli, need_boundary: bool) -> Result<Inputs> {
    let model = cli.model.as_deref().ok_or_else(|| Error::config("--model", "a model JSON file is required"))?;
    let (text, file) = read_input("model", model)?;
    let spec = ModelSpec::from_json_str(&text)?;
    let mut files = vec![file];
    let boundary = match &cli.boundary {
        Some(path) => {
            let (text, file) = read_input("boundary", path)?;
            files.push(file);
            let bd = BoundaryData::from_json(&serde_json::from_str(&text)?)?;
            if !bd.model_hash.is_empty() && bd.model_hash != spec.hash() {
                return Err(Error::config("--boundary", "boundary data was computed for a different model"));
            }
            Some(bd)
        }
        None if need_boundary => {
            return Err(Error::config("--boundary", "boundary data is required; run `mbrw calibrate` first"));
        }
        None => None,
    };
    let config = match &cli.config {
        Some(path) => {
            let (text, file) = read_input("config", path)?;
            files.push(file);
            Some(text)
        }
        None => None,
    };
    Ok(Inputs { spec, boundary, files, config })
}

fn start(cli: &Cli, name: &str, inputs: &Inputs, threads: usize) -> Result<Run> {
    let mut settings = serde_json::to_value(cli)?;
    if let Value::Object(m) = &mut settings {
        m.remove("threads");
        m.remove("out");
    }
    Run::start(&cli.out, name, settings, inputs.files.clone(), cli.seed.unwrap_or(1), threads)
}

fn start_point(cli: &Cli, d: usize) -> Result<Direction> {
    match &cli.x0 {
        Some(x) if x.len() != d => Err(Error::config("--x0", format!("needs {d} coordinates"))),
        Some(x) => Direction::new(x.clone()),
        None => Ok(Direction::uniform(d)),
    }
}

fn grid(cli: &Cli, d: usize) -> Result<DirectionGrid> {
    DirectionGrid::new(d, cli.grid_size)
}

fn replicas(cli: &Cli, default: usize) -> Result<usize> {
    match cli.replicas {
        Some(0) => Err(Error::config("--replicas", "must be positive")),
        Some(r) => Ok(r),
        None => Ok(default),
    }
}

fn spectral_at(spec: &ModelSpec, bd: Option<&BoundaryData>, s: f64, grid: &DirectionGrid) -> Result<SpectralData> {
    match bd {
        Some(bd) if (bd.alpha - s).abs() <= 1e-12 => Ok(bd.spectral.clone()),
        _ => dominant_eigen(spec, s, grid, DEFAULT_TOL),
    }
}

pub fn dispatch(cli: &Cli, threads: usize) -> Result<Outcome> {
    let seed = cli.seed.unwrap_or(1);
    let streams = Streams::new(seed);
    match &cli.command {
        Command::Calibrate { fix_alpha } => {
            let inputs = load(cli, false)?;
            let mut run = start(cli, "calibrate", &inputs, threads)?;
            let mode = match fix_alpha {
                Some(alpha) => CalibrationMode::FixAlpha { alpha: *alpha },
                None => CalibrationMode::SolveAlpha,
            };
            let g = grid(cli, inputs.spec.d)?;
            let (spec, bd) = calibrate_boundary(&inputs.spec, mode, &g, DEFAULT_TOL)?;
            let conditions = spec.check_conditions(Some(bd.boundary_values()));
            run.write_json("model.json", spec.to_json())?;
            run.write_json("boundary.json", bd.to_json())?;
            run.write_json(
                "calibration.json",
                json!({
                    "alpha": bd.alpha,
                    "scale_lambda": bd.scale_lambda,
                    "offspring_mean": bd.offspring_mean,
                    "sigma2_alpha": bd.sigma2,
                    "M_value": bd.m_value,
                    "M_prime": bd.m_prime_exact,
                    "poisson_residual": bd.poisson_residual,
                    "conditions": conditions,
                }),
            )?;
            run.finish()?;
            Ok(Outcome::done(format!(
                "alpha = {}\nlambda = {}\nE N = {}\nsigma2_alpha = {}",
                bd.alpha, bd.scale_lambda, bd.offspring_mean, bd.sigma2
            )))
        }
        Command::Spectral { s } => {
            let inputs = load(cli, false)?;
            let mut run = start(cli, "spectral", &inputs, threads)?;
            let g = grid(cli, inputs.spec.d)?;
            let s_values = if s.is_empty() { vec![inputs.boundary.as_ref().map_or(1.0, |b| b.alpha)] } else { s.clone() };
            let mut rows = Vec::new();
            let mut csv = String::from("s,node,x1,r,nu,pi\n");
            for &sv in &s_values {
                let data = spectral_at(&inputs.spec, inputs.boundary.as_ref(), sv, &g)?;
                rows.push(json!({
                    "s": sv,
                    "m": data.m_s,
                    "log_m": data.log_m(),
                    "log_m_prime": data.log_m_prime_exact,
                    "residual": data.residual,
                }));
                for i in 0..g.len() {
                    csv.push_str(&format!("{sv},{i},{},{},{},{}\n", g.node(i)[0], data.r[i], data.nu[i], data.pi[i]));
                }
            }
            run.write_json("spectral.json", json!({ "points": rows }))?;
            run.write_text("spectral.csv", &csv)?;
            run.finish()?;
            Ok(Outcome::done(format!("{} eigen-triples written", s_values.len())))
        }
        Command::Simulate { s, b0, prune } => {
            let inputs = load(cli, false)?;
            let mut run = start(cli, "simulate", &inputs, threads)?;
            let spec = &inputs.spec;
            let g = grid(cli, spec.d)?;
            let bd = inputs.boundary.as_ref();
            let s_values = if s.is_empty() { vec![bd.map_or(1.0, |b| b.alpha)] } else { s.clone() };
            let additive = s_values.iter().map(|sv| spectral_at(spec, bd, *sv, &g)).collect::<Result<Vec<_>>>()?;
            let caps = Caps {
                prune: match (prune, bd) {
                    (Some(eps), Some(bd)) => Some(Prune { alpha: bd.alpha, eps: *eps }),
                    (Some(_), None) => return Err(Error::config("--prune", "pruning needs --boundary")),
                    _ => None,
                },
                ..Caps::default()
            };
            let series = run_series(
                spec,
                &start_point(cli, spec.d)?,
                *b0,
                cli.depth.unwrap_or(20),
                Functionals::new(&additive, bd),
                &caps,
                streams,
                replicas(cli, 1000)?,
                threads,
            )?;
            let mut summary = String::from("n,statistic,mean,se,replicas\n");
            for r in summarize(&series, seed) {
                summary.push_str(&format!("{},{},{},{},{}\n", r.n, r.name, r.mean, r.se, r.replicas));
            }
            run.write_text("series.csv", &series_csv(&series))?;
            run.write_text("summary.csv", &summary)?;
            run.finish()?;
            Ok(Outcome::done(format!("{} replicas simulated", series.len())))
        }
        Command::Spine { n } => {
            let inputs = load(cli, true)?;
            let mut run = start(cli, "spine", &inputs, threads)?;
            let (spec, bd) = (&inputs.spec, inputs.boundary.as_ref().unwrap());
            let x = start_point(cli, spec.d)?;
            let ns = if n.is_empty() { vec![5, 20, 50] } else { n.clone() };
            if ns.contains(&0) {
                return Err(Error::config("--n", "generations must be positive"));
            }
            let reps = replicas(cli, 10_000)?;
            let (spine, chain) = spine_vs_chain(spec, bd, &x, 0.0, &ns, reps, streams, threads)?;
            let mut lines = Vec::new();
            for (k, &nk) in ns.iter().enumerate() {
                let ks = ks_two_sample(&spine[k], &chain[k]);
                lines.push(CheckLine {
                    name: format!("spine S_{nk} vs tilted chain"),
                    hard: false,
                    verdict: if reps < mbrw::stats::MIN_REPLICAS {
                        Verdict::Inconclusive
                    } else if ks.p_value > 0.01 {
                        Verdict::Pass
                    } else {
                        Verdict::Fail
                    },
                    detail: format!("KS statistic {:.4}, p = {:.4}", ks.statistic, ks.p_value),
                });
            }
            let battery_n = cli.depth.unwrap_or(4).min(6);
            for r in verify_spinal_measure(spec, bd, &x, 0.0, &HarmonicEvaluator::one(), battery_n, reps, streams.derive("battery"), threads)? {
                lines.push(CheckLine::stat(&r));
            }
            let mut paths = String::new();
            for i in 0..5u64 {
                let mut rng = streams.derive("paths").stream(i);
                let depth = ns.iter().copied().max().unwrap_or(1);
                let p = simulate_with_spine(&x, 0.0, spec, bd, &mbrw::branching::One, depth, Caps::default(), &mut rng, |_, _| Ok(()))?;
                paths.push_str(&p.to_jsonl());
            }
            let verdict = combine(lines.iter().map(|l| l.verdict));
            run.write_json("spine.json", json!({ "verdict": verdict, "checks": lines }))?;
            run.write_text("spine_paths.jsonl", &paths)?;
            run.finish()?;
            Ok(Outcome { verdict, summary: format_lines(&lines) })
        }
        Command::Renewal { task } => renewal(cli, task, streams, threads),
        Command::Verify => verify(cli, streams, threads),
        Command::Experiment { name } => {
            let kind = ExperimentKind::parse(name)?;
            let inputs = load(cli, true)?;
            let mut cfg = ExperimentConfig::defaults(kind);
            if let Some(text) = &inputs.config {
                let mut merged = serde_json::to_value(&cfg)?;
                overlay(&mut merged, serde_json::from_str(text)?);
                cfg = serde_json::from_value(merged).map_err(|e| Error::config("--config", e.to_string()))?;
            }
            if let Some(r) = cli.replicas {
                cfg.replicas = r;
            }
            if let Some(s) = cli.seed {
                cfg.seed = s;
            }
            if let Some(depth) = cli.depth {
                cfg.depths.retain(|n| *n < depth);
                cfg.depths.push(depth);
            }
            if cli.x0.is_some() {
                cfg.x0 = cli.x0.clone();
            }
            let mut run = start(cli, &format!("experiment {}", kind.name()), &inputs, threads)?;
            let report = run_experiment(kind, &inputs.spec, inputs.boundary.as_ref().unwrap(), &cfg, threads)?;
            run.write_json(&format!("experiment_{}.json", kind.name()), report.to_json())?;
            for tier in report.tiers() {
                run.write_text(&format!("{}_{}.csv", kind.name(), tier), &report.csv(&tier))?;
            }
            run.finish()?;
            Ok(Outcome { verdict: report.verdict, summary: report.text() })
        }
    }
}

/// Recursive object merge: keys in `top` replace those in `base`.
fn overlay(base: &mut Value, top: Value) {
    match (base, top) {
        (Value::Object(b), Value::Object(t)) => {
            for (k, v) in t {
                match b.get_mut(&k) {
                    Some(slot) => overlay(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

fn format_lines(lines: &[CheckLine]) -> String {
    lines
        .iter()
        .map(|l| format!("[{:?}] {}: {}", l.verdict, l.name, l.detail))
        .collect::<Vec<_>>()
        .join("\n")
}

fn renewal(cli: &Cli, task: &RenewalTask, streams: Streams, threads: usize) -> Result<Outcome> {
    let inputs = load(cli, true)?;
    let (spec, bd) = (&inputs.spec, inputs.boundary.as_ref().unwrap());
    let w = Walker::new(spec, bd)?;
    let x = start_point(cli, spec.d)?;
    let x = x.coords();
    match task {
        RenewalTask::VTable { y_max, y_step, v_grid } => {
            let mut run = start(cli, "renewal v-table", &inputs, threads)?;
            let g = DirectionGrid::new(spec.d, Some(*v_grid))?;
            let table = estimate_v(&w, &g, *y_max, *y_step, &DEFAULT_V_SCHEDULE, replicas(cli, 20_000)?, &streams, threads, &spec.hash())?;
            run.write_json("v_table.json", table.to_json())?;
            run.finish()?;
            Ok(Outcome::done(format!(
                "V table: {} points, certified error {:.3e}, harmonicity residual {:.3e}, plateau fraction {:.3}",
                table.values.len(),
                table.certified_error,
                table.harmonicity_residual,
                table.plateau_fraction
            )))
        }
        RenewalTask::Scan { y, t_min, t_max, t_step, a, horizon, ladder_horizon, tolerance } => {
            let mut run = start(cli, "renewal scan", &inputs, threads)?;
            let ys = if y.is_empty() { vec![0.0, w.c1()] } else { y.clone() };
            let mut ts = Vec::new();
            let mut t = *t_min;
            while t <= *t_max + 1e-9 {
                ts.push(t);
                t += t_step;
            }
            let reps = replicas(cli, 20_000)?;
            let mut csv = String::new();
            let mut lines = Vec::new();
            let scans = renewal_scan(&w, x, &ys, &ts, *a, reps, (*horizon, *ladder_horizon), *tolerance, &streams, threads)?;
            for (k, scan) in scans.iter().enumerate() {
                let yv = scan.y;
                let body = scan.csv();
                if k == 0 {
                    csv.push_str("y,");
                    csv.push_str(body.lines().next().unwrap_or_default());
                    csv.push('\n');
                }
                for line in body.lines().skip(1) {
                    csv.push_str(&format!("{yv},{line}\n"));
                }
                lines.push(CheckLine::hard(
                    format!("renewal bound y={yv}"),
                    scan.bound_stable,
                    format!("C = {:.4} on the lower half, {:.4} on the full scan", scan.c_half, scan.c_full),
                ));
                if !scan.sandwich_applies {
                    continue;
                }
                lines.push(CheckLine::hard(
                    format!("duality sandwich y={yv}"),
                    scan.sandwich_holds,
                    format!("C = {:.4} on the lower half, {:.4} on the full scan", scan.sandwich_half, scan.sandwich_full),
                ));
            }
            for l in &mut lines {
                l.hard = false;
            }
            let verdict = combine(lines.iter().map(|l| l.verdict));
            run.write_text("renewal.csv", &csv)?;
            run.write_json("renewal.json", json!({ "verdict": verdict, "checks": lines, "scans": scans }))?;
            run.finish()?;
            Ok(Outcome { verdict, summary: format_lines(&lines) })
        }
        RenewalTask::Green { b, f, horizon } => {
            let mut run = start(cli, "renewal green", &inputs, threads)?;
            let f = match f.as_str() {
                "exp" => GreenFn::Exp,
                "inverse-cube" => GreenFn::InverseCube,
                "zero" => GreenFn::Zero,
                other => return Err(Error::config("--f", format!("unknown function {other:?}; expected exp, inverse-cube or zero"))),
            };
            let bs = if b.is_empty() { vec![5.0, 10.0, 20.0, 40.0] } else { b.clone() };
            let points = green_functional(&w, f, x, &bs, *horizon, replicas(cli, 20_000)?, &streams, threads)?;
            let mut csv = String::from("b,value,se,tail_bound\n");
            for p in &points {
                csv.push_str(&format!("{},{},{},{}\n", p.b, p.value, p.se, p.tail_bound));
            }
            let decreasing = points.windows(2).all(|p| p[1].value < p[0].value);
            let lines = vec![CheckLine {
                name: "green functional decreasing".into(),
                hard: false,
                verdict: if decreasing || f == GreenFn::Zero { Verdict::Pass } else { Verdict::Fail },
                detail: format!("{:?}", points.iter().map(|p| p.value).collect::<Vec<_>>()),
            }];
            let verdict = combine(lines.iter().map(|l| l.verdict));
            run.write_text("green.csv", &csv)?;
            run.write_json("green.json", json!({ "verdict": verdict, "checks": lines, "points": points }))?;
            run.finish()?;
            Ok(Outcome { verdict, summary: format_lines(&lines) })
        }
        RenewalTask::Cllt { y, z, n } => {
            let mut run = start(cli, "renewal cllt", &inputs, threads)?;
            let ns = if n.is_empty() { (6..=12).map(|k| 1usize << k).collect() } else { n.clone() };
            let v = estimate_v_point(&w, x, *y, &DEFAULT_V_SCHEDULE, 20_000, &streams.derive("v"), threads)?;
            let report = cllt_slope_check(&w, x, *y, *z, v.value, &ns, replicas(cli, 1_000_000)?, &streams, threads)?;
            let target_err = report.plateau_target * v.certified_error / v.value;
            let lines = vec![
                CheckLine {
                    name: "conditioned local limit slope".into(),
                    hard: false,
                    verdict: if report.slope_within(-1.65, -1.35) { Verdict::Pass } else { Verdict::Fail },
                    detail: format!("slope {:.4} ± {:.4}", report.slope, report.slope_se),
                },
                CheckLine {
                    name: "exit-probability plateau".into(),
                    hard: false,
                    verdict: if report.plateau_within(0.10, 1.0, target_err) { Verdict::Pass } else { Verdict::Fail },
                    detail: format!("{:?} vs {:.4}", report.survival.last(), report.plateau_target),
                },
            ];
            let verdict = combine(lines.iter().map(|l| l.verdict));
            run.write_json("cllt.json", json!({ "verdict": verdict, "checks": lines, "report": report, "v_hat": v }))?;
            run.finish()?;
            Ok(Outcome { verdict, summary: format_lines(&lines) })
        }
        RenewalTask::Reversed => {
            let mut run = start(cli, "renewal reversed", &inputs, threads)?;
            let report = reversed_bound_check(&w, cli.depth.unwrap_or(200), replicas(cli, 10_000)?, streams, threads)?;
            run.write_json("reversed.json", serde_json::to_value(&report)?)?;
            run.finish()?;
            Ok(Outcome::done(format!(
                "max gap {:.4} within bound {:.4} on {} paths",
                report.max_gap, report.bound, report.paths
            )))
        }
        RenewalTask::Spitzer { factor, horizon } => {
            let mut run = start(cli, "renewal spitzer", &inputs, threads)?;
            let ind = |lo: f64, hi: f64| Indicator { lo, hi };
            let batteries = vec![
                vec![(ind(-5.0, 0.0), ind(0.0, 5.0)), (ind(-2.0, 0.0), ind(0.0, 2.0))],
                vec![(ind(-8.0, -3.0), ind(1.0, 4.0)), (ind(-1.0, 0.0), ind(3.0, 8.0))],
                vec![(ind(-10.0, 0.0), ind(0.0, 1.0)), (ind(-4.0, -2.0), ind(2.0, 9.0))],
            ];
            let report = spitzer_bound_check(&w, x, &batteries, *factor, *horizon, replicas(cli, 20_000)?, &streams, threads)?;
            let verdict = if report.pass { Verdict::Pass } else { Verdict::Fail };
            run.write_json("spitzer.json", json!({ "verdict": verdict, "report": report }))?;
            run.finish()?;
            Ok(Outcome { verdict, summary: format!("fitted C = {:.4}, pass = {}", report.c_hat, report.pass) })
        }
    }
}

fn verify(cli: &Cli, streams: Streams, threads: usize) -> Result<Outcome> {
    let inputs = load(cli, true)?;
    let mut run = start(cli, "verify", &inputs, threads)?;
    let (spec, bd) = (&inputs.spec, inputs.boundary.as_ref().unwrap());
    let g = bd.grid();
    let x = start_point(cli, spec.d)?;
    let reps = replicas(cli, 10_000)?;
    let mut lines = Vec::new();

    // Cached eigen-data against the operator.
    let pr = apply_ps(spec, bd.alpha, &bd.spectral.r, g);
    let eigen_residual = pr
        .iter()
        .zip(&bd.spectral.r)
        .map(|(p, r)| (p - bd.spectral.m_s * r).abs())
        .fold(0.0, f64::max);
    lines.push(CheckLine::hard("eigen residual of cached r_alpha", eigen_residual <= 1e-8, format!("{eigen_residual:.3e}")));
    let fresh = dominant_eigen(spec, bd.alpha, g, DEFAULT_TOL)?;
    lines.push(CheckLine::hard("m(alpha) = 1", (fresh.m_s - 1.0).abs() <= 1e-8, format!("{:.3e}", fresh.m_s - 1.0)));
    lines.push(CheckLine::hard("m'(alpha) = 0", fresh.log_m_prime_exact.abs() <= 1e-6, format!("{:.3e}", fresh.log_m_prime_exact)));
    let ell = ell_alpha(spec, &fresh, DEFAULT_TOL)?;
    let ell_gap = ell.ell.iter().zip(&bd.ell).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    lines.push(CheckLine::hard("cached ell_alpha", ell_gap <= 1e-6, format!("{ell_gap:.3e}")));
    lines.push(CheckLine::hard("Poisson residual", ell.poisson_residual <= 1e-8, format!("{:.3e}", ell.poisson_residual)));
    let t2 = spec.transposed().transposed();
    let involution = t2.scaled_atoms().iter().zip(spec.scaled_atoms()).all(|(a, b)| {
        a.entries().iter().zip(b.entries()).all(|(u, v)| (u - v).abs() <= 1e-12)
    });
    lines.push(CheckLine::hard("dual of dual is primal", involution, "atom-level comparison"));

    let w = Walker::new(spec, bd)?;
    let rev = reversed_bound_check(&w, 200, reps.min(10_000), streams.derive("reversed"), threads)?;
    lines.push(CheckLine::hard(
        "reversed-path bound",
        rev.violations == 0,
        format!("max gap {:.4} vs {:.4} over {} paths", rev.max_gap, rev.bound, rev.paths),
    ));

    let f_path: PathFn = &|x: &[f64], s: f64, m: f64| x[0] * (-0.5 * s * s).exp() + if m >= -1.0 { 0.5 } else { 0.0 };
    let (lhs, rhs) = many_to_one_exact(spec, &bd.spectral, x.coords(), 0.0, f_path);
    lines.push(CheckLine::hard("many-to-one n=1 exact", (lhs - rhs).abs() <= 1e-12 * lhs.abs().max(1.0), format!("{lhs} vs {rhs}")));
    for n in [2, 3] {
        let r = verify_many_to_one(spec, &bd.spectral, &x, 0.0, n, "gaussian", f_path, reps, streams.derive("many-to-one"), threads)?;
        lines.push(CheckLine::stat(&r));
    }
    let f_factors = |seq: &[&PosMatrix]| -> f64 { seq.iter().enumerate().map(|(k, g)| (k + 1) as f64 * g.get(0, 1)).sum() };
    for n in [2, 3] {
        let r = verify_exchangeability(spec, &x, n, "weighted-entries", &f_factors, reps, streams.derive("exchangeability"), threads)?;
        lines.push(CheckLine::stat(&r.forward));
        lines.push(CheckLine::stat(&r.reversed));
    }
    for r in verify_spinal_measure(spec, bd, &x, 0.0, &HarmonicEvaluator::one(), 4, reps, streams.derive("spinal"), threads)? {
        lines.push(CheckLine::stat(&r));
    }
    let table = Arc::new(estimate_v(&w, &DirectionGrid::new(spec.d, Some(8))?, 10.0, 1.0, &[32, 64, 128], 2000, &streams.derive("v"), threads, &spec.hash())?);
    lines.push(CheckLine::hard(
        "V table harmonic",
        table.harmonicity_residual <= table.certified_error.max(1e-12),
        format!("residual {:.3e}, certified error {:.3e}", table.harmonicity_residual, table.certified_error),
    ));
    let v_ab = HarmonicEvaluator::v_alpha_beta(table.clone(), 1.0);
    for r in verify_spinal_measure(spec, bd, &x, 0.0, &v_ab, 3, reps, streams.derive("spinal-v"), threads)? {
        lines.push(CheckLine::stat(&r));
    }
    let verdict = combine(lines.iter().map(|l| l.verdict));
    run.write_json("verify.json", json!({ "verdict": verdict, "checks": lines }))?;
    run.finish()?;
    Ok(Outcome { verdict, summary: format_lines(&lines) })
}
