//! Run orchestration: dispatch by problem kind, study harness, summary and
//! manifest.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::Serialize;
use serde_json::{json, Map, Value};

use super::config::{parse_config, set_path, to_toml, Kind, ProblemBlock, RunConfig, StudyKind};
use super::output::{fmt_f64, write_fields, write_fields_json, write_table, FieldFrame, ManifestEntry};
use crate::applications::{sandpile_simulate, sandpile_stationary, SandpileScenario};
use crate::constraints::{evaluate_constraint, BoundField};
use crate::elliptic::{
    dependence_study, equivalence_solve, loglog_slope, solve_degenerate, solve_vi, solve_vi_oracle, DependenceMode,
    EllipticProblem, EllipticSolution,
};
use crate::error::{Error, Result};
use crate::evolution::{
    solve_parabolic_qvi, solve_parabolic_qvi_contraction, solve_parabolic_vi, solve_transport_vi, stability_study,
    stationary_transport, weak_form_residual, EvolutionCertificateKind, ParabolicProblem, ParabolicQviProblem,
    QviStepMode, StabilityMode, TimeSeriesSolution, TransportProblem,
};
use crate::geodesic::weighted_distance;
use crate::grid::{cell_gradient, field_norm, gradient, norm2, Grid, ScalarField};
use crate::qvi::{solve_qvi_contraction, solve_qvi_picard, QviProblem};

/// Environment variable overriding the study worker count.
pub const WORKERS_ENV: &str = "GRADVI_WORKERS";

/// Change between successive viscosities at which the δ → 0 continuation stops.
const DEGENERATE_CHANGE_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExitStatus {
    Success,
    ConfigError,
    SolverFailure,
    CertificateInconsistency,
}

impl ExitStatus {
    pub fn code(self) -> i32 {
        match self {
            Self::Success => 0,
            Self::ConfigError => 2,
            Self::SolverFailure => 3,
            Self::CertificateInconsistency => 4,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Success => "success",
            Self::ConfigError => "config-error",
            Self::SolverFailure => "solver-failure",
            Self::CertificateInconsistency => "certificate-inconsistency",
        }
    }

    pub fn of_error(e: &Error) -> Self {
        match e {
            Error::Config(_) | Error::InvalidParameter(_) | Error::Shape(_) => Self::ConfigError,
            Error::CertificateInconsistency(_) => Self::CertificateInconsistency,
            Error::Numerical(_) | Error::Solver(_) | Error::Io(_) => Self::SolverFailure,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ResultBundle {
    pub dir: PathBuf,
    /// Contents of summary.json without the `timings` entry.
    pub summary: Map<String, Value>,
    pub timings: BTreeMap<String, f64>,
    pub manifest: Vec<ManifestEntry>,
    pub status: ExitStatus,
    /// Final nodal field, when the run produced one.
    pub field: Option<(Grid, ScalarField)>,
}

impl ResultBundle {
    pub fn results(&self) -> &Map<String, Value> {
        self.summary.get("results").and_then(Value::as_object).expect("results map")
    }

    pub fn number(&self, key: &str) -> Option<f64> {
        self.results().get(key).and_then(Value::as_f64)
    }
}

struct Ctx<'a> {
    cfg: &'a RunConfig,
    dir: &'a Path,
    manifest: Vec<ManifestEntry>,
}

impl Ctx<'_> {
    fn fields(&mut self, stem: &str, frames: &[FieldFrame], grid: &Grid) -> Result<()> {
        let formats = &self.cfg.output.formats;
        if formats.iter().any(|f| f == "csv") {
            self.manifest.push(write_fields(frames, grid, &self.dir.join(format!("{stem}.csv")))?);
        }
        if formats.iter().any(|f| f == "json") {
            self.manifest.push(write_fields_json(frames, grid, &self.dir.join(format!("{stem}.json")))?);
        }
        Ok(())
    }

    fn table(&mut self, name: &str, columns: &[&str], rows: Vec<Vec<String>>) -> Result<()> {
        let cols: Vec<String> = columns.iter().map(|s| s.to_string()).collect();
        self.manifest.push(write_table(&self.dir.join(name), &cols, &rows)?);
        Ok(())
    }
}

#[derive(Default)]
struct Outcome {
    results: Map<String, Value>,
    converged: bool,
    flags: Vec<String>,
    field: Option<(Grid, ScalarField)>,
}

impl Outcome {
    fn put(&mut self, key: &str, v: impl Serialize) {
        self.results.insert(key.into(), serde_json::to_value(v).unwrap_or(Value::Null));
    }

    /// Inserts every entry of a serializable struct.
    fn merge(&mut self, v: impl Serialize) {
        if let Ok(Value::Object(m)) = serde_json::to_value(v) {
            self.results.extend(m);
        }
    }
}

/// Runs a validated configuration into `out_dir`. Never panics on solver
/// failure: errors become the exit status and are recorded in the summary.
pub fn run(config: &RunConfig, out_dir: &Path) -> ResultBundle {
    let start = Instant::now();
    let mut ctx = Ctx { cfg: config, dir: out_dir, manifest: Vec::new() };
    let outcome = fs::create_dir_all(out_dir)
        .map_err(Error::from)
        .and_then(|_| write_config(&mut ctx))
        .and_then(|_| dispatch(&mut ctx));
    let mut timings = BTreeMap::new();
    timings.insert("total_s".to_string(), start.elapsed().as_secs_f64());
    finish(ctx, config.problem.kind, config.solver.seed, outcome, timings)
}

fn write_config(ctx: &mut Ctx) -> Result<()> {
    let text = to_toml(ctx.cfg)?;
    fs::write(ctx.dir.join("config.toml"), text)?;
    ctx.manifest.push(ManifestEntry { path: "config.toml".into(), rows: 0, columns: Vec::new() });
    Ok(())
}

fn finish(ctx: Ctx, kind: Kind, seed: u64, outcome: Result<Outcome>, timings: BTreeMap<String, f64>) -> ResultBundle {
    let dir = ctx.dir.to_path_buf();
    let mut manifest = ctx.manifest;
    let mut summary = Map::new();
    let (status, field) = match outcome {
        Ok(o) => {
            let status = if o.converged { ExitStatus::Success } else { ExitStatus::SolverFailure };
            summary.insert("converged".into(), json!(o.converged));
            summary.insert("flags".into(), json!(o.flags));
            summary.insert("results".into(), Value::Object(o.results));
            summary.insert("error".into(), Value::Null);
            (status, o.field)
        }
        Err(e) => {
            summary.insert("converged".into(), json!(false));
            summary.insert("flags".into(), json!(["partial-outputs"]));
            summary.insert("results".into(), Value::Object(Map::new()));
            summary.insert("error".into(), json!(e.to_string()));
            (ExitStatus::of_error(&e), None)
        }
    };
    summary.insert("kind".into(), json!(kind.name()));
    summary.insert("seed".into(), json!(seed));
    summary.insert("status".into(), json!(status.name()));
    summary.insert("exit_code".into(), json!(status.code()));
    summary.insert("partial".into(), json!(status != ExitStatus::Success));
    manifest.push(ManifestEntry { path: "summary.json".into(), rows: 0, columns: Vec::new() });
    summary.insert("manifest".into(), serde_json::to_value(&manifest).unwrap_or(Value::Null));
    let mut on_disk = summary.clone();
    on_disk.insert("timings".into(), json!(timings));
    let text = serde_json::to_string_pretty(&Value::Object(on_disk)).unwrap_or_default() + "\n";
    if let Err(e) = fs::write(dir.join("summary.json"), text) {
        log::error!("cannot write summary in {}: {e}", dir.display());
    }
    ResultBundle { dir, summary, timings, manifest, status, field }
}

fn cfg_err(msg: impl Into<String>) -> Error {
    Error::Config(vec![msg.into()])
}

fn need<'a, T>(v: &'a Option<T>, name: &str) -> Result<&'a T> {
    v.as_ref().ok_or_else(|| cfg_err(format!("missing field `problem.{name}`")))
}

fn cadence(n_levels: usize, every: usize) -> Vec<usize> {
    (0..n_levels).filter(|n| n % every == 0 || *n + 1 == n_levels).collect()
}

struct Built {
    grid: Grid,
    p: f64,
    delta: f64,
}

fn basics(pb: &ProblemBlock) -> Result<Built> {
    let grid = need(&pb.grid, "grid")?.build()?;
    Ok(Built { grid, p: pb.p.unwrap_or(2.0), delta: pb.delta.unwrap_or(0.0) })
}

fn initial(pb: &ProblemBlock, grid: &Grid) -> Result<ScalarField> {
    let mut u0 = match &pb.u0 {
        Some(s) => s.nodes(grid, 0.0, "u0")?,
        None => ScalarField::zeros(grid),
    };
    u0.clamp_boundary(grid);
    Ok(u0)
}

fn horizon_tau(pb: &ProblemBlock) -> Result<(f64, f64)> {
    Ok((*need(&pb.horizon, "horizon")?, *need(&pb.tau, "tau")?))
}

fn drift(pb: &ProblemBlock, grid: &Grid) -> Result<Option<Vec<[f64; 2]>>> {
    let Some(bx) = &pb.bx else { return Ok(None) };
    let bx = bx.nodes(grid, 0.0, "bx")?;
    let by = match &pb.by {
        Some(s) => s.nodes(grid, 0.0, "by")?,
        None => ScalarField::zeros(grid),
    };
    Ok(Some(bx.0.iter().zip(&by.0).map(|(a, b)| [*a, *b]).collect()))
}

fn elliptic_problem(pb: &ProblemBlock) -> Result<EllipticProblem> {
    let b = basics(pb)?;
    let f = need(&pb.f, "f")?.nodes(&b.grid, 0.0, "f")?;
    let g = need(&pb.g, "g")?.bound(&b.grid, 0.0, "g")?;
    EllipticProblem::new(b.grid, b.p, b.delta, f, g)
}

fn parabolic_problem(pb: &ProblemBlock) -> Result<ParabolicProblem> {
    let b = basics(pb)?;
    let (horizon, tau) = horizon_tau(pb)?;
    Ok(ParabolicProblem {
        f: need(&pb.f, "f")?.nodes_in_time(&b.grid, horizon, tau, "f")?,
        g: need(&pb.g, "g")?.bound_in_time(&b.grid, horizon, tau, "g")?,
        u0: initial(pb, &b.grid)?,
        grid: b.grid,
        p: b.p,
        delta: b.delta,
        horizon,
        tau,
    })
}

fn dispatch(ctx: &mut Ctx) -> Result<Outcome> {
    let cfg = ctx.cfg;
    match cfg.problem.kind {
        Kind::Elliptic => run_elliptic(ctx),
        Kind::Qvi => run_qvi(ctx),
        Kind::Parabolic => run_parabolic(ctx),
        Kind::Transport => run_transport(ctx),
        Kind::QviEvolution => run_qvi_evolution(ctx),
        Kind::Sandpile => run_sandpile(ctx),
        Kind::Verify => run_verify(ctx),
        Kind::Study => run_study(ctx),
    }
}

/// Fraction of cells with |∇_h u| ≥ (1 − 1e-3)·g.
pub fn plastic_cell_fraction(grid: &Grid, u: &ScalarField, g: &BoundField) -> f64 {
    let nc = grid.cell_count();
    let hits = (0..nc).filter(|&c| norm2(cell_gradient(grid, &u.0, c)) >= (1.0 - 1e-3) * g.values[c]).count();
    hits as f64 / nc as f64
}

fn field_summary(o: &mut Outcome, grid: &Grid, p: f64, u: &ScalarField) -> Result<()> {
    o.put("u_max", u.0.iter().cloned().fold(f64::NEG_INFINITY, f64::max));
    o.put("u_min", u.0.iter().cloned().fold(f64::INFINITY, f64::min));
    o.put("u_l2", field_norm(u, 2.0, grid)?);
    o.put("grad_lp", field_norm(&gradient(u, grid)?, p, grid)?);
    Ok(())
}

fn elliptic_outcome(o: &mut Outcome, problem: &EllipticProblem, sol: &EllipticSolution) -> Result<()> {
    o.converged = sol.converged && sol.diagnostics.feasible;
    o.flags.extend(sol.flags.iter().cloned());
    o.put("method", &sol.method);
    o.put("iterations", sol.iterations);
    o.put("eps", sol.eps);
    o.merge(&sol.diagnostics);
    o.put("objective", problem.objective(&sol.u.0));
    o.put("plastic_cell_fraction", plastic_cell_fraction(&problem.grid, &sol.u, &problem.g));
    field_summary(o, &problem.grid, problem.p, &sol.u)
}

fn run_elliptic(ctx: &mut Ctx) -> Result<Outcome> {
    let solver = &ctx.cfg.solver;
    let problem = elliptic_problem(&ctx.cfg.problem)?;
    let params = solver.penalty()?;
    let tol = solver.tolerances();
    let default = if problem.delta == 0.0 { "degenerate" } else { "penalty" };
    let mut o = Outcome::default();
    let sol = match solver.method.as_deref().unwrap_or(default) {
        "penalty" => solve_vi(&problem, &params, &tol)?,
        "oracle" => solve_vi_oracle(&problem, &tol)?,
        "degenerate" => {
            let (sol, trace) = solve_degenerate(&problem, &solver.deltas, &params, &tol, DEGENERATE_CHANGE_TOL)?;
            o.put("viscosity_trace", trace);
            sol
        }
        other => return Err(cfg_err(format!("unknown elliptic method `{other}` (penalty | oracle | degenerate)"))),
    };
    elliptic_outcome(&mut o, &problem, &sol)?;
    let frame = FieldFrame { t: None, u: sol.u.clone(), lambda: Some(sol.lambda.clone()), g: Some(problem.g.values.clone()), d: None };
    ctx.fields("fields", &[frame], &problem.grid)?;
    o.field = Some((problem.grid.clone(), sol.u));
    Ok(o)
}

fn run_qvi(ctx: &mut Ctx) -> Result<Outcome> {
    let (pb, solver) = (&ctx.cfg.problem, &ctx.cfg.solver);
    let b = basics(pb)?;
    let problem = QviProblem {
        f: need(&pb.f, "f")?.nodes(&b.grid, 0.0, "f")?,
        op: need(&pb.op, "op")?.build(&b.grid, b.p)?,
        grid: b.grid,
        p: b.p,
        delta: b.delta,
    };
    let params = solver.penalty()?;
    let mut tol = solver.tolerances();
    tol.vi_samples = solver.certificate_samples;
    let mut o = Outcome::default();
    let (sol, trace) = match solver.method.as_deref().unwrap_or("picard") {
        "picard" => solve_qvi_picard(&problem, &params, &tol, solver.outer_tol, solver.max_iter)?,
        "contraction" => {
            let (s, t, c) = solve_qvi_contraction(&problem, &params, &tol, solver.outer_tol, solver.max_iter, solver.allow_uncertified)?;
            o.put("certificate", c);
            (s, t)
        }
        other => return Err(cfg_err(format!("unknown qvi method `{other}` (picard | contraction)"))),
    };
    o.converged = trace.converged;
    o.flags.extend(trace.flags.iter().cloned());
    o.put("method", &sol.method);
    o.put("outer_iterations", trace.steps.len());
    o.put("self_consistency", trace.self_consistency);
    o.put("self_consistency_sup", trace.self_consistency_sup);
    o.put("violation", trace.violation);
    o.put("max_q", trace.max_q);
    o.put("outer_changes", trace.steps.iter().map(|s| s.change).collect::<Vec<_>>());
    field_summary(&mut o, &problem.grid, problem.p, &sol.u)?;
    let g = evaluate_constraint(&problem.op, &sol.u, &problem.grid)?;
    let frame = FieldFrame { t: None, u: sol.u.clone(), lambda: Some(sol.lambda.clone()), g: Some(g.values), d: None };
    ctx.fields("fields", &[frame], &problem.grid)?;
    o.field = Some((problem.grid.clone(), sol.u));
    Ok(o)
}

fn series_outcome(o: &mut Outcome, sol: &TimeSeriesSolution, p: f64) -> Result<()> {
    o.converged = sol.converged;
    o.flags.extend(sol.flags.iter().cloned());
    o.put("method", &sol.method);
    o.put("steps", sol.steps.len());
    o.put("energy_slack", sol.energy_slack);
    o.put("max_violation", sol.steps.iter().map(|s| s.violation).fold(0.0, f64::max));
    o.put("newton_iterations", sol.steps.iter().map(|s| s.newton_iterations).sum::<usize>());
    o.put("final_change_sup", sol.steps.last().map_or(0.0, |s| s.change_sup));
    field_summary(o, &sol.grid, p, sol.last())
}

fn series_frames(
    sol: &TimeSeriesSolution,
    every: usize,
    g_at: impl Fn(usize, f64) -> Result<Option<Vec<f64>>>,
    d: Option<&ScalarField>,
) -> Result<Vec<FieldFrame>> {
    cadence(sol.snapshots.len(), every)
        .into_iter()
        .map(|n| {
            let t = sol.times[n];
            Ok(FieldFrame { t: Some(t), u: sol.snapshots[n].clone(), lambda: None, g: g_at(n, t)?, d: d.cloned() })
        })
        .collect()
}

fn step_table(ctx: &mut Ctx, sol: &TimeSeriesSolution) -> Result<()> {
    let rows = sol
        .steps
        .iter()
        .map(|s| {
            vec![
                fmt_f64(s.t),
                fmt_f64(s.violation),
                s.newton_iterations.to_string(),
                s.converged.to_string(),
                fmt_f64(s.change_sup),
                s.inner_iterations.map_or("nan".into(), |v| v.to_string()),
                fmt_f64(s.self_consistency.unwrap_or(f64::NAN)),
            ]
        })
        .collect();
    ctx.table(
        "steps.csv",
        &["t", "violation", "newton_iterations", "converged", "change_sup", "inner_iterations", "self_consistency"],
        rows,
    )
}

fn run_parabolic(ctx: &mut Ctx) -> Result<Outcome> {
    let solver = &ctx.cfg.solver;
    let problem = parabolic_problem(&ctx.cfg.problem)?;
    let sol = solve_parabolic_vi(&problem, &solver.step_settings()?)?;
    let mut o = Outcome::default();
    series_outcome(&mut o, &sol, problem.p)?;
    o.put("weak_form_residual", weak_form_residual(&problem, &sol, solver.certificate_samples, solver.seed));
    let frames = series_frames(&sol, ctx.cfg.output.snapshot_every, |_, t| Ok(Some(problem.g.at(t).values)), None)?;
    ctx.fields("fields", &frames, &problem.grid)?;
    step_table(ctx, &sol)?;
    o.field = Some((problem.grid.clone(), sol.last().clone()));
    Ok(o)
}

fn run_transport(ctx: &mut Ctx) -> Result<Outcome> {
    let (pb, solver) = (&ctx.cfg.problem, &ctx.cfg.solver);
    let base = parabolic_problem(pb)?;
    let b = drift(pb, &base.grid)?.ok_or_else(|| cfg_err("missing field `problem.bx`"))?;
    let c = match &pb.c {
        Some(s) => s.nodes(&base.grid, 0.0, "c")?,
        None => ScalarField::zeros(&base.grid),
    };
    let problem = TransportProblem {
        grid: base.grid,
        p: base.p,
        delta: base.delta,
        b,
        c,
        f: base.f,
        g: base.g,
        u0: base.u0,
        horizon: base.horizon,
        tau: base.tau,
    };
    let settings = solver.step_settings()?;
    let sol = solve_transport_vi(&problem, &settings)?;
    let mut o = Outcome::default();
    series_outcome(&mut o, &sol, problem.p)?;
    o.put("ell", problem.ell());
    let frames = series_frames(&sol, ctx.cfg.output.snapshot_every, |_, t| Ok(Some(problem.g.at(t).values)), None)?;
    ctx.fields("fields", &frames, &problem.grid)?;
    step_table(ctx, &sol)?;
    match solver.method.as_deref().unwrap_or("evolution") {
        "evolution" => {}
        "stationary" => {
            let (w, flags) = stationary_transport(&problem, &settings)?;
            o.put("stationary_gap_sup", sol.last().max_abs_diff(&w));
            o.flags.extend(flags);
            ctx.fields("stationary", &[FieldFrame::stationary(w)], &problem.grid)?;
        }
        other => return Err(cfg_err(format!("unknown transport method `{other}` (evolution | stationary)"))),
    }
    o.field = Some((problem.grid.clone(), sol.last().clone()));
    Ok(o)
}

fn run_qvi_evolution(ctx: &mut Ctx) -> Result<Outcome> {
    let (pb, solver) = (&ctx.cfg.problem, &ctx.cfg.solver);
    let b = basics(pb)?;
    let (horizon, tau) = horizon_tau(pb)?;
    let problem = ParabolicQviProblem {
        f: need(&pb.f, "f")?.nodes_in_time(&b.grid, horizon, tau, "f")?,
        op: need(&pb.op, "op")?.build(&b.grid, b.p)?,
        u0: initial(pb, &b.grid)?,
        grid: b.grid,
        p: b.p,
        delta: b.delta,
        horizon,
        tau,
    };
    let settings = solver.step_settings()?;
    let mut o = Outcome::default();
    let contraction = |kind| solve_parabolic_qvi_contraction(&problem, kind, solver.outer_tol, solver.max_iter, solver.allow_uncertified, &settings);
    let sol = match solver.method.as_deref().unwrap_or("lagged") {
        "lagged" => solve_parabolic_qvi(&problem, QviStepMode::Lagged, solver.outer_tol, solver.max_iter, &settings)?,
        "picard" => solve_parabolic_qvi(&problem, QviStepMode::Picard, solver.outer_tol, solver.max_iter, &settings)?,
        m @ ("contraction-weak" | "contraction-strong") => {
            let kind = if m == "contraction-weak" { EvolutionCertificateKind::WeakRStar } else { EvolutionCertificateKind::StrongRp };
            let (sol, trace, cert) = contraction(kind)?;
            o.put("certificate", cert);
            o.put("outer_iterations", trace.iterations.len());
            o.put("self_consistency", trace.self_consistency);
            o.put("trajectory_violation", trace.violation);
            o.put("max_q", trace.max_q);
            o.flags.extend(trace.flags.iter().cloned());
            if !trace.converged {
                o.flags.push("outer-iteration-not-converged".into());
            }
            let mut sol = sol;
            sol.converged &= trace.converged;
            sol
        }
        other => {
            return Err(cfg_err(format!(
                "unknown qvi-evolution method `{other}` (lagged | picard | contraction-weak | contraction-strong)"
            )))
        }
    };
    series_outcome(&mut o, &sol, problem.p)?;
    let frames = series_frames(
        &sol,
        ctx.cfg.output.snapshot_every,
        |n, _| Ok(Some(evaluate_constraint(&problem.op, &sol.snapshots[n], &problem.grid)?.values)),
        None,
    )?;
    ctx.fields("fields", &frames, &problem.grid)?;
    step_table(ctx, &sol)?;
    o.field = Some((problem.grid.clone(), sol.last().clone()));
    Ok(o)
}

fn run_sandpile(ctx: &mut Ctx) -> Result<Outcome> {
    let (pb, solver) = (&ctx.cfg.problem, &ctx.cfg.solver);
    let grid = need(&pb.grid, "grid")?.build()?;
    let (horizon, tau) = horizon_tau(pb)?;
    let k = *need(&pb.k, "k")?;
    let scenario = SandpileScenario {
        f: need(&pb.f, "f")?.nodes_in_time(&grid, horizon, tau, "f")?,
        u0: initial(pb, &grid)?,
        b: drift(pb, &grid)?,
        delta: pb.delta.unwrap_or(0.0),
        threshold: pb.threshold,
        k,
        horizon,
        tau,
        monotone_tol: 1e-8,
        grid,
    };
    let (sol, rep) = sandpile_simulate(&scenario, &solver.step_settings()?)?;
    let grid = &scenario.grid;
    let kd = weighted_distance(&BoundField::constant(grid, 1.0)?, grid)?.values.scaled(k);
    let f_end = scenario.f.at(horizon);
    let support: Vec<usize> = (0..grid.node_count()).filter(|&n| f_end.0[n] > 0.0).collect();
    let w = sandpile_stationary(&scenario.u0, &support, k, grid)?;
    let mut o = Outcome::default();
    series_outcome(&mut o, &sol, 2.0)?;
    o.put("threshold", rep.threshold);
    o.put("first_hit", rep.first_hit);
    o.put("first_hit_time", rep.first_hit_time);
    o.put("persists", rep.persists);
    o.put("monotonicity_violations", rep.monotonicity_violations);
    o.put("max_decrease", rep.max_decrease);
    o.put("barrier_violations", rep.barrier_violations);
    o.put("final_distance_gap", rep.gap_history.last().copied());
    o.put("stationary_formula_gap", sol.last().max_abs_diff(&w));
    let bound: Vec<f64> = (0..grid.cell_count()).map(|c| k.max(norm2(cell_gradient(grid, &scenario.u0.0, c)))).collect();
    let frames = series_frames(&sol, ctx.cfg.output.snapshot_every, |_, _| Ok(Some(bound.clone())), Some(&kd))?;
    ctx.fields("fields", &frames, grid)?;
    ctx.fields("stationary", &[FieldFrame { t: None, u: w, lambda: None, g: None, d: Some(kd.clone()) }], grid)?;
    let rows = rep.gap_history.iter().zip(&sol.times).map(|(g, t)| vec![fmt_f64(*t), fmt_f64(*g)]).collect();
    ctx.table("distance_gap.csv", &["t", "gap"], rows)?;
    step_table(ctx, &sol)?;
    o.field = Some((grid.clone(), sol.last().clone()));
    Ok(o)
}

fn run_verify(ctx: &mut Ctx) -> Result<Outcome> {
    let solver = &ctx.cfg.solver;
    let problem = elliptic_problem(&ctx.cfg.problem)?;
    let (report, sols) = equivalence_solve(&problem, &solver.penalty()?, &solver.tolerances())?;
    let mut o = Outcome::default();
    o.converged = report.solvers_converged;
    o.merge(&report);
    o.put("plastic_cell_fraction", plastic_cell_fraction(&problem.grid, &sols.vi.u, &problem.g));
    let grid = &problem.grid;
    let g = Some(problem.g.values.clone());
    ctx.fields(
        "fields",
        &[FieldFrame { t: None, u: sols.vi.u.clone(), lambda: Some(sols.vi.lambda.clone()), g: g.clone(), d: Some(sols.upper.clone()) }],
        grid,
    )?;
    ctx.fields("obstacle", &[FieldFrame { t: None, u: sols.obstacle.u, lambda: None, g: g.clone(), d: Some(sols.upper) }], grid)?;
    ctx.fields("complementarity", &[FieldFrame { t: None, u: sols.complementarity, lambda: None, g, d: None }], grid)?;
    o.field = Some((grid.clone(), sols.vi.u));
    Ok(o)
}

/// Worker count: the environment variable, then `study.workers`, then rayon's default.
pub fn worker_count(configured: Option<usize>) -> usize {
    std::env::var(WORKERS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|w| *w > 0)
        .or(configured.filter(|w| *w > 0))
        .unwrap_or_else(rayon::current_num_threads)
}

/// The configuration of one sub-run: `kind` replaced by the study base and
/// `edit` applied to the TOML table, then revalidated.
fn sub_config(cfg: &RunConfig, base: Kind, edit: impl FnOnce(&mut toml::Table) -> std::result::Result<(), String>) -> Result<RunConfig> {
    let mut table: toml::Table = toml::Value::try_from(cfg)
        .ok()
        .and_then(|v| v.as_table().cloned())
        .ok_or_else(|| cfg_err("cannot serialize the study configuration"))?;
    table.remove("study");
    set_path(&mut table, "problem.kind", toml::Value::String(base.name().into())).map_err(cfg_err)?;
    edit(&mut table).map_err(cfg_err)?;
    parse_config(&toml::to_string(&table).map_err(|e| cfg_err(e.to_string()))?)
}

fn failed_bundle(dir: &Path, cfg: &RunConfig, base: Kind, e: Error) -> ResultBundle {
    let ctx = Ctx { cfg, dir, manifest: Vec::new() };
    if let Err(io) = fs::create_dir_all(dir) {
        log::error!("cannot create {}: {io}", dir.display());
    }
    finish(ctx, base, cfg.solver.seed, Err(e), BTreeMap::new())
}

fn value_text(v: &toml::Value) -> String {
    match v {
        toml::Value::String(s) => s.clone(),
        toml::Value::Float(f) => fmt_f64(*f),
        other => other.to_string(),
    }
}

fn value_number(v: &toml::Value) -> Option<f64> {
    match v {
        toml::Value::Float(f) => Some(*f),
        toml::Value::Integer(i) => Some(*i as f64),
        _ => None,
    }
}

fn magnitudes(values: &[toml::Value]) -> Result<Vec<f64>> {
    values
        .iter()
        .map(|v| value_number(v).ok_or_else(|| cfg_err(format!("study value `{v}` is not a number"))))
        .collect()
}

fn run_study(ctx: &mut Ctx) -> Result<Outcome> {
    let study = ctx.cfg.study.as_ref().ok_or_else(|| cfg_err("missing block `study`"))?;
    match study.kind {
        StudyKind::Sweep | StudyKind::Refinement => run_sub_runs(ctx),
        StudyKind::Dependence => {
            let base = sub_config(ctx.cfg, study.base, |_| Ok(()))?;
            if study.base != Kind::Elliptic {
                return Err(cfg_err("a dependence study needs base = elliptic"));
            }
            let mode = match study.mode.as_deref() {
                Some("perturb-f") => DependenceMode::PerturbF,
                Some("perturb-g") => DependenceMode::PerturbG,
                Some("mosco") => DependenceMode::Mosco,
                other => return Err(cfg_err(format!("unknown dependence mode `{}` (perturb-f | perturb-g | mosco)", other.unwrap_or("")))),
            };
            let mags = magnitudes(&study.values)?;
            let problem = elliptic_problem(&base.problem)?;
            let rep = dependence_study(&problem, mode, &mags, &base.solver.penalty()?, &base.solver.tolerances())?;
            let rows = rep.magnitudes.iter().zip(&rep.errors).map(|(m, e)| vec![fmt_f64(*m), fmt_f64(*e)]).collect();
            ctx.table("study.csv", &["magnitude", "error"], rows)?;
            let mut o = Outcome { converged: true, ..Outcome::default() };
            o.merge(&rep);
            Ok(o)
        }
        StudyKind::Stability => {
            let base = sub_config(ctx.cfg, study.base, |_| Ok(()))?;
            if study.base != Kind::Parabolic {
                return Err(cfg_err("a stability study needs base = parabolic"));
            }
            let mode = match study.mode.as_deref() {
                Some("f") => StabilityMode::F,
                Some("g") => StabilityMode::G,
                Some("u0") => StabilityMode::U0,
                other => return Err(cfg_err(format!("unknown stability mode `{}` (f | g | u0)", other.unwrap_or("")))),
            };
            let mags = magnitudes(&study.values)?;
            let problem = parabolic_problem(&base.problem)?;
            let rep = stability_study(&problem, mode, &mags, &base.solver.step_settings()?)?;
            let rows = (0..rep.magnitudes.len())
                .map(|i| vec![fmt_f64(rep.magnitudes[i]), fmt_f64(rep.l2_gaps[i]), fmt_f64(rep.vp_gaps[i])])
                .collect();
            ctx.table("study.csv", &["magnitude", "l2_gap", "vp_gap"], rows)?;
            let mut o = Outcome { converged: true, ..Outcome::default() };
            o.merge(&rep);
            Ok(o)
        }
    }
}

/// Scalar entries of a sub-run's results: numbers and booleans.
fn scalars(b: &ResultBundle) -> BTreeMap<String, f64> {
    b.results()
        .iter()
        .filter_map(|(k, v)| match v {
            Value::Number(n) => n.as_f64().map(|x| (k.clone(), x)),
            Value::Bool(t) => Some((k.clone(), if *t { 1.0 } else { 0.0 })),
            _ => None,
        })
        .collect()
}

fn run_sub_runs(ctx: &mut Ctx) -> Result<Outcome> {
    let cfg = ctx.cfg;
    let study = cfg.study.as_ref().expect("checked");
    let dim = cfg.problem.grid.as_ref().map_or(1, |g| g.nodes.len());
    let configs: Vec<Result<RunConfig>> = study
        .values
        .iter()
        .map(|v| match study.kind {
            StudyKind::Sweep => {
                let path = study.parameter.clone().unwrap_or_default();
                sub_config(cfg, study.base, |t| set_path(t, &path, v.clone()))
            }
            _ => {
                let n = v.as_integer().filter(|n| *n >= 3).ok_or_else(|| cfg_err(format!("refinement value `{v}` is not a node count >= 3")))?;
                let nodes = toml::Value::Array(vec![toml::Value::Integer(n); dim]);
                sub_config(cfg, study.base, |t| set_path(t, "problem.grid.nodes", nodes))
            }
        })
        .collect();
    let workers = worker_count(study.workers);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::Solver(format!("cannot start worker pool: {e}")))?;
    let dir = ctx.dir;
    let bundles: Vec<ResultBundle> = pool.install(|| {
        configs
            .into_par_iter()
            .enumerate()
            .map(|(i, c)| {
                let sub = dir.join(format!("run_{i:03}"));
                match c {
                    Ok(c) => run(&c, &sub),
                    Err(e) => failed_bundle(&sub, cfg, study.base, e),
                }
            })
            .collect()
    });
    for (i, b) in bundles.iter().enumerate() {
        for m in &b.manifest {
            ctx.manifest.push(ManifestEntry { path: format!("run_{i:03}/{}", m.path), ..m.clone() });
        }
    }
    let table: Vec<BTreeMap<String, f64>> = bundles.iter().map(scalars).collect();
    let mut keys: Vec<String> = table.iter().flat_map(|m| m.keys().cloned()).collect();
    keys.sort();
    keys.dedup();
    let mut columns = vec!["index".to_string(), "value".into(), "status".into()];
    columns.extend(keys.iter().cloned());
    let rows: Vec<Vec<String>> = bundles
        .iter()
        .enumerate()
        .map(|(i, b)| {
            let mut r = vec![i.to_string(), value_text(&study.values[i]), b.status.name().to_string()];
            r.extend(keys.iter().map(|k| fmt_f64(table[i].get(k).copied().unwrap_or(f64::NAN))));
            r
        })
        .collect();
    ctx.manifest.push(write_table(&dir.join("study.csv"), &columns, &rows)?);

    let failed: Vec<usize> = bundles.iter().enumerate().filter(|(_, b)| b.status != ExitStatus::Success).map(|(i, _)| i).collect();
    let mut o = Outcome { converged: failed.is_empty(), ..Outcome::default() };
    if !failed.is_empty() {
        o.flags.push("sub-run-failures".into());
    }
    o.put("runs", bundles.len());
    o.put("failed", &failed);
    o.put("workers", workers);
    o.put(
        "sub_runs",
        bundles
            .iter()
            .enumerate()
            .map(|(i, b)| json!({ "dir": format!("run_{i:03}"), "status": b.status.name(), "error": b.summary.get("error") }))
            .collect::<Vec<_>>(),
    );
    match study.kind {
        StudyKind::Sweep => {
            let xs: Option<Vec<f64>> = study.values.iter().map(value_number).collect();
            let mut slopes = Map::new();
            if let Some(xs) = xs.filter(|xs| xs.iter().all(|x| *x > 0.0)) {
                for k in &keys {
                    let ys: Vec<f64> = table.iter().map(|m| m.get(k).copied().unwrap_or(f64::NAN)).collect();
                    if ys.iter().all(|y| y.is_finite() && *y > 0.0) {
                        slopes.insert(k.clone(), json!(loglog_slope(&xs, &ys)));
                    }
                }
            }
            o.put("fitted_slopes", slopes);
        }
        StudyKind::Refinement => {
            refinement_orders(&mut o, &bundles)?;
            o.put("scalar_orders", scalar_orders(&bundles, &table, &keys));
        }
        _ => unreachable!(),
    }
    Ok(o)
}

/// Observed order of every scalar from three successive levels:
/// ln(|q₀ − q₁| / |q₁ − q₂|) / ln(h₀/h₁).
fn scalar_orders(bundles: &[ResultBundle], table: &[BTreeMap<String, f64>], keys: &[String]) -> Map<String, Value> {
    let hs: Option<Vec<f64>> = bundles.iter().map(|b| b.field.as_ref().map(|(g, _)| g.h())).collect();
    let mut out = Map::new();
    let Some(hs) = hs else { return out };
    let mut idx: Vec<usize> = (0..hs.len()).collect();
    idx.sort_by(|a, b| hs[*b].total_cmp(&hs[*a]));
    for k in keys {
        let q: Option<Vec<f64>> = idx.iter().map(|&i| table[i].get(k).copied()).collect();
        let Some(q) = q else { continue };
        let orders: Vec<f64> = (0..q.len().saturating_sub(2))
            .map(|i| {
                let (d0, d1) = ((q[i] - q[i + 1]).abs(), (q[i + 1] - q[i + 2]).abs());
                (d0 / d1).ln() / (hs[idx[i]] / hs[idx[i + 1]]).ln()
            })
            .collect();
        if !orders.is_empty() && orders.iter().all(|o| o.is_finite()) {
            out.insert(k.clone(), json!(orders));
        }
    }
    out
}

/// Sup-differences between successive nested levels at the coarser nodes, the
/// observed orders, and the log-log slope of each level's gap to the finest
/// level against h.
fn refinement_orders(o: &mut Outcome, bundles: &[ResultBundle]) -> Result<()> {
    let fields: Option<Vec<&(Grid, ScalarField)>> = bundles.iter().map(|b| b.field.as_ref()).collect();
    let Some(mut fields) = fields else {
        o.flags.push("refinement-incomplete".into());
        return Ok(());
    };
    fields.sort_by_key(|(g, _)| g.node_count());
    let restrict = |coarse: &Grid, fine: &Grid, uf: &ScalarField| -> Result<ScalarField> {
        let (cx, fx) = (coarse.nx() - 1, fine.nx() - 1);
        let (cy, fy) = (coarse.ny().max(1) - 1, fine.ny().max(1) - 1);
        if fx % cx != 0 || (coarse.dim() == 2 && (fy % cy != 0 || fx / cx != fy / cy)) {
            return Err(cfg_err("refinement levels must be nested (n - 1 dividing the next level's n - 1)"));
        }
        let r = fx / cx;
        Ok(ScalarField(
            (0..coarse.node_count())
                .map(|n| {
                    let (i, j) = coarse.node_ij(n);
                    uf.0[i * r + fine.nx() * j * r]
                })
                .collect(),
        ))
    };
    let hs: Vec<f64> = fields.iter().map(|(g, _)| g.h()).collect();
    let mut diffs = Vec::new();
    for w in fields.windows(2) {
        diffs.push(restrict(&w[0].0, &w[1].0, &w[1].1)?.max_abs_diff(&w[0].1));
    }
    let (gf, uf) = fields.last().expect("nonempty");
    let mut to_finest = Vec::new();
    let mut grad_to_finest = Vec::new();
    for (g, u) in &fields[..fields.len() - 1] {
        let r = restrict(g, gf, uf)?;
        to_finest.push(r.max_abs_diff(u));
        grad_to_finest.push(field_norm(&gradient(&r.sub(u), g)?, 2.0, g)?);
    }
    let orders: Vec<f64> = diffs
        .windows(2)
        .zip(hs.windows(2))
        .map(|(d, h)| (d[0] / d[1]).ln() / (h[0] / h[1]).ln())
        .collect();
    o.put("h", &hs);
    o.put("successive_differences", &diffs);
    o.put("error_to_finest", &to_finest);
    o.put("observed_orders", &orders);
    o.put("gradient_error_to_finest", &grad_to_finest);
    o.put("fitted_slope", loglog_slope(&hs[..hs.len() - 1], &to_finest));
    o.put("gradient_fitted_slope", loglog_slope(&hs[..hs.len() - 1], &grad_to_finest));
    Ok(())
}
