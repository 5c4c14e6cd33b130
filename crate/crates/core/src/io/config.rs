//! Run configuration: a strict TOML schema with `problem`, `solver`, `output`
//! and `study` blocks. Parsing collects every error before reporting.

use std::collections::BTreeMap;

use evalexpr::{build_operator_tree, ContextWithMutableVariables, DefaultNumericTypes, HashMapContext, Node, Value};
use serde::{Deserialize, Serialize};

use crate::constraints::{BoundField, ConstraintOperator, GammaFunctional, PenaltyParams, PointwiseMap};
use crate::elliptic::Tolerances;
use crate::error::{Error, Result};
use crate::evolution::{StepSettings, TimeDependent};
use crate::grid::{Grid, ScalarField, DEFAULT_SEED};
use crate::penalized::NewtonSettings;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Kind {
    Elliptic,
    Qvi,
    Parabolic,
    Transport,
    QviEvolution,
    Sandpile,
    Verify,
    Study,
}

impl Kind {
    pub fn name(self) -> &'static str {
        match self {
            Self::Elliptic => "elliptic",
            Self::Qvi => "qvi",
            Self::Parabolic => "parabolic",
            Self::Transport => "transport",
            Self::QviEvolution => "qvi-evolution",
            Self::Sandpile => "sandpile",
            Self::Verify => "verify",
            Self::Study => "study",
        }
    }

    pub fn is_evolution(self) -> bool {
        matches!(self, Self::Parabolic | Self::Transport | Self::QviEvolution | Self::Sandpile)
    }
}

/// A numeric constant or an expression in x, y (and t for time-dependent data).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum FieldSpec {
    Number(f64),
    Expr(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridBlock {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub nodes: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OperatorBlock {
    /// constant | growth | kernel | separated | sandpile-eps
    pub kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub value: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nu: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub coef: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub power: Option<f64>,
    /// Kernel components in x, y (target) and sx, sy (source).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kernel: Option<[String; 2]>,
    /// energy | constant
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eta0: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delta0: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub phi: Option<FieldSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eps: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub support: Option<FieldSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProblemBlock {
    pub kind: Kind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delta: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub f: Option<FieldSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub g: Option<FieldSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub u0: Option<FieldSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bx: Option<FieldSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub by: Option<FieldSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub c: Option<FieldSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub horizon: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tau: Option<f64>,
    /// Sandpile repose slope.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k: Option<f64>,
    /// Sandpile stabilization threshold.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub threshold: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid: Option<GridBlock>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub op: Option<OperatorBlock>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverBlock {
    /// Explicit ε schedule; otherwise eps_start → eps_end by eps_factor.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eps: Option<Vec<f64>>,
    #[serde(default = "d_eps_start")]
    pub eps_start: f64,
    #[serde(default = "d_eps_end")]
    pub eps_end: f64,
    #[serde(default = "d_eps_factor")]
    pub eps_factor: f64,
    #[serde(default = "d_newton_tol")]
    pub newton_tol: f64,
    #[serde(default = "d_newton_max")]
    pub newton_max_iter: usize,
    #[serde(default = "d_feas")]
    pub feasibility_tol: f64,
    #[serde(default = "d_seed")]
    pub seed: u64,
    /// Method variant for the kind (see README).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub method: Option<String>,
    #[serde(default = "d_outer_tol")]
    pub outer_tol: f64,
    #[serde(default = "d_max_iter")]
    pub max_iter: usize,
    #[serde(default)]
    pub allow_uncertified: bool,
    #[serde(default = "d_samples")]
    pub certificate_samples: usize,
    /// Vanishing-viscosity schedule for δ = 0 elliptic runs.
    #[serde(default = "d_deltas")]
    pub deltas: Vec<f64>,
    #[serde(default = "d_true")]
    pub warm_start: bool,
}

fn d_eps_start() -> f64 {
    1e-1
}
fn d_eps_end() -> f64 {
    1e-6
}
fn d_eps_factor() -> f64 {
    10.0
}
fn d_newton_tol() -> f64 {
    NewtonSettings::default().tol
}
fn d_newton_max() -> usize {
    NewtonSettings::default().max_iter
}
fn d_feas() -> f64 {
    Tolerances::default().feasibility
}
fn d_seed() -> u64 {
    DEFAULT_SEED
}
fn d_outer_tol() -> f64 {
    1e-9
}
fn d_max_iter() -> usize {
    100
}
fn d_samples() -> usize {
    16
}
fn d_deltas() -> Vec<f64> {
    (1..=8).map(|k| 10f64.powi(-k)).collect()
}
fn d_true() -> bool {
    true
}

impl Default for SolverBlock {
    fn default() -> Self {
        toml::from_str("").expect("defaults")
    }
}

impl SolverBlock {
    pub fn penalty(&self) -> Result<PenaltyParams> {
        match &self.eps {
            Some(s) => PenaltyParams::from_schedule(s.clone()),
            None => PenaltyParams::continuation(self.eps_start, self.eps_end, self.eps_factor),
        }
    }

    pub fn newton(&self) -> NewtonSettings {
        NewtonSettings { tol: self.newton_tol, max_iter: self.newton_max_iter, ..NewtonSettings::default() }
    }

    pub fn tolerances(&self) -> Tolerances {
        Tolerances { newton: self.newton(), feasibility: self.feasibility_tol, seed: self.seed, ..Tolerances::default() }
    }

    pub fn step_settings(&self) -> Result<StepSettings> {
        Ok(StepSettings { params: self.penalty()?, newton: self.newton(), warm_start: self.warm_start })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputBlock {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dir: Option<String>,
    /// Any of csv, json.
    #[serde(default = "d_formats")]
    pub formats: Vec<String>,
    /// Emit every n-th time level (the last level is always emitted).
    #[serde(default = "d_cadence")]
    pub snapshot_every: usize,
}

fn d_formats() -> Vec<String> {
    vec!["csv".into(), "json".into()]
}
fn d_cadence() -> usize {
    1
}

impl Default for OutputBlock {
    fn default() -> Self {
        Self { dir: None, formats: d_formats(), snapshot_every: 1 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StudyKind {
    /// One sub-run per value of a dotted parameter.
    Sweep,
    /// Grid refinement over node counts (the values).
    Refinement,
    /// Elliptic continuous-dependence study over magnitudes.
    Dependence,
    /// Parabolic stability study over magnitudes.
    Stability,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyBlock {
    pub kind: StudyKind,
    /// Problem kind of the sub-runs.
    pub base: Kind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parameter: Option<String>,
    pub values: Vec<toml::Value>,
    /// Perturbation mode for dependence (perturb-f | perturb-g | mosco) or stability (f | g | u0).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mode: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub workers: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub problem: ProblemBlock,
    #[serde(default)]
    pub solver: SolverBlock,
    #[serde(default)]
    pub output: OutputBlock,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub study: Option<StudyBlock>,
}

const TOP_KEYS: &[&str] = &["problem", "solver", "output", "study"];
const PROBLEM_KEYS: &[&str] = &[
    "kind", "p", "delta", "f", "g", "u0", "bx", "by", "c", "horizon", "tau", "k", "threshold", "grid", "op",
];
const GRID_KEYS: &[&str] = &["lower", "upper", "nodes"];
const OP_KEYS: &[&str] = &[
    "kind", "value", "nu", "coef", "power", "kernel", "gamma", "eta0", "delta0", "phi", "k", "eps", "support",
];
const SOLVER_KEYS: &[&str] = &[
    "eps", "eps_start", "eps_end", "eps_factor", "newton_tol", "newton_max_iter", "feasibility_tol", "seed", "method",
    "outer_tol", "max_iter", "allow_uncertified", "certificate_samples", "deltas", "warm_start",
];
const OUTPUT_KEYS: &[&str] = &["dir", "formats", "snapshot_every"];
const STUDY_KEYS: &[&str] = &["kind", "base", "parameter", "values", "mode", "workers"];

fn unknown_keys(table: &toml::Table, path: &str, allowed: &[&str], errors: &mut Vec<String>) {
    for key in table.keys() {
        if !allowed.contains(&key.as_str()) {
            let full = if path.is_empty() { key.clone() } else { format!("{path}.{key}") };
            errors.push(format!("unknown key `{full}`"));
        }
    }
}

fn sub_table<'a>(table: &'a toml::Table, key: &str, path: &str, errors: &mut Vec<String>) -> Option<&'a toml::Table> {
    match table.get(key) {
        None => None,
        Some(toml::Value::Table(t)) => Some(t),
        Some(_) => {
            errors.push(format!("`{path}{key}` must be a table"));
            None
        }
    }
}

fn typed<T: for<'de> Deserialize<'de>>(table: &toml::Table, path: &str, errors: &mut Vec<String>) -> Option<T> {
    match toml::Value::Table(table.clone()).try_into::<T>() {
        Ok(v) => Some(v),
        Err(e) => {
            errors.push(format!("in `{path}`: {}", e.message().trim()));
            None
        }
    }
}

fn required(kind: Kind) -> &'static [&'static str] {
    match kind {
        Kind::Elliptic | Kind::Verify => &["grid", "delta", "f", "g"],
        Kind::Qvi => &["grid", "delta", "f", "op"],
        Kind::Parabolic => &["grid", "delta", "f", "g", "horizon", "tau"],
        Kind::Transport => &["grid", "delta", "f", "g", "bx", "horizon", "tau"],
        Kind::QviEvolution => &["grid", "delta", "f", "op", "horizon", "tau"],
        Kind::Sandpile => &["grid", "k", "f", "horizon", "tau"],
        Kind::Study => &[],
    }
}

fn present(pb: &ProblemBlock, key: &str) -> bool {
    match key {
        "grid" => pb.grid.is_some(),
        "delta" => pb.delta.is_some(),
        "f" => pb.f.is_some(),
        "g" => pb.g.is_some(),
        "op" => pb.op.is_some(),
        "bx" => pb.bx.is_some(),
        "horizon" => pb.horizon.is_some(),
        "tau" => pb.tau.is_some(),
        "k" => pb.k.is_some(),
        _ => true,
    }
}

fn semantic_checks(cfg: &RunConfig, errors: &mut Vec<String>) {
    let kind = match (&cfg.problem.kind, &cfg.study) {
        (Kind::Study, Some(s)) => {
            if s.base == Kind::Study {
                errors.push("`study.base` cannot be study".into());
            }
            if s.values.is_empty() {
                errors.push("`study.values` is empty".into());
            } else if s.values.len() < 3 {
                errors.push(format!("`study.values` needs at least 3 entries, got {}", s.values.len()));
            }
            if s.kind == StudyKind::Sweep && s.parameter.is_none() {
                errors.push("missing field `study.parameter` for a sweep".into());
            }
            if matches!(s.kind, StudyKind::Dependence | StudyKind::Stability) && s.mode.is_none() {
                errors.push("missing field `study.mode`".into());
            }
            s.base
        }
        (Kind::Study, None) => {
            errors.push("missing block `study` for kind study".into());
            return;
        }
        (k, Some(_)) => {
            errors.push(format!("`study` block given for kind {}", k.name()));
            *k
        }
        (k, None) => *k,
    };
    for key in required(kind) {
        if !present(&cfg.problem, key) {
            errors.push(format!("missing field `problem.{key}` for kind {}", kind.name()));
        }
    }
    if let Some(g) = &cfg.problem.grid {
        let d = g.nodes.len();
        if !(d == 1 || d == 2) || g.lower.len() != d || g.upper.len() != d {
            errors.push("`problem.grid` needs lower, upper and nodes of equal length 1 or 2".into());
        }
    }
    if let Some(op) = &cfg.problem.op {
        let need: &[&str] = match op.kind.as_str() {
            "constant" => &["value"],
            "growth" => &["nu", "coef", "power"],
            "kernel" => &["nu", "coef", "power", "kernel"],
            "separated" => &["gamma", "phi"],
            "sandpile-eps" => &["k", "eps"],
            other => {
                errors.push(format!("unknown operator kind `{other}` in `problem.op.kind`"));
                &[]
            }
        };
        for key in need {
            let has = match *key {
                "value" => op.value.is_some(),
                "nu" => op.nu.is_some(),
                "coef" => op.coef.is_some(),
                "power" => op.power.is_some(),
                "kernel" => op.kernel.is_some(),
                "gamma" => op.gamma.is_some(),
                "phi" => op.phi.is_some(),
                "k" => op.k.is_some(),
                "eps" => op.eps.is_some(),
                _ => true,
            };
            if !has {
                errors.push(format!("missing field `problem.op.{key}` for operator {}", op.kind));
            }
        }
    }
    for f in &cfg.output.formats {
        if f != "csv" && f != "json" {
            errors.push(format!("unknown output format `{f}`"));
        }
    }
    if cfg.output.snapshot_every == 0 {
        errors.push("`output.snapshot_every` must be >= 1".into());
    }
    for (name, spec) in [
        ("f", &cfg.problem.f),
        ("g", &cfg.problem.g),
        ("u0", &cfg.problem.u0),
        ("bx", &cfg.problem.bx),
        ("by", &cfg.problem.by),
        ("c", &cfg.problem.c),
    ] {
        if let Some(FieldSpec::Expr(e)) = spec {
            if let Err(msg) = Expr::compile(e) {
                errors.push(format!("`problem.{name}`: {msg}"));
            }
        }
    }
}

/// Parses, validates and reports every problem found.
pub fn parse_config(text: &str) -> Result<RunConfig> {
    parse_config_with(text, &[])
}

/// As [`parse_config`] after applying `key=value` overrides to dotted paths.
pub fn parse_config_with(text: &str, overrides: &[String]) -> Result<RunConfig> {
    let mut table: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(vec![e.message().to_string()]))?;
    let mut errors = Vec::new();
    for o in overrides {
        if let Err(e) = apply_override(&mut table, o) {
            errors.push(e);
        }
    }
    unknown_keys(&table, "", TOP_KEYS, &mut errors);
    let problem = match sub_table(&table, "problem", "", &mut errors) {
        Some(p) => {
            unknown_keys(p, "problem", PROBLEM_KEYS, &mut errors);
            if let Some(g) = sub_table(p, "grid", "problem.", &mut errors) {
                unknown_keys(g, "problem.grid", GRID_KEYS, &mut errors);
            }
            if let Some(o) = sub_table(p, "op", "problem.", &mut errors) {
                unknown_keys(o, "problem.op", OP_KEYS, &mut errors);
            }
            if !p.contains_key("kind") {
                errors.push("missing field `problem.kind`".into());
                None
            } else {
                typed::<ProblemBlock>(p, "problem", &mut errors)
            }
        }
        None => {
            errors.push("missing block `problem`".into());
            None
        }
    };
    let solver = match sub_table(&table, "solver", "", &mut errors) {
        Some(s) => {
            unknown_keys(s, "solver", SOLVER_KEYS, &mut errors);
            typed::<SolverBlock>(s, "solver", &mut errors)
        }
        None => Some(SolverBlock::default()),
    };
    let output = match sub_table(&table, "output", "", &mut errors) {
        Some(s) => {
            unknown_keys(s, "output", OUTPUT_KEYS, &mut errors);
            typed::<OutputBlock>(s, "output", &mut errors)
        }
        None => Some(OutputBlock::default()),
    };
    let study = match sub_table(&table, "study", "", &mut errors) {
        Some(s) => {
            unknown_keys(s, "study", STUDY_KEYS, &mut errors);
            match typed::<StudyBlock>(s, "study", &mut errors) {
                Some(b) => Some(Some(b)),
                None => None,
            }
        }
        None => Some(None),
    };
    if let (Some(problem), Some(solver), Some(output), Some(study)) = (problem, solver, output, study) {
        let cfg = RunConfig { problem, solver, output, study };
        semantic_checks(&cfg, &mut errors);
        if errors.is_empty() {
            return Ok(cfg);
        }
    }
    Err(Error::Config(errors))
}

pub fn to_toml(cfg: &RunConfig) -> Result<String> {
    toml::to_string(cfg).map_err(|e| Error::Config(vec![e.to_string()]))
}

/// Applies `a.b.c=value`; the value is read as a TOML value, or as a string if
/// it does not parse.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> std::result::Result<(), String> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| format!("override `{assignment}` is not of the form key=value"))?;
    let value: toml::Value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    set_path(table, path.trim(), value)
}

pub(crate) fn set_path(table: &mut toml::Table, path: &str, value: toml::Value) -> std::result::Result<(), String> {
    let parts: Vec<&str> = path.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(format!("invalid key path `{path}`"));
    }
    let mut cur = table;
    for part in &parts[..parts.len() - 1] {
        let entry = cur.entry(part.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = match entry {
            toml::Value::Table(t) => t,
            _ => return Err(format!("`{path}`: `{part}` is not a table")),
        };
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

/// Compiled expression in x, y, t (and sx, sy for kernels).
pub struct Expr(Node<DefaultNumericTypes>);

impl Expr {
    pub fn compile(text: &str) -> std::result::Result<Self, String> {
        let node = build_operator_tree::<DefaultNumericTypes>(text).map_err(|e| format!("cannot parse `{text}`: {e}"))?;
        let e = Expr(node);
        e.eval(&[("x", 0.5), ("y", 0.5), ("t", 0.0), ("sx", 0.5), ("sy", 0.5)])
            .map_err(|m| format!("cannot evaluate `{text}`: {m}"))?;
        Ok(e)
    }

    pub fn eval(&self, vars: &[(&str, f64)]) -> std::result::Result<f64, String> {
        let mut ctx = HashMapContext::<DefaultNumericTypes>::new();
        for (k, v) in vars {
            ctx.set_value((*k).to_string(), Value::from_float(*v)).map_err(|e| e.to_string())?;
        }
        ctx.set_value("pi".into(), Value::from_float(std::f64::consts::PI)).map_err(|e| e.to_string())?;
        self.0.eval_number_with_context(&ctx).map_err(|e| e.to_string())
    }

    pub fn uses_time(&self) -> bool {
        self.0.iter_variable_identifiers().any(|v| v == "t")
    }
}

fn cfg_err(msg: impl Into<String>) -> Error {
    Error::Config(vec![msg.into()])
}

impl GridBlock {
    pub fn build(&self) -> Result<Grid> {
        match self.nodes.len() {
            1 => Grid::interval(self.lower[0], self.upper[0], self.nodes[0]),
            2 => Grid::rectangle([self.lower[0], self.lower[1]], [self.upper[0], self.upper[1]], [self.nodes[0], self.nodes[1]]),
            _ => Err(cfg_err("grid must be 1D or 2D")),
        }
    }
}

fn eval_at(e: &Expr, x: [f64; 2], t: f64, name: &str) -> Result<f64> {
    let v = e.eval(&[("x", x[0]), ("y", x[1]), ("t", t)]).map_err(|m| cfg_err(format!("`{name}`: {m}")))?;
    if !v.is_finite() {
        return Err(cfg_err(format!("`{name}` is not finite at ({}, {}, t={t})", x[0], x[1])));
    }
    Ok(v)
}

impl FieldSpec {
    pub fn uses_time(&self) -> bool {
        match self {
            Self::Number(_) => false,
            Self::Expr(e) => Expr::compile(e).map(|x| x.uses_time()).unwrap_or(false),
        }
    }

    fn compiled(&self, name: &str) -> Result<Option<Expr>> {
        match self {
            Self::Number(_) => Ok(None),
            Self::Expr(e) => Expr::compile(e).map(Some).map_err(|m| cfg_err(format!("`{name}`: {m}"))),
        }
    }

    /// Nodal sample at time t.
    pub fn nodes(&self, grid: &Grid, t: f64, name: &str) -> Result<ScalarField> {
        match self.compiled(name)? {
            None => {
                let Self::Number(v) = self else { unreachable!() };
                Ok(ScalarField::constant(grid, *v))
            }
            Some(e) => {
                let v = (0..grid.node_count()).map(|n| eval_at(&e, grid.node_coords(n), t, name)).collect::<Result<_>>()?;
                Ok(ScalarField(v))
            }
        }
    }

    /// Cell-center sample at time t.
    pub fn cells(&self, grid: &Grid, t: f64, name: &str) -> Result<Vec<f64>> {
        match self.compiled(name)? {
            None => {
                let Self::Number(v) = self else { unreachable!() };
                Ok(vec![*v; grid.cell_count()])
            }
            Some(e) => (0..grid.cell_count()).map(|c| eval_at(&e, grid.cell_center(c), t, name)).collect(),
        }
    }

    pub fn bound(&self, grid: &Grid, t: f64, name: &str) -> Result<BoundField> {
        match self {
            Self::Number(v) => BoundField::constant(grid, *v),
            Self::Expr(_) => BoundField::from_samples(self.cells(grid, t, name)?),
        }
    }

    /// Time-dependent nodal data sampled at every step time when it uses t.
    pub fn nodes_in_time(&self, grid: &Grid, horizon: f64, tau: f64, name: &str) -> Result<TimeDependent<ScalarField>> {
        if !self.uses_time() {
            return Ok(TimeDependent::Constant(self.nodes(grid, 0.0, name)?));
        }
        let times = step_times(horizon, tau);
        let values = times.iter().map(|&t| self.nodes(grid, t, name)).collect::<Result<_>>()?;
        Ok(TimeDependent::Samples { times, values })
    }

    pub fn bound_in_time(&self, grid: &Grid, horizon: f64, tau: f64, name: &str) -> Result<TimeDependent<BoundField>> {
        if !self.uses_time() {
            return Ok(TimeDependent::Constant(self.bound(grid, 0.0, name)?));
        }
        let times = step_times(horizon, tau);
        let values = times.iter().map(|&t| self.bound(grid, t, name)).collect::<Result<_>>()?;
        Ok(TimeDependent::Samples { times, values })
    }
}

fn step_times(horizon: f64, tau: f64) -> Vec<f64> {
    let n = (horizon / tau).round() as usize;
    (0..=n).map(|k| k as f64 * tau).collect()
}

impl OperatorBlock {
    pub fn build(&self, grid: &Grid, p: f64) -> Result<ConstraintOperator> {
        let num = |v: Option<f64>, name: &str| v.ok_or_else(|| cfg_err(format!("missing field `problem.op.{name}`")));
        let growth = || -> Result<PointwiseMap> {
            Ok(PointwiseMap::Growth { nu: num(self.nu, "nu")?, coef: num(self.coef, "coef")?, power: num(self.power, "power")? })
        };
        match self.kind.as_str() {
            "constant" => Ok(ConstraintOperator::Constant(num(self.value, "value")?)),
            "growth" => Ok(ConstraintOperator::Nemytskii(growth()?)),
            "kernel" => {
                let [kx, ky] = self.kernel.as_ref().ok_or_else(|| cfg_err("missing field `problem.op.kernel`"))?;
                let ex = Expr::compile(kx).map_err(cfg_err)?;
                let ey = Expr::compile(ky).map_err(cfg_err)?;
                let ev = |e: &Expr, x: [f64; 2], s: [f64; 2]| e.eval(&[("x", x[0]), ("y", x[1]), ("sx", s[0]), ("sy", s[1])]).unwrap_or(f64::NAN);
                Ok(ConstraintOperator::kernel(growth()?, grid, |x, s| [ev(&ex, x, s), ev(&ey, x, s)]))
            }
            "separated" => {
                let gamma = match self.gamma.as_deref() {
                    Some("energy") => GammaFunctional::Energy { eta0: num(self.eta0, "eta0")?, delta0: num(self.delta0, "delta0")?, p },
                    Some("constant") => GammaFunctional::Constant(num(self.eta0, "eta0")?),
                    other => return Err(cfg_err(format!("unknown gamma `{}` (energy | constant)", other.unwrap_or("")))),
                };
                let phi = self.phi.as_ref().ok_or_else(|| cfg_err("missing field `problem.op.phi`"))?.bound(grid, 0.0, "op.phi")?;
                Ok(ConstraintOperator::SeparatedNonlocal { gamma, phi })
            }
            "sandpile-eps" => {
                let support = match &self.support {
                    Some(s) => s.nodes(grid, 0.0, "op.support")?,
                    None => ScalarField::zeros(grid),
                };
                Ok(ConstraintOperator::SandpileGeps { k: num(self.k, "k")?, eps: num(self.eps, "eps")?, support })
            }
            other => Err(cfg_err(format!("unknown operator kind `{other}`"))),
        }
    }
}

/// Flat view of the summary-relevant parameters, used in study tables.
pub fn describe(cfg: &RunConfig) -> BTreeMap<String, String> {
    let mut m = BTreeMap::new();
    m.insert("kind".into(), cfg.problem.kind.name().into());
    if let Some(g) = &cfg.problem.grid {
        m.insert("nodes".into(), format!("{:?}", g.nodes));
    }
    if let Some(p) = cfg.problem.p {
        m.insert("p".into(), p.to_string());
    }
    if let Some(d) = cfg.problem.delta {
        m.insert("delta".into(), d.to_string());
    }
    m
}
