use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use gradvi::applications::{torsion_demo, TorsionOptions};
use gradvi::elliptic::{equivalence_report, solve_vi, EllipticProblem, Tolerances};
use gradvi::io::{parse_config, parse_config_with, read_fields, run, ExitStatus};
use gradvi::{BoundField, Grid, PenaltyParams, ScalarField};

const TORSION_1D: &str = r#"
[problem]
kind = "elliptic"
p = 2
delta = 1.0
f = 2.0
g = 1.0

[problem.grid]
lower = [-1.0]
upper = [1.0]
nodes = [81]
"#;

const COUNTEREXAMPLE: &str = r#"
[problem]
kind = "verify"
p = 2
delta = 1.0
f = 2.0
g = "3*x^2"

[problem.grid]
lower = [-1.0]
upper = [1.0]
nodes = [101]
"#;

fn files_on_disk(dir: &Path) -> BTreeSet<String> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeSet<String>) {
        for e in fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                walk(root, &p, out);
            } else {
                out.insert(p.strip_prefix(root).unwrap().to_string_lossy().into_owned());
            }
        }
    }
    let mut out = BTreeSet::new();
    walk(dir, dir, &mut out);
    out
}

fn assert_manifest_complete(b: &gradvi::io::ResultBundle) {
    let listed: BTreeSet<String> = b.manifest.iter().map(|m| m.path.clone()).collect();
    assert_eq!(listed, files_on_disk(&b.dir));
}

#[test]
fn torsion_run_reports_plastic_fraction() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = parse_config(TORSION_1D).unwrap();
    let b = run(&cfg, dir.path());
    assert_eq!(b.status, ExitStatus::Success, "{:?}", b.summary);
    assert_manifest_complete(&b);
    let grid = Grid::interval(-1.0, 1.0, 81).unwrap();
    let (_, regions) = torsion_demo(2.0, &grid, &TorsionOptions::default(), &PenaltyParams::default(), &Tolerances::default()).unwrap();
    let frac = b.number("plastic_cell_fraction").unwrap();
    assert!((frac - regions.plastic_fraction).abs() < 1e-12, "{frac} vs {}", regions.plastic_fraction);
    assert!(frac > 0.3 && frac < 0.7, "{frac}");

    let (header, rows) = read_fields(&dir.path().join("fields.csv")).unwrap();
    assert_eq!(header.join(","), "x,u,lambda,g,grad_norm");
    assert_eq!(rows.len(), grid.node_count());
    let u = &b.field.as_ref().unwrap().1;
    for (n, r) in rows.iter().enumerate() {
        assert_eq!(r[1].to_bits(), u.0[n].to_bits());
    }
    let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("fields.json")).unwrap()).unwrap();
    assert_eq!(json["rows"].as_array().unwrap().len(), grid.node_count());
}

#[test]
fn verify_matches_equivalence_report() {
    let dir = tempfile::tempdir().unwrap();
    let b = run(&parse_config(COUNTEREXAMPLE).unwrap(), dir.path());
    assert_manifest_complete(&b);
    let grid = Grid::interval(-1.0, 1.0, 101).unwrap();
    let f = ScalarField::constant(&grid, 2.0);
    let g = BoundField::from_fn(&grid, |x| 3.0 * x[0].powf(2.0)).unwrap();
    let pr = EllipticProblem::new(grid, 2.0, 1.0, f, g).unwrap();
    let rep = equivalence_report(&pr, &PenaltyParams::default(), &Tolerances::default()).unwrap();
    for (key, want) in [
        ("gap_vi_obstacle", rep.gap_vi_obstacle),
        ("gap_vi_complementarity", rep.gap_vi_complementarity),
        ("gap_obstacle_complementarity", rep.gap_obstacle_complementarity),
        ("center_gap_vi_obstacle", rep.center_gap_vi_obstacle),
        ("complementarity_sup_of_vi", rep.complementarity_sup_of_vi),
    ] {
        assert_eq!(b.number(key).unwrap().to_bits(), want.to_bits(), "{key}");
    }
    assert!(rep.center_gap_vi_obstacle > 0.1);
    assert_eq!(b.results()["laplacian_g2_nonpositive"], serde_json::json!(rep.laplacian_g2_nonpositive));
}

#[test]
fn reruns_are_identical_modulo_timings() {
    let cfg = parse_config_with(TORSION_1D, &["problem.grid.nodes=[6, 6]".into(), "problem.grid.lower=[0.0, 0.0]".into(), "problem.grid.upper=[1.0, 1.0]".into()]).unwrap();
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let ra = run(&cfg, a.path());
    let rb = run(&cfg, b.path());
    assert_eq!(ra.summary, rb.summary);
    let strip = |p: &Path| {
        let mut v: serde_json::Value = serde_json::from_str(&fs::read_to_string(p.join("summary.json")).unwrap()).unwrap();
        v.as_object_mut().unwrap().remove("timings");
        v
    };
    assert_eq!(strip(a.path()), strip(b.path()));
    for f in ["fields.csv", "fields.json", "config.toml"] {
        assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap(), "{f}");
    }
}

#[test]
fn parabolic_time_series_long_format() {
    let text = r#"
[problem]
kind = "parabolic"
delta = 1.0
f = "1 + t"
g = 2.0
horizon = 0.2
tau = 0.05

[problem.grid]
lower = [0.0, 0.0]
upper = [1.0, 1.0]
nodes = [9, 9]

[output]
formats = ["csv"]
snapshot_every = 2
"#;
    let dir = tempfile::tempdir().unwrap();
    let b = run(&parse_config(text).unwrap(), dir.path());
    assert_eq!(b.status, ExitStatus::Success, "{:?}", b.summary);
    assert_manifest_complete(&b);
    let (header, rows) = read_fields(&dir.path().join("fields.csv")).unwrap();
    assert_eq!(header.join(","), "x,y,u,lambda,g,grad_norm,t");
    // levels 0, 2, 4
    assert_eq!(rows.len(), 3 * 81);
    let ts: BTreeSet<u64> = rows.iter().map(|r| r[6].to_bits()).collect();
    assert_eq!(ts.len(), 3);
    assert!(b.number("weak_form_residual").unwrap() >= -1e-6);
}

#[test]
fn missing_field_is_a_config_error() {
    let text = TORSION_1D.replace("g = 1.0\n", "");
    assert!(parse_config(&text).is_err());
    let dir = tempfile::tempdir().unwrap();
    let cfg = parse_config_with(TORSION_1D, &["problem.delta=-1.0".into()]).unwrap();
    let b = run(&cfg, dir.path());
    assert_eq!(b.status, ExitStatus::ConfigError);
    assert_eq!(b.status.code(), 2);
    assert!(b.summary["error"].as_str().unwrap().contains("delta"));
    assert_manifest_complete(&b);
}

#[test]
fn refinement_study_is_first_order() {
    let text = r#"
[problem]
kind = "study"
p = 2
delta = 1.0
f = 20.0
g = 1.0

[problem.grid]
lower = [0.0, 0.0]
upper = [1.0, 1.0]
nodes = [11, 11]

[output]
formats = ["csv"]

[study]
kind = "refinement"
base = "elliptic"
values = [11, 21, 41]
workers = 2
"#;
    let dir = tempfile::tempdir().unwrap();
    let b = run(&parse_config(text).unwrap(), dir.path());
    assert_eq!(b.status, ExitStatus::Success, "{:?}", b.summary);
    assert_manifest_complete(&b);
    let orders = b.results()["observed_orders"].as_array().unwrap();
    assert_eq!(orders.len(), 1);
    let order = orders[0].as_f64().unwrap();
    // independent recomputation on the three nested grids
    let sols: Vec<(Grid, ScalarField)> = [11usize, 21, 41]
        .iter()
        .map(|&n| {
            let grid = Grid::unit_square(n).unwrap();
            let pr = EllipticProblem::new(grid.clone(), 2.0, 1.0, ScalarField::constant(&grid, 20.0), BoundField::constant(&grid, 1.0).unwrap()).unwrap();
            (grid, solve_vi(&pr, &PenaltyParams::default(), &Tolerances::default()).unwrap().u)
        })
        .collect();
    let diff = |c: &(Grid, ScalarField), f: &(Grid, ScalarField)| {
        let r = (f.0.nx() - 1) / (c.0.nx() - 1);
        (0..c.0.node_count())
            .map(|n| {
                let (i, j) = c.0.node_ij(n);
                (c.1 .0[n] - f.1 .0[i * r + f.0.nx() * j * r]).abs()
            })
            .fold(0.0, f64::max)
    };
    let (d0, d1) = (diff(&sols[0], &sols[1]), diff(&sols[1], &sols[2]));
    let want = (d0 / d1).log2();
    assert!((order - want).abs() <= 1e-9 * want.abs(), "{order} vs {want}");
    // at least first order in the nodal sup norm
    assert!(order >= 0.9, "order {order} from {:?}", b.results()["successive_differences"]);
    let (_, rows) = read_fields(&dir.path().join("run_002/fields.csv")).unwrap();
    assert_eq!(rows.len(), 41 * 41);
    let table = fs::read_to_string(dir.path().join("study.csv")).unwrap();
    assert_eq!(table.lines().count(), 4);
}

#[test]
fn empty_sweep_is_rejected() {
    let text = TORSION_1D.replace("kind = \"elliptic\"", "kind = \"study\"")
        + "\n[study]\nkind = \"sweep\"\nbase = \"elliptic\"\nparameter = \"problem.delta\"\nvalues = []\n";
    assert!(parse_config(&text).is_err());
}

#[test]
fn sweep_marks_failed_sub_run() {
    let text = TORSION_1D.replace("kind = \"elliptic\"", "kind = \"study\"").replace("nodes = [81]", "nodes = [41]")
        + "\n[study]\nkind = \"sweep\"\nbase = \"elliptic\"\nparameter = \"problem.delta\"\nvalues = [1.0, -1.0, 0.5]\n";
    let dir = tempfile::tempdir().unwrap();
    let b = run(&parse_config(&text).unwrap(), dir.path());
    assert_eq!(b.status, ExitStatus::SolverFailure);
    assert_eq!(b.results()["failed"], serde_json::json!([1]));
    assert_manifest_complete(&b);
    let subs = b.results()["sub_runs"].as_array().unwrap();
    assert_eq!(subs[0]["status"], "success");
    assert_eq!(subs[1]["status"], "config-error");
    assert_eq!(subs[2]["status"], "success");
    assert!(dir.path().join("run_002/fields.csv").exists());
    assert!(!dir.path().join("run_001/fields.csv").exists());
}

fn grid_1d(n: usize) -> String {
    format!("\n[problem.grid]\nlower = [0.0]\nupper = [1.0]\nnodes = [{n}]\n")
}

fn run_text(text: &str) -> (tempfile::TempDir, gradvi::io::ResultBundle) {
    let dir = tempfile::tempdir().unwrap();
    let b = run(&parse_config(text).unwrap(), dir.path());
    assert_manifest_complete(&b);
    (dir, b)
}

#[test]
fn every_kind_runs() {
    let sep = "\n[problem.op]\nkind = \"separated\"\ngamma = \"energy\"\neta0 = 1.0\ndelta0 = 0.1\nphi = 1.0\n";
    let cases = [
        ("qvi-picard", format!("[problem]\nkind = \"qvi\"\ndelta = 1.0\nf = 1.0\n{sep}{}", grid_1d(21))),
        (
            "qvi-contraction",
            format!("[problem]\nkind = \"qvi\"\ndelta = 1.0\nf = 1.0\n[solver]\nmethod = \"contraction\"\n{sep}{}", grid_1d(21)),
        ),
        (
            "qvi-evolution",
            format!(
                "[problem]\nkind = \"qvi-evolution\"\ndelta = 1.0\nf = 0.5\nhorizon = 0.2\ntau = 0.1\n[solver]\nmethod = \"contraction-strong\"\n{sep}{}",
                grid_1d(21)
            ),
        ),
        (
            "transport",
            format!(
                "[problem]\nkind = \"transport\"\ndelta = 1.0\nf = 1.0\ng = 2.0\nbx = 0.5\nhorizon = 0.2\ntau = 0.1\n[solver]\nmethod = \"stationary\"\n{}",
                grid_1d(21)
            ),
        ),
        ("sandpile", format!("[problem]\nkind = \"sandpile\"\nk = 1.0\nf = 1.0\nhorizon = 1.0\ntau = 0.1\n{}", grid_1d(21))),
        (
            "dependence",
            format!(
                "[problem]\nkind = \"study\"\ndelta = 1.0\nf = 2.0\ng = 1.0\n{}\n[study]\nkind = \"dependence\"\nbase = \"elliptic\"\nmode = \"perturb-f\"\nvalues = [0.1, 0.05, 0.025]\n",
                grid_1d(41)
            ),
        ),
        (
            "stability",
            format!(
                "[problem]\nkind = \"study\"\ndelta = 1.0\nf = 1.0\ng = 2.0\nhorizon = 0.2\ntau = 0.1\n{}\n[study]\nkind = \"stability\"\nbase = \"parabolic\"\nmode = \"f\"\nvalues = [0.1, 0.05, 0.025]\n",
                grid_1d(21)
            ),
        ),
    ];
    for (name, text) in cases {
        let (_dir, b) = run_text(&text);
        assert_eq!(b.status, ExitStatus::Success, "{name}: {:?}", b.summary);
    }
}

#[test]
fn sandpile_reports_stabilization() {
    let (_dir, b) = run_text(&format!("[problem]\nkind = \"sandpile\"\nk = 1.0\nf = 1.0\nhorizon = 2.0\ntau = 0.1\n{}", grid_1d(41)));
    assert_eq!(b.results()["persists"], true);
    assert_eq!(b.number("monotonicity_violations"), Some(0.0));
    assert!(b.number("stationary_formula_gap").unwrap() <= 0.05);
    let (header, _) = read_fields(&b.dir.join("fields.csv")).unwrap();
    assert_eq!(header.join(","), "x,u,lambda,g,grad_norm,d,t");
}

#[test]
fn exit_codes() {
    use gradvi::Error;
    assert_eq!(ExitStatus::of_error(&Error::Config(vec![])).code(), 2);
    assert_eq!(ExitStatus::of_error(&Error::InvalidParameter(String::new())).code(), 2);
    assert_eq!(ExitStatus::of_error(&Error::Solver(String::new())).code(), 3);
    assert_eq!(ExitStatus::of_error(&Error::CertificateInconsistency(String::new())).code(), 4);
    assert_eq!(ExitStatus::Success.code(), 0);
}
