//! Acceptance battery: one line per criterion with the measured quantities,
//! the runtime and its limit. Exits nonzero if any criterion fails.

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use gradvi::applications::{sandpile_simulate, sandpile_stationary, seeded_source, SandpileScenario};
use gradvi::elliptic::{
    center_node, complementarity_residual, dependence_study, equivalence_solve, solve_degenerate,
    solve_double_obstacle, solve_vi, solve_vi_oracle, DependenceMode, EllipticProblem, Tolerances,
};
use gradvi::evolution::{
    evolution_certificate, scale_forcing_for_ratio, solve_parabolic_qvi_contraction, solve_parabolic_vi,
    stability_study, EvolutionCertificateKind, ParabolicProblem, ParabolicQviProblem, StabilityMode, StepSettings,
    TimeDependent,
};
use gradvi::qvi::{contraction_certificate, scale_for_ratio, solve_qvi_contraction, QviProblem};
use gradvi::{BoundField, ConstraintOperator, GammaFunctional, Grid, PenaltyParams, ScalarField};

type Outcome = Result<(bool, String), String>;

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn l2(grid: &Grid, u: &ScalarField) -> f64 {
    gradvi::field_norm(u, 2.0, grid).unwrap()
}

fn counterexample_u(x: f64) -> f64 {
    if x.abs() >= 2.0 / 3.0 {
        1.0 - x * x
    } else {
        1.0 - x.abs().powi(3) - 4.0 / 27.0
    }
}

fn counterexample(n: usize) -> Result<EllipticProblem, String> {
    let grid = Grid::interval(-1.0, 1.0, n).map_err(err)?;
    let f = ScalarField::constant(&grid, 2.0);
    let g = BoundField::from_fn(&grid, |x| 3.0 * x[0] * x[0]).map_err(err)?;
    EllipticProblem::new(grid, 2.0, 1.0, f, g).map_err(err)
}

fn torsion(n: usize, beta: f64) -> Result<EllipticProblem, String> {
    let grid = Grid::interval(-1.0, 1.0, n).map_err(err)?;
    let f = ScalarField::constant(&grid, beta);
    let g = BoundField::constant(&grid, 1.0).map_err(err)?;
    EllipticProblem::new(grid, 2.0, 1.0, f, g).map_err(err)
}

fn c1_counterexample_vi() -> Outcome {
    let pr = counterexample(801)?;
    let h = pr.grid.h();
    let s = solve_vi(&pr, &PenaltyParams::default(), &Tolerances::default()).map_err(err)?;
    let e = (0..pr.grid.node_count())
        .map(|n| (s.u.0[n] - counterexample_u(pr.grid.node_coords(n)[0])).abs())
        .fold(0.0, f64::max);
    Ok((e <= 5.0 * h && s.converged, format!("h={h:.5} sup_err={e:.3e} limit={:.3e}", 5.0 * h)))
}

fn c2_double_obstacle() -> Outcome {
    let pr = counterexample(401)?;
    let grid = &pr.grid;
    let up = grid.sample_nodes(|x| 1.0 - x[0].abs().powi(3));
    let lo = up.scaled(-1.0);
    let ob = solve_double_obstacle(2.0, 1.0, &pr.f, &up, &lo, grid, 1e-10, 500).map_err(err)?;
    let ez = (0..grid.node_count())
        .map(|n| (ob.u.0[n] - (1.0 - grid.node_coords(n)[0].powi(2))).abs())
        .fold(0.0, f64::max);
    let vi = solve_vi(&pr, &PenaltyParams::default(), &Tolerances::default()).map_err(err)?;
    let c = center_node(grid);
    let gap = (ob.u.0[c] - vi.u.0[c]).abs();
    let cres = complementarity_residual(&vi.u, &pr).map_err(err)?;
    let pass = ez <= 0.01 && (gap - 4.0 / 27.0).abs() <= 0.01 && cres.sup >= 1.0;
    Ok((pass, format!("z_err={ez:.3e} gap0={gap:.5} (4/27={:.5}) compl_sup={:.4}", 4.0 / 27.0, cres.sup)))
}

fn c3_torsion_equivalence() -> Outcome {
    let pr = torsion(401, 2.0)?;
    let grid = &pr.grid;
    let h = grid.h();
    let (rep, sols) = equivalence_solve(&pr, &PenaltyParams::default(), &Tolerances::default()).map_err(err)?;
    let agree = rep.gap_vi_obstacle.max(rep.gap_vi_complementarity).max(rep.gap_obstacle_complementarity);
    let fb = (0..grid.node_count())
        .filter(|&n| !grid.is_boundary(n) && sols.obstacle.upper_active[n])
        .map(|n| grid.node_coords(n)[0].abs())
        .fold(f64::INFINITY, f64::min);
    let u0 = sols.vi.u.0[center_node(grid)];
    let pass = agree <= 5.0 * h && (fb - 0.5).abs() <= 2.0 * h && (u0 - 0.75).abs() <= 5.0 * h;
    Ok((pass, format!("max_gap={agree:.3e} (5h={:.3e}) free_boundary={fb:.4} u(0)={u0:.5}", 5.0 * h)))
}

fn c4_oracle_battery() -> Outcome {
    let mut worst = 0.0f64;
    let mut lines = Vec::new();
    let mut pass = true;
    for seed in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let p = [1.5, 2.0, 3.0][(seed % 3) as usize];
        let two_d = seed % 2 == 1;
        let grid = if two_d { Grid::unit_square(13) } else { Grid::interval(0.0, 1.0, 41) }.map_err(err)?;
        let (a, b, c) = (rng.gen_range(0.5..3.0), rng.gen_range(-1.0..1.0), rng.gen_range(0.2..0.8));
        let f = grid.sample_nodes(|x| a + b * (std::f64::consts::PI * x[0]).sin() * (1.0 + x[1]));
        let (g0, g1) = (rng.gen_range(0.05..0.2), rng.gen_range(0.0..0.3));
        let g = BoundField::from_fn(&grid, |x| g0 + g1 * ((x[0] - c).powi(2) + x[1] * x[1])).map_err(err)?;
        let pr = EllipticProblem::new(grid, p, 1.0, f, g).map_err(err)?;
        let tol = Tolerances::default();
        let s = solve_vi(&pr, &PenaltyParams::default(), &tol).map_err(err)?;
        let o = solve_vi_oracle(&pr, &tol).map_err(err)?;
        let d = s.u.max_abs_diff(&o.u);
        worst = worst.max(d);
        pass &= d <= 1e-4;
        lines.push(format!("{}D/p={p}:{d:.1e}", if two_d { 2 } else { 1 }));
    }
    Ok((pass, format!("worst={worst:.3e} [{}]", lines.join(" "))))
}

fn c5_dependence() -> Outcome {
    let mags = [1e-1, 1e-2, 1e-3, 1e-4];
    let mut pass = true;
    let mut out = Vec::new();
    for p in [2.0, 3.0] {
        let mut pr = torsion(201, 2.0)?;
        pr.p = p;
        let r = dependence_study(&pr, DependenceMode::PerturbG, &mags, &PenaltyParams::default(), &Tolerances::default())
            .map_err(err)?;
        let need = 1.0 / p.max(2.0) - 0.1;
        pass &= r.fitted_slope >= need && r.strictly_decreasing;
        out.push(format!("elliptic p={p}: slope={:.3} (>= {need:.3}) decreasing={}", r.fitted_slope, r.strictly_decreasing));
    }
    let grid = Grid::interval(-1.0, 1.0, 81).map_err(err)?;
    let pp = ParabolicProblem {
        f: TimeDependent::Constant(ScalarField::constant(&grid, 2.0)),
        g: TimeDependent::Constant(BoundField::constant(&grid, 1.0).map_err(err)?),
        u0: ScalarField::zeros(&grid),
        grid,
        p: 2.0,
        delta: 1.0,
        horizon: 1.0,
        tau: 0.05,
    };
    let r = stability_study(&pp, StabilityMode::G, &mags, &StepSettings::default()).map_err(err)?;
    pass &= r.l2_slope >= 0.4 && r.strictly_decreasing;
    out.push(format!("parabolic p=2: slope={:.3} (>= 0.4) decreasing={}", r.l2_slope, r.strictly_decreasing));
    Ok((pass, out.join("; ")))
}

fn energy_op(grid: &Grid, phi: f64) -> Result<ConstraintOperator, String> {
    Ok(ConstraintOperator::SeparatedNonlocal {
        gamma: GammaFunctional::Energy { eta0: 1.0, delta0: 1.0, p: 2.0 },
        phi: BoundField::constant(grid, phi).map_err(err)?,
    })
}

fn c6_certificates() -> Outcome {
    let grid = Grid::interval(-1.0, 1.0, 101).map_err(err)?;
    let base = QviProblem { grid: grid.clone(), p: 2.0, delta: 1.0, f: ScalarField::constant(&grid, 1.0), op: energy_op(&grid, 0.2)? };
    let s = scale_for_ratio(&base, 0.5, 16, 1).map_err(err)?;
    let pr = QviProblem { f: ScalarField::constant(&grid, s), ..base.clone() };
    let (_, tr, cert) = solve_qvi_contraction(&pr, &PenaltyParams::default(), &Tolerances::default(), 1e-10, 100, false)
        .map_err(err)?;
    let cert = cert.ok_or("missing certificate")?;
    let q_e = tr.max_q.unwrap_or(0.0);
    let big = QviProblem { f: ScalarField::constant(&grid, 10.0 * s), ..base };
    let flip_e = contraction_certificate(&big, 16, 1).map_err(err)?;
    let pass_e = tr.converged && cert.holds && (cert.ratio - 0.5).abs() < 1e-9 && q_e <= 0.55 && tr.self_consistency <= 1e-6 && !flip_e.holds;

    let tgrid = Grid::interval(-1.0, 1.0, 41).map_err(err)?;
    let mk = |fv: f64| -> Result<ParabolicQviProblem, String> {
        Ok(ParabolicQviProblem {
            grid: tgrid.clone(),
            p: 2.0,
            delta: 1.0,
            f: TimeDependent::Constant(ScalarField::constant(&tgrid, fv)),
            op: energy_op(&tgrid, 0.01)?,
            u0: ScalarField::zeros(&tgrid),
            horizon: 0.5,
            tau: 0.05,
        })
    };
    let kind = EvolutionCertificateKind::StrongRp;
    let st = scale_forcing_for_ratio(&mk(1.0)?, kind, 0.5).map_err(err)?;
    let (_, ttr, tcert) = solve_parabolic_qvi_contraction(&mk(st)?, kind, 1e-10, 50, false, &StepSettings::default()).map_err(err)?;
    let q_t = ttr.max_q.unwrap_or(0.0);
    let flip_t = evolution_certificate(&mk(10.0 * st)?, kind).map_err(err)?;
    let pass_t = ttr.converged && tcert.holds && q_t <= 0.55 && ttr.self_consistency <= 1e-6 && !flip_t.holds;
    Ok((
        pass_e && pass_t,
        format!(
            "elliptic: ratio={:.3} q={q_e:.4} sc={:.1e} x10_ratio={:.2} holds={}; evolution: ratio={:.3} q={q_t:.4} sc={:.1e} x10_ratio={:.2} holds={}",
            cert.ratio, tr.self_consistency, flip_e.ratio, flip_e.holds, tcert.ratio, ttr.self_consistency, flip_t.ratio, flip_t.holds
        ),
    ))
}

fn c7_sandpile() -> Outcome {
    let grid = Grid::unit_square(101).map_err(err)?;
    let h = grid.h();
    let sc = SandpileScenario::new(grid.clone(), 1.0, ScalarField::constant(&grid, 1.0), 3.0, 0.05);
    let (_, rep) = sandpile_simulate(&sc, &StepSettings::default()).map_err(err)?;
    let hit = rep.first_hit_time.unwrap_or(f64::INFINITY);
    let pass_a = rep.persists && hit < 3.0 && rep.monotonicity_violations == 0;
    let mut worst = 0.0f64;
    let cgrid = Grid::unit_square(31).map_err(err)?;
    for seed in [11u64, 12, 13] {
        let (f, support) = seeded_source(&cgrid, seed);
        let sc = SandpileScenario::new(cgrid.clone(), 1.0, f, 30.0, 0.5);
        let (sol, _) = sandpile_simulate(&sc, &StepSettings::default()).map_err(err)?;
        let w = sandpile_stationary(&sc.u0, &support, 1.0, &cgrid).map_err(err)?;
        worst = worst.max(sol.last().max_abs_diff(&w));
    }
    let pass_b = worst <= 3.0 * cgrid.h();
    Ok((
        pass_a && pass_b,
        format!(
            "h={h:.3} first_hit_t={hit:.2} persists={} final_gap={:.4} (2h={:.3}) mono_viol={} max_decrease={:.1e}; formula gap={worst:.4} (3h={:.4}, h={:.4})",
            rep.persists,
            rep.gap_history.last().unwrap(),
            2.0 * h,
            rep.monotonicity_violations,
            rep.max_decrease,
            3.0 * cgrid.h(),
            cgrid.h()
        ),
    ))
}

fn c8_delta_comparison() -> Outcome {
    let grid = Grid::unit_square(41).map_err(err)?;
    let (k, delta) = (1.0, 1e-3);
    let a = SandpileScenario::new(grid.clone(), k, ScalarField::constant(&grid, 1.0), 1.0, 0.05);
    let b = SandpileScenario { delta, ..a.clone() };
    let (sa, _) = sandpile_simulate(&a, &StepSettings::default()).map_err(err)?;
    let (sb, _) = sandpile_simulate(&b, &StepSettings::default()).map_err(err)?;
    let mut worst_ratio = 0.0f64;
    for (n, t) in sa.times.iter().enumerate().skip(1) {
        let d2 = l2(&grid, &sa.snapshots[n].sub(&sb.snapshots[n])).powi(2);
        worst_ratio = worst_ratio.max(d2 / (4.0 * delta * k * k * t * grid.measure()));
    }
    Ok((worst_ratio <= 1.0, format!("max ||u_d-u_0||^2 / (4 d k^2 |Q_t|) = {worst_ratio:.3e}")))
}

fn c9_multipliers() -> Outcome {
    let mut pass = true;
    let mut worst_gap = 0.0f64;
    let mut worst_low = f64::INFINITY;
    let cases: Vec<EllipticProblem> = vec![
        torsion(201, 2.0)?,
        torsion(201, 5.0)?,
        torsion(201, -3.0)?,
        {
            let grid = Grid::unit_square(31).map_err(err)?;
            EllipticProblem::new(grid.clone(), 2.0, 1.0, ScalarField::constant(&grid, 8.0), BoundField::constant(&grid, 1.0).map_err(err)?)
                .map_err(err)?
        },
    ];
    for pr in &cases {
        let s = solve_vi(pr, &PenaltyParams::default(), &Tolerances::default()).map_err(err)?;
        let low = s.lambda.iter().map(|l| l - pr.delta).fold(f64::INFINITY, f64::min);
        worst_low = worst_low.min(low);
        worst_gap = worst_gap.max(s.diagnostics.complementarity_gap);
        pass &= low >= -1e-12 && s.diagnostics.complementarity_gap <= 1e-4;
    }
    Ok((pass, format!("min(lambda-delta)={worst_low:.3e} max_gap={worst_gap:.3e} over {} cases", cases.len())))
}

fn c10_asymptotics() -> Outcome {
    let grid = Grid::interval(-1.0, 1.0, 81).map_err(err)?;
    let mut out = Vec::new();
    let mut pass = true;
    for delta in [1.0, 0.0] {
        let pp = ParabolicProblem {
            grid: grid.clone(),
            p: 2.0,
            delta,
            f: TimeDependent::Constant(ScalarField::constant(&grid, 2.0)),
            g: TimeDependent::Constant(BoundField::constant(&grid, 1.0).map_err(err)?),
            u0: ScalarField::zeros(&grid),
            horizon: 20.0,
            tau: 0.1,
        };
        let s = solve_parabolic_vi(&pp, &StepSettings::default()).map_err(err)?;
        let ell = EllipticProblem::new(grid.clone(), 2.0, delta, pp.f.at(0.0), pp.g.at(0.0)).map_err(err)?;
        let uinf = if delta > 0.0 {
            solve_vi(&ell, &PenaltyParams::default(), &Tolerances::default()).map_err(err)?.u
        } else {
            let deltas: Vec<f64> = (1..=8).map(|k| 10f64.powi(-k)).collect();
            solve_degenerate(&ell, &deltas, &PenaltyParams::default(), &Tolerances::default(), 1e-7).map_err(err)?.0.u
        };
        let d = l2(&grid, &s.last().sub(&uinf));
        pass &= d <= 1e-3;
        out.push(format!("delta={delta}: ||u(20)-u_inf||={d:.3e}"));
    }
    Ok((pass, out.join("; ")))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome, u64); 10] = [
        ("1 counterexample gradient VI", c1_counterexample_vi, 10),
        ("2 counterexample double obstacle", c2_double_obstacle, 10),
        ("3 torsion equivalence", c3_torsion_equivalence, 10),
        ("4 oracle equivalence battery", c4_oracle_battery, 300),
        ("5 continuous dependence exponents", c5_dependence, 300),
        ("6 contraction certificates", c6_certificates, 120),
        ("7 sandpile stabilization", c7_sandpile, 300),
        ("8 delta-comparison estimate", c8_delta_comparison, 120),
        ("9 multiplier complementarity", c9_multipliers, 60),
        ("10 asymptotics", c10_asymptotics, 120),
    ];
    let only: Option<String> = std::env::args().skip(1).find(|a| !a.starts_with('-'));
    let mut failed = 0;
    for (name, run, limit) in criteria {
        if let Some(o) = &only {
            if !name.starts_with(&format!("{o} ")) {
                continue;
            }
        }
        let start = Instant::now();
        let outcome = run();
        let elapsed = start.elapsed();
        let in_time = elapsed <= Duration::from_secs(limit);
        let (ok, detail) = match outcome {
            Ok((ok, d)) => (ok && in_time, d),
            Err(e) => (false, format!("error: {e}")),
        };
        if !ok {
            failed += 1;
        }
        println!(
            "criterion {name}: {} [{:.1}s / {limit}s] {detail}",
            if ok { "PASS" } else { "FAIL" },
            elapsed.as_secs_f64()
        );
    }
    if failed > 0 {
        println!("acceptance: {failed} criterion(s) failed");
        std::process::exit(1);
    }
    println!("acceptance: all criteria passed");
}
