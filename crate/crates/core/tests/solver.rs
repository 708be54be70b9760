use tpf_core::grid::{residual, GridSpec, GridState, ScenarioInput};
mod common;

use common::{feasible_scenarios, instance};
use tpf_core::hydraulic::{loop_residual, plan, solve_hydraulic};
use tpf_core::instances::builtin_suite;
use tpf_core::numerics::{norm_inf, RngStream};
use tpf_core::solver::{Method, Phase, SolveError, SolveReport, Solver, SolverConfig};
use tpf_core::thermal::solve_thermal;

fn active_flows(spec: &GridSpec, state: &GridState) -> Vec<f64> {
    spec.active_edges()
        .iter()
        .map(|e| state.mdot[e.0])
        .collect()
}

fn assert_armijo(report: &SolveReport, gamma: f64) {
    for pair in report.trace.windows(2) {
        if pair[1].phase == Phase::Nr {
            let alpha = pair[1].step;
            assert!(pair[1].residual_norm <= (1.0 - gamma * alpha) * pair[0].residual_norm);
        }
    }
}

/// Decomposed iteration run down to the Newton residual level, so that the
/// methods can be compared entrywise.
fn tight() -> SolverConfig {
    SolverConfig {
        eps_da: 1e-16,
        max_iter_dc: 400,
        ..SolverConfig::default()
    }
}

#[test]
fn methods_agree_on_random_scenarios() {
    let cfg = tight();
    for inst in builtin_suite() {
        let (spec, dist) = inst.build().unwrap();
        let solver = Solver::new(&spec, cfg).unwrap();
        for input in feasible_scenarios(&solver, &dist, 17, 3) {
            let (xc, rc) = solver.solve_combined(&input).unwrap();
            if xc.mdot.iter().any(|m| m.abs() < 0.05) {
                // see near_stagnant_pipe_leaves_state_loosely_determined
                continue;
            }
            let (xd, _) = solver.solve_dc(&input).unwrap();
            let (xn, rn) = solver.solve(Method::Nr, &input).unwrap();
            assert!(norm_inf(&residual(&spec, &xc, &input).unwrap()) <= 1e-8);
            assert!(rc.converged && rn.converged);
            assert_armijo(&rc, cfg.gamma);
            assert_armijo(&rn, cfg.gamma);
            for (a, b) in xc.to_vector().iter().zip(xd.to_vector()) {
                assert!((a - b).abs() <= 1e-4, "{inst}: combined {a} vs dc {b}");
            }
            for (a, b) in xc.mdot.iter().zip(&xd.mdot) {
                assert!((a - b).abs() <= 1e-5, "{inst}: combined {a} vs dc {b} kg/s");
            }
            for (a, b) in xc.to_vector().iter().zip(xn.to_vector()) {
                assert!((a - b).abs() <= 1e-6, "{inst}: combined {a} vs nr {b}");
            }
        }
    }
}

#[test]
fn near_stagnant_pipe_leaves_state_loosely_determined() {
    // seed 17, draw 2 on C5: one ring pipe carries well under 0.01 kg/s.
    // The residual weights that pipe's temperatures by its flow, so two
    // states that both pass the 1e-8 certificate still differ visibly.
    let (spec, dist) = instance("C5_1");
    let solver = Solver::new(&spec, tight()).unwrap();
    let input = feasible_scenarios(&solver, &dist, 17, 2).pop().unwrap();
    let (xc, _) = solver.solve_combined(&input).unwrap();
    let (xd, _) = solver.solve_dc(&input).unwrap();
    assert!(xc.mdot.iter().any(|m| m.abs() < 0.01));
    assert!(norm_inf(&residual(&spec, &xc, &input).unwrap()) <= 1e-8);
    assert!(norm_inf(&residual(&spec, &xd, &input).unwrap()) <= 1e-8);
    let gap =
        xc.t.iter()
            .zip(&xd.t)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
    assert!(gap > 1e-3, "{gap}");
}

#[test]
fn combined_recovers_when_newton_stalls_near_zero_flow() {
    // seed 99, draw 3 on L16: one pipe carries about -0.005 kg/s, and Newton
    // started from the switch point settles on the wrong flow direction
    let (spec, dist) = instance("L16_1.6.11.16");
    let solver = Solver::new(&spec, SolverConfig::default()).unwrap();
    let mut restarted = 0;
    for input in feasible_scenarios(&solver, &dist, 99, 40) {
        let (x, report) = solver.solve_combined(&input).unwrap();
        assert!(norm_inf(&residual(&spec, &x, &input).unwrap()) <= 1e-8);
        restarted += report.restarts;
    }
    assert!(restarted > 0);
}

#[test]
fn decomposed_residual_decreases_from_cold_start() {
    let (spec, dist) = instance("L4_1.4");
    let solver = Solver::new(&spec, SolverConfig::default()).unwrap();
    let (_, report) = solver.solve_dc(&dist.mean_scenario()).unwrap();
    let norms: Vec<f64> = report.trace.iter().map(|t| t.residual_norm).collect();
    assert!(norms.len() >= 3);
    assert!(norms[1] < norms[0] && norms[2] < norms[1], "{norms:?}");
    assert!(report.converged && report.dc_iterations <= 100);
}

#[test]
fn decomposed_fails_when_supply_is_colder_than_return() {
    // Demands need T_inlet > 55 °C to take up power, but every supply feeds
    // in at 40 °C: no state with nonnegative flows satisfies the power
    // equations.
    let (spec, dist) = instance("L4_1.4");
    let solver = Solver::new(&spec, SolverConfig::default()).unwrap();
    let mut input = dist.mean_scenario();
    for (t, &e) in input.t_fi.iter_mut().zip(spec.feed_in_edges()) {
        if spec.is_supply_edge(e) || e == spec.slack_edge() {
            *t = 40.0;
        }
    }
    match solver.solve_dc(&input) {
        Err(SolveError::NotConverged { report, .. }) => {
            assert!(!report.converged);
            assert_eq!(report.dc_iterations, 100);
            assert!(report.clamp_activations > 0);
        }
        other => panic!("expected NotConverged, got {other:?}"),
    }
}

#[test]
fn newton_tail_is_quadratic_on_cycle() {
    let (spec, dist) = instance("C4_1");
    let solver = Solver::new(&spec, SolverConfig::default()).unwrap();
    let (_, report) = solver.solve(Method::Nr, &dist.mean_scenario()).unwrap();
    let norms: Vec<f64> = report.trace.iter().map(|t| t.residual_norm).collect();
    let nr_start = report
        .trace
        .iter()
        .position(|t| t.phase == Phase::Nr)
        .unwrap();
    assert!(nr_start >= 1);
    let tail = &norms[nr_start - 1..];
    assert!(tail.len() >= 2);
    for w in tail[tail.len().saturating_sub(3)..].windows(2) {
        assert!(w[1] <= 0.1 * w[0], "{tail:?}");
    }
}

#[test]
fn combined_uses_both_phases_on_largest_cycle() {
    let (spec, dist) = instance("C12_1.7");
    let solver = Solver::new(&spec, SolverConfig::default()).unwrap();
    let (_, report) = solver.solve_combined(&dist.mean_scenario()).unwrap();
    assert_eq!(report.method, Method::Combined);
    assert!(
        report.dc_iterations > 0 && report.nr_iterations > 0,
        "{report:?}"
    );
    assert!(report.final_residual_inf <= 1e-8);
}

#[test]
fn mass_flow_perturbation_stays_local() {
    let (spec, dist) = instance("L5_1.5");
    let input = dist.mean_scenario();
    let solver = Solver::new(&spec, SolverConfig::default()).unwrap();
    let (state, _) = solver.solve_combined(&input).unwrap();
    let base = residual(&spec, &state, &input).unwrap();
    let layout = spec.residual_layout();
    let e = spec.passive_edges()[1];
    let mut moved = state.clone();
    moved.mdot[e.0] += 0.1;
    let changed = residual(&spec, &moved, &input).unwrap();
    let edge = spec.edge(e);
    let pipe_index = spec.passive_edges().iter().position(|&p| p == e).unwrap();
    for (i, (a, b)) in base.iter().zip(&changed).enumerate() {
        if (a - b).abs() < 1e-12 {
            continue;
        }
        let ok = i == layout.mass + edge.tail.0
            || i == layout.mass + edge.head.0
            || i == layout.pressure + pipe_index
            || i == layout.mixing + edge.tail.0
            || i == layout.mixing + edge.head.0
            || i == layout.cooling + pipe_index;
        assert!(ok, "entry {i} changed unexpectedly");
    }
    assert!(
        (changed[layout.pressure + pipe_index] - base[layout.pressure + pipe_index]).abs() > 0.0
    );
}

#[test]
fn subproblem_solutions_match_full_solve() {
    let cfg = SolverConfig::default();
    for inst in builtin_suite() {
        let (spec, dist) = inst.build().unwrap();
        let input = dist.mean_scenario();
        let (state, _) = Solver::new(&spec, cfg)
            .unwrap()
            .solve_combined(&input)
            .unwrap();
        let plan = plan(&spec).unwrap();
        let hyd = solve_hydraulic(&spec, &plan, &active_flows(&spec, &state)).unwrap();
        for (a, b) in hyd.mdot.iter().zip(&state.mdot) {
            assert!((a - b).abs() <= 1e-8, "{inst}");
        }
        for (a, b) in hyd.p.iter().zip(&state.p) {
            assert!((a - b).abs() <= 1e-8, "{inst}");
        }
        let th = solve_thermal(&spec, &state.mdot, &input.t_fi).unwrap();
        for (a, b) in
            th.t.iter()
                .chain(&th.t_end)
                .zip(state.t.iter().chain(&state.t_end))
        {
            assert!((a - b).abs() <= 1e-8, "{inst}");
        }
    }
}

#[test]
fn cycle_loop_flow_balances_pressure() {
    let (spec, dist) = instance("C4_1");
    let plan = plan(&spec).unwrap();
    assert_eq!(plan.cycle_count(), 2);
    for side in &plan.sides {
        assert_eq!(side.cycles.len(), 1);
        assert_eq!(side.cycles[0].edges.len(), 4);
    }
    let (state, _) = Solver::new(&spec, SolverConfig::default())
        .unwrap()
        .solve_combined(&dist.mean_scenario())
        .unwrap();
    for side in &plan.sides {
        let (value, _) = loop_residual(&spec, &side.cycles[0], &state.mdot, 0.0);
        assert!(value.abs() <= 1e-9);
    }
}

#[test]
fn thermal_matches_combined_solver_on_ladder() {
    let (spec, dist) = instance("L4_1.4");
    let input: ScenarioInput = dist.mean_scenario();
    let (state, _) = Solver::new(&spec, SolverConfig::default())
        .unwrap()
        .solve_combined(&input)
        .unwrap();
    let th = solve_thermal(&spec, &state.mdot, &input.t_fi).unwrap();
    for (a, b) in th.t.iter().zip(&state.t) {
        assert!((a - b).abs() <= 1e-8);
    }
    // mixing bounds at every node with inflow
    for n in 0..spec.node_count() {
        assert!((10.0..=130.0).contains(&th.t[n]));
    }
}

#[test]
fn jacobian_matches_central_differences() {
    let (spec, dist) = instance("L4_1.4");
    let input = dist.mean_scenario();
    let solver = Solver::new(&spec, SolverConfig::default()).unwrap();
    let (state, _) = solver.solve_combined(&input).unwrap();
    let mut rng = RngStream::new(5);
    let mut x = state.to_vector();
    for v in &mut x {
        *v += 0.01 * rng.standard_normal();
    }
    let jac = solver.jacobian(&x, &input);
    let layout = spec.residual_layout();
    let dropped = layout.mass + spec.edge(spec.slack_edge()).tail.0;
    let rows: Vec<usize> = (0..layout.len).filter(|&i| i != dropped).collect();
    let f =
        |x: &[f64]| residual(&spec, &GridState::from_vector(&spec, x).unwrap(), &input).unwrap();
    for j in 0..x.len() {
        let h = 1e-5 * x[j].abs().max(1.0);
        let (mut xp, mut xm) = (x.clone(), x.clone());
        xp[j] += h;
        xm[j] -= h;
        let (fp, fm) = (f(&xp), f(&xm));
        for (r, &i) in rows.iter().enumerate() {
            let central = (fp[i] - fm[i]) / (2.0 * h);
            let forward = jac[(r, j)];
            assert!(
                (central - forward).abs() <= 1e-4 * central.abs().max(1.0),
                "d F{i} / d x{j}: forward {forward} central {central}"
            );
        }
    }
}
