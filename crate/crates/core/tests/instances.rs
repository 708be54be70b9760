mod common;

use common::instance;
use tpf_core::hydraulic::plan;
use tpf_core::instances::{builtin_suite, Family, InstanceSpec};
use tpf_core::numerics::cholesky;
use tpf_core::solver::{Solver, SolverConfig};

#[test]
fn suite_names_round_trip() {
    let names: Vec<String> = builtin_suite().iter().map(|i| i.to_string()).collect();
    assert_eq!(
        names,
        [
            "L4_1.4",
            "L5_1.5",
            "L6_1.6",
            "L10_1.10",
            "L16_1.6.11.16",
            "C4_1",
            "C5_1",
            "C6_1",
            "C10_1",
            "C12_1.7"
        ]
    );
    for inst in builtin_suite() {
        assert_eq!(inst.to_string().parse::<InstanceSpec>().unwrap(), inst);
    }
}

#[test]
fn suite_covariances_are_positive_definite() {
    for inst in builtin_suite() {
        let (spec, dist) = inst.build().unwrap();
        let cov = dist.powers().cov();
        assert!(cov.is_symmetric(0.0), "{inst}");
        assert!(cholesky(cov).is_ok(), "{inst}");
        assert_eq!(cov.rows(), spec.active_edges().len());
    }
}

#[test]
fn correlation_decays_with_distance() {
    let inst: InstanceSpec = "C12_1.7".parse().unwrap();
    let (spec, dist) = inst.build().unwrap();
    let cov = dist.powers().cov();
    let pos_of = |i: usize| {
        (1..=inst.na())
            .find(|&p| inst.active_edge_at(p) == spec.active_edges()[i].0)
            .unwrap()
    };
    let n = cov.rows();
    let demand: Vec<bool> = (0..n).map(|i| !inst.is_supply(pos_of(i))).collect();
    for i in 0..n {
        for j in 0..n {
            if i != j && !(demand[i] && demand[j]) {
                assert_eq!(cov[(i, j)], 0.0);
            }
            for k in 0..n {
                if !(demand[i] && demand[j] && demand[k]) {
                    continue;
                }
                let (dij, dik) = (
                    inst.position_distance(pos_of(i), pos_of(j)),
                    inst.position_distance(pos_of(i), pos_of(k)),
                );
                let (rij, rik) = (
                    cov[(i, j)].abs() / (cov[(i, i)] * cov[(j, j)]).sqrt(),
                    cov[(i, k)].abs() / (cov[(i, i)] * cov[(k, k)]).sqrt(),
                );
                if dij < dik {
                    assert!(rij > rik, "{i} {j} {k}");
                }
            }
        }
    }
}

#[test]
fn mean_powers_balance() {
    for inst in builtin_suite() {
        let (spec, dist) = inst.build().unwrap();
        let mean = dist.powers().mean();
        let demand: f64 = mean.iter().filter(|&&q| q > 0.0).sum();
        let supply: f64 = mean.iter().filter(|&&q| q < 0.0).sum();
        // the slack takes the same share as each listed supply
        let share = demand / inst.supply_positions().len() as f64;
        assert!(
            (supply + share * (inst.supply_positions().len() - 1) as f64).abs() < 1e-9,
            "{inst}"
        );
        assert_eq!(mean.len(), spec.active_edges().len());
    }
}

#[test]
fn only_rings_have_loops() {
    for inst in builtin_suite() {
        let (spec, _) = inst.build().unwrap();
        let expected = if inst.family() == Family::Cycle { 2 } else { 0 };
        assert_eq!(plan(&spec).unwrap().cycle_count(), expected, "{inst}");
    }
}

#[test]
fn ring_mean_state_is_mirror_symmetric() {
    // C5_1 seen from the slack: positions 2 and 5, 3 and 4 mirror each other
    let inst: InstanceSpec = "C5_1".parse().unwrap();
    let (spec, dist) = instance("C5_1");
    let (state, _) = Solver::new(&spec, SolverConfig::default())
        .unwrap()
        .solve_combined(&dist.mean_scenario())
        .unwrap();
    for (p, q) in [(2, 5), (3, 4)] {
        let (a, b) = (inst.active_edge_at(p), inst.active_edge_at(q));
        assert!((state.mdot[a] - state.mdot[b]).abs() < 1e-8);
        let (ta, tb) = (
            spec.edge(tpf_core::grid::EdgeId(a)).tail,
            spec.edge(tpf_core::grid::EdgeId(b)).tail,
        );
        assert!((state.t[ta.0] - state.t[tb.0]).abs() < 1e-8);
    }
}

#[test]
fn rejects_malformed_names() {
    for bad in [
        "", "X4_1", "L4", "L4_", "L4_0", "L4_5", "L4_1.1", "C2_1", "L2_1.2", "L4_a",
    ] {
        assert!(bad.parse::<InstanceSpec>().is_err(), "{bad:?}");
    }
}
