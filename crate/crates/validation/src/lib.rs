//! Scenario fixtures shared by the acceptance checks.

use tpf_core::distributions::InputDistribution;
use tpf_core::grid::{
    Edge, EdgeKind, GridSpec, NodeId, ScenarioInput, Side, SlackPressure, DEFAULT_CP,
};
use tpf_core::hydraulic::{loop_residual, plan, HydraulicError};
use tpf_core::instances::{Family, InstanceSpec};
use tpf_core::numerics::RngStream;
use tpf_core::solver::{SolveError, Solver};

/// Draws scenarios, skipping those where the supplies alone would push the
/// slack flow backwards (no physical solution).
pub fn feasible_scenarios(
    solver: &Solver,
    dist: &InputDistribution,
    seed: u64,
    n: usize,
) -> Vec<ScenarioInput> {
    let mut rng = RngStream::new(seed);
    let mut draws = 0;
    let mut out = Vec::new();
    while out.len() < n {
        let input = dist.draw(&mut rng, &mut draws, u64::MAX).unwrap();
        if !matches!(
            solver.solve_combined(&input),
            Err(SolveError::Hydraulic(HydraulicError::NegativeSlackFlow(_)))
        ) {
            out.push(input);
        }
    }
    out
}

/// One random single-loop case: a ring of random size and pipe constant,
/// random tree flows and two loop flows `c1 < c2`. Returns the loop
/// residual and slope at both.
pub fn random_loop_case(rng: &mut RngStream) -> ((f64, f64), (f64, f64)) {
    let na = 3 + (rng.next_u64() % 10) as usize;
    let mut inst = InstanceSpec::new(Family::Cycle, na, &[1]).unwrap();
    inst.k = rng.uniform(0.001, 1.0);
    let spec = inst.grid().unwrap();
    let plan = plan(&spec).unwrap();
    let side = &plan.sides[(rng.next_u64() % 2) as usize];
    let cycle = &side.cycles[0];
    let tree: Vec<f64> = (0..spec.edge_count())
        .map(|_| rng.uniform(-5.0, 5.0))
        .collect();
    let c1 = rng.uniform(-10.0, 10.0);
    let c2 = c1 + rng.uniform(1e-6, 10.0);
    (
        loop_residual(&spec, cycle, &tree, c1),
        loop_residual(&spec, cycle, &tree, c2),
    )
}

/// Node 2 fed by lossless pipes from node 0 (first supply) and node 1
/// (slack).
pub fn mixing_grid() -> GridSpec {
    let pipe = EdgeKind::Passive { k: 0.05, a: 0.0 };
    GridSpec::new(
        vec![Side::Supply, Side::Supply, Side::Supply, Side::Return],
        vec![
            Edge {
                tail: NodeId(0),
                head: NodeId(2),
                kind: pipe,
            },
            Edge {
                tail: NodeId(1),
                head: NodeId(2),
                kind: pipe,
            },
            Edge {
                tail: NodeId(2),
                head: NodeId(3),
                kind: EdgeKind::Active { is_supply: false },
            },
            Edge {
                tail: NodeId(3),
                head: NodeId(0),
                kind: EdgeKind::Active { is_supply: true },
            },
            Edge {
                tail: NodeId(3),
                head: NodeId(1),
                kind: EdgeKind::Slack,
            },
        ],
        10.0,
        DEFAULT_CP,
        SlackPressure {
            tail: 3.5,
            head: 6.5,
        },
    )
    .unwrap()
}
