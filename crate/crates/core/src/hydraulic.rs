//! Hydraulic sub-problem: all pipe flows and node pressures from the flows of
//! the active edges.
//!
//! Each side of the grid is a pipe network joined to the other side only by
//! active and slack edges, so mass conservation splits into one linear system
//! per side. A spanning tree per side yields a particular solution; a side
//! with one independent loop adds a circulating flow that is fixed by the
//! condition that pressure drops around the loop cancel. Pressures then follow
//! by walking each tree outwards from the slack set-points.

use thiserror::Error;

use crate::grid::{validate, EdgeId, EdgeKind, GridSpec, NodeId, Side, Violation};
use crate::numerics::{find_root_increasing, NumericsError};

/// Absolute tolerance [bar] on the loop pressure balance.
const LOOP_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum HydraulicError {
    #[error("{side} side has {cycles} independent loops, at most one is supported")]
    UnsupportedTopology { side: Side, cycles: usize },
    #[error("grid is invalid: {0:?}")]
    InvalidGrid(Vec<Violation>),
    #[error("expected {expected} active flows, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("non-finite active flow on edge {0}")]
    NonFiniteInput(EdgeId),
    #[error("negative flow {mdot:e} kg/s on active edge {edge}")]
    NegativeActiveFlow { edge: EdgeId, mdot: f64 },
    #[error("supplies exceed demands: slack flow would be {0:e} kg/s")]
    NegativeSlackFlow(f64),
    #[error("loop flow: {0}")]
    LoopSolve(#[from] NumericsError),
}

/// Independent loop of one side: chord plus the tree path closing it.
#[derive(Debug, Clone, PartialEq)]
pub struct Cycle {
    pub chord: EdgeId,
    /// Edges in traversal order with +1 when the edge points along the loop
    /// direction, -1 otherwise. The loop direction follows the chord.
    pub edges: Vec<(EdgeId, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SidePlan {
    pub side: Side,
    /// Slack endpoint on this side; pressures propagate from here.
    pub root: NodeId,
    /// Side nodes in breadth-first order starting at `root`.
    pub order: Vec<NodeId>,
    /// Tree edge towards the root, per node (indexed by global node id).
    pub parent: Vec<Option<EdgeId>>,
    pub cycles: Vec<Cycle>,
}

/// Precomputed decomposition of the hydraulic equations of a grid.
#[derive(Debug, Clone, PartialEq)]
pub struct HydraulicPlan {
    pub sides: [SidePlan; 2],
}

impl HydraulicPlan {
    pub fn side(&self, side: Side) -> &SidePlan {
        match side {
            Side::Supply => &self.sides[0],
            Side::Return => &self.sides[1],
        }
    }

    pub fn cycle_count(&self) -> usize {
        self.sides.iter().map(|s| s.cycles.len()).sum()
    }
}

/// Builds spanning trees and loop bases for both sides. The tree comes from a
/// breadth-first traversal that scans incident pipes in ascending id order.
pub fn plan(spec: &GridSpec) -> Result<HydraulicPlan, HydraulicError> {
    validate(spec).map_err(HydraulicError::InvalidGrid)?;
    let slack = spec.edge(spec.slack_edge());
    let supply = side_plan(spec, Side::Supply, slack.head)?;
    let ret = side_plan(spec, Side::Return, slack.tail)?;
    Ok(HydraulicPlan {
        sides: [supply, ret],
    })
}

fn side_plan(spec: &GridSpec, side: Side, root: NodeId) -> Result<SidePlan, HydraulicError> {
    let n = spec.node_count();
    let mut parent = vec![None; n];
    let mut visited = vec![false; n];
    let mut in_tree = vec![false; spec.edge_count()];
    let mut order = vec![root];
    visited[root.0] = true;

    let mut head = 0;
    while head < order.len() {
        let u = order[head];
        head += 1;
        let mut pipes: Vec<EdgeId> = spec
            .incident_edges(u)
            .iter()
            .copied()
            .filter(|&e| spec.edge(e).is_passive())
            .collect();
        pipes.sort_unstable();
        for e in pipes {
            let edge = spec.edge(e);
            let v = if edge.tail == u { edge.head } else { edge.tail };
            if !visited[v.0] {
                visited[v.0] = true;
                parent[v.0] = Some(e);
                in_tree[e.0] = true;
                order.push(v);
            }
        }
    }

    let chords: Vec<EdgeId> = spec
        .passive_edges()
        .iter()
        .copied()
        .filter(|&e| spec.side(spec.edge(e).tail) == side && !in_tree[e.0])
        .collect();
    if chords.len() > 1 {
        return Err(HydraulicError::UnsupportedTopology {
            side,
            cycles: chords.len(),
        });
    }

    let depth = {
        let mut d = vec![0usize; n];
        for &u in &order[1..] {
            let e = parent[u.0].expect("non-root tree node has a parent");
            d[u.0] = d[other_end(spec, e, u).0] + 1;
        }
        d
    };

    let cycles = chords
        .into_iter()
        .map(|chord| fundamental_cycle(spec, chord, &parent, &depth))
        .collect();

    Ok(SidePlan {
        side,
        root,
        order,
        parent,
        cycles,
    })
}

fn other_end(spec: &GridSpec, e: EdgeId, n: NodeId) -> NodeId {
    let edge = spec.edge(e);
    if edge.tail == n {
        edge.head
    } else {
        edge.tail
    }
}

/// Loop through `chord` (tail -> head) and back along the tree from head to
/// tail.
fn fundamental_cycle(
    spec: &GridSpec,
    chord: EdgeId,
    parent: &[Option<EdgeId>],
    depth: &[usize],
) -> Cycle {
    let c = spec.edge(chord);
    // walk both ends up to their lowest common ancestor
    let (mut a, mut b) = (c.head, c.tail);
    let mut from_head = Vec::new(); // steps head -> lca, as (edge, node stepped from)
    let mut from_tail = Vec::new(); // steps tail -> lca
    while a != b {
        if depth[a.0] >= depth[b.0] {
            let e = parent[a.0].expect("walk stays inside the tree");
            from_head.push((e, a));
            a = other_end(spec, e, a);
        } else {
            let e = parent[b.0].expect("walk stays inside the tree");
            from_tail.push((e, b));
            b = other_end(spec, e, b);
        }
    }

    let mut edges = vec![(chord, 1.0)];
    // head -> lca: traversing from `node` towards its parent
    for (e, node) in from_head {
        let sign = if spec.edge(e).tail == node { 1.0 } else { -1.0 };
        edges.push((e, sign));
    }
    // lca -> tail: reverse of the tail's upward walk
    for (e, node) in from_tail.into_iter().rev() {
        let sign = if spec.edge(e).head == node { 1.0 } else { -1.0 };
        edges.push((e, sign));
    }
    Cycle { chord, edges }
}

/// Signed sum of pressure drops around `cycle` when a loop flow `c` is
/// superimposed on the tree flows, together with its derivative in `c`.
pub fn loop_residual(spec: &GridSpec, cycle: &Cycle, mdot_tree: &[f64], c: f64) -> (f64, f64) {
    let mut value = 0.0;
    let mut slope = 0.0;
    for &(e, sign) in &cycle.edges {
        let EdgeKind::Passive { k, .. } = spec.edge(e).kind else {
            unreachable!("cycles contain pipes only")
        };
        let m = mdot_tree[e.0] + sign * c;
        value += sign * k * m * m.abs();
        slope += 2.0 * k * m.abs();
    }
    (value, slope)
}

#[derive(Debug, Clone, PartialEq)]
pub struct HydraulicSolution {
    /// Flow on every edge, slack included.
    pub mdot: Vec<f64>,
    /// Pressure at every node.
    pub p: Vec<f64>,
}

/// Solves mass conservation and pipe pressure drops for given active-edge
/// flows (ordered like `spec.active_edges()`).
///
/// The slack flow is the balance of the active flows; pressures at both slack
/// endpoints equal their set-points exactly.
pub fn solve_hydraulic(
    spec: &GridSpec,
    plan: &HydraulicPlan,
    mdot_active: &[f64],
) -> Result<HydraulicSolution, HydraulicError> {
    let active = spec.active_edges();
    if mdot_active.len() != active.len() {
        return Err(HydraulicError::Dimension {
            expected: active.len(),
            got: mdot_active.len(),
        });
    }
    let mut mdot = vec![0.0; spec.edge_count()];
    for (&e, &m) in active.iter().zip(mdot_active) {
        if !m.is_finite() {
            return Err(HydraulicError::NonFiniteInput(e));
        }
        if m < 0.0 {
            return Err(HydraulicError::NegativeActiveFlow { edge: e, mdot: m });
        }
        mdot[e.0] = m;
    }

    // Demands leave the supply side, supplies and the slack enter it.
    let slack = spec.slack_edge();
    let slack_flow: f64 = active
        .iter()
        .map(|&e| {
            if spec.is_supply_edge(e) {
                -mdot[e.0]
            } else {
                mdot[e.0]
            }
        })
        .sum();
    if slack_flow < 0.0 {
        return Err(HydraulicError::NegativeSlackFlow(slack_flow));
    }
    mdot[slack.0] = slack_flow;

    // Net flow each node must push into its pipes.
    let mut net = vec![0.0; spec.node_count()];
    for &e in spec.feed_in_edges() {
        let edge = spec.edge(e);
        net[edge.head.0] += mdot[e.0];
        net[edge.tail.0] -= mdot[e.0];
    }

    let mut p = vec![0.0; spec.node_count()];
    let set = spec.slack_pressure();
    for side_plan in &plan.sides {
        tree_flows(spec, side_plan, &mut net, &mut mdot);
        for cycle in &side_plan.cycles {
            apply_loop_flow(spec, cycle, &mut mdot)?;
        }
        let root_pressure = match side_plan.side {
            Side::Supply => set.head,
            Side::Return => set.tail,
        };
        propagate_pressure(spec, side_plan, root_pressure, &mdot, &mut p);
    }
    Ok(HydraulicSolution { mdot, p })
}

/// Particular solution with zero chord flow, by leaf elimination.
fn tree_flows(spec: &GridSpec, side: &SidePlan, net: &mut [f64], mdot: &mut [f64]) {
    for cycle in &side.cycles {
        mdot[cycle.chord.0] = 0.0;
    }
    for &u in side.order[1..].iter().rev() {
        let e = side.parent[u.0].expect("non-root tree node has a parent");
        let edge = spec.edge(e);
        // the parent edge must carry node u's surplus away from it
        if edge.tail == u {
            mdot[e.0] = net[u.0];
            net[edge.head.0] += mdot[e.0];
        } else {
            mdot[e.0] = -net[u.0];
            net[edge.tail.0] -= mdot[e.0];
        }
        net[u.0] = 0.0;
    }
}

fn apply_loop_flow(spec: &GridSpec, cycle: &Cycle, mdot: &mut [f64]) -> Result<(), HydraulicError> {
    let scale = cycle
        .edges
        .iter()
        .fold(0.0f64, |m, &(e, _)| m.max(mdot[e.0].abs()))
        + 1.0;
    let f = |c: f64| loop_residual(spec, cycle, mdot, c);
    let (mut lo, mut hi) = (-scale, scale);
    while f(lo).0 > 0.0 {
        lo *= 2.0;
    }
    while f(hi).0 < 0.0 {
        hi *= 2.0;
    }
    let c = find_root_increasing(f, lo, hi, LOOP_TOL)?;
    for &(e, sign) in &cycle.edges {
        mdot[e.0] += sign * c;
    }
    Ok(())
}

fn propagate_pressure(
    spec: &GridSpec,
    side: &SidePlan,
    root_pressure: f64,
    mdot: &[f64],
    p: &mut [f64],
) {
    p[side.root.0] = root_pressure;
    for &u in &side.order[1..] {
        let e = side.parent[u.0].expect("non-root tree node has a parent");
        let edge = spec.edge(e);
        let EdgeKind::Passive { k, .. } = edge.kind else {
            unreachable!("tree edges are pipes")
        };
        let drop = k * mdot[e.0] * mdot[e.0].abs();
        if edge.tail == u {
            p[u.0] = p[edge.head.0] + drop;
        } else {
            p[u.0] = p[edge.tail.0] - drop;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{Edge, SlackPressure, DEFAULT_CP};
    use crate::numerics::RngStream;
    use proptest::prelude::*;

    fn pipe(k: f64) -> EdgeKind {
        EdgeKind::Passive { k, a: 0.02 }
    }

    /// Ladder with supply nodes 0..3, return nodes 3..6. Slack at position 0,
    /// demands at positions 1 and 2.
    fn ladder3() -> GridSpec {
        let s = |i| NodeId(i);
        let r = |i: usize| NodeId(3 + i);
        GridSpec::new(
            vec![
                Side::Supply,
                Side::Supply,
                Side::Supply,
                Side::Return,
                Side::Return,
                Side::Return,
            ],
            vec![
                Edge {
                    tail: s(0),
                    head: s(1),
                    kind: pipe(0.05),
                },
                Edge {
                    tail: s(1),
                    head: s(2),
                    kind: pipe(0.05),
                },
                Edge {
                    tail: r(0),
                    head: r(1),
                    kind: pipe(0.05),
                },
                Edge {
                    tail: r(1),
                    head: r(2),
                    kind: pipe(0.05),
                },
                Edge {
                    tail: r(0),
                    head: s(0),
                    kind: EdgeKind::Slack,
                },
                Edge {
                    tail: s(1),
                    head: r(1),
                    kind: EdgeKind::Active { is_supply: false },
                },
                Edge {
                    tail: s(2),
                    head: r(2),
                    kind: EdgeKind::Active { is_supply: false },
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

    /// Same as [`ladder3`] plus a pipe closing each side into a ring.
    fn ring3() -> GridSpec {
        let base = ladder3();
        let mut edges = base.edges().to_vec();
        edges.push(Edge {
            tail: NodeId(2),
            head: NodeId(0),
            kind: pipe(0.08),
        });
        edges.push(Edge {
            tail: NodeId(5),
            head: NodeId(3),
            kind: pipe(0.08),
        });
        GridSpec::new(
            base.sides().to_vec(),
            edges,
            10.0,
            DEFAULT_CP,
            base.slack_pressure(),
        )
        .unwrap()
    }

    fn node_balance(spec: &GridSpec, mdot: &[f64]) -> Vec<f64> {
        let mut b = vec![0.0; spec.node_count()];
        for (i, e) in spec.edges().iter().enumerate() {
            b[e.tail.0] += mdot[i];
            b[e.head.0] -= mdot[i];
        }
        b
    }

    #[test]
    fn tree_grid_has_no_cycles() {
        let plan = plan(&ladder3()).unwrap();
        assert_eq!(plan.cycle_count(), 0);
        assert_eq!(plan.side(Side::Supply).order.len(), 3);
        assert_eq!(plan.side(Side::Return).root, NodeId(3));
    }

    #[test]
    fn ring_has_one_cycle_per_side() {
        let spec = ring3();
        let plan = plan(&spec).unwrap();
        for side in [Side::Supply, Side::Return] {
            let cycles = &plan.side(side).cycles;
            assert_eq!(cycles.len(), 1);
            assert_eq!(cycles[0].edges.len(), 3);
        }
        assert_eq!(super::plan(&spec).unwrap(), plan);
    }

    #[test]
    fn two_loops_per_side_unsupported() {
        let base = ring3();
        let mut edges = base.edges().to_vec();
        edges.push(Edge {
            tail: NodeId(0),
            head: NodeId(2),
            kind: pipe(0.1),
        });
        let spec = GridSpec::new(
            base.sides().to_vec(),
            edges,
            10.0,
            DEFAULT_CP,
            base.slack_pressure(),
        )
        .unwrap();
        assert_eq!(
            plan(&spec).unwrap_err(),
            HydraulicError::UnsupportedTopology {
                side: Side::Supply,
                cycles: 2
            }
        );
    }

    #[test]
    fn series_flows_and_pressures() {
        let spec = ladder3();
        let plan = plan(&spec).unwrap();
        let sol = solve_hydraulic(&spec, &plan, &[1.0, 0.5]).unwrap();
        assert_eq!(sol.mdot[4], 1.5); // slack
        assert_eq!(sol.mdot[0], 1.5);
        assert_eq!(sol.mdot[1], 0.5);
        // return pipes point away from the slack but carry the flow back to it
        assert_eq!(sol.mdot[2], -1.5);
        assert_eq!(sol.mdot[3], -0.5);
        assert_eq!(sol.p[0], 6.5);
        assert_eq!(sol.p[3], 3.5);
        assert!((sol.p[1] - (6.5 - 0.05 * 2.25)).abs() < 1e-15);
        assert!(node_balance(&spec, &sol.mdot)
            .iter()
            .all(|b| b.abs() < 1e-12));
    }

    #[test]
    fn doubling_active_flows_doubles_tree_flows() {
        let spec = ladder3();
        let plan = plan(&spec).unwrap();
        let a = solve_hydraulic(&spec, &plan, &[0.7, 1.3]).unwrap();
        let b = solve_hydraulic(&spec, &plan, &[1.4, 2.6]).unwrap();
        for (x, y) in a.mdot.iter().zip(&b.mdot) {
            assert_eq!(2.0 * x, *y);
        }
    }

    #[test]
    fn ring_balances_pressure_around_loop() {
        let spec = ring3();
        let plan = plan(&spec).unwrap();
        let sol = solve_hydraulic(&spec, &plan, &[1.2, 0.8]).unwrap();
        assert!(node_balance(&spec, &sol.mdot)
            .iter()
            .all(|b| b.abs() < 1e-12));
        for side in &plan.sides {
            for cycle in &side.cycles {
                assert!(loop_residual(&spec, cycle, &sol.mdot, 0.0).0.abs() < 1e-9);
            }
        }
        // every pipe obeys its pressure drop, chords included
        for &e in spec.passive_edges() {
            let edge = spec.edge(e);
            let EdgeKind::Passive { k, .. } = edge.kind else {
                unreachable!()
            };
            let m = sol.mdot[e.0];
            assert!((sol.p[edge.tail.0] - sol.p[edge.head.0] - k * m * m.abs()).abs() < 1e-9);
        }
    }

    #[test]
    fn input_errors() {
        let spec = ladder3();
        let plan = plan(&spec).unwrap();
        assert!(matches!(
            solve_hydraulic(&spec, &plan, &[1.0]),
            Err(HydraulicError::Dimension {
                expected: 2,
                got: 1
            })
        ));
        assert!(matches!(
            solve_hydraulic(&spec, &plan, &[f64::NAN, 1.0]),
            Err(HydraulicError::NonFiniteInput(_))
        ));
        assert!(matches!(
            solve_hydraulic(&spec, &plan, &[-1.0, 1.0]),
            Err(HydraulicError::NegativeActiveFlow { .. })
        ));
    }

    fn two_edge_loop() -> (GridSpec, Cycle) {
        // two parallel supply pipes 0 -> 1 with equal k
        let spec = GridSpec::new(
            vec![Side::Supply, Side::Supply, Side::Return],
            vec![
                Edge {
                    tail: NodeId(0),
                    head: NodeId(1),
                    kind: pipe(0.1),
                },
                Edge {
                    tail: NodeId(0),
                    head: NodeId(1),
                    kind: pipe(0.1),
                },
                Edge {
                    tail: NodeId(1),
                    head: NodeId(2),
                    kind: EdgeKind::Active { is_supply: false },
                },
                Edge {
                    tail: NodeId(2),
                    head: NodeId(0),
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
        .unwrap();
        let cycle = Cycle {
            chord: EdgeId(1),
            edges: vec![(EdgeId(1), 1.0), (EdgeId(0), -1.0)],
        };
        (spec, cycle)
    }

    #[test]
    fn loop_residual_symmetric_cases() {
        let (spec, cycle) = two_edge_loop();
        assert_eq!(loop_residual(&spec, &cycle, &[0.0; 4], 0.0).0, 0.0);

        // tree flows (+1, -1) relative to the loop direction: edge 1 carries
        // +1 forward, edge 0 (traversed backwards) carries +1 forward, so its
        // loop-relative flow is -1. The root sits where the magnitudes match.
        let tree = [1.0, 1.0, 0.0, 0.0];
        let c = find_root_increasing(|c| loop_residual(&spec, &cycle, &tree, c), -5.0, 5.0, 1e-14)
            .unwrap();
        let m0 = tree[0] - c;
        let m1 = tree[1] + c;
        assert!((m0.abs() - m1.abs()).abs() < 1e-12);
        assert!(c.abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn loop_residual_is_monotone(seed in any::<u64>()) {
            let mut rng = RngStream::new(seed);
            let (spec, cycle) = two_edge_loop();
            let tree = [rng.uniform(-5.0, 5.0), rng.uniform(-5.0, 5.0), 0.0, 0.0];
            let c1 = rng.uniform(-10.0, 10.0);
            let c2 = c1 + rng.uniform(1e-6, 10.0);
            prop_assert!(loop_residual(&spec, &cycle, &tree, c2).0 > loop_residual(&spec, &cycle, &tree, c1).0);
        }
    }
}
