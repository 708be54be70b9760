//! Thermal sub-problem: node and end-of-line temperatures for known flows.
//!
//! Temperatures propagate along the flow direction starting at the active and
//! slack edges, whose outlet temperatures are prescribed. A node is solved as
//! soon as every edge feeding it is solved; solving it in turn fixes the end
//! temperature of every pipe it feeds. Only nodes downstream of newly solved
//! edges are re-examined.

use thiserror::Error;

use crate::grid::{
    cooled_temperature, inflow, start_temperature, EdgeKind, GridSpec, NodeId, MDOT_EPS,
};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ThermalError {
    #[error("expected {expected} {what}, got {got}")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("propagation stalled with {unsolved} unsolved nodes (first: {first})")]
    StalledPropagation { unsolved: usize, first: NodeId },
}

/// Work counters of one propagation run.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct PropagationStats {
    /// Number of frontier generations processed.
    pub rounds: usize,
    /// Times any node's readiness was (re-)checked.
    pub node_examinations: usize,
    pub nodes_solved: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ThermalSolution {
    pub t: Vec<f64>,
    pub t_end: Vec<f64>,
    pub stats: PropagationStats,
}

/// Node temperatures and end-of-line temperatures for given edge flows and
/// feed-in temperatures (ordered like `spec.feed_in_edges()`).
///
/// Nodes without inflow settle at ambient temperature. Pipes with
/// `|mdot| < MDOT_EPS` deliver ambient temperature.
pub fn solve_thermal(
    spec: &GridSpec,
    mdot: &[f64],
    t_fi: &[f64],
) -> Result<ThermalSolution, ThermalError> {
    let (n_nodes, n_edges) = (spec.node_count(), spec.edge_count());
    if mdot.len() != n_edges {
        return Err(ThermalError::Dimension {
            what: "edge flows",
            expected: n_edges,
            got: mdot.len(),
        });
    }
    if t_fi.len() != spec.feed_in_edges().len() {
        return Err(ThermalError::Dimension {
            what: "feed-in temperatures",
            expected: spec.feed_in_edges().len(),
            got: t_fi.len(),
        });
    }
    let t_a = spec.ambient_temperature();

    let mut t = vec![t_a; n_nodes];
    let mut t_end = vec![t_a; n_edges];
    let mut edge_solved = vec![false; n_edges];
    for (&e, &temp) in spec.feed_in_edges().iter().zip(t_fi) {
        t_end[e.0] = temp;
        edge_solved[e.0] = true;
    }
    for &e in spec.passive_edges() {
        if mdot[e.0].abs() < MDOT_EPS {
            edge_solved[e.0] = true;
        }
    }

    // unsolved edges feeding each node
    let mut pending = vec![0usize; n_nodes];
    for (n, count) in pending.iter_mut().enumerate() {
        let node = NodeId(n);
        *count = spec
            .incident_edges(node)
            .iter()
            .filter(|&&e| !edge_solved[e.0] && inflow(spec.edge(e), node, mdot[e.0]) > 0.0)
            .count();
    }

    let mut stats = PropagationStats {
        node_examinations: n_nodes,
        ..Default::default()
    };
    let mut node_solved = vec![false; n_nodes];
    let mut frontier: Vec<NodeId> = (0..n_nodes)
        .filter(|&n| pending[n] == 0)
        .map(NodeId)
        .collect();

    while !frontier.is_empty() {
        stats.rounds += 1;
        frontier.sort_unstable();
        let mut next = Vec::new();
        for node in frontier {
            let (mut flow, mut energy) = (0.0, 0.0);
            for &e in spec.incident_edges(node) {
                let m = inflow(spec.edge(e), node, mdot[e.0]);
                if m > 0.0 {
                    flow += m;
                    energy += m * t_end[e.0];
                }
            }
            t[node.0] = if flow > 0.0 { energy / flow } else { t_a };
            node_solved[node.0] = true;
            stats.nodes_solved += 1;

            for &e in spec.incident_edges(node) {
                let edge = spec.edge(e);
                let EdgeKind::Passive { a, .. } = edge.kind else {
                    continue;
                };
                let m = mdot[e.0];
                let downstream = if edge.tail == node && m >= MDOT_EPS {
                    edge.head
                } else if edge.head == node && m <= -MDOT_EPS {
                    edge.tail
                } else {
                    continue;
                };
                t_end[e.0] = cooled_temperature(start_temperature(edge, &t, m), t_a, a, m);
                edge_solved[e.0] = true;
                stats.node_examinations += 1;
                pending[downstream.0] -= 1;
                if pending[downstream.0] == 0 {
                    next.push(downstream);
                }
            }
        }
        frontier = next;
    }

    if stats.nodes_solved < n_nodes {
        let first = NodeId(
            node_solved
                .iter()
                .position(|s| !s)
                .expect("some node is unsolved"),
        );
        return Err(ThermalError::StalledPropagation {
            unsolved: n_nodes - stats.nodes_solved,
            first,
        });
    }
    Ok(ThermalSolution { t, t_end, stats })
}
