//! Ladder and cycle test grids.
//!
//! A grid with `na` active components has supply nodes `s_1..s_na` (ids
//! `0..na`) and return nodes `r_1..r_na` (ids `na..2na`). Position `j`
//! connects `s_j` and `r_j` through its active component. Ladders join
//! neighbouring positions with one supply and one return pipe; cycles also
//! close the ring between positions `na` and 1. The first listed supply
//! position hosts the slack.
//!
//! Instance names read `L16_1.6.11.16`: family letter, `na`, then the supply
//! positions separated by dots.

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::distributions::{DistributionError, FeedInBounds, InputDistribution};
use crate::grid::{Edge, EdgeKind, GridError, GridSpec, NodeId, Side, SlackPressure, DEFAULT_CP};
use crate::numerics::DenseMatrix;

pub const PIPE_K: f64 = 0.05;
pub const PIPE_A: f64 = 0.02;
pub const DEMAND_MEAN: f64 = 200.0;
/// Standard deviation relative to the mean, for demands and supplies.
pub const RELATIVE_STD: f64 = 0.2;
pub const CORRELATION_DECAY: f64 = 5.0;
pub const DEMAND_FEED_IN: f64 = 55.0;
pub const SUPPLY_FEED_IN_MIN: f64 = 90.0;
pub const SUPPLY_FEED_IN_MAX: f64 = 130.0;
pub const AMBIENT: f64 = 10.0;
pub const SLACK_PRESSURE: SlackPressure = SlackPressure {
    tail: 3.5,
    head: 6.5,
};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum InstanceError {
    #[error("instance needs at least two positions, got {0}")]
    TooSmall(usize),
    #[error("no supply positions given")]
    NoSupply,
    #[error("supply position {pos} outside 1..={na}")]
    PositionOutOfRange { pos: usize, na: usize },
    #[error("supply position {0} listed twice")]
    DuplicatePosition(usize),
    #[error("every position is a supply; a grid needs at least one demand")]
    NoDemand,
    #[error("cannot parse instance name {0:?}")]
    BadName(String),
    #[error("building grid: {0}")]
    Grid(String),
}

impl From<GridError> for InstanceError {
    fn from(e: GridError) -> Self {
        InstanceError::Grid(e.to_string())
    }
}

impl From<DistributionError> for InstanceError {
    fn from(e: DistributionError) -> Self {
        InstanceError::Grid(e.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Family {
    Ladder,
    Cycle,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InstanceSpec {
    family: Family,
    na: usize,
    supply_positions: Vec<usize>,
    pub k: f64,
    pub a: f64,
}

impl InstanceSpec {
    /// `supply_positions` are 1-based; the first one listed becomes the
    /// slack. The stored list keeps that first entry in front and sorts the
    /// rest.
    pub fn new(
        family: Family,
        na: usize,
        supply_positions: &[usize],
    ) -> Result<Self, InstanceError> {
        let min = if family == Family::Cycle { 3 } else { 2 };
        if na < min {
            return Err(InstanceError::TooSmall(na));
        }
        let (&slack, rest) = supply_positions
            .split_first()
            .ok_or(InstanceError::NoSupply)?;
        let mut seen = vec![false; na + 1];
        for &pos in supply_positions {
            if pos == 0 || pos > na {
                return Err(InstanceError::PositionOutOfRange { pos, na });
            }
            if seen[pos] {
                return Err(InstanceError::DuplicatePosition(pos));
            }
            seen[pos] = true;
        }
        if supply_positions.len() == na {
            return Err(InstanceError::NoDemand);
        }
        let mut positions = vec![slack];
        let mut rest = rest.to_vec();
        rest.sort_unstable();
        positions.extend(rest);
        Ok(Self {
            family,
            na,
            supply_positions: positions,
            k: PIPE_K,
            a: PIPE_A,
        })
    }

    pub fn family(&self) -> Family {
        self.family
    }

    pub fn na(&self) -> usize {
        self.na
    }

    pub fn supply_positions(&self) -> &[usize] {
        &self.supply_positions
    }

    pub fn slack_position(&self) -> usize {
        self.supply_positions[0]
    }

    pub fn is_supply(&self, pos: usize) -> bool {
        self.supply_positions.contains(&pos)
    }

    pub fn demand_positions(&self) -> Vec<usize> {
        (1..=self.na).filter(|&p| !self.is_supply(p)).collect()
    }

    /// Nominal mean power of every supply, slack included: total demand
    /// split evenly.
    pub fn nominal_supply_mean(&self) -> f64 {
        -DEMAND_MEAN * self.demand_positions().len() as f64 / self.supply_positions.len() as f64
    }

    /// Number of active-component steps between two positions.
    pub fn position_distance(&self, p: usize, q: usize) -> usize {
        let d = p.abs_diff(q);
        match self.family {
            Family::Ladder => d,
            Family::Cycle => d.min(self.na - d),
        }
    }

    fn pipe_count(&self) -> usize {
        match self.family {
            Family::Ladder => self.na - 1,
            Family::Cycle => self.na,
        }
    }

    /// Edge id of the active component at 1-based `pos`.
    pub fn active_edge_at(&self, pos: usize) -> usize {
        2 * self.pipe_count() + pos - 1
    }

    pub fn grid(&self) -> Result<GridSpec, InstanceError> {
        let na = self.na;
        let s = |pos: usize| NodeId(pos - 1);
        let r = |pos: usize| NodeId(na + pos - 1);
        let pipe = EdgeKind::Passive {
            k: self.k,
            a: self.a,
        };
        let hops: Vec<(usize, usize)> = (1..=self.pipe_count()).map(|i| (i, i % na + 1)).collect();

        let mut edges = Vec::with_capacity(2 * hops.len() + na);
        for &(i, j) in &hops {
            edges.push(Edge {
                tail: s(i),
                head: s(j),
                kind: pipe,
            });
        }
        for &(i, j) in &hops {
            edges.push(Edge {
                tail: r(i),
                head: r(j),
                kind: pipe,
            });
        }
        for pos in 1..=na {
            let edge = if pos == self.slack_position() {
                Edge {
                    tail: r(pos),
                    head: s(pos),
                    kind: EdgeKind::Slack,
                }
            } else if self.is_supply(pos) {
                Edge {
                    tail: r(pos),
                    head: s(pos),
                    kind: EdgeKind::Active { is_supply: true },
                }
            } else {
                Edge {
                    tail: s(pos),
                    head: r(pos),
                    kind: EdgeKind::Active { is_supply: false },
                }
            };
            edges.push(edge);
        }

        let mut sides = vec![Side::Supply; na];
        sides.extend(vec![Side::Return; na]);
        Ok(GridSpec::new(
            sides,
            edges,
            AMBIENT,
            DEFAULT_CP,
            SLACK_PRESSURE,
        )?)
    }

    /// Power distribution over the active (non-slack) positions in
    /// ascending position order, which is also ascending edge-id order.
    pub fn distribution(&self, spec: &GridSpec) -> Result<InputDistribution, InstanceError> {
        let active: Vec<usize> = (1..=self.na)
            .filter(|&p| p != self.slack_position())
            .collect();
        let supply_mean = self.nominal_supply_mean();
        let mu: Vec<f64> = active
            .iter()
            .map(|&p| {
                if self.is_supply(p) {
                    supply_mean
                } else {
                    DEMAND_MEAN
                }
            })
            .collect();
        let sd: Vec<f64> = mu.iter().map(|m| RELATIVE_STD * m.abs()).collect();

        let demands = self.demand_positions();
        let max_l = demands
            .iter()
            .flat_map(|&p| demands.iter().map(move |&q| (p, q)))
            .map(|(p, q)| self.position_distance(p, q))
            .max()
            .unwrap_or(0);
        let n = active.len();
        let mut cov = DenseMatrix::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                let (p, q) = (active[i], active[j]);
                let rho = if i == j {
                    1.0
                } else if self.is_supply(p) || self.is_supply(q) {
                    0.0
                } else {
                    (-CORRELATION_DECAY * self.position_distance(p, q) as f64 / max_l as f64).exp()
                };
                cov[(i, j)] = rho * sd[i] * sd[j];
            }
        }

        let feed_in: Vec<(f64, f64)> = spec
            .feed_in_edges()
            .iter()
            .map(|&e| {
                if spec.side(spec.edge(e).head) == Side::Supply {
                    (SUPPLY_FEED_IN_MIN, SUPPLY_FEED_IN_MAX)
                } else {
                    (DEMAND_FEED_IN, DEMAND_FEED_IN)
                }
            })
            .collect();
        let bounds = FeedInBounds::new(
            feed_in.iter().map(|b| b.0).collect(),
            feed_in.iter().map(|b| b.1).collect(),
        )?;
        Ok(InputDistribution::for_grid(spec, mu, cov, bounds)?)
    }

    pub fn build(&self) -> Result<(GridSpec, InputDistribution), InstanceError> {
        let spec = self.grid()?;
        let dist = self.distribution(&spec)?;
        Ok((spec, dist))
    }
}

impl fmt::Display for InstanceSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let letter = match self.family {
            Family::Ladder => 'L',
            Family::Cycle => 'C',
        };
        let positions: Vec<String> = self
            .supply_positions
            .iter()
            .map(|p| p.to_string())
            .collect();
        write!(f, "{letter}{}_{}", self.na, positions.join("."))
    }
}

impl FromStr for InstanceSpec {
    type Err = InstanceError;

    fn from_str(name: &str) -> Result<Self, Self::Err> {
        let bad = || InstanceError::BadName(name.to_string());
        let (head, tail) = name.split_once('_').ok_or_else(bad)?;
        let family = match head.chars().next() {
            Some('L') => Family::Ladder,
            Some('C') => Family::Cycle,
            _ => return Err(bad()),
        };
        let na: usize = head[1..].parse().map_err(|_| bad())?;
        let positions = tail
            .split('.')
            .map(|p| p.parse::<usize>().map_err(|_| bad()))
            .collect::<Result<Vec<_>, _>>()?;
        Self::new(family, na, &positions)
    }
}

/// The ten benchmark grids, smallest first within each family.
pub fn builtin_suite() -> Vec<InstanceSpec> {
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
        "C12_1.7",
    ]
    .iter()
    .map(|name| name.parse().expect("suite names are valid"))
    .collect()
}
