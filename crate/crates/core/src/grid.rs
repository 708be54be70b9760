//! Directed-graph model of a district heating grid and the residual of the
//! steady-state heat grid equations.
//!
//! Units are fixed: mass flow in kg/s, temperature in °C, pressure in bar,
//! heat power in kW. A grid state stacks node temperatures, edge mass flows,
//! node pressures and edge end-of-line temperatures, in that order.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Mass flows with magnitude below this are treated as stagnant.
pub const MDOT_EPS: f64 = 1e-9;

/// Default specific heat capacity of water in kJ/(kg·K).
pub const DEFAULT_CP: f64 = 4.18;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct NodeId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct EdgeId(pub usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

impl EdgeId {
    pub fn index(self) -> usize {
        self.0
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "n{}", self.0)
    }
}

impl fmt::Display for EdgeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "e{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    Supply,
    Return,
}

impl Side {
    pub fn other(self) -> Side {
        match self {
            Side::Supply => Side::Return,
            Side::Return => Side::Supply,
        }
    }
}

impl fmt::Display for Side {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Side::Supply => "supply",
            Side::Return => "return",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum EdgeKind {
    /// Pipe with pressure-loss coefficient `k` [bar·s²/kg²] and thermal-loss
    /// coefficient `a` [kg/s].
    Passive { k: f64, a: f64 },
    /// Consumer (`is_supply == false`) or producer with prescribed power.
    Active { is_supply: bool },
    /// The balancing producer fixing both pressure levels.
    Slack,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Edge {
    pub tail: NodeId,
    pub head: NodeId,
    pub kind: EdgeKind,
}

impl Edge {
    pub fn is_passive(&self) -> bool {
        matches!(self.kind, EdgeKind::Passive { .. })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SlackPressure {
    pub tail: f64,
    pub head: f64,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GridError {
    #[error("edge {edge} references node {node} but the grid has {nodes} nodes")]
    NodeOutOfRange {
        edge: usize,
        node: usize,
        nodes: usize,
    },
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("grid file: {0}")]
    Format(String),
    #[error("invalid grid: {}", join_violations(.0))]
    Invalid(Vec<Violation>),
}

fn join_violations(v: &[Violation]) -> String {
    v.iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join("; ")
}

/// A structural problem reported by [`validate`].
#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    MissingSlack,
    MultipleSlack(Vec<EdgeId>),
    SidesBridged(EdgeId),
    SideDisconnected { side: Side, components: usize },
    EmptySide(Side),
    IsolatedNode(NodeId),
    BadOrientation(EdgeId),
    BadPipeParameters(EdgeId),
    SelfLoop(EdgeId),
    BadGlobal(&'static str),
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::MissingSlack => write!(f, "missing slack edge"),
            Violation::MultipleSlack(ids) => write!(
                f,
                "multiple slack edges ({})",
                ids.iter()
                    .map(ToString::to_string)
                    .collect::<Vec<_>>()
                    .join(", ")
            ),
            Violation::SidesBridged(e) => write!(f, "sides bridged by passive edge {e}"),
            Violation::SideDisconnected { side, components } => {
                write!(f, "{side} side splits into {components} pipe components")
            }
            Violation::EmptySide(side) => write!(f, "{side} side has no nodes"),
            Violation::IsolatedNode(n) => write!(f, "node {n} has no incident edge"),
            Violation::BadOrientation(e) => write!(f, "edge {e} is oriented against its role"),
            Violation::BadPipeParameters(e) => write!(f, "pipe {e} needs k > 0 and a >= 0"),
            Violation::SelfLoop(e) => write!(f, "edge {e} is a self loop"),
            Violation::BadGlobal(what) => write!(f, "invalid global parameter: {what}"),
        }
    }
}

/// Immutable description of a district heating grid.
///
/// Construction only checks that edge endpoints exist; the structural
/// invariants (two pipe-connected sides, a single slack, edge orientation)
/// are checked by [`validate`].
#[derive(Debug, Clone, PartialEq)]
pub struct GridSpec {
    sides: Vec<Side>,
    edges: Vec<Edge>,
    ambient_temperature: f64,
    cp: f64,
    slack_pressure: SlackPressure,
    passive: Vec<EdgeId>,
    active: Vec<EdgeId>,
    feed_in: Vec<EdgeId>,
    slack: Vec<EdgeId>,
    incident: Vec<Vec<EdgeId>>,
}

impl GridSpec {
    pub fn new(
        sides: Vec<Side>,
        edges: Vec<Edge>,
        ambient_temperature: f64,
        cp: f64,
        slack_pressure: SlackPressure,
    ) -> Result<Self, GridError> {
        let nodes = sides.len();
        let mut incident = vec![Vec::new(); nodes];
        for (i, e) in edges.iter().enumerate() {
            for n in [e.tail, e.head] {
                if n.0 >= nodes {
                    return Err(GridError::NodeOutOfRange {
                        edge: i,
                        node: n.0,
                        nodes,
                    });
                }
            }
            incident[e.tail.0].push(EdgeId(i));
            if e.head != e.tail {
                incident[e.head.0].push(EdgeId(i));
            }
        }
        let ids = |pred: &dyn Fn(&EdgeKind) -> bool| -> Vec<EdgeId> {
            edges
                .iter()
                .enumerate()
                .filter(|(_, e)| pred(&e.kind))
                .map(|(i, _)| EdgeId(i))
                .collect()
        };
        let passive = ids(&|k| matches!(k, EdgeKind::Passive { .. }));
        let active = ids(&|k| matches!(k, EdgeKind::Active { .. }));
        let feed_in = ids(&|k| !matches!(k, EdgeKind::Passive { .. }));
        let slack = ids(&|k| matches!(k, EdgeKind::Slack));
        Ok(Self {
            sides,
            edges,
            ambient_temperature,
            cp,
            slack_pressure,
            passive,
            active,
            feed_in,
            slack,
            incident,
        })
    }

    pub fn node_count(&self) -> usize {
        self.sides.len()
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn side(&self, n: NodeId) -> Side {
        self.sides[n.0]
    }

    pub fn sides(&self) -> &[Side] {
        &self.sides
    }

    pub fn edge(&self, e: EdgeId) -> &Edge {
        &self.edges[e.0]
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn ambient_temperature(&self) -> f64 {
        self.ambient_temperature
    }

    pub fn cp(&self) -> f64 {
        self.cp
    }

    pub fn slack_pressure(&self) -> SlackPressure {
        self.slack_pressure
    }

    /// Pipes in ascending id order.
    pub fn passive_edges(&self) -> &[EdgeId] {
        &self.passive
    }

    /// Consumers and non-slack producers in ascending id order. Heat powers
    /// in a [`ScenarioInput`] follow this order.
    pub fn active_edges(&self) -> &[EdgeId] {
        &self.active
    }

    /// Active and slack edges in ascending id order. Feed-in temperatures in
    /// a [`ScenarioInput`] follow this order.
    pub fn feed_in_edges(&self) -> &[EdgeId] {
        &self.feed_in
    }

    /// The slack edge. Panics when the grid has none; call [`validate`] first.
    pub fn slack_edge(&self) -> EdgeId {
        self.slack[0]
    }

    pub fn incident_edges(&self, n: NodeId) -> &[EdgeId] {
        &self.incident[n.0]
    }

    pub fn is_supply_edge(&self, e: EdgeId) -> bool {
        matches!(self.edges[e.0].kind, EdgeKind::Active { is_supply: true })
    }

    /// Position of `e` within [`Self::active_edges`].
    pub fn active_index(&self, e: EdgeId) -> Option<usize> {
        self.active.binary_search(&e).ok()
    }

    /// Position of `e` within [`Self::feed_in_edges`].
    pub fn feed_in_index(&self, e: EdgeId) -> Option<usize> {
        self.feed_in.binary_search(&e).ok()
    }

    /// Length of the flat state vector `[T, mdot, p, T_end]`.
    pub fn state_len(&self) -> usize {
        2 * self.node_count() + 2 * self.edge_count()
    }

    pub fn residual_layout(&self) -> ResidualLayout {
        ResidualLayout::new(self)
    }
}

/// Checks every structural invariant and returns all violations found.
pub fn validate(spec: &GridSpec) -> Result<(), Vec<Violation>> {
    let mut out = Vec::new();

    if !(spec.cp > 0.0 && spec.cp.is_finite()) {
        out.push(Violation::BadGlobal("cp must be positive"));
    }
    if !spec.ambient_temperature.is_finite() {
        out.push(Violation::BadGlobal("ambient temperature must be finite"));
    }
    if !(spec.slack_pressure.tail.is_finite() && spec.slack_pressure.head.is_finite()) {
        out.push(Violation::BadGlobal("slack pressures must be finite"));
    }

    match spec.slack.len() {
        0 => out.push(Violation::MissingSlack),
        1 => {}
        _ => out.push(Violation::MultipleSlack(spec.slack.clone())),
    }

    for (n, inc) in spec.incident.iter().enumerate() {
        if inc.is_empty() {
            out.push(Violation::IsolatedNode(NodeId(n)));
        }
    }

    for (i, e) in spec.edges.iter().enumerate() {
        let id = EdgeId(i);
        if e.tail == e.head {
            out.push(Violation::SelfLoop(id));
            continue;
        }
        let (ts, hs) = (spec.side(e.tail), spec.side(e.head));
        match e.kind {
            EdgeKind::Passive { k, a } => {
                if !(k > 0.0 && k.is_finite() && a >= 0.0 && a.is_finite()) {
                    out.push(Violation::BadPipeParameters(id));
                }
                if ts != hs {
                    out.push(Violation::SidesBridged(id));
                }
            }
            EdgeKind::Active { is_supply: false } => {
                if !(ts == Side::Supply && hs == Side::Return) {
                    out.push(Violation::BadOrientation(id));
                }
            }
            EdgeKind::Active { is_supply: true } | EdgeKind::Slack => {
                if !(ts == Side::Return && hs == Side::Supply) {
                    out.push(Violation::BadOrientation(id));
                }
            }
        }
    }

    for side in [Side::Supply, Side::Return] {
        let components = pipe_components(spec, side);
        if components == 0 {
            out.push(Violation::EmptySide(side));
        } else if components > 1 {
            out.push(Violation::SideDisconnected { side, components });
        }
    }

    if out.is_empty() {
        Ok(())
    } else {
        Err(out)
    }
}

/// Number of weakly connected components among `side`'s nodes using only
/// pipes whose endpoints both lie on `side`.
fn pipe_components(spec: &GridSpec, side: Side) -> usize {
    let n = spec.node_count();
    let mut seen = vec![false; n];
    let mut components = 0;
    for start in 0..n {
        if seen[start] || spec.sides[start] != side {
            continue;
        }
        components += 1;
        seen[start] = true;
        let mut stack = vec![start];
        while let Some(u) = stack.pop() {
            for &e in &spec.incident[u] {
                let edge = &spec.edges[e.0];
                if !edge.is_passive() {
                    continue;
                }
                let v = if edge.tail.0 == u {
                    edge.head.0
                } else {
                    edge.tail.0
                };
                if !seen[v] && spec.sides[v] == side {
                    seen[v] = true;
                    stack.push(v);
                }
            }
        }
    }
    components
}

/// One full solution of the heat grid equations.
#[derive(Debug, Clone, PartialEq)]
pub struct GridState {
    /// Node temperatures [°C].
    pub t: Vec<f64>,
    /// Edge mass flows [kg/s], positive along the edge orientation.
    pub mdot: Vec<f64>,
    /// Node pressures [bar].
    pub p: Vec<f64>,
    /// Edge end-of-line temperatures [°C].
    pub t_end: Vec<f64>,
}

impl GridState {
    pub fn zeros(spec: &GridSpec) -> Self {
        let (v, e) = (spec.node_count(), spec.edge_count());
        Self {
            t: vec![0.0; v],
            mdot: vec![0.0; e],
            p: vec![0.0; v],
            t_end: vec![0.0; e],
        }
    }

    pub fn check_dims(&self, spec: &GridSpec) -> Result<(), GridError> {
        let (v, e) = (spec.node_count(), spec.edge_count());
        if self.t.len() != v || self.p.len() != v || self.mdot.len() != e || self.t_end.len() != e {
            return Err(GridError::Dimension(format!(
                "state sized (T {}, mdot {}, p {}, T_end {}) for a grid with {v} nodes and {e} edges",
                self.t.len(),
                self.mdot.len(),
                self.p.len(),
                self.t_end.len()
            )));
        }
        Ok(())
    }

    /// Flat `[T, mdot, p, T_end]` vector.
    pub fn to_vector(&self) -> Vec<f64> {
        let mut x = Vec::with_capacity(2 * (self.t.len() + self.mdot.len()));
        x.extend_from_slice(&self.t);
        x.extend_from_slice(&self.mdot);
        x.extend_from_slice(&self.p);
        x.extend_from_slice(&self.t_end);
        x
    }

    pub fn from_vector(spec: &GridSpec, x: &[f64]) -> Result<Self, GridError> {
        if x.len() != spec.state_len() {
            return Err(GridError::Dimension(format!(
                "state vector has {} entries, grid needs {}",
                x.len(),
                spec.state_len()
            )));
        }
        let v = StateView::split(spec, x);
        Ok(Self {
            t: v.t.to_vec(),
            mdot: v.mdot.to_vec(),
            p: v.p.to_vec(),
            t_end: v.t_end.to_vec(),
        })
    }

    pub fn view(&self) -> StateView<'_> {
        StateView {
            t: &self.t,
            mdot: &self.mdot,
            p: &self.p,
            t_end: &self.t_end,
        }
    }

    pub fn is_finite(&self) -> bool {
        [&self.t, &self.mdot, &self.p, &self.t_end]
            .iter()
            .all(|v| v.iter().all(|x| x.is_finite()))
    }
}

/// Borrowed state, either from a [`GridState`] or a flat vector.
#[derive(Debug, Clone, Copy)]
pub struct StateView<'a> {
    pub t: &'a [f64],
    pub mdot: &'a [f64],
    pub p: &'a [f64],
    pub t_end: &'a [f64],
}

impl<'a> StateView<'a> {
    /// Splits a flat vector of length `spec.state_len()`.
    pub fn split(spec: &GridSpec, x: &'a [f64]) -> Self {
        let (v, e) = (spec.node_count(), spec.edge_count());
        let (t, rest) = x.split_at(v);
        let (mdot, rest) = rest.split_at(e);
        let (p, t_end) = rest.split_at(v);
        Self { t, mdot, p, t_end }
    }
}

/// Heat powers and feed-in temperatures of one operating scenario.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioInput {
    /// Heat power per active edge [kW]; demands positive, supplies negative.
    pub q: Vec<f64>,
    /// Feed-in temperature per active and slack edge [°C].
    pub t_fi: Vec<f64>,
}

impl ScenarioInput {
    pub fn check_dims(&self, spec: &GridSpec) -> Result<(), GridError> {
        if self.q.len() != spec.active_edges().len()
            || self.t_fi.len() != spec.feed_in_edges().len()
        {
            return Err(GridError::Dimension(format!(
                "scenario has {} powers and {} feed-in temperatures, grid needs {} and {}",
                self.q.len(),
                self.t_fi.len(),
                spec.active_edges().len(),
                spec.feed_in_edges().len()
            )));
        }
        Ok(())
    }

    /// True when every power carries the sign its edge role requires.
    pub fn signs_consistent(&self, spec: &GridSpec) -> bool {
        spec.active_edges().iter().zip(&self.q).all(|(&e, &q)| {
            if spec.is_supply_edge(e) {
                q < 0.0
            } else {
                q > 0.0
            }
        })
    }
}

/// Offsets of each equation block inside the residual vector.
///
/// Blocks, in order: node mass balances (|V|), pipe pressure drops (|P|),
/// node mixing balances (|V|), pipe cooling (|P|), active end temperatures
/// (|A|), active power balances (|A|), slack end temperature (1) and slack
/// tail/head pressures (2). The first four blocks are the passive equations.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ResidualLayout {
    pub mass: usize,
    pub pressure: usize,
    pub mixing: usize,
    pub cooling: usize,
    pub active_t_end: usize,
    pub active_power: usize,
    pub slack: usize,
    pub len: usize,
    pub passive_len: usize,
}

impl ResidualLayout {
    fn new(spec: &GridSpec) -> Self {
        let v = spec.node_count();
        let p = spec.passive_edges().len();
        let a = spec.active_edges().len();
        let mass = 0;
        let pressure = mass + v;
        let mixing = pressure + p;
        let cooling = mixing + v;
        let active_t_end = cooling + p;
        let active_power = active_t_end + a;
        let slack = active_power + a;
        Self {
            mass,
            pressure,
            mixing,
            cooling,
            active_t_end,
            active_power,
            slack,
            len: slack + 3,
            passive_len: active_t_end,
        }
    }
}

/// Flow entering node `n` through edge `e` (zero if `e` drains `n` or is
/// stagnant).
#[inline]
pub(crate) fn inflow(edge: &Edge, n: NodeId, mdot: f64) -> f64 {
    if edge.head == n && mdot > MDOT_EPS {
        mdot
    } else if edge.tail == n && mdot < -MDOT_EPS {
        -mdot
    } else {
        0.0
    }
}

/// End-of-pipe temperature for a given start temperature.
#[inline]
pub fn cooled_temperature(t_start: f64, t_ambient: f64, a: f64, mdot: f64) -> f64 {
    let m = mdot.abs();
    let factor = if m < MDOT_EPS { 0.0 } else { (-a / m).exp() };
    (t_start - t_ambient) * factor + t_ambient
}

/// Temperature at the inlet of a passive edge given the flow direction.
#[inline]
pub(crate) fn start_temperature(edge: &Edge, t: &[f64], mdot: f64) -> f64 {
    if mdot >= 0.0 {
        t[edge.tail.0]
    } else {
        t[edge.head.0]
    }
}

/// Residual of the full heat grid equation system, see [`ResidualLayout`].
pub fn residual(
    spec: &GridSpec,
    state: &GridState,
    input: &ScenarioInput,
) -> Result<Vec<f64>, GridError> {
    state.check_dims(spec)?;
    input.check_dims(spec)?;
    let mut out = vec![0.0; spec.residual_layout().len];
    residual_into(spec, state.view(), input, &mut out);
    Ok(out)
}

/// Residual of the passive equations only (mass, pressure, mixing, cooling).
/// This is a prefix of [`residual`].
pub fn residual_passive(spec: &GridSpec, state: &GridState) -> Result<Vec<f64>, GridError> {
    state.check_dims(spec)?;
    let mut out = vec![0.0; spec.residual_layout().passive_len];
    passive_into(spec, state.view(), &mut out);
    Ok(out)
}

/// Unchecked residual evaluation into a preallocated buffer of length
/// `spec.residual_layout().len`.
pub fn residual_into(spec: &GridSpec, x: StateView<'_>, input: &ScenarioInput, out: &mut [f64]) {
    let layout = spec.residual_layout();
    passive_into(spec, x, &mut out[..layout.passive_len]);

    for (i, &e) in spec.active_edges().iter().enumerate() {
        let edge = spec.edge(e);
        let fi = spec
            .feed_in_index(e)
            .expect("active edge has a feed-in slot");
        out[layout.active_t_end + i] = x.t_end[e.0] - input.t_fi[fi];
        out[layout.active_power + i] =
            input.q[i] - x.mdot[e.0] * spec.cp() * (x.t[edge.tail.0] - x.t_end[e.0]);
    }

    let s = spec.slack_edge();
    let slack = spec.edge(s);
    let fi = spec
        .feed_in_index(s)
        .expect("slack edge has a feed-in slot");
    let ps = spec.slack_pressure();
    out[layout.slack] = x.t_end[s.0] - input.t_fi[fi];
    out[layout.slack + 1] = x.p[slack.tail.0] - ps.tail;
    out[layout.slack + 2] = x.p[slack.head.0] - ps.head;
}

fn passive_into(spec: &GridSpec, x: StateView<'_>, out: &mut [f64]) {
    let layout = spec.residual_layout();
    let v = spec.node_count();
    let t_a = spec.ambient_temperature();

    for n in 0..v {
        let node = NodeId(n);
        let mut balance = 0.0;
        let mut mixing = 0.0;
        for &e in spec.incident_edges(node) {
            let edge = spec.edge(e);
            let m = x.mdot[e.0];
            if edge.tail == node {
                balance += m;
            }
            if edge.head == node {
                balance -= m;
            }
            let inflow = inflow(edge, node, m);
            if inflow > 0.0 {
                mixing += inflow * (x.t[n] - x.t_end[e.0]);
            }
        }
        out[layout.mass + n] = balance;
        out[layout.mixing + n] = mixing;
    }

    for (i, &e) in spec.passive_edges().iter().enumerate() {
        let edge = spec.edge(e);
        let EdgeKind::Passive { k, a } = edge.kind else {
            unreachable!("passive list holds pipes only")
        };
        let m = x.mdot[e.0];
        out[layout.pressure + i] = x.p[edge.tail.0] - x.p[edge.head.0] - k * m * m.abs();
        let t_start = start_temperature(edge, x.t, m);
        out[layout.cooling + i] = x.t_end[e.0] - cooled_temperature(t_start, t_a, a, m);
    }
}

// ---------------------------------------------------------------------------
// File format

pub const GRID_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GridFile {
    version: u32,
    ambient_temperature: f64,
    cp: f64,
    slack_pressure: SlackPressure,
    nodes: Vec<NodeRecord>,
    edges: Vec<EdgeRecord>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NodeRecord {
    id: usize,
    side: Side,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
enum EdgeRole {
    Pipe,
    Demand,
    Supply,
    Slack,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EdgeRecord {
    id: usize,
    role: EdgeRole,
    tail: usize,
    head: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    k: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    a: Option<f64>,
}

impl GridSpec {
    /// Serializes to the versioned JSON grid format.
    pub fn to_json(&self) -> String {
        let file = GridFile {
            version: GRID_FORMAT_VERSION,
            ambient_temperature: self.ambient_temperature,
            cp: self.cp,
            slack_pressure: self.slack_pressure,
            nodes: self
                .sides
                .iter()
                .enumerate()
                .map(|(id, &side)| NodeRecord { id, side })
                .collect(),
            edges: self
                .edges
                .iter()
                .enumerate()
                .map(|(id, e)| {
                    let (role, k, a) = match e.kind {
                        EdgeKind::Passive { k, a } => (EdgeRole::Pipe, Some(k), Some(a)),
                        EdgeKind::Active { is_supply: false } => (EdgeRole::Demand, None, None),
                        EdgeKind::Active { is_supply: true } => (EdgeRole::Supply, None, None),
                        EdgeKind::Slack => (EdgeRole::Slack, None, None),
                    };
                    EdgeRecord {
                        id,
                        role,
                        tail: e.tail.0,
                        head: e.head.0,
                        k,
                        a,
                    }
                })
                .collect(),
        };
        serde_json::to_string_pretty(&file).expect("grid serialization cannot fail")
    }

    pub fn from_json(text: &str) -> Result<Self, GridError> {
        let file: GridFile =
            serde_json::from_str(text).map_err(|e| GridError::Format(e.to_string()))?;
        if file.version != GRID_FORMAT_VERSION {
            return Err(GridError::Format(format!(
                "unsupported version {} (expected {GRID_FORMAT_VERSION})",
                file.version
            )));
        }
        let mut sides = Vec::with_capacity(file.nodes.len());
        for (i, n) in file.nodes.iter().enumerate() {
            if n.id != i {
                return Err(GridError::Format(format!("node {i} carries id {}", n.id)));
            }
            sides.push(n.side);
        }
        let mut edges = Vec::with_capacity(file.edges.len());
        for (i, e) in file.edges.iter().enumerate() {
            if e.id != i {
                return Err(GridError::Format(format!("edge {i} carries id {}", e.id)));
            }
            let kind = match (e.role, e.k, e.a) {
                (EdgeRole::Pipe, Some(k), Some(a)) => EdgeKind::Passive { k, a },
                (EdgeRole::Pipe, _, _) => {
                    return Err(GridError::Format(format!("pipe {i} needs both k and a")));
                }
                (role, None, None) => match role {
                    EdgeRole::Demand => EdgeKind::Active { is_supply: false },
                    EdgeRole::Supply => EdgeKind::Active { is_supply: true },
                    _ => EdgeKind::Slack,
                },
                _ => {
                    return Err(GridError::Format(format!(
                        "edge {i}: only pipes carry k and a"
                    )))
                }
            };
            edges.push(Edge {
                tail: NodeId(e.tail),
                head: NodeId(e.head),
                kind,
            });
        }
        GridSpec::new(
            sides,
            edges,
            file.ambient_temperature,
            file.cp,
            file.slack_pressure,
        )
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn content_hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let digest = Sha256::digest(self.to_json().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}
