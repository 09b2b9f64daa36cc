//! Network data model, canonical JSON input format, validation, and the
//! randomized test-case generator.
//!
//! A [`Network`] couples an electrical distribution feeder (buses + lines)
//! with a gas distribution network (nodes + pipes) through prosumers: every
//! bus hosts exactly one prosumer, and a subset of prosumers additionally owns
//! a gas node. All quantities are pre-scaled (demands in kW-equivalents, gas
//! flows in normalized units, pressures as squared pressure); the file format
//! carries no unit strings.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub mod casegen;
pub use casegen::{generate_case, CaseKnobs};

/// Current file format tag; `load_network` rejects anything else.
pub const FORMAT_TAG: &str = "iegds-v1";

#[derive(Debug, Error)]
pub enum NetworkError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    /// Malformed JSON (not valid JSON at all).
    #[error("parse error: {0}")]
    Parse(serde_json::Error),
    /// Valid JSON that does not match the schema (missing/unknown field, wrong type).
    #[error("schema error: {0}")]
    Schema(serde_json::Error),
    /// A declared invariant is violated; names the offending element.
    #[error("validation error: {element}: {message}")]
    Validation { element: String, message: String },
}

fn invalid(element: impl Into<String>, message: impl Into<String>) -> NetworkError {
    NetworkError::Validation {
        element: element.into(),
        message: message.into(),
    }
}

/// Finite and strictly positive.
fn pos(v: f64) -> bool {
    v.is_finite() && v > 0.0
}

/// Finite and nonnegative.
fn nonneg(v: f64) -> bool {
    v.is_finite() && v >= 0.0
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct Horizon {
    /// Number of time steps.
    #[serde(rename = "H")]
    pub h: usize,
    /// Sampling time in hours.
    #[serde(rename = "T_s")]
    pub t_s: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ElectricalBus {
    pub id: usize,
    /// Phase-angle bounds (rad). Bus 1 is the reference and must pin both to 0.
    pub theta_min: f64,
    pub theta_max: f64,
    /// Voltage-magnitude bounds (p.u.).
    pub v_min: f64,
    pub v_max: f64,
    /// Electrical demand profile, length H, elementwise nonnegative.
    pub d_e: Vec<f64>,
    /// Whether the transmission grid can inject power at this bus.
    #[serde(default)]
    pub has_transmission_tie: bool,
    /// Optional symmetric bound on the transmission injection; absent means free.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p_et_max: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct PowerLine {
    pub from: usize,
    pub to: usize,
    /// Susceptance magnitude.
    #[serde(rename = "B")]
    pub b: f64,
    /// Conductance magnitude.
    #[serde(rename = "G")]
    pub g: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct GasNode {
    pub id: usize,
    /// Squared-pressure bounds, 0 <= psi_min <= psi_max.
    pub psi_min: f64,
    pub psi_max: f64,
    /// Undispatchable gas demand profile, length H, elementwise nonnegative.
    pub d_g: Vec<f64>,
    /// Whether a gas source (well or transmission tie) feeds this node.
    #[serde(default)]
    pub is_source: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct GasPipe {
    pub from: usize,
    pub to: usize,
    /// Weymouth constant, > 0. The undirected pipe is stored once and expanded
    /// to both directed labels at assembly time.
    pub c_f: f64,
    /// Flow capacity, > 0.
    pub phi_max: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DgKind {
    #[default]
    None,
    GasFueled,
    NonGasFueled,
}

/// Storage degradation weight: either a scalar (meaning q * I) or a full
/// H x H positive-semidefinite matrix.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(untagged)]
pub enum StorageWeight {
    Scalar(f64),
    Matrix(Vec<Vec<f64>>),
}

impl StorageWeight {
    /// Dense H x H matrix view.
    pub fn matrix(&self, h: usize) -> Vec<Vec<f64>> {
        match self {
            StorageWeight::Scalar(q) => (0..h)
                .map(|i| (0..h).map(|j| if i == j { *q } else { 0.0 }).collect())
                .collect(),
            StorageWeight::Matrix(m) => m.clone(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct Storage {
    /// Energy capacity, > 0.
    pub e_cap: f64,
    /// Leakage coefficient, in (0, 1].
    pub eta_st: f64,
    /// Charging efficiency, in (0, 1].
    pub eta_ch: f64,
    /// Discharging efficiency, in (0, 1].
    pub eta_dh: f64,
    /// State-of-charge bounds and initial state, 0 <= x_min <= x_init <= x_max <= 1.
    pub x_min: f64,
    pub x_max: f64,
    pub x_init: f64,
    /// Maximum charging / discharging power, >= 0.
    pub p_ch_max: f64,
    pub p_dh_max: f64,
    /// Degradation weight (positive semidefinite).
    #[serde(rename = "Q_st")]
    pub q_st: StorageWeight,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct Prosumer {
    pub bus_id: usize,
    /// Gas node owned by this prosumer, if any. Prosumers with a gas-fueled DG
    /// must own one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gas_node_id: Option<usize>,
    #[serde(default)]
    pub dg_kind: DgKind,
    /// Generation bounds; required to satisfy 0 <= p_dg_min < p_dg_max when a DG exists.
    #[serde(default)]
    pub p_dg_min: f64,
    #[serde(default)]
    pub p_dg_max: f64,
    /// Non-gas generation cost coefficients (quadratic, linear).
    #[serde(default)]
    pub q_ngu: f64,
    #[serde(default)]
    pub l_ngu: f64,
    /// Gas-to-power conversion factor, > 0 for gas-fueled DGs.
    #[serde(default)]
    pub eta_gu: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub storage: Option<Storage>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct MarketParams {
    /// Electricity price coefficients, length H, elementwise nonnegative.
    pub q_e: Vec<f64>,
    pub l_e: Vec<f64>,
    /// Gas price coefficients; q_g must be elementwise positive.
    pub q_g: Vec<f64>,
    pub l_g: Vec<f64>,
    /// Aggregate electric trade bounds, sigma_e_max > sigma_e_min >= 0.
    pub sigma_e_min: f64,
    pub sigma_e_max: f64,
    /// Aggregate gas consumption bounds, sigma_g_max >= sigma_g_min >= 0.
    pub sigma_g_min: f64,
    pub sigma_g_max: f64,
}

/// Immutable description of the coupled networks, the prosumers' assets, and
/// the market parameters. Validated on load; safe to share across concurrent
/// solver runs.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct Network {
    pub format: String,
    pub horizon: Horizon,
    pub buses: Vec<ElectricalBus>,
    pub lines: Vec<PowerLine>,
    pub gas_nodes: Vec<GasNode>,
    pub pipes: Vec<GasPipe>,
    pub prosumers: Vec<Prosumer>,
    pub market: MarketParams,
}

/// Parses and validates a network file.
pub fn load_network(path: impl AsRef<Path>) -> Result<Network, NetworkError> {
    let text = std::fs::read_to_string(path)?;
    parse_network(&text)
}

/// Parses and validates a network from JSON text.
pub fn parse_network(text: &str) -> Result<Network, NetworkError> {
    let value: serde_json::Value = serde_json::from_str(text).map_err(NetworkError::Parse)?;
    let network: Network = serde_json::from_value(value).map_err(NetworkError::Schema)?;
    network.validate()?;
    Ok(network)
}

impl Network {
    pub fn n_buses(&self) -> usize {
        self.buses.len()
    }

    pub fn n_gas_nodes(&self) -> usize {
        self.gas_nodes.len()
    }

    pub fn horizon_len(&self) -> usize {
        self.horizon.h
    }

    /// Checks every declared invariant; idempotent on valid networks.
    pub fn validate(&self) -> Result<(), NetworkError> {
        if self.format != FORMAT_TAG {
            return Err(invalid(
                "format",
                format!("expected \"{FORMAT_TAG}\", got \"{}\"", self.format),
            ));
        }
        let h = self.horizon.h;
        if h < 1 {
            return Err(invalid("horizon", "H must be at least 1"));
        }
        if !pos(self.horizon.t_s) {
            return Err(invalid("horizon", "T_s must be positive"));
        }

        self.validate_buses(h)?;
        self.validate_lines()?;
        self.validate_gas(h)?;
        self.validate_prosumers()?;
        self.validate_market(h)?;

        // Connectivity of both graphs.
        let bus_pos = index_of(self.buses.iter().map(|b| b.id), "bus")?;
        let e_edges: Vec<(usize, usize)> = self
            .lines
            .iter()
            .map(|l| (bus_pos[&l.from], bus_pos[&l.to]))
            .collect();
        if !is_connected(self.buses.len(), &e_edges) {
            return Err(invalid("lines", "electrical graph is not connected"));
        }
        let gas_pos = index_of(self.gas_nodes.iter().map(|n| n.id), "gas node")?;
        let g_edges: Vec<(usize, usize)> = self
            .pipes
            .iter()
            .map(|p| (gas_pos[&p.from], gas_pos[&p.to]))
            .collect();
        if !is_connected(self.gas_nodes.len(), &g_edges) {
            return Err(invalid("pipes", "gas graph is not connected"));
        }
        Ok(())
    }

    fn validate_buses(&self, h: usize) -> Result<(), NetworkError> {
        if self.buses.is_empty() {
            return Err(invalid("buses", "at least one bus is required"));
        }
        let mut reference_seen = false;
        for bus in &self.buses {
            let el = format!("bus {}", bus.id);
            if bus.theta_min > bus.theta_max {
                return Err(invalid(&el, "theta_min > theta_max"));
            }
            if bus.v_min > bus.v_max {
                return Err(invalid(&el, "v_min > v_max"));
            }
            if bus.d_e.len() != h {
                return Err(invalid(&el, format!("d_e must have length H = {h}")));
            }
            if bus.d_e.iter().any(|d| *d < 0.0) {
                return Err(invalid(&el, "d_e must be elementwise nonnegative"));
            }
            if let Some(m) = bus.p_et_max {
                if m < 0.0 {
                    return Err(invalid(&el, "p_et_max must be nonnegative"));
                }
            }
            if bus.id == 1 {
                reference_seen = true;
                if bus.theta_min != 0.0 || bus.theta_max != 0.0 {
                    return Err(invalid(&el, "reference bus 1 must have theta_min = theta_max = 0"));
                }
            }
        }
        if !reference_seen {
            return Err(invalid("buses", "reference bus with id 1 is required"));
        }
        Ok(())
    }

    fn validate_lines(&self) -> Result<(), NetworkError> {
        let ids: BTreeSet<usize> = self.buses.iter().map(|b| b.id).collect();
        let mut seen = BTreeSet::new();
        for line in &self.lines {
            let el = format!("line ({},{})", line.from, line.to);
            if line.from == line.to {
                return Err(invalid(&el, "self-loop"));
            }
            if !ids.contains(&line.from) || !ids.contains(&line.to) {
                return Err(invalid(&el, "endpoint is not a declared bus"));
            }
            let key = (line.from.min(line.to), line.from.max(line.to));
            if !seen.insert(key) {
                return Err(invalid(&el, "duplicate line"));
            }
            if line.b < 0.0 || line.g < 0.0 {
                return Err(invalid(&el, "B and G must be nonnegative"));
            }
        }
        Ok(())
    }

    fn validate_gas(&self, h: usize) -> Result<(), NetworkError> {
        if self.gas_nodes.is_empty() {
            return Err(invalid("gas_nodes", "at least one gas node is required"));
        }
        for node in &self.gas_nodes {
            let el = format!("gas node {}", node.id);
            if !(nonneg(node.psi_min) && node.psi_min <= node.psi_max) {
                return Err(invalid(&el, "must satisfy 0 <= psi_min <= psi_max"));
            }
            if node.d_g.len() != h {
                return Err(invalid(&el, format!("d_g must have length H = {h}")));
            }
            if node.d_g.iter().any(|d| *d < 0.0) {
                return Err(invalid(&el, "d_g must be elementwise nonnegative"));
            }
        }
        if !self.gas_nodes.iter().any(|n| n.is_source) {
            return Err(invalid("gas_nodes", "at least one gas source is required"));
        }
        let ids: BTreeSet<usize> = self.gas_nodes.iter().map(|n| n.id).collect();
        let mut seen = BTreeSet::new();
        for pipe in &self.pipes {
            let el = format!("pipe ({},{})", pipe.from, pipe.to);
            if pipe.from == pipe.to {
                return Err(invalid(&el, "self-loop"));
            }
            if !ids.contains(&pipe.from) || !ids.contains(&pipe.to) {
                return Err(invalid(&el, "endpoint is not a declared gas node"));
            }
            let key = (pipe.from.min(pipe.to), pipe.from.max(pipe.to));
            if !seen.insert(key) {
                return Err(invalid(&el, "duplicate pipe"));
            }
            if !pos(pipe.c_f) {
                return Err(invalid(&el, "c_f must be positive"));
            }
            if !pos(pipe.phi_max) {
                return Err(invalid(&el, "phi_max must be positive"));
            }
        }
        Ok(())
    }

    fn validate_prosumers(&self) -> Result<(), NetworkError> {
        let h = self.horizon.h;
        let mut bus_claimed = BTreeSet::new();
        let mut gas_claimed = BTreeSet::new();
        let bus_ids: BTreeSet<usize> = self.buses.iter().map(|b| b.id).collect();
        let gas_ids: BTreeSet<usize> = self.gas_nodes.iter().map(|n| n.id).collect();
        for p in &self.prosumers {
            let el = format!("prosumer at bus {}", p.bus_id);
            if !bus_ids.contains(&p.bus_id) {
                return Err(invalid(&el, "bus_id is not a declared bus"));
            }
            if !bus_claimed.insert(p.bus_id) {
                return Err(invalid(&el, "bus owned by more than one prosumer"));
            }
            if let Some(g) = p.gas_node_id {
                if !gas_ids.contains(&g) {
                    return Err(invalid(&el, "gas_node_id is not a declared gas node"));
                }
                if !gas_claimed.insert(g) {
                    return Err(invalid(&el, format!("gas node {g} owned by more than one prosumer")));
                }
            }
            match p.dg_kind {
                DgKind::None => {}
                DgKind::GasFueled => {
                    if p.gas_node_id.is_none() {
                        return Err(invalid(&el, "gas-fueled DG requires a gas node"));
                    }
                    if !pos(p.eta_gu) {
                        return Err(invalid(&el, "eta_gu must be positive for a gas-fueled DG"));
                    }
                    if !(nonneg(p.p_dg_min) && p.p_dg_min < p.p_dg_max && p.p_dg_max.is_finite()) {
                        return Err(invalid(&el, "requires 0 <= p_dg_min < p_dg_max"));
                    }
                }
                DgKind::NonGasFueled => {
                    if !pos(p.q_ngu) {
                        return Err(invalid(&el, "q_ngu must be positive for a non-gas DG"));
                    }
                    if !(nonneg(p.p_dg_min) && p.p_dg_min < p.p_dg_max && p.p_dg_max.is_finite()) {
                        return Err(invalid(&el, "requires 0 <= p_dg_min < p_dg_max"));
                    }
                }
            }
            if let Some(st) = &p.storage {
                validate_storage(st, h, &el)?;
            }
        }
        if bus_claimed.len() != self.buses.len() {
            return Err(invalid(
                "prosumers",
                format!(
                    "every bus needs exactly one prosumer ({} buses, {} claimed)",
                    self.buses.len(),
                    bus_claimed.len()
                ),
            ));
        }
        if gas_claimed.len() != self.gas_nodes.len() {
            return Err(invalid(
                "prosumers",
                format!(
                    "prosumer gas nodes must cover all gas nodes ({} nodes, {} claimed)",
                    self.gas_nodes.len(),
                    gas_claimed.len()
                ),
            ));
        }
        Ok(())
    }

    fn validate_market(&self, h: usize) -> Result<(), NetworkError> {
        let m = &self.market;
        for (name, v) in [("q_e", &m.q_e), ("l_e", &m.l_e), ("q_g", &m.q_g), ("l_g", &m.l_g)] {
            if v.len() != h {
                return Err(invalid("market", format!("{name} must have length H = {h}")));
            }
        }
        if m.q_e.iter().any(|q| *q < 0.0) || m.l_e.iter().any(|l| *l < 0.0) {
            return Err(invalid("market", "q_e and l_e must be elementwise nonnegative"));
        }
        if !m.q_g.iter().all(|q| pos(*q)) {
            return Err(invalid("market", "q_g must be elementwise positive"));
        }
        if !(nonneg(m.sigma_e_min) && m.sigma_e_max > m.sigma_e_min) {
            return Err(invalid("market", "requires sigma_e_max > sigma_e_min >= 0"));
        }
        if !(nonneg(m.sigma_g_min) && m.sigma_g_max >= m.sigma_g_min) {
            return Err(invalid("market", "requires sigma_g_max >= sigma_g_min >= 0"));
        }
        Ok(())
    }

    /// Dense index view used by assembly; deterministic for a given network.
    pub fn index(&self) -> NetworkIndex {
        NetworkIndex::build(self)
    }

    /// Spanning-tree check on the gas graph. Errors on a disconnected graph,
    /// which signals internal misuse because connectivity is a load invariant.
    pub fn gas_is_spanning_tree(&self) -> Result<bool, NetworkError> {
        let pos = position_map(self.gas_nodes.iter().map(|n| n.id));
        let edges: Vec<(usize, usize)> = self
            .pipes
            .iter()
            .map(|p| (pos[&p.from], pos[&p.to]))
            .collect();
        is_spanning_tree(self.gas_nodes.len(), &edges)
    }
}

fn validate_storage(st: &Storage, h: usize, el: &str) -> Result<(), NetworkError> {
    if !pos(st.e_cap) {
        return Err(invalid(el, "storage e_cap must be positive"));
    }
    for (name, eta) in [("eta_st", st.eta_st), ("eta_ch", st.eta_ch), ("eta_dh", st.eta_dh)] {
        if !(pos(eta) && eta <= 1.0) {
            return Err(invalid(el, format!("storage {name} must be in (0, 1]")));
        }
    }
    if !(nonneg(st.x_min) && st.x_min <= st.x_init && st.x_init <= st.x_max && st.x_max <= 1.0) {
        return Err(invalid(el, "storage requires 0 <= x_min <= x_init <= x_max <= 1"));
    }
    if st.p_ch_max < 0.0 || st.p_dh_max < 0.0 {
        return Err(invalid(el, "storage power limits must be nonnegative"));
    }
    let q = st.q_st.matrix(h);
    if q.len() != h || q.iter().any(|row| row.len() != h) {
        return Err(invalid(el, format!("Q_st must be {h} x {h}")));
    }
    for i in 0..h {
        for j in 0..h {
            if (q[i][j] - q[j][i]).abs() > 1e-12 * (1.0 + q[i][j].abs()) {
                return Err(invalid(el, "Q_st must be symmetric"));
            }
        }
    }
    let m = nalgebra::DMatrix::from_fn(h, h, |i, j| 0.5 * (q[i][j] + q[j][i]));
    let eig = m.symmetric_eigenvalues();
    let scale = q
        .iter()
        .flatten()
        .fold(1.0_f64, |acc, v| acc.max(v.abs()));
    if eig.iter().any(|l| *l < -1e-9 * scale) {
        return Err(invalid(el, "Q_st must be positive semidefinite"));
    }
    Ok(())
}

fn index_of(
    ids: impl Iterator<Item = usize>,
    what: &str,
) -> Result<BTreeMap<usize, usize>, NetworkError> {
    let mut map = BTreeMap::new();
    for (pos, id) in ids.enumerate() {
        if map.insert(id, pos).is_some() {
            return Err(invalid(format!("{what} {id}"), "duplicate id"));
        }
    }
    Ok(map)
}

fn position_map(ids: impl Iterator<Item = usize>) -> BTreeMap<usize, usize> {
    ids.enumerate().map(|(pos, id)| (id, pos)).collect()
}

/// True iff the undirected graph with `n` nodes is connected. Edges are given
/// as position pairs; an empty graph with one node counts as connected.
pub fn is_connected(n: usize, edges: &[(usize, usize)]) -> bool {
    if n == 0 {
        return false;
    }
    let mut adj = vec![Vec::new(); n];
    for &(a, b) in edges {
        adj[a].push(b);
        adj[b].push(a);
    }
    let mut seen = vec![false; n];
    let mut stack = vec![0usize];
    seen[0] = true;
    let mut count = 1;
    while let Some(v) = stack.pop() {
        for &w in &adj[v] {
            if !seen[w] {
                seen[w] = true;
                count += 1;
                stack.push(w);
            }
        }
    }
    count == n
}

/// True iff a connected undirected graph is a spanning tree, i.e. its
/// undirected edge count equals node count - 1. Errors on disconnected input.
pub fn is_spanning_tree(n: usize, edges: &[(usize, usize)]) -> Result<bool, NetworkError> {
    if !is_connected(n, edges) {
        return Err(invalid("graph", "spanning-tree check requires a connected graph"));
    }
    Ok(edges.len() == n - 1)
}

/// A directed pipe label (i, j); each undirected pipe appears twice, once per
/// direction, owned by its tail node.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DirectedPipe {
    /// Gas-node positions (dense, file order).
    pub tail: usize,
    pub head: usize,
    pub c_f: f64,
    pub phi_max: f64,
    /// Position of the undirected pipe in the file.
    pub undirected: usize,
    /// Position of the opposite label in the directed list.
    pub reverse: usize,
}

/// Dense-position view of a validated network: id maps, adjacency, and the
/// directed gas-pipe expansion, all with deterministic ordering.
#[derive(Debug, Clone)]
pub struct NetworkIndex {
    pub bus_pos: BTreeMap<usize, usize>,
    pub gas_pos: BTreeMap<usize, usize>,
    /// Electrical neighbors per bus position, sorted by neighbor position,
    /// with the (B, G) parameters of the connecting line.
    pub e_neighbors: Vec<Vec<(usize, f64, f64)>>,
    /// Directed gas pipes; labels owned by a node are contiguous in
    /// tail-major, head-sorted order.
    pub directed_pipes: Vec<DirectedPipe>,
    /// Directed pipe indices owned by each gas node position.
    pub pipes_of_node: Vec<Vec<usize>>,
    /// Prosumer position per bus position (total, by validation).
    pub prosumer_of_bus: Vec<usize>,
    /// Gas-node position -> prosumer position.
    pub prosumer_of_gas: Vec<usize>,
    /// Prosumer position -> gas-node position, if the prosumer owns one.
    pub gas_of_prosumer: Vec<Option<usize>>,
}

impl NetworkIndex {
    fn build(net: &Network) -> Self {
        let bus_pos = position_map(net.buses.iter().map(|b| b.id));
        let gas_pos = position_map(net.gas_nodes.iter().map(|n| n.id));

        let mut e_neighbors = vec![Vec::new(); net.buses.len()];
        for line in &net.lines {
            let a = bus_pos[&line.from];
            let b = bus_pos[&line.to];
            e_neighbors[a].push((b, line.b, line.g));
            e_neighbors[b].push((a, line.b, line.g));
        }
        for list in &mut e_neighbors {
            list.sort_by_key(|(nbr, _, _)| *nbr);
        }

        // Directed pipes, grouped by tail node, heads sorted.
        let mut owned: Vec<Vec<(usize, f64, f64, usize)>> = vec![Vec::new(); net.gas_nodes.len()];
        for (u, pipe) in net.pipes.iter().enumerate() {
            let a = gas_pos[&pipe.from];
            let b = gas_pos[&pipe.to];
            owned[a].push((b, pipe.c_f, pipe.phi_max, u));
            owned[b].push((a, pipe.c_f, pipe.phi_max, u));
        }
        for list in &mut owned {
            list.sort_by_key(|(head, _, _, _)| *head);
        }
        let mut directed_pipes = Vec::new();
        let mut pipes_of_node = vec![Vec::new(); net.gas_nodes.len()];
        for (tail, list) in owned.iter().enumerate() {
            for &(head, c_f, phi_max, undirected) in list {
                pipes_of_node[tail].push(directed_pipes.len());
                directed_pipes.push(DirectedPipe {
                    tail,
                    head,
                    c_f,
                    phi_max,
                    undirected,
                    reverse: usize::MAX,
                });
            }
        }
        for i in 0..directed_pipes.len() {
            if directed_pipes[i].reverse != usize::MAX {
                continue;
            }
            let (t, hd, u) = (
                directed_pipes[i].tail,
                directed_pipes[i].head,
                directed_pipes[i].undirected,
            );
            let j = directed_pipes
                .iter()
                .position(|d| d.tail == hd && d.head == t && d.undirected == u)
                .expect("directed expansion always emits both labels");
            directed_pipes[i].reverse = j;
            directed_pipes[j].reverse = i;
        }

        let mut prosumer_of_bus = vec![usize::MAX; net.buses.len()];
        let mut prosumer_of_gas = vec![usize::MAX; net.gas_nodes.len()];
        let mut gas_of_prosumer = vec![None; net.prosumers.len()];
        for (k, p) in net.prosumers.iter().enumerate() {
            prosumer_of_bus[bus_pos[&p.bus_id]] = k;
            if let Some(g) = p.gas_node_id {
                prosumer_of_gas[gas_pos[&g]] = k;
                gas_of_prosumer[k] = Some(gas_pos[&g]);
            }
        }

        NetworkIndex {
            bus_pos,
            gas_pos,
            e_neighbors,
            directed_pipes,
            pipes_of_node,
            prosumer_of_bus,
            prosumer_of_gas,
            gas_of_prosumer,
        }
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    pub(crate) fn minimal_network() -> Network {
        let h = 1;
        Network {
            format: FORMAT_TAG.to_string(),
            horizon: Horizon { h, t_s: 1.0 },
            buses: vec![
                ElectricalBus {
                    id: 1,
                    theta_min: 0.0,
                    theta_max: 0.0,
                    v_min: 0.95,
                    v_max: 1.05,
                    d_e: vec![0.2],
                    has_transmission_tie: true,
                    p_et_max: None,
                },
                ElectricalBus {
                    id: 2,
                    theta_min: -0.5,
                    theta_max: 0.5,
                    v_min: 0.95,
                    v_max: 1.05,
                    d_e: vec![0.3],
                    has_transmission_tie: false,
                    p_et_max: None,
                },
            ],
            lines: vec![PowerLine { from: 1, to: 2, b: 20.0, g: 10.0 }],
            gas_nodes: vec![
                GasNode { id: 1, psi_min: 0.0, psi_max: 100.0, d_g: vec![0.1], is_source: true },
                GasNode { id: 2, psi_min: 0.0, psi_max: 100.0, d_g: vec![0.2], is_source: false },
            ],
            pipes: vec![GasPipe { from: 1, to: 2, c_f: 1.0, phi_max: 3.0 }],
            prosumers: vec![
                Prosumer {
                    bus_id: 1,
                    gas_node_id: Some(1),
                    dg_kind: DgKind::GasFueled,
                    p_dg_min: 0.0,
                    p_dg_max: 2.0,
                    q_ngu: 0.0,
                    l_ngu: 0.0,
                    eta_gu: 1.2,
                    storage: None,
                },
                Prosumer {
                    bus_id: 2,
                    gas_node_id: Some(2),
                    dg_kind: DgKind::None,
                    p_dg_min: 0.0,
                    p_dg_max: 0.0,
                    q_ngu: 0.0,
                    l_ngu: 0.0,
                    eta_gu: 0.0,
                    storage: None,
                },
            ],
            market: MarketParams {
                q_e: vec![0.1],
                l_e: vec![1.0],
                q_g: vec![0.05],
                l_g: vec![0.5],
                sigma_e_min: 0.0,
                sigma_e_max: 20.0,
                sigma_g_min: 0.0,
                sigma_g_max: 20.0,
            },
        }
    }

    #[test]
    fn minimal_round_trip() {
        let net = minimal_network();
        net.validate().unwrap();
        let text = serde_json::to_string(&net).unwrap();
        let back = parse_network(&text).unwrap();
        assert_eq!(back.n_buses(), 2);
        assert_eq!(back.horizon_len(), 1);
        assert_eq!(back, net);
        // Re-validation is idempotent.
        back.validate().unwrap();
    }

    #[test]
    fn reversed_bounds_name_the_bus() {
        let mut net = minimal_network();
        net.buses.push(ElectricalBus {
            id: 3,
            theta_min: 0.5,
            theta_max: -0.5,
            v_min: 0.95,
            v_max: 1.05,
            d_e: vec![0.0],
            has_transmission_tie: false,
            p_et_max: None,
        });
        let err = net.validate().unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("bus 3"), "should name bus 3: {msg}");
        assert!(msg.contains("theta_min"), "{msg}");
    }

    #[test]
    fn malformed_json_is_a_parse_error() {
        match parse_network("{not json") {
            Err(NetworkError::Parse(_)) => {}
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn unknown_field_is_a_schema_error_naming_the_field() {
        let mut v = serde_json::to_value(minimal_network()).unwrap();
        v["bogus_field"] = serde_json::json!(1);
        match parse_network(&v.to_string()) {
            Err(NetworkError::Schema(e)) => assert!(e.to_string().contains("bogus_field")),
            other => panic!("expected schema error, got {other:?}"),
        }
    }

    #[test]
    fn missing_field_is_a_schema_error_naming_the_field() {
        let mut v = serde_json::to_value(minimal_network()).unwrap();
        v.as_object_mut().unwrap().remove("market");
        match parse_network(&v.to_string()) {
            Err(NetworkError::Schema(e)) => assert!(e.to_string().contains("market")),
            other => panic!("expected schema error, got {other:?}"),
        }
    }

    #[test]
    fn spanning_tree_on_paths_and_cycles() {
        // 3-node path is a tree.
        assert!(is_spanning_tree(3, &[(0, 1), (1, 2)]).unwrap());
        // 3-node triangle has one cycle.
        assert!(!is_spanning_tree(3, &[(0, 1), (1, 2), (2, 0)]).unwrap());
        // Disconnected input is misuse.
        assert!(is_spanning_tree(3, &[(0, 1)]).is_err());
    }

    // Cycle-detection oracle: DFS that reports a back edge.
    fn has_cycle(n: usize, edges: &[(usize, usize)]) -> bool {
        let mut adj = vec![Vec::new(); n];
        for (k, &(a, b)) in edges.iter().enumerate() {
            adj[a].push((b, k));
            adj[b].push((a, k));
        }
        let mut seen = vec![false; n];
        let mut stack: Vec<(usize, usize)> = vec![(0, usize::MAX)];
        seen[0] = true;
        while let Some((v, via)) = stack.pop() {
            for &(w, k) in &adj[v] {
                if k == via {
                    continue;
                }
                if seen[w] {
                    return true;
                }
                seen[w] = true;
                stack.push((w, k));
            }
        }
        false
    }

    #[test]
    fn spanning_tree_matches_cycle_oracle_exhaustively() {
        // All labeled graphs on up to 6 nodes, restricted to connected ones.
        for n in 1..=6usize {
            let all_pairs: Vec<(usize, usize)> =
                (0..n).flat_map(|a| (a + 1..n).map(move |b| (a, b))).collect();
            let m = all_pairs.len();
            for mask in 0u32..(1 << m) {
                let edges: Vec<(usize, usize)> = (0..m)
                    .filter(|k| mask & (1 << k) != 0)
                    .map(|k| all_pairs[k])
                    .collect();
                if !is_connected(n, &edges) {
                    continue;
                }
                let tree = is_spanning_tree(n, &edges).unwrap();
                assert_eq!(tree, edges.len() == n - 1);
                assert_eq!(tree, !has_cycle(n, &edges));
            }
        }
    }

    #[test]
    fn spanning_tree_matches_cycle_oracle_on_sampled_larger_graphs() {
        use rand::Rng;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        for n in 7..=8usize {
            let all_pairs: Vec<(usize, usize)> =
                (0..n).flat_map(|a| (a + 1..n).map(move |b| (a, b))).collect();
            let mut checked = 0;
            while checked < 400 {
                // Alternate dense random subsets with random trees plus an
                // optional chord, so both outcomes appear in the sample.
                let edges: Vec<(usize, usize)> = if checked % 2 == 0 {
                    all_pairs.iter().copied().filter(|_| rng.gen_bool(0.35)).collect()
                } else {
                    let mut tree: Vec<(usize, usize)> =
                        (1..n).map(|v| (rng.gen_range(0..v), v)).collect();
                    if rng.gen_bool(0.5) {
                        let extra = all_pairs[rng.gen_range(0..all_pairs.len())];
                        if !tree.contains(&extra) {
                            tree.push(extra);
                        }
                    }
                    tree
                };
                if !is_connected(n, &edges) {
                    continue;
                }
                checked += 1;
                let tree = is_spanning_tree(n, &edges).unwrap();
                assert_eq!(tree, edges.len() == n - 1);
                assert_eq!(tree, !has_cycle(n, &edges));
            }
        }
    }

    #[test]
    fn directed_pipe_expansion_is_consistent() {
        let net = minimal_network();
        let idx = net.index();
        assert_eq!(idx.directed_pipes.len(), 2);
        for (k, d) in idx.directed_pipes.iter().enumerate() {
            let r = &idx.directed_pipes[d.reverse];
            assert_eq!(r.reverse, k);
            assert_eq!((r.tail, r.head), (d.head, d.tail));
        }
    }

    #[test]
    fn gas_fueled_without_gas_node_is_rejected() {
        let mut net = minimal_network();
        net.prosumers[0].gas_node_id = None;
        let err = net.validate().unwrap_err().to_string();
        assert!(err.contains("gas"), "{err}");
    }
}
