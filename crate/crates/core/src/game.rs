//! Assembly of the economic dispatch game: per-agent decision layout, the
//! full constraint system over the convexified feasible set, per-agent costs,
//! the exact potential function, its flow-penalized variant, and feasibility
//! audits.
//!
//! Each prosumer i controls an electrical block
//! x_i = (p_dg, p_ch, p_dh, p_eg, d_gu, theta, v, p_et, line flows) and, when
//! it owns a gas node, the gas blocks (y_i, z_i) defined by the gas model.
//! Stage one minimizes the potential over the box-relaxed feasible set; the
//! assembled instance *is* that convex program, with every row labeled by its
//! constraint family so audits can enumerate coverage.
//!
//! Cost model: agents pay quadratic production and storage-degradation costs
//! plus commodity bills whose unit prices grow linearly in the aggregate
//! consumption, so J_i couples agents only through the two aggregates. The
//! potential implemented here is exact for that cost model: unilateral
//! differences of P equal the deviating agent's cost difference to machine
//! precision, including the linear price terms and the fixed gas demands.

use std::collections::BTreeMap;

use serde::Serialize;
use thiserror::Error;

use crate::conic::{ConicProblem, LinExpr, QuadCone, SparseRow};
use crate::gasflow::{
    build_misoc, build_pwa, GasConstraintBlocks, GasModelError, GasRow, GasVar, GasVariableMap,
    PwaSegments,
};
use crate::netmodel::{DgKind, DirectedPipe, Network};

#[derive(Debug, Error)]
pub enum GameError {
    #[error(transparent)]
    GasModel(#[from] GasModelError),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
}

/// Gas-flow model selection for assembly.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum GasModelChoice {
    Misoc,
    Pwa { r: usize },
}

impl std::fmt::Display for GasModelChoice {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            GasModelChoice::Misoc => write!(f, "misoc"),
            GasModelChoice::Pwa { r } => write!(f, "pwa{r}"),
        }
    }
}

/// Electrical sub-block order inside each agent's x_i.
const P_DG: usize = 0;
const P_CH: usize = 1;
const P_DH: usize = 2;
const P_EG: usize = 3;
const D_GU: usize = 4;
const THETA: usize = 5;
const V_MAG: usize = 6;
const P_ET: usize = 7;

/// Decision-vector layout. The strategy u = (x, y, z) occupies the first
/// `n_u` coordinates; the solver vector appends the storage state-of-charge
/// trajectories (and, in penalized clones, flow-penalty epigraphs) after it.
#[derive(Debug, Clone)]
pub struct Layout {
    pub n_agents: usize,
    pub h: usize,
    pub x_off: Vec<usize>,
    pub x_len: Vec<usize>,
    /// Per agent: (neighbor agent, line B, line G), sorted by neighbor.
    pub e_nbrs: Vec<Vec<(usize, f64, f64)>>,
    pub y_off: usize,
    pub z_off: usize,
    pub n_u: usize,
    /// Aux state-of-charge block start per agent, if it owns storage.
    pub soc_off: Vec<Option<usize>>,
    pub n_vars: usize,
    /// Gas-node position owned by each agent, if any.
    pub gas_of_agent: Vec<Option<usize>>,
    /// Owning agent per gas-node position.
    pub agent_of_gas: Vec<usize>,
}

impl Layout {
    fn x_idx(&self, agent: usize, block: usize, step: usize) -> usize {
        self.x_off[agent] + block * self.h + step
    }

    pub fn p_dg(&self, agent: usize, step: usize) -> usize {
        self.x_idx(agent, P_DG, step)
    }
    pub fn p_ch(&self, agent: usize, step: usize) -> usize {
        self.x_idx(agent, P_CH, step)
    }
    pub fn p_dh(&self, agent: usize, step: usize) -> usize {
        self.x_idx(agent, P_DH, step)
    }
    pub fn p_eg(&self, agent: usize, step: usize) -> usize {
        self.x_idx(agent, P_EG, step)
    }
    pub fn d_gu(&self, agent: usize, step: usize) -> usize {
        self.x_idx(agent, D_GU, step)
    }
    pub fn theta(&self, agent: usize, step: usize) -> usize {
        self.x_idx(agent, THETA, step)
    }
    pub fn v_mag(&self, agent: usize, step: usize) -> usize {
        self.x_idx(agent, V_MAG, step)
    }
    pub fn p_et(&self, agent: usize, step: usize) -> usize {
        self.x_idx(agent, P_ET, step)
    }
    /// Line-flow variable toward the k-th electrical neighbor.
    pub fn p_line(&self, agent: usize, k: usize, step: usize) -> usize {
        self.x_idx(agent, P_ET + 1 + k, step)
    }

    pub fn y_global(&self, y: usize) -> usize {
        self.y_off + y
    }
    pub fn z_global(&self, z: usize) -> usize {
        self.z_off + z
    }
}

/// Per-agent data needed to evaluate J_i and recompute storage states.
#[derive(Debug, Clone)]
pub struct AgentMeta {
    pub dg_kind: DgKind,
    pub q_ngu: f64,
    pub l_ngu: f64,
    pub eta_gu: f64,
    /// Fixed gas demand profile of the owned gas node (zeros if none).
    pub d_g: Vec<f64>,
    pub storage: Option<StorageMeta>,
}

#[derive(Debug, Clone)]
pub struct StorageMeta {
    pub e_cap: f64,
    pub eta_st: f64,
    pub eta_ch: f64,
    pub eta_dh: f64,
    pub x_min: f64,
    pub x_max: f64,
    pub x_init: f64,
    pub q_st: Vec<Vec<f64>>,
}

/// A full strategy profile u = (x, y, z), stored flat. Per-agent and
/// per-block views are provided through the owning instance's layout.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Strategy {
    pub u: Vec<f64>,
}

impl Strategy {
    pub fn zeros(instance: &GameInstance) -> Self {
        Strategy { u: vec![0.0; instance.layout.n_u] }
    }

    pub fn x_of<'a>(&'a self, instance: &GameInstance, agent: usize) -> &'a [f64] {
        let l = &instance.layout;
        &self.u[l.x_off[agent]..l.x_off[agent] + l.x_len[agent]]
    }

    pub fn y<'a>(&'a self, instance: &GameInstance) -> &'a [f64] {
        &self.u[instance.layout.y_off..instance.layout.z_off]
    }

    pub fn z<'a>(&'a self, instance: &GameInstance) -> &'a [f64] {
        &self.u[instance.layout.z_off..instance.layout.n_u]
    }
}

/// Residual audit of a strategy: worst violation per constraint family, the
/// indicator integrality gap, and feasibility flags at the given tolerance.
#[derive(Debug, Clone, Serialize)]
pub struct ResidualReport {
    pub by_family: BTreeMap<String, f64>,
    pub integrality_gap: f64,
    pub tolerance: f64,
    /// All constraint families within tolerance (relaxed indicators allowed).
    pub feasible: bool,
    /// `feasible` and integral indicators.
    pub feasible_integer: bool,
}

impl ResidualReport {
    pub fn worst(&self) -> f64 {
        self.by_family.values().cloned().fold(0.0, f64::max)
    }
}

/// The assembled dispatch game: a labeled sparse convex program whose
/// objective is the exact potential and whose feasible set is the box-relaxed
/// global feasible set, plus the metadata needed to evaluate per-agent costs
/// and audit feasibility.
#[derive(Debug, Clone)]
pub struct GameInstance {
    pub model: GasModelChoice,
    pub segments: Option<PwaSegments>,
    pub layout: Layout,
    pub t_s: f64,
    pub problem: ConicProblem,
    pub eq_labels: Vec<&'static str>,
    pub ineq_labels: Vec<&'static str>,
    pub cone_labels: Vec<&'static str>,
    pub bound_labels: Vec<Option<&'static str>>,
    pub agents: Vec<AgentMeta>,
    pub gas_map: GasVariableMap,
    pub directed_pipes: Vec<DirectedPipe>,
    /// (psi_min, psi_max) per gas-node position.
    pub psi_bounds: Vec<(f64, f64)>,
    /// Original gas-node ids by position (for reporting).
    pub gas_node_ids: Vec<usize>,
    pub q_e: Vec<f64>,
    pub l_e: Vec<f64>,
    pub q_g: Vec<f64>,
    pub l_g: Vec<f64>,
    pub d_e: Vec<Vec<f64>>,
}

/// Assembles the dispatch game over the requested gas model. Ordering is
/// deterministic for identical inputs; infeasibility is the solver's to
/// detect.
pub fn assemble(network: &Network, model: GasModelChoice) -> Result<GameInstance, GameError> {
    let index = network.index();
    let h = network.horizon_len();
    let n = network.prosumers.len();

    let (segments, gas_map, gas_blocks) = match model {
        GasModelChoice::Misoc => {
            let (map, blocks) = build_misoc(network)?;
            (None, map, blocks)
        }
        GasModelChoice::Pwa { r } => {
            let (seg, map, blocks) = build_pwa(network, r)?;
            (Some(seg), map, blocks)
        }
    };

    // Agent order follows the prosumer list; electrical data comes from each
    // prosumer's bus.
    let bus_of_agent: Vec<usize> = network
        .prosumers
        .iter()
        .map(|p| index.bus_pos[&p.bus_id])
        .collect();
    let mut agent_of_bus = vec![usize::MAX; n];
    for (agent, &bus) in bus_of_agent.iter().enumerate() {
        agent_of_bus[bus] = agent;
    }

    let mut x_off = Vec::with_capacity(n);
    let mut x_len = Vec::with_capacity(n);
    let mut e_nbrs = Vec::with_capacity(n);
    let mut cursor = 0usize;
    for &bus in &bus_of_agent {
        let nbrs: Vec<(usize, f64, f64)> = index.e_neighbors[bus]
            .iter()
            .map(|&(nbr_bus, b, g)| (agent_of_bus[nbr_bus], b, g))
            .collect();
        x_off.push(cursor);
        x_len.push(h * (8 + nbrs.len()));
        cursor += h * (8 + nbrs.len());
        e_nbrs.push(nbrs);
    }
    let y_off = cursor;
    let z_off = y_off + gas_map.n_y;
    let n_u = z_off + gas_map.n_z;

    let mut soc_off = vec![None; n];
    let mut aux = n_u;
    for (agent, p) in network.prosumers.iter().enumerate() {
        if p.storage.is_some() {
            soc_off[agent] = Some(aux);
            aux += h;
        }
    }
    let n_vars = aux;

    let gas_of_agent: Vec<Option<usize>> = index.gas_of_prosumer.clone();
    let layout = Layout {
        n_agents: n,
        h,
        x_off,
        x_len,
        e_nbrs,
        y_off,
        z_off,
        n_u,
        soc_off,
        n_vars,
        gas_of_agent: gas_of_agent.clone(),
        agent_of_gas: index.prosumer_of_gas.clone(),
    };

    let agents: Vec<AgentMeta> = network
        .prosumers
        .iter()
        .enumerate()
        .map(|(agent, p)| AgentMeta {
            dg_kind: p.dg_kind,
            q_ngu: p.q_ngu,
            l_ngu: p.l_ngu,
            eta_gu: p.eta_gu,
            d_g: match gas_of_agent[agent] {
                Some(g) => network.gas_nodes[g].d_g.clone(),
                None => vec![0.0; h],
            },
            storage: p.storage.as_ref().map(|s| StorageMeta {
                e_cap: s.e_cap,
                eta_st: s.eta_st,
                eta_ch: s.eta_ch,
                eta_dh: s.eta_dh,
                x_min: s.x_min,
                x_max: s.x_max,
                x_init: s.x_init,
                q_st: s.q_st.matrix(h),
            }),
        })
        .collect();

    let mut problem = ConicProblem::new(n_vars);
    let mut eq_labels = Vec::new();
    let mut ineq_labels = Vec::new();
    let mut cone_labels = Vec::new();
    let mut bound_labels: Vec<Option<&'static str>> = vec![None; n_vars];

    let d_e_of_agent: Vec<Vec<f64>> = bus_of_agent
        .iter()
        .map(|&bus| network.buses[bus].d_e.clone())
        .collect();

    build_objective(network, &layout, &agents, &mut problem);
    build_boxes(network, &layout, &gas_map, &index, &mut problem, &mut bound_labels);
    build_electrical_rows(
        network,
        &layout,
        &agents,
        &d_e_of_agent,
        &mut problem,
        &mut eq_labels,
        &mut ineq_labels,
    );
    map_gas_blocks(
        &layout,
        &agents,
        &gas_blocks,
        &mut problem,
        &mut eq_labels,
        &mut ineq_labels,
        &mut cone_labels,
    );

    let psi_bounds = network.gas_nodes.iter().map(|g| (g.psi_min, g.psi_max)).collect();

    Ok(GameInstance {
        model,
        segments,
        layout,
        t_s: network.horizon.t_s,
        problem,
        eq_labels,
        ineq_labels,
        cone_labels,
        bound_labels,
        agents,
        gas_map,
        directed_pipes: index.directed_pipes.clone(),
        psi_bounds,
        gas_node_ids: network.gas_nodes.iter().map(|g| g.id).collect(),
        q_e: network.market.q_e.clone(),
        l_e: network.market.l_e.clone(),
        q_g: network.market.q_g.clone(),
        l_g: network.market.l_g.clone(),
        d_e: d_e_of_agent,
    })
}

/// The exact potential: local production and degradation costs plus, per
/// commodity and step, q/2 (sigma^2 + sum of squared own terms) + l sigma,
/// with the gas terms built from total consumption d_gu + d_g.
fn build_objective(network: &Network, layout: &Layout, agents: &[AgentMeta], problem: &mut ConicProblem) {
    let h = layout.h;
    let n = layout.n_agents;
    let market = &network.market;

    for (agent, meta) in agents.iter().enumerate() {
        if meta.dg_kind == DgKind::NonGasFueled {
            for step in 0..h {
                let idx = layout.p_dg(agent, step);
                problem.quad.push((idx, idx, 2.0 * meta.q_ngu));
                problem.linear[idx] += meta.l_ngu;
            }
        }
        if let Some(st) = &meta.storage {
            for h1 in 0..h {
                for h2 in h1..h {
                    let w = if h1 == h2 { st.q_st[h1][h2] } else { 0.5 * (st.q_st[h1][h2] + st.q_st[h2][h1]) };
                    if w != 0.0 {
                        problem.quad.push((layout.p_ch(agent, h1), layout.p_ch(agent, h2), 2.0 * w));
                        problem.quad.push((layout.p_dh(agent, h1), layout.p_dh(agent, h2), 2.0 * w));
                    }
                }
            }
        }
    }

    for step in 0..h {
        let q = market.q_e[step];
        let l = market.l_e[step];
        for i in 0..n {
            let pi = layout.p_eg(i, step);
            if q != 0.0 {
                problem.quad.push((pi, pi, 2.0 * q));
                for j in (i + 1)..n {
                    problem.quad.push((pi, layout.p_eg(j, step), q));
                }
            }
            problem.linear[pi] += l;
        }

        let qg = market.q_g[step];
        let lg = market.l_g[step];
        // Every agent enters the gas aggregate; d_gu is pinned to zero for
        // those without gas assets, so the feasible-set value is unchanged.
        // Fixed demands C = sum_i d_g_i shift the linear terms.
        let c_total: f64 = agents.iter().map(|a| a.d_g[step]).sum();
        for i in 0..n {
            let wi = layout.d_gu(i, step);
            problem.quad.push((wi, wi, 2.0 * qg));
            for j in (i + 1)..n {
                problem.quad.push((wi, layout.d_gu(j, step), qg));
            }
            problem.linear[wi] += qg * (c_total + agents[i].d_g[step]) + lg;
        }
        let sum_sq: f64 = agents.iter().map(|a| a.d_g[step] * a.d_g[step]).sum();
        problem.constant += 0.5 * qg * (c_total * c_total + sum_sq) + lg * c_total;
    }
}

fn set_box(
    problem: &mut ConicProblem,
    labels: &mut [Option<&'static str>],
    idx: usize,
    lo: f64,
    hi: f64,
    family: &'static str,
) {
    problem.lower[idx] = lo;
    problem.upper[idx] = hi;
    if lo.is_finite() || hi.is_finite() {
        labels[idx] = Some(family);
    }
}

fn build_boxes(
    network: &Network,
    layout: &Layout,
    gas_map: &GasVariableMap,
    index: &crate::netmodel::NetworkIndex,
    problem: &mut ConicProblem,
    labels: &mut Vec<Option<&'static str>>,
) {
    let h = layout.h;
    for (agent, p) in network.prosumers.iter().enumerate() {
        let bus = &network.buses[index.bus_pos[&p.bus_id]];
        for step in 0..h {
            let (dg_lo, dg_hi) = match p.dg_kind {
                DgKind::None => (0.0, 0.0),
                _ => (p.p_dg_min, p.p_dg_max),
            };
            set_box(problem, labels, layout.p_dg(agent, step), dg_lo, dg_hi, "dg_bounds");

            let (ch_hi, dh_hi) = match &p.storage {
                Some(s) => (s.p_ch_max, s.p_dh_max),
                None => (0.0, 0.0),
            };
            set_box(problem, labels, layout.p_ch(agent, step), 0.0, ch_hi, "charge_bounds");
            set_box(problem, labels, layout.p_dh(agent, step), 0.0, dh_hi, "charge_bounds");

            set_box(problem, labels, layout.p_eg(agent, step), 0.0, f64::INFINITY, "purchase_bounds");

            let gu_hi = if p.dg_kind == DgKind::GasFueled { f64::INFINITY } else { 0.0 };
            set_box(problem, labels, layout.d_gu(agent, step), 0.0, gu_hi, "gas_use_bounds");

            set_box(problem, labels, layout.theta(agent, step), bus.theta_min, bus.theta_max, "angle_bounds");
            set_box(problem, labels, layout.v_mag(agent, step), bus.v_min, bus.v_max, "voltage_bounds");

            if bus.has_transmission_tie {
                if let Some(m) = bus.p_et_max { set_box(problem, labels, layout.p_et(agent, step), -m, m, "injection_bounds") }
            } else {
                set_box(problem, labels, layout.p_et(agent, step), 0.0, 0.0, "injection_bounds");
            }
        }
        if let (Some(off), Some(s)) = (layout.soc_off[agent], &p.storage) {
            for step in 0..h {
                set_box(problem, labels, off + step, s.x_min, s.x_max, "soc_bounds");
            }
        }
    }

    for (g, node) in network.gas_nodes.iter().enumerate() {
        for step in 0..h {
            set_box(
                problem,
                labels,
                layout.y_global(gas_map.psi(g, step)),
                node.psi_min,
                node.psi_max,
                "pressure_bounds",
            );
            let hi = if node.is_source { f64::INFINITY } else { 0.0 };
            set_box(problem, labels, layout.y_global(gas_map.gs(g, step)), 0.0, hi, "source_bounds");
        }
    }
    for (k, d) in index.directed_pipes.iter().enumerate() {
        for step in 0..h {
            set_box(
                problem,
                labels,
                layout.y_global(gas_map.phi(k, step)),
                -d.phi_max,
                d.phi_max,
                "flow_capacity",
            );
        }
    }
    for z in 0..gas_map.n_z {
        set_box(problem, labels, layout.z_global(z), 0.0, 1.0, "indicator_box");
    }
}

fn build_electrical_rows(
    network: &Network,
    layout: &Layout,
    agents: &[AgentMeta],
    d_e_of_agent: &[Vec<f64>],
    problem: &mut ConicProblem,
    eq_labels: &mut Vec<&'static str>,
    ineq_labels: &mut Vec<&'static str>,
) {
    let h = layout.h;
    let n = layout.n_agents;
    let market = &network.market;

    for (agent, meta) in agents.iter().enumerate() {
        if meta.dg_kind == DgKind::GasFueled {
            for step in 0..h {
                problem.eq.push(SparseRow {
                    terms: vec![
                        (layout.d_gu(agent, step), 1.0),
                        (layout.p_dg(agent, step), -meta.eta_gu),
                    ],
                    rhs: 0.0,
                });
                eq_labels.push("fuel_conversion");
            }
        }
        if let (Some(off), Some(st)) = (layout.soc_off[agent], &meta.storage) {
            let gain_ch = network.horizon.t_s / st.e_cap * st.eta_ch;
            let gain_dh = network.horizon.t_s / st.e_cap / st.eta_dh;
            for step in 0..h {
                let mut terms = vec![
                    (off + step, 1.0),
                    (layout.p_ch(agent, step), -gain_ch),
                    (layout.p_dh(agent, step), gain_dh),
                ];
                let rhs = if step == 0 {
                    st.eta_st * st.x_init
                } else {
                    terms.push((off + step - 1, -st.eta_st));
                    0.0
                };
                problem.eq.push(SparseRow { terms, rhs });
                eq_labels.push("soc_dynamics");
            }
        }
    }

    for agent in 0..layout.n_agents {
        for step in 0..h {
            problem.eq.push(SparseRow {
                terms: vec![
                    (layout.p_dg(agent, step), 1.0),
                    (layout.p_eg(agent, step), 1.0),
                    (layout.p_dh(agent, step), 1.0),
                    (layout.p_ch(agent, step), -1.0),
                ],
                rhs: d_e_of_agent[agent][step],
            });
            eq_labels.push("power_balance");

            let mut terms = vec![
                (layout.p_eg(agent, step), 1.0),
                (layout.p_et(agent, step), -1.0),
            ];
            for k in 0..layout.e_nbrs[agent].len() {
                terms.push((layout.p_line(agent, k, step), 1.0));
            }
            problem.eq.push(SparseRow { terms, rhs: 0.0 });
            eq_labels.push("grid_injection_balance");

            for (k, &(nbr, b, g)) in layout.e_nbrs[agent].iter().enumerate() {
                problem.eq.push(SparseRow {
                    terms: vec![
                        (layout.p_line(agent, k, step), 1.0),
                        (layout.theta(agent, step), -b),
                        (layout.theta(nbr, step), b),
                        (layout.v_mag(agent, step), g),
                        (layout.v_mag(nbr, step), -g),
                    ],
                    rhs: 0.0,
                });
                eq_labels.push("line_flow");
            }
        }
    }

    for step in 0..h {
        let all_eg: Vec<(usize, f64)> = (0..n).map(|i| (layout.p_eg(i, step), 1.0)).collect();
        problem.ineq.push(SparseRow { terms: all_eg.clone(), rhs: market.sigma_e_max });
        ineq_labels.push("grid_trade_bounds");
        problem.ineq.push(SparseRow {
            terms: all_eg.iter().map(|&(i, c)| (i, -c)).collect(),
            rhs: -market.sigma_e_min,
        });
        ineq_labels.push("grid_trade_bounds");

        let c_total: f64 = agents.iter().map(|a| a.d_g[step]).sum();
        let all_gu: Vec<(usize, f64)> = (0..n)
            .filter(|&i| layout.gas_of_agent[i].is_some())
            .map(|i| (layout.d_gu(i, step), 1.0))
            .collect();
        problem.ineq.push(SparseRow { terms: all_gu.clone(), rhs: market.sigma_g_max - c_total });
        ineq_labels.push("total_gas_bounds");
        problem.ineq.push(SparseRow {
            terms: all_gu.iter().map(|&(i, c)| (i, -c)).collect(),
            rhs: -(market.sigma_g_min - c_total),
        });
        ineq_labels.push("total_gas_bounds");
    }
}

/// Translates gas-space rows into global coordinates, substituting the
/// symbolic gas-use terms with the owner's d_gu variable plus the fixed
/// demand constant.
fn map_gas_blocks(
    layout: &Layout,
    agents: &[AgentMeta],
    blocks: &GasConstraintBlocks,
    problem: &mut ConicProblem,
    eq_labels: &mut Vec<&'static str>,
    ineq_labels: &mut Vec<&'static str>,
    cone_labels: &mut Vec<&'static str>,
) {
    let translate = |row: &GasRow| -> SparseRow {
        let mut terms = Vec::with_capacity(row.terms.len());
        let mut rhs = row.rhs;
        for &(var, coef) in &row.terms {
            match var {
                GasVar::Y(y) => terms.push((layout.y_global(y), coef)),
                GasVar::Z(z) => terms.push((layout.z_global(z), coef)),
                GasVar::GasUse { node, step } => {
                    let agent = layout.agent_of_gas[node];
                    terms.push((layout.d_gu(agent, step), coef));
                    rhs -= coef * agents[agent].d_g[step];
                }
            }
        }
        SparseRow { terms, rhs }
    };

    for row in blocks.h_cpl.iter().chain(&blocks.h_loc) {
        problem.eq.push(translate(row));
        eq_labels.push(row.family);
    }
    for row in blocks.g_cpl.iter().chain(&blocks.g_loc) {
        problem.ineq.push(translate(row));
        ineq_labels.push(row.family);
    }
    for cone in &blocks.cones {
        let var = |v: GasVar| -> usize {
            match v {
                GasVar::Y(y) => layout.y_global(y),
                GasVar::Z(z) => layout.z_global(z),
                GasVar::GasUse { .. } => unreachable!("cones never reference gas use"),
            }
        };
        problem.cones.push(QuadCone {
            epigraph: LinExpr::var(var(cone.epigraph)),
            args: vec![LinExpr { terms: vec![(var(cone.arg.0), cone.arg.1)], constant: 0.0 }],
        });
        cone_labels.push(cone.family);
    }
}

impl GameInstance {
    /// Pads a strategy with the storage trajectories it implies, yielding a
    /// full solver-compatible vector.
    pub fn pad_with_soc(&self, u: &[f64]) -> Vec<f64> {
        let mut v = vec![0.0; self.layout.n_vars];
        v[..self.layout.n_u].copy_from_slice(&u[..self.layout.n_u]);
        for (agent, meta) in self.agents.iter().enumerate() {
            if let (Some(off), Some(st)) = (self.layout.soc_off[agent], &meta.storage) {
                let mut soc = st.x_init;
                for step in 0..self.layout.h {
                    soc = st.eta_st * soc
                        + st.eta_ch * u[self.layout.p_ch(agent, step)] * (self.t_s / st.e_cap)
                        - u[self.layout.p_dh(agent, step)] * (self.t_s / st.e_cap) / st.eta_dh;
                    v[off + step] = soc;
                }
            }
        }
        v
    }

    /// Potential value P at a strategy (reads only the electrical block).
    pub fn potential(&self, strategy: &Strategy) -> f64 {
        self.problem.objective_at(&self.pad_with_soc(&strategy.u))
    }

    /// Gradient of the potential in the electrical coordinates of one agent.
    pub fn potential_gradient_x(&self, strategy: &Strategy, agent: usize) -> Vec<f64> {
        let g = self.problem.gradient_at(&self.pad_with_soc(&strategy.u));
        let l = &self.layout;
        g[l.x_off[agent]..l.x_off[agent] + l.x_len[agent]].to_vec()
    }

    /// Agent i's cost J_i at a strategy: production and degradation costs
    /// plus the two aggregate-priced commodity bills.
    pub fn cost_j(&self, agent: usize, strategy: &Strategy) -> f64 {
        let l = &self.layout;
        let h = l.h;
        let u = &strategy.u;
        let meta = &self.agents[agent];
        let mut total = 0.0;

        if meta.dg_kind == DgKind::NonGasFueled {
            let mut sq = 0.0;
            let mut lin = 0.0;
            for step in 0..h {
                let p = u[l.p_dg(agent, step)];
                sq += p * p;
                lin += p;
            }
            total += meta.q_ngu * sq + meta.l_ngu * lin;
        }
        if let Some(st) = &meta.storage {
            for h1 in 0..h {
                for h2 in 0..h {
                    total += st.q_st[h1][h2]
                        * (u[l.p_ch(agent, h1)] * u[l.p_ch(agent, h2)]
                            + u[l.p_dh(agent, h1)] * u[l.p_dh(agent, h2)]);
                }
            }
        }
        for step in 0..h {
            let sigma_e: f64 = (0..l.n_agents).map(|j| u[l.p_eg(j, step)]).sum();
            let own = u[l.p_eg(agent, step)];
            total += self.q_e[step] * sigma_e * own + self.l_e[step] * own;

            let sigma_g: f64 = (0..l.n_agents)
                .map(|j| u[l.d_gu(j, step)] + self.agents[j].d_g[step])
                .sum();
            let e_own = u[l.d_gu(agent, step)] + meta.d_g[step];
            total += self.q_g[step] * sigma_g * e_own + self.l_g[step] * e_own;
        }
        total
    }

    /// Mean absolute cost over agents, the denominator of the epsilon
    /// percentage reported by the harness.
    pub fn mean_abs_cost(&self, strategy: &Strategy) -> f64 {
        let n = self.layout.n_agents as f64;
        (0..self.layout.n_agents)
            .map(|i| self.cost_j(i, strategy).abs())
            .sum::<f64>()
            / n
    }

    /// Clone with the flow-penalty term rho * sum over directed pipes of the
    /// infinity norm of the flow profile, realized with one epigraph variable
    /// and 2H rows per directed pipe. rho = 0 returns an objective-identical
    /// instance without the extra block.
    pub fn penalized(&self, rho: f64) -> Result<GameInstance, GameError> {
        if rho < 0.0 {
            return Err(GameError::Dimension(format!("penalty weight must be nonnegative, got {rho}")));
        }
        let mut out = self.clone();
        if rho == 0.0 {
            return Ok(out);
        }
        let h = self.layout.h;
        for k in 0..self.directed_pipes.len() {
            let t = out.problem.n;
            out.problem.n += 1;
            out.problem.linear.push(rho);
            out.problem.lower.push(f64::NEG_INFINITY);
            out.problem.upper.push(f64::INFINITY);
            out.bound_labels.push(None);
            for step in 0..h {
                let phi = self.layout.y_global(self.gas_map.phi(k, step));
                out.problem.ineq.push(SparseRow { terms: vec![(phi, 1.0), (t, -1.0)], rhs: 0.0 });
                out.ineq_labels.push("flow_penalty_epigraph");
                out.problem.ineq.push(SparseRow { terms: vec![(phi, -1.0), (t, -1.0)], rhs: 0.0 });
                out.ineq_labels.push("flow_penalty_epigraph");
            }
        }
        Ok(out)
    }

    /// Pins the indicator block to a fixed assignment (binary for the
    /// mixed-integer restriction, or any box point).
    pub fn with_fixed_indicators(&self, z: &[f64]) -> Result<GameInstance, GameError> {
        if z.len() != self.gas_map.n_z {
            return Err(GameError::Dimension(format!(
                "expected {} indicator values, got {}",
                self.gas_map.n_z,
                z.len()
            )));
        }
        let mut out = self.clone();
        for (k, &val) in z.iter().enumerate() {
            let idx = self.layout.z_global(k);
            out.problem.lower[idx] = val;
            out.problem.upper[idx] = val;
        }
        Ok(out)
    }

    /// Worst violation per labeled family, plus the indicator integrality
    /// gap, at the spec tolerance.
    pub fn feasibility_residuals(&self, strategy: &Strategy) -> ResidualReport {
        self.feasibility_residuals_at(strategy, 1e-6)
    }

    pub fn feasibility_residuals_at(&self, strategy: &Strategy, tol: f64) -> ResidualReport {
        let v = self.pad_with_soc(&strategy.u);
        let mut by_family: BTreeMap<String, f64> = BTreeMap::new();
        let mut bump = |family: &str, violation: f64| {
            let e = by_family.entry(family.to_string()).or_insert(0.0);
            if violation > *e {
                *e = violation;
            }
        };

        for (row, &label) in self.problem.eq.iter().zip(&self.eq_labels) {
            bump(label, (row.eval_lhs(&v) - row.rhs).abs());
        }
        for (row, &label) in self.problem.ineq.iter().zip(&self.ineq_labels) {
            bump(label, (row.eval_lhs(&v) - row.rhs).max(0.0));
        }
        for (idx, label) in self.bound_labels.iter().enumerate() {
            if let Some(label) = label {
                let lo = self.problem.lower[idx];
                let hi = self.problem.upper[idx];
                let mut viol: f64 = 0.0;
                if lo.is_finite() {
                    viol = viol.max(lo - v[idx]);
                }
                if hi.is_finite() {
                    viol = viol.max(v[idx] - hi);
                }
                bump(label, viol);
            }
        }
        for (cone, &label) in self.problem.cones.iter().zip(&self.cone_labels) {
            let epi = cone.epigraph.eval(&v);
            let norm2: f64 = cone.args.iter().map(|a| a.eval(&v) * a.eval(&v)).sum();
            bump(label, (norm2 - epi).max(0.0));
        }

        let z = strategy.z(self);
        let integrality_gap = z.iter().map(|&zk| zk.min(1.0 - zk)).fold(0.0, f64::max);
        let feasible = by_family.values().all(|&w| w <= tol);
        ResidualReport {
            feasible,
            feasible_integer: feasible && integrality_gap <= tol,
            by_family,
            integrality_gap,
            tolerance: tol,
        }
    }

    /// Labeled row families present in this instance (audit surface).
    pub fn row_families(&self) -> std::collections::BTreeSet<&'static str> {
        let mut set: std::collections::BTreeSet<&'static str> = std::collections::BTreeSet::new();
        set.extend(self.eq_labels.iter().copied());
        set.extend(self.ineq_labels.iter().copied());
        set.extend(self.cone_labels.iter().copied());
        set.extend(self.bound_labels.iter().flatten().copied());
        set
    }

    /// The families every instance of the given model must emit (assuming the
    /// network has at least one storage unit, one gas-fueled and one non-gas
    /// DG somewhere; families tied to absent assets are listed separately).
    pub fn expected_row_families(model: GasModelChoice) -> std::collections::BTreeSet<&'static str> {
        let mut set: std::collections::BTreeSet<&'static str> = [
            "power_balance",
            "grid_injection_balance",
            "line_flow",
            "grid_trade_bounds",
            "total_gas_bounds",
            "gas_balance",
            "flow_reciprocity",
            "flow_direction",
            "dg_bounds",
            "charge_bounds",
            "purchase_bounds",
            "gas_use_bounds",
            "angle_bounds",
            "voltage_bounds",
            "injection_bounds",
            "flow_capacity",
            "pressure_bounds",
            "source_bounds",
            "indicator_box",
        ]
        .into_iter()
        .collect();
        match model {
            GasModelChoice::Misoc => {
                set.extend([
                    "weymouth_cone",
                    "mccormick_lb_near",
                    "mccormick_lb_far",
                    "mccormick_ub_near",
                    "mccormick_ub_far",
                ]);
            }
            GasModelChoice::Pwa { .. } => {
                set.extend([
                    "pwa_flow_eq",
                    "pwa_region_sum",
                    "pressure_sign",
                    "pwa_region_logic",
                    "pwa_flow_product",
                    "pwa_pressure_product",
                ]);
            }
        }
        set
    }

    /// Families contributed only by optional assets.
    pub fn asset_row_families() -> std::collections::BTreeSet<&'static str> {
        ["fuel_conversion", "soc_dynamics", "soc_bounds"].into_iter().collect()
    }

    /// Debug dump of the assembled rows in sparse-triplet form.
    pub fn to_debug_json(&self) -> serde_json::Value {
        let rows = |rows: &[SparseRow], labels: &[&'static str], sense: &str| {
            rows.iter()
                .zip(labels)
                .map(|(r, label)| {
                    serde_json::json!({
                        "family": label,
                        "sense": sense,
                        "terms": r.terms,
                        "rhs": r.rhs,
                    })
                })
                .collect::<Vec<_>>()
        };
        let mut all = rows(&self.problem.eq, &self.eq_labels, "=");
        all.extend(rows(&self.problem.ineq, &self.ineq_labels, "<="));
        serde_json::json!({
            "n_vars": self.problem.n,
            "n_u": self.layout.n_u,
            "rows": all,
            "cones": self
                .problem
                .cones
                .iter()
                .zip(&self.cone_labels)
                .map(|(c, label)| serde_json::json!({
                    "family": label,
                    "epigraph": c.epigraph.terms,
                    "args": c.args.iter().map(|a| a.terms.clone()).collect::<Vec<_>>(),
                }))
                .collect::<Vec<_>>(),
        })
    }
}
