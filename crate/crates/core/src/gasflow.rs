//! Mixed-integer approximations of the Weymouth gas-flow equation, emitted as
//! structured constraint blocks over a dedicated gas variable space.
//!
//! Two models are supported. The cone model relaxes the squared equation into
//! a second-order-cone row per directed pipe plus four envelope rows that pin
//! the auxiliary variable to the signed pressure drop once the direction
//! binary is integral. The piecewise-affine model replaces the quadratic
//! flow-to-drop map with r secant segments and encodes segment selection and
//! the binary-continuous products with big-M rows, so every constraint is
//! affine at the cost of many more binaries.
//!
//! Variables live in two dense spaces: `y` (continuous: pressures, source
//! imports, flows, auxiliaries) and `z` (direction and region indicators,
//! binary in the original game, box-relaxed in stage one). Rows may also
//! reference a node's gas consumption `d_gu + d_g`, which belongs to the
//! electrical block; those terms are emitted symbolically and resolved by the
//! game assembler.

use serde::Serialize;
use thiserror::Error;

use crate::netmodel::{Network, NetworkIndex};

#[derive(Debug, Error)]
pub enum GasModelError {
    #[error("piecewise model needs r >= 2, got {0}")]
    TooFewRegions(usize),
    #[error("pipe ({0},{1}): {2}")]
    BadPipe(usize, usize, String),
    #[error("gas node {0}: {1}")]
    BadNode(usize, String),
    #[error("flow {flow} outside capacity {cap} for pipe {pipe}")]
    FlowOutOfRange { pipe: usize, flow: f64, cap: f64 },
}

/// Steady-state pipe flow from squared nodal pressures:
/// sgn(psi_i - psi_j) * c_f * sqrt(|psi_i - psi_j|).
pub fn weymouth_flow(psi_i: f64, psi_j: f64, c_f: f64) -> f64 {
    let d = psi_i - psi_j;
    if d == 0.0 {
        return 0.0;
    }
    d.signum() * c_f * d.abs().sqrt()
}

/// A variable in the gas space, or a symbolic reference to a node's total gas
/// consumption (d_gu + d_g) which lives outside it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GasVar {
    /// Continuous gas variable (pressures, imports, flows, auxiliaries).
    Y(usize),
    /// Binary-relaxed indicator.
    Z(usize),
    /// Total gas consumption of a gas node at a step: d_gu (electrical block)
    /// plus the fixed demand d_g. The assembler substitutes both parts.
    GasUse { node: usize, step: usize },
}

/// One affine row: sum of coef * var (sense fixed by the block it lives in).
#[derive(Debug, Clone)]
pub struct GasRow {
    /// Constraint family, e.g. "gas_balance" or "mccormick_ub_far".
    pub family: &'static str,
    pub terms: Vec<(GasVar, f64)>,
    pub rhs: f64,
}

/// Epigraph cone nu >= (coef * var)^2, cone-model only.
#[derive(Debug, Clone)]
pub struct GasCone {
    pub family: &'static str,
    pub epigraph: GasVar,
    pub arg: (GasVar, f64),
}

/// The four labeled constraint blocks of a gas model plus its cone list.
/// Equalities hold with rhs; inequalities are `terms <= rhs`.
#[derive(Debug, Clone, Default)]
pub struct GasConstraintBlocks {
    /// Coupling equalities: gas balance, flow reciprocity, and (piecewise
    /// model) the linearized flow equation.
    pub h_cpl: Vec<GasRow>,
    /// Local equalities: region-selection sum (piecewise model only).
    pub h_loc: Vec<GasRow>,
    /// Coupling inequalities: envelope rows (cone model) or pressure-sign
    /// big-M logic (piecewise model).
    pub g_cpl: Vec<GasRow>,
    /// Local inequalities: flow-direction big-M and, per model, the region
    /// and product big-M rows.
    pub g_loc: Vec<GasRow>,
    /// Second-order cones (cone model only).
    pub cones: Vec<GasCone>,
}

impl GasConstraintBlocks {
    /// Debug dump: rows as (family, sense, terms, rhs) plus the cone list.
    pub fn to_debug_json(&self) -> serde_json::Value {
        fn rows(list: &[GasRow], sense: &str) -> Vec<serde_json::Value> {
            list.iter()
                .map(|r| {
                    serde_json::json!({
                        "family": r.family,
                        "sense": sense,
                        "terms": r.terms.iter().map(|(v, c)| serde_json::json!([format!("{v:?}"), c])).collect::<Vec<_>>(),
                        "rhs": r.rhs,
                    })
                })
                .collect()
        }
        let mut all = rows(&self.h_cpl, "=");
        all.extend(rows(&self.h_loc, "="));
        all.extend(rows(&self.g_cpl, "<="));
        all.extend(rows(&self.g_loc, "<="));
        serde_json::json!({
            "rows": all,
            "cones": self.cones.iter().map(|c| serde_json::json!({
                "family": c.family,
                "epigraph": format!("{:?}", c.epigraph),
                "arg": [format!("{:?}", c.arg.0), c.arg.1],
            })).collect::<Vec<_>>(),
        })
    }
}

/// Index map of the gas variable space. The continuous block stacks, per gas
/// node: pressures (H), source import (H), then per owned directed pipe the
/// flow (H) and the model-specific auxiliaries. The indicator block stacks,
/// per node and owned pipe, the direction flag (H) and, for the piecewise
/// model, the region indicators (3 per region, H each).
#[derive(Debug, Clone)]
pub struct GasVariableMap {
    pub h: usize,
    pub n_nodes: usize,
    pub n_directed: usize,
    /// Regions of the piecewise model; 0 for the cone model.
    pub r: usize,
    pub n_y: usize,
    pub n_z: usize,
    psi_base: Vec<usize>,
    gs_base: Vec<usize>,
    phi_base: Vec<usize>,
    aux_base: Vec<usize>,
    delta_base: Vec<usize>,
}

impl GasVariableMap {
    fn build(index: &NetworkIndex, h: usize, r: usize) -> Self {
        let n_nodes = index.pipes_of_node.len();
        let n_directed = index.directed_pipes.len();
        // Auxiliaries per directed pipe in y: cone model 1 (nu), piecewise
        // model 1 + r (nu_psi, nu_m). Indicators per pipe in z: 1 (delta) or
        // 1 + 3r (delta, alpha/beta/gamma per region).
        let aux_per_pipe = if r == 0 { 1 } else { 1 + r };
        let z_per_pipe = if r == 0 { 1 } else { 1 + 3 * r };

        let mut psi_base = vec![0; n_nodes];
        let mut gs_base = vec![0; n_nodes];
        let mut phi_base = vec![0; n_directed];
        let mut aux_base = vec![0; n_directed];
        let mut delta_base = vec![0; n_directed];
        let mut y = 0usize;
        for node in 0..n_nodes {
            psi_base[node] = y;
            y += h;
            gs_base[node] = y;
            y += h;
            for &d in &index.pipes_of_node[node] {
                phi_base[d] = y;
                y += h;
                aux_base[d] = y;
                y += aux_per_pipe * h;
            }
        }
        let mut z = 0usize;
        for node in 0..n_nodes {
            for &d in &index.pipes_of_node[node] {
                delta_base[d] = z;
                z += z_per_pipe * h;
            }
        }
        GasVariableMap {
            h,
            n_nodes,
            n_directed,
            r,
            n_y: y,
            n_z: z,
            psi_base,
            gs_base,
            phi_base,
            aux_base,
            delta_base,
        }
    }

    pub fn psi(&self, node: usize, step: usize) -> usize {
        self.psi_base[node] + step
    }

    pub fn gs(&self, node: usize, step: usize) -> usize {
        self.gs_base[node] + step
    }

    pub fn phi(&self, pipe: usize, step: usize) -> usize {
        self.phi_base[pipe] + step
    }

    /// Cone-model auxiliary nu.
    pub fn nu(&self, pipe: usize, step: usize) -> usize {
        debug_assert_eq!(self.r, 0);
        self.aux_base[pipe] + step
    }

    /// Piecewise-model pressure product nu_psi.
    pub fn nu_psi(&self, pipe: usize, step: usize) -> usize {
        debug_assert!(self.r >= 2);
        self.aux_base[pipe] + step
    }

    /// Piecewise-model flow product nu_m for region m (0-based).
    pub fn nu_m(&self, pipe: usize, m: usize, step: usize) -> usize {
        debug_assert!(self.r >= 2 && m < self.r);
        self.aux_base[pipe] + (1 + m) * self.h + step
    }

    pub fn delta(&self, pipe: usize, step: usize) -> usize {
        self.delta_base[pipe] + step
    }

    pub fn alpha(&self, pipe: usize, m: usize, step: usize) -> usize {
        debug_assert!(self.r >= 2 && m < self.r);
        self.delta_base[pipe] + (1 + 3 * m) * self.h + step
    }

    pub fn beta(&self, pipe: usize, m: usize, step: usize) -> usize {
        debug_assert!(self.r >= 2 && m < self.r);
        self.delta_base[pipe] + (2 + 3 * m) * self.h + step
    }

    pub fn gamma(&self, pipe: usize, m: usize, step: usize) -> usize {
        debug_assert!(self.r >= 2 && m < self.r);
        self.delta_base[pipe] + (3 + 3 * m) * self.h + step
    }

    /// Continuous-variable count of one node's block: H(2 + a |N|) with a = 2
    /// for the cone model and 2 + r for the piecewise model.
    pub fn y_len_of_node(&self, index: &NetworkIndex, node: usize) -> usize {
        let deg = index.pipes_of_node[node].len();
        let aux = if self.r == 0 { 2 } else { 2 + self.r };
        self.h * (2 + aux * deg)
    }

    /// Indicator count of one node's block: H|N| (cone) or H(1+3r)|N|.
    pub fn z_len_of_node(&self, index: &NetworkIndex, node: usize) -> usize {
        let deg = index.pipes_of_node[node].len();
        let per = if self.r == 0 { 1 } else { 1 + 3 * self.r };
        self.h * per * deg
    }
}

/// Secant coefficients of the piecewise model. Region m covers
/// [breakpoints[m], breakpoints[m+1]] and approximates phi^2/c_f^2 by
/// a[m] * phi + b[m], exact at both endpoints.
#[derive(Debug, Clone, Serialize)]
pub struct PipeSegments {
    pub breakpoints: Vec<f64>,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
}

/// Per-directed-pipe secants, aligned with `NetworkIndex::directed_pipes`.
#[derive(Debug, Clone, Serialize)]
pub struct PwaSegments {
    pub r: usize,
    pub pipes: Vec<PipeSegments>,
}

impl PwaSegments {
    /// Region containing `phi`, ties to the lower index.
    pub fn region_of(&self, pipe: usize, phi: f64) -> Result<usize, GasModelError> {
        let seg = &self.pipes[pipe];
        let cap = *seg.breakpoints.last().unwrap();
        if phi < seg.breakpoints[0] || phi > cap {
            return Err(GasModelError::FlowOutOfRange { pipe, flow: phi, cap });
        }
        for m in 0..self.r {
            if phi <= seg.breakpoints[m + 1] {
                return Ok(m);
            }
        }
        Ok(self.r - 1)
    }
}

/// Evaluates the piecewise approximation of phi^2/c_f^2 at `phi`, selecting
/// exactly one region (boundary ties go to the lower index).
pub fn pwa_eval(segments: &PwaSegments, pipe: usize, phi: f64) -> Result<f64, GasModelError> {
    let m = segments.region_of(pipe, phi)?;
    let seg = &segments.pipes[pipe];
    Ok(seg.a[m] * phi + seg.b[m])
}

fn secants(c_f: f64, breakpoints: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let c2 = c_f * c_f;
    let mut a = Vec::with_capacity(breakpoints.len() - 1);
    let mut b = Vec::with_capacity(breakpoints.len() - 1);
    for w in breakpoints.windows(2) {
        let (lo, hi) = (w[0], w[1]);
        let slope = (hi * hi - lo * lo) / (c2 * (hi - lo));
        a.push(slope);
        b.push(lo * lo / c2 - slope * lo);
    }
    (a, b)
}

fn uniform_breakpoints(phi_max: f64, r: usize) -> Vec<f64> {
    (0..=r)
        .map(|m| -phi_max + 2.0 * phi_max * (m as f64) / (r as f64))
        .collect()
}

/// Builds the piecewise-affine model with `r` uniform regions per pipe.
pub fn build_pwa(
    network: &Network,
    r: usize,
) -> Result<(PwaSegments, GasVariableMap, GasConstraintBlocks), GasModelError> {
    build_pwa_with(network, r, None)
}

/// Same as [`build_pwa`] with caller-supplied breakpoints (shared by all
/// pipes after clipping to each pipe's capacity is the caller's business;
/// the list must start at -phi_max and end at +phi_max of each pipe, so in
/// practice custom breakpoints suit networks with uniform capacities).
pub fn build_pwa_with(
    network: &Network,
    r: usize,
    breakpoints: Option<&[f64]>,
) -> Result<(PwaSegments, GasVariableMap, GasConstraintBlocks), GasModelError> {
    if r < 2 {
        return Err(GasModelError::TooFewRegions(r));
    }
    let index = network.index();
    let h = network.horizon_len();
    let map = GasVariableMap::build(&index, h, r);

    let mut pipes = Vec::with_capacity(index.directed_pipes.len());
    for d in &index.directed_pipes {
        if !(d.phi_max.is_finite() && d.phi_max > 0.0) {
            return Err(GasModelError::BadPipe(d.tail, d.head, "phi_max must be positive".into()));
        }
        let bps = match breakpoints {
            Some(list) => {
                let ok = list.len() == r + 1
                    && (list[0] + d.phi_max).abs() <= 1e-12 * d.phi_max.max(1.0)
                    && (list[r] - d.phi_max).abs() <= 1e-12 * d.phi_max.max(1.0)
                    && list.windows(2).all(|w| w[0] < w[1]);
                if !ok {
                    return Err(GasModelError::BadPipe(
                        d.tail,
                        d.head,
                        "breakpoints must strictly increase from -phi_max to +phi_max".into(),
                    ));
                }
                list.to_vec()
            }
            None => uniform_breakpoints(d.phi_max, r),
        };
        let (a, b) = secants(d.c_f, &bps);
        pipes.push(PipeSegments { breakpoints: bps, a, b });
    }
    let segments = PwaSegments { r, pipes };

    let mut blocks = GasConstraintBlocks::default();
    emit_shared_rows(&index, &map, &mut blocks);

    use GasVar::{Y, Z};
    for (k, d) in index.directed_pipes.iter().enumerate() {
        let seg = &segments.pipes[k];
        let rev = d.reverse;
        let (psi_lo_i, psi_hi_i) = node_psi_bounds(network, d.tail);
        let (psi_lo_j, psi_hi_j) = node_psi_bounds(network, d.head);
        for step in 0..h {
            let phi = Y(map.phi(k, step));
            let delta = Z(map.delta(k, step));
            let psi_i = Y(map.psi(d.tail, step));
            let psi_j = Y(map.psi(d.head, step));
            let nu_psi = Y(map.nu_psi(k, step));
            let nu_psi_rev = Y(map.nu_psi(rev, step));

            // Linearized flow equation:
            // sum_m (a_m nu_m + b_m gamma_m) - 2 nu_psi(i,j) - 2 nu_psi(j,i) + psi_i + psi_j = 0.
            let mut terms = Vec::with_capacity(2 * r + 4);
            for m in 0..r {
                terms.push((Y(map.nu_m(k, m, step)), seg.a[m]));
                terms.push((Z(map.gamma(k, m, step)), seg.b[m]));
            }
            terms.push((nu_psi, -2.0));
            terms.push((nu_psi_rev, -2.0));
            terms.push((psi_i, 1.0));
            terms.push((psi_j, 1.0));
            blocks.h_cpl.push(GasRow { family: "pwa_flow_eq", terms, rhs: 0.0 });

            // Exactly one active region.
            blocks.h_loc.push(GasRow {
                family: "pwa_region_sum",
                terms: (0..r).map(|m| (Z(map.gamma(k, m, step)), 1.0)).collect(),
                rhs: 1.0,
            });

            // Pressure-sign logic: delta = 1 <=> psi_i >= psi_j.
            blocks.g_cpl.push(GasRow {
                family: "pressure_sign",
                terms: vec![(psi_i, -1.0), (psi_j, 1.0), (delta, -(psi_lo_i - psi_hi_j))],
                rhs: -(psi_lo_i - psi_hi_j),
            });
            blocks.g_cpl.push(GasRow {
                family: "pressure_sign",
                terms: vec![(psi_i, 1.0), (psi_j, -1.0), (delta, -(psi_hi_i - psi_lo_j))],
                rhs: 0.0,
            });

            emit_direction_rows(&mut blocks, phi, delta, d.phi_max);

            for m in 0..r {
                let (lo_m, hi_m) = (seg.breakpoints[m], seg.breakpoints[m + 1]);
                let alpha = Z(map.alpha(k, m, step));
                let beta = Z(map.beta(k, m, step));
                let gamma = Z(map.gamma(k, m, step));
                let nu_m = Y(map.nu_m(k, m, step));
                let cap = d.phi_max;

                // alpha = 1 <=> phi <= hi_m.
                blocks.g_loc.push(GasRow {
                    family: "pwa_region_logic",
                    terms: vec![(phi, 1.0), (alpha, cap - hi_m)],
                    rhs: cap,
                });
                blocks.g_loc.push(GasRow {
                    family: "pwa_region_logic",
                    terms: vec![(phi, -1.0), (alpha, -(cap + hi_m))],
                    rhs: -hi_m,
                });
                // beta = 1 <=> phi >= lo_m.
                blocks.g_loc.push(GasRow {
                    family: "pwa_region_logic",
                    terms: vec![(phi, -1.0), (beta, cap + lo_m)],
                    rhs: cap,
                });
                blocks.g_loc.push(GasRow {
                    family: "pwa_region_logic",
                    terms: vec![(phi, 1.0), (beta, -(cap - lo_m))],
                    rhs: lo_m,
                });
                // gamma = alpha AND beta.
                blocks.g_loc.push(GasRow {
                    family: "pwa_region_logic",
                    terms: vec![(alpha, -1.0), (gamma, 1.0)],
                    rhs: 0.0,
                });
                blocks.g_loc.push(GasRow {
                    family: "pwa_region_logic",
                    terms: vec![(beta, -1.0), (gamma, 1.0)],
                    rhs: 0.0,
                });
                blocks.g_loc.push(GasRow {
                    family: "pwa_region_logic",
                    terms: vec![(alpha, 1.0), (beta, 1.0), (gamma, -1.0)],
                    rhs: 1.0,
                });

                // nu_m = gamma * phi by envelope.
                blocks.g_loc.push(GasRow {
                    family: "pwa_flow_product",
                    terms: vec![(nu_m, -1.0), (gamma, -cap)],
                    rhs: 0.0,
                });
                blocks.g_loc.push(GasRow {
                    family: "pwa_flow_product",
                    terms: vec![(nu_m, 1.0), (gamma, -cap)],
                    rhs: 0.0,
                });
                blocks.g_loc.push(GasRow {
                    family: "pwa_flow_product",
                    terms: vec![(nu_m, 1.0), (phi, -1.0), (gamma, cap)],
                    rhs: cap,
                });
                blocks.g_loc.push(GasRow {
                    family: "pwa_flow_product",
                    terms: vec![(nu_m, -1.0), (phi, 1.0), (gamma, cap)],
                    rhs: cap,
                });
            }

            // nu_psi = delta * psi_i by envelope on [psi_lo_i, psi_hi_i].
            blocks.g_loc.push(GasRow {
                family: "pwa_pressure_product",
                terms: vec![(nu_psi, -1.0), (delta, psi_lo_i)],
                rhs: 0.0,
            });
            blocks.g_loc.push(GasRow {
                family: "pwa_pressure_product",
                terms: vec![(nu_psi, 1.0), (delta, -psi_hi_i)],
                rhs: 0.0,
            });
            blocks.g_loc.push(GasRow {
                family: "pwa_pressure_product",
                terms: vec![(nu_psi, 1.0), (psi_i, -1.0), (delta, -psi_lo_i)],
                rhs: -psi_lo_i,
            });
            blocks.g_loc.push(GasRow {
                family: "pwa_pressure_product",
                terms: vec![(nu_psi, -1.0), (psi_i, 1.0), (delta, -psi_hi_i)],
                rhs: psi_hi_i,
            });
        }
    }

    Ok((segments, map, blocks))
}

/// Builds the second-order-cone model.
pub fn build_misoc(
    network: &Network,
) -> Result<(GasVariableMap, GasConstraintBlocks), GasModelError> {
    let index = network.index();
    let h = network.horizon_len();
    for node in &network.gas_nodes {
        if !node.psi_max.is_finite() {
            return Err(GasModelError::BadNode(
                node.id,
                "envelope rows need finite psi_max".into(),
            ));
        }
    }
    let map = GasVariableMap::build(&index, h, 0);
    let mut blocks = GasConstraintBlocks::default();
    emit_shared_rows(&index, &map, &mut blocks);

    use GasVar::{Y, Z};
    for (k, d) in index.directed_pipes.iter().enumerate() {
        let (psi_lo_i, psi_hi_i) = node_psi_bounds(network, d.tail);
        let (psi_lo_j, psi_hi_j) = node_psi_bounds(network, d.head);
        for step in 0..h {
            let phi = Y(map.phi(k, step));
            let nu = Y(map.nu(k, step));
            let delta = Z(map.delta(k, step));
            let psi_i = Y(map.psi(d.tail, step));
            let psi_j = Y(map.psi(d.head, step));

            emit_direction_rows(&mut blocks, phi, delta, d.phi_max);

            // Relaxed cone nu >= (phi / c_f)^2.
            blocks.cones.push(GasCone {
                family: "weymouth_cone",
                epigraph: nu,
                arg: (phi, 1.0 / d.c_f),
            });

            // Envelope rows pinning nu to (2 delta - 1)(psi_i - psi_j) at
            // integral delta.
            blocks.g_cpl.push(GasRow {
                family: "mccormick_lb_near",
                terms: vec![(nu, -1.0), (psi_j, 1.0), (psi_i, -1.0), (delta, 2.0 * (psi_lo_i - psi_hi_j))],
                rhs: 0.0,
            });
            blocks.g_cpl.push(GasRow {
                family: "mccormick_lb_far",
                terms: vec![(nu, -1.0), (psi_i, 1.0), (psi_j, -1.0), (delta, 2.0 * (psi_hi_i - psi_lo_j))],
                rhs: 2.0 * (psi_hi_i - psi_lo_j),
            });
            blocks.g_cpl.push(GasRow {
                family: "mccormick_ub_near",
                terms: vec![(nu, 1.0), (psi_j, -1.0), (psi_i, 1.0), (delta, -2.0 * (psi_hi_i - psi_lo_j))],
                rhs: 0.0,
            });
            blocks.g_cpl.push(GasRow {
                family: "mccormick_ub_far",
                terms: vec![(nu, 1.0), (psi_i, -1.0), (psi_j, 1.0), (delta, -2.0 * (psi_lo_i - psi_hi_j))],
                rhs: -2.0 * (psi_lo_i - psi_hi_j),
            });
        }
    }

    Ok((map, blocks))
}

fn node_psi_bounds(network: &Network, node_pos: usize) -> (f64, f64) {
    let n = &network.gas_nodes[node_pos];
    (n.psi_min, n.psi_max)
}

/// Rows common to both models: gas balance per node and step, and flow
/// reciprocity once per undirected pipe and step.
fn emit_shared_rows(index: &NetworkIndex, map: &GasVariableMap, blocks: &mut GasConstraintBlocks) {
    use GasVar::{GasUse, Y};
    let h = map.h;
    for node in 0..map.n_nodes {
        for step in 0..h {
            // g_s - sum_j phi - (d_gu + d_g) = 0.
            let mut terms = vec![(Y(map.gs(node, step)), 1.0)];
            for &k in &index.pipes_of_node[node] {
                terms.push((Y(map.phi(k, step)), -1.0));
            }
            terms.push((GasUse { node, step }, -1.0));
            blocks.h_cpl.push(GasRow { family: "gas_balance", terms, rhs: 0.0 });
        }
    }
    for (k, d) in index.directed_pipes.iter().enumerate() {
        if k < d.reverse {
            for step in 0..h {
                blocks.h_cpl.push(GasRow {
                    family: "flow_reciprocity",
                    terms: vec![(Y(map.phi(k, step)), 1.0), (Y(map.phi(d.reverse, step)), 1.0)],
                    rhs: 0.0,
                });
            }
        }
    }
}

/// Flow-direction big-M: -phi_max (1 - delta) <= phi <= phi_max delta.
fn emit_direction_rows(blocks: &mut GasConstraintBlocks, phi: GasVar, delta: GasVar, cap: f64) {
    blocks.g_loc.push(GasRow {
        family: "flow_direction",
        terms: vec![(phi, 1.0), (delta, -cap)],
        rhs: 0.0,
    });
    blocks.g_loc.push(GasRow {
        family: "flow_direction",
        terms: vec![(phi, -1.0), (delta, cap)],
        rhs: cap,
    });
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netmodel::{GasNode, GasPipe, Network};

    fn toy(c_f: f64, phi_max: f64) -> Network {
        let mut net = crate::netmodel::tests::minimal_network();
        net.pipes = vec![GasPipe { from: 1, to: 2, c_f, phi_max }];
        net.validate().unwrap();
        net
    }

    #[test]
    fn weymouth_examples() {
        assert_eq!(weymouth_flow(4.0, 0.0, 1.0), 2.0);
        assert_eq!(weymouth_flow(1.0, 1.0, 5.0), 0.0);
        assert_eq!(weymouth_flow(0.0, 9.0, 2.0), -6.0);
    }

    #[test]
    fn secant_coefficients_match_hand_values() {
        // Region [0, 2] with c_f = 1: chord of phi^2 through (0,0) and (2,4).
        let (a, b) = secants(1.0, &[0.0, 2.0]);
        assert!((a[0] - 2.0).abs() < 1e-15);
        assert!(b[0].abs() < 1e-15);
        // Symmetric region [-1, 1]: slope 0, intercept 1.
        let (a, b) = secants(1.0, &[-1.0, 1.0]);
        assert!(a[0].abs() < 1e-15);
        assert!((b[0] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn uniform_breakpoints_partition_the_capacity() {
        assert_eq!(uniform_breakpoints(3.0, 3), vec![-3.0, -1.0, 1.0, 3.0]);
    }

    #[test]
    fn pwa_eval_examples() {
        let net = toy(1.0, 2.0);
        let (segments, _, _) = build_pwa(&net, 2).unwrap();
        // Regions [-2, 0] and [0, 2]; at the breakpoint the approximation is
        // exact, inside it over-approximates.
        assert!((pwa_eval(&segments, 0, 2.0).unwrap() - 4.0).abs() < 1e-12);
        assert!((pwa_eval(&segments, 0, 1.0).unwrap() - 2.0).abs() < 1e-12);
        // Shared breakpoint of regions 1 and 2 goes to the lower region.
        assert_eq!(segments.region_of(0, 0.0).unwrap(), 0);
        assert!(pwa_eval(&segments, 0, 2.5).is_err());
    }

    #[test]
    fn pwa_endpoint_exactness_and_overapproximation() {
        let net = toy(1.7, 2.6);
        for r in [2, 5, 20] {
            let (segments, _, _) = build_pwa(&net, r).unwrap();
            for (pipe, seg) in segments.pipes.iter().enumerate() {
                let c2 = 1.7f64 * 1.7;
                let scale = (2.6f64 * 2.6 / c2).max(1.0);
                for m in 0..r {
                    for phi in [seg.breakpoints[m], seg.breakpoints[m + 1]] {
                        let exact = phi * phi / c2;
                        let approx = seg.a[m] * phi + seg.b[m];
                        assert!((approx - exact).abs() <= 1e-12 * scale);
                    }
                    // Secant of a convex function lies above it inside the region.
                    for t in 1..100 {
                        let phi = seg.breakpoints[m]
                            + (seg.breakpoints[m + 1] - seg.breakpoints[m]) * (t as f64) / 100.0;
                        let exact = phi * phi / c2;
                        let approx = pwa_eval(&segments, pipe, phi).unwrap();
                        assert!(approx >= exact - 1e-12 * scale);
                    }
                }
            }
        }
    }

    #[test]
    fn refinement_shrinks_worst_case_error() {
        let net = toy(1.3, 3.0);
        let err = |r: usize| {
            let (segments, _, _) = build_pwa(&net, r).unwrap();
            let mut worst: f64 = 0.0;
            for t in 0..=600 {
                let phi = -3.0 + 6.0 * (t as f64) / 600.0;
                let exact = phi * phi / (1.3 * 1.3);
                let approx = pwa_eval(&segments, 0, phi).unwrap();
                worst = worst.max((approx - exact).abs());
            }
            worst
        };
        assert!(err(45) <= err(20));
    }

    #[test]
    fn pwa_needs_two_regions() {
        let net = toy(1.0, 2.0);
        assert!(matches!(build_pwa(&net, 1), Err(GasModelError::TooFewRegions(1))));
    }

    #[test]
    fn variable_counts_match_model_formulas() {
        // Two nodes, one pipe, H = 1: cone model has H(2 + 2*1) = 4 per node.
        let net = toy(1.0, 3.0);
        let idx = net.index();
        let (map, _) = build_misoc(&net).unwrap();
        assert_eq!(map.y_len_of_node(&idx, 0), 4);
        assert_eq!(map.z_len_of_node(&idx, 0), 1);
        assert_eq!(map.n_y, 8);
        assert_eq!(map.n_z, 2);
        let (_, map, _) = build_pwa(&net, 3).unwrap();
        assert_eq!(map.y_len_of_node(&idx, 0), 2 + (2 + 3));
        assert_eq!(map.z_len_of_node(&idx, 0), 1 + 9);
    }

    #[test]
    fn variable_counts_on_random_trees() {
        use rand::Rng;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for _ in 0..10 {
            let n = rng.gen_range(2..9usize);
            let h = rng.gen_range(1..4usize);
            let mut net = crate::netmodel::tests::minimal_network();
            net.horizon.h = h;
            for b in &mut net.buses {
                b.d_e = vec![0.1; h];
            }
            net.gas_nodes = (1..=n)
                .map(|id| GasNode {
                    id,
                    psi_min: 0.0,
                    psi_max: 100.0,
                    d_g: vec![0.1; h],
                    is_source: id == 1,
                })
                .collect();
            // Random tree: attach each node to a random predecessor.
            net.pipes = (2..=n)
                .map(|id| GasPipe {
                    from: rng.gen_range(1..id),
                    to: id,
                    c_f: 1.0,
                    phi_max: 2.0,
                })
                .collect();
            net.market.q_e = vec![0.1; h];
            net.market.l_e = vec![0.0; h];
            net.market.q_g = vec![0.1; h];
            net.market.l_g = vec![0.0; h];
            // Skip full validation (buses don't match gas nodes here); the
            // variable map only needs the gas topology.
            let idx = net.index();
            let r = rng.gen_range(2..6usize);
            let map = GasVariableMap::build(&idx, h, r);
            let cone_map = GasVariableMap::build(&idx, h, 0);
            for node in 0..n {
                let deg = idx.pipes_of_node[node].len();
                assert_eq!(map.y_len_of_node(&idx, node), h * (2 + (2 + r) * deg));
                assert_eq!(map.z_len_of_node(&idx, node), h * (1 + 3 * r) * deg);
                assert_eq!(cone_map.y_len_of_node(&idx, node), h * (2 + 2 * deg));
                assert_eq!(cone_map.z_len_of_node(&idx, node), h * deg);
            }
            let total_y: usize = (0..n).map(|v| map.y_len_of_node(&idx, v)).sum();
            assert_eq!(total_y, map.n_y);
        }
    }

    /// Envelope rows evaluated at fixed (delta, psi_i, psi_j): the admissible
    /// interval for nu.
    fn envelope_interval(
        blocks: &GasConstraintBlocks,
        map: &GasVariableMap,
        pipe: usize,
        delta: f64,
        psi: [f64; 2],
    ) -> (f64, f64) {
        let mut lo = f64::NEG_INFINITY;
        let mut hi = f64::INFINITY;
        for row in &blocks.g_cpl {
            let mut nu_coef = 0.0;
            let mut rest = -row.rhs;
            for (var, coef) in &row.terms {
                match var {
                    GasVar::Y(y) if *y == map.nu(pipe, 0) => nu_coef += coef,
                    GasVar::Y(y) if *y == map.psi(0, 0) => rest += coef * psi[0],
                    GasVar::Y(y) if *y == map.psi(1, 0) => rest += coef * psi[1],
                    GasVar::Z(_) => rest += coef * delta,
                    _ => panic!("unexpected term"),
                }
            }
            // nu_coef * nu + rest <= 0.
            if nu_coef > 0.0 {
                hi = hi.min(-rest / nu_coef);
            } else {
                lo = lo.max(rest / -nu_coef);
            }
        }
        (lo, hi)
    }

    #[test]
    fn mccormick_envelopes_pin_nu_at_integral_delta() {
        let net = toy(1.0, 3.0);
        let (map, blocks) = build_misoc(&net).unwrap();
        // Keep only rows of the first directed pipe (tail node 0).
        let pipe = 0;
        let first_pipe_rows = GasConstraintBlocks {
            g_cpl: blocks
                .g_cpl
                .iter()
                .filter(|r| {
                    r.terms.iter().any(|(v, _)| matches!(v, GasVar::Y(y) if *y == map.nu(pipe, 0)))
                })
                .cloned()
                .collect(),
            ..Default::default()
        };
        assert_eq!(first_pipe_rows.g_cpl.len(), 4);
        // Bounds are [0, 100] on both nodes: grid over the box.
        for delta in [0.0, 1.0] {
            for gi in 0..=10 {
                for gj in 0..=10 {
                    let psi = [10.0 * gi as f64, 10.0 * gj as f64];
                    let (lo, hi) = envelope_interval(&first_pipe_rows, &map, pipe, delta, psi);
                    let expect = (2.0 * delta - 1.0) * (psi[0] - psi[1]);
                    assert!((lo - expect).abs() < 1e-9, "lo {lo} vs {expect}");
                    assert!((hi - expect).abs() < 1e-9, "hi {hi} vs {expect}");
                }
            }
        }
    }

    #[test]
    fn mccormick_hand_example() {
        // delta = 1, bounds [0, 10] on both nodes, psi = (4, 1): nu is forced
        // to psi_i - psi_j = 3. delta = 0 forces the negation.
        let mut net = toy(1.0, 3.0);
        for n in &mut net.gas_nodes {
            n.psi_max = 10.0;
        }
        let (map, blocks) = build_misoc(&net).unwrap();
        let rows = GasConstraintBlocks {
            g_cpl: blocks
                .g_cpl
                .iter()
                .filter(|r| {
                    r.terms.iter().any(|(v, _)| matches!(v, GasVar::Y(y) if *y == map.nu(0, 0)))
                })
                .cloned()
                .collect(),
            ..Default::default()
        };
        let (lo, hi) = envelope_interval(&rows, &map, 0, 1.0, [4.0, 1.0]);
        assert!((lo - 3.0).abs() < 1e-12 && (hi - 3.0).abs() < 1e-12);
        // At delta = 0 the envelopes force nu = psi_j - psi_i = -3, which the
        // cone nu >= phi^2/c^2 >= 0 rejects: feasible points with delta = 0
        // must have psi_j >= psi_i.
        let (lo, hi) = envelope_interval(&rows, &map, 0, 0.0, [4.0, 1.0]);
        assert!((lo + 3.0).abs() < 1e-12 && (hi + 3.0).abs() < 1e-12);
    }

    #[test]
    fn cone_list_only_in_cone_model() {
        let net = toy(1.0, 3.0);
        let (_, blocks) = build_misoc(&net).unwrap();
        assert_eq!(blocks.cones.len(), 2); // two directed labels, H = 1
        let (_, _, blocks) = build_pwa(&net, 2).unwrap();
        assert!(blocks.cones.is_empty());
    }

    #[test]
    fn misoc_rejects_unbounded_pressure() {
        let mut net = toy(1.0, 3.0);
        net.gas_nodes[0].psi_max = f64::INFINITY;
        assert!(build_misoc(&net).is_err());
    }
}
