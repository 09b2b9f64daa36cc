//! Stage two of the dispatch pipeline: recover integral indicators from the
//! relaxed flows, recompute nodal pressures by a small per-step linear
//! program (or its exact tree solution when one fits the bounds), rebuild the
//! auxiliary variables from their defining products, and test the
//! shift-feasibility condition that characterizes zero recovery error.

use nalgebra::DMatrix;
use serde::Serialize;
use thiserror::Error;

use crate::conic::{self, ConicProblem, SolveSettings, SolveStatus, SparseRow};
use crate::game::{GameInstance, GasModelChoice, Strategy};
use crate::gasflow::PwaSegments;
use crate::netmodel::{is_spanning_tree, NetworkError};

#[derive(Debug, Error)]
pub enum RecoveryError {
    #[error("flow {flow} exceeds capacity {cap} on directed pipe {pipe}")]
    FlowOutOfRange { pipe: usize, flow: f64, cap: f64 },
    #[error("pressure recovery solve failed with status {0:?}")]
    SolveFailed(SolveStatus),
    #[error(transparent)]
    Conic(#[from] conic::ConicError),
    #[error("the gas graph is not a tree; exact pressure recovery is unavailable and the recovery program reports a positive error instead")]
    NotATree(#[source] NetworkError),
    #[error("pseudo-inverse residual {0} exceeds tolerance; right-hand side inconsistent")]
    InconsistentSystem(f64),
}

/// Integral indicators recovered from relaxed flows: direction flags per
/// directed pipe and step, and for the piecewise model the region indicators.
#[derive(Debug, Clone, Serialize)]
pub struct RecoveredBinaries {
    /// delta[pipe][step] in {0, 1}; 1 when the relaxed flow is nonnegative.
    pub delta: Vec<Vec<u8>>,
    /// gamma[pipe][step][m]: active-region one-hot (piecewise model only).
    pub gamma: Option<Vec<Vec<Vec<u8>>>>,
    /// alpha[pipe][step][m] = 1 iff the flow is at or below the region's
    /// upper breakpoint; beta mirrors it for the lower breakpoint.
    pub alpha: Option<Vec<Vec<Vec<u8>>>>,
    pub beta: Option<Vec<Vec<Vec<u8>>>>,
}

impl RecoveredBinaries {
    /// Expands into a flat indicator vector in the instance's z layout.
    pub fn to_z_vector(&self, instance: &GameInstance) -> Vec<f64> {
        let map = &instance.gas_map;
        let mut z = vec![0.0; map.n_z];
        for pipe in 0..map.n_directed {
            for step in 0..map.h {
                z[map.delta(pipe, step)] = f64::from(self.delta[pipe][step]);
            }
        }
        if let (Some(gamma), Some(alpha), Some(beta)) = (&self.gamma, &self.alpha, &self.beta) {
            for pipe in 0..map.n_directed {
                for step in 0..map.h {
                    for m in 0..map.r {
                        z[map.gamma(pipe, m, step)] = f64::from(gamma[pipe][step][m]);
                        z[map.alpha(pipe, m, step)] = f64::from(alpha[pipe][step][m]);
                        z[map.beta(pipe, m, step)] = f64::from(beta[pipe][step][m]);
                    }
                }
            }
        }
        z
    }
}

/// Relaxed flows per directed pipe and step, extracted from a strategy.
pub fn flows_of(instance: &GameInstance, strategy: &Strategy) -> Vec<Vec<f64>> {
    let map = &instance.gas_map;
    (0..map.n_directed)
        .map(|pipe| {
            (0..map.h)
                .map(|step| strategy.u[instance.layout.y_global(map.phi(pipe, step))])
                .collect()
        })
        .collect()
}

/// Direction flags from the sign rule (nonnegative flow means 1) and, for the
/// piecewise model, region indicators with boundary ties resolved to the
/// lower region. The recovered alpha/beta/gamma always satisfy the linking
/// rows they were derived from; this is asserted on every call.
pub fn recover_binaries(
    segments: Option<&PwaSegments>,
    phi_hat: &[Vec<f64>],
    capacities: &[f64],
) -> Result<RecoveredBinaries, RecoveryError> {
    let n_pipes = phi_hat.len();
    for (pipe, flows) in phi_hat.iter().enumerate() {
        for &flow in flows {
            // Relaxed solutions sit within solver accuracy of the box.
            if flow.abs() > capacities[pipe] * (1.0 + 1e-6) + 1e-6 {
                return Err(RecoveryError::FlowOutOfRange {
                    pipe,
                    flow,
                    cap: capacities[pipe],
                });
            }
        }
    }
    let delta: Vec<Vec<u8>> = phi_hat
        .iter()
        .map(|flows| flows.iter().map(|&f| u8::from(f >= 0.0)).collect())
        .collect();

    let (gamma, alpha, beta) = match segments {
        None => (None, None, None),
        Some(seg) => {
            let r = seg.r;
            let mut gamma = vec![Vec::new(); n_pipes];
            let mut alpha = vec![Vec::new(); n_pipes];
            let mut beta = vec![Vec::new(); n_pipes];
            for pipe in 0..n_pipes {
                for &flow in &phi_hat[pipe] {
                    let clamped = flow.clamp(seg.pipes[pipe].breakpoints[0], *seg.pipes[pipe].breakpoints.last().unwrap());
                    let active = seg.region_of(pipe, clamped).expect("clamped into range");
                    let g: Vec<u8> = (0..r).map(|m| u8::from(m == active)).collect();
                    let a: Vec<u8> = (0..r).map(|m| u8::from(m >= active)).collect();
                    let b: Vec<u8> = (0..r).map(|m| u8::from(m <= active)).collect();
                    for m in 0..r {
                        // Linking rows of the region logic.
                        assert!(g[m] <= a[m] && g[m] <= b[m]);
                        assert!(a[m] + b[m] <= 1 + g[m]);
                        // Big-M rows at the recovered point.
                        let s = &seg.pipes[pipe];
                        if a[m] == 1 {
                            assert!(clamped <= s.breakpoints[m + 1] + 1e-9);
                        } else {
                            assert!(clamped >= s.breakpoints[m + 1] - 1e-9);
                        }
                        if b[m] == 1 {
                            assert!(clamped >= s.breakpoints[m] - 1e-9);
                        } else {
                            assert!(clamped <= s.breakpoints[m] + 1e-9);
                        }
                    }
                    gamma[pipe].push(g);
                    alpha[pipe].push(a);
                    beta[pipe].push(b);
                }
            }
            (Some(gamma), Some(alpha), Some(beta))
        }
    };

    Ok(RecoveredBinaries { delta, gamma, alpha, beta })
}

/// One step's signed-incidence system: row k covers directed pipe k with
/// sign 2 delta - 1 at the tail and the negation at the head; theta holds the
/// required pressure drops.
#[derive(Debug, Clone, Serialize)]
pub struct StepSystem {
    pub n_nodes: usize,
    /// (tail, head, sign) per directed pipe.
    pub rows: Vec<(usize, usize, f64)>,
    pub theta: Vec<f64>,
}

impl StepSystem {
    pub fn apply(&self, psi: &[f64]) -> Vec<f64> {
        self.rows
            .iter()
            .map(|&(tail, head, sign)| sign * (psi[tail] - psi[head]))
            .collect()
    }

    pub fn residual_inf(&self, psi: &[f64]) -> f64 {
        self.apply(psi)
            .iter()
            .zip(&self.theta)
            .map(|(lhs, th)| (lhs - th).abs())
            .fold(0.0, f64::max)
    }

    pub fn dense(&self) -> DMatrix<f64> {
        let mut e = DMatrix::zeros(self.rows.len(), self.n_nodes);
        for (k, &(tail, head, sign)) in self.rows.iter().enumerate() {
            e[(k, tail)] = sign;
            e[(k, head)] = -sign;
        }
        e
    }

    /// Undirected edge list (deduplicated) for tree checks.
    pub fn undirected_edges(&self) -> Vec<(usize, usize)> {
        let mut edges: Vec<(usize, usize)> = self
            .rows
            .iter()
            .map(|&(t, h, _)| (t.min(h), t.max(h)))
            .collect();
        edges.sort_unstable();
        edges.dedup();
        edges
    }
}

/// Builds the cone-model systems: theta is flow squared over c_f squared.
pub fn build_e_theta(
    binaries: &RecoveredBinaries,
    phi_hat: &[Vec<f64>],
    pipes: &[(usize, usize, f64)],
    n_nodes: usize,
) -> Vec<StepSystem> {
    let h = phi_hat.first().map_or(0, Vec::len);
    (0..h)
        .map(|step| StepSystem {
            n_nodes,
            rows: pipes
                .iter()
                .enumerate()
                .map(|(k, &(tail, head, _))| {
                    (tail, head, 2.0 * f64::from(binaries.delta[k][step]) - 1.0)
                })
                .collect(),
            theta: pipes
                .iter()
                .enumerate()
                .map(|(k, &(_, _, c_f))| {
                    let f = phi_hat[k][step];
                    f * f / (c_f * c_f)
                })
                .collect(),
        })
        .collect()
}

/// Builds the piecewise-model systems: theta is the active secant evaluated
/// at the relaxed flow.
pub fn build_e_theta_pwa(
    binaries: &RecoveredBinaries,
    phi_hat: &[Vec<f64>],
    segments: &PwaSegments,
    pipes: &[(usize, usize)],
    n_nodes: usize,
) -> Vec<StepSystem> {
    let h = phi_hat.first().map_or(0, Vec::len);
    let gamma = binaries.gamma.as_ref().expect("piecewise binaries carry gamma");
    (0..h)
        .map(|step| StepSystem {
            n_nodes,
            rows: pipes
                .iter()
                .enumerate()
                .map(|(k, &(tail, head))| {
                    (tail, head, 2.0 * f64::from(binaries.delta[k][step]) - 1.0)
                })
                .collect(),
            theta: (0..pipes.len())
                .map(|k| {
                    let seg = &segments.pipes[k];
                    (0..segments.r)
                        .map(|m| {
                            f64::from(gamma[k][step][m]) * (seg.a[m] * phi_hat[k][step] + seg.b[m])
                        })
                        .sum()
                })
                .collect(),
        })
        .collect()
}

/// Pressure-recovery output for all steps. `tau` is only present for the cone
/// model; `j_psi` is the worst per-step infinity-norm residual of the
/// recovery system at the returned pressures.
#[derive(Debug, Clone, Serialize)]
pub struct PressureRecoveryResult {
    /// psi[step][node].
    pub psi: Vec<Vec<f64>>,
    /// Minimal slack per row, cone model only: tau[step][row].
    pub tau: Option<Vec<Vec<f64>>>,
    pub tau_inf: f64,
    pub j_psi: f64,
    pub j_psi_per_step: Vec<f64>,
    pub systems: Vec<StepSystem>,
}

impl PressureRecoveryResult {
    pub fn to_debug_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("serializable")
    }
}

/// Minimum-norm particular solution of one step's system via a rank-revealing
/// pseudo-inverse. Requires a spanning-tree gas graph; the residual check
/// guards against inconsistent right-hand sides.
pub fn particular_solution_psi0(system: &StepSystem) -> Result<Vec<f64>, RecoveryError> {
    match is_spanning_tree(system.n_nodes, &system.undirected_edges()) {
        Ok(true) => {}
        Ok(false) => {
            return Err(RecoveryError::NotATree(NetworkError::Validation {
                element: "gas graph".into(),
                message: "has a cycle".into(),
            }))
        }
        Err(e) => return Err(RecoveryError::NotATree(e)),
    }
    let psi = pinv_solve(system);
    let residual = system.residual_inf(&psi);
    let scale = system.theta.iter().fold(1.0_f64, |a, t| a.max(t.abs()));
    if residual > 1e-8 * scale {
        return Err(RecoveryError::InconsistentSystem(residual));
    }
    Ok(psi)
}

fn pinv_solve(system: &StepSystem) -> Vec<f64> {
    let e = system.dense();
    let norm = e.norm();
    let svd = e.svd(true, true);
    let theta = nalgebra::DVector::from_column_slice(&system.theta);
    let sol = svd
        .solve(&theta, 1e-10 * norm.max(1.0))
        .expect("svd solve with explicit tolerance");
    sol.iter().copied().collect()
}

/// Exact-fit attempt shared by both recovery programs: the affine family
/// psi0 + shift * 1 solves the system exactly on trees; the smallest shift
/// that fits the box is returned when one exists.
fn exact_fit(system: &StepSystem, bounds: &[(f64, f64)]) -> Option<Vec<f64>> {
    let psi0 = match particular_solution_psi0(system) {
        Ok(p) => p,
        Err(_) => return None,
    };
    let mut shift_lo = f64::NEG_INFINITY;
    let mut shift_hi = f64::INFINITY;
    for (i, &(lo, hi)) in bounds.iter().enumerate() {
        shift_lo = shift_lo.max(lo - psi0[i]);
        shift_hi = shift_hi.min(hi - psi0[i]);
    }
    if shift_lo <= shift_hi {
        Some(psi0.iter().map(|p| p + shift_lo).collect())
    } else {
        None
    }
}

/// Cone-model pressure recovery: per step, minimize
/// w_tau ||tau||_inf + w_j ||E psi - theta||_inf subject to
/// E psi + tau >= theta, tau >= 0, and the pressure box. Steps decouple, so
/// each is solved independently. The slack makes the program always feasible.
pub fn recover_pressures_misoc(
    systems: Vec<StepSystem>,
    bounds: &[(f64, f64)],
    weights: (f64, f64),
    settings: &SolveSettings,
) -> Result<PressureRecoveryResult, RecoveryError> {
    let mut psi_all = Vec::with_capacity(systems.len());
    let mut tau_all = Vec::with_capacity(systems.len());
    let mut j_steps = Vec::with_capacity(systems.len());
    let mut tau_inf = 0.0f64;
    for system in &systems {
        let psi = match exact_fit(system, bounds) {
            Some(psi) => psi,
            None => solve_misoc_step(system, bounds, weights, settings)?,
        };
        let residuals = system.apply(&psi);
        let tau: Vec<f64> = residuals
            .iter()
            .zip(&system.theta)
            .map(|(lhs, th)| (th - lhs).max(0.0))
            .collect();
        tau_inf = tau_inf.max(tau.iter().fold(0.0_f64, |a, t| a.max(*t)));
        j_steps.push(system.residual_inf(&psi));
        psi_all.push(psi);
        tau_all.push(tau);
    }
    let j_psi = j_steps.iter().fold(0.0_f64, |a, j| a.max(*j));
    Ok(PressureRecoveryResult {
        psi: psi_all,
        tau: Some(tau_all),
        tau_inf,
        j_psi,
        j_psi_per_step: j_steps,
        systems,
    })
}

fn solve_misoc_step(
    system: &StepSystem,
    bounds: &[(f64, f64)],
    weights: (f64, f64),
    settings: &SolveSettings,
) -> Result<Vec<f64>, RecoveryError> {
    let n = system.n_nodes;
    let m = system.rows.len();
    // Variables: psi (n), tau (m), t_tau, t_j.
    let mut p = ConicProblem::new(n + m + 2);
    let t_tau = n + m;
    let t_j = n + m + 1;
    p.linear[t_tau] = weights.0;
    p.linear[t_j] = weights.1;
    for (i, &(lo, hi)) in bounds.iter().enumerate() {
        p.lower[i] = lo;
        p.upper[i] = hi;
    }
    for k in 0..m {
        p.lower[n + k] = 0.0;
    }
    p.lower[t_tau] = 0.0;
    p.lower[t_j] = 0.0;
    for (k, &(tail, head, sign)) in system.rows.iter().enumerate() {
        let th = system.theta[k];
        // theta - E psi - tau <= 0
        p.ineq.push(SparseRow {
            terms: vec![(tail, -sign), (head, sign), (n + k, -1.0)],
            rhs: -th,
        });
        // tau_k <= t_tau
        p.ineq.push(SparseRow { terms: vec![(n + k, 1.0), (t_tau, -1.0)], rhs: 0.0 });
        // |E psi - theta| <= t_j
        p.ineq.push(SparseRow {
            terms: vec![(tail, sign), (head, -sign), (t_j, -1.0)],
            rhs: th,
        });
        p.ineq.push(SparseRow {
            terms: vec![(tail, -sign), (head, sign), (t_j, -1.0)],
            rhs: -th,
        });
    }
    let result = conic::solve(&p, settings)?;
    if result.status != SolveStatus::Optimal {
        return Err(RecoveryError::SolveFailed(result.status));
    }
    Ok(result.x[..n].to_vec())
}

/// Piecewise-model pressure recovery: per step, minimize
/// ||E psi - theta||_inf over the pressure box.
pub fn recover_pressures_pwa(
    systems: Vec<StepSystem>,
    bounds: &[(f64, f64)],
    settings: &SolveSettings,
) -> Result<PressureRecoveryResult, RecoveryError> {
    let mut psi_all = Vec::with_capacity(systems.len());
    let mut j_steps = Vec::with_capacity(systems.len());
    for system in &systems {
        let psi = match exact_fit(system, bounds) {
            Some(psi) => psi,
            None => solve_pwa_step(system, bounds, settings)?,
        };
        j_steps.push(system.residual_inf(&psi));
        psi_all.push(psi);
    }
    let j_psi = j_steps.iter().fold(0.0_f64, |a, j| a.max(*j));
    Ok(PressureRecoveryResult {
        psi: psi_all,
        tau: None,
        tau_inf: 0.0,
        j_psi,
        j_psi_per_step: j_steps,
        systems,
    })
}

/// The piecewise recovery program solved strictly as a linear program,
/// bypassing the exact-fit shortcut. The production path and this one must
/// agree on the optimal value; verification suites cross-check them.
pub fn recover_pressures_pwa_lp(
    system: &StepSystem,
    bounds: &[(f64, f64)],
    settings: &SolveSettings,
) -> Result<Vec<f64>, RecoveryError> {
    solve_pwa_step(system, bounds, settings)
}

fn solve_pwa_step(
    system: &StepSystem,
    bounds: &[(f64, f64)],
    settings: &SolveSettings,
) -> Result<Vec<f64>, RecoveryError> {
    let n = system.n_nodes;
    let m = system.rows.len();
    let mut p = ConicProblem::new(n + 1);
    let t_j = n;
    p.linear[t_j] = 1.0;
    p.lower[t_j] = 0.0;
    for (i, &(lo, hi)) in bounds.iter().enumerate() {
        p.lower[i] = lo;
        p.upper[i] = hi;
    }
    for k in 0..m {
        let (tail, head, sign) = system.rows[k];
        let th = system.theta[k];
        p.ineq.push(SparseRow {
            terms: vec![(tail, sign), (head, -sign), (t_j, -1.0)],
            rhs: th,
        });
        p.ineq.push(SparseRow {
            terms: vec![(tail, -sign), (head, sign), (t_j, -1.0)],
            rhs: -th,
        });
    }
    let result = conic::solve(&p, settings)?;
    if result.status != SolveStatus::Optimal {
        return Err(RecoveryError::SolveFailed(result.status));
    }
    Ok(result.x[..n].to_vec())
}

/// Rebuilt auxiliary variables: for the cone model nu[pipe][step]; for the
/// piecewise model (nu_psi[pipe][step], nu_m[pipe][step][m]).
#[derive(Debug, Clone, Serialize)]
pub enum RebuiltAux {
    Cone { nu: Vec<Vec<f64>> },
    Piecewise { nu_psi: Vec<Vec<f64>>, nu_m: Vec<Vec<Vec<f64>>> },
}

/// Recomputes the auxiliaries from their defining products at the recovered
/// binaries, pressures, and relaxed flows.
pub fn rebuild_aux(
    binaries: &RecoveredBinaries,
    pressures: &PressureRecoveryResult,
    phi_hat: &[Vec<f64>],
    pipes: &[(usize, usize)],
) -> RebuiltAux {
    let h = phi_hat.first().map_or(0, Vec::len);
    match &binaries.gamma {
        None => {
            let nu = pipes
                .iter()
                .enumerate()
                .map(|(k, &(tail, head))| {
                    (0..h)
                        .map(|step| {
                            let sign = 2.0 * f64::from(binaries.delta[k][step]) - 1.0;
                            sign * (pressures.psi[step][tail] - pressures.psi[step][head])
                        })
                        .collect()
                })
                .collect();
            RebuiltAux::Cone { nu }
        }
        Some(gamma) => {
            let nu_psi = pipes
                .iter()
                .enumerate()
                .map(|(k, &(tail, _))| {
                    (0..h)
                        .map(|step| {
                            f64::from(binaries.delta[k][step]) * pressures.psi[step][tail]
                        })
                        .collect()
                })
                .collect();
            let r = gamma[0][0].len();
            let nu_m = (0..pipes.len())
                .map(|k| {
                    (0..h)
                        .map(|step| {
                            (0..r)
                                .map(|m| f64::from(gamma[k][step][m]) * phi_hat[k][step])
                                .collect()
                        })
                        .collect()
                })
                .collect();
            RebuiltAux::Piecewise { nu_psi, nu_m }
        }
    }
}

/// Shift-feasibility test per step: with j the smallest-upper-bound node
/// among the maximizers of psi0 and k the largest-upper-bound node among the
/// minimizers, the recovery error can reach zero iff
/// psi0_j - psi0_k <= hi_j - lo_k. Ties resolve to the lowest node index.
pub fn prop4_condition(psi0: &[f64], bounds: &[(f64, f64)]) -> bool {
    let n = psi0.len();
    let max = psi0.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let min = psi0.iter().cloned().fold(f64::INFINITY, f64::min);
    let tol = 1e-9 * (1.0 + max.abs().max(min.abs()));
    let argmax: Vec<usize> = (0..n).filter(|&i| psi0[i] >= max - tol).collect();
    let argmin: Vec<usize> = (0..n).filter(|&i| psi0[i] <= min + tol).collect();
    let j = *argmax
        .iter()
        .min_by(|&&a, &&b| bounds[a].1.partial_cmp(&bounds[b].1).unwrap().then(a.cmp(&b)))
        .unwrap();
    let k = *argmin
        .iter()
        .min_by(|&&a, &&b| bounds[b].1.partial_cmp(&bounds[a].1).unwrap().then(a.cmp(&b)))
        .unwrap();
    psi0[j] - psi0[k] <= bounds[j].1 - bounds[k].0
}

/// Assembles the recovered mixed-integer candidate: x and the relaxed source
/// imports and flows stay, pressures and auxiliaries are replaced by their
/// recovered values, and the indicator block becomes integral.
pub fn assemble_recovered_strategy(
    instance: &GameInstance,
    relaxed: &Strategy,
    binaries: &RecoveredBinaries,
    pressures: &PressureRecoveryResult,
    aux: &RebuiltAux,
    phi_hat: &[Vec<f64>],
) -> Strategy {
    let map = &instance.gas_map;
    let layout = &instance.layout;
    let mut u = relaxed.u.clone();
    for node in 0..map.n_nodes {
        for step in 0..map.h {
            u[layout.y_global(map.psi(node, step))] = pressures.psi[step][node];
        }
    }
    for pipe in 0..map.n_directed {
        for step in 0..map.h {
            u[layout.y_global(map.phi(pipe, step))] = phi_hat[pipe][step];
        }
    }
    match aux {
        RebuiltAux::Cone { nu } => {
            for pipe in 0..map.n_directed {
                for step in 0..map.h {
                    u[layout.y_global(map.nu(pipe, step))] = nu[pipe][step];
                }
            }
        }
        RebuiltAux::Piecewise { nu_psi, nu_m } => {
            for pipe in 0..map.n_directed {
                for step in 0..map.h {
                    u[layout.y_global(map.nu_psi(pipe, step))] = nu_psi[pipe][step];
                    for m in 0..map.r {
                        u[layout.y_global(map.nu_m(pipe, m, step))] = nu_m[pipe][step][m];
                    }
                }
            }
        }
    }
    let z = binaries.to_z_vector(instance);
    u[layout.z_off..layout.n_u].copy_from_slice(&z);
    Strategy { u }
}

/// Directed-pipe tuples (tail, head, c_f) of an instance, in pipe order.
pub fn pipe_tuples(instance: &GameInstance) -> Vec<(usize, usize, f64)> {
    instance
        .directed_pipes
        .iter()
        .map(|d| (d.tail, d.head, d.c_f))
        .collect()
}

/// Model choice helper: the segments of a piecewise instance.
pub fn segments_of(instance: &GameInstance) -> Option<&PwaSegments> {
    match instance.model {
        GasModelChoice::Misoc => None,
        GasModelChoice::Pwa { .. } => instance.segments.as_ref(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_node_system(theta: f64, sign_a: f64, sign_b: f64) -> StepSystem {
        StepSystem {
            n_nodes: 2,
            rows: vec![(0, 1, sign_a), (1, 0, sign_b)],
            theta: vec![theta, theta],
        }
    }

    #[test]
    fn binaries_follow_the_sign_rule() {
        let flows = vec![vec![0.3, 0.0, -0.2]];
        let b = recover_binaries(None, &flows, &[1.0]).unwrap();
        assert_eq!(b.delta[0], vec![1, 1, 0]);
    }

    #[test]
    fn region_recovery_ties_to_lower_index() {
        // Breakpoints (-3, -1, 1, 3): a flow at -1 belongs to region 0.
        let net = {
            let mut net = crate::netmodel::tests::minimal_network();
            net.pipes[0].phi_max = 3.0;
            net
        };
        let (segments, _, _) = crate::gasflow::build_pwa(&net, 3).unwrap();
        let flows = vec![vec![-1.0], vec![1.0]];
        let b = recover_binaries(Some(&segments), &flows, &[3.0, 3.0]).unwrap();
        assert_eq!(b.gamma.as_ref().unwrap()[0][0], vec![1, 0, 0]);
        // +1 also ties to its lower region (index 1 of regions 0..2).
        assert_eq!(b.gamma.as_ref().unwrap()[1][0], vec![0, 1, 0]);
    }

    #[test]
    fn e_rows_follow_the_direction_flag() {
        let binaries = RecoveredBinaries {
            delta: vec![vec![1], vec![0]],
            gamma: None,
            alpha: None,
            beta: None,
        };
        let flows = vec![vec![2.0], vec![-2.0]];
        let systems = build_e_theta(&binaries, &flows, &[(0, 1, 1.0), (1, 0, 1.0)], 3);
        assert_eq!(systems.len(), 1);
        let sys = &systems[0];
        // delta = 1 on (0,1): +1 at node 0, -1 at node 1.
        assert_eq!(sys.rows[0], (0, 1, 1.0));
        // delta = 0 on (1,0): -1 at node 1, +1 at node 0 -- same row.
        assert_eq!(sys.rows[1], (1, 0, -1.0));
        let e = sys.dense();
        assert_eq!(e[(0, 0)], 1.0);
        assert_eq!(e[(0, 1)], -1.0);
        assert_eq!(e[(1, 0)], 1.0);
        assert_eq!(e[(1, 1)], -1.0);
        assert_eq!(sys.theta, vec![4.0, 4.0]);
    }

    #[test]
    fn misoc_recovery_hand_example() {
        // Two nodes, one pipe observed from both ends, required drop 1.
        let sys = two_node_system(1.0, 1.0, -1.0);
        let res = recover_pressures_misoc(
            vec![sys],
            &[(0.0, 10.0), (0.0, 10.0)],
            (1.0, 1.0),
            &SolveSettings::default(),
        )
        .unwrap();
        let psi = &res.psi[0];
        assert!((psi[0] - psi[1] - 1.0).abs() < 1e-7);
        assert!(res.tau_inf < 1e-9);
        assert!(res.j_psi < 1e-9);
    }

    #[test]
    fn misoc_recovery_clamped_by_bounds() {
        let sys = two_node_system(1.0, 1.0, -1.0);
        let res = recover_pressures_misoc(
            vec![sys],
            &[(0.0, 0.5), (0.0, 0.5)],
            (1.0, 1.0),
            &SolveSettings::default(),
        )
        .unwrap();
        let psi = &res.psi[0];
        assert!((psi[0] - psi[1] - 0.5).abs() < 1e-6, "best drop is 0.5");
        assert!((res.tau_inf - 0.5).abs() < 1e-6);
        assert!((res.j_psi - 0.5).abs() < 1e-6);
    }

    #[test]
    fn zero_theta_recovers_constant_pressure() {
        let sys = two_node_system(0.0, 1.0, 1.0);
        let res = recover_pressures_misoc(
            vec![sys],
            &[(0.0, 10.0), (0.0, 10.0)],
            (1.0, 1.0),
            &SolveSettings::default(),
        )
        .unwrap();
        assert!(res.tau_inf < 1e-9 && res.j_psi < 1e-9);
        let psi = &res.psi[0];
        assert!((psi[0] - psi[1]).abs() < 1e-9);
    }

    #[test]
    fn pwa_recovery_reaches_zero_when_consistent() {
        // Forward-construct from known pressures on a 3-node path.
        let psi_true = [7.0, 4.0, 3.0];
        let rows = vec![(0usize, 1usize, 1.0), (1, 0, -1.0), (1, 2, 1.0), (2, 1, -1.0)];
        let theta: Vec<f64> = rows
            .iter()
            .map(|&(t, h, s)| s * (psi_true[t] - psi_true[h]))
            .collect();
        let sys = StepSystem { n_nodes: 3, rows, theta };
        let res = recover_pressures_pwa(
            vec![sys],
            &[(0.0, 10.0); 3],
            &SolveSettings::default(),
        )
        .unwrap();
        assert!(res.j_psi < 1e-9);
    }

    #[test]
    fn pwa_recovery_positive_on_inconsistent_cycle() {
        // Triangle oriented around the cycle with unit drops cannot be met.
        let rows = vec![(0usize, 1usize, 1.0), (1, 2, 1.0), (2, 0, 1.0)];
        let sys = StepSystem { n_nodes: 3, rows, theta: vec![1.0, 1.0, 1.0] };
        let res = recover_pressures_pwa(
            vec![sys],
            &[(0.0, 100.0); 3],
            &SolveSettings::default(),
        )
        .unwrap();
        assert!(res.j_psi > 0.1, "cycle sum 3 forces error, got {}", res.j_psi);
    }

    #[test]
    fn psi0_minimum_norm_on_two_nodes() {
        let sys = two_node_system(1.0, 1.0, -1.0);
        let psi0 = particular_solution_psi0(&sys).unwrap();
        assert!((psi0[0] - 0.5).abs() < 1e-10);
        assert!((psi0[1] + 0.5).abs() < 1e-10);
    }

    #[test]
    fn psi0_zero_rhs() {
        let sys = two_node_system(0.0, 1.0, -1.0);
        let psi0 = particular_solution_psi0(&sys).unwrap();
        assert!(psi0.iter().all(|p| p.abs() < 1e-12));
    }

    #[test]
    fn psi0_forward_constructed_path() {
        let psi_true = [5.0, 2.0, 1.0];
        let rows = vec![(0usize, 1usize, 1.0), (1, 2, 1.0)];
        let theta: Vec<f64> = rows
            .iter()
            .map(|&(t, h, s)| s * (psi_true[t] - psi_true[h]))
            .collect();
        let sys = StepSystem { n_nodes: 3, rows, theta };
        let psi0 = particular_solution_psi0(&sys).unwrap();
        assert!(sys.residual_inf(&psi0) < 1e-10);
    }

    #[test]
    fn psi0_rejects_cycles() {
        let rows = vec![(0usize, 1usize, 1.0), (1, 2, 1.0), (2, 0, 1.0)];
        let sys = StepSystem { n_nodes: 3, rows, theta: vec![1.0; 3] };
        assert!(matches!(particular_solution_psi0(&sys), Err(RecoveryError::NotATree(_))));
    }

    #[test]
    fn prop4_examples() {
        // Spread 1 with slack bounds.
        assert!(prop4_condition(&[0.5, -0.5], &[(0.0, 10.0), (0.0, 10.0)]));
        // Spread 12 cannot fit a height-10 box.
        assert!(!prop4_condition(&[6.0, -6.0], &[(0.0, 10.0), (0.0, 10.0)]));
    }

    #[test]
    fn binary_recovery_is_idempotent_on_consistent_flows() {
        // Flows consistent with an integral delta: recovery returns it.
        let flows = vec![vec![1.5], vec![-1.5]];
        let b = recover_binaries(None, &flows, &[2.0, 2.0]).unwrap();
        assert_eq!(b.delta, vec![vec![1], vec![0]]);
        let again = recover_binaries(None, &flows, &[2.0, 2.0]).unwrap();
        assert_eq!(b.delta, again.delta);
    }
}
