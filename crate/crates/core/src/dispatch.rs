//! The outer loop: penalty-weight bracketing around the two-stage solve,
//! equilibrium certificates, the gas-flow deviation metric, and the
//! convex-relaxation baselines.
//!
//! Each outer iteration solves the flow-penalized convexified game (stage
//! one), recovers an integral candidate (stage two), and brackets the penalty
//! weight: a violated iterate raises the lower bound, a feasible one lowers
//! the upper bound. A feasible first iterate (zero penalty) is an exact
//! equilibrium; otherwise the cheapest feasible iterate found is certified as
//! an approximate equilibrium whose bound is the potential gap to the first
//! iterate.

use serde::Serialize;
use thiserror::Error;

use crate::conic::{self, SolveSettings, SolveStatus, SparseRow};
use crate::game::{assemble, GameError, GameInstance, GasModelChoice, ResidualReport, Strategy};
use crate::gasflow::weymouth_flow;
use crate::netmodel::{Network, NetworkError};
use crate::recovery::{
    self, assemble_recovered_strategy, build_e_theta, build_e_theta_pwa, pipe_tuples,
    recover_binaries, recover_pressures_misoc, recover_pressures_pwa, PressureRecoveryResult,
    RecoveryError,
};

#[derive(Debug, Error)]
pub enum DispatchError {
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Game(#[from] GameError),
    #[error(transparent)]
    Recovery(#[from] RecoveryError),
    #[error(transparent)]
    Conic(#[from] conic::ConicError),
    #[error("stage-one solve failed with status {status:?} at outer iteration {iteration}")]
    StageOneFailed {
        status: SolveStatus,
        iteration: usize,
        trace: Vec<IterationRecord>,
    },
    #[error("baseline requires a direction assignment of length {expected}, got {got}")]
    BadDirections { expected: usize, got: usize },
}

/// Outer-loop settings. Defaults follow the experimental setup: at most ten
/// outer iterations, first positive penalty weight 1, geometric growth until
/// a feasible weight brackets the search, then bisection.
#[derive(Debug, Clone, Serialize)]
pub struct AlgorithmSettings {
    pub max_outer: usize,
    pub rho_seed: f64,
    /// Feasibility threshold on the stage-two violation.
    pub violation_tol: f64,
    /// Early stop once the bracket is this narrow (relative) with a feasible
    /// incumbent in hand.
    pub bracket_rel_width: f64,
    /// Scalarization weights (w_tau, w_j) of the cone-model recovery program.
    pub pressure_weights: (f64, f64),
    pub solver: SolveSettings,
}

impl Default for AlgorithmSettings {
    fn default() -> Self {
        AlgorithmSettings {
            max_outer: 10,
            rho_seed: 1.0,
            violation_tol: 1e-6,
            bracket_rel_width: 1e-3,
            pressure_weights: (1.0, 1.0),
            solver: SolveSettings::default(),
        }
    }
}

/// Penalty bracketing state. Brackets nest once the upper bound is finite.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct PenaltyState {
    pub ell: usize,
    pub rho: f64,
    pub rho_lo: f64,
    pub rho_hi: f64,
    pub rho_seed: f64,
}

impl PenaltyState {
    pub fn new(rho_seed: f64) -> Self {
        PenaltyState { ell: 1, rho: 0.0, rho_lo: 0.0, rho_hi: f64::INFINITY, rho_seed }
    }
}

/// One bracketing step: a violated iterate raises the lower bound, a feasible
/// one lowers the upper bound; the next weight grows geometrically while the
/// bracket is open above and bisects once it closes.
pub fn update_penalty(state: PenaltyState, violated: bool) -> PenaltyState {
    let mut next = state;
    if violated {
        next.rho_lo = state.rho;
    } else {
        next.rho_hi = state.rho;
    }
    next.rho = if next.rho_hi.is_infinite() {
        state.rho_seed.max(2.0 * next.rho_lo)
    } else {
        0.5 * (next.rho_lo + next.rho_hi)
    };
    next.ell = state.ell + 1;
    next
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum OutcomeStatus {
    ExactGne,
    EpsGne,
    MaxIterNoFeasible,
}

#[derive(Debug, Clone, Serialize)]
pub struct IterationRecord {
    pub ell: usize,
    pub rho: f64,
    /// Stage-two violation: slack norm for the cone model, recovery error for
    /// the piecewise model.
    pub violation: f64,
    /// Recovery-system residual at the recovered pressures.
    pub j_psi: f64,
    pub potential: f64,
    pub stage1_seconds: f64,
    pub stage2_seconds: f64,
    pub solver_iterations: u32,
}

/// Per directed pipe and step: relative deviation of the dispatched flow from
/// the Weymouth flow implied by the recovered pressures. A zero reference
/// with a non-negligible flow has no well-defined relative deviation and is
/// reported with `delta: None`.
#[derive(Debug, Clone, Serialize)]
pub struct DeviationRecord {
    /// Gas-node ids of the directed label.
    pub from: usize,
    pub to: usize,
    pub step: usize,
    pub delta: Option<f64>,
    pub abs_flow: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct DispatchOutcome {
    pub status: OutcomeStatus,
    pub model: GasModelChoice,
    pub strategy: Strategy,
    /// Equilibrium quality bound; absent when no feasible iterate certified
    /// one (or for baselines, which certify nothing).
    pub epsilon: Option<f64>,
    pub rho_final: f64,
    pub violation_final: f64,
    pub j_psi_final: f64,
    pub potential_final: f64,
    pub potential_first: Option<f64>,
    pub mean_abs_cost: f64,
    pub outer_iterations: usize,
    pub trace: Vec<IterationRecord>,
    pub deviations: Vec<DeviationRecord>,
    pub residuals: ResidualReport,
}

struct StageTwo {
    strategy: Strategy,
    pressures: PressureRecoveryResult,
    violation: f64,
}

fn run_stage_two(
    instance: &GameInstance,
    relaxed: &Strategy,
    settings: &AlgorithmSettings,
) -> Result<StageTwo, DispatchError> {
    let phi_hat = recovery::flows_of(instance, relaxed);
    let caps: Vec<f64> = instance.directed_pipes.iter().map(|d| d.phi_max).collect();
    let binaries = recover_binaries(recovery::segments_of(instance), &phi_hat, &caps)?;
    let pairs: Vec<(usize, usize)> =
        instance.directed_pipes.iter().map(|d| (d.tail, d.head)).collect();
    let n_nodes = instance.gas_map.n_nodes;

    let pressures = match instance.model {
        GasModelChoice::Misoc => {
            let systems = build_e_theta(&binaries, &phi_hat, &pipe_tuples(instance), n_nodes);
            recover_pressures_misoc(
                systems,
                &instance.psi_bounds,
                settings.pressure_weights,
                &settings.solver,
            )?
        }
        GasModelChoice::Pwa { .. } => {
            let segments = recovery::segments_of(instance).expect("piecewise instance");
            let systems = build_e_theta_pwa(&binaries, &phi_hat, segments, &pairs, n_nodes);
            recover_pressures_pwa(systems, &instance.psi_bounds, &settings.solver)?
        }
    };
    let aux = recovery::rebuild_aux(&binaries, &pressures, &phi_hat, &pairs);
    let strategy =
        assemble_recovered_strategy(instance, relaxed, &binaries, &pressures, &aux, &phi_hat);
    let violation = match instance.model {
        GasModelChoice::Misoc => pressures.tau_inf,
        GasModelChoice::Pwa { .. } => pressures.j_psi,
    };
    Ok(StageTwo { strategy, pressures, violation })
}

/// Runs the full outer loop on a network with the chosen gas model.
pub fn run_two_stage(
    network: &Network,
    model: GasModelChoice,
    settings: &AlgorithmSettings,
) -> Result<DispatchOutcome, DispatchError> {
    let base = assemble(network, model)?;
    if matches!(model, GasModelChoice::Pwa { .. }) && !network.gas_is_spanning_tree()? {
        log::warn!(
            "gas graph has cycles: zero recovery error is unattainable for the piecewise model; running anyway"
        );
    }

    let mut state = PenaltyState::new(settings.rho_seed);
    let mut trace: Vec<IterationRecord> = Vec::new();
    let mut first_potential = None;
    // Feasible iterate with the smallest penalty weight, and the
    // least-violation iterate as fallback.
    let mut best: Option<(f64, StageTwo, usize)> = None;
    let mut fallback: Option<(f64, StageTwo, usize)> = None;

    let outer_limit = settings.max_outer.max(1);
    for ell in 1..=outer_limit {
        state.ell = ell;
        let instance = base.penalized(state.rho)?;
        let t1 = std::time::Instant::now();
        let solved = conic::solve(&instance.problem, &settings.solver)?;
        let stage1_seconds = t1.elapsed().as_secs_f64();
        if solved.status != SolveStatus::Optimal {
            return Err(DispatchError::StageOneFailed {
                status: solved.status,
                iteration: ell,
                trace,
            });
        }
        let relaxed = Strategy { u: solved.x[..base.layout.n_u].to_vec() };

        let t2 = std::time::Instant::now();
        let stage_two = run_stage_two(&base, &relaxed, settings)?;
        let stage2_seconds = t2.elapsed().as_secs_f64();

        let potential = base.potential(&stage_two.strategy);
        if ell == 1 {
            first_potential = Some(potential);
        }
        trace.push(IterationRecord {
            ell,
            rho: state.rho,
            violation: stage_two.violation,
            j_psi: stage_two.pressures.j_psi,
            potential,
            stage1_seconds,
            stage2_seconds,
            solver_iterations: solved.iterations,
        });

        let violated = stage_two.violation > settings.violation_tol;
        if fallback
            .as_ref()
            .is_none_or(|(v, _, _)| stage_two.violation < *v)
        {
            fallback = Some((stage_two.violation, StageTwo { strategy: stage_two.strategy.clone(), pressures: stage_two.pressures.clone(), violation: stage_two.violation }, ell));
        }
        if !violated {
            let replace = best.as_ref().is_none_or(|(rho, _, _)| state.rho < *rho);
            if replace {
                best = Some((state.rho, stage_two, ell));
            }
            if ell == 1 {
                break; // zero-penalty feasibility: exact equilibrium
            }
        }

        state = update_penalty(state, violated);
        if state.rho_hi.is_finite()
            && (state.rho_hi - state.rho_lo) < settings.bracket_rel_width * state.rho_hi.max(1.0)
            && best.is_some()
        {
            break;
        }
    }

    let outer_iterations = trace.len();
    match best {
        Some((rho, stage_two, _ell)) => {
            let potential_final = base.potential(&stage_two.strategy);
            let epsilon = first_potential.map(|p1| potential_final - p1);
            let status = if rho == 0.0 { OutcomeStatus::ExactGne } else { OutcomeStatus::EpsGne };
            let residuals = base.feasibility_residuals(&stage_two.strategy);
            let deviations = deviations_of(&base, &stage_two);
            Ok(DispatchOutcome {
                status,
                model,
                epsilon,
                rho_final: rho,
                violation_final: stage_two.violation,
                j_psi_final: stage_two.pressures.j_psi,
                potential_final,
                potential_first: first_potential,
                mean_abs_cost: base.mean_abs_cost(&stage_two.strategy),
                outer_iterations,
                trace,
                deviations,
                residuals,
                strategy: stage_two.strategy,
            })
        }
        None => {
            let (violation, stage_two, _ell) = fallback.expect("at least one iteration ran");
            let potential_final = base.potential(&stage_two.strategy);
            let residuals = base.feasibility_residuals(&stage_two.strategy);
            let deviations = deviations_of(&base, &stage_two);
            Ok(DispatchOutcome {
                status: OutcomeStatus::MaxIterNoFeasible,
                model,
                epsilon: None,
                rho_final: trace.last().map_or(0.0, |t| t.rho),
                violation_final: violation,
                j_psi_final: stage_two.pressures.j_psi,
                potential_final,
                potential_first: first_potential,
                mean_abs_cost: base.mean_abs_cost(&stage_two.strategy),
                outer_iterations,
                trace,
                deviations,
                residuals,
                strategy: stage_two.strategy,
            })
        }
    }
}

/// Relative gas-flow deviation per directed pipe and step:
/// (phi - w) / w with w the Weymouth flow at the recovered pressures. A zero
/// reference counts as zero deviation when the flow is negligible and as
/// undefined otherwise.
pub fn gasflow_deviation(
    phi: &[Vec<f64>],
    psi: &[Vec<f64>],
    pipes: &[(usize, usize, f64)],
    node_ids: &[usize],
    tol: f64,
) -> Vec<DeviationRecord> {
    let mut out = Vec::new();
    for (k, &(tail, head, c_f)) in pipes.iter().enumerate() {
        for (step, psi_step) in psi.iter().enumerate() {
            let flow = phi[k][step];
            let w = weymouth_flow(psi_step[tail], psi_step[head], c_f);
            let delta = if w != 0.0 {
                Some((flow - w) / w)
            } else if flow.abs() <= tol {
                Some(0.0)
            } else {
                None
            };
            out.push(DeviationRecord {
                from: node_ids[tail],
                to: node_ids[head],
                step,
                delta,
                abs_flow: flow.abs(),
            });
        }
    }
    out
}

fn deviations_of(instance: &GameInstance, stage_two: &StageTwo) -> Vec<DeviationRecord> {
    let phi = recovery::flows_of(instance, &stage_two.strategy);
    let node_ids = instance.gas_node_ids.clone();
    gasflow_deviation(&phi, &stage_two.pressures.psi, &pipe_tuples(instance), &node_ids, 1e-6)
}

/// Baseline selector for [`run_baseline`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineKind {
    /// Convex cone relaxation with the flow directions frozen.
    FixedDirSoc,
    /// Fixed directions plus a linear penalty on the cone auxiliaries.
    SocPen { weight: f64 },
    /// Fixed directions with sequential tightening of the cone rows around
    /// the previous iterate until the cone slack closes.
    SocScp { max_rounds: usize },
}

/// Runs a convex baseline on the cone model with a frozen direction
/// assignment (`directions` is a full indicator vector, usually taken from a
/// completed two-stage run). The baseline solves a single convex game
/// (sequentially for the tightening variant) and reports deviations measured
/// directly at its own solution.
pub fn run_baseline(
    network: &Network,
    kind: BaselineKind,
    directions: &[f64],
    settings: &AlgorithmSettings,
) -> Result<DispatchOutcome, DispatchError> {
    let base = assemble(network, GasModelChoice::Misoc)?;
    if directions.len() != base.gas_map.n_z {
        return Err(DispatchError::BadDirections {
            expected: base.gas_map.n_z,
            got: directions.len(),
        });
    }
    let fixed = base.with_fixed_indicators(directions)?;

    let scp_slack_weight = 100.0;
    let mut trace = Vec::new();
    let mut current = fixed.clone();
    if let BaselineKind::SocPen { weight } = kind {
        for pipe in 0..base.gas_map.n_directed {
            for step in 0..base.layout.h {
                let nu = base.layout.y_global(base.gas_map.nu(pipe, step));
                current.problem.linear[nu] += weight;
            }
        }
    }

    let rounds = match kind {
        BaselineKind::SocScp { max_rounds } => max_rounds.max(1),
        _ => 1,
    };
    let mut strategy: Option<Strategy> = None;
    for round in 0..rounds {
        let t0 = std::time::Instant::now();
        let solved = conic::solve(&current.problem, &settings.solver)?;
        let seconds = t0.elapsed().as_secs_f64();
        if solved.status != SolveStatus::Optimal {
            // The first round must solve; a later tightening round that
            // stalls numerically ends the refinement at the last iterate.
            if round == 0 || strategy.is_none() {
                return Err(DispatchError::StageOneFailed {
                    status: solved.status,
                    iteration: round + 1,
                    trace,
                });
            }
            log::warn!(
                "cone-tightening round {} stalled with status {:?}; keeping the previous iterate",
                round + 1,
                solved.status
            );
            break;
        }
        let s = Strategy { u: solved.x[..base.layout.n_u].to_vec() };
        let slack = cone_slack(&base, &s);
        trace.push(IterationRecord {
            ell: round + 1,
            rho: match kind {
                BaselineKind::SocPen { weight } => weight,
                _ => 0.0,
            },
            violation: slack,
            j_psi: slack,
            potential: base.potential(&s),
            stage1_seconds: seconds,
            stage2_seconds: 0.0,
            solver_iterations: solved.iterations,
        });
        let done = slack <= settings.violation_tol || round + 1 == rounds;
        if done || !matches!(kind, BaselineKind::SocScp { .. }) {
            strategy = Some(s);
            break;
        }
        // Replace the tightening rows around the new iterate: the tangent of
        // the squared-flow curve upper-bounds nu up to a penalized slack.
        current = tighten_cones(&base, &fixed, &s, scp_slack_weight);
        strategy = Some(s);
    }
    let strategy = strategy.expect("at least one round ran");

    let phi = recovery::flows_of(&base, &strategy);
    let psi: Vec<Vec<f64>> = (0..base.layout.h)
        .map(|step| {
            (0..base.gas_map.n_nodes)
                .map(|node| strategy.u[base.layout.y_global(base.gas_map.psi(node, step))])
                .collect()
        })
        .collect();
    let deviations =
        gasflow_deviation(&phi, &psi, &pipe_tuples(&base), &base.gas_node_ids, 1e-6);
    let residuals = base.feasibility_residuals(&strategy);
    let potential_final = base.potential(&strategy);
    Ok(DispatchOutcome {
        status: OutcomeStatus::ExactGne,
        model: GasModelChoice::Misoc,
        epsilon: None,
        rho_final: 0.0,
        violation_final: trace.last().map_or(0.0, |t| t.violation),
        j_psi_final: trace.last().map_or(0.0, |t| t.j_psi),
        potential_final,
        potential_first: Some(potential_final),
        mean_abs_cost: base.mean_abs_cost(&strategy),
        outer_iterations: trace.len(),
        trace,
        deviations,
        residuals,
        strategy,
    })
}

/// Worst cone slack nu - (phi/c)^2 over pipes and steps.
fn cone_slack(instance: &GameInstance, strategy: &Strategy) -> f64 {
    let mut worst = 0.0f64;
    for (k, d) in instance.directed_pipes.iter().enumerate() {
        for step in 0..instance.layout.h {
            let nu = strategy.u[instance.layout.y_global(instance.gas_map.nu(k, step))];
            let phi = strategy.u[instance.layout.y_global(instance.gas_map.phi(k, step))];
            worst = worst.max(nu - (phi / d.c_f) * (phi / d.c_f));
        }
    }
    worst
}

fn tighten_cones(
    base: &GameInstance,
    fixed: &GameInstance,
    around: &Strategy,
    slack_weight: f64,
) -> GameInstance {
    let mut out = fixed.clone();
    for (k, d) in base.directed_pipes.iter().enumerate() {
        for step in 0..base.layout.h {
            let nu = base.layout.y_global(base.gas_map.nu(k, step));
            let phi = base.layout.y_global(base.gas_map.phi(k, step));
            let phi0 = around.u[phi];
            let c2 = d.c_f * d.c_f;
            let s = out.problem.n;
            out.problem.n += 1;
            out.problem.linear.push(slack_weight);
            out.problem.lower.push(0.0);
            out.problem.upper.push(f64::INFINITY);
            out.bound_labels.push(None);
            // nu <= (2 phi0 phi - phi0^2)/c^2 + s
            out.problem.ineq.push(SparseRow {
                terms: vec![(nu, 1.0), (phi, -2.0 * phi0 / c2), (s, -1.0)],
                rhs: -phi0 * phi0 / c2,
            });
            out.ineq_labels.push("scp_tightening");
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn penalty_growth_from_empty_bracket() {
        let state = PenaltyState::new(1.0);
        let next = update_penalty(state, true);
        assert_eq!(next.rho, 1.0);
        assert_eq!(next.rho_lo, 0.0);
        assert!(next.rho_hi.is_infinite());
        // Repeated violations double the weight.
        let mut s = next;
        s.rho = 1.0;
        let s2 = update_penalty(s, true);
        assert_eq!(s2.rho, 2.0);
        assert_eq!(s2.rho_lo, 1.0);
    }

    #[test]
    fn penalty_bisection_inside_bracket() {
        let state = PenaltyState { ell: 3, rho: 2.0, rho_lo: 1.0, rho_hi: 4.0, rho_seed: 1.0 };
        let up = update_penalty(state, true);
        assert_eq!(up.rho_lo, 2.0);
        assert_eq!(up.rho, 3.0);
        let down = update_penalty(state, false);
        assert_eq!(down.rho_hi, 2.0);
        assert_eq!(down.rho, 1.5);
    }

    #[test]
    fn brackets_nest() {
        let mut state = PenaltyState::new(1.0);
        let mut prev = (state.rho_lo, state.rho_hi);
        for round in 0..12 {
            state = update_penalty(state, round % 2 == 0);
            if state.rho_hi.is_finite() {
                assert!(state.rho_lo >= prev.0 - 1e-15);
                assert!(state.rho_hi <= prev.1);
                assert!(state.rho_lo <= state.rho && state.rho <= state.rho_hi);
            }
            prev = (state.rho_lo, state.rho_hi);
        }
    }

    #[test]
    fn deviation_examples() {
        // Exact agreement.
        let recs = gasflow_deviation(
            &[vec![2.0]],
            &[vec![4.0, 0.0]],
            &[(0, 1, 1.0)],
            &[1, 2],
            1e-6,
        );
        assert_eq!(recs[0].delta, Some(0.0));
        // Dispatched 2.2 against a Weymouth reference of 2.
        let recs = gasflow_deviation(
            &[vec![2.2]],
            &[vec![4.0, 0.0]],
            &[(0, 1, 1.0)],
            &[1, 2],
            1e-6,
        );
        assert!((recs[0].delta.unwrap() - 0.1).abs() < 1e-12);
        // Degenerate reference with negligible flow.
        let recs = gasflow_deviation(
            &[vec![0.0]],
            &[vec![3.0, 3.0]],
            &[(0, 1, 1.0)],
            &[1, 2],
            1e-6,
        );
        assert_eq!(recs[0].delta, Some(0.0));
        // Degenerate reference with a real flow is undefined.
        let recs = gasflow_deviation(
            &[vec![0.5]],
            &[vec![3.0, 3.0]],
            &[(0, 1, 1.0)],
            &[1, 2],
            1e-6,
        );
        assert_eq!(recs[0].delta, None);
        assert_eq!(recs[0].abs_flow, 0.5);
    }
}
