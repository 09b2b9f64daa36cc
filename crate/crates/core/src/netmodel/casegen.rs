//! Randomized test-case generation: scale gas loads and reshuffle the
//! locations of generation, storage, and gas-fired interconnection points on
//! top of a template network.
//!
//! The generator is a pure function of (template, seed, knobs). Randomness
//! comes from ChaCha8, a named counter-based generator, so identical inputs
//! reproduce bit-identical networks across platforms.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{DgKind, Network, NetworkError, Prosumer, Storage};

/// Knobs for [`generate_case`]. Counts default to "same as the template";
/// asset parameters are copied from the template's own assets (donor pools).
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct CaseKnobs {
    /// Per-node uniform scaling range applied to the gas demand profiles.
    pub gas_load_scale: (f64, f64),
    /// Number of gas-fueled DGs (interconnection points) to place.
    pub n_gas_dg: Option<usize>,
    /// Number of non-gas-fueled DGs to place.
    pub n_nongas_dg: Option<usize>,
    /// Number of storage units to place.
    pub n_storage: Option<usize>,
}

impl Default for CaseKnobs {
    fn default() -> Self {
        CaseKnobs {
            gas_load_scale: (0.7, 1.3),
            n_gas_dg: None,
            n_nongas_dg: None,
            n_storage: None,
        }
    }
}

fn infeasible(msg: impl Into<String>) -> NetworkError {
    NetworkError::Validation { element: "knobs".into(), message: msg.into() }
}

/// Draws `k` distinct elements of `pool` in a deterministic order.
fn sample_distinct<R: Rng>(rng: &mut R, pool: &[usize], k: usize) -> Vec<usize> {
    let mut remaining: Vec<usize> = pool.to_vec();
    let mut picked = Vec::with_capacity(k);
    for _ in 0..k {
        let at = rng.gen_range(0..remaining.len());
        picked.push(remaining.swap_remove(at));
    }
    picked
}

/// Generates a valid network that differs from `template` only in the
/// knob-controlled fields: gas-node demand profiles and the prosumers' asset
/// assignments. Horizon, line parameters, and pipe constants are untouched.
pub fn generate_case(
    template: &Network,
    seed: u64,
    knobs: &CaseKnobs,
) -> Result<Network, NetworkError> {
    template.validate()?;
    let (lo, hi) = knobs.gas_load_scale;
    if !(lo.is_finite() && hi.is_finite() && 0.0 <= lo && lo <= hi) {
        return Err(infeasible("gas_load_scale must satisfy 0 <= lo <= hi"));
    }

    // Donor pools: parameter records taken from the template's own assets.
    let gas_dg_donors: Vec<&Prosumer> = template
        .prosumers
        .iter()
        .filter(|p| p.dg_kind == DgKind::GasFueled)
        .collect();
    let nongas_dg_donors: Vec<&Prosumer> = template
        .prosumers
        .iter()
        .filter(|p| p.dg_kind == DgKind::NonGasFueled)
        .collect();
    let storage_donors: Vec<&Storage> = template
        .prosumers
        .iter()
        .filter_map(|p| p.storage.as_ref())
        .collect();

    let n_gas_dg = knobs.n_gas_dg.unwrap_or(gas_dg_donors.len());
    let n_nongas_dg = knobs.n_nongas_dg.unwrap_or(nongas_dg_donors.len());
    let n_storage = knobs.n_storage.unwrap_or(storage_donors.len());

    if n_gas_dg > 0 && gas_dg_donors.is_empty() {
        return Err(infeasible("template has no gas-fueled DG to copy parameters from"));
    }
    if n_nongas_dg > 0 && nongas_dg_donors.is_empty() {
        return Err(infeasible("template has no non-gas DG to copy parameters from"));
    }
    if n_storage > 0 && storage_donors.is_empty() {
        return Err(infeasible("template has no storage unit to copy parameters from"));
    }

    let gas_owner_slots: Vec<usize> = template
        .prosumers
        .iter()
        .enumerate()
        .filter(|(_, p)| p.gas_node_id.is_some())
        .map(|(k, _)| k)
        .collect();
    if n_gas_dg > gas_owner_slots.len() {
        return Err(infeasible(format!(
            "{n_gas_dg} gas-fueled DGs requested but only {} prosumers own a gas node",
            gas_owner_slots.len()
        )));
    }
    let n = template.prosumers.len();
    if n_gas_dg + n_nongas_dg > n {
        return Err(infeasible(format!(
            "{} DGs requested for {n} prosumers",
            n_gas_dg + n_nongas_dg
        )));
    }
    if n_storage > n {
        return Err(infeasible(format!("{n_storage} storage units requested for {n} prosumers")));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = template.clone();

    // Gas loads scale per node, independent of placement draws below.
    for node in &mut out.gas_nodes {
        let s = rng.gen_range(lo..=hi);
        for d in &mut node.d_g {
            *d *= s;
        }
    }

    // Clear all asset assignments, then place afresh.
    for p in &mut out.prosumers {
        p.dg_kind = DgKind::None;
        p.p_dg_min = 0.0;
        p.p_dg_max = 0.0;
        p.q_ngu = 0.0;
        p.l_ngu = 0.0;
        p.eta_gu = 0.0;
        p.storage = None;
    }

    let gas_sites = sample_distinct(&mut rng, &gas_owner_slots, n_gas_dg);
    for (k, &slot) in gas_sites.iter().enumerate() {
        let donor = gas_dg_donors[k % gas_dg_donors.len()];
        let p = &mut out.prosumers[slot];
        p.dg_kind = DgKind::GasFueled;
        p.p_dg_min = donor.p_dg_min;
        p.p_dg_max = donor.p_dg_max;
        p.eta_gu = donor.eta_gu;
    }

    let free_slots: Vec<usize> = (0..n).filter(|k| !gas_sites.contains(k)).collect();
    let nongas_sites = sample_distinct(&mut rng, &free_slots, n_nongas_dg);
    for (k, &slot) in nongas_sites.iter().enumerate() {
        let donor = nongas_dg_donors[k % nongas_dg_donors.len()];
        let p = &mut out.prosumers[slot];
        p.dg_kind = DgKind::NonGasFueled;
        p.p_dg_min = donor.p_dg_min;
        p.p_dg_max = donor.p_dg_max;
        p.q_ngu = donor.q_ngu;
        p.l_ngu = donor.l_ngu;
    }

    let all_slots: Vec<usize> = (0..n).collect();
    let storage_sites = sample_distinct(&mut rng, &all_slots, n_storage);
    for (k, &slot) in storage_sites.iter().enumerate() {
        out.prosumers[slot].storage = Some(storage_donors[k % storage_donors.len()].clone());
    }

    out.validate()?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netmodel::tests::minimal_network;
    use crate::netmodel::{ElectricalBus, GasNode, GasPipe, PowerLine, StorageWeight};

    fn template() -> Network {
        let mut net = minimal_network();
        // Grow to 4 buses / 3 gas nodes so placement has room to vary.
        net.buses.push(ElectricalBus {
            id: 3,
            theta_min: -0.5,
            theta_max: 0.5,
            v_min: 0.95,
            v_max: 1.05,
            d_e: vec![0.1],
            has_transmission_tie: false,
            p_et_max: None,
        });
        net.buses.push(ElectricalBus {
            id: 4,
            theta_min: -0.5,
            theta_max: 0.5,
            v_min: 0.95,
            v_max: 1.05,
            d_e: vec![0.1],
            has_transmission_tie: false,
            p_et_max: None,
        });
        net.lines.push(PowerLine { from: 2, to: 3, b: 20.0, g: 10.0 });
        net.lines.push(PowerLine { from: 3, to: 4, b: 20.0, g: 10.0 });
        net.gas_nodes.push(GasNode {
            id: 3,
            psi_min: 0.0,
            psi_max: 100.0,
            d_g: vec![0.15],
            is_source: false,
        });
        net.pipes.push(GasPipe { from: 2, to: 3, c_f: 1.0, phi_max: 3.0 });
        net.prosumers.push(Prosumer {
            bus_id: 3,
            gas_node_id: Some(3),
            dg_kind: DgKind::None,
            p_dg_min: 0.0,
            p_dg_max: 0.0,
            q_ngu: 0.0,
            l_ngu: 0.0,
            eta_gu: 0.0,
            storage: Some(Storage {
                e_cap: 4.0,
                eta_st: 1.0,
                eta_ch: 0.95,
                eta_dh: 0.95,
                x_min: 0.1,
                x_max: 0.9,
                x_init: 0.5,
                p_ch_max: 1.0,
                p_dh_max: 1.0,
                q_st: StorageWeight::Scalar(0.05),
            }),
        });
        net.prosumers.push(Prosumer {
            bus_id: 4,
            gas_node_id: None,
            dg_kind: DgKind::NonGasFueled,
            p_dg_min: 0.0,
            p_dg_max: 1.5,
            q_ngu: 0.2,
            l_ngu: 0.1,
            eta_gu: 0.0,
            storage: None,
        });
        net.validate().unwrap();
        net
    }

    #[test]
    fn identical_seed_is_bit_reproducible() {
        let t = template();
        let a = generate_case(&t, 1, &CaseKnobs::default()).unwrap();
        let b = generate_case(&t, 1, &CaseKnobs::default()).unwrap();
        assert_eq!(
            serde_json::to_string(&a).unwrap(),
            serde_json::to_string(&b).unwrap()
        );
    }

    #[test]
    fn different_seeds_differ_somewhere() {
        let t = template();
        let a = generate_case(&t, 1, &CaseKnobs::default()).unwrap();
        let b = generate_case(&t, 2, &CaseKnobs::default()).unwrap();
        assert_ne!(
            serde_json::to_string(&a).unwrap(),
            serde_json::to_string(&b).unwrap()
        );
    }

    #[test]
    fn too_many_dgs_is_a_pigeonhole_error() {
        let t = template();
        let knobs = CaseKnobs { n_nongas_dg: Some(40), ..CaseKnobs::default() };
        assert!(generate_case(&t, 1, &knobs).is_err());
    }

    #[test]
    fn only_knob_controlled_fields_change() {
        let t = template();
        let out = generate_case(&t, 7, &CaseKnobs::default()).unwrap();
        assert_eq!(out.horizon, t.horizon);
        assert_eq!(out.lines, t.lines);
        assert_eq!(out.pipes, t.pipes);
        assert_eq!(out.buses, t.buses);
        assert_eq!(out.market, t.market);
        // Gas-node demand may change but bounds and sources may not.
        for (a, b) in out.gas_nodes.iter().zip(&t.gas_nodes) {
            assert_eq!((a.id, a.psi_min, a.psi_max, a.is_source), (b.id, b.psi_min, b.psi_max, b.is_source));
        }
        // Asset counts are preserved under default knobs.
        let count = |n: &Network, k: DgKind| n.prosumers.iter().filter(|p| p.dg_kind == k).count();
        assert_eq!(count(&out, DgKind::GasFueled), count(&t, DgKind::GasFueled));
        assert_eq!(count(&out, DgKind::NonGasFueled), count(&t, DgKind::NonGasFueled));
        assert_eq!(
            out.prosumers.iter().filter(|p| p.storage.is_some()).count(),
            t.prosumers.iter().filter(|p| p.storage.is_some()).count()
        );
        out.validate().unwrap();
    }
}
