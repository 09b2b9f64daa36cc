//! Shared builders for integration tests: hand-sized networks and seeded
//! random instances.

use iegds_core::netmodel::{
    DgKind, ElectricalBus, GasNode, GasPipe, Horizon, MarketParams, Network, PowerLine, Prosumer,
    Storage, StorageWeight,
};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn bus(id: usize, h: usize, demand: f64) -> ElectricalBus {
    ElectricalBus {
        id,
        theta_min: if id == 1 { 0.0 } else { -0.6 },
        theta_max: if id == 1 { 0.0 } else { 0.6 },
        v_min: 0.9,
        v_max: 1.1,
        d_e: vec![demand; h],
        has_transmission_tie: id == 1,
        p_et_max: None,
    }
}

pub fn plain_prosumer(bus_id: usize, gas_node_id: Option<usize>) -> Prosumer {
    Prosumer {
        bus_id,
        gas_node_id,
        dg_kind: DgKind::None,
        p_dg_min: 0.0,
        p_dg_max: 0.0,
        q_ngu: 0.0,
        l_ngu: 0.0,
        eta_gu: 0.0,
        storage: None,
    }
}

pub fn default_storage(h: usize) -> Storage {
    let _ = h;
    Storage {
        e_cap: 4.0,
        eta_st: 1.0,
        eta_ch: 0.95,
        eta_dh: 0.95,
        x_min: 0.1,
        x_max: 0.9,
        x_init: 0.5,
        p_ch_max: 0.8,
        p_dh_max: 0.8,
        q_st: StorageWeight::Scalar(0.05),
    }
}

pub fn market(h: usize) -> MarketParams {
    MarketParams {
        q_e: vec![0.08; h],
        l_e: vec![0.5; h],
        q_g: vec![0.04; h],
        l_g: vec![0.3; h],
        sigma_e_min: 0.0,
        sigma_e_max: 25.0,
        sigma_g_min: 0.0,
        sigma_g_max: 25.0,
    }
}

/// Two buses, two gas nodes, one pipe. Agent 1 holds the transmission tie,
/// the gas source, and a gas-fired DG; agent 2 carries demand and storage.
pub fn two_bus_toy(h: usize) -> Network {
    let net = Network {
        format: "iegds-v1".into(),
        horizon: Horizon { h, t_s: 1.0 },
        buses: vec![bus(1, h, 0.1), bus(2, h, 0.3)],
        lines: vec![PowerLine { from: 1, to: 2, b: 25.0, g: 10.0 }],
        gas_nodes: vec![
            GasNode { id: 1, psi_min: 1.0, psi_max: 80.0, d_g: vec![0.1; h], is_source: true },
            GasNode { id: 2, psi_min: 1.0, psi_max: 80.0, d_g: vec![0.2; h], is_source: false },
        ],
        pipes: vec![GasPipe { from: 1, to: 2, c_f: 1.0, phi_max: 3.0 }],
        prosumers: vec![
            Prosumer {
                bus_id: 1,
                gas_node_id: Some(1),
                dg_kind: DgKind::GasFueled,
                p_dg_min: 0.0,
                p_dg_max: 1.5,
                q_ngu: 0.0,
                l_ngu: 0.0,
                eta_gu: 1.1,
                storage: None,
            },
            Prosumer {
                storage: Some(default_storage(h)),
                ..plain_prosumer(2, Some(2))
            },
        ],
        market: market(h),
    };
    net.validate().unwrap();
    net
}

/// Random desk-scale instance: a bus tree and a gas tree over the first
/// `n_gas` buses, mixed assets, uniform pressure bounds per instance.
pub fn random_network(seed: u64, n_buses: usize, h: usize) -> Network {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_gas = rng.gen_range(2..=n_buses);
    let psi_lo = rng.gen_range(0.0..5.0);
    let psi_hi = psi_lo + rng.gen_range(30.0..90.0);

    let buses: Vec<ElectricalBus> = (1..=n_buses)
        .map(|id| bus(id, h, rng.gen_range(0.05..0.35)))
        .collect();
    let lines: Vec<PowerLine> = (2..=n_buses)
        .map(|id| PowerLine {
            from: rng.gen_range(1..id),
            to: id,
            b: rng.gen_range(15.0..40.0),
            g: rng.gen_range(5.0..15.0),
        })
        .collect();
    let gas_nodes: Vec<GasNode> = (1..=n_gas)
        .map(|id| GasNode {
            id,
            psi_min: psi_lo,
            psi_max: psi_hi,
            d_g: (0..h).map(|_| rng.gen_range(0.05..0.3)).collect(),
            is_source: id == 1,
        })
        .collect();
    let pipes: Vec<GasPipe> = (2..=n_gas)
        .map(|id| GasPipe {
            from: rng.gen_range(1..id),
            to: id,
            c_f: rng.gen_range(0.8..2.5),
            phi_max: rng.gen_range(2.0..4.0),
        })
        .collect();

    let gas_dg_at = rng.gen_range(1..=n_gas);
    let storage_at = rng.gen_range(1..=n_buses);
    let nongas_at = (1..=n_buses).find(|&b| b != gas_dg_at).unwrap_or(1);
    let prosumers: Vec<Prosumer> = (1..=n_buses)
        .map(|id| {
            let mut p = plain_prosumer(id, (id <= n_gas).then_some(id));
            if id == gas_dg_at {
                p.dg_kind = DgKind::GasFueled;
                p.p_dg_min = 0.0;
                p.p_dg_max = rng.gen_range(0.8..1.6);
                p.eta_gu = rng.gen_range(0.9..1.4);
            } else if id == nongas_at {
                p.dg_kind = DgKind::NonGasFueled;
                p.p_dg_min = 0.0;
                p.p_dg_max = rng.gen_range(0.8..1.6);
                p.q_ngu = rng.gen_range(0.05..0.3);
                p.l_ngu = rng.gen_range(0.0..0.3);
            }
            if id == storage_at {
                p.storage = Some(default_storage(h));
            }
            p
        })
        .collect();

    let net = Network {
        format: "iegds-v1".into(),
        horizon: Horizon { h, t_s: 1.0 },
        buses,
        lines,
        gas_nodes,
        pipes,
        prosumers,
        market: MarketParams {
            q_e: (0..h).map(|_| rng.gen_range(0.02..0.12)).collect(),
            l_e: (0..h).map(|_| rng.gen_range(0.1..0.9)).collect(),
            q_g: (0..h).map(|_| rng.gen_range(0.01..0.08)).collect(),
            l_g: (0..h).map(|_| rng.gen_range(0.05..0.6)).collect(),
            sigma_e_min: 0.0,
            sigma_e_max: 25.0,
            sigma_g_min: 0.0,
            sigma_g_max: 25.0,
        },
    };
    net.validate().unwrap();
    net
}

/// A random point in strategy space (not necessarily feasible); identities
/// of the potential hold everywhere, so arbitrary points exercise them best.
pub fn random_point(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}
