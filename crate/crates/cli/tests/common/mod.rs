#![allow(dead_code)]

//! Test helpers: binary invocation, fixtures, and a structural validator for
//! the published JSON schemas.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

pub fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_iegds"))
}

pub fn repo_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..").canonicalize().unwrap()
}

pub fn bundled_case() -> PathBuf {
    repo_root().join("cases/ieee33_20.json")
}

pub fn schema_dir() -> PathBuf {
    repo_root().join("schemas")
}

pub fn run(cmd: &mut Command) -> Output {
    cmd.output().expect("binary runs")
}

pub fn exit_code(out: &Output) -> i32 {
    out.status.code().expect("no signal")
}

/// A small two-bus network fixture written to `dir`.
pub fn write_toy_network(dir: &Path) -> PathBuf {
    let toy = serde_json::json!({
        "format": "iegds-v1",
        "horizon": {"H": 2, "T_s": 1.0},
        "buses": [
            {"id": 1, "theta_min": 0.0, "theta_max": 0.0, "v_min": 0.9, "v_max": 1.1,
             "d_e": [0.1, 0.12], "has_transmission_tie": true},
            {"id": 2, "theta_min": -0.5, "theta_max": 0.5, "v_min": 0.9, "v_max": 1.1,
             "d_e": [0.3, 0.28]}
        ],
        "lines": [{"from": 1, "to": 2, "B": 25.0, "G": 10.0}],
        "gas_nodes": [
            {"id": 1, "psi_min": 1.0, "psi_max": 80.0, "d_g": [0.1, 0.1], "is_source": true},
            {"id": 2, "psi_min": 1.0, "psi_max": 80.0, "d_g": [0.2, 0.18]}
        ],
        "pipes": [{"from": 1, "to": 2, "c_f": 1.0, "phi_max": 3.0}],
        "prosumers": [
            {"bus_id": 1, "gas_node_id": 1, "dg_kind": "gas_fueled",
             "p_dg_min": 0.0, "p_dg_max": 1.5, "eta_gu": 1.1},
            {"bus_id": 2, "gas_node_id": 2,
             "storage": {"e_cap": 4.0, "eta_st": 1.0, "eta_ch": 0.95, "eta_dh": 0.95,
                          "x_min": 0.1, "x_max": 0.9, "x_init": 0.5,
                          "p_ch_max": 0.6, "p_dh_max": 0.6, "Q_st": 0.05}}
        ],
        "market": {
            "q_e": [0.08, 0.08], "l_e": [0.5, 0.5], "q_g": [0.04, 0.04], "l_g": [0.3, 0.3],
            "sigma_e_min": 0.0, "sigma_e_max": 25.0, "sigma_g_min": 0.0, "sigma_g_max": 25.0
        }
    });
    let path = dir.join("toy.json");
    std::fs::write(&path, serde_json::to_string_pretty(&toy).unwrap()).unwrap();
    path
}

/// Same toy with a third gas node closing a cycle (not a tree).
pub fn write_cyclic_network(dir: &Path) -> PathBuf {
    let mut net: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(write_toy_network(dir)).unwrap()).unwrap();
    net["gas_nodes"].as_array_mut().unwrap().push(serde_json::json!(
        {"id": 3, "psi_min": 1.0, "psi_max": 80.0, "d_g": [0.1, 0.1]}
    ));
    let pipes = net["pipes"].as_array_mut().unwrap();
    pipes.push(serde_json::json!({"from": 2, "to": 3, "c_f": 1.0, "phi_max": 3.0}));
    pipes.push(serde_json::json!({"from": 3, "to": 1, "c_f": 1.0, "phi_max": 3.0}));
    net["buses"].as_array_mut().unwrap().push(serde_json::json!(
        {"id": 3, "theta_min": -0.5, "theta_max": 0.5, "v_min": 0.9, "v_max": 1.1, "d_e": [0.1, 0.1]}
    ));
    net["lines"].as_array_mut().unwrap().push(serde_json::json!(
        {"from": 2, "to": 3, "B": 25.0, "G": 10.0}
    ));
    net["prosumers"].as_array_mut().unwrap().push(serde_json::json!(
        {"bus_id": 3, "gas_node_id": 3}
    ));
    let path = dir.join("cyclic.json");
    std::fs::write(&path, serde_json::to_string_pretty(&net).unwrap()).unwrap();
    path
}

/// Structural JSON-schema validation covering the subset used by the shipped
/// schemas: type, enum, required, properties, additionalProperties, items,
/// minItems, oneOf.
pub fn validate_schema(schema: &serde_json::Value, value: &serde_json::Value, at: &str) -> Result<(), String> {
    use serde_json::Value;
    if let Some(options) = schema.get("oneOf").and_then(Value::as_array) {
        let hits: Vec<_> = options
            .iter()
            .filter(|opt| validate_schema(opt, value, at).is_ok())
            .collect();
        if hits.len() != 1 {
            return Err(format!("{at}: matched {} of {} oneOf branches", hits.len(), options.len()));
        }
        return Ok(());
    }
    if let Some(allowed) = schema.get("enum").and_then(Value::as_array) {
        if !allowed.contains(value) {
            return Err(format!("{at}: {value} not in enum"));
        }
        return Ok(());
    }
    if let Some(ty) = schema.get("type").and_then(Value::as_str) {
        let ok = match ty {
            "object" => value.is_object(),
            "array" => value.is_array(),
            "string" => value.is_string(),
            "number" => value.is_number(),
            "integer" => value.as_i64().is_some() || value.as_u64().is_some(),
            "boolean" => value.is_boolean(),
            "null" => value.is_null(),
            other => return Err(format!("{at}: unsupported type {other}")),
        };
        if !ok {
            return Err(format!("{at}: expected {ty}, got {value}"));
        }
    }
    if let Some(obj) = value.as_object() {
        if let Some(required) = schema.get("required").and_then(Value::as_array) {
            for key in required {
                let key = key.as_str().unwrap();
                if !obj.contains_key(key) {
                    return Err(format!("{at}: missing required field {key}"));
                }
            }
        }
        let props = schema.get("properties").and_then(Value::as_object);
        let additional = schema.get("additionalProperties");
        for (key, item) in obj {
            let sub = props.and_then(|p| p.get(key));
            match (sub, additional) {
                (Some(sub), _) => validate_schema(sub, item, &format!("{at}.{key}"))?,
                (None, Some(Value::Bool(false))) => {
                    return Err(format!("{at}: unexpected field {key}"))
                }
                (None, Some(Value::Bool(true)) | None) => {}
                (None, Some(extra)) => validate_schema(extra, item, &format!("{at}.{key}"))?,
            }
        }
    }
    if let Some(arr) = value.as_array() {
        if let Some(min) = schema.get("minItems").and_then(Value::as_u64) {
            if (arr.len() as u64) < min {
                return Err(format!("{at}: fewer than {min} items"));
            }
        }
        if let Some(items) = schema.get("items") {
            for (k, item) in arr.iter().enumerate() {
                validate_schema(items, item, &format!("{at}[{k}]"))?;
            }
        }
    }
    Ok(())
}

pub fn assert_valid_against(schema_file: &str, value: &serde_json::Value) {
    let schema: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(schema_dir().join(schema_file)).unwrap(),
    )
    .unwrap();
    if let Err(e) = validate_schema(&schema, value, "$") {
        panic!("{schema_file} validation failed: {e}");
    }
}
