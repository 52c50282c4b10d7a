//! File access, error classes and output formatting shared by commands.

use std::fmt::Display;
use std::path::Path;

use brachy_core::dosimetry::DoseGrid;
use brachy_core::registration::RigidTransform;
use brachy_core::volume::{LabelMap, ScalarVolume};
use serde::Serialize;
use serde_json::{Map, Value};

pub const SCHEMA_VERSION: u64 = 1;

#[derive(Debug)]
pub enum Failure {
    /// Bad flags, missing or unreadable inputs.
    Usage(String),
    /// The inputs were read but the operation failed or a check did not pass.
    Domain(String),
}

impl Failure {
    pub fn message(&self) -> &str {
        match self {
            Failure::Usage(m) | Failure::Domain(m) => m,
        }
    }
}

pub type Outcome<T = ()> = Result<T, Failure>;

pub fn usage(msg: impl Display) -> Failure {
    Failure::Usage(msg.to_string())
}

pub fn domain(msg: impl Display) -> Failure {
    Failure::Domain(msg.to_string())
}

/// Tags a domain error with the file it came from.
pub fn ctx<E: Display>(path: &Path) -> impl FnOnce(E) -> Failure + '_ {
    move |e| domain(format!("{}: {e}", path.display()))
}

pub fn read_bytes(path: &Path) -> Outcome<Vec<u8>> {
    std::fs::read(path).map_err(|e| usage(format!("cannot read {}: {e}", path.display())))
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Outcome {
    std::fs::write(path, bytes).map_err(|e| domain(format!("cannot write {}: {e}", path.display())))
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Outcome<T> {
    let bytes = read_bytes(path)?;
    serde_json::from_slice(&bytes).map_err(|e| domain(format!("{}: {e}", path.display())))
}

pub fn write_json(path: &Path, value: &impl Serialize) -> Outcome {
    let mut bytes = serde_json::to_vec_pretty(value).map_err(domain)?;
    bytes.push(b'\n');
    write_bytes(path, &bytes)
}

pub fn read_volume(path: &Path) -> Outcome<ScalarVolume> {
    ScalarVolume::from_svol_bytes(&read_bytes(path)?).map_err(ctx(path))
}

pub fn read_labels(path: &Path) -> Outcome<LabelMap> {
    LabelMap::from_svol_bytes(&read_bytes(path)?).map_err(ctx(path))
}

pub fn read_dose(path: &Path) -> Outcome<DoseGrid> {
    DoseGrid::from_volume(&read_volume(path)?).map_err(ctx(path))
}

/// Accepts either a bare transform or any object with a `transform` field,
/// such as the output of `register`.
pub fn read_transform(path: &Path) -> Outcome<RigidTransform> {
    let v: Value = read_json(path)?;
    let inner = match &v {
        Value::Object(m) if m.contains_key("transform") => m["transform"].clone(),
        _ => v,
    };
    serde_json::from_value(inner).map_err(|e| domain(format!("{}: {e}", path.display())))
}

/// Prints `body` as versioned JSON, or `human` otherwise.
pub fn emit(json: bool, command: &str, body: &impl Serialize, human: impl FnOnce() -> String) -> Outcome {
    if json {
        let mut out = Map::new();
        out.insert("schema".into(), SCHEMA_VERSION.into());
        out.insert("command".into(), command.into());
        match serde_json::to_value(body).map_err(domain)? {
            Value::Object(m) => out.extend(m),
            other => {
                out.insert("result".into(), other);
            }
        }
        println!("{}", serde_json::to_string_pretty(&Value::Object(out)).map_err(domain)?);
    } else {
        let text = human();
        if !text.is_empty() {
            println!("{text}");
        }
    }
    Ok(())
}
