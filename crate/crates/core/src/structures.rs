//! Declarative structure definitions and the registry that turns them into
//! [`SphsStructure`] objects.
//!
//! A definition is a TOML table with a `kind` key naming a registered builder;
//! the remaining keys are that builder's parameters:
//!
//! ```toml
//! kind = "hopper"
//! damping = 2.0
//! ```
//!
//! ```toml
//! kind = "constant"
//! state_dim = 2
//! input_dim = 1
//! g = [[0.0], [1.0]]
//!
//! [[modes]]
//! j = [[0.0, 1.0], [-1.0, 0.0]]
//! r = [[0.0, 0.0], [0.0, 0.1]]
//! ```

use std::sync::Arc;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::bench::HopperStructure;
use crate::error::{Error, Result};
use crate::registry::ArcRegistry;
use crate::sphs::{ConstantStructure, SphsStructure};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StructureDef {
    pub kind: String,
    #[serde(flatten)]
    pub params: Table,
}

impl StructureDef {
    pub fn hopper(damping: f64) -> Self {
        let mut params = Table::new();
        params.insert("damping".into(), Value::Float(damping));
        StructureDef {
            kind: "hopper".into(),
            params,
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Format(format!("model definition: {e}")))
    }

    pub fn build(&self) -> Result<Arc<dyn SphsStructure>> {
        structure_registry().build(&self.kind, &self.params)
    }
}

pub type StructureRegistry = ArcRegistry<dyn SphsStructure, Table>;

/// Built-in structures: `hopper` and `constant`.
pub fn structure_registry() -> StructureRegistry {
    let mut reg: StructureRegistry = ArcRegistry::new("structure");
    reg.register("hopper", |p: &Table| {
        reject_unknown(p, &["damping"])?;
        let d = opt_f64(p, "damping")?.unwrap_or(2.0);
        Ok(Arc::new(HopperStructure::new(d)?) as Arc<dyn SphsStructure>)
    });
    reg.register("constant", |p: &Table| {
        reject_unknown(p, &["state_dim", "input_dim", "g", "modes"])?;
        let n = req_usize(p, "state_dim")?;
        let m = opt_usize(p, "input_dim")?.unwrap_or(0);
        let g = match p.get("g") {
            Some(v) => matrix(v, n, m, "g")?,
            None => DMatrix::zeros(n, m),
        };
        let modes = p
            .get("modes")
            .and_then(Value::as_array)
            .ok_or_else(|| Error::Format("constant structure needs a `modes` array".into()))?;
        let mut js = Vec::new();
        let mut rs = Vec::new();
        for (i, mode) in modes.iter().enumerate() {
            let t = mode
                .as_table()
                .ok_or_else(|| Error::Format(format!("modes[{i}] must be a table")))?;
            reject_unknown(t, &["j", "r"])?;
            let get = |k: &str| -> Result<DMatrix<f64>> {
                match t.get(k) {
                    Some(v) => matrix(v, n, n, k),
                    None => Ok(DMatrix::zeros(n, n)),
                }
            };
            js.push(get("j")?);
            rs.push(get("r")?);
        }
        Ok(Arc::new(ConstantStructure::new(js, rs, g)?) as Arc<dyn SphsStructure>)
    });
    reg
}

fn reject_unknown(t: &Table, allowed: &[&str]) -> Result<()> {
    match t.keys().find(|k| !allowed.contains(&k.as_str())) {
        Some(k) => Err(Error::Format(format!(
            "unknown model-definition field `{k}` (allowed: {})",
            allowed.join(", ")
        ))),
        None => Ok(()),
    }
}

fn as_f64(v: &Value) -> Option<f64> {
    match v {
        Value::Float(f) => Some(*f),
        Value::Integer(i) => Some(*i as f64),
        _ => None,
    }
}

fn opt_f64(t: &Table, key: &str) -> Result<Option<f64>> {
    t.get(key)
        .map(|v| as_f64(v).ok_or_else(|| Error::Format(format!("`{key}` must be a number"))))
        .transpose()
}

fn opt_usize(t: &Table, key: &str) -> Result<Option<usize>> {
    t.get(key)
        .map(|v| {
            v.as_integer()
                .and_then(|i| usize::try_from(i).ok())
                .ok_or_else(|| Error::Format(format!("`{key}` must be a non-negative integer")))
        })
        .transpose()
}

fn req_usize(t: &Table, key: &str) -> Result<usize> {
    opt_usize(t, key)?.ok_or_else(|| Error::Format(format!("missing field `{key}`")))
}

fn matrix(v: &Value, rows: usize, cols: usize, name: &str) -> Result<DMatrix<f64>> {
    let bad = || Error::Format(format!("`{name}` must be a {rows}x{cols} array of rows"));
    let arr = v.as_array().ok_or_else(bad)?;
    if arr.len() != rows {
        return Err(bad());
    }
    let mut m = DMatrix::zeros(rows, cols);
    for (i, row) in arr.iter().enumerate() {
        let row = row.as_array().ok_or_else(bad)?;
        if row.len() != cols {
            return Err(bad());
        }
        for (j, x) in row.iter().enumerate() {
            m[(i, j)] = as_f64(x).ok_or_else(bad)?;
        }
    }
    Ok(m)
}
