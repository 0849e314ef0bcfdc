use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

/// One serialized parameter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamEntry {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl ParamEntry {
    pub fn from_tensor(t: &Tensor) -> Self {
        Self {
            shape: t.shape().to_vec(),
            data: t.data().to_vec(),
        }
    }

    pub fn to_tensor(&self) -> Result<Tensor> {
        Tensor::new(self.shape.clone(), self.data.clone())
    }
}

/// Named parameters, serialized as a JSON object keyed by name.
pub type ParamStore = BTreeMap<String, ParamEntry>;

/// Writes `store` as JSON. Floats use shortest round-trip formatting, so
/// [`load_params`] restores every bit.
pub fn save_params(store: &ParamStore, path: &Path) -> Result<()> {
    if let Some((name, _)) = store.iter().find(|(_, e)| e.data.iter().any(|v| !v.is_finite())) {
        return Err(Error::InvalidArgument(format!("parameter {name} holds a non-finite value")));
    }
    let text = serde_json::to_string(store)?;
    std::fs::write(path, text)?;
    Ok(())
}

pub fn load_params(path: &Path) -> Result<ParamStore> {
    let text = std::fs::read_to_string(path)?;
    let store: ParamStore = serde_json::from_str(&text)?;
    for (name, e) in &store {
        if e.shape.iter().product::<usize>() != e.data.len() {
            return Err(Error::Shape(format!(
                "parameter {name}: shape {:?} does not match {} values",
                e.shape,
                e.data.len()
            )));
        }
    }
    Ok(store)
}
