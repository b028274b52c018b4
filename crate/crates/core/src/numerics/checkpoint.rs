//! Versioned JSON checkpoint holding parameters, optional optimizer state and
//! free-form string metadata. Floats are written in shortest round-trip form
//! so a save/load cycle is bit-exact.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::optim::Adam;
use super::params::ParamStore;
use super::NumericsError;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub kind: String,
    pub meta: BTreeMap<String, String>,
    pub params: ParamStore,
    pub optimizer: Option<Adam>,
}

impl Checkpoint {
    pub fn new(kind: impl Into<String>, params: ParamStore) -> Self {
        Self {
            version: CHECKPOINT_VERSION,
            kind: kind.into(),
            meta: BTreeMap::new(),
            params,
            optimizer: None,
        }
    }

    pub fn with_meta(mut self, key: &str, value: impl ToString) -> Self {
        self.meta.insert(key.to_string(), value.to_string());
        self
    }

    pub fn to_json(&self) -> Result<String, NumericsError> {
        serde_json::to_string(self).map_err(|e| NumericsError::Checkpoint(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self, NumericsError> {
        let ck: Checkpoint =
            serde_json::from_str(text).map_err(|e| NumericsError::Checkpoint(e.to_string()))?;
        if ck.version != CHECKPOINT_VERSION {
            return Err(NumericsError::Checkpoint(format!(
                "unsupported checkpoint version {}",
                ck.version
            )));
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<(), NumericsError> {
        fs::write(path, self.to_json()?).map_err(|e| NumericsError::Checkpoint(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, NumericsError> {
        let text = fs::read_to_string(path)
            .map_err(|e| NumericsError::Checkpoint(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn expect_kind(&self, kind: &str) -> Result<(), NumericsError> {
        if self.kind == kind {
            Ok(())
        } else {
            Err(NumericsError::Checkpoint(format!(
                "expected a {kind} checkpoint, found {}",
                self.kind
            )))
        }
    }

    pub fn meta(&self, key: &str) -> Result<&str, NumericsError> {
        self.meta
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| NumericsError::Checkpoint(format!("checkpoint missing `{key}`")))
    }
}
