use std::collections::{BTreeMap, BTreeSet};

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

/// Named parameters plus the set of frozen paths.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParameterSet {
    params: BTreeMap<String, Tensor>,
    frozen: BTreeSet<String>,
}

impl ParameterSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, path: impl Into<String>, t: Tensor) {
        self.params.insert(path.into(), t);
    }

    pub fn get(&self, path: &str) -> Option<&Tensor> {
        self.params.get(path)
    }

    pub fn get_mut(&mut self, path: &str) -> Option<&mut Tensor> {
        self.params.get_mut(path)
    }

    pub fn contains(&self, path: &str) -> bool {
        self.params.contains_key(path)
    }

    pub fn freeze(&mut self, path: &str) -> Result<()> {
        if !self.params.contains_key(path) {
            return Err(Error::Contract(format!(
                "cannot freeze unknown path {path}"
            )));
        }
        self.frozen.insert(path.to_string());
        Ok(())
    }

    /// Freezes every path starting with `prefix`; returns how many matched.
    pub fn freeze_prefix(&mut self, prefix: &str) -> usize {
        let hits: Vec<String> = self
            .params
            .keys()
            .filter(|k| k.starts_with(prefix))
            .cloned()
            .collect();
        let n = hits.len();
        self.frozen.extend(hits);
        n
    }

    pub fn unfreeze_all(&mut self) {
        self.frozen.clear();
    }

    pub fn is_frozen(&self, path: &str) -> bool {
        self.frozen.contains(path)
    }

    pub fn frozen_paths(&self) -> impl Iterator<Item = &str> {
        self.frozen.iter().map(String::as_str)
    }

    pub fn trainable_paths(&self) -> impl Iterator<Item = &str> {
        self.params
            .keys()
            .filter(|k| !self.frozen.contains(*k))
            .map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    /// Copies all entries (and frozen flags) of `other` into `self`.
    pub fn extend_from(&mut self, other: &ParameterSet) {
        for (k, v) in &other.params {
            self.params.insert(k.clone(), v.clone());
        }
        self.frozen.extend(other.frozen.iter().cloned());
    }

    /// Sub-set of entries under `prefix`, keeping frozen flags.
    pub fn subset(&self, prefix: &str) -> ParameterSet {
        let params: BTreeMap<_, _> = self
            .params
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        let frozen = self
            .frozen
            .iter()
            .filter(|k| params.contains_key(*k))
            .cloned()
            .collect();
        ParameterSet { params, frozen }
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            version: 1,
            params: self
                .params
                .iter()
                .map(|(k, t)| {
                    (
                        k.clone(),
                        EncodedTensor {
                            shape: t.shape().to_vec(),
                            data: encode_f64(t.data()),
                        },
                    )
                })
                .collect(),
            frozen: self.frozen.iter().cloned().collect(),
        }
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        if c.version != 1 {
            return Err(Error::Format(format!(
                "unsupported checkpoint version {}",
                c.version
            )));
        }
        let mut ps = ParameterSet::new();
        for (k, e) in &c.params {
            ps.insert(k.clone(), Tensor::new(&e.shape, decode_f64(&e.data)?)?);
        }
        for f in &c.frozen {
            ps.freeze(f)?;
        }
        Ok(ps)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&self.to_checkpoint())?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Self::from_checkpoint(&serde_json::from_str(s)?)
    }
}

/// Versioned on-disk form of a [`ParameterSet`].
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub version: u32,
    pub params: BTreeMap<String, EncodedTensor>,
    pub frozen: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct EncodedTensor {
    pub shape: Vec<usize>,
    pub data: String,
}

/// Base64 of little-endian `f64` bytes.
pub fn encode_f64(values: &[f64]) -> String {
    let mut bytes = Vec::with_capacity(values.len() * 8);
    for v in values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    B64.encode(bytes)
}

pub fn decode_f64(s: &str) -> Result<Vec<f64>> {
    let bytes = B64
        .decode(s)
        .map_err(|e| Error::Format(format!("bad base64: {e}")))?;
    if bytes.len() % 8 != 0 {
        return Err(Error::Format(format!(
            "{} bytes is not a multiple of 8",
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}
