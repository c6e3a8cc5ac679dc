//! Named parameter registry with a stable flat layout.

use std::collections::BTreeMap;
use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::DiffError;
use crate::tensor::Tensor;

/// Handle to one tensor inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Entry {
    name: String,
    value: Tensor<f64>,
}

/// Parameters in insertion order. The flat vector concatenates every
/// tensor's row-major data in that order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<Entry>,
    offsets: Vec<usize>,
    by_name: BTreeMap<String, ParamId>,
    total: usize,
}

const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    version: u32,
    params: Vec<Entry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a new tensor. Panics on duplicate names.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor<f64>) -> ParamId {
        let name = name.into();
        assert!(!self.by_name.contains_key(&name), "duplicate parameter name {name}");
        let id = ParamId(self.entries.len());
        self.offsets.push(self.total);
        self.total += value.len();
        self.by_name.insert(name.clone(), id);
        self.entries.push(Entry { name, value });
        id
    }

    /// Total scalar count P.
    pub fn len(&self) -> usize {
        self.total
    }

    pub fn is_empty(&self) -> bool {
        self.total == 0
    }

    pub fn num_tensors(&self) -> usize {
        self.entries.len()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn get(&self, id: ParamId) -> &Tensor<f64> {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<f64> {
        &mut self.entries[id.0].value
    }

    /// Range of `id` inside the flat vector.
    pub fn slice_of(&self, id: ParamId) -> Range<usize> {
        let start = self.offsets[id.0];
        start..start + self.entries[id.0].value.len()
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.total);
        for e in &self.entries {
            out.extend_from_slice(e.value.data());
        }
        out
    }

    pub fn unflatten(&mut self, flat: &[f64]) -> Result<(), DiffError> {
        if flat.len() != self.total {
            return Err(DiffError::Length {
                expected: self.total,
                got: flat.len(),
            });
        }
        for (e, &off) in self.entries.iter_mut().zip(&self.offsets) {
            let n = e.value.len();
            e.value.data_mut().copy_from_slice(&flat[off..off + n]);
        }
        Ok(())
    }

    /// New store holding copies of `ids`, in the given order.
    pub fn subset(&self, ids: &[ParamId]) -> ParamStore {
        let mut out = ParamStore::new();
        for &id in ids {
            out.add(self.name(id).to_string(), self.get(id).clone());
        }
        out
    }

    /// Copies every tensor of `other` into the same-named slot here.
    pub fn copy_from(&mut self, other: &ParamStore) -> Result<(), DiffError> {
        for e in &other.entries {
            let id = self
                .id(&e.name)
                .ok_or_else(|| DiffError::Checkpoint(format!("unknown parameter {}", e.name)))?;
            if self.get(id).shape() != e.value.shape() {
                return Err(DiffError::Checkpoint(format!(
                    "shape mismatch for {}: {:?} vs {:?}",
                    e.name,
                    self.get(id).shape(),
                    e.value.shape()
                )));
            }
            *self.get_mut(id) = e.value.clone();
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        let ckpt = Checkpoint {
            version: CHECKPOINT_VERSION,
            params: self.entries.clone(),
        };
        serde_json::to_string(&ckpt).expect("parameter store serializes")
    }

    pub fn from_json(s: &str) -> Result<ParamStore, DiffError> {
        let ckpt: Checkpoint = serde_json::from_str(s).map_err(|e| DiffError::Checkpoint(e.to_string()))?;
        if ckpt.version != CHECKPOINT_VERSION {
            return Err(DiffError::Checkpoint(format!(
                "unsupported checkpoint version {}",
                ckpt.version
            )));
        }
        let mut store = ParamStore::new();
        for e in ckpt.params {
            if e.value.data().len() != e.value.rows() * e.value.cols() {
                return Err(DiffError::Checkpoint(format!("corrupt tensor {}", e.name)));
            }
            store.add(e.name, e.value);
        }
        Ok(store)
    }

    pub fn save(&self, path: &Path) -> Result<(), DiffError> {
        std::fs::write(path, self.to_json()).map_err(|e| DiffError::Checkpoint(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<ParamStore, DiffError> {
        let s = std::fs::read_to_string(path).map_err(|e| DiffError::Checkpoint(e.to_string()))?;
        Self::from_json(&s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample_store() -> ParamStore {
        let mut s = ParamStore::new();
        s.add("a", Tensor::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0]));
        s.add("b", Tensor::row(vec![0.1, -0.2, 1e-300]));
        s
    }

    #[test]
    fn slices_follow_insertion_order() {
        let s = sample_store();
        assert_eq!(s.len(), 7);
        assert_eq!(s.slice_of(ParamId(0)), 0..4);
        assert_eq!(s.slice_of(s.id("b").unwrap()), 4..7);
        assert_eq!(s.flatten()[4], 0.1);
    }

    #[test]
    fn unflatten_rejects_wrong_length() {
        let mut s = sample_store();
        assert!(matches!(
            s.unflatten(&[0.0; 3]),
            Err(DiffError::Length { expected: 7, got: 3 })
        ));
    }

    #[test]
    fn json_checkpoint_round_trips_exactly() {
        let s = sample_store();
        let back = ParamStore::from_json(&s.to_json()).unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn version_mismatch_is_rejected() {
        let bad = r#"{"version":99,"params":[]}"#;
        assert!(ParamStore::from_json(bad).is_err());
    }

    proptest! {
        #[test]
        fn flatten_unflatten_round_trip(vals in proptest::collection::vec(-1e6f64..1e6, 7)) {
            let mut s = sample_store();
            s.unflatten(&vals).unwrap();
            prop_assert_eq!(s.flatten(), vals.clone());
            let back = ParamStore::from_json(&s.to_json()).unwrap();
            prop_assert_eq!(back.flatten(), vals);
        }
    }
}
