use std::collections::BTreeMap;
use std::sync::Arc;

use sha2::{Digest, Sha256};

use super::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub value: Arc<Tensor>,
    pub trainable: bool,
}

/// Named parameters in insertion order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor, trainable: bool) -> usize {
        let name = name.into();
        debug_assert!(self.index_of(&name).is_none(), "duplicate param {name}");
        self.params.push(Param {
            name,
            value: Arc::new(value),
            trainable,
        });
        self.params.len() - 1
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    pub fn get(&self, idx: usize) -> &Param {
        &self.params[idx]
    }

    pub fn by_name(&self, name: &str) -> Option<&Param> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    /// Mutable access to a parameter's values. Clones only if a graph still
    /// holds the buffer.
    pub fn value_mut(&mut self, idx: usize) -> &mut Tensor {
        Arc::make_mut(&mut self.params[idx].value)
    }

    pub fn set_trainable(&mut self, idx: usize, trainable: bool) {
        self.params[idx].trainable = trainable;
    }

    pub fn set_all_trainable(&mut self, trainable: bool) {
        self.params.iter_mut().for_each(|p| p.trainable = trainable);
    }

    /// Trainable parameters as `(name, values)` pairs for an optimizer.
    pub fn trainable_mut(&mut self) -> Vec<(&str, &mut Tensor)> {
        self.params
            .iter_mut()
            .filter(|p| p.trainable)
            .map(|p| (p.name.as_str(), Arc::make_mut(&mut p.value)))
            .collect()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// SHA-256 over names, shapes and the exact bits of every value.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for p in &self.params {
            h.update(p.name.as_bytes());
            for d in p.value.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for x in p.value.data() {
                h.update(x.to_le_bytes());
            }
        }
        hex_digest(h)
    }
}

pub(crate) fn hex_digest(h: Sha256) -> String {
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Gradient buffers keyed by parameter name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradientMap {
    entries: BTreeMap<String, Tensor>,
}

impl GradientMap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, grad: Tensor) {
        self.entries.insert(name.into(), grad);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Elementwise accumulate `other` into `self`.
    pub fn merge(&mut self, other: GradientMap) -> Result<()> {
        for (name, g) in other.entries {
            match self.entries.get_mut(&name) {
                Some(acc) => {
                    if acc.shape() != g.shape() {
                        return Err(Error::Dimension {
                            op: "gradient merge",
                            lhs: acc.shape().to_vec(),
                            rhs: g.shape().to_vec(),
                        });
                    }
                    acc.add_assign(&g);
                }
                None => {
                    self.entries.insert(name, g);
                }
            }
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.entries.values().all(Tensor::all_finite)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checksum_tracks_bits() {
        let mut store = ParamStore::new();
        let idx = store.add("w", Tensor::zeros(&[2, 2]), true);
        let before = store.checksum();
        assert_eq!(before, store.checksum());
        store.value_mut(idx).data_mut()[0] = -0.0;
        assert_ne!(before, store.checksum());
    }

    #[test]
    fn merge_adds_and_rejects_shape_mismatch() {
        let mut a = GradientMap::new();
        a.insert("x", Tensor::ones(&[2]));
        let mut b = GradientMap::new();
        b.insert("x", Tensor::ones(&[2]));
        b.insert("y", Tensor::ones(&[1]));
        a.merge(b).unwrap();
        assert_eq!(a.get("x").unwrap().data(), &[2.0, 2.0]);
        assert!(a.contains("y"));
        let mut c = GradientMap::new();
        c.insert("x", Tensor::ones(&[3]));
        assert!(a.merge(c).is_err());
    }
}
