//! Named trainable parameters.
//!
//! Models own a [`ParamSet`]; layers hold [`ParamId`] handles into it.
//! Names are dotted paths encoding module position ("enc0.conv1.weight"),
//! unique within a set, and stable across save/load.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone)]
pub struct Parameter<S: Scalar> {
    pub name: String,
    pub value: Tensor<S>,
}

#[derive(Debug, Clone, Default)]
pub struct ParamSet<S: Scalar> {
    entries: Vec<Parameter<S>>,
}

impl<S: Scalar> ParamSet<S> {
    pub fn new() -> Self {
        ParamSet {
            entries: Vec::new(),
        }
    }

    /// Register a parameter. Panics on duplicate names: layer construction
    /// is fully under crate control, so a collision is a bug.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor<S>) -> ParamId {
        let name = name.into();
        assert!(
            self.entries.iter().all(|p| p.name != name),
            "duplicate parameter name {name:?}"
        );
        self.entries.push(Parameter { name, value });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter<S> {
        &self.entries[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<S> {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<S> {
        &mut self.entries[id.0].value
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter<S>)> {
        self.entries.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    /// Total scalar count across all parameters.
    pub fn total_len(&self) -> usize {
        self.entries.iter().map(|p| p.value.numel()).sum()
    }

    /// Overwrite values from `(name, tensor)` pairs, requiring an exact
    /// name/shape match for every entry (checkpoint loading).
    pub fn load_named(&mut self, named: &[(String, Tensor<S>)]) -> Result<()> {
        if named.len() != self.entries.len() {
            return Err(Error::Checkpoint(format!(
                "parameter count mismatch: model has {}, file has {}",
                self.entries.len(),
                named.len()
            )));
        }
        for (name, tensor) in named {
            let entry = self
                .entries
                .iter_mut()
                .find(|p| &p.name == name)
                .ok_or_else(|| {
                    Error::Checkpoint(format!("parameter {name:?} not present in model"))
                })?;
            if entry.value.shape() != tensor.shape() {
                return Err(Error::Checkpoint(format!(
                    "shape mismatch for parameter {name:?}: model {:?}, file {:?}",
                    entry.value.shape(),
                    tensor.shape()
                )));
            }
            entry.value = tensor.clone();
        }
        Ok(())
    }

    pub fn cast<T: Scalar>(&self) -> ParamSet<T> {
        ParamSet {
            entries: self
                .entries
                .iter()
                .map(|p| Parameter {
                    name: p.name.clone(),
                    value: p.value.cast(),
                })
                .collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_are_unique() {
        let mut ps = ParamSet::<f32>::new();
        ps.add("a.w", Tensor::zeros(&[2]));
        let result = std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| {
            ps.add("a.w", Tensor::zeros(&[2]))
        }));
        assert!(result.is_err());
    }

    #[test]
    fn load_named_rejects_shape_mismatch() {
        let mut ps = ParamSet::<f32>::new();
        ps.add("w", Tensor::zeros(&[2, 3]));
        let err = ps
            .load_named(&[("w".to_string(), Tensor::zeros(&[3, 2]))])
            .unwrap_err();
        assert!(err.to_string().contains("\"w\""));
    }
}
