//! Dense array values, named parameter collections, and reverse-mode
//! differentiation for the small networks used throughout the crate.
//!
//! The engine is deliberately minimal: the layer zoo covers 3x3 convolutions,
//! linear maps, ReLU/sigmoid, global average pooling, and dual-bank batch
//! normalization; everything runs in f64 and single-threaded so that repeated
//! runs with the same seed are bit-identical.

mod gradcheck;
mod layers;
mod optim;
mod tape;

pub use gradcheck::{finite_difference_gradient, finite_difference_subset, relative_error};
pub use layers::{apply_layer, apply_layer_in_namespace, commit_bn_updates, BnBank, BnPending, LayerKind, Mode, BN_EPS, BN_MOMENTUM};
pub use optim::{sgd_momentum_step, StepDirection};
pub use tape::{Tape, ValueId};

use indexmap::IndexMap;

use crate::error::{Error, Result};

/// Dense row-major array with an explicit shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expect: usize = shape.iter().product();
        if expect != data.len() {
            return Err(Error::config(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                expect,
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn full(shape: Vec<usize>, value: f64) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// The single element of a scalar tensor.
    pub fn item(&self) -> Result<f64> {
        if self.data.len() != 1 {
            return Err(Error::contract(format!(
                "expected scalar, got shape {:?}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        debug_assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// One named trainable (or tracked) array plus its optional momentum buffer.
#[derive(Debug, Clone)]
pub struct Param {
    pub value: Tensor,
    pub trainable: bool,
    pub velocity: Option<Vec<f64>>,
}

/// Ordered, uniquely named collection of parameters. Iteration order is the
/// insertion order, which makes updates and serialization deterministic.
#[derive(Debug, Clone, Default)]
pub struct ParameterSet {
    entries: IndexMap<String, Param>,
}

impl ParameterSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor, trainable: bool) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(Error::config(format!("duplicate parameter name {name:?}")));
        }
        self.entries.insert(
            name,
            Param {
                value,
                trainable,
                velocity: None,
            },
        );
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Param> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::config(format!("unknown parameter {name:?}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Param> {
        self.entries
            .get_mut(name)
            .ok_or_else(|| Error::config(format!("unknown parameter {name:?}")))
    }

    pub fn value(&self, name: &str) -> Result<&Tensor> {
        Ok(&self.get(name)?.value)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param)> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Param)> {
        self.entries.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    /// Total number of scalar elements across all entries.
    pub fn element_count(&self) -> usize {
        self.entries.values().map(|p| p.value.len()).sum()
    }

    /// Merge `other` under a `prefix/` namespace (used to persist a model and
    /// a generator in one checkpoint).
    pub fn merged_with_prefix(sets: &[(&str, &ParameterSet)]) -> Result<ParameterSet> {
        let mut out = ParameterSet::new();
        for (prefix, set) in sets {
            for (name, param) in set.iter() {
                let key = format!("{prefix}/{name}");
                if out.entries.contains_key(&key) {
                    return Err(Error::config(format!("duplicate merged name {key:?}")));
                }
                out.entries.insert(key.clone(), param.clone());
            }
        }
        Ok(out)
    }

    /// Extract the entries under `prefix/`, stripping the prefix.
    pub fn split_prefix(&self, prefix: &str) -> ParameterSet {
        let needle = format!("{prefix}/");
        let mut out = ParameterSet::new();
        for (name, param) in self.iter() {
            if let Some(rest) = name.strip_prefix(&needle) {
                out.entries.insert(rest.to_string(), param.clone());
            }
        }
        out
    }

    pub fn bitwise_eq(&self, other: &ParameterSet) -> bool {
        if self.entries.len() != other.entries.len() {
            return false;
        }
        self.iter().zip(other.iter()).all(|((na, pa), (nb, pb))| {
            na == nb
                && pa.trainable == pb.trainable
                && pa.value.shape() == pb.value.shape()
                && pa
                    .value
                    .data()
                    .iter()
                    .zip(pb.value.data())
                    .all(|(x, y)| x.to_bits() == y.to_bits())
                && match (&pa.velocity, &pb.velocity) {
                    (None, None) => true,
                    (Some(a), Some(b)) => {
                        a.len() == b.len()
                            && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
                    }
                    _ => false,
                }
        })
    }
}

/// Gradients produced by one backward pass: one array per named parameter on
/// the path from the loss, plus the gradient with respect to a tracked input
/// when one was requested.
#[derive(Debug, Clone, Default)]
pub struct GradientRecord {
    pub grads: IndexMap<String, Vec<f64>>,
    pub input_grad: Option<Vec<f64>>,
}

impl GradientRecord {
    pub fn get(&self, name: &str) -> Option<&[f64]> {
        self.grads.get(name).map(|v| v.as_slice())
    }

    pub fn all_finite(&self) -> bool {
        self.grads
            .values()
            .all(|g| g.iter().all(|v| v.is_finite()))
            && self
                .input_grad
                .as_ref()
                .map(|g| g.iter().all(|v| v.is_finite()))
                .unwrap_or(true)
    }

    pub fn bitwise_eq(&self, other: &GradientRecord) -> bool {
        if self.grads.len() != other.grads.len() {
            return false;
        }
        let named = self.grads.iter().zip(other.grads.iter()).all(
            |((na, ga), (nb, gb))| {
                na == nb && ga.len() == gb.len() && ga.iter().zip(gb).all(|(x, y)| x.to_bits() == y.to_bits())
            },
        );
        let input = match (&self.input_grad, &other.input_grad) {
            (None, None) => true,
            (Some(a), Some(b)) => {
                a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
            }
            _ => false,
        };
        named && input
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tensor_shape_mismatch_rejected() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
        // zero-width rows are legal (empty conditioning)
        assert!(Tensor::new(vec![2, 0], vec![]).is_ok());
    }

    #[test]
    fn parameter_set_rejects_duplicates_and_keeps_order() {
        let mut set = ParameterSet::new();
        set.insert("b", Tensor::zeros(vec![2]), true).unwrap();
        set.insert("a", Tensor::zeros(vec![2]), true).unwrap();
        assert!(set.insert("a", Tensor::zeros(vec![2]), true).is_err());
        let names: Vec<_> = set.names().cloned().collect();
        assert_eq!(names, vec!["b".to_string(), "a".to_string()]);
    }

    #[test]
    fn merged_prefix_round_trips() {
        let mut theta = ParameterSet::new();
        theta.insert("w", Tensor::full(vec![2], 1.5), true).unwrap();
        let mut psi = ParameterSet::new();
        psi.insert("w", Tensor::full(vec![3], -0.5), true).unwrap();
        let merged =
            ParameterSet::merged_with_prefix(&[("model", &theta), ("aag", &psi)]).unwrap();
        assert_eq!(merged.len(), 2);
        let theta2 = merged.split_prefix("model");
        let psi2 = merged.split_prefix("aag");
        assert!(theta.bitwise_eq(&theta2));
        assert!(psi.bitwise_eq(&psi2));
    }
}
