use serde::{Deserialize, Serialize};

use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub tensor: Tensor,
}

/// Ordered, uniquely named collection of parameter tensors.
#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ParamSet {
    entries: Vec<NamedTensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet::default()
    }

    pub fn from_entries(entries: Vec<NamedTensor>) -> Result<Self> {
        let mut set = ParamSet::new();
        for e in entries {
            set.push(e.name, e.tensor)?;
        }
        Ok(set)
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<()> {
        let name = name.into();
        if self.entries.iter().any(|e| e.name == name) {
            return Err(Error::Argument(format!("duplicate parameter name {name:?}")));
        }
        self.entries.push(NamedTensor { name, tensor });
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[NamedTensor] {
        &self.entries
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|e| (e.name.as_str(), &e.tensor))
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.entries.iter().map(|e| &e.tensor)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|e| e.name == name).map(|e| &e.tensor)
    }

    pub fn names(&self) -> Vec<&str> {
        self.entries.iter().map(|e| e.name.as_str()).collect()
    }

    /// Flattened length over all tensors.
    pub fn total_len(&self) -> usize {
        self.entries.iter().map(|e| e.tensor.len()).sum()
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.total_len());
        for e in &self.entries {
            out.extend_from_slice(e.tensor.data());
        }
        out
    }

    /// A set with this set's names and shapes filled from `flat`.
    pub fn unflatten(&self, flat: &[f64]) -> Result<ParamSet> {
        if flat.len() != self.total_len() {
            return Err(Error::Argument(format!(
                "flat vector has {} values, parameter set needs {}",
                flat.len(),
                self.total_len()
            )));
        }
        let mut offset = 0;
        let entries = self
            .entries
            .iter()
            .map(|e| {
                let n = e.tensor.len();
                let t = Tensor::new(e.tensor.shape().to_vec(), flat[offset..offset + n].to_vec())
                    .expect("shape taken from an existing tensor");
                offset += n;
                NamedTensor {
                    name: e.name.clone(),
                    tensor: t,
                }
            })
            .collect();
        Ok(ParamSet { entries })
    }

    pub fn filled_like(&self, value: f64) -> ParamSet {
        self.map(|_| value)
    }

    pub fn zeros_like(&self) -> ParamSet {
        self.filled_like(0.0)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> ParamSet {
        ParamSet {
            entries: self
                .entries
                .iter()
                .map(|e| NamedTensor {
                    name: e.name.clone(),
                    tensor: e.tensor.map(&f),
                })
                .collect(),
        }
    }

    /// Elementwise combination with a congruent set.
    pub fn zip_map(&self, other: &ParamSet, f: impl Fn(f64, f64) -> f64) -> Result<ParamSet> {
        self.check_congruent(other)?;
        Ok(ParamSet {
            entries: self
                .entries
                .iter()
                .zip(&other.entries)
                .map(|(a, b)| NamedTensor {
                    name: a.name.clone(),
                    tensor: a.tensor.zip_map(&b.tensor, &f),
                })
                .collect(),
        })
    }

    pub fn check_congruent(&self, other: &ParamSet) -> Result<()> {
        if self.entries.len() != other.entries.len() {
            return Err(Error::Argument(format!(
                "parameter sets differ in size: {} vs {}",
                self.entries.len(),
                other.entries.len()
            )));
        }
        for (a, b) in self.entries.iter().zip(&other.entries) {
            if a.name != b.name || a.tensor.shape() != b.tensor.shape() {
                return Err(Error::Argument(format!(
                    "parameter {:?} {:?} does not match {:?} {:?}",
                    a.name,
                    a.tensor.shape(),
                    b.name,
                    b.tensor.shape()
                )));
            }
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.entries.iter().all(|e| e.tensor.is_finite())
    }

    /// First tensor holding a non-finite value.
    pub fn first_non_finite(&self) -> Option<&str> {
        self.entries
            .iter()
            .find(|e| !e.tensor.is_finite())
            .map(|e| e.name.as_str())
    }

    /// Adds every tensor to `graph` as a differentiable leaf.
    pub fn bind(&self, graph: &mut Graph) -> Vec<Var> {
        self.entries.iter().map(|e| graph.param(&e.tensor)).collect()
    }

    /// Adds every tensor to `graph` as a constant.
    pub fn bind_const(&self, graph: &mut Graph) -> Vec<Var> {
        self.entries.iter().map(|e| graph.input(&e.tensor)).collect()
    }

    /// Reads node values back into a set shaped like `self`.
    pub fn read_back(&self, graph: &Graph, vars: &[Var]) -> ParamSet {
        ParamSet {
            entries: self
                .entries
                .iter()
                .zip(vars)
                .map(|(e, &v)| NamedTensor {
                    name: e.name.clone(),
                    tensor: Tensor::new(e.tensor.shape().to_vec(), graph.value(v).data().to_vec())
                        .expect("graph value congruent with parameter"),
                })
                .collect(),
        }
    }

    pub fn dot(&self, other: &ParamSet) -> f64 {
        self.flatten()
            .iter()
            .zip(other.flatten())
            .map(|(a, b)| a * b)
            .sum()
    }
}
