use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{PagError, Result};
use crate::tensor::Tensor;

/// Named learnable tensors of a model. Insertion order is the canonical order
/// for binding, flattening and serialisation.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    tensors: IndexMap<String, Tensor>,
}

impl ModelParams {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.tensors.insert(name.into(), tensor);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.tensors.values()
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.tensors.values_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    /// Number of named tensors.
    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    pub fn zeros_like(&self) -> Self {
        ModelParams {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), Tensor::zeros(v.shape())))
                .collect(),
        }
    }

    /// Rebuilds a parameter set with this set's names from tensors in canonical order.
    pub fn with_tensors(&self, tensors: Vec<Tensor>) -> Result<Self> {
        if tensors.len() != self.tensors.len() {
            return Err(PagError::shape(
                "with_tensors",
                format!("expected {} tensors, got {}", self.tensors.len(), tensors.len()),
            ));
        }
        let mut out = IndexMap::with_capacity(tensors.len());
        for ((name, old), new) in self.tensors.iter().zip(tensors) {
            if old.shape() != new.shape() {
                return Err(PagError::shape(
                    "with_tensors",
                    format!("{name}: {:?} vs {:?}", old.shape(), new.shape()),
                ));
            }
            out.insert(name.clone(), new);
        }
        Ok(ModelParams { tensors: out })
    }

    /// `self += alpha * other`; both sets must share names and shapes.
    pub fn axpy(&mut self, alpha: f64, other: &ModelParams) {
        for (a, b) in self.tensors.values_mut().zip(other.tensors.values()) {
            a.axpy(alpha, b);
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.tensors.values_mut().for_each(|t| t.scale_in_place(s));
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.values().all(Tensor::all_finite)
    }

    pub fn max_abs(&self) -> f64 {
        self.tensors.values().fold(0.0, |m, t| m.max(t.max_abs()))
    }

    /// Largest absolute element-wise difference.
    pub fn max_abs_diff(&self, other: &ModelParams) -> f64 {
        self.tensors
            .values()
            .zip(other.tensors.values())
            .flat_map(|(a, b)| a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()))
            .fold(0.0, f64::max)
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.tensors
            .values()
            .flat_map(|t| t.data().iter().copied())
            .collect()
    }

    /// Registers every tensor as a parameter leaf of `graph`.
    pub fn bind(&self, graph: &mut Graph) -> BoundParams<'_> {
        let vars = self
            .tensors
            .values()
            .map(|t| graph.param(t.clone()))
            .collect();
        BoundParams { params: self, vars }
    }
}

/// Graph handles for a [`ModelParams`], looked up by name.
pub struct BoundParams<'a> {
    params: &'a ModelParams,
    vars: Vec<Var>,
}

impl BoundParams<'_> {
    /// Handle for a named parameter.
    ///
    /// Panics if `name` is not part of the bound set; parameter names are fixed
    /// by the architecture that created them.
    pub fn var(&self, name: &str) -> Var {
        let k = self
            .params
            .tensors
            .get_index_of(name)
            .unwrap_or_else(|| panic!("unknown parameter `{name}`"));
        self.vars[k]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}
