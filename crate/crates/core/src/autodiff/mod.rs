//! Reverse-mode gradient engine and its finite-difference verifier.

mod gradcheck;
mod graph;

pub use gradcheck::{check_gradients, GradCheckReport, REL_ERROR_FLOOR};
pub use graph::{Adjoints, Graph, Mask, Var};
#[cfg(test)]
pub(crate) use graph::sigmoid;

use crate::error::Result;
use crate::params::{BoundParams, ModelParams};

/// Evaluates `loss` on a fresh graph and returns its value with parameter gradients.
pub fn value_and_grad<F>(params: &ModelParams, loss: F) -> Result<(f64, ModelParams)>
where
    F: FnOnce(&mut Graph, &BoundParams) -> Result<Var>,
{
    let mut g = Graph::new();
    let bound = params.bind(&mut g);
    let root = loss(&mut g, &bound)?;
    let value = g.value(root).item();
    let adj = g.backward(root)?;
    let grads = params.with_tensors(adj.into_params())?;
    Ok((value, grads))
}

/// Evaluates `loss` without a backward pass.
pub fn value_only<F>(params: &ModelParams, loss: F) -> Result<f64>
where
    F: FnOnce(&mut Graph, &BoundParams) -> Result<Var>,
{
    let mut g = Graph::new();
    let bound = params.bind(&mut g);
    let root = loss(&mut g, &bound)?;
    Ok(g.value(root).item())
}
