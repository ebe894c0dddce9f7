//! Named trainable parameter arrays and their gradients.

use crate::error::{invalid, Result};

/// A model whose trainable state is an ordered list of flat arrays.
///
/// `param_names`, `params` and `params_mut` must agree in order and length.
pub trait Parameterized {
    fn param_names(&self) -> Vec<String>;
    fn params(&self) -> Vec<&[f64]>;
    fn params_mut(&mut self) -> Vec<&mut [f64]>;

    fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }
}

/// One gradient array per parameter array, same order and shapes.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamGrads {
    pub names: Vec<String>,
    pub grads: Vec<Vec<f64>>,
}

impl ParamGrads {
    pub fn zeros_like(model: &dyn Parameterized) -> Self {
        Self {
            names: model.param_names(),
            grads: model.params().iter().map(|p| vec![0.0; p.len()]).collect(),
        }
    }

    pub fn get(&self, name: &str) -> Option<&[f64]> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| self.grads[i].as_slice())
    }

    /// Adds `other` elementwise, in index order.
    pub fn accumulate(&mut self, other: &ParamGrads) -> Result<()> {
        if self.names != other.names {
            return invalid("gradient bundles describe different parameters");
        }
        for (a, b) in self.grads.iter_mut().zip(&other.grads) {
            if a.len() != b.len() {
                return invalid("gradient array length mismatch");
            }
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
        Ok(())
    }

    pub fn scale(&mut self, s: f64) {
        for g in &mut self.grads {
            g.iter_mut().for_each(|v| *v *= s);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.grads.iter().flatten().all(|v| v.is_finite())
    }

    pub fn max_abs(&self) -> f64 {
        self.grads.iter().flatten().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Largest absolute entry among arrays whose name starts with `prefix`.
    pub fn max_abs_with_prefix(&self, prefix: &str) -> f64 {
        self.names
            .iter()
            .zip(&self.grads)
            .filter(|(n, _)| n.starts_with(prefix))
            .flat_map(|(_, g)| g.iter())
            .fold(0.0, |m, v| m.max(v.abs()))
    }
}
