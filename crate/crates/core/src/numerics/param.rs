use super::tensor::Tensor;
use crate::error::{Error, Result};

/// A named trainable tensor with its gradient accumulator.
///
/// `grad` is `None` until a backward pass writes it; optimizers treat a
/// missing gradient as a state error rather than as zero.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub grad: Option<Tensor>,
}

impl Param {
    pub fn new(name: impl Into<String>, value: Tensor) -> Self {
        Self {
            name: name.into(),
            value,
            grad: None,
        }
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    /// Adds `g` into the accumulator, creating it on first use.
    pub fn accumulate(&mut self, g: &[f64]) -> Result<()> {
        if g.len() != self.value.len() {
            return Err(Error::dim("Param::accumulate", self.value.shape(), &[g.len()]));
        }
        let grad = self.grad.get_or_insert_with(|| Tensor::zeros_like(&self.value));
        for (a, &v) in grad.data_mut().iter_mut().zip(g) {
            *a += v;
        }
        Ok(())
    }

    pub fn set_grad(&mut self, grad: Tensor) -> Result<()> {
        if grad.shape() != self.value.shape() {
            return Err(Error::dim("Param::set_grad", self.value.shape(), grad.shape()));
        }
        self.grad = Some(grad);
        Ok(())
    }
}

/// Checks that names in a parameter collection are unique.
pub fn check_unique_names<'a>(names: impl IntoIterator<Item = &'a str>) -> Result<()> {
    let mut seen = std::collections::HashSet::new();
    for name in names {
        if !seen.insert(name) {
            return Err(Error::Argument(format!("duplicate parameter name `{name}`")));
        }
    }
    Ok(())
}
