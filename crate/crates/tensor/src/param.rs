use crate::error::{Result, TensorError};
use crate::tape::Gradients;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A named trainable tensor with an optional accumulated gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Option<Tensor>,
}

/// Ordered collection of parameters. Insertion order is the canonical order
/// used for serialization and optimizer state.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Parameter>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.find(&name).is_some() {
            return Err(TensorError::contract(
                "param",
                format!("duplicate parameter name {name:?}"),
            ));
        }
        self.params.push(Parameter {
            name,
            value,
            grad: None,
        });
        Ok(ParamId(self.params.len() - 1))
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    /// Looks a parameter value up by name.
    pub fn named(&self, name: &str) -> Option<&Tensor> {
        self.find(name).map(|id| self.value(id))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    pub fn num_values(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    /// Adds the parameter gradients of one backward pass into `grad`.
    /// Parameters the loss did not reach receive an explicit zero gradient.
    pub fn accumulate(&mut self, grads: &Gradients) -> Result<()> {
        for (i, p) in self.params.iter_mut().enumerate() {
            let g = p.grad.get_or_insert_with(|| Tensor::zeros(p.value.shape()));
            if let Some(update) = grads.param(ParamId(i)) {
                g.add_assign(update)?;
            }
        }
        Ok(())
    }

    /// Gradients in parameter order; missing gradients read as zeros.
    pub fn grads(&self) -> Vec<Tensor> {
        self.params
            .iter()
            .map(|p| {
                p.grad
                    .clone()
                    .unwrap_or_else(|| Tensor::zeros(p.value.shape()))
            })
            .collect()
    }
}
