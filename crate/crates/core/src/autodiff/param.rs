use super::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// A named tensor owned by a model. Non-trainable entries (batch-norm
/// running statistics) are stored alongside weights so checkpoints see one
/// flat namespace.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameter<T: Real> {
    pub name: String,
    pub value: Tensor<T>,
    pub trainable: bool,
}

/// Ordered parameter set with unique hierarchical names (`block1.layer2.conv.weight`).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T: Real> {
    params: Vec<Parameter<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { params: Vec::new() }
    }

    /// Appends a parameter and returns its slot index.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>, trainable: bool) -> Result<usize> {
        let name = name.into();
        if self.index_of(&name).is_some() {
            return Err(Error::invalid(format!("duplicate parameter name '{name}'")));
        }
        self.params.push(Parameter {
            name,
            value,
            trainable,
        });
        Ok(self.params.len() - 1)
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    pub fn get(&self, name: &str) -> Option<&Parameter<T>> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter<T>> {
        self.params.iter()
    }

    pub fn at(&self, index: usize) -> &Parameter<T> {
        &self.params[index]
    }

    pub(crate) fn at_mut(&mut self, index: usize) -> &mut Parameter<T> {
        &mut self.params[index]
    }

    /// Replaces a value, keeping the name and requiring the same shape.
    pub fn set(&mut self, index: usize, value: Tensor<T>) -> Result<()> {
        let p = &mut self.params[index];
        if p.value.shape() != value.shape() {
            return Err(Error::shape(format!(
                "parameter '{}' has shape {}, got {}",
                p.name,
                p.value.shape(),
                value.shape()
            )));
        }
        p.value = value;
        Ok(())
    }

    /// Number of scalar weights in trainable parameters.
    pub fn trainable_numel(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.value.numel())
            .sum()
    }

    /// Registers every entry in `g`: trainable ones as gradient leaves,
    /// the rest as constants. The returned vars align with slot indices.
    pub fn bind(&self, g: &mut Graph<T>) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| {
                if p.trainable {
                    g.param(p.value.clone())
                } else {
                    g.constant(p.value.clone())
                }
            })
            .collect()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Parameter {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    trainable: p.trainable,
                })
                .collect(),
        }
    }
}
