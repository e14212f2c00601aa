//! Named trainable parameters and non-trainable buffers.

use std::collections::HashMap;

use crate::error::{config_err, Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct BufferId(pub(crate) usize);

/// A trainable tensor and its accumulated gradient.
#[derive(Clone, Debug)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub gradient: Tensor,
}

impl Parameter {
    pub fn new(name: impl Into<String>, value: Tensor) -> Self {
        let gradient = Tensor::zeros(value.shape().to_vec());
        Parameter { name: name.into(), value, gradient }
    }

    pub fn numel(&self) -> usize {
        self.value.len()
    }
}

/// Non-trainable state such as batch-norm running statistics.
#[derive(Clone, Debug)]
pub struct Buffer {
    pub name: String,
    pub value: Tensor,
}

/// Ordered collection of a model's parameters and buffers, addressed by id
/// or by unique dotted name.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
    buffers: Vec<Buffer>,
    index: HashMap<String, Slot>,
}

#[derive(Clone, Copy, Debug)]
enum Slot {
    Param(usize),
    Buffer(usize),
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_param(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        self.claim(&name, Slot::Param(self.params.len()))?;
        self.params.push(Parameter::new(name, value));
        Ok(ParamId(self.params.len() - 1))
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, value: Tensor) -> Result<BufferId> {
        let name = name.into();
        self.claim(&name, Slot::Buffer(self.buffers.len()))?;
        self.buffers.push(Buffer { name, value });
        Ok(BufferId(self.buffers.len() - 1))
    }

    fn claim(&mut self, name: &str, slot: Slot) -> Result<()> {
        if self.index.contains_key(name) {
            return Err(config_err!("duplicate parameter name {name:?}"));
        }
        self.index.insert(name.to_string(), slot);
        Ok(())
    }

    pub fn param(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn param_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn buffer(&self, id: BufferId) -> &Buffer {
        &self.buffers[id.0]
    }

    pub fn buffer_mut(&mut self, id: BufferId) -> &mut Buffer {
        &mut self.buffers[id.0]
    }

    pub fn params(&self) -> &[Parameter] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Parameter] {
        &mut self.params
    }

    pub fn buffers(&self) -> &[Buffer] {
        &self.buffers
    }

    pub fn param_id(&self, name: &str) -> Option<ParamId> {
        match self.index.get(name) {
            Some(Slot::Param(i)) => Some(ParamId(*i)),
            _ => None,
        }
    }

    pub fn find_param(&self, name: &str) -> Option<&Parameter> {
        self.param_id(name).map(|id| self.param(id))
    }

    /// Mutable access to the value of a parameter or buffer by name.
    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        match *self.index.get(name)? {
            Slot::Param(i) => Some(&mut self.params[i].value),
            Slot::Buffer(i) => Some(&mut self.buffers[i].value),
        }
    }

    /// Every parameter and buffer in registration order.
    pub fn named_tensors(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params
            .iter()
            .map(|p| (p.name.as_str(), &p.value))
            .chain(self.buffers.iter().map(|b| (b.name.as_str(), &b.value)))
    }

    pub fn num_params(&self) -> usize {
        self.params.iter().map(Parameter::numel).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.gradient.data_mut().fill(0.0);
        }
    }

    /// Replaces a value, keeping the registered shape.
    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        let slot = self.tensor_mut(name).ok_or_else(|| Error::UnknownTensor(name.to_string()))?;
        if slot.shape() != value.shape() {
            return Err(Error::DimMismatch {
                name: name.to_string(),
                expected: slot.shape().to_vec(),
                found: value.shape().to_vec(),
            });
        }
        *slot = value;
        Ok(())
    }
}
