use std::collections::HashMap;

use super::{Real, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct BufferId(pub(crate) usize);

#[derive(Debug, Clone, PartialEq)]
pub struct Parameter<T> {
    pub name: String,
    pub tensor: Tensor<T>,
}

/// Named trainable parameters plus non-trainable buffers (batchnorm running
/// statistics). Names are unique across both tables.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T> {
    params: Vec<Parameter<T>>,
    buffers: Vec<(String, Tensor<T>)>,
    names: HashMap<String, usize>,
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            params: Vec::new(),
            buffers: Vec::new(),
            names: HashMap::new(),
        }
    }

    fn claim(&mut self, name: &str) -> Result<()> {
        if self.names.contains_key(name) {
            return Err(Error::Config(format!("duplicate parameter name '{name}'")));
        }
        self.names.insert(name.to_string(), self.names.len());
        Ok(())
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        self.claim(&name)?;
        self.params.push(Parameter {
            name,
            tensor: tensor.with_grad(),
        });
        Ok(ParamId(self.params.len() - 1))
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> Result<BufferId> {
        let name = name.into();
        self.claim(&name)?;
        self.buffers.push((name, tensor));
        Ok(BufferId(self.buffers.len() - 1))
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.params[id.0]
    }

    pub fn buffer(&self, id: BufferId) -> &Tensor<T> {
        &self.buffers[id.0].1
    }

    pub fn buffer_mut(&mut self, id: BufferId) -> &mut Tensor<T> {
        &mut self.buffers[id.0].1
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn params(&self) -> &[Parameter<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Parameter<T>] {
        &mut self.params
    }

    pub fn buffers(&self) -> &[(String, Tensor<T>)] {
        &self.buffers
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    pub fn zero_grad(&mut self) {
        self.params.iter_mut().for_each(|p| p.tensor.zero_grad());
    }

    /// Copies values (not grads) from `other`, which must have the same layout.
    pub fn load_values(&mut self, other: &ParamStore<T>) -> Result<()> {
        if self.params.len() != other.params.len() || self.buffers.len() != other.buffers.len() {
            return Err(Error::Checkpoint("parameter layout differs".into()));
        }
        for (dst, src) in self.params.iter_mut().zip(&other.params) {
            if dst.name != src.name || dst.tensor.shape() != src.tensor.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter '{}' {:?} does not match '{}' {:?}",
                    dst.name,
                    dst.tensor.shape(),
                    src.name,
                    src.tensor.shape()
                )));
            }
            dst.tensor.data_mut().copy_from_slice(src.tensor.data());
        }
        for ((dn, dt), (sn, st)) in self.buffers.iter_mut().zip(&other.buffers) {
            if dn != sn || dt.shape() != st.shape() {
                return Err(Error::Checkpoint(format!("buffer '{dn}' does not match '{sn}'")));
            }
            dt.data_mut().copy_from_slice(st.data());
        }
        Ok(())
    }
}
