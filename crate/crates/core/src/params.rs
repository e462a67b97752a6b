//! Named parameter tensors and their binding onto a tape.

use crate::tensor::{Result, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(tensor);
        ParamId(self.tensors.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.tensors.iter_mut()
    }

    /// Number of trainable scalars.
    pub fn trainable_count(&self) -> usize {
        self.tensors.iter().filter(|t| t.requires_grad()).map(|t| t.data().len()).sum()
    }

    /// Places every tensor on `tape`; trainable ones become gradient leaves.
    pub fn bind(&self, tape: &mut Tape) -> Result<Binding> {
        let vars = self.tensors.iter().map(|t| tape.leaf(t)).collect::<Result<Vec<_>>>()?;
        Ok(Binding { vars })
    }

    /// Moves leaf gradients from `tape` into the tensors' gradient buffers.
    pub fn collect_grads(&mut self, tape: &Tape, binding: &Binding) -> Result<()> {
        for (t, v) in self.tensors.iter_mut().zip(&binding.vars) {
            if let Some(g) = tape.grad(*v) {
                t.accumulate_grad(g)?;
            }
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::zero_grad);
    }
}

#[derive(Debug, Clone)]
pub struct Binding {
    vars: Vec<Var>,
}

impl Binding {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }
}
