use crate::error::{Error, Result};
use crate::nn::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Index of a named tensor in a `ParamSet`. Stable across save/load because
/// registration order is part of a model's deterministic construction.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(pub(crate) usize);

/// Flat registry of trainable tensors. Slots marked `ascent` are updated by
/// gradient ascent instead of descent (adversarial loss weights), and an
/// optional box constraint is applied after every optimizer step.
#[derive(Clone)]
pub struct ParamSet {
    names: Vec<String>,
    values: Vec<Tensor>,
    ascent: Vec<bool>,
    bounds: Vec<Option<(f64, f64)>>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet {
            names: Vec::new(),
            values: Vec::new(),
            ascent: Vec::new(),
            bounds: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.names.push(name.into());
        self.values.push(value);
        self.ascent.push(false);
        self.bounds.push(None);
        ParamId(self.values.len() - 1)
    }

    pub fn add_ascent(
        &mut self,
        name: impl Into<String>,
        value: Tensor,
        bounds: (f64, f64),
    ) -> ParamId {
        let id = self.add(name, value);
        self.ascent[id.0] = true;
        self.bounds[id.0] = Some(bounds);
        id
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn total_elements(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn is_ascent(&self, idx: usize) -> bool {
        self.ascent[idx]
    }

    pub fn bound(&self, idx: usize) -> Option<(f64, f64)> {
        self.bounds[idx]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(self.values.iter())
    }

    pub fn values(&self) -> &[Tensor] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Tensor] {
        &mut self.values
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    /// Overwrite a slot with a tensor of identical shape (checkpoint load).
    pub fn restore(&mut self, name: &str, value: Tensor) -> Result<()> {
        let id = self
            .find(name)
            .ok_or_else(|| Error::Config(format!("unknown parameter `{}`", name)))?;
        if self.values[id.0].shape() != value.shape() {
            return Err(Error::ShapeMismatch {
                op: "ParamSet::restore",
                detail: format!(
                    "`{}` has shape {:?}, stored tensor is {:?}",
                    name,
                    self.values[id.0].shape(),
                    value.shape()
                ),
            });
        }
        self.values[id.0] = value;
        Ok(())
    }

    /// Register every parameter as a differentiable leaf on `tape`.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        Bound {
            vars: self.values.iter().map(|t| tape.param(t.clone())).collect(),
        }
    }
}

impl Default for ParamSet {
    fn default() -> Self {
        Self::new()
    }
}

/// Tape handles for one binding of a `ParamSet`, indexed by `ParamId`.
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}
