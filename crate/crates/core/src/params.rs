//! Trainable parameters and the store that owns them.

use crate::error::{shape_err, PitError, Result};
use crate::tensor::Tensor2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Feasible set a parameter is projected onto after every optimizer step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Constraint {
    Free,
    Interval { lo: f64, hi: f64 },
}

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub value: Tensor2,
    pub grad: Tensor2,
    pub trainable: bool,
    pub constraint: Constraint,
}

impl Param {
    pub fn zero_grad(&mut self) {
        self.grad.data_mut().fill(0.0);
    }

    pub fn project(&mut self) {
        if let Constraint::Interval { lo, hi } = self.constraint {
            for v in self.value.data_mut() {
                *v = v.clamp(lo, hi);
            }
        }
    }
}

/// Ordered collection of named parameters. Insertion order is the canonical order
/// used for checkpoints and optimizer state.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor2) -> ParamId {
        self.add_constrained(name, value, Constraint::Free)
    }

    pub fn add_constrained(&mut self, name: impl Into<String>, value: Tensor2, constraint: Constraint) -> ParamId {
        let grad = Tensor2::zeros(value.rows(), value.cols());
        let mut p = Param {
            name: name.into(),
            value,
            grad,
            trainable: true,
            constraint,
        };
        p.project();
        self.params.push(p);
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor2 {
        &self.params[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Tensor2 {
        &self.params[id.0].grad
    }

    /// Replaces a value, keeping the shape fixed and re-applying the constraint.
    pub fn set_value(&mut self, id: ParamId, value: Tensor2) -> Result<()> {
        let p = &mut self.params[id.0];
        if p.value.shape() != value.shape() {
            return Err(shape_err(
                "set_value",
                format!(
                    "parameter `{}` is {:?}, got {:?}",
                    p.name,
                    p.value.shape(),
                    value.shape()
                ),
            ));
        }
        p.value = value;
        p.project();
        Ok(())
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.zero_grad();
        }
    }

    pub fn project_all(&mut self) {
        for p in &mut self.params {
            p.project();
        }
    }

    /// Number of trainable scalars.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().filter(|p| p.trainable).map(|p| p.value.len()).sum()
    }

    pub fn check_finite(&self) -> Result<()> {
        for p in &self.params {
            if !p.value.is_finite() {
                return Err(PitError::NonFinite("parameter update"));
            }
        }
        Ok(())
    }
}
