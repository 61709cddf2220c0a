//! Named parameter collections with gradient slots.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::Tensor;

/// One named tensor, trainable or frozen, with a gradient slot of the
/// same shape. Frozen parameters never receive gradient.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
    pub trainable: bool,
}

/// Ordered set of parameters. Order is declaration order and is also the
/// block order in checkpoint files.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct ParamSet {
    entries: Vec<Param>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: Tensor, trainable: bool) {
        assert!(
            self.index_of(name).is_none(),
            "duplicate parameter {name}"
        );
        let grad = Tensor::zeros(value.shape().to_vec());
        self.entries.push(Param {
            name: name.to_string(),
            value,
            grad,
            trainable,
        });
    }

    fn index_of(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|p| p.name == name)
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.index_of(name).map(|i| &self.entries[i])
    }

    pub fn value(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .map(|p| &p.value)
            .ok_or_else(|| Error::InvalidInput(format!("unknown parameter {name}")))
    }

    pub fn set_value(&mut self, name: &str, value: Tensor) -> Result<()> {
        let i = self
            .index_of(name)
            .ok_or_else(|| Error::InvalidInput(format!("unknown parameter {name}")))?;
        if value.shape() != self.entries[i].value.shape() {
            return Err(Error::InvalidInput(format!(
                "shape mismatch assigning {name}"
            )));
        }
        self.entries[i].value = value;
        Ok(())
    }

    /// Accumulate a gradient into a trainable parameter's slot. Gradients
    /// aimed at frozen parameters are dropped.
    pub fn accumulate_grad(&mut self, name: &str, grad: &Tensor) -> Result<()> {
        let i = self
            .index_of(name)
            .ok_or_else(|| Error::InvalidInput(format!("unknown parameter {name}")))?;
        let p = &mut self.entries[i];
        if !p.trainable {
            return Ok(());
        }
        if grad.shape() != p.grad.shape() {
            return Err(Error::InvalidInput(format!(
                "gradient shape mismatch for {name}"
            )));
        }
        p.grad = p.grad.add(grad)?;
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.entries {
            p.grad = Tensor::zeros(p.value.shape().to_vec());
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.entries.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of trainable scalar coordinates.
    pub fn trainable_numel(&self) -> usize {
        self.entries
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.value.numel())
            .sum()
    }

    /// Order-sensitive FNV-1a hash of all parameter bits. Used to assert
    /// that frozen components were not touched.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        let mut eat = |byte: u8| {
            h ^= byte as u64;
            h = h.wrapping_mul(0x100000001b3);
        };
        for p in &self.entries {
            for b in p.name.as_bytes() {
                eat(*b);
            }
            for v in p.value.data() {
                for b in v.to_le_bytes() {
                    eat(b);
                }
            }
        }
        h
    }
}
