//! Named trainable parameters with optional structural-zero masks.

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    ConvWeight,
    FcWeight,
    Bias,
    NormScale,
    NormShift,
    AttnWeight,
    AttnBias,
}

impl ParamKind {
    /// Weight decay applies to conv and fully-connected weights only.
    pub fn decays(self) -> bool {
        matches!(self, ParamKind::ConvWeight | ParamKind::FcWeight | ParamKind::AttnWeight)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub kind: ParamKind,
    pub value: Tensor,
    pub grad: Tensor,
    /// `true` marks a live entry; absent means every entry is live.
    pub mask: Option<Vec<bool>>,
}

impl Param {
    pub fn new(name: impl Into<String>, kind: ParamKind, value: Tensor) -> Self {
        let grad = Tensor::zeros(value.dims()).expect("value has a valid shape");
        Param {
            name: name.into(),
            kind,
            value,
            grad,
            mask: None,
        }
    }

    pub fn with_mask(mut self, mask: Vec<bool>) -> Result<Self> {
        if mask.len() != self.value.numel() {
            return Err(Error::ShapeMismatch(format!(
                "mask of {} entries for {} {:?}",
                mask.len(),
                self.name,
                self.value.dims()
            )));
        }
        self.mask = Some(mask);
        self.apply_mask();
        Ok(self)
    }

    pub fn numel(&self) -> usize {
        self.value.numel()
    }

    pub fn live_count(&self) -> usize {
        self.mask
            .as_ref()
            .map_or(self.value.numel(), |m| m.iter().filter(|&&b| b).count())
    }

    pub fn is_live(&self, i: usize) -> bool {
        self.mask.as_ref().is_none_or(|m| m[i])
    }

    /// Zero the value and gradient at every masked position.
    pub fn apply_mask(&mut self) {
        if let Some(mask) = &self.mask {
            for ((v, g), &live) in self
                .value
                .data_mut()
                .iter_mut()
                .zip(self.grad.data_mut().iter_mut())
                .zip(mask)
            {
                if !live {
                    *v = 0.0;
                    *g = 0.0;
                }
            }
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.data_mut().fill(0.0);
    }

    /// Add `g` into the gradient at live entries.
    pub fn accumulate(&mut self, g: &[f64]) {
        debug_assert_eq!(g.len(), self.grad.numel());
        let grad = self.grad.data_mut();
        match &self.mask {
            Some(mask) => {
                for ((a, b), &live) in grad.iter_mut().zip(g).zip(mask) {
                    if live {
                        *a += b;
                    }
                }
            }
            None => {
                for (a, b) in grad.iter_mut().zip(g) {
                    *a += b;
                }
            }
        }
    }

    /// Uniform fill in `[-bound, bound)` from `rng`, masked afterwards.
    pub fn init_uniform(&mut self, rng: &mut Rng, bound: f64) {
        for v in self.value.data_mut() {
            *v = rng.uniform(-bound, bound);
        }
        self.apply_mask();
    }
}

/// Non-trainable state saved alongside parameters (normalization statistics).
#[derive(Debug, Clone, PartialEq)]
pub struct Buffer {
    pub name: String,
    pub value: Tensor,
}
