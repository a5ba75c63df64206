//! Mean token accuracy over scored positions.

use crate::LoraError;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenStream {
    ids: Vec<u32>,
    mask: Vec<bool>,
}

impl TokenStream {
    pub fn new(ids: Vec<u32>, mask: Vec<bool>) -> Result<Self, LoraError> {
        if ids.len() != mask.len() {
            return Err(LoraError::LengthMismatch(ids.len(), mask.len()));
        }
        Ok(Self { ids, mask })
    }

    /// Every position scored.
    pub fn unmasked(ids: Vec<u32>) -> Self {
        let mask = vec![true; ids.len()];
        Self { ids, mask }
    }

    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Fraction of scored positions where the predicted id equals the reference id.
/// With no scored positions the accuracy is defined as 1.
pub fn mean_token_accuracy(pred: &TokenStream, reference: &TokenStream) -> Result<f64, LoraError> {
    if pred.len() != reference.len() {
        return Err(LoraError::LengthMismatch(pred.len(), reference.len()));
    }
    if pred.mask != reference.mask {
        return Err(LoraError::MaskMismatch);
    }
    let (mut hits, mut scored) = (0usize, 0usize);
    for ((p, r), &m) in pred.ids.iter().zip(&reference.ids).zip(&reference.mask) {
        if m {
            scored += 1;
            hits += usize::from(p == r);
        }
    }
    if scored == 0 {
        log::warn!("token accuracy over an empty mask; reporting 1.0");
        return Ok(1.0);
    }
    Ok(hits as f64 / scored as f64)
}
