use std::sync::Arc;

use sha2::{Digest, Sha256};

use super::arch::{ParamLayout, ParamRole, ParamSlot};
use crate::error::{Error, Result};

/// A value for every trainable tensor of a network: weights, gradients,
/// directions and optimizer moments all share this shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    layout: Arc<ParamLayout>,
    values: Vec<Vec<f64>>,
}

/// Gradients are parameter-shaped.
pub type Gradients = Params;

impl Params {
    pub fn zeros(layout: &Arc<ParamLayout>) -> Self {
        Params {
            layout: Arc::clone(layout),
            values: layout.slots.iter().map(|s| vec![0.0; s.len()]).collect(),
        }
    }

    pub fn from_values(layout: &Arc<ParamLayout>, values: Vec<Vec<f64>>) -> Result<Self> {
        if values.len() != layout.slots.len()
            || values.iter().zip(&layout.slots).any(|(v, s)| v.len() != s.len())
        {
            return Err(Error::ShapeMismatch(
                "parameter values do not match the layout".into(),
            ));
        }
        Ok(Params {
            layout: Arc::clone(layout),
            values,
        })
    }

    pub fn from_flat(layout: &Arc<ParamLayout>, flat: &[f64]) -> Result<Self> {
        if flat.len() != layout.total_len() {
            return Err(Error::ShapeMismatch(format!(
                "flat parameter vector has {} entries, layout needs {}",
                flat.len(),
                layout.total_len()
            )));
        }
        let mut offset = 0;
        let values = layout
            .slots
            .iter()
            .map(|s| {
                let v = flat[offset..offset + s.len()].to_vec();
                offset += s.len();
                v
            })
            .collect();
        Ok(Params {
            layout: Arc::clone(layout),
            values,
        })
    }

    pub fn layout(&self) -> &Arc<ParamLayout> {
        &self.layout
    }

    pub fn slots(&self) -> &[ParamSlot] {
        &self.layout.slots
    }

    pub fn slot_count(&self) -> usize {
        self.values.len()
    }

    pub fn get(&self, slot: usize) -> &[f64] {
        &self.values[slot]
    }

    pub fn get_mut(&mut self, slot: usize) -> &mut [f64] {
        &mut self.values[slot]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&ParamSlot, &[f64])> {
        self.layout
            .slots
            .iter()
            .zip(self.values.iter().map(Vec::as_slice))
    }

    pub fn len(&self) -> usize {
        self.values.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.values.iter().flatten().copied().collect()
    }

    pub fn congruent(&self, other: &Params) -> bool {
        Arc::ptr_eq(&self.layout, &other.layout) || *self.layout == *other.layout
    }

    pub(crate) fn ensure_congruent(&self, other: &Params, what: &str) -> Result<()> {
        if self.congruent(other) {
            Ok(())
        } else {
            Err(Error::ShapeMismatch(format!(
                "{what} is not congruent with the network parameters"
            )))
        }
    }

    /// `self += a * other`.
    pub fn axpy(&mut self, a: f64, other: &Params) {
        for (dst, src) in self.values.iter_mut().zip(&other.values) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += a * s;
            }
        }
    }

    pub fn scale(&mut self, c: f64) {
        self.values.iter_mut().flatten().for_each(|v| *v *= c);
    }

    pub fn dot(&self, other: &Params) -> f64 {
        self.values
            .iter()
            .flatten()
            .zip(other.values.iter().flatten())
            .map(|(a, b)| a * b)
            .sum()
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().flatten().all(|v| v.is_finite())
    }

    /// Overwrites `self` with `base + a * d1 + b * d2` without reallocating.
    pub fn set_combination(&mut self, base: &Params, a: f64, d1: &Params, b: f64, d2: &Params) {
        for (((dst, t), x), y) in self
            .values
            .iter_mut()
            .zip(&base.values)
            .zip(&d1.values)
            .zip(&d2.values)
        {
            for (((o, &t), &x), &y) in dst.iter_mut().zip(t).zip(x).zip(y) {
                *o = t + a * x + b * y;
            }
        }
    }

    pub fn copy_from(&mut self, other: &Params) {
        for (dst, src) in self.values.iter_mut().zip(&other.values) {
            dst.copy_from_slice(src);
        }
    }

    /// Little-endian bytes of every value, slot by slot.
    pub fn to_le_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.len() * 8);
        for v in self.values.iter().flatten() {
            out.extend_from_slice(&v.to_bits().to_le_bytes());
        }
        out
    }

    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.to_le_bytes()))
    }

    /// Every filter exactly once in (layer, filter) order; see [`filter_view`].
    pub fn filters(&self) -> impl Iterator<Item = FilterRef<'_>> {
        filter_view(self)
    }

    pub(crate) fn values_mut(&mut self) -> &mut [Vec<f64>] {
        &mut self.values
    }
}

/// One output unit's incoming weights.
#[derive(Debug, Clone, Copy)]
pub struct FilterRef<'a> {
    pub layer: usize,
    pub filter: usize,
    pub slot: usize,
    pub values: &'a [f64],
}

/// Iterates every filter of the weight tensors in (layer, filter) order.
/// Row `j` of a dense weight `[out, in]` is filter `j`; output channel `j`
/// of a conv weight `[out, in, k, k]` is filter `j`. Biases and batch-norm
/// tensors contribute no filters.
pub fn filter_view(theta_like: &Params) -> impl Iterator<Item = FilterRef<'_>> {
    theta_like
        .iter()
        .enumerate()
        .filter(|(_, (slot, _))| slot.role == ParamRole::Weight)
        .flat_map(|(slot_index, (slot, values))| {
            values
                .chunks_exact(slot.filter_len())
                .enumerate()
                .map(move |(j, chunk)| FilterRef {
                    layer: slot.layer,
                    filter: j,
                    slot: slot_index,
                    values: chunk,
                })
        })
}
