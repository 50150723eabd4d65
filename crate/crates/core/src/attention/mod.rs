//! Scaled dot-product attention, in-attention normalization and multi-head
//! assembly.

mod mha;
mod norm;
mod sdpa;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::param::RngState;

pub use mha::{
    multi_head_attention, nsa_attention, nsa_attention_weights, AttendCache, MhaTensors,
    MhaWeights, Projection, QkNormCache,
};
pub use norm::{
    batch_norm_eval_style, instance_norm, layer_norm, AffineParams, ColumnNorm, LayerNormCache,
    NormStats, RowNorm,
};
pub use sdpa::{scaled_dot_product_attention, attention_weights, AttnMask, HeadCache, HeadGrads};

/// Normalization applied to projected queries/keys inside attention.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum NormMode {
    None,
    #[default]
    In,
    InAffine,
    Ln,
    Bn,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttentionConfig {
    /// Input channel count.
    pub d_k: usize,
    /// Per-head latent width.
    pub d: usize,
    /// Head count.
    pub h: usize,
    /// Geometric latent width.
    pub d_g: usize,
    pub norm_mode: NormMode,
    pub normalize_q: bool,
    pub normalize_k: bool,
    pub eps: f64,
    pub dropout_p: f64,
}

/// Matches the toy model: width 64, four heads, `d_g` 16.
impl Default for AttentionConfig {
    fn default() -> Self {
        AttentionConfig {
            d_g: 16,
            ..AttentionConfig::new(64, 4)
        }
    }
}

impl AttentionConfig {
    pub fn new(width: usize, heads: usize) -> Self {
        AttentionConfig {
            d_k: width,
            d: width / heads.max(1),
            h: heads,
            d_g: 64,
            norm_mode: NormMode::In,
            normalize_q: true,
            normalize_k: false,
            eps: 1e-5,
            dropout_p: 0.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.h == 0 || self.d == 0 || self.d_k == 0 || self.d_g == 0 {
            return Err(Error::Config("attention widths and head count must be positive".into()));
        }
        if self.d * self.h != self.d_k {
            return Err(Error::Config(format!(
                "per-head width {} x {} heads must equal model width {}",
                self.d, self.h, self.d_k
            )));
        }
        if !(self.eps > 0.0) {
            return Err(Error::Config("eps must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::Config("dropout_p must lie in [0, 1)".into()));
        }
        Ok(())
    }

    /// Whether any normalization is active on the content queries or keys.
    pub fn normalizes(&self) -> bool {
        self.norm_mode != NormMode::None && (self.normalize_q || self.normalize_k)
    }
}

/// Inverted-dropout keep mask: each entry is `0` or `1/(1-p)`.
pub(crate) fn dropout_mask(rng: &mut RngState, len: usize, p: f64) -> Vec<f64> {
    let keep = 1.0 / (1.0 - p);
    (0..len).map(|_| if rng.chance(p) { 0.0 } else { keep }).collect()
}

/// Applies inverted dropout in place when an rng is supplied and `p > 0`,
/// returning the mask for the backward pass.
pub(crate) fn apply_dropout(rng: Option<&mut RngState>, p: f64, data: &mut [f64]) -> Option<Vec<f64>> {
    let rng = rng?;
    if p <= 0.0 {
        return None;
    }
    let mask = dropout_mask(rng, data.len(), p);
    for (v, m) in data.iter_mut().zip(&mask) {
        *v *= m;
    }
    Some(mask)
}

pub(crate) fn apply_mask(mask: Option<&Vec<f64>>, data: &mut [f64]) {
    if let Some(mask) = mask {
        for (v, m) in data.iter_mut().zip(mask) {
            *v *= m;
        }
    }
}
