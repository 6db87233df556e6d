//! Mixing of inversion-side state into the edit branch.
//!
//! All three operations are convex combinations. The endpoints `w = 0` and
//! `w = 1` return the corresponding input unchanged (bit for bit), and the
//! mask blend is a per-cell select, so degenerate settings reduce exactly.

use ndarray::{Array2, Array3, Zip};
use thiserror::Error;

use crate::tensor::Latent;
use crate::trajectory::AttentionSnapshot;

#[derive(Debug, Error, PartialEq)]
pub enum MixError {
    #[error("mixing weight {0} outside [0, 1]")]
    WeightOutOfRange(f64),
    #[error("attention snapshots cover different site registries")]
    RegistryMismatch,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("mask entry {0} is not 0 or 1")]
    NonBinaryMask(u8),
}

fn check_weight(w: f64) -> Result<(), MixError> {
    if (0.0..=1.0).contains(&w) {
        Ok(())
    } else {
        Err(MixError::WeightOutOfRange(w))
    }
}

fn lerp(inv: &Array3<f64>, edit: &Array3<f64>, w: f64) -> Array3<f64> {
    if w == 0.0 {
        return edit.clone();
    }
    if w == 1.0 {
        return inv.clone();
    }
    let mut out = Array3::zeros(edit.raw_dim());
    Zip::from(&mut out).and(inv).and(edit).for_each(|o, &a, &b| *o = w * a + (1.0 - w) * b);
    out
}

/// `w * a_inv + (1 - w) * a_edit` at every site.
pub fn mix_attention(
    a_inv: &AttentionSnapshot,
    a_edit: &AttentionSnapshot,
    w: f64,
) -> Result<AttentionSnapshot, MixError> {
    check_weight(w)?;
    if !a_inv.same_registry(a_edit) {
        return Err(MixError::RegistryMismatch);
    }
    let maps = a_inv.maps().iter().zip(a_edit.maps()).map(|(a, b)| lerp(a, b, w)).collect();
    AttentionSnapshot::new(a_edit.sites().to_vec(), maps).map_err(|e| MixError::ShapeMismatch(e.to_string()))
}

/// `w * z_inv + (1 - w) * z_edit`.
pub fn mix_latent(z_inv: &Latent, z_edit: &Latent, w: f64) -> Result<Latent, MixError> {
    check_weight(w)?;
    if z_inv.dim() != z_edit.dim() {
        return Err(MixError::ShapeMismatch(format!("{:?} vs {:?}", z_inv.dim(), z_edit.dim())));
    }
    Ok(lerp(z_inv, z_edit, w))
}

/// `M * z_mixed + (1 - M) * z_inv` with `M` broadcast over channels.
pub fn blend_mask(z_mixed: &Latent, z_inv: &Latent, mask: &Array2<u8>) -> Result<Latent, MixError> {
    if z_mixed.dim() != z_inv.dim() {
        return Err(MixError::ShapeMismatch(format!("{:?} vs {:?}", z_mixed.dim(), z_inv.dim())));
    }
    let (_, h, w) = z_mixed.dim();
    if mask.dim() != (h, w) {
        return Err(MixError::ShapeMismatch(format!("mask is {:?}, latent is {h}x{w}", mask.dim())));
    }
    if let Some(&bad) = mask.iter().find(|&&m| m > 1) {
        return Err(MixError::NonBinaryMask(bad));
    }
    Ok(Array3::from_shape_fn(
        z_mixed.raw_dim(),
        |(c, y, x)| {
            if mask[[y, x]] == 1 {
                z_mixed[[c, y, x]]
            } else {
                z_inv[[c, y, x]]
            }
        },
    ))
}
