//! Padding and masking that let token vectors from skeletons with different
//! joint counts share one length `L`: `z′ = pad(z) ⊙ M`, with `M` one on the
//! original positions and zero on the padding.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Tape, Var};
use crate::skeldata::DatasetManifest;

#[derive(Clone, Debug, PartialEq)]
pub struct MaskedTokens {
    pub values: Vec<f64>,
    pub mask: Vec<f64>,
    pub valid_length: usize,
}

/// How padded positions reach the decoder.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskPolicy {
    /// Masked slots are excluded from attention.
    #[default]
    Drop,
    /// Masked slots are fed as zero vectors.
    Zeros,
}

/// `(L_spatial, L_temporal) = (max J · C, T · C)` over the given datasets.
pub fn global_token_length(
    manifests: &[&DatasetManifest],
    channels: usize,
    frames: usize,
) -> Result<(usize, usize)> {
    let max_j = manifests
        .iter()
        .map(|m| m.joint_count)
        .max()
        .ok_or_else(|| Error::param("global token length needs at least one dataset"))?;
    Ok((max_j * channels, frames * channels))
}

pub fn mask_for(valid_length: usize, len: usize) -> Vec<f64> {
    (0..len)
        .map(|i| if i < valid_length { 1.0 } else { 0.0 })
        .collect()
}

pub fn unify_tokens(raw: &[f64], len: usize) -> Result<MaskedTokens> {
    if raw.len() > len {
        return Err(Error::Overflow {
            len: raw.len(),
            max: len,
        });
    }
    let mask = mask_for(raw.len(), len);
    let mut values = raw.to_vec();
    values.resize(len, 0.0);
    values.iter_mut().zip(&mask).for_each(|(v, m)| *v *= m);
    Ok(MaskedTokens {
        values,
        mask,
        valid_length: raw.len(),
    })
}

/// Mean of the valid region viewed as `(valid_length / C, C)`.
pub fn masked_mean(tokens: &MaskedTokens, channels: usize) -> Result<Vec<f64>> {
    check_divisible(tokens.valid_length, channels)?;
    let positions = tokens.valid_length / channels;
    let mut out = vec![0.0; channels];
    for row in tokens.values[..tokens.valid_length].chunks(channels) {
        out.iter_mut().zip(row).for_each(|(o, v)| *o += v);
    }
    out.iter_mut().for_each(|v| *v /= positions as f64);
    Ok(out)
}

fn check_divisible(valid_length: usize, channels: usize) -> Result<()> {
    if channels == 0 || valid_length == 0 || !valid_length.is_multiple_of(channels) {
        return Err(Error::param(format!(
            "valid length {valid_length} is not a positive multiple of {channels} channels"
        )));
    }
    Ok(())
}

/// Records `pad(x) ⊙ M` on the tape; gradients never reach padded positions.
pub fn unify_var(tape: &mut Tape, x: Var, len: usize) -> Result<Var> {
    let n = tape.value(x).len();
    if n > len {
        return Err(Error::Overflow { len: n, max: len });
    }
    let padded = tape.pad(x, len);
    Ok(tape.mul_const(padded, mask_for(n, len)))
}

/// Tape form of [`masked_mean`].
pub fn masked_mean_var(
    tape: &mut Tape,
    x: Var,
    valid_length: usize,
    channels: usize,
) -> Result<Var> {
    check_divisible(valid_length, channels)?;
    Ok(tape.masked_mean(x, valid_length, channels))
}
