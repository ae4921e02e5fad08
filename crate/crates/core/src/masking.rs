//! Hard and Bernoulli (soft) masking of top-N shortcut positions.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::dataset::{MASK, PAD};

#[derive(Debug, Error, PartialEq)]
pub enum MaskError {
    #[error("position {index} outside sequence of length {len}")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("position {index} holds padding")]
    PaddingPosition { index: usize },
    #[error("shortcut degree {0} outside [0, 1]")]
    InvalidDegree(f64),
}

/// Outcome of one soft-mask draw.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskDecision {
    pub example_id: String,
    pub epoch: usize,
    pub masked: bool,
    pub ids: Vec<usize>,
}

/// Replaces the given positions with MASK.
pub fn hard_mask(ids: &[usize], positions: &[usize]) -> Result<Vec<usize>, MaskError> {
    let mut out = ids.to_vec();
    for &index in positions {
        match ids.get(index) {
            None => {
                return Err(MaskError::IndexOutOfRange {
                    index,
                    len: ids.len(),
                })
            }
            Some(&PAD) => return Err(MaskError::PaddingPosition { index }),
            Some(_) => out[index] = MASK,
        }
    }
    Ok(out)
}

/// Uniform draw in `[0, 1)` keyed by `(seed, epoch, example id)`.
///
/// The key, not the call order, fixes the value, so data-loader shuffling
/// cannot change a decision.
pub fn keyed_uniform(seed: u64, epoch: usize, example_id: &str) -> f64 {
    let mut h = Sha256::new();
    h.update(b"soft-mask");
    h.update(seed.to_le_bytes());
    h.update((epoch as u64).to_le_bytes());
    h.update(example_id.as_bytes());
    let key: [u8; 32] = h.finalize().into();
    ChaCha8Rng::from_seed(key).gen::<f64>()
}

/// One Bernoulli(`degree`) draw for the whole example; on success all
/// `positions` are masked, otherwise the ids come back unchanged.
pub fn soft_mask(
    ids: &[usize],
    positions: &[usize],
    degree: f64,
    seed: u64,
    epoch: usize,
    example_id: &str,
) -> Result<MaskDecision, MaskError> {
    if !(0.0..=1.0).contains(&degree) {
        return Err(MaskError::InvalidDegree(degree));
    }
    let masked = keyed_uniform(seed, epoch, example_id) < degree;
    let ids = if masked {
        hard_mask(ids, positions)?
    } else {
        ids.to_vec()
    };
    Ok(MaskDecision {
        example_id: example_id.to_string(),
        epoch,
        masked,
        ids,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hard_mask_definition() {
        let ids = [10, 11, 12, 13];
        assert_eq!(hard_mask(&ids, &[1, 3]).unwrap(), vec![10, MASK, 12, MASK]);
        assert_eq!(hard_mask(&ids, &[]).unwrap(), ids.to_vec());
        let once = hard_mask(&ids, &[2]).unwrap();
        assert_eq!(hard_mask(&once, &[2]).unwrap(), once);
    }

    #[test]
    fn hard_mask_rejects_bad_positions() {
        assert_eq!(
            hard_mask(&[10, 11], &[2]),
            Err(MaskError::IndexOutOfRange { index: 2, len: 2 })
        );
        assert_eq!(
            hard_mask(&[10, PAD], &[1]),
            Err(MaskError::PaddingPosition { index: 1 })
        );
    }

    #[test]
    fn degenerate_degrees() {
        for epoch in 0..50 {
            let id = format!("ex{epoch}");
            assert!(!soft_mask(&[5, 6], &[0], 0.0, 1, epoch, &id).unwrap().masked);
            let d = soft_mask(&[5, 6], &[0], 1.0, 1, epoch, &id).unwrap();
            assert!(d.masked);
            assert_eq!(d.ids, vec![MASK, 6]);
        }
    }

    #[test]
    fn unmasked_is_identical() {
        let ids = vec![5, 6, 7, PAD];
        for epoch in 0..20 {
            let d = soft_mask(&ids, &[0, 2], 0.5, 9, epoch, "x").unwrap();
            if !d.masked {
                assert_eq!(d.ids, ids);
            } else {
                assert_eq!(d.ids, vec![MASK, 6, MASK, PAD]);
            }
        }
    }

    #[test]
    fn decisions_are_keyed() {
        let a = soft_mask(&[5], &[0], 0.5, 3, 2, "e1").unwrap();
        let b = soft_mask(&[5], &[0], 0.5, 3, 2, "e1").unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn invalid_degree_rejected() {
        assert_eq!(
            soft_mask(&[5], &[0], 1.5, 0, 0, "e"),
            Err(MaskError::InvalidDegree(1.5))
        );
        assert!(soft_mask(&[5], &[0], -0.1, 0, 0, "e").is_err());
    }
}
