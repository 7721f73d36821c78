//! The five sequence augmentations used to build the contrastive view and the
//! robustness perturbations.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::dataset::{Domain, TableSizes, Token, FIRST_ITEM_INDEX, MASK_INDEX};
use crate::error::{DpgError, Result};
use crate::rng::{self, StreamRng};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum AugmentOp {
    Crop,
    Mask,
    Reorder,
    Substitute,
    Insert,
}

impl AugmentOp {
    pub const ALL: [AugmentOp; 5] = [
        AugmentOp::Crop,
        AugmentOp::Mask,
        AugmentOp::Reorder,
        AugmentOp::Substitute,
        AugmentOp::Insert,
    ];
}

impl fmt::Display for AugmentOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            AugmentOp::Crop => "crop",
            AugmentOp::Mask => "mask",
            AugmentOp::Reorder => "reorder",
            AugmentOp::Substitute => "substitute",
            AugmentOp::Insert => "insert",
        };
        f.write_str(s)
    }
}

impl FromStr for AugmentOp {
    type Err = DpgError;

    fn from_str(s: &str) -> Result<Self> {
        AugmentOp::ALL
            .into_iter()
            .find(|op| op.to_string() == s.to_ascii_lowercase())
            .ok_or_else(|| DpgError::InvalidArgument(format!("unknown augmentation {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentationSpec {
    pub op: AugmentOp,
    pub rate: f64,
    pub rng_seed: u64,
}

pub const DEFAULT_AUG_RATE: f64 = 0.2;

fn count(rate: f64, len: usize) -> usize {
    ((rate * len as f64).ceil() as usize).min(len)
}

fn random_item(rng: &mut StreamRng, d: Domain, sizes: &TableSizes) -> Token {
    Token::new(rng.random_range(FIRST_ITEM_INDEX..sizes.get(d)), d)
}

/// Applies one augmentation. Sequences shorter than two items pass through
/// unchanged; Insert output is truncated to the `max_seq_len` most recent.
pub fn augment(items: &[Token], spec: &AugmentationSpec, sizes: &TableSizes, max_seq_len: usize) -> Result<Vec<Token>> {
    if !(spec.rate > 0.0 && spec.rate < 1.0) {
        return Err(DpgError::InvalidArgument(format!(
            "augmentation rate {} outside (0, 1)",
            spec.rate
        )));
    }
    let len = items.len();
    if len < 2 {
        return Ok(items.to_vec());
    }
    let mut rng = rng::stream(spec.rng_seed, "augment", 0);
    let mut out = items.to_vec();
    match spec.op {
        AugmentOp::Crop => {
            let keep = (((1.0 - spec.rate) * len as f64).ceil() as usize).clamp(1, len);
            let start = rng.random_range(0..=len - keep);
            out = items[start..start + keep].to_vec();
        }
        AugmentOp::Mask => {
            let mut positions: Vec<usize> = (0..len).collect();
            positions.shuffle(&mut rng);
            for &p in &positions[..count(spec.rate, len)] {
                out[p].item = MASK_INDEX;
            }
        }
        AugmentOp::Reorder => {
            let window = count(spec.rate, len);
            let start = rng.random_range(0..=len - window);
            out[start..start + window].shuffle(&mut rng);
        }
        AugmentOp::Substitute => {
            let mut positions: Vec<usize> = (0..len).collect();
            positions.shuffle(&mut rng);
            for &p in &positions[..count(spec.rate, len)] {
                let d = out[p].domain;
                // Draw until the replacement differs when the vocabulary allows it.
                let mut t = random_item(&mut rng, d, sizes);
                while t.item == items[p].item && sizes.get(d) > FIRST_ITEM_INDEX + 1 {
                    t = random_item(&mut rng, d, sizes);
                }
                out[p] = t;
            }
        }
        AugmentOp::Insert => {
            for _ in 0..count(spec.rate, len) {
                let d = items[rng.random_range(0..len)].domain;
                let t = random_item(&mut rng, d, sizes);
                let at = rng.random_range(0..=out.len());
                out.insert(at, t);
            }
            if out.len() > max_seq_len {
                out.drain(..out.len() - max_seq_len);
            }
        }
    }
    Ok(out)
}

/// Picks one augmentation uniformly and applies it at `rate`.
pub fn random_augment(items: &[Token], rate: f64, seed: u64, sizes: &TableSizes, max_seq_len: usize) -> Result<Vec<Token>> {
    let mut rng = rng::stream(seed, "augment-op", 0);
    let op = AugmentOp::ALL[rng.random_range(0..AugmentOp::ALL.len())];
    augment(
        items,
        &AugmentationSpec {
            op,
            rate,
            rng_seed: seed,
        },
        sizes,
        max_seq_len,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const SIZES: TableSizes = TableSizes { x: 12, y: 9 };

    fn seq(n: usize) -> Vec<Token> {
        (0..n)
            .map(|i| {
                let d = if i % 3 == 0 { Domain::Y } else { Domain::X };
                Token::new(FIRST_ITEM_INDEX + i % 7, d)
            })
            .collect()
    }

    fn spec(op: AugmentOp, rate: f64, seed: u64) -> AugmentationSpec {
        AugmentationSpec { op, rate, rng_seed: seed }
    }

    #[test]
    fn crop_half_of_four_is_contiguous_pair() {
        let s = seq(4);
        for seed in 0..20 {
            let out = augment(&s, &spec(AugmentOp::Crop, 0.5, seed), &SIZES, 15).unwrap();
            assert_eq!(out.len(), 2);
            assert!(s.windows(2).any(|w| w == out.as_slice()));
        }
    }

    #[test]
    fn mask_replaces_ceil_rate_positions() {
        let s = seq(10);
        let out = augment(&s, &spec(AugmentOp::Mask, 0.25, 3), &SIZES, 15).unwrap();
        let masked: Vec<_> = out.iter().zip(&s).filter(|(a, b)| a != b).collect();
        assert_eq!(masked.len(), 3);
        for (a, b) in masked {
            assert_eq!(a.item, MASK_INDEX);
            assert_eq!(a.domain, b.domain);
        }
        // Smallest admissible rate still masks exactly one position.
        let out = augment(&s, &spec(AugmentOp::Mask, 1e-9, 3), &SIZES, 15).unwrap();
        assert_eq!(out.iter().filter(|t| t.item == MASK_INDEX).count(), 1);
    }

    #[test]
    fn reorder_is_a_permutation() {
        let s = seq(13);
        let mut sorted = s.clone();
        sorted.sort();
        for seed in 0..1000 {
            let mut out = augment(&s, &spec(AugmentOp::Reorder, 0.4, seed), &SIZES, 15).unwrap();
            out.sort();
            assert_eq!(out, sorted);
        }
    }

    #[test]
    fn substitute_and_insert_counts() {
        let s = seq(10);
        let out = augment(&s, &spec(AugmentOp::Substitute, 0.2, 9), &SIZES, 15).unwrap();
        assert_eq!(out.iter().zip(&s).filter(|(a, b)| a != b).count(), 2);
        assert!(out.iter().zip(&s).all(|(a, b)| a.domain == b.domain));

        let out = augment(&s, &spec(AugmentOp::Insert, 0.2, 9), &SIZES, 15).unwrap();
        assert_eq!(out.len(), 12);
        let out = augment(&seq(15), &spec(AugmentOp::Insert, 0.2, 9), &SIZES, 15).unwrap();
        assert_eq!(out.len(), 15);
    }

    #[test]
    fn rate_bounds_and_short_sequences() {
        let s = seq(5);
        assert!(augment(&s, &spec(AugmentOp::Crop, 0.0, 0), &SIZES, 15).is_err());
        assert!(augment(&s, &spec(AugmentOp::Crop, 1.0, 0), &SIZES, 15).is_err());
        let one = seq(1);
        for op in AugmentOp::ALL {
            assert_eq!(augment(&one, &spec(op, 0.5, 1), &SIZES, 15).unwrap(), one);
        }
    }

    proptest! {
        #[test]
        fn outputs_stay_in_vocabulary(len in 1usize..15, rate in 0.01f64..0.99, seed: u64, op_i in 0usize..5) {
            let s = seq(len);
            let op = AugmentOp::ALL[op_i];
            let out = augment(&s, &spec(op, rate, seed), &SIZES, 15).unwrap();
            prop_assert!(!out.is_empty() && out.len() <= 15);
            for t in &out {
                prop_assert!(t.item == MASK_INDEX || (t.item >= FIRST_ITEM_INDEX && t.item < SIZES.get(t.domain)));
            }
            let again = augment(&s, &spec(op, rate, seed), &SIZES, 15).unwrap();
            prop_assert_eq!(out, again);
        }
    }
}
