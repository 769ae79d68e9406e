//! Sequence-level views for the cross-view contrastive term.

use rand::seq::{index, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::PAD;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugmentKind {
    /// Keep a contiguous span of `⌈ratio·len⌉` items.
    Crop,
    /// Replace `⌊ratio·len⌋` positions with the padding index.
    Mask,
    /// Shuffle a contiguous span of `⌊ratio·len⌋` items in place.
    Reorder,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub crop_ratio: f64,
    pub mask_ratio: f64,
    pub reorder_ratio: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self { crop_ratio: 0.6, mask_ratio: 0.3, reorder_ratio: 0.25 }
    }
}

impl AugmentConfig {
    /// Draws the kind uniformly, then applies it with the configured ratio.
    pub fn random_view<R: Rng + ?Sized>(&self, items: &[usize], rng: &mut R) -> Result<Vec<usize>> {
        let kind = match rng.gen_range(0..3) {
            0 => AugmentKind::Crop,
            1 => AugmentKind::Mask,
            _ => AugmentKind::Reorder,
        };
        let ratio = match kind {
            AugmentKind::Crop => self.crop_ratio,
            AugmentKind::Mask => self.mask_ratio,
            AugmentKind::Reorder => self.reorder_ratio,
        };
        augment(items, rng, kind, ratio)
    }
}

pub fn augment<R: Rng + ?Sized>(items: &[usize], rng: &mut R, kind: AugmentKind, ratio: f64) -> Result<Vec<usize>> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::InvalidArgument(format!("augmentation ratio must lie in (0, 1), got {ratio}")));
    }
    if items.is_empty() {
        return Err(Error::InvalidArgument("cannot augment an empty sequence".into()));
    }
    let len = items.len();
    let mut out = items.to_vec();
    match kind {
        AugmentKind::Crop => {
            let keep = ((ratio * len as f64).ceil() as usize).clamp(1, len);
            let start = rng.gen_range(0..=len - keep);
            out = items[start..start + keep].to_vec();
        }
        AugmentKind::Mask => {
            let count = (ratio * len as f64).floor() as usize;
            for pos in index::sample(rng, len, count) {
                out[pos] = PAD;
            }
        }
        AugmentKind::Reorder => {
            let span = (ratio * len as f64).floor() as usize;
            let start = rng.gen_range(0..=len - span);
            out[start..start + span].shuffle(rng);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn tiny_mask_ratio_masks_nothing() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(augment(&[1, 2, 3], &mut rng, AugmentKind::Mask, 1e-9).unwrap(), vec![1, 2, 3]);
    }

    #[test]
    fn crop_enumerates_every_start() {
        // keep = ceil(0.5 * 4) = 2, start ∈ {0, 1, 2}
        let items = [1, 2, 3, 4];
        let windows = [vec![1, 2], vec![2, 3], vec![3, 4]];
        let mut seen = [false; 3];
        for seed in 0..64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let out = augment(&items, &mut rng, AugmentKind::Crop, 0.5).unwrap();
            let start = windows.iter().position(|w| *w == out).expect("crop is a contiguous window");
            seen[start] = true;
            // the same seed reproduces the same window
            let mut again = ChaCha8Rng::seed_from_u64(seed);
            assert_eq!(augment(&items, &mut again, AugmentKind::Crop, 0.5).unwrap(), out);
        }
        assert_eq!(seen, [true; 3]);
    }

    #[test]
    fn crop_with_start_one_yields_middle_window() {
        let items = [1, 2, 3, 4];
        let seed = (0..64)
            .find(|s| {
                let mut probe = ChaCha8Rng::seed_from_u64(*s);
                probe.gen_range(0..=2usize) == 1
            })
            .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        assert_eq!(augment(&items, &mut rng, AugmentKind::Crop, 0.5).unwrap(), vec![2, 3]);
    }

    #[test]
    fn reorder_only_touches_one_window() {
        let items: Vec<usize> = (1..=4).collect();
        for seed in 0..32 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let out = augment(&items, &mut rng, AugmentKind::Reorder, 0.5).unwrap();
            let changed: Vec<usize> = (0..4).filter(|&i| out[i] != items[i]).collect();
            if let (Some(lo), Some(hi)) = (changed.first(), changed.last()) {
                assert!(hi - lo < 2, "changes outside a span of 2: {out:?}");
            }
            let mut sorted = out.clone();
            sorted.sort();
            assert_eq!(sorted, items);
        }
    }

    #[test]
    fn ratio_out_of_range_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for r in [0.0, 1.0, -0.1, 1.5] {
            assert!(augment(&[1, 2], &mut rng, AugmentKind::Crop, r).is_err());
        }
        assert!(augment(&[], &mut rng, AugmentKind::Mask, 0.5).is_err());
    }

    proptest::proptest! {
        #[test]
        fn augment_invariants(
            items in proptest::collection::vec(1usize..50, 1..30),
            ratio in 0.01f64..0.99,
            seed in 0u64..1000,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let masked = augment(&items, &mut rng, AugmentKind::Mask, ratio).unwrap();
            proptest::prop_assert_eq!(masked.len(), items.len());
            for (m, o) in masked.iter().zip(&items) {
                proptest::prop_assert!(*m == PAD || m == o);
            }
            let mut reordered = augment(&items, &mut rng, AugmentKind::Reorder, ratio).unwrap();
            let mut orig = items.clone();
            reordered.sort();
            orig.sort();
            proptest::prop_assert_eq!(reordered, orig);
            let cropped = augment(&items, &mut rng, AugmentKind::Crop, ratio).unwrap();
            proptest::prop_assert_eq!(cropped.len(), ((ratio * items.len() as f64).ceil() as usize).clamp(1, items.len()));
            proptest::prop_assert!(items.windows(cropped.len()).any(|w| w == cropped.as_slice()));
        }
    }
}
