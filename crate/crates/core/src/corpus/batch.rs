use rand::Rng;

use super::{AugmentConfig, InteractionSequence, PAD};
use crate::error::Result;

/// Keeps the most recent `max_len` items and left-pads with [`PAD`].
pub fn pad_truncate(items: &[usize], max_len: usize) -> Vec<usize> {
    let keep = &items[items.len().saturating_sub(max_len)..];
    let mut out = vec![PAD; max_len - keep.len()];
    out.extend_from_slice(keep);
    out
}

/// Which target an evaluation pass predicts.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EvalSplit {
    /// Last training item from the items before it.
    Train,
    /// Validation item from the training part.
    Valid,
    /// Test item from everything before it.
    Test,
}

impl EvalSplit {
    pub fn name(self) -> &'static str {
        match self {
            EvalSplit::Train => "train",
            EvalSplit::Valid => "valid",
            EvalSplit::Test => "test",
        }
    }

    /// `(input history, target)`; `None` when the history would be empty.
    pub fn example(self, seq: &InteractionSequence) -> Option<(&[usize], usize)> {
        let n = seq.items.len();
        let cut = match self {
            EvalSplit::Train => n - 3,
            EvalSplit::Valid => n - 2,
            EvalSplit::Test => n - 1,
        };
        (cut > 0).then(|| (&seq.items[..cut], seq.items[cut]))
    }
}

impl std::str::FromStr for EvalSplit {
    type Err = crate::error::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(EvalSplit::Train),
            "valid" => Ok(EvalSplit::Valid),
            "test" => Ok(EvalSplit::Test),
            other => Err(crate::error::Error::InvalidArgument(format!("unknown split {other:?}"))),
        }
    }
}

/// A left-padded training batch, all matrices row-major `[B × L]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PaddedBatch {
    pub batch_size: usize,
    pub max_len: usize,
    pub input_ids: Vec<usize>,
    /// `input_ids` shifted left by one; the last column holds the next item.
    pub target_ids: Vec<usize>,
    /// `true` where `input_ids` holds a real item.
    pub pad_mask: Vec<bool>,
    /// Second view for the cross-view term; equals `input_ids` when
    /// augmentation is off.
    pub augmented_input_ids: Vec<usize>,
    /// Sorted full interaction history per row (for negative sampling).
    pub histories: Vec<Vec<usize>>,
    pub users: Vec<usize>,
}

impl PaddedBatch {
    /// Builds the next-item training batch from the training parts of
    /// `sequences`, which must all be [trainable](InteractionSequence::is_trainable).
    pub fn build<R: Rng + ?Sized>(
        sequences: &[&InteractionSequence],
        max_len: usize,
        augmentation: Option<(&AugmentConfig, &mut R)>,
    ) -> Result<Self> {
        let b = sequences.len();
        let mut input_ids = Vec::with_capacity(b * max_len);
        let mut target_ids = Vec::with_capacity(b * max_len);
        let mut augmented = Vec::with_capacity(b * max_len);
        let mut views: Vec<Vec<usize>> = Vec::with_capacity(b);
        for seq in sequences {
            let train = seq.train_part();
            debug_assert!(train.len() >= 2);
            let input = &train[..train.len() - 1];
            input_ids.extend(pad_truncate(input, max_len));
            target_ids.extend(pad_truncate(&train[1..], max_len));
            views.push(input.to_vec());
        }
        match augmentation {
            Some((cfg, rng)) => {
                for v in &views {
                    augmented.extend(pad_truncate(&cfg.random_view(v, rng)?, max_len));
                }
            }
            None => augmented.clone_from(&input_ids),
        }
        let pad_mask = input_ids.iter().map(|&i| i != PAD).collect();
        let histories = sequences
            .iter()
            .map(|s| {
                let mut h = s.items.clone();
                h.sort_unstable();
                h.dedup();
                h
            })
            .collect();
        Ok(Self {
            batch_size: b,
            max_len,
            input_ids,
            target_ids,
            pad_mask,
            augmented_input_ids: augmented,
            histories,
            users: sequences.iter().map(|s| s.user_index).collect(),
        })
    }

    /// Flat `b * L + j` indices of positions that carry a target.
    pub fn target_positions(&self) -> Vec<usize> {
        self.target_ids
            .iter()
            .enumerate()
            .filter(|(_, &t)| t != PAD)
            .map(|(i, _)| i)
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn pad_truncate_examples() {
        assert_eq!(pad_truncate(&[5, 6], 4), vec![0, 0, 5, 6]);
        let long: Vec<usize> = (1..=25).collect();
        assert_eq!(pad_truncate(&long, 20), (6..=25).collect::<Vec<_>>());
        assert_eq!(pad_truncate(&[], 3), vec![0, 0, 0]);
    }

    proptest::proptest! {
        #[test]
        fn pad_truncate_length(items in proptest::collection::vec(1usize..9, 0..40), max_len in 1usize..30) {
            let out = pad_truncate(&items, max_len);
            proptest::prop_assert_eq!(out.len(), max_len);
            let kept = items.len().min(max_len);
            proptest::prop_assert_eq!(&out[max_len - kept..], &items[items.len() - kept..]);
        }
    }

    fn fixture() -> Vec<InteractionSequence> {
        vec![
            InteractionSequence::new(0, vec![1, 2, 3, 4, 5, 6]),
            InteractionSequence::new(1, vec![7, 8, 9, 10]),
            InteractionSequence::new(2, (1..=12).collect()),
        ]
    }

    #[test]
    fn shift_property_holds_at_every_position() {
        let seqs = fixture();
        let refs: Vec<&InteractionSequence> = seqs.iter().collect();
        for max_len in 1..12 {
            let batch = PaddedBatch::build::<ChaCha8Rng>(&refs, max_len, None).unwrap();
            for (b, seq) in seqs.iter().enumerate() {
                let row = &batch.input_ids[b * max_len..(b + 1) * max_len];
                let tgt = &batch.target_ids[b * max_len..(b + 1) * max_len];
                for j in 0..max_len - 1 {
                    if row[j] != PAD && row[j + 1] != PAD {
                        assert_eq!(tgt[j], row[j + 1]);
                    }
                }
                // the final target is the last training item
                assert_eq!(tgt[max_len - 1], *seq.train_part().last().unwrap());
                // validation and test targets never appear as training targets
                let n = seq.items.len();
                for &t in tgt {
                    assert!(t == PAD || seq.items[..n - 2].contains(&t));
                }
            }
        }
    }

    #[test]
    fn augmented_view_is_padded_and_deterministic() {
        let seqs = fixture();
        let refs: Vec<&InteractionSequence> = seqs.iter().collect();
        let cfg = AugmentConfig::default();
        let mut r1 = ChaCha8Rng::seed_from_u64(3);
        let mut r2 = ChaCha8Rng::seed_from_u64(3);
        let a = PaddedBatch::build(&refs, 6, Some((&cfg, &mut r1))).unwrap();
        let b = PaddedBatch::build(&refs, 6, Some((&cfg, &mut r2))).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.augmented_input_ids.len(), 18);
    }

    #[test]
    fn split_examples() {
        let s = InteractionSequence::new(0, vec![1, 2, 3, 4, 5]);
        assert_eq!(EvalSplit::Test.example(&s), Some((&[1, 2, 3, 4][..], 5)));
        assert_eq!(EvalSplit::Valid.example(&s), Some((&[1, 2, 3][..], 4)));
        assert_eq!(EvalSplit::Train.example(&s), Some((&[1, 2][..], 3)));
        let short = InteractionSequence::new(0, vec![1, 2, 3]);
        assert_eq!(EvalSplit::Train.example(&short), None);
    }
}
