//! Subgroups by sequence length and by target popularity.

use std::fmt;

use super::{EvalSplit, InteractionSequence};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum LengthBucket {
    UpTo10,
    UpTo20,
    UpTo30,
    Over30,
}

impl LengthBucket {
    pub const ALL: [LengthBucket; 4] = [Self::UpTo10, Self::UpTo20, Self::UpTo30, Self::Over30];

    pub fn of(len: usize) -> Self {
        match len {
            0..=10 => Self::UpTo10,
            11..=20 => Self::UpTo20,
            21..=30 => Self::UpTo30,
            _ => Self::Over30,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Self::UpTo10 => "[≤10]",
            Self::UpTo20 => "(10,20]",
            Self::UpTo30 => "(20,30]",
            Self::Over30 => "(>30]",
        }
    }
}

impl fmt::Display for LengthBucket {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum FrequencyBucket {
    UpTo20,
    UpTo40,
    UpTo60,
    Over60,
}

impl FrequencyBucket {
    pub const ALL: [FrequencyBucket; 4] = [Self::UpTo20, Self::UpTo40, Self::UpTo60, Self::Over60];

    pub fn of(count: usize) -> Self {
        match count {
            0..=20 => Self::UpTo20,
            21..=40 => Self::UpTo40,
            41..=60 => Self::UpTo60,
            _ => Self::Over60,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Self::UpTo20 => "[≤20]",
            Self::UpTo40 => "(20,40]",
            Self::UpTo60 => "(40,60]",
            Self::Over60 => "(>60]",
        }
    }
}

impl fmt::Display for FrequencyBucket {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SubgroupAssignment {
    pub user_index: usize,
    /// From the length of the user's training part.
    pub length: LengthBucket,
    /// From how often the evaluated target occurs in training parts.
    pub frequency: FrequencyBucket,
}

/// Buckets for test-split evaluation, counting training occurrences only.
pub fn bucket(sequences: &[InteractionSequence]) -> Vec<SubgroupAssignment> {
    bucket_for(sequences, EvalSplit::Test, false)
}

/// Buckets for the users evaluated on `split`, in sequence order. Users
/// without an example on that split are skipped. With `count_valid`, the
/// validation targets are counted as training occurrences as well.
pub fn bucket_for(sequences: &[InteractionSequence], split: EvalSplit, count_valid: bool) -> Vec<SubgroupAssignment> {
    let max_item = sequences.iter().flat_map(|s| s.items.iter().copied()).max().unwrap_or(0);
    let mut freq = vec![0usize; max_item + 1];
    for s in sequences {
        for &i in s.train_part() {
            freq[i] += 1;
        }
        if count_valid {
            freq[s.valid_target()] += 1;
        }
    }
    sequences
        .iter()
        .filter_map(|s| {
            let (_, target) = split.example(s)?;
            Some(SubgroupAssignment {
                user_index: s.user_index,
                length: LengthBucket::of(s.train_part().len()),
                frequency: FrequencyBucket::of(freq[target]),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn boundaries_are_inclusive_on_the_right() {
        assert_eq!(LengthBucket::of(10).label(), "[≤10]");
        assert_eq!(LengthBucket::of(11).label(), "(10,20]");
        assert_eq!(LengthBucket::of(30).label(), "(20,30]");
        assert_eq!(LengthBucket::of(31).label(), "(>30]");
        assert_eq!(FrequencyBucket::of(60).label(), "(40,60]");
        assert_eq!(FrequencyBucket::of(20).label(), "[≤20]");
        assert_eq!(FrequencyBucket::of(61).label(), "(>60]");
    }

    #[test]
    fn frequency_counts_training_parts() {
        // item 9 is user 0's test target and appears in 3 training parts
        let seqs = vec![
            InteractionSequence::new(0, vec![1, 2, 3, 9]),
            InteractionSequence::new(1, vec![9, 4, 5, 6]),
            InteractionSequence::new(2, vec![9, 9, 7, 8]),
        ];
        let b = bucket(&seqs);
        assert_eq!(b.len(), 3);
        assert_eq!(b[0].frequency, FrequencyBucket::UpTo20);
        assert_eq!(b[0].length, LengthBucket::UpTo10);

        let mut many = vec![InteractionSequence::new(0, vec![1, 2, 9])];
        for u in 1..=21 {
            many.push(InteractionSequence::new(u, vec![9, 3, 4, 5]));
        }
        assert_eq!(bucket(&many)[0].frequency, FrequencyBucket::UpTo40);
    }

    #[test]
    fn count_valid_flag_adds_validation_targets() {
        let mut seqs = vec![InteractionSequence::new(0, vec![1, 2, 9])];
        // item 9 is a validation target for 20 users and in no training part
        for u in 1..=20 {
            seqs.push(InteractionSequence::new(u, vec![3, 4, 9, 5]));
        }
        seqs.push(InteractionSequence::new(21, vec![9, 4, 6, 7]));
        assert_eq!(bucket(&seqs)[0].frequency, FrequencyBucket::UpTo20);
        assert_eq!(bucket_for(&seqs, EvalSplit::Test, true)[0].frequency, FrequencyBucket::UpTo40);
    }
}
