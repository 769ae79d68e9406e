//! Interaction logs → filtered, indexed, leave-one-out split sequences.

mod augment;
mod batch;
mod bucket;
mod cache;
mod filter;
mod load;

use std::collections::HashMap;

pub use augment::{augment, AugmentConfig, AugmentKind};
pub use batch::{pad_truncate, EvalSplit, PaddedBatch};
pub use bucket::{bucket, bucket_for, FrequencyBucket, LengthBucket, SubgroupAssignment};
pub use cache::{corpus_hash, read_corpus, write_corpus, CorpusStats, CATALOG_FILE, CORPUS_HEADER, SEQUENCES_FILE, STATS_FILE};
pub use filter::build_sequences;
pub use load::{load_interactions, InputFormat};

/// Reserved padding index.
pub const PAD: usize = 0;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RawInteraction {
    pub user_key: String,
    pub item_key: String,
    pub timestamp: i64,
}

impl RawInteraction {
    pub fn new(user_key: impl Into<String>, item_key: impl Into<String>, timestamp: i64) -> Self {
        Self { user_key: user_key.into(), item_key: item_key.into(), timestamp }
    }
}

/// Bijection between opaque item keys and indices `1..=item_count`.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ItemCatalog {
    keys: Vec<String>,
    index: HashMap<String, usize>,
}

impl ItemCatalog {
    pub fn new() -> Self {
        Self::default()
    }

    /// Returns the index of `key`, assigning the next free one if unseen.
    pub fn intern(&mut self, key: &str) -> usize {
        if let Some(&i) = self.index.get(key) {
            return i;
        }
        self.keys.push(key.to_string());
        let i = self.keys.len();
        self.index.insert(key.to_string(), i);
        i
    }

    pub fn item_count(&self) -> usize {
        self.keys.len()
    }

    pub fn index_of(&self, key: &str) -> Option<usize> {
        self.index.get(key).copied()
    }

    pub fn key_of(&self, index: usize) -> Option<&str> {
        if index == PAD {
            return None;
        }
        self.keys.get(index - 1).map(String::as_str)
    }

    /// `(key, index)` pairs in index order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, usize)> {
        self.keys.iter().enumerate().map(|(i, k)| (k.as_str(), i + 1))
    }
}

/// One user's chronologically ordered items, split leave-one-out:
/// `items[..n-2]` train, `items[n-2]` validation, `items[n-1]` test.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct InteractionSequence {
    pub user_index: usize,
    pub items: Vec<usize>,
}

impl InteractionSequence {
    pub fn new(user_index: usize, items: Vec<usize>) -> Self {
        debug_assert!(items.len() >= 3, "sequence shorter than 3");
        debug_assert!(!items.contains(&PAD), "padding index inside a sequence");
        Self { user_index, items }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn train_part(&self) -> &[usize] {
        &self.items[..self.items.len() - 2]
    }

    pub fn valid_target(&self) -> usize {
        self.items[self.items.len() - 2]
    }

    pub fn test_target(&self) -> usize {
        self.items[self.items.len() - 1]
    }

    /// At least one (input, next item) pair inside the training part.
    pub fn is_trainable(&self) -> bool {
        self.train_part().len() >= 2
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn catalog_round_trips_and_reserves_zero() {
        let mut c = ItemCatalog::new();
        assert_eq!(c.intern("a"), 1);
        assert_eq!(c.intern("b"), 2);
        assert_eq!(c.intern("a"), 1);
        assert_eq!(c.item_count(), 2);
        for (k, i) in c.iter() {
            assert_eq!(c.index_of(k), Some(i));
            assert_eq!(c.key_of(i), Some(k));
        }
        assert_eq!(c.key_of(PAD), None);
    }

    #[test]
    fn leave_one_out_split() {
        let s = InteractionSequence::new(0, vec![4, 5, 6, 7]);
        assert_eq!(s.train_part(), &[4, 5]);
        assert_eq!(s.valid_target(), 6);
        assert_eq!(s.test_target(), 7);
        assert!(s.is_trainable());
        assert!(!InteractionSequence::new(1, vec![1, 2, 3]).is_trainable());
    }
}
