//! Small deterministic corpora for tests and smoke runs.

use crate::corpus::{build_sequences, InteractionSequence, ItemCatalog, RawInteraction};
use crate::error::Result;

/// Ring corpus: user `u` visits `s, s+1, …` (mod `items`) for `len` steps,
/// starting at `s = u·stride mod items`. Item keys are `i<k>`, so the next
/// item is always the successor of the current one on the ring.
pub fn ring_interactions(users: usize, items: usize, len: usize, stride: usize) -> Vec<RawInteraction> {
    let mut out = Vec::with_capacity(users * len);
    for u in 0..users {
        let start = u * stride % items;
        for k in 0..len {
            out.push(RawInteraction::new(format!("u{u}"), format!("i{}", (start + k) % items), k as i64));
        }
    }
    out
}

/// The default ring corpus (50 users, 100 items, length 8, stride 7)
/// after filtering with `min_count = 1`.
pub fn ring_corpus() -> Result<(Vec<InteractionSequence>, ItemCatalog)> {
    build_sequences(&ring_interactions(50, 100, 8, 7), 1)
}
