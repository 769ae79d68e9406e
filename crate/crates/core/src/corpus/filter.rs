use std::collections::HashMap;

use super::{InteractionSequence, ItemCatalog, RawInteraction};
use crate::error::{Error, Result};

/// Minimum sequence length for a leave-one-out split.
const MIN_SEQUENCE_LEN: usize = 3;

/// Filters to the `min_count`-core (users and items, repeated to a fixpoint),
/// orders each user's interactions by timestamp (ties keep file order) and
/// indexes the surviving items.
///
/// Users shorter than three interactions are dropped inside the same fixpoint
/// loop, so the core property also holds for `min_count < 3`. Users and items
/// are numbered in order of first appearance in the input.
pub fn build_sequences(
    interactions: &[RawInteraction],
    min_count: usize,
) -> Result<(Vec<InteractionSequence>, ItemCatalog)> {
    if min_count < 1 {
        return Err(Error::InvalidArgument("min_count must be >= 1".into()));
    }
    let user_min = min_count.max(MIN_SEQUENCE_LEN);

    let mut user_ids: HashMap<&str, usize> = HashMap::new();
    let mut item_ids: HashMap<&str, usize> = HashMap::new();
    let rows: Vec<(usize, usize)> = interactions
        .iter()
        .map(|r| {
            let nu = user_ids.len();
            let u = *user_ids.entry(r.user_key.as_str()).or_insert(nu);
            let ni = item_ids.len();
            let i = *item_ids.entry(r.item_key.as_str()).or_insert(ni);
            (u, i)
        })
        .collect();

    let mut alive = vec![true; rows.len()];
    let mut rounds = 0;
    loop {
        let mut ucount = vec![0usize; user_ids.len()];
        let mut icount = vec![0usize; item_ids.len()];
        for (&(u, i), _) in rows.iter().zip(&alive).filter(|(_, a)| **a) {
            ucount[u] += 1;
            icount[i] += 1;
        }
        let mut changed = false;
        for (&(u, i), a) in rows.iter().zip(alive.iter_mut()) {
            if *a && (ucount[u] < user_min || icount[i] < min_count) {
                *a = false;
                changed = true;
            }
        }
        rounds += 1;
        if !changed {
            break;
        }
    }
    log::debug!("core filtering reached a fixpoint after {rounds} rounds");

    // number surviving users and items by first appearance anywhere in the input
    let mut per_user: HashMap<usize, Vec<usize>> = HashMap::new();
    let mut item_alive = vec![false; item_ids.len()];
    for (row, _) in alive.iter().enumerate().filter(|(_, a)| **a) {
        per_user.entry(rows[row].0).or_default().push(row);
        item_alive[rows[row].1] = true;
    }
    if per_user.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut order: Vec<usize> = Vec::with_capacity(per_user.len());
    let mut seen = vec![false; user_ids.len()];
    let mut catalog = ItemCatalog::new();
    for (r, &(u, i)) in rows.iter().enumerate() {
        if per_user.contains_key(&u) && !seen[u] {
            seen[u] = true;
            order.push(u);
        }
        if item_alive[i] {
            catalog.intern(&interactions[r].item_key);
        }
    }

    let sequences = order
        .iter()
        .enumerate()
        .map(|(user_index, u)| {
            let mut user_rows = per_user.remove(u).unwrap_or_default();
            // stable: equal timestamps keep file order
            user_rows.sort_by_key(|&r| interactions[r].timestamp);
            let items = user_rows
                .iter()
                .map(|&r| catalog.index_of(&interactions[r].item_key).expect("interned above"))
                .collect();
            InteractionSequence::new(user_index, items)
        })
        .collect();
    Ok((sequences, catalog))
}
