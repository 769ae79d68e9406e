//! On-disk form of a prepared corpus.

use std::fmt;
use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::{InteractionSequence, ItemCatalog, PAD};
use crate::error::{Error, Result};

pub const CORPUS_HEADER: &str = "#cddrec-corpus v1";
pub const CATALOG_FILE: &str = "catalog.tsv";
pub const SEQUENCES_FILE: &str = "sequences.tsv";
pub const STATS_FILE: &str = "stats.txt";

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CorpusStats {
    pub users: usize,
    pub items: usize,
    pub interactions: usize,
}

impl CorpusStats {
    pub fn of(sequences: &[InteractionSequence], catalog: &ItemCatalog) -> Self {
        Self {
            users: sequences.len(),
            items: catalog.item_count(),
            interactions: sequences.iter().map(InteractionSequence::len).sum(),
        }
    }

    pub fn avg_seq_len(&self) -> f64 {
        self.interactions as f64 / self.users.max(1) as f64
    }

    pub fn interactions_per_item(&self) -> f64 {
        self.interactions as f64 / self.items.max(1) as f64
    }
}

impl fmt::Display for CorpusStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "users={} items={} interactions={} ints_per_item={:.2} avg_seq_len={:.2}",
            self.users,
            self.items,
            self.interactions,
            self.interactions_per_item(),
            self.avg_seq_len()
        )
    }
}

/// Writes the catalog, sequences and stats files into `dir` (created if
/// missing). Output depends only on the arguments, so reruns are
/// byte-identical.
pub fn write_corpus(dir: &Path, sequences: &[InteractionSequence], catalog: &ItemCatalog) -> Result<CorpusStats> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;

    let mut cat = format!("{CORPUS_HEADER}\n");
    for (key, index) in catalog.iter() {
        cat.push_str(&format!("{key}\t{index}\n"));
    }
    let mut seq = format!("{CORPUS_HEADER}\n");
    for s in sequences {
        let items: Vec<String> = s.items.iter().map(usize::to_string).collect();
        seq.push_str(&format!("{}\t{}\n", s.user_index, items.join(" ")));
    }
    let stats = CorpusStats::of(sequences, catalog);

    for (name, body) in [
        (CATALOG_FILE, cat),
        (SEQUENCES_FILE, seq),
        (STATS_FILE, format!("{CORPUS_HEADER}\n{stats}\n")),
    ] {
        let path = dir.join(name);
        fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
    }
    Ok(stats)
}

fn read_body(path: &Path) -> Result<String> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    match text.split_once('\n') {
        Some((first, rest)) if first.trim_end() == CORPUS_HEADER => Ok(rest.to_string()),
        _ => Err(Error::Parse {
            path: path.to_path_buf(),
            line: 1,
            message: format!("missing header {CORPUS_HEADER:?}"),
        }),
    }
}

pub fn read_corpus(dir: &Path) -> Result<(Vec<InteractionSequence>, ItemCatalog)> {
    let cat_path = dir.join(CATALOG_FILE);
    let mut catalog = ItemCatalog::new();
    for (n, line) in read_body(&cat_path)?.lines().enumerate() {
        let err = |message: String| Error::Parse { path: cat_path.clone(), line: n + 2, message };
        let (key, index) = line.rsplit_once('\t').ok_or_else(|| err("expected key<TAB>index".into()))?;
        let index: usize = index.parse().map_err(|_| err(format!("bad index {index:?}")))?;
        if catalog.intern(key) != index {
            return Err(err(format!("index {index} out of order")));
        }
    }

    let seq_path = dir.join(SEQUENCES_FILE);
    let mut sequences = Vec::new();
    for (n, line) in read_body(&seq_path)?.lines().enumerate() {
        let err = |message: String| Error::Parse { path: seq_path.clone(), line: n + 2, message };
        let (user, items) = line.split_once('\t').ok_or_else(|| err("expected user<TAB>items".into()))?;
        let user_index: usize = user.parse().map_err(|_| err(format!("bad user index {user:?}")))?;
        let items = items
            .split_whitespace()
            .map(|t| match t.parse::<usize>() {
                Ok(i) if i != PAD && i <= catalog.item_count() => Ok(i),
                _ => Err(err(format!("bad item index {t:?}"))),
            })
            .collect::<Result<Vec<_>>>()?;
        if items.len() < 3 {
            return Err(err("sequence shorter than 3".into()));
        }
        sequences.push(InteractionSequence::new(user_index, items));
    }
    if sequences.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    Ok((sequences, catalog))
}

/// Hex sha256 of the sequences file, which fixes the corpus content.
pub fn corpus_hash(dir: &Path) -> Result<String> {
    let path = dir.join(SEQUENCES_FILE);
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixture() -> (Vec<InteractionSequence>, ItemCatalog) {
        let mut cat = ItemCatalog::new();
        for k in ["apple", "b b", "c"] {
            cat.intern(k);
        }
        let seqs = vec![InteractionSequence::new(0, vec![1, 2, 3]), InteractionSequence::new(1, vec![3, 3, 1, 2])];
        (seqs, cat)
    }

    #[test]
    fn round_trip_and_idempotence() {
        let dir = tempfile::tempdir().unwrap();
        let (seqs, cat) = fixture();
        let stats = write_corpus(dir.path(), &seqs, &cat).unwrap();
        assert_eq!(stats.to_string(), "users=2 items=3 interactions=7 ints_per_item=2.33 avg_seq_len=3.50");
        let first = fs::read(dir.path().join(SEQUENCES_FILE)).unwrap();
        let hash = corpus_hash(dir.path()).unwrap();
        write_corpus(dir.path(), &seqs, &cat).unwrap();
        assert_eq!(fs::read(dir.path().join(SEQUENCES_FILE)).unwrap(), first);
        assert_eq!(corpus_hash(dir.path()).unwrap(), hash);
        assert_eq!(hash.len(), 64);

        let (back, back_cat) = read_corpus(dir.path()).unwrap();
        assert_eq!(back, seqs);
        assert_eq!(back_cat, cat);
        let text = fs::read_to_string(dir.path().join(CATALOG_FILE)).unwrap();
        assert!(text.starts_with(CORPUS_HEADER));
    }

    #[test]
    fn missing_header_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let (seqs, cat) = fixture();
        write_corpus(dir.path(), &seqs, &cat).unwrap();
        fs::write(dir.path().join(SEQUENCES_FILE), "0\t1 2 3\n").unwrap();
        assert!(matches!(read_corpus(dir.path()), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn out_of_catalog_item_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let (seqs, cat) = fixture();
        write_corpus(dir.path(), &seqs, &cat).unwrap();
        fs::write(dir.path().join(SEQUENCES_FILE), format!("{CORPUS_HEADER}\n0\t1 2 4\n")).unwrap();
        assert!(matches!(read_corpus(dir.path()), Err(Error::Parse { line: 2, .. })));
    }
}
