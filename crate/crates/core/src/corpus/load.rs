use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use super::RawInteraction;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InputFormat {
    Tsv,
    Csv,
}

impl InputFormat {
    pub fn delimiter(self) -> char {
        match self {
            InputFormat::Tsv => '\t',
            InputFormat::Csv => ',',
        }
    }

    /// `.csv` → CSV, anything else → TSV.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(ext) if ext.eq_ignore_ascii_case("csv") => InputFormat::Csv,
            _ => InputFormat::Tsv,
        }
    }
}

/// Reads `user, item, timestamp` rows in file order. A four-field row is read
/// as `user, item, rating, timestamp` (the layout of the public review-rating
/// dumps); the rating is ignored. Blank lines are skipped.
pub fn load_interactions(path: &Path, format: InputFormat) -> Result<Vec<RawInteraction>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = BufReader::new(file);
    let delim = format.delimiter();
    let mut out = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(delim).map(str::trim).collect();
        let parse_err = |message: String| Error::Parse { path: path.to_path_buf(), line: lineno + 1, message };
        let (user, item, ts) = match fields.as_slice() {
            [u, i, t] => (*u, *i, *t),
            [u, i, _rating, t] => (*u, *i, *t),
            _ => return Err(parse_err(format!("expected 3 or 4 fields, found {}", fields.len()))),
        };
        if user.is_empty() || item.is_empty() {
            return Err(parse_err("empty user or item key".into()));
        }
        let timestamp = ts
            .parse::<i64>()
            .or_else(|_| ts.parse::<f64>().map(|v| v as i64).map_err(|_| ()))
            .map_err(|_| parse_err(format!("bad timestamp {ts:?}")))?;
        out.push(RawInteraction::new(user, item, timestamp));
    }
    log::info!("loaded {} interactions from {}", out.len(), path.display());
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write(contents: &str, suffix: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::Builder::new().suffix(suffix).tempfile().unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        f
    }

    #[test]
    fn empty_file_is_empty_list() {
        let f = write("", ".tsv");
        assert!(load_interactions(f.path(), InputFormat::Tsv).unwrap().is_empty());
    }

    #[test]
    fn rows_come_back_in_file_order() {
        let f = write("u1,a,1\nu1,b,2\nu2,a,5\n", ".csv");
        let fmt = InputFormat::from_path(f.path());
        assert_eq!(fmt, InputFormat::Csv);
        let rows = load_interactions(f.path(), fmt).unwrap();
        assert_eq!(
            rows,
            vec![
                RawInteraction::new("u1", "a", 1),
                RawInteraction::new("u1", "b", 2),
                RawInteraction::new("u2", "a", 5),
            ]
        );
    }

    #[test]
    fn four_field_rows_skip_rating() {
        let f = write("u1\ta\t5.0\t100\n", ".tsv");
        let rows = load_interactions(f.path(), InputFormat::Tsv).unwrap();
        assert_eq!(rows, vec![RawInteraction::new("u1", "a", 100)]);
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let f = write("u1\ta\t1\nu2\tb\n", ".tsv");
        match load_interactions(f.path(), InputFormat::Tsv) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
        let f = write("u1\ta\tnoon\n", ".tsv");
        assert!(matches!(load_interactions(f.path(), InputFormat::Tsv), Err(Error::Parse { line: 1, .. })));
    }
}
