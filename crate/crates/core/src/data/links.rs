use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// A set of unordered gene pairs, stored as `(min, max)` in lexicographic order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LinkDatabase {
    name: String,
    links: BTreeSet<(String, String)>,
}

/// Result of parsing an edge list, with counts of what canonicalization dropped.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LinkDbLoad {
    pub db: LinkDatabase,
    pub duplicates_dropped: usize,
    pub self_links_dropped: usize,
}

impl LinkDatabase {
    /// Builds a database from arbitrary pairs; self-pairs and duplicates are
    /// silently dropped. Use [`parse_link_db`] when the counts matter.
    pub fn from_pairs<A, B>(name: impl Into<String>, pairs: impl IntoIterator<Item = (A, B)>) -> Self
    where
        A: Into<String>,
        B: Into<String>,
    {
        let mut db = LinkDatabase {
            name: name.into(),
            links: BTreeSet::new(),
        };
        for (a, b) in pairs {
            db.insert(a.into(), b.into());
        }
        db
    }

    fn insert(&mut self, a: String, b: String) -> Insert {
        if a == b {
            return Insert::SelfLink;
        }
        let key = if a < b { (a, b) } else { (b, a) };
        if self.links.insert(key) {
            Insert::New
        } else {
            Insert::Duplicate
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn len(&self) -> usize {
        self.links.len()
    }

    pub fn is_empty(&self) -> bool {
        self.links.is_empty()
    }

    pub fn contains(&self, a: &str, b: &str) -> bool {
        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
        self.links.contains(&(lo.to_string(), hi.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.links.iter().map(|(a, b)| (a.as_str(), b.as_str()))
    }
}

enum Insert {
    New,
    Duplicate,
    SelfLink,
}

pub fn load_link_db(path: impl AsRef<Path>) -> Result<LinkDbLoad> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "links".into());
    parse_link_db(&name, &text, path)
}

/// Parses a two-column TSV edge list. Blank lines and `#` comments are skipped.
pub fn parse_link_db(name: &str, text: &str, origin: &Path) -> Result<LinkDbLoad> {
    let mut db = LinkDatabase {
        name: name.to_string(),
        links: BTreeSet::new(),
    };
    let mut rows = 0usize;
    let mut duplicates_dropped = 0;
    let mut self_links_dropped = 0;
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim_end_matches('\r');
        if line.trim().is_empty() || line.trim_start().starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').map(str::trim).collect();
        if fields.len() != 2 || fields.iter().any(|f| f.is_empty()) {
            return Err(Error::MalformedRow {
                path: origin.to_path_buf(),
                line: i + 1,
                content: line.to_string(),
            });
        }
        rows += 1;
        match db.insert(fields[0].to_string(), fields[1].to_string()) {
            Insert::New => {}
            Insert::Duplicate => duplicates_dropped += 1,
            Insert::SelfLink => self_links_dropped += 1,
        }
    }
    if rows == 0 {
        return Err(Error::EmptyDatabase(origin.display().to_string()));
    }
    Ok(LinkDbLoad {
        db,
        duplicates_dropped,
        self_links_dropped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn canonicalizes_and_counts_drops() {
        let load = parse_link_db("t", "A\tB\nB\tA\nC\tC\n", Path::new("t.tsv")).unwrap();
        assert_eq!(load.db.len(), 1);
        assert!(load.db.contains("B", "A"));
        assert_eq!(load.duplicates_dropped, 1);
        assert_eq!(load.self_links_dropped, 1);
    }

    #[test]
    fn empty_file_is_error() {
        let err = parse_link_db("t", "# only a comment\n\n", Path::new("t.tsv")).unwrap_err();
        assert!(matches!(err, Error::EmptyDatabase(_)));
        assert!(err.to_string().contains("empty database"));
    }

    #[test]
    fn malformed_row_reports_line() {
        let err = parse_link_db("t", "A\tB\nA\tB\tC\n", Path::new("t.tsv")).unwrap_err();
        assert!(matches!(err, Error::MalformedRow { line: 2, .. }));
    }
}
