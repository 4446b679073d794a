//! Turning pre-extracted corpus documents (wiki exports, official update
//! posts) into timestamped knowledge snippets.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use rayon::prelude::*;
use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{KnowledgeSnippet, SourceKind, Timestamp};
use crate::util::read_jsonl;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawDocument {
    pub doc_id: String,
    #[serde(default)]
    pub title: String,
    pub body: String,
    #[serde(default)]
    pub published_at: Option<Timestamp>,
    pub source_kind: SourceKind,
    pub game_id: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChunkPolicy {
    pub max_chars: usize,
    pub overlap_chars: usize,
}

impl Default for ChunkPolicy {
    fn default() -> Self {
        Self {
            max_chars: 1200,
            overlap_chars: 120,
        }
    }
}

impl ChunkPolicy {
    pub fn new(max_chars: usize, overlap_chars: usize) -> Result<Self> {
        let p = Self {
            max_chars,
            overlap_chars,
        };
        p.check()?;
        Ok(p)
    }

    pub fn check(&self) -> Result<()> {
        if self.max_chars == 0 || self.max_chars <= self.overlap_chars {
            return Err(Error::Config(format!(
                "chunk policy needs max_chars > overlap_chars (got {} / {})",
                self.max_chars, self.overlap_chars
            )));
        }
        Ok(())
    }
}

/// Character ranges `[start, end)` covering `len` chars.
pub fn chunk_ranges(len: usize, policy: &ChunkPolicy) -> Result<Vec<(usize, usize)>> {
    policy.check()?;
    let step = policy.max_chars - policy.overlap_chars;
    let mut out = Vec::new();
    let mut start = 0;
    loop {
        let end = (start + policy.max_chars).min(len);
        out.push((start, end));
        if end >= len {
            break;
        }
        start += step;
    }
    Ok(out)
}

/// Split a document body into overlapping snippets `doc_id#i`. Entities are
/// left empty for the entity pass.
pub fn chunk_document(doc: &RawDocument, policy: &ChunkPolicy) -> Result<Vec<KnowledgeSnippet>> {
    policy.check()?;
    if doc.body.is_empty() {
        return Err(Error::Config(format!(
            "document {} has an empty body",
            doc.doc_id
        )));
    }
    let chars: Vec<char> = doc.body.chars().collect();
    let timestamp = extract_timestamp(doc);
    Ok(chunk_ranges(chars.len(), policy)?
        .into_iter()
        .enumerate()
        .map(|(i, (s, e))| KnowledgeSnippet {
            id: format!("{}#{i}", doc.doc_id),
            content: chars[s..e].iter().collect(),
            timestamp,
            entities: BTreeSet::new(),
            source_kind: doc.source_kind,
            game_id: doc.game_id.clone(),
        })
        .collect())
}

fn date_re() -> Regex {
    Regex::new(r"\b(\d{4})-(\d{2})-(\d{2})\b").expect("static regex")
}

/// Latest valid `YYYY-MM-DD` date in `text`, as UTC midnight.
pub fn latest_date(text: &str) -> Option<Timestamp> {
    date_re()
        .captures_iter(text)
        .filter_map(|c| {
            let d = NaiveDate::from_ymd_opt(
                c[1].parse().ok()?,
                c[2].parse().ok()?,
                c[3].parse().ok()?,
            )?;
            Some(d.and_hms_opt(0, 0, 0)?.and_utc().timestamp())
        })
        .max()
}

pub fn extract_timestamp(doc: &RawDocument) -> Option<Timestamp> {
    doc.published_at.or_else(|| latest_date(&doc.body))
}

/// Chunk every document in order; official updates must resolve a timestamp.
pub fn ingest_documents(
    docs: &[RawDocument],
    policy: &ChunkPolicy,
) -> Result<Vec<KnowledgeSnippet>> {
    policy.check()?;
    for d in docs {
        if d.source_kind == SourceKind::OfficialUpdate && extract_timestamp(d).is_none() {
            return Err(Error::Validation(format!(
                "official update {} has no resolvable timestamp",
                d.doc_id
            )));
        }
    }
    let chunked: Vec<Vec<KnowledgeSnippet>> = docs
        .par_iter()
        .map(|d| chunk_document(d, policy))
        .collect::<Result<_>>()?;
    Ok(chunked.into_iter().flatten().collect())
}

/// Read JSON-lines `RawDocument` files in the given order and chunk them.
pub fn ingest(paths: &[PathBuf], policy: &ChunkPolicy) -> Result<Vec<KnowledgeSnippet>> {
    let mut docs = Vec::new();
    for p in paths {
        docs.extend(read_jsonl::<RawDocument>(p)?);
    }
    ingest_documents(&docs, policy)
}

/// `*.jsonl` files of a directory, sorted by name.
pub fn list_jsonl(dir: &Path) -> Result<Vec<PathBuf>> {
    if dir.is_file() {
        return Ok(vec![dir.to_path_buf()]);
    }
    let rd = std::fs::read_dir(dir).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::MissingFile(dir.to_path_buf())
        } else {
            Error::io(dir, e)
        }
    })?;
    let mut out = Vec::new();
    for entry in rd {
        let p = entry.map_err(|e| Error::io(dir, e))?.path();
        if p.extension().is_some_and(|x| x == "jsonl") {
            out.push(p);
        }
    }
    out.sort();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn doc(id: &str, body: &str, kind: SourceKind, at: Option<i64>) -> RawDocument {
        RawDocument {
            doc_id: id.into(),
            title: String::new(),
            body: body.into(),
            published_at: at,
            source_kind: kind,
            game_id: "g".into(),
        }
    }

    /// Drop the overlap of each chunk after the first and concatenate.
    fn reassemble(chunks: &[KnowledgeSnippet], overlap: usize) -> String {
        let mut out = String::new();
        for (i, c) in chunks.iter().enumerate() {
            let skip = if i == 0 { 0 } else { overlap };
            out.extend(c.content.chars().skip(skip));
        }
        out
    }

    #[test]
    fn single_chunk_when_body_fits() {
        let d = doc("a", "0123456789", SourceKind::Wiki, None);
        let s = chunk_document(&d, &ChunkPolicy::new(10, 0).unwrap()).unwrap();
        assert_eq!(s.len(), 1);
        assert_eq!(s[0].content, d.body);
        assert_eq!(s[0].id, "a#0");
        assert!(s[0].entities.is_empty());
    }

    #[test]
    fn overlapping_chunks() {
        let d = doc("a", "0123456789", SourceKind::Wiki, Some(5));
        let s = chunk_document(
            &d,
            &ChunkPolicy {
                max_chars: 6,
                overlap_chars: 2,
            },
        )
        .unwrap();
        // start += 6 - 2: [0,6) then [4,10)
        let texts: Vec<&str> = s.iter().map(|x| x.content.as_str()).collect();
        assert_eq!(texts, vec!["012345", "456789"]);
        assert!(s
            .iter()
            .all(|x| x.timestamp == Some(5) && x.source_kind == SourceKind::Wiki));
    }

    #[test]
    fn policy_and_body_errors() {
        let d = doc("a", "", SourceKind::Wiki, None);
        assert!(matches!(
            chunk_document(&d, &ChunkPolicy::default()),
            Err(Error::Config(_))
        ));
        assert!(matches!(ChunkPolicy::new(5, 5), Err(Error::Config(_))));
        assert!(matches!(ChunkPolicy::new(0, 0), Err(Error::Config(_))));
    }

    #[test]
    fn timestamp_extraction() {
        let d = doc("a", "x", SourceKind::Wiki, Some(1_700_000_000));
        assert_eq!(extract_timestamp(&d), Some(1_700_000_000));
        let d = doc(
            "a",
            "patch 2024-01-05 then 2024-03-01, bogus 2024-13-40",
            SourceKind::Wiki,
            None,
        );
        let expected = NaiveDate::from_ymd_opt(2024, 3, 1)
            .unwrap()
            .and_hms_opt(0, 0, 0)
            .unwrap()
            .and_utc()
            .timestamp();
        assert_eq!(extract_timestamp(&d), Some(expected));
        assert_eq!(expected, 1_709_251_200);
        assert_eq!(
            extract_timestamp(&doc("a", "no dates", SourceKind::Wiki, None)),
            None
        );
    }

    #[test]
    fn ingest_ids_and_update_validation() {
        let docs = vec![
            doc("docA", "alpha", SourceKind::Wiki, None),
            doc("docB", "beta", SourceKind::OfficialUpdate, Some(9)),
        ];
        let s = ingest_documents(&docs, &ChunkPolicy::default()).unwrap();
        assert_eq!(
            s.iter().map(|x| x.id.as_str()).collect::<Vec<_>>(),
            vec!["docA#0", "docB#0"]
        );
        assert_eq!(s, ingest_documents(&docs, &ChunkPolicy::default()).unwrap());

        let bad = vec![doc(
            "upd1",
            "no date here",
            SourceKind::OfficialUpdate,
            None,
        )];
        match ingest_documents(&bad, &ChunkPolicy::default()) {
            Err(Error::Validation(m)) => assert!(m.contains("upd1")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("docs.jsonl");
        let good = serde_json::to_string(&doc("a", "x", SourceKind::Wiki, None)).unwrap();
        std::fs::write(&p, format!("{good}\n{{not json\n")).unwrap();
        match ingest(&[p], &ChunkPolicy::default()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
    }

    proptest! {
        #[test]
        fn chunks_reassemble_to_body(body in "[a-zé ]{1,200}", max in 1usize..40, ov in 0usize..40) {
            prop_assume!(max > ov);
            let d = doc("p", &body, SourceKind::Wiki, None);
            let policy = ChunkPolicy { max_chars: max, overlap_chars: ov };
            let s = chunk_document(&d, &policy).unwrap();
            prop_assert_eq!(reassemble(&s, ov), body.clone());
            for w in s.windows(2) {
                let a: Vec<char> = w[0].content.chars().collect();
                let b: Vec<char> = w[1].content.chars().collect();
                prop_assert_eq!(&a[a.len() - ov..], &b[..ov]);
            }
        }
    }
}
