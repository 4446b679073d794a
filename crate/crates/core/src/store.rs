//! On-disk benchmark store.
//!
//! ```text
//! <root>/kb/<kb_version>.jsonl
//! <root>/slices/000/manifest.json
//! <root>/slices/000/tuples.jsonl
//! <root>/slices/000/kb_version
//! <root>/slices/000/report.json      (lifecycle steps only)
//! <root>/posts.jsonl                 (community stream seen so far)
//! ```
//!
//! Slices are immutable once committed. A commit is staged in a hidden
//! directory and renamed into place.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::community::{sort_posts, CommunityPost};
use crate::error::{Error, Result};
use crate::lifecycle::StepReport;
use crate::model::{BenchmarkSlice, KnowledgeBase, KnowledgeSnippet, Timestamp};
use crate::util::{read_json, read_jsonl, sha256_hex, write_json, write_jsonl};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SliceManifest {
    pub index: u32,
    pub kb_version: String,
    pub phase_start: Timestamp,
    pub phase_end: Option<Timestamp>,
    pub parent_index: Option<u32>,
    pub tuple_count: usize,
    /// sha256 of `tuples.jsonl`.
    pub tuples_sha256: String,
}

#[derive(Debug, Clone)]
pub struct Store {
    root: PathBuf,
}

fn io<P: AsRef<Path>>(p: P) -> impl FnOnce(std::io::Error) -> Error {
    move |e| Error::io(p.as_ref(), e)
}

impl Store {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn slices_dir(&self) -> PathBuf {
        self.root.join("slices")
    }

    pub fn slice_dir(&self, index: u32) -> PathBuf {
        self.slices_dir().join(format!("{index:03}"))
    }

    pub fn kb_path(&self, version: &str) -> PathBuf {
        self.root.join("kb").join(format!("{version}.jsonl"))
    }

    pub fn posts_path(&self) -> PathBuf {
        self.root.join("posts.jsonl")
    }

    /// Committed slice indices, ascending.
    pub fn slice_indices(&self) -> Result<Vec<u32>> {
        let dir = self.slices_dir();
        if !dir.exists() {
            return Ok(Vec::new());
        }
        let mut out = Vec::new();
        for entry in fs::read_dir(&dir).map_err(io(&dir))? {
            let entry = entry.map_err(io(&dir))?;
            let name = entry.file_name();
            let Some(name) = name.to_str() else { continue };
            if let Ok(i) = name.parse::<u32>() {
                if entry.path().join("manifest.json").exists() {
                    out.push(i);
                }
            }
        }
        out.sort_unstable();
        Ok(out)
    }

    pub fn latest_index(&self) -> Result<Option<u32>> {
        Ok(self.slice_indices()?.last().copied())
    }

    pub fn has_slice(&self, index: u32) -> bool {
        self.slice_dir(index).join("manifest.json").exists()
    }

    pub fn save_kb(&self, kb: &KnowledgeBase) -> Result<()> {
        let path = self.kb_path(kb.version());
        if path.exists() {
            return Ok(());
        }
        let tmp = path.with_extension("jsonl.tmp");
        write_jsonl(&tmp, kb.snippets())?;
        fs::rename(&tmp, &path).map_err(io(&path))
    }

    /// Load a KB file and check that its content hashes to `version`.
    pub fn load_kb(&self, version: &str) -> Result<KnowledgeBase> {
        let snippets: Vec<KnowledgeSnippet> = read_jsonl(&self.kb_path(version))?;
        let kb = KnowledgeBase::new(snippets)?;
        if kb.version() != version {
            return Err(Error::Validation(format!(
                "kb file {version} hashes to {}",
                kb.version()
            )));
        }
        Ok(kb)
    }

    /// Commit `slice` and its KB. `provenance` is an opaque digest of the
    /// inputs that produced the slice. An existing slice at the same index is
    /// only replaced with `force`.
    pub fn commit(
        &self,
        slice: &BenchmarkSlice,
        kb: &KnowledgeBase,
        report: Option<&StepReport>,
        provenance: Option<&str>,
        force: bool,
    ) -> Result<PathBuf> {
        if slice.kb_version != kb.version() {
            return Err(Error::Contract(format!(
                "slice references {} but kb is {}",
                slice.kb_version,
                kb.version()
            )));
        }
        let dest = self.slice_dir(slice.index);
        if dest.exists() && !force {
            return Err(Error::Validation(format!(
                "{} already exists",
                dest.display()
            )));
        }
        self.save_kb(kb)?;
        let staging = self
            .slices_dir()
            .join(format!(".staging-{:03}", slice.index));
        if staging.exists() {
            fs::remove_dir_all(&staging).map_err(io(&staging))?;
        }
        let tuples_path = staging.join("tuples.jsonl");
        write_jsonl(&tuples_path, &slice.tuples)?;
        let bytes = fs::read(&tuples_path).map_err(io(&tuples_path))?;
        let manifest = SliceManifest {
            index: slice.index,
            kb_version: slice.kb_version.clone(),
            phase_start: slice.phase_start,
            phase_end: slice.phase_end,
            parent_index: slice.parent_index,
            tuple_count: slice.tuples.len(),
            tuples_sha256: sha256_hex(&[&String::from_utf8_lossy(&bytes)]),
        };
        write_json(&staging.join("manifest.json"), &manifest)?;
        let kv = staging.join("kb_version");
        fs::write(&kv, format!("{}\n", slice.kb_version)).map_err(io(&kv))?;
        if let Some(r) = report {
            write_json(&staging.join("report.json"), r)?;
        }
        if let Some(p) = provenance {
            let pp = staging.join("provenance");
            fs::write(&pp, format!("{p}\n")).map_err(io(&pp))?;
        }
        if dest.exists() {
            fs::remove_dir_all(&dest).map_err(io(&dest))?;
        }
        fs::rename(&staging, &dest).map_err(io(&dest))?;
        Ok(dest)
    }

    pub fn load_manifest(&self, index: u32) -> Result<SliceManifest> {
        read_json(&self.slice_dir(index).join("manifest.json"))
    }

    pub fn load_slice(&self, index: u32) -> Result<(BenchmarkSlice, KnowledgeBase)> {
        load_slice_dir(&self.slice_dir(index), Some(&self.root.join("kb")))
    }

    pub fn load_latest(&self) -> Result<(BenchmarkSlice, KnowledgeBase)> {
        let i = self.latest_index()?.ok_or_else(|| {
            Error::Validation(format!("store {} has no slices", self.root.display()))
        })?;
        self.load_slice(i)
    }

    pub fn load_report(&self, index: u32) -> Result<Option<StepReport>> {
        let p = self.slice_dir(index).join("report.json");
        if !p.exists() {
            return Ok(None);
        }
        read_json(&p).map(Some)
    }

    pub fn provenance(&self, index: u32) -> Result<Option<String>> {
        let p = self.slice_dir(index).join("provenance");
        if !p.exists() {
            return Ok(None);
        }
        let text = fs::read_to_string(&p).map_err(io(&p))?;
        Ok(Some(text.trim().to_string()))
    }

    pub fn load_posts(&self) -> Result<Vec<CommunityPost>> {
        let p = self.posts_path();
        if !p.exists() {
            return Ok(Vec::new());
        }
        read_jsonl(&p)
    }

    /// Merge `posts` into the stored stream, keeping the first copy of each id.
    pub fn append_posts(&self, posts: &[CommunityPost]) -> Result<Vec<CommunityPost>> {
        let mut all = self.load_posts()?;
        let mut seen: std::collections::HashSet<String> =
            all.iter().map(|p| p.post_id.clone()).collect();
        for p in posts {
            if seen.insert(p.post_id.clone()) {
                all.push(p.clone());
            }
        }
        sort_posts(&mut all);
        write_jsonl(&self.posts_path(), &all)?;
        Ok(all)
    }
}

/// Load a slice directory. The KB is looked up in `kb_dir`, defaulting to the
/// `kb/` directory two levels up.
pub fn load_slice_dir(
    dir: &Path,
    kb_dir: Option<&Path>,
) -> Result<(BenchmarkSlice, KnowledgeBase)> {
    let manifest: SliceManifest = read_json(&dir.join("manifest.json"))?;
    let tuples_path = dir.join("tuples.jsonl");
    let bytes = fs::read(&tuples_path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::MissingFile(tuples_path.clone())
        } else {
            Error::io(&tuples_path, e)
        }
    })?;
    if sha256_hex(&[&String::from_utf8_lossy(&bytes)]) != manifest.tuples_sha256 {
        return Err(Error::Validation(format!(
            "{} does not match its manifest",
            tuples_path.display()
        )));
    }
    let tuples = read_jsonl(&tuples_path)?;
    let kb_dir = match kb_dir {
        Some(d) => d.to_path_buf(),
        None => dir
            .parent()
            .and_then(Path::parent)
            .map(|r| r.join("kb"))
            .ok_or_else(|| {
                Error::Config(format!("cannot locate kb directory for {}", dir.display()))
            })?,
    };
    let kb = Store::new(kb_dir.parent().unwrap_or(Path::new("."))).load_kb(&manifest.kb_version)?;
    let slice = BenchmarkSlice {
        index: manifest.index,
        kb_version: manifest.kb_version,
        tuples,
        phase_start: manifest.phase_start,
        phase_end: manifest.phase_end,
        parent_index: manifest.parent_index,
    };
    Ok((slice, kb))
}
