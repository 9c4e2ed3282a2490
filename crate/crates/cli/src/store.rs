//! Content hashes, stage records and failure markers.

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Written last into every completed stage directory.
pub const STAGE_RECORD: &str = "stage.json";
/// Present in a stage directory whose last execution failed.
pub const FAILED_MARKER: &str = "FAILED";

/// Relative path (with `/` separators) → hex SHA-256.
pub type ArtifactHashes = BTreeMap<String, String>;

pub fn sha256_bytes(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn sha256_file(path: &Path) -> io::Result<String> {
    Ok(sha256_bytes(&fs::read(path)?))
}

/// Hashes every regular file below `dir` except the stage record and the
/// failure marker.
pub fn hash_tree(dir: &Path) -> io::Result<ArtifactHashes> {
    let mut out = ArtifactHashes::new();
    walk(dir, dir, &mut out)?;
    Ok(out)
}

fn walk(root: &Path, dir: &Path, out: &mut ArtifactHashes) -> io::Result<()> {
    let mut entries: Vec<_> = fs::read_dir(dir)?.collect::<io::Result<_>>()?;
    entries.sort_by_key(|e| e.file_name());
    for e in entries {
        let path = e.path();
        if e.file_type()?.is_dir() {
            walk(root, &path, out)?;
            continue;
        }
        let rel = path.strip_prefix(root).expect("walk stays below root");
        let key = rel.components().map(|c| c.as_os_str().to_string_lossy()).collect::<Vec<_>>().join("/");
        if key == STAGE_RECORD || key == FAILED_MARKER {
            continue;
        }
        out.insert(key, sha256_file(&path)?);
    }
    Ok(())
}

/// Hash over the stage name and every input that determines its outputs.
pub fn fingerprint(stage: &str, parts: &[&str]) -> String {
    let mut h = Sha256::new();
    h.update(stage.as_bytes());
    for p in parts {
        h.update([0u8]);
        h.update((p.len() as u64).to_le_bytes());
        h.update(p.as_bytes());
    }
    hex::encode(h.finalize())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: String,
    pub fingerprint: String,
    pub artifacts: ArtifactHashes,
}

impl StageRecord {
    pub fn load(dir: &Path) -> Option<Self> {
        let text = fs::read_to_string(dir.join(STAGE_RECORD)).ok()?;
        serde_json::from_str(&text).ok()
    }

    pub fn save(&self, dir: &Path) -> io::Result<()> {
        fs::write(dir.join(STAGE_RECORD), serde_json::to_string_pretty(self)? + "\n")
    }

    /// Digest of the record, used as an input of downstream fingerprints.
    pub fn digest(&self) -> String {
        sha256_bytes(serde_json::to_string(self).expect("record serializes").as_bytes())
    }
}

/// The record of `dir` if it matches `fingerprint` and the files on disk
/// still hash to the recorded values.
pub fn fresh_record(dir: &Path, fingerprint: &str) -> Option<StageRecord> {
    if dir.join(FAILED_MARKER).exists() {
        return None;
    }
    let record = StageRecord::load(dir)?;
    if record.fingerprint != fingerprint {
        return None;
    }
    (hash_tree(dir).ok()? == record.artifacts).then_some(record)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> io::Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> io::Result<T> {
    let text = fs::read_to_string(path)
        .map_err(|e| io::Error::new(e.kind(), format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| io::Error::new(io::ErrorKind::InvalidData, format!("{}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn known_digest() {
        assert_eq!(sha256_bytes(b"abc"), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
    }

    #[test]
    fn tree_hash_skips_bookkeeping() {
        let dir = tempfile::tempdir().unwrap();
        fs::create_dir(dir.path().join("sub")).unwrap();
        fs::write(dir.path().join("sub/a.txt"), "abc").unwrap();
        fs::write(dir.path().join("b.txt"), "").unwrap();
        fs::write(dir.path().join(STAGE_RECORD), "{}").unwrap();
        let t = hash_tree(dir.path()).unwrap();
        assert_eq!(t.keys().collect::<Vec<_>>(), ["b.txt", "sub/a.txt"]);
        assert_eq!(t["sub/a.txt"], sha256_bytes(b"abc"));
    }

    #[test]
    fn fingerprint_separates_parts() {
        assert_ne!(fingerprint("s", &["ab", "c"]), fingerprint("s", &["a", "bc"]));
        assert_ne!(fingerprint("s", &["a"]), fingerprint("t", &["a"]));
        assert_eq!(fingerprint("s", &["a", "b"]), fingerprint("s", &["a", "b"]));
    }

    #[test]
    fn freshness_detects_changes() {
        let dir = tempfile::tempdir().unwrap();
        let d = dir.path();
        fs::write(d.join("x"), "1").unwrap();
        let rec = StageRecord { stage: "s".into(), fingerprint: "f".into(), artifacts: hash_tree(d).unwrap() };
        rec.save(d).unwrap();
        assert!(fresh_record(d, "f").is_some());
        assert!(fresh_record(d, "g").is_none());
        fs::write(d.join("x"), "2").unwrap();
        assert!(fresh_record(d, "f").is_none());
        fs::write(d.join("x"), "1").unwrap();
        fs::write(d.join(FAILED_MARKER), "boom").unwrap();
        assert!(fresh_record(d, "f").is_none());
    }
}
