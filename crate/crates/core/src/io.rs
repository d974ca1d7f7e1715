//! File helpers shared by every writer: atomic replacement and the
//! provenance comment line carried at the top of each output file.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Identifies the configuration and root seed that produced a file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Provenance {
    pub config_hash: String,
    pub seed: u64,
}

impl Provenance {
    pub fn new(config_hash: impl Into<String>, seed: u64) -> Self {
        Self {
            config_hash: config_hash.into(),
            seed,
        }
    }

    /// `# config_hash=<hex> seed=<n>`, without trailing newline.
    pub fn comment_line(&self) -> String {
        format!("# {self}")
    }
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "config_hash={} seed={}", self.config_hash, self.seed)
    }
}

/// First 16 hex digits of the SHA-256 of `bytes`.
pub fn short_hash(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
}

/// Writes `bytes` to a sibling temp file, then renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let wrap = |source| Error::IoWrite {
        path: path.to_path_buf(),
        source,
    };
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(wrap)?;
        }
    }
    let file_name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let tmp = path.with_file_name(format!(".{file_name}.tmp"));
    {
        let mut f = fs::File::create(&tmp).map_err(wrap)?;
        f.write_all(bytes).map_err(wrap)?;
        f.sync_all().map_err(wrap)?;
    }
    fs::rename(&tmp, path).map_err(wrap)
}

pub fn read_to_string(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|source| Error::IoRead {
        path: path.to_path_buf(),
        source,
    })
}

/// Reads the provenance line if the file starts with one.
pub fn read_provenance(text: &str) -> Option<Provenance> {
    let line = text.lines().next()?.strip_prefix("# ")?;
    let mut hash = None;
    let mut seed = None;
    for part in line.split_whitespace() {
        if let Some(v) = part.strip_prefix("config_hash=") {
            hash = Some(v.to_string());
        } else if let Some(v) = part.strip_prefix("seed=") {
            seed = v.parse().ok();
        }
    }
    Some(Provenance::new(hash?, seed?))
}

/// CSV reader that skips `#` comment lines.
pub fn csv_reader(text: &str) -> csv::Reader<&[u8]> {
    csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_reader(text.as_bytes())
}

/// Starts a CSV buffer, optionally led by a provenance comment.
pub fn csv_writer(provenance: Option<&Provenance>) -> csv::Writer<Vec<u8>> {
    let mut buf = Vec::new();
    if let Some(p) = provenance {
        buf.extend_from_slice(p.comment_line().as_bytes());
        buf.push(b'\n');
    }
    csv::Writer::from_writer(buf)
}

pub fn finish_csv(w: csv::Writer<Vec<u8>>) -> Result<Vec<u8>> {
    w.into_inner()
        .map_err(|e| Error::InvalidConfig(format!("csv flush: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn provenance_round_trip() {
        let p = Provenance::new("00ff", 42);
        let text = format!("{}\na,b\n", p.comment_line());
        assert_eq!(read_provenance(&text), Some(p));
        assert_eq!(read_provenance("a,b\n"), None);
    }

    #[test]
    fn atomic_write_replaces() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sub/out.txt");
        write_atomic(&path, b"one").unwrap();
        write_atomic(&path, b"two").unwrap();
        assert_eq!(fs::read_to_string(&path).unwrap(), "two");
        assert_eq!(fs::read_dir(path.parent().unwrap()).unwrap().count(), 1);
    }
}
