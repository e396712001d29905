//! Corpus manifest: the text index tying utterance ids to identities and
//! to the audio/visual frame array files on disk.
//!
//! One line per utterance, `utt_id identity_id path_a path_v`, whitespace
//! separated. Relative paths resolve against the manifest's directory, so
//! a corpus folder can be moved wholesale.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub utt_id: String,
    pub identity: String,
    pub audio_path: PathBuf,
    pub visual_path: PathBuf,
}

#[derive(Debug, Clone, Default)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, base, &path.display().to_string())
    }

    pub fn parse(text: &str, base: &Path, source: &str) -> Result<Self> {
        let mut entries = Vec::new();
        let mut seen = HashMap::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.len() != 4 {
                return Err(Error::parse(
                    source.to_string(),
                    format!(
                        "line {}: expected 'utt_id identity_id path_a path_v', got {} fields",
                        lineno + 1,
                        fields.len()
                    ),
                ));
            }
            let utt_id = fields[0].to_string();
            if let Some(prev) = seen.insert(utt_id.clone(), lineno + 1) {
                return Err(Error::parse(
                    source.to_string(),
                    format!(
                        "line {}: duplicate utt_id '{}' (first at line {prev})",
                        lineno + 1,
                        utt_id
                    ),
                ));
            }
            let resolve = |p: &str| {
                let pb = PathBuf::from(p);
                if pb.is_absolute() {
                    pb
                } else {
                    base.join(pb)
                }
            };
            entries.push(ManifestEntry {
                utt_id,
                identity: fields[1].to_string(),
                audio_path: resolve(fields[2]),
                visual_path: resolve(fields[3]),
            });
        }
        if entries.is_empty() {
            return Err(Error::contract(format!("manifest {source} is empty")));
        }
        Ok(Manifest { entries })
    }

    /// Identity labels in first-appearance order.
    pub fn identities(&self) -> Vec<String> {
        let mut out = Vec::new();
        for e in &self.entries {
            if !out.contains(&e.identity) {
                out.push(e.identity.clone());
            }
        }
        out
    }

    /// Class index per entry, over [`Self::identities`] order.
    pub fn class_indices(&self) -> Vec<usize> {
        let ids = self.identities();
        let lookup: HashMap<&str, usize> = ids
            .iter()
            .enumerate()
            .map(|(i, s)| (s.as_str(), i))
            .collect();
        self.entries
            .iter()
            .map(|e| lookup[e.identity.as_str()])
            .collect()
    }

    pub fn entry(&self, utt_id: &str) -> Option<&ManifestEntry> {
        self.entries.iter().find(|e| e.utt_id == utt_id)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_and_resolves_relative_paths() {
        let text = "id0/u0 id0 arrays/a0.avjp arrays/v0.avjp\nid1/u0 id1 /abs/a.avjp /abs/v.avjp\n";
        let m = Manifest::parse(text, Path::new("/corpus"), "test").unwrap();
        assert_eq!(m.entries.len(), 2);
        assert_eq!(m.entries[0].audio_path, Path::new("/corpus/arrays/a0.avjp"));
        assert_eq!(m.entries[1].audio_path, Path::new("/abs/a.avjp"));
        assert_eq!(m.identities(), vec!["id0".to_string(), "id1".to_string()]);
        assert_eq!(m.class_indices(), vec![0, 1]);
    }

    #[test]
    fn rejects_duplicate_ids_and_short_lines() {
        let dup = "u0 id0 a v\nu0 id1 a v\n";
        assert!(Manifest::parse(dup, Path::new("."), "test").is_err());
        let short = "u0 id0 a\n";
        assert!(Manifest::parse(short, Path::new("."), "test").is_err());
    }

    #[test]
    fn rejects_empty_manifest() {
        assert!(Manifest::parse("\n  \n", Path::new("."), "test").is_err());
    }
}
