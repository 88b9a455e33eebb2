//! JSON-Lines dataset files, fingerprints and gallery/probe splits.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::pose::GaitSequence;
use crate::{Error, Result};

/// Parses one sequence per non-blank line. Errors carry the 1-based line number.
pub fn parse_jsonl(reader: impl BufRead) -> Result<Vec<GaitSequence>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let seq: GaitSequence = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(seq);
    }
    Ok(out)
}

pub fn read_jsonl(path: impl AsRef<Path>) -> Result<Vec<GaitSequence>> {
    parse_jsonl(BufReader::new(File::open(path)?))
}

pub fn to_jsonl(seqs: &[GaitSequence]) -> Result<String> {
    let mut s = String::new();
    for q in seqs {
        s.push_str(&serde_json::to_string(q)?);
        s.push('\n');
    }
    Ok(s)
}

/// Writes through a temporary sibling and renames into place.
pub fn write_atomic(path: impl AsRef<Path>, bytes: &[u8]) -> Result<()> {
    let path = path.as_ref();
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    let tmp = path.with_extension(format!(
        "{}.tmp",
        path.extension().and_then(|e| e.to_str()).unwrap_or("")
    ));
    {
        let mut w = BufWriter::new(File::create(&tmp)?);
        w.write_all(bytes)?;
        w.flush()?;
    }
    std::fs::rename(tmp, path)?;
    Ok(())
}

pub fn write_jsonl(path: impl AsRef<Path>, seqs: &[GaitSequence]) -> Result<()> {
    write_atomic(path, to_jsonl(seqs)?.as_bytes())
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// SHA-256 of the canonical JSONL serialization.
pub fn fingerprint(seqs: &[GaitSequence]) -> String {
    sha256_hex(to_jsonl(seqs).expect("sequences serialize").as_bytes())
}

/// Sequence-id lists for a closed-set identification protocol.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<String>,
    pub gallery: Vec<String>,
    pub probe: Vec<String>,
}

impl Split {
    /// Per subject, in sequence-id order: the first `n_train` sequences
    /// train, the next `n_gallery` form the gallery, the rest are probes.
    pub fn by_sequence(seqs: &[GaitSequence], n_train: usize, n_gallery: usize) -> Self {
        let mut by_subject: BTreeMap<&str, BTreeSet<&str>> = BTreeMap::new();
        for s in seqs {
            by_subject.entry(&s.subject_id).or_default().insert(&s.sequence_id);
        }
        let mut split = Split {
            train: vec![],
            gallery: vec![],
            probe: vec![],
        };
        for ids in by_subject.values() {
            for (k, id) in ids.iter().enumerate() {
                let bucket = if k < n_train {
                    &mut split.train
                } else if k < n_train + n_gallery {
                    &mut split.gallery
                } else {
                    &mut split.probe
                };
                bucket.push(id.to_string());
            }
        }
        split
    }

    /// Resolves an id list against a dataset, preserving list order.
    pub fn select(seqs: &[GaitSequence], ids: &[String]) -> Result<Vec<GaitSequence>> {
        let index: BTreeMap<&str, &GaitSequence> = seqs.iter().map(|s| (s.sequence_id.as_str(), s)).collect();
        ids.iter()
            .map(|id| {
                index
                    .get(id.as_str())
                    .map(|s| (*s).clone())
                    .ok_or_else(|| Error::Config(format!("sequence `{id}` not found in dataset")))
            })
            .collect()
    }
}

pub fn read_id_list(path: impl AsRef<Path>) -> Result<Vec<String>> {
    Ok(serde_json::from_reader(BufReader::new(File::open(path)?))?)
}
