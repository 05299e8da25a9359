//! Pre-tokenized calibration / evaluation corpora.

use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Token-id sequences sampled from the data distribution, each at least two
/// tokens long.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CalibrationSet {
    sequences: Vec<Vec<u32>>,
    fingerprint: String,
}

impl CalibrationSet {
    pub fn new(sequences: Vec<Vec<u32>>) -> Result<Self> {
        if sequences.is_empty() {
            return Err(Error::Input("calibration set has no sequences".into()));
        }
        if let Some(i) = sequences.iter().position(|s| s.len() < 2) {
            return Err(Error::Input(format!(
                "sequence {i} has {} tokens; at least 2 are required",
                sequences[i].len()
            )));
        }
        let fingerprint = fingerprint(&sequences);
        Ok(CalibrationSet {
            sequences,
            fingerprint,
        })
    }

    pub fn sequences(&self) -> &[Vec<u32>] {
        &self.sequences
    }

    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    /// Hex SHA-256 over the sequence lengths and ids (little-endian u64/u32).
    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    pub fn n_tokens(&self) -> usize {
        self.sequences.iter().map(Vec::len).sum()
    }

    /// Checks every id against a vocabulary size.
    pub fn check_vocab(&self, vocab_size: usize) -> Result<()> {
        for (i, seq) in self.sequences.iter().enumerate() {
            if let Some(&t) = seq.iter().find(|&&t| t as usize >= vocab_size) {
                return Err(Error::Input(format!(
                    "sequence {i}: token id {t} is outside the vocabulary of {vocab_size}"
                )));
            }
        }
        Ok(())
    }

    /// Parses one sequence per non-empty line of whitespace-separated ids.
    /// `vocab_size`, when given, is checked per line so errors carry the
    /// line number.
    pub fn parse(text: &str, path: &Path, vocab_size: Option<usize>) -> Result<Self> {
        let err = |line: usize, message: String| Error::Tokens {
            path: path.to_path_buf(),
            line,
            message,
        };
        let mut sequences = Vec::new();
        for (idx, line) in text.lines().enumerate() {
            let line_no = idx + 1;
            if line.trim().is_empty() {
                continue;
            }
            let mut seq = Vec::new();
            for tok in line.split_whitespace() {
                let id: u32 = tok
                    .parse()
                    .map_err(|_| err(line_no, format!("`{tok}` is not a token id")))?;
                if let Some(v) = vocab_size {
                    if id as usize >= v {
                        return Err(err(
                            line_no,
                            format!("token id {id} is outside the vocabulary of {v}"),
                        ));
                    }
                }
                seq.push(id);
            }
            if seq.len() < 2 {
                return Err(err(
                    line_no,
                    format!("sequence has {} token; at least 2 are required", seq.len()),
                ));
            }
            sequences.push(seq);
        }
        if sequences.is_empty() {
            return Err(err(0, "no token sequences".into()));
        }
        CalibrationSet::new(sequences)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for seq in &self.sequences {
            let line: Vec<String> = seq.iter().map(u32::to_string).collect();
            out.push_str(&line.join(" "));
            out.push('\n');
        }
        out
    }
}

/// Reads a token file; see [`CalibrationSet::parse`].
pub fn read_tokens(path: &Path, vocab_size: Option<usize>) -> Result<CalibrationSet> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    CalibrationSet::parse(&text, path, vocab_size)
}

fn fingerprint(sequences: &[Vec<u32>]) -> String {
    let mut h = Sha256::new();
    h.update((sequences.len() as u64).to_le_bytes());
    for seq in sequences {
        h.update((seq.len() as u64).to_le_bytes());
        for &t in seq {
            h.update(t.to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}
