//! Token vocabulary with fixed reserved ids and a line-per-token file
//! format (line number = token id).

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;

pub const RESERVED: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

#[derive(Clone, Debug)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

/// Lowercase and split into word and punctuation tokens. Alphanumeric
/// runs form one token; every other non-whitespace character stands
/// alone.
pub fn normalize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut word = String::new();
    for ch in text.chars() {
        if ch.is_alphanumeric() {
            for lc in ch.to_lowercase() {
                word.push(lc);
            }
        } else {
            if !word.is_empty() {
                out.push(std::mem::take(&mut word));
            }
            if !ch.is_whitespace() {
                out.push(ch.to_string());
            }
        }
    }
    if !word.is_empty() {
        out.push(word);
    }
    out
}

impl Vocabulary {
    fn from_tokens(tokens: Vec<String>) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Vocabulary { tokens, index }
    }

    /// Build from training text: reserved tokens first, then the corpus
    /// tokens in sorted order (deterministic regardless of input order).
    pub fn from_corpus<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let mut seen: std::collections::BTreeSet<String> = std::collections::BTreeSet::new();
        for text in texts {
            for tok in normalize(text) {
                seen.insert(tok);
            }
        }
        let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        tokens.extend(seen.into_iter().filter(|t| !RESERVED.contains(&t.as_str())));
        Self::from_tokens(tokens)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    /// BOS + token ids + EOS; unknown tokens map to UNK.
    pub fn tokenize(&self, text: &str) -> Vec<usize> {
        let mut ids = vec![BOS];
        for tok in normalize(text) {
            ids.push(self.id(&tok).unwrap_or(UNK));
        }
        ids.push(EOS);
        ids
    }

    /// Space-joined tokens with PAD/BOS/EOS dropped; UNK renders as its
    /// reserved string.
    pub fn detokenize(&self, ids: &[usize]) -> String {
        let mut parts = Vec::new();
        for &id in ids {
            if id == PAD || id == BOS || id == EOS {
                continue;
            }
            parts.push(self.token(id));
        }
        parts.join(" ")
    }

    pub fn unk_rate(&self, ids: &[usize]) -> f64 {
        let content: Vec<&usize> = ids
            .iter()
            .filter(|&&id| id != PAD && id != BOS && id != EOS)
            .collect();
        if content.is_empty() {
            return 0.0;
        }
        content.iter().filter(|&&&id| id == UNK).count() as f64 / content.len() as f64
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        for tok in &self.tokens {
            writeln!(f, "{tok}")?;
        }
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let tokens: Vec<String> = text.lines().map(|l| l.to_string()).collect();
        if tokens.len() < RESERVED.len() {
            return Err(Error::corrupt(format!(
                "vocabulary file {} has {} lines, need at least {}",
                path.display(),
                tokens.len(),
                RESERVED.len()
            )));
        }
        for (i, want) in RESERVED.iter().enumerate() {
            if tokens[i] != *want {
                return Err(Error::corrupt(format!(
                    "vocabulary file {}: line {i} must be the reserved token {want}, found {}",
                    path.display(),
                    tokens[i]
                )));
            }
        }
        let mut seen = std::collections::HashSet::new();
        for tok in &tokens {
            if !seen.insert(tok) {
                return Err(Error::corrupt(format!(
                    "vocabulary file {}: duplicate token '{tok}'",
                    path.display()
                )));
            }
        }
        Ok(Self::from_tokens(tokens))
    }

    pub fn sha256_hex(&self) -> String {
        let mut h = Sha256::new();
        for tok in &self.tokens {
            h.update(tok.as_bytes());
            h.update([b'\n']);
        }
        hex(&h.finalize())
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_vocab() -> Vocabulary {
        Vocabulary::from_corpus(["no acute lesion seen .", "focal opacity in the left zone ."])
    }

    #[test]
    fn empty_text_tokenizes_to_bos_eos() {
        let v = sample_vocab();
        assert_eq!(v.tokenize(""), vec![BOS, EOS]);
    }

    #[test]
    fn reserved_ids_are_fixed_and_first() {
        let v = sample_vocab();
        assert_eq!(v.token(PAD), "<pad>");
        assert_eq!(v.token(BOS), "<bos>");
        assert_eq!(v.token(EOS), "<eos>");
        assert_eq!(v.token(UNK), "<unk>");
    }

    #[test]
    fn round_trip_in_vocabulary_text() {
        let v = sample_vocab();
        let s = "Focal opacity in the LEFT zone.";
        let ids = v.tokenize(s);
        assert_eq!(v.detokenize(&ids), "focal opacity in the left zone .");
        let again = v.tokenize(&v.detokenize(&ids));
        assert_eq!(ids, again);
    }

    #[test]
    fn unknown_words_map_to_unk_and_survive() {
        let v = sample_vocab();
        let ids = v.tokenize("no xyzzy seen");
        assert!(ids.contains(&UNK));
        assert_eq!(v.detokenize(&ids), "no <unk> seen");
        assert!(v.unk_rate(&ids) > 0.3 && v.unk_rate(&ids) < 0.34);
    }

    #[test]
    fn punctuation_splits_into_single_tokens() {
        assert_eq!(
            normalize("lesion, seen."),
            vec!["lesion", ",", "seen", "."]
        );
    }

    #[test]
    fn save_load_round_trip_preserves_ids_and_hash() {
        let v = sample_vocab();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.txt");
        v.save(&path).unwrap();
        let loaded = Vocabulary::load(&path).unwrap();
        assert_eq!(loaded.len(), v.len());
        for id in 0..v.len() {
            assert_eq!(loaded.token(id), v.token(id));
        }
        assert_eq!(loaded.sha256_hex(), v.sha256_hex());
    }

    #[test]
    fn load_rejects_missing_reserved_tokens() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.txt");
        std::fs::write(&path, "<pad>\n<bos>\nwrong\n<unk>\nword\n").unwrap();
        let err = Vocabulary::load(&path).unwrap_err();
        assert_eq!(err.exit_code(), 4);
    }

    #[test]
    fn corpus_build_is_deterministic_under_input_order() {
        let a = Vocabulary::from_corpus(["b a", "c d"]);
        let b = Vocabulary::from_corpus(["c d", "b a"]);
        assert_eq!(a.sha256_hex(), b.sha256_hex());
    }
}
