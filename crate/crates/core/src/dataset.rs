//! Versioned binary container for one corpus split, with an integrity
//! hash over the whole file. Layout: magic, format version, a
//! JSON-encoded header, fixed-layout records, and a trailing SHA-256 of
//! everything before it. All integers are little-endian.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::datagen::{labels_to_vec, Corpus, Sample, SampleKind};
use crate::error::{Error, Result};
use crate::grammar::Grammar;
use crate::vocab::Vocabulary;

pub const DATASET_MAGIC: &[u8; 4] = b"AGDS";
pub const DATASET_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitHeader {
    pub split: String,
    pub grammar_name: String,
    pub grammar_seed: u64,
    pub grammar_hash: String,
    pub n_terms: usize,
    pub terminology: Vec<String>,
    pub grid: [usize; 3],
    pub vocab_size: usize,
    pub vocab_hash: String,
    pub count: usize,
}

impl SplitHeader {
    pub fn new(corpus: &Corpus, vocab: &Vocabulary, split: &str, count: usize) -> Result<SplitHeader> {
        let g = &corpus.grammar;
        Ok(SplitHeader {
            split: split.to_string(),
            grammar_name: g.name.clone(),
            grammar_seed: g.seed,
            grammar_hash: g.hash()?,
            n_terms: g.n_terms(),
            terminology: g.terms.iter().map(|t| t.name.clone()).collect(),
            grid: [g.grid_h, g.grid_w, g.channels],
            vocab_size: vocab.len(),
            vocab_hash: vocab.sha256_hex(),
            count,
        })
    }
}

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
    file: String,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::corrupt(format!(
                "{}: truncated at byte {} (wanted {} more)",
                self.file, self.pos, n
            )));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn done(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

fn push_str(buf: &mut Vec<u8>, s: &str) {
    let bytes = s.as_bytes();
    assert!(bytes.len() <= u16::MAX as usize, "string field too long");
    buf.extend_from_slice(&(bytes.len() as u16).to_le_bytes());
    buf.extend_from_slice(bytes);
}

fn encode_split(header: &SplitHeader, samples: &[Sample]) -> Vec<u8> {
    assert_eq!(header.count, samples.len());
    let mut buf = Vec::new();
    buf.extend_from_slice(DATASET_MAGIC);
    buf.extend_from_slice(&DATASET_VERSION.to_le_bytes());
    let header_json = serde_json::to_vec(header).expect("header serializes");
    buf.extend_from_slice(&(header_json.len() as u32).to_le_bytes());
    buf.extend_from_slice(&header_json);
    for s in samples {
        assert!(!s.tokens.is_empty(), "tokenize before saving ({})", s.id);
        push_str(&mut buf, &s.id);
        buf.push(s.kind.code());
        buf.extend_from_slice(&s.labels.to_le_bytes());
        match &s.grid {
            Some(grid) => {
                buf.push(1);
                for &v in grid {
                    buf.extend_from_slice(&v.to_le_bytes());
                }
            }
            None => buf.push(0),
        }
        buf.extend_from_slice(&(s.tokens.len() as u32).to_le_bytes());
        for &t in &s.tokens {
            buf.extend_from_slice(&(t as u32).to_le_bytes());
        }
    }
    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(&digest);
    buf
}

pub fn save_split(path: &Path, header: &SplitHeader, samples: &[Sample]) -> Result<()> {
    std::fs::write(path, encode_split(header, samples))?;
    Ok(())
}

/// Load one split and rebuild sample texts through the vocabulary the
/// file was written against (checked by hash).
pub fn load_split(path: &Path, vocab: &Vocabulary) -> Result<(SplitHeader, Vec<Sample>)> {
    let bytes = std::fs::read(path)?;
    let file = path.display().to_string();
    if bytes.len() < DATASET_MAGIC.len() + 4 + 4 + 32 {
        return Err(Error::corrupt(format!(
            "{file}: {} bytes is too short for a dataset file",
            bytes.len()
        )));
    }
    let (body, stored_hash) = bytes.split_at(bytes.len() - 32);
    if &body[..4] != DATASET_MAGIC {
        return Err(Error::corrupt(format!(
            "{file}: bad magic {:?}, not a dataset file",
            &body[..4]
        )));
    }
    let digest = Sha256::digest(body);
    if digest.as_slice() != stored_hash {
        return Err(Error::HashMismatch(format!(
            "{file}: stored integrity hash does not match file contents"
        )));
    }
    let mut r = ByteReader {
        bytes: body,
        pos: 4,
        file: file.clone(),
    };
    let version = r.u32()?;
    if version != DATASET_VERSION {
        return Err(Error::VersionMismatch {
            file,
            found: version,
            expected: DATASET_VERSION,
        });
    }
    let header_len = r.u32()? as usize;
    let header: SplitHeader = serde_json::from_slice(r.take(header_len)?)
        .map_err(|e| Error::corrupt(format!("{}: header is not valid JSON: {e}", r.file)))?;
    if header.vocab_hash != vocab.sha256_hex() {
        return Err(Error::HashMismatch(format!(
            "{}: written against vocabulary {} but loaded with {}",
            r.file,
            &header.vocab_hash[..12.min(header.vocab_hash.len())],
            &vocab.sha256_hex()[..12]
        )));
    }
    if header.vocab_size != vocab.len() {
        return Err(Error::corrupt(format!(
            "{}: header vocab_size {} disagrees with vocabulary length {}",
            r.file,
            header.vocab_size,
            vocab.len()
        )));
    }
    let grid_len = header.grid.iter().product::<usize>();
    let mut samples = Vec::with_capacity(header.count);
    for _ in 0..header.count {
        let id_len = r.u16()? as usize;
        let id = String::from_utf8(r.take(id_len)?.to_vec())
            .map_err(|_| Error::corrupt(format!("{}: sample id is not UTF-8", r.file)))?;
        let kind = SampleKind::from_code(r.u8()?)?;
        let labels = r.u64()?;
        let grid = match r.u8()? {
            0 => None,
            1 => {
                let mut g = Vec::with_capacity(grid_len);
                for _ in 0..grid_len {
                    g.push(r.f32()?);
                }
                Some(g)
            }
            other => {
                return Err(Error::corrupt(format!(
                    "{}: grid flag must be 0 or 1, found {other}",
                    r.file
                )))
            }
        };
        if (kind == SampleKind::Transfer) != grid.is_some() {
            return Err(Error::corrupt(format!(
                "{}: sample {id} kind and grid presence disagree",
                r.file
            )));
        }
        let n_tokens = r.u32()? as usize;
        let mut tokens = Vec::with_capacity(n_tokens);
        for _ in 0..n_tokens {
            let t = r.u32()? as usize;
            if t >= vocab.len() {
                return Err(Error::corrupt(format!(
                    "{}: sample {id} token id {t} outside vocabulary of {}",
                    r.file,
                    vocab.len()
                )));
            }
            tokens.push(t);
        }
        let text = vocab.detokenize(&tokens);
        samples.push(Sample {
            id,
            kind,
            labels,
            label_vec: labels_to_vec(labels, header.n_terms),
            grid,
            text,
            tokens,
        });
    }
    if !r.done() {
        return Err(Error::corrupt(format!(
            "{}: {} unexpected trailing bytes after the last record",
            r.file,
            body.len() - r.pos
        )));
    }
    Ok((header, samples))
}

/// File names used by corpus directories: four splits plus the shared
/// vocabulary and the grammar that generated them.
pub fn split_file(split: &str) -> String {
    format!("{split}.agds")
}

pub const VOCAB_FILE: &str = "vocab.txt";
pub const GRAMMAR_FILE: &str = "grammar.toml";

/// Write a tokenized corpus into `dir`: one container per split, the
/// grammar definition, and (unless `shared_vocab_dir` points elsewhere)
/// the vocabulary itself.
pub fn save_corpus(dir: &Path, corpus: &Corpus, vocab: &Vocabulary) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join(GRAMMAR_FILE), corpus.grammar.to_toml()?)?;
    vocab.save(&dir.join(VOCAB_FILE))?;
    for (split, samples) in corpus.splits() {
        let header = SplitHeader::new(corpus, vocab, split, samples.len())?;
        save_split(&dir.join(split_file(split)), &header, samples)?;
    }
    Ok(())
}

/// Load a corpus directory written by [`save_corpus`], checking each
/// split against the stored grammar and vocabulary.
pub fn load_corpus(dir: &Path) -> Result<(Corpus, Vocabulary)> {
    let vocab = Vocabulary::load(&dir.join(VOCAB_FILE))?;
    let grammar = Grammar::from_toml(&std::fs::read_to_string(dir.join(GRAMMAR_FILE))?)?;
    let grammar_hash = grammar.hash()?;
    let mut parts: Vec<Vec<Sample>> = Vec::new();
    for split in crate::datagen::SPLITS {
        let (header, samples) = load_split(&dir.join(split_file(split)), &vocab)?;
        if header.grammar_hash != grammar_hash {
            return Err(Error::HashMismatch(format!(
                "{}: split written against a different grammar than {}",
                split_file(split),
                GRAMMAR_FILE
            )));
        }
        if header.split != split {
            return Err(Error::corrupt(format!(
                "{}: header says split '{}'",
                split_file(split),
                header.split
            )));
        }
        parts.push(samples);
    }
    let test = parts.pop().unwrap();
    let val = parts.pop().unwrap();
    let train = parts.pop().unwrap();
    let textbook = parts.pop().unwrap();
    Ok((
        Corpus {
            grammar,
            textbook,
            train,
            val,
            test,
        },
        vocab,
    ))
}

/// Human-readable sidecar: one `id<TAB>labels<TAB>text` line per sample.
pub fn export_text(path: &Path, samples: &[Sample]) -> Result<()> {
    use std::io::Write;
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for s in samples {
        let labels: Vec<String> = (0..64)
            .filter(|i| s.labels & (1u64 << i) != 0)
            .map(|i| i.to_string())
            .collect();
        writeln!(f, "{}\t[{}]\t{}", s.id, labels.join(","), s.text)?;
    }
    f.flush()?;
    Ok(())
}
