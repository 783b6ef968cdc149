//! Versioned binary container for recorded encoder attention, plus a
//! plain-text reading of where each terminology row looks. Layout
//! mirrors the dataset container: magic, format version, a JSON header,
//! fixed-layout per-head records (scaled logits then probabilities), and
//! a trailing SHA-256. All integers are little-endian.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::encoder::EncodeOptions;
use crate::error::{Error, Result};
use crate::layers::{AttentionRecord, Fwd, HeadAttention, LayerAttention};
use crate::model::{encode_sample, ModelConfig, SampleView};
use crate::optim::{Binding, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tape;
use crate::vocab::Vocabulary;

pub const ATTENTION_MAGIC: &[u8; 4] = b"AGAT";
pub const ATTENTION_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionHeader {
    pub sample_id: String,
    /// Which encoder branch ran: "visual" or "textual".
    pub branch: String,
    pub layers: usize,
    pub heads: usize,
    /// Unified sequence length; attention matrices are rows × rows.
    pub rows: usize,
    pub n_terms: usize,
    /// Human label for every sequence position: terminology names first,
    /// then grid cells `cell(r,c)` or context token strings.
    pub positions: Vec<String>,
}

/// Run the sample's branch with attention recording on and return the
/// per-layer, per-head maps.
pub fn capture_attention<S: Scalar>(
    store: &ParamStore<S>,
    cfg: &ModelConfig,
    view: &SampleView<'_>,
    opts: EncodeOptions,
) -> AttentionRecord {
    let mut tape = Tape::new();
    let mut binding = Binding::new();
    let mut fwd = Fwd::new(&mut tape, store, &mut binding);
    let opts = EncodeOptions {
        record: true,
        ..opts
    };
    let enc = encode_sample(&mut fwd, cfg, view, opts);
    enc.attention.expect("recording was requested")
}

/// Position labels for the sample's unified sequence.
pub fn position_labels(
    cfg: &ModelConfig,
    terminology: &[String],
    view: &SampleView<'_>,
    vocab: &Vocabulary,
) -> Vec<String> {
    assert_eq!(
        terminology.len(),
        cfg.n_terms,
        "terminology inventory does not match the model"
    );
    let mut labels: Vec<String> = terminology.to_vec();
    match view {
        SampleView::Transfer { .. } => {
            for i in 0..cfg.n_visual() {
                labels.push(format!("cell({},{})", i / cfg.grid_w, i % cfg.grid_w));
            }
        }
        SampleView::Pretrain { tokens, .. } => {
            for &t in *tokens {
                labels.push(vocab.token(t).to_string());
            }
        }
    }
    labels
}

pub fn attention_header(
    sample_id: &str,
    cfg: &ModelConfig,
    view: &SampleView<'_>,
    terminology: &[String],
    vocab: &Vocabulary,
    record: &AttentionRecord,
) -> AttentionHeader {
    let positions = position_labels(cfg, terminology, view, vocab);
    let rows = positions.len();
    for layer in &record.layers {
        for head in &layer.heads {
            assert_eq!(
                (head.rows, head.cols),
                (rows, rows),
                "attention map shape disagrees with the sequence"
            );
        }
    }
    AttentionHeader {
        sample_id: sample_id.to_string(),
        branch: view.procedure().branch().name().to_string(),
        layers: record.layers.len(),
        heads: record.layers.first().map_or(0, |l| l.heads.len()),
        rows,
        n_terms: cfg.n_terms,
        positions,
    }
}

fn encode_attention(header: &AttentionHeader, record: &AttentionRecord) -> Vec<u8> {
    assert_eq!(header.layers, record.layers.len());
    assert_eq!(header.positions.len(), header.rows);
    let mut buf = Vec::new();
    buf.extend_from_slice(ATTENTION_MAGIC);
    buf.extend_from_slice(&ATTENTION_VERSION.to_le_bytes());
    let header_json = serde_json::to_vec(header).expect("header serializes");
    buf.extend_from_slice(&(header_json.len() as u32).to_le_bytes());
    buf.extend_from_slice(&header_json);
    for layer in &record.layers {
        assert_eq!(header.heads, layer.heads.len());
        for head in &layer.heads {
            buf.extend_from_slice(&(head.rows as u32).to_le_bytes());
            buf.extend_from_slice(&(head.cols as u32).to_le_bytes());
            for &v in &head.logits {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            for &v in &head.probs {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(&digest);
    buf
}

pub fn save_attention(
    path: &Path,
    header: &AttentionHeader,
    record: &AttentionRecord,
) -> Result<()> {
    std::fs::write(path, encode_attention(header, record))?;
    Ok(())
}

pub fn load_attention(path: &Path) -> Result<(AttentionHeader, AttentionRecord)> {
    let bytes = std::fs::read(path)?;
    let file = path.display().to_string();
    if bytes.len() < ATTENTION_MAGIC.len() + 4 + 4 + 32 {
        return Err(Error::corrupt(format!(
            "{file}: {} bytes is too short for an attention file",
            bytes.len()
        )));
    }
    let (body, stored_hash) = bytes.split_at(bytes.len() - 32);
    if &body[..4] != ATTENTION_MAGIC {
        return Err(Error::corrupt(format!(
            "{file}: bad magic {:?}, not an attention file",
            &body[..4]
        )));
    }
    let digest = Sha256::digest(body);
    if digest.as_slice() != stored_hash {
        return Err(Error::HashMismatch(format!(
            "{file}: stored integrity hash does not match file contents"
        )));
    }
    let mut pos = 4usize;
    let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
        if *pos + n > body.len() {
            return Err(Error::corrupt(format!(
                "{file}: truncated at byte {pos} (wanted {n} more)",
            )));
        }
        let out = &body[*pos..*pos + n];
        *pos += n;
        Ok(out)
    };
    let version = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap());
    if version != ATTENTION_VERSION {
        return Err(Error::VersionMismatch {
            file,
            found: version,
            expected: ATTENTION_VERSION,
        });
    }
    let header_len = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
    let header: AttentionHeader = serde_json::from_slice(take(&mut pos, header_len)?)
        .map_err(|e| Error::corrupt(format!("{file}: header is not valid JSON: {e}")))?;
    if header.positions.len() != header.rows || header.n_terms > header.rows {
        return Err(Error::corrupt(format!(
            "{file}: header counts are inconsistent ({} labels for {} rows, {} terminologies)",
            header.positions.len(),
            header.rows,
            header.n_terms
        )));
    }
    let mut record = AttentionRecord::default();
    for _ in 0..header.layers {
        let mut layer = LayerAttention::default();
        for _ in 0..header.heads {
            let rows = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
            let cols = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
            if rows != header.rows || cols != header.rows {
                return Err(Error::corrupt(format!(
                    "{file}: attention map is {rows}x{cols}, header says {0}x{0}",
                    header.rows
                )));
            }
            let read_f32s = |pos: &mut usize, n: usize| -> Result<Vec<f32>> {
                let raw = take(pos, 4 * n)?;
                Ok(raw
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect())
            };
            let logits = read_f32s(&mut pos, rows * cols)?;
            let probs = read_f32s(&mut pos, rows * cols)?;
            layer.heads.push(HeadAttention {
                rows,
                cols,
                logits,
                probs,
            });
        }
        record.layers.push(layer);
    }
    if pos != body.len() {
        return Err(Error::corrupt(format!(
            "{file}: {} unexpected trailing bytes after the last record",
            body.len() - pos
        )));
    }
    Ok((header, record))
}

/// Plain-text reading: per layer and head, each terminology row's
/// heaviest attention targets with their probabilities. Ties break
/// toward the earlier position.
pub fn attention_summary(
    header: &AttentionHeader,
    record: &AttentionRecord,
    top_k: usize,
) -> String {
    use std::fmt::Write;
    let mut out = String::new();
    writeln!(
        out,
        "sample {}  branch {}  {} layers x {} heads  sequence {}",
        header.sample_id, header.branch, header.layers, header.heads, header.rows
    )
    .unwrap();
    for (li, layer) in record.layers.iter().enumerate() {
        for (hi, head) in layer.heads.iter().enumerate() {
            writeln!(out, "layer {li}  head {hi}").unwrap();
            for m in 0..header.n_terms {
                let row = &head.probs[m * head.cols..(m + 1) * head.cols];
                let mut order: Vec<usize> = (0..head.cols).collect();
                order.sort_by(|&a, &b| {
                    row[b]
                        .partial_cmp(&row[a])
                        .expect("probabilities are finite")
                        .then(a.cmp(&b))
                });
                let shown: Vec<String> = order
                    .iter()
                    .take(top_k)
                    .map(|&j| format!("{} {:.3}", header.positions[j], row[j]))
                    .collect();
                writeln!(out, "  {}: {}", header.positions[m], shown.join(", ")).unwrap();
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{build_vocabulary, generate_corpus, CorpusSizes};
    use crate::grammar::grammar_alpha;
    use crate::model::init_params;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup() -> (
        ModelConfig,
        ParamStore<f32>,
        crate::datagen::Corpus,
        Vocabulary,
    ) {
        let sizes = CorpusSizes {
            textbook: 10,
            train: 12,
            val: 4,
            test: 4,
        };
        let mut corpus = generate_corpus(&grammar_alpha(), sizes).unwrap();
        let vocab = build_vocabulary(&[&corpus]);
        corpus.tokenize(&vocab, 64).unwrap();
        let g = &corpus.grammar;
        let cfg = ModelConfig {
            model_dim: 16,
            heads: 2,
            encoder_layers: 2,
            decoder_blocks: 1,
            term_dim: 8,
            visual_dim: 8,
            text_dim: 8,
            n_terms: g.n_terms(),
            grid_h: g.grid_h,
            grid_w: g.grid_w,
            channels: g.channels,
            vocab_size: vocab.len(),
            max_len: 64,
            dropout: 0.0,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let store = init_params(&cfg, &mut rng);
        (cfg, store, corpus, vocab)
    }

    fn terminology(corpus: &crate::datagen::Corpus) -> Vec<String> {
        corpus
            .grammar
            .terms
            .iter()
            .map(|t| t.name.clone())
            .collect()
    }

    fn capture_one(
        which: &str,
        isolate: bool,
    ) -> (AttentionHeader, AttentionRecord, ModelConfig) {
        let (cfg, store, corpus, vocab) = setup();
        let sample = match which {
            "visual" => &corpus.train[0],
            _ => &corpus.textbook[0],
        };
        let view = sample.view();
        let opts = EncodeOptions {
            isolate_segments: isolate,
            record: true,
        };
        let record = capture_attention(&store, &cfg, &view, opts);
        let header = attention_header(
            &sample.id,
            &cfg,
            &view,
            &terminology(&corpus),
            &vocab,
            &record,
        );
        (header, record, cfg)
    }

    #[test]
    fn round_trip_is_bitwise_and_resaving_is_byte_identical() {
        for which in ["visual", "textual"] {
            let (header, record, _) = capture_one(which, false);
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("attention.agat");
            save_attention(&path, &header, &record).unwrap();
            let (h2, r2) = load_attention(&path).unwrap();
            assert_eq!(h2, header);
            assert_eq!(record.layers.len(), r2.layers.len());
            for (a, b) in record.layers.iter().zip(&r2.layers) {
                for (x, y) in a.heads.iter().zip(&b.heads) {
                    assert_eq!(x.logits, y.logits);
                    assert_eq!(x.probs, y.probs);
                }
            }
            let again = dir.path().join("again.agat");
            save_attention(&again, &h2, &r2).unwrap();
            assert_eq!(
                std::fs::read(&path).unwrap(),
                std::fs::read(&again).unwrap()
            );
        }
    }

    #[test]
    fn stored_probabilities_are_the_softmax_of_stored_logits() {
        for which in ["visual", "textual"] {
            let (header, record, _) = capture_one(which, false);
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("attention.agat");
            save_attention(&path, &header, &record).unwrap();
            let (h, r) = load_attention(&path).unwrap();
            for layer in &r.layers {
                for head in &layer.heads {
                    for i in 0..head.rows {
                        let row: Vec<f64> = head.logits[i * head.cols..(i + 1) * head.cols]
                            .iter()
                            .map(|&x| x as f64)
                            .collect();
                        let mut probs = vec![0.0f64; head.cols];
                        crate::tensor::softmax_row(&row, &mut probs);
                        for j in 0..head.cols {
                            let stored = head.probs[i * head.cols + j] as f64;
                            assert!(
                                (probs[j] - stored).abs() < 1e-6,
                                "{which} row {i} col {j}: softmax {} vs stored {stored}",
                                probs[j]
                            );
                        }
                    }
                }
            }
            assert_eq!(h.rows, header.positions.len());
        }
    }

    #[test]
    fn header_labels_name_cells_for_visual_and_tokens_for_textual() {
        let (vh, _, vcfg) = capture_one("visual", false);
        assert_eq!(vh.branch, "visual");
        assert_eq!(vh.rows, vcfg.n_terms + vcfg.n_visual());
        assert_eq!(vh.positions[vcfg.n_terms], "cell(0,0)");
        assert_eq!(
            vh.positions.last().unwrap(),
            &format!("cell({},{})", vcfg.grid_h - 1, vcfg.grid_w - 1)
        );

        let (th, _, tcfg) = capture_one("textual", false);
        assert_eq!(th.branch, "textual");
        assert!(th.rows > tcfg.n_terms);
        // context starts at the begin-of-sequence marker
        assert_eq!(
            th.positions[tcfg.n_terms],
            crate::vocab::RESERVED[crate::vocab::BOS]
        );
    }

    #[test]
    fn summary_lists_every_terminology_for_every_layer_and_head() {
        let (header, record, cfg) = capture_one("visual", false);
        let text = attention_summary(&header, &record, 3);
        let body_lines = text
            .lines()
            .filter(|l| l.starts_with("  "))
            .count();
        assert_eq!(body_lines, header.layers * header.heads * cfg.n_terms);
        for name in &header.positions[..cfg.n_terms] {
            assert!(text.contains(&format!("  {name}:")), "missing {name}");
        }
        // probabilities are printed with three decimals
        assert!(text.contains(" 0."));
    }

    #[test]
    fn isolated_terminology_rows_only_attend_to_terminology() {
        let (header, record, cfg) = capture_one("visual", true);
        for layer in &record.layers {
            for head in &layer.heads {
                for m in 0..cfg.n_terms {
                    let row = &head.probs[m * head.cols..(m + 1) * head.cols];
                    for (j, &p) in row.iter().enumerate().skip(cfg.n_terms) {
                        assert_eq!(p, 0.0, "blocked position {j} received mass");
                    }
                }
            }
        }
        // and the summary therefore only shows terminology names
        let text = attention_summary(&header, &record, 2);
        for line in text.lines().filter(|l| l.starts_with("  ")) {
            assert!(
                !line.contains("cell("),
                "an isolated row attends to a cell: {line}"
            );
        }
    }

    #[test]
    fn corrupted_attention_files_are_rejected() {
        let (header, record, _) = capture_one("visual", false);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("attention.agat");
        save_attention(&path, &header, &record).unwrap();
        let clean = std::fs::read(&path).unwrap();

        let mut flipped = clean.clone();
        let mid = flipped.len() / 2;
        flipped[mid] ^= 0x10;
        std::fs::write(&path, &flipped).unwrap();
        let err = load_attention(&path).unwrap_err();
        assert!(matches!(err, Error::HashMismatch(_)), "{err}");

        std::fs::write(&path, &clean[..clean.len() - 40]).unwrap();
        assert_eq!(load_attention(&path).unwrap_err().exit_code(), 4);

        std::fs::write(&path, vec![0u8; 100]).unwrap();
        let err = load_attention(&path).unwrap_err();
        assert!(matches!(err, Error::Corrupt(_)), "{err}");

        let mut bumped = clean.clone();
        bumped[4] = 99;
        let body_len = bumped.len() - 32;
        let digest = Sha256::digest(&bumped[..body_len]);
        bumped[body_len..].copy_from_slice(&digest);
        std::fs::write(&path, &bumped).unwrap();
        let err = load_attention(&path).unwrap_err();
        assert!(
            matches!(err, Error::VersionMismatch { found: 99, .. }),
            "{err}"
        );
    }

    #[test]
    fn inconsistent_header_counts_are_corrupt() {
        let (mut header, record, _) = capture_one("visual", false);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("attention.agat");
        // hand-build a file whose header claims one label too few
        header.positions.pop();
        header.rows -= 1;
        let mut buf = Vec::new();
        buf.extend_from_slice(ATTENTION_MAGIC);
        buf.extend_from_slice(&ATTENTION_VERSION.to_le_bytes());
        let header_json = serde_json::to_vec(&header).unwrap();
        buf.extend_from_slice(&(header_json.len() as u32).to_le_bytes());
        buf.extend_from_slice(&header_json);
        for layer in &record.layers {
            for head in &layer.heads {
                buf.extend_from_slice(&(head.rows as u32).to_le_bytes());
                buf.extend_from_slice(&(head.cols as u32).to_le_bytes());
                for &v in head.logits.iter().chain(&head.probs) {
                    buf.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        let digest = Sha256::digest(&buf);
        buf.extend_from_slice(&digest);
        std::fs::write(&path, &buf).unwrap();
        let err = load_attention(&path).unwrap_err();
        assert!(matches!(err, Error::Corrupt(_)), "{err}");
        assert_eq!(err.exit_code(), 4);
    }
}
