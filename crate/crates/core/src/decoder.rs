//! The shared report decoder: token + position embeddings feed a stack
//! of pre-norm blocks (causal self-attention, cross-attention over the
//! terminology features, feed-forward); output logits reuse the token
//! embedding table as a tied projection. Both training procedures drive
//! this one decoder — only the terminology features differ.

use crate::error::{Error, Result};
use crate::layers::Fwd;
use crate::model::ModelConfig;
use crate::optim::{Binding, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor, TensorId};
use crate::vocab::{BOS, EOS, PAD};

/// Token embeddings plus absolute position embeddings.
fn embed_tokens<S: Scalar>(
    fwd: &mut Fwd<'_, S>,
    cfg: &ModelConfig,
    tokens: &[usize],
) -> TensorId {
    assert!(!tokens.is_empty(), "decoder input must be nonempty");
    assert!(
        tokens.len() <= cfg.max_len,
        "decoder input length {} exceeds max_len {}",
        tokens.len(),
        cfg.max_len
    );
    for &t in tokens {
        assert!(t < cfg.vocab_size, "token id {t} outside the vocabulary");
    }
    let tok_table = fwd.param("dec.tok_table");
    let pos_table = fwd.param("dec.pos_table");
    let tok = fwd.tape.embed(tok_table, tokens);
    let positions: Vec<usize> = (0..tokens.len()).collect();
    let pos = fwd.tape.embed(pos_table, &positions);
    fwd.tape.add(tok, pos)
}

/// Hidden states after the full block stack and final normalization.
pub fn decode_states<S: Scalar>(
    fwd: &mut Fwd<'_, S>,
    cfg: &ModelConfig,
    tokens: &[usize],
    term_feats: TensorId,
) -> TensorId {
    let mut h = embed_tokens(fwd, cfg, tokens);
    for i in 0..cfg.decoder_blocks {
        h = fwd.decoder_block(&format!("dec.b{i}."), h, term_feats, cfg.heads);
    }
    fwd.layer_norm(h, "dec.ln_f")
}

/// Next-token logits at every position. The output projection is the
/// transposed token embedding table, so the same parameter receives
/// gradient from both ends of the decoder.
pub fn decode_logits<S: Scalar>(
    fwd: &mut Fwd<'_, S>,
    cfg: &ModelConfig,
    tokens: &[usize],
    term_feats: TensorId,
) -> TensorId {
    let h = decode_states(fwd, cfg, tokens, term_feats);
    let tok_table = fwd.param("dec.tok_table");
    fwd.tape.matmul_nt(h, tok_table)
}

/// Teacher-forced language-model loss of one report: total (summed)
/// cross-entropy of each token given its predecessors, skipping padding
/// targets. Returns the loss node and the number of scored targets.
pub fn lm_loss<S: Scalar>(
    fwd: &mut Fwd<'_, S>,
    cfg: &ModelConfig,
    tokens: &[usize],
    term_feats: TensorId,
) -> (TensorId, usize) {
    assert!(
        tokens.len() >= 2,
        "language-model loss needs at least two tokens, got {}",
        tokens.len()
    );
    let input = &tokens[..tokens.len() - 1];
    let targets = &tokens[1..];
    let logits = decode_logits(fwd, cfg, input, term_feats);
    let loss = fwd.tape.token_nll(logits, targets, PAD);
    let scored = targets.iter().filter(|&&t| t != PAD).count();
    (loss, scored)
}

/// Decoding strategy for report generation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Decode {
    /// Highest-probability token each step; ties break toward the
    /// lowest token id.
    Greedy,
    /// Width-w search over cumulative log-probability with no length
    /// normalization; ties break toward the lexicographically smaller
    /// token sequence.
    Beam { width: usize },
}

/// Last-row logits for the next token after `prefix`, as f64.
fn next_logits<S: Scalar>(
    store: &ParamStore<S>,
    cfg: &ModelConfig,
    term_feats: &Tensor<S>,
    prefix: &[usize],
) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let mut binding = Binding::new();
    let mut fwd = Fwd::new(&mut tape, store, &mut binding);
    let tf = fwd.tape.leaf(term_feats.clone());
    let logits = decode_logits(&mut fwd, cfg, prefix, tf);
    let t = tape.value(logits);
    let last: Vec<f64> = t.row(t.rows - 1).iter().map(|x| x.to_f64()).collect();
    if last.iter().any(|v| !v.is_finite()) {
        return Err(Error::numeric(format!(
            "non-finite decoder logits at generation step {}",
            prefix.len()
        )));
    }
    Ok(last)
}

/// Multi-head attention where keys and values are already projected
/// (and, for self-attention, accumulated across steps). Only the query
/// projection runs here; head slicing and mixing match the full-sequence
/// path exactly.
fn attend_projected<S: Scalar>(
    fwd: &mut Fwd<'_, S>,
    prefix: &str,
    q_src: TensorId,
    k: TensorId,
    v: TensorId,
    heads: usize,
) -> TensorId {
    let d = fwd.tape.value(q_src).cols;
    let dk = d / heads;
    let q = fwd.linear(q_src, &format!("{prefix}wq"), &format!("{prefix}bq"));
    let mut parts = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = fwd.tape.slice_cols(q, h * dk, dk);
        let kh = fwd.tape.slice_cols(k, h * dk, dk);
        let vh = fwd.tape.slice_cols(v, h * dk, dk);
        let scores = fwd.tape.matmul_nt(qh, kh);
        let scaled = fwd
            .tape
            .scale(scores, S::from_f64(1.0 / (dk as f64).sqrt()));
        let probs = fwd.tape.softmax(scaled);
        parts.push(fwd.tape.matmul(probs, vh));
    }
    let ctx = fwd.tape.concat_cols(&parts);
    fwd.linear(ctx, &format!("{prefix}wo"), &format!("{prefix}bo"))
}

/// One-token-at-a-time decoding over a persistent tape. Each step runs
/// the block stack on the newest row only, attending over cached key and
/// value projections of everything before it; because every decoder
/// operation treats rows independently and the self-attention of the
/// newest position sees the whole prefix, the logits equal the
/// full-prefix forward pass bit for bit.
pub struct StepDecoder<'a, S: Scalar> {
    store: &'a ParamStore<S>,
    cfg: &'a ModelConfig,
    tape: Tape<S>,
    binding: Binding,
    /// Per block: self-attention key and value rows of all fed tokens.
    self_kv: Vec<Option<(TensorId, TensorId)>>,
    /// Per block: key and value projections of the terminology features,
    /// computed once at construction.
    cross_kv: Vec<(TensorId, TensorId)>,
    pos: usize,
}

impl<'a, S: Scalar> StepDecoder<'a, S> {
    pub fn new(store: &'a ParamStore<S>, cfg: &'a ModelConfig, term_feats: &Tensor<S>) -> Self {
        assert!(
            term_feats.rows >= 1,
            "step decoder requires nonempty terminology features"
        );
        let mut tape = Tape::new();
        let mut binding = Binding::new();
        let mut fwd = Fwd::new(&mut tape, store, &mut binding);
        let tf = fwd.tape.leaf(term_feats.clone());
        let mut cross_kv = Vec::with_capacity(cfg.decoder_blocks);
        for b in 0..cfg.decoder_blocks {
            let p = format!("dec.b{b}.cross.");
            let k = fwd.linear(tf, &format!("{p}wk"), &format!("{p}bk"));
            let v = fwd.linear(tf, &format!("{p}wv"), &format!("{p}bv"));
            cross_kv.push((k, v));
        }
        StepDecoder {
            store,
            cfg,
            tape,
            binding,
            self_kv: vec![None; cfg.decoder_blocks],
            cross_kv,
            pos: 0,
        }
    }

    /// Feed the next input token and return the logits for the token
    /// after it, as f64.
    pub fn advance(&mut self, tok: usize) -> Result<Vec<f64>> {
        let cfg = self.cfg;
        assert!(
            self.pos < cfg.max_len,
            "decoder input length {} exceeds max_len {}",
            self.pos + 1,
            cfg.max_len
        );
        assert!(tok < cfg.vocab_size, "token id {tok} outside the vocabulary");
        let mut fwd = Fwd::new(&mut self.tape, self.store, &mut self.binding);
        let tok_table = fwd.param("dec.tok_table");
        let pos_table = fwd.param("dec.pos_table");
        let te = fwd.tape.embed(tok_table, &[tok]);
        let pe = fwd.tape.embed(pos_table, &[self.pos]);
        let mut h = fwd.tape.add(te, pe);
        for b in 0..cfg.decoder_blocks {
            let p = format!("dec.b{b}.");
            let s_in = fwd.layer_norm(h, &format!("{p}ln1"));
            let k_new = fwd.linear(s_in, &format!("{p}self.wk"), &format!("{p}self.bk"));
            let v_new = fwd.linear(s_in, &format!("{p}self.wv"), &format!("{p}self.bv"));
            let (k, v) = match self.self_kv[b] {
                None => (k_new, v_new),
                Some((pk, pv)) => (
                    fwd.tape.concat_rows(&[pk, k_new]),
                    fwd.tape.concat_rows(&[pv, v_new]),
                ),
            };
            self.self_kv[b] = Some((k, v));
            let s = attend_projected(&mut fwd, &format!("{p}self."), s_in, k, v, cfg.heads);
            let h1 = fwd.tape.add(h, s);
            let c_in = fwd.layer_norm(h1, &format!("{p}ln2"));
            let (ck, cv) = self.cross_kv[b];
            let c = attend_projected(&mut fwd, &format!("{p}cross."), c_in, ck, cv, cfg.heads);
            let h2 = fwd.tape.add(h1, c);
            let f_in = fwd.layer_norm(h2, &format!("{p}ln3"));
            let f = fwd.feed_forward(f_in, &p);
            h = fwd.tape.add(h2, f);
        }
        let hn = fwd.layer_norm(h, "dec.ln_f");
        let logits = fwd.tape.matmul_nt(hn, tok_table);
        self.pos += 1;
        let last: Vec<f64> = self.tape.value(logits).row(0).iter().map(|x| x.to_f64()).collect();
        if last.iter().any(|z| !z.is_finite()) {
            return Err(Error::numeric(format!(
                "non-finite decoder logits at generation step {}",
                self.pos
            )));
        }
        Ok(last)
    }
}

fn argmax_lowest_id(logits: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate().skip(1) {
        if v > logits[best] {
            best = i;
        }
    }
    best
}

/// Generate one report from frozen terminology features. The result
/// starts with the begin token and normally ends with the end token;
/// a sequence still unfinished at `max_len` is returned truncated.
pub fn generate<S: Scalar>(
    store: &ParamStore<S>,
    cfg: &ModelConfig,
    term_feats: &Tensor<S>,
    decode: Decode,
) -> Result<Vec<usize>> {
    match decode {
        Decode::Greedy => {
            let mut steps = StepDecoder::new(store, cfg, term_feats);
            let mut tokens = vec![BOS];
            while tokens.len() < cfg.max_len {
                let logits = steps.advance(*tokens.last().unwrap())?;
                let next = argmax_lowest_id(&logits);
                tokens.push(next);
                if next == EOS {
                    break;
                }
            }
            Ok(tokens)
        }
        Decode::Beam { width } => {
            if width == 0 {
                return Err(Error::contract("beam width must be positive".to_string()));
            }
            let mut alive: Vec<(Vec<usize>, f64)> = vec![(vec![BOS], 0.0)];
            let mut finished: Vec<(Vec<usize>, f64)> = Vec::new();
            while !alive.is_empty() && alive[0].0.len() < cfg.max_len {
                let mut candidates: Vec<(Vec<usize>, f64)> = Vec::new();
                for (prefix, score) in &alive {
                    let logits = next_logits(store, cfg, term_feats, prefix)?;
                    let lse = crate::tensor::logsumexp(&logits);
                    for (tok, &logit) in logits.iter().enumerate() {
                        let mut seq = prefix.clone();
                        seq.push(tok);
                        candidates.push((seq, score + (logit - lse)));
                    }
                }
                candidates.sort_by(|a, b| {
                    b.1.partial_cmp(&a.1)
                        .expect("scores are finite")
                        .then_with(|| a.0.cmp(&b.0))
                });
                candidates.truncate(width);
                alive.clear();
                for cand in candidates {
                    if *cand.0.last().unwrap() == EOS {
                        finished.push(cand);
                    } else {
                        alive.push(cand);
                    }
                }
            }
            let pool = if finished.is_empty() { alive } else { finished };
            pool.into_iter()
                .max_by(|a, b| {
                    a.1.partial_cmp(&b.1)
                        .expect("scores are finite")
                        .then_with(|| b.0.cmp(&a.0))
                })
                .map(|(seq, _)| seq)
                .ok_or_else(|| Error::numeric("beam search produced no sequences".to_string()))
        }
    }
}
