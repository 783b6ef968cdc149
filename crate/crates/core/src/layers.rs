//! Transformer building blocks over the tape: scaled-dot attention,
//! multi-head projections, position-wise feed-forward, and the pre-norm
//! encoder layer / decoder block (norm → sublayer → residual add).

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::optim::{Binding, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor, TensorId};

pub const LN_EPS: f64 = 1e-5;

/// Attention weights captured during a forward pass, per head: the
/// scaled pre-softmax logits and the resulting probabilities.
#[derive(Clone, Debug)]
pub struct HeadAttention {
    pub rows: usize,
    pub cols: usize,
    pub logits: Vec<f32>,
    pub probs: Vec<f32>,
}

#[derive(Clone, Debug, Default)]
pub struct LayerAttention {
    pub heads: Vec<HeadAttention>,
}

#[derive(Clone, Debug, Default)]
pub struct AttentionRecord {
    pub layers: Vec<LayerAttention>,
}

/// Scaled dot-product attention: softmax(q kᵀ / sqrt(d_k)) v, optionally
/// masked. Returns (probabilities, output); the probabilities id lets
/// callers record or inspect the attention map.
pub fn attention_core<S: Scalar>(
    tape: &mut Tape<S>,
    q: TensorId,
    k: TensorId,
    v: TensorId,
    mask: Option<&[bool]>,
) -> (TensorId, TensorId) {
    let dk = tape.value(q).cols;
    assert_eq!(dk, tape.value(k).cols, "attention query/key width mismatch");
    assert_eq!(
        tape.value(k).rows,
        tape.value(v).rows,
        "attention key/value length mismatch"
    );
    let scores = tape.matmul_nt(q, k);
    let scaled = tape.scale(scores, S::from_f64(1.0 / (dk as f64).sqrt()));
    let probs = match mask {
        Some(m) => tape.masked_softmax(scaled, m.to_vec()),
        None => tape.softmax(scaled),
    };
    let out = tape.matmul(probs, v);
    (probs, out)
}

/// Causal mask over an n×n score matrix: position i may attend to j ≤ i.
pub fn causal_mask(n: usize) -> Vec<bool> {
    let mut m = vec![false; n * n];
    for i in 0..n {
        for j in 0..=i {
            m[i * n + j] = true;
        }
    }
    m
}

/// Ablation mask blocking attention across the terminology/context
/// boundary: position i attends only within its own segment.
pub fn segment_isolation_mask(boundary: usize, len: usize) -> Vec<bool> {
    let mut m = vec![false; len * len];
    for i in 0..len {
        for j in 0..len {
            if (i < boundary) == (j < boundary) {
                m[i * len + j] = true;
            }
        }
    }
    m
}

/// Everything a forward pass needs: the tape being built, the parameter
/// store, the name→leaf binding, and the (usually disabled) dropout
/// state.
pub struct Fwd<'a, S: Scalar> {
    pub tape: &'a mut Tape<S>,
    pub store: &'a ParamStore<S>,
    pub binding: &'a mut Binding,
    pub dropout: f64,
    pub rng: Option<&'a mut ChaCha8Rng>,
}

impl<'a, S: Scalar> Fwd<'a, S> {
    pub fn new(
        tape: &'a mut Tape<S>,
        store: &'a ParamStore<S>,
        binding: &'a mut Binding,
    ) -> Self {
        Fwd {
            tape,
            store,
            binding,
            dropout: 0.0,
            rng: None,
        }
    }

    pub fn param(&mut self, name: &str) -> TensorId {
        self.store.bind(self.tape, self.binding, name)
    }

    /// x @ W + b.
    pub fn linear(&mut self, x: TensorId, w_name: &str, b_name: &str) -> TensorId {
        let w = self.param(w_name);
        let b = self.param(b_name);
        let xw = self.tape.matmul(x, w);
        self.tape.add_bias(xw, b)
    }

    /// Layer norm with parameters `{prefix}.g` / `{prefix}.b`.
    pub fn layer_norm(&mut self, x: TensorId, prefix: &str) -> TensorId {
        let g = self.param(&format!("{prefix}.g"));
        let b = self.param(&format!("{prefix}.b"));
        self.tape.layer_norm(x, g, b, S::from_f64(LN_EPS))
    }

    /// Inverted dropout on sublayer outputs; identity when the rate is 0.
    pub fn maybe_dropout(&mut self, x: TensorId) -> TensorId {
        if self.dropout == 0.0 {
            return x;
        }
        let rng = self
            .rng
            .as_deref_mut()
            .expect("dropout rate > 0 requires an RNG");
        let t = self.tape.value(x);
        let (r, c) = (t.rows, t.cols);
        let keep = 1.0 - self.dropout;
        let scale = S::from_f64(1.0 / keep);
        let data: Vec<S> = (0..r * c)
            .map(|_| {
                if rng.gen::<f64>() < keep {
                    scale
                } else {
                    S::ZERO
                }
            })
            .collect();
        let mask = self.tape.leaf(Tensor::new(r, c, data));
        self.tape.mul(x, mask)
    }

    /// W_2 · relu(W_1 x + b_1) + b_2 with parameters
    /// `{prefix}ff.w1/b1/w2/b2`.
    pub fn feed_forward(&mut self, x: TensorId, prefix: &str) -> TensorId {
        let h = self.linear(x, &format!("{prefix}ff.w1"), &format!("{prefix}ff.b1"));
        let r = self.tape.relu(h);
        let out = self.linear(r, &format!("{prefix}ff.w2"), &format!("{prefix}ff.b2"));
        self.maybe_dropout(out)
    }

    /// Multi-head attention with parameters
    /// `{prefix}wq/bq/wk/bk/wv/bv/wo/bo`. Queries come from `q_src`,
    /// keys and values from `kv_src`. The same mask applies per head.
    pub fn multi_head(
        &mut self,
        prefix: &str,
        q_src: TensorId,
        kv_src: TensorId,
        heads: usize,
        mask: Option<&[bool]>,
        mut rec: Option<&mut LayerAttention>,
    ) -> TensorId {
        let d = self.tape.value(q_src).cols;
        assert!(
            heads >= 1 && d % heads == 0,
            "model width {d} not divisible by {heads} heads"
        );
        let dk = d / heads;
        let q = self.linear(q_src, &format!("{prefix}wq"), &format!("{prefix}bq"));
        let k = self.linear(kv_src, &format!("{prefix}wk"), &format!("{prefix}bk"));
        let v = self.linear(kv_src, &format!("{prefix}wv"), &format!("{prefix}bv"));
        let mut parts = Vec::with_capacity(heads);
        for h in 0..heads {
            let qh = self.tape.slice_cols(q, h * dk, dk);
            let kh = self.tape.slice_cols(k, h * dk, dk);
            let vh = self.tape.slice_cols(v, h * dk, dk);
            let scores = self.tape.matmul_nt(qh, kh);
            let scaled = self
                .tape
                .scale(scores, S::from_f64(1.0 / (dk as f64).sqrt()));
            let probs = match mask {
                Some(m) => self.tape.masked_softmax(scaled, m.to_vec()),
                None => self.tape.softmax(scaled),
            };
            if let Some(layer) = rec.as_deref_mut() {
                let lt = self.tape.value(scaled);
                let pt = self.tape.value(probs);
                layer.heads.push(HeadAttention {
                    rows: lt.rows,
                    cols: lt.cols,
                    logits: lt.data.iter().map(|x| x.to_f32()).collect(),
                    probs: pt.data.iter().map(|x| x.to_f32()).collect(),
                });
            }
            parts.push(self.tape.matmul(probs, vh));
        }
        let ctx = self.tape.concat_cols(&parts);
        let out = self.linear(ctx, &format!("{prefix}wo"), &format!("{prefix}bo"));
        self.maybe_dropout(out)
    }

    /// Pre-norm encoder layer with parameters under `{prefix}`:
    /// x + attn(ln1(x)), then + ff(ln2(·)).
    pub fn encoder_layer(
        &mut self,
        prefix: &str,
        x: TensorId,
        heads: usize,
        mask: Option<&[bool]>,
        rec: Option<&mut LayerAttention>,
    ) -> TensorId {
        let a_in = self.layer_norm(x, &format!("{prefix}ln1"));
        let a = self.multi_head(&format!("{prefix}attn."), a_in, a_in, heads, mask, rec);
        let x1 = self.tape.add(x, a);
        let f_in = self.layer_norm(x1, &format!("{prefix}ln2"));
        let f = self.feed_forward(f_in, prefix);
        self.tape.add(x1, f)
    }

    /// Pre-norm decoder block under `{prefix}`: causal self-attention,
    /// cross-attention with keys/values from the terminology features,
    /// then feed-forward.
    pub fn decoder_block(
        &mut self,
        prefix: &str,
        h: TensorId,
        term_feats: TensorId,
        heads: usize,
    ) -> TensorId {
        assert!(
            self.tape.value(term_feats).rows >= 1,
            "decoder block requires nonempty terminology features"
        );
        let n = self.tape.value(h).rows;
        let mask = causal_mask(n);
        let s_in = self.layer_norm(h, &format!("{prefix}ln1"));
        let s = self.multi_head(
            &format!("{prefix}self."),
            s_in,
            s_in,
            heads,
            Some(&mask),
            None,
        );
        let h1 = self.tape.add(h, s);
        let c_in = self.layer_norm(h1, &format!("{prefix}ln2"));
        let c = self.multi_head(
            &format!("{prefix}cross."),
            c_in,
            term_feats,
            heads,
            None,
            None,
        );
        let h2 = self.tape.add(h1, c);
        let f_in = self.layer_norm(h2, &format!("{prefix}ln3"));
        let f = self.feed_forward(f_in, prefix);
        self.tape.add(h2, f)
    }
}
