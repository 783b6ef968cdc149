//! Arena-based reverse-mode autodiff over dense row-major matrices.
//!
//! A [`Tape`] owns every tensor produced during a forward pass together
//! with the op that produced it. [`Tape::backward`] sweeps the arena in
//! reverse, allocating gradient buffers lazily so tensors that do not
//! influence the loss cost nothing. The graph is rebuilt from scratch on
//! every forward pass; parameters enter as leaves.

use crate::scalar::Scalar;

pub type TensorId = usize;

#[derive(Clone, Debug)]
pub struct Tensor<S> {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<S>,
}

impl<S: Scalar> Tensor<S> {
    pub fn new(rows: usize, cols: usize, data: Vec<S>) -> Self {
        assert_eq!(
            data.len(),
            rows * cols,
            "tensor data length {} does not match shape {}x{}",
            data.len(),
            rows,
            cols
        );
        Tensor { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor {
            rows,
            cols,
            data: vec![S::ZERO; rows * cols],
        }
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize) -> S {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[S] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }
}

enum Op<S> {
    Leaf,
    /// C = A @ B
    Matmul { a: TensorId, b: TensorId },
    /// C = A @ B^T
    MatmulNT { a: TensorId, b: TensorId },
    Add { a: TensorId, b: TensorId },
    Sub { a: TensorId, b: TensorId },
    Mul { a: TensorId, b: TensorId },
    /// Row-broadcast add of a 1xC bias to an RxC matrix.
    AddBias { a: TensorId, bias: TensorId },
    Scale { a: TensorId, c: S },
    Relu { a: TensorId },
    Sigmoid { a: TensorId },
    /// Row-wise stable softmax.
    Softmax { a: TensorId },
    /// Row-wise softmax restricted to positions where the mask was true;
    /// blocked positions got probability exactly zero, so backward needs
    /// only the stored output, not the mask itself.
    MaskedSoftmax { a: TensorId },
    /// Per-row normalization with per-column affine parameters.
    LayerNorm {
        a: TensorId,
        gain: TensorId,
        bias: TensorId,
        eps: S,
    },
    /// Gather rows of `table` at `ids`; backward scatter-adds.
    Embed { table: TensorId, ids: Vec<usize> },
    SliceRows { a: TensorId, start: usize },
    SliceCols { a: TensorId, start: usize },
    ConcatRows { parts: Vec<TensorId> },
    ConcatCols { parts: Vec<TensorId> },
    SumAll { a: TensorId },
    /// Sum over rows of -log p(target | row logits); rows whose target
    /// equals `pad` are skipped.
    TokenNll {
        logits: TensorId,
        targets: Vec<usize>,
        pad: usize,
    },
    /// Mean binary cross-entropy on logits (stable softplus form).
    BceLogits { logits: TensorId, targets: Vec<S> },
}

pub struct Tape<S: Scalar> {
    tensors: Vec<Tensor<S>>,
    ops: Vec<Op<S>>,
    grads: Vec<Option<Vec<S>>>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape {
            tensors: Vec::new(),
            ops: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn value(&self, id: TensorId) -> &Tensor<S> {
        &self.tensors[id]
    }

    /// Value of a 1x1 tensor.
    pub fn scalar(&self, id: TensorId) -> S {
        let t = &self.tensors[id];
        assert_eq!(
            t.data.len(),
            1,
            "scalar() on a {}x{} tensor",
            t.rows,
            t.cols
        );
        t.data[0]
    }

    pub fn grad(&self, id: TensorId) -> Option<&[S]> {
        self.grads.get(id).and_then(|g| g.as_deref())
    }

    fn push(&mut self, t: Tensor<S>, op: Op<S>) -> TensorId {
        self.tensors.push(t);
        self.ops.push(op);
        self.tensors.len() - 1
    }

    // ───────────────────────── graph construction ─────────────────────────

    pub fn leaf(&mut self, t: Tensor<S>) -> TensorId {
        self.push(t, Op::Leaf)
    }

    pub fn leaf_from(&mut self, rows: usize, cols: usize, data: &[S]) -> TensorId {
        self.leaf(Tensor::new(rows, cols, data.to_vec()))
    }

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let (m, k) = (self.tensors[a].rows, self.tensors[a].cols);
        let (k2, n) = (self.tensors[b].rows, self.tensors[b].cols);
        assert_eq!(k, k2, "matmul shape mismatch: {m}x{k} @ {k2}x{n}");
        let mut out = Tensor::zeros(m, n);
        mm_nn(
            &self.tensors[a].data,
            &self.tensors[b].data,
            &mut out.data,
            m,
            k,
            n,
        );
        self.push(out, Op::Matmul { a, b })
    }

    /// C = A @ B^T; `a` is MxK, `b` is NxK, result MxN.
    pub fn matmul_nt(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let (m, k) = (self.tensors[a].rows, self.tensors[a].cols);
        let (n, k2) = (self.tensors[b].rows, self.tensors[b].cols);
        assert_eq!(k, k2, "matmul_nt shape mismatch: {m}x{k} @ ({n}x{k2})^T");
        let mut out = Tensor::zeros(m, n);
        mm_nt(
            &self.tensors[a].data,
            &self.tensors[b].data,
            &mut out.data,
            m,
            k,
            n,
        );
        self.push(out, Op::MatmulNT { a, b })
    }

    fn binary_same_shape(&self, a: TensorId, b: TensorId, what: &str) -> (usize, usize) {
        let (ta, tb) = (&self.tensors[a], &self.tensors[b]);
        assert!(
            ta.rows == tb.rows && ta.cols == tb.cols,
            "{what} shape mismatch: {}x{} vs {}x{}",
            ta.rows,
            ta.cols,
            tb.rows,
            tb.cols
        );
        (ta.rows, ta.cols)
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let (r, c) = self.binary_same_shape(a, b, "add");
        let data = self.tensors[a]
            .data
            .iter()
            .zip(&self.tensors[b].data)
            .map(|(&x, &y)| x + y)
            .collect();
        self.push(Tensor::new(r, c, data), Op::Add { a, b })
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let (r, c) = self.binary_same_shape(a, b, "sub");
        let data = self.tensors[a]
            .data
            .iter()
            .zip(&self.tensors[b].data)
            .map(|(&x, &y)| x - y)
            .collect();
        self.push(Tensor::new(r, c, data), Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let (r, c) = self.binary_same_shape(a, b, "mul");
        let data = self.tensors[a]
            .data
            .iter()
            .zip(&self.tensors[b].data)
            .map(|(&x, &y)| x * y)
            .collect();
        self.push(Tensor::new(r, c, data), Op::Mul { a, b })
    }

    pub fn add_bias(&mut self, a: TensorId, bias: TensorId) -> TensorId {
        let (r, c) = (self.tensors[a].rows, self.tensors[a].cols);
        let tb = &self.tensors[bias];
        assert!(
            tb.rows == 1 && tb.cols == c,
            "add_bias expects 1x{c} bias, got {}x{}",
            tb.rows,
            tb.cols
        );
        let mut out = Tensor::zeros(r, c);
        for i in 0..r {
            for j in 0..c {
                out.data[i * c + j] = self.tensors[a].data[i * c + j] + tb.data[j];
            }
        }
        self.push(out, Op::AddBias { a, bias })
    }

    pub fn scale(&mut self, a: TensorId, c: S) -> TensorId {
        let t = &self.tensors[a];
        let data = t.data.iter().map(|&x| x * c).collect();
        let out = Tensor::new(t.rows, t.cols, data);
        self.push(out, Op::Scale { a, c })
    }

    pub fn relu(&mut self, a: TensorId) -> TensorId {
        let t = &self.tensors[a];
        let data = t.data.iter().map(|&x| x.max(S::ZERO)).collect();
        let out = Tensor::new(t.rows, t.cols, data);
        self.push(out, Op::Relu { a })
    }

    pub fn sigmoid(&mut self, a: TensorId) -> TensorId {
        let t = &self.tensors[a];
        let data = t.data.iter().map(|&x| sigmoid(x)).collect();
        let out = Tensor::new(t.rows, t.cols, data);
        self.push(out, Op::Sigmoid { a })
    }

    pub fn softmax(&mut self, a: TensorId) -> TensorId {
        let t = &self.tensors[a];
        let (r, c) = (t.rows, t.cols);
        let mut out = Tensor::zeros(r, c);
        for i in 0..r {
            softmax_row(t.row(i), &mut out.data[i * c..(i + 1) * c]);
        }
        self.push(out, Op::Softmax { a })
    }

    /// `mask` is row-major, same shape as `a`; true means the position may
    /// receive probability mass. Panics if any row is entirely blocked.
    pub fn masked_softmax(&mut self, a: TensorId, mask: Vec<bool>) -> TensorId {
        let t = &self.tensors[a];
        let (r, c) = (t.rows, t.cols);
        assert_eq!(
            mask.len(),
            r * c,
            "mask length {} does not match {}x{}",
            mask.len(),
            r,
            c
        );
        let mut out = Tensor::zeros(r, c);
        for i in 0..r {
            let x = t.row(i);
            let m = &mask[i * c..(i + 1) * c];
            let mut hi: Option<S> = None;
            for j in 0..c {
                if m[j] {
                    hi = Some(match hi {
                        Some(h) => h.max(x[j]),
                        None => x[j],
                    });
                }
            }
            let hi = hi.unwrap_or_else(|| panic!("masked_softmax: row {i} is fully blocked"));
            let mut sum = S::ZERO;
            for j in 0..c {
                if m[j] {
                    let e = (x[j] - hi).exp();
                    out.data[i * c + j] = e;
                    sum += e;
                }
            }
            for j in 0..c {
                out.data[i * c + j] /= sum;
            }
        }
        self.push(out, Op::MaskedSoftmax { a })
    }

    pub fn layer_norm(&mut self, a: TensorId, gain: TensorId, bias: TensorId, eps: S) -> TensorId {
        let (r, c) = (self.tensors[a].rows, self.tensors[a].cols);
        for (name, id) in [("gain", gain), ("bias", bias)] {
            let t = &self.tensors[id];
            assert!(
                t.rows == 1 && t.cols == c,
                "layer_norm {name} must be 1x{c}, got {}x{}",
                t.rows,
                t.cols
            );
        }
        let mut out = Tensor::zeros(r, c);
        for i in 0..r {
            let x = self.tensors[a].row(i);
            let (mean, inv) = row_norm_stats(x, eps);
            for j in 0..c {
                let xhat = (x[j] - mean) * inv;
                out.data[i * c + j] =
                    self.tensors[gain].data[j] * xhat + self.tensors[bias].data[j];
            }
        }
        self.push(out, Op::LayerNorm { a, gain, bias, eps })
    }

    pub fn embed(&mut self, table: TensorId, ids: &[usize]) -> TensorId {
        let t = &self.tensors[table];
        let c = t.cols;
        let mut out = Tensor::zeros(ids.len(), c);
        for (i, &id) in ids.iter().enumerate() {
            assert!(
                id < t.rows,
                "embed id {id} out of range for table with {} rows",
                t.rows
            );
            out.data[i * c..(i + 1) * c].copy_from_slice(t.row(id));
        }
        self.push(
            out,
            Op::Embed {
                table,
                ids: ids.to_vec(),
            },
        )
    }

    pub fn slice_rows(&mut self, a: TensorId, start: usize, len: usize) -> TensorId {
        let t = &self.tensors[a];
        assert!(
            start + len <= t.rows,
            "slice_rows {start}..{} out of range for {} rows",
            start + len,
            t.rows
        );
        let c = t.cols;
        let data = t.data[start * c..(start + len) * c].to_vec();
        self.push(Tensor::new(len, c, data), Op::SliceRows { a, start })
    }

    pub fn slice_cols(&mut self, a: TensorId, start: usize, len: usize) -> TensorId {
        let t = &self.tensors[a];
        assert!(
            start + len <= t.cols,
            "slice_cols {start}..{} out of range for {} cols",
            start + len,
            t.cols
        );
        let mut out = Tensor::zeros(t.rows, len);
        for i in 0..t.rows {
            out.data[i * len..(i + 1) * len]
                .copy_from_slice(&t.row(i)[start..start + len]);
        }
        self.push(out, Op::SliceCols { a, start })
    }

    pub fn concat_rows(&mut self, parts: &[TensorId]) -> TensorId {
        assert!(!parts.is_empty(), "concat_rows of no parts");
        let c = self.tensors[parts[0]].cols;
        let mut rows = 0;
        for &p in parts {
            assert_eq!(
                self.tensors[p].cols, c,
                "concat_rows column mismatch: {} vs {c}",
                self.tensors[p].cols
            );
            rows += self.tensors[p].rows;
        }
        let mut data = Vec::with_capacity(rows * c);
        for &p in parts {
            data.extend_from_slice(&self.tensors[p].data);
        }
        self.push(
            Tensor::new(rows, c, data),
            Op::ConcatRows {
                parts: parts.to_vec(),
            },
        )
    }

    pub fn concat_cols(&mut self, parts: &[TensorId]) -> TensorId {
        assert!(!parts.is_empty(), "concat_cols of no parts");
        let r = self.tensors[parts[0]].rows;
        let mut cols = 0;
        for &p in parts {
            assert_eq!(
                self.tensors[p].rows, r,
                "concat_cols row mismatch: {} vs {r}",
                self.tensors[p].rows
            );
            cols += self.tensors[p].cols;
        }
        let mut out = Tensor::zeros(r, cols);
        for i in 0..r {
            let mut off = 0;
            for &p in parts {
                let pc = self.tensors[p].cols;
                out.data[i * cols + off..i * cols + off + pc]
                    .copy_from_slice(self.tensors[p].row(i));
                off += pc;
            }
        }
        self.push(
            out,
            Op::ConcatCols {
                parts: parts.to_vec(),
            },
        )
    }

    pub fn sum_all(&mut self, a: TensorId) -> TensorId {
        let s = self.tensors[a].data.iter().copied().sum();
        self.push(Tensor::new(1, 1, vec![s]), Op::SumAll { a })
    }

    /// Summed negative log-likelihood of `targets` under row-wise softmax
    /// of `logits`. Rows whose target equals `pad` contribute nothing.
    pub fn token_nll(&mut self, logits: TensorId, targets: &[usize], pad: usize) -> TensorId {
        let t = &self.tensors[logits];
        let (r, c) = (t.rows, t.cols);
        assert_eq!(
            targets.len(),
            r,
            "token_nll targets length {} does not match {r} rows",
            targets.len()
        );
        let mut loss = S::ZERO;
        for (i, &tgt) in targets.iter().enumerate() {
            if tgt == pad {
                continue;
            }
            assert!(tgt < c, "token_nll target {tgt} out of vocab range {c}");
            let x = t.row(i);
            loss += logsumexp(x) - x[tgt];
        }
        self.push(
            Tensor::new(1, 1, vec![loss]),
            Op::TokenNll {
                logits,
                targets: targets.to_vec(),
                pad,
            },
        )
    }

    /// Mean binary cross-entropy between `targets` (0/1 values) and
    /// sigmoid of `logits`, computed in the numerically stable form
    /// max(z,0) - z*t + ln(1 + exp(-|z|)).
    pub fn bce_logits(&mut self, logits: TensorId, targets: &[S]) -> TensorId {
        let t = &self.tensors[logits];
        assert_eq!(
            targets.len(),
            t.data.len(),
            "bce_logits targets length {} does not match {}x{}",
            targets.len(),
            t.rows,
            t.cols
        );
        let n = S::from_usize(targets.len());
        let mut loss = S::ZERO;
        for (&z, &y) in t.data.iter().zip(targets) {
            loss += z.max(S::ZERO) - z * y + (S::ONE + (-z.abs()).exp()).ln();
        }
        loss /= n;
        self.push(
            Tensor::new(1, 1, vec![loss]),
            Op::BceLogits {
                logits,
                targets: targets.to_vec(),
            },
        )
    }

    // ───────────────────────── backward ─────────────────────────

    /// Reverse sweep from a scalar root. Gradients of all reachable
    /// tensors (leaves included) are available via [`Tape::grad`]
    /// afterwards.
    pub fn backward(&mut self, root: TensorId) {
        {
            let t = &self.tensors[root];
            assert_eq!(
                t.data.len(),
                1,
                "backward root must be 1x1, got {}x{}",
                t.rows,
                t.cols
            );
        }
        self.grads = vec![None; self.tensors.len()];
        self.grads[root] = Some(vec![S::ONE]);

        let Tape {
            tensors,
            ops,
            grads,
        } = self;
        let tensors: &[Tensor<S>] = tensors;

        for id in (0..=root).rev() {
            let Some(gout) = grads[id].take() else {
                continue;
            };
            match &ops[id] {
                Op::Leaf => {}
                Op::Matmul { a, b } => {
                    let (m, k) = (tensors[*a].rows, tensors[*a].cols);
                    let n = tensors[*b].cols;
                    mm_nt(&gout, &tensors[*b].data, gbuf(grads, *a, m * k), m, n, k);
                    mm_tn(&tensors[*a].data, &gout, gbuf(grads, *b, k * n), m, k, n);
                }
                Op::MatmulNT { a, b } => {
                    let (m, k) = (tensors[*a].rows, tensors[*a].cols);
                    let n = tensors[*b].rows;
                    mm_nn(&gout, &tensors[*b].data, gbuf(grads, *a, m * k), m, n, k);
                    mm_tn(&gout, &tensors[*a].data, gbuf(grads, *b, n * k), m, n, k);
                }
                Op::Add { a, b } => {
                    for (&ga, d) in gout.iter().zip(gbuf(grads, *a, gout.len())) {
                        *d += ga;
                    }
                    for (&ga, d) in gout.iter().zip(gbuf(grads, *b, gout.len())) {
                        *d += ga;
                    }
                }
                Op::Sub { a, b } => {
                    for (&ga, d) in gout.iter().zip(gbuf(grads, *a, gout.len())) {
                        *d += ga;
                    }
                    for (&ga, d) in gout.iter().zip(gbuf(grads, *b, gout.len())) {
                        *d -= ga;
                    }
                }
                Op::Mul { a, b } => {
                    let (va, vb) = (&tensors[*a].data, &tensors[*b].data);
                    {
                        let da = gbuf(grads, *a, gout.len());
                        for i in 0..gout.len() {
                            da[i] += gout[i] * vb[i];
                        }
                    }
                    let db = gbuf(grads, *b, gout.len());
                    for i in 0..gout.len() {
                        db[i] += gout[i] * va[i];
                    }
                }
                Op::AddBias { a, bias } => {
                    let c = tensors[*a].cols;
                    for (&ga, d) in gout.iter().zip(gbuf(grads, *a, gout.len())) {
                        *d += ga;
                    }
                    let db = gbuf(grads, *bias, c);
                    for (i, &ga) in gout.iter().enumerate() {
                        db[i % c] += ga;
                    }
                }
                Op::Scale { a, c } => {
                    let c = *c;
                    for (&ga, d) in gout.iter().zip(gbuf(grads, *a, gout.len())) {
                        *d += ga * c;
                    }
                }
                Op::Relu { a } => {
                    let x = &tensors[*a].data;
                    let da = gbuf(grads, *a, gout.len());
                    for i in 0..gout.len() {
                        if x[i] > S::ZERO {
                            da[i] += gout[i];
                        }
                    }
                }
                Op::Sigmoid { a } => {
                    let y = &tensors[id].data;
                    let da = gbuf(grads, *a, gout.len());
                    for i in 0..gout.len() {
                        da[i] += gout[i] * y[i] * (S::ONE - y[i]);
                    }
                }
                Op::Softmax { a } | Op::MaskedSoftmax { a } => {
                    // dx_j = y_j * (g_j - sum_k g_k y_k); blocked positions
                    // have y = 0 and therefore zero gradient.
                    let y = &tensors[id].data;
                    let (r, c) = (tensors[id].rows, tensors[id].cols);
                    let da = gbuf(grads, *a, r * c);
                    for i in 0..r {
                        let (ys, gs) = (&y[i * c..(i + 1) * c], &gout[i * c..(i + 1) * c]);
                        let dot: S = ys.iter().zip(gs).map(|(&yv, &gv)| yv * gv).sum();
                        for j in 0..c {
                            da[i * c + j] += ys[j] * (gs[j] - dot);
                        }
                    }
                }
                Op::LayerNorm { a, gain, bias, eps } => {
                    let (r, c) = (tensors[*a].rows, tensors[*a].cols);
                    let g = &tensors[*gain].data;
                    let inv_c = S::ONE / S::from_usize(c);
                    for i in 0..r {
                        let x = tensors[*a].row(i);
                        let (mean, inv) = row_norm_stats(x, *eps);
                        let go = &gout[i * c..(i + 1) * c];
                        // dxhat, and the two row means needed for dx
                        let mut m_dxhat = S::ZERO;
                        let mut m_dxhat_xhat = S::ZERO;
                        for j in 0..c {
                            let xhat = (x[j] - mean) * inv;
                            let dxhat = go[j] * g[j];
                            m_dxhat += dxhat;
                            m_dxhat_xhat += dxhat * xhat;
                        }
                        m_dxhat *= inv_c;
                        m_dxhat_xhat *= inv_c;
                        {
                            let da = gbuf(grads, *a, r * c);
                            for j in 0..c {
                                let xhat = (x[j] - mean) * inv;
                                let dxhat = go[j] * g[j];
                                da[i * c + j] += inv * (dxhat - m_dxhat - xhat * m_dxhat_xhat);
                            }
                        }
                        {
                            let dg = gbuf(grads, *gain, c);
                            for j in 0..c {
                                let xhat = (x[j] - mean) * inv;
                                dg[j] += go[j] * xhat;
                            }
                        }
                        let db = gbuf(grads, *bias, c);
                        for j in 0..c {
                            db[j] += go[j];
                        }
                    }
                }
                Op::Embed { table, ids } => {
                    let (tr, c) = (tensors[*table].rows, tensors[*table].cols);
                    let dt = gbuf(grads, *table, tr * c);
                    for (i, &tok) in ids.iter().enumerate() {
                        for j in 0..c {
                            dt[tok * c + j] += gout[i * c + j];
                        }
                    }
                }
                Op::SliceRows { a, start } => {
                    let c = tensors[*a].cols;
                    let da = gbuf(grads, *a, tensors[*a].data.len());
                    for (i, &g) in gout.iter().enumerate() {
                        da[start * c + i] += g;
                    }
                }
                Op::SliceCols { a, start } => {
                    let (ar, ac) = (tensors[*a].rows, tensors[*a].cols);
                    let oc = tensors[id].cols;
                    let da = gbuf(grads, *a, ar * ac);
                    for i in 0..ar {
                        for j in 0..oc {
                            da[i * ac + start + j] += gout[i * oc + j];
                        }
                    }
                }
                Op::ConcatRows { parts } => {
                    let mut off = 0;
                    for &p in parts {
                        let len = tensors[p].data.len();
                        let dp = gbuf(grads, p, len);
                        for i in 0..len {
                            dp[i] += gout[off + i];
                        }
                        off += len;
                    }
                }
                Op::ConcatCols { parts } => {
                    let r = tensors[id].rows;
                    let cols = tensors[id].cols;
                    let mut off = 0;
                    for &p in parts {
                        let pc = tensors[p].cols;
                        let dp = gbuf(grads, p, r * pc);
                        for i in 0..r {
                            for j in 0..pc {
                                dp[i * pc + j] += gout[i * cols + off + j];
                            }
                        }
                        off += pc;
                    }
                }
                Op::SumAll { a } => {
                    let g = gout[0];
                    for d in gbuf(grads, *a, tensors[*a].data.len()) {
                        *d += g;
                    }
                }
                Op::TokenNll {
                    logits,
                    targets,
                    pad,
                } => {
                    let g = gout[0];
                    let (r, c) = (tensors[*logits].rows, tensors[*logits].cols);
                    let mut probs = vec![S::ZERO; c];
                    for i in 0..r {
                        let tgt = targets[i];
                        if tgt == *pad {
                            continue;
                        }
                        softmax_row(tensors[*logits].row(i), &mut probs);
                        let dl = gbuf(grads, *logits, r * c);
                        for j in 0..c {
                            let ind = if j == tgt { S::ONE } else { S::ZERO };
                            dl[i * c + j] += g * (probs[j] - ind);
                        }
                    }
                }
                Op::BceLogits { logits, targets } => {
                    let g = gout[0] / S::from_usize(targets.len());
                    let z = &tensors[*logits].data;
                    let dl = gbuf(grads, *logits, z.len());
                    for i in 0..z.len() {
                        dl[i] += g * (sigmoid(z[i]) - targets[i]);
                    }
                }
            }
            grads[id] = Some(gout);
        }
    }
}

fn gbuf<S: Scalar>(grads: &mut [Option<Vec<S>>], id: TensorId, len: usize) -> &mut [S] {
    grads[id].get_or_insert_with(|| vec![S::ZERO; len]).as_mut_slice()
}

// ───────────────────────── kernels ─────────────────────────

#[inline]
pub fn sigmoid<S: Scalar>(x: S) -> S {
    if x >= S::ZERO {
        S::ONE / (S::ONE + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::ONE + e)
    }
}

/// Stable row softmax into `out`.
pub fn softmax_row<S: Scalar>(x: &[S], out: &mut [S]) {
    let hi = x.iter().copied().fold(x[0], S::max);
    let mut sum = S::ZERO;
    for (o, &v) in out.iter_mut().zip(x) {
        let e = (v - hi).exp();
        *o = e;
        sum += e;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

pub fn logsumexp<S: Scalar>(x: &[S]) -> S {
    let hi = x.iter().copied().fold(x[0], S::max);
    let sum: S = x.iter().map(|&v| (v - hi).exp()).sum();
    hi + sum.ln()
}

fn row_norm_stats<S: Scalar>(x: &[S], eps: S) -> (S, S) {
    let n = S::from_usize(x.len());
    let mean = x.iter().copied().sum::<S>() / n;
    let var = x.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / n;
    (mean, S::ONE / (var + eps).sqrt())
}

/// out[MxN] += a[MxK] @ b[KxN]
///
/// Four rows of `b` are folded per sweep over the output row, reading
/// and writing `out` once per four multiply-adds instead of once each.
fn mm_nn<S: Scalar>(a: &[S], b: &[S], out: &mut [S], m: usize, k: usize, n: usize) {
    let k4 = k - k % 4;
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        let arow = &a[i * k..(i + 1) * k];
        let mut p = 0;
        while p < k4 {
            let (a0, a1, a2, a3) = (arow[p], arow[p + 1], arow[p + 2], arow[p + 3]);
            let b0 = &b[p * n..(p + 1) * n];
            let b1 = &b[(p + 1) * n..(p + 2) * n];
            let b2 = &b[(p + 2) * n..(p + 3) * n];
            let b3 = &b[(p + 3) * n..(p + 4) * n];
            for j in 0..n {
                orow[j] += (a0 * b0[j] + a1 * b1[j]) + (a2 * b2[j] + a3 * b3[j]);
            }
            p += 4;
        }
        while p < k {
            let av = arow[p];
            let brow = &b[p * n..(p + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
            p += 1;
        }
    }
}

/// out[MxN] += a[MxK] @ b[NxK]^T
///
/// The dot product is accumulated in eight independent lanes; a single
/// running sum would serialize on the FP-add latency chain and cannot
/// be vectorized (float addition is not associative).
fn mm_nt<S: Scalar>(a: &[S], b: &[S], out: &mut [S], m: usize, k: usize, n: usize) {
    const LANES: usize = 8;
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = [S::ZERO; LANES];
            let mut ca = arow.chunks_exact(LANES);
            let mut cb = brow.chunks_exact(LANES);
            for (pa, pb) in (&mut ca).zip(&mut cb) {
                for l in 0..LANES {
                    acc[l] += pa[l] * pb[l];
                }
            }
            let mut dot = acc.iter().copied().fold(S::ZERO, |s, v| s + v);
            for (&va, &vb) in ca.remainder().iter().zip(cb.remainder()) {
                dot += va * vb;
            }
            out[i * n + j] += dot;
        }
    }
}

/// out[KxN] += a[MxK]^T @ b[MxN]
///
/// Four rows of `a`/`b` are folded per sweep over each output row, the
/// same register blocking as [`mm_nn`].
fn mm_tn<S: Scalar>(a: &[S], b: &[S], out: &mut [S], m: usize, k: usize, n: usize) {
    let m4 = m - m % 4;
    let mut i = 0;
    while i < m4 {
        let b0 = &b[i * n..(i + 1) * n];
        let b1 = &b[(i + 1) * n..(i + 2) * n];
        let b2 = &b[(i + 2) * n..(i + 3) * n];
        let b3 = &b[(i + 3) * n..(i + 4) * n];
        for p in 0..k {
            let a0 = a[i * k + p];
            let a1 = a[(i + 1) * k + p];
            let a2 = a[(i + 2) * k + p];
            let a3 = a[(i + 3) * k + p];
            let orow = &mut out[p * n..(p + 1) * n];
            for j in 0..n {
                orow[j] += (a0 * b0[j] + a1 * b1[j]) + (a2 * b2[j] + a3 * b3[j]);
            }
        }
        i += 4;
    }
    while i < m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let orow = &mut out[p * n..(p + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
        i += 1;
    }
}

// ───────────────────────── tests ─────────────────────────
