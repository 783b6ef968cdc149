//! The dual-branch terminology encoder: a unified sequence of projected
//! terminology embeddings followed by projected context features (visual
//! grid cells or textbook tokens) runs through a per-branch transformer
//! stack; the front rows come back out as updated terminology features,
//! which also feed the shared sigmoid classifier head.

use crate::layers::{segment_isolation_mask, AttentionRecord, Fwd, LayerAttention};
use crate::model::ModelConfig;
use crate::scalar::Scalar;
use crate::tensor::TensorId;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Branch {
    Visual,
    Textual,
}

impl Branch {
    pub fn prefix(self) -> &'static str {
        match self {
            Branch::Visual => "vis.",
            Branch::Textual => "txt.",
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Branch::Visual => "visual",
            Branch::Textual => "textual",
        }
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct EncodeOptions {
    /// Ablation hook: block attention across the terminology/context
    /// boundary, making terminology features independent of context.
    pub isolate_segments: bool,
    /// Capture per-layer, per-head attention logits and probabilities.
    pub record: bool,
}

pub struct EncodeResult {
    pub full: TensorId,
    pub term_feats: TensorId,
    pub attention: Option<AttentionRecord>,
}

/// Per-cell affine map from raw grid channels to visual features.
/// `grid` is row-major cell-major: cell (r, c) occupies the
/// `channels`-wide chunk at index (r·grid_w + c)·channels.
pub fn patch_embed<S: Scalar>(
    fwd: &mut Fwd<'_, S>,
    cfg: &ModelConfig,
    grid: &[f32],
) -> TensorId {
    let n_v = cfg.n_visual();
    assert_eq!(
        grid.len(),
        n_v * cfg.channels,
        "image grid has {} values, expected {}x{}x{}",
        grid.len(),
        cfg.grid_h,
        cfg.grid_w,
        cfg.channels
    );
    let data: Vec<S> = grid.iter().map(|&x| S::from_f32(x)).collect();
    let img = fwd.tape.leaf_from(n_v, cfg.channels, &data);
    fwd.linear(img, "patch.w", "patch.b")
}

fn projected_terms<S: Scalar>(fwd: &mut Fwd<'_, S>, branch: Branch) -> TensorId {
    let p = branch.prefix();
    let table = fwd.param("term.table");
    let proj = fwd.linear(table, &format!("{p}term_proj.w"), &format!("{p}term_proj.b"));
    let seg = fwd.param(&format!("{p}seg.term"));
    fwd.tape.add_bias(proj, seg)
}

/// Unified visual-terminological sequence: projected terminology rows,
/// then projected grid cells with 2-D position embeddings. Terminology
/// rows carry no positions (the inventory is a set).
pub fn build_unified_visual<S: Scalar>(
    fwd: &mut Fwd<'_, S>,
    cfg: &ModelConfig,
    visual_ctx: TensorId,
) -> TensorId {
    let n_v = fwd.tape.value(visual_ctx).rows;
    assert!(n_v >= 1, "unified sequence requires nonempty context");
    assert_eq!(n_v, cfg.n_visual(), "visual context length mismatch");
    let term = projected_terms(fwd, Branch::Visual);
    let ctx = fwd.linear(visual_ctx, "vis.ctx_proj.w", "vis.ctx_proj.b");
    let rows: Vec<usize> = (0..n_v).map(|i| i / cfg.grid_w).collect();
    let cols: Vec<usize> = (0..n_v).map(|i| i % cfg.grid_w).collect();
    let row_table = fwd.param("vis.pos.row");
    let col_table = fwd.param("vis.pos.col");
    let pos_r = fwd.tape.embed(row_table, &rows);
    let pos_c = fwd.tape.embed(col_table, &cols);
    let pos = fwd.tape.add(pos_r, pos_c);
    let ctx = fwd.tape.add(ctx, pos);
    let seg = fwd.param("vis.seg.ctx");
    let ctx = fwd.tape.add_bias(ctx, seg);
    fwd.tape.concat_rows(&[term, ctx])
}

/// Unified textual-terminological sequence: projected terminology rows,
/// then projected textbook token embeddings with 1-D positions.
pub fn build_unified_textual<S: Scalar>(
    fwd: &mut Fwd<'_, S>,
    cfg: &ModelConfig,
    ctx_tokens: &[usize],
) -> TensorId {
    assert!(
        !ctx_tokens.is_empty(),
        "unified sequence requires nonempty context"
    );
    assert!(
        ctx_tokens.len() <= cfg.max_len,
        "textbook context length {} exceeds max_len {}",
        ctx_tokens.len(),
        cfg.max_len
    );
    let term = projected_terms(fwd, Branch::Textual);
    let table = fwd.param("txt.tok_table");
    let emb = fwd.tape.embed(table, ctx_tokens);
    let ctx = fwd.linear(emb, "txt.ctx_proj.w", "txt.ctx_proj.b");
    let positions: Vec<usize> = (0..ctx_tokens.len()).collect();
    let pos_table = fwd.param("txt.pos.ctx");
    let pos = fwd.tape.embed(pos_table, &positions);
    let ctx = fwd.tape.add(ctx, pos);
    let seg = fwd.param("txt.seg.ctx");
    let ctx = fwd.tape.add_bias(ctx, seg);
    fwd.tape.concat_rows(&[term, ctx])
}

/// Run the branch's encoder stack over the unified sequence and slice
/// out the front terminology rows.
pub fn encode<S: Scalar>(
    fwd: &mut Fwd<'_, S>,
    cfg: &ModelConfig,
    branch: Branch,
    unified: TensorId,
    opts: EncodeOptions,
) -> EncodeResult {
    let p = branch.prefix();
    let len = fwd.tape.value(unified).rows;
    let mask = opts
        .isolate_segments
        .then(|| segment_isolation_mask(cfg.n_terms, len));
    let mut record = opts.record.then(AttentionRecord::default);
    let mut x = unified;
    for i in 0..cfg.encoder_layers {
        let mut layer_rec = record.as_ref().map(|_| LayerAttention::default());
        x = fwd.encoder_layer(
            &format!("{p}l{i}."),
            x,
            cfg.heads,
            mask.as_deref(),
            layer_rec.as_mut(),
        );
        if let (Some(rec), Some(layer)) = (record.as_mut(), layer_rec) {
            rec.layers.push(layer);
        }
    }
    let full = fwd.layer_norm(x, &format!("{p}ln_f"));
    let term_feats = fwd.tape.slice_rows(full, 0, cfg.n_terms);
    EncodeResult {
        full,
        term_feats,
        attention: record,
    }
}

/// Per-terminology abnormality logits: one shared affine head applied to
/// every terminology feature row.
pub fn classify<S: Scalar>(fwd: &mut Fwd<'_, S>, term_feats: TensorId) -> TensorId {
    fwd.linear(term_feats, "cls.w", "cls.b")
}

/// Mean binary cross-entropy between sigmoid(logits) and the multi-hot
/// labels, computed from logits for stability.
pub fn classification_loss<S: Scalar>(
    fwd: &mut Fwd<'_, S>,
    logits: TensorId,
    labels: &[f32],
) -> TensorId {
    for &y in labels {
        assert!(
            y == 0.0 || y == 1.0,
            "classification label {y} outside {{0, 1}}"
        );
    }
    let t = fwd.tape.value(logits);
    assert_eq!(
        t.data.len(),
        labels.len(),
        "got {} logits for {} labels",
        t.data.len(),
        labels.len()
    );
    let targets: Vec<S> = labels.iter().map(|&y| S::from_f32(y)).collect();
    fwd.tape.bce_logits(logits, &targets)
}
