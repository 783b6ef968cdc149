//! Model configuration, parameter initialization, and whole-model
//! forward passes assembling the two encoder branches, the classifier
//! head, and the shared decoder into the per-procedure training losses.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::decoder;
use crate::encoder::{self, Branch, EncodeOptions};
use crate::error::{Error, Result};
use crate::layers::Fwd;
use crate::optim::{Binding, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor, TensorId};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Shared model width d of both encoders and the decoder.
    pub model_dim: usize,
    pub heads: usize,
    /// Encoder depth per branch.
    pub encoder_layers: usize,
    pub decoder_blocks: usize,
    /// Width of the learned terminology embedding table.
    pub term_dim: usize,
    /// Width of the per-cell visual features produced by the patch embedder.
    pub visual_dim: usize,
    /// Width of the textbook token lookup table.
    pub text_dim: usize,
    pub n_terms: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    pub channels: usize,
    pub vocab_size: usize,
    pub max_len: usize,
    pub dropout: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            model_dim: 64,
            heads: 8,
            encoder_layers: 2,
            decoder_blocks: 2,
            term_dim: 32,
            visual_dim: 32,
            text_dim: 32,
            n_terms: 16,
            grid_h: 7,
            grid_w: 7,
            channels: 4,
            vocab_size: 0, // filled in from the vocabulary
            max_len: 64,
            dropout: 0.0,
        }
    }
}

impl ModelConfig {
    pub fn n_visual(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("model_dim", self.model_dim),
            ("heads", self.heads),
            ("encoder_layers", self.encoder_layers),
            ("decoder_blocks", self.decoder_blocks),
            ("term_dim", self.term_dim),
            ("visual_dim", self.visual_dim),
            ("text_dim", self.text_dim),
            ("n_terms", self.n_terms),
            ("grid_h", self.grid_h),
            ("grid_w", self.grid_w),
            ("channels", self.channels),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::config(format!("model.{name} must be positive")));
            }
        }
        if self.model_dim % self.heads != 0 {
            return Err(Error::config(format!(
                "model.model_dim {} not divisible by model.heads {}",
                self.model_dim, self.heads
            )));
        }
        if self.n_terms > 64 {
            return Err(Error::config(format!(
                "model.n_terms {} exceeds the label-mask limit of 64",
                self.n_terms
            )));
        }
        if self.vocab_size < crate::vocab::RESERVED.len() + 1 {
            return Err(Error::config(format!(
                "model.vocab_size {} too small (reserved tokens plus one)",
                self.vocab_size
            )));
        }
        if self.max_len < 2 {
            return Err(Error::config("model.max_len must be at least 2".to_string()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config(format!(
                "model.dropout {} must lie in [0, 1)",
                self.dropout
            )));
        }
        Ok(())
    }
}

// ───────────────────────── initialization ─────────────────────────

const INIT_SD: f64 = 0.02;

fn gauss<S: Scalar>(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor<S> {
    use rand_distr::{Distribution, Normal};
    let dist = Normal::new(0.0, INIT_SD).unwrap();
    Tensor::new(
        rows,
        cols,
        (0..rows * cols)
            .map(|_| S::from_f64(dist.sample(rng)))
            .collect(),
    )
}

fn register_ln<S: Scalar>(store: &mut ParamStore<S>, prefix: &str, d: usize) {
    store.register(&format!("{prefix}.g"), Tensor::new(1, d, vec![S::ONE; d]));
    store.register(&format!("{prefix}.b"), Tensor::zeros(1, d));
}

fn register_attn<S: Scalar>(
    store: &mut ParamStore<S>,
    rng: &mut ChaCha8Rng,
    prefix: &str,
    d: usize,
) {
    for w in ["wq", "wk", "wv", "wo"] {
        store.register(&format!("{prefix}{w}"), gauss(rng, d, d));
    }
    for b in ["bq", "bk", "bv", "bo"] {
        store.register(&format!("{prefix}{b}"), Tensor::zeros(1, d));
    }
}

fn register_ffn<S: Scalar>(
    store: &mut ParamStore<S>,
    rng: &mut ChaCha8Rng,
    prefix: &str,
    d: usize,
) {
    let dff = 4 * d;
    store.register(&format!("{prefix}ff.w1"), gauss(rng, d, dff));
    store.register(&format!("{prefix}ff.b1"), Tensor::zeros(1, dff));
    store.register(&format!("{prefix}ff.w2"), gauss(rng, dff, d));
    store.register(&format!("{prefix}ff.b2"), Tensor::zeros(1, d));
}

fn register_encoder_branch<S: Scalar>(
    store: &mut ParamStore<S>,
    rng: &mut ChaCha8Rng,
    cfg: &ModelConfig,
    branch: Branch,
) {
    let p = branch.prefix();
    let d = cfg.model_dim;
    let ctx_dim = match branch {
        Branch::Visual => cfg.visual_dim,
        Branch::Textual => cfg.text_dim,
    };
    store.register(&format!("{p}term_proj.w"), gauss(rng, cfg.term_dim, d));
    store.register(&format!("{p}term_proj.b"), Tensor::zeros(1, d));
    store.register(&format!("{p}ctx_proj.w"), gauss(rng, ctx_dim, d));
    store.register(&format!("{p}ctx_proj.b"), Tensor::zeros(1, d));
    store.register(&format!("{p}seg.term"), gauss(rng, 1, d));
    store.register(&format!("{p}seg.ctx"), gauss(rng, 1, d));
    match branch {
        Branch::Visual => {
            store.register(&format!("{p}pos.row"), gauss(rng, cfg.grid_h, d));
            store.register(&format!("{p}pos.col"), gauss(rng, cfg.grid_w, d));
        }
        Branch::Textual => {
            store.register(
                &format!("{p}tok_table"),
                gauss(rng, cfg.vocab_size, cfg.text_dim),
            );
            store.register(&format!("{p}pos.ctx"), gauss(rng, cfg.max_len, d));
        }
    }
    for i in 0..cfg.encoder_layers {
        let lp = format!("{p}l{i}.");
        register_ln(store, &format!("{lp}ln1"), d);
        register_ln(store, &format!("{lp}ln2"), d);
        register_attn(store, rng, &format!("{lp}attn."), d);
        register_ffn(store, rng, &lp, d);
    }
    register_ln(store, &format!("{p}ln_f"), d);
}

/// Create every model parameter in a fixed order. All weight matrices
/// and embedding tables draw from N(0, 0.02); biases start at zero and
/// layer-norm gains at one. Output projections are *not* zeroed so that
/// co-attention is live from the first step.
pub fn init_params<S: Scalar>(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> ParamStore<S> {
    let d = cfg.model_dim;
    let mut store = ParamStore::new();
    store.register("term.table", gauss(rng, cfg.n_terms, cfg.term_dim));
    store.register("cls.w", gauss(rng, d, 1));
    store.register("cls.b", Tensor::zeros(1, 1));
    store.register("patch.w", gauss(rng, cfg.channels, cfg.visual_dim));
    store.register("patch.b", Tensor::zeros(1, cfg.visual_dim));
    register_encoder_branch(&mut store, rng, cfg, Branch::Visual);
    register_encoder_branch(&mut store, rng, cfg, Branch::Textual);
    store.register("dec.tok_table", gauss(rng, cfg.vocab_size, d));
    store.register("dec.pos_table", gauss(rng, cfg.max_len, d));
    for i in 0..cfg.decoder_blocks {
        let bp = format!("dec.b{i}.");
        register_ln(&mut store, &format!("{bp}ln1"), d);
        register_ln(&mut store, &format!("{bp}ln2"), d);
        register_ln(&mut store, &format!("{bp}ln3"), d);
        register_attn(&mut store, rng, &format!("{bp}self."), d);
        register_attn(&mut store, rng, &format!("{bp}cross."), d);
        register_ffn(&mut store, rng, &bp, d);
    }
    register_ln(&mut store, "dec.ln_f", d);
    store
}

// ───────────────────────── procedure parameter sets ─────────────────────────

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Procedure {
    Pretrain,
    Transfer,
}

impl Procedure {
    pub fn name(self) -> &'static str {
        match self {
            Procedure::Pretrain => "pretrain",
            Procedure::Transfer => "transfer",
        }
    }

    /// Which encoder branch the procedure drives.
    pub fn branch(self) -> Branch {
        match self {
            Procedure::Pretrain => Branch::Textual,
            Procedure::Transfer => Branch::Visual,
        }
    }

    /// Name prefixes of the parameters this procedure's forward pass
    /// touches (and therefore updates).
    pub fn param_prefixes(self) -> &'static [&'static str] {
        match self {
            Procedure::Pretrain => &["term.", "cls.", "txt.", "dec."],
            Procedure::Transfer => &["term.", "cls.", "patch.", "vis.", "dec."],
        }
    }
}

/// Parameter indices a procedure updates, in store order.
pub fn touched_indices<S: Scalar>(store: &ParamStore<S>, proc: Procedure) -> Vec<usize> {
    store.indices_with_prefixes(proc.param_prefixes())
}

pub fn touched_names<S: Scalar>(store: &ParamStore<S>, proc: Procedure) -> Vec<String> {
    touched_indices(store, proc)
        .into_iter()
        .map(|i| store.at(i).name.clone())
        .collect()
}

// ───────────────────────── sample views ─────────────────────────

/// A training sample as the forward pass sees it. Pretraining samples
/// carry textbook text; transferring samples carry an image grid and a
/// report. Labels are multi-hot over the terminology inventory.
#[derive(Clone, Debug)]
pub enum SampleView<'a> {
    Pretrain {
        tokens: &'a [usize],
        labels: &'a [f32],
    },
    Transfer {
        grid: &'a [f32],
        tokens: &'a [usize],
        labels: &'a [f32],
    },
}

impl<'a> SampleView<'a> {
    pub fn procedure(&self) -> Procedure {
        match self {
            SampleView::Pretrain { .. } => Procedure::Pretrain,
            SampleView::Transfer { .. } => Procedure::Transfer,
        }
    }

    pub fn tokens(&self) -> &'a [usize] {
        match self {
            SampleView::Pretrain { tokens, .. } | SampleView::Transfer { tokens, .. } => tokens,
        }
    }

    pub fn labels(&self) -> &'a [f32] {
        match self {
            SampleView::Pretrain { labels, .. } | SampleView::Transfer { labels, .. } => labels,
        }
    }
}

/// Encode the sample's context through its branch and return the
/// terminology features.
pub fn encode_sample<S: Scalar>(
    fwd: &mut Fwd<'_, S>,
    cfg: &ModelConfig,
    view: &SampleView<'_>,
    opts: EncodeOptions,
) -> encoder::EncodeResult {
    match view {
        SampleView::Pretrain { tokens, .. } => {
            let u = encoder::build_unified_textual(fwd, cfg, tokens);
            encoder::encode(fwd, cfg, Branch::Textual, u, opts)
        }
        SampleView::Transfer { grid, .. } => {
            let vc = encoder::patch_embed(fwd, cfg, grid);
            let u = encoder::build_unified_visual(fwd, cfg, vc);
            encoder::encode(fwd, cfg, Branch::Visual, u, opts)
        }
    }
}

/// Per-sample loss terms (as tape nodes) plus the non-PAD target count.
pub struct SampleLosses {
    pub cls: TensorId,
    pub lm: TensorId,
    pub target_tokens: usize,
}

pub fn sample_losses<S: Scalar>(
    fwd: &mut Fwd<'_, S>,
    cfg: &ModelConfig,
    view: &SampleView<'_>,
    opts: EncodeOptions,
) -> SampleLosses {
    let enc = encode_sample(fwd, cfg, view, opts);
    let logits = encoder::classify(fwd, enc.term_feats);
    let cls = encoder::classification_loss(fwd, logits, view.labels());
    let (lm, target_tokens) = decoder::lm_loss(fwd, cfg, view.tokens(), enc.term_feats);
    SampleLosses {
        cls,
        lm,
        target_tokens,
    }
}

/// Loss of one homogeneous batch: mean over samples of
/// λ·classification + language-model loss, assembled on the tape so one
/// backward covers the whole batch.
#[derive(Debug)]
pub struct BatchLoss {
    pub total: TensorId,
    /// Batch means recomputed in f64 from the per-sample tape scalars;
    /// `total_value` is λ·cls_value + lm_value by construction.
    pub cls_value: f64,
    pub lm_value: f64,
    pub total_value: f64,
    pub target_tokens: usize,
}

pub fn batch_loss<S: Scalar>(
    fwd: &mut Fwd<'_, S>,
    cfg: &ModelConfig,
    views: &[SampleView<'_>],
    lambda: f64,
    opts: EncodeOptions,
) -> Result<BatchLoss> {
    assert!(!views.is_empty(), "batch_loss on an empty batch");
    let kind = views[0].procedure();
    for v in views {
        if v.procedure() != kind {
            return Err(Error::contract(
                "mixed-kind batch: pretrain and transfer samples may not share a batch"
                    .to_string(),
            ));
        }
    }
    let lam = S::from_f64(lambda);
    let mut per_sample = Vec::with_capacity(views.len());
    let mut cls_sum = 0.0f64;
    let mut lm_sum = 0.0f64;
    let mut target_tokens = 0usize;
    for view in views {
        let losses = sample_losses(fwd, cfg, view, opts);
        cls_sum += fwd.tape.scalar(losses.cls).to_f64();
        lm_sum += fwd.tape.scalar(losses.lm).to_f64();
        target_tokens += losses.target_tokens;
        let weighted_cls = fwd.tape.scale(losses.cls, lam);
        per_sample.push(fwd.tape.add(weighted_cls, losses.lm));
    }
    let mut total = per_sample[0];
    for &s in &per_sample[1..] {
        total = fwd.tape.add(total, s);
    }
    let total = fwd
        .tape
        .scale(total, S::from_f64(1.0 / views.len() as f64));
    let b = views.len() as f64;
    let (cls_value, lm_value) = (cls_sum / b, lm_sum / b);
    Ok(BatchLoss {
        total,
        cls_value,
        lm_value,
        total_value: lambda * cls_value + lm_value,
        target_tokens,
    })
}

// ───────────────────────── frozen-model helpers ─────────────────────────

/// Terminology features of one sample as plain values (for generation
/// and attention export, which run many small tapes).
pub fn term_feats_values<S: Scalar>(
    store: &ParamStore<S>,
    cfg: &ModelConfig,
    view: &SampleView<'_>,
    opts: EncodeOptions,
) -> Tensor<S> {
    let mut tape = Tape::new();
    let mut binding = Binding::new();
    let mut fwd = Fwd::new(&mut tape, store, &mut binding);
    let enc = encode_sample(&mut fwd, cfg, view, opts);
    tape.value(enc.term_feats).clone()
}

/// Classifier probabilities for one sample.
pub fn classify_values<S: Scalar>(
    store: &ParamStore<S>,
    cfg: &ModelConfig,
    view: &SampleView<'_>,
    opts: EncodeOptions,
) -> Vec<f64> {
    let mut tape = Tape::new();
    let mut binding = Binding::new();
    let mut fwd = Fwd::new(&mut tape, store, &mut binding);
    let enc = encode_sample(&mut fwd, cfg, view, opts);
    let logits = encoder::classify(&mut fwd, enc.term_feats);
    let probs = fwd.tape.sigmoid(logits);
    tape.value(probs).data.iter().map(|x| x.to_f64()).collect()
}

/// Everything frozen-model evaluation needs from one sample, off a
/// single encoder pass: terminology features (for generation),
/// classifier probabilities, and the teacher-forced language-model loss
/// over the gold report.
pub struct SampleEval<S: Scalar> {
    pub term_feats: Tensor<S>,
    pub probs: Vec<f64>,
    pub nll: f64,
    pub scored_tokens: usize,
}

pub fn eval_sample_values<S: Scalar>(
    store: &ParamStore<S>,
    cfg: &ModelConfig,
    view: &SampleView<'_>,
    opts: EncodeOptions,
) -> SampleEval<S> {
    let mut tape = Tape::new();
    let mut binding = Binding::new();
    let mut fwd = Fwd::new(&mut tape, store, &mut binding);
    let enc = encode_sample(&mut fwd, cfg, view, opts);
    let logits = encoder::classify(&mut fwd, enc.term_feats);
    let probs = fwd.tape.sigmoid(logits);
    let (lm, scored_tokens) = decoder::lm_loss(&mut fwd, cfg, view.tokens(), enc.term_feats);
    SampleEval {
        term_feats: tape.value(enc.term_feats).clone(),
        probs: tape.value(probs).data.iter().map(|x| x.to_f64()).collect(),
        nll: tape.scalar(lm).to_f64(),
        scored_tokens,
    }
}

/// exp(total NLL / total non-PAD target tokens) over the corpus.
pub fn perplexity<S: Scalar>(
    store: &ParamStore<S>,
    cfg: &ModelConfig,
    views: &[SampleView<'_>],
    opts: EncodeOptions,
) -> Result<f64> {
    if views.is_empty() {
        return Err(Error::contract("perplexity of an empty corpus".to_string()));
    }
    let mut nll = 0.0f64;
    let mut count = 0usize;
    for view in views {
        let mut tape = Tape::new();
        let mut binding = Binding::new();
        let mut fwd = Fwd::new(&mut tape, store, &mut binding);
        let enc = encode_sample(&mut fwd, cfg, view, opts);
        let (lm, n) = decoder::lm_loss(&mut fwd, cfg, view.tokens(), enc.term_feats);
        nll += tape.scalar(lm).to_f64();
        count += n;
    }
    if count == 0 {
        return Err(Error::contract(
            "perplexity: corpus has no scoreable tokens".to_string(),
        ));
    }
    Ok((nll / count as f64).exp())
}

/// Validate token sequences against the model limits.
pub fn check_tokens(cfg: &ModelConfig, tokens: &[usize]) -> Result<()> {
    if tokens.len() > cfg.max_len {
        return Err(Error::contract(format!(
            "token sequence length {} exceeds max_len {}",
            tokens.len(),
            cfg.max_len
        )));
    }
    for &t in tokens {
        if t >= cfg.vocab_size {
            return Err(Error::contract(format!(
                "token id {t} out of vocabulary range {}",
                cfg.vocab_size
            )));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            model_dim: 4,
            heads: 2,
            encoder_layers: 1,
            decoder_blocks: 1,
            term_dim: 3,
            visual_dim: 3,
            text_dim: 3,
            n_terms: 2,
            grid_h: 2,
            grid_w: 2,
            channels: 2,
            vocab_size: 8,
            max_len: 8,
            dropout: 0.0,
        }
    }

    #[test]
    fn default_config_passes_validation_once_vocab_is_set() {
        let cfg = ModelConfig {
            vocab_size: 300,
            ..ModelConfig::default()
        };
        cfg.validate().unwrap();
    }

    #[test]
    fn validation_rejects_each_bad_field() {
        let base = || ModelConfig {
            vocab_size: 300,
            ..ModelConfig::default()
        };
        let cases: Vec<(&str, ModelConfig)> = vec![
            ("zero dim", ModelConfig { model_dim: 0, ..base() }),
            ("indivisible heads", ModelConfig { model_dim: 65, ..base() }),
            ("too many terms", ModelConfig { n_terms: 65, ..base() }),
            ("tiny vocab", ModelConfig { vocab_size: 4, ..base() }),
            ("short max_len", ModelConfig { max_len: 1, ..base() }),
            ("dropout one", ModelConfig { dropout: 1.0, ..base() }),
            ("dropout negative", ModelConfig { dropout: -0.1, ..base() }),
        ];
        for (what, cfg) in cases {
            let err = cfg.validate().expect_err(what);
            assert_eq!(err.exit_code(), 2, "{what}");
        }
    }

    #[test]
    fn initialization_is_deterministic_per_seed() {
        let cfg = tiny_cfg();
        let a: ParamStore<f32> =
            init_params(&cfg, &mut ChaCha8Rng::seed_from_u64(42));
        let b: ParamStore<f32> =
            init_params(&cfg, &mut ChaCha8Rng::seed_from_u64(42));
        let c: ParamStore<f32> =
            init_params(&cfg, &mut ChaCha8Rng::seed_from_u64(43));
        assert_eq!(a.names(), b.names());
        let flat = |s: &ParamStore<f32>| -> Vec<f32> {
            s.iter().flat_map(|p| p.data.clone()).collect()
        };
        assert_eq!(flat(&a), flat(&b));
        assert_ne!(flat(&a), flat(&c));
    }

    #[test]
    fn biases_start_at_zero_and_gains_at_one() {
        let cfg = tiny_cfg();
        let store: ParamStore<f64> =
            init_params(&cfg, &mut ChaCha8Rng::seed_from_u64(1));
        for p in store.iter() {
            let is_bias = p.name.ends_with(".b")
                || p.name.ends_with("bq")
                || p.name.ends_with("bk")
                || p.name.ends_with("bv")
                || p.name.ends_with("bo")
                || p.name.ends_with("b1")
                || p.name.ends_with("b2");
            if is_bias {
                assert!(
                    p.data.iter().all(|&v| v == 0.0),
                    "{} should start at zero",
                    p.name
                );
            }
            if p.name.ends_with(".g") {
                assert!(
                    p.data.iter().all(|&v| v == 1.0),
                    "{} should start at one",
                    p.name
                );
            }
        }
    }

    #[test]
    fn shared_and_exclusive_procedure_parameters() {
        let cfg = tiny_cfg();
        let store: ParamStore<f64> =
            init_params(&cfg, &mut ChaCha8Rng::seed_from_u64(2));
        let pre: std::collections::BTreeSet<String> =
            touched_names(&store, Procedure::Pretrain).into_iter().collect();
        let tra: std::collections::BTreeSet<String> =
            touched_names(&store, Procedure::Transfer).into_iter().collect();
        // the shared core: terminology table, classifier head, decoder
        for shared in ["term.table", "cls.w", "cls.b", "dec.tok_table", "dec.ln_f.g"] {
            assert!(pre.contains(shared), "{shared} missing from pretrain set");
            assert!(tra.contains(shared), "{shared} missing from transfer set");
        }
        // branch-exclusive parameters
        assert!(pre.iter().any(|n| n.starts_with("txt.")));
        assert!(pre.iter().all(|n| !n.starts_with("vis.") && !n.starts_with("patch.")));
        assert!(tra.iter().any(|n| n.starts_with("vis.")));
        assert!(tra.iter().any(|n| n.starts_with("patch.")));
        assert!(tra.iter().all(|n| !n.starts_with("txt.")));
        // the union covers every parameter
        let all: std::collections::BTreeSet<String> = store.names().into_iter().collect();
        let union: std::collections::BTreeSet<String> =
            pre.union(&tra).cloned().collect();
        assert_eq!(all, union);
    }

    fn demo_views() -> (Vec<usize>, Vec<f32>, Vec<f32>) {
        let tokens = vec![1usize, 4, 5, 6, 2];
        let labels = vec![1.0f32, 0.0];
        let grid = vec![0.5f32, -0.25, 1.0, 0.0, 0.75, 0.3, -0.6, 0.2];
        (tokens, labels, grid)
    }

    #[test]
    fn forward_binds_only_the_procedures_parameters() {
        let cfg = tiny_cfg();
        let store: ParamStore<f64> =
            init_params(&cfg, &mut ChaCha8Rng::seed_from_u64(3));
        let (tokens, labels, grid) = demo_views();
        for (view, proc) in [
            (
                SampleView::Pretrain {
                    tokens: &tokens,
                    labels: &labels,
                },
                Procedure::Pretrain,
            ),
            (
                SampleView::Transfer {
                    grid: &grid,
                    tokens: &tokens,
                    labels: &labels,
                },
                Procedure::Transfer,
            ),
        ] {
            let mut tape = Tape::new();
            let mut binding = Binding::new();
            let mut fwd = Fwd::new(&mut tape, &store, &mut binding);
            let _ = sample_losses(&mut fwd, &cfg, &view, EncodeOptions::default());
            let allowed = proc.param_prefixes();
            for i in binding.bound_indices() {
                let name = &store.at(i).name;
                assert!(
                    allowed.iter().any(|p| name.starts_with(p)),
                    "{} bound outside {:?}",
                    name,
                    proc
                );
            }
        }
    }

    #[test]
    fn batch_loss_is_additive_in_its_parts() {
        let cfg = tiny_cfg();
        let store: ParamStore<f64> =
            init_params(&cfg, &mut ChaCha8Rng::seed_from_u64(4));
        let (tokens, labels, _) = demo_views();
        let other_tokens = vec![1usize, 6, 7, 2];
        let other_labels = vec![0.0f32, 1.0];
        let views = vec![
            SampleView::Pretrain {
                tokens: &tokens,
                labels: &labels,
            },
            SampleView::Pretrain {
                tokens: &other_tokens,
                labels: &other_labels,
            },
        ];
        for lambda in [0.0, 0.5, 1.0, 2.0] {
            let mut tape = Tape::new();
            let mut binding = Binding::new();
            let mut fwd = Fwd::new(&mut tape, &store, &mut binding);
            let b = batch_loss(&mut fwd, &cfg, &views, lambda, EncodeOptions::default()).unwrap();
            assert_eq!(b.total_value, lambda * b.cls_value + b.lm_value);
            let on_tape = tape.scalar(b.total);
            assert!(
                (on_tape - b.total_value).abs() < 1e-9,
                "tape total {on_tape} vs bookkeeping {}",
                b.total_value
            );
        }
    }

    #[test]
    fn loss_parts_do_not_depend_on_lambda() {
        let cfg = tiny_cfg();
        let store: ParamStore<f64> =
            init_params(&cfg, &mut ChaCha8Rng::seed_from_u64(5));
        let (tokens, labels, _) = demo_views();
        let views = vec![SampleView::Pretrain {
            tokens: &tokens,
            labels: &labels,
        }];
        let run = |lambda: f64| -> (f64, f64) {
            let mut tape = Tape::new();
            let mut binding = Binding::new();
            let mut fwd = Fwd::new(&mut tape, &store, &mut binding);
            let b = batch_loss(&mut fwd, &cfg, &views, lambda, EncodeOptions::default()).unwrap();
            (b.cls_value, b.lm_value)
        };
        assert_eq!(run(0.0), run(1.0));
        assert_eq!(run(1.0), run(3.5));
    }

    #[test]
    fn mixed_kind_batches_are_rejected() {
        let cfg = tiny_cfg();
        let store: ParamStore<f64> =
            init_params(&cfg, &mut ChaCha8Rng::seed_from_u64(6));
        let (tokens, labels, grid) = demo_views();
        let views = vec![
            SampleView::Pretrain {
                tokens: &tokens,
                labels: &labels,
            },
            SampleView::Transfer {
                grid: &grid,
                tokens: &tokens,
                labels: &labels,
            },
        ];
        let mut tape = Tape::new();
        let mut binding = Binding::new();
        let mut fwd = Fwd::new(&mut tape, &store, &mut binding);
        let err = batch_loss(&mut fwd, &cfg, &views, 1.0, EncodeOptions::default()).unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn zero_lambda_silences_classifier_gradients_exactly() {
        let cfg = tiny_cfg();
        let mut store: ParamStore<f64> =
            init_params(&cfg, &mut ChaCha8Rng::seed_from_u64(7));
        let (tokens, labels, _) = demo_views();
        let views = vec![SampleView::Pretrain {
            tokens: &tokens,
            labels: &labels,
        }];
        let grads_for = |store: &mut ParamStore<f64>, lambda: f64| -> (Vec<f64>, Vec<f64>) {
            store.zero_grad();
            let mut tape = Tape::new();
            let mut binding = Binding::new();
            let mut fwd = Fwd::new(&mut tape, store, &mut binding);
            let b = batch_loss(&mut fwd, &cfg, &views, lambda, EncodeOptions::default()).unwrap();
            tape.backward(b.total);
            store.harvest(&tape, &binding);
            (
                store.get("cls.w").grad.clone(),
                store.get("dec.tok_table").grad.clone(),
            )
        };
        let (cls0, dec0) = grads_for(&mut store, 0.0);
        assert!(
            cls0.iter().all(|&g| g == 0.0),
            "classifier gradient must vanish bit-for-bit at lambda 0"
        );
        assert!(dec0.iter().any(|&g| g != 0.0));
        let (cls1, _) = grads_for(&mut store, 1.0);
        assert!(cls1.iter().any(|&g| g != 0.0));
    }

    #[test]
    fn whole_model_gradients_match_finite_differences() {
        let cfg = tiny_cfg();
        let store: ParamStore<f64> =
            init_params(&cfg, &mut ChaCha8Rng::seed_from_u64(8));
        let (tokens, labels, grid) = demo_views();
        let flat: Vec<f64> = store.iter().flat_map(|p| p.data.clone()).collect();
        let rebuild = |vals: &[f64]| -> ParamStore<f64> {
            let mut s = ParamStore::new();
            let mut off = 0;
            for p in store.iter() {
                let n = p.data.len();
                s.register(
                    &p.name,
                    Tensor::new(p.rows, p.cols, vals[off..off + n].to_vec()),
                );
                off += n;
            }
            s
        };
        for which in ["pretrain", "transfer"] {
            let eval = |vals: &[f64], want_grad: bool| -> (f64, Option<Vec<f64>>) {
                let mut s = rebuild(vals);
                let view = match which {
                    "pretrain" => SampleView::Pretrain {
                        tokens: &tokens,
                        labels: &labels,
                    },
                    _ => SampleView::Transfer {
                        grid: &grid,
                        tokens: &tokens,
                        labels: &labels,
                    },
                };
                let mut tape = Tape::new();
                let mut binding = Binding::new();
                let mut fwd = Fwd::new(&mut tape, &s, &mut binding);
                let b = batch_loss(&mut fwd, &cfg, &[view], 0.7, EncodeOptions::default()).unwrap();
                let value = tape.scalar(b.total);
                if !want_grad {
                    return (value, None);
                }
                tape.backward(b.total);
                s.harvest(&tape, &binding);
                (value, Some(s.iter().flat_map(|p| p.grad.clone()).collect()))
            };
            let (_, analytic) = eval(&flat, true);
            let numerical =
                crate::gradcheck::numerical_grad(&flat, 1e-6, &mut |v| eval(v, false).0);
            crate::gradcheck::compare(
                &analytic.unwrap(),
                &numerical,
                crate::gradcheck::F64_TOL,
            )
            .unwrap_or_else(|m| panic!("{which}: {m}"));
        }
    }

    #[test]
    fn classifier_probabilities_lie_in_the_unit_interval() {
        let cfg = tiny_cfg();
        let store: ParamStore<f64> =
            init_params(&cfg, &mut ChaCha8Rng::seed_from_u64(9));
        let (tokens, labels, _) = demo_views();
        let view = SampleView::Pretrain {
            tokens: &tokens,
            labels: &labels,
        };
        let probs = classify_values(&store, &cfg, &view, EncodeOptions::default());
        assert_eq!(probs.len(), cfg.n_terms);
        assert!(probs.iter().all(|&p| (0.0..=1.0).contains(&p)));
    }

    #[test]
    fn perplexity_contract_errors() {
        let cfg = tiny_cfg();
        let store: ParamStore<f64> =
            init_params(&cfg, &mut ChaCha8Rng::seed_from_u64(10));
        let err = perplexity(&store, &cfg, &[], EncodeOptions::default()).unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn token_checks_guard_length_and_range() {
        let cfg = tiny_cfg();
        assert!(check_tokens(&cfg, &[1, 2, 3]).is_ok());
        let long: Vec<usize> = vec![1; cfg.max_len + 1];
        assert_eq!(check_tokens(&cfg, &long).unwrap_err().exit_code(), 2);
        assert_eq!(check_tokens(&cfg, &[1, 99]).unwrap_err().exit_code(), 2);
    }
}
