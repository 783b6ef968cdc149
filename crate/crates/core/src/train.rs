//! The alternating training driver: each epoch runs m pretraining
//! passes over the textbook split and then n transferring passes over
//! the train split, with the decoder shared between the two
//! procedures. Emits a JSONL event stream (phase boundaries, per-step
//! loss breakdowns, validation scores), tracks the best checkpoint by
//! validation CIDEr-D, and supports bit-exact resume from checkpoints.

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

use crate::checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta, RngState, TrainState};
use crate::datagen::Corpus;
use crate::decoder::Decode;
use crate::encoder::EncodeOptions;
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalOptions, EvalSummary};
use crate::layers::Fwd;
use crate::model::{
    batch_loss, init_params, touched_indices, touched_names, ModelConfig, Procedure, SampleView,
};
use crate::optim::{Adam, AdamConfig, Binding, ParamStore};
use crate::tensor::Tape;
use crate::vocab::Vocabulary;

pub const LAST_CHECKPOINT: &str = "last.agck";
pub const BEST_CHECKPOINT: &str = "best.agck";

// ───────────────────────── event log ─────────────────────────

/// JSONL event sink, optionally mirrored in memory for inspection.
pub struct EventLog {
    file: Option<std::io::BufWriter<std::fs::File>>,
    keep: bool,
    pub events: Vec<Value>,
}

impl EventLog {
    pub fn disabled() -> EventLog {
        EventLog {
            file: None,
            keep: false,
            events: Vec::new(),
        }
    }

    pub fn in_memory() -> EventLog {
        EventLog {
            file: None,
            keep: true,
            events: Vec::new(),
        }
    }

    pub fn to_file(path: &Path, keep_in_memory: bool) -> Result<EventLog> {
        Ok(EventLog {
            file: Some(std::io::BufWriter::new(std::fs::File::create(path)?)),
            keep: keep_in_memory,
            events: Vec::new(),
        })
    }

    pub fn emit(&mut self, event: Value) -> Result<()> {
        if let Some(f) = &mut self.file {
            serde_json::to_writer(&mut *f, &event)
                .map_err(|e| Error::Io(std::io::Error::other(e)))?;
            writeln!(f)?;
        }
        if self.keep {
            self.events.push(event);
        }
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        if let Some(f) = &mut self.file {
            f.flush()?;
        }
        Ok(())
    }

    /// Events of one kind, in emission order.
    pub fn of_kind(&self, kind: &str) -> Vec<&Value> {
        self.events
            .iter()
            .filter(|e| e.get("event").and_then(Value::as_str) == Some(kind))
            .collect()
    }
}

// ───────────────────────── options ─────────────────────────

#[derive(Clone, Debug)]
pub struct TrainOptions {
    pub epochs: usize,
    pub batch_size: usize,
    /// Weight of the classification term in the combined loss.
    pub lambda: f64,
    /// Pretraining passes per epoch.
    pub schedule_m: usize,
    /// Transferring passes per epoch.
    pub schedule_n: usize,
    /// When false, all pretraining passes run before any transferring
    /// pass (the sequential ablation); pass totals stay the same.
    pub alternate: bool,
    /// When false, the encoder masks attention across the
    /// terminology/context boundary.
    pub co_attention: bool,
    pub seed: u64,
    pub optimizer: AdamConfig,
    /// Stop after this many epochs without a new validation best.
    pub patience: Option<usize>,
    /// Decoding used for the per-epoch validation pass.
    pub decode: Decode,
    pub checkpoint_dir: Option<PathBuf>,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            epochs: 30,
            batch_size: 8,
            lambda: 1.0,
            schedule_m: 1,
            schedule_n: 3,
            alternate: true,
            co_attention: true,
            seed: 0,
            optimizer: AdamConfig {
                lr_overrides: vec![("patch.".to_string(), 1e-6)],
                ..AdamConfig::default()
            },
            patience: None,
            decode: Decode::Greedy,
            checkpoint_dir: None,
        }
    }
}

impl TrainOptions {
    pub fn validate(&self, corpus: &Corpus) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("epochs must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be at least 1"));
        }
        if self.schedule_m + self.schedule_n == 0 {
            return Err(Error::config(
                "schedule (0,0) trains nothing; at least one pass per epoch is required",
            ));
        }
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(Error::config(format!(
                "lambda must be a finite non-negative number, got {}",
                self.lambda
            )));
        }
        if self.schedule_m > 0 && corpus.textbook.is_empty() {
            return Err(Error::config(
                "schedule requests pretraining passes but the textbook split is empty",
            ));
        }
        if self.schedule_n > 0 && corpus.train.is_empty() {
            return Err(Error::config(
                "schedule requests transferring passes but the train split is empty",
            ));
        }
        if self.patience == Some(0) {
            return Err(Error::config("patience must be at least 1 when set"));
        }
        Ok(())
    }

    fn eval_options(&self) -> EvalOptions {
        EvalOptions {
            decode: self.decode,
            co_attention: self.co_attention,
            ..EvalOptions::default()
        }
    }

    fn encode_options(&self) -> EncodeOptions {
        EncodeOptions {
            isolate_segments: !self.co_attention,
            ..EncodeOptions::default()
        }
    }
}

/// The ordered (procedure, pass count) phases of one epoch. Alternating
/// runs m pretraining then n transferring passes every epoch; the
/// sequential variant lays the same pass totals out end to end, so all
/// pretraining happens in the earliest epochs.
pub fn phase_plan(
    alternate: bool,
    m: usize,
    n: usize,
    epochs: usize,
    epoch: usize,
) -> Vec<(Procedure, usize)> {
    let mut out = Vec::new();
    if alternate {
        if m > 0 {
            out.push((Procedure::Pretrain, m));
        }
        if n > 0 {
            out.push((Procedure::Transfer, n));
        }
    } else {
        let per_epoch = m + n;
        let total_pre = epochs * m;
        let start = epoch * per_epoch;
        let end = start + per_epoch;
        let pre = total_pre.clamp(start, end) - start;
        if pre > 0 {
            out.push((Procedure::Pretrain, pre));
        }
        if end - start - pre > 0 {
            out.push((Procedure::Transfer, end - start - pre));
        }
    }
    out
}

// ───────────────────────── outcome ─────────────────────────

#[derive(Clone, Debug)]
pub struct EpochRecord {
    pub epoch: usize,
    pub val: EvalSummary,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub store: ParamStore<f32>,
    pub adam: Adam<f32>,
    pub state: TrainState,
    pub meta: CheckpointMeta,
    /// Per-epoch validation summaries (empty when there is no val split).
    pub history: Vec<EpochRecord>,
}

impl TrainOutcome {
    /// The validation record of the best epoch, if validation ran.
    pub fn best(&self) -> Option<&EpochRecord> {
        let e = self.state.best_epoch?;
        self.history.iter().find(|r| r.epoch == e)
    }
}

// ───────────────────────── the loop ─────────────────────────

pub fn train(
    corpus: &Corpus,
    vocab: &Vocabulary,
    cfg: &ModelConfig,
    opts: &TrainOptions,
    resume: Option<&Path>,
    log: &mut EventLog,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    opts.validate(corpus)?;
    if cfg.vocab_size != vocab.len() {
        return Err(Error::config(format!(
            "model vocab_size {} does not match the vocabulary ({} tokens)",
            cfg.vocab_size,
            vocab.len()
        )));
    }
    let vocab_hash = vocab.sha256_hex();
    let grammar_hash = corpus.grammar.hash()?;
    let started = std::time::Instant::now();

    let (mut state, mut store, mut adam, mut rng, rng_seed) = match resume {
        None => {
            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
            let store = init_params::<f32>(cfg, &mut rng);
            let adam = Adam::new(opts.optimizer.clone(), &store);
            (TrainState::default(), store, adam, rng, opts.seed)
        }
        Some(path) => {
            let (meta, store, mut adam) = load_checkpoint(path)?;
            if meta.model != *cfg {
                return Err(Error::config(format!(
                    "checkpoint {} was trained with a different model configuration",
                    path.display()
                )));
            }
            if meta.vocab_hash != vocab_hash {
                return Err(Error::HashMismatch(format!(
                    "checkpoint {} was trained against a different vocabulary",
                    path.display()
                )));
            }
            if meta.grammar_hash != grammar_hash {
                log.emit(json!({
                    "event": "corpus_changed",
                    "from_grammar": meta.grammar_hash,
                    "to_grammar": grammar_hash,
                }))?;
            }
            adam.cfg = opts.optimizer.clone();
            let seed = meta.rng.seed;
            (meta.state, store, adam, meta.rng.restore(), seed)
        }
    };

    log.emit(json!({
        "event": "run_start",
        "epochs": opts.epochs,
        "start_epoch": state.epoch,
        "batch_size": opts.batch_size,
        "lambda": opts.lambda,
        "schedule_m": opts.schedule_m,
        "schedule_n": opts.schedule_n,
        "alternate": opts.alternate,
        "co_attention": opts.co_attention,
        "seed": rng_seed,
        "resumed": resume.is_some(),
        "pretrain_samples": corpus.textbook.len(),
        "transfer_samples": corpus.train.len(),
        "parameters": store.total_values(),
    }))?;

    let enc_opts = opts.encode_options();
    let mut history = Vec::new();
    let make_meta = |state: &TrainState, rng: &ChaCha8Rng| CheckpointMeta {
        model: cfg.clone(),
        optimizer: opts.optimizer.clone(),
        lambda: opts.lambda,
        schedule_m: opts.schedule_m,
        schedule_n: opts.schedule_n,
        state: state.clone(),
        rng: RngState::of(rng_seed, rng),
        vocab_hash: vocab_hash.clone(),
        grammar_hash: grammar_hash.clone(),
    };

    let start_epoch = state.epoch;
    for epoch in start_epoch..opts.epochs {
        log.emit(json!({"event": "epoch_start", "epoch": epoch}))?;
        let mut epoch_loss_sum = 0.0f64;
        let mut epoch_steps = 0usize;
        for (proc, passes) in phase_plan(
            opts.alternate,
            opts.schedule_m,
            opts.schedule_n,
            opts.epochs,
            epoch,
        ) {
            let split = match proc {
                Procedure::Pretrain => &corpus.textbook,
                Procedure::Transfer => &corpus.train,
            };
            let expected_touched = touched_indices(&store, proc);
            for pass in 0..passes {
                log.emit(json!({
                    "event": "phase_start",
                    "epoch": epoch,
                    "procedure": proc.name(),
                    "pass": pass,
                    "touched": touched_names(&store, proc),
                }))?;
                let mut order: Vec<usize> = (0..split.len()).collect();
                order.shuffle(&mut rng);
                for chunk in order.chunks(opts.batch_size) {
                    let views: Vec<SampleView> =
                        chunk.iter().map(|&i| split[i].view()).collect();
                    store.zero_grad();
                    let mut tape: Tape<f32> = Tape::new();
                    let mut binding = Binding::new();
                    let bl = {
                        let mut fwd = Fwd::new(&mut tape, &store, &mut binding);
                        fwd.dropout = cfg.dropout;
                        fwd.rng = Some(&mut rng);
                        batch_loss(&mut fwd, cfg, &views, opts.lambda, enc_opts)?
                    };
                    if !bl.total_value.is_finite() {
                        log.emit(json!({
                            "event": "numeric_failure",
                            "epoch": epoch,
                            "procedure": proc.name(),
                            "total": bl.total_value,
                            "cls": bl.cls_value,
                            "lm": bl.lm_value,
                        }))?;
                        log.flush()?;
                        return Err(Error::numeric(format!(
                            "non-finite loss at epoch {epoch} ({}); aborting",
                            proc.name()
                        )));
                    }
                    tape.backward(bl.total);
                    store.harvest(&tape, &binding);
                    let touched = binding.bound_indices();
                    assert_eq!(
                        touched, expected_touched,
                        "forward pass bound a different parameter set than the \
                         procedure prefixes promise"
                    );
                    adam.step(&mut store, &touched)?;
                    epoch_loss_sum += bl.total_value;
                    epoch_steps += 1;
                    log.emit(json!({
                        "event": "step",
                        "global_step": adam.global_step(),
                        "epoch": epoch,
                        "procedure": proc.name(),
                        "pass": pass,
                        "batch": views.len(),
                        "total": bl.total_value,
                        "cls": bl.cls_value,
                        "lm": bl.lm_value,
                        "lambda": opts.lambda,
                    }))?;
                }
            }
        }

        let mut improved = false;
        if !corpus.val.is_empty() {
            let eval = evaluate(&store, cfg, &corpus.val, vocab, &opts.eval_options())?;
            let summary = EvalSummary::from(&eval);
            log.emit(json!({
                "event": "validation",
                "epoch": epoch,
                "count": eval.count,
                "bleu1": summary.bleu1,
                "bleu4": summary.bleu4,
                "rouge_l": summary.rouge_l,
                "cider_d": summary.cider_d,
                "precision": summary.precision,
                "recall": summary.recall,
                "f1": summary.f1,
                "perplexity": summary.perplexity,
            }))?;
            improved = state.best_value.is_none_or(|b| summary.cider_d > b);
            if improved {
                state.best_value = Some(summary.cider_d);
                state.best_epoch = Some(epoch);
                state.epochs_since_best = 0;
            } else {
                state.epochs_since_best += 1;
            }
            history.push(EpochRecord {
                epoch,
                val: summary,
            });
            eprintln!(
                "epoch {:>3}  steps {:>5}  loss {:.4}  val BLEU-4 {:.3}  ROUGE-L {:.3}  \
                 CIDEr-D {:.3}  F1 {:.3}{}",
                epoch,
                epoch_steps,
                epoch_loss_sum / epoch_steps.max(1) as f64,
                summary.bleu4,
                summary.rouge_l,
                summary.cider_d,
                summary.f1,
                if improved { "  (best)" } else { "" }
            );
        } else {
            eprintln!(
                "epoch {:>3}  steps {:>5}  loss {:.4}",
                epoch,
                epoch_steps,
                epoch_loss_sum / epoch_steps.max(1) as f64
            );
        }
        state.epoch = epoch + 1;

        if let Some(dir) = &opts.checkpoint_dir {
            std::fs::create_dir_all(dir)?;
            let meta = make_meta(&state, &rng);
            let last = dir.join(LAST_CHECKPOINT);
            save_checkpoint(&last, &meta, &store, &adam)?;
            if improved || (corpus.val.is_empty() && epoch + 1 == opts.epochs) {
                std::fs::copy(&last, dir.join(BEST_CHECKPOINT))?;
            }
            log.emit(json!({
                "event": "checkpoint",
                "epoch": epoch,
                "path": last.display().to_string(),
                "best": improved,
            }))?;
        }

        if let Some(p) = opts.patience {
            if state.epochs_since_best >= p {
                log.emit(json!({
                    "event": "early_stop",
                    "epoch": epoch,
                    "best_epoch": state.best_epoch,
                    "patience": p,
                }))?;
                break;
            }
        }
    }

    log.emit(json!({
        "event": "run_end",
        "epochs_completed": state.epoch,
        "global_step": adam.global_step(),
        "elapsed_s": started.elapsed().as_secs_f64(),
    }))?;
    log.flush()?;
    let meta = make_meta(&state, &rng);
    Ok(TrainOutcome {
        store,
        adam,
        state,
        meta,
        history,
    })
}

// ───────────────────────── two-stage transfer ─────────────────────────

/// Train on `first` from fresh parameters, then fine-tune the result on
/// `second`. The hand-off checkpoint is written to `stage_path`; the
/// second stage restarts the epoch clock and draws shuffles from its own
/// seed, while parameters and optimizer moments carry over. Both corpora
/// must be tokenized with the same `vocab`.
pub fn transfer_between_corpora(
    first: (&Corpus, &TrainOptions),
    second: (&Corpus, &TrainOptions),
    vocab: &Vocabulary,
    cfg: &ModelConfig,
    stage_path: &Path,
    log: &mut EventLog,
) -> Result<TrainOutcome> {
    let (corpus_a, opts_a) = first;
    let (corpus_b, opts_b) = second;
    check_stage_compatibility(corpus_a, corpus_b)?;
    let a = train(corpus_a, vocab, cfg, opts_a, None, log)?;
    let mut meta = a.meta.clone();
    meta.state = TrainState::default();
    meta.rng = RngState::of(opts_b.seed, &ChaCha8Rng::seed_from_u64(opts_b.seed));
    if let Some(dir) = stage_path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    save_checkpoint(stage_path, &meta, &a.store, &a.adam)?;
    log.emit(json!({
        "event": "stage_handoff",
        "checkpoint": stage_path.display().to_string(),
        "from_corpus": corpus_a.grammar.name,
        "to_corpus": corpus_b.grammar.name,
    }))?;
    train(corpus_b, vocab, cfg, opts_b, Some(stage_path), log)
}

/// One model serves both stages, so the corpora must agree on the
/// terminology list and the grid signature. Reports every mismatch at
/// once rather than the first found.
fn check_stage_compatibility(a: &Corpus, b: &Corpus) -> Result<()> {
    let (ga, gb) = (&a.grammar, &b.grammar);
    let mut mismatches = Vec::new();
    if ga.n_terms() != gb.n_terms() {
        mismatches.push(format!(
            "terminology size: '{}' defines {} terms, '{}' defines {}",
            ga.name,
            ga.n_terms(),
            gb.name,
            gb.n_terms()
        ));
    } else {
        let differing: Vec<String> = ga
            .terms
            .iter()
            .zip(&gb.terms)
            .filter(|(ta, tb)| ta.name != tb.name)
            .map(|(ta, tb)| format!("{} vs {}", ta.name, tb.name))
            .collect();
        if !differing.is_empty() {
            mismatches.push(format!(
                "terminology names differ: {}",
                differing.join(", ")
            ));
        }
    }
    if (ga.grid_h, ga.grid_w, ga.channels) != (gb.grid_h, gb.grid_w, gb.channels) {
        mismatches.push(format!(
            "grid: '{}' is {}x{}x{}, '{}' is {}x{}x{}",
            ga.name, ga.grid_h, ga.grid_w, ga.channels, gb.name, gb.grid_h, gb.grid_w, gb.channels
        ));
    }
    if mismatches.is_empty() {
        Ok(())
    } else {
        Err(Error::config(format!(
            "transfer stages are incompatible: {}",
            mismatches.join("; ")
        )))
    }
}
