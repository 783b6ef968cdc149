//! Command implementations. Each takes the validated run configuration
//! plus its own arguments, does the work, and returns a report whose
//! `Display` is exactly what the binary prints to standard output.
//! Progress goes to standard error; machine-readable logs go to files.
//! Every path written lives under the configured output directory.

use std::fmt;
use std::path::{Path, PathBuf};
use std::time::Instant;

use termgen::checkpoint::load_checkpoint;
use termgen::config::RunConfig;
use termgen::datagen::{build_vocabulary, generate_corpus, Corpus};
use termgen::dataset::{export_text, load_corpus, save_corpus};
use termgen::error::{Error, Result};
use termgen::eval::{evaluate, export_pairs, EvalSummary};
use termgen::export::{attention_header, attention_summary, capture_attention, save_attention};
use termgen::grammar::{grammar_alpha, grammar_beta, Grammar};
use termgen::metrics::{cider_d, corpus_bleu, rouge_l, BleuOptions};
use termgen::train::{
    train, transfer_between_corpora, EventLog, TrainOutcome, BEST_CHECKPOINT, LAST_CHECKPOINT,
};
use termgen::vocab::Vocabulary;

// ───────────────────────── layout under out_dir ─────────────────────────

pub fn data_dir(cfg: &RunConfig) -> PathBuf {
    Path::new(&cfg.out_dir).join("data")
}

pub fn corpus_dir(cfg: &RunConfig, name: &str) -> PathBuf {
    data_dir(cfg).join(name)
}

pub fn run_dir(cfg: &RunConfig, name: &str) -> PathBuf {
    Path::new(&cfg.out_dir).join("runs").join(name)
}

pub fn eval_dir(cfg: &RunConfig) -> PathBuf {
    Path::new(&cfg.out_dir).join("eval")
}

pub fn tables_dir(cfg: &RunConfig) -> PathBuf {
    Path::new(&cfg.out_dir).join("tables")
}

pub fn attention_dir(cfg: &RunConfig) -> PathBuf {
    Path::new(&cfg.out_dir).join("attention")
}

/// Default checkpoint commands fall back to: the best epoch of the
/// plain `train` run.
pub fn default_checkpoint(cfg: &RunConfig) -> PathBuf {
    run_dir(cfg, "train").join(BEST_CHECKPOINT)
}

fn grammar_by_name(name: &str) -> Result<Grammar> {
    match name {
        "alpha" => Ok(grammar_alpha()),
        "beta" => Ok(grammar_beta()),
        other => Err(Error::config(format!(
            "unknown corpus '{other}' (expected 'alpha' or 'beta')"
        ))),
    }
}

/// The other member of the corpus pair, used as the first stage of
/// transfer runs.
fn sibling_of(name: &str) -> Result<&'static str> {
    match name {
        "alpha" => Ok("beta"),
        "beta" => Ok("alpha"),
        other => Err(Error::config(format!(
            "unknown corpus '{other}' (expected 'alpha' or 'beta')"
        ))),
    }
}

fn load_corpus_by_name(cfg: &RunConfig, name: &str) -> Result<(Corpus, Vocabulary)> {
    grammar_by_name(name)?;
    let dir = corpus_dir(cfg, name);
    if !dir.join("vocab.txt").exists() {
        return Err(Error::config(format!(
            "no corpus at {} (run gen-data first)",
            dir.display()
        )));
    }
    load_corpus(&dir)
}

// ───────────────────────── gen-data ─────────────────────────

#[derive(Debug)]
pub struct SplitStat {
    pub split: &'static str,
    pub count: usize,
    pub unk_rate: f64,
}

#[derive(Debug)]
pub struct CorpusStats {
    pub name: String,
    pub splits: Vec<SplitStat>,
    /// UNK rate over the tokens of all four splits.
    pub unk_rate: f64,
    /// Mean positive terminologies per report sample (train+val+test).
    pub mean_positive: f64,
    /// Fraction of report samples with no positive terminology.
    pub normal_fraction: f64,
    pub n_terms: usize,
}

#[derive(Debug)]
pub struct GenDataReport {
    pub dir: PathBuf,
    pub vocab_size: usize,
    pub vocab_sha: String,
    pub corpora: Vec<CorpusStats>,
}

fn corpus_stats(corpus: &Corpus, vocab: &Vocabulary) -> CorpusStats {
    let mut all_tokens = Vec::new();
    let mut splits = Vec::new();
    for (split, samples) in corpus.splits() {
        let tokens: Vec<usize> = samples.iter().flat_map(|s| s.tokens.iter().copied()).collect();
        splits.push(SplitStat {
            split,
            count: samples.len(),
            unk_rate: vocab.unk_rate(&tokens),
        });
        all_tokens.extend(tokens);
    }
    let reports: Vec<_> = [&corpus.train, &corpus.val, &corpus.test]
        .into_iter()
        .flatten()
        .collect();
    let n_terms = corpus.grammar.n_terms();
    let positives: usize = reports
        .iter()
        .map(|s| s.labels.count_ones() as usize)
        .sum();
    let normals = reports.iter().filter(|s| s.labels == 0).count();
    CorpusStats {
        name: corpus.grammar.name.clone(),
        splits,
        unk_rate: vocab.unk_rate(&all_tokens),
        mean_positive: positives as f64 / reports.len() as f64,
        normal_fraction: normals as f64 / reports.len() as f64,
        n_terms,
    }
}

/// Generate both sibling corpora with one vocabulary shared between
/// them, then save the binary splits, the vocabulary, the grammar, and
/// plain-text dumps of every split.
pub fn gen_data(cfg: &RunConfig) -> Result<GenDataReport> {
    let mut alpha = generate_corpus(&grammar_alpha(), cfg.sizes())?;
    let mut beta = generate_corpus(&grammar_beta(), cfg.sibling_sizes())?;
    let vocab = build_vocabulary(&[&alpha, &beta]);
    alpha.tokenize(&vocab, cfg.model.max_len)?;
    beta.tokenize(&vocab, cfg.model.max_len)?;
    let root = data_dir(cfg);
    let mut corpora = Vec::new();
    for corpus in [&alpha, &beta] {
        let dir = root.join(&corpus.grammar.name);
        save_corpus(&dir, corpus, &vocab)?;
        for (split, samples) in corpus.splits() {
            export_text(&dir.join(format!("{split}.txt")), samples)?;
        }
        corpora.push(corpus_stats(corpus, &vocab));
    }
    Ok(GenDataReport {
        dir: root,
        vocab_size: vocab.len(),
        vocab_sha: vocab.sha256_hex()[..12].to_string(),
        corpora,
    })
}

impl fmt::Display for GenDataReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "wrote {}", self.dir.display())?;
        writeln!(
            f,
            "vocabulary: {} tokens (sha256 {})",
            self.vocab_size, self.vocab_sha
        )?;
        for c in &self.corpora {
            writeln!(f, "corpus {}", c.name)?;
            for s in &c.splits {
                writeln!(
                    f,
                    "  {:<9} {:>6} samples   unk {:.2}%",
                    s.split,
                    s.count,
                    100.0 * s.unk_rate
                )?;
            }
            writeln!(f, "  unk rate over all splits: {:.2}%", 100.0 * c.unk_rate)?;
            writeln!(
                f,
                "  labels over reports: mean {:.2} positive of {}, {:.1}% normal",
                c.mean_positive,
                c.n_terms,
                100.0 * c.normal_fraction
            )?;
        }
        Ok(())
    }
}

// ───────────────────────── train ─────────────────────────

#[derive(Debug)]
pub struct TrainReport {
    pub corpus: String,
    pub run_dir: PathBuf,
    pub epochs: usize,
    pub steps: u64,
    pub elapsed_s: f64,
    pub best: Option<(usize, EvalSummary)>,
    pub two_stage: bool,
}

/// Run training into `runs/<run_name>`: the event log, a checkpoint per
/// epoch, and the best checkpoint by validation CIDEr-D. With
/// `flags.transfer_learning` the run first trains on the sibling corpus
/// and fine-tunes from its checkpoint.
pub fn run_training(
    cfg: &RunConfig,
    corpus_name: &str,
    run_name: &str,
    resume: Option<&Path>,
) -> Result<(PathBuf, TrainOutcome)> {
    if cfg.flags.transfer_learning && resume.is_some() {
        return Err(Error::config(
            "--resume and flags.transfer_learning both name a starting checkpoint; \
             use one or the other",
        ));
    }
    let (corpus, vocab) = load_corpus_by_name(cfg, corpus_name)?;
    let model = cfg.model_for(vocab.len())?;
    let rd = run_dir(cfg, run_name);
    std::fs::create_dir_all(&rd)?;
    let mut log = EventLog::to_file(&rd.join("events.jsonl"), false)?;
    let mut opts = cfg.train_options()?;
    opts.checkpoint_dir = Some(rd.clone());
    let outcome = if cfg.flags.transfer_learning {
        let sibling = sibling_of(corpus_name)?;
        let (first, first_vocab) = load_corpus_by_name(cfg, sibling)?;
        if first_vocab.sha256_hex() != vocab.sha256_hex() {
            return Err(Error::config(format!(
                "corpora '{sibling}' and '{corpus_name}' carry different vocabularies; \
                 regenerate both together with gen-data"
            )));
        }
        let mut stage_a = cfg.train_options()?;
        stage_a.epochs = cfg.transfer.epochs;
        stage_a.checkpoint_dir = None;
        eprintln!(
            "stage A: {} epochs on corpus {sibling}",
            stage_a.epochs
        );
        transfer_between_corpora(
            (&first, &stage_a),
            (&corpus, &opts),
            &vocab,
            &model,
            &rd.join("stage-a.agck"),
            &mut log,
        )?
    } else {
        train(&corpus, &vocab, &model, &opts, resume, &mut log)?
    };
    Ok((rd, outcome))
}

pub fn train_cmd(
    cfg: &RunConfig,
    corpus_name: &str,
    resume: Option<&Path>,
) -> Result<TrainReport> {
    let started = Instant::now();
    let (rd, outcome) = run_training(cfg, corpus_name, "train", resume)?;
    Ok(TrainReport {
        corpus: corpus_name.to_string(),
        run_dir: rd,
        epochs: outcome.state.epoch,
        steps: outcome.adam.global_step(),
        elapsed_s: started.elapsed().as_secs_f64(),
        best: outcome.best().map(|r| (r.epoch, r.val)),
        two_stage: cfg.flags.transfer_learning,
    })
}

impl fmt::Display for TrainReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "trained on corpus {} for {} epochs ({} steps{}) in {:.1}s",
            self.corpus,
            self.epochs,
            self.steps,
            if self.two_stage { ", two-stage" } else { "" },
            self.elapsed_s
        )?;
        match &self.best {
            Some((epoch, v)) => {
                writeln!(
                    f,
                    "best epoch {epoch} on validation: BLEU-4 {:.4}  ROUGE-L {:.4}  \
                     CIDEr-D {:.4}  F1 {:.4}",
                    v.bleu4, v.rouge_l, v.cider_d, v.f1
                )?;
                writeln!(
                    f,
                    "best checkpoint: {}",
                    self.run_dir.join(BEST_CHECKPOINT).display()
                )?;
            }
            None => writeln!(f, "no validation split; kept the final epoch")?,
        }
        writeln!(
            f,
            "last checkpoint: {}",
            self.run_dir.join(LAST_CHECKPOINT).display()
        )?;
        write!(f, "event log: {}", self.run_dir.join("events.jsonl").display())
    }
}

// ───────────────────────── metric tables ─────────────────────────

/// Two-column metric rendering: the raw value and the conventional
/// hundred-scaled presentation.
fn metric_table(rows: &[(&str, f64, bool)]) -> String {
    use std::fmt::Write;
    let mut out = String::new();
    writeln!(out, "{:<12} {:>10} {:>10}", "metric", "raw", "x100").unwrap();
    for &(name, value, scaled) in rows {
        if scaled {
            writeln!(out, "{name:<12} {value:>10.4} {:>10.2}", 100.0 * value).unwrap();
        } else {
            writeln!(out, "{name:<12} {value:>10.4} {:>10}", "-").unwrap();
        }
    }
    out
}

fn summary_rows(s: &EvalSummary) -> Vec<(&'static str, f64, bool)> {
    vec![
        ("BLEU-1", s.bleu1, true),
        ("BLEU-2", s.bleu2, true),
        ("BLEU-3", s.bleu3, true),
        ("BLEU-4", s.bleu4, true),
        ("ROUGE-L", s.rouge_l, true),
        ("CIDEr-D", s.cider_d, true),
        ("precision", s.precision, true),
        ("recall", s.recall, true),
        ("F1", s.f1, true),
        ("perplexity", s.perplexity, false),
    ]
}

// ───────────────────────── evaluate ─────────────────────────

#[derive(Debug)]
pub struct EvalReport {
    pub corpus: String,
    pub split: String,
    pub checkpoint: PathBuf,
    pub count: usize,
    pub summary: EvalSummary,
    pub pairs_path: PathBuf,
    pub metrics_path: PathBuf,
}

/// Score a checkpoint on one split: decode every sample, dump the
/// candidate/reference pairs, and report the metric table. Re-scoring
/// the dump with `score` reproduces the table.
pub fn evaluate_cmd(
    cfg: &RunConfig,
    corpus_name: &str,
    split: &str,
    checkpoint: &Path,
) -> Result<EvalReport> {
    let (corpus, vocab) = load_corpus_by_name(cfg, corpus_name)?;
    let (meta, store, _) = load_checkpoint(checkpoint)?;
    if meta.vocab_hash != vocab.sha256_hex() {
        return Err(Error::HashMismatch(format!(
            "checkpoint {} was trained against a different vocabulary than corpus \
             '{corpus_name}'",
            checkpoint.display()
        )));
    }
    let samples = corpus.split(split)?;
    let ev = evaluate(&store, &meta.model, samples, &vocab, &cfg.eval_options()?)?;
    let dir = eval_dir(cfg);
    std::fs::create_dir_all(&dir)?;
    let pairs_path = dir.join(format!("{corpus_name}-{split}-pairs.tsv"));
    export_pairs(&pairs_path, &ev.pairs)?;
    let summary = EvalSummary::from(&ev);
    let metrics_path = dir.join(format!("{corpus_name}-{split}-metrics.json"));
    let json = serde_json::to_string_pretty(&summary)
        .map_err(|e| Error::contract(format!("summary does not serialize: {e}")))?;
    std::fs::write(&metrics_path, json)?;
    Ok(EvalReport {
        corpus: corpus_name.to_string(),
        split: split.to_string(),
        checkpoint: checkpoint.to_path_buf(),
        count: ev.count,
        summary,
        pairs_path,
        metrics_path,
    })
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "evaluated {} {} samples of corpus {} with {}",
            self.count,
            self.split,
            self.corpus,
            self.checkpoint.display()
        )?;
        write!(f, "{}", metric_table(&summary_rows(&self.summary)))?;
        writeln!(f, "pairs: {}", self.pairs_path.display())?;
        write!(f, "metrics: {}", self.metrics_path.display())
    }
}

// ───────────────────────── score ─────────────────────────

#[derive(Debug)]
pub struct ScoreReport {
    pub path: PathBuf,
    pub count: usize,
    /// BLEU-1 through BLEU-4.
    pub bleu: Vec<f64>,
    pub rouge_l: f64,
    pub cider_d: f64,
}

/// Parse a pair dump back into per-sample candidate tokens and
/// reference lists, in file order.
fn read_pairs(path: &Path) -> Result<(Vec<Vec<String>>, Vec<Vec<Vec<String>>>)> {
    let text = std::fs::read_to_string(path)?;
    let file = path.display();
    let mut order: Vec<String> = Vec::new();
    let mut candidates: std::collections::HashMap<String, Vec<String>> = Default::default();
    let mut references: std::collections::HashMap<String, Vec<Vec<String>>> = Default::default();
    for (i, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.splitn(3, '\t').collect();
        let [id, kind, body] = parts[..] else {
            return Err(Error::corrupt(format!(
                "{file} line {}: expected id<TAB>kind<TAB>text",
                i + 1
            )));
        };
        if !candidates.contains_key(id) && !references.contains_key(id) {
            order.push(id.to_string());
        }
        let tokens: Vec<String> = body.split_whitespace().map(str::to_string).collect();
        match kind {
            "candidate" => {
                if candidates.insert(id.to_string(), tokens).is_some() {
                    return Err(Error::corrupt(format!(
                        "{file} line {}: second candidate for sample {id}",
                        i + 1
                    )));
                }
            }
            "reference" => references.entry(id.to_string()).or_default().push(tokens),
            other => {
                return Err(Error::corrupt(format!(
                    "{file} line {}: unknown record kind '{other}'",
                    i + 1
                )))
            }
        }
    }
    let mut cands = Vec::with_capacity(order.len());
    let mut refs = Vec::with_capacity(order.len());
    for id in &order {
        cands.push(candidates.remove(id).ok_or_else(|| {
            Error::corrupt(format!("{file}: sample {id} has no candidate line"))
        })?);
        refs.push(references.remove(id).ok_or_else(|| {
            Error::corrupt(format!("{file}: sample {id} has no reference line"))
        })?);
    }
    if cands.is_empty() {
        return Err(Error::corrupt(format!("{file}: no pairs found")));
    }
    Ok((cands, refs))
}

/// Score a candidate/reference dump on the language metrics alone.
pub fn score(path: &Path) -> Result<ScoreReport> {
    let (cands, refs) = read_pairs(path)?;
    let bleu = corpus_bleu(&cands, &refs, BleuOptions::default())?;
    let rl = rouge_l(&cands, &refs)?;
    let cd = cider_d(&cands, &refs)?;
    Ok(ScoreReport {
        path: path.to_path_buf(),
        count: cands.len(),
        bleu: bleu.scores,
        rouge_l: rl,
        cider_d: cd,
    })
}

impl fmt::Display for ScoreReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "scored {} pairs from {}", self.count, self.path.display())?;
        let rows = vec![
            ("BLEU-1", self.bleu[0], true),
            ("BLEU-2", self.bleu[1], true),
            ("BLEU-3", self.bleu[2], true),
            ("BLEU-4", self.bleu[3], true),
            ("ROUGE-L", self.rouge_l, true),
            ("CIDEr-D", self.cider_d, true),
        ];
        write!(f, "{}", metric_table(&rows))
    }
}

// ───────────────────────── comparison tables ─────────────────────────

fn mean_sd(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Train into `runs/<run_name>` and score its best checkpoint on the
/// test split.
fn train_and_score(cfg: &RunConfig, corpus_name: &str, run_name: &str) -> Result<EvalSummary> {
    let (rd, _) = run_training(cfg, corpus_name, run_name, None)?;
    let report = evaluate_cmd(cfg, corpus_name, "test", &rd.join(BEST_CHECKPOINT))?;
    Ok(report.summary)
}

#[derive(Debug)]
pub struct CompareSchedulesReport {
    pub table: String,
    pub table_path: PathBuf,
    /// One row per schedule, one summary per seed, in argument order.
    pub cells: Vec<((usize, usize), Vec<EvalSummary>)>,
}

/// Train each schedule with each seed and tabulate mean and standard
/// deviation of the test metrics; rows keep the given schedule order.
pub fn compare_schedules(
    cfg: &RunConfig,
    corpus_name: &str,
    schedules: &[(usize, usize)],
    seeds: &[u64],
) -> Result<CompareSchedulesReport> {
    if schedules.is_empty() {
        return Err(Error::config("no schedules given"));
    }
    if seeds.is_empty() {
        return Err(Error::config("no seeds given"));
    }
    let mut cells = Vec::new();
    for &(m, n) in schedules {
        let mut row = Vec::new();
        for &seed in seeds {
            let mut c = cfg.clone();
            c.schedule.m = m;
            c.schedule.n = n;
            c.seed = seed;
            c.validate()?;
            eprintln!("schedule ({m},{n}) seed {seed}");
            row.push(train_and_score(
                &c,
                corpus_name,
                &format!("sched-{m}-{n}-seed{seed}"),
            )?);
        }
        cells.push(((m, n), row));
    }

    use std::fmt::Write;
    let mut table = String::new();
    writeln!(
        table,
        "schedule comparison on corpus {corpus_name} (test split), seeds {seeds:?}"
    )
    .unwrap();
    let metrics: [(&str, fn(&EvalSummary) -> f64); 7] = [
        ("BLEU-1", |s| s.bleu1),
        ("BLEU-2", |s| s.bleu2),
        ("BLEU-3", |s| s.bleu3),
        ("BLEU-4", |s| s.bleu4),
        ("ROUGE-L", |s| s.rouge_l),
        ("CIDEr-D", |s| s.cider_d),
        ("F1", |s| s.f1),
    ];
    write!(table, "{:<10}", "schedule").unwrap();
    for (name, _) in metrics {
        write!(table, " {name:>15}").unwrap();
    }
    table.push('\n');
    for ((m, n), row) in &cells {
        write!(table, "{:<10}", format!("({m},{n})")).unwrap();
        for (_, pick) in metrics {
            let values: Vec<f64> = row.iter().map(pick).collect();
            let (mean, sd) = mean_sd(&values);
            write!(table, " {:>15}", format!("{mean:.4}±{sd:.4}")).unwrap();
        }
        table.push('\n');
    }
    let dir = tables_dir(cfg);
    std::fs::create_dir_all(&dir)?;
    let table_path = dir.join("schedules.txt");
    std::fs::write(&table_path, &table)?;
    Ok(CompareSchedulesReport {
        table,
        table_path,
        cells,
    })
}

impl fmt::Display for CompareSchedulesReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.table)?;
        write!(f, "table: {}", self.table_path.display())
    }
}

#[derive(Debug)]
pub struct CompareAblationsReport {
    pub table: String,
    pub table_path: PathBuf,
    /// (external_knowledge, alternate_training, transfer_learning) per
    /// row, with the row's test summary.
    pub cells: Vec<((bool, bool, bool), EvalSummary)>,
}

/// Train every combination of the three study toggles and tabulate the
/// test metrics, ending with everything enabled. Turning external
/// knowledge off forces the pretraining pass count to zero.
pub fn compare_ablations(cfg: &RunConfig, corpus_name: &str) -> Result<CompareAblationsReport> {
    let mut cells = Vec::new();
    for ek in [false, true] {
        for ats in [false, true] {
            for tls in [false, true] {
                let mut c = cfg.clone();
                c.flags.external_knowledge = ek;
                c.flags.alternate_training = ats;
                c.flags.transfer_learning = tls;
                if !ek {
                    c.schedule.m = 0;
                }
                c.validate()?;
                let run_name = format!(
                    "abl-ek{}-ats{}-tls{}",
                    ek as u8, ats as u8, tls as u8
                );
                eprintln!(
                    "ablation: external_knowledge={ek} alternate_training={ats} \
                     transfer_learning={tls}"
                );
                cells.push(((ek, ats, tls), train_and_score(&c, corpus_name, &run_name)?));
            }
        }
    }

    use std::fmt::Write;
    let mut table = String::new();
    writeln!(
        table,
        "ablations on corpus {corpus_name} (test split), seed {}",
        cfg.seed
    )
    .unwrap();
    writeln!(
        table,
        "{:<5}{:<5}{:<5}{:>9}{:>9}{:>9}{:>9}{:>9}{:>9}{:>9}",
        "EK", "ATS", "TLS", "BLEU-1", "BLEU-2", "BLEU-3", "BLEU-4", "ROUGE-L", "CIDEr-D", "F1"
    )
    .unwrap();
    let mark = |b: bool| if b { "yes" } else { "no" };
    for ((ek, ats, tls), s) in &cells {
        writeln!(
            table,
            "{:<5}{:<5}{:<5}{:>9.4}{:>9.4}{:>9.4}{:>9.4}{:>9.4}{:>9.4}{:>9.4}",
            mark(*ek),
            mark(*ats),
            mark(*tls),
            s.bleu1,
            s.bleu2,
            s.bleu3,
            s.bleu4,
            s.rouge_l,
            s.cider_d,
            s.f1
        )
        .unwrap();
    }
    let dir = tables_dir(cfg);
    std::fs::create_dir_all(&dir)?;
    let table_path = dir.join("ablations.txt");
    std::fs::write(&table_path, &table)?;
    Ok(CompareAblationsReport {
        table,
        table_path,
        cells,
    })
}

impl fmt::Display for CompareAblationsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.table)?;
        write!(f, "table: {}", self.table_path.display())
    }
}

// ───────────────────────── export-attention ─────────────────────────

#[derive(Debug)]
pub struct ExportAttentionReport {
    pub sample_id: String,
    pub branch: String,
    pub binary_path: PathBuf,
    pub text_path: PathBuf,
    pub summary: String,
}

/// Which sample of the split to export.
#[derive(Clone, Debug)]
pub enum SampleSelector {
    Index(usize),
    Id(String),
}

/// Record the encoder's attention maps for one sample and write both
/// the binary export and a plain-text summary of the strongest
/// attention targets per terminology.
pub fn export_attention(
    cfg: &RunConfig,
    corpus_name: &str,
    split: &str,
    selector: &SampleSelector,
    checkpoint: &Path,
    top_k: usize,
) -> Result<ExportAttentionReport> {
    if top_k == 0 {
        return Err(Error::config("--top-k must be at least 1"));
    }
    let (corpus, vocab) = load_corpus_by_name(cfg, corpus_name)?;
    let (meta, store, _) = load_checkpoint(checkpoint)?;
    if meta.vocab_hash != vocab.sha256_hex() {
        return Err(Error::HashMismatch(format!(
            "checkpoint {} was trained against a different vocabulary than corpus \
             '{corpus_name}'",
            checkpoint.display()
        )));
    }
    if corpus.grammar.n_terms() != meta.model.n_terms {
        return Err(Error::config(format!(
            "corpus '{corpus_name}' defines {} terminologies but the checkpoint expects {}",
            corpus.grammar.n_terms(),
            meta.model.n_terms
        )));
    }
    let samples = corpus.split(split)?;
    let sample = match selector {
        SampleSelector::Id(id) => samples.iter().find(|s| &s.id == id).ok_or_else(|| {
            Error::config(format!("no sample '{id}' in the {split} split of {corpus_name}"))
        })?,
        SampleSelector::Index(i) => samples.get(*i).ok_or_else(|| {
            Error::config(format!(
                "--index {i} is out of range (the {split} split has {} samples)",
                samples.len()
            ))
        })?,
    };
    let view = sample.view();
    let enc_opts = cfg.eval_options()?.encode_options();
    let record = capture_attention(&store, &meta.model, &view, enc_opts);
    let terminology: Vec<String> = corpus.grammar.terms.iter().map(|t| t.name.clone()).collect();
    let header = attention_header(&sample.id, &meta.model, &view, &terminology, &vocab, &record);
    let dir = attention_dir(cfg);
    std::fs::create_dir_all(&dir)?;
    let binary_path = dir.join(format!("{}.agat", sample.id));
    save_attention(&binary_path, &header, &record)?;
    let summary = attention_summary(&header, &record, top_k);
    let text_path = dir.join(format!("{}.txt", sample.id));
    std::fs::write(&text_path, &summary)?;
    Ok(ExportAttentionReport {
        sample_id: sample.id.clone(),
        branch: header.branch.clone(),
        binary_path,
        text_path,
        summary,
    })
}

impl fmt::Display for ExportAttentionReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.summary)?;
        writeln!(f, "attention maps: {}", self.binary_path.display())?;
        write!(f, "summary: {}", self.text_path.display())
    }
}

// ───────────────────────── list-argument parsing ─────────────────────────

/// Semicolon-separated schedule pairs: "1,1;1,3" → [(1,1), (1,3)].
pub fn parse_schedules(text: &str) -> Result<Vec<(usize, usize)>> {
    let mut out = Vec::new();
    for part in text.split(';') {
        let part = part.trim();
        if part.is_empty() {
            continue;
        }
        let bad = || Error::config(format!("schedule '{part}' is not of the form m,n"));
        let (m, n) = part.split_once(',').ok_or_else(bad)?;
        out.push((
            m.trim().parse().map_err(|_| bad())?,
            n.trim().parse().map_err(|_| bad())?,
        ));
    }
    if out.is_empty() {
        return Err(Error::config("no schedules given"));
    }
    Ok(out)
}

/// Comma-separated seed list: "0,1,2".
pub fn parse_seeds(text: &str) -> Result<Vec<u64>> {
    let mut out = Vec::new();
    for part in text.split(',') {
        let part = part.trim();
        if part.is_empty() {
            continue;
        }
        out.push(part.parse().map_err(|_| {
            Error::config(format!("seed '{part}' is not a non-negative integer"))
        })?);
    }
    if out.is_empty() {
        return Err(Error::config("no seeds given"));
    }
    Ok(out)
}
