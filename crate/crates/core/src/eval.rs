//! Frozen-model evaluation over a sample set: generate a report per
//! sample, score the corpus with the text-overlap metrics, read the
//! terminology classifier at a fixed threshold, and measure
//! teacher-forced perplexity.

use crate::datagen::Sample;
use crate::decoder::{generate, Decode};
use crate::encoder::EncodeOptions;
use crate::error::{Error, Result};
use crate::metrics::{
    cider_d, corpus_bleu, micro_prf, rouge_l, BleuOptions, BleuReport, Prf,
};
use crate::model::{eval_sample_values, ModelConfig};
use crate::optim::ParamStore;
use crate::scalar::Scalar;
use crate::vocab::{Vocabulary, BOS, EOS, PAD};

#[derive(Clone, Copy, Debug)]
pub struct EvalOptions {
    pub decode: Decode,
    /// Attend across the terminology/context boundary (turned off for
    /// the isolation ablation).
    pub co_attention: bool,
    /// Classifier decision threshold: predicted present when the
    /// probability is strictly above it.
    pub threshold: f64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            decode: Decode::Greedy,
            co_attention: true,
            threshold: 0.5,
        }
    }
}

impl EvalOptions {
    pub fn encode_options(&self) -> EncodeOptions {
        EncodeOptions {
            isolate_segments: !self.co_attention,
            ..EncodeOptions::default()
        }
    }
}

/// One generated/reference pair, in token ids and rendered text.
#[derive(Clone, Debug)]
pub struct GeneratedPair {
    pub id: String,
    pub candidate: Vec<usize>,
    pub reference: Vec<usize>,
    pub candidate_text: String,
    pub reference_text: String,
}

#[derive(Clone, Debug)]
pub struct Evaluation {
    pub count: usize,
    pub bleu: BleuReport,
    pub rouge_l: f64,
    pub cider_d: f64,
    pub terms: Prf,
    pub perplexity: f64,
    pub pairs: Vec<GeneratedPair>,
}

impl Evaluation {
    pub fn bleu_n(&self, n: usize) -> f64 {
        self.bleu.scores[n - 1]
    }
}

/// Content tokens of a sequence: markers dropped, truncated at the
/// first end marker.
pub fn content_tokens(tokens: &[usize]) -> Vec<usize> {
    tokens
        .iter()
        .take_while(|&&t| t != EOS)
        .filter(|&&t| t != BOS && t != PAD)
        .copied()
        .collect()
}

pub fn evaluate<S: Scalar>(
    store: &ParamStore<S>,
    cfg: &ModelConfig,
    samples: &[Sample],
    vocab: &Vocabulary,
    opts: &EvalOptions,
) -> Result<Evaluation> {
    if samples.is_empty() {
        return Err(Error::contract("evaluation over an empty sample set"));
    }
    let enc_opts = opts.encode_options();
    let mut pairs = Vec::with_capacity(samples.len());
    let mut predicted = Vec::with_capacity(samples.len());
    let mut gold = Vec::with_capacity(samples.len());
    let mut nll = 0.0f64;
    let mut scored_tokens = 0usize;
    for s in samples {
        let view = s.view();
        let ev = eval_sample_values(store, cfg, &view, enc_opts);
        let generated = generate(store, cfg, &ev.term_feats, opts.decode)?;
        let candidate = content_tokens(&generated);
        let reference = content_tokens(&s.tokens);
        pairs.push(GeneratedPair {
            id: s.id.clone(),
            candidate_text: vocab.detokenize(&candidate),
            reference_text: vocab.detokenize(&reference),
            candidate,
            reference,
        });
        predicted.push(ev.probs.iter().map(|&p| p > opts.threshold).collect());
        gold.push(view.labels().iter().map(|&l| l > 0.5).collect());
        nll += ev.nll;
        scored_tokens += ev.scored_tokens;
    }
    let candidates: Vec<Vec<usize>> = pairs.iter().map(|p| p.candidate.clone()).collect();
    let references: Vec<Vec<Vec<usize>>> =
        pairs.iter().map(|p| vec![p.reference.clone()]).collect();
    let bleu = corpus_bleu(&candidates, &references, BleuOptions::default())?;
    let rouge_l = rouge_l(&candidates, &references)?;
    let cider_d = cider_d(&candidates, &references)?;
    let terms = micro_prf(&predicted, &gold)?;
    if scored_tokens == 0 {
        return Err(Error::contract(
            "perplexity: sample set has no scoreable tokens".to_string(),
        ));
    }
    let perplexity = (nll / scored_tokens as f64).exp();
    Ok(Evaluation {
        count: samples.len(),
        bleu,
        rouge_l,
        cider_d,
        terms,
        perplexity,
        pairs,
    })
}

/// The headline numbers of an evaluation, for tables and event logs.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct EvalSummary {
    pub bleu1: f64,
    pub bleu2: f64,
    pub bleu3: f64,
    pub bleu4: f64,
    pub rouge_l: f64,
    pub cider_d: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub perplexity: f64,
}

impl From<&Evaluation> for EvalSummary {
    fn from(e: &Evaluation) -> Self {
        EvalSummary {
            bleu1: e.bleu_n(1),
            bleu2: e.bleu_n(2),
            bleu3: e.bleu_n(3),
            bleu4: e.bleu_n(4),
            rouge_l: e.rouge_l,
            cider_d: e.cider_d,
            precision: e.terms.precision,
            recall: e.terms.recall,
            f1: e.terms.f1,
            perplexity: e.perplexity,
        }
    }
}

/// Write one candidate/reference pair per line for inspection.
pub fn export_pairs(path: &std::path::Path, pairs: &[GeneratedPair]) -> Result<()> {
    use std::io::Write;
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for p in pairs {
        writeln!(f, "{}\tcandidate\t{}", p.id, p.candidate_text)?;
        writeln!(f, "{}\treference\t{}", p.id, p.reference_text)?;
    }
    f.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{build_vocabulary, generate_corpus, CorpusSizes};
    use crate::grammar::grammar_alpha;
    use crate::model::init_params;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_setup() -> (ModelConfig, ParamStore<f32>, Vec<Sample>, Vocabulary) {
        let sizes = CorpusSizes {
            textbook: 10,
            train: 20,
            val: 6,
            test: 6,
        };
        let mut corpus = generate_corpus(&grammar_alpha(), sizes).unwrap();
        let vocab = build_vocabulary(&[&corpus]);
        corpus.tokenize(&vocab, 64).unwrap();
        let cfg = ModelConfig {
            model_dim: 16,
            heads: 2,
            encoder_layers: 1,
            decoder_blocks: 1,
            term_dim: 8,
            visual_dim: 8,
            text_dim: 8,
            n_terms: 16,
            grid_h: 7,
            grid_w: 7,
            channels: 4,
            vocab_size: vocab.len(),
            max_len: 64,
            dropout: 0.0,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let store = init_params::<f32>(&cfg, &mut rng);
        (cfg, store, corpus.val, vocab)
    }

    #[test]
    fn content_tokens_strip_markers_and_stop_at_end() {
        assert_eq!(content_tokens(&[BOS, 7, 9, EOS]), vec![7, 9]);
        assert_eq!(content_tokens(&[BOS, 7, EOS, 9, EOS]), vec![7]);
        assert_eq!(content_tokens(&[PAD, BOS, EOS]), Vec::<usize>::new());
        assert_eq!(content_tokens(&[5, 6]), vec![5, 6]);
    }

    #[test]
    fn untrained_model_evaluates_with_low_scores_and_full_bookkeeping() {
        let (cfg, store, val, vocab) = small_setup();
        let eval = evaluate(&store, &cfg, &val, &vocab, &EvalOptions::default()).unwrap();
        assert_eq!(eval.count, val.len());
        assert_eq!(eval.pairs.len(), val.len());
        for p in &eval.pairs {
            assert!(!p.reference.is_empty());
            assert_eq!(vocab.tokenize(&p.reference_text).len(), p.reference.len() + 2);
        }
        assert!(eval.bleu_n(4) < 0.5, "untrained BLEU-4 {}", eval.bleu_n(4));
        assert!((0.0..=1.0).contains(&eval.rouge_l));
        assert!((0.0..=10.0).contains(&eval.cider_d));
        assert!((0.0..=1.0).contains(&eval.terms.f1));
        assert!(eval.perplexity > 1.0);
        let s = EvalSummary::from(&eval);
        assert_eq!(s.bleu4, eval.bleu_n(4));
        assert_eq!(s.f1, eval.terms.f1);
    }

    #[test]
    fn references_equal_candidates_scores_perfectly() {
        // Bypass the model: feed the metric path a perfect system by
        // evaluating with the references themselves as candidates.
        let (_, _, val, _) = small_setup();
        let candidates: Vec<Vec<usize>> = val.iter().map(|s| content_tokens(&s.tokens)).collect();
        let refs: Vec<Vec<Vec<usize>>> = candidates.iter().map(|c| vec![c.clone()]).collect();
        let bleu = corpus_bleu(&candidates, &refs, BleuOptions::default()).unwrap();
        assert_eq!(bleu.scores[3], 1.0);
        assert_eq!(rouge_l(&candidates, &refs).unwrap(), 1.0);
    }

    #[test]
    fn empty_sample_set_is_a_contract_error() {
        let (cfg, store, _, vocab) = small_setup();
        let err = evaluate(&store, &cfg, &[], &vocab, &EvalOptions::default()).unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn co_attention_toggle_changes_the_outcome() {
        let (cfg, store, val, vocab) = small_setup();
        let on = evaluate(&store, &cfg, &val, &vocab, &EvalOptions::default()).unwrap();
        let off = evaluate(
            &store,
            &cfg,
            &val,
            &vocab,
            &EvalOptions {
                co_attention: false,
                ..EvalOptions::default()
            },
        )
        .unwrap();
        assert_ne!(
            on.perplexity, off.perplexity,
            "segment isolation should change encoder outputs"
        );
    }

    #[test]
    fn pair_export_writes_two_lines_per_sample() {
        let (cfg, store, val, vocab) = small_setup();
        let eval = evaluate(&store, &cfg, &val, &vocab, &EvalOptions::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pairs.tsv");
        export_pairs(&path, &eval.pairs).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 2 * val.len());
        assert!(text.lines().all(|l| l.split('\t').count() == 3));
    }

    #[test]
    fn evaluation_is_deterministic() {
        let (cfg, store, val, vocab) = small_setup();
        let a = evaluate(&store, &cfg, &val, &vocab, &EvalOptions::default()).unwrap();
        let b = evaluate(&store, &cfg, &val, &vocab, &EvalOptions::default()).unwrap();
        assert_eq!(a.bleu.scores, b.bleu.scores);
        assert_eq!(a.cider_d, b.cider_d);
        assert_eq!(a.perplexity, b.perplexity);
        for (x, y) in a.pairs.iter().zip(&b.pairs) {
            assert_eq!(x.candidate, y.candidate);
        }
    }
}
