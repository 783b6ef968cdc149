//! Deterministic synthetic corpus generation: draws terminology
//! subsets, plants their visual signatures into noisy grids, renders
//! the paired reports and textbook documents, and tokenizes everything
//! against a vocabulary built from training material only. Every split
//! draws from its own RNG stream of the grammar seed, so resizing one
//! split never disturbs another.

use rand::distributions::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Normal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grammar::{join_sentences, Grammar};
use crate::model::SampleView;
use crate::vocab::Vocabulary;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SampleKind {
    Textbook,
    Transfer,
}

impl SampleKind {
    pub fn code(self) -> u8 {
        match self {
            SampleKind::Textbook => 0,
            SampleKind::Transfer => 1,
        }
    }

    pub fn from_code(code: u8) -> Result<SampleKind> {
        match code {
            0 => Ok(SampleKind::Textbook),
            1 => Ok(SampleKind::Transfer),
            other => Err(Error::corrupt(format!("unknown sample kind byte {other}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub kind: SampleKind,
    /// Multi-hot terminology labels packed as a bitmask (bit i == term i).
    pub labels: u64,
    /// Same labels expanded for the classification loss.
    pub label_vec: Vec<f32>,
    pub grid: Option<Vec<f32>>,
    /// The rendered text (reconstructible from tokens once tokenized).
    pub text: String,
    /// Token ids including begin/end markers; empty until tokenized.
    pub tokens: Vec<usize>,
}

impl Sample {
    pub fn view(&self) -> SampleView<'_> {
        assert!(
            !self.tokens.is_empty(),
            "sample {} used before tokenization",
            self.id
        );
        match self.kind {
            SampleKind::Textbook => SampleView::Pretrain {
                tokens: &self.tokens,
                labels: &self.label_vec,
            },
            SampleKind::Transfer => SampleView::Transfer {
                grid: self.grid.as_deref().expect("transfer samples carry a grid"),
                tokens: &self.tokens,
                labels: &self.label_vec,
            },
        }
    }
}

pub fn labels_to_vec(mask: u64, n_terms: usize) -> Vec<f32> {
    (0..n_terms)
        .map(|i| if mask & (1 << i) != 0 { 1.0 } else { 0.0 })
        .collect()
}

pub fn labels_to_mask(bits: &[bool]) -> u64 {
    bits.iter()
        .enumerate()
        .fold(0u64, |m, (i, &b)| if b { m | (1 << i) } else { m })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusSizes {
    pub textbook: usize,
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl Default for CorpusSizes {
    fn default() -> Self {
        CorpusSizes {
            textbook: 500,
            train: 2000,
            val: 200,
            test: 200,
        }
    }
}

impl CorpusSizes {
    /// Smaller defaults for the sibling corpus of transfer experiments.
    pub fn small() -> Self {
        CorpusSizes {
            textbook: 150,
            train: 400,
            val: 100,
            test: 100,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Corpus {
    pub grammar: Grammar,
    pub textbook: Vec<Sample>,
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
}

pub const SPLITS: [&str; 4] = ["textbook", "train", "val", "test"];

impl Corpus {
    pub fn split(&self, name: &str) -> Result<&[Sample]> {
        match name {
            "textbook" => Ok(&self.textbook),
            "train" => Ok(&self.train),
            "val" => Ok(&self.val),
            "test" => Ok(&self.test),
            other => Err(Error::config(format!(
                "unknown split '{other}' (expected one of {SPLITS:?})"
            ))),
        }
    }

    pub fn splits(&self) -> impl Iterator<Item = (&'static str, &[Sample])> {
        [
            ("textbook", self.textbook.as_slice()),
            ("train", self.train.as_slice()),
            ("val", self.val.as_slice()),
            ("test", self.test.as_slice()),
        ]
        .into_iter()
    }

    /// Tokenize every sample in place and verify the length budget.
    pub fn tokenize(&mut self, vocab: &Vocabulary, max_len: usize) -> Result<()> {
        for samples in [
            &mut self.textbook,
            &mut self.train,
            &mut self.val,
            &mut self.test,
        ] {
            for s in samples.iter_mut() {
                s.tokens = vocab.tokenize(&s.text);
                if s.tokens.len() > max_len {
                    return Err(Error::config(format!(
                        "sample {} tokenizes to {} tokens, over the max_len {} budget",
                        s.id,
                        s.tokens.len(),
                        max_len
                    )));
                }
            }
        }
        Ok(())
    }
}

fn textbook_capacity(g: &Grammar) -> u128 {
    let n = g.n_terms() as u128;
    let per_term = (g.textbook_forms.len() * g.n_variants()) as u128;
    let mut total: u128 = if g.textbook_normal_prob > 0.0 {
        g.normal_templates.len() as u128
    } else {
        0
    };
    let mut choose: u128 = 1;
    let mut pow: u128 = 1;
    for k in 1..=g.textbook_max_terms as u128 {
        choose = choose.saturating_mul(n - k + 1) / k;
        pow = pow.saturating_mul(per_term);
        total = total.saturating_add(choose.saturating_mul(pow));
    }
    total
}

fn draw_subset(rng: &mut ChaCha8Rng, n_terms: usize, max_terms: usize) -> Vec<usize> {
    let k = rng.gen_range(1..=max_terms);
    let mut picked = Vec::with_capacity(k);
    while picked.len() < k {
        let t = rng.gen_range(0..n_terms);
        if !picked.contains(&t) {
            picked.push(t);
        }
    }
    picked.sort_unstable();
    picked
}

fn noise_grid(rng: &mut ChaCha8Rng, g: &Grammar) -> Vec<f32> {
    let dist = Normal::new(0.0, g.noise_sd).expect("validated noise_sd");
    (0..g.grid_values())
        .map(|_| dist.sample(rng) as f32)
        .collect()
}

fn transfer_sample(rng: &mut ChaCha8Rng, g: &Grammar, id: String) -> Sample {
    let normal = rng.gen::<f64>() < g.normal_prob;
    let (picks, normal_choice) = if normal {
        (Vec::new(), rng.gen_range(0..g.normal_templates.len()))
    } else {
        let terms = draw_subset(rng, g.n_terms(), g.max_terms);
        let picks: Vec<(usize, usize)> = terms
            .into_iter()
            .map(|t| (t, rng.gen_range(0..g.n_variants())))
            .collect();
        (picks, 0)
    };
    let mut grid = noise_grid(rng, g);
    g.plant(&mut grid, &picks);
    let text = join_sentences(&g.report_sentences(&picks, normal_choice));
    let labels = picks.iter().fold(0u64, |m, &(t, _)| m | (1 << t));
    Sample {
        id,
        kind: SampleKind::Transfer,
        labels,
        label_vec: labels_to_vec(labels, g.n_terms()),
        grid: Some(grid),
        text,
        tokens: Vec::new(),
    }
}

fn textbook_sample(rng: &mut ChaCha8Rng, g: &Grammar, id: String) -> Sample {
    let normal = rng.gen::<f64>() < g.textbook_normal_prob;
    let (picks, normal_choice) = if normal {
        (Vec::new(), rng.gen_range(0..g.normal_templates.len()))
    } else {
        let terms = draw_subset(rng, g.n_terms(), g.textbook_max_terms);
        let picks: Vec<(usize, usize, usize)> = terms
            .into_iter()
            .map(|t| {
                (
                    t,
                    rng.gen_range(0..g.textbook_forms.len()),
                    rng.gen_range(0..g.n_variants()),
                )
            })
            .collect();
        (picks, 0)
    };
    let text = join_sentences(&g.textbook_sentences(&picks, normal_choice));
    let labels = picks.iter().fold(0u64, |m, &(t, _, _)| m | (1 << t));
    Sample {
        id,
        kind: SampleKind::Textbook,
        labels,
        label_vec: labels_to_vec(labels, g.n_terms()),
        grid: None,
        text,
        tokens: Vec::new(),
    }
}

/// Generate all four splits of one grammar's corpus. Samples are not
/// yet tokenized; build a vocabulary over the training material first.
pub fn generate_corpus(grammar: &Grammar, sizes: CorpusSizes) -> Result<Corpus> {
    grammar.validate()?;
    let transfer_requested = (sizes.train + sizes.val + sizes.test) as u128;
    if transfer_requested > grammar.transfer_capacity() {
        return Err(Error::config(format!(
            "requested {} transfer samples but grammar '{}' can express only {} \
             distinct contents",
            transfer_requested,
            grammar.name,
            grammar.transfer_capacity()
        )));
    }
    if sizes.textbook as u128 > textbook_capacity(grammar) {
        return Err(Error::config(format!(
            "requested {} textbook documents but grammar '{}' can express only {} \
             distinct contents",
            sizes.textbook,
            grammar.name,
            textbook_capacity(grammar)
        )));
    }
    let stream_rng = |stream: u64| {
        let mut rng = ChaCha8Rng::seed_from_u64(grammar.seed);
        rng.set_stream(stream);
        rng
    };
    let mut corpus = Corpus {
        grammar: grammar.clone(),
        textbook: Vec::with_capacity(sizes.textbook),
        train: Vec::with_capacity(sizes.train),
        val: Vec::with_capacity(sizes.val),
        test: Vec::with_capacity(sizes.test),
    };
    let mut rng = stream_rng(0);
    for i in 0..sizes.textbook {
        let id = format!("{}-textbook-{:05}", grammar.name, i);
        corpus.textbook.push(textbook_sample(&mut rng, grammar, id));
    }
    for (stream, split, count) in [
        (1u64, "train", sizes.train),
        (2, "val", sizes.val),
        (3, "test", sizes.test),
    ] {
        let mut rng = stream_rng(stream);
        let out = match split {
            "train" => &mut corpus.train,
            "val" => &mut corpus.val,
            _ => &mut corpus.test,
        };
        for i in 0..count {
            let id = format!("{}-{}-{:05}", grammar.name, split, i);
            out.push(transfer_sample(&mut rng, grammar, id));
        }
    }
    Ok(corpus)
}

/// Vocabulary over the training material (textbook + train splits) of
/// every given corpus; validation and test text stays out.
pub fn build_vocabulary(corpora: &[&Corpus]) -> Vocabulary {
    let mut texts = Vec::new();
    for c in corpora {
        for s in c.textbook.iter().chain(&c.train) {
            texts.push(s.text.as_str());
        }
    }
    Vocabulary::from_corpus(texts)
}
