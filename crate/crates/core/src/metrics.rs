//! Caption metrics: corpus-level BLEU-1..4, sentence-level ROUGE-L,
//! CIDEr-D, and micro-averaged classification precision/recall/F1.
//! All functions are pure and iterate in deterministic (sorted) order,
//! so identical inputs produce bitwise-identical outputs.

use std::collections::BTreeMap;

use crate::error::{Error, Result};

pub const METRIC_MAX_N: usize = 4;
pub const ROUGE_BETA: f64 = 1.2;
pub const CIDER_SIGMA: f64 = 6.0;
pub const CIDER_SCALE: f64 = 10.0;

fn ngram_counts<T: Ord + Clone>(seq: &[T], n: usize) -> BTreeMap<Vec<T>, u64> {
    let mut counts = BTreeMap::new();
    if seq.len() >= n && n >= 1 {
        for window in seq.windows(n) {
            *counts.entry(window.to_vec()).or_insert(0) += 1;
        }
    }
    counts
}

fn check_corpus<T>(candidates: &[Vec<T>], references: &[Vec<Vec<T>>]) -> Result<()> {
    if candidates.is_empty() {
        return Err(Error::contract("metric on an empty corpus".to_string()));
    }
    if candidates.len() != references.len() {
        return Err(Error::contract(format!(
            "{} candidates but {} reference sets",
            candidates.len(),
            references.len()
        )));
    }
    for (i, refs) in references.iter().enumerate() {
        if refs.is_empty() {
            return Err(Error::contract(format!(
                "candidate {i} has no references"
            )));
        }
    }
    Ok(())
}

// ───────────────────────── BLEU ─────────────────────────

#[derive(Clone, Copy, Debug)]
pub struct BleuOptions {
    pub max_n: usize,
    /// When set, a zero n-gram match count is replaced by this epsilon
    /// in the precision numerator, keeping log-time scores readable.
    /// Reported table scores leave it off.
    pub smooth_eps: Option<f64>,
}

impl Default for BleuOptions {
    fn default() -> Self {
        BleuOptions {
            max_n: METRIC_MAX_N,
            smooth_eps: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct BleuReport {
    /// BLEU-1 .. BLEU-max_n.
    pub scores: Vec<f64>,
    /// Modified n-gram precisions p_1 .. p_max_n.
    pub precisions: Vec<f64>,
    pub brevity_penalty: f64,
    pub candidate_tokens: usize,
    pub reference_tokens: usize,
    pub warnings: Vec<String>,
}

/// Corpus-level BLEU: clipped modified n-gram precision pooled over the
/// corpus, uniform-weight geometric mean per order, times the brevity
/// penalty exp(min(0, 1 − r/c)). The effective reference length r sums
/// each pair's reference length closest to its candidate length, ties
/// toward the shorter reference.
pub fn corpus_bleu<T: Ord + Clone>(
    candidates: &[Vec<T>],
    references: &[Vec<Vec<T>>],
    opts: BleuOptions,
) -> Result<BleuReport> {
    check_corpus(candidates, references)?;
    if opts.max_n == 0 {
        return Err(Error::contract("bleu max_n must be positive".to_string()));
    }
    let mut warnings = Vec::new();
    let mut matched = vec![0u64; opts.max_n];
    let mut possible = vec![0u64; opts.max_n];
    let mut cand_len = 0usize;
    let mut ref_len = 0usize;
    for (cand, refs) in candidates.iter().zip(references) {
        cand_len += cand.len();
        ref_len += refs
            .iter()
            .map(|r| r.len())
            .min_by_key(|&l| {
                let diff = (l as i64 - cand.len() as i64).unsigned_abs();
                (diff, l)
            })
            .expect("reference sets verified nonempty");
        for n in 1..=opts.max_n {
            let cand_counts = ngram_counts(cand, n);
            let mut best = BTreeMap::new();
            for r in refs {
                for (gram, count) in ngram_counts(r, n) {
                    let slot = best.entry(gram).or_insert(0);
                    *slot = (*slot).max(count);
                }
            }
            for (gram, count) in &cand_counts {
                matched[n - 1] += (*count).min(best.get(gram).copied().unwrap_or(0));
            }
            possible[n - 1] += cand.len().saturating_sub(n - 1) as u64;
        }
    }
    let precisions: Vec<f64> = (0..opts.max_n)
        .map(|i| {
            if possible[i] == 0 {
                0.0
            } else {
                let num = if matched[i] == 0 {
                    opts.smooth_eps.unwrap_or(0.0)
                } else {
                    matched[i] as f64
                };
                num / possible[i] as f64
            }
        })
        .collect();
    let brevity_penalty = if cand_len == 0 {
        warnings.push("all candidates are empty; BLEU forced to 0".to_string());
        0.0
    } else {
        (1.0 - ref_len as f64 / cand_len as f64).min(0.0).exp()
    };
    let scores: Vec<f64> = (1..=opts.max_n)
        .map(|k| {
            if precisions[..k].iter().any(|&p| p == 0.0) {
                0.0
            } else {
                let mean_log: f64 =
                    precisions[..k].iter().map(|p| p.ln()).sum::<f64>() / k as f64;
                brevity_penalty * mean_log.exp()
            }
        })
        .collect();
    Ok(BleuReport {
        scores,
        precisions,
        brevity_penalty,
        candidate_tokens: cand_len,
        reference_tokens: ref_len,
        warnings,
    })
}

// ───────────────────────── ROUGE-L ─────────────────────────

fn lcs_len<T: Eq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                prev[j + 1].max(cur[j])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Sentence-level ROUGE-L of one candidate against one reference:
/// F = (1+β²)·P·R / (R + β²·P) with P, R from the longest common
/// subsequence; degenerate inputs score 0.
pub fn rouge_l_pair<T: Eq>(candidate: &[T], reference: &[T]) -> f64 {
    if candidate.is_empty() || reference.is_empty() {
        return 0.0;
    }
    let lcs = lcs_len(candidate, reference) as f64;
    if lcs == 0.0 {
        return 0.0;
    }
    let p = lcs / candidate.len() as f64;
    let r = lcs / reference.len() as f64;
    let b2 = ROUGE_BETA * ROUGE_BETA;
    (1.0 + b2) * p * r / (r + b2 * p)
}

/// Mean over the corpus of each pair's best ROUGE-L across its
/// references.
pub fn rouge_l<T: Ord + Clone>(
    candidates: &[Vec<T>],
    references: &[Vec<Vec<T>>],
) -> Result<f64> {
    check_corpus(candidates, references)?;
    let total: f64 = candidates
        .iter()
        .zip(references)
        .map(|(cand, refs)| {
            refs.iter()
                .map(|r| rouge_l_pair(cand, r))
                .fold(0.0f64, f64::max)
        })
        .sum();
    Ok(total / candidates.len() as f64)
}

// ───────────────────────── CIDEr-D ─────────────────────────

/// Per-pair CIDEr-D scores. IDF is ln(|corpus| / document-frequency)
/// over the reference sides; per order n, similarity is the clipped
/// candidate/reference TF-IDF dot product over the unclipped norms,
/// damped by the Gaussian length penalty; a pair's score is the scaled
/// mean over orders and references. Zero-norm vectors score 0.
pub fn cider_d_scores<T: Ord + Clone>(
    candidates: &[Vec<T>],
    references: &[Vec<Vec<T>>],
) -> Result<Vec<f64>> {
    check_corpus(candidates, references)?;
    let n_docs = references.len() as f64;
    // document frequency per order: in how many pairs' reference sets
    // each n-gram appears
    let mut df: Vec<BTreeMap<Vec<T>, u64>> = vec![BTreeMap::new(); METRIC_MAX_N];
    for refs in references {
        for n in 1..=METRIC_MAX_N {
            let mut seen = BTreeMap::new();
            for r in refs {
                for gram in ngram_counts(r, n).into_keys() {
                    seen.insert(gram, ());
                }
            }
            for (gram, ()) in seen {
                *df[n - 1].entry(gram).or_insert(0) += 1;
            }
        }
    }
    let idf = |n: usize, gram: &Vec<T>| -> f64 {
        match df[n - 1].get(gram) {
            Some(&d) => (n_docs / d as f64).ln(),
            None => 0.0, // candidate-only n-grams never match a reference
        }
    };
    let norm = |counts: &BTreeMap<Vec<T>, u64>, n: usize| -> f64 {
        counts
            .iter()
            .map(|(gram, &c)| {
                let w = c as f64 * idf(n, gram);
                w * w
            })
            .sum::<f64>()
            .sqrt()
    };
    let mut scores = Vec::with_capacity(candidates.len());
    for (cand, refs) in candidates.iter().zip(references) {
        let cand_counts: Vec<BTreeMap<Vec<T>, u64>> =
            (1..=METRIC_MAX_N).map(|n| ngram_counts(cand, n)).collect();
        let cand_norms: Vec<f64> = (1..=METRIC_MAX_N)
            .map(|n| norm(&cand_counts[n - 1], n))
            .collect();
        let mut pair_total = 0.0;
        for r in refs {
            let penalty =
                (-((cand.len() as f64 - r.len() as f64).powi(2))
                    / (2.0 * CIDER_SIGMA * CIDER_SIGMA))
                    .exp();
            for n in 1..=METRIC_MAX_N {
                let ref_counts = ngram_counts(r, n);
                let ref_norm = norm(&ref_counts, n);
                if cand_norms[n - 1] == 0.0 || ref_norm == 0.0 {
                    continue;
                }
                let dot: f64 = cand_counts[n - 1]
                    .iter()
                    .map(|(gram, &c)| {
                        let rc = ref_counts.get(gram).copied().unwrap_or(0);
                        let w = idf(n, gram);
                        (c.min(rc) as f64 * w) * (rc as f64 * w)
                    })
                    .sum();
                pair_total += penalty * dot / (cand_norms[n - 1] * ref_norm);
            }
        }
        let per_ref = pair_total / refs.len() as f64;
        scores.push(CIDER_SCALE / METRIC_MAX_N as f64 * per_ref);
    }
    Ok(scores)
}

/// Corpus CIDEr-D: mean of the per-pair scores.
pub fn cider_d<T: Ord + Clone>(
    candidates: &[Vec<T>],
    references: &[Vec<Vec<T>>],
) -> Result<f64> {
    let scores = cider_d_scores(candidates, references)?;
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}

// ───────────────────────── classification P/R/F1 ─────────────────────────

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub true_positives: u64,
    pub false_positives: u64,
    pub false_negatives: u64,
}

/// Micro-averaged precision/recall/F1 over all (sample, terminology)
/// decisions; empty denominators score 0.
pub fn micro_prf(predicted: &[Vec<bool>], gold: &[Vec<bool>]) -> Result<Prf> {
    if predicted.len() != gold.len() {
        return Err(Error::contract(format!(
            "{} predictions but {} gold rows",
            predicted.len(),
            gold.len()
        )));
    }
    let (mut tp, mut fp, mut fn_) = (0u64, 0u64, 0u64);
    for (p_row, g_row) in predicted.iter().zip(gold) {
        if p_row.len() != g_row.len() {
            return Err(Error::contract(format!(
                "prediction width {} does not match gold width {}",
                p_row.len(),
                g_row.len()
            )));
        }
        for (&p, &g) in p_row.iter().zip(g_row) {
            match (p, g) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fn_ += 1,
                (false, false) => {}
            }
        }
    }
    let precision = if tp + fp == 0 {
        0.0
    } else {
        tp as f64 / (tp + fp) as f64
    };
    let recall = if tp + fn_ == 0 {
        0.0
    } else {
        tp as f64 / (tp + fn_) as f64
    };
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Ok(Prf {
        precision,
        recall,
        f1,
        true_positives: tp,
        false_positives: fp,
        false_negatives: fn_,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn words(s: &str) -> Vec<String> {
        s.split_whitespace().map(str::to_string).collect()
    }

    // ─── independent brute-force oracles ───

    /// Count occurrences of `gram` in `seq` by direct scanning.
    fn scan_count(seq: &[u8], gram: &[u8]) -> u64 {
        if gram.len() > seq.len() {
            return 0;
        }
        (0..=seq.len() - gram.len())
            .filter(|&i| &seq[i..i + gram.len()] == gram)
            .count() as u64
    }

    /// All distinct n-grams of `seq` in first-appearance order.
    fn scan_grams(seq: &[u8], n: usize) -> Vec<Vec<u8>> {
        let mut out: Vec<Vec<u8>> = Vec::new();
        if seq.len() >= n {
            for i in 0..=seq.len() - n {
                let g = seq[i..i + n].to_vec();
                if !out.contains(&g) {
                    out.push(g);
                }
            }
        }
        out
    }

    fn oracle_bleu(cands: &[Vec<u8>], refs: &[Vec<Vec<u8>>], max_n: usize) -> Vec<f64> {
        let mut precisions = Vec::new();
        for n in 1..=max_n {
            let mut num = 0u64;
            let mut den = 0u64;
            for (c, rs) in cands.iter().zip(refs) {
                for gram in scan_grams(c, n) {
                    let clip = rs.iter().map(|r| scan_count(r, &gram)).max().unwrap();
                    num += scan_count(c, &gram).min(clip);
                }
                den += c.len().saturating_sub(n - 1) as u64;
            }
            precisions.push(if den == 0 { 0.0 } else { num as f64 / den as f64 });
        }
        let c_total: usize = cands.iter().map(Vec::len).sum();
        let mut r_total = 0usize;
        for (c, rs) in cands.iter().zip(refs) {
            let mut best = rs[0].len();
            for r in &rs[1..] {
                let d = |l: usize| (l as i64 - c.len() as i64).abs();
                if d(r.len()) < d(best) || (d(r.len()) == d(best) && r.len() < best) {
                    best = r.len();
                }
            }
            r_total += best;
        }
        let bp = if c_total == 0 {
            0.0
        } else if c_total >= r_total {
            1.0
        } else {
            (1.0 - r_total as f64 / c_total as f64).exp()
        };
        (1..=max_n)
            .map(|k| {
                if precisions[..k].iter().any(|&p| p == 0.0) {
                    0.0
                } else {
                    let gm = precisions[..k]
                        .iter()
                        .map(|p| p.powf(1.0 / k as f64))
                        .product::<f64>();
                    bp * gm
                }
            })
            .collect()
    }

    /// LCS by exhaustive subsequence enumeration (lengths stay tiny).
    fn oracle_lcs(a: &[u8], b: &[u8]) -> usize {
        fn is_subseq(s: &[u8], of: &[u8]) -> bool {
            let mut it = of.iter();
            s.iter().all(|x| it.any(|y| y == x))
        }
        let mut best = 0;
        for mask in 0u32..(1 << a.len()) {
            let sub: Vec<u8> = (0..a.len())
                .filter(|i| mask & (1 << i) != 0)
                .map(|i| a[i])
                .collect();
            if sub.len() > best && is_subseq(&sub, b) {
                best = sub.len();
            }
        }
        best
    }

    fn oracle_rouge(cands: &[Vec<u8>], refs: &[Vec<Vec<u8>>]) -> f64 {
        let b2 = ROUGE_BETA * ROUGE_BETA;
        let mut total = 0.0;
        for (c, rs) in cands.iter().zip(refs) {
            let mut best = 0.0f64;
            for r in rs {
                if c.is_empty() || r.is_empty() {
                    continue;
                }
                let l = oracle_lcs(c, r) as f64;
                if l == 0.0 {
                    continue;
                }
                let p = l / c.len() as f64;
                let rr = l / r.len() as f64;
                best = best.max((1.0 + b2) * p * rr / (rr + b2 * p));
            }
            total += best;
        }
        total / cands.len() as f64
    }

    fn oracle_cider(cands: &[Vec<u8>], refs: &[Vec<Vec<u8>>]) -> Vec<f64> {
        let n_docs = refs.len() as f64;
        let mut scores = Vec::new();
        for (c, rs) in cands.iter().zip(refs) {
            let mut acc = 0.0;
            for r in rs {
                let penalty = (-((c.len() as f64 - r.len() as f64).powi(2))
                    / (2.0 * CIDER_SIGMA * CIDER_SIGMA))
                    .exp();
                for n in 1..=METRIC_MAX_N {
                    // union of n-grams of candidate and this reference
                    let mut grams = scan_grams(c, n);
                    for g in scan_grams(r, n) {
                        if !grams.contains(&g) {
                            grams.push(g);
                        }
                    }
                    let idf_of = |g: &[u8]| -> f64 {
                        let d = refs
                            .iter()
                            .filter(|doc| doc.iter().any(|s| scan_count(s, g) > 0))
                            .count();
                        if d == 0 {
                            0.0
                        } else {
                            (n_docs / d as f64).ln()
                        }
                    };
                    let mut dot = 0.0;
                    let mut cn = 0.0;
                    let mut rn = 0.0;
                    for g in &grams {
                        let w = idf_of(g);
                        let cc = scan_count(c, g) as f64 * w;
                        let rc = scan_count(r, g) as f64 * w;
                        dot += cc.min(rc) * rc;
                        cn += cc * cc;
                        rn += rc * rc;
                    }
                    if cn > 0.0 && rn > 0.0 {
                        acc += penalty * dot / (cn.sqrt() * rn.sqrt());
                    }
                }
            }
            scores.push(CIDER_SCALE / METRIC_MAX_N as f64 * acc / rs.len() as f64);
        }
        scores
    }

    // ─── pinned cases ───

    #[test]
    fn identical_corpus_scores_one_everywhere() {
        let cands = vec![words("no acute lesion seen"), words("two nodules present here")];
        let refs: Vec<Vec<Vec<String>>> = cands.iter().map(|c| vec![c.clone()]).collect();
        let b = corpus_bleu(&cands, &refs, BleuOptions::default()).unwrap();
        assert_eq!(b.scores, vec![1.0; 4]);
        assert_eq!(b.brevity_penalty, 1.0);
        assert_eq!(rouge_l(&cands, &refs).unwrap(), 1.0);
    }

    #[test]
    fn repeated_token_candidate_has_clipped_unigram_precision() {
        let cands = vec![words("the the the the the the the")];
        let refs = vec![vec![words("the cat is on the mat")]];
        let b = corpus_bleu(&cands, &refs, BleuOptions::default()).unwrap();
        assert!((b.precisions[0] - 2.0 / 7.0).abs() < 1e-12);
    }

    #[test]
    fn half_length_perfect_candidate_pays_exp_minus_one() {
        let cands = vec![words("a b")];
        let refs = vec![vec![words("a b a b")]];
        let b = corpus_bleu(
            &cands,
            &refs,
            BleuOptions {
                max_n: 2,
                smooth_eps: None,
            },
        )
        .unwrap();
        assert_eq!(b.precisions, vec![1.0, 1.0]);
        let want = (-1.0f64).exp();
        assert!((b.brevity_penalty - want).abs() < 1e-12);
        assert!((b.scores[0] - want).abs() < 1e-12);
        assert!((b.scores[1] - want).abs() < 1e-12);
    }

    #[test]
    fn empty_candidates_give_zero_with_a_warning() {
        let cands: Vec<Vec<String>> = vec![vec![], vec![]];
        let refs = vec![vec![words("a b")], vec![words("c d")]];
        let b = corpus_bleu(&cands, &refs, BleuOptions::default()).unwrap();
        assert_eq!(b.scores, vec![0.0; 4]);
        assert!(!b.warnings.is_empty());
        assert_eq!(rouge_l(&cands, &refs).unwrap(), 0.0);
    }

    #[test]
    fn smoothing_keeps_higher_orders_positive() {
        let cands = vec![words("a b")];
        let refs = vec![vec![words("a c")]];
        let plain = corpus_bleu(&cands, &refs, BleuOptions::default()).unwrap();
        assert_eq!(plain.scores[3], 0.0);
        let smoothed = corpus_bleu(
            &cands,
            &refs,
            BleuOptions {
                max_n: 4,
                smooth_eps: Some(1e-9),
            },
        )
        .unwrap();
        assert!(smoothed.scores[0] > 0.0);
        // orders above the sentence length have no possible n-grams and
        // stay at zero even smoothed
        assert_eq!(smoothed.scores[3], 0.0);
    }

    #[test]
    fn rouge_pinned_three_quarters() {
        let score = rouge_l_pair(&words("a b c d"), &words("a c d e"));
        assert!((score - 0.75).abs() < 1e-12);
    }

    #[test]
    fn rouge_disjoint_is_zero_and_extra_reference_never_hurts() {
        assert_eq!(rouge_l_pair(&words("a b"), &words("c d")), 0.0);
        let cands = vec![words("a b c")];
        let refs_one = vec![vec![words("a b d")]];
        let refs_two = vec![vec![words("a b d"), words("q r s")]];
        let one = rouge_l(&cands, &refs_one).unwrap();
        let two = rouge_l(&cands, &refs_two).unwrap();
        assert!(two >= one);
    }

    #[test]
    fn cider_self_match_in_distinct_corpus_scores_ten() {
        let cands = vec![
            words("small nodule in upper lobe zone"),
            words("pleural fluid tracks along the fissure"),
            words("airspace change persists at the base"),
        ];
        let refs: Vec<Vec<Vec<String>>> = cands.iter().map(|c| vec![c.clone()]).collect();
        let scores = cider_d_scores(&cands, &refs).unwrap();
        for s in &scores {
            assert!((s - 10.0).abs() < 1e-9, "got {s}");
        }
        assert!((cider_d(&cands, &refs).unwrap() - 10.0).abs() < 1e-9);
    }

    #[test]
    fn cider_shared_everything_is_degenerate_zero() {
        // every n-gram appears in every reference document → IDF 0 →
        // zero-norm vectors → score 0 by convention
        let sent = words("the same sentence again");
        let cands = vec![sent.clone(), sent.clone()];
        let refs = vec![vec![sent.clone()], vec![sent.clone()]];
        assert_eq!(cider_d(&cands, &refs).unwrap(), 0.0);
    }

    #[test]
    fn corpus_order_permutation_leaves_scores_unchanged() {
        let cands = vec![words("a b c d e"), words("b c d"), words("a a b c")];
        let refs = vec![
            vec![words("a b c d"), words("a b x")],
            vec![words("b c d e")],
            vec![words("a b c")],
        ];
        let perm = [2usize, 0, 1];
        let pc: Vec<Vec<String>> = perm.iter().map(|&i| cands[i].clone()).collect();
        let pr: Vec<Vec<Vec<String>>> = perm.iter().map(|&i| refs[i].clone()).collect();
        let a = corpus_bleu(&cands, &refs, BleuOptions::default()).unwrap();
        let b = corpus_bleu(&pc, &pr, BleuOptions::default()).unwrap();
        assert_eq!(a.scores, b.scores);
        let ra = rouge_l(&cands, &refs).unwrap();
        let rb = rouge_l(&pc, &pr).unwrap();
        assert!((ra - rb).abs() < 1e-12);
        let ca = cider_d(&cands, &refs).unwrap();
        let cb = cider_d(&pc, &pr).unwrap();
        assert!((ca - cb).abs() < 1e-12);
    }

    #[test]
    fn contract_violations_are_rejected() {
        let empty: Vec<Vec<String>> = vec![];
        let no_refs: Vec<Vec<Vec<String>>> = vec![];
        assert_eq!(
            corpus_bleu(&empty, &no_refs, BleuOptions::default())
                .unwrap_err()
                .exit_code(),
            2
        );
        let cands = vec![words("a")];
        let missing: Vec<Vec<Vec<String>>> = vec![vec![]];
        assert_eq!(rouge_l(&cands, &missing).unwrap_err().exit_code(), 2);
        assert_eq!(cider_d(&cands, &missing).unwrap_err().exit_code(), 2);
    }

    // ─── randomized oracle equivalence ───

    fn rand_sent(rng: &mut ChaCha8Rng, vocab: u8, min_len: usize) -> Vec<u8> {
        let len = rng.gen_range(min_len..=10);
        (0..len).map(|_| rng.gen_range(0..vocab)).collect()
    }

    fn random_corpus(
        rng: &mut ChaCha8Rng,
    ) -> (Vec<Vec<u8>>, Vec<Vec<Vec<u8>>>) {
        let pairs = rng.gen_range(1..=6);
        let vocab = rng.gen_range(3..=12u8);
        let mut cands = Vec::new();
        let mut refs = Vec::new();
        for _ in 0..pairs {
            cands.push(rand_sent(rng, vocab, 0));
            let n_refs = rng.gen_range(1..=3);
            refs.push((0..n_refs).map(|_| rand_sent(rng, vocab, 1)).collect());
        }
        (cands, refs)
    }

    #[test]
    fn bleu_matches_the_brute_force_oracle_on_many_corpora() {
        for seed in 0..60 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (cands, refs) = random_corpus(&mut rng);
            let fast = corpus_bleu(&cands, &refs, BleuOptions::default()).unwrap();
            let slow = oracle_bleu(&cands, &refs, 4);
            for (a, b) in fast.scores.iter().zip(&slow) {
                assert!((a - b).abs() <= 1e-6, "seed {seed}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn rouge_matches_the_subsequence_enumeration_oracle() {
        for seed in 0..60 {
            let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
            let (cands, refs) = random_corpus(&mut rng);
            let fast = rouge_l(&cands, &refs).unwrap();
            let slow = oracle_rouge(&cands, &refs);
            assert!((fast - slow).abs() <= 1e-6, "seed {seed}: {fast} vs {slow}");
        }
    }

    #[test]
    fn cider_matches_the_direct_formula_oracle() {
        for seed in 0..60 {
            let mut rng = ChaCha8Rng::seed_from_u64(2000 + seed);
            let (cands, refs) = random_corpus(&mut rng);
            let fast = cider_d_scores(&cands, &refs).unwrap();
            let slow = oracle_cider(&cands, &refs);
            for (i, (a, b)) in fast.iter().zip(&slow).enumerate() {
                assert!(
                    (a - b).abs() <= 1e-6,
                    "seed {seed} pair {i}: {a} vs {b}"
                );
            }
        }
    }

    #[test]
    fn scores_stay_inside_their_ranges() {
        for seed in 0..30 {
            let mut rng = ChaCha8Rng::seed_from_u64(3000 + seed);
            let (cands, refs) = random_corpus(&mut rng);
            let b = corpus_bleu(&cands, &refs, BleuOptions::default()).unwrap();
            assert!(b.scores.iter().all(|s| (0.0..=1.0).contains(s)));
            let r = rouge_l(&cands, &refs).unwrap();
            assert!((0.0..=1.0).contains(&r));
            let c = cider_d(&cands, &refs).unwrap();
            assert!((0.0..=10.0 + 1e-9).contains(&c));
        }
    }

    // ─── classification P/R/F1 ───

    #[test]
    fn micro_prf_pinned_counts() {
        let predicted = vec![vec![true, false, true], vec![false, false, true]];
        let gold = vec![vec![true, true, false], vec![false, false, true]];
        let prf = micro_prf(&predicted, &gold).unwrap();
        assert_eq!(
            (prf.true_positives, prf.false_positives, prf.false_negatives),
            (2, 1, 1)
        );
        assert!((prf.precision - 2.0 / 3.0).abs() < 1e-12);
        assert!((prf.recall - 2.0 / 3.0).abs() < 1e-12);
        assert!((prf.f1 - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn micro_prf_perfect_and_degenerate() {
        let rows = vec![vec![true, false], vec![false, true]];
        let perfect = micro_prf(&rows, &rows).unwrap();
        assert_eq!((perfect.precision, perfect.recall, perfect.f1), (1.0, 1.0, 1.0));
        let none = vec![vec![false, false]];
        let empty = micro_prf(&none, &none).unwrap();
        assert_eq!((empty.precision, empty.recall, empty.f1), (0.0, 0.0, 0.0));
        let bad = micro_prf(&rows, &none).unwrap_err();
        assert_eq!(bad.exit_code(), 2);
    }
}
