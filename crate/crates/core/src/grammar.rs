//! The synthetic report grammar: a fixed terminology inventory where
//! each terminology owns a grid-cell visual signature and a set of
//! sentence templates. An image variant is paired one-to-one with a
//! report phrasing, so the image fully determines the reference text
//! and a perfect model can reach perfect caption scores. Grammars are
//! plain data, serializable to a human-editable TOML spec file.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeSet;

use crate::error::{Error, Result};
use crate::vocab::normalize;

/// One terminology: its (single-token) name and the grid cell/channel
/// where its visual signature is planted.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TermSpec {
    pub name: String,
    pub row: usize,
    pub col: usize,
    pub channel: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Grammar {
    pub name: String,
    pub seed: u64,
    pub grid_h: usize,
    pub grid_w: usize,
    pub channels: usize,
    /// Base magnitude of a planted signature.
    pub amplitude: f64,
    /// Standard deviation of the background noise on every grid value.
    pub noise_sd: f64,
    /// Probability that a transfer sample is normal (no terminology).
    pub normal_prob: f64,
    /// Largest terminology subset per transfer sample.
    pub max_terms: usize,
    pub textbook_max_terms: usize,
    pub textbook_normal_prob: f64,
    pub terms: Vec<TermSpec>,
    /// Report sentence forms, each containing the placeholder `{name}`
    /// exactly once; form index == image variant index.
    pub report_forms: Vec<String>,
    /// Definitional sentence forms for textbook prose.
    pub textbook_forms: Vec<String>,
    pub normal_templates: Vec<String>,
    /// Fixed sentence closing every report and textbook document.
    pub closing: String,
}

impl Grammar {
    pub fn n_terms(&self) -> usize {
        self.terms.len()
    }

    pub fn n_variants(&self) -> usize {
        self.report_forms.len()
    }

    pub fn n_cells(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn grid_values(&self) -> usize {
        self.n_cells() * self.channels
    }

    /// Signed magnitude planted for variant v: levels fan out from the
    /// base amplitude with alternating sign (+A, −A, +1.5A, −1.5A, …),
    /// keeping every variant past the presence threshold A/2.
    pub fn amplitude_for(&self, variant: usize) -> f64 {
        let level = 1.0 + (variant / 2) as f64 * 0.5;
        let sign = if variant % 2 == 0 { 1.0 } else { -1.0 };
        self.amplitude * level * sign
    }

    fn cell_index(&self, term: &TermSpec) -> usize {
        (term.row * self.grid_w + term.col) * self.channels + term.channel
    }

    /// Add terminology signatures onto a (noise) grid.
    pub fn plant(&self, grid: &mut [f32], picks: &[(usize, usize)]) {
        assert_eq!(grid.len(), self.grid_values(), "grid shape mismatch");
        for &(term, variant) in picks {
            let idx = self.cell_index(&self.terms[term]);
            grid[idx] += self.amplitude_for(variant) as f32;
        }
    }

    /// Read the planted signatures straight off a grid: per terminology,
    /// `None` when absent, otherwise the nearest variant level. This is
    /// the generator's own decision rule, independent of any trained
    /// model, and underpins the corpus separability certificate.
    pub fn classify_grid(&self, grid: &[f32]) -> Vec<Option<usize>> {
        assert_eq!(grid.len(), self.grid_values(), "grid shape mismatch");
        self.terms
            .iter()
            .map(|t| {
                let x = grid[self.cell_index(t)] as f64;
                if x.abs() < self.amplitude / 2.0 {
                    return None;
                }
                let variant = (0..self.n_variants())
                    .min_by(|&a, &b| {
                        let da = (x - self.amplitude_for(a)).abs();
                        let db = (x - self.amplitude_for(b)).abs();
                        da.partial_cmp(&db).expect("finite levels")
                    })
                    .expect("at least one variant");
                Some(variant)
            })
            .collect()
    }

    fn instantiate(&self, form: &str, term: usize) -> String {
        form.replace("{name}", &self.terms[term].name)
    }

    /// Report sentences for a terminology subset: one sentence per
    /// present terminology (phrasing fixed by its variant), ascending by
    /// terminology index; the empty subset falls back to a normal
    /// template; the closing sentence always follows.
    pub fn report_sentences(
        &self,
        picks: &[(usize, usize)],
        normal_choice: usize,
    ) -> Vec<String> {
        let mut sentences = Vec::new();
        if picks.is_empty() {
            sentences.push(self.normal_templates[normal_choice].clone());
        } else {
            let mut ordered = picks.to_vec();
            ordered.sort();
            for (term, variant) in ordered {
                sentences.push(self.instantiate(&self.report_forms[variant], term));
            }
        }
        sentences.push(self.closing.clone());
        sentences
    }

    /// Textbook sentences: per mentioned terminology, a definitional
    /// sentence plus one embedded report-template sentence (this is how
    /// pretraining teaches the decoder the report phrasings); the empty
    /// subset yields a normal document.
    pub fn textbook_sentences(
        &self,
        picks: &[(usize, usize, usize)], // (term, textbook form, report variant)
        normal_choice: usize,
    ) -> Vec<String> {
        let mut sentences = Vec::new();
        if picks.is_empty() {
            sentences.push(self.normal_templates[normal_choice].clone());
        } else {
            let mut ordered = picks.to_vec();
            ordered.sort();
            for (term, tb_form, variant) in ordered {
                sentences.push(self.instantiate(&self.textbook_forms[tb_form], term));
                sentences.push(self.instantiate(&self.report_forms[variant], term));
            }
        }
        sentences.push(self.closing.clone());
        sentences
    }

    /// Number of distinct transfer-sample contents the grammar can
    /// express: the normal phrasings plus every subset of up to
    /// max_terms terminologies with independent per-terminology
    /// variants.
    pub fn transfer_capacity(&self) -> u128 {
        let n = self.n_terms() as u128;
        let v = self.n_variants() as u128;
        let mut total: u128 = if self.normal_prob > 0.0 {
            self.normal_templates.len() as u128
        } else {
            0
        };
        // running binomial coefficient C(n, k)
        let mut choose: u128 = 1;
        let mut vpow: u128 = 1;
        for k in 1..=self.max_terms as u128 {
            choose = choose.saturating_mul(n - k + 1) / k;
            vpow = vpow.saturating_mul(v);
            total = total.saturating_add(choose.saturating_mul(vpow));
        }
        total
    }

    /// Terminology indices named in a normalized text, in index order —
    /// the template-inversion rule behind label/report consistency.
    pub fn mentions(&self, text: &str) -> Vec<usize> {
        let tokens: BTreeSet<String> = normalize(text).into_iter().collect();
        self.terms
            .iter()
            .enumerate()
            .filter(|(_, t)| tokens.contains(&t.name))
            .map(|(i, _)| i)
            .collect()
    }

    /// Worst-case rendered report / textbook word counts (before the
    /// begin/end tokens), used to bound sequence lengths up front.
    pub fn max_report_words(&self) -> usize {
        let longest_form = self
            .report_forms
            .iter()
            .map(|f| normalize(&self.instantiate(f, self.longest_name_term())).len())
            .max()
            .unwrap_or(0);
        let longest_normal = self
            .normal_templates
            .iter()
            .map(|t| normalize(t).len())
            .max()
            .unwrap_or(0);
        let body = (longest_form * self.max_terms).max(longest_normal);
        // one separator period per sentence boundary plus final period
        let sentences = self.max_terms.max(1) + 1;
        body + normalize(&self.closing).len() + sentences
    }

    pub fn max_textbook_words(&self) -> usize {
        let term = self.longest_name_term();
        let longest_tb = self
            .textbook_forms
            .iter()
            .map(|f| normalize(&self.instantiate(f, term)).len())
            .max()
            .unwrap_or(0);
        let longest_form = self
            .report_forms
            .iter()
            .map(|f| normalize(&self.instantiate(f, term)).len())
            .max()
            .unwrap_or(0);
        let longest_normal = self
            .normal_templates
            .iter()
            .map(|t| normalize(t).len())
            .max()
            .unwrap_or(0);
        let body = ((longest_tb + longest_form) * self.textbook_max_terms).max(longest_normal);
        let sentences = 2 * self.textbook_max_terms.max(1) + 1;
        body + normalize(&self.closing).len() + sentences
    }

    fn longest_name_term(&self) -> usize {
        (0..self.n_terms())
            .max_by_key(|&i| self.terms[i].name.len())
            .unwrap_or(0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.name.is_empty() {
            return Err(Error::config("grammar.name must be nonempty".to_string()));
        }
        if self.terms.is_empty() || self.terms.len() > 64 {
            return Err(Error::config(format!(
                "grammar needs 1..=64 terminologies, got {}",
                self.terms.len()
            )));
        }
        if self.grid_h == 0 || self.grid_w == 0 || self.channels == 0 {
            return Err(Error::config("grammar grid shape must be positive".to_string()));
        }
        let mut names = BTreeSet::new();
        let mut cells = BTreeSet::new();
        for t in &self.terms {
            let toks = normalize(&t.name);
            if toks.len() != 1 || toks[0] != t.name {
                return Err(Error::config(format!(
                    "terminology name '{}' must be a single normalized token",
                    t.name
                )));
            }
            if !names.insert(t.name.clone()) {
                return Err(Error::config(format!(
                    "duplicate terminology name '{}'",
                    t.name
                )));
            }
            if t.row >= self.grid_h || t.col >= self.grid_w || t.channel >= self.channels {
                return Err(Error::config(format!(
                    "terminology '{}' anchor ({}, {}, ch {}) outside the {}x{}x{} grid",
                    t.name, t.row, t.col, t.channel, self.grid_h, self.grid_w, self.channels
                )));
            }
            if !cells.insert((t.row, t.col, t.channel)) {
                return Err(Error::config(format!(
                    "terminology '{}' shares its anchor cell with another terminology",
                    t.name
                )));
            }
        }
        if self.report_forms.len() < 2 {
            return Err(Error::config(
                "grammar needs at least two report forms (one per variant)".to_string(),
            ));
        }
        if self.textbook_forms.is_empty() {
            return Err(Error::config("grammar needs a textbook form".to_string()));
        }
        if self.normal_templates.is_empty() {
            return Err(Error::config("grammar needs a normal template".to_string()));
        }
        for (what, forms) in [
            ("report form", &self.report_forms),
            ("textbook form", &self.textbook_forms),
        ] {
            for f in forms.iter() {
                if f.matches("{name}").count() != 1 {
                    return Err(Error::config(format!(
                        "{what} '{f}' must contain the placeholder {{name}} exactly once"
                    )));
                }
                self.check_no_term_names(what, &f.replace("{name}", ""))?;
            }
        }
        for t in &self.normal_templates {
            self.check_no_term_names("normal template", t)?;
        }
        if normalize(&self.closing).is_empty() {
            return Err(Error::config("grammar closing sentence is empty".to_string()));
        }
        self.check_no_term_names("closing sentence", &self.closing)?;
        for (what, p) in [
            ("normal_prob", self.normal_prob),
            ("textbook_normal_prob", self.textbook_normal_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::config(format!(
                    "grammar.{what} {p} must lie in [0, 1]"
                )));
            }
        }
        if self.max_terms == 0 || self.max_terms > self.n_terms() {
            return Err(Error::config(format!(
                "grammar.max_terms {} must lie in 1..={}",
                self.max_terms,
                self.n_terms()
            )));
        }
        if self.textbook_max_terms == 0 || self.textbook_max_terms > self.n_terms() {
            return Err(Error::config(format!(
                "grammar.textbook_max_terms {} must lie in 1..={}",
                self.textbook_max_terms,
                self.n_terms()
            )));
        }
        if self.amplitude <= 0.0 || !self.amplitude.is_finite() {
            return Err(Error::config("grammar.amplitude must be positive".to_string()));
        }
        if self.noise_sd < 0.0 || !self.noise_sd.is_finite() {
            return Err(Error::config(
                "grammar.noise_sd must be nonnegative".to_string(),
            ));
        }
        // separability margin: presence threshold and adjacent variant
        // levels must clear six noise standard deviations
        let mut margin = self.amplitude / 2.0;
        let mut levels: Vec<f64> = (0..self.n_variants())
            .map(|v| self.amplitude_for(v))
            .collect();
        levels.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
        for pair in levels.windows(2) {
            margin = margin.min((pair[1] - pair[0]).abs() / 2.0);
        }
        if self.noise_sd * 6.0 >= margin {
            return Err(Error::config(format!(
                "grammar.noise_sd {} is too large for the variant level margin {margin} \
                 (needs margin > 6 standard deviations)",
                self.noise_sd
            )));
        }
        Ok(())
    }

    fn check_no_term_names(&self, what: &str, text: &str) -> Result<()> {
        let tokens: BTreeSet<String> = normalize(text).into_iter().collect();
        for t in &self.terms {
            if tokens.contains(&t.name) {
                return Err(Error::config(format!(
                    "{what} mentions terminology '{}'; templates must stay unambiguous",
                    t.name
                )));
            }
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self)
            .map_err(|e| Error::config(format!("grammar serialization failed: {e}")))
    }

    pub fn from_toml(text: &str) -> Result<Grammar> {
        let g: Grammar = toml::from_str(text)
            .map_err(|e| Error::config(format!("grammar spec parse error: {e}")))?;
        g.validate()?;
        Ok(g)
    }

    /// Content hash of the serialized grammar, stored in dataset headers
    /// so trained artifacts can verify which grammar produced them.
    pub fn hash(&self) -> Result<String> {
        let toml = self.to_toml()?;
        let mut h = Sha256::new();
        h.update(toml.as_bytes());
        Ok(crate::vocab::hex(&h.finalize()))
    }
}

/// Join rendered sentences into one normalized report string with
/// period separators.
pub fn join_sentences(sentences: &[String]) -> String {
    format!("{} .", sentences.join(" . "))
}

const TERM_NAMES: [&str; 16] = [
    "nodule",
    "consolidation",
    "effusion",
    "cavitation",
    "fibrosis",
    "atelectasis",
    "pneumothorax",
    "edema",
    "emphysema",
    "granuloma",
    "infiltrate",
    "opacity",
    "calcification",
    "bronchiectasis",
    "scarring",
    "thickening",
];

fn standard_terms(grid_w: usize, channels: usize) -> Vec<TermSpec> {
    TERM_NAMES
        .iter()
        .enumerate()
        .map(|(i, name)| {
            let cell = i * 3;
            TermSpec {
                name: name.to_string(),
                row: cell / grid_w,
                col: cell % grid_w,
                channel: i % channels,
            }
        })
        .collect()
}

/// The primary synthetic corpus grammar.
pub fn grammar_alpha() -> Grammar {
    Grammar {
        name: "alpha".to_string(),
        seed: 2024,
        grid_h: 7,
        grid_w: 7,
        channels: 4,
        amplitude: 2.0,
        noise_sd: 0.15,
        normal_prob: 0.2,
        max_terms: 3,
        textbook_max_terms: 2,
        textbook_normal_prob: 0.1,
        terms: standard_terms(7, 4),
        report_forms: vec![
            "a focal {name} is seen in the upper zone".to_string(),
            "scattered {name} noted toward the lower zone".to_string(),
        ],
        textbook_forms: vec![
            "the term {name} refers to a well defined imaging finding".to_string(),
            "classic {name} presents with a characteristic regional appearance".to_string(),
        ],
        normal_templates: vec!["no acute abnormality is identified".to_string()],
        closing: "clinical correlation is recommended".to_string(),
    }
}

/// The sibling grammar: same terminologies and grid signatures, a
/// different template mix — the stand-in second corpus for transfer
/// experiments.
pub fn grammar_beta() -> Grammar {
    Grammar {
        name: "beta".to_string(),
        seed: 7175,
        report_forms: vec![
            "the {name} remains visible near the apex".to_string(),
            "subtle {name} persists along the margin".to_string(),
        ],
        textbook_forms: vec![
            "on imaging {name} typically shows a recognizable pattern".to_string(),
        ],
        normal_templates: vec!["the study shows no significant change".to_string()],
        closing: "follow up imaging is advised".to_string(),
        ..grammar_alpha()
    }
}
