//! The run configuration: one TOML document in which every field has a
//! default, so an empty file (or none at all) is a complete, valid run.
//! Command-line flags name fields by dotted key (`--schedule.m 2`,
//! `--flags.co_attention false`) and overlay the file values; the result
//! is validated before any work starts.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datagen::CorpusSizes;
use crate::decoder::Decode;
use crate::error::{Error, Result};
use crate::eval::EvalOptions;
use crate::model::ModelConfig;
use crate::optim::AdamConfig;
use crate::train::TrainOptions;

/// Corpus sizes for the primary corpus and its sibling. The sibling is
/// the deliberately smaller second corpus that transfer runs pretrain
/// on before fine-tuning moves to the primary one (or vice versa).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub textbook: usize,
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub sibling_textbook: usize,
    pub sibling_train: usize,
    pub sibling_val: usize,
    pub sibling_test: usize,
}

impl Default for DataSection {
    fn default() -> Self {
        let big = CorpusSizes::default();
        let small = CorpusSizes::small();
        DataSection {
            textbook: big.textbook,
            train: big.train,
            val: big.val,
            test: big.test,
            sibling_textbook: small.textbook,
            sibling_train: small.train,
            sibling_val: small.val,
            sibling_test: small.test,
        }
    }
}

/// Passes per epoch: `m` pretraining (textbook) passes, then `n`
/// transferring (report) passes, repeated for `epochs` epochs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleSection {
    pub m: usize,
    pub n: usize,
    pub epochs: usize,
}

impl Default for ScheduleSection {
    fn default() -> Self {
        ScheduleSection { m: 1, n: 3, epochs: 30 }
    }
}

/// The three study toggles, each independently switchable.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlagSection {
    /// Terminology pretraining on the textbook split. Turning this off
    /// removes the external knowledge source, so the schedule must not
    /// request pretraining passes (`schedule.m = 0`).
    pub external_knowledge: bool,
    /// Interleave pretraining and transferring passes within every
    /// epoch. When false the same pass totals run sequentially: all
    /// pretraining first, then all transferring.
    pub alternate_training: bool,
    /// Train on the sibling corpus first and fine-tune from its
    /// checkpoint. When false, training starts from fresh parameters.
    pub transfer_learning: bool,
    /// Let terminology and context attend to each other. When false the
    /// encoder masks attention across the boundary in both directions.
    pub co_attention: bool,
}

impl Default for FlagSection {
    fn default() -> Self {
        FlagSection {
            external_knowledge: true,
            alternate_training: true,
            transfer_learning: false,
            co_attention: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerSection {
    pub lr: f64,
    /// Learning rate for the patch embedder (parameter names starting
    /// with `patch.`), kept far below the shared rate.
    pub patch_lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm ceiling over the parameters of a step.
    pub clip_norm: f64,
}

impl Default for OptimizerSection {
    fn default() -> Self {
        OptimizerSection {
            lr: 5e-5,
            patch_lr: 1e-6,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub batch_size: usize,
    /// Weight of the classification term in the combined loss.
    pub lambda: f64,
    /// Stop after this many epochs without a new validation best;
    /// 0 runs the full epoch budget.
    pub patience: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection { batch_size: 8, lambda: 1.0, patience: 0 }
    }
}

/// Stage-A budget for transfer runs (`flags.transfer_learning = true`):
/// how many epochs to spend on the sibling corpus before fine-tuning.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransferSection {
    pub epochs: usize,
}

impl Default for TransferSection {
    fn default() -> Self {
        TransferSection { epochs: 30 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    /// `greedy` or `beam` (width taken from `beam_width`).
    pub decode: String,
    pub beam_width: usize,
    /// Classifier decision threshold; a terminology counts as predicted
    /// when its probability is strictly above this.
    pub threshold: f64,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            decode: "greedy".to_string(),
            beam_width: 3,
            threshold: 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Every file a command writes lives under this directory.
    pub out_dir: String,
    pub model: ModelConfig,
    pub data: DataSection,
    pub schedule: ScheduleSection,
    pub flags: FlagSection,
    pub optimizer: OptimizerSection,
    pub train: TrainSection,
    pub transfer: TransferSection,
    pub eval: EvalSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            out_dir: "out".to_string(),
            model: ModelConfig::default(),
            data: DataSection::default(),
            schedule: ScheduleSection::default(),
            flags: FlagSection::default(),
            optimizer: OptimizerSection::default(),
            train: TrainSection::default(),
            transfer: TransferSection::default(),
            eval: EvalSection::default(),
        }
    }
}

/// `model.vocab_size` is filled from the vocabulary file at run time;
/// it is not a configuration key and has no command-line flag.
const DERIVED_KEYS: [&str; 1] = ["model.vocab_size"];

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<RunConfig> {
        toml::from_str(text).map_err(|e| Error::config(format!("configuration: {e}")))
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)?;
        toml::from_str(&text)
            .map_err(|e| Error::config(format!("{}: {e}", path.display())))
    }

    /// The fully-resolved configuration as a TOML document; parsing it
    /// back yields an equal configuration.
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self)
            .map_err(|e| Error::config(format!("configuration does not serialize: {e}")))
    }

    /// Every overridable dotted key, paired with its current value
    /// rendered as flag-argument text. Drives both the command-line
    /// definition and its help output.
    pub fn leaves(&self) -> Vec<(String, String)> {
        let root = serde_json::to_value(self).expect("configuration serializes");
        let mut out = Vec::new();
        collect_leaves(&root, String::new(), &mut out);
        out.retain(|(k, _)| !DERIVED_KEYS.contains(&k.as_str()));
        out
    }

    /// Set one field by dotted key from flag-argument text. The key must
    /// name a scalar leaf; the text must parse as that leaf's type.
    pub fn apply_override(&mut self, key: &str, raw: &str) -> Result<()> {
        if DERIVED_KEYS.contains(&key) {
            return Err(Error::config(format!(
                "{key} is derived from the vocabulary and cannot be set"
            )));
        }
        let mut root = serde_json::to_value(&*self).expect("configuration serializes");
        let mut cur = &mut root;
        for part in key.split('.') {
            cur = cur
                .get_mut(part)
                .ok_or_else(|| Error::config(format!("unknown configuration key '{key}'")))?;
        }
        *cur = parse_as(cur, key, raw)?;
        *self = serde_json::from_value(root)
            .map_err(|e| Error::config(format!("invalid value for {key}: {e}")))?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.out_dir.is_empty() {
            return Err(Error::config("out_dir must not be empty"));
        }
        if self.model.vocab_size != 0 {
            return Err(Error::config(
                "model.vocab_size is derived from the vocabulary; remove it from the \
                 configuration",
            ));
        }
        // The model section is complete except for the vocabulary size;
        // stand one in so the remaining dimension checks can run.
        let mut m = self.model.clone();
        m.vocab_size = crate::vocab::RESERVED.len() + 1;
        m.validate()?;
        let s = &self.schedule;
        if s.epochs == 0 {
            return Err(Error::config("schedule.epochs must be at least 1"));
        }
        if s.m + s.n == 0 {
            return Err(Error::config(
                "schedule (0,0) trains nothing; set schedule.m or schedule.n above zero",
            ));
        }
        if !self.flags.external_knowledge && s.m > 0 {
            return Err(Error::config(format!(
                "flags.external_knowledge = false forces schedule.m = 0, but schedule.m = {}; \
                 drop the pretraining passes (set schedule.m = 0) or re-enable \
                 flags.external_knowledge",
                s.m
            )));
        }
        for (name, v) in [
            ("data.textbook", self.data.textbook),
            ("data.train", self.data.train),
            ("data.val", self.data.val),
            ("data.test", self.data.test),
            ("data.sibling_textbook", self.data.sibling_textbook),
            ("data.sibling_train", self.data.sibling_train),
            ("data.sibling_val", self.data.sibling_val),
            ("data.sibling_test", self.data.sibling_test),
        ] {
            if v == 0 {
                return Err(Error::config(format!("{name} must be at least 1")));
            }
        }
        let o = &self.optimizer;
        for (name, v) in [
            ("optimizer.lr", o.lr),
            ("optimizer.patch_lr", o.patch_lr),
            ("optimizer.eps", o.eps),
            ("optimizer.clip_norm", o.clip_norm),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::config(format!(
                    "{name} must be a finite positive number, got {v}"
                )));
            }
        }
        for (name, v) in [("optimizer.beta1", o.beta1), ("optimizer.beta2", o.beta2)] {
            if !(v.is_finite() && (0.0..1.0).contains(&v)) {
                return Err(Error::config(format!(
                    "{name} must lie in [0, 1), got {v}"
                )));
            }
        }
        if self.train.batch_size == 0 {
            return Err(Error::config("train.batch_size must be at least 1"));
        }
        if !(self.train.lambda.is_finite() && self.train.lambda >= 0.0) {
            return Err(Error::config(format!(
                "train.lambda must be a finite non-negative number, got {}",
                self.train.lambda
            )));
        }
        if self.transfer.epochs == 0 {
            return Err(Error::config("transfer.epochs must be at least 1"));
        }
        self.decode()?;
        let t = self.eval.threshold;
        if !(t.is_finite() && 0.0 < t && t < 1.0) {
            return Err(Error::config(format!(
                "eval.threshold must lie strictly between 0 and 1, got {t}"
            )));
        }
        Ok(())
    }

    // ───────────── conversions into the working option types ─────────────

    pub fn sizes(&self) -> CorpusSizes {
        CorpusSizes {
            textbook: self.data.textbook,
            train: self.data.train,
            val: self.data.val,
            test: self.data.test,
        }
    }

    pub fn sibling_sizes(&self) -> CorpusSizes {
        CorpusSizes {
            textbook: self.data.sibling_textbook,
            train: self.data.sibling_train,
            val: self.data.sibling_val,
            test: self.data.sibling_test,
        }
    }

    /// The model configuration with the vocabulary size filled in.
    pub fn model_for(&self, vocab_len: usize) -> Result<ModelConfig> {
        let mut m = self.model.clone();
        m.vocab_size = vocab_len;
        m.validate()?;
        Ok(m)
    }

    pub fn adam(&self) -> AdamConfig {
        let o = &self.optimizer;
        AdamConfig {
            lr: o.lr,
            beta1: o.beta1,
            beta2: o.beta2,
            eps: o.eps,
            clip_norm: Some(o.clip_norm),
            lr_overrides: vec![("patch.".to_string(), o.patch_lr)],
        }
    }

    pub fn decode(&self) -> Result<Decode> {
        match self.eval.decode.as_str() {
            "greedy" => Ok(Decode::Greedy),
            "beam" => {
                if self.eval.beam_width == 0 {
                    return Err(Error::config("eval.beam_width must be at least 1"));
                }
                Ok(Decode::Beam { width: self.eval.beam_width })
            }
            other => Err(Error::config(format!(
                "eval.decode must be 'greedy' or 'beam', got '{other}'"
            ))),
        }
    }

    pub fn eval_options(&self) -> Result<EvalOptions> {
        Ok(EvalOptions {
            decode: self.decode()?,
            co_attention: self.flags.co_attention,
            threshold: self.eval.threshold,
        })
    }

    /// Training options for the main stage. Commands adjust `epochs` and
    /// `checkpoint_dir` for stage variants.
    pub fn train_options(&self) -> Result<TrainOptions> {
        Ok(TrainOptions {
            epochs: self.schedule.epochs,
            batch_size: self.train.batch_size,
            lambda: self.train.lambda,
            schedule_m: self.schedule.m,
            schedule_n: self.schedule.n,
            alternate: self.flags.alternate_training,
            co_attention: self.flags.co_attention,
            seed: self.seed,
            optimizer: self.adam(),
            patience: match self.train.patience {
                0 => None,
                p => Some(p),
            },
            decode: self.decode()?,
            checkpoint_dir: None,
        })
    }
}

fn collect_leaves(v: &serde_json::Value, prefix: String, out: &mut Vec<(String, String)>) {
    match v {
        serde_json::Value::Object(map) => {
            for (k, child) in map {
                let key = if prefix.is_empty() {
                    k.clone()
                } else {
                    format!("{prefix}.{k}")
                };
                collect_leaves(child, key, out);
            }
        }
        serde_json::Value::String(s) => out.push((prefix, s.clone())),
        other => out.push((prefix, other.to_string())),
    }
}

fn parse_as(current: &serde_json::Value, key: &str, raw: &str) -> Result<serde_json::Value> {
    use serde_json::Value;
    match current {
        Value::Bool(_) => raw
            .parse::<bool>()
            .map(Value::Bool)
            .map_err(|_| Error::config(format!("{key} expects true or false, got '{raw}'"))),
        Value::Number(n) => {
            if n.is_u64() {
                raw.parse::<u64>()
                    .map(|v| Value::Number(v.into()))
                    .map_err(|_| {
                        Error::config(format!(
                            "{key} expects a non-negative integer, got '{raw}'"
                        ))
                    })
            } else {
                let v: f64 = raw.parse().map_err(|_| {
                    Error::config(format!("{key} expects a number, got '{raw}'"))
                })?;
                serde_json::Number::from_f64(v)
                    .map(Value::Number)
                    .ok_or_else(|| {
                        Error::config(format!("{key} expects a finite number, got '{raw}'"))
                    })
            }
        }
        Value::String(_) => Ok(Value::String(raw.to_string())),
        _ => Err(Error::config(format!(
            "'{key}' is a section, not a settable field"
        ))),
    }
}
