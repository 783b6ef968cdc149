//! Training checkpoints: model parameters, optimizer moments, the
//! training RNG position, and enough metadata to resume a run so that
//! continuing from disk is bit-for-bit identical to never stopping.
//! Same envelope as the dataset container: magic, version, JSON
//! header, fixed-layout binary body, trailing SHA-256.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{init_params, ModelConfig};
use crate::optim::{Adam, AdamConfig, ParamStore};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"AGCK";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Position of a counter-based RNG, sufficient to rebuild it exactly.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> RngState {
        RngState {
            seed: 0, // filled by the owner; the raw seed is not recoverable
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn of(seed: u64, rng: &ChaCha8Rng) -> RngState {
        RngState {
            seed,
            ..RngState::capture(rng)
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

/// Progress bookkeeping carried across save/load.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
pub struct TrainState {
    /// Epochs fully completed.
    pub epoch: usize,
    /// Best validation value seen so far and when it happened.
    pub best_value: Option<f64>,
    pub best_epoch: Option<usize>,
    pub epochs_since_best: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    pub optimizer: AdamConfig,
    pub lambda: f64,
    pub schedule_m: usize,
    pub schedule_n: usize,
    pub state: TrainState,
    pub rng: RngState,
    pub vocab_hash: String,
    pub grammar_hash: String,
}

fn push_str(buf: &mut Vec<u8>, s: &str) {
    let bytes = s.as_bytes();
    assert!(bytes.len() <= u16::MAX as usize, "string field too long");
    buf.extend_from_slice(&(bytes.len() as u16).to_le_bytes());
    buf.extend_from_slice(bytes);
}

fn push_f32s(buf: &mut Vec<u8>, values: &[f32]) {
    for &v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn save_checkpoint(
    path: &Path,
    meta: &CheckpointMeta,
    store: &ParamStore<f32>,
    adam: &Adam<f32>,
) -> Result<()> {
    let (m, v, counts) = adam.moments();
    assert_eq!(m.len(), store.len(), "optimizer does not match store");
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let header = serde_json::to_vec(meta).expect("meta serializes");
    buf.extend_from_slice(&(header.len() as u32).to_le_bytes());
    buf.extend_from_slice(&header);
    buf.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for (i, p) in store.iter().enumerate() {
        push_str(&mut buf, &p.name);
        buf.extend_from_slice(&(p.rows as u32).to_le_bytes());
        buf.extend_from_slice(&(p.cols as u32).to_le_bytes());
        push_f32s(&mut buf, &p.data);
        push_f32s(&mut buf, &m[i]);
        push_f32s(&mut buf, &v[i]);
        buf.extend_from_slice(&counts[i].to_le_bytes());
    }
    buf.extend_from_slice(&adam.global_step().to_le_bytes());
    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(&digest);
    std::fs::write(path, buf)?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    file: String,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::corrupt(format!(
                "{}: truncated at byte {} (wanted {} more)",
                self.file, self.pos, n
            )));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let raw = self.take(4 * n)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

/// Load a checkpoint and rebuild the exact store and optimizer. The
/// parameter layout is checked against the model configuration stored
/// in the header.
pub fn load_checkpoint(path: &Path) -> Result<(CheckpointMeta, ParamStore<f32>, Adam<f32>)> {
    let bytes = std::fs::read(path)?;
    let file = path.display().to_string();
    if bytes.len() < 4 + 4 + 4 + 32 {
        return Err(Error::corrupt(format!(
            "{file}: {} bytes is too short for a checkpoint",
            bytes.len()
        )));
    }
    let (body, stored_hash) = bytes.split_at(bytes.len() - 32);
    if &body[..4] != CHECKPOINT_MAGIC {
        return Err(Error::corrupt(format!(
            "{file}: bad magic {:?}, not a checkpoint",
            &body[..4]
        )));
    }
    if Sha256::digest(body).as_slice() != stored_hash {
        return Err(Error::HashMismatch(format!(
            "{file}: stored integrity hash does not match file contents"
        )));
    }
    let mut r = Reader {
        bytes: body,
        pos: 4,
        file,
    };
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::VersionMismatch {
            file: r.file,
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let header_len = r.u32()? as usize;
    let meta: CheckpointMeta = serde_json::from_slice(r.take(header_len)?)
        .map_err(|e| Error::corrupt(format!("{}: header is not valid JSON: {e}", r.file)))?;
    meta.model.validate()?;

    let n_params = r.u32()? as usize;
    let mut store: ParamStore<f32> = ParamStore::new();
    let mut m = Vec::with_capacity(n_params);
    let mut v = Vec::with_capacity(n_params);
    let mut counts = Vec::with_capacity(n_params);
    for _ in 0..n_params {
        let name_len = r.u16()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|_| Error::corrupt(format!("{}: parameter name is not UTF-8", r.file)))?;
        let rows = r.u32()? as usize;
        let cols = r.u32()? as usize;
        let n = rows
            .checked_mul(cols)
            .filter(|&n| n > 0 && n < 1 << 28)
            .ok_or_else(|| {
                Error::corrupt(format!("{}: parameter '{name}' shape {rows}x{cols}", r.file))
            })?;
        if store.index_of(&name).is_some() {
            return Err(Error::corrupt(format!(
                "{}: parameter '{name}' appears twice",
                r.file
            )));
        }
        let data = r.f32s(n)?;
        store.register(&name, Tensor::new(rows, cols, data));
        m.push(r.f32s(n)?);
        v.push(r.f32s(n)?);
        counts.push(r.u64()?);
    }
    let global_step = r.u64()?;
    if r.pos != body.len() {
        return Err(Error::corrupt(format!(
            "{}: {} unexpected trailing bytes",
            r.file,
            body.len() - r.pos
        )));
    }

    // The stored layout must be exactly what the header's model would
    // produce: same names in the same order with the same shapes.
    let mut layout_rng = ChaCha8Rng::seed_from_u64(0);
    let reference = init_params::<f32>(&meta.model, &mut layout_rng);
    if reference.names() != store.names() {
        return Err(Error::corrupt(format!(
            "{}: parameter names do not match the stored model configuration",
            r.file
        )));
    }
    for (have, want) in store.iter().zip(reference.iter()) {
        if (have.rows, have.cols) != (want.rows, want.cols) {
            return Err(Error::ShapeMismatch {
                name: have.name.clone(),
                expected: vec![want.rows, want.cols],
                found: vec![have.rows, have.cols],
            });
        }
    }

    let mut adam = Adam::new(meta.optimizer.clone(), &store);
    adam.restore(m, v, counts, global_step);
    Ok((meta, store, adam))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optim::Binding;
    use crate::tensor::Tape;
    use rand::Rng;

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            model_dim: 8,
            heads: 2,
            encoder_layers: 1,
            decoder_blocks: 1,
            term_dim: 4,
            visual_dim: 4,
            text_dim: 4,
            n_terms: 3,
            grid_h: 2,
            grid_w: 2,
            channels: 2,
            vocab_size: 12,
            max_len: 10,
            dropout: 0.0,
        }
    }

    fn tiny_meta(cfg: &ModelConfig, rng_state: RngState) -> CheckpointMeta {
        CheckpointMeta {
            model: cfg.clone(),
            optimizer: AdamConfig {
                lr: 1e-3,
                ..AdamConfig::default()
            },
            lambda: 1.0,
            schedule_m: 1,
            schedule_n: 3,
            state: TrainState {
                epoch: 2,
                best_value: Some(0.5),
                best_epoch: Some(1),
                epochs_since_best: 1,
            },
            rng: rng_state,
            vocab_hash: "abc".into(),
            grammar_hash: "def".into(),
        }
    }

    /// One synthetic "training step": pseudo-gradients drawn from the
    /// given RNG pushed through a real optimizer update on all params.
    fn synthetic_step(store: &mut ParamStore<f32>, adam: &mut Adam<f32>, rng: &mut ChaCha8Rng) {
        store.zero_grad();
        let mut tape: Tape<f32> = Tape::new();
        let mut binding = Binding::new();
        let all: Vec<usize> = (0..store.len()).collect();
        for i in 0..store.len() {
            let name = store.at(i).name.clone();
            let _ = store.bind(&mut tape, &mut binding, &name);
        }
        for i in 0..store.len() {
            let p = store.at_mut(i);
            for g in p.grad.iter_mut() {
                *g = rng.gen_range(-0.1..0.1);
            }
            p.grad_seen = true;
        }
        adam.step(store, &all).unwrap();
    }

    fn fresh() -> (ModelConfig, ParamStore<f32>, Adam<f32>) {
        let cfg = tiny_config();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let store = init_params::<f32>(&cfg, &mut rng);
        let adam = Adam::new(
            AdamConfig {
                lr: 1e-3,
                ..AdamConfig::default()
            },
            &store,
        );
        (cfg, store, adam)
    }

    fn assert_stores_equal(a: &ParamStore<f32>, b: &ParamStore<f32>) {
        assert_eq!(a.names(), b.names());
        for (x, y) in a.iter().zip(b.iter()) {
            assert_eq!(x.data, y.data, "parameter {}", x.name);
        }
    }

    #[test]
    fn round_trip_preserves_every_bit() {
        let (cfg, mut store, mut adam) = fresh();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..4 {
            synthetic_step(&mut store, &mut adam, &mut rng);
        }
        let meta = tiny_meta(&cfg, RngState::of(5, &rng));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.agck");
        save_checkpoint(&path, &meta, &store, &adam).unwrap();
        let (loaded_meta, loaded_store, loaded_adam) = load_checkpoint(&path).unwrap();
        assert_eq!(loaded_meta, meta);
        assert_stores_equal(&loaded_store, &store);
        let (m0, v0, c0) = adam.moments();
        let (m1, v1, c1) = loaded_adam.moments();
        assert_eq!(m0, m1);
        assert_eq!(v0, v1);
        assert_eq!(c0, c1);
        assert_eq!(loaded_adam.global_step(), adam.global_step());
        // saving the loaded state reproduces the file byte for byte
        let path2 = dir.path().join("again.agck");
        save_checkpoint(&path2, &loaded_meta, &loaded_store, &loaded_adam).unwrap();
        assert_eq!(
            std::fs::read(&path).unwrap(),
            std::fs::read(&path2).unwrap()
        );
    }

    #[test]
    fn resumed_training_is_bitwise_identical_to_uninterrupted() {
        // Run A: 10 synthetic steps straight through.
        let (_, mut store_a, mut adam_a) = fresh();
        let mut rng_a = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..10 {
            synthetic_step(&mut store_a, &mut adam_a, &mut rng_a);
        }

        // Run B: 5 steps, checkpoint, reload, 5 more.
        let (cfg, mut store_b, mut adam_b) = fresh();
        let mut rng_b = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..5 {
            synthetic_step(&mut store_b, &mut adam_b, &mut rng_b);
        }
        let meta = tiny_meta(&cfg, RngState::of(5, &rng_b));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("mid.agck");
        save_checkpoint(&path, &meta, &store_b, &adam_b).unwrap();
        drop((store_b, adam_b, rng_b));
        let (loaded_meta, mut store_c, mut adam_c) = load_checkpoint(&path).unwrap();
        let mut rng_c = loaded_meta.rng.restore();
        for _ in 0..5 {
            synthetic_step(&mut store_c, &mut adam_c, &mut rng_c);
        }
        assert_stores_equal(&store_a, &store_c);
        let (ma, va, ca) = adam_a.moments();
        let (mc, vc, cc) = adam_c.moments();
        assert_eq!(ma, mc);
        assert_eq!(va, vc);
        assert_eq!(ca, cc);
    }

    #[test]
    fn rng_state_restores_the_exact_position() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        rng.set_stream(3);
        let _: [u64; 7] = core::array::from_fn(|_| rng.gen());
        let state = RngState::of(42, &rng);
        let mut restored = state.restore();
        let next_a: u64 = rng.gen();
        let next_b: u64 = restored.gen();
        assert_eq!(next_a, next_b);
    }

    #[test]
    fn corruption_and_wrong_files_are_rejected() {
        let (cfg, store, adam) = fresh();
        let meta = tiny_meta(&cfg, RngState::of(5, &ChaCha8Rng::seed_from_u64(5)));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.agck");
        save_checkpoint(&path, &meta, &store, &adam).unwrap();

        let clean = std::fs::read(&path).unwrap();

        let mut flipped = clean.clone();
        let mid = flipped.len() / 2;
        flipped[mid] ^= 1;
        std::fs::write(&path, &flipped).unwrap();
        let err = load_checkpoint(&path).unwrap_err();
        assert!(matches!(err, Error::HashMismatch(_)), "{err}");
        assert_eq!(err.exit_code(), 4);

        std::fs::write(&path, &clean[..clean.len() / 3]).unwrap();
        let err = load_checkpoint(&path).unwrap_err();
        assert_eq!(err.exit_code(), 4);

        std::fs::write(&path, b"AGDSnot a checkpoint but long enough to get past length checks")
            .unwrap();
        let err = load_checkpoint(&path).unwrap_err();
        assert!(matches!(err, Error::Corrupt(_)), "{err}");

        let mut versioned = clean.clone();
        versioned[4] = 9;
        let body = versioned.len() - 32;
        let digest = Sha256::digest(&versioned[..body]);
        versioned[body..].copy_from_slice(&digest);
        std::fs::write(&path, &versioned).unwrap();
        let err = load_checkpoint(&path).unwrap_err();
        assert!(matches!(err, Error::VersionMismatch { found: 9, .. }), "{err}");
    }

    #[test]
    fn layout_disagreeing_with_header_config_is_rejected() {
        let (cfg, store, adam) = fresh();
        let mut meta = tiny_meta(&cfg, RngState::of(5, &ChaCha8Rng::seed_from_u64(5)));
        // Claim a different width than the stored tensors actually have.
        meta.model.term_dim = 6;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.agck");
        save_checkpoint(&path, &meta, &store, &adam).unwrap();
        let err = load_checkpoint(&path).unwrap_err();
        assert!(
            matches!(err, Error::ShapeMismatch { .. } | Error::Corrupt(_)),
            "{err}"
        );
        assert_eq!(err.exit_code(), 4);
    }
}
