//! Named parameter store, tape binding, and the ADAM optimizer.
//!
//! Parameters live in an insertion-ordered store and are bound onto a
//! fresh tape for every forward pass. Binding the same name twice on one
//! tape returns the same leaf, which is how weight tying works: both uses
//! feed gradient into one buffer. After backward, `harvest` moves leaf
//! gradients back into the store where the optimizer reads them.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor, TensorId};

#[derive(Debug)]
pub struct Param<S> {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<S>,
    pub grad: Vec<S>,
    /// Set when a gradient (possibly all-zero) has been accumulated since
    /// the last `zero_grad`; lets the optimizer reject un-wired parameters.
    pub grad_seen: bool,
}

#[derive(Debug)]
pub struct ParamStore<S: Scalar> {
    params: Vec<Param<S>>,
    index: HashMap<String, usize>,
}

impl<S: Scalar> Default for ParamStore<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        ParamStore {
            params: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn register(&mut self, name: &str, t: Tensor<S>) -> usize {
        assert!(
            !self.index.contains_key(name),
            "parameter '{name}' registered twice"
        );
        let n = t.data.len();
        self.params.push(Param {
            name: name.to_string(),
            rows: t.rows,
            cols: t.cols,
            data: t.data,
            grad: vec![S::ZERO; n],
            grad_seen: false,
        });
        self.index.insert(name.to_string(), self.params.len() - 1);
        self.params.len() - 1
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn total_values(&self) -> usize {
        self.params.iter().map(|p| p.data.len()).sum()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> &Param<S> {
        let i = self
            .index_of(name)
            .unwrap_or_else(|| panic!("unknown parameter '{name}'"));
        &self.params[i]
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Param<S> {
        let i = self
            .index_of(name)
            .unwrap_or_else(|| panic!("unknown parameter '{name}'"));
        &mut self.params[i]
    }

    pub fn at(&self, i: usize) -> &Param<S> {
        &self.params[i]
    }

    pub fn at_mut(&mut self, i: usize) -> &mut Param<S> {
        &mut self.params[i]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<S>> {
        self.params.iter()
    }

    /// Names in registration order.
    pub fn names(&self) -> Vec<String> {
        self.params.iter().map(|p| p.name.clone()).collect()
    }

    /// Indices of parameters whose name starts with any of `prefixes`.
    pub fn indices_with_prefixes(&self, prefixes: &[&str]) -> Vec<usize> {
        self.params
            .iter()
            .enumerate()
            .filter(|(_, p)| prefixes.iter().any(|pre| p.name.starts_with(pre)))
            .map(|(i, _)| i)
            .collect()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.iter_mut().for_each(|g| *g = S::ZERO);
            p.grad_seen = false;
        }
    }

    /// Copy of this store with values cast to another precision and
    /// gradients cleared.
    pub fn cast<T: Scalar>(&self) -> ParamStore<T> {
        let mut out = ParamStore::new();
        for p in &self.params {
            let data: Vec<T> = p.data.iter().map(|&v| T::from_f64(v.to_f64())).collect();
            out.register(&p.name, Tensor::new(p.rows, p.cols, data));
        }
        out
    }

    /// Bind a parameter onto `tape` as a leaf, reusing the existing leaf
    /// if this binding already has one (shared weights accumulate there).
    pub fn bind(&self, tape: &mut Tape<S>, binding: &mut Binding, name: &str) -> TensorId {
        let i = self
            .index_of(name)
            .unwrap_or_else(|| panic!("bind of unknown parameter '{name}'"));
        if let Some(&tid) = binding.map.get(&i) {
            return tid;
        }
        let p = &self.params[i];
        let tid = tape.leaf(Tensor::new(p.rows, p.cols, p.data.clone()));
        binding.map.insert(i, tid);
        tid
    }

    /// Accumulate tape gradients of every bound parameter into the store.
    pub fn harvest(&mut self, tape: &Tape<S>, binding: &Binding) {
        for (&i, &tid) in &binding.map {
            if let Some(g) = tape.grad(tid) {
                let p = &mut self.params[i];
                for (dst, &src) in p.grad.iter_mut().zip(g) {
                    *dst += src;
                }
                p.grad_seen = true;
            }
        }
    }
}

/// Maps parameter indices to their leaf on one particular tape.
#[derive(Default)]
pub struct Binding {
    map: HashMap<usize, TensorId>,
}

impl Binding {
    pub fn new() -> Self {
        Self::default()
    }

    /// Parameter indices bound on this tape.
    pub fn bound_indices(&self) -> Vec<usize> {
        let mut v: Vec<usize> = self.map.keys().copied().collect();
        v.sort_unstable();
        v
    }
}

// ───────────────────────── ADAM ─────────────────────────

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip over the touched parameters.
    pub clip_norm: Option<f64>,
    /// (name prefix, lr); the longest matching prefix wins.
    pub lr_overrides: Vec<(String, f64)>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 5e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: Some(1.0),
            lr_overrides: Vec::new(),
        }
    }
}

impl AdamConfig {
    fn lr_for(&self, name: &str) -> f64 {
        self.lr_overrides
            .iter()
            .filter(|(pre, _)| name.starts_with(pre.as_str()))
            .max_by_key(|(pre, _)| pre.len())
            .map(|(_, lr)| *lr)
            .unwrap_or(self.lr)
    }
}

#[derive(Debug)]
pub struct Adam<S> {
    pub cfg: AdamConfig,
    m: Vec<Vec<S>>,
    v: Vec<Vec<S>>,
    step_counts: Vec<u64>,
    global_step: u64,
}

impl<S: Scalar> Adam<S> {
    pub fn new(cfg: AdamConfig, store: &ParamStore<S>) -> Self {
        let m = store.iter().map(|p| vec![S::ZERO; p.data.len()]).collect();
        let v = store.iter().map(|p| vec![S::ZERO; p.data.len()]).collect();
        Adam {
            cfg,
            m,
            v,
            step_counts: vec![0; store.len()],
            global_step: 0,
        }
    }

    pub fn global_step(&self) -> u64 {
        self.global_step
    }

    pub fn step_count(&self, param: usize) -> u64 {
        self.step_counts[param]
    }

    /// Apply one update to exactly the parameters in `touched`.
    /// Moments of untouched parameters are left alone, so a parameter
    /// shared between training procedures keeps one moment history.
    pub fn step(&mut self, store: &mut ParamStore<S>, touched: &[usize]) -> Result<()> {
        assert_eq!(
            self.m.len(),
            store.len(),
            "optimizer state tracks {} parameters but store has {}",
            self.m.len(),
            store.len()
        );
        for &i in touched {
            if !store.at(i).grad_seen {
                return Err(Error::contract(format!(
                    "adam step: no gradient accumulated for parameter '{}'",
                    store.at(i).name
                )));
            }
        }

        if let Some(max_norm) = self.cfg.clip_norm {
            let mut sq = 0.0f64;
            for &i in touched {
                for &g in &store.at(i).grad {
                    let g = g.to_f64();
                    sq += g * g;
                }
            }
            let norm = sq.sqrt();
            if norm > max_norm {
                let scale = S::from_f64(max_norm / norm);
                for &i in touched {
                    for g in store.at_mut(i).grad.iter_mut() {
                        *g *= scale;
                    }
                }
            }
        }

        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let (b1s, b2s) = (S::from_f64(b1), S::from_f64(b2));
        let one_m_b1 = S::from_f64(1.0 - b1);
        let one_m_b2 = S::from_f64(1.0 - b2);
        let eps = S::from_f64(self.cfg.eps);
        for &i in touched {
            self.step_counts[i] += 1;
            let t = self.step_counts[i] as i32;
            let bc1 = S::from_f64(1.0 - b1.powi(t));
            let bc2 = S::from_f64(1.0 - b2.powi(t));
            let lr = S::from_f64(self.cfg.lr_for(&store.at(i).name));
            let p = store.at_mut(i);
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..p.data.len() {
                let g = p.grad[j];
                m[j] = b1s * m[j] + one_m_b1 * g;
                v[j] = b2s * v[j] + one_m_b2 * g * g;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                p.data[j] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        self.global_step += 1;
        Ok(())
    }

    // Checkpoint access.
    pub fn moments(&self) -> (&[Vec<S>], &[Vec<S>], &[u64]) {
        (&self.m, &self.v, &self.step_counts)
    }

    pub fn restore(
        &mut self,
        m: Vec<Vec<S>>,
        v: Vec<Vec<S>>,
        step_counts: Vec<u64>,
        global_step: u64,
    ) {
        assert_eq!(m.len(), self.m.len(), "restored moment count mismatch");
        assert_eq!(v.len(), self.v.len(), "restored moment count mismatch");
        assert_eq!(
            step_counts.len(),
            self.step_counts.len(),
            "restored step-count length mismatch"
        );
        self.m = m;
        self.v = v;
        self.step_counts = step_counts;
        self.global_step = global_step;
    }
}
