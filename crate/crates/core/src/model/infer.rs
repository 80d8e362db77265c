//! Tape-free inference with key/value caching.
//!
//! Rows go through the same row kernels as the tape forward
//! ([`linear_rows`], [`layer_norm_rows`], [`attention_row`]), so a row
//! computed here is bitwise equal to the same row of a teacher-forced pass.

use super::embed::{step_indices, write_cond_embedding, write_step_embedding};
use super::forward::{check_cond, check_steps};
use super::{idx, ModelConfig, StepInput, TransformerWeights, LN_EPS};
use crate::autograd::attention_row;
use crate::error::{Error, Result};
use crate::tensor::{gelu, layer_norm_rows, linear_rows, Tensor};

/// Keys and values of one layer, `[rows × D]` each.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct KvRows {
    pub keys: Vec<f64>,
    pub values: Vec<f64>,
}

impl KvRows {
    pub fn rows(&self, dim: usize) -> usize {
        self.keys.len() / dim
    }

    fn clear(&mut self) {
        self.keys.clear();
        self.values.clear();
    }
}

/// Committed keys and values, append-only.
#[derive(Clone, Debug, PartialEq)]
pub struct KvCachePrimary {
    pub layers: Vec<KvRows>,
    dim: usize,
    len: usize,
}

impl KvCachePrimary {
    pub fn new(config: &ModelConfig) -> Self {
        Self {
            layers: vec![KvRows::default(); config.depth],
            dim: config.dim,
            len: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    fn check(&self, config: &ModelConfig) -> Result<()> {
        if self.layers.len() != config.depth || self.dim != config.dim {
            return Err(Error::State(format!(
                "cache has {} layers of width {}, model has {} of width {}",
                self.layers.len(),
                self.dim,
                config.depth,
                config.dim
            )));
        }
        if self.layers.iter().any(|l| l.rows(self.dim) != self.len) {
            return Err(Error::State("cache layers disagree on length".into()));
        }
        Ok(())
    }
}

/// Per-candidate keys and values for the current decoding step, stored
/// candidate-major. Buffers are kept across steps and only cleared.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct KvCacheSecondary {
    pub layers: Vec<KvRows>,
    candidates: Vec<StepInput>,
}

impl KvCacheSecondary {
    pub fn new() -> Self {
        Self::default()
    }

    /// Cells of the live candidates, in evaluation order.
    pub fn locations(&self) -> Vec<usize> {
        self.candidates.iter().map(|s| s.next).collect()
    }

    pub fn is_live(&self) -> bool {
        !self.candidates.is_empty()
    }

    fn index_of(&self, location: usize) -> Option<usize> {
        self.candidates.iter().position(|s| s.next == location)
    }

    fn reset(&mut self, depth: usize, candidates: &[StepInput]) {
        self.layers.resize_with(depth, KvRows::default);
        self.release();
        self.candidates.extend_from_slice(candidates);
    }

    fn release(&mut self) {
        self.candidates.clear();
        for l in &mut self.layers {
            l.clear();
        }
    }

    /// Keys and values of the candidate at `location`, one row per layer.
    pub fn row(&self, location: usize, dim: usize) -> Option<Vec<(&[f64], &[f64])>> {
        let i = self.index_of(location)?;
        Some(
            self.layers
                .iter()
                .map(|l| (&l.keys[i * dim..(i + 1) * dim], &l.values[i * dim..(i + 1) * dim]))
                .collect(),
        )
    }

    /// Appends the chosen candidate's rows to `primary`, releases the
    /// secondary cache and returns the promoted step.
    pub fn promote(&mut self, location: usize, primary: &mut KvCachePrimary) -> Result<StepInput> {
        let dim = primary.dim;
        let Some(i) = self.index_of(location) else {
            return Err(Error::State(format!("location {location} is not a live candidate")));
        };
        if self.layers.len() != primary.layers.len() {
            return Err(Error::State("secondary and primary depth differ".into()));
        }
        for (s, p) in self.layers.iter().zip(&mut primary.layers) {
            p.keys.extend_from_slice(&s.keys[i * dim..(i + 1) * dim]);
            p.values.extend_from_slice(&s.values[i * dim..(i + 1) * dim]);
        }
        primary.len += 1;
        let step = self.candidates[i];
        self.release();
        Ok(step)
    }
}

/// How new rows attend.
enum Attend<'a> {
    /// Rows are appended to the primary cache in sequence; row `i` sees the
    /// cache and new rows `0..=i`.
    Append(&'a mut KvCachePrimary),
    /// Rows are independent candidates; each sees the cache plus itself.
    Candidates(&'a KvCachePrimary, &'a mut KvCacheSecondary),
}

fn run_rows(weights: &TransformerWeights, mut x: Vec<f64>, r: usize, mut attend: Attend<'_>) -> Vec<f64> {
    let c = &weights.config;
    let d = c.dim;
    let mut h = vec![0.0; r * d];
    let mut attn = vec![0.0; r * d];
    let mut scratch = Vec::new();
    for l in 0..c.depth {
        let w = |which: usize| weights.layer(l, which).data();
        layer_norm_rows(&x, d, w(idx::LN1_G), w(idx::LN1_B), LN_EPS, &mut h, None);
        let q = linear_rows(&h, r, d, w(idx::WQ), d, Some(w(idx::BQ)));
        let k = linear_rows(&h, r, d, w(idx::WK), d, Some(w(idx::BK)));
        let v = linear_rows(&h, r, d, w(idx::WV), d, Some(w(idx::BV)));
        match &mut attend {
            Attend::Append(primary) => {
                let base = primary.len;
                let layer = &mut primary.layers[l];
                layer.keys.extend_from_slice(&k);
                layer.values.extend_from_slice(&v);
                for i in 0..r {
                    let end = (base + i + 1) * d;
                    attention_row(
                        &q[i * d..(i + 1) * d],
                        &layer.keys[..end],
                        &layer.values[..end],
                        None,
                        c.heads,
                        None,
                        &mut scratch,
                        &mut attn[i * d..(i + 1) * d],
                    );
                }
            }
            Attend::Candidates(primary, secondary) => {
                let layer = &primary.layers[l];
                for i in 0..r {
                    let own = (&k[i * d..(i + 1) * d], &v[i * d..(i + 1) * d]);
                    attention_row(
                        &q[i * d..(i + 1) * d],
                        &layer.keys,
                        &layer.values,
                        Some(own),
                        c.heads,
                        None,
                        &mut scratch,
                        &mut attn[i * d..(i + 1) * d],
                    );
                }
                let s = &mut secondary.layers[l];
                s.keys.extend_from_slice(&k);
                s.values.extend_from_slice(&v);
            }
        }
        let o = linear_rows(&attn, r, d, w(idx::WO), d, Some(w(idx::BO)));
        for (xi, oi) in x.iter_mut().zip(&o) {
            *xi += oi;
        }
        layer_norm_rows(&x, d, w(idx::LN2_G), w(idx::LN2_B), LN_EPS, &mut h, None);
        let mut f = linear_rows(&h, r, d, w(idx::FC1_W), 4 * d, Some(w(idx::FC1_B)));
        f.iter_mut().for_each(|v| *v = gelu(*v));
        let f = linear_rows(&f, r, 4 * d, w(idx::FC2_W), d, Some(w(idx::FC2_B)));
        for (xi, fi) in x.iter_mut().zip(&f) {
            *xi += fi;
        }
    }
    if let Attend::Append(primary) = attend {
        primary.len += r;
    }
    let (g, b) = weights.final_norm();
    layer_norm_rows(&x, d, g.data(), b.data(), LN_EPS, &mut h, None);
    let (hw, hb) = weights.head();
    linear_rows(&h, r, d, hw.data(), c.vocab, Some(hb.data()))
}

/// One decoding session: borrowed weights plus the committed cache.
#[derive(Clone, Debug)]
pub struct Decoder<'w> {
    weights: &'w TransformerWeights,
    pub primary: KvCachePrimary,
    /// Committed image steps, kept to validate new steps against.
    steps: Vec<StepInput>,
}

impl<'w> Decoder<'w> {
    pub fn new(weights: &'w TransformerWeights) -> Self {
        Self {
            weights,
            primary: KvCachePrimary::new(&weights.config),
            steps: Vec::new(),
        }
    }

    /// Resumes from an existing cache holding `steps` after the condition.
    pub fn with_cache(weights: &'w TransformerWeights, primary: KvCachePrimary, steps: Vec<StepInput>) -> Result<Self> {
        primary.check(&weights.config)?;
        if primary.len != weights.config.cond_len + steps.len() {
            return Err(Error::State(format!(
                "cache length {} does not match {} condition rows and {} steps",
                primary.len,
                weights.config.cond_len,
                steps.len()
            )));
        }
        Ok(Self {
            weights,
            primary,
            steps,
        })
    }

    pub fn weights(&self) -> &'w TransformerWeights {
        self.weights
    }

    pub fn committed_steps(&self) -> &[StepInput] {
        &self.steps
    }

    /// Runs the condition rows into an empty cache; returns their logits.
    pub fn prefill_condition(&mut self, cond: &[u32]) -> Result<Tensor> {
        let c = &self.weights.config;
        if !self.primary.is_empty() {
            return Err(Error::State("condition prefill on a non-empty cache".into()));
        }
        check_cond(cond, c)?;
        let d = c.dim;
        let mut x = vec![0.0; cond.len() * d];
        for (j, &t) in cond.iter().enumerate() {
            write_cond_embedding(t as usize, j, self.weights, &mut x[j * d..(j + 1) * d]);
        }
        let logits = run_rows(self.weights, x, cond.len(), Attend::Append(&mut self.primary));
        Tensor::new(vec![cond.len(), c.vocab], logits)
    }

    fn check_new_steps(&self, new: &[StepInput]) -> Result<()> {
        let c = &self.weights.config;
        if self.primary.len < c.cond_len {
            return Err(Error::State("image step before condition prefill".into()));
        }
        let mut all = self.steps.clone();
        all.extend_from_slice(new);
        check_steps(&all, c)
    }

    fn embed(&self, steps: &[StepInput]) -> Result<Vec<f64>> {
        let c = &self.weights.config;
        let d = c.dim;
        let mut x = vec![0.0; steps.len() * d];
        for (i, s) in steps.iter().enumerate() {
            let ix = step_indices(s, c)?;
            write_step_embedding(&ix, self.weights, &mut x[i * d..(i + 1) * d]);
        }
        Ok(x)
    }

    /// Commits image steps in sequence and returns their logits `[n × V]`.
    pub fn extend(&mut self, steps: &[StepInput]) -> Result<Tensor> {
        self.check_new_steps(steps)?;
        let x = self.embed(steps)?;
        let logits = run_rows(self.weights, x, steps.len(), Attend::Append(&mut self.primary));
        self.steps.extend_from_slice(steps);
        Tensor::new(vec![steps.len(), self.weights.config.vocab], logits)
    }

    /// Commits one step; returns its logits and the key/value rows it added.
    pub fn forward_incremental(&mut self, step: StepInput) -> Result<(Vec<f64>, Vec<KvRows>)> {
        let logits = self.extend(&[step])?.into_data();
        let d = self.weights.config.dim;
        let at = (self.primary.len - 1) * d;
        let kv = self
            .primary
            .layers
            .iter()
            .map(|l| KvRows {
                keys: l.keys[at..at + d].to_vec(),
                values: l.values[at..at + d].to_vec(),
            })
            .collect();
        Ok((logits, kv))
    }

    /// Evaluates independent candidate steps against the committed cache.
    /// Each candidate must be a valid next step; their keys and values go to
    /// `secondary`, indexed by the candidate's `next` cell. Returns logits
    /// `[candidates × V]` in input order.
    pub fn eval_candidates(&self, candidates: &[StepInput], secondary: &mut KvCacheSecondary) -> Result<Tensor> {
        for s in candidates {
            self.check_new_steps(std::slice::from_ref(s))?;
        }
        let x = self.embed(candidates)?;
        secondary.reset(self.weights.config.depth, candidates);
        let logits = run_rows(
            self.weights,
            x,
            candidates.len(),
            Attend::Candidates(&self.primary, secondary),
        );
        Tensor::new(vec![candidates.len(), self.weights.config.vocab], logits)
    }

    /// Moves the candidate predicting `location` from `secondary` into the
    /// committed cache.
    pub fn promote(&mut self, secondary: &mut KvCacheSecondary, location: usize) -> Result<StepInput> {
        let step = secondary.promote(location, &mut self.primary)?;
        self.steps.push(step);
        Ok(step)
    }
}
