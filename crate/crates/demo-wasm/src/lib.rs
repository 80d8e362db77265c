//! Browser bindings for three small interactive views: ordered generation
//! under a distance penalty, raster versus random order distance, and
//! Gumbel top-k sampling frequencies.

use wasm_bindgen::prelude::*;

use oar_core::decode::{generate, gumbel_topk_sample, DecodeMode, DecodePolicy};
use oar_core::grid::{average_order_distance, sample_uniform_order, GridShape, Order};
use oar_core::model::{ModelConfig, TransformerWeights};
use oar_core::rng::{Purpose, SeededStream};
use oar_core::tensor::log_sum_exp;

fn js_err(e: oar_core::Error) -> JsError {
    JsError::new(&e.to_string())
}

/// A randomly initialised 8×8 model whose logits are perturbed enough to
/// give non-trivial orders.
#[wasm_bindgen]
pub struct Demo {
    weights: TransformerWeights,
}

#[wasm_bindgen]
pub struct Generation {
    ranks: Vec<u32>,
    tokens: Vec<u32>,
    mean_distance: f64,
    forward_count: u32,
}

#[wasm_bindgen]
impl Generation {
    /// Generation rank of each cell, row-major.
    pub fn ranks(&self) -> Vec<u32> {
        self.ranks.clone()
    }

    pub fn tokens(&self) -> Vec<u32> {
        self.tokens.clone()
    }

    #[wasm_bindgen(getter)]
    pub fn mean_distance(&self) -> f64 {
        self.mean_distance
    }

    #[wasm_bindgen(getter)]
    pub fn forward_count(&self) -> u32 {
        self.forward_count
    }
}

#[wasm_bindgen]
impl Demo {
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u32) -> Result<Demo, JsError> {
        let config = ModelConfig {
            grid: GridShape { rows: 8, cols: 8 },
            vocab: 16,
            cond_vocab: 4,
            cond_len: 2,
            dim: 16,
            depth: 1,
            heads: 2,
            head_dim: 8,
            dropout: 0.0,
            img_loss_weight: 7.0,
        };
        let mut weights = TransformerWeights::init(&config, u64::from(seed)).map_err(js_err)?;
        let mut s = SeededStream::keyed(u64::from(seed), Purpose::Init, &[u64::MAX]);
        for p in &mut weights.params {
            for v in p.data_mut() {
                *v += 0.5 * s.normal();
            }
        }
        Ok(Demo { weights })
    }

    pub fn side(&self) -> usize {
        self.weights.config.grid.rows
    }

    /// Ordered generation with distance penalty `lambda`.
    pub fn generate(&self, lambda: f64, seed: u32) -> Result<Generation, JsError> {
        let policy = DecodePolicy {
            lambda,
            ..DecodePolicy::ordered(self.weights.config.vocab).with_mode(DecodeMode::Ordered)
        };
        let rec = generate(&[1, 2], &self.weights, &policy, u64::from(seed)).map_err(js_err)?;
        Ok(Generation {
            ranks: rec.order.ranks().into_iter().map(|r| r as u32).collect(),
            tokens: rec.tokens.clone(),
            mean_distance: rec.mean_distance(),
            forward_count: rec.forward_count as u32,
        })
    }
}

/// Average L∞ step distance of raster order, or the mean over `trials`
/// uniform orders, on a `side`×`side` grid.
#[wasm_bindgen]
pub fn order_distance(side: usize, random: bool, trials: u32, seed: u32) -> Result<f64, JsError> {
    let grid = GridShape::square(side).map_err(js_err)?;
    let n = grid.len();
    if !random {
        return average_order_distance(&Order::raster(n), grid).map_err(js_err);
    }
    let mut s = SeededStream::keyed(u64::from(seed), Purpose::Order, &[]);
    let trials = trials.max(1);
    let mut total = 0.0;
    for _ in 0..trials {
        total += average_order_distance(&sample_uniform_order(n, &mut s), grid).map_err(js_err)?;
    }
    Ok(total / f64::from(trials))
}

/// Empirical frequencies of Gumbel top-k draws over `logits`.
#[wasm_bindgen]
pub fn gumbel_frequencies(logits: Vec<f64>, k: usize, draws: u32, seed: u32) -> Result<Vec<f64>, JsError> {
    let mut counts = vec![0.0; logits.len()];
    let mut s = SeededStream::keyed(u64::from(seed), Purpose::Gumbel, &[]);
    for _ in 0..draws {
        let (t, _) = gumbel_topk_sample(&logits, k, &mut s).map_err(js_err)?;
        counts[t as usize] += 1.0;
    }
    let total = f64::from(draws.max(1));
    Ok(counts.into_iter().map(|c| c / total).collect())
}

/// Softmax restricted to the `k` largest logits (ties to the lower index).
#[wasm_bindgen]
pub fn truncated_softmax(logits: Vec<f64>, k: usize) -> Vec<f64> {
    if logits.is_empty() {
        return Vec::new();
    }
    let mut idx: Vec<usize> = (0..logits.len()).collect();
    idx.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
    let keep = &idx[..k.clamp(1, logits.len())];
    let kept: Vec<f64> = keep.iter().map(|&i| logits[i]).collect();
    let z = log_sum_exp(&kept);
    let mut out = vec![0.0; logits.len()];
    for &i in keep {
        out[i] = (logits[i] - z).exp();
    }
    out
}
