//! Held-out likelihood, order-information gap, decoding audits and PPM
//! renderings.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Duration;

use crate::data::{Dataset, Sample};
use crate::decode::{decode, expected_forward_count, CacheRegime, Content, DecodePolicy, GenerationRecord};
use crate::error::{Error, Result};
use crate::grid::{GridShape, Order};
use crate::model::TransformerWeights;
use crate::rng::Purpose;
use crate::train::{batch_image_token_nlls, epoch_orders, extract_orders, extraction_policy, OrderPolicy};

/// Which order each held-out sample is scored under.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum EvalOrder {
    Raster,
    /// One uniform order per sample, keyed by the seed.
    Random,
    /// The sample's stored label.
    Labeled,
    /// Orders the model itself extracts on the sample, at the given λ.
    Extracted {
        lambda: f64,
    },
}

impl EvalOrder {
    pub fn name(self) -> &'static str {
        match self {
            EvalOrder::Raster => "raster",
            EvalOrder::Random => "random",
            EvalOrder::Labeled => "labeled",
            EvalOrder::Extracted { .. } => "extracted",
        }
    }
}

/// Orders for every sample of `data` under `which`.
pub fn eval_orders(weights: &TransformerWeights, data: &Dataset, which: EvalOrder, seed: u64) -> Result<Vec<Order>> {
    match which {
        EvalOrder::Raster => epoch_orders(data, OrderPolicy::Raster, seed, Purpose::EvalOrder, 0),
        EvalOrder::Random => epoch_orders(data, OrderPolicy::Random, seed, Purpose::EvalOrder, 0),
        EvalOrder::Labeled => epoch_orders(data, OrderPolicy::Labeled, seed, Purpose::EvalOrder, 0),
        EvalOrder::Extracted { lambda } => extract_orders(weights, data, &extraction_policy(&weights.config, lambda)),
    }
}

/// Per-sample image-token NLLs of `data` under `orders`, in generation order.
pub fn token_nlls(weights: &TransformerWeights, data: &Dataset, orders: &[Order]) -> Result<Vec<Vec<f64>>> {
    if orders.len() != data.len() {
        return Err(Error::Dimension {
            op: "token_nlls",
            left: vec![data.len()],
            right: vec![orders.len()],
        });
    }
    let mut out = Vec::with_capacity(data.len());
    for (s, o) in data.samples.chunks(32).zip(orders.chunks(32)) {
        let s: Vec<&Sample> = s.iter().collect();
        let o: Vec<&Order> = o.iter().collect();
        out.extend(batch_image_token_nlls(&s, &o, weights)?);
    }
    Ok(out)
}

/// Mean negative log-likelihood per image token.
pub fn heldout_nll(weights: &TransformerWeights, data: &Dataset, which: EvalOrder, seed: u64) -> Result<f64> {
    let orders = eval_orders(weights, data, which, seed)?;
    mean_nll(weights, data, &orders)
}

pub fn mean_nll(weights: &TransformerWeights, data: &Dataset, orders: &[Order]) -> Result<f64> {
    let nlls = token_nlls(weights, data, orders)?;
    let n: usize = nlls.iter().map(Vec::len).sum();
    Ok(nlls.iter().flatten().sum::<f64>() / n as f64)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VInfoGap {
    /// Mean over samples of the summed NLL difference, in nats per image.
    pub summed: f64,
    /// `summed` divided by the number of cells.
    pub per_token: f64,
}

/// Cross-entropy of `data` under `orders_a` minus that under `orders_b`.
/// Positive when `orders_b` makes the data easier to predict.
pub fn v_information_gap(
    weights: &TransformerWeights,
    data: &Dataset,
    orders_a: &[Order],
    orders_b: &[Order],
) -> Result<VInfoGap> {
    if data.is_empty() {
        return Err(Error::Validation("empty dataset".into()));
    }
    let a = token_nlls(weights, data, orders_a)?;
    let b = token_nlls(weights, data, orders_b)?;
    let mut total = 0.0;
    for ((x, y), (oa, ob)) in a.iter().zip(&b).zip(orders_a.iter().zip(orders_b)) {
        if oa != ob {
            total += x.iter().sum::<f64>() - y.iter().sum::<f64>();
        }
    }
    let summed = total / data.len() as f64;
    Ok(VInfoGap {
        summed,
        per_token: summed / data.spec.grid.len() as f64,
    })
}

/// Mean over samples of (mean foreground rank − mean background rank).
/// Positive when background cells come first. Samples with an empty
/// foreground or background are skipped.
pub fn background_rank_gap(data: &Dataset, orders: &[Order]) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for (i, o) in orders.iter().enumerate().take(data.len()) {
        let mask = data.foreground_mask(i);
        let ranks = o.ranks();
        let (mut fg, mut nf, mut bg, mut nb) = (0.0, 0usize, 0.0, 0usize);
        for (cell, &f) in mask.iter().enumerate() {
            if f {
                fg += ranks[cell] as f64;
                nf += 1;
            } else {
                bg += ranks[cell] as f64;
                nb += 1;
            }
        }
        if nf > 0 && nb > 0 {
            total += fg / nf as f64 - bg / nb as f64;
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::Validation("no sample has both foreground and background".into()));
    }
    Ok(total / count as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ForwardAudit {
    pub observed: u64,
    pub expected: u64,
}

impl ForwardAudit {
    pub fn holds(&self) -> bool {
        self.observed == self.expected
    }
}

pub fn audit_forward_count(
    cond: &[u32],
    weights: &TransformerWeights,
    policy: &DecodePolicy,
    seed: u64,
) -> Result<ForwardAudit> {
    let rec = decode(cond, weights, policy, Content::Sampled, seed)?;
    Ok(ForwardAudit {
        observed: rec.forward_count,
        expected: expected_forward_count(policy.mode, weights.config.cells()),
    })
}

#[derive(Clone, Debug)]
pub struct TimingReport {
    pub naive: Duration,
    pub no_cache: Duration,
    pub cache: Duration,
    pub record: GenerationRecord,
}

impl TimingReport {
    pub fn speedup(&self) -> f64 {
        self.naive.as_secs_f64() / self.cache.as_secs_f64()
    }
}

fn median(mut v: Vec<Duration>) -> Duration {
    v.sort();
    v[v.len() / 2]
}

/// Median wall time of the same generation under each cache regime.
/// Fails if any run's output differs from the first.
pub fn timing_comparison(
    cond: &[u32],
    weights: &TransformerWeights,
    policy: &DecodePolicy,
    seed: u64,
    repeats: usize,
) -> Result<TimingReport> {
    if repeats == 0 {
        return Err(Error::Validation("repeats must be ≥ 1".into()));
    }
    let mut first: Option<GenerationRecord> = None;
    let mut times = [Vec::new(), Vec::new(), Vec::new()];
    for _ in 0..repeats {
        for (slot, regime) in [CacheRegime::Naive, CacheRegime::Recompute, CacheRegime::Cached]
            .into_iter()
            .enumerate()
        {
            let p = DecodePolicy {
                regime,
                ..policy.clone()
            };
            let rec = decode(cond, weights, &p, Content::Sampled, seed)?;
            times[slot].push(rec.wall);
            match &first {
                Some(f) if !f.same_output(&rec) => {
                    return Err(Error::State(format!("regime {regime} produced a different record")));
                }
                Some(_) => {}
                None => first = Some(rec),
            }
        }
    }
    let [naive, no_cache, cache] = times.map(median);
    Ok(TimingReport {
        naive,
        no_cache,
        cache,
        record: first.expect("at least one run"),
    })
}

const RAMP_START: [u8; 3] = [255, 230, 0];
const RAMP_END: [u8; 3] = [110, 0, 160];

fn ppm(width: usize, height: usize, pixel: impl Fn(usize, usize) -> [u8; 3]) -> Vec<u8> {
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    for y in 0..height {
        for x in 0..width {
            out.extend_from_slice(&pixel(x, y));
        }
    }
    out
}

/// Generation rank of each cell as a yellow-to-purple heatmap, `scale`
/// pixels per cell.
pub fn render_order_heatmap(order: &Order, grid: GridShape, scale: usize) -> Result<Vec<u8>> {
    if order.len() != grid.len() || scale == 0 {
        return Err(Error::Validation(format!(
            "order of {} cells on a {}x{} grid at scale {scale}",
            order.len(),
            grid.rows,
            grid.cols
        )));
    }
    let ranks = order.ranks();
    let denom = (grid.len() - 1).max(1) as f64;
    Ok(ppm(grid.cols * scale, grid.rows * scale, |x, y| {
        let t = ranks[(y / scale) * grid.cols + x / scale] as f64 / denom;
        let mut c = [0u8; 3];
        for k in 0..3 {
            let a = f64::from(RAMP_START[k]);
            let b = f64::from(RAMP_END[k]);
            c[k] = (a + (b - a) * t).round() as u8;
        }
        c
    }))
}

/// Fixed colour for a token: black for 0, then well-separated hues.
pub fn token_colour(token: u32) -> [u8; 3] {
    if token == 0 {
        return [0, 0, 0];
    }
    let h = (f64::from(token) * 0.618_033_988_75).fract() * 6.0;
    let v = if token.is_multiple_of(2) { 1.0 } else { 0.7 };
    let f = h.fract();
    let (r, g, b) = match h as u32 {
        0 => (1.0, f, 0.0),
        1 => (1.0 - f, 1.0, 0.0),
        2 => (0.0, 1.0, f),
        3 => (0.0, 1.0 - f, 1.0),
        4 => (f, 0.0, 1.0),
        _ => (1.0, 0.0, 1.0 - f),
    };
    let q = |x: f64| (x * v * 255.0).round() as u8;
    [q(r), q(g), q(b)]
}

/// Token grids tiled `per_row` across with a one-pixel white gutter.
pub fn render_sample_grid(
    images: &[&[u32]],
    grid: GridShape,
    vocab: usize,
    per_row: usize,
    scale: usize,
) -> Result<Vec<u8>> {
    if images.is_empty() || per_row == 0 || scale == 0 {
        return Err(Error::Validation("nothing to render".into()));
    }
    if let Some(t) = images.iter().flat_map(|i| i.iter()).find(|&&t| t as usize >= vocab) {
        return Err(Error::Validation(format!("token {t} outside vocabulary of {vocab}")));
    }
    if let Some(bad) = images.iter().find(|t| t.len() != grid.len()) {
        return Err(Error::Validation(format!(
            "image of {} tokens on a {}x{} grid",
            bad.len(),
            grid.rows,
            grid.cols
        )));
    }
    let cols = per_row.min(images.len());
    let rows = images.len().div_ceil(cols);
    let (tw, th) = (grid.cols * scale + 1, grid.rows * scale + 1);
    Ok(ppm(cols * tw + 1, rows * th + 1, |x, y| {
        let (tx, px) = (x / tw, x % tw);
        let (ty, py) = (y / th, y % th);
        let idx = ty * cols + tx;
        if px == 0 || py == 0 || tx >= cols || idx >= images.len() {
            return [255, 255, 255];
        }
        let (r, c) = ((py - 1) / scale, (px - 1) / scale);
        token_colour(images[idx][r * grid.cols + c])
    }))
}

pub fn write_ppm(path: impl AsRef<Path>, bytes: &[u8]) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Rows of `metric,policy,value`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsReport {
    pub rows: Vec<(String, String, f64)>,
}

impl MetricsReport {
    pub fn push(&mut self, metric: &str, policy: &str, value: f64) {
        self.rows.push((metric.to_owned(), policy.to_owned(), value));
    }

    pub fn get(&self, metric: &str, policy: &str) -> Option<f64> {
        self.rows
            .iter()
            .find(|(m, p, _)| m == metric && p == policy)
            .map(|r| r.2)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("metric,policy,value\n");
        for (m, p, v) in &self.rows {
            let _ = writeln!(s, "{m},{p},{v:?}");
        }
        s
    }
}
