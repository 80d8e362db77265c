//! Generation: forced orders, ordered generation over all open cells, and
//! the joint top-k variant, under three evaluation regimes that must agree
//! bit for bit.

use std::fmt::{self, Write as _};
use std::path::Path;
use std::str::FromStr;
use std::time::Duration;

#[cfg(not(target_arch = "wasm32"))]
use std::time::Instant;
#[cfg(target_arch = "wasm32")]
use web_time::Instant;

use crate::error::{Error, Result};
use crate::grid::{linf_distance, sample_uniform_order, GridShape, Order};
use crate::model::{Decoder, KvCacheSecondary, StepInput, TransformerWeights};
use crate::rng::{Purpose, SeededStream};
use crate::tensor::{log_sum_exp, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DecodeMode {
    Raster,
    Random,
    Ordered,
    JointTopk,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScoreDomain {
    LogProb,
    Prob,
}

/// How candidate logits are computed. All three give identical results.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CacheRegime {
    /// Every candidate recomputes the whole prefix on its own.
    Naive,
    /// The prefix is recomputed once per step, then candidates run as a batch.
    Recompute,
    /// Candidates run as a batch against the committed key/value cache.
    Cached,
}

macro_rules! name_table {
    ($ty:ty, $($v:path => $s:literal),+ $(,)?) => {
        impl $ty {
            pub fn name(self) -> &'static str {
                match self { $($v => $s),+ }
            }
        }
        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.name())
            }
        }
        impl FromStr for $ty {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($s => Ok($v),)+
                    _ => Err(Error::Validation(format!(
                        "unknown {} {s:?}", stringify!($ty)
                    ))),
                }
            }
        }
    };
}

name_table!(DecodeMode,
    DecodeMode::Raster => "raster",
    DecodeMode::Random => "random",
    DecodeMode::Ordered => "ordered",
    DecodeMode::JointTopk => "joint_topk",
);
name_table!(ScoreDomain,
    ScoreDomain::LogProb => "log_prob",
    ScoreDomain::Prob => "prob",
);
name_table!(CacheRegime,
    CacheRegime::Naive => "naive",
    CacheRegime::Recompute => "no_cache",
    CacheRegime::Cached => "cache",
);

#[derive(Clone, Debug, PartialEq)]
pub struct DecodePolicy {
    pub mode: DecodeMode,
    /// Weight of the distance penalty.
    pub lambda: f64,
    pub top_k: usize,
    pub domain: ScoreDomain,
    /// Divide distances by `max(S_h, S_w)`.
    pub normalize_distance: bool,
    pub regime: CacheRegime,
}

impl DecodePolicy {
    /// Ordered generation without distance penalty, top-k at half the
    /// vocabulary.
    pub fn ordered(vocab: usize) -> Self {
        Self {
            mode: DecodeMode::Ordered,
            lambda: 0.0,
            top_k: (vocab / 2).max(1),
            domain: ScoreDomain::LogProb,
            normalize_distance: true,
            regime: CacheRegime::Cached,
        }
    }

    pub fn with_mode(mut self, mode: DecodeMode) -> Self {
        self.mode = mode;
        self
    }

    pub fn validate(&self, vocab: usize) -> Result<()> {
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::Parameter(format!("lambda {} must be ≥ 0", self.lambda)));
        }
        if self.top_k == 0 || self.top_k > vocab {
            return Err(Error::Parameter(format!("top-k {} outside [1, {vocab}]", self.top_k)));
        }
        Ok(())
    }
}

/// One evaluated candidate cell.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CandidateScore {
    pub location: usize,
    pub token: u32,
    /// Log-probability of `token` under the full softmax.
    pub logp: f64,
    /// L∞ distance to the previous cell, 0 at the first step.
    pub distance: usize,
    /// Selection score, filled in by [`select_location`]; `-inf` before.
    pub score: f64,
}

/// Indices of the `k` largest values, ties to the smaller index.
fn top_k_mask(logits: &[f64], k: usize) -> Vec<bool> {
    let mut idx: Vec<usize> = (0..logits.len()).collect();
    idx.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
    let mut mask = vec![false; logits.len()];
    for &i in &idx[..k] {
        mask[i] = true;
    }
    mask
}

/// Noise for every token, drawn in token order.
fn gumbel_noise(n: usize, stream: &mut SeededStream) -> Vec<f64> {
    (0..n).map(|_| stream.gumbel()).collect()
}

fn argmax_masked(logits: &[f64], noise: &[f64], mask: &[bool]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for i in 0..logits.len() {
        if !mask[i] {
            continue;
        }
        let s = logits[i] + noise[i];
        if best.is_none_or(|(_, b)| s > b) {
            best = Some((i, s));
        }
    }
    best.map(|(i, _)| i)
}

/// Samples a token from the `k` highest logits by Gumbel-max. Returns the
/// token and its noiseless log-probability over the full vocabulary.
pub fn gumbel_topk_sample(logits: &[f64], k: usize, stream: &mut SeededStream) -> Result<(u32, f64)> {
    if k == 0 || k > logits.len() {
        return Err(Error::Parameter(format!("top-k {k} outside [1, {}]", logits.len())));
    }
    let noise = gumbel_noise(logits.len(), stream);
    let mask = top_k_mask(logits, k);
    let t = argmax_masked(logits, &noise, &mask).expect("k ≥ 1");
    Ok((t as u32, logits[t] - log_sum_exp(logits)))
}

/// Noise stream for the candidate at `location` in decoding step `step`.
pub fn gumbel_stream(seed: u64, step: usize, location: usize) -> SeededStream {
    SeededStream::keyed(seed, Purpose::Gumbel, &[step as u64, location as u64])
}

/// Where candidate content comes from.
#[derive(Clone, Copy, Debug)]
pub enum Content<'a> {
    /// Sampled with Gumbel top-k.
    Sampled,
    /// Read from a known grid; used for order extraction.
    Teacher(&'a [u32]),
}

/// State of the committed prefix seen by candidate evaluation.
#[derive(Clone, Copy, Debug)]
pub struct Prefix {
    pub step: usize,
    /// Last committed token and its cell.
    pub last: Option<(u32, usize)>,
}

impl Prefix {
    fn candidate(&self, location: usize) -> StepInput {
        match self.last {
            None => StepInput::start(location),
            Some((t, p)) => StepInput::code(t, p, location),
        }
    }
}

/// Scores from candidate logits: per-location token choice and distance to
/// the previous cell.
fn score_candidates(
    logits: &Tensor,
    locations: &[usize],
    prefix: Prefix,
    top_k: usize,
    content: Content<'_>,
    grid: GridShape,
    seed: u64,
) -> Result<Vec<CandidateScore>> {
    let prev = prefix.last.map(|(_, p)| grid.position(p)).transpose()?;
    locations
        .iter()
        .enumerate()
        .map(|(i, &loc)| {
            let row = logits.row(i);
            let (token, logp) = match content {
                Content::Sampled => gumbel_topk_sample(row, top_k, &mut gumbel_stream(seed, prefix.step, loc))?,
                Content::Teacher(tokens) => {
                    let t = tokens[loc];
                    (t, row[t as usize] - log_sum_exp(row))
                }
            };
            let here = grid.position(loc)?;
            Ok(CandidateScore {
                location: loc,
                token,
                logp,
                distance: prev.map_or(0, |p| linf_distance(p, here)),
                score: f64::NEG_INFINITY,
            })
        })
        .collect()
}

/// Evaluates every candidate cell as one batch against the decoder's
/// committed cache, writing candidate keys and values to `secondary`, and
/// samples a token per cell from its own noise stream.
#[allow(clippy::too_many_arguments)]
pub fn candidate_batch_eval(
    decoder: &Decoder<'_>,
    candidates: &[usize],
    prefix: Prefix,
    policy: &DecodePolicy,
    content: Content<'_>,
    seed: u64,
    secondary: &mut KvCacheSecondary,
) -> Result<Vec<CandidateScore>> {
    let steps: Vec<StepInput> = candidates.iter().map(|&l| prefix.candidate(l)).collect();
    let logits = decoder.eval_candidates(&steps, secondary)?;
    let grid = decoder.weights().config.grid;
    score_candidates(&logits, candidates, prefix, policy.top_k, content, grid, seed)
}

fn distance_scale(policy: &DecodePolicy, grid: GridShape) -> f64 {
    if policy.normalize_distance {
        1.0 / grid.max_side() as f64
    } else {
        1.0
    }
}

/// Picks the candidate maximizing `likelihood − λ·d`, where the likelihood
/// term is the log-probability or the probability per `policy.domain` and
/// `d` is optionally normalized by the longer grid side. Ties go to the
/// smaller cell index.
pub fn select_location(scores: &[CandidateScore], policy: &DecodePolicy, grid: GridShape) -> Result<CandidateScore> {
    if scores.is_empty() {
        return Err(Error::Contract("select_location on no candidates".into()));
    }
    let scale = distance_scale(policy, grid);
    let mut best: Option<CandidateScore> = None;
    for s in scores {
        let like = match policy.domain {
            ScoreDomain::LogProb => s.logp,
            ScoreDomain::Prob => s.logp.exp(),
        };
        let mut c = *s;
        c.score = like - policy.lambda * (s.distance as f64 * scale);
        let better = match best {
            None => true,
            Some(b) => c.score > b.score || (c.score == b.score && c.location < b.location),
        };
        if better {
            best = Some(c);
        }
    }
    Ok(best.expect("non-empty"))
}

/// Joint variant: pools every (cell, token) pair, keeps the global top `k`
/// by logit, samples a token per cell among its surviving pairs (same noise
/// streams as the per-cell sampler) and then selects a cell as
/// [`select_location`] does. Cells with no surviving pair are skipped.
#[allow(clippy::too_many_arguments)]
pub fn joint_topk_select(
    logits: &Tensor,
    locations: &[usize],
    k: usize,
    prefix: Prefix,
    policy: &DecodePolicy,
    grid: GridShape,
    seed: u64,
) -> Result<CandidateScore> {
    let v = logits.last_dim();
    let total = locations.len() * v;
    if k == 0 || k > total {
        return Err(Error::Parameter(format!("joint top-k {k} outside [1, {total}]")));
    }
    if logits.rows() != locations.len() {
        return Err(Error::Dimension {
            op: "joint_topk_select",
            left: logits.shape().to_vec(),
            right: vec![locations.len()],
        });
    }
    let mut pairs: Vec<usize> = (0..total).collect();
    let d = logits.data();
    pairs.sort_by(|&a, &b| {
        d[b].total_cmp(&d[a])
            .then(locations[a / v].cmp(&locations[b / v]))
            .then((a % v).cmp(&(b % v)))
    });
    let mut mask = vec![false; total];
    for &p in &pairs[..k] {
        mask[p] = true;
    }
    let prev = prefix.last.map(|(_, p)| grid.position(p)).transpose()?;
    let mut scores = Vec::new();
    for (i, &loc) in locations.iter().enumerate() {
        let row = logits.row(i);
        let noise = gumbel_noise(v, &mut gumbel_stream(seed, prefix.step, loc));
        let Some(t) = argmax_masked(row, &noise, &mask[i * v..(i + 1) * v]) else {
            continue;
        };
        let here = grid.position(loc)?;
        scores.push(CandidateScore {
            location: loc,
            token: t as u32,
            logp: row[t] - log_sum_exp(row),
            distance: prev.map_or(0, |p| linf_distance(p, here)),
            score: f64::NEG_INFINITY,
        });
    }
    select_location(&scores, policy, grid)
}

/// Commits the candidate at `location` into the decoder's primary cache.
pub fn promote_candidate(secondary: &mut KvCacheSecondary, location: usize, decoder: &mut Decoder<'_>) -> Result<()> {
    decoder.promote(secondary, location).map(|_| ())
}

/// Output of one generation run.
#[derive(Clone, Debug)]
pub struct GenerationRecord {
    pub grid: GridShape,
    pub cond: Vec<u32>,
    pub policy: DecodePolicy,
    pub seed: u64,
    /// Token grid in cell order.
    pub tokens: Vec<u32>,
    pub order: Order,
    pub logps: Vec<f64>,
    pub distances: Vec<usize>,
    /// Candidate forward passes.
    pub forward_count: u64,
    pub wall: Duration,
}

impl GenerationRecord {
    /// Mean L∞ distance between consecutive cells; 0 for a single cell.
    pub fn mean_distance(&self) -> f64 {
        if self.distances.len() < 2 {
            return 0.0;
        }
        self.distances[1..].iter().sum::<usize>() as f64 / (self.distances.len() - 1) as f64
    }

    /// Everything except timing and the evaluation regime.
    pub fn same_output(&self, other: &Self) -> bool {
        self.grid == other.grid
            && self.cond == other.cond
            && self.seed == other.seed
            && self.tokens == other.tokens
            && self.order == other.order
            && self.logps.len() == other.logps.len()
            && self
                .logps
                .iter()
                .zip(&other.logps)
                .all(|(a, b)| a.to_bits() == b.to_bits())
            && self.distances == other.distances
            && self.forward_count == other.forward_count
    }

    /// Line-oriented text form. Omits wall time and regime so records from
    /// different regimes serialize identically.
    pub fn to_text(&self) -> String {
        let p = &self.policy;
        let mut s = String::new();
        let _ = writeln!(s, "grid {} {}", self.grid.rows, self.grid.cols);
        let _ = writeln!(
            s,
            "policy {} lambda={} topk={} domain={} normalize={}",
            p.mode,
            p.lambda,
            p.top_k,
            p.domain,
            u8::from(p.normalize_distance)
        );
        let _ = writeln!(s, "seed {}", self.seed);
        let cond: Vec<String> = self.cond.iter().map(u32::to_string).collect();
        let _ = writeln!(s, "cond {}", cond.join(" "));
        let _ = writeln!(s, "forwards {}", self.forward_count);
        s.push_str("step,location,token,logp,d\n");
        for (i, &loc) in self.order.as_slice().iter().enumerate() {
            let _ = writeln!(
                s,
                "{i},{loc},{},{:?},{}",
                self.tokens[loc], self.logps[i], self.distances[i]
            );
        }
        for r in 0..self.grid.rows {
            let row: Vec<String> = self.tokens[r * self.grid.cols..(r + 1) * self.grid.cols]
                .iter()
                .map(u32::to_string)
                .collect();
            let _ = writeln!(s, "{}", row.join(" "));
        }
        s
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }
}

/// Commit bookkeeping that differs between regimes.
enum Session<'w> {
    Cached(Decoder<'w>, KvCacheSecondary),
    /// Committed steps only; every evaluation rebuilds its prefix.
    Uncached(Vec<StepInput>),
}

fn rebuilt<'w>(weights: &'w TransformerWeights, cond: &[u32], steps: &[StepInput]) -> Result<Decoder<'w>> {
    let mut d = Decoder::new(weights);
    d.prefill_condition(cond)?;
    if !steps.is_empty() {
        d.extend(steps)?;
    }
    Ok(d)
}

fn candidate_logits(
    session: &mut Session<'_>,
    weights: &TransformerWeights,
    cond: &[u32],
    steps: &[StepInput],
    regime: CacheRegime,
) -> Result<Tensor> {
    match session {
        Session::Cached(dec, sec) => dec.eval_candidates(steps, sec),
        Session::Uncached(done) => {
            if regime == CacheRegime::Recompute {
                let dec = rebuilt(weights, cond, done)?;
                return dec.eval_candidates(steps, &mut KvCacheSecondary::new());
            }
            let v = weights.config.vocab;
            let mut out = Vec::with_capacity(steps.len() * v);
            for s in steps {
                let dec = rebuilt(weights, cond, done)?;
                let l = dec.eval_candidates(std::slice::from_ref(s), &mut KvCacheSecondary::new())?;
                out.extend_from_slice(l.data());
            }
            Tensor::new(vec![steps.len(), v], out)
        }
    }
}

/// Runs one decoding pass. With [`Content::Teacher`] the tokens are read
/// from the given grid and only the cell order is chosen.
pub fn decode(
    cond: &[u32],
    weights: &TransformerWeights,
    policy: &DecodePolicy,
    content: Content<'_>,
    seed: u64,
) -> Result<GenerationRecord> {
    let config = &weights.config;
    policy.validate(config.vocab)?;
    let grid = config.grid;
    let n = config.cells();
    if let Content::Teacher(t) = content {
        if t.len() != n {
            return Err(Error::Dimension {
                op: "decode",
                left: vec![t.len()],
                right: vec![n],
            });
        }
        if let Some(&bad) = t.iter().find(|&&x| x as usize >= config.vocab) {
            return Err(Error::Index {
                context: "teacher token",
                index: bad as usize,
                bound: config.vocab,
            });
        }
    }
    let start = Instant::now();
    let forced: Option<Vec<usize>> = match policy.mode {
        DecodeMode::Raster => Some((0..n).collect()),
        DecodeMode::Random => {
            let mut s = SeededStream::keyed(seed, Purpose::Order, &[]);
            Some(sample_uniform_order(n, &mut s).into_inner())
        }
        DecodeMode::Ordered | DecodeMode::JointTopk => None,
    };
    let mut session = match policy.regime {
        CacheRegime::Cached => {
            let mut d = Decoder::new(weights);
            d.prefill_condition(cond)?;
            Session::Cached(d, KvCacheSecondary::new())
        }
        _ => {
            crate::model::check_cond(cond, config)?;
            Session::Uncached(Vec::with_capacity(n))
        }
    };
    let mut open: Vec<usize> = (0..n).collect();
    let mut tokens = vec![0u32; n];
    let mut order = Vec::with_capacity(n);
    let mut logps = Vec::with_capacity(n);
    let mut distances = Vec::with_capacity(n);
    let mut forwards = 0u64;
    let mut prefix = Prefix { step: 0, last: None };

    for i in 0..n {
        prefix.step = i;
        let cands: Vec<usize> = match &forced {
            Some(o) => vec![o[i]],
            None => open.clone(),
        };
        let steps: Vec<StepInput> = cands.iter().map(|&l| prefix.candidate(l)).collect();
        let logits = candidate_logits(&mut session, weights, cond, &steps, policy.regime)?;
        forwards += cands.len() as u64;
        let chosen = if policy.mode == DecodeMode::JointTopk && matches!(content, Content::Sampled) {
            let k = policy.top_k.min(cands.len() * config.vocab);
            joint_topk_select(&logits, &cands, k, prefix, policy, grid, seed)?
        } else {
            let scores = score_candidates(&logits, &cands, prefix, policy.top_k, content, grid, seed)?;
            select_location(&scores, policy, grid)?
        };
        match &mut session {
            Session::Cached(dec, sec) => dec.promote(sec, chosen.location).map(|_| ())?,
            Session::Uncached(done) => done.push(prefix.candidate(chosen.location)),
        }
        open.retain(|&l| l != chosen.location);
        tokens[chosen.location] = chosen.token;
        order.push(chosen.location);
        logps.push(chosen.logp);
        distances.push(chosen.distance);
        prefix.last = Some((chosen.token, chosen.location));
    }
    Ok(GenerationRecord {
        grid,
        cond: cond.to_vec(),
        policy: policy.clone(),
        seed,
        tokens,
        order: Order::new(order, n)?,
        logps,
        distances,
        forward_count: forwards,
        wall: start.elapsed(),
    })
}

/// Samples an image under `policy`.
pub fn generate(
    cond: &[u32],
    weights: &TransformerWeights,
    policy: &DecodePolicy,
    seed: u64,
) -> Result<GenerationRecord> {
    decode(cond, weights, policy, Content::Sampled, seed)
}

/// Expected number of candidate forwards for a policy on `n` cells.
pub fn expected_forward_count(mode: DecodeMode, n: usize) -> u64 {
    let n = n as u64;
    match mode {
        DecodeMode::Raster | DecodeMode::Random => n,
        DecodeMode::Ordered | DecodeMode::JointTopk => n * (n + 1) / 2,
    }
}
