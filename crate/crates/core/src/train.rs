//! Teacher-forced training under raster, random or labeled orders, order
//! extraction, and resumable checkpoints.
//!
//! Every random draw is keyed by `(seed, epoch, …)`, so a run resumed from a
//! checkpoint replays exactly what the uninterrupted run would have done.

use std::fmt::Write as _;
use std::path::Path;

#[cfg(not(target_arch = "wasm32"))]
use std::time::Instant;
#[cfg(target_arch = "wasm32")]
use web_time::Instant;

#[cfg(feature = "parallel")]
use rayon::prelude::*;

use crate::autograd::Tape;
use crate::bytes::{Reader, Writer};
use crate::data::{Dataset, Sample};
use crate::decode::{decode, CacheRegime, Content, DecodeMode, DecodePolicy};
use crate::error::{Error, Result};
use crate::grid::{average_order_distance, sample_uniform_order, Order};
use crate::model::checkpoint::{read_weights_from, write_weights_to};
use crate::model::{forward_batch, row_targets, Mode, ModelConfig, SeqInput, TransformerWeights};
use crate::optim::{adamw_step, AdamWConfig, OptimizerState, PlateauScheduler};
use crate::rng::{Purpose, SeededStream};
use crate::tensor::log_sum_exp;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OrderPolicy {
    Raster,
    Random,
    /// Each sample's stored order label.
    Labeled,
}

impl OrderPolicy {
    pub fn name(self) -> &'static str {
        match self {
            OrderPolicy::Raster => "raster",
            OrderPolicy::Random => "random",
            OrderPolicy::Labeled => "labeled",
        }
    }

    fn code(self) -> u8 {
        match self {
            OrderPolicy::Raster => 0,
            OrderPolicy::Random => 1,
            OrderPolicy::Labeled => 2,
        }
    }

    fn from_code(c: u8) -> Option<Self> {
        [OrderPolicy::Raster, OrderPolicy::Random, OrderPolicy::Labeled]
            .into_iter()
            .find(|p| p.code() == c)
    }
}

impl std::str::FromStr for OrderPolicy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "raster" => Ok(OrderPolicy::Raster),
            "random" => Ok(OrderPolicy::Random),
            "labeled" => Ok(OrderPolicy::Labeled),
            _ => Err(Error::Validation(format!("unknown order policy {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub plateau_factor: f64,
    pub plateau_patience: usize,
    pub policy: OrderPolicy,
    pub seed: u64,
    /// Include condition-token prediction terms in the loss.
    pub cond_terms: bool,
    pub weight_decay: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            batch_size: 16,
            epochs: 300,
            plateau_factor: 0.8,
            plateau_patience: 3,
            policy: OrderPolicy::Random,
            seed: 0,
            cond_terms: true,
            weight_decay: AdamWConfig::default().weight_decay,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Validation("batch size must be ≥ 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Validation(format!("learning rate {} must be > 0", self.lr)));
        }
        if !(self.plateau_factor > 0.0 && self.plateau_factor < 1.0) {
            return Err(Error::Validation(format!(
                "plateau factor {} outside (0, 1)",
                self.plateau_factor
            )));
        }
        if self.plateau_patience == 0 {
            return Err(Error::Validation("plateau patience must be ≥ 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    /// Loss seen by the plateau schedule: the validation loss, or the
    /// training loss when no validation split is given.
    pub val_loss: f64,
    pub lr: f64,
    pub mean_order_distance: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
    /// Loss of every optimizer step, in order.
    pub batch_losses: Vec<f64>,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,train_loss,val_loss,lr,mean_order_distance,seconds\n");
        for e in &self.epochs {
            let _ = writeln!(
                s,
                "{},{:?},{:?},{:?},{:?},{:.3}",
                e.epoch, e.train_loss, e.val_loss, e.lr, e.mean_order_distance, e.seconds
            );
        }
        s
    }

    pub fn extend(&mut self, other: TrainLog) {
        self.epochs.extend(other.epochs);
        self.batch_losses.extend(other.batch_losses);
    }
}

/// Loss of a batch split into its parts.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBreakdown {
    /// Weighted objective that training minimizes.
    pub loss: f64,
    /// Mean negative log-likelihood per image token.
    pub image_nll: f64,
    /// Mean negative log-likelihood per predicted condition token, 0 if none.
    pub cond_nll: f64,
    pub image_tokens: usize,
}

fn sequences(samples: &[&Sample], orders: &[&Order]) -> Result<Vec<SeqInput>> {
    samples
        .iter()
        .zip(orders)
        .map(|(s, o)| SeqInput::for_order(&s.cond, &s.tokens, o))
        .collect()
}

fn targets_for(
    seqs: &[SeqInput],
    samples: &[&Sample],
    img_weight: f64,
    cond_terms: bool,
) -> (Vec<Option<usize>>, Vec<f64>) {
    let (mut t, mut w) = (Vec::new(), Vec::new());
    for (seq, s) in seqs.iter().zip(samples) {
        let (a, b) = row_targets(seq, &s.tokens, img_weight, cond_terms);
        t.extend(a);
        w.extend(b);
    }
    (t, w)
}

fn check_batch(samples: &[&Sample], orders: &[&Order]) -> Result<()> {
    if samples.is_empty() {
        return Err(Error::Contract("empty batch".into()));
    }
    if samples.len() != orders.len() {
        return Err(Error::Dimension {
            op: "batch orders",
            left: vec![samples.len()],
            right: vec![orders.len()],
        });
    }
    Ok(())
}

/// Teacher-forced loss of `samples` generated in `orders`, evaluation mode.
pub fn permuted_loss(
    samples: &[&Sample],
    orders: &[&Order],
    weights: &TransformerWeights,
    cond_terms: bool,
) -> Result<LossBreakdown> {
    check_batch(samples, orders)?;
    let seqs = sequences(samples, orders)?;
    let mut tape = Tape::new();
    let mut unused = SeededStream::new(0, 0);
    let out = forward_batch(&mut tape, weights, &seqs, Mode::Eval, &mut unused)?;
    let w_img = weights.config.img_loss_weight;
    let (targets, wts) = targets_for(&seqs, samples, w_img, cond_terms);
    let logits = tape.value(out.logits);
    let (mut num, mut den) = (0.0, 0.0);
    let (mut img, mut n_img, mut cond, mut n_cond) = (0.0, 0usize, 0.0, 0usize);
    let tc = weights.config.cond_len;
    for (i, t) in targets.iter().enumerate() {
        let Some(t) = *t else { continue };
        let row = logits.row(i);
        let nll = log_sum_exp(row) - row[t];
        num += wts[i] * nll;
        den += wts[i];
        if i % out.seq_len >= tc {
            img += nll;
            n_img += 1;
        } else {
            cond += nll;
            n_cond += 1;
        }
    }
    Ok(LossBreakdown {
        loss: num / den,
        image_nll: img / n_img.max(1) as f64,
        cond_nll: if n_cond == 0 { 0.0 } else { cond / n_cond as f64 },
        image_tokens: n_img,
    })
}

/// Per-image-token negative log-likelihoods of one sample, in generation
/// order.
pub fn image_token_nlls(sample: &Sample, order: &Order, weights: &TransformerWeights) -> Result<Vec<f64>> {
    Ok(batch_image_token_nlls(&[sample], &[order], weights)?.remove(0))
}

pub(crate) fn batch_image_token_nlls(
    samples: &[&Sample],
    orders: &[&Order],
    weights: &TransformerWeights,
) -> Result<Vec<Vec<f64>>> {
    check_batch(samples, orders)?;
    let seqs = sequences(samples, orders)?;
    let mut tape = Tape::new();
    let mut unused = SeededStream::new(0, 0);
    let out = forward_batch(&mut tape, weights, &seqs, Mode::Eval, &mut unused)?;
    let logits = tape.value(out.logits);
    let tc = weights.config.cond_len;
    Ok(seqs
        .iter()
        .enumerate()
        .map(|(b, seq)| {
            seq.steps
                .iter()
                .enumerate()
                .map(|(i, s)| {
                    let row = logits.row(b * out.seq_len + tc + i);
                    log_sum_exp(row) - row[samples[b].tokens[s.next] as usize]
                })
                .collect()
        })
        .collect())
}

/// Loss and parameter gradients of one training batch.
pub fn loss_and_grads(
    samples: &[&Sample],
    orders: &[&Order],
    weights: &TransformerWeights,
    cond_terms: bool,
    dropout: &mut SeededStream,
) -> Result<(f64, Vec<Vec<f64>>)> {
    check_batch(samples, orders)?;
    let seqs = sequences(samples, orders)?;
    let mut tape = Tape::new();
    let out = forward_batch(&mut tape, weights, &seqs, Mode::Train, dropout)?;
    let (t, w) = targets_for(&seqs, samples, weights.config.img_loss_weight, cond_terms);
    let loss = tape.cross_entropy(out.logits, t, w)?;
    tape.backward(loss)?;
    let grads = out
        .params
        .iter()
        .zip(&weights.params)
        .map(|(&v, p)| tape.grad(v).map_or_else(|| vec![0.0; p.len()], <[f64]>::to_vec))
        .collect();
    Ok((tape.value(loss).item(), grads))
}

/// Orders used for `data` in `epoch`. Random orders are fresh per epoch and
/// sample; validation draws use `Purpose::EvalOrder` and ignore the epoch.
pub(crate) fn epoch_orders(
    data: &Dataset,
    policy: OrderPolicy,
    seed: u64,
    purpose: Purpose,
    epoch: usize,
) -> Result<Vec<Order>> {
    let n = data.spec.grid.len();
    (0..data.len())
        .map(|i| match policy {
            OrderPolicy::Raster => Ok(Order::raster(n)),
            OrderPolicy::Random => {
                let mut s = SeededStream::keyed(seed, purpose, &[epoch as u64, i as u64]);
                Ok(sample_uniform_order(n, &mut s))
            }
            OrderPolicy::Labeled => data.samples[i]
                .order
                .clone()
                .ok_or_else(|| Error::Validation(format!("sample {i} has no order label"))),
        })
        .collect()
}

/// Owns the weights and optimizer for one training run.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub weights: TransformerWeights,
    pub config: TrainConfig,
    pub optimizer: OptimizerState,
    pub scheduler: PlateauScheduler,
    /// Completed epochs.
    pub epoch: usize,
}

impl Trainer {
    pub fn new(weights: TransformerWeights, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let adam = AdamWConfig {
            lr: config.lr,
            weight_decay: config.weight_decay,
            ..AdamWConfig::default()
        };
        let optimizer = OptimizerState::new(adam, &weights.params);
        let scheduler = PlateauScheduler::new(config.lr, config.plateau_factor, config.plateau_patience)?;
        Ok(Self {
            weights,
            config,
            optimizer,
            scheduler,
            epoch: 0,
        })
    }

    fn check_data(&self, data: &Dataset) -> Result<()> {
        let c = &self.weights.config;
        let s = &data.spec;
        if s.grid != c.grid || s.vocab > c.vocab || s.cond_len != c.cond_len || s.cond_vocab > c.cond_vocab {
            return Err(Error::Validation(format!(
                "dataset (grid {}x{}, vocab {}, cond {}x{}) does not fit model (grid {}x{}, vocab {}, cond {}x{})",
                s.grid.rows,
                s.grid.cols,
                s.vocab,
                s.cond_len,
                s.cond_vocab,
                c.grid.rows,
                c.grid.cols,
                c.vocab,
                c.cond_len,
                c.cond_vocab
            )));
        }
        if data.is_empty() {
            return Err(Error::Validation("empty dataset".into()));
        }
        Ok(())
    }

    /// Weighted objective on `data` in evaluation mode.
    pub fn evaluate(&self, data: &Dataset) -> Result<f64> {
        let orders = epoch_orders(data, self.config.policy, self.config.seed, Purpose::EvalOrder, 0)?;
        let chunk = 32;
        let (mut num, mut den) = (0.0, 0.0);
        for start in (0..data.len()).step_by(chunk) {
            let end = (start + chunk).min(data.len());
            let samples: Vec<&Sample> = data.samples[start..end].iter().collect();
            let os: Vec<&Order> = orders[start..end].iter().collect();
            let b = permuted_loss(&samples, &os, &self.weights, self.config.cond_terms)?;
            num += b.loss * (end - start) as f64;
            den += (end - start) as f64;
        }
        Ok(num / den)
    }

    /// One pass over `train`; validation on `val` (or the training loss when
    /// absent) drives the plateau schedule.
    pub fn run_epoch(&mut self, train: &Dataset, val: Option<&Dataset>) -> Result<(EpochLog, Vec<f64>)> {
        self.check_data(train)?;
        if let Some(v) = val {
            self.check_data(v)?;
        }
        let start = Instant::now();
        let epoch = self.epoch;
        let seed = self.config.seed;
        let orders = epoch_orders(train, self.config.policy, seed, Purpose::TrainOrder, epoch)?;
        let mut perm: Vec<usize> = (0..train.len()).collect();
        let mut sh = SeededStream::keyed(seed, Purpose::Shuffle, &[epoch as u64]);
        for i in (1..perm.len()).rev() {
            perm.swap(i, sh.below(i + 1));
        }
        let lr = self.scheduler.lr;
        self.optimizer.config.lr = lr;
        let mut losses = Vec::new();
        for (b, idx) in perm.chunks(self.config.batch_size).enumerate() {
            let samples: Vec<&Sample> = idx.iter().map(|&i| &train.samples[i]).collect();
            let os: Vec<&Order> = idx.iter().map(|&i| &orders[i]).collect();
            let mut drop = SeededStream::keyed(seed, Purpose::Dropout, &[epoch as u64, b as u64]);
            let (loss, grads) = loss_and_grads(&samples, &os, &self.weights, self.config.cond_terms, &mut drop)?;
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch, batch: b, loss });
            }
            adamw_step(&mut self.weights.params, &grads, &mut self.optimizer)?;
            losses.push(loss);
        }
        let train_loss = losses.iter().sum::<f64>() / losses.len() as f64;
        let val_loss = match val {
            Some(v) => self.evaluate(v)?,
            None => train_loss,
        };
        if !val_loss.is_finite() {
            return Err(Error::Diverged {
                epoch,
                batch: losses.len(),
                loss: val_loss,
            });
        }
        self.scheduler.observe(val_loss);
        let mean_order_distance = if train.spec.grid.len() >= 2 {
            let total: f64 = orders
                .iter()
                .map(|o| average_order_distance(o, train.spec.grid))
                .sum::<Result<f64>>()?;
            total / orders.len() as f64
        } else {
            0.0
        };
        self.epoch += 1;
        Ok((
            EpochLog {
                epoch: epoch + 1,
                train_loss,
                val_loss,
                lr,
                mean_order_distance,
                seconds: start.elapsed().as_secs_f64(),
            },
            losses,
        ))
    }

    /// Runs `epochs` more epochs.
    pub fn fit(&mut self, train: &Dataset, val: Option<&Dataset>, epochs: usize) -> Result<TrainLog> {
        let mut log = TrainLog::default();
        for _ in 0..epochs {
            let (row, losses) = self.run_epoch(train, val)?;
            log.epochs.push(row);
            log.batch_losses.extend(losses);
        }
        Ok(log)
    }
}

/// Trains under the configured order policy (random by default) for
/// `config.epochs` epochs.
pub fn train_any_order(
    weights: TransformerWeights,
    train: &Dataset,
    val: Option<&Dataset>,
    config: TrainConfig,
) -> Result<(TransformerWeights, TrainLog)> {
    let epochs = config.epochs;
    let mut t = Trainer::new(weights, config)?;
    let log = t.fit(train, val, epochs)?;
    Ok((t.weights, log))
}

/// Trains on each sample's stored order label. Every training sample, and
/// every validation sample when given, must be labeled.
pub fn finetune_ordered(
    weights: TransformerWeights,
    train: &Dataset,
    val: Option<&Dataset>,
    mut config: TrainConfig,
) -> Result<(TransformerWeights, TrainLog)> {
    for d in std::iter::once(train).chain(val) {
        if let Some(i) = d.samples.iter().position(|s| s.order.is_none()) {
            return Err(Error::Validation(format!("sample {i} has no order label")));
        }
    }
    config.policy = OrderPolicy::Labeled;
    train_any_order(weights, train, val, config)
}

/// Policy for order extraction: ordered selection on true content.
pub fn extraction_policy(config: &ModelConfig, lambda: f64) -> DecodePolicy {
    DecodePolicy {
        lambda,
        regime: CacheRegime::Cached,
        ..DecodePolicy::ordered(config.vocab).with_mode(DecodeMode::Ordered)
    }
}

/// Runs ordered selection on every sample with its true tokens as content
/// and returns the chosen cell orders.
pub fn extract_orders(weights: &TransformerWeights, data: &Dataset, policy: &DecodePolicy) -> Result<Vec<Order>> {
    let one = |s: &Sample| -> Result<Order> {
        decode(&s.cond, weights, policy, Content::Teacher(&s.tokens), 0).map(|r| r.order)
    };
    #[cfg(feature = "parallel")]
    {
        data.samples.par_iter().map(one).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        data.samples.iter().map(one).collect()
    }
}

const TRAINER_MAGIC: &[u8; 4] = b"TRN1";

fn write_trainer(w: &mut Writer, t: &Trainer) {
    w.u8(1);
    w.bytes(TRAINER_MAGIC);
    let c = &t.config;
    w.f64(c.lr);
    w.usize32(c.batch_size);
    w.usize32(c.epochs);
    w.f64(c.plateau_factor);
    w.usize32(c.plateau_patience);
    w.u8(c.policy.code());
    w.u64(c.seed);
    w.u8(u8::from(c.cond_terms));
    w.f64(c.weight_decay);
    w.usize32(t.epoch);
    let o = &t.optimizer;
    for v in [
        o.config.lr,
        o.config.beta1,
        o.config.beta2,
        o.config.eps,
        o.config.weight_decay,
    ] {
        w.f64(v);
    }
    w.u64(o.step);
    for moments in [&o.m, &o.v] {
        for m in moments {
            for &x in m {
                w.f64(x);
            }
        }
    }
    let s = &t.scheduler;
    w.f64(s.lr);
    w.f64(s.factor);
    w.usize32(s.patience);
    w.f64(s.min_delta);
    w.usize32(s.cooldown);
    w.f64(s.best);
    w.usize32(s.bad_epochs);
    w.usize32(s.cooldown_left);
}

fn read_trainer(r: &mut Reader<'_>, weights: TransformerWeights) -> Result<Trainer> {
    r.expect_magic(TRAINER_MAGIC)?;
    let lr = r.f64()?;
    let batch_size = r.usize32()?;
    let epochs = r.usize32()?;
    let plateau_factor = r.f64()?;
    let plateau_patience = r.usize32()?;
    let at = r.offset();
    let policy = OrderPolicy::from_code(r.u8()?).ok_or_else(|| Error::format(at, "unknown order policy code"))?;
    let config = TrainConfig {
        lr,
        batch_size,
        epochs,
        plateau_factor,
        plateau_patience,
        policy,
        seed: r.u64()?,
        cond_terms: r.u8()? != 0,
        weight_decay: r.f64()?,
    };
    let epoch = r.usize32()?;
    let adam = AdamWConfig {
        lr: r.f64()?,
        beta1: r.f64()?,
        beta2: r.f64()?,
        eps: r.f64()?,
        weight_decay: r.f64()?,
    };
    let step = r.u64()?;
    let read_moments = |r: &mut Reader<'_>| -> Result<Vec<Vec<f64>>> {
        weights
            .params
            .iter()
            .map(|p| (0..p.len()).map(|_| r.f64()).collect())
            .collect()
    };
    let m = read_moments(r)?;
    let v = read_moments(r)?;
    let scheduler = PlateauScheduler {
        lr: r.f64()?,
        factor: r.f64()?,
        patience: r.usize32()?,
        min_delta: r.f64()?,
        cooldown: r.usize32()?,
        best: r.f64()?,
        bad_epochs: r.usize32()?,
        cooldown_left: r.usize32()?,
    };
    Ok(Trainer {
        weights,
        config,
        optimizer: OptimizerState {
            config: adam,
            step,
            m,
            v,
        },
        scheduler,
        epoch,
    })
}

/// Writes weights plus optimizer, scheduler and epoch counter.
pub fn save_checkpoint(path: impl AsRef<Path>, trainer: &Trainer) -> Result<()> {
    let path = path.as_ref();
    let mut w = Writer::default();
    write_weights_to(&mut w, &trainer.weights);
    write_trainer(&mut w, trainer);
    std::fs::write(path, w.buf).map_err(|e| Error::io(path, e))
}

/// Restores a trainer. With `expected`, a checkpoint for a different model
/// configuration is rejected.
pub fn load_checkpoint(path: impl AsRef<Path>, expected: Option<&ModelConfig>) -> Result<Trainer> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = Reader::new(&bytes);
    let weights = read_weights_from(&mut r)?;
    if let Some(c) = expected {
        if *c != weights.config {
            return Err(Error::Validation(format!(
                "{}: checkpoint config does not match the requested model",
                path.display()
            )));
        }
    }
    let at = r.offset();
    match r.u8()? {
        1 => read_trainer(&mut r, weights),
        0 => Err(Error::format(at, "checkpoint holds weights only, no trainer state")),
        b => Err(Error::format(at, format!("bad trainer-state flag {b}"))),
    }
}
