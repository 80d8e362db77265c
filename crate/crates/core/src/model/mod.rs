//! Decoder-only transformer with dual positional encoding.
//!
//! Each image step carries a token, the position it sits at and the position
//! to be predicted next. The positional addend is `[absolute(current) ‖
//! relative(current → next)]`, two halves of width `dim / 2`, each the sum of
//! a row and a column axial vector. Absolute and relative tables are
//! separate parameters.

pub(crate) mod checkpoint;
mod embed;
mod forward;
mod infer;

pub use checkpoint::{load_weights, read_weights, save_weights, write_weights, CKPT_MAGIC};
pub use embed::{embed_step, relative_index, StepInput, StepToken};
pub use forward::{forward_batch, forward_sequence, row_targets, BatchForward, Mode, SeqInput};
pub use infer::{Decoder, KvCachePrimary, KvCacheSecondary, KvRows};

pub(crate) use forward::check_cond;

use crate::error::{Error, Result};
use crate::grid::GridShape;
use crate::rng::{Purpose, SeededStream};
use crate::tensor::Tensor;

pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub grid: GridShape,
    /// Codebook size.
    pub vocab: usize,
    pub cond_vocab: usize,
    pub cond_len: usize,
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub dropout: f64,
    /// Loss weight of image tokens relative to condition tokens.
    pub img_loss_weight: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            grid: GridShape { rows: 8, cols: 8 },
            vocab: 64,
            cond_vocab: 16,
            cond_len: 4,
            dim: 128,
            depth: 4,
            heads: 4,
            head_dim: 32,
            dropout: 0.2,
            img_loss_weight: 7.0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Validation(m));
        if self.dim == 0 || !self.dim.is_multiple_of(2) {
            return bad(format!("dim {} must be even and positive", self.dim));
        }
        if self.heads == 0 || self.heads * self.head_dim != self.dim {
            return bad(format!(
                "heads {} × head_dim {} must equal dim {}",
                self.heads, self.head_dim, self.dim
            ));
        }
        if self.vocab < 2 {
            return bad(format!("vocab {} must be ≥ 2", self.vocab));
        }
        if self.cond_len == 0 || self.cond_vocab == 0 {
            return bad("cond_len and cond_vocab must be ≥ 1".into());
        }
        if self.cond_vocab > self.vocab {
            return bad(format!(
                "cond_vocab {} must not exceed vocab {} (condition tokens share the output head)",
                self.cond_vocab, self.vocab
            ));
        }
        if self.grid.rows == 0 || self.grid.cols == 0 {
            return bad("grid must be at least 1x1".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if !(self.img_loss_weight > 0.0) {
            return bad(format!("img_loss_weight {} must be > 0", self.img_loss_weight));
        }
        if self.depth == 0 {
            return bad("depth must be ≥ 1".into());
        }
        Ok(())
    }

    /// Token id of the start step; image codes occupy `0..vocab`.
    pub fn start_token(&self) -> usize {
        self.vocab
    }

    pub fn cells(&self) -> usize {
        self.grid.len()
    }

    /// Sequence length of a fully teacher-forced sample.
    pub fn seq_len(&self) -> usize {
        self.cond_len + self.cells()
    }

    pub fn half(&self) -> usize {
        self.dim / 2
    }

    /// Parameter names and shapes in storage order.
    pub fn param_specs(&self) -> Vec<(String, Vec<usize>)> {
        let d = self.dim;
        let h = self.half();
        let g = self.grid;
        let mut specs = vec![
            ("tok_emb".to_string(), vec![self.vocab + 1, d]),
            ("cond_emb".to_string(), vec![self.cond_vocab, d]),
            ("cond_pos".to_string(), vec![self.cond_len, d]),
            ("abs_row".to_string(), vec![g.rows, h]),
            ("abs_col".to_string(), vec![g.cols, h]),
            ("rel_row".to_string(), vec![2 * g.rows, h]),
            ("rel_col".to_string(), vec![2 * g.cols, h]),
        ];
        for l in 0..self.depth {
            let p = |s: &str| format!("layer{l}.{s}");
            specs.extend([
                (p("ln1_g"), vec![d]),
                (p("ln1_b"), vec![d]),
                (p("wq"), vec![d, d]),
                (p("bq"), vec![d]),
                (p("wk"), vec![d, d]),
                (p("bk"), vec![d]),
                (p("wv"), vec![d, d]),
                (p("bv"), vec![d]),
                (p("wo"), vec![d, d]),
                (p("bo"), vec![d]),
                (p("ln2_g"), vec![d]),
                (p("ln2_b"), vec![d]),
                (p("fc1_w"), vec![d, 4 * d]),
                (p("fc1_b"), vec![4 * d]),
                (p("fc2_w"), vec![4 * d, d]),
                (p("fc2_b"), vec![d]),
            ]);
        }
        specs.extend([
            ("lnf_g".to_string(), vec![d]),
            ("lnf_b".to_string(), vec![d]),
            ("head_w".to_string(), vec![d, self.vocab]),
            ("head_b".to_string(), vec![self.vocab]),
        ]);
        specs
    }

    pub fn param_count(&self) -> usize {
        self.param_specs()
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum()
    }
}

/// Indices into [`TransformerWeights::params`].
pub mod idx {
    pub const TOK_EMB: usize = 0;
    pub const COND_EMB: usize = 1;
    pub const COND_POS: usize = 2;
    pub const ABS_ROW: usize = 3;
    pub const ABS_COL: usize = 4;
    pub const REL_ROW: usize = 5;
    pub const REL_COL: usize = 6;
    pub const LAYER_BASE: usize = 7;
    pub const PER_LAYER: usize = 16;

    pub const LN1_G: usize = 0;
    pub const LN1_B: usize = 1;
    pub const WQ: usize = 2;
    pub const BQ: usize = 3;
    pub const WK: usize = 4;
    pub const BK: usize = 5;
    pub const WV: usize = 6;
    pub const BV: usize = 7;
    pub const WO: usize = 8;
    pub const BO: usize = 9;
    pub const LN2_G: usize = 10;
    pub const LN2_B: usize = 11;
    pub const FC1_W: usize = 12;
    pub const FC1_B: usize = 13;
    pub const FC2_W: usize = 14;
    pub const FC2_B: usize = 15;

    pub fn layer(l: usize, which: usize) -> usize {
        LAYER_BASE + l * PER_LAYER + which
    }

    pub fn final_base(depth: usize) -> usize {
        LAYER_BASE + depth * PER_LAYER
    }
}

/// Borrowed view of the four positional tables. Row 0 of each relative
/// table is never reached by an on-grid offset (`S + Δ ≥ 1`) and serves as
/// the start-offset row of the first image step.
pub struct PositionTables<'a> {
    pub abs_row: &'a Tensor,
    pub abs_col: &'a Tensor,
    pub rel_row: &'a Tensor,
    pub rel_col: &'a Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransformerWeights {
    pub config: ModelConfig,
    pub params: Vec<Tensor>,
}

impl TransformerWeights {
    /// Random initialization: normal(0, 0.02) for embeddings and projections,
    /// residual output projections scaled by `1/sqrt(2·depth)`, unit layer
    /// norm gains, zero biases and a zero output head (so an untrained model
    /// predicts the uniform distribution).
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut s = SeededStream::keyed(seed, Purpose::Init, &[]);
        let resid = 0.02 / (2.0 * config.depth as f64).sqrt();
        let params = config
            .param_specs()
            .into_iter()
            .map(|(name, shape)| {
                let n: usize = shape.iter().product();
                let base = name.rsplit('.').next().unwrap_or(&name).to_string();
                let data: Vec<f64> = match base.as_str() {
                    "head_w" => vec![0.0; n],
                    b if b.ends_with("_g") => vec![1.0; n],
                    b if shape.len() == 1 || b.ends_with("_b") => vec![0.0; n],
                    "wo" | "fc2_w" => (0..n).map(|_| s.normal() * resid).collect(),
                    _ => (0..n).map(|_| s.normal() * 0.02).collect(),
                };
                Tensor::new(shape, data)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            config: config.clone(),
            params,
        })
    }

    /// All-zero weights of the right shapes.
    pub fn zeros(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let params = config
            .param_specs()
            .into_iter()
            .map(|(_, s)| Tensor::zeros(&s))
            .collect();
        Ok(Self {
            config: config.clone(),
            params,
        })
    }

    pub fn param(&self, i: usize) -> &Tensor {
        &self.params[i]
    }

    pub fn param_mut(&mut self, i: usize) -> &mut Tensor {
        &mut self.params[i]
    }

    pub fn layer(&self, l: usize, which: usize) -> &Tensor {
        &self.params[idx::layer(l, which)]
    }

    pub fn position_tables(&self) -> PositionTables<'_> {
        PositionTables {
            abs_row: &self.params[idx::ABS_ROW],
            abs_col: &self.params[idx::ABS_COL],
            rel_row: &self.params[idx::REL_ROW],
            rel_col: &self.params[idx::REL_COL],
        }
    }

    pub fn head(&self) -> (&Tensor, &Tensor) {
        let f = idx::final_base(self.config.depth);
        (&self.params[f + 2], &self.params[f + 3])
    }

    pub fn final_norm(&self) -> (&Tensor, &Tensor) {
        let f = idx::final_base(self.config.depth);
        (&self.params[f], &self.params[f + 1])
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }
}
