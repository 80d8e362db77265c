use super::{idx, ModelConfig, TransformerWeights};
use crate::error::{Error, Result};
use crate::grid::{GridShape, Position};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum StepToken {
    /// Padding token in front of the first image token.
    Start,
    Code(u32),
}

/// One image-step input: the token sitting at `current` (or the start token
/// with no position) and the cell whose content this step predicts.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct StepInput {
    pub token: StepToken,
    pub current: Option<usize>,
    pub next: usize,
}

impl StepInput {
    pub fn start(next: usize) -> Self {
        Self {
            token: StepToken::Start,
            current: None,
            next,
        }
    }

    pub fn code(token: u32, current: usize, next: usize) -> Self {
        Self {
            token: StepToken::Code(token),
            current: Some(current),
            next,
        }
    }

    pub(crate) fn token_id(&self, config: &ModelConfig) -> Result<usize> {
        match self.token {
            StepToken::Start => Ok(config.start_token()),
            StepToken::Code(c) if (c as usize) < config.vocab => Ok(c as usize),
            StepToken::Code(c) => Err(Error::Index {
                context: "image token",
                index: c as usize,
                bound: config.vocab,
            }),
        }
    }

    /// Cells used for the absolute half. The start step has no current cell,
    /// so its absolute half encodes the cell it predicts.
    pub(crate) fn absolute_cell(&self) -> usize {
        self.current.unwrap_or(self.next)
    }
}

/// Per-axis index into the relative tables for the move `prev → next`:
/// `S + Δ`, which lies in `[1, 2S − 1]` for on-grid cells. A missing `prev`
/// (the start step) maps to the start-offset row 0 on both axes.
pub fn relative_index(prev: Option<Position>, next: Position, grid: GridShape) -> Result<(usize, usize)> {
    grid.check(next)?;
    match prev {
        None => Ok((0, 0)),
        Some(p) => {
            grid.check(p)?;
            Ok((grid.rows + next.row - p.row, grid.cols + next.col - p.col))
        }
    }
}

pub(crate) struct StepIndices {
    pub token: usize,
    pub abs: (usize, usize),
    pub rel: (usize, usize),
}

pub(crate) fn step_indices(step: &StepInput, config: &ModelConfig) -> Result<StepIndices> {
    let g = config.grid;
    let next = g.position(step.next).map_err(|_| position_err(step.next, g))?;
    let current = step
        .current
        .map(|c| g.position(c).map_err(|_| position_err(c, g)))
        .transpose()?;
    let rel = relative_index(current, next, g)?;
    let a = g.position(step.absolute_cell())?;
    Ok(StepIndices {
        token: step.token_id(config)?,
        abs: (a.row, a.col),
        rel,
    })
}

fn position_err(linear: usize, g: GridShape) -> Error {
    Error::Position {
        row: (linear / g.cols) as isize,
        col: (linear % g.cols) as isize,
        rows: g.rows,
        cols: g.cols,
    }
}

/// Input vector of one image step: token embedding plus
/// `[abs_row + abs_col ‖ rel_row + rel_col]`.
pub fn embed_step(step: &StepInput, weights: &TransformerWeights) -> Result<Vec<f64>> {
    let c = &weights.config;
    let ix = step_indices(step, c)?;
    let mut out = vec![0.0; c.dim];
    write_step_embedding(&ix, weights, &mut out);
    Ok(out)
}

/// Same association order as the tape forward so both paths agree bitwise.
pub(crate) fn write_step_embedding(ix: &StepIndices, weights: &TransformerWeights, out: &mut [f64]) {
    let h = weights.config.half();
    let tok = weights.param(idx::TOK_EMB).row(ix.token);
    let t = weights.position_tables();
    let (ar, ac) = (t.abs_row.row(ix.abs.0), t.abs_col.row(ix.abs.1));
    let (rr, rc) = (t.rel_row.row(ix.rel.0), t.rel_col.row(ix.rel.1));
    for j in 0..h {
        out[j] = tok[j] + (ar[j] + ac[j]);
        out[h + j] = tok[h + j] + (rr[j] + rc[j]);
    }
}

/// Input vector of condition token `token` at slot `slot`.
pub(crate) fn write_cond_embedding(token: usize, slot: usize, weights: &TransformerWeights, out: &mut [f64]) {
    let e = weights.param(idx::COND_EMB).row(token);
    let p = weights.param(idx::COND_POS).row(slot);
    for j in 0..out.len() {
        out[j] = e[j] + p[j];
    }
}
