//! Teacher-forced forward pass on the autodiff tape.

use std::collections::HashSet;

use super::embed::step_indices;
use super::{idx, ModelConfig, StepInput, TransformerWeights, LN_EPS};
use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::grid::Order;
use crate::rng::SeededStream;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// One sequence: condition tokens followed by image steps. The first image
/// step is normally the start step.
#[derive(Clone, Debug, PartialEq)]
pub struct SeqInput {
    pub cond: Vec<u32>,
    pub steps: Vec<StepInput>,
}

impl SeqInput {
    /// Full teacher-forced sequence for `tokens` generated in `order`: the
    /// start step predicting `order[0]`, then one step per token but the
    /// last, each predicting the following cell.
    pub fn for_order(cond: &[u32], tokens: &[u32], order: &Order) -> Result<Self> {
        if tokens.len() != order.len() {
            return Err(Error::Dimension {
                op: "for_order",
                left: vec![tokens.len()],
                right: vec![order.len()],
            });
        }
        let o = order.as_slice();
        let mut steps = Vec::with_capacity(o.len());
        if let Some(&first) = o.first() {
            steps.push(StepInput::start(first));
        }
        for w in o.windows(2) {
            steps.push(StepInput::code(tokens[w[0]], w[0], w[1]));
        }
        Ok(Self {
            cond: cond.to_vec(),
            steps,
        })
    }

    pub fn len(&self) -> usize {
        self.cond.len() + self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Checks that the steps form a prefix of a valid order: distinct target
/// cells, a start sentinel only at the first step, and each step sitting on
/// the cell its predecessor predicted.
pub(crate) fn check_steps(steps: &[StepInput], config: &ModelConfig) -> Result<()> {
    let n = config.cells();
    let mut seen = HashSet::with_capacity(steps.len());
    for (i, s) in steps.iter().enumerate() {
        if s.next >= n {
            return Err(Error::Position {
                row: (s.next / config.grid.cols) as isize,
                col: (s.next % config.grid.cols) as isize,
                rows: config.grid.rows,
                cols: config.grid.cols,
            });
        }
        if !seen.insert(s.next) {
            return Err(Error::Order(format!("cell {} appears twice", s.next)));
        }
        match (i, s.current) {
            (0, _) => {}
            (_, None) => {
                return Err(Error::Order(format!("start sentinel at step {i}")));
            }
            (_, Some(c)) if c != steps[i - 1].next => {
                return Err(Error::Order(format!(
                    "step {i} sits on cell {c} but step {} predicted {}",
                    i - 1,
                    steps[i - 1].next
                )));
            }
            _ => {}
        }
    }
    Ok(())
}

pub(crate) fn check_cond(cond: &[u32], config: &ModelConfig) -> Result<()> {
    if cond.len() != config.cond_len {
        return Err(Error::Dimension {
            op: "condition",
            left: vec![cond.len()],
            right: vec![config.cond_len],
        });
    }
    for &c in cond {
        if c as usize >= config.cond_vocab {
            return Err(Error::Index {
                context: "condition token",
                index: c as usize,
                bound: config.cond_vocab,
            });
        }
    }
    Ok(())
}

/// Targets and loss weights for every row of a sequence. Condition row `j`
/// predicts condition token `j + 1` with weight 1; the last condition row
/// has no target; image step `i` predicts the token at its `next` cell with
/// weight `img_weight`.
pub fn row_targets(
    seq: &SeqInput,
    tokens: &[u32],
    img_weight: f64,
    cond_terms: bool,
) -> (Vec<Option<usize>>, Vec<f64>) {
    let tc = seq.cond.len();
    let mut targets = Vec::with_capacity(seq.len());
    let mut weights = Vec::with_capacity(seq.len());
    for j in 0..tc {
        if cond_terms && j + 1 < tc {
            targets.push(Some(seq.cond[j + 1] as usize));
            weights.push(1.0);
        } else {
            targets.push(None);
            weights.push(0.0);
        }
    }
    for s in &seq.steps {
        targets.push(Some(tokens[s.next] as usize));
        weights.push(img_weight);
    }
    (targets, weights)
}

/// Result of a batched forward pass: the parameter leaves in storage order,
/// logits stacked as `[B·L × V]`, and the shared sequence length.
pub struct BatchForward {
    pub params: Vec<Var>,
    pub logits: Var,
    pub seq_len: usize,
}

/// Puts every parameter on the tape as a leaf.
pub(crate) fn param_leaves(tape: &mut Tape, weights: &TransformerWeights, grad: bool) -> Vec<Var> {
    weights.params.iter().map(|p| tape.leaf(p.clone(), grad)).collect()
}

/// Forward pass of equal-length sequences stacked by rows. Returns logits of
/// shape `[B·L × V]`. Dropout draws come from `stream` in `Mode::Train`.
pub fn forward_batch(
    tape: &mut Tape,
    weights: &TransformerWeights,
    batch: &[SeqInput],
    mode: Mode,
    stream: &mut SeededStream,
) -> Result<BatchForward> {
    let config = &weights.config;
    let Some(first) = batch.first() else {
        return Err(Error::Contract("forward_batch on an empty batch".into()));
    };
    let seq_len = first.len();
    let mut tok = Vec::new();
    let mut cemb = Vec::new();
    let mut cpos = Vec::new();
    let (mut ar, mut ac, mut rr, mut rc) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for seq in batch {
        if seq.len() != seq_len {
            return Err(Error::Dimension {
                op: "forward_batch",
                left: vec![seq_len],
                right: vec![seq.len()],
            });
        }
        check_cond(&seq.cond, config)?;
        check_steps(&seq.steps, config)?;
        for (j, &c) in seq.cond.iter().enumerate() {
            tok.push(None);
            cemb.push(Some(c as usize));
            cpos.push(Some(j));
            for v in [&mut ar, &mut ac, &mut rr, &mut rc] {
                v.push(None);
            }
        }
        for s in &seq.steps {
            let ix = step_indices(s, config)?;
            tok.push(Some(ix.token));
            cemb.push(None);
            cpos.push(None);
            ar.push(Some(ix.abs.0));
            ac.push(Some(ix.abs.1));
            rr.push(Some(ix.rel.0));
            rc.push(Some(ix.rel.1));
        }
    }

    let params = param_leaves(tape, weights, mode == Mode::Train);
    let p = |i: usize| params[i];
    let t_tok = tape.gather(p(idx::TOK_EMB), tok)?;
    let t_ce = tape.gather(p(idx::COND_EMB), cemb)?;
    let t_cp = tape.gather(p(idx::COND_POS), cpos)?;
    let t_ar = tape.gather(p(idx::ABS_ROW), ar)?;
    let t_ac = tape.gather(p(idx::ABS_COL), ac)?;
    let t_rr = tape.gather(p(idx::REL_ROW), rr)?;
    let t_rc = tape.gather(p(idx::REL_COL), rc)?;
    let abs = tape.add(t_ar, t_ac)?;
    let rel = tape.add(t_rr, t_rc)?;
    let pos = tape.concat_cols(abs, rel)?;
    let mut x = tape.add(t_tok, t_ce)?;
    x = tape.add(x, t_cp)?;
    x = tape.add(x, pos)?;

    let training = mode == Mode::Train;
    let drop = config.dropout;
    for l in 0..config.depth {
        let lp = |w: usize| params[idx::layer(l, w)];
        let h = tape.layer_norm(x, lp(idx::LN1_G), lp(idx::LN1_B), LN_EPS)?;
        let q = tape.linear(h, lp(idx::WQ), Some(lp(idx::BQ)))?;
        let k = tape.linear(h, lp(idx::WK), Some(lp(idx::BK)))?;
        let v = tape.linear(h, lp(idx::WV), Some(lp(idx::BV)))?;
        let a = tape.causal_attention(q, k, v, config.heads, seq_len)?;
        let o = tape.linear(a, lp(idx::WO), Some(lp(idx::BO)))?;
        let o = tape.dropout(o, drop, stream, training)?;
        x = tape.add(x, o)?;
        let h = tape.layer_norm(x, lp(idx::LN2_G), lp(idx::LN2_B), LN_EPS)?;
        let f = tape.linear(h, lp(idx::FC1_W), Some(lp(idx::FC1_B)))?;
        let f = tape.gelu(f);
        let f = tape.linear(f, lp(idx::FC2_W), Some(lp(idx::FC2_B)))?;
        let f = tape.dropout(f, drop, stream, training)?;
        x = tape.add(x, f)?;
    }
    let fb = idx::final_base(config.depth);
    let h = tape.layer_norm(x, p(fb), p(fb + 1), LN_EPS)?;
    let logits = tape.linear(h, p(fb + 2), Some(p(fb + 3)))?;
    Ok(BatchForward {
        params,
        logits,
        seq_len,
    })
}

/// Logits `[(T_c + n) × V]` for one sequence in evaluation mode.
pub fn forward_sequence(cond: &[u32], steps: &[StepInput], weights: &TransformerWeights) -> Result<Tensor> {
    let mut tape = Tape::new();
    let seq = SeqInput {
        cond: cond.to_vec(),
        steps: steps.to_vec(),
    };
    let mut unused = SeededStream::new(0, 0);
    let out = forward_batch(&mut tape, weights, &[seq], Mode::Eval, &mut unused)?;
    Ok(tape.value(out.logits).clone())
}
