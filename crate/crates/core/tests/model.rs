use oar_core::autograd::Tape;
use oar_core::grid::{GridShape, Order};
use oar_core::model::{
    forward_batch, forward_sequence, row_targets, Decoder, KvCacheSecondary, Mode, ModelConfig, SeqInput, StepInput,
    TransformerWeights,
};
use oar_core::rng::{Purpose, SeededStream};
use oar_core::Error;

fn cfg() -> ModelConfig {
    ModelConfig {
        grid: GridShape { rows: 3, cols: 4 },
        vocab: 9,
        cond_vocab: 5,
        cond_len: 2,
        dim: 8,
        depth: 2,
        heads: 2,
        head_dim: 4,
        dropout: 0.0,
        img_loss_weight: 7.0,
    }
}

/// Weights with a non-zero head so logits carry information.
fn weights(seed: u64) -> TransformerWeights {
    let c = cfg();
    let mut w = TransformerWeights::init(&c, seed).unwrap();
    let mut s = SeededStream::keyed(seed, Purpose::Test, &[1]);
    for p in &mut w.params {
        for v in p.data_mut() {
            *v += 0.1 * s.normal();
        }
    }
    w
}

fn sample(seed: u64) -> (Vec<u32>, Vec<u32>, Order) {
    let c = cfg();
    let mut s = SeededStream::keyed(seed, Purpose::Test, &[2]);
    let cond = (0..c.cond_len).map(|_| s.below(c.cond_vocab) as u32).collect();
    let tokens = (0..c.cells()).map(|_| s.below(c.vocab) as u32).collect();
    let order = oar_core::grid::sample_uniform_order(c.cells(), &mut s);
    (cond, tokens, order)
}

#[test]
fn single_image_token_shape() {
    let w = weights(1);
    let steps = [StepInput::start(0), StepInput::code(3, 0, 1)];
    let logits = forward_sequence(&[1, 2], &steps, &w).unwrap();
    assert_eq!(logits.shape(), &[cfg().cond_len + 2, cfg().vocab]);
}

#[test]
fn causality_is_bitwise() {
    let w = weights(2);
    let (cond, tokens, order) = sample(3);
    let seq = SeqInput::for_order(&cond, &tokens, &order).unwrap();
    let base = forward_sequence(&seq.cond, &seq.steps, &w).unwrap();
    let v = cfg().vocab;
    for j in 0..seq.steps.len() {
        let mut steps = seq.steps.clone();
        if let oar_core::model::StepToken::Code(t) = steps[j].token {
            steps[j].token = oar_core::model::StepToken::Code((t + 1) % v as u32);
        } else {
            continue;
        }
        let changed = forward_sequence(&seq.cond, &steps, &w).unwrap();
        let row = cfg().cond_len + j;
        assert_eq!(base.data()[..row * v], changed.data()[..row * v]);
        assert_ne!(base.row(row), changed.row(row));
    }
}

#[test]
fn incremental_matches_teacher_forced_bitwise() {
    let w = weights(4);
    let (cond, tokens, order) = sample(5);
    let seq = SeqInput::for_order(&cond, &tokens, &order).unwrap();
    let full = forward_sequence(&seq.cond, &seq.steps, &w).unwrap();
    let mut dec = Decoder::new(&w);
    let cl = dec.prefill_condition(&cond).unwrap();
    for j in 0..cond.len() {
        assert_eq!(cl.row(j), full.row(j));
    }
    for (i, s) in seq.steps.iter().enumerate() {
        let (logits, kv) = dec.forward_incremental(*s).unwrap();
        assert_eq!(logits, full.row(cond.len() + i));
        assert_eq!(kv.len(), cfg().depth);
    }
    assert_eq!(dec.primary.len(), seq.len());
}

#[test]
fn candidates_match_committed_rows() {
    let w = weights(6);
    let (cond, tokens, order) = sample(7);
    let seq = SeqInput::for_order(&cond, &tokens, &order).unwrap();
    let full = forward_sequence(&seq.cond, &seq.steps, &w).unwrap();
    let mut dec = Decoder::new(&w);
    dec.prefill_condition(&cond).unwrap();
    let mut sec = KvCacheSecondary::new();
    let o = order.as_slice();
    for i in 0..seq.steps.len() {
        let filled: Vec<usize> = o[..i].to_vec();
        let cands: Vec<StepInput> = (0..cfg().cells())
            .filter(|c| !filled.contains(c))
            .map(|c| StepInput {
                next: c,
                ..seq.steps[i]
            })
            .collect();
        let logits = dec.eval_candidates(&cands, &mut sec).unwrap();
        let k = cands.iter().position(|s| s.next == o[i]).unwrap();
        assert_eq!(logits.row(k), full.row(cond.len() + i));
        // One candidate alone gives the same row as in the batch.
        let mut lone = KvCacheSecondary::new();
        let single = dec.eval_candidates(&cands[k..k + 1], &mut lone).unwrap();
        assert_eq!(single.row(0), logits.row(k));
        assert_eq!(lone.row(o[i], 8), sec.row(o[i], 8));
        dec.promote(&mut sec, o[i]).unwrap();
        assert!(!sec.is_live());
        assert!(matches!(dec.promote(&mut sec, o[i]), Err(Error::State(_))));
    }
}

#[test]
fn different_next_positions_share_cached_rows() {
    let w = weights(8);
    let mut dec = Decoder::new(&w);
    dec.prefill_condition(&[0, 1]).unwrap();
    dec.extend(&[StepInput::start(5)]).unwrap();
    let before = dec.primary.clone();
    let mut sec = KvCacheSecondary::new();
    let l = dec
        .eval_candidates(&[StepInput::code(2, 5, 0), StepInput::code(2, 5, 11)], &mut sec)
        .unwrap();
    assert_ne!(l.row(0), l.row(1));
    assert_eq!(dec.primary, before);
}

#[test]
fn duplicate_positions_are_order_errors() {
    let w = weights(9);
    let steps = [StepInput::start(1), StepInput::code(0, 1, 1)];
    assert!(matches!(forward_sequence(&[0, 0], &steps, &w), Err(Error::Order(_))));
    let mut dec = Decoder::new(&w);
    dec.prefill_condition(&[0, 0]).unwrap();
    dec.extend(&[StepInput::start(1)]).unwrap();
    let mut sec = KvCacheSecondary::new();
    assert!(dec.eval_candidates(&[StepInput::code(0, 1, 1)], &mut sec).is_err());
}

#[test]
fn untrained_loss_is_log_vocab() {
    let c = cfg();
    let w = TransformerWeights::init(&c, 10).unwrap();
    let (cond, tokens, order) = sample(11);
    let seq = SeqInput::for_order(&cond, &tokens, &order).unwrap();
    let mut tape = Tape::new();
    let mut s = SeededStream::new(0, 0);
    let out = forward_batch(&mut tape, &w, &[seq.clone()], Mode::Eval, &mut s).unwrap();
    let (t, wt) = row_targets(&seq, &tokens, c.img_loss_weight, true);
    let loss = tape.cross_entropy(out.logits, t, wt).unwrap();
    assert!((tape.value(loss).item() - (c.vocab as f64).ln()).abs() < 1e-12);
}

fn loss_of(w: &TransformerWeights, batch: &[SeqInput], tokens: &[Vec<u32>]) -> f64 {
    let mut tape = Tape::new();
    let mut s = SeededStream::new(0, 0);
    let out = forward_batch(&mut tape, w, batch, Mode::Eval, &mut s).unwrap();
    let (mut t, mut wt) = (Vec::new(), Vec::new());
    for (seq, tok) in batch.iter().zip(tokens) {
        let (a, b) = row_targets(seq, tok, 7.0, true);
        t.extend(a);
        wt.extend(b);
    }
    let l = tape.cross_entropy(out.logits, t, wt).unwrap();
    tape.value(l).item()
}

#[test]
fn full_model_gradients_match_finite_differences() {
    let w = weights(12);
    let (c1, t1, o1) = sample(13);
    let (c2, t2, o2) = sample(14);
    let batch = vec![
        SeqInput::for_order(&c1, &t1, &o1).unwrap(),
        SeqInput::for_order(&c2, &t2, &o2).unwrap(),
    ];
    let toks = vec![t1, t2];
    let mut tape = Tape::new();
    let mut s = SeededStream::new(0, 0);
    let mut train_w = w.clone();
    train_w.config.dropout = 0.0;
    let out = forward_batch(&mut tape, &train_w, &batch, Mode::Train, &mut s).unwrap();
    let (mut t, mut wt) = (Vec::new(), Vec::new());
    for (seq, tok) in batch.iter().zip(&toks) {
        let (a, b) = row_targets(seq, tok, 7.0, true);
        t.extend(a);
        wt.extend(b);
    }
    let loss = tape.cross_entropy(out.logits, t, wt).unwrap();
    tape.backward(loss).unwrap();

    let mut pick = SeededStream::keyed(15, Purpose::Test, &[]);
    let mut checked = 0;
    while checked < 20 {
        let p = pick.below(w.params.len());
        let Some(g) = tape.grad(out.params[p]) else { continue };
        let j = pick.below(w.params[p].len());
        let h = 1e-5;
        let mut plus = w.clone();
        plus.params[p].data_mut()[j] += h;
        let mut minus = w.clone();
        minus.params[p].data_mut()[j] -= h;
        let fd = (loss_of(&plus, &batch, &toks) - loss_of(&minus, &batch, &toks)) / (2.0 * h);
        let an = g[j];
        let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6);
        assert!(rel < 1e-4, "param {p}[{j}]: analytic {an}, numeric {fd}");
        checked += 1;
    }
}

#[test]
fn absolute_and_relative_tables_both_matter() {
    let w = weights(16);
    let (cond, tokens, order) = sample(17);
    let seq = SeqInput::for_order(&cond, &tokens, &order).unwrap();
    let base = forward_sequence(&seq.cond, &seq.steps, &w).unwrap();
    let zeroed = |ids: &[usize]| {
        let mut z = w.clone();
        for &i in ids {
            z.params[i].data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        forward_sequence(&seq.cond, &seq.steps, &z).unwrap()
    };
    use oar_core::model::idx;
    let no_abs = zeroed(&[idx::ABS_ROW, idx::ABS_COL]);
    let no_rel = zeroed(&[idx::REL_ROW, idx::REL_COL]);
    assert_ne!(base, no_abs);
    assert_ne!(base, no_rel);
    assert_ne!(no_abs, no_rel);
    // Zeroing the relative tables leaves the absolute tables untouched.
    let mut z = w.clone();
    z.params[idx::REL_ROW].data_mut().iter_mut().for_each(|v| *v = 0.0);
    assert_eq!(z.params[idx::ABS_ROW], w.params[idx::ABS_ROW]);
}
