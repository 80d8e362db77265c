use oar_core::grid::{GridShape, Position};
use oar_core::model::*;
use oar_core::tensor::Tensor;
use oar_core::Error;

fn cfg(rows: usize, cols: usize) -> ModelConfig {
    ModelConfig {
        grid: GridShape { rows, cols },
        vocab: 6,
        cond_vocab: 3,
        cond_len: 1,
        dim: 8,
        depth: 1,
        heads: 2,
        head_dim: 4,
        dropout: 0.0,
        img_loss_weight: 7.0,
    }
}

#[test]
fn relative_index_examples() {
    let g = GridShape::new(16, 16).unwrap();
    let (_, c) = relative_index(Some(Position::new(3, 5)), Position::new(3, 6), g).unwrap();
    assert_eq!(c, 17);
    let p = Position::new(4, 9);
    assert_eq!(relative_index(Some(p), p, g).unwrap(), (16, 16));
    assert_eq!(
        relative_index(Some(Position::new(0, 0)), Position::new(15, 15), g).unwrap(),
        (31, 31)
    );
    assert_eq!(relative_index(None, Position::new(2, 2), g).unwrap(), (0, 0));
    assert!(relative_index(None, Position::new(16, 0), g).is_err());
}

#[test]
fn relative_index_never_hits_start_row() {
    let g = GridShape::new(3, 5).unwrap();
    for a in 0..15 {
        for b in 0..15 {
            let (r, c) = relative_index(Some(g.position(a).unwrap()), g.position(b).unwrap(), g).unwrap();
            assert!((1..6).contains(&r) && (1..10).contains(&c));
        }
    }
}

#[test]
fn zero_tables_give_zero_embedding() {
    let w = TransformerWeights::zeros(&cfg(2, 2)).unwrap();
    let e = embed_step(&StepInput::code(3, 0, 1), &w).unwrap();
    assert!(e.iter().all(|v| *v == 0.0));
}

fn distinct_weights() -> TransformerWeights {
    let c = cfg(2, 2);
    let mut w = TransformerWeights::zeros(&c).unwrap();
    let mut k = 0.0;
    for i in [idx::TOK_EMB, idx::ABS_ROW, idx::ABS_COL, idx::REL_ROW, idx::REL_COL] {
        let t = w.param_mut(i);
        let n = t.len();
        let shape = t.shape().to_vec();
        *t = Tensor::new(shape, (0..n).map(|j| k + j as f64 * 0.125).collect()).unwrap();
        k += 100.0;
    }
    w
}

#[test]
fn next_position_only_touches_second_half() {
    let w = distinct_weights();
    let a = embed_step(&StepInput::code(2, 0, 1), &w).unwrap();
    let b = embed_step(&StepInput::code(2, 0, 3), &w).unwrap();
    assert_eq!(a[..4], b[..4]);
    assert_ne!(a[4..], b[4..]);
}

#[test]
fn embedding_matches_hand_assembly() {
    let w = distinct_weights();
    let c = &w.config;
    // current (1,0) = cell 2, next (0,1) = cell 1
    let e = embed_step(&StepInput::code(4, 2, 1), &w).unwrap();
    let t = w.position_tables();
    let tok = w.param(idx::TOK_EMB).row(4);
    let abs: Vec<f64> = (0..4).map(|j| t.abs_row.row(1)[j] + t.abs_col.row(0)[j]).collect();
    let (ri, ci) = (c.grid.rows + 0 - 1, c.grid.cols + 1 - 0);
    let rel: Vec<f64> = (0..4).map(|j| t.rel_row.row(ri)[j] + t.rel_col.row(ci)[j]).collect();
    let expect: Vec<f64> = abs.iter().chain(&rel).zip(tok).map(|(p, t)| p + t).collect();
    assert_eq!(e, expect);
}

#[test]
fn start_step_uses_start_rows() {
    let w = distinct_weights();
    let e = embed_step(&StepInput::start(3), &w).unwrap();
    let t = w.position_tables();
    let tok = w.param(idx::TOK_EMB).row(w.config.start_token());
    for j in 0..4 {
        assert_eq!(e[4 + j], tok[4 + j] + (t.rel_row.row(0)[j] + t.rel_col.row(0)[j]));
        assert_eq!(e[j], tok[j] + (t.abs_row.row(1)[j] + t.abs_col.row(1)[j]));
    }
}

#[test]
fn off_grid_next_is_position_error() {
    let w = distinct_weights();
    assert!(matches!(
        embed_step(&StepInput::code(1, 0, 4), &w),
        Err(Error::Position { .. })
    ));
}
