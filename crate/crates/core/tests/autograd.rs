use oar_core::autograd::*;
use oar_core::rng::Purpose;
use oar_core::rng::SeededStream;
use oar_core::tensor::Tensor;
use oar_core::Error;

fn rand_tensor(shape: &[usize], s: &mut SeededStream) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| s.normal()).collect()).unwrap()
}

/// Central-difference check of `build` with respect to every input.
fn check_grads(inputs: Vec<Tensor>, build: impl Fn(&mut Tape, &[Var]) -> Var) {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let out = build(&mut tape, &vars);
    tape.backward(out).unwrap();
    let eval = |ins: &[Tensor]| {
        let mut t = Tape::new();
        let vs: Vec<Var> = ins.iter().map(|x| t.leaf(x.clone(), false)).collect();
        let o = build(&mut t, &vs);
        t.value(o).item()
    };
    let h = 1e-5;
    for (vi, input) in inputs.iter().enumerate() {
        let analytic = tape
            .grad(vars[vi])
            .map(|g| g.to_vec())
            .unwrap_or_else(|| vec![0.0; input.len()]);
        for j in 0..input.len() {
            let mut plus = inputs.clone();
            plus[vi].data_mut()[j] += h;
            let mut minus = inputs.clone();
            minus[vi].data_mut()[j] -= h;
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let a = analytic[j];
            let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-6);
            assert!(rel < 1e-4, "input {vi} elem {j}: analytic {a} fd {fd}");
        }
    }
}

/// Reduces a tensor to a scalar with fixed random weights so every output
/// element contributes a distinct gradient.
fn project(tape: &mut Tape, x: Var, seed: u64) -> Var {
    let shape = tape.value(x).shape().to_vec();
    let mut s = SeededStream::keyed(seed, Purpose::Test, &[99]);
    let w = rand_tensor(&shape, &mut s);
    let w = tape.leaf(w, false);
    let m = tape.mul(x, w).unwrap();
    tape.sum(m)
}

#[test]
fn sum_gradient_is_ones() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap(), true);
    let s = tape.sum(x);
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[1.0, 1.0, 1.0]);
}

#[test]
fn sum_of_squares_gradient() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap(), true);
    let sq = tape.mul(x, x).unwrap();
    let s = tape.sum(sq);
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[2.0, 4.0, 6.0]);
}

#[test]
fn non_scalar_loss_rejected() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::zeros(&[2]), true);
    assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
}

#[test]
fn grad_linear() {
    let mut s = SeededStream::keyed(10, Purpose::Test, &[]);
    let ins = vec![
        rand_tensor(&[4, 3], &mut s),
        rand_tensor(&[3, 5], &mut s),
        rand_tensor(&[5], &mut s),
    ];
    check_grads(ins, |t, v| {
        let y = t.linear(v[0], v[1], Some(v[2])).unwrap();
        project(t, y, 1)
    });
}

#[test]
fn grad_matmul() {
    let mut s = SeededStream::keyed(11, Purpose::Test, &[]);
    let ins = vec![rand_tensor(&[3, 4], &mut s), rand_tensor(&[4, 2], &mut s)];
    check_grads(ins, |t, v| {
        let y = t.matmul(v[0], v[1]).unwrap();
        project(t, y, 2)
    });
}

#[test]
fn grad_elementwise() {
    let mut s = SeededStream::keyed(12, Purpose::Test, &[]);
    let ins = vec![rand_tensor(&[2, 5], &mut s), rand_tensor(&[2, 5], &mut s)];
    check_grads(ins, |t, v| {
        let a = t.add(v[0], v[1]).unwrap();
        let m = t.mul(a, v[1]).unwrap();
        let g = t.gelu(m);
        let sc = t.scale(g, 0.7);
        project(t, sc, 3)
    });
}

#[test]
fn grad_layer_norm() {
    let mut s = SeededStream::keyed(13, Purpose::Test, &[]);
    let ins = vec![
        rand_tensor(&[3, 6], &mut s),
        rand_tensor(&[6], &mut s),
        rand_tensor(&[6], &mut s),
    ];
    check_grads(ins, |t, v| {
        let y = t.layer_norm(v[0], v[1], v[2], 1e-5).unwrap();
        project(t, y, 4)
    });
}

#[test]
fn grad_softmax() {
    let mut s = SeededStream::keyed(14, Purpose::Test, &[]);
    let ins = vec![rand_tensor(&[3, 5], &mut s)];
    check_grads(ins, |t, v| {
        let y = t.softmax(v[0]);
        project(t, y, 5)
    });
}

#[test]
fn grad_gather_concat() {
    let mut s = SeededStream::keyed(15, Purpose::Test, &[]);
    let ins = vec![rand_tensor(&[4, 3], &mut s), rand_tensor(&[5, 2], &mut s)];
    check_grads(ins, |t, v| {
        let a = t.gather(v[0], vec![Some(1), None, Some(1), Some(3)]).unwrap();
        let b = t.gather(v[1], vec![Some(0), Some(4), None, Some(2)]).unwrap();
        let c = t.concat_cols(a, b).unwrap();
        project(t, c, 6)
    });
}

#[test]
fn grad_attention() {
    let mut s = SeededStream::keyed(16, Purpose::Test, &[]);
    let ins = vec![
        rand_tensor(&[6, 4], &mut s),
        rand_tensor(&[6, 4], &mut s),
        rand_tensor(&[6, 4], &mut s),
    ];
    check_grads(ins, |t, v| {
        let y = t.causal_attention(v[0], v[1], v[2], 2, 3).unwrap();
        project(t, y, 7)
    });
}

#[test]
fn grad_cross_entropy() {
    let mut s = SeededStream::keyed(17, Purpose::Test, &[]);
    let ins = vec![rand_tensor(&[4, 5], &mut s)];
    check_grads(ins, |t, v| {
        t.cross_entropy(v[0], vec![Some(1), None, Some(4), Some(0)], vec![7.0, 1.0, 1.0, 2.5])
            .unwrap()
    });
}

#[test]
fn grad_dropout_fixed_mask() {
    let mut s = SeededStream::keyed(18, Purpose::Test, &[]);
    let ins = vec![rand_tensor(&[3, 4], &mut s)];
    check_grads(ins, |t, v| {
        let mut st = SeededStream::keyed(5, Purpose::Dropout, &[]);
        let y = t.dropout(v[0], 0.3, &mut st, true).unwrap();
        project(t, y, 8)
    });
}

#[test]
fn cross_entropy_uniform_is_ln_v() {
    let logits = Tensor::zeros(&[3, 64]);
    let l = cross_entropy_logits(&logits, &[0, 5, 63], &[1.0; 3]).unwrap();
    assert!((l - 64f64.ln()).abs() < 1e-12);
}

#[test]
fn cross_entropy_confident_is_near_zero() {
    let mut logits = Tensor::zeros(&[1, 64]);
    logits.data_mut()[9] = 30.0;
    let l = cross_entropy_logits(&logits, &[9], &[1.0]).unwrap();
    assert!(l < 1e-9 && l >= 0.0);
}

#[test]
fn cross_entropy_weighted_mean() {
    let logits = Tensor::from_rows(&[&[0.3, -1.0, 2.0], &[1.5, 0.2, -0.4]]).unwrap();
    let l0 = cross_entropy_logits(&Tensor::from_rows(&[logits.row(0)]).unwrap(), &[2], &[1.0]).unwrap();
    let l1 = cross_entropy_logits(&Tensor::from_rows(&[logits.row(1)]).unwrap(), &[0], &[1.0]).unwrap();
    let w = cross_entropy_logits(&logits, &[2, 0], &[7.0, 1.0]).unwrap();
    assert!((w - (7.0 * l0 + l1) / 8.0).abs() < 1e-14);
}

#[test]
fn cross_entropy_target_out_of_range() {
    let logits = Tensor::zeros(&[1, 4]);
    assert!(matches!(
        cross_entropy_logits(&logits, &[4], &[1.0]),
        Err(Error::Index { .. })
    ));
}

#[test]
fn dropout_semantics() {
    let mut s = SeededStream::keyed(1, Purpose::Dropout, &[]);
    let x = Tensor::full(&[10], 2.0);
    assert_eq!(dropout(&x, 0.0, &mut s, true).unwrap(), x);
    assert_eq!(dropout(&x, 0.2, &mut s, false).unwrap(), x);
    assert!(matches!(dropout(&x, 1.0, &mut s, true), Err(Error::Parameter(_))));
    assert!(matches!(dropout(&x, -0.1, &mut s, true), Err(Error::Parameter(_))));
}

#[test]
fn dropout_rate_monte_carlo() {
    let mut s = SeededStream::keyed(2, Purpose::Dropout, &[]);
    let x = Tensor::full(&[1_000_000], 1.0);
    let y = dropout(&x, 0.2, &mut s, true).unwrap();
    let dropped = y.data().iter().filter(|v| **v == 0.0).count() as f64 / 1e6;
    assert!((dropped - 0.2).abs() < 0.002, "{dropped}");
    let kept = y.data().iter().find(|v| **v != 0.0).unwrap();
    assert!((kept - 1.25).abs() < 1e-15);
}
