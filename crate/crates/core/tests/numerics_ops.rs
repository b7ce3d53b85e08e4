use ktforget::numerics::{finite_difference, relative_error, GroupMap, Mask, Tape, Tensor};
use ktforget::KtError;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn naive_matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut s = 0.0;
            for p in 0..k {
                s += a[i * k + p] * b[p * n + j];
            }
            c[i * n + j] = s;
        }
    }
    c
}

#[test]
fn matmul_identity_and_dot() {
    let mut tape = Tape::new();
    let i = tape.constant(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap());
    let b = tape.constant(Tensor::from_rows(&[vec![3.0, 4.0], vec![5.0, 6.0]]).unwrap());
    let c = tape.matmul(i, b).unwrap();
    assert_eq!(tape.value(c).data(), &[3.0, 4.0, 5.0, 6.0]);

    let r = tape.constant(Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap());
    let col = tape.constant(Tensor::from_rows(&[vec![3.0], vec![4.0]]).unwrap());
    let d = tape.matmul(r, col).unwrap();
    assert_eq!(tape.value(d).data(), &[11.0]);
}

#[test]
fn matmul_matches_triple_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let a = rand_tensor(&mut rng, &[4, 5]);
    let b = rand_tensor(&mut rng, &[5, 3]);
    let expect = naive_matmul(a.data(), b.data(), 4, 5, 3);
    let mut tape = Tape::new();
    let (va, vb) = (tape.constant(a), tape.constant(b));
    let c = tape.matmul(va, vb).unwrap();
    for (x, y) in tape.value(c).data().iter().zip(&expect) {
        assert!((x - y).abs() < 1e-12);
    }
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::zeros(vec![2, 3]));
    let b = tape.constant(Tensor::zeros(vec![2, 3]));
    let err = tape.matmul(a, b).unwrap_err();
    match err {
        KtError::Shape { lhs, rhs, .. } => {
            assert_eq!(lhs, vec![2, 3]);
            assert_eq!(rhs, vec![2, 3]);
        }
        other => panic!("unexpected {other:?}"),
    }
}

fn softmax_of(logits: &[f64], valid: &[bool]) -> Vec<f64> {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::new(vec![logits.len()], logits.to_vec()).unwrap());
    let mask = Mask::new(vec![valid.len()], valid.to_vec()).unwrap();
    let y = tape.masked_softmax(x, &mask).unwrap();
    tape.value(y).data().to_vec()
}

#[test]
fn masked_softmax_examples() {
    let u = softmax_of(&[0.0, 0.0, 0.0], &[true; 3]);
    for v in u {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }

    let m = softmax_of(&[5.0, 2.0, 9.0], &[true, true, false]);
    let e = (2.0f64 - 5.0).exp();
    assert!((m[0] - 1.0 / (1.0 + e)).abs() < 1e-15);
    assert!((m[1] - e / (1.0 + e)).abs() < 1e-15);
    assert_eq!(m[2], 0.0);

    let s = softmax_of(&[1.0, 2.0, 3.0], &[true; 3]);
    for (v, want) in s.iter().zip([0.09003057, 0.24472847, 0.66524096]) {
        assert!((v - want).abs() < 5e-9);
    }
}

#[test]
fn masked_softmax_rejects_empty_row() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::zeros(vec![2, 3]));
    let mask = Mask::new(vec![2, 3], vec![true, false, false, false, false, false]).unwrap();
    let err = tape.masked_softmax(x, &mask).unwrap_err();
    assert!(matches!(err, KtError::DegenerateRow { row: 1, .. }));
    let ok = tape.masked_softmax_allow_empty(x, &mask).unwrap();
    assert_eq!(&tape.value(ok).data()[3..], &[0.0, 0.0, 0.0]);
}

#[test]
fn sigmoid_examples() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::new(vec![4], vec![0.0, 50.0, 1.0, -50.0]).unwrap());
    let y = tape.sigmoid(x).unwrap();
    let d = tape.value(y).data();
    assert_eq!(d[0], 0.5);
    assert!((d[1] - 1.0).abs() < 1e-12);
    assert!((d[2] - 0.7310585786).abs() < 1e-10);
    assert!(d[3] > 0.0 && d[3] < 1e-12);
}

fn bce(pred: &[f64], labels: &[f64], valid: &[bool]) -> Result<f64, KtError> {
    let mut tape = Tape::new();
    let p = tape.constant(Tensor::new(vec![pred.len()], pred.to_vec()).unwrap());
    let l = tape.bce_loss(p, labels, valid)?;
    Ok(tape.value(l).item())
}

#[test]
fn bce_examples() {
    assert!((bce(&[0.5], &[1.0], &[true]).unwrap() - std::f64::consts::LN_2).abs() < 1e-12);
    assert!(bce(&[1.0, 0.0], &[1.0, 0.0], &[true, true]).unwrap() <= 1.1e-7);
    let want = -(0.9f64.ln() + 0.8f64.ln()) / 2.0;
    let got = bce(&[0.9, 0.2], &[1.0, 0.0], &[true, true]).unwrap();
    assert!((got - want).abs() < 1e-12);
    assert!((got - 0.164252).abs() < 1e-6);
    // masked entry ignored
    let masked = bce(&[0.9, 0.2, 0.01], &[1.0, 0.0, 1.0], &[true, true, false]).unwrap();
    assert_eq!(masked, got);
    assert!(matches!(
        bce(&[0.3], &[1.0], &[false]),
        Err(KtError::DegenerateBatch(_))
    ));
}

#[test]
fn backward_simple_sums() {
    let mut tape = Tape::new();
    let w = tape.leaf(Tensor::new(vec![2, 3], vec![0.1, -0.4, 2.0, 0.0, 1.0, 3.0]).unwrap());
    let s = tape.sum(w).unwrap();
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(w).unwrap(), &[1.0; 6]);

    let mut tape = Tape::new();
    let w = tape.leaf(Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap());
    let sq = tape.mul(w, w).unwrap();
    let s = tape.sum(sq).unwrap();
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(w).unwrap(), &[2.0, 4.0, 6.0]);
}

#[test]
fn backward_requires_scalar() {
    let mut tape = Tape::new();
    let w = tape.leaf(Tensor::zeros(vec![2]));
    assert!(matches!(tape.backward(w), Err(KtError::NonScalarLoss(_))));
}

/// Two-layer MLP with BCE loss; returns (loss, grads of all four params).
fn mlp_loss(params: &[Tensor], x: &Tensor, labels: &[f64]) -> (f64, Vec<Vec<f64>>) {
    let mut tape = Tape::new();
    let vars: Vec<_> = params.iter().map(|p| tape.leaf(p.clone())).collect();
    let xv = tape.constant(x.clone());
    let h = tape.matmul(xv, vars[0]).unwrap();
    let h = tape.add_bias(h, vars[1]).unwrap();
    let h = tape.relu(h).unwrap();
    let o = tape.matmul(h, vars[2]).unwrap();
    let o = tape.add_bias(o, vars[3]).unwrap();
    let p = tape.sigmoid(o).unwrap();
    let loss = tape.bce_loss(p, labels, &vec![true; labels.len()]).unwrap();
    tape.backward(loss).unwrap();
    let value = tape.value(loss).item();
    (value, vars.iter().map(|&v| tape.grad_or_zeros(v)).collect())
}

#[test]
fn mlp_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let shapes = [vec![4, 6], vec![6], vec![6, 1], vec![1]];
    let params: Vec<Tensor> = shapes.iter().map(|s| rand_tensor(&mut rng, s)).collect();
    let x = rand_tensor(&mut rng, &[5, 4]);
    let labels = [1.0, 0.0, 1.0, 1.0, 0.0];
    let (_, grads) = mlp_loss(&params, &x, &labels);
    for (pi, p) in params.iter().enumerate() {
        let coords: Vec<usize> = (0..p.numel()).collect();
        let fd = finite_difference(p.data(), 1e-5, &coords, |probe| {
            let mut ps = params.clone();
            ps[pi] = Tensor::new(p.shape().to_vec(), probe.to_vec()).unwrap();
            mlp_loss(&ps, &x, &labels).0
        });
        for (a, n) in grads[pi].iter().zip(&fd) {
            assert!(relative_error(*a, *n) < 1e-4, "param {pi}: {a} vs {n}");
        }
    }
}

/// Builds a scalar loss = Σ w ⊙ op(inputs) with fixed random weights, so each
/// op's backward rule is exercised against finite differences in isolation.
fn check_op<F>(inputs: Vec<Tensor>, op: F)
where
    F: Fn(&mut Tape, &[ktforget::numerics::Var]) -> ktforget::numerics::Var,
{
    let run = |ins: &[Tensor]| -> (f64, Vec<Vec<f64>>) {
        let mut tape = Tape::new();
        let vars: Vec<_> = ins.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = op(&mut tape, &vars);
        let n = tape.value(out).numel();
        let shape = tape.shape(out).to_vec();
        let w: Vec<f64> = (0..n).map(|i| ((i * 7 + 3) % 11) as f64 / 11.0 - 0.4).collect();
        let wv = tape.constant(Tensor::new(shape, w).unwrap());
        let prod = tape.mul(out, wv).unwrap();
        let loss = tape.sum(prod).unwrap();
        tape.backward(loss).unwrap();
        let value = tape.value(loss).item();
        (value, vars.iter().map(|&v| tape.grad_or_zeros(v)).collect())
    };
    let (_, grads) = run(&inputs);
    for (ii, inp) in inputs.iter().enumerate() {
        let coords: Vec<usize> = (0..inp.numel()).collect();
        let fd = finite_difference(inp.data(), 1e-5, &coords, |probe| {
            let mut ins = inputs.clone();
            ins[ii] = Tensor::new(inp.shape().to_vec(), probe.to_vec()).unwrap();
            run(&ins).0
        });
        for (c, (a, n)) in grads[ii].iter().zip(&fd).enumerate() {
            assert!(relative_error(*a, *n) < 1e-4, "input {ii} coord {c}: {a} vs {n}");
        }
    }
}

#[test]
fn per_op_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut r = |s: &[usize]| rand_tensor(&mut rng, s);

    check_op(vec![r(&[2, 3, 4]), r(&[2, 4, 5])], |t, v| {
        t.bmm(v[0], v[1], false, 0.7).unwrap()
    });
    check_op(vec![r(&[2, 3, 4]), r(&[2, 5, 4])], |t, v| {
        t.bmm(v[0], v[1], true, 1.3).unwrap()
    });
    check_op(vec![r(&[6, 4]), r(&[4]), r(&[4])], |t, v| {
        t.layer_norm(v[0], v[1], v[2], 1e-5).unwrap()
    });
    check_op(vec![r(&[5, 3])], |t, v| t.gather_rows(v[0], &[4, 0, 4, 2]).unwrap());
    check_op(vec![r(&[3, 2]), r(&[3, 4])], |t, v| t.concat_cols(v[0], v[1]).unwrap());
    check_op(vec![r(&[6, 4])], |t, v| {
        let x = t.reshape(v[0], &[2, 3, 4]).unwrap();
        t.cosine_sim(x).unwrap()
    });
    check_op(vec![r(&[6, 4])], |t, v| {
        let s = t.split_heads(v[0], 2, 3, 2).unwrap();
        let s = t.scale(s, 2.0).unwrap();
        let sq = t.mul(s, s).unwrap();
        t.merge_heads(sq, 2, 2).unwrap()
    });
    check_op(vec![r(&[4, 3, 3]), r(&[2, 3, 3])], |t, v| {
        t.add_grouped(v[0], v[1], GroupMap::Cycle).unwrap()
    });
    check_op(vec![r(&[4, 3, 3]), r(&[2, 3, 3])], |t, v| {
        t.add_grouped(v[0], v[1], GroupMap::Repeat).unwrap()
    });
    let mask = Mask::new(
        vec![2, 3, 3],
        vec![
            true, false, false, true, true, false, true, true, true, false, true, true, true, false, true, true, true,
            true,
        ],
    )
    .unwrap();
    check_op(vec![r(&[2, 3, 3])], |t, v| t.masked_softmax(v[0], &mask).unwrap());
    check_op(vec![r(&[2, 3, 4])], |t, v| t.cosine_sim(v[0]).unwrap());
    check_op(vec![r(&[2, 3, 3]), r(&[1])], |t, v| t.rc_recency(v[0], v[1]).unwrap());
    let dist: std::rc::Rc<[f64]> = (0..18).map(|i| (i % 5) as f64 * 0.3).collect::<Vec<_>>().into();
    check_op(vec![r(&[2, 3, 3]), r(&[2])], move |t, v| {
        t.mono_decay(v[0], v[1], dist.clone()).unwrap()
    });
}

#[test]
fn identical_inputs_bit_identical_outputs() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let a = rand_tensor(&mut rng, &[7, 9]);
        let b = rand_tensor(&mut rng, &[9, 4]);
        let mut tape = Tape::new();
        let (va, vb) = (tape.leaf(a), tape.leaf(b));
        let c = tape.matmul(va, vb).unwrap();
        let s = tape.sigmoid(c).unwrap();
        let l = tape.sum(s).unwrap();
        tape.backward(l).unwrap();
        let mut bits: Vec<u64> = tape.value(s).data().iter().map(|v| v.to_bits()).collect();
        bits.extend(tape.grad(va).unwrap().iter().map(|v| v.to_bits()));
        bits
    };
    assert_eq!(run(), run());
}

proptest! {
    #[test]
    fn softmax_rows_normalized_and_shift_invariant(
        logits in prop::collection::vec(-20.0f64..20.0, 1..12),
        valid_bits in prop::collection::vec(any::<bool>(), 12),
        shift in -50.0f64..50.0,
    ) {
        let n = logits.len();
        let mut valid = valid_bits[..n].to_vec();
        valid[0] = true;
        let y = softmax_of(&logits, &valid);
        let total: f64 = y.iter().zip(&valid).filter(|(_, &v)| v).map(|(y, _)| y).sum();
        prop_assert!((total - 1.0).abs() < 1e-12);
        for (yv, &ok) in y.iter().zip(&valid) {
            if !ok { prop_assert_eq!(*yv, 0.0); }
        }
        let shifted: Vec<f64> = logits.iter().map(|l| l + shift).collect();
        let ys = softmax_of(&shifted, &valid);
        for (a, b) in y.iter().zip(&ys) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }
}
