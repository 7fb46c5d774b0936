use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Array {
    let data = (0..rows * cols).map(|_| rng.random_range(-scale..scale)).collect();
    Array::matrix(rows, cols, data).unwrap()
}

/// Central differences of a scalar-valued graph with respect to its input.
fn fd_grad(build: &dyn Fn(&mut Tape, NodeId) -> NodeId, x: &Array, h: f64) -> Array {
    let eval = |x: &Array| {
        let mut tape = Tape::new();
        let id = tape.leaf(x.clone(), false);
        let out = build(&mut tape, id);
        tape.value(out).item().unwrap()
    };
    let mut g = x.zeros_like();
    for i in 0..x.numel() {
        let mut plus = x.clone();
        plus.data_mut()[i] += h;
        let mut minus = x.clone();
        minus.data_mut()[i] -= h;
        g.data_mut()[i] = (eval(&plus) - eval(&minus)) / (2.0 * h);
    }
    g
}

fn analytic_grad(build: &dyn Fn(&mut Tape, NodeId) -> NodeId, x: &Array) -> Array {
    let mut tape = Tape::new();
    let id = tape.leaf(x.clone(), true);
    let out = build(&mut tape, id);
    tape.backward(out).unwrap();
    tape.grad(id).clone()
}

fn assert_close(analytic: &Array, numeric: &Array) {
    for (a, n) in analytic.data().iter().zip(numeric.data()) {
        let err = (a - n).abs();
        let rel = err / a.abs().max(n.abs());
        assert!(err < 1e-7 || rel < 1e-4, "analytic {a} vs numeric {n}");
    }
}

#[test]
fn matmul_identity_and_selector() {
    let mut tape = Tape::new();
    let i2 = tape.constant(Array::identity(2));
    let m = tape.constant(Array::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap());
    let out = tape.matmul(i2, m).unwrap();
    assert_eq!(tape.value(out).data(), &[1.0, 2.0, 3.0, 4.0]);

    let sel = tape.constant(Array::from_rows(&[vec![1.0, 0.0]]).unwrap());
    let col = tape.constant(Array::from_rows(&[vec![2.0], vec![5.0]]).unwrap());
    let out = tape.matmul(sel, col).unwrap();
    assert_eq!(tape.value(out).data(), &[2.0]);
}

#[test]
fn matmul_shape_mismatch() {
    let mut tape = Tape::new();
    let a = tape.constant(Array::zeros(&[2, 3]));
    let b = tape.constant(Array::zeros(&[2, 3]));
    assert!(matches!(tape.matmul(a, b), Err(crate::Error::Dimension(_))));
}

#[test]
fn matmul_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let b = random(&mut rng, 4, 2, 1.0);
    let build = move |t: &mut Tape, x: NodeId| {
        let b = t.constant(b.clone());
        let y = t.matmul(x, b).unwrap();
        t.sum(y, Axis::All)
    };
    let a = random(&mut rng, 3, 4, 1.0);
    assert_close(&analytic_grad(&build, &a), &fd_grad(&build, &a, 1e-5));
}

#[test]
fn unary_values() {
    let mut tape = Tape::new();
    let z = tape.constant(Array::scalar(0.0));
    let one = tape.constant(Array::scalar(1.0));
    let t = tape.tanh(z);
    let l = tape.log(one);
    assert_eq!(tape.value(t).item().unwrap(), 0.0);
    assert!(tape.value(l).item().unwrap().abs() < 1e-11);
}

#[test]
fn elementwise_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let other = random(&mut rng, 3, 3, 2.0);
    let ops: Vec<Box<dyn Fn(&mut Tape, NodeId) -> NodeId>> = vec![
        Box::new(|t, x| {
            let y = t.abs(x);
            t.sum(y, Axis::All)
        }),
        Box::new(|t, x| {
            let y = t.tanh(x);
            t.sum(y, Axis::All)
        }),
        Box::new(|t, x| {
            let y = t.exp(x);
            t.mean(y, Axis::All)
        }),
        Box::new(|t, x| {
            let e = t.exp(x);
            let y = t.log(e);
            t.sum(y, Axis::All)
        }),
        Box::new(move |t, x| {
            let o = t.constant(other.clone());
            let y = t.mul(x, o).unwrap();
            let y = t.sub(y, x).unwrap();
            let y = t.scale(y, 0.5);
            let y = t.neg(y);
            let y = t.mul(y, y).unwrap();
            t.sum(y, Axis::All)
        }),
    ];
    for op in &ops {
        // abs is only checked away from its kink
        let x = random(&mut rng, 3, 3, 3.0).map(|v| if v.abs() < 0.1 { v + 0.5 } else { v });
        assert_close(&analytic_grad(op.as_ref(), &x), &fd_grad(op.as_ref(), &x, 1e-5));
    }
}

#[test]
fn abs_subgradient_at_zero_is_zero() {
    let mut tape = Tape::new();
    let x = tape.leaf(Array::scalar(0.0), true);
    let y = tape.abs(x);
    tape.backward(y).unwrap();
    assert_eq!(tape.grad(x).data(), &[0.0]);
}

#[test]
fn scalar_broadcast_and_rejection() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let m = random(&mut rng, 2, 3, 1.0);
    let build = move |t: &mut Tape, s: NodeId| {
        let m = t.constant(m.clone());
        let y = t.mul(m, s).unwrap();
        let y = t.add(s, y).unwrap();
        let y = t.tanh(y);
        t.sum(y, Axis::All)
    };
    let s = Array::scalar(0.7);
    assert_close(&analytic_grad(&build, &s), &fd_grad(&build, &s, 1e-5));

    let mut tape = Tape::new();
    let a = tape.constant(Array::zeros(&[2, 3]));
    let b = tape.constant(Array::zeros(&[3, 2]));
    assert!(tape.add(a, b).is_err());
}

#[test]
fn softmax_uniform_and_stable() {
    let mut tape = Tape::new();
    let x = tape.constant(Array::from_rows(&[vec![0.0, 0.0, 0.0]]).unwrap());
    let y = tape.softmax(x, Axis::Cols).unwrap();
    for &v in tape.value(y).data() {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }
    let x = tape.constant(Array::from_rows(&[vec![1000.0, 0.0]]).unwrap());
    let y = tape.softmax(x, Axis::Cols).unwrap();
    let v = tape.value(y);
    assert!(v.is_finite());
    assert!((v.data()[0] - 1.0).abs() < 1e-12 && v.data()[1] < 1e-300);
}

#[test]
fn softmax_jvp_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..5 {
        let w = random(&mut rng, 1, 5, 1.0);
        let build = move |t: &mut Tape, x: NodeId| {
            let w = t.constant(w.clone());
            let p = t.softmax(x, Axis::Cols).unwrap();
            let y = t.mul(p, w).unwrap();
            t.sum(y, Axis::All)
        };
        let x = random(&mut rng, 1, 5, 3.0);
        assert_close(&analytic_grad(&build, &x), &fd_grad(&build, &x, 1e-5));
    }
    // column-wise softmax on a matrix
    let w = random(&mut rng, 4, 3, 1.0);
    let build = move |t: &mut Tape, x: NodeId| {
        let w = t.constant(w.clone());
        let p = t.softmax(x, Axis::Rows).unwrap();
        let y = t.mul(p, w).unwrap();
        t.sum(y, Axis::All)
    };
    let x = random(&mut rng, 4, 3, 3.0);
    assert_close(&analytic_grad(&build, &x), &fd_grad(&build, &x, 1e-5));
}

#[test]
fn reductions() {
    let mut tape = Tape::new();
    let x = tape.constant(Array::vector(vec![2.0, 4.0]).unwrap());
    let m = tape.mean(x, Axis::All);
    assert_eq!(tape.value(m).item().unwrap(), 3.0);
    let o = tape.constant(Array::ones(&[3, 3]));
    let s = tape.sum(o, Axis::All);
    assert_eq!(tape.value(s).item().unwrap(), 9.0);
    let r = tape.sum(o, Axis::Rows);
    assert_eq!(tape.value(r).shape(), &[1, 3]);
    let c = tape.mean(o, Axis::Cols);
    assert_eq!(tape.value(c).shape(), &[3, 1]);
}

#[test]
fn reduction_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let w1 = random(&mut rng, 1, 4, 1.0);
    let w2 = random(&mut rng, 3, 1, 1.0);
    let build = move |t: &mut Tape, x: NodeId| {
        let a = t.mean(x, Axis::Rows);
        let w1 = t.constant(w1.clone());
        let a = t.mul(a, w1).unwrap();
        let a = t.sum(a, Axis::All);
        let b = t.sum(x, Axis::Cols);
        let b = t.tanh(b);
        let w2 = t.constant(w2.clone());
        let b = t.mul(b, w2).unwrap();
        let b = t.mean(b, Axis::All);
        t.add(a, b).unwrap()
    };
    let x = random(&mut rng, 3, 4, 2.0);
    assert_close(&analytic_grad(&build, &x), &fd_grad(&build, &x, 1e-5));
}

#[test]
fn concat_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let other = random(&mut rng, 2, 2, 1.0);
    let w = random(&mut rng, 5, 1, 1.0);
    let build = move |t: &mut Tape, x: NodeId| {
        let o = t.constant(other.clone());
        let c = t.concat_cols(&[x, o]).unwrap();
        let w = t.constant(w.clone());
        let y = t.matmul(c, w).unwrap();
        let y = t.tanh(y);
        t.sum(y, Axis::All)
    };
    let x = random(&mut rng, 2, 3, 1.0);
    assert_close(&analytic_grad(&build, &x), &fd_grad(&build, &x, 1e-5));
}

#[test]
fn detach_blocks_gradient() {
    let mut tape = Tape::new();
    let x = tape.leaf(Array::scalar(3.0), true);
    let d = tape.detach(x);
    assert_eq!(tape.value(d), tape.value(x));
    let y = tape.mul(d, x).unwrap();
    tape.backward(y).unwrap();
    assert_eq!(tape.grad(x).item().unwrap(), 3.0);

    let mut tape = Tape::new();
    let x = tape.leaf(Array::scalar(3.0), true);
    let y = tape.mul(x, x).unwrap();
    tape.backward(y).unwrap();
    assert_eq!(tape.grad(x).item().unwrap(), 6.0);
}

#[test]
fn backward_requires_scalar() {
    let mut tape = Tape::new();
    let x = tape.leaf(Array::zeros(&[2, 2]), true);
    assert!(matches!(tape.backward(x), Err(crate::Error::Contract(_))));
}

#[test]
fn backward_twice_doubles() {
    let mut rng = ChaCha8Rng::seed_from_u64(19);
    let mut tape = Tape::new();
    let x = tape.leaf(random(&mut rng, 2, 3, 1.0), true);
    let p = tape.softmax(x, Axis::Cols).unwrap();
    let l = tape.log(p);
    let y = tape.mul(p, l).unwrap();
    let loss = tape.sum(y, Axis::All);
    tape.backward(loss).unwrap();
    let once = tape.grad(x).clone();
    tape.backward(loss).unwrap();
    for (a, b) in once.data().iter().zip(tape.grad(x).data()) {
        assert_eq!(2.0 * a, *b);
    }
    tape.zero_grad();
    assert!(tape.grad(x).data().iter().all(|&v| v == 0.0));
}

mod props {
    use proptest::prelude::*;

    use super::super::*;

    proptest! {
        #[test]
        fn softmax_rows_sum_to_one(row in proptest::collection::vec(-500.0f64..500.0, 1..12)) {
            let mut tape = Tape::new();
            let x = tape.constant(Array::vector(row).unwrap());
            let p = tape.softmax(x, Axis::Cols).unwrap();
            let s: f64 = tape.value(p).data().iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-9);
        }
    }
}
