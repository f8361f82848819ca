use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::gradcheck::{central_differences, max_relative_error, FD_STEP};
use super::*;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Checks `f` (which builds a scalar from leaves) against central differences.
fn check(inputs: &[Tensor], f: impl Fn(&mut Tape, &[Var]) -> Var) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let root = f(&mut tape, &vars);
    let grads = tape.backward(root).unwrap();
    let numeric = central_differences(inputs, FD_STEP, |xs| {
        let mut t = Tape::new();
        let vs: Vec<Var> = xs.iter().map(|x| t.leaf(x.clone())).collect();
        let r = f(&mut t, &vs);
        t.value(r).item()
    });
    vars.iter()
        .zip(&numeric)
        .map(|(&v, n)| max_relative_error(grads.tensor(v).data(), n.data(), 1e-6))
        .fold(0.0, f64::max)
}

/// Weighted sum with fixed pseudo-random coefficients, so every output entry
/// contributes a distinct amount to the scalar under test.
fn project(tape: &mut Tape, x: Var) -> Var {
    let shape = tape.shape(x).to_vec();
    let w = Tensor::from_fn(&shape, |i| ((i * 7919 % 97) as f64 / 97.0) - 0.3);
    let w = tape.leaf(w);
    let prod = tape.mul(x, w).unwrap();
    tape.sum_all(prod)
}

#[test]
fn conv_zero_input_gives_zero_output() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::zeros(&[1, 3, 3]));
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let k = tape.leaf(random(&[2, 1, 3, 3], &mut rng));
    let y = tape.conv2d(x, k, 1, 1).unwrap();
    assert_eq!(tape.shape(y), &[2, 3, 3]);
    assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
}

#[test]
fn conv_unit_kernel_scales_input() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let input = random(&[1, 4, 5], &mut rng);
    let mut tape = Tape::new();
    let x = tape.leaf(input.clone());
    let k = tape.leaf(Tensor::new(vec![1, 1, 1, 1], vec![2.0]).unwrap());
    let y = tape.conv2d(x, k, 1, 0).unwrap();
    for (a, b) in tape.value(y).data().iter().zip(input.data()) {
        assert_eq!(*a, 2.0 * b);
    }
}

#[test]
fn conv_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let inputs = [
        random(&[1, 5, 5], &mut rng),
        random(&[1, 1, 3, 3], &mut rng),
    ];
    let err = check(&inputs, |t, v| {
        let y = t.conv2d(v[0], v[1], 1, 1).unwrap();
        project(t, y)
    });
    assert!(err <= 1e-6, "rel err {err}");
}

#[test]
fn conv_strided_multichannel_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let inputs = [
        random(&[3, 7, 7], &mut rng),
        random(&[2, 3, 3, 3], &mut rng),
    ];
    let err = check(&inputs, |t, v| {
        let y = t.conv2d(v[0], v[1], 2, 1).unwrap();
        assert_eq!(t.shape(y), &[2, 4, 4]);
        project(t, y)
    });
    assert!(err <= 1e-6, "rel err {err}");
}

#[test]
fn conv_rejects_bad_geometry() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::zeros(&[2, 4, 4]));
    let k = tape.leaf(Tensor::zeros(&[1, 3, 3, 3]));
    let err = tape.conv2d(x, k, 1, 1).unwrap_err();
    assert!(err.to_string().contains("input channels"), "{err}");
    let k = tape.leaf(Tensor::zeros(&[1, 2, 2, 2]));
    assert!(tape.conv2d(x, k, 1, 0).is_err());
    let k = tape.leaf(Tensor::zeros(&[1, 2, 3, 3]));
    // (4 + 0 - 3) / 2 is not integral
    assert!(tape.conv2d(x, k, 2, 0).is_err());
}

#[test]
fn elementwise_examples() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::scalar(0.0));
    let s = tape.sigmoid(x).unwrap();
    let g = tape.backward(s).unwrap();
    assert_eq!(tape.value(s).item(), 0.5);
    assert_eq!(g.get(x).unwrap()[0], 0.25);

    let e = tape.exp(x).unwrap();
    let g = tape.backward(e).unwrap();
    assert_eq!(tape.value(e).item(), 1.0);
    assert_eq!(g.get(x).unwrap()[0], 1.0);

    let y = tape.leaf(Tensor::scalar(-0.3));
    let a = tape.abs(y).unwrap();
    let g = tape.backward(a).unwrap();
    assert_eq!(tape.value(a).item(), 0.3);
    assert_eq!(g.get(y).unwrap()[0], -1.0);

    let z = tape.leaf(Tensor::scalar(0.0));
    let a = tape.abs(z).unwrap();
    assert_eq!(tape.backward(a).unwrap().get(z).unwrap()[0], 0.0);
}

#[test]
fn elementwise_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let a = random(&[3, 4], &mut rng);
    let b = random(&[3, 4], &mut rng).map(|v| v + 2.5);
    let err = check(&[a.clone(), b.clone()], |t, v| {
        let s = t.add(v[0], v[1]).unwrap();
        let d = t.sub(s, v[0]).unwrap();
        let m = t.mul(d, v[0]).unwrap();
        let q = t.div(m, v[1]).unwrap();
        let e = t.exp(q).unwrap();
        let l = t.log(v[1]).unwrap();
        let sq = t.square(l).unwrap();
        let sg = t.sigmoid(e).unwrap();
        let n = t.neg(sg).unwrap();
        let r = t.add(n, sq).unwrap();
        let r = t.mul_scalar(r, 1.7);
        let r = t.add_scalar(r, 0.2);
        project(t, r)
    });
    assert!(err <= 1e-6, "rel err {err}");

    // keep inputs away from the kinks of abs and relu
    let c = a.map(|v| if v.abs() < 0.05 { v + 0.2 } else { v });
    let err = check(&[c], |t, v| {
        let r = t.relu(v[0]).unwrap();
        let a = t.abs(v[0]).unwrap();
        let s = t.add(r, a).unwrap();
        project(t, s)
    });
    assert!(err <= 1e-6, "rel err {err}");
}

#[test]
fn broadcasting_gradients_reduce_over_expanded_axes() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let a = random(&[3, 4, 4], &mut rng);
    let b = random(&[1, 4, 4], &mut rng);
    let c = random(&[3, 1, 1], &mut rng).map(|v| v + 3.0);
    let err = check(&[a, b, c], |t, v| {
        let s = t.mul(v[0], v[1]).unwrap();
        let q = t.div(s, v[2]).unwrap();
        let d = t.sub(v[1], q).unwrap();
        project(t, d)
    });
    assert!(err <= 1e-6, "rel err {err}");
}

#[test]
fn mismatched_shapes_are_rejected() {
    let mut tape = Tape::new();
    let a = tape.leaf(Tensor::zeros(&[2, 3]));
    let b = tape.leaf(Tensor::zeros(&[3, 3]));
    let err = tape.add(a, b).unwrap_err();
    assert!(matches!(
        err,
        AutodiffError::ShapeMismatch { op: "add", .. }
    ));
}

#[test]
fn log_rejects_non_positive() {
    let mut tape = Tape::new();
    let a = tape.leaf(Tensor::new(vec![2], vec![1.0, 0.0]).unwrap());
    assert!(tape.log(a).is_err());
    let c = tape.clamp(a, EPS, 1.0 - EPS);
    assert!(tape.log(c).is_ok());
}

#[test]
fn reductions() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap());
    let s = tape.sum_all(x);
    let g = tape.backward(s).unwrap();
    assert_eq!(tape.value(s).item(), 6.0);
    assert_eq!(g.get(x).unwrap(), &[1.0, 1.0, 1.0]);

    let y = tape.leaf(Tensor::new(vec![2], vec![2.0, 4.0]).unwrap());
    let m = tape.reduce_mean(y, &[0]).unwrap();
    let g = tape.backward(m).unwrap();
    assert_eq!(tape.value(m).item(), 3.0);
    assert_eq!(g.get(y).unwrap(), &[0.5, 0.5]);

    assert!(tape.reduce_sum(y, &[1]).is_err());
}

#[test]
fn reduction_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let a = random(&[2, 3, 4], &mut rng);
    let err = check(&[a], |t, v| {
        let s = t.reduce_sum(v[0], &[1]).unwrap();
        let m = t.reduce_mean(v[0], &[0, 2]).unwrap();
        let sq = t.square(s).unwrap();
        let p = project(t, sq);
        let q = project(t, m);
        let q = t.square(q).unwrap();
        t.add(p, q).unwrap()
    });
    assert!(err <= 1e-6, "rel err {err}");
}

#[test]
fn structural_ops() {
    let mut tape = Tape::new();
    let one = tape.leaf(Tensor::new(vec![1, 1, 1], vec![1.0]).unwrap());
    let up = tape.upsample2x(one).unwrap();
    assert_eq!(tape.shape(up), &[1, 2, 2]);
    assert_eq!(tape.value(up).data(), &[1.0; 4]);

    let a = tape.leaf(Tensor::zeros(&[2, 4, 4]));
    let b = tape.leaf(Tensor::zeros(&[3, 4, 4]));
    let c = tape.concat(a, b, 0).unwrap();
    assert_eq!(tape.shape(c), &[5, 4, 4]);

    let odd = tape.leaf(Tensor::zeros(&[1, 3, 4]));
    assert!(tape.maxpool2x(odd).is_err());
}

#[test]
fn maxpool_gradient_only_reaches_argmax() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = random(&[2, 4, 6], &mut rng);
    let mut tape = Tape::new();
    let v = tape.leaf(x.clone());
    let p = tape.maxpool2x(v).unwrap();
    let s = project(&mut tape, p);
    let g = tape.backward(s).unwrap();
    let nonzero = g.get(v).unwrap().iter().filter(|&&d| d != 0.0).count();
    assert!(nonzero <= 12);

    let err = check(&[x], |t, v| {
        let p = t.maxpool2x(v[0]).unwrap();
        let u = t.upsample2x(p).unwrap();
        let c = t.concat(u, v[0], 1).unwrap();
        project(t, c)
    });
    assert!(err <= 1e-6, "rel err {err}");
}

#[test]
fn bias_and_reshape_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = random(&[3, 2, 2], &mut rng);
    let b = random(&[3], &mut rng);
    let err = check(&[x, b], |t, v| {
        let y = t.add_bias(v[0], v[1]).unwrap();
        let r = t.reshape(y, &[3, 4]).unwrap();
        let sq = t.square(r).unwrap();
        project(t, sq)
    });
    assert!(err <= 1e-6, "rel err {err}");
}

#[test]
fn backward_requires_scalar_root() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::zeros(&[2]));
    assert!(matches!(
        tape.backward(x),
        Err(AutodiffError::NonScalarRoot { .. })
    ));
}

#[test]
fn backward_is_deterministic_and_pure() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let x = random(&[2, 6, 6], &mut rng);
    let k = random(&[3, 2, 3, 3], &mut rng);
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let kv = tape.leaf(k.clone());
    let y = tape.conv2d(xv, kv, 1, 1).unwrap();
    let r = tape.relu(y).unwrap();
    let p = tape.maxpool2x(r).unwrap();
    let s = project(&mut tape, p);
    let g1 = tape.backward(s).unwrap();
    let g2 = tape.backward(s).unwrap();
    for v in [xv, kv] {
        let a: Vec<u64> = g1.get(v).unwrap().iter().map(|d| d.to_bits()).collect();
        let b: Vec<u64> = g2.get(v).unwrap().iter().map(|d| d.to_bits()).collect();
        assert_eq!(a, b);
    }
    assert_eq!(tape.value(xv), &x);
    assert_eq!(tape.value(kv), &k);
}

#[test]
fn root_gradient_is_one() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::scalar(3.0));
    let y = tape.square(x).unwrap();
    let g = tape.backward(y).unwrap();
    assert_eq!(g.get(y).unwrap(), &[1.0]);
    assert_eq!(g.get(x).unwrap(), &[6.0]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn smooth_composites_match_finite_differences(
        seed in any::<u64>(),
        c in 1usize..3,
        h in 2usize..5,
        w in 2usize..5,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(&[c, h, w], &mut rng);
        let k = random(&[2, c, 3, 3], &mut rng);
        let b = random(&[2], &mut rng);
        let err = check(&[x, k, b], |t, v| {
            let y = t.conv2d(v[0], v[1], 1, 1).unwrap();
            let y = t.add_bias(y, v[2]).unwrap();
            let s = t.sigmoid(y).unwrap();
            let l = t.clamp(s, EPS, 1.0 - EPS);
            let l = t.log(l).unwrap();
            let m = t.reduce_mean(l, &[0]).unwrap();
            project(t, m)
        });
        prop_assert!(err <= 1e-4, "rel err {}", err);
    }
}
