use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
}

/// Checks `d/dx sum(w ⊙ op(x...))` for every input against the piecewise
/// finite-difference oracle.
fn gradcheck_op<F>(inputs: Vec<Tensor>, op: F) -> f64
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let weights = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let out = op(&mut tape, &vars);
        random_tensor(&mut rng, tape.shape(out))
    };
    let objective = |tape: &mut Tape, vars: &[Var]| {
        let out = op(tape, vars);
        let w = tape.constant(weights.clone());
        let prod = tape.mul(out, w).unwrap();
        tape.sum(prod)
    };

    let mut worst: f64 = 0.0;
    for k in 0..inputs.len() {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs
            .iter()
            .enumerate()
            .map(|(j, t)| tape.leaf(t.clone().with_requires_grad(j == k)))
            .collect();
        let loss = objective(&mut tape, &vars);
        tape.backward(loss).unwrap();
        let analytic = tape
            .grad(vars[k])
            .map(|g| g.to_vec())
            .unwrap_or_else(|| vec![0.0; inputs[k].numel()]);

        let numeric = finite_diff_piecewise(
            |theta| {
                let mut tape = Tape::new();
                let vars: Vec<Var> = inputs
                    .iter()
                    .enumerate()
                    .map(|(j, t)| {
                        if j == k {
                            tape.constant(Tensor::new(t.shape().to_vec(), theta.to_vec()).unwrap())
                        } else {
                            tape.constant(t.clone())
                        }
                    })
                    .collect();
                let loss = objective(&mut tape, &vars);
                Probe::new(vec![tape.value(loss).item()], tape.branch_signature())
            },
            inputs[k].data(),
            &[1e-3, 1e-4, 1e-5],
        );
        worst = worst.max(max_rel_error(&analytic, &numeric[0]));
    }
    worst
}

#[test]
fn matmul_identity_and_formula() {
    let mut tape = Tape::new();
    let i2 = tape.constant(Tensor::from_rows(&[[1.0, 0.0], [0.0, 1.0]]).unwrap());
    let a = tape.constant(Tensor::from_rows(&[[1.0, 2.0], [3.0, 4.0]]).unwrap());
    let ia = tape.matmul(i2, a).unwrap();
    assert_eq!(tape.value(ia).data(), tape.value(a).data());

    let b = tape.constant(Tensor::from_rows(&[[0.0], [1.0]]).unwrap());
    let ab = tape.matmul(a, b).unwrap();
    assert_eq!(tape.shape(ab), &[2, 1]);
    assert_eq!(tape.value(ab).data(), &[2.0, 4.0]);
}

#[test]
fn matmul_shape_mismatch_names_both_shapes() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::zeros(&[2, 3]));
    let b = tape.constant(Tensor::zeros(&[2, 3]));
    let err = tape.matmul(a, b).unwrap_err().to_string();
    assert!(err.contains("[2, 3]"), "{}", err);
    assert!(matches!(tape.matmul(a, b), Err(crate::Error::Dimension(_))));
}

#[test]
fn matmul_gradient_matches_central_difference() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let a = random_tensor(&mut rng, &[3, 4]);
    let b = random_tensor(&mut rng, &[4, 2]);

    let mut tape = Tape::new();
    let av = tape.leaf(a.clone().with_requires_grad(true));
    let bv = tape.constant(b.clone());
    let out = tape.matmul(av, bv).unwrap();
    let loss = tape.sum(out);
    tape.backward(loss).unwrap();

    let numeric = finite_diff(
        |t| {
            let mut tape = Tape::new();
            let av = tape.constant(t.clone());
            let bv = tape.constant(b.clone());
            let out = tape.matmul(av, bv).unwrap();
            let s = tape.sum(out);
            tape.value(s).item()
        },
        &a,
        1e-5,
    );
    assert!(max_rel_error(tape.grad(av).unwrap(), numeric.data()) <= 1e-6);
}

#[test]
fn softmax_examples() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::vector(vec![0.0, 0.0, 0.0]));
    let s = tape.softmax(x, 0).unwrap();
    assert!(close(tape.value(s).data(), &[1.0 / 3.0; 3], 1e-15));

    let x = tape.constant(Tensor::vector(vec![1000.0, 0.0]));
    let s = tape.softmax(x, 0).unwrap();
    let v = tape.value(s).data();
    assert_eq!(v[0], 1.0);
    assert!(v[1] >= 0.0 && v[1] < 1e-300);

    let x = tape.constant(Tensor::vector(vec![1.0, 2.0, 3.0]));
    let s = tape.softmax(x, 0).unwrap();
    assert!(close(tape.value(s).data(), &[0.09003, 0.24473, 0.66524], 5e-6));

    let x = tape.constant(Tensor::vector(vec![-3.7]));
    let s = tape.softmax(x, 0).unwrap();
    assert_eq!(tape.value(s).data(), &[1.0]);
}

#[test]
fn softmax_over_first_axis() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::from_rows(&[[0.0, 5.0], [0.0, 5.0]]).unwrap());
    let s = tape.softmax(x, 0).unwrap();
    assert!(close(tape.value(s).data(), &[0.5, 0.5, 0.5, 0.5], 1e-15));
}

#[test]
fn layer_norm_examples() {
    let mut tape = Tape::new();
    let g = tape.constant(Tensor::vector(vec![1.0; 4]));
    let b = tape.constant(Tensor::vector(vec![0.0; 4]));
    let x = tape.constant(Tensor::from_rows(&[[5.0, 5.0, 5.0, 5.0]]).unwrap());
    let y = tape.layer_norm(x, g, b, LAYER_NORM_EPS).unwrap();
    assert_eq!(tape.value(y).data(), &[0.0; 4]);

    let g = tape.constant(Tensor::vector(vec![1.0; 2]));
    let b = tape.constant(Tensor::vector(vec![0.0; 2]));
    let x = tape.constant(Tensor::from_rows(&[[1.0, 3.0]]).unwrap());
    let y = tape.layer_norm(x, g, b, LAYER_NORM_EPS).unwrap();
    let expect = 1.0 / (1.0f64 + 1e-5).sqrt();
    assert!(close(tape.value(y).data(), &[-expect, expect], 1e-15));
    assert!((expect - 0.99999).abs() < 1e-5);
}

#[test]
fn layer_norm_moments() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut tape = Tape::new();
    let x = tape.constant(random_tensor(&mut rng, &[4, 8]));
    let g = tape.constant(Tensor::vector(vec![1.0; 8]));
    let b = tape.constant(Tensor::vector(vec![0.0; 8]));
    let y = tape.layer_norm(x, g, b, LAYER_NORM_EPS).unwrap();
    for row in tape.value(y).to_rows() {
        let mean = row.iter().sum::<f64>() / 8.0;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 8.0;
        assert!(mean.abs() < 1e-9);
        assert!((var - 1.0).abs() < 1e-4, "var {}", var);
    }
}

#[test]
fn backward_simple_cases() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::vector(vec![1.0, -2.0, 3.0]).with_requires_grad(true));
    let s = tape.sum(x);
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[1.0, 1.0, 1.0]);

    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::vector(vec![1.0, -2.0, 3.0]).with_requires_grad(true));
    let xx = tape.mul(x, x).unwrap();
    let dot = tape.sum(xx);
    tape.backward(dot).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[2.0, -4.0, 6.0]);
}

#[test]
fn backward_rejects_non_scalar() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]).with_requires_grad(true));
    let y = tape.relu(x);
    assert!(matches!(tape.backward(y), Err(crate::Error::Contract(_))));
}

#[test]
fn backward_accumulates_until_zeroed() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]).with_requires_grad(true));
    let s = tape.sum(x);
    tape.backward(s).unwrap();
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[2.0, 2.0]);
    tape.zero_grad();
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[1.0, 1.0]);
}

#[test]
fn fan_out_sums_contributions() {
    // y = sum(relu(x) * x) + sum(3x): x feeds three consumers.
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x0 = random_tensor(&mut rng, &[5]);
    let f = |tape: &mut Tape, x: Var| {
        let r = tape.relu(x);
        let p = tape.mul(r, x).unwrap();
        let a = tape.sum(p);
        let t = tape.scale(x, 3.0);
        let b = tape.sum(t);
        tape.add(a, b).unwrap()
    };
    let mut tape = Tape::new();
    let x = tape.leaf(x0.clone().with_requires_grad(true));
    let y = f(&mut tape, x);
    tape.backward(y).unwrap();
    let analytic: Vec<f64> = x0
        .data()
        .iter()
        .map(|v| if *v > 0.0 { 2.0 * v + 3.0 } else { 3.0 })
        .collect();
    assert!(close(tape.grad(x).unwrap(), &analytic, 1e-12));
    let numeric = finite_diff(
        |t| {
            let mut tape = Tape::new();
            let x = tape.constant(t.clone());
            let y = f(&mut tape, x);
            tape.value(y).item()
        },
        &x0,
        1e-6,
    );
    assert!(max_rel_error(&analytic, numeric.data()) < 1e-6);
}

#[test]
fn finite_diff_agrees_with_backward_on_softmax_cross_entropy() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let logits = random_tensor(&mut rng, &[3, 5]);
    let targets = [1usize, 4, 0];
    let ce = |tape: &mut Tape, x: Var| {
        let ls = tape.log_softmax_rows(x);
        let idx: Vec<usize> = targets.iter().enumerate().map(|(i, t)| i * 5 + t).collect();
        let picked = tape.gather(ls, &idx).unwrap();
        let m = tape.mean(picked);
        tape.scale(m, -1.0)
    };
    let mut tape = Tape::new();
    let x = tape.leaf(logits.clone().with_requires_grad(true));
    let l = ce(&mut tape, x);
    tape.backward(l).unwrap();
    let numeric = finite_diff(
        |t| {
            let mut tape = Tape::new();
            let x = tape.constant(t.clone());
            let l = ce(&mut tape, x);
            tape.value(l).item()
        },
        &logits,
        1e-5,
    );
    assert!(max_rel_error(tape.grad(x).unwrap(), numeric.data()) <= 1e-6);
}

#[test]
fn every_differentiable_op_passes_gradcheck_on_ten_seeds() {
    type OpFn = Box<dyn Fn(&mut Tape, &[Var]) -> Var>;
    let cases: Vec<(&str, Vec<Vec<usize>>, OpFn)> = vec![
        ("matmul", vec![vec![3, 4], vec![4, 2]], Box::new(|t, v| t.matmul(v[0], v[1]).unwrap())),
        ("matmul_t", vec![vec![3, 4], vec![2, 4]], Box::new(|t, v| t.matmul_t(v[0], v[1]).unwrap())),
        ("transpose", vec![vec![3, 2]], Box::new(|t, v| t.transpose(v[0]).unwrap())),
        ("add", vec![vec![2, 3], vec![2, 3]], Box::new(|t, v| t.add(v[0], v[1]).unwrap())),
        ("sub", vec![vec![2, 3], vec![2, 3]], Box::new(|t, v| t.sub(v[0], v[1]).unwrap())),
        ("mul", vec![vec![2, 3], vec![2, 3]], Box::new(|t, v| t.mul(v[0], v[1]).unwrap())),
        ("add_n", vec![vec![2, 2], vec![2, 2], vec![2, 2]], Box::new(|t, v| t.add_n(v).unwrap())),
        ("add_row", vec![vec![3, 4], vec![4]], Box::new(|t, v| t.add_row(v[0], v[1]).unwrap())),
        ("scale", vec![vec![3]], Box::new(|t, v| t.scale(v[0], -2.5))),
        ("relu", vec![vec![4, 3]], Box::new(|t, v| t.relu(v[0]))),
        ("softmax_rows", vec![vec![3, 4]], Box::new(|t, v| t.softmax_rows(v[0]).unwrap())),
        ("softmax_axis0", vec![vec![3, 4]], Box::new(|t, v| t.softmax(v[0], 0).unwrap())),
        ("log_softmax", vec![vec![3, 4]], Box::new(|t, v| t.log_softmax_rows(v[0]))),
        ("log_clamped", vec![vec![5]], Box::new(|t, v| {
            let s = t.softmax_rows(v[0]).unwrap();
            t.log_clamped(s)
        })),
        ("layer_norm", vec![vec![4, 8], vec![8], vec![8]], Box::new(|t, v| {
            t.layer_norm(v[0], v[1], v[2], LAYER_NORM_EPS).unwrap()
        })),
        ("gather_rows", vec![vec![5, 3]], Box::new(|t, v| t.gather_rows(v[0], &[4, 1, 1, 0]).unwrap())),
        ("group_mean_rows", vec![vec![5, 3]], Box::new(|t, v| {
            t.group_mean_rows(v[0], &[vec![0, 1, 2], vec![3], vec![1, 4]]).unwrap()
        })),
        ("l2_normalize", vec![vec![3, 4]], Box::new(|t, v| t.l2_normalize_rows(v[0]))),
        ("concat_cols", vec![vec![2, 3], vec![2, 1]], Box::new(|t, v| t.concat_cols(v).unwrap())),
        ("concat_rows", vec![vec![2, 3], vec![1, 3]], Box::new(|t, v| t.concat_rows(v).unwrap())),
        ("slice_cols", vec![vec![3, 5]], Box::new(|t, v| t.slice_cols(v[0], 1, 4).unwrap())),
        ("sum_rows", vec![vec![3, 4]], Box::new(|t, v| t.sum_rows(v[0]))),
        ("mean", vec![vec![3, 4]], Box::new(|t, v| t.mean(v[0]))),
        ("gather", vec![vec![3, 4]], Box::new(|t, v| t.gather(v[0], &[0, 5, 5, 11]).unwrap())),
        ("logsumexp", vec![vec![6]], Box::new(|t, v| t.logsumexp(v[0]).unwrap())),
        ("smooth_l1", vec![vec![8]], Box::new(|t, v| {
            let s = t.scale(v[0], 2.0);
            t.smooth_l1(s, 1.0)
        })),
    ];
    for (name, shapes, op) in &cases {
        for seed in 0..10 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let inputs = shapes.iter().map(|s| random_tensor(&mut rng, s)).collect();
            let err = gradcheck_op(inputs, op);
            assert!(err <= 1e-4, "{} seed {}: rel err {}", name, seed, err);
        }
    }
}

#[test]
fn branch_signatures_follow_dependencies() {
    let build = |shift: f64| {
        let mut t = Tape::new();
        let a = t.leaf(Tensor::new(vec![2], vec![1.0, -1.0 + shift]).unwrap());
        let b = t.leaf(Tensor::new(vec![2], vec![0.5, 2.0]).unwrap());
        let ra = t.relu(a);
        let ya = t.sum(ra);
        let yb = t.sum(b);
        t.note_decision_on(yb, [7]);
        let sigs = t.branch_signatures_of(&[ya, yb]);
        assert_eq!(sigs, vec![t.branch_signature_of(ya), t.branch_signature_of(yb)]);
        sigs
    };
    let (x, y) = (build(0.0), build(2.0));
    assert_ne!(x[0], y[0], "the ReLU under ya flipped");
    assert_eq!(x[1], y[1], "yb does not depend on a");
}

#[test]
fn ops_are_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut tape = Tape::new();
        let a = tape.leaf(random_tensor(&mut rng, &[4, 6]).with_requires_grad(true));
        let b = tape.constant(random_tensor(&mut rng, &[6, 6]));
        let g = tape.constant(Tensor::vector(vec![1.0; 6]));
        let z = tape.constant(Tensor::vector(vec![0.0; 6]));
        let h = tape.matmul(a, b).unwrap();
        let n = tape.layer_norm(h, g, z, LAYER_NORM_EPS).unwrap();
        let s = tape.softmax_rows(n).unwrap();
        let l = tape.log_clamped(s);
        let loss = tape.sum(l);
        tape.backward(loss).unwrap();
        (tape.value(loss).item().to_bits(), tape.grad(a).unwrap().to_vec())
    };
    let (l1, g1) = run();
    let (l2, g2) = run();
    assert_eq!(l1, l2);
    assert!(g1.iter().zip(&g2).all(|(x, y)| x.to_bits() == y.to_bits()));
}

#[test]
fn empty_row_tensors_flow_through() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::zeros(&[0, 4]).with_requires_grad(true));
    let w = tape.constant(Tensor::zeros(&[4, 3]));
    let y = tape.matmul(x, w).unwrap();
    assert_eq!(tape.shape(y), &[0, 3]);
    let s = tape.softmax_rows(y).unwrap();
    assert_eq!(tape.shape(s), &[0, 3]);
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one_and_shift_invariant(
        row in prop::collection::vec(-30.0f64..30.0, 1..8),
        shift in -100.0f64..100.0,
    ) {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::vector(row.clone()));
        let s = tape.softmax(x, 0).unwrap();
        let shifted = tape.constant(Tensor::vector(row.iter().map(|v| v + shift).collect()));
        let s2 = tape.softmax(shifted, 0).unwrap();
        let sum: f64 = tape.value(s).data().iter().sum();
        prop_assert!((sum - 1.0).abs() <= 1e-9);
        prop_assert!(tape.value(s).data().iter().all(|v| *v >= 0.0));
        prop_assert!(close(tape.value(s).data(), tape.value(s2).data(), 1e-9));
    }
}
