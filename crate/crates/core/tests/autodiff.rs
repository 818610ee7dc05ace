//! Gradient oracle for the tensor layer: every differentiable operation is
//! checked against central finite differences on random shapes and seeds,
//! plus exact hand-computed cases and algebraic invariants.

use cmdse_core::numcore::gradcheck::{central_diff, max_rel_err};
use cmdse_core::numcore::{Tape, Tensor};
use cmdse_core::rng::seeded_rng;
use proptest::prelude::*;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

const FD_H: f64 = 1e-5;
const REL_TOL: f64 = 1e-4;

fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

/// Check analytic gradients of `build` against finite differences for every
/// input. The scalar objective is a fixed random projection of the output so
/// the whole Jacobian is exercised.
fn check_grads(
    inputs: &[(Vec<f64>, Vec<usize>)],
    rng: &mut ChaCha8Rng,
    build: &dyn Fn(&Tape, &[Tensor]) -> Tensor,
) {
    let tape = Tape::new();
    let leaves: Vec<Tensor> = inputs
        .iter()
        .map(|(d, s)| tape.variable(d.clone(), s).unwrap())
        .collect();
    let out = build(&tape, &leaves);
    let proj = uniform(rng, out.numel(), -1.0, 1.0);
    let proj_t = tape.constant(proj.clone(), out.shape()).unwrap();
    let loss = out.mul(&proj_t).unwrap().sum();
    loss.backward().unwrap();

    for (i, leaf) in leaves.iter().enumerate() {
        let analytic = leaf.grad().expect("gradient populated after backward");
        let mut f = |x: &[f64]| {
            let tape = Tape::new();
            let leaves: Vec<Tensor> = inputs
                .iter()
                .enumerate()
                .map(|(j, (d, s))| {
                    let data = if j == i { x.to_vec() } else { d.clone() };
                    tape.constant(data, s).unwrap()
                })
                .collect();
            let out = build(&tape, &leaves);
            out.value().iter().zip(&proj).map(|(a, b)| a * b).sum()
        };
        let numeric = central_diff(&mut f, &inputs[i].0, FD_H);
        let err = max_rel_err(&analytic, &numeric);
        assert!(
            err < REL_TOL,
            "input {i}: rel err {err:.3e}\nanalytic {analytic:?}\nnumeric  {numeric:?}"
        );
    }
}

fn rand_shape(rng: &mut ChaCha8Rng) -> Vec<usize> {
    let rank = rng.gen_range(1..=2usize);
    (0..rank).map(|_| rng.gen_range(1..=5usize)).collect()
}

// Values bounded away from zero so kinked ops (abs, relu, min, max) are
// differentiable at every probe point.
fn away_from_zero(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let v: f64 = rng.gen_range(0.05..2.0);
            if rng.gen_bool(0.5) {
                v
            } else {
                -v
            }
        })
        .collect()
}

fn n_of(shape: &[usize]) -> usize {
    shape.iter().product()
}

#[test]
fn fd_unary_smooth_ops() {
    type Build = fn(&Tensor) -> Tensor;
    let cases: Vec<(&str, Build, f64, f64)> = vec![
        ("neg", |x| x.neg(), -2.0, 2.0),
        ("exp", |x| x.exp(), -2.0, 2.0),
        ("log", |x| x.log(), 0.3, 3.0),
        ("sigmoid", |x| x.sigmoid(), -4.0, 4.0),
        ("softplus", |x| x.softplus(), -4.0, 4.0),
        ("gelu", |x| x.gelu(), -3.0, 3.0),
        ("scale", |x| x.scale(-1.7), -2.0, 2.0),
        ("add_scalar", |x| x.add_scalar(0.3), -2.0, 2.0),
        ("sum", |x| x.sum(), -2.0, 2.0),
        ("mean", |x| x.mean(), -2.0, 2.0),
    ];
    for (name, build, lo, hi) in cases {
        for seed in 0..100u64 {
            let mut rng = seeded_rng(seed, name);
            let shape = rand_shape(&mut rng);
            let data = uniform(&mut rng, n_of(&shape), lo, hi);
            check_grads(&[(data, shape)], &mut rng, &|_, ts| build(&ts[0]));
        }
    }
}

#[test]
fn fd_unary_kinked_and_power_ops() {
    for seed in 0..100u64 {
        let mut rng = seeded_rng(seed, "kinked");
        let shape = rand_shape(&mut rng);
        let n = n_of(&shape);
        let data = away_from_zero(&mut rng, n);
        check_grads(&[(data.clone(), shape.clone())], &mut rng, &|_, ts| {
            ts[0].abs()
        });
        check_grads(&[(data, shape.clone())], &mut rng, &|_, ts| ts[0].relu());
        let pos = uniform(&mut rng, n, 0.4, 2.5);
        check_grads(&[(pos, shape)], &mut rng, &|_, ts| ts[0].powf(1.7));
    }
}

#[test]
fn fd_binary_ops() {
    for seed in 0..100u64 {
        let mut rng = seeded_rng(seed, "binary");
        let shape = rand_shape(&mut rng);
        let n = n_of(&shape);
        let a = uniform(&mut rng, n, -2.0, 2.0);
        let b = uniform(&mut rng, n, -2.0, 2.0);
        let pair = |a: &[f64], b: &[f64]| {
            vec![
                (a.to_vec(), shape.clone()),
                (b.to_vec(), shape.clone()),
            ]
        };
        check_grads(&pair(&a, &b), &mut rng, &|_, ts| {
            ts[0].add(&ts[1]).unwrap()
        });
        check_grads(&pair(&a, &b), &mut rng, &|_, ts| {
            ts[0].sub(&ts[1]).unwrap()
        });
        check_grads(&pair(&a, &b), &mut rng, &|_, ts| {
            ts[0].mul(&ts[1]).unwrap()
        });
        let denom: Vec<f64> = away_from_zero(&mut rng, n)
            .iter()
            .map(|v| v + 0.4 * v.signum())
            .collect();
        check_grads(&pair(&a, &denom), &mut rng, &|_, ts| {
            ts[0].div(&ts[1]).unwrap()
        });
        // keep |a - b| away from the tie so min/max stay differentiable
        let spread: Vec<f64> = a
            .iter()
            .zip(&b)
            .map(|(x, y)| {
                if (x - y).abs() < 0.05 {
                    y + 0.1
                } else {
                    *y
                }
            })
            .collect();
        check_grads(&pair(&a, &spread), &mut rng, &|_, ts| {
            ts[0].minimum(&ts[1]).unwrap()
        });
        check_grads(&pair(&a, &spread), &mut rng, &|_, ts| {
            ts[0].maximum(&ts[1]).unwrap()
        });
    }
}

#[test]
fn fd_broadcast_ops() {
    for seed in 0..100u64 {
        let mut rng = seeded_rng(seed, "broadcast");
        let rows = rng.gen_range(1..=4usize);
        let cols = rng.gen_range(1..=4usize);
        let a = uniform(&mut rng, rows * cols, -2.0, 2.0);
        let b = uniform(&mut rng, cols, -2.0, 2.0);
        let s = uniform(&mut rng, 1, -2.0, 2.0);
        let wide = vec![(a.clone(), vec![rows, cols]), (b.clone(), vec![cols])];
        let scalar = vec![(a.clone(), vec![rows, cols]), (s.clone(), vec![1])];
        check_grads(&wide, &mut rng, &|_, ts| ts[0].add(&ts[1]).unwrap());
        check_grads(&wide, &mut rng, &|_, ts| ts[0].mul(&ts[1]).unwrap());
        check_grads(&scalar, &mut rng, &|_, ts| ts[0].mul(&ts[1]).unwrap());
        check_grads(&wide, &mut rng, &|_, ts| ts[1].sub(&ts[0]).unwrap());
    }
}

#[test]
fn fd_matmul_transpose_reshape() {
    for seed in 0..100u64 {
        let mut rng = seeded_rng(seed, "matmul");
        let m = rng.gen_range(1..=4usize);
        let k = rng.gen_range(1..=4usize);
        let n = rng.gen_range(1..=4usize);
        let a = uniform(&mut rng, m * k, -2.0, 2.0);
        let b = uniform(&mut rng, k * n, -2.0, 2.0);
        let inputs = vec![(a, vec![m, k]), (b, vec![k, n])];
        check_grads(&inputs, &mut rng, &|_, ts| {
            ts[0].matmul(&ts[1]).unwrap()
        });
        check_grads(&inputs[..1].to_vec(), &mut rng, &|_, ts| {
            ts[0].transpose().unwrap()
        });
        check_grads(&inputs[..1].to_vec(), &mut rng, &|_, ts| {
            ts[0].reshape(&[k, m]).unwrap()
        });
    }
}

#[test]
fn fd_shape_ops() {
    for seed in 0..100u64 {
        let mut rng = seeded_rng(seed, "shape");
        let rows = rng.gen_range(2..=5usize);
        let cols = rng.gen_range(2..=5usize);
        let x = uniform(&mut rng, rows * cols, -2.0, 2.0);
        let axis = rng.gen_range(0..2usize);
        let extent = [rows, cols][axis];
        let start = rng.gen_range(0..extent);
        let len = rng.gen_range(1..=extent - start);
        let inputs = vec![(x.clone(), vec![rows, cols])];
        check_grads(&inputs, &mut rng, &|_, ts| {
            ts[0].slice(axis, start, len).unwrap()
        });
        let y = uniform(&mut rng, rows * cols, -2.0, 2.0);
        let both = vec![
            (x.clone(), vec![rows, cols]),
            (y, vec![rows, cols]),
        ];
        check_grads(&both, &mut rng, &|_, ts| {
            Tensor::concat(&[ts[0].clone(), ts[1].clone()], axis).unwrap()
        });
        check_grads(&inputs, &mut rng, &|_, ts| {
            ts[0].sum_axis(axis).unwrap()
        });
        check_grads(&inputs, &mut rng, &|_, ts| {
            ts[0].mean_axis(axis).unwrap()
        });
    }
}

#[test]
fn fd_normalization_ops() {
    for seed in 0..100u64 {
        let mut rng = seeded_rng(seed, "norm");
        let rows = rng.gen_range(1..=4usize);
        let d = rng.gen_range(2..=5usize);
        let x = uniform(&mut rng, rows * d, -2.0, 2.0);
        let w = uniform(&mut rng, d, 0.5, 1.5);
        let b = uniform(&mut rng, d, -0.5, 0.5);
        let axis = rng.gen_range(0..2usize);
        let inputs = vec![(x.clone(), vec![rows, d])];
        check_grads(&inputs, &mut rng, &|_, ts| {
            ts[0].softmax(axis).unwrap()
        });
        check_grads(&inputs, &mut rng, &|_, ts| {
            ts[0].l2_normalize().unwrap()
        });
        let all = vec![
            (x.clone(), vec![rows, d]),
            (w, vec![d]),
            (b, vec![d]),
        ];
        check_grads(&all, &mut rng, &|_, ts| {
            ts[0].layer_norm(&ts[1], &ts[2], 1e-5).unwrap()
        });
    }
}

// ---- exact cases ----

#[test]
fn matmul_identity_is_identity() {
    let tape = Tape::new();
    let a = tape
        .constant(vec![1.0, 2.0, 3.0, 4.0], &[2, 2])
        .unwrap();
    let eye = tape.constant(vec![1.0, 0.0, 0.0, 1.0], &[2, 2]).unwrap();
    let out = a.matmul(&eye).unwrap();
    assert_eq!(out.value(), &[1.0, 2.0, 3.0, 4.0]);
}

#[test]
fn softmax_of_equal_logits_is_uniform() {
    let tape = Tape::new();
    let x = tape.constant(vec![0.0, 0.0, 0.0], &[3]).unwrap();
    let y = x.softmax(0).unwrap();
    for &v in y.value() {
        assert_eq!(v, 1.0 / 3.0);
    }
}

#[test]
fn sigmoid_at_zero_is_half() {
    let tape = Tape::new();
    let y = tape.constant(vec![0.0], &[1]).unwrap().sigmoid();
    assert_eq!(y.value(), &[0.5]);
}

#[test]
fn quadratic_gradient_is_exact() {
    let tape = Tape::new();
    let x = tape.variable(vec![1.0, 2.0, 3.0], &[3]).unwrap();
    let loss = x.mul(&x).unwrap().sum();
    loss.backward().unwrap();
    assert_eq!(x.grad().unwrap(), vec![2.0, 4.0, 6.0]);
}

#[test]
fn constants_receive_no_gradient() {
    let tape = Tape::new();
    let x = tape.variable(vec![2.0], &[1]).unwrap();
    let c = tape.constant(vec![5.0], &[1]).unwrap();
    let d = x.detach();
    let loss = x.mul(&c).unwrap().add(&d).unwrap().sum();
    loss.backward().unwrap();
    assert_eq!(x.grad().unwrap(), vec![5.0]);
    assert!(c.grad().is_none());
    assert!(d.grad().is_none());
}

#[test]
fn backward_rejects_non_scalar() {
    let tape = Tape::new();
    let x = tape.variable(vec![1.0, 2.0], &[2]).unwrap();
    assert!(matches!(
        x.backward(),
        Err(cmdse_core::Error::NonScalarLoss(_))
    ));
}

#[test]
fn broadcasting_is_suffix_only() {
    let tape = Tape::new();
    let a = tape.constant(vec![0.0; 6], &[2, 3]).unwrap();
    let col = tape.constant(vec![1.0, 2.0], &[2]).unwrap();
    assert!(matches!(
        a.add(&col),
        Err(cmdse_core::Error::ShapeMismatch { .. })
    ));
    let row = tape.constant(vec![1.0, 2.0, 3.0], &[3]).unwrap();
    let out = a.add(&row).unwrap();
    assert_eq!(out.value(), &[1.0, 2.0, 3.0, 1.0, 2.0, 3.0]);
}

#[test]
fn same_seed_same_bits() {
    let run = || {
        let tape = Tape::new();
        let mut rng = seeded_rng(42, "determinism");
        let x = tape
            .variable(uniform(&mut rng, 12, -1.0, 1.0), &[3, 4])
            .unwrap();
        let w = tape
            .variable(uniform(&mut rng, 16, -1.0, 1.0), &[4, 4])
            .unwrap();
        let y = x.matmul(&w).unwrap().gelu().softmax(1).unwrap();
        y.value().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    };
    assert_eq!(run(), run());
}

// ---- invariants ----

proptest! {
    #[test]
    fn softmax_lanes_sum_to_one(values in prop::collection::vec(-50.0f64..50.0, 1..12)) {
        let tape = Tape::new();
        let n = values.len();
        let x = tape.constant(values, &[n]).unwrap();
        let y = x.softmax(0).unwrap();
        let sum: f64 = y.value().iter().sum();
        prop_assert!((sum - 1.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_is_shift_invariant(values in prop::collection::vec(-10.0f64..10.0, 2..8), c in -5.0f64..5.0) {
        let tape = Tape::new();
        let n = values.len();
        let x = tape.constant(values.clone(), &[n]).unwrap();
        let shifted = tape.constant(values.iter().map(|v| v + c).collect(), &[n]).unwrap();
        let a = x.softmax(0).unwrap();
        let b = shifted.softmax(0).unwrap();
        for (u, v) in a.value().iter().zip(b.value()) {
            prop_assert!((u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn slice_concat_round_trips(values in prop::collection::vec(-10.0f64..10.0, 2..12), split in 1usize..11) {
        let n = values.len();
        prop_assume!(split < n);
        let tape = Tape::new();
        let x = tape.constant(values.clone(), &[n]).unwrap();
        let a = x.slice(0, 0, split).unwrap();
        let b = x.slice(0, split, n - split).unwrap();
        let y = Tensor::concat(&[a, b], 0).unwrap();
        prop_assert_eq!(y.value(), &values[..]);
    }

    #[test]
    fn l2_normalize_produces_unit_rows(values in prop::collection::vec(0.1f64..5.0, 2..8)) {
        let tape = Tape::new();
        let n = values.len();
        let x = tape.constant(values, &[n]).unwrap();
        let y = x.l2_normalize().unwrap();
        let norm: f64 = y.value().iter().map(|v| v * v).sum::<f64>().sqrt();
        prop_assert!((norm - 1.0).abs() < 1e-10);
    }
}
