use lap_numgrad::{adamw_step, grad_check, AdamWConfig, AdamWState, AttnMask, Error, Tape, Tensor, Var};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn rand_t(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.5..1.5)).collect()).unwrap()
}

/// Reduces an arbitrary tensor to a scalar through fixed random weights so
/// every output coordinate contributes to the check.
fn weigh(tape: &mut Tape<'_>, v: Var, seed: u64) -> lap_numgrad::Result<Var> {
    let shape = tape.shape(v).to_vec();
    let n: usize = shape.iter().product();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = tape.constant(&shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())?;
    let p = tape.mul(v, w)?;
    tape.sum(p)
}

fn check_many<F>(name: &str, mut make: F)
where
    F: FnMut(&mut ChaCha8Rng) -> f64,
{
    let mut rng = ChaCha8Rng::seed_from_u64(0xA11CE);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        worst = worst.max(make(&mut rng));
    }
    assert!(worst < TOL, "{name}: worst relative error {worst:e}");
}

macro_rules! unary_check {
    ($test:ident, $op:ident) => {
        #[test]
        fn $test() {
            check_many(stringify!($op), |rng| {
                let x = rand_t(rng, &[3, 4]);
                let seed = rng.gen();
                grad_check(|t, v| { let y = t.$op(v[0])?; weigh(t, y, seed) }, &[x], H).unwrap()
            });
        }
    };
}

unary_check!(grad_exp, exp);
unary_check!(grad_square, square);
unary_check!(grad_tanh, tanh);
unary_check!(grad_gelu, gelu);
unary_check!(grad_softmax, softmax);

#[test]
fn grad_relu_away_from_kink() {
    check_many("relu", |rng| {
        let mut x = rand_t(rng, &[3, 4]);
        for v in x.data_mut() {
            if v.abs() < 1e-3 {
                *v = 0.5;
            }
        }
        let seed = rng.gen();
        grad_check(|t, v| { let y = t.relu(v[0])?; weigh(t, y, seed) }, &[x], H).unwrap()
    });
}

#[test]
fn grad_binary_with_broadcast() {
    check_many("add/sub/mul", |rng| {
        let a = rand_t(rng, &[3, 4]);
        let b = rand_t(rng, &[3, 4]);
        let row = rand_t(rng, &[4]);
        let s = rand_t(rng, &[1]);
        let seed = rng.gen();
        grad_check(
            |t, v| {
                let x = t.mul(v[0], v[1])?;
                let x = t.add(x, v[2])?;
                let x = t.sub(x, v[3])?;
                let y = t.mul(x, v[2])?;
                let y = t.mul(y, v[3])?;
                let y = t.scale(y, 0.7)?;
                let y = t.add_scalar(y, 0.3)?;
                weigh(t, y, seed)
            },
            &[a, b, row, s],
            H,
        )
        .unwrap()
    });
}

#[test]
fn grad_matmul() {
    check_many("matmul", |rng| {
        let a = rand_t(rng, &[3, 5]);
        let b = rand_t(rng, &[5, 2]);
        let seed = rng.gen();
        grad_check(|t, v| { let y = t.matmul(v[0], v[1])?; weigh(t, y, seed) }, &[a, b], H).unwrap()
    });
}

#[test]
fn grad_sum_of_product_is_transpose() {
    // d/dA sum(A B) = 1 * B^T, compared against hand-built values
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a = rand_t(&mut rng, &[2, 3]).with_grad();
    let b = rand_t(&mut rng, &[3, 4]);
    let mut tape = Tape::new();
    let (av, bv) = (tape.leaf(&a).unwrap(), tape.leaf(&b).unwrap());
    let p = tape.matmul(av, bv).unwrap();
    let s = tape.sum(p).unwrap();
    let g = tape.backward(s).unwrap();
    let ga = g.get(av).unwrap();
    for i in 0..2 {
        for k in 0..3 {
            let expect: f64 = (0..4).map(|j| b.data()[k * 4 + j]).sum();
            assert!((ga[i * 3 + k] - expect).abs() < 1e-12);
        }
    }
    let err = grad_check(|t, v| { let p = t.matmul(v[0], v[1])?; t.sum(p) }, &[a, b], H).unwrap();
    assert!(err < 1e-8);
}

#[test]
fn grad_layer_norm() {
    check_many("layer_norm", |rng| {
        let x = rand_t(rng, &[3, 6]);
        let g = rand_t(rng, &[6]);
        let b = rand_t(rng, &[6]);
        let seed = rng.gen();
        grad_check(|t, v| { let y = t.layer_norm(v[0], v[1], v[2], 1e-5)?; weigh(t, y, seed) }, &[x, g, b], H).unwrap()
    });
}

#[test]
fn grad_attention_all_masks() {
    let masks = [AttnMask::None, AttnMask::Causal { window: None }, AttnMask::Causal { window: Some(2) }];
    for mask in masks {
        check_many("attention", |rng| {
            let tk = rng.gen_range(3..6);
            let tq = if matches!(mask, AttnMask::None) { rng.gen_range(1..5) } else { rng.gen_range(1..=tk) };
            let q = rand_t(rng, &[tq, 4]);
            let k = rand_t(rng, &[tk, 4]);
            let v = rand_t(rng, &[tk, 4]);
            let seed = rng.gen();
            grad_check(|t, x| { let y = t.attention(x[0], x[1], x[2], 2, mask)?; weigh(t, y, seed) }, &[q, k, v], H).unwrap()
        });
    }
}

#[test]
fn grad_gather_rows() {
    check_many("gather_rows", |rng| {
        let a = rand_t(rng, &[4, 3]);
        let seed = rng.gen();
        grad_check(|t, x| { let y = t.gather_rows(x[0], &[2, 0, 2, 3, 2])?; weigh(t, y, seed) }, &[a], H).unwrap()
    });
    let a = Tensor::new(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let mut tape = Tape::new();
    let v = tape.leaf(&a).unwrap();
    let g = tape.gather_rows(v, &[1, 1, 0]).unwrap();
    assert_eq!(tape.value(g), &[3.0, 4.0, 3.0, 4.0, 1.0, 2.0]);
    assert!(tape.gather_rows(v, &[2]).is_err());
}

#[test]
fn grad_structural_and_reductions() {
    check_many("concat/slice/reshape/mean/sq_err", |rng| {
        let a = rand_t(rng, &[2, 3]);
        let b = rand_t(rng, &[3, 3]);
        let target = rand_t(rng, &[3, 3]);
        let seed = rng.gen();
        grad_check(
            |t, v| {
                let c = t.concat_rows(v[0], v[1])?;
                let s = t.slice_rows(c, 1, 4)?;
                let e = t.sq_err(s, v[2])?;
                let r = t.reshape(c, &[15])?;
                let w = weigh(t, r, seed)?;
                let m = t.mean(s)?;
                let x = t.add(e, w)?;
                t.add(x, m)
            },
            &[a, b, target],
            H,
        )
        .unwrap()
    });
}

#[test]
fn grad_check_spec_examples() {
    let err = grad_check(|t, v| { let y = t.square(v[0])?; t.sum(y) }, &[Tensor::scalar(3.0)], 1e-5).unwrap();
    assert!(err < 1e-8);
    let x = Tensor::vector(vec![0.3, -1.2, 2.0]);
    let err = grad_check(|t, v| { let y = t.scale(v[0], 2.5)?; t.sum(y) }, &[x], 1e-5).unwrap();
    assert!(err < 1e-9, "{err:e}");
}

#[test]
fn grad_check_rejects_nonfinite() {
    let r = grad_check(|t, v| { let y = t.exp(v[0])?; t.sum(y) }, &[Tensor::scalar(800.0)], 1e-5);
    assert!(matches!(r, Err(Error::NonFinite { .. })));
}

#[test]
fn adamw_first_step_matches_hand_oracle() {
    let g = [0.5, -2.0, 1e-3];
    let x0 = [1.0, 2.0, -3.0];
    let lr = 0.01;
    let mut p = Tensor::vector(x0.to_vec());
    let mut st = AdamWState::new(&[3]);
    let cfg = AdamWConfig::default().with_weight_decay(0.0);
    adamw_step(&mut [&mut p], &[&g], &mut st, lr, &cfg).unwrap();
    for j in 0..3 {
        // m̂ = g, v̂ = g², so the step is lr·g/(|g|+ε)
        let m = 0.1 * g[j] / (1.0 - 0.9);
        let v = 0.001 * g[j] * g[j] / (1.0 - 0.999);
        let expect = x0[j] - lr * m / (v.sqrt() + 1e-8);
        assert!((p.data()[j] - expect).abs() < 1e-15);
        assert!((p.data()[j] - (x0[j] - lr * g[j] / (g[j].abs() + 1e-8))).abs() < 1e-12);
    }
}

fn loss_grad(x: &Tensor, seed_a: u64, seed_b: u64, which: u8) -> Vec<f64> {
    let mut tape = Tape::new();
    let xv = tape.leaf(x).unwrap();
    let y = tape.tanh(xv).unwrap();
    let la = weigh(&mut tape, y, seed_a).unwrap();
    let z = tape.square(xv).unwrap();
    let lb = weigh(&mut tape, z, seed_b).unwrap();
    let loss = match which {
        0 => tape.add(la, lb).unwrap(),
        1 => la,
        _ => lb,
    };
    tape.backward(loss).unwrap().get(xv).unwrap().to_vec()
}

proptest! {
    #[test]
    fn gradients_are_additive(vals in prop::collection::vec(-2.0f64..2.0, 6), sa in any::<u64>(), sb in any::<u64>()) {
        let x = Tensor::new(&[2, 3], vals).unwrap().with_grad();
        let both = loss_grad(&x, sa, sb, 0);
        let a = loss_grad(&x, sa, sb, 1);
        let b = loss_grad(&x, sa, sb, 2);
        for i in 0..6 {
            prop_assert!((both[i] - (a[i] + b[i])).abs() < 1e-12);
        }
    }

    #[test]
    fn forward_is_deterministic(vals in prop::collection::vec(-3.0f64..3.0, 12)) {
        let x = Tensor::new(&[3, 4], vals).unwrap();
        let run = || {
            let mut tape = Tape::new();
            let v = tape.leaf(&x).unwrap();
            let a = tape.attention(v, v, v, 2, AttnMask::Causal { window: Some(1) }).unwrap();
            let s = tape.softmax(a).unwrap();
            tape.value(s).iter().map(|f| f.to_bits()).collect::<Vec<_>>()
        };
        prop_assert_eq!(run(), run());
    }

    #[test]
    fn softmax_rows_sum_to_one(vals in prop::collection::vec(-30.0f64..30.0, 8)) {
        let x = Tensor::new(&[2, 4], vals).unwrap();
        let mut tape = Tape::new();
        let v = tape.leaf(&x).unwrap();
        let s = tape.softmax(v).unwrap();
        for row in tape.value(s).chunks(4) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn checkpoint_round_trip(vals in prop::collection::vec(any::<f64>().prop_filter("finite", |v| v.is_finite()), 0..20)) {
        let t = Tensor::vector(vals);
        let mut buf = Vec::new();
        lap_numgrad::write_checkpoint(&mut buf, &[("p", &t)]).unwrap();
        let back = lap_numgrad::read_checkpoint(&mut buf.as_slice()).unwrap();
        prop_assert_eq!(&back[0].1, &t);
    }
}
