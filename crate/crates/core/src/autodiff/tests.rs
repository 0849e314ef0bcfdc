use super::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}

#[test]
fn sigmoid_at_zero() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::scalar(0.0).with_grad());
    let y = tape.sigmoid(x);
    assert_eq!(tape.data(y)[0], 0.5);
    tape.backward(y).unwrap();
    assert_eq!(tape.grad(x).unwrap()[0], 0.25);
}

#[test]
fn matmul_identity() {
    let a = random(&[3, 3], 1).with_grad();
    let id = Tensor::new(vec![3, 3], (0..9).map(|i| if i % 4 == 0 { 1.0 } else { 0.0 }).collect()).unwrap();
    let mut tape = Tape::new();
    let va = tape.leaf(a.clone());
    let vi = tape.constant(id.clone());
    let p = tape.matmul(va, vi).unwrap();
    assert_eq!(tape.data(p), a.data());
    let s = tape.sum(p);
    tape.backward(s).unwrap();
    // d/dA sum(A I) = ones * I^T = all ones.
    assert!(tape.grad(va).unwrap().iter().all(|g| *g == 1.0));

    let mut tape = Tape::new();
    let va = tape.constant(a);
    let vi = tape.leaf(id.with_grad());
    let p = tape.matmul(va, vi).unwrap();
    let s = tape.sum(p);
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(vi).unwrap().len(), 9);
}

#[test]
fn shape_mismatch_is_an_error() {
    let mut tape = Tape::new();
    let a = tape.leaf(Tensor::zeros(&[2, 3]));
    let b = tape.leaf(Tensor::zeros(&[3, 2]));
    assert!(tape.add(a, b).is_err());
    assert!(tape.matmul(a, a).is_err());
    assert!(tape.backward(a).is_err());
    assert!(tape.backward(Var(99)).is_err());
}

#[test]
fn conv2d_matches_finite_differences() {
    let w = random(&[2, 1, 3, 3], 7);
    let x = random(&[1, 1, 8, 8], 8);
    let report = grad_check(
        |t, v| {
            let wv = t.constant(w.clone());
            let y = t.conv2d(v, wv)?;
            let sq = t.mul(y, y)?;
            Ok(t.sum(sq))
        },
        &x,
        1e-5,
    );
    assert!(report.max_rel_err < 1e-4, "{report:?}");

    let report = grad_check(
        |t, v| {
            let xv = t.constant(x.clone());
            let y = t.conv2d(xv, v)?;
            let s = t.sigmoid(y);
            Ok(t.sum(s))
        },
        &w,
        1e-5,
    );
    assert!(report.max_rel_err < 1e-4, "{report:?}");
}

#[test]
fn bce_examples() {
    let mut tape = Tape::new();
    let l = tape.leaf(Tensor::zeros(&[4]));
    let loss = tape.bce_with_logits(l, &[1.0, 0.0, 1.0, 1.0]).unwrap();
    assert!(close(tape.data(loss)[0], std::f64::consts::LN_2, 1e-15));

    let l = tape.leaf(Tensor::from_vec(vec![20.0]).with_grad());
    let loss = tape.bce_with_logits(l, &[1.0]).unwrap();
    let v = tape.data(loss)[0];
    assert!(v.is_finite() && v < 1e-8);
    tape.backward(loss).unwrap();
    assert!(tape.grad(l).unwrap()[0].is_finite());

    let l = tape.leaf(Tensor::from_vec(vec![-800.0, 800.0]));
    let loss = tape.bce_with_logits(l, &[1.0, 0.0]).unwrap();
    assert!(close(tape.data(loss)[0], 800.0, 1e-9));

    assert!(tape.bce_with_logits(l, &[1.0]).is_err());
    assert!(tape.bce_with_logits(l, &[1.0, 0.5]).is_err());
}

#[test]
fn bce_gradient() {
    let x = random(&[12], 3).reshaped(vec![12]).unwrap();
    let targets: Vec<f64> = (0..12).map(|i| (i % 3 == 0) as u8 as f64).collect();
    let r = grad_check(|t, v| t.bce_with_logits(v, &targets), &x, 1e-5);
    assert!(r.max_rel_err < 1e-4, "{r:?}");
}

#[test]
fn gaussian_kl_examples() {
    let mut tape = Tape::new();
    let mu = tape.leaf(Tensor::zeros(&[1, 3]));
    let lv = tape.leaf(Tensor::zeros(&[1, 3]));
    let kl = tape.gaussian_kl(mu, lv).unwrap();
    assert_eq!(tape.data(kl)[0], 0.0);

    let mu = tape.leaf(Tensor::from_vec(vec![1.0]));
    let lv = tape.leaf(Tensor::from_vec(vec![0.0]));
    let kl = tape.gaussian_kl(mu, lv).unwrap();
    assert!(close(tape.data(kl)[0], 0.5, 1e-15));
}

#[test]
fn gaussian_kl_gradient() {
    let packed = random(&[2, 2, 5], 11);
    let r = grad_check(
        |t, v| {
            // split the leaf into mu and logvar halves with constant masks
            let n = 10;
            let mask_a: Vec<f64> = (0..2 * n).map(|i| (i < n) as u8 as f64).collect();
            let ma = t.constant(Tensor::new(vec![2, 2, 5], mask_a.clone())?);
            let mb = t.constant(Tensor::new(vec![2, 2, 5], mask_a.iter().map(|m| 1.0 - m).collect())?);
            let a = t.mul(v, ma)?;
            let b = t.mul(v, mb)?;
            t.gaussian_kl(a, b)
        },
        &packed,
        1e-5,
    );
    assert!(r.max_rel_err < 1e-4, "{r:?}");
}

#[test]
fn sum_of_squares() {
    let x = Tensor::from_vec(vec![1.0, 2.0, 3.0]);
    let r = grad_check(
        |t, v| {
            let sq = t.mul(v, v)?;
            Ok(t.sum(sq))
        },
        &x,
        1e-5,
    );
    assert_eq!(r.analytic, vec![2.0, 4.0, 6.0]);
    assert!(r.max_rel_err < 1e-8);
}

#[test]
fn relu_away_from_kink_is_exact() {
    let x = Tensor::from_vec(vec![0.5, 0.2, 1.5, 0.11]);
    let r = grad_check(
        |t, v| {
            let y = t.relu(v);
            let y = t.scale(y, 3.0);
            Ok(t.sum(y))
        },
        &x,
        1e-5,
    );
    assert!(r.kink_margin > 0.1);
    assert_eq!(r.analytic, vec![3.0; 4]);
    assert!(r.max_rel_err < 1e-9);
}

#[test]
fn clip_gradient_is_masked() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::from_vec(vec![-2.0, 0.5, 3.0]).with_grad());
    let y = tape.clip(x, -1.0, 1.0);
    assert_eq!(tape.data(y), &[-1.0, 0.5, 1.0]);
    let s = tape.sum(y);
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[0.0, 1.0, 0.0]);
}

#[test]
fn elementwise_primitives() {
    let x = random(&[3, 4], 5);
    let unary: Vec<fn(&mut Tape, Var) -> Var> = vec![
        |t, v| t.sigmoid(v),
        |t, v| t.exp(v),
        |t, v| {
            let e = t.exp(v);
            t.log(e)
        },
        |t, v| t.add_scalar(v, 2.5),
        |t, v| t.scale(v, -1.5),
        |t, v| t.clip(v, -2.0, 2.0),
    ];
    for (k, op) in unary.into_iter().enumerate() {
        let r = grad_check(
            |t, v| {
                let y = op(t, v);
                let sq = t.mul(y, y)?;
                Ok(t.mean(sq))
            },
            &x,
            1e-5,
        );
        assert!(r.max_rel_err < 1e-4, "op {k}: {r:?}");
    }
}

#[test]
fn structural_primitives() {
    let x = random(&[2, 3, 4, 4], 21);
    let other = random(&[2, 2, 4, 4], 22);
    let bias = random(&[3], 23);
    let r = grad_check(
        |t, v| {
            let b = t.constant(bias.clone());
            let y = t.add_channel_bias(v, b)?;
            let o = t.constant(other.clone());
            let c = t.concat_channels(y, o)?;
            let m = t.spatial_mean(c)?;
            let sq = t.mul(m, m)?;
            Ok(t.sum(sq))
        },
        &x,
        1e-5,
    );
    assert!(r.max_rel_err < 1e-4, "{r:?}");

    let rb = random(&[5], 24);
    let r = grad_check(
        |t, v| {
            let a = t.constant(random(&[3, 5], 25));
            let y = t.add_row_bias(a, v)?;
            let s = t.sigmoid(y);
            Ok(t.sum(s))
        },
        &rb,
        1e-5,
    );
    assert!(r.max_rel_err < 1e-4, "{r:?}");
}

#[test]
fn accumulation_is_additive() {
    let x = random(&[6], 31);
    let f1 = |t: &mut Tape, v: Var| {
        let s = t.sigmoid(v);
        t.sum(s)
    };
    let f2 = |t: &mut Tape, v: Var| {
        let e = t.exp(v);
        t.mean(e)
    };
    let grad_of = |which: u8| {
        let mut t = Tape::new();
        let v = t.leaf(x.clone().with_grad());
        let out = match which {
            1 => f1(&mut t, v),
            2 => f2(&mut t, v),
            _ => {
                let a = f1(&mut t, v);
                let b = f2(&mut t, v);
                t.add(a, b).unwrap()
            }
        };
        t.backward(out).unwrap();
        t.grad(v).unwrap().to_vec()
    };
    let (g1, g2, g12) = (grad_of(1), grad_of(2), grad_of(3));
    for i in 0..6 {
        assert!(close(g1[i] + g2[i], g12[i], 1e-12));
    }
}

#[test]
fn forward_and_backward_are_deterministic() {
    let run = || {
        let mut t = Tape::new();
        let x = t.leaf(random(&[2, 2, 8, 8], 41).with_grad());
        let w = t.leaf(random(&[4, 2, 3, 3], 42).with_grad());
        let y = t.conv2d(x, w).unwrap();
        let r = t.relu(y);
        let l = t.mean(r);
        t.backward(l).unwrap();
        (t.data(l).to_vec(), t.grad(x).unwrap().to_vec(), t.grad(w).unwrap().to_vec())
    };
    let a = run();
    let b = run();
    assert_eq!(format!("{a:?}"), format!("{b:?}"));
}

#[derive(Debug)]
struct Transpose(usize);

impl PlaneMap for Transpose {
    fn plane_shape(&self) -> (usize, usize) {
        (self.0, self.0)
    }
    fn apply(&self, input: &[f64], out: &mut [f64]) {
        let n = self.0;
        for i in 0..n {
            for j in 0..n {
                out[j * n + i] = input[i * n + j];
            }
        }
    }
    fn adjoint(&self, grad_out: &[f64], grad_in: &mut [f64]) {
        let n = self.0;
        for i in 0..n {
            for j in 0..n {
                grad_in[i * n + j] += grad_out[j * n + i];
            }
        }
    }
}

#[test]
fn plane_map_gradient() {
    let x = random(&[2, 1, 3, 3], 51);
    let weights = random(&[2, 1, 3, 3], 52);
    let r = grad_check(
        |t, v| {
            let y = t.plane_map(v, Arc::new(Transpose(3)))?;
            let w = t.constant(weights.clone());
            let p = t.mul(y, w)?;
            Ok(t.sum(p))
        },
        &x,
        1e-5,
    );
    assert!(r.max_rel_err < 1e-8, "{r:?}");
    let mut tape = Tape::new();
    let v = tape.leaf(Tensor::zeros(&[2, 4]));
    assert!(tape.plane_map(v, Arc::new(Transpose(3))).is_err());
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let mut store = ParamStore::new();
    let mut t = random(&[3, 4], 61);
    t.data_mut()[0] = 0.1 + 0.2;
    t.data_mut()[1] = f64::MIN_POSITIVE;
    t.data_mut()[2] = -1.0 / 3.0;
    store.insert("w".into(), ParamEntry::from_tensor(&t));
    store.insert("b".into(), ParamEntry::from_tensor(&Tensor::zeros(&[4])));
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("p.json");
    save_params(&store, &path).unwrap();
    let back = load_params(&path).unwrap();
    assert_eq!(back.len(), 2);
    for (k, v) in &store {
        let bits: Vec<u64> = v.data.iter().map(|x| x.to_bits()).collect();
        let back_bits: Vec<u64> = back[k].data.iter().map(|x| x.to_bits()).collect();
        assert_eq!(bits, back_bits);
        assert_eq!(v.shape, back[k].shape);
    }
    store.get_mut("b").unwrap().data[0] = f64::NAN;
    assert!(save_params(&store, &path).is_err());
}
