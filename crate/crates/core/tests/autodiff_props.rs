use proptest::prelude::*;

use vibmark::autodiff::{grad_check, load_params, save_params, ParamEntry, ParamStore, Tape, Tensor};

const H: f64 = 1e-5;
const REL: f64 = 1e-4;

fn values(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-2.0f64..2.0, n)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn smooth_chain_matches_central_differences(x in values(6)) {
        let t = Tensor::new(vec![6], x).unwrap();
        let r = grad_check(
            |tape, v| {
                let s = tape.sigmoid(v);
                let e = tape.exp(s);
                let p = tape.mul(e, v)?;
                let l = tape.add_scalar(s, 0.5);
                let l = tape.log(l);
                let q = tape.sub(p, l)?;
                Ok(tape.mean(q))
            },
            &t,
            H,
        );
        prop_assert!(r.max_rel_err < REL, "{}", r.max_rel_err);
    }

    #[test]
    fn matmul_matches_central_differences(a in values(6), b in values(12)) {
        let w = Tensor::new(vec![3, 4], b).unwrap();
        let r = grad_check(
            |tape, v| {
                let w = tape.constant(w.clone());
                let y = tape.matmul(v, w)?;
                let y = tape.sigmoid(y);
                Ok(tape.sum(y))
            },
            &Tensor::new(vec![2, 3], a).unwrap(),
            H,
        );
        prop_assert!(r.max_rel_err < REL, "{}", r.max_rel_err);
    }

    #[test]
    fn conv_matches_central_differences(img in values(2 * 5 * 5), k in values(3 * 2 * 9)) {
        let weight = Tensor::new(vec![3, 2, 3, 3], k).unwrap();
        let r = grad_check(
            |tape, v| {
                let w = tape.constant(weight.clone());
                let y = tape.conv2d(v, w)?;
                let y = tape.sigmoid(y);
                Ok(tape.mean(y))
            },
            &Tensor::new(vec![1, 2, 5, 5], img).unwrap(),
            H,
        );
        prop_assert!(r.max_rel_err < REL, "{}", r.max_rel_err);
    }

    #[test]
    fn kinked_ops_match_away_from_kinks(x in prop::collection::vec(prop_oneof![-2.0f64..-0.05, 0.05f64..0.95, 1.05f64..2.0], 8)) {
        let t = Tensor::new(vec![8], x).unwrap();
        let r = grad_check(
            |tape, v| {
                let a = tape.relu(v);
                let b = tape.clip(v, 0.0, 1.0);
                let p = tape.mul(a, b)?;
                let q = tape.mul(p, v)?;
                Ok(tape.sum(q))
            },
            &t,
            H,
        );
        prop_assert!(r.kink_margin > 1e-3);
        prop_assert!(r.max_rel_err < REL, "{}", r.max_rel_err);
    }

    #[test]
    fn gradients_accumulate_over_reuse(x in values(5)) {
        let mut tape = Tape::new();
        let v = tape.leaf(Tensor::new(vec![5], x.clone()).unwrap().with_grad());
        let a = tape.sum(v);
        let b = tape.sum(v);
        let s = tape.add(a, b).unwrap();
        tape.backward(s).unwrap();
        prop_assert_eq!(tape.grad(v).unwrap(), &[2.0; 5][..]);
    }

    #[test]
    fn checkpoint_round_trips_bitwise(data in prop::collection::vec(any::<f64>().prop_filter("finite", |v| v.is_finite()), 1..40)) {
        let n = data.len();
        let mut store = ParamStore::new();
        store.insert("w".into(), ParamEntry { shape: vec![n], data: data.clone() });
        store.insert("b".into(), ParamEntry { shape: vec![1, 1], data: vec![data[0]] });
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.json");
        save_params(&store, &path).unwrap();
        let back = load_params(&path).unwrap();
        let bits = |s: &ParamStore| s.values().flat_map(|e| e.data.iter().map(|v| v.to_bits())).collect::<Vec<_>>();
        prop_assert_eq!(bits(&back), bits(&store));
        prop_assert_eq!(back, store);
    }
}

#[test]
fn non_finite_parameters_are_not_saved() {
    let mut store = ParamStore::new();
    store.insert("w".into(), ParamEntry { shape: vec![2], data: vec![1.0, f64::NAN] });
    let dir = tempfile::tempdir().unwrap();
    assert!(save_params(&store, &dir.path().join("p.json")).is_err());
}
