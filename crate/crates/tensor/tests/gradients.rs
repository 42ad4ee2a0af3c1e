use exa_tensor::gradcheck::{max_relative_error, op_suite, random_tensor, DEFAULT_STEP};
use exa_tensor::{OpKind, Tape, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn every_op_passes_over_ten_seeds() {
    for seed in 0..10 {
        for r in op_suite(seed, None).unwrap() {
            assert!(r.passed, "{} seed {}: rel err {:e}", r.name, r.seed, r.max_rel_err);
        }
    }
}

#[test]
fn sign_flip_in_any_rule_is_detected() {
    for kind in OpKind::ALL {
        if kind == OpKind::Leaf {
            continue;
        }
        let results = op_suite(3, Some(kind)).unwrap();
        assert!(
            results.iter().any(|r| !r.passed),
            "flipping {} went unnoticed",
            kind.name()
        );
    }
}

#[test]
fn composed_block_gradients() {
    // attention on layer-normed projections, the shape of an encoder layer
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let inputs: Vec<Tensor<f64>> = [vec![5, 8], vec![8, 8], vec![8], vec![8]]
        .iter()
        .map(|s| random_tensor(&mut rng, s, 0.8))
        .collect();
    let err = max_relative_error(&inputs, DEFAULT_STEP, None, |t, v| {
        let n = t.layer_norm(v[0], v[2], v[3], 1e-5)?;
        let q = t.matmul(n, v[1])?;
        let a = t.attention(q, n, n, 2)?;
        let r = t.add(a, v[0])?;
        let s = t.silu(r);
        let sq = t.mul(s, s)?;
        Ok(t.mean(sq))
    })
    .unwrap();
    assert!(err < 1e-4, "{err:e}");
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(v in prop::collection::vec(-30.0f64..30.0, 12)) {
        let mut tp = Tape::<f64>::new();
        let x = tp.constant(Tensor::new([3usize, 4], v).unwrap());
        let y = tp.softmax(x, 1).unwrap();
        for row in tp.value(y).data().chunks(4) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn matmul_is_associative(a in prop::collection::vec(-2.0f64..2.0, 6),
                             b in prop::collection::vec(-2.0f64..2.0, 6),
                             c in prop::collection::vec(-2.0f64..2.0, 3)) {
        let mut tp = Tape::<f64>::new();
        let a = tp.constant(Tensor::new([3usize, 2], a).unwrap());
        let b = tp.constant(Tensor::new([2usize, 3], b).unwrap());
        let c = tp.constant(Tensor::new([3usize, 1], c).unwrap());
        let ab = tp.matmul(a, b).unwrap();
        let l = tp.matmul(ab, c).unwrap();
        let bc = tp.matmul(b, c).unwrap();
        let r = tp.matmul(a, bc).unwrap();
        for (x, y) in tp.value(l).data().iter().zip(tp.value(r).data()) {
            prop_assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn layer_norm_output_has_zero_mean(v in prop::collection::vec(-5.0f64..5.0, 6)) {
        let spread = v.iter().cloned().fold(f64::MIN, f64::max) - v.iter().cloned().fold(f64::MAX, f64::min);
        prop_assume!(spread > 1e-3);
        let mut tp = Tape::<f64>::new();
        let x = tp.constant(Tensor::new([1usize, 6], v).unwrap());
        let g = tp.constant(Tensor::ones([6usize]));
        let b = tp.constant(Tensor::zeros([6usize]));
        let y = tp.layer_norm(x, g, b, 1e-9).unwrap();
        let m: f64 = tp.value(y).data().iter().sum::<f64>() / 6.0;
        prop_assert!(m.abs() < 1e-9);
    }

    #[test]
    fn checkpoint_round_trips(dims in prop::collection::vec(0usize..4, 0..4), name in "[a-z._0-9]{0,12}") {
        let n: usize = dims.iter().product();
        let t = Tensor::new(dims.clone(), (0..n).map(|i| i as f32 * 0.5 - 1.0).collect()).unwrap();
        let recs = vec![(name, t)];
        let back = exa_tensor::checkpoint::decode(&exa_tensor::checkpoint::encode(&recs), "mem").unwrap();
        prop_assert_eq!(back, recs);
    }
}
