use std::sync::Arc;

use exa_core::dataset::{build_dataset, DatasetConfig, Sample};
use exa_core::model::check::tiny_config;
use exa_core::model::decode::decode_boxes;
use exa_core::model::loss::{detection_loss, Targets};
use exa_core::model::network::{aggregate, decode, encode, extract_features, forward, reference_decoder, select_top, Geometry, StageTrace};
use exa_core::model::{train, ModelConfig, Params, TrainConfig, TrainState, CLASSES, HEAD_FIELDS};
use exa_tensor::{Tape, Tensor, Var};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small_dataset(cfg: &ModelConfig, scenes: usize, seed: u64) -> Vec<Sample> {
    let dc = DatasetConfig {
        scenes,
        crops_per_image: 2,
        k: cfg.k as u32,
        input_size: cfg.input_size,
        ..DatasetConfig::default()
    };
    build_dataset(&dc, seed).unwrap()
}

fn random_image(cfg: &ModelConfig, seed: u64) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..3 * cfg.input_size * cfg.input_size).map(|_| rng.gen()).collect()
}

fn rope_rows(t: &Arc<[f64]>, rows: usize, order: &[usize]) -> Arc<[f64]> {
    let w = t.len() / rows;
    order.iter().flat_map(|&i| t[i * w..(i + 1) * w].iter().copied()).collect()
}

#[test]
fn encoder_is_permutation_equivariant() {
    let cfg = tiny_config();
    let geo = Geometry::new(&cfg).unwrap();
    let params = Params::init(&cfg, 3).unwrap();
    let mut tape = Tape::<f64>::new();
    let p = params.load(&mut tape, false);
    let y = extract_features(&mut tape, &p, &cfg, &random_image(&cfg, 1)).unwrap();
    let n = tape.shape(y)[0];
    let rope: Arc<[f64]> = geo.rope_in.factors.iter().copied().collect();
    let z = encode(&mut tape, &p, &cfg, y, &rope).unwrap();

    let mut order: Vec<usize> = (0..n).collect();
    order.reverse();
    order.swap(0, n / 2);
    let yp = tape.gather_rows(y, &order).unwrap();
    let zp = encode(&mut tape, &p, &cfg, yp, &rope_rows(&rope, n, &order)).unwrap();
    let (z, zp) = (tape.value(z).data().to_vec(), tape.value(zp).data().to_vec());
    let d = cfg.d;
    for (new, &old) in order.iter().enumerate() {
        for c in 0..d {
            let (a, b) = (zp[new * d + c], z[old * d + c]);
            assert!((a - b).abs() < 1e-10, "token {old} channel {c}: {a} vs {b}");
        }
    }
}

#[test]
fn single_scale_full_retention_matches_dense_decoder() {
    let cfg = ModelConfig {
        scales: vec![1],
        mu: 100.0,
        ..tiny_config()
    };
    let geo = Geometry::new(&cfg).unwrap();
    for seed in 0..5 {
        let params = Params::init(&cfg, seed).unwrap();
        let mut tape = Tape::<f32>::new();
        let p = params.load(&mut tape, false);
        let rope: Arc<[f32]> = geo.rope_in.factors.iter().map(|&v| v as f32).collect();
        let y = extract_features(&mut tape, &p, &cfg, &random_image(&cfg, seed)).unwrap();
        let z = encode(&mut tape, &p, &cfg, y, &rope).unwrap();
        let (sel, active, _) = decode(&mut tape, &p, &cfg, &geo, z, &rope).unwrap();
        let dense = reference_decoder(&mut tape, &p, &cfg, &geo, z, &rope).unwrap();
        assert!(active.iter().all(|&a| a));
        let (a, b) = (tape.value(sel).data(), tape.value(dense).data());
        assert_eq!(a.len(), b.len());
        assert!(a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}

#[test]
fn every_parameter_moves_after_one_step_at_full_retention() {
    let cfg = ModelConfig {
        mu: 100.0,
        ..tiny_config()
    };
    let samples = small_dataset(&cfg, 2, 4);
    let params = Params::init(&cfg, 0).unwrap();
    let tcfg = TrainConfig {
        epochs: 1,
        batch_size: 4,
        max_steps: Some(1),
        ..TrainConfig::default()
    };
    let before = params.clone();
    let after = train(&cfg, &tcfg, &samples, 0, TrainState::new(params), &mut Vec::new(), &mut |_, _| Ok(())).unwrap();
    assert_eq!(after.step, 1);
    for ((name, a), b) in before.names().iter().zip(before.tensors()).zip(after.params.tensors()) {
        assert_ne!(a.data(), b.data(), "{name} did not change");
    }
}

#[test]
fn heads_are_separated() {
    let cfg = tiny_config();
    let geo = Geometry::new(&cfg).unwrap();
    let params = Params::init(&cfg, 1).unwrap();
    for (own, other) in [("in", "out"), ("out", "in")] {
        let mut tape = Tape::<f64>::new();
        let p = params.load(&mut tape, true);
        let fwd = forward(&mut tape, &p, &cfg, &geo, &random_image(&cfg, 2)).unwrap();
        let head = if own == "in" { fwd.in_head } else { fwd.out_head };
        let sq = tape.mul(head, head).unwrap();
        let loss = tape.sum(sq);
        tape.backward(loss).unwrap();
        for (name, &v) in params.names().iter().zip(&p.vars) {
            let g = tape.grad(v).map(|g| g.iter().any(|&x| x != 0.0)).unwrap_or(false);
            if name.starts_with(&format!("head.{other}.")) {
                assert!(!g, "{name} received gradient from the {own} head");
            }
            if name.starts_with(&format!("head.{own}.")) {
                assert!(g, "{name} received no gradient");
            }
        }
    }
}

#[test]
fn loss_parts_sum_to_total() {
    let cfg = tiny_config();
    let geo = Geometry::new(&cfg).unwrap();
    let samples = small_dataset(&cfg, 3, 9);
    let params = Params::init(&cfg, 2).unwrap();
    for s in &samples {
        let targets = Targets::build(&cfg, &geo, &s.meta).unwrap();
        let mut tape = Tape::<f64>::new();
        let p = params.load(&mut tape, false);
        let fwd = forward(&mut tape, &p, &cfg, &geo, &s.image.to_chw()).unwrap();
        let (loss, parts) = detection_loss(&mut tape, &cfg, &geo, &fwd, &targets).unwrap();
        let w = &cfg.loss;
        let expect = w.heatmap * parts.heatmap + w.offset * parts.offset + w.size * parts.size + w.score * parts.score;
        assert!((parts.total - expect).abs() < 1e-9 * expect.abs().max(1.0));
        assert_eq!(tape.value(loss).item(), parts.total);
        assert!(parts.heatmap > 0.0 && parts.offset >= 0.0 && parts.size >= 0.0 && parts.score > 0.0);
    }
}

#[test]
fn perfect_logits_give_small_focal_loss() {
    // Heads emitting the target distribution exactly, except at peaks, have
    // near-zero focal loss; flipping their sign raises it sharply.
    let cfg = tiny_config();
    let geo = Geometry::new(&cfg).unwrap();
    let s = &small_dataset(&cfg, 1, 3)[0];
    let targets = Targets::build(&cfg, &geo, &s.meta).unwrap();
    let logits = |heat: &[f64], sign: f64| -> Vec<f64> {
        let rows = heat.len() / CLASSES;
        let mut out = vec![0.0; rows * CLASSES * HEAD_FIELDS];
        for r in 0..rows {
            for k in 0..CLASSES {
                let y = heat[r * CLASSES + k];
                out[(r * CLASSES + k) * HEAD_FIELDS] = sign * if y >= 1.0 { 12.0 } else { -12.0 };
            }
        }
        out
    };
    let focal = |sign: f64| {
        let mut tape = Tape::<f64>::new();
        let mut total = 0.0;
        for t in [&targets.inner, &targets.outer] {
            let rows = t.heatmap.len() / CLASSES;
            let h = tape.constant(Tensor::new([rows, CLASSES * HEAD_FIELDS], logits(&t.heatmap, sign)).unwrap());
            let idx: Vec<usize> = (0..rows * CLASSES).map(|i| i * HEAD_FIELDS).collect();
            let l = tape.gather_elems(h, &idx).unwrap();
            let target: Vec<f64> = t.heatmap.clone();
            let f = tape.focal_loss(l, &target, cfg.focal_alpha, cfg.focal_beta).unwrap();
            total += tape.value(f).item();
        }
        total
    };
    assert!(focal(1.0) < 1e-3);
    assert!(focal(-1.0) > 10.0);
}

#[test]
fn decoded_box_arithmetic() {
    let cfg = tiny_config();
    let geo = Geometry::new(&cfg).unwrap();
    let w = CLASSES * HEAD_FIELDS;
    let mut in_head = vec![-20.0f32; geo.in_cells.len() * w];
    let mut out_head = vec![-20.0f32; geo.out_cells.len() * w];
    let row = 3;
    let cell = geo.out_cells[row];
    out_head[row * w] = 2.0;
    out_head[row * w + 1] = 0.0;
    out_head[row * w + 2] = (0.25f32 / 0.75).ln();
    out_head[row * w + 3] = 20.0f32.ln();
    out_head[row * w + 4] = 10.0f32.ln();
    let in_row = 0;
    in_head[in_row * w + HEAD_FIELDS] = 0.0;
    let active = vec![true; geo.out_cells.len()];
    let p = decode_boxes(&cfg, &geo, &in_head, &out_head, &active);
    assert_eq!(p.boxes.len(), 2);
    let face = &p.boxes[0];
    let side = geo.grid.side();
    let s = cfg.stride as f64;
    assert!((face.cx - ((cell % side) as f64 + 0.5) * s).abs() < 1e-5);
    assert!((face.cy - ((cell / side) as f64 + 0.25) * s).abs() < 1e-5);
    assert!((face.w - 20.0).abs() < 1e-4 && (face.h - 10.0).abs() < 1e-4);
    assert!((face.score - 1.0 / (1.0 + (-2.0f64).exp())).abs() < 1e-6);

    let mut inactive = active.clone();
    inactive[row] = false;
    let p = decode_boxes(&cfg, &geo, &in_head, &out_head, &inactive);
    assert_eq!(p.boxes.len(), 1, "outside peaks need an active cell");
}

#[test]
fn aggregation_covers_exactly_the_refined_cells() {
    let cfg = ModelConfig {
        mu: 25.0,
        ..tiny_config()
    };
    let geo = Geometry::new(&cfg).unwrap();
    let params = Params::init(&cfg, 5).unwrap();
    let mut tape = Tape::<f64>::new();
    let p = params.load(&mut tape, false);
    let fwd = forward(&mut tape, &p, &cfg, &geo, &random_image(&cfg, 7)).unwrap();
    let coarse = &fwd.stages[0];
    let fine = &fwd.stages[1];
    assert_eq!(coarse.kept.len() * 4, fine.cells.len());
    let refined = fwd.active.iter().filter(|&&a| a).count();
    assert_eq!(refined, fine.cells.len());
    let (out, active) = aggregate(&mut tape, &p, &geo, &fwd.stages).unwrap();
    assert_eq!(active, fwd.active);
    assert_eq!(tape.value(out).data(), tape.value(fwd.y_out).data());
    // Dropping the coarse stage leaves zeros at unrefined cells.
    let only_fine: Vec<StageTrace> = vec![StageTrace {
        scale: 1,
        cells: fine.cells.clone(),
        output: fine.output,
        score: None,
        kept: vec![],
    }];
    let (sparse, _) = aggregate(&mut tape, &p, &geo, &only_fine).unwrap();
    let v = tape.value(sparse).data();
    for (row, &a) in active.iter().enumerate() {
        let nonzero = v[row * cfg.d..(row + 1) * cfg.d].iter().any(|&x| x != 0.0);
        assert_eq!(nonzero, a);
    }
}

#[test]
fn training_is_reproducible_and_resumes_exactly() {
    let cfg = tiny_config();
    let samples = small_dataset(&cfg, 4, 1);
    let tcfg = TrainConfig {
        epochs: 2,
        batch_size: 3,
        ..TrainConfig::default()
    };
    let run = |state: TrainState, t: &TrainConfig| {
        train(&cfg, t, &samples, 11, state, &mut Vec::new(), &mut |_, _| Ok(())).unwrap()
    };
    let full = run(TrainState::new(Params::init(&cfg, 0).unwrap()), &tcfg);
    let again = run(TrainState::new(Params::init(&cfg, 0).unwrap()), &tcfg);
    assert_eq!(full.records(), again.records());

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("half.exat");
    let partial = TrainConfig {
        max_steps: Some(4),
        ..tcfg.clone()
    };
    let half = run(TrainState::new(Params::init(&cfg, 0).unwrap()), &partial);
    assert_eq!(half.step, 4);
    half.save(&path).unwrap();
    let resumed = run(TrainState::load(&cfg, &path).unwrap(), &tcfg);
    assert_eq!(resumed.step, full.step);
    assert_eq!(resumed.records(), full.records());
}

#[test]
fn checkpoint_bytes_are_deterministic() {
    let cfg = tiny_config();
    let dir = tempfile::tempdir().unwrap();
    let st = TrainState::new(Params::init(&cfg, 4).unwrap());
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    st.save(&a).unwrap();
    st.save(&b).unwrap();
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    assert_eq!(TrainState::load(&cfg, &a).unwrap().records(), st.records());
}

fn cells_and_scores() -> impl Strategy<Value = (Vec<f64>, Vec<usize>, f64)> {
    (1usize..40).prop_flat_map(|n| {
        (
            proptest::collection::vec(prop_oneof![Just(0.0), Just(1.0), -3.0..3.0f64], n),
            Just((0..n).map(|i| i * 3 + 1).collect::<Vec<usize>>()),
            1.0..=100.0f64,
        )
    })
}

proptest! {
    #[test]
    fn selection_ignores_token_order((scores, cells, mu) in cells_and_scores(), seed in any::<u64>()) {
        let kept = select_top(&scores, &cells, mu);
        let mut perm: Vec<usize> = (0..scores.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for i in (1..perm.len()).rev() {
            perm.swap(i, rng.gen_range(0..=i));
        }
        let s2: Vec<f64> = perm.iter().map(|&i| scores[i]).collect();
        let c2: Vec<usize> = perm.iter().map(|&i| cells[i]).collect();
        let mut a: Vec<usize> = kept.iter().map(|&k| cells[k]).collect();
        let mut b: Vec<usize> = select_top(&s2, &c2, mu).iter().map(|&k| c2[k]).collect();
        a.sort_unstable();
        b.sort_unstable();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn selection_keeps_the_best(( scores, cells, mu) in cells_and_scores()) {
        let kept = select_top(&scores, &cells, mu);
        let worst_kept = kept.iter().map(|&k| scores[k]).fold(f64::INFINITY, f64::min);
        for i in 0..scores.len() {
            if !kept.contains(&i) {
                prop_assert!(scores[i] <= worst_kept);
            }
        }
    }
}

#[test]
fn forward_is_finite_on_a_zero_image() {
    let cfg = ModelConfig::default();
    let geo = Geometry::new(&cfg).unwrap();
    let params = Params::init(&cfg, 0).unwrap();
    let mut tape = Tape::<f32>::new();
    let p = params.load(&mut tape, false);
    let fwd = forward(&mut tape, &p, &cfg, &geo, &vec![0.0; 3 * cfg.input_size * cfg.input_size]).unwrap();
    let all: Vec<Var> = vec![fwd.in_head, fwd.out_head];
    for v in all {
        assert!(tape.value(v).data().iter().all(|x| x.is_finite()));
    }
}
