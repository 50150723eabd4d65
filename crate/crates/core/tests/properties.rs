use ngsan::attention::{
    attention_weights, instance_norm, multi_head_attention, nsa_attention_weights, AttentionConfig, MhaTensors, NormMode,
};
use ngsan::data::{generate_dataset, read_dataset, recheck_caption, write_dataset};
use ngsan::geometry::{gsa_energy, phi_content_independent, relative_geometry, BoundingBox, DEFAULT_CLAMP};
use ngsan::model::{Model, ModelConfig};
use ngsan::tensor::{matmul, softmax_rows};
use ngsan::train::{lr_at, TrainConfig};
use ngsan::{RngState, Tensor};
use proptest::prelude::*;

fn tensor(shape: Vec<usize>, scale: f64) -> impl Strategy<Value = Tensor> {
    let n = shape.iter().product::<usize>();
    prop::collection::vec(-scale..scale, n).prop_map(move |d| Tensor::new(shape.clone(), d).unwrap())
}

fn matrix(max_rows: usize, max_cols: usize, scale: f64) -> impl Strategy<Value = Tensor> {
    (1..=max_rows, 1..=max_cols).prop_flat_map(move |(r, c)| tensor(vec![r, c], scale))
}

fn boxes(max: usize) -> impl Strategy<Value = Vec<BoundingBox>> {
    prop::collection::vec((0.0..1.0f64, 0.0..1.0f64, 0.02..0.6f64, 0.02..0.6f64), 1..=max)
        .prop_map(|v| v.into_iter().map(|(x, y, w, h)| BoundingBox::new(x, y, w, h).unwrap()).collect())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn matmul_equals_triple_loop(
        (a, b) in (1..6usize, 1..6usize, 1..6usize).prop_flat_map(|(n, k, m)| (tensor(vec![n, k], 3.0), tensor(vec![k, m], 3.0)))
    ) {
        let got = matmul(&a, &b).unwrap();
        let (n, k, m) = (a.rows(), a.cols(), b.cols());
        for i in 0..n {
            for j in 0..m {
                let mut s = 0.0;
                for t in 0..k {
                    s += a.get(&[i, t]) * b.get(&[t, j]);
                }
                prop_assert_eq!(got.get(&[i, j]).to_bits(), s.to_bits());
            }
        }
    }

    #[test]
    fn softmax_rows_normalize_and_commute_with_permutations(x in matrix(5, 7, 30.0), seed in any::<u64>()) {
        let y = softmax_rows(&x);
        let c = x.cols();
        let mut perm: Vec<usize> = (0..c).collect();
        let mut rng = RngState::new(seed);
        for i in (1..c).rev() {
            perm.swap(i, rng.below(i + 1));
        }
        let rows: Vec<Vec<f64>> = (0..x.rows()).map(|i| perm.iter().map(|&j| x.row(i)[j]).collect()).collect();
        let yp = softmax_rows(&Tensor::from_rows(&rows).unwrap());
        for i in 0..x.rows() {
            prop_assert!((y.row(i).iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            for (k, &j) in perm.iter().enumerate() {
                prop_assert!((yp.row(i)[k] - y.row(i)[j]).abs() <= 1e-15);
            }
        }
    }

    #[test]
    fn instance_norm_statistics(x in (1..3usize, 2..8usize, 1..5usize).prop_flat_map(|(b, t, c)| tensor(vec![b, t, c], 4.0))) {
        let eps = 1e-5;
        let y = instance_norm(&x, eps, None).unwrap();
        let (b, t, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        for s in 0..b {
            for ch in 0..c {
                let col = |z: &Tensor| (0..t).map(|i| z.get(&[s, i, ch])).collect::<Vec<f64>>();
                let (xs, ys) = (col(&x), col(&y));
                let mean = |v: &[f64]| v.iter().sum::<f64>() / t as f64;
                let var = |v: &[f64]| { let m = mean(v); v.iter().map(|a| (a - m).powi(2)).sum::<f64>() / t as f64 };
                prop_assert!(mean(&ys).abs() < 1e-10);
                let sx = var(&xs);
                prop_assert!((var(&ys) - sx / (sx + eps)).abs() < 1e-4);
            }
        }
    }

    #[test]
    fn unnormalized_nsa_is_plain_attention(
        (x, wq, wk, wv) in (2..6usize, 1..5usize, 1..4usize).prop_flat_map(|(n, dk, d)| (
            tensor(vec![n, dk], 2.0), tensor(vec![dk, d], 1.0), tensor(vec![dk, d], 1.0), tensor(vec![dk, d], 1.0)
        ))
    ) {
        let mut cfg = AttentionConfig::new(wq.cols(), 1);
        cfg.norm_mode = NormMode::None;
        let nsa = nsa_attention_weights(&x, &wq, &wk, &wv, &cfg, None).unwrap();
        let plain = attention_weights(&matmul(&x, &wq).unwrap(), &matmul(&x, &wk).unwrap(), None, None).unwrap();
        prop_assert_eq!(nsa, plain);
    }

    #[test]
    fn multi_head_attention_is_permutation_equivariant(
        (x, w) in (2..6usize).prop_flat_map(|n| (
            tensor(vec![n, 4], 1.5),
            (tensor(vec![4, 4], 1.0), tensor(vec![4, 4], 1.0), tensor(vec![4, 4], 1.0), tensor(vec![4, 4], 1.0), tensor(vec![4], 0.5)),
        )),
        seed in any::<u64>(),
        normalize in any::<bool>(),
    ) {
        let w = MhaTensors { w_q: w.0, w_k: w.1, w_v: w.2, w_o: w.3, b_o: w.4 };
        let mut cfg = AttentionConfig::new(4, 2);
        cfg.norm_mode = if normalize { NormMode::In } else { NormMode::None };
        let n = x.rows();
        let mut perm: Vec<usize> = (0..n).collect();
        let mut rng = RngState::new(seed);
        for i in (1..n).rev() {
            perm.swap(i, rng.below(i + 1));
        }
        let xp = Tensor::from_rows(&perm.iter().map(|&i| x.row(i).to_vec()).collect::<Vec<_>>()).unwrap();
        let a = multi_head_attention(&x, &x, &cfg, &w, None, None).unwrap();
        let b = multi_head_attention(&xp, &xp, &cfg, &w, None, None).unwrap();
        for (k, &i) in perm.iter().enumerate() {
            for (u, v) in a.row(i).iter().zip(b.row(k)) {
                prop_assert!((u - v).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn relative_geometry_translation_and_scale(
        bx in prop::collection::vec((0..64u32, 0..64u32, 2..32u32, 2..32u32), 1..6),
        tx in -128i32..128, ty in -128i32..128, s in 0.3..3.0f64,
    ) {
        let boxes: Vec<BoundingBox> = bx.iter().map(|&(x, y, w, h)| BoundingBox::new(x as f64 / 64.0, y as f64 / 64.0, w as f64 / 64.0, h as f64 / 64.0).unwrap()).collect();
        let moved: Vec<BoundingBox> = boxes.iter().map(|b| BoundingBox { x: b.x + tx as f64 / 64.0, y: b.y + ty as f64 / 64.0, ..*b }).collect();
        let base = relative_geometry(&boxes, DEFAULT_CLAMP).unwrap();
        prop_assert_eq!(&base, &relative_geometry(&moved, DEFAULT_CLAMP).unwrap());
        let scaled: Vec<BoundingBox> = boxes.iter().map(|b| BoundingBox { x: s * b.x, y: s * b.y, w: s * b.w, h: s * b.h }).collect();
        let sg = relative_geometry(&scaled, DEFAULT_CLAMP).unwrap();
        let n = boxes.len();
        for i in 0..n {
            for j in 0..n {
                let dx = (boxes[i].x - boxes[j].x).abs();
                let dy = (boxes[i].y - boxes[j].y).abs();
                for (c, delta) in [(0, Some(dx)), (1, Some(dy)), (2, None), (3, None)] {
                    // Coincident centers sit on the absolute clamp, which does not scale.
                    if delta == Some(0.0) {
                        continue;
                    }
                    prop_assert!((base.get(&[i, j, c]) - sg.get(&[i, j, c])).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn content_independent_bias_is_nonnegative(
        (g, w) in (1..5usize, 1..6usize).prop_flat_map(|(n, dg)| (tensor(vec![n, n, dg], 3.0), tensor(vec![dg], 3.0)))
    ) {
        prop_assert!(phi_content_independent(&g, &w).unwrap().data().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn energy_is_additive_in_the_bias(
        (q, k, phi) in (1..5usize, 1..4usize).prop_flat_map(|(n, d)| (tensor(vec![n, d], 2.0), tensor(vec![n, d], 2.0), tensor(vec![n, n], 2.0))),
        delta in -3.0..3.0f64, pick in any::<prop::sample::Index>(),
    ) {
        let e = gsa_energy(&q, &k, &phi).unwrap();
        let at = pick.index(phi.len());
        let mut bumped = phi.clone();
        bumped.data_mut()[at] += delta;
        let e2 = gsa_energy(&q, &k, &bumped).unwrap();
        for (idx, (a, b)) in e.data().iter().zip(e2.data()).enumerate() {
            if idx == at {
                prop_assert!((b - a - delta).abs() < 1e-12);
            } else {
                prop_assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }

    #[test]
    fn row_constant_bias_shift_leaves_weights(
        (q, k, phi, shift) in (1..5usize, 1..5usize, 1..4usize).prop_flat_map(|(n, m, d)| (
            tensor(vec![n, d], 2.0), tensor(vec![m, d], 2.0), tensor(vec![n, m], 2.0), prop::collection::vec(-20.0..20.0f64, n)
        ))
    ) {
        let a = attention_weights(&q, &k, None, Some(&phi)).unwrap();
        let mut moved = phi.clone();
        let m = phi.cols();
        for (i, s) in shift.iter().enumerate() {
            for v in &mut moved.data_mut()[i * m..(i + 1) * m] {
                *v += s;
            }
        }
        let b = attention_weights(&q, &k, None, Some(&moved)).unwrap();
        prop_assert!(a.max_abs_diff(&b) <= 1e-12);
    }

    #[test]
    fn schedule_is_monotone_after_warmup(t in 3usize..40) {
        let cfg = TrainConfig::default();
        let (a, b) = (lr_at(t, &cfg).unwrap(), lr_at(t + 1, &cfg).unwrap());
        prop_assert!(b <= a);
        if t > 6 && (t - 6) % 3 != 0 {
            prop_assert_eq!(a, b);
        }
    }

    #[test]
    fn datasets_are_seeded_and_consistent(seed in any::<u64>(), count in 1usize..12, n_max in 2usize..7) {
        let (a, vocab) = generate_dataset(count, n_max, &mut RngState::new(seed)).unwrap();
        let (b, _) = generate_dataset(count, n_max, &mut RngState::new(seed)).unwrap();
        prop_assert_eq!(&a, &b);
        for ex in &a {
            prop_assert!((2..=n_max).contains(&ex.objects()));
            prop_assert!(recheck_caption(ex, &vocab).is_ok());
            prop_assert!(ex.caption.iter().all(|&t| t < vocab.len()));
        }
    }

    #[test]
    fn model_init_is_seeded(seed in 0u64..1000) {
        let cfg = ModelConfig::toy(16, 2, 32, 1);
        prop_assert_eq!(Model::new(cfg.clone(), seed).unwrap().params, Model::new(cfg, seed).unwrap().params);
    }

    #[test]
    fn relative_geometry_is_finite(b in boxes(6)) {
        prop_assert!(relative_geometry(&b, DEFAULT_CLAMP).unwrap().all_finite());
    }
}

#[test]
fn dataset_files_round_trip_exactly() {
    let (scenes, vocab) = generate_dataset(10, 5, &mut RngState::new(42)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_dataset(dir.path(), &scenes, &vocab).unwrap();
    let (back, v2) = read_dataset(dir.path()).unwrap();
    assert_eq!(back, scenes);
    assert_eq!(v2, vocab);
}
