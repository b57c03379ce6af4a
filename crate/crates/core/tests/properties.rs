//! Invariants over random inputs.

mod common;

use std::rc::Rc;

use proptest::prelude::*;

use bevseg::attention::fps::{fps, key_count};
use bevseg::augment::{sample_params, AugmentConfig};
use bevseg::dataio::{parse_point_cloud, Point, PointCloud, Pose};
use bevseg::labels::SemanticGrid;
use bevseg::model::loss::SegLossConfig;
use bevseg::model::{init_params, pfn_forward, ModelConfig};
use bevseg::nn::{checkpoint, Ctx, Mode, Tape, Tensor};
use bevseg::occupancy::{observability, traverse_cells_2d};
use bevseg::pillars::{GridConfig, AUG_CHANNELS};

fn dist(a: [f64; 3], b: [f64; 3]) -> f64 {
    a.iter().zip(&b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn point() -> impl Strategy<Value = (f64, f64, f64)> {
    (-30.0..30.0f64, -30.0..30.0f64, -3.0..3.0f64)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn augmentation_is_a_similarity(seed in any::<u64>(), a in point(), b in point(), translate in any::<bool>()) {
        let cfg = AugmentConfig { translate, ..AugmentConfig::default() };
        let p = sample_params(&cfg, seed);
        let (a, b) = ([a.0, a.1, a.2], [b.0, b.1, b.2]);
        let d = dist(p.apply(a), p.apply(b));
        prop_assert!((d - p.scale * dist(a, b)).abs() < 1e-9);
        prop_assert!(p.scale >= 0.95 && p.scale <= 1.05);
        prop_assert!(p.translation.iter().zip(&cfg.translate_std).all(|(t, s)| t.abs() <= cfg.translate_clip * s));
    }

    #[test]
    fn disabled_augmentation_is_identity(seed in any::<u64>(), a in point()) {
        let p = sample_params(&AugmentConfig::disabled(), seed);
        let a = [a.0, a.1, a.2];
        prop_assert_eq!(p.apply(a), a);
    }

    #[test]
    fn traversal_is_eight_connected(ax in -5.0..30.0f64, ay in -5.0..30.0f64, bx in -5.0..30.0f64, by in -5.0..30.0f64) {
        let cfg = common::unit_grid(25);
        let cells = traverse_cells_2d((ax, ay), (bx, by), &cfg);
        for w in cells.windows(2) {
            prop_assert!(w[0].0.abs_diff(w[1].0) <= 1 && w[0].1.abs_diff(w[1].1) <= 1, "{:?}", w);
        }
        if let (Some(s), Some(e)) = (cfg.cell_of(ax, ay), cfg.cell_of(bx, by)) {
            prop_assert_eq!(cells.first(), Some(&s));
            prop_assert!(cells.contains(&e));
        }
    }

    #[test]
    fn observability_grows_with_points(pts in prop::collection::vec(point(), 1..60), split in 0usize..60) {
        let cfg = GridConfig::toy();
        let cloud = PointCloud::new(pts.iter().map(|&(x, y, z)| Point::new(x, y, z.clamp(-2.4, 1.4), 0.0)).collect());
        let sub = PointCloud::new(cloud.points[..split.min(pts.len())].to_vec());
        let (a, b) = (observability(&sub, &cfg, [0.0; 3]), observability(&cloud, &cfg, [0.0; 3]));
        prop_assert!(a.counts.iter().zip(&b.counts).all(|(x, y)| x <= y));
        let norm = b.normalized();
        prop_assert!(norm.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn fps_keys_are_distinct(feats in prop::collection::vec(-2.0..2.0f64, 3..120), rate in 0.01..1.0f64) {
        let c = 3;
        let feats = &feats[..feats.len() / c * c];
        let keys = fps(feats, c, rate);
        let mut sorted = keys.clone();
        sorted.sort_unstable();
        sorted.dedup();
        prop_assert_eq!(sorted.len(), keys.len());
        prop_assert_eq!(keys.len(), key_count(feats.len() / c, rate));
        prop_assert_eq!(keys.first(), Some(&0));
    }

    #[test]
    fn seg_loss_ignores_channel_shift(vals in prop::collection::vec(-5.0..5.0f64, 3 * 4), shift in -50.0..50.0f64) {
        let targets = vec![Some(0), None, Some(2), Some(1)];
        let cfg = SegLossConfig::uniform(3);
        let loss = |v: Vec<f64>| {
            let mut tape = Tape::new();
            let l = tape.constant(Tensor::new(&[3, 2, 2], v).unwrap());
            let out = tape.seg_loss(l, &targets, &cfg).unwrap();
            tape.value(out).item()
        };
        let a = loss(vals.clone());
        let b = loss(vals.iter().map(|v| v + shift).collect());
        prop_assert!(a >= 0.0);
        prop_assert!((a - b).abs() < 1e-9);
    }

    #[test]
    fn pfn_is_order_free(rows in prop::collection::vec(-3.0..3.0f64, AUG_CHANNELS..AUG_CHANNELS * 12), rot in 0usize..12) {
        let n = rows.len() / AUG_CHANNELS;
        let rows = &rows[..n * AUG_CHANNELS];
        let params = init_params(&ModelConfig::toy(4), 1);
        let run = |data: Vec<f64>, n: usize| {
            let mut tape = Tape::new();
            let mut ctx = Ctx::new(&mut tape, &params, Mode::Infer, false);
            let x = ctx.tape.constant(Tensor::new(&[n, AUG_CHANNELS], data).unwrap());
            let y = pfn_forward(&mut ctx, x, Rc::new(vec![0, n])).unwrap();
            tape.value(y).data().to_vec()
        };
        let mut rotated: Vec<f64> = rows.chunks(AUG_CHANNELS).cycle().skip(rot % n).take(n).flatten().copied().collect();
        rotated.extend_from_slice(&rows[..AUG_CHANNELS]);
        prop_assert_eq!(run(rows.to_vec(), n), run(rotated, n + 1));
    }

    #[test]
    fn bin_roundtrip_at_f32(pts in prop::collection::vec((point(), 0.0..1.0f64), 0..40)) {
        let cloud = PointCloud::new(pts.iter().map(|&((x, y, z), r)| Point::new(x, y, z, r)).collect());
        let back = parse_point_cloud(&cloud.to_bin()).unwrap();
        prop_assert_eq!(back.len(), cloud.len());
        for (a, b) in cloud.points.iter().zip(&back.points) {
            prop_assert_eq!(a.x as f32, b.x as f32);
            prop_assert_eq!(a.r as f32, b.r as f32);
        }
    }

    #[test]
    fn pose_inverse_composes_to_identity(yaw in -3.2..3.2f64, t in point(), p in point()) {
        let pose = Pose::from_yaw(yaw, [t.0, t.1, t.2]);
        let p = [p.0, p.1, p.2];
        let q = pose.inverse().apply(pose.apply(p));
        prop_assert!(dist(p, q) < 1e-9);
        prop_assert!(pose.compose(&pose.inverse()).orthonormality_error() < 1e-12);
    }

    #[test]
    fn semantic_grid_raw_roundtrip(labels in prop::collection::vec(0u16..5, 16)) {
        let mut g = SemanticGrid::filled(4, 4, 0, 0);
        g.labels = labels;
        let back = SemanticGrid::from_raw(&g.to_raw(), 0).unwrap();
        prop_assert_eq!(back.labels, g.labels);
    }
}

#[test]
fn checkpoint_roundtrip_is_f32_exact() {
    let params = init_params(&ModelConfig::toy(4), 5);
    let bytes = checkpoint::encode(&params, "meta line");
    let (back, meta) = checkpoint::decode(&bytes).unwrap();
    assert_eq!(meta, "meta line");
    assert_eq!(back.len(), params.len());
    for (name, kind, t) in params.iter() {
        let b = back.get(name).unwrap();
        assert_eq!(back.kind(name), Some(kind));
        assert!(t.data().iter().zip(b.data()).all(|(x, y)| (*x as f32) as f64 == *y));
    }
    assert_eq!(checkpoint::encode(&back, "meta line"), bytes);
    assert!(checkpoint::decode(&bytes[..bytes.len() - 1]).is_err());
}
