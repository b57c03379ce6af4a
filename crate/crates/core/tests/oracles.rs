//! Library kernels against the brute-force references in `common`.

mod common;

use std::collections::BTreeSet;
use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use bevseg::attention::feast::{FeastVars, Neighbors};
use bevseg::attention::fps::{fps, key_count};
use bevseg::dataio::{ClassMap, LabeledCloud, Point, PointCloud};
use bevseg::labels::{sparse_labels, LabelGenConfig};
use bevseg::model::metrics::{iou, Confusion};
use bevseg::nn::{Tape, Tensor};
use bevseg::occupancy::traverse_cells_2d;

use common::*;

#[test]
fn traversal_covers_sampled_cells() {
    let cfg = unit_grid(32);
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    for _ in 0..200 {
        let mut p = || (rng.random_range(-4.0..36.0), rng.random_range(-4.0..36.0));
        let (a, b) = (p(), p());
        let truth = sampled_cells(a, b, &cfg, 4000);
        let got: BTreeSet<_> = traverse_cells_2d(a, b, &cfg).into_iter().collect();
        assert!(truth.is_subset(&got), "{a:?} -> {b:?}");
        for &c in got.difference(&truth) {
            assert!(segment_cell_dist(a, b, c, &cfg) < 1e-9, "{a:?} -> {b:?} extra {c:?}");
        }
    }
}

#[test]
fn corner_rays_emit_both_neighbours() {
    let cfg = unit_grid(4);
    let cells = traverse_cells_2d((0.5, 0.5), (2.5, 2.5), &cfg);
    let set: BTreeSet<_> = cells.iter().copied().collect();
    for c in [(0, 0), (1, 1), (2, 2)] {
        assert!(set.contains(&c));
    }
    // the diagonal passes exactly through (1, 1) and (2, 2)
    assert!(set.contains(&(0, 1)) && set.contains(&(1, 0)));
    assert_eq!(cells.len(), set.len());
}

#[test]
fn fps_matches_exhaustive() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for _ in 0..60 {
        let p = rng.random_range(1..=40);
        let c = rng.random_range(2..=8);
        let feats: Vec<f64> = (0..p * c).map(|_| rng.random_range(0..4) as f64 * 0.5).collect();
        let rate = rng.random_range(0.05..=1.0);
        assert_eq!(fps(&feats, c, rate), fps_oracle(&feats, c, key_count(p, rate)));
    }
}

#[test]
fn feast_matches_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    for g in 0..40 {
        let (v, m, cin, cout) = (rng.random_range(1..=6), rng.random_range(1..=3), 3, 2);
        let mut rnd = |n: usize| (0..n).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<f64>>();
        let (x, w, u, c, b) = (rnd(v * cin), rnd(m * cin * cout), rnd(cin * m), rnd(m), rnd(cout));
        let nbrs = if g % 2 == 0 {
            Neighbors::Shared((0..v).step_by(2).collect())
        } else {
            Neighbors::PerNode((0..v).map(|i| (0..=i).collect()).collect())
        };
        let lists: Vec<Vec<usize>> = (0..v).map(|i| nbrs.of(i).to_vec()).collect();
        let (want, _) = feast_oracle(&x, cin, &lists, &w, &u, &c, &b);
        let mut tape = Tape::new();
        let xv = tape.constant(Tensor::new(&[v, cin], x).unwrap());
        let p = FeastVars {
            w: tape.constant(Tensor::new(&[m, cin, cout], w).unwrap()),
            u: tape.constant(Tensor::new(&[cin, m], u).unwrap()),
            c: tape.constant(Tensor::new(&[m], c).unwrap()),
            b: tape.constant(Tensor::new(&[cout], b).unwrap()),
        };
        let y = tape.feast_conv(xv, Rc::new(nbrs), p).unwrap();
        for (a, b) in tape.value(y).data().iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn shared_fast_path_survives_wide_logits() {
    // logit spread beyond the factorised range falls back to per-edge softmax
    let x = vec![0.0, 400.0, -400.0];
    let lists = vec![vec![0, 1, 2]; 3];
    let (w, u, c, b) = (vec![1.0, -1.0], vec![1.0, -1.0], vec![0.0, 0.0], vec![0.1]);
    let (want, _) = feast_oracle(&x, 1, &lists, &w, &u, &c, &b);
    let mut tape = Tape::new();
    let xv = tape.constant(Tensor::new(&[3, 1], x).unwrap());
    let p = FeastVars {
        w: tape.constant(Tensor::new(&[2, 1, 1], w).unwrap()),
        u: tape.constant(Tensor::new(&[1, 2], u).unwrap()),
        c: tape.constant(Tensor::new(&[2], c).unwrap()),
        b: tape.constant(Tensor::new(&[1], b).unwrap()),
    };
    let y = tape.feast_conv(xv, Rc::new(Neighbors::Shared(vec![0, 1, 2])), p).unwrap();
    for (a, b) in tape.value(y).data().iter().zip(&want) {
        assert!(a.is_finite() && (a - b).abs() < 1e-9 * b.abs().max(1.0), "{a} {b}");
    }
}

#[test]
fn sparse_labels_match_histogram_vote() {
    let map = ClassMap::synthetic();
    let cfg = unit_grid(8);
    let lcfg = LabelGenConfig::for_classes(&map);
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    for _ in 0..30 {
        let pts: Vec<(f64, f64, f64, u16)> = (0..rng.random_range(0..150))
            .map(|_| (rng.random_range(0.0..8.0), rng.random_range(0.0..8.0), 0.0, rng.random_range(0..5)))
            .collect();
        let cloud = LabeledCloud::new(
            PointCloud::new(pts.iter().map(|&(x, y, z, _)| Point::new(x, y, z, 0.0)).collect()),
            pts.iter().map(|p| p.3).collect(),
        )
        .unwrap();
        assert_eq!(sparse_labels(&cloud, &cfg, &lcfg).labels, label_oracle(&pts, &cfg, &lcfg));
    }
}

#[test]
fn confusion_iou_matches_counting() {
    let mut rng = ChaCha8Rng::seed_from_u64(24);
    for _ in 0..30 {
        let k = 3;
        let n = 120;
        let pred: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
        let truth: Vec<Option<usize>> = (0..n).map(|_| rng.random_bool(0.7).then(|| rng.random_range(0..k))).collect();
        let mask: Vec<bool> = (0..n).map(|_| rng.random_bool(0.8)).collect();
        let mut c = Confusion::new(k);
        c.add(&pred, &truth, &mask).unwrap();
        assert_eq!(c.per_class_iou(), iou_oracle(&pred, &truth, &mask, k));
        let report = iou(&pred, &truth, &mask, k).unwrap();
        let vals: Vec<f64> = report.per_class.iter().flatten().copied().collect();
        assert!((report.miou - vals.iter().sum::<f64>() / vals.len() as f64).abs() < 1e-15);
    }
}
