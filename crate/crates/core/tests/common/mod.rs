//! Brute-force reference implementations shared by the integration and
//! acceptance tests.
#![allow(dead_code)]

use std::collections::BTreeSet;

use bevseg::labels::LabelGenConfig;
use bevseg::pillars::GridConfig;

/// Unit-cell grid of `n x n` cells starting at the origin.
pub fn unit_grid(n: usize) -> GridConfig {
    GridConfig {
        x_range: (0.0, n as f64),
        y_range: (0.0, n as f64),
        z_range: (-10.0, 10.0),
        pillar_size: [1.0, 1.0, 20.0],
        max_points: 32,
        max_pillars: n * n,
    }
}

/// Cells hit by `samples` evenly spaced points of the segment.
pub fn sampled_cells(a: (f64, f64), b: (f64, f64), cfg: &GridConfig, samples: usize) -> BTreeSet<(usize, usize)> {
    (0..samples)
        .filter_map(|k| {
            let t = k as f64 / (samples - 1) as f64;
            cfg.cell_of(a.0 + t * (b.0 - a.0), a.1 + t * (b.1 - a.1))
        })
        .collect()
}

fn point_box_dist(p: (f64, f64), lo: (f64, f64), hi: (f64, f64)) -> f64 {
    let dx = (lo.0 - p.0).max(0.0).max(p.0 - hi.0);
    let dy = (lo.1 - p.1).max(0.0).max(p.1 - hi.1);
    dx.hypot(dy)
}

fn point_segment_dist(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let l2 = dx * dx + dy * dy;
    let t = if l2 == 0.0 { 0.0 } else { (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / l2).clamp(0.0, 1.0) };
    (p.0 - a.0 - t * dx).hypot(p.1 - a.1 - t * dy)
}

/// Liang-Barsky test of the segment against the closed box.
fn segment_hits_box(a: (f64, f64), b: (f64, f64), lo: (f64, f64), hi: (f64, f64)) -> bool {
    let (mut t0, mut t1) = (0.0f64, 1.0f64);
    for (p, d, l, h) in [(a.0, b.0 - a.0, lo.0, hi.0), (a.1, b.1 - a.1, lo.1, hi.1)] {
        if d == 0.0 {
            if p < l || p > h {
                return false;
            }
        } else {
            let (mut ta, mut tb) = ((l - p) / d, (h - p) / d);
            if ta > tb {
                std::mem::swap(&mut ta, &mut tb);
            }
            t0 = t0.max(ta);
            t1 = t1.min(tb);
        }
    }
    t0 <= t1
}

/// Distance from the segment to the closed cell `(r, c)` of a unit grid.
pub fn segment_cell_dist(a: (f64, f64), b: (f64, f64), cell: (usize, usize), cfg: &GridConfig) -> f64 {
    let sx = cfg.pillar_size[0];
    let sy = cfg.pillar_size[1];
    let lo = (cfg.x_range.0 + cell.0 as f64 * sx, cfg.y_range.0 + cell.1 as f64 * sy);
    let hi = (lo.0 + sx, lo.1 + sy);
    if segment_hits_box(a, b, lo, hi) {
        return 0.0;
    }
    let corners = [lo, (lo.0, hi.1), (hi.0, lo.1), hi];
    let mut d = point_box_dist(a, lo, hi).min(point_box_dist(b, lo, hi));
    for c in corners {
        d = d.min(point_segment_dist(c, a, b));
    }
    d
}

/// Farthest-first selection recomputing every minimum distance from
/// scratch.
pub fn fps_oracle(feats: &[f64], c: usize, k: usize) -> Vec<usize> {
    let p = feats.len() / c;
    let row = |i: usize| &feats[i * c..(i + 1) * c];
    let d2 = |i: usize, j: usize| -> f64 { row(i).iter().zip(row(j)).map(|(x, y)| (x - y) * (x - y)).sum() };
    let mut sel = vec![0usize];
    while sel.len() < k {
        let mut best: Option<(usize, f64)> = None;
        for i in 0..p {
            if sel.contains(&i) {
                continue;
            }
            let m = sel.iter().map(|&s| d2(i, s)).fold(f64::INFINITY, f64::min);
            if best.is_none_or(|(_, bd)| m > bd) {
                best = Some((i, m));
            }
        }
        sel.push(best.expect("unselected row").0);
    }
    sel
}

/// FeaSt layer with explicit loops: `y_i = b + 1/|N_i| sum_j sum_m
/// q_m(i, j) W_m^T x_j` with `q = softmax_m(u_m . (x_j - x_i) + c_m)`.
/// `w` is `(M, in, out)` and `u` is `(in, M)`, row-major.
pub fn feast_oracle(
    x: &[f64],
    cin: usize,
    nbrs: &[Vec<usize>],
    w: &[f64],
    u: &[f64],
    c: &[f64],
    b: &[f64],
) -> (Vec<f64>, Vec<Vec<f64>>) {
    let m = c.len();
    let cout = b.len();
    let v = nbrs.len();
    let mut y = vec![0.0; v * cout];
    let mut qs = Vec::new();
    for i in 0..v {
        for o in 0..cout {
            y[i * cout + o] = b[o];
        }
        for &j in &nbrs[i] {
            let mut logits = vec![0.0; m];
            for h in 0..m {
                let mut s = c[h];
                for k in 0..cin {
                    s += u[k * m + h] * (x[j * cin + k] - x[i * cin + k]);
                }
                logits[h] = s;
            }
            let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
            let z: f64 = e.iter().sum();
            let q: Vec<f64> = e.iter().map(|v| v / z).collect();
            for h in 0..m {
                for o in 0..cout {
                    let mut s = 0.0;
                    for k in 0..cin {
                        s += w[(h * cin + k) * cout + o] * x[j * cin + k];
                    }
                    y[i * cout + o] += q[h] * s / nbrs[i].len() as f64;
                }
            }
            qs.push(q);
        }
    }
    (y, qs)
}

/// Histogram plus weighted argmax per cell, ties to the lowest class,
/// empty or zero-score cells unlabeled.
pub fn label_oracle(points: &[(f64, f64, f64, u16)], cfg: &GridConfig, lcfg: &LabelGenConfig) -> Vec<u16> {
    let k = lcfg.num_classes();
    let mut hist = vec![vec![0u32; k]; cfg.num_cells()];
    for &(x, y, z, class) in points {
        if cfg.contains(x, y, z) {
            let (r, c) = cfg.cell_of(x, y).unwrap();
            hist[r * cfg.cols() + c][class as usize] += 1;
        }
    }
    hist.iter()
        .map(|h| {
            let mut best = lcfg.unlabeled;
            let mut best_s = 0.0;
            for (class, &n) in h.iter().enumerate() {
                let s = n as f64 * lcfg.weights[class];
                if s > best_s {
                    best_s = s;
                    best = class as u16;
                }
            }
            best
        })
        .collect()
}

/// Per-class `TP / (TP + FP + FN)` by direct counting.
pub fn iou_oracle(pred: &[usize], truth: &[Option<usize>], mask: &[bool], k: usize) -> Vec<Option<f64>> {
    (0..k)
        .map(|c| {
            let (mut tp, mut fp, mut fnn) = (0u64, 0u64, 0u64);
            for i in 0..pred.len() {
                let Some(t) = truth[i] else { continue };
                if !mask[i] {
                    continue;
                }
                match (pred[i] == c, t == c) {
                    (true, true) => tp += 1,
                    (true, false) => fp += 1,
                    (false, true) => fnn += 1,
                    _ => {}
                }
            }
            let d = tp + fp + fnn;
            (d > 0).then(|| tp as f64 / d as f64)
        })
        .collect()
}
