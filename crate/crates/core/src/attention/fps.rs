//! Farthest point selection in feature space.

/// Number of keys selected from `p` nodes at `rate`.
pub fn key_count(p: usize, rate: f64) -> usize {
    if p == 0 {
        return 0;
    }
    ((rate * p as f64).round() as usize).clamp(1, p)
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Farthest-first traversal of the rows of `feats` (`p` rows of width
/// `c`) starting from row 0. Distance ties go to the lowest index and
/// no row is selected twice.
pub fn fps(feats: &[f64], c: usize, rate: f64) -> Vec<usize> {
    let p = if c == 0 { 0 } else { feats.len() / c };
    let k = key_count(p, rate);
    if k == 0 {
        return Vec::new();
    }
    let row = |i: usize| &feats[i * c..(i + 1) * c];
    let mut keys = Vec::with_capacity(k);
    keys.push(0);
    // selected rows hold -1 so they never win again
    let mut nearest: Vec<f64> = (0..p).map(|i| dist2(row(i), row(0))).collect();
    nearest[0] = -1.0;
    while keys.len() < k {
        let mut best = 0;
        let mut best_d = f64::NEG_INFINITY;
        for (i, &d) in nearest.iter().enumerate() {
            if d > best_d {
                best_d = d;
                best = i;
            }
        }
        keys.push(best);
        nearest[best] = -1.0;
        let b = row(best).to_vec();
        for (i, n) in nearest.iter_mut().enumerate() {
            *n = n.min(dist2(row(i), &b));
        }
    }
    keys
}
