//! One-dimensional PCA embedding of pillar positions.

/// Relative spread below which the covariance counts as isotropic.
const ISOTROPY_TOL: f64 = 1e-12;

/// Leading unit eigenvector of the symmetric matrix `[[a, b], [b, c]]`
/// and its eigenvalue. An isotropic matrix yields the x axis.
pub fn leading_eigenvector(a: f64, b: f64, c: f64) -> ([f64; 2], f64) {
    let half_gap = ((0.5 * (a - c)).powi(2) + b * b).sqrt();
    let lambda = 0.5 * (a + c) + half_gap;
    let scale = a.abs() + c.abs() + b.abs();
    if half_gap <= ISOTROPY_TOL * scale.max(f64::MIN_POSITIVE) {
        return ([1.0, 0.0], lambda);
    }
    // pick the better conditioned of the two equivalent forms
    let v = if a >= c { [lambda - c, b] } else { [b, lambda - a] };
    let n = (v[0] * v[0] + v[1] * v[1]).sqrt();
    let mut v = [v[0] / n, v[1] / n];
    if v[1].abs() > v[0].abs() {
        if v[1] < 0.0 {
            v = [-v[0], -v[1]];
        }
    } else if v[0] < 0.0 {
        v = [-v[0], -v[1]];
    }
    (v, lambda)
}

/// Population covariance `(var_x, cov_xy, var_y)` and mean.
pub fn covariance(points: &[[f64; 2]]) -> ([f64; 3], [f64; 2]) {
    let n = points.len().max(1) as f64;
    let mean = [
        points.iter().map(|p| p[0]).sum::<f64>() / n,
        points.iter().map(|p| p[1]).sum::<f64>() / n,
    ];
    let mut cov = [0.0; 3];
    for p in points {
        let (dx, dy) = (p[0] - mean[0], p[1] - mean[1]);
        cov[0] += dx * dx;
        cov[1] += dx * dy;
        cov[2] += dy * dy;
    }
    cov.iter_mut().for_each(|v| *v /= n);
    (cov, mean)
}

/// Projection of the mean-centered positions onto the leading principal
/// axis. The axis sign makes its largest-magnitude loading positive.
pub fn pca_1d(points: &[[f64; 2]]) -> Vec<f64> {
    if points.len() <= 1 {
        return vec![0.0; points.len()];
    }
    let (cov, mean) = covariance(points);
    let (v, _) = leading_eigenvector(cov[0], cov[1], cov[2]);
    points
        .iter()
        .map(|p| (p[0] - mean[0]) * v[0] + (p[1] - mean[1]) * v[1])
        .collect()
}

/// Indices sorted by score; equal scores keep their input order.
pub fn sort_order(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    idx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn collinear_along_x() {
        let s = pca_1d(&[[1.0, 2.0], [3.0, 2.0], [5.0, 2.0]]);
        assert_eq!(s, vec![-2.0, 0.0, 2.0]);
    }

    #[test]
    fn isotropic_breaks_toward_x() {
        let s = pca_1d(&[[1.0, 0.0], [-1.0, 0.0], [0.0, 1.0], [0.0, -1.0]]);
        assert_eq!(s, vec![1.0, -1.0, 0.0, 0.0]);
    }

    #[test]
    fn sign_convention() {
        // along y, reversed input order still gives a positive loading on y
        let s = pca_1d(&[[0.0, 3.0], [0.0, 1.0]]);
        assert_eq!(s, vec![1.0, -1.0]);
        let (v, _) = leading_eigenvector(2.0, -0.5, 1.0);
        assert!(v[0] > 0.0 && v[1] < 0.0);
    }

    #[test]
    fn single_point_scores_zero() {
        assert_eq!(pca_1d(&[[4.0, 5.0]]), vec![0.0]);
        assert!(pca_1d(&[]).is_empty());
    }

    #[test]
    fn stable_ties() {
        assert_eq!(sort_order(&[1.0, 0.0, 1.0, 0.0]), vec![1, 3, 0, 2]);
    }
}
