//! Top-view ground truth: weighted-argmax sparse labels and multi-frame
//! densification with static points from nearby poses.

use crate::config::FlatConfig;
use crate::dataio::{ClassMap, LabeledCloud, Point, PointCloud, Pose};
use crate::par;
use crate::pillars::GridConfig;
use crate::{Error, Result};

/// Label weight of the movable classes in the default configuration.
pub const MOVABLE_WEIGHT: f64 = 5.0;

#[derive(Debug, Clone, PartialEq)]
pub struct LabelGenConfig {
    /// Weight per merged class; the unlabeled class always weighs 0.
    pub weights: Vec<f64>,
    pub unlabeled: u16,
    /// Classes imported from nearby frames.
    pub static_classes: Vec<u16>,
    /// Fixed pose-distance threshold; `None` uses twice the farthest
    /// point range of the current frame.
    pub pose_threshold: Option<f64>,
}

impl LabelGenConfig {
    /// Weight 1 for static classes, [`MOVABLE_WEIGHT`] for the others.
    pub fn for_classes(map: &ClassMap) -> Self {
        let weights = (0..map.num_classes() as u16)
            .map(|k| {
                if k == map.unlabeled_index() {
                    0.0
                } else if map.static_classes().contains(&k) {
                    1.0
                } else {
                    MOVABLE_WEIGHT
                }
            })
            .collect();
        Self {
            weights,
            unlabeled: map.unlabeled_index(),
            static_classes: map.static_classes().to_vec(),
            pose_threshold: None,
        }
    }

    /// Overrides from `labels.weight.<class>` and `labels.pose_threshold`.
    pub fn from_config(cfg: &FlatConfig, map: &ClassMap) -> Result<Self> {
        let mut l = Self::for_classes(map);
        for (i, name) in map.names().iter().enumerate() {
            l.weights[i] = cfg.parse_or(&format!("labels.weight.{name}"), l.weights[i])?;
        }
        if let Some(v) = cfg.get("labels.pose_threshold") {
            l.pose_threshold = Some(v.parse().map_err(|_| Error::Config(format!("bad pose threshold `{v}`")))?);
        }
        l.validate()?;
        Ok(l)
    }

    pub fn num_classes(&self) -> usize {
        self.weights.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::Config("label weights must be finite and non-negative".into()));
        }
        match self.weights.get(self.unlabeled as usize) {
            Some(&w) if w == 0.0 => {}
            _ => return Err(Error::Config("the unlabeled class must have weight 0".into())),
        }
        if let Some(d) = self.pose_threshold {
            if !(d > 0.0) {
                return Err(Error::Config(format!("pose threshold must be positive, got {d}")));
            }
        }
        Ok(())
    }
}

/// H x W class map with optional per-cell class histograms.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SemanticGrid {
    pub rows: usize,
    pub cols: usize,
    pub labels: Vec<u16>,
    /// Row-major `(rows, cols, K)` point counts.
    pub histograms: Option<Vec<u32>>,
    pub unlabeled: u16,
}

impl SemanticGrid {
    pub fn filled(rows: usize, cols: usize, label: u16, unlabeled: u16) -> Self {
        Self {
            rows,
            cols,
            labels: vec![label; rows * cols],
            histograms: None,
            unlabeled,
        }
    }

    pub fn get(&self, r: usize, c: usize) -> u16 {
        self.labels[r * self.cols + c]
    }

    pub fn is_labeled(&self, i: usize) -> bool {
        self.labels[i] != self.unlabeled
    }

    pub fn labeled_cells(&self) -> usize {
        (0..self.labels.len()).filter(|&i| self.is_labeled(i)).count()
    }

    /// `u32` rows, `u32` cols, then row-major `u16` labels, little-endian.
    pub fn to_raw(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + 2 * self.labels.len());
        out.extend_from_slice(&(self.rows as u32).to_le_bytes());
        out.extend_from_slice(&(self.cols as u32).to_le_bytes());
        for &l in &self.labels {
            out.extend_from_slice(&l.to_le_bytes());
        }
        out
    }

    pub fn from_raw(bytes: &[u8], unlabeled: u16) -> Result<Self> {
        if bytes.len() < 8 {
            return Err(Error::Format("label dump shorter than its header".into()));
        }
        let rows = u32::from_le_bytes(bytes[0..4].try_into().unwrap()) as usize;
        let cols = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let body = &bytes[8..];
        if Some(body.len()) != rows.checked_mul(cols).and_then(|n| n.checked_mul(2)) {
            return Err(Error::Format(format!(
                "label dump holds {} bytes for a {rows}x{cols} grid",
                body.len()
            )));
        }
        let labels = body.chunks_exact(2).map(|c| u16::from_le_bytes([c[0], c[1]])).collect();
        Ok(Self {
            rows,
            cols,
            labels,
            histograms: None,
            unlabeled,
        })
    }
}

/// Weighted argmax of one histogram; ties go to the lowest class and an
/// all-zero score is unlabeled.
pub fn weighted_argmax(hist: &[u32], weights: &[f64], unlabeled: u16) -> u16 {
    let mut best = unlabeled;
    let mut best_score = 0.0;
    for (k, (&n, &w)) in hist.iter().zip(weights).enumerate() {
        let s = w * n as f64;
        if s > best_score {
            best_score = s;
            best = k as u16;
        }
    }
    best
}

fn histogram(points: &[(Point, u16)], cfg: &GridConfig, k: usize) -> Vec<u32> {
    let cols = cfg.cols();
    par::chunked_fold(
        points,
        4096,
        || vec![0u32; cfg.num_cells() * k],
        |acc, (p, class)| {
            if (*class as usize) < k && cfg.contains(p.x, p.y, p.z) {
                let (r, c) = cfg.cell_of(p.x, p.y).expect("contained");
                acc[(r * cols + c) * k + *class as usize] += 1;
            }
        },
        |out, part| out.iter_mut().zip(part).for_each(|(o, p)| *o += p),
    )
}

fn grid_from_histogram(hist: Vec<u32>, cfg: &GridConfig, lcfg: &LabelGenConfig) -> SemanticGrid {
    let k = lcfg.num_classes();
    let labels = hist
        .chunks(k)
        .map(|h| weighted_argmax(h, &lcfg.weights, lcfg.unlabeled))
        .collect();
    SemanticGrid {
        rows: cfg.rows(),
        cols: cfg.cols(),
        labels,
        histograms: Some(hist),
        unlabeled: lcfg.unlabeled,
    }
}

fn zip_points(cloud: &LabeledCloud) -> Vec<(Point, u16)> {
    cloud.cloud.points.iter().copied().zip(cloud.classes.iter().copied()).collect()
}

/// Per-cell weighted argmax of the class histogram of `cloud`.
pub fn sparse_labels(cloud: &LabeledCloud, cfg: &GridConfig, lcfg: &LabelGenConfig) -> SemanticGrid {
    let hist = histogram(&zip_points(cloud), cfg, lcfg.num_classes());
    grid_from_histogram(hist, cfg, lcfg)
}

/// Farthest point range of a cloud in its own sensor frame.
pub fn max_range(cloud: &PointCloud) -> f64 {
    cloud
        .points
        .iter()
        .map(|p| (p.x * p.x + p.y * p.y + p.z * p.z).sqrt())
        .fold(0.0, f64::max)
}

/// Frames whose pose lies closer to frame `current` than the threshold.
pub fn nearby_frames(current: usize, poses: &[Pose], threshold: f64) -> Vec<usize> {
    (0..poses.len())
        .filter(|&j| j != current && poses[j].distance_to(&poses[current]) < threshold)
        .collect()
}

/// Frame `current` plus the static points of nearby frames, expressed in
/// the current sensor frame. `poses[i]` maps frame `i` into the shared
/// reference.
pub fn merged_cloud(current: usize, clouds: &[LabeledCloud], poses: &[Pose], lcfg: &LabelGenConfig) -> Result<LabeledCloud> {
    if current >= clouds.len() {
        return Err(Error::Invalid(format!("frame {current} out of {} frames", clouds.len())));
    }
    if poses.len() < clouds.len() {
        return Err(Error::Invalid(format!(
            "{} poses for {} frames; frame {} has no pose",
            poses.len(),
            clouds.len(),
            poses.len()
        )));
    }
    let threshold = lcfg
        .pose_threshold
        .unwrap_or_else(|| 2.0 * max_range(&clouds[current].cloud));
    let to_current = poses[current].inverse();
    let mut points = clouds[current].cloud.points.clone();
    let mut classes = clouds[current].classes.clone();
    for j in nearby_frames(current, &poses[..clouds.len()], threshold) {
        let t = to_current.compose(&poses[j]);
        for (p, &class) in clouds[j].cloud.points.iter().zip(&clouds[j].classes) {
            if lcfg.static_classes.contains(&class) {
                let [x, y, z] = t.apply(p.xyz());
                points.push(Point::new(x, y, z, p.r));
                classes.push(class);
            }
        }
    }
    LabeledCloud::new(PointCloud::new(points), classes)
}

/// Labels of the merged cloud of frame `current`.
pub fn densify(
    current: usize,
    clouds: &[LabeledCloud],
    poses: &[Pose],
    cfg: &GridConfig,
    lcfg: &LabelGenConfig,
) -> Result<SemanticGrid> {
    let merged = merged_cloud(current, clouds, poses, lcfg)?;
    Ok(sparse_labels(&merged, cfg, lcfg))
}
