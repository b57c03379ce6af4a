//! Cropping, rasterization and encoding of point clouds into pillars.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::FlatConfig;
use crate::dataio::PointCloud;
use crate::nn::Tensor;
use crate::{Error, Result};

/// Raw point channels `(x, y, z, r)`.
pub const RAW_CHANNELS: usize = 4;
/// Raw channels plus offsets to the pillar mean and to the cell center.
pub const AUG_CHANNELS: usize = 10;

/// Crop volume and top-view rasterization. Rows run along x, columns
/// along y; cells are half-open `[min, min + d)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GridConfig {
    pub x_range: (f64, f64),
    pub y_range: (f64, f64),
    pub z_range: (f64, f64),
    pub pillar_size: [f64; 3],
    pub max_points: usize,
    pub max_pillars: usize,
}

fn whole_multiple(extent: f64, step: f64) -> bool {
    let q = extent / step;
    q >= 1.0 - 1e-9 && (q - q.round()).abs() < 1e-6
}

impl GridConfig {
    /// SemanticKITTI-scale segmentation grid.
    pub fn full() -> Self {
        Self {
            x_range: (-50.0, 50.0),
            y_range: (-25.0, 25.0),
            z_range: (-2.5, 1.5),
            pillar_size: [0.1, 0.1, 4.0],
            max_points: 20,
            max_pillars: 30000,
        }
    }

    /// 64x64 grid used for synthetic training.
    pub fn toy() -> Self {
        Self {
            x_range: (-12.8, 12.8),
            y_range: (-12.8, 12.8),
            z_range: (-2.5, 1.5),
            pillar_size: [0.4, 0.4, 4.0],
            max_points: 16,
            max_pillars: 4096,
        }
    }

    /// Reads `<prefix>x_range`, `y_range`, `z_range`, `pillar_size`,
    /// `max_points` and `max_pillars`, falling back to `base`.
    pub fn from_config(cfg: &FlatConfig, prefix: &str, base: &GridConfig) -> Result<Self> {
        let key = |k: &str| format!("{prefix}{k}");
        let g = Self {
            x_range: cfg.pair_or(&key("x_range"), base.x_range)?,
            y_range: cfg.pair_or(&key("y_range"), base.y_range)?,
            z_range: cfg.pair_or(&key("z_range"), base.z_range)?,
            pillar_size: cfg.triple_or(&key("pillar_size"), base.pillar_size)?,
            max_points: cfg.parse_or(&key("max_points"), base.max_points)?,
            max_pillars: cfg.parse_or(&key("max_pillars"), base.max_pillars)?,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        let axes = [("x", self.x_range), ("y", self.y_range), ("z", self.z_range)];
        for (i, (name, (lo, hi))) in axes.iter().enumerate() {
            if !(lo.is_finite() && hi.is_finite() && hi > lo) {
                return Err(Error::Config(format!("{name}_range must satisfy min < max, got ({lo}, {hi})")));
            }
            let d = self.pillar_size[i];
            if !(d.is_finite() && d > 0.0) {
                return Err(Error::Config(format!("pillar size along {name} must be positive, got {d}")));
            }
            if i < 2 && !whole_multiple(hi - lo, d) {
                return Err(Error::Config(format!(
                    "{name} extent {} is not a whole multiple of pillar size {d}",
                    hi - lo
                )));
            }
        }
        if self.max_points == 0 || self.max_pillars == 0 {
            return Err(Error::Config("max_points and max_pillars must be at least 1".into()));
        }
        Ok(())
    }

    pub fn rows(&self) -> usize {
        ((self.x_range.1 - self.x_range.0) / self.pillar_size[0]).round() as usize
    }

    pub fn cols(&self) -> usize {
        ((self.y_range.1 - self.y_range.0) / self.pillar_size[1]).round() as usize
    }

    /// Voxel layers along z (at least one).
    pub fn depth(&self) -> usize {
        (((self.z_range.1 - self.z_range.0) / self.pillar_size[2]).round() as usize).max(1)
    }

    pub fn num_cells(&self) -> usize {
        self.rows() * self.cols()
    }

    pub fn contains(&self, x: f64, y: f64, z: f64) -> bool {
        self.cell_of(x, y).is_some() && z >= self.z_range.0 && z < self.z_range.1
    }

    /// Cell of a top-view position, `None` outside the x/y extent.
    pub fn cell_of(&self, x: f64, y: f64) -> Option<(usize, usize)> {
        let r = ((x - self.x_range.0) / self.pillar_size[0]).floor();
        let c = ((y - self.y_range.0) / self.pillar_size[1]).floor();
        if r >= 0.0 && c >= 0.0 && (r as usize) < self.rows() && (c as usize) < self.cols() {
            Some((r as usize, c as usize))
        } else {
            None
        }
    }

    pub fn voxel_of(&self, x: f64, y: f64, z: f64) -> Option<(usize, usize, usize)> {
        let (r, c) = self.cell_of(x, y)?;
        let k = ((z - self.z_range.0) / self.pillar_size[2]).floor();
        if k >= 0.0 && (k as usize) < self.depth() {
            Some((r, c, k as usize))
        } else {
            None
        }
    }

    pub fn cell_center(&self, row: usize, col: usize) -> (f64, f64) {
        (
            self.x_range.0 + (row as f64 + 0.5) * self.pillar_size[0],
            self.y_range.0 + (col as f64 + 0.5) * self.pillar_size[1],
        )
    }

    pub fn z_center(&self) -> f64 {
        0.5 * (self.z_range.0 + self.z_range.1)
    }
}

/// Pillar tensor `(P, N, C)`. Valid pillars occupy the leading rows in
/// row-major cell order and valid points the leading slots of each row.
#[derive(Debug, Clone, PartialEq)]
pub struct PillarSet {
    pub features: Tensor,
    /// Grid cell of each valid pillar.
    pub coords: Vec<(usize, usize)>,
    /// Valid points per pillar slot (length `P`).
    pub valid_points: Vec<usize>,
    /// Source point index of every valid slot, pillar by pillar.
    pub sources: Vec<Vec<usize>>,
}

impl PillarSet {
    pub fn capacity(&self) -> usize {
        self.features.dim(0)
    }

    pub fn max_points(&self) -> usize {
        self.features.dim(1)
    }

    pub fn channels(&self) -> usize {
        self.features.dim(2)
    }

    pub fn valid_pillars(&self) -> usize {
        self.coords.len()
    }

    /// Feature rows of valid slots as `(sum of valid points, C)`, pillar by pillar.
    pub fn valid_rows(&self) -> Tensor {
        let (n, c) = (self.max_points(), self.channels());
        let mut data = Vec::new();
        for (p, &k) in self.valid_points.iter().enumerate().take(self.valid_pillars()) {
            let base = p * n * c;
            data.extend_from_slice(&self.features.data()[base..base + k * c]);
        }
        let rows = data.len() / c.max(1);
        Tensor::new(&[rows, c], data).expect("consistent row count")
    }

    /// Row offsets of each valid pillar inside [`PillarSet::valid_rows`].
    pub fn row_offsets(&self) -> Vec<usize> {
        let mut off = Vec::with_capacity(self.valid_pillars() + 1);
        off.push(0);
        for &k in &self.valid_points[..self.valid_pillars()] {
            off.push(off.last().unwrap() + k);
        }
        off
    }

    /// `(x, y, z)` centers of the valid pillars.
    pub fn centers(&self, cfg: &GridConfig) -> Vec<[f64; 3]> {
        let zc = cfg.z_center();
        self.coords
            .iter()
            .map(|&(r, c)| {
                let (x, y) = cfg.cell_center(r, c);
                [x, y, zc]
            })
            .collect()
    }
}

/// Crops `cloud` to the grid and groups the surviving points by cell.
pub fn pillarize(cloud: &PointCloud, cfg: &GridConfig, rng_seed: u64) -> PillarSet {
    let (rows, cols) = (cfg.rows(), cfg.cols());
    let mut by_cell: Vec<(usize, usize)> = cloud
        .points
        .iter()
        .enumerate()
        .filter(|(_, p)| cfg.contains(p.x, p.y, p.z))
        .map(|(i, p)| {
            let (r, c) = cfg.cell_of(p.x, p.y).expect("contained");
            (r * cols + c, i)
        })
        .collect();
    by_cell.sort_unstable();
    let mut groups: Vec<(usize, Vec<usize>)> = Vec::new();
    for (cell, i) in by_cell {
        match groups.last_mut() {
            Some((c, pts)) if *c == cell => pts.push(i),
            _ => groups.push((cell, vec![i])),
        }
    }
    debug_assert!(groups.iter().all(|(c, _)| *c < rows * cols));

    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let (p_max, n_max) = (cfg.max_pillars, cfg.max_points);
    if groups.len() > p_max {
        let mut keep = sample(&mut rng, groups.len(), p_max).into_vec();
        keep.sort_unstable();
        let mut all: Vec<Option<(usize, Vec<usize>)>> = groups.into_iter().map(Some).collect();
        groups = keep.into_iter().map(|k| all[k].take().unwrap()).collect();
    }
    let mut features = vec![0.0; p_max * n_max * RAW_CHANNELS];
    let mut coords = Vec::with_capacity(groups.len());
    let mut valid_points = vec![0; p_max];
    let mut sources = Vec::with_capacity(groups.len());
    for (slot, (cell, mut pts)) in groups.into_iter().enumerate() {
        if pts.len() > n_max {
            let mut keep = sample(&mut rng, pts.len(), n_max).into_vec();
            keep.sort_unstable();
            pts = keep.into_iter().map(|k| pts[k]).collect();
        }
        for (j, &i) in pts.iter().enumerate() {
            let p = &cloud.points[i];
            let base = (slot * n_max + j) * RAW_CHANNELS;
            features[base..base + RAW_CHANNELS].copy_from_slice(&[p.x, p.y, p.z, p.r]);
        }
        coords.push((cell / cols, cell % cols));
        valid_points[slot] = pts.len();
        sources.push(pts);
    }
    PillarSet {
        features: Tensor::new(&[p_max, n_max, RAW_CHANNELS], features).expect("sized above"),
        coords,
        valid_points,
        sources,
    }
}

/// Appends offsets to the pillar's valid-point mean and to its cell center.
pub fn augment_points(set: &PillarSet, cfg: &GridConfig) -> Result<PillarSet> {
    if set.channels() != RAW_CHANNELS {
        return Err(Error::Invalid(format!(
            "augment_points expects {RAW_CHANNELS} raw channels, got {}",
            set.channels()
        )));
    }
    let (p_max, n_max) = (set.capacity(), set.max_points());
    let src = set.features.data();
    let mut out = vec![0.0; p_max * n_max * AUG_CHANNELS];
    let zc = cfg.z_center();
    for (slot, &(r, c)) in set.coords.iter().enumerate() {
        let k = set.valid_points[slot];
        if k == 0 {
            continue;
        }
        let mut mean = [0.0; 3];
        for j in 0..k {
            let b = (slot * n_max + j) * RAW_CHANNELS;
            for a in 0..3 {
                mean[a] += src[b + a];
            }
        }
        mean.iter_mut().for_each(|m| *m /= k as f64);
        let (cx, cy) = cfg.cell_center(r, c);
        let center = [cx, cy, zc];
        for j in 0..k {
            let b = (slot * n_max + j) * RAW_CHANNELS;
            let o = (slot * n_max + j) * AUG_CHANNELS;
            out[o..o + 4].copy_from_slice(&src[b..b + 4]);
            for a in 0..3 {
                out[o + 4 + a] = src[b + a] - mean[a];
                out[o + 7 + a] = src[b + a] - center[a];
            }
        }
    }
    Ok(PillarSet {
        features: Tensor::new(&[p_max, n_max, AUG_CHANNELS], out)?,
        coords: set.coords.clone(),
        valid_points: set.valid_points.clone(),
        sources: set.sources.clone(),
    })
}

/// Top-view pseudo image `(C, H, W)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoImage {
    pub data: Tensor,
}

impl PseudoImage {
    pub fn channels(&self) -> usize {
        self.data.dim(0)
    }

    pub fn height(&self) -> usize {
        self.data.dim(1)
    }

    pub fn width(&self) -> usize {
        self.data.dim(2)
    }
}

/// Writes row `i` of `features` to the cell of valid pillar `i`.
/// Rows past the valid pillars are ignored.
pub fn scatter(features: &Tensor, set: &PillarSet, cfg: &GridConfig) -> Result<PseudoImage> {
    if features.ndim() != 2 || features.dim(0) < set.valid_pillars() {
        return Err(Error::Shape {
            op: "scatter",
            left: features.shape().to_vec(),
            right: vec![set.valid_pillars()],
        });
    }
    let (h, w, c) = (cfg.rows(), cfg.cols(), features.dim(1));
    let mut data = vec![0.0; c * h * w];
    for (i, &(r, col)) in set.coords.iter().enumerate() {
        assert!(r < h && col < w, "pillar ({r}, {col}) outside {h}x{w} grid");
        for ch in 0..c {
            data[(ch * h + r) * w + col] = features.data()[i * c + ch];
        }
    }
    Ok(PseudoImage {
        data: Tensor::new(&[c, h, w], data)?,
    })
}

/// Reads the feature vector at each valid pillar's cell: `(valid, C)`.
pub fn gather(image: &PseudoImage, set: &PillarSet) -> Tensor {
    let (c, h, w) = (image.channels(), image.height(), image.width());
    let mut data = Vec::with_capacity(set.valid_pillars() * c);
    for &(r, col) in &set.coords {
        for ch in 0..c {
            data.push(image.data.data()[(ch * h + r) * w + col]);
        }
    }
    Tensor::new(&[set.valid_pillars(), c], data).expect("sized above")
}
