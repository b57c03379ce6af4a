//! Ray casting from the sensor: 2D observability counts, 3D voxel
//! visibility and uniform noise injection.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataio::{LabeledCloud, Point, PointCloud};
use crate::par;
use crate::pillars::GridConfig;
use crate::{Error, Result};

/// Parametric tie tolerance when a segment crosses a cell corner.
const CORNER_TOL: f64 = 1e-12;
const RAY_CHUNK: usize = 2048;

/// Clips the segment `a -> b` to the box `[lo, hi]` per axis. Returns
/// the parameter interval that stays inside.
fn clip<const D: usize>(a: [f64; D], b: [f64; D], lo: [f64; D], hi: [f64; D]) -> Option<(f64, f64)> {
    let (mut t0, mut t1) = (0.0f64, 1.0f64);
    for k in 0..D {
        let d = b[k] - a[k];
        if d == 0.0 {
            if a[k] < lo[k] || a[k] > hi[k] {
                return None;
            }
            continue;
        }
        let (mut ta, mut tb) = ((lo[k] - a[k]) / d, (hi[k] - a[k]) / d);
        if ta > tb {
            std::mem::swap(&mut ta, &mut tb);
        }
        t0 = t0.max(ta);
        t1 = t1.min(tb);
        if t0 > t1 {
            return None;
        }
    }
    Some((t0, t1))
}

fn lerp<const D: usize>(a: [f64; D], b: [f64; D], t: f64) -> [f64; D] {
    std::array::from_fn(|k| if t == 0.0 { a[k] } else if t == 1.0 { b[k] } else { a[k] + t * (b[k] - a[k]) })
}

/// Per-axis stepping state of an incremental grid walk.
struct Axis {
    step: isize,
    t_max: f64,
    t_delta: f64,
}

impl Axis {
    /// `u` is the start coordinate in cell units, `du` the segment extent.
    fn new(u: f64, du: f64, cell: usize) -> Self {
        if du > 0.0 {
            Axis {
                step: 1,
                t_max: ((cell + 1) as f64 - u) / du,
                t_delta: 1.0 / du,
            }
        } else if du < 0.0 {
            Axis {
                step: -1,
                t_max: (u - cell as f64) / -du,
                t_delta: -1.0 / du,
            }
        } else {
            Axis {
                step: 0,
                t_max: f64::INFINITY,
                t_delta: f64::INFINITY,
            }
        }
    }
}

fn cell_index(u: f64, n: usize) -> usize {
    (u.floor().max(0.0) as usize).min(n - 1)
}

/// Cells of the top-view grid met by the segment `origin -> endpoint`,
/// in traversal order. The segment is clipped to the grid extent first;
/// a segment that misses the grid yields no cells. When the segment
/// passes through a cell corner both diagonal neighbours are included.
pub fn traverse_cells_2d(origin: (f64, f64), endpoint: (f64, f64), cfg: &GridConfig) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    traverse_into(origin, endpoint, cfg, &mut out);
    out
}

fn traverse_into(origin: (f64, f64), endpoint: (f64, f64), cfg: &GridConfig, out: &mut Vec<(usize, usize)>) {
    out.clear();
    let (rows, cols) = (cfg.rows(), cfg.cols());
    let to_cells = |x: f64, y: f64| {
        [
            (x - cfg.x_range.0) / cfg.pillar_size[0],
            (y - cfg.y_range.0) / cfg.pillar_size[1],
        ]
    };
    let a = to_cells(origin.0, origin.1);
    let b = to_cells(endpoint.0, endpoint.1);
    let Some((t0, t1)) = clip(a, b, [0.0, 0.0], [rows as f64, cols as f64]) else {
        return;
    };
    let (a, b) = (lerp(a, b, t0), lerp(a, b, t1));
    let (mut i, mut j) = (cell_index(a[0], rows), cell_index(a[1], cols));
    let end = (cell_index(b[0], rows), cell_index(b[1], cols));
    let mut ax = Axis::new(a[0], b[0] - a[0], i);
    let mut ay = Axis::new(a[1], b[1] - a[1], j);
    out.push((i, j));
    let budget = end.0.abs_diff(i) + end.1.abs_diff(j);
    let mut moved = 0;
    let inside = |i: isize, j: isize| i >= 0 && j >= 0 && (i as usize) < rows && (j as usize) < cols;
    while (i, j) != end && moved < budget {
        let (ni, nj) = (i as isize + ax.step, j as isize + ay.step);
        if (ax.t_max - ay.t_max).abs() <= CORNER_TOL {
            if inside(ni, j as isize) {
                out.push((ni as usize, j));
            }
            if inside(i as isize, nj) {
                out.push((i, nj as usize));
            }
            if !inside(ni, nj) {
                break;
            }
            i = ni as usize;
            j = nj as usize;
            ax.t_max += ax.t_delta;
            ay.t_max += ay.t_delta;
            moved += 2;
        } else if ax.t_max < ay.t_max {
            if !inside(ni, j as isize) {
                break;
            }
            i = ni as usize;
            ax.t_max += ax.t_delta;
            moved += 1;
        } else {
            if !inside(i as isize, nj) {
                break;
            }
            j = nj as usize;
            ay.t_max += ay.t_delta;
            moved += 1;
        }
        out.push((i, j));
    }
    // round-off may stop the walk one cell short; the endpoint cell is always met
    if out.last() != Some(&end) && !out.contains(&end) {
        out.push(end);
    }
}

/// Dense per-cell ray counts.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ObservabilityMap {
    pub rows: usize,
    pub cols: usize,
    /// Row-major `rows x cols` counts.
    pub counts: Vec<u32>,
    /// Cell of the sensor origin, `None` when it lies outside the grid.
    pub origin_cell: Option<(usize, usize)>,
}

impl ObservabilityMap {
    pub fn get(&self, row: usize, col: usize) -> u32 {
        self.counts[row * self.cols + col]
    }

    pub fn max(&self) -> u32 {
        self.counts.iter().copied().max().unwrap_or(0)
    }

    /// `log(1 + count)` scaled by its maximum over the frame.
    pub fn normalized(&self) -> Vec<f64> {
        let m = (1.0 + self.max() as f64).ln();
        if m == 0.0 {
            return vec![0.0; self.counts.len()];
        }
        self.counts.iter().map(|&c| (1.0 + c as f64).ln() / m).collect()
    }

    pub fn observed(&self) -> Vec<bool> {
        self.counts.iter().map(|&c| c > 0).collect()
    }
}

/// Counts, for every cell, the rays from `origin` to in-range points that
/// traverse it. Heights are ignored.
pub fn observability(cloud: &PointCloud, cfg: &GridConfig, origin: [f64; 3]) -> ObservabilityMap {
    let (rows, cols) = (cfg.rows(), cfg.cols());
    let counts = par::chunked_fold(
        &cloud.points,
        RAY_CHUNK,
        || (vec![0u32; rows * cols], Vec::new()),
        |(acc, scratch), p: &Point| {
            if !cfg.contains(p.x, p.y, p.z) {
                return;
            }
            traverse_into((origin[0], origin[1]), (p.x, p.y), cfg, scratch);
            for &(r, c) in scratch.iter() {
                acc[r * cols + c] += 1;
            }
        },
        |(out, _), (part, _)| {
            if out.is_empty() {
                *out = part;
            } else {
                out.iter_mut().zip(part).for_each(|(o, p)| *o += p);
            }
        },
    )
    .0;
    ObservabilityMap {
        rows,
        cols,
        counts,
        origin_cell: cfg.cell_of(origin[0], origin[1]),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
#[repr(u8)]
pub enum VoxelState {
    Unknown = 0,
    Free = 1,
    Occupied = 2,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VoxelStateGrid {
    pub rows: usize,
    pub cols: usize,
    pub depth: usize,
    /// Index `(r * cols + c) * depth + k`.
    pub states: Vec<VoxelState>,
}

impl VoxelStateGrid {
    pub fn get(&self, r: usize, c: usize, k: usize) -> VoxelState {
        self.states[(r * self.cols + c) * self.depth + k]
    }

    /// Top-view summary: occupied if any voxel in the column is, else free
    /// if any is, else unknown.
    pub fn column_summary(&self) -> Vec<VoxelState> {
        self.states
            .chunks(self.depth)
            .map(|col| col.iter().copied().max().unwrap_or(VoxelState::Unknown))
            .collect()
    }
}

/// Voxels walked by the segment `a -> b` (already in voxel units and
/// inside the grid), including both ends.
fn walk_3d(a: [f64; 3], b: [f64; 3], dims: [usize; 3], mut visit: impl FnMut(usize, usize, usize) -> bool) {
    let mut v: [usize; 3] = std::array::from_fn(|k| cell_index(a[k], dims[k]));
    let end: [usize; 3] = std::array::from_fn(|k| cell_index(b[k], dims[k]));
    let mut axes: Vec<Axis> = (0..3).map(|k| Axis::new(a[k], b[k] - a[k], v[k])).collect();
    let budget: usize = (0..3).map(|k| end[k].abs_diff(v[k])).sum();
    if !visit(v[0], v[1], v[2]) {
        return;
    }
    for _ in 0..budget {
        if v == end {
            return;
        }
        let k = (0..3)
            .min_by(|&p, &q| axes[p].t_max.total_cmp(&axes[q].t_max))
            .unwrap();
        let n = v[k] as isize + axes[k].step;
        if n < 0 || n as usize >= dims[k] {
            break;
        }
        v[k] = n as usize;
        axes[k].t_max += axes[k].t_delta;
        if !visit(v[0], v[1], v[2]) {
            return;
        }
    }
    if v != end {
        visit(end[0], end[1], end[2]);
    }
}

/// Casts a 3D ray to every in-range point. Each ray stops at the first
/// voxel holding a point, which becomes occupied; the empty voxels before
/// it become free.
pub fn visibility(cloud: &PointCloud, cfg: &GridConfig, origin: [f64; 3]) -> VoxelStateGrid {
    let dims = [cfg.rows(), cfg.cols(), cfg.depth()];
    let idx = |r: usize, c: usize, k: usize| (r * dims[1] + c) * dims[2] + k;
    let mut has_point = vec![false; dims.iter().product()];
    for p in &cloud.points {
        if let Some((r, c, k)) = cfg.voxel_of(p.x, p.y, p.z) {
            has_point[idx(r, c, k)] = true;
        }
    }
    let scale = [cfg.pillar_size[0], cfg.pillar_size[1], cfg.pillar_size[2]];
    let lo = [cfg.x_range.0, cfg.y_range.0, cfg.z_range.0];
    let to_vox = |p: [f64; 3]| -> [f64; 3] { std::array::from_fn(|k| (p[k] - lo[k]) / scale[k]) };
    let hi = [dims[0] as f64, dims[1] as f64, dims[2] as f64];
    let states = par::chunked_fold(
        &cloud.points,
        RAY_CHUNK,
        || vec![VoxelState::Unknown; has_point.len()],
        |acc, p: &Point| {
            if cfg.voxel_of(p.x, p.y, p.z).is_none() {
                return;
            }
            let (a, b) = (to_vox(origin), to_vox([p.x, p.y, p.z]));
            let Some((t0, t1)) = clip(a, b, [0.0; 3], hi) else {
                return;
            };
            walk_3d(lerp(a, b, t0), lerp(a, b, t1), dims, |r, c, k| {
                let i = idx(r, c, k);
                if has_point[i] {
                    acc[i] = VoxelState::Occupied;
                    false
                } else {
                    acc[i] = acc[i].max(VoxelState::Free);
                    true
                }
            });
        },
        |out, part| out.iter_mut().zip(part).for_each(|(o, p)| *o = (*o).max(p)),
    );
    VoxelStateGrid {
        rows: dims[0],
        cols: dims[1],
        depth: dims[2],
        states,
    }
}

fn noise_count(n: usize, snr: f64) -> Result<usize> {
    if !(snr > 0.0) || snr.is_nan() {
        return Err(Error::Invalid(format!("snr must be positive, got {snr}")));
    }
    Ok((n as f64 / snr).floor() as usize)
}

fn noise_points(count: usize, cfg: &GridConfig, seed: u64) -> Vec<Point> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            Point::new(
                rng.random_range(cfg.x_range.0..cfg.x_range.1),
                rng.random_range(cfg.y_range.0..cfg.y_range.1),
                rng.random_range(cfg.z_range.0..cfg.z_range.1),
                rng.random_range(0.0..=1.0),
            )
        })
        .collect()
}

/// Appends `floor(len / snr)` uniform points inside the crop volume.
/// Raw class ids, when present, are extended with id 0.
pub fn inject_noise(cloud: &PointCloud, cfg: &GridConfig, snr: f64, seed: u64) -> Result<PointCloud> {
    let extra = noise_points(noise_count(cloud.len(), snr)?, cfg, seed);
    let mut points = cloud.points.clone();
    points.extend(extra.iter().copied());
    Ok(match &cloud.raw_class {
        Some(raw) => {
            let mut raw = raw.clone();
            raw.resize(points.len(), 0);
            PointCloud::with_raw_class(points, raw)?
        }
        None => PointCloud::new(points),
    })
}

/// As [`inject_noise`] for merged classes; noise points get `unlabeled`.
pub fn inject_noise_labeled(
    cloud: &LabeledCloud,
    cfg: &GridConfig,
    snr: f64,
    seed: u64,
    unlabeled: u16,
) -> Result<LabeledCloud> {
    let noisy = inject_noise(&cloud.cloud, cfg, snr, seed)?;
    let mut classes = cloud.classes.clone();
    classes.resize(noisy.len(), unlabeled);
    LabeledCloud::new(noisy, classes)
}
