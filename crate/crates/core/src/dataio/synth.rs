//! Synthetic labeled scenes: a ground plane populated with boxes, posts and
//! walls, each surface sampled uniformly at a fixed density.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{ClassMap, LabeledCloud, Point, PointCloud, Pose};
use crate::config::FlatConfig;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Primitive {
    /// Oriented box standing on the ground.
    Box {
        cx: f64,
        cy: f64,
        yaw: f64,
        w: f64,
        l: f64,
        h: f64,
        class: u16,
    },
    /// Vertical cylinder.
    Post {
        cx: f64,
        cy: f64,
        radius: f64,
        height: f64,
        class: u16,
    },
    /// Vertical rectangle between two ground points.
    Wall {
        x0: f64,
        y0: f64,
        x1: f64,
        y1: f64,
        height: f64,
        class: u16,
    },
}

impl Primitive {
    /// True if the ground point `(x, y)` lies under the primitive.
    fn covers(&self, x: f64, y: f64) -> bool {
        match *self {
            Primitive::Box {
                cx, cy, yaw, w, l, ..
            } => {
                let (s, c) = yaw.sin_cos();
                let dx = x - cx;
                let dy = y - cy;
                let u = c * dx + s * dy;
                let v = -s * dx + c * dy;
                u.abs() <= l / 2.0 && v.abs() <= w / 2.0
            }
            Primitive::Post { cx, cy, radius, .. } => {
                (x - cx).powi(2) + (y - cy).powi(2) <= radius * radius
            }
            Primitive::Wall { x0, y0, x1, y1, .. } => {
                segment_distance(x, y, x0, y0, x1, y1) <= WALL_HALF_THICKNESS
            }
        }
    }

    fn center(&self) -> (f64, f64) {
        match *self {
            Primitive::Box { cx, cy, .. } | Primitive::Post { cx, cy, .. } => (cx, cy),
            Primitive::Wall { x0, y0, x1, y1, .. } => ((x0 + x1) / 2.0, (y0 + y1) / 2.0),
        }
    }

    fn radius(&self) -> f64 {
        match *self {
            Primitive::Box { w, l, .. } => 0.5 * (w * w + l * l).sqrt(),
            Primitive::Post { radius, .. } => radius,
            Primitive::Wall { x0, y0, x1, y1, .. } => 0.5 * ((x1 - x0).hypot(y1 - y0)),
        }
    }
}

const WALL_HALF_THICKNESS: f64 = 0.1;

fn segment_distance(px: f64, py: f64, x0: f64, y0: f64, x1: f64, y1: f64) -> f64 {
    let (dx, dy) = (x1 - x0, y1 - y0);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 {
        (((px - x0) * dx + (py - y0) * dy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    (px - x0 - t * dx).hypot(py - y0 - t * dy)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Range {
    pub lo: f64,
    pub hi: f64,
}

impl Range {
    fn sample(&self, rng: &mut impl Rng) -> f64 {
        if self.hi > self.lo {
            rng.random_range(self.lo..self.hi)
        } else {
            self.lo
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    /// World extent `(x_min, x_max, y_min, y_max)` of the ground plane.
    pub extent: [f64; 4],
    pub ground_z: f64,
    /// Ground points per square meter; 0 disables the ground.
    pub ground_density: f64,
    pub ground_class: u16,
    /// Points per square meter on box, post and wall surfaces.
    pub surface_density: f64,
    pub jitter: f64,
    /// Minimum clearance between a random primitive and the sensor.
    pub min_range: f64,
    pub primitives: Vec<Primitive>,
    pub random_boxes: (usize, usize),
    pub box_w: Range,
    pub box_l: Range,
    pub box_h: Range,
    pub box_class: u16,
    pub random_posts: (usize, usize),
    pub post_radius: Range,
    pub post_height: Range,
    pub post_class: u16,
    pub random_walls: (usize, usize),
    pub wall_length: Range,
    pub wall_height: Range,
    pub wall_class: u16,
    /// Reflectance range per merged class index.
    pub reflectance: Vec<Range>,
}

impl SceneSpec {
    /// The toy scene distribution used for desk-scale training.
    pub fn toy_default() -> Self {
        Self::parse(DEFAULT_SCENE, &ClassMap::synthetic()).expect("builtin scene spec")
    }

    /// The toy scene with keys of `overrides` replacing its defaults.
    pub fn toy_with(overrides: &FlatConfig, classes: &ClassMap) -> Result<Self> {
        let mut cfg = FlatConfig::parse(DEFAULT_SCENE)?;
        cfg.merge(overrides);
        Self::from_config(&cfg, classes)
    }

    pub fn parse(text: &str, classes: &ClassMap) -> Result<Self> {
        Self::from_config(&FlatConfig::parse(text)?, classes)
    }

    pub fn from_config(cfg: &FlatConfig, classes: &ClassMap) -> Result<Self> {
        let class = |key: &str, default: &str| -> Result<u16> {
            let name = cfg.get(key).unwrap_or(default);
            classes
                .index_of(name)
                .ok_or_else(|| Error::Config(format!("scene class `{name}` is not in the class map")))
        };
        let range = |key: &str, default: (f64, f64)| -> Result<Range> {
            let (lo, hi) = cfg.pair_or(key, default)?;
            if hi < lo {
                return Err(Error::Config(format!("`{key}` has max < min")));
            }
            Ok(Range { lo, hi })
        };
        let count = |key: &str| -> Result<(usize, usize)> {
            let v: Vec<usize> = cfg.list_or(key, &[0, 0])?;
            match v.as_slice() {
                [a] => Ok((*a, *a)),
                [a, b] if a <= b => Ok((*a, *b)),
                _ => Err(Error::Config(format!("`{key}` must be `min max`"))),
            }
        };
        let extent_v: Vec<f64> = cfg.list_or("extent", &[])?;
        let extent: [f64; 4] = match extent_v.as_slice() {
            [a, b, c, d] if b > a && d > c => [*a, *b, *c, *d],
            [] => [0.0; 4],
            _ => return Err(Error::Config("`extent` must be `x_min x_max y_min y_max`".into())),
        };

        let box_class = class("box.class", "vehicle")?;
        let post_class = class("post.class", "object")?;
        let wall_class = class("wall.class", "building")?;
        let mut primitives = Vec::new();
        for (k, v) in cfg.iter() {
            let vals = || -> Result<Vec<f64>> {
                crate::config::split_list(v)
                    .map(|t| {
                        t.parse()
                            .map_err(|_| Error::Config(format!("bad number `{t}` in `{k}`")))
                    })
                    .collect()
            };
            let indexed = |prefix: &str| {
                k.strip_prefix(prefix)
                    .is_some_and(|rest| rest.chars().all(|c| c.is_ascii_digit()) && !rest.is_empty())
            };
            if indexed("box.") {
                match vals()?.as_slice() {
                    &[cx, cy, yaw, w, l, h] if w > 0.0 && l > 0.0 && h > 0.0 => {
                        primitives.push(Primitive::Box { cx, cy, yaw, w, l, h, class: box_class })
                    }
                    _ => return Err(Error::Config(format!("`{k}` must be `cx cy yaw w l h`"))),
                }
            } else if indexed("post.") {
                match vals()?.as_slice() {
                    &[cx, cy, radius, height] if radius > 0.0 && height > 0.0 => primitives
                        .push(Primitive::Post { cx, cy, radius, height, class: post_class }),
                    _ => return Err(Error::Config(format!("`{k}` must be `cx cy radius height`"))),
                }
            } else if indexed("wall.") {
                match vals()?.as_slice() {
                    &[x0, y0, x1, y1, height] if height > 0.0 => primitives
                        .push(Primitive::Wall { x0, y0, x1, y1, height, class: wall_class }),
                    _ => return Err(Error::Config(format!("`{k}` must be `x0 y0 x1 y1 height`"))),
                }
            }
        }

        let mut reflectance = vec![Range { lo: 0.0, hi: 1.0 }; classes.num_classes()];
        for (idx, name) in classes.names().iter().enumerate() {
            let default = match name.as_str() {
                "road" => (0.05, 0.25),
                "vehicle" => (0.6, 0.95),
                "object" => (0.35, 0.55),
                "building" => (0.2, 0.4),
                _ => (0.0, 1.0),
            };
            reflectance[idx] = range(&format!("reflectance.{name}"), default)?;
        }

        let spec = Self {
            extent,
            ground_z: cfg.parse_or("ground.z", -1.7)?,
            ground_density: cfg.parse_or("ground.density", 0.0)?,
            ground_class: class("ground.class", "road")?,
            surface_density: cfg.parse_or("surface.density", 40.0)?,
            jitter: cfg.parse_or("jitter", 0.01)?,
            min_range: cfg.parse_or("min_range", 2.5)?,
            primitives,
            random_boxes: count("random.boxes")?,
            box_w: range("random.box.w", (1.6, 2.0))?,
            box_l: range("random.box.l", (3.5, 4.8))?,
            box_h: range("random.box.h", (1.4, 1.8))?,
            box_class,
            random_posts: count("random.posts")?,
            post_radius: range("random.post.radius", (0.1, 0.25))?,
            post_height: range("random.post.height", (2.0, 3.0))?,
            post_class,
            random_walls: count("random.walls")?,
            wall_length: range("random.wall.length", (4.0, 10.0))?,
            wall_height: range("random.wall.height", (2.0, 3.0))?,
            wall_class,
            reflectance,
        };
        if spec.is_empty() {
            return Err(Error::Config("scene spec contains no surfaces".into()));
        }
        if spec.extent[1] <= spec.extent[0] {
            return Err(Error::Config("scene spec needs an `extent`".into()));
        }
        Ok(spec)
    }

    fn is_empty(&self) -> bool {
        self.ground_density <= 0.0
            && self.primitives.is_empty()
            && self.random_boxes.1 == 0
            && self.random_posts.1 == 0
            && self.random_walls.1 == 0
    }

    /// Draws the random primitives of one world, keeping clear of every
    /// sensor position in `sensors`.
    fn sample_world(&self, rng: &mut ChaCha8Rng, sensors: &[[f64; 2]]) -> Vec<Primitive> {
        let mut prims = self.primitives.clone();
        let [x0, x1, y0, y1] = self.extent;
        let clear = |p: &Primitive, placed: &[Primitive]| {
            let (cx, cy) = p.center();
            let r = p.radius();
            let sensor_ok = sensors
                .iter()
                .all(|s| (cx - s[0]).hypot(cy - s[1]) >= self.min_range + r);
            let overlap = placed.iter().any(|q| {
                let (qx, qy) = q.center();
                (cx - qx).hypot(cy - qy) < r + q.radius() + 0.3
            });
            sensor_ok && !overlap
        };
        let count = |rng: &mut ChaCha8Rng, (lo, hi): (usize, usize)| {
            if hi > lo {
                rng.random_range(lo..=hi)
            } else {
                lo
            }
        };
        let n_walls = count(rng, self.random_walls);
        let n_boxes = count(rng, self.random_boxes);
        let n_posts = count(rng, self.random_posts);
        let place = |rng: &mut ChaCha8Rng, prims: &mut Vec<Primitive>, make: &dyn Fn(&mut ChaCha8Rng) -> Primitive| {
            for _ in 0..50 {
                let p = make(rng);
                if clear(&p, prims) {
                    prims.push(p);
                    return;
                }
            }
        };
        for _ in 0..n_walls {
            place(rng, &mut prims, &|rng| {
                let len = self.wall_length.sample(rng);
                let height = self.wall_height.sample(rng);
                let along_x = rng.random_bool(0.5);
                let (hx, hy) = if along_x { (len / 2.0, 0.0) } else { (0.0, len / 2.0) };
                let cx = rng.random_range(x0 + hx..x1 - hx);
                let cy = rng.random_range(y0 + hy..y1 - hy);
                Primitive::Wall {
                    x0: cx - hx,
                    y0: cy - hy,
                    x1: cx + hx,
                    y1: cy + hy,
                    height,
                    class: self.wall_class,
                }
            });
        }
        for _ in 0..n_boxes {
            place(rng, &mut prims, &|rng| {
                let w = self.box_w.sample(rng);
                let l = self.box_l.sample(rng);
                let h = self.box_h.sample(rng);
                let m = 0.5 * (w * w + l * l).sqrt();
                Primitive::Box {
                    cx: rng.random_range(x0 + m..x1 - m),
                    cy: rng.random_range(y0 + m..y1 - m),
                    yaw: rng.random_range(-std::f64::consts::PI..std::f64::consts::PI),
                    w,
                    l,
                    h,
                    class: self.box_class,
                }
            });
        }
        for _ in 0..n_posts {
            place(rng, &mut prims, &|rng| {
                let radius = self.post_radius.sample(rng);
                Primitive::Post {
                    cx: rng.random_range(x0 + radius..x1 - radius),
                    cy: rng.random_range(y0 + radius..y1 - radius),
                    radius,
                    height: self.post_height.sample(rng),
                    class: self.post_class,
                }
            });
        }
        prims
    }

    /// Samples world-frame surface points of `prims`.
    fn sample_points(&self, rng: &mut ChaCha8Rng, prims: &[Primitive]) -> (Vec<Point>, Vec<u16>) {
        let mut pts = Vec::new();
        let mut cls = Vec::new();
        let normal = Normal::new(0.0, self.jitter.max(0.0)).expect("finite jitter");
        let gz = self.ground_z;
        let mut emit = |rng: &mut ChaCha8Rng, x: f64, y: f64, z: f64, class: u16| {
            let r = self.reflectance[class as usize].sample(rng);
            let (jx, jy, jz) = if self.jitter > 0.0 {
                (normal.sample(rng), normal.sample(rng), normal.sample(rng))
            } else {
                (0.0, 0.0, 0.0)
            };
            pts.push(Point::new(x + jx, y + jy, z + jz, r));
            cls.push(class);
        };
        let stochastic_count = |rng: &mut ChaCha8Rng, area: f64| -> usize {
            let expected = area * self.surface_density;
            (expected + rng.random::<f64>()).floor() as usize
        };

        if self.ground_density > 0.0 {
            let [x0, x1, y0, y1] = self.extent;
            let area = (x1 - x0) * (y1 - y0);
            let n = (area * self.ground_density + rng.random::<f64>()).floor() as usize;
            for _ in 0..n {
                let x = rng.random_range(x0..x1);
                let y = rng.random_range(y0..y1);
                if prims.iter().any(|p| p.covers(x, y)) {
                    continue;
                }
                emit(rng, x, y, gz, self.ground_class);
            }
        }
        for p in prims {
            match *p {
                Primitive::Box {
                    cx, cy, yaw, w, l, h, class,
                } => {
                    let (s, c) = yaw.sin_cos();
                    let to_world = |u: f64, v: f64| (cx + c * u - s * v, cy + s * u + c * v);
                    // roof
                    for _ in 0..stochastic_count(rng, w * l) {
                        let u = rng.random_range(-l / 2.0..l / 2.0);
                        let v = rng.random_range(-w / 2.0..w / 2.0);
                        let (x, y) = to_world(u, v);
                        emit(rng, x, y, gz + h, class);
                    }
                    // long sides at v = ±w/2, short sides at u = ±l/2
                    for (len, fixed, along_u) in [(l, w / 2.0, true), (l, -w / 2.0, true), (w, l / 2.0, false), (w, -l / 2.0, false)] {
                        for _ in 0..stochastic_count(rng, len * h) {
                            let t = rng.random_range(-len / 2.0..len / 2.0);
                            let z = gz + rng.random_range(0.0..h);
                            let (x, y) = if along_u { to_world(t, fixed) } else { to_world(fixed, t) };
                            emit(rng, x, y, z, class);
                        }
                    }
                }
                Primitive::Post {
                    cx, cy, radius, height, class,
                } => {
                    let area = 2.0 * std::f64::consts::PI * radius * height;
                    for _ in 0..stochastic_count(rng, area) {
                        let a = rng.random_range(0.0..std::f64::consts::TAU);
                        let z = gz + rng.random_range(0.0..height);
                        emit(rng, cx + radius * a.cos(), cy + radius * a.sin(), z, class);
                    }
                }
                Primitive::Wall {
                    x0, y0, x1, y1, height, class,
                } => {
                    let len = (x1 - x0).hypot(y1 - y0);
                    for _ in 0..stochastic_count(rng, len * height) {
                        let t = rng.random::<f64>();
                        let z = gz + rng.random_range(0.0..height);
                        emit(rng, x0 + t * (x1 - x0), y0 + t * (y1 - y0), z, class);
                    }
                }
            }
        }
        (pts, cls)
    }
}

const DEFAULT_SCENE: &str = "
extent = -14 14 -14 14
ground.z = -1.7
ground.density = 14
ground.class = road
surface.density = 30
jitter = 0.01
min_range = 2.0
random.boxes = 2 5
random.posts = 3 8
random.walls = 1 3
";

/// One frame of a synthetic sequence: the cloud in its sensor frame and
/// the sensor pose in the world frame.
#[derive(Debug, Clone, PartialEq)]
pub struct SensorFrame {
    pub cloud: LabeledCloud,
    pub pose: Pose,
}

/// One synthetic frame with the sensor at the origin.
pub fn generate_synthetic_frame(seed: u64, spec: &SceneSpec) -> Result<LabeledCloud> {
    let mut seq = generate_synthetic_sequence(seed, spec, 1, 0.0)?;
    Ok(seq.pop().expect("one frame").cloud)
}

/// `frames` observations of one random world, the sensor advancing
/// `step` meters along +x between frames.
pub fn generate_synthetic_sequence(
    seed: u64,
    spec: &SceneSpec,
    frames: usize,
    step: f64,
) -> Result<Vec<SensorFrame>> {
    if spec.is_empty() {
        return Err(Error::Config("scene spec contains no surfaces".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sensors: Vec<[f64; 2]> = (0..frames).map(|f| [f as f64 * step, 0.0]).collect();
    let world = spec.sample_world(&mut rng, &sensors);
    let mut out = Vec::with_capacity(frames);
    for (f, s) in sensors.iter().enumerate() {
        let mut frng = ChaCha8Rng::seed_from_u64(seed ^ (0x9E37_79B9_7F4A_7C15u64.wrapping_mul(f as u64 + 1)));
        let (mut pts, cls) = spec.sample_points(&mut frng, &world);
        let pose = Pose::from_translation([s[0], s[1], 0.0]);
        let inv = pose.inverse();
        for p in pts.iter_mut() {
            let [x, y, z] = inv.apply(p.xyz());
            // store at f32 precision like a real sensor would
            *p = Point::new(x as f32 as f64, y as f32 as f64, z as f32 as f64, p.r as f32 as f64);
        }
        let raw: Vec<u16> = cls.clone();
        let cloud = PointCloud::with_raw_class(pts, raw)?;
        out.push(SensorFrame {
            cloud: LabeledCloud::new(cloud, cls)?,
            pose,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ground_only() -> SceneSpec {
        SceneSpec::parse(
            "extent = -5 5 -5 5\nground.density = 2\nground.class = road\n",
            &ClassMap::synthetic(),
        )
        .unwrap()
    }

    #[test]
    fn ground_only_is_all_ground() {
        let spec = ground_only();
        let f = generate_synthetic_frame(3, &spec).unwrap();
        assert!(f.len() > 100);
        assert!(f.classes.iter().all(|&c| c == spec.ground_class));
    }

    #[test]
    fn same_seed_same_cloud_different_seed_differs() {
        let spec = SceneSpec::toy_default();
        let a = generate_synthetic_frame(11, &spec).unwrap();
        let b = generate_synthetic_frame(11, &spec).unwrap();
        let c = generate_synthetic_frame(12, &spec).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.cloud.points, c.cloud.points);
    }

    #[test]
    fn empty_spec_is_rejected() {
        assert!(SceneSpec::parse("extent = -1 1 -1 1\n", &ClassMap::synthetic()).is_err());
    }

    #[test]
    fn explicit_box_points_carry_box_class() {
        let spec = SceneSpec::parse(
            "extent = -10 10 -10 10\nbox.0 = 5 0 0 2 4 1.5\nsurface.density = 20\njitter = 0\n",
            &ClassMap::synthetic(),
        )
        .unwrap();
        let f = generate_synthetic_frame(1, &spec).unwrap();
        assert!(!f.is_empty());
        for (p, &c) in f.cloud.points.iter().zip(&f.classes) {
            assert_eq!(c, spec.box_class);
            assert!(p.x >= 3.0 - 1e-6 && p.x <= 7.0 + 1e-6);
            assert!(p.z <= -1.7 + 1.5 + 1e-6);
        }
    }

    #[test]
    fn sequence_frames_are_shifted_views_of_one_world() {
        let spec = SceneSpec::parse(
            "extent = -10 10 -10 10\npost.0 = 5 5 0.2 2\njitter = 0\nsurface.density = 50\n",
            &ClassMap::synthetic(),
        )
        .unwrap();
        let seq = generate_synthetic_sequence(4, &spec, 2, 1.0).unwrap();
        assert_eq!(seq[1].pose.translation, [1.0, 0.0, 0.0]);
        for f in &seq {
            for p in &f.cloud.cloud.points {
                let [x, y, _] = f.pose.apply(p.xyz());
                assert!(((x - 5.0).hypot(y - 5.0) - 0.2).abs() < 1e-5);
            }
        }
    }
}
