//! World-level augmentation: flip, then rotation about z, then uniform
//! scaling, then translation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::config::FlatConfig;
use crate::dataio::{LabeledCloud, Point, PointCloud};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentConfig {
    /// Mirror across the x axis (`y -> -y`).
    pub flip_x: bool,
    /// Mirror across the y axis (`x -> -x`).
    pub flip_y: bool,
    pub rotate: bool,
    pub rotation_range: (f64, f64),
    pub scale: bool,
    pub scale_range: (f64, f64),
    pub translate: bool,
    pub translate_std: [f64; 3],
    /// Translation clipped at this many standard deviations.
    pub translate_clip: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            flip_x: true,
            flip_y: true,
            rotate: true,
            rotation_range: (-0.785, 0.785),
            scale: true,
            scale_range: (0.95, 1.05),
            translate: false,
            translate_std: [5.0, 5.0, 0.05],
            translate_clip: 3.0,
        }
    }
}

impl AugmentConfig {
    pub fn disabled() -> Self {
        Self {
            flip_x: false,
            flip_y: false,
            rotate: false,
            scale: false,
            translate: false,
            ..Self::default()
        }
    }

    pub fn from_config(cfg: &FlatConfig) -> Result<Self> {
        let d = Self::default();
        let on = cfg.bool_or("augment.enabled", true)?;
        let flips = match cfg.get("augment.flip_axes") {
            None => vec!["x".to_string(), "y".to_string()],
            Some(v) => crate::config::split_list(v).map(str::to_string).collect(),
        };
        if let Some(a) = flips.iter().find(|a| *a != "x" && *a != "y") {
            return Err(Error::Config(format!("unknown flip axis `{a}`")));
        }
        let c = Self {
            flip_x: on && flips.iter().any(|a| a == "x"),
            flip_y: on && flips.iter().any(|a| a == "y"),
            rotate: on && cfg.bool_or("augment.rotate", d.rotate)?,
            rotation_range: cfg.pair_or("augment.rotation_range", d.rotation_range)?,
            scale: on && cfg.bool_or("augment.scale", d.scale)?,
            scale_range: cfg.pair_or("augment.scale_range", d.scale_range)?,
            translate: on && cfg.bool_or("augment.translate", d.translate)?,
            translate_std: cfg.triple_or("augment.translate_std", d.translate_std)?,
            translate_clip: cfg.parse_or("augment.translate_clip", d.translate_clip)?,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        let pi = std::f64::consts::PI;
        let (r0, r1) = self.rotation_range;
        if !(r0 >= -pi && r1 <= pi && r0 <= r1) {
            return Err(Error::Config("rotation range must lie within [-pi, pi]".into()));
        }
        let (s0, s1) = self.scale_range;
        if !(s0 > 0.0 && s0 <= s1) {
            return Err(Error::Config("scale range must be positive and ordered".into()));
        }
        if self.translate_std.iter().any(|s| !(*s >= 0.0)) || !(self.translate_clip >= 0.0) {
            return Err(Error::Config("translation std and clip must be non-negative".into()));
        }
        Ok(())
    }
}

/// One sampled transform.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentParams {
    pub flip_x: bool,
    pub flip_y: bool,
    pub rotation: f64,
    pub scale: f64,
    pub translation: [f64; 3],
}

impl AugmentParams {
    pub fn identity() -> Self {
        Self {
            flip_x: false,
            flip_y: false,
            rotation: 0.0,
            scale: 1.0,
            translation: [0.0; 3],
        }
    }

    pub fn apply(&self, p: [f64; 3]) -> [f64; 3] {
        let [mut x, mut y, z] = p;
        if self.flip_x {
            y = -y;
        }
        if self.flip_y {
            x = -x;
        }
        let (s, c) = self.rotation.sin_cos();
        let (x, y) = (c * x - s * y, s * x + c * y);
        let t = self.translation;
        [
            self.scale * x + t[0],
            self.scale * y + t[1],
            self.scale * z + t[2],
        ]
    }

    pub fn apply_cloud(&self, cloud: &PointCloud) -> PointCloud {
        let points = cloud
            .points
            .iter()
            .map(|p| {
                let [x, y, z] = self.apply(p.xyz());
                Point::new(x, y, z, p.r)
            })
            .collect();
        PointCloud {
            points,
            raw_class: cloud.raw_class.clone(),
        }
    }

    pub fn to_line(&self) -> String {
        let t = self.translation;
        format!(
            "flip_x={} flip_y={} rotation={:.17e} scale={:.17e} translation={:.17e},{:.17e},{:.17e}",
            self.flip_x, self.flip_y, self.rotation, self.scale, t[0], t[1], t[2]
        )
    }
}

pub fn sample_params(cfg: &AugmentConfig, seed: u64) -> AugmentParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = AugmentParams::identity();
    // fixed draw order so toggling one transform leaves others unchanged
    let fx = rng.random_bool(0.5);
    let fy = rng.random_bool(0.5);
    let u_rot: f64 = rng.random();
    let u_scale: f64 = rng.random();
    p.flip_x = cfg.flip_x && fx;
    p.flip_y = cfg.flip_y && fy;
    if cfg.rotate {
        let (a, b) = cfg.rotation_range;
        p.rotation = a + (b - a) * u_rot;
    }
    if cfg.scale {
        let (a, b) = cfg.scale_range;
        p.scale = a + (b - a) * u_scale;
    }
    let n = Normal::new(0.0, 1.0).expect("unit normal");
    for (k, t) in p.translation.iter_mut().enumerate() {
        let z: f64 = n.sample(&mut rng);
        let sd = cfg.translate_std[k];
        if cfg.translate {
            *t = (z * sd).clamp(-cfg.translate_clip * sd, cfg.translate_clip * sd);
        }
    }
    p
}

/// Transformed copy of `cloud` with classes untouched, plus the parameters.
pub fn apply_augment(cloud: &LabeledCloud, cfg: &AugmentConfig, seed: u64) -> (LabeledCloud, AugmentParams) {
    let p = sample_params(cfg, seed);
    let out = LabeledCloud {
        cloud: p.apply_cloud(&cloud.cloud),
        classes: cloud.classes.clone(),
    };
    (out, p)
}
