//! Box regression targets and the detection loss terms.

use crate::config::FlatConfig;
use crate::nn::ops::log_sum_exp;
use crate::{Error, Result};

/// Box or anchor: center, size `(w, l, h)` and yaw.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Box3D {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub w: f64,
    pub l: f64,
    pub h: f64,
    pub theta: f64,
}

impl Box3D {
    pub fn new(x: f64, y: f64, z: f64, w: f64, l: f64, h: f64, theta: f64) -> Result<Self> {
        let b = Self { x, y, z, w, l, h, theta };
        if !(w > 0.0 && l > 0.0 && h > 0.0) {
            return Err(Error::Invalid(format!("box dimensions must be positive, got ({w}, {l}, {h})")));
        }
        Ok(b)
    }
}

/// `(dx, dy, dz, dw, dl, dh, dtheta)` of `gt` relative to `anchor`.
pub fn box_residuals(gt: &Box3D, anchor: &Box3D) -> [f64; 7] {
    let d = (anchor.w * anchor.w + anchor.l * anchor.l).sqrt();
    [
        (gt.x - anchor.x) / d,
        (gt.y - anchor.y) / d,
        (gt.z - anchor.z) / anchor.h,
        (gt.w / anchor.w).ln(),
        (gt.l / anchor.l).ln(),
        (gt.h / anchor.h).ln(),
        (gt.theta - anchor.theta).sin(),
    ]
}

pub fn smooth_l1(x: f64) -> f64 {
    let a = x.abs();
    if a < 1.0 {
        0.5 * x * x
    } else {
        a - 0.5
    }
}

/// `-alpha (1 - p)^gamma ln p` for the probability `p` of the true class.
pub fn focal_loss(p: f64, alpha: f64, gamma: f64) -> Result<f64> {
    if !(p > 0.0 && p <= 1.0) {
        return Err(Error::Invalid(format!("class probability {p} outside (0, 1]")));
    }
    Ok(-alpha * (1.0 - p).powf(gamma) * p.ln())
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetLossConfig {
    pub alpha: f64,
    pub gamma: f64,
    pub beta_loc: f64,
    pub beta_cls: f64,
    pub beta_dir: f64,
    pub direction_bins: usize,
}

impl Default for DetLossConfig {
    fn default() -> Self {
        Self {
            alpha: 0.25,
            gamma: 2.0,
            beta_loc: 2.0,
            beta_cls: 1.0,
            beta_dir: 0.2,
            direction_bins: 2,
        }
    }
}

impl DetLossConfig {
    pub fn from_config(cfg: &FlatConfig) -> Result<Self> {
        let d = Self::default();
        let c = Self {
            alpha: cfg.parse_or("det.alpha", d.alpha)?,
            gamma: cfg.parse_or("det.gamma", d.gamma)?,
            beta_loc: cfg.parse_or("det.beta_loc", d.beta_loc)?,
            beta_cls: cfg.parse_or("det.beta_cls", d.beta_cls)?,
            beta_dir: cfg.parse_or("det.beta_dir", d.beta_dir)?,
            direction_bins: cfg.parse_or("det.direction_bins", d.direction_bins)?,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) || self.gamma < 0.0 {
            return Err(Error::Config("focal alpha must lie in (0, 1) and gamma be non-negative".into()));
        }
        if self.beta_loc < 0.0 || self.beta_cls < 0.0 || self.beta_dir < 0.0 {
            return Err(Error::Config("detection loss weights must be non-negative".into()));
        }
        if self.direction_bins < 2 {
            return Err(Error::Config("at least two direction bins are needed".into()));
        }
        Ok(())
    }
}

/// One positive anchor: regression residual error, true-class probability
/// and direction logits with the true bin.
#[derive(Debug, Clone, PartialEq)]
pub struct PositiveAnchor {
    pub residuals: [f64; 7],
    pub prob: f64,
    pub dir_logits: Vec<f64>,
    pub dir_bin: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetLosses {
    pub loc: f64,
    pub cls: f64,
    pub dir: f64,
    pub total: f64,
}

/// Weighted total normalized by the number of positives.
pub fn combine(loc: f64, cls: f64, dir: f64, cfg: &DetLossConfig, n_pos: usize) -> Result<DetLosses> {
    if n_pos == 0 {
        return Err(Error::Invalid("detection loss needs at least one positive anchor".into()));
    }
    let total = (cfg.beta_loc * loc + cfg.beta_cls * cls + cfg.beta_dir * dir) / n_pos as f64;
    Ok(DetLosses { loc, cls, dir, total })
}

pub fn det_losses(anchors: &[PositiveAnchor], cfg: &DetLossConfig) -> Result<DetLosses> {
    let (mut loc, mut cls, mut dir) = (0.0, 0.0, 0.0);
    for a in anchors {
        loc += a.residuals.iter().map(|&r| smooth_l1(r)).sum::<f64>();
        cls += focal_loss(a.prob, cfg.alpha, cfg.gamma)?;
        if a.dir_logits.len() != cfg.direction_bins || a.dir_bin >= cfg.direction_bins {
            return Err(Error::Shape {
                op: "det_losses",
                left: vec![a.dir_logits.len(), a.dir_bin],
                right: vec![cfg.direction_bins],
            });
        }
        dir += log_sum_exp(&a.dir_logits) - a.dir_logits[a.dir_bin];
    }
    combine(loc, cls, dir, cfg, anchors.len())
}
