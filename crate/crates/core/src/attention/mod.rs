//! Attention blocks that re-weight pillar features: an LSTM over a PCA
//! ordering of the pillars, key-node graph attention and per-pillar
//! attention, plus their fusion in a configurable order.

mod blocks;
pub mod feast;
pub mod fps;
pub mod pca;

use std::rc::Rc;

use rand::Rng;

pub use blocks::{dr_lstm_attention, graph_attention, ma_fuse, pillar_attention, FuseOutput};
pub use feast::{feast_head_weights, FeastVars, Neighbors};
pub use fps::{fps, key_count};
pub use pca::pca_1d;

use crate::config::FlatConfig;
use crate::nn::{params::he_normal, Kind, Params, Tensor};
use crate::pillars::{GridConfig, PillarSet};
use crate::{Error, Result};

/// Parameter-name prefix of every attention tensor.
pub const PREFIX: &str = "attn";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Lstm,
    Graph,
    Pillar,
}

/// Parses an ordering such as `LGP`; each block appears exactly once.
pub fn parse_order(s: &str) -> Result<[Stage; 3]> {
    let stages: Vec<Stage> = s
        .trim()
        .chars()
        .map(|c| match c.to_ascii_uppercase() {
            'L' => Ok(Stage::Lstm),
            'G' => Ok(Stage::Graph),
            'P' => Ok(Stage::Pillar),
            _ => Err(Error::Config(format!("unknown attention stage `{c}` in `{s}`"))),
        })
        .collect::<Result<_>>()?;
    let all = [Stage::Lstm, Stage::Graph, Stage::Pillar];
    if stages.len() != 3 || all.iter().any(|a| !stages.contains(a)) {
        return Err(Error::Config(format!("attention order `{s}` must list L, G and P once each")));
    }
    Ok([stages[0], stages[1], stages[2]])
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionConfig {
    pub lstm_hidden: usize,
    pub heads: usize,
    pub graph_hidden: usize,
    pub fps_rate: f64,
    pub fuse_width: usize,
    pub order: [Stage; 3],
}

impl Default for AttentionConfig {
    fn default() -> Self {
        Self {
            lstm_hidden: 32,
            heads: 4,
            graph_hidden: 32,
            fps_rate: 0.05,
            fuse_width: 32,
            order: [Stage::Lstm, Stage::Graph, Stage::Pillar],
        }
    }
}

impl AttentionConfig {
    /// Reads `attn.lstm_hidden`, `attn.heads`, `attn.graph_hidden`,
    /// `attn.fps_rate`, `attn.fuse_width` and `attn.order`.
    pub fn from_config(cfg: &FlatConfig, base: &AttentionConfig) -> Result<Self> {
        let a = Self {
            lstm_hidden: cfg.parse_or("attn.lstm_hidden", base.lstm_hidden)?,
            heads: cfg.parse_or("attn.heads", base.heads)?,
            graph_hidden: cfg.parse_or("attn.graph_hidden", base.graph_hidden)?,
            fps_rate: cfg.parse_or("attn.fps_rate", base.fps_rate)?,
            fuse_width: cfg.parse_or("attn.fuse_width", base.fuse_width)?,
            order: match cfg.get("attn.order") {
                Some(s) => parse_order(s)?,
                None => base.order,
            },
        };
        if a.lstm_hidden == 0 || a.heads == 0 || a.graph_hidden == 0 || a.fuse_width == 0 {
            return Err(Error::Config("attention widths must be positive".into()));
        }
        if !(a.fps_rate > 0.0 && a.fps_rate <= 1.0) {
            return Err(Error::Config(format!("fps rate must lie in (0, 1], got {}", a.fps_rate)));
        }
        Ok(a)
    }

    pub fn order_string(&self) -> String {
        self.order
            .iter()
            .map(|s| match s {
                Stage::Lstm => 'L',
                Stage::Graph => 'G',
                Stage::Pillar => 'P',
            })
            .collect()
    }
}

/// Number of FeaSt layers in the graph block (encoder plus decoder).
pub const GRAPH_LAYERS: usize = 4;

fn uniform(shape: &[usize], bound: f64, rng: &mut impl Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-bound..=bound)).collect()).expect("sized")
}

/// Adds every attention tensor for `channels` input channels and
/// `max_points` point slots per pillar.
pub fn init_params(p: &mut Params, cfg: &AttentionConfig, channels: usize, max_points: usize, rng: &mut impl Rng) {
    let h = cfg.lstm_hidden;
    let bound = 1.0 / (h as f64).sqrt();
    for dir in ["fwd", "bwd"] {
        let name = format!("{PREFIX}.lstm.{dir}");
        p.insert(format!("{name}.w_ih"), Kind::Param, uniform(&[channels, 4 * h], bound, rng));
        p.insert(format!("{name}.w_hh"), Kind::Param, uniform(&[h, 4 * h], bound, rng));
        p.insert(format!("{name}.b"), Kind::Param, uniform(&[4 * h], bound, rng));
    }
    p.add_affine(&format!("{PREFIX}.lstm.head"), 2 * h, 1, rng);

    let (m, g) = (cfg.heads, cfg.graph_hidden);
    for l in 0..GRAPH_LAYERS {
        let cin = if l == 0 { channels } else { g };
        let name = format!("{PREFIX}.graph.l{l}");
        p.insert(format!("{name}.w"), Kind::Param, he_normal(&[m, cin, g], cin, rng));
        p.insert(format!("{name}.u"), Kind::Param, he_normal(&[cin, m], cin, rng));
        p.insert(format!("{name}.c"), Kind::Param, Tensor::zeros(&[m]));
        p.insert(format!("{name}.b"), Kind::Param, Tensor::zeros(&[g]));
    }
    p.add_affine(&format!("{PREFIX}.graph.head"), g, 1, rng);

    let f = cfg.fuse_width;
    p.add_affine(&format!("{PREFIX}.pillar.fc0"), 2 * channels, f, rng);
    p.add_affine(&format!("{PREFIX}.pillar.fc1"), f, f, rng);
    p.add_affine(&format!("{PREFIX}.pillar.point"), f + 3, 1, rng);
    p.insert(
        format!("{PREFIX}.pillar.slot.w"),
        Kind::Param,
        he_normal(&[max_points, 1], max_points, rng),
    );
    p.insert(format!("{PREFIX}.pillar.slot.b"), Kind::Param, Tensor::zeros(&[1]));
}

/// Valid-slot layout of a pillar set: feature rows are the valid points,
/// pillar by pillar.
#[derive(Debug, Clone)]
pub struct PillarBatch {
    pub offsets: Rc<Vec<usize>>,
    pub pillar_of_row: Rc<Vec<usize>>,
    pub slot_of_row: Rc<Vec<usize>>,
    /// `(P, 3)` pillar centers.
    pub centers: Tensor,
    /// Top-view pillar positions for the PCA ordering.
    pub positions: Vec<[f64; 2]>,
    pub max_points: usize,
}

impl PillarBatch {
    pub fn new(set: &PillarSet, cfg: &GridConfig) -> Self {
        let offsets = set.row_offsets();
        let mut pillar_of_row = Vec::with_capacity(*offsets.last().unwrap());
        let mut slot_of_row = Vec::with_capacity(pillar_of_row.capacity());
        for p in 0..set.valid_pillars() {
            for s in 0..set.valid_points[p] {
                pillar_of_row.push(p);
                slot_of_row.push(s);
            }
        }
        let centers = set.centers(cfg);
        Self::from_parts(offsets, centers, set.max_points()).with_rows(pillar_of_row, slot_of_row)
    }

    /// Pillars with the given point counts and centers, `max_points` slots each.
    pub fn from_counts(counts: &[usize], centers: Vec<[f64; 3]>, max_points: usize) -> Self {
        let mut offsets = vec![0];
        let (mut por, mut sor) = (Vec::new(), Vec::new());
        for (p, &k) in counts.iter().enumerate() {
            offsets.push(offsets.last().unwrap() + k);
            for s in 0..k {
                por.push(p);
                sor.push(s);
            }
        }
        Self::from_parts(offsets, centers, max_points).with_rows(por, sor)
    }

    fn from_parts(offsets: Vec<usize>, centers: Vec<[f64; 3]>, max_points: usize) -> Self {
        let positions = centers.iter().map(|c| [c[0], c[1]]).collect();
        let flat = centers.iter().flatten().copied().collect();
        Self {
            offsets: Rc::new(offsets),
            pillar_of_row: Rc::new(Vec::new()),
            slot_of_row: Rc::new(Vec::new()),
            centers: Tensor::new(&[centers.len(), 3], flat).expect("three per center"),
            positions,
            max_points,
        }
    }

    fn with_rows(mut self, pillar_of_row: Vec<usize>, slot_of_row: Vec<usize>) -> Self {
        self.pillar_of_row = Rc::new(pillar_of_row);
        self.slot_of_row = Rc::new(slot_of_row);
        self
    }

    pub fn pillars(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn rows(&self) -> usize {
        self.pillar_of_row.len()
    }
}

/// Per-pillar attention weights in pillar order; `alignment[t]` is the
/// pillar processed at step `t` by the block.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMap {
    pub weights: Vec<f64>,
    pub alignment: Vec<usize>,
}
