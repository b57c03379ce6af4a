//! The segmentation network: pillar encoder, optional attention, scatter
//! to a pseudo image, optional observability channel, a UNet without its
//! first block and a per-cell class head. Losses and metrics live in the
//! submodules.

pub mod detection;
pub mod loss;
pub mod metrics;
pub mod train;

use std::rc::Rc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::{self, ma_fuse, AttentionConfig, PillarBatch};
use crate::config::FlatConfig;
use crate::dataio::PointCloud;
use crate::nn::params::he_normal;
use crate::nn::{BnLayout, Ctx, Kind, Params, Tensor, Var};
use crate::occupancy::{observability, ObservabilityMap};
use crate::pillars::{augment_points, pillarize, GridConfig, PillarSet, AUG_CHANNELS};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub grid: GridConfig,
    /// Supervised classes predicted by the head.
    pub classes: usize,
    pub pfn_channels: usize,
    pub unet_widths: Vec<usize>,
    pub use_occupancy: bool,
    pub use_ma: bool,
    pub attention: AttentionConfig,
}

impl ModelConfig {
    /// Full-size network on the SemanticKITTI grid.
    pub fn full(classes: usize) -> Self {
        Self {
            grid: GridConfig::full(),
            classes,
            pfn_channels: 64,
            unet_widths: vec![64, 128, 256, 512],
            use_occupancy: true,
            use_ma: false,
            attention: AttentionConfig::default(),
        }
    }

    /// Reduced widths for synthetic training on one CPU.
    pub fn toy(classes: usize) -> Self {
        Self {
            grid: GridConfig::toy(),
            classes,
            pfn_channels: 64,
            unet_widths: vec![8, 16, 32],
            use_occupancy: true,
            use_ma: false,
            attention: AttentionConfig {
                lstm_hidden: 16,
                heads: 2,
                graph_hidden: 8,
                fps_rate: 0.05,
                fuse_width: 16,
                ..AttentionConfig::default()
            },
        }
    }

    pub fn from_config(cfg: &FlatConfig, base: &ModelConfig) -> Result<Self> {
        let m = Self {
            grid: GridConfig::from_config(cfg, "grid.", &base.grid)?,
            classes: cfg.parse_or("model.classes", base.classes)?,
            pfn_channels: cfg.parse_or("model.pfn_channels", base.pfn_channels)?,
            unet_widths: cfg.list_or("model.unet_widths", &base.unet_widths)?,
            use_occupancy: cfg.bool_or("model.use_occupancy", base.use_occupancy)?,
            use_ma: cfg.bool_or("model.use_ma", base.use_ma)?,
            attention: AttentionConfig::from_config(cfg, &base.attention)?,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        if self.classes == 0 || self.pfn_channels == 0 {
            return Err(Error::Config("class and feature counts must be positive".into()));
        }
        if self.unet_widths.is_empty() || self.unet_widths.contains(&0) {
            return Err(Error::Config("unet widths must be a non-empty list of positive values".into()));
        }
        let f = 1 << self.unet_widths.len();
        if self.grid.rows() % f != 0 || self.grid.cols() % f != 0 {
            return Err(Error::Config(format!(
                "a {}x{} grid cannot be halved {} times",
                self.grid.rows(),
                self.grid.cols(),
                self.unet_widths.len()
            )));
        }
        Ok(())
    }

    /// Channels entering the UNet.
    pub fn unet_in(&self) -> usize {
        self.pfn_channels + usize::from(self.use_occupancy)
    }

    /// Flat-text form readable by [`ModelConfig::from_config`].
    pub fn to_config(&self) -> FlatConfig {
        let mut c = FlatConfig::new();
        let g = &self.grid;
        let pair = |p: (f64, f64)| format!("{} {}", p.0, p.1);
        c.set("grid.x_range", &pair(g.x_range));
        c.set("grid.y_range", &pair(g.y_range));
        c.set("grid.z_range", &pair(g.z_range));
        let ps = g.pillar_size;
        c.set("grid.pillar_size", &format!("{} {} {}", ps[0], ps[1], ps[2]));
        c.set("grid.max_points", &g.max_points.to_string());
        c.set("grid.max_pillars", &g.max_pillars.to_string());
        c.set("model.classes", &self.classes.to_string());
        c.set("model.pfn_channels", &self.pfn_channels.to_string());
        let widths: Vec<String> = self.unet_widths.iter().map(|w| w.to_string()).collect();
        c.set("model.unet_widths", &widths.join(" "));
        c.set("model.use_occupancy", &self.use_occupancy.to_string());
        c.set("model.use_ma", &self.use_ma.to_string());
        let a = &self.attention;
        c.set("attn.lstm_hidden", &a.lstm_hidden.to_string());
        c.set("attn.heads", &a.heads.to_string());
        c.set("attn.graph_hidden", &a.graph_hidden.to_string());
        c.set("attn.fps_rate", &a.fps_rate.to_string());
        c.set("attn.fuse_width", &a.fuse_width.to_string());
        c.set("attn.order", &a.order_string());
        c
    }
}

fn sub_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn add_conv(p: &mut Params, name: &str, cin: usize, cout: usize, k: usize, rng: &mut ChaCha8Rng) {
    p.insert(format!("{name}.w"), Kind::Param, he_normal(&[cout, cin, k, k], cin * k * k, rng));
}

/// Fresh parameters. Each sub-network draws from its own random stream,
/// so toggling the occupancy channel leaves the encoder weights intact.
pub fn init_params(cfg: &ModelConfig, seed: u64) -> Params {
    let mut p = Params::new();
    let mut rng = sub_rng(seed, 1);
    // no bias: the batch norm that follows absorbs it
    p.insert("pfn.fc.w", Kind::Param, he_normal(&[AUG_CHANNELS, cfg.pfn_channels], AUG_CHANNELS, &mut rng));
    p.add_batch_norm("pfn.bn", cfg.pfn_channels);

    if cfg.use_ma {
        let mut rng = sub_rng(seed, 2);
        attention::init_params(&mut p, &cfg.attention, AUG_CHANNELS, cfg.grid.max_points, &mut rng);
    }

    let mut rng = sub_rng(seed, 3);
    let mut cin = cfg.unet_in();
    for (i, &w) in cfg.unet_widths.iter().enumerate() {
        for (j, c) in [(0, cin), (1, w)] {
            add_conv(&mut p, &format!("unet.d{i}.c{j}"), c, w, 3, &mut rng);
            p.add_batch_norm(&format!("unet.d{i}.bn{j}"), w);
        }
        cin = w;
    }
    for i in (0..cfg.unet_widths.len()).rev() {
        let w = cfg.unet_widths[i];
        for (j, c) in [(0, cin + w), (1, w)] {
            add_conv(&mut p, &format!("unet.u{i}.c{j}"), c, w, 3, &mut rng);
            p.add_batch_norm(&format!("unet.u{i}.bn{j}"), w);
        }
        cin = w;
    }
    add_conv(&mut p, "unet.head", cin, cfg.classes, 1, &mut rng);
    p.insert("unet.head.b", Kind::Param, Tensor::zeros(&[cfg.classes]));
    p
}

/// Shared per-point linear map + BN + ReLU, then a max over each
/// pillar's valid rows: `(R, C) -> (P, F)`.
pub fn pfn_forward(ctx: &mut Ctx, rows: Var, offsets: Rc<Vec<usize>>) -> Result<Var> {
    let w = ctx.param("pfn.fc.w")?;
    let h = ctx.tape.matmul(rows, w)?;
    let h = ctx.batch_norm(h, "pfn.bn", BnLayout::Rows)?;
    let h = ctx.tape.relu(h);
    ctx.tape.segment_max(h, offsets)
}

/// 3x3 conv (no bias), BN when `{name}.bn{j}` exists, ReLU; twice.
fn double_conv(ctx: &mut Ctx, x: Var, name: &str) -> Result<Var> {
    let mut h = x;
    for j in 0..2 {
        let w = ctx.param(&format!("{name}.c{j}.w"))?;
        let zero = ctx.tape.constant(Tensor::zeros(&[ctx.tape.value(w).dim(0)]));
        h = ctx.tape.conv2d(h, w, zero)?;
        let bn = format!("{name}.bn{j}");
        if ctx.params().get(&format!("{bn}.gamma")).is_some() {
            h = ctx.batch_norm(h, &bn, BnLayout::Channels)?;
        }
        h = ctx.tape.relu(h);
    }
    Ok(h)
}

/// Encoder block: returns the pre-pool activation (the skip) and the
/// 2x2 max-pooled output.
pub fn down_block(ctx: &mut Ctx, x: Var, name: &str) -> Result<(Var, Var)> {
    let s = double_conv(ctx, x, name)?;
    let p = ctx.tape.maxpool2(s)?;
    Ok((s, p))
}

/// Decoder block: nearest upsampling, skip concatenation, two convs.
pub fn up_block(ctx: &mut Ctx, x: Var, skip: Var, name: &str) -> Result<Var> {
    let u = ctx.tape.upsample2(x)?;
    let c = ctx.tape.concat_first(&[u, skip])?;
    double_conv(ctx, c, name)
}

/// UNet over `(C, H, W)` returning `(K, H, W)` logits.
pub fn unet_forward(ctx: &mut Ctx, x: Var, depth: usize) -> Result<Var> {
    let mut skips = Vec::with_capacity(depth);
    let mut h = x;
    for i in 0..depth {
        let (s, p) = down_block(ctx, h, &format!("unet.d{i}"))?;
        skips.push(s);
        h = p;
    }
    for i in (0..depth).rev() {
        h = up_block(ctx, h, skips[i], &format!("unet.u{i}"))?;
    }
    let w = ctx.param("unet.head.w")?;
    let b = ctx.param("unet.head.b")?;
    ctx.tape.conv2d(h, w, b)
}

/// Per-frame network inputs derived from the point cloud alone.
#[derive(Debug, Clone)]
pub struct FrameInput {
    pub pillars: PillarSet,
    pub batch: PillarBatch,
    pub observability: ObservabilityMap,
}

impl FrameInput {
    pub fn new(cloud: &PointCloud, cfg: &GridConfig, origin: [f64; 3], seed: u64) -> Result<Self> {
        let pillars = augment_points(&pillarize(cloud, cfg, seed), cfg)?;
        let batch = PillarBatch::new(&pillars, cfg);
        Ok(Self {
            batch,
            observability: observability(cloud, cfg, origin),
            pillars,
        })
    }
}

#[derive(Debug, Clone, Copy)]
pub struct SegOutput {
    pub logits: Var,
    /// Scattered pillar features `(F, H, W)`, before the occupancy channel.
    pub pseudo: Var,
    /// UNet input.
    pub unet_input: Var,
}

pub fn segnet_forward(ctx: &mut Ctx, input: &FrameInput, cfg: &ModelConfig) -> Result<SegOutput> {
    let (h, w) = (cfg.grid.rows(), cfg.grid.cols());
    let rows = ctx.tape.constant(input.pillars.valid_rows());
    let pseudo = if input.batch.rows() == 0 {
        ctx.tape.constant(Tensor::zeros(&[cfg.pfn_channels, h, w]))
    } else {
        let rows = if cfg.use_ma {
            ma_fuse(ctx, rows, &input.batch, &cfg.attention)?.rows
        } else {
            rows
        };
        let feats = pfn_forward(ctx, rows, input.batch.offsets.clone())?;
        ctx.tape.scatter_image(feats, Rc::new(input.pillars.coords.clone()), h, w)?
    };
    let unet_input = if cfg.use_occupancy {
        let occ = ctx.tape.constant(Tensor::new(&[1, h, w], input.observability.normalized())?);
        ctx.tape.concat_first(&[pseudo, occ])?
    } else {
        pseudo
    };
    let logits = unet_forward(ctx, unet_input, cfg.unet_widths.len())?;
    Ok(SegOutput {
        logits,
        pseudo,
        unet_input,
    })
}

/// Per-cell argmax over the logit channels `(K, H, W)`; ties go to the
/// lowest channel.
pub fn argmax_channels(logits: &Tensor) -> Vec<usize> {
    let (k, hw) = (logits.dim(0), logits.dim(1) * logits.dim(2));
    let d = logits.data();
    (0..hw)
        .map(|i| {
            let mut best = 0;
            for c in 1..k {
                if d[c * hw + i] > d[best * hw + i] {
                    best = c;
                }
            }
            best
        })
        .collect()
}
