//! The gradient verification suite: every differentiable block and the
//! full network checked against central differences.

use std::rc::Rc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::attention::{self, feast::FeastVars, feast::Neighbors, AttentionConfig, PillarBatch};
use crate::dataio::{LabeledCloud, Point, PointCloud};
use crate::model::loss::{cell_targets, SegLossConfig};
use crate::model::{down_block, init_params, segnet_forward, up_block, FrameInput, ModelConfig};
use crate::nn::gradcheck::{check_gradients, CheckOptions, CheckReport};
use crate::nn::{BnLayout, BnMode, Ctx, Kind, LstmVars, Mode, Params, Tape, Tensor, Var};
use crate::pillars::GridConfig;
use crate::{labels, Result};

pub const TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone)]
pub struct CheckResult {
    pub name: &'static str,
    pub report: CheckReport,
    pub seconds: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.report.checked > 0 && self.report.max_rel_err < TOLERANCE
    }
}

#[derive(Debug, Clone)]
pub struct SuiteReport {
    pub results: Vec<CheckResult>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.results.iter().all(CheckResult::passed)
    }

    pub fn seconds(&self) -> f64 {
        self.results.iter().map(|r| r.seconds).sum()
    }

    /// One line per check, without timings so the table is reproducible.
    pub fn table(&self) -> String {
        let mut s = format!("{:<22} {:>12} {:>8} {:>8}  status\n", "check", "max_rel_err", "checked", "skipped");
        for r in &self.results {
            s.push_str(&format!(
                "{:<22} {:>12.3e} {:>8} {:>8}  {}\n",
                r.name,
                r.report.max_rel_err,
                r.report.checked,
                r.report.skipped,
                if r.passed() { "pass" } else { "FAIL" }
            ));
        }
        s
    }
}

fn normal(shape: &[usize], scale: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    let d: Vec<f64> = (0..n).map(|_| scale * Distribution::<f64>::sample(&StandardNormal, rng)).collect();
    Tensor::new(shape, d).expect("sized")
}

/// `sum(out * r)` for a fixed random `r`: every output coordinate gets a
/// distinct, well-scaled gradient.
fn project(tape: &mut Tape, out: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = normal(&tape.value(out).shape().to_vec(), 1.0, &mut rng);
    let r = tape.constant(r);
    let p = tape.mul(out, r)?;
    Ok(tape.sum(p))
}

/// Checks `f` with respect to `extra` inputs and the trainable parameters
/// whose names start with one of `prefixes`.
fn check_with_params<F>(params: &Params, prefixes: &[&str], extra: Vec<Tensor>, opts: &CheckOptions, f: F) -> Result<CheckReport>
where
    F: Fn(&mut Ctx, &[Var]) -> Result<Var>,
{
    let names: Vec<String> = params
        .iter()
        .filter(|(n, k, _)| *k == Kind::Param && prefixes.iter().any(|p| n.starts_with(p)))
        .map(|(n, _, _)| n.to_string())
        .collect();
    let n_extra = extra.len();
    let mut inputs = extra;
    inputs.extend(names.iter().map(|n| params.get(n).expect("listed").clone()));
    check_gradients(
        |tape, vars| {
            let mut ctx = Ctx::new(tape, params, Mode::Train, false);
            for (n, &v) in names.iter().zip(&vars[n_extra..]) {
                ctx.bind(n, v);
            }
            f(&mut ctx, &vars[..n_extra])
        },
        &inputs,
        opts,
    )
}

fn small_attention() -> AttentionConfig {
    AttentionConfig {
        lstm_hidden: 3,
        heads: 2,
        graph_hidden: 3,
        fps_rate: 0.25,
        fuse_width: 3,
        ..AttentionConfig::default()
    }
}

/// Pillars with 1 to 3 points each and scattered centers.
fn small_batch(pillars: usize, rng: &mut ChaCha8Rng) -> PillarBatch {
    let counts: Vec<usize> = (0..pillars).map(|_| rng.random_range(1..=3)).collect();
    let centers = (0..pillars)
        .map(|_| [rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0), 0.0])
        .collect();
    PillarBatch::from_counts(&counts, centers, 4)
}

type Check = (&'static str, fn(&mut ChaCha8Rng, &CheckOptions) -> Result<CheckReport>);

fn check_affine(rng: &mut ChaCha8Rng, o: &CheckOptions) -> Result<CheckReport> {
    let s = rng.random();
    check_gradients(
        |t, v| {
            let y = t.affine(v[0], v[1], v[2])?;
            project(t, y, s)
        },
        &[normal(&[5, 4], 1.0, rng), normal(&[4, 3], 0.5, rng), normal(&[3], 0.5, rng)],
        o,
    )
}

fn check_batch_norm(rng: &mut ChaCha8Rng, o: &CheckOptions) -> Result<CheckReport> {
    let s = rng.random();
    let inputs = [
        normal(&[7, 3], 1.0, rng),
        normal(&[3], 1.0, rng),
        normal(&[3], 1.0, rng),
        normal(&[2, 3, 3], 1.0, rng),
        normal(&[2], 1.0, rng),
        normal(&[2], 1.0, rng),
    ];
    check_gradients(
        |t, v| {
            let (a, _) = t.batch_norm(v[0], v[1], v[2], BnLayout::Rows, BnMode::Train)?;
            let (b, _) = t.batch_norm(v[3], v[4], v[5], BnLayout::Channels, BnMode::Train)?;
            let pa = project(t, a, s)?;
            let pb = project(t, b, s ^ 1)?;
            t.add(pa, pb)
        },
        &inputs,
        o,
    )
}

fn check_activations(rng: &mut ChaCha8Rng, o: &CheckOptions) -> Result<CheckReport> {
    let s = rng.random();
    check_gradients(
        |t, v| {
            let a = t.sigmoid(v[0]);
            let b = t.softmax(a);
            let c = t.tanh(v[0]);
            let d = t.relu(c);
            let e = t.mul(b, d)?;
            project(t, e, s)
        },
        &[normal(&[4, 5], 1.0, rng)],
        o,
    )
}

fn check_bilstm(rng: &mut ChaCha8Rng, o: &CheckOptions) -> Result<CheckReport> {
    let (c, h) = (3, 2);
    let s = rng.random();
    let inputs = vec![
        normal(&[6, c], 1.0, rng),
        normal(&[c, 4 * h], 0.5, rng),
        normal(&[h, 4 * h], 0.5, rng),
        normal(&[4 * h], 0.5, rng),
        normal(&[c, 4 * h], 0.5, rng),
        normal(&[h, 4 * h], 0.5, rng),
        normal(&[4 * h], 0.5, rng),
    ];
    check_gradients(
        |t, v| {
            let fwd = LstmVars { w_ih: v[1], w_hh: v[2], b: v[3] };
            let bwd = LstmVars { w_ih: v[4], w_hh: v[5], b: v[6] };
            let y = t.bilstm(v[0], fwd, bwd)?;
            project(t, y, s)
        },
        &inputs,
        o,
    )
}

fn check_conv_block(rng: &mut ChaCha8Rng, o: &CheckOptions) -> Result<CheckReport> {
    let (cin, w) = (2, 3);
    let mut p = Params::new();
    for (name, a, b) in [("blk.d0.c0", cin, w), ("blk.d0.c1", w, w), ("blk.u0.c0", 2 * w, w), ("blk.u0.c1", w, w)] {
        p.insert(format!("{name}.w"), Kind::Param, normal(&[b, a, 3, 3], 0.4, rng));
    }
    for name in ["blk.d0.bn0", "blk.d0.bn1", "blk.u0.bn0", "blk.u0.bn1"] {
        p.add_batch_norm(name, w);
        p.insert(format!("{name}.gamma"), Kind::Param, normal(&[w], 1.0, rng));
        p.insert(format!("{name}.beta"), Kind::Param, normal(&[w], 1.0, rng));
    }
    let s = rng.random();
    check_with_params(&p, &["blk."], vec![normal(&[cin, 4, 4], 1.0, rng)], o, |ctx, v| {
        let (skip, pooled) = down_block(ctx, v[0], "blk.d0")?;
        let y = up_block(ctx, pooled, skip, "blk.u0")?;
        project(ctx.tape, y, s)
    })
}

fn check_feast(rng: &mut ChaCha8Rng, o: &CheckOptions) -> Result<CheckReport> {
    let (v, cin, m, out) = (6, 3, 3, 2);
    let nbrs: Vec<Vec<usize>> = (0..v)
        .map(|i| {
            let mut n: Vec<usize> = (0..v).filter(|&j| j != i && rng.random_bool(0.5)).collect();
            n.push(i);
            n
        })
        .collect();
    let nbrs = Rc::new(Neighbors::PerNode(nbrs));
    let s = rng.random();
    let inputs = [
        normal(&[v, cin], 1.0, rng),
        normal(&[m, cin, out], 0.5, rng),
        normal(&[cin, m], 0.5, rng),
        normal(&[m], 0.5, rng),
        normal(&[out], 0.5, rng),
    ];
    check_gradients(
        |t, x| {
            let p = FeastVars { w: x[1], u: x[2], c: x[3], b: x[4] };
            let y = t.feast_conv(x[0], nbrs.clone(), p)?;
            project(t, y, s)
        },
        &inputs,
        o,
    )
}

fn attention_params(rng: &mut ChaCha8Rng, channels: usize) -> Params {
    let mut p = Params::new();
    attention::init_params(&mut p, &small_attention(), channels, 4, rng);
    // non-zero biases so every parameter has a generic gradient
    let names: Vec<String> = p.iter().map(|(n, _, _)| n.to_string()).collect();
    for n in names {
        if n.ends_with(".b") || n.ends_with(".c") {
            let shape = p.get(&n).expect("listed").shape().to_vec();
            p.insert(n, Kind::Param, normal(&shape, 0.3, rng));
        }
    }
    p
}

fn check_dr_lstm(rng: &mut ChaCha8Rng, o: &CheckOptions) -> Result<CheckReport> {
    let p = attention_params(rng, 4);
    let batch = small_batch(6, rng);
    let s = rng.random();
    check_with_params(&p, &["attn.lstm."], vec![normal(&[6, 4], 1.0, rng)], o, |ctx, v| {
        let (w, _) = attention::dr_lstm_attention(ctx, v[0], &batch.positions)?;
        project(ctx.tape, w, s)
    })
}

fn check_graph(rng: &mut ChaCha8Rng, o: &CheckOptions) -> Result<CheckReport> {
    let p = attention_params(rng, 4);
    let s = rng.random();
    check_with_params(&p, &["attn.graph."], vec![normal(&[8, 4], 1.0, rng)], o, |ctx, v| {
        let (w, _) = attention::graph_attention(ctx, v[0], &small_attention())?;
        project(ctx.tape, w, s)
    })
}

fn check_pillar(rng: &mut ChaCha8Rng, o: &CheckOptions) -> Result<CheckReport> {
    let f = small_attention().fuse_width;
    let p = attention_params(rng, 4);
    let batch = small_batch(5, rng);
    let s = rng.random();
    let rows = normal(&[batch.rows(), f], 1.0, rng);
    check_with_params(&p, &["attn.pillar.point", "attn.pillar.slot"], vec![rows], o, |ctx, v| {
        let w = attention::pillar_attention(ctx, v[0], &batch, "attn.pillar")?;
        project(ctx.tape, w, s)
    })
}

fn check_ma_fuse(rng: &mut ChaCha8Rng, o: &CheckOptions) -> Result<CheckReport> {
    let p = attention_params(rng, 4);
    let batch = small_batch(8, rng);
    let s = rng.random();
    let rows = normal(&[batch.rows(), 4], 1.0, rng);
    check_with_params(&p, &["attn."], vec![rows], o, |ctx, v| {
        let out = attention::ma_fuse(ctx, v[0], &batch, &small_attention())?;
        project(ctx.tape, out.rows, s)
    })
}

/// Network and loss on a 16x16 grid with at most 8 occupied pillars.
pub fn full_model_case(seed: u64) -> (ModelConfig, Params, FrameInput, Vec<Option<usize>>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let grid = GridConfig {
        x_range: (-3.2, 3.2),
        y_range: (-3.2, 3.2),
        z_range: (-2.5, 1.5),
        pillar_size: [0.4, 0.4, 4.0],
        max_points: 4,
        max_pillars: 8,
    };
    let cfg = ModelConfig {
        grid,
        classes: 4,
        pfn_channels: 6,
        unet_widths: vec![3, 4],
        use_occupancy: true,
        use_ma: true,
        attention: small_attention(),
    };
    let mut params = init_params(&cfg, seed);
    let names: Vec<String> = params.iter().map(|(n, _, _)| n.to_string()).collect();
    for n in names {
        if n.ends_with(".beta") || n.ends_with(".b") || n.ends_with(".c") {
            let shape = params.get(&n).expect("listed").shape().to_vec();
            params.insert(n, Kind::Param, normal(&shape, 0.3, &mut rng));
        }
    }
    let mut points = Vec::new();
    let mut classes = Vec::new();
    for _ in 0..8 {
        let (cx, cy) = (rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0));
        let class = rng.random_range(1..=4u16);
        for _ in 0..rng.random_range(1..=3) {
            let z = rng.random_range(-2.0..1.0);
            points.push(Point::new(cx + rng.random_range(-0.1..0.1), cy + rng.random_range(-0.1..0.1), z, rng.random()));
            classes.push(class);
        }
    }
    let cloud = LabeledCloud::new(PointCloud::new(points), classes).expect("matched");
    let map = crate::dataio::ClassMap::synthetic();
    let lcfg = labels::LabelGenConfig::for_classes(&map);
    let targets = cell_targets(&labels::sparse_labels(&cloud, &cfg.grid, &lcfg), &map);
    let input = FrameInput::new(&cloud.cloud, &cfg.grid, [0.0; 3], seed).expect("valid grid");
    (cfg, params, input, targets)
}

fn check_full_model(rng: &mut ChaCha8Rng, o: &CheckOptions) -> Result<CheckReport> {
    let (cfg, params, input, targets) = full_model_case(rng.random());
    let loss = SegLossConfig {
        weights: vec![1.0, 2.0, 1.5, 1.0],
        ..SegLossConfig::uniform(4)
    };
    let opts = CheckOptions {
        max_coords: Some(6),
        ..o.clone()
    };
    check_with_params(&params, &[""], Vec::new(), &opts, |ctx, _| {
        let out = segnet_forward(ctx, &input, &cfg)?;
        ctx.tape.seg_loss(out.logits, &targets, &loss)
    })
}

pub const CHECKS: &[Check] = &[
    ("affine", check_affine),
    ("batch_norm", check_batch_norm),
    ("activations", check_activations),
    ("bilstm", check_bilstm),
    ("conv_block", check_conv_block),
    ("feast_conv", check_feast),
    ("dr_lstm_attention", check_dr_lstm),
    ("graph_attention", check_graph),
    ("pillar_attention", check_pillar),
    ("ma_fuse", check_ma_fuse),
    ("segnet_seg_loss", check_full_model),
];

/// Runs every check; each draws its random point from its own stream.
pub fn run_suite(seed: u64) -> Result<SuiteReport> {
    let opts = CheckOptions::default();
    let mut results = Vec::with_capacity(CHECKS.len());
    for (i, (name, f)) in CHECKS.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64 + 1);
        let t0 = Instant::now();
        let report = f(&mut rng, &opts)?;
        results.push(CheckResult {
            name,
            report,
            seconds: t0.elapsed().as_secs_f64(),
        });
    }
    Ok(SuiteReport { results })
}
