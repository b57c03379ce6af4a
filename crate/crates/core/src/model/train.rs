//! Synthetic datasets, the training loop and held-out evaluation.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::loss::{cell_targets, SegLossConfig};
use super::metrics::{Confusion, IouReport};
use super::{argmax_channels, init_params, segnet_forward, FrameInput, ModelConfig};
use crate::augment::{apply_augment, AugmentConfig, AugmentParams};
use crate::config::FlatConfig;
use crate::dataio::{
    generate_synthetic_frame, generate_synthetic_sequence, ClassMap, LabeledCloud, PointCloud, SceneSpec,
};
use crate::labels::{merged_cloud, sparse_labels, LabelGenConfig};
use crate::nn::optim::{Adam, AdamConfig};
use crate::nn::{BnStats, Ctx, Kind, Mode, Params, Tape, Tensor};
use crate::occupancy::ObservabilityMap;
use crate::{par, Error, Result};

/// splitmix64 of `base` mixed with a stream tag and an index.
pub fn derive_seed(base: u64, tag: u64, i: u64) -> u64 {
    let mut z = base
        .wrapping_add(tag.wrapping_mul(0xD1B5_4A32_D192_ED03))
        .wrapping_add(i.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LabelMode {
    Sparse,
    Dense,
}

impl LabelMode {
    fn parse(v: &str, suffix: &str) -> Result<Self> {
        match v.strip_suffix(suffix).unwrap_or(v) {
            "sparse" => Ok(Self::Sparse),
            "dense" => Ok(Self::Dense),
            _ => Err(Error::Config(format!("unknown mode `{v}`, expected sparse{suffix} or dense{suffix}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Sparse => "sparse",
            Self::Dense => "dense",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub train_frames: usize,
    pub val_frames: usize,
    pub train_mode: LabelMode,
    pub eval_mode: LabelMode,
    /// Frames per sequence for dense labels; the middle one is the sample.
    pub sequence_frames: usize,
    pub sequence_step: f64,
    pub scene: SceneSpec,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    /// Epochs after which the learning rate is multiplied by `lr_gamma`.
    pub lr_steps: Vec<usize>,
    pub lr_gamma: f64,
    pub augment: AugmentConfig,
    pub loss: SegLossConfig,
    pub seed: u64,
}

impl TrainConfig {
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let n = self.lr_steps.iter().filter(|&&s| s <= epoch).count();
        self.adam.lr * self.lr_gamma.powi(n as i32)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub classes: ClassMap,
    pub model: ModelConfig,
    pub labels: LabelGenConfig,
    pub data: DataConfig,
    pub train: TrainConfig,
}

/// Run defaults for the synthetic scenes. Posts and walls cover under
/// one percent of the labeled cells, hence their loss weights.
pub const TOY_DEFAULTS: &str = "
loss.weight.object = 20
loss.weight.building = 20
";

impl RunConfig {
    /// Desk-scale defaults on the synthetic scene distribution.
    pub fn toy() -> Self {
        Self::from_config(&FlatConfig::new()).expect("default run config")
    }

    /// Reads `mode`, `eval`, `data.*`, `train.*`, `augment.*`, `loss.*`,
    /// `labels.*`, `scene.*` and the model keys over [`TOY_DEFAULTS`];
    /// keys absent from both take the built-in defaults.
    pub fn from_config(user: &FlatConfig) -> Result<Self> {
        let mut cfg = FlatConfig::parse(TOY_DEFAULTS)?;
        cfg.merge(user);
        let cfg = &cfg;
        let classes = ClassMap::synthetic();
        let model = ModelConfig::from_config(cfg, &ModelConfig::toy(classes.num_supervised()))?;
        if model.classes != classes.num_supervised() {
            return Err(Error::Config(format!(
                "model.classes = {} but the class map supervises {}",
                model.classes,
                classes.num_supervised()
            )));
        }
        let train_mode = LabelMode::parse(cfg.get("mode").unwrap_or("sparse-train"), "-train")?;
        let eval_mode = LabelMode::parse(cfg.get("eval").unwrap_or("sparse-eval"), "-eval")?;
        if train_mode == LabelMode::Dense && eval_mode == LabelMode::Sparse {
            return Err(Error::Config("dense-train can only be evaluated with dense-eval".into()));
        }
        let data = DataConfig {
            train_frames: cfg.parse_or("data.train_frames", 200)?,
            val_frames: cfg.parse_or("data.val_frames", 50)?,
            train_mode,
            eval_mode,
            sequence_frames: cfg.parse_or("data.sequence_frames", 5)?,
            sequence_step: cfg.parse_or("data.sequence_step", 2.0)?,
            scene: SceneSpec::toy_with(&cfg.section("scene."), &classes)?,
            seed: cfg.parse_or("data.seed", 1)?,
        };
        if data.sequence_frames == 0 || data.val_frames == 0 {
            return Err(Error::Config("sequence and validation frame counts must be positive".into()));
        }
        let d = AdamConfig::default();
        let adam = AdamConfig {
            lr: cfg.parse_or("train.lr", 4e-3)?,
            beta1: cfg.parse_or("train.beta1", d.beta1)?,
            beta2: cfg.parse_or("train.beta2", d.beta2)?,
            eps: cfg.parse_or("train.eps", d.eps)?,
            weight_decay: cfg.parse_or("train.weight_decay", d.weight_decay)?,
        };
        let train = TrainConfig {
            epochs: cfg.parse_or("train.epochs", 8)?,
            batch_size: cfg.parse_or("train.batch_size", 2)?,
            adam,
            lr_steps: cfg.list_or("train.lr_steps", &[5, 7])?,
            lr_gamma: cfg.parse_or("train.lr_gamma", 0.3)?,
            augment: AugmentConfig::from_config(cfg)?,
            loss: SegLossConfig::from_config(cfg, &classes, train_mode == LabelMode::Dense)?,
            seed: cfg.parse_or("seed", 0)?,
        };
        if train.batch_size == 0 || !(train.adam.lr > 0.0) {
            return Err(Error::Config("batch size and learning rate must be positive".into()));
        }
        let labels = LabelGenConfig::from_config(cfg, &classes)?;
        Ok(Self {
            classes,
            model,
            labels,
            data,
            train,
        })
    }
}

/// One network input frame and, in dense mode, the merged cloud its
/// labels come from.
#[derive(Debug, Clone)]
pub struct Sample {
    pub frame: LabeledCloud,
    pub label_source: Option<LabeledCloud>,
}

impl Sample {
    pub fn label_cloud(&self) -> &LabeledCloud {
        self.label_source.as_ref().unwrap_or(&self.frame)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
}

/// Synthetic samples of one split with labels of the given mode.
pub fn generate_dataset(run: &RunConfig, split: Split, mode: LabelMode) -> Result<Vec<Sample>> {
    let d = &run.data;
    let (n, tag) = match split {
        Split::Train => (d.train_frames, 1),
        Split::Val => (d.val_frames, 2),
    };
    par::map_range(n, |i| {
        let seed = derive_seed(d.seed, tag, i as u64);
        match mode {
            LabelMode::Sparse => Ok(Sample {
                frame: generate_synthetic_frame(seed, &d.scene)?,
                label_source: None,
            }),
            LabelMode::Dense => {
                let seq = generate_synthetic_sequence(seed, &d.scene, d.sequence_frames, d.sequence_step)?;
                let clouds: Vec<LabeledCloud> = seq.iter().map(|f| f.cloud.clone()).collect();
                let poses: Vec<_> = seq.iter().map(|f| f.pose).collect();
                let mid = d.sequence_frames / 2;
                let merged = merged_cloud(mid, &clouds, &poses, &run.labels)?;
                Ok(Sample {
                    frame: clouds[mid].clone(),
                    label_source: Some(merged),
                })
            }
        }
    })
    .into_iter()
    .collect()
}

/// Per-cell supervision targets of `cloud`, `None` on unlabeled cells.
pub fn targets_of(run: &RunConfig, cloud: &LabeledCloud) -> Vec<Option<usize>> {
    let grid = sparse_labels(cloud, &run.model.grid, &run.labels);
    cell_targets(&grid, &run.classes)
}

struct FrameGrad {
    loss: f64,
    grads: BTreeMap<String, Vec<f64>>,
    stats: Vec<(String, BnStats)>,
}

fn frame_gradient(params: &Params, run: &RunConfig, sample: &Sample, aug_seed: u64, pillar_seed: u64) -> Result<Option<FrameGrad>> {
    let (frame, ap) = apply_augment(&sample.frame, &run.train.augment, aug_seed);
    let label_cloud = match &sample.label_source {
        Some(src) => LabeledCloud {
            cloud: ap.apply_cloud(&src.cloud),
            classes: src.classes.clone(),
        },
        None => frame.clone(),
    };
    let targets = targets_of(run, &label_cloud);
    if targets.iter().all(Option::is_none) {
        return Ok(None);
    }
    let input = FrameInput::new(&frame.cloud, &run.model.grid, ap.apply([0.0; 3]), pillar_seed)?;
    let mut tape = Tape::new();
    let mut ctx = Ctx::new(&mut tape, params, Mode::Train, true);
    let out = segnet_forward(&mut ctx, &input, &run.model)?;
    let stats = ctx.take_stats();
    let bound: Vec<(String, crate::nn::Var)> = ctx
        .bound()
        .iter()
        .filter(|(n, _)| params.kind(n) == Some(Kind::Param))
        .map(|(n, v)| (n.clone(), *v))
        .collect();
    drop(ctx);
    let loss = tape.seg_loss(out.logits, &targets, &run.train.loss)?;
    let value = tape.value(loss).item();
    let g = tape.backward(loss);
    let grads = bound
        .into_iter()
        .filter_map(|(n, v)| g.get(v).map(|s| (n, s.to_vec())))
        .collect();
    Ok(Some(FrameGrad { loss: value, grads, stats }))
}

/// Network output for a bare point cloud. No label information reaches
/// this function.
#[derive(Debug, Clone)]
pub struct Prediction {
    pub logits: Tensor,
    pub classes: Vec<usize>,
    pub observability: ObservabilityMap,
}

pub fn predict(params: &Params, cfg: &ModelConfig, cloud: &PointCloud, origin: [f64; 3], seed: u64) -> Result<Prediction> {
    let input = FrameInput::new(cloud, &cfg.grid, origin, seed)?;
    let mut tape = Tape::new();
    let mut ctx = Ctx::new(&mut tape, params, Mode::Infer, false);
    let out = segnet_forward(&mut ctx, &input, cfg)?;
    let logits = tape.value(out.logits).clone();
    if !logits.all_finite() {
        return Err(Error::NonFinite("prediction logits".into()));
    }
    Ok(Prediction {
        classes: argmax_channels(&logits),
        logits,
        observability: input.observability,
    })
}

#[derive(Debug, Clone)]
pub struct EvalResult {
    pub loss: f64,
    pub confusion: Confusion,
    pub report: IouReport,
}

/// Held-out loss and IoU over cells that are both observed and labeled.
pub fn evaluate(params: &Params, run: &RunConfig, samples: &[Sample]) -> Result<EvalResult> {
    let k = run.model.classes;
    let per_frame: Vec<Result<(f64, Confusion)>> = par::map_range(samples.len(), |i| {
        let pred = predict(params, &run.model, &samples[i].frame.cloud, [0.0; 3], derive_seed(run.train.seed, 3, i as u64))?;
        let targets = targets_of(run, samples[i].label_cloud());
        let mask = pred.observability.observed();
        let mut c = Confusion::new(k);
        c.add(&pred.classes, &targets, &mask)?;
        let mut tape = Tape::new();
        let x = tape.constant(pred.logits);
        let loss = if targets.iter().any(Option::is_some) {
            let l = tape.seg_loss(x, &targets, &run.train.loss)?;
            tape.value(l).item()
        } else {
            0.0
        };
        Ok((loss, c))
    });
    let mut confusion = Confusion::new(k);
    let mut loss = 0.0;
    for r in per_frame {
        let (l, c) = r?;
        loss += l;
        confusion.merge(&c);
    }
    let report = IouReport::from_confusion(&confusion)?;
    Ok(EvalResult {
        loss: loss / samples.len().max(1) as f64,
        confusion,
        report,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_miou: f64,
    pub val_iou: Vec<Option<f64>>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: Params,
    pub log: Vec<EpochLog>,
    /// Augmentation parameters of the first sample in every step, for the
    /// run log.
    pub augment_log: Vec<(usize, AugmentParams)>,
    pub final_eval: EvalResult,
}

/// Adam over the weighted segmentation loss, `batch_size` frames per
/// step with gradients averaged. Deterministic given the run config.
pub fn train(
    run: &RunConfig,
    train_set: &[Sample],
    val_set: &[Sample],
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    let t = &run.train;
    let mut params = init_params(&run.model, t.seed);
    let mut adam = Adam::new(t.adam.clone());
    let mut log = Vec::with_capacity(t.epochs);
    let mut augment_log = Vec::new();
    let mut step = 0usize;
    for epoch in 0..t.epochs {
        let lr = t.lr_at(epoch);
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(t.seed, 10, epoch as u64)));
        let (mut loss_sum, mut loss_n) = (0.0, 0usize);
        for batch in order.chunks(t.batch_size) {
            let seeds: Vec<(usize, u64)> = batch
                .iter()
                .map(|&i| (i, derive_seed(t.seed, 11, (epoch * train_set.len() + i) as u64)))
                .collect();
            augment_log.push((step, crate::augment::sample_params(&t.augment, seeds[0].1)));
            let results = par::map(&seeds, |&(i, s)| frame_gradient(&params, run, &train_set[i], s, s ^ 1));
            let mut sum: BTreeMap<String, Vec<f64>> = BTreeMap::new();
            let mut stats = Vec::new();
            let mut used = 0usize;
            for r in results {
                let Some(fg) = r? else { continue };
                if !fg.loss.is_finite() {
                    return Err(Error::Diverged { step, loss: fg.loss });
                }
                loss_sum += fg.loss;
                loss_n += 1;
                used += 1;
                for (n, g) in fg.grads {
                    match sum.get_mut(&n) {
                        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                        None => {
                            sum.insert(n, g);
                        }
                    }
                }
                stats.push(fg.stats);
            }
            if used == 0 {
                continue;
            }
            let inv = 1.0 / used as f64;
            for g in sum.values_mut() {
                g.iter_mut().for_each(|v| *v *= inv);
            }
            adam.step(&mut params, &sum, lr)?;
            for frame_stats in &stats {
                for (name, s) in frame_stats {
                    params.update_running(name, s)?;
                }
            }
            step += 1;
        }
        let ev = evaluate(&params, run, val_set)?;
        let entry = EpochLog {
            epoch: epoch + 1,
            lr,
            train_loss: loss_sum / loss_n.max(1) as f64,
            val_loss: ev.loss,
            val_miou: ev.report.miou,
            val_iou: ev.report.per_class.clone(),
        };
        on_epoch(&entry);
        log.push(entry);
    }
    let final_eval = evaluate(&params, run, val_set)?;
    Ok(TrainOutcome {
        params,
        log,
        augment_log,
        final_eval,
    })
}

fn fmt_iou(v: Option<f64>) -> String {
    v.map_or_else(|| "undefined".to_string(), |x| x.to_string())
}

/// Flat `key = value` metrics; class names index the per-class entries.
pub fn metrics_text(log: &[EpochLog], final_eval: &EvalResult, map: &ClassMap) -> String {
    let names: Vec<&str> = map.supervised().into_iter().map(|k| map.name(k)).collect();
    let mut c = FlatConfig::new();
    for e in log {
        let p = format!("epoch.{:03}", e.epoch);
        c.set(&format!("{p}.lr"), &e.lr.to_string());
        c.set(&format!("{p}.train_loss"), &e.train_loss.to_string());
        c.set(&format!("{p}.val_loss"), &e.val_loss.to_string());
        c.set(&format!("{p}.val_miou"), &e.val_miou.to_string());
    }
    eval_metrics(&mut c, "final", final_eval, &names);
    c.to_text()
}

pub fn eval_metrics(c: &mut FlatConfig, prefix: &str, ev: &EvalResult, names: &[&str]) {
    c.set(&format!("{prefix}.loss"), &ev.loss.to_string());
    c.set(&format!("{prefix}.miou"), &ev.report.miou.to_string());
    c.set(&format!("{prefix}.cells"), &ev.confusion.total().to_string());
    for (name, v) in names.iter().zip(&ev.report.per_class) {
        c.set(&format!("{prefix}.iou.{name}"), &fmt_iou(*v));
    }
}
