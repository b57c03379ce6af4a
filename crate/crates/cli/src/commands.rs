//! Subcommand bodies. Every machine-readable output is a function of the
//! config and seed alone; timings only go to the log.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use bevseg::config::FlatConfig;
use bevseg::dataio::{
    generate_synthetic_sequence, labels_to_bytes, parse_labels, parse_point_cloud, parse_poses, poses_to_text, ClassMap,
    LabeledCloud, PointCloud, Pose, SceneSpec,
};
use bevseg::labels::{densify, sparse_labels, LabelGenConfig, SemanticGrid};
use bevseg::model::train::{
    derive_seed, eval_metrics, generate_dataset, metrics_text, predict, train, RunConfig, Split,
};
use bevseg::model::ModelConfig;
use bevseg::nn::checkpoint;
use bevseg::occupancy::{inject_noise, observability, visibility, VoxelState};
use bevseg::pillars::GridConfig;
use bevseg::render::{self, Palette};
use bevseg::{verify, Error};

use crate::args::Invocation;

pub enum Failure {
    Usage(String),
    Data(String),
    Verification(String),
}

impl Failure {
    pub fn exit_code(&self) -> i32 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Data(_) => 2,
            Failure::Verification(_) => 3,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            Failure::Usage(m) | Failure::Data(m) | Failure::Verification(m) => m,
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) => Failure::Usage(e.to_string()),
            _ => Failure::Data(e.to_string()),
        }
    }
}

type Outcome = Result<(), Failure>;

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<(), Error> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read(path: &Path) -> Result<Vec<u8>, Error> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn seed(cfg: &FlatConfig) -> Result<u64, Error> {
    cfg.parse_or("seed", 0)
}

fn class_map(cfg: &FlatConfig, default: &str) -> Result<ClassMap, Error> {
    let name = cfg.get("classmap").unwrap_or(default);
    match ClassMap::by_name(name) {
        Some(m) => Ok(m),
        None => ClassMap::load(Path::new(name)),
    }
}

fn grid(cfg: &FlatConfig) -> Result<GridConfig, Error> {
    GridConfig::from_config(cfg, "grid.", &GridConfig::toy())
}

pub fn dispatch(inv: &Invocation) -> Outcome {
    let t0 = Instant::now();
    let r = match inv.command.as_str() {
        "synth" => synth(inv),
        "ingest" => ingest(inv),
        "occupancy" => occupancy_cmd(inv),
        "labels" => labels_cmd(inv),
        "gradcheck" => gradcheck(inv),
        "train" => train_cmd(inv),
        "eval" => eval_cmd(inv),
        other => Err(Failure::Usage(format!("unknown command `{other}`"))),
    };
    log::info!("{} finished in {:.2}s", inv.command, t0.elapsed().as_secs_f64());
    r
}

fn frame_name(i: usize) -> String {
    format!("{i:06}")
}

fn synth(inv: &Invocation) -> Outcome {
    let cfg = &inv.config;
    let map = ClassMap::synthetic();
    let spec = SceneSpec::toy_with(&cfg.section("scene."), &map)?;
    let frames: usize = cfg.parse_or("synth.frames", 10)?;
    let step: f64 = cfg.parse_or("synth.step", 2.0)?;
    let seq = generate_synthetic_sequence(seed(cfg)?, &spec, frames, step)?;
    let mut m = FlatConfig::new();
    m.set("frames", &frames.to_string());
    for (i, f) in seq.iter().enumerate() {
        let name = frame_name(i);
        write(&inv.out.join("velodyne").join(format!("{name}.bin")), f.cloud.cloud.to_bin())?;
        write(&inv.out.join("labels").join(format!("{name}.label")), labels_to_bytes(&f.cloud.classes))?;
        m.set(&format!("frame.{name}.points"), &f.cloud.len().to_string());
    }
    let poses: Vec<Pose> = seq.iter().map(|f| f.pose).collect();
    write(&inv.out.join("poses.txt"), poses_to_text(&poses))?;
    write(&inv.out.join("synth.txt"), m.to_text())?;
    log::info!("wrote {frames} synthetic frames to {}", inv.out.display());
    Ok(())
}

/// A sequence directory: `velodyne/*.bin`, optional `labels/*.label` and
/// optional `poses.txt`.
struct Sequence {
    clouds: Vec<PointCloud>,
    labels: Option<Vec<Vec<u16>>>,
    poses: Option<Vec<Pose>>,
}

fn load_sequence(dir: &Path) -> Result<Sequence, Error> {
    let vdir = dir.join("velodyne");
    let mut bins: Vec<PathBuf> = fs::read_dir(&vdir)
        .map_err(|e| Error::io(&vdir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "bin"))
        .collect();
    bins.sort();
    if bins.is_empty() {
        return Err(Error::Format(format!("no .bin scans in {}", vdir.display())));
    }
    let mut clouds = Vec::with_capacity(bins.len());
    let mut labels = Vec::new();
    let ldir = dir.join("labels");
    let have_labels = ldir.is_dir();
    for b in &bins {
        let cloud = parse_point_cloud(&read(b)?).map_err(|e| Error::Format(format!("{}: {e}", b.display())))?;
        if have_labels {
            let lp = ldir.join(b.file_stem().expect("named scan")).with_extension("label");
            let ids = parse_labels(&read(&lp)?)?;
            if ids.len() != cloud.len() {
                return Err(Error::Format(format!(
                    "{} has {} labels for {} points",
                    lp.display(),
                    ids.len(),
                    cloud.len()
                )));
            }
            labels.push(ids);
        }
        clouds.push(cloud);
    }
    let pp = dir.join("poses.txt");
    let poses = if pp.exists() {
        let text = fs::read_to_string(&pp).map_err(|e| Error::io(&pp, e))?;
        let poses = parse_poses(&text)?;
        if poses.len() < clouds.len() {
            return Err(Error::Format(format!("{} poses for {} scans", poses.len(), clouds.len())));
        }
        Some(poses)
    } else {
        None
    };
    Ok(Sequence {
        clouds,
        labels: have_labels.then_some(labels),
        poses,
    })
}

fn remapped(seq: &Sequence, map: &ClassMap) -> Result<Vec<LabeledCloud>, Error> {
    let labels = seq
        .labels
        .as_ref()
        .ok_or_else(|| Error::Format("sequence has no labels/ directory".into()))?;
    seq.clouds
        .iter()
        .zip(labels)
        .map(|(c, l)| LabeledCloud::new(c.clone(), l.iter().map(|&r| map.remap(r)).collect()))
        .collect()
}

fn input_dir(cfg: &FlatConfig) -> Result<PathBuf, Failure> {
    cfg.get("input")
        .map(PathBuf::from)
        .ok_or_else(|| Failure::Usage("`--input DIR` is required".into()))
}

fn ingest(inv: &Invocation) -> Outcome {
    let cfg = &inv.config;
    let map = class_map(cfg, "semantickitti")?;
    let seq = load_sequence(&input_dir(cfg)?)?;
    let mut m = FlatConfig::new();
    m.set("frames", &seq.clouds.len().to_string());
    m.set("poses", &seq.poses.as_ref().map_or(0, Vec::len).to_string());
    let total: usize = seq.clouds.iter().map(PointCloud::len).sum();
    m.set("points", &total.to_string());
    let mut counts = vec![0u64; map.num_classes()];
    for (i, c) in seq.clouds.iter().enumerate() {
        let name = frame_name(i);
        write(&inv.out.join("frames").join(format!("{name}.bin")), c.to_bin())?;
    }
    if seq.labels.is_some() {
        for (i, lc) in remapped(&seq, &map)?.iter().enumerate() {
            for &k in &lc.classes {
                counts[k as usize] += 1;
            }
            write(&inv.out.join("frames").join(format!("{}.label", frame_name(i))), labels_to_bytes(&lc.classes))?;
        }
        for (k, n) in counts.iter().enumerate() {
            m.set(&format!("class.{}", map.name(k as u16)), &n.to_string());
        }
    }
    if let Some(p) = &seq.poses {
        write(&inv.out.join("frames").join("poses.txt"), poses_to_text(p))?;
    }
    write(&inv.out.join("ingest.txt"), m.to_text())?;
    Ok(())
}

/// One scan from `--input FILE.bin`, or a synthetic frame.
fn single_cloud(cfg: &FlatConfig) -> Result<PointCloud, Error> {
    match cfg.get("input") {
        Some(p) => parse_point_cloud(&read(Path::new(p))?),
        None => {
            let map = ClassMap::synthetic();
            let spec = SceneSpec::toy_with(&cfg.section("scene."), &map)?;
            Ok(bevseg::dataio::generate_synthetic_frame(seed(cfg)?, &spec)?.cloud)
        }
    }
}

fn occupancy_cmd(inv: &Invocation) -> Outcome {
    let cfg = &inv.config;
    let g = grid(cfg)?;
    let origin = cfg.triple_or("origin", [0.0; 3])?;
    let mut cloud = single_cloud(cfg)?;
    if let Some(snr) = cfg.get("noise.snr") {
        let snr: f64 = snr
            .parse()
            .map_err(|_| Failure::Usage(format!("`noise.snr = {snr}` is not a number")))?;
        cloud = inject_noise(&cloud, &g, snr, derive_seed(seed(cfg)?, 20, 0))?;
    }
    let obs = observability(&cloud, &g, origin);
    let vis = visibility(&cloud, &g, origin);
    let cols = vis.column_summary();
    write(&inv.out.join("observability.pgm"), render::observability_pgm(&obs))?;
    write(&inv.out.join("observability16.pgm"), render::observability_pgm16(&obs))?;
    write(&inv.out.join("visibility.pgm"), render::visibility_pgm(&cols, g.rows(), g.cols()))?;
    let mut m = FlatConfig::new();
    m.set("points", &cloud.len().to_string());
    m.set("max_count", &obs.max().to_string());
    m.set("observed_cells", &obs.observed().iter().filter(|&&o| o).count().to_string());
    for (name, s) in [("unknown", VoxelState::Unknown), ("free", VoxelState::Free), ("occupied", VoxelState::Occupied)] {
        m.set(&format!("columns.{name}"), &cols.iter().filter(|&&c| c == s).count().to_string());
    }
    write(&inv.out.join("occupancy.txt"), m.to_text())?;
    Ok(())
}

fn count_labels(m: &mut FlatConfig, prefix: &str, g: &SemanticGrid, map: &ClassMap) {
    m.set(&format!("{prefix}.labeled_cells"), &g.labeled_cells().to_string());
    for k in map.supervised() {
        let n = g.labels.iter().filter(|&&l| l == k).count();
        m.set(&format!("{prefix}.cells.{}", map.name(k)), &n.to_string());
    }
}

fn labels_cmd(inv: &Invocation) -> Outcome {
    let cfg = &inv.config;
    let g = grid(cfg)?;
    let (map, clouds, poses) = match cfg.get("input") {
        Some(dir) => {
            let map = class_map(cfg, "semantickitti")?;
            let seq = load_sequence(Path::new(dir))?;
            let clouds = remapped(&seq, &map)?;
            (map, clouds, seq.poses)
        }
        None => {
            let map = ClassMap::synthetic();
            let spec = SceneSpec::toy_with(&cfg.section("scene."), &map)?;
            let frames: usize = cfg.parse_or("labels.frames", 5)?;
            let seq = generate_synthetic_sequence(seed(cfg)?, &spec, frames, cfg.parse_or("labels.step", 2.0)?)?;
            let poses = seq.iter().map(|f| f.pose).collect();
            (map, seq.into_iter().map(|f| f.cloud).collect::<Vec<_>>(), Some(poses))
        }
    };
    let frame: usize = cfg.parse_or("frame", clouds.len() / 2)?;
    if frame >= clouds.len() {
        return Err(Failure::Usage(format!("frame {frame} out of {} frames", clouds.len())));
    }
    let lcfg = LabelGenConfig::from_config(cfg, &map)?;
    let palette = Palette::builtin();
    let mut m = FlatConfig::new();
    let sparse = sparse_labels(&clouds[frame], &g, &lcfg);
    write(&inv.out.join("sparse.ppm"), render::labels_ppm(&sparse, &map, &palette, None))?;
    write(&inv.out.join("sparse.grid"), sparse.to_raw())?;
    count_labels(&mut m, "sparse", &sparse, &map);
    if let Some(poses) = &poses {
        let dense = densify(frame, &clouds, poses, &g, &lcfg)?;
        write(&inv.out.join("dense.ppm"), render::labels_ppm(&dense, &map, &palette, None))?;
        write(&inv.out.join("dense.grid"), dense.to_raw())?;
        count_labels(&mut m, "dense", &dense, &map);
    }
    write(&inv.out.join("legend.txt"), render::legend(&map, &palette))?;
    write(&inv.out.join("labels.txt"), m.to_text())?;
    Ok(())
}

fn gradcheck(inv: &Invocation) -> Outcome {
    let report = verify::run_suite(seed(&inv.config)?)?;
    for r in &report.results {
        log::info!("{} took {:.2}s", r.name, r.seconds);
    }
    let table = report.table();
    print!("{table}");
    write(&inv.out.join("gradcheck.txt"), &table)?;
    if report.passed() {
        Ok(())
    } else {
        Err(Failure::Verification("gradient check failed".into()))
    }
}

fn train_cmd(inv: &Invocation) -> Outcome {
    let run = RunConfig::from_config(&inv.config)?;
    let t0 = Instant::now();
    let train_set = generate_dataset(&run, Split::Train, run.data.train_mode)?;
    let val_set = generate_dataset(&run, Split::Val, run.data.eval_mode)?;
    log::info!("generated {} + {} frames in {:.1}s", train_set.len(), val_set.len(), t0.elapsed().as_secs_f64());
    let mut run_log = String::from("# config\n");
    run_log.push_str(&inv.config.to_text());
    run_log.push_str("# model\n");
    run_log.push_str(&run.model.to_config().to_text());
    let out = train(&run, &train_set, &val_set, |e| {
        log::info!(
            "epoch {} lr {:.2e} train_loss {:.4} val_loss {:.4} val_miou {:.4} ({:.0}s)",
            e.epoch,
            e.lr,
            e.train_loss,
            e.val_loss,
            e.val_miou,
            t0.elapsed().as_secs_f64()
        );
    })?;
    run_log.push_str("# augmentation\n");
    for (step, p) in &out.augment_log {
        run_log.push_str(&format!("step {step} {}\n", p.to_line()));
    }
    let metrics = metrics_text(&out.log, &out.final_eval, &run.classes);
    let meta = run.model.to_config().to_text();
    write(&inv.out.join("model.ckpt"), checkpoint::encode(&out.params, &meta))?;
    write(&inv.out.join("metrics.txt"), &metrics)?;
    write(&inv.out.join("run.log"), run_log)?;
    println!("final.miou = {}", out.final_eval.report.miou);
    Ok(())
}

/// FNV-1a over predicted class indices.
fn fnv(classes: &[usize]) -> u64 {
    classes.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, &c| {
        (h ^ c as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

fn eval_cmd(inv: &Invocation) -> Outcome {
    let cfg = &inv.config;
    let ckpt = cfg
        .get("checkpoint")
        .map(PathBuf::from)
        .ok_or_else(|| Failure::Usage("`--checkpoint FILE` is required".into()))?;
    let (params, meta) = checkpoint::load(&ckpt)?;
    let mut run = RunConfig::from_config(cfg)?;
    let base = run.model.clone();
    run.model = ModelConfig::from_config(&FlatConfig::parse(&meta)?, &base)?;
    let mut val = generate_dataset(&run, Split::Val, run.data.eval_mode)?;
    if cfg.bool_or("eval.tamper_labels", false)? {
        // labels only feed the metrics; predictions must not move
        let k = run.classes.num_classes() as u16;
        for s in val.iter_mut() {
            let lc = s.label_source.as_mut().unwrap_or(&mut s.frame);
            for c in lc.classes.iter_mut() {
                *c = (*c + 1) % k;
            }
            if let Some(raw) = lc.cloud.raw_class.as_mut() {
                raw.iter_mut().for_each(|c| *c = c.wrapping_add(7));
            }
        }
    }
    let ev = bevseg::model::train::evaluate(&params, &run, &val)?;
    let names: Vec<String> = run.classes.supervised().into_iter().map(|k| run.classes.name(k).to_string()).collect();
    let names: Vec<&str> = names.iter().map(String::as_str).collect();
    let mut m = FlatConfig::new();
    eval_metrics(&mut m, "eval", &ev, &names);
    write(&inv.out.join("eval.txt"), m.to_text())?;

    let renders: usize = cfg.parse_or("eval.render", 2)?;
    let palette = Palette::builtin();
    let mut hashes = FlatConfig::new();
    for (i, s) in val.iter().enumerate() {
        let pred = predict(&params, &run.model, &s.frame.cloud, [0.0; 3], derive_seed(run.train.seed, 3, i as u64))?;
        hashes.set(&format!("frame.{}", frame_name(i)), &format!("{:016x}", fnv(&pred.classes)));
        if i < renders {
            let g = &run.model.grid;
            let labels = pred.classes.iter().map(|&c| run.classes.class_of_channel(c)).collect();
            let pg = SemanticGrid {
                rows: g.rows(),
                cols: g.cols(),
                labels,
                histograms: None,
                unlabeled: run.classes.unlabeled_index(),
            };
            let observed = pred.observability.observed();
            write(&inv.out.join(format!("pred_{}.ppm", frame_name(i))), render::labels_ppm(&pg, &run.classes, &palette, Some(&observed)))?;
            let gt = sparse_labels(s.label_cloud(), g, &run.labels);
            write(&inv.out.join(format!("gt_{}.ppm", frame_name(i))), render::labels_ppm(&gt, &run.classes, &palette, None))?;
        }
    }
    write(&inv.out.join("predictions.txt"), hashes.to_text())?;
    write(&inv.out.join("legend.txt"), render::legend(&run.classes, &palette))?;
    println!("eval.miou = {}", ev.report.miou);
    Ok(())
}
