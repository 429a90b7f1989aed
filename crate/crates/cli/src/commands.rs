use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};
use shaftpose::datagen::{generate_dataset, write_dataset, Dataset};
use shaftpose::detector::{DetectorConfig, Trainer, TrainingData};
use shaftpose::geometry::{BBox, CameraModel, ShaftPose};
use shaftpose::gradsuite::{run_cases, GradCase};
use shaftpose::infer_eval::{detect, evaluate, Detection, EvalReport, EvalScene};
use shaftpose::nn::Checkpoint;
use shaftpose::renderer::{mask_to_bbox, render_silhouette, ShaftGeometry};

use crate::{io_err, CliError, RunConfig};

const BOX_COLOR: Rgb<u8> = Rgb([255, 40, 40]);
const CONTOUR_COLOR: Rgb<u8> = Rgb([40, 255, 80]);

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(io_err(path))
}

fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).expect("plain data serializes") + "\n";
    write_text(path, &text)
}

fn create_dir(path: &Path) -> Result<(), CliError> {
    fs::create_dir_all(path).map_err(io_err(path))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub seed: u64,
    pub first_index: u64,
    pub count: u64,
    pub shafts: usize,
    pub two_shaft_images: usize,
    pub pose_stripped_images: usize,
    pub pose_stripped_fraction: f64,
}

/// Generates records `first_index..first_index + count` into `out`, together with
/// `summary.json` and the resolved `config.json`.
pub fn run_gen_data(cfg: &RunConfig, out: &Path) -> Result<DatasetSummary, CliError> {
    if cfg.count == 0 {
        return Err(CliError::Usage("--count must be at least 1".into()));
    }
    cfg.validate()?;
    let samples = generate_dataset(cfg.seed, cfg.first_index, cfg.count, &cfg.generation())?;
    write_dataset(out, &samples)?;
    let stripped = samples.iter().filter(|s| !s.record.is_pose_labeled()).count();
    let summary = DatasetSummary {
        seed: cfg.seed,
        first_index: cfg.first_index,
        count: cfg.count,
        shafts: samples.iter().map(|s| s.record.shafts.len()).sum(),
        two_shaft_images: samples.iter().filter(|s| s.record.shafts.len() == 2).count(),
        pose_stripped_images: stripped,
        pose_stripped_fraction: stripped as f64 / samples.len() as f64,
    };
    write_json(&out.join("summary.json"), &summary)?;
    write_text(&out.join("config.json"), &cfg.to_json())?;
    Ok(summary)
}

/// One line of `loss.jsonl`. `step` counts completed updates; `lr` is the rate that update used.
/// The three terms are unweighted and divided by the matched-anchor count, like `total`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: u64,
    pub lr: f64,
    pub conf: f64,
    pub bbox: f64,
    pub pose: f64,
    pub total: f64,
    pub positives: usize,
}

fn load_training_set(dirs: &[PathBuf]) -> Result<Dataset, CliError> {
    if dirs.is_empty() {
        return Err(CliError::Usage("no training data directories given".into()));
    }
    let mut all = Dataset::default();
    for d in dirs {
        all.extend(Dataset::load(d)?);
    }
    Ok(all)
}

fn mismatch<A: Serialize, B: Serialize>(what: &'static str, ck: &A, req: &B) -> CliError {
    CliError::Mismatch {
        what,
        checkpoint: serde_json::to_string(ck).expect("plain data serializes"),
        requested: serde_json::to_string(req).expect("plain data serializes"),
    }
}

/// Keeps the first `steps` records of an existing loss log so a resumed run appends to an
/// unbroken trace.
fn truncated_log(path: &Path, steps: u64) -> Result<Vec<String>, CliError> {
    let Ok(file) = File::open(path) else {
        return Ok(Vec::new());
    };
    let mut kept = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(io_err(path))?;
        let rec: LossRecord = serde_json::from_str(&line)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        if rec.step <= steps {
            kept.push(line);
        }
    }
    Ok(kept)
}

/// Trains into `cfg.run_dir`, optionally continuing from a checkpoint whose configuration must
/// match `cfg` exactly. Writes `config.json`, `loss.jsonl`, periodic
/// `checkpoints/step_NNNNNN.ckpt` and `final.ckpt`.
pub fn run_train(
    cfg: &RunConfig,
    resume: Option<&Path>,
    mut progress: impl FnMut(&LossRecord),
) -> Result<Trainer, CliError> {
    cfg.validate()?;
    let mut trainer = match resume {
        None => Trainer::new(&cfg.detector(), cfg.train(), cfg.ranges())?,
        Some(path) => {
            let t = Trainer::from_checkpoint(&Checkpoint::load(path)?)?;
            if *t.model.config() != cfg.detector() {
                return Err(mismatch("architecture", t.model.config(), &cfg.detector()));
            }
            if t.config != cfg.train() {
                return Err(mismatch("training config", &t.config, &cfg.train()));
            }
            if t.ranges != cfg.ranges() {
                return Err(mismatch("pose ranges", &t.ranges, &cfg.ranges()));
            }
            t
        }
    };
    let dataset = load_training_set(&cfg.train_data)?;
    let data = TrainingData::new(dataset, trainer.anchors(), &cfg.ranges(), cfg.match_threshold)?;

    let run = &cfg.run_dir;
    let ck_dir = run.join("checkpoints");
    create_dir(&ck_dir)?;
    write_text(&run.join("config.json"), &cfg.to_json())?;
    let log_path = run.join("loss.jsonl");
    let kept = truncated_log(&log_path, trainer.step)?;
    let mut log = BufWriter::new(File::create(&log_path).map_err(io_err(&log_path))?);
    for line in kept {
        writeln!(log, "{line}").map_err(io_err(&log_path))?;
    }

    let schedule = trainer.schedule();
    while trainer.step < cfg.steps {
        let lr = schedule.lr(trainer.step);
        let loss = trainer.step_on(&data)?;
        let n = loss.n as f64;
        let rec = LossRecord {
            step: trainer.step,
            lr,
            conf: loss.conf / n,
            bbox: loss.bbox / n,
            pose: loss.pose / n,
            total: loss.total,
            positives: loss.positives,
        };
        let line = serde_json::to_string(&rec).expect("plain data serializes");
        writeln!(log, "{line}").map_err(io_err(&log_path))?;
        progress(&rec);
        if trainer.step % cfg.checkpoint_every == 0 && trainer.step < cfg.steps {
            log.flush().map_err(io_err(&log_path))?;
            let p = ck_dir.join(format!("step_{:06}.ckpt", trainer.step));
            trainer.to_checkpoint().save(&p)?;
        }
    }
    log.flush().map_err(io_err(&log_path))?;
    trainer.to_checkpoint().save(&run.join("final.ckpt"))?;
    Ok(trainer)
}

fn camera_for(cfg: &RunConfig, width: u32, height: u32) -> Result<CameraModel, CliError> {
    CameraModel::new(width, height, cfg.horizontal_fov).map_err(|e| CliError::Config(e.to_string()))
}

/// Evaluates a checkpoint on the dataset in `data`. When `expected` is given the checkpoint's
/// architecture must equal it. Writes `eval.json`, `eval.txt`, `eval_images.jsonl` and
/// `config.json` into `out`.
pub fn run_eval(
    cfg: &RunConfig,
    checkpoint: &Path,
    expected: Option<&DetectorConfig>,
    data: &Path,
    out: &Path,
) -> Result<EvalReport, CliError> {
    cfg.validate()?;
    let mut trainer = Trainer::from_checkpoint(&Checkpoint::load(checkpoint)?)?;
    if let Some(exp) = expected {
        if trainer.model.config() != exp {
            return Err(mismatch("architecture", trainer.model.config(), exp));
        }
    }
    let dataset = Dataset::load(data)?;
    let size = trainer.model.config().input_size;
    let camera = camera_for(cfg, size, size)?;
    let geom = cfg.shaft();
    let ranges = trainer.ranges;
    let scene = EvalScene {
        camera: &camera,
        geom: &geom,
        ranges: &ranges,
    };
    let (report, diagnostics) = evaluate(&mut trainer.model, &dataset, scene, &cfg.inference())?;

    create_dir(out)?;
    write_json(&out.join("eval.json"), &report)?;
    write_text(&out.join("eval.txt"), &report.to_table())?;
    let mut lines = String::new();
    for d in &diagnostics {
        lines.push_str(&serde_json::to_string(d).expect("plain data serializes"));
        lines.push('\n');
    }
    write_text(&out.join("eval_images.jsonl"), &lines)?;
    write_text(&out.join("config.json"), &cfg.to_json())?;
    Ok(report)
}

/// Contents of `detections.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionsFile {
    pub image: PathBuf,
    pub width: u32,
    pub height: u32,
    pub detections: Vec<Detection>,
}

#[derive(Debug, Clone, Default)]
pub struct InferOptions {
    pub checkpoint: Option<PathBuf>,
    /// Draw this pose instead of running a model.
    pub pose_override: Option<ShaftPose>,
    /// Scale images whose size differs from the model input instead of rejecting them.
    pub resize: bool,
}

fn draw_rect(img: &mut RgbImage, b: &BBox, color: Rgb<u8>) {
    let (w, h) = (img.width() as i64, img.height() as i64);
    if w == 0 || h == 0 {
        return;
    }
    let clamp = |v: f64, hi: i64| (v.round() as i64).clamp(0, hi - 1);
    let (x0, x1) = (clamp(b.x_min, w), clamp(b.x_max - 1.0, w));
    let (y0, y1) = (clamp(b.y_min, h), clamp(b.y_max - 1.0, h));
    for x in x0..=x1 {
        img.put_pixel(x as u32, y0 as u32, color);
        img.put_pixel(x as u32, y1 as u32, color);
    }
    for y in y0..=y1 {
        img.put_pixel(x0 as u32, y as u32, color);
        img.put_pixel(x1 as u32, y as u32, color);
    }
}

/// Draws each detection's box, then the contour of its pose re-rendered with `camera`, on top.
pub fn draw_overlay(
    image: &RgbImage,
    detections: &[Detection],
    camera: &CameraModel,
    geom: &ShaftGeometry,
) -> RgbImage {
    let mut out = image.clone();
    for d in detections {
        draw_rect(&mut out, &d.bbox, BOX_COLOR);
        let contour = render_silhouette(camera, &d.pose, geom).boundary();
        for y in 0..contour.height().min(out.height()) {
            for x in 0..contour.width().min(out.width()) {
                if contour.get(x, y) {
                    out.put_pixel(x, y, CONTOUR_COLOR);
                }
            }
        }
    }
    out
}

/// Detects shafts in one image, or draws `pose_override`, and writes `detections.json` and
/// `overlay.png` into `out`.
pub fn run_infer(
    cfg: &RunConfig,
    image_path: &Path,
    opts: &InferOptions,
    out: &Path,
) -> Result<DetectionsFile, CliError> {
    cfg.validate()?;
    let mut img = image::open(image_path)
        .map_err(|source| CliError::Image {
            path: image_path.to_path_buf(),
            source,
        })?
        .to_rgb8();
    let geom = cfg.shaft();
    let detections = if let Some(pose) = opts.pose_override {
        let camera = camera_for(cfg, img.width(), img.height())?;
        let mask = render_silhouette(&camera, &pose, &geom);
        match mask_to_bbox(&mask) {
            Ok(bbox) => vec![Detection {
                bbox,
                score: 1.0,
                pose,
                anchor: 0,
            }],
            Err(_) => Vec::new(),
        }
    } else {
        let ck = opts
            .checkpoint
            .as_deref()
            .ok_or_else(|| CliError::Usage("infer needs --checkpoint or --pose-override".into()))?;
        let mut trainer = Trainer::from_checkpoint(&Checkpoint::load(ck)?)?;
        let size = trainer.model.config().input_size;
        if (img.width(), img.height()) != (size, size) {
            if !opts.resize {
                return Err(CliError::Usage(format!(
                    "image is {}x{} but the model expects {size}x{size}; pass --resize to scale it",
                    img.width(),
                    img.height()
                )));
            }
            img = image::imageops::resize(&img, size, size, image::imageops::FilterType::Triangle);
        }
        let anchors = trainer.model.config().build_anchors()?;
        let ranges = trainer.ranges;
        detect(&mut trainer.model, &[&img], &anchors, &ranges, &cfg.inference(), 1)?
            .pop()
            .unwrap_or_default()
    };
    let camera = camera_for(cfg, img.width(), img.height())?;
    let overlay = draw_overlay(&img, &detections, &camera, &geom);

    create_dir(out)?;
    let file = DetectionsFile {
        image: image_path.to_path_buf(),
        width: img.width(),
        height: img.height(),
        detections,
    };
    write_json(&out.join("detections.json"), &file)?;
    let p = out.join("overlay.png");
    overlay
        .save(&p)
        .map_err(|source| CliError::Image { path: p, source })?;
    Ok(file)
}

/// Runs `cases`, printing one line per case. Returns whether every case passed.
pub fn grad_check_report(cases: &[GradCase], out: &mut dyn Write) -> std::io::Result<bool> {
    let results = run_cases(cases);
    let width = results.iter().map(|r| r.name.len()).max().unwrap_or(0);
    for r in &results {
        writeln!(
            out,
            "{:<width$}  worst {:.3e}  tol {:.0e}  {}",
            r.name,
            r.worst,
            r.tolerance,
            if r.passed() { "PASS" } else { "FAIL" }
        )?;
    }
    Ok(results.iter().all(|r| r.passed()))
}
