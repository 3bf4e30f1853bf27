use std::fs;
use std::path::{Path, PathBuf};

use dptrack::bbox::BBox;
use dptrack::data::{self, Sequence};
use dptrack::eval::{run_ope, ModelTracker, OpeReport};
use dptrack::gradcheck::{self, Scope};
use dptrack::tracker::{self, checkpoint, Tracker, Variant};
use dptrack::{Graph, Mode, ParamStore, Tensor};
use serde::Serialize;

use crate::config::{echo_path, RunConfig};
use crate::error::CliError;

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<(), CliError> {
    fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

fn read_to_string(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|e| CliError::io(path, e))
}

fn with_path(path: &Path) -> impl Fn(dptrack::Error) -> CliError + '_ {
    move |e| match CliError::from(e) {
        CliError::Io(m) => CliError::Io(format!("{}: {m}", path.display())),
        other => other,
    }
}

pub fn gen(cfg: &RunConfig, out: Option<PathBuf>, seqs: usize) -> Result<(), CliError> {
    if seqs == 0 {
        return Err(CliError::Usage("--seqs must be positive".into()));
    }
    let root = out.unwrap_or_else(|| cfg.paths.data.clone());
    let dataset = data::gen_dataset(&cfg.scene, seqs)?;
    create_dir(&root)?;
    data::write_dataset(&root, &dataset).map_err(with_path(&root))?;
    cfg.echo(&root.join("run.json"))?;
    println!("wrote {seqs} sequences of {} frames to {}", cfg.scene.n_frames, root.display());
    Ok(())
}

fn read_dataset(root: &Path) -> Result<Vec<Sequence>, CliError> {
    let seqs = data::read_dataset(root).map_err(with_path(root))?;
    if seqs.is_empty() {
        return Err(CliError::Usage(format!("no seq_<k> directories under {}", root.display())));
    }
    if let Some(k) = seqs.iter().position(|s| s.boxes.is_empty()) {
        return Err(CliError::Usage(format!("sequence {k} under {} has no {}", root.display(), data::GT_FILE)));
    }
    Ok(seqs)
}

/// `<ckpt>.loss.csv`.
pub fn loss_path(ckpt: &Path) -> PathBuf {
    let mut s = ckpt.as_os_str().to_owned();
    s.push(".loss.csv");
    PathBuf::from(s)
}

pub fn train(cfg: &RunConfig, data: Option<PathBuf>, out: Option<PathBuf>, log_every: usize) -> Result<(), CliError> {
    let root = data.unwrap_or_else(|| cfg.paths.data.clone());
    let ckpt = out.unwrap_or_else(|| cfg.paths.checkpoint.clone());
    let seqs = read_dataset(&root)?;
    let (model, store, log) = tracker::train(&cfg.tracker, &seqs, |r| {
        if log_every > 0 && r.step % log_every == 0 {
            eprintln!("step {:>5}  loss {:.4}  lr {:.2e}", r.step, r.loss, r.lr);
        }
    })?;
    if let Some(dir) = ckpt.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    checkpoint::save(&ckpt, &model, &store).map_err(with_path(&ckpt))?;
    write(&loss_path(&ckpt), tracker::loss_csv(&log))?;
    cfg.echo(&echo_path(&ckpt))?;
    let last = log.last().map_or(f64::NAN, |r| r.loss);
    println!("trained {} steps, final loss {last:.4}, checkpoint {}", log.len(), ckpt.display());
    Ok(())
}

fn load_checkpoint(path: &Path) -> Result<(Tracker, ParamStore<f32>), CliError> {
    checkpoint::load(path).map_err(with_path(path))
}

pub fn track(
    cfg: &RunConfig,
    ckpt: Option<PathBuf>,
    seq_dir: &Path,
    out: &Path,
    init: Option<[f64; 4]>,
    variant: Variant,
) -> Result<(), CliError> {
    let ckpt = ckpt.unwrap_or_else(|| cfg.paths.checkpoint.clone());
    let (model, store) = load_checkpoint(&ckpt)?;
    let seq = data::read_sequence(seq_dir).map_err(with_path(seq_dir))?;
    let init = match (init, seq.boxes.first()) {
        (Some([x, y, w, h]), _) => BBox::new(x, y, w, h),
        (None, Some(&b)) => b,
        (None, None) => {
            return Err(CliError::Usage(format!("{} has no {}; pass --init", seq_dir.display(), data::GT_FILE)))
        }
    };
    let boxes = tracker::track_sequence(&model, &store, &seq.frames, init, variant)?;
    write(out, data::save_annotations(&boxes))?;
    cfg.echo(&echo_path(out))?;
    println!("tracked {} frames to {}", boxes.len(), out.display());
    Ok(())
}

pub enum EvalSource {
    Files { pred: PathBuf, gt: PathBuf },
    Model { ckpt: PathBuf, data: PathBuf },
}

fn load_boxes(path: &Path) -> Result<Vec<BBox>, CliError> {
    data::load_annotations(&read_to_string(path)?).map_err(with_path(path))
}

/// Ground truth from a JSONL file or a sequence directory.
fn load_gt(path: &Path) -> Result<Vec<BBox>, CliError> {
    if path.is_dir() {
        load_boxes(&path.join(data::GT_FILE))
    } else {
        load_boxes(path)
    }
}

fn file_report(pred: &Path, gt: &Path) -> Result<OpeReport, CliError> {
    let (preds, gts) = if pred.is_dir() {
        let dirs = data::list_sequences(gt).map_err(with_path(gt))?;
        if dirs.is_empty() {
            return Err(CliError::Usage(format!("no seq_<k> directories under {}", gt.display())));
        }
        let mut preds = Vec::new();
        let mut gts = Vec::new();
        for d in dirs {
            let name = d.file_name().expect("listed directory").to_string_lossy().into_owned();
            preds.push(load_boxes(&pred.join(format!("{name}.jsonl")))?);
            gts.push(load_gt(&d)?);
        }
        (preds, gts)
    } else {
        (vec![load_boxes(pred)?], vec![load_gt(gt)?])
    };
    Ok(OpeReport::from_trajectories(&preds, &gts)?)
}

pub fn eval(
    cfg: &RunConfig,
    source: EvalSource,
    out: Option<PathBuf>,
    workers: usize,
    variant: Variant,
) -> Result<(), CliError> {
    if workers == 0 {
        return Err(CliError::Usage("--workers must be positive".into()));
    }
    let report = match source {
        EvalSource::Files { pred, gt } => file_report(&pred, &gt)?,
        EvalSource::Model { ckpt, data } => {
            let (model, store) = load_checkpoint(&ckpt)?;
            let seqs = read_dataset(&data)?;
            run_ope(&ModelTracker { model: &model, store: &store, variant }, &seqs, workers)?
        }
    };
    let dir = out.unwrap_or_else(|| cfg.paths.output.clone());
    create_dir(&dir)?;
    let json = serde_json::to_string_pretty(&report).expect("report serializes");
    write(&dir.join("report.json"), json + "\n")?;
    write(&dir.join("curves.csv"), report.aggregate.curves_csv())?;
    cfg.echo(&dir.join("run.json"))?;
    let a = &report.aggregate;
    println!("sequences: {}", report.sequences.len());
    println!("frames: {}", a.frames);
    println!("precision@20: {:.4}", a.precision_at_20);
    println!("norm_precision@0.2: {:.4}", a.norm_precision_at_02);
    println!("success_auc: {:.4}", a.success_auc);
    println!("mean_iou: {:.4}", a.mean_iou);
    Ok(())
}

pub fn gradcheck(cfg: &RunConfig, scopes: Vec<Scope>) -> Result<(), CliError> {
    let mut failed = 0;
    let mut total = 0;
    for scope in scopes {
        for check in gradcheck::run(scope, cfg.tracker.seed)? {
            println!("{check}");
            total += 1;
            if !check.passed() {
                failed += 1;
            }
        }
    }
    if failed > 0 {
        return Err(CliError::Verification(format!("{failed} of {total} gradient checks failed")));
    }
    println!("all {total} gradient checks passed");
    Ok(())
}

#[derive(Serialize)]
struct LevelRecord {
    file: String,
    level: usize,
    kind: &'static str,
    /// Raw range before mapping to `[0, 1]`.
    min: f32,
    max: f32,
    /// Whether the image is `(v - min) / (max - min)` rather than the raw values clamped to `[0, 1]`.
    scaled: bool,
}

/// `[1, 3, h, w]` graph values as an image, min/max scaled or clamped.
fn level_image(values: &[f32], shape: &[usize], scale: bool) -> Result<(Tensor<f32>, f32, f32), CliError> {
    let min = values.iter().copied().fold(f32::INFINITY, f32::min);
    let max = values.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let span = max - min;
    let pixels = values
        .iter()
        .map(|&v| {
            if !scale {
                v.clamp(0.0, 1.0)
            } else if span > 0.0 {
                ((v - min) / span).clamp(0.0, 1.0)
            } else {
                0.5
            }
        })
        .collect();
    Ok((Tensor::new(&shape[1..], pixels)?, min, max))
}

pub fn pyramid(cfg: &RunConfig, ckpt: Option<PathBuf>, image: &Path, out: &Path) -> Result<(), CliError> {
    let (model, store) = match &ckpt {
        Some(p) => load_checkpoint(p)?,
        None => Tracker::new::<f32>(&cfg.tracker)?,
    };
    let bytes = fs::read(image).map_err(|e| CliError::io(image, e))?;
    let img = data::load_ppm(&bytes).map_err(with_path(image))?;
    let shape = img.shape().to_vec();
    let batched = img.reshape(&[1, shape[0], shape[1], shape[2]])?;
    let mut g = Graph::with_params(&store, Mode::Eval);
    let x = g.constant(&batched);
    let levels = model.backbone.illum.pyramid(&mut g, x)?;
    create_dir(out)?;
    let mut records = Vec::new();
    let named = levels
        .gaussians
        .iter()
        .enumerate()
        .map(|(i, &v)| ("gaussian", i, v, false))
        .chain(levels.laplacians.iter().enumerate().map(|(i, &v)| ("laplacian", i, v, true)));
    for (kind, level, var, scaled) in named {
        let (img, min, max) = level_image(g.value(var), g.shape(var), scaled)?;
        let file = format!("{kind}_{level}.ppm");
        write(&out.join(&file), data::save_ppm(&img)?)?;
        records.push(LevelRecord { file, level, kind, min, max, scaled });
    }
    let json = serde_json::to_string_pretty(&records).expect("records serialize");
    write(&out.join("levels.json"), json + "\n")?;
    cfg.echo(&out.join("run.json"))?;
    println!("wrote {} levels to {}", records.len(), out.display());
    Ok(())
}
