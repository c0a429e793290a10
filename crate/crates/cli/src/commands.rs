use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use candle_core::Device;

use recdepth::data::kitti::{
    load_kitti_index, load_sequence, read_depth_png, read_image, write_depth_png, write_sequence, write_split, Split,
};
use recdepth::data::{default_intrinsics, generate_synthetic, Sequence, SyntheticScene, Trajectory};
use recdepth::eval::{emit_report, evaluate_sequence, Curve, ReportRow, SequenceEvaluation, SweepSeries};
use recdepth::model::{load_checkpoint, CheckpointMeta};
use recdepth::sparsity::frame_seed;
use recdepth::training::{infer_tensors, Progress, TrainHooks, TrainLog, Trainer};
use recdepth::{
    infer_sequence, DepthMetrics, DepthModel, InitState, Mode, SparseDepth, SparsePattern, TrainingData,
};

use crate::config::RunConfig;
use crate::CliError;

pub const CHECKPOINT_FILE: &str = "checkpoint.safetensors";
pub const LOG_FILE: &str = "train_log.csv";
pub const CONFIG_FILE: &str = "config.toml";

fn runtime<T>(r: anyhow::Result<T>) -> Result<T, CliError> {
    r.map_err(CliError::Runtime)
}

fn usage(msg: String) -> CliError {
    CliError::Usage(anyhow::anyhow!(msg))
}

/// Drive folders follow `<date>/<date>_drive_<nnnn>_sync`.
pub fn drive_folder(i: usize) -> String {
    format!("2000_01_01/2000_01_01_drive_{i:04}_sync")
}

fn is_nonempty_dir(p: &Path) -> bool {
    fs::read_dir(p).map(|mut d| d.next().is_some()).unwrap_or(false)
}

pub fn synth(cfg: &RunConfig, force: bool) -> Result<PathBuf, CliError> {
    let root = &cfg.data_root;
    if root.exists() && !root.is_dir() {
        return Err(usage(format!("{} exists and is not a directory", root.display())));
    }
    if is_nonempty_dir(root) {
        if !force {
            return Err(usage(format!("{} is not empty; pass --force to overwrite", root.display())));
        }
        runtime(fs::remove_dir_all(root).with_context(|| format!("clearing {}", root.display())))?;
    }
    let s = &cfg.synth;
    let intr = default_intrinsics(cfg.model.width, cfg.model.height);
    let mut drives: Vec<(String, usize)> = Vec::with_capacity(s.sequences);
    for i in 0..s.sequences {
        let scene = SyntheticScene {
            world: s.world.clone(),
            trajectory: Trajectory::random(s.start_z + s.spacing * i as f64, frame_seed(cfg.seed, i as u64, 0)),
            intrinsics: intr.clone(),
            frames: s.frames,
            supersample: s.supersample,
        };
        let folder = drive_folder(i);
        log::info!("rendering {folder} ({} frames)", s.frames);
        let seq = runtime(generate_synthetic(&scene, &folder).map_err(Into::into))?;
        runtime(write_sequence(root, &folder, &seq).map_err(Into::into))?;
        drives.push((folder, s.frames));
    }
    let n_train = s.sequences - s.val - s.test;
    let groups = [
        (Split::Train, &drives[..n_train]),
        (Split::Val, &drives[n_train..n_train + s.val]),
        (Split::Test, &drives[n_train + s.val..]),
    ];
    for (split, d) in groups {
        runtime(write_split(root, split, d).map_err(Into::into))?;
    }
    Ok(root.clone())
}

fn split_file(root: &Path, split: Split) -> PathBuf {
    root.join("splits").join(split.file_name())
}

/// Sequences of `split` at the model resolution.
pub fn load_split(cfg: &RunConfig, split: Split) -> anyhow::Result<Vec<Sequence>> {
    let path = split_file(&cfg.data_root, split);
    let index = load_kitti_index(&cfg.data_root, &path).with_context(|| format!("loading {split} split"))?;
    if !index.missing.is_empty() {
        log::warn!("{} {split} entries have no image, e.g. {}", index.missing.len(), index.missing[0]);
    }
    if index.sequences.is_empty() {
        bail!("{} lists no readable frames", path.display());
    }
    index
        .sequences
        .iter()
        .map(|s| load_sequence(s, cfg.model.width, cfg.model.height).map_err(Into::into))
        .collect()
}

pub fn train(cfg: &RunConfig, resume: bool, force: bool) -> Result<PathBuf, CliError> {
    let dev = Device::Cpu;
    let hash = cfg.hash().map_err(CliError::Usage)?;
    let out = &cfg.out_dir;
    let ckpt = out.join(CHECKPOINT_FILE);
    let log_path = out.join(LOG_FILE);

    let (model, start, mut meta) = if resume {
        let (model, meta) = load_checkpoint(&ckpt, &dev)
            .with_context(|| format!("--resume needs {}", ckpt.display()))
            .map_err(CliError::Usage)?;
        if meta.config_hash.as_deref() != Some(hash.as_str()) && !force {
            return Err(usage(format!(
                "{} was trained with a different configuration; pass --force to resume anyway",
                ckpt.display()
            )));
        }
        (model, Progress::from_meta(&meta), meta)
    } else {
        if ckpt.exists() && !force {
            return Err(usage(format!(
                "{} exists; pass --resume to continue or --force to start over",
                ckpt.display()
            )));
        }
        if log_path.exists() {
            runtime(fs::remove_file(&log_path).map_err(Into::into))?;
        }
        let model = runtime(DepthModel::new(&cfg.model, cfg.mode, cfg.seed, &dev).map_err(Into::into))?;
        let meta = CheckpointMeta::for_model(&model);
        (model, Progress::default(), meta)
    };
    meta.config_hash = Some(hash);
    meta.extra = Some(cfg.to_toml().map_err(CliError::Usage)?);

    let seqs = runtime(load_split(cfg, Split::Train))?;
    let data = runtime(
        TrainingData::prepare(&seqs, &cfg.model, cfg.mode, Some(&cfg.pattern), cfg.seed, &dev).map_err(Into::into),
    )?;
    let val = if split_file(&cfg.data_root, Split::Val).exists() {
        let v = runtime(load_split(cfg, Split::Val))?;
        Some(runtime(
            TrainingData::prepare(&v, &cfg.model, cfg.mode, Some(&cfg.pattern), cfg.seed, &dev).map_err(Into::into),
        )?)
    } else {
        None
    };

    runtime(fs::create_dir_all(out).map_err(Into::into))?;
    runtime(fs::write(out.join(CONFIG_FILE), cfg.to_toml().map_err(CliError::Usage)?).map_err(Into::into))?;
    let hooks = TrainHooks {
        log: Some(runtime(TrainLog::open(&log_path).map_err(Into::into))?),
        checkpoint: Some((ckpt.clone(), meta)),
        validation: val.as_ref().map(|v| (v, cfg.eval.clone())),
    };
    let trainer = Trainer::new(&model, &data, cfg.train.clone(), hooks).map_err(|e| CliError::Usage(e.into()))?;
    let report = runtime(trainer.run(start).map_err(Into::into))?;
    log::info!(
        "finished at iteration {} ({} steps this run, {} skipped)",
        report.progress.iteration,
        report.steps.len(),
        report.skipped_steps
    );
    Ok(ckpt)
}

/// Load a checkpoint and check it against the configured resolution.
fn open_checkpoint(cfg: &RunConfig, path: &Path) -> Result<(DepthModel, CheckpointMeta), CliError> {
    let (model, meta) = runtime(
        load_checkpoint(path, &Device::Cpu)
            .map_err(anyhow::Error::from)
            .with_context(|| format!("reading {}", path.display())),
    )?;
    let (w, h) = (meta.model.width, meta.model.height);
    if (w, h) != (cfg.model.width, cfg.model.height) {
        return Err(usage(format!(
            "{} was trained at {w}x{h} but the configuration asks for {}x{}",
            path.display(),
            cfg.model.width,
            cfg.model.height
        )));
    }
    Ok((model, meta))
}

struct Scored {
    metrics: DepthMetrics,
    arte: Option<f64>,
    curve: Vec<f64>,
}

fn score(model: &DepthModel, seqs: &[Sequence], cfg: &RunConfig, pattern: &SparsePattern) -> anyhow::Result<Scored> {
    let mode = model.mode();
    let data = TrainingData::prepare(seqs, model.config(), mode, Some(pattern), cfg.seed, model.device())?;
    let median = cfg.eval.median_scaling.unwrap_or(mode.needs_median_scaling());
    let mut evals: Vec<SequenceEvaluation> = Vec::new();
    for seq in &data.sequences {
        let preds = infer_tensors(model, seq, InitState::Learned)?;
        let gts = seq.ground_truth_maps()?;
        evals.push(evaluate_sequence(&preds, &gts, &cfg.eval, median)?);
    }
    let frames: Vec<DepthMetrics> = evals.iter().flat_map(|e| e.per_frame.iter().copied()).collect();
    let metrics = DepthMetrics::mean(&frames).context("no frame had ground truth")?;
    let artes: Vec<f64> = evals.iter().filter_map(|e| e.arte).collect();
    let arte = (!artes.is_empty()).then(|| artes.iter().sum::<f64>() / artes.len() as f64);
    let len = evals.iter().map(|e| e.accumulated_rmse.len()).min().unwrap_or(0);
    let curve = (0..len)
        .map(|t| evals.iter().map(|e| e.accumulated_rmse[t]).sum::<f64>() / evals.len() as f64)
        .collect();
    Ok(Scored { metrics, arte, curve })
}

fn pattern_label(mode: Mode, p: &SparsePattern) -> String {
    if mode.uses_sparse_input() {
        p.label()
    } else {
        "-".into()
    }
}

pub struct EvalArgs {
    pub checkpoint: Option<PathBuf>,
    pub baseline: Option<PathBuf>,
    pub split: Split,
    pub sweep: bool,
}

pub fn eval(cfg: &RunConfig, args: &EvalArgs) -> Result<Vec<PathBuf>, CliError> {
    let ckpt = args.checkpoint.clone().unwrap_or_else(|| cfg.out_dir.join(CHECKPOINT_FILE));
    let (model, _) = open_checkpoint(cfg, &ckpt)?;
    let baseline = args.baseline.as_ref().map(|p| open_checkpoint(cfg, p)).transpose()?;
    if let Some((b, _)) = &baseline {
        if b.mode() != model.mode() {
            return Err(usage(format!(
                "baseline is a {} model, expected {}",
                b.mode(),
                model.mode()
            )));
        }
    }
    let mode = model.mode();
    if args.sweep && !mode.uses_sparse_input() {
        return Err(usage(format!("--sweep needs a self_comp checkpoint, got {mode}")));
    }
    let seqs = runtime(load_split(cfg, args.split))?;

    let kind = |m: &DepthModel| if m.is_recurrent() { "recurrent" } else { "image" };
    let mut models: Vec<&DepthModel> = vec![&model];
    if let Some((b, _)) = &baseline {
        models.push(b);
    }
    let mut rows = Vec::new();
    let mut curves = Vec::new();
    for m in &models {
        let s = runtime(score(m, &seqs, cfg, &cfg.pattern))?;
        rows.push(ReportRow {
            mode: format!("{mode}-{}", kind(m)),
            pattern: pattern_label(mode, &cfg.pattern),
            metrics: s.metrics,
            arte: s.arte,
        });
        curves.push(Curve {
            label: kind(m).to_string(),
            values: s.curve,
        });
    }

    let mut sweeps = Vec::new();
    if args.sweep {
        let grids: [(&str, Vec<SparsePattern>); 2] = [
            (
                "points",
                cfg.sweep.points.iter().map(|&count| SparsePattern::Random { count }).collect(),
            ),
            (
                "lines",
                cfg.sweep.lines.iter().map(|&num_lines| SparsePattern::Lines { num_lines }).collect(),
            ),
        ];
        for (x_label, grid) in grids {
            if grid.is_empty() {
                continue;
            }
            for m in &models {
                let mut points = Vec::new();
                for p in &grid {
                    let s = runtime(score(m, &seqs, cfg, p))?;
                    let x = match *p {
                        SparsePattern::Random { count } => count as f64,
                        SparsePattern::Lines { num_lines } => num_lines as f64,
                        SparsePattern::Full => f64::NAN,
                    };
                    points.push((x, s.metrics.rmse));
                    rows.push(ReportRow {
                        mode: format!("{mode}-{}", kind(m)),
                        pattern: p.label(),
                        metrics: s.metrics,
                        arte: s.arte,
                    });
                }
                sweeps.push(SweepSeries {
                    label: format!("{} ({x_label})", kind(m)),
                    x_label: format!("number of {x_label}"),
                    points,
                });
            }
        }
    }
    let dir = cfg.out_dir.join("report");
    runtime(emit_report(&dir, &rows, &curves, &sweeps).map_err(Into::into))
}

fn png_files(dir: &Path) -> anyhow::Result<Vec<PathBuf>> {
    let mut v: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("listing {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")))
        .collect();
    v.sort();
    Ok(v)
}

pub struct PredictArgs {
    pub checkpoint: PathBuf,
    pub frames: PathBuf,
    pub sparse: Option<PathBuf>,
    pub out: PathBuf,
}

/// Writes one 16-bit depth PNG per input frame, named after the frame.
pub fn predict(args: &PredictArgs) -> Result<Vec<PathBuf>, CliError> {
    let (model, _) = runtime(
        load_checkpoint(&args.checkpoint, &Device::Cpu)
            .map_err(anyhow::Error::from)
            .with_context(|| format!("reading {}", args.checkpoint.display())),
    )?;
    let (w, h) = (model.config().width, model.config().height);
    let files = runtime(png_files(&args.frames))?;
    if files.is_empty() {
        return Err(CliError::Runtime(anyhow::anyhow!("no PNG frames in {}", args.frames.display())));
    }
    let images = runtime(
        files
            .iter()
            .map(|f| read_image(f, w, h).map_err(anyhow::Error::from))
            .collect::<anyhow::Result<Vec<_>>>(),
    )?;
    let sparse = match (&args.sparse, model.mode().uses_sparse_input()) {
        (Some(dir), true) => Some(runtime(
            files
                .iter()
                .map(|f| {
                    let p = dir.join(f.file_name().unwrap_or_default());
                    let depth = read_depth_png(&p, w, h)?;
                    Ok(SparseDepth {
                        mask: depth.validity(),
                        depth,
                    })
                })
                .collect::<anyhow::Result<Vec<_>>>(),
        )?),
        (None, true) => {
            return Err(usage(format!(
                "{} checkpoints need --sparse with one depth PNG per frame",
                model.mode()
            )))
        }
        (Some(_), false) => {
            log::warn!("{} model ignores sparse input", model.mode());
            None
        }
        (None, false) => None,
    };
    let preds = runtime(infer_sequence(&model, &images, sparse.as_deref(), InitState::Learned).map_err(Into::into))?;
    let mut written = Vec::with_capacity(preds.len());
    for (f, d) in files.iter().zip(&preds) {
        let p = args.out.join(f.file_name().unwrap_or_default());
        runtime(write_depth_png(&p, d).map_err(Into::into))?;
        written.push(p);
    }
    Ok(written)
}
