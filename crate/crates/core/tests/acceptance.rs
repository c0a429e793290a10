//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.
//!
//! Positional arguments filter criteria by id (`c1` .. `c10`). Trained
//! models are cached under the cargo target directory and reused while
//! their run fingerprint is unchanged; set `RECDEPTH_ACCEPTANCE_FRESH=1`
//! to retrain.

mod common;

use std::cell::RefCell;
use std::collections::HashMap;
use std::path::PathBuf;
use std::rc::Rc;
use std::time::{Duration, Instant};

use candle_core::{DType, Device, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use recdepth::data::{default_intrinsics, generate_synthetic, Corridor, Sequence, SyntheticScene, World};
use recdepth::eval::{arte, depth_metrics, evaluate_sequence, EvalConfig};
use recdepth::losses::{
    berhu, berhu_with_threshold, lambda_schedule, photometric, smoothness, total_loss, LossInputs, LossMap,
    LossWeights, ScaleTerms,
};
use recdepth::model::{load_checkpoint, save_checkpoint, CheckpointMeta, INIT_C, INIT_H};
use recdepth::training::{
    infer_tensors, tbptt_probe, InitState, Progress, TrainConfig, TrainHooks, Trainer, TrainingData,
};
use recdepth::{DepthModel, Mode, ModelConfig, SparsePattern};

const CACHE_VERSION: u32 = 2;
const TRAIN_SEQUENCES: usize = 5;
const TRAIN_FRAMES: usize = 200;
const HELDOUT: [(f64, u64); 2] = [(245.0, 1001), (290.0, 1002)];
const HELDOUT_FRAMES: usize = 100;
const LONG_FRAMES: usize = 600;
const SEEDS: [u64; 3] = [0, 1, 2];

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

type Res<T> = std::result::Result<T, Box<dyn std::error::Error>>;

fn world() -> World {
    // Far end beyond the depth range, so every view sees an open corridor.
    World::Corridor(Corridor {
        end_z: 1000.0,
        texture_seed: 7,
        ..Corridor::default()
    })
}

fn smoke_config(recurrent: bool) -> ModelConfig {
    ModelConfig {
        recurrent,
        ..ModelConfig::smoke()
    }
}

/// Scaled-down schedule shared by every trained model. From scratch and
/// with a few hundred steps per stage, 1e-4 barely moves the pose network,
/// so stage 1 runs at 1e-3 and stage 2 fine-tunes at the default rate.
fn budget(seed: u64) -> TrainConfig {
    TrainConfig {
        batch_size: 4,
        learning_rate: 1e-3,
        stage2_learning_rate: Some(1e-4),
        stage1_epochs: 3,
        stage2_epochs: 2,
        subseq_length: 30,
        seed,
        ..TrainConfig::default()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct RunSpec {
    version: u32,
    mode: Mode,
    model: ModelConfig,
    train: TrainConfig,
    pattern: Option<SparsePattern>,
    data: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct RunRecord {
    spec: RunSpec,
    init_norm_after_stage1: f64,
    stage1_loss: Vec<f64>,
    stage2_loss: Vec<f64>,
    train_secs: f64,
}

struct Trained {
    model: DepthModel,
    record: RunRecord,
    cached: bool,
}

struct Ctx {
    device: Device,
    cache_dir: PathBuf,
    fresh: bool,
    train: RefCell<Option<Rc<Vec<Sequence>>>>,
    heldout: RefCell<Option<Rc<Vec<Sequence>>>>,
    models: RefCell<HashMap<String, Rc<Trained>>>,
}

fn render(n: usize, frames: usize, start: impl Fn(usize) -> (f64, u64), prefix: &str) -> Res<Vec<Sequence>> {
    let intr = default_intrinsics(160, 64);
    (0..n)
        .map(|i| {
            let (z, seed) = start(i);
            let scene = SyntheticScene::random(world(), intr.clone(), frames, z, seed);
            Ok(generate_synthetic(&scene, &format!("{prefix}{i}"))?)
        })
        .collect()
}

fn data_description() -> String {
    format!(
        "corridor end 1000 tex 7; train {TRAIN_SEQUENCES}x{TRAIN_FRAMES} from z=5+45i seeds 100+i; heldout {HELDOUT:?}x{HELDOUT_FRAMES}"
    )
}

impl Ctx {
    fn new() -> Self {
        let cache_dir = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance-cache");
        Self {
            device: Device::Cpu,
            cache_dir,
            fresh: std::env::var("RECDEPTH_ACCEPTANCE_FRESH").is_ok_and(|v| v == "1"),
            train: RefCell::new(None),
            heldout: RefCell::new(None),
            models: RefCell::new(HashMap::new()),
        }
    }

    fn train_sequences(&self) -> Res<Rc<Vec<Sequence>>> {
        if let Some(s) = self.train.borrow().as_ref() {
            return Ok(s.clone());
        }
        let s = Rc::new(render(TRAIN_SEQUENCES, TRAIN_FRAMES, |i| (5.0 + 45.0 * i as f64, 100 + i as u64), "train")?);
        *self.train.borrow_mut() = Some(s.clone());
        Ok(s)
    }

    fn heldout_sequences(&self) -> Res<Rc<Vec<Sequence>>> {
        if let Some(s) = self.heldout.borrow().as_ref() {
            return Ok(s.clone());
        }
        let s = Rc::new(render(HELDOUT.len(), HELDOUT_FRAMES, |i| HELDOUT[i], "heldout")?);
        *self.heldout.borrow_mut() = Some(s.clone());
        Ok(s)
    }

    fn prepare(&self, seqs: &[Sequence], mode: Mode, seed: u64) -> Res<TrainingData> {
        Ok(TrainingData::prepare(
            seqs,
            &ModelConfig::smoke(),
            mode,
            Some(&pattern()),
            seed,
            &self.device,
        )?)
    }

    /// Train (or load) a model for `mode` with the shared budget.
    fn trained(&self, mode: Mode, recurrent: bool, seed: u64) -> Res<Rc<Trained>> {
        let name = format!("{}-{}-s{seed}", mode.as_str(), if recurrent { "rec" } else { "img" });
        if let Some(t) = self.models.borrow().get(&name) {
            return Ok(t.clone());
        }
        let spec = RunSpec {
            version: CACHE_VERSION,
            mode,
            model: smoke_config(recurrent),
            train: budget(seed),
            pattern: mode.uses_sparse_input().then(pattern),
            data: data_description(),
        };
        let path = self.cache_dir.join(format!("{name}.safetensors"));
        if !self.fresh && path.exists() {
            if let Ok((model, meta)) = load_checkpoint(&path, &self.device) {
                if let Some(record) = meta.extra.as_deref().and_then(|e| serde_json::from_str::<RunRecord>(e).ok()) {
                    if record.spec == spec {
                        let t = Rc::new(Trained {
                            model,
                            record,
                            cached: true,
                        });
                        self.models.borrow_mut().insert(name, t.clone());
                        return Ok(t);
                    }
                }
            }
        }
        eprintln!("  training {name} ...");
        let seqs = self.train_sequences()?;
        let data = self.prepare(&seqs, mode, 10 + seed)?;
        let model = DepthModel::new(&spec.model, mode, seed, &self.device)?;
        let start = Instant::now();
        let stage1_only = TrainConfig {
            stage2_epochs: 0,
            ..spec.train.clone()
        };
        let r1 = Trainer::new(&model, &data, stage1_only, TrainHooks::default())?.run(Progress::default())?;
        let init_norm_after_stage1 = init_norm(&model)?;
        let r2 = Trainer::new(&model, &data, spec.train.clone(), TrainHooks::default())?.run(r1.progress)?;
        let record = RunRecord {
            spec,
            init_norm_after_stage1,
            stage1_loss: r1.epoch_means(1),
            stage2_loss: r2.epoch_means(2),
            train_secs: start.elapsed().as_secs_f64(),
        };
        eprintln!(
            "  trained {name} in {:.0} s (stage 1 loss {:?}, stage 2 loss {:?})",
            record.train_secs, record.stage1_loss, record.stage2_loss
        );
        let mut meta = CheckpointMeta::for_model(&model);
        meta.iteration = r2.progress.iteration;
        meta.stage = 2;
        meta.epoch = r2.progress.epoch;
        meta.extra = Some(serde_json::to_string(&record)?);
        std::fs::create_dir_all(&self.cache_dir)?;
        save_checkpoint(&path, &model, &meta)?;
        let t = Rc::new(Trained {
            model,
            record,
            cached: false,
        });
        self.models.borrow_mut().insert(name, t.clone());
        Ok(t)
    }
}

fn pattern() -> SparsePattern {
    SparsePattern::Random { count: 200 }
}

fn init_norm(model: &DepthModel) -> Res<f64> {
    let mut s = 0.0;
    for name in [INIT_H, INIT_C] {
        if let Some(v) = model.store().get(name) {
            s += v.as_tensor().to_dtype(DType::F64)?.sqr()?.sum_all()?.to_scalar::<f64>()?;
        }
    }
    Ok(s.sqrt())
}

struct HeldoutScores {
    abs_rel: f64,
    rmse: f64,
    arte: f64,
}

fn score(model: &DepthModel, data: &TrainingData, median: bool) -> Res<HeldoutScores> {
    let cfg = EvalConfig::default();
    let (mut a, mut r, mut t) = (0.0, 0.0, 0.0);
    for seq in &data.sequences {
        let preds = infer_tensors(model, seq, InitState::Learned)?;
        let ev = evaluate_sequence(&preds, &seq.ground_truth_maps()?, &cfg, median)?;
        a += ev.metrics.abs_rel;
        r += ev.metrics.rmse;
        t += ev.arte.unwrap_or(f64::NAN);
    }
    let n = data.sequences.len() as f64;
    Ok(HeldoutScores {
        abs_rel: a / n,
        rmse: r / n,
        arte: t / n,
    })
}

fn timed(limit: Option<Duration>, start: Instant, o: Outcome) -> Outcome {
    match limit {
        Some(l) if start.elapsed() > l => outcome(false, format!("{} (over the {:?} budget)", o.detail, l)),
        _ => o,
    }
}

fn c1_geometry_gradients(_: &Ctx) -> Res<Outcome> {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    for seed in 0..20 {
        worst = worst.max(common::warp_gradient_error(seed)?);
    }
    let o = outcome(worst < 1e-3, format!("max relative error {worst:.2e} over 20 instances (< 1e-3)"));
    Ok(timed(Some(Duration::from_secs(60)), start, o))
}

fn c2_loss_identities(_: &Ctx) -> Res<Outcome> {
    let start = Instant::now();
    let dev = Device::Cpu;
    let mut failures = Vec::new();
    let mut check = |name: &str, ok: bool| {
        if !ok {
            failures.push(name.to_string());
        }
    };
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (b, h, w) = (2, 16, 24);
    let img = common_rand(&mut rng, &[b, 3, h, w], 0.05, 0.95, &dev)?;
    let ones = Tensor::ones((b, 1, h, w), DType::F64, &dev)?;
    let depth = common_rand(&mut rng, &[b, 1, h, w], 2.0, 30.0, &dev)?;
    let val = |t: &Tensor| -> Res<f64> { Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?) };

    check("berhu(x, x) = 0", val(&berhu(&depth, &depth, &ones)?)?.abs() < 1e-6);
    let photo = photometric(&img, &img, &ones, 0.85)?;
    let pmax = photo.loss.abs()?.max_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
    check("photometric(x, x) = 0", pmax < 1e-6);
    let flat = Tensor::ones((b, 1, h, w), DType::F64, &dev)?.affine(0.3, 0.0)?;
    check("smoothness(constant) = 0", val(&smoothness(&flat, &img)?)?.abs() < 1e-6);

    // Perfect view synthesis with constant disparity and exact sparse input.
    let zero_map = LossMap {
        loss: Tensor::zeros((b, 1, h, w), DType::F64, &dev)?,
        valid: ones.clone(),
    };
    let identity = vec![Tensor::zeros((b, 1, h, w), DType::F64, &dev)?];
    let scales = vec![
        ScaleTerms {
            disp: flat.clone(),
            depth: depth.clone(),
            reprojection: vec![zero_map.clone(), zero_map],
        };
        4
    ];
    for mode in [Mode::Supervised, Mode::SelfPred, Mode::SelfComp] {
        let inputs = LossInputs {
            target: &img,
            scales: &scales,
            identity: &identity,
            ground_truth: Some((&depth, &ones)),
            sparse: Some((&depth, &ones)),
            iteration: 2000,
        };
        let l = total_loss(mode, &inputs, &LossWeights::default())?;
        check(&format!("{mode} total on identity input = 0"), val(&l.total)?.abs() < 1e-6);
    }

    // berHu value and slope agree on both sides of the threshold.
    let delta = 0.7;
    let at = |r: f64| -> Res<f64> {
        let p = Tensor::new(&[[[[r]]]], &dev)?;
        let z = Tensor::zeros((1, 1, 1, 1), DType::F64, &dev)?;
        let m = Tensor::ones((1, 1, 1, 1), DType::F64, &dev)?;
        val(&berhu_with_threshold(&p, &z, &m, delta)?)
    };
    let e = 1e-7;
    let (below, above) = (at(delta - e)?, at(delta + e)?);
    check("berHu value continuous at delta", (below - above).abs() < 1e-6 && (at(delta)? - delta).abs() < 1e-12);
    let slope_below = (at(delta)? - at(delta - e)?) / e;
    let slope_above = (at(delta + e)? - at(delta)?) / e;
    check("berHu slope continuous at delta", (slope_below - slope_above).abs() < 1e-5);

    let disp = common_rand(&mut rng, &[b, 1, h, w], 0.1, 1.0, &dev)?;
    let s1 = val(&smoothness(&disp, &img)?)?;
    let s2 = val(&smoothness(&disp.affine(7.3, 0.0)?, &img)?)?;
    check("smoothness scale invariance", (s1 - s2).abs() < 1e-6);

    check("lambda(0) = 0", lambda_schedule(0) == 0.0);
    check("lambda(500) = 5e-3", lambda_schedule(500) == 5e-3);
    check("lambda(1000) = 1e-2", lambda_schedule(1000) == 1e-2);
    check("lambda(5000) = 1e-2", lambda_schedule(5000) == 1e-2);

    let o = if failures.is_empty() {
        outcome(true, "all identities hold to 1e-6, lambda schedule exact")
    } else {
        outcome(false, format!("failed: {}", failures.join("; ")))
    };
    Ok(timed(Some(Duration::from_secs(10)), start, o))
}

fn common_rand(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64, dev: &Device) -> Res<Tensor> {
    use rand::Rng;
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
    Ok(Tensor::from_vec(v, shape, dev)?)
}

fn c3_metric_oracles(_: &Ctx) -> Res<Outcome> {
    let start = Instant::now();
    let cfg = EvalConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let mut preds = Vec::new();
        let mut gts = Vec::new();
        let mut masks = Vec::new();
        for _ in 0..3 {
            let (p, g, m) = common::metric_instance(&mut rng, cfg.min_depth, cfg.cap);
            preds.push(p);
            gts.push(g);
            masks.push(m);
        }
        let m = depth_metrics(&preds[0], &gts[0], &masks[0], &cfg)?;
        let o = common::oracle_metrics(
            &common::to_f64(&preds[0].data),
            &common::to_f64(&gts[0].data),
            &masks[0].data,
            cfg.min_depth,
            cfg.cap,
        );
        let got = [m.rmse, m.rmse_log, m.abs_rel, m.sq_rel, m.d1, m.d2, m.d3];
        for (a, b) in got.iter().zip(o.iter()) {
            worst = worst.max((a - b).abs());
        }
        let a = arte(&preds, &gts, &masks, &cfg)?;
        let oa = common::oracle_arte(
            &preds.iter().map(|p| common::to_f64(&p.data)).collect::<Vec<_>>(),
            &gts.iter().map(|p| common::to_f64(&p.data)).collect::<Vec<_>>(),
            &masks.iter().map(|m| m.data.clone()).collect::<Vec<_>>(),
            cfg.min_depth,
            cfg.cap,
            cfg.arte_epsilon,
        )
        .ok_or("oracle found no co-valid pair")?;
        // ARTE ratios can be large; compare relative to magnitude.
        worst = worst.max((a - oa).abs() / oa.abs().max(1.0));
    }
    let o = outcome(worst < 1e-10, format!("max deviation {worst:.2e} over 50 instances (< 1e-10)"));
    Ok(timed(Some(Duration::from_secs(10)), start, o))
}

fn c4_synthetic_consistency(_: &Ctx) -> Res<Outcome> {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    for seed in 0..10 {
        worst = worst.max(common::synthetic_warp_l1(seed)?);
    }
    let o = outcome(worst < 2e-2, format!("max photometric L1 {worst:.4} over 10 scenes (< 2e-2)"));
    Ok(timed(Some(Duration::from_secs(60)), start, o))
}

fn c5_self_pred(ctx: &Ctx) -> Res<Outcome> {
    let t = ctx.trained(Mode::SelfPred, true, SEEDS[0])?;
    let held = ctx.prepare(&ctx.heldout_sequences()?, Mode::SelfPred, 500)?;
    let trained = score(&t.model, &held, true)?;
    let untrained_model = DepthModel::new(&smoke_config(true), Mode::SelfPred, SEEDS[0], &ctx.device)?;
    let untrained = score(&untrained_model, &held, true)?;
    let gain = (untrained.abs_rel - trained.abs_rel) / untrained.abs_rel;
    let hours = t.record.train_secs / 3600.0;
    let pass = trained.abs_rel < 0.20 && gain > 0.20 && hours < 3.0;
    Ok(outcome(
        pass,
        format!(
            "median-scaled abs_rel {:.4} (< 0.20), untrained {:.4}, improvement {:.1}% (> 20%), training {:.0} s{}",
            trained.abs_rel,
            untrained.abs_rel,
            100.0 * gain,
            t.record.train_secs,
            if t.cached { " (cached)" } else { "" }
        ),
    ))
}

fn c6_completion(ctx: &Ctx) -> Res<Outcome> {
    let held = ctx.prepare(&ctx.heldout_sequences()?, Mode::SelfComp, 500)?;
    let main = ctx.trained(Mode::SelfComp, true, SEEDS[0])?;
    let s = score(&main.model, &held, false)?;
    let mut wins = 0;
    let mut pairs = Vec::new();
    for &seed in &SEEDS {
        let rec = score(&ctx.trained(Mode::SelfComp, true, seed)?.model, &held, false)?;
        let img = score(&ctx.trained(Mode::SelfComp, false, seed)?.model, &held, false)?;
        if rec.rmse <= img.rmse {
            wins += 1;
        }
        pairs.push(format!("{:.3}/{:.3}", rec.rmse, img.rmse));
    }
    Ok(outcome(
        s.abs_rel < 0.15 && wins >= 2,
        format!(
            "unscaled abs_rel {:.4} (< 0.15); recurrent/image RMSE per seed [{}], recurrent wins {wins}/3 (>= 2)",
            s.abs_rel,
            pairs.join(", ")
        ),
    ))
}

fn first_frames_rmse(model: &DepthModel, data: &TrainingData, init: InitState, n: usize) -> Res<f64> {
    let cfg = EvalConfig::default();
    let median = model.mode().needs_median_scaling();
    let mut total = 0.0;
    let mut count = 0.0;
    for seq in &data.sequences {
        let k = n.min(seq.len());
        let short = recdepth::training::SequenceTensors {
            images: seq.images.narrow(0, 0, k)?,
            ground_truth: match &seq.ground_truth {
                Some((d, m)) => Some((d.narrow(0, 0, k)?, m.narrow(0, 0, k)?)),
                None => None,
            },
            sparse: match &seq.sparse {
                Some((d, m)) => Some((d.narrow(0, 0, k)?, m.narrow(0, 0, k)?)),
                None => None,
            },
            ..seq.clone()
        };
        let preds = infer_tensors(model, &short, init)?;
        let ev = evaluate_sequence(&preds, &short.ground_truth_maps()?, &cfg, median)?;
        total += ev.per_frame.iter().map(|m| m.rmse).sum::<f64>();
        count += ev.per_frame.len() as f64;
    }
    Ok(total / count)
}

fn c7_hidden_state(ctx: &Ctx) -> Res<Outcome> {
    let held = ctx.prepare(&ctx.heldout_sequences()?, Mode::SelfComp, 500)?;
    let mut norms_ok = true;
    let mut wins = 0;
    let mut parts = Vec::new();
    for &seed in &SEEDS {
        let t = ctx.trained(Mode::SelfComp, true, seed)?;
        norms_ok &= t.record.init_norm_after_stage1 > 0.0;
        let learned = first_frames_rmse(&t.model, &held, InitState::Learned, 5)?;
        let zero = first_frames_rmse(&t.model, &held, InitState::Zero, 5)?;
        if learned < zero {
            wins += 1;
        }
        parts.push(format!(
            "|init| {:.3}, rmse learned {learned:.3} vs zero {zero:.3}",
            t.record.init_norm_after_stage1
        ));
    }
    Ok(outcome(
        norms_ok && wins >= 2,
        format!("first-5-frame RMSE, learned init better on {wins}/3 seeds (>= 2); {}", parts.join("; ")),
    ))
}

fn c8_tbptt(ctx: &Ctx) -> Res<Outcome> {
    let t = ctx.trained(Mode::SelfPred, true, SEEDS[0])?;
    let data = ctx.prepare(&ctx.train_sequences()?[..1], Mode::SelfPred, 0)?;
    let p = tbptt_probe(&t.model, &data, &budget(0))?;
    Ok(outcome(
        p.window_is_one(),
        format!(
            "frame-2 loss reaches the initial state: trained path {}, attached control {}",
            p.init_has_grad, p.control_init_has_grad
        ),
    ))
}

fn c9_long_sequence(ctx: &Ctx) -> Res<Outcome> {
    let t = ctx.trained(Mode::SelfPred, true, SEEDS[0])?;
    let long = render(1, LONG_FRAMES, |_| (20.0, 2001), "long")?;
    let data = ctx.prepare(&long, Mode::SelfPred, 600)?;
    let seq = &data.sequences[0];
    let preds = infer_tensors(&t.model, seq, InitState::Learned)?;
    let finite = preds.iter().all(|p| p.data.iter().all(|v| v.is_finite() && *v > 0.0));
    let spread = preds
        .iter()
        .map(|p| {
            let n = p.data.len() as f64;
            let mean = p.data.iter().map(|&v| v as f64).sum::<f64>() / n;
            let var = p.data.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
            var.sqrt() / mean
        })
        .fold(f64::INFINITY, f64::min);
    let ev = evaluate_sequence(&preds, &seq.ground_truth_maps()?, &EvalConfig::default(), true)?;
    let curve = &ev.accumulated_rmse;
    let at30 = curve[29];
    let peak = curve[29..].iter().cloned().fold(0.0, f64::max);
    let pass = preds.len() == LONG_FRAMES && finite && spread > 1e-3 && peak <= 2.0 * at30;
    Ok(outcome(
        pass,
        format!(
            "{} frames, finite {finite}, min per-frame relative spread {spread:.3}, accumulated RMSE at 30 {at30:.3}, max after {peak:.3} (<= 2x), final {:.3}",
            preds.len(),
            curve[curve.len() - 1]
        ),
    ))
}

fn c10_arte(ctx: &Ctx) -> Res<Outcome> {
    let held = ctx.prepare(&ctx.heldout_sequences()?, Mode::SelfComp, 500)?;
    let mut wins = 0;
    let mut parts = Vec::new();
    for &seed in &SEEDS {
        let rec = score(&ctx.trained(Mode::SelfComp, true, seed)?.model, &held, false)?;
        let img = score(&ctx.trained(Mode::SelfComp, false, seed)?.model, &held, false)?;
        if rec.arte <= img.arte {
            wins += 1;
        }
        parts.push(format!("{:.4}/{:.4}", rec.arte, img.arte));
    }
    Ok(outcome(
        wins >= 2,
        format!("recurrent/image ARTE per seed [{}], recurrent wins {wins}/3 (>= 2)", parts.join(", ")),
    ))
}

type Criterion = (&'static str, &'static str, fn(&Ctx) -> Res<Outcome>);

fn main() {
    let criteria: [Criterion; 10] = [
        ("c1", "geometry gradient suite", c1_geometry_gradients),
        ("c2", "loss identity suite", c2_loss_identities),
        ("c3", "metric oracle equivalence", c3_metric_oracles),
        ("c4", "synthetic self-consistency", c4_synthetic_consistency),
        ("c5", "end-to-end self-supervised prediction", c5_self_pred),
        ("c6", "completion scale-awareness", c6_completion),
        ("c7", "hidden-state strategy", c7_hidden_state),
        ("c8", "truncated backprop window 1", c8_tbptt),
        ("c9", "sequence-length generalization", c9_long_sequence),
        ("c10", "ARTE direction", c10_arte),
    ];
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let ctx = Ctx::new();
    let mut failed = 0;
    let mut ran = 0;
    for (id, name, f) in criteria {
        if !filters.is_empty() && !filters.iter().any(|x| x == id) {
            continue;
        }
        ran += 1;
        let start = Instant::now();
        let o = f(&ctx).unwrap_or_else(|e| outcome(false, format!("error: {e}")));
        let secs = start.elapsed().as_secs_f64();
        if !o.pass {
            failed += 1;
        }
        println!(
            "{} {id} {name}: {} [{secs:.1} s]",
            if o.pass { "PASS" } else { "FAIL" },
            o.detail
        );
    }
    println!("acceptance: {}/{ran} criteria passed", ran - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
