//! Two-stage training of the recurrent depth network and full-sequence
//! inference.
//!
//! Stage 1 trains on shuffled frame triplets, each a single recurrent step
//! from the learned initial state, so the gradient reaches that state.
//! Stage 2 walks batches of sub-sequences in lockstep, taking one optimizer
//! step per frame and carrying a detached state to the next frame.

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use candle_core::backprop::GradStore;
use candle_core::{DType, Device, Tensor, Var};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{split_subsequences, Sequence, SubSequence};
use crate::error::{Error, Result};
use crate::eval::{evaluate_sequence, EvalConfig};
use crate::geometry::{inverse_warp_with_transform, pose_to_matrix, Intrinsics};
use crate::losses::{photometric, total_loss, LossBreakdown, LossInputs, LossValues, LossWeights, ScaleTerms, INVALID_LOSS};
use crate::maps::{DepthMap, Image, SparseDepth};
use crate::mode::Mode;
use crate::model::layers::resize_bilinear;
use crate::model::{save_checkpoint, CheckpointMeta, DepthModel, HiddenState, ModelConfig, INIT_PREFIX};
use crate::sparsity::{frame_seed, SparsePattern};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Stage-2 learning rate; `learning_rate` when unset.
    pub stage2_learning_rate: Option<f64>,
    pub stage1_epochs: usize,
    pub stage2_epochs: usize,
    pub subseq_length: usize,
    pub seed: u64,
    /// Global gradient norm ceiling; `None` disables clipping.
    pub grad_clip: Option<f64>,
    /// Frame triplets per stage-1 epoch; all of them when unset.
    pub stage1_samples: Option<usize>,
    /// Sub-sequences per stage-2 epoch; all of them when unset.
    pub stage2_subsequences: Option<usize>,
    /// Hard cap on optimizer steps in any one epoch.
    pub max_steps_per_epoch: Option<usize>,
    pub weights: LossWeights,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 12,
            learning_rate: 1e-4,
            stage2_learning_rate: None,
            stage1_epochs: 10,
            stage2_epochs: 20,
            subseq_length: 30,
            seed: 0,
            grad_clip: Some(10.0),
            stage1_samples: None,
            stage2_subsequences: None,
            max_steps_per_epoch: None,
            weights: LossWeights::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.subseq_length < crate::data::MIN_SUBSEQ_LEN {
            return Err(Error::Config(format!(
                "subseq_length {} is below {}",
                self.subseq_length,
                crate::data::MIN_SUBSEQ_LEN
            )));
        }
        for lr in [Some(self.learning_rate), self.stage2_learning_rate].into_iter().flatten() {
            if !(lr >= 0.0 && lr.is_finite()) {
                return Err(Error::Config("learning rates must be finite and non-negative".into()));
            }
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(Error::Config("grad_clip must be positive".into()));
            }
        }
        self.weights.validate()
    }
}

/// One sequence resident on the device.
#[derive(Clone, Debug)]
pub struct SequenceTensors {
    pub id: String,
    pub intrinsics: Intrinsics,
    /// `(T, 3, H, W)`.
    pub images: Tensor,
    /// Depth and validity, each `(T, 1, H, W)`.
    pub ground_truth: Option<(Tensor, Tensor)>,
    /// Sparse depth input and its mask, each `(T, 1, H, W)`.
    pub sparse: Option<(Tensor, Tensor)>,
}

impl SequenceTensors {
    pub fn len(&self) -> usize {
        self.images.dims()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Host ground truth per frame, with depths beyond the model range removed.
    pub fn ground_truth_maps(&self) -> Result<Vec<DepthMap>> {
        let Some((d, _)) = &self.ground_truth else {
            return Err(Error::MissingInput {
                mode: "eval",
                what: "ground-truth depth",
            });
        };
        (0..self.len())
            .map(|t| DepthMap::from_tensor(&d.narrow(0, t, 1)?))
            .collect()
    }

    fn frame_sparse(&self, t: usize) -> Result<Option<(Tensor, Tensor)>> {
        Ok(match &self.sparse {
            Some((d, m)) => Some((d.narrow(0, t, 1)?, m.narrow(0, t, 1)?)),
            None => None,
        })
    }
}

/// Ground truth with pixels outside `(0, max_depth]` zeroed.
pub fn clip_ground_truth(gt: &DepthMap, max_depth: f64) -> DepthMap {
    let data = gt
        .data
        .iter()
        .map(|&d| if d > 0.0 && (d as f64) <= max_depth { d } else { 0.0 })
        .collect();
    DepthMap {
        width: gt.width,
        height: gt.height,
        data,
    }
}

fn stack_maps(maps: &[DepthMap], device: &Device) -> Result<(Tensor, Tensor)> {
    let d: Vec<Tensor> = maps.iter().map(|m| m.to_tensor(device)).collect::<Result<_>>()?;
    let v: Vec<Tensor> = maps.iter().map(|m| m.validity().to_tensor(device)).collect::<Result<_>>()?;
    Ok((Tensor::cat(&d, 0)?, Tensor::cat(&v, 0)?))
}

/// Everything the trainer reads, already on the device.
#[derive(Clone, Debug)]
pub struct TrainingData {
    pub sequences: Vec<SequenceTensors>,
}

impl TrainingData {
    /// Move sequences to the device. Ground truth is required for
    /// supervised training and for drawing sparse inputs; the sparse
    /// pattern is required for completion.
    pub fn prepare(
        sequences: &[Sequence],
        model: &ModelConfig,
        mode: Mode,
        pattern: Option<&SparsePattern>,
        seed: u64,
        device: &Device,
    ) -> Result<Self> {
        if sequences.is_empty() {
            return Err(Error::Config("no training sequences".into()));
        }
        if mode.uses_sparse_input() && pattern.is_none() {
            return Err(Error::MissingInput {
                mode: mode.as_str(),
                what: "sparse pattern",
            });
        }
        let mut out = Vec::with_capacity(sequences.len());
        for (si, seq) in sequences.iter().enumerate() {
            if seq.is_empty() {
                return Err(Error::Config(format!("sequence {} has no frames", seq.id)));
            }
            seq.intrinsics.check_size(model.height, model.width)?;
            let imgs: Vec<Tensor> = seq
                .frames
                .iter()
                .map(|f| {
                    if (f.image.width, f.image.height) != (model.width, model.height) {
                        return Err(Error::shape(format!(
                            "sequence {} has {}x{} frames, model expects {}x{}",
                            seq.id, f.image.width, f.image.height, model.width, model.height
                        )));
                    }
                    f.image.to_tensor(device)
                })
                .collect::<Result<_>>()?;
            let gts: Option<Vec<DepthMap>> = seq
                .frames
                .iter()
                .map(|f| f.depth.as_ref().map(|d| clip_ground_truth(d, model.max_depth)))
                .collect();
            let needs_gt = mode == Mode::Supervised || mode.uses_sparse_input();
            if needs_gt && gts.is_none() {
                return Err(Error::MissingInput {
                    mode: mode.as_str(),
                    what: "ground-truth depth",
                });
            }
            let sparse = match (pattern.filter(|_| mode.uses_sparse_input()), &gts) {
                (Some(p), Some(g)) => {
                    let maps = g
                        .iter()
                        .enumerate()
                        .map(|(t, d)| p.apply(d, frame_seed(seed, si as u64, t as u64)))
                        .collect::<Result<Vec<SparseDepth>>>()?;
                    let depths: Vec<DepthMap> = maps.into_iter().map(|s| s.depth).collect();
                    Some(stack_maps(&depths, device)?)
                }
                _ => None,
            };
            out.push(SequenceTensors {
                id: seq.id.clone(),
                intrinsics: seq.intrinsics.clone(),
                images: Tensor::cat(&imgs, 0)?,
                ground_truth: gts.map(|g| stack_maps(&g, device)).transpose()?,
                sparse,
            });
        }
        Ok(Self { sequences: out })
    }

    pub fn total_frames(&self) -> usize {
        self.sequences.iter().map(|s| s.len()).sum()
    }
}

/// A batch of target frames with their temporal neighbours.
struct FrameBatch {
    target: Tensor,
    /// Neighbours with the target substituted where unavailable.
    prev: Tensor,
    next: Tensor,
    prev_ok: Vec<bool>,
    next_ok: Vec<bool>,
    intrinsics: Vec<Intrinsics>,
    ground_truth: Option<(Tensor, Tensor)>,
    sparse: Option<(Tensor, Tensor)>,
}

/// `(sequence, frame, has_prev, has_next)` per batch element.
type FrameRef = (usize, usize, bool, bool);

fn gather(data: &TrainingData, items: &[FrameRef]) -> Result<FrameBatch> {
    let pick = |t: &Tensor, i: usize| t.narrow(0, i, 1);
    let mut target = Vec::new();
    let mut prev = Vec::new();
    let mut next = Vec::new();
    let mut gt = Vec::new();
    let mut gm = Vec::new();
    let mut sd = Vec::new();
    let mut sm = Vec::new();
    for &(s, t, hp, hn) in items {
        let seq = &data.sequences[s];
        let img = pick(&seq.images, t)?;
        prev.push(if hp { pick(&seq.images, t - 1)? } else { img.clone() });
        next.push(if hn { pick(&seq.images, t + 1)? } else { img.clone() });
        target.push(img);
        if let Some((d, m)) = &seq.ground_truth {
            gt.push(pick(d, t)?);
            gm.push(pick(m, t)?);
        }
        if let Some((d, m)) = &seq.sparse {
            sd.push(pick(d, t)?);
            sm.push(pick(m, t)?);
        }
    }
    let pair = |a: Vec<Tensor>, b: Vec<Tensor>| -> Result<Option<(Tensor, Tensor)>> {
        if a.len() == items.len() {
            Ok(Some((Tensor::cat(&a, 0)?, Tensor::cat(&b, 0)?)))
        } else {
            Ok(None)
        }
    };
    Ok(FrameBatch {
        target: Tensor::cat(&target, 0)?,
        prev: Tensor::cat(&prev, 0)?,
        next: Tensor::cat(&next, 0)?,
        prev_ok: items.iter().map(|i| i.2).collect(),
        next_ok: items.iter().map(|i| i.3).collect(),
        intrinsics: items.iter().map(|i| data.sequences[i.0].intrinsics.clone()).collect(),
        ground_truth: pair(gt, gm)?,
        sparse: pair(sd, sm)?,
    })
}

fn flags(ok: &[bool], like: &Tensor) -> Result<Tensor> {
    let v: Vec<f32> = ok.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
    Ok(Tensor::from_vec(v, (ok.len(), 1, 1, 1), like.device())?.to_dtype(like.dtype())?)
}

/// Warp with per-element intrinsics; one call when they all agree.
fn warp(source: &Tensor, depth: &Tensor, transform: &Tensor, intr: &[Intrinsics]) -> Result<(Tensor, Tensor)> {
    if intr.iter().all(|k| k == &intr[0]) {
        return inverse_warp_with_transform(source, depth, transform, &intr[0]);
    }
    let mut w = Vec::with_capacity(intr.len());
    let mut m = Vec::with_capacity(intr.len());
    for (i, k) in intr.iter().enumerate() {
        let (a, b) = inverse_warp_with_transform(
            &source.narrow(0, i, 1)?,
            &depth.narrow(0, i, 1)?,
            &transform.narrow(0, i, 1)?,
            k,
        )?;
        w.push(a);
        m.push(b);
    }
    Ok((Tensor::cat(&w, 0)?, Tensor::cat(&m, 0)?))
}

/// Loss of one frame batch given the network's disparities.
fn batch_loss(
    model: &DepthModel,
    batch: &FrameBatch,
    disparities: &[Tensor],
    iteration: u64,
    weights: &LossWeights,
    train: bool,
) -> Result<LossBreakdown> {
    let mode = model.mode();
    let (_, _, h, w) = batch.target.dims4()?;
    let full: Vec<Tensor> = disparities
        .iter()
        .map(|d| {
            if d.dims()[2] == h && d.dims()[3] == w {
                Ok(d.clone())
            } else {
                resize_bilinear(d, h, w)
            }
        })
        .collect::<Result<_>>()?;

    // Sources actually present somewhere in the batch.
    struct Side {
        image: Tensor,
        avail: Tensor,
        transform: Option<Tensor>,
    }
    let mut sides = Vec::new();
    if mode.is_self_supervised() {
        let mut firsts = Vec::new();
        let mut seconds = Vec::new();
        let mut kinds = Vec::new();
        if batch.prev_ok.iter().any(|&b| b) {
            firsts.push(batch.prev.clone());
            seconds.push(batch.target.clone());
            kinds.push((batch.prev.clone(), flags(&batch.prev_ok, &batch.target)?, true));
        }
        if batch.next_ok.iter().any(|&b| b) {
            firsts.push(batch.target.clone());
            seconds.push(batch.next.clone());
            kinds.push((batch.next.clone(), flags(&batch.next_ok, &batch.target)?, false));
        }
        if kinds.is_empty() {
            return Err(Error::MissingInput {
                mode: mode.as_str(),
                what: "temporal neighbours",
            });
        }
        // Both pose pairs in temporal order through one call.
        let poses = model.predict_pose(&Tensor::cat(&firsts, 0)?, &Tensor::cat(&seconds, 0)?, train)?;
        let b = batch.target.dims()[0];
        for (k, (image, avail, invert)) in kinds.into_iter().enumerate() {
            let p = poses.narrow(0, k * b, b)?;
            sides.push(Side {
                image,
                avail,
                transform: Some(pose_to_matrix(&p, invert)?),
            });
        }
    }

    let ones = batch.target.narrow(1, 0, 1)?.ones_like()?;
    let identity: Vec<Tensor> = sides
        .iter()
        .map(|s| {
            let l = photometric(&batch.target, &s.image, &ones, weights.alpha)?.loss;
            let large = l.ones_like()?.affine(INVALID_LOSS, 0.0)?;
            Ok(s.avail.broadcast_as(l.shape())?.gt(0.5)?.where_cond(&l, &large)?)
        })
        .collect::<Result<_>>()?;

    let mut scales = Vec::with_capacity(full.len());
    for disp in full {
        let depth = model.disp_to_depth(&disp)?;
        let mut reprojection = Vec::with_capacity(sides.len());
        for s in &sides {
            let tr = s.transform.as_ref().expect("self-supervised side has a transform");
            let (warped, inb) = warp(&s.image, &depth, tr, &batch.intrinsics)?;
            let valid = inb.broadcast_mul(&s.avail)?;
            reprojection.push(photometric(&batch.target, &warped, &valid, weights.alpha)?);
        }
        scales.push(ScaleTerms {
            disp,
            depth,
            reprojection,
        });
    }
    let inputs = LossInputs {
        target: &batch.target,
        scales: &scales,
        identity: &identity,
        ground_truth: batch.ground_truth.as_ref().map(|(a, b)| (a, b)),
        sparse: batch.sparse.as_ref().map(|(a, b)| (a, b)),
        iteration,
    };
    total_loss(mode, &inputs, weights)
}

fn sparse_of(batch: &FrameBatch) -> Option<(&Tensor, &Tensor)> {
    batch.sparse.as_ref().map(|(a, b)| (a, b))
}

/// Scale gradients so their global norm is at most `max_norm`. Returns the
/// norm before clipping.
pub fn clip_gradients(grads: &mut GradStore, vars: &[Var], max_norm: f64) -> Result<f64> {
    let mut sq = 0.0;
    for v in vars {
        if let Some(g) = grads.get(v.as_tensor()) {
            sq += g.sqr()?.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        }
    }
    let norm = sq.sqrt();
    if norm > max_norm {
        let s = max_norm / (norm + 1e-6);
        for v in vars {
            if let Some(g) = grads.remove(v.as_tensor()) {
                grads.insert(v.as_tensor(), g.affine(s, 0.0)?);
            }
        }
    }
    Ok(norm)
}

/// Where training stands; stored in checkpoints for resumption.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Progress {
    /// Optimizer steps taken over both stages.
    pub iteration: u64,
    /// 0 before training, then 1 or 2.
    pub stage: u8,
    /// Epochs completed in `stage`.
    pub epoch: usize,
}

impl Progress {
    pub fn from_meta(meta: &CheckpointMeta) -> Self {
        Self {
            iteration: meta.iteration,
            stage: meta.stage,
            epoch: meta.epoch,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct StepRecord {
    pub iteration: u64,
    pub stage: u8,
    pub epoch: usize,
    pub losses: LossValues,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct EpochSummary {
    pub stage: u8,
    pub epoch: usize,
    pub steps: usize,
    pub mean_loss: f64,
    pub val_rmse: Option<f64>,
    pub val_abs_rel: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochSummary>,
    pub stage1_steps: usize,
    pub stage2_steps: usize,
    /// Frames processed in stage 2, summed over active batch elements per step.
    pub stage2_frames: usize,
    pub skipped_steps: usize,
    pub progress: Progress,
}

impl TrainReport {
    pub fn epoch_means(&self, stage: u8) -> Vec<f64> {
        self.epochs.iter().filter(|e| e.stage == stage).map(|e| e.mean_loss).collect()
    }
}

pub const LOG_HEADER: &str =
    "kind,iteration,epoch,stage,total,view_synthesis,smoothness,sparsity,supervised,lambda,rmse,abs_rel";

/// Append-only CSV training log.
pub struct TrainLog {
    out: BufWriter<File>,
}

impl TrainLog {
    pub fn open(path: &Path) -> Result<Self> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let fresh = std::fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        let mut log = Self {
            out: BufWriter::new(file),
        };
        if fresh {
            log.line(LOG_HEADER)?;
        }
        Ok(log)
    }

    fn line(&mut self, s: &str) -> Result<()> {
        writeln!(self.out, "{s}")
            .and_then(|_| self.out.flush())
            .map_err(|e| Error::Io {
                path: PathBuf::from("<training log>"),
                source: e,
            })
    }

    pub fn train_row(&mut self, r: &StepRecord) -> Result<()> {
        let l = &r.losses;
        self.line(&format!(
            "train,{},{},{},{:.6e},{:.6e},{:.6e},{:.6e},{:.6e},{:.6e},,",
            r.iteration, r.epoch, r.stage, l.total, l.view_synthesis, l.smoothness, l.sparsity, l.supervised, l.lambda
        ))
    }

    pub fn val_row(&mut self, iteration: u64, e: &EpochSummary) -> Result<()> {
        let f = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        self.line(&format!(
            "val,{iteration},{},{},,,,,,,{},{}",
            e.epoch,
            e.stage,
            f(e.val_rmse),
            f(e.val_abs_rel)
        ))
    }
}

/// Optional side outputs of a training run.
#[derive(Default)]
pub struct TrainHooks<'a> {
    pub log: Option<TrainLog>,
    /// Saved after every epoch.
    pub checkpoint: Option<(PathBuf, CheckpointMeta)>,
    /// Sequences evaluated at the end of every epoch.
    pub validation: Option<(&'a TrainingData, EvalConfig)>,
}

/// Two-stage trainer over prepared data.
pub struct Trainer<'a> {
    model: &'a DepthModel,
    data: &'a TrainingData,
    cfg: TrainConfig,
    hooks: TrainHooks<'a>,
    report: TrainReport,
}

fn new_optimizer(vars: Vec<Var>, lr: f64) -> Result<AdamW> {
    Ok(AdamW::new(
        vars,
        ParamsAdamW {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        },
    )?)
}

fn epoch_rng(seed: u64, stage: u8, epoch: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(frame_seed(seed, stage as u64, epoch as u64))
}

impl<'a> Trainer<'a> {
    pub fn new(model: &'a DepthModel, data: &'a TrainingData, cfg: TrainConfig, hooks: TrainHooks<'a>) -> Result<Self> {
        cfg.validate()?;
        let mode = model.mode();
        for s in &data.sequences {
            if mode == Mode::Supervised && s.ground_truth.is_none() {
                return Err(Error::MissingInput {
                    mode: mode.as_str(),
                    what: "ground-truth depth",
                });
            }
            if mode.uses_sparse_input() && s.sparse.is_none() {
                return Err(Error::MissingInput {
                    mode: mode.as_str(),
                    what: "sparse depth",
                });
            }
        }
        Ok(Self {
            model,
            data,
            cfg,
            hooks,
            report: TrainReport::default(),
        })
    }

    /// Run whatever remains of both stages from `start`.
    pub fn run(mut self, start: Progress) -> Result<TrainReport> {
        self.report.progress = start;
        let s1_from = match start.stage {
            0 => 0,
            1 => start.epoch,
            _ => self.cfg.stage1_epochs,
        };
        if s1_from < self.cfg.stage1_epochs {
            let vars = self.model.store().trainable_vars(&[]);
            let mut opt = new_optimizer(vars.clone(), self.cfg.learning_rate)?;
            for epoch in s1_from..self.cfg.stage1_epochs {
                self.stage1_epoch(epoch, &mut opt, &vars)?;
                self.end_epoch(1, epoch)?;
            }
        }
        let s2_from = if start.stage == 2 { start.epoch } else { 0 };
        if s2_from < self.cfg.stage2_epochs {
            let vars = self.model.store().trainable_vars(&[INIT_PREFIX]);
            let lr = self.cfg.stage2_learning_rate.unwrap_or(self.cfg.learning_rate);
            let mut opt = new_optimizer(vars.clone(), lr)?;
            for epoch in s2_from..self.cfg.stage2_epochs {
                self.stage2_epoch(epoch, &mut opt, &vars)?;
                self.end_epoch(2, epoch)?;
            }
        }
        Ok(self.report)
    }

    fn step(&mut self, loss: &LossBreakdown, opt: &mut AdamW, vars: &[Var], stage: u8, epoch: usize) -> Result<bool> {
        let values = loss.values()?;
        if !values.total.is_finite() {
            log::warn!("non-finite loss at iteration {}, step skipped", self.report.progress.iteration);
            self.report.skipped_steps += 1;
            return Ok(false);
        }
        let mut grads = loss.total.backward()?;
        if let Some(c) = self.cfg.grad_clip {
            clip_gradients(&mut grads, vars, c)?;
        }
        opt.step(&grads)?;
        let rec = StepRecord {
            iteration: self.report.progress.iteration,
            stage,
            epoch,
            losses: values,
        };
        if let Some(l) = self.hooks.log.as_mut() {
            l.train_row(&rec)?;
        }
        self.report.steps.push(rec);
        self.report.progress.iteration += 1;
        Ok(true)
    }

    fn stage1_epoch(&mut self, epoch: usize, opt: &mut AdamW, vars: &[Var]) -> Result<()> {
        let self_sup = self.model.mode().is_self_supervised();
        let mut items: Vec<FrameRef> = Vec::new();
        for (s, seq) in self.data.sequences.iter().enumerate() {
            let n = seq.len();
            if self_sup {
                items.extend((1..n.saturating_sub(1)).map(|t| (s, t, true, true)));
            } else {
                items.extend((0..n).map(|t| (s, t, false, false)));
            }
        }
        if items.is_empty() {
            return Err(Error::Config("no frame has both temporal neighbours".into()));
        }
        items.shuffle(&mut epoch_rng(self.cfg.seed, 1, epoch));
        if let Some(n) = self.cfg.stage1_samples {
            items.truncate(n.max(1));
        }
        let cap = self.cfg.max_steps_per_epoch.unwrap_or(usize::MAX);
        let mut steps = 0;
        for chunk in items.chunks(self.cfg.batch_size) {
            if steps >= cap {
                break;
            }
            let batch = gather(self.data, chunk)?;
            let out = self.model.forward(&batch.target, sparse_of(&batch), None, true)?;
            let loss = batch_loss(
                self.model,
                &batch,
                &out.disparities,
                self.report.progress.iteration,
                &self.cfg.weights,
                true,
            )?;
            if self.step(&loss, opt, vars, 1, epoch)? {
                steps += 1;
                self.report.stage1_steps += 1;
            }
        }
        Ok(())
    }

    fn stage2_epoch(&mut self, epoch: usize, opt: &mut AdamW, vars: &[Var]) -> Result<()> {
        let lens: Vec<usize> = self.data.sequences.iter().map(|s| s.len()).collect();
        let mut subs = split_subsequences(&lens, self.cfg.subseq_length, frame_seed(self.cfg.seed, 2, epoch as u64))?;
        for (s, &n) in lens.iter().enumerate() {
            if n % self.cfg.subseq_length != 0 && n % self.cfg.subseq_length < crate::data::MIN_SUBSEQ_LEN {
                log::warn!(
                    "sequence {}: trailing {} frames are too short for a sub-sequence and are skipped",
                    self.data.sequences[s].id,
                    n % self.cfg.subseq_length
                );
            }
        }
        if let Some(n) = self.cfg.stage2_subsequences {
            subs.truncate(n.max(1));
        }
        let cap = self.cfg.max_steps_per_epoch.unwrap_or(usize::MAX);
        let mut steps = 0;
        'outer: for chunk in subs.chunks(self.cfg.batch_size) {
            let mut group = chunk.to_vec();
            group.sort_by(|a, b| b.len.cmp(&a.len));
            let mut state: Option<HiddenState> = None;
            for k in 0..group[0].len {
                if steps >= cap {
                    break 'outer;
                }
                let active = group.iter().take_while(|s| s.len > k).count();
                let (loss, next) = self.stage2_frame(&group[..active], k, state.as_ref())?;
                if self.step(&loss, opt, vars, 2, epoch)? {
                    steps += 1;
                    self.report.stage2_steps += 1;
                    self.report.stage2_frames += active;
                }
                state = next;
            }
        }
        Ok(())
    }

    /// Forward and loss for frame `k` of each sub-sequence in `group`.
    /// Returns the state to carry, cut from the graph.
    fn stage2_frame(
        &self,
        group: &[SubSequence],
        k: usize,
        carried: Option<&HiddenState>,
    ) -> Result<(LossBreakdown, Option<HiddenState>)> {
        let (loss, state) = frame_step(self.model, self.data, group, k, carried, self.report.progress.iteration, &self.cfg.weights)?;
        Ok((loss, state.map(|s| s.detach())))
    }

    fn end_epoch(&mut self, stage: u8, epoch: usize) -> Result<()> {
        let losses: Vec<f64> = self
            .report
            .steps
            .iter()
            .filter(|r| r.stage == stage && r.epoch == epoch)
            .map(|r| r.losses.total)
            .collect();
        let mean_loss = if losses.is_empty() {
            f64::NAN
        } else {
            losses.iter().sum::<f64>() / losses.len() as f64
        };
        let mut summary = EpochSummary {
            stage,
            epoch,
            steps: losses.len(),
            mean_loss,
            val_rmse: None,
            val_abs_rel: None,
        };
        if let Some((val, eval_cfg)) = &self.hooks.validation {
            let (rmse, abs_rel) = validate(self.model, val, eval_cfg)?;
            summary.val_rmse = Some(rmse);
            summary.val_abs_rel = Some(abs_rel);
            if let Some(l) = self.hooks.log.as_mut() {
                l.val_row(self.report.progress.iteration, &summary)?;
            }
        }
        log::info!(
            "stage {stage} epoch {epoch}: {} steps, mean loss {mean_loss:.5}",
            summary.steps
        );
        self.report.epochs.push(summary);
        self.report.progress.stage = stage;
        self.report.progress.epoch = epoch + 1;
        if let Some((path, template)) = &self.hooks.checkpoint {
            let meta = CheckpointMeta {
                iteration: self.report.progress.iteration,
                stage,
                epoch: epoch + 1,
                ..template.clone()
            };
            save_checkpoint(path, self.model, &meta)?;
        }
        Ok(())
    }
}

/// One stage-2 frame: forward from `carried` (or the learned initial state
/// at the first frame) and the frame loss. The returned state is still
/// attached to this frame's graph.
fn frame_step(
    model: &DepthModel,
    data: &TrainingData,
    group: &[SubSequence],
    k: usize,
    carried: Option<&HiddenState>,
    iteration: u64,
    weights: &LossWeights,
) -> Result<(LossBreakdown, Option<HiddenState>)> {
    let items: Vec<FrameRef> = group
        .iter()
        .map(|s| (s.sequence, s.start + k, k > 0, k + 1 < s.len))
        .collect();
    let batch = gather(data, &items)?;
    let n = items.len();
    let state = if model.is_recurrent() {
        Some(match carried {
            Some(s) if k > 0 => s.narrow_batch(n)?,
            _ => model.initial_state(n)?.detach(),
        })
    } else {
        None
    };
    let out = model.forward(&batch.target, sparse_of(&batch), state.as_ref(), true)?;
    let loss = batch_loss(model, &batch, &out.disparities, iteration, weights, true)?;
    Ok((loss, out.state))
}

/// Run stage 1 then stage 2 from scratch with no side outputs.
pub fn train(model: &DepthModel, data: &TrainingData, cfg: &TrainConfig) -> Result<TrainReport> {
    Trainer::new(model, data, cfg.clone(), TrainHooks::default())?.run(Progress::default())
}

/// Initial recurrent state used at inference.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitState {
    #[default]
    Learned,
    Zero,
}

/// Predict every frame of a prepared sequence in order, carrying the state
/// across the whole sequence.
pub fn infer_tensors(model: &DepthModel, seq: &SequenceTensors, init: InitState) -> Result<Vec<DepthMap>> {
    let mut state = match (model.is_recurrent(), init) {
        (false, _) => None,
        (true, InitState::Learned) => Some(model.initial_state(1)?),
        (true, InitState::Zero) => Some(model.zero_state(1)?),
    };
    let mut out = Vec::with_capacity(seq.len());
    for t in 0..seq.len() {
        let img = seq.images.narrow(0, t, 1)?;
        let sparse = seq.frame_sparse(t)?;
        let res = model.forward(&img, sparse.as_ref().map(|(a, b)| (a, b)), state.as_ref(), false)?;
        let depth = model.disp_to_depth(&res.disparities[0].detach())?;
        out.push(DepthMap::from_tensor(&depth)?);
        state = res.state.map(|s| s.detach());
    }
    Ok(out)
}

/// Predict depth for raw frames, optionally with sparse inputs.
pub fn infer_sequence(
    model: &DepthModel,
    images: &[Image],
    sparse: Option<&[SparseDepth]>,
    init: InitState,
) -> Result<Vec<DepthMap>> {
    let dev = model.device();
    let cfg = model.config();
    if images.is_empty() {
        return Ok(Vec::new());
    }
    for im in images {
        if (im.width, im.height) != (cfg.width, cfg.height) {
            return Err(Error::shape(format!(
                "frame is {}x{}, model expects {}x{}",
                im.width, im.height, cfg.width, cfg.height
            )));
        }
    }
    let sparse_t = match (model.mode().uses_sparse_input(), sparse) {
        (true, None) => {
            return Err(Error::MissingInput {
                mode: model.mode().as_str(),
                what: "sparse depth",
            })
        }
        (true, Some(s)) => {
            if s.len() != images.len() {
                return Err(Error::shape("need one sparse map per frame"));
            }
            let depths: Vec<DepthMap> = s.iter().map(|x| x.depth.clone()).collect();
            Some(stack_maps(&depths, dev)?)
        }
        (false, _) => None,
    };
    let imgs: Vec<Tensor> = images.iter().map(|i| i.to_tensor(dev)).collect::<Result<_>>()?;
    let seq = SequenceTensors {
        id: String::new(),
        intrinsics: Intrinsics::new(1.0, 1.0, 0.0, 0.0, cfg.width, cfg.height)?,
        images: Tensor::cat(&imgs, 0)?,
        ground_truth: None,
        sparse: sparse_t,
    };
    infer_tensors(model, &seq, init)
}

/// Validation RMSE and Abs Rel averaged over sequences.
pub fn validate(model: &DepthModel, data: &TrainingData, cfg: &EvalConfig) -> Result<(f64, f64)> {
    let median = cfg.median_scaling.unwrap_or(model.mode().needs_median_scaling());
    let mut rmse = 0.0;
    let mut abs_rel = 0.0;
    for seq in &data.sequences {
        let preds = infer_tensors(model, seq, InitState::Learned)?;
        let ev = evaluate_sequence(&preds, &seq.ground_truth_maps()?, cfg, median)?;
        rmse += ev.metrics.rmse;
        abs_rel += ev.metrics.abs_rel;
    }
    let n = data.sequences.len().max(1) as f64;
    Ok((rmse / n, abs_rel / n))
}

/// Outcome of [`tbptt_probe`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TbpttProbe {
    /// Frame-2 loss reaches the learned initial state through the carry
    /// produced by the training path.
    pub init_has_grad: bool,
    /// Same check with the carry left attached, as a control.
    pub control_init_has_grad: bool,
}

impl TbpttProbe {
    /// The training path is cut while the control shows the probe can see edges.
    pub fn window_is_one(&self) -> bool {
        !self.init_has_grad && self.control_init_has_grad
    }
}

/// Run the first two stage-2 frames of one sub-sequence batch and check
/// whether the frame-2 loss reaches anything used only by frame 1. Frame 1
/// starts from the attached learned state, so any edge through the carried
/// state would show up as a gradient on it.
pub fn tbptt_probe(model: &DepthModel, data: &TrainingData, cfg: &TrainConfig) -> Result<TbpttProbe> {
    if !model.is_recurrent() {
        return Err(Error::Config("truncation probe needs a recurrent model".into()));
    }
    let lens: Vec<usize> = data.sequences.iter().map(|s| s.len()).collect();
    let subs = split_subsequences(&lens, cfg.subseq_length, cfg.seed)?;
    let group: Vec<SubSequence> = subs.into_iter().take(cfg.batch_size).collect();
    if group.is_empty() {
        return Err(Error::Config("no sub-sequence available for the probe".into()));
    }
    let n = group.len();
    let init = model.initial_state(n)?;
    let (h0, c0) = (model.store().get(crate::model::INIT_H), model.store().get(crate::model::INIT_C));
    let (Some(h0), Some(c0)) = (h0, c0) else {
        return Err(Error::Config("model has no learned initial state".into()));
    };
    let batch = gather(
        data,
        &group
            .iter()
            .map(|s| (s.sequence, s.start, false, true))
            .collect::<Vec<_>>(),
    )?;
    let first = model.forward(&batch.target, sparse_of(&batch), Some(&init), true)?;
    let s1 = first.state.expect("recurrent model returns a state");

    let check = |carry: &HiddenState| -> Result<bool> {
        let (loss, _) = frame_step(model, data, &group, 1, Some(carry), 0, &cfg.weights)?;
        let grads = loss.total.backward()?;
        let nonzero = |v: &Var| -> Result<bool> {
            Ok(match grads.get(v.as_tensor()) {
                Some(g) => g.abs()?.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()? > 0.0,
                None => false,
            })
        };
        Ok(nonzero(h0)? || nonzero(c0)?)
    };
    // The trainer's carry goes through the same detach as here.
    Ok(TbpttProbe {
        init_has_grad: check(&s1.detach())?,
        control_init_has_grad: check(&s1)?,
    })
}
