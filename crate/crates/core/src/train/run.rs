use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::adam::{adam_step, AdamConfig, AdamState};
use super::checkpoint::Checkpoint;
use super::config::TrainConfig;
use crate::autodiff::{NormMode, Tape};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, PhysMamba};
use crate::params::ParamStore;
use crate::signal::{compute_metrics, diff_normalize, diff_normalize_label, estimate_hr, neg_pearson_loss, MetricsReport};
use crate::synth::{resize_frames, ClipRecord};
use crate::tensor::Tensor;

/// A clip resized to the model's frame size, with normalized frame
/// differences as input and normalized label differences as target.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedClip {
    pub id: String,
    pub fs: f64,
    /// `(3, T - 1, H, W)`.
    pub frames: Tensor,
    /// Length `T - 1`.
    pub target: Vec<f64>,
}

impl PreparedClip {
    pub fn len(&self) -> usize {
        self.target.len()
    }

    pub fn is_empty(&self) -> bool {
        self.target.is_empty()
    }

    fn window_into(&self, start: usize, len: usize, frames: &mut Vec<f64>, target: &mut Vec<f64>) {
        let s = self.frames.shape();
        let (t, plane) = (s[1], s[2] * s[3]);
        for c in 0..s[0] {
            frames.extend_from_slice(&self.frames.data()[(c * t + start) * plane..][..len * plane]);
        }
        target.extend_from_slice(&self.target[start..start + len]);
    }
}

pub fn prepare_clip(record: &ClipRecord, model: &ModelConfig) -> Result<PreparedClip> {
    let frames = resize_frames(&record.frames, model.height, model.width)?;
    Ok(PreparedClip {
        id: record.meta.id.clone(),
        fs: record.meta.fs,
        frames: diff_normalize(&frames)?,
        target: diff_normalize_label(&record.label)?,
    })
}

pub fn prepare_dataset(records: &[ClipRecord], model: &ModelConfig) -> Result<Vec<PreparedClip>> {
    records.par_iter().map(|r| prepare_clip(r, model)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRow {
    pub epoch: usize,
    pub step: u64,
    pub loss: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub losses: Vec<LossRow>,
}

impl TrainOutcome {
    /// Mean loss of every epoch run, in order.
    pub fn epoch_means(&self) -> Vec<(usize, f64)> {
        let mut out: Vec<(usize, f64, usize)> = Vec::new();
        for r in &self.losses {
            match out.last_mut() {
                Some((e, sum, n)) if *e == r.epoch => {
                    *sum += r.loss;
                    *n += 1;
                }
                _ => out.push((r.epoch, r.loss, 1)),
            }
        }
        out.into_iter().map(|(e, s, n)| (e, s / n as f64)).collect()
    }
}

/// Stack equal-length windows into `(B, 3, T, H, W)` inputs and `(B, T)` targets.
fn assemble(clips: &[PreparedClip], items: &[(usize, usize)], len: usize) -> Result<(Tensor, Tensor)> {
    let s = clips[items[0].0].frames.shape();
    let (h, w) = (s[2], s[3]);
    let mut frames = Vec::with_capacity(items.len() * 3 * len * h * w);
    let mut target = Vec::with_capacity(items.len() * len);
    for &(ci, start) in items {
        clips[ci].window_into(start, len, &mut frames, &mut target);
    }
    Ok((
        Tensor::new([items.len(), 3, len, h, w], frames)?,
        Tensor::new([items.len(), len], target)?,
    ))
}

/// `(clip, offset)` windows of one epoch in training order.
fn epoch_plan(clips: &[PreparedClip], cfg: &TrainConfig, len: usize, epoch: usize) -> Vec<(usize, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(epoch as u64);
    let mut items = Vec::new();
    for (ci, clip) in clips.iter().enumerate() {
        if clip.len() < len {
            continue;
        }
        for _ in 0..cfg.windows_per_clip {
            items.push((ci, rng.gen_range(0..=clip.len() - len)));
        }
    }
    items.shuffle(&mut rng);
    items
}

fn annotate(err: Error, step: u64, epoch: usize, batch: usize) -> Error {
    match err {
        Error::NonFinite { op } => Error::Numeric {
            step: step as usize,
            detail: format!("epoch {epoch} batch {batch}: non-finite value from {op}"),
        },
        other => other,
    }
}

fn train_step(net: &PhysMamba, params: &mut ParamStore, x: Tensor, y: Tensor) -> Result<(f64, Vec<Tensor>)> {
    let tape = Tape::new();
    let mut s = params.bind(&tape, NormMode::Train, true)?;
    let xv = tape.constant(x)?;
    let yv = tape.constant(y)?;
    let pred = net.forward(&mut s, &xv)?;
    let (loss, _) = neg_pearson_loss(&tape, &pred, &yv)?;
    let g = tape.backward(&loss)?;
    Ok((loss.data()[0], s.gradients(&g)))
}

/// Initial training state for `model`.
pub fn fresh_checkpoint(model: &ModelConfig, train: &TrainConfig) -> Result<Checkpoint> {
    let params = PhysMamba::new(model.clone())?.init_params(train.seed)?;
    Ok(Checkpoint {
        epoch: 0,
        model: model.clone(),
        train: train.clone(),
        adam: AdamState::for_store(&params),
        params,
    })
}

/// Train on `clips` with the negative-correlation loss until `train.epochs`
/// epochs are complete, starting from `resume` when given.
///
/// Windows of `model.frames` steps are drawn per epoch from a generator
/// seeded by `(train.seed, epoch)`. At every epoch boundary the state is
/// rounded to 32-bit precision so that a resumed run matches an
/// uninterrupted one. With `out_dir`, `loss.csv` and per-epoch checkpoints
/// (`checkpoints/epoch_NNN`) are written there.
pub fn train(
    model: &ModelConfig,
    train: &TrainConfig,
    clips: &[PreparedClip],
    out_dir: Option<&Path>,
    resume: Option<Checkpoint>,
) -> Result<TrainOutcome> {
    train.validate()?;
    model.validate()?;
    if clips.is_empty() {
        return Err(Error::Argument("training needs at least one clip".into()));
    }
    let len = model.frames;
    let usable = clips.iter().filter(|c| c.len() >= len).count();
    for c in clips.iter().filter(|c| c.len() < len) {
        log::warn!("clip `{}` has {} steps, fewer than the window {len}; skipped", c.id, c.len());
    }
    if usable == 0 {
        return Err(Error::InsufficientData(format!("no clip provides a {len}-step window")));
    }
    let net = PhysMamba::new(model.clone())?;
    let mut ck = match resume {
        Some(ck) => {
            ck.check_model(model)?;
            Checkpoint { train: train.clone(), ..ck }
        }
        None => fresh_checkpoint(model, train)?,
    };
    let adam = AdamConfig::new(train.lr, train.weight_decay);

    let mut csv = match out_dir {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let path = dir.join("loss.csv");
            let fresh = ck.epoch == 0 || !path.exists();
            let mut f = fs::OpenOptions::new()
                .create(true)
                .append(!fresh)
                .write(true)
                .truncate(fresh)
                .open(&path)
                .map_err(|e| Error::io(&path, e))?;
            if fresh {
                writeln!(f, "epoch,step,loss").map_err(|e| Error::io(&path, e))?;
            }
            Some((path, f))
        }
        None => None,
    };

    let mut losses = Vec::new();
    for epoch in ck.epoch + 1..=train.epochs {
        let plan = epoch_plan(clips, train, len, epoch);
        for (bi, batch) in plan.chunks(train.batch_size).enumerate() {
            let step = ck.adam.step + 1;
            let (x, y) = assemble(clips, batch, len)?;
            let (loss, grads) =
                train_step(&net, &mut ck.params, x, y).map_err(|e| annotate(e, step, epoch, bi))?;
            if !loss.is_finite() {
                return Err(Error::Numeric {
                    step: step as usize,
                    detail: format!("epoch {epoch} batch {bi}: loss is {loss}"),
                });
            }
            adam_step(&mut ck.params, &grads, &mut ck.adam, &adam)?;
            let row = LossRow { epoch, step, loss };
            if let Some((path, f)) = csv.as_mut() {
                writeln!(f, "{},{},{}", row.epoch, row.step, row.loss).map_err(|e| Error::io(&*path, e))?;
            }
            losses.push(row);
        }
        ck.params.round_to_f32();
        ck.adam.round_to_f32();
        ck.epoch = epoch;
        let mean = {
            let rows: Vec<f64> = losses.iter().filter(|r| r.epoch == epoch).map(|r| r.loss).collect();
            rows.iter().sum::<f64>() / rows.len().max(1) as f64
        };
        log::info!("epoch {epoch}: mean loss {mean:.6}");
        if let Some(dir) = out_dir {
            ck.save(&dir.join("checkpoints").join(format!("epoch_{epoch:03}")))?;
        }
    }
    Ok(TrainOutcome { checkpoint: ck, losses })
}

/// Heart rates of one clip.
#[derive(Debug, Clone, PartialEq)]
pub struct ClipResult {
    pub id: String,
    pub pred_bpm: f64,
    pub gt_bpm: f64,
    pub pred_trace: Vec<f64>,
    pub gt_trace: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub clips: Vec<ClipResult>,
    pub metrics: MetricsReport,
}

/// Rates and metrics from `(id, predicted, ground truth, fs)` traces.
pub fn evaluate_traces(items: Vec<(String, Vec<f64>, Vec<f64>, f64)>) -> Result<EvalReport> {
    let mut clips = Vec::with_capacity(items.len());
    for (id, pred, gt, fs) in items {
        clips.push(ClipResult {
            pred_bpm: estimate_hr(&pred, fs)?.bpm,
            gt_bpm: estimate_hr(&gt, fs)?.bpm,
            id,
            pred_trace: pred,
            gt_trace: gt,
        });
    }
    let pred: Vec<f64> = clips.iter().map(|c| c.pred_bpm).collect();
    let gt: Vec<f64> = clips.iter().map(|c| c.gt_bpm).collect();
    let metrics = compute_metrics(&pred, &gt)?;
    Ok(EvalReport { clips, metrics })
}

fn standardize(v: &mut [f64]) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let sd = (v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n).sqrt();
    for x in v.iter_mut() {
        *x = if sd > 0.0 { (*x - mean) / sd } else { 0.0 };
    }
}

const EVAL_BATCH: usize = 4;

/// Tile every clip into consecutive `model.frames`-step windows, predict with
/// running normalization statistics, standardize each window's output and
/// concatenate, then compare rates against the target over the same span.
pub fn evaluate(model: &ModelConfig, params: &mut ParamStore, clips: &[PreparedClip]) -> Result<EvalReport> {
    let net = PhysMamba::new(model.clone())?;
    let len = model.frames;
    let mut items = Vec::new();
    for clip in clips {
        let n = clip.len() / len;
        if n == 0 {
            log::warn!("clip `{}` is shorter than one {len}-step window; skipped", clip.id);
            continue;
        }
        let windows: Vec<(usize, usize)> = (0..n).map(|i| (0, i * len)).collect();
        let mut pred = Vec::with_capacity(n * len);
        for chunk in windows.chunks(EVAL_BATCH) {
            let (x, _) = assemble(std::slice::from_ref(clip), chunk, len)?;
            let y = net.predict(params, &x, NormMode::Eval)?;
            for row in y.data().chunks(len) {
                let mut row = row.to_vec();
                standardize(&mut row);
                pred.extend(row);
            }
        }
        items.push((clip.id.clone(), pred, clip.target[..n * len].to_vec(), clip.fs));
    }
    if items.is_empty() {
        return Err(Error::InsufficientData(format!("no clip provides a {len}-step window")));
    }
    evaluate_traces(items)
}
