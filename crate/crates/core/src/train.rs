//! Teacher-forced training, inference with predicted-mask feedback, and the
//! end-to-end gradient check on a toy model.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{self, GrayImage, Sequence};
use crate::error::{Error, Result};
use crate::longmem::{self, HiddenState};
use crate::mask::Mask;
use crate::numerics::{
    grad_check, AdamConfig, AdamState, DiffGraph, GradCheckReport, ParamStore, Tensor, Var,
};
use crate::segnet::{self, diff, EncodedFrame, ModelConfig, StepInputs, FEATURE_STRIDE};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    /// Multiplier applied to the learning rate after every epoch.
    pub lr_decay: f64,
    pub weight_decay: f64,
    /// Consecutive frames per training clip.
    pub clip_len: usize,
    pub epochs: usize,
    /// Clips per optimizer step.
    pub batch_videos: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            lr_decay: 0.95,
            weight_decay: 1e-5,
            clip_len: 5,
            epochs: 15,
            batch_videos: 1,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {}",
                self.lr
            )));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay.is_finite()) {
            return Err(Error::Config(format!(
                "lr decay must be positive, got {}",
                self.lr_decay
            )));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config(format!(
                "weight decay must be non-negative, got {}",
                self.weight_decay
            )));
        }
        if self.clip_len < 2 {
            return Err(Error::Config("clip length must be at least 2".into()));
        }
        if self.batch_videos == 0 {
            return Err(Error::Config("batch_videos must be positive".into()));
        }
        Ok(())
    }

    /// Learning rate used during epoch `epoch` (0-based).
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr * self.lr_decay.powi(epoch as i32)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub mean_loss: f64,
}

pub const LOG_HEADER: &str = "epoch,lr,mean_loss";

impl EpochLog {
    /// CSV row; `lr` is printed in shortest round-trip form.
    pub fn csv_row(&self) -> String {
        format!("{},{:e},{}", self.epoch, self.lr, self.mean_loss)
    }
}

fn image_tensor(img: &GrayImage) -> Result<Tensor> {
    segnet::image_tensor(img.width, img.height, &img.pixels)
}

fn feature_mask(mask: &Mask) -> Result<Mask> {
    mask.downsample_majority(FEATURE_STRIDE)
}

fn check_clip(frames: usize, masks: usize) -> Result<()> {
    if frames < 2 || frames != masks {
        return Err(Error::Input(format!(
            "clip of {frames} frames and {masks} masks"
        )));
    }
    Ok(())
}

fn add_loss(g: &mut DiffGraph, total: Option<Var>, loss: Var) -> Result<Var> {
    match total {
        Some(t) => g.add(t, loss),
        None => Ok(loss),
    }
}

/// Query steps over `clip[1..]`; `clip[0]` is frame `first_frame` (1-based)
/// of the sequence and `state` covers the frame before it.
#[allow(clippy::too_many_arguments)]
fn record_queries(
    g: &mut DiffGraph,
    cfg: &ModelConfig,
    pv: &diff::ParamVars,
    reference: (Var, &Mask),
    clip: &[diff::EncodedVars],
    feat_masks: &[Mask],
    gt: &[Mask],
    first_frame: usize,
    mut state: diff::StateVar,
) -> Result<Var> {
    let mut total = None;
    for q in 1..clip.len() {
        let lo = q.saturating_sub(cfg.k);
        let memory: Vec<(Var, &Mask)> = (lo..q)
            .map(|i| (clip[i].features, &feat_masks[i]))
            .collect();
        let out = diff::segment_step(
            g,
            cfg,
            pv,
            &diff::StepVars {
                t: first_frame + q,
                query: &clip[q],
                memory: &memory,
                reference,
                state,
                gt: Some(&gt[q]),
            },
        )?;
        state = out.state;
        total = Some(add_loss(g, total, out.loss.expect("ground truth given"))?);
    }
    Ok(total.expect("at least one query frame"))
}

fn record_encoded(
    g: &mut DiffGraph,
    pv: &diff::ParamVars,
    frames: &[Tensor],
) -> Result<Vec<diff::EncodedVars>> {
    frames
        .iter()
        .map(|f| {
            let v = g.constant(f.clone());
            diff::encode(g, pv, v)
        })
        .collect()
}

/// Records the loss `Σ_t (l_sem + λ·l_sup)` over a clip whose first frame
/// is the reference. Memory and pooling masks are ground truth.
pub fn record_clip_loss(
    g: &mut DiffGraph,
    cfg: &ModelConfig,
    pv: &diff::ParamVars,
    frames: &[Tensor],
    masks: &[Mask],
) -> Result<Var> {
    check_clip(frames.len(), masks.len())?;
    let feat_masks = masks.iter().map(feature_mask).collect::<Result<Vec<_>>>()?;
    let encoded = record_encoded(g, pv, frames)?;
    let x1 = encoded[0].features;
    let h1 = longmem::diff::masked_gap(g, x1, &feat_masks[0], cfg.gap_norm)?;
    let state = diff::StateVar { h: h1, frame: 1 };
    record_queries(
        g,
        cfg,
        pv,
        (x1, &feat_masks[0]),
        &encoded,
        &feat_masks,
        masks,
        1,
        state,
    )
}

/// Clip loss for frames `start..start + len` of a whole sequence, with the
/// sequence's first frame as the reference, as at inference time. The
/// long-term state entering the clip is computed from ground truth with
/// the current `params` and is not differentiated.
#[allow(clippy::too_many_arguments)]
pub fn record_sequence_clip_loss(
    g: &mut DiffGraph,
    cfg: &ModelConfig,
    params: &ParamStore,
    pv: &diff::ParamVars,
    frames: &[Tensor],
    masks: &[Mask],
    start: usize,
    len: usize,
) -> Result<Var> {
    if len < 2 || frames.len() != masks.len() || start + len > frames.len() {
        return Err(Error::Input(format!(
            "clip {start}..{} of a sequence with {} frames and {} masks",
            start + len,
            frames.len(),
            masks.len()
        )));
    }
    if start == 0 {
        return record_clip_loss(g, cfg, pv, &frames[..len], &masks[..len]);
    }
    let m1 = feature_mask(&masks[0])?;
    let mut state = {
        let x1 = segnet::encode(&frames[0], params)?.features;
        longmem::init_state_with(&x1, &m1, cfg.gap_norm)?
    };
    if !cfg.ablation.disable_long {
        let gru = longmem::GruParams {
            w: params
                .get("lt.gru")
                .cloned()
                .ok_or_else(|| Error::CheckpointMismatch("missing parameter lt.gru".into()))?,
        };
        for i in 1..start {
            let x = segnet::encode(&frames[i], params)?.features;
            state =
                longmem::advance_with(&state, &x, &feature_mask(&masks[i])?, &gru, cfg.gap_norm)?;
        }
    }
    let x1 = record_encoded(g, pv, &frames[..1])?[0].features;
    let clip = record_encoded(g, pv, &frames[start..start + len])?;
    let gt = &masks[start..start + len];
    let feat_masks = gt.iter().map(feature_mask).collect::<Result<Vec<_>>>()?;
    let state = diff::StateVar {
        h: g.constant(state.h),
        frame: if cfg.ablation.disable_long { 1 } else { start },
    };
    record_queries(
        g,
        cfg,
        pv,
        (x1, &m1),
        &clip,
        &feat_masks,
        gt,
        start + 1,
        state,
    )
}

/// Records `params` into `g`, with the ablated ones as constants.
pub fn record_params(g: &mut DiffGraph, cfg: &ModelConfig, params: &ParamStore) -> diff::ParamVars {
    let frozen = cfg.frozen_params();
    diff::ParamVars::from_vars(
        params
            .iter()
            .map(|(n, t)| {
                let v = if frozen.contains(&n.as_str()) {
                    g.constant(t.clone())
                } else {
                    g.param(t.clone())
                };
                (n.clone(), v)
            })
            .collect(),
    )
}

pub struct TrainOutcome {
    pub params: ParamStore,
    pub logs: Vec<EpochLog>,
    pub steps: usize,
}

/// Trains from the seeded initialization. `on_epoch` sees each log line as
/// soon as the epoch ends.
pub fn train(
    model: &ModelConfig,
    tc: &TrainConfig,
    seqs: &[Sequence],
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    model.validate()?;
    tc.validate()?;
    if seqs.is_empty() {
        return Err(Error::Input("no training sequences".into()));
    }
    for s in seqs {
        s.validate()?;
        if s.len() < 2 {
            return Err(Error::Input(format!(
                "sequence {} has fewer than 2 frames",
                s.name
            )));
        }
    }

    let mut params = segnet::init_params(model, tc.seed);
    let mut adam = AdamState::new(AdamConfig::default());
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed);
    rng.set_stream(1);
    let images: Vec<Vec<Tensor>> = seqs
        .iter()
        .map(|s| {
            s.frames
                .iter()
                .map(image_tensor)
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;

    let mut logs = Vec::with_capacity(tc.epochs);
    let mut steps = 0;
    for epoch in 0..tc.epochs {
        let lr = tc.lr_at(epoch);
        let mut loss_sum = 0.0;
        let mut pending: BTreeMap<String, Tensor> = BTreeMap::new();
        let mut pending_clips = 0;
        for (si, seq) in seqs.iter().enumerate() {
            let len = tc.clip_len.min(seq.len());
            let start = rng.gen_range(0..=seq.len() - len);
            let mut g = DiffGraph::new();
            let pv = record_params(&mut g, model, &params);
            let loss = record_sequence_clip_loss(
                &mut g,
                model,
                &params,
                &pv,
                &images[si],
                &seq.masks,
                start,
                len,
            )?;
            let value = g.value(loss).data()[0];
            if !value.is_finite() {
                return Err(Error::Numeric(format!(
                    "loss is {value} at epoch {epoch}, sequence {}",
                    seq.name
                )));
            }
            loss_sum += value;
            let grads = g.backward(loss)?;
            for (name, var) in pv.iter() {
                if g.is_param(var) {
                    let gr = grads.wrt(var);
                    match pending.get_mut(name) {
                        Some(acc) => acc.add_assign(&gr),
                        None => {
                            pending.insert(name.to_string(), gr);
                        }
                    }
                }
            }
            pending_clips += 1;
            if pending_clips == tc.batch_videos || si + 1 == seqs.len() {
                adam.step(&mut params, &pending, lr, tc.weight_decay)?;
                steps += 1;
                pending.clear();
                pending_clips = 0;
            }
        }
        let log = EpochLog {
            epoch,
            lr,
            mean_loss: loss_sum / seqs.len() as f64,
        };
        on_epoch(&log);
        logs.push(log);
    }
    Ok(TrainOutcome {
        params,
        logs,
        steps,
    })
}

/// Masks for every frame of one sequence, plus the final hidden state.
#[derive(Clone, Debug, PartialEq)]
pub struct InferOutput {
    pub masks: Vec<Mask>,
    pub state: HiddenState,
}

/// Segments frames `2..` given the first-frame mask. Memory masks are the
/// model's own predictions.
pub fn infer_sequence(
    cfg: &ModelConfig,
    params: &ParamStore,
    frames: &[GrayImage],
    first_mask: &Mask,
) -> Result<InferOutput> {
    cfg.validate()?;
    segnet::check_params(cfg, params)?;
    let Some(first) = frames.first() else {
        return Err(Error::Input("empty sequence".into()));
    };
    if (first.width, first.height) != (first_mask.width(), first_mask.height()) {
        return Err(Error::Input(
            "first-frame mask does not match the frame size".into(),
        ));
    }
    let encoded: Vec<EncodedFrame> = frames
        .iter()
        .map(|f| segnet::encode(&image_tensor(f)?, params))
        .collect::<Result<_>>()?;
    let m1 = feature_mask(first_mask)?;
    let mut state = longmem::init_state_with(&encoded[0].features, &m1, cfg.gap_norm)?;
    let mut masks = vec![first_mask.clone()];
    let mut feat_masks = vec![m1];
    for q in 1..frames.len() {
        let lo = q.saturating_sub(cfg.k);
        let memory: Vec<(&Tensor, &Mask)> = (lo..q)
            .map(|i| (&encoded[i].features, &feat_masks[i]))
            .collect();
        let out = segnet::segment_step(
            cfg,
            params,
            &StepInputs {
                t: q + 1,
                query: &encoded[q],
                memory: &memory,
                reference: (&encoded[0].features, &feat_masks[0]),
                state: &state,
                gt: None,
            },
        )?;
        state = out.state;
        feat_masks.push(feature_mask(&out.mask)?);
        masks.push(out.mask);
    }
    Ok(InferOutput { masks, state })
}

/// Runs inference over every sequence of `data_dir` and writes
/// `out_dir/<seq>/%05d.pgm`. Returns the number of sequences.
pub fn infer_dataset(
    cfg: &ModelConfig,
    params: &ParamStore,
    data_dir: &Path,
    out_dir: &Path,
) -> Result<usize> {
    segnet::check_params(cfg, params)?;
    let dirs = data::sequence_dirs(data_dir)?;
    if dirs.is_empty() {
        return Err(Error::Input(format!(
            "no sequences under {}",
            data_dir.display()
        )));
    }
    let mut results = Vec::with_capacity(dirs.len());
    for dir in &dirs {
        let name = dir.file_name().unwrap().to_string_lossy().to_string();
        let frames = data::load_frames(dir)?;
        let first_path = dir.join("masks").join(data::frame_file_name(1));
        if !first_path.is_file() {
            return Err(Error::MissingFiles(vec![first_path.display().to_string()]));
        }
        let first = data::read_mask(&first_path)?;
        results.push((name, infer_sequence(cfg, params, &frames, &first)?.masks));
    }
    data::build_dir_atomic(out_dir, |root| {
        for (name, masks) in &results {
            let dir = root.join(name);
            std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            for (i, m) in masks.iter().enumerate() {
                data::write_mask(&dir.join(data::frame_file_name(i + 1)), m)?;
            }
        }
        Ok(())
    })?;
    Ok(results.len())
}

/// The toy used by the end-to-end gradient check: `d = 4`, 8x8 images, a
/// reference frame followed by two query frames so the recurrent update is
/// on the path.
///
/// Weights are drawn over twice the usual range. At the usual scale the
/// gate weights get gradients near 1e-7, below what central differences can
/// resolve against a loss of about 100.
pub fn gradcheck_toy(seed: u64) -> (ModelConfig, ParamStore, Vec<Tensor>, Vec<Mask>) {
    let cfg = ModelConfig {
        d: 4,
        ..ModelConfig::default()
    };
    let params = segnet::init_params(&cfg, seed)
        .into_iter()
        .map(|(n, t)| (n, t.map(|v| 2.0 * v)))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(2);
    let frames = (0..3)
        .map(|_| Tensor::from_fn(&[8, 8, 1], |_| rng.gen_range(0.0..1.0)))
        .collect();
    let masks = (0..3)
        .map(|f| {
            Mask::from_fn(8, 8, |r, c| {
                (1 + f..5 + f).contains(&c) && (2..7).contains(&r)
            })
        })
        .collect();
    (cfg, params, frames, masks)
}

/// Central-difference check of every parameter of the toy model through
/// the full clip loss.
pub fn run_gradcheck(seed: u64, eps: f64) -> Result<GradCheckReport> {
    let (cfg, params, frames, masks) = gradcheck_toy(seed);
    let names: Vec<String> = params.keys().cloned().collect();
    let values: Vec<Tensor> = params.values().cloned().collect();
    grad_check(&values, eps, |g, vars| {
        let pv =
            diff::ParamVars::from_vars(names.iter().cloned().zip(vars.iter().copied()).collect());
        record_clip_loss(g, &cfg, &pv, &frames, &masks)
    })
}
