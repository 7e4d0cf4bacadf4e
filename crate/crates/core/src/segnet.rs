//! Segmentation network: a small stride-4 encoder, the target-specific
//! attention map, four-way feature fusion and a skip-connected decoder.
//!
//! ```text
//! image ─ enc.stage1 (3x3/1 → 16) ─ enc.stage2 (3x3/2 → 32) ─ enc.stage3 (3x3/2 → d) ─ X
//!
//! [att ⊕ X_gcf ⊕ M1 ⊕ X1] ─ dec.fuse (1x1 → d)
//!   ─ up2x ⊕ stage2 ─ dec.up1 (3x3 → d) ─ up2x ⊕ stage1 ─ dec.up2 (3x3 → 16)
//!   ─ dec.out (1x1 → 2) ─ softmax
//! ```
//!
//! Every conv except `dec.fuse` and `dec.out` is followed by ReLU. There are
//! no biases. First-frame masks enter at feature resolution via 4x4 block
//! majority.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::longmem::{self, GapNorm, HiddenState};
use crate::mask::Mask;
use crate::numerics::{self, DiffGraph, Padding, ParamStore, Tensor, Var};
use crate::stgraph::{self, GraphConfig, NodeLabels, StGraph, TemporalMode};

/// Spatial reduction from image to feature grid.
pub const FEATURE_STRIDE: usize = 4;
pub const STAGE1_CHANNELS: usize = 16;
pub const STAGE2_CHANNELS: usize = 32;

/// Mechanisms that can be switched off for ablation runs.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Ablation {
    /// Raw query features replace the graph-filtered ones; no node loss.
    pub disable_short: bool,
    /// All-ones attention; the hidden state is never advanced.
    pub disable_long: bool,
    /// Edge weights `σ(x_iᵀ x_j)` with the projections fixed to identity.
    pub unweighted_adjacency: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// Feature channels.
    pub d: usize,
    /// Image channels.
    pub cin: usize,
    /// Short-term memory frames.
    pub k: usize,
    pub ws: usize,
    pub hs: usize,
    pub wt: usize,
    pub ht: usize,
    pub temporal_mode: TemporalMode,
    pub gap_norm: GapNorm,
    /// Weight of the supervised loss.
    pub lambda: f64,
    pub ablation: Ablation,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d: 32,
            cin: 1,
            k: 2,
            ws: 3,
            hs: 3,
            wt: 3,
            ht: 3,
            temporal_mode: TemporalMode::Bidirectional,
            gap_norm: GapNorm::TotalArea,
            lambda: 1.0,
            ablation: Ablation::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.cin == 0 {
            return Err(Error::Config("d and cin must be positive".into()));
        }
        if self.k == 0 {
            return Err(Error::Config("k must be positive".into()));
        }
        if !self.lambda.is_finite() || self.lambda <= 0.0 {
            return Err(Error::Config(format!(
                "lambda must be positive, got {}",
                self.lambda
            )));
        }
        self.graph_config(1, 1, 1).validate()
    }

    /// Graph over `memory_frames` memory frames plus the query frame.
    pub fn graph_config(&self, memory_frames: usize, width: usize, height: usize) -> GraphConfig {
        GraphConfig {
            k: memory_frames,
            width,
            height,
            ws: self.ws,
            hs: self.hs,
            wt: self.wt,
            ht: self.ht,
            temporal_mode: self.temporal_mode,
        }
    }

    /// Every parameter name with its dims, in lexicographic order.
    pub fn param_shapes(&self) -> Vec<(&'static str, Vec<usize>)> {
        let (d, s1, s2) = (self.d, STAGE1_CHANNELS, STAGE2_CHANNELS);
        vec![
            ("dec.fuse", vec![1, 1, 2 * d + 2, d]),
            ("dec.fuse.bias", vec![d]),
            ("dec.out", vec![1, 1, s1, 2]),
            ("dec.out.bias", vec![2]),
            ("dec.up1", vec![3, 3, d + s2, d]),
            ("dec.up1.bias", vec![d]),
            ("dec.up2", vec![3, 3, d + s1, s1]),
            ("dec.up2.bias", vec![s1]),
            ("enc.stage1", vec![3, 3, self.cin, s1]),
            ("enc.stage1.bias", vec![s1]),
            ("enc.stage2", vec![3, 3, s1, s2]),
            ("enc.stage2.bias", vec![s2]),
            ("enc.stage3", vec![3, 3, s2, d]),
            ("enc.stage3.bias", vec![d]),
            ("lt.gru", vec![d, 2 * d]),
            ("st.head", vec![d, 2]),
            ("st.w1", vec![d, d]),
            ("st.w2", vec![d, d]),
        ]
    }

    /// Parameters the active ablations take out of the computation.
    pub fn frozen_params(&self) -> Vec<&'static str> {
        let mut out = Vec::new();
        if self.ablation.disable_long {
            out.push("lt.gru");
        }
        if self.ablation.disable_short {
            out.extend(["st.head", "st.w1", "st.w2"]);
        } else if self.ablation.unweighted_adjacency {
            out.extend(["st.w1", "st.w2"]);
        }
        out
    }
}

fn fans(dims: &[usize]) -> (usize, usize) {
    match *dims {
        [kh, kw, cin, cout] => (kh * kw * cin, kh * kw * cout),
        [rows, cols] => (cols, rows),
        _ => (dims.iter().product(), dims.iter().product()),
    }
}

/// Uniform `[−s, s]` initialization with `s = √(6 / (fan_in + fan_out))`,
/// drawn in lexicographic parameter order from one seeded stream. Conv
/// biases start at zero and take no draws.
pub fn init_params(cfg: &ModelConfig, seed: u64) -> ParamStore {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    cfg.param_shapes()
        .into_iter()
        .map(|(name, dims)| {
            if name.ends_with(".bias") {
                return (name.to_string(), Tensor::zeros(&dims));
            }
            let (fan_in, fan_out) = fans(&dims);
            let s = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let dist = Uniform::new_inclusive(-s, s);
            let t = Tensor::from_fn(&dims, |_| dist.sample(&mut rng));
            (name.to_string(), t)
        })
        .collect()
}

/// Checks that `params` holds exactly the model's names and dims.
pub fn check_params(cfg: &ModelConfig, params: &ParamStore) -> Result<()> {
    let expected = cfg.param_shapes();
    let mut problems = Vec::new();
    for (name, dims) in &expected {
        match params.get(*name) {
            None => problems.push(format!("missing {name}")),
            Some(t) if t.dims() != dims.as_slice() => {
                problems.push(format!("{name} has dims {:?}, expected {dims:?}", t.dims()))
            }
            Some(_) => {}
        }
    }
    for name in params.keys() {
        if !expected.iter().any(|(n, _)| n == name) {
            problems.push(format!("unexpected {name}"));
        }
    }
    if problems.is_empty() {
        Ok(())
    } else {
        Err(Error::CheckpointMismatch(problems.join("; ")))
    }
}

fn param<'a>(params: &'a ParamStore, name: &str) -> Result<&'a Tensor> {
    params
        .get(name)
        .ok_or_else(|| Error::CheckpointMismatch(format!("missing parameter {name}")))
}

/// Conv with kernel `name` followed by bias `name.bias`.
fn conv(
    x: &Tensor,
    params: &ParamStore,
    name: &str,
    stride: usize,
    pad: Padding,
) -> Result<Tensor> {
    let y = numerics::conv2d(x, param(params, name)?, stride, pad)?;
    numerics::add_bias(&y, param(params, &format!("{name}.bias"))?)
}

/// Encoder output: the feature map and the two skip sources.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedFrame {
    pub features: Tensor,
    pub skip1: Tensor,
    pub skip2: Tensor,
}

fn check_image(image: &Tensor) -> Result<()> {
    if image.rank() != 3 {
        return Err(Error::Shape(format!(
            "image {:?} is not [h, w, c]",
            image.dims()
        )));
    }
    let (h, w) = (image.dims()[0], image.dims()[1]);
    if h == 0 || w == 0 || h % FEATURE_STRIDE != 0 || w % FEATURE_STRIDE != 0 {
        return Err(Error::Input(format!(
            "image {w}x{h} is not divisible by {FEATURE_STRIDE}"
        )));
    }
    Ok(())
}

/// Grayscale image scaled to `[-1, 1]`, as `[h, w, 1]`.
pub fn image_tensor(width: usize, height: usize, pixels: &[u8]) -> Result<Tensor> {
    Tensor::new(
        vec![height, width, 1],
        pixels.iter().map(|&p| p as f64 / 127.5 - 1.0).collect(),
    )
}

pub fn encode(image: &Tensor, params: &ParamStore) -> Result<EncodedFrame> {
    check_image(image)?;
    let stage = |x: &Tensor, name: &str, stride| -> Result<Tensor> {
        Ok(numerics::relu(&conv(
            x,
            params,
            name,
            stride,
            Padding::Same,
        )?))
    };
    let skip1 = stage(image, "enc.stage1", 1)?;
    let skip2 = stage(&skip1, "enc.stage2", 2)?;
    let features = stage(&skip2, "enc.stage3", 2)?;
    Ok(EncodedFrame {
        features,
        skip1,
        skip2,
    })
}

/// `M_att(r, c) = X_t(r, c, ·) · h`, as `[h, w, 1]`.
pub fn attention(xt: &Tensor, h: &Tensor) -> Result<Tensor> {
    if xt.rank() != 3 || xt.dims()[2] != h.len() {
        return Err(Error::Shape(format!(
            "attention of {:?} with a {}-vector",
            xt.dims(),
            h.len()
        )));
    }
    let [rows, cols, d] = [xt.dims()[0], xt.dims()[1], xt.dims()[2]];
    let flat = xt.clone().reshape(&[rows * cols, d])?;
    numerics::matmul(&flat, &h.clone().reshape(&[d, 1])?)?.reshape(&[rows, cols, 1])
}

fn check_fuse_inputs(dims: [&[usize]; 4]) -> Result<()> {
    let [att, xgcf, m1, x1] = dims;
    let spatial = |d: &[usize]| d.len() == 3 && d[..2] == xgcf[..2];
    if xgcf.len() != 3 || !spatial(att) || !spatial(m1) || !spatial(x1) || att[2] != 1 || m1[2] != 1
    {
        return Err(Error::Shape(format!(
            "fuse inputs att {att:?}, X_gcf {xgcf:?}, M1 {m1:?}, X1 {x1:?}"
        )));
    }
    Ok(())
}

/// Concatenation `att ⊕ X_gcf ⊕ M1 ⊕ X1`, before the fusion conv.
pub fn fuse_concat(xgcf: &Tensor, att: &Tensor, x1: &Tensor, m1: &Mask) -> Result<Tensor> {
    let m1 = m1.to_tensor();
    check_fuse_inputs([att.dims(), xgcf.dims(), m1.dims(), x1.dims()])?;
    numerics::concat_channels(&[att, xgcf, &m1, x1])
}

pub fn fuse(
    xgcf: &Tensor,
    att: &Tensor,
    x1: &Tensor,
    m1: &Mask,
    params: &ParamStore,
) -> Result<Tensor> {
    let cat = fuse_concat(xgcf, att, x1, m1)?;
    conv(&cat, params, "dec.fuse", 1, Padding::Valid)
}

fn check_skips(fused: &[usize], skip1: &[usize], skip2: &[usize]) -> Result<()> {
    let ok = fused.len() == 3
        && skip2.len() == 3
        && skip1.len() == 3
        && skip2[0] == 2 * fused[0]
        && skip2[1] == 2 * fused[1]
        && skip1[0] == 4 * fused[0]
        && skip1[1] == 4 * fused[1];
    if !ok {
        return Err(Error::Shape(format!(
            "decoder input {fused:?} with skips {skip1:?} and {skip2:?}"
        )));
    }
    Ok(())
}

/// Per-pixel class probabilities `[h0, w0, 2]` (background, object).
pub fn decode(
    fused: &Tensor,
    skip1: &Tensor,
    skip2: &Tensor,
    params: &ParamStore,
) -> Result<Tensor> {
    check_skips(fused.dims(), skip1.dims(), skip2.dims())?;
    let up = |x: &Tensor, skip: &Tensor, name: &str| -> Result<Tensor> {
        let cat = numerics::concat_channels(&[&numerics::upsample2x(x)?, skip])?;
        Ok(numerics::relu(&conv(&cat, params, name, 1, Padding::Same)?))
    };
    let y = up(fused, skip2, "dec.up1")?;
    let y = up(&y, skip1, "dec.up2")?;
    let logits = conv(&y, params, "dec.out", 1, Padding::Valid)?;
    let [h, w, _] = [logits.dims()[0], logits.dims()[1], 2];
    numerics::softmax(&logits.reshape(&[h * w, 2])?).reshape(&[h, w, 2])
}

fn flat_probs(pred: &Tensor, gt: &Mask) -> Result<Tensor> {
    if pred.dims() != [gt.height(), gt.width(), 2] {
        return Err(Error::Shape(format!(
            "prediction {:?} against {}x{} mask",
            pred.dims(),
            gt.width(),
            gt.height()
        )));
    }
    pred.clone().reshape(&[gt.width() * gt.height(), 2])
}

/// Pixel-wise cross-entropy summed over every pixel.
pub fn loss_sup(pred: &Tensor, gt: &Mask) -> Result<f64> {
    let flat = flat_probs(pred, gt)?;
    numerics::cross_entropy(&flat, &gt.labels(), &vec![true; gt.bits().len()])
}

/// `l_sem + λ·l_sup`.
pub fn total_loss(l_sem: f64, l_sup: f64, lambda: f64) -> Result<f64> {
    if lambda.is_nan() || lambda <= 0.0 {
        return Err(Error::Config(format!(
            "lambda must be positive, got {lambda}"
        )));
    }
    Ok(l_sem + lambda * l_sup)
}

/// Object where `p(object) > p(background)`; ties go to background.
pub fn predicted_mask(probs: &Tensor) -> Mask {
    let (h, w) = (probs.dims()[0], probs.dims()[1]);
    let p = probs.data();
    Mask::from_fn(w, h, |r, c| {
        let i = (r * w + c) * 2;
        p[i + 1] > p[i]
    })
}

/// Inputs of one query step, with all features precomputed.
#[derive(Clone, Copy, Debug)]
pub struct StepInputs<'a> {
    /// 1-based index of the query frame.
    pub t: usize,
    pub query: &'a EncodedFrame,
    /// Feature maps and feature-resolution masks of frames
    /// `t − k'..t − 1`, oldest first.
    pub memory: &'a [(&'a Tensor, &'a Mask)],
    /// First-frame features and feature-resolution mask.
    pub reference: (&'a Tensor, &'a Mask),
    /// State summarizing frames up to `t − 1` or `t − 2`.
    pub state: &'a HiddenState,
    /// Full-resolution ground truth, if the supervised loss is wanted.
    pub gt: Option<&'a Mask>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepResult {
    /// `[h0, w0, 2]` class probabilities.
    pub probs: Tensor,
    pub mask: Mask,
    pub l_sem: f64,
    pub l_sup: Option<f64>,
    pub loss: Option<f64>,
    pub state: HiddenState,
}

/// One forward step of the full pipeline.
pub fn segment_step(
    cfg: &ModelConfig,
    params: &ParamStore,
    inputs: &StepInputs,
) -> Result<StepResult> {
    let mut g = DiffGraph::new();
    let pv = diff::ParamVars::constants(&mut g, params);
    let query = diff::EncodedVars {
        features: g.constant(inputs.query.features.clone()),
        skip1: g.constant(inputs.query.skip1.clone()),
        skip2: g.constant(inputs.query.skip2.clone()),
    };
    let memory: Vec<(Var, &Mask)> = inputs
        .memory
        .iter()
        .map(|(x, m)| (g.constant((*x).clone()), *m))
        .collect();
    let reference = (g.constant(inputs.reference.0.clone()), inputs.reference.1);
    let state = diff::StateVar {
        h: g.constant(inputs.state.h.clone()),
        frame: inputs.state.frame,
    };
    let out = diff::segment_step(
        &mut g,
        cfg,
        &pv,
        &diff::StepVars {
            t: inputs.t,
            query: &query,
            memory: &memory,
            reference,
            state,
            gt: inputs.gt,
        },
    )?;
    let probs = g.value(out.probs).clone();
    let scalar = |v: Option<Var>| v.map(|v| g.value(v).data()[0]);
    Ok(StepResult {
        mask: predicted_mask(&probs),
        probs,
        l_sem: scalar(out.l_sem).unwrap_or(0.0),
        l_sup: scalar(out.l_sup),
        loss: scalar(out.loss),
        state: HiddenState {
            h: g.value(out.state.h).clone(),
            frame: out.state.frame,
        },
    })
}

/// Recorded pipeline, used for training and gradient checks.
pub mod diff {
    use super::*;

    /// Parameter name to graph variable.
    #[derive(Clone, Debug, Default)]
    pub struct ParamVars(BTreeMap<String, Var>);

    impl ParamVars {
        /// Records every parameter as trainable.
        pub fn record(g: &mut DiffGraph, params: &ParamStore) -> Self {
            Self(
                params
                    .iter()
                    .map(|(n, t)| (n.clone(), g.param(t.clone())))
                    .collect(),
            )
        }

        pub fn constants(g: &mut DiffGraph, params: &ParamStore) -> Self {
            Self(
                params
                    .iter()
                    .map(|(n, t)| (n.clone(), g.constant(t.clone())))
                    .collect(),
            )
        }

        pub fn from_vars(vars: BTreeMap<String, Var>) -> Self {
            Self(vars)
        }

        pub fn get(&self, name: &str) -> Result<Var> {
            self.0
                .get(name)
                .copied()
                .ok_or_else(|| Error::CheckpointMismatch(format!("missing parameter {name}")))
        }

        pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
            self.0.iter().map(|(n, v)| (n.as_str(), *v))
        }
    }

    #[derive(Clone, Copy, Debug)]
    pub struct EncodedVars {
        pub features: Var,
        pub skip1: Var,
        pub skip2: Var,
    }

    #[derive(Clone, Copy, Debug)]
    pub struct StateVar {
        pub h: Var,
        pub frame: usize,
    }

    fn conv(
        g: &mut DiffGraph,
        pv: &ParamVars,
        x: Var,
        name: &str,
        stride: usize,
        pad: Padding,
    ) -> Result<Var> {
        let y = g.conv2d(x, pv.get(name)?, stride, pad)?;
        g.add_bias(y, pv.get(&format!("{name}.bias"))?)
    }

    pub fn encode(g: &mut DiffGraph, pv: &ParamVars, image: Var) -> Result<EncodedVars> {
        check_image(g.value(image))?;
        let mut stage = |x: Var, name: &str, stride: usize| -> Result<Var> {
            let y = conv(g, pv, x, name, stride, Padding::Same)?;
            g.relu(y)
        };
        let skip1 = stage(image, "enc.stage1", 1)?;
        let skip2 = stage(skip1, "enc.stage2", 2)?;
        let features = stage(skip2, "enc.stage3", 2)?;
        Ok(EncodedVars {
            features,
            skip1,
            skip2,
        })
    }

    pub fn attention(g: &mut DiffGraph, xt: Var, h: Var) -> Result<Var> {
        let dims = g.value(xt).dims().to_vec();
        let d = g.value(h).len();
        if dims.len() != 3 || dims[2] != d {
            return Err(Error::Shape(format!(
                "attention of {dims:?} with a {d}-vector"
            )));
        }
        let flat = g.reshape(xt, &[dims[0] * dims[1], d])?;
        let col = g.reshape(h, &[d, 1])?;
        let att = g.matmul(flat, col)?;
        g.reshape(att, &[dims[0], dims[1], 1])
    }

    pub fn fuse(
        g: &mut DiffGraph,
        pv: &ParamVars,
        xgcf: Var,
        att: Var,
        x1: Var,
        m1: &Mask,
    ) -> Result<Var> {
        let m1 = g.constant(m1.to_tensor());
        check_fuse_inputs([
            g.value(att).dims(),
            g.value(xgcf).dims(),
            g.value(m1).dims(),
            g.value(x1).dims(),
        ])?;
        let cat = g.concat_channels(&[att, xgcf, m1, x1])?;
        conv(g, pv, cat, "dec.fuse", 1, Padding::Valid)
    }

    pub fn decode(
        g: &mut DiffGraph,
        pv: &ParamVars,
        fused: Var,
        skip1: Var,
        skip2: Var,
    ) -> Result<Var> {
        check_skips(
            g.value(fused).dims(),
            g.value(skip1).dims(),
            g.value(skip2).dims(),
        )?;
        let mut up = |x: Var, skip: Var, name: &str| -> Result<Var> {
            let u = g.upsample2x(x)?;
            let cat = g.concat_channels(&[u, skip])?;
            let y = conv(g, pv, cat, name, 1, Padding::Same)?;
            g.relu(y)
        };
        let y = up(fused, skip2, "dec.up1")?;
        let y = up(y, skip1, "dec.up2")?;
        let logits = conv(g, pv, y, "dec.out", 1, Padding::Valid)?;
        let (h, w) = (g.value(logits).dims()[0], g.value(logits).dims()[1]);
        let flat = g.reshape(logits, &[h * w, 2])?;
        let probs = g.softmax(flat)?;
        g.reshape(probs, &[h, w, 2])
    }

    pub fn loss_sup(g: &mut DiffGraph, probs: Var, gt: &Mask) -> Result<Var> {
        flat_probs(g.value(probs), gt)?;
        let flat = g.reshape(probs, &[gt.width() * gt.height(), 2])?;
        g.cross_entropy(flat, gt.labels(), vec![true; gt.bits().len()])
    }

    /// Recorded step inputs; see [`StepInputs`](super::StepInputs).
    #[derive(Clone, Copy, Debug)]
    pub struct StepVars<'a> {
        pub t: usize,
        pub query: &'a EncodedVars,
        pub memory: &'a [(Var, &'a Mask)],
        pub reference: (Var, &'a Mask),
        pub state: StateVar,
        pub gt: Option<&'a Mask>,
    }

    #[derive(Clone, Copy, Debug)]
    pub struct StepOutput {
        pub probs: Var,
        /// Absent when the short-term memory is disabled.
        pub l_sem: Option<Var>,
        pub l_sup: Option<Var>,
        /// `l_sem + λ·l_sup`, when ground truth was given.
        pub loss: Option<Var>,
        pub state: StateVar,
    }

    fn short_term(
        g: &mut DiffGraph,
        cfg: &ModelConfig,
        pv: &ParamVars,
        step: &StepVars,
    ) -> Result<(Var, Option<Var>)> {
        let xt = step.query.features;
        if cfg.ablation.disable_short {
            return Ok((xt, None));
        }
        let dims = g.value(xt).dims().to_vec();
        let gcfg = cfg.graph_config(step.memory.len(), dims[1], dims[0]);
        let graph: Arc<StGraph> = Arc::new(stgraph::build_graph(&gcfg)?);

        let mut frames: Vec<Var> = step.memory.iter().map(|(x, _)| *x).collect();
        frames.push(xt);
        let x = stgraph::diff::rasterize(g, &frames)?;
        let weights = if cfg.ablation.unweighted_adjacency {
            stgraph::diff::unweighted_edge_weights(g, &graph, x)?
        } else {
            let (w1, w2) = (pv.get("st.w1")?, pv.get("st.w2")?);
            stgraph::diff::edge_weights(g, &graph, x, w1, w2)?
        };
        let packed = stgraph::diff::normalize(g, &graph, weights)?;
        let xgcf = stgraph::diff::gcf(g, &graph, packed, x)?;

        let masks: Vec<&Mask> = step.memory.iter().map(|(_, m)| *m).collect();
        let labels = NodeLabels::from_memory_masks(&gcfg, &masks)?;
        let probs = stgraph::diff::classify(g, xgcf, pv.get("st.head")?)?;
        let l_sem = stgraph::diff::loss_sem(g, probs, &labels)?;
        Ok((stgraph::diff::query_features(g, xgcf, &gcfg)?, Some(l_sem)))
    }

    fn long_term(
        g: &mut DiffGraph,
        cfg: &ModelConfig,
        pv: &ParamVars,
        step: &StepVars,
    ) -> Result<(Var, StateVar)> {
        let xt = step.query.features;
        if cfg.ablation.disable_long {
            let dims = g.value(xt).dims().to_vec();
            let ones = g.constant(Tensor::ones(&[dims[0], dims[1], 1]));
            return Ok((ones, step.state));
        }
        let state = match step.t.checked_sub(step.state.frame) {
            Some(1) => step.state,
            Some(2) => {
                let (x_prev, m_prev) = step
                    .memory
                    .last()
                    .ok_or_else(|| Error::Input("advancing the state needs frame t - 1".into()))?;
                let h = longmem::diff::advance(
                    g,
                    step.state.h,
                    *x_prev,
                    m_prev,
                    pv.get("lt.gru")?,
                    cfg.gap_norm,
                )?;
                StateVar {
                    h,
                    frame: step.state.frame + 1,
                }
            }
            _ => {
                return Err(Error::Input(format!(
                    "state covers frame {} but the query is frame {}",
                    step.state.frame, step.t
                )))
            }
        };
        Ok((attention(g, xt, state.h)?, state))
    }

    /// encode (cached by the caller) → short-term graph → state advance →
    /// attention → fuse → decode → losses.
    pub fn segment_step(
        g: &mut DiffGraph,
        cfg: &ModelConfig,
        pv: &ParamVars,
        step: &StepVars,
    ) -> Result<StepOutput> {
        if step.t < 2
            || step.memory.is_empty()
            || step.memory.len() > cfg.k
            || step.memory.len() >= step.t
        {
            return Err(Error::Input(format!(
                "query frame {} with {} memory frames (k = {})",
                step.t,
                step.memory.len(),
                cfg.k
            )));
        }
        let (xgcf, l_sem) = short_term(g, cfg, pv, step)?;
        let (att, state) = long_term(g, cfg, pv, step)?;
        let fused = fuse(g, pv, xgcf, att, step.reference.0, step.reference.1)?;
        let probs = decode(g, pv, fused, step.query.skip1, step.query.skip2)?;

        let (l_sup, loss) = match step.gt {
            Some(gt) => {
                let l_sup = loss_sup(g, probs, gt)?;
                let weighted = g.scale(l_sup, cfg.lambda)?;
                let loss = match l_sem {
                    Some(l) => g.add(l, weighted)?,
                    None => weighted,
                };
                (Some(l_sup), Some(loss))
            }
            None => (None, None),
        };
        Ok(StepOutput {
            probs,
            l_sem,
            l_sup,
            loss,
            state,
        })
    }
}
