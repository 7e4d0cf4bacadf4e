//! Long-term memory: a single-gate recurrent state over pooled object
//! features.
//!
//! Each frame's features are masked to the object and globally average
//! pooled to a `d`-vector `x`. The state is then blended toward it:
//!
//! ```text
//! z = σ(W·[x; h])
//! h ← (1 − z)⊙h + z⊙x
//! ```
//!
//! The gate has no bias. Because `z ∈ (0, 1)` the new state is a
//! componentwise convex combination of the old state and the input, so the
//! state never leaves the hull of what it has seen.

use crate::error::{Error, Result};
use crate::mask::Mask;
use crate::numerics::{self, DiffGraph, Op, Tensor, Var};

/// Denominator of the masked pooling.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum GapNorm {
    /// Divide by the full map area `w·h`.
    #[default]
    TotalArea,
    /// Divide by the number of mask pixels; an empty mask pools to zero.
    MaskArea,
}

/// The recurrent state after folding in frames up to `frame` (1-based).
#[derive(Clone, Debug, PartialEq)]
pub struct HiddenState {
    pub h: Tensor,
    pub frame: usize,
}

impl HiddenState {
    pub fn dim(&self) -> usize {
        self.h.len()
    }
}

/// Update-gate weights, `d x 2d`, applied to `[x; h]`.
#[derive(Clone, Debug, PartialEq)]
pub struct GruParams {
    pub w: Tensor,
}

fn check_gap_inputs(x: &Tensor, m: &Mask) -> Result<()> {
    if x.rank() != 3 || x.dims()[0] != m.height() || x.dims()[1] != m.width() {
        return Err(Error::Shape(format!(
            "feature map {:?} against {}x{} mask",
            x.dims(),
            m.width(),
            m.height()
        )));
    }
    Ok(())
}

fn gap_denominator(m: &Mask, norm: GapNorm) -> f64 {
    match norm {
        GapNorm::TotalArea => (m.width() * m.height()) as f64,
        GapNorm::MaskArea => m.count() as f64,
    }
}

fn gap_kernel(x: &Tensor, m: &Mask, norm: GapNorm) -> Tensor {
    let d = x.dims()[2];
    let mut acc = vec![0.0; d];
    for (px, &on) in m.bits().iter().enumerate() {
        if on {
            for (a, &v) in acc.iter_mut().zip(&x.data()[px * d..(px + 1) * d]) {
                *a += v;
            }
        }
    }
    let denom = gap_denominator(m, norm);
    if denom > 0.0 {
        for a in &mut acc {
            *a /= denom;
        }
    }
    Tensor::vector(acc)
}

/// Global average pooling of `X ⊗ M` over the full map area.
pub fn masked_gap(x: &Tensor, m: &Mask) -> Result<Tensor> {
    masked_gap_with(x, m, GapNorm::TotalArea)
}

pub fn masked_gap_with(x: &Tensor, m: &Mask, norm: GapNorm) -> Result<Tensor> {
    check_gap_inputs(x, m)?;
    Ok(gap_kernel(x, m, norm))
}

fn check_gru(x: &Tensor, h: &Tensor, params: &GruParams) -> Result<()> {
    let d = h.len();
    if x.len() != d || params.w.dims() != [d, 2 * d] {
        return Err(Error::Shape(format!(
            "S-GRU input {:?}, state {:?}, gate weights {:?}",
            x.dims(),
            h.dims(),
            params.w.dims()
        )));
    }
    Ok(())
}

fn blend_kernel(h: &[f64], x: &[f64], z: &[f64]) -> Vec<f64> {
    h.iter()
        .zip(x)
        .zip(z)
        .map(|((&h, &x), &z)| (h + z * (x - h)).clamp(h.min(x), h.max(x)))
        .collect()
}

fn gate_input(x: &Tensor, h: &Tensor) -> Tensor {
    let mut xh = x.data().to_vec();
    xh.extend_from_slice(h.data());
    Tensor::new(vec![xh.len(), 1], xh).expect("gate input dims")
}

/// The update gate `z = σ(W·[x; h])`.
pub fn update_gate(x: &Tensor, h: &Tensor, params: &GruParams) -> Result<Tensor> {
    check_gru(x, h, params)?;
    let pre = numerics::matmul(&params.w, &gate_input(x, h))?;
    numerics::sigmoid(&pre).reshape(&[h.len()])
}

/// One recurrence step `h_new = (1 − z)⊙h_prev + z⊙x`.
pub fn sgru_step(x: &Tensor, h_prev: &Tensor, params: &GruParams) -> Result<Tensor> {
    let z = update_gate(x, h_prev, params)?;
    Ok(Tensor::vector(blend_kernel(
        h_prev.data(),
        x.data(),
        z.data(),
    )))
}

/// `h_1`: the pooled first-frame object features.
pub fn init_state(x1: &Tensor, m1: &Mask) -> Result<HiddenState> {
    init_state_with(x1, m1, GapNorm::TotalArea)
}

pub fn init_state_with(x1: &Tensor, m1: &Mask, norm: GapNorm) -> Result<HiddenState> {
    Ok(HiddenState {
        h: masked_gap_with(x1, m1, norm)?,
        frame: 1,
    })
}

/// Folds frame `state.frame + 1` into the state.
pub fn advance(
    state: &HiddenState,
    x_prev: &Tensor,
    m_prev: &Mask,
    params: &GruParams,
) -> Result<HiddenState> {
    advance_with(state, x_prev, m_prev, params, GapNorm::TotalArea)
}

pub fn advance_with(
    state: &HiddenState,
    x_prev: &Tensor,
    m_prev: &Mask,
    params: &GruParams,
    norm: GapNorm,
) -> Result<HiddenState> {
    let x = masked_gap_with(x_prev, m_prev, norm)?;
    Ok(HiddenState {
        h: sgru_step(&x, &state.h, params)?,
        frame: state.frame + 1,
    })
}

// ---------------------------------------------------------------------------
// recorded ops

struct MaskedGap {
    mask: Mask,
    norm: GapNorm,
}

impl Op for MaskedGap {
    fn name(&self) -> &'static str {
        "masked_gap"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        masked_gap_with(inputs[0], &self.mask, self.norm)
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let x = inputs[0];
        let d = x.dims()[2];
        let denom = gap_denominator(&self.mask, self.norm);
        let mut dx = Tensor::zeros(x.dims());
        if denom > 0.0 {
            let scaled: Vec<f64> = grad.data().iter().map(|g| g / denom).collect();
            let out = dx.data_mut();
            for (px, &on) in self.mask.bits().iter().enumerate() {
                if on {
                    out[px * d..(px + 1) * d].copy_from_slice(&scaled);
                }
            }
        }
        vec![Some(dx)]
    }
}

/// `h + z⊙(x − h)`, kept inside `[min(h, x), max(h, x)]`. Inputs `(h, x, z)`.
struct ConvexBlend;

impl Op for ConvexBlend {
    fn name(&self) -> &'static str {
        "convex_blend"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        let (h, x, z) = (inputs[0], inputs[1], inputs[2]);
        if !h.same_dims(x) || !h.same_dims(z) {
            return Err(Error::Shape(format!(
                "blend of {:?}, {:?} with gate {:?}",
                h.dims(),
                x.dims(),
                z.dims()
            )));
        }
        Tensor::new(
            h.dims().to_vec(),
            blend_kernel(h.data(), x.data(), z.data()),
        )
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let (h, x, z) = (inputs[0], inputs[1], inputs[2]);
        let g = grad.data();
        let zd = z.data();
        let dh = g.iter().zip(zd).map(|(g, z)| g * (1.0 - z)).collect();
        let dx = g.iter().zip(zd).map(|(g, z)| g * z).collect();
        let dz = g
            .iter()
            .zip(x.data().iter().zip(h.data()))
            .map(|(g, (x, h))| g * (x - h))
            .collect();
        let dims = h.dims().to_vec();
        vec![
            Some(Tensor::new(dims.clone(), dh).unwrap()),
            Some(Tensor::new(dims.clone(), dx).unwrap()),
            Some(Tensor::new(dims, dz).unwrap()),
        ]
    }
}

/// Recorded counterparts of the pure functions above. Vectors are `[d]`.
pub mod diff {
    use super::*;

    pub fn masked_gap(g: &mut DiffGraph, x: Var, mask: &Mask, norm: GapNorm) -> Result<Var> {
        check_gap_inputs(g.value(x), mask)?;
        g.apply(
            MaskedGap {
                mask: mask.clone(),
                norm,
            },
            &[x],
        )
    }

    pub fn sgru_step(g: &mut DiffGraph, x: Var, h_prev: Var, w: Var) -> Result<Var> {
        let d = g.value(h_prev).len();
        if g.value(x).len() != d || g.value(w).dims() != [d, 2 * d] {
            return Err(Error::Shape(format!(
                "S-GRU input {:?}, state {:?}, gate weights {:?}",
                g.value(x).dims(),
                g.value(h_prev).dims(),
                g.value(w).dims()
            )));
        }
        let xc = g.reshape(x, &[d, 1])?;
        let hc = g.reshape(h_prev, &[d, 1])?;
        let xh = g.concat_rows(&[xc, hc])?;
        let pre = g.matmul(w, xh)?;
        let z = g.sigmoid(pre)?;
        let z = g.reshape(z, &[d])?;
        g.apply(ConvexBlend, &[h_prev, x, z])
    }

    pub fn advance(
        g: &mut DiffGraph,
        h: Var,
        x_prev: Var,
        m_prev: &Mask,
        w: Var,
        norm: GapNorm,
    ) -> Result<Var> {
        let x = masked_gap(g, x_prev, m_prev, norm)?;
        sgru_step(g, x, h, w)
    }
}
