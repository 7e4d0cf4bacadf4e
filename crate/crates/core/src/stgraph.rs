//! Short-term memory: a spatial-temporal graph over the `k` memory frames
//! and the query frame.
//!
//! Nodes are feature-grid sites, numbered frame-major: node
//! `f·w·h + r·w + c` is site `(r, c)` of frame `f`, where frame `k` is the
//! query frame. Each node links to the other sites of a `ws x hs` window in
//! its own frame and to a `wt x ht` window in the next frame (and, in
//! bidirectional mode, the previous frame). Windows are clipped at the grid
//! border. Edges are stored in CSR form with strictly increasing columns per
//! row; self-loops are never stored and enter only through `A + I`.
//!
//! Edge weights are `σ((W1 x_i)ᵀ (W2 x_j))`. Features are filtered by
//! `D̃^{-1/2} (A + I) D̃^{-1/2} X` with `D̃(i,i) = 1 + Σ_j A(i,j)`.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::mask::Mask;
use crate::numerics::{self, DiffGraph, Op, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TemporalMode {
    /// Temporal edges point to the next frame only.
    DirectedNext,
    /// Temporal edges point to both the next and the previous frame.
    Bidirectional,
}

impl TemporalMode {
    pub fn as_str(self) -> &'static str {
        match self {
            TemporalMode::DirectedNext => "directed-next",
            TemporalMode::Bidirectional => "bidirectional",
        }
    }
}

impl std::str::FromStr for TemporalMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "directed-next" => Ok(TemporalMode::DirectedNext),
            "bidirectional" => Ok(TemporalMode::Bidirectional),
            other => Err(Error::Config(format!("unknown temporal mode {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GraphConfig {
    /// Memory frames preceding the query frame.
    pub k: usize,
    pub width: usize,
    pub height: usize,
    /// Spatial window, columns x rows.
    pub ws: usize,
    pub hs: usize,
    /// Temporal window, columns x rows.
    pub wt: usize,
    pub ht: usize,
    pub temporal_mode: TemporalMode,
}

impl GraphConfig {
    pub fn new(k: usize, width: usize, height: usize) -> Self {
        Self {
            k,
            width,
            height,
            ws: 3,
            hs: 3,
            wt: 3,
            ht: 3,
            temporal_mode: TemporalMode::Bidirectional,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::Config("graph grid must be non-empty".into()));
        }
        for (name, v) in [
            ("ws", self.ws),
            ("hs", self.hs),
            ("wt", self.wt),
            ("ht", self.ht),
        ] {
            if v == 0 || v % 2 == 0 {
                return Err(Error::Config(format!(
                    "{name} must be an odd positive integer, got {v}"
                )));
            }
        }
        Ok(())
    }

    pub fn frames(&self) -> usize {
        self.k + 1
    }

    pub fn nodes_per_frame(&self) -> usize {
        self.width * self.height
    }

    pub fn node_count(&self) -> usize {
        self.frames() * self.nodes_per_frame()
    }

    /// Upper bound on the stored edge count.
    pub fn edge_bound(&self) -> usize {
        let temporal = match self.temporal_mode {
            TemporalMode::DirectedNext => self.wt * self.ht,
            TemporalMode::Bidirectional => 2 * self.wt * self.ht,
        };
        self.node_count() * (self.ws * self.hs + temporal)
    }
}

/// Spatial-temporal graph with CSR edge storage.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StGraph {
    cfg: GraphConfig,
    row_offsets: Vec<usize>,
    cols: Vec<usize>,
}

/// Builds the windowed graph for `cfg`.
pub fn build_graph(cfg: &GraphConfig) -> Result<StGraph> {
    cfg.validate()?;
    let (w, h) = (cfg.width, cfg.height);
    let n = cfg.node_count();
    let mut row_offsets = Vec::with_capacity(n + 1);
    let mut cols = Vec::with_capacity(cfg.edge_bound().min(n * 64));
    row_offsets.push(0);

    // sites of a window centred at (r, c), row-major, clipped
    let window = |r: usize, c: usize, ww: usize, wh: usize| {
        let r0 = r.saturating_sub(wh / 2);
        let r1 = (r + wh / 2).min(h - 1);
        let c0 = c.saturating_sub(ww / 2);
        let c1 = (c + ww / 2).min(w - 1);
        (r0..=r1).flat_map(move |rr| (c0..=c1).map(move |cc| rr * w + cc))
    };

    for f in 0..cfg.frames() {
        for r in 0..h {
            for c in 0..w {
                let me = f * w * h + r * w + c;
                if cfg.temporal_mode == TemporalMode::Bidirectional && f > 0 {
                    let base = (f - 1) * w * h;
                    cols.extend(window(r, c, cfg.wt, cfg.ht).map(|s| base + s));
                }
                let base = f * w * h;
                cols.extend(
                    window(r, c, cfg.ws, cfg.hs)
                        .map(|s| base + s)
                        .filter(|&j| j != me),
                );
                if f + 1 < cfg.frames() {
                    let base = (f + 1) * w * h;
                    cols.extend(window(r, c, cfg.wt, cfg.ht).map(|s| base + s));
                }
                row_offsets.push(cols.len());
            }
        }
    }
    Ok(StGraph {
        cfg: *cfg,
        row_offsets,
        cols,
    })
}

impl StGraph {
    pub fn config(&self) -> &GraphConfig {
        &self.cfg
    }

    pub fn node_count(&self) -> usize {
        self.row_offsets.len() - 1
    }

    pub fn edge_count(&self) -> usize {
        self.cols.len()
    }

    pub fn row_offsets(&self) -> &[usize] {
        &self.row_offsets
    }

    pub fn col_indices(&self) -> &[usize] {
        &self.cols
    }

    /// Neighbour columns of node `i`, in storage order.
    pub fn row(&self, i: usize) -> &[usize] {
        &self.cols[self.row_offsets[i]..self.row_offsets[i + 1]]
    }

    pub fn edge_range(&self, i: usize) -> std::ops::Range<usize> {
        self.row_offsets[i]..self.row_offsets[i + 1]
    }

    /// Stored edges `(i, j)` in storage order.
    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (0..self.node_count()).flat_map(move |i| self.row(i).iter().map(move |&j| (i, j)))
    }

    pub fn node_index(&self, frame: usize, row: usize, col: usize) -> usize {
        frame * self.cfg.nodes_per_frame() + row * self.cfg.width + col
    }

    /// `(frame, row, col)` of node `i`.
    pub fn node_position(&self, i: usize) -> (usize, usize, usize) {
        let per = self.cfg.nodes_per_frame();
        let site = i % per;
        (i / per, site / self.cfg.width, site % self.cfg.width)
    }
}

/// Learnable projections of the edge-weight similarity, both `r x d`.
#[derive(Clone, Debug, PartialEq)]
pub struct AdjacencyParams {
    pub w1: Tensor,
    pub w2: Tensor,
}

fn check_node_features(graph: &StGraph, x: &Tensor) -> Result<()> {
    if x.rank() != 2 || x.dims()[0] != graph.node_count() {
        return Err(Error::Shape(format!(
            "node features {:?} do not match {} nodes",
            x.dims(),
            graph.node_count()
        )));
    }
    Ok(())
}

fn edge_dots(graph: &StGraph, u: &Tensor, v: &Tensor) -> Result<Tensor> {
    if u.rank() != 2 || !u.same_dims(v) || u.dims()[0] != graph.node_count() {
        return Err(Error::Shape(format!(
            "edge projections {:?} and {:?} for {} nodes",
            u.dims(),
            v.dims(),
            graph.node_count()
        )));
    }
    let r = u.dims()[1];
    let (ud, vd) = (u.data(), v.data());
    let dots = graph
        .edges()
        .map(|(i, j)| {
            let (ui, vj) = (&ud[i * r..(i + 1) * r], &vd[j * r..(j + 1) * r]);
            ui.iter().zip(vj).map(|(a, b)| a * b).sum()
        })
        .collect();
    Ok(Tensor::vector(dots))
}

/// `A(i, j) = σ((W1 x_i)ᵀ (W2 x_j))` for every stored edge, in storage order.
pub fn edge_weights(graph: &StGraph, x: &Tensor, params: &AdjacencyParams) -> Result<Vec<f64>> {
    check_node_features(graph, x)?;
    let d = x.dims()[1];
    for w in [&params.w1, &params.w2] {
        if w.rank() != 2 || w.dims()[1] != d || !w.same_dims(&params.w1) {
            return Err(Error::Shape(format!(
                "adjacency weights {:?}/{:?} incompatible with {d}-dim features",
                params.w1.dims(),
                params.w2.dims()
            )));
        }
    }
    let u = numerics::matmul(x, &numerics::transpose(&params.w1)?)?;
    let v = numerics::matmul(x, &numerics::transpose(&params.w2)?)?;
    Ok(numerics::sigmoid(&edge_dots(graph, &u, &v)?).into_data())
}

/// `D̃^{-1/2} (A + I) D̃^{-1/2}` in CSR form plus the diagonal.
#[derive(Clone, Debug, PartialEq)]
pub struct NormalizedAdjacency {
    /// `D̃(i, i)`, self-loop included.
    pub degrees: Vec<f64>,
    /// Normalized off-diagonal values, aligned with the graph's edges.
    pub edge_values: Vec<f64>,
    /// Normalized self-loop values `1 / D̃(i, i)`.
    pub self_loops: Vec<f64>,
}

impl NormalizedAdjacency {
    /// Edge values followed by self-loop values.
    pub fn packed(&self) -> Vec<f64> {
        let mut v = self.edge_values.clone();
        v.extend_from_slice(&self.self_loops);
        v
    }
}

fn degrees(graph: &StGraph, values: &[f64]) -> Vec<f64> {
    (0..graph.node_count())
        .map(|i| 1.0 + values[graph.edge_range(i)].iter().sum::<f64>())
        .collect()
}

pub fn normalize(graph: &StGraph, values: &[f64]) -> Result<NormalizedAdjacency> {
    if values.len() != graph.edge_count() {
        return Err(Error::Shape(format!(
            "{} edge values for {} edges",
            values.len(),
            graph.edge_count()
        )));
    }
    if let Some((e, v)) = values
        .iter()
        .enumerate()
        .find(|(_, v)| v.is_nan() || **v <= 0.0)
    {
        return Err(Error::Input(format!(
            "edge value {v} at edge {e} is not positive"
        )));
    }
    let deg = degrees(graph, values);
    let edge_values = graph
        .edges()
        .zip(values)
        .map(|((i, j), a)| a / (deg[i] * deg[j]).sqrt())
        .collect();
    let self_loops = deg.iter().map(|d| 1.0 / d).collect();
    Ok(NormalizedAdjacency {
        degrees: deg,
        edge_values,
        self_loops,
    })
}

fn gcf_kernel(graph: &StGraph, edge_values: &[f64], self_loops: &[f64], x: &Tensor) -> Tensor {
    let d = x.dims()[1];
    let xd = x.data();
    let mut out = vec![0.0; xd.len()];
    for i in 0..graph.node_count() {
        let yi = &mut out[i * d..(i + 1) * d];
        for e in graph.edge_range(i) {
            let j = graph.cols[e];
            let a = edge_values[e];
            for (y, &xv) in yi.iter_mut().zip(&xd[j * d..(j + 1) * d]) {
                *y += a * xv;
            }
        }
        let s = self_loops[i];
        for (y, &xv) in yi.iter_mut().zip(&xd[i * d..(i + 1) * d]) {
            *y += s * xv;
        }
    }
    Tensor::new(x.dims().to_vec(), out).expect("gcf dims")
}

/// Graph convolutional filtering `X_gcf = D̃^{-1/2} Ã D̃^{-1/2} X`, one
/// sparse row at a time.
pub fn gcf(graph: &StGraph, norm: &NormalizedAdjacency, x: &Tensor) -> Result<Tensor> {
    check_node_features(graph, x)?;
    if norm.edge_values.len() != graph.edge_count() || norm.self_loops.len() != graph.node_count() {
        return Err(Error::Shape(
            "normalized adjacency does not match graph".into(),
        ));
    }
    Ok(gcf_kernel(graph, &norm.edge_values, &norm.self_loops, x))
}

/// Two-class node classifier weights, `d x 2` (background, object).
#[derive(Clone, Debug, PartialEq)]
pub struct GcnHead {
    pub weights: Tensor,
}

/// `softmax(X_gcf · head)` per node.
pub fn gcn_classify(xgcf: &Tensor, head: &GcnHead) -> Result<Tensor> {
    Ok(numerics::softmax(&numerics::matmul(xgcf, &head.weights)?))
}

/// Per-node labels with the labeled set covering the memory frames only.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NodeLabels {
    pub labels: Vec<usize>,
    pub selector: Vec<bool>,
}

impl NodeLabels {
    /// Rasterizes the `k` memory-frame masks (oldest first, at feature
    /// resolution). Query-frame nodes are unlabeled.
    pub fn from_memory_masks(cfg: &GraphConfig, masks: &[&Mask]) -> Result<Self> {
        if masks.len() != cfg.k {
            return Err(Error::Shape(format!(
                "{} memory masks for k = {}",
                masks.len(),
                cfg.k
            )));
        }
        let per = cfg.nodes_per_frame();
        let mut labels = Vec::with_capacity(cfg.node_count());
        for m in masks {
            if m.width() != cfg.width || m.height() != cfg.height {
                return Err(Error::Shape(format!(
                    "memory mask {}x{} on a {}x{} grid",
                    m.width(),
                    m.height(),
                    cfg.width,
                    cfg.height
                )));
            }
            labels.extend(m.labels());
        }
        labels.extend(std::iter::repeat_n(0, per));
        let mut selector = vec![true; cfg.k * per];
        selector.extend(std::iter::repeat_n(false, per));
        Ok(Self { labels, selector })
    }

    pub fn labeled_count(&self) -> usize {
        self.selector.iter().filter(|s| **s).count()
    }
}

/// Semi-supervised cross-entropy over the labeled nodes.
pub fn loss_sem(probs: &Tensor, labels: &NodeLabels) -> Result<f64> {
    numerics::cross_entropy(probs, &labels.labels, &labels.selector)
}

/// Stacks per-frame `[h, w, d]` maps (oldest first) into the `[N, d]` node
/// feature matrix.
pub fn rasterize(frames: &[&Tensor]) -> Result<Tensor> {
    let flat: Vec<Tensor> = frames
        .iter()
        .map(|f| {
            if f.rank() != 3 {
                return Err(Error::Shape(format!(
                    "feature map {:?} is not rank 3",
                    f.dims()
                )));
            }
            (*f).clone()
                .reshape(&[f.dims()[0] * f.dims()[1], f.dims()[2]])
        })
        .collect::<Result<_>>()?;
    numerics::concat_rows(&flat.iter().collect::<Vec<_>>())
}

/// The query-frame block of `X_gcf`, as an `[h, w, d]` map.
pub fn query_features(xgcf: &Tensor, cfg: &GraphConfig) -> Result<Tensor> {
    let per = cfg.nodes_per_frame();
    if xgcf.rank() != 2 || xgcf.dims()[0] != cfg.node_count() {
        return Err(Error::Shape(format!(
            "X_gcf {:?} for {} nodes",
            xgcf.dims(),
            cfg.node_count()
        )));
    }
    let d = xgcf.dims()[1];
    numerics::slice_rows(xgcf, cfg.k * per, (cfg.k + 1) * per)?.reshape(&[cfg.height, cfg.width, d])
}

// ---------------------------------------------------------------------------
// recorded ops

struct EdgeDots(Arc<StGraph>);

impl Op for EdgeDots {
    fn name(&self) -> &'static str {
        "edge_dots"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        edge_dots(&self.0, inputs[0], inputs[1])
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let (u, v) = (inputs[0], inputs[1]);
        let r = u.dims()[1];
        let mut du = Tensor::zeros(u.dims());
        let mut dv = Tensor::zeros(v.dims());
        let (ud, vd, g) = (u.data(), v.data(), grad.data());
        {
            let (dud, dvd) = (du.data_mut(), dv.data_mut());
            for (e, (i, j)) in self.0.edges().enumerate() {
                let ge = g[e];
                for t in 0..r {
                    dud[i * r + t] += ge * vd[j * r + t];
                    dvd[j * r + t] += ge * ud[i * r + t];
                }
            }
        }
        vec![Some(du), Some(dv)]
    }
}

struct Normalize(Arc<StGraph>);

impl Op for Normalize {
    fn name(&self) -> &'static str {
        "normalize"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        Ok(Tensor::vector(
            normalize(&self.0, inputs[0].data())?.packed(),
        ))
    }

    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let graph = &*self.0;
        let values = inputs[0].data();
        let (n, e_count) = (graph.node_count(), graph.edge_count());
        let deg = degrees(graph, values);
        let (out, g) = (output.data(), grad.data());

        let mut d_deg = vec![0.0; n];
        let mut d_val = vec![0.0; e_count];
        for (e, (i, j)) in graph.edges().enumerate() {
            let ge = g[e];
            let norm = out[e];
            d_val[e] = ge / (deg[i] * deg[j]).sqrt();
            d_deg[i] -= 0.5 * ge * norm / deg[i];
            d_deg[j] -= 0.5 * ge * norm / deg[j];
        }
        for (i, dd) in d_deg.iter_mut().enumerate() {
            *dd -= g[e_count + i] / (deg[i] * deg[i]);
        }
        for (i, dd) in d_deg.iter().enumerate() {
            for e in graph.edge_range(i) {
                d_val[e] += dd;
            }
        }
        vec![Some(Tensor::vector(d_val))]
    }
}

struct Gcf(Arc<StGraph>);

impl Op for Gcf {
    fn name(&self) -> &'static str {
        "gcf"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        let (packed, x) = (inputs[0], inputs[1]);
        let graph = &*self.0;
        check_node_features(graph, x)?;
        if packed.len() != graph.edge_count() + graph.node_count() {
            return Err(Error::Shape("packed adjacency does not match graph".into()));
        }
        let (edges, selfs) = packed.data().split_at(graph.edge_count());
        Ok(gcf_kernel(graph, edges, selfs, x))
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let graph = &*self.0;
        let (packed, x) = (inputs[0], inputs[1]);
        let d = x.dims()[1];
        let e_count = graph.edge_count();
        let (pd, xd, g) = (packed.data(), x.data(), grad.data());
        let mut dp = vec![0.0; pd.len()];
        let mut dx = vec![0.0; xd.len()];
        for i in 0..graph.node_count() {
            let gi = &g[i * d..(i + 1) * d];
            for e in graph.edge_range(i) {
                let j = graph.cols[e];
                let xj = &xd[j * d..(j + 1) * d];
                dp[e] = gi.iter().zip(xj).map(|(a, b)| a * b).sum();
                let a = pd[e];
                for (dxj, &gv) in dx[j * d..(j + 1) * d].iter_mut().zip(gi) {
                    *dxj += a * gv;
                }
            }
            let xi = &xd[i * d..(i + 1) * d];
            dp[e_count + i] = gi.iter().zip(xi).map(|(a, b)| a * b).sum();
            let s = pd[e_count + i];
            for (dxi, &gv) in dx[i * d..(i + 1) * d].iter_mut().zip(gi) {
                *dxi += s * gv;
            }
        }
        vec![
            Some(Tensor::vector(dp)),
            Some(Tensor::new(x.dims().to_vec(), dx).unwrap()),
        ]
    }
}

/// Recorded counterparts of the pure functions above.
pub mod diff {
    use super::*;

    /// `σ((W1 x_i)ᵀ (W2 x_j))` per stored edge; `x` is `[N, d]`, weights `r x d`.
    pub fn edge_weights(
        g: &mut DiffGraph,
        graph: &Arc<StGraph>,
        x: Var,
        w1: Var,
        w2: Var,
    ) -> Result<Var> {
        let w1t = g.transpose(w1)?;
        let w2t = g.transpose(w2)?;
        let u = g.matmul(x, w1t)?;
        let v = g.matmul(x, w2t)?;
        let dots = g.apply(EdgeDots(graph.clone()), &[u, v])?;
        g.sigmoid(dots)
    }

    /// Edge weights with the projections fixed to the identity: `σ(x_iᵀ x_j)`.
    pub fn unweighted_edge_weights(g: &mut DiffGraph, graph: &Arc<StGraph>, x: Var) -> Result<Var> {
        let dots = g.apply(EdgeDots(graph.clone()), &[x, x])?;
        g.sigmoid(dots)
    }

    /// Packed normalized adjacency: edge values then self-loop values.
    pub fn normalize(g: &mut DiffGraph, graph: &Arc<StGraph>, values: Var) -> Result<Var> {
        g.apply(Normalize(graph.clone()), &[values])
    }

    pub fn gcf(g: &mut DiffGraph, graph: &Arc<StGraph>, packed: Var, x: Var) -> Result<Var> {
        g.apply(Gcf(graph.clone()), &[packed, x])
    }

    pub fn classify(g: &mut DiffGraph, xgcf: Var, head: Var) -> Result<Var> {
        let logits = g.matmul(xgcf, head)?;
        g.softmax(logits)
    }

    pub fn loss_sem(g: &mut DiffGraph, probs: Var, labels: &NodeLabels) -> Result<Var> {
        g.cross_entropy(probs, labels.labels.clone(), labels.selector.clone())
    }

    pub fn rasterize(g: &mut DiffGraph, frames: &[Var]) -> Result<Var> {
        let mut flat = Vec::with_capacity(frames.len());
        for &f in frames {
            let dims = g.value(f).dims().to_vec();
            if dims.len() != 3 {
                return Err(Error::Shape(format!("feature map {dims:?} is not rank 3")));
            }
            flat.push(g.reshape(f, &[dims[0] * dims[1], dims[2]])?);
        }
        g.concat_rows(&flat)
    }

    pub fn query_features(g: &mut DiffGraph, xgcf: Var, cfg: &GraphConfig) -> Result<Var> {
        let per = cfg.nodes_per_frame();
        let d = g.value(xgcf).dims()[1];
        let block = g.slice_rows(xgcf, cfg.k * per, (cfg.k + 1) * per)?;
        g.reshape(block, &[cfg.height, cfg.width, d])
    }
}
