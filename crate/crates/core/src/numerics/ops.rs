//! Dense primitives, each as a pure function plus a recorded [`Op`].

use crate::error::{Error, Result};

use super::{DiffGraph, Op, Tensor, Var};

/// Lower clamp applied to probabilities before taking logs.
pub const LOG_CLAMP: f64 = 1e-12;

// largest double below 1 and smallest positive normal double
const SIGMOID_MAX: f64 = 1.0 - f64::EPSILON / 2.0;
const SIGMOID_MIN: f64 = f64::MIN_POSITIVE;

fn expect_rank(t: &Tensor, rank: usize, what: &str) -> Result<()> {
    if t.rank() != rank {
        return Err(Error::Shape(format!(
            "{what} expects rank {rank}, got dims {:?}",
            t.dims()
        )));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// pure kernels

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.rank() != 2 || b.rank() != 2 || a.dims()[1] != b.dims()[0] {
        return Err(Error::Shape(format!(
            "matmul of {:?} and {:?}",
            a.dims(),
            b.dims()
        )));
    }
    let (m, n, p) = (a.dims()[0], a.dims()[1], b.dims()[1]);
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![0.0; m * p];
    for i in 0..m {
        let row = &mut out[i * p..(i + 1) * p];
        for k in 0..n {
            let aik = ad[i * n + k];
            let brow = &bd[k * p..(k + 1) * p];
            for (o, &bkj) in row.iter_mut().zip(brow) {
                *o += aik * bkj;
            }
        }
    }
    Tensor::new(vec![m, p], out)
}

pub fn transpose(a: &Tensor) -> Result<Tensor> {
    expect_rank(a, 2, "transpose")?;
    let (m, n) = (a.dims()[0], a.dims()[1]);
    let d = a.data();
    Ok(Tensor::from_fn(&[n, m], |idx| {
        let (j, i) = (idx / m, idx % m);
        d[i * n + j]
    }))
}

fn sigmoid_scalar(x: f64) -> f64 {
    let s = if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    };
    s.clamp(SIGMOID_MIN, SIGMOID_MAX)
}

/// Elementwise logistic function. Saturated values are clamped so the
/// output stays strictly inside (0, 1).
pub fn sigmoid(x: &Tensor) -> Tensor {
    x.map(sigmoid_scalar)
}

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| if v > 0.0 { v } else { 0.0 })
}

/// Row-wise softmax over the last axis, with per-row max subtraction.
pub fn softmax(logits: &Tensor) -> Tensor {
    let c = *logits.dims().last().unwrap_or(&1);
    let mut out = logits.clone();
    if c == 0 {
        return out;
    }
    for row in out.data_mut().chunks_mut(c) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    out
}

fn check_ce_inputs(probs: &Tensor, labels: &[usize], selector: &[bool]) -> Result<(usize, usize)> {
    expect_rank(probs, 2, "cross_entropy")?;
    let (n, c) = (probs.dims()[0], probs.dims()[1]);
    if labels.len() != n || selector.len() != n {
        return Err(Error::Shape(format!(
            "cross_entropy: {n} rows but {} labels and {} selector entries",
            labels.len(),
            selector.len()
        )));
    }
    if let Some((i, &l)) = labels.iter().enumerate().find(|(_, &l)| l >= c) {
        return Err(Error::Input(format!(
            "label {l} at row {i} out of range for {c} classes"
        )));
    }
    Ok((n, c))
}

/// `-sum(log(max(p[i, label_i], 1e-12)))` over the selected rows.
pub fn cross_entropy(probs: &Tensor, labels: &[usize], selector: &[bool]) -> Result<f64> {
    let (n, c) = check_ce_inputs(probs, labels, selector)?;
    let p = probs.data();
    let mut total = 0.0;
    for i in 0..n {
        if selector[i] {
            total -= p[i * c + labels[i]].max(LOG_CLAMP).ln();
        }
    }
    Ok(total)
}

/// Spatial padding mode for [`conv2d`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    /// Symmetric zero padding of `(k - 1) / 2`; keeps the extent at stride 1.
    Same,
    Valid,
}

#[derive(Clone, Copy, Debug)]
struct ConvGeometry {
    h: usize,
    w: usize,
    cin: usize,
    kh: usize,
    kw: usize,
    cout: usize,
    stride: usize,
    pad_top: usize,
    pad_left: usize,
    oh: usize,
    ow: usize,
}

impl ConvGeometry {
    fn new(input: &Tensor, kernel: &Tensor, stride: usize, pad: Padding) -> Result<Self> {
        expect_rank(input, 3, "conv2d input")?;
        expect_rank(kernel, 4, "conv2d kernel")?;
        if stride == 0 {
            return Err(Error::Input("conv2d stride must be positive".into()));
        }
        let [h, w, cin] = [input.dims()[0], input.dims()[1], input.dims()[2]];
        let [kh, kw, kcin, cout] = [
            kernel.dims()[0],
            kernel.dims()[1],
            kernel.dims()[2],
            kernel.dims()[3],
        ];
        if kcin != cin {
            return Err(Error::Shape(format!(
                "conv2d kernel {:?} expects {kcin} input channels, input {:?} has {cin}",
                kernel.dims(),
                input.dims()
            )));
        }
        let (pad_top, pad_left) = match pad {
            Padding::Same => ((kh - 1) / 2, (kw - 1) / 2),
            Padding::Valid => (0, 0),
        };
        let span_h = h + 2 * pad_top;
        let span_w = w + 2 * pad_left;
        if span_h < kh || span_w < kw {
            return Err(Error::Shape(format!(
                "conv2d kernel {kh}x{kw} larger than padded input {span_h}x{span_w}"
            )));
        }
        Ok(Self {
            h,
            w,
            cin,
            kh,
            kw,
            cout,
            stride,
            pad_top,
            pad_left,
            oh: (span_h - kh) / stride + 1,
            ow: (span_w - kw) / stride + 1,
        })
    }

    /// Calls `f(out_pixel, in_pixel, tap)` for every in-bounds tap.
    #[inline]
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        for oy in 0..self.oh {
            for ox in 0..self.ow {
                let out_px = oy * self.ow + ox;
                for ky in 0..self.kh {
                    let iy = (oy * self.stride + ky) as isize - self.pad_top as isize;
                    if iy < 0 || iy >= self.h as isize {
                        continue;
                    }
                    for kx in 0..self.kw {
                        let ix = (ox * self.stride + kx) as isize - self.pad_left as isize;
                        if ix < 0 || ix >= self.w as isize {
                            continue;
                        }
                        f(
                            out_px,
                            iy as usize * self.w + ix as usize,
                            ky * self.kw + kx,
                        );
                    }
                }
            }
        }
    }
}

/// Cross-correlation of an `[h, w, cin]` map with a `[kh, kw, cin, cout]`
/// kernel. No bias.
pub fn conv2d(input: &Tensor, kernel: &Tensor, stride: usize, pad: Padding) -> Result<Tensor> {
    let g = ConvGeometry::new(input, kernel, stride, pad)?;
    let (x, k) = (input.data(), kernel.data());
    let mut out = vec![0.0; g.oh * g.ow * g.cout];
    g.for_each_tap(|o, i, tap| {
        let acc = &mut out[o * g.cout..(o + 1) * g.cout];
        let xin = &x[i * g.cin..(i + 1) * g.cin];
        let ktap = &k[tap * g.cin * g.cout..(tap + 1) * g.cin * g.cout];
        for (ci, &v) in xin.iter().enumerate() {
            if v == 0.0 {
                continue;
            }
            let krow = &ktap[ci * g.cout..(ci + 1) * g.cout];
            for (a, &kv) in acc.iter_mut().zip(krow) {
                *a += v * kv;
            }
        }
    });
    Tensor::new(vec![g.oh, g.ow, g.cout], out)
}

/// Adds `bias[c]` to every entry of channel `c`; the last axis is the
/// channel axis.
pub fn add_bias(input: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let c = bias.len();
    if bias.rank() != 1 || input.dims().last() != Some(&c) {
        return Err(Error::Shape(format!(
            "add_bias: bias {:?} against input {:?}",
            bias.dims(),
            input.dims()
        )));
    }
    let mut out = input.clone();
    for px in out.data_mut().chunks_mut(c.max(1)) {
        for (v, b) in px.iter_mut().zip(bias.data()) {
            *v += b;
        }
    }
    Ok(out)
}

/// Nearest-neighbour 2x spatial upsampling of an `[h, w, c]` map.
pub fn upsample2x(input: &Tensor) -> Result<Tensor> {
    expect_rank(input, 3, "upsample2x")?;
    let [h, w, c] = [input.dims()[0], input.dims()[1], input.dims()[2]];
    let x = input.data();
    let mut out = vec![0.0; 4 * h * w * c];
    for oy in 0..2 * h {
        for ox in 0..2 * w {
            let src = ((oy / 2) * w + ox / 2) * c;
            let dst = (oy * 2 * w + ox) * c;
            out[dst..dst + c].copy_from_slice(&x[src..src + c]);
        }
    }
    Tensor::new(vec![2 * h, 2 * w, c], out)
}

/// Concatenates `[h, w, c_i]` maps along the channel axis, in order.
pub fn concat_channels(parts: &[&Tensor]) -> Result<Tensor> {
    let first = parts
        .first()
        .ok_or_else(|| Error::Shape("concat_channels needs at least one part".into()))?;
    expect_rank(first, 3, "concat_channels")?;
    let (h, w) = (first.dims()[0], first.dims()[1]);
    for p in parts {
        if p.rank() != 3 || p.dims()[0] != h || p.dims()[1] != w {
            return Err(Error::Shape(format!(
                "concat_channels: spatial dims {:?} differ from {:?}",
                p.dims(),
                first.dims()
            )));
        }
    }
    let total: usize = parts.iter().map(|p| p.dims()[2]).sum();
    let mut out = Vec::with_capacity(h * w * total);
    for px in 0..h * w {
        for p in parts {
            let c = p.dims()[2];
            out.extend_from_slice(&p.data()[px * c..(px + 1) * c]);
        }
    }
    Tensor::new(vec![h, w, total], out)
}

/// Channels `start..end` of an `[h, w, c]` map.
pub fn slice_channels(input: &Tensor, start: usize, end: usize) -> Result<Tensor> {
    expect_rank(input, 3, "slice_channels")?;
    let [h, w, c] = [input.dims()[0], input.dims()[1], input.dims()[2]];
    if start > end || end > c {
        return Err(Error::Shape(format!(
            "channel slice {start}..{end} out of range for {c} channels"
        )));
    }
    let mut out = Vec::with_capacity(h * w * (end - start));
    for px in input.data().chunks(c) {
        out.extend_from_slice(&px[start..end]);
    }
    Tensor::new(vec![h, w, end - start], out)
}

/// Stacks tensors along the first axis; trailing dims must agree.
pub fn concat_rows(parts: &[&Tensor]) -> Result<Tensor> {
    let first = parts
        .first()
        .ok_or_else(|| Error::Shape("concat_rows needs at least one part".into()))?;
    let tail = &first.dims()[1..];
    let mut rows = 0;
    let mut data = Vec::new();
    for p in parts {
        if p.rank() != first.rank() || &p.dims()[1..] != tail {
            return Err(Error::Shape(format!(
                "concat_rows: {:?} does not stack with {:?}",
                p.dims(),
                first.dims()
            )));
        }
        rows += p.dims()[0];
        data.extend_from_slice(p.data());
    }
    let mut dims = vec![rows];
    dims.extend_from_slice(tail);
    Tensor::new(dims, data)
}

/// Rows `start..end` along the first axis.
pub fn slice_rows(input: &Tensor, start: usize, end: usize) -> Result<Tensor> {
    let n = input.dims().first().copied().unwrap_or(0);
    if start > end || end > n {
        return Err(Error::Shape(format!(
            "row slice {start}..{end} out of range for {:?}",
            input.dims()
        )));
    }
    let stride: usize = input.dims()[1..].iter().product();
    let mut dims = input.dims().to_vec();
    dims[0] = end - start;
    Tensor::new(dims, input.data()[start * stride..end * stride].to_vec())
}

// ---------------------------------------------------------------------------
// recorded ops

struct MatMul;

impl Op for MatMul {
    fn name(&self) -> &'static str {
        "matmul"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        matmul(inputs[0], inputs[1])
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let (a, b) = (inputs[0], inputs[1]);
        // dA = G Bᵀ, dB = Aᵀ G; shapes were validated in forward
        let da = matmul(grad, &transpose(b).unwrap()).unwrap();
        let db = matmul(&transpose(a).unwrap(), grad).unwrap();
        vec![Some(da), Some(db)]
    }
}

struct Transpose;

impl Op for Transpose {
    fn name(&self) -> &'static str {
        "transpose"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        transpose(inputs[0])
    }

    fn backward(
        &self,
        _inputs: &[&Tensor],
        _output: &Tensor,
        grad: &Tensor,
    ) -> Vec<Option<Tensor>> {
        vec![Some(transpose(grad).unwrap())]
    }
}

#[derive(Clone, Copy)]
enum Binary {
    Add,
    Sub,
    Mul,
}

impl Op for Binary {
    fn name(&self) -> &'static str {
        match self {
            Binary::Add => "add",
            Binary::Sub => "sub",
            Binary::Mul => "mul",
        }
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        let (a, b) = (inputs[0], inputs[1]);
        if !a.same_dims(b) {
            return Err(Error::Shape(format!(
                "{} of {:?} and {:?}",
                self.name(),
                a.dims(),
                b.dims()
            )));
        }
        let f: fn(f64, f64) -> f64 = match self {
            Binary::Add => |x, y| x + y,
            Binary::Sub => |x, y| x - y,
            Binary::Mul => |x, y| x * y,
        };
        let data = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(a.dims().to_vec(), data)
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        match self {
            Binary::Add => vec![Some(grad.clone()), Some(grad.clone())],
            Binary::Sub => vec![Some(grad.clone()), Some(grad.map(|g| -g))],
            Binary::Mul => {
                let mul = |t: &Tensor| {
                    let data = t
                        .data()
                        .iter()
                        .zip(grad.data())
                        .map(|(a, g)| a * g)
                        .collect();
                    Tensor::new(t.dims().to_vec(), data).unwrap()
                };
                vec![Some(mul(inputs[1])), Some(mul(inputs[0]))]
            }
        }
    }
}

struct Scale(f64);

impl Op for Scale {
    fn name(&self) -> &'static str {
        "scale"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        Ok(inputs[0].map(|v| v * self.0))
    }

    fn backward(
        &self,
        _inputs: &[&Tensor],
        _output: &Tensor,
        grad: &Tensor,
    ) -> Vec<Option<Tensor>> {
        vec![Some(grad.map(|g| g * self.0))]
    }
}

struct Sum;

impl Op for Sum {
    fn name(&self) -> &'static str {
        "sum"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        Ok(Tensor::scalar(inputs[0].data().iter().sum()))
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        vec![Some(Tensor::filled(inputs[0].dims(), grad.data()[0]))]
    }
}

struct Sigmoid;

impl Op for Sigmoid {
    fn name(&self) -> &'static str {
        "sigmoid"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        Ok(sigmoid(inputs[0]))
    }

    fn backward(&self, _inputs: &[&Tensor], output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let data = output
            .data()
            .iter()
            .zip(grad.data())
            .map(|(&s, &g)| g * s * (1.0 - s))
            .collect();
        vec![Some(Tensor::new(output.dims().to_vec(), data).unwrap())]
    }
}

struct Relu;

impl Op for Relu {
    fn name(&self) -> &'static str {
        "relu"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        Ok(relu(inputs[0]))
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let data = inputs[0]
            .data()
            .iter()
            .zip(grad.data())
            .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
            .collect();
        vec![Some(Tensor::new(grad.dims().to_vec(), data).unwrap())]
    }
}

struct Softmax;

impl Op for Softmax {
    fn name(&self) -> &'static str {
        "softmax"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        Ok(softmax(inputs[0]))
    }

    fn backward(&self, _inputs: &[&Tensor], output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let c = *output.dims().last().unwrap();
        let mut out = grad.clone();
        for ((dx, y), g) in out
            .data_mut()
            .chunks_mut(c)
            .zip(output.data().chunks(c))
            .zip(grad.data().chunks(c))
        {
            let dot: f64 = y.iter().zip(g).map(|(a, b)| a * b).sum();
            for j in 0..c {
                dx[j] = y[j] * (g[j] - dot);
            }
        }
        vec![Some(out)]
    }
}

struct CrossEntropy {
    labels: Vec<usize>,
    selector: Vec<bool>,
}

impl Op for CrossEntropy {
    fn name(&self) -> &'static str {
        "cross_entropy"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        cross_entropy(inputs[0], &self.labels, &self.selector).map(Tensor::scalar)
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let probs = inputs[0];
        let c = probs.dims()[1];
        let g = grad.data()[0];
        let mut out = Tensor::zeros(probs.dims());
        let d = out.data_mut();
        for (i, (&label, &selected)) in self.labels.iter().zip(&self.selector).enumerate() {
            let p = probs.data()[i * c + label];
            if selected && p > LOG_CLAMP {
                d[i * c + label] = -g / p;
            }
        }
        vec![Some(out)]
    }
}

struct Conv2d {
    stride: usize,
    pad: Padding,
}

impl Op for Conv2d {
    fn name(&self) -> &'static str {
        "conv2d"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        conv2d(inputs[0], inputs[1], self.stride, self.pad)
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let (input, kernel) = (inputs[0], inputs[1]);
        let geo = ConvGeometry::new(input, kernel, self.stride, self.pad).unwrap();
        let (x, k, gd) = (input.data(), kernel.data(), grad.data());
        let (cin, cout) = (geo.cin, geo.cout);
        let mut dx = vec![0.0; x.len()];
        let mut dk = vec![0.0; k.len()];
        geo.for_each_tap(|o, i, tap| {
            let gout = &gd[o * cout..(o + 1) * cout];
            let xin = &x[i * cin..(i + 1) * cin];
            let base = tap * cin * cout;
            for ci in 0..cin {
                let krow = &k[base + ci * cout..base + (ci + 1) * cout];
                let mut acc = 0.0;
                for (&kv, &gv) in krow.iter().zip(gout) {
                    acc += kv * gv;
                }
                dx[i * cin + ci] += acc;
                let v = xin[ci];
                if v != 0.0 {
                    let dkrow = &mut dk[base + ci * cout..base + (ci + 1) * cout];
                    for (d, &gv) in dkrow.iter_mut().zip(gout) {
                        *d += v * gv;
                    }
                }
            }
        });
        vec![
            Some(Tensor::new(input.dims().to_vec(), dx).unwrap()),
            Some(Tensor::new(kernel.dims().to_vec(), dk).unwrap()),
        ]
    }
}

struct AddBias;

impl Op for AddBias {
    fn name(&self) -> &'static str {
        "add_bias"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        add_bias(inputs[0], inputs[1])
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let c = inputs[1].len();
        let mut db = Tensor::zeros(inputs[1].dims());
        for px in grad.data().chunks(c.max(1)) {
            for (d, g) in db.data_mut().iter_mut().zip(px) {
                *d += g;
            }
        }
        vec![Some(grad.clone()), Some(db)]
    }
}

struct Upsample2x;

impl Op for Upsample2x {
    fn name(&self) -> &'static str {
        "upsample2x"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        upsample2x(inputs[0])
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let [h, w, c] = [
            inputs[0].dims()[0],
            inputs[0].dims()[1],
            inputs[0].dims()[2],
        ];
        let mut dx = Tensor::zeros(inputs[0].dims());
        let d = dx.data_mut();
        let g = grad.data();
        for oy in 0..2 * h {
            for ox in 0..2 * w {
                let dst = ((oy / 2) * w + ox / 2) * c;
                let src = (oy * 2 * w + ox) * c;
                for ch in 0..c {
                    d[dst + ch] += g[src + ch];
                }
            }
        }
        vec![Some(dx)]
    }
}

struct ConcatChannels;

impl Op for ConcatChannels {
    fn name(&self) -> &'static str {
        "concat_channels"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        concat_channels(inputs)
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let mut start = 0;
        inputs
            .iter()
            .map(|p| {
                let c = p.dims()[2];
                let part = slice_channels(grad, start, start + c).unwrap();
                start += c;
                Some(part)
            })
            .collect()
    }
}

struct ConcatRows;

impl Op for ConcatRows {
    fn name(&self) -> &'static str {
        "concat_rows"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        concat_rows(inputs)
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let mut start = 0;
        inputs
            .iter()
            .map(|p| {
                let n = p.dims()[0];
                let part = slice_rows(grad, start, start + n).unwrap();
                start += n;
                Some(part)
            })
            .collect()
    }
}

struct SliceRows {
    start: usize,
    end: usize,
}

impl Op for SliceRows {
    fn name(&self) -> &'static str {
        "slice_rows"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        slice_rows(inputs[0], self.start, self.end)
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let mut dx = Tensor::zeros(inputs[0].dims());
        let stride = grad.len() / (self.end - self.start).max(1);
        dx.data_mut()[self.start * stride..self.end * stride].copy_from_slice(grad.data());
        vec![Some(dx)]
    }
}

struct Reshape(Vec<usize>);

impl Op for Reshape {
    fn name(&self) -> &'static str {
        "reshape"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        inputs[0].clone().reshape(&self.0)
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        vec![Some(grad.clone().reshape(inputs[0].dims()).unwrap())]
    }
}

impl DiffGraph {
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(MatMul, &[a, b])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        self.apply(Transpose, &[a])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Binary::Add, &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Binary::Sub, &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Binary::Mul, &[a, b])
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        self.apply(Scale(factor), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.apply(Sum, &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.apply(Sigmoid, &[a])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.apply(Relu, &[a])
    }

    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        self.apply(Softmax, &[a])
    }

    pub fn cross_entropy(
        &mut self,
        probs: Var,
        labels: Vec<usize>,
        selector: Vec<bool>,
    ) -> Result<Var> {
        check_ce_inputs(self.value(probs), &labels, &selector)?;
        self.apply(CrossEntropy { labels, selector }, &[probs])
    }

    pub fn conv2d(&mut self, input: Var, kernel: Var, stride: usize, pad: Padding) -> Result<Var> {
        self.apply(Conv2d { stride, pad }, &[input, kernel])
    }

    pub fn add_bias(&mut self, input: Var, bias: Var) -> Result<Var> {
        self.apply(AddBias, &[input, bias])
    }

    pub fn upsample2x(&mut self, input: Var) -> Result<Var> {
        self.apply(Upsample2x, &[input])
    }

    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        self.apply(ConcatChannels, parts)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        self.apply(ConcatRows, parts)
    }

    pub fn slice_rows(&mut self, input: Var, start: usize, end: usize) -> Result<Var> {
        self.apply(SliceRows { start, end }, &[input])
    }

    pub fn reshape(&mut self, input: Var, dims: &[usize]) -> Result<Var> {
        self.apply(Reshape(dims.to_vec()), &[input])
    }
}
