//! Dense `f64` tensors and a reverse-mode tape.
//!
//! A [`Tape`] records every operation applied to its [`Var`] handles and
//! replays them in reverse on [`Tape::backward`]. Recorded values are never
//! mutated; gradients land in the `grad` slot of each reachable node.
//!
//! Broadcasting is limited to the two bias-add forms used by linear and
//! convolutional layers.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::Dimension(format!(
                "shape {shape:?} has a zero-sized dimension"
            )));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Dimension(format!(
                "shape {shape:?} needs {expected} elements, got {}",
                data.len()
            )));
        }
        Ok(Self {
            shape,
            data,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; n],
            grad: None,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
            grad: None,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn set_grad(&mut self, grad: Option<Vec<f64>>) {
        self.grad = grad;
    }

    pub fn take_grad(&mut self) -> Option<Vec<f64>> {
        self.grad.take()
    }

    /// Same data under a new shape of equal element count.
    pub fn reshaped(&self, shape: Vec<usize>) -> Result<Self> {
        Tensor::new(shape, self.data.clone())
    }

    pub fn sum_squares(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }
}

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    AddRowBias(Var, Var),
    AddChannelBias(Var, Var),
    Conv2d {
        input: Var,
        kernel: Var,
        stride: usize,
        padding: usize,
    },
    Relu(Var),
    AvgPool2(Var),
    Reshape(Var),
    Add(Var, Var),
    SoftmaxXent {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Records an input or parameter.
    pub fn leaf(&mut self, mut value: Tensor) -> Var {
        value.grad = None;
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Vec<f64>> {
        self.nodes[v.0].value.take_grad()
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data[0]
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let out = matmul_forward(ta, tb)?;
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    /// `x[N×M] + bias[M]`, broadcast over rows.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(bias));
        if tx.shape.len() != 2 || tb.shape != [tx.shape[1]] {
            return Err(Error::Dimension(format!(
                "row bias {:?} does not match input {:?}",
                tb.shape, tx.shape
            )));
        }
        let cols = tx.shape[1];
        let mut data = tx.data.clone();
        for row in data.chunks_mut(cols) {
            for (v, b) in row.iter_mut().zip(&tb.data) {
                *v += b;
            }
        }
        let out = Tensor::new(tx.shape.clone(), data)?;
        Ok(self.push(out, Op::AddRowBias(x, bias)))
    }

    /// `x[N×C×H×W] + bias[C]`, broadcast over batch and space.
    pub fn add_channel_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(bias));
        if tx.shape.len() != 4 || tb.shape != [tx.shape[1]] {
            return Err(Error::Dimension(format!(
                "channel bias {:?} does not match input {:?}",
                tb.shape, tx.shape
            )));
        }
        let plane = tx.shape[2] * tx.shape[3];
        let channels = tx.shape[1];
        let mut data = tx.data.clone();
        for (i, chunk) in data.chunks_mut(plane).enumerate() {
            let b = tb.data[i % channels];
            chunk.iter_mut().for_each(|v| *v += b);
        }
        let out = Tensor::new(tx.shape.clone(), data)?;
        Ok(self.push(out, Op::AddChannelBias(x, bias)))
    }

    pub fn conv2d(&mut self, input: Var, kernel: Var, stride: usize, padding: usize) -> Result<Var> {
        let out = conv2d_forward(self.value(input), self.value(kernel), stride, padding)?;
        Ok(self.push(
            out,
            Op::Conv2d {
                input,
                kernel,
                stride,
                padding,
            },
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let data = tx.data.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
        let out = Tensor {
            shape: tx.shape.clone(),
            data,
            grad: None,
        };
        self.push(out, Op::Relu(x))
    }

    /// 2×2 average pooling with stride 2 (odd trailing rows/cols are dropped).
    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        if tx.shape.len() != 4 || tx.shape[2] < 2 || tx.shape[3] < 2 {
            return Err(Error::Dimension(format!(
                "avg_pool2 needs N×C×H×W with H,W >= 2, got {:?}",
                tx.shape
            )));
        }
        let (n, c, h, w) = (tx.shape[0], tx.shape[1], tx.shape[2], tx.shape[3]);
        let (oh, ow) = (h / 2, w / 2);
        let mut data = vec![0.0; n * c * oh * ow];
        for plane in 0..n * c {
            let src = &tx.data[plane * h * w..(plane + 1) * h * w];
            let dst = &mut data[plane * oh * ow..(plane + 1) * oh * ow];
            for i in 0..oh {
                for j in 0..ow {
                    let (r, s) = (2 * i, 2 * j);
                    dst[i * ow + j] = 0.25
                        * (src[r * w + s] + src[r * w + s + 1] + src[(r + 1) * w + s] + src[(r + 1) * w + s + 1]);
                }
            }
        }
        let out = Tensor::new(vec![n, c, oh, ow], data)?;
        Ok(self.push(out, Op::AvgPool2(x)))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let out = self.value(x).reshaped(shape)?;
        Ok(self.push(out, Op::Reshape(x)))
    }

    /// Flattens `N×...` to `N×D`.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let shape = self.value(x).shape.clone();
        let n = shape[0];
        let d = shape[1..].iter().product();
        self.reshape(x, vec![n, d])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape != tb.shape {
            return Err(Error::Dimension(format!(
                "add of {:?} and {:?}",
                ta.shape, tb.shape
            )));
        }
        let data = ta.data.iter().zip(&tb.data).map(|(x, y)| x + y).collect();
        let out = Tensor::new(ta.shape.clone(), data)?;
        Ok(self.push(out, Op::Add(a, b)))
    }

    /// Mean softmax cross-entropy of `logits[N×C]` against class indices.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let tl = self.value(logits);
        if tl.shape.len() != 2 {
            return Err(Error::Dimension(format!(
                "logits must be N×C, got {:?}",
                tl.shape
            )));
        }
        let (n, c) = (tl.shape[0], tl.shape[1]);
        if labels.len() != n {
            return Err(Error::Dimension(format!(
                "{} labels for {n} logit rows",
                labels.len()
            )));
        }
        if let Some((row, &label)) = labels.iter().enumerate().find(|(_, &l)| l >= c) {
            return Err(Error::Index(format!(
                "label {label} at row {row} is outside [0, {c})"
            )));
        }
        let mut probs = vec![0.0; n * c];
        let mut total = 0.0;
        for (row, (z, p)) in tl.data.chunks(c).zip(probs.chunks_mut(c)).enumerate() {
            let (argmax, max) = z
                .iter()
                .copied()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |acc, (j, v)| if v > acc.1 { (j, v) } else { acc });
            let mut rest = 0.0;
            for (j, (&zj, pj)) in z.iter().zip(p.iter_mut()).enumerate() {
                let e = (zj - max).exp();
                *pj = e;
                if j != argmax {
                    rest += e;
                }
            }
            let denom = 1.0 + rest;
            p.iter_mut().for_each(|v| *v /= denom);
            // log-sum-exp minus the target logit, with ln_1p to keep tiny losses exact
            total += (max - z[labels[row]]) + rest.ln_1p();
        }
        let out = Tensor::scalar(total / n as f64);
        Ok(self.push(
            out,
            Op::SoftmaxXent {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        ))
    }

    /// Sign pattern of every ReLU input on the tape, in recording order.
    pub fn relu_pattern(&self) -> Vec<bool> {
        self.nodes
            .iter()
            .filter_map(|node| match node.op {
                Op::Relu(x) => Some(self.value(x).data.iter().map(|&v| v > 0.0)),
                _ => None,
            })
            .flatten()
            .collect()
    }

    /// Reverse-mode sweep from a scalar output. Every node that the output
    /// depends on receives a populated `grad`.
    pub fn backward(&mut self, output: Var) -> Result<()> {
        if self.value(output).len() != 1 {
            return Err(Error::Dimension(format!(
                "backward needs a scalar output, got shape {:?}",
                self.value(output).shape
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; output.0 + 1];
        grads[output.0] = Some(vec![1.0]);

        for i in (0..=output.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    let (m, k, n) = (ta.shape[0], ta.shape[1], tb.shape[1]);
                    // dA = G·Bᵀ, dB = Aᵀ·G
                    let mut da = vec![0.0; m * k];
                    for r in 0..m {
                        let grow = &g[r * n..(r + 1) * n];
                        for (kk, dv) in da[r * k..(r + 1) * k].iter_mut().enumerate() {
                            let brow = &tb.data[kk * n..(kk + 1) * n];
                            *dv = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
                        }
                    }
                    let mut db = vec![0.0; k * n];
                    for r in 0..m {
                        let grow = &g[r * n..(r + 1) * n];
                        for kk in 0..k {
                            let av = ta.data[r * k + kk];
                            if av == 0.0 {
                                continue;
                            }
                            for (dv, gv) in db[kk * n..(kk + 1) * n].iter_mut().zip(grow) {
                                *dv += av * gv;
                            }
                        }
                    }
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::AddRowBias(x, b) => {
                    let cols = self.value(*b).len();
                    let mut db = vec![0.0; cols];
                    for row in g.chunks(cols) {
                        db.iter_mut().zip(row).for_each(|(d, v)| *d += v);
                    }
                    accumulate(&mut grads, *b, db);
                    accumulate(&mut grads, *x, g.clone());
                }
                Op::AddChannelBias(x, b) => {
                    let shape = &self.value(*x).shape;
                    let (channels, plane) = (shape[1], shape[2] * shape[3]);
                    let mut db = vec![0.0; channels];
                    for (idx, chunk) in g.chunks(plane).enumerate() {
                        db[idx % channels] += chunk.iter().sum::<f64>();
                    }
                    accumulate(&mut grads, *b, db);
                    accumulate(&mut grads, *x, g.clone());
                }
                Op::Conv2d {
                    input,
                    kernel,
                    stride,
                    padding,
                } => {
                    let (di, dk) = conv2d_backward(
                        self.value(*input),
                        self.value(*kernel),
                        &node.value.shape,
                        &g,
                        *stride,
                        *padding,
                    );
                    accumulate(&mut grads, *input, di);
                    accumulate(&mut grads, *kernel, dk);
                }
                Op::Relu(x) => {
                    let dx = self
                        .value(*x)
                        .data
                        .iter()
                        .zip(&g)
                        .map(|(&v, &gv)| if v > 0.0 { gv } else { 0.0 })
                        .collect();
                    accumulate(&mut grads, *x, dx);
                }
                Op::AvgPool2(x) => {
                    let shape = &self.value(*x).shape;
                    let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
                    let (oh, ow) = (h / 2, w / 2);
                    let mut dx = vec![0.0; n * c * h * w];
                    for plane in 0..n * c {
                        let src = &g[plane * oh * ow..(plane + 1) * oh * ow];
                        let dst = &mut dx[plane * h * w..(plane + 1) * h * w];
                        for i in 0..oh {
                            for j in 0..ow {
                                let q = 0.25 * src[i * ow + j];
                                let (r, s) = (2 * i, 2 * j);
                                dst[r * w + s] += q;
                                dst[r * w + s + 1] += q;
                                dst[(r + 1) * w + s] += q;
                                dst[(r + 1) * w + s + 1] += q;
                            }
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::Reshape(x) => accumulate(&mut grads, *x, g.clone()),
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g.clone());
                }
                Op::SoftmaxXent {
                    logits,
                    labels,
                    probs,
                } => {
                    let n = labels.len();
                    let c = probs.len() / n;
                    let scale = g[0] / n as f64;
                    let mut dz: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                    for (row, &label) in labels.iter().enumerate() {
                        dz[row * c + label] -= scale;
                    }
                    accumulate(&mut grads, *logits, dz);
                }
            }
            self.nodes[i].value.grad = Some(g);
        }
        Ok(())
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, delta: Vec<f64>) {
    match &mut grads[v.0] {
        Some(existing) => existing.iter_mut().zip(delta).for_each(|(e, d)| *e += d),
        slot @ None => *slot = Some(delta),
    }
}

pub(crate) fn matmul_forward(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape.len() != 2 || b.shape.len() != 2 || a.shape[1] != b.shape[0] {
        return Err(Error::Dimension(format!(
            "matmul of {:?} and {:?}",
            a.shape, b.shape
        )));
    }
    let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
    let mut out = vec![0.0; m * n];
    for r in 0..m {
        let orow = &mut out[r * n..(r + 1) * n];
        for kk in 0..k {
            let av = a.data[r * k + kk];
            if av == 0.0 {
                continue;
            }
            for (o, bv) in orow.iter_mut().zip(&b.data[kk * n..(kk + 1) * n]) {
                *o += av * bv;
            }
        }
    }
    Tensor::new(vec![m, n], out)
}

pub(crate) fn conv_output_dims(
    input: &[usize],
    kernel: &[usize],
    stride: usize,
    padding: usize,
) -> Result<(usize, usize)> {
    if input.len() != 4 || kernel.len() != 4 || input[1] != kernel[1] {
        return Err(Error::Dimension(format!(
            "conv2d of input {input:?} with kernel {kernel:?}"
        )));
    }
    if stride == 0 {
        return Err(Error::Dimension("conv2d stride must be positive".into()));
    }
    let (h, w) = (input[2] + 2 * padding, input[3] + 2 * padding);
    let (kh, kw) = (kernel[2], kernel[3]);
    if kh > h || kw > w {
        return Err(Error::Dimension(format!(
            "kernel {kh}×{kw} larger than padded input {h}×{w}"
        )));
    }
    Ok(((h - kh) / stride + 1, (w - kw) / stride + 1))
}

struct ConvGeom {
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    padding: usize,
}

impl ConvGeom {
    fn rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn cols(&self) -> usize {
        self.oh * self.ow
    }

    /// Input index read by column `(i, j)` of row `(ci, ki, kj)`, if inside the image.
    fn source(&self, ci: usize, ki: usize, kj: usize, i: usize, j: usize) -> Option<usize> {
        let r = (i * self.stride + ki).checked_sub(self.padding).filter(|&r| r < self.h)?;
        let s = (j * self.stride + kj).checked_sub(self.padding).filter(|&s| s < self.w)?;
        Some((ci * self.h + r) * self.w + s)
    }

    /// Output positions `o` with `o·stride + k − padding` inside `0..size`.
    fn valid(&self, out: usize, size: usize, k: usize) -> std::ops::Range<usize> {
        let lo = self.padding.saturating_sub(k).div_ceil(self.stride);
        let hi = if size + self.padding > k {
            ((size + self.padding - k - 1) / self.stride + 1).min(out)
        } else {
            0
        };
        lo.min(hi)..hi
    }

    /// Unrolls one example's receptive fields into a `rows × cols` matrix.
    fn im2col(&self, x: &[f64], col: &mut [f64]) {
        let p = self.cols();
        col.fill(0.0);
        for ci in 0..self.c {
            let src = &x[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ki in 0..self.kh {
                let rows = self.valid(self.oh, self.h, ki);
                for kj in 0..self.kw {
                    let cols = self.valid(self.ow, self.w, kj);
                    if cols.is_empty() {
                        continue;
                    }
                    let row = &mut col[((ci * self.kh + ki) * self.kw + kj) * p..][..p];
                    let s0 = cols.start * self.stride + kj - self.padding;
                    for i in rows.clone() {
                        let r = i * self.stride + ki - self.padding;
                        let dst = &mut row[i * self.ow + cols.start..i * self.ow + cols.end];
                        if self.stride == 1 {
                            dst.copy_from_slice(&src[r * self.w + s0..r * self.w + s0 + dst.len()]);
                        } else {
                            for (t, d) in dst.iter_mut().enumerate() {
                                *d = src[r * self.w + s0 + t * self.stride];
                            }
                        }
                    }
                }
            }
        }
    }

    fn col2im_add(&self, col: &[f64], dx: &mut [f64]) {
        let p = self.cols();
        for ci in 0..self.c {
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = &col[((ci * self.kh + ki) * self.kw + kj) * p..][..p];
                    for i in 0..self.oh {
                        for j in 0..self.ow {
                            if let Some(at) = self.source(ci, ki, kj, i, j) {
                                dx[at] += row[i * self.ow + j];
                            }
                        }
                    }
                }
            }
        }
    }
}

fn conv_geom(input: &Tensor, kernel: &Tensor, oh: usize, ow: usize, stride: usize, padding: usize) -> ConvGeom {
    ConvGeom {
        c: input.shape[1],
        h: input.shape[2],
        w: input.shape[3],
        kh: kernel.shape[2],
        kw: kernel.shape[3],
        oh,
        ow,
        stride,
        padding,
    }
}

fn conv2d_forward(input: &Tensor, kernel: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
    let (oh, ow) = conv_output_dims(&input.shape, &kernel.shape, stride, padding)?;
    let geom = conv_geom(input, kernel, oh, ow, stride, padding);
    let (n, f) = (input.shape[0], kernel.shape[0]);
    let (k, p) = (geom.rows(), geom.cols());
    let plane = geom.c * geom.h * geom.w;
    let mut col = vec![0.0; k * p];
    let mut out = vec![0.0; n * f * p];
    for b in 0..n {
        geom.im2col(&input.data[b * plane..(b + 1) * plane], &mut col);
        let dst = &mut out[b * f * p..(b + 1) * f * p];
        for fo in 0..f {
            let drow = &mut dst[fo * p..(fo + 1) * p];
            for (kk, &wv) in kernel.data[fo * k..(fo + 1) * k].iter().enumerate() {
                if wv != 0.0 {
                    drow.iter_mut().zip(&col[kk * p..(kk + 1) * p]).for_each(|(d, x)| *d += wv * x);
                }
            }
        }
    }
    Tensor::new(vec![n, f, oh, ow], out)
}

fn conv2d_backward(
    input: &Tensor,
    kernel: &Tensor,
    out_shape: &[usize],
    g: &[f64],
    stride: usize,
    padding: usize,
) -> (Vec<f64>, Vec<f64>) {
    let geom = conv_geom(input, kernel, out_shape[2], out_shape[3], stride, padding);
    let (n, f) = (input.shape[0], kernel.shape[0]);
    let (k, p) = (geom.rows(), geom.cols());
    let plane = geom.c * geom.h * geom.w;
    let mut di = vec![0.0; input.len()];
    let mut dk = vec![0.0; kernel.len()];
    let mut col = vec![0.0; k * p];
    let mut dcol = vec![0.0; k * p];
    for b in 0..n {
        geom.im2col(&input.data[b * plane..(b + 1) * plane], &mut col);
        dcol.fill(0.0);
        let gb = &g[b * f * p..(b + 1) * f * p];
        for fo in 0..f {
            let grow = &gb[fo * p..(fo + 1) * p];
            for kk in 0..k {
                let crow = &col[kk * p..(kk + 1) * p];
                dk[fo * k + kk] += grow.iter().zip(crow).map(|(a, b)| a * b).sum::<f64>();
                let wv = kernel.data[fo * k + kk];
                dcol[kk * p..(kk + 1) * p]
                    .iter_mut()
                    .zip(grow)
                    .for_each(|(d, gv)| *d += wv * gv);
            }
        }
        geom.col2im_add(&dcol, &mut di[b * plane..(b + 1) * plane]);
    }
    (di, dk)
}
