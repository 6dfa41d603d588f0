//! Define-by-run computation graph with reverse-mode differentiation.
//!
//! Nodes are appended in evaluation order, so the node list is already a
//! topological order and `backward` is a single reverse sweep.
//!
//! Row-wise operations (`linear`, `softmax`, `concat`, ...) accept either a
//! vector `[n]` (one row) or a batch `[B×n]`; the output keeps the input rank.

use super::kernels::{col2im3, gemm, im2col3, Mat};
use super::tensor::Tensor;
use crate::error::{config_err, Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    Linear { x: Var, w: Var, b: Option<Var>, rows: usize },
    Conv2d { x: Var, k: Var, b: Var, batch: usize, c: usize, h: usize, w: usize },
    MaxPool { x: Var, argmax: Vec<usize> },
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Concat { parts: Vec<(Var, usize)>, rows: usize },
    SliceCols { x: Var, start: usize, in_cols: usize },
    Reshape(Var),
    Softmax(Var),
    LogSoftmax(Var),
    Pick { x: Var, idx: Vec<Option<usize>>, cols: usize },
    Sum(Var),
    GaussNll2 { params: Var, targets: Vec<[f64; 2]> },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`]; kept for leaf nodes only.
pub struct Gradients {
    slots: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the loss with respect to leaf `v`; exactly zero when `v` does
    /// not influence the loss.
    pub fn get(&self, v: Var) -> Tensor {
        match &self.slots[v.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(self.shapes[v.0].clone()),
        }
    }

    /// Moves the gradient out of its slot.
    pub fn take(&mut self, v: Var) -> Tensor {
        self.slots[v.0]
            .take()
            .unwrap_or_else(|| Tensor::zeros(self.shapes[v.0].clone()))
    }
}

/// `(rows, cols)` view of a rank-1 or rank-2 tensor.
fn row_view(t: &Tensor, what: &str) -> Result<(usize, usize)> {
    match t.shape() {
        [n] => Ok((1, *n)),
        [r, n] => Ok((*r, *n)),
        s => Err(config_err!("{what}: expected [n] or [B×n], got {s:?}")),
    }
}

fn row_shape(rank: usize, rows: usize, cols: usize) -> Vec<usize> {
    if rank == 1 { vec![cols] } else { vec![rows, cols] }
}

fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

const LN_2PI: f64 = 1.837_877_066_409_345_5;

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    /// Constant input; no gradient flows into it.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node { value: t, op: Op::Leaf, requires_grad: false });
        Var(self.nodes.len() - 1)
    }

    /// Differentiable leaf.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node { value: t, op: Op::Leaf, requires_grad: true });
        Var(self.nodes.len() - 1)
    }

    /// `x·wᵀ + b` for `x: [n] | [B×n]`, `w: [m×n]`, `b: [m]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xv = self.value(x);
        let (rows, n) = row_view(xv, "linear input")?;
        let rank = xv.rank();
        let (m, wn) = match self.value(w).shape() {
            [m, n] => (*m, *n),
            s => return Err(config_err!("linear weight must be [m×n], got {s:?}")),
        };
        if wn != n {
            return Err(config_err!("linear: input width {n} does not match weight [{m}×{wn}]"));
        }
        let mut out = vec![0.0; rows * m];
        if let Some(b) = b {
            let bv = self.value(b);
            if bv.shape() != [m] {
                return Err(config_err!("linear bias must be [{m}], got {:?}", bv.shape()));
            }
            for row in out.chunks_exact_mut(m) {
                row.copy_from_slice(bv.data());
            }
        }
        gemm(
            Mat::new(self.value(x).data(), rows, n),
            Mat::new(self.value(w).data(), m, n).t(),
            1.0,
            &mut out,
        );
        let value = Tensor::from_parts(row_shape(rank, rows, m), out);
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(value, Op::Linear { x, w, b, rows }, &inputs))
    }

    /// 3×3 cross-correlation with zero padding 1 (spatial size preserved).
    ///
    /// `x: [C×H×W] | [B×C×H×W]`, `kernels: [F×C×3×3]`, `bias: [F]`.
    pub fn conv2d(&mut self, x: Var, kernels: Var, bias: Var) -> Result<Var> {
        let xv = self.value(x);
        let (batch, c, h, w) = match xv.shape() {
            [c, h, w] => (1, *c, *h, *w),
            [b, c, h, w] => (*b, *c, *h, *w),
            s => return Err(config_err!("conv2d input must be [C×H×W] or [B×C×H×W], got {s:?}")),
        };
        let rank = xv.rank();
        let f = match self.value(kernels).shape() {
            [f, kc, 3, 3] if *kc == c => *f,
            [_, kc, 3, 3] => {
                return Err(config_err!("conv2d: input has {c} channels, kernels expect {kc}"))
            }
            s => return Err(config_err!("conv2d kernels must be [F×C×3×3], got {s:?}")),
        };
        if self.value(bias).shape() != [f] {
            return Err(config_err!("conv2d bias must be [{f}], got {:?}", self.value(bias).shape()));
        }
        let hw = h * w;
        let c9 = c * 9;
        // columns are rebuilt per sample (and again in backward) to keep the
        // working set cache-sized
        let mut col = vec![0.0; c9 * hw];
        let mut out = vec![0.0; batch * f * hw];
        {
            let xd = self.value(x).data();
            let kd = self.value(kernels).data();
            let bd = self.value(bias).data();
            for bi in 0..batch {
                im2col3(&xd[bi * c * hw..(bi + 1) * c * hw], c, h, w, &mut col);
                let o = &mut out[bi * f * hw..(bi + 1) * f * hw];
                for (fi, plane) in o.chunks_exact_mut(hw).enumerate() {
                    plane.fill(bd[fi]);
                }
                gemm(Mat::new(kd, f, c9), Mat::new(&col, c9, hw), 1.0, o);
            }
        }
        let shape = if rank == 3 { vec![f, h, w] } else { vec![batch, f, h, w] };
        let value = Tensor::from_parts(shape, out);
        Ok(self.push(value, Op::Conv2d { x, k: kernels, b: bias, batch, c, h, w }, &[x, kernels, bias]))
    }

    /// 2×2 max-pooling with stride 2 over the last two axes.
    ///
    /// Ties resolve to the lowest flat index inside the window.
    pub fn maxpool2d(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let s = xv.shape();
        if s.len() < 3 {
            return Err(config_err!("maxpool2d needs [..×H×W] with a channel axis, got {s:?}"));
        }
        let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
        if h < 2 || w < 2 {
            return Err(config_err!("maxpool2d needs H, W >= 2, got {h}×{w}"));
        }
        let planes: usize = s[..s.len() - 2].iter().product();
        let (oh, ow) = (h / 2, w / 2);
        let mut out = Vec::with_capacity(planes * oh * ow);
        let mut argmax = Vec::with_capacity(planes * oh * ow);
        let d = xv.data();
        for p in 0..planes {
            let base = p * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let i0 = base + 2 * oy * w + 2 * ox;
                    let mut best = i0;
                    for cand in [i0 + 1, i0 + w, i0 + w + 1] {
                        if d[cand] > d[best] {
                            best = cand;
                        }
                    }
                    out.push(d[best]);
                    argmax.push(best);
                }
            }
        }
        let mut shape = s[..s.len() - 2].to_vec();
        shape.extend([oh, ow]);
        let value = Tensor::from_parts(shape, out);
        Ok(self.push(value, Op::MaxPool { x, argmax }, &[x]))
    }

    fn map(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let xv = self.value(x);
        let data = xv.data().iter().map(|&v| f(v)).collect();
        let value = Tensor::from_parts(xv.shape().to_vec(), data);
        self.push(value, op, &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.map(x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.map(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.map(x, f64::tanh, Op::Tanh(x))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.map(x, |v| v * c, Op::Scale(x, c))
    }

    fn zip(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op, name: &str) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(config_err!("{name}: shapes {:?} and {:?} differ", av.shape(), bv.shape()));
        }
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::from_parts(av.shape().to_vec(), data);
        Ok(self.push(value, op, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, |x, y| x + y, Op::Add(a, b), "add")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, |x, y| x * y, Op::Mul(a, b), "mul")
    }

    /// Concatenates along the last axis; all parts need the same row count.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(config_err!("concat of nothing"));
        }
        let rank = self.value(parts[0]).rank();
        let (rows, _) = row_view(self.value(parts[0]), "concat")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let v = self.value(p);
            let (r, n) = row_view(v, "concat")?;
            if r != rows || v.rank() != rank {
                return Err(config_err!("concat: part shape {:?} does not match rows {rows}", v.shape()));
            }
            widths.push(n);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &n) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[r * n..(r + 1) * n]);
            }
        }
        let value = Tensor::from_parts(row_shape(rank, rows, total), out);
        let op = Op::Concat { parts: parts.iter().copied().zip(widths).collect(), rows };
        Ok(self.push(value, op, parts))
    }

    /// Columns `start..start + width` of every row.
    pub fn slice_cols(&mut self, x: Var, start: usize, width: usize) -> Result<Var> {
        let xv = self.value(x);
        let (rows, n) = row_view(xv, "slice_cols")?;
        if width == 0 || start + width > n {
            return Err(config_err!("slice_cols {start}..{} out of range for width {n}", start + width));
        }
        let d = xv.data();
        let mut out = Vec::with_capacity(rows * width);
        for r in 0..rows {
            out.extend_from_slice(&d[r * n + start..r * n + start + width]);
        }
        let value = Tensor::from_parts(row_shape(xv.rank(), rows, width), out);
        Ok(self.push(value, Op::SliceCols { x, start, in_cols: n }, &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape.to_vec())?;
        Ok(self.push(value, Op::Reshape(x), &[x]))
    }

    fn rowwise(&mut self, x: Var, log: bool) -> Result<Var> {
        let xv = self.value(x);
        let (_, n) = row_view(xv, "softmax")?;
        let mut out = xv.data().to_vec();
        for row in out.chunks_exact_mut(n) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
            if log {
                let lse = sum.ln();
                row.iter_mut().for_each(|v| *v = (*v - max) - lse);
            } else {
                row.iter_mut().for_each(|v| *v = (*v - max).exp() / sum);
            }
        }
        let value = Tensor::from_parts(xv.shape().to_vec(), out);
        let op = if log { Op::LogSoftmax(x) } else { Op::Softmax(x) };
        Ok(self.push(value, op, &[x]))
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        self.rowwise(x, false)
    }

    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        self.rowwise(x, true)
    }

    /// Picks `x[r, idx[r]]` per row, yielding `[rows]`; `None` rows give 0 and
    /// receive no gradient.
    pub fn pick(&mut self, x: Var, idx: &[Option<usize>]) -> Result<Var> {
        let xv = self.value(x);
        let (rows, n) = row_view(xv, "pick")?;
        if idx.len() != rows {
            return Err(config_err!("pick: {} indices for {rows} rows", idx.len()));
        }
        let mut out = Vec::with_capacity(rows);
        for (r, i) in idx.iter().enumerate() {
            match i {
                Some(i) if *i >= n => {
                    return Err(Error::Data(format!("pick: class {i} outside 0..{n}")));
                }
                Some(i) => out.push(xv.data()[r * n + i]),
                None => out.push(0.0),
            }
        }
        let value = Tensor::from_parts(vec![rows], out);
        Ok(self.push(value, Op::Pick { x, idx: idx.to_vec(), cols: n }, &[x]))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    /// Per-row negative log density of a 2-D Gaussian.
    ///
    /// Each row of `params: [B×5]` is `(μ₁, μ₂, a, l₂₁, c)` describing
    /// `Σ = LLᵀ` with `L = [[eᵃ, 0], [l₂₁, eᶜ]]`; `targets` holds the points.
    pub fn gaussian_nll2(&mut self, params: Var, targets: &[[f64; 2]]) -> Result<Var> {
        let pv = self.value(params);
        let (rows, n) = row_view(pv, "gaussian_nll2")?;
        if n != 5 || rows != targets.len() {
            return Err(config_err!(
                "gaussian_nll2: params {:?} with {} targets",
                pv.shape(),
                targets.len()
            ));
        }
        let out = pv
            .data()
            .chunks_exact(5)
            .zip(targets)
            .map(|(p, x)| {
                let (z1, z2) = whiten(p, x);
                p[2] + p[4] + 0.5 * (z1 * z1 + z2 * z2) + LN_2PI
            })
            .collect();
        let value = Tensor::from_parts(vec![rows], out);
        Ok(self.push(value, Op::GaussNll2 { params, targets: targets.to_vec() }, &[params]))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut slots: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        slots[loss.0] = Some(Tensor::full(lv.shape().to_vec(), 1.0));
        for i in (0..=loss.0).rev() {
            let Some(g) = slots[i].take() else { continue };
            self.backprop_node(i, &g, &mut slots);
            if matches!(self.nodes[i].op, Op::Leaf) {
                slots[i] = Some(g);
            }
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { slots, shapes })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn accumulate(&self, slots: &mut [Option<Tensor>], v: Var, g: Tensor) {
        match &mut slots[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn elementwise_grad(&self, slots: &mut [Option<Tensor>], x: Var, g: &Tensor, f: impl Fn(f64, f64) -> f64) {
        if !self.wants(x) {
            return;
        }
        let data = g.data().iter().zip(self.value(x).data()).map(|(&gv, &xv)| f(gv, xv)).collect();
        self.accumulate(slots, x, Tensor::from_parts(g.shape().to_vec(), data));
    }

    fn backprop_node(&self, i: usize, g: &Tensor, slots: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        if !node.requires_grad {
            return;
        }
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Linear { x, w, b, rows } => {
                let (m, n) = (self.value(*w).shape()[0], self.value(*w).shape()[1]);
                if self.wants(*x) {
                    let mut dx = vec![0.0; rows * n];
                    gemm(Mat::new(g.data(), *rows, m), Mat::new(self.value(*w).data(), m, n), 0.0, &mut dx);
                    self.accumulate(slots, *x, Tensor::from_parts(self.value(*x).shape().to_vec(), dx));
                }
                if self.wants(*w) {
                    let mut dw = vec![0.0; m * n];
                    gemm(Mat::new(g.data(), *rows, m).t(), Mat::new(self.value(*x).data(), *rows, n), 0.0, &mut dw);
                    self.accumulate(slots, *w, Tensor::from_parts(vec![m, n], dw));
                }
                if let Some(b) = b.filter(|b| self.wants(*b)) {
                    let mut db = vec![0.0; m];
                    for row in g.data().chunks_exact(m) {
                        db.iter_mut().zip(row).for_each(|(d, v)| *d += v);
                    }
                    self.accumulate(slots, b, Tensor::from_parts(vec![m], db));
                }
            }
            Op::Conv2d { x, k, b, batch, c, h, w } => {
                let (c, hw) = (*c, h * w);
                let c9 = c * 9;
                let f = self.value(*k).shape()[0];
                let gd = g.data();
                if self.wants(*k) {
                    let xd = self.value(*x).data();
                    let mut dk = vec![0.0; f * c9];
                    let mut col = vec![0.0; c9 * hw];
                    for bi in 0..*batch {
                        im2col3(&xd[bi * c * hw..(bi + 1) * c * hw], c, *h, *w, &mut col);
                        gemm(
                            Mat::new(&gd[bi * f * hw..(bi + 1) * f * hw], f, hw),
                            Mat::new(&col, c9, hw).t(),
                            1.0,
                            &mut dk,
                        );
                    }
                    self.accumulate(slots, *k, Tensor::from_parts(self.value(*k).shape().to_vec(), dk));
                }
                if self.wants(*b) {
                    let mut db = vec![0.0; f];
                    for (pi, plane) in gd.chunks_exact(hw).enumerate() {
                        db[pi % f] += plane.iter().sum::<f64>();
                    }
                    self.accumulate(slots, *b, Tensor::from_parts(vec![f], db));
                }
                if self.wants(*x) {
                    let kd = self.value(*k).data();
                    let mut dx = vec![0.0; batch * c * hw];
                    let mut dcols = vec![0.0; c9 * hw];
                    for bi in 0..*batch {
                        gemm(
                            Mat::new(kd, f, c9).t(),
                            Mat::new(&gd[bi * f * hw..(bi + 1) * f * hw], f, hw),
                            0.0,
                            &mut dcols,
                        );
                        col2im3(&dcols, c, *h, *w, &mut dx[bi * c * hw..(bi + 1) * c * hw]);
                    }
                    self.accumulate(slots, *x, Tensor::from_parts(self.value(*x).shape().to_vec(), dx));
                }
            }
            Op::MaxPool { x, argmax } => {
                if self.wants(*x) {
                    let mut dx = vec![0.0; self.value(*x).len()];
                    for (&src, &gv) in argmax.iter().zip(g.data()) {
                        dx[src] += gv;
                    }
                    self.accumulate(slots, *x, Tensor::from_parts(self.value(*x).shape().to_vec(), dx));
                }
            }
            Op::Relu(x) => self.elementwise_grad(slots, *x, g, |gv, xv| if xv > 0.0 { gv } else { 0.0 }),
            Op::Sigmoid(x) => {
                if self.wants(*x) {
                    let data = g.data().iter().zip(y.data()).map(|(gv, s)| gv * s * (1.0 - s)).collect();
                    self.accumulate(slots, *x, Tensor::from_parts(y.shape().to_vec(), data));
                }
            }
            Op::Tanh(x) => {
                if self.wants(*x) {
                    let data = g.data().iter().zip(y.data()).map(|(gv, t)| gv * (1.0 - t * t)).collect();
                    self.accumulate(slots, *x, Tensor::from_parts(y.shape().to_vec(), data));
                }
            }
            Op::Scale(x, c) => self.elementwise_grad(slots, *x, g, |gv, _| gv * c),
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if self.wants(v) {
                        self.accumulate(slots, v, g.clone());
                    }
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if self.wants(*a) {
                    let data = g.data().iter().zip(bv).map(|(gv, b)| gv * b).collect();
                    self.accumulate(slots, *a, Tensor::from_parts(g.shape().to_vec(), data));
                }
                if self.wants(*b) {
                    let data = g.data().iter().zip(av).map(|(gv, a)| gv * a).collect();
                    self.accumulate(slots, *b, Tensor::from_parts(g.shape().to_vec(), data));
                }
            }
            Op::Concat { parts, rows } => {
                let total: usize = parts.iter().map(|(_, n)| n).sum();
                let mut offset = 0;
                for &(p, n) in parts {
                    if self.wants(p) {
                        let mut d = Vec::with_capacity(rows * n);
                        for r in 0..*rows {
                            d.extend_from_slice(&g.data()[r * total + offset..r * total + offset + n]);
                        }
                        self.accumulate(slots, p, Tensor::from_parts(self.value(p).shape().to_vec(), d));
                    }
                    offset += n;
                }
            }
            Op::SliceCols { x, start, in_cols } => {
                if self.wants(*x) {
                    let width = y.shape()[y.rank() - 1];
                    let mut d = vec![0.0; self.value(*x).len()];
                    for (r, row) in g.data().chunks_exact(width).enumerate() {
                        d[r * in_cols + start..r * in_cols + start + width].copy_from_slice(row);
                    }
                    self.accumulate(slots, *x, Tensor::from_parts(self.value(*x).shape().to_vec(), d));
                }
            }
            Op::Reshape(x) => {
                if self.wants(*x) {
                    let d = g.data().to_vec();
                    self.accumulate(slots, *x, Tensor::from_parts(self.value(*x).shape().to_vec(), d));
                }
            }
            Op::Softmax(x) => {
                if self.wants(*x) {
                    let n = y.shape()[y.rank() - 1];
                    let mut d = Vec::with_capacity(y.len());
                    for (yr, gr) in y.data().chunks_exact(n).zip(g.data().chunks_exact(n)) {
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        d.extend(yr.iter().zip(gr).map(|(yv, gv)| yv * (gv - dot)));
                    }
                    self.accumulate(slots, *x, Tensor::from_parts(y.shape().to_vec(), d));
                }
            }
            Op::LogSoftmax(x) => {
                if self.wants(*x) {
                    let n = y.shape()[y.rank() - 1];
                    let mut d = Vec::with_capacity(y.len());
                    for (yr, gr) in y.data().chunks_exact(n).zip(g.data().chunks_exact(n)) {
                        let gs: f64 = gr.iter().sum();
                        d.extend(yr.iter().zip(gr).map(|(ly, gv)| gv - ly.exp() * gs));
                    }
                    self.accumulate(slots, *x, Tensor::from_parts(y.shape().to_vec(), d));
                }
            }
            Op::Pick { x, idx, cols } => {
                if self.wants(*x) {
                    let mut d = vec![0.0; self.value(*x).len()];
                    for (r, (i, gv)) in idx.iter().zip(g.data()).enumerate() {
                        if let Some(i) = i {
                            d[r * cols + i] += gv;
                        }
                    }
                    self.accumulate(slots, *x, Tensor::from_parts(self.value(*x).shape().to_vec(), d));
                }
            }
            Op::Sum(x) => {
                if self.wants(*x) {
                    let s = self.value(*x).shape().to_vec();
                    self.accumulate(slots, *x, Tensor::full(s, g.item()));
                }
            }
            Op::GaussNll2 { params, targets } => {
                if self.wants(*params) {
                    let pv = self.value(*params);
                    let mut d = Vec::with_capacity(pv.len());
                    for ((p, t), gv) in pv.data().chunks_exact(5).zip(targets).zip(g.data()) {
                        let (z1, z2) = whiten(p, t);
                        let (l11, l21, l22) = (p[2].exp(), p[3], p[4].exp());
                        d.extend([
                            gv * (-z1 / l11 + z2 * l21 / (l11 * l22)),
                            gv * (-z2 / l22),
                            gv * (1.0 - z1 * z1 + z2 * l21 * z1 / l22),
                            gv * (-z2 * z1 / l22),
                            gv * (1.0 - z2 * z2),
                        ]);
                    }
                    self.accumulate(slots, *params, Tensor::from_parts(pv.shape().to_vec(), d));
                }
            }
        }
    }
}

/// `L⁻¹(x − μ)` for one `(μ₁, μ₂, a, l₂₁, c)` row.
fn whiten(p: &[f64], x: &[f64; 2]) -> (f64, f64) {
    let z1 = (x[0] - p[0]) / p[2].exp();
    let z2 = (x[1] - p[1] - p[3] * z1) / p[4].exp();
    (z1, z2)
}
