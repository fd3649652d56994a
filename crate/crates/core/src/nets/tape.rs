//! Reverse-mode automatic differentiation over small dense tensors.
//!
//! Every value is a row-major `rows x cols` matrix: signals are `channels x
//! time`, dense vectors are `n x 1`, scalars are `1 x 1`. A graph is recorded
//! eagerly on a [`Tape`]; [`Tape::backward`] then walks it once in reverse.
//! Nodes that do not depend on anything marked differentiable are never
//! visited.

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len(), "tensor data does not match {rows}x{cols}");
        Tensor { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor::new(rows, cols, vec![0.0; rows * cols])
    }

    /// A single-channel signal.
    pub fn row(data: Vec<f64>) -> Self {
        let n = data.len();
        Tensor::new(1, n, data)
    }

    /// A dense column vector.
    pub fn column(data: Vec<f64>) -> Self {
        let n = data.len();
        Tensor::new(n, 1, data)
    }

    pub fn scalar(v: f64) -> Self {
        Tensor::new(1, 1, vec![v])
    }

    fn same_shape(&self, other: &Tensor) -> bool {
        self.rows == other.rows && self.cols == other.cols
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// Geometry of a 1-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub kernel: usize,
    pub dilation: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeometry {
    /// Stride-1, length-preserving geometry for an odd kernel.
    pub fn same(kernel: usize, dilation: usize) -> Self {
        debug_assert!(kernel % 2 == 1);
        ConvGeometry {
            kernel,
            dilation,
            stride: 1,
            pad: dilation * (kernel - 1) / 2,
        }
    }

    pub fn pointwise() -> Self {
        ConvGeometry::same(1, 1)
    }

    pub fn out_len(&self, len: usize) -> Option<usize> {
        let span = self.dilation * (self.kernel - 1) + 1;
        let padded = len + 2 * self.pad;
        (padded >= span).then(|| (padded - span) / self.stride + 1)
    }
}

#[derive(Clone, Debug)]
enum Op {
    /// Leaf without gradient.
    Constant,
    /// Leaf with gradient.
    Leaf,
    Conv {
        x: Var,
        w: Var,
        b: Var,
        geo: ConvGeometry,
    },
    Add(Var, Var),
    /// `(C, L) + (C, 1)` broadcast along time.
    AddColumn(Var, Var),
    Relu(Var),
    Scale(Var, f64),
    ConcatRows(Vec<Var>),
    MeanCols(Var),
    /// `mean |a - target|`.
    L1Mean(Var, Vec<f64>),
    /// `(a - target)^2` for a scalar `a`.
    SquaredError(Var, f64),
    /// `sum a * weights`.
    WeightedSum(Var, Vec<f64>),
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Default, Debug)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of one scalar with respect to every differentiable node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient with respect to `v`, or `None` when `v` is not differentiable
    /// or does not influence the output.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
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

    /// The single entry of a `1 x 1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        let t = self.value(v);
        debug_assert_eq!(t.data.len(), 1);
        t.data[0]
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Constant, false)
    }

    /// A differentiable leaf.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn conv(&mut self, x: Var, w: Var, b: Var, geo: ConvGeometry) -> Result<Var> {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        let (cin, len) = (xv.rows, xv.cols);
        let cout = wv.rows;
        if wv.cols != cin * geo.kernel || bv.rows != cout || bv.cols != 1 {
            return Err(Error::shape(format!(
                "conv: input {cin}x{len}, weight {}x{}, bias {}x{}, kernel {}",
                wv.rows, wv.cols, bv.rows, bv.cols, geo.kernel
            )));
        }
        let out_len = geo
            .out_len(len)
            .ok_or_else(|| Error::shape(format!("conv: input length {len} shorter than the kernel span")))?;
        let mut out = Vec::with_capacity(cout * out_len);
        for o in 0..cout {
            out.extend(std::iter::repeat_n(bv.data[o], out_len));
        }
        for o in 0..cout {
            let dst = &mut out[o * out_len..(o + 1) * out_len];
            for i in 0..cin {
                let src = &xv.data[i * len..(i + 1) * len];
                for k in 0..geo.kernel {
                    let wk = wv.data[o * cin * geo.kernel + i * geo.kernel + k];
                    if wk == 0.0 {
                        continue;
                    }
                    let offset = (k * geo.dilation) as isize - geo.pad as isize;
                    for_each_tap(out_len, len, geo.stride, offset, |j, p| dst[j] += wk * src[p]);
                }
            }
        }
        let needs = self.needs(x) || self.needs(w) || self.needs(b);
        Ok(self.push(Tensor::new(cout, out_len, out), Op::Conv { x, w, b, geo }, needs))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if !av.same_shape(bv) {
            return Err(Error::shape(format!(
                "add: {}x{} vs {}x{}",
                av.rows, av.cols, bv.rows, bv.cols
            )));
        }
        let data = av.data.iter().zip(&bv.data).map(|(x, y)| x + y).collect();
        let t = Tensor::new(av.rows, av.cols, data);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(t, Op::Add(a, b), needs))
    }

    pub fn add_column(&mut self, a: Var, col: Var) -> Result<Var> {
        let (av, cv) = (self.value(a), self.value(col));
        if cv.rows != av.rows || cv.cols != 1 {
            return Err(Error::shape(format!(
                "add_column: {}x{} plus {}x{}",
                av.rows, av.cols, cv.rows, cv.cols
            )));
        }
        let mut data = av.data.clone();
        for (r, chunk) in data.chunks_mut(av.cols).enumerate() {
            let c = cv.data[r];
            chunk.iter_mut().for_each(|v| *v += c);
        }
        let t = Tensor::new(av.rows, av.cols, data);
        let needs = self.needs(a) || self.needs(col);
        Ok(self.push(t, Op::AddColumn(a, col), needs))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let t = Tensor::new(av.rows, av.cols, av.data.iter().map(|v| v.max(0.0)).collect());
        let needs = self.needs(a);
        self.push(t, Op::Relu(a), needs)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let av = self.value(a);
        let t = Tensor::new(av.rows, av.cols, av.data.iter().map(|v| v * s).collect());
        let needs = self.needs(a);
        self.push(t, Op::Scale(a, s), needs)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = self.value(parts[0]).cols;
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let pv = self.value(p);
            if pv.cols != cols {
                return Err(Error::shape(format!("concat: {} vs {} columns", pv.cols, cols)));
            }
            rows += pv.rows;
            data.extend_from_slice(&pv.data);
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(Tensor::new(rows, cols, data), Op::ConcatRows(parts.to_vec()), needs))
    }

    pub fn mean_cols(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let data = av
            .data
            .chunks(av.cols)
            .map(|r| r.iter().sum::<f64>() / av.cols as f64)
            .collect();
        let t = Tensor::column(data);
        let needs = self.needs(a);
        self.push(t, Op::MeanCols(a), needs)
    }

    pub fn l1_mean(&mut self, a: Var, target: &[f64]) -> Result<Var> {
        let av = self.value(a);
        if av.data.len() != target.len() {
            return Err(Error::shape(format!(
                "l1: prediction has {} values, target {}",
                av.data.len(),
                target.len()
            )));
        }
        let sum: f64 = av.data.iter().zip(target).map(|(p, q)| (p - q).abs()).sum();
        let t = Tensor::scalar(sum / target.len() as f64);
        let needs = self.needs(a);
        Ok(self.push(t, Op::L1Mean(a, target.to_vec()), needs))
    }

    pub fn squared_error(&mut self, a: Var, target: f64) -> Var {
        let v = self.scalar(a) - target;
        let needs = self.needs(a);
        self.push(Tensor::scalar(v * v), Op::SquaredError(a, target), needs)
    }

    pub fn weighted_sum(&mut self, a: Var, weights: &[f64]) -> Result<Var> {
        let av = self.value(a);
        if av.data.len() != weights.len() {
            return Err(Error::shape("weighted_sum: weight count"));
        }
        let s: f64 = av.data.iter().zip(weights).map(|(x, w)| x * w).sum();
        let needs = self.needs(a);
        Ok(self.push(Tensor::scalar(s), Op::WeightedSum(a, weights.to_vec()), needs))
    }

    /// Gradients of the scalar `root` with respect to every upstream node.
    pub fn backward(&self, root: Var) -> Gradients {
        let mut grads: Vec<Option<Tensor>> = vec![None; root.0 + 1];
        assert_eq!(self.value(root).data.len(), 1, "backward needs a scalar root");
        grads[root.0] = Some(Tensor::scalar(1.0));
        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        match &node.op {
            Op::Constant | Op::Leaf => {}
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if self.needs(v) {
                        accumulate(grads, v, self.value(v), |dst| {
                            dst.iter_mut().zip(&g.data).for_each(|(d, s)| *d += s)
                        });
                    }
                }
            }
            Op::AddColumn(a, col) => {
                if self.needs(*a) {
                    accumulate(grads, *a, self.value(*a), |dst| {
                        dst.iter_mut().zip(&g.data).for_each(|(d, s)| *d += s)
                    });
                }
                if self.needs(*col) {
                    accumulate(grads, *col, self.value(*col), |dst| {
                        for (d, row) in dst.iter_mut().zip(g.data.chunks(g.cols)) {
                            *d += row.iter().sum::<f64>();
                        }
                    });
                }
            }
            Op::Relu(a) => {
                if self.needs(*a) {
                    let input = self.value(*a);
                    accumulate(grads, *a, input, |dst| {
                        for ((d, s), x) in dst.iter_mut().zip(&g.data).zip(&input.data) {
                            if *x > 0.0 {
                                *d += s;
                            }
                        }
                    });
                }
            }
            Op::Scale(a, s) => {
                if self.needs(*a) {
                    accumulate(grads, *a, self.value(*a), |dst| {
                        dst.iter_mut().zip(&g.data).for_each(|(d, v)| *d += s * v)
                    });
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let pv = self.value(p);
                    let n = pv.data.len();
                    if self.needs(p) {
                        let src = &g.data[offset..offset + n];
                        accumulate(grads, p, pv, |dst| dst.iter_mut().zip(src).for_each(|(d, v)| *d += v));
                    }
                    offset += n;
                }
            }
            Op::MeanCols(a) => {
                if self.needs(*a) {
                    let av = self.value(*a);
                    let inv = 1.0 / av.cols as f64;
                    accumulate(grads, *a, av, |dst| {
                        for (row, s) in dst.chunks_mut(av.cols).zip(&g.data) {
                            row.iter_mut().for_each(|d| *d += s * inv);
                        }
                    });
                }
            }
            Op::L1Mean(a, target) => {
                if self.needs(*a) {
                    let av = self.value(*a);
                    let scale = g.data[0] / target.len() as f64;
                    accumulate(grads, *a, av, |dst| {
                        for ((d, p), q) in dst.iter_mut().zip(&av.data).zip(target) {
                            let diff = p - q;
                            if diff > 0.0 {
                                *d += scale;
                            } else if diff < 0.0 {
                                *d -= scale;
                            }
                        }
                    });
                }
            }
            Op::SquaredError(a, target) => {
                if self.needs(*a) {
                    let d = 2.0 * (self.scalar(*a) - target) * g.data[0];
                    accumulate(grads, *a, self.value(*a), |dst| dst[0] += d);
                }
            }
            Op::WeightedSum(a, weights) => {
                if self.needs(*a) {
                    let s = g.data[0];
                    accumulate(grads, *a, self.value(*a), |dst| {
                        dst.iter_mut().zip(weights).for_each(|(d, w)| *d += s * w)
                    });
                }
            }
            Op::Conv { x, w, b, geo } => self.conv_backward(*x, *w, *b, *geo, g, grads),
        }
    }

    fn conv_backward(&self, x: Var, w: Var, b: Var, geo: ConvGeometry, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let (xv, wv) = (self.value(x), self.value(w));
        let (cin, len) = (xv.rows, xv.cols);
        let (cout, out_len) = (g.rows, g.cols);
        if self.needs(b) {
            accumulate(grads, b, self.value(b), |dst| {
                for (d, row) in dst.iter_mut().zip(g.data.chunks(out_len)) {
                    *d += row.iter().sum::<f64>();
                }
            });
        }
        if self.needs(w) {
            accumulate(grads, w, wv, |dw| {
                for o in 0..cout {
                    let go = &g.data[o * out_len..(o + 1) * out_len];
                    for i in 0..cin {
                        let src = &xv.data[i * len..(i + 1) * len];
                        for k in 0..geo.kernel {
                            let offset = (k * geo.dilation) as isize - geo.pad as isize;
                            let mut acc = 0.0;
                            for_each_tap(out_len, len, geo.stride, offset, |j, p| acc += go[j] * src[p]);
                            dw[o * cin * geo.kernel + i * geo.kernel + k] += acc;
                        }
                    }
                }
            });
        }
        if self.needs(x) {
            accumulate(grads, x, xv, |dx| {
                for o in 0..cout {
                    let go = &g.data[o * out_len..(o + 1) * out_len];
                    for i in 0..cin {
                        let dst = &mut dx[i * len..(i + 1) * len];
                        for k in 0..geo.kernel {
                            let wk = wv.data[o * cin * geo.kernel + i * geo.kernel + k];
                            if wk == 0.0 {
                                continue;
                            }
                            let offset = (k * geo.dilation) as isize - geo.pad as isize;
                            for_each_tap(out_len, len, geo.stride, offset, |j, p| dst[p] += wk * go[j]);
                        }
                    }
                }
            });
        }
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, like: &Tensor, f: impl FnOnce(&mut [f64])) {
    let slot = grads[v.0].get_or_insert_with(|| Tensor::zeros(like.rows, like.cols));
    f(&mut slot.data);
}

/// Calls `f(j, p)` for every output index `j` whose input tap
/// `p = j * stride + offset` lands inside `0..len`.
#[inline]
fn for_each_tap(out_len: usize, len: usize, stride: usize, offset: isize, mut f: impl FnMut(usize, usize)) {
    if stride == 1 {
        let lo = (-offset).max(0) as usize;
        let hi = ((len as isize - offset).min(out_len as isize)).max(0) as usize;
        for j in lo..hi.max(lo) {
            f(j, (j as isize + offset) as usize);
        }
    } else {
        for j in 0..out_len {
            let p = (j * stride) as isize + offset;
            if p >= 0 && (p as usize) < len {
                f(j, p as usize);
            }
        }
    }
}
