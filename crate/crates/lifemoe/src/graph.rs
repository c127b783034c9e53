//! Reverse-mode autodiff over `RealArray` values.
//!
//! A `Graph` is a per-forward-pass tape: leaves are inserted for parameters
//! and constants, ops append nodes, and `backward` walks the tape in reverse
//! accumulating gradients. Every analytic gradient here is covered by the
//! finite-difference checks in this module's tests and by the acceptance
//! gradient suite.

use crate::numerics::{
    matmul_kernel, mean_rows_kernel, softmax_rows_kernel, transpose_kernel, RealArray,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    ConcatRows(Vec<Var>),
    SelectCols(Var, Vec<usize>),
    SoftmaxRows(Var),
    Tanh(Var),
    Silu(Var),
    SumAll(Var),
    MeanAll(Var),
    AddRowBias(Var, Var),
    ScaleRows(Var, Var),
    ScaleByElem(Var, Var, usize),
    MeanRows(Var),
    Conv2d { x: Var, w: Var, b: Var, stride: usize },
    Upsample2x(Var),
    AddChanBias(Var, Var),
}

struct Node {
    value: RealArray,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of a scalar loss w.r.t. every grad-requiring node.
pub struct Gradients {
    grads: Vec<Option<RealArray>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&RealArray> {
        self.grads[v.0].as_ref()
    }

    /// Gradient of a leaf, zero-filled when the loss did not touch it.
    pub fn of(&self, v: Var, shape: &[usize]) -> RealArray {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => RealArray::zeros(shape),
        }
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: RealArray, op: Op, needs_grad: bool) -> Var {
        debug_assert!(value.all_finite(), "non-finite node value");
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &RealArray {
        &self.nodes[v.0].value
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        debug_assert_eq!(self.nodes[v.0].value.len(), 1);
        self.nodes[v.0].value.data()[0]
    }

    /// Trainable leaf.
    pub fn leaf(&mut self, value: RealArray) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Non-trainable input.
    pub fn constant(&mut self, value: RealArray) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).shape(), self.value(b).shape(), "add shape mismatch");
        let v = zip_map(self.value(a), self.value(b), |x, y| x + y);
        let ng = self.needs(a) || self.needs(b);
        self.push(v, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).shape(), self.value(b).shape(), "sub shape mismatch");
        let v = zip_map(self.value(a), self.value(b), |x, y| x - y);
        let ng = self.needs(a) || self.needs(b);
        self.push(v, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).shape(), self.value(b).shape(), "mul shape mismatch");
        let v = zip_map(self.value(a), self.value(b), |x, y| x * y);
        let ng = self.needs(a) || self.needs(b);
        self.push(v, Op::Mul(a, b), ng)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = map(self.value(a), |x| x * c);
        let ng = self.needs(a);
        self.push(v, Op::Scale(a, c), ng)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = matmul_kernel(self.value(a), self.value(b));
        let ng = self.needs(a) || self.needs(b);
        self.push(v, Op::MatMul(a, b), ng)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = transpose_kernel(self.value(a));
        let ng = self.needs(a);
        self.push(v, Op::Transpose(a), ng)
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Var {
        let v = self.value(a).reshaped(shape);
        let ng = self.needs(a);
        self.push(v, Op::Reshape(a), ng)
    }

    /// Stack 2-D blocks that share a column count.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        let mut ng = false;
        for &p in parts {
            let pv = self.value(p);
            assert_eq!(pv.cols(), cols, "concat_rows column mismatch");
            rows += pv.rows();
            data.extend_from_slice(pv.data());
            ng |= self.needs(p);
        }
        self.push(RealArray::new(vec![rows, cols], data), Op::ConcatRows(parts.to_vec()), ng)
    }

    /// Column gather on a 2-D array.
    pub fn select_cols(&mut self, a: Var, indices: &[usize]) -> Var {
        let av = self.value(a);
        let (r, c) = (av.rows(), av.cols());
        let mut data = Vec::with_capacity(r * indices.len());
        for i in 0..r {
            for &j in indices {
                assert!(j < c, "select_cols index {j} out of {c}");
                data.push(av.at2(i, j));
            }
        }
        let v = RealArray::new(vec![r, indices.len()], data);
        let ng = self.needs(a);
        self.push(v, Op::SelectCols(a, indices.to_vec()), ng)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let v = softmax_rows_kernel(self.value(a));
        let ng = self.needs(a);
        self.push(v, Op::SoftmaxRows(a), ng)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = map(self.value(a), f64::tanh);
        let ng = self.needs(a);
        self.push(v, Op::Tanh(a), ng)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let v = map(self.value(a), |x| x * sigmoid(x));
        let ng = self.needs(a);
        self.push(v, Op::Silu(a), ng)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s: f64 = self.value(a).data().iter().sum();
        let ng = self.needs(a);
        self.push(RealArray::scalar(s), Op::SumAll(a), ng)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s: f64 = self.value(a).data().iter().sum::<f64>() / n;
        let ng = self.needs(a);
        self.push(RealArray::scalar(s), Op::MeanAll(a), ng)
    }

    /// `m[r×c] + bias` per row; bias is 1-D of length `c`.
    pub fn add_row_bias(&mut self, m: Var, bias: Var) -> Var {
        let mv = self.value(m);
        let bv = self.value(bias);
        let (r, c) = (mv.rows(), mv.cols());
        assert_eq!(bv.len(), c, "row bias length mismatch");
        let mut data = mv.data().to_vec();
        for i in 0..r {
            for (d, b) in data[i * c..(i + 1) * c].iter_mut().zip(bv.data()) {
                *d += b;
            }
        }
        let ng = self.needs(m) || self.needs(bias);
        self.push(RealArray::new(vec![r, c], data), Op::AddRowBias(m, bias), ng)
    }

    /// Row `i` of `m` scaled by `v[i]`; `v` is 1-D of length `rows`.
    pub fn scale_rows(&mut self, m: Var, v: Var) -> Var {
        let mv = self.value(m);
        let vv = self.value(v);
        let (r, c) = (mv.rows(), mv.cols());
        assert_eq!(vv.len(), r, "row scale length mismatch");
        let mut data = mv.data().to_vec();
        for i in 0..r {
            let s = vv.data()[i];
            for d in data[i * c..(i + 1) * c].iter_mut() {
                *d *= s;
            }
        }
        let ng = self.needs(m) || self.needs(v);
        self.push(RealArray::new(vec![r, c], data), Op::ScaleRows(m, v), ng)
    }

    /// `m` scaled by the `idx`-th element of `s` (a graph value).
    pub fn scale_by_elem(&mut self, m: Var, s: Var, idx: usize) -> Var {
        let c = self.value(s).data()[idx];
        let v = map(self.value(m), |x| x * c);
        let ng = self.needs(m) || self.needs(s);
        self.push(v, Op::ScaleByElem(m, s, idx), ng)
    }

    /// `[L×d] -> [1×d]` row mean.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let v = mean_rows_kernel(self.value(a));
        let ng = self.needs(a);
        self.push(v, Op::MeanRows(a), ng)
    }

    /// 2-D convolution with odd square kernels and same-padding `k/2`.
    /// `x: [ci,h,w]`, `w: [co,ci,k,k]`, `b: [co]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize) -> Var {
        let v = conv2d_forward(self.value(x), self.value(w), self.value(b), stride);
        let ng = self.needs(x) || self.needs(w) || self.needs(b);
        self.push(v, Op::Conv2d { x, w, b, stride }, ng)
    }

    /// Nearest-neighbor 2x upsampling of `[c,h,w]`.
    pub fn upsample2x(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let (c, h, w) = (av.shape()[0], av.shape()[1], av.shape()[2]);
        let mut data = vec![0.0; c * h * 2 * w * 2];
        for ch in 0..c {
            for y in 0..2 * h {
                for x in 0..2 * w {
                    data[ch * 4 * h * w + y * 2 * w + x] =
                        av.data()[ch * h * w + (y / 2) * w + x / 2];
                }
            }
        }
        let ng = self.needs(a);
        self.push(RealArray::new(vec![c, 2 * h, 2 * w], data), Op::Upsample2x(a), ng)
    }

    /// `x[c,h,w] + v[c]` broadcast over the spatial grid.
    pub fn add_chan_bias(&mut self, x: Var, v: Var) -> Var {
        let xv = self.value(x);
        let vv = self.value(v);
        let (c, h, w) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        assert_eq!(vv.len(), c, "channel bias length mismatch");
        let mut data = xv.data().to_vec();
        for ch in 0..c {
            let bias = vv.data()[ch];
            for d in data[ch * h * w..(ch + 1) * h * w].iter_mut() {
                *d += bias;
            }
        }
        let ng = self.needs(x) || self.needs(v);
        self.push(RealArray::new(vec![c, h, w], data), Op::AddChanBias(x, v), ng)
    }

    /// Reverse pass from a scalar loss. Returns gradients for every node that
    /// required them.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.nodes[loss.0].value.len(), 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<RealArray>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(RealArray::scalar(1.0));

        for id in (0..=loss.0).rev() {
            if !self.nodes[id].needs_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.accumulate_parents(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Gradients { grads }
    }

    fn accumulate_parents(&self, id: usize, g: &RealArray, grads: &mut [Option<RealArray>]) {
        let node = &self.nodes[id];
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc(*a, g.clone(), grads);
                self.acc(*b, g.clone(), grads);
            }
            Op::Sub(a, b) => {
                self.acc(*a, g.clone(), grads);
                self.acc(*b, map(g, |x| -x), grads);
            }
            Op::Mul(a, b) => {
                self.acc(*a, zip_map(g, self.value(*b), |g, b| g * b), grads);
                self.acc(*b, zip_map(g, self.value(*a), |g, a| g * a), grads);
            }
            Op::Scale(a, c) => {
                let c = *c;
                self.acc(*a, map(g, |x| x * c), grads);
            }
            Op::MatMul(a, b) => {
                if self.needs(*a) {
                    let bt = transpose_kernel(self.value(*b));
                    self.acc(*a, matmul_kernel(g, &bt), grads);
                }
                if self.needs(*b) {
                    let at = transpose_kernel(self.value(*a));
                    self.acc(*b, matmul_kernel(&at, g), grads);
                }
            }
            Op::Transpose(a) => {
                self.acc(*a, transpose_kernel(g), grads);
            }
            Op::Reshape(a) => {
                let shape = self.value(*a).shape().to_vec();
                self.acc(*a, g.reshaped(shape), grads);
            }
            Op::ConcatRows(parts) => {
                let cols = g.cols();
                let mut row = 0;
                for &p in parts {
                    let r = self.value(p).rows();
                    if self.needs(p) {
                        let slice = g.data()[row * cols..(row + r) * cols].to_vec();
                        self.acc(p, RealArray::new(vec![r, cols], slice), grads);
                    }
                    row += r;
                }
            }
            Op::SelectCols(a, indices) => {
                let av = self.value(*a);
                let mut da = RealArray::zeros(av.shape());
                for i in 0..g.rows() {
                    for (k, &j) in indices.iter().enumerate() {
                        let v = da.at2(i, j) + g.at2(i, k);
                        da.set2(i, j, v);
                    }
                }
                self.acc(*a, da, grads);
            }
            Op::SoftmaxRows(a) => {
                let y = self.value(id_var(id));
                let (r, c) = (y.rows(), y.cols());
                let mut da = RealArray::zeros(&[r, c]);
                for i in 0..r {
                    let dot: f64 =
                        (0..c).map(|j| g.at2(i, j) * y.at2(i, j)).sum();
                    for j in 0..c {
                        da.set2(i, j, y.at2(i, j) * (g.at2(i, j) - dot));
                    }
                }
                self.acc(*a, da, grads);
            }
            Op::Tanh(a) => {
                let y = self.value(id_var(id));
                self.acc(*a, zip_map(g, y, |g, y| g * (1.0 - y * y)), grads);
            }
            Op::Silu(a) => {
                let x = self.value(*a);
                let d = zip_map(g, x, |g, x| {
                    let s = sigmoid(x);
                    g * (s * (1.0 + x * (1.0 - s)))
                });
                self.acc(*a, d, grads);
            }
            Op::SumAll(a) => {
                let gv = g.data()[0];
                self.acc(*a, RealArray::filled(self.value(*a).shape(), gv), grads);
            }
            Op::MeanAll(a) => {
                let n = self.value(*a).len() as f64;
                let gv = g.data()[0] / n;
                self.acc(*a, RealArray::filled(self.value(*a).shape(), gv), grads);
            }
            Op::AddRowBias(m, bias) => {
                if self.needs(*m) {
                    self.acc(*m, g.clone(), grads);
                }
                if self.needs(*bias) {
                    let (r, c) = (g.rows(), g.cols());
                    let mut db = vec![0.0; c];
                    for i in 0..r {
                        for (dbj, gij) in db.iter_mut().zip(g.row(i)) {
                            *dbj += gij;
                        }
                    }
                    let shape = self.value(*bias).shape().to_vec();
                    self.acc(*bias, RealArray::new(vec![c], db).reshaped(shape), grads);
                }
            }
            Op::ScaleRows(m, v) => {
                let (r, c) = (g.rows(), g.cols());
                if self.needs(*m) {
                    let vv = self.value(*v);
                    let mut dm = g.data().to_vec();
                    for i in 0..r {
                        let s = vv.data()[i];
                        for d in dm[i * c..(i + 1) * c].iter_mut() {
                            *d *= s;
                        }
                    }
                    self.acc(*m, RealArray::new(vec![r, c], dm), grads);
                }
                if self.needs(*v) {
                    let mv = self.value(*m);
                    let mut dv = vec![0.0; r];
                    for i in 0..r {
                        dv[i] = g.row(i).iter().zip(mv.row(i)).map(|(g, m)| g * m).sum();
                    }
                    let shape = self.value(*v).shape().to_vec();
                    self.acc(*v, RealArray::new(vec![r], dv).reshaped(shape), grads);
                }
            }
            Op::ScaleByElem(m, s, idx) => {
                let c = self.value(*s).data()[*idx];
                if self.needs(*m) {
                    self.acc(*m, map(g, |x| x * c), grads);
                }
                if self.needs(*s) {
                    let dot: f64 = g
                        .data()
                        .iter()
                        .zip(self.value(*m).data())
                        .map(|(g, m)| g * m)
                        .sum();
                    let mut ds = RealArray::zeros(self.value(*s).shape());
                    ds.data_mut()[*idx] = dot;
                    self.acc(*s, ds, grads);
                }
            }
            Op::MeanRows(a) => {
                let av = self.value(*a);
                let (r, c) = (av.rows(), av.cols());
                let inv = 1.0 / r as f64;
                let mut da = vec![0.0; r * c];
                for i in 0..r {
                    for (d, gv) in da[i * c..(i + 1) * c].iter_mut().zip(g.row(0)) {
                        *d = gv * inv;
                    }
                }
                self.acc(*a, RealArray::new(vec![r, c], da), grads);
            }
            Op::Conv2d { x, w, b, stride } => {
                let (dx, dw, db) = conv2d_backward(
                    self.value(*x),
                    self.value(*w),
                    g,
                    *stride,
                    self.needs(*x),
                    self.needs(*w),
                );
                if self.needs(*x) {
                    self.acc(*x, dx, grads);
                }
                if self.needs(*w) {
                    self.acc(*w, dw, grads);
                }
                if self.needs(*b) {
                    self.acc(*b, db, grads);
                }
            }
            Op::Upsample2x(a) => {
                let av = self.value(*a);
                let (c, h, w) = (av.shape()[0], av.shape()[1], av.shape()[2]);
                let mut da = vec![0.0; c * h * w];
                for ch in 0..c {
                    for y in 0..2 * h {
                        for x in 0..2 * w {
                            da[ch * h * w + (y / 2) * w + x / 2] +=
                                g.data()[ch * 4 * h * w + y * 2 * w + x];
                        }
                    }
                }
                self.acc(*a, RealArray::new(vec![c, h, w], da), grads);
            }
            Op::AddChanBias(x, v) => {
                if self.needs(*x) {
                    self.acc(*x, g.clone(), grads);
                }
                if self.needs(*v) {
                    let (c, h, w) = {
                        let s = g.shape();
                        (s[0], s[1], s[2])
                    };
                    let mut dv = vec![0.0; c];
                    for (ch, dvc) in dv.iter_mut().enumerate() {
                        *dvc = g.data()[ch * h * w..(ch + 1) * h * w].iter().sum();
                    }
                    let shape = self.value(*v).shape().to_vec();
                    self.acc(*v, RealArray::new(vec![c], dv).reshaped(shape), grads);
                }
            }
        }
    }

    fn acc(&self, v: Var, delta: RealArray, grads: &mut [Option<RealArray>]) {
        if !self.needs(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(g) => {
                for (gi, di) in g.data_mut().iter_mut().zip(delta.data()) {
                    *gi += di;
                }
            }
            slot => *slot = Some(delta),
        }
    }
}

fn id_var(id: usize) -> Var {
    Var(id)
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn map(a: &RealArray, f: impl Fn(f64) -> f64) -> RealArray {
    RealArray::new(a.shape().to_vec(), a.data().iter().map(|&x| f(x)).collect())
}

fn zip_map(a: &RealArray, b: &RealArray, f: impl Fn(f64, f64) -> f64) -> RealArray {
    debug_assert_eq!(a.len(), b.len());
    RealArray::new(
        a.shape().to_vec(),
        a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
    )
}

fn conv2d_forward(x: &RealArray, w: &RealArray, b: &RealArray, stride: usize) -> RealArray {
    let (ci, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (co, ciw, k) = (w.shape()[0], w.shape()[1], w.shape()[2]);
    assert_eq!(ci, ciw, "conv2d channel mismatch");
    assert_eq!(w.shape()[3], k, "conv2d kernel must be square");
    let pad = k / 2;
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (wd + 2 * pad - k) / stride + 1;
    let mut out = vec![0.0; co * oh * ow];
    for oc in 0..co {
        let bias = b.data()[oc];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = bias;
                for ic in 0..ci {
                    for ky in 0..k {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let xrow = &x.data()[ic * h * wd + iy as usize * wd..];
                        let wrow = &w.data()[((oc * ci + ic) * k + ky) * k..][..k];
                        for (kx, &wv) in wrow.iter().enumerate() {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix < 0 || ix >= wd as isize {
                                continue;
                            }
                            acc += xrow[ix as usize] * wv;
                        }
                    }
                }
                out[oc * oh * ow + oy * ow + ox] = acc;
            }
        }
    }
    RealArray::new(vec![co, oh, ow], out)
}

fn conv2d_backward(
    x: &RealArray,
    w: &RealArray,
    g: &RealArray,
    stride: usize,
    need_dx: bool,
    need_dw: bool,
) -> (RealArray, RealArray, RealArray) {
    let (ci, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (co, _, k) = (w.shape()[0], w.shape()[1], w.shape()[2]);
    let pad = k / 2;
    let (oh, ow) = (g.shape()[1], g.shape()[2]);
    let mut dx = vec![0.0; ci * h * wd];
    let mut dw = vec![0.0; w.len()];
    let mut db = vec![0.0; co];
    for oc in 0..co {
        for oy in 0..oh {
            for ox in 0..ow {
                let gv = g.data()[oc * oh * ow + oy * ow + ox];
                db[oc] += gv;
                if gv == 0.0 || (!need_dx && !need_dw) {
                    continue;
                }
                for ic in 0..ci {
                    for ky in 0..k {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix < 0 || ix >= wd as isize {
                                continue;
                            }
                            let xi = ic * h * wd + iy as usize * wd + ix as usize;
                            let wi = ((oc * ci + ic) * k + ky) * k + kx;
                            if need_dx {
                                dx[xi] += gv * w.data()[wi];
                            }
                            if need_dw {
                                dw[wi] += gv * x.data()[xi];
                            }
                        }
                    }
                }
            }
        }
    }
    (
        RealArray::new(vec![ci, h, wd], dx),
        RealArray::new(w.shape().to_vec(), dw),
        RealArray::new(vec![co], db),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::grad_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Checks gradients for a scalar loss built by `build` against central
    /// differences, for a parameter of the given shape.
    fn check_op(name: &str, shape: &[usize], seed: u64, build: impl Fn(&mut Graph, Var) -> Var) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = RealArray::randn(shape, 0.8, &mut rng);
        let mut g = Graph::new();
        let xv = g.leaf(x.clone());
        let loss = build(&mut g, xv);
        let grads = g.backward(loss);
        let analytic = grads.of(xv, x.shape());
        let f = |probe: &RealArray| {
            let mut g = Graph::new();
            let xv = g.leaf(probe.clone());
            let loss = build(&mut g, xv);
            Ok(g.scalar_value(loss))
        };
        let rep = grad_check(name, f, &analytic, &x, 1e-5, 64, &mut rng).unwrap();
        assert!(rep.max_rel_error <= 1e-6, "{name}: rel error {}", rep.max_rel_error);
        assert!(rep.probe_count >= 20 || rep.probe_count == x.len());
    }

    #[test]
    fn grad_elementwise_ops() {
        check_op("add-mul-scale", &[3, 4], 1, |g, x| {
            let mut r = ChaCha8Rng::seed_from_u64(100);
            let c = g.constant(RealArray::randn(&[3, 4], 1.0, &mut r));
            let a = g.add(x, c);
            let m = g.mul(a, x);
            let s = g.scale(m, 0.7);
            let d = g.sub(s, c);
            g.sum_all(d)
        });
        check_op("tanh-silu", &[2, 5], 2, |g, x| {
            let t = g.tanh(x);
            let s = g.silu(t);
            g.mean_all(s)
        });
    }

    #[test]
    fn grad_matmul_transpose_softmax() {
        check_op("matmul-chain", &[3, 4], 3, |g, x| {
            let mut r = ChaCha8Rng::seed_from_u64(101);
            let w = g.constant(RealArray::randn(&[4, 3], 1.0, &mut r));
            let y = g.matmul(x, w);
            let yt = g.transpose(y);
            let z = g.matmul(yt, x);
            g.sum_all(z)
        });
        check_op("softmax-rows", &[4, 5], 4, |g, x| {
            let p = g.softmax_rows(x);
            let mut r = ChaCha8Rng::seed_from_u64(102);
            let w = g.constant(RealArray::randn(&[4, 5], 1.0, &mut r));
            let m = g.mul(p, w);
            g.sum_all(m)
        });
    }

    #[test]
    fn grad_row_column_ops() {
        check_op("mean-rows-select", &[5, 6], 5, |g, x| {
            let m = g.mean_rows(x);
            let s = g.select_cols(m, &[0, 2, 5]);
            let sm = g.softmax_rows(s);
            let mut r = ChaCha8Rng::seed_from_u64(112);
            let w = g.constant(RealArray::randn(&[1, 3], 1.0, &mut r));
            let weighted = g.mul(sm, w);
            g.sum_all(weighted)
        });
        check_op("row-bias-scale-rows", &[4, 3], 6, |g, x| {
            let mut r = ChaCha8Rng::seed_from_u64(103);
            let bias = g.constant(RealArray::randn(&[3], 1.0, &mut r));
            let scales = g.constant(RealArray::randn(&[4], 1.0, &mut r));
            let a = g.add_row_bias(x, bias);
            let b = g.scale_rows(a, scales);
            g.sum_all(b)
        });
        // bias and scale vectors as the differentiated parameter
        check_op("bias-as-param", &[3], 7, |g, x| {
            let mut r = ChaCha8Rng::seed_from_u64(104);
            let m = g.constant(RealArray::randn(&[4, 3], 1.0, &mut r));
            let a = g.add_row_bias(m, x);
            let t = g.tanh(a);
            g.sum_all(t)
        });
        check_op("rowscale-as-param", &[4], 8, |g, x| {
            let mut r = ChaCha8Rng::seed_from_u64(105);
            let m = g.constant(RealArray::randn(&[4, 3], 1.0, &mut r));
            let a = g.scale_rows(m, x);
            g.mean_all(a)
        });
    }

    #[test]
    fn grad_scale_by_elem_and_concat() {
        check_op("scale-by-elem", &[1, 3], 9, |g, x| {
            let mut r = ChaCha8Rng::seed_from_u64(106);
            let m = g.constant(RealArray::randn(&[2, 2], 1.0, &mut r));
            let sm = g.softmax_rows(x);
            let a = g.scale_by_elem(m, sm, 1);
            let b = g.scale_by_elem(m, sm, 0);
            let s = g.add(a, b);
            g.sum_all(s)
        });
        check_op("concat-rows", &[1, 4], 10, |g, x| {
            let mut r = ChaCha8Rng::seed_from_u64(107);
            let other = g.constant(RealArray::randn(&[2, 4], 1.0, &mut r));
            let c = g.concat_rows(&[other, x, x]);
            let t = g.tanh(c);
            g.sum_all(t)
        });
    }

    #[test]
    fn grad_conv_and_spatial_ops() {
        check_op("conv-x", &[2, 5, 5], 11, |g, x| {
            let mut r = ChaCha8Rng::seed_from_u64(108);
            let w = g.constant(RealArray::randn(&[3, 2, 3, 3], 0.5, &mut r));
            let b = g.constant(RealArray::randn(&[3], 0.5, &mut r));
            let y = g.conv2d(x, w, b, 1);
            let s = g.silu(y);
            g.sum_all(s)
        });
        check_op("conv-w-stride2", &[3, 2, 3, 3], 12, |g, x| {
            let mut r = ChaCha8Rng::seed_from_u64(109);
            let img = g.constant(RealArray::randn(&[2, 6, 6], 0.8, &mut r));
            let b = g.constant(RealArray::randn(&[3], 0.5, &mut r));
            let y = g.conv2d(img, x, b, 2);
            g.mean_all(y)
        });
        check_op("conv-bias", &[3], 13, |g, x| {
            let mut r = ChaCha8Rng::seed_from_u64(110);
            let img = g.constant(RealArray::randn(&[2, 4, 4], 0.8, &mut r));
            let w = g.constant(RealArray::randn(&[3, 2, 3, 3], 0.5, &mut r));
            let y = g.conv2d(img, w, x, 1);
            g.sum_all(y)
        });
        check_op("upsample-chanbias", &[2, 3, 3], 14, |g, x| {
            let mut r = ChaCha8Rng::seed_from_u64(111);
            let bias = g.constant(RealArray::randn(&[2], 1.0, &mut r));
            let u = g.upsample2x(x);
            let y = g.add_chan_bias(u, bias);
            let t = g.tanh(y);
            g.mean_all(t)
        });
    }

    #[test]
    fn conv_stride2_halves_even_sizes() {
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        let x = RealArray::randn(&[1, 8, 8], 1.0, &mut rng);
        let w = RealArray::randn(&[2, 1, 3, 3], 1.0, &mut rng);
        let b = RealArray::zeros(&[2]);
        let y = conv2d_forward(&x, &w, &b, 2);
        assert_eq!(y.shape(), &[2, 4, 4]);
    }

    #[test]
    fn backward_skips_constant_subgraphs() {
        let mut g = Graph::new();
        let c = g.constant(RealArray::filled(&[2, 2], 3.0));
        let x = g.leaf(RealArray::filled(&[2, 2], 2.0));
        let y = g.mul(c, x);
        let loss = g.sum_all(y);
        let grads = g.backward(loss);
        assert!(grads.get(c).is_none());
        assert_eq!(grads.get(x).unwrap().data(), &[3.0, 3.0, 3.0, 3.0]);
    }
}
