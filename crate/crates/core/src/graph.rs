//! A small reverse-mode tape over [`Tensor`] values.
//!
//! Every op records its output value and its inputs; [`Tape::backward`]
//! walks the tape in reverse and accumulates gradients. Nodes that do not
//! depend on any leaf created with [`Tape::leaf`] are skipped in the
//! backward sweep, so constant branches (reference and content features)
//! cost nothing there.

use alloc::format;
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

use crate::attention::LayerMask;
use crate::error::{Error, Result};
use crate::tensor::{matmul, matmul_nt, matmul_tn, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddRow(Var, Var),
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    Transpose(Var),
    Reshape(Var),
    Softmax(Var),
    LayerNorm(Var, Vec<f64>),
    Silu(Var),
    Abs(Var),
    Mean(Var),
    AvgPool2 { x: Var, h: usize, w: usize },
    Upsample2 { x: Var, h: usize, w: usize },
    Crop { x: Var, y0: usize, x0: usize },
}

struct Node {
    value: Tensor,
    op: Op,
    tracked: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    /// Gradient of `var`, or zeros shaped like `like` when nothing flowed into it.
    pub fn get_or_zeros(&self, var: Var, like: &Tensor) -> Tensor {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(like.shape().to_vec()))
    }
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

    /// A differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A constant input; no gradient flows into it.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn is_tracked(&self, var: Var) -> bool {
        self.nodes[var.0].tracked
    }

    fn push(&mut self, value: Tensor, op: Op, tracked: bool) -> Var {
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].tracked)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        let tracked = self.tracked(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), tracked))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        let tracked = self.tracked(&[a, b]);
        Ok(self.push(value, Op::Sub(a, b), tracked))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        let tracked = self.tracked(&[a, b]);
        Ok(self.push(value, Op::Mul(a, b), tracked))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let value = self.value(a).map(|x| x * factor);
        let tracked = self.tracked(&[a]);
        self.push(value, Op::Scale(a, factor), tracked)
    }

    /// Adds a `[1, d]` (or `[d]`) row to every row of a `[n, d]` matrix.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (n, d) = self.value(x).dims2()?;
        let r = self.value(row);
        if r.len() != d {
            return Err(Error::shape(
                "add_row",
                format!("[{n},{d}] + row of {}", r.len()),
            ));
        }
        let mut value = self.value(x).clone();
        let rd = self.value(row).data().to_vec();
        for chunk in value.data_mut().chunks_mut(d) {
            for (v, b) in chunk.iter_mut().zip(&rd) {
                *v += b;
            }
        }
        let tracked = self.tracked(&[x, row]);
        Ok(self.push(value, Op::AddRow(x, row), tracked))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = matmul(self.value(a), self.value(b))?;
        let tracked = self.tracked(&[a, b]);
        Ok(self.push(value, Op::MatMul(a, b), tracked))
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = matmul_nt(self.value(a), self.value(b))?;
        let tracked = self.tracked(&[a, b]);
        Ok(self.push(value, Op::MatMulNt(a, b), tracked))
    }

    /// `x · w + b` with `w: [d_in, d_out]`, `b: [d_out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add_row(y, b),
            None => Ok(y),
        }
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (n, d) = self.value(x).dims2()?;
        if start + len > d {
            return Err(Error::shape(
                "slice_cols",
                format!("[{start}, {}) of {d} columns", start + len),
            ));
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(n * len);
        for i in 0..n {
            out.extend_from_slice(&src[i * d + start..i * d + start + len]);
        }
        let value = Tensor::new([n, len], out)?;
        let tracked = self.tracked(&[x]);
        Ok(self.push(value, Op::SliceCols(x, start), tracked))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let n = self.value(parts[0]).dims2()?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pn, pd) = self.value(p).dims2()?;
            if pn != n {
                return Err(Error::shape("concat_cols", format!("{pn} vs {n} rows")));
            }
            widths.push(pd);
        }
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0; n * total];
        let mut offset = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let src = self.value(p).data();
            for i in 0..n {
                out[i * total + offset..i * total + offset + w]
                    .copy_from_slice(&src[i * w..(i + 1) * w]);
            }
            offset += w;
        }
        let value = Tensor::new([n, total], out)?;
        let tracked = self.tracked(parts);
        Ok(self.push(value, Op::ConcatCols(parts.to_vec()), tracked))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).transpose2()?;
        let tracked = self.tracked(&[x]);
        Ok(self.push(value, Op::Transpose(x), tracked))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape.to_vec())?;
        let tracked = self.tracked(&[x]);
        Ok(self.push(value, Op::Reshape(x), tracked))
    }

    /// Row-wise softmax. Entries where `mask` is false get a `-inf` logit and
    /// therefore exactly zero weight; a row with no unmasked entry is an error.
    pub fn softmax_rows(&mut self, x: Var, mask: Option<&Arc<LayerMask>>) -> Result<Var> {
        let (n, m) = self.value(x).dims2()?;
        if let Some(mask) = mask {
            if mask.rows() != n || mask.cols() != m {
                return Err(Error::shape(
                    "softmax_rows",
                    format!("mask [{}, {}] vs logits [{n}, {m}]", mask.rows(), mask.cols()),
                ));
            }
        }
        let mut out = self.value(x).data().to_vec();
        for i in 0..n {
            let row = &mut out[i * m..(i + 1) * m];
            if let Some(mask) = mask {
                for (j, v) in row.iter_mut().enumerate() {
                    if !mask.get(i, j) {
                        *v = f64::NEG_INFINITY;
                    }
                }
            }
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                return Err(Error::EmptyAttentionRow { row: i });
            }
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = libm::exp(*v - max);
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        let value = Tensor::new([n, m], out)?;
        let tracked = self.tracked(&[x]);
        Ok(self.push(value, Op::Softmax(x), tracked))
    }

    /// Row-wise normalization to zero mean, unit variance (no affine part).
    pub fn layer_norm(&mut self, x: Var) -> Result<Var> {
        const EPS: f64 = 1e-5;
        let (n, d) = self.value(x).dims2()?;
        let mut out = self.value(x).data().to_vec();
        let mut inv_std = Vec::with_capacity(n);
        for row in out.chunks_mut(d) {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / libm::sqrt(var + EPS);
            for v in row.iter_mut() {
                *v = (*v - mean) * inv;
            }
            inv_std.push(inv);
        }
        let value = Tensor::new([n, d], out)?;
        let tracked = self.tracked(&[x]);
        Ok(self.push(value, Op::LayerNorm(x, inv_std), tracked))
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v * sigmoid(v));
        let tracked = self.tracked(&[x]);
        self.push(value, Op::Silu(x), tracked)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let value = self.value(x).map(libm::fabs);
        let tracked = self.tracked(&[x]);
        self.push(value, Op::Abs(x), tracked)
    }

    /// Mean of all elements, as a one-element tensor.
    pub fn mean(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).mean());
        let tracked = self.tracked(&[x]);
        self.push(value, Op::Mean(x), tracked)
    }

    /// Mean absolute difference of two same-shaped nodes.
    pub fn l1_mean(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        let d = self.abs(d);
        Ok(self.mean(d))
    }

    /// 2×2 average pooling of a token matrix laid out on an `h × w` grid.
    pub fn avg_pool2(&mut self, x: Var, h: usize, w: usize) -> Result<Var> {
        let (n, d) = self.value(x).dims2()?;
        if n != h * w || h % 2 != 0 || w % 2 != 0 {
            return Err(Error::Resolution {
                height: h,
                width: w,
                factor: 2,
            });
        }
        let (oh, ow) = (h / 2, w / 2);
        let src = self.value(x).data();
        let mut out = vec![0.0; oh * ow * d];
        for y in 0..h {
            for xx in 0..w {
                let o = ((y / 2) * ow + xx / 2) * d;
                let s = (y * w + xx) * d;
                for c in 0..d {
                    out[o + c] += 0.25 * src[s + c];
                }
            }
        }
        let value = Tensor::new([oh * ow, d], out)?;
        let tracked = self.tracked(&[x]);
        Ok(self.push(value, Op::AvgPool2 { x, h, w }, tracked))
    }

    /// Nearest-neighbour 2× upsampling of a token matrix on an `h × w` grid.
    pub fn upsample2(&mut self, x: Var, h: usize, w: usize) -> Result<Var> {
        let (n, d) = self.value(x).dims2()?;
        if n != h * w {
            return Err(Error::shape("upsample2", format!("{n} tokens vs {h}x{w}")));
        }
        let (oh, ow) = (2 * h, 2 * w);
        let src = self.value(x).data();
        let mut out = vec![0.0; oh * ow * d];
        for y in 0..oh {
            for xx in 0..ow {
                let s = ((y / 2) * w + xx / 2) * d;
                let o = (y * ow + xx) * d;
                out[o..o + d].copy_from_slice(&src[s..s + d]);
            }
        }
        let value = Tensor::new([oh * ow, d], out)?;
        let tracked = self.tracked(&[x]);
        Ok(self.push(value, Op::Upsample2 { x, h, w }, tracked))
    }

    /// Spatial crop of a `[c, h, w]` tensor.
    pub fn crop(&mut self, x: Var, y0: usize, x0: usize, height: usize, width: usize) -> Result<Var> {
        let (c, h, w) = self.value(x).dims3()?;
        if y0 + height > h || x0 + width > w {
            return Err(Error::shape(
                "crop",
                format!("window {height}x{width} at ({y0},{x0}) exceeds {h}x{w}"),
            ));
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(c * height * width);
        for ch in 0..c {
            for y in y0..y0 + height {
                let base = ch * h * w + y * w;
                out.extend_from_slice(&src[base + x0..base + x0 + width]);
            }
        }
        let value = Tensor::new([c, height, width], out)?;
        let tracked = self.tracked(&[x]);
        Ok(self.push(value, Op::Crop { x, y0, x0 }, tracked))
    }

    /// Sum of one-element nodes.
    pub fn sum_scalars(&mut self, parts: &[Var]) -> Result<Var> {
        let mut acc = parts[0];
        for &p in &parts[1..] {
            acc = self.add(acc, p)?;
        }
        Ok(acc)
    }

    /// Reverse sweep from a one-element `loss` node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be a scalar, got {:?}", self.value(loss).shape()),
            ));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape().to_vec(), 1.0));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.tracked {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(&node.op, &node.value, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], var: Var, g: Tensor) -> Result<()> {
        if !self.nodes[var.0].tracked {
            return Ok(());
        }
        match &mut grads[var.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => {
                *slot = Some(g);
                Ok(())
            }
        }
    }

    fn propagate(
        &self,
        op: &Op,
        out: &Tensor,
        g: &Tensor,
        grads: &mut [Option<Tensor>],
    ) -> Result<()> {
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone())?;
                self.accumulate(grads, *b, g.clone())?;
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone())?;
                self.accumulate(grads, *b, g.map(|v| -v))?;
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.is_tracked(*a) {
                    self.accumulate(grads, *a, g.zip_map(bv, |x, y| x * y)?)?;
                }
                if self.is_tracked(*b) {
                    self.accumulate(grads, *b, g.zip_map(av, |x, y| x * y)?)?;
                }
            }
            Op::Scale(a, f) => {
                let f = *f;
                self.accumulate(grads, *a, g.map(|v| v * f))?;
            }
            Op::AddRow(x, row) => {
                self.accumulate(grads, *x, g.clone())?;
                if self.is_tracked(*row) {
                    let (_, d) = g.dims2()?;
                    let mut sums = vec![0.0; d];
                    for chunk in g.data().chunks(d) {
                        for (s, v) in sums.iter_mut().zip(chunk) {
                            *s += v;
                        }
                    }
                    let shape = self.value(*row).shape().to_vec();
                    self.accumulate(grads, *row, Tensor::new(shape, sums)?)?;
                }
            }
            Op::MatMul(a, b) => {
                if self.is_tracked(*a) {
                    self.accumulate(grads, *a, matmul_nt(g, self.value(*b))?)?;
                }
                if self.is_tracked(*b) {
                    self.accumulate(grads, *b, matmul_tn(self.value(*a), g)?)?;
                }
            }
            Op::MatMulNt(a, b) => {
                if self.is_tracked(*a) {
                    self.accumulate(grads, *a, matmul(g, self.value(*b))?)?;
                }
                if self.is_tracked(*b) {
                    self.accumulate(grads, *b, matmul_tn(g, self.value(*a))?)?;
                }
            }
            Op::SliceCols(x, start) => {
                let (n, d) = self.value(*x).dims2()?;
                let len = g.dims2()?.1;
                let mut full = vec![0.0; n * d];
                for i in 0..n {
                    full[i * d + start..i * d + start + len]
                        .copy_from_slice(&g.data()[i * len..(i + 1) * len]);
                }
                self.accumulate(grads, *x, Tensor::new([n, d], full)?)?;
            }
            Op::ConcatCols(parts) => {
                let (n, total) = g.dims2()?;
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).dims2()?.1;
                    if self.is_tracked(p) {
                        let mut part = Vec::with_capacity(n * w);
                        for i in 0..n {
                            part.extend_from_slice(
                                &g.data()[i * total + offset..i * total + offset + w],
                            );
                        }
                        self.accumulate(grads, p, Tensor::new([n, w], part)?)?;
                    }
                    offset += w;
                }
            }
            Op::Transpose(x) => {
                self.accumulate(grads, *x, g.transpose2()?)?;
            }
            Op::Reshape(x) => {
                let shape = self.value(*x).shape().to_vec();
                self.accumulate(grads, *x, g.clone().reshape(shape)?)?;
            }
            Op::Softmax(x) => {
                let (n, m) = out.dims2()?;
                let y = out.data();
                let gd = g.data();
                let mut dx = vec![0.0; n * m];
                for i in 0..n {
                    let r = i * m..(i + 1) * m;
                    let dot: f64 = y[r.clone()].iter().zip(&gd[r.clone()]).map(|(a, b)| a * b).sum();
                    for j in r {
                        dx[j] = y[j] * (gd[j] - dot);
                    }
                }
                self.accumulate(grads, *x, Tensor::new([n, m], dx)?)?;
            }
            Op::LayerNorm(x, inv_std) => {
                let (n, d) = out.dims2()?;
                let y = out.data();
                let gd = g.data();
                let mut dx = vec![0.0; n * d];
                for i in 0..n {
                    let r = i * d..(i + 1) * d;
                    let gsum: f64 = gd[r.clone()].iter().sum();
                    let gysum: f64 = gd[r.clone()].iter().zip(&y[r.clone()]).map(|(a, b)| a * b).sum();
                    let k = inv_std[i] / d as f64;
                    for j in r {
                        dx[j] = k * (d as f64 * gd[j] - gsum - y[j] * gysum);
                    }
                }
                self.accumulate(grads, *x, Tensor::new([n, d], dx)?)?;
            }
            Op::Silu(x) => {
                let dx = self.value(*x).zip_map(g, |v, gv| {
                    let s = sigmoid(v);
                    gv * s * (1.0 + v * (1.0 - s))
                })?;
                self.accumulate(grads, *x, dx)?;
            }
            Op::Abs(x) => {
                let dx = self.value(*x).zip_map(g, |v, gv| {
                    if v > 0.0 {
                        gv
                    } else if v < 0.0 {
                        -gv
                    } else {
                        0.0
                    }
                })?;
                self.accumulate(grads, *x, dx)?;
            }
            Op::Mean(x) => {
                let n = self.value(*x).len().max(1) as f64;
                let gv = g.item() / n;
                let shape = self.value(*x).shape().to_vec();
                self.accumulate(grads, *x, Tensor::full(shape, gv))?;
            }
            Op::AvgPool2 { x, h, w } => {
                let (h, w) = (*h, *w);
                let d = g.dims2()?.1;
                let ow = w / 2;
                let gd = g.data();
                let mut dx = vec![0.0; h * w * d];
                for y in 0..h {
                    for xx in 0..w {
                        let o = ((y / 2) * ow + xx / 2) * d;
                        let s = (y * w + xx) * d;
                        for c in 0..d {
                            dx[s + c] = 0.25 * gd[o + c];
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::new([h * w, d], dx)?)?;
            }
            Op::Upsample2 { x, h, w } => {
                let (h, w) = (*h, *w);
                let d = g.dims2()?.1;
                let ow = 2 * w;
                let gd = g.data();
                let mut dx = vec![0.0; h * w * d];
                for y in 0..2 * h {
                    for xx in 0..ow {
                        let s = ((y / 2) * w + xx / 2) * d;
                        let o = (y * ow + xx) * d;
                        for c in 0..d {
                            dx[s + c] += gd[o + c];
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::new([h * w, d], dx)?)?;
            }
            Op::Crop { x, y0, x0 } => {
                let (c, h, w) = self.value(*x).dims3()?;
                let (_, ch, cw) = g.dims3()?;
                let gd = g.data();
                let mut dx = vec![0.0; c * h * w];
                for k in 0..c {
                    for y in 0..ch {
                        let dst = k * h * w + (y + y0) * w + x0;
                        let src = (k * ch + y) * cw;
                        dx[dst..dst + cw].copy_from_slice(&gd[src..src + cw]);
                    }
                }
                self.accumulate(grads, *x, Tensor::new([c, h, w], dx)?)?;
            }
        }
        Ok(())
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + libm::exp(-x))
}
