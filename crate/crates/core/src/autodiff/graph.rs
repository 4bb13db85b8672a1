//! Tape-recording reverse-mode differentiation.
//!
//! Every operation appends a node to the [`Graph`]; node order is the
//! topological order, so [`Graph::backward`] simply walks the tape in reverse.
//! Nodes whose inputs are all non-differentiable are marked as such and are
//! skipped during the backward sweep.

use super::kernels::{self, ConvGeom};
use crate::error::{contract_err, shape_err, Error, Result};
use crate::tensor::Tensor;

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f32),
    /// `x[C, ...] + v[C]`
    AddChannel(Var, Var),
    /// `x[C, ...] * v[C]`
    MulChannel(Var, Var),
    /// `x[R, C] + v[C]`
    AddRow(Var, Var),
    MatMul {
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
        m: usize,
        k: usize,
        n: usize,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
        c_out: usize,
    },
    Silu(Var),
    SoftmaxRows(Var),
    GroupNorm {
        x: Var,
        groups: usize,
        rstd: Vec<f64>,
    },
    ChannelMean(Var),
    ChannelStd {
        x: Var,
        mean: Vec<f64>,
    },
    Reshape(Var),
    Transpose(Var),
    ResizeNearest {
        x: Var,
        src: (usize, usize),
    },
    Concat(Vec<Var>),
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    Sum(Var),
    Mse(Var, Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f32>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<Tensor> {
        self.grads[v.0]
            .as_ref()
            .map(|g| Tensor::new(&self.shapes[v.0], g.clone()).expect("gradient shape"))
    }

    pub fn raw(&self, v: Var) -> Option<&[f32]> {
        self.grads[v.0].as_deref()
    }
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A differentiable leaf (a trainable parameter or an input under test).
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vs: &[Var]) -> bool {
        vs.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(f32, f32) -> f32, op: Op) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), f)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, s: f32) -> Var {
        let value = self.value(a).scale(s);
        let rg = self.rg(&[a]);
        self.push(value, Op::Scale(a, s), rg)
    }

    fn channel_layout(&self, x: Var, v: Var) -> Result<(usize, usize)> {
        let xs = self.shape(x);
        let vs = self.shape(v);
        if xs.is_empty() || vs.len() != 1 || vs[0] != xs[0] {
            return Err(shape_err!("per-channel operand {:?} for {:?}", vs, xs));
        }
        Ok((xs[0], xs[1..].iter().product()))
    }

    pub fn add_channel(&mut self, x: Var, v: Var) -> Result<Var> {
        let (c, n) = self.channel_layout(x, v)?;
        let mut out = self.value(x).clone();
        let vv = self.value(v).data();
        for ch in 0..c {
            out.data_mut()[ch * n..(ch + 1) * n]
                .iter_mut()
                .for_each(|o| *o += vv[ch]);
        }
        let rg = self.rg(&[x, v]);
        Ok(self.push(out, Op::AddChannel(x, v), rg))
    }

    pub fn mul_channel(&mut self, x: Var, v: Var) -> Result<Var> {
        let (c, n) = self.channel_layout(x, v)?;
        let mut out = self.value(x).clone();
        let vv = self.value(v).data();
        for ch in 0..c {
            out.data_mut()[ch * n..(ch + 1) * n]
                .iter_mut()
                .for_each(|o| *o *= vv[ch]);
        }
        let rg = self.rg(&[x, v]);
        Ok(self.push(out, Op::MulChannel(x, v), rg))
    }

    pub fn add_row(&mut self, x: Var, v: Var) -> Result<Var> {
        let (r, c) = self.value(x).rc()?;
        if self.shape(v) != [c] {
            return Err(shape_err!("row bias {:?} for {}×{}", self.shape(v), r, c));
        }
        let mut out = self.value(x).clone();
        let vv = self.value(v).data().to_vec();
        for row in out.data_mut().chunks_mut(c) {
            row.iter_mut().zip(&vv).for_each(|(o, b)| *o += b);
        }
        let rg = self.rg(&[x, v]);
        Ok(self.push(out, Op::AddRow(x, v), rg))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, false, b, false)
    }

    /// `op(a) · op(b)` where `op` optionally transposes a 2-D operand.
    pub fn matmul_t(&mut self, a: Var, ta: bool, b: Var, tb: bool) -> Result<Var> {
        let (ar, ac) = self.value(a).rc()?;
        let (br, bc) = self.value(b).rc()?;
        let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
        let (k2, n) = if tb { (bc, br) } else { (br, bc) };
        if k != k2 {
            return Err(shape_err!(
                "matmul inner dimensions disagree: {}×{} · {}×{}",
                m,
                k,
                k2,
                n
            ));
        }
        let mut out = vec![0.0; m * n];
        kernels::gemm(
            m,
            k,
            n,
            self.value(a).data(),
            ta,
            self.value(b).data(),
            tb,
            &mut out,
            0.0,
        );
        let rg = self.rg(&[a, b]);
        Ok(self.push(
            Tensor::new(&[m, n], out)?,
            Op::MatMul {
                a,
                b,
                ta,
                tb,
                m,
                k,
                n,
            },
            rg,
        ))
    }

    /// Cross-correlation of a C×H×W input with a `[C_out, C_in, k, k]` kernel.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let (c_in, h, wd) = self.value(x).chw()?;
        let ws = self.shape(w).to_vec();
        let [c_out, wc_in, k, k2] = ws[..] else {
            return Err(shape_err!("conv kernel must be rank 4, got {:?}", ws));
        };
        if wc_in != c_in || k != k2 {
            return Err(shape_err!("kernel {:?} for input {}×{}×{}", ws, c_in, h, wd));
        }
        if let Some(b) = b {
            if self.shape(b) != [c_out] {
                return Err(shape_err!("conv bias {:?} for {} outputs", self.shape(b), c_out));
            }
        }
        let geom = ConvGeom::new(c_in, h, wd, k, stride, pad).ok_or_else(|| {
            shape_err!("kernel {}×{} does not fit padded input {}×{} (pad {})", k, k, h, wd, pad)
        })?;
        let plane = geom.out_plane();
        let mut out = vec![0.0; c_out * plane];
        if geom.is_pointwise() {
            kernels::gemm(
                c_out,
                c_in,
                plane,
                self.value(w).data(),
                false,
                self.value(x).data(),
                false,
                &mut out,
                0.0,
            );
        } else {
            let mut cols = vec![0.0; geom.cols_rows() * plane];
            kernels::im2col(self.value(x).data(), &geom, &mut cols);
            kernels::gemm(
                c_out,
                geom.cols_rows(),
                plane,
                self.value(w).data(),
                false,
                &cols,
                false,
                &mut out,
                0.0,
            );
        }
        if let Some(b) = b {
            let bv = self.value(b).data();
            for (ch, chunk) in out.chunks_mut(plane).enumerate() {
                chunk.iter_mut().for_each(|o| *o += bv[ch]);
            }
        }
        let mut deps = vec![x, w];
        deps.extend(b);
        let rg = self.rg(&deps);
        Ok(self.push(
            Tensor::new(&[c_out, geom.h_out, geom.w_out], out)?,
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                c_out,
            },
            rg,
        ))
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(kernels::silu);
        let rg = self.rg(&[x]);
        self.push(value, Op::Silu(x), rg)
    }

    /// Row-wise softmax of a 2-D tensor. NaN logits are rejected.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.value(x).rc()?;
        let src = self.value(x);
        if src.data().iter().any(|v| v.is_nan()) {
            return Err(Error::Numeric("NaN logit in softmax".into()));
        }
        let mut out = vec![0.0; r * c];
        for (row, o) in src.data().chunks(c).zip(out.chunks_mut(c)) {
            kernels::softmax_row(row, o);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(&[r, c], out)?, Op::SoftmaxRows(x), rg))
    }

    /// Normalizes each group of `C / groups` leading-axis channels to zero
    /// mean and unit (population, `eps`-stabilized) variance. With
    /// `groups == C` this is per-channel normalization.
    pub fn group_norm(&mut self, x: Var, groups: usize, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let c = *shape.first().ok_or_else(|| shape_err!("group_norm of a scalar"))?;
        if groups == 0 || c % groups != 0 {
            return Err(shape_err!("{} channels cannot form {} groups", c, groups));
        }
        let src = self.value(x).data();
        let m = src.len() / groups;
        let mut out = vec![0.0; src.len()];
        let mut rstds = Vec::with_capacity(groups);
        for (xs, os) in src.chunks(m).zip(out.chunks_mut(m)) {
            let (mean, var) = crate::tensor::mean_var(xs);
            let rstd = 1.0 / (var + eps).sqrt();
            for (o, &v) in os.iter_mut().zip(xs) {
                *o = ((v as f64 - mean) * rstd) as f32;
            }
            rstds.push(rstd);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::new(&shape, out)?,
            Op::GroupNorm {
                x,
                groups,
                rstd: rstds,
            },
            rg,
        ))
    }

    /// Per-channel mean over the trailing axes.
    pub fn channel_mean(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let c = *shape.first().ok_or_else(|| shape_err!("channel_mean of a scalar"))?;
        let src = self.value(x).data();
        let n = src.len() / c.max(1);
        let means: Vec<f32> = src
            .chunks(n)
            .map(|xs| (xs.iter().map(|&v| v as f64).sum::<f64>() / n as f64) as f32)
            .collect();
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(&[c], means)?, Op::ChannelMean(x), rg))
    }

    /// Per-channel `sqrt(var + eps)` over the trailing axes.
    pub fn channel_std(&mut self, x: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let c = *shape.first().ok_or_else(|| shape_err!("channel_std of a scalar"))?;
        let src = self.value(x).data();
        let n = src.len() / c.max(1);
        let mut mean = Vec::with_capacity(c);
        let mut sig = Vec::with_capacity(c);
        for xs in src.chunks(n) {
            let (m, v) = crate::tensor::mean_var(xs);
            mean.push(m);
            sig.push((v + eps).sqrt() as f32);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(&[c], sig)?, Op::ChannelStd { x, mean }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.value(x).rc()?;
        let src = self.value(x).data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(&[c, r], out)?, Op::Transpose(x), rg))
    }

    /// Nearest-neighbour resampling of a C×H×W tensor to C×`h`×`w`.
    pub fn resize_nearest(&mut self, x: Var, h: usize, w: usize) -> Result<Var> {
        let (c, sh, sw) = self.value(x).chw()?;
        if (sh, sw) == (h, w) {
            return Ok(x);
        }
        let src = self.value(x).data();
        let mut out = vec![0.0; c * h * w];
        for ch in 0..c {
            for y in 0..h {
                let sy = y * sh / h;
                for xx in 0..w {
                    let sx = xx * sw / w;
                    out[(ch * h + y) * w + xx] = src[(ch * sh + sy) * sw + sx];
                }
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::new(&[c, h, w], out)?,
            Op::ResizeNearest { x, src: (sh, sw) },
            rg,
        ))
    }

    /// Concatenation along the leading axis.
    pub fn concat(&mut self, xs: &[Var]) -> Result<Var> {
        let first = self.shape(xs[0]).to_vec();
        let mut lead = 0;
        let mut data = Vec::new();
        for &v in xs {
            let s = self.shape(v);
            if s.len() != first.len() || s[1..] != first[1..] {
                return Err(shape_err!("concat of {:?} with {:?}", first, s));
            }
            lead += s[0];
            data.extend_from_slice(self.value(v).data());
        }
        let mut shape = first;
        shape[0] = lead;
        let rg = self.rg(xs);
        Ok(self.push(Tensor::new(&shape, data)?, Op::Concat(xs.to_vec()), rg))
    }

    /// Columns `start..start + len` of a 2-D tensor.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.value(x).rc()?;
        if start + len > c {
            return Err(shape_err!("column slice {}..{} of {} columns", start, start + len, c));
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(r * len);
        for row in src.chunks(c) {
            out.extend_from_slice(&row[start..start + len]);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(&[r, len], out)?, Op::SliceCols { x, start }, rg))
    }

    pub fn concat_cols(&mut self, xs: &[Var]) -> Result<Var> {
        let r = self.value(xs[0]).rc()?.0;
        let mut widths = Vec::with_capacity(xs.len());
        for &v in xs {
            let (vr, vc) = self.value(v).rc()?;
            if vr != r {
                return Err(shape_err!("column concat of {} and {} rows", r, vr));
            }
            widths.push(vc);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for (&v, &wd) in xs.iter().zip(&widths) {
                out.extend_from_slice(&self.value(v).data()[i * wd..(i + 1) * wd]);
            }
        }
        let rg = self.rg(xs);
        Ok(self.push(Tensor::new(&[r, total], out)?, Op::ConcatCols(xs.to_vec()), rg))
    }

    /// Row lookup `table[ids[i]]` into an `ids.len() × D` matrix.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (rows, d) = self.value(table).rc()?;
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(contract_err!("token id {} outside table of {} rows", bad, rows));
        }
        let src = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        let rg = self.rg(&[table]);
        Ok(self.push(
            Tensor::new(&[ids.len(), d], out)?,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum() as f32;
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    /// Mean squared error between two same-shape tensors, as a scalar.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        self.value(a).expect_same_shape(self.value(b))?;
        let n = self.value(a).len() as f64;
        let s: f64 = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| {
                let d = x as f64 - y as f64;
                d * d
            })
            .sum();
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::scalar((s / n) as f32), Op::Mse(a, b), rg))
    }

    /// Reverse sweep from a scalar `loss`. Only nodes that require a
    /// gradient receive one.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(contract_err!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            ));
        }
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; self.nodes.len()];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for id in (0..=loss.0).rev() {
            let Some(gy) = grads[id].take() else { continue };
            self.backward_node(id, &gy, &mut grads);
            grads[id] = Some(gy);
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn backward_node(&self, id: usize, gy: &[f32], grads: &mut [Option<Vec<f32>>]) {
        let node = &self.nodes[id];
        let val = |v: Var| self.nodes[v.0].value.data();
        // Accumulates a gradient contribution produced lazily by `f`.
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f32])| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.len()]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, &mut |g| g.iter_mut().zip(gy).for_each(|(g, d)| *g += d));
                acc(*b, &mut |g| g.iter_mut().zip(gy).for_each(|(g, d)| *g += d));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |g| g.iter_mut().zip(gy).for_each(|(g, d)| *g += d));
                acc(*b, &mut |g| g.iter_mut().zip(gy).for_each(|(g, d)| *g -= d));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                acc(*a, &mut |g| {
                    for i in 0..g.len() {
                        g[i] += gy[i] * bv[i];
                    }
                });
                acc(*b, &mut |g| {
                    for i in 0..g.len() {
                        g[i] += gy[i] * av[i];
                    }
                });
            }
            Op::Scale(a, s) => {
                acc(*a, &mut |g| g.iter_mut().zip(gy).for_each(|(g, d)| *g += d * s));
            }
            Op::AddChannel(x, v) => {
                let c = val(*v).len();
                let n = gy.len() / c;
                acc(*x, &mut |g| g.iter_mut().zip(gy).for_each(|(g, d)| *g += d));
                acc(*v, &mut |g| {
                    for (ch, chunk) in gy.chunks(n).enumerate() {
                        g[ch] += chunk.iter().map(|&d| d as f64).sum::<f64>() as f32;
                    }
                });
            }
            Op::MulChannel(x, v) => {
                let (xv, vv) = (val(*x), val(*v));
                let n = gy.len() / vv.len();
                acc(*x, &mut |g| {
                    for (i, gi) in g.iter_mut().enumerate() {
                        *gi += gy[i] * vv[i / n];
                    }
                });
                acc(*v, &mut |g| {
                    for (ch, gc) in g.iter_mut().enumerate() {
                        let s: f64 = (ch * n..(ch + 1) * n)
                            .map(|i| gy[i] as f64 * xv[i] as f64)
                            .sum();
                        *gc += s as f32;
                    }
                });
            }
            Op::AddRow(x, v) => {
                let c = val(*v).len();
                acc(*x, &mut |g| g.iter_mut().zip(gy).for_each(|(g, d)| *g += d));
                acc(*v, &mut |g| {
                    let mut s = vec![0.0f64; c];
                    for row in gy.chunks(c) {
                        s.iter_mut().zip(row).for_each(|(s, &d)| *s += d as f64);
                    }
                    g.iter_mut().zip(&s).for_each(|(g, &s)| *g += s as f32);
                });
            }
            &Op::MatMul {
                a,
                b,
                ta,
                tb,
                m,
                k,
                n,
            } => {
                let (av, bv) = (val(a), val(b));
                // y = op(a)·op(b); d op(a) = gy·op(b)ᵀ, d op(b) = op(a)ᵀ·gy.
                acc(a, &mut |g| {
                    if ta {
                        // g is k×m: g += op(b)·gyᵀ
                        kernels::gemm(k, n, m, bv, tb, gy, true, g, 1.0);
                    } else {
                        kernels::gemm(m, n, k, gy, false, bv, !tb, g, 1.0);
                    }
                });
                acc(b, &mut |g| {
                    if tb {
                        // g is n×k: g += gyᵀ·op(a)
                        kernels::gemm(n, m, k, gy, true, av, ta, g, 1.0);
                    } else {
                        kernels::gemm(k, m, n, av, !ta, gy, false, g, 1.0);
                    }
                });
            }
            &Op::Conv2d {
                x,
                w,
                b,
                ref geom,
                c_out,
            } => {
                let plane = geom.out_plane();
                let rows = geom.cols_rows();
                let wv = val(w);
                if let Some(b) = b {
                    acc(b, &mut |g| {
                        for (ch, chunk) in gy.chunks(plane).enumerate() {
                            g[ch] += chunk.iter().map(|&d| d as f64).sum::<f64>() as f32;
                        }
                    });
                }
                let need_w = self.nodes[w.0].requires_grad;
                let need_x = self.nodes[x.0].requires_grad;
                if geom.is_pointwise() {
                    let xv = val(x);
                    if need_w {
                        acc(w, &mut |g| kernels::gemm(c_out, plane, rows, gy, false, xv, true, g, 1.0));
                    }
                    if need_x {
                        acc(x, &mut |g| kernels::gemm(rows, c_out, plane, wv, true, gy, false, g, 1.0));
                    }
                } else {
                    if need_w {
                        let mut cols = vec![0.0; rows * plane];
                        kernels::im2col(val(x), geom, &mut cols);
                        acc(w, &mut |g| kernels::gemm(c_out, plane, rows, gy, false, &cols, true, g, 1.0));
                    }
                    if need_x {
                        let mut dcols = vec![0.0; rows * plane];
                        kernels::gemm(rows, c_out, plane, wv, true, gy, false, &mut dcols, 0.0);
                        acc(x, &mut |g| kernels::col2im(&dcols, geom, g));
                    }
                }
            }
            Op::Silu(x) => {
                let xv = val(*x);
                acc(*x, &mut |g| {
                    for i in 0..g.len() {
                        g[i] += gy[i] * kernels::silu_grad(xv[i]);
                    }
                });
            }
            Op::SoftmaxRows(x) => {
                let y = node.value.data();
                let c = node.value.shape()[1];
                acc(*x, &mut |g| {
                    for ((gr, yr), dr) in g.chunks_mut(c).zip(y.chunks(c)).zip(gy.chunks(c)) {
                        let dot: f64 = yr.iter().zip(dr).map(|(&a, &b)| a as f64 * b as f64).sum();
                        for j in 0..c {
                            gr[j] += (yr[j] as f64 * (dr[j] as f64 - dot)) as f32;
                        }
                    }
                });
            }
            Op::GroupNorm { x, groups, rstd } => {
                let y = node.value.data();
                let m = y.len() / groups;
                acc(*x, &mut |g| {
                    for (gi, ((gg, yy), dd)) in g
                        .chunks_mut(m)
                        .zip(y.chunks(m))
                        .zip(gy.chunks(m))
                        .enumerate()
                    {
                        let mean_d: f64 = dd.iter().map(|&d| d as f64).sum::<f64>() / m as f64;
                        let mean_dy: f64 = dd
                            .iter()
                            .zip(yy)
                            .map(|(&d, &v)| d as f64 * v as f64)
                            .sum::<f64>()
                            / m as f64;
                        for j in 0..m {
                            gg[j] += (rstd[gi] * (dd[j] as f64 - mean_d - yy[j] as f64 * mean_dy))
                                as f32;
                        }
                    }
                });
            }
            Op::ChannelMean(x) => {
                let c = node.value.len();
                let n = self.nodes[x.0].value.len() / c;
                acc(*x, &mut |g| {
                    for (ch, chunk) in g.chunks_mut(n).enumerate() {
                        let d = gy[ch] / n as f32;
                        chunk.iter_mut().for_each(|v| *v += d);
                    }
                });
            }
            Op::ChannelStd { x, mean } => {
                let sig = node.value.data();
                let xv = val(*x);
                let n = xv.len() / sig.len();
                acc(*x, &mut |g| {
                    for ch in 0..sig.len() {
                        let f = gy[ch] as f64 / (n as f64 * sig[ch] as f64);
                        for i in ch * n..(ch + 1) * n {
                            g[i] += (f * (xv[i] as f64 - mean[ch])) as f32;
                        }
                    }
                });
            }
            Op::Reshape(x) => {
                acc(*x, &mut |g| g.iter_mut().zip(gy).for_each(|(g, d)| *g += d));
            }
            Op::Transpose(x) => {
                let (c, r) = (node.value.shape()[0], node.value.shape()[1]);
                // node is c×r; input is r×c.
                acc(*x, &mut |g| {
                    for i in 0..r {
                        for j in 0..c {
                            g[i * c + j] += gy[j * r + i];
                        }
                    }
                });
            }
            &Op::ResizeNearest { x, src: (sh, sw) } => {
                let s = node.value.shape();
                let (c, h, w) = (s[0], s[1], s[2]);
                acc(x, &mut |g| {
                    for ch in 0..c {
                        for y in 0..h {
                            let sy = y * sh / h;
                            for xx in 0..w {
                                let sx = xx * sw / w;
                                g[(ch * sh + sy) * sw + sx] += gy[(ch * h + y) * w + xx];
                            }
                        }
                    }
                });
            }
            Op::Concat(xs) => {
                let mut off = 0;
                for &v in xs {
                    let len = self.nodes[v.0].value.len();
                    acc(v, &mut |g| {
                        g.iter_mut()
                            .zip(&gy[off..off + len])
                            .for_each(|(g, d)| *g += d)
                    });
                    off += len;
                }
            }
            &Op::SliceCols { x, start } => {
                let (r, len) = (node.value.shape()[0], node.value.shape()[1]);
                let c = self.nodes[x.0].value.shape()[1];
                acc(x, &mut |g| {
                    for i in 0..r {
                        for j in 0..len {
                            g[i * c + start + j] += gy[i * len + j];
                        }
                    }
                });
            }
            Op::ConcatCols(xs) => {
                let (r, total) = (node.value.shape()[0], node.value.shape()[1]);
                let mut off = 0;
                for &v in xs {
                    let wd = self.nodes[v.0].value.shape()[1];
                    acc(v, &mut |g| {
                        for i in 0..r {
                            for j in 0..wd {
                                g[i * wd + j] += gy[i * total + off + j];
                            }
                        }
                    });
                    off += wd;
                }
            }
            Op::Embedding { table, ids } => {
                let d = node.value.shape()[1];
                acc(*table, &mut |g| {
                    for (row, &i) in ids.iter().enumerate() {
                        for j in 0..d {
                            g[i * d + j] += gy[row * d + j];
                        }
                    }
                });
            }
            Op::Sum(x) => {
                acc(*x, &mut |g| g.iter_mut().for_each(|v| *v += gy[0]));
            }
            Op::Mse(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let f = 2.0 * gy[0] as f64 / av.len() as f64;
                acc(*a, &mut |g| {
                    for i in 0..g.len() {
                        g[i] += (f * (av[i] as f64 - bv[i] as f64)) as f32;
                    }
                });
                acc(*b, &mut |g| {
                    for i in 0..g.len() {
                        g[i] -= (f * (av[i] as f64 - bv[i] as f64)) as f32;
                    }
                });
            }
        }
    }
}
