//! Reverse-mode automatic differentiation over a closed operation set.
//!
//! Every operation evaluates eagerly and appends a node to the [`Tape`].
//! [`Tape::backward`] consumes the tape and replays it in reverse, so each
//! leaf receives its gradient exactly once per call.

use super::kernels::{self, ConvGeom};
use super::tensor::Tensor;
use crate::error::{dim_err, Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Bcast {
    Same,
    LeftScalar,
    RightScalar,
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var, Bcast),
    Sub(Var, Var, Bcast),
    Mul(Var, Var, Bcast),
    Div(Var, Var, Bcast),
    Scale(Var, f64),
    AddScalar(Var),
    Exp(Var),
    Sigmoid(Var),
    Relu(Var),
    Recip(Var),
    Softmax(Var),
    Sum(Var),
    Mean(Var),
    Transpose(Var),
    Reshape(Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
        cols: Vec<f64>,
    },
    AvgPool2x2 {
        x: Var,
    },
    Upsample2x(Var),
    MulSpatial(Var, Var),
    AddRow(Var, Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Crop {
        x: Var,
        y0: usize,
        x0: usize,
    },
    Paste {
        x: Var,
        y0: usize,
        x0: usize,
    },
    Concat(Vec<Var>),
    SpatialMean(Var),
    BceLogits {
        x: Var,
        target: Vec<f64>,
    },
    Gather(Var, Vec<usize>),
    Scatter(Var, Vec<usize>),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of executed operations. Confined to one thread.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to every `requires_grad` leaf.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, or zeros of `shape` when `v` did not influence the loss.
    pub fn get_or_zeros(&self, v: Var, shape: &[usize]) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(shape))
    }
}

fn binary_bcast(op: &str, a: &Tensor, b: &Tensor) -> Result<Bcast> {
    if a.shape() == b.shape() {
        Ok(Bcast::Same)
    } else if a.numel() == 1 {
        Ok(Bcast::LeftScalar)
    } else if b.numel() == 1 {
        Ok(Bcast::RightScalar)
    } else {
        dim_err(format!(
            "{op}: incompatible shapes {:?} and {:?}",
            a.shape(),
            b.shape()
        ))
    }
}

fn zip_bcast(a: &Tensor, b: &Tensor, bc: Bcast, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let (shape, data): (&[usize], Vec<f64>) = match bc {
        Bcast::Same => (
            a.shape(),
            a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
        ),
        Bcast::LeftScalar => {
            let x = a.data()[0];
            (b.shape(), b.data().iter().map(|&y| f(x, y)).collect())
        }
        Bcast::RightScalar => {
            let y = b.data()[0];
            (a.shape(), a.data().iter().map(|&x| f(x, y)).collect())
        }
    };
    Tensor::new(shape.to_vec(), data).expect("broadcast shape")
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn chw(t: &Tensor, op: &str) -> Result<(usize, usize, usize)> {
    match *t.shape() {
        [c, h, w] => Ok((c, h, w)),
        _ => dim_err(format!("{op}: expected C×H×W, got {:?}", t.shape())),
    }
}

fn rows_cols(t: &Tensor, op: &str) -> Result<(usize, usize)> {
    match *t.shape() {
        [m, n] => Ok((m, n)),
        _ => dim_err(format!("{op}: expected a matrix, got {:?}", t.shape())),
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

    /// Records a constant.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a differentiable leaf.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
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

    fn push(&mut self, name: &str, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(name.to_string()));
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = rows_cols(self.value(a), "matmul")?;
        let (k2, n) = rows_cols(self.value(b), "matmul")?;
        if k != k2 {
            return dim_err(format!("matmul: inner dimensions {k} and {k2} differ"));
        }
        let mut out = vec![0.0; m * n];
        kernels::gemm_acc(m, k, n, self.value(a).data(), self.value(b).data(), &mut out);
        self.push("matmul", Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let bc = binary_bcast("add", self.value(a), self.value(b))?;
        let v = zip_bcast(self.value(a), self.value(b), bc, |x, y| x + y);
        self.push("add", v, Op::Add(a, b, bc), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let bc = binary_bcast("sub", self.value(a), self.value(b))?;
        let v = zip_bcast(self.value(a), self.value(b), bc, |x, y| x - y);
        self.push("sub", v, Op::Sub(a, b, bc), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let bc = binary_bcast("mul", self.value(a), self.value(b))?;
        let v = zip_bcast(self.value(a), self.value(b), bc, |x, y| x * y);
        self.push("mul", v, Op::Mul(a, b, bc), &[a, b])
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let bc = binary_bcast("div", self.value(a), self.value(b))?;
        let v = zip_bcast(self.value(a), self.value(b), bc, |x, y| x / y);
        self.push("div", v, Op::Div(a, b, bc), &[a, b])
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let v = self.value(a).map(|x| x * s);
        self.push("scale", v, Op::Scale(a, s), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Result<Var> {
        let v = self.value(a).map(|x| x + s);
        self.push("add_scalar", v, Op::AddScalar(a), &[a])
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(f64::exp);
        self.push("exp", v, Op::Exp(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(sigmoid);
        self.push("sigmoid", v, Op::Sigmoid(a), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(|x| x.max(0.0));
        self.push("relu", v, Op::Relu(a), &[a])
    }

    pub fn recip(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(|x| 1.0 / x);
        self.push("recip", v, Op::Recip(a), &[a])
    }

    /// Softmax along the last axis, with max subtraction.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let n = *t.shape().last().unwrap_or(&0);
        if n == 0 || t.numel() == 0 {
            return Err(Error::Domain("softmax over an empty axis".into()));
        }
        let mut out = t.data().to_vec();
        for row in out.chunks_mut(n) {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                z += *v;
            }
            for v in row.iter_mut() {
                *v /= z;
            }
        }
        let v = Tensor::new(t.shape().to_vec(), out)?;
        self.push("softmax", v, Op::Softmax(a), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.numel() == 0 {
            return Err(Error::Domain("mean of an empty tensor".into()));
        }
        let s = t.sum() / t.numel() as f64;
        self.push("mean", Tensor::scalar(s), Op::Mean(a), &[a])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let (m, n) = rows_cols(t, "transpose")?;
        let mut out = vec![0.0; m * n];
        let d = t.data();
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = d[i * n + j];
            }
        }
        self.push("transpose", Tensor::new(vec![n, m], out)?, Op::Transpose(a), &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(a).clone().reshape(shape)?;
        self.push("reshape", v, Op::Reshape(a), &[a])
    }

    /// 2-D convolution of `x: C×H×W` with `w: O×C×k×k` and optional bias `b: O`.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let (c, h, wd) = chw(self.value(x), "conv2d")?;
        let (o, k) = match *self.value(w).shape() {
            [o, ci, k, k2] if ci == c && k == k2 => (o, k),
            ref s => return dim_err(format!("conv2d: kernel {s:?} does not fit {c} channels")),
        };
        if let Some(b) = b {
            if self.shape(b) != [o] {
                return dim_err("conv2d: bias length differs from output channels");
            }
        }
        if stride == 0 {
            return Err(Error::Domain("conv2d: stride must be positive".into()));
        }
        if k > h + 2 * pad || k > wd + 2 * pad {
            return dim_err(format!("conv2d: kernel {k} larger than input {h}×{wd}"));
        }
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (wd + 2 * pad - k) / stride + 1;
        let geom = ConvGeom {
            c,
            h,
            w: wd,
            k,
            stride,
            pad,
            ho,
            wo,
        };
        let cols = kernels::im2col(self.value(x).data(), &geom);
        let plane = ho * wo;
        let mut out = vec![0.0; o * plane];
        kernels::gemm_acc(o, c * k * k, plane, self.value(w).data(), &cols, &mut out);
        if let Some(b) = b {
            for (row, &bv) in out.chunks_mut(plane).zip(self.value(b).data()) {
                row.iter_mut().for_each(|v| *v += bv);
            }
        }
        let value = Tensor::new(vec![o, ho, wo], out)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push(
            "conv2d",
            value,
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                cols,
            },
            &inputs,
        )
    }

    /// 2×2 average pooling; odd extents are replication-padded on the high side.
    pub fn avgpool2x2(&mut self, x: Var) -> Result<Var> {
        let (c, h, w) = chw(self.value(x), "avgpool2x2")?;
        let (ho, wo) = (h.div_ceil(2), w.div_ceil(2));
        let d = self.value(x).data();
        let mut out = vec![0.0; c * ho * wo];
        for ch in 0..c {
            for i in 0..ho {
                for j in 0..wo {
                    let mut s = 0.0;
                    for (y, xx) in pool_sources(i, j, h, w) {
                        s += d[(ch * h + y) * w + xx];
                    }
                    out[(ch * ho + i) * wo + j] = 0.25 * s;
                }
            }
        }
        self.push(
            "avgpool2x2",
            Tensor::new(vec![c, ho, wo], out)?,
            Op::AvgPool2x2 { x },
            &[x],
        )
    }

    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let (c, h, w) = chw(self.value(x), "upsample2x")?;
        let d = self.value(x).data();
        let (h2, w2) = (2 * h, 2 * w);
        let mut out = vec![0.0; c * h2 * w2];
        for ch in 0..c {
            for y in 0..h2 {
                for xx in 0..w2 {
                    out[(ch * h2 + y) * w2 + xx] = d[(ch * h + y / 2) * w + xx / 2];
                }
            }
        }
        self.push(
            "upsample2x",
            Tensor::new(vec![c, h2, w2], out)?,
            Op::Upsample2x(x),
            &[x],
        )
    }

    /// `x: C×H×W` times `m: H×W`, broadcast over channels.
    pub fn mul_spatial(&mut self, x: Var, m: Var) -> Result<Var> {
        let (c, h, w) = chw(self.value(x), "mul_spatial")?;
        if self.shape(m) != [h, w] {
            return dim_err(format!(
                "mul_spatial: map {:?} does not match {h}×{w}",
                self.shape(m)
            ));
        }
        let plane = h * w;
        let md = self.value(m).data();
        let mut out = self.value(x).data().to_vec();
        for ch in 0..c {
            for (v, &s) in out[ch * plane..(ch + 1) * plane].iter_mut().zip(md) {
                *v *= s;
            }
        }
        self.push(
            "mul_spatial",
            Tensor::new(vec![c, h, w], out)?,
            Op::MulSpatial(x, m),
            &[x, m],
        )
    }

    /// Adds `b: d` to every length-`d` row of `x`.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let d = self.value(b).numel();
        let xs = self.value(x);
        if self.value(b).rank() != 1 || xs.shape().last() != Some(&d) {
            return dim_err(format!(
                "add_row: bias {:?} vs input {:?}",
                self.shape(b),
                xs.shape()
            ));
        }
        let bd = self.value(b).data();
        let mut out = xs.data().to_vec();
        for row in out.chunks_mut(d) {
            row.iter_mut().zip(bd).for_each(|(v, &bv)| *v += bv);
        }
        let v = Tensor::new(xs.shape().to_vec(), out)?;
        self.push("add_row", v, Op::AddRow(x, b), &[x, b])
    }

    /// Layer normalization over the last axis with learnable gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        const EPS: f64 = 1e-5;
        let xs = self.value(x);
        let d = *xs.shape().last().unwrap_or(&0);
        if d == 0 || self.shape(gain) != [d] || self.shape(bias) != [d] {
            return dim_err("layer_norm: gain/bias must match the last axis");
        }
        let rows = xs.numel() / d;
        let mut xhat = vec![0.0; xs.numel()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; xs.numel()];
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        for r in 0..rows {
            let row = &xs.data()[r * d..(r + 1) * d];
            let mu = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + EPS).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let xh = (row[j] - mu) * is;
                xhat[r * d + j] = xh;
                out[r * d + j] = xh * g[j] + b[j];
            }
        }
        let v = Tensor::new(xs.shape().to_vec(), out)?;
        self.push(
            "layer_norm",
            v,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            &[x, gain, bias],
        )
    }

    /// Extracts the `h×w` window at `(y0, x0)` from every channel.
    pub fn crop(&mut self, x: Var, y0: usize, x0: usize, h: usize, w: usize) -> Result<Var> {
        let (c, hh, ww) = chw(self.value(x), "crop")?;
        if y0 + h > hh || x0 + w > ww || h == 0 || w == 0 {
            return dim_err(format!(
                "crop: window {h}×{w} at ({y0},{x0}) outside {hh}×{ww}"
            ));
        }
        let d = self.value(x).data();
        let mut out = Vec::with_capacity(c * h * w);
        for ch in 0..c {
            for y in y0..y0 + h {
                let base = (ch * hh + y) * ww;
                out.extend_from_slice(&d[base + x0..base + x0 + w]);
            }
        }
        self.push(
            "crop",
            Tensor::new(vec![c, h, w], out)?,
            Op::Crop { x, y0, x0 },
            &[x],
        )
    }

    /// Places `x: C×h×w` at `(y0, x0)` inside a zero `C×H×W` canvas.
    pub fn paste(&mut self, x: Var, y0: usize, x0: usize, hh: usize, ww: usize) -> Result<Var> {
        let (c, h, w) = chw(self.value(x), "paste")?;
        if y0 + h > hh || x0 + w > ww {
            return dim_err(format!(
                "paste: window {h}×{w} at ({y0},{x0}) outside {hh}×{ww}"
            ));
        }
        let d = self.value(x).data();
        let mut out = vec![0.0; c * hh * ww];
        for ch in 0..c {
            for y in 0..h {
                let dst = (ch * hh + y0 + y) * ww + x0;
                out[dst..dst + w].copy_from_slice(&d[(ch * h + y) * w..(ch * h + y + 1) * w]);
            }
        }
        self.push(
            "paste",
            Tensor::new(vec![c, hh, ww], out)?,
            Op::Paste { x, y0, x0 },
            &[x],
        )
    }

    /// Concatenation along the leading axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Dimension("concat of nothing".into()))?;
        let tail: Vec<usize> = self.shape(*first)[1..].to_vec();
        let mut lead = 0;
        let mut out = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            if s.is_empty() || s[1..] != tail[..] {
                return dim_err(format!("concat: trailing shape {:?} vs {:?}", s, tail));
            }
            lead += s[0];
            out.extend_from_slice(self.value(p).data());
        }
        let mut shape = vec![lead];
        shape.extend(tail);
        let v = Tensor::new(shape, out)?;
        self.push("concat", v, Op::Concat(parts.to_vec()), parts)
    }

    /// Global average pool of `x: C×H×W` to a length-`C` vector.
    pub fn spatial_mean(&mut self, x: Var) -> Result<Var> {
        let (c, h, w) = chw(self.value(x), "spatial_mean")?;
        let plane = h * w;
        let d = self.value(x).data();
        let out: Vec<f64> = (0..c)
            .map(|ch| d[ch * plane..(ch + 1) * plane].iter().sum::<f64>() / plane as f64)
            .collect();
        self.push("spatial_mean", Tensor::vector(out), Op::SpatialMean(x), &[x])
    }

    /// Mean binary cross-entropy between logits and 0/1 targets.
    pub fn bce_with_logits(&mut self, x: Var, target: &Tensor) -> Result<Var> {
        let xs = self.value(x);
        if xs.shape() != target.shape() {
            return dim_err(format!(
                "bce: logits {:?} vs target {:?}",
                xs.shape(),
                target.shape()
            ));
        }
        let n = xs.numel() as f64;
        let s: f64 = xs
            .data()
            .iter()
            .zip(target.data())
            .map(|(&z, &y)| z.max(0.0) - z * y + (-z.abs()).exp().ln_1p())
            .sum();
        self.push(
            "bce_with_logits",
            Tensor::scalar(s / n),
            Op::BceLogits {
                x,
                target: target.data().to_vec(),
            },
            &[x],
        )
    }

    /// Picks flat elements of `x` into a vector.
    pub fn gather(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let d = self.value(x).data();
        if let Some(&bad) = idx.iter().find(|&&i| i >= d.len()) {
            return dim_err(format!("gather: index {bad} out of range {}", d.len()));
        }
        let out = idx.iter().map(|&i| d[i]).collect();
        self.push("gather", Tensor::vector(out), Op::Gather(x, idx.to_vec()), &[x])
    }

    /// Writes vector `x` into positions `idx` of a zero vector of length `n`.
    pub fn scatter(&mut self, x: Var, idx: &[usize], n: usize) -> Result<Var> {
        let d = self.value(x).data();
        if d.len() != idx.len() || idx.iter().any(|&i| i >= n) {
            return dim_err("scatter: index list does not match input or target");
        }
        let mut out = vec![0.0; n];
        for (&i, &v) in idx.iter().zip(d) {
            out[i] += v;
        }
        self.push("scatter", Tensor::vector(out), Op::Scatter(x, idx.to_vec()), &[x])
    }

    /// Replays the tape in reverse from the scalar `loss`.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if matches!(self.nodes[i].op, Op::Leaf) {
                grads[i] = Some(g);
                continue;
            }
            self.backprop_node(i, &g, &mut grads);
        }

        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, node)| match (&node.op, g) {
                (Op::Leaf, Some(g)) if node.requires_grad => {
                    Some(Tensor::new(node.value.shape().to_vec(), g).expect("grad shape"))
                }
                _ => None,
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let out = node.value.data();
        let rg = |v: Var| self.nodes[v.0].requires_grad;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.numel()]);
            f(slot);
        };

        match &node.op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                let (m, k) = (self.shape(a)[0], self.shape(a)[1]);
                let nn = self.shape(b)[1];
                let (av, bv) = (self.value(a).data(), self.value(b).data());
                acc(a, &mut |ga| kernels::gemm_nt_acc(m, nn, k, g, bv, ga));
                acc(b, &mut |gb| kernels::gemm_tn_acc(k, m, nn, av, g, gb));
            }
            &Op::Add(a, b, bc) | &Op::Sub(a, b, bc) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                acc(a, &mut |ga| match bc {
                    Bcast::LeftScalar => ga[0] += g.iter().sum::<f64>(),
                    _ => ga.iter_mut().zip(g).for_each(|(d, &s)| *d += s),
                });
                acc(b, &mut |gb| match bc {
                    Bcast::RightScalar => gb[0] += sign * g.iter().sum::<f64>(),
                    _ => gb.iter_mut().zip(g).for_each(|(d, &s)| *d += sign * s),
                });
            }
            &Op::Mul(a, b, bc) => {
                let (av, bv) = (self.value(a).data(), self.value(b).data());
                acc(a, &mut |ga| match bc {
                    Bcast::Same => ga.iter_mut().zip(g.iter().zip(bv)).for_each(|(d, (&s, &y))| *d += s * y),
                    Bcast::LeftScalar => ga[0] += g.iter().zip(bv).map(|(s, y)| s * y).sum::<f64>(),
                    Bcast::RightScalar => ga.iter_mut().zip(g).for_each(|(d, &s)| *d += s * bv[0]),
                });
                acc(b, &mut |gb| match bc {
                    Bcast::Same => gb.iter_mut().zip(g.iter().zip(av)).for_each(|(d, (&s, &x))| *d += s * x),
                    Bcast::RightScalar => gb[0] += g.iter().zip(av).map(|(s, x)| s * x).sum::<f64>(),
                    Bcast::LeftScalar => gb.iter_mut().zip(g).for_each(|(d, &s)| *d += s * av[0]),
                });
            }
            &Op::Div(a, b, bc) => {
                let (av, bv) = (self.value(a).data(), self.value(b).data());
                let pick = |d: &[f64], k: usize, scalar: bool| if scalar { d[0] } else { d[k] };
                let (ls, rs) = (bc == Bcast::LeftScalar, bc == Bcast::RightScalar);
                acc(a, &mut |ga| {
                    for (k, &s) in g.iter().enumerate() {
                        let v = s / pick(bv, k, rs);
                        if ls { ga[0] += v } else { ga[k] += v }
                    }
                });
                acc(b, &mut |gb| {
                    for (k, &s) in g.iter().enumerate() {
                        let y = pick(bv, k, rs);
                        let v = -s * pick(av, k, ls) / (y * y);
                        if rs { gb[0] += v } else { gb[k] += v }
                    }
                });
            }
            &Op::Scale(a, s) => acc(a, &mut |ga| ga.iter_mut().zip(g).for_each(|(d, &v)| *d += s * v)),
            &Op::AddScalar(a) | &Op::Reshape(a) => {
                acc(a, &mut |ga| ga.iter_mut().zip(g).for_each(|(d, &v)| *d += v))
            }
            &Op::Exp(a) => acc(a, &mut |ga| {
                ga.iter_mut().zip(g.iter().zip(out)).for_each(|(d, (&s, &y))| *d += s * y)
            }),
            &Op::Sigmoid(a) => acc(a, &mut |ga| {
                ga.iter_mut()
                    .zip(g.iter().zip(out))
                    .for_each(|(d, (&s, &y))| *d += s * y * (1.0 - y))
            }),
            &Op::Relu(a) => acc(a, &mut |ga| {
                ga.iter_mut()
                    .zip(g.iter().zip(out))
                    .for_each(|(d, (&s, &y))| if y > 0.0 { *d += s })
            }),
            &Op::Recip(a) => acc(a, &mut |ga| {
                ga.iter_mut()
                    .zip(g.iter().zip(out))
                    .for_each(|(d, (&s, &y))| *d -= s * y * y)
            }),
            &Op::Softmax(a) => {
                let n = *node.value.shape().last().unwrap();
                acc(a, &mut |ga| {
                    for ((gr, yr), dr) in g.chunks(n).zip(out.chunks(n)).zip(ga.chunks_mut(n)) {
                        let dotp: f64 = gr.iter().zip(yr).map(|(s, y)| s * y).sum();
                        for j in 0..n {
                            dr[j] += yr[j] * (gr[j] - dotp);
                        }
                    }
                })
            }
            &Op::Sum(a) => acc(a, &mut |ga| ga.iter_mut().for_each(|d| *d += g[0])),
            &Op::Mean(a) => {
                let n = self.value(a).numel() as f64;
                acc(a, &mut |ga| ga.iter_mut().for_each(|d| *d += g[0] / n))
            }
            &Op::Transpose(a) => {
                let (m, n) = (self.shape(a)[0], self.shape(a)[1]);
                acc(a, &mut |ga| {
                    for i in 0..m {
                        for j in 0..n {
                            ga[i * n + j] += g[j * m + i];
                        }
                    }
                })
            }
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                cols,
            } => {
                let o = self.shape(*w)[0];
                let ck = geom.c * geom.k * geom.k;
                let plane = geom.ho * geom.wo;
                if let Some(b) = *b {
                    acc(b, &mut |gb| {
                        for (d, row) in gb.iter_mut().zip(g.chunks(plane)) {
                            *d += row.iter().sum::<f64>();
                        }
                    });
                }
                acc(*w, &mut |gw| kernels::gemm_nt_acc(o, plane, ck, g, cols, gw));
                if rg(*x) {
                    let mut dcols = vec![0.0; ck * plane];
                    kernels::gemm_tn_acc(ck, o, plane, self.value(*w).data(), g, &mut dcols);
                    acc(*x, &mut |gx| kernels::col2im_acc(&dcols, geom, gx));
                }
            }
            &Op::AvgPool2x2 { x } => {
                let (c, h, w) = (self.shape(x)[0], self.shape(x)[1], self.shape(x)[2]);
                let (ho, wo) = (h.div_ceil(2), w.div_ceil(2));
                acc(x, &mut |gx| {
                    for ch in 0..c {
                        for i in 0..ho {
                            for j in 0..wo {
                                let s = 0.25 * g[(ch * ho + i) * wo + j];
                                for (y, xx) in pool_sources(i, j, h, w) {
                                    gx[(ch * h + y) * w + xx] += s;
                                }
                            }
                        }
                    }
                })
            }
            &Op::Upsample2x(x) => {
                let (c, h, w) = (self.shape(x)[0], self.shape(x)[1], self.shape(x)[2]);
                let (h2, w2) = (2 * h, 2 * w);
                acc(x, &mut |gx| {
                    for ch in 0..c {
                        for y in 0..h2 {
                            for xx in 0..w2 {
                                gx[(ch * h + y / 2) * w + xx / 2] += g[(ch * h2 + y) * w2 + xx];
                            }
                        }
                    }
                })
            }
            &Op::MulSpatial(x, m) => {
                let plane = self.value(m).numel();
                let (xv, mv) = (self.value(x).data(), self.value(m).data());
                acc(x, &mut |gx| {
                    for (k, d) in gx.iter_mut().enumerate() {
                        *d += g[k] * mv[k % plane];
                    }
                });
                acc(m, &mut |gm| {
                    for (k, (&s, &xv)) in g.iter().zip(xv).enumerate() {
                        gm[k % plane] += s * xv;
                    }
                });
            }
            &Op::AddRow(x, b) => {
                let d = self.value(b).numel();
                acc(x, &mut |gx| gx.iter_mut().zip(g).for_each(|(a, &s)| *a += s));
                acc(b, &mut |gb| {
                    for row in g.chunks(d) {
                        gb.iter_mut().zip(row).for_each(|(a, &s)| *a += s);
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let d = self.value(*gain).numel();
                let gv = self.value(*gain).data();
                acc(*bias, &mut |gb| {
                    for row in g.chunks(d) {
                        gb.iter_mut().zip(row).for_each(|(a, &s)| *a += s);
                    }
                });
                acc(*gain, &mut |gg| {
                    for (row, xr) in g.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            gg[j] += row[j] * xr[j];
                        }
                    }
                });
                acc(*x, &mut |gx| {
                    for (r, (row, xr)) in g.chunks(d).zip(xhat.chunks(d)).enumerate() {
                        let dxh: Vec<f64> = (0..d).map(|j| row[j] * gv[j]).collect();
                        let s1: f64 = dxh.iter().sum();
                        let s2: f64 = dxh.iter().zip(xr).map(|(a, b)| a * b).sum();
                        let k = inv_std[r] / d as f64;
                        for j in 0..d {
                            gx[r * d + j] += k * (d as f64 * dxh[j] - s1 - xr[j] * s2);
                        }
                    }
                });
            }
            &Op::Crop { x, y0, x0 } => {
                let (c, h, w) = (node.value.shape()[0], node.value.shape()[1], node.value.shape()[2]);
                let (hh, ww) = (self.shape(x)[1], self.shape(x)[2]);
                acc(x, &mut |gx| {
                    for ch in 0..c {
                        for y in 0..h {
                            let dst = (ch * hh + y0 + y) * ww + x0;
                            let src = (ch * h + y) * w;
                            for j in 0..w {
                                gx[dst + j] += g[src + j];
                            }
                        }
                    }
                })
            }
            &Op::Paste { x, y0, x0 } => {
                let (c, h, w) = (self.shape(x)[0], self.shape(x)[1], self.shape(x)[2]);
                let (hh, ww) = (node.value.shape()[1], node.value.shape()[2]);
                acc(x, &mut |gx| {
                    for ch in 0..c {
                        for y in 0..h {
                            let src = (ch * hh + y0 + y) * ww + x0;
                            let dst = (ch * h + y) * w;
                            for j in 0..w {
                                gx[dst + j] += g[src + j];
                            }
                        }
                    }
                })
            }
            Op::Concat(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = self.value(p).numel();
                    acc(p, &mut |gp| {
                        gp.iter_mut().zip(&g[off..off + n]).for_each(|(a, &s)| *a += s)
                    });
                    off += n;
                }
            }
            &Op::SpatialMean(x) => {
                let s = self.shape(x);
                let plane = s[1] * s[2];
                acc(x, &mut |gx| {
                    for (k, d) in gx.iter_mut().enumerate() {
                        *d += g[k / plane] / plane as f64;
                    }
                })
            }
            Op::BceLogits { x, target } => {
                let xv = self.value(*x).data();
                let n = xv.len() as f64;
                acc(*x, &mut |gx| {
                    for ((d, &z), &y) in gx.iter_mut().zip(xv).zip(target) {
                        *d += g[0] * (sigmoid(z) - y) / n;
                    }
                })
            }
            Op::Gather(x, idx) => acc(*x, &mut |gx| {
                for (&i, &s) in idx.iter().zip(g) {
                    gx[i] += s;
                }
            }),
            Op::Scatter(x, idx) => acc(*x, &mut |gx| {
                for (d, &i) in gx.iter_mut().zip(idx) {
                    *d += g[i];
                }
            }),
        }
    }
}

/// Source pixels of pooled cell `(i, j)`, with high-side replication.
fn pool_sources(i: usize, j: usize, h: usize, w: usize) -> [(usize, usize); 4] {
    let y0 = 2 * i;
    let x0 = 2 * j;
    let y1 = (y0 + 1).min(h - 1);
    let x1 = (x0 + 1).min(w - 1);
    [(y0, x0), (y0, x1), (y1, x0), (y1, x1)]
}
