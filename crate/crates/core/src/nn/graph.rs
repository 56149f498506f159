//! A small reverse-mode autodiff engine: an append-only arena of tensor
//! nodes, each produced by one op. Appending preserves topological order, so
//! backward is a single reverse sweep. The op set is exactly what the
//! classifier, the generator and the composite objective need — nothing more.
//!
//! Values are computed and stored in f64. Every op checks its output for
//! NaN/Inf and fails rather than letting poison propagate silently; training
//! loops translate that failure into a divergence error with an epoch index.
//!
//! Shapes: feature maps are rank-4 `[C, D, H, W]`, conv weights are rank-5
//! `[Cout, Cin, k, k, k]`, channel vectors are rank-1 `[C]`, scalars `[1]`.

use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VarId(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Conv3d {
        x: VarId,
        w: VarId,
        b: VarId,
        stride: usize,
        pad: usize,
    },
    Silu(VarId),
    Sigmoid(VarId),
    Add(VarId, VarId),
    Sub(VarId, VarId),
    Mul(VarId, VarId),
    Abs(VarId),
    Square(VarId),
    /// y = mul * x + add, elementwise with scalar constants (the offset
    /// only matters at evaluation time, so the op records just the slope).
    Affine {
        x: VarId,
        mul: f64,
    },
    /// y = ln(max(x, min)), elementwise.
    LogClamped {
        x: VarId,
        min: f64,
    },
    /// y = clamp(x, lo, hi); gradient passes only strictly inside the range.
    Clamp {
        x: VarId,
        lo: f64,
        hi: f64,
    },
    /// y[c, ...] = x[c, ...] * gamma[c] — per-channel learned scale, the
    /// determinism-friendly stand-in for batch normalization.
    ScaleChannels {
        x: VarId,
        gamma: VarId,
    },
    ConcatChannels(VarId, VarId),
    /// Nearest-neighbor upsampling by exactly 2 along each spatial axis.
    UpsampleNearest2(VarId),
    /// [C, D, H, W] -> [C], mean over the spatial grid.
    GlobalAvgPool(VarId),
    /// Scalar logit from a channel vector: dot(x, w) + b.
    DotBias {
        x: VarId,
        w: VarId,
        b: VarId,
    },
    /// Mean over every element -> scalar.
    MeanAll(VarId),
    /// Mean of several scalar nodes -> scalar (batch reduction).
    MeanOf(Vec<VarId>),
    /// Sum over every element -> scalar.
    SumAll(VarId),
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    values: Vec<f64>,
    grad: Vec<f64>,
    needs_grad: bool,
    op: Op,
}

/// Append-only computation graph.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn shape(&self, id: VarId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn values(&self, id: VarId) -> &[f64] {
        &self.nodes[id.0].values
    }

    /// Value of a scalar node.
    pub fn scalar_value(&self, id: VarId) -> f64 {
        debug_assert_eq!(self.nodes[id.0].values.len(), 1);
        self.nodes[id.0].values[0]
    }

    /// Gradient of the last backward target w.r.t. this node. Empty if the
    /// node did not participate or backward has not run.
    pub fn grad(&self, id: VarId) -> &[f64] {
        &self.nodes[id.0].grad
    }

    fn push(&mut self, shape: Vec<usize>, values: Vec<f64>, needs_grad: bool, op: Op) -> Result<VarId> {
        debug_assert_eq!(values.len(), shape.iter().product::<usize>());
        if let Some(bad) = values.iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("{} produced {bad}", op_name(&op))));
        }
        self.nodes.push(Node {
            shape,
            values,
            grad: Vec::new(),
            needs_grad,
            op,
        });
        Ok(VarId(self.nodes.len() - 1))
    }

    /// Insert an input tensor. `needs_grad` marks it as a differentiation
    /// target (a trainable parameter, or an input under a gradient check).
    pub fn leaf(&mut self, shape: Vec<usize>, values: Vec<f64>, needs_grad: bool) -> Result<VarId> {
        if values.len() != shape.iter().product::<usize>() {
            return Err(Error::Dimension(format!(
                "leaf has {} values but shape {:?} implies {}",
                values.len(),
                shape,
                shape.iter().product::<usize>()
            )));
        }
        self.push(shape, values, needs_grad, Op::Leaf)
    }

    /// A constant scalar node.
    pub fn constant(&mut self, value: f64) -> Result<VarId> {
        self.leaf(vec![1], vec![value], false)
    }

    fn feature_dims(&self, id: VarId, what: &str) -> Result<(usize, usize, usize, usize)> {
        match *self.nodes[id.0].shape {
            [c, d, h, w] => Ok((c, d, h, w)),
            ref s => Err(Error::Dimension(format!(
                "{what} must be rank-4 [C, D, H, W], got {s:?}"
            ))),
        }
    }

    fn same_shape(&self, a: VarId, b: VarId, op: &str) -> Result<()> {
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(Error::Dimension(format!(
                "{op}: shapes {:?} and {:?} differ",
                self.nodes[a.0].shape, self.nodes[b.0].shape
            )));
        }
        Ok(())
    }

    fn unary(&mut self, x: VarId, op: Op, f: impl Fn(f64) -> f64) -> Result<VarId> {
        let values = self.nodes[x.0].values.iter().map(|&v| f(v)).collect();
        let shape = self.nodes[x.0].shape.clone();
        let ng = self.nodes[x.0].needs_grad;
        self.push(shape, values, ng, op)
    }

    fn binary(&mut self, a: VarId, b: VarId, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<VarId> {
        self.same_shape(a, b, op_name(&op))?;
        let values = self.nodes[a.0]
            .values
            .iter()
            .zip(&self.nodes[b.0].values)
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        let ng = self.nodes[a.0].needs_grad || self.nodes[b.0].needs_grad;
        self.push(shape, values, ng, op)
    }

    pub fn add(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        self.binary(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        self.binary(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        self.binary(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn silu(&mut self, x: VarId) -> Result<VarId> {
        self.unary(x, Op::Silu(x), |v| v * sigmoid(v))
    }

    pub fn sigmoid(&mut self, x: VarId) -> Result<VarId> {
        self.unary(x, Op::Sigmoid(x), sigmoid)
    }

    pub fn abs(&mut self, x: VarId) -> Result<VarId> {
        self.unary(x, Op::Abs(x), f64::abs)
    }

    pub fn square(&mut self, x: VarId) -> Result<VarId> {
        self.unary(x, Op::Square(x), |v| v * v)
    }

    pub fn affine(&mut self, x: VarId, mul: f64, add: f64) -> Result<VarId> {
        self.unary(x, Op::Affine { x, mul }, |v| mul * v + add)
    }

    /// ln(max(x, min)) — the clamped log used by the perturbation loss.
    pub fn log_clamped(&mut self, x: VarId, min: f64) -> Result<VarId> {
        if min <= 0.0 {
            return Err(Error::Usage(format!(
                "log_clamped needs a positive floor, got {min}"
            )));
        }
        self.unary(x, Op::LogClamped { x, min }, |v| v.max(min).ln())
    }

    pub fn clamp(&mut self, x: VarId, lo: f64, hi: f64) -> Result<VarId> {
        self.unary(x, Op::Clamp { x, lo, hi }, |v| v.clamp(lo, hi))
    }

    pub fn scale_channels(&mut self, x: VarId, gamma: VarId) -> Result<VarId> {
        let (c, d, h, w) = self.feature_dims(x, "scale_channels input")?;
        if self.nodes[gamma.0].shape != [c] {
            return Err(Error::Dimension(format!(
                "scale_channels: gamma shape {:?} does not match {c} channels",
                self.nodes[gamma.0].shape
            )));
        }
        let spatial = d * h * w;
        let mut values = Vec::with_capacity(c * spatial);
        for ci in 0..c {
            let g = self.nodes[gamma.0].values[ci];
            values.extend(
                self.nodes[x.0].values[ci * spatial..(ci + 1) * spatial]
                    .iter()
                    .map(|&v| v * g),
            );
        }
        let ng = self.nodes[x.0].needs_grad || self.nodes[gamma.0].needs_grad;
        self.push(vec![c, d, h, w], values, ng, Op::ScaleChannels { x, gamma })
    }

    pub fn concat_channels(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let (ca, d, h, w) = self.feature_dims(a, "concat input")?;
        let (cb, db, hb, wb) = self.feature_dims(b, "concat input")?;
        if (d, h, w) != (db, hb, wb) {
            return Err(Error::Dimension(format!(
                "concat: spatial dims {:?} and {:?} differ",
                (d, h, w),
                (db, hb, wb)
            )));
        }
        let mut values = self.nodes[a.0].values.clone();
        values.extend_from_slice(&self.nodes[b.0].values);
        let ng = self.nodes[a.0].needs_grad || self.nodes[b.0].needs_grad;
        self.push(vec![ca + cb, d, h, w], values, ng, Op::ConcatChannels(a, b))
    }

    pub fn upsample_nearest2(&mut self, x: VarId) -> Result<VarId> {
        let (c, d, h, w) = self.feature_dims(x, "upsample input")?;
        let (od, oh, ow) = (2 * d, 2 * h, 2 * w);
        let xv = &self.nodes[x.0].values;
        let mut values = vec![0.0; c * od * oh * ow];
        for ci in 0..c {
            for z in 0..od {
                for y in 0..oh {
                    let src_row = ((ci * d + z / 2) * h + y / 2) * w;
                    let dst_row = ((ci * od + z) * oh + y) * ow;
                    for x_ in 0..ow {
                        values[dst_row + x_] = xv[src_row + x_ / 2];
                    }
                }
            }
        }
        let ng = self.nodes[x.0].needs_grad;
        self.push(vec![c, od, oh, ow], values, ng, Op::UpsampleNearest2(x))
    }

    pub fn global_avg_pool(&mut self, x: VarId) -> Result<VarId> {
        let (c, d, h, w) = self.feature_dims(x, "pool input")?;
        let spatial = (d * h * w) as f64;
        let xv = &self.nodes[x.0].values;
        let values = (0..c)
            .map(|ci| {
                let start = ci * d * h * w;
                xv[start..start + d * h * w].iter().sum::<f64>() / spatial
            })
            .collect();
        let ng = self.nodes[x.0].needs_grad;
        self.push(vec![c], values, ng, Op::GlobalAvgPool(x))
    }

    /// dot(x, w) + b for rank-1 x and w of equal length; b is scalar.
    pub fn dot_bias(&mut self, x: VarId, w: VarId, b: VarId) -> Result<VarId> {
        if self.nodes[x.0].shape.len() != 1 || self.nodes[x.0].shape != self.nodes[w.0].shape {
            return Err(Error::Dimension(format!(
                "dot_bias: incompatible shapes {:?} and {:?}",
                self.nodes[x.0].shape, self.nodes[w.0].shape
            )));
        }
        if self.nodes[b.0].shape != [1] {
            return Err(Error::Dimension("dot_bias: bias must be scalar".into()));
        }
        let dot: f64 = self.nodes[x.0]
            .values
            .iter()
            .zip(&self.nodes[w.0].values)
            .map(|(&a, &b)| a * b)
            .sum();
        let value = dot + self.nodes[b.0].values[0];
        let ng = self.nodes[x.0].needs_grad
            || self.nodes[w.0].needs_grad
            || self.nodes[b.0].needs_grad;
        self.push(vec![1], vec![value], ng, Op::DotBias { x, w, b })
    }

    pub fn mean_all(&mut self, x: VarId) -> Result<VarId> {
        let n = self.nodes[x.0].values.len() as f64;
        let value = self.nodes[x.0].values.iter().sum::<f64>() / n;
        let ng = self.nodes[x.0].needs_grad;
        self.push(vec![1], vec![value], ng, Op::MeanAll(x))
    }

    pub fn sum_all(&mut self, x: VarId) -> Result<VarId> {
        let value = self.nodes[x.0].values.iter().sum::<f64>();
        let ng = self.nodes[x.0].needs_grad;
        self.push(vec![1], vec![value], ng, Op::SumAll(x))
    }

    /// Mean of several scalar nodes (the batch reduction).
    pub fn mean_of(&mut self, xs: &[VarId]) -> Result<VarId> {
        if xs.is_empty() {
            return Err(Error::Usage("mean_of needs at least one node".into()));
        }
        let mut acc = 0.0;
        let mut ng = false;
        for &x in xs {
            if self.nodes[x.0].shape != [1] {
                return Err(Error::Dimension("mean_of operands must be scalar".into()));
            }
            acc += self.nodes[x.0].values[0];
            ng |= self.nodes[x.0].needs_grad;
        }
        let value = acc / xs.len() as f64;
        self.push(vec![1], vec![value], ng, Op::MeanOf(xs.to_vec()))
    }

    /// 3D cross-correlation with zero padding. x: [Cin, D, H, W],
    /// w: [Cout, Cin, k, k, k] (odd cubic kernel), b: [Cout].
    pub fn conv3d(&mut self, x: VarId, w: VarId, b: VarId, stride: usize, pad: usize) -> Result<VarId> {
        let (ci, d, h, wd) = self.feature_dims(x, "conv input")?;
        let (co, wci, k) = match *self.nodes[w.0].shape {
            [co, wci, k0, k1, k2] if k0 == k1 && k1 == k2 => (co, wci, k0),
            ref s => {
                return Err(Error::Dimension(format!(
                    "conv weight must be [Cout, Cin, k, k, k], got {s:?}"
                )))
            }
        };
        if wci != ci {
            return Err(Error::Dimension(format!(
                "conv: input has {ci} channels but weight expects {wci}"
            )));
        }
        if k % 2 == 0 {
            return Err(Error::Dimension(format!("conv kernel extent {k} is even")));
        }
        if self.nodes[b.0].shape != [co] {
            return Err(Error::Dimension(format!(
                "conv bias shape {:?} does not match {co} output channels",
                self.nodes[b.0].shape
            )));
        }
        if stride == 0 {
            return Err(Error::Usage("conv stride must be positive".into()));
        }
        let out_extent = |n: usize| -> Result<usize> {
            (n + 2 * pad)
                .checked_sub(k)
                .map(|v| v / stride + 1)
                .ok_or_else(|| {
                    Error::Dimension(format!(
                        "conv: kernel {k} exceeds padded extent {}",
                        n + 2 * pad
                    ))
                })
        };
        let (od, oh, ow) = (out_extent(d)?, out_extent(h)?, out_extent(wd)?);

        let mut out = vec![0.0; co * od * oh * ow];
        {
            let xv = &self.nodes[x.0].values;
            let wv = &self.nodes[w.0].values;
            let bv = &self.nodes[b.0].values;
            for c in 0..co {
                out[c * od * oh * ow..(c + 1) * od * oh * ow].fill(bv[c]);
            }
            for c in 0..co {
                for cin in 0..ci {
                    for kz in 0..k {
                        let (zlo, zhi) = valid_out_range(d, od, kz, stride, pad);
                        for ky in 0..k {
                            let (ylo, yhi) = valid_out_range(h, oh, ky, stride, pad);
                            for kx in 0..k {
                                let (xlo, xhi) = valid_out_range(wd, ow, kx, stride, pad);
                                if zlo >= zhi || ylo >= yhi || xlo >= xhi {
                                    continue;
                                }
                                let weight =
                                    wv[(((c * ci + cin) * k + kz) * k + ky) * k + kx];
                                for oz in zlo..zhi {
                                    let iz = oz * stride + kz - pad;
                                    for oy in ylo..yhi {
                                        let iy = oy * stride + ky - pad;
                                        let xrow = (cin * d + iz) * h * wd + iy * wd;
                                        let orow = (c * od + oz) * oh * ow + oy * ow;
                                        if stride == 1 {
                                            let ioff = xlo + kx - pad;
                                            let src = &xv[xrow + ioff..xrow + ioff + (xhi - xlo)];
                                            let dst = &mut out[orow + xlo..orow + xhi];
                                            for (o, &v) in dst.iter_mut().zip(src) {
                                                *o += weight * v;
                                            }
                                        } else {
                                            for ox in xlo..xhi {
                                                let ix = ox * stride + kx - pad;
                                                out[orow + ox] += weight * xv[xrow + ix];
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        let ng = self.nodes[x.0].needs_grad
            || self.nodes[w.0].needs_grad
            || self.nodes[b.0].needs_grad;
        self.push(
            vec![co, od, oh, ow],
            out,
            ng,
            Op::Conv3d { x, w, b, stride, pad },
        )
    }

    fn ensure_grad(&mut self, id: VarId) {
        let node = &mut self.nodes[id.0];
        if node.grad.is_empty() {
            node.grad = vec![0.0; node.values.len()];
        }
    }

    /// Reverse sweep from a scalar loss node. Gradients of all contributing
    /// `needs_grad` nodes are (re)computed from scratch; previous gradients
    /// are discarded.
    pub fn backward(&mut self, loss: VarId) -> Result<()> {
        if self.nodes[loss.0].shape != [1] {
            return Err(Error::Usage(format!(
                "backward target must be scalar, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        if !self.nodes[loss.0].needs_grad {
            return Err(Error::Usage(
                "backward target does not depend on any differentiation target".into(),
            ));
        }
        for node in &mut self.nodes {
            node.grad.clear();
        }
        self.ensure_grad(loss);
        self.nodes[loss.0].grad[0] = 1.0;

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad || self.nodes[i].grad.is_empty() {
                continue;
            }
            let op = self.nodes[i].op.clone();
            match op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    for (side, sign) in [(a, 1.0), (b, 1.0)] {
                        let _ = sign;
                        self.accumulate_elementwise(i, side, |_, g| g);
                    }
                }
                Op::Sub(a, b) => {
                    self.accumulate_elementwise(i, a, |_, g| g);
                    self.accumulate_elementwise(i, b, |_, g| -g);
                }
                Op::Mul(a, b) => {
                    if self.nodes[a.0].needs_grad {
                        let other: Vec<f64> = self.nodes[b.0].values.clone();
                        self.accumulate_indexed(i, a, |j, g| g * other[j]);
                    }
                    if self.nodes[b.0].needs_grad {
                        let other: Vec<f64> = self.nodes[a.0].values.clone();
                        self.accumulate_indexed(i, b, |j, g| g * other[j]);
                    }
                }
                Op::Silu(x) => {
                    let xs: Vec<f64> = self.nodes[x.0].values.clone();
                    self.accumulate_indexed(i, x, |j, g| {
                        let s = sigmoid(xs[j]);
                        g * (s * (1.0 + xs[j] * (1.0 - s)))
                    });
                }
                Op::Sigmoid(x) => {
                    let ys: Vec<f64> = self.nodes[i].values.clone();
                    self.accumulate_indexed(i, x, |j, g| g * ys[j] * (1.0 - ys[j]));
                }
                Op::Abs(x) => {
                    let xs: Vec<f64> = self.nodes[x.0].values.clone();
                    self.accumulate_indexed(i, x, |j, g| g * xs[j].signum() * ((xs[j] != 0.0) as u8 as f64));
                }
                Op::Square(x) => {
                    let xs: Vec<f64> = self.nodes[x.0].values.clone();
                    self.accumulate_indexed(i, x, |j, g| g * 2.0 * xs[j]);
                }
                Op::Affine { x, mul, .. } => {
                    self.accumulate_elementwise(i, x, move |_, g| g * mul);
                }
                Op::LogClamped { x, min } => {
                    let xs: Vec<f64> = self.nodes[x.0].values.clone();
                    self.accumulate_indexed(i, x, move |j, g| {
                        if xs[j] > min {
                            g / xs[j]
                        } else {
                            0.0
                        }
                    });
                }
                Op::Clamp { x, lo, hi } => {
                    let xs: Vec<f64> = self.nodes[x.0].values.clone();
                    self.accumulate_indexed(i, x, move |j, g| {
                        if xs[j] > lo && xs[j] < hi {
                            g
                        } else {
                            0.0
                        }
                    });
                }
                Op::ScaleChannels { x, gamma } => self.backward_scale_channels(i, x, gamma),
                Op::ConcatChannels(a, b) => {
                    let na = self.nodes[a.0].values.len();
                    if self.nodes[a.0].needs_grad {
                        self.ensure_grad(a);
                        for j in 0..na {
                            let g = self.nodes[i].grad[j];
                            self.nodes[a.0].grad[j] += g;
                        }
                    }
                    if self.nodes[b.0].needs_grad {
                        self.ensure_grad(b);
                        let nb = self.nodes[b.0].values.len();
                        for j in 0..nb {
                            let g = self.nodes[i].grad[na + j];
                            self.nodes[b.0].grad[j] += g;
                        }
                    }
                }
                Op::UpsampleNearest2(x) => self.backward_upsample(i, x),
                Op::GlobalAvgPool(x) => self.backward_gap(i, x),
                Op::DotBias { x, w, b } => {
                    let g = self.nodes[i].grad[0];
                    if self.nodes[x.0].needs_grad {
                        let wv: Vec<f64> = self.nodes[w.0].values.clone();
                        self.ensure_grad(x);
                        for (slot, wj) in self.nodes[x.0].grad.iter_mut().zip(&wv) {
                            *slot += g * wj;
                        }
                    }
                    if self.nodes[w.0].needs_grad {
                        let xv: Vec<f64> = self.nodes[x.0].values.clone();
                        self.ensure_grad(w);
                        for (slot, xj) in self.nodes[w.0].grad.iter_mut().zip(&xv) {
                            *slot += g * xj;
                        }
                    }
                    if self.nodes[b.0].needs_grad {
                        self.ensure_grad(b);
                        self.nodes[b.0].grad[0] += g;
                    }
                }
                Op::MeanAll(x) => {
                    let n = self.nodes[x.0].values.len() as f64;
                    let g = self.nodes[i].grad[0] / n;
                    self.accumulate_elementwise_from_scalar(x, g);
                }
                Op::SumAll(x) => {
                    let g = self.nodes[i].grad[0];
                    self.accumulate_elementwise_from_scalar(x, g);
                }
                Op::MeanOf(xs) => {
                    let g = self.nodes[i].grad[0] / xs.len() as f64;
                    for x in xs {
                        if self.nodes[x.0].needs_grad {
                            self.ensure_grad(x);
                            self.nodes[x.0].grad[0] += g;
                        }
                    }
                }
                Op::Conv3d { x, w, b, stride, pad } => {
                    self.backward_conv3d(i, x, w, b, stride, pad);
                }
            }
        }
        Ok(())
    }

    /// out and input have identical element layout; df maps (index, upstream
    /// grad) to the input gradient contribution.
    fn accumulate_indexed(&mut self, out: usize, input: VarId, df: impl Fn(usize, f64) -> f64) {
        if !self.nodes[input.0].needs_grad {
            return;
        }
        self.ensure_grad(input);
        let n = self.nodes[out].grad.len();
        for j in 0..n {
            let g = self.nodes[out].grad[j];
            self.nodes[input.0].grad[j] += df(j, g);
        }
    }

    fn accumulate_elementwise(&mut self, out: usize, input: VarId, df: impl Fn(usize, f64) -> f64) {
        self.accumulate_indexed(out, input, df);
    }

    fn accumulate_elementwise_from_scalar(&mut self, input: VarId, g: f64) {
        if !self.nodes[input.0].needs_grad {
            return;
        }
        self.ensure_grad(input);
        for slot in self.nodes[input.0].grad.iter_mut() {
            *slot += g;
        }
    }

    fn backward_scale_channels(&mut self, out: usize, x: VarId, gamma: VarId) {
        let shape = self.nodes[out].shape.clone();
        let (c, d, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        let spatial = d * h * w;
        if self.nodes[x.0].needs_grad {
            let gv: Vec<f64> = self.nodes[gamma.0].values.clone();
            self.ensure_grad(x);
            for ci in 0..c {
                let g = gv[ci];
                for j in ci * spatial..(ci + 1) * spatial {
                    let up = self.nodes[out].grad[j];
                    self.nodes[x.0].grad[j] += up * g;
                }
            }
        }
        if self.nodes[gamma.0].needs_grad {
            let xv: Vec<f64> = self.nodes[x.0].values.clone();
            self.ensure_grad(gamma);
            for ci in 0..c {
                let mut acc = 0.0;
                for j in ci * spatial..(ci + 1) * spatial {
                    acc += self.nodes[out].grad[j] * xv[j];
                }
                self.nodes[gamma.0].grad[ci] += acc;
            }
        }
    }

    fn backward_upsample(&mut self, out: usize, x: VarId) {
        if !self.nodes[x.0].needs_grad {
            return;
        }
        let shape = self.nodes[x.0].shape.clone();
        let (c, d, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        let (od, oh, ow) = (2 * d, 2 * h, 2 * w);
        self.ensure_grad(x);
        for ci in 0..c {
            for z in 0..od {
                for y in 0..oh {
                    let dst_row = ((ci * d + z / 2) * h + y / 2) * w;
                    let src_row = ((ci * od + z) * oh + y) * ow;
                    for x_ in 0..ow {
                        let g = self.nodes[out].grad[src_row + x_];
                        self.nodes[x.0].grad[dst_row + x_ / 2] += g;
                    }
                }
            }
        }
    }

    fn backward_gap(&mut self, out: usize, x: VarId) {
        if !self.nodes[x.0].needs_grad {
            return;
        }
        let shape = self.nodes[x.0].shape.clone();
        let (c, d, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        let spatial = d * h * w;
        self.ensure_grad(x);
        for ci in 0..c {
            let g = self.nodes[out].grad[ci] / spatial as f64;
            for j in ci * spatial..(ci + 1) * spatial {
                self.nodes[x.0].grad[j] += g;
            }
        }
    }

    fn backward_conv3d(&mut self, out: usize, x: VarId, w: VarId, b: VarId, stride: usize, pad: usize) {
        let xshape = self.nodes[x.0].shape.clone();
        let wshape = self.nodes[w.0].shape.clone();
        let oshape = self.nodes[out].shape.clone();
        let (ci, d, h, wd) = (xshape[0], xshape[1], xshape[2], xshape[3]);
        let (co, k) = (wshape[0], wshape[2]);
        let (od, oh, ow) = (oshape[1], oshape[2], oshape[3]);

        if self.nodes[b.0].needs_grad {
            self.ensure_grad(b);
            for c in 0..co {
                let mut acc = 0.0;
                for j in c * od * oh * ow..(c + 1) * od * oh * ow {
                    acc += self.nodes[out].grad[j];
                }
                self.nodes[b.0].grad[c] += acc;
            }
        }

        let x_needs = self.nodes[x.0].needs_grad;
        let w_needs = self.nodes[w.0].needs_grad;
        if !x_needs && !w_needs {
            return;
        }
        // Snapshot values needed on the other side of each product.
        let xv: Vec<f64> = self.nodes[x.0].values.clone();
        let wv: Vec<f64> = self.nodes[w.0].values.clone();
        if x_needs {
            self.ensure_grad(x);
        }
        if w_needs {
            self.ensure_grad(w);
        }
        for c in 0..co {
            for cin in 0..ci {
                for kz in 0..k {
                    let (zlo, zhi) = valid_out_range(d, od, kz, stride, pad);
                    for ky in 0..k {
                        let (ylo, yhi) = valid_out_range(h, oh, ky, stride, pad);
                        for kx in 0..k {
                            let (xlo, xhi) = valid_out_range(wd, ow, kx, stride, pad);
                            if zlo >= zhi || ylo >= yhi || xlo >= xhi {
                                continue;
                            }
                            let widx = (((c * ci + cin) * k + kz) * k + ky) * k + kx;
                            let weight = wv[widx];
                            let mut wacc = 0.0;
                            for oz in zlo..zhi {
                                let iz = oz * stride + kz - pad;
                                for oy in ylo..yhi {
                                    let iy = oy * stride + ky - pad;
                                    let xrow = (cin * d + iz) * h * wd + iy * wd;
                                    let orow = (c * od + oz) * oh * ow + oy * ow;
                                    for ox in xlo..xhi {
                                        let ix = ox * stride + kx - pad;
                                        let g = self.nodes[out].grad[orow + ox];
                                        if w_needs {
                                            wacc += g * xv[xrow + ix];
                                        }
                                        if x_needs {
                                            self.nodes[x.0].grad[xrow + ix] += g * weight;
                                        }
                                    }
                                }
                            }
                            if w_needs {
                                self.nodes[w.0].grad[widx] += wacc;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Half-open range of output coordinates whose corresponding input
/// coordinate (o*stride + k_off - pad) lies inside [0, extent_in).
fn valid_out_range(
    extent_in: usize,
    extent_out: usize,
    k_off: usize,
    stride: usize,
    pad: usize,
) -> (usize, usize) {
    let s = stride as isize;
    let shift = pad as isize - k_off as isize;
    // o*stride >= shift
    let lo = if shift <= 0 {
        0
    } else {
        ((shift + s - 1) / s) as usize
    };
    // o*stride <= extent_in - 1 + shift - ... i.e. o*stride + k_off - pad <= extent_in - 1
    let hi_num = extent_in as isize - 1 + shift;
    let hi = if hi_num < 0 {
        0
    } else {
        (hi_num / s + 1) as usize
    };
    (lo.min(extent_out), hi.min(extent_out))
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::Conv3d { .. } => "conv3d",
        Op::Silu(_) => "silu",
        Op::Sigmoid(_) => "sigmoid",
        Op::Add(..) => "add",
        Op::Sub(..) => "sub",
        Op::Mul(..) => "mul",
        Op::Abs(_) => "abs",
        Op::Square(_) => "square",
        Op::Affine { .. } => "affine",
        Op::LogClamped { .. } => "log_clamped",
        Op::Clamp { .. } => "clamp",
        Op::ScaleChannels { .. } => "scale_channels",
        Op::ConcatChannels(..) => "concat_channels",
        Op::UpsampleNearest2(_) => "upsample_nearest2",
        Op::GlobalAvgPool(_) => "global_avg_pool",
        Op::DotBias { .. } => "dot_bias",
        Op::MeanAll(_) => "mean_all",
        Op::MeanOf(_) => "mean_of",
        Op::SumAll(_) => "sum_all",
    }
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Central finite difference of `eval` w.r.t. entry `i` of `base`.
    fn central_diff(eval: &dyn Fn(&[f64]) -> f64, base: &[f64], i: usize, h: f64) -> f64 {
        let mut hi = base.to_vec();
        let mut lo = base.to_vec();
        hi[i] += h;
        lo[i] -= h;
        (eval(&hi) - eval(&lo)) / (2.0 * h)
    }

    fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
        analytic
            .iter()
            .zip(numeric)
            .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-6))
            .fold(0.0, f64::max)
    }

    #[test]
    fn conv_identity_kernel() {
        let mut g = Graph::new();
        let x = g
            .leaf(vec![1, 2, 2, 2], (1..=8).map(|v| v as f64).collect(), false)
            .unwrap();
        let w = g.leaf(vec![1, 1, 1, 1, 1], vec![1.0], false).unwrap();
        let b = g.leaf(vec![1], vec![0.0], false).unwrap();
        let y = g.conv3d(x, w, b, 1, 0).unwrap();
        assert_eq!(g.values(y), g.values(x));
    }

    #[test]
    fn conv_zero_input_gives_bias() {
        let mut g = Graph::new();
        let x = g.leaf(vec![1, 3, 3, 3], vec![0.0; 27], false).unwrap();
        let w = g.leaf(vec![2, 1, 3, 3, 3], vec![0.5; 54], false).unwrap();
        let b = g.leaf(vec![2], vec![1.5, -2.0], false).unwrap();
        let y = g.conv3d(x, w, b, 1, 1).unwrap();
        assert_eq!(g.shape(y), &[2, 3, 3, 3]);
        assert!(g.values(y)[..27].iter().all(|&v| v == 1.5));
        assert!(g.values(y)[27..].iter().all(|&v| v == -2.0));
    }

    #[test]
    fn conv_all_ones_sums_to_27() {
        let mut g = Graph::new();
        let x = g.leaf(vec![1, 3, 3, 3], vec![1.0; 27], false).unwrap();
        let w = g.leaf(vec![1, 1, 3, 3, 3], vec![1.0; 27], false).unwrap();
        let b = g.leaf(vec![1], vec![0.0], false).unwrap();
        let y = g.conv3d(x, w, b, 1, 0).unwrap();
        assert_eq!(g.shape(y), &[1, 1, 1, 1]);
        assert_eq!(g.values(y), &[27.0]);
    }

    #[test]
    fn conv_rejects_channel_mismatch_and_even_kernels() {
        let mut g = Graph::new();
        let x = g.leaf(vec![2, 2, 2, 2], vec![0.0; 16], false).unwrap();
        let w = g.leaf(vec![1, 3, 1, 1, 1], vec![0.0; 3], false).unwrap();
        let b = g.leaf(vec![1], vec![0.0], false).unwrap();
        assert!(matches!(g.conv3d(x, w, b, 1, 0), Err(Error::Dimension(_))));

        let w2 = g.leaf(vec![1, 2, 2, 2, 2], vec![0.0; 16], false).unwrap();
        assert!(matches!(g.conv3d(x, w2, b, 1, 0), Err(Error::Dimension(_))));
    }

    #[test]
    fn backward_sum_of_weights_is_ones() {
        let mut g = Graph::new();
        let w = g.leaf(vec![1, 1, 1, 3], vec![1.0, 2.0, 3.0], true).unwrap();
        let loss = g.sum_all(w).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(w), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_sum_of_squares() {
        let mut g = Graph::new();
        let w = g.leaf(vec![2], vec![1.0, 2.0], true).unwrap();
        let sq = g.square(w).unwrap();
        let loss = g.sum_all(sq).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(w), &[2.0, 4.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let w = g.leaf(vec![2], vec![1.0, 2.0], true).unwrap();
        assert!(matches!(g.backward(w), Err(Error::Usage(_))));
    }

    #[test]
    fn non_finite_values_are_rejected() {
        let mut g = Graph::new();
        let x = g.leaf(vec![1], vec![1e308], false).unwrap();
        let doubled = g.affine(x, 2.0, 0.0); // overflows to inf
        assert!(matches!(doubled, Err(Error::NonFinite(_))));
    }

    /// Every differentiable op, checked against central finite differences
    /// through a small composite expression.
    #[test]
    fn elementwise_ops_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let base: Vec<f64> = (0..8).map(|_| rng.random_range(-1.5..1.5)).collect();

        // loss = mean(silu(a)² · sigmoid(a) + |a| − clamp(a, -1, 1))
        // (kinks at 0 and ±1 avoided by nudging the base away from them).
        let base: Vec<f64> = base
            .into_iter()
            .map(|v| {
                let mut v = v;
                for kink in [-1.0, 0.0, 1.0] {
                    if (v - kink).abs() < 0.05 {
                        v += 0.1;
                    }
                }
                v
            })
            .collect();
        let eval = |vals: &[f64]| -> f64 {
            let mut g = Graph::new();
            let a = g.leaf(vec![8], vals.to_vec(), true).unwrap();
            let s = g.silu(a).unwrap();
            let s2 = g.square(s).unwrap();
            let sig = g.sigmoid(a).unwrap();
            let prod = g.mul(s2, sig).unwrap();
            let ab = g.abs(a).unwrap();
            let cl = g.clamp(a, -1.0, 1.0).unwrap();
            let diff = g.sub(ab, cl).unwrap();
            let tot = g.add(prod, diff).unwrap();
            let loss = g.mean_all(tot).unwrap();
            g.scalar_value(loss)
        };
        let mut g = Graph::new();
        let a = g.leaf(vec![8], base.clone(), true).unwrap();
        let s = g.silu(a).unwrap();
        let s2 = g.square(s).unwrap();
        let sig = g.sigmoid(a).unwrap();
        let prod = g.mul(s2, sig).unwrap();
        let ab = g.abs(a).unwrap();
        let cl = g.clamp(a, -1.0, 1.0).unwrap();
        let diff = g.sub(ab, cl).unwrap();
        let tot = g.add(prod, diff).unwrap();
        let loss = g.mean_all(tot).unwrap();
        g.backward(loss).unwrap();

        let numeric: Vec<f64> = (0..8)
            .map(|i| central_diff(&eval, &base, i, 1e-4))
            .collect();
        let err = max_rel_err(g.grad(a), &numeric);
        assert!(err < 1e-3, "max relative error {err}");
    }

    #[test]
    fn conv_and_structure_ops_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let nx = 2 * 4 * 4 * 4;
        let nw = 3 * 2 * 27;
        let x0: Vec<f64> = (0..nx).map(|_| rng.random_range(-1.0..1.0)).collect();
        let w0: Vec<f64> = (0..nw).map(|_| rng.random_range(-0.5..0.5)).collect();
        let b0: Vec<f64> = vec![0.1, -0.2, 0.3];
        let gamma0: Vec<f64> = vec![1.1, 0.9, 1.3];

        // loss = mean over channels of GAP(scale(silu(conv(x)), gamma)),
        // plus an upsample+concat branch to cover those ops.
        let eval = |xs: &[f64], ws: &[f64], bs: &[f64], gs: &[f64]| -> f64 {
            let mut g = Graph::new();
            let x = g.leaf(vec![2, 4, 4, 4], xs.to_vec(), true).unwrap();
            let w = g.leaf(vec![3, 2, 3, 3, 3], ws.to_vec(), true).unwrap();
            let b = g.leaf(vec![3], bs.to_vec(), true).unwrap();
            let gamma = g.leaf(vec![3], gs.to_vec(), true).unwrap();
            let c = g.conv3d(x, w, b, 2, 1).unwrap(); // [3,2,2,2]
            let act = g.silu(c).unwrap();
            let sc = g.scale_channels(act, gamma).unwrap();
            let up = g.upsample_nearest2(sc).unwrap(); // [3,4,4,4]
            let cat = g.concat_channels(up, x).unwrap(); // [5,4,4,4]
            let pooled = g.global_avg_pool(cat).unwrap(); // [5]
            let wv = g.leaf(vec![5], vec![0.3, -0.7, 0.5, 0.2, -0.1], false).unwrap();
            let bias = g.leaf(vec![1], vec![0.05], false).unwrap();
            let logit = g.dot_bias(pooled, wv, bias).unwrap();
            let prob = g.sigmoid(logit).unwrap();
            g.scalar_value(prob)
        };

        let mut g = Graph::new();
        let x = g.leaf(vec![2, 4, 4, 4], x0.clone(), true).unwrap();
        let w = g.leaf(vec![3, 2, 3, 3, 3], w0.clone(), true).unwrap();
        let b = g.leaf(vec![3], b0.clone(), true).unwrap();
        let gamma = g.leaf(vec![3], gamma0.clone(), true).unwrap();
        let c = g.conv3d(x, w, b, 2, 1).unwrap();
        let act = g.silu(c).unwrap();
        let sc = g.scale_channels(act, gamma).unwrap();
        let up = g.upsample_nearest2(sc).unwrap();
        let cat = g.concat_channels(up, x).unwrap();
        let pooled = g.global_avg_pool(cat).unwrap();
        let wv = g.leaf(vec![5], vec![0.3, -0.7, 0.5, 0.2, -0.1], false).unwrap();
        let bias = g.leaf(vec![1], vec![0.05], false).unwrap();
        let logit = g.dot_bias(pooled, wv, bias).unwrap();
        let prob = g.sigmoid(logit).unwrap();
        g.backward(prob).unwrap();

        let h = 1e-4;
        // Check a deterministic sample of coordinates from each tensor.
        let sample = |n: usize| -> Vec<usize> { (0..n).step_by((n / 10).max(1)).collect() };
        for (leaf, base, which) in [
            (x, &x0, 0usize),
            (w, &w0, 1),
            (b, &b0, 2),
            (gamma, &gamma0, 3),
        ] {
            let analytic = g.grad(leaf).to_vec();
            for i in sample(base.len()) {
                let f = |vals: &[f64]| match which {
                    0 => eval(vals, &w0, &b0, &gamma0),
                    1 => eval(&x0, vals, &b0, &gamma0),
                    2 => eval(&x0, &w0, vals, &gamma0),
                    _ => eval(&x0, &w0, &b0, vals),
                };
                let numeric = central_diff(&f, base, i, h);
                let denom = analytic[i].abs().max(numeric.abs()).max(1e-6);
                let rel = (analytic[i] - numeric).abs() / denom;
                assert!(
                    rel < 1e-3,
                    "tensor {which} coord {i}: analytic {} vs numeric {numeric} (rel {rel})",
                    analytic[i]
                );
            }
        }
    }

    #[test]
    fn conv_strides_and_padding_shapes() {
        let mut g = Graph::new();
        let x = g.leaf(vec![1, 5, 5, 5], vec![1.0; 125], false).unwrap();
        let w = g.leaf(vec![1, 1, 3, 3, 3], vec![1.0; 27], false).unwrap();
        let b = g.leaf(vec![1], vec![0.0], false).unwrap();
        let y = g.conv3d(x, w, b, 2, 1).unwrap();
        assert_eq!(g.shape(y), &[1, 3, 3, 3]);
        // Center output voxel sees the full 27-voxel window.
        assert_eq!(g.values(y)[13], 27.0);
        // Corner output voxel (0,0,0) covers input [-1..1]^3 → 8 valid voxels.
        assert_eq!(g.values(y)[0], 8.0);
    }

    #[test]
    fn upsample_doubles_each_axis() {
        let mut g = Graph::new();
        let x = g
            .leaf(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0], false)
            .unwrap();
        let y = g.upsample_nearest2(x).unwrap();
        assert_eq!(g.shape(y), &[1, 2, 4, 4]);
        let v = g.values(y);
        assert_eq!(v[0], 1.0);
        assert_eq!(v[1], 1.0);
        assert_eq!(v[2], 2.0);
        assert_eq!(v[4], 1.0); // second row repeats the first source row
        assert_eq!(v[16], 1.0); // second z-slice repeats the first
    }

    #[test]
    fn mean_of_averages_scalars() {
        let mut g = Graph::new();
        let a = g.leaf(vec![1], vec![1.0], true).unwrap();
        let b = g.leaf(vec![1], vec![3.0], true).unwrap();
        let m = g.mean_of(&[a, b]).unwrap();
        assert_eq!(g.scalar_value(m), 2.0);
        g.backward(m).unwrap();
        assert_eq!(g.grad(a), &[0.5]);
        assert_eq!(g.grad(b), &[0.5]);
    }

    #[test]
    fn gradients_skip_frozen_subgraphs() {
        let mut g = Graph::new();
        let frozen = g.leaf(vec![2], vec![1.0, 2.0], false).unwrap();
        let live = g.leaf(vec![2], vec![3.0, 4.0], true).unwrap();
        let prod = g.mul(frozen, live).unwrap();
        let loss = g.sum_all(prod).unwrap();
        g.backward(loss).unwrap();
        assert!(g.grad(frozen).is_empty());
        assert_eq!(g.grad(live), &[1.0, 2.0]);
    }
}
