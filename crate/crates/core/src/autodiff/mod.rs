//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every primitive evaluates eagerly and appends a node. Nodes whose inputs
//! all lack `requires_grad` are stored as constants and skipped by
//! [`Tape::backward`]. Adjoints are replayed in reverse record order, so a
//! fixed sequence of primitives yields bitwise-identical gradients.

mod conv;
pub mod gradcheck;

use crate::error::{Error, Result};
use crate::tensor::{numel, Scalar, Tensor};

use conv::ConvGeom;

pub use gradcheck::finite_difference_check;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// One group list per batch item, or a single list shared by the whole batch.
/// Output channel `j` of item `b` is the sum of the input channels in `groups[b][j]`;
/// an empty group yields an all-zero channel.
pub type ChannelGroups = Vec<Vec<Vec<usize>>>;

#[derive(Debug)]
enum Op<T: Scalar> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Matmul(Var, Var),
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        geom: ConvGeom,
    },
    Upsample2x(Var),
    Relu(Var),
    Exp(Var),
    Log(Var),
    ClampMin(Var, T),
    Sum { x: Var, map: Vec<usize> },
    Mean { x: Var, map: Vec<usize>, count: usize },
    Concat { inputs: Vec<Var>, axis: usize },
    Gather { x: Var, positions: Vec<[usize; 3]> },
    Dot(Var, Var),
    Norm(Var),
    Softmax { x: Var, axis: usize },
    LogSoftmax { x: Var, axis: usize },
    InstanceNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    MergeChannels { x: Var, groups: ChannelGroups },
    Reshape(Var),
}

#[derive(Debug)]
struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

#[derive(Debug)]
pub struct Tape<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
    strict: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Output shape of reducing `shape` over `axes`, plus the output index of each input element.
fn reduction_map(shape: &[usize], axes: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let kept: Vec<usize> = (0..shape.len()).filter(|d| !axes.contains(d)).collect();
    let out_shape: Vec<usize> = if kept.is_empty() {
        vec![1]
    } else {
        kept.iter().map(|&d| shape[d]).collect()
    };
    // stride in the output for each input dimension (0 for reduced dims)
    let mut out_stride = vec![0usize; shape.len()];
    let mut acc = 1;
    for &d in kept.iter().rev() {
        out_stride[d] = acc;
        acc *= shape[d];
    }
    let n = numel(shape);
    let mut map = Vec::with_capacity(n);
    let mut idx = vec![0usize; shape.len()];
    for _ in 0..n {
        map.push(idx.iter().zip(&out_stride).map(|(i, s)| i * s).sum());
        for d in (0..shape.len()).rev() {
            idx[d] += 1;
            if idx[d] < shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    (out_shape, map)
}

fn accumulate<T: Scalar>(slot: &mut Option<Vec<T>>, g: Vec<T>) {
    match slot {
        Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
        None => *slot = Some(g),
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            strict: false,
        }
    }

    /// Reject non-finite inputs to every primitive.
    pub fn strict() -> Self {
        Tape {
            nodes: Vec::new(),
            strict: true,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Register a leaf; it participates in differentiation iff `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: Tensor<T>) -> Var {
        let requires_grad = tensor.requires_grad();
        self.nodes.push(Node {
            value: tensor,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, tensor: Tensor<T>) -> Var {
        self.leaf(tensor.with_requires_grad(false))
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient accumulated on a leaf by [`Tape::backward`].
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].value.grad()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.value.zero_grad();
        }
    }

    fn check_finite(&self, op: &'static str, inputs: &[Var]) -> Result<()> {
        if self.strict && inputs.iter().any(|v| !self.nodes[v.0].value.all_finite()) {
            return Err(Error::NonFinite { op });
        }
        Ok(())
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let value = Tensor::new(shape, data).expect("primitive produced consistent shape");
        self.nodes.push(Node {
            value,
            op: if requires_grad { op } else { Op::Leaf },
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::shape(op, format!("operands {sa:?} and {sb:?} differ")));
        }
        Ok(())
    }

    fn binary(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T, record: Op<T>) -> Result<Var> {
        self.same_shape(op, a, b)?;
        self.check_finite(op, &[a, b])?;
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, data, record, &[a, b]))
    }

    fn unary(&mut self, op: &'static str, x: Var, f: impl Fn(T) -> T, record: Op<T>) -> Result<Var> {
        self.check_finite(op, &[x])?;
        let data = self.data(x).iter().map(|&v| f(v)).collect();
        let shape = self.shape(x).to_vec();
        Ok(self.push(shape, data, record, &[x]))
    }

    /// Element-wise sum; operands must share a shape.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let c = T::of(c);
        self.unary("scale", x, |v| v * c, Op::Scale(x, c))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        let c = T::of(c);
        self.unary("add_scalar", x, |v| v + c, Op::AddScalar(x))
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", format!("cannot multiply {sa:?} by {sb:?}")));
        }
        self.check_finite("matmul", &[a, b])?;
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let (da, db) = (self.data(a), self.data(b));
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            for p in 0..k {
                let av = da[i * k + p];
                for (o, &bv) in out[i * n..(i + 1) * n].iter_mut().zip(&db[p * n..(p + 1) * n]) {
                    *o += av * bv;
                }
            }
        }
        Ok(self.push(vec![m, n], out, Op::Matmul(a, b), &[a, b]))
    }

    /// NCHW convolution with `weight: [out, in, kh, kw]`, optional `bias: [out]`, zero padding.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let si = self.shape(input).to_vec();
        let sw = self.shape(weight).to_vec();
        if si.len() != 4 || sw.len() != 4 {
            return Err(Error::shape("conv2d", format!("expected rank-4 input and weight, got {si:?} and {sw:?}")));
        }
        if si[1] != sw[1] {
            return Err(Error::shape(
                "conv2d",
                format!("input has {} channels but weight {sw:?} expects {}", si[1], sw[1]),
            ));
        }
        if let Some(b) = bias {
            let sb = self.shape(b);
            if sb != [sw[0]] {
                return Err(Error::shape("conv2d", format!("bias {sb:?} does not match {} output channels", sw[0])));
            }
        }
        let (out_h, out_w) = match (
            ConvGeom::out_extent(si[2], sw[2], stride, pad),
            ConvGeom::out_extent(si[3], sw[3], stride, pad),
        ) {
            (Some(h), Some(w)) => (h, w),
            _ => {
                return Err(Error::shape(
                    "conv2d",
                    format!("kernel {}x{} does not fit input {}x{} with pad {pad} stride {stride}", sw[2], sw[3], si[2], si[3]),
                ))
            }
        };
        let mut inputs = vec![input, weight];
        inputs.extend(bias);
        self.check_finite("conv2d", &inputs)?;
        let geom = ConvGeom {
            batch: si[0],
            in_ch: si[1],
            in_h: si[2],
            in_w: si[3],
            out_ch: sw[0],
            kh: sw[2],
            kw: sw[3],
            stride,
            pad,
            out_h,
            out_w,
        };
        let out = conv::forward(&geom, self.data(input), self.data(weight), bias.map(|b| self.data(b)));
        Ok(self.push(
            vec![geom.batch, geom.out_ch, out_h, out_w],
            out,
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            },
            &inputs,
        ))
    }

    /// Nearest-neighbour 2x upsampling of an NCHW tensor.
    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(Error::shape("upsample2x", format!("expected rank 4, got {s:?}")));
        }
        self.check_finite("upsample2x", &[x])?;
        let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
        let src = self.data(x);
        let mut out = vec![T::zero(); planes * 4 * h * w];
        for p in 0..planes {
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    out[(p * 2 * h + y) * 2 * w + xx] = src[(p * h + y / 2) * w + xx / 2];
                }
            }
        }
        Ok(self.push(vec![s[0], s[1], 2 * h, 2 * w], out, Op::Upsample2x(x), &[x]))
    }

    /// Rectifier; the subgradient at 0 is 0.
    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary("relu", x, |v| if v > T::zero() { v } else { T::zero() }, Op::Relu(x))
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary("exp", x, |v| v.exp(), Op::Exp(x))
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.unary("log", x, |v| v.ln(), Op::Log(x))
    }

    /// `max(x, lo)`; gradient passes only where `x > lo`.
    pub fn clamp_min(&mut self, x: Var, lo: f64) -> Result<Var> {
        let lo = T::of(lo);
        self.unary("clamp_min", x, |v| if v > lo { v } else { lo }, Op::ClampMin(x, lo))
    }

    fn check_axes(&self, op: &'static str, x: Var, axes: &[usize]) -> Result<()> {
        let rank = self.shape(x).len();
        if axes.iter().any(|&a| a >= rank) {
            return Err(Error::shape(op, format!("axes {axes:?} out of range for {:?}", self.shape(x))));
        }
        Ok(())
    }

    /// Sum over `axes` (removed from the output shape; `[1]` if none remain).
    pub fn sum_axes(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        self.check_axes("sum", x, axes)?;
        self.check_finite("sum", &[x])?;
        let (out_shape, map) = reduction_map(self.shape(x), axes);
        let mut out = vec![T::zero(); numel(&out_shape)];
        for (&v, &o) in self.data(x).iter().zip(&map) {
            out[o] += v;
        }
        Ok(self.push(out_shape, out, Op::Sum { x, map }, &[x]))
    }

    pub fn mean_axes(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        self.check_axes("mean", x, axes)?;
        self.check_finite("mean", &[x])?;
        let (out_shape, map) = reduction_map(self.shape(x), axes);
        let count = numel(self.shape(x)) / numel(&out_shape);
        let mut out = vec![T::zero(); numel(&out_shape)];
        for (&v, &o) in self.data(x).iter().zip(&map) {
            out[o] += v;
        }
        let inv = T::one() / T::of(count as f64);
        out.iter_mut().for_each(|v| *v *= inv);
        Ok(self.push(out_shape, out, Op::Mean { x, map, count }, &[x]))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let axes: Vec<usize> = (0..self.shape(x).len()).collect();
        self.sum_axes(x, &axes)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let axes: Vec<usize> = (0..self.shape(x).len()).collect();
        self.mean_axes(x, &axes)
    }

    /// Concatenate along `axis`; all other extents must agree.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::shape("concat", "no inputs"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::shape("concat", format!("axis {axis} out of range for {base:?}")));
        }
        for &v in inputs {
            let s = self.shape(v);
            let ok = s.len() == base.len() && s.iter().zip(&base).enumerate().all(|(d, (a, b))| d == axis || a == b);
            if !ok {
                return Err(Error::shape("concat", format!("{s:?} incompatible with {base:?} along axis {axis}")));
            }
        }
        self.check_finite("concat", inputs)?;
        let (outer, _, inner) = split_axis(&base, axis);
        let total: usize = inputs.iter().map(|&v| self.shape(v)[axis]).sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let n = self.shape(v)[axis] * inner;
                out.extend_from_slice(&self.data(v)[o * n..(o + 1) * n]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        Ok(self.push(
            shape,
            out,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            inputs,
        ))
    }

    /// Gather feature vectors at `(batch, y, x)` positions of an NCHW tensor into `[n, C]`.
    pub fn gather_positions(&mut self, x: Var, positions: &[[usize; 3]]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(Error::shape("gather", format!("expected rank 4, got {s:?}")));
        }
        if positions.is_empty() {
            return Err(Error::shape("gather", "empty position set"));
        }
        if let Some(p) = positions.iter().find(|p| p[0] >= s[0] || p[1] >= s[2] || p[2] >= s[3]) {
            return Err(Error::shape("gather", format!("position {p:?} outside {s:?}")));
        }
        self.check_finite("gather", &[x])?;
        let (c, h, w) = (s[1], s[2], s[3]);
        let src = self.data(x);
        let mut out = Vec::with_capacity(positions.len() * c);
        for p in positions {
            for ch in 0..c {
                out.push(src[((p[0] * c + ch) * h + p[1]) * w + p[2]]);
            }
        }
        Ok(self.push(
            vec![positions.len(), c],
            out,
            Op::Gather {
                x,
                positions: positions.to_vec(),
            },
            &[x],
        ))
    }

    /// Inner product of two same-shape tensors, as a `[1]` tensor.
    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("dot", a, b)?;
        self.check_finite("dot", &[a, b])?;
        let v = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| x * y).sum();
        Ok(self.push(vec![1], vec![v], Op::Dot(a, b), &[a, b]))
    }

    /// Euclidean norm as a `[1]` tensor. The gradient at the origin is taken as 0.
    pub fn l2_norm(&mut self, x: Var) -> Result<Var> {
        self.check_finite("l2_norm", &[x])?;
        let v = self.data(x).iter().map(|&v| v * v).sum::<T>().sqrt();
        Ok(self.push(vec![1], vec![v], Op::Norm(x), &[x]))
    }

    fn softmax_raw(&self, x: Var, axis: usize, log: bool) -> Vec<T> {
        let (outer, n, inner) = split_axis(self.shape(x), axis);
        let src = self.data(x);
        let mut out = vec![T::zero(); src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * n + j) * inner + i;
                let mut max = T::neg_infinity();
                for j in 0..n {
                    max = max.max(src[at(j)]);
                }
                let mut denom = T::zero();
                for j in 0..n {
                    denom += (src[at(j)] - max).exp();
                }
                if log {
                    let lse = denom.ln();
                    for j in 0..n {
                        out[at(j)] = src[at(j)] - max - lse;
                    }
                } else {
                    for j in 0..n {
                        out[at(j)] = (src[at(j)] - max).exp() / denom;
                    }
                }
            }
        }
        out
    }

    /// Numerically stable softmax along `axis` (max-subtracted).
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axes("softmax", x, &[axis])?;
        self.check_finite("softmax", &[x])?;
        let out = self.softmax_raw(x, axis, false);
        let shape = self.shape(x).to_vec();
        Ok(self.push(shape, out, Op::Softmax { x, axis }, &[x]))
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axes("log_softmax", x, &[axis])?;
        self.check_finite("log_softmax", &[x])?;
        let out = self.softmax_raw(x, axis, true);
        let shape = self.shape(x).to_vec();
        Ok(self.push(shape, out, Op::LogSoftmax { x, axis }, &[x]))
    }

    /// Per-sample, per-channel normalization of NCHW input with learned affine `[C]`.
    pub fn instance_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(Error::shape("instance_norm", format!("expected rank 4, got {s:?}")));
        }
        if self.shape(gamma) != [s[1]] || self.shape(beta) != [s[1]] {
            return Err(Error::shape(
                "instance_norm",
                format!(
                    "affine {:?}/{:?} does not match {} channels",
                    self.shape(gamma),
                    self.shape(beta),
                    s[1]
                ),
            ));
        }
        self.check_finite("instance_norm", &[x, gamma, beta])?;
        let (c, plane) = (s[1], s[2] * s[3]);
        let eps = T::of(eps);
        let n = T::of(plane as f64);
        let src = self.data(x);
        let (g, bt) = (self.data(gamma), self.data(beta));
        let mut xhat = vec![T::zero(); src.len()];
        let mut out = vec![T::zero(); src.len()];
        let mut inv_std = Vec::with_capacity(s[0] * c);
        for p in 0..s[0] * c {
            let ch = p % c;
            let xs = &src[p * plane..(p + 1) * plane];
            let mean = xs.iter().copied().sum::<T>() / n;
            let var = xs.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let is = T::one() / (var + eps).sqrt();
            inv_std.push(is);
            for k in 0..plane {
                let h = (xs[k] - mean) * is;
                xhat[p * plane + k] = h;
                out[p * plane + k] = g[ch] * h + bt[ch];
            }
        }
        Ok(self.push(
            s,
            out,
            Op::InstanceNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            &[x, gamma, beta],
        ))
    }

    /// Sum groups of channels of an NCHW tensor (see [`ChannelGroups`]).
    pub fn merge_channels(&mut self, x: Var, groups: ChannelGroups) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(Error::shape("merge_channels", format!("expected rank 4, got {s:?}")));
        }
        if groups.len() != 1 && groups.len() != s[0] {
            return Err(Error::shape(
                "merge_channels",
                format!("{} group lists for batch of {}", groups.len(), s[0]),
            ));
        }
        let width = groups[0].len();
        if width == 0 || groups.iter().any(|g| g.len() != width) {
            return Err(Error::shape("merge_channels", "group lists must be nonempty and equally long"));
        }
        if groups.iter().flatten().flatten().any(|&c| c >= s[1]) {
            return Err(Error::shape("merge_channels", format!("channel index out of range for {s:?}")));
        }
        self.check_finite("merge_channels", &[x])?;
        let plane = s[2] * s[3];
        let src = self.data(x);
        let mut out = vec![T::zero(); s[0] * width * plane];
        for b in 0..s[0] {
            let gs = &groups[if groups.len() == 1 { 0 } else { b }];
            for (j, group) in gs.iter().enumerate() {
                let dst = &mut out[(b * width + j) * plane..][..plane];
                for &c in group {
                    let from = &src[(b * s[1] + c) * plane..][..plane];
                    dst.iter_mut().zip(from).for_each(|(d, &v)| *d += v);
                }
            }
        }
        Ok(self.push(vec![s[0], width, s[2], s[3]], out, Op::MergeChannels { x, groups }, &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != numel(self.shape(x)) || shape.contains(&0) {
            return Err(Error::shape("reshape", format!("cannot view {:?} as {shape:?}", self.shape(x))));
        }
        let data = self.data(x).to_vec();
        Ok(self.push(shape.to_vec(), data, Op::Reshape(x), &[x]))
    }

    /// Propagate adjoints from a scalar output to every `requires_grad` leaf.
    /// Calling again without [`Tape::zero_grad`] accumulates.
    pub fn backward(&mut self, output: Var) -> Result<()> {
        let out_shape = self.shape(output);
        if numel(out_shape) != 1 {
            return Err(Error::shape("backward", format!("output must be scalar, got {out_shape:?}")));
        }
        if !self.nodes[output.0].requires_grad {
            return Ok(());
        }
        let mut adj: Vec<Option<Vec<T>>> = (0..=output.0).map(|_| None).collect();
        adj[output.0] = Some(vec![T::one()]);
        for id in (0..=output.0).rev() {
            let Some(g) = adj[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                adj[id] = Some(g);
                continue;
            }
            for (v, gi) in self.node_vjp(id, &g) {
                if self.nodes[v.0].requires_grad {
                    accumulate(&mut adj[v.0], gi);
                }
            }
        }
        for (id, g) in adj.into_iter().enumerate() {
            if let Some(g) = g {
                if matches!(self.nodes[id].op, Op::Leaf) && self.nodes[id].requires_grad {
                    self.nodes[id].value.accumulate_grad(&g);
                }
            }
        }
        Ok(())
    }

    /// Vector-Jacobian products of node `id` with upstream adjoint `g`.
    fn node_vjp(&self, id: usize, g: &[T]) -> Vec<(Var, Vec<T>)> {
        let node = &self.nodes[id];
        let y = node.value.data();
        let rg = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => vec![],
            Op::Add(a, b) => vec![(*a, g.to_vec()), (*b, g.to_vec())],
            Op::Sub(a, b) => vec![(*a, g.to_vec()), (*b, g.iter().map(|&v| -v).collect())],
            Op::Mul(a, b) => {
                let (da, db) = (self.data(*a), self.data(*b));
                vec![
                    (*a, g.iter().zip(db).map(|(&g, &b)| g * b).collect()),
                    (*b, g.iter().zip(da).map(|(&g, &a)| g * a).collect()),
                ]
            }
            Op::Div(a, b) => {
                let (da, db) = (self.data(*a), self.data(*b));
                vec![
                    (*a, g.iter().zip(db).map(|(&g, &b)| g / b).collect()),
                    (
                        *b,
                        g.iter().zip(da).zip(db).map(|((&g, &a), &b)| -g * a / (b * b)).collect(),
                    ),
                ]
            }
            Op::Scale(x, c) => vec![(*x, g.iter().map(|&v| v * *c).collect())],
            Op::AddScalar(x) => vec![(*x, g.to_vec())],
            Op::Matmul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let (da, db) = (self.data(*a), self.data(*b));
                let mut ga = vec![T::zero(); m * k];
                let mut gb = vec![T::zero(); k * n];
                for i in 0..m {
                    for p in 0..k {
                        let mut acc = T::zero();
                        for j in 0..n {
                            acc += g[i * n + j] * db[p * n + j];
                            gb[p * n + j] += da[i * k + p] * g[i * n + j];
                        }
                        ga[i * k + p] = acc;
                    }
                }
                vec![(*a, ga), (*b, gb)]
            }
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            } => {
                let grads = conv::backward(
                    geom,
                    g,
                    self.data(*input),
                    self.data(*weight),
                    rg(*input),
                    rg(*weight),
                    bias.is_some_and(rg),
                );
                let mut out = Vec::new();
                if let Some(gi) = grads.input {
                    out.push((*input, gi));
                }
                if let Some(gw) = grads.weight {
                    out.push((*weight, gw));
                }
                if let (Some(b), Some(gb)) = (bias, grads.bias) {
                    out.push((*b, gb));
                }
                out
            }
            Op::Upsample2x(x) => {
                let s = self.shape(*x);
                let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
                let mut gx = vec![T::zero(); planes * h * w];
                for p in 0..planes {
                    for yy in 0..2 * h {
                        for xx in 0..2 * w {
                            gx[(p * h + yy / 2) * w + xx / 2] += g[(p * 2 * h + yy) * 2 * w + xx];
                        }
                    }
                }
                vec![(*x, gx)]
            }
            Op::Relu(x) => {
                let xs = self.data(*x);
                vec![(
                    *x,
                    g.iter()
                        .zip(xs)
                        .map(|(&g, &v)| if v > T::zero() { g } else { T::zero() })
                        .collect(),
                )]
            }
            Op::Exp(x) => vec![(*x, g.iter().zip(y).map(|(&g, &y)| g * y).collect())],
            Op::Log(x) => {
                let xs = self.data(*x);
                vec![(*x, g.iter().zip(xs).map(|(&g, &v)| g / v).collect())]
            }
            Op::ClampMin(x, lo) => {
                let xs = self.data(*x);
                vec![(
                    *x,
                    g.iter()
                        .zip(xs)
                        .map(|(&g, &v)| if v > *lo { g } else { T::zero() })
                        .collect(),
                )]
            }
            Op::Sum { x, map } => vec![(*x, map.iter().map(|&o| g[o]).collect())],
            Op::Mean { x, map, count } => {
                let inv = T::one() / T::of(*count as f64);
                vec![(*x, map.iter().map(|&o| g[o] * inv).collect())]
            }
            Op::Concat { inputs, axis } => {
                let base = self.shape(inputs[0]);
                let (outer, _, inner) = split_axis(base, *axis);
                let total: usize = inputs.iter().map(|&v| self.shape(v)[*axis]).sum();
                let mut out = Vec::new();
                let mut offset = 0;
                for &v in inputs {
                    let n = self.shape(v)[*axis] * inner;
                    let mut gv = Vec::with_capacity(outer * n);
                    for o in 0..outer {
                        let start = o * total * inner + offset;
                        gv.extend_from_slice(&g[start..start + n]);
                    }
                    offset += n;
                    out.push((v, gv));
                }
                out
            }
            Op::Gather { x, positions } => {
                let s = self.shape(*x);
                let (c, h, w) = (s[1], s[2], s[3]);
                let mut gx = vec![T::zero(); numel(s)];
                for (n, p) in positions.iter().enumerate() {
                    for ch in 0..c {
                        gx[((p[0] * c + ch) * h + p[1]) * w + p[2]] += g[n * c + ch];
                    }
                }
                vec![(*x, gx)]
            }
            Op::Dot(a, b) => {
                let (da, db) = (self.data(*a), self.data(*b));
                vec![
                    (*a, db.iter().map(|&v| v * g[0]).collect()),
                    (*b, da.iter().map(|&v| v * g[0]).collect()),
                ]
            }
            Op::Norm(x) => {
                let norm = y[0];
                let xs = self.data(*x);
                let gx = if norm > T::zero() {
                    xs.iter().map(|&v| g[0] * v / norm).collect()
                } else {
                    vec![T::zero(); xs.len()]
                };
                vec![(*x, gx)]
            }
            Op::Softmax { x, axis } => {
                let (outer, n, inner) = split_axis(self.shape(*x), *axis);
                let mut gx = vec![T::zero(); y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| (o * n + j) * inner + i;
                        let dotp: T = (0..n).map(|j| g[at(j)] * y[at(j)]).sum();
                        for j in 0..n {
                            gx[at(j)] = y[at(j)] * (g[at(j)] - dotp);
                        }
                    }
                }
                vec![(*x, gx)]
            }
            Op::LogSoftmax { x, axis } => {
                let (outer, n, inner) = split_axis(self.shape(*x), *axis);
                let mut gx = vec![T::zero(); y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| (o * n + j) * inner + i;
                        let gsum: T = (0..n).map(|j| g[at(j)]).sum();
                        for j in 0..n {
                            gx[at(j)] = g[at(j)] - y[at(j)].exp() * gsum;
                        }
                    }
                }
                vec![(*x, gx)]
            }
            Op::InstanceNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let s = self.shape(*x);
                let (c, plane) = (s[1], s[2] * s[3]);
                let gm = self.data(*gamma);
                let n = T::of(plane as f64);
                let mut gx = vec![T::zero(); xhat.len()];
                let mut gg = vec![T::zero(); c];
                let mut gb = vec![T::zero(); c];
                for p in 0..s[0] * c {
                    let ch = p % c;
                    let gs = &g[p * plane..(p + 1) * plane];
                    let hs = &xhat[p * plane..(p + 1) * plane];
                    let mut sum_d = T::zero();
                    let mut sum_dh = T::zero();
                    for k in 0..plane {
                        gg[ch] += gs[k] * hs[k];
                        gb[ch] += gs[k];
                        let d = gs[k] * gm[ch];
                        sum_d += d;
                        sum_dh += d * hs[k];
                    }
                    let scale = inv_std[p] / n;
                    for k in 0..plane {
                        let d = gs[k] * gm[ch];
                        gx[p * plane + k] = scale * (n * d - sum_d - hs[k] * sum_dh);
                    }
                }
                vec![(*x, gx), (*gamma, gg), (*beta, gb)]
            }
            Op::MergeChannels { x, groups } => {
                let s = self.shape(*x);
                let plane = s[2] * s[3];
                let width = groups[0].len();
                let mut gx = vec![T::zero(); numel(s)];
                for b in 0..s[0] {
                    let gs = &groups[if groups.len() == 1 { 0 } else { b }];
                    for (j, group) in gs.iter().enumerate() {
                        let from = &g[(b * width + j) * plane..][..plane];
                        for &c in group {
                            let dst = &mut gx[(b * s[1] + c) * plane..][..plane];
                            dst.iter_mut().zip(from).for_each(|(d, &v)| *d += v);
                        }
                    }
                }
                vec![(*x, gx)]
            }
            Op::Reshape(x) => vec![(*x, g.to_vec())],
        }
    }
}
