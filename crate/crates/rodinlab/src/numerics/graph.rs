//! Tape-based reverse-mode autodiff. A `Graph` is an append-only arena of
//! nodes; each op stores its parent ids plus whatever the backward pass needs,
//! and `backward` replays the tape in reverse accumulating vector-Jacobian
//! products. Ops are batched (whole planes, whole point sets), so graphs stay
//! small even for full training steps.

use super::kernels as kn;
use super::tensor::Tensor;
use super::{shape_err, NumericsError, Real};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(pub(crate) usize);

/// Checked mode validates finiteness and input ranges at every op boundary;
/// fast mode skips the scans and clamps out-of-range samples.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Checked,
    Fast,
}

/// Which axis of an `[h,w,c]` map gets mean-pooled away.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolAxis {
    Rows,
    Cols,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Neg(NodeId),
    Exp(NodeId),
    Abs(NodeId),
    Softplus(NodeId),
    Sigmoid(NodeId),
    Sin(NodeId),
    Cos(NodeId),
    Scale(NodeId, Real),
    AddScalar(NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Matmul {
        a: NodeId,
        b: NodeId,
        m: usize,
        k: usize,
        n: usize,
    },
    AddRowBias {
        x: NodeId,
        b: NodeId,
    },
    MulChannel {
        x: NodeId,
        s: NodeId,
    },
    AddChannel {
        x: NodeId,
        b: NodeId,
    },
    ConcatLast {
        parts: Vec<NodeId>,
        sizes: Vec<usize>,
    },
    SliceLast {
        x: NodeId,
        start: usize,
        len: usize,
        full: usize,
    },
    ConcatW {
        parts: Vec<NodeId>,
        widths: Vec<usize>,
    },
    SliceW {
        x: NodeId,
        start: usize,
        len: usize,
        full: usize,
    },
    Reshape(NodeId),
    Transpose2 {
        x: NodeId,
        m: usize,
        n: usize,
    },
    TransposeHw(NodeId),
    SumAll(NodeId),
    MeanAll(NodeId),
    SumMid(NodeId),
    RepeatLast {
        x: NodeId,
        k: usize,
    },
    CumsumExclRows(NodeId),
    SoftmaxRows(NodeId),
    Conv2d {
        x: NodeId,
        kern: NodeId,
        bias: Option<NodeId>,
        stride: usize,
        pad: usize,
    },
    AxisMean {
        x: NodeId,
        axis: PoolAxis,
    },
    ReplicateRows {
        x: NodeId,
        h: usize,
    },
    ReplicateCols {
        x: NodeId,
        w: usize,
    },
    BilinearSample {
        plane: NodeId,
        uvs: Tensor,
    },
    GroupNorm {
        x: NodeId,
        groups: usize,
        stats: Vec<(Real, Real)>,
    },
    ResizeBilinear {
        x: NodeId,
        oh: usize,
        ow: usize,
    },
    Distortion {
        w: NodeId,
        mid: Tensor,
        width: Tensor,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Per-node gradients produced by `Graph::backward`. Only parameters and
/// their ancestors carry entries.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor> {
        self.grads.get_mut(id.0).and_then(|g| g.take())
    }
}

pub struct Graph {
    nodes: Vec<Node>,
    mode: Mode,
}

type Res = Result<NodeId, NumericsError>;

impl Graph {
    pub fn new(mode: Mode) -> Self {
        Graph {
            nodes: Vec::new(),
            mode,
        }
    }

    pub fn checked() -> Self {
        Graph::new(Mode::Checked)
    }

    pub fn fast() -> Self {
        Graph::new(Mode::Fast)
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    fn push(&mut self, op: &'static str, value: Tensor, node_op: Op, needs_grad: bool) -> Res {
        if self.mode == Mode::Checked && !value.all_finite() {
            return Err(NumericsError::NonFinite { op });
        }
        self.nodes.push(Node {
            value,
            op: node_op,
            needs_grad,
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    /// Non-differentiable leaf (data, targets, noise draws).
    pub fn input(&mut self, t: Tensor) -> Res {
        self.push("input", t, Op::Leaf, false)
    }

    /// Differentiable leaf; `backward` reports a gradient for it.
    pub fn param(&mut self, t: Tensor) -> Res {
        self.push("param", t, Op::Leaf, true)
    }

    // ---- unary ----

    fn unary(
        &mut self,
        name: &'static str,
        x: NodeId,
        f: impl Fn(Real) -> Real,
        op: Op,
    ) -> Res {
        let v = self.value(x).map(f);
        let ng = self.needs(x);
        self.push(name, v, op, ng)
    }

    pub fn neg(&mut self, x: NodeId) -> Res {
        self.unary("neg", x, |v| -v, Op::Neg(x))
    }

    pub fn exp(&mut self, x: NodeId) -> Res {
        self.unary("exp", x, Real::exp, Op::Exp(x))
    }

    pub fn abs(&mut self, x: NodeId) -> Res {
        self.unary("abs", x, Real::abs, Op::Abs(x))
    }

    pub fn softplus(&mut self, x: NodeId) -> Res {
        self.unary("softplus", x, kn::softplus, Op::Softplus(x))
    }

    pub fn sigmoid(&mut self, x: NodeId) -> Res {
        self.unary("sigmoid", x, kn::sigmoid, Op::Sigmoid(x))
    }

    pub fn sin(&mut self, x: NodeId) -> Res {
        self.unary("sin", x, Real::sin, Op::Sin(x))
    }

    pub fn cos(&mut self, x: NodeId) -> Res {
        self.unary("cos", x, Real::cos, Op::Cos(x))
    }

    pub fn scale(&mut self, x: NodeId, c: Real) -> Res {
        self.unary("scale", x, |v| c * v, Op::Scale(x, c))
    }

    pub fn add_scalar(&mut self, x: NodeId, c: Real) -> Res {
        self.unary("add_scalar", x, |v| v + c, Op::AddScalar(x))
    }

    /// x * sigmoid(x), composed from primitives.
    pub fn silu(&mut self, x: NodeId) -> Res {
        let s = self.sigmoid(x)?;
        self.mul(x, s)
    }

    pub fn square(&mut self, x: NodeId) -> Res {
        self.mul(x, x)
    }

    // ---- binary elementwise ----

    fn binary(
        &mut self,
        name: &'static str,
        a: NodeId,
        b: NodeId,
        f: impl Fn(Real, Real) -> Real,
        op: Op,
    ) -> Res {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(shape_err(
                name,
                "all",
                format!("{:?} vs {:?}", self.value(a).shape(), self.value(b).shape()),
            ));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let v = Tensor::from_vec(self.value(a).shape(), data)?;
        let ng = self.needs(a) || self.needs(b);
        self.push(name, v, op, ng)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Res {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Res {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Res {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    // ---- linear algebra ----

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Res {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa.len() != 2 || sb.len() != 2 {
            return Err(shape_err("matmul", "rank", format!("{sa:?} x {sb:?}")));
        }
        let (m, k, k2, n) = (sa[0], sa[1], sb[0], sb[1]);
        if k != k2 {
            return Err(shape_err("matmul", "inner", format!("{k} vs {k2}")));
        }
        let data = kn::matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        let v = Tensor::from_vec(&[m, n], data)?;
        let ng = self.needs(a) || self.needs(b);
        self.push("matmul", v, Op::Matmul { a, b, m, k, n }, ng)
    }

    /// `[n,m] + [m]`, bias broadcast over rows.
    pub fn add_row_bias(&mut self, x: NodeId, b: NodeId) -> Res {
        let (sx, sb) = (self.value(x).shape(), self.value(b).shape());
        if sx.len() != 2 || sb.len() != 1 || sb[0] != sx[1] {
            return Err(shape_err("add_row_bias", "cols", format!("{sx:?} + {sb:?}")));
        }
        let (n, m) = (sx[0], sx[1]);
        let mut data = self.value(x).data().to_vec();
        let bias = self.value(b).data();
        for i in 0..n {
            for j in 0..m {
                data[i * m + j] += bias[j];
            }
        }
        let v = Tensor::from_vec(&[n, m], data)?;
        let ng = self.needs(x) || self.needs(b);
        self.push("add_row_bias", v, Op::AddRowBias { x, b }, ng)
    }

    fn channel_broadcast_check(
        &self,
        name: &'static str,
        x: NodeId,
        s: NodeId,
    ) -> Result<(usize, usize), NumericsError> {
        let (sx, ss) = (self.value(x).shape(), self.value(s).shape());
        if sx.len() != 3 || ss.len() != 1 || ss[0] != sx[2] {
            return Err(shape_err(name, "channels", format!("{sx:?} with {ss:?}")));
        }
        Ok((sx[0] * sx[1], sx[2]))
    }

    /// `[h,w,c] * [c]`, per-channel scale broadcast over positions.
    pub fn mul_channel(&mut self, x: NodeId, s: NodeId) -> Res {
        let (hw, c) = self.channel_broadcast_check("mul_channel", x, s)?;
        let mut data = self.value(x).data().to_vec();
        let sc = self.value(s).data();
        for p in 0..hw {
            for ch in 0..c {
                data[p * c + ch] *= sc[ch];
            }
        }
        let v = Tensor::from_vec(self.value(x).shape(), data)?;
        let ng = self.needs(x) || self.needs(s);
        self.push("mul_channel", v, Op::MulChannel { x, s }, ng)
    }

    /// `[h,w,c] + [c]`.
    pub fn add_channel(&mut self, x: NodeId, b: NodeId) -> Res {
        let (hw, c) = self.channel_broadcast_check("add_channel", x, b)?;
        let mut data = self.value(x).data().to_vec();
        let bias = self.value(b).data();
        for p in 0..hw {
            for ch in 0..c {
                data[p * c + ch] += bias[ch];
            }
        }
        let v = Tensor::from_vec(self.value(x).shape(), data)?;
        let ng = self.needs(x) || self.needs(b);
        self.push("add_channel", v, Op::AddChannel { x, b }, ng)
    }

    // ---- shape ops ----

    /// Concatenate along the last axis; leading axes must agree.
    pub fn concat_last(&mut self, parts: &[NodeId]) -> Res {
        assert!(!parts.is_empty());
        let lead = self.value(parts[0]).shape()[..self.value(parts[0]).rank() - 1].to_vec();
        let mut sizes = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.value(p).shape();
            if s[..s.len() - 1] != lead[..] {
                return Err(shape_err(
                    "concat_last",
                    "leading",
                    format!("{:?} vs {:?}", s, lead),
                ));
            }
            sizes.push(s[s.len() - 1]);
        }
        let rows: usize = lead.iter().product();
        let total: usize = sizes.iter().sum();
        let mut data = vec![0.0; rows * total];
        let mut off = 0;
        for (&p, &sz) in parts.iter().zip(&sizes) {
            let src = self.value(p).data();
            for r in 0..rows {
                data[r * total + off..r * total + off + sz]
                    .copy_from_slice(&src[r * sz..(r + 1) * sz]);
            }
            off += sz;
        }
        let mut shape = lead;
        shape.push(total);
        let v = Tensor::from_vec(&shape, data)?;
        let ng = parts.iter().any(|&p| self.needs(p));
        self.push(
            "concat_last",
            v,
            Op::ConcatLast {
                parts: parts.to_vec(),
                sizes,
            },
            ng,
        )
    }

    /// Columns `[start, start+len)` of the last axis.
    pub fn slice_last(&mut self, x: NodeId, start: usize, len: usize) -> Res {
        let s = self.value(x).shape().to_vec();
        let full = s[s.len() - 1];
        if start + len > full {
            return Err(shape_err(
                "slice_last",
                "last",
                format!("[{start}, {}) of {full}", start + len),
            ));
        }
        let rows: usize = s[..s.len() - 1].iter().product();
        let src = self.value(x).data();
        let mut data = vec![0.0; rows * len];
        for r in 0..rows {
            data[r * len..(r + 1) * len]
                .copy_from_slice(&src[r * full + start..r * full + start + len]);
        }
        let mut shape = s[..s.len() - 1].to_vec();
        shape.push(len);
        let v = Tensor::from_vec(&shape, data)?;
        let ng = self.needs(x);
        self.push(
            "slice_last",
            v,
            Op::SliceLast {
                x,
                start,
                len,
                full,
            },
            ng,
        )
    }

    /// Concatenate `[h,w_i,c]` maps along W (axis 1).
    pub fn concat_w(&mut self, parts: &[NodeId]) -> Res {
        assert!(!parts.is_empty());
        let s0 = self.value(parts[0]).shape().to_vec();
        if s0.len() != 3 {
            return Err(shape_err("concat_w", "rank", format!("{s0:?}")));
        }
        let (h, c) = (s0[0], s0[2]);
        let mut widths = Vec::new();
        for &p in parts {
            let s = self.value(p).shape();
            if s.len() != 3 || s[0] != h || s[2] != c {
                return Err(shape_err("concat_w", "h/c", format!("{s:?} vs {s0:?}")));
            }
            widths.push(s[1]);
        }
        let wt: usize = widths.iter().sum();
        let mut data = vec![0.0; h * wt * c];
        let mut off = 0;
        for (&p, &wi) in parts.iter().zip(&widths) {
            let src = self.value(p).data();
            for r in 0..h {
                data[(r * wt + off) * c..(r * wt + off + wi) * c]
                    .copy_from_slice(&src[r * wi * c..(r + 1) * wi * c]);
            }
            off += wi;
        }
        let v = Tensor::from_vec(&[h, wt, c], data)?;
        let ng = parts.iter().any(|&p| self.needs(p));
        self.push(
            "concat_w",
            v,
            Op::ConcatW {
                parts: parts.to_vec(),
                widths,
            },
            ng,
        )
    }

    /// Columns `[start, start+len)` along W of an `[h,w,c]` map.
    pub fn slice_w(&mut self, x: NodeId, start: usize, len: usize) -> Res {
        let s = self.value(x).shape().to_vec();
        if s.len() != 3 {
            return Err(shape_err("slice_w", "rank", format!("{s:?}")));
        }
        let (h, full, c) = (s[0], s[1], s[2]);
        if start + len > full {
            return Err(shape_err(
                "slice_w",
                "w",
                format!("[{start}, {}) of {full}", start + len),
            ));
        }
        let src = self.value(x).data();
        let mut data = vec![0.0; h * len * c];
        for r in 0..h {
            data[r * len * c..(r + 1) * len * c]
                .copy_from_slice(&src[(r * full + start) * c..(r * full + start + len) * c]);
        }
        let v = Tensor::from_vec(&[h, len, c], data)?;
        let ng = self.needs(x);
        self.push(
            "slice_w",
            v,
            Op::SliceW {
                x,
                start,
                len,
                full,
            },
            ng,
        )
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Res {
        let v = self.value(x).reshaped(shape)?;
        let ng = self.needs(x);
        self.push("reshape", v, Op::Reshape(x), ng)
    }

    pub fn transpose2(&mut self, x: NodeId) -> Res {
        let s = self.value(x).shape();
        if s.len() != 2 {
            return Err(shape_err("transpose2", "rank", format!("{s:?}")));
        }
        let (m, n) = (s[0], s[1]);
        let src = self.value(x).data();
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = src[i * n + j];
            }
        }
        let v = Tensor::from_vec(&[n, m], data)?;
        let ng = self.needs(x);
        self.push("transpose2", v, Op::Transpose2 { x, m, n }, ng)
    }

    /// `[h,w,c] -> [w,h,c]`, swapping the spatial axes.
    pub fn transpose_hw(&mut self, x: NodeId) -> Res {
        let s = self.value(x).shape();
        if s.len() != 3 {
            return Err(shape_err("transpose_hw", "rank", format!("{s:?}")));
        }
        let (h, w, c) = (s[0], s[1], s[2]);
        let src = self.value(x).data();
        let mut data = vec![0.0; h * w * c];
        for r in 0..h {
            for col in 0..w {
                data[(col * h + r) * c..(col * h + r + 1) * c]
                    .copy_from_slice(&src[(r * w + col) * c..(r * w + col + 1) * c]);
            }
        }
        let v = Tensor::from_vec(&[w, h, c], data)?;
        let ng = self.needs(x);
        self.push("transpose_hw", v, Op::TransposeHw(x), ng)
    }

    // ---- reductions ----

    pub fn sum_all(&mut self, x: NodeId) -> Res {
        let s: Real = self.value(x).data().iter().sum();
        let ng = self.needs(x);
        self.push("sum_all", Tensor::scalar(s), Op::SumAll(x), ng)
    }

    pub fn mean_all(&mut self, x: NodeId) -> Res {
        let n = self.value(x).len() as Real;
        let s: Real = self.value(x).data().iter().sum();
        let ng = self.needs(x);
        self.push("mean_all", Tensor::scalar(s / n), Op::MeanAll(x), ng)
    }

    /// `[a,b,c] -> [a,c]`, summing out the middle axis.
    pub fn sum_mid(&mut self, x: NodeId) -> Res {
        let s = self.value(x).shape();
        if s.len() != 3 {
            return Err(shape_err("sum_mid", "rank", format!("{s:?}")));
        }
        let (a, b, c) = (s[0], s[1], s[2]);
        let src = self.value(x).data();
        let mut data = vec![0.0; a * c];
        for i in 0..a {
            for j in 0..b {
                for ch in 0..c {
                    data[i * c + ch] += src[(i * b + j) * c + ch];
                }
            }
        }
        let v = Tensor::from_vec(&[a, c], data)?;
        let ng = self.needs(x);
        self.push("sum_mid", v, Op::SumMid(x), ng)
    }

    /// `[a,b] -> [a,b,k]`, repeating every element along a new last axis.
    pub fn repeat_last(&mut self, x: NodeId, k: usize) -> Res {
        let s = self.value(x).shape();
        if s.len() != 2 {
            return Err(shape_err("repeat_last", "rank", format!("{s:?}")));
        }
        let (a, b) = (s[0], s[1]);
        let src = self.value(x).data();
        let mut data = vec![0.0; a * b * k];
        for i in 0..a * b {
            for j in 0..k {
                data[i * k + j] = src[i];
            }
        }
        let v = Tensor::from_vec(&[a, b, k], data)?;
        let ng = self.needs(x);
        self.push("repeat_last", v, Op::RepeatLast { x, k }, ng)
    }

    /// Exclusive prefix sums along each row of `[r,s]`.
    pub fn cumsum_excl_rows(&mut self, x: NodeId) -> Res {
        let s = self.value(x).shape();
        if s.len() != 2 {
            return Err(shape_err("cumsum_excl_rows", "rank", format!("{s:?}")));
        }
        let (r, cols) = (s[0], s[1]);
        let src = self.value(x).data();
        let mut data = vec![0.0; r * cols];
        for i in 0..r {
            let mut acc = 0.0;
            for j in 0..cols {
                data[i * cols + j] = acc;
                acc += src[i * cols + j];
            }
        }
        let v = Tensor::from_vec(&[r, cols], data)?;
        let ng = self.needs(x);
        self.push("cumsum_excl_rows", v, Op::CumsumExclRows(x), ng)
    }

    pub fn softmax_rows(&mut self, x: NodeId) -> Res {
        let s = self.value(x).shape();
        if s.len() != 2 {
            return Err(shape_err("softmax_rows", "rank", format!("{s:?}")));
        }
        let (n, m) = (s[0], s[1]);
        let data = kn::softmax_rows(self.value(x).data(), n, m);
        let v = Tensor::from_vec(&[n, m], data)?;
        let ng = self.needs(x);
        self.push("softmax_rows", v, Op::SoftmaxRows(x), ng)
    }

    // ---- structured ops ----

    /// `[h,w,cin]` (*) `[kh,kw,cin,cout]`, zero padding, standard extent
    /// formula `(h + 2p - k) / s + 1`.
    pub fn conv2d(
        &mut self,
        x: NodeId,
        kern: NodeId,
        bias: Option<NodeId>,
        stride: usize,
        pad: usize,
    ) -> Res {
        let (sx, sk) = (self.value(x).shape(), self.value(kern).shape());
        if sx.len() != 3 || sk.len() != 4 {
            return Err(shape_err("conv2d", "rank", format!("{sx:?} (*) {sk:?}")));
        }
        let (h, w, cin) = (sx[0], sx[1], sx[2]);
        let (kh, kw, kcin, cout) = (sk[0], sk[1], sk[2], sk[3]);
        if kcin != cin {
            return Err(shape_err("conv2d", "cin", format!("{cin} vs {kcin}")));
        }
        if h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(shape_err(
                "conv2d",
                "spatial",
                format!("input {h}x{w} pad {pad} too small for kernel {kh}x{kw}"),
            ));
        }
        if let Some(b) = bias {
            let sb = self.value(b).shape();
            if sb != [cout] {
                return Err(shape_err("conv2d", "bias", format!("{sb:?} vs [{cout}]")));
            }
        }
        let oh = kn::conv_out_extent(h, kh, stride, pad);
        let ow = kn::conv_out_extent(w, kw, stride, pad);
        let cols = kn::im2col(self.value(x).data(), h, w, cin, kh, kw, stride, pad);
        let patch = kh * kw * cin;
        let mut data = kn::matmul(&cols, self.value(kern).data(), oh * ow, patch, cout);
        if let Some(b) = bias {
            let bv = self.value(b).data();
            for p in 0..oh * ow {
                for c in 0..cout {
                    data[p * cout + c] += bv[c];
                }
            }
        }
        let v = Tensor::from_vec(&[oh, ow, cout], data)?;
        let ng = self.needs(x)
            || self.needs(kern)
            || bias.map(|b| self.needs(b)).unwrap_or(false);
        self.push(
            "conv2d",
            v,
            Op::Conv2d {
                x,
                kern,
                bias,
                stride,
                pad,
            },
            ng,
        )
    }

    /// Mean over one spatial axis of `[h,w,c]`, keeping channels:
    /// rows -> `[1,w,c]`, cols -> `[h,1,c]`.
    pub fn axis_mean(&mut self, x: NodeId, axis: PoolAxis) -> Res {
        let s = self.value(x).shape();
        if s.len() != 3 {
            return Err(shape_err("axis_mean", "rank", format!("{s:?}")));
        }
        let (h, w, c) = (s[0], s[1], s[2]);
        let src = self.value(x).data();
        let v = match axis {
            PoolAxis::Rows => {
                let mut data = vec![0.0; w * c];
                for r in 0..h {
                    for col in 0..w {
                        for ch in 0..c {
                            data[col * c + ch] += src[(r * w + col) * c + ch];
                        }
                    }
                }
                for v in data.iter_mut() {
                    *v /= h as Real;
                }
                Tensor::from_vec(&[1, w, c], data)?
            }
            PoolAxis::Cols => {
                let mut data = vec![0.0; h * c];
                for r in 0..h {
                    for col in 0..w {
                        for ch in 0..c {
                            data[r * c + ch] += src[(r * w + col) * c + ch];
                        }
                    }
                }
                for v in data.iter_mut() {
                    *v /= w as Real;
                }
                Tensor::from_vec(&[h, 1, c], data)?
            }
        };
        let ng = self.needs(x);
        self.push("axis_mean", v, Op::AxisMean { x, axis }, ng)
    }

    /// `[1,w,c] -> [h,w,c]` by copying the single row.
    pub fn replicate_rows(&mut self, x: NodeId, h: usize) -> Res {
        let s = self.value(x).shape();
        if s.len() != 3 || s[0] != 1 {
            return Err(shape_err("replicate_rows", "rows", format!("{s:?}")));
        }
        let (w, c) = (s[1], s[2]);
        let src = self.value(x).data();
        let mut data = vec![0.0; h * w * c];
        for r in 0..h {
            data[r * w * c..(r + 1) * w * c].copy_from_slice(src);
        }
        let v = Tensor::from_vec(&[h, w, c], data)?;
        let ng = self.needs(x);
        self.push("replicate_rows", v, Op::ReplicateRows { x, h }, ng)
    }

    /// `[h,1,c] -> [h,w,c]` by copying the single column.
    pub fn replicate_cols(&mut self, x: NodeId, w: usize) -> Res {
        let s = self.value(x).shape();
        if s.len() != 3 || s[1] != 1 {
            return Err(shape_err("replicate_cols", "cols", format!("{s:?}")));
        }
        let (h, c) = (s[0], s[2]);
        let src = self.value(x).data();
        let mut data = vec![0.0; h * w * c];
        for r in 0..h {
            for col in 0..w {
                data[(r * w + col) * c..(r * w + col + 1) * c]
                    .copy_from_slice(&src[r * c..(r + 1) * c]);
            }
        }
        let v = Tensor::from_vec(&[h, w, c], data)?;
        let ng = self.needs(x);
        self.push("replicate_cols", v, Op::ReplicateCols { x, w }, ng)
    }

    /// Sample an `[h,w,c]` plane at constant `[n,2]` uv points in `[0,1]^2`
    /// (x along W, y along H). Gradients flow to the four touched texels of
    /// the plane; positions are not differentiated. Checked mode rejects
    /// out-of-range uv, fast mode clamps.
    pub fn bilinear_sample(&mut self, plane: NodeId, uvs: &Tensor) -> Res {
        let s = self.value(plane).shape();
        if s.len() != 3 {
            return Err(shape_err("bilinear_sample", "rank", format!("{s:?}")));
        }
        let su = uvs.shape();
        if su.len() != 2 || su[1] != 2 {
            return Err(shape_err("bilinear_sample", "uvs", format!("{su:?}")));
        }
        if self.mode == Mode::Checked {
            for (i, &v) in uvs.data().iter().enumerate() {
                if !(0.0..=1.0).contains(&v) {
                    return Err(NumericsError::OutOfRange {
                        op: "bilinear_sample",
                        detail: format!("uv[{}] = {v}", i / 2),
                    });
                }
            }
        }
        let (h, w, c) = (s[0], s[1], s[2]);
        let n = su[0];
        let data = kn::bilinear_gather(self.value(plane).data(), h, w, c, uvs.data());
        let v = Tensor::from_vec(&[n, c], data)?;
        let ng = self.needs(plane);
        self.push(
            "bilinear_sample",
            v,
            Op::BilinearSample {
                plane,
                uvs: uvs.clone(),
            },
            ng,
        )
    }

    /// Per-group normalization of `[h,w,c]` over (H, W, group channels);
    /// no affine part (modulation is applied by separate channel ops).
    pub fn group_norm(&mut self, x: NodeId, groups: usize, eps: Real) -> Res {
        let s = self.value(x).shape();
        if s.len() != 3 {
            return Err(shape_err("group_norm", "rank", format!("{s:?}")));
        }
        let (h, w, c) = (s[0], s[1], s[2]);
        if groups == 0 || c % groups != 0 {
            return Err(shape_err(
                "group_norm",
                "channels",
                format!("{c} channels not divisible into {groups} groups"),
            ));
        }
        let (data, stats) = kn::group_norm_fwd(self.value(x).data(), h, w, c, groups, eps);
        let v = Tensor::from_vec(&[h, w, c], data)?;
        let ng = self.needs(x);
        self.push("group_norm", v, Op::GroupNorm { x, groups, stats }, ng)
    }

    /// Center-aligned bilinear resize of `[h,w,c]` to `[oh,ow,c]`.
    pub fn resize_bilinear(&mut self, x: NodeId, oh: usize, ow: usize) -> Res {
        let s = self.value(x).shape();
        if s.len() != 3 {
            return Err(shape_err("resize_bilinear", "rank", format!("{s:?}")));
        }
        if oh == 0 || ow == 0 {
            return Err(shape_err("resize_bilinear", "extent", format!("{oh}x{ow}")));
        }
        let (h, w, c) = (s[0], s[1], s[2]);
        let data = kn::resize_bilinear(self.value(x).data(), h, w, c, oh, ow);
        let v = Tensor::from_vec(&[oh, ow, c], data)?;
        let ng = self.needs(x);
        self.push("resize_bilinear", v, Op::ResizeBilinear { x, oh, ow }, ng)
    }

    /// Per-ray distortion: sum_{i,j} w_i w_j |t_i - t_j| + (1/3) sum_i w_i^2 d_i
    /// over `[r,s]` weights with constant midpoints and widths.
    pub fn distortion(&mut self, w: NodeId, mid: &Tensor, width: &Tensor) -> Res {
        let s = self.value(w).shape().to_vec();
        if s.len() != 2 || mid.shape() != s.as_slice() || width.shape() != s.as_slice() {
            return Err(shape_err(
                "distortion",
                "all",
                format!("{s:?}, {:?}, {:?}", mid.shape(), width.shape()),
            ));
        }
        let (r, ns) = (s[0], s[1]);
        let wv = self.value(w).data();
        let mut data = vec![0.0; r];
        for ray in 0..r {
            let wr = &wv[ray * ns..(ray + 1) * ns];
            let tr = &mid.data()[ray * ns..(ray + 1) * ns];
            let dr = &width.data()[ray * ns..(ray + 1) * ns];
            let mut acc = 0.0;
            for i in 0..ns {
                for j in 0..ns {
                    acc += wr[i] * wr[j] * (tr[i] - tr[j]).abs();
                }
                acc += wr[i] * wr[i] * dr[i] / 3.0;
            }
            data[ray] = acc;
        }
        let v = Tensor::from_vec(&[r], data)?;
        let ng = self.needs(w);
        self.push(
            "distortion",
            v,
            Op::Distortion {
                w,
                mid: mid.clone(),
                width: width.clone(),
            },
            ng,
        )
    }

    // ---- composites ----

    /// mean((a - b)^2), composed from primitives.
    pub fn mse(&mut self, a: NodeId, b: NodeId) -> Res {
        let d = self.sub(a, b)?;
        let sq = self.mul(d, d)?;
        self.mean_all(sq)
    }

    // ---- backward ----

    /// Reverse-accumulate d(loss)/d(node) for every node that needs it.
    /// `loss` must be a scalar.
    pub fn backward(&mut self, loss: NodeId) -> Result<Gradients, NumericsError> {
        if self.value(loss).len() != 1 {
            return Err(shape_err(
                "backward",
                "loss",
                format!("{:?} is not a scalar", self.value(loss).shape()),
            ));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Tensor>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for id in (0..=loss.0).rev() {
            if grads[id].is_none() || !self.nodes[id].needs_grad {
                continue;
            }
            let dy = grads[id].take().unwrap();
            self.accumulate(id, &dy, &mut grads);
            if matches!(self.nodes[id].op, Op::Leaf) {
                grads[id] = Some(dy);
            }
        }
        if self.mode == Mode::Checked {
            for (i, g) in grads.iter().enumerate() {
                if let Some(t) = g {
                    if !t.all_finite() {
                        let _ = i;
                        return Err(NumericsError::NonFinite { op: "backward" });
                    }
                }
            }
        }
        Ok(Gradients { grads })
    }

    fn acc(&self, grads: &mut [Option<Tensor>], id: NodeId, contrib: impl Fn(&mut Tensor)) {
        if !self.needs(id) {
            return;
        }
        let slot = &mut grads[id.0];
        if slot.is_none() {
            *slot = Some(Tensor::zeros(self.value(id).shape()));
        }
        contrib(slot.as_mut().unwrap());
    }

    fn acc_elems(&self, grads: &mut [Option<Tensor>], id: NodeId, vals: &[Real]) {
        self.acc(grads, id, |g| {
            for (o, v) in g.data_mut().iter_mut().zip(vals) {
                *o += v;
            }
        });
    }

    fn accumulate(&self, id: usize, dy: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[id];
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Neg(x) => {
                let vals: Vec<Real> = dy.data().iter().map(|&d| -d).collect();
                self.acc_elems(grads, *x, &vals);
            }
            Op::Exp(x) => {
                let vals: Vec<Real> = dy
                    .data()
                    .iter()
                    .zip(out.data())
                    .map(|(&d, &y)| d * y)
                    .collect();
                self.acc_elems(grads, *x, &vals);
            }
            Op::Abs(x) => {
                let xin = self.value(*x).data();
                let vals: Vec<Real> = dy
                    .data()
                    .iter()
                    .zip(xin)
                    .map(|(&d, &v)| {
                        if v > 0.0 {
                            d
                        } else if v < 0.0 {
                            -d
                        } else {
                            0.0
                        }
                    })
                    .collect();
                self.acc_elems(grads, *x, &vals);
            }
            Op::Softplus(x) => {
                let xin = self.value(*x).data();
                let vals: Vec<Real> = dy
                    .data()
                    .iter()
                    .zip(xin)
                    .map(|(&d, &v)| d * kn::sigmoid(v))
                    .collect();
                self.acc_elems(grads, *x, &vals);
            }
            Op::Sigmoid(x) => {
                let vals: Vec<Real> = dy
                    .data()
                    .iter()
                    .zip(out.data())
                    .map(|(&d, &y)| d * y * (1.0 - y))
                    .collect();
                self.acc_elems(grads, *x, &vals);
            }
            Op::Sin(x) => {
                let xin = self.value(*x).data();
                let vals: Vec<Real> = dy
                    .data()
                    .iter()
                    .zip(xin)
                    .map(|(&d, &v)| d * v.cos())
                    .collect();
                self.acc_elems(grads, *x, &vals);
            }
            Op::Cos(x) => {
                let xin = self.value(*x).data();
                let vals: Vec<Real> = dy
                    .data()
                    .iter()
                    .zip(xin)
                    .map(|(&d, &v)| -d * v.sin())
                    .collect();
                self.acc_elems(grads, *x, &vals);
            }
            Op::Scale(x, c) => {
                let vals: Vec<Real> = dy.data().iter().map(|&d| d * c).collect();
                self.acc_elems(grads, *x, &vals);
            }
            Op::AddScalar(x) => self.acc_elems(grads, *x, dy.data()),
            Op::Add(a, b) => {
                self.acc_elems(grads, *a, dy.data());
                self.acc_elems(grads, *b, dy.data());
            }
            Op::Sub(a, b) => {
                self.acc_elems(grads, *a, dy.data());
                let vals: Vec<Real> = dy.data().iter().map(|&d| -d).collect();
                self.acc_elems(grads, *b, &vals);
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    let bv = self.value(*b).data();
                    let vals: Vec<Real> =
                        dy.data().iter().zip(bv).map(|(&d, &v)| d * v).collect();
                    self.acc_elems(grads, *a, &vals);
                }
                if self.needs(*b) {
                    let av = self.value(*a).data();
                    let vals: Vec<Real> =
                        dy.data().iter().zip(av).map(|(&d, &v)| d * v).collect();
                    self.acc_elems(grads, *b, &vals);
                }
            }
            Op::Matmul { a, b, m, k, n } => {
                if self.needs(*a) {
                    let da = kn::matmul_a_bt(dy.data(), self.value(*b).data(), *m, *n, *k);
                    self.acc_elems(grads, *a, &da);
                }
                if self.needs(*b) {
                    let db = kn::matmul_at_b(self.value(*a).data(), dy.data(), *m, *k, *n);
                    self.acc_elems(grads, *b, &db);
                }
            }
            Op::AddRowBias { x, b } => {
                self.acc_elems(grads, *x, dy.data());
                if self.needs(*b) {
                    let m = self.value(*b).len();
                    let rows = dy.len() / m;
                    let mut db = vec![0.0; m];
                    for i in 0..rows {
                        for j in 0..m {
                            db[j] += dy.data()[i * m + j];
                        }
                    }
                    self.acc_elems(grads, *b, &db);
                }
            }
            Op::MulChannel { x, s } => {
                let c = self.value(*s).len();
                let hw = dy.len() / c;
                if self.needs(*x) {
                    let sv = self.value(*s).data();
                    let mut dx = vec![0.0; dy.len()];
                    for p in 0..hw {
                        for ch in 0..c {
                            dx[p * c + ch] = dy.data()[p * c + ch] * sv[ch];
                        }
                    }
                    self.acc_elems(grads, *x, &dx);
                }
                if self.needs(*s) {
                    let xv = self.value(*x).data();
                    let mut ds = vec![0.0; c];
                    for p in 0..hw {
                        for ch in 0..c {
                            ds[ch] += dy.data()[p * c + ch] * xv[p * c + ch];
                        }
                    }
                    self.acc_elems(grads, *s, &ds);
                }
            }
            Op::AddChannel { x, b } => {
                self.acc_elems(grads, *x, dy.data());
                if self.needs(*b) {
                    let c = self.value(*b).len();
                    let hw = dy.len() / c;
                    let mut db = vec![0.0; c];
                    for p in 0..hw {
                        for ch in 0..c {
                            db[ch] += dy.data()[p * c + ch];
                        }
                    }
                    self.acc_elems(grads, *b, &db);
                }
            }
            Op::ConcatLast { parts, sizes } => {
                let total: usize = sizes.iter().sum();
                let rows = dy.len() / total;
                let mut off = 0;
                for (&p, &sz) in parts.iter().zip(sizes) {
                    if self.needs(p) {
                        let mut dp = vec![0.0; rows * sz];
                        for r in 0..rows {
                            dp[r * sz..(r + 1) * sz]
                                .copy_from_slice(&dy.data()[r * total + off..r * total + off + sz]);
                        }
                        self.acc_elems(grads, p, &dp);
                    }
                    off += sz;
                }
            }
            Op::SliceLast {
                x,
                start,
                len,
                full,
            } => {
                let rows = dy.len() / len;
                self.acc(grads, *x, |g| {
                    for r in 0..rows {
                        for j in 0..*len {
                            g.data_mut()[r * full + start + j] += dy.data()[r * len + j];
                        }
                    }
                });
            }
            Op::ConcatW { parts, widths } => {
                let wt: usize = widths.iter().sum();
                let s = out.shape();
                let (h, c) = (s[0], s[2]);
                let mut off = 0;
                for (&p, &wi) in parts.iter().zip(widths) {
                    if self.needs(p) {
                        let mut dp = vec![0.0; h * wi * c];
                        for r in 0..h {
                            dp[r * wi * c..(r + 1) * wi * c].copy_from_slice(
                                &dy.data()[(r * wt + off) * c..(r * wt + off + wi) * c],
                            );
                        }
                        self.acc_elems(grads, p, &dp);
                    }
                    off += wi;
                }
            }
            Op::SliceW {
                x,
                start,
                len,
                full,
            } => {
                let s = out.shape();
                let (h, c) = (s[0], s[2]);
                self.acc(grads, *x, |g| {
                    for r in 0..h {
                        for j in 0..*len {
                            for ch in 0..c {
                                g.data_mut()[((r * full) + start + j) * c + ch] +=
                                    dy.data()[(r * len + j) * c + ch];
                            }
                        }
                    }
                });
            }
            Op::Reshape(x) => self.acc_elems(grads, *x, dy.data()),
            Op::Transpose2 { x, m, n } => {
                let mut dx = vec![0.0; m * n];
                for i in 0..*m {
                    for j in 0..*n {
                        dx[i * n + j] = dy.data()[j * m + i];
                    }
                }
                self.acc_elems(grads, *x, &dx);
            }
            Op::TransposeHw(x) => {
                let s = self.value(*x).shape();
                let (h, w, c) = (s[0], s[1], s[2]);
                let mut dx = vec![0.0; h * w * c];
                for r in 0..h {
                    for col in 0..w {
                        for ch in 0..c {
                            dx[(r * w + col) * c + ch] = dy.data()[(col * h + r) * c + ch];
                        }
                    }
                }
                self.acc_elems(grads, *x, &dx);
            }
            Op::SumAll(x) => {
                let d = dy.item();
                self.acc(grads, *x, |g| {
                    for o in g.data_mut() {
                        *o += d;
                    }
                });
            }
            Op::MeanAll(x) => {
                let d = dy.item() / self.value(*x).len() as Real;
                self.acc(grads, *x, |g| {
                    for o in g.data_mut() {
                        *o += d;
                    }
                });
            }
            Op::SumMid(x) => {
                let s = self.value(*x).shape();
                let (a, b, c) = (s[0], s[1], s[2]);
                self.acc(grads, *x, |g| {
                    for i in 0..a {
                        for j in 0..b {
                            for ch in 0..c {
                                g.data_mut()[(i * b + j) * c + ch] += dy.data()[i * c + ch];
                            }
                        }
                    }
                });
            }
            Op::RepeatLast { x, k } => {
                let ab = self.value(*x).len();
                self.acc(grads, *x, |g| {
                    for i in 0..ab {
                        let mut s = 0.0;
                        for j in 0..*k {
                            s += dy.data()[i * k + j];
                        }
                        g.data_mut()[i] += s;
                    }
                });
            }
            Op::CumsumExclRows(x) => {
                // out_j = sum_{i<j} x_i  =>  dx_i = sum_{j>i} dy_j
                let s = self.value(*x).shape();
                let (r, cols) = (s[0], s[1]);
                self.acc(grads, *x, |g| {
                    for i in 0..r {
                        let mut suffix = 0.0;
                        for j in (0..cols).rev() {
                            g.data_mut()[i * cols + j] += suffix;
                            suffix += dy.data()[i * cols + j];
                        }
                    }
                });
            }
            Op::SoftmaxRows(x) => {
                let s = out.shape();
                let (n, m) = (s[0], s[1]);
                let y = out.data();
                let mut dx = vec![0.0; n * m];
                for i in 0..n {
                    let mut dot = 0.0;
                    for j in 0..m {
                        dot += dy.data()[i * m + j] * y[i * m + j];
                    }
                    for j in 0..m {
                        dx[i * m + j] = y[i * m + j] * (dy.data()[i * m + j] - dot);
                    }
                }
                self.acc_elems(grads, *x, &dx);
            }
            Op::Conv2d {
                x,
                kern,
                bias,
                stride,
                pad,
            } => {
                let sx = self.value(*x).shape();
                let sk = self.value(*kern).shape();
                let (h, w, cin) = (sx[0], sx[1], sx[2]);
                let (kh, kw, cout) = (sk[0], sk[1], sk[3]);
                let oh = out.shape()[0];
                let ow = out.shape()[1];
                let patch = kh * kw * cin;
                if self.needs(*kern) || self.needs(*x) {
                    let cols =
                        kn::im2col(self.value(*x).data(), h, w, cin, kh, kw, *stride, *pad);
                    if self.needs(*kern) {
                        let dk = kn::matmul_at_b(&cols, dy.data(), oh * ow, patch, cout);
                        self.acc_elems(grads, *kern, &dk);
                    }
                    if self.needs(*x) {
                        let dcols = kn::matmul_a_bt(
                            dy.data(),
                            self.value(*kern).data(),
                            oh * ow,
                            cout,
                            patch,
                        );
                        self.acc(grads, *x, |g| {
                            kn::col2im_add(
                                &dcols,
                                h,
                                w,
                                cin,
                                kh,
                                kw,
                                *stride,
                                *pad,
                                g.data_mut(),
                            );
                        });
                    }
                }
                if let Some(b) = bias {
                    if self.needs(*b) {
                        let mut db = vec![0.0; cout];
                        for p in 0..oh * ow {
                            for c in 0..cout {
                                db[c] += dy.data()[p * cout + c];
                            }
                        }
                        self.acc_elems(grads, *b, &db);
                    }
                }
            }
            Op::AxisMean { x, axis } => {
                let s = self.value(*x).shape();
                let (h, w, c) = (s[0], s[1], s[2]);
                self.acc(grads, *x, |g| match axis {
                    PoolAxis::Rows => {
                        for r in 0..h {
                            for col in 0..w {
                                for ch in 0..c {
                                    g.data_mut()[(r * w + col) * c + ch] +=
                                        dy.data()[col * c + ch] / h as Real;
                                }
                            }
                        }
                    }
                    PoolAxis::Cols => {
                        for r in 0..h {
                            for col in 0..w {
                                for ch in 0..c {
                                    g.data_mut()[(r * w + col) * c + ch] +=
                                        dy.data()[r * c + ch] / w as Real;
                                }
                            }
                        }
                    }
                });
            }
            Op::ReplicateRows { x, h } => {
                let s = out.shape();
                let (w, c) = (s[1], s[2]);
                self.acc(grads, *x, |g| {
                    for r in 0..*h {
                        for i in 0..w * c {
                            g.data_mut()[i] += dy.data()[r * w * c + i];
                        }
                    }
                });
            }
            Op::ReplicateCols { x, w } => {
                let s = out.shape();
                let (h, c) = (s[0], s[2]);
                self.acc(grads, *x, |g| {
                    for r in 0..h {
                        for col in 0..*w {
                            for ch in 0..c {
                                g.data_mut()[r * c + ch] += dy.data()[(r * w + col) * c + ch];
                            }
                        }
                    }
                });
            }
            Op::BilinearSample { plane, uvs } => {
                // bilinear_tap border-clamps, so fast-mode out-of-range uvs
                // scatter to the same texels they gathered from.
                let s = self.value(*plane).shape();
                let (h, w, c) = (s[0], s[1], s[2]);
                self.acc(grads, *plane, |g| {
                    kn::bilinear_scatter_add(dy.data(), h, w, c, uvs.data(), g.data_mut());
                });
            }
            Op::GroupNorm { x, groups, stats } => {
                let s = out.shape();
                let (h, w, c) = (s[0], s[1], s[2]);
                self.acc(grads, *x, |g| {
                    kn::group_norm_bwd(
                        dy.data(),
                        out.data(),
                        h,
                        w,
                        c,
                        *groups,
                        stats,
                        g.data_mut(),
                    );
                });
            }
            Op::ResizeBilinear { x, oh, ow } => {
                let s = self.value(*x).shape();
                let (h, w, c) = (s[0], s[1], s[2]);
                self.acc(grads, *x, |g| {
                    kn::resize_bilinear_back(dy.data(), h, w, c, *oh, *ow, g.data_mut());
                });
            }
            Op::Distortion { w, mid, width } => {
                let s = self.value(*w).shape();
                let (r, ns) = (s[0], s[1]);
                let wv = self.value(*w).data();
                let mut dw = vec![0.0; r * ns];
                for ray in 0..r {
                    let d = dy.data()[ray];
                    let wr = &wv[ray * ns..(ray + 1) * ns];
                    let tr = &mid.data()[ray * ns..(ray + 1) * ns];
                    let dr = &width.data()[ray * ns..(ray + 1) * ns];
                    for i in 0..ns {
                        let mut pair = 0.0;
                        for j in 0..ns {
                            pair += wr[j] * (tr[i] - tr[j]).abs();
                        }
                        dw[ray * ns + i] = d * (2.0 * pair + 2.0 / 3.0 * wr[i] * dr[i]);
                    }
                }
                self.acc_elems(grads, *w, &dw);
            }
        }
    }
}
