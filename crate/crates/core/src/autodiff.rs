//! Define-by-run reverse-mode automatic differentiation.
//!
//! Every operation on a [`Graph`] computes its forward value immediately and
//! records enough state to replay the chain rule in reverse. Nodes are
//! appended in evaluation order, so reverse insertion order is a valid
//! topological order for the backward sweep.

use std::collections::BTreeMap;
use std::rc::Rc;

use crate::dualpath::{fold_frames, fold_frames_adjoint, unfold_frames, unfold_frames_adjoint, ChunkSpec};
use crate::error::{Error, Result};
use crate::tensor::{gemm, Scalar, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum UnaryKind {
    Relu,
    Sigmoid,
    Tanh,
    Exp,
    Log,
    Sqrt,
    Square,
    Neg,
}

enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Binary { a: Var, b: Var, kind: BinaryKind },
    Unary { a: Var, kind: UnaryKind },
    Scale { a: Var, s: T },
    AddScalar { a: Var },
    Prelu { a: Var, slope: Var },
    Clamp { a: Var, lo: T, hi: T },
    Softmax { a: Var },
    LayerNorm { a: Var, gamma: Var, beta: Var, mean: Vec<T>, rstd: Vec<T> },
    Sum { a: Var },
    Mean { a: Var },
    SumLast { a: Var },
    Reshape { a: Var },
    Permute { a: Var, perm: Vec<usize> },
    Slice { a: Var, axis: usize, start: usize },
    Concat { parts: Vec<Var>, axis: usize },
    Conv1d { x: Var, w: Var, stride: usize },
    ConvTranspose1d { x: Var, w: Var, stride: usize },
    WindowStats { a: Var, window: usize, eps: T },
    Unfold { a: Var, spec: ChunkSpec },
    Fold { a: Var, spec: ChunkSpec },
    StraightThrough { a: Var },
}

impl<T> Op<T> {
    fn parents(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf => vec![],
            MatMul { a, b, .. } | Binary { a, b, .. } => vec![*a, *b],
            Prelu { a, slope } => vec![*a, *slope],
            LayerNorm { a, gamma, beta, .. } => vec![*a, *gamma, *beta],
            Conv1d { x, w, .. } | ConvTranspose1d { x, w, .. } => vec![*x, *w],
            Concat { parts, .. } => parts.clone(),
            Unary { a, .. }
            | Scale { a, .. }
            | AddScalar { a }
            | Clamp { a, .. }
            | Softmax { a, .. }
            | Sum { a }
            | Mean { a }
            | SumLast { a }
            | Reshape { a }
            | Permute { a, .. }
            | Slice { a, .. }
            | WindowStats { a, .. }
            | Unfold { a, .. }
            | Fold { a, .. }
            | StraightThrough { a } => vec![*a],
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
    /// Key mask for masked softmax nodes; `false` entries are excluded.
    mask: Option<Rc<Vec<bool>>>,
}

/// Operation names understood by the engine.
pub fn required_op_set() -> &'static [&'static str] {
    &[
        "matmul",
        "batched_matmul",
        "conv1d",
        "conv_transpose1d",
        "relu",
        "prelu",
        "sigmoid",
        "tanh",
        "softmax",
        "masked_softmax",
        "layer_norm",
        "add",
        "sub",
        "mul",
        "div",
        "window_mean_std",
        "reshape",
        "permute",
        "slice",
        "concat",
        "exp",
        "log",
        "sqrt",
        "square",
        "clamp",
        "sum",
        "mean",
        "unfold",
        "fold",
        "straight_through",
    ]
}

pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    named: BTreeMap<String, Var>,
    params: Vec<(String, Var)>,
    check_finite: bool,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            named: BTreeMap::new(),
            params: Vec::new(),
            check_finite: true,
        }
    }

    /// Disables the per-node NaN/Inf scan.
    pub fn without_finite_check(mut self) -> Self {
        self.check_finite = false;
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn lookup(&self, name: &str) -> Option<Var> {
        self.named.get(name).copied()
    }

    /// Differentiable named leaf.
    pub fn input(&mut self, name: &str, value: Tensor<T>) -> Var {
        let v = self.leaf(value, true);
        self.named.insert(name.to_string(), v);
        v
    }

    /// Trainable leaf; its gradient is reported by [`Gradients::params`].
    pub fn param(&mut self, name: &str, value: Tensor<T>) -> Var {
        let v = self.input(name, value);
        self.params.push((name.to_string(), v));
        v
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn scalar(&mut self, v: T) -> Var {
        self.constant(Tensor::scalar(v))
    }

    /// Copies a node's value into a new constant, severing the gradient.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    fn leaf(&mut self, value: Tensor<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad,
            mask: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn shape_err(&self, op: &'static str, detail: String) -> Error {
        Error::Shape {
            node: self.nodes.len(),
            op,
            detail,
        }
    }

    fn push(&mut self, op: Op<T>, value: Tensor<T>, name: &'static str) -> Result<Var> {
        if self.check_finite && !value.is_finite() {
            return Err(Error::Numeric {
                node: self.nodes.len(),
                op: name,
            });
        }
        let needs_grad = op.parents().iter().any(|p| self.nodes[p.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
            mask: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    // ---- linear algebra -------------------------------------------------

    /// Matrix product of the last two axes with optional transposes.
    ///
    /// `a` is rank 2 or 3; `b` is rank 2 (shared across a's batch) or rank 3
    /// with the same batch size.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let geo = MatGeom::new(&sa, &sb, ta, tb)
            .ok_or_else(|| self.shape_err("matmul", format!("{sa:?} x {sb:?} (ta={ta}, tb={tb})")))?;
        let mut out = vec![T::zero(); geo.batch * geo.m * geo.n];
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        for bi in 0..geo.batch {
            gemm(
                ta,
                tb,
                geo.m,
                geo.n,
                geo.k,
                &av[bi * geo.m * geo.k..(bi + 1) * geo.m * geo.k],
                geo.b_slice(bv, bi),
                &mut out[bi * geo.m * geo.n..(bi + 1) * geo.m * geo.n],
            );
        }
        let value = Tensor::new(geo.out_shape(&sa), out)?;
        self.push(Op::MatMul { a, b, ta, tb }, value, "matmul")
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    /// `x · wᵀ + bias` over the last axis of `x`, with `w` stored `[out, in]`.
    pub fn linear(&mut self, x: Var, w: Var, bias: Option<Var>) -> Result<Var> {
        let y = self.matmul_t(x, w, false, true)?;
        match bias {
            Some(b) => self.add(y, b),
            None => Ok(y),
        }
    }

    // ---- elementwise ----------------------------------------------------

    fn binary(&mut self, a: Var, b: Var, kind: BinaryKind, name: &'static str) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let map = Broadcast::new(&sa, &sb)
            .ok_or_else(|| self.shape_err(name, format!("{sb:?} does not broadcast onto {sa:?}")))?;
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let f = |x: T, y: T| match kind {
            BinaryKind::Add => x + y,
            BinaryKind::Sub => x - y,
            BinaryKind::Mul => x * y,
            BinaryKind::Div => x / y,
        };
        let data: Vec<T> = av.iter().enumerate().map(|(i, &x)| f(x, bv[map.index(i)])).collect();
        let value = Tensor::new(sa, data)?;
        self.push(Op::Binary { a, b, kind }, value, name)
    }

    /// `a + b`, with `b` broadcast onto `a`'s shape.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryKind::Add, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryKind::Sub, "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryKind::Mul, "mul")
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryKind::Div, "div")
    }

    fn unary(&mut self, a: Var, kind: UnaryKind, name: &'static str) -> Result<Var> {
        let value = self.value(a).map(|x| match kind {
            UnaryKind::Relu => x.max(T::zero()),
            UnaryKind::Sigmoid => T::one() / (T::one() + (-x).exp()),
            UnaryKind::Tanh => x.tanh(),
            UnaryKind::Exp => x.exp(),
            UnaryKind::Log => x.ln(),
            UnaryKind::Sqrt => x.sqrt(),
            UnaryKind::Square => x * x,
            UnaryKind::Neg => -x,
        });
        self.push(Op::Unary { a, kind }, value, name)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, UnaryKind::Relu, "relu")
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(a, UnaryKind::Sigmoid, "sigmoid")
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary(a, UnaryKind::Tanh, "tanh")
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(a, UnaryKind::Exp, "exp")
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary(a, UnaryKind::Log, "log")
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        self.unary(a, UnaryKind::Sqrt, "sqrt")
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.unary(a, UnaryKind::Square, "square")
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.unary(a, UnaryKind::Neg, "neg")
    }

    pub fn scale(&mut self, a: Var, s: T) -> Result<Var> {
        let value = self.value(a).map(|x| x * s);
        self.push(Op::Scale { a, s }, value, "scale")
    }

    pub fn add_scalar(&mut self, a: Var, s: T) -> Result<Var> {
        let value = self.value(a).map(|x| x + s);
        self.push(Op::AddScalar { a }, value, "add_scalar")
    }

    /// Leaky ReLU with a learned scalar slope for negative inputs.
    pub fn prelu(&mut self, a: Var, slope: Var) -> Result<Var> {
        if self.value(slope).numel() != 1 {
            return Err(self.shape_err("prelu", format!("slope shape {:?}", self.shape(slope))));
        }
        let s = self.value(slope).item();
        let value = self.value(a).map(|x| if x > T::zero() { x } else { s * x });
        self.push(Op::Prelu { a, slope }, value, "prelu")
    }

    pub fn clamp(&mut self, a: Var, lo: T, hi: T) -> Result<Var> {
        let value = self.value(a).map(|x| x.max(lo).min(hi));
        self.push(Op::Clamp { a, lo, hi }, value, "clamp")
    }

    // ---- normalisation --------------------------------------------------

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        self.softmax_impl(a, None)
    }

    /// Softmax over the last axis restricted to entries where `mask` is
    /// `true`; excluded entries are exactly zero. A row with no admitted
    /// entry yields all zeros.
    pub fn masked_softmax(&mut self, a: Var, mask: Rc<Vec<bool>>) -> Result<Var> {
        if mask.len() != self.value(a).numel() {
            return Err(self.shape_err(
                "masked_softmax",
                format!("mask of {} entries for {:?}", mask.len(), self.shape(a)),
            ));
        }
        self.softmax_impl(a, Some(mask))
    }

    fn softmax_impl(&mut self, a: Var, mask: Option<Rc<Vec<bool>>>) -> Result<Var> {
        let x = self.value(a);
        let w = *x.shape().last().unwrap_or(&1);
        let mut out = vec![T::zero(); x.numel()];
        for (r, row) in x.data().chunks(w.max(1)).enumerate() {
            let keep = |j: usize| mask.as_ref().is_none_or(|m| m[r * w + j]);
            softmax_row(row, &mut out[r * w..(r + 1) * w], keep);
        }
        let value = Tensor::new(x.shape().to_vec(), out)?;
        let v = self.push(Op::Softmax { a }, value, "softmax")?;
        self.nodes[v.0].mask = mask;
        Ok(v)
    }

    /// Layer normalisation over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, a: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let x = self.value(a);
        let w = *x.shape().last().unwrap_or(&1);
        if self.value(gamma).numel() != w || self.value(beta).numel() != w {
            return Err(self.shape_err("layer_norm", format!("affine width mismatch for {:?}", x.shape())));
        }
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let rows = x.numel() / w;
        let mut out = vec![T::zero(); x.numel()];
        let mut means = Vec::with_capacity(rows);
        let mut rstds = Vec::with_capacity(rows);
        for (r, row) in x.data().chunks(w).enumerate() {
            let (mean, rstd) = norm_stats(row, T::cast(eps));
            for j in 0..w {
                out[r * w + j] = (row[j] - mean) * rstd * g[j] + b[j];
            }
            means.push(mean);
            rstds.push(rstd);
        }
        let value = Tensor::new(x.shape().to_vec(), out)?;
        self.push(
            Op::LayerNorm {
                a,
                gamma,
                beta,
                mean: means,
                rstd: rstds,
            },
            value,
            "layer_norm",
        )
    }

    // ---- reductions -----------------------------------------------------

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).sum();
        self.push(Op::Sum { a }, Tensor::scalar(s), "sum")
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let s = x.sum() / T::cast(x.numel() as f64);
        self.push(Op::Mean { a }, Tensor::scalar(s), "mean")
    }

    /// Sum over the last axis.
    pub fn sum_last(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let w = *x.shape().last().unwrap_or(&1);
        let data: Vec<T> = x.data().chunks(w).map(|r| r.iter().copied().sum()).collect();
        let shape = x.shape()[..x.rank().saturating_sub(1)].to_vec();
        let value = Tensor::new(shape, data)?;
        self.push(Op::SumLast { a }, value, "sum_last")
    }

    // ---- layout ---------------------------------------------------------

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self
            .value(a)
            .clone()
            .reshape(shape)
            .map_err(|e| self.shape_err("reshape", e.to_string()))?;
        self.push(Op::Reshape { a }, value, "reshape")
    }

    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let x = self.value(a);
        let mut sorted = perm.to_vec();
        sorted.sort_unstable();
        if sorted != (0..x.rank()).collect::<Vec<_>>() {
            return Err(self.shape_err("permute", format!("{perm:?} for {:?}", x.shape())));
        }
        let value = permute_tensor(x, perm);
        self.push(
            Op::Permute {
                a,
                perm: perm.to_vec(),
            },
            value,
            "permute",
        )
    }

    pub fn transpose(&mut self, a: Var, i: usize, j: usize) -> Result<Var> {
        let mut perm: Vec<usize> = (0..self.value(a).rank()).collect();
        if i >= perm.len() || j >= perm.len() {
            return Err(self.shape_err("transpose", format!("axes {i},{j} for {:?}", self.shape(a))));
        }
        perm.swap(i, j);
        self.permute(a, &perm)
    }

    /// `len` entries of `axis` starting at `start`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let x = self.value(a);
        if axis >= x.rank() || start + len > x.dim(axis) {
            return Err(self.shape_err(
                "slice",
                format!("[{start}, {}) on axis {axis} of {:?}", start + len, x.shape()),
            ));
        }
        let outer: usize = x.shape()[..axis].iter().product();
        let inner: usize = x.shape()[axis + 1..].iter().product();
        let d = x.dim(axis);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * d * inner;
            out.extend_from_slice(&x.data()[base + start * inner..base + (start + len) * inner]);
        }
        let mut shape = x.shape().to_vec();
        shape[axis] = len;
        let value = Tensor::new(shape, out)?;
        self.push(Op::Slice { a, axis, start }, value, "slice")
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .shape(*parts.first().ok_or_else(|| self.shape_err("concat", "no parts".into()))?)
            .to_vec();
        if axis >= first.len() {
            return Err(self.shape_err("concat", format!("axis {axis} for {first:?}")));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let ok = s.len() == first.len()
                && s.iter().zip(&first).enumerate().all(|(i, (x, y))| i == axis || x == y);
            if !ok {
                return Err(self.shape_err("concat", format!("{s:?} vs {first:?}")));
            }
            total += s[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let x = self.value(p);
                let span = x.dim(axis) * inner;
                out.extend_from_slice(&x.data()[o * span..(o + 1) * span]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let value = Tensor::new(shape, out)?;
        self.push(
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            value,
            "concat",
        )
    }

    // ---- convolution ----------------------------------------------------

    /// `x`: `[C_in, L]`, `w`: `[C_out, C_in, K]` → `[C_out, (L-K)/stride + 1]`.
    pub fn conv1d(&mut self, x: Var, w: Var, stride: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 2 || sw.len() != 3 || sw[1] != sx[0] || sx[1] < sw[2] || stride == 0 {
            return Err(self.shape_err("conv1d", format!("input {sx:?}, kernel {sw:?}, stride {stride}")));
        }
        let (cin, l) = (sx[0], sx[1]);
        let (cout, k) = (sw[0], sw[2]);
        let t_out = (l - k) / stride + 1;
        let (xv, wv) = (self.value(x).data(), self.value(w).data());
        let mut out = vec![T::zero(); cout * t_out];
        for o in 0..cout {
            for c in 0..cin {
                let wk = &wv[(o * cin + c) * k..(o * cin + c + 1) * k];
                let xr = &xv[c * l..(c + 1) * l];
                for t in 0..t_out {
                    out[o * t_out + t] = out[o * t_out + t] + crate::tensor::dot(wk, &xr[t * stride..t * stride + k]);
                }
            }
        }
        let value = Tensor::new(vec![cout, t_out], out)?;
        self.push(Op::Conv1d { x, w, stride }, value, "conv1d")
    }

    /// `x`: `[C_in, T]`, `w`: `[C_in, C_out, K]` → `[C_out, (T-1)·stride + K]`.
    pub fn conv_transpose1d(&mut self, x: Var, w: Var, stride: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 2 || sw.len() != 3 || sw[0] != sx[0] || sx[1] == 0 || stride == 0 {
            return Err(self.shape_err(
                "conv_transpose1d",
                format!("input {sx:?}, kernel {sw:?}, stride {stride}"),
            ));
        }
        let (cin, t) = (sx[0], sx[1]);
        let (cout, k) = (sw[1], sw[2]);
        let l = (t - 1) * stride + k;
        let (xv, wv) = (self.value(x).data(), self.value(w).data());
        let mut out = vec![T::zero(); cout * l];
        for o in 0..cout {
            let orow = &mut out[o * l..(o + 1) * l];
            for c in 0..cin {
                let wk = &wv[(c * cout + o) * k..(c * cout + o + 1) * k];
                for ti in 0..t {
                    let xval = xv[c * t + ti];
                    crate::tensor::axpy(xval, wk, &mut orow[ti * stride..ti * stride + k]);
                }
            }
        }
        let value = Tensor::new(vec![cout, l], out)?;
        self.push(Op::ConvTranspose1d { x, w, stride }, value, "conv_transpose1d")
    }

    // ---- sequence ops ---------------------------------------------------

    /// Mean and standard deviation of each feature over a centred window of
    /// `window` frames (truncated at the edges). `a` is `[T, F]`; the output
    /// is `[T, 2F]` with means first. The deviation is
    /// `sqrt(var + eps) - sqrt(eps)`, exactly zero for constant windows and
    /// differentiable everywhere.
    pub fn window_mean_std(&mut self, a: Var, window: usize, eps: f64) -> Result<Var> {
        let x = self.value(a);
        if x.rank() != 2 || window == 0 {
            return Err(self.shape_err("window_mean_std", format!("{:?}, window {window}", x.shape())));
        }
        let eps = T::cast(eps);
        let value = window_stats(x, window, eps);
        self.push(Op::WindowStats { a, window, eps }, value, "window_mean_std")
    }

    /// `[T, F]` → `[S, C, F]`, padded frames filled with `pad_row`.
    pub fn unfold(&mut self, a: Var, spec: ChunkSpec, pad_row: Option<&[T]>) -> Result<Var> {
        let x = self.value(a);
        if x.rank() != 2 || x.dim(0) != spec.length || pad_row.is_some_and(|p| p.len() != x.dim(1)) {
            return Err(self.shape_err("unfold", format!("{:?} with {spec:?}", x.shape())));
        }
        let f = x.dim(1);
        let data = unfold_frames(x.data(), f, &spec, pad_row);
        let value = Tensor::new(vec![spec.n_chunks(), spec.chunk_size, f], data)?;
        self.push(Op::Unfold { a, spec }, value, "unfold")
    }

    /// `[S, C, F]` → `[T, F]`, averaging overlapping windows.
    pub fn fold(&mut self, a: Var, spec: ChunkSpec) -> Result<Var> {
        let x = self.value(a);
        if x.rank() != 3 || x.dim(0) != spec.n_chunks() || x.dim(1) != spec.chunk_size {
            return Err(self.shape_err("fold", format!("{:?} with {spec:?}", x.shape())));
        }
        let f = x.dim(2);
        let data = fold_frames(x.data(), f, &spec);
        let value = Tensor::new(vec![spec.length, f], data)?;
        self.push(Op::Fold { a, spec }, value, "fold")
    }

    /// One-hot of the last-axis argmax (ties to the lower index) in the
    /// forward pass; identity Jacobian in the backward pass.
    pub fn straight_through_onehot(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let w = *x.shape().last().unwrap_or(&1);
        let mut out = vec![T::zero(); x.numel()];
        for (r, row) in x.data().chunks(w).enumerate() {
            out[r * w + argmax_lower(row)] = T::one();
        }
        let value = Tensor::new(x.shape().to_vec(), out)?;
        self.push(Op::StraightThrough { a }, value, "straight_through")
    }

    // ---- backward -------------------------------------------------------

    /// Reverse sweep from a scalar `output`.
    pub fn backward(&self, output: Var) -> Result<Gradients<T>> {
        if self.value(output).numel() != 1 {
            return Err(Error::contract(format!(
                "gradient requires a scalar output, node {} has shape {:?}",
                output.0,
                self.shape(output)
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(Tensor::full(self.shape(output), T::one()));
        for i in (0..=output.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients {
            grads,
            named: self.named.clone(),
            params: self.params.clone(),
        })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => {
                for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a = *a + *b;
                }
            }
            slot @ None => *slot = Some(g),
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn backprop_node(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[i];
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul { a, b, ta, tb } => {
                let (sa, sb) = (self.shape(a), self.shape(b));
                let geo = MatGeom::new(sa, sb, ta, tb).expect("validated in forward");
                let (av, bv) = (self.value(a).data(), self.value(b).data());
                let gd = g.data();
                let (m, n, k) = (geo.m, geo.n, geo.k);
                if self.wants(a) {
                    let mut da = vec![T::zero(); av.len()];
                    for bi in 0..geo.batch {
                        let gb = &gd[bi * m * n..(bi + 1) * m * n];
                        let bb = geo.b_slice(bv, bi);
                        let out = &mut da[bi * m * k..(bi + 1) * m * k];
                        if !ta {
                            gemm(false, !tb, m, k, n, gb, bb, out);
                        } else {
                            gemm(tb, true, k, m, n, bb, gb, out);
                        }
                    }
                    self.accumulate(grads, a, Tensor::new(sa.to_vec(), da).unwrap());
                }
                if self.wants(b) {
                    let mut db = vec![T::zero(); bv.len()];
                    for bi in 0..geo.batch {
                        let gb = &gd[bi * m * n..(bi + 1) * m * n];
                        let ab = &av[bi * m * k..(bi + 1) * m * k];
                        let off = if geo.b_shared { 0 } else { bi * k * n };
                        let out = &mut db[off..off + k * n];
                        if !tb {
                            gemm(!ta, false, k, n, m, ab, gb, out);
                        } else {
                            gemm(true, ta, n, k, m, gb, ab, out);
                        }
                    }
                    self.accumulate(grads, b, Tensor::new(sb.to_vec(), db).unwrap());
                }
            }
            &Op::Binary { a, b, kind } => {
                let (xa, xb) = (self.value(a), self.value(b));
                let map = Broadcast::new(xa.shape(), xb.shape()).unwrap();
                let (ad, bd, gd) = (xa.data(), xb.data(), g.data());
                if self.wants(a) {
                    let da: Vec<T> = match kind {
                        BinaryKind::Add | BinaryKind::Sub => gd.to_vec(),
                        BinaryKind::Mul => gd.iter().enumerate().map(|(i, &gi)| gi * bd[map.index(i)]).collect(),
                        BinaryKind::Div => gd.iter().enumerate().map(|(i, &gi)| gi / bd[map.index(i)]).collect(),
                    };
                    self.accumulate(grads, a, Tensor::new(xa.shape().to_vec(), da).unwrap());
                }
                if self.wants(b) {
                    let mut db = vec![T::zero(); bd.len()];
                    for (i, &gi) in gd.iter().enumerate() {
                        let j = map.index(i);
                        let d = match kind {
                            BinaryKind::Add => gi,
                            BinaryKind::Sub => -gi,
                            BinaryKind::Mul => gi * ad[i],
                            BinaryKind::Div => -gi * ad[i] / (bd[j] * bd[j]),
                        };
                        db[j] = db[j] + d;
                    }
                    self.accumulate(grads, b, Tensor::new(xb.shape().to_vec(), db).unwrap());
                }
            }
            &Op::Unary { a, kind } => {
                let x = self.value(a).data();
                let yd = y.data();
                let d: Vec<T> = g
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(i, &gi)| {
                        let local = match kind {
                            UnaryKind::Relu => {
                                if x[i] > T::zero() {
                                    T::one()
                                } else {
                                    T::zero()
                                }
                            }
                            UnaryKind::Sigmoid => yd[i] * (T::one() - yd[i]),
                            UnaryKind::Tanh => T::one() - yd[i] * yd[i],
                            UnaryKind::Exp => yd[i],
                            UnaryKind::Log => T::one() / x[i],
                            UnaryKind::Sqrt => T::one() / (T::cast(2.0) * yd[i]),
                            UnaryKind::Square => T::cast(2.0) * x[i],
                            UnaryKind::Neg => -T::one(),
                        };
                        gi * local
                    })
                    .collect();
                self.accumulate(grads, a, Tensor::new(y.shape().to_vec(), d).unwrap());
            }
            &Op::Scale { a, s } => self.accumulate(grads, a, g.map(|v| v * s)),
            &Op::AddScalar { a } => self.accumulate(grads, a, g.clone()),
            &Op::Prelu { a, slope } => {
                let x = self.value(a).data();
                let s = self.value(slope).item();
                if self.wants(a) {
                    let d = g
                        .data()
                        .iter()
                        .zip(x)
                        .map(|(&gi, &xi)| if xi > T::zero() { gi } else { gi * s })
                        .collect();
                    self.accumulate(grads, a, Tensor::new(y.shape().to_vec(), d).unwrap());
                }
                if self.wants(slope) {
                    let ds: T = g
                        .data()
                        .iter()
                        .zip(x)
                        .filter(|(_, &xi)| xi <= T::zero())
                        .map(|(&gi, &xi)| gi * xi)
                        .sum();
                    let shape = self.shape(slope).to_vec();
                    self.accumulate(grads, slope, Tensor::new(shape, vec![ds]).unwrap());
                }
            }
            &Op::Clamp { a, lo, hi } => {
                let x = self.value(a).data();
                let d = g
                    .data()
                    .iter()
                    .zip(x)
                    .map(|(&gi, &xi)| if xi >= lo && xi <= hi { gi } else { T::zero() })
                    .collect();
                self.accumulate(grads, a, Tensor::new(y.shape().to_vec(), d).unwrap());
            }
            &Op::Softmax { a } => {
                let w = *y.shape().last().unwrap_or(&1);
                let mut d = vec![T::zero(); y.numel()];
                for ((yr, gr), dr) in y.data().chunks(w).zip(g.data().chunks(w)).zip(d.chunks_mut(w)) {
                    let s: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for j in 0..w {
                        dr[j] = yr[j] * (gr[j] - s);
                    }
                }
                self.accumulate(grads, a, Tensor::new(y.shape().to_vec(), d).unwrap());
            }
            Op::LayerNorm {
                a,
                gamma,
                beta,
                mean,
                rstd,
            } => {
                let x = self.value(*a);
                let gam = self.value(*gamma).data();
                let w = gam.len();
                let mut dx = vec![T::zero(); x.numel()];
                let mut dg = vec![T::zero(); w];
                let mut db = vec![T::zero(); w];
                let inv_w = T::one() / T::cast(w as f64);
                for (r, (xr, gr)) in x.data().chunks(w).zip(g.data().chunks(w)).enumerate() {
                    let (mu, rs) = (mean[r], rstd[r]);
                    let mut m1 = T::zero();
                    let mut m2 = T::zero();
                    for j in 0..w {
                        let xh = (xr[j] - mu) * rs;
                        let gy = gr[j] * gam[j];
                        dg[j] = dg[j] + gr[j] * xh;
                        db[j] = db[j] + gr[j];
                        m1 = m1 + gy;
                        m2 = m2 + gy * xh;
                    }
                    m1 = m1 * inv_w;
                    m2 = m2 * inv_w;
                    for j in 0..w {
                        let xh = (xr[j] - mu) * rs;
                        dx[r * w + j] = rs * (gr[j] * gam[j] - m1 - xh * m2);
                    }
                }
                self.accumulate(grads, *a, Tensor::new(x.shape().to_vec(), dx).unwrap());
                let gshape = self.shape(*gamma).to_vec();
                self.accumulate(grads, *gamma, Tensor::new(gshape, dg).unwrap());
                let bshape = self.shape(*beta).to_vec();
                self.accumulate(grads, *beta, Tensor::new(bshape, db).unwrap());
            }
            &Op::Sum { a } => {
                let shape = self.shape(a).to_vec();
                self.accumulate(grads, a, Tensor::full(&shape, g.item()));
            }
            &Op::Mean { a } => {
                let x = self.value(a);
                let v = g.item() / T::cast(x.numel() as f64);
                self.accumulate(grads, a, Tensor::full(x.shape(), v));
            }
            &Op::SumLast { a } => {
                let x = self.value(a);
                let w = *x.shape().last().unwrap_or(&1);
                let d = g.data().iter().flat_map(|&gi| std::iter::repeat_n(gi, w)).collect();
                self.accumulate(grads, a, Tensor::new(x.shape().to_vec(), d).unwrap());
            }
            &Op::Reshape { a } => {
                let shape = self.shape(a).to_vec();
                self.accumulate(grads, a, g.clone().reshape(&shape).unwrap());
            }
            Op::Permute { a, perm } => {
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                self.accumulate(grads, *a, permute_tensor(g, &inv));
            }
            &Op::Slice { a, axis, start } => {
                let x = self.value(a);
                let outer: usize = x.shape()[..axis].iter().product();
                let inner: usize = x.shape()[axis + 1..].iter().product();
                let (d, len) = (x.dim(axis), y.dim(axis));
                let mut dx = vec![T::zero(); x.numel()];
                for o in 0..outer {
                    let src = &g.data()[o * len * inner..(o + 1) * len * inner];
                    let base = o * d * inner + start * inner;
                    dx[base..base + len * inner].copy_from_slice(src);
                }
                self.accumulate(grads, a, Tensor::new(x.shape().to_vec(), dx).unwrap());
            }
            Op::Concat { parts, axis } => {
                let axis = *axis;
                let outer: usize = y.shape()[..axis].iter().product();
                let inner: usize = y.shape()[axis + 1..].iter().product();
                let total = y.dim(axis);
                let mut offset = 0;
                for &p in parts {
                    let ps = self.shape(p).to_vec();
                    let len = ps[axis];
                    if self.wants(p) {
                        let mut dp = Vec::with_capacity(outer * len * inner);
                        for o in 0..outer {
                            let base = (o * total + offset) * inner;
                            dp.extend_from_slice(&g.data()[base..base + len * inner]);
                        }
                        self.accumulate(grads, p, Tensor::new(ps, dp).unwrap());
                    }
                    offset += len;
                }
            }
            &Op::Conv1d { x, w, stride } => {
                let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
                let (cin, l, cout, k) = (xs[0], xs[1], ws[0], ws[2]);
                let t_out = y.dim(1);
                let (xv, wv, gd) = (self.value(x).data(), self.value(w).data(), g.data());
                let mut dx = vec![T::zero(); xv.len()];
                let mut dw = vec![T::zero(); wv.len()];
                for o in 0..cout {
                    for c in 0..cin {
                        let wbase = (o * cin + c) * k;
                        for t in 0..t_out {
                            let gv = gd[o * t_out + t];
                            let xo = c * l + t * stride;
                            for kk in 0..k {
                                dx[xo + kk] = dx[xo + kk] + wv[wbase + kk] * gv;
                                dw[wbase + kk] = dw[wbase + kk] + xv[xo + kk] * gv;
                            }
                        }
                    }
                }
                self.accumulate(grads, x, Tensor::new(xs, dx).unwrap());
                self.accumulate(grads, w, Tensor::new(ws, dw).unwrap());
            }
            &Op::ConvTranspose1d { x, w, stride } => {
                let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
                let (cin, t, cout, k) = (xs[0], xs[1], ws[1], ws[2]);
                let l = y.dim(1);
                let (xv, wv, gd) = (self.value(x).data(), self.value(w).data(), g.data());
                let mut dx = vec![T::zero(); xv.len()];
                let mut dw = vec![T::zero(); wv.len()];
                for c in 0..cin {
                    for o in 0..cout {
                        let wbase = (c * cout + o) * k;
                        let wk = &wv[wbase..wbase + k];
                        for ti in 0..t {
                            let gs = &gd[o * l + ti * stride..o * l + ti * stride + k];
                            dx[c * t + ti] = dx[c * t + ti] + crate::tensor::dot(wk, gs);
                            crate::tensor::axpy(xv[c * t + ti], gs, &mut dw[wbase..wbase + k]);
                        }
                    }
                }
                self.accumulate(grads, x, Tensor::new(xs, dx).unwrap());
                self.accumulate(grads, w, Tensor::new(ws, dw).unwrap());
            }
            &Op::WindowStats { a, window, eps } => {
                let x = self.value(a);
                let (tn, f) = (x.dim(0), x.dim(1));
                let xd = x.data();
                let (yd, gd) = (y.data(), g.data());
                let mut dx = vec![T::zero(); x.numel()];
                for t in 0..tn {
                    let (lo, hi) = window_bounds(t, tn, window);
                    let n = T::cast((hi - lo) as f64);
                    for fi in 0..f {
                        let mu = yd[t * 2 * f + fi];
                        let sd = yd[t * 2 * f + f + fi] + eps.sqrt();
                        let gm = gd[t * 2 * f + fi] / n;
                        let gs = gd[t * 2 * f + f + fi] / (n * sd);
                        for tau in lo..hi {
                            let idx = tau * f + fi;
                            dx[idx] = dx[idx] + gm + gs * (xd[idx] - mu);
                        }
                    }
                }
                self.accumulate(grads, a, Tensor::new(x.shape().to_vec(), dx).unwrap());
            }
            &Op::Unfold { a, spec } => {
                let f = *y.shape().last().unwrap();
                let d = unfold_frames_adjoint(g.data(), f, &spec);
                self.accumulate(grads, a, Tensor::new(vec![spec.length, f], d).unwrap());
            }
            &Op::Fold { a, spec } => {
                let f = *y.shape().last().unwrap();
                let d = fold_frames_adjoint(g.data(), f, &spec);
                let shape = self.shape(a).to_vec();
                self.accumulate(grads, a, Tensor::new(shape, d).unwrap());
            }
            &Op::StraightThrough { a } => self.accumulate(grads, a, g.clone()),
        }
    }
}

pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    named: BTreeMap<String, Var>,
    params: Vec<(String, Var)>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient for `v`; `None` when no path from `v` reaches the output.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn named(&self, name: &str) -> Option<&Tensor<T>> {
        self.named.get(name).and_then(|&v| self.get(v))
    }

    /// `(name, gradient)` for every registered parameter in registration
    /// order. Parameters without a path to the output get `None`.
    pub fn params(&self) -> impl Iterator<Item = (&str, Option<&Tensor<T>>)> {
        self.params.iter().map(|(n, v)| (n.as_str(), self.get(*v)))
    }
}

// ---- helpers ------------------------------------------------------------

struct MatGeom {
    batch: usize,
    m: usize,
    n: usize,
    k: usize,
    b_shared: bool,
}

impl MatGeom {
    fn new(sa: &[usize], sb: &[usize], ta: bool, tb: bool) -> Option<Self> {
        let (batch, a2) = match sa.len() {
            2 => (1, sa),
            3 => (sa[0], &sa[1..]),
            _ => return None,
        };
        let (b_shared, b2) = match sb.len() {
            2 => (true, sb),
            3 if sb[0] == batch && sa.len() == 3 => (false, &sb[1..]),
            _ => return None,
        };
        let (m, ka) = if ta { (a2[1], a2[0]) } else { (a2[0], a2[1]) };
        let (kb, n) = if tb { (b2[1], b2[0]) } else { (b2[0], b2[1]) };
        (ka == kb).then_some(Self {
            batch,
            m,
            n,
            k: ka,
            b_shared,
        })
    }

    fn b_slice<'a, T>(&self, b: &'a [T], bi: usize) -> &'a [T] {
        if self.b_shared {
            b
        } else {
            &b[bi * self.k * self.n..(bi + 1) * self.k * self.n]
        }
    }

    fn out_shape(&self, sa: &[usize]) -> Vec<usize> {
        if sa.len() == 3 {
            vec![self.batch, self.m, self.n]
        } else {
            vec![self.m, self.n]
        }
    }
}

/// Index map for broadcasting `b` onto `a`'s shape (numpy rules, `b`
/// right-aligned, `a` never expands).
enum Broadcast {
    Same,
    Scalar,
    Suffix(usize),
    General { out_shape: Vec<usize>, strides: Vec<usize> },
}

impl Broadcast {
    fn new(sa: &[usize], sb: &[usize]) -> Option<Self> {
        if sa == sb {
            return Some(Broadcast::Same);
        }
        let nb: usize = sb.iter().product();
        if nb == 1 {
            return Some(Broadcast::Scalar);
        }
        if sb.len() > sa.len() {
            return None;
        }
        let off = sa.len() - sb.len();
        if sa[off..] == *sb {
            return Some(Broadcast::Suffix(nb));
        }
        let mut strides = vec![0; sa.len()];
        let mut acc = 1;
        for i in (0..sb.len()).rev() {
            let (da, db) = (sa[off + i], sb[i]);
            if db == da {
                strides[off + i] = acc;
            } else if db != 1 {
                return None;
            }
            acc *= db;
        }
        Some(Broadcast::General {
            out_shape: sa.to_vec(),
            strides,
        })
    }

    #[inline]
    fn index(&self, i: usize) -> usize {
        match self {
            Broadcast::Same => i,
            Broadcast::Scalar => 0,
            Broadcast::Suffix(n) => i % n,
            Broadcast::General { out_shape, strides } => {
                let mut rem = i;
                let mut j = 0;
                for ax in (0..out_shape.len()).rev() {
                    let d = out_shape[ax];
                    j += (rem % d) * strides[ax];
                    rem /= d;
                }
                j
            }
        }
    }
}

fn permute_tensor<T: Scalar>(x: &Tensor<T>, perm: &[usize]) -> Tensor<T> {
    let shape = x.shape();
    let rank = shape.len();
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let mut in_strides = vec![1; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let n = x.numel();
    let mut out = Vec::with_capacity(n);
    let mut idx = vec![0usize; rank];
    let xd = x.data();
    // innermost axis copied in a tight loop
    let inner = *out_shape.last().unwrap_or(&1);
    let inner_stride = *src_strides.last().unwrap_or(&1);
    if rank == 0 {
        return x.clone();
    }
    let outer = n / inner.max(1);
    for _ in 0..outer {
        let base: usize = idx.iter().zip(&src_strides).map(|(i, s)| i * s).sum();
        for j in 0..inner {
            out.push(xd[base + j * inner_stride]);
        }
        // advance all but the last axis
        for ax in (0..rank - 1).rev() {
            idx[ax] += 1;
            if idx[ax] < out_shape[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    Tensor::new(out_shape, out).unwrap()
}

fn softmax_row<T: Scalar>(row: &[T], out: &mut [T], keep: impl Fn(usize) -> bool) {
    let mut max = T::neg_infinity();
    for (j, &v) in row.iter().enumerate() {
        if keep(j) && v > max {
            max = v;
        }
    }
    if max == T::neg_infinity() {
        out.iter_mut().for_each(|o| *o = T::zero());
        return;
    }
    let mut s = T::zero();
    for (j, &v) in row.iter().enumerate() {
        let e = if keep(j) { (v - max).exp() } else { T::zero() };
        out[j] = e;
        s = s + e;
    }
    for o in out.iter_mut() {
        *o = *o / s;
    }
}

/// `(mean, 1/sqrt(var + eps))` of a row.
pub(crate) fn norm_stats<T: Scalar>(row: &[T], eps: T) -> (T, T) {
    let n = T::cast(row.len() as f64);
    let mean = row.iter().copied().sum::<T>() / n;
    let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
    (mean, T::one() / (var + eps).sqrt())
}

pub(crate) fn window_bounds(t: usize, len: usize, window: usize) -> (usize, usize) {
    let left = window / 2;
    let lo = t.saturating_sub(left);
    let hi = (t + window - left).min(len);
    (lo, hi)
}

pub(crate) fn window_stats<T: Scalar>(x: &Tensor<T>, window: usize, eps: T) -> Tensor<T> {
    let (tn, f) = (x.dim(0), x.dim(1));
    let xd = x.data();
    let mut out = vec![T::zero(); tn * 2 * f];
    let se = eps.sqrt();
    for t in 0..tn {
        let (lo, hi) = window_bounds(t, tn, window);
        let n = T::cast((hi - lo) as f64);
        for fi in 0..f {
            let mut s = T::zero();
            for tau in lo..hi {
                s = s + xd[tau * f + fi];
            }
            let mu = s / n;
            let mut v = T::zero();
            for tau in lo..hi {
                let d = xd[tau * f + fi] - mu;
                v = v + d * d;
            }
            out[t * 2 * f + fi] = mu;
            out[t * 2 * f + f + fi] = (v / n + eps).sqrt() - se;
        }
    }
    Tensor::new(vec![tn, 2 * f], out).unwrap()
}

/// Index of the largest entry, preferring the lowest index on ties.
pub fn argmax_lower<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = j;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    #[test]
    fn identity_matmul() {
        let mut g = Graph::<f64>::new();
        let i = g.constant(t(&[2, 2], &[1., 0., 0., 1.]));
        let a = g.constant(t(&[2, 2], &[1., 2., 3., 4.]));
        let y = g.matmul(i, a).unwrap();
        assert_eq!(g.value(y).data(), &[1., 2., 3., 4.]);
    }

    #[test]
    fn relu_and_softmax_definitions() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[3], &[-1., 0., 2.]));
        let r = g.relu(x).unwrap();
        assert_eq!(g.value(r).data(), &[0., 0., 2.]);
        let z = g.constant(t(&[2], &[0., 0.]));
        let s = g.softmax(z).unwrap();
        assert_eq!(g.value(s).data(), &[0.5, 0.5]);
    }

    #[test]
    fn square_gradient() {
        let mut g = Graph::<f64>::new();
        let x = g.input("x", Tensor::scalar(3.0));
        let y = g.mul(x, x).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.named("x").unwrap().item(), 6.0);
    }

    #[test]
    fn slice_routes_gradient() {
        let mut g = Graph::<f64>::new();
        let x = g.input("x", t(&[4], &[1., 2., 3., 4.]));
        let s = g.slice(x, 0, 0, 2).unwrap();
        let y = g.sum(s).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.named("x").unwrap().data(), &[1., 1., 0., 0.]);
    }

    #[test]
    fn conv1d_output_length() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::full(&[1, 16], 1.0));
        let w = g.constant(Tensor::full(&[1, 1, 16], 1.0));
        let y = g.conv1d(x, w, 8).unwrap();
        assert_eq!(g.shape(y), &[1, 1]);
        assert_eq!(g.value(y).item(), 16.0);
    }

    #[test]
    fn window_std_of_constant_is_zero() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::full(&[10, 2], 0.7));
        let y = g.window_mean_std(x, 4, 1e-8).unwrap();
        let v = g.value(y);
        for r in 0..10 {
            assert!((v.data()[r * 4] - 0.7).abs() < 1e-12);
            assert!(v.data()[r * 4 + 2].abs() < 1e-9);
        }
    }

    #[test]
    fn non_scalar_backward_is_contract_error() {
        let mut g = Graph::<f64>::new();
        let x = g.input("x", t(&[2], &[1., 2.]));
        let y = g.relu(x).unwrap();
        assert!(matches!(g.backward(y), Err(Error::Contract(_))));
    }

    #[test]
    fn shape_error_names_node() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        match g.matmul(a, b) {
            Err(Error::Shape { node, op, .. }) => {
                assert_eq!(node, 2);
                assert_eq!(op, "matmul");
            }
            other => panic!("expected shape error, got {:?}", other.map(|v| v.id())),
        }
    }

    #[test]
    fn nan_is_reported_with_node() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[1], &[-1.0]));
        assert!(matches!(g.log(x), Err(Error::Numeric { node: 1, op: "log" })));
    }

    #[test]
    fn full_mask_softmax_equals_softmax() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[2, 3], &[0.1, -0.4, 2.0, 1.0, 1.0, -3.0]));
        let a = g.softmax(x).unwrap();
        let b = g.masked_softmax(x, Rc::new(vec![true; 6])).unwrap();
        assert_eq!(g.value(a), g.value(b));
    }

    #[test]
    fn straight_through_breaks_ties_low() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[2, 2], &[0.5, 0.5, 0.2, 0.8]));
        let y = g.straight_through_onehot(x).unwrap();
        assert_eq!(g.value(y).data(), &[1., 0., 0., 1.]);
    }

    #[test]
    fn broadcast_general_middle_axis() {
        let mut g = Graph::<f64>::new();
        let a = g.input("a", Tensor::full(&[2, 3, 2], 1.0));
        let b = g.input("b", t(&[2, 1, 2], &[1., 2., 3., 4.]));
        let y = g.mul(a, b).unwrap();
        assert_eq!(
            g.value(y).data(),
            &[1., 2., 1., 2., 1., 2., 3., 4., 3., 4., 3., 4.]
        );
        let s = g.sum(y).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.named("b").unwrap().data(), &[3.; 4]);
    }
}
