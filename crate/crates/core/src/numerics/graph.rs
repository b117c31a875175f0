//! Tape-based reverse-mode differentiation over dense tensors.
//!
//! A [`Graph`] records every operation applied to its nodes. Leaves are either
//! borrowed parameters (which keep their gradient after [`Graph::backward`]) or
//! owned constants. Every op checks that its output is finite; a NaN or Inf is
//! reported as [`Error::NonFinite`] at the op that produced it.

use std::borrow::Cow;

use super::tensor::{gemm, Tensor};
use crate::error::{Error, Result};

/// Additive logit applied to masked attention keys.
pub const MASK_LOGIT: f64 = -1e9;

const LAYER_NORM_EPS: f64 = 1e-5;
const GELU_COEFF: f64 = 0.044_715;
const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    BatchMatMul {
        a: Var,
        b: Var,
        transpose_b: bool,
    },
    Add(Var, Var),
    AddBroadcast(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    Softplus(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        stats: Vec<(f64, f64)>,
    },
    MaskedSoftmax(Var),
    Permute {
        x: Var,
        axes: Vec<usize>,
    },
    Reshape(Var),
    GatherRows {
        table: Var,
        index: Vec<usize>,
    },
    ConcatLast(Var, Var),
    Tile(Var),
    RepeatRows {
        x: Var,
        times: usize,
    },
    SliceRows {
        x: Var,
        start: usize,
    },
    MaskedMeanRows {
        x: Var,
        weights: Vec<f64>,
    },
    Sum(Var),
    /// Scalar node whose gradient with respect to each parent was computed
    /// analytically by the caller.
    Custom {
        parents: Vec<Var>,
        grads: Vec<Tensor>,
    },
}

struct Node<'p> {
    value: Cow<'p, Tensor>,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Graph<'p> {
    nodes: Vec<Node<'p>>,
}

/// Gradients of one scalar with respect to the leaves of a graph.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for `v`, or `None` if `v` does not influence the output.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn check_finite(op: &'static str, t: &Tensor) -> Result<()> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

fn gelu_scalar(x: f64) -> f64 {
    let inner = SQRT_2_OVER_PI * (x + GELU_COEFF * x * x * x);
    0.5 * x * (1.0 + inner.tanh())
}

fn gelu_derivative(x: f64) -> f64 {
    let inner = SQRT_2_OVER_PI * (x + GELU_COEFF * x * x * x);
    let th = inner.tanh();
    0.5 * (1.0 + th)
        + 0.5 * x * (1.0 - th * th) * SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_COEFF * x * x)
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Materializes `x` with its axes reordered so that output axis `j` is input axis `axes[j]`.
fn permute_tensor(x: &Tensor, axes: &[usize]) -> Tensor {
    let in_shape = x.shape();
    let out_shape: Vec<usize> = axes.iter().map(|&a| in_shape[a]).collect();
    let in_strides = strides(in_shape);
    let src_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let total = x.len();
    let mut out = Vec::with_capacity(total);
    let mut idx = vec![0usize; out_shape.len()];
    let src = x.data();
    for _ in 0..total {
        let offset: usize = idx.iter().zip(&src_strides).map(|(i, s)| i * s).sum();
        out.push(src[offset]);
        for d in (0..idx.len()).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    Tensor::new(out_shape, out).expect("permute preserves element count")
}

fn inverse_axes(axes: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; axes.len()];
    for (j, &a) in axes.iter().enumerate() {
        inv[a] = j;
    }
    inv
}

impl<'p> Graph<'p> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
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

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool, name: &'static str) -> Result<Var> {
        check_finite(name, &value)?;
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Borrowed leaf that receives a gradient.
    pub fn param(&mut self, t: &'p Tensor) -> Var {
        self.nodes.push(Node {
            value: Cow::Borrowed(t),
            op: Op::Leaf,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Borrowed leaf that is treated as a constant.
    pub fn frozen(&mut self, t: &'p Tensor) -> Var {
        self.nodes.push(Node {
            value: Cow::Borrowed(t),
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Owned leaf; `requires_grad` decides whether it receives a gradient.
    pub fn leaf(&mut self, t: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Cow::Owned(t),
            op: Op::Leaf,
            needs_grad: requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.leaf(t, false)
    }

    /// `x · w + b` with `x: [.., k]`, `w: [k, n]`, `b: [n]`; output `[.., n]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xv = self.value(x);
        let wv = self.value(w);
        if wv.rank() != 2 || xv.last_dim() != wv.shape()[0] {
            return Err(Error::shape(
                "linear",
                format!("x {:?} · w {:?}", xv.shape(), wv.shape()),
            ));
        }
        let (rows, k, n) = (xv.rows(), wv.shape()[0], wv.shape()[1]);
        let mut out = vec![0.0; rows * n];
        if let Some(b) = b {
            let bv = self.value(b);
            if bv.len() != n {
                return Err(Error::shape("linear", format!("bias {:?} for width {n}", bv.shape())));
            }
            for r in 0..rows {
                out[r * n..(r + 1) * n].copy_from_slice(bv.data());
            }
        }
        gemm(rows, k, n, xv.data(), false, wv.data(), false, &mut out, b.is_some());
        let mut shape = xv.shape().to_vec();
        if shape.is_empty() {
            shape.push(n);
        } else {
            *shape.last_mut().unwrap() = n;
        }
        let needs = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        self.push(Tensor::new(shape, out)?, Op::Linear { x, w, b }, needs, "linear")
    }

    /// Batched product `a[i] · b[i]` (or `a[i] · b[i]ᵀ`) over the leading axis.
    pub fn bmm(&mut self, a: Var, b: Var, transpose_b: bool) -> Result<Var> {
        let av = self.value(a);
        let bv = self.value(b);
        if av.rank() != 3 || bv.rank() != 3 || av.shape()[0] != bv.shape()[0] {
            return Err(Error::shape("bmm", format!("{:?} x {:?}", av.shape(), bv.shape())));
        }
        let (batch, m, k) = (av.shape()[0], av.shape()[1], av.shape()[2]);
        let (bk, n) = if transpose_b {
            (bv.shape()[2], bv.shape()[1])
        } else {
            (bv.shape()[1], bv.shape()[2])
        };
        if bk != k {
            return Err(Error::shape("bmm", format!("{:?} x {:?}", av.shape(), bv.shape())));
        }
        let mut out = vec![0.0; batch * m * n];
        for i in 0..batch {
            gemm(
                m,
                k,
                n,
                &av.data()[i * m * k..(i + 1) * m * k],
                false,
                &bv.data()[i * k * n..(i + 1) * k * n],
                transpose_b,
                &mut out[i * m * n..(i + 1) * m * n],
                false,
            );
        }
        let needs = self.needs(a) || self.needs(b);
        self.push(
            Tensor::new(vec![batch, m, n], out)?,
            Op::BatchMatMul { a, b, transpose_b },
            needs,
            "bmm",
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let av = self.value(a);
        let bv = self.value(b);
        if av.shape() != bv.shape() {
            return Err(Error::shape("add", format!("{:?} + {:?}", av.shape(), bv.shape())));
        }
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x + y).collect();
        let out = Tensor::new(av.shape().to_vec(), data)?;
        let needs = self.needs(a) || self.needs(b);
        self.push(out, Op::Add(a, b), needs, "add")
    }

    /// `a + b` where `b`'s shape equals the trailing axes of `a`.
    pub fn add_broadcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let av = self.value(a);
        let bv = self.value(b);
        let (ar, br) = (av.rank(), bv.rank());
        if br > ar || av.shape()[ar - br..] != *bv.shape() {
            return Err(Error::shape(
                "add_broadcast",
                format!("{:?} + {:?}", av.shape(), bv.shape()),
            ));
        }
        let chunk = bv.len();
        let mut data = av.data().to_vec();
        if chunk > 0 {
            for block in data.chunks_mut(chunk) {
                for (x, y) in block.iter_mut().zip(bv.data()) {
                    *x += y;
                }
            }
        }
        let out = Tensor::new(av.shape().to_vec(), data)?;
        let needs = self.needs(a) || self.needs(b);
        self.push(out, Op::AddBroadcast(a, b), needs, "add_broadcast")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let av = self.value(a);
        let bv = self.value(b);
        if av.shape() != bv.shape() {
            return Err(Error::shape("mul", format!("{:?} * {:?}", av.shape(), bv.shape())));
        }
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::new(av.shape().to_vec(), data)?;
        let needs = self.needs(a) || self.needs(b);
        self.push(out, Op::Mul(a, b), needs, "mul")
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let av = self.value(a);
        let data = av.data().iter().map(|x| x * c).collect();
        let out = Tensor::new(av.shape().to_vec(), data)?;
        let needs = self.needs(a);
        self.push(out, Op::Scale(a, c), needs, "scale")
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let data = xv.data().iter().map(|&v| gelu_scalar(v)).collect();
        let out = Tensor::new(xv.shape().to_vec(), data)?;
        let needs = self.needs(x);
        self.push(out, Op::Gelu(x), needs, "gelu")
    }

    pub fn softplus(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let data = xv.data().iter().map(|&v| super::softplus(v)).collect();
        let out = Tensor::new(xv.shape().to_vec(), data)?;
        let needs = self.needs(x);
        self.push(out, Op::Softplus(x), needs, "softplus")
    }

    /// Layer normalization over the trailing axis with learned gain and offset.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let xv = self.value(x);
        let d = xv.last_dim();
        if self.value(gain).len() != d || self.value(bias).len() != d {
            return Err(Error::shape("layer_norm", format!("input {:?}", xv.shape())));
        }
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let rows = xv.rows();
        let mut out = vec![0.0; xv.len()];
        let mut stats = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rstd = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for j in 0..d {
                out[r * d + j] = (row[j] - mean) * rstd * g[j] + b[j];
            }
            stats.push((mean, rstd));
        }
        let out = Tensor::new(xv.shape().to_vec(), out)?;
        let needs = self.needs(x) || self.needs(gain) || self.needs(bias);
        self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                stats,
            },
            needs,
            "layer_norm",
        )
    }

    /// Softmax over the trailing axis. `key_mask[j] == false` adds
    /// [`MASK_LOGIT`] to column `j` of every row before normalizing.
    pub fn masked_softmax(&mut self, x: Var, key_mask: Option<&[bool]>) -> Result<Var> {
        let xv = self.value(x);
        let k = xv.last_dim();
        if let Some(mask) = key_mask {
            if mask.len() != k {
                return Err(Error::shape(
                    "masked_softmax",
                    format!("mask of {} for {k} keys", mask.len()),
                ));
            }
            if !mask.iter().any(|&m| m) {
                return Err(Error::AllMasked { row: 0 });
            }
        }
        let mut out = xv.data().to_vec();
        for row in out.chunks_mut(k.max(1)) {
            if let Some(mask) = key_mask {
                for (v, &keep) in row.iter_mut().zip(mask) {
                    if !keep {
                        *v += MASK_LOGIT;
                    }
                }
            }
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            for v in row.iter_mut() {
                *v /= total;
            }
        }
        let out = Tensor::new(xv.shape().to_vec(), out)?;
        let needs = self.needs(x);
        self.push(out, Op::MaskedSoftmax(x), needs, "masked_softmax")
    }

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        let mut seen = vec![false; xv.rank()];
        if axes.len() != xv.rank() || axes.iter().any(|&a| a >= seen.len() || std::mem::replace(&mut seen[a], true)) {
            return Err(Error::shape("permute", format!("axes {axes:?} for {:?}", xv.shape())));
        }
        let out = permute_tensor(xv, axes);
        let needs = self.needs(x);
        self.push(
            out,
            Op::Permute {
                x,
                axes: axes.to_vec(),
            },
            needs,
            "permute",
        )
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape.to_vec())?;
        let needs = self.needs(x);
        self.push(out, Op::Reshape(x), needs, "reshape")
    }

    /// Rows `index[i]` of `table: [V, d]`, giving `[index.len(), d]`.
    pub fn gather_rows(&mut self, table: Var, index: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        if tv.rank() != 2 {
            return Err(Error::shape("gather_rows", format!("table {:?}", tv.shape())));
        }
        let (v, d) = (tv.shape()[0], tv.shape()[1]);
        let mut out = Vec::with_capacity(index.len() * d);
        for &i in index {
            if i >= v {
                return Err(Error::shape("gather_rows", format!("index {i} >= {v}")));
            }
            out.extend_from_slice(tv.row(i));
        }
        let out = Tensor::new(vec![index.len(), d], out)?;
        let needs = self.needs(table);
        self.push(
            out,
            Op::GatherRows {
                table,
                index: index.to_vec(),
            },
            needs,
            "gather_rows",
        )
    }

    /// Concatenates `[r, d1]` and `[r, d2]` along the trailing axis.
    pub fn concat_last(&mut self, a: Var, b: Var) -> Result<Var> {
        let av = self.value(a);
        let bv = self.value(b);
        if av.rank() != 2 || bv.rank() != 2 || av.shape()[0] != bv.shape()[0] {
            return Err(Error::shape("concat_last", format!("{:?} ++ {:?}", av.shape(), bv.shape())));
        }
        let (r, d1, d2) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
        let mut out = Vec::with_capacity(r * (d1 + d2));
        for i in 0..r {
            out.extend_from_slice(av.row(i));
            out.extend_from_slice(bv.row(i));
        }
        let out = Tensor::new(vec![r, d1 + d2], out)?;
        let needs = self.needs(a) || self.needs(b);
        self.push(out, Op::ConcatLast(a, b), needs, "concat_last")
    }

    /// Stacks `reps` copies of `x` along a new leading axis.
    pub fn tile(&mut self, x: Var, reps: usize) -> Result<Var> {
        let xv = self.value(x);
        let mut shape = vec![reps];
        shape.extend_from_slice(xv.shape());
        let out = Tensor::new(shape, xv.data().repeat(reps))?;
        let needs = self.needs(x);
        self.push(out, Op::Tile(x), needs, "tile")
    }

    /// Repeats each row of `[r, d]` `times` times in place, giving `[r * times, d]`.
    pub fn repeat_rows(&mut self, x: Var, times: usize) -> Result<Var> {
        let xv = self.value(x);
        if xv.rank() != 2 {
            return Err(Error::shape("repeat_rows", format!("{:?}", xv.shape())));
        }
        let (r, d) = (xv.shape()[0], xv.shape()[1]);
        let mut out = Vec::with_capacity(r * times * d);
        for i in 0..r {
            for _ in 0..times {
                out.extend_from_slice(xv.row(i));
            }
        }
        let out = Tensor::new(vec![r * times, d], out)?;
        let needs = self.needs(x);
        self.push(out, Op::RepeatRows { x, times }, needs, "repeat_rows")
    }

    /// Rows `start..start + len` of a `[r, d]` tensor.
    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        if xv.rank() != 2 || start + len > xv.shape()[0] {
            return Err(Error::shape(
                "slice_rows",
                format!("rows {start}..{} of {:?}", start + len, xv.shape()),
            ));
        }
        let d = xv.shape()[1];
        let out = Tensor::new(vec![len, d], xv.data()[start * d..(start + len) * d].to_vec())?;
        let needs = self.needs(x);
        self.push(out, Op::SliceRows { x, start }, needs, "slice_rows")
    }

    /// Mean over the valid entries of the middle axis of `[g, n, d]`, giving `[g, d]`.
    pub fn masked_mean_rows(&mut self, x: Var, mask: &[bool]) -> Result<Var> {
        let xv = self.value(x);
        if xv.rank() != 3 || xv.shape()[1] != mask.len() {
            return Err(Error::shape(
                "masked_mean_rows",
                format!("{:?} with mask of {}", xv.shape(), mask.len()),
            ));
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(Error::AllMasked { row: 0 });
        }
        let (g, n, d) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        let weights: Vec<f64> = mask
            .iter()
            .map(|&m| if m { 1.0 / count as f64 } else { 0.0 })
            .collect();
        let mut out = vec![0.0; g * d];
        let src = xv.data();
        for t in 0..g {
            let dst = &mut out[t * d..(t + 1) * d];
            for (i, &w) in weights.iter().enumerate() {
                if w == 0.0 {
                    continue;
                }
                let row = &src[(t * n + i) * d..(t * n + i + 1) * d];
                for (o, v) in dst.iter_mut().zip(row) {
                    *o += w * v;
                }
            }
        }
        let out = Tensor::new(vec![g, d], out)?;
        let needs = self.needs(x);
        self.push(out, Op::MaskedMeanRows { x, weights }, needs, "masked_mean_rows")
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).sum();
        let needs = self.needs(x);
        self.push(Tensor::scalar(s), Op::Sum(x), needs, "sum")
    }

    /// Scalar node with caller-supplied partial derivatives `d value / d parents[i]`.
    pub fn custom(&mut self, value: f64, parents: &[Var], grads: Vec<Tensor>) -> Result<Var> {
        if parents.len() != grads.len() {
            return Err(Error::shape("custom", "one gradient per parent"));
        }
        for (p, gr) in parents.iter().zip(&grads) {
            if self.value(*p).shape() != gr.shape() {
                return Err(Error::shape(
                    "custom",
                    format!("gradient {:?} for value {:?}", gr.shape(), self.value(*p).shape()),
                ));
            }
            check_finite("custom gradient", gr)?;
        }
        let needs = parents.iter().any(|&p| self.needs(p));
        self.push(
            Tensor::scalar(value),
            Op::Custom {
                parents: parents.to_vec(),
                grads,
            },
            needs,
            "custom",
        )
    }

    /// Reverse sweep from a single-element output.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        let out = self.value(output);
        if out.len() != 1 {
            return Err(Error::shape("backward", format!("output {:?} is not scalar", out.shape())));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(Tensor::full(out.shape(), 1.0));

        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(upstream) = grads[idx].take() else {
                continue;
            };
            self.propagate(node, &upstream, &mut grads)?;
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.needs(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, node: &Node<'p>, up: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Linear { x, w, b } => {
                let xv = self.value(*x);
                let wv = self.value(*w);
                let (rows, k, n) = (xv.rows(), wv.shape()[0], wv.shape()[1]);
                if self.needs(*x) {
                    let mut dx = vec![0.0; rows * k];
                    gemm(rows, n, k, up.data(), false, wv.data(), true, &mut dx, false);
                    self.accumulate(grads, *x, Tensor::new(xv.shape().to_vec(), dx)?);
                }
                if self.needs(*w) {
                    let mut dw = vec![0.0; k * n];
                    gemm(k, rows, n, xv.data(), true, up.data(), false, &mut dw, false);
                    self.accumulate(grads, *w, Tensor::new(vec![k, n], dw)?);
                }
                if let Some(b) = b {
                    if self.needs(*b) {
                        let mut db = vec![0.0; n];
                        for r in 0..rows {
                            for (d, u) in db.iter_mut().zip(up.row(r)) {
                                *d += u;
                            }
                        }
                        let shape = self.value(*b).shape().to_vec();
                        self.accumulate(grads, *b, Tensor::new(shape, db)?);
                    }
                }
            }
            Op::BatchMatMul { a, b, transpose_b } => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let (batch, m, k) = (av.shape()[0], av.shape()[1], av.shape()[2]);
                let n = y.shape()[2];
                if self.needs(*a) {
                    let mut da = vec![0.0; batch * m * k];
                    for i in 0..batch {
                        // da = up · op(b)ᵀ
                        gemm(
                            m,
                            n,
                            k,
                            &up.data()[i * m * n..(i + 1) * m * n],
                            false,
                            &bv.data()[i * k * n..(i + 1) * k * n],
                            !transpose_b,
                            &mut da[i * m * k..(i + 1) * m * k],
                            false,
                        );
                    }
                    self.accumulate(grads, *a, Tensor::new(av.shape().to_vec(), da)?);
                }
                if self.needs(*b) {
                    let mut db = vec![0.0; batch * k * n];
                    for i in 0..batch {
                        let a_i = &av.data()[i * m * k..(i + 1) * m * k];
                        let u_i = &up.data()[i * m * n..(i + 1) * m * n];
                        let d_i = &mut db[i * k * n..(i + 1) * k * n];
                        if *transpose_b {
                            // b stored [n, k]: db = upᵀ · a
                            gemm(n, m, k, u_i, true, a_i, false, d_i, false);
                        } else {
                            gemm(k, m, n, a_i, true, u_i, false, d_i, false);
                        }
                    }
                    self.accumulate(grads, *b, Tensor::new(bv.shape().to_vec(), db)?);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, up.clone());
                self.accumulate(grads, *b, up.clone());
            }
            Op::AddBroadcast(a, b) => {
                self.accumulate(grads, *a, up.clone());
                if self.needs(*b) {
                    let bv = self.value(*b);
                    let mut db = vec![0.0; bv.len()];
                    for block in up.data().chunks(bv.len().max(1)) {
                        for (d, u) in db.iter_mut().zip(block) {
                            *d += u;
                        }
                    }
                    self.accumulate(grads, *b, Tensor::new(bv.shape().to_vec(), db)?);
                }
            }
            Op::Mul(a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                if self.needs(*a) {
                    let d = up.data().iter().zip(bv.data()).map(|(u, y)| u * y).collect();
                    self.accumulate(grads, *a, Tensor::new(av.shape().to_vec(), d)?);
                }
                if self.needs(*b) {
                    let d = up.data().iter().zip(av.data()).map(|(u, x)| u * x).collect();
                    self.accumulate(grads, *b, Tensor::new(bv.shape().to_vec(), d)?);
                }
            }
            Op::Scale(a, c) => {
                let d = up.data().iter().map(|u| u * c).collect();
                self.accumulate(grads, *a, Tensor::new(up.shape().to_vec(), d)?);
            }
            Op::Gelu(x) => {
                let xv = self.value(*x);
                let d = up
                    .data()
                    .iter()
                    .zip(xv.data())
                    .map(|(u, &v)| u * gelu_derivative(v))
                    .collect();
                self.accumulate(grads, *x, Tensor::new(xv.shape().to_vec(), d)?);
            }
            Op::Softplus(x) => {
                let xv = self.value(*x);
                let d = up
                    .data()
                    .iter()
                    .zip(xv.data())
                    .map(|(u, &v)| u * super::sigmoid(v))
                    .collect();
                self.accumulate(grads, *x, Tensor::new(xv.shape().to_vec(), d)?);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                stats,
            } => {
                let xv = self.value(*x);
                let g = self.value(*gain).data();
                let d = xv.last_dim();
                let mut dx = vec![0.0; xv.len()];
                let mut dg = vec![0.0; d];
                let mut db = vec![0.0; d];
                let mut xhat = vec![0.0; d];
                let mut dxhat = vec![0.0; d];
                for (r, &(mean, rstd)) in stats.iter().enumerate() {
                    let row = xv.row(r);
                    let u = up.row(r);
                    for j in 0..d {
                        xhat[j] = (row[j] - mean) * rstd;
                        dxhat[j] = u[j] * g[j];
                        dg[j] += u[j] * xhat[j];
                        db[j] += u[j];
                    }
                    let mean_dxhat = dxhat.iter().sum::<f64>() / d as f64;
                    let mean_dxhat_xhat =
                        dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                    for j in 0..d {
                        dx[r * d + j] = rstd * (dxhat[j] - mean_dxhat - xhat[j] * mean_dxhat_xhat);
                    }
                }
                self.accumulate(grads, *x, Tensor::new(xv.shape().to_vec(), dx)?);
                let gshape = self.value(*gain).shape().to_vec();
                self.accumulate(grads, *gain, Tensor::new(gshape, dg)?);
                let bshape = self.value(*bias).shape().to_vec();
                self.accumulate(grads, *bias, Tensor::new(bshape, db)?);
            }
            Op::MaskedSoftmax(x) => {
                let k = y.last_dim().max(1);
                let mut dx = vec![0.0; y.len()];
                for ((yr, ur), dr) in y
                    .data()
                    .chunks(k)
                    .zip(up.data().chunks(k))
                    .zip(dx.chunks_mut(k))
                {
                    let dot: f64 = yr.iter().zip(ur).map(|(a, b)| a * b).sum();
                    for j in 0..k {
                        dr[j] = yr[j] * (ur[j] - dot);
                    }
                }
                self.accumulate(grads, *x, Tensor::new(y.shape().to_vec(), dx)?);
            }
            Op::Permute { x, axes } => {
                let back = permute_tensor(up, &inverse_axes(axes));
                self.accumulate(grads, *x, back);
            }
            Op::Reshape(x) => {
                let shape = self.value(*x).shape().to_vec();
                self.accumulate(grads, *x, up.clone().reshape(shape)?);
            }
            Op::GatherRows { table, index } => {
                if self.needs(*table) {
                    let tv = self.value(*table);
                    let d = tv.shape()[1];
                    let mut dt = vec![0.0; tv.len()];
                    for (r, &i) in index.iter().enumerate() {
                        for j in 0..d {
                            dt[i * d + j] += up.data()[r * d + j];
                        }
                    }
                    self.accumulate(grads, *table, Tensor::new(tv.shape().to_vec(), dt)?);
                }
            }
            Op::ConcatLast(a, b) => {
                let d1 = self.value(*a).shape()[1];
                let d2 = self.value(*b).shape()[1];
                let r = y.shape()[0];
                let mut da = Vec::with_capacity(r * d1);
                let mut db = Vec::with_capacity(r * d2);
                for i in 0..r {
                    let row = up.row(i);
                    da.extend_from_slice(&row[..d1]);
                    db.extend_from_slice(&row[d1..]);
                }
                self.accumulate(grads, *a, Tensor::new(vec![r, d1], da)?);
                self.accumulate(grads, *b, Tensor::new(vec![r, d2], db)?);
            }
            Op::Tile(x) => {
                let xv = self.value(*x);
                let mut dx = vec![0.0; xv.len()];
                for block in up.data().chunks(xv.len().max(1)) {
                    for (d, u) in dx.iter_mut().zip(block) {
                        *d += u;
                    }
                }
                self.accumulate(grads, *x, Tensor::new(xv.shape().to_vec(), dx)?);
            }
            Op::RepeatRows { x, times } => {
                let xv = self.value(*x);
                let (r, d) = (xv.shape()[0], xv.shape()[1]);
                let mut dx = vec![0.0; r * d];
                for i in 0..r {
                    for rep in 0..*times {
                        let src = up.row(i * times + rep);
                        for (o, u) in dx[i * d..(i + 1) * d].iter_mut().zip(src) {
                            *o += u;
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::new(vec![r, d], dx)?);
            }
            Op::SliceRows { x, start } => {
                let xv = self.value(*x);
                let d = xv.shape()[1];
                let mut dx = vec![0.0; xv.len()];
                dx[start * d..start * d + up.len()].copy_from_slice(up.data());
                self.accumulate(grads, *x, Tensor::new(xv.shape().to_vec(), dx)?);
            }
            Op::MaskedMeanRows { x, weights } => {
                let xv = self.value(*x);
                let (g, n, d) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
                let mut dx = vec![0.0; xv.len()];
                for t in 0..g {
                    let u = &up.data()[t * d..(t + 1) * d];
                    for (i, &w) in weights.iter().enumerate().take(n) {
                        if w == 0.0 {
                            continue;
                        }
                        for (o, uv) in dx[(t * n + i) * d..(t * n + i + 1) * d].iter_mut().zip(u) {
                            *o = w * uv;
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::new(xv.shape().to_vec(), dx)?);
            }
            Op::Sum(x) => {
                let shape = self.value(*x).shape().to_vec();
                self.accumulate(grads, *x, Tensor::full(&shape, up.item()));
            }
            Op::Custom { parents, grads: g } => {
                let u = up.item();
                for (p, gr) in parents.iter().zip(g) {
                    let mut t = gr.clone();
                    t.scale_in_place(u);
                    self.accumulate(grads, *p, t);
                }
            }
        }
        Ok(())
    }
}
