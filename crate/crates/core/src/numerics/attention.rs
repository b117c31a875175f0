use serde::{Deserialize, Serialize};

use super::graph::{Graph, Var};
use crate::error::{Error, Result};

/// Weight and bias of an affine map. `T` is a parameter index when describing
/// a layout and a [`Var`] once the parameters sit on a graph.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dense<T> {
    pub w: T,
    pub b: T,
}

impl<T: Copy> Dense<T> {
    pub fn map<U>(&self, f: impl Fn(T) -> U) -> Dense<U> {
        Dense {
            w: f(self.w),
            b: f(self.b),
        }
    }
}

impl Dense<Var> {
    pub fn apply(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        g.linear(x, self.w, Some(self.b))
    }
}

/// Query, key, value and output projections of one attention sublayer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttentionWeights<T> {
    pub query: Dense<T>,
    pub key: Dense<T>,
    pub value: Dense<T>,
    pub output: Dense<T>,
}

impl<T: Copy> AttentionWeights<T> {
    pub fn map<U>(&self, f: impl Fn(T) -> U + Copy) -> AttentionWeights<U> {
        AttentionWeights {
            query: self.query.map(f),
            key: self.key.map(f),
            value: self.value.map(f),
            output: self.output.map(f),
        }
    }
}

/// Where keys and values come from.
#[derive(Clone, Copy, Debug)]
pub enum KeySource {
    /// `[groups, n_keys, d]`, one key set per query group (self-attention).
    PerGroup(Var),
    /// `[n_keys, d]`, one key set shared by every query group (cross-attention).
    Shared(Var),
}

/// `softmax(q kᵀ / √d_k + bias) v` for `q: [b, nq, dk]`, `k, v: [b, nk, dk]`.
///
/// `bias`, when present, has shape `[h, nq, nk]` and is added to every block
/// of `h` consecutive batch entries, i.e. the batch axis is read as `[groups, h]`.
pub fn scaled_dot_product_attention(
    g: &mut Graph<'_>,
    q: Var,
    k: Var,
    v: Var,
    bias: Option<Var>,
    key_mask: Option<&[bool]>,
) -> Result<Var> {
    let qs = g.value(q).shape().to_vec();
    let ks = g.value(k).shape().to_vec();
    if qs.len() != 3 || ks.len() != 3 || qs[2] != ks[2] {
        return Err(Error::shape("attention", format!("q {qs:?} k {ks:?}")));
    }
    let (batch, nq, dk) = (qs[0], qs[1], qs[2]);
    let nk = ks[1];
    let scores = g.bmm(q, k, true)?;
    let mut scores = g.scale(scores, 1.0 / (dk as f64).sqrt())?;
    if let Some(bias) = bias {
        let bs = g.value(bias).shape().to_vec();
        if bs.len() != 3 || bs[1] != nq || bs[2] != nk || batch % bs[0] != 0 {
            return Err(Error::shape("attention", format!("bias {bs:?} for scores [{batch}, {nq}, {nk}]")));
        }
        let grouped = g.reshape(scores, &[batch / bs[0], bs[0], nq, nk])?;
        let biased = g.add_broadcast(grouped, bias)?;
        scores = g.reshape(biased, &[batch, nq, nk])?;
    }
    let weights = g.masked_softmax(scores, key_mask)?;
    g.bmm(weights, v, false)
}

/// `[groups * n, d]` rows -> `[groups * heads, n, d / heads]`.
fn split_heads(g: &mut Graph<'_>, x: Var, groups: usize, n: usize, heads: usize) -> Result<Var> {
    let d = g.value(x).last_dim();
    let x = g.reshape(x, &[groups, n, heads, d / heads])?;
    let x = g.permute(x, &[0, 2, 1, 3])?;
    g.reshape(x, &[groups * heads, n, d / heads])
}

/// Multi-head attention for `queries: [groups, nq, d]`.
///
/// `head_bias` is an optional `[heads, nq, nk]` additive bias shared by all
/// groups; `key_mask` marks which keys may be attended to. The result has the
/// shape of `queries`.
pub fn multi_head_attention(
    g: &mut Graph<'_>,
    queries: Var,
    keys: KeySource,
    weights: &AttentionWeights<Var>,
    heads: usize,
    head_bias: Option<Var>,
    key_mask: Option<&[bool]>,
) -> Result<Var> {
    let qs = g.value(queries).shape().to_vec();
    if qs.len() != 3 {
        return Err(Error::shape("multi_head_attention", format!("queries {qs:?}")));
    }
    let (groups, nq, d) = (qs[0], qs[1], qs[2]);
    if heads == 0 || d % heads != 0 {
        return Err(Error::shape(
            "multi_head_attention",
            format!("width {d} is not divisible by {heads} heads"),
        ));
    }
    let q = weights.query.apply(g, queries)?;
    let q = split_heads(g, q, groups, nq, heads)?;
    let (k, v) = match keys {
        KeySource::PerGroup(src) => {
            let ss = g.value(src).shape().to_vec();
            if ss.len() != 3 || ss[0] != groups || ss[2] != d {
                return Err(Error::shape("multi_head_attention", format!("keys {ss:?} for queries {qs:?}")));
            }
            let k = weights.key.apply(g, src)?;
            let v = weights.value.apply(g, src)?;
            (
                split_heads(g, k, groups, ss[1], heads)?,
                split_heads(g, v, groups, ss[1], heads)?,
            )
        }
        KeySource::Shared(src) => {
            let ss = g.value(src).shape().to_vec();
            if ss.len() != 2 || ss[1] != d {
                return Err(Error::shape("multi_head_attention", format!("shared keys {ss:?}")));
            }
            let nk = ss[0];
            let mut out = Vec::with_capacity(2);
            for proj in [&weights.key, &weights.value] {
                let x = proj.apply(g, src)?;
                let x = split_heads(g, x, 1, nk, heads)?;
                let x = g.tile(x, groups)?;
                out.push(g.reshape(x, &[groups * heads, nk, d / heads])?);
            }
            (out[0], out[1])
        }
    };
    let attended = scaled_dot_product_attention(g, q, k, v, head_bias, key_mask)?;
    let merged = g.reshape(attended, &[groups, heads, nq, d / heads])?;
    let merged = g.permute(merged, &[0, 2, 1, 3])?;
    let merged = g.reshape(merged, &[groups, nq, d])?;
    weights.output.apply(g, merged)
}
