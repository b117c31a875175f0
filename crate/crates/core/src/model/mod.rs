//! The trajectory network: formation encoder, relative spatial attention over
//! replicated formation inputs, temporal attention across frames, and a
//! mixture head whose weights are shared by every player.

mod params;

use serde::{Deserialize, Serialize};

use crate::dataio::Role;
use crate::error::{Error, Result};
use crate::numerics::{multi_head_attention, sinusoidal_embedding, softplus, Dense, Graph, KeySource, Tensor, Var};

pub use params::{
    count_params, EncoderBlock, FeedForward, Layout, MixtureHead, ModelParams, Norm, SpatialLayer, TemporalBlock,
    CHECKPOINT_FORMAT, FFN_EXPANSION,
};

/// What the means of the mixture describe.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PredictionTarget {
    /// Offset of each frame from the player's formation spot.
    #[default]
    AbsoluteDisplacement,
    /// Step from the previous frame; positions are the cumulative sum.
    FrameDelta,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub mixture_components: usize,
    pub relational_dim: usize,
    pub role_embed_dim: usize,
    /// Longest clip the model accepts, formation frame included.
    pub max_frames: usize,
    pub prediction_target: PredictionTarget,
    /// Added to both Cholesky diagonal entries after the softplus.
    pub covariance_floor: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden_dim: 128,
            num_layers: 4,
            num_heads: 4,
            mixture_components: 8,
            relational_dim: 16,
            role_embed_dim: 32,
            max_frames: 50,
            prediction_target: PredictionTarget::AbsoluteDisplacement,
            covariance_floor: 0.01,
        }
    }
}

impl ModelConfig {
    /// Smallest useful network: D=8, one layer, two heads, two components,
    /// four frames.
    pub fn tiny() -> Self {
        Self {
            hidden_dim: 8,
            num_layers: 1,
            num_heads: 2,
            mixture_components: 2,
            relational_dim: 4,
            role_embed_dim: 4,
            max_frames: 4,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.hidden_dim == 0 || self.num_heads == 0 || self.hidden_dim % self.num_heads != 0 {
            return fail(format!(
                "hidden_dim {} must be a positive multiple of num_heads {}",
                self.hidden_dim, self.num_heads
            ));
        }
        if self.hidden_dim % 2 != 0 {
            return fail(format!("hidden_dim {} must be even", self.hidden_dim));
        }
        if self.mixture_components == 0 {
            return fail("mixture_components must be at least 1".into());
        }
        if self.relational_dim == 0 || self.role_embed_dim == 0 {
            return fail("relational_dim and role_embed_dim must be positive".into());
        }
        if self.max_frames < 2 {
            return fail(format!("max_frames {} < 2", self.max_frames));
        }
        if !(self.covariance_floor > 0.0 && self.covariance_floor.is_finite()) {
            return fail(format!("covariance_floor {} must be positive", self.covariance_floor));
        }
        Ok(())
    }
}

/// Lower-triangular factor of a 2×2 covariance.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Cholesky2 {
    pub l11: f64,
    pub l21: f64,
    pub l22: f64,
}

impl Cholesky2 {
    pub fn lower(&self) -> [[f64; 2]; 2] {
        [[self.l11, 0.0], [self.l21, self.l22]]
    }

    /// `L Lᵀ`.
    pub fn covariance(&self) -> [[f64; 2]; 2] {
        let off = self.l11 * self.l21;
        [[self.l11 * self.l11, off], [off, self.l21 * self.l21 + self.l22 * self.l22]]
    }

    /// `L ε`.
    pub fn apply(&self, eps: [f64; 2]) -> [f64; 2] {
        [self.l11 * eps[0], self.l21 * eps[0] + self.l22 * eps[1]]
    }

    /// `L⁻¹ r` by forward substitution.
    pub fn solve(&self, r: [f64; 2]) -> [f64; 2] {
        let z1 = r[0] / self.l11;
        [z1, (r[1] - self.l21 * z1) / self.l22]
    }
}

/// `L = [[softplus(l11) + ε, 0], [l21, softplus(l22) + ε]]` from raw `(l11, l21, l22)`.
pub fn realize_covariance(raw: [f64; 3], floor: f64) -> Cholesky2 {
    Cholesky2 {
        l11: softplus(raw[0]) + floor,
        l21: raw[1],
        l22: softplus(raw[2]) + floor,
    }
}

/// Per-frame mixture over every player's displacement, for frames `1..T`.
#[derive(Clone, Debug, PartialEq)]
pub struct MoGParams {
    /// `[T-1, M]`, rows on the simplex.
    pub pi: Tensor,
    /// `[T-1, N, M, 2]`.
    pub mu: Tensor,
    /// `[T-1, N, M, 3]` raw `(l11, l21, l22)`.
    pub chol_raw: Tensor,
}

impl MoGParams {
    pub fn new(pi: Tensor, mu: Tensor, chol_raw: Tensor) -> Result<Self> {
        let p = pi.shape();
        let m = mu.shape();
        let c = chol_raw.shape();
        let ok = p.len() == 2
            && m.len() == 4
            && c.len() == 4
            && m[0] == p[0]
            && m[2] == p[1]
            && m[3] == 2
            && c[..3] == m[..3]
            && c[3] == 3;
        if !ok {
            return Err(Error::shape("MoGParams", format!("pi {p:?} mu {m:?} chol {c:?}")));
        }
        Ok(Self { pi, mu, chol_raw })
    }

    pub fn frames(&self) -> usize {
        self.pi.shape()[0]
    }

    pub fn agents(&self) -> usize {
        self.mu.shape()[1]
    }

    pub fn components(&self) -> usize {
        self.pi.shape()[1]
    }

    pub fn pi_row(&self, t: usize) -> &[f64] {
        self.pi.row(t)
    }

    pub fn mu(&self, t: usize, i: usize, k: usize) -> [f64; 2] {
        let o = ((t * self.agents() + i) * self.components() + k) * 2;
        let d = self.mu.data();
        [d[o], d[o + 1]]
    }

    pub fn chol_raw(&self, t: usize, i: usize, k: usize) -> [f64; 3] {
        let o = ((t * self.agents() + i) * self.components() + k) * 3;
        let d = self.chol_raw.data();
        [d[o], d[o + 1], d[o + 2]]
    }

    pub fn cholesky(&self, t: usize, i: usize, k: usize, floor: f64) -> Cholesky2 {
        realize_covariance(self.chol_raw(t, i, k), floor)
    }
}

/// Graph nodes holding the mixture parameters.
#[derive(Clone, Copy, Debug)]
pub struct MoGVars {
    pub pi: Var,
    pub mu: Var,
    pub chol_raw: Var,
}

impl MoGVars {
    pub fn values(&self, g: &Graph<'_>) -> MoGParams {
        MoGParams {
            pi: g.value(self.pi).clone(),
            mu: g.value(self.mu).clone(),
            chol_raw: g.value(self.chol_raw).clone(),
        }
    }
}

/// The conditioning input: starting spots (normalized), roles, and which
/// players are present.
#[derive(Clone, Copy, Debug)]
pub struct Formation<'a> {
    pub positions: &'a [[f64; 2]],
    pub roles: &'a [Role],
    pub agent_mask: &'a [bool],
}

impl<'a> Formation<'a> {
    pub fn new(positions: &'a [[f64; 2]], roles: &'a [Role], agent_mask: &'a [bool]) -> Self {
        Self {
            positions,
            roles,
            agent_mask,
        }
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    fn validate(&self) -> Result<()> {
        let n = self.positions.len();
        if n == 0 {
            return Err(Error::Empty("formation"));
        }
        if self.roles.len() != n || self.agent_mask.len() != n {
            return Err(Error::shape(
                "formation",
                format!("{n} positions, {} roles, {} mask entries", self.roles.len(), self.agent_mask.len()),
            ));
        }
        if !self.agent_mask.iter().any(|&m| m) {
            return Err(Error::AllMasked { row: 0 });
        }
        if self.positions.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "formation" });
        }
        Ok(())
    }

    fn position_tensor(&self) -> Tensor {
        Tensor::new(vec![self.len(), 2], self.positions.iter().flatten().copied().collect())
            .expect("n x 2 positions")
    }
}

/// Puts every parameter tensor on `g`. Trainable leaves receive gradients.
pub fn bind_params<'p>(g: &mut Graph<'p>, params: &'p ModelParams, trainable: bool) -> Vec<Var> {
    params
        .tensors
        .iter()
        .map(|t| if trainable { g.param(t) } else { g.frozen(t) })
        .collect()
}

fn dense(d: &Dense<usize>, vars: &[Var]) -> Dense<Var> {
    d.map(|i| vars[i])
}

fn layer_norm(g: &mut Graph<'_>, x: Var, n: &Norm<usize>, vars: &[Var]) -> Result<Var> {
    g.layer_norm(x, vars[n.gain], vars[n.bias])
}

fn feed_forward(g: &mut Graph<'_>, x: Var, f: &FeedForward<usize>, vars: &[Var]) -> Result<Var> {
    let h = dense(&f.up, vars).apply(g, x)?;
    let h = g.gelu(h)?;
    dense(&f.down, vars).apply(g, h)
}

/// Pairwise inputs of the relational MLP, row `i * N + j` holding
/// `(x_i - x_j, y_i - y_j, |p_i - p_j|)`.
pub fn relational_features(positions: &[[f64; 2]]) -> Tensor {
    let n = positions.len();
    let mut data = Vec::with_capacity(n * n * 3);
    for pi in positions {
        for pj in positions {
            let dx = pi[0] - pj[0];
            let dy = pi[1] - pj[1];
            data.extend_from_slice(&[dx, dy, dx.hypot(dy)]);
        }
    }
    Tensor::new(vec![n * n, 3], data).expect("n*n x 3 features")
}

/// `[N, 2 + role_embed_dim]` rows of position ⊕ role embedding.
fn agent_inputs(g: &mut Graph<'_>, p: &ModelParams, vars: &[Var], f: &Formation<'_>) -> Result<Var> {
    let ids: Vec<usize> = f.roles.iter().map(|r| r.id()).collect();
    let emb = g.gather_rows(vars[p.layout().role_embedding], &ids)?;
    let pos = g.constant(f.position_tensor());
    g.concat_last(pos, emb)
}

fn agent_mask_tensor(mask: &[bool], groups: usize, width: usize) -> Tensor {
    let mut data = Vec::with_capacity(groups * mask.len() * width);
    for _ in 0..groups {
        for &m in mask {
            data.extend(std::iter::repeat_n(if m { 1.0 } else { 0.0 }, width));
        }
    }
    Tensor::new(vec![groups, mask.len(), width], data).expect("mask shape")
}

fn encoder_on_graph(g: &mut Graph<'_>, p: &ModelParams, vars: &[Var], f: &Formation<'_>, inputs: Var) -> Result<Var> {
    let n = f.len();
    let d = p.config().hidden_dim;
    let heads = p.config().num_heads;
    let enc = &p.layout().encoder;
    let h = dense(&p.layout().encoder_in, vars).apply(g, inputs)?;
    let h = g.reshape(h, &[1, n, d])?;
    let a = layer_norm(g, h, &enc.attn_norm, vars)?;
    let attended = multi_head_attention(
        g,
        a,
        KeySource::PerGroup(a),
        &enc.attn.map(|i| vars[i]),
        heads,
        None,
        Some(f.agent_mask),
    )?;
    let h = g.add(h, attended)?;
    let a = layer_norm(g, h, &enc.ffn_norm, vars)?;
    let ff = feed_forward(g, a, &enc.ffn, vars)?;
    let h = g.add(h, ff)?;
    let keep = g.constant(agent_mask_tensor(f.agent_mask, 1, d));
    let h = g.mul(h, keep)?;
    g.reshape(h, &[n, d])
}

/// One `[H, N, N]` bias per spatial layer, computed from the formation.
fn relational_bias_on_graph(g: &mut Graph<'_>, p: &ModelParams, vars: &[Var], positions: &[[f64; 2]]) -> Result<Vec<Var>> {
    let n = positions.len();
    let heads = p.config().num_heads;
    let feats = g.constant(relational_features(positions));
    let hidden = dense(&p.layout().relational, vars).apply(g, feats)?;
    let hidden = g.gelu(hidden)?;
    p.layout()
        .layers
        .iter()
        .map(|layer| {
            let b = dense(&layer.bias_head, vars).apply(g, hidden)?;
            let b = g.reshape(b, &[n, n, heads])?;
            g.permute(b, &[2, 0, 1])
        })
        .collect()
}

/// Full network on `g`. `vars` must come from [`bind_params`] on `params`.
pub fn forward_on_graph(
    g: &mut Graph<'_>,
    params: &ModelParams,
    vars: &[Var],
    formation: &Formation<'_>,
    num_frames: usize,
) -> Result<MoGVars> {
    let cfg = params.config();
    formation.validate()?;
    if num_frames < 2 || num_frames > cfg.max_frames {
        return Err(Error::InvalidArgument(format!(
            "num_frames {num_frames} outside [2, {}]",
            cfg.max_frames
        )));
    }
    let layout = params.layout();
    let (n, d, heads, m) = (formation.len(), cfg.hidden_dim, cfg.num_heads, cfg.mixture_components);
    let frames = num_frames - 1;
    let mask = formation.agent_mask;

    let inputs = agent_inputs(g, params, vars, formation)?;
    let memory = encoder_on_graph(g, params, vars, formation, inputs)?;

    // Every frame starts from the same projected formation plus its step embedding.
    let projected = dense(&layout.input_proj, vars).apply(g, inputs)?;
    let mut h = g.tile(projected, frames)?;
    let mut steps = Vec::with_capacity(frames * n * d);
    for t in 1..=frames {
        let e = sinusoidal_embedding(t, d)?;
        for _ in 0..n {
            steps.extend_from_slice(&e);
        }
    }
    let steps = g.constant(Tensor::new(vec![frames, n, d], steps)?);
    h = g.add(h, steps)?;

    let biases = relational_bias_on_graph(g, params, vars, formation.positions)?;
    for (layer, bias) in layout.layers.iter().zip(biases) {
        let a = layer_norm(g, h, &layer.spatial_norm, vars)?;
        let s = multi_head_attention(
            g,
            a,
            KeySource::PerGroup(a),
            &layer.spatial.map(|i| vars[i]),
            heads,
            Some(bias),
            Some(mask),
        )?;
        h = g.add(h, s)?;
        let a = layer_norm(g, h, &layer.cross_norm, vars)?;
        let c = multi_head_attention(
            g,
            a,
            KeySource::Shared(memory),
            &layer.cross.map(|i| vars[i]),
            heads,
            None,
            Some(mask),
        )?;
        h = g.add(h, c)?;
        let a = layer_norm(g, h, &layer.ffn_norm, vars)?;
        let f = feed_forward(g, a, &layer.ffn, vars)?;
        h = g.add(h, f)?;
    }

    // Temporal context: pool players, attend across frames, add back to every player.
    let tb = &layout.temporal;
    let pooled = g.masked_mean_rows(h, mask)?;
    let position = g.slice_rows(vars[tb.position], 0, frames)?;
    let z = g.add(pooled, position)?;
    let z = g.reshape(z, &[1, frames, d])?;
    let a = layer_norm(g, z, &tb.norm, vars)?;
    let ctx = multi_head_attention(g, a, KeySource::PerGroup(a), &tb.attn.map(|i| vars[i]), heads, None, None)?;
    let ctx = g.reshape(ctx, &[frames, d])?;
    let ctx = g.repeat_rows(ctx, n)?;
    let ctx = g.reshape(ctx, &[frames, n, d])?;
    h = g.add(h, ctx)?;
    let h = layer_norm(g, h, &layout.final_norm, vars)?;

    let head = &layout.head;
    let pooled = g.masked_mean_rows(h, mask)?;
    let hidden = dense(&head.pi_hidden, vars).apply(g, pooled)?;
    let hidden = g.gelu(hidden)?;
    let logits = dense(&head.pi_out, vars).apply(g, hidden)?;
    let pi = g.masked_softmax(logits, None)?;
    let mu = dense(&head.mu, vars).apply(g, h)?;
    let mu = g.reshape(mu, &[frames, n, m, 2])?;
    let chol_raw = dense(&head.chol, vars).apply(g, h)?;
    let chol_raw = g.reshape(chol_raw, &[frames, n, m, 3])?;
    Ok(MoGVars { pi, mu, chol_raw })
}

/// Mixture parameters for frames `1..num_frames` of `formation`.
pub fn forward(params: &ModelParams, formation: &Formation<'_>, num_frames: usize) -> Result<MoGParams> {
    let mut g = Graph::new();
    let vars = bind_params(&mut g, params, false);
    let out = forward_on_graph(&mut g, params, &vars, formation, num_frames)?;
    Ok(out.values(&g))
}

/// Formation-encoder features `[N, D]`; masked players get zero rows.
pub fn encode_formation(params: &ModelParams, formation: &Formation<'_>) -> Result<Tensor> {
    formation.validate()?;
    let mut g = Graph::new();
    let vars = bind_params(&mut g, params, false);
    let inputs = agent_inputs(&mut g, params, &vars, formation)?;
    let out = encoder_on_graph(&mut g, params, &vars, formation, inputs)?;
    Ok(g.value(out).clone())
}

/// Relational attention bias `[H, N, N]` of every spatial layer.
pub fn relational_bias(params: &ModelParams, positions: &[[f64; 2]]) -> Result<Vec<Tensor>> {
    let mut g = Graph::new();
    let vars = bind_params(&mut g, params, false);
    let out = relational_bias_on_graph(&mut g, params, &vars, positions)?;
    Ok(out.into_iter().map(|v| g.value(v).clone()).collect())
}
