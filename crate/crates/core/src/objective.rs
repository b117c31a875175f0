//! Training objective: mixture negative log-likelihood, best-component
//! displacement error, weight entropy and best-component smoothness.
//!
//! Every term is computed on plain tensors together with its exact gradient
//! with respect to the mixture parameters; [`attach_loss`] hands both to a
//! [`Graph`] so the gradient flows on into the network.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::dataio::Play;
use crate::error::{Error, Result};
use crate::model::{realize_covariance, MoGParams, MoGVars, PredictionTarget};
use crate::numerics::{logsumexp, sigmoid, Graph, Tensor, Var};

/// Regression targets for frames `1..T` of one play.
#[derive(Clone, Debug, PartialEq)]
pub struct DisplacementTargets {
    /// `[T-1, N, 2]`.
    pub d: Tensor,
    /// One entry per predicted frame.
    pub frame_valid: Vec<bool>,
    pub agent_valid: Vec<bool>,
}

impl DisplacementTargets {
    pub fn new(d: Tensor, frame_valid: Vec<bool>, agent_valid: Vec<bool>) -> Result<Self> {
        let s = d.shape();
        if s.len() != 3 || s[2] != 2 || s[0] != frame_valid.len() || s[1] != agent_valid.len() {
            return Err(Error::shape(
                "DisplacementTargets",
                format!("d {s:?}, {} frames, {} agents", frame_valid.len(), agent_valid.len()),
            ));
        }
        if !d.is_finite() {
            return Err(Error::NonFinite { op: "DisplacementTargets" });
        }
        Ok(Self {
            d,
            frame_valid,
            agent_valid,
        })
    }

    /// Offsets from the formation, or per-frame steps for
    /// [`PredictionTarget::FrameDelta`]. A step is valid only when both of its
    /// frames are.
    pub fn from_play(play: &Play, target: PredictionTarget) -> Result<Self> {
        let t_len = play.num_frames();
        let n = play.num_agents();
        if t_len < 2 {
            return Err(Error::InvalidPlay {
                play_id: play.play_id.clone(),
                reason: "needs at least 2 frames".into(),
            });
        }
        let mut d = Vec::with_capacity((t_len - 1) * n * 2);
        let mut frame_valid = Vec::with_capacity(t_len - 1);
        for t in 1..t_len {
            let (base, valid) = match target {
                PredictionTarget::AbsoluteDisplacement => (&play.formation, play.frame_valid[t]),
                PredictionTarget::FrameDelta => (&play.trajectory[t - 1], play.frame_valid[t] && play.frame_valid[t - 1]),
            };
            frame_valid.push(valid);
            for (p, b) in play.trajectory[t].iter().zip(base) {
                d.push(p[0] - b[0]);
                d.push(p[1] - b[1]);
            }
        }
        Self::new(Tensor::new(vec![t_len - 1, n, 2], d)?, frame_valid, play.agent_valid.clone())
    }

    pub fn frames(&self) -> usize {
        self.frame_valid.len()
    }

    pub fn agents(&self) -> usize {
        self.agent_valid.len()
    }

    pub fn get(&self, t: usize, i: usize) -> [f64; 2] {
        let o = (t * self.agents() + i) * 2;
        [self.d.data()[o], self.d.data()[o + 1]]
    }

    fn valid_pairs(&self) -> usize {
        self.frame_valid.iter().filter(|&&v| v).count() * self.agent_valid.iter().filter(|&&v| v).count()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub ade: f64,
    pub entropy: f64,
    pub smooth: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            ade: 1.0,
            entropy: 0.1,
            smooth: 0.5,
        }
    }
}

impl LossWeights {
    /// Every auxiliary term at 0.1.
    pub fn uniform_tenth() -> Self {
        Self {
            ade: 0.1,
            entropy: 0.1,
            smooth: 0.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if [self.ade, self.entropy, self.smooth].iter().all(|w| *w >= 0.0 && w.is_finite()) {
            Ok(())
        } else {
            Err(Error::Config(format!("loss weights must be non-negative: {self:?}")))
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub nll: f64,
    pub ade: f64,
    pub entropy: f64,
    pub smooth: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn combine(nll: f64, ade: f64, entropy: f64, smooth: f64, w: &LossWeights) -> Self {
        Self {
            nll,
            ade,
            entropy,
            smooth,
            total: nll + w.ade * ade + w.entropy * entropy + w.smooth * smooth,
        }
    }

    /// Element-wise mean of several breakdowns.
    pub fn mean(items: &[LossBreakdown]) -> Self {
        let n = items.len().max(1) as f64;
        let mut out = Self::default();
        for b in items {
            out.nll += b.nll / n;
            out.ade += b.ade / n;
            out.entropy += b.entropy / n;
            out.smooth += b.smooth / n;
            out.total += b.total / n;
        }
        out
    }
}

/// Gradient of a scalar with respect to each part of [`MoGParams`].
#[derive(Clone, Debug, PartialEq)]
pub struct MoGGrads {
    pub pi: Tensor,
    pub mu: Tensor,
    pub chol_raw: Tensor,
}

impl MoGGrads {
    fn zeros_like(p: &MoGParams) -> Self {
        Self {
            pi: Tensor::zeros(p.pi.shape()),
            mu: Tensor::zeros(p.mu.shape()),
            chol_raw: Tensor::zeros(p.chol_raw.shape()),
        }
    }

    fn add_scaled(&mut self, other: &MoGGrads, c: f64) {
        for (a, b) in [
            (&mut self.pi, &other.pi),
            (&mut self.mu, &other.mu),
            (&mut self.chol_raw, &other.chol_raw),
        ] {
            for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
                *x += c * y;
            }
        }
    }
}

fn check_shapes(p: &MoGParams, targets: &DisplacementTargets) -> Result<()> {
    if p.frames() != targets.frames() || p.agents() != targets.agents() {
        return Err(Error::shape(
            "objective",
            format!(
                "mixture over {} frames x {} agents, targets {} x {}",
                p.frames(),
                p.agents(),
                targets.frames(),
                targets.agents()
            ),
        ));
    }
    Ok(())
}

/// Lowest index among the largest entries.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (k, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = k;
        }
    }
    best
}

fn offset(p: &MoGParams, t: usize, i: usize, k: usize) -> usize {
    (t * p.agents() + i) * p.components() + k
}

/// Mixture negative log-likelihood and its gradient.
pub fn mog_nll_with_grad(p: &MoGParams, targets: &DisplacementTargets, floor: f64) -> Result<(f64, MoGGrads)> {
    check_shapes(p, targets)?;
    let count = targets.valid_pairs();
    if count == 0 {
        return Err(Error::NoValidPairs);
    }
    let inv = 1.0 / count as f64;
    let m = p.components();
    let mut grads = MoGGrads::zeros_like(p);
    let mut total = 0.0;
    let ln_2pi = (2.0 * PI).ln();

    // Per component: Σ_i log N, and the derivative of each log N with respect
    // to μ (2) and raw Cholesky entries (3).
    let mut log_lik = vec![0.0; m];
    let mut d_mu = vec![[0.0; 2]; m * p.agents()];
    let mut d_raw = vec![[0.0; 3]; m * p.agents()];
    for t in 0..p.frames() {
        if !targets.frame_valid[t] {
            continue;
        }
        log_lik.iter_mut().for_each(|v| *v = 0.0);
        for i in 0..p.agents() {
            if !targets.agent_valid[i] {
                continue;
            }
            let d = targets.get(t, i);
            for k in 0..m {
                let raw = p.chol_raw(t, i, k);
                let l = realize_covariance(raw, floor);
                let mu = p.mu(t, i, k);
                let z = l.solve([d[0] - mu[0], d[1] - mu[1]]);
                log_lik[k] += -ln_2pi - l.l11.ln() - l.l22.ln() - 0.5 * (z[0] * z[0] + z[1] * z[1]);
                // ∂/∂μ = L⁻ᵀ z
                let u2 = z[1] / l.l22;
                let u1 = (z[0] - l.l21 * u2) / l.l11;
                d_mu[i * m + k] = [u1, u2];
                let dl11 = (-1.0 + z[0] * z[0] - z[1] * z[0] * l.l21 / l.l22) / l.l11;
                let dl21 = z[0] * z[1] / l.l22;
                let dl22 = (-1.0 + z[1] * z[1]) / l.l22;
                d_raw[i * m + k] = [dl11 * sigmoid(raw[0]), dl21, dl22 * sigmoid(raw[2])];
            }
        }
        let log_pi: Vec<f64> = p.pi_row(t).iter().map(|&v| v.ln()).collect();
        let scores: Vec<f64> = log_pi.iter().zip(&log_lik).map(|(a, b)| a + b).collect();
        let lse = logsumexp(&scores)?;
        if !lse.is_finite() {
            return Err(Error::NonFinite { op: "mog_nll" });
        }
        total -= lse;
        for k in 0..m {
            // Posterior responsibility; π_k is divided out in log space so a
            // vanishing weight does not produce 0/0.
            let resp = (scores[k] - lse).exp();
            grads.pi.data_mut()[t * m + k] = -(log_lik[k] - lse).exp() * inv;
            for i in 0..p.agents() {
                if !targets.agent_valid[i] {
                    continue;
                }
                let o = offset(p, t, i, k);
                let g = -resp * inv;
                let dm = d_mu[i * m + k];
                let dr = d_raw[i * m + k];
                grads.mu.data_mut()[2 * o] = g * dm[0];
                grads.mu.data_mut()[2 * o + 1] = g * dm[1];
                for c in 0..3 {
                    grads.chol_raw.data_mut()[3 * o + c] = g * dr[c];
                }
            }
        }
    }
    Ok((total * inv, grads))
}

/// `-(1/count) Σ_t logsumexp_k [log π_k + Σ_i log N(d_i; μ_ik, Σ_ik)]` over
/// valid frames and agents.
pub fn mog_nll(p: &MoGParams, targets: &DisplacementTargets, floor: f64) -> Result<f64> {
    Ok(mog_nll_with_grad(p, targets, floor)?.0)
}

/// Mean error of the highest-weight component's means, and its gradient.
/// The selection itself carries no gradient.
pub fn best_component_ade_with_grad(p: &MoGParams, targets: &DisplacementTargets) -> Result<(f64, MoGGrads)> {
    check_shapes(p, targets)?;
    let count = targets.valid_pairs();
    if count == 0 {
        return Err(Error::NoValidPairs);
    }
    let inv = 1.0 / count as f64;
    let mut grads = MoGGrads::zeros_like(p);
    let mut total = 0.0;
    for t in 0..p.frames() {
        if !targets.frame_valid[t] {
            continue;
        }
        let k = argmax(p.pi_row(t));
        for i in 0..p.agents() {
            if !targets.agent_valid[i] {
                continue;
            }
            let mu = p.mu(t, i, k);
            let d = targets.get(t, i);
            let e = [mu[0] - d[0], mu[1] - d[1]];
            let norm = e[0].hypot(e[1]);
            total += norm;
            if norm > 0.0 {
                let o = 2 * offset(p, t, i, k);
                grads.mu.data_mut()[o] = e[0] / norm * inv;
                grads.mu.data_mut()[o + 1] = e[1] / norm * inv;
            }
        }
    }
    Ok((total * inv, grads))
}

pub fn best_component_ade(p: &MoGParams, targets: &DisplacementTargets) -> Result<f64> {
    Ok(best_component_ade_with_grad(p, targets)?.0)
}

/// Mean over frames of `Σ_k π_k ln π_k`, and its gradient.
pub fn weight_entropy_loss_with_grad(p: &MoGParams) -> (f64, MoGGrads) {
    let mut grads = MoGGrads::zeros_like(p);
    let frames = p.frames();
    if frames == 0 {
        return (0.0, grads);
    }
    let inv = 1.0 / frames as f64;
    let mut total = 0.0;
    for (idx, &v) in p.pi.data().iter().enumerate() {
        if v > 0.0 {
            total += v * v.ln();
        }
        grads.pi.data_mut()[idx] = (v.max(f64::MIN_POSITIVE).ln() + 1.0) * inv;
    }
    (total * inv, grads)
}

pub fn weight_entropy_loss(p: &MoGParams) -> f64 {
    weight_entropy_loss_with_grad(p).0
}

/// Mean step length of the best component's means between consecutive valid
/// frames, with the component chosen at the earlier frame; and its gradient.
pub fn smoothness_loss_with_grad(p: &MoGParams, targets: &DisplacementTargets) -> Result<(f64, MoGGrads)> {
    check_shapes(p, targets)?;
    let mut grads = MoGGrads::zeros_like(p);
    let agents = targets.agent_valid.iter().filter(|&&v| v).count();
    let pairs = (1..p.frames())
        .filter(|&t| targets.frame_valid[t - 1] && targets.frame_valid[t])
        .count();
    if pairs == 0 || agents == 0 {
        return Ok((0.0, grads));
    }
    let inv = 1.0 / (pairs * agents) as f64;
    let mut total = 0.0;
    for t in 0..p.frames() - 1 {
        if !(targets.frame_valid[t] && targets.frame_valid[t + 1]) {
            continue;
        }
        let k = argmax(p.pi_row(t));
        for i in 0..p.agents() {
            if !targets.agent_valid[i] {
                continue;
            }
            let a = p.mu(t, i, k);
            let b = p.mu(t + 1, i, k);
            let e = [b[0] - a[0], b[1] - a[1]];
            let norm = e[0].hypot(e[1]);
            total += norm;
            if norm > 0.0 {
                let (o0, o1) = (2 * offset(p, t, i, k), 2 * offset(p, t + 1, i, k));
                for c in 0..2 {
                    let g = e[c] / norm * inv;
                    grads.mu.data_mut()[o1 + c] += g;
                    grads.mu.data_mut()[o0 + c] -= g;
                }
            }
        }
    }
    Ok((total * inv, grads))
}

pub fn smoothness_loss(p: &MoGParams, targets: &DisplacementTargets) -> Result<f64> {
    Ok(smoothness_loss_with_grad(p, targets)?.0)
}

/// Weighted objective and its gradient.
pub fn total_loss_with_grad(
    p: &MoGParams,
    targets: &DisplacementTargets,
    weights: &LossWeights,
    floor: f64,
) -> Result<(LossBreakdown, MoGGrads)> {
    let (nll, mut grads) = mog_nll_with_grad(p, targets, floor)?;
    let (ade, g_ade) = best_component_ade_with_grad(p, targets)?;
    let (entropy, g_ent) = weight_entropy_loss_with_grad(p);
    let (smooth, g_smooth) = smoothness_loss_with_grad(p, targets)?;
    grads.add_scaled(&g_ade, weights.ade);
    grads.add_scaled(&g_ent, weights.entropy);
    grads.add_scaled(&g_smooth, weights.smooth);
    Ok((LossBreakdown::combine(nll, ade, entropy, smooth, weights), grads))
}

pub fn total_loss(p: &MoGParams, targets: &DisplacementTargets, weights: &LossWeights, floor: f64) -> Result<LossBreakdown> {
    Ok(total_loss_with_grad(p, targets, weights, floor)?.0)
}

/// Adds the weighted objective as a scalar node fed by the mixture nodes.
pub fn attach_loss(
    g: &mut Graph<'_>,
    vars: &MoGVars,
    targets: &DisplacementTargets,
    weights: &LossWeights,
    floor: f64,
) -> Result<(Var, LossBreakdown)> {
    let values = vars.values(g);
    let (breakdown, grads) = total_loss_with_grad(&values, targets, weights, floor)?;
    let node = g.custom(
        breakdown.total,
        &[vars.pi, vars.mu, vars.chol_raw],
        vec![grads.pi, grads.mu, grads.chol_raw],
    )?;
    Ok((node, breakdown))
}
