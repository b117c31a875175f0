//! Generation from one forward pass: pick a component from the time-averaged
//! weights, then lay the component's means (plus scaled noise) on top of the
//! formation.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dataio::Trajectory;
use crate::error::{Error, Result};
use crate::model::{forward, Formation, ModelConfig, ModelParams, MoGParams, PredictionTarget};
use crate::objective::argmax;

/// Floor applied to π̄ before taking logs.
pub const PI_CLAMP: f64 = 1e-12;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseMode {
    /// One draw per player, reused at every frame.
    #[default]
    SharedEps,
    /// A fresh draw per player and frame.
    IndependentEps,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SampleConfig {
    pub temperature: f64,
    pub seed: u64,
    pub component_override: Option<usize>,
    pub num_samples: usize,
    pub noise_mode: NoiseMode,
}

impl Default for SampleConfig {
    fn default() -> Self {
        Self {
            temperature: 0.8,
            seed: 0,
            component_override: None,
            num_samples: 1,
            noise_mode: NoiseMode::SharedEps,
        }
    }
}

impl SampleConfig {
    pub fn validate(&self, components: usize) -> Result<()> {
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "temperature must be finite and >= 0, got {}",
                self.temperature
            )));
        }
        if self.num_samples == 0 {
            return Err(Error::InvalidArgument("num_samples must be at least 1".into()));
        }
        if let Some(k) = self.component_override {
            if k >= components {
                return Err(Error::InvalidArgument(format!(
                    "component_override {k} out of range for {components} components"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratedPlay {
    /// Frame 0 is the formation.
    pub trajectory: Trajectory,
    pub component: usize,
    pub pi_bar: Vec<f64>,
    pub seed: u64,
}

/// Anything that maps a formation to mixture parameters.
pub trait Predictor {
    fn model_config(&self) -> &ModelConfig;
    fn predict(&self, formation: &Formation<'_>, num_frames: usize) -> Result<MoGParams>;
}

impl Predictor for ModelParams {
    fn model_config(&self) -> &ModelConfig {
        self.config()
    }

    fn predict(&self, formation: &Formation<'_>, num_frames: usize) -> Result<MoGParams> {
        forward(self, formation, num_frames)
    }
}

/// Mean of the per-frame weight rows.
pub fn average_weights(pi: &MoGParams) -> Vec<f64> {
    let m = pi.components();
    let frames = pi.frames();
    let mut bar = vec![0.0; m];
    for t in 0..frames {
        for (b, p) in bar.iter_mut().zip(pi.pi_row(t)) {
            *b += p;
        }
    }
    bar.iter_mut().for_each(|b| *b /= frames as f64);
    bar
}

/// Draws a component from `softmax(ln π̄ / τ)`; `τ = 0` is the argmax.
/// Components whose weight is exactly zero are never drawn.
pub fn select_component(pi_bar: &[f64], temperature: f64, rng: &mut impl rand::Rng) -> Result<usize> {
    if pi_bar.is_empty() {
        return Err(Error::Empty("pi_bar"));
    }
    if !(temperature >= 0.0 && temperature.is_finite()) {
        return Err(Error::InvalidArgument(format!("temperature {temperature}")));
    }
    if temperature == 0.0 || pi_bar.len() == 1 {
        return Ok(argmax(pi_bar));
    }
    let logits: Vec<f64> = pi_bar.iter().map(|p| p.max(PI_CLAMP).ln() / temperature).collect();
    let top = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = logits
        .iter()
        .zip(pi_bar)
        .map(|(l, p)| if *p > 0.0 { (l - top).exp() } else { 0.0 })
        .collect();
    let dist = WeightedIndex::new(&weights)
        .map_err(|e| Error::InvalidArgument(format!("component weights {pi_bar:?}: {e}")))?;
    Ok(dist.sample(rng))
}

fn normal_pair(rng: &mut impl rand::Rng) -> [f64; 2] {
    [rng.sample(StandardNormal), rng.sample(StandardNormal)]
}

/// Noise draws indexed `[frame][agent]` for frames `1..T`.
fn draw_noise(frames: usize, agents: usize, mode: NoiseMode, rng: &mut impl rand::Rng) -> Vec<Vec<[f64; 2]>> {
    match mode {
        NoiseMode::SharedEps => {
            let eps: Vec<[f64; 2]> = (0..agents).map(|_| normal_pair(rng)).collect();
            vec![eps; frames]
        }
        NoiseMode::IndependentEps => (0..frames)
            .map(|_| (0..agents).map(|_| normal_pair(rng)).collect())
            .collect(),
    }
}

fn check_inputs(positions: &[[f64; 2]], mog: &MoGParams, k: usize, temperature: f64) -> Result<()> {
    if positions.len() != mog.agents() {
        return Err(Error::shape(
            "sample_trajectory",
            format!("{} formation spots vs {} agents", positions.len(), mog.agents()),
        ));
    }
    if k >= mog.components() {
        return Err(Error::InvalidArgument(format!(
            "component {k} out of range for {}",
            mog.components()
        )));
    }
    if !(temperature >= 0.0 && temperature.is_finite()) {
        return Err(Error::InvalidArgument(format!("temperature {temperature}")));
    }
    Ok(())
}

/// `x_t = f + μ_k(t) + τ L_k(t) ε` for displacement models; frame-delta
/// models are rolled out with [`reconstruct_frame_delta`].
#[allow(clippy::too_many_arguments)]
pub fn sample_trajectory(
    positions: &[[f64; 2]],
    mog: &MoGParams,
    k: usize,
    temperature: f64,
    covariance_floor: f64,
    target: PredictionTarget,
    noise_mode: NoiseMode,
    rng: &mut impl rand::Rng,
) -> Result<Trajectory> {
    if target == PredictionTarget::FrameDelta {
        return reconstruct_frame_delta(positions, mog, k, temperature, covariance_floor, noise_mode, rng);
    }
    check_inputs(positions, mog, k, temperature)?;
    let eps = draw_noise(mog.frames(), mog.agents(), noise_mode, rng);
    let mut out = Vec::with_capacity(mog.frames() + 1);
    out.push(positions.to_vec());
    for (t, eps_t) in eps.iter().enumerate() {
        let frame = positions
            .iter()
            .zip(eps_t)
            .enumerate()
            .map(|(i, (f, e))| {
                let mu = mog.mu(t, i, k);
                let n = mog.cholesky(t, i, k, covariance_floor).apply(*e);
                [f[0] + mu[0] + temperature * n[0], f[1] + mu[1] + temperature * n[1]]
            })
            .collect();
        out.push(frame);
    }
    Ok(out)
}

/// Adds sampled per-frame steps cumulatively to the formation.
pub fn reconstruct_frame_delta(
    positions: &[[f64; 2]],
    mog: &MoGParams,
    k: usize,
    temperature: f64,
    covariance_floor: f64,
    noise_mode: NoiseMode,
    rng: &mut impl rand::Rng,
) -> Result<Trajectory> {
    check_inputs(positions, mog, k, temperature)?;
    let eps = draw_noise(mog.frames(), mog.agents(), noise_mode, rng);
    let mut out = Vec::with_capacity(mog.frames() + 1);
    out.push(positions.to_vec());
    for (t, eps_t) in eps.iter().enumerate() {
        let prev = &out[t];
        let frame = prev
            .iter()
            .zip(eps_t)
            .enumerate()
            .map(|(i, (p, e))| {
                let mu = mog.mu(t, i, k);
                let n = mog.cholesky(t, i, k, covariance_floor).apply(*e);
                [p[0] + mu[0] + temperature * n[0], p[1] + mu[1] + temperature * n[1]]
            })
            .collect();
        out.push(frame);
    }
    Ok(out)
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed of sample `index` under `base`.
pub fn sample_seed(base: u64, index: u64) -> u64 {
    splitmix64(splitmix64(base) ^ index)
}

/// Draws `cfg.num_samples` plays from already computed mixture parameters.
pub fn draw_samples(
    mog: &MoGParams,
    positions: &[[f64; 2]],
    model: &ModelConfig,
    cfg: &SampleConfig,
) -> Result<Vec<GeneratedPlay>> {
    cfg.validate(mog.components())?;
    let pi_bar = average_weights(mog);
    (0..cfg.num_samples as u64)
        .map(|s| {
            let seed = sample_seed(cfg.seed, s);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let k = match cfg.component_override {
                Some(k) => k,
                None => select_component(&pi_bar, cfg.temperature, &mut rng)?,
            };
            let trajectory = sample_trajectory(
                positions,
                mog,
                k,
                cfg.temperature,
                model.covariance_floor,
                model.prediction_target,
                cfg.noise_mode,
                &mut rng,
            )?;
            Ok(GeneratedPlay {
                trajectory,
                component: k,
                pi_bar: pi_bar.clone(),
                seed,
            })
        })
        .collect()
}

/// One forward pass, then `cfg.num_samples` draws from its output.
pub fn generate<P: Predictor + ?Sized>(
    model: &P,
    formation: &Formation<'_>,
    num_frames: usize,
    cfg: &SampleConfig,
) -> Result<Vec<GeneratedPlay>> {
    cfg.validate(model.model_config().mixture_components)?;
    let mog = model.predict(formation, num_frames)?;
    draw_samples(&mog, formation.positions, model.model_config(), cfg)
}
