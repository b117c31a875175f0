use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{NormalizationSpec, Play, Role};
use crate::error::{Error, Result};

/// Jitter on linemen is scaled down by this factor; their alignment is rigid.
const LINEMAN_JITTER_SCALE: f64 = 0.25;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentationConfig {
    pub flip_probability: f64,
    /// Standard deviation of the per-player offset, yards.
    pub jitter_sigma: f64,
    /// Multiplicative range for the lateral spread of the formation.
    pub spread_range: [f64; 2],
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        Self {
            flip_probability: 0.5,
            jitter_sigma: 0.3,
            spread_range: [0.9, 1.1],
        }
    }
}

impl AugmentationConfig {
    /// No-op augmentation.
    pub fn identity() -> Self {
        Self {
            flip_probability: 0.0,
            jitter_sigma: 0.0,
            spread_range: [1.0, 1.0],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.spread_range;
        if !(0.0..=1.0).contains(&self.flip_probability) {
            return Err(Error::Config(format!("flip_probability {} outside [0, 1]", self.flip_probability)));
        }
        if !(self.jitter_sigma >= 0.0 && self.jitter_sigma.is_finite()) {
            return Err(Error::Config(format!("jitter_sigma {} must be >= 0", self.jitter_sigma)));
        }
        if !(lo > 0.0 && lo <= 1.0 && hi >= 1.0 && hi.is_finite()) {
            return Err(Error::Config(format!("spread_range [{lo}, {hi}] must satisfy 0 < lo <= 1 <= hi")));
        }
        Ok(())
    }
}

/// Mirror about the x-axis: every y is negated, x is untouched.
pub fn flip_lateral(play: &Play) -> Play {
    let flip = |pts: &[[f64; 2]]| pts.iter().map(|p| [p[0], -p[1]]).collect::<Vec<_>>();
    Play {
        formation: flip(&play.formation),
        trajectory: play.trajectory.iter().map(|f| flip(f)).collect(),
        ..play.clone()
    }
}

/// Random lateral flip, lateral spread about the center, and per-player jitter.
///
/// Spread and jitter move each player's whole trajectory by one offset, so
/// routes keep their shape and frame 0 still equals the formation. Jitter is
/// drawn in yards and converted with the default normalization scales.
pub fn augment<R: Rng + ?Sized>(play: &Play, cfg: &AugmentationConfig, rng: &mut R) -> Play {
    let mut out = if rng.random_bool(cfg.flip_probability) {
        flip_lateral(play)
    } else {
        play.clone()
    };

    let [lo, hi] = cfg.spread_range;
    let spread = rng.random_range(lo..=hi);
    let anchor_y = play
        .roles
        .iter()
        .position(|&r| r == Role::C)
        .map_or(0.0, |i| out.formation[i][1]);

    let spec = NormalizationSpec::default();
    let sigma = [cfg.jitter_sigma / spec.half_length, cfg.jitter_sigma / spec.half_width];
    let offsets: Vec<[f64; 2]> = out
        .formation
        .iter()
        .zip(&out.roles)
        .map(|(f, role)| {
            let scale = if role.is_lineman() { LINEMAN_JITTER_SCALE } else { 1.0 };
            let jx: f64 = rng.sample(StandardNormal);
            let jy: f64 = rng.sample(StandardNormal);
            let lateral = (spread - 1.0) * (f[1] - anchor_y);
            [jx * sigma[0] * scale, lateral + jy * sigma[1] * scale]
        })
        .collect();

    let shift = |pts: &mut [[f64; 2]]| {
        for (p, o) in pts.iter_mut().zip(&offsets) {
            p[0] += o[0];
            p[1] += o[1];
        }
    };
    shift(&mut out.formation);
    for frame in &mut out.trajectory {
        shift(frame);
    }
    out
}
