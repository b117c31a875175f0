use serde::{Deserialize, Serialize};

use super::csv_ingest::{PlayDirection, RawPlay};
use super::{Play, Role};
use crate::error::{Error, Result};

/// Field-relative coordinate frame. The offense always faces +x after
/// normalization.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NormalizationSpec {
    /// Yards mapped to x = 1.
    pub half_length: f64,
    /// Yards mapped to y = 1.
    pub half_width: f64,
    pub anchor_role: Role,
}

impl Default for NormalizationSpec {
    fn default() -> Self {
        Self {
            half_length: 60.0,
            half_width: 26.65,
            anchor_role: Role::C,
        }
    }
}

impl NormalizationSpec {
    pub fn validate(&self) -> Result<()> {
        if self.half_length > 0.0 && self.half_width > 0.0 && self.half_length.is_finite() && self.half_width.is_finite() {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "normalization scales must be positive, got {} x {}",
                self.half_length, self.half_width
            )))
        }
    }

    /// Anchor-relative yards to normalized units.
    pub fn to_normalized(&self, p: [f64; 2]) -> [f64; 2] {
        [p[0] / self.half_length, p[1] / self.half_width]
    }

    /// Normalized units to anchor-relative yards.
    pub fn to_yards(&self, p: [f64; 2]) -> [f64; 2] {
        [p[0] * self.half_length, p[1] * self.half_width]
    }

    /// Converts a distance vector between two normalized points to yards and
    /// returns its length.
    pub fn distance_yards(&self, a: [f64; 2], b: [f64; 2]) -> f64 {
        let dx = (a[0] - b[0]) * self.half_length;
        let dy = (a[1] - b[1]) * self.half_width;
        dx.hypot(dy)
    }
}

/// Translates so the anchor's snap position is the origin, turns left-moving
/// plays through 180° so the offense faces +x, and scales to normalized units.
/// The snap is the first frame of the clip.
pub fn normalize_play(raw: &RawPlay, spec: &NormalizationSpec) -> Result<Play> {
    spec.validate()?;
    let invalid = |reason: String| Error::InvalidPlay {
        play_id: raw.play_id.clone(),
        reason,
    };
    let anchors: Vec<_> = raw.tracks.iter().filter(|t| t.role == spec.anchor_role).collect();
    if anchors.len() != 1 {
        return Err(invalid(format!(
            "expected exactly one {} agent, found {}",
            spec.anchor_role,
            anchors.len()
        )));
    }
    let frames = raw.num_frames();
    if raw.tracks.iter().any(|t| t.positions.len() != frames) {
        return Err(invalid("tracks have different lengths".into()));
    }
    let origin = anchors[0].positions[0];
    let sign = match raw.direction {
        PlayDirection::Right => 1.0,
        PlayDirection::Left => -1.0,
    };
    let map = |p: [f64; 2]| spec.to_normalized([sign * (p[0] - origin[0]), sign * (p[1] - origin[1])]);

    let trajectory: Vec<Vec<[f64; 2]>> = (0..frames)
        .map(|f| raw.tracks.iter().map(|t| map(t.positions[f])).collect())
        .collect();
    let n = raw.tracks.len();
    let play = Play {
        play_id: raw.play_id.clone(),
        formation: trajectory.first().cloned().unwrap_or_default(),
        roles: raw.tracks.iter().map(|t| t.role).collect(),
        trajectory,
        frame_valid: vec![true; frames],
        agent_valid: vec![true; n],
        frame_rate: raw.frame_rate,
        concept: None,
    };
    play.validate()?;
    Ok(play)
}

/// Scales a normalized play back to anchor-relative yards. Orientation is not
/// restored, so the offense still faces +x.
pub fn denormalize(play: &Play, spec: &NormalizationSpec) -> Play {
    let scale = |pts: &[[f64; 2]]| pts.iter().map(|&p| spec.to_yards(p)).collect::<Vec<_>>();
    Play {
        formation: scale(&play.formation),
        trajectory: play.trajectory.iter().map(|f| scale(f)).collect(),
        ..play.clone()
    }
}
