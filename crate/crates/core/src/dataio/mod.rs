//! Plays, their on-disk formats, and the preprocessing applied before training.
//!
//! Coordinates inside a [`Play`] are normalized: the center's snap position is
//! the origin, the offense faces +x, and x / y are divided by the half-field
//! length and width (see [`NormalizationSpec`]).

mod augment;
mod csv_ingest;
mod normalize;
mod synth;

use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use augment::{augment, flip_lateral, AugmentationConfig};
pub use csv_ingest::{load_tracking_csv, CsvSchema, LoadedPlays, PlayDirection, RawPlay, RawTrack};
pub use normalize::{denormalize, normalize_play, NormalizationSpec};
pub use synth::{default_concepts, default_templates, synthesize_dataset, RouteConcept, RouteTemplate, SyntheticConfig, Waypoint};

/// Dataset file format version written in every record.
pub const DATASET_FORMAT: u32 = 1;

/// Slack around the nominal [-1, 1] normalized range.
pub const COORD_LIMIT: f64 = 1.5;

/// `[T][N][x, y]` positions of every player over a clip.
pub type Trajectory = Vec<Vec<[f64; 2]>>;

/// Offensive position. The integer ids are fixed: QB=0, RB=1, FB=2, WR=3,
/// TE=4, C=5, G=6, T=7.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Role {
    QB,
    RB,
    FB,
    WR,
    TE,
    C,
    G,
    T,
}

impl Role {
    pub const ALL: [Role; 8] = [Role::QB, Role::RB, Role::FB, Role::WR, Role::TE, Role::C, Role::G, Role::T];
    pub const COUNT: usize = 8;

    pub fn id(self) -> usize {
        self as usize
    }

    pub fn from_id(id: usize) -> Result<Self> {
        Self::ALL.get(id).copied().ok_or(Error::RoleOutOfRange(id))
    }

    pub fn name(self) -> &'static str {
        match self {
            Role::QB => "QB",
            Role::RB => "RB",
            Role::FB => "FB",
            Role::WR => "WR",
            Role::TE => "TE",
            Role::C => "C",
            Role::G => "G",
            Role::T => "T",
        }
    }

    /// Interior linemen and tackles.
    pub fn is_lineman(self) -> bool {
        matches!(self, Role::C | Role::G | Role::T)
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Role {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let upper = s.trim().to_ascii_uppercase();
        Role::ALL
            .into_iter()
            .find(|r| r.name() == upper)
            .ok_or_else(|| Error::UnknownRole(s.to_string()))
    }
}

impl Serialize for Role {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.name())
    }
}

impl<'de> Deserialize<'de> for Role {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// One snap: the formation plus the tracked trajectory of every player.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Play {
    pub play_id: String,
    /// `[N][x, y]`, normalized.
    pub formation: Vec<[f64; 2]>,
    pub roles: Vec<Role>,
    /// Normalized; frame 0 is the formation.
    pub trajectory: Trajectory,
    pub frame_valid: Vec<bool>,
    pub agent_valid: Vec<bool>,
    /// Hz.
    pub frame_rate: f64,
    /// Route-concept label, present for synthetic plays.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub concept: Option<String>,
}

impl Play {
    pub fn num_agents(&self) -> usize {
        self.formation.len()
    }

    pub fn num_frames(&self) -> usize {
        self.trajectory.len()
    }

    /// Checks every structural invariant of a normalized play.
    pub fn validate(&self) -> Result<()> {
        let fail = |reason: String| Error::InvalidPlay {
            play_id: self.play_id.clone(),
            reason,
        };
        let n = self.num_agents();
        let t = self.num_frames();
        if n == 0 {
            return Err(fail("no agents".into()));
        }
        if t < 2 {
            return Err(fail(format!("needs at least 2 frames, has {t}")));
        }
        if self.roles.len() != n || self.agent_valid.len() != n {
            return Err(fail("roles / agent_valid length differs from formation".into()));
        }
        if self.frame_valid.len() != t {
            return Err(fail("frame_valid length differs from trajectory".into()));
        }
        if !self.frame_valid[0] {
            return Err(fail("frame 0 must be valid".into()));
        }
        if !self.agent_valid.iter().any(|&v| v) {
            return Err(fail("every agent is masked".into()));
        }
        if !(self.frame_rate > 0.0 && self.frame_rate.is_finite()) {
            return Err(fail(format!("frame rate {}", self.frame_rate)));
        }
        for (f, frame) in self.trajectory.iter().enumerate() {
            if frame.len() != n {
                return Err(fail(format!("frame {f} has {} agents, expected {n}", frame.len())));
            }
        }
        for i in 0..n {
            if self.agent_valid[i] && self.trajectory[0][i] != self.formation[i] {
                return Err(fail(format!("frame 0 of agent {i} differs from its formation spot")));
            }
        }
        let in_range = |p: &[f64; 2]| p.iter().all(|v| v.is_finite() && v.abs() <= COORD_LIMIT);
        for (i, p) in self.formation.iter().enumerate() {
            if self.agent_valid[i] && !in_range(p) {
                return Err(fail(format!("formation spot of agent {i} out of range: {p:?}")));
            }
        }
        for (f, frame) in self.trajectory.iter().enumerate() {
            if !self.frame_valid[f] {
                continue;
            }
            for (i, p) in frame.iter().enumerate() {
                if self.agent_valid[i] && !in_range(p) {
                    return Err(fail(format!("agent {i} at frame {f} out of range: {p:?}")));
                }
            }
        }
        Ok(())
    }
}

#[derive(Serialize)]
struct RecordOut<'a> {
    format: u32,
    #[serde(flatten)]
    play: &'a Play,
}

#[derive(Deserialize)]
struct RecordIn {
    format: u32,
    #[serde(flatten)]
    play: Play,
}

/// Writes one JSON record per line.
pub fn write_dataset(path: &Path, plays: &[Play]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for play in plays {
        serde_json::to_writer(
            &mut w,
            &RecordOut {
                format: DATASET_FORMAT,
                play,
            },
        )?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_dataset(path: &Path) -> Result<Vec<Play>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut plays = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: RecordIn = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i as u64 + 1,
            detail: e.to_string(),
        })?;
        if record.format != DATASET_FORMAT {
            return Err(Error::Parse {
                line: i as u64 + 1,
                detail: format!("unsupported dataset format {}", record.format),
            });
        }
        plays.push(record.play);
    }
    Ok(plays)
}

/// Seeded shuffle followed by a cut at `floor(ratio * len)`, kept inside
/// `1..len` so neither side is empty.
pub fn split(plays: &[Play], ratio: f64, seed: u64) -> Result<(Vec<Play>, Vec<Play>)> {
    if plays.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "cannot split {} plays",
            plays.len()
        )));
    }
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::InvalidArgument(format!("split ratio {ratio} outside (0, 1)")));
    }
    let mut order: Vec<usize> = (0..plays.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let cut = split_point(plays.len(), ratio);
    let train = order[..cut].iter().map(|&i| plays[i].clone()).collect();
    let val = order[cut..].iter().map(|&i| plays[i].clone()).collect();
    Ok((train, val))
}

pub fn split_point(len: usize, ratio: f64) -> usize {
    ((len as f64 * ratio).floor() as usize).clamp(1, len - 1)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_play(id: &str) -> Play {
        let formation = vec![[0.0, 0.0], [-0.1, 0.2]];
        Play {
            play_id: id.into(),
            formation: formation.clone(),
            roles: vec![Role::C, Role::WR],
            trajectory: vec![formation, vec![[0.0, 0.01], [0.1, 0.2]]],
            frame_valid: vec![true, true],
            agent_valid: vec![true, true],
            frame_rate: 10.0,
            concept: None,
        }
    }

    #[test]
    fn role_ids_are_fixed() {
        let ids: Vec<usize> = Role::ALL.iter().map(|r| r.id()).collect();
        assert_eq!(ids, (0..8).collect::<Vec<_>>());
        assert_eq!(Role::from_id(5).unwrap(), Role::C);
        assert!(Role::from_id(8).is_err());
        assert_eq!("wr".parse::<Role>().unwrap(), Role::WR);
        assert!("CB".parse::<Role>().is_err());
    }

    #[test]
    fn validate_catches_broken_invariants() {
        assert!(tiny_play("a").validate().is_ok());
        let mut p = tiny_play("b");
        p.trajectory[0][1] = [0.5, 0.5];
        assert!(p.validate().is_err());
        let mut p = tiny_play("c");
        p.trajectory.truncate(1);
        p.frame_valid.truncate(1);
        assert!(p.validate().is_err());
        let mut p = tiny_play("d");
        p.trajectory[1][1] = [1.6, 0.0];
        assert!(p.validate().is_err());
        let mut p = tiny_play("e");
        p.frame_valid[0] = false;
        assert!(p.validate().is_err());
    }

    #[test]
    fn split_counts_and_determinism() {
        let plays: Vec<Play> = (0..10).map(|i| tiny_play(&i.to_string())).collect();
        let (a, b) = split(&plays, 0.8, 42).unwrap();
        assert_eq!((a.len(), b.len()), (8, 2));
        let (a2, b2) = split(&plays, 0.8, 42).unwrap();
        assert_eq!(a, a2);
        assert_eq!(b, b2);
        let mut ids: Vec<String> = a.iter().chain(&b).map(|p| p.play_id.clone()).collect();
        ids.sort();
        ids.dedup();
        assert_eq!(ids.len(), 10);
        assert_eq!(split_point(9934, 0.8), 7947);
        assert!(split(&plays[..1], 0.8, 0).is_err());
        assert!(split(&plays, 1.0, 0).is_err());
    }

    #[test]
    fn dataset_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("plays.jsonl");
        let mut plays = vec![tiny_play("x"), tiny_play("y")];
        plays[1].concept = Some("slants".into());
        plays[0].formation[1][0] = 0.1 + 0.2;
        plays[0].trajectory[0][1][0] = 0.1 + 0.2;
        write_dataset(&path, &plays).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.lines().all(|l| l.starts_with("{\"format\":1,")));
        assert_eq!(read_dataset(&path).unwrap(), plays);
    }
}
