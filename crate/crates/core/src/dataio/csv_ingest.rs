use std::collections::BTreeMap;
use std::fs::File;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::Role;
use crate::error::{Error, Result};

/// Offensive players per snap.
const TEAM_SIZE: usize = 11;

/// Column names of a tracking CSV. The defaults follow the public Big Data
/// Bowl layout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CsvSchema {
    pub game_id: String,
    pub play_id: String,
    pub frame_id: String,
    pub player_id: String,
    pub x: String,
    pub y: String,
    pub position: String,
    pub play_direction: String,
    /// Sampling rate of the tracking feed, Hz.
    pub frame_rate: f64,
}

impl Default for CsvSchema {
    fn default() -> Self {
        Self {
            game_id: "gameId".into(),
            play_id: "playId".into(),
            frame_id: "frameId".into(),
            player_id: "nflId".into(),
            x: "x".into(),
            y: "y".into(),
            position: "position".into(),
            play_direction: "playDirection".into(),
            frame_rate: 10.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PlayDirection {
    Left,
    Right,
}

impl FromStr for PlayDirection {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "left" => Ok(Self::Left),
            "right" => Ok(Self::Right),
            other => Err(Error::InvalidArgument(format!("play direction {other:?}"))),
        }
    }
}

/// One player's positions in raw field yards, one entry per frame.
#[derive(Clone, Debug, PartialEq)]
pub struct RawTrack {
    pub player_id: String,
    pub role: Role,
    pub positions: Vec<[f64; 2]>,
}

/// A play as it appears in the tracking feed: raw yards, original direction.
#[derive(Clone, Debug, PartialEq)]
pub struct RawPlay {
    pub play_id: String,
    pub direction: PlayDirection,
    pub frame_rate: f64,
    /// Sorted by player id.
    pub tracks: Vec<RawTrack>,
}

impl RawPlay {
    pub fn num_frames(&self) -> usize {
        self.tracks.first().map_or(0, |t| t.positions.len())
    }
}

#[derive(Clone, Debug, Default)]
pub struct LoadedPlays {
    pub plays: Vec<RawPlay>,
    pub dropped: usize,
}

struct Columns {
    game: usize,
    play: usize,
    frame: usize,
    player: usize,
    x: usize,
    y: usize,
    position: usize,
    direction: usize,
}

impl Columns {
    fn locate(headers: &csv::StringRecord, schema: &CsvSchema) -> Result<Self> {
        let find = |name: &str| {
            headers
                .iter()
                .position(|h| h.trim() == name)
                .ok_or_else(|| Error::MissingColumn(name.to_string()))
        };
        Ok(Self {
            game: find(&schema.game_id)?,
            play: find(&schema.play_id)?,
            frame: find(&schema.frame_id)?,
            player: find(&schema.player_id)?,
            x: find(&schema.x)?,
            y: find(&schema.y)?,
            position: find(&schema.position)?,
            direction: find(&schema.play_direction)?,
        })
    }
}

#[derive(Default)]
struct PlayRows {
    direction: Option<PlayDirection>,
    /// player id → (role, frame id → position)
    players: BTreeMap<String, (Role, BTreeMap<i64, [f64; 2]>)>,
}

/// Reads a tracking CSV and groups offensive rows into plays ordered by
/// `(game, play)`. Rows whose position is not an offensive role (defenders,
/// the ball) are ignored. Plays without exactly 11 offensive players, or with
/// a player missing from any frame, are dropped and counted.
pub fn load_tracking_csv(path: &Path, schema: &CsvSchema) -> Result<LoadedPlays> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new().flexible(false).from_reader(file);
    let headers = reader.headers()?.clone();
    if headers.is_empty() {
        return Ok(LoadedPlays::default());
    }
    let cols = Columns::locate(&headers, schema)?;

    let mut groups: BTreeMap<(SortKey, SortKey), PlayRows> = BTreeMap::new();
    let mut record = csv::StringRecord::new();
    loop {
        let more = reader.read_record(&mut record).map_err(|e| Error::Parse {
            line: e.position().map_or(0, |p| p.line()),
            detail: e.to_string(),
        })?;
        if !more {
            break;
        }
        let line = record.position().map_or(0, |p| p.line());
        let Ok(role) = record[cols.position].parse::<Role>() else {
            continue;
        };
        let parse_err = |what: &str, value: &str| Error::Parse {
            line,
            detail: format!("cannot parse {what} {value:?}"),
        };
        let num = |idx: usize, what: &str| -> Result<f64> {
            let s = record[idx].trim();
            s.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| parse_err(what, s))
        };
        let x = num(cols.x, "x")?;
        let y = num(cols.y, "y")?;
        let frame: i64 = record[cols.frame]
            .trim()
            .parse()
            .map_err(|_| parse_err("frame id", &record[cols.frame]))?;
        let direction: PlayDirection = record[cols.direction]
            .parse()
            .map_err(|_| parse_err("play direction", &record[cols.direction]))?;

        let key = (
            SortKey::new(&record[cols.game]),
            SortKey::new(&record[cols.play]),
        );
        let rows = groups.entry(key).or_default();
        match rows.direction {
            None => rows.direction = Some(direction),
            Some(d) if d != direction => {
                return Err(Error::Parse {
                    line,
                    detail: "play direction changes within a play".into(),
                })
            }
            Some(_) => {}
        }
        let entry = rows
            .players
            .entry(record[cols.player].trim().to_string())
            .or_insert_with(|| (role, BTreeMap::new()));
        entry.1.insert(frame, [x, y]);
    }

    let mut out = LoadedPlays::default();
    for ((game, play), rows) in groups {
        match assemble(&game.raw, &play.raw, rows, schema.frame_rate) {
            Some(p) => out.plays.push(p),
            None => out.dropped += 1,
        }
    }
    if out.dropped > 0 {
        log::info!("dropped {} of {} plays from {}", out.dropped, out.dropped + out.plays.len(), path.display());
    }
    Ok(out)
}

fn assemble(game: &str, play: &str, rows: PlayRows, frame_rate: f64) -> Option<RawPlay> {
    if rows.players.len() != TEAM_SIZE {
        return None;
    }
    let frames: Vec<i64> = rows.players.values().next()?.1.keys().copied().collect();
    let contiguous = frames.windows(2).all(|w| w[1] == w[0] + 1);
    if frames.len() < 2 || !contiguous {
        return None;
    }
    let mut tracks = Vec::with_capacity(TEAM_SIZE);
    for (player_id, (role, by_frame)) in rows.players {
        if !by_frame.keys().copied().eq(frames.iter().copied()) {
            return None;
        }
        tracks.push(RawTrack {
            player_id,
            role,
            positions: by_frame.into_values().collect(),
        });
    }
    Some(RawPlay {
        play_id: format!("{game}-{play}"),
        direction: rows.direction?,
        frame_rate,
        tracks,
    })
}

/// Orders numeric ids numerically and everything else lexically.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord)]
struct SortKey {
    numeric: Option<i64>,
    raw: String,
}

impl SortKey {
    fn new(s: &str) -> Self {
        let raw = s.trim().to_string();
        Self {
            numeric: raw.parse().ok(),
            raw,
        }
    }
}
