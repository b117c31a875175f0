//! Procedural plays with a known set of route concepts.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{NormalizationSpec, Play, Role};
use crate::error::{Error, Result};

/// Route breakpoint: at `frame` the player is `(x, y)` yards from their
/// formation spot. `x` points downfield, `y` points away from the center.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Waypoint {
    pub frame: f64,
    pub x: f64,
    pub y: f64,
}

impl Waypoint {
    pub const fn new(frame: f64, x: f64, y: f64) -> Self {
        Self { frame, x, y }
    }
}

/// Piecewise-linear route, held at its last waypoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RouteTemplate {
    pub name: String,
    pub waypoints: Vec<Waypoint>,
}

impl RouteTemplate {
    pub fn new(name: &str, waypoints: &[Waypoint]) -> Self {
        Self {
            name: name.into(),
            waypoints: waypoints.to_vec(),
        }
    }

    fn check(&self, num_frames: usize) -> std::result::Result<(), String> {
        let first = self.waypoints.first().ok_or("route has no waypoints")?;
        if first.frame != 0.0 || first.x != 0.0 || first.y != 0.0 {
            return Err(format!("route {:?} must start at (0, 0) at frame 0", self.name));
        }
        if self.waypoints.iter().any(|w| !(w.frame.is_finite() && w.x.is_finite() && w.y.is_finite())) {
            return Err(format!("route {:?} has a non-finite waypoint", self.name));
        }
        if self.waypoints.windows(2).any(|w| w[1].frame <= w[0].frame) {
            return Err(format!("route {:?} waypoint frames must strictly increase", self.name));
        }
        let last = self.waypoints.last().map_or(0.0, |w| w.frame);
        if last > num_frames as f64 {
            return Err(format!("route {:?} ends at frame {last}, beyond T = {num_frames}", self.name));
        }
        Ok(())
    }

    /// Offset in yards at (possibly fractional) time `t`.
    pub fn position_at(&self, t: f64) -> [f64; 2] {
        let w = &self.waypoints;
        let last = w[w.len() - 1];
        if t >= last.frame {
            return [last.x, last.y];
        }
        let j = w.partition_point(|p| p.frame <= t).saturating_sub(1);
        let (a, b) = (w[j], w[j + 1]);
        let s = (t - a.frame) / (b.frame - a.frame);
        [a.x + s * (b.x - a.x), a.y + s * (b.y - a.y)]
    }

    pub fn path_length(&self) -> f64 {
        self.waypoints.windows(2).map(|w| (w[1].x - w[0].x).hypot(w[1].y - w[0].y)).sum()
    }

    /// Yards per frame when run on the template's own clock.
    pub fn nominal_speed(&self) -> f64 {
        let end = self.waypoints.last().map_or(0.0, |w| w.frame);
        if end > 0.0 {
            self.path_length() / end
        } else {
            0.0
        }
    }
}

/// A joint play: the route every role runs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RouteConcept {
    pub name: String,
    pub routes: BTreeMap<Role, String>,
}

impl RouteConcept {
    pub fn new(name: &str, routes: &[(Role, &str)]) -> Self {
        Self {
            name: name.into(),
            routes: routes.iter().map(|&(r, t)| (r, t.to_string())).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub plays_per_concept: usize,
    pub lineup: Vec<Role>,
    pub num_frames: usize,
    pub frame_rate: f64,
    /// Per-coordinate positional noise, yards.
    pub noise_sigma: f64,
    /// Running speed range per role, yards per frame.
    pub speed_ranges: BTreeMap<Role, [f64; 2]>,
    pub templates: Vec<RouteTemplate>,
    pub concepts: Vec<RouteConcept>,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            plays_per_concept: 500,
            lineup: vec![Role::C, Role::QB, Role::RB, Role::WR, Role::WR],
            num_frames: 20,
            frame_rate: 10.0,
            noise_sigma: 0.1,
            speed_ranges: default_speed_ranges(),
            templates: default_templates(),
            concepts: default_concepts(),
        }
    }
}

fn default_speed_ranges() -> BTreeMap<Role, [f64; 2]> {
    Role::ALL
        .into_iter()
        .map(|r| {
            let range = match r {
                Role::WR => [0.6, 0.8],
                Role::TE => [0.5, 0.65],
                Role::RB | Role::FB => [0.45, 0.6],
                Role::QB => [0.25, 0.3],
                Role::C | Role::G | Role::T => [0.05, 0.07],
            };
            (r, range)
        })
        .collect()
}

/// go, slant, out, screen, qb_dropback, ol_block; 20-frame clocks.
pub fn default_templates() -> Vec<RouteTemplate> {
    let w = Waypoint::new;
    vec![
        RouteTemplate::new("go", &[w(0.0, 0.0, 0.0), w(20.0, 16.0, 0.0)]),
        RouteTemplate::new("slant", &[w(0.0, 0.0, 0.0), w(6.0, 4.0, 0.0), w(20.0, 11.0, -5.0)]),
        RouteTemplate::new("out", &[w(0.0, 0.0, 0.0), w(9.0, 7.0, 0.0), w(20.0, 8.0, 5.0)]),
        RouteTemplate::new("screen", &[w(0.0, 0.0, 0.0), w(6.0, -1.5, 3.0), w(20.0, 0.0, 6.0)]),
        RouteTemplate::new("qb_dropback", &[w(0.0, 0.0, 0.0), w(10.0, -5.0, 0.0), w(20.0, -5.5, 0.0)]),
        RouteTemplate::new("ol_block", &[w(0.0, 0.0, 0.0), w(5.0, -1.0, 0.0), w(20.0, -1.2, 0.0)]),
    ]
}

/// Four concepts that differ in the receiver, tight end, and back routes.
/// Linemen always block and the quarterback always drops back.
pub fn default_concepts() -> Vec<RouteConcept> {
    let with_fixed = |name: &str, wr: &str, back: &str, te: &str| {
        RouteConcept::new(
            name,
            &[
                (Role::QB, "qb_dropback"),
                (Role::RB, back),
                (Role::FB, back),
                (Role::WR, wr),
                (Role::TE, te),
                (Role::C, "ol_block"),
                (Role::G, "ol_block"),
                (Role::T, "ol_block"),
            ],
        )
    };
    vec![
        with_fixed("verticals", "go", "ol_block", "go"),
        with_fixed("slants", "slant", "screen", "out"),
        with_fixed("outs", "out", "ol_block", "slant"),
        with_fixed("screen", "go", "screen", "ol_block"),
    ]
}

impl SyntheticConfig {
    pub fn num_plays(&self) -> usize {
        self.plays_per_concept * self.concepts.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.concepts.is_empty() {
            return Err(Error::Config("at least one route concept is required".into()));
        }
        if self.plays_per_concept == 0 {
            return Err(Error::Config("plays_per_concept must be positive".into()));
        }
        if self.lineup.is_empty() {
            return Err(Error::Config("lineup is empty".into()));
        }
        if self.num_frames < 2 {
            return Err(Error::Config(format!("num_frames {} < 2", self.num_frames)));
        }
        if !(self.frame_rate > 0.0 && self.noise_sigma >= 0.0) {
            return Err(Error::Config("frame_rate must be positive and noise_sigma non-negative".into()));
        }
        for role in &self.lineup {
            match self.speed_ranges.get(role) {
                Some(&[lo, hi]) if lo > 0.0 && lo <= hi && hi.is_finite() => {}
                _ => return Err(Error::Config(format!("missing or invalid speed range for {role}"))),
            }
        }
        let mut names = BTreeSet::new();
        for concept in &self.concepts {
            let fail = |detail: String| Error::Route {
                concept: concept.name.clone(),
                detail,
            };
            if !names.insert(&concept.name) {
                return Err(fail("duplicate concept name".into()));
            }
            for role in &self.lineup {
                let name = concept
                    .routes
                    .get(role)
                    .ok_or_else(|| fail(format!("no route for {role}")))?;
                let template = self
                    .template(name)
                    .ok_or_else(|| fail(format!("unknown route template {name:?}")))?;
                template.check(self.num_frames).map_err(fail)?;
            }
        }
        Ok(())
    }

    fn template(&self, name: &str) -> Option<&RouteTemplate> {
        self.templates.iter().find(|t| t.name == name)
    }
}

fn formation_spot<R: Rng + ?Sized>(role: Role, side: f64, rng: &mut R) -> [f64; 2] {
    let mut u = |lo: f64, hi: f64| rng.random_range(lo..=hi);
    match role {
        Role::C => [0.0, 0.0],
        Role::G => [u(-0.7, -0.3), side * u(2.8, 3.2)],
        Role::T => [u(-1.0, -0.6), side * u(5.6, 6.4)],
        Role::QB => [u(-5.5, -4.0), u(-0.5, 0.5)],
        Role::RB => [u(-7.5, -6.0), u(-2.0, 2.0)],
        Role::FB => [u(-4.0, -3.0), u(-1.0, 1.0)],
        Role::WR => [u(-1.5, -0.5), side * u(10.0, 22.0)],
        Role::TE => [u(-1.2, -0.6), side * u(7.5, 8.5)],
    }
}

/// Synthesizes `plays_per_concept` plays of every concept in shuffled order.
///
/// Formation spots are drawn from role zones (linemen in a line around the
/// center, the quarterback and backs behind, receivers wide). Each player then
/// runs the concept's route for their role, mirrored to their side of the
/// center, at a speed drawn from the role's range, plus per-frame Gaussian
/// noise. Coordinates are returned normalized.
pub fn synthesize_dataset<R: Rng + ?Sized>(cfg: &SyntheticConfig, rng: &mut R) -> Result<Vec<Play>> {
    cfg.validate()?;
    let spec = NormalizationSpec::default();
    let mut labels: Vec<usize> = (0..cfg.concepts.len())
        .flat_map(|c| std::iter::repeat_n(c, cfg.plays_per_concept))
        .collect();
    labels.shuffle(rng);

    let n = cfg.lineup.len();
    let t_len = cfg.num_frames;
    let mut plays = Vec::with_capacity(labels.len());
    for (index, &c) in labels.iter().enumerate() {
        let concept = &cfg.concepts[c];
        let mut side_of_role: BTreeMap<Role, f64> = BTreeMap::new();
        let mut trajectory = vec![vec![[0.0; 2]; n]; t_len];
        for (i, &role) in cfg.lineup.iter().enumerate() {
            // Linemen fill left then right; receivers and tight ends start on a
            // random side and alternate.
            let side = match side_of_role.get(&role) {
                Some(&s) => -s,
                None if role.is_lineman() => 1.0,
                None if rng.random_bool(0.5) => 1.0,
                None => -1.0,
            };
            side_of_role.insert(role, side);
            let spot = formation_spot(role, side, rng);
            let outward = if spot[1] < 0.0 { -1.0 } else { 1.0 };

            let template = cfg
                .template(&concept.routes[&role])
                .expect("validated concept references a template");
            let [lo, hi] = cfg.speed_ranges[&role];
            let speed = rng.random_range(lo..=hi);
            let nominal = template.nominal_speed();
            let pace = if nominal > 0.0 { speed / nominal } else { 1.0 };

            for (t, frame) in trajectory.iter_mut().enumerate() {
                let off = template.position_at(t as f64 * pace);
                let mut p = [spot[0] + off[0], spot[1] + outward * off[1]];
                if t > 0 && cfg.noise_sigma > 0.0 {
                    let nx: f64 = rng.sample(StandardNormal);
                    let ny: f64 = rng.sample(StandardNormal);
                    p[0] += cfg.noise_sigma * nx;
                    p[1] += cfg.noise_sigma * ny;
                }
                frame[i] = spec.to_normalized(p);
            }
        }
        let play = Play {
            play_id: format!("synth-{index:06}"),
            formation: trajectory[0].clone(),
            roles: cfg.lineup.clone(),
            trajectory,
            frame_valid: vec![true; t_len],
            agent_valid: vec![true; n],
            frame_rate: cfg.frame_rate,
            concept: Some(concept.name.clone()),
        };
        play.validate()?;
        plays.push(play);
    }
    Ok(plays)
}
