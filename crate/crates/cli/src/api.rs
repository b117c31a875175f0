//! Request and response types of the inference API, in yards, and the pure
//! functions behind each endpoint.

use formgen_core::dataio::{NormalizationSpec, Role, Trajectory, COORD_LIMIT};
use formgen_core::model::{Formation, ModelConfig, ModelParams};
use formgen_core::sampler::{average_weights, draw_samples, NoiseMode, Predictor, SampleConfig};
use serde::{Deserialize, Serialize};

/// A rejected request: HTTP status plus the `{error, detail}` body.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ApiError {
    pub status: u16,
    pub error: &'static str,
    pub detail: String,
}

impl ApiError {
    pub fn bad_request(error: &'static str, detail: impl Into<String>) -> Self {
        Self {
            status: 400,
            error,
            detail: detail.into(),
        }
    }

    pub fn internal(detail: impl Into<String>) -> Self {
        Self {
            status: 500,
            error: "internal",
            detail: detail.into(),
        }
    }
}

impl std::fmt::Display for ApiError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: {}", self.error, self.detail)
    }
}

/// Players' spots in yards with their role names. Coordinates are taken
/// relative to the center when one is present.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FormationInput {
    pub formation: Vec<[f64; 2]>,
    pub roles: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerateRequest {
    pub formation: Vec<[f64; 2]>,
    pub roles: Vec<String>,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    #[serde(default = "default_num_samples")]
    pub num_samples: usize,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub component: Option<usize>,
    /// Clip length including the formation frame; the model maximum if absent.
    #[serde(default)]
    pub num_frames: Option<usize>,
    #[serde(default)]
    pub noise_mode: NoiseMode,
}

fn default_temperature() -> f64 {
    SampleConfig::default().temperature
}

fn default_num_samples() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleOut {
    /// `[T][N][x, y]` yards.
    pub trajectory: Trajectory,
    pub component: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerateResponse {
    pub samples: Vec<SampleOut>,
    pub pi_bar: Vec<f64>,
    /// Base seed the samples were derived from.
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConceptOut {
    pub component: usize,
    pub weight: f64,
    pub trajectory: Trajectory,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConceptsResponse {
    pub concepts: Vec<ConceptOut>,
    pub pi_bar: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelInfo {
    pub config: ModelConfig,
    pub param_count: usize,
    #[serde(rename = "M")]
    pub m: usize,
    pub num_frames: usize,
    pub num_players: usize,
    pub max_samples: usize,
    pub roles: Vec<String>,
    pub default_formation: FormationInput,
}

/// Request limits and unit conversion shared by every endpoint.
#[derive(Clone, Debug, PartialEq)]
pub struct ApiLimits {
    pub num_players: usize,
    pub max_samples: usize,
    pub normalization: NormalizationSpec,
}

/// An 11-player shotgun set, or its first `n` players. The first five are
/// center, quarterback, back and two receivers.
pub fn default_formation(n: usize) -> FormationInput {
    const SET: [([f64; 2], &str); 11] = [
        ([0.0, 0.0], "C"),
        ([-5.0, 0.0], "QB"),
        ([-5.0, -1.5], "RB"),
        ([-0.5, 18.0], "WR"),
        ([-0.5, -18.0], "WR"),
        ([-0.3, 1.3], "G"),
        ([-0.3, -1.3], "G"),
        ([-0.5, 2.6], "T"),
        ([-0.5, -2.6], "T"),
        ([-0.5, 4.0], "TE"),
        ([-1.0, 10.0], "WR"),
    ];
    let pick = &SET[..n.min(SET.len())];
    FormationInput {
        formation: pick.iter().map(|p| p.0).collect(),
        roles: pick.iter().map(|p| p.1.to_string()).collect(),
    }
}

/// A formation converted to model units, plus the yard offset to restore.
pub struct PreparedFormation {
    pub positions: Vec<[f64; 2]>,
    pub roles: Vec<Role>,
    pub mask: Vec<bool>,
    pub origin: [f64; 2],
    /// The submitted spots, returned verbatim as frame 0.
    pub yards: Vec<[f64; 2]>,
}

impl PreparedFormation {
    pub fn view(&self) -> Formation<'_> {
        Formation::new(&self.positions, &self.roles, &self.mask)
    }

    fn to_yards(&self, traj: &Trajectory, spec: &NormalizationSpec) -> Trajectory {
        let mut out: Trajectory = traj
            .iter()
            .map(|frame| {
                frame
                    .iter()
                    .map(|p| {
                        let y = spec.to_yards(*p);
                        [y[0] + self.origin[0], y[1] + self.origin[1]]
                    })
                    .collect()
            })
            .collect();
        if let Some(first) = out.first_mut() {
            first.clone_from(&self.yards);
        }
        out
    }
}

pub fn prepare_formation(
    formation: &[[f64; 2]],
    roles: &[String],
    limits: &ApiLimits,
) -> Result<PreparedFormation, ApiError> {
    let n = limits.num_players;
    if formation.len() != n {
        return Err(ApiError::bad_request(
            "invalid_formation",
            format!("expected {n} players, got {}", formation.len()),
        ));
    }
    if roles.len() != n {
        return Err(ApiError::bad_request(
            "invalid_formation",
            format!("expected {n} roles, got {}", roles.len()),
        ));
    }
    let roles: Vec<Role> = roles
        .iter()
        .enumerate()
        .map(|(i, r)| {
            r.parse::<Role>()
                .map_err(|_| ApiError::bad_request("invalid_formation", format!("player {i}: unknown role {r:?}")))
        })
        .collect::<Result<_, _>>()?;
    if let Some(i) = formation.iter().position(|p| !(p[0].is_finite() && p[1].is_finite())) {
        return Err(ApiError::bad_request(
            "invalid_formation",
            format!("player {i}: coordinates must be finite"),
        ));
    }
    let spec = &limits.normalization;
    let origin = roles
        .iter()
        .position(|&r| r == spec.anchor_role)
        .map_or([0.0, 0.0], |i| formation[i]);
    let positions: Vec<[f64; 2]> = formation
        .iter()
        .map(|p| spec.to_normalized([p[0] - origin[0], p[1] - origin[1]]))
        .collect();
    if let Some(i) = positions.iter().position(|p| p.iter().any(|v| v.abs() > COORD_LIMIT)) {
        return Err(ApiError::bad_request(
            "invalid_formation",
            format!("player {i}: position is off the field"),
        ));
    }
    Ok(PreparedFormation {
        positions,
        mask: vec![true; n],
        roles,
        origin,
        yards: formation.to_vec(),
    })
}

fn resolve_frames(requested: Option<usize>, model: &ModelConfig) -> Result<usize, ApiError> {
    let t = requested.unwrap_or(model.max_frames);
    if t < 2 || t > model.max_frames {
        return Err(ApiError::bad_request(
            "invalid_request",
            format!("num_frames {t} outside [2, {}]", model.max_frames),
        ));
    }
    Ok(t)
}

pub fn model_info(params: &ModelParams, limits: &ApiLimits) -> ModelInfo {
    let cfg = params.config();
    ModelInfo {
        config: cfg.clone(),
        param_count: params.count(),
        m: cfg.mixture_components,
        num_frames: cfg.max_frames,
        num_players: limits.num_players,
        max_samples: limits.max_samples,
        roles: Role::ALL.iter().map(|r| r.name().to_string()).collect(),
        default_formation: default_formation(limits.num_players),
    }
}

/// Samples `num_samples` plays; `seed` is used when the request has none.
pub fn generate(
    params: &ModelParams,
    limits: &ApiLimits,
    req: &GenerateRequest,
    fallback_seed: u64,
) -> Result<GenerateResponse, ApiError> {
    let cfg = params.config();
    if req.num_samples == 0 || req.num_samples > limits.max_samples {
        return Err(ApiError::bad_request(
            "invalid_request",
            format!("num_samples {} outside [1, {}]", req.num_samples, limits.max_samples),
        ));
    }
    if !(req.temperature >= 0.0 && req.temperature.is_finite()) {
        return Err(ApiError::bad_request(
            "invalid_request",
            format!("temperature {} must be finite and >= 0", req.temperature),
        ));
    }
    if let Some(k) = req.component {
        if k >= cfg.mixture_components {
            return Err(ApiError::bad_request(
                "invalid_request",
                format!("component {k} outside [0, {})", cfg.mixture_components),
            ));
        }
    }
    let frames = resolve_frames(req.num_frames, cfg)?;
    let prepared = prepare_formation(&req.formation, &req.roles, limits)?;
    let seed = req.seed.unwrap_or(fallback_seed);
    let mog = params
        .predict(&prepared.view(), frames)
        .map_err(|e| ApiError::internal(e.to_string()))?;
    let sc = SampleConfig {
        temperature: req.temperature,
        seed,
        component_override: req.component,
        num_samples: req.num_samples,
        noise_mode: req.noise_mode,
    };
    let plays = draw_samples(&mog, &prepared.positions, cfg, &sc).map_err(|e| ApiError::internal(e.to_string()))?;
    Ok(GenerateResponse {
        pi_bar: average_weights(&mog),
        samples: plays
            .into_iter()
            .map(|p| SampleOut {
                trajectory: prepared.to_yards(&p.trajectory, &limits.normalization),
                component: p.component,
                seed: p.seed,
            })
            .collect(),
        seed,
    })
}

/// The `τ = 0` mean play of every component.
pub fn concepts(params: &ModelParams, limits: &ApiLimits, input: &FormationInput) -> Result<ConceptsResponse, ApiError> {
    let cfg = params.config();
    let prepared = prepare_formation(&input.formation, &input.roles, limits)?;
    let mog = params
        .predict(&prepared.view(), cfg.max_frames)
        .map_err(|e| ApiError::internal(e.to_string()))?;
    let pi_bar = average_weights(&mog);
    let concepts = (0..cfg.mixture_components)
        .map(|k| {
            let sc = SampleConfig {
                temperature: 0.0,
                component_override: Some(k),
                num_samples: 1,
                ..SampleConfig::default()
            };
            let play = draw_samples(&mog, &prepared.positions, cfg, &sc)
                .map_err(|e| ApiError::internal(e.to_string()))?
                .remove(0);
            Ok(ConceptOut {
                component: k,
                weight: pi_bar[k],
                trajectory: prepared.to_yards(&play.trajectory, &limits.normalization),
            })
        })
        .collect::<Result<_, ApiError>>()?;
    Ok(ConceptsResponse { concepts, pi_bar })
}
