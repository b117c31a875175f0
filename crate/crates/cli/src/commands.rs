//! One function per subcommand. Each returns what it wrote so callers and
//! tests can inspect it.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use formgen_core::dataio::{
    load_tracking_csv, normalize_play, read_dataset, split, synthesize_dataset, write_dataset, CsvSchema, Play, Role,
};
use formgen_core::metrics::{evaluate, MetricsReport};
use formgen_core::model::ModelParams;
use formgen_core::trainer::{train as run_training, StopReason, TrainReport};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::api::{self, ApiLimits, FormationInput, GenerateRequest, GenerateResponse};
use crate::config::RunConfig;
use crate::error::{CliError, EXIT_FAILURE};
use crate::plot::{render_svg, Panel};
use crate::service::{self, AppState};

fn ensure_writable(path: &Path, force: bool) -> Result<(), CliError> {
    if path.exists() && !force {
        return Err(CliError::new(
            "exists",
            format!("{} already exists; pass --force to overwrite", path.display()),
            EXIT_FAILURE,
        ));
    }
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| CliError::output(parent, e))?;
    }
    Ok(())
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| CliError::output(path, e))
}

fn to_json<T: serde::Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("serializable");
    s.push('\n');
    s
}

pub fn load_checkpoint(path: &Path) -> Result<ModelParams, CliError> {
    if !path.is_file() {
        return Err(CliError::input(path, "checkpoint not found"));
    }
    ModelParams::load(path).map_err(|e| match e {
        formgen_core::Error::Io { source, .. } => CliError::input(path, source),
        other => CliError::new("checkpoint", format!("{}: {other}", path.display()), crate::error::EXIT_USAGE),
    })
}

pub fn load_plays(path: &Path) -> Result<Vec<Play>, CliError> {
    if !path.is_file() {
        return Err(CliError::input(path, "dataset not found"));
    }
    Ok(read_dataset(path)?)
}

/// Writes the synthetic dataset described by `cfg.synthetic`.
pub fn synth_data(cfg: &RunConfig, out: &Path, force: bool) -> Result<usize, CliError> {
    ensure_writable(out, force)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.data.synth_seed);
    let plays = synthesize_dataset(&cfg.synthetic, &mut rng)?;
    write_dataset(out, &plays)?;
    Ok(plays.len())
}

/// Converts a tracking CSV into a normalized dataset; returns kept and
/// dropped play counts.
pub fn ingest(cfg: &RunConfig, csv: &Path, out: &Path, force: bool) -> Result<(usize, usize), CliError> {
    if !csv.is_file() {
        return Err(CliError::input(csv, "file not found"));
    }
    ensure_writable(out, force)?;
    let loaded = load_tracking_csv(csv, &CsvSchema::default())?;
    let mut plays = Vec::with_capacity(loaded.plays.len());
    let mut dropped = loaded.dropped;
    for raw in &loaded.plays {
        match normalize_play(raw, &cfg.normalization) {
            Ok(p) => plays.push(p),
            Err(e) => {
                log::warn!("dropping {}: {e}", raw.play_id);
                dropped += 1;
            }
        }
    }
    write_dataset(out, &plays)?;
    Ok((plays.len(), dropped))
}

/// Files produced by a training run.
pub struct TrainArtifacts {
    pub best: PathBuf,
    pub last: PathBuf,
    pub report: PathBuf,
    pub config: PathBuf,
    pub timing: PathBuf,
    pub summary: TrainReport,
}

/// Splits `data`, trains, and writes checkpoints, report and the resolved
/// config into `out_dir`. A diverged run still writes everything before
/// failing.
pub fn train(cfg: &RunConfig, data: &Path, out_dir: &Path, force: bool) -> Result<TrainArtifacts, CliError> {
    let plays = load_plays(data)?;
    if out_dir.exists() {
        let non_empty = fs::read_dir(out_dir)
            .map_err(|e| CliError::output(out_dir, e))?
            .next()
            .is_some();
        if non_empty && !force {
            return Err(CliError::new(
                "exists",
                format!("{} is not empty; pass --force to overwrite", out_dir.display()),
                EXIT_FAILURE,
            ));
        }
    }
    fs::create_dir_all(out_dir).map_err(|e| CliError::output(out_dir, e))?;
    let config_path = out_dir.join("config.toml");
    write_text(&config_path, &cfg.to_toml())?;

    let (train_set, val_set) = split(&plays, cfg.data.train_ratio, cfg.data.split_seed)?;
    let init = ModelParams::init(&cfg.model, cfg.train.seed)?;
    log::info!(
        "training {} parameters on {} plays, validating on {}",
        init.count(),
        train_set.len(),
        val_set.len()
    );
    let outcome = run_training(init, &train_set, &val_set, &cfg.train)?;

    let art = TrainArtifacts {
        best: out_dir.join("best.json"),
        last: out_dir.join("last.json"),
        report: out_dir.join("report.json"),
        config: config_path,
        timing: out_dir.join("timing.json"),
        summary: outcome.report.clone(),
    };
    outcome.best.save(&art.best)?;
    outcome.last.save(&art.last)?;
    write_text(&art.report, &to_json(&outcome.report))?;
    write_text(
        &art.timing,
        &to_json(&serde_json::json!({ "wall_seconds": outcome.wall_seconds })),
    )?;
    if let StopReason::Diverged { epoch, step, detail } = &outcome.report.stop {
        return Err(CliError::new(
            "diverged",
            format!("epoch {epoch} step {step}: {detail}; best weights saved to {}", art.best.display()),
            EXIT_FAILURE,
        ));
    }
    Ok(art)
}

/// Which plays of the dataset to score.
#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum EvalSplit {
    All,
    Train,
    Val,
}

pub fn eval(cfg: &RunConfig, checkpoint: &Path, data: &Path, which: EvalSplit) -> Result<MetricsReport, CliError> {
    let params = load_checkpoint(checkpoint)?;
    let plays = load_plays(data)?;
    let plays = match which {
        EvalSplit::All => plays,
        EvalSplit::Train => split(&plays, cfg.data.train_ratio, cfg.data.split_seed)?.0,
        EvalSplit::Val => split(&plays, cfg.data.train_ratio, cfg.data.split_seed)?.1,
    };
    let opts = cfg.eval.options(&cfg.normalization);
    Ok(evaluate(&params, &plays, &opts)?)
}

pub struct GenerateArgs {
    pub formation: Option<PathBuf>,
    pub num_frames: Option<usize>,
    pub out: PathBuf,
    pub svg: Option<PathBuf>,
}

/// Samples plays for one formation using `cfg.sample`; writes the API
/// response JSON and optionally an SVG.
pub fn generate(cfg: &RunConfig, checkpoint: &Path, args: &GenerateArgs) -> Result<GenerateResponse, CliError> {
    let params = load_checkpoint(checkpoint)?;
    let input: FormationInput = match &args.formation {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| CliError::input(path, e))?;
            serde_json::from_str(&text).map_err(|e| CliError::input(path, e))?
        }
        None => api::default_formation(cfg.serve.num_players),
    };
    let limits = ApiLimits {
        num_players: input.formation.len(),
        max_samples: usize::MAX,
        normalization: cfg.normalization.clone(),
    };
    let req = GenerateRequest {
        formation: input.formation.clone(),
        roles: input.roles.clone(),
        temperature: cfg.sample.temperature,
        num_samples: cfg.sample.num_samples,
        seed: Some(cfg.sample.seed),
        component: cfg.sample.component_override,
        num_frames: args.num_frames,
        noise_mode: cfg.sample.noise_mode,
    };
    let resp = api::generate(&params, &limits, &req, cfg.sample.seed)
        .map_err(|e| CliError::new("invalid", e.detail, crate::error::EXIT_USAGE))?;
    ensure_writable(&args.out, true)?;
    write_text(&args.out, &to_json(&resp))?;
    if let Some(svg) = &args.svg {
        let roles: Vec<Role> = input.roles.iter().map(|r| r.parse()).collect::<Result<_, _>>()?;
        let panels: Vec<Panel<'_>> = resp
            .samples
            .iter()
            .enumerate()
            .map(|(i, s)| Panel {
                title: format!("sample {} (concept {})", i + 1, s.component),
                trajectory: &s.trajectory,
            })
            .collect();
        ensure_writable(svg, true)?;
        write_text(svg, &render_svg(&panels, &roles))?;
    }
    Ok(resp)
}

pub fn serve(cfg: &RunConfig, checkpoint: &Path) -> Result<(), CliError> {
    let params = load_checkpoint(checkpoint)?;
    let limits = ApiLimits {
        num_players: cfg.serve.num_players,
        max_samples: cfg.serve.max_samples,
        normalization: cfg.normalization.clone(),
    };
    let addr = format!("{}:{}", cfg.serve.host, cfg.serve.port);
    let state = Arc::new(AppState::new(params, limits));
    let runtime = tokio::runtime::Runtime::new().map_err(|e| CliError::new("runtime", e.to_string(), EXIT_FAILURE))?;
    runtime
        .block_on(service::serve(state, &addr))
        .map_err(|e| CliError::new("serve", format!("{addr}: {e}"), EXIT_FAILURE))
}
