use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use formgen::commands::{self, EvalSplit, GenerateArgs};
use formgen::{CliError, RunConfig};

#[derive(Parser)]
#[command(name = "formgen", version, about = "Formation-conditioned play generation")]
struct Cli {
    /// TOML run configuration; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a configuration value, e.g. `--set train.learning_rate=0.001`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic route-concept dataset.
    SynthData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Convert a player-tracking CSV into a normalized dataset.
    Ingest {
        #[arg(long)]
        csv: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Train a model and write checkpoints and a report.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Score a checkpoint on a dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Truncated horizons, e.g. `5,10,15,20`.
        #[arg(long, value_delimiter = ',')]
        horizons: Option<Vec<usize>>,
        /// Score samples drawn at this temperature instead of concept means.
        #[arg(long)]
        sampled_temperature: Option<f64>,
        #[arg(long, value_enum, default_value = "all")]
        split: EvalSplit,
        /// Also write the report as JSON.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Sample plays for one formation.
    Generate {
        #[arg(long)]
        checkpoint: PathBuf,
        /// JSON `{formation: [[x, y], ...], roles: [...]}` in yards.
        #[arg(long)]
        formation: Option<PathBuf>,
        #[arg(short = 'k', long)]
        num_samples: Option<usize>,
        #[arg(long)]
        temperature: Option<f64>,
        #[arg(long)]
        component: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        frames: Option<usize>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        svg: Option<PathBuf>,
    },
    /// Serve the JSON API.
    Serve {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        host: Option<String>,
        #[arg(long)]
        port: Option<u16>,
        /// Players each request must supply.
        #[arg(long)]
        players: Option<usize>,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    let mut overrides = cli.overrides;
    let mut push = |key: &str, value: Option<String>| {
        if let Some(v) = value {
            overrides.push(format!("{key}={v}"));
        }
    };
    match &cli.command {
        Command::Eval {
            horizons,
            sampled_temperature,
            ..
        } => {
            push(
                "eval.horizons",
                horizons.as_ref().map(|h| format!("{h:?}")),
            );
            push("eval.sampled_temperature", sampled_temperature.map(|t| format!("{t:?}")));
        }
        Command::Generate {
            num_samples,
            temperature,
            component,
            seed,
            ..
        } => {
            push("sample.num_samples", num_samples.map(|v| v.to_string()));
            push("sample.temperature", temperature.map(|v| format!("{v:?}")));
            push("sample.component_override", component.map(|v| v.to_string()));
            push("sample.seed", seed.map(|v| v.to_string()));
        }
        Command::Serve { host, port, players, .. } => {
            push("serve.host", host.as_ref().map(|h| format!("{h:?}")));
            push("serve.port", port.map(|v| v.to_string()));
            push("serve.num_players", players.map(|v| v.to_string()));
        }
        _ => {}
    }
    let cfg = RunConfig::load(cli.config.as_deref(), &overrides)?;

    match cli.command {
        Command::SynthData { out, force } => {
            let n = commands::synth_data(&cfg, &out, force)?;
            println!("wrote {n} plays to {}", out.display());
        }
        Command::Ingest { csv, out, force } => {
            let (kept, dropped) = commands::ingest(&cfg, &csv, &out, force)?;
            println!("wrote {kept} plays to {} ({dropped} dropped)", out.display());
        }
        Command::Train { data, out, force } => {
            let art = commands::train(&cfg, &data, &out, force)?;
            let r = &art.summary;
            println!(
                "trained {} epochs ({} steps); best epoch {} with validation ADE {:.4} yd; checkpoint {}",
                r.epochs.len(),
                r.steps,
                r.best_epoch.map_or("-".into(), |e| e.to_string()),
                r.best_val_ade.unwrap_or(f64::NAN),
                art.best.display()
            );
        }
        Command::Eval {
            checkpoint,
            data,
            split,
            json,
            ..
        } => {
            let report = commands::eval(&cfg, &checkpoint, &data, split)?;
            println!("{}", report.to_table());
            if let Some(path) = json {
                let text = serde_json::to_string_pretty(&report).expect("serializable") + "\n";
                std::fs::write(&path, text).map_err(|e| CliError::output(&path, e))?;
            }
        }
        Command::Generate {
            checkpoint,
            formation,
            frames,
            out,
            svg,
            ..
        } => {
            let args = GenerateArgs {
                formation,
                num_frames: frames,
                out,
                svg,
            };
            let resp = commands::generate(&cfg, &checkpoint, &args)?;
            let ks: Vec<String> = resp.samples.iter().map(|s| s.component.to_string()).collect();
            println!(
                "wrote {} samples (concepts {}) to {}",
                resp.samples.len(),
                ks.join(","),
                args.out.display()
            );
        }
        Command::Serve { checkpoint, .. } => commands::serve(&cfg, &checkpoint)?,
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.to_json_line());
            ExitCode::from(e.exit_code as u8)
        }
    }
}
