use std::net::TcpListener;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use pigment_core::backend::ToyDenoiserConfig;
use pigment_core::session::BackendSet;
use pigment_gateway::project::{load_file, ProjectStore};
use pigment_gateway::replay::{load_script, run_script};
use pigment_gateway::{remote, server};
use serde_json::json;

#[derive(Parser)]
#[command(
    name = "pigment",
    version,
    about = "Steerable diffusion session server"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Serve the client session protocol.
    Serve(ServeArgs),
    /// Run a scripted session headlessly and write its outputs.
    Replay(ReplayArgs),
    /// Summarize a project archive.
    Inspect {
        #[arg(env = "PIGMENT_INSPECT")]
        project: PathBuf,
    },
    /// Serve the toy model over the backend protocol.
    ServeBackend(ServeBackendArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum BackendKind {
    Toy,
    Remote,
}

#[derive(Args)]
struct ToyArgs {
    /// Relaxation rate of the toy denoiser.
    #[arg(long, env = "PIGMENT_GAMMA", default_value_t = 0.3)]
    gamma: f64,
    /// Latent height and width; canvases are 8x larger.
    #[arg(long, env = "PIGMENT_LATENT_SIZE", default_value_t = 8)]
    latent_size: usize,
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long, env = "PIGMENT_LISTEN", default_value = "127.0.0.1:7878")]
    listen: String,
    #[arg(long, value_enum, env = "PIGMENT_BACKEND", default_value = "toy")]
    backend: BackendKind,
    /// Model server address for `--backend remote`.
    #[arg(long, env = "PIGMENT_BACKEND_URL")]
    backend_url: Option<String>,
    /// Per-request timeout for the model server.
    #[arg(long, env = "PIGMENT_TIMEOUT_MS", default_value_t = 30_000)]
    timeout_ms: u64,
    /// Directory holding project archives.
    #[arg(long, env = "PIGMENT_PROJECTS")]
    projects: Option<PathBuf>,
    #[command(flatten)]
    toy: ToyArgs,
}

#[derive(Args)]
struct ReplayArgs {
    #[arg(env = "PIGMENT_REPLAY_SCRIPT")]
    script: PathBuf,
    #[arg(long, env = "PIGMENT_REPLAY_OUT", default_value = "replay-out")]
    out: PathBuf,
}

#[derive(Args)]
struct ServeBackendArgs {
    #[arg(long, env = "PIGMENT_BACKEND_LISTEN", default_value = "127.0.0.1:7879")]
    listen: String,
    #[command(flatten)]
    toy: ToyArgs,
}

fn toy_backends(args: &ToyArgs) -> Result<BackendSet> {
    let config = ToyDenoiserConfig {
        gamma: args.gamma,
        ..Default::default()
    };
    Ok(BackendSet::toy(config, args.latent_size)?)
}

fn main() -> Result<()> {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::from_default_env())
        .with_writer(std::io::stderr)
        .init();
    match Cli::parse().command {
        Command::Serve(args) => {
            let backends = match args.backend {
                BackendKind::Toy => toy_backends(&args.toy)?,
                BackendKind::Remote => {
                    let Some(url) = &args.backend_url else {
                        bail!("--backend remote needs --backend-url");
                    };
                    remote::connect_remote(url, Duration::from_millis(args.timeout_ms))
                        .with_context(|| format!("connecting to model server {url}"))?
                }
            };
            let store = args
                .projects
                .map(|dir| ProjectStore::open(dir).map(Arc::new))
                .transpose()?;
            let listener = TcpListener::bind(&args.listen)
                .with_context(|| format!("binding {}", args.listen))?;
            server::serve(listener, server::ServerConfig { backends, store });
            Ok(())
        }
        Command::Replay(args) => {
            let script = load_script(&args.script)?;
            let outcome = run_script(&script)?;
            outcome.write_to(&args.out)?;
            let errors = outcome
                .transcript
                .iter()
                .filter(|c| c.envelope.kind == "error")
                .count();
            println!(
                "{}",
                json!({
                    "frames": outcome.frames.len(),
                    "errors": errors,
                    "final_latent_sha256": outcome.frames.last().map(|f| f.latent_sha256.clone()),
                    "out": args.out,
                })
            );
            Ok(())
        }
        Command::Inspect { project } => {
            let p =
                load_file(&project).with_context(|| format!("reading {}", project.display()))?;
            let summary = json!({
                "name": p.name,
                "layers": p.layers.iter().map(|l| json!({
                    "id": l.id,
                    "name": l.name,
                    "visible": l.visible,
                    "size": [l.raster.width(), l.raster.height()],
                })).collect::<Vec<_>>(),
                "prompts": p.palette.nodes(),
                "groups": p.palette.groups(),
                "axes": p.axes,
                "config": p.config,
            });
            println!("{}", serde_json::to_string_pretty(&summary)?);
            Ok(())
        }
        Command::ServeBackend(args) => {
            let backends = toy_backends(&args.toy)?;
            let listener = TcpListener::bind(&args.listen)
                .with_context(|| format!("binding {}", args.listen))?;
            remote::serve_backend(listener, backends);
            Ok(())
        }
    }
}
