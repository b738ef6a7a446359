use std::path::PathBuf;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use pigment_charbench::plan::{Condition, SweepPlan};
use pigment_charbench::report::{similarity_trends, write_outputs};
use pigment_charbench::run_sweep;
use pigment_core::backend::ToyDenoiserConfig;
use pigment_core::session::BackendSet;
use serde_json::json;

#[derive(Parser)]
#[command(
    name = "charbench",
    version,
    about = "Characterization sweeps over steering mechanisms"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum BackendKind {
    Toy,
    Remote,
}

#[derive(Subcommand)]
enum Command {
    /// Run a sweep plan and write records.csv plus image pairs.
    Run {
        #[arg(long, env = "CHARBENCH_SPEC")]
        spec: PathBuf,
        #[arg(long, env = "CHARBENCH_OUT")]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "toy", env = "CHARBENCH_BACKEND")]
        backend: BackendKind,
        /// Model server address for `--backend remote`.
        #[arg(long, env = "CHARBENCH_BACKEND_URL")]
        backend_url: Option<String>,
        #[arg(long, default_value_t = 30_000, env = "CHARBENCH_TIMEOUT_MS")]
        timeout_ms: u64,
    },
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Run {
            spec,
            out,
            backend,
            backend_url,
            timeout_ms,
        } => {
            let plan =
                SweepPlan::load(&spec).with_context(|| format!("loading {}", spec.display()))?;
            let backends = match backend {
                BackendKind::Toy => BackendSet::toy(
                    ToyDenoiserConfig {
                        gamma: plan.toy.gamma,
                        ..ToyDenoiserConfig::default()
                    },
                    plan.toy.latent_size,
                )?,
                BackendKind::Remote => {
                    let Some(url) = backend_url else {
                        bail!("--backend remote needs --backend-url");
                    };
                    pigment_gateway::remote::connect_remote(
                        &url,
                        Duration::from_millis(timeout_ms),
                    )?
                }
            };
            let records = run_sweep(&plan, &backends)?;
            write_outputs(&records, &out).with_context(|| format!("writing {}", out.display()))?;
            let trends: Vec<_> = [Condition::Intervention, Condition::Stencil]
                .into_iter()
                .flat_map(|c| similarity_trends(&records, c))
                .collect();
            let summary = json!({
                "records": records.len(),
                "errors": records.iter().filter(|r| r.result.is_err()).count(),
                "trend_series": trends.len(),
                "trend_holds": trends.iter().filter(|t| t.holds()).count(),
                "out": out,
            });
            println!("{summary}");
        }
    }
    Ok(())
}
