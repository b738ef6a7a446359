//! Headless, deterministic replay of a scripted client session.

use std::fs;
use std::io;
use std::path::Path;

use image::RgbaImage;
use pigment_core::backend::ToyDenoiserConfig;
use pigment_core::session::BackendSet;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::gateway::Gateway;
use crate::protocol::FramePayload;
use crate::wire::{frame_bytes, png_bytes, sha256_hex, Envelope};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToyBackendSpec {
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    #[serde(default = "default_latent_size")]
    pub latent_size: usize,
}

fn default_gamma() -> f64 {
    ToyDenoiserConfig::default().gamma
}

fn default_latent_size() -> usize {
    8
}

impl Default for ToyBackendSpec {
    fn default() -> Self {
        Self {
            gamma: default_gamma(),
            latent_size: default_latent_size(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum ScriptStep {
    /// Sends a message; seq and session id are filled in by the runner.
    Send {
        #[serde(rename = "type")]
        kind: String,
        #[serde(default)]
        payload: Value,
    },
    /// Runs generation steps until the cursor reaches this step.
    AdvanceTo(usize),
    /// Runs generation steps until nothing is running.
    RunToEnd,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Script {
    #[serde(default)]
    pub backend: ToyBackendSpec,
    pub steps: Vec<ScriptStep>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    In,
    Out,
}

#[derive(Debug, Clone)]
pub struct Captured {
    pub direction: Direction,
    pub envelope: Envelope,
    /// Exact framed bytes as they would cross the wire.
    pub bytes: Vec<u8>,
}

#[derive(Debug, Default)]
pub struct ReplayOutcome {
    pub transcript: Vec<Captured>,
    pub frames: Vec<FramePayload>,
    pub final_image: Option<RgbaImage>,
}

impl ReplayOutcome {
    /// One line per frame: step, latent hash and preview hash.
    pub fn frame_hashes(&self) -> String {
        self.frames
            .iter()
            .map(|f| {
                format!(
                    "{} {} {}\n",
                    f.step,
                    f.latent_sha256,
                    sha256_hex(f.preview.as_bytes())
                )
            })
            .collect()
    }

    /// One line per envelope: direction, type, seq and hash of its framed bytes.
    pub fn transcript_hashes(&self) -> String {
        self.transcript
            .iter()
            .map(|c| {
                let dir = if c.direction == Direction::In {
                    "in"
                } else {
                    "out"
                };
                format!(
                    "{dir} {} {} {}\n",
                    c.envelope.kind,
                    c.envelope.seq,
                    sha256_hex(&c.bytes)
                )
            })
            .collect()
    }

    /// Every envelope as one JSON line.
    pub fn transcript_jsonl(&self) -> String {
        self.transcript
            .iter()
            .map(|c| {
                let line = serde_json::json!({ "dir": c.direction, "envelope": c.envelope });
                format!("{line}\n")
            })
            .collect()
    }

    pub fn write_to(&self, dir: &Path) -> io::Result<()> {
        fs::create_dir_all(dir)?;
        if let Some(img) = &self.final_image {
            fs::write(dir.join("final.png"), png_bytes(img))?;
        }
        fs::write(dir.join("frames.txt"), self.frame_hashes())?;
        fs::write(dir.join("transcript.jsonl"), self.transcript_jsonl())?;
        fs::write(dir.join("transcript.sha256"), self.transcript_hashes())?;
        Ok(())
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ReplayError {
    #[error("script: {0}")]
    Script(String),
    #[error("backend: {0}")]
    Backend(#[from] pigment_core::Error),
    #[error("protocol fault: {0}")]
    Fault(#[from] crate::protocol::Fault),
    #[error("step {index}: {message}")]
    Step { index: usize, message: String },
}

pub fn load_script(path: &Path) -> Result<Script, ReplayError> {
    let text = fs::read_to_string(path)
        .map_err(|e| ReplayError::Script(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| ReplayError::Script(e.to_string()))
}

struct Runner {
    gateway: Gateway,
    outcome: ReplayOutcome,
    session: Option<String>,
    seq: u64,
}

impl Runner {
    fn record(&mut self, direction: Direction, envelope: Envelope) {
        if direction == Direction::Out {
            match envelope.kind.as_str() {
                "ack" if envelope.payload["result"]["session_id"].is_string() => {
                    self.session = envelope.payload["result"]["session_id"]
                        .as_str()
                        .map(str::to_string);
                }
                "frame" => {
                    if let Ok(f) = serde_json::from_value(envelope.payload.clone()) {
                        self.outcome.frames.push(f);
                    }
                }
                _ => {}
            }
        }
        let bytes = frame_bytes(&envelope.to_bytes());
        self.outcome.transcript.push(Captured {
            direction,
            envelope,
            bytes,
        });
    }

    fn send(&mut self, kind: &str, payload: Value) -> Result<(), ReplayError> {
        let session_id = if kind == "open" || kind == "ping" {
            None
        } else {
            self.session.clone()
        };
        let env = Envelope::new(kind, session_id, self.seq, payload);
        self.seq += 1;
        self.record(Direction::In, env.clone());
        for reply in self.gateway.handle_message(env)? {
            self.record(Direction::Out, reply);
        }
        Ok(())
    }

    fn pump(&mut self) {
        for env in self.gateway.pump() {
            self.record(Direction::Out, env);
        }
    }

    fn cursor(&self) -> Option<usize> {
        let id = self.session.as_deref()?;
        Some(self.gateway.snapshot(id)?.generation?.cursor)
    }
}

/// Runs a script against the toy backends it names.
pub fn run_script(script: &Script) -> Result<ReplayOutcome, ReplayError> {
    let backends = BackendSet::toy(
        ToyDenoiserConfig {
            gamma: script.backend.gamma,
            ..Default::default()
        },
        script.backend.latent_size,
    )?;
    run_script_with(script, backends)
}

pub fn run_script_with(
    script: &Script,
    backends: BackendSet,
) -> Result<ReplayOutcome, ReplayError> {
    let mut runner = Runner {
        gateway: Gateway::new(backends, None),
        outcome: ReplayOutcome::default(),
        session: None,
        seq: 1,
    };
    for (index, step) in script.steps.iter().enumerate() {
        match step {
            ScriptStep::Send { kind, payload } => runner.send(kind, payload.clone())?,
            ScriptStep::AdvanceTo(target) => loop {
                match runner.cursor() {
                    Some(c) if c >= *target => break,
                    _ if !runner.gateway.is_busy() => {
                        return Err(ReplayError::Step {
                            index,
                            message: format!(
                                "generation halted at {:?} before step {target}",
                                runner.cursor()
                            ),
                        })
                    }
                    _ => runner.pump(),
                }
            },
            ScriptStep::RunToEnd => {
                while runner.gateway.is_busy() {
                    runner.pump();
                }
            }
        }
    }
    runner.outcome.final_image = runner
        .session
        .as_deref()
        .and_then(|id| runner.gateway.result_image(id));
    Ok(runner.outcome)
}
