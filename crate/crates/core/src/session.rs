//! The steerable generation session.
//!
//! A session owns one diffusion run: it masks, denoises and steps the latent
//! one step at a time, records every executed step in a linear timeline, and
//! supports stop/resume, conditioning changes between steps and rollback to
//! any recorded step.
//!
//! Invariants:
//! - the session is only ever observed at a step boundary; a failed step
//!   leaves the timeline, latent and rng untouched;
//! - `entries[k]` records the step that took the latent from step `k` to
//!   `k + 1`; entries past the cursor stay addressable until a new step
//!   overwrites that branch;
//! - replaying the same seeds, config and conditioning script reproduces
//!   every recorded latent bit for bit.

use std::fmt;
use std::sync::Arc;

use image::RgbaImage;
use serde::{Deserialize, Serialize};

use crate::backend::{
    cfg_combine, Denoiser, RemoteBackend, ToyDenoiser, ToyDenoiserConfig, Transport,
    DEFAULT_GUIDE_SCALE,
};
use crate::color::Rgb;
use crate::error::{out_of_range, Error, Result};
use crate::latentops::{
    classify_regions, composite, filled_mask, finalize, flatten_on_white, mask_step, Codec,
    OvercoatConfig, RegionMap, StencilMask, ToyCodec,
};
use crate::palette::{PathPoint, Selection, SelectionTarget};
use crate::rng::{RngCheckpoint, SeededStream};
use crate::scheduler::{Latent, NoiseSchedule};
use crate::vecmix::{
    compose, interpolate, DirectionalAxis, Embedder, GuidanceVector, PromptEmbedding, ToyEmbedder,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenerationConfig {
    pub steps: usize,
    pub guide_scale: f64,
    /// Overcoat percentage in `[0, 100]`.
    pub overcoat: f64,
    /// Steps per round; `None` runs the whole generation in one round.
    pub single_stroke: Option<usize>,
    pub init_seed: u64,
    pub overcoat_seed: u64,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        Self {
            steps: 50,
            guide_scale: DEFAULT_GUIDE_SCALE,
            overcoat: 50.0,
            single_stroke: None,
            init_seed: 0,
            overcoat_seed: 1,
        }
    }
}

impl GenerationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(out_of_range("steps", self.steps));
        }
        if !(self.guide_scale >= 0.0 && self.guide_scale.is_finite()) {
            return Err(out_of_range("guide scale", self.guide_scale));
        }
        OvercoatConfig::new(self.overcoat, self.overcoat_seed)?;
        if let Some(n) = self.single_stroke {
            if n == 0 || n > self.steps {
                return Err(out_of_range("single stroke", n));
            }
        }
        Ok(())
    }

    pub fn round_len(&self) -> usize {
        self.single_stroke.unwrap_or(self.steps)
    }
}

/// Selected prompts with their embeddings and display colors, plus the
/// directional sliders in effect.
#[derive(Debug, Clone, PartialEq)]
pub struct Conditioning {
    pub selection: Selection,
    /// One embedding per selected node, in selection order.
    pub prompts: Vec<PromptEmbedding>,
    pub colors: Vec<Rgb>,
    pub axes: Vec<DirectionalAxis>,
}

impl Conditioning {
    /// A single prompt with no sliders.
    pub fn single(prompt: PromptEmbedding, color: Rgb) -> Self {
        Self {
            selection: Selection {
                target: SelectionTarget::Node(crate::palette::NodeId(0)),
                node_ids: vec![crate::palette::NodeId(0)],
                point: Default::default(),
                weights: crate::vecmix::MixWeights::single(),
            },
            prompts: vec![prompt],
            colors: vec![color],
            axes: Vec::new(),
        }
    }

    /// Mixes the selected prompts, then applies the sliders.
    pub fn guidance(&self) -> Result<GuidanceVector> {
        if self.colors.len() != self.prompts.len() {
            return Err(Error::InvalidWeights(format!(
                "{} colors for {} prompts",
                self.colors.len(),
                self.prompts.len()
            )));
        }
        let base = interpolate(&self.prompts, &self.selection.weights)?;
        compose(&base, Some(&self.selection.weights), &self.axes)
    }

    fn path_point(&self, step_index: usize) -> PathPoint {
        PathPoint::capture(step_index, &self.selection, &self.colors, &self.axes)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SessionStatus {
    Idle,
    Running,
    Stopped,
    Done,
}

impl fmt::Display for SessionStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SessionStatus::Idle => "idle",
            SessionStatus::Running => "running",
            SessionStatus::Stopped => "stopped",
            SessionStatus::Done => "done",
        })
    }
}

#[derive(Debug, Clone)]
pub struct TimelineEntry {
    pub step_index: usize,
    pub guidance: Arc<GuidanceVector>,
    /// Overcoat stream position before the step's draws.
    pub rng_checkpoint: RngCheckpoint,
    pub rng_after: RngCheckpoint,
    pub latent_after: Arc<Latent>,
    pub path_point: PathPoint,
    /// Latent handed to the denoiser, kept only when tracing is enabled.
    pub masked_input: Option<Arc<Latent>>,
}

/// Emitted once per executed step.
#[derive(Debug, Clone)]
pub struct Frame {
    pub step_index: usize,
    pub latent: Arc<Latent>,
    pub path_point: PathPoint,
    pub status: SessionStatus,
}

pub struct SessionInputs {
    pub canvas: RgbaImage,
    pub stencil: StencilMask,
    pub conditioning: Conditioning,
    /// Embedding of the empty prompt.
    pub unconditional: PromptEmbedding,
    pub config: GenerationConfig,
    /// Keep the post-mask latent of every step in the timeline.
    pub trace_masked: bool,
}

pub struct Session {
    denoiser: Arc<dyn Denoiser>,
    codec: Arc<dyn Codec>,
    schedule: NoiseSchedule,
    config: GenerationConfig,
    overcoat: OvercoatConfig,
    uncond: Arc<GuidanceVector>,
    conditioning: Conditioning,
    cond: Arc<GuidanceVector>,
    prior_canvas: RgbaImage,
    stencil: StencilMask,
    regions: RegionMap,
    content: Latent,
    initial: Arc<Latent>,
    latent: Arc<Latent>,
    rng: SeededStream,
    entries: Vec<TimelineEntry>,
    cursor: usize,
    status: SessionStatus,
    round_left: usize,
    trace_masked: bool,
}

impl fmt::Debug for Session {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Session")
            .field("backend", &self.denoiser.backend_id())
            .field("status", &self.status)
            .field("cursor", &self.cursor)
            .field("recorded", &self.entries.len())
            .finish()
    }
}

/// Builds a session and starts it.
pub fn start_generation(
    denoiser: Arc<dyn Denoiser>,
    codec: Arc<dyn Codec>,
    inputs: SessionInputs,
) -> Result<Session> {
    let mut s = Session::prepare(denoiser, codec, inputs)?;
    s.start()?;
    Ok(s)
}

impl Session {
    /// Validates inputs and seeds the initial latent; the session starts idle.
    pub fn prepare(
        denoiser: Arc<dyn Denoiser>,
        codec: Arc<dyn Codec>,
        inputs: SessionInputs,
    ) -> Result<Self> {
        let SessionInputs {
            canvas,
            stencil,
            conditioning,
            unconditional,
            config,
            trace_masked,
        } = inputs;
        config.validate()?;
        if stencil.is_empty() {
            return Err(Error::EmptyStencil);
        }
        let shape = denoiser.latent_shape();
        let f = codec.scale();
        let expected = [shape.1 * f, shape.2 * f];
        let found = [canvas.height() as usize, canvas.width() as usize];
        if expected != found || shape.0 != codec.channels() {
            return Err(Error::ShapeMismatch {
                expected: expected.to_vec(),
                found: found.to_vec(),
            });
        }
        let regions = classify_regions(&filled_mask(&canvas), &stencil)?;
        let content = codec.encode(&flatten_on_white(&canvas))?;
        let uncond = GuidanceVector::from_embedding(&unconditional);
        let cond = conditioning.guidance()?;
        if cond.shape() != uncond.shape() {
            return Err(Error::ShapeMismatch {
                expected: vec![uncond.shape().0, uncond.shape().1],
                found: vec![cond.shape().0, cond.shape().1],
            });
        }
        let schedule = NoiseSchedule::new(config.steps)?;
        let initial = Arc::new(Latent::gaussian(
            shape,
            &mut SeededStream::new(config.init_seed),
        ));
        Ok(Self {
            overcoat: OvercoatConfig::new(config.overcoat, config.overcoat_seed)?,
            rng: SeededStream::new(config.overcoat_seed),
            round_left: config.round_len(),
            denoiser,
            codec,
            schedule,
            config,
            uncond: Arc::new(uncond),
            conditioning,
            cond: Arc::new(cond),
            prior_canvas: canvas,
            stencil,
            regions,
            content,
            latent: initial.clone(),
            initial,
            entries: Vec::new(),
            cursor: 0,
            status: SessionStatus::Idle,
            trace_masked,
        })
    }

    fn illegal(&self, op: &'static str) -> Error {
        Error::IllegalTransition {
            op,
            status: self.status.to_string(),
        }
    }

    pub fn start(&mut self) -> Result<()> {
        if self.status != SessionStatus::Idle {
            return Err(self.illegal("start"));
        }
        self.status = SessionStatus::Running;
        self.round_left = self.config.round_len();
        Ok(())
    }

    /// Executes one denoising step. On error nothing is committed and a
    /// running session is stopped at its last good step.
    pub fn step(&mut self) -> Result<Frame> {
        if self.status != SessionStatus::Running {
            return Err(self.illegal("step"));
        }
        match self.compute_step() {
            Ok(frame) => Ok(frame),
            Err(e) => {
                self.status = SessionStatus::Stopped;
                Err(e)
            }
        }
    }

    fn compute_step(&mut self) -> Result<Frame> {
        let k = self.cursor;
        let total = self.schedule.inference_steps();
        let mut rng = self.rng.clone();
        let checkpoint = rng.checkpoint();
        let masked = mask_step(
            &self.latent,
            &self.content,
            &self.regions,
            k,
            &self.overcoat,
            &self.schedule,
            &mut rng,
        )?;
        let t = self.schedule.timestep(k)?;
        let scale = self.config.guide_scale;
        let eps = if scale == 1.0 {
            self.denoiser.predict(&masked, t, &self.cond)?
        } else {
            let eps_u = self.denoiser.predict(&masked, t, &self.uncond)?;
            let eps_c = self.denoiser.predict(&masked, t, &self.cond)?;
            cfg_combine(&eps_u, &eps_c, scale)?
        };
        let mut next = self.schedule.ddim_step(&masked, &eps, k)?;
        if k + 1 == total {
            next = finalize(&next, &self.content, &self.regions, &self.overcoat, total)?;
        }

        // commit
        let next = Arc::new(next);
        let path_point = self.conditioning.path_point(k);
        self.entries.truncate(k);
        self.entries.push(TimelineEntry {
            step_index: k,
            guidance: self.cond.clone(),
            rng_checkpoint: checkpoint,
            rng_after: rng.checkpoint(),
            latent_after: next.clone(),
            path_point: path_point.clone(),
            masked_input: self.trace_masked.then(|| Arc::new(masked)),
        });
        self.rng = rng;
        self.latent = next.clone();
        self.cursor = k + 1;
        self.round_left = self.round_left.saturating_sub(1);
        if self.cursor == total {
            self.status = SessionStatus::Done;
        } else if self.round_left == 0 {
            self.status = SessionStatus::Stopped;
        }
        Ok(Frame {
            step_index: k,
            latent: next,
            path_point,
            status: self.status,
        })
    }

    /// Runs steps until the current round ends, the generation finishes or
    /// a step fails. Frames of completed steps are returned alongside any
    /// error.
    pub fn run_round(&mut self) -> (Vec<Frame>, Option<Error>) {
        let mut frames = Vec::new();
        while self.status == SessionStatus::Running {
            match self.step() {
                Ok(f) => frames.push(f),
                Err(e) => return (frames, Some(e)),
            }
        }
        (frames, None)
    }

    /// Keeps resuming rounds until the generation is done.
    pub fn run_to_end(&mut self) -> Result<Vec<Frame>> {
        let mut frames = Vec::new();
        loop {
            match self.status {
                SessionStatus::Done => return Ok(frames),
                SessionStatus::Stopped => self.resume()?,
                SessionStatus::Idle => self.start()?,
                SessionStatus::Running => {}
            }
            let (mut f, err) = self.run_round();
            frames.append(&mut f);
            if let Some(e) = err {
                return Err(e);
            }
        }
    }

    /// Replaces the conditioning from the next step on.
    pub fn intervene(&mut self, conditioning: Conditioning) -> Result<()> {
        if !matches!(self.status, SessionStatus::Running | SessionStatus::Stopped) {
            return Err(self.illegal("intervene"));
        }
        let cond = conditioning.guidance()?;
        if cond.shape() != self.uncond.shape() {
            return Err(Error::ShapeMismatch {
                expected: vec![self.uncond.shape().0, self.uncond.shape().1],
                found: vec![cond.shape().0, cond.shape().1],
            });
        }
        if cond != *self.cond {
            self.cond = Arc::new(cond);
        }
        self.conditioning = conditioning;
        Ok(())
    }

    pub fn stop(&mut self) -> Result<()> {
        if self.status != SessionStatus::Running {
            return Err(self.illegal("stop"));
        }
        self.status = SessionStatus::Stopped;
        Ok(())
    }

    pub fn resume(&mut self) -> Result<()> {
        if self.status != SessionStatus::Stopped {
            return Err(self.illegal("resume"));
        }
        self.status = SessionStatus::Running;
        self.round_left = self.config.round_len();
        Ok(())
    }

    /// Moves the cursor back (or forward along the retained branch) to step
    /// `k` and restores the rng stream position recorded there.
    pub fn rollback(&mut self, k: usize) -> Result<()> {
        if !matches!(self.status, SessionStatus::Stopped | SessionStatus::Done) {
            return Err(self.illegal("rollback"));
        }
        if k > self.entries.len() {
            return Err(out_of_range("rollback step", k));
        }
        if k == self.cursor {
            return Ok(());
        }
        let checkpoint = match self.entries.get(k) {
            Some(e) => e.rng_checkpoint,
            None => self.entries[k - 1].rng_after,
        };
        self.rng = SeededStream::restore(checkpoint);
        self.latent = self.latent_at(k).expect("k within recorded range");
        self.cursor = k;
        self.status = if k == self.schedule.inference_steps() {
            SessionStatus::Done
        } else {
            SessionStatus::Stopped
        };
        Ok(())
    }

    /// Rolls back a single step.
    pub fn undo(&mut self) -> Result<()> {
        if self.cursor == 0 {
            return Err(out_of_range("rollback step", -1));
        }
        self.rollback(self.cursor - 1)
    }

    /// Latent at step `k` (0 is the seeded noise).
    pub fn latent_at(&self, k: usize) -> Option<Arc<Latent>> {
        match k {
            0 => Some(self.initial.clone()),
            _ => self.entries.get(k - 1).map(|e| e.latent_after.clone()),
        }
    }

    /// Decodes the current latent and writes it into the stenciled pixels of
    /// the prior canvas.
    pub fn composite(&self) -> Result<RgbaImage> {
        composite(
            &self.latent,
            self.codec.as_ref(),
            &self.stencil,
            &self.prior_canvas,
        )
    }

    pub fn preview(&self, latent: &Latent) -> RgbaImage {
        self.codec.decode(latent)
    }

    pub fn status(&self) -> SessionStatus {
        self.status
    }

    pub fn cursor(&self) -> usize {
        self.cursor
    }

    pub fn latent(&self) -> &Arc<Latent> {
        &self.latent
    }

    pub fn entries(&self) -> &[TimelineEntry] {
        &self.entries
    }

    /// Path points of every recorded step, including the retained branch
    /// past the cursor.
    pub fn path(&self) -> Vec<&PathPoint> {
        self.entries.iter().map(|e| &e.path_point).collect()
    }

    pub fn config(&self) -> &GenerationConfig {
        &self.config
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    pub fn regions(&self) -> &RegionMap {
        &self.regions
    }

    /// Encoded prior canvas (empty pixels rendered white).
    pub fn content(&self) -> &Latent {
        &self.content
    }

    pub fn overcoat(&self) -> &OvercoatConfig {
        &self.overcoat
    }

    pub fn conditioning(&self) -> &Conditioning {
        &self.conditioning
    }

    pub fn guidance(&self) -> &Arc<GuidanceVector> {
        &self.cond
    }

    pub fn unconditional(&self) -> &Arc<GuidanceVector> {
        &self.uncond
    }

    pub fn stencil(&self) -> &StencilMask {
        &self.stencil
    }

    pub fn prior_canvas(&self) -> &RgbaImage {
        &self.prior_canvas
    }
}

/// Embedder, denoiser and codec used together by one session.
#[derive(Clone)]
pub struct BackendSet {
    pub embedder: Arc<dyn Embedder>,
    pub denoiser: Arc<dyn Denoiser>,
    pub codec: Arc<dyn Codec>,
}

impl fmt::Debug for BackendSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("BackendSet")
            .field("embedder", &self.embedder.id())
            .field("denoiser", &self.denoiser.backend_id())
            .finish()
    }
}

impl BackendSet {
    /// Toy embedder and codec with the relaxation denoiser on a square
    /// `latent_size` latent.
    pub fn toy(config: ToyDenoiserConfig, latent_size: usize) -> Result<Self> {
        let embedder = ToyEmbedder::default();
        let denoiser = ToyDenoiser::new(config, embedder.shape(), (3, latent_size, latent_size))?;
        Ok(Self {
            embedder: Arc::new(embedder),
            denoiser: Arc::new(denoiser),
            codec: Arc::new(ToyCodec),
        })
    }

    /// A model server reached through `transport`, decoded with the toy codec.
    pub fn remote(transport: Arc<dyn Transport>) -> Result<Self> {
        let remote = Arc::new(RemoteBackend::connect(transport)?);
        Ok(Self {
            embedder: remote.clone(),
            denoiser: remote,
            codec: Arc::new(ToyCodec),
        })
    }

    /// `(height, width)` of canvases this set generates into.
    pub fn canvas_size(&self) -> (usize, usize) {
        let (_, h, w) = self.denoiser.latent_shape();
        let f = self.codec.scale();
        (h * f, w * f)
    }

    pub fn unconditional(&self) -> Result<PromptEmbedding> {
        self.embedder.embed("")
    }

    /// Conditioning on a single prompt.
    pub fn single_prompt(&self, text: &str, color: Rgb) -> Result<Conditioning> {
        Ok(Conditioning::single(self.embedder.embed(text)?, color))
    }
}
