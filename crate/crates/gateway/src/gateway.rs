//! Routes client envelopes to palette and session operations.
//!
//! A [`Gateway`] serves one client connection: it checks sequence numbers,
//! owns that client's sessions and numbers its own outbound envelopes. All
//! numeric work is delegated to `pigment_core`.

use std::collections::BTreeMap;
use std::sync::Arc;

use image::RgbaImage;
use pigment_core::latentops::{stack_layers, StencilMask};
use pigment_core::palette::{NodeId, PaletteState, Point, SelectionTarget, DEFAULT_RADIUS};
use pigment_core::scheduler::Latent;
use pigment_core::session::{
    BackendSet, Conditioning, GenerationConfig, Session, SessionInputs, SessionStatus,
};
use pigment_core::vecmix::{DirectionalAxis, PromptEmbedding};
use serde::de::DeserializeOwned;
use serde_json::{json, Value};

use crate::project::{Layer, Project, ProjectError, ProjectStore};
use crate::protocol::*;
use crate::wire::{decode_mask_png, decode_png, encode_png, sha256_hex, Envelope};

struct AxisState {
    spec: AxisSpec,
    end_a: PromptEmbedding,
    end_b: PromptEmbedding,
}

struct Workspace {
    name: String,
    palette: PaletteState,
    embeddings: BTreeMap<NodeId, PromptEmbedding>,
    axes: Vec<AxisState>,
    selection: Option<(SelectionTarget, Point)>,
    layers: Vec<Layer>,
    canvas: RgbaImage,
    config: GenerationConfig,
    session: Option<Session>,
}

type Handled = Result<Value, Rejection>;

pub struct Gateway {
    backends: BackendSet,
    store: Option<Arc<ProjectStore>>,
    sessions: BTreeMap<String, Workspace>,
    next_session: u64,
    next_in: u64,
    next_out: u64,
}

fn latent_sha(latent: &Latent) -> String {
    sha256_hex(&latent.to_le_bytes())
}

fn parse<T: DeserializeOwned>(payload: &Value) -> Result<T, Rejection> {
    let payload = if payload.is_null() {
        json!({})
    } else {
        payload.clone()
    };
    serde_json::from_value(payload).map_err(|e| Rejection::new(ErrorCode::Malformed, e.to_string()))
}

fn project_rejection(e: ProjectError) -> Rejection {
    let code = match e {
        ProjectError::InvalidId(_) => ErrorCode::BadValue,
        ProjectError::NotFound(_) => ErrorCode::NotFound,
        _ => ErrorCode::Project,
    };
    Rejection::new(code, e.to_string())
}

impl Gateway {
    pub fn new(backends: BackendSet, store: Option<Arc<ProjectStore>>) -> Self {
        Self {
            backends,
            store,
            sessions: BTreeMap::new(),
            next_session: 1,
            next_in: 1,
            next_out: 1,
        }
    }

    pub fn backends(&self) -> &BackendSet {
        &self.backends
    }

    fn emit(&mut self, kind: &str, session_id: Option<&str>, payload: Value) -> Envelope {
        let seq = self.next_out;
        self.next_out += 1;
        Envelope::new(kind, session_id.map(str::to_string), seq, payload)
    }

    fn error(&mut self, session_id: Option<&str>, ref_seq: Option<u64>, r: &Rejection) -> Envelope {
        let payload = json!({ "code": r.code, "message": r.message, "ref_seq": ref_seq });
        self.emit("error", session_id, payload)
    }

    /// Reply to a frame that did not parse as an envelope. It consumes no
    /// inbound sequence number.
    pub fn reject_malformed(&mut self, message: &str) -> Envelope {
        self.error(None, None, &Rejection::new(ErrorCode::Malformed, message))
    }

    /// Last envelope sent before a faulted connection is closed.
    pub fn fault_envelope(&mut self, fault: &Fault) -> Envelope {
        let payload = json!({ "code": "sequence", "message": fault.to_string(), "ref_seq": null });
        self.emit("error", None, payload)
    }

    /// Handles one client envelope. Sequence gaps are a [`Fault`]; every other
    /// problem becomes an `error` reply.
    pub fn handle_message(&mut self, env: Envelope) -> Result<Vec<Envelope>, Fault> {
        if env.seq != self.next_in {
            return Err(Fault::Sequence {
                expected: self.next_in,
                got: env.seq,
            });
        }
        self.next_in += 1;
        let sid = env.session_id.clone();
        let kind = env.kind.as_str();
        let outcome = match kind {
            "ping" => return Ok(vec![self.emit("pong", sid.as_deref(), json!({}))]),
            "open" => self.open(&env.payload),
            k if SESSION_SCOPED.contains(&k) => match sid.as_deref() {
                Some(id) if self.sessions.contains_key(id) => self
                    .dispatch(id, kind, &env.payload)
                    .map(|v| (id.to_string(), v)),
                _ => Err(Rejection::new(
                    ErrorCode::NoSession,
                    format!("no session {sid:?}"),
                )),
            },
            other => Err(Rejection::new(
                ErrorCode::UnknownType,
                format!("unknown message type {other:?}"),
            )),
        };
        let reply = match outcome {
            Ok((id, result)) => {
                let state_hash = if kind == "close" {
                    None
                } else {
                    Some(self.state_hash(&id))
                };
                let payload =
                    json!({ "ref_seq": env.seq, "state_hash": state_hash, "result": result });
                self.emit("ack", Some(&id), payload)
            }
            Err(r) => self.error(sid.as_deref(), Some(env.seq), &r),
        };
        Ok(vec![reply])
    }

    fn open(&mut self, payload: &Value) -> Result<(String, Value), Rejection> {
        let req: OpenReq = parse(payload)?;
        let id = format!("s{}", self.next_session);
        let (h, w) = self.backends.canvas_size();
        let mut ws = Workspace {
            name: id.clone(),
            palette: PaletteState::new(),
            embeddings: BTreeMap::new(),
            axes: Vec::new(),
            selection: None,
            layers: Vec::new(),
            canvas: RgbaImage::new(w as u32, h as u32),
            config: GenerationConfig::default(),
            session: None,
        };
        if let Some(project_id) = &req.project_id {
            let project = self.store()?.load(project_id).map_err(project_rejection)?;
            self.apply_project(&mut ws, project_id, project)?;
        }
        self.next_session += 1;
        self.sessions.insert(id.clone(), ws);
        let result = json!({
            "session_id": id,
            "backend_id": self.backends.denoiser.backend_id(),
            "canvas": [h, w],
        });
        Ok((id, result))
    }

    fn store(&self) -> Result<Arc<ProjectStore>, Rejection> {
        self.store
            .clone()
            .ok_or_else(|| Rejection::new(ErrorCode::Project, "no project store configured"))
    }

    fn ws(&mut self, id: &str) -> &mut Workspace {
        self.sessions
            .get_mut(id)
            .expect("session checked by caller")
    }

    fn dispatch(&mut self, id: &str, kind: &str, payload: &Value) -> Handled {
        match kind {
            "add_prompt" => self.add_prompt(id, parse(payload)?),
            "move_node" => {
                let req: MoveNodeReq = parse(payload)?;
                let outcome = self.ws(id).palette.contact(req.node_id, req.center)?;
                Ok(json!({ "outcome": outcome }))
            }
            "select" => {
                let req: SelectReq = parse(payload)?;
                let ws = self.ws(id);
                let point = req.point.unwrap_or_default();
                let sel = ws.palette.select(req.target, point)?;
                ws.selection = Some((req.target, point));
                Ok(serde_json::to_value(sel).expect("selection serializes"))
            }
            "add_axis" => self.add_axis(id, parse(payload)?),
            "set_axis_weight" => {
                let req: SetAxisWeightReq = parse(payload)?;
                set_axis_weight(self.ws(id), &req.id, req.weight)?;
                Ok(json!({}))
            }
            "set_canvas" => {
                let req: SetCanvasReq = parse(payload)?;
                let canvas = decode_png(&req.png)
                    .map_err(|e| Rejection::new(ErrorCode::Malformed, e.to_string()))?;
                self.check_canvas(&canvas)?;
                let ws = self.ws(id);
                ws.layers = vec![Layer {
                    id: "canvas".into(),
                    name: "Canvas".into(),
                    visible: true,
                    raster: canvas.clone(),
                }];
                ws.canvas = canvas;
                Ok(json!({}))
            }
            "start" => self.start(id, parse(payload)?),
            "intervene" => {
                let req: InterveneReq = parse(payload)?;
                self.intervene(id, req)
            }
            "stop" => self.with_session(id, |s| s.stop()),
            "resume" => self.with_session(id, |s| s.resume()),
            "rollback" => {
                let req: RollbackReq = parse(payload)?;
                let step = usize::try_from(req.step).map_err(|_| {
                    Rejection::new(ErrorCode::BadStep, format!("step {} is negative", req.step))
                })?;
                self.with_session(id, |s| s.rollback(step))
            }
            "undo" => self.with_session(id, |s| s.undo()),
            "get_state" => {
                Ok(serde_json::to_value(self.snapshot(id)).expect("snapshot serializes"))
            }
            "save_project" => {
                let req: SaveProjectReq = parse(payload)?;
                let store = self.store()?;
                let ws = self.ws(id);
                let project_id = req.project_id.unwrap_or_else(|| ws.name.clone());
                let project = Project {
                    name: project_id.clone(),
                    layers: ws.layers.clone(),
                    palette: ws.palette.clone(),
                    axes: ws.axes.iter().map(|a| a.spec.clone()).collect(),
                    config: ws.config.clone(),
                };
                store
                    .save(&project_id, &project)
                    .map_err(project_rejection)?;
                ws.name = project_id.clone();
                Ok(json!({ "project_id": project_id }))
            }
            "load_project" => {
                let req: LoadProjectReq = parse(payload)?;
                let project = self
                    .store()?
                    .load(&req.project_id)
                    .map_err(project_rejection)?;
                let mut ws = self.sessions.remove(id).expect("session checked by caller");
                let applied = self.apply_project(&mut ws, &req.project_id, project);
                self.sessions.insert(id.to_string(), ws);
                applied.map(|()| json!({ "project_id": req.project_id }))
            }
            "close" => {
                self.sessions.remove(id);
                Ok(json!({}))
            }
            _ => unreachable!("dispatch covers every session-scoped type"),
        }
    }

    fn check_canvas(&self, canvas: &RgbaImage) -> Result<(), Rejection> {
        let (h, w) = self.backends.canvas_size();
        if canvas.dimensions() != (w as u32, h as u32) {
            return Err(Rejection::new(
                ErrorCode::Shape,
                format!(
                    "canvas is {}x{}, backend needs {w}x{h}",
                    canvas.width(),
                    canvas.height()
                ),
            ));
        }
        Ok(())
    }

    fn apply_project(
        &self,
        ws: &mut Workspace,
        project_id: &str,
        project: Project,
    ) -> Result<(), Rejection> {
        let visible: Vec<&RgbaImage> = project
            .layers
            .iter()
            .filter(|l| l.visible)
            .map(|l| &l.raster)
            .collect();
        let canvas = if visible.is_empty() {
            let (h, w) = self.backends.canvas_size();
            RgbaImage::new(w as u32, h as u32)
        } else {
            stack_layers(&visible)?
        };
        self.check_canvas(&canvas)?;
        let mut embeddings = BTreeMap::new();
        for n in project.palette.nodes() {
            embeddings.insert(n.id, self.backends.embedder.embed(&n.text)?);
        }
        let mut axes = Vec::new();
        for spec in project.axes {
            axes.push(self.axis_state(spec)?);
        }
        *ws = Workspace {
            name: project_id.to_string(),
            palette: project.palette,
            embeddings,
            axes,
            selection: None,
            layers: project.layers,
            canvas,
            config: project.config,
            session: None,
        };
        Ok(())
    }

    fn axis_state(&self, spec: AxisSpec) -> Result<AxisState, Rejection> {
        if !(-1.0..=1.0).contains(&spec.weight) {
            return Err(Rejection::new(
                ErrorCode::BadWeights,
                format!("axis weight {}", spec.weight),
            ));
        }
        let end_a = self.backends.embedder.embed(&spec.end_a)?;
        let end_b = self.backends.embedder.embed(&spec.end_b)?;
        Ok(AxisState { spec, end_a, end_b })
    }

    fn add_prompt(&mut self, id: &str, req: AddPromptReq) -> Handled {
        let embedding = self.backends.embedder.embed(&req.text)?;
        let ws = self.ws(id);
        let node = ws.palette.add_node(
            req.text,
            req.color,
            req.center,
            req.radius.unwrap_or(DEFAULT_RADIUS),
        )?;
        ws.embeddings.insert(node, embedding);
        Ok(json!({ "node_id": node }))
    }

    fn add_axis(&mut self, id: &str, spec: AxisSpec) -> Handled {
        if self.ws(id).axes.iter().any(|a| a.spec.id == spec.id) {
            return Err(Rejection::new(
                ErrorCode::BadValue,
                format!("axis {:?} exists", spec.id),
            ));
        }
        let axis = self.axis_state(spec)?;
        self.ws(id).axes.push(axis);
        Ok(json!({}))
    }

    fn with_session(
        &mut self,
        id: &str,
        op: impl FnOnce(&mut Session) -> pigment_core::Result<()>,
    ) -> Handled {
        let session = self
            .ws(id)
            .session
            .as_mut()
            .ok_or_else(|| Rejection::new(ErrorCode::BadState, "no generation started"))?;
        op(session)?;
        Ok(json!({ "status": session.status(), "cursor": session.cursor() }))
    }

    fn start(&mut self, id: &str, req: StartReq) -> Handled {
        let (h, w) = self.backends.canvas_size();
        let scale = self.backends.codec.scale();
        let stencil = match &req.stencil {
            StencilSpec::Full => StencilMask::full(h, w, scale)?,
            StencilSpec::Rects(rects) => StencilMask::from_rects(h, w, scale, rects)?,
            StencilSpec::Png(png) => {
                let mask = decode_mask_png(png)
                    .map_err(|e| Rejection::new(ErrorCode::Malformed, e.to_string()))?;
                if mask.dimensions() != (w as u32, h as u32) {
                    return Err(Rejection::new(
                        ErrorCode::Shape,
                        "stencil size differs from canvas",
                    ));
                }
                StencilMask::from_luma(&mask, scale)?
            }
        };
        let unconditional = self.backends.unconditional()?;
        let backends = self.backends.clone();
        let ws = self.ws(id);
        if let Some(s) = &ws.session {
            if s.status() == SessionStatus::Running {
                return Err(Rejection::new(
                    ErrorCode::BadState,
                    "generation already running",
                ));
            }
        }
        let config = req.config.unwrap_or_else(|| ws.config.clone());
        let conditioning = conditioning(ws)?;
        let inputs = SessionInputs {
            canvas: ws.canvas.clone(),
            stencil,
            conditioning,
            unconditional,
            config: config.clone(),
            trace_masked: false,
        };
        let mut session = Session::prepare(backends.denoiser, backends.codec, inputs)?;
        session.start()?;
        ws.config = config;
        ws.session = Some(session);
        Ok(json!({ "status": SessionStatus::Running, "cursor": 0 }))
    }

    fn intervene(&mut self, id: &str, req: InterveneReq) -> Handled {
        let ws = self.ws(id);
        let status = ws.session.as_ref().map(|s| s.status());
        if !matches!(
            status,
            Some(SessionStatus::Running | SessionStatus::Stopped)
        ) {
            return Err(Rejection::new(
                ErrorCode::BadState,
                format!("cannot intervene in state {status:?}"),
            ));
        }
        // validate everything before touching the workspace
        let selection = match &req.select {
            Some(sel) => {
                let point = sel.point.unwrap_or_default();
                ws.palette.select(sel.target, point)?;
                Some((sel.target, point))
            }
            None => ws.selection,
        };
        for (axis, &w) in &req.axis_weights {
            if !ws.axes.iter().any(|a| &a.spec.id == axis) {
                return Err(Rejection::new(
                    ErrorCode::NotFound,
                    format!("no axis {axis:?}"),
                ));
            }
            if !(-1.0..=1.0).contains(&w) {
                return Err(Rejection::new(
                    ErrorCode::BadWeights,
                    format!("axis weight {w}"),
                ));
            }
        }
        let previous = (
            ws.selection,
            ws.axes.iter().map(|a| a.spec.weight).collect::<Vec<_>>(),
        );
        ws.selection = selection;
        for (axis, &w) in &req.axis_weights {
            set_axis_weight(ws, axis, w)?;
        }
        let applied = conditioning(ws).and_then(|c| {
            let session = ws.session.as_mut().expect("status checked above");
            session.intervene(c).map_err(Rejection::from)
        });
        if let Err(e) = applied {
            ws.selection = previous.0;
            for (a, w) in ws.axes.iter_mut().zip(previous.1) {
                a.spec.weight = w;
            }
            return Err(e);
        }
        let session = ws.session.as_ref().expect("status checked above");
        Ok(json!({ "status": session.status(), "cursor": session.cursor() }))
    }

    pub fn snapshot(&self, id: &str) -> Option<StateSnapshot> {
        let ws = self.sessions.get(id)?;
        let selection = ws
            .selection
            .and_then(|(target, point)| ws.palette.select(target, point).ok());
        let generation = ws.session.as_ref().map(|s| GenerationState {
            status: s.status(),
            cursor: s.cursor(),
            steps: s.config().steps,
            latent_sha256: latent_sha(s.latent()),
            path: s.path().into_iter().cloned().collect(),
        });
        Some(StateSnapshot {
            session_id: id.to_string(),
            palette: ws.palette.clone(),
            selection,
            axes: ws.axes.iter().map(|a| a.spec.clone()).collect(),
            canvas_sha256: sha256_hex(ws.canvas.as_raw()),
            generation,
        })
    }

    /// SHA-256 of the canonical JSON snapshot of a session.
    pub fn state_hash(&self, id: &str) -> String {
        let snapshot = self.snapshot(id).expect("hashing an open session");
        sha256_hex(&serde_json::to_vec(&snapshot).expect("snapshot serializes"))
    }

    /// Whether any session has steps to run.
    pub fn is_busy(&self) -> bool {
        self.sessions.values().any(|ws| {
            ws.session
                .as_ref()
                .is_some_and(|s| s.status() == SessionStatus::Running)
        })
    }

    /// Runs one step of every running session and returns the resulting
    /// `frame` envelopes, followed by `status` when a round ends or `done`
    /// when a generation finishes.
    pub fn pump(&mut self) -> Vec<Envelope> {
        let ids: Vec<String> = self.sessions.keys().cloned().collect();
        let mut out = Vec::new();
        for id in ids {
            let ws = self.ws(&id);
            let Some(session) = ws.session.as_mut() else {
                continue;
            };
            if session.status() != SessionStatus::Running {
                continue;
            }
            let step = session.step();
            let status = session.status();
            let cursor = session.cursor();
            match step {
                Ok(frame) => {
                    let preview = session
                        .composite()
                        .map(|img| encode_png(&img))
                        .unwrap_or_default();
                    let payload = FramePayload {
                        step: frame.step_index,
                        cursor,
                        status,
                        preview,
                        latent_sha256: latent_sha(&frame.latent),
                        path_point: frame.path_point,
                    };
                    let done = if status == SessionStatus::Done {
                        let image = session
                            .composite()
                            .map(|img| encode_png(&img))
                            .unwrap_or_default();
                        Some(
                            json!({ "cursor": cursor, "image": image, "latent_sha256": latent_sha(session.latent()) }),
                        )
                    } else {
                        None
                    };
                    let frame = self.emit(
                        "frame",
                        Some(&id),
                        serde_json::to_value(payload).expect("frame serializes"),
                    );
                    out.push(frame);
                    match done {
                        Some(d) => out.push(self.emit("done", Some(&id), d)),
                        None if status == SessionStatus::Stopped => out.push(self.emit(
                            "status",
                            Some(&id),
                            json!({ "status": status, "cursor": cursor }),
                        )),
                        None => {}
                    }
                }
                Err(e) => {
                    let r = Rejection::from(e);
                    let err = self.error(Some(&id), None, &r);
                    out.push(err);
                    out.push(self.emit(
                        "status",
                        Some(&id),
                        json!({ "status": status, "cursor": cursor }),
                    ));
                }
            }
        }
        out
    }

    /// Final composite of a session's generation, if it has one.
    pub fn result_image(&self, id: &str) -> Option<RgbaImage> {
        self.sessions.get(id)?.session.as_ref()?.composite().ok()
    }

    pub fn session_ids(&self) -> Vec<String> {
        self.sessions.keys().cloned().collect()
    }
}

fn set_axis_weight(ws: &mut Workspace, axis: &str, weight: f64) -> Result<(), Rejection> {
    if !(-1.0..=1.0).contains(&weight) {
        return Err(Rejection::new(
            ErrorCode::BadWeights,
            format!("axis weight {weight}"),
        ));
    }
    let a = ws
        .axes
        .iter_mut()
        .find(|a| a.spec.id == axis)
        .ok_or_else(|| Rejection::new(ErrorCode::NotFound, format!("no axis {axis:?}")))?;
    a.spec.weight = weight;
    Ok(())
}

fn conditioning(ws: &Workspace) -> Result<Conditioning, Rejection> {
    let (target, point) = ws
        .selection
        .ok_or_else(|| Rejection::new(ErrorCode::BadState, "nothing selected on the palette"))?;
    let selection = ws.palette.select(target, point)?;
    let mut prompts = Vec::new();
    let mut colors = Vec::new();
    for id in &selection.node_ids {
        prompts.push(
            ws.embeddings
                .get(id)
                .cloned()
                .ok_or(pigment_core::Error::UnknownNode(id.0))?,
        );
        colors.push(ws.palette.node(*id)?.color);
    }
    let axes = ws
        .axes
        .iter()
        .map(|a| DirectionalAxis {
            id: a.spec.id.clone(),
            end_a: a.end_a.clone(),
            end_b: a.end_b.clone(),
            weight: a.spec.weight,
            color_a: a.spec.color_a,
            color_b: a.spec.color_b,
        })
        .collect();
    Ok(Conditioning {
        selection,
        prompts,
        colors,
        axes,
    })
}
