//! Message vocabulary of the client session protocol.

use std::collections::BTreeMap;
use std::fmt;

use pigment_core::color::Rgb;
use pigment_core::palette::{NodeId, PathPoint, Point, Selection, SelectionTarget};
use pigment_core::session::{GenerationConfig, SessionStatus};
use pigment_core::Error as CoreError;
use serde::{Deserialize, Serialize};

/// Client message types that need an open session.
pub const SESSION_SCOPED: &[&str] = &[
    "add_prompt",
    "move_node",
    "select",
    "add_axis",
    "set_axis_weight",
    "set_canvas",
    "start",
    "intervene",
    "stop",
    "resume",
    "rollback",
    "undo",
    "get_state",
    "save_project",
    "load_project",
    "close",
];

/// Machine-readable error codes carried by `error` envelopes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorCode {
    Malformed,
    UnknownType,
    NoSession,
    NotFound,
    BadStep,
    BadState,
    BadWeights,
    BadValue,
    EmptyStencil,
    Shape,
    Backend,
    Project,
}

impl fmt::Display for ErrorCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let v = serde_json::to_value(self).expect("codes serialize");
        f.write_str(v.as_str().expect("codes are strings"))
    }
}

/// A rejected message, reported to the client without dropping the
/// connection.
#[derive(Debug, Clone, PartialEq)]
pub struct Rejection {
    pub code: ErrorCode,
    pub message: String,
}

impl Rejection {
    pub fn new(code: ErrorCode, message: impl Into<String>) -> Self {
        Self {
            code,
            message: message.into(),
        }
    }
}

impl From<CoreError> for Rejection {
    fn from(e: CoreError) -> Self {
        let code = match &e {
            CoreError::ShapeMismatch { .. } => ErrorCode::Shape,
            CoreError::InvalidWeights(_) => ErrorCode::BadWeights,
            CoreError::OutOfRange { what, .. } if what.contains("weight") => ErrorCode::BadWeights,
            CoreError::OutOfRange { what, .. } if what.contains("step") => ErrorCode::BadStep,
            CoreError::OutOfRange { .. } | CoreError::NonFinite(_) => ErrorCode::BadValue,
            CoreError::EmptyStencil => ErrorCode::EmptyStencil,
            CoreError::IllegalTransition { .. } => ErrorCode::BadState,
            CoreError::UnknownNode(_) | CoreError::UnknownGroup(_) => ErrorCode::NotFound,
            CoreError::Transport(_) | CoreError::Timeout | CoreError::Contract(_) => {
                ErrorCode::Backend
            }
        };
        Self::new(code, e.to_string())
    }
}

/// Protocol violation that ends the connection.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Fault {
    #[error("sequence number {got}, expected {expected}")]
    Sequence { expected: u64, got: u64 },
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OpenReq {
    /// Project to load into the new session.
    #[serde(default)]
    pub project_id: Option<String>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AddPromptReq {
    pub text: String,
    pub color: Rgb,
    pub center: Point,
    #[serde(default)]
    pub radius: Option<f64>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MoveNodeReq {
    pub node_id: NodeId,
    pub center: Point,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SelectReq {
    pub target: SelectionTarget,
    #[serde(default)]
    pub point: Option<Point>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct AxisSpec {
    pub id: String,
    pub end_a: String,
    pub end_b: String,
    pub color_a: Rgb,
    pub color_b: Rgb,
    #[serde(default)]
    pub weight: f64,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SetAxisWeightReq {
    pub id: String,
    pub weight: f64,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SetCanvasReq {
    /// Base64 PNG at the backend's canvas size.
    pub png: String,
}

/// Where generation may write.
#[derive(Debug, Clone, Deserialize, Serialize, PartialEq)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum StencilSpec {
    /// Whole canvas.
    Full,
    /// Base64 PNG mask; any nonzero pixel is stenciled.
    Png(String),
    /// Union of `[x, y, w, h]` rectangles in canvas pixels.
    Rects(Vec<[usize; 4]>),
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StartReq {
    pub stencil: StencilSpec,
    #[serde(default)]
    pub config: Option<GenerationConfig>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InterveneReq {
    #[serde(default)]
    pub select: Option<SelectReq>,
    #[serde(default)]
    pub axis_weights: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RollbackReq {
    pub step: i64,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SaveProjectReq {
    #[serde(default)]
    pub project_id: Option<String>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoadProjectReq {
    pub project_id: String,
}

/// Payload of a `frame` envelope.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct FramePayload {
    pub step: usize,
    pub cursor: usize,
    pub status: SessionStatus,
    /// Base64 PNG of the current result composited onto the canvas.
    pub preview: String,
    pub latent_sha256: String,
    pub path_point: PathPoint,
}

/// Snapshot reported by `get_state` and hashed into every ack.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct StateSnapshot {
    pub session_id: String,
    pub palette: pigment_core::palette::PaletteState,
    pub selection: Option<Selection>,
    pub axes: Vec<AxisSpec>,
    pub canvas_sha256: String,
    pub generation: Option<GenerationState>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct GenerationState {
    pub status: SessionStatus,
    pub cursor: usize,
    pub steps: usize,
    pub latent_sha256: String,
    pub path: Vec<PathPoint>,
}
