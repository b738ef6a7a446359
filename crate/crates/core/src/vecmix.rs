//! Prompt-embedding algebra: weighted mixing of prompt vectors, directional
//! vectors between two end prompts, and composition of the final guidance
//! vector fed to the denoiser.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::color::Rgb;
use crate::error::{out_of_range, Error, Result};
use crate::rng::{stable_hash64, SeededStream};

/// Maximum number of prompts that can be mixed on the palette.
pub const MAX_MIX: usize = 3;

/// Tolerance on the sum of mix weights.
pub const WEIGHT_SUM_TOL: f64 = 1e-9;

/// Encoded prompt: `[slots, channels]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptEmbedding {
    data: Array2<f64>,
    pub source_text: String,
    pub embedder_id: String,
}

impl PromptEmbedding {
    pub fn new(
        data: Array2<f64>,
        source_text: impl Into<String>,
        embedder_id: impl Into<String>,
    ) -> Result<Self> {
        let (s, d) = data.dim();
        if s == 0 || d == 0 {
            return Err(Error::ShapeMismatch {
                expected: vec![1, 1],
                found: vec![s, d],
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("prompt embedding"));
        }
        Ok(Self {
            data,
            source_text: source_text.into(),
            embedder_id: embedder_id.into(),
        })
    }

    pub fn data(&self) -> &Array2<f64> {
        &self.data
    }

    pub fn shape(&self) -> (usize, usize) {
        self.data.dim()
    }
}

/// Converts prompt text into embeddings of a fixed declared shape.
pub trait Embedder: Send + Sync {
    fn id(&self) -> &str;

    /// Declared `(slots, channels)`.
    fn shape(&self) -> (usize, usize);

    /// The empty string is the unconditional prompt.
    fn embed(&self, text: &str) -> Result<PromptEmbedding>;
}

/// Deterministic hash-seeded embedder for tests and desk-scale runs.
///
/// Each text seeds its own stream with [`stable_hash64`]; the stream yields
/// `slots * channels` standard normals in row-major order, and every row is
/// then scaled to unit L2 norm.
#[derive(Debug, Clone)]
pub struct ToyEmbedder {
    id: String,
    slots: usize,
    channels: usize,
}

impl ToyEmbedder {
    pub const DEFAULT_SLOTS: usize = 1;
    pub const DEFAULT_CHANNELS: usize = 64;

    pub fn new(slots: usize, channels: usize) -> Self {
        assert!(
            slots > 0 && channels > 0,
            "toy embedder shape must be non-empty"
        );
        Self {
            id: format!("toy-embed-{slots}x{channels}"),
            slots,
            channels,
        }
    }
}

impl Default for ToyEmbedder {
    fn default() -> Self {
        Self::new(Self::DEFAULT_SLOTS, Self::DEFAULT_CHANNELS)
    }
}

impl Embedder for ToyEmbedder {
    fn id(&self) -> &str {
        &self.id
    }

    fn shape(&self) -> (usize, usize) {
        (self.slots, self.channels)
    }

    fn embed(&self, text: &str) -> Result<PromptEmbedding> {
        let mut stream = SeededStream::new(stable_hash64(text));
        let draws = stream.normals(self.slots * self.channels);
        let mut data = Array2::from_shape_vec((self.slots, self.channels), draws)
            .expect("draw count matches shape");
        for mut row in data.rows_mut() {
            let norm = row.dot(&row).sqrt();
            if norm > 0.0 {
                row.mapv_inplace(|v| v / norm);
            }
        }
        PromptEmbedding::new(data, text, self.id.clone())
    }
}

/// Normalized weights over one to three mixed prompts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct MixWeights(Vec<f64>);

impl MixWeights {
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        if weights.is_empty() || weights.len() > MAX_MIX {
            return Err(Error::InvalidWeights(format!(
                "expected 1..={MAX_MIX} weights, got {}",
                weights.len()
            )));
        }
        if let Some(w) = weights
            .iter()
            .find(|w| !w.is_finite() || **w < 0.0 || **w > 1.0)
        {
            return Err(Error::InvalidWeights(format!("weight {w} outside [0, 1]")));
        }
        let sum: f64 = weights.iter().sum();
        if (sum - 1.0).abs() > WEIGHT_SUM_TOL {
            return Err(Error::InvalidWeights(format!("weights sum to {sum}")));
        }
        Ok(Self(weights))
    }

    /// All weight on a single prompt.
    pub fn single() -> Self {
        Self(vec![1.0])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl TryFrom<Vec<f64>> for MixWeights {
    type Error = Error;

    fn try_from(v: Vec<f64>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<MixWeights> for Vec<f64> {
    fn from(w: MixWeights) -> Self {
        w.0
    }
}

/// Two end prompts and a slider weight in `[-1, 1]`. Positive weights shift
/// toward `end_a`, negative toward `end_b`.
#[derive(Debug, Clone, PartialEq)]
pub struct DirectionalAxis {
    pub id: String,
    pub end_a: PromptEmbedding,
    pub end_b: PromptEmbedding,
    pub weight: f64,
    pub color_a: Rgb,
    pub color_b: Rgb,
}

/// Record of how a guidance vector was put together.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub mix: Option<MixWeights>,
    pub axes: Vec<(String, f64)>,
}

/// Final conditioning vector handed to the denoiser.
#[derive(Debug, Clone, PartialEq)]
pub struct GuidanceVector {
    data: Array2<f64>,
    pub provenance: Provenance,
}

impl GuidanceVector {
    pub fn data(&self) -> &Array2<f64> {
        &self.data
    }

    pub fn shape(&self) -> (usize, usize) {
        self.data.dim()
    }

    /// Guidance straight from one embedding, e.g. the unconditional prompt.
    pub fn from_embedding(embedding: &PromptEmbedding) -> Self {
        Self {
            data: embedding.data.clone(),
            provenance: Provenance::default(),
        }
    }

    /// Wraps raw data received from elsewhere (e.g. a replayed timeline).
    pub fn from_raw(data: Array2<f64>, provenance: Provenance) -> Result<Self> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("guidance vector"));
        }
        Ok(Self { data, provenance })
    }
}

fn check_shape(expected: (usize, usize), found: (usize, usize)) -> Result<()> {
    if expected == found {
        Ok(())
    } else {
        Err(Error::ShapeMismatch {
            expected: vec![expected.0, expected.1],
            found: vec![found.0, found.1],
        })
    }
}

/// Weighted sum of prompt embeddings.
pub fn interpolate(
    embeddings: &[PromptEmbedding],
    weights: &MixWeights,
) -> Result<PromptEmbedding> {
    if embeddings.len() != weights.len() {
        return Err(Error::InvalidWeights(format!(
            "{} weights for {} embeddings",
            weights.len(),
            embeddings.len()
        )));
    }
    let first = &embeddings[0];
    let shape = first.shape();
    let mut out = Array2::<f64>::zeros(shape);
    for (e, &w) in embeddings.iter().zip(weights.as_slice()) {
        check_shape(shape, e.shape())?;
        out.scaled_add(w, &e.data);
    }
    let text = embeddings
        .iter()
        .map(|e| e.source_text.as_str())
        .collect::<Vec<_>>()
        .join(" | ");
    PromptEmbedding::new(out, text, first.embedder_id.clone())
}

/// `end_a - end_b`.
pub fn direction(axis: &DirectionalAxis) -> Result<Array2<f64>> {
    check_shape(axis.end_a.shape(), axis.end_b.shape())?;
    Ok(&axis.end_a.data - &axis.end_b.data)
}

/// `base + sum_j weight_j * direction(axis_j)`.
///
/// Axes at weight zero contribute nothing and are skipped, so a palette with
/// all sliders centered reproduces `base` bit for bit.
pub fn compose(
    base: &PromptEmbedding,
    mix: Option<&MixWeights>,
    axes: &[DirectionalAxis],
) -> Result<GuidanceVector> {
    let shape = base.shape();
    let mut data = base.data.clone();
    let mut applied = Vec::with_capacity(axes.len());
    for axis in axes {
        if !axis.weight.is_finite() || !(-1.0..=1.0).contains(&axis.weight) {
            return Err(out_of_range("axis weight", axis.weight));
        }
        check_shape(shape, axis.end_a.shape())?;
        let dir = direction(axis)?;
        if axis.weight != 0.0 {
            data.scaled_add(axis.weight, &dir);
        }
        applied.push((axis.id.clone(), axis.weight));
    }
    GuidanceVector::from_raw(
        data,
        Provenance {
            mix: mix.cloned(),
            axes: applied,
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn emb(data: Array2<f64>) -> PromptEmbedding {
        PromptEmbedding::new(data, "t", "test").unwrap()
    }

    fn axis(a: Array2<f64>, b: Array2<f64>, weight: f64) -> DirectionalAxis {
        DirectionalAxis {
            id: "ax".into(),
            end_a: emb(a),
            end_b: emb(b),
            weight,
            color_a: Rgb::WHITE,
            color_b: Rgb::default(),
        }
    }

    #[test]
    fn identity_weight_returns_first() {
        let v1 = emb(array![[0.3, -1.7, 2.0]]);
        let v2 = emb(array![[9.0, 9.0, 9.0]]);
        let w = MixWeights::new(vec![1.0, 0.0]).unwrap();
        let out = interpolate(&[v1.clone(), v2], &w).unwrap();
        assert_eq!(out.data(), v1.data());
    }

    #[test]
    fn equal_inputs_half_weights() {
        let v = emb(array![[0.1, 0.7], [-3.0, 1e-3]]);
        let w = MixWeights::new(vec![0.5, 0.5]).unwrap();
        let out = interpolate(&[v.clone(), v.clone()], &w).unwrap();
        assert_eq!(out.data(), v.data());
    }

    #[test]
    fn weighted_sum_small_case() {
        let w = MixWeights::new(vec![0.25, 0.75]).unwrap();
        let out = interpolate(&[emb(array![[1.0, 0.0]]), emb(array![[0.0, 1.0]])], &w).unwrap();
        assert_eq!(out.data(), &array![[0.25, 0.75]]);
    }

    #[test]
    fn weight_validation() {
        assert!(MixWeights::new(vec![]).is_err());
        assert!(MixWeights::new(vec![0.25; 4]).is_err());
        assert!(MixWeights::new(vec![0.5, 0.6]).is_err());
        assert!(MixWeights::new(vec![1.5, -0.5]).is_err());
        assert!(MixWeights::new(vec![f64::NAN]).is_err());
        assert!(MixWeights::new(vec![1.0 / 3.0; 3]).is_ok());
    }

    #[test]
    fn interpolate_rejects_mismatch() {
        let w = MixWeights::new(vec![0.5, 0.5]).unwrap();
        let err = interpolate(&[emb(array![[1.0, 0.0]]), emb(array![[1.0, 0.0, 0.0]])], &w);
        assert!(matches!(err, Err(Error::ShapeMismatch { .. })));
        let err = interpolate(&[emb(array![[1.0]])], &w);
        assert!(matches!(err, Err(Error::InvalidWeights(_))));
    }

    #[test]
    fn direction_cases() {
        let d = direction(&axis(array![[1.0, 0.0]], array![[0.0, 1.0]], 0.0)).unwrap();
        assert_eq!(d, array![[1.0, -1.0]]);
        let same = direction(&axis(array![[4.0, 2.0]], array![[4.0, 2.0]], 0.0)).unwrap();
        assert_eq!(same, array![[0.0, 0.0]]);
        let a = array![[0.3, -2.5, 7.0]];
        let b = array![[1.1, 0.5, -0.25]];
        let fwd = direction(&axis(a.clone(), b.clone(), 0.0)).unwrap();
        let rev = direction(&axis(b, a, 0.0)).unwrap();
        assert_eq!(fwd, -rev);
    }

    #[test]
    fn compose_cases() {
        let base = emb(array![[0.5, -0.5]]);
        let g = compose(&base, None, &[]).unwrap();
        assert_eq!(g.data(), base.data());

        // Full weight adds the whole end-to-end difference.
        let full = compose(
            &base,
            None,
            &[axis(array![[2.0, 1.0]], array![[1.0, 3.0]], 1.0)],
        )
        .unwrap();
        assert_eq!(full.data(), &array![[1.5, -2.5]]);

        // 0.5 * ((1,2)-(0,0)) + (-0.25) * ((4,0)-(0,4)) = (0.5,1) + (-1,1)
        let two = compose(
            &base,
            None,
            &[
                axis(array![[1.0, 2.0]], array![[0.0, 0.0]], 0.5),
                axis(array![[4.0, 0.0]], array![[0.0, 4.0]], -0.25),
            ],
        )
        .unwrap();
        assert_eq!(two.data(), &array![[0.5 + 0.5 - 1.0, -0.5 + 1.0 + 1.0]]);
        assert_eq!(two.provenance.axes.len(), 2);
    }

    #[test]
    fn compose_rejects_bad_weight() {
        let base = emb(array![[0.5, -0.5]]);
        let err = compose(
            &base,
            None,
            &[axis(array![[1.0, 0.0]], array![[0.0, 1.0]], 1.5)],
        );
        assert!(matches!(err, Err(Error::OutOfRange { .. })));
    }

    #[test]
    fn toy_embedding_is_unit_norm_and_deterministic() {
        let e = ToyEmbedder::new(2, 16);
        let a = e.embed("").unwrap();
        let b = e.embed("").unwrap();
        assert_eq!(a.data(), b.data());
        for row in a.data().rows() {
            assert!((row.dot(&row) - 1.0).abs() < 1e-12);
        }
        assert_ne!(
            e.embed("dog").unwrap().data(),
            e.embed("cat").unwrap().data()
        );
    }

    #[test]
    fn embedding_rejects_nan() {
        assert!(PromptEmbedding::new(array![[f64::NAN]], "x", "y").is_err());
        assert!(PromptEmbedding::new(Array2::zeros((0, 3)), "x", "y").is_err());
    }
}
