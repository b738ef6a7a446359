//! Noise predictors and classifier-free guidance.
//!
//! [`ToyDenoiser`] is an analytic stand-in for a neural denoiser: it pulls the
//! implied clean latent toward a target derived linearly from the guidance
//! vector, at relaxation rate `gamma`. [`RemoteBackend`] forwards requests to
//! a model server through any [`Transport`].

use std::sync::Arc;

use ndarray::{Array2, Array3, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{out_of_range, Error, Result};
use crate::rng::{stable_hash64, SeededStream};
use crate::scheduler::{check_latent_shape, Latent, NoiseSchedule, ScheduleConfig};
use crate::vecmix::{Embedder, GuidanceVector, PromptEmbedding};

/// Guide scale used unless configured otherwise.
pub const DEFAULT_GUIDE_SCALE: f64 = 7.5;

/// Predicts the noise present in a latent at a training timestep.
pub trait Denoiser: Send + Sync {
    fn backend_id(&self) -> &str;

    /// `(channels, height, width)` of latents this backend accepts.
    fn latent_shape(&self) -> (usize, usize, usize);

    fn predict(
        &self,
        latent: &Latent,
        timestep: usize,
        cond: &GuidanceVector,
    ) -> Result<Array3<f32>>;
}

/// `(1 - s) * uncond + s * cond`, i.e. `uncond + s * (cond - uncond)`.
///
/// Written in the two-weight form so `s = 0` and `s = 1` reproduce their
/// branch exactly.
pub fn cfg_combine(uncond: &Array3<f32>, cond: &Array3<f32>, scale: f64) -> Result<Array3<f32>> {
    check_latent_shape(uncond.dim(), cond.dim())?;
    if !(scale >= 0.0 && scale.is_finite()) {
        return Err(out_of_range("guide scale", scale));
    }
    let mut out = Array3::<f32>::zeros(uncond.dim());
    Zip::from(&mut out)
        .and(uncond)
        .and(cond)
        .for_each(|o, &u, &c| *o = ((1.0 - scale) * u as f64 + scale * c as f64) as f32);
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyDenoiserConfig {
    /// Relaxation rate in `(0, 1]`; 1 predicts the target in one shot.
    pub gamma: f64,
    /// Seeds the fixed projection from guidance vectors to targets.
    pub backend_id: String,
    /// Standard deviation of target entries for unit-norm guidance rows.
    pub target_scale: f64,
}

impl Default for ToyDenoiserConfig {
    fn default() -> Self {
        Self {
            gamma: 0.3,
            backend_id: "toy-relax".into(),
            target_scale: 0.15,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ToyDenoiser {
    config: ToyDenoiserConfig,
    latent_shape: (usize, usize, usize),
    embed_shape: (usize, usize),
    /// `[latent cells, embedding entries]`.
    projection: Array2<f64>,
    alpha_bar: Vec<f64>,
}

impl ToyDenoiser {
    pub fn new(
        config: ToyDenoiserConfig,
        embed_shape: (usize, usize),
        latent_shape: (usize, usize, usize),
    ) -> Result<Self> {
        Self::with_schedule(config, embed_shape, latent_shape, ScheduleConfig::default())
    }

    pub fn with_schedule(
        config: ToyDenoiserConfig,
        embed_shape: (usize, usize),
        latent_shape: (usize, usize, usize),
        schedule: ScheduleConfig,
    ) -> Result<Self> {
        if !(config.gamma > 0.0 && config.gamma <= 1.0) {
            return Err(out_of_range("gamma", config.gamma));
        }
        let rows = latent_shape.0 * latent_shape.1 * latent_shape.2;
        let cols = embed_shape.0 * embed_shape.1;
        if rows == 0 || cols == 0 {
            return Err(out_of_range(
                "toy denoiser shape",
                format!("{latent_shape:?} / {embed_shape:?}"),
            ));
        }
        let mut stream = SeededStream::new(stable_hash64(&config.backend_id));
        let gain = config.target_scale / (embed_shape.0 as f64).sqrt();
        let projection = Array2::from_shape_fn((rows, cols), |_| stream.normal() * gain);
        let alpha_bar = NoiseSchedule::with_config(schedule, 1)?
            .alpha_bar()
            .to_vec();
        Ok(Self {
            config,
            latent_shape,
            embed_shape,
            projection,
            alpha_bar,
        })
    }

    pub fn config(&self) -> &ToyDenoiserConfig {
        &self.config
    }

    /// Target latent for a guidance vector.
    pub fn target(&self, cond: &GuidanceVector) -> Result<Array3<f64>> {
        if cond.shape() != self.embed_shape {
            return Err(Error::ShapeMismatch {
                expected: vec![self.embed_shape.0, self.embed_shape.1],
                found: vec![cond.shape().0, cond.shape().1],
            });
        }
        let flat = cond
            .data()
            .iter()
            .copied()
            .collect::<ndarray::Array1<f64>>();
        let out = self.projection.dot(&flat);
        Ok(out
            .into_shape_with_order(self.latent_shape)
            .expect("projection rows match latent"))
    }

    /// Target the guided prediction converges to: the CFG blend of the
    /// unconditional and conditional targets.
    pub fn guided_target(
        &self,
        uncond: &GuidanceVector,
        cond: &GuidanceVector,
        scale: f64,
    ) -> Result<Array3<f64>> {
        let u = self.target(uncond)?;
        let c = self.target(cond)?;
        Ok((1.0 - scale) * &u + scale * &c)
    }
}

impl Denoiser for ToyDenoiser {
    fn backend_id(&self) -> &str {
        &self.config.backend_id
    }

    fn latent_shape(&self) -> (usize, usize, usize) {
        self.latent_shape
    }

    /// With `x = l / sqrt(ab)`, the implied clean latent is
    /// `(1 - gamma) x + gamma x*`; returns the matching noise
    /// `gamma (l - sqrt(ab) x*) / sqrt(1 - ab)`.
    fn predict(
        &self,
        latent: &Latent,
        timestep: usize,
        cond: &GuidanceVector,
    ) -> Result<Array3<f32>> {
        check_latent_shape(self.latent_shape, latent.shape())?;
        let ab = *self
            .alpha_bar
            .get(timestep)
            .ok_or_else(|| out_of_range("timestep", timestep))?;
        let target = self.target(cond)?;
        let mut eps = Array3::<f32>::zeros(self.latent_shape);
        let noise_sd = (1.0 - ab).sqrt();
        if noise_sd == 0.0 {
            return Ok(eps);
        }
        let (sa, g) = (ab.sqrt(), self.config.gamma);
        Zip::from(&mut eps)
            .and(latent.data())
            .and(&target)
            .for_each(|e, &l, &x| *e = (g * (l as f64 - sa * x) / noise_sd) as f32);
        Ok(eps)
    }
}

/// Row-major f32 tensor with an explicit shape, as carried on the wire.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawTensor {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl RawTensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Contract(format!(
                "tensor shape {shape:?} needs {n} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn from_latent(latent: &Latent) -> Self {
        let (c, h, w) = latent.shape();
        Self {
            shape: vec![c, h, w],
            data: latent.data().iter().copied().collect(),
        }
    }

    pub fn from_eps(eps: &Array3<f32>) -> Self {
        let (c, h, w) = eps.dim();
        Self {
            shape: vec![c, h, w],
            data: eps.iter().copied().collect(),
        }
    }

    pub fn from_matrix(m: &Array2<f64>) -> Self {
        let (s, d) = m.dim();
        Self {
            shape: vec![s, d],
            data: m.iter().map(|&v| v as f32).collect(),
        }
    }

    pub fn into_latent(self) -> Result<Latent> {
        Latent::from_raw(&self.shape, self.data)
    }

    pub fn into_matrix(self) -> Result<Array2<f64>> {
        let [s, d] = self.shape[..] else {
            return Err(Error::Contract(format!(
                "expected 2 dims, got {:?}",
                self.shape
            )));
        };
        Array2::from_shape_vec((s, d), self.data.into_iter().map(f64::from).collect())
            .map_err(|e| Error::Contract(e.to_string()))
    }
}

/// Requests a model server understands.
#[derive(Debug, Clone, PartialEq)]
pub enum BackendRequest {
    Info,
    Embed {
        text: String,
    },
    Denoise {
        timestep: usize,
        latent: RawTensor,
        cond: RawTensor,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub enum BackendReply {
    Info {
        backend_id: String,
        embed_shape: (usize, usize),
        latent_shape: (usize, usize, usize),
    },
    Embedding(RawTensor),
    Eps(RawTensor),
}

/// Carries one request to a model server and waits for its reply.
pub trait Transport: Send + Sync {
    fn call(&self, request: BackendRequest) -> Result<BackendReply>;
}

/// Embed shape assumed for a remote text encoder unless the server says
/// otherwise.
pub const REMOTE_EMBED_SHAPE: (usize, usize) = (77, 768);

/// Embedder and denoiser backed by a model server.
#[derive(Clone)]
pub struct RemoteBackend {
    transport: Arc<dyn Transport>,
    backend_id: String,
    embed_shape: (usize, usize),
    latent_shape: (usize, usize, usize),
}

impl std::fmt::Debug for RemoteBackend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RemoteBackend")
            .field("backend_id", &self.backend_id)
            .field("embed_shape", &self.embed_shape)
            .field("latent_shape", &self.latent_shape)
            .finish()
    }
}

impl RemoteBackend {
    pub fn new(
        transport: Arc<dyn Transport>,
        backend_id: impl Into<String>,
        embed_shape: (usize, usize),
        latent_shape: (usize, usize, usize),
    ) -> Self {
        Self {
            transport,
            backend_id: backend_id.into(),
            embed_shape,
            latent_shape,
        }
    }

    /// Asks the server for its id and declared shapes.
    pub fn connect(transport: Arc<dyn Transport>) -> Result<Self> {
        match transport.call(BackendRequest::Info)? {
            BackendReply::Info {
                backend_id,
                embed_shape,
                latent_shape,
            } => Ok(Self::new(transport, backend_id, embed_shape, latent_shape)),
            other => Err(unexpected("info", &other)),
        }
    }

    pub fn embed_shape(&self) -> (usize, usize) {
        self.embed_shape
    }
}

fn unexpected(wanted: &str, got: &BackendReply) -> Error {
    let kind = match got {
        BackendReply::Info { .. } => "info",
        BackendReply::Embedding(_) => "embedding",
        BackendReply::Eps(_) => "eps",
    };
    Error::Contract(format!("expected {wanted} reply, got {kind}"))
}

impl Embedder for RemoteBackend {
    fn id(&self) -> &str {
        &self.backend_id
    }

    fn shape(&self) -> (usize, usize) {
        self.embed_shape
    }

    fn embed(&self, text: &str) -> Result<PromptEmbedding> {
        let reply = self
            .transport
            .call(BackendRequest::Embed { text: text.into() })?;
        let BackendReply::Embedding(t) = reply else {
            return Err(unexpected("embedding", &reply));
        };
        if t.shape != [self.embed_shape.0, self.embed_shape.1] {
            return Err(Error::Contract(format!(
                "embedding shape {:?}, declared {:?}",
                t.shape, self.embed_shape
            )));
        }
        PromptEmbedding::new(t.into_matrix()?, text, self.backend_id.clone())
    }
}

impl Denoiser for RemoteBackend {
    fn backend_id(&self) -> &str {
        &self.backend_id
    }

    fn latent_shape(&self) -> (usize, usize, usize) {
        self.latent_shape
    }

    fn predict(
        &self,
        latent: &Latent,
        timestep: usize,
        cond: &GuidanceVector,
    ) -> Result<Array3<f32>> {
        let reply = self.transport.call(BackendRequest::Denoise {
            timestep,
            latent: RawTensor::from_latent(latent),
            cond: RawTensor::from_matrix(cond.data()),
        })?;
        let BackendReply::Eps(t) = reply else {
            return Err(unexpected("eps", &reply));
        };
        let (c, h, w) = latent.shape();
        if t.shape != [c, h, w] {
            return Err(Error::Contract(format!(
                "eps shape {:?} for latent {:?}",
                t.shape,
                latent.shape()
            )));
        }
        let eps = t
            .into_latent()
            .map_err(|_| Error::Contract("non-finite eps".into()))?;
        Ok(eps.into_data())
    }
}

/// Server-side dispatch of a backend request.
pub fn serve_request(
    embedder: &dyn Embedder,
    denoiser: &dyn Denoiser,
    request: BackendRequest,
) -> Result<BackendReply> {
    match request {
        BackendRequest::Info => Ok(BackendReply::Info {
            backend_id: denoiser.backend_id().to_string(),
            embed_shape: embedder.shape(),
            latent_shape: denoiser.latent_shape(),
        }),
        BackendRequest::Embed { text } => {
            let e = embedder.embed(&text)?;
            Ok(BackendReply::Embedding(RawTensor::from_matrix(e.data())))
        }
        BackendRequest::Denoise {
            timestep,
            latent,
            cond,
        } => {
            let latent = latent.into_latent()?;
            let cond = GuidanceVector::from_raw(cond.into_matrix()?, Default::default())?;
            let eps = denoiser.predict(&latent, timestep, &cond)?;
            Ok(BackendReply::Eps(RawTensor::from_eps(&eps)))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vecmix::ToyEmbedder;
    use ndarray::array;

    fn toy(gamma: f64) -> (ToyDenoiser, GuidanceVector) {
        let emb = ToyEmbedder::default();
        let d = ToyDenoiser::new(
            ToyDenoiserConfig {
                gamma,
                ..Default::default()
            },
            emb.shape(),
            (3, 2, 2),
        )
        .unwrap();
        let v = GuidanceVector::from_embedding(&emb.embed("a lighthouse").unwrap());
        (d, v)
    }

    #[test]
    fn cfg_endpoints_and_scalar_case() {
        let u = array![[[0.1f32, -2.0]]];
        let c = array![[[0.2f32, 5.5]]];
        assert_eq!(cfg_combine(&u, &c, 1.0).unwrap(), c);
        assert_eq!(cfg_combine(&u, &c, 0.0).unwrap(), u);
        let g = cfg_combine(&u, &c, 7.5).unwrap();
        let expect = 0.1f32 as f64 + 7.5 * (0.2f32 as f64 - 0.1f32 as f64);
        assert!((g[(0, 0, 0)] as f64 - 0.85).abs() < 1e-6);
        assert!((g[(0, 0, 0)] as f64 - expect).abs() < 1e-6);
        assert!(cfg_combine(&u, &c, -1.0).is_err());
        assert!(cfg_combine(&u, &array![[[1.0f32]]], 1.0).is_err());
    }

    #[test]
    fn gamma_one_predicts_target() {
        let (d, v) = toy(1.0);
        let s = NoiseSchedule::new(50).unwrap();
        let l = Latent::new(Array3::from_shape_fn((3, 2, 2), |(c, y, x)| {
            (c as f32 - 1.0) * 0.3 + (y * x) as f32
        }))
        .unwrap();
        let k = 17;
        let eps = d.predict(&l, s.timestep(k).unwrap(), &v).unwrap();
        let x0 = s.predict_original(&l, &eps, k).unwrap();
        let target = d.target(&v).unwrap();
        for (a, b) in x0.iter().zip(target.iter()) {
            assert!((a - b).abs() < 1e-5, "{a} vs {b}");
        }
    }

    #[test]
    fn partial_gamma_interpolates_scalar() {
        // l = sqrt(ab) * x*: implied x equals x*, so any gamma keeps x*.
        // l = 0: implied x is 0, prediction is gamma * x*.
        let (d, v) = toy(0.25);
        let s = NoiseSchedule::new(50).unwrap();
        let k = 30;
        let target = d.target(&v).unwrap();
        let ab = s.alpha_bar_at_step(k).unwrap();
        let l = Latent::new(target.mapv(|x| (ab.sqrt() * x) as f32)).unwrap();
        let eps = d.predict(&l, s.timestep(k).unwrap(), &v).unwrap();
        let x0 = s.predict_original(&l, &eps, k).unwrap();
        for (a, b) in x0.iter().zip(target.iter()) {
            assert!((a - b).abs() < 1e-6);
        }
        let zero = Latent::zeros((3, 2, 2));
        let eps = d.predict(&zero, s.timestep(k).unwrap(), &v).unwrap();
        let x0 = s.predict_original(&zero, &eps, k).unwrap();
        for (a, b) in x0.iter().zip(target.iter()) {
            assert!((a - 0.25 * b).abs() < 1e-6);
        }
    }

    #[test]
    fn target_is_deterministic_and_prompt_dependent() {
        let (d, v) = toy(1.0);
        assert_eq!(d.target(&v).unwrap(), d.target(&v).unwrap());
        let other =
            GuidanceVector::from_embedding(&ToyEmbedder::default().embed("a storm").unwrap());
        assert_ne!(d.target(&v).unwrap(), d.target(&other).unwrap());
    }

    #[test]
    fn rejects_bad_gamma_and_shapes() {
        let cfg = |gamma| ToyDenoiserConfig {
            gamma,
            ..Default::default()
        };
        assert!(ToyDenoiser::new(cfg(0.0), (1, 4), (3, 2, 2)).is_err());
        assert!(ToyDenoiser::new(cfg(1.5), (1, 4), (3, 2, 2)).is_err());
        let (d, v) = toy(1.0);
        assert!(d.predict(&Latent::zeros((3, 2, 3)), 10, &v).is_err());
        assert!(d.predict(&Latent::zeros((3, 2, 2)), 1000, &v).is_err());
    }

    #[test]
    fn raw_tensor_validation() {
        assert!(RawTensor::new(vec![2, 2], vec![0.0; 3]).is_err());
        let t = RawTensor::new(vec![1, 2], vec![0.5, -1.0]).unwrap();
        assert_eq!(t.into_matrix().unwrap(), array![[0.5, -1.0]]);
    }
}
