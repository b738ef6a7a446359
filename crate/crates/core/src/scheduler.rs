//! # Deterministic DDIM stepping
//!
//! Scaled-linear beta table over `T` training steps, cumulative alpha
//! products, forward noising of a clean latent to the level of an inference
//! step, and the eta = 0 reverse update.
//!
//! Step indices count completed denoising rounds: step `k = 0` holds pure
//! noise and step `K` is the finished latent. Step `k < K` sits at training
//! timestep `timesteps()[k]`; the table is descending.

use ndarray::{Array3, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{out_of_range, Error, Result};
use crate::rng::SeededStream;

pub const BETA_START: f64 = 8.5e-4;
pub const BETA_END: f64 = 1.2e-2;
pub const TRAIN_STEPS: usize = 1000;

/// Latent image `[channels, height, width]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Latent {
    data: Array3<f32>,
    /// Seed of the stream that produced the initial noise, if any.
    pub seed_id: Option<u64>,
}

impl Latent {
    pub fn new(data: Array3<f32>) -> Result<Self> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("latent"));
        }
        Ok(Self {
            data,
            seed_id: None,
        })
    }

    pub fn zeros(shape: (usize, usize, usize)) -> Self {
        Self {
            data: Array3::zeros(shape),
            seed_id: None,
        }
    }

    /// Standard-normal latent drawn row-major from `stream`.
    pub fn gaussian(shape: (usize, usize, usize), stream: &mut SeededStream) -> Self {
        let n = shape.0 * shape.1 * shape.2;
        let draws: Vec<f32> = stream.normals(n).into_iter().map(|v| v as f32).collect();
        Self {
            data: Array3::from_shape_vec(shape, draws).expect("draw count matches shape"),
            seed_id: Some(stream.seed()),
        }
    }

    pub fn from_raw(shape: &[usize], data: Vec<f32>) -> Result<Self> {
        let [c, h, w] = shape else {
            return Err(Error::Contract(format!(
                "latent shape must have 3 dims, got {shape:?}"
            )));
        };
        let arr = Array3::from_shape_vec((*c, *h, *w), data)
            .map_err(|e| Error::Contract(format!("latent payload: {e}")))?;
        Self::new(arr)
    }

    pub fn data(&self) -> &Array3<f32> {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut Array3<f32> {
        &mut self.data
    }

    pub fn into_data(self) -> Array3<f32> {
        self.data
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        self.data.dim()
    }

    /// Row-major little-endian bytes, for hashing and transport.
    pub fn to_le_bytes(&self) -> Vec<u8> {
        self.data.iter().flat_map(|v| v.to_le_bytes()).collect()
    }
}

pub(crate) fn check_latent_shape(
    expected: (usize, usize, usize),
    found: (usize, usize, usize),
) -> Result<()> {
    if expected == found {
        Ok(())
    } else {
        Err(Error::ShapeMismatch {
            expected: vec![expected.0, expected.1, expected.2],
            found: vec![found.0, found.1, found.2],
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub beta_start: f64,
    pub beta_end: f64,
    pub train_steps: usize,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            beta_start: BETA_START,
            beta_end: BETA_END,
            train_steps: TRAIN_STEPS,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    config: ScheduleConfig,
    betas: Vec<f64>,
    alpha_bar: Vec<f64>,
    timesteps: Vec<usize>,
}

impl NoiseSchedule {
    /// Default schedule subsampled to `inference_steps`.
    pub fn new(inference_steps: usize) -> Result<Self> {
        Self::with_config(ScheduleConfig::default(), inference_steps)
    }

    pub fn with_config(config: ScheduleConfig, inference_steps: usize) -> Result<Self> {
        let t = config.train_steps;
        if t < 2 {
            return Err(out_of_range("train steps", t));
        }
        if inference_steps == 0 || inference_steps > t {
            return Err(out_of_range("inference steps", inference_steps));
        }
        let (s0, s1) = (config.beta_start.sqrt(), config.beta_end.sqrt());
        let betas: Vec<f64> = (0..t)
            .map(|i| {
                let r = s0 + (i as f64 / (t - 1) as f64) * (s1 - s0);
                r * r
            })
            .collect();
        let mut alpha_bar = Vec::with_capacity(t);
        let mut acc = 1.0f64;
        for b in &betas {
            acc *= 1.0 - b;
            alpha_bar.push(acc);
        }
        let k = inference_steps;
        // trailing spacing: every schedule starts from the noisiest timestep
        let timesteps = (0..k).map(|i| t - 1 - i * t / k).collect();
        Ok(Self {
            config,
            betas,
            alpha_bar,
            timesteps,
        })
    }

    pub fn config(&self) -> &ScheduleConfig {
        &self.config
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bar(&self) -> &[f64] {
        &self.alpha_bar
    }

    /// Training timestep per inference step, descending.
    pub fn timesteps(&self) -> &[usize] {
        &self.timesteps
    }

    pub fn inference_steps(&self) -> usize {
        self.timesteps.len()
    }

    pub fn timestep(&self, k: usize) -> Result<usize> {
        self.timesteps
            .get(k)
            .copied()
            .ok_or_else(|| out_of_range("step index", k))
    }

    /// Alpha-bar of the latent at step `k`; the finished latent (`k = K`) is
    /// noise free.
    pub fn alpha_bar_at_step(&self, k: usize) -> Result<f64> {
        if k == self.inference_steps() {
            return Ok(1.0);
        }
        Ok(self.alpha_bar[self.timestep(k)?])
    }

    /// Noises a clean latent to the level of step `k`.
    pub fn add_noise(&self, clean: &Latent, k: usize, rng: &mut SeededStream) -> Result<Latent> {
        let t = self.timestep(k)?;
        Ok(noise_to_level(clean, self.alpha_bar[t], rng))
    }

    /// Clean-latent estimate from a noisy latent at step `k`.
    pub fn predict_original(
        &self,
        latent: &Latent,
        eps: &Array3<f32>,
        k: usize,
    ) -> Result<Array3<f64>> {
        check_latent_shape(latent.shape(), eps.dim())?;
        let ab = self.alpha_bar_at_step(k)?;
        let (sa, sb) = (ab.sqrt(), (1.0 - ab).sqrt());
        let mut out = Array3::<f64>::zeros(latent.shape());
        Zip::from(&mut out)
            .and(latent.data())
            .and(eps)
            .for_each(|o, &l, &e| *o = (l as f64 - sb * e as f64) / sa);
        Ok(out)
    }

    /// One eta = 0 DDIM update from step `k` to `k + 1`.
    pub fn ddim_step(&self, latent: &Latent, eps: &Array3<f32>, k: usize) -> Result<Latent> {
        if eps.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("predicted noise"));
        }
        let x0 = self.predict_original(latent, eps, k)?;
        let ab_prev = self.alpha_bar_at_step(k + 1)?;
        let (sa, sb) = (ab_prev.sqrt(), (1.0 - ab_prev).sqrt());
        let mut out = Array3::<f32>::zeros(latent.shape());
        Zip::from(&mut out)
            .and(&x0)
            .and(eps)
            .for_each(|o, &x, &e| *o = (sa * x + sb * e as f64) as f32);
        let mut next = Latent::new(out)?;
        next.seed_id = latent.seed_id;
        Ok(next)
    }
}

/// `sqrt(ab) * clean + sqrt(1 - ab) * eps`, with `eps` drawn row-major.
pub fn noise_to_level(clean: &Latent, alpha_bar: f64, rng: &mut SeededStream) -> Latent {
    let (sa, sb) = (alpha_bar.sqrt(), (1.0 - alpha_bar).max(0.0).sqrt());
    let mut out = clean.data.clone();
    for v in out.iter_mut() {
        let eps = rng.normal();
        *v = (sa * *v as f64 + sb * eps) as f32;
    }
    Latent {
        data: out,
        seed_id: clean.seed_id,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn endpoints_and_first_product() {
        let s = NoiseSchedule::new(50).unwrap();
        assert!((s.betas()[0] - 8.5e-4).abs() < 1e-18);
        assert!((s.betas()[TRAIN_STEPS - 1] - 1.2e-2).abs() < 1e-17);
        assert_eq!(s.alpha_bar()[0], 1.0 - s.betas()[0]);
    }

    #[test]
    fn monotone_tables() {
        let s = NoiseSchedule::new(50).unwrap();
        assert!(s.betas().windows(2).all(|w| w[0] < w[1]));
        assert!(s.alpha_bar().windows(2).all(|w| w[0] > w[1]));
        assert!(s.alpha_bar().iter().all(|&a| a > 0.0 && a <= 1.0));
    }

    #[test]
    fn timestep_table_spacing() {
        let s = NoiseSchedule::new(50).unwrap();
        assert_eq!(s.timesteps().len(), 50);
        assert_eq!(s.timesteps()[0], 999);
        assert_eq!(s.timesteps()[49], 19);
        assert!(s.timesteps().windows(2).all(|w| w[0] - w[1] == 20));
        assert_eq!(NoiseSchedule::new(1).unwrap().timesteps(), &[999]);
        assert_eq!(NoiseSchedule::new(3).unwrap().timesteps(), &[999, 666, 333]);
        assert_eq!(NoiseSchedule::new(1000).unwrap().timesteps()[999], 0);
    }

    #[test]
    fn inference_steps_range() {
        assert!(NoiseSchedule::new(0).is_err());
        assert!(NoiseSchedule::new(1001).is_err());
        assert!(NoiseSchedule::new(1000).is_ok());
    }

    #[test]
    fn zero_noise_endpoint_is_identity() {
        let l = Latent::new(Array3::from_shape_fn((2, 3, 3), |(c, y, x)| {
            (c + y * x) as f32 * 0.1
        }))
        .unwrap();
        let out = noise_to_level(&l, 1.0, &mut SeededStream::new(5));
        assert_eq!(out.data(), l.data());
    }

    #[test]
    fn add_noise_is_deterministic() {
        let s = NoiseSchedule::new(50).unwrap();
        let l = Latent::zeros((3, 4, 4));
        let a = s.add_noise(&l, 10, &mut SeededStream::new(9)).unwrap();
        let b = s.add_noise(&l, 10, &mut SeededStream::new(9)).unwrap();
        assert_eq!(a, b);
        assert!(s.add_noise(&l, 50, &mut SeededStream::new(9)).is_err());
    }

    #[test]
    fn exact_eps_recovers_original() {
        let s = NoiseSchedule::new(50).unwrap();
        let x0 = Array3::from_shape_fn((1, 2, 2), |(_, y, x)| 0.25 * y as f32 - 0.5 * x as f32);
        let eps = Array3::from_shape_fn((1, 2, 2), |(_, y, x)| 0.7 - 0.3 * (y + x) as f32);
        let k = 20;
        let ab = s.alpha_bar_at_step(k).unwrap();
        let noisy = Latent::new(Array3::from_shape_fn((1, 2, 2), |i| {
            (ab.sqrt() * x0[i] as f64 + (1.0 - ab).sqrt() * eps[i] as f64) as f32
        }))
        .unwrap();
        let pred = s.predict_original(&noisy, &eps, k).unwrap();
        for (p, x) in pred.iter().zip(x0.iter()) {
            assert!((p - *x as f64).abs() < 1e-6);
        }
    }

    #[test]
    fn final_step_returns_prediction() {
        let s = NoiseSchedule::new(10).unwrap();
        let l = Latent::new(Array3::from_elem((1, 1, 3), 0.4)).unwrap();
        let eps = Array3::from_elem((1, 1, 3), -0.2f32);
        let pred = s.predict_original(&l, &eps, 9).unwrap();
        let out = s.ddim_step(&l, &eps, 9).unwrap();
        for (o, p) in out.data().iter().zip(pred.iter()) {
            assert_eq!(*o, *p as f32);
        }
    }

    #[test]
    fn ddim_rejects_bad_eps() {
        let s = NoiseSchedule::new(10).unwrap();
        let l = Latent::zeros((1, 2, 2));
        assert_eq!(
            s.ddim_step(&l, &Array3::from_elem((1, 2, 2), f32::NAN), 0),
            Err(Error::NonFinite("predicted noise"))
        );
        assert!(matches!(
            s.ddim_step(&l, &Array3::zeros((1, 2, 3)), 0),
            Err(Error::ShapeMismatch { .. })
        ));
    }
}
