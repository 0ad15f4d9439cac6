//! Pixel-wise noise synthesis in the `[0, 255]` intensity range.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{derive_seed, Xoshiro256pp};
use crate::tensor_core::Tensor;

pub const INTENSITY_MAX: f32 = 255.0;

pub const DEFAULT_POISSON_SCALE: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseKind {
    Gaussian,
    Poisson,
}

fn default_scale() -> f64 {
    DEFAULT_POISSON_SCALE
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub kind: NoiseKind,
    #[serde(default)]
    pub mu: f64,
    #[serde(default)]
    pub sigma: f64,
    /// Photon counts per unit intensity.
    #[serde(default = "default_scale")]
    pub poisson_scale: f64,
    #[serde(default)]
    pub seed: u64,
}

impl NoiseSpec {
    pub fn gaussian(mu: f64, sigma: f64, seed: u64) -> Self {
        Self {
            kind: NoiseKind::Gaussian,
            mu,
            sigma,
            poisson_scale: DEFAULT_POISSON_SCALE,
            seed,
        }
    }

    pub fn poisson(scale: f64, seed: u64) -> Self {
        Self {
            kind: NoiseKind::Poisson,
            mu: 0.0,
            sigma: 0.0,
            poisson_scale: scale,
            seed,
        }
    }

    /// Zero-noise Gaussian spec.
    pub fn clean() -> Self {
        Self::gaussian(0.0, 0.0, 0)
    }

    pub fn validate(&self) -> Result<()> {
        match self.kind {
            NoiseKind::Gaussian if !(self.sigma >= 0.0) || !self.mu.is_finite() => Err(Error::InvalidSpec(format!(
                "gaussian noise needs finite mu and sigma >= 0, got mu={} sigma={}",
                self.mu, self.sigma
            ))),
            NoiseKind::Poisson if !(self.poisson_scale > 0.0) || !self.poisson_scale.is_finite() => Err(
                Error::InvalidSpec(format!("poisson scale must be > 0, got {}", self.poisson_scale)),
            ),
            _ => Ok(()),
        }
    }

    /// The same noise model with its seed replaced by a child stream.
    pub fn derive(&self, label: &str) -> Self {
        Self {
            seed: derive_seed(self.seed, label),
            ..self.clone()
        }
    }

    pub fn is_identity(&self) -> bool {
        self.kind == NoiseKind::Gaussian && self.sigma == 0.0 && self.mu == 0.0
    }

    /// Noisy samples before clamping.
    pub fn sample_unclamped(&self, image: &Tensor) -> Result<Vec<f64>> {
        self.validate()?;
        let mut rng = Xoshiro256pp::seed_from_u64(self.seed);
        match self.kind {
            NoiseKind::Gaussian => Ok(image
                .data()
                .iter()
                .map(|&v| f64::from(v) + rng.normal(self.mu, self.sigma))
                .collect()),
            NoiseKind::Poisson => {
                if let Some(i) = image.data().iter().position(|&v| !(v >= 0.0)) {
                    return Err(Error::InvalidInput(format!(
                        "poisson noise needs non-negative pixels, index {i} is {}",
                        image.data()[i]
                    )));
                }
                let lambda = self.poisson_scale;
                Ok(image
                    .data()
                    .iter()
                    .map(|&v| rng.poisson(lambda * f64::from(v)) as f64 / lambda)
                    .collect())
            }
        }
    }

    pub fn apply(&self, image: &Tensor) -> Result<Tensor> {
        if self.is_identity() {
            return Ok(image.clone());
        }
        let raw = self.sample_unclamped(image)?;
        let data = raw
            .into_iter()
            .map(|v| (v as f32).clamp(0.0, INTENSITY_MAX))
            .collect();
        Tensor::new(image.shape().to_vec(), data)
    }
}

pub fn add_gaussian(image: &Tensor, spec: &NoiseSpec) -> Result<Tensor> {
    if spec.kind != NoiseKind::Gaussian {
        return Err(Error::InvalidSpec("add_gaussian given a non-gaussian spec".into()));
    }
    spec.apply(image)
}

pub fn add_poisson(image: &Tensor, spec: &NoiseSpec) -> Result<Tensor> {
    if spec.kind != NoiseKind::Poisson {
        return Err(Error::InvalidSpec("add_poisson given a non-poisson spec".into()));
    }
    spec.apply(image)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mean_sd(v: &[f64]) -> (f64, f64) {
        let n = v.len() as f64;
        let m = v.iter().sum::<f64>() / n;
        (m, (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n).sqrt())
    }

    fn gray(n: usize, v: f32) -> Tensor {
        Tensor::full(&[1, n, n], v)
    }

    #[test]
    fn zero_sigma_is_identity() {
        let img = Tensor::from_fn(&[1, 8, 8], |i| (i * 4) as f32);
        assert_eq!(add_gaussian(&img, &NoiseSpec::gaussian(0.0, 0.0, 5)).unwrap(), img);
    }

    #[test]
    fn gaussian_moments_before_clamp() {
        let raw = NoiseSpec::gaussian(0.0, 70.0, 11)
            .sample_unclamped(&gray(1000, 128.0))
            .unwrap();
        let (m, sd) = mean_sd(&raw);
        assert!((sd - 70.0).abs() < 0.7, "sd {sd}");
        assert!((m - 128.0).abs() < 0.5, "mean {m}");
    }

    #[test]
    fn output_is_clamped() {
        let out = add_gaussian(&gray(64, 250.0), &NoiseSpec::gaussian(0.0, 90.0, 1)).unwrap();
        assert!(out.data().iter().all(|v| (0.0..=255.0).contains(v)));
        assert!(out.data().contains(&255.0));
    }

    #[test]
    fn seeded_noise_is_reproducible() {
        let img = gray(32, 100.0);
        let s = NoiseSpec::gaussian(0.0, 30.0, 3);
        assert_eq!(s.apply(&img).unwrap(), s.apply(&img).unwrap());
        assert_ne!(s.apply(&img).unwrap(), s.derive("other").apply(&img).unwrap());
    }

    #[test]
    fn negative_sigma_rejected() {
        let err = add_gaussian(&gray(4, 1.0), &NoiseSpec::gaussian(0.0, -1.0, 0)).unwrap_err();
        assert!(matches!(err, Error::InvalidSpec(_)));
        assert!(NoiseSpec::poisson(0.0, 0).validate().is_err());
    }

    #[test]
    fn poisson_of_zero_image_is_zero() {
        let z = Tensor::zeros(&[1, 16, 16]);
        assert_eq!(add_poisson(&z, &NoiseSpec::poisson(0.1, 4)).unwrap(), z);
    }

    #[test]
    fn poisson_variance_law() {
        let raw = NoiseSpec::poisson(0.1, 12).sample_unclamped(&gray(1000, 100.0)).unwrap();
        let (m, sd) = mean_sd(&raw);
        assert!((sd * sd / 1000.0 - 1.0).abs() < 0.03, "var {}", sd * sd);
        assert!((m - 100.0).abs() < 0.2);
    }

    #[test]
    fn poisson_converges_for_large_scale() {
        let img = Tensor::full(&[1, 100, 1000], 100.0);
        let out = add_poisson(&img, &NoiseSpec::poisson(1e4, 2)).unwrap();
        let worst = out.data().iter().map(|v| (v - 100.0).abs() / 100.0).fold(0.0, f32::max);
        assert!(worst < 0.01, "{worst}");
    }

    #[test]
    fn poisson_rejects_negative_pixels() {
        let mut img = gray(4, 1.0);
        img.data_mut()[5] = -2.0;
        assert!(matches!(
            add_poisson(&img, &NoiseSpec::poisson(0.1, 0)),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn noise_field_is_uncorrelated() {
        let raw = NoiseSpec::gaussian(0.0, 70.0, 99).sample_unclamped(&gray(1000, 128.0)).unwrap();
        let (m, sd) = mean_sd(&raw);
        let lag1: f64 = raw.windows(2).map(|w| (w[0] - m) * (w[1] - m)).sum::<f64>() / (raw.len() - 1) as f64;
        assert!((lag1 / (sd * sd)).abs() < 0.01);
    }
}
