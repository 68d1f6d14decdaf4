//! Synthetic low-light degradation with seeded Poisson–Gaussian noise.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::RgbImage;

/// Smooth spatial illumination multiplier, valued in `(0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum IlluminationField {
    #[default]
    Uniform,
    /// 1 at the image centre falling to `edge` at the corners.
    Radial { edge: f64 },
    /// Horizontal ramp from `left` to `right`.
    Linear { left: f64, right: f64 },
}

impl IlluminationField {
    pub fn at(&self, x: usize, y: usize, width: usize, height: usize) -> f64 {
        let u = (x as f64 + 0.5) / width as f64;
        let v = (y as f64 + 0.5) / height as f64;
        match *self {
            IlluminationField::Uniform => 1.0,
            IlluminationField::Radial { edge } => {
                let r2 = ((u - 0.5).powi(2) + (v - 0.5).powi(2)) / 0.5;
                1.0 - (1.0 - edge) * r2
            }
            IlluminationField::Linear { left, right } => left + (right - left) * u,
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = |v: f64| v > 0.0 && v <= 1.0;
        let valid = match *self {
            IlluminationField::Uniform => true,
            IlluminationField::Radial { edge } => ok(edge),
            IlluminationField::Linear { left, right } => ok(left) && ok(right),
        };
        if valid {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("illumination field {self:?} leaves (0, 1]")))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DegradationSpec {
    pub gamma: f64,
    pub attenuation: f64,
    #[serde(default)]
    pub illumination: IlluminationField,
    /// Standard deviation of additive Gaussian read noise.
    pub noise_read: f64,
    /// Photon count at unit intensity; 0 disables shot noise.
    pub noise_shot: f64,
    pub seed: u64,
}

impl Default for DegradationSpec {
    fn default() -> Self {
        Self {
            gamma: 1.0,
            attenuation: 1.0,
            illumination: IlluminationField::Uniform,
            noise_read: 0.0,
            noise_shot: 0.0,
            seed: 0,
        }
    }
}

impl DegradationSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0) {
            return Err(Error::InvalidArgument(format!("gamma must be positive, got {}", self.gamma)));
        }
        if !(self.attenuation > 0.0 && self.attenuation <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "attenuation must be in (0, 1], got {}",
                self.attenuation
            )));
        }
        if self.noise_read < 0.0 || self.noise_shot < 0.0 {
            return Err(Error::InvalidArgument("noise parameters must be non-negative".into()));
        }
        self.illumination.validate()
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self {
            seed,
            ..self.clone()
        }
    }
}

/// `clamp(attenuation · illumination · image^gamma + shot + read, 0, 1)`.
pub fn apply_degradation(image: &RgbImage, spec: &DegradationSpec) -> Result<RgbImage> {
    spec.validate()?;
    let (w, h) = image.dims();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let read = (spec.noise_read > 0.0)
        .then(|| Normal::new(0.0, spec.noise_read).expect("positive std"));
    let mut out = image.clone();
    for y in 0..h {
        for x in 0..w {
            let gain = spec.attenuation * spec.illumination.at(x, y, w, h);
            let mut px = image.pixel(x, y);
            for v in &mut px {
                let clean = gain * v.max(0.0).powf(spec.gamma);
                let mut noisy = clean;
                if spec.noise_shot > 0.0 {
                    let lambda = clean * spec.noise_shot;
                    noisy = if lambda > 0.0 {
                        Poisson::new(lambda).expect("positive rate").sample(&mut rng) / spec.noise_shot
                    } else {
                        0.0
                    };
                }
                if let Some(n) = &read {
                    noisy += n.sample(&mut rng);
                }
                *v = noisy.clamp(0.0, 1.0);
            }
            out.set_pixel(x, y, px);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ramp() -> RgbImage {
        RgbImage::from_fn(16, 12, |x, y| [x as f64 / 15.0, y as f64 / 11.0, 0.5])
    }

    #[test]
    fn identity_spec() {
        let img = ramp();
        assert_eq!(apply_degradation(&img, &DegradationSpec::default()).unwrap(), img);
    }

    #[test]
    fn attenuation_only() {
        let img = RgbImage::filled(8, 8, [1.0; 3]);
        let spec = DegradationSpec {
            attenuation: 0.1,
            ..Default::default()
        };
        let out = apply_degradation(&img, &spec).unwrap();
        assert!(out.data().iter().all(|&v| (v - 0.1).abs() < 1e-15));
    }

    #[test]
    fn noise_is_seeded() {
        let spec = DegradationSpec {
            attenuation: 0.3,
            noise_read: 0.02,
            noise_shot: 200.0,
            seed: 4,
            ..Default::default()
        };
        let img = ramp();
        let a = apply_degradation(&img, &spec).unwrap();
        let b = apply_degradation(&img, &spec).unwrap();
        let c = apply_degradation(&img, &spec.with_seed(5)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn invalid_specs() {
        let img = ramp();
        for spec in [
            DegradationSpec { gamma: 0.0, ..Default::default() },
            DegradationSpec { attenuation: 1.5, ..Default::default() },
            DegradationSpec { illumination: IlluminationField::Radial { edge: 0.0 }, ..Default::default() },
        ] {
            assert!(apply_degradation(&img, &spec).is_err());
        }
    }

    proptest! {
        #[test]
        fn monotone_without_noise(
            gamma in 0.3f64..3.0,
            att in 0.01f64..1.0,
            edge in 0.1f64..1.0,
            a in 0.0f64..1.0,
            b in 0.0f64..1.0,
        ) {
            let spec = DegradationSpec {
                gamma, attenuation: att,
                illumination: IlluminationField::Radial { edge },
                ..Default::default()
            };
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            let ilo = RgbImage::filled(9, 9, [lo; 3]);
            let ihi = RgbImage::filled(9, 9, [hi; 3]);
            let olo = apply_degradation(&ilo, &spec).unwrap();
            let ohi = apply_degradation(&ihi, &spec).unwrap();
            prop_assert!(olo.data().iter().zip(ohi.data()).all(|(x, y)| x <= y));
        }
    }
}
