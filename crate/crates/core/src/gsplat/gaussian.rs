use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::sigmoid;

/// Number of scalar parameters per gaussian in the flat layout.
pub const PARAMS_PER_GAUSSIAN: usize = 14;

/// One anisotropic 3-D gaussian. Scale is stored in log space, opacity as
/// a logit, rotation as a `(w, x, y, z)` quaternion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Gaussian3D {
    pub mean: [f64; 3],
    pub log_scale: [f64; 3],
    pub rotation: [f64; 4],
    pub opacity_logit: f64,
    pub color: [f64; 3],
}

impl Gaussian3D {
    pub fn isotropic(mean: [f64; 3], scale: f64, opacity: f64, color: [f64; 3]) -> Self {
        Self {
            mean,
            log_scale: [scale.ln(); 3],
            rotation: [1.0, 0.0, 0.0, 0.0],
            opacity_logit: logit(opacity),
            color,
        }
    }

    pub fn opacity(&self) -> f64 {
        sigmoid(self.opacity_logit)
    }

    pub fn scale(&self) -> [f64; 3] {
        self.log_scale.map(f64::exp)
    }

    pub fn normalize_rotation(&mut self) {
        let n = self.rotation.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n > 0.0 {
            self.rotation = self.rotation.map(|v| v / n);
        } else {
            self.rotation = [1.0, 0.0, 0.0, 0.0];
        }
    }

    pub fn is_finite(&self) -> bool {
        self.to_flat().iter().all(|v| v.is_finite())
    }

    pub fn to_flat(&self) -> [f64; PARAMS_PER_GAUSSIAN] {
        let mut out = [0.0; PARAMS_PER_GAUSSIAN];
        out[0..3].copy_from_slice(&self.mean);
        out[3..6].copy_from_slice(&self.log_scale);
        out[6..10].copy_from_slice(&self.rotation);
        out[10] = self.opacity_logit;
        out[11..14].copy_from_slice(&self.color);
        out
    }

    pub fn from_flat(v: &[f64]) -> Self {
        Self {
            mean: [v[0], v[1], v[2]],
            log_scale: [v[3], v[4], v[5]],
            rotation: [v[6], v[7], v[8], v[9]],
            opacity_logit: v[10],
            color: [v[11], v[12], v[13]],
        }
    }
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianScene {
    pub gaussians: Vec<Gaussian3D>,
    pub background: [f64; 3],
}

impl GaussianScene {
    pub fn len(&self) -> usize {
        self.gaussians.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gaussians.is_empty()
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.gaussians.iter().flat_map(|g| g.to_flat()).collect()
    }

    pub fn set_flat(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.len() * PARAMS_PER_GAUSSIAN);
        for (g, chunk) in self.gaussians.iter_mut().zip(flat.chunks(PARAMS_PER_GAUSSIAN)) {
            *g = Gaussian3D::from_flat(chunk);
        }
    }

    /// Index of the first gaussian with a non-finite parameter.
    pub fn first_non_finite(&self) -> Option<usize> {
        self.gaussians.iter().position(|g| !g.is_finite())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum InitMode {
    RandomInBox { min: [f64; 3], max: [f64; 3] },
    FromPoints { points: Vec<[f64; 3]>, colors: Option<Vec<[f64; 3]>> },
}

pub const INIT_OPACITY: f64 = 0.1;

/// Mean distance to the (up to) three nearest other means.
fn neighbour_scales(means: &[[f64; 3]], fallback: f64) -> Vec<f64> {
    means
        .iter()
        .enumerate()
        .map(|(i, a)| {
            let mut d: Vec<f64> = means
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != i)
                .map(|(_, b)| ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt())
                .collect();
            d.sort_by(f64::total_cmp);
            d.truncate(3);
            let s = if d.is_empty() { fallback } else { d.iter().sum::<f64>() / d.len() as f64 };
            s.max(1e-4)
        })
        .collect()
}

pub fn init_scene(mode: &InitMode, n: usize, seed: u64, background: [f64; 3]) -> Result<GaussianScene> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (means, colors, fallback) = match mode {
        InitMode::RandomInBox { min, max } => {
            if n == 0 {
                return Err(Error::InvalidArgument("need at least one gaussian".into()));
            }
            if (0..3).any(|i| !(max[i] > min[i])) {
                return Err(Error::InvalidArgument("empty bounding box".into()));
            }
            let means: Vec<[f64; 3]> = (0..n)
                .map(|_| [0, 1, 2].map(|i| rng.random_range(min[i]..max[i])))
                .collect();
            let extent = (0..3).map(|i| max[i] - min[i]).fold(0.0, f64::max);
            (means, vec![[0.5; 3]; n], extent / 10.0)
        }
        InitMode::FromPoints { points, colors } => {
            if points.is_empty() {
                return Err(Error::InvalidArgument("from_points initialization with no points".into()));
            }
            let cols = match colors {
                Some(c) if c.len() == points.len() => c.clone(),
                Some(_) => return Err(Error::InvalidArgument("point colour count mismatch".into())),
                None => vec![[0.5; 3]; points.len()],
            };
            (points.clone(), cols, 0.1)
        }
    };
    let scales = neighbour_scales(&means, fallback);
    let gaussians = means
        .into_iter()
        .zip(colors)
        .zip(scales)
        .map(|((m, c), s)| Gaussian3D::isotropic(m, s, INIT_OPACITY, c))
        .collect();
    Ok(GaussianScene {
        gaussians,
        background,
    })
}
