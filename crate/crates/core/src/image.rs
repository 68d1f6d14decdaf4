//! Floating-point RGB images and 8-bit PNG/JPEG I/O.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Smallest side accepted when loading from disk (one SSIM window).
pub const MIN_LOAD_SIDE: usize = 8;

/// Interleaved RGB image with real-valued channels, nominally in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RgbImage {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), width * height * 3, "RGB buffer size mismatch");
        Self {
            width,
            height,
            data,
        }
    }

    pub fn filled(width: usize, height: usize, rgb: [f64; 3]) -> Self {
        let mut data = Vec::with_capacity(width * height * 3);
        for _ in 0..width * height {
            data.extend_from_slice(&rgb);
        }
        Self::new(width, height, data)
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> [f64; 3]) -> Self {
        let mut data = Vec::with_capacity(width * height * 3);
        for y in 0..height {
            for x in 0..width {
                data.extend_from_slice(&f(x, y));
            }
        }
        Self::new(width, height, data)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f64; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [f64; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> RgbImage {
        RgbImage::new(self.width, self.height, self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn clamped(&self) -> RgbImage {
        self.map(|v| v.clamp(0.0, 1.0))
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    pub fn in_unit_range(&self) -> bool {
        self.data.iter().all(|v| (0.0..=1.0).contains(v))
    }

    /// Planar `[3, h, w]` tensor.
    pub fn to_tensor(&self) -> Tensor {
        let hw = self.width * self.height;
        let mut data = vec![0.0; 3 * hw];
        for (p, px) in self.data.chunks_exact(3).enumerate() {
            for c in 0..3 {
                data[c * hw + p] = px[c];
            }
        }
        Tensor::new(&[3, self.height, self.width], data)
    }

    pub fn from_tensor(t: &Tensor) -> RgbImage {
        let (c, h, w) = t.chw();
        assert_eq!(c, 3, "expected a 3-channel tensor");
        let hw = h * w;
        let mut data = vec![0.0; 3 * hw];
        for p in 0..hw {
            for ch in 0..3 {
                data[p * 3 + ch] = t.data()[ch * hw + p];
            }
        }
        RgbImage::new(w, h, data)
    }

    /// Sub-image with top-left corner `(x0, y0)`.
    pub fn crop(&self, x0: usize, y0: usize, w: usize, h: usize) -> RgbImage {
        assert!(x0 + w <= self.width && y0 + h <= self.height);
        RgbImage::from_fn(w, h, |x, y| self.pixel(x0 + x, y0 + y))
    }

    pub fn load(path: &Path) -> Result<RgbImage> {
        let img = image::open(path).map_err(|e| Error::Image {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        let rgb = img.to_rgb8();
        let (w, h) = (rgb.width() as usize, rgb.height() as usize);
        if w < MIN_LOAD_SIDE || h < MIN_LOAD_SIDE {
            return Err(Error::Image {
                path: path.to_path_buf(),
                message: format!("{w}x{h} is below the {MIN_LOAD_SIDE}-pixel minimum side"),
            });
        }
        let data = rgb.as_raw().iter().map(|&v| v as f64 / 255.0).collect();
        Ok(RgbImage::new(w, h, data))
    }

    /// 8-bit quantized bytes (clamped, rounded).
    pub fn to_rgb8(&self) -> Vec<u8> {
        self.data
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect()
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let buf = image::RgbImage::from_raw(self.width as u32, self.height as u32, self.to_rgb8())
            .expect("buffer sized from dimensions");
        buf.save_with_format(path, image::ImageFormat::Png)
            .map_err(|e| Error::Image {
                path: path.to_path_buf(),
                message: e.to_string(),
            })
    }
}

/// Write a single-channel plane as a grayscale heatmap, min–max normalized.
pub fn save_heatmap(plane: &[f64], width: usize, height: usize, path: &Path) -> Result<()> {
    let lo = plane.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = plane.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let img = RgbImage::from_fn(width, height, |x, y| {
        let v = (plane[y * width + x] - lo) / span;
        // black -> red -> yellow -> white
        [(3.0 * v).min(1.0), (3.0 * v - 1.0).clamp(0.0, 1.0), (3.0 * v - 2.0).clamp(0.0, 1.0)]
    });
    img.save_png(path)
}
