use crate::error::{Error, Result};
use crate::image::RgbImage;

/// Overlap weights of each output cell with the source cells along one axis.
fn area_weights(src: usize, dst: usize) -> Vec<Vec<(usize, f64)>> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|o| {
            let (a, b) = (o as f64 * scale, (o + 1) as f64 * scale);
            let mut w = Vec::new();
            let mut i = a.floor() as usize;
            while (i as f64) < b && i < src {
                let overlap = (b.min(i as f64 + 1.0) - a.max(i as f64)).max(0.0);
                if overlap > 0.0 {
                    w.push((i, overlap / scale));
                }
                i += 1;
            }
            w
        })
        .collect()
}

/// Area-average resampling to a smaller (or equal) size.
pub fn downsample(image: &RgbImage, target: (usize, usize)) -> Result<RgbImage> {
    let (tw, th) = target;
    let (sw, sh) = image.dims();
    if tw == 0 || th == 0 || tw > sw || th > sh {
        return Err(Error::InvalidArgument(format!(
            "downsample target {tw}x{th} must be non-empty and no larger than {sw}x{sh}"
        )));
    }
    let wx = area_weights(sw, tw);
    let wy = area_weights(sh, th);
    // Horizontal pass.
    let mut tmp = vec![0.0; sh * tw * 3];
    for y in 0..sh {
        for (x, ws) in wx.iter().enumerate() {
            let mut acc = [0.0; 3];
            for &(sx, w) in ws {
                let p = image.pixel(sx, y);
                for c in 0..3 {
                    acc[c] += w * p[c];
                }
            }
            tmp[(y * tw + x) * 3..(y * tw + x) * 3 + 3].copy_from_slice(&acc);
        }
    }
    let mut out = vec![0.0; th * tw * 3];
    for (y, ws) in wy.iter().enumerate() {
        for x in 0..tw {
            for &(sy, w) in ws {
                for c in 0..3 {
                    out[(y * tw + x) * 3 + c] += w * tmp[(sy * tw + x) * 3 + c];
                }
            }
        }
    }
    for v in &mut out {
        *v = v.clamp(0.0, 1.0);
    }
    Ok(RgbImage::new(tw, th, out))
}
