//! Planar RGB f64 image buffer with the resampling primitives shared by
//! augmentation, the synthetic generator, and the evaluation protocol.
//!
//! Layout is `[3, height, width]` (channel-major), values nominally in
//! [0, 1]; this maps one-to-one onto the NCHW tensors the model consumes.

use std::path::Path;

use crate::error::{CoreError, Result};
use crate::micrograd::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct ImageF {
    pub width: usize,
    pub height: usize,
    /// Channel-major: `data[(c * height + y) * width + x]`.
    pub data: Vec<f64>,
}

/// Per-axis source taps for bilinear resampling (align_corners = false,
/// edge clamped). Shared by every resize in the crate.
pub fn bilinear_taps(src_len: usize, dst_len: usize) -> Vec<(usize, usize, f64)> {
    let ratio = src_len as f64 / dst_len as f64;
    (0..dst_len)
        .map(|d| {
            let s = ((d as f64 + 0.5) * ratio - 0.5).clamp(0.0, (src_len - 1) as f64);
            let lo = s.floor() as usize;
            let hi = (lo + 1).min(src_len - 1);
            (lo, hi, s - lo as f64)
        })
        .collect()
}

impl ImageF {
    pub fn new(width: usize, height: usize) -> ImageF {
        ImageF {
            width,
            height,
            data: vec![0.0; 3 * width * height],
        }
    }

    pub fn filled(width: usize, height: usize, rgb: [f64; 3]) -> ImageF {
        let mut img = ImageF::new(width, height);
        for c in 0..3 {
            img.data[c * width * height..(c + 1) * width * height].fill(rgb[c]);
        }
        img
    }

    #[inline]
    pub fn get(&self, c: usize, x: usize, y: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, x: usize, y: usize, v: f64) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        &self.data[c * self.width * self.height..(c + 1) * self.width * self.height]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [f64] {
        &mut self.data[c * self.width * self.height..(c + 1) * self.width * self.height]
    }

    pub fn map_pixels(&mut self, f: impl Fn(usize, f64) -> f64) {
        let hw = self.width * self.height;
        for (i, v) in self.data.iter_mut().enumerate() {
            *v = f(i / hw, *v);
        }
    }

    pub fn clamp01(&mut self) {
        for v in &mut self.data {
            *v = v.clamp(0.0, 1.0);
        }
    }

    pub fn mean_rgb(&self) -> [f64; 3] {
        let hw = (self.width * self.height) as f64;
        let mut out = [0.0; 3];
        for (c, o) in out.iter_mut().enumerate() {
            *o = self.plane(c).iter().sum::<f64>() / hw;
        }
        out
    }

    /// Image entropy estimate in bits per pixel: Shannon entropy of the
    /// histogram of 8-bit luma differences between horizontal and vertical
    /// neighbors. Differencing is a first-order predictor, so this
    /// approximates the entropy *rate* of the image rather than the marginal
    /// pixel histogram entropy — the former drops when resolution is lost
    /// (smooth upsampled images are nearly perfectly predictable from their
    /// neighbors), while the latter is blind to spatial structure.
    pub fn entropy(&self) -> f64 {
        let (w, h) = (self.width, self.height);
        let mut luma = vec![0i32; w * h];
        let (r, g, b) = (self.plane(0), self.plane(1), self.plane(2));
        for i in 0..w * h {
            let y = 0.299 * r[i] + 0.587 * g[i] + 0.114 * b[i];
            luma[i] = (y.clamp(0.0, 1.0) * 255.0).round() as i32;
        }
        // Differences span -255..=255.
        let mut hist = [0u64; 511];
        let mut total = 0u64;
        for y in 0..h {
            for x in 0..w {
                if x + 1 < w {
                    let d = luma[y * w + x + 1] - luma[y * w + x];
                    hist[(d + 255) as usize] += 1;
                    total += 1;
                }
                if y + 1 < h {
                    let d = luma[(y + 1) * w + x] - luma[y * w + x];
                    hist[(d + 255) as usize] += 1;
                    total += 1;
                }
            }
        }
        let n = total.max(1) as f64;
        hist.iter()
            .filter(|&&c| c > 0)
            .map(|&c| {
                let p = c as f64 / n;
                -p * p.log2()
            })
            .sum()
    }

    /// Bilinear resample to a new size (align_corners = false).
    pub fn resize_bilinear(&self, new_w: usize, new_h: usize) -> ImageF {
        assert!(new_w > 0 && new_h > 0, "resize to zero size");
        let ytaps = bilinear_taps(self.height, new_h);
        let xtaps = bilinear_taps(self.width, new_w);
        let mut out = ImageF::new(new_w, new_h);
        for c in 0..3 {
            let src = self.plane(c);
            let dst = out.plane_mut(c);
            for (oy, &(y0, y1, fy)) in ytaps.iter().enumerate() {
                let r0 = &src[y0 * self.width..(y0 + 1) * self.width];
                let r1 = &src[y1 * self.width..(y1 + 1) * self.width];
                for (ox, &(x0, x1, fx)) in xtaps.iter().enumerate() {
                    let top = r0[x0] * (1.0 - fx) + r0[x1] * fx;
                    let bot = r1[x0] * (1.0 - fx) + r1[x1] * fx;
                    dst[oy * new_w + ox] = top * (1.0 - fy) + bot * fy;
                }
            }
        }
        out
    }

    pub fn flip_horizontal(&self) -> ImageF {
        let mut out = ImageF::new(self.width, self.height);
        for c in 0..3 {
            for y in 0..self.height {
                for x in 0..self.width {
                    let v = self.get(c, self.width - 1 - x, y);
                    out.set(c, x, y, v);
                }
            }
        }
        out
    }

    /// Separable Gaussian blur; sigma <= 0 returns a plain copy.
    pub fn gaussian_blur(&self, sigma: f64) -> ImageF {
        if sigma <= 0.0 {
            return self.clone();
        }
        let radius = (3.0 * sigma).ceil() as isize;
        let mut kernel = Vec::with_capacity((2 * radius + 1) as usize);
        let mut sum = 0.0;
        for i in -radius..=radius {
            let v = (-(i as f64) * (i as f64) / (2.0 * sigma * sigma)).exp();
            kernel.push(v);
            sum += v;
        }
        for v in &mut kernel {
            *v /= sum;
        }
        let (w, h) = (self.width as isize, self.height as isize);
        let mut tmp = ImageF::new(self.width, self.height);
        for c in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    let mut acc = 0.0;
                    for (ki, kv) in kernel.iter().enumerate() {
                        let sx = (x + ki as isize - radius).clamp(0, w - 1);
                        acc += kv * self.get(c, sx as usize, y as usize);
                    }
                    tmp.set(c, x as usize, y as usize, acc);
                }
            }
        }
        let mut out = ImageF::new(self.width, self.height);
        for c in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    let mut acc = 0.0;
                    for (ki, kv) in kernel.iter().enumerate() {
                        let sy = (y + ki as isize - radius).clamp(0, h - 1);
                        acc += kv * tmp.get(c, x as usize, sy as usize);
                    }
                    out.set(c, x as usize, y as usize, acc);
                }
            }
        }
        out
    }

    /// Mean squared first-difference of luma; a proxy for high-frequency
    /// content that drops as images are blurred or down-sampled.
    pub fn gradient_energy(&self) -> f64 {
        if self.width < 2 || self.height < 2 {
            return 0.0;
        }
        let luma = |x: usize, y: usize| -> f64 {
            0.299 * self.get(0, x, y) + 0.587 * self.get(1, x, y) + 0.114 * self.get(2, x, y)
        };
        let mut acc = 0.0;
        let mut n = 0usize;
        for y in 0..self.height - 1 {
            for x in 0..self.width - 1 {
                let v = luma(x, y);
                let dx = luma(x + 1, y) - v;
                let dy = luma(x, y + 1) - v;
                acc += dx * dx + dy * dy;
                n += 1;
            }
        }
        acc / n as f64
    }

    /// `[1, 3, H, W]` tensor view of the image (no gradient tracking).
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(&[1, 3, self.height, self.width], self.data.clone(), false)
            .expect("image tensor shape")
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let mut buf = image::RgbImage::new(self.width as u32, self.height as u32);
        for y in 0..self.height {
            for x in 0..self.width {
                let px = [
                    to_u8(self.get(0, x, y)),
                    to_u8(self.get(1, x, y)),
                    to_u8(self.get(2, x, y)),
                ];
                buf.put_pixel(x as u32, y as u32, image::Rgb(px));
            }
        }
        buf.save(path)
            .map_err(|e| CoreError::format(path.display().to_string(), e.to_string()))
    }

    pub fn load_png(path: &Path) -> Result<ImageF> {
        let img = image::open(path)
            .map_err(|e| CoreError::format(path.display().to_string(), e.to_string()))?
            .into_rgb8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        let mut out = ImageF::new(w, h);
        for y in 0..h {
            for x in 0..w {
                let px = img.get_pixel(x as u32, y as u32);
                for c in 0..3 {
                    out.set(c, x, y, px.0[c] as f64 / 255.0);
                }
            }
        }
        Ok(out)
    }
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn resize_identity_preserves_pixels() {
        let mut img = ImageF::new(4, 3);
        for (i, v) in img.data.iter_mut().enumerate() {
            *v = i as f64 / 36.0;
        }
        let same = img.resize_bilinear(4, 3);
        assert_eq!(img, same);
    }

    #[test]
    fn double_flip_is_identity() {
        let mut img = ImageF::new(5, 4);
        for (i, v) in img.data.iter_mut().enumerate() {
            *v = (i as f64 * 0.137).fract();
        }
        assert_eq!(img.flip_horizontal().flip_horizontal(), img);
    }

    #[test]
    fn constant_image_survives_resize_exactly() {
        let img = ImageF::filled(7, 5, [0.25, 0.5, 0.75]);
        let r = img.resize_bilinear(13, 3);
        for c in 0..3 {
            for v in r.plane(c) {
                assert!((v - img.get(c, 0, 0)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gradient_energy_drops_after_blur() {
        let mut img = ImageF::new(32, 32);
        // Checkerboard: maximal high-frequency content.
        for y in 0..32 {
            for x in 0..32 {
                let v = ((x + y) % 2) as f64;
                for c in 0..3 {
                    img.set(c, x, y, v);
                }
            }
        }
        let sharp = img.gradient_energy();
        let blurred = img.gaussian_blur(1.5).gradient_energy();
        assert!(blurred < sharp * 0.2, "{blurred} vs {sharp}");
    }

    #[test]
    fn png_round_trip_preserves_quantized_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.png");
        let mut img = ImageF::new(6, 4);
        for (i, v) in img.data.iter_mut().enumerate() {
            *v = (i % 256) as f64 / 255.0;
        }
        img.save_png(&path).unwrap();
        let back = ImageF::load_png(&path).unwrap();
        assert_eq!(back.width, 6);
        assert_eq!(back.height, 4);
        for (a, b) in img.data.iter().zip(&back.data) {
            assert!((a - b).abs() < 0.5 / 255.0 + 1e-9);
        }
    }
}
