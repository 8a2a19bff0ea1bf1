use rand::Rng;

use crate::error::{Error, Result};

/// Square image with interleaved channels, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    side: usize,
    channels: usize,
    values: Vec<f32>,
}

impl ImageTensor {
    pub fn new(side: usize, channels: usize, values: Vec<f32>) -> Result<Self> {
        if side == 0 || channels == 0 {
            return Err(Error::config("image must have a positive side and channel count"));
        }
        if values.len() != side * side * channels {
            return Err(Error::config(format!(
                "image buffer holds {} values, expected {side}x{side}x{channels}",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "image" });
        }
        Ok(ImageTensor {
            side,
            channels,
            values,
        })
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    #[inline]
    pub fn at(&self, row: usize, col: usize, ch: usize) -> f32 {
        self.values[(row * self.side + col) * self.channels + ch]
    }

    pub fn hflip(&self) -> Self {
        let (s, c) = (self.side, self.channels);
        let mut out = vec![0.0; self.values.len()];
        for r in 0..s {
            for x in 0..s {
                let src = (r * s + (s - 1 - x)) * c;
                let dst = (r * s + x) * c;
                out[dst..dst + c].copy_from_slice(&self.values[src..src + c]);
            }
        }
        ImageTensor {
            values: out,
            ..*self
        }
    }

    /// Bilinear resample of the window `(top, left, height, width)` (in
    /// source pixels, fractional allowed) onto a `side x side` canvas.
    pub fn resample(&self, top: f64, left: f64, height: f64, width: f64, side: usize) -> Self {
        let c = self.channels;
        let max = (self.side - 1) as f64;
        let mut out = vec![0.0f32; side * side * c];
        for r in 0..side {
            let sy = (top + (r as f64 + 0.5) * height / side as f64 - 0.5).clamp(0.0, max);
            let (y0, fy) = (sy.floor() as usize, sy - sy.floor());
            let y1 = (y0 + 1).min(self.side - 1);
            for x in 0..side {
                let sx = (left + (x as f64 + 0.5) * width / side as f64 - 0.5).clamp(0.0, max);
                let (x0, fx) = (sx.floor() as usize, sx - sx.floor());
                let x1 = (x0 + 1).min(self.side - 1);
                for ch in 0..c {
                    let v = (1.0 - fy) * ((1.0 - fx) * self.at(y0, x0, ch) as f64 + fx * self.at(y0, x1, ch) as f64)
                        + fy * ((1.0 - fx) * self.at(y1, x0, ch) as f64 + fx * self.at(y1, x1, ch) as f64);
                    out[(r * side + x) * c + ch] = v as f32;
                }
            }
        }
        ImageTensor {
            side,
            channels: c,
            values: out,
        }
    }

    /// Whole-image resize.
    pub fn resize(&self, side: usize) -> Self {
        if side == self.side {
            return self.clone();
        }
        self.resample(0.0, 0.0, self.side as f64, self.side as f64, side)
    }
}

/// Random resized crop (area fraction in `[min_area, 1]`, aspect ratio in
/// `[3/4, 4/3]`) followed by a horizontal flip with probability one half.
pub fn augment(img: &ImageTensor, side: usize, min_area: f64, rng: &mut impl Rng) -> ImageTensor {
    let s = img.side() as f64;
    let area = s * s;
    let (log_lo, log_hi) = ((3.0f64 / 4.0).ln(), (4.0f64 / 3.0).ln());
    let mut window = None;
    for _ in 0..10 {
        let target = area * rng.random_range(min_area..=1.0);
        let aspect = rng.random_range(log_lo..=log_hi).exp();
        let w = (target * aspect).sqrt();
        let h = (target / aspect).sqrt();
        if w <= s && h <= s {
            let top = rng.random_range(0.0..=(s - h));
            let left = rng.random_range(0.0..=(s - w));
            window = Some((top, left, h, w));
            break;
        }
    }
    let (top, left, h, w) = window.unwrap_or((0.0, 0.0, s, s));
    let out = img.resample(top, left, h, w, side);
    if rng.random_bool(0.5) {
        out.hflip()
    } else {
        out
    }
}
