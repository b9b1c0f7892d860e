//! Waveform to grayscale image.
//!
//! The plot is axis-free: sample `k` of `n` lands in column
//! `round(k·(W−1)/(n−1))`, amplitude `v` lands `⌊(H−1)·(v−y_min)/(y_max−y_min)⌋`
//! rows above the bottom edge (clamped), and consecutive points are joined
//! with Bresenham segments. The amplitude range is fixed for every image so
//! absolute levels survive.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::signal::DisturbanceClass;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageSpec {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    /// `(y_min, y_max)` in per-unit.
    pub amp_range: (f64, f64),
    pub line_value: f64,
    pub bg_value: f64,
}

impl Default for ImageSpec {
    fn default() -> Self {
        ImageSpec {
            height: 224,
            width: 224,
            channels: 1,
            amp_range: (-2.2, 2.2),
            line_value: 0.0,
            bg_value: 1.0,
        }
    }
}

impl ImageSpec {
    pub fn square(side: usize) -> Self {
        ImageSpec {
            height: side,
            width: side,
            ..ImageSpec::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 || self.channels == 0 {
            return Err(Error::Config(format!(
                "image dimensions must be positive, got {}x{}x{}",
                self.height, self.width, self.channels
            )));
        }
        let (lo, hi) = self.amp_range;
        if !(lo.is_finite() && hi.is_finite() && lo < hi) {
            return Err(Error::Config(format!("amplitude range ({lo}, {hi}) is not increasing")));
        }
        for v in [self.line_value, self.bg_value] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("pixel intensity {v} is outside [0, 1]")));
            }
        }
        Ok(())
    }

    /// Row index counted from the bottom edge.
    pub fn row_from_bottom(&self, v: f64) -> usize {
        let (lo, hi) = self.amp_range;
        let top = (self.height - 1) as f64;
        let r = (top * (v - lo) / (hi - lo)).floor();
        r.clamp(0.0, top) as usize
    }

    pub fn column(&self, k: usize, n: usize) -> usize {
        if n <= 1 {
            return 0;
        }
        (k as f64 * (self.width - 1) as f64 / (n - 1) as f64).round() as usize
    }
}

/// `H×W×C` raster with intensities in `[0, 1]`, row 0 at the top.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub pixels: Vec<f64>,
    pub source_label: Option<DisturbanceClass>,
}

impl Image {
    pub fn get(&self, row: usize, col: usize, ch: usize) -> f64 {
        self.pixels[(row * self.width + col) * self.channels + ch]
    }

    fn set(&mut self, row: usize, col: usize, v: f64) {
        let base = (row * self.width + col) * self.channels;
        self.pixels[base..base + self.channels].fill(v);
    }

    /// Binary PGM (P5, maxval 255) of channel 0.
    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5 {} {} 255\n", self.width, self.height).into_bytes();
        out.extend(
            self.pixels
                .chunks_exact(self.channels)
                .map(|px| (255.0 * px[0]).round().clamp(0.0, 255.0) as u8),
        );
        out
    }

    pub fn write_pgm(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_pgm()).map_err(|e| Error::io(path, e))
    }
}

/// Draws `samples` onto a fresh canvas.
pub fn rasterize(samples: &[f64], spec: &ImageSpec) -> Result<Image> {
    spec.validate()?;
    if samples.len() < 2 {
        return Err(Error::Data(format!(
            "need at least two samples to draw a trace, got {}",
            samples.len()
        )));
    }
    if let Some(k) = samples.iter().position(|v| !v.is_finite()) {
        return Err(Error::Data(format!("sample {k} is not finite ({})", samples[k])));
    }

    let mut image = Image {
        height: spec.height,
        width: spec.width,
        channels: spec.channels,
        pixels: vec![spec.bg_value; spec.height * spec.width * spec.channels],
        source_label: None,
    };
    let n = samples.len();
    let point = |k: usize| -> (i64, i64) {
        let col = spec.column(k, n) as i64;
        let row = (spec.height - 1 - spec.row_from_bottom(samples[k])) as i64;
        (col, row)
    };
    let mut prev = point(0);
    plot(&mut image, prev, spec.line_value);
    for k in 1..n {
        let next = point(k);
        for p in bresenham(prev, next) {
            plot(&mut image, p, spec.line_value);
        }
        prev = next;
    }
    Ok(image)
}

pub fn rasterize_labelled(samples: &[f64], label: DisturbanceClass, spec: &ImageSpec) -> Result<Image> {
    let mut img = rasterize(samples, spec)?;
    img.source_label = Some(label);
    Ok(img)
}

fn plot(image: &mut Image, (col, row): (i64, i64), v: f64) {
    image.set(row as usize, col as usize, v);
}

/// Integer line from `a` to `b`, both endpoints included.
pub fn bresenham(a: (i64, i64), b: (i64, i64)) -> Vec<(i64, i64)> {
    let (mut x, mut y) = a;
    let dx = (b.0 - a.0).abs();
    let dy = -(b.1 - a.1).abs();
    let sx = if a.0 < b.0 { 1 } else { -1 };
    let sy = if a.1 < b.1 { 1 } else { -1 };
    let mut err = dx + dy;
    let mut out = Vec::with_capacity((dx.max(-dy) + 1) as usize);
    loop {
        out.push((x, y));
        if (x, y) == b {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x += sx;
        }
        if e2 <= dx {
            err += dx;
            y += sy;
        }
    }
    out
}

/// Maps intensities `v → 2v − 1` into an `H×W×C` tensor.
pub fn to_model_input(image: &Image) -> Tensor {
    Tensor::from_parts(
        vec![image.height, image.width, image.channels],
        image.pixels.iter().map(|&v| 2.0 * v - 1.0).collect(),
    )
}
