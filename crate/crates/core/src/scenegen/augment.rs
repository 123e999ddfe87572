//! Training-time image corruption: Gaussian blur, Gaussian noise, block
//! transform compression, and brightness scaling, applied in that order.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Real;
use crate::scenegen::Image;

/// Corruption strengths. Zero (or `None`) disables a stage; an all-off
/// config returns the input unchanged.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    /// Standard deviation of the blur kernel in pixels.
    pub blur_sigma: Real,
    /// Standard deviation of the additive noise in intensity units.
    pub noise_sigma: Real,
    /// Block-transform quantization quality in [1, 100], or `None` to skip.
    pub compression_quality: Option<u8>,
    /// Multiplier on all intensities.
    pub brightness: Real,
    /// Half-width of a uniform perturbation added to `brightness` per call.
    pub brightness_jitter: Real,
}

impl AugmentConfig {
    pub fn off() -> Self {
        Self {
            blur_sigma: 0.0,
            noise_sigma: 0.0,
            compression_quality: None,
            brightness: 1.0,
            brightness_jitter: 0.0,
        }
    }

    /// Mild corruption used while training the pose estimator.
    pub fn training_default() -> Self {
        Self {
            blur_sigma: 0.6,
            noise_sigma: 0.01,
            compression_quality: Some(85),
            brightness: 1.0,
            brightness_jitter: 0.15,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.blur_sigma < 0.0 || !self.blur_sigma.is_finite() {
            return Err(Error::param(
                "blur_sigma",
                format!("{} must be finite and nonnegative", self.blur_sigma),
            ));
        }
        if self.noise_sigma < 0.0 || !self.noise_sigma.is_finite() {
            return Err(Error::param(
                "noise_sigma",
                format!("{} must be finite and nonnegative", self.noise_sigma),
            ));
        }
        if let Some(q) = self.compression_quality {
            if !(1..=100).contains(&q) {
                return Err(Error::param(
                    "compression_quality",
                    format!("{} must lie in [1, 100]", q),
                ));
            }
        }
        if self.brightness < 0.0 || !self.brightness.is_finite() {
            return Err(Error::param(
                "brightness",
                format!("{} must be finite and nonnegative", self.brightness),
            ));
        }
        if self.brightness_jitter < 0.0
            || !self.brightness_jitter.is_finite()
            || self.brightness_jitter > self.brightness
        {
            return Err(Error::param(
                "brightness_jitter",
                format!(
                    "{} must lie in [0, brightness = {}]",
                    self.brightness_jitter, self.brightness
                ),
            ));
        }
        Ok(())
    }

    fn is_identity(&self) -> bool {
        self.blur_sigma == 0.0
            && self.noise_sigma == 0.0
            && self.compression_quality.is_none()
            && self.brightness == 1.0
            && self.brightness_jitter == 0.0
    }
}

/// Corrupt an image. Deterministic for a given RNG state; output values are
/// clipped to [0, 1].
pub fn augment(image: &Image, config: &AugmentConfig, rng: &mut impl Rng) -> Result<Image> {
    config.validate()?;
    if config.is_identity() {
        return Ok(image.clone());
    }
    // All random draws happen in a fixed order (brightness factor, then
    // noise), in f64, so the stream is identical across float widths.
    let factor = if config.brightness_jitter > 0.0 {
        let j = config.brightness_jitter as f64;
        (config.brightness as f64 + rng.gen_range(-j..=j)) as Real
    } else {
        config.brightness
    };
    let mut out = image.clone();
    if config.blur_sigma > 0.0 {
        gaussian_blur(&mut out, config.blur_sigma);
    }
    if config.noise_sigma > 0.0 {
        let normal = Normal::new(0.0_f64, config.noise_sigma as f64)
            .map_err(|e| Error::param("noise_sigma", e.to_string()))?;
        for v in out.data.iter_mut() {
            *v += normal.sample(rng) as Real;
        }
    }
    if let Some(q) = config.compression_quality {
        block_quantize(&mut out, q);
    }
    if factor != 1.0 {
        for v in out.data.iter_mut() {
            *v *= factor;
        }
    }
    for v in out.data.iter_mut() {
        *v = v.clamp(0.0, 1.0);
    }
    Ok(out)
}

fn gaussian_kernel(sigma: Real) -> Vec<Real> {
    let radius = (3.0 * sigma).ceil() as i64;
    let mut kernel = Vec::with_capacity((2 * radius + 1) as usize);
    let denom = 2.0 * sigma * sigma;
    for i in -radius..=radius {
        let d = i as Real;
        kernel.push((-d * d / denom).exp());
    }
    let sum: Real = kernel.iter().sum();
    for k in kernel.iter_mut() {
        *k /= sum;
    }
    kernel
}

fn gaussian_blur(image: &mut Image, sigma: Real) {
    let kernel = gaussian_kernel(sigma);
    let radius = (kernel.len() / 2) as i64;
    let (h, w) = (image.height as i64, image.width as i64);
    let mut tmp = image.data.clone();
    // Horizontal pass into tmp, vertical pass back into the image; borders
    // clamp to the edge pixel.
    for row in 0..h {
        for col in 0..w {
            for ch in 0..3usize {
                let mut acc = 0.0;
                for (ki, &kv) in kernel.iter().enumerate() {
                    let src = (col + ki as i64 - radius).clamp(0, w - 1);
                    acc += kv * image.data[((row * w + src) * 3) as usize + ch];
                }
                tmp[((row * w + col) * 3) as usize + ch] = acc;
            }
        }
    }
    for row in 0..h {
        for col in 0..w {
            for ch in 0..3usize {
                let mut acc = 0.0;
                for (ki, &kv) in kernel.iter().enumerate() {
                    let src = (row + ki as i64 - radius).clamp(0, h - 1);
                    acc += kv * tmp[((src * w + col) * 3) as usize + ch];
                }
                image.data[((row * w + col) * 3) as usize + ch] = acc;
            }
        }
    }
}

const BLOCK: usize = 8;

/// Standard luminance quantization table for 8x8 transform blocks.
const QUANT_BASE: [Real; 64] = [
    16.0, 11.0, 10.0, 16.0, 24.0, 40.0, 51.0, 61.0, //
    12.0, 12.0, 14.0, 19.0, 26.0, 58.0, 60.0, 55.0, //
    14.0, 13.0, 16.0, 24.0, 40.0, 57.0, 69.0, 56.0, //
    14.0, 17.0, 22.0, 29.0, 51.0, 87.0, 80.0, 62.0, //
    18.0, 22.0, 37.0, 56.0, 68.0, 109.0, 103.0, 77.0, //
    24.0, 35.0, 55.0, 64.0, 81.0, 104.0, 113.0, 92.0, //
    49.0, 64.0, 78.0, 87.0, 103.0, 121.0, 120.0, 101.0, //
    72.0, 92.0, 95.0, 98.0, 112.0, 100.0, 103.0, 99.0,
];

fn quant_table(quality: u8) -> [Real; 64] {
    let q = quality as Real;
    let scale = if quality < 50 { 5000.0 / q } else { 200.0 - 2.0 * q };
    let mut table = [0.0; 64];
    for (t, &base) in table.iter_mut().zip(QUANT_BASE.iter()) {
        *t = ((base * scale + 50.0) / 100.0).clamp(1.0, 255.0);
    }
    table
}

fn dct_matrix() -> [[Real; BLOCK]; BLOCK] {
    let mut m = [[0.0; BLOCK]; BLOCK];
    let n = BLOCK as Real;
    for (k, row) in m.iter_mut().enumerate() {
        let alpha = if k == 0 { (1.0 / n).sqrt() } else { (2.0 / n).sqrt() };
        for (i, v) in row.iter_mut().enumerate() {
            *v = alpha
                * ((std::f64::consts::PI as Real) * (2.0 * i as Real + 1.0) * k as Real
                    / (2.0 * n))
                    .cos();
        }
    }
    m
}

/// Round-trip each 8x8 block per channel through a quantized cosine
/// transform, mimicking lossy compression at the given quality.
fn block_quantize(image: &mut Image, quality: u8) {
    let table = quant_table(quality);
    let dct = dct_matrix();
    let (h, w) = (image.height, image.width);
    let mut block = [[0.0 as Real; BLOCK]; BLOCK];
    for ch in 0..3usize {
        for by in (0..h).step_by(BLOCK) {
            for bx in (0..w).step_by(BLOCK) {
                for (r, row) in block.iter_mut().enumerate() {
                    for (c, v) in row.iter_mut().enumerate() {
                        // Edge blocks replicate the last row/column.
                        let sy = (by + r).min(h - 1);
                        let sx = (bx + c).min(w - 1);
                        *v = image.get(sy, sx, ch) * 255.0 - 128.0;
                    }
                }
                let coeffs = dct2(&dct, &block);
                let mut back = [[0.0; BLOCK]; BLOCK];
                for r in 0..BLOCK {
                    for c in 0..BLOCK {
                        let q = table[r * BLOCK + c];
                        back[r][c] = (coeffs[r][c] / q).round() * q;
                    }
                }
                let restored = idct2(&dct, &back);
                for r in 0..BLOCK {
                    for c in 0..BLOCK {
                        let (sy, sx) = (by + r, bx + c);
                        if sy < h && sx < w {
                            image.set(sy, sx, ch, (restored[r][c] + 128.0) / 255.0);
                        }
                    }
                }
            }
        }
    }
}

fn dct2(m: &[[Real; BLOCK]; BLOCK], x: &[[Real; BLOCK]; BLOCK]) -> [[Real; BLOCK]; BLOCK] {
    // M · X · Mᵀ
    let mut mx = [[0.0; BLOCK]; BLOCK];
    for r in 0..BLOCK {
        for c in 0..BLOCK {
            let mut acc = 0.0;
            for k in 0..BLOCK {
                acc += m[r][k] * x[k][c];
            }
            mx[r][c] = acc;
        }
    }
    let mut out = [[0.0; BLOCK]; BLOCK];
    for r in 0..BLOCK {
        for c in 0..BLOCK {
            let mut acc = 0.0;
            for k in 0..BLOCK {
                acc += mx[r][k] * m[c][k];
            }
            out[r][c] = acc;
        }
    }
    out
}

fn idct2(m: &[[Real; BLOCK]; BLOCK], x: &[[Real; BLOCK]; BLOCK]) -> [[Real; BLOCK]; BLOCK] {
    // Mᵀ · X · M
    let mut mx = [[0.0; BLOCK]; BLOCK];
    for r in 0..BLOCK {
        for c in 0..BLOCK {
            let mut acc = 0.0;
            for k in 0..BLOCK {
                acc += m[k][r] * x[k][c];
            }
            mx[r][c] = acc;
        }
    }
    let mut out = [[0.0; BLOCK]; BLOCK];
    for r in 0..BLOCK {
        for c in 0..BLOCK {
            let mut acc = 0.0;
            for k in 0..BLOCK {
                acc += mx[r][k] * m[k][c];
            }
            out[r][c] = acc;
        }
    }
    out
}
