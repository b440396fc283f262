use serde::{Deserialize, Serialize};

use super::{mismatch, BinaryMask, CloudError, DepthImage};

/// Boundary masking used before texture projection.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MaskConfig {
    /// Gaussian width of the LoG filter (pixels).
    pub sigma: f64,
    /// |LoG response| above this (meters) marks a boundary.
    pub threshold: f64,
    /// Dilation radius (pixels) applied to the boundary mask.
    pub dilation_radius: f64,
    /// Radius multiplier for views that overlap another view.
    pub overlap_multiplier: f64,
}

impl Default for MaskConfig {
    fn default() -> Self {
        Self { sigma: 1.5, threshold: 0.05, dilation_radius: 2.0, overlap_multiplier: 2.0 }
    }
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as i64;
    (-r..=r).map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp()).collect()
}

/// Separable 1D pass over `src`; samples outside the image are skipped.
fn convolve(src: &[f64], w: usize, h: usize, kernel: &[f64], horizontal: bool) -> Vec<f64> {
    let r = (kernel.len() / 2) as i64;
    let mut out = vec![0.0; src.len()];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (k, g) in kernel.iter().enumerate() {
                let o = k as i64 - r;
                let (sx, sy) = if horizontal { (x as i64 + o, y as i64) } else { (x as i64, y as i64 + o) };
                if sx < 0 || sy < 0 || sx >= w as i64 || sy >= h as i64 {
                    continue;
                }
                acc += g * src[sy as usize * w + sx as usize];
            }
            out[y * w + x] = acc;
        }
    }
    out
}

/// Gaussian blur normalised over valid pixels only; `None` where no valid
/// pixel lies under the kernel.
fn valid_blur(depth: &DepthImage, sigma: f64) -> Vec<Option<f64>> {
    let (w, h) = (depth.width() as usize, depth.height() as usize);
    let kernel = gaussian_kernel(sigma);
    let values: Vec<f64> = depth.depths().iter().map(|d| *d as f64).collect();
    let weights: Vec<f64> = depth.depths().iter().map(|d| if *d > 0.0 { 1.0 } else { 0.0 }).collect();
    let num = convolve(&convolve(&values, w, h, &kernel, true), w, h, &kernel, false);
    let den = convolve(&convolve(&weights, w, h, &kernel, true), w, h, &kernel, false);
    num.iter().zip(&den).map(|(n, d)| (*d > 1e-12).then(|| n / d)).collect()
}

/// Pixels where the Laplacian of the Gaussian-blurred depth exceeds
/// `threshold` in magnitude, plus every invalid pixel.
///
/// Neighbours outside the image or without a blurred value contribute
/// nothing to the 4-neighbour Laplacian.
pub fn boundary_mask(depth: &DepthImage, sigma: f64, threshold: f64) -> Result<BinaryMask, CloudError> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(CloudError::InvalidInput("sigma must be positive".into()));
    }
    if threshold.is_nan() {
        return Err(CloudError::InvalidInput("threshold is NaN".into()));
    }
    let (w, h) = (depth.width() as usize, depth.height() as usize);
    let blurred = valid_blur(depth, sigma);
    let mut mask = BinaryMask::empty(depth.width(), depth.height());
    for y in 0..h {
        for x in 0..w {
            let (col, row) = (x as u32, y as u32);
            let Some(c) = blurred[y * w + x].filter(|_| depth.is_valid(col, row)) else {
                mask.set(col, row, true);
                continue;
            };
            let mut lap = 0.0;
            for (dx, dy) in [(-1i64, 0i64), (1, 0), (0, -1), (0, 1)] {
                let (nx, ny) = (x as i64 + dx, y as i64 + dy);
                if nx < 0 || ny < 0 || nx >= w as i64 || ny >= h as i64 {
                    continue;
                }
                if let Some(n) = blurred[ny as usize * w + nx as usize] {
                    lap += n - c;
                }
            }
            if lap.abs() > threshold {
                mask.set(col, row, true);
            }
        }
    }
    Ok(mask)
}

/// Sets every pixel within Euclidean distance `radius` of a set pixel.
pub fn dilate(mask: &BinaryMask, radius: f64) -> BinaryMask {
    let r = radius.max(0.0).floor() as i64;
    let r2 = radius * radius;
    let (w, h) = (mask.width() as i64, mask.height() as i64);
    let mut out = mask.clone();
    for y in 0..h {
        for x in 0..w {
            if !mask.get(x as u32, y as u32) {
                continue;
            }
            for dy in -r..=r {
                for dx in -r..=r {
                    let (nx, ny) = (x + dx, y + dy);
                    if nx >= 0 && ny >= 0 && nx < w && ny < h && (dx * dx + dy * dy) as f64 <= r2 {
                        out.set(nx as u32, ny as u32, true);
                    }
                }
            }
        }
    }
    out
}

/// Boundary mask dilated by the configured radius, enlarged for views that
/// overlap another view.
pub fn texture_mask(depth: &DepthImage, config: &MaskConfig, overlapping: bool) -> Result<BinaryMask, CloudError> {
    let mask = boundary_mask(depth, config.sigma, config.threshold)?;
    let radius = if overlapping { config.dilation_radius * config.overlap_multiplier } else { config.dilation_radius };
    Ok(dilate(&mask, radius))
}

/// Pixels excluded from texture projection: either depth is invalid or the two
/// depths differ by more than `tau_d`.
pub fn depth_consistency_mask(rendered: &DepthImage, observed: &DepthImage, tau_d: f64) -> Result<BinaryMask, CloudError> {
    if rendered.dims() != observed.dims() {
        return Err(mismatch(observed.dims(), rendered.dims()));
    }
    let bits = rendered
        .depths()
        .iter()
        .zip(observed.depths())
        .map(|(r, o)| *r <= 0.0 || *o <= 0.0 || (*r as f64 - *o as f64).abs() > tau_d)
        .collect();
    BinaryMask::new(rendered.width(), rendered.height(), bits)
}
