//! Image quality metrics and the Gaussian-count memory proxy.

use crate::error::{Error, Result};
use crate::scene::ImageRgb;

/// PSNR returned for exactly identical images.
pub const PSNR_IDENTICAL_SENTINEL: f64 = 99.0;

/// SSIM dynamic range and stability constants (K1, K2 for range 1).
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;
const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;

fn check_dims(a: &ImageRgb, b: &ImageRgb) -> Result<()> {
    if a.width != b.width || a.height != b.height {
        return Err(Error::InvalidInput(format!(
            "image dimensions differ: {}x{} vs {}x{}",
            a.width, a.height, b.width, b.height
        )));
    }
    Ok(())
}

/// Peak signal-to-noise ratio in dB over all channels, `10*log10(1/MSE)`.
/// Identical images return [`PSNR_IDENTICAL_SENTINEL`].
pub fn psnr(a: &ImageRgb, b: &ImageRgb) -> Result<f64> {
    check_dims(a, b)?;
    let mut se = 0.0;
    for (pa, pb) in a.data.iter().zip(&b.data) {
        for c in 0..3 {
            let d = pa[c] - pb[c];
            se += d * d;
        }
    }
    if se == 0.0 {
        return Ok(PSNR_IDENTICAL_SENTINEL);
    }
    let mse = se / (a.data.len() as f64 * 3.0);
    Ok(10.0 * (1.0 / mse).log10())
}

/// Normalized 11-tap Gaussian window, sigma 1.5.
fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    let mut sum = 0.0;
    for (i, wi) in w.iter_mut().enumerate() {
        let d = i as f64 - c;
        *wi = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
        sum += *wi;
    }
    for wi in &mut w {
        *wi /= sum;
    }
    w
}

fn to_gray(img: &ImageRgb) -> Vec<f64> {
    img.data.iter().map(|c| (c[0] + c[1] + c[2]) / 3.0).collect()
}

/// Single-scale SSIM on channel-mean grayscale, averaged over all valid
/// (fully interior) window positions.
pub fn ssim(a: &ImageRgb, b: &ImageRgb) -> Result<f64> {
    Ok(ssim_with_grad(a, b, false)?.0)
}

/// SSIM plus, optionally, the analytic gradient of the mean SSIM with respect
/// to each grayscale pixel of `a`.
pub fn ssim_with_grad(
    a: &ImageRgb,
    b: &ImageRgb,
    want_grad: bool,
) -> Result<(f64, Option<Vec<f64>>)> {
    check_dims(a, b)?;
    let (w, h) = (a.width as usize, a.height as usize);
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(Error::InvalidInput(format!(
            "image {w}x{h} is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window"
        )));
    }
    let gx = to_gray(a);
    let gy = to_gray(b);
    let win = gaussian_window();
    let positions_x = w - SSIM_WINDOW + 1;
    let positions_y = h - SSIM_WINDOW + 1;
    let n_windows = (positions_x * positions_y) as f64;

    let mut total = 0.0;
    let mut grad = if want_grad { Some(vec![0.0; w * h]) } else { None };

    for wy in 0..positions_y {
        for wx in 0..positions_x {
            // Weighted window statistics centered at (wx+half, wy+half).
            let mut mu_x = 0.0;
            let mut mu_y = 0.0;
            let mut xx = 0.0;
            let mut yy = 0.0;
            let mut xy = 0.0;
            for dy in 0..SSIM_WINDOW {
                for dx in 0..SSIM_WINDOW {
                    let wgt = win[dy] * win[dx];
                    let xi = gx[(wy + dy) * w + (wx + dx)];
                    let yi = gy[(wy + dy) * w + (wx + dx)];
                    mu_x += wgt * xi;
                    mu_y += wgt * yi;
                    xx += wgt * xi * xi;
                    yy += wgt * yi * yi;
                    xy += wgt * xi * yi;
                }
            }
            let var_x = xx - mu_x * mu_x;
            let var_y = yy - mu_y * mu_y;
            let cov = xy - mu_x * mu_y;
            let a1 = 2.0 * mu_x * mu_y + SSIM_C1;
            let a2 = 2.0 * cov + SSIM_C2;
            let b1 = mu_x * mu_x + mu_y * mu_y + SSIM_C1;
            let b2 = var_x + var_y + SSIM_C2;
            let s = (a1 * a2) / (b1 * b2);
            total += s;

            if let Some(g) = grad.as_deref_mut() {
                let denom = b1 * b2;
                for dy in 0..SSIM_WINDOW {
                    for dx in 0..SSIM_WINDOW {
                        let wgt = win[dy] * win[dx];
                        let idx = (wy + dy) * w + (wx + dx);
                        let xi = gx[idx];
                        let yi = gy[idx];
                        let da1 = 2.0 * mu_y * wgt;
                        let da2 = 2.0 * wgt * (yi - mu_y);
                        let db1 = 2.0 * mu_x * wgt;
                        let db2 = 2.0 * wgt * (xi - mu_x);
                        let ds = ((da1 * a2 + a1 * da2) - s * (db1 * b2 + b1 * db2)) / denom;
                        g[idx] += ds / n_windows;
                    }
                }
            }
        }
    }

    Ok((total / n_windows, grad))
}

/// Scalar SSIM of two constants; used as a closed-form oracle in tests and
/// exposed for diagnostics.
pub fn ssim_scalar(x: f64, y: f64) -> f64 {
    let a1 = 2.0 * x * y + SSIM_C1;
    let b1 = x * x + y * y + SSIM_C1;
    // Constant windows have zero variance and covariance.
    let a2 = SSIM_C2;
    let b2 = SSIM_C2;
    (a1 * a2) / (b1 * b2)
}

/// Per-region and global Gaussian counts plus the peak resident count, the
/// desk-scale stand-in for training-time GPU memory.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct MetricReport {
    pub psnr_db: f64,
    pub ssim: f64,
    pub region_gaussian_counts: Vec<usize>,
    pub global_gaussian_count: usize,
    /// Max Gaussians simultaneously resident in any single region's training
    /// run; regions train independently, so one machine holds one region.
    pub peak_resident_gaussians: usize,
}

/// Per-iteration training counters for one region.
#[derive(Debug, Clone, Default, serde::Serialize, serde::Deserialize)]
pub struct TrainingLog {
    pub region: usize,
    pub iterations: Vec<IterationRecord>,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub loss: f64,
    pub gaussian_count: usize,
}

impl TrainingLog {
    pub fn peak_gaussians(&self) -> usize {
        self.iterations.iter().map(|r| r.gaussian_count).max().unwrap_or(0)
    }
}

/// Aggregate counts from per-region clouds and logs.
pub fn memory_report(
    region_counts: &[usize],
    global_count: usize,
    logs: &[TrainingLog],
) -> (Vec<usize>, usize, usize) {
    let peak = logs.iter().map(|l| l.peak_gaussians()).max().unwrap_or(0);
    (region_counts.to_vec(), global_count, peak)
}
