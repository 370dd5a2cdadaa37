//! Forward Gaussian splatting.
//!
//! 3D Gaussians are projected to screen-space 2D Gaussians with a first-order
//! perspective Jacobian, binned into tiles by their screen footprint,
//! depth-sorted, and alpha-composited front to back. Color, depth, normal and
//! accumulated opacity are produced per pixel.
//!
//! The skip rules are part of the pixel math, not just an optimization: a
//! splat contributes at a pixel only when its Mahalanobis distance is within
//! `footprint_sigma` and its evaluated alpha reaches `alpha_threshold`. That
//! makes tile binning exact — the tiled renderer and the full-sort reference
//! in [`reference`] produce bit-identical images.

pub mod backward;
pub mod reference;

pub use backward::{backward, GaussianGrad};

use crate::error::{Error, Result};
use crate::scene::{sigmoid, Camera, Frame, Gaussian, GaussianCloud, DEPTH_EPSILON};
use nalgebra::{Matrix2, Matrix3, Matrix2x3, Vector2, Vector3};

/// Diagonal regularization added to every projected covariance (px^2); the
/// usual low-pass guard that keeps sub-pixel splats well conditioned.
pub const COV2D_REGULARIZATION: f64 = 0.3;

/// Evaluated per-splat alpha is clamped here to avoid full saturation.
pub const ALPHA_CLAMP: f64 = 0.99;

/// Alpha below which reported depth/normal are zeroed.
pub const COVERAGE_EPSILON: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct RenderOptions {
    /// Square tile edge in pixels.
    pub tile_px: u32,
    /// Per-pixel contributions with evaluated alpha below this are skipped.
    pub alpha_threshold: f64,
    /// Compositing terminates once transmittance drops below this.
    pub transmittance_floor: f64,
    pub background: Vector3<f64>,
    /// Footprint cutoff in Mahalanobis sigmas; contributions beyond it are
    /// dropped and tile binning uses the same radius.
    pub footprint_sigma: f64,
    /// Report depth as the alpha-normalized blend (`true`, default) or the
    /// raw accumulated value.
    pub normalize_depth: bool,
}

impl Default for RenderOptions {
    fn default() -> Self {
        RenderOptions {
            tile_px: 16,
            alpha_threshold: 1.0 / 255.0,
            transmittance_floor: 1e-4,
            background: Vector3::zeros(),
            footprint_sigma: 3.0,
            normalize_depth: true,
        }
    }
}

impl RenderOptions {
    pub fn validate(&self) -> Result<()> {
        if self.tile_px < 1 {
            return Err(Error::InvalidInput("tile_px must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.alpha_threshold)
            || !(0.0..1.0).contains(&self.transmittance_floor)
        {
            return Err(Error::InvalidInput(
                "alpha_threshold and transmittance_floor must lie in [0,1)".into(),
            ));
        }
        if self.footprint_sigma <= 0.0 {
            return Err(Error::InvalidInput("footprint_sigma must be positive".into()));
        }
        Ok(())
    }
}

/// Screen-space realization of a 3D Gaussian.
#[derive(Debug, Clone)]
pub struct Splat2D {
    pub gaussian_index: usize,
    pub mean2d: Vector2<f64>,
    /// Symmetric positive definite after regularization.
    pub cov2d: Matrix2<f64>,
    /// Camera-frame z of the mean.
    pub depth: f64,
    pub color: Vector3<f64>,
    /// Activated opacity in (0,1).
    pub opacity: f64,
    /// Unit normal in the camera frame.
    pub normal_cam: Vector3<f64>,
}

impl Splat2D {
    pub fn max_eigenvalue(&self) -> f64 {
        let a = self.cov2d[(0, 0)];
        let b = self.cov2d[(0, 1)];
        let c = self.cov2d[(1, 1)];
        0.5 * ((a + c) + ((a - c).powi(2) + 4.0 * b * b).sqrt())
    }

    /// Screen-space footprint radius at `sigma` Mahalanobis units.
    pub fn footprint_radius(&self, sigma: f64) -> f64 {
        sigma * self.max_eigenvalue().sqrt()
    }
}

/// First-order perspective Jacobian of the pixel projection at a camera-frame
/// point.
pub(crate) fn projection_jacobian(camera: &Camera, x_cam: &Vector3<f64>) -> Matrix2x3<f64> {
    let z = x_cam.z;
    Matrix2x3::new(
        camera.fx / z,
        0.0,
        -camera.fx * x_cam.x / (z * z),
        0.0,
        camera.fy / z,
        -camera.fy * x_cam.y / (z * z),
    )
}

/// Smallest-eigenvalue axis of the realized covariance, oriented toward the
/// camera. Repeated eigenvalues break ties toward the lowest standard axis.
pub fn gaussian_normal(g: &Gaussian, camera: &Camera) -> Vector3<f64> {
    let cov = g.covariance();
    let eig = cov.symmetric_eigen();
    let min_val = eig.eigenvalues.min();
    let tol = 1e-9 * eig.eigenvalues.max().abs().max(1.0);
    let tied: Vec<usize> = (0..3)
        .filter(|&i| eig.eigenvalues[i] - min_val <= tol)
        .collect();
    let mut normal = if tied.len() == 1 {
        eig.eigenvectors.column(tied[0]).into_owned()
    } else {
        // Project standard axes onto the tied eigen-subspace; take the first
        // axis with a usable projection.
        let mut chosen = eig.eigenvectors.column(tied[0]).into_owned();
        for k in 0..3 {
            let axis = Vector3::from_fn(|i, _| if i == k { 1.0 } else { 0.0 });
            let mut proj = Vector3::zeros();
            for &i in &tied {
                let v = eig.eigenvectors.column(i);
                proj += v * v.dot(&axis);
            }
            if proj.norm() > 1e-6 {
                chosen = proj.normalize();
                break;
            }
        }
        chosen
    };
    normal = normal.normalize();
    let view_dir = g.mean - camera.position();
    if normal.dot(&view_dir) > 0.0 {
        normal = -normal;
    }
    normal
}

/// Project one Gaussian into screen space. Returns `None` when the mean is
/// behind the camera or the whole footprint lies outside the image.
pub fn project_gaussian(camera: &Camera, g: &Gaussian, footprint_sigma: f64) -> Option<Splat2D> {
    project_gaussian_indexed(camera, g, footprint_sigma, 0)
}

pub(crate) fn project_gaussian_indexed(
    camera: &Camera,
    g: &Gaussian,
    footprint_sigma: f64,
    index: usize,
) -> Option<Splat2D> {
    let x_cam = camera.world_to_camera(&g.mean);
    let z = x_cam.z;
    if z <= DEPTH_EPSILON {
        return None;
    }
    let mean2d = Vector2::new(
        camera.fx * x_cam.x / z + camera.cx,
        camera.fy * x_cam.y / z + camera.cy,
    );
    let j = projection_jacobian(camera, &x_cam);
    let a = j * camera.rotation;
    let mut cov2d = a * g.covariance() * a.transpose();
    cov2d[(0, 0)] += COV2D_REGULARIZATION;
    cov2d[(1, 1)] += COV2D_REGULARIZATION;
    // Symmetrize against rounding.
    let off = 0.5 * (cov2d[(0, 1)] + cov2d[(1, 0)]);
    cov2d[(0, 1)] = off;
    cov2d[(1, 0)] = off;

    let splat = Splat2D {
        gaussian_index: index,
        mean2d,
        cov2d,
        depth: z,
        color: g.clamped_color(),
        opacity: sigmoid(g.opacity_logit),
        normal_cam: camera.rotation * gaussian_normal(g, camera),
    };

    // Cull when the footprint cannot reach the image rectangle.
    let r = splat.footprint_radius(footprint_sigma);
    let dx = (-splat.mean2d.x).max(splat.mean2d.x - camera.width as f64).max(0.0);
    let dy = (-splat.mean2d.y).max(splat.mean2d.y - camera.height as f64).max(0.0);
    if dx * dx + dy * dy > r * r {
        return None;
    }
    Some(splat)
}

/// Evaluate one splat at a pixel: Mahalanobis distance and evaluated alpha.
/// Returns `None` where the skip rules apply.
#[inline]
pub(crate) fn splat_alpha_at(splat: &Splat2D, pixel: &Vector2<f64>, opts: &RenderOptions) -> Option<f64> {
    let d = pixel - splat.mean2d;
    let a = splat.cov2d[(0, 0)];
    let b = splat.cov2d[(0, 1)];
    let c = splat.cov2d[(1, 1)];
    let det = a * c - b * b;
    let q = (c * d.x * d.x - 2.0 * b * d.x * d.y + a * d.y * d.y) / det;
    if q > opts.footprint_sigma * opts.footprint_sigma {
        return None;
    }
    let alpha = (splat.opacity * (-0.5 * q).exp()).min(ALPHA_CLAMP);
    if alpha < opts.alpha_threshold {
        return None;
    }
    Some(alpha)
}

/// Front-to-back compositing of depth-sorted splats at one pixel.
///
/// Color follows the transmittance-weighted sum; depth and normal are blended
/// with the same weights and the reported values are alpha-normalized (or raw
/// depth when configured). The remaining transmittance is filled with the
/// background color.
pub fn composite_pixel(
    splats: &[Splat2D],
    pixel: Vector2<f64>,
    opts: &RenderOptions,
) -> Result<(Vector3<f64>, f64, Vector3<f64>, f64)> {
    let mut prev_depth = f64::NEG_INFINITY;
    let mut color = Vector3::zeros();
    let mut raw_depth = 0.0;
    let mut raw_normal = Vector3::zeros();
    let mut alpha_acc = 0.0;
    let mut transmittance = 1.0;
    for splat in splats {
        if splat.depth < prev_depth {
            return Err(Error::Contract(
                "composite_pixel requires depth-ascending splats".into(),
            ));
        }
        prev_depth = splat.depth;
        if transmittance < opts.transmittance_floor {
            break;
        }
        let Some(alpha) = splat_alpha_at(splat, &pixel, opts) else {
            continue;
        };
        let w = alpha * transmittance;
        color += splat.color * w;
        raw_depth += splat.depth * w;
        raw_normal += splat.normal_cam * w;
        alpha_acc += w;
        transmittance *= 1.0 - alpha;
    }
    color += opts.background * transmittance;

    let depth = if alpha_acc > COVERAGE_EPSILON {
        if opts.normalize_depth {
            raw_depth / alpha_acc
        } else {
            raw_depth
        }
    } else {
        0.0
    };
    let normal = if alpha_acc > COVERAGE_EPSILON && raw_normal.norm() > 0.0 {
        raw_normal.normalize()
    } else {
        Vector3::zeros()
    };
    Ok((color, depth, normal, alpha_acc))
}

/// Project every Gaussian of a cloud, keeping input order in the indices.
pub fn project_cloud(camera: &Camera, cloud: &GaussianCloud, footprint_sigma: f64) -> Vec<Splat2D> {
    cloud
        .gaussians
        .iter()
        .enumerate()
        .filter_map(|(i, g)| project_gaussian_indexed(camera, g, footprint_sigma, i))
        .collect()
}

/// Which Gaussians survive projection/culling for this camera.
pub fn visible_mask(camera: &Camera, cloud: &GaussianCloud, footprint_sigma: f64) -> Vec<bool> {
    let mut mask = vec![false; cloud.len()];
    for splat in project_cloud(camera, cloud, footprint_sigma) {
        mask[splat.gaussian_index] = true;
    }
    mask
}

fn sort_key(s: &Splat2D) -> (f64, usize) {
    (s.depth, s.gaussian_index)
}

/// Tiled forward render of a full frame.
pub fn render(camera: &Camera, cloud: &GaussianCloud, opts: &RenderOptions) -> Result<Frame> {
    opts.validate()?;
    if camera.width == 0 || camera.height == 0 {
        return Err(Error::InvalidInput("cannot render a zero-sized image".into()));
    }
    let mut frame = Frame::new_filled(camera.width, camera.height, [
        opts.background.x,
        opts.background.y,
        opts.background.z,
    ]);
    let splats = project_cloud(camera, cloud, opts.footprint_sigma);
    if splats.is_empty() {
        return Ok(frame);
    }

    let tiles_x = camera.width.div_ceil(opts.tile_px) as usize;
    let tiles_y = camera.height.div_ceil(opts.tile_px) as usize;
    let mut bins: Vec<Vec<usize>> = vec![Vec::new(); tiles_x * tiles_y];
    for (si, splat) in splats.iter().enumerate() {
        let r = splat.footprint_radius(opts.footprint_sigma);
        let x0 = ((splat.mean2d.x - r) / opts.tile_px as f64).floor().max(0.0) as usize;
        let y0 = ((splat.mean2d.y - r) / opts.tile_px as f64).floor().max(0.0) as usize;
        let x1 = (((splat.mean2d.x + r) / opts.tile_px as f64).floor() as isize)
            .clamp(0, tiles_x as isize - 1) as usize;
        let y1 = (((splat.mean2d.y + r) / opts.tile_px as f64).floor() as isize)
            .clamp(0, tiles_y as isize - 1) as usize;
        if x0 >= tiles_x || y0 >= tiles_y {
            continue;
        }
        for ty in y0..=y1 {
            for tx in x0..=x1 {
                bins[ty * tiles_x + tx].push(si);
            }
        }
    }

    for ty in 0..tiles_y {
        for tx in 0..tiles_x {
            let bin = &mut bins[ty * tiles_x + tx];
            if bin.is_empty() {
                continue;
            }
            bin.sort_unstable_by(|&a, &b| sort_key(&splats[a]).partial_cmp(&sort_key(&splats[b])).unwrap());
            let tile_splats: Vec<Splat2D> = bin.iter().map(|&i| splats[i].clone()).collect();
            let px_x0 = tx as u32 * opts.tile_px;
            let px_y0 = ty as u32 * opts.tile_px;
            let px_x1 = (px_x0 + opts.tile_px).min(camera.width);
            let px_y1 = (px_y0 + opts.tile_px).min(camera.height);
            for y in px_y0..px_y1 {
                for x in px_x0..px_x1 {
                    let pixel = Vector2::new(x as f64 + 0.5, y as f64 + 0.5);
                    let (color, depth, normal, alpha) =
                        composite_pixel(&tile_splats, pixel, opts)?;
                    let idx = frame.idx(x, y);
                    frame.color[idx] = [color.x, color.y, color.z];
                    frame.depth[idx] = depth;
                    frame.normal[idx] = [normal.x, normal.y, normal.z];
                    frame.alpha[idx] = alpha;
                }
            }
        }
    }
    Ok(frame)
}

/// Render and serialize the projected splat table as tab-separated text, one
/// row per splat (debug aid for the CLI's `--dump-splats`).
pub fn dump_splats(camera: &Camera, cloud: &GaussianCloud, opts: &RenderOptions) -> String {
    let splats = project_cloud(camera, cloud, opts.footprint_sigma);
    let mut out = String::from(
        "gaussian_index\tmean2d_x\tmean2d_y\tcov_xx\tcov_xy\tcov_yy\tdepth\topacity\tr\tg\tb\tnormal_x\tnormal_y\tnormal_z\n",
    );
    for s in &splats {
        out.push_str(&format!(
            "{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.4}\t{:.4}\t{:.4}\t{:.4}\t{:.4}\t{:.4}\n",
            s.gaussian_index,
            s.mean2d.x,
            s.mean2d.y,
            s.cov2d[(0, 0)],
            s.cov2d[(0, 1)],
            s.cov2d[(1, 1)],
            s.depth,
            s.opacity,
            s.color.x,
            s.color.y,
            s.color.z,
            s.normal_cam.x,
            s.normal_cam.y,
            s.normal_cam.z,
        ));
    }
    out
}
