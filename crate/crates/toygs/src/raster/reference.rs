//! Naive reference renderer: every pixel composites over the globally
//! depth-sorted splat list, with no tiling.
//!
//! This is the correctness baseline for the tiled renderer. The compositing
//! loop is written out independently here on purpose; do not refactor it to
//! share code with [`super::composite_pixel`].

use super::{project_cloud, RenderOptions, Splat2D, ALPHA_CLAMP};
use crate::error::{Error, Result};
use crate::scene::{Camera, Frame, GaussianCloud};
use nalgebra::{Vector2, Vector3};

/// Full-sort per-pixel render of a frame.
pub fn render_reference(
    camera: &Camera,
    cloud: &GaussianCloud,
    opts: &RenderOptions,
) -> Result<Frame> {
    opts.validate()?;
    if camera.width == 0 || camera.height == 0 {
        return Err(Error::InvalidInput("cannot render a zero-sized image".into()));
    }
    let mut splats: Vec<Splat2D> = project_cloud(camera, cloud, opts.footprint_sigma);
    splats.sort_unstable_by(|a, b| {
        (a.depth, a.gaussian_index)
            .partial_cmp(&(b.depth, b.gaussian_index))
            .unwrap()
    });

    let cutoff = opts.footprint_sigma * opts.footprint_sigma;
    let mut frame = Frame::new_filled(camera.width, camera.height, [
        opts.background.x,
        opts.background.y,
        opts.background.z,
    ]);
    for y in 0..camera.height {
        for x in 0..camera.width {
            let pixel = Vector2::new(x as f64 + 0.5, y as f64 + 0.5);
            let mut color = Vector3::zeros();
            let mut raw_depth = 0.0;
            let mut raw_normal = Vector3::zeros();
            let mut alpha_acc = 0.0;
            let mut transmittance = 1.0;
            for s in &splats {
                if transmittance < opts.transmittance_floor {
                    break;
                }
                let d = pixel - s.mean2d;
                let a = s.cov2d[(0, 0)];
                let b = s.cov2d[(0, 1)];
                let c = s.cov2d[(1, 1)];
                let det = a * c - b * b;
                let q = (c * d.x * d.x - 2.0 * b * d.x * d.y + a * d.y * d.y) / det;
                if q > cutoff {
                    continue;
                }
                let alpha = (s.opacity * (-0.5 * q).exp()).min(ALPHA_CLAMP);
                if alpha < opts.alpha_threshold {
                    continue;
                }
                let w = alpha * transmittance;
                color += s.color * w;
                raw_depth += s.depth * w;
                raw_normal += s.normal_cam * w;
                alpha_acc += w;
                transmittance *= 1.0 - alpha;
            }
            color += opts.background * transmittance;
            let idx = frame.idx(x, y);
            frame.color[idx] = [color.x, color.y, color.z];
            frame.alpha[idx] = alpha_acc;
            frame.depth[idx] = if alpha_acc > super::COVERAGE_EPSILON {
                if opts.normalize_depth {
                    raw_depth / alpha_acc
                } else {
                    raw_depth
                }
            } else {
                0.0
            };
            frame.normal[idx] = if alpha_acc > super::COVERAGE_EPSILON && raw_normal.norm() > 0.0 {
                let n = raw_normal.normalize();
                [n.x, n.y, n.z]
            } else {
                [0.0; 3]
            };
        }
    }
    Ok(frame)
}
