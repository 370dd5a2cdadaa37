//! Analytic gradients of the rendered color with respect to every Gaussian
//! parameter group.
//!
//! The forward pass is replayed deterministically (same projection, tiling,
//! sorting and skip rules as [`super::render`]), so per-pixel contributions
//! match the rendered frame exactly. Gradients flow through the compositing
//! sum, the 2D Gaussian evaluation, the perspective Jacobian and the
//! `R diag(s^2) R^T` covariance construction. Gaussians culled in the forward
//! pass receive exactly zero gradient.

use super::{
    project_cloud, projection_jacobian, RenderOptions, ALPHA_CLAMP,
};
use crate::error::{Error, Result};
use crate::scene::{Camera, GaussianCloud};
use nalgebra::{Matrix2, Matrix3, Vector2, Vector3};

/// Per-Gaussian gradients with respect to the stored (pre-activation)
/// parameters. `d_mean2d` additionally carries the accumulated screen-space
/// positional gradient used by density control.
#[derive(Debug, Clone, Default)]
pub struct GaussianGrad {
    pub d_mean: Vector3<f64>,
    pub d_log_scale: Vector3<f64>,
    /// Gradient with respect to the raw quaternion `[w, x, y, z]`, including
    /// the normalization Jacobian.
    pub d_rotation: [f64; 4],
    pub d_opacity_logit: f64,
    pub d_color: Vector3<f64>,
    /// Gradient with respect to the projected 2D mean, pixel units.
    pub d_mean2d: Vector2<f64>,
}

/// Rotation matrix of a unit quaternion `(w, x, y, z)`; written out so the
/// derivative tables below refer to one fixed parameterization.
pub(crate) fn rotation_from_quat(w: f64, x: f64, y: f64, z: f64) -> Matrix3<f64> {
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

/// `dR/dw, dR/dx, dR/dy, dR/dz` for the parameterization above.
fn rotation_quat_derivatives(w: f64, x: f64, y: f64, z: f64) -> [Matrix3<f64>; 4] {
    [
        Matrix3::new(0.0, -z, y, z, 0.0, -x, -y, x, 0.0) * 2.0,
        Matrix3::new(0.0, y, z, y, -2.0 * x, -w, z, w, -2.0 * x) * 2.0,
        Matrix3::new(-2.0 * y, x, w, x, 0.0, z, -w, z, -2.0 * y) * 2.0,
        Matrix3::new(-2.0 * z, -w, x, w, -2.0 * z, y, x, y, 0.0) * 2.0,
    ]
}

struct SplatAccum {
    d_mean2d: Vector2<f64>,
    d_cov: Matrix2<f64>,
    /// Gradient with respect to the activated opacity.
    d_opacity: f64,
    d_color: Vector3<f64>,
}

impl Default for SplatAccum {
    fn default() -> Self {
        SplatAccum {
            d_mean2d: Vector2::zeros(),
            d_cov: Matrix2::zeros(),
            d_opacity: 0.0,
            d_color: Vector3::zeros(),
        }
    }
}

struct Contribution {
    splat: usize,
    alpha: f64,
    gauss: f64,
    clamped: bool,
    md: Vector2<f64>,
    transmittance: f64,
}

/// Backpropagate `d_loss_d_color` (per-pixel RGB, row-major, length
/// `width*height`) through a render of `cloud` from `camera`.
pub fn backward(
    camera: &Camera,
    cloud: &GaussianCloud,
    d_loss_d_color: &[[f64; 3]],
    opts: &RenderOptions,
) -> Result<Vec<GaussianGrad>> {
    opts.validate()?;
    let n_px = camera.width as usize * camera.height as usize;
    if d_loss_d_color.len() != n_px {
        return Err(Error::Contract(format!(
            "gradient image has {} pixels but the camera expects {}",
            d_loss_d_color.len(),
            n_px
        )));
    }

    let splats = project_cloud(camera, cloud, opts.footprint_sigma);
    let mut grads = vec![GaussianGrad::default(); cloud.gaussians.len()];
    if splats.is_empty() {
        return Ok(grads);
    }
    let mut accum: Vec<SplatAccum> = splats.iter().map(|_| SplatAccum::default()).collect();

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

    let cutoff = opts.footprint_sigma * opts.footprint_sigma;
    let mut contribs: Vec<Contribution> = Vec::new();
    for ty in 0..tiles_y {
        for tx in 0..tiles_x {
            let bin = &mut bins[ty * tiles_x + tx];
            if bin.is_empty() {
                continue;
            }
            bin.sort_unstable_by(|&a, &b| {
                (splats[a].depth, splats[a].gaussian_index)
                    .partial_cmp(&(splats[b].depth, splats[b].gaussian_index))
                    .unwrap()
            });
            let px_x0 = tx as u32 * opts.tile_px;
            let px_y0 = ty as u32 * opts.tile_px;
            let px_x1 = (px_x0 + opts.tile_px).min(camera.width);
            let px_y1 = (px_y0 + opts.tile_px).min(camera.height);
            for y in px_y0..px_y1 {
                for x in px_x0..px_x1 {
                    let g_pix = d_loss_d_color[y as usize * camera.width as usize + x as usize];
                    let g_pix = Vector3::new(g_pix[0], g_pix[1], g_pix[2]);
                    if g_pix == Vector3::zeros() {
                        continue;
                    }
                    let pixel = Vector2::new(x as f64 + 0.5, y as f64 + 0.5);

                    // Forward replay, recording every contribution.
                    contribs.clear();
                    let mut transmittance = 1.0;
                    let mut color_total = Vector3::zeros();
                    for &si in bin.iter() {
                        if transmittance < opts.transmittance_floor {
                            break;
                        }
                        let s = &splats[si];
                        let d = pixel - s.mean2d;
                        let a = s.cov2d[(0, 0)];
                        let b = s.cov2d[(0, 1)];
                        let c = s.cov2d[(1, 1)];
                        let det = a * c - b * b;
                        let q = (c * d.x * d.x - 2.0 * b * d.x * d.y + a * d.y * d.y) / det;
                        if q > cutoff {
                            continue;
                        }
                        let gauss = (-0.5 * q).exp();
                        let raw_alpha = s.opacity * gauss;
                        let clamped = raw_alpha > ALPHA_CLAMP;
                        let alpha = raw_alpha.min(ALPHA_CLAMP);
                        if alpha < opts.alpha_threshold {
                            continue;
                        }
                        // M d with M = cov2d^{-1}.
                        let md = Vector2::new(
                            (c * d.x - b * d.y) / det,
                            (-b * d.x + a * d.y) / det,
                        );
                        color_total += s.color * (alpha * transmittance);
                        contribs.push(Contribution {
                            splat: si,
                            alpha,
                            gauss,
                            clamped,
                            md,
                            transmittance,
                        });
                        transmittance *= 1.0 - alpha;
                    }
                    color_total += opts.background * transmittance;

                    // Reverse sweep via suffix colors.
                    let mut prefix = Vector3::zeros();
                    for contrib in &contribs {
                        let s = &splats[contrib.splat];
                        let w = contrib.alpha * contrib.transmittance;
                        prefix += s.color * w;
                        let suffix = color_total - prefix;
                        let acc = &mut accum[contrib.splat];
                        acc.d_color += g_pix * w;
                        let d_alpha = g_pix
                            .dot(&(s.color * contrib.transmittance - suffix / (1.0 - contrib.alpha)));
                        if !contrib.clamped {
                            acc.d_opacity += d_alpha * contrib.gauss;
                            let d_q = d_alpha * s.opacity * (-0.5 * contrib.gauss);
                            acc.d_mean2d += contrib.md * (-2.0 * d_q);
                            let outer = contrib.md * contrib.md.transpose();
                            acc.d_cov -= outer * d_q;
                        }
                    }
                }
            }
        }
    }

    // Chain the accumulated screen-space gradients back to 3D parameters.
    let w_rot = camera.rotation;
    for (si, splat) in splats.iter().enumerate() {
        let acc = &accum[si];
        let gi = splat.gaussian_index;
        let g = &cloud.gaussians[gi];
        let grad = &mut grads[gi];

        // Color passes through the [0,1] clamp.
        for c in 0..3 {
            if (0.0..=1.0).contains(&g.color[c]) {
                grad.d_color[c] += acc.d_color[c];
            }
        }
        // Opacity chain through the sigmoid.
        let op = splat.opacity;
        grad.d_opacity_logit += acc.d_opacity * op * (1.0 - op);
        grad.d_mean2d += acc.d_mean2d;

        let x_cam = camera.world_to_camera(&g.mean);
        let z = x_cam.z;
        let j = projection_jacobian(camera, &x_cam);
        let a_mat = j * w_rot;
        let sigma = g.covariance();

        // Covariance chain: V = A Sigma A^T (+ const).
        let d_sigma = a_mat.transpose() * acc.d_cov * a_mat;
        let d_a = (acc.d_cov + acc.d_cov.transpose()) * a_mat * sigma;
        let d_j = d_a * w_rot.transpose();

        // Projected-mean chain plus the Jacobian's own x_cam dependence.
        let mut d_x_cam = j.transpose() * acc.d_mean2d;
        let fx = camera.fx;
        let fy = camera.fy;
        d_x_cam.x += d_j[(0, 2)] * (-fx / (z * z));
        d_x_cam.y += d_j[(1, 2)] * (-fy / (z * z));
        d_x_cam.z += d_j[(0, 0)] * (-fx / (z * z))
            + d_j[(0, 2)] * (2.0 * fx * x_cam.x / (z * z * z))
            + d_j[(1, 1)] * (-fy / (z * z))
            + d_j[(1, 2)] * (2.0 * fy * x_cam.y / (z * z * z));
        grad.d_mean += w_rot.transpose() * d_x_cam;

        // Sigma = R diag(s^2) R^T.
        let q = g.rotation.quaternion();
        let (qw, qx, qy, qz) = (q.w, q.i, q.j, q.k);
        let r_mat = rotation_from_quat(qw, qx, qy, qz);
        let s = g.scale();
        let s2 = Matrix3::from_diagonal(&Vector3::new(s.x * s.x, s.y * s.y, s.z * s.z));
        let d_sigma_sym = d_sigma + d_sigma.transpose();
        let d_r = d_sigma_sym * r_mat * s2;
        for k in 0..3 {
            let col = r_mat.column(k);
            let quad = col.dot(&(d_sigma * col));
            grad.d_log_scale[k] += 2.0 * s[k] * s[k] * quad;
        }
        let d_tables = rotation_quat_derivatives(qw, qx, qy, qz);
        let mut d_qhat = [0.0; 4];
        for (t, table) in d_tables.iter().enumerate() {
            d_qhat[t] = d_r.component_mul(table).sum();
        }
        // Through the normalization q_hat = q / |q| (stored unit: |q| = 1).
        let qvec = [qw, qx, qy, qz];
        let dot: f64 = (0..4).map(|i| d_qhat[i] * qvec[i]).sum();
        for i in 0..4 {
            grad.d_rotation[i] += d_qhat[i] - dot * qvec[i];
        }
    }
    Ok(grads)
}
