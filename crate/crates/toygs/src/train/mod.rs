//! Per-region Gaussian optimization: photometric loss, Adam updates over the
//! five parameter groups, position-aware adaptive density control, and the
//! Patchmatch depth-refinement hook.

mod io;

pub use io::{
    load_cloud, read_metrics_log, save_cloud, sidecar_path, write_metrics_log, CloudSidecar,
    CLOUD_MAGIC,
};

use crate::error::{Error, Result};
use crate::metrics::{ssim_with_grad, IterationRecord, TrainingLog};
use crate::partition::Region;
use crate::patchmatch::{self, PatchmatchParams};
use crate::raster::{self, GaussianGrad, RenderOptions};
use crate::scene::{
    logit, visible_points, Camera, Frame, Gaussian, GaussianCloud, ImageRgb, PointCloud,
};
use nalgebra::{Quaternion, UnitQuaternion, Vector3};
use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub iterations: usize,
    pub lr_position: f64,
    pub lr_features: f64,
    pub lr_opacity: f64,
    pub lr_scale: f64,
    pub lr_rotation: f64,
    /// Weight of the structural term: loss = (1-w)*L1 + w*(1-SSIM).
    pub ssim_weight: f64,
    pub densify_interval: usize,
    pub densify_grad_threshold: f64,
    pub prune_opacity: f64,
    /// Scale-factor radius of the position-aware control, in units of the
    /// scene radius (coordinates are normalized so the camera bounding
    /// sphere has radius 1 when evaluating the factor).
    pub ppac_r: f64,
    pub patchmatch_start: usize,
    pub patchmatch_end: usize,
    pub patchmatch_interval: usize,
    /// Propagation rounds per Patchmatch invocation.
    pub patchmatch_rounds: u32,
    /// Relative depth disagreement that triggers repositioning.
    pub patchmatch_tau: f64,
    /// Source views must co-observe at least this many sparse points.
    pub min_covisible: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        // Full-scale schedule; see `desk` for the small-scene preset.
        TrainConfig {
            iterations: 30_000,
            lr_position: 0.000_16,
            lr_features: 0.002_5,
            lr_opacity: 0.05,
            lr_scale: 0.005,
            lr_rotation: 0.001,
            ssim_weight: 0.2,
            densify_interval: 100,
            densify_grad_threshold: 0.000_2,
            prune_opacity: 0.005,
            ppac_r: 0.005,
            patchmatch_start: 1_000,
            patchmatch_end: 6_000,
            patchmatch_interval: 50,
            patchmatch_rounds: 2,
            patchmatch_tau: 0.05,
            min_covisible: 100,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Desk-scale preset: short schedule with the Patchmatch window scaled
    /// proportionally, and the position-aware radius set to the scene radius
    /// itself (in normalized units) so in-scene content keeps unit scale.
    pub fn desk() -> Self {
        TrainConfig {
            iterations: 2_000,
            patchmatch_start: 100,
            patchmatch_end: 400,
            patchmatch_interval: 50,
            ppac_r: 1.0,
            densify_grad_threshold: 0.02,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let lrs = [
            self.lr_position,
            self.lr_features,
            self.lr_opacity,
            self.lr_scale,
            self.lr_rotation,
        ];
        if lrs.iter().any(|lr| *lr <= 0.0) {
            return Err(Error::InvalidInput("learning rates must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.ssim_weight) {
            return Err(Error::InvalidInput("ssim_weight must lie in [0,1]".into()));
        }
        if self.patchmatch_enabled()
            && !(self.patchmatch_start < self.patchmatch_end
                && self.patchmatch_end <= self.iterations)
        {
            return Err(Error::InvalidInput(
                "patchmatch window must satisfy start < end <= iterations".into(),
            ));
        }
        Ok(())
    }

    pub fn patchmatch_enabled(&self) -> bool {
        self.patchmatch_interval > 0 && self.patchmatch_start < self.patchmatch_end
    }

    /// Hash of the serialized config, recorded in cloud sidecars.
    pub fn hash(&self) -> String {
        use sha2::Digest;
        let json = serde_json::to_string(self).expect("config serializes");
        let digest = sha2::Sha256::digest(json.as_bytes());
        hex_prefix(&digest, 16)
    }
}

fn hex_prefix(bytes: &[u8], n: usize) -> String {
    bytes.iter().take(n).map(|b| format!("{b:02x}")).collect()
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPSILON: f64 = 1e-15;

/// First/second moment accumulators for every parameter group, aligned with
/// the Gaussian list.
#[derive(Debug, Clone, Default)]
pub struct AdamState {
    pub step: u64,
    mean_m: Vec<Vector3<f64>>,
    mean_v: Vec<Vector3<f64>>,
    scale_m: Vec<Vector3<f64>>,
    scale_v: Vec<Vector3<f64>>,
    rot_m: Vec<[f64; 4]>,
    rot_v: Vec<[f64; 4]>,
    opacity_m: Vec<f64>,
    opacity_v: Vec<f64>,
    color_m: Vec<Vector3<f64>>,
    color_v: Vec<Vector3<f64>>,
}

impl AdamState {
    pub fn new(count: usize) -> Self {
        AdamState {
            step: 0,
            mean_m: vec![Vector3::zeros(); count],
            mean_v: vec![Vector3::zeros(); count],
            scale_m: vec![Vector3::zeros(); count],
            scale_v: vec![Vector3::zeros(); count],
            rot_m: vec![[0.0; 4]; count],
            rot_v: vec![[0.0; 4]; count],
            opacity_m: vec![0.0; count],
            opacity_v: vec![0.0; count],
            color_m: vec![Vector3::zeros(); count],
            color_v: vec![Vector3::zeros(); count],
        }
    }

    pub fn len(&self) -> usize {
        self.opacity_m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.opacity_m.is_empty()
    }

    /// Rebuild after a structural change: `parents[i]` names the surviving
    /// source index whose moments carry over, `None` zeroes a fresh slot.
    pub fn remap(&self, parents: &[Option<usize>]) -> AdamState {
        let mut out = AdamState::new(parents.len());
        out.step = self.step;
        for (i, p) in parents.iter().enumerate() {
            if let Some(src) = p {
                out.mean_m[i] = self.mean_m[*src];
                out.mean_v[i] = self.mean_v[*src];
                out.scale_m[i] = self.scale_m[*src];
                out.scale_v[i] = self.scale_v[*src];
                out.rot_m[i] = self.rot_m[*src];
                out.rot_v[i] = self.rot_v[*src];
                out.opacity_m[i] = self.opacity_m[*src];
                out.opacity_v[i] = self.opacity_v[*src];
                out.color_m[i] = self.color_m[*src];
                out.color_v[i] = self.color_v[*src];
            }
        }
        out
    }
}

/// Per-group learning rates for one step (position decays over the run).
#[derive(Debug, Clone, Copy)]
pub struct StepRates {
    pub position: f64,
    pub features: f64,
    pub opacity: f64,
    pub scale: f64,
    pub rotation: f64,
}

impl StepRates {
    pub fn at(config: &TrainConfig, iteration: usize) -> StepRates {
        // Position decays exponentially to 1/100 of its initial value over
        // the run; the other groups stay constant.
        let t = if config.iterations <= 1 {
            0.0
        } else {
            iteration as f64 / (config.iterations - 1) as f64
        };
        StepRates {
            position: config.lr_position * 0.01_f64.powf(t),
            features: config.lr_features,
            opacity: config.lr_opacity,
            scale: config.lr_scale,
            rotation: config.lr_rotation,
        }
    }
}

fn adam_update(m: &mut f64, v: &mut f64, grad: f64, lr: f64, bias1: f64, bias2: f64) -> f64 {
    *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * grad;
    *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * grad * grad;
    let m_hat = *m / bias1;
    let v_hat = *v / bias2;
    -lr * m_hat / (v_hat.sqrt() + ADAM_EPSILON)
}

/// One bias-corrected Adam step over every parameter group. Quaternions are
/// renormalized afterwards. Non-finite gradients abort with the index of the
/// offending Gaussian.
pub fn adam_step(
    cloud: &mut GaussianCloud,
    grads: &[GaussianGrad],
    state: &mut AdamState,
    rates: &StepRates,
) -> Result<()> {
    if grads.len() != cloud.len() || state.len() != cloud.len() {
        return Err(Error::Contract(format!(
            "adam_step sizes disagree: {} gaussians, {} grads, {} states",
            cloud.len(),
            grads.len(),
            state.len()
        )));
    }
    state.step += 1;
    let bias1 = 1.0 - ADAM_BETA1.powi(state.step as i32);
    let bias2 = 1.0 - ADAM_BETA2.powi(state.step as i32);
    for (i, g) in cloud.gaussians.iter_mut().enumerate() {
        let grad = &grads[i];
        let finite = grad.d_mean.iter().all(|v| v.is_finite())
            && grad.d_log_scale.iter().all(|v| v.is_finite())
            && grad.d_rotation.iter().all(|v| v.is_finite())
            && grad.d_opacity_logit.is_finite()
            && grad.d_color.iter().all(|v| v.is_finite());
        if !finite {
            return Err(Error::Divergence {
                iteration: state.step as usize,
                message: format!("non-finite gradient on gaussian {i}"),
            });
        }
        for axis in 0..3 {
            g.mean[axis] += adam_update(
                &mut state.mean_m[i][axis],
                &mut state.mean_v[i][axis],
                grad.d_mean[axis],
                rates.position,
                bias1,
                bias2,
            );
            g.log_scale[axis] += adam_update(
                &mut state.scale_m[i][axis],
                &mut state.scale_v[i][axis],
                grad.d_log_scale[axis],
                rates.scale,
                bias1,
                bias2,
            );
            g.color[axis] += adam_update(
                &mut state.color_m[i][axis],
                &mut state.color_v[i][axis],
                grad.d_color[axis],
                rates.features,
                bias1,
                bias2,
            );
        }
        g.opacity_logit += adam_update(
            &mut state.opacity_m[i],
            &mut state.opacity_v[i],
            grad.d_opacity_logit,
            rates.opacity,
            bias1,
            bias2,
        );
        let q = g.rotation.quaternion();
        let mut raw = [q.w, q.i, q.j, q.k];
        for c in 0..4 {
            raw[c] += adam_update(
                &mut state.rot_m[i][c],
                &mut state.rot_v[i][c],
                grad.d_rotation[c],
                rates.rotation,
                bias1,
                bias2,
            );
        }
        g.rotation =
            UnitQuaternion::from_quaternion(Quaternion::new(raw[0], raw[1], raw[2], raw[3]));
    }
    Ok(())
}

/// Position-aware scale factor: 1 inside twice the radius, then growing
/// linearly as `m/r - 1`. Continuous at `m = 2r`.
pub fn ppac_scale(mu: &Vector3<f64>, scene_center: &Vector3<f64>, r: f64) -> Result<f64> {
    if r <= 0.0 {
        return Err(Error::InvalidInput("ppac radius must be positive".into()));
    }
    let m = (mu - scene_center).norm();
    Ok(if m < 2.0 * r { 1.0 } else { m / r - 1.0 })
}

/// PPAC factor in normalized coordinates: distances are measured in units of
/// the cloud's scene radius before applying the configured `ppac_r`.
pub fn gamma_factor(cloud: &GaussianCloud, config: &TrainConfig, mu: &Vector3<f64>) -> Result<f64> {
    let m_norm = (mu - cloud.scene_center).norm() / cloud.scene_radius;
    ppac_scale(&Vector3::new(m_norm, 0.0, 0.0), &Vector3::zeros(), config.ppac_r)
}

/// Accumulated screen-space positional gradient norms and observation counts
/// since the last density-control pass.
#[derive(Debug, Clone, Default)]
pub struct GradStats {
    /// Norm of the positional gradient in half-image units.
    pub accum_norm: Vec<f64>,
    /// Accumulated world-space positional gradient (drives clone offsets).
    pub accum_world: Vec<Vector3<f64>>,
    pub observations: Vec<u32>,
}

impl GradStats {
    pub fn new(count: usize) -> Self {
        GradStats {
            accum_norm: vec![0.0; count],
            accum_world: vec![Vector3::zeros(); count],
            observations: vec![0; count],
        }
    }

    pub fn record(&mut self, camera: &Camera, grads: &[GaussianGrad], visible: &[bool]) {
        let half_w = camera.width as f64 / 2.0;
        let half_h = camera.height as f64 / 2.0;
        for (i, grad) in grads.iter().enumerate() {
            if !visible[i] {
                continue;
            }
            self.observations[i] += 1;
            let gx = grad.d_mean2d.x * half_w;
            let gy = grad.d_mean2d.y * half_h;
            self.accum_norm[i] += (gx * gx + gy * gy).sqrt();
            self.accum_world[i] += grad.d_mean;
        }
    }

    pub fn mean_norm(&self, i: usize) -> f64 {
        if self.observations[i] == 0 {
            0.0
        } else {
            self.accum_norm[i] / self.observations[i] as f64
        }
    }
}

/// Outcome of a density-control pass: the new cloud plus, per output
/// Gaussian, the index of the input it descends from (`None` for fresh
/// optimizer state).
pub struct DensifyOutcome {
    pub cloud: GaussianCloud,
    pub parents: Vec<Option<usize>>,
    pub cloned: usize,
    pub split: usize,
    pub pruned: usize,
}

/// Adaptive density control. High-gradient small Gaussians are cloned (the
/// copy nudged along the descent direction); high-gradient large ones are
/// split in two with scale / 1.6, where "large" compares the max world scale
/// against 1% of the scene radius times the position-aware factor, so distant
/// Gaussians take more to split. Gaussians below the opacity floor are
/// removed.
pub fn densify_and_prune(
    cloud: &GaussianCloud,
    stats: &GradStats,
    config: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<DensifyOutcome> {
    if stats.accum_norm.len() != cloud.len() {
        return Err(Error::Contract("grad stats misaligned with cloud".into()));
    }
    let mut out = GaussianCloud {
        gaussians: Vec::with_capacity(cloud.len() + 8),
        scene_center: cloud.scene_center,
        scene_radius: cloud.scene_radius,
    };
    let mut parents = Vec::with_capacity(cloud.len() + 8);
    let mut cloned = 0;
    let mut split = 0;
    let mut pruned = 0;
    for (i, g) in cloud.gaussians.iter().enumerate() {
        if g.opacity() < config.prune_opacity {
            pruned += 1;
            continue;
        }
        let growing = stats.mean_norm(i) > config.densify_grad_threshold;
        if !growing {
            out.gaussians.push(g.clone());
            parents.push(Some(i));
            continue;
        }
        let gamma = gamma_factor(cloud, config, &g.mean)?;
        let split_bar = 0.01 * cloud.scene_radius * gamma;
        let max_scale = g.scale().max();
        if max_scale > split_bar {
            // Split: replace with two children sampled from the parent's own
            // distribution, scales divided by 1.6.
            let rot = g.rotation.to_rotation_matrix().into_inner();
            let s = g.scale();
            for _ in 0..2 {
                let sample = normal3(rng);
                let local = Vector3::new(sample.x * s.x, sample.y * s.y, sample.z * s.z);
                let mut child = g.clone();
                child.mean = g.mean + rot * local;
                child.log_scale = g.log_scale.map(|v| v - 1.6_f64.ln());
                out.gaussians.push(child);
                parents.push(None);
            }
            split += 1;
        } else {
            // Clone: keep the original, add a copy nudged along the descent
            // direction of the accumulated world gradient.
            out.gaussians.push(g.clone());
            parents.push(Some(i));
            let dir = stats.accum_world[i];
            let offset = if dir.norm() > 1e-12 {
                -dir.normalize() * 0.5 * g.scale().mean()
            } else {
                Vector3::zeros()
            };
            let mut copy = g.clone();
            copy.mean += offset;
            out.gaussians.push(copy);
            parents.push(None);
            cloned += 1;
        }
    }
    if out.gaussians.is_empty() {
        return Err(Error::TrainingCollapse);
    }
    Ok(DensifyOutcome {
        cloud: out,
        parents,
        cloned,
        split,
        pruned,
    })
}

/// Standard-normal 3-vector via Box-Muller.
fn normal3(rng: &mut ChaCha8Rng) -> Vector3<f64> {
    let mut pairs = [0.0; 4];
    for p in &mut pairs {
        *p = rng.random_range(0.0..1.0_f64);
    }
    let r1 = (-2.0 * (1.0 - pairs[0]).ln()).sqrt();
    let r2 = (-2.0 * (1.0 - pairs[2]).ln()).sqrt();
    Vector3::new(
        r1 * (std::f64::consts::TAU * pairs[1]).cos(),
        r1 * (std::f64::consts::TAU * pairs[1]).sin(),
        r2 * (std::f64::consts::TAU * pairs[3]).cos(),
    )
}

/// Photometric loss `(1-w)*L1 + w*(1-SSIM)` with its analytic per-pixel
/// gradient with respect to the rendered colors.
pub fn photometric_loss(
    rendered: &Frame,
    target: &ImageRgb,
    ssim_weight: f64,
) -> Result<(f64, Vec<[f64; 3]>)> {
    if rendered.width != target.width || rendered.height != target.height {
        return Err(Error::InvalidInput(format!(
            "rendered {}x{} vs target {}x{}",
            rendered.width, rendered.height, target.width, target.height
        )));
    }
    let n = rendered.color.len();
    let denom = (n * 3) as f64;
    let mut l1 = 0.0;
    let mut grad = vec![[0.0; 3]; n];
    for i in 0..n {
        for c in 0..3 {
            let diff = rendered.color[i][c] - target.data[i][c];
            l1 += diff.abs();
            // signum of an exact zero must be zero (f64::signum gives 1).
            let sign = if diff > 0.0 {
                1.0
            } else if diff < 0.0 {
                -1.0
            } else {
                0.0
            };
            grad[i][c] = (1.0 - ssim_weight) * sign / denom;
        }
    }
    l1 /= denom;
    let mut loss = (1.0 - ssim_weight) * l1;

    if ssim_weight > 0.0 {
        let rendered_img = ImageRgb {
            width: rendered.width,
            height: rendered.height,
            data: rendered.color.clone(),
        };
        let (ssim, ssim_grad) = ssim_with_grad(&rendered_img, target, true)?;
        let ssim_grad = ssim_grad.expect("gradient requested");
        loss += ssim_weight * (1.0 - ssim);
        for i in 0..n {
            // d(1-SSIM)/d pixel = -dSSIM/d gray / 3 per channel.
            let g = -ssim_weight * ssim_grad[i] / 3.0;
            for c in 0..3 {
                grad[i][c] += g;
            }
        }
    }
    Ok((loss, grad))
}

fn mean_knn_distance(points: &[Vector3<f64>], i: usize, k: usize) -> f64 {
    let mut dists: Vec<f64> = points
        .iter()
        .enumerate()
        .filter(|(j, _)| *j != i)
        .map(|(_, p)| (p - points[i]).norm())
        .collect();
    if dists.is_empty() {
        return 1e-3;
    }
    dists.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let k = k.min(dists.len());
    dists[..k].iter().sum::<f64>() / k as f64
}

fn mix_seed(seed: u64, salt: u64) -> u64 {
    let mut x = seed ^ salt.wrapping_mul(0x9e3779b97f4a7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    x ^ (x >> 31)
}

/// Initialize one Gaussian per region point: the point's color, isotropic
/// scale from the mean 3-NN distance, opacity 0.1, identity rotation, then
/// the position-aware scale multiply.
pub fn init_cloud(
    region: &Region,
    scene_cloud: &PointCloud,
    region_cameras: &[&Camera],
    config: &TrainConfig,
) -> Result<GaussianCloud> {
    let wanted = region.point_id_set();
    let points: Vec<_> = scene_cloud
        .points
        .iter()
        .filter(|p| wanted.contains(&p.id))
        .collect();
    if points.is_empty() {
        return Err(Error::EmptyRegion(region.id));
    }
    let positions: Vec<Vector3<f64>> = points.iter().map(|p| p.position).collect();

    let centroid = region_cameras
        .iter()
        .fold(Vector3::zeros(), |acc, c| acc + c.position())
        / region_cameras.len() as f64;
    let radius = region_cameras
        .iter()
        .map(|c| (c.position() - centroid).norm())
        .fold(0.0, f64::max)
        .max(1e-6);

    let mut cloud = GaussianCloud {
        gaussians: Vec::with_capacity(points.len()),
        scene_center: centroid,
        scene_radius: radius,
    };
    for (i, p) in points.iter().enumerate() {
        let base_scale = mean_knn_distance(&positions, i, 3).max(1e-9);
        cloud.gaussians.push(Gaussian {
            mean: p.position,
            log_scale: Vector3::from_element(base_scale.ln()),
            rotation: UnitQuaternion::identity(),
            opacity_logit: logit(0.1),
            color: Vector3::new(p.color[0], p.color[1], p.color[2]),
        });
    }
    let gammas: Vec<f64> = cloud
        .gaussians
        .iter()
        .map(|g| gamma_factor(&cloud, config, &g.mean))
        .collect::<Result<_>>()?;
    for (g, gamma) in cloud.gaussians.iter_mut().zip(&gammas) {
        g.log_scale += Vector3::from_element(gamma.ln());
    }
    Ok(cloud)
}

/// Pick the Patchmatch source views for a reference camera: the two nearest
/// cameras by position that co-observe enough sparse points.
fn select_sources<'a>(
    reference: &Camera,
    candidates: &'a [&'a Camera],
    covis: &BTreeMap<u32, BTreeSet<u64>>,
    min_covisible: usize,
) -> Vec<&'a Camera> {
    let ref_vis = match covis.get(&reference.id) {
        Some(v) => v,
        None => return Vec::new(),
    };
    let mut scored: Vec<(f64, &Camera)> = candidates
        .iter()
        .filter(|c| c.id != reference.id)
        .filter_map(|c| {
            let vis = covis.get(&c.id)?;
            let shared = ref_vis.intersection(vis).count();
            if shared >= min_covisible {
                Some(((c.position() - reference.position()).norm(), *c))
            } else {
                None
            }
        })
        .collect();
    scored.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.id.cmp(&b.1.id)));
    scored.into_iter().take(2).map(|(_, c)| c).collect()
}

/// Train one region's Gaussian cloud. Deterministic for a fixed config seed;
/// regions derive independent random streams from their id.
pub fn train_region(
    region: &Region,
    cameras: &[Camera],
    images: &BTreeMap<u32, ImageRgb>,
    scene_cloud: &PointCloud,
    config: &TrainConfig,
) -> Result<(GaussianCloud, TrainingLog)> {
    config.validate()?;
    let region_cameras: Vec<&Camera> = cameras
        .iter()
        .filter(|c| region.camera_ids.contains(&c.id) && images.contains_key(&c.id))
        .collect();
    if region_cameras.is_empty() {
        return Err(Error::InvalidInput(format!(
            "region {} has no cameras with images",
            region.id
        )));
    }

    let mut cloud = init_cloud(region, scene_cloud, &region_cameras, config)?;
    let mut state = AdamState::new(cloud.len());
    let mut stats = GradStats::new(cloud.len());
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(config.seed, region.id as u64));
    let opts = RenderOptions::default();
    let mut log = TrainingLog {
        region: region.id,
        iterations: Vec::with_capacity(config.iterations),
    };

    // Sparse-point visibility per camera, for Patchmatch source selection.
    let covis: BTreeMap<u32, BTreeSet<u64>> = if config.patchmatch_enabled() {
        region_cameras
            .iter()
            .map(|c| Ok((c.id, visible_points(c, scene_cloud, 1)?)))
            .collect::<Result<_>>()?
    } else {
        BTreeMap::new()
    };
    let pm_params = PatchmatchParams::default();

    let mut order: Vec<usize> = (0..region_cameras.len()).collect();
    for iteration in 0..config.iterations {
        if iteration % region_cameras.len() == 0 {
            order.shuffle(&mut rng);
        }
        let camera = region_cameras[order[iteration % region_cameras.len()]];
        let target = &images[&camera.id];

        let frame = raster::render(camera, &cloud, &opts)?;
        let (loss, d_color) = photometric_loss(&frame, target, config.ssim_weight)?;
        if !loss.is_finite() {
            return Err(Error::Divergence {
                iteration,
                message: "non-finite loss".into(),
            });
        }
        let grads = raster::backward(camera, &cloud, &d_color, &opts)?;
        let visible = raster::visible_mask(camera, &cloud, opts.footprint_sigma);
        stats.record(camera, &grads, &visible);

        let rates = StepRates::at(config, iteration);
        adam_step(&mut cloud, &grads, &mut state, &rates)?;

        log.iterations.push(IterationRecord {
            iteration,
            loss,
            gaussian_count: cloud.len(),
        });

        if config.densify_interval > 0 && (iteration + 1) % config.densify_interval == 0 {
            let outcome = densify_and_prune(&cloud, &stats, config, &mut rng)?;
            state = state.remap(&outcome.parents);
            stats = GradStats::new(outcome.cloud.len());
            cloud = outcome.cloud;
        }

        if config.patchmatch_enabled()
            && iteration + 1 >= config.patchmatch_start
            && iteration + 1 <= config.patchmatch_end
            && (iteration + 1) % config.patchmatch_interval == 0
        {
            let sources = select_sources(camera, &region_cameras, &covis, config.min_covisible);
            if !sources.is_empty() {
                let rendered = raster::render(camera, &cloud, &opts)?;
                let mut field = patchmatch::init_planes(
                    &rendered,
                    camera,
                    mix_seed(config.seed, (region.id as u64) << 32 | iteration as u64),
                    &pm_params,
                );
                let source_pairs: Vec<(&Camera, &ImageRgb)> =
                    sources.iter().map(|c| (*c, &images[&c.id])).collect();
                patchmatch::propagate(
                    &mut field,
                    camera,
                    target,
                    &source_pairs,
                    config.patchmatch_rounds,
                    mix_seed(config.seed, (region.id as u64) << 40 | iteration as u64),
                    &pm_params,
                )?;
                let before = cloud.len();
                cloud = patchmatch::refine_and_reposition(
                    &cloud,
                    camera,
                    &rendered,
                    &field,
                    target,
                    config.patchmatch_tau,
                )?;
                if cloud.len() > before {
                    let mut parents: Vec<Option<usize>> =
                        (0..before).map(Some).collect();
                    parents.extend(std::iter::repeat_n(None, cloud.len() - before));
                    state = state.remap(&parents);
                    let mut new_stats = GradStats::new(cloud.len());
                    new_stats.accum_norm[..before].copy_from_slice(&stats.accum_norm[..before]);
                    new_stats.accum_world[..before].copy_from_slice(&stats.accum_world[..before]);
                    new_stats.observations[..before].copy_from_slice(&stats.observations[..before]);
                    stats = new_stats;
                }
            }
        }
    }
    Ok((cloud, log))
}
