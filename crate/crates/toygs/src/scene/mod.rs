//! Core geometric types: cameras, sparse points, Gaussians, rendered frames.
//!
//! Everything here is an immutable value object after construction; all
//! operations are pure functions and safe to call concurrently.

mod colmap;
mod io;
mod synth;

pub use colmap::{load_colmap_model, save_colmap_model};
pub use io::{
    read_depth, read_png, write_depth, write_normal_png, write_png, DEPTH_MAGIC,
};
pub use synth::{
    generate_synthetic_scene, look_at_rotation, render_ground_truth, single_plane_spec,
    three_room_spec, Axis, CameraPathSpec, SceneSpec, SurfaceSpec, SyntheticScene, TextureSpec,
};

use crate::error::{Error, Result};
use nalgebra::{Matrix3, UnitQuaternion, Vector2, Vector3};
use std::collections::BTreeSet;
use std::path::PathBuf;

/// Points closer than this to the image plane count as behind the camera.
pub const DEPTH_EPSILON: f64 = 1e-6;

/// Pinhole camera with a world-to-camera rigid pose.
///
/// Camera frame: x right, y down, z forward; a world point `P` maps to
/// `x_cam = R * P + t` and projects through `K` when `x_cam.z > 0`.
#[derive(Debug, Clone)]
pub struct Camera {
    pub id: u32,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
    /// Rotation part of the world-to-camera transform.
    pub rotation: Matrix3<f64>,
    /// Translation part of the world-to-camera transform.
    pub translation: Vector3<f64>,
    pub image_path: Option<PathBuf>,
}

impl Camera {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        id: u32,
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: u32,
        height: u32,
        rotation: Matrix3<f64>,
        translation: Vector3<f64>,
    ) -> Result<Self> {
        let cam = Camera {
            id,
            fx,
            fy,
            cx,
            cy,
            width,
            height,
            rotation,
            translation,
            image_path: None,
        };
        cam.validate()?;
        Ok(cam)
    }

    fn validate(&self) -> Result<()> {
        if self.width < 1 || self.height < 1 {
            return Err(Error::InvalidInput("camera image size must be >= 1".into()));
        }
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::InvalidInput("focal lengths must be positive".into()));
        }
        if !(self.cx >= 0.0
            && self.cx < self.width as f64
            && self.cy >= 0.0
            && self.cy < self.height as f64)
        {
            return Err(Error::InvalidInput(
                "principal point must lie inside the image".into(),
            ));
        }
        let r = &self.rotation;
        let orth = (r * r.transpose() - Matrix3::identity()).norm();
        if orth > 1e-9 || (r.determinant() - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidInput(
                "rotation must be orthonormal with determinant +1".into(),
            ));
        }
        Ok(())
    }

    pub fn intrinsics(&self) -> Matrix3<f64> {
        Matrix3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }

    /// Camera center in world coordinates, `-R^T t`.
    pub fn position(&self) -> Vector3<f64> {
        -self.rotation.transpose() * self.translation
    }

    pub fn world_to_camera(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// Unit-depth ray through a pixel in camera coordinates: `((u-cx)/fx, (v-cy)/fy, 1)`.
    pub fn pixel_ray(&self, u: f64, v: f64) -> Vector3<f64> {
        Vector3::new((u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0)
    }

    /// Back-project a pixel at a given camera-frame depth.
    pub fn backproject(&self, u: f64, v: f64, depth: f64) -> Vector3<f64> {
        self.pixel_ray(u, v) * depth
    }

    pub fn camera_to_world(&self, x_cam: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.transpose() * (x_cam - self.translation)
    }
}

/// Sparse 3D point from structure-from-motion.
#[derive(Debug, Clone)]
pub struct Point3D {
    pub id: u64,
    pub position: Vector3<f64>,
    /// RGB in [0,1].
    pub color: [f64; 3],
    /// Number of source images observing this point.
    pub track_length: u32,
}

#[derive(Debug, Clone, Default)]
pub struct PointCloud {
    pub points: Vec<Point3D>,
}

impl PointCloud {
    pub fn new(points: Vec<Point3D>) -> Result<Self> {
        let mut seen = BTreeSet::new();
        for p in &points {
            if !seen.insert(p.id) {
                return Err(Error::InvalidInput(format!("duplicate point id {}", p.id)));
            }
            if !p.position.iter().all(|v| v.is_finite()) {
                return Err(Error::InvalidInput(format!(
                    "point {} has a non-finite position",
                    p.id
                )));
            }
        }
        Ok(PointCloud { points })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Anisotropic 3D Gaussian. Scale is stored in log-space and opacity as a
/// pre-sigmoid logit so the optimizer works on unconstrained parameters.
#[derive(Debug, Clone)]
pub struct Gaussian {
    pub mean: Vector3<f64>,
    /// Per-axis log standard deviations, world units.
    pub log_scale: Vector3<f64>,
    pub rotation: UnitQuaternion<f64>,
    pub opacity_logit: f64,
    /// Degree-0 RGB appearance, unconstrained; clamped to [0,1] at render.
    pub color: Vector3<f64>,
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn logit(p: f64) -> f64 {
    let p = p.clamp(1e-12, 1.0 - 1e-12);
    (p / (1.0 - p)).ln()
}

impl Gaussian {
    /// Linear per-axis standard deviations.
    pub fn scale(&self) -> Vector3<f64> {
        self.log_scale.map(f64::exp)
    }

    pub fn opacity(&self) -> f64 {
        sigmoid(self.opacity_logit)
    }

    pub fn clamped_color(&self) -> Vector3<f64> {
        self.color.map(|c| c.clamp(0.0, 1.0))
    }

    /// Realized covariance `R diag(s^2) R^T`.
    pub fn covariance(&self) -> Matrix3<f64> {
        let r = self.rotation.to_rotation_matrix().into_inner();
        let s = self.scale();
        let d = Matrix3::from_diagonal(&Vector3::new(s.x * s.x, s.y * s.y, s.z * s.z));
        r * d * r.transpose()
    }
}

#[derive(Debug, Clone)]
pub struct GaussianCloud {
    pub gaussians: Vec<Gaussian>,
    pub scene_center: Vector3<f64>,
    pub scene_radius: f64,
}

impl GaussianCloud {
    pub fn len(&self) -> usize {
        self.gaussians.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gaussians.is_empty()
    }
}

/// Rendered output: color, alpha-normalized depth, camera-frame normals and
/// accumulated opacity. Depth and normals are zero where alpha is ~0.
#[derive(Debug, Clone)]
pub struct Frame {
    pub width: u32,
    pub height: u32,
    /// Row-major RGB in [0,1].
    pub color: Vec<[f64; 3]>,
    pub depth: Vec<f64>,
    /// Unit vectors in the camera frame, or exactly zero.
    pub normal: Vec<[f64; 3]>,
    pub alpha: Vec<f64>,
}

impl Frame {
    pub fn new_filled(width: u32, height: u32, background: [f64; 3]) -> Self {
        let n = width as usize * height as usize;
        Frame {
            width,
            height,
            color: vec![background; n],
            depth: vec![0.0; n],
            normal: vec![[0.0; 3]; n],
            alpha: vec![0.0; n],
        }
    }

    pub fn idx(&self, x: u32, y: u32) -> usize {
        y as usize * self.width as usize + x as usize
    }
}

/// Plain RGB image in [0,1], row-major.
#[derive(Debug, Clone)]
pub struct ImageRgb {
    pub width: u32,
    pub height: u32,
    pub data: Vec<[f64; 3]>,
}

impl ImageRgb {
    pub fn new(width: u32, height: u32) -> Self {
        ImageRgb {
            width,
            height,
            data: vec![[0.0; 3]; width as usize * height as usize],
        }
    }

    pub fn idx(&self, x: u32, y: u32) -> usize {
        y as usize * self.width as usize + x as usize
    }

    pub fn get(&self, x: u32, y: u32) -> [f64; 3] {
        self.data[self.idx(x, y)]
    }

    /// Channel-mean gray value.
    pub fn gray(&self, x: u32, y: u32) -> f64 {
        let c = self.get(x, y);
        (c[0] + c[1] + c[2]) / 3.0
    }

    pub fn from_frame(frame: &Frame) -> Self {
        ImageRgb {
            width: frame.width,
            height: frame.height,
            data: frame.color.clone(),
        }
    }
}

/// Project a world point through a camera. Returns the pixel and the
/// camera-frame depth, or `None` when the point is behind the camera or
/// falls outside `[0,width) x [0,height)`.
pub fn project_point(camera: &Camera, point: &Vector3<f64>) -> Result<Option<(Vector2<f64>, f64)>> {
    if !point.iter().all(|v| v.is_finite()) {
        return Err(Error::InvalidInput("cannot project a non-finite point".into()));
    }
    let x_cam = camera.world_to_camera(point);
    let z = x_cam.z;
    if z <= DEPTH_EPSILON {
        return Ok(None);
    }
    let u = camera.fx * x_cam.x / z + camera.cx;
    let v = camera.fy * x_cam.y / z + camera.cy;
    if u < 0.0 || u >= camera.width as f64 || v < 0.0 || v >= camera.height as f64 {
        return Ok(None);
    }
    Ok(Some((Vector2::new(u, v), z)))
}

/// Occlusion-aware visibility: the image is divided into `patch_px` cells and
/// only the nearest projected point per cell survives. Ties on depth keep the
/// lowest id.
pub fn visible_points(camera: &Camera, cloud: &PointCloud, patch_px: u32) -> Result<BTreeSet<u64>> {
    if patch_px < 1 {
        return Err(Error::InvalidInput("patch_px must be >= 1".into()));
    }
    let cells_x = camera.width.div_ceil(patch_px) as usize;
    let cells_y = camera.height.div_ceil(patch_px) as usize;
    // (depth, id) winner per cell
    let mut best: Vec<Option<(f64, u64)>> = vec![None; cells_x * cells_y];
    for p in &cloud.points {
        let Some((px, depth)) = project_point(camera, &p.position)? else {
            continue;
        };
        let cx = (px.x as u32 / patch_px) as usize;
        let cy = (px.y as u32 / patch_px) as usize;
        let cell = &mut best[cy * cells_x + cx];
        let replace = match cell {
            None => true,
            Some((d, id)) => depth < *d || (depth == *d && p.id < *id),
        };
        if replace {
            *cell = Some((depth, p.id));
        }
    }
    Ok(best.into_iter().flatten().map(|(_, id)| id).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    pub(crate) fn test_camera(width: u32, height: u32) -> Camera {
        Camera::new(
            0,
            100.0,
            100.0,
            50.0,
            50.0,
            width,
            height,
            Matrix3::identity(),
            Vector3::zeros(),
        )
        .unwrap()
    }

    #[test]
    fn principal_ray_projects_to_principal_point() {
        let cam = test_camera(200, 200);
        let (px, depth) = project_point(&cam, &Vector3::new(0.0, 0.0, 2.0))
            .unwrap()
            .unwrap();
        assert_relative_eq!(px.x, 50.0);
        assert_relative_eq!(px.y, 50.0);
        assert_relative_eq!(depth, 2.0);
    }

    #[test]
    fn off_axis_point_follows_pinhole_model() {
        let cam = test_camera(200, 200);
        let (px, depth) = project_point(&cam, &Vector3::new(1.0, 0.0, 2.0))
            .unwrap()
            .unwrap();
        assert_relative_eq!(px.x, 100.0);
        assert_relative_eq!(px.y, 50.0);
        assert_relative_eq!(depth, 2.0);
    }

    #[test]
    fn behind_camera_is_absent() {
        let cam = test_camera(200, 200);
        assert!(project_point(&cam, &Vector3::new(0.0, 0.0, -1.0))
            .unwrap()
            .is_none());
    }

    #[test]
    fn non_finite_point_is_an_error() {
        let cam = test_camera(200, 200);
        assert!(project_point(&cam, &Vector3::new(f64::NAN, 0.0, 2.0)).is_err());
    }

    #[test]
    fn out_of_bounds_pixel_is_absent() {
        let cam = test_camera(100, 100);
        // u = 100*1.0/1.0 + 50 = 150 >= width
        assert!(project_point(&cam, &Vector3::new(1.0, 0.0, 1.0))
            .unwrap()
            .is_none());
    }

    fn cloud_of(points: &[(u64, [f64; 3])]) -> PointCloud {
        PointCloud::new(
            points
                .iter()
                .map(|(id, p)| Point3D {
                    id: *id,
                    position: Vector3::new(p[0], p[1], p[2]),
                    color: [0.5; 3],
                    track_length: 1,
                })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn nearest_point_wins_its_cell() {
        let cam = test_camera(100, 100);
        // Both project near the principal point, depths 1 and 3.
        let cloud = cloud_of(&[(1, [0.0, 0.0, 1.0]), (2, [0.0, 0.0, 3.0])]);
        let vis = visible_points(&cam, &cloud, 16).unwrap();
        assert_eq!(vis.into_iter().collect::<Vec<_>>(), vec![1]);
    }

    #[test]
    fn out_of_frustum_points_yield_empty_set() {
        let cam = test_camera(100, 100);
        let cloud = cloud_of(&[(1, [0.0, 0.0, -1.0]), (2, [50.0, 0.0, 1.0])]);
        assert!(visible_points(&cam, &cloud, 16).unwrap().is_empty());
    }

    #[test]
    fn single_cell_keeps_only_the_globally_nearest() {
        let cam = test_camera(100, 100);
        let pts: Vec<(u64, [f64; 3])> = (0..7)
            .map(|i| {
                let z = 2.0 + i as f64 * 0.7;
                (i as u64 + 1, [0.1 * i as f64, -0.05 * i as f64, z])
            })
            .collect();
        let cloud = cloud_of(&pts);
        // Brute-force nearest over all in-frustum projections.
        let mut nearest: Option<(f64, u64)> = None;
        for p in &cloud.points {
            if let Some((_, d)) = project_point(&cam, &p.position).unwrap() {
                if nearest.is_none() || d < nearest.unwrap().0 {
                    nearest = Some((d, p.id));
                }
            }
        }
        let vis = visible_points(&cam, &cloud, 100).unwrap();
        assert_eq!(vis.len(), 1);
        assert!(vis.contains(&nearest.unwrap().1));
    }

    #[test]
    fn patch_one_matches_pixel_grid_brute_force() {
        use rand::Rng;
        use rand::SeedableRng;
        let cam = test_camera(64, 64);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let pts: Vec<(u64, [f64; 3])> = (0..300)
            .map(|i| {
                (
                    i as u64,
                    [
                        rng.random_range(-0.4..0.4),
                        rng.random_range(-0.4..0.4),
                        rng.random_range(0.5..4.0),
                    ],
                )
            })
            .collect();
        let cloud = cloud_of(&pts);
        // Oracle: per exact pixel cell, keep the nearest (ties -> lowest id).
        let mut best: std::collections::BTreeMap<(u32, u32), (f64, u64)> = Default::default();
        for p in &cloud.points {
            if let Some((px, d)) = project_point(&cam, &p.position).unwrap() {
                let key = (px.x as u32, px.y as u32);
                match best.get(&key) {
                    Some(&(bd, bid)) if bd < d || (bd == d && bid < p.id) => {}
                    _ => {
                        best.insert(key, (d, p.id));
                    }
                }
            }
        }
        let oracle: BTreeSet<u64> = best.values().map(|&(_, id)| id).collect();
        assert_eq!(visible_points(&cam, &cloud, 1).unwrap(), oracle);
    }

    #[test]
    fn halving_patch_keeps_unique_cell_occupants() {
        use rand::Rng;
        use rand::SeedableRng;
        let cam = test_camera(64, 64);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let pts: Vec<(u64, [f64; 3])> = (0..200)
            .map(|i| {
                (
                    i as u64,
                    [
                        rng.random_range(-0.4..0.4),
                        rng.random_range(-0.4..0.4),
                        rng.random_range(0.5..4.0),
                    ],
                )
            })
            .collect();
        let cloud = cloud_of(&pts);
        let coarse = visible_points(&cam, &cloud, 16).unwrap();
        let fine = visible_points(&cam, &cloud, 8).unwrap();
        // Count per-coarse-cell occupancy to find unique occupants.
        let mut cell_count: std::collections::BTreeMap<(u32, u32), u32> = Default::default();
        let mut cell_of: std::collections::BTreeMap<u64, (u32, u32)> = Default::default();
        for p in &cloud.points {
            if let Some((px, _)) = project_point(&cam, &p.position).unwrap() {
                let key = (px.x as u32 / 16, px.y as u32 / 16);
                *cell_count.entry(key).or_default() += 1;
                cell_of.insert(p.id, key);
            }
        }
        for id in &coarse {
            if cell_count[&cell_of[id]] == 1 {
                assert!(fine.contains(id), "unique occupant {id} lost on refinement");
            }
        }
    }

    #[test]
    fn projection_round_trip_recovers_the_point() {
        use rand::Rng;
        use rand::SeedableRng;
        let rot = UnitQuaternion::from_euler_angles(0.3, -0.2, 0.5)
            .to_rotation_matrix()
            .into_inner();
        let cam = Camera::new(
            1,
            120.0,
            110.0,
            32.0,
            30.0,
            64,
            60,
            rot,
            Vector3::new(0.2, -0.1, 0.4),
        )
        .unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let mut checked = 0;
        while checked < 50 {
            let p = Vector3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(0.5..5.0),
            );
            let world = cam.camera_to_world(&p);
            let Some((px, z)) = project_point(&cam, &world).unwrap() else {
                continue;
            };
            let recovered = cam.camera_to_world(&cam.backproject(px.x, px.y, z));
            assert!((recovered - world).norm() < 1e-9);
            checked += 1;
        }
    }

    #[test]
    fn camera_rejects_bad_rotation() {
        let mut r = Matrix3::identity();
        r[(0, 0)] = 2.0;
        assert!(Camera::new(0, 100.0, 100.0, 50.0, 50.0, 100, 100, r, Vector3::zeros()).is_err());
    }

    #[test]
    fn duplicate_point_ids_rejected() {
        let pts = vec![
            Point3D {
                id: 1,
                position: Vector3::zeros(),
                color: [0.0; 3],
                track_length: 0,
            },
            Point3D {
                id: 1,
                position: Vector3::new(1.0, 0.0, 0.0),
                color: [0.0; 3],
                track_length: 0,
            },
        ];
        assert!(PointCloud::new(pts).is_err());
    }
}
