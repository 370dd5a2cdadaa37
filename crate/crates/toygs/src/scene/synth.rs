//! Synthetic scene generation.
//!
//! Scenes are built from textured axis-aligned rectangles and boxes, with
//! cameras placed along a piecewise-linear path of positions and look-at
//! targets. Ground truth comes from analytic ray casting, so rendered depth
//! can be checked against exact plane intersections. Textures combine a
//! checkerboard with a linear gradient so photometric costs have usable
//! structure everywhere.

use super::{project_point, Camera, Frame, Point3D, PointCloud};
use crate::error::{Error, Result};
use nalgebra::{Matrix3, Vector3};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    X,
    Y,
    Z,
}

impl Axis {
    fn index(self) -> usize {
        match self {
            Axis::X => 0,
            Axis::Y => 1,
            Axis::Z => 2,
        }
    }

    /// Indices of the two free coordinates of a rectangle with this fixed axis.
    fn free(self) -> (usize, usize) {
        match self {
            Axis::X => (1, 2),
            Axis::Y => (0, 2),
            Axis::Z => (0, 1),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TextureSpec {
    /// Checkerboard cell edge length, world units.
    pub checker_cell: f64,
    pub color_a: [f64; 3],
    pub color_b: [f64; 3],
    /// Linear gradient added per unit of the first/second free coordinate.
    #[serde(default)]
    pub gradient_u: [f64; 3],
    #[serde(default)]
    pub gradient_v: [f64; 3],
}

impl TextureSpec {
    pub fn sample(&self, u: f64, v: f64) -> [f64; 3] {
        let cell = self.checker_cell.max(1e-9);
        let parity =
            ((u / cell).floor() as i64 + (v / cell).floor() as i64).rem_euclid(2);
        let base = if parity == 0 { self.color_a } else { self.color_b };
        let mut out = [0.0; 3];
        for c in 0..3 {
            out[c] = (base[c] + self.gradient_u[c] * u + self.gradient_v[c] * v).clamp(0.0, 1.0);
        }
        out
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum SurfaceSpec {
    /// Axis-aligned rectangle: the `axis` coordinate is fixed at `offset`,
    /// the remaining two span `min..max`.
    Rect {
        axis: Axis,
        offset: f64,
        min: [f64; 2],
        max: [f64; 2],
        texture: TextureSpec,
    },
    /// Axis-aligned box, expanded into its six faces.
    #[serde(rename = "box")]
    Cuboid {
        min: [f64; 3],
        max: [f64; 3],
        texture: TextureSpec,
    },
}

/// One resolved rectangle used for ray casting and point sampling.
#[derive(Debug, Clone)]
struct RectFace {
    axis: Axis,
    offset: f64,
    min: [f64; 2],
    max: [f64; 2],
    texture: TextureSpec,
}

impl RectFace {
    fn area(&self) -> f64 {
        (self.max[0] - self.min[0]).max(0.0) * (self.max[1] - self.min[1]).max(0.0)
    }

    fn point_at(&self, u: f64, v: f64) -> Vector3<f64> {
        let (fu, fv) = self.axis.free();
        let mut p = Vector3::zeros();
        p[self.axis.index()] = self.offset;
        p[fu] = u;
        p[fv] = v;
        p
    }
}

fn expand_surfaces(specs: &[SurfaceSpec]) -> Vec<RectFace> {
    let mut faces = Vec::new();
    for s in specs {
        match s {
            SurfaceSpec::Rect {
                axis,
                offset,
                min,
                max,
                texture,
            } => faces.push(RectFace {
                axis: *axis,
                offset: *offset,
                min: *min,
                max: *max,
                texture: texture.clone(),
            }),
            SurfaceSpec::Cuboid { min, max, texture } => {
                for axis in [Axis::X, Axis::Y, Axis::Z] {
                    let (fu, fv) = axis.free();
                    for offset in [min[axis.index()], max[axis.index()]] {
                        faces.push(RectFace {
                            axis,
                            offset,
                            min: [min[fu], min[fv]],
                            max: [max[fu], max[fv]],
                            texture: texture.clone(),
                        });
                    }
                }
            }
        }
    }
    faces
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CameraPathSpec {
    /// Piecewise-linear camera positions.
    pub positions: Vec<[f64; 3]>,
    /// Look-at targets, one per position waypoint (or a single constant
    /// target). Targets interpolate linearly within each position segment.
    pub targets: Vec<[f64; 3]>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SceneSpec {
    #[serde(default = "default_name")]
    pub name: String,
    pub width: u32,
    pub height: u32,
    /// Focal length in pixels (fx = fy); the principal point is the image center.
    pub focal: f64,
    pub camera_count: u32,
    pub path: CameraPathSpec,
    pub surfaces: Vec<SurfaceSpec>,
    /// Sparse points sampled per unit of surface area.
    pub point_density: f64,
    /// Ground-truth color antialiasing: s x s subrays per pixel (1 = point
    /// sampling). Depth always comes from the exact center ray.
    #[serde(default = "default_supersample")]
    pub supersample: u32,
    pub seed: u64,
}

fn default_supersample() -> u32 {
    1
}

fn default_name() -> String {
    "scene".to_string()
}

#[derive(Debug, Clone)]
pub struct SyntheticScene {
    pub cameras: Vec<Camera>,
    pub cloud: PointCloud,
    pub ground_truth: Vec<Frame>,
}

impl SceneSpec {
    pub fn from_toml_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::InvalidSpec(format!("{e}")))
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("scene spec serializes")
    }

    fn validate(&self) -> Result<()> {
        if self.camera_count == 0 {
            return Err(Error::InvalidSpec("camera_count must be >= 1".into()));
        }
        if self.surfaces.is_empty() {
            return Err(Error::InvalidSpec("at least one surface is required".into()));
        }
        if self.path.positions.is_empty() || self.path.targets.is_empty() {
            return Err(Error::InvalidSpec("camera path must not be empty".into()));
        }
        if self.path.targets.len() != 1 && self.path.targets.len() != self.path.positions.len() {
            return Err(Error::InvalidSpec(
                "targets must be a single point or one per position waypoint".into(),
            ));
        }
        if self.point_density <= 0.0 {
            return Err(Error::InvalidSpec("point_density must be positive".into()));
        }
        if self.width == 0 || self.height == 0 || self.focal <= 0.0 {
            return Err(Error::InvalidSpec("image size and focal must be positive".into()));
        }
        Ok(())
    }
}

/// Locate parameter `t in [0,1]` on the piecewise-linear position path, with
/// `t` proportional to arc length. Returns the segment index and in-segment
/// fraction.
fn locate_on_path(points: &[Vector3<f64>], t: f64) -> (usize, f64) {
    if points.len() == 1 {
        return (0, 0.0);
    }
    let seg_lens: Vec<f64> = points.windows(2).map(|w| (w[1] - w[0]).norm()).collect();
    let total: f64 = seg_lens.iter().sum();
    if total <= 1e-12 {
        return (0, 0.0);
    }
    let mut want = t.clamp(0.0, 1.0) * total;
    for (i, len) in seg_lens.iter().enumerate() {
        if want <= *len || i + 1 == seg_lens.len() {
            let f = if *len > 1e-12 { (want / len).clamp(0.0, 1.0) } else { 0.0 };
            return (i, f);
        }
        want -= len;
    }
    (seg_lens.len() - 1, 1.0)
}

/// Camera position and look-at target at path parameter `t`.
fn sample_pose(path: &CameraPathSpec, t: f64) -> (Vector3<f64>, Vector3<f64>) {
    let positions: Vec<Vector3<f64>> = path
        .positions
        .iter()
        .map(|p| Vector3::new(p[0], p[1], p[2]))
        .collect();
    let (seg, f) = locate_on_path(&positions, t);
    let pos = if positions.len() == 1 {
        positions[0]
    } else {
        positions[seg] + (positions[seg + 1] - positions[seg]) * f
    };
    let tv = |i: usize| Vector3::new(path.targets[i][0], path.targets[i][1], path.targets[i][2]);
    let target = if path.targets.len() == 1 {
        tv(0)
    } else {
        tv(seg) + (tv(seg + 1) - tv(seg)) * f
    };
    (pos, target)
}

/// World-to-camera rotation looking from `pos` toward `target`, y-up world,
/// camera frame x-right / y-down / z-forward.
pub fn look_at_rotation(pos: &Vector3<f64>, target: &Vector3<f64>) -> Matrix3<f64> {
    let mut forward = target - pos;
    if forward.norm() < 1e-12 {
        forward = Vector3::new(0.0, 0.0, 1.0);
    }
    let forward = forward.normalize();
    let mut up = Vector3::new(0.0, 1.0, 0.0);
    if forward.cross(&up).norm() < 1e-9 {
        up = Vector3::new(0.0, 0.0, 1.0);
    }
    let right = forward.cross(&up).normalize();
    let down = forward.cross(&right);
    Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()])
}

fn raycast(faces: &[RectFace], origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<(f64, usize, f64, f64)> {
    let mut best: Option<(f64, usize, f64, f64)> = None;
    for (fi, face) in faces.iter().enumerate() {
        let k = face.axis.index();
        if dir[k].abs() < 1e-15 {
            continue;
        }
        let t = (face.offset - origin[k]) / dir[k];
        if t <= 1e-9 {
            continue;
        }
        let hit = origin + dir * t;
        let (fu, fv) = face.axis.free();
        let (u, v) = (hit[fu], hit[fv]);
        if u < face.min[0] || u > face.max[0] || v < face.min[1] || v > face.max[1] {
            continue;
        }
        if best.is_none() || t < best.unwrap().0 {
            best = Some((t, fi, u, v));
        }
    }
    best
}

/// Render the exact ground truth for one camera by ray casting. Depth, alpha
/// and normal come from the center ray; color averages `ss x ss` subrays.
fn ground_truth_frame(camera: &Camera, faces: &[RectFace], ss: u32) -> Frame {
    let mut frame = Frame::new_filled(camera.width, camera.height, [0.0; 3]);
    let origin = camera.position();
    let rot_t = camera.rotation.transpose();
    let ss = ss.max(1);
    for y in 0..camera.height {
        for x in 0..camera.width {
            let ray_cam = camera.pixel_ray(x as f64 + 0.5, y as f64 + 0.5);
            let dir_world = rot_t * ray_cam;
            // dir has unit camera-frame z, so the ray parameter is the z-depth.
            if let Some((t, fi, u, v)) = raycast(faces, &origin, &dir_world) {
                let idx = frame.idx(x, y);
                let face = &faces[fi];
                frame.depth[idx] = t;
                frame.alpha[idx] = 1.0;
                let mut n_world = Vector3::zeros();
                n_world[face.axis.index()] = 1.0;
                if n_world.dot(&dir_world) > 0.0 {
                    n_world = -n_world;
                }
                let n_cam = camera.rotation * n_world;
                frame.normal[idx] = [n_cam.x, n_cam.y, n_cam.z];
                if ss == 1 {
                    frame.color[idx] = face.texture.sample(u, v);
                } else {
                    let mut acc = [0.0; 3];
                    let mut hits = 0u32;
                    for sy in 0..ss {
                        for sx in 0..ss {
                            let px = x as f64 + (sx as f64 + 0.5) / ss as f64;
                            let py = y as f64 + (sy as f64 + 0.5) / ss as f64;
                            let sub_dir = rot_t * camera.pixel_ray(px, py);
                            if let Some((_, sfi, su, sv)) = raycast(faces, &origin, &sub_dir) {
                                let c = faces[sfi].texture.sample(su, sv);
                                for ch in 0..3 {
                                    acc[ch] += c[ch];
                                }
                                hits += 1;
                            }
                        }
                    }
                    if hits > 0 {
                        frame.color[idx] = acc.map(|v| v / hits as f64);
                    }
                }
            }
        }
    }
    frame
}

/// Generate a deterministic synthetic scene: cameras along the path, a point
/// cloud sampled from the surfaces, and analytically rasterized ground truth.
pub fn generate_synthetic_scene(spec: &SceneSpec) -> Result<SyntheticScene> {
    spec.validate()?;
    let faces = expand_surfaces(&spec.surfaces);
    if faces.iter().all(|f| f.area() <= 0.0) {
        return Err(Error::InvalidSpec("all surfaces are degenerate".into()));
    }

    let mut cameras = Vec::with_capacity(spec.camera_count as usize);
    for i in 0..spec.camera_count {
        let t = if spec.camera_count == 1 {
            0.0
        } else {
            i as f64 / (spec.camera_count - 1) as f64
        };
        let (pos, target) = sample_pose(&spec.path, t);
        let rotation = look_at_rotation(&pos, &target);
        let translation = -rotation * pos;
        let mut cam = Camera::new(
            i,
            spec.focal,
            spec.focal,
            spec.width as f64 / 2.0,
            spec.height as f64 / 2.0,
            spec.width,
            spec.height,
            rotation,
            translation,
        )?;
        cam.image_path = Some(format!("cam_{i:05}.png").into());
        cameras.push(cam);
    }

    // Stratified sampling: one jittered point per grid cell. Jitter stays in
    // the middle half of each cell, which keeps points at least half a cell
    // apart and stops nearby samples from fighting over visibility cells.
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut points = Vec::new();
    let mut next_id: u64 = 1;
    for face in &faces {
        let area = face.area();
        if area <= 0.0 {
            continue;
        }
        let count = (area * spec.point_density).ceil() as usize;
        let du = face.max[0] - face.min[0];
        let dv = face.max[1] - face.min[1];
        let grid_u = ((count as f64 * du / dv).sqrt().ceil() as usize).max(1);
        let grid_v = count.div_ceil(grid_u).max(1);
        let cell_u = du / grid_u as f64;
        let cell_v = dv / grid_v as f64;
        for gv in 0..grid_v {
            for gu in 0..grid_u {
                let u = face.min[0] + (gu as f64 + rng.random_range(0.25..0.75)) * cell_u;
                let v = face.min[1] + (gv as f64 + rng.random_range(0.25..0.75)) * cell_v;
                let position = face.point_at(u, v);
                let color = face.texture.sample(u, v);
                points.push(Point3D {
                    id: next_id,
                    position,
                    color: [color[0], color[1], color[2]],
                    track_length: 0,
                });
                next_id += 1;
            }
        }
    }
    // Track length = number of cameras that see the point (no occlusion test).
    for p in &mut points {
        let mut n = 0;
        for cam in &cameras {
            if project_point(cam, &p.position)?.is_some() {
                n += 1;
            }
        }
        p.track_length = n;
    }

    let ground_truth = cameras.iter().map(|c| ground_truth_frame(c, &faces, spec.supersample)).collect();

    Ok(SyntheticScene {
        cameras,
        cloud: PointCloud::new(points)?,
        ground_truth,
    })
}

/// Analytic ground truth for an arbitrary camera against a spec's surfaces.
pub fn render_ground_truth(spec: &SceneSpec, camera: &Camera) -> Result<Frame> {
    let faces = expand_surfaces(&spec.surfaces);
    if faces.is_empty() {
        return Err(Error::InvalidSpec("no surfaces to render".into()));
    }
    Ok(ground_truth_frame(camera, &faces, spec.supersample))
}

/// A fronto-parallel textured wall with a short camera arc in front of it.
/// The wall spans generously past the camera frusta so every pixel is covered.
pub fn single_plane_spec(cameras: u32, width: u32, height: u32, seed: u64) -> SceneSpec {
    SceneSpec {
        name: "single-plane".into(),
        width,
        height,
        focal: width as f64 * 0.9,
        camera_count: cameras,
        path: CameraPathSpec {
            positions: vec![[-1.2, -0.3, 0.0], [1.2, 0.3, 0.4]],
            targets: vec![[-0.4, 0.0, 5.0], [0.4, 0.0, 5.0]],
        },
        surfaces: vec![SurfaceSpec::Rect {
            axis: Axis::Z,
            offset: 5.0,
            min: [-6.0, -6.0],
            max: [6.0, 6.0],
            texture: TextureSpec {
                checker_cell: 0.8,
                color_a: [0.85, 0.25, 0.2],
                color_b: [0.15, 0.3, 0.8],
                gradient_u: [0.02, 0.03, 0.0],
                gradient_v: [0.0, 0.02, 0.03],
            },
        }],
        point_density: 6.0,
        supersample: 4,
        seed,
    }
}

/// Three rooms spaced along x, each a textured back wall with a zig-zag
/// camera path inside the room. Transit segments between rooms keep their
/// look-at target pinned on the inter-room gap, so every camera sampled in a
/// transit sees roughly half of each neighboring wall — a doorway camera.
pub fn three_room_spec(width: u32, height: u32, seed: u64) -> SceneSpec {
    let room_centers = [-8.0_f64, 0.0, 8.0];
    let mut positions = Vec::new();
    let mut targets = Vec::new();
    for (ri, &cx) in room_centers.iter().enumerate() {
        let wall = [cx, 0.0, 6.0];
        positions.push([cx - 2.2, -0.4, 0.0]);
        positions.push([cx + 2.2, 0.4, 0.6]);
        positions.push([cx - 2.2, 0.4, 1.2]);
        positions.push([cx + 2.2, -0.4, 0.4]);
        for _ in 0..4 {
            targets.push(wall);
        }
        if ri + 1 < room_centers.len() {
            let next_cx = room_centers[ri + 1];
            let doorway = [(cx + next_cx) / 2.0, 0.0, 6.0];
            // Zero-length segment that swings the target onto the doorway,
            // then the transit itself, looking at the doorway throughout.
            positions.push([cx + 2.2, -0.4, 0.4]);
            targets.push(doorway);
            positions.push([next_cx - 2.2, -0.4, 0.0]);
            targets.push(doorway);
        }
    }
    let textures = [
        TextureSpec {
            checker_cell: 0.7,
            color_a: [0.9, 0.3, 0.2],
            color_b: [0.2, 0.2, 0.25],
            gradient_u: [0.01, 0.02, 0.0],
            gradient_v: [0.0, 0.01, 0.02],
        },
        TextureSpec {
            checker_cell: 0.9,
            color_a: [0.2, 0.8, 0.3],
            color_b: [0.15, 0.2, 0.5],
            gradient_u: [0.02, 0.0, 0.01],
            gradient_v: [0.01, 0.0, 0.02],
        },
        TextureSpec {
            checker_cell: 0.6,
            color_a: [0.85, 0.75, 0.2],
            color_b: [0.3, 0.15, 0.6],
            gradient_u: [0.0, 0.01, 0.02],
            gradient_v: [0.02, 0.01, 0.0],
        },
    ];
    let surfaces = room_centers
        .iter()
        .zip(&textures)
        .map(|(&cx, tex)| SurfaceSpec::Rect {
            axis: Axis::Z,
            offset: 6.0,
            min: [cx - 3.4, -2.6],
            max: [cx + 3.4, 2.6],
            texture: tex.clone(),
        })
        .collect();
    SceneSpec {
        name: "three-rooms".into(),
        width,
        height,
        focal: width as f64 * 0.75,
        camera_count: 30,
        path: CameraPathSpec { positions, targets },
        surfaces,
        point_density: 29.0,
        supersample: 4,
        seed,
    }
}
