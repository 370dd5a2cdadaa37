//! Adaptive spatial division: cluster cameras by position, assign points to
//! regions, then prune and expand each region's camera set by the visibility
//! ratio test.
//!
//! A camera belongs to region `i` when the occlusion-aware visible-point
//! count satisfies `M_Ai / M_c > 1/N` (strict). The ratio is evaluated with
//! integer cross-multiplication so boundary cases are exact. Every camera in
//! the scene is tested against every region, which both removes region
//! members that cannot see their region and pulls in outside cameras that
//! can; a camera may therefore belong to several regions.

use crate::error::{Error, Result};
use crate::scene::{visible_points, Camera, PointCloud};
use nalgebra::Vector3;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;

const KMEANS_MAX_ITERATIONS: usize = 100;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KMeansModel {
    pub centroids: Vec<[f64; 3]>,
    pub seed: u64,
    pub iterations_run: usize,
}

impl KMeansModel {
    pub fn centroid(&self, i: usize) -> Vector3<f64> {
        Vector3::new(self.centroids[i][0], self.centroids[i][1], self.centroids[i][2])
    }

    pub fn len(&self) -> usize {
        self.centroids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centroids.is_empty()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Region {
    pub id: usize,
    pub centroid: [f64; 3],
    /// Cameras selected for this region after prune/expand.
    pub camera_ids: Vec<u32>,
    /// Initial region point cloud (union of the selected cameras' visible points).
    pub point_ids: Vec<u64>,
    /// Greatest distance from the centroid to any selected camera.
    pub distance_threshold: f64,
}

impl Region {
    pub fn centroid_vec(&self) -> Vector3<f64> {
        Vector3::new(self.centroid[0], self.centroid[1], self.centroid[2])
    }

    pub fn point_id_set(&self) -> BTreeSet<u64> {
        self.point_ids.iter().copied().collect()
    }
}

fn squared_distance(a: &Vector3<f64>, b: &Vector3<f64>) -> f64 {
    (a - b).norm_squared()
}

/// Lloyd's algorithm with k-means++ seeding. Deterministic for a fixed seed;
/// empty clusters are re-seeded with the point farthest from its assigned
/// centroid.
pub fn fit_kmeans(positions: &[Vector3<f64>], n: usize, seed: u64) -> Result<KMeansModel> {
    if n < 1 {
        return Err(Error::InvalidInput("region count must be >= 1".into()));
    }
    if positions.len() < n {
        return Err(Error::InvalidInput(format!(
            "{} positions cannot support {} clusters",
            positions.len(),
            n
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // k-means++ seeding.
    let mut centroids: Vec<Vector3<f64>> = Vec::with_capacity(n);
    centroids.push(positions[rng.random_range(0..positions.len())]);
    while centroids.len() < n {
        let d2: Vec<f64> = positions
            .iter()
            .map(|p| {
                centroids
                    .iter()
                    .map(|c| squared_distance(p, c))
                    .fold(f64::INFINITY, f64::min)
            })
            .collect();
        let total: f64 = d2.iter().sum();
        let next = if total <= 0.0 {
            // All remaining points coincide with existing centroids.
            rng.random_range(0..positions.len())
        } else {
            let mut target = rng.random_range(0.0..total);
            let mut chosen = positions.len() - 1;
            for (i, &w) in d2.iter().enumerate() {
                if target < w {
                    chosen = i;
                    break;
                }
                target -= w;
            }
            chosen
        };
        centroids.push(positions[next]);
    }

    let mut assignment = vec![usize::MAX; positions.len()];
    let mut iterations_run = 0;
    for _ in 0..KMEANS_MAX_ITERATIONS {
        iterations_run += 1;
        let mut changed = false;
        for (pi, p) in positions.iter().enumerate() {
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for (ci, c) in centroids.iter().enumerate() {
                let d = squared_distance(p, c);
                if d < best_d {
                    best_d = d;
                    best = ci;
                }
            }
            if assignment[pi] != best {
                assignment[pi] = best;
                changed = true;
            }
        }
        // Re-seed empty clusters with the point farthest from its centroid.
        loop {
            let mut counts = vec![0usize; n];
            for &a in &assignment {
                counts[a] += 1;
            }
            let Some(empty) = counts.iter().position(|&c| c == 0) else {
                break;
            };
            let (farthest, _) = positions
                .iter()
                .enumerate()
                .map(|(pi, p)| (pi, squared_distance(p, &centroids[assignment[pi]])))
                .max_by(|a, b| a.1.partial_cmp(&b.1).unwrap())
                .unwrap();
            centroids[empty] = positions[farthest];
            assignment[farthest] = empty;
            changed = true;
        }
        if !changed {
            break;
        }
        let mut sums = vec![Vector3::zeros(); n];
        let mut counts = vec![0usize; n];
        for (pi, &a) in assignment.iter().enumerate() {
            sums[a] += positions[pi];
            counts[a] += 1;
        }
        for ci in 0..n {
            if counts[ci] > 0 {
                centroids[ci] = sums[ci] / counts[ci] as f64;
            }
        }
    }

    Ok(KMeansModel {
        centroids: centroids.iter().map(|c| [c.x, c.y, c.z]).collect(),
        seed,
        iterations_run,
    })
}

/// Nearest centroid by Euclidean distance; ties break to the lowest region id.
pub fn assign_region(position: &Vector3<f64>, model: &KMeansModel) -> Result<usize> {
    if !position.iter().all(|v| v.is_finite()) {
        return Err(Error::InvalidInput("cannot assign a non-finite position".into()));
    }
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for i in 0..model.len() {
        let d = squared_distance(position, &model.centroid(i));
        if d < best_d {
            best_d = d;
            best = i;
        }
    }
    Ok(best)
}

/// Visibility-ratio test for one camera against one region: true iff
/// `M_Ai / M_c > 1/N` strictly, with `M_c > 0`.
pub fn camera_mask(
    camera: &Camera,
    region_point_ids: &BTreeSet<u64>,
    cloud: &PointCloud,
    n: usize,
    patch_px: u32,
) -> Result<bool> {
    let visible = visible_points(camera, cloud, patch_px)?;
    let m_c = visible.len() as u64;
    if m_c == 0 {
        return Ok(false);
    }
    let m_ai = visible.intersection(region_point_ids).count() as u64;
    // Exact strict comparison M_Ai / M_c > 1 / N.
    Ok(m_ai * n as u64 > m_c)
}

/// Union of the selected cameras' visible points. May deliberately include
/// points whose nearest centroid lies in another region.
pub fn build_region_cloud(
    selected_cameras: &[&Camera],
    cloud: &PointCloud,
    patch_px: u32,
) -> Result<BTreeSet<u64>> {
    let mut union = BTreeSet::new();
    for cam in selected_cameras {
        union.extend(visible_points(cam, cloud, patch_px)?);
    }
    if union.is_empty() {
        return Err(Error::EmptyRegion(0));
    }
    Ok(union)
}

/// Full partition: fit k-means on camera positions, assign points to regions,
/// select cameras per region by the mask test over all scene cameras, and
/// build each region's point cloud and distance threshold.
///
/// With `n == 1` the strict ratio test is unsatisfiable, so the single region
/// keeps every camera that sees at least one point.
pub fn partition_scene(
    cameras: &[Camera],
    cloud: &PointCloud,
    n: usize,
    seed: u64,
    patch_px: u32,
) -> Result<(KMeansModel, Vec<Region>)> {
    if cameras.len() < n || n < 1 {
        return Err(Error::InvalidInput(format!(
            "cannot split {} cameras into {} regions",
            cameras.len(),
            n
        )));
    }
    let positions: Vec<Vector3<f64>> = cameras.iter().map(|c| c.position()).collect();
    let model = fit_kmeans(&positions, n, seed)?;

    // Assign every point to its nearest region.
    let mut region_points: Vec<BTreeSet<u64>> = vec![BTreeSet::new(); n];
    for p in &cloud.points {
        let r = assign_region(&p.position, &model)?;
        region_points[r].insert(p.id);
    }

    // Cache per-camera visibility; the mask and the region clouds reuse it.
    let mut cam_visible: Vec<BTreeSet<u64>> = Vec::with_capacity(cameras.len());
    for cam in cameras {
        cam_visible.push(visible_points(cam, cloud, patch_px)?);
    }

    let mut regions = Vec::with_capacity(n);
    for r in 0..n {
        let mut camera_ids = Vec::new();
        let mut selected_idx = Vec::new();
        for (ci, cam) in cameras.iter().enumerate() {
            let m_c = cam_visible[ci].len() as u64;
            if m_c == 0 {
                continue;
            }
            let keep = if n == 1 {
                true
            } else {
                let m_ai = cam_visible[ci].intersection(&region_points[r]).count() as u64;
                m_ai * n as u64 > m_c
            };
            if keep {
                camera_ids.push(cam.id);
                selected_idx.push(ci);
            }
        }
        if camera_ids.is_empty() {
            return Err(Error::Partition(r));
        }
        let mut point_ids = BTreeSet::new();
        for &ci in &selected_idx {
            point_ids.extend(cam_visible[ci].iter().copied());
        }
        if point_ids.is_empty() {
            return Err(Error::EmptyRegion(r));
        }
        let centroid = model.centroid(r);
        let distance_threshold = selected_idx
            .iter()
            .map(|&ci| (positions[ci] - centroid).norm())
            .fold(0.0, f64::max);
        regions.push(Region {
            id: r,
            centroid: [centroid.x, centroid.y, centroid.z],
            camera_ids,
            point_ids: point_ids.into_iter().collect(),
            distance_threshold,
        });
    }
    Ok((model, regions))
}
