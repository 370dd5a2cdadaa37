//! COLMAP sparse-text model ingestion and emission.
//!
//! Supports the three-file text layout produced by COLMAP's model converter:
//! `cameras.txt`, `images.txt` (pose line + 2D observation line, the latter
//! parsed and discarded), and `points3D.txt`. Only PINHOLE and
//! SIMPLE_PINHOLE camera models are accepted.

use super::{Camera, Point3D, PointCloud};
use crate::error::{Error, Result};
use nalgebra::{Matrix3, Quaternion, UnitQuaternion, Vector3};
use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

struct IntrinsicsRecord {
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
    width: u32,
    height: u32,
}

fn parse_err(file: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        file: file.to_path_buf(),
        line,
        message: message.into(),
    }
}

fn read_lines(path: &Path) -> Result<Vec<(usize, String)>> {
    if !path.is_file() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.to_string()))
        .filter(|(_, l)| !l.trim().is_empty() && !l.trim_start().starts_with('#'))
        .collect())
}

fn parse_cameras(path: &Path) -> Result<BTreeMap<u32, IntrinsicsRecord>> {
    let mut out = BTreeMap::new();
    for (lineno, line) in read_lines(path)? {
        let tok: Vec<&str> = line.split_whitespace().collect();
        if tok.len() < 4 {
            return Err(parse_err(path, lineno, "camera line needs at least 4 fields"));
        }
        let id: u32 = tok[0]
            .parse()
            .map_err(|_| parse_err(path, lineno, "bad CAMERA_ID"))?;
        let model = tok[1];
        let width: u32 = tok[2]
            .parse()
            .map_err(|_| parse_err(path, lineno, "bad WIDTH"))?;
        let height: u32 = tok[3]
            .parse()
            .map_err(|_| parse_err(path, lineno, "bad HEIGHT"))?;
        let params: Vec<f64> = tok[4..]
            .iter()
            .map(|t| t.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| parse_err(path, lineno, "bad camera parameter"))?;
        let (fx, fy, cx, cy) = match model {
            "PINHOLE" => {
                if params.len() != 4 {
                    return Err(parse_err(path, lineno, "PINHOLE expects 4 params"));
                }
                (params[0], params[1], params[2], params[3])
            }
            "SIMPLE_PINHOLE" => {
                if params.len() != 3 {
                    return Err(parse_err(path, lineno, "SIMPLE_PINHOLE expects 3 params"));
                }
                (params[0], params[0], params[1], params[2])
            }
            other => return Err(Error::UnsupportedCameraModel(other.to_string())),
        };
        out.insert(
            id,
            IntrinsicsRecord {
                fx,
                fy,
                cx,
                cy,
                width,
                height,
            },
        );
    }
    Ok(out)
}

/// Load a COLMAP sparse-text model: one `Camera` per registered image and one
/// `Point3D` per triangulated point, ids preserved from the files.
pub fn load_colmap_model(dir: &Path) -> Result<(Vec<Camera>, PointCloud)> {
    let intrinsics = parse_cameras(&dir.join("cameras.txt"))?;

    let images_path = dir.join("images.txt");
    if !images_path.is_file() {
        return Err(Error::MissingFile(images_path));
    }
    let images_text =
        std::fs::read_to_string(&images_path).map_err(|e| Error::io(&images_path, e))?;
    let mut cameras = Vec::new();
    // Pose lines alternate with 2D-observation lines. The observation line is
    // consumed verbatim (it may be blank), so comment/blank skipping only
    // applies while a pose line is expected.
    let mut expect_pose = true;
    for (lineno, line) in images_text.lines().enumerate().map(|(i, l)| (i + 1, l)) {
        if !expect_pose {
            expect_pose = true;
            continue;
        }
        if line.trim().is_empty() || line.trim_start().starts_with('#') {
            continue;
        }
        expect_pose = false;
        let tok: Vec<&str> = line.split_whitespace().collect();
        if tok.len() < 10 {
            return Err(parse_err(&images_path, lineno, "image line needs 10 fields"));
        }
        let image_id: u32 = tok[0]
            .parse()
            .map_err(|_| parse_err(&images_path, lineno, "bad IMAGE_ID"))?;
        let vals: Vec<f64> = tok[1..8]
            .iter()
            .map(|t| t.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| parse_err(&images_path, lineno, "bad pose value"))?;
        let camera_id: u32 = tok[8]
            .parse()
            .map_err(|_| parse_err(&images_path, lineno, "bad CAMERA_ID"))?;
        let name = tok[9].to_string();
        let intr = intrinsics.get(&camera_id).ok_or_else(|| {
            parse_err(
                &images_path,
                lineno,
                format!("image references unknown camera {camera_id}"),
            )
        })?;
        let q = UnitQuaternion::from_quaternion(Quaternion::new(
            vals[0], vals[1], vals[2], vals[3],
        ));
        let rotation: Matrix3<f64> = q.to_rotation_matrix().into_inner();
        let translation = Vector3::new(vals[4], vals[5], vals[6]);
        let mut cam = Camera::new(
            image_id,
            intr.fx,
            intr.fy,
            intr.cx,
            intr.cy,
            intr.width,
            intr.height,
            rotation,
            translation,
        )?;
        cam.image_path = Some(PathBuf::from(name));
        cameras.push(cam);
    }
    cameras.sort_by_key(|c| c.id);

    let points_path = dir.join("points3D.txt");
    let mut points = Vec::new();
    for (lineno, line) in read_lines(&points_path)? {
        let tok: Vec<&str> = line.split_whitespace().collect();
        if tok.len() < 8 {
            return Err(parse_err(&points_path, lineno, "point line needs 8 fields"));
        }
        let id: u64 = tok[0]
            .parse()
            .map_err(|_| parse_err(&points_path, lineno, "bad POINT3D_ID"))?;
        let xyz: Vec<f64> = tok[1..4]
            .iter()
            .map(|t| t.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| parse_err(&points_path, lineno, "bad coordinate"))?;
        let rgb: Vec<u32> = tok[4..7]
            .iter()
            .map(|t| t.parse::<u32>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| parse_err(&points_path, lineno, "bad color"))?;
        // tok[7] is the reprojection error; the rest is the track.
        let track_length = ((tok.len() - 8) / 2) as u32;
        points.push(Point3D {
            id,
            position: Vector3::new(xyz[0], xyz[1], xyz[2]),
            color: [
                rgb[0] as f64 / 255.0,
                rgb[1] as f64 / 255.0,
                rgb[2] as f64 / 255.0,
            ],
            track_length,
        });
    }
    points.sort_by_key(|p| p.id);

    Ok((cameras, PointCloud::new(points)?))
}

/// Write a model in the same three-file text layout that `load_colmap_model`
/// reads. Each camera gets its own PINHOLE intrinsics entry; image names come
/// from `Camera::image_path`.
pub fn save_colmap_model(dir: &Path, cameras: &[Camera], cloud: &PointCloud) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let write = |name: &str, body: String| -> Result<()> {
        let path = dir.join(name);
        let mut f = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        f.write_all(body.as_bytes()).map_err(|e| Error::io(&path, e))
    };

    let mut cams_txt = String::from("# Camera list: CAMERA_ID MODEL WIDTH HEIGHT PARAMS[]\n");
    for c in cameras {
        cams_txt.push_str(&format!(
            "{} PINHOLE {} {} {} {} {} {}\n",
            c.id, c.width, c.height, c.fx, c.fy, c.cx, c.cy
        ));
    }
    write("cameras.txt", cams_txt)?;

    let mut images_txt =
        String::from("# Image list: IMAGE_ID QW QX QY QZ TX TY TZ CAMERA_ID NAME\n");
    for c in cameras {
        let q = UnitQuaternion::from_matrix(&c.rotation);
        let name = c
            .image_path
            .as_ref()
            .map(|p| p.to_string_lossy().into_owned())
            .unwrap_or_else(|| format!("cam_{:05}.png", c.id));
        images_txt.push_str(&format!(
            "{} {} {} {} {} {} {} {} {} {}\n\n",
            c.id,
            q.w,
            q.i,
            q.j,
            q.k,
            c.translation.x,
            c.translation.y,
            c.translation.z,
            c.id,
            name
        ));
    }
    write("images.txt", images_txt)?;

    let mut points_txt =
        String::from("# 3D point list: POINT3D_ID X Y Z R G B ERROR TRACK[]\n");
    for p in &cloud.points {
        points_txt.push_str(&format!(
            "{} {} {} {} {} {} {} 0.0\n",
            p.id,
            p.position.x,
            p.position.y,
            p.position.z,
            (p.color[0] * 255.0).round() as u8,
            (p.color[1] * 255.0).round() as u8,
            (p.color[2] * 255.0).round() as u8,
        ));
    }
    write("points3D.txt", points_txt)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_fixture(dir: &Path) {
        std::fs::write(
            dir.join("cameras.txt"),
            "# comment\n1 PINHOLE 640 480 500 500 320 240\n2 SIMPLE_PINHOLE 320 240 250 160 120\n",
        )
        .unwrap();
        std::fs::write(
            dir.join("images.txt"),
            "# comment\n\
             1 1 0 0 0 0 0 0 1 a.png\n1.5 2.5 7 8.0 1.0 9\n\
             2 1 0 0 0 0.5 0 0 2 b.png\n\n\
             3 1 0 0 0 0 0 1 1 c.png\n4.0 4.0 2\n",
        )
        .unwrap();
        std::fs::write(
            dir.join("points3D.txt"),
            "# comment\n\
             1 0 0 2 255 0 0 0.5 1 0 2 1\n\
             2 0.1 0 2 0 255 0 0.5 1 1\n\
             3 0.2 0 2 0 0 255 0.5\n\
             7 0.3 0 2 10 10 10 0.5 1 2 2 3 1 4\n\
             9 0.4 0 2 20 20 20 0.5\n",
        )
        .unwrap();
    }

    #[test]
    fn loads_fixture_with_ids_preserved() {
        let dir = tempfile::tempdir().unwrap();
        write_fixture(dir.path());
        let (cameras, cloud) = load_colmap_model(dir.path()).unwrap();
        assert_eq!(cameras.len(), 3);
        assert_eq!(cloud.len(), 5);
        assert_eq!(cameras[0].id, 1);
        assert_eq!(cameras[1].id, 2);
        assert_eq!(cameras[2].id, 3);
        assert_eq!(cameras[1].fx, 250.0);
        assert_eq!(cameras[1].fy, 250.0);
        assert_eq!(cameras[1].translation.x, 0.5);
        assert_eq!(cameras[2].translation.z, 1.0);
        assert_eq!(
            cloud.points.iter().map(|p| p.id).collect::<Vec<_>>(),
            vec![1, 2, 3, 7, 9]
        );
        assert_eq!(cloud.points[0].color[0], 1.0);
        assert_eq!(cloud.points[0].track_length, 2);
        assert_eq!(cloud.points[3].track_length, 3);
        assert_eq!(
            cameras[0].image_path.as_ref().unwrap().to_str().unwrap(),
            "a.png"
        );
    }

    #[test]
    fn empty_points_file_loads_as_empty_cloud() {
        let dir = tempfile::tempdir().unwrap();
        write_fixture(dir.path());
        std::fs::write(dir.path().join("points3D.txt"), "# nothing\n").unwrap();
        let (_, cloud) = load_colmap_model(dir.path()).unwrap();
        assert!(cloud.is_empty());
    }

    #[test]
    fn unsupported_model_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        write_fixture(dir.path());
        std::fs::write(
            dir.path().join("cameras.txt"),
            "1 RADIAL 640 480 500 320 240 0.1\n",
        )
        .unwrap();
        match load_colmap_model(dir.path()) {
            Err(Error::UnsupportedCameraModel(m)) => assert_eq!(m, "RADIAL"),
            other => panic!("expected unsupported-model error, got {other:?}"),
        }
    }

    #[test]
    fn missing_file_is_reported_by_name() {
        let dir = tempfile::tempdir().unwrap();
        write_fixture(dir.path());
        std::fs::remove_file(dir.path().join("images.txt")).unwrap();
        match load_colmap_model(dir.path()) {
            Err(Error::MissingFile(p)) => assert!(p.ends_with("images.txt")),
            other => panic!("expected missing-file error, got {other:?}"),
        }
    }

    #[test]
    fn malformed_line_reports_its_number() {
        let dir = tempfile::tempdir().unwrap();
        write_fixture(dir.path());
        std::fs::write(
            dir.path().join("points3D.txt"),
            "1 0 0 2 255 0 0 0.5\n2 bogus 0 2 0 255 0 0.5\n",
        )
        .unwrap();
        match load_colmap_model(dir.path()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn save_then_load_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        write_fixture(dir.path());
        let (cameras, cloud) = load_colmap_model(dir.path()).unwrap();
        let out = tempfile::tempdir().unwrap();
        save_colmap_model(out.path(), &cameras, &cloud).unwrap();
        let (cameras2, cloud2) = load_colmap_model(out.path()).unwrap();
        assert_eq!(cameras2.len(), cameras.len());
        assert_eq!(cloud2.len(), cloud.len());
        for (a, b) in cameras.iter().zip(&cameras2) {
            assert_eq!(a.id, b.id);
            assert!((a.rotation - b.rotation).norm() < 1e-12);
            assert!((a.translation - b.translation).norm() < 1e-12);
        }
    }
}
