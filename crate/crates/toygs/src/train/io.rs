//! Trained-cloud serialization and the training metrics log.
//!
//! Cloud binary layout: 8-byte magic `TOYGSGC1`, u32 little-endian count,
//! then one 14-float record per Gaussian (f32 LE): mean xyz, log-scale xyz,
//! quaternion wxyz, opacity logit, color rgb. Scene center/radius and the
//! config hash travel in a JSON sidecar next to the binary
//! (`<stem>.meta.json`).
//!
//! The metrics log is tab-separated text with one row per iteration:
//! `iteration  loss  gaussian_count  peak_resident`.

use crate::error::{Error, Result};
use crate::metrics::{IterationRecord, TrainingLog};
use crate::scene::{Gaussian, GaussianCloud};
use nalgebra::{Quaternion, UnitQuaternion, Vector3};
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

pub const CLOUD_MAGIC: &[u8; 8] = b"TOYGSGC1";

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct CloudSidecar {
    pub scene_center: [f64; 3],
    pub scene_radius: f64,
    pub config_hash: String,
    pub gaussian_count: usize,
}

pub fn sidecar_path(cloud_path: &Path) -> PathBuf {
    let mut name = cloud_path.file_name().unwrap_or_default().to_os_string();
    name.push(".meta.json");
    cloud_path.with_file_name(name)
}

pub fn save_cloud(path: &Path, cloud: &GaussianCloud, config_hash: &str) -> Result<()> {
    let mut bytes = Vec::with_capacity(16 + cloud.len() * 14 * 4);
    bytes.extend_from_slice(CLOUD_MAGIC);
    bytes.extend_from_slice(&(cloud.len() as u32).to_le_bytes());
    for g in &cloud.gaussians {
        let q = g.rotation.quaternion();
        let record: [f64; 14] = [
            g.mean.x,
            g.mean.y,
            g.mean.z,
            g.log_scale.x,
            g.log_scale.y,
            g.log_scale.z,
            q.w,
            q.i,
            q.j,
            q.k,
            g.opacity_logit,
            g.color.x,
            g.color.y,
            g.color.z,
        ];
        for v in record {
            bytes.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))?;

    let sidecar = CloudSidecar {
        scene_center: [cloud.scene_center.x, cloud.scene_center.y, cloud.scene_center.z],
        scene_radius: cloud.scene_radius,
        config_hash: config_hash.to_string(),
        gaussian_count: cloud.len(),
    };
    let sc_path = sidecar_path(path);
    std::fs::write(
        &sc_path,
        serde_json::to_string_pretty(&sidecar).expect("sidecar serializes"),
    )
    .map_err(|e| Error::io(&sc_path, e))
}

pub fn load_cloud(path: &Path) -> Result<(GaussianCloud, CloudSidecar)> {
    if !path.is_file() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .map_err(|e| Error::io(path, e))?
        .read_to_end(&mut bytes)
        .map_err(|e| Error::io(path, e))?;
    if bytes.len() < 12 || &bytes[0..8] != CLOUD_MAGIC {
        return Err(Error::InvalidInput(format!(
            "{} is not a gaussian cloud file",
            path.display()
        )));
    }
    let count = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let expect = 12 + count * 14 * 4;
    if bytes.len() != expect {
        return Err(Error::InvalidInput(format!(
            "{}: expected {expect} bytes for {count} gaussians, found {}",
            path.display(),
            bytes.len()
        )));
    }
    let mut gaussians = Vec::with_capacity(count);
    let mut offset = 12;
    let mut read_f = |offset: &mut usize| {
        let v = f32::from_le_bytes(bytes[*offset..*offset + 4].try_into().unwrap()) as f64;
        *offset += 4;
        v
    };
    for _ in 0..count {
        let mean = Vector3::new(read_f(&mut offset), read_f(&mut offset), read_f(&mut offset));
        let log_scale =
            Vector3::new(read_f(&mut offset), read_f(&mut offset), read_f(&mut offset));
        let (w, x, y, z) = (
            read_f(&mut offset),
            read_f(&mut offset),
            read_f(&mut offset),
            read_f(&mut offset),
        );
        let opacity_logit = read_f(&mut offset);
        let color = Vector3::new(read_f(&mut offset), read_f(&mut offset), read_f(&mut offset));
        gaussians.push(Gaussian {
            mean,
            log_scale,
            rotation: UnitQuaternion::from_quaternion(Quaternion::new(w, x, y, z)),
            opacity_logit,
            color,
        });
    }

    let sc_path = sidecar_path(path);
    let sidecar: CloudSidecar = serde_json::from_str(
        &std::fs::read_to_string(&sc_path).map_err(|e| Error::io(&sc_path, e))?,
    )
    .map_err(|e| Error::InvalidInput(format!("{}: {e}", sc_path.display())))?;

    Ok((
        GaussianCloud {
            gaussians,
            scene_center: Vector3::new(
                sidecar.scene_center[0],
                sidecar.scene_center[1],
                sidecar.scene_center[2],
            ),
            scene_radius: sidecar.scene_radius,
        },
        sidecar,
    ))
}

pub fn write_metrics_log(path: &Path, log: &TrainingLog) -> Result<()> {
    let mut out = String::from("iteration\tloss\tgaussian_count\tpeak_resident\n");
    let mut peak = 0usize;
    for rec in &log.iterations {
        peak = peak.max(rec.gaussian_count);
        out.push_str(&format!(
            "{}\t{:.9e}\t{}\t{}\n",
            rec.iteration, rec.loss, rec.gaussian_count, peak
        ));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_metrics_log(path: &Path) -> Result<TrainingLog> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut log = TrainingLog::default();
    for (lineno, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() < 3 {
            return Err(Error::Parse {
                file: path.to_path_buf(),
                line: lineno + 1,
                message: "metrics row needs at least 3 columns".into(),
            });
        }
        let parse_err = |m: &str| Error::Parse {
            file: path.to_path_buf(),
            line: lineno + 1,
            message: m.into(),
        };
        log.iterations.push(IterationRecord {
            iteration: cols[0].parse().map_err(|_| parse_err("bad iteration"))?,
            loss: cols[1].parse().map_err(|_| parse_err("bad loss"))?,
            gaussian_count: cols[2].parse().map_err(|_| parse_err("bad count"))?,
        });
    }
    Ok(log)
}
