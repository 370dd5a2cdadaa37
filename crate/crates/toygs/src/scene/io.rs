//! Image and depth-map file I/O.
//!
//! Color images are 8-bit PNG. Depth maps use a raw binary layout with a
//! 16-byte header: 8-byte magic `TOYDEPTH`, u32 width, u32 height (both
//! little-endian), followed by `width*height` little-endian f32 values in
//! row-major order.

use super::ImageRgb;
use crate::error::{Error, Result};
use std::io::{Read, Write};
use std::path::Path;

pub const DEPTH_MAGIC: &[u8; 8] = b"TOYDEPTH";

pub fn write_png(path: &Path, img: &ImageRgb) -> Result<()> {
    let mut buf = image::RgbImage::new(img.width, img.height);
    for y in 0..img.height {
        for x in 0..img.width {
            let c = img.get(x, y);
            let px = image::Rgb([
                (c[0].clamp(0.0, 1.0) * 255.0).round() as u8,
                (c[1].clamp(0.0, 1.0) * 255.0).round() as u8,
                (c[2].clamp(0.0, 1.0) * 255.0).round() as u8,
            ]);
            buf.put_pixel(x, y, px);
        }
    }
    buf.save(path)
        .map_err(|e| Error::InvalidInput(format!("failed to write {}: {e}", path.display())))
}

pub fn read_png(path: &Path) -> Result<ImageRgb> {
    let img = image::open(path)
        .map_err(|e| Error::InvalidInput(format!("failed to read {}: {e}", path.display())))?
        .to_rgb8();
    let (w, h) = (img.width(), img.height());
    let mut out = ImageRgb::new(w, h);
    for y in 0..h {
        for x in 0..w {
            let p = img.get_pixel(x, y);
            let idx = out.idx(x, y);
            out.data[idx] = [
                p[0] as f64 / 255.0,
                p[1] as f64 / 255.0,
                p[2] as f64 / 255.0,
            ];
        }
    }
    Ok(out)
}

pub fn write_depth(path: &Path, width: u32, height: u32, depth: &[f64]) -> Result<()> {
    if depth.len() != width as usize * height as usize {
        return Err(Error::InvalidInput("depth buffer size mismatch".into()));
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(DEPTH_MAGIC).map_err(|e| Error::io(path, e))?;
    f.write_all(&width.to_le_bytes()).map_err(|e| Error::io(path, e))?;
    f.write_all(&height.to_le_bytes()).map_err(|e| Error::io(path, e))?;
    let mut bytes = Vec::with_capacity(depth.len() * 4);
    for d in depth {
        bytes.extend_from_slice(&(*d as f32).to_le_bytes());
    }
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

pub fn read_depth(path: &Path) -> Result<(u32, u32, Vec<f64>)> {
    let mut f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut header = [0u8; 16];
    f.read_exact(&mut header).map_err(|e| Error::io(path, e))?;
    if &header[0..8] != DEPTH_MAGIC {
        return Err(Error::InvalidInput(format!(
            "{} is not a depth file (bad magic)",
            path.display()
        )));
    }
    let width = u32::from_le_bytes(header[8..12].try_into().unwrap());
    let height = u32::from_le_bytes(header[12..16].try_into().unwrap());
    let n = width as usize * height as usize;
    let mut bytes = Vec::new();
    f.read_to_end(&mut bytes).map_err(|e| Error::io(path, e))?;
    if bytes.len() != n * 4 {
        return Err(Error::InvalidInput(format!(
            "{}: expected {} depth values, found {} bytes",
            path.display(),
            n,
            bytes.len()
        )));
    }
    let depth = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Ok((width, height, depth))
}

/// Write a normal map as PNG with components mapped [-1,1] -> [0,255].
pub fn write_normal_png(path: &Path, width: u32, height: u32, normals: &[[f64; 3]]) -> Result<()> {
    let mut img = ImageRgb::new(width, height);
    for (i, n) in normals.iter().enumerate() {
        img.data[i] = [
            (n[0] + 1.0) * 0.5,
            (n[1] + 1.0) * 0.5,
            (n[2] + 1.0) * 0.5,
        ];
    }
    write_png(path, &img)
}
