use std::io::Cursor;
use std::path::Path;

use fieldseg::geometry::Camera;
use fieldseg::scene::{quantize, CameraEntry};
use fieldseg::{Error, FeatureImage, Result};

/// 8-bit RGB PNG of a row-major `H*W*3` buffer in `[0, 1]`.
pub fn encode_rgb_png(width: usize, height: usize, rgb: &[f64]) -> Vec<u8> {
    let bytes: Vec<u8> = rgb.iter().map(|v| quantize(*v)).collect();
    let img = image::RgbImage::from_raw(width as u32, height as u32, bytes)
        .expect("buffer matches dimensions");
    let mut out = Cursor::new(Vec::new());
    img.write_to(&mut out, image::ImageFormat::Png)
        .expect("in-memory PNG encoding");
    out.into_inner()
}

/// Colour preview of a feature image in the scene's reduced basis: the first
/// three principal channels, mapped from `[-1, 1]` to `[0, 1]`.
pub fn feature_pca_rgb(f: &FeatureImage) -> Vec<f64> {
    let mut out = Vec::with_capacity(f.pixels() * 3);
    for i in 0..f.pixels() {
        let p = f.pixel(i);
        for c in 0..3 {
            out.push(p.get(c).map_or(0.5, |v| 0.5 * (v + 1.0)));
        }
    }
    out
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn camera_from_entry(c: &CameraEntry, near: f64, far: f64) -> Result<Camera> {
    let w2c: [f64; 16] = c
        .world_to_camera
        .as_slice()
        .try_into()
        .map_err(|_| Error::domain("world_to_camera needs 16 numbers"))?;
    Camera::new(c.fx, c.fy, c.cx, c.cy, c.width, c.height, w2c, near, far)
}

pub fn read_camera_file(path: &Path, near: f64, far: f64) -> Result<Camera> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let entry: CameraEntry =
        serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
    camera_from_entry(&entry, near, far).map_err(|e| Error::format(path, e.to_string()))
}
