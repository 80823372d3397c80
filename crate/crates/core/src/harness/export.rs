//! PNG export of image sequences, contact sheets and 16-bit depth.

use std::path::Path;

use candle_core::{DType, Tensor};
use image::{ImageBuffer, Luma, Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn to_u8(x: f32) -> u8 {
    (x.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// `H×W×3` values in `[0, 1]` to an 8-bit image.
pub fn rgb_image(data: &[f32], height: usize, width: usize) -> Result<RgbImage> {
    if data.len() != height * width * 3 {
        return Err(Error::shape(format!("{} values are not a {height}×{width} RGB image", data.len())));
    }
    Ok(ImageBuffer::from_fn(width as u32, height as u32, |x, y| {
        let i = (y as usize * width + x as usize) * 3;
        Rgb([to_u8(data[i]), to_u8(data[i + 1]), to_u8(data[i + 2])])
    }))
}

pub fn save_rgb(path: &Path, data: &[f32], height: usize, width: usize) -> Result<()> {
    rgb_image(data, height, width)?.save(path)?;
    Ok(())
}

/// 16-bit depth encoding: stored value `round(depth / scale)`, with 0 for
/// missing or non-finite depth.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DepthEncoding {
    pub scale: f64,
}

impl DepthEncoding {
    /// Scale that maps `max_depth` to the largest 16-bit value.
    pub fn for_range(max_depth: f64) -> Self {
        Self { scale: max_depth / u16::MAX as f64 }
    }

    pub fn encode(&self, d: f32) -> u16 {
        if !d.is_finite() || d <= 0.0 {
            return 0;
        }
        (d as f64 / self.scale).round().clamp(1.0, u16::MAX as f64) as u16
    }

    pub fn decode(&self, v: u16) -> f32 {
        if v == 0 {
            f32::INFINITY
        } else {
            (v as f64 * self.scale) as f32
        }
    }
}

/// Writes depth as 16-bit grayscale PNG plus a JSON sidecar holding the scale.
pub fn save_depth16(path: &Path, depth: &[f32], height: usize, width: usize, enc: DepthEncoding) -> Result<()> {
    if depth.len() != height * width {
        return Err(Error::shape("depth map size does not match its dimensions"));
    }
    let img: ImageBuffer<Luma<u16>, Vec<u16>> = ImageBuffer::from_fn(width as u32, height as u32, |x, y| Luma([enc.encode(depth[y as usize * width + x as usize])]));
    img.save(path)?;
    std::fs::write(path.with_extension("json"), serde_json::to_string(&enc)?)?;
    Ok(())
}

pub fn load_depth16(path: &Path) -> Result<Vec<f32>> {
    let enc: DepthEncoding = serde_json::from_str(&std::fs::read_to_string(path.with_extension("json"))?)?;
    let img = image::open(path)?.into_luma16();
    Ok(img.pixels().map(|p| enc.decode(p.0[0])).collect())
}

/// `[T, V, 3, H, W]` tensor to `H×W×3` frames indexed `t * V + v`.
pub fn frames_hwc(images: &Tensor) -> Result<Vec<Vec<f32>>> {
    let (t, v, _, _, _) = images.dims5()?;
    let x = images.to_dtype(DType::F32)?.permute((0, 1, 3, 4, 2))?.contiguous()?;
    let mut out = Vec::with_capacity(t * v);
    for ti in 0..t {
        for vi in 0..v {
            out.push(x.get(ti)?.get(vi)?.flatten_all()?.to_vec1()?);
        }
    }
    Ok(out)
}

/// Tiles `rows × cols` frames (indexed `r * cols + c`) into one image.
pub fn contact_sheet(frames: &[Vec<f32>], rows: usize, cols: usize, height: usize, width: usize) -> Result<RgbImage> {
    if frames.len() != rows * cols {
        return Err(Error::shape("contact sheet needs rows × cols frames"));
    }
    let mut sheet = RgbImage::new((cols * width) as u32, (rows * height) as u32);
    for (i, f) in frames.iter().enumerate() {
        let tile = rgb_image(f, height, width)?;
        let (r, c) = (i / cols, i % cols);
        image::imageops::replace(&mut sheet, &tile, (c * width) as i64, (r * height) as i64);
    }
    Ok(sheet)
}

/// Writes `view{v}/frame{t}.png` for every frame plus `contact_sheet.png`
/// with one row per frame and one column per view.
pub fn export_sequence(dir: &Path, images: &Tensor) -> Result<()> {
    let (t, v, _, h, w) = images.dims5()?;
    let frames = frames_hwc(images)?;
    for vi in 0..v {
        let vd = dir.join(format!("view{vi}"));
        std::fs::create_dir_all(&vd)?;
        for ti in 0..t {
            save_rgb(&vd.join(format!("frame{ti:03}.png")), &frames[ti * v + vi], h, w)?;
        }
    }
    contact_sheet(&frames, t, v, h, w)?.save(dir.join("contact_sheet.png"))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn depth_round_trips_within_half_a_step() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.png");
        let depth = vec![0.5f32, 10.0, 79.9, f32::INFINITY, 3.25, 40.0];
        let enc = DepthEncoding::for_range(80.0);
        save_depth16(&p, &depth, 2, 3, enc).unwrap();
        let back = load_depth16(&p).unwrap();
        for (a, b) in depth.iter().zip(&back) {
            if a.is_finite() {
                assert!(((a - b) as f64).abs() <= enc.scale / 2.0 + 1e-6);
            } else {
                assert!(b.is_infinite());
            }
        }
    }

    #[test]
    fn sequences_and_sheets_are_written() {
        let dir = tempfile::tempdir().unwrap();
        let images = Tensor::rand(0f32, 1.0, vec![2, 3, 3, 4, 5], &candle_core::Device::Cpu).unwrap();
        export_sequence(dir.path(), &images).unwrap();
        let sheet = image::open(dir.path().join("contact_sheet.png")).unwrap();
        assert_eq!((sheet.width(), sheet.height()), (15, 8));
        let f = image::open(dir.path().join("view2/frame001.png")).unwrap().into_rgb8();
        let frames = frames_hwc(&images).unwrap();
        assert_eq!(f.get_pixel(4, 3).0[1], to_u8(frames[5][(3 * 5 + 4) * 3 + 1]));
    }
}
