//! On-disk dataset layout.
//!
//! ```text
//! DIR/manifest.json            {"clips": [{"id": "clip_00000", "split": "train"}, ...]}
//! DIR/<id>/meta.json           cameras, timestamps, conditions, view mask, sky color
//! DIR/<id>/images.bin          T×V×H×W×3
//! DIR/<id>/depth.bin           T×V×H×W   (+inf = sky, NaN = unobserved)
//! DIR/<id>/box_raster.bin      T×V×H×W
//! DIR/<id>/lane_raster.bin     T×V×H×W
//! ```
//!
//! Each `.bin` file is a one-line ASCII header followed by raw little-endian
//! `f32` values:
//!
//! ```text
//! SWARRAY dtype=f32 shape=19,6,64,64,3 scale=1\n<data>
//! ```

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::camera::CameraModel;
use super::clip::MultiViewClip;
use super::conditions::{Box3, SceneConditions};
use crate::error::{Error, Result};

const MAGIC: &str = "SWARRAY";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Manifest {
    pub clips: Vec<ManifestEntry>,
}

#[derive(Serialize, Deserialize)]
struct ClipMeta {
    id: String,
    n_frames: usize,
    n_views: usize,
    height: usize,
    width: usize,
    timestamps: Vec<f64>,
    cameras: Vec<CameraModel>,
    view_valid: Vec<bool>,
    sky_color: [f64; 3],
    text_tokens: Vec<u32>,
    boxes: Vec<Vec<Box3>>,
    lanes: Vec<Vec<[f64; 3]>>,
}

/// Writes a flat `f32` array with its text header.
pub fn write_array(path: &Path, shape: &[usize], data: &[f32]) -> std::io::Result<()> {
    let mut f = std::io::BufWriter::new(fs::File::create(path)?);
    let dims: Vec<String> = shape.iter().map(|d| d.to_string()).collect();
    writeln!(f, "{MAGIC} dtype=f32 shape={} scale=1", dims.join(","))?;
    let mut bytes = Vec::with_capacity(data.len() * 4);
    for v in data {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    f.write_all(&bytes)?;
    f.flush()
}

/// Reads an array written by [`write_array`]; returns `(shape, values)`.
pub fn read_array(path: &Path) -> std::result::Result<(Vec<usize>, Vec<f32>), String> {
    let file = fs::File::open(path).map_err(|e| format!("{}: {e}", path.display()))?;
    let mut reader = BufReader::new(file);
    let mut header = String::new();
    reader
        .read_line(&mut header)
        .map_err(|e| format!("{}: {e}", path.display()))?;
    let mut fields = header.split_whitespace();
    if fields.next() != Some(MAGIC) {
        return Err(format!("{}: bad magic", path.display()));
    }
    let mut shape = None;
    let mut scale = 1.0f32;
    for f in fields {
        match f.split_once('=') {
            Some(("dtype", "f32")) => {}
            Some(("dtype", other)) => return Err(format!("{}: unsupported dtype {other}", path.display())),
            Some(("shape", s)) => {
                let dims: std::result::Result<Vec<usize>, _> = s.split(',').map(str::parse).collect();
                shape = Some(dims.map_err(|_| format!("{}: bad shape", path.display()))?);
            }
            Some(("scale", s)) => scale = s.parse().map_err(|_| format!("{}: bad scale", path.display()))?,
            _ => return Err(format!("{}: bad header field `{f}`", path.display())),
        }
    }
    let shape = shape.ok_or_else(|| format!("{}: missing shape", path.display()))?;
    let n: usize = shape.iter().product();
    let mut bytes = Vec::new();
    reader
        .read_to_end(&mut bytes)
        .map_err(|e| format!("{}: {e}", path.display()))?;
    if bytes.len() != n * 4 {
        return Err(format!("{}: expected {} bytes of data, found {}", path.display(), n * 4, bytes.len()));
    }
    let data = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .map(|v| if scale == 1.0 { v } else { v * scale })
        .collect();
    Ok((shape, data))
}

fn write_clip(dir: &Path, clip: &MultiViewClip) -> Result<()> {
    let io_err = |e: std::io::Error| Error::Dataset { clip: clip.id.clone(), reason: e.to_string() };
    clip.validate()?;
    let cdir = dir.join(&clip.id);
    fs::create_dir_all(&cdir).map_err(io_err)?;
    let (t, v, h, w) = (clip.n_frames, clip.n_views, clip.height, clip.width);
    write_array(&cdir.join("images.bin"), &[t, v, h, w, 3], &clip.images).map_err(io_err)?;
    write_array(&cdir.join("depth.bin"), &[t, v, h, w], &clip.depth).map_err(io_err)?;
    write_array(&cdir.join("box_raster.bin"), &[t, v, h, w], &clip.conditions.box_raster).map_err(io_err)?;
    write_array(&cdir.join("lane_raster.bin"), &[t, v, h, w], &clip.conditions.lane_raster).map_err(io_err)?;
    let meta = ClipMeta {
        id: clip.id.clone(),
        n_frames: t,
        n_views: v,
        height: h,
        width: w,
        timestamps: clip.timestamps.clone(),
        cameras: clip.cameras.clone(),
        view_valid: clip.view_valid.clone(),
        sky_color: clip.sky_color,
        text_tokens: clip.conditions.text_tokens.clone(),
        boxes: clip.conditions.boxes.clone(),
        lanes: clip.conditions.lanes.clone(),
    };
    let text = serde_json::to_string_pretty(&meta)?;
    fs::write(cdir.join("meta.json"), text).map_err(io_err)?;
    Ok(())
}

/// Writes clips and a manifest. The last `val_fraction` of clips (in id
/// order) are assigned to the validation split.
pub fn write_dataset(clips: &[MultiViewClip], path: &Path, val_fraction: f64) -> Result<Manifest> {
    fs::create_dir_all(path)?;
    let mut ids: Vec<&str> = clips.iter().map(|c| c.id.as_str()).collect();
    ids.sort_unstable();
    let n_val = ((clips.len() as f64) * val_fraction.clamp(0.0, 1.0)).round() as usize;
    let n_train = clips.len() - n_val;
    for clip in clips {
        write_clip(path, clip)?;
    }
    let manifest = Manifest {
        clips: ids
            .iter()
            .enumerate()
            .map(|(i, id)| ManifestEntry {
                id: id.to_string(),
                split: if i < n_train { Split::Train } else { Split::Val },
            })
            .collect(),
    };
    fs::write(path.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}

fn read_clip(cdir: &Path, id: &str) -> Result<MultiViewClip> {
    let err = |reason: String| Error::Dataset { clip: id.to_string(), reason };
    let text = fs::read_to_string(cdir.join("meta.json")).map_err(|e| err(format!("meta.json: {e}")))?;
    let meta: ClipMeta = serde_json::from_str(&text).map_err(|e| err(format!("meta.json: {e}")))?;
    let (t, v, h, w) = (meta.n_frames, meta.n_views, meta.height, meta.width);
    let load = |name: &str, shape: &[usize]| -> Result<Vec<f32>> {
        let (s, data) = read_array(&cdir.join(name)).map_err(err)?;
        if s != shape {
            return Err(err(format!("{name}: shape {s:?} does not match {shape:?}")));
        }
        Ok(data)
    };
    let clip = MultiViewClip {
        id: meta.id,
        n_frames: t,
        n_views: v,
        height: h,
        width: w,
        images: load("images.bin", &[t, v, h, w, 3])?,
        depth: load("depth.bin", &[t, v, h, w])?,
        cameras: meta.cameras,
        timestamps: meta.timestamps,
        conditions: SceneConditions {
            text_tokens: meta.text_tokens,
            boxes: meta.boxes,
            lanes: meta.lanes,
            box_raster: load("box_raster.bin", &[t, v, h, w])?,
            lane_raster: load("lane_raster.bin", &[t, v, h, w])?,
        },
        view_valid: meta.view_valid,
        sky_color: meta.sky_color,
    };
    if clip.id != id {
        return Err(err(format!("meta id `{}` does not match directory", clip.id)));
    }
    clip.validate()?;
    Ok(clip)
}

fn clip_dirs(path: &Path) -> Result<Vec<(String, PathBuf)>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(path)? {
        let entry = entry?;
        let p = entry.path();
        if p.is_dir() {
            if let Some(name) = p.file_name().and_then(|n| n.to_str()) {
                out.push((name.to_string(), p.clone()));
            }
        }
    }
    out.sort();
    Ok(out)
}

/// Reads every clip directory under `path`, in lexicographic id order.
pub fn read_dataset(path: &Path) -> Result<Vec<MultiViewClip>> {
    let dirs = clip_dirs(path)?;
    if dirs.is_empty() {
        return Err(Error::NoClips(path.to_path_buf()));
    }
    dirs.iter().map(|(id, p)| read_clip(p, id)).collect()
}

pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(path.join("manifest.json"))?;
    Ok(serde_json::from_str(&text)?)
}

/// Reads the clips of one split, in lexicographic id order.
pub fn read_split(path: &Path, split: Split) -> Result<Vec<MultiViewClip>> {
    let manifest = read_manifest(path)?;
    let mut ids: Vec<&str> = manifest
        .clips
        .iter()
        .filter(|e| e.split == split)
        .map(|e| e.id.as_str())
        .collect();
    ids.sort_unstable();
    if ids.is_empty() {
        return Err(Error::NoClips(path.to_path_buf()));
    }
    ids.iter().map(|id| read_clip(&path.join(id), id)).collect()
}
