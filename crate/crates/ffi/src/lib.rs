//! C ABI for the Gaussian renderer, the synthetic clip generator and the
//! depth/image metrics.
//!
//! Every function returns an [`SwStatus`]. On failure the message is kept
//! per thread and can be copied out with [`sw_last_error_message`]. Objects
//! are opaque handles released with their `*_free` function. Panics are
//! caught at the boundary and reported as [`SwStatus::Panic`].

use std::cell::RefCell;
use std::ffi::c_char;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use splatworld::harness::metrics;
use splatworld::splatcore::{rasterize, transport, GaussianPrimitive, GaussianSet, SplatConfig};
use splatworld::synthworld::{synthesize_clip, CameraModel, MultiViewClip, SynthConfig};
use splatworld::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SwStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    ShapeMismatch = 3,
    Io = 4,
    Internal = 5,
    Panic = 6,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: impl Into<String>) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg.into());
}

fn fail(status: SwStatus, msg: impl Into<String>) -> SwStatus {
    set_error(msg);
    status
}

fn from_error(e: Error) -> SwStatus {
    let status = match &e {
        Error::Config(_) | Error::Decode { .. } | Error::Metric(_) => SwStatus::InvalidArgument,
        Error::Shape(_) => SwStatus::ShapeMismatch,
        Error::Io(_) | Error::NoClips(_) => SwStatus::Io,
        _ => SwStatus::Internal,
    };
    fail(status, e.to_string())
}

fn guard(f: impl FnOnce() -> SwStatus) -> SwStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(s) => s,
        Err(_) => fail(SwStatus::Panic, "panic inside the library"),
    }
}

/// Copies the calling thread's last error message, NUL-terminated and
/// truncated to `len` bytes, into `buf`. Returns the full message length
/// excluding the terminator.
///
/// # Safety
/// `buf` must be null or valid for `len` bytes.
#[no_mangle]
pub unsafe extern "C" fn sw_last_error_message(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && len > 0 {
            let n = msg.len().min(len - 1);
            ptr::copy_nonoverlapping(msg.as_ptr(), buf as *mut u8, n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

/// Pinhole camera: world-to-camera rotation `[w, x, y, z]` and translation.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct SwCamera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub rotation: [f64; 4],
    pub translation: [f64; 3],
    pub width: u32,
    pub height: u32,
}

impl From<SwCamera> for CameraModel {
    fn from(c: SwCamera) -> Self {
        CameraModel {
            fx: c.fx,
            fy: c.fy,
            cx: c.cx,
            cy: c.cy,
            rotation: c.rotation,
            translation: c.translation,
            height: c.height as usize,
            width: c.width as usize,
        }
    }
}

/// One 3D Gaussian with constant velocity.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct SwGaussian {
    pub mean: [f64; 3],
    pub rotation: [f64; 4],
    pub scale: [f64; 3],
    pub opacity: f64,
    pub color: [f64; 3],
    pub velocity: [f64; 3],
    pub source_time: f64,
}

/// Opaque set of Gaussians.
pub struct SwGaussianSet {
    set: GaussianSet,
}

/// Opaque synthetic multi-view clip.
pub struct SwClip {
    clip: MultiViewClip,
}

/// Depth metrics over the masked pixels.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct SwDepthMetrics {
    pub rmse: f64,
    pub absrel: f64,
    pub delta1: f64,
}

#[no_mangle]
pub extern "C" fn sw_gaussians_new() -> *mut SwGaussianSet {
    Box::into_raw(Box::new(SwGaussianSet { set: GaussianSet::default() }))
}

/// # Safety
/// `set` must be null or a handle from [`sw_gaussians_new`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn sw_gaussians_free(set: *mut SwGaussianSet) {
    if !set.is_null() {
        drop(Box::from_raw(set));
    }
}

/// # Safety
/// `set` must be a live handle and `g` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn sw_gaussians_push(set: *mut SwGaussianSet, g: *const SwGaussian) -> SwStatus {
    guard(|| {
        let (Some(set), Some(g)) = (set.as_mut(), g.as_ref()) else {
            return fail(SwStatus::NullPointer, "null gaussian set or gaussian");
        };
        let p = GaussianPrimitive::new(g.mean, g.rotation, g.scale, g.opacity, g.color, g.velocity, g.source_time);
        if !p.is_finite() {
            return fail(SwStatus::InvalidArgument, "gaussian has non-finite parameters");
        }
        set.set.gaussians.push(p);
        SwStatus::Ok
    })
}

/// # Safety
/// `set` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn sw_gaussians_len(set: *const SwGaussianSet) -> usize {
    set.as_ref().map_or(0, |s| s.set.len())
}

/// Renders `set` moved to time `time` into caller buffers of
/// `height·width·3` (`rgb`) and `height·width` (`depth`, `alpha`) doubles.
/// `depth` and `alpha` may be null.
///
/// # Safety
/// Non-null buffers must have the stated lengths.
#[no_mangle]
pub unsafe extern "C" fn sw_render(
    set: *const SwGaussianSet,
    camera: *const SwCamera,
    time: f64,
    rgb: *mut f64,
    depth: *mut f64,
    alpha: *mut f64,
) -> SwStatus {
    guard(|| {
        let (Some(set), Some(cam)) = (set.as_ref(), camera.as_ref()) else {
            return fail(SwStatus::NullPointer, "null gaussian set or camera");
        };
        if rgb.is_null() {
            return fail(SwStatus::NullPointer, "null rgb buffer");
        }
        let cam: CameraModel = (*cam).into();
        if let Err(e) = cam.validate() {
            return from_error(e);
        }
        let moved = transport(&set.set, time);
        match rasterize(&moved, &cam, &SplatConfig::default()) {
            Ok(out) => {
                ptr::copy_nonoverlapping(out.rgb.as_ptr(), rgb, out.rgb.len());
                if !depth.is_null() {
                    ptr::copy_nonoverlapping(out.depth.as_ptr(), depth, out.depth.len());
                }
                if !alpha.is_null() {
                    ptr::copy_nonoverlapping(out.alpha.as_ptr(), alpha, out.alpha.len());
                }
                SwStatus::Ok
            }
            Err(e) => from_error(e),
        }
    })
}

/// Synthesizes clip `index` of a dataset with the given seed and layout.
///
/// # Safety
/// `out` must be a valid pointer; on success it receives a new handle.
#[no_mangle]
pub unsafe extern "C" fn sw_clip_synthesize(
    seed: u64,
    index: u32,
    views: u32,
    frames: u32,
    height: u32,
    width: u32,
    out: *mut *mut SwClip,
) -> SwStatus {
    guard(|| {
        if out.is_null() {
            return fail(SwStatus::NullPointer, "null output handle");
        }
        if views == 0 || frames == 0 || height == 0 || width == 0 {
            return fail(SwStatus::InvalidArgument, "clip dimensions must be positive");
        }
        let cfg = SynthConfig {
            seed,
            clips: index as usize + 1,
            views: views as usize,
            frames: frames as usize,
            height: height as usize,
            width: width as usize,
            ..SynthConfig::default()
        };
        match synthesize_clip(&cfg, index as usize) {
            Ok(clip) => {
                *out = Box::into_raw(Box::new(SwClip { clip }));
                SwStatus::Ok
            }
            Err(e) => from_error(e),
        }
    })
}

/// # Safety
/// `clip` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn sw_clip_free(clip: *mut SwClip) {
    if !clip.is_null() {
        drop(Box::from_raw(clip));
    }
}

/// Writes `[frames, views, height, width]` into `dims`.
///
/// # Safety
/// `clip` must be a live handle and `dims` valid for 4 values.
#[no_mangle]
pub unsafe extern "C" fn sw_clip_dims(clip: *const SwClip, dims: *mut u32) -> SwStatus {
    let Some(c) = clip.as_ref() else {
        return fail(SwStatus::NullPointer, "null clip");
    };
    if dims.is_null() {
        return fail(SwStatus::NullPointer, "null dims buffer");
    }
    let c = &c.clip;
    for (i, v) in [c.n_frames, c.n_views, c.height, c.width].into_iter().enumerate() {
        *dims.add(i) = v as u32;
    }
    SwStatus::Ok
}

unsafe fn copy_frame(clip: *const SwClip, t: u32, v: u32, buf: *mut f32, len: usize, rgb: bool) -> SwStatus {
    let Some(c) = clip.as_ref() else {
        return fail(SwStatus::NullPointer, "null clip");
    };
    let c = &c.clip;
    if buf.is_null() {
        return fail(SwStatus::NullPointer, "null output buffer");
    }
    if t as usize >= c.n_frames || v as usize >= c.n_views {
        return fail(SwStatus::InvalidArgument, format!("frame {t} view {v} outside the clip"));
    }
    let src = if rgb { c.image(t as usize, v as usize) } else { c.depth_map(t as usize, v as usize) };
    if len != src.len() {
        return fail(SwStatus::ShapeMismatch, format!("buffer holds {len} values, frame has {}", src.len()));
    }
    ptr::copy_nonoverlapping(src.as_ptr(), buf, len);
    SwStatus::Ok
}

/// Copies the `height·width·3` image of frame `t`, view `v`.
///
/// # Safety
/// `buf` must be valid for `len` floats.
#[no_mangle]
pub unsafe extern "C" fn sw_clip_image(clip: *const SwClip, t: u32, v: u32, buf: *mut f32, len: usize) -> SwStatus {
    copy_frame(clip, t, v, buf, len, true)
}

/// Copies the `height·width` ray-distance depth of frame `t`, view `v`;
/// sky pixels are `+inf`.
///
/// # Safety
/// `buf` must be valid for `len` floats.
#[no_mangle]
pub unsafe extern "C" fn sw_clip_depth(clip: *const SwClip, t: u32, v: u32, buf: *mut f32, len: usize) -> SwStatus {
    copy_frame(clip, t, v, buf, len, false)
}

/// PSNR in dB of two images in `[0, 1]`.
///
/// # Safety
/// `x` and `y` must be valid for `n` floats, `out` for one double.
#[no_mangle]
pub unsafe extern "C" fn sw_metric_psnr(x: *const f32, y: *const f32, n: usize, out: *mut f64) -> SwStatus {
    if x.is_null() || y.is_null() || out.is_null() {
        return fail(SwStatus::NullPointer, "null metric argument");
    }
    let (x, y) = (std::slice::from_raw_parts(x, n), std::slice::from_raw_parts(y, n));
    match metrics::psnr(x, y) {
        Ok(v) => {
            *out = v;
            SwStatus::Ok
        }
        Err(e) => from_error(e),
    }
}

/// Depth RMSE, AbsRel and δ₁ over pixels whose `mask` byte is nonzero and
/// whose ground truth is finite and positive.
///
/// # Safety
/// `d`, `d_hat` and `mask` must be valid for `n` elements, `out` for one struct.
#[no_mangle]
pub unsafe extern "C" fn sw_metric_depth(d: *const f32, d_hat: *const f32, mask: *const u8, n: usize, out: *mut SwDepthMetrics) -> SwStatus {
    if d.is_null() || d_hat.is_null() || mask.is_null() || out.is_null() {
        return fail(SwStatus::NullPointer, "null metric argument");
    }
    let d = std::slice::from_raw_parts(d, n);
    let e = std::slice::from_raw_parts(d_hat, n);
    let m: Vec<bool> = std::slice::from_raw_parts(mask, n).iter().map(|&b| b != 0).collect();
    let r = (|| {
        Ok::<_, Error>(SwDepthMetrics {
            rmse: metrics::drmse(d, e, &m)?,
            absrel: metrics::absrel(d, e, &m)?,
            delta1: metrics::delta1(d, e, &m)?,
        })
    })();
    match r {
        Ok(v) => {
            *out = v;
            SwStatus::Ok
        }
        Err(e) => from_error(e),
    }
}
