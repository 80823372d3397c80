//! Token layouts for the three attention axes.
//!
//! A grid `[T, V, C, h, w]` becomes a batch of independent sequences whose
//! tokens have width `C`:
//!
//! | layout | sequences | tokens | element `(t, v, c, y, x)` goes to |
//! |---|---|---|---|
//! | spatial | `T·V` | `h·w` | sequence `t·V + v`, token `y·w + x` |
//! | temporal | `V·h·w` | `T` | sequence `v·h·w + y·w + x`, token `t` |
//! | cross-view | `T·h·w` | `V` | sequence `t·h·w + y·w + x`, token `v` |
//!
//! The slice functions move data by index; the tensor functions do the same
//! with permutes and are differentiable.

use candle_core::Tensor;

use crate::error::{Error, Result};

/// Grid dimensions `(T, V, C, h, w)`.
pub type GridDims = (usize, usize, usize, usize, usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Layout {
    Spatial,
    Temporal,
    CrossView,
}

impl Layout {
    /// `(sequence, token)` position of grid element `(t, v, y, x)`.
    pub fn index(self, dims: GridDims, t: usize, v: usize, y: usize, x: usize) -> (usize, usize) {
        let (_, nv, _, h, w) = dims;
        match self {
            Layout::Spatial => (t * nv + v, y * w + x),
            Layout::Temporal => (v * h * w + y * w + x, t),
            Layout::CrossView => (t * h * w + y * w + x, v),
        }
    }

    /// `(sequences, tokens)`.
    pub fn shape(self, dims: GridDims) -> (usize, usize) {
        let (t, v, _, h, w) = dims;
        match self {
            Layout::Spatial => (t * v, h * w),
            Layout::Temporal => (v * h * w, t),
            Layout::CrossView => (t * h * w, v),
        }
    }

    /// Axis permutation from `[T, V, C, h, w]` to `[seq dims.., token dim, C]`.
    fn permutation(self) -> [usize; 5] {
        match self {
            Layout::Spatial => [0, 1, 3, 4, 2],
            Layout::Temporal => [1, 3, 4, 0, 2],
            Layout::CrossView => [0, 3, 4, 1, 2],
        }
    }
}

fn check_len(data: &[f32], dims: GridDims) -> Result<()> {
    let (t, v, c, h, w) = dims;
    if data.len() != t * v * c * h * w {
        return Err(Error::shape(format!("{} values do not fill a {dims:?} grid", data.len())));
    }
    Ok(())
}

/// Row-major `[T, V, C, h, w]` values to `[sequences, tokens, C]`.
pub fn to_tokens(layout: Layout, data: &[f32], dims: GridDims) -> Result<Vec<f32>> {
    check_len(data, dims)?;
    let (nt, nv, c, h, w) = dims;
    let (_, tokens) = layout.shape(dims);
    let mut out = vec![0.0; data.len()];
    for t in 0..nt {
        for v in 0..nv {
            for ch in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        let (s, k) = layout.index(dims, t, v, y, x);
                        out[(s * tokens + k) * c + ch] = data[(((t * nv + v) * c + ch) * h + y) * w + x];
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Inverse of [`to_tokens`].
pub fn from_tokens(layout: Layout, data: &[f32], dims: GridDims) -> Result<Vec<f32>> {
    check_len(data, dims)?;
    let (nt, nv, c, h, w) = dims;
    let (_, tokens) = layout.shape(dims);
    let mut out = vec![0.0; data.len()];
    for t in 0..nt {
        for v in 0..nv {
            for ch in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        let (s, k) = layout.index(dims, t, v, y, x);
                        out[(((t * nv + v) * c + ch) * h + y) * w + x] = data[(s * tokens + k) * c + ch];
                    }
                }
            }
        }
    }
    Ok(out)
}

/// `[T, V, C, h, w]` tensor to `[sequences, tokens, C]`.
pub fn tokens(layout: Layout, z: &Tensor) -> Result<Tensor> {
    let dims = z.dims5()?;
    let (s, k) = layout.shape(dims);
    Ok(z.permute(layout.permutation())?.reshape((s, k, dims.2))?)
}

/// Inverse of [`tokens`] for a grid of shape `dims`.
pub fn untokens(layout: Layout, x: &Tensor, dims: GridDims) -> Result<Tensor> {
    let (t, v, c, h, w) = dims;
    let (s, k, cc) = x.dims3()?;
    if (s, k) != layout.shape(dims) || cc != c {
        return Err(Error::shape(format!("token batch {:?} does not match grid {dims:?}", x.dims())));
    }
    let grid = match layout {
        Layout::Spatial => x.reshape(vec![t, v, h, w, c])?.permute([0, 1, 4, 2, 3])?,
        Layout::Temporal => x.reshape(vec![v, h, w, t, c])?.permute([3, 0, 4, 1, 2])?,
        Layout::CrossView => x.reshape(vec![t, h, w, v, c])?.permute([0, 3, 4, 1, 2])?,
    };
    Ok(grid.contiguous()?)
}

pub fn reshape_spatial(z: &Tensor) -> Result<Tensor> {
    tokens(Layout::Spatial, z)
}

pub fn reshape_temporal(z: &Tensor) -> Result<Tensor> {
    tokens(Layout::Temporal, z)
}

pub fn reshape_crossview(z: &Tensor) -> Result<Tensor> {
    tokens(Layout::CrossView, z)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    const ALL: [Layout; 3] = [Layout::Spatial, Layout::Temporal, Layout::CrossView];

    fn grid(dims: GridDims) -> Vec<f32> {
        let n = dims.0 * dims.1 * dims.2 * dims.3 * dims.4;
        (0..n).map(|i| i as f32 * 0.5 - 3.0).collect()
    }

    #[test]
    fn documented_shapes() {
        assert_eq!(Layout::Spatial.shape((2, 3, 4, 2, 2)), (6, 4));
        assert_eq!(Layout::Spatial.shape((1, 1, 4, 5, 3)), (1, 15));
        assert_eq!(Layout::Temporal.shape((19, 6, 8, 16, 16)), (1536, 19));
        assert_eq!(Layout::CrossView.shape((4, 1, 8, 2, 2)).1, 1);
    }

    #[test]
    fn tensor_and_slice_versions_agree() {
        let dims = (2, 3, 4, 2, 5);
        let data = grid(dims);
        let z = Tensor::from_vec(data.clone(), vec![2, 3, 4, 2, 5], &Device::Cpu).unwrap();
        for l in ALL {
            let a: Vec<f32> = tokens(l, &z).unwrap().flatten_all().unwrap().to_vec1().unwrap();
            assert_eq!(a, to_tokens(l, &data, dims).unwrap());
            let back = untokens(l, &tokens(l, &z).unwrap(), dims).unwrap();
            let b: Vec<f32> = back.flatten_all().unwrap().to_vec1().unwrap();
            assert_eq!(b, data);
        }
    }

    #[test]
    fn wrong_sizes_are_rejected() {
        assert!(to_tokens(Layout::Spatial, &[0.0; 5], (1, 1, 1, 2, 2)).is_err());
        let x = Tensor::zeros((3, 4, 2), candle_core::DType::F32, &Device::Cpu).unwrap();
        assert!(untokens(Layout::Temporal, &x, (2, 2, 2, 2, 2)).is_err());
    }
}
