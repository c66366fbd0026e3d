//! Spatial view: channels placed on the scalp grid, then upsampled.

use face_diffcore::Tensor;

use super::electrode::{ElectrodeMap, GRID_SIZE};
use crate::error::{FaceError, Result};

/// Side length of the upsampled grid fed to the spatial encoder.
pub const RESIZED: usize = 32;

/// Places a `C × B` sample onto a `B × H × W` grid; unmapped cells are zero.
pub fn spatial_project(x: &[f32], bands: usize, map: &ElectrodeMap) -> Result<Tensor<f32>> {
    if x.len() != map.len() * bands {
        return Err(FaceError::Precondition(format!(
            "sample has {} values, map expects {}×{bands}",
            x.len(),
            map.len()
        )));
    }
    let (h, w) = (map.rows, map.cols);
    let mut out = vec![0.0f32; bands * h * w];
    for (ch, e) in map.channels.iter().enumerate() {
        for b in 0..bands {
            out[(b * h + e.row) * w + e.col] = x[ch * bands + b];
        }
    }
    Ok(Tensor::new(vec![bands, h, w], out)?)
}

/// Reads the mapped cells of a `B × H × W` grid back into `C × B` order.
pub fn spatial_unproject(grid: &Tensor<f32>, map: &ElectrodeMap) -> Result<Vec<f32>> {
    let s = grid.shape();
    if s.len() != 3 || s[1] != map.rows || s[2] != map.cols {
        return Err(FaceError::Precondition(format!(
            "grid {s:?} does not match the {}×{} map",
            map.rows, map.cols
        )));
    }
    let (bands, h, w) = (s[0], s[1], s[2]);
    let mut out = vec![0.0; map.len() * bands];
    for (ch, e) in map.channels.iter().enumerate() {
        for b in 0..bands {
            out[ch * bands + b] = grid.data()[(b * h + e.row) * w + e.col];
        }
    }
    Ok(out)
}

/// Source taps `(index, weight)` of corner-aligned bilinear resampling
/// from `n` to `m` points along one axis.
fn axis_taps(n: usize, m: usize) -> Vec<[(usize, f64); 2]> {
    (0..m)
        .map(|i| {
            if n == 1 || m == 1 {
                return [(0, 1.0), (0, 0.0)];
            }
            let pos = i as f64 * (n - 1) as f64 / (m - 1) as f64;
            let lo = (pos.floor() as usize).min(n - 2);
            let frac = pos - lo as f64;
            [(lo, 1.0 - frac), (lo + 1, frac)]
        })
        .collect()
}

/// Corner-aligned bilinear resampling of each `h × w` plane to `oh × ow`.
pub fn resize_bilinear(x: &Tensor<f32>, oh: usize, ow: usize) -> Result<Tensor<f32>> {
    let s = x.shape();
    if s.len() != 3 {
        return Err(FaceError::Precondition(format!(
            "resize expects planes × h × w, got {s:?}"
        )));
    }
    let (planes, h, w) = (s[0], s[1], s[2]);
    let (ty, tx) = (axis_taps(h, oh), axis_taps(w, ow));
    let mut out = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        let src = &x.data()[p * h * w..(p + 1) * h * w];
        for ry in &ty {
            for rx in &tx {
                let mut acc = 0.0f64;
                for &(yi, wy) in ry {
                    for &(xi, wx) in rx {
                        acc += wy * wx * src[yi * w + xi] as f64;
                    }
                }
                out.push(acc as f32);
            }
        }
    }
    Ok(Tensor::new(vec![planes, oh, ow], out)?)
}

/// Upsamples a `B × 9 × 9` grid to `B × 32 × 32`.
pub fn resize_grid(g: &Tensor<f32>) -> Result<Tensor<f32>> {
    let s = g.shape();
    if s.len() != 3 || s[1] != GRID_SIZE || s[2] != GRID_SIZE {
        return Err(FaceError::Precondition(format!(
            "resize_grid expects B×{GRID_SIZE}×{GRID_SIZE}, got {s:?}"
        )));
    }
    resize_bilinear(g, RESIZED, RESIZED)
}

/// Projection followed by resizing, precomputed as a sparse linear map
/// from `C × B` features to `B × 32 × 32` grids.
#[derive(Clone, Debug)]
pub struct Spatializer {
    channels: usize,
    bands: usize,
    /// Per output cell of one band plane: `(channel, weight)` taps.
    taps: Vec<Vec<(usize, f32)>>,
}

impl Spatializer {
    pub fn new(map: &ElectrodeMap, bands: usize) -> Result<Self> {
        if map.rows != GRID_SIZE || map.cols != GRID_SIZE {
            return Err(FaceError::ElectrodeMap(format!(
                "spatial view needs a {GRID_SIZE}×{GRID_SIZE} grid, map is {}×{}",
                map.rows, map.cols
            )));
        }
        let mut owner = vec![None; GRID_SIZE * GRID_SIZE];
        for (ch, e) in map.channels.iter().enumerate() {
            owner[e.row * GRID_SIZE + e.col] = Some(ch);
        }
        let t = axis_taps(GRID_SIZE, RESIZED);
        let mut taps = Vec::with_capacity(RESIZED * RESIZED);
        for ry in &t {
            for rx in &t {
                let mut cell = Vec::new();
                for &(yi, wy) in ry {
                    for &(xi, wx) in rx {
                        let w = wy * wx;
                        if w == 0.0 {
                            continue;
                        }
                        if let Some(ch) = owner[yi * GRID_SIZE + xi] {
                            cell.push((ch, w as f32));
                        }
                    }
                }
                taps.push(cell);
            }
        }
        Ok(Self {
            channels: map.len(),
            bands,
            taps,
        })
    }

    /// Maps an `n × C × B` batch to `n × B × 32 × 32`.
    pub fn transform(&self, x: &Tensor<f32>) -> Result<Tensor<f32>> {
        let s = x.shape();
        if s.len() != 3 || s[1] != self.channels || s[2] != self.bands {
            return Err(FaceError::Precondition(format!(
                "spatializer built for C={}, B={}, got {s:?}",
                self.channels, self.bands
            )));
        }
        let n = s[0];
        let plane = RESIZED * RESIZED;
        let mut out = vec![0.0f32; n * self.bands * plane];
        for i in 0..n {
            let sample = &x.data()[i * self.channels * self.bands..(i + 1) * self.channels * self.bands];
            for b in 0..self.bands {
                let dst = &mut out[(i * self.bands + b) * plane..(i * self.bands + b + 1) * plane];
                for (d, cell) in dst.iter_mut().zip(&self.taps) {
                    *d = cell
                        .iter()
                        .map(|&(ch, w)| w * sample[ch * self.bands + b])
                        .sum();
                }
            }
        }
        Ok(Tensor::new(vec![n, self.bands, RESIZED, RESIZED], out)?)
    }
}
