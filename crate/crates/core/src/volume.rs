//! Dense voxel grids.
//!
//! Voxels are stored x-fastest: the linear index of `(x, y, z)` is
//! `x + nx * (y + ny * z)`. Every module relies on this order, so linear
//! indices written to disk (nearest-background maps, node ids derived from
//! voxels) stay portable.
//!
//! Physical coordinates put the centre of voxel `(0, 0, 0)` at the origin,
//! so voxel `(x, y, z)` sits at `(x * sx, y * sy, z * sz)` millimetres.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hmrf::LabelMap;

/// Shape and voxel size of a volume.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub dims: [usize; 3],
    /// Voxel edge lengths in mm.
    pub spacing: [f64; 3],
}

impl Grid {
    pub fn new(dims: [usize; 3], spacing: [f64; 3]) -> Result<Self> {
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::Parameter(format!("zero-sized dims {dims:?}")));
        }
        if spacing.iter().any(|&s| !(s.is_finite() && s > 0.0)) {
            return Err(Error::Parameter(format!(
                "spacing must be positive and finite, got {spacing:?}"
            )));
        }
        Ok(Grid { dims, spacing })
    }

    pub fn isotropic(dims: [usize; 3], spacing: f64) -> Result<Self> {
        Grid::new(dims, [spacing; 3])
    }

    pub fn len(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    #[inline]
    pub fn coord(&self, idx: usize) -> [usize; 3] {
        let nx = self.dims[0];
        let ny = self.dims[1];
        [idx % nx, (idx / nx) % ny, idx / (nx * ny)]
    }

    /// Linear index of a signed coordinate, or `None` outside the grid.
    #[inline]
    pub fn checked_index(&self, c: [i64; 3]) -> Option<usize> {
        if c[0] < 0 || c[1] < 0 || c[2] < 0 {
            return None;
        }
        let (x, y, z) = (c[0] as usize, c[1] as usize, c[2] as usize);
        if x >= self.dims[0] || y >= self.dims[1] || z >= self.dims[2] {
            return None;
        }
        Some(self.index(x, y, z))
    }

    pub fn voxel_volume(&self) -> f64 {
        self.spacing.iter().product()
    }

    /// Physical position (mm) of a voxel centre.
    pub fn to_physical(&self, c: [f64; 3]) -> [f64; 3] {
        [
            c[0] * self.spacing[0],
            c[1] * self.spacing[1],
            c[2] * self.spacing[2],
        ]
    }

    /// Continuous voxel coordinate of a physical position.
    pub fn to_voxel(&self, p: [f64; 3]) -> [f64; 3] {
        [
            p[0] / self.spacing[0],
            p[1] / self.spacing[1],
            p[2] / self.spacing[2],
        ]
    }

    /// Physical length (mm) covered by the grid along each axis.
    pub fn extent(&self) -> [f64; 3] {
        [
            self.dims[0] as f64 * self.spacing[0],
            self.dims[1] as f64 * self.spacing[1],
            self.dims[2] as f64 * self.spacing[2],
        ]
    }
}

// Spacing is validated finite, so equality is reflexive.
impl Eq for Grid {}

/// Scalar intensity volume.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume3D {
    grid: Grid,
    data: Vec<f64>,
    range: (f64, f64),
}

impl Volume3D {
    pub fn new(grid: Grid, data: Vec<f64>) -> Result<Self> {
        if data.len() != grid.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} values for dims {:?}",
                data.len(),
                grid.dims
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Parameter(format!(
                "non-finite intensity at voxel {i}"
            )));
        }
        let range = data
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            });
        Ok(Volume3D { grid, data, range })
    }

    pub fn filled(grid: Grid, value: f64) -> Result<Self> {
        Volume3D::new(grid, vec![value; grid.len()])
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn dims(&self) -> [usize; 3] {
        self.grid.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.grid.spacing
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn intensity_range(&self) -> (f64, f64) {
        self.range
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> f64 {
        self.data[self.grid.index(x, y, z)]
    }

    /// Mask of voxels with positive intensity (the default brain mask).
    pub fn nonzero_mask(&self) -> Vec<bool> {
        self.data.iter().map(|&v| v > 0.0).collect()
    }
}

/// Boolean voxel volume (segmentations, skeletons, phantoms).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryVolume {
    grid: Grid,
    bits: Vec<bool>,
}

impl BinaryVolume {
    pub fn new(grid: Grid, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != grid.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} voxels for dims {:?}",
                bits.len(),
                grid.dims
            )));
        }
        Ok(BinaryVolume { grid, bits })
    }

    pub fn empty(grid: Grid) -> Self {
        BinaryVolume {
            bits: vec![false; grid.len()],
            grid,
        }
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn dims(&self) -> [usize; 3] {
        self.grid.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.grid.spacing
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn bits_mut(&mut self) -> &mut [bool] {
        &mut self.bits
    }

    pub fn get(&self, idx: usize) -> bool {
        self.bits[idx]
    }

    pub fn set(&mut self, idx: usize, value: bool) {
        self.bits[idx] = value;
    }

    pub fn get_xyz(&self, c: [i64; 3]) -> bool {
        self.grid.checked_index(c).is_some_and(|i| self.bits[i])
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    /// Linear indices of foreground voxels in ascending order.
    pub fn foreground(&self) -> Vec<usize> {
        self.bits
            .iter()
            .enumerate()
            .filter_map(|(i, &b)| b.then_some(i))
            .collect()
    }

    pub fn union_with(&mut self, other: &BinaryVolume) -> Result<()> {
        if self.grid != other.grid {
            return Err(Error::DimensionMismatch("union of different grids".into()));
        }
        for (a, &b) in self.bits.iter_mut().zip(&other.bits) {
            *a |= b;
        }
        Ok(())
    }

    /// Intensity view: foreground 1, background 0.
    pub fn to_volume(&self) -> Volume3D {
        let data = self
            .bits
            .iter()
            .map(|&b| if b { 1.0 } else { 0.0 })
            .collect();
        Volume3D::new(self.grid, data).expect("grid already validated")
    }

    /// Foreground where the intensity is at least `level`.
    pub fn from_threshold(vol: &Volume3D, level: f64) -> Self {
        BinaryVolume {
            grid: vol.grid,
            bits: vol.data.iter().map(|&v| v >= level).collect(),
        }
    }
}

/// Number of output voxels along one axis after resampling.
fn resampled_len(n: usize, spacing: f64, target: f64) -> usize {
    ((n as f64 * spacing / target).round() as usize).max(1)
}

/// Trilinear resampling onto an isotropic grid with edge clamping.
///
/// Output voxel `j` covers `[j * target, (j + 1) * target)` of the physical
/// extent of the input, so a grid already at `target` spacing maps onto
/// itself.
pub fn resample_isotropic(vol: &Volume3D, target: f64) -> Result<Volume3D> {
    if !(target.is_finite() && target > 0.0) {
        return Err(Error::Parameter(format!(
            "target spacing {target} must be positive"
        )));
    }
    let g = vol.grid;
    let extent = g.extent();
    if extent.iter().any(|&e| target > e) {
        return Err(Error::Degenerate(format!(
            "target spacing {target} mm exceeds the physical extent {extent:?}"
        )));
    }
    let out_dims = [
        resampled_len(g.dims[0], g.spacing[0], target),
        resampled_len(g.dims[1], g.spacing[1], target),
        resampled_len(g.dims[2], g.spacing[2], target),
    ];
    let out = Grid::isotropic(out_dims, target)?;
    if out == g {
        return Ok(vol.clone());
    }

    // Per-axis source sample positions: (lower index, upper index, weight).
    let axis_taps: Vec<Vec<(usize, usize, f64)>> = (0..3)
        .map(|a| {
            (0..out_dims[a])
                .map(|j| {
                    let pos = (j as f64 + 0.5) * target / g.spacing[a] - 0.5;
                    let max = (g.dims[a] - 1) as f64;
                    let pos = pos.clamp(0.0, max);
                    let lo = pos.floor() as usize;
                    let hi = (lo + 1).min(g.dims[a] - 1);
                    (lo, hi, pos - lo as f64)
                })
                .collect()
        })
        .collect();

    let plane = out_dims[0] * out_dims[1];
    let mut data = vec![0.0; out.len()];
    data.par_chunks_mut(plane)
        .enumerate()
        .for_each(|(z, slab)| {
            let (z0, z1, wz) = axis_taps[2][z];
            for y in 0..out_dims[1] {
                let (y0, y1, wy) = axis_taps[1][y];
                for x in 0..out_dims[0] {
                    let (x0, x1, wx) = axis_taps[0][x];
                    let c = |xx, yy, zz| vol.data[g.index(xx, yy, zz)];
                    let c00 = c(x0, y0, z0) * (1.0 - wx) + c(x1, y0, z0) * wx;
                    let c10 = c(x0, y1, z0) * (1.0 - wx) + c(x1, y1, z0) * wx;
                    let c01 = c(x0, y0, z1) * (1.0 - wx) + c(x1, y0, z1) * wx;
                    let c11 = c(x0, y1, z1) * (1.0 - wx) + c(x1, y1, z1) * wx;
                    let c0 = c00 * (1.0 - wy) + c10 * wy;
                    let c1 = c01 * (1.0 - wy) + c11 * wy;
                    slab[x + out_dims[0] * y] = c0 * (1.0 - wz) + c1 * wz;
                }
            }
        });
    Volume3D::new(out, data)
}

/// Resample a segmentation, re-thresholding the interpolated occupancy at 0.5.
pub fn resample_binary(bin: &BinaryVolume, target: f64) -> Result<BinaryVolume> {
    let resampled = resample_isotropic(&bin.to_volume(), target)?;
    Ok(BinaryVolume::from_threshold(&resampled, 0.5))
}

/// Intensity at the given fraction of the sorted values.
///
/// With `n` values the threshold is the value at sorted position
/// `floor(p * n)`, so `p = 0.95` over `1..=100` selects `96`.
pub fn percentile_level(values: &[f64], percentile: f64) -> Result<f64> {
    if !(percentile > 0.0 && percentile < 1.0) {
        return Err(Error::Parameter(format!(
            "percentile {percentile} outside (0, 1)"
        )));
    }
    if values.is_empty() {
        return Err(Error::Insufficient("no voxels to threshold".into()));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let raw = percentile * sorted.len() as f64;
    // Absorb representation error so that e.g. 0.95 * 100 lands on 95.
    let pos = if (raw - raw.round()).abs() < 1e-9 {
        raw.round()
    } else {
        raw.floor()
    };
    let pos = (pos as usize).min(sorted.len() - 1);
    Ok(sorted[pos])
}

/// Initial two-class labelling from a constant intensity threshold.
///
/// Masked voxels at or above the `percentile` level become class 2
/// (artery), the rest class 1. The mask defaults to the nonzero voxels.
pub fn threshold_initial(
    vol: &Volume3D,
    percentile: f64,
    mask: Option<&[bool]>,
) -> Result<LabelMap> {
    if !(percentile > 0.0 && percentile < 1.0) {
        return Err(Error::Parameter(format!(
            "percentile {percentile} outside (0, 1)"
        )));
    }
    let mask: Vec<bool> = match mask {
        Some(m) if m.len() != vol.grid.len() => {
            return Err(Error::DimensionMismatch(
                "mask does not match volume".into(),
            ))
        }
        Some(m) => m.to_vec(),
        None => vol.nonzero_mask(),
    };
    let masked: Vec<f64> = vol
        .data
        .iter()
        .zip(&mask)
        .filter_map(|(&v, &m)| m.then_some(v))
        .collect();
    let distinct = masked
        .iter()
        .any(|&v| masked.first().is_some_and(|&f| v != f));
    if !distinct {
        return Err(Error::Insufficient(
            "threshold needs at least two distinct masked intensities".into(),
        ));
    }
    let level = percentile_level(&masked, percentile)?;
    let labels = vol
        .data
        .iter()
        .zip(&mask)
        .map(|(&v, &m)| match (m, v >= level) {
            (false, _) => 0,
            (true, true) => 2,
            (true, false) => 1,
        })
        .collect();
    LabelMap::new(vol.grid, labels, mask, 2)
}
