//! Skeleton voxels with physical radii.

use std::fmt::Write as _;
use std::path::Path;

use crate::edt::DistanceField;
use crate::error::{Error, Result};
use crate::volume::{BinaryVolume, Grid};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CenterlinePoint {
    pub index: usize,
    pub voxel: [usize; 3],
    pub radius_mm: f64,
}

/// Skeleton points sorted by linear index.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseCenterline {
    grid: Grid,
    points: Vec<CenterlinePoint>,
}

impl SparseCenterline {
    pub fn new(grid: Grid, mut points: Vec<CenterlinePoint>) -> Result<Self> {
        points.sort_by_key(|p| p.index);
        if points.windows(2).any(|w| w[0].index == w[1].index) {
            return Err(Error::Consistency("duplicate centerline voxel".into()));
        }
        if let Some(p) = points
            .iter()
            .find(|p| !(p.radius_mm > 0.0 && p.radius_mm.is_finite()))
        {
            return Err(Error::Consistency(format!(
                "voxel {:?} has radius {}",
                p.voxel, p.radius_mm
            )));
        }
        Ok(SparseCenterline { grid, points })
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.grid.spacing
    }

    pub fn points(&self) -> &[CenterlinePoint] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn radius_at(&self, index: usize) -> Option<f64> {
        self.points
            .binary_search_by_key(&index, |p| p.index)
            .ok()
            .map(|i| self.points[i].radius_mm)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("x,y,z,radius_mm\n");
        for p in &self.points {
            let _ = writeln!(
                s,
                "{},{},{},{:.6}",
                p.voxel[0], p.voxel[1], p.voxel[2], p.radius_mm
            );
        }
        s
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path.as_ref(), self.to_csv()).map_err(|e| Error::io(path.as_ref(), e))
    }
}

/// Radius of each skeleton voxel: physical distance to the nearest
/// background voxel, with each axis scaled by its own spacing.
pub fn compute_radii(
    skel: &BinaryVolume,
    field: &DistanceField,
    spacing: [f64; 3],
) -> Result<SparseCenterline> {
    if skel.dims() != field.grid().dims {
        return Err(Error::DimensionMismatch(
            "skeleton and distance field differ".into(),
        ));
    }
    let grid = Grid::new(skel.dims(), spacing)?;
    let mut points = Vec::with_capacity(skel.count());
    for index in skel.foreground() {
        let voxel = grid.coord(index);
        if field.squared(index) == 0 {
            return Err(Error::Consistency(format!(
                "skeleton voxel {voxel:?} lies on background"
            )));
        }
        let d = grid.coord(field.nearest(index));
        let r2: f64 = (0..3)
            .map(|a| ((voxel[a] as f64 - d[a] as f64) * spacing[a]).powi(2))
            .sum();
        points.push(CenterlinePoint {
            index,
            voxel,
            radius_mm: r2.sqrt(),
        });
    }
    SparseCenterline::new(grid, points)
}
