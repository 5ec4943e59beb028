//! Tube rasterization with a varying radius.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{BinaryVolume, Grid};

/// Radius samples at uniform normalized arclength, linearly interpolated.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct RadiusProfile {
    samples: Vec<f64>,
}

impl TryFrom<Vec<f64>> for RadiusProfile {
    type Error = Error;
    fn try_from(v: Vec<f64>) -> Result<Self> {
        RadiusProfile::new(v)
    }
}

impl From<RadiusProfile> for Vec<f64> {
    fn from(p: RadiusProfile) -> Self {
        p.samples
    }
}

impl RadiusProfile {
    pub fn new(samples: Vec<f64>) -> Result<Self> {
        if samples.len() < 2 {
            return Err(Error::Parameter("radius profile needs two samples".into()));
        }
        if let Some(i) = samples.iter().position(|r| !(*r > 0.0 && r.is_finite())) {
            return Err(Error::Parameter(format!(
                "radius sample {i} is {}",
                samples[i]
            )));
        }
        Ok(RadiusProfile { samples })
    }

    pub fn constant(r: f64) -> Result<Self> {
        RadiusProfile::new(vec![r, r])
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn max(&self) -> f64 {
        self.samples.iter().copied().fold(0.0, f64::max)
    }

    pub fn at(&self, s: f64) -> f64 {
        let n = self.samples.len() - 1;
        let x = s.clamp(0.0, 1.0) * n as f64;
        let i = (x.floor() as usize).min(n - 1);
        let f = x - i as f64;
        self.samples[i] * (1.0 - f) + self.samples[i + 1] * f
    }
}

/// `[x, y, z, r]` per trace point, with the radius taken from the profile at
/// each point's normalized arclength.
pub fn radii_along(trace: &[[f64; 3]], profile: &RadiusProfile) -> Vec<[f64; 4]> {
    let mut acc = vec![0.0; trace.len()];
    for i in 1..trace.len() {
        let d: f64 = (0..3)
            .map(|a| (trace[i][a] - trace[i - 1][a]).powi(2))
            .sum::<f64>()
            .sqrt();
        acc[i] = acc[i - 1] + d;
    }
    let total = acc.last().copied().unwrap_or(0.0);
    trace
        .iter()
        .zip(&acc)
        .map(|(p, &a)| {
            let s = if total > 0.0 { a / total } else { 0.0 };
            [p[0], p[1], p[2], profile.at(s)]
        })
        .collect()
}

fn check_bounds(points: &[[f64; 4]], grid: &Grid) -> Result<()> {
    let hi = [0, 1, 2].map(|a| (grid.dims[a] - 1) as f64 * grid.spacing[a]);
    for (index, p) in points.iter().enumerate() {
        if (0..3).any(|a| p[a] - p[3] < 0.0 || p[a] + p[3] > hi[a]) {
            return Err(Error::OutOfBounds { index });
        }
    }
    Ok(())
}

/// Set every voxel whose centre lies within the local radius of the
/// piecewise-linear centreline, plus the nearest-voxel chain of the
/// centreline itself.
pub fn rasterize_into(out: &mut BinaryVolume, points: &[[f64; 4]]) -> Result<()> {
    let grid = *out.grid();
    check_bounds(points, &grid)?;
    let sp = grid.spacing;
    let nearest = |p: [f64; 3]| -> usize {
        let c =
            [0, 1, 2].map(|a| ((p[a] / sp[a]).round() as i64).clamp(0, grid.dims[a] as i64 - 1));
        grid.checked_index(c).expect("clamped")
    };
    let segs: Vec<([f64; 4], [f64; 4])> = if points.len() == 1 {
        vec![(points[0], points[0])]
    } else {
        points.windows(2).map(|w| (w[0], w[1])).collect()
    };
    for (a, b) in segs {
        let d = [b[0] - a[0], b[1] - a[1], b[2] - a[2]];
        let len2 = d[0] * d[0] + d[1] * d[1] + d[2] * d[2];
        let rmax = a[3].max(b[3]);
        let lo = [0, 1, 2].map(|k| (((a[k].min(b[k]) - rmax) / sp[k]).floor() as i64).max(0));
        let hi = [0, 1, 2].map(|k| {
            (((a[k].max(b[k]) + rmax) / sp[k]).ceil() as i64).min(grid.dims[k] as i64 - 1)
        });
        for z in lo[2]..=hi[2] {
            for y in lo[1]..=hi[1] {
                for x in lo[0]..=hi[0] {
                    let p = [x as f64 * sp[0], y as f64 * sp[1], z as f64 * sp[2]];
                    let t = if len2 > 0.0 {
                        (((p[0] - a[0]) * d[0] + (p[1] - a[1]) * d[1] + (p[2] - a[2]) * d[2])
                            / len2)
                            .clamp(0.0, 1.0)
                    } else {
                        0.0
                    };
                    let c = [a[0] + t * d[0], a[1] + t * d[1], a[2] + t * d[2]];
                    let r = a[3] + t * (b[3] - a[3]);
                    let dist2 =
                        (p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2) + (p[2] - c[2]).powi(2);
                    if dist2 <= r * r {
                        out.set(grid.index(x as usize, y as usize, z as usize), true);
                    }
                }
            }
        }
        // minimum thickness: nearest voxels at sub-voxel steps
        let min_sp = sp.iter().copied().fold(f64::INFINITY, f64::min);
        let steps = ((len2.sqrt() / (0.5 * min_sp)).ceil() as usize).max(1);
        for i in 0..=steps {
            let t = i as f64 / steps as f64;
            out.set(
                nearest([a[0] + t * d[0], a[1] + t * d[1], a[2] + t * d[2]]),
                true,
            );
        }
    }
    Ok(())
}

pub fn rasterize_tube(
    trace: &[[f64; 3]],
    profile: &RadiusProfile,
    grid: Grid,
) -> Result<BinaryVolume> {
    let mut out = BinaryVolume::empty(grid);
    rasterize_into(&mut out, &radii_along(trace, profile))?;
    Ok(out)
}
