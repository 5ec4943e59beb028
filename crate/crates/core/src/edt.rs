//! Exact Euclidean distance transform with a nearest-background index map.
//!
//! Separable lower-envelope-of-parabolas passes along x, y and z, run in
//! integer arithmetic so distances are exact. When several background
//! voxels are equally near, the one with the smallest linear index wins:
//! each pass keeps the smallest coordinate on ties, and z, y, x is the
//! lexicographic order of linear indices.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::volume::{BinaryVolume, Grid};

const INF: i64 = i64::MAX;

#[derive(Clone, Debug, PartialEq)]
pub struct DistanceField {
    grid: Grid,
    sq: Vec<i64>,
    nearest: Vec<usize>,
}

impl DistanceField {
    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    /// Distance in voxels to the nearest background voxel (0 on background).
    pub fn dist(&self, idx: usize) -> f64 {
        (self.sq[idx] as f64).sqrt()
    }

    /// Squared distance in voxels, exact.
    pub fn squared(&self, idx: usize) -> i64 {
        self.sq[idx]
    }

    /// Linear index of the nearest background voxel (itself on background).
    pub fn nearest(&self, idx: usize) -> usize {
        self.nearest[idx]
    }

    pub fn squared_all(&self) -> &[i64] {
        &self.sq
    }

    pub fn nearest_all(&self) -> &[usize] {
        &self.nearest
    }
}

/// Lower envelope of the parabolas `f[i] + (x - i)^2` sampled at every
/// integer `x`. Writes the minimum and the arg-min (smallest on ties).
/// Entries equal to `INF` contribute no parabola.
fn envelope(
    f: &[i64],
    d: &mut [i64],
    arg: &mut [usize],
    v: &mut Vec<usize>,
    z: &mut Vec<(i128, i128)>,
) {
    let n = f.len();
    v.clear();
    z.clear();
    // boundary k sits between v[k-1] and v[k], stored as num/den with den > 0
    let key = |q: usize| f[q] as i128 + (q as i128) * (q as i128);
    for q in 0..n {
        if f[q] == INF {
            continue;
        }
        loop {
            let Some(&p) = v.last() else {
                v.push(q);
                break;
            };
            let num = key(q) - key(p);
            let den = 2 * (q as i128 - p as i128);
            // drop p when the new boundary is at or left of p's own left boundary
            if let Some(&(zn, zd)) = z.last().filter(|_| v.len() > 1) {
                if num * zd <= zn * den {
                    v.pop();
                    z.pop();
                    continue;
                }
            }
            v.push(q);
            z.push((num, den));
            break;
        }
    }
    if v.is_empty() {
        d.fill(INF);
        return;
    }
    let mut k = 0;
    for x in 0..n {
        // advance only when the next parabola is strictly better at x
        while k < z.len() && z[k].0 < x as i128 * z[k].1 {
            k += 1;
        }
        let p = v[k];
        let dx = x as i64 - p as i64;
        d[x] = f[p] + dx * dx;
        arg[x] = p;
    }
}

/// Exact squared Euclidean distance (voxel units) from every voxel to the
/// nearest background voxel, with that voxel's linear index.
pub fn distance_transform(bin: &BinaryVolume) -> Result<DistanceField> {
    let grid = *bin.grid();
    let [nx, ny, nz] = grid.dims;
    let bits = bin.bits();
    if bits.iter().all(|&b| b) {
        return Err(Error::NoBackground);
    }
    let n = grid.len();
    let mut sq = vec![INF; n];
    let mut near = vec![0usize; n];

    // x pass: rows are contiguous
    sq.par_chunks_mut(nx)
        .zip(near.par_chunks_mut(nx))
        .enumerate()
        .for_each(|(row, (d, a))| {
            let f: Vec<i64> = bits[row * nx..(row + 1) * nx]
                .iter()
                .map(|&b| if b { INF } else { 0 })
                .collect();
            let mut arg = vec![0; nx];
            envelope(&f, d, &mut arg, &mut Vec::new(), &mut Vec::new());
            for x in 0..nx {
                a[x] = row * nx + arg[x];
            }
        });

    // y pass: independent per z slab
    let plane = nx * ny;
    sq.par_chunks_mut(plane)
        .zip(near.par_chunks_mut(plane))
        .for_each(|(ds, ns)| {
            let mut f = vec![0; ny];
            let mut d = vec![0; ny];
            let mut arg = vec![0; ny];
            let mut prev = vec![0; ny];
            let (mut v, mut z) = (Vec::new(), Vec::new());
            for x in 0..nx {
                for y in 0..ny {
                    f[y] = ds[x + nx * y];
                    prev[y] = ns[x + nx * y];
                }
                envelope(&f, &mut d, &mut arg, &mut v, &mut z);
                for y in 0..ny {
                    ds[x + nx * y] = d[y];
                    ns[x + nx * y] = prev[arg[y]];
                }
            }
        });

    // z pass: columns are strided, so compute per (x, y) and scatter after
    let columns: Vec<(Vec<i64>, Vec<usize>)> = (0..plane)
        .into_par_iter()
        .map(|c| {
            let f: Vec<i64> = (0..nz).map(|z| sq[c + plane * z]).collect();
            let mut d = vec![0; nz];
            let mut arg = vec![0; nz];
            envelope(&f, &mut d, &mut arg, &mut Vec::new(), &mut Vec::new());
            let nn = arg.iter().map(|&z| near[c + plane * z]).collect();
            (d, nn)
        })
        .collect();
    for (c, (d, nn)) in columns.into_iter().enumerate() {
        for z in 0..nz {
            sq[c + plane * z] = d[z];
            near[c + plane * z] = nn[z];
        }
    }
    Ok(DistanceField {
        grid,
        sq,
        nearest: near,
    })
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use proptest::prelude::*;

    /// All-pairs oracle: smallest squared distance, smallest index on ties.
    pub(crate) fn brute_force(bin: &BinaryVolume) -> (Vec<i64>, Vec<usize>) {
        let g = bin.grid();
        let bg: Vec<[i64; 3]> = (0..g.len())
            .filter(|&i| !bin.get(i))
            .map(|i| g.coord(i).map(|c| c as i64))
            .collect();
        let bg_idx: Vec<usize> = (0..g.len()).filter(|&i| !bin.get(i)).collect();
        let mut sq = vec![0; g.len()];
        let mut near = vec![0; g.len()];
        for i in 0..g.len() {
            let p = g.coord(i).map(|c| c as i64);
            let mut best = (i64::MAX, 0);
            for (b, &bi) in bg.iter().zip(&bg_idx) {
                let d = (0..3).map(|a| (p[a] - b[a]) * (p[a] - b[a])).sum::<i64>();
                if d < best.0 {
                    best = (d, bi);
                }
            }
            sq[i] = best.0;
            near[i] = best.1;
        }
        (sq, near)
    }

    fn volume(dims: [usize; 3], bits: Vec<bool>) -> BinaryVolume {
        BinaryVolume::new(Grid::new(dims, [1.0; 3]).unwrap(), bits).unwrap()
    }

    #[test]
    fn isolated_voxel_has_unit_distance_to_smallest_neighbour() {
        let g = Grid::new([3, 3, 3], [1.0; 3]).unwrap();
        let mut bits = vec![false; 27];
        let c = g.index(1, 1, 1);
        bits[c] = true;
        let f = distance_transform(&volume([3, 3, 3], bits)).unwrap();
        assert_eq!(f.dist(c), 1.0);
        assert_eq!(f.nearest(c), g.index(1, 1, 0));
        assert_eq!(f.dist(0), 0.0);
        assert_eq!(f.nearest(0), 0);
    }

    #[test]
    fn slab_centre_plane() {
        // foreground z in 1..=5, background planes at z = 0 and z = 6
        let dims = [4, 4, 7];
        let g = Grid::new(dims, [1.0; 3]).unwrap();
        let bits = (0..g.len())
            .map(|i| (1..=5).contains(&g.coord(i)[2]))
            .collect();
        let f = distance_transform(&volume(dims, bits)).unwrap();
        assert_eq!(f.dist(g.index(2, 2, 3)), 3.0);
        assert_eq!(f.nearest(g.index(2, 2, 3)), g.index(2, 2, 0));
    }

    #[test]
    fn all_foreground_is_an_error() {
        assert!(matches!(
            distance_transform(&volume([2, 2, 2], vec![true; 8])),
            Err(Error::NoBackground)
        ));
    }

    #[test]
    fn single_background_voxel_reaches_every_corner() {
        let dims = [5, 4, 3];
        let g = Grid::new(dims, [1.0; 3]).unwrap();
        let mut bits = vec![true; g.len()];
        bits[g.index(4, 3, 2)] = false;
        let f = distance_transform(&volume(dims, bits)).unwrap();
        assert_eq!(f.squared(0), 16 + 9 + 4);
    }

    #[test]
    fn ties_resolve_to_smallest_index() {
        // background at both ends of a row: middle voxel ties
        let bits = vec![false, true, true, true, false];
        let f = distance_transform(&volume([5, 1, 1], bits)).unwrap();
        assert_eq!(f.nearest(2), 0);
        assert_eq!(f.squared(2), 4);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn matches_brute_force(
            nx in 1usize..=16, ny in 1usize..=16, nz in 1usize..=16,
            density in 0.05f64..0.95, seed in any::<u64>()
        ) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let n = nx * ny * nz;
            let mut bits: Vec<bool> = (0..n).map(|_| rng.random::<f64>() < density).collect();
            if bits.iter().all(|&b| b) {
                bits[rng.random_range(0..n)] = false;
            }
            let vol = volume([nx, ny, nz], bits);
            let f = distance_transform(&vol).unwrap();
            let (sq, near) = brute_force(&vol);
            prop_assert_eq!(f.squared_all(), &sq[..]);
            prop_assert_eq!(f.nearest_all(), &near[..]);
        }
    }
}
