//! Digital topology helpers under the (26, 6) connectivity pair.

use crate::volume::{BinaryVolume, Grid};

/// The 26 neighbour offsets in ascending linear-index order.
pub const OFFSETS26: [[i64; 3]; 26] = {
    let mut out = [[0; 3]; 26];
    let mut n = 0;
    let mut dz = -1;
    while dz <= 1 {
        let mut dy = -1;
        while dy <= 1 {
            let mut dx = -1;
            while dx <= 1 {
                if !(dx == 0 && dy == 0 && dz == 0) {
                    out[n] = [dx, dy, dz];
                    n += 1;
                }
                dx += 1;
            }
            dy += 1;
        }
        dz += 1;
    }
    out
};

/// In-bounds 26-neighbours of a voxel, ascending by linear index.
pub fn neighbours26(grid: &Grid, idx: usize) -> impl Iterator<Item = usize> + '_ {
    let c = grid.coord(idx).map(|v| v as i64);
    OFFSETS26
        .iter()
        .filter_map(move |o| grid.checked_index([c[0] + o[0], c[1] + o[1], c[2] + o[2]]))
}

/// Labels each foreground voxel with a 26-connected component id
/// (numbered from 0 in order of first voxel); background gets `u32::MAX`.
pub fn components26(bin: &BinaryVolume) -> (Vec<u32>, usize) {
    let grid = bin.grid();
    let mut label = vec![u32::MAX; grid.len()];
    let mut count = 0u32;
    let mut stack = Vec::new();
    for s in 0..grid.len() {
        if !bin.get(s) || label[s] != u32::MAX {
            continue;
        }
        label[s] = count;
        stack.push(s);
        while let Some(v) = stack.pop() {
            for w in neighbours26(grid, v) {
                if bin.get(w) && label[w] == u32::MAX {
                    label[w] = count;
                    stack.push(w);
                }
            }
        }
        count += 1;
    }
    (label, count as usize)
}

/// Drop 26-connected components with fewer than `min_voxels` voxels.
pub fn remove_small_components(bin: &BinaryVolume, min_voxels: usize) -> BinaryVolume {
    if min_voxels <= 1 {
        return bin.clone();
    }
    let (label, count) = components26(bin);
    let mut size = vec![0usize; count];
    for &l in label.iter().filter(|&&l| l != u32::MAX) {
        size[l as usize] += 1;
    }
    let bits = label
        .iter()
        .map(|&l| l != u32::MAX && size[l as usize] >= min_voxels)
        .collect();
    BinaryVolume::new(*bin.grid(), bits).expect("same grid")
}

/// Euler characteristic of the union of closed unit cubes centred on the
/// foreground voxels: components - tunnels + cavities for a 26-connected
/// object with 6-connected background.
pub fn euler_characteristic(bin: &BinaryVolume) -> i64 {
    let [nx, ny, nz] = bin.grid().dims;
    // lattice points are cube corners, (nx+1) x (ny+1) x (nz+1)
    let (px, py, pz) = (nx + 1, ny + 1, nz + 1);
    let corner = |x: usize, y: usize, z: usize| x + px * (y + py * z);
    let mut verts = vec![false; px * py * pz];
    // edge / face identified by their lowest corner and orientation
    let mut edges = [
        vec![false; px * py * pz],
        vec![false; px * py * pz],
        vec![false; px * py * pz],
    ];
    let mut faces = [
        vec![false; px * py * pz],
        vec![false; px * py * pz],
        vec![false; px * py * pz],
    ];
    let mut cubes = 0i64;
    for idx in bin.foreground() {
        let [x, y, z] = bin.grid().coord(idx);
        cubes += 1;
        for dz in 0..2 {
            for dy in 0..2 {
                for dx in 0..2 {
                    verts[corner(x + dx, y + dy, z + dz)] = true;
                }
            }
        }
        for a in 0..2 {
            for b in 0..2 {
                edges[0][corner(x, y + a, z + b)] = true;
                edges[1][corner(x + a, y, z + b)] = true;
                edges[2][corner(x + a, y + b, z)] = true;
            }
        }
        for a in 0..2 {
            faces[0][corner(x + a, y, z)] = true; // normal x
            faces[1][corner(x, y + a, z)] = true; // normal y
            faces[2][corner(x, y, z + a)] = true; // normal z
        }
    }
    let count = |v: &[bool]| v.iter().filter(|&&b| b).count() as i64;
    let e: i64 = edges.iter().map(|v| count(v)).sum();
    let f: i64 = faces.iter().map(|v| count(v)).sum();
    count(&verts) - e + f - cubes
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vol(dims: [usize; 3], on: &[[usize; 3]]) -> BinaryVolume {
        let g = Grid::new(dims, [1.0; 3]).unwrap();
        let mut b = BinaryVolume::empty(g);
        for c in on {
            b.set(g.index(c[0], c[1], c[2]), true);
        }
        b
    }

    #[test]
    fn offsets_are_ordered_and_exclude_centre() {
        assert_eq!(OFFSETS26[0], [-1, -1, -1]);
        assert_eq!(OFFSETS26[25], [1, 1, 1]);
        assert!(!OFFSETS26.contains(&[0, 0, 0]));
    }

    #[test]
    fn diagonal_voxels_share_a_component() {
        let b = vol([3, 3, 3], &[[0, 0, 0], [1, 1, 1], [2, 2, 0]]);
        assert_eq!(components26(&b).1, 1);
        let b = vol([4, 1, 1], &[[0, 0, 0], [3, 0, 0]]);
        assert_eq!(components26(&b).1, 2);
    }

    #[test]
    fn euler_of_basic_shapes() {
        assert_eq!(euler_characteristic(&vol([3, 3, 3], &[[1, 1, 1]])), 1);
        // square ring in a plane: one tunnel
        let ring: Vec<[usize; 3]> = (0..3)
            .flat_map(|x| (0..3).map(move |y| [x, y, 0]))
            .filter(|c| *c != [1, 1, 0])
            .collect();
        assert_eq!(euler_characteristic(&vol([3, 3, 1], &ring)), 0);
        // hollow cube shell: one cavity
        let shell: Vec<[usize; 3]> = (0..27)
            .map(|i| [i % 3, (i / 3) % 3, i / 9])
            .filter(|c| *c != [1, 1, 1])
            .collect();
        assert_eq!(euler_characteristic(&vol([3, 3, 3], &shell)), 2);
    }

    #[test]
    fn small_components_are_dropped() {
        let b = vol(
            [8, 8, 8],
            &[
                [0, 0, 0],
                [1, 1, 1],
                [5, 5, 5],
                [5, 5, 6],
                [5, 6, 7],
                [7, 0, 0],
            ],
        );
        let kept = remove_small_components(&b, 3);
        assert_eq!(kept.count(), 3);
        assert!(kept.get(b.grid().index(5, 6, 7)));
        assert_eq!(remove_small_components(&b, 1), b);
        assert_eq!(remove_small_components(&b, 2).count(), 5);
    }
}
