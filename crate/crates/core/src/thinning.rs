//! Topology-preserving 3D thinning by directional border peeling.
//!
//! Each iteration runs six sub-iterations, one per face direction. A
//! sub-iteration collects border voxels in that direction that are simple
//! and are not endpoints, then re-checks and deletes them one at a time in
//! ascending index order. Simple points are detected with the topological
//! numbers of the (26, 6) pair: T26 = 1 and T6 of the background = 1.

use std::sync::OnceLock;

use rayon::prelude::*;

use crate::edt::DistanceField;
use crate::topology::neighbours26;
use crate::volume::BinaryVolume;

const CENTRE: usize = 13;
/// Face neighbours in the 3x3x3 cube.
const FACES: [usize; 6] = [4, 10, 12, 14, 16, 22];
/// Peeling order: up, down, north, south, east, west.
const DIRECTIONS: [[i64; 3]; 6] = [
    [0, 0, 1],
    [0, 0, -1],
    [0, 1, 0],
    [0, -1, 0],
    [1, 0, 0],
    [-1, 0, 0],
];

fn cube_offset(p: usize) -> [i64; 3] {
    [
        (p % 3) as i64 - 1,
        ((p / 3) % 3) as i64 - 1,
        (p / 9) as i64 - 1,
    ]
}

struct Tables {
    adj26: Vec<Vec<usize>>,
    /// 6-adjacency restricted to the 18-neighbourhood.
    adj6_18: Vec<Vec<usize>>,
    in18: [bool; 27],
}

fn tables() -> &'static Tables {
    static T: OnceLock<Tables> = OnceLock::new();
    T.get_or_init(|| {
        let mut in18 = [false; 27];
        for (p, slot) in in18.iter_mut().enumerate() {
            let o = cube_offset(p);
            *slot = p != CENTRE && o.iter().map(|v| v.abs()).sum::<i64>() <= 2;
        }
        let mut adj26 = vec![Vec::new(); 27];
        let mut adj6_18 = vec![Vec::new(); 27];
        for p in 0..27 {
            for q in 0..27 {
                if p == q || p == CENTRE || q == CENTRE {
                    continue;
                }
                let (a, b) = (cube_offset(p), cube_offset(q));
                let d: Vec<i64> = (0..3).map(|i| (a[i] - b[i]).abs()).collect();
                if d.iter().all(|&v| v <= 1) {
                    adj26[p].push(q);
                }
                if in18[p] && in18[q] && d.iter().sum::<i64>() == 1 {
                    adj6_18[p].push(q);
                }
            }
        }
        Tables {
            adj26,
            adj6_18,
            in18,
        }
    })
}

/// Number of components of `set` (a 27-bit cube mask) under `adj`,
/// optionally counting only components that contain one of `seeds`.
fn count_components(set: u32, adj: &[Vec<usize>], seeds: Option<&[usize]>) -> usize {
    let mut seen = 0u32;
    let mut count = 0;
    let mut stack = Vec::with_capacity(27);
    let starts: Vec<usize> = match seeds {
        Some(s) => s.to_vec(),
        None => (0..27).collect(),
    };
    for s in starts {
        if set & (1 << s) == 0 || seen & (1 << s) != 0 {
            continue;
        }
        count += 1;
        seen |= 1 << s;
        stack.push(s);
        while let Some(p) = stack.pop() {
            for &q in &adj[p] {
                if set & (1 << q) != 0 && seen & (1 << q) == 0 {
                    seen |= 1 << q;
                    stack.push(q);
                }
            }
        }
    }
    count
}

/// Whether the centre of a 3x3x3 neighbourhood can be removed without
/// changing the topology (bit `p` set means cube position `p` is object).
pub fn is_simple(cube: u32) -> bool {
    let t = tables();
    let object = cube & !(1 << CENTRE);
    if count_components(object, &t.adj26, None) != 1 {
        return false;
    }
    let mut background = 0u32;
    for p in 0..27 {
        if t.in18[p] && cube & (1 << p) == 0 {
            background |= 1 << p;
        }
    }
    count_components(background, &t.adj6_18, Some(&FACES)) == 1
}

fn neighbourhood(bits: &[bool], dims: [usize; 3], idx: usize) -> u32 {
    let [nx, ny, nz] = dims;
    let x = (idx % nx) as i64;
    let y = ((idx / nx) % ny) as i64;
    let z = (idx / (nx * ny)) as i64;
    let mut cube = 0u32;
    for p in 0..27 {
        let o = cube_offset(p);
        let (a, b, c) = (x + o[0], y + o[1], z + o[2]);
        if a >= 0 && b >= 0 && c >= 0 && (a as usize) < nx && (b as usize) < ny && (c as usize) < nz
        {
            let j = a as usize + nx * (b as usize + ny * c as usize);
            if bits[j] {
                cube |= 1 << p;
            }
        }
    }
    cube
}

fn is_endpoint(cube: u32) -> bool {
    (cube & !(1 << CENTRE)).count_ones() == 1
}

fn border_in(cube: u32, dir: [i64; 3]) -> bool {
    let p = (dir[0] + 1) + 3 * (dir[1] + 1) + 9 * (dir[2] + 1);
    cube & (1 << p) == 0
}

/// One-voxel-thick skeleton preserving 26-components, tunnels and cavities.
/// Endpoints (voxels with exactly one 26-neighbour) are never removed.
pub fn skeletonize_3d(bin: &BinaryVolume) -> BinaryVolume {
    let dims = bin.grid().dims;
    let mut out = bin.clone();
    let mut live = bin.foreground();
    loop {
        let mut removed = 0;
        for dir in DIRECTIONS {
            let bits = out.bits();
            let candidates: Vec<usize> = live
                .par_iter()
                .copied()
                .filter(|&i| {
                    let cube = neighbourhood(bits, dims, i);
                    border_in(cube, dir) && !is_endpoint(cube) && is_simple(cube)
                })
                .collect();
            for i in candidates {
                let cube = neighbourhood(out.bits(), dims, i);
                if !is_endpoint(cube) && is_simple(cube) {
                    out.set(i, false);
                    removed += 1;
                }
            }
            live.retain(|&i| out.get(i));
        }
        if removed == 0 {
            return out;
        }
    }
}

/// Remove terminal branches shorter than `ratio` times the distance from
/// their junction voxel to the nearest background voxel, then re-thin.
/// Repeats until nothing changes. Branches ending at another endpoint are
/// kept.
pub fn prune_spurs(skel: &BinaryVolume, field: &DistanceField, ratio: f64) -> BinaryVolume {
    let grid = *skel.grid();
    let sp = grid.spacing;
    let step = |a: usize, b: usize| -> f64 {
        let (p, q) = (grid.coord(a), grid.coord(b));
        (0..3)
            .map(|k| ((p[k] as f64 - q[k] as f64) * sp[k]).powi(2))
            .sum::<f64>()
            .sqrt()
    };
    let mut out = skel.clone();
    loop {
        let degree =
            |out: &BinaryVolume, i: usize| neighbours26(&grid, i).filter(|&j| out.get(j)).count();
        let mut doomed = Vec::new();
        for e in out.foreground() {
            if degree(&out, e) != 1 {
                continue;
            }
            let mut branch = vec![e];
            let mut length = 0.0;
            let mut prev = usize::MAX;
            let mut cur = e;
            let junction = loop {
                let next: Vec<usize> = neighbours26(&grid, cur)
                    .filter(|&j| out.get(j) && j != prev)
                    .collect();
                let [n] = next[..] else { break None };
                length += step(cur, n);
                match degree(&out, n) {
                    1 => break None,
                    2 => {
                        branch.push(n);
                        prev = cur;
                        cur = n;
                    }
                    _ => break Some(n),
                }
            };
            if let Some(j) = junction {
                if length < ratio * step(j, field.nearest(j)) {
                    doomed.extend(branch);
                }
            }
        }
        if doomed.is_empty() {
            return out;
        }
        for i in doomed {
            out.set(i, false);
        }
        out = skeletonize_3d(&out);
    }
}

/// Slide chain voxels onto the distance-map ridge. A voxel with exactly two
/// skeleton neighbours `a` and `b` moves to a foreground voxel adjacent to
/// both that touches no other skeleton voxel and lies strictly farther from
/// the background. Connectivity, endpoints and junctions are unchanged.
pub fn recentre(skel: &BinaryVolume, field: &DistanceField) -> BinaryVolume {
    let grid = *skel.grid();
    let sq = field.squared_all();
    let adjacent = |p: usize, q: usize| {
        let (a, b) = (grid.coord(p), grid.coord(q));
        p != q && (0..3).all(|k| a[k].abs_diff(b[k]) <= 1)
    };
    let mut out = skel.clone();
    loop {
        let mut moved = 0;
        for v in out.foreground() {
            if !out.get(v) {
                continue;
            }
            let nb: Vec<usize> = neighbours26(&grid, v).filter(|&j| out.get(j)).collect();
            let [a, b] = nb[..] else { continue };
            if adjacent(a, b) {
                continue;
            }
            let mut best: Option<usize> = None;
            for w in neighbours26(&grid, a) {
                if out.get(w) || sq[w] <= sq[v] || !adjacent(w, b) {
                    continue;
                }
                if neighbours26(&grid, w).any(|j| out.get(j) && j != a && j != b && j != v) {
                    continue;
                }
                if best.is_none_or(|c| sq[w] > sq[c]) {
                    best = Some(w);
                }
            }
            if let Some(w) = best {
                out.set(v, false);
                out.set(w, true);
                moved += 1;
            }
        }
        if moved == 0 {
            return out;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::topology::{components26, euler_characteristic};
    use crate::volume::Grid;

    fn grid(d: [usize; 3]) -> Grid {
        Grid::new(d, [1.0; 3]).unwrap()
    }

    fn from_fn(d: [usize; 3], f: impl Fn(f64, f64, f64) -> bool) -> BinaryVolume {
        let g = grid(d);
        let bits = (0..g.len())
            .map(|i| {
                let [x, y, z] = g.coord(i);
                f(x as f64, y as f64, z as f64)
            })
            .collect();
        BinaryVolume::new(g, bits).unwrap()
    }

    #[test]
    fn simple_point_basics() {
        let centre = 1 << CENTRE;
        assert!(!is_simple(centre), "isolated voxel");
        assert!(is_simple(centre | 1 << 14), "tip of a stub");
        assert!(!is_simple(centre | 1 << 12 | 1 << 14), "middle of a line");
        assert!(!is_simple((1 << 27) - 1), "interior voxel");
        assert!(is_simple(((1 << 27) - 1) & !(1 << 22)), "face of a solid");
    }

    #[test]
    fn single_voxel_is_fixed() {
        let b = from_fn([3, 3, 3], |x, y, z| (x, y, z) == (1.0, 1.0, 1.0));
        assert_eq!(skeletonize_3d(&b), b);
    }

    #[test]
    fn empty_stays_empty() {
        let b = BinaryVolume::empty(grid([4, 4, 4]));
        assert_eq!(skeletonize_3d(&b).count(), 0);
    }

    #[test]
    fn straight_tube_becomes_axis_chain() {
        let (cy, cz) = (7.0, 7.0);
        let b = from_fn([48, 15, 15], |x, y, z| {
            (4.0..44.0).contains(&x) && (y - cy).powi(2) + (z - cz).powi(2) <= 9.0
        });
        let s = skeletonize_3d(&b);
        let g = *s.grid();
        assert_eq!(components26(&s).1, 1);
        for i in s.foreground() {
            let [_, y, z] = g.coord(i);
            assert!((y as f64 - cy).abs() <= 1.0 && (z as f64 - cz).abs() <= 1.0);
        }
        // a chain: at most two voxels have a single neighbour, none have more than two
        let deg: Vec<usize> = s
            .foreground()
            .into_iter()
            .map(|i| {
                crate::topology::neighbours26(&g, i)
                    .filter(|&j| s.get(j))
                    .count()
            })
            .collect();
        assert_eq!(deg.iter().filter(|&&d| d == 1).count(), 2);
        assert!(deg.iter().all(|&d| d <= 2));
    }

    #[test]
    fn ring_keeps_its_tunnel() {
        let (c, big, small) = (16.0, 10.0, 3.0);
        let b = from_fn([33, 33, 11], |x, y, z| {
            let q = ((x - c).powi(2) + (y - c).powi(2)).sqrt() - big;
            q * q + (z - 5.0).powi(2) <= small * small
        });
        assert_eq!(euler_characteristic(&b), 0);
        let s = skeletonize_3d(&b);
        assert_eq!(components26(&s).1, 1);
        assert_eq!(euler_characteristic(&s), 0);
        assert!(s.count() < b.count() / 10);
    }

    #[test]
    fn idempotent_on_blob() {
        let b = from_fn([20, 20, 20], |x, y, z| {
            (x - 9.0).powi(2) + (y - 9.0).powi(2) + (z - 9.0).powi(2) <= 36.0
                || (x - 14.0).abs() + (y - 4.0).abs() <= 2.0
        });
        let s = skeletonize_3d(&b);
        assert_eq!(skeletonize_3d(&s), s);
        assert_eq!(components26(&s).1, components26(&b).1);
        assert_eq!(euler_characteristic(&s), euler_characteristic(&b));
    }

    fn tube(d: [usize; 3], r: f64, axis: impl Fn(f64) -> (f64, f64)) -> BinaryVolume {
        from_fn(d, |x, y, z| {
            let (cy, cz) = axis(x);
            (y - cy).powi(2) + (z - cz).powi(2) <= r * r && (3.0..d[0] as f64 - 3.0).contains(&x)
        })
    }

    #[test]
    fn spur_on_a_tube_is_pruned() {
        let mut b = tube([40, 20, 20], 3.2, |_| (9.5, 9.5));
        // one-voxel bump on the surface
        let g = *b.grid();
        b.set(g.index(20, 13, 9), true);
        b.set(g.index(20, 14, 9), true);
        let field = crate::edt::distance_transform(&b).unwrap();
        let thin = skeletonize_3d(&b);
        let pruned = prune_spurs(&thin, &field, 1.5);
        let ends = |s: &BinaryVolume| {
            s.foreground()
                .into_iter()
                .filter(|&i| neighbours26(&g, i).filter(|&j| s.get(j)).count() == 1)
                .count()
        };
        assert!(ends(&pruned) <= 2, "{} endpoints", ends(&pruned));
        assert_eq!(components26(&pruned).1, 1);
        assert_eq!(prune_spurs(&pruned, &field, 1.5), pruned);
        // a long branch survives
        let mut t = tube([40, 40, 20], 2.0, |_| (9.5, 9.5));
        for y in 10..36 {
            for dz in -1..=1i64 {
                for dx in -1..=1i64 {
                    t.set(g_index(&t, [20 + dx, y, 10 + dz]), true);
                }
            }
        }
        let f2 = crate::edt::distance_transform(&t).unwrap();
        let thin = skeletonize_3d(&t);
        assert_eq!(ends(&prune_spurs(&thin, &f2, 1.5)), ends(&thin));
    }

    fn g_index(b: &BinaryVolume, c: [i64; 3]) -> usize {
        b.grid().checked_index(c).unwrap()
    }

    #[test]
    fn recentring_raises_radii_and_keeps_topology() {
        let b = tube([48, 24, 24], 3.6, |x| (11.3 + 0.08 * x, 11.7 - 0.05 * x));
        let field = crate::edt::distance_transform(&b).unwrap();
        let thin = skeletonize_3d(&b);
        let moved = recentre(&thin, &field);
        assert_eq!(moved.count(), thin.count());
        assert_eq!(components26(&moved).1, components26(&thin).1);
        assert_eq!(euler_characteristic(&moved), euler_characteristic(&thin));
        assert!(moved.foreground().iter().all(|&i| b.get(i)));
        let total = |s: &BinaryVolume| {
            s.foreground()
                .iter()
                .map(|&i| field.squared(i))
                .sum::<i64>()
        };
        assert!(total(&moved) >= total(&thin));
        assert_eq!(recentre(&moved, &field), moved);
    }
}
