//! Placing a decoded in-plane curve between two 3D landmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::fourier::{decode_fourier, FourierArtery};

pub type Vec3 = [f64; 3];

fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn norm(a: Vec3) -> f64 {
    dot(a, a).sqrt()
}

fn scale(a: Vec3, s: f64) -> Vec3 {
    [a[0] * s, a[1] * s, a[2] * s]
}

/// Plane through `origin` with orthonormal in-plane axes. The drawn jitter
/// rotates the plane about the start-end chord by at most `jitter_angle`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OrientationPlane {
    pub origin: Vec3,
    pub u: Vec3,
    pub v: Vec3,
    pub jitter_angle: f64,
}

impl OrientationPlane {
    pub fn new(origin: Vec3, u: Vec3, v: Vec3, jitter_angle: f64) -> Result<Self> {
        let ok = (norm(u) - 1.0).abs() <= 1e-9
            && (norm(v) - 1.0).abs() <= 1e-9
            && dot(u, v).abs() <= 1e-9;
        if !ok {
            return Err(Error::Degenerate(format!(
                "plane axes {u:?}, {v:?} are not orthonormal"
            )));
        }
        Ok(OrientationPlane {
            origin,
            u,
            v,
            jitter_angle,
        })
    }

    /// u along the chord, v the component of `normal_hint` orthogonal to it
    /// (falls back to the coordinate axis least aligned with the chord).
    pub fn from_chord(
        start: Vec3,
        end: Vec3,
        normal_hint: Option<Vec3>,
        jitter_angle: f64,
    ) -> Result<Self> {
        let chord = sub(end, start);
        let len = norm(chord);
        if len == 0.0 {
            return Err(Error::Degenerate("start and end coincide".into()));
        }
        let u = scale(chord, 1.0 / len);
        let pick = |h: Vec3| {
            let w = sub(h, scale(u, dot(h, u)));
            let n = norm(w);
            (n > 1e-6).then(|| scale(w, 1.0 / n))
        };
        let fallback = {
            let k = (0..3)
                .min_by(|&a, &b| u[a].abs().total_cmp(&u[b].abs()))
                .unwrap();
            let mut e = [0.0; 3];
            e[k] = 1.0;
            e
        };
        let v = normal_hint
            .and_then(pick)
            .or_else(|| pick(fallback))
            .expect("fallback axis is off the chord");
        OrientationPlane::new(start, u, v, jitter_angle)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OrientedTrace {
    pub points: Vec<Vec3>,
    /// Rotation actually drawn, radians.
    pub angle: f64,
}

/// Decode `fa` at `n` samples, map it by a similarity so its ends land on
/// `start` and `end`, and lay it in the plane rotated about the chord by an
/// angle drawn uniformly from [-jitter, jitter].
pub fn orient_trace(
    fa: &FourierArtery,
    plane: &OrientationPlane,
    start: Vec3,
    end: Vec3,
    seed: u64,
    n: usize,
) -> Result<OrientedTrace> {
    fa.validate()?;
    let chord = sub(end, start);
    let len = norm(chord);
    if len == 0.0 {
        return Err(Error::Degenerate("start and end coincide".into()));
    }
    let e1 = scale(chord, 1.0 / len);
    let e2 = {
        let w = sub(plane.v, scale(e1, dot(plane.v, e1)));
        let w = if norm(w) > 1e-6 {
            w
        } else {
            sub(plane.u, scale(e1, dot(plane.u, e1)))
        };
        let nw = norm(w);
        if nw <= 1e-6 {
            return Err(Error::Degenerate(
                "plane does not span a direction off the chord".into(),
            ));
        }
        scale(w, 1.0 / nw)
    };
    let angle = if plane.jitter_angle > 0.0 {
        ChaCha8Rng::seed_from_u64(seed).random_range(-plane.jitter_angle..=plane.jitter_angle)
    } else {
        0.0
    };
    let e3 = cross(e1, e2);
    let e2r = [0, 1, 2].map(|a| angle.cos() * e2[a] + angle.sin() * e3[a]);

    let curve = decode_fourier(fa, n);
    let p0 = curve[0];
    let c2 = [
        curve[curve.len() - 1][0] - p0[0],
        curve[curve.len() - 1][1] - p0[1],
    ];
    let c2len = (c2[0] * c2[0] + c2[1] * c2[1]).sqrt();
    if c2len <= 1e-12 {
        return Err(Error::Degenerate("decoded curve is closed".into()));
    }
    let a = [c2[0] / c2len, c2[1] / c2len];
    let b = [-a[1], a[0]];
    let k = len / c2len;
    let mut points: Vec<Vec3> = curve
        .iter()
        .map(|p| {
            let q = [p[0] - p0[0], p[1] - p0[1]];
            let (x, y) = (
                k * (q[0] * a[0] + q[1] * a[1]),
                k * (q[0] * b[0] + q[1] * b[1]),
            );
            [0, 1, 2].map(|i| start[i] + x * e1[i] + y * e2r[i])
        })
        .collect();
    let last = points.len() - 1;
    points[0] = start;
    points[last] = end;
    Ok(OrientedTrace { points, angle })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn wavy() -> FourierArtery {
        FourierArtery {
            order: 1,
            coeffs_u: vec![0.0; 3],
            coeffs_v: vec![0.0, 0.0, 0.2],
            trend_u: [0.0, 1.0],
            trend_v: [0.0; 2],
        }
    }

    #[test]
    fn straight_line_ignores_rotation() {
        let (s, e) = ([1.0, 2.0, 3.0], [7.0, 5.0, 1.0]);
        let plane = OrientationPlane::from_chord(s, e, None, 0.5).unwrap();
        let t = orient_trace(&FourierArtery::straight(), &plane, s, e, 11, 50).unwrap();
        for (i, p) in t.points.iter().enumerate() {
            let f = i as f64 / 49.0;
            for a in 0..3 {
                assert!((p[a] - (s[a] + f * (e[a] - s[a]))).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn endpoints_are_pinned_and_seeds_matter() {
        let (s, e) = ([0.0, 0.0, 0.0], [10.0, 0.0, 0.0]);
        let plane =
            OrientationPlane::from_chord(s, e, Some([0.0, 1.0, 0.0]), 15f64.to_radians()).unwrap();
        let a = orient_trace(&wavy(), &plane, s, e, 1, 100).unwrap();
        let b = orient_trace(&wavy(), &plane, s, e, 1, 100).unwrap();
        let c = orient_trace(&wavy(), &plane, s, e, 2, 100).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.points, c.points);
        for t in [&a, &c] {
            assert_eq!(t.points[0], s);
            assert_eq!(t.points[99], e);
            assert!(t.angle.abs() <= 15f64.to_radians());
        }
        // rotation about the chord keeps the distance to it
        let off = |p: &Vec3| (p[1] * p[1] + p[2] * p[2]).sqrt();
        for (p, q) in a.points.iter().zip(&c.points) {
            assert!((off(p) - off(q)).abs() < 1e-9);
        }
    }

    #[test]
    fn trace_lies_in_the_rotated_plane() {
        let (s, e) = ([0.0, 0.0, 0.0], [0.0, 0.0, 8.0]);
        let plane = OrientationPlane::from_chord(s, e, Some([1.0, 0.0, 0.0]), 0.0).unwrap();
        let t = orient_trace(&wavy(), &plane, s, e, 3, 64).unwrap();
        assert!(t.points.iter().all(|p| p[1].abs() < 1e-12));
        assert!(t.points.iter().any(|p| p[0].abs() > 0.5));
    }

    #[test]
    fn degenerate_inputs() {
        assert!(OrientationPlane::new([0.0; 3], [1.0, 0.0, 0.0], [1.0, 0.0, 0.0], 0.0).is_err());
        assert!(OrientationPlane::from_chord([1.0; 3], [1.0; 3], None, 0.0).is_err());
    }
}
