//! Truncated Fourier series for in-plane artery curves.
//!
//! Each coordinate is `trend[0] + trend[1] s + a0 + sum_k (a_k cos 2πks + b_k sin 2πks)`
//! over s in [0, 1]. Coefficients are stored as `[a0, a1, b1, a2, b2, ...]`.

use std::f64::consts::TAU;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FourierArtery {
    pub order: usize,
    pub coeffs_u: Vec<f64>,
    pub coeffs_v: Vec<f64>,
    /// Linear part (offset, slope) removed before fitting; zero when the
    /// curve was fitted as is.
    #[serde(default)]
    pub trend_u: [f64; 2],
    #[serde(default)]
    pub trend_v: [f64; 2],
}

fn basis_row(order: usize, s: f64) -> Vec<f64> {
    let mut row = Vec::with_capacity(2 * order + 1);
    row.push(1.0);
    for k in 1..=order {
        let w = TAU * k as f64 * s;
        row.push(w.cos());
        row.push(w.sin());
    }
    row
}

fn series(coeffs: &[f64], order: usize, s: f64) -> f64 {
    basis_row(order, s)
        .iter()
        .zip(coeffs)
        .map(|(b, c)| b * c)
        .sum()
}

/// Normalized cumulative chord length of the samples.
pub fn arclength_params(curve: &[[f64; 2]]) -> Vec<f64> {
    let mut acc = vec![0.0; curve.len()];
    for i in 1..curve.len() {
        let d = ((curve[i][0] - curve[i - 1][0]).powi(2) + (curve[i][1] - curve[i - 1][1]).powi(2))
            .sqrt();
        acc[i] = acc[i - 1] + d;
    }
    let total = acc.last().copied().unwrap_or(0.0);
    if total > 0.0 {
        acc.iter_mut().for_each(|a| *a /= total);
    } else if curve.len() > 1 {
        let n = (curve.len() - 1) as f64;
        acc.iter_mut()
            .enumerate()
            .for_each(|(i, a)| *a = i as f64 / n);
    }
    acc
}

fn least_squares(params: &[f64], values: &[f64], order: usize) -> Result<Vec<f64>> {
    let m = 2 * order + 1;
    let a = DMatrix::from_fn(params.len(), m, |i, j| basis_row(order, params[i])[j]);
    let b = DVector::from_column_slice(values);
    let svd = a.svd(true, true);
    let x = svd
        .solve(&b, 1e-12)
        .map_err(|e| Error::Degenerate(format!("fourier fit: {e}")))?;
    Ok(x.iter().copied().collect())
}

/// Least-squares fit at explicit parameters.
pub fn encode_fourier_at(
    params: &[f64],
    curve: &[[f64; 2]],
    order: usize,
) -> Result<FourierArtery> {
    if params.len() != curve.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} params for {} samples",
            params.len(),
            curve.len()
        )));
    }
    if curve.len() < 2 * order + 1 {
        return Err(Error::Insufficient(format!(
            "{} samples cannot determine {} coefficients",
            curve.len(),
            2 * order + 1
        )));
    }
    let u: Vec<f64> = curve.iter().map(|p| p[0]).collect();
    let v: Vec<f64> = curve.iter().map(|p| p[1]).collect();
    Ok(FourierArtery {
        order,
        coeffs_u: least_squares(params, &u, order)?,
        coeffs_v: least_squares(params, &v, order)?,
        trend_u: [0.0; 2],
        trend_v: [0.0; 2],
    })
}

/// Least-squares fit over normalized arclength.
pub fn encode_fourier(curve: &[[f64; 2]], order: usize) -> Result<FourierArtery> {
    encode_fourier_at(&arclength_params(curve), curve, order)
}

/// Removes the line through the end samples first, so the fitted residual
/// vanishes at both ends and has no periodic seam.
pub fn encode_fourier_detrended(curve: &[[f64; 2]], order: usize) -> Result<FourierArtery> {
    let params = arclength_params(curve);
    let (first, last) = match (curve.first(), curve.last()) {
        (Some(f), Some(l)) => (*f, *l),
        _ => return Err(Error::Insufficient("empty curve".into())),
    };
    let trend_u = [first[0], last[0] - first[0]];
    let trend_v = [first[1], last[1] - first[1]];
    let residual: Vec<[f64; 2]> = curve
        .iter()
        .zip(&params)
        .map(|(p, &s)| {
            [
                p[0] - trend_u[0] - trend_u[1] * s,
                p[1] - trend_v[0] - trend_v[1] * s,
            ]
        })
        .collect();
    let mut fa = encode_fourier_at(&params, &residual, order)?;
    fa.trend_u = trend_u;
    fa.trend_v = trend_v;
    Ok(fa)
}

impl FourierArtery {
    pub fn validate(&self) -> Result<()> {
        let m = 2 * self.order + 1;
        if self.coeffs_u.len() != m || self.coeffs_v.len() != m {
            return Err(Error::Format {
                field: "coeffs",
                reason: format!("order {} needs {m} coefficients per axis", self.order),
            });
        }
        if self
            .coeffs_u
            .iter()
            .chain(&self.coeffs_v)
            .chain(&self.trend_u)
            .chain(&self.trend_v)
            .any(|c| !c.is_finite())
        {
            return Err(Error::Format {
                field: "coeffs",
                reason: "non-finite coefficient".into(),
            });
        }
        Ok(())
    }

    pub fn eval(&self, s: f64) -> [f64; 2] {
        [
            self.trend_u[0] + self.trend_u[1] * s + series(&self.coeffs_u, self.order, s),
            self.trend_v[0] + self.trend_v[1] * s + series(&self.coeffs_v, self.order, s),
        ]
    }

    /// Straight chord u = s, v = 0.
    pub fn straight() -> Self {
        FourierArtery {
            order: 0,
            coeffs_u: vec![0.0],
            coeffs_v: vec![0.0],
            trend_u: [0.0, 1.0],
            trend_v: [0.0; 2],
        }
    }
}

/// Evaluate at `n` uniform parameters from 0 to 1.
pub fn decode_fourier(fa: &FourierArtery, n: usize) -> Vec<[f64; 2]> {
    let n = n.max(2);
    (0..n).map(|i| fa.eval(i as f64 / (n - 1) as f64)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn uniform(n: usize) -> Vec<f64> {
        (0..n).map(|i| i as f64 / (n - 1) as f64).collect()
    }

    #[test]
    fn pure_sinusoid_has_a_single_coefficient() {
        let s = uniform(64);
        // drop the seam duplicate so the samples are one clean period
        let s = &s[..63];
        let curve: Vec<[f64; 2]> = s.iter().map(|&t| [0.0, (TAU * t).sin()]).collect();
        let fa = encode_fourier_at(s, &curve, 3).unwrap();
        assert!((fa.coeffs_v[2] - 1.0).abs() < 1e-9);
        for (i, c) in fa.coeffs_v.iter().enumerate() {
            if i != 2 {
                assert!(c.abs() < 1e-9, "coefficient {i} = {c}");
            }
        }
    }

    #[test]
    fn band_limited_round_trip() {
        let f = |t: f64| {
            [
                0.3 + 0.2 * (TAU * t).cos() - 0.1 * (3.0 * TAU * t).sin(),
                0.5 * (2.0 * TAU * t).sin(),
            ]
        };
        let s = uniform(40);
        let curve: Vec<[f64; 2]> = s.iter().map(|&t| f(t)).collect();
        let fa = encode_fourier_at(&s, &curve, 3).unwrap();
        let back = decode_fourier(&fa, 40);
        for (a, b) in back.iter().zip(&curve) {
            assert!((a[0] - b[0]).abs() < 1e-6 && (a[1] - b[1]).abs() < 1e-6);
        }
    }

    #[test]
    fn detrended_line_is_exact_at_low_order() {
        let curve: Vec<[f64; 2]> = uniform(30).iter().map(|&t| [t, 0.0]).collect();
        let fa = encode_fourier_detrended(&curve, 1).unwrap();
        let back = decode_fourier(&fa, 30);
        let err = back
            .iter()
            .zip(&curve)
            .map(|(a, b)| (a[0] - b[0]).abs() + (a[1] - b[1]).abs())
            .fold(0.0, f64::max);
        assert!(err < 1e-6);
        // plain fit: the constant term carries the mean
        let plain = encode_fourier(&curve, 0).unwrap();
        assert!((plain.coeffs_u[0] - 0.5).abs() < 1e-9);
    }

    #[test]
    fn residual_shrinks_with_order() {
        let curve: Vec<[f64; 2]> = uniform(200)
            .iter()
            .map(|&t| [t, (t * 4.0).exp() / 50.0])
            .collect();
        let err = |k: usize| {
            let fa = encode_fourier_detrended(&curve, k).unwrap();
            decode_fourier(&fa, 200)
                .iter()
                .zip(&curve)
                .map(|(a, b)| (a[1] - b[1]).powi(2))
                .sum::<f64>()
        };
        assert!(err(8) < err(4) && err(4) < err(1));
    }

    #[test]
    fn underdetermined_fit_is_rejected() {
        let curve = [[0.0, 0.0], [1.0, 0.0], [2.0, 0.0]];
        assert!(matches!(
            encode_fourier(&curve, 2),
            Err(Error::Insufficient(_))
        ));
    }

    #[test]
    fn decoding_is_sampling_independent() {
        let fa = FourierArtery {
            order: 2,
            coeffs_u: vec![0.1, 0.2, -0.3, 0.05, 0.0],
            coeffs_v: vec![0.0, 0.0, 1.0, 0.0, 0.4],
            trend_u: [0.0, 1.0],
            trend_v: [0.0; 2],
        };
        let a = decode_fourier(&fa, 100);
        let b = decode_fourier(&fa, 991);
        // s = i/99 appears in the 991-point grid at 10 i
        for i in 0..100 {
            let (p, q) = (a[i], b[10 * i]);
            assert!((p[0] - q[0]).abs() < 1e-12 && (p[1] - q[1]).abs() < 1e-12);
        }
        let zero = FourierArtery {
            order: 1,
            coeffs_u: vec![0.0; 3],
            coeffs_v: vec![0.0; 3],
            trend_u: [0.0; 2],
            trend_v: [0.0; 2],
        };
        assert!(decode_fourier(&zero, 5).iter().all(|p| *p == [0.0, 0.0]));
        let mut constant = zero.clone();
        constant.coeffs_u[0] = 2.0;
        assert!(decode_fourier(&constant, 5)
            .iter()
            .all(|p| *p == [2.0, 0.0]));
    }
}
