//! Agreement statistics between two feature vectors.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};
use crate::features::{FeatureRow, FEATURES};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Correlation {
    pub r: f64,
    pub p: f64,
    pub n: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TTest {
    pub t: f64,
    pub df: f64,
    pub p: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    /// 100 (a - b) / b per entry.
    pub percent_difference: Vec<f64>,
    pub correlation: Option<Correlation>,
    pub t_test: Option<TTest>,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn two_sided(t: f64, df: f64) -> f64 {
    if t.is_infinite() {
        return 0.0;
    }
    let dist = StudentsT::new(0.0, 1.0, df).expect("positive degrees of freedom");
    (2.0 * dist.sf(t.abs())).clamp(0.0, 1.0)
}

/// Pearson correlation with a two-sided p from Student's t on n - 2 df.
pub fn pearson(a: &[f64], b: &[f64]) -> Result<Correlation> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} vs {} values",
            a.len(),
            b.len()
        )));
    }
    let n = a.len();
    if n < 3 {
        return Err(Error::Insufficient(format!(
            "correlation needs 3 pairs, got {n}"
        )));
    }
    let (ma, mb) = (mean(a), mean(b));
    let sab: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let saa: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let sbb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    if saa == 0.0 || sbb == 0.0 {
        return Err(Error::Undefined("correlation of a constant vector".into()));
    }
    let r = (sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0);
    let df = (n - 2) as f64;
    let p = if n == 3 && r.abs() == 1.0 {
        0.0
    } else {
        two_sided(r * (df / (1.0 - r * r)).sqrt(), df)
    };
    Ok(Correlation { r, p, n })
}

/// Unpaired two-sample t-test with unequal variances (Welch).
pub fn welch_t_test(a: &[f64], b: &[f64]) -> Result<TTest> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::Insufficient("each group needs two values".into()));
    }
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (ma, mb) = (mean(a), mean(b));
    let va = a.iter().map(|x| (x - ma).powi(2)).sum::<f64>() / (na - 1.0);
    let vb = b.iter().map(|x| (x - mb).powi(2)).sum::<f64>() / (nb - 1.0);
    if va == 0.0 && vb == 0.0 {
        return Err(Error::Undefined("both groups have zero variance".into()));
    }
    let (qa, qb) = (va / na, vb / nb);
    let t = (ma - mb) / (qa + qb).sqrt();
    let df = (qa + qb).powi(2) / (qa * qa / (na - 1.0) + qb * qb / (nb - 1.0));
    Ok(TTest {
        t,
        df,
        p: two_sided(t, df),
    })
}

/// Percent differences, correlation and t-test of `a` against reference `b`.
/// Statistics that are undefined for the inputs are left empty.
pub fn compare(a: &[f64], b: &[f64]) -> Result<ComparisonReport> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} vs {} values",
            a.len(),
            b.len()
        )));
    }
    let percent_difference = a.iter().zip(b).map(|(x, y)| 100.0 * (x - y) / y).collect();
    Ok(ComparisonReport {
        percent_difference,
        correlation: pearson(a, b).ok(),
        t_test: welch_t_test(a, b).ok(),
    })
}

/// One artery's signed percent difference per feature; `None` where
/// either side has no value or the reference is zero.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArteryDifference {
    pub artery: String,
    pub percent_difference: BTreeMap<String, Option<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureAgreement {
    pub pairs: usize,
    pub max_abs_percent: Option<f64>,
    pub correlation: Option<Correlation>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub arteries: Vec<ArteryDifference>,
    pub features: BTreeMap<String, FeatureAgreement>,
}

/// Join measured rows with reference rows by artery name and compare every
/// feature. A present row on either side without a same-named row on the
/// other is a join error.
pub fn validate_features(
    measured: &[FeatureRow],
    reference: &[FeatureRow],
) -> Result<ValidationReport> {
    let by_name = |rows: &[FeatureRow]| -> BTreeMap<String, FeatureRow> {
        rows.iter().map(|r| (r.artery.clone(), r.clone())).collect()
    };
    let (m, r) = (by_name(measured), by_name(reference));
    let mut unmatched: Vec<String> = m
        .values()
        .filter(|x| x.present && !r.contains_key(&x.artery))
        .chain(
            r.values()
                .filter(|x| x.present && !m.contains_key(&x.artery)),
        )
        .map(|x| x.artery.clone())
        .collect();
    if !unmatched.is_empty() {
        unmatched.sort();
        return Err(Error::Join(unmatched));
    }

    let mut arteries = Vec::new();
    let mut pairs: BTreeMap<&str, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for (name, truth) in &r {
        let Some(got) = m.get(name) else { continue };
        if !(truth.present && got.present) {
            continue;
        }
        let mut pd = BTreeMap::new();
        for f in FEATURES {
            let d = match (got.get(f), truth.get(f)) {
                (Some(a), Some(b)) => {
                    let e = pairs.entry(f).or_default();
                    e.0.push(a);
                    e.1.push(b);
                    (b != 0.0).then(|| 100.0 * (a - b) / b)
                }
                _ => None,
            };
            pd.insert(f.to_string(), d);
        }
        arteries.push(ArteryDifference {
            artery: name.clone(),
            percent_difference: pd,
        });
    }
    let features = FEATURES
        .iter()
        .map(|&f| {
            let (a, b) = pairs.remove(f).unwrap_or_default();
            let max_abs_percent = arteries
                .iter()
                .filter_map(|x| x.percent_difference[f])
                .map(f64::abs)
                .fold(None, |acc: Option<f64>, v| {
                    Some(acc.map_or(v, |m| m.max(v)))
                });
            (
                f.to_string(),
                FeatureAgreement {
                    pairs: a.len(),
                    max_abs_percent,
                    correlation: pearson(&a, &b).ok(),
                },
            )
        })
        .collect();
    Ok(ValidationReport { arteries, features })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn row(name: &str, len: f64, r: f64) -> FeatureRow {
        FeatureRow {
            present: true,
            total_length: Some(len),
            mean_radius: Some(r),
            ..FeatureRow::absent(name)
        }
    }

    #[test]
    fn validation_self_join_is_exact() {
        let rows = vec![
            row("a", 10.0, 1.0),
            row("b", 20.0, 1.5),
            row("c", 35.0, 2.5),
            FeatureRow::absent("d"),
        ];
        let rep = validate_features(&rows, &rows).unwrap();
        assert_eq!(rep.arteries.len(), 3);
        let len = &rep.features["total_length"];
        assert_eq!(len.pairs, 3);
        assert_eq!(len.max_abs_percent, Some(0.0));
        assert_relative_eq!(len.correlation.unwrap().r, 1.0, epsilon = 1e-12);
        assert_eq!(rep.features["tortuosity"].pairs, 0);
        assert!(rep.features["tortuosity"].correlation.is_none());
    }

    #[test]
    fn validation_percent_and_join_errors() {
        let truth = vec![row("a", 10.0, 1.0), row("b", 20.0, 2.0)];
        let got = vec![row("a", 11.0, 1.0), row("b", 19.0, 2.0)];
        let rep = validate_features(&got, &truth).unwrap();
        assert_relative_eq!(
            rep.arteries[0].percent_difference["total_length"].unwrap(),
            10.0,
            epsilon = 1e-12
        );
        assert_relative_eq!(
            rep.features["total_length"].max_abs_percent.unwrap(),
            10.0,
            epsilon = 1e-12
        );
        let extra = vec![
            row("a", 11.0, 1.0),
            row("b", 19.0, 2.0),
            row("zz", 1.0, 1.0),
        ];
        match validate_features(&extra, &truth) {
            Err(Error::Join(names)) => assert_eq!(names, vec!["zz".to_string()]),
            other => panic!("{other:?}"),
        }
        // an absent row with no partner is fine
        let mut absent = got.clone();
        absent.push(FeatureRow::absent("zz"));
        assert!(validate_features(&absent, &truth).is_ok());
    }

    #[test]
    fn identical_vectors() {
        let a = [1.0, 2.5, 4.0, 8.0];
        let c = compare(&a, &a).unwrap();
        assert!(c.percent_difference.iter().all(|&d| d == 0.0));
        assert_relative_eq!(c.correlation.unwrap().r, 1.0, epsilon = 1e-15);
        assert_eq!(c.correlation.unwrap().p, 0.0);
    }

    #[test]
    fn anti_correlated() {
        let r = pearson(&[1.0, 2.0, 3.0, 4.0], &[8.0, 6.0, 4.0, 2.0]).unwrap();
        assert_relative_eq!(r.r, -1.0, epsilon = 1e-15);
    }

    #[test]
    fn pearson_p_value_reference() {
        // scipy.stats.pearsonr([1,2,3,4,5],[2,1,4,3,5]) -> (0.8, 0.10408803866182788)
        let c = pearson(&[1.0, 2.0, 3.0, 4.0, 5.0], &[2.0, 1.0, 4.0, 3.0, 5.0]).unwrap();
        assert_relative_eq!(c.r, 0.8, epsilon = 1e-12);
        assert_relative_eq!(c.p, 0.104_088_038_661_827_88, epsilon = 1e-9);
    }

    #[test]
    fn welch_reference() {
        // scipy.stats.ttest_ind([1..5], [2..6], equal_var=False) -> t = -1, df = 8, p = 0.34659
        let t = welch_t_test(&[1.0, 2.0, 3.0, 4.0, 5.0], &[2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        assert_relative_eq!(t.t, -1.0, epsilon = 1e-12);
        assert_relative_eq!(t.df, 8.0, epsilon = 1e-12);
        assert_relative_eq!(t.p, 0.346_593_507_052_880_1, epsilon = 1e-9);
        // unequal variances and sizes:
        // ttest_ind([1,2,3,4,5,6], [10,20,25], equal_var=False) -> t = -4.153..., p = 0.04...
        let t = welch_t_test(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[10.0, 20.0, 25.0]).unwrap();
        let (va, vb): (f64, f64) = (3.5 / 6.0, 175.0 / 3.0 / 3.0);
        assert_relative_eq!(t.t, (3.5 - 55.0 / 3.0) / (va + vb).sqrt(), epsilon = 1e-12);
    }

    #[test]
    fn degenerate_inputs() {
        assert!(matches!(
            pearson(&[1.0, 2.0], &[1.0, 2.0]),
            Err(Error::Insufficient(_))
        ));
        assert!(matches!(
            welch_t_test(&[1.0, 1.0], &[2.0, 2.0]),
            Err(Error::Undefined(_))
        ));
    }
}
