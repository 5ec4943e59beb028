//! Compensated summation shared by the reductions that must be bit-stable
//! across thread counts.

/// Neumaier's variant of Kahan summation.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct NeumaierSum {
    sum: f64,
    comp: f64,
}

impl NeumaierSum {
    #[inline]
    pub fn add(&mut self, v: f64) {
        let t = self.sum + v;
        if self.sum.abs() >= v.abs() {
            self.comp += (self.sum - t) + v;
        } else {
            self.comp += (v - t) + self.sum;
        }
        self.sum = t;
    }

    /// Fold another partial sum in, keeping both compensation terms.
    pub fn merge(&mut self, other: NeumaierSum) {
        self.add(other.sum);
        self.add(other.comp);
    }

    pub fn value(&self) -> f64 {
        self.sum + self.comp
    }
}

impl FromIterator<f64> for NeumaierSum {
    fn from_iter<I: IntoIterator<Item = f64>>(iter: I) -> Self {
        let mut s = NeumaierSum::default();
        for v in iter {
            s.add(v);
        }
        s
    }
}

impl FromIterator<NeumaierSum> for NeumaierSum {
    fn from_iter<I: IntoIterator<Item = NeumaierSum>>(iter: I) -> Self {
        let mut s = NeumaierSum::default();
        for p in iter {
            s.merge(p);
        }
        s
    }
}

/// Compensated sum of a slice.
pub fn stable_sum(values: &[f64]) -> f64 {
    values.iter().copied().collect::<NeumaierSum>().value()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn recovers_cancelled_terms() {
        let naive: f64 = [1.0, 1e100, 1.0, -1e100].iter().sum();
        assert_eq!(naive, 0.0);
        assert_eq!(stable_sum(&[1.0, 1e100, 1.0, -1e100]), 2.0);
    }

    #[test]
    fn merged_partials_match_single_pass() {
        let v: Vec<f64> = (0..1000).map(|i| 0.1 * i as f64).collect();
        let whole = stable_sum(&v);
        let parts: NeumaierSum = v
            .chunks(37)
            .map(|c| c.iter().copied().collect::<NeumaierSum>())
            .collect();
        assert!((parts.value() - whole).abs() <= 1e-12 * whole);
    }
}
