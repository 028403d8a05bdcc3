//! Small numeric helpers shared across modules.

/// Exactly-rounded floating point accumulator.
///
/// Keeps a non-overlapping expansion of partial sums (Shewchuk's algorithm),
/// so the value returned by [`ExactSum::value`] is the correctly rounded
/// result of the exact real sum of everything added so far, independent of
/// the order of additions.
#[derive(Clone, Debug, Default)]
pub struct ExactSum {
    partials: Vec<f64>,
}

impl ExactSum {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, mut x: f64) {
        let mut i = 0;
        for j in 0..self.partials.len() {
            let mut y = self.partials[j];
            if x.abs() < y.abs() {
                std::mem::swap(&mut x, &mut y);
            }
            let hi = x + y;
            let lo = y - (hi - x);
            if lo != 0.0 {
                self.partials[i] = lo;
                i += 1;
            }
            x = hi;
        }
        self.partials.truncate(i);
        self.partials.push(x);
    }

    pub fn sub(&mut self, x: f64) {
        self.add(-x);
    }

    pub fn add_sum(&mut self, other: &ExactSum) {
        for &p in &other.partials {
            self.add(p);
        }
    }

    /// Correctly rounded value of the accumulated sum.
    pub fn value(&self) -> f64 {
        // Same final rounding step as Python's math.fsum.
        let p = &self.partials;
        if p.is_empty() {
            return 0.0;
        }
        let mut n = p.len() - 1;
        let mut hi = p[n];
        let mut lo = 0.0;
        while n > 0 {
            let x = hi;
            n -= 1;
            let y = p[n];
            hi = x + y;
            let yr = hi - x;
            lo = y - yr;
            if lo != 0.0 {
                break;
            }
        }
        if n > 0 && ((lo < 0.0 && p[n - 1] < 0.0) || (lo > 0.0 && p[n - 1] > 0.0)) {
            let y = lo * 2.0;
            let x = hi + y;
            let yr = x - hi;
            if y == yr {
                hi = x;
            }
        }
        hi
    }
}

impl FromIterator<f64> for ExactSum {
    fn from_iter<I: IntoIterator<Item = f64>>(iter: I) -> Self {
        let mut s = ExactSum::new();
        for x in iter {
            s.add(x);
        }
        s
    }
}

/// Correctly rounded sum of a sequence.
pub fn exact_sum<I: IntoIterator<Item = f64>>(values: I) -> f64 {
    values.into_iter().collect::<ExactSum>().value()
}

/// Nearest-rank percentile: the `ceil(pct * n / 100)`-th order statistic
/// (1-based), computed in integer arithmetic.
///
/// `pct` must lie in `1..=100` and `values` must be nonempty.
pub fn nearest_rank_percentile(values: &[f64], pct: u32) -> f64 {
    assert!(!values.is_empty(), "percentile of an empty sample");
    assert!((1..=100).contains(&pct));
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let n = sorted.len();
    let rank = (pct as usize * n).div_ceil(100).clamp(1, n);
    sorted[rank - 1]
}

/// Shannon entropy (nats) of a histogram of counts.
pub fn entropy_nats<I: IntoIterator<Item = usize>>(counts: I) -> f64 {
    let counts: Vec<usize> = counts.into_iter().filter(|&c| c > 0).collect();
    let total: usize = counts.iter().sum();
    if total == 0 {
        return 0.0;
    }
    let total = total as f64;
    let h = -counts
        .iter()
        .map(|&c| {
            let p = c as f64 / total;
            p * p.ln()
        })
        .sum::<f64>();
    h.max(0.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn exact_sum_cancels_catastrophically() {
        let xs = [1e100, 1.0, -1e100, 1e-20];
        assert_eq!(exact_sum(xs), 1.0 + 1e-20);
        let naive: f64 = xs.iter().sum();
        assert_eq!(naive, 1e-20);
    }

    #[test]
    fn percentile_nearest_rank() {
        let v: Vec<f64> = (1..=10).map(f64::from).collect();
        assert_eq!(nearest_rank_percentile(&v, 90), 9.0);
        assert_eq!(nearest_rank_percentile(&v, 100), 10.0);
        assert_eq!(nearest_rank_percentile(&[3.0], 90), 3.0);
        // ceil(90 * 60 / 100) = 54
        let w: Vec<f64> = (0..60).map(f64::from).collect();
        assert_eq!(nearest_rank_percentile(&w, 90), 53.0);
    }

    #[test]
    fn entropy_of_two_equal_bins_is_ln2() {
        assert!((entropy_nats([5, 5]) - std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(entropy_nats([7]), 0.0);
        assert_eq!(entropy_nats(Vec::<usize>::new()), 0.0);
    }

    proptest! {
        #[test]
        fn exact_sum_is_order_independent(mut xs in prop::collection::vec(-1e6f64..1e6, 0..60), seed in any::<u64>()) {
            let a = exact_sum(xs.iter().copied());
            // deterministic shuffle
            let mut s = seed | 1;
            for i in (1..xs.len()).rev() {
                s ^= s << 13; s ^= s >> 7; s ^= s << 17;
                xs.swap(i, (s % (i as u64 + 1)) as usize);
            }
            let b = exact_sum(xs.iter().copied());
            prop_assert_eq!(a.to_bits(), b.to_bits());
        }
    }
}
