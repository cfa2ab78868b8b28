//! Coordinate-wise trimmed mean and plain mean of flat update vectors.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

// Guards ceil/floor against representation error in r·n (0.1·30 is not 3).
const BOUND_EPS: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrimConfig {
    pub trim_ratio: f64,
}

impl TrimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..0.5).contains(&self.trim_ratio) {
            return Err(Error::InvalidConfig(format!(
                "trim ratio must lie in [0, 0.5), got {}",
                self.trim_ratio
            )));
        }
        Ok(())
    }

    pub fn is_feasible(&self, n: usize) -> bool {
        trim_bounds(n, self.trim_ratio).is_ok()
    }
}

/// Returns `(low, high)`: after sorting, the 1-based positions
/// `low + 1 ..= high` are kept, i.e. `⌈rn⌉` values are dropped from the
/// bottom and `n − ⌊(1−r)n⌋` from the top.
pub fn trim_bounds(n: usize, ratio: f64) -> Result<(usize, usize)> {
    TrimConfig { trim_ratio: ratio }.validate()?;
    let nf = n as f64;
    let low = (ratio * nf - BOUND_EPS).ceil().max(0.0) as usize;
    let high = ((1.0 - ratio) * nf + BOUND_EPS).floor() as usize;
    if n == 0 || high < low + 1 {
        return Err(Error::InfeasibleTrim { n, ratio });
    }
    Ok((low, high.min(n)))
}

fn check_lengths<U: AsRef<[f64]>>(updates: &[U]) -> Result<usize> {
    let first = updates.first().ok_or(Error::EmptyAggregation)?.as_ref().len();
    if updates.iter().any(|u| u.as_ref().len() != first) {
        return Err(Error::InvalidInput("update vectors differ in length".into()));
    }
    Ok(first)
}

/// Per coordinate: sort the `n` values, drop the extremes given by
/// [`trim_bounds`] and average what remains. `r = 0` is the arithmetic mean.
pub fn trimmed_mean<U: AsRef<[f64]>>(updates: &[U], ratio: f64) -> Result<Vec<f64>> {
    let dim = check_lengths(updates)?;
    let (low, high) = trim_bounds(updates.len(), ratio)?;
    let kept = (high - low) as f64;
    let mut column = Vec::with_capacity(updates.len());
    Ok((0..dim)
        .map(|j| {
            column.clear();
            column.extend(updates.iter().map(|u| u.as_ref()[j]));
            column.sort_by(f64::total_cmp);
            column[low..high].iter().sum::<f64>() / kept
        })
        .collect())
}

pub fn plain_mean<U: AsRef<[f64]>>(updates: &[U]) -> Result<Vec<f64>> {
    let dim = check_lengths(updates)?;
    let n = updates.len() as f64;
    let mut out = vec![0.0; dim];
    for u in updates {
        out.iter_mut().zip(u.as_ref()).for_each(|(a, b)| *a += b);
    }
    out.iter_mut().for_each(|v| *v /= n);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn examples() {
        assert_eq!(trimmed_mean(&[[1.0], [2.0], [3.0]], 0.0).unwrap(), vec![2.0]);
        assert_eq!(trimmed_mean(&[[1.0], [2.0], [3.0], [4.0], [100.0]], 0.2).unwrap(), vec![3.0]);
        let v = [0.5, -2.0, 7.25];
        for r in [0.0, 0.1, 0.2, 0.3, 0.4] {
            let ups = vec![v; 7];
            assert_eq!(trimmed_mean(&ups, r).unwrap(), v.to_vec());
        }
    }

    #[test]
    fn bounds_follow_ceil_and_floor() {
        assert_eq!(trim_bounds(5, 0.2).unwrap(), (1, 4));
        assert_eq!(trim_bounds(30, 0.1).unwrap(), (3, 27));
        assert_eq!(trim_bounds(3, 0.2).unwrap(), (1, 2));
        assert_eq!(trim_bounds(1, 0.0).unwrap(), (0, 1));
        assert!(matches!(trim_bounds(2, 0.2), Err(Error::InfeasibleTrim { .. })));
        assert!(matches!(trim_bounds(1, 0.1), Err(Error::InfeasibleTrim { .. })));
        assert!(trim_bounds(10, 0.5).is_err());
    }

    #[test]
    fn errors() {
        let empty: [[f64; 1]; 0] = [];
        assert!(matches!(trimmed_mean(&empty, 0.0), Err(Error::EmptyAggregation)));
        assert!(matches!(plain_mean(&empty), Err(Error::EmptyAggregation)));
        assert!(matches!(
            trimmed_mean(&[vec![1.0], vec![1.0, 2.0]], 0.0),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn plain_mean_examples() {
        assert_eq!(plain_mean(&[[1.5, -2.0]]).unwrap(), vec![1.5, -2.0]);
        assert_eq!(plain_mean(&[[1.5, -2.0], [-1.5, 2.0]]).unwrap(), vec![0.0, 0.0]);
        let ups: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64 * 0.37, (i * i) as f64 - 3.0]).collect();
        let m = plain_mean(&ups).unwrap();
        for j in 0..2 {
            let mut s = 0.0;
            for u in &ups {
                s += u[j];
            }
            assert!((m[j] - s / 10.0).abs() < 1e-12);
        }
    }

    proptest! {
        #[test]
        fn permutation_invariant(mut ups in proptest::collection::vec(proptest::collection::vec(-100.0f64..100.0, 3), 5..20), r in prop_oneof![Just(0.0), Just(0.1), Just(0.2)]) {
            let a = trimmed_mean(&ups, r).unwrap();
            ups.reverse();
            ups.rotate_left(2);
            prop_assert_eq!(trimmed_mean(&ups, r).unwrap(), a);
        }

        #[test]
        fn bounded_influence(honest in proptest::collection::vec(-1.0f64..1.0, 4..30), magnitude in 1e3f64..1e9, r in prop_oneof![Just(0.1), Just(0.2), Just(0.3)]) {
            // largest t with t <= ceil(r·(h + 2t)) - 1
            let h = honest.len();
            let per_tail = (0..h)
                .take_while(|&t| {
                    let n = h + 2 * t;
                    trim_bounds(n, r).map(|(low, _)| t + 1 <= low).unwrap_or(false)
                })
                .last();
            prop_assume!(per_tail.is_some());
            let per_tail = per_tail.unwrap();
            let mut ups: Vec<[f64; 1]> = honest.iter().map(|&v| [v]).collect();
            for _ in 0..per_tail {
                ups.push([magnitude]);
                ups.push([-magnitude]);
            }
            let lo = honest.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = honest.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let out = trimmed_mean(&ups, r).unwrap()[0];
            prop_assert!(out >= lo - 1e-12 && out <= hi + 1e-12, "{} not in [{}, {}]", out, lo, hi);
        }
    }
}
