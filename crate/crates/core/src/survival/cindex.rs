//! Harrell's concordance index.
//!
//! A pair (i, j) is comparable when t_i < t_j and i had an observed event.
//! It is concordant when risk_i > risk_j; equal risks count one half.
//! Counting runs in O(n log n) with a Fenwick tree over risk ranks.

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ConcordanceCounts {
    pub concordant: u64,
    pub tied: u64,
    pub comparable: u64,
}

impl ConcordanceCounts {
    pub fn index(&self) -> Result<f64> {
        if self.comparable == 0 {
            return Err(Error::NoComparablePairs);
        }
        Ok((2 * self.concordant + self.tied) as f64 / (2 * self.comparable) as f64)
    }
}

struct Fenwick(Vec<u64>);

impl Fenwick {
    fn new(n: usize) -> Self {
        Fenwick(vec![0; n + 1])
    }

    fn add(&mut self, idx: usize) {
        let mut i = idx + 1;
        while i < self.0.len() {
            self.0[i] += 1;
            i += i & i.wrapping_neg();
        }
    }

    /// Count of inserted ranks < `idx`.
    fn prefix(&self, idx: usize) -> u64 {
        let mut i = idx;
        let mut total = 0;
        while i > 0 {
            total += self.0[i];
            i -= i & i.wrapping_neg();
        }
        total
    }
}

pub fn concordance_counts(risks: &[f64], times: &[f64], events: &[bool]) -> Result<ConcordanceCounts> {
    let n = risks.len();
    if times.len() != n || events.len() != n {
        return Err(Error::shape("c_index", &[n], &[times.len(), events.len()]));
    }
    if risks.iter().chain(times).any(|v| v.is_nan()) {
        return Err(Error::InvalidArgument("c_index got NaN".into()));
    }
    let mut sorted = risks.to_vec();
    sorted.sort_by(f64::total_cmp);
    sorted.dedup();
    let rank = |r: f64| sorted.partition_point(|&v| v < r);

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| times[b].total_cmp(&times[a]));

    let mut tree = Fenwick::new(sorted.len());
    let mut inserted = 0u64;
    let mut counts = ConcordanceCounts::default();
    let mut start = 0;
    while start < n {
        let mut end = start;
        while end < n && times[order[end]] == times[order[start]] {
            end += 1;
        }
        // tree holds exactly the patients with strictly later times
        for &i in &order[start..end] {
            if events[i] {
                let r = rank(risks[i]);
                let below = tree.prefix(r);
                let at = tree.prefix(r + 1) - below;
                counts.concordant += below;
                counts.tied += at;
                counts.comparable += inserted;
            }
        }
        for &i in &order[start..end] {
            tree.add(rank(risks[i]));
            inserted += 1;
        }
        start = end;
    }
    Ok(counts)
}

pub fn c_index(risks: &[f64], times: &[f64], events: &[bool]) -> Result<f64> {
    concordance_counts(risks, times, events)?.index()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn brute_force(risks: &[f64], times: &[f64], events: &[bool]) -> ConcordanceCounts {
        let mut c = ConcordanceCounts::default();
        for i in 0..risks.len() {
            for j in 0..risks.len() {
                if events[i] && times[i] < times[j] {
                    c.comparable += 1;
                    if risks[i] > risks[j] {
                        c.concordant += 1;
                    } else if risks[i] == risks[j] {
                        c.tied += 1;
                    }
                }
            }
        }
        c
    }

    #[test]
    fn reverse_ordered_risks_are_perfect() {
        let times = [1.0, 2.0, 3.0, 4.0];
        let risks = [4.0, 3.0, 2.0, 1.0];
        assert_eq!(c_index(&risks, &times, &[true; 4]).unwrap(), 1.0);
        assert_eq!(c_index(&[1.0, 2.0, 3.0, 4.0], &times, &[true; 4]).unwrap(), 0.0);
    }

    #[test]
    fn equal_risks_give_one_half() {
        let times = [1.0, 2.0, 3.0, 4.0, 5.0];
        assert_eq!(
            c_index(&[0.3; 5], &times, &[true, false, true, true, false]).unwrap(),
            0.5
        );
    }

    #[test]
    fn six_patient_mixed_censoring() {
        let risks = [0.9, 0.1, 0.5, 0.5, -0.3, 1.2];
        let times = [2.0, 5.0, 3.0, 3.0, 8.0, 1.0];
        let events = [true, false, true, false, true, false];
        let fast = concordance_counts(&risks, &times, &events).unwrap();
        assert_eq!(fast, brute_force(&risks, &times, &events));
        // by hand: i=0 (t=2) vs t>2: {1,2,3,4}: risks .1,.5,.5,-.3 all below .9 -> 4
        // i=2 (t=3) vs {1,4}: .1 , -.3 below .5 -> 2 ; i=4 (t=8): none
        assert_eq!(
            fast,
            ConcordanceCounts {
                concordant: 6,
                tied: 0,
                comparable: 6
            }
        );
    }

    #[test]
    fn no_comparable_pairs_is_an_error() {
        let r = c_index(&[1.0, 2.0], &[1.0, 2.0], &[false, false]);
        assert!(matches!(r, Err(Error::NoComparablePairs)));
        // tied times are not comparable
        assert!(c_index(&[1.0, 2.0], &[3.0, 3.0], &[true, true]).is_err());
    }

    proptest! {
        #[test]
        fn matches_brute_force(
            data in proptest::collection::vec((0u8..6, 0u8..5, any::<bool>()), 2..20)
        ) {
            let risks: Vec<f64> = data.iter().map(|d| d.0 as f64 * 0.5).collect();
            let times: Vec<f64> = data.iter().map(|d| d.1 as f64 + 1.0).collect();
            let events: Vec<bool> = data.iter().map(|d| d.2).collect();
            let fast = concordance_counts(&risks, &times, &events).unwrap();
            prop_assert_eq!(fast, brute_force(&risks, &times, &events));
        }

        #[test]
        fn negation_maps_v_to_one_minus_v(
            data in proptest::collection::vec((-4.0f64..4.0, 0u8..6, any::<bool>()), 3..20)
        ) {
            let risks: Vec<f64> = data.iter().map(|d| (d.0 * 4.0).round() / 4.0).collect();
            let times: Vec<f64> = data.iter().map(|d| d.1 as f64).collect();
            let events: Vec<bool> = data.iter().map(|d| d.2).collect();
            let a = concordance_counts(&risks, &times, &events).unwrap();
            let neg: Vec<f64> = risks.iter().map(|r| -r).collect();
            let b = concordance_counts(&neg, &times, &events).unwrap();
            // exact at the level of counts: discordant pairs become concordant
            prop_assert_eq!(b.tied, a.tied);
            prop_assert_eq!(b.comparable, a.comparable);
            prop_assert_eq!(b.concordant, a.comparable - a.concordant - a.tied);
            if let Ok(v) = a.index() {
                prop_assert!((b.index().unwrap() - (1.0 - v)).abs() < 1e-15);
            }
        }

        #[test]
        fn invariant_under_increasing_transforms(
            data in proptest::collection::vec((-3.0f64..3.0, 0u8..6, any::<bool>()), 3..20)
        ) {
            let risks: Vec<f64> = data.iter().map(|d| d.0).collect();
            let times: Vec<f64> = data.iter().map(|d| d.1 as f64).collect();
            let events: Vec<bool> = data.iter().map(|d| d.2).collect();
            if let Ok(v) = c_index(&risks, &times, &events) {
                let warped: Vec<f64> = risks.iter().map(|r| r.exp() * 3.0 + r.powi(3)).collect();
                prop_assert_eq!(c_index(&warped, &times, &events).unwrap(), v);
            }
        }
    }
}
