//! Negative Cox log partial likelihood with Breslow ties.
//!
//! loss = -(1/|E|) * sum_{i in E} [ r_i - log sum_{j : t_j >= t_i} exp(r_j) ]
//!
//! where E is the set of observed events. The risk set is inclusive, so
//! tied times sit in each other's risk sets.

use crate::error::{Error, Result};
use crate::tensor::{CustomOp, Real, Shape, Tape, Var};

fn check_inputs(risks: &[f64], times: &[f64], events: &[bool]) -> Result<usize> {
    if risks.len() != times.len() || risks.len() != events.len() {
        return Err(Error::shape("cox_loss", &[risks.len()], &[times.len(), events.len()]));
    }
    let n_events = events.iter().filter(|&&e| e).count();
    if n_events == 0 {
        return Err(Error::NoEvents);
    }
    Ok(n_events)
}

/// Per-event log risk-set denominators, shifted by the global max risk.
fn log_risk_set_sums(risks: &[f64], times: &[f64], events: &[bool]) -> Vec<Option<f64>> {
    let max = risks.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    (0..risks.len())
        .map(|i| {
            events[i].then(|| {
                let s: f64 = (0..risks.len())
                    .filter(|&j| times[j] >= times[i])
                    .map(|j| (risks[j] - max).exp())
                    .sum();
                s.ln() + max
            })
        })
        .collect()
}

pub fn cox_nll(risks: &[f64], times: &[f64], events: &[bool]) -> Result<f64> {
    let n_events = check_inputs(risks, times, events)?;
    let log_sums = log_risk_set_sums(risks, times, events);
    let total: f64 = log_sums
        .iter()
        .zip(risks)
        .filter_map(|(ls, r)| ls.map(|ls| r - ls))
        .sum();
    Ok(-total / n_events as f64)
}

/// d loss / d risk_k.
pub fn cox_gradient(risks: &[f64], times: &[f64], events: &[bool]) -> Result<Vec<f64>> {
    let n_events = check_inputs(risks, times, events)? as f64;
    let log_sums = log_risk_set_sums(risks, times, events);
    Ok((0..risks.len())
        .map(|k| {
            let share: f64 = (0..risks.len())
                .filter_map(|i| log_sums[i].filter(|_| times[k] >= times[i]))
                .map(|ls| (risks[k] - ls).exp())
                .sum();
            let own = if events[k] { 1.0 } else { 0.0 };
            -(own - share) / n_events
        })
        .collect())
}

struct CoxPartialLikelihood {
    times: Vec<f64>,
    events: Vec<bool>,
}

impl CustomOp for CoxPartialLikelihood {
    fn name(&self) -> &'static str {
        "cox_loss"
    }

    fn backward(&self, inputs: &[Vec<f64>], _output: &[f64], grad_out: &[f64]) -> Vec<Vec<f64>> {
        let g = cox_gradient(&inputs[0], &self.times, &self.events).expect("inputs were validated in the forward pass");
        vec![g.into_iter().map(|v| v * grad_out[0]).collect()]
    }
}

/// Scalar loss on the tape from a vector of per-patient risks.
pub fn cox_loss<T: Real>(tape: &mut Tape<T>, risks: Var, times: &[f64], events: &[bool]) -> Result<Var> {
    let r = tape.value_f64(risks);
    let value = cox_nll(&r, times, events)?;
    tape.custom(
        &[risks],
        Shape::scalar(),
        vec![value],
        Box::new(CoxPartialLikelihood {
            times: times.to_vec(),
            events: events.to_vec(),
        }),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_function;
    use proptest::prelude::*;

    #[test]
    fn two_events_at_zero_risk() {
        let v = cox_nll(&[0.0, 0.0], &[1.0, 2.0], &[true, true]).unwrap();
        assert!((v - std::f64::consts::LN_2 / 2.0).abs() < 1e-12);
        assert!((v - 0.3466).abs() < 1e-4);
    }

    #[test]
    fn two_events_closed_form() {
        let (r1, r2) = (0.7f64, -1.3f64);
        let expected = -0.5 * ((r1 - (r1.exp() + r2.exp()).ln()) + (r2 - r2));
        let v = cox_nll(&[r1, r2], &[1.0, 2.0], &[true, true]).unwrap();
        assert!((v - expected).abs() < 1e-12);
    }

    #[test]
    fn single_event_with_later_censoring() {
        let r = [0.4, -0.2, 1.1];
        let v = cox_nll(&r, &[1.0, 3.0, 4.0], &[true, false, false]).unwrap();
        let lse = r.iter().map(|x| x.exp()).sum::<f64>().ln();
        assert!((v + (0.4 - lse)).abs() < 1e-12);
    }

    #[test]
    fn tied_event_times_share_risk_sets() {
        let r = [0.2, 0.5];
        let v = cox_nll(&r, &[2.0, 2.0], &[true, true]).unwrap();
        let lse = (0.2f64.exp() + 0.5f64.exp()).ln();
        assert!((v + 0.5 * ((0.2 - lse) + (0.5 - lse))).abs() < 1e-12);
    }

    #[test]
    fn no_events_is_an_error() {
        assert!(matches!(
            cox_nll(&[0.0, 1.0], &[1.0, 2.0], &[false, false]),
            Err(Error::NoEvents)
        ));
        assert!(cox_nll(&[0.0], &[1.0, 2.0], &[true, true]).is_err());
    }

    #[test]
    fn tape_loss_gradient_matches_finite_differences() {
        let times = [3.0, 1.0, 4.0, 1.0, 5.0, 2.5];
        let events = [true, false, true, true, false, true];
        let r = check_function(
            "cox_loss",
            &[(Shape::new([6]), vec![0.3, -1.0, 0.8, 0.1, -0.4, 1.5])],
            |t, v| cox_loss(t, v[0], &times, &events),
        )
        .unwrap();
        assert!(r.passes(1e-3), "{r:?}");
    }

    proptest! {
        #[test]
        fn shift_invariant(r in proptest::collection::vec(-3.0f64..3.0, 2..12), c in -50.0f64..50.0, seed in any::<u64>()) {
            let n = r.len();
            let times: Vec<f64> = (0..n).map(|i| ((i as u64 * 7 + seed) % 11) as f64 + 1.0).collect();
            let mut events: Vec<bool> = (0..n).map(|i| (seed >> i) & 1 == 1).collect();
            events[0] = true;
            let shifted: Vec<f64> = r.iter().map(|x| x + c).collect();
            let a = cox_nll(&r, &times, &events).unwrap();
            let b = cox_nll(&shifted, &times, &events).unwrap();
            prop_assert!((a - b).abs() < 1e-6);
        }

        #[test]
        fn raising_earliest_event_risk_lowers_loss(r in proptest::collection::vec(-3.0f64..3.0, 2..10), bump in 0.01f64..2.0) {
            // patient 0 has the strictly earliest time, so it appears in no
            // other event's risk set
            let n = r.len();
            let times: Vec<f64> = (0..n).map(|i| i as f64 + 1.0).collect();
            let events = vec![true; n];
            let mut raised = r.clone();
            raised[0] += bump;
            prop_assert!(cox_nll(&raised, &times, &events).unwrap() < cox_nll(&r, &times, &events).unwrap());
        }
    }
}
