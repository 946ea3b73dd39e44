use proptest::prelude::*;
use survfuse::survival::{concordance_counts, concordance_index, cox_gradient, cox_loss, CoxBatch};
use survfuse::Error;

/// All-pairs reference: pair (i, j) is comparable when `t_i < t_j` and `i`
/// had the event; concordant when `θ_i > θ_j`, half credit on a tie.
fn brute_force_c(theta: &[f64], times: &[f64], events: &[bool]) -> Option<f64> {
    let (mut num, mut den) = (0u64, 0u64);
    for i in 0..theta.len() {
        if !events[i] {
            continue;
        }
        for j in 0..theta.len() {
            if times[i] < times[j] {
                den += 2;
                if theta[i] > theta[j] {
                    num += 2;
                } else if theta[i] == theta[j] {
                    num += 1;
                }
            }
        }
    }
    (den > 0).then(|| num as f64 / den as f64)
}

/// Direct evaluation of the negated partial likelihood with Breslow ties.
fn naive_cox(theta: &[f64], times: &[f64], events: &[bool]) -> f64 {
    let mut loss = 0.0;
    for k in 0..theta.len() {
        if events[k] {
            let s: f64 = (0..theta.len()).filter(|&j| times[j] >= times[k]).map(|j| theta[j].exp()).sum();
            loss += s.ln() - theta[k];
        }
    }
    loss
}

fn instance(max_n: usize) -> impl Strategy<Value = (Vec<f64>, Vec<f64>, Vec<bool>)> {
    (1..=max_n).prop_flat_map(|n| {
        (
            // coarse grid so score ties happen
            prop::collection::vec((-6i32..=6).prop_map(|v| f64::from(v) * 0.5), n),
            prop::collection::vec((1u32..=6).prop_map(f64::from), n),
            prop::collection::vec(any::<bool>(), n),
        )
    })
}

fn cox_instance() -> impl Strategy<Value = (Vec<f64>, Vec<f64>, Vec<bool>)> {
    (1usize..=32).prop_flat_map(|n| {
        (
            prop::collection::vec(-4.0f64..4.0, n),
            prop::collection::vec((1u32..=10).prop_map(f64::from), n),
            prop::collection::vec(any::<bool>(), n),
        )
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn concordance_matches_all_pairs((theta, times, events) in instance(20)) {
        match (brute_force_c(&theta, &times, &events), concordance_index(&theta, &times, &events)) {
            (Some(expected), Ok(got)) => prop_assert_eq!(expected, got),
            (None, Err(Error::Undefined(_))) => {}
            (e, g) => prop_assert!(false, "oracle {:?} vs {:?}", e, g),
        }
    }
}

proptest! {
    #[test]
    fn concordance_reverses_under_negation((theta, times, events) in instance(20)) {
        let neg: Vec<f64> = theta.iter().map(|v| -v).collect();
        if let (Ok(a), Ok(b)) = (concordance_index(&theta, &times, &events), concordance_index(&neg, &times, &events)) {
            prop_assert!((a + b - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn concordance_ignores_monotone_transforms((theta, times, events) in instance(20)) {
        let warped: Vec<f64> = theta.iter().map(|v| (0.7 * v).exp() * 3.0 - 1.0).collect();
        let a = concordance_counts(&theta, &times, &events).unwrap();
        let b = concordance_counts(&warped, &times, &events).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn cox_loss_matches_direct_sum((theta, times, events) in cox_instance()) {
        let batch = CoxBatch::from_times(&times, &events).unwrap();
        let got = cox_loss(&theta, &batch).unwrap();
        let want = naive_cox(&theta, &times, &events);
        prop_assert!((got - want).abs() <= 1e-9 * want.abs().max(1.0), "{} vs {}", got, want);
    }

    #[test]
    fn cox_loss_is_nonnegative_and_shift_invariant((theta, times, events) in cox_instance(), c in -50.0f64..50.0) {
        let batch = CoxBatch::from_times(&times, &events).unwrap();
        let base = cox_loss(&theta, &batch).unwrap();
        prop_assert!(base >= 0.0);
        let shifted: Vec<f64> = theta.iter().map(|v| v + c).collect();
        prop_assert!((cox_loss(&shifted, &batch).unwrap() - base).abs() < 1e-9);
    }

    #[test]
    fn cox_gradient_sums_to_zero((theta, times, events) in cox_instance()) {
        let batch = CoxBatch::from_times(&times, &events).unwrap();
        let g = cox_gradient(&theta, &batch).unwrap();
        prop_assert!(g.iter().sum::<f64>().abs() < 1e-9);
    }

    #[test]
    fn all_censored_batch_has_zero_loss_and_gradient(times in prop::collection::vec(1.0f64..9.0, 1..16)) {
        let events = vec![false; times.len()];
        let batch = CoxBatch::from_times(&times, &events).unwrap();
        prop_assert!(batch.is_degenerate());
        let theta = vec![0.3; times.len()];
        prop_assert_eq!(cox_loss(&theta, &batch).unwrap(), 0.0);
        prop_assert!(cox_gradient(&theta, &batch).unwrap().iter().all(|g| *g == 0.0));
    }
}

#[test]
fn three_events_at_zero_scores_cost_ln_six() {
    let batch = CoxBatch::from_times(&[1.0, 2.0, 3.0], &[true; 3]).unwrap();
    let l = cox_loss(&[0.0; 3], &batch).unwrap();
    assert!((l - 6f64.ln()).abs() < 1e-12);
}

#[test]
fn concordance_without_comparable_pairs_is_an_error() {
    let r = concordance_index(&[0.1, 0.2], &[3.0, 3.0], &[true, true]);
    assert!(matches!(r, Err(Error::Undefined(_))));
}
