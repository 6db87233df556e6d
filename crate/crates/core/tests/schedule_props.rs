use lams_core::schedule::{make_schedule, Decay, SchedulerSpec};
use proptest::prelude::*;

fn spec_and_steps() -> impl Strategy<Value = (SchedulerSpec, usize)> {
    (0.0..=1.0f64, 0.0..=1.0f64, 1usize..=200, 0usize..4, 0.0..=1.0f64).prop_map(|(a, b, steps, d, u)| {
        let (start, end) = if a >= b { (a, b) } else { (b, a) };
        let until = 1 + ((steps - 1) as f64 * u).round() as usize;
        (SchedulerSpec::new(start, end, until, Decay::ALL[d]), steps)
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn monotone_and_bounded((spec, steps) in spec_and_steps()) {
        let s = make_schedule(&spec, steps).unwrap();
        prop_assert_eq!(s.weights.len(), steps);
        for (i, &w) in s.weights.iter().enumerate() {
            prop_assert!(w >= spec.end - 1e-12 && w <= spec.start + 1e-12, "w[{}] = {} outside [{}, {}]", i, w, spec.end, spec.start);
            if i + 1 < steps {
                prop_assert!(s.weights[i + 1] <= w + 1e-12, "increase at {}", i);
            }
        }
    }

    #[test]
    fn stepped_has_at_most_two_values((spec, steps) in spec_and_steps()) {
        let spec = SchedulerSpec { decay: Decay::Stepped, ..spec };
        let s = make_schedule(&spec, steps).unwrap();
        let mut distinct: Vec<f64> = s.weights.clone();
        distinct.dedup();
        let expected = if spec.start == spec.end || spec.until == steps { 1 } else { 2 };
        prop_assert_eq!(distinct.len(), expected);
        prop_assert!(distinct.iter().all(|&w| w == spec.start || w == spec.end));
    }

    #[test]
    fn logistic_residual_at_until((spec, steps) in spec_and_steps()) {
        let spec = SchedulerSpec { decay: Decay::Logistic, ..spec };
        let s = make_schedule(&spec, steps).unwrap();
        let w = s.weights[spec.until - 1];
        prop_assert!((w - spec.end).abs() <= 0.0068 * (spec.start - spec.end) + 1e-15);
    }
}
