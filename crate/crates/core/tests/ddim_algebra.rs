use lams_core::backend::{BetaSchedule, NoiseSchedule};
use lams_core::tensor::max_abs_diff;
use ndarray::Array3;
use proptest::prelude::*;

fn latent(values: &[f64]) -> Array3<f64> {
    Array3::from_shape_vec((2, 3, 4), values.to_vec()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn invert_undoes_step(
        z in prop::collection::vec(-4.0f64..4.0, 24),
        eps in prop::collection::vec(-4.0f64..4.0, 24),
        t in 1usize..=50,
    ) {
        let sched = NoiseSchedule::scaled_linear(&BetaSchedule::default(), 50).unwrap();
        let (z, eps) = (latent(&z), latent(&eps));
        let down = sched.ddim_step(&z, &eps, t).unwrap();
        let back = sched.ddim_invert_step(&down, &eps, t).unwrap();
        prop_assert!(max_abs_diff(&back, &z) <= 1e-10);
        let up = sched.ddim_invert_step(&z, &eps, t).unwrap();
        let again = sched.ddim_step(&up, &eps, t).unwrap();
        prop_assert!(max_abs_diff(&again, &z) <= 1e-10);
    }
}

#[test]
fn zero_noise_on_flat_schedule_is_identity() {
    // Any schedule is strictly decreasing, so emulate equal levels through
    // the shared transfer function.
    let z = latent(&(0..24).map(|v| v as f64 * 0.1 - 1.0).collect::<Vec<_>>());
    let eps = Array3::zeros((2, 3, 4));
    let out = lams_core::backend::ddim_transfer(&z, &eps, 0.37, 0.37);
    assert!(max_abs_diff(&out, &z) < 1e-15);
}

#[test]
fn last_step_lands_on_predicted_x0() {
    let sched = NoiseSchedule::from_alpha_bar(vec![1.0, 0.8, 0.5]).unwrap();
    let z = latent(&(0..24).map(|v| (v as f64).sin()).collect::<Vec<_>>());
    let eps = latent(&(0..24).map(|v| (v as f64 * 0.7).cos()).collect::<Vec<_>>());
    let out = sched.ddim_step(&z, &eps, 1).unwrap();
    let x0 = (&z - &(&eps * 0.2f64.sqrt())) / 0.8f64.sqrt();
    assert!(max_abs_diff(&out, &x0) < 1e-14);
}

#[test]
fn out_of_range_timesteps_are_rejected() {
    let sched = NoiseSchedule::scaled_linear(&BetaSchedule::default(), 10).unwrap();
    let z = Array3::zeros((1, 2, 2));
    assert!(sched.ddim_step(&z, &z, 0).is_err());
    assert!(sched.ddim_step(&z, &z, 11).is_err());
    assert!(sched.ddim_invert_step(&z, &z, 0).is_err());
    assert!(sched.ddim_step(&z, &Array3::zeros((1, 2, 3)), 1).is_err());
}

#[test]
fn schedule_levels_are_valid() {
    for steps in [1, 10, 50, 999] {
        let s = NoiseSchedule::scaled_linear(&BetaSchedule::default(), steps).unwrap();
        let a = s.alpha_bars();
        assert_eq!(a.len(), steps + 1);
        assert_eq!(a[0], 1.0);
        assert!(a.windows(2).all(|w| w[1] < w[0] && w[1] > 0.0));
    }
    assert!(NoiseSchedule::scaled_linear(&BetaSchedule::default(), 1000).is_err());
    assert!(NoiseSchedule::from_alpha_bar(vec![1.0, 0.5, 0.6]).is_err());
    assert!(NoiseSchedule::from_alpha_bar(vec![0.9, 0.5]).is_err());
}
