use asgd_core::schedule::{
    make_fixed_per_worker, make_worst_case_growth, DelaySchedule, LearningRateSchedule,
};
use proptest::prelude::*;

#[test]
fn fixed_per_worker_passes_validation_over_1000_seeds() {
    for seed in 0..1000u64 {
        let p = 2 + (seed % 9) as usize;
        let tau_bar = (seed % 17) as usize;
        let horizon = 1 + (seed % 40) as usize;
        let s = make_fixed_per_worker(p, horizon, tau_bar, seed).unwrap();
        assert!(s.validate().is_pass(), "seed {seed}: {:?}", s.validate());
        if horizon > tau_bar {
            let finals: Vec<usize> = s.rows().iter().map(|r| r[horizon - 1]).collect();
            assert!(finals.contains(&0));
            assert!(finals.contains(&tau_bar));
        }
    }
}

#[test]
fn worst_case_passes_validation_on_grid() {
    for p in 1..=6 {
        for horizon in 1..=30 {
            for tau_bar in 0..=12 {
                let s = make_worst_case_growth(p, horizon, tau_bar).unwrap();
                assert!(s.validate().is_pass());
                for row in s.rows() {
                    for (t, &d) in row.iter().enumerate() {
                        assert_eq!(d, t.min(tau_bar));
                    }
                }
            }
        }
    }
}

proptest! {
    #[test]
    fn rates_positive_and_non_increasing(c in 1e-4f64..10.0, horizon in 1usize..5000) {
        for schedule in [
            LearningRateSchedule::theorem1(c).unwrap(),
            LearningRateSchedule::experimental(c).unwrap(),
            LearningRateSchedule::constant(c).unwrap(),
        ] {
            let mut prev = f64::INFINITY;
            for t in (0..=horizon).step_by(1 + horizon / 200) {
                let g = schedule.rate_at(t);
                prop_assert!(g > 0.0);
                prop_assert!(g <= prev);
                prev = g;
            }
        }
    }

    #[test]
    fn zero_max_delay_is_all_zero(p in 1usize..10, horizon in 1usize..100, seed in any::<u64>()) {
        let s = make_fixed_per_worker(p, horizon, 0, seed).unwrap();
        prop_assert_eq!(&s, &DelaySchedule::zeros(p, horizon).unwrap());
        let s = make_worst_case_growth(p, horizon, 0).unwrap();
        prop_assert!(s.rows().iter().flatten().all(|&d| d == 0));
    }

    #[test]
    fn text_format_round_trips(p in 2usize..6, horizon in 1usize..30, tau_bar in 0usize..8, seed in any::<u64>()) {
        let s = make_fixed_per_worker(p, horizon, tau_bar, seed).unwrap();
        prop_assert_eq!(DelaySchedule::from_text(&s.to_text()).unwrap(), s);
    }
}
