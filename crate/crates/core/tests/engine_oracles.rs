use std::collections::BTreeSet;

use asgd_core::engine::{
    assign_shards, draw_sample_path, train, TrainOptions, TrainingRun,
};
use asgd_core::model::{generate_synthetic, LossModel, SyntheticSpec, TaskKind};
use asgd_core::schedule::{make_fixed_per_worker, DelaySchedule, LearningRateSchedule};
use asgd_core::ParameterVector;
use proptest::prelude::*;

fn logistic_spec(n: usize, d_in: usize) -> SyntheticSpec {
    SyntheticSpec {
        n,
        d_in,
        feature_bound: 1.0,
        task: TaskKind::Logistic,
        class_separation: 3.0,
        label_noise: 0.05,
    }
}

#[test]
fn shards_partition_over_500_seeds() {
    for seed in 0..500u64 {
        let (n, p) = [(12, 3), (40, 8), (7, 7), (30, 1)][(seed % 4) as usize];
        let s = assign_shards(n, p, seed).unwrap();
        let mut seen = BTreeSet::new();
        for shard in s.shards() {
            assert_eq!(shard.len(), n / p);
            for &i in shard {
                assert!(seen.insert(i), "index {i} in two shards");
            }
        }
        assert_eq!(seen, (0..n).collect());
        for i in 0..n {
            assert!(s.shard(s.owner(i)).contains(&i));
        }
    }
}

#[test]
fn sample_frequencies_are_uniform() {
    let s = assign_shards(10, 2, 3).unwrap();
    let path = draw_sample_path(&s, 50_000, 17).unwrap();
    for j in 0..2 {
        let shard = s.shard(j);
        let mut chi2 = 0.0;
        for &i in shard {
            let count = (0..50_000).filter(|&t| path.index(j, t) == i).count();
            let freq = count as f64 / 50_000.0;
            assert!((freq - 0.2).abs() <= 0.02, "{freq}");
            chi2 += (count as f64 - 10_000.0).powi(2) / 10_000.0;
        }
        // 4 degrees of freedom, upper 0.1% point.
        assert!(chi2 < 18.47, "chi-square {chi2}");
        assert!((0..50_000).all(|t| shard.contains(&path.index(j, t))));
    }
}

/// Plain serial SGD on logistic loss, written without the engine.
fn serial_sgd(
    data: &asgd_core::model::Dataset,
    order: &[usize],
    rates: &LearningRateSchedule,
    d: usize,
) -> Vec<Vec<f64>> {
    let mut w = vec![0.0; d];
    let mut out = vec![w.clone()];
    for (t, &i) in order.iter().enumerate() {
        let z = &data.points()[i];
        let margin: f64 = z.label * w.iter().zip(&z.features).map(|(a, b)| a * b).sum::<f64>();
        let coef = -z.label / (1.0 + margin.exp());
        let gamma = rates.rate_at(t);
        for (wi, xi) in w.iter_mut().zip(&z.features) {
            *wi -= gamma * coef * xi;
        }
        out.push(w.clone());
    }
    out
}

#[test]
fn synchronous_single_worker_matches_serial_sgd() {
    let data = generate_synthetic(&logistic_spec(200, 10), 4).unwrap();
    let model = LossModel::logistic(10, 1.0).unwrap();
    let shards = assign_shards(200, 1, 1).unwrap();
    let samples = draw_sample_path(&shards, 1000, 2).unwrap();
    let delays = DelaySchedule::zeros(1, 1000).unwrap();
    let rates = LearningRateSchedule::experimental(0.5).unwrap();
    let w0 = ParameterVector::zeros(10);
    let run = TrainingRun {
        model: &model,
        dataset: &data,
        shards: &shards,
        samples: &samples,
        delays: &delays,
        rates: &rates,
        w0: &w0,
        horizon: 1000,
    };
    let out = train(run, TrainOptions { record_history: true }).unwrap();
    let order: Vec<usize> = (0..1000).map(|t| samples.index(0, t)).collect();
    let reference = serial_sgd(&data, &order, &rates, 10);
    let history = out.history.unwrap();
    for (engine, serial) in history.iter().zip(&reference) {
        for (a, b) in engine.iter().zip(serial) {
            assert!((a - b).abs() <= 1e-12);
        }
    }
}

fn delayed_run_fixture(tau_bar: usize, seed: u64) -> (
    LossModel,
    asgd_core::model::Dataset,
    asgd_core::engine::ShardAssignment,
    asgd_core::engine::SamplePath,
    DelaySchedule,
    LearningRateSchedule,
) {
    let data = generate_synthetic(&logistic_spec(64, 5), seed).unwrap();
    let model = LossModel::logistic(5, 1.0).unwrap();
    let shards = assign_shards(64, 4, seed).unwrap();
    let samples = draw_sample_path(&shards, 120, seed ^ 9).unwrap();
    let delays = make_fixed_per_worker(4, 120, tau_bar, seed).unwrap();
    let rates = LearningRateSchedule::constant(0.8).unwrap();
    (model, data, shards, samples, delays, rates)
}

#[test]
fn stale_reads_use_the_tagged_iterate() {
    let (model, data, shards, samples, delays, rates) = delayed_run_fixture(6, 5);
    let w0 = ParameterVector::zeros(5);
    let run = TrainingRun {
        model: &model,
        dataset: &data,
        shards: &shards,
        samples: &samples,
        delays: &delays,
        rates: &rates,
        w0: &w0,
        horizon: 120,
    };
    let h = train(run, TrainOptions { record_history: true }).unwrap().history.unwrap();
    // Re-derive every update from the full history.
    for t in 0..120 {
        let mut sum = [0.0; 5];
        for j in 0..4 {
            let stale = &h[t - delays.delay(j, t)];
            let z = &data.points()[samples.index(j, t)];
            let g = model.gradient(stale, z).unwrap();
            sum.iter_mut().zip(g.iter()).for_each(|(s, v)| *s += v);
        }
        let factor = rates.rate_at(t) / 4.0;
        for i in 0..5 {
            assert_eq!((h[t][i] - factor * sum[i]).to_bits(), h[t + 1][i].to_bits());
        }
    }
}

#[test]
fn trajectory_is_bitwise_reproducible() {
    let (model, data, shards, samples, delays, rates) = delayed_run_fixture(3, 8);
    let w0 = ParameterVector::zeros(5);
    let run = TrainingRun {
        model: &model,
        dataset: &data,
        shards: &shards,
        samples: &samples,
        delays: &delays,
        rates: &rates,
        w0: &w0,
        horizon: 120,
    };
    let a = train(run, TrainOptions::default()).unwrap();
    let b = train(run, TrainOptions::default()).unwrap();
    let bits = |w: &ParameterVector| w.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&a.final_w), bits(&b.final_w));
    let mut csv = Vec::new();
    a.write_trajectory(&mut csv).unwrap();
    let text = String::from_utf8(csv).unwrap();
    assert!(text.starts_with("t,train_loss,w_norm,step_norm\n"));
    assert_eq!(text.lines().count(), 121);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn displacement_bounded_by_rate_times_lipschitz(seed in any::<u64>(), tau_bar in 0usize..8) {
        let (model, data, shards, samples, delays, rates) = delayed_run_fixture(tau_bar, seed);
        let w0 = ParameterVector::zeros(5);
        let run = TrainingRun {
            model: &model,
            dataset: &data,
            shards: &shards,
            samples: &samples,
            delays: &delays,
            rates: &rates,
            w0: &w0,
            horizon: 120,
        };
        let out = train(run, TrainOptions::default()).unwrap();
        for (t, &s) in out.step_norm.iter().enumerate() {
            prop_assert!(s <= rates.rate_at(t) * model.lipschitz() * (1.0 + 1e-12));
        }
    }

    #[test]
    fn synchronous_update_equals_fresh_average(seed in any::<u64>()) {
        let (model, data, shards, samples, _, rates) = delayed_run_fixture(0, seed);
        let delays = DelaySchedule::zeros(4, 120).unwrap();
        let w0 = ParameterVector::zeros(5);
        let run = TrainingRun {
            model: &model,
            dataset: &data,
            shards: &shards,
            samples: &samples,
            delays: &delays,
            rates: &rates,
            w0: &w0,
            horizon: 30,
        };
        let h = train(run, TrainOptions { record_history: true }).unwrap().history.unwrap();
        for t in 0..30 {
            let mut sum = [0.0; 5];
            for j in 0..4 {
                let g = model.gradient(&h[t], &data.points()[samples.index(j, t)]).unwrap();
                sum.iter_mut().zip(g.iter()).for_each(|(s, v)| *s += v);
            }
            for i in 0..5 {
                prop_assert_eq!(h[t + 1][i], h[t][i] - rates.rate_at(t) / 4.0 * sum[i]);
            }
        }
    }
}
