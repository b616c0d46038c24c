use asgd_core::model::{
    estimate_smoothness, generate_synthetic, make_neighbor, DataPoint, Dataset, LossModel,
    SyntheticSpec, TaskKind,
};
use asgd_core::{seed, ParameterVector};
use proptest::prelude::*;
use rand::Rng;
use rand_distr::StandardNormal;

fn spec(n: usize, d_in: usize, bound: f64, task: TaskKind) -> SyntheticSpec {
    SyntheticSpec {
        n,
        d_in,
        feature_bound: bound,
        task,
        class_separation: 2.0,
        label_noise: 0.1,
    }
}

fn random_w(d: usize, scale: f64, rng: &mut impl Rng) -> ParameterVector {
    (0..d)
        .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
        .collect::<Vec<_>>()
        .into()
}

fn central_difference(model: &LossModel, w: &ParameterVector, z: &DataPoint) -> Vec<f64> {
    let h = 1e-6;
    (0..w.dim())
        .map(|i| {
            let mut plus = w.clone();
            let mut minus = w.clone();
            plus[i] += h;
            minus[i] -= h;
            (model.loss(&plus, z).unwrap() - model.loss(&minus, z).unwrap()) / (2.0 * h)
        })
        .collect()
}

fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let scale: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-8);
    diff / scale
}

fn check_fd(model: &LossModel, data: &Dataset, w_scale: f64, seed_value: u64) {
    let mut rng = seed::rng(seed_value);
    for _ in 0..20 {
        let z = &data.points()[rng.random_range(0..data.len())];
        let w = random_w(model.dim(), w_scale, &mut rng);
        let analytic = model.raw_gradient(&w, z).unwrap();
        let numeric = central_difference(model, &w, z);
        let err = relative_error(&numeric, &analytic);
        assert!(err < 1e-5, "{:?}: relative error {err}", model.kind());
    }
}

#[test]
fn finite_differences_logistic() {
    let data = generate_synthetic(&spec(50, 6, 1.5, TaskKind::Logistic), 1).unwrap();
    check_fd(&LossModel::logistic(6, 1.5).unwrap(), &data, 1.0, 10);
}

#[test]
fn finite_differences_least_squares() {
    let data = generate_synthetic(&spec(50, 4, 1.0, TaskKind::Regression), 2).unwrap();
    check_fd(&LossModel::least_squares(4, 1.0, 1e9).unwrap(), &data, 1.0, 11);
}

#[test]
fn finite_differences_mlp() {
    let data = generate_synthetic(&spec(50, 5, 1.0, TaskKind::Blobs), 3).unwrap();
    check_fd(&LossModel::mlp(5, 7, 1e9).unwrap(), &data, 0.7, 12);
}

#[test]
fn finite_differences_capped_logistic() {
    // Near the origin the logistic loss is far below the cap, so the capped
    // loss is smooth there.
    let data = generate_synthetic(&spec(50, 3, 1.0, TaskKind::Logistic), 4).unwrap();
    let model = LossModel::logistic(3, 1.0).unwrap().with_loss_cap(5.0).unwrap();
    check_fd(&model, &data, 0.5, 13);
}

#[test]
fn logistic_gradients_within_declared_lipschitz() {
    let data = generate_synthetic(&spec(2000, 20, 1.0, TaskKind::Logistic), 1).unwrap();
    let model = LossModel::logistic(20, data.feature_bound()).unwrap();
    let mut rng = seed::rng(77);
    let mut probes = vec![ParameterVector::zeros(20)];
    probes.extend((0..100).map(|_| random_w(20, 3.0, &mut rng)));
    for w in &probes {
        for z in data.points() {
            let raw = model.raw_gradient(w, z).unwrap();
            assert!(raw.norm() <= model.lipschitz());
            assert!(!model.gradient_eval(w, z).unwrap().clipped);
        }
    }
}

#[test]
fn smoothness_estimate_least_squares() {
    let data = generate_synthetic(&spec(200, 5, 1.3, TaskKind::Regression), 5).unwrap();
    let model = LossModel::least_squares(5, data.feature_bound(), 1e9).unwrap();
    let analytic = data.max_feature_norm().powi(2);
    let est = estimate_smoothness(&model, &data, 2000, 9).unwrap();
    assert!(est <= analytic * (1.0 + 1e-6), "{est} > {analytic}");
    assert!(est > 0.0);
    assert!(est <= model.smoothness().unwrap() * (1.0 + 1e-6));
}

#[test]
fn smoothness_estimate_logistic() {
    let data = generate_synthetic(&spec(200, 4, 2.0, TaskKind::Logistic), 6).unwrap();
    let model = LossModel::logistic(4, 2.0).unwrap();
    assert_eq!(model.smoothness(), Some(1.0));
    let est = estimate_smoothness(&model, &data, 5000, 3).unwrap();
    assert!(est <= 1.0 * (1.0 + 1e-6), "{est}");
}

/// Second forward pass written with explicit index arithmetic.
fn mlp_loss_oracle(w: &[f64], x: &[f64], y: f64, hidden: usize) -> f64 {
    let d = x.len();
    let mut out = w[hidden * d + 2 * hidden];
    for k in 0..hidden {
        let mut pre = w[hidden * d + k];
        for i in 0..d {
            pre += w[k * d + i] * x[i];
        }
        out += w[hidden * d + hidden + k] * pre.tanh();
    }
    (1.0 + (-y * out).exp()).ln()
}

#[test]
fn mlp_forward_matches_oracle() {
    let data = generate_synthetic(&spec(30, 6, 1.0, TaskKind::Blobs), 8).unwrap();
    let model = LossModel::mlp(6, 16, 10.0).unwrap();
    let mut rng = seed::rng(21);
    for z in data.points() {
        let w = random_w(model.dim(), 0.5, &mut rng);
        let got = model.loss(&w, z).unwrap();
        let want = mlp_loss_oracle(&w, &z.features, z.label, 16);
        assert!((got - want).abs() < 1e-12, "{got} vs {want}");
    }
}

#[test]
fn neighbor_differs_once_by_exhaustive_count() {
    let base = generate_synthetic(&spec(100, 3, 1.0, TaskKind::Blobs), 4).unwrap();
    let pair = make_neighbor(&base, 0, 5).unwrap();
    let count = (0..100)
        .filter(|&i| base.points()[i] != pair.variant.points()[i])
        .count();
    assert_eq!(count, 1);
    assert_ne!(base.points()[0], pair.variant.points()[0]);
    assert!(pair.variant.points()[0].norm() <= 1.0 + 1e-12);
}

fn any_model() -> impl Strategy<Value = (LossModel, TaskKind)> {
    prop_oneof![
        Just((LossModel::logistic(3, 1.0).unwrap(), TaskKind::Logistic)),
        Just((LossModel::least_squares(3, 1.0, 0.8).unwrap(), TaskKind::Regression)),
        Just((LossModel::mlp(3, 4, 0.6).unwrap(), TaskKind::Blobs)),
        Just((
            LossModel::logistic(3, 1.0).unwrap().with_loss_cap(0.9).unwrap(),
            TaskKind::Logistic
        )),
    ]
}

proptest! {
    #[test]
    fn gradient_bounded_and_loss_nonnegative(
        (model, task) in any_model(),
        seed_value in any::<u64>(),
        scale in 0.01f64..20.0,
    ) {
        let data = generate_synthetic(&spec(8, 3, 1.0, task), seed_value).unwrap();
        let mut rng = seed::rng(seed_value);
        let w = random_w(model.dim(), scale, &mut rng);
        for z in data.points() {
            let g = model.gradient(&w, z).unwrap();
            prop_assert!(g.norm() <= model.lipschitz());
            let f = model.loss(&w, z).unwrap();
            prop_assert!(f >= 0.0);
            if model.unit_range() {
                prop_assert!(f <= 1.0);
            }
        }
    }

    #[test]
    fn logistic_loss_is_lipschitz(seed_value in any::<u64>(), scale in 0.01f64..5.0) {
        let data = generate_synthetic(&spec(8, 4, 1.5, TaskKind::Logistic), seed_value).unwrap();
        let model = LossModel::logistic(4, 1.5).unwrap();
        let mut rng = seed::rng(seed_value ^ 1);
        let w = random_w(4, scale, &mut rng);
        let w2 = random_w(4, scale, &mut rng);
        for z in data.points() {
            let gap = (model.loss(&w, z).unwrap() - model.loss(&w2, z).unwrap()).abs();
            prop_assert!(gap <= model.lipschitz() * w.distance(&w2) * (1.0 + 1e-9));
        }
    }

    #[test]
    fn generation_deterministic(seed_value in any::<u64>(), n in 1usize..40) {
        let s = spec(n, 3, 1.0, TaskKind::Blobs);
        let a = generate_synthetic(&s, seed_value).unwrap();
        let b = generate_synthetic(&s, seed_value).unwrap();
        prop_assert_eq!(a.points(), b.points());
        prop_assert!(a.points().iter().all(|p| p.norm() <= 1.0 + 1e-12));
    }
}
