//! The acceptance battery: nine checks, each reported as pass or fail with
//! the numbers behind the verdict.

use std::fs;
use std::path::Path;
use std::time::Instant;

use asgd_core::engine::{assign_shards, draw_sample_path, train, TrainOptions, TrainingRun};
use asgd_core::model::{generate_synthetic, Dataset, LossModel, SyntheticSpec, TaskKind};
use asgd_core::schedule::{DelaySchedule, LearningRateSchedule};
use asgd_core::seed;
use asgd_core::stability::{
    run_ensemble, DelayPlan, Ensemble, EnsembleConfig, NeighborMode, SLACK_TOLERANCE,
};
use asgd_core::theory::{
    bound_row, recursion_rollforward, telescoped_bound, theorem1_bound, theorem2_bound,
    BoundInputs, RecursionSequence,
};
use asgd_core::ParameterVector;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::config::{
    DelayKind, ExperimentConfig, ExperimentKind, ModelChoice, ScheduleKind, SweepPoint,
};
use crate::experiment::{self, run_twin_points, summarize, SeedRecord, TwinSummary, Workload};
use crate::{HarnessError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CriterionResult {
    pub id: u8,
    pub name: String,
    pub passed: bool,
    pub detail: String,
    /// Wall-clock seconds, including shared work attributed to this check.
    pub seconds: f64,
    pub limit_seconds: Option<f64>,
}

impl CriterionResult {
    fn new(id: u8, name: &str, passed: bool, detail: String, seconds: f64, limit: Option<f64>) -> Self {
        let within = limit.is_none_or(|l| seconds < l);
        let detail = if within {
            detail
        } else {
            format!("{detail}; runtime {seconds:.1}s exceeds {:.0}s", limit.unwrap())
        };
        CriterionResult {
            id,
            name: name.to_string(),
            passed: passed && within,
            detail,
            seconds,
            limit_seconds: limit,
        }
    }

    pub fn line(&self) -> String {
        format!(
            "criterion {} [{}] {}: {} ({:.2}s)",
            self.id,
            self.name,
            if self.passed { "PASS" } else { "FAIL" },
            self.detail,
            self.seconds
        )
    }
}

fn sub(seed_value: u64, label: &str) -> u64 {
    seed::derive(seed_value, label, 0)
}

// ------------------------------------------------------------ 1

/// Serial SGD on the logistic loss, written independently of the engine.
fn serial_logistic_sgd(data: &Dataset, order: &[usize], rates: &[f64], d: usize) -> Vec<Vec<f64>> {
    let mut w = vec![0.0; d];
    let mut out = Vec::with_capacity(order.len() + 1);
    out.push(w.clone());
    for (&i, &gamma) in order.iter().zip(rates) {
        let z = &data.points()[i];
        let mut margin = 0.0;
        for k in 0..d {
            margin += w[k] * z.features[k];
        }
        margin *= z.label;
        let coef = -z.label / (1.0 + margin.exp());
        for k in 0..d {
            w[k] -= gamma * coef * z.features[k];
        }
        out.push(w.clone());
    }
    out
}

pub fn synchronous_reduction(seed_value: u64) -> Result<CriterionResult> {
    let start = Instant::now();
    let (n, d, horizon) = (200, 10, 1000);
    let spec = SyntheticSpec {
        n,
        d_in: d,
        feature_bound: 1.0,
        task: TaskKind::Logistic,
        class_separation: 2.0,
        label_noise: 0.1,
    };
    let data = generate_synthetic(&spec, sub(seed_value, "sync-data"))?;
    let model = LossModel::logistic(d, 1.0)?;
    let shards = assign_shards(n, 1, sub(seed_value, "sync-shards"))?;
    let samples = draw_sample_path(&shards, horizon, sub(seed_value, "sync-samples"))?;
    let delays = DelaySchedule::zeros(1, horizon)?;
    let rates = LearningRateSchedule::experimental(0.5)?;
    let w0 = ParameterVector::zeros(d);
    let run = TrainingRun {
        model: &model,
        dataset: &data,
        shards: &shards,
        samples: &samples,
        delays: &delays,
        rates: &rates,
        w0: &w0,
        horizon,
    };
    let history = train(run, TrainOptions { record_history: true })?
        .history
        .expect("history requested");
    let order: Vec<usize> = (0..horizon).map(|t| samples.index(0, t)).collect();
    let gammas: Vec<f64> = (0..horizon).map(|t| rates.rate_at(t)).collect();
    let reference = serial_logistic_sgd(&data, &order, &gammas, d);
    let max_err = history
        .iter()
        .zip(&reference)
        .flat_map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y).abs()))
        .fold(0.0, f64::max);
    Ok(CriterionResult::new(
        1,
        "synchronous-reduction",
        max_err <= 1e-12 && history.len() == horizon + 1,
        format!("max |w_engine - w_serial| = {max_err:.3e} over {horizon} steps"),
        start.elapsed().as_secs_f64(),
        Some(5.0),
    ))
}

// ------------------------------------------------------------ 2

pub fn telescoped_domination(seed_value: u64) -> Result<CriterionResult> {
    let start = Instant::now();
    let mut rng = seed::rng(sub(seed_value, "telescoped"));
    let mut worst = f64::INFINITY;
    let instances = 10_000;
    for _ in 0..instances {
        let horizon = rng.random_range(0..=20usize);
        let tau_bar = rng.random_range(0..=5usize);
        let t0 = rng.random_range(0..=3usize).min(horizon);
        let q = (0..=horizon).map(|_| rng.random::<f64>()).collect();
        let r = (0..=horizon).map(|_| rng.random::<f64>()).collect();
        let seq = RecursionSequence::new(q, r, tau_bar)?;
        let v = recursion_rollforward(&seq, t0)?;
        let slack = telescoped_bound(&seq, t0, horizon)? - v[horizon + 1];
        worst = worst.min(slack);
    }
    Ok(CriterionResult::new(
        2,
        "telescoped-domination",
        worst >= -1e-9,
        format!("{instances} random sequences, min slack {worst:.3e}"),
        start.elapsed().as_secs_f64(),
        Some(10.0),
    ))
}

// ------------------------------------------------------------ 3, 4, 5

pub const STABILITY_TAUS: [usize; 3] = [0, 4, 16];
const STABILITY_N: usize = 2000;
const STABILITY_P: usize = 8;
const STABILITY_T: usize = 500;
const STABILITY_C: f64 = 0.5;
const STABILITY_D: usize = 10;
const STABILITY_REPLICATES: usize = 500;

/// Coupled logistic ensembles shared by the recursion, sandwich and
/// closed-form checks.
pub struct StabilityBattery {
    pub model: LossModel,
    pub ensembles: Vec<(usize, Ensemble)>,
    pub seconds: f64,
}

pub fn stability_battery(seed_value: u64) -> Result<StabilityBattery> {
    let start = Instant::now();
    let spec = SyntheticSpec {
        n: STABILITY_N,
        d_in: STABILITY_D,
        feature_bound: 1.0,
        task: TaskKind::Logistic,
        class_separation: 2.0,
        label_noise: 0.1,
    };
    let data = generate_synthetic(&spec, sub(seed_value, "stability-data"))?;
    let panel = data
        .generator()?
        .dataset(512, sub(seed_value, "stability-panel"));
    let model = LossModel::logistic(STABILITY_D, 1.0)?;
    let mut ensembles = Vec::new();
    for &tau_bar in &STABILITY_TAUS {
        let cfg = EnsembleConfig {
            workers: STABILITY_P,
            horizon: STABILITY_T,
            batch: 1,
            delays: DelayPlan::FixedPerWorker { max_delay: tau_bar },
            rates: LearningRateSchedule::theorem1(STABILITY_C)?,
            w0: Some(ParameterVector::zeros(STABILITY_D)),
            replicates: STABILITY_REPLICATES,
            seed: sub(seed_value, "stability-replicates"),
            neighbor: NeighborMode::FreshDraw,
        };
        ensembles.push((tau_bar, run_ensemble(&model, &data, &panel, &cfg)?));
    }
    Ok(StabilityBattery {
        model,
        ensembles,
        seconds: start.elapsed().as_secs_f64(),
    })
}

pub fn pathwise_recursion(battery: &StabilityBattery) -> Result<CriterionResult> {
    let start = Instant::now();
    let mut passed = true;
    let mut parts = Vec::new();
    for (tau_bar, ens) in &battery.ensembles {
        let mut min_slack = f64::INFINITY;
        let mut bad_runs = 0;
        for rep in &ens.replicates {
            let branch = rep.branch.as_ref().expect("logistic declares smoothness");
            min_slack = min_slack.min(branch.min_slack);
            if !branch.holds() {
                bad_runs += 1;
            }
        }
        let expectation = ens.check_expectation()?;
        passed &= bad_runs == 0 && expectation.holds();
        parts.push(format!(
            "tau_bar={tau_bar}: min slack {min_slack:.3e} ({bad_runs} runs below -{SLACK_TOLERANCE:e}), \
             expectation margin {:.3e} ({} steps violated)",
            expectation.min_margin,
            expectation.violations.len()
        ));
    }
    Ok(CriterionResult::new(
        3,
        "pathwise-recursion",
        passed,
        format!("{} replicates per tau_bar; {}", STABILITY_REPLICATES, parts.join("; ")),
        battery.seconds + start.elapsed().as_secs_f64(),
        Some(300.0),
    ))
}

pub fn lipschitz_sandwich(battery: &StabilityBattery) -> Result<CriterionResult> {
    let start = Instant::now();
    let mut violations = 0;
    let mut worst_ratio: f64 = 0.0;
    let mut runs = 0;
    for (_, ens) in &battery.ensembles {
        for rep in &ens.replicates {
            runs += 1;
            violations += rep.sandwich.violations;
            worst_ratio = worst_ratio.max(rep.sandwich.max_ratio);
        }
    }
    Ok(CriterionResult::new(
        4,
        "lipschitz-sandwich",
        violations == 0,
        format!(
            "{runs} runs x 512 panel points, {violations} violations, max |gap| / (L delta_T) = {worst_ratio:.6}"
        ),
        start.elapsed().as_secs_f64(),
        None,
    ))
}

pub fn closed_form_domination(battery: &StabilityBattery) -> Result<CriterionResult> {
    let start = Instant::now();
    let mut passed = true;
    let mut parts = Vec::new();
    let beta = battery.model.smoothness().expect("logistic declares smoothness");
    for (tau_bar, ens) in battery.ensembles.iter().filter(|(t, _)| *t <= 4) {
        let est = ens.estimate();
        let bound = theorem1_bound(&BoundInputs {
            lipschitz: battery.model.lipschitz(),
            smoothness: beta,
            c: STABILITY_C,
            max_delay: *tau_bar,
            n: STABILITY_N,
            p: STABILITY_P,
            horizon: STABILITY_T,
        })?
        .value;
        passed &= est.estimate <= bound;
        parts.push(format!(
            "tau_bar={tau_bar}: estimate {:.3e} <= bound {:.3e} (L mean delta_T {:.3e} +- {:.1e})",
            est.estimate, bound, est.lipschitz_relaxation, est.sem_final_delta
        ));
    }
    let mut worst: f64 = f64::INFINITY;
    for tau_bar in 0..=2 {
        for horizon in [10, 100] {
            for c in [0.1, 0.5, 1.0] {
                let row = bound_row(&BoundInputs {
                    lipschitz: 1.0,
                    smoothness: 1.0,
                    c,
                    max_delay: tau_bar,
                    n: 100,
                    p: 1,
                    horizon,
                })?;
                worst = worst
                    .min(row.telescoped - row.rollforward)
                    .min(row.thm1 - row.telescoped);
            }
        }
    }
    passed &= worst >= -1e-9;
    parts.push(format!("proof-chain grid min slack {worst:.3e}"));
    Ok(CriterionResult::new(
        5,
        "closed-form-domination",
        passed,
        parts.join("; "),
        start.elapsed().as_secs_f64(),
        None,
    ))
}

// ------------------------------------------------------------ 6

pub fn optimised_bound_consistency() -> Result<CriterionResult> {
    let start = Instant::now();
    let mut passed = true;
    let mut parts = Vec::new();
    for p in [1usize, 4] {
        let mut lo = f64::INFINITY;
        let mut hi: f64 = 0.0;
        let mut outside = 0;
        let mut flag_errors = 0;
        for step in 1..=12 {
            let k = 0.25 * step as f64;
            let inputs = BoundInputs {
                lipschitz: 1.0,
                smoothness: k,
                c: 1.0,
                max_delay: 0,
                n: 1000,
                p,
                horizon: 997,
            };
            let t2 = theorem2_bound(&inputs, true)?;
            lo = lo.min(t2.ratio);
            hi = hi.max(t2.ratio);
            if (t2.ratio - 1.0).abs() > 0.15 {
                outside += 1;
            }
            if t2.flagged != (t2.ratio < 0.85) {
                flag_errors += 1;
            }
        }
        passed &= outside == 0 && flag_errors == 0;
        parts.push(format!(
            "p={p}: printed/exact in [{lo:.4}, {hi:.4}], {outside} of 12 outside 15%, {flag_errors} flag errors"
        ));
    }
    let example = theorem2_bound(
        &BoundInputs {
            lipschitz: 1.0,
            smoothness: 1.0,
            c: 1.0,
            max_delay: 0,
            n: 1000,
            p: 1,
            horizon: 997,
        },
        true,
    )?;
    let shown = format!("{:.3e}", example.bound);
    passed &= shown == format!("{:.3e}", 0.0894427191);
    parts.push(format!("example value {shown}"));
    Ok(CriterionResult::new(
        6,
        "t0-optimised-bound",
        passed,
        parts.join("; "),
        start.elapsed().as_secs_f64(),
        None,
    ))
}

// ------------------------------------------------------------ 7, 8

/// Configuration of the delay and learning-rate trend experiments.
pub fn trend_config(seed_value: u64) -> ExperimentConfig {
    ExperimentConfig {
        kind: ExperimentKind::DelaySweep,
        model: ModelChoice::Mlp,
        hidden: 16,
        clip: Some(100.0),
        loss_cap: None,
        task: TaskKind::Blobs,
        n: 2000,
        d_in: 50,
        feature_bound: 15.0,
        class_separation: 2.0,
        label_noise: 0.3,
        test_size: 10_000,
        panel_size: 64,
        p: 8,
        horizon: 3000,
        tau_bar: 16,
        tau_bars: vec![0, 4, 16],
        delay_kind: DelayKind::FixedPerWorker,
        schedule: ScheduleKind::Experimental,
        c: 0.5,
        cs: vec![0.1, 0.5],
        horizons: vec![3000],
        replicates: 5,
        batch: 1,
        eval_every: 50,
        early_until: 300,
        master_seed: sub(seed_value, "trend"),
        output_dir: "trend".into(),
    }
}

pub const TREND_POINTS: [SweepPoint; 4] = [
    SweepPoint { tau_bar: 0, c: 0.5 },
    SweepPoint { tau_bar: 4, c: 0.5 },
    SweepPoint { tau_bar: 16, c: 0.5 },
    SweepPoint { tau_bar: 16, c: 0.1 },
];

pub struct TrendBattery {
    pub summaries: Vec<TwinSummary>,
    pub seconds: f64,
}

pub fn trend_battery(seed_value: u64) -> Result<TrendBattery> {
    let start = Instant::now();
    let cfg = trend_config(seed_value);
    cfg.validate()?;
    let seeds = SeedRecord::derive(&cfg);
    let work = Workload::build(&cfg, &seeds)?;
    let points = run_twin_points(&cfg, &work, &seeds, &TREND_POINTS)?;
    Ok(TrendBattery {
        summaries: points.iter().map(|p| summarize(p, cfg.early_until)).collect(),
        seconds: start.elapsed().as_secs_f64(),
    })
}

pub fn delay_trend(battery: &TrendBattery) -> CriterionResult {
    let s = &battery.summaries;
    let finals: Vec<f64> = s[..3].iter().map(|x| x.final_gap_loss.mean).collect();
    let monotone = finals[0] <= finals[1] && finals[1] <= finals[2];
    let early = s[2].early_gap_loss.mean <= s[0].early_gap_loss.mean;
    let clip = s.iter().map(|x| x.clip_fraction).fold(0.0, f64::max);
    CriterionResult::new(
        7,
        "delay-trend",
        monotone && early,
        format!(
            "final gap tau_bar 0/4/16 = {:.5}/{:.5}/{:.5} ({}); early gap tau_bar 16 {:.5} vs 0 {:.5} ({}); max clip fraction {clip:.4}",
            finals[0],
            finals[1],
            finals[2],
            if monotone { "non-decreasing" } else { "not non-decreasing" },
            s[2].early_gap_loss.mean,
            s[0].early_gap_loss.mean,
            if early { "lower" } else { "higher" }
        ),
        battery.seconds,
        Some(900.0),
    )
}

pub fn rate_trend(battery: &TrendBattery) -> CriterionResult {
    let s = &battery.summaries;
    let (slow, fast) = (s[3].final_gap_loss, s[2].final_gap_loss);
    CriterionResult::new(
        8,
        "rate-trend",
        slow.mean <= fast.mean,
        format!(
            "tau_bar 16 final gap c=0.1 {:.5} +- {:.5} vs c=0.5 {:.5} +- {:.5}",
            slow.mean, slow.se, fast.mean, fast.se
        ),
        0.0,
        None,
    )
}

// ------------------------------------------------------------ 9

fn small_config(kind: ExperimentKind, seed_value: u64, dir: &Path) -> ExperimentConfig {
    ExperimentConfig {
        kind,
        n: 200,
        d_in: 5,
        test_size: 100,
        panel_size: 32,
        p: 4,
        horizon: 120,
        tau_bar: 3,
        tau_bars: vec![0, 2, 5],
        cs: vec![0.2, 0.8],
        horizons: vec![10, 100],
        replicates: 3,
        eval_every: 10,
        early_until: 40,
        master_seed: seed_value,
        output_dir: dir.to_path_buf(),
        ..ExperimentConfig::default()
    }
}

fn compare_outputs(a: &Path, b: &Path, files: &[String]) -> Result<Vec<String>> {
    let mut differing = Vec::new();
    for name in files {
        let read = |dir: &Path| fs::read(dir.join(name)).map_err(|e| HarnessError::io(&dir.join(name), e));
        if read(a)? != read(b)? {
            differing.push(name.clone());
        }
    }
    Ok(differing)
}

/// Runs one experiment of each numeric kind, replays it from its manifest
/// alone into a fresh directory, and compares every output byte for byte.
pub fn determinism_audit(seed_value: u64, scratch: &Path) -> Result<CriterionResult> {
    let start = Instant::now();
    if scratch.exists() {
        fs::remove_dir_all(scratch).map_err(|e| HarnessError::io(scratch, e))?;
    }
    let kinds = [
        ExperimentKind::SingleRun,
        ExperimentKind::TwinRun,
        ExperimentKind::DelaySweep,
        ExperimentKind::RateSweep,
        ExperimentKind::BoundSweep,
    ];
    let mut compared = 0;
    let mut differing = Vec::new();
    for kind in kinds {
        let original = scratch.join(format!("{kind}-original"));
        let replayed = scratch.join(format!("{kind}-replay"));
        let cfg = small_config(kind, sub(seed_value, kind.as_str()), &original);
        experiment::run_experiment(&cfg)?;
        let manifest_path = original.join(experiment::MANIFEST);
        experiment::replay(&manifest_path, Some(&replayed))?;
        let manifest = experiment::read_manifest(&manifest_path)?;
        compared += manifest.files.len();
        for name in compare_outputs(&original, &replayed, &manifest.files)? {
            differing.push(format!("{kind}/{name}"));
        }
    }
    Ok(CriterionResult::new(
        9,
        "determinism",
        differing.is_empty(),
        if differing.is_empty() {
            format!("{compared} files across 5 experiment kinds identical after replay")
        } else {
            format!("differing after replay: {}", differing.join(", "))
        },
        start.elapsed().as_secs_f64(),
        None,
    ))
}

/// Every criterion, in order.
pub fn run_all(seed_value: u64, scratch: &Path) -> Result<Vec<CriterionResult>> {
    let mut out = vec![
        synchronous_reduction(seed_value)?,
        telescoped_domination(seed_value)?,
    ];
    let stability = stability_battery(seed_value)?;
    out.push(pathwise_recursion(&stability)?);
    out.push(lipschitz_sandwich(&stability)?);
    out.push(closed_form_domination(&stability)?);
    drop(stability);
    out.push(optimised_bound_consistency()?);
    let trend = trend_battery(seed_value)?;
    out.push(delay_trend(&trend));
    out.push(rate_trend(&trend));
    out.push(determinism_audit(seed_value, scratch)?);
    for r in &out {
        log::info!("{}", r.line());
    }
    Ok(out)
}
