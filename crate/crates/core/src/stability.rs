//! Coupled twin runs on neighbouring datasets.
//!
//! Both runs of a twin share shards, sample path, delay path, step sizes and
//! initial point; only the data point at `i*` differs. The divergence
//! `delta_t = ||w_t - w'_t||` is recorded after every step and checked
//! against the per-step branch inequality
//!
//! ```text
//! delta_{t+1} <= delta_t + (beta gamma_t / p) sum_j delta_{t - tau(j,t)}
//!                + [hit at t] * 2 L gamma_t / p
//! ```
//!
//! which holds pathwise whenever the gradient map is `beta`-Lipschitz and
//! bounded by `L`.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::engine::{assign_shards, draw_batched_sample_path, Simulation, TrainingRun};
use crate::model::{make_neighbor, Dataset, LossModel, NeighborPair};
use crate::schedule::{
    make_fixed_per_worker, make_worst_case_growth, DelaySchedule, LearningRateSchedule,
};
use crate::{fmt, seed, Error, ParameterVector, Result};

/// Rounding tolerance for the pathwise inequalities.
pub const SLACK_TOLERANCE: f64 = 1e-9;
/// Relative tolerance for `|f(w;z) - f(w';z)| <= L ||w - w'||`.
pub const SANDWICH_TOLERANCE: f64 = 1e-9;

/// Randomness shared by the two runs of a twin.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CouplingConfig {
    pub workers: usize,
    pub horizon: usize,
    pub batch: usize,
    pub shard_seed: u64,
    pub sample_seed: u64,
    pub delays: DelaySchedule,
    pub rates: LearningRateSchedule,
    pub w0: ParameterVector,
    pub differing_index: usize,
}

/// Turns on the per-step generalisation metrics of a twin run.
#[derive(Clone, Copy, Debug)]
pub struct MetricsConfig<'a> {
    pub test: &'a Dataset,
    /// Evaluate at `t % every == 0` and at `t = T`.
    pub every: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub t: usize,
    pub delta: f64,
    pub normalized_distance: f64,
    /// Worker `j*` sampled `i*` at step `t` (drives the step `t -> t+1`).
    pub hit: bool,
    /// Number of times `i*` appears in the batch of `j*` at step `t`.
    pub hit_count: usize,
    /// Branch-inequality slack of the step that produced `delta_t`, when the
    /// model declares a smoothness constant. Zero at `t = 0`.
    pub recursion_slack: Option<f64>,
    /// `|F_S(w_t) - F_test(w_t)|` of the base run.
    pub gen_loss_gap: Option<f64>,
    /// `|err_S(w_t) - err_test(w_t)|` of the base run.
    pub gen_misclass_gap: Option<f64>,
    /// `|F_S(w_t) - F_S(w'_t)|`.
    pub twin_loss_gap_train: Option<f64>,
    /// `|F_test(w_t) - F_test(w'_t)|`.
    pub twin_loss_gap_test: Option<f64>,
}

/// Per-step record of a twin run, `t = 0..=T`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StabilityTrace {
    pub records: Vec<TraceRecord>,
    pub differing_index: usize,
    pub differing_worker: usize,
    pub workers: usize,
    pub batch: usize,
    pub delays: DelaySchedule,
    pub rates: LearningRateSchedule,
    pub final_base: ParameterVector,
    pub final_variant: ParameterVector,
    pub clipped: usize,
    pub gradient_calls: usize,
}

impl StabilityTrace {
    pub fn horizon(&self) -> usize {
        self.records.len() - 1
    }

    pub fn deltas(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.delta).collect()
    }

    pub fn final_delta(&self) -> f64 {
        self.records.last().map(|r| r.delta).unwrap_or(0.0)
    }

    pub fn first_hit(&self) -> Option<usize> {
        self.records.iter().find(|r| r.hit).map(|r| r.t)
    }

    /// CSV with header `t,delta,norm_dist,hit,slack,gap_loss,gap_misclass`.
    /// Steps without a measurement leave the cell empty.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "t,delta,norm_dist,hit,slack,gap_loss,gap_misclass")?;
        for r in &self.records {
            writeln!(
                out,
                "{},{},{},{},{},{},{}",
                r.t,
                fmt::real(r.delta),
                fmt::real(r.normalized_distance),
                r.hit as u8,
                fmt::opt_real(r.recursion_slack),
                fmt::opt_real(r.gen_loss_gap),
                fmt::opt_real(r.gen_misclass_gap)
            )?;
        }
        Ok(())
    }
}

/// `sqrt(||w - w'||^2 / (||w||^2 + ||w'||^2))`, defined as 0 when both are
/// zero. Not clamped: `w = -w'` gives `sqrt(2)`.
pub fn normalized_distance(w: &ParameterVector, other: &ParameterVector) -> f64 {
    let denom = w.norm_sq() + other.norm_sq();
    if denom == 0.0 {
        return 0.0;
    }
    let d = w.distance(other);
    (d * d / denom).sqrt()
}

/// Mean loss and misclassification rate on train and test sets.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneralizationProxy {
    pub train_loss: f64,
    pub test_loss: f64,
    pub train_misclass: f64,
    pub test_misclass: f64,
}

impl GeneralizationProxy {
    pub fn loss_gap(&self) -> f64 {
        (self.train_loss - self.test_loss).abs()
    }

    pub fn misclass_gap(&self) -> f64 {
        (self.train_misclass - self.test_misclass).abs()
    }
}

/// Mean loss and misclassification rate of `w` on `data`. Regression tasks
/// report a misclassification rate of 0.
pub fn evaluate(model: &LossModel, w: &ParameterVector, data: &Dataset) -> Result<(f64, f64)> {
    if data.is_empty() {
        return Err(Error::invalid("dataset", "empty evaluation set"));
    }
    let classify = data.task().is_classification();
    let mut loss = 0.0;
    let mut wrong = 0usize;
    for z in data.points() {
        loss += model.loss(w, z)?;
        if classify && model.misclassified(w, z) {
            wrong += 1;
        }
    }
    let m = data.len() as f64;
    Ok((loss / m, wrong as f64 / m))
}

pub fn generalization_proxy(
    model: &LossModel,
    w: &ParameterVector,
    train: &Dataset,
    test: &Dataset,
) -> Result<GeneralizationProxy> {
    let (train_loss, train_misclass) = evaluate(model, w, train)?;
    let (test_loss, test_misclass) = evaluate(model, w, test)?;
    Ok(GeneralizationProxy {
        train_loss,
        test_loss,
        train_misclass,
        test_misclass,
    })
}

/// Outcome of the Lipschitz sandwich over a held-out panel.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SandwichReport {
    pub delta: f64,
    /// Largest `|f(w;z) - f(w';z)| / (L delta)`; 0 when both sides vanish.
    pub max_ratio: f64,
    pub max_abs_gap: f64,
    pub mean_abs_gap: f64,
    pub violations: usize,
}

impl SandwichReport {
    pub fn holds(&self) -> bool {
        self.violations == 0
    }
}

/// Checks `|f(w;z) - f(w';z)| <= L ||w - w'||` for every `z` in `holdout`.
pub fn lipschitz_sandwich_check(
    model: &LossModel,
    w: &ParameterVector,
    other: &ParameterVector,
    holdout: &Dataset,
) -> Result<SandwichReport> {
    let gaps = loss_gaps(model, w, other, holdout)?;
    Ok(sandwich_from_gaps(model, w.distance(other), &gaps))
}

fn loss_gaps(
    model: &LossModel,
    w: &ParameterVector,
    other: &ParameterVector,
    holdout: &Dataset,
) -> Result<Vec<f64>> {
    if holdout.is_empty() {
        return Err(Error::invalid("holdout", "panel is empty"));
    }
    holdout
        .points()
        .iter()
        .map(|z| Ok((model.loss(w, z)? - model.loss(other, z)?).abs()))
        .collect()
}

fn sandwich_from_gaps(model: &LossModel, delta: f64, gaps: &[f64]) -> SandwichReport {
    let bound = model.lipschitz() * delta;
    let mut report = SandwichReport {
        delta,
        max_ratio: 0.0,
        max_abs_gap: 0.0,
        mean_abs_gap: gaps.iter().sum::<f64>() / gaps.len() as f64,
        violations: 0,
    };
    for &gap in gaps {
        report.max_abs_gap = report.max_abs_gap.max(gap);
        let ratio = if gap == 0.0 {
            0.0
        } else if bound == 0.0 {
            f64::INFINITY
        } else {
            gap / bound
        };
        report.max_ratio = report.max_ratio.max(ratio);
        if gap > bound * (1.0 + SANDWICH_TOLERANCE) {
            report.violations += 1;
        }
    }
    report
}

/// Runs the two coupled trajectories and records the trace.
pub fn twin_run(
    model: &LossModel,
    pair: &NeighborPair,
    coupling: &CouplingConfig,
    metrics: Option<MetricsConfig<'_>>,
) -> Result<StabilityTrace> {
    let n = pair.base.len();
    if pair.variant.len() != n {
        return Err(Error::Coupling(format!(
            "neighbour sizes differ: {} vs {}",
            n,
            pair.variant.len()
        )));
    }
    if pair.differing_index != coupling.differing_index {
        return Err(Error::Coupling(format!(
            "pair differs at {} but coupling names {}",
            pair.differing_index, coupling.differing_index
        )));
    }
    if coupling.differing_index >= n {
        return Err(Error::IndexOutOfRange {
            index: coupling.differing_index,
            len: n,
        });
    }
    if coupling.delays.worker_count() != coupling.workers {
        return Err(Error::Coupling(format!(
            "delay schedule has {} workers, coupling {}",
            coupling.delays.worker_count(),
            coupling.workers
        )));
    }
    if let Some(m) = metrics {
        if m.every == 0 {
            return Err(Error::invalid("every", "metric interval must be positive"));
        }
    }
    let horizon = coupling.horizon;
    let shards = assign_shards(n, coupling.workers, coupling.shard_seed)?;
    let samples = draw_batched_sample_path(
        &shards,
        horizon.max(1),
        coupling.batch,
        coupling.sample_seed,
    )?;
    let i_star = coupling.differing_index;
    let j_star = shards.owner(i_star);

    let base_run = TrainingRun {
        model,
        dataset: &pair.base,
        shards: &shards,
        samples: &samples,
        delays: &coupling.delays,
        rates: &coupling.rates,
        w0: &coupling.w0,
        horizon,
    };
    let variant_run = TrainingRun {
        dataset: &pair.variant,
        ..base_run
    };
    let mut base = Simulation::new(base_run)?;
    let mut variant = Simulation::new(variant_run)?;

    let p = coupling.workers as f64;
    let b = coupling.batch as f64;
    let lipschitz = model.lipschitz();
    let smoothness = model.smoothness();
    let hits_at = |t: usize| -> usize {
        if t >= horizon {
            0
        } else {
            samples
                .batch_at(j_star, t)
                .iter()
                .filter(|&&i| i == i_star)
                .count()
        }
    };

    let measure = |t: usize, w: &ParameterVector, w_bar: &ParameterVector| -> Result<[Option<f64>; 4]> {
        let Some(m) = metrics else {
            return Ok([None; 4]);
        };
        if !t.is_multiple_of(m.every) && t != horizon {
            return Ok([None; 4]);
        }
        let (train_loss, train_err) = evaluate(model, w, &pair.base)?;
        let (test_loss, test_err) = evaluate(model, w, m.test)?;
        let (train_loss_bar, _) = evaluate(model, w_bar, &pair.base)?;
        let (test_loss_bar, _) = evaluate(model, w_bar, m.test)?;
        Ok([
            Some((train_loss - test_loss).abs()),
            Some((train_err - test_err).abs()),
            Some((train_loss - train_loss_bar).abs()),
            Some((test_loss - test_loss_bar).abs()),
        ])
    };

    let mut deltas: Vec<f64> = Vec::with_capacity(horizon + 1);
    let mut records = Vec::with_capacity(horizon + 1);
    let push = |records: &mut Vec<TraceRecord>,
                    t: usize,
                    delta: f64,
                    w: &ParameterVector,
                    w_bar: &ParameterVector,
                    slack: Option<f64>|
     -> Result<()> {
        let hit_count = hits_at(t);
        let [gen_loss_gap, gen_misclass_gap, twin_loss_gap_train, twin_loss_gap_test] =
            measure(t, w, w_bar)?;
        records.push(TraceRecord {
            t,
            delta,
            normalized_distance: normalized_distance(w, w_bar),
            hit: hit_count > 0,
            hit_count,
            recursion_slack: slack,
            gen_loss_gap,
            gen_misclass_gap,
            twin_loss_gap_train,
            twin_loss_gap_test,
        });
        Ok(())
    };

    let delta0 = base.current().distance(variant.current());
    deltas.push(delta0);
    push(
        &mut records,
        0,
        delta0,
        base.current(),
        variant.current(),
        smoothness.map(|_| 0.0),
    )?;

    for t in 0..horizon {
        base.advance()?;
        variant.advance()?;
        let delta = base.current().distance(variant.current());
        let slack = smoothness.map(|beta| {
            let gamma = coupling.rates.rate_at(t);
            let stale: f64 = (0..coupling.workers)
                .map(|j| deltas[t - coupling.delays.delay(j, t)])
                .sum();
            let rhs = deltas[t]
                + beta * gamma / p * stale
                + hits_at(t) as f64 * 2.0 * lipschitz * gamma / (p * b);
            rhs - delta
        });
        deltas.push(delta);
        push(&mut records, t + 1, delta, base.current(), variant.current(), slack)?;
    }

    Ok(StabilityTrace {
        records,
        differing_index: i_star,
        differing_worker: j_star,
        workers: coupling.workers,
        batch: coupling.batch,
        delays: coupling.delays.clone(),
        rates: coupling.rates,
        final_base: base.current().clone(),
        final_variant: variant.current().clone(),
        clipped: base.stats().clipped + variant.stats().clipped,
        gradient_calls: base.stats().gradient_calls + variant.stats().gradient_calls,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum RecursionForm {
    /// Sum over the realised delays, as in the per-step proof branches.
    Branch,
    /// `beta gamma_t (tau_bar + 1) max_{t - tau_bar <= k <= t} delta_k`.
    Relaxed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlackReport {
    pub form: RecursionForm,
    pub min_slack: f64,
    /// Step `t` of the transition `t -> t+1` with the smallest slack.
    pub argmin_step: usize,
    /// Steps whose slack falls below `-SLACK_TOLERANCE`.
    pub violations: Vec<usize>,
}

impl SlackReport {
    pub fn holds(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Recomputes the per-step recursion from a trace using the model's
/// declared `(L, beta)` and the delays recorded in the trace.
pub fn check_recursion_pathwise(
    trace: &StabilityTrace,
    model: &LossModel,
    form: RecursionForm,
) -> Result<SlackReport> {
    let beta = model
        .smoothness()
        .ok_or_else(|| Error::invalid("model", "no declared smoothness constant"))?;
    let lipschitz = model.lipschitz();
    let deltas = trace.deltas();
    let p = trace.workers as f64;
    let b = trace.batch as f64;
    let tau_bar = trace.delays.max_delay();
    let mut report = SlackReport {
        form,
        min_slack: f64::INFINITY,
        argmin_step: 0,
        violations: Vec::new(),
    };
    for t in 0..trace.horizon() {
        let gamma = trace.rates.rate_at(t);
        let delay_term = match form {
            RecursionForm::Branch => {
                let stale: f64 = (0..trace.workers)
                    .map(|j| deltas[t - trace.delays.delay(j, t)])
                    .sum();
                beta * gamma / p * stale
            }
            RecursionForm::Relaxed => {
                let window = &deltas[t.saturating_sub(tau_bar)..=t];
                let max = window.iter().copied().fold(0.0, f64::max);
                beta * gamma * (tau_bar as f64 + 1.0) * max
            }
        };
        let hit_term = trace.records[t].hit_count as f64 * 2.0 * lipschitz * gamma / (p * b);
        let slack = deltas[t] + delay_term + hit_term - deltas[t + 1];
        if slack < report.min_slack {
            report.min_slack = slack;
            report.argmin_step = t;
        }
        if slack < -SLACK_TOLERANCE {
            report.violations.push(t);
        }
    }
    if trace.horizon() == 0 {
        report.min_slack = 0.0;
    }
    Ok(report)
}

/// How each replicate obtains its delay path.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DelayPlan {
    /// The same schedule for every replicate.
    Fixed(DelaySchedule),
    /// A fresh seeded per-worker constant assignment per replicate.
    FixedPerWorker { max_delay: usize },
    WorstCase { max_delay: usize },
}

impl DelayPlan {
    pub fn max_delay(&self) -> usize {
        match self {
            DelayPlan::Fixed(s) => s.max_delay(),
            DelayPlan::FixedPerWorker { max_delay } | DelayPlan::WorstCase { max_delay } => {
                *max_delay
            }
        }
    }

    pub fn realize(&self, workers: usize, horizon: usize, seed: u64) -> Result<DelaySchedule> {
        let horizon = horizon.max(1);
        match self {
            DelayPlan::Fixed(s) => Ok(s.clone()),
            DelayPlan::FixedPerWorker { max_delay } => {
                make_fixed_per_worker(workers, horizon, *max_delay, seed)
            }
            DelayPlan::WorstCase { max_delay } => {
                make_worst_case_growth(workers, horizon, *max_delay)
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NeighborMode {
    /// Replace `i*` with a fresh draw from the generator.
    FreshDraw,
    /// Replace `i*` with a copy of itself.
    Identical,
}

#[derive(Clone, Debug)]
pub struct EnsembleConfig {
    pub workers: usize,
    pub horizon: usize,
    pub batch: usize,
    pub delays: DelayPlan,
    pub rates: LearningRateSchedule,
    /// Shared initial point; `None` uses the model default seeded per replicate.
    pub w0: Option<ParameterVector>,
    pub replicates: usize,
    pub seed: u64,
    pub neighbor: NeighborMode,
}

/// Seeds consumed by one replicate, all derived from the ensemble seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReplicateSeeds {
    pub replicate: u64,
    pub index: u64,
    pub variant: u64,
    pub shards: u64,
    pub samples: u64,
    pub delays: u64,
    pub init: u64,
}

impl ReplicateSeeds {
    pub fn derive(ensemble_seed: u64, replicate: usize) -> Self {
        let r = seed::derive(ensemble_seed, "replicate", replicate as u64);
        ReplicateSeeds {
            replicate: r,
            index: seed::derive(r, "index", 0),
            variant: seed::derive(r, "variant", 0),
            shards: seed::derive(r, "shards", 0),
            samples: seed::derive(r, "samples", 0),
            delays: seed::derive(r, "delays", 0),
            init: seed::derive(r, "init", 0),
        }
    }
}

#[derive(Clone, Debug)]
pub struct ReplicateOutcome {
    pub replicate: usize,
    pub seeds: ReplicateSeeds,
    pub trace: StabilityTrace,
    /// `|f(w_T; z) - f(w'_T; z)|` for each panel point.
    pub panel_gaps: Vec<f64>,
    pub sandwich: SandwichReport,
    pub branch: Option<SlackReport>,
    pub relaxed: Option<SlackReport>,
}

#[derive(Clone, Debug)]
pub struct Ensemble {
    pub replicates: Vec<ReplicateOutcome>,
    pub n: usize,
    pub max_delay: usize,
    pub rates: LearningRateSchedule,
    pub lipschitz: f64,
    pub smoothness: Option<f64>,
}

/// Builds the coupling and neighbour for one replicate.
pub fn replicate_setup(
    model: &LossModel,
    base: &Dataset,
    cfg: &EnsembleConfig,
    replicate: usize,
) -> Result<(ReplicateSeeds, NeighborPair, CouplingConfig)> {
    let seeds = ReplicateSeeds::derive(cfg.seed, replicate);
    let n = base.len();
    let i_star = seed::below(seeds.index, n);
    let pair = match cfg.neighbor {
        NeighborMode::FreshDraw => make_neighbor(base, i_star, seeds.variant)?,
        NeighborMode::Identical => {
            NeighborPair::with_replacement(base, i_star, base.points()[i_star].clone())?
        }
    };
    let w0 = cfg
        .w0
        .clone()
        .unwrap_or_else(|| model.initial_point(seeds.init));
    let coupling = CouplingConfig {
        workers: cfg.workers,
        horizon: cfg.horizon,
        batch: cfg.batch,
        shard_seed: seeds.shards,
        sample_seed: seeds.samples,
        delays: cfg.delays.realize(cfg.workers, cfg.horizon, seeds.delays)?,
        rates: cfg.rates,
        w0,
        differing_index: i_star,
    };
    Ok((seeds, pair, coupling))
}

/// Runs `cfg.replicates` independent twin runs (concurrently) and evaluates
/// each final pair on `panel`. Results are ordered by replicate index.
pub fn run_ensemble(
    model: &LossModel,
    base: &Dataset,
    panel: &Dataset,
    cfg: &EnsembleConfig,
) -> Result<Ensemble> {
    if cfg.replicates == 0 {
        return Err(Error::invalid("replicates", "must be at least 1"));
    }
    let replicates = (0..cfg.replicates)
        .into_par_iter()
        .map(|r| -> Result<ReplicateOutcome> {
            let (seeds, pair, coupling) = replicate_setup(model, base, cfg, r)?;
            let trace = twin_run(model, &pair, &coupling, None)?;
            let panel_gaps = loss_gaps(model, &trace.final_base, &trace.final_variant, panel)?;
            let sandwich = sandwich_from_gaps(model, trace.final_delta(), &panel_gaps);
            let (branch, relaxed) = if model.smoothness().is_some() {
                (
                    Some(check_recursion_pathwise(&trace, model, RecursionForm::Branch)?),
                    Some(check_recursion_pathwise(&trace, model, RecursionForm::Relaxed)?),
                )
            } else {
                (None, None)
            };
            Ok(ReplicateOutcome {
                replicate: r,
                seeds,
                trace,
                panel_gaps,
                sandwich,
                branch,
                relaxed,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Ensemble {
        replicates,
        n: base.len(),
        max_delay: cfg.delays.max_delay(),
        rates: cfg.rates,
        lipschitz: model.lipschitz(),
        smoothness: model.smoothness(),
    })
}

/// Sample mean and standard error of the mean.
pub fn mean_sem(values: &[f64]) -> (f64, f64) {
    let m = values.len() as f64;
    let mean = values.iter().sum::<f64>() / m;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (m - 1.0);
    (mean, (var / m).sqrt())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StabilityEstimate {
    /// `max_z mean_r |f(w_T; z) - f(w'_T; z)|` over the panel.
    pub estimate: f64,
    /// `L * mean_r delta_T`.
    pub lipschitz_relaxation: f64,
    pub mean_final_delta: f64,
    pub sem_final_delta: f64,
    pub replicates: usize,
}

impl Ensemble {
    pub fn horizon(&self) -> usize {
        self.replicates[0].trace.horizon()
    }

    /// Mean and standard error of `delta_t` across replicates, per step.
    pub fn delta_curve(&self) -> Vec<(f64, f64)> {
        (0..=self.horizon())
            .map(|t| {
                let values: Vec<f64> = self
                    .replicates
                    .iter()
                    .map(|r| r.trace.records[t].delta)
                    .collect();
                mean_sem(&values)
            })
            .collect()
    }

    pub fn estimate(&self) -> StabilityEstimate {
        let panel = self.replicates[0].panel_gaps.len();
        let reps = self.replicates.len() as f64;
        let estimate = (0..panel)
            .map(|k| self.replicates.iter().map(|r| r.panel_gaps[k]).sum::<f64>() / reps)
            .fold(0.0, f64::max);
        let finals: Vec<f64> = self.replicates.iter().map(|r| r.trace.final_delta()).collect();
        let (mean, sem) = mean_sem(&finals);
        StabilityEstimate {
            estimate,
            lipschitz_relaxation: self.lipschitz * mean,
            mean_final_delta: mean,
            sem_final_delta: sem,
            replicates: self.replicates.len(),
        }
    }

    /// Checks the expectation form
    /// `E[delta_{t+1}] <= E[delta_t] + beta gamma_t (tau_bar+1) max_k E[delta_k] + 2 L gamma_t / n`
    /// on Monte-Carlo means, allowing `3 * SEM(delta_{t+1})`.
    pub fn check_expectation(&self) -> Result<ExpectationReport> {
        let beta = self
            .smoothness
            .ok_or_else(|| Error::invalid("model", "no declared smoothness constant"))?;
        let curve = self.delta_curve();
        let means: Vec<f64> = curve.iter().map(|c| c.0).collect();
        let mut report = ExpectationReport {
            min_margin: f64::INFINITY,
            worst_step: 0,
            violations: Vec::new(),
        };
        let tau_bar = self.max_delay;
        for t in 0..self.horizon() {
            let gamma = self.rates.rate_at(t);
            let max = means[t.saturating_sub(tau_bar)..=t]
                .iter()
                .copied()
                .fold(0.0, f64::max);
            let rhs = means[t]
                + beta * gamma * (tau_bar as f64 + 1.0) * max
                + 2.0 * self.lipschitz * gamma / self.n as f64;
            let margin = rhs + 3.0 * curve[t + 1].1 - means[t + 1];
            if margin < report.min_margin {
                report.min_margin = margin;
                report.worst_step = t;
            }
            if margin < 0.0 {
                report.violations.push(t);
            }
        }
        Ok(report)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExpectationReport {
    pub min_margin: f64,
    pub worst_step: usize,
    pub violations: Vec<usize>,
}

impl ExpectationReport {
    pub fn holds(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Monte-Carlo stability estimate over `cfg.replicates` coupled runs.
pub fn stability_estimate(
    model: &LossModel,
    base: &Dataset,
    panel: &Dataset,
    cfg: &EnsembleConfig,
) -> Result<StabilityEstimate> {
    Ok(run_ensemble(model, base, panel, cfg)?.estimate())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalized_distance_cases() {
        let a = ParameterVector::from_vec(vec![1.0, 2.0]);
        assert_eq!(normalized_distance(&a, &a), 0.0);
        let neg = ParameterVector::from_vec(vec![-1.0, -2.0]);
        assert!((normalized_distance(&a, &neg) - 2f64.sqrt()).abs() < 1e-15);
        let e1 = ParameterVector::from_vec(vec![1.0, 0.0]);
        let e2 = ParameterVector::from_vec(vec![0.0, 1.0]);
        assert!((normalized_distance(&e1, &e2) - 1.0).abs() < 1e-15);
        let z = ParameterVector::zeros(2);
        assert_eq!(normalized_distance(&z, &z), 0.0);
    }

    #[test]
    fn mean_sem_basic() {
        let (m, s) = mean_sem(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m, 2.5);
        assert!((s - (5.0f64 / 3.0 / 4.0).sqrt()).abs() < 1e-15);
        assert_eq!(mean_sem(&[3.0]), (3.0, 0.0));
    }
}
