//! Parameter-server update with stale gradients, simulated in logical time.
//!
//! At server step `t` worker `j` contributes the gradient of a sample from
//! its own shard evaluated at the buffered iterate `w_{t - tau(j, t)}`:
//!
//! ```text
//! w_{t+1} = w_t - (gamma_t / p) * sum_j grad f(w_{t - tau(j,t)}; z_{xi(j,t)})
//! ```
//!
//! Gradients are summed in ascending worker order in `f64`, which makes a
//! trajectory a pure function of its inputs.

use std::collections::VecDeque;
use std::io::Write;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::model::{Dataset, LossModel};
use crate::schedule::{DelaySchedule, LearningRateSchedule, Validation};
use crate::{fmt, seed, Error, ParameterVector, Result};

/// Disjoint equal-size shards covering `[0, n)`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShardAssignment {
    shards: Vec<Vec<usize>>,
    owner: Vec<usize>,
    seed: u64,
}

impl ShardAssignment {
    pub fn worker_count(&self) -> usize {
        self.shards.len()
    }

    pub fn shard(&self, worker: usize) -> &[usize] {
        &self.shards[worker]
    }

    pub fn shards(&self) -> &[Vec<usize>] {
        &self.shards
    }

    /// Worker holding data index `index`.
    pub fn owner(&self, index: usize) -> usize {
        self.owner[index]
    }

    pub fn len(&self) -> usize {
        self.owner.len()
    }

    pub fn is_empty(&self) -> bool {
        self.owner.is_empty()
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }
}

/// Seeded uniform partition of `[0, n)` into `p` shards of size `n / p`.
pub fn assign_shards(n: usize, p: usize, seed: u64) -> Result<ShardAssignment> {
    if p == 0 || n == 0 || !n.is_multiple_of(p) {
        return Err(Error::NotDivisible { n, p });
    }
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut seed::rng(seed));
    let size = n / p;
    let mut owner = vec![0; n];
    let shards: Vec<Vec<usize>> = perm
        .chunks_exact(size)
        .enumerate()
        .map(|(j, chunk)| {
            let mut shard = chunk.to_vec();
            shard.sort_unstable();
            for &i in &shard {
                owner[i] = j;
            }
            shard
        })
        .collect();
    Ok(ShardAssignment {
        shards,
        owner,
        seed,
    })
}

/// Data indices `xi(j, t)` sampled by each worker at each step.
///
/// With `batch > 1` every cell holds `batch` independent draws.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SamplePath {
    horizon: usize,
    batch: usize,
    /// Row `j` holds `horizon * batch` indices, step-major.
    indices: Vec<Vec<usize>>,
    seed: u64,
}

impl SamplePath {
    pub fn worker_count(&self) -> usize {
        self.indices.len()
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// The batch drawn by `worker` at `step`.
    pub fn batch_at(&self, worker: usize, step: usize) -> &[usize] {
        let start = step * self.batch;
        &self.indices[worker][start..start + self.batch]
    }

    /// First (for `batch == 1`, only) index drawn by `worker` at `step`.
    pub fn index(&self, worker: usize, step: usize) -> usize {
        self.indices[worker][step * self.batch]
    }
}

/// `xi(j, t)` drawn uniformly from shard `j` by a counter-based stream keyed
/// on `(seed, j, t)`.
pub fn draw_sample_path(shards: &ShardAssignment, horizon: usize, seed: u64) -> Result<SamplePath> {
    draw_batched_sample_path(shards, horizon, 1, seed)
}

pub fn draw_batched_sample_path(
    shards: &ShardAssignment,
    horizon: usize,
    batch: usize,
    seed: u64,
) -> Result<SamplePath> {
    if horizon == 0 {
        return Err(Error::invalid("T", "horizon must be at least 1"));
    }
    if batch == 0 {
        return Err(Error::invalid("batch", "must be at least 1"));
    }
    let indices = shards
        .shards
        .iter()
        .enumerate()
        .map(|(j, shard)| {
            (0..horizon)
                .flat_map(|t| {
                    (0..batch).map(move |k| {
                        let word = seed::counter_u64(seed, j as u64, t as u64, k as u64);
                        shard[seed::below(word, shard.len())]
                    })
                })
                .collect()
        })
        .collect();
    Ok(SamplePath {
        horizon,
        batch,
        indices,
        seed,
    })
}

/// Ring of the most recent `tau_bar + 1` iterates, each tagged with its step.
#[derive(Clone, Debug)]
pub struct IterateBuffer {
    capacity: usize,
    ring: VecDeque<(usize, ParameterVector)>,
}

impl IterateBuffer {
    /// Starts at step 0 holding `w0`.
    pub fn new(max_delay: usize, w0: ParameterVector) -> Self {
        let capacity = max_delay + 1;
        let mut ring = VecDeque::with_capacity(capacity);
        ring.push_back((0, w0));
        IterateBuffer { capacity, ring }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.ring.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ring.is_empty()
    }

    pub fn newest_step(&self) -> usize {
        self.ring.back().map(|(s, _)| *s).unwrap_or(0)
    }

    pub fn oldest_step(&self) -> usize {
        self.ring.front().map(|(s, _)| *s).unwrap_or(0)
    }

    pub fn newest(&self) -> &ParameterVector {
        &self.ring.back().expect("buffer is never empty").1
    }

    /// The iterate of `step`; its tag is checked.
    pub fn get(&self, step: usize) -> Result<&ParameterVector> {
        let missing = || Error::MissingIterate {
            step,
            oldest: self.oldest_step(),
            newest: self.newest_step(),
        };
        let oldest = self.oldest_step();
        let slot = step.checked_sub(oldest).ok_or_else(missing)?;
        match self.ring.get(slot) {
            Some((tag, w)) if *tag == step => Ok(w),
            _ => Err(missing()),
        }
    }

    fn push(&mut self, step: usize, w: ParameterVector) {
        if self.ring.len() == self.capacity {
            self.ring.pop_front();
        }
        self.ring.push_back((step, w));
    }

    /// Storage that [`IterateBuffer::push`] is about to evict, reused to
    /// avoid an allocation per step.
    fn recycle(&mut self) -> Option<ParameterVector> {
        if self.ring.len() == self.capacity && self.capacity > 1 {
            self.ring.pop_front().map(|(_, w)| w)
        } else {
            None
        }
    }
}

/// Everything one trajectory depends on.
#[derive(Clone, Copy, Debug)]
pub struct TrainingRun<'a> {
    pub model: &'a LossModel,
    pub dataset: &'a Dataset,
    pub shards: &'a ShardAssignment,
    pub samples: &'a SamplePath,
    pub delays: &'a DelaySchedule,
    pub rates: &'a LearningRateSchedule,
    pub w0: &'a ParameterVector,
    pub horizon: usize,
}

impl<'a> TrainingRun<'a> {
    /// Checks that dimensions, worker counts and horizons agree.
    pub fn validate(&self) -> Result<()> {
        let p = self.shards.worker_count();
        if self.dataset.len() != self.shards.len() {
            return Err(Error::Inconsistent(format!(
                "dataset has {} points but shards cover {}",
                self.dataset.len(),
                self.shards.len()
            )));
        }
        if self.dataset.d_in() != self.model.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.model.input_dim(),
                got: self.dataset.d_in(),
            });
        }
        if self.w0.dim() != self.model.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.model.dim(),
                got: self.w0.dim(),
            });
        }
        if self.samples.worker_count() != p || self.delays.worker_count() != p {
            return Err(Error::Inconsistent(format!(
                "worker counts disagree: shards {p}, samples {}, delays {}",
                self.samples.worker_count(),
                self.delays.worker_count()
            )));
        }
        if self.horizon > 0
            && (self.samples.horizon() < self.horizon || self.delays.horizon() < self.horizon)
        {
            return Err(Error::Inconsistent(format!(
                "horizon {} exceeds sample path ({}) or delay schedule ({})",
                self.horizon,
                self.samples.horizon(),
                self.delays.horizon()
            )));
        }
        if let Validation::Violation {
            worker,
            step,
            constraint,
        } = self.delays.validate()
        {
            return Err(Error::Inconsistent(format!(
                "delay schedule invalid at worker {worker}, step {step}: {constraint}"
            )));
        }
        for (j, shard) in self.shards.shards().iter().enumerate() {
            for t in 0..self.horizon {
                for &i in self.samples.batch_at(j, t) {
                    if shard.binary_search(&i).is_err() {
                        return Err(Error::Inconsistent(format!(
                            "worker {j} sampled index {i} outside its shard at step {t}"
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn worker_count(&self) -> usize {
        self.shards.worker_count()
    }
}

/// Counters from one server step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct StepStats {
    pub gradient_calls: usize,
    pub clipped: usize,
}

/// Computes `w_{t+1}` from the buffered iterates and pushes it.
///
/// Requires `buffer.newest_step() == t`.
pub fn step(run: &TrainingRun<'_>, buffer: &mut IterateBuffer, t: usize) -> Result<StepStats> {
    if buffer.newest_step() != t {
        return Err(Error::MissingIterate {
            step: t,
            oldest: buffer.oldest_step(),
            newest: buffer.newest_step(),
        });
    }
    let p = run.worker_count();
    let batch = run.samples.batch();
    let d = run.model.dim();
    let mut sum = vec![0.0; d];
    let mut stats = StepStats::default();
    let points = run.dataset.points();
    for j in 0..p {
        let tau = run.delays.delay(j, t);
        let source = t.checked_sub(tau).ok_or(Error::MissingIterate {
            step: t,
            oldest: buffer.oldest_step(),
            newest: buffer.newest_step(),
        })?;
        let stale = buffer.get(source)?;
        let inv_batch = 1.0 / batch as f64;
        for &i in run.samples.batch_at(j, t) {
            let eval = run.model.gradient_eval(stale, &points[i])?;
            stats.gradient_calls += 1;
            stats.clipped += eval.clipped as usize;
            if batch == 1 {
                sum.iter_mut().zip(&eval.gradient).for_each(|(s, g)| *s += g);
            } else {
                sum.iter_mut()
                    .zip(&eval.gradient)
                    .for_each(|(s, g)| *s += g * inv_batch);
            }
        }
    }
    let factor = run.rates.rate_at(t) / p as f64;
    let mut next = buffer
        .recycle()
        .unwrap_or_else(|| ParameterVector::zeros(d));
    // After recycling, the newest entry is still w_t.
    let current = buffer.newest();
    for ((n, w), s) in next.iter_mut().zip(current.iter()).zip(&sum) {
        *n = w - factor * s;
    }
    next.ensure_finite("server update")?;
    buffer.push(t + 1, next);
    Ok(stats)
}

/// A trajectory that can be advanced one server step at a time.
#[derive(Debug)]
pub struct Simulation<'a> {
    run: TrainingRun<'a>,
    buffer: IterateBuffer,
    t: usize,
    stats: StepStats,
}

impl<'a> Simulation<'a> {
    pub fn new(run: TrainingRun<'a>) -> Result<Self> {
        run.validate()?;
        let buffer = IterateBuffer::new(run.delays.max_delay(), run.w0.clone());
        Ok(Simulation {
            run,
            buffer,
            t: 0,
            stats: StepStats::default(),
        })
    }

    pub fn run(&self) -> &TrainingRun<'a> {
        &self.run
    }

    /// Index of the current iterate.
    pub fn t(&self) -> usize {
        self.t
    }

    pub fn is_done(&self) -> bool {
        self.t >= self.run.horizon
    }

    pub fn current(&self) -> &ParameterVector {
        self.buffer.newest()
    }

    pub fn buffer(&self) -> &IterateBuffer {
        &self.buffer
    }

    pub fn stats(&self) -> StepStats {
        self.stats
    }

    pub fn advance(&mut self) -> Result<&ParameterVector> {
        if self.is_done() {
            return Err(Error::Inconsistent(format!(
                "horizon {} already reached",
                self.run.horizon
            )));
        }
        let s = step(&self.run, &mut self.buffer, self.t)?;
        self.stats.gradient_calls += s.gradient_calls;
        self.stats.clipped += s.clipped;
        self.t += 1;
        Ok(self.buffer.newest())
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct TrainOptions {
    /// Keep every iterate `w_0..w_T`.
    pub record_history: bool,
}

/// Result of [`train`].
#[derive(Clone, Debug)]
pub struct TrainOutput {
    pub final_w: ParameterVector,
    pub history: Option<Vec<ParameterVector>>,
    /// Mean loss at `w_t` over the points sampled at step `t`.
    pub train_loss: Vec<f64>,
    /// `||w_t||` for `t = 0..T`.
    pub w_norm: Vec<f64>,
    /// `||w_{t+1} - w_t||` for `t = 0..T`.
    pub step_norm: Vec<f64>,
    pub stats: StepStats,
}

impl TrainOutput {
    /// Writes `t, train_loss, ||w||, ||w_{t+1}-w_t||`, one line per step.
    pub fn write_trajectory<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "t,train_loss,w_norm,step_norm")?;
        for t in 0..self.train_loss.len() {
            writeln!(
                out,
                "{t},{},{},{}",
                fmt::real(self.train_loss[t]),
                fmt::real(self.w_norm[t]),
                fmt::real(self.step_norm[t])
            )?;
        }
        Ok(())
    }
}

/// Runs steps `t = 0..T-1`.
pub fn train(run: TrainingRun<'_>, options: TrainOptions) -> Result<TrainOutput> {
    let mut sim = Simulation::new(run)?;
    let mut history = options.record_history.then(|| vec![run.w0.clone()]);
    let mut train_loss = Vec::with_capacity(run.horizon);
    let mut w_norm = Vec::with_capacity(run.horizon);
    let mut step_norm = Vec::with_capacity(run.horizon);
    let points = run.dataset.points();
    let p = run.worker_count();
    while !sim.is_done() {
        let t = sim.t();
        let w = sim.current().clone();
        let mut loss = 0.0;
        let mut count = 0usize;
        for j in 0..p {
            for &i in run.samples.batch_at(j, t) {
                loss += run.model.loss(&w, &points[i])?;
                count += 1;
            }
        }
        train_loss.push(loss / count as f64);
        w_norm.push(w.norm());
        let next = sim.advance()?;
        step_norm.push(next.distance(&w));
        if let Some(h) = history.as_mut() {
            h.push(next.clone());
        }
    }
    Ok(TrainOutput {
        final_w: sim.current().clone(),
        history,
        train_loss,
        w_norm,
        step_norm,
        stats: sim.stats(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{DataPoint, TaskKind};
    use crate::schedule::make_worst_case_growth;
    use std::collections::BTreeSet;

    #[test]
    fn shards_partition() {
        let s = assign_shards(4, 2, 0).unwrap();
        assert_eq!(s.worker_count(), 2);
        let all: BTreeSet<usize> = s.shards().iter().flatten().copied().collect();
        assert_eq!(all, (0..4).collect());
        assert!(s.shards().iter().all(|sh| sh.len() == 2));
        let s = assign_shards(4, 4, 0).unwrap();
        assert!(s.shards().iter().all(|sh| sh.len() == 1));
        assert!(matches!(assign_shards(5, 2, 0), Err(Error::NotDivisible { n: 5, p: 2 })));
    }

    #[test]
    fn singleton_shards_sample_constantly() {
        let s = assign_shards(3, 3, 1).unwrap();
        let path = draw_sample_path(&s, 20, 5).unwrap();
        for j in 0..3 {
            assert!((0..20).all(|t| path.index(j, t) == s.shard(j)[0]));
        }
        assert_eq!(path, draw_sample_path(&s, 20, 5).unwrap());
        assert!(draw_sample_path(&s, 0, 5).is_err());
    }

    #[test]
    fn buffer_eviction_and_tags() {
        let mut b = IterateBuffer::new(2, ParameterVector::zeros(1));
        for t in 0..5 {
            b.push(t + 1, ParameterVector::from_vec(vec![(t + 1) as f64]));
        }
        assert_eq!(b.len(), 3);
        assert_eq!(b.oldest_step(), 3);
        assert_eq!(b.get(4).unwrap()[0], 4.0);
        assert!(matches!(b.get(2), Err(Error::MissingIterate { step: 2, .. })));
        assert!(b.get(6).is_err());
    }

    fn tiny_run_parts(
        points: Vec<DataPoint>,
        p: usize,
        horizon: usize,
    ) -> (LossModel, Dataset, ShardAssignment, SamplePath) {
        let n = points.len();
        let ds = Dataset::from_points(points, TaskKind::Regression, 10.0).unwrap();
        let model = LossModel::least_squares(1, 10.0, 1e6).unwrap();
        let shards = assign_shards(n, p, 0).unwrap();
        let samples = draw_sample_path(&shards, horizon, 0).unwrap();
        (model, ds, shards, samples)
    }

    #[test]
    fn single_worker_synchronous_step() {
        let (model, ds, shards, samples) =
            tiny_run_parts(vec![DataPoint::new(vec![2.0], 3.0)], 1, 1);
        let delays = DelaySchedule::zeros(1, 1).unwrap();
        let rates = LearningRateSchedule::constant(0.1).unwrap();
        let w0 = ParameterVector::zeros(1);
        let run = TrainingRun {
            model: &model,
            dataset: &ds,
            shards: &shards,
            samples: &samples,
            delays: &delays,
            rates: &rates,
            w0: &w0,
            horizon: 1,
        };
        let out = train(run, TrainOptions::default()).unwrap();
        // grad at 0: (0 - 3) * 2 = -6, so w1 = 0.6.
        assert!((out.final_w[0] - 0.6).abs() < 1e-15);
    }

    #[test]
    fn two_workers_with_stale_read() {
        // d = 1, least squares, worker delays (0, 1) at t = 1.
        let points = vec![DataPoint::new(vec![1.0], 2.0), DataPoint::new(vec![0.5], -1.0)];
        let (model, ds, shards, samples) = tiny_run_parts(points.clone(), 2, 2);
        let delays = DelaySchedule::new(1, vec![vec![0, 0], vec![0, 1]]).unwrap();
        let rates = LearningRateSchedule::constant(0.4).unwrap();
        let w0 = ParameterVector::from_vec(vec![0.25]);
        let run = TrainingRun {
            model: &model,
            dataset: &ds,
            shards: &shards,
            samples: &samples,
            delays: &delays,
            rates: &rates,
            w0: &w0,
            horizon: 2,
        };
        let out = train(run, TrainOptions { record_history: true }).unwrap();

        let grad = |w: f64, z: &DataPoint| (w * z.features[0] - z.label) * z.features[0];
        let z_of = |j: usize| &points[shards.shard(j)[0]];
        let w0v = 0.25;
        let w1 = w0v - 0.4 / 2.0 * (grad(w0v, z_of(0)) + grad(w0v, z_of(1)));
        let w2 = w1 - 0.4 / 2.0 * (grad(w1, z_of(0)) + grad(w0v, z_of(1)));
        let h = out.history.unwrap();
        assert!((h[1][0] - w1).abs() < 1e-12);
        assert!((h[2][0] - w2).abs() < 1e-12);
    }

    #[test]
    fn zero_gradients_are_a_fixed_point() {
        let (_, ds, shards, samples) =
            tiny_run_parts((0..4).map(|i| DataPoint::new(vec![i as f64], 0.0)).collect(), 2, 10);
        let model = LossModel::constant(1, 1.0).unwrap();
        let delays = make_worst_case_growth(2, 10, 3).unwrap();
        let rates = LearningRateSchedule::constant(1.0).unwrap();
        let w0 = ParameterVector::from_vec(vec![1.5]);
        let run = TrainingRun {
            model: &model,
            dataset: &ds,
            shards: &shards,
            samples: &samples,
            delays: &delays,
            rates: &rates,
            w0: &w0,
            horizon: 10,
        };
        assert_eq!(train(run, TrainOptions::default()).unwrap().final_w, w0);
    }

    #[test]
    fn empty_horizon_returns_w0() {
        let (model, ds, shards, samples) =
            tiny_run_parts(vec![DataPoint::new(vec![1.0], 1.0)], 1, 1);
        let delays = DelaySchedule::zeros(1, 1).unwrap();
        let rates = LearningRateSchedule::constant(0.1).unwrap();
        let w0 = ParameterVector::from_vec(vec![0.7]);
        let run = TrainingRun {
            model: &model,
            dataset: &ds,
            shards: &shards,
            samples: &samples,
            delays: &delays,
            rates: &rates,
            w0: &w0,
            horizon: 0,
        };
        let out = train(run, TrainOptions::default()).unwrap();
        assert_eq!(out.final_w, w0);
        assert!(out.train_loss.is_empty());
    }

    #[test]
    fn inconsistent_runs_rejected() {
        let (model, ds, shards, samples) =
            tiny_run_parts(vec![DataPoint::new(vec![1.0], 1.0), DataPoint::new(vec![0.0], 1.0)], 2, 3);
        let delays = DelaySchedule::zeros(1, 3).unwrap();
        let rates = LearningRateSchedule::constant(0.1).unwrap();
        let w0 = ParameterVector::zeros(1);
        let run = TrainingRun {
            model: &model,
            dataset: &ds,
            shards: &shards,
            samples: &samples,
            delays: &delays,
            rates: &rates,
            w0: &w0,
            horizon: 3,
        };
        assert!(matches!(run.validate(), Err(Error::Inconsistent(_))));
        let bad = DelaySchedule::new(0, vec![vec![0, 1, 0]; 2]).unwrap();
        let run = TrainingRun { delays: &bad, ..run };
        assert!(run.validate().is_err());
    }
}
