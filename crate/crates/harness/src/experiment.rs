//! Experiment recipes and their file outputs.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use asgd_core::engine::{
    assign_shards, draw_batched_sample_path, train, TrainOptions, TrainOutput, TrainingRun,
};
use asgd_core::fmt::real;
use asgd_core::model::{generate_synthetic, Dataset, LossModel};
use asgd_core::seed;
use asgd_core::stability::{
    evaluate, mean_sem, replicate_setup, twin_run, EnsembleConfig, MetricsConfig, NeighborMode,
    ReplicateSeeds, StabilityTrace,
};
use asgd_core::theory::{bound_row, theorem2_bound, write_bound_csv, BoundInputs, BoundRow, Theorem2};
use log::info;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::acceptance::{self, CriterionResult};
use crate::config::{ExperimentConfig, ExperimentKind, SweepPoint};
use crate::{HarnessError, Result};

pub const MANIFEST: &str = "manifest.json";
pub const SUMMARY: &str = "summary.csv";
pub const CURVES: &str = "curves.csv";

/// Model and datasets shared by every run of an experiment.
pub struct Workload {
    pub model: LossModel,
    pub train: Dataset,
    pub test: Dataset,
    pub panel: Dataset,
}

/// Seeds that determine the workload and every replicate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedRecord {
    pub master: u64,
    pub data: u64,
    pub test: u64,
    pub panel: u64,
    /// Ensemble seed; the same replicate seeds are reused at every sweep
    /// point so that points are compared on paired randomness.
    pub replicates: u64,
    pub per_replicate: Vec<ReplicateSeeds>,
}

impl SeedRecord {
    pub fn derive(cfg: &ExperimentConfig) -> Self {
        let master = cfg.master_seed;
        let replicates = seed::derive(master, "replicates", 0);
        SeedRecord {
            master,
            data: seed::derive(master, "data", 0),
            test: seed::derive(master, "test", 0),
            panel: seed::derive(master, "panel", 0),
            replicates,
            per_replicate: (0..cfg.replicates)
                .map(|r| ReplicateSeeds::derive(replicates, r))
                .collect(),
        }
    }
}

impl Workload {
    pub fn build(cfg: &ExperimentConfig, seeds: &SeedRecord) -> Result<Self> {
        let model = cfg.loss_model()?;
        let train = generate_synthetic(&cfg.synthetic_spec(), seeds.data)?;
        let generator = train.generator()?;
        Ok(Workload {
            model,
            test: generator.dataset(cfg.test_size, seeds.test),
            panel: generator.dataset(cfg.panel_size, seeds.panel),
            train,
        })
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub kind: ExperimentKind,
    pub config: ExperimentConfig,
    pub seeds: SeedRecord,
    pub files: Vec<String>,
    /// Seconds since the Unix epoch; the only field that differs between
    /// reruns.
    pub created_unix: u64,
}

#[derive(Debug)]
pub struct RunReport {
    pub output_dir: PathBuf,
    pub files: Vec<PathBuf>,
    pub acceptance: Option<Vec<CriterionResult>>,
}

impl RunReport {
    pub fn failed_criteria(&self) -> usize {
        self.acceptance
            .as_ref()
            .map_or(0, |r| r.iter().filter(|c| !c.passed).count())
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| HarnessError::io(path, e))
}

fn finish(mut out: BufWriter<File>, path: &Path) -> Result<()> {
    out.flush().map_err(|e| HarnessError::io(path, e))
}

fn write_with<F>(path: &Path, body: F) -> Result<()>
where
    F: FnOnce(&mut BufWriter<File>) -> std::io::Result<()>,
{
    let mut out = create(path)?;
    body(&mut out).map_err(|e| HarnessError::io(path, e))?;
    finish(out, path)
}

fn core_io(path: &Path, e: asgd_core::Error) -> HarnessError {
    match e {
        asgd_core::Error::Io(source) => HarnessError::io(path, source),
        other => HarnessError::Core(other),
    }
}

/// Runs the experiment described by `cfg` and writes its files into
/// `cfg.output_dir`.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunReport> {
    cfg.validate()?;
    let dir = &cfg.output_dir;
    fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
    let seeds = SeedRecord::derive(cfg);
    info!("{} into {}", cfg.kind, dir.display());
    let mut acceptance = None;
    let files = match cfg.kind {
        ExperimentKind::SingleRun => single_run(cfg, &seeds)?,
        ExperimentKind::TwinRun | ExperimentKind::DelaySweep | ExperimentKind::RateSweep => {
            twin_experiment(cfg, &seeds)?
        }
        ExperimentKind::BoundSweep => bound_sweep(cfg)?,
        ExperimentKind::AcceptanceSuite => {
            let (files, results) = acceptance_suite(cfg)?;
            acceptance = Some(results);
            files
        }
    };
    let manifest = Manifest {
        tool: env!("CARGO_PKG_NAME").to_string(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        kind: cfg.kind,
        config: cfg.clone(),
        seeds,
        files: files.iter().map(|f| f.display().to_string()).collect(),
        created_unix: SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map_or(0, |d| d.as_secs()),
    };
    let path = dir.join(MANIFEST);
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serialises");
    fs::write(&path, json + "\n").map_err(|e| HarnessError::io(&path, e))?;
    let mut all: Vec<PathBuf> = files.iter().map(|f| dir.join(f)).collect();
    all.push(path);
    Ok(RunReport {
        output_dir: dir.clone(),
        files: all,
        acceptance,
    })
}

pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
    serde_json::from_str(&text)
        .map_err(|e| HarnessError::Input(format!("{}: malformed manifest: {e}", path.display())))
}

/// Re-runs the experiment recorded in a manifest, optionally into a
/// different directory.
pub fn replay(manifest_path: &Path, output_dir: Option<&Path>) -> Result<RunReport> {
    let manifest = read_manifest(manifest_path)?;
    let mut cfg = manifest.config.clone();
    if let Some(dir) = output_dir {
        cfg.output_dir = dir.to_path_buf();
    }
    let derived = SeedRecord::derive(&cfg);
    if derived != manifest.seeds {
        return Err(HarnessError::Input(format!(
            "{}: recorded seeds do not match the seeds derived from master seed {}",
            manifest_path.display(),
            cfg.master_seed
        )));
    }
    run_experiment(&cfg)
}

// ---------------------------------------------------------------- single run

/// Final metrics of one plain training run.
#[derive(Clone, Copy, Debug)]
pub struct RunMetrics {
    pub train_loss: f64,
    pub test_loss: f64,
    pub train_misclass: f64,
    pub test_misclass: f64,
    pub clip_fraction: f64,
}

pub fn train_replicate(
    cfg: &ExperimentConfig,
    work: &Workload,
    point: SweepPoint,
    seeds: &ReplicateSeeds,
) -> Result<TrainOutput> {
    let shards = assign_shards(cfg.n, cfg.p, seeds.shards)?;
    let samples = draw_batched_sample_path(&shards, cfg.horizon, cfg.batch, seeds.samples)?;
    let delays = cfg
        .delay_plan(point.tau_bar)
        .realize(cfg.p, cfg.horizon, seeds.delays)?;
    let rates = cfg.rates(point.c)?;
    let w0 = work.model.initial_point(seeds.init);
    let run = TrainingRun {
        model: &work.model,
        dataset: &work.train,
        shards: &shards,
        samples: &samples,
        delays: &delays,
        rates: &rates,
        w0: &w0,
        horizon: cfg.horizon,
    };
    Ok(train(run, TrainOptions::default())?)
}

fn single_run(cfg: &ExperimentConfig, seeds: &SeedRecord) -> Result<Vec<PathBuf>> {
    let work = Workload::build(cfg, seeds)?;
    let point = cfg.points()[0];
    let results = seeds
        .per_replicate
        .par_iter()
        .enumerate()
        .map(|(r, s)| -> Result<(PathBuf, RunMetrics)> {
            let out = train_replicate(cfg, &work, point, s)?;
            let name = PathBuf::from(format!("run_r{r}.csv"));
            let path = cfg.output_dir.join(&name);
            let file = create(&path)?;
            out.write_trajectory(file).map_err(|e| core_io(&path, e))?;
            let (train_loss, train_misclass) = evaluate(&work.model, &out.final_w, &work.train)?;
            let (test_loss, test_misclass) = evaluate(&work.model, &out.final_w, &work.test)?;
            let calls = out.stats.gradient_calls.max(1) as f64;
            Ok((
                name,
                RunMetrics {
                    train_loss,
                    test_loss,
                    train_misclass,
                    test_misclass,
                    clip_fraction: out.stats.clipped as f64 / calls,
                },
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    let metrics: Vec<RunMetrics> = results.iter().map(|r| r.1).collect();
    let path = cfg.output_dir.join(SUMMARY);
    write_with(&path, |out| {
        writeln!(
            out,
            "tau_bar,c,replicates,train_loss_mean,train_loss_se,test_loss_mean,test_loss_se,\
             gap_loss_mean,gap_loss_se,gap_misclass_mean,gap_misclass_se,clip_fraction"
        )?;
        let col = |f: &dyn Fn(&RunMetrics) -> f64| {
            let values: Vec<f64> = metrics.iter().map(f).collect();
            let (m, se) = mean_sem(&values);
            format!("{},{}", real(m), real(se))
        };
        let clip = metrics.iter().map(|m| m.clip_fraction).sum::<f64>() / metrics.len() as f64;
        writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            point.tau_bar,
            real(point.c),
            metrics.len(),
            col(&|m| m.train_loss),
            col(&|m| m.test_loss),
            col(&|m| (m.train_loss - m.test_loss).abs()),
            col(&|m| (m.train_misclass - m.test_misclass).abs()),
            real(clip)
        )
    })?;
    let mut files: Vec<PathBuf> = results.into_iter().map(|r| r.0).collect();
    files.push(PathBuf::from(SUMMARY));
    Ok(files)
}

// ---------------------------------------------------------------- twin runs

pub struct TwinReplicate {
    pub seeds: ReplicateSeeds,
    pub trace: StabilityTrace,
    /// `|f(w_T; z) - f(w'_T; z)|` over the held-out panel.
    pub panel_gaps: Vec<f64>,
}

pub struct TwinPoint {
    pub point: SweepPoint,
    pub replicates: Vec<TwinReplicate>,
}

/// Runs every replicate of every point concurrently. Results keep the
/// order of `points` and of the replicate index.
pub fn run_twin_points(
    cfg: &ExperimentConfig,
    work: &Workload,
    seeds: &SeedRecord,
    points: &[SweepPoint],
) -> Result<Vec<TwinPoint>> {
    let jobs: Vec<(usize, usize)> = (0..points.len())
        .flat_map(|k| (0..cfg.replicates).map(move |r| (k, r)))
        .collect();
    let mut done = jobs
        .par_iter()
        .map(|&(k, r)| -> Result<TwinReplicate> {
            let point = points[k];
            let ens = EnsembleConfig {
                workers: cfg.p,
                horizon: cfg.horizon,
                batch: cfg.batch,
                delays: cfg.delay_plan(point.tau_bar),
                rates: cfg.rates(point.c)?,
                w0: None,
                replicates: cfg.replicates,
                seed: seeds.replicates,
                neighbor: NeighborMode::FreshDraw,
            };
            let (rep_seeds, pair, coupling) = replicate_setup(&work.model, &work.train, &ens, r)?;
            let metrics = MetricsConfig {
                test: &work.test,
                every: cfg.eval_every,
            };
            let trace = twin_run(&work.model, &pair, &coupling, Some(metrics))?;
            let panel_gaps = work
                .panel
                .points()
                .iter()
                .map(|z| {
                    Ok((work.model.loss(&trace.final_base, z)?
                        - work.model.loss(&trace.final_variant, z)?)
                    .abs())
                })
                .collect::<Result<Vec<f64>>>()?;
            Ok(TwinReplicate {
                seeds: rep_seeds,
                trace,
                panel_gaps,
            })
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter();
    Ok(points
        .iter()
        .map(|&point| TwinPoint {
            point,
            replicates: done.by_ref().take(cfg.replicates).collect(),
        })
        .collect())
}

/// Replicate mean and standard error of one quantity.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub se: f64,
}

impl Stat {
    pub fn of(values: &[f64]) -> Self {
        let (mean, se) = mean_sem(values);
        Stat { mean, se }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TwinSummary {
    pub point: SweepPoint,
    pub replicates: usize,
    pub final_delta: Stat,
    pub final_norm_dist: Stat,
    pub final_gap_loss: Stat,
    pub final_gap_misclass: Stat,
    /// Mean of the loss gap over the evaluations with `1 <= t <= early_until`.
    pub early_gap_loss: Stat,
    /// Largest panel-point mean of `|f(w_T; z) - f(w'_T; z)|`.
    pub stability_estimate: f64,
    pub clip_fraction: f64,
}

fn early_gap(trace: &StabilityTrace, until: usize) -> f64 {
    let gaps: Vec<f64> = trace
        .records
        .iter()
        .filter(|r| r.t >= 1 && r.t <= until)
        .filter_map(|r| r.gen_loss_gap)
        .collect();
    if gaps.is_empty() {
        f64::NAN
    } else {
        gaps.iter().sum::<f64>() / gaps.len() as f64
    }
}

pub fn summarize(point: &TwinPoint, early_until: usize) -> TwinSummary {
    let reps = &point.replicates;
    let last = |f: &dyn Fn(&asgd_core::stability::TraceRecord) -> f64| -> Stat {
        let values: Vec<f64> = reps
            .iter()
            .map(|r| f(r.trace.records.last().expect("trace has t = 0")))
            .collect();
        Stat::of(&values)
    };
    let panel = reps[0].panel_gaps.len();
    let stability_estimate = (0..panel)
        .map(|k| reps.iter().map(|r| r.panel_gaps[k]).sum::<f64>() / reps.len() as f64)
        .fold(0.0, f64::max);
    let calls: usize = reps.iter().map(|r| r.trace.gradient_calls).sum();
    let clipped: usize = reps.iter().map(|r| r.trace.clipped).sum();
    TwinSummary {
        point: point.point,
        replicates: reps.len(),
        final_delta: last(&|r| r.delta),
        final_norm_dist: last(&|r| r.normalized_distance),
        final_gap_loss: last(&|r| r.gen_loss_gap.unwrap_or(f64::NAN)),
        final_gap_misclass: last(&|r| r.gen_misclass_gap.unwrap_or(f64::NAN)),
        early_gap_loss: Stat::of(
            &reps
                .iter()
                .map(|r| early_gap(&r.trace, early_until))
                .collect::<Vec<_>>(),
        ),
        stability_estimate,
        clip_fraction: clipped as f64 / calls.max(1) as f64,
    }
}

pub const SUMMARY_HEADER: &str = "tau_bar,c,replicates,final_delta_mean,final_delta_se,\
final_norm_dist_mean,final_norm_dist_se,final_gap_loss_mean,final_gap_loss_se,\
final_gap_misclass_mean,final_gap_misclass_se,early_gap_loss_mean,early_gap_loss_se,\
stability_estimate,clip_fraction";

pub const CURVES_HEADER: &str = "tau_bar,c,t,delta_mean,delta_se,norm_dist_mean,norm_dist_se,\
gap_loss_mean,gap_loss_se,gap_misclass_mean,gap_misclass_se";

fn stat_cells(s: Stat) -> String {
    format!("{},{}", real(s.mean), real(s.se))
}

fn write_summary(path: &Path, rows: &[TwinSummary]) -> Result<()> {
    write_with(path, |out| {
        writeln!(out, "{SUMMARY_HEADER}")?;
        for s in rows {
            writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{}",
                s.point.tau_bar,
                real(s.point.c),
                s.replicates,
                stat_cells(s.final_delta),
                stat_cells(s.final_norm_dist),
                stat_cells(s.final_gap_loss),
                stat_cells(s.final_gap_misclass),
                stat_cells(s.early_gap_loss),
                real(s.stability_estimate),
                real(s.clip_fraction)
            )?;
        }
        Ok(())
    })
}

fn write_curves(path: &Path, points: &[TwinPoint]) -> Result<()> {
    write_with(path, |out| {
        writeln!(out, "{CURVES_HEADER}")?;
        for tp in points {
            let reps = &tp.replicates;
            let horizon = reps[0].trace.horizon();
            for t in 0..=horizon {
                if reps[0].trace.records[t].gen_loss_gap.is_none() {
                    continue;
                }
                let column = |f: &dyn Fn(&asgd_core::stability::TraceRecord) -> Option<f64>| {
                    let values: Vec<f64> = reps
                        .iter()
                        .map(|r| f(&r.trace.records[t]).unwrap_or(f64::NAN))
                        .collect();
                    stat_cells(Stat::of(&values))
                };
                writeln!(
                    out,
                    "{},{},{},{},{},{},{}",
                    tp.point.tau_bar,
                    real(tp.point.c),
                    t,
                    column(&|r| Some(r.delta)),
                    column(&|r| Some(r.normalized_distance)),
                    column(&|r| r.gen_loss_gap),
                    column(&|r| r.gen_misclass_gap)
                )?;
            }
        }
        Ok(())
    })
}

fn trace_name(kind: ExperimentKind, point: SweepPoint, r: usize) -> PathBuf {
    match kind {
        ExperimentKind::TwinRun => PathBuf::from(format!("trace_r{r}.csv")),
        _ => PathBuf::from(format!("trace_{}_r{r}.csv", point.label())),
    }
}

fn twin_experiment(cfg: &ExperimentConfig, seeds: &SeedRecord) -> Result<Vec<PathBuf>> {
    let work = Workload::build(cfg, seeds)?;
    let points = cfg.points();
    let results = run_twin_points(cfg, &work, seeds, &points)?;
    let mut files = Vec::new();
    for tp in &results {
        for (r, rep) in tp.replicates.iter().enumerate() {
            let name = trace_name(cfg.kind, tp.point, r);
            let path = cfg.output_dir.join(&name);
            let file = create(&path)?;
            rep.trace.write_csv(file).map_err(|e| core_io(&path, e))?;
            files.push(name);
        }
    }
    let summaries: Vec<TwinSummary> = results
        .iter()
        .map(|tp| summarize(tp, cfg.early_until))
        .collect();
    for s in &summaries {
        info!(
            "tau_bar={} c={}: delta_T={:.4e} gap_loss_T={:.4e} early_gap={:.4e}",
            s.point.tau_bar,
            s.point.c,
            s.final_delta.mean,
            s.final_gap_loss.mean,
            s.early_gap_loss.mean
        );
    }
    write_summary(&cfg.output_dir.join(SUMMARY), &summaries)?;
    write_curves(&cfg.output_dir.join(CURVES), &results)?;
    files.push(PathBuf::from(SUMMARY));
    files.push(PathBuf::from(CURVES));
    Ok(files)
}

// ---------------------------------------------------------------- bounds

pub const BOUNDS: &str = "bounds.csv";
pub const THEOREM2: &str = "theorem2.csv";

/// Every `(tau_bar, c, T)` combination of the bound sweep.
pub fn bound_inputs(cfg: &ExperimentConfig) -> Result<Vec<BoundInputs>> {
    let model = cfg.loss_model()?;
    let lipschitz = model.lipschitz();
    let smoothness = model.smoothness().ok_or_else(|| HarnessError::Config {
        field: "model".into(),
        reason: "no declared smoothness constant".into(),
    })?;
    Ok(cfg
        .points()
        .iter()
        .flat_map(|pt| {
            cfg.horizons.iter().map(move |&horizon| BoundInputs {
                lipschitz,
                smoothness,
                c: pt.c,
                max_delay: pt.tau_bar,
                n: cfg.n,
                p: cfg.p,
                horizon,
            })
        })
        .collect())
}

fn bound_sweep(cfg: &ExperimentConfig) -> Result<Vec<PathBuf>> {
    let inputs = bound_inputs(cfg)?;
    let unit = cfg.loss_model()?.unit_range();
    let rows = inputs
        .par_iter()
        .map(|b| -> Result<(BoundRow, Theorem2)> { Ok((bound_row(b)?, theorem2_bound(b, unit)?)) })
        .collect::<Result<Vec<_>>>()?;
    let path = cfg.output_dir.join(BOUNDS);
    let out = create(&path)?;
    let table: Vec<BoundRow> = rows.iter().map(|r| r.0).collect();
    write_bound_csv(&table, out).map_err(|e| core_io(&path, e))?;
    let path = cfg.output_dir.join(THEOREM2);
    write_with(&path, |out| {
        writeln!(
            out,
            "L,beta,c,tau_bar,n,p,T,k,printed,t0_star,exact_min,exact_argmin,ratio,flagged,premise_holds"
        )?;
        for (row, t2) in &rows {
            let i = &row.inputs;
            writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
                real(i.lipschitz),
                real(i.smoothness),
                real(i.c),
                i.max_delay,
                i.n,
                i.p,
                i.horizon,
                real(t2.k),
                real(t2.bound),
                real(t2.t0_star),
                real(t2.exact_min),
                t2.exact_argmin,
                real(t2.ratio),
                t2.flagged,
                t2.premise_holds
            )?;
        }
        Ok(())
    })?;
    Ok(vec![PathBuf::from(BOUNDS), PathBuf::from(THEOREM2)])
}

// ---------------------------------------------------------------- acceptance

pub const ACCEPTANCE: &str = "acceptance.csv";

fn acceptance_suite(cfg: &ExperimentConfig) -> Result<(Vec<PathBuf>, Vec<CriterionResult>)> {
    let scratch = cfg.output_dir.join("determinism");
    let results = acceptance::run_all(cfg.master_seed, &scratch)?;
    let path = cfg.output_dir.join(ACCEPTANCE);
    write_with(&path, |out| {
        writeln!(out, "criterion,name,passed,detail")?;
        for r in &results {
            writeln!(
                out,
                "{},{},{},\"{}\"",
                r.id,
                r.name,
                r.passed,
                r.detail.replace('"', "'")
            )?;
        }
        Ok(())
    })?;
    Ok((vec![PathBuf::from(ACCEPTANCE)], results))
}
