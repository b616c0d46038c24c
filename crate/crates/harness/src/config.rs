//! Experiment configuration: a TOML key-value file whose keys are exactly
//! the field names of [`ExperimentConfig`].

use std::fmt;
use std::path::{Path, PathBuf};

use asgd_core::model::{LossModel, SyntheticSpec, TaskKind};
use asgd_core::schedule::LearningRateSchedule;
use asgd_core::stability::DelayPlan;
use serde::{Deserialize, Serialize};

use crate::HarnessError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    SingleRun,
    TwinRun,
    DelaySweep,
    RateSweep,
    BoundSweep,
    AcceptanceSuite,
}

impl ExperimentKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ExperimentKind::SingleRun => "single-run",
            ExperimentKind::TwinRun => "twin-run",
            ExperimentKind::DelaySweep => "delay-sweep",
            ExperimentKind::RateSweep => "rate-sweep",
            ExperimentKind::BoundSweep => "bound-sweep",
            ExperimentKind::AcceptanceSuite => "acceptance-suite",
        }
    }
}

impl fmt::Display for ExperimentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelChoice {
    Logistic,
    #[serde(alias = "linear-least-squares")]
    LeastSquares,
    #[serde(alias = "tiny-mlp")]
    Mlp,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DelayKind {
    FixedPerWorker,
    WorstCase,
    None,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScheduleKind {
    Theorem1,
    Experimental,
    Constant,
}

/// Every knob of an experiment. Missing keys take the defaults below.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub kind: ExperimentKind,
    pub model: ModelChoice,
    /// Hidden width of the MLP.
    pub hidden: usize,
    /// Gradient clipping level; fixed to the feature bound for logistic.
    pub clip: Option<f64>,
    pub loss_cap: Option<f64>,
    pub task: TaskKind,
    pub n: usize,
    pub d_in: usize,
    pub feature_bound: f64,
    pub class_separation: f64,
    pub label_noise: f64,
    pub test_size: usize,
    /// Held-out points for the stability estimate and the sandwich check.
    pub panel_size: usize,
    pub p: usize,
    pub horizon: usize,
    pub tau_bar: usize,
    pub tau_bars: Vec<usize>,
    pub delay_kind: DelayKind,
    pub schedule: ScheduleKind,
    pub c: f64,
    pub cs: Vec<f64>,
    /// Horizons of the bound sweep.
    pub horizons: Vec<usize>,
    pub replicates: usize,
    pub batch: usize,
    pub eval_every: usize,
    /// Last step of the early phase in summaries.
    pub early_until: usize,
    pub master_seed: u64,
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            kind: ExperimentKind::TwinRun,
            model: ModelChoice::Logistic,
            hidden: 16,
            clip: None,
            loss_cap: None,
            task: TaskKind::Logistic,
            n: 2000,
            d_in: 10,
            feature_bound: 1.0,
            class_separation: 2.0,
            label_noise: 0.1,
            test_size: 2000,
            panel_size: 512,
            p: 8,
            horizon: 500,
            tau_bar: 0,
            tau_bars: vec![0, 4, 16],
            delay_kind: DelayKind::FixedPerWorker,
            schedule: ScheduleKind::Theorem1,
            c: 0.5,
            cs: vec![0.1, 0.5],
            horizons: vec![10, 100, 1000],
            replicates: 5,
            batch: 1,
            eval_every: 50,
            early_until: 300,
            master_seed: 1,
            output_dir: PathBuf::from("out"),
        }
    }
}

/// Default clip level for models whose gradients are not bounded
/// analytically.
pub const DEFAULT_CLIP: f64 = 100.0;

/// One `(tau_bar, c)` combination of a sweep.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub tau_bar: usize,
    pub c: f64,
}

impl SweepPoint {
    /// Stable file-name fragment, e.g. `tau4_c0.5`.
    pub fn label(&self) -> String {
        format!("tau{}_c{}", self.tau_bar, self.c)
    }
}

fn bad(field: &'static str, reason: impl Into<String>) -> HarnessError {
    HarnessError::Config {
        field: field.to_string(),
        reason: reason.into(),
    }
}

fn positive(field: &'static str, v: f64) -> Result<(), HarnessError> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(bad(field, format!("must be positive and finite, got {v}")))
    }
}

fn at_least_one(field: &'static str, v: usize) -> Result<(), HarnessError> {
    if v == 0 {
        Err(bad(field, "must be at least 1"))
    } else {
        Ok(())
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, HarnessError> {
        toml::from_str(text).map_err(|e| bad("config", e.message().to_string()))
    }

    pub fn from_file(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| bad("config", format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serialises to TOML")
    }

    /// Sets one field from its textual form. Lists may be written as
    /// `0,4,16`; bare words are taken as strings.
    pub fn set(&mut self, key: &str, raw: &str) -> Result<(), HarnessError> {
        let mut table: toml::Table = toml::from_str(&self.to_toml_string())
            .map_err(|e| bad("config", e.message().to_string()))?;
        let field = field_name(key).ok_or_else(|| HarnessError::Config {
            field: key.to_string(),
            reason: "unknown field".into(),
        })?;
        table.insert(field.to_string(), parse_value(field, raw));
        let updated: ExperimentConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| HarnessError::Config {
                field: field.to_string(),
                reason: e.message().to_string(),
            })?;
        *self = updated;
        Ok(())
    }

    /// Checks every field in declaration order and names the first one
    /// that fails.
    pub fn validate(&self) -> Result<(), HarnessError> {
        let needs_sweep = |kind| self.kind == kind;
        if self.model == ModelChoice::Mlp {
            at_least_one("hidden", self.hidden)?;
        }
        if let Some(clip) = self.clip {
            if self.model == ModelChoice::Logistic {
                return Err(bad("clip", "logistic gradients are clipped at the feature bound"));
            }
            positive("clip", clip)?;
        }
        if let Some(cap) = self.loss_cap {
            positive("loss_cap", cap)?;
        }
        match (self.model, self.task.is_classification()) {
            (ModelChoice::LeastSquares, true) => {
                return Err(bad("task", "least-squares needs the regression task"))
            }
            (ModelChoice::Logistic | ModelChoice::Mlp, false) => {
                return Err(bad("task", "classification models need a classification task"))
            }
            _ => {}
        }
        at_least_one("n", self.n)?;
        at_least_one("d_in", self.d_in)?;
        positive("feature_bound", self.feature_bound)?;
        if !(self.class_separation >= 0.0 && self.class_separation.is_finite()) {
            return Err(bad("class_separation", "must be non-negative"));
        }
        if self.task.is_classification() && !(0.0..=0.5).contains(&self.label_noise) {
            return Err(bad("label_noise", "must lie in [0, 0.5]"));
        }
        if !(self.label_noise >= 0.0 && self.label_noise.is_finite()) {
            return Err(bad("label_noise", "must be non-negative"));
        }
        at_least_one("test_size", self.test_size)?;
        at_least_one("panel_size", self.panel_size)?;
        at_least_one("p", self.p)?;
        if !self.n.is_multiple_of(self.p) {
            return Err(bad("p", format!("n = {} is not divisible by p = {}", self.n, self.p)));
        }
        at_least_one("horizon", self.horizon)?;
        let taus = self.tau_values();
        if needs_sweep(ExperimentKind::DelaySweep) && self.tau_bars.is_empty() {
            return Err(bad("tau_bars", "delay-sweep needs at least one value"));
        }
        if self.delay_kind == DelayKind::FixedPerWorker
            && self.p < 2
            && taus.iter().any(|&t| t > 0)
        {
            let field = if needs_sweep(ExperimentKind::DelaySweep) {
                "tau_bars"
            } else {
                "tau_bar"
            };
            return Err(bad(field, "fixed-per-worker delays with tau_bar > 0 need p >= 2"));
        }
        if self.delay_kind == DelayKind::None && taus.iter().any(|&t| t > 0) {
            return Err(bad("delay_kind", "`none` requires tau_bar = 0"));
        }
        positive("c", self.c)?;
        if needs_sweep(ExperimentKind::RateSweep) && self.cs.is_empty() {
            return Err(bad("cs", "rate-sweep needs at least one value"));
        }
        for &c in &self.cs {
            positive("cs", c)?;
        }
        if needs_sweep(ExperimentKind::BoundSweep)
            && (self.horizons.is_empty() || self.horizons.contains(&0)) {
                return Err(bad("horizons", "bound-sweep needs positive horizons"));
            }
        at_least_one("replicates", self.replicates)?;
        at_least_one("batch", self.batch)?;
        at_least_one("eval_every", self.eval_every)?;
        if self.output_dir.as_os_str().is_empty() {
            return Err(bad("output_dir", "must not be empty"));
        }
        let model = self.loss_model()?;
        if self.kind == ExperimentKind::BoundSweep && model.smoothness().is_none() {
            return Err(bad("model", "bound-sweep needs a declared smoothness constant"));
        }
        Ok(())
    }

    fn tau_values(&self) -> Vec<usize> {
        match self.kind {
            ExperimentKind::DelaySweep | ExperimentKind::BoundSweep => self.tau_bars.clone(),
            _ => vec![self.tau_bar],
        }
    }

    pub fn synthetic_spec(&self) -> SyntheticSpec {
        SyntheticSpec {
            n: self.n,
            d_in: self.d_in,
            feature_bound: self.feature_bound,
            task: self.task,
            class_separation: self.class_separation,
            label_noise: self.label_noise,
        }
    }

    pub fn loss_model(&self) -> Result<LossModel, HarnessError> {
        let clip = self.clip.unwrap_or(DEFAULT_CLIP);
        let model = match self.model {
            ModelChoice::Logistic => LossModel::logistic(self.d_in, self.feature_bound),
            ModelChoice::LeastSquares => LossModel::least_squares(self.d_in, self.feature_bound, clip),
            ModelChoice::Mlp => LossModel::mlp(self.d_in, self.hidden, clip),
        }
        .map_err(|e| bad("model", e.to_string()))?;
        match self.loss_cap {
            Some(cap) => model.with_loss_cap(cap).map_err(|e| bad("loss_cap", e.to_string())),
            None => Ok(model),
        }
    }

    pub fn rates(&self, c: f64) -> Result<LearningRateSchedule, HarnessError> {
        let field = if c == self.c { "c" } else { "cs" };
        match self.schedule {
            ScheduleKind::Theorem1 => LearningRateSchedule::theorem1(c),
            ScheduleKind::Experimental => LearningRateSchedule::experimental(c),
            ScheduleKind::Constant => LearningRateSchedule::constant(c),
        }
        .map_err(|e| bad(field, e.to_string()))
    }

    pub fn delay_plan(&self, tau_bar: usize) -> DelayPlan {
        match self.delay_kind {
            DelayKind::FixedPerWorker => DelayPlan::FixedPerWorker { max_delay: tau_bar },
            DelayKind::WorstCase => DelayPlan::WorstCase { max_delay: tau_bar },
            DelayKind::None => DelayPlan::FixedPerWorker { max_delay: 0 },
        }
    }

    /// The `(tau_bar, c)` combinations this experiment visits, in order.
    pub fn points(&self) -> Vec<SweepPoint> {
        match self.kind {
            ExperimentKind::DelaySweep => self
                .tau_bars
                .iter()
                .map(|&tau_bar| SweepPoint { tau_bar, c: self.c })
                .collect(),
            ExperimentKind::RateSweep => self
                .cs
                .iter()
                .map(|&c| SweepPoint {
                    tau_bar: self.tau_bar,
                    c,
                })
                .collect(),
            ExperimentKind::BoundSweep => self
                .tau_bars
                .iter()
                .flat_map(|&tau_bar| self.cs.iter().map(move |&c| SweepPoint { tau_bar, c }))
                .collect(),
            _ => vec![SweepPoint {
                tau_bar: self.tau_bar,
                c: self.c,
            }],
        }
    }
}

/// Every configurable field name, in declaration order.
pub const FIELDS: &[&str] = &[
    "kind",
    "model",
    "hidden",
    "clip",
    "loss_cap",
    "task",
    "n",
    "d_in",
    "feature_bound",
    "class_separation",
    "label_noise",
    "test_size",
    "panel_size",
    "p",
    "horizon",
    "tau_bar",
    "tau_bars",
    "delay_kind",
    "schedule",
    "c",
    "cs",
    "horizons",
    "replicates",
    "batch",
    "eval_every",
    "early_until",
    "master_seed",
    "output_dir",
];

fn field_name(key: &str) -> Option<&'static str> {
    let key = key.replace('-', "_");
    FIELDS.iter().copied().find(|f| *f == key)
}

const LIST_FIELDS: &[&str] = &["tau_bars", "cs", "horizons"];
const STRING_FIELDS: &[&str] = &["kind", "model", "task", "delay_kind", "schedule", "output_dir"];

fn parse_value(field: &str, raw: &str) -> toml::Value {
    let raw = raw.trim();
    if STRING_FIELDS.contains(&field) {
        return toml::Value::String(raw.to_string());
    }
    let text = if LIST_FIELDS.contains(&field) && !raw.starts_with('[') {
        format!("[{raw}]")
    } else {
        raw.to_string()
    };
    let probe: Result<toml::Table, _> = toml::from_str(&format!("v = {text}"));
    match probe {
        Ok(mut t) => t.remove("v").expect("probe key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}
