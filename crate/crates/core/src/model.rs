//! Datasets and loss models.
//!
//! Every loss exposes a hand-written gradient. The gradient handed to the
//! optimiser is norm-clipped at the declared Lipschitz constant, so the
//! bounded-gradient assumption holds for every call by construction.

use std::fmt;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::vector::{dot, norm};
use crate::{seed, Error, ParameterVector, Result};

/// Relative slack allowed when checking a generated point against its
/// declared norm bound.
const NORM_SLACK: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataPoint {
    pub features: Vec<f64>,
    pub label: f64,
}

impl DataPoint {
    pub fn new(features: Vec<f64>, label: f64) -> Self {
        Self { features, label }
    }

    pub fn norm(&self) -> f64 {
        norm(&self.features)
    }
}

/// What the labels of a dataset mean.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    /// Two Gaussian blobs, labels in {-1, +1}.
    Blobs,
    /// Linear teacher with logistic label noise, labels in {-1, +1}.
    Logistic,
    /// Linear teacher with additive Gaussian noise, real labels.
    Regression,
}

impl TaskKind {
    pub fn is_classification(self) -> bool {
        !matches!(self, TaskKind::Regression)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            TaskKind::Blobs => "blobs",
            TaskKind::Logistic => "logistic",
            TaskKind::Regression => "regression",
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TaskKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "blobs" | "two-gaussian-blobs" => Ok(TaskKind::Blobs),
            "logistic" => Ok(TaskKind::Logistic),
            "regression" | "linear" => Ok(TaskKind::Regression),
            other => Err(Error::invalid("task", format!("unknown task `{other}`"))),
        }
    }
}

/// Parameters of the synthetic data distribution.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n: usize,
    pub d_in: usize,
    /// Every feature vector satisfies `||x|| <= feature_bound`.
    pub feature_bound: f64,
    pub task: TaskKind,
    /// Distance between class means (blobs), teacher sharpness (logistic) or
    /// teacher scale (regression), in units of the per-coordinate noise.
    pub class_separation: f64,
    /// Label flip probability for classification, noise std for regression.
    pub label_noise: f64,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::invalid("n", "must be positive"));
        }
        if self.d_in == 0 {
            return Err(Error::invalid("d_in", "must be positive"));
        }
        if !(self.feature_bound > 0.0 && self.feature_bound.is_finite()) {
            return Err(Error::invalid("feature_bound", "must be positive and finite"));
        }
        if !(self.class_separation >= 0.0 && self.class_separation.is_finite()) {
            return Err(Error::invalid("class_separation", "must be non-negative"));
        }
        let noise_ok = if self.task.is_classification() {
            (0.0..=0.5).contains(&self.label_noise)
        } else {
            self.label_noise >= 0.0 && self.label_noise.is_finite()
        };
        if !noise_ok {
            return Err(Error::invalid("label_noise", "out of range for task"));
        }
        Ok(())
    }

    /// Builds the distribution keyed on `seed`; the teacher direction is a
    /// function of the seed alone.
    pub fn generator(&self, seed: u64) -> Result<Generator> {
        self.validate()?;
        let mut rng = seed::rng(seed::derive(seed, "teacher", 0));
        let mut direction: Vec<f64> = (0..self.d_in)
            .map(|_| rng.sample::<f64, _>(StandardNormal))
            .collect();
        let len = norm(&direction);
        direction.iter_mut().for_each(|x| *x /= len);
        Ok(Generator {
            spec: self.clone(),
            seed,
            direction,
        })
    }
}

/// A seeded stand-in for the data distribution.
#[derive(Clone, Debug)]
pub struct Generator {
    spec: SyntheticSpec,
    seed: u64,
    direction: Vec<f64>,
}

impl Generator {
    pub fn spec(&self) -> &SyntheticSpec {
        &self.spec
    }

    fn noise_scale(&self) -> f64 {
        self.spec.feature_bound / (2.0 * (self.spec.d_in as f64).sqrt())
    }

    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> DataPoint {
        let spec = &self.spec;
        let sigma = self.noise_scale();
        let mut x: Vec<f64> = (0..spec.d_in)
            .map(|_| sigma * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let label = match spec.task {
            TaskKind::Blobs => {
                let y = if rng.random::<bool>() { 1.0 } else { -1.0 };
                let offset = 0.5 * spec.class_separation * sigma * y;
                x.iter_mut()
                    .zip(&self.direction)
                    .for_each(|(xi, di)| *xi += offset * di);
                y
            }
            TaskKind::Logistic => {
                let margin = spec.class_separation * dot(&x, &self.direction) / sigma;
                if rng.random::<f64>() < sigmoid(margin) {
                    1.0
                } else {
                    -1.0
                }
            }
            TaskKind::Regression => {
                spec.class_separation * dot(&x, &self.direction) / sigma
                    + spec.label_noise * rng.sample::<f64, _>(StandardNormal)
            }
        };
        let label = if spec.task.is_classification() && rng.random::<f64>() < spec.label_noise {
            -label
        } else {
            label
        };
        project_onto_ball(&mut x, spec.feature_bound);
        DataPoint::new(x, label)
    }

    pub fn sample(&self, m: usize, seed: u64) -> Vec<DataPoint> {
        let mut rng = seed::rng(seed);
        (0..m).map(|_| self.draw(&mut rng)).collect()
    }

    /// Fresh i.i.d. draws from the same distribution, e.g. a held-out panel.
    pub fn dataset(&self, m: usize, seed: u64) -> Dataset {
        Dataset {
            points: self.sample(m, seed),
            d_in: self.spec.d_in,
            feature_bound: self.spec.feature_bound,
            task: self.spec.task,
            provenance: Provenance::Synthetic {
                spec: SyntheticSpec {
                    n: m,
                    ..self.spec.clone()
                },
                generator_seed: self.seed,
                points_seed: seed,
            },
        }
    }
}

fn project_onto_ball(x: &mut [f64], radius: f64) {
    let len = norm(x);
    if len > radius {
        let s = radius / len;
        x.iter_mut().for_each(|v| *v *= s);
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Provenance {
    Synthetic {
        spec: SyntheticSpec,
        generator_seed: u64,
        points_seed: u64,
    },
    File(PathBuf),
    Manual,
}

/// An ordered training set; index `i` always refers to the same point.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    points: Vec<DataPoint>,
    d_in: usize,
    feature_bound: f64,
    task: TaskKind,
    provenance: Provenance,
}

/// Draws `spec.n` points from the generator keyed on `seed`.
pub fn generate_synthetic(spec: &SyntheticSpec, seed: u64) -> Result<Dataset> {
    let generator = spec.generator(seed)?;
    Ok(generator.dataset(spec.n, seed::derive(seed, "points", 0)))
}

impl Dataset {
    /// Builds a dataset from explicit points, checking the norm bound and
    /// the label set.
    pub fn from_points(points: Vec<DataPoint>, task: TaskKind, feature_bound: f64) -> Result<Self> {
        let d_in = points.first().map(|p| p.features.len()).unwrap_or(0);
        let ds = Dataset {
            points,
            d_in,
            feature_bound,
            task,
            provenance: Provenance::Manual,
        };
        ds.check()?;
        Ok(ds)
    }

    fn check(&self) -> Result<()> {
        if self.points.is_empty() {
            return Err(Error::invalid("points", "dataset is empty"));
        }
        for p in &self.points {
            check_point(p, self.d_in, self.feature_bound, self.task)?;
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[DataPoint] {
        &self.points
    }

    pub fn get(&self, index: usize) -> Option<&DataPoint> {
        self.points.get(index)
    }

    pub fn d_in(&self) -> usize {
        self.d_in
    }

    pub fn feature_bound(&self) -> f64 {
        self.feature_bound
    }

    pub fn task(&self) -> TaskKind {
        self.task
    }

    pub fn provenance(&self) -> &Provenance {
        &self.provenance
    }

    pub fn max_feature_norm(&self) -> f64 {
        self.points.iter().map(DataPoint::norm).fold(0.0, f64::max)
    }

    /// The generator this dataset was drawn from, if any.
    pub fn generator(&self) -> Result<Generator> {
        match &self.provenance {
            Provenance::Synthetic {
                spec,
                generator_seed,
                ..
            } => spec.generator(*generator_seed),
            _ => Err(Error::NoGenerator),
        }
    }

    /// Writes the plain-text format: a `# d_in=.. n=.. task=..` header, then
    /// one comma-separated line per point with the label last.
    pub fn write_to(&self, path: &Path) -> Result<()> {
        let mut out = BufWriter::new(fs::File::create(path)?);
        writeln!(
            out,
            "# d_in={} n={} task={}",
            self.d_in,
            self.len(),
            self.task
        )?;
        for p in &self.points {
            for x in &p.features {
                write!(out, "{},", crate::fmt::real(*x))?;
            }
            writeln!(out, "{}", crate::fmt::real(p.label))?;
        }
        out.flush()?;
        Ok(())
    }

    /// Reads the plain-text format. The norm bound is taken as the largest
    /// feature norm present in the file.
    pub fn read_from(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let parse_err = |line: usize, message: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            message,
        };
        let mut lines = text.lines().enumerate();
        let (_, header) = lines
            .next()
            .ok_or_else(|| parse_err(1, "missing header".into()))?;
        let header = header
            .strip_prefix('#')
            .ok_or_else(|| parse_err(1, "header must start with `#`".into()))?;
        let (mut d_in, mut n, mut task) = (None, None, None);
        for field in header.split_whitespace() {
            let (key, value) = field
                .split_once('=')
                .ok_or_else(|| parse_err(1, format!("malformed header field `{field}`")))?;
            match key {
                "d_in" => d_in = value.parse::<usize>().ok(),
                "n" => n = value.parse::<usize>().ok(),
                "task" => task = value.parse::<TaskKind>().ok(),
                _ => return Err(parse_err(1, format!("unknown header key `{key}`"))),
            }
        }
        let d_in = d_in.ok_or_else(|| parse_err(1, "missing or invalid d_in".into()))?;
        let n = n.ok_or_else(|| parse_err(1, "missing or invalid n".into()))?;
        let task = task.ok_or_else(|| parse_err(1, "missing or invalid task".into()))?;

        let mut points = Vec::with_capacity(n);
        for (idx, line) in lines {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let values = line
                .split(',')
                .map(|s| s.trim().parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| parse_err(idx + 1, e.to_string()))?;
            if values.len() != d_in + 1 {
                return Err(parse_err(
                    idx + 1,
                    format!("expected {} values, found {}", d_in + 1, values.len()),
                ));
            }
            let (features, label) = values.split_at(d_in);
            points.push(DataPoint::new(features.to_vec(), label[0]));
        }
        if points.len() != n {
            return Err(parse_err(
                1,
                format!("header declares n={n} but file holds {} points", points.len()),
            ));
        }
        let feature_bound = points.iter().map(DataPoint::norm).fold(0.0, f64::max);
        let ds = Dataset {
            points,
            d_in,
            feature_bound: if feature_bound > 0.0 { feature_bound } else { 1.0 },
            task,
            provenance: Provenance::File(path.to_path_buf()),
        };
        ds.check()?;
        Ok(ds)
    }
}

fn check_point(p: &DataPoint, d_in: usize, bound: f64, task: TaskKind) -> Result<()> {
    if p.features.len() != d_in {
        return Err(Error::DimensionMismatch {
            expected: d_in,
            got: p.features.len(),
        });
    }
    if !p.features.iter().all(|x| x.is_finite()) || !p.label.is_finite() {
        return Err(Error::NonFinite("data point"));
    }
    if p.norm() > bound * (1.0 + NORM_SLACK) {
        return Err(Error::invalid(
            "features",
            format!("norm {} exceeds bound {bound}", p.norm()),
        ));
    }
    if task.is_classification() && p.label != 1.0 && p.label != -1.0 {
        return Err(Error::invalid(
            "label",
            format!("classification label must be -1 or +1, got {}", p.label),
        ));
    }
    Ok(())
}

/// Two datasets that agree everywhere except at `differing_index`.
#[derive(Clone, Debug)]
pub struct NeighborPair {
    pub base: Dataset,
    pub variant: Dataset,
    pub differing_index: usize,
}

impl NeighborPair {
    /// Replaces the point at `index` with an explicit point.
    pub fn with_replacement(base: &Dataset, index: usize, point: DataPoint) -> Result<Self> {
        if index >= base.len() {
            return Err(Error::IndexOutOfRange {
                index,
                len: base.len(),
            });
        }
        check_point(&point, base.d_in, base.feature_bound, base.task)?;
        let mut variant = base.clone();
        variant.points[index] = point;
        Ok(NeighborPair {
            base: base.clone(),
            variant,
            differing_index: index,
        })
    }

    /// Indices at which base and variant disagree.
    pub fn differing_indices(&self) -> Vec<usize> {
        self.base
            .points
            .iter()
            .zip(&self.variant.points)
            .enumerate()
            .filter(|(_, (a, b))| a != b)
            .map(|(i, _)| i)
            .collect()
    }
}

/// Replaces point `index` with a fresh draw from the dataset's generator.
pub fn make_neighbor(base: &Dataset, index: usize, seed: u64) -> Result<NeighborPair> {
    if index >= base.len() {
        return Err(Error::IndexOutOfRange {
            index,
            len: base.len(),
        });
    }
    let generator = base.generator()?;
    let point = generator.draw(&mut seed::rng(seed));
    NeighborPair::with_replacement(base, index, point)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    /// `f = (w.x - y)^2 / 2`.
    LeastSquares,
    /// `f = ln(1 + exp(-y w.x))`, labels in {-1, +1}.
    Logistic,
    /// One tanh hidden layer of width `hidden`, logistic loss on the output.
    Mlp { hidden: usize },
    /// Constant loss with zero gradient.
    Constant { value: f64 },
}

impl ModelKind {
    pub fn name(&self) -> &'static str {
        match self {
            ModelKind::LeastSquares => "least-squares",
            ModelKind::Logistic => "logistic",
            ModelKind::Mlp { .. } => "mlp",
            ModelKind::Constant { .. } => "constant",
        }
    }
}

/// A loss `f(w; z)` together with its declared constants.
///
/// `lipschitz` bounds the norm of every gradient returned by
/// [`LossModel::gradient`]; `smoothness`, when known analytically, bounds
/// the Lipschitz constant of that gradient map.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossModel {
    kind: ModelKind,
    input_dim: usize,
    lipschitz: f64,
    smoothness: Option<f64>,
    /// Clip level applied to the raw (uncapped) gradient.
    clip_threshold: f64,
    /// When set, the loss is `min(f, cap) / cap`, which lies in [0, 1].
    loss_cap: Option<f64>,
}

/// A gradient together with whether clipping changed it.
#[derive(Clone, Debug)]
pub struct GradientEval {
    pub gradient: Vec<f64>,
    pub clipped: bool,
}

impl LossModel {
    /// Logistic regression on features with `||x|| <= feature_bound`:
    /// `L = B` and `beta = B^2 / 4` are exact upper bounds, so clipping at
    /// `L` never triggers on in-bound data.
    pub fn logistic(input_dim: usize, feature_bound: f64) -> Result<Self> {
        positive("feature_bound", feature_bound)?;
        Ok(LossModel {
            kind: ModelKind::Logistic,
            input_dim,
            lipschitz: feature_bound,
            smoothness: Some(feature_bound * feature_bound / 4.0),
            clip_threshold: feature_bound,
            loss_cap: None,
        })
    }

    /// Least squares with gradients clipped at `clip`. The clipped gradient
    /// map stays `B^2`-Lipschitz because radial projection onto a ball is
    /// non-expansive.
    pub fn least_squares(input_dim: usize, feature_bound: f64, clip: f64) -> Result<Self> {
        positive("feature_bound", feature_bound)?;
        positive("clip", clip)?;
        Ok(LossModel {
            kind: ModelKind::LeastSquares,
            input_dim,
            lipschitz: clip,
            smoothness: Some(feature_bound * feature_bound),
            clip_threshold: clip,
            loss_cap: None,
        })
    }

    /// One-hidden-layer tanh network. No analytic smoothness constant is
    /// declared.
    pub fn mlp(input_dim: usize, hidden: usize, clip: f64) -> Result<Self> {
        positive("clip", clip)?;
        if hidden == 0 {
            return Err(Error::invalid("hidden", "must be positive"));
        }
        Ok(LossModel {
            kind: ModelKind::Mlp { hidden },
            input_dim,
            lipschitz: clip,
            smoothness: None,
            clip_threshold: clip,
            loss_cap: None,
        })
    }

    pub fn constant(input_dim: usize, value: f64) -> Result<Self> {
        if !(value >= 0.0 && value.is_finite()) {
            return Err(Error::invalid("value", "constant loss must be non-negative"));
        }
        Ok(LossModel {
            kind: ModelKind::Constant { value },
            input_dim,
            lipschitz: 0.0,
            smoothness: Some(0.0),
            clip_threshold: 0.0,
            loss_cap: None,
        })
    }

    /// Rescales the loss into [0, 1] by `min(f, cap) / cap`. The declared
    /// constants are divided by `cap`; above the cap the gradient is zero.
    pub fn with_loss_cap(mut self, cap: f64) -> Result<Self> {
        positive("loss_cap", cap)?;
        if self.loss_cap.is_some() {
            return Err(Error::invalid("loss_cap", "already rescaled"));
        }
        self.lipschitz /= cap;
        self.smoothness = self.smoothness.map(|b| b / cap);
        self.loss_cap = Some(cap);
        Ok(self)
    }

    pub fn kind(&self) -> ModelKind {
        self.kind
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    /// Number of parameters.
    pub fn dim(&self) -> usize {
        match self.kind {
            ModelKind::Mlp { hidden } => hidden * self.input_dim + 2 * hidden + 1,
            _ => self.input_dim,
        }
    }

    pub fn lipschitz(&self) -> f64 {
        self.lipschitz
    }

    pub fn smoothness(&self) -> Option<f64> {
        self.smoothness
    }

    pub fn clip_threshold(&self) -> f64 {
        self.clip_threshold
    }

    pub fn loss_cap(&self) -> Option<f64> {
        self.loss_cap
    }

    pub fn unit_range(&self) -> bool {
        self.loss_cap.is_some()
    }

    fn check_dims(&self, w: &[f64], z: &DataPoint) -> Result<()> {
        if w.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: w.len(),
            });
        }
        if z.features.len() != self.input_dim {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim,
                got: z.features.len(),
            });
        }
        Ok(())
    }

    /// Model output before the loss: `w.x` for linear models, the network
    /// output for the MLP.
    pub fn score(&self, w: &[f64], x: &[f64]) -> f64 {
        match self.kind {
            ModelKind::LeastSquares | ModelKind::Logistic => dot(w, x),
            ModelKind::Mlp { hidden } => mlp_forward(w, x, hidden, self.input_dim).score,
            ModelKind::Constant { .. } => 0.0,
        }
    }

    fn uncapped_loss(&self, w: &[f64], z: &DataPoint) -> f64 {
        match self.kind {
            ModelKind::LeastSquares => {
                let r = dot(w, &z.features) - z.label;
                0.5 * r * r
            }
            ModelKind::Logistic => softplus(-z.label * dot(w, &z.features)),
            ModelKind::Mlp { hidden } => {
                let s = mlp_forward(w, &z.features, hidden, self.input_dim).score;
                softplus(-z.label * s)
            }
            ModelKind::Constant { value } => value,
        }
    }

    /// `f(w; z)`, non-negative, and in [0, 1] when a loss cap is set.
    pub fn loss(&self, w: &ParameterVector, z: &DataPoint) -> Result<f64> {
        self.check_dims(w, z)?;
        let f = self.uncapped_loss(w, z);
        if !f.is_finite() {
            return Err(Error::NonFinite("loss"));
        }
        Ok(match self.loss_cap {
            Some(cap) => f.min(cap) / cap,
            None => f,
        })
    }

    fn uncapped_gradient(&self, w: &[f64], z: &DataPoint) -> Vec<f64> {
        let x = &z.features;
        match self.kind {
            ModelKind::LeastSquares => {
                let r = dot(w, x) - z.label;
                x.iter().map(|xi| r * xi).collect()
            }
            ModelKind::Logistic => {
                let m = z.label * dot(w, x);
                let coef = -z.label * sigmoid(-m);
                x.iter().map(|xi| coef * xi).collect()
            }
            ModelKind::Mlp { hidden } => mlp_gradient(w, z, hidden, self.input_dim),
            ModelKind::Constant { .. } => vec![0.0; w.len()],
        }
    }

    /// Unclipped gradient of [`LossModel::loss`].
    pub fn raw_gradient(&self, w: &ParameterVector, z: &DataPoint) -> Result<ParameterVector> {
        self.check_dims(w, z)?;
        let mut g = self.uncapped_gradient(w, z);
        if let Some(cap) = self.loss_cap {
            if self.uncapped_loss(w, z) >= cap {
                g.iter_mut().for_each(|v| *v = 0.0);
            } else {
                g.iter_mut().for_each(|v| *v /= cap);
            }
        }
        let g = ParameterVector::from_vec(g);
        g.ensure_finite("raw gradient")?;
        Ok(g)
    }

    /// Clipped gradient: `||g|| <= lipschitz()` holds for every call.
    pub fn gradient(&self, w: &ParameterVector, z: &DataPoint) -> Result<ParameterVector> {
        self.gradient_eval(w, z)
            .map(|e| ParameterVector::from_vec(e.gradient))
    }

    pub fn gradient_eval(&self, w: &ParameterVector, z: &DataPoint) -> Result<GradientEval> {
        self.check_dims(w, z)?;
        let mut g = self.uncapped_gradient(w, z);
        if !g.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("gradient"));
        }
        let mut clipped = false;
        let mut scale = 1.0;
        if let Some(cap) = self.loss_cap {
            if self.uncapped_loss(w, z) >= cap {
                scale = 0.0;
            } else {
                scale = 1.0 / cap;
            }
        }
        let len = norm(&g);
        if len > self.clip_threshold {
            clipped = true;
            scale *= self.clip_threshold / len;
        }
        if scale != 1.0 {
            g.iter_mut().for_each(|v| *v *= scale);
        }
        // The scaled norm can exceed the threshold by an ulp; pull it back so
        // the bound is exact.
        loop {
            let len = norm(&g);
            if len <= self.lipschitz {
                break;
            }
            let s = self.lipschitz / len * (1.0 - f64::EPSILON);
            g.iter_mut().for_each(|v| *v *= s);
        }
        Ok(GradientEval {
            gradient: g,
            clipped,
        })
    }

    /// Whether `z` is misclassified at `w` (`y * score <= 0`).
    pub fn misclassified(&self, w: &[f64], z: &DataPoint) -> bool {
        z.label * self.score(w, &z.features) <= 0.0
    }

    /// Default starting point: zeros for linear models, seeded Gaussian with
    /// scale `0.1 / sqrt(d)` for the MLP.
    pub fn initial_point(&self, seed: u64) -> ParameterVector {
        match self.kind {
            ModelKind::Mlp { .. } => {
                let d = self.dim();
                let scale = 0.1 / (d as f64).sqrt();
                let mut rng = seed::rng(seed);
                ParameterVector::from_vec(
                    (0..d)
                        .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
                        .collect(),
                )
            }
            _ => ParameterVector::zeros(self.dim()),
        }
    }
}

fn positive(name: &'static str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::invalid(name, format!("must be positive, got {v}")))
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

struct MlpForward {
    hidden: Vec<f64>,
    score: f64,
}

// Parameter layout: W1 (hidden x d_in, row-major), b1 (hidden), v (hidden), b2.
fn mlp_forward(w: &[f64], x: &[f64], hidden: usize, d_in: usize) -> MlpForward {
    let (w1, rest) = w.split_at(hidden * d_in);
    let (b1, rest) = rest.split_at(hidden);
    let (v, b2) = rest.split_at(hidden);
    let h: Vec<f64> = w1
        .chunks_exact(d_in)
        .zip(b1)
        .map(|(row, b)| (dot(row, x) + b).tanh())
        .collect();
    let score = dot(v, &h) + b2[0];
    MlpForward { hidden: h, score }
}

fn mlp_gradient(w: &[f64], z: &DataPoint, hidden: usize, d_in: usize) -> Vec<f64> {
    let fwd = mlp_forward(w, &z.features, hidden, d_in);
    let ds = -z.label * sigmoid(-z.label * fwd.score);
    let v = &w[hidden * d_in + hidden..hidden * d_in + 2 * hidden];
    let mut g = vec![0.0; w.len()];
    let (gw1, rest) = g.split_at_mut(hidden * d_in);
    let (gb1, rest) = rest.split_at_mut(hidden);
    let (gv, gb2) = rest.split_at_mut(hidden);
    for k in 0..hidden {
        let hk = fwd.hidden[k];
        gv[k] = ds * hk;
        let da = ds * v[k] * (1.0 - hk * hk);
        gb1[k] = da;
        for (gi, xi) in gw1[k * d_in..(k + 1) * d_in].iter_mut().zip(&z.features) {
            *gi = da * xi;
        }
    }
    gb2[0] = ds;
    g
}

/// Largest observed `||g(w) - g(w')|| / ||w - w'||` over random pairs, with
/// `z` drawn from `data`. Degenerate pairs with `w == w'` are skipped.
pub fn estimate_smoothness(
    model: &LossModel,
    data: &Dataset,
    trials: usize,
    seed: u64,
) -> Result<f64> {
    if trials == 0 {
        return Err(Error::invalid("trials", "must be at least 1"));
    }
    let mut rng = seed::rng(seed);
    let d = model.dim();
    let base_scale = 1.0 / (data.feature_bound().max(1e-12) * (d as f64).sqrt());
    let mut best = 0.0f64;
    for _ in 0..trials {
        let z = &data.points()[rng.random_range(0..data.len())];
        let w: ParameterVector = (0..d)
            .map(|_| base_scale * rng.sample::<f64, _>(StandardNormal))
            .collect::<Vec<_>>()
            .into();
        let eps = base_scale * 10f64.powf(rng.random_range(-4.0..1.0));
        let mut w2 = w.clone();
        for v in w2.iter_mut() {
            *v += eps * rng.sample::<f64, _>(StandardNormal);
        }
        let gap = w.distance(&w2);
        if gap == 0.0 {
            continue;
        }
        let g1 = model.gradient(&w, z)?;
        let g2 = model.gradient(&w2, z)?;
        best = best.max(g1.distance(&g2) / gap);
    }
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(n: usize, d_in: usize, task: TaskKind) -> SyntheticSpec {
        SyntheticSpec {
            n,
            d_in,
            feature_bound: 1.0,
            task,
            class_separation: 2.0,
            label_noise: 0.1,
        }
    }

    #[test]
    fn blobs_respect_norm_bound() {
        let ds = generate_synthetic(&spec(8, 2, TaskKind::Blobs), 7).unwrap();
        assert_eq!(ds.len(), 8);
        assert!(ds.points().iter().all(|p| p.norm() <= 1.0 + 1e-15));
    }

    #[test]
    fn generation_is_deterministic() {
        let s = spec(50, 5, TaskKind::Logistic);
        let a = generate_synthetic(&s, 11).unwrap();
        let b = generate_synthetic(&s, 11).unwrap();
        for (p, q) in a.points().iter().zip(b.points()) {
            assert!(p
                .features
                .iter()
                .zip(&q.features)
                .all(|(x, y)| x.to_bits() == y.to_bits()));
            assert_eq!(p.label.to_bits(), q.label.to_bits());
        }
        assert_ne!(a, generate_synthetic(&s, 12).unwrap());
    }

    #[test]
    fn invalid_specs_rejected() {
        let mut s = spec(0, 2, TaskKind::Blobs);
        assert!(generate_synthetic(&s, 0).is_err());
        s.n = 4;
        s.feature_bound = 0.0;
        assert!(generate_synthetic(&s, 0).is_err());
        s.feature_bound = -1.0;
        assert!(generate_synthetic(&s, 0).is_err());
    }

    #[test]
    fn neighbor_differs_at_one_index() {
        let base = generate_synthetic(&spec(10, 3, TaskKind::Blobs), 1).unwrap();
        let pair = make_neighbor(&base, 3, 99).unwrap();
        assert_eq!(pair.differing_indices(), vec![3]);
        assert_eq!(pair.variant.len(), base.len());
        assert!(matches!(
            make_neighbor(&base, 10, 0),
            Err(Error::IndexOutOfRange { index: 10, len: 10 })
        ));
    }

    #[test]
    fn file_dataset_has_no_generator() {
        let ds = Dataset::from_points(
            vec![DataPoint::new(vec![0.5], 1.0)],
            TaskKind::Blobs,
            1.0,
        )
        .unwrap();
        assert!(matches!(make_neighbor(&ds, 0, 0), Err(Error::NoGenerator)));
    }

    #[test]
    fn labels_are_checked() {
        let err = Dataset::from_points(
            vec![DataPoint::new(vec![0.5], 0.3)],
            TaskKind::Logistic,
            1.0,
        );
        assert!(err.is_err());
        let err = Dataset::from_points(
            vec![DataPoint::new(vec![2.0], 1.0)],
            TaskKind::Logistic,
            1.0,
        );
        assert!(err.is_err());
    }

    #[test]
    fn logistic_at_origin_is_ln2() {
        let m = LossModel::logistic(3, 1.0).unwrap();
        let z = DataPoint::new(vec![0.1, -0.2, 0.3], -1.0);
        let f = m.loss(&ParameterVector::zeros(3), &z).unwrap();
        assert!((f - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn least_squares_perfect_fit() {
        let m = LossModel::least_squares(2, 2.0, 10.0).unwrap();
        let w = ParameterVector::from_vec(vec![1.0, -2.0]);
        let z = DataPoint::new(vec![0.5, 0.25], 0.0);
        assert_eq!(m.loss(&w, &z).unwrap(), 0.0);
        assert!(m.gradient(&w, &z).unwrap().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let m = LossModel::logistic(3, 1.0).unwrap();
        let z = DataPoint::new(vec![0.1, 0.2], 1.0);
        assert!(matches!(
            m.loss(&ParameterVector::zeros(3), &z),
            Err(Error::DimensionMismatch { .. })
        ));
        let z = DataPoint::new(vec![0.1, 0.2, 0.3], 1.0);
        assert!(m.gradient(&ParameterVector::zeros(2), &z).is_err());
    }

    #[test]
    fn clipping_bounds_gradient() {
        let m = LossModel::least_squares(2, 1.0, 0.5).unwrap();
        let z = DataPoint::new(vec![0.6, 0.8], 1.0);
        let w = ParameterVector::from_vec(vec![50.0, 50.0]);
        let e = m.gradient_eval(&w, &z).unwrap();
        assert!(e.clipped);
        assert!(norm(&e.gradient) <= 0.5);
    }

    #[test]
    fn loss_cap_keeps_unit_range() {
        let m = LossModel::logistic(1, 1.0).unwrap().with_loss_cap(2.0).unwrap();
        assert_eq!(m.lipschitz(), 0.5);
        assert_eq!(m.smoothness(), Some(0.125));
        let z = DataPoint::new(vec![1.0], 1.0);
        let far = ParameterVector::from_vec(vec![-100.0]);
        assert_eq!(m.loss(&far, &z).unwrap(), 1.0);
        assert!(m.gradient(&far, &z).unwrap().iter().all(|&g| g == 0.0));
        let near = ParameterVector::from_vec(vec![0.0]);
        let f = m.loss(&near, &z).unwrap();
        assert!((f - std::f64::consts::LN_2 / 2.0).abs() < 1e-15);
    }

    #[test]
    fn constant_model_has_zero_smoothness_estimate() {
        let ds = generate_synthetic(&spec(20, 3, TaskKind::Blobs), 2).unwrap();
        let m = LossModel::constant(3, 0.7).unwrap();
        assert_eq!(estimate_smoothness(&m, &ds, 50, 0).unwrap(), 0.0);
        assert!(estimate_smoothness(&m, &ds, 0, 0).is_err());
    }

    #[test]
    fn mlp_dimension() {
        let m = LossModel::mlp(4, 16, 5.0).unwrap();
        assert_eq!(m.dim(), 16 * 4 + 16 + 16 + 1);
        let w0 = m.initial_point(3);
        assert_eq!(w0.dim(), m.dim());
        assert_eq!(w0, m.initial_point(3));
    }

    #[test]
    fn dataset_file_round_trip() {
        let ds = generate_synthetic(&spec(12, 3, TaskKind::Logistic), 5).unwrap();
        let dir = std::env::temp_dir().join(format!("asgd-core-ds-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("data.txt");
        ds.write_to(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("# d_in=3 n=12 task=logistic\n"));
        let back = Dataset::read_from(&path).unwrap();
        assert_eq!(back.points(), ds.points());
        assert_eq!(back.task(), TaskKind::Logistic);
        std::fs::remove_dir_all(&dir).ok();
    }
}
