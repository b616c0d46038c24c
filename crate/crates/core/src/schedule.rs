//! Delay paths and learning-rate schedules.

use std::fmt;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::{seed, Error, Result};

/// Staleness `tau(j, t)` for every worker `j` and server step `t`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DelaySchedule {
    max_delay: usize,
    /// Row `j` holds `tau(j, 0..T)`.
    delays: Vec<Vec<usize>>,
}

/// Which staleness constraint an entry breaks.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Constraint {
    /// `tau(j, t) > tau_bar`.
    ExceedsMaxDelay,
    /// `tau(j, t) > t`: would reference an iterate before `w_0`.
    PrecedesStart,
    /// `tau(j, t) > tau(j, t - 1) + 1`.
    GrowthExceedsOne,
}

impl fmt::Display for Constraint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Constraint::ExceedsMaxDelay => "delay exceeds the maximum delay",
            Constraint::PrecedesStart => "delay reaches before the initial iterate",
            Constraint::GrowthExceedsOne => "delay grows by more than one step",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Validation {
    Pass,
    Violation {
        worker: usize,
        step: usize,
        constraint: Constraint,
    },
}

impl Validation {
    pub fn is_pass(&self) -> bool {
        matches!(self, Validation::Pass)
    }
}

impl DelaySchedule {
    /// Wraps a `p x T` matrix. Only the shape is checked here; the staleness
    /// constraints are reported by [`DelaySchedule::validate`].
    pub fn new(max_delay: usize, delays: Vec<Vec<usize>>) -> Result<Self> {
        let horizon = delays.first().map(Vec::len).unwrap_or(0);
        if delays.is_empty() {
            return Err(Error::invalid("delays", "at least one worker required"));
        }
        if let Some(row) = delays.iter().find(|r| r.len() != horizon) {
            return Err(Error::DimensionMismatch {
                expected: horizon,
                got: row.len(),
            });
        }
        Ok(DelaySchedule { max_delay, delays })
    }

    pub fn zeros(workers: usize, horizon: usize) -> Result<Self> {
        Self::new(0, vec![vec![0; horizon]; workers])
    }

    pub fn worker_count(&self) -> usize {
        self.delays.len()
    }

    pub fn horizon(&self) -> usize {
        self.delays[0].len()
    }

    pub fn max_delay(&self) -> usize {
        self.max_delay
    }

    pub fn delay(&self, worker: usize, step: usize) -> usize {
        self.delays[worker][step]
    }

    pub fn rows(&self) -> &[Vec<usize>] {
        &self.delays
    }

    /// Scans in time order (worker order within a step) and returns the
    /// first violated constraint.
    pub fn validate(&self) -> Validation {
        for t in 0..self.horizon() {
            for (j, row) in self.delays.iter().enumerate() {
                let tau = row[t];
                let violation = if tau > self.max_delay {
                    Some(Constraint::ExceedsMaxDelay)
                } else if tau > t {
                    Some(Constraint::PrecedesStart)
                } else if t >= 1 && tau > row[t - 1] + 1 {
                    Some(Constraint::GrowthExceedsOne)
                } else {
                    None
                };
                if let Some(constraint) = violation {
                    return Validation::Violation {
                        worker: j,
                        step: t,
                        constraint,
                    };
                }
            }
        }
        Validation::Pass
    }

    /// Plain-text form: `# p=.. T=.. tau_bar=..`, then one row of
    /// space-separated delays per worker.
    pub fn to_text(&self) -> String {
        let mut out = format!(
            "# p={} T={} tau_bar={}\n",
            self.worker_count(),
            self.horizon(),
            self.max_delay
        );
        for row in &self.delays {
            let line: Vec<String> = row.iter().map(usize::to_string).collect();
            out.push_str(&line.join(" "));
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> std::result::Result<Self, String> {
        let mut lines = text.lines();
        let header = lines
            .next()
            .and_then(|h| h.strip_prefix('#'))
            .ok_or("missing `#` header")?;
        let (mut p, mut horizon, mut tau_bar) = (None, None, None);
        for field in header.split_whitespace() {
            let (k, v) = field
                .split_once('=')
                .ok_or_else(|| format!("malformed header field `{field}`"))?;
            let v: usize = v.parse().map_err(|_| format!("bad value for `{k}`"))?;
            match k {
                "p" => p = Some(v),
                "T" => horizon = Some(v),
                "tau_bar" => tau_bar = Some(v),
                _ => return Err(format!("unknown header key `{k}`")),
            }
        }
        let p = p.ok_or("missing p")?;
        let horizon = horizon.ok_or("missing T")?;
        let tau_bar = tau_bar.ok_or("missing tau_bar")?;
        let rows = lines
            .filter(|l| !l.trim().is_empty())
            .map(|l| {
                l.split_whitespace()
                    .map(|v| v.parse::<usize>().map_err(|e| e.to_string()))
                    .collect::<std::result::Result<Vec<_>, _>>()
            })
            .collect::<std::result::Result<Vec<_>, _>>()?;
        if rows.len() != p {
            return Err(format!("header declares p={p}, found {} rows", rows.len()));
        }
        if let Some(r) = rows.iter().find(|r| r.len() != horizon) {
            return Err(format!("header declares T={horizon}, found a row of {}", r.len()));
        }
        DelaySchedule::new(tau_bar, rows).map_err(|e| e.to_string())
    }

    pub fn write_to(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn read_from(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Self::from_text(&text).map_err(|message| Error::Parse {
            path: path.to_path_buf(),
            line: 1,
            message,
        })
    }
}

/// Gives each worker a constant target delay in `[0, tau_bar]`, with one
/// worker at 0 and another at `tau_bar`. Realised delays ramp in as
/// `min(t, d_j)`.
pub fn make_fixed_per_worker(
    workers: usize,
    horizon: usize,
    max_delay: usize,
    seed: u64,
) -> Result<DelaySchedule> {
    if horizon == 0 {
        return Err(Error::invalid("T", "horizon must be at least 1"));
    }
    if workers == 0 || (max_delay > 0 && workers < 2) {
        return Err(Error::invalid(
            "p",
            "at least two workers are needed to place both delay extremes",
        ));
    }
    let targets = fixed_targets(workers, max_delay, seed);
    let delays = targets
        .iter()
        .map(|&d| (0..horizon).map(|t| t.min(d)).collect())
        .collect();
    DelaySchedule::new(max_delay, delays)
}

/// Per-worker target delays used by [`make_fixed_per_worker`].
pub fn fixed_targets(workers: usize, max_delay: usize, seed: u64) -> Vec<usize> {
    let mut rng = seed::rng(seed);
    let mut order: Vec<usize> = (0..workers).collect();
    order.shuffle(&mut rng);
    let mut targets = vec![0; workers];
    if max_delay == 0 {
        return targets;
    }
    targets[order[0]] = 0;
    targets[order[1]] = max_delay;
    for &j in &order[2..] {
        targets[j] = rng.random_range(0..=max_delay);
    }
    targets
}

/// Every worker's delay ramps `0, 1, 2, ..` up to `tau_bar` and stays there,
/// the failed-worker pattern.
pub fn make_worst_case_growth(
    workers: usize,
    horizon: usize,
    max_delay: usize,
) -> Result<DelaySchedule> {
    if horizon == 0 {
        return Err(Error::invalid("T", "horizon must be at least 1"));
    }
    if workers == 0 {
        return Err(Error::invalid("p", "at least one worker required"));
    }
    let row: Vec<usize> = (0..horizon).map(|t| t.min(max_delay)).collect();
    DelaySchedule::new(max_delay, vec![row; workers])
}

/// Step sizes `gamma_t`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum LearningRateSchedule {
    /// `c / (t + 3)`.
    Theorem1 { c: f64 },
    /// `c / (1 + 0.05 t)`.
    Experimental { c: f64 },
    Constant { c: f64 },
}

impl LearningRateSchedule {
    pub fn theorem1(c: f64) -> Result<Self> {
        check_coefficient(c).map(|c| LearningRateSchedule::Theorem1 { c })
    }

    pub fn experimental(c: f64) -> Result<Self> {
        check_coefficient(c).map(|c| LearningRateSchedule::Experimental { c })
    }

    pub fn constant(c: f64) -> Result<Self> {
        check_coefficient(c).map(|c| LearningRateSchedule::Constant { c })
    }

    pub fn from_name(kind: &str, c: f64) -> Result<Self> {
        match kind {
            "theorem1" => Self::theorem1(c),
            "experimental" => Self::experimental(c),
            "constant" => Self::constant(c),
            other => Err(Error::invalid("schedule", format!("unknown kind `{other}`"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            LearningRateSchedule::Theorem1 { .. } => "theorem1",
            LearningRateSchedule::Experimental { .. } => "experimental",
            LearningRateSchedule::Constant { .. } => "constant",
        }
    }

    pub fn coefficient(&self) -> f64 {
        match *self {
            LearningRateSchedule::Theorem1 { c }
            | LearningRateSchedule::Experimental { c }
            | LearningRateSchedule::Constant { c } => c,
        }
    }

    /// `gamma_t`.
    pub fn rate_at(&self, t: usize) -> f64 {
        let t = t as f64;
        match *self {
            LearningRateSchedule::Theorem1 { c } => c / (t + 3.0),
            LearningRateSchedule::Experimental { c } => c / (1.0 + 0.05 * t),
            LearningRateSchedule::Constant { c } => c,
        }
    }
}

fn check_coefficient(c: f64) -> Result<f64> {
    if c > 0.0 && c.is_finite() {
        Ok(c)
    } else {
        Err(Error::invalid("c", format!("must be positive, got {c}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zeros_pass() {
        for tau_bar in [0, 3] {
            let s = DelaySchedule::new(tau_bar, vec![vec![0; 20]; 4]).unwrap();
            assert_eq!(s.validate(), Validation::Pass);
        }
    }

    #[test]
    fn growth_violation_located() {
        let mut rows = vec![vec![0usize; 10]; 4];
        for t in 0..=5 {
            rows[3][t] = t.min(4);
        }
        rows[3][6] = 6;
        let s = DelaySchedule::new(10, rows).unwrap();
        assert_eq!(
            s.validate(),
            Validation::Violation {
                worker: 3,
                step: 6,
                constraint: Constraint::GrowthExceedsOne
            }
        );
    }

    #[test]
    fn other_violations() {
        let s = DelaySchedule::new(1, vec![vec![0, 1, 2]]).unwrap();
        assert!(matches!(
            s.validate(),
            Validation::Violation {
                step: 2,
                constraint: Constraint::ExceedsMaxDelay,
                ..
            }
        ));
        let s = DelaySchedule::new(5, vec![vec![1, 1]]).unwrap();
        assert!(matches!(
            s.validate(),
            Validation::Violation {
                step: 0,
                constraint: Constraint::PrecedesStart,
                ..
            }
        ));
    }

    #[test]
    fn shape_checked() {
        assert!(DelaySchedule::new(0, vec![vec![0; 3], vec![0; 2]]).is_err());
        assert!(DelaySchedule::new(0, vec![]).is_err());
    }

    #[test]
    fn fixed_without_delay_is_zero() {
        let s = make_fixed_per_worker(8, 100, 0, 42).unwrap();
        assert!(s.rows().iter().flatten().all(|&d| d == 0));
    }

    #[test]
    fn fixed_two_workers_hit_extremes() {
        for seed in 0..20 {
            let s = make_fixed_per_worker(2, 10, 3, seed).unwrap();
            let mut finals: Vec<usize> = s.rows().iter().map(|r| r[9]).collect();
            finals.sort();
            assert_eq!(finals, vec![0, 3]);
            for row in s.rows() {
                let d = row[9];
                for (t, &tau) in row.iter().enumerate() {
                    assert_eq!(tau, t.min(d));
                }
            }
        }
    }

    #[test]
    fn fixed_rejects_single_worker_with_delay() {
        assert!(make_fixed_per_worker(1, 10, 2, 0).is_err());
        assert!(make_fixed_per_worker(1, 10, 0, 0).is_ok());
        assert!(make_fixed_per_worker(4, 0, 2, 0).is_err());
    }

    #[test]
    fn worst_case_ramp() {
        let s = make_worst_case_growth(1, 5, 2).unwrap();
        assert_eq!(s.rows()[0], vec![0, 1, 2, 2, 2]);
        let s = make_worst_case_growth(4, 3, 10).unwrap();
        assert!(s.rows().iter().all(|r| r == &vec![0, 1, 2]));
    }

    #[test]
    fn text_round_trip() {
        let s = make_fixed_per_worker(3, 6, 2, 9).unwrap();
        let text = s.to_text();
        assert!(text.starts_with("# p=3 T=6 tau_bar=2\n"));
        assert_eq!(DelaySchedule::from_text(&text).unwrap(), s);
        assert!(DelaySchedule::from_text("# p=2 T=2 tau_bar=0\n0 0\n").is_err());
    }

    #[test]
    fn rates() {
        let r = LearningRateSchedule::theorem1(1.0).unwrap();
        assert!((r.rate_at(0) - 1.0 / 3.0).abs() < 1e-15);
        let r = LearningRateSchedule::experimental(0.2).unwrap();
        assert_eq!(r.rate_at(0), 0.2);
        let r = LearningRateSchedule::experimental(0.5).unwrap();
        assert!((r.rate_at(20) - 0.25).abs() < 1e-15);
        assert!(LearningRateSchedule::theorem1(0.0).is_err());
        assert!(LearningRateSchedule::from_name("cosine", 1.0).is_err());
    }
}
