//! Mixing-weight schedules.
//!
//! A [`SchedulerSpec`] describes a decaying weight curve with four knobs
//! (start scale, end scale, the iteration by which the decay completes and
//! the decay shape). [`make_schedule`] realizes it into one weight per
//! denoising iteration. Iteration `i = 0` is the first denoising step (at
//! timestep `t = T`), so the realized vector is in loop order.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ScheduleError {
    #[error("step count must be at least 1")]
    NoSteps,
    #[error("until ({until}) must be in [1, {steps}]")]
    UntilOutOfRange { until: usize, steps: usize },
    #[error("start ({start}) must be >= end ({end})")]
    NotDecaying { start: f64, end: f64 },
    #[error("{name} ({value}) must lie in [0, 1]")]
    OutOfUnitRange { name: &'static str, value: f64 },
    #[error("unknown decay type `{0}` (expected stepped, linear, negexp or logistic)")]
    UnknownDecay(String),
    #[error("malformed scheduler `{0}`: expected start,end,until,type")]
    Malformed(String),
}

/// Shape of the decay between `start` and `end`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Decay {
    Stepped,
    Linear,
    Negexp,
    Logistic,
}

impl Decay {
    pub const ALL: [Decay; 4] = [Decay::Stepped, Decay::Linear, Decay::Negexp, Decay::Logistic];

    pub fn as_str(self) -> &'static str {
        match self {
            Decay::Stepped => "stepped",
            Decay::Linear => "linear",
            Decay::Negexp => "negexp",
            Decay::Logistic => "logistic",
        }
    }
}

impl fmt::Display for Decay {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Decay {
    type Err = ScheduleError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "stepped" => Ok(Decay::Stepped),
            "linear" => Ok(Decay::Linear),
            "negexp" => Ok(Decay::Negexp),
            "logistic" => Ok(Decay::Logistic),
            other => Err(ScheduleError::UnknownDecay(other.to_string())),
        }
    }
}

/// Four-parameter description of a decaying mixing weight.
///
/// Serializes as the flat object `{start, end, until, type}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SchedulerSpec {
    pub start: f64,
    pub end: f64,
    pub until: usize,
    #[serde(rename = "type")]
    pub decay: Decay,
}

impl SchedulerSpec {
    pub fn new(start: f64, end: f64, until: usize, decay: Decay) -> Self {
        Self { start, end, until, decay }
    }

    /// Default attention-mixing scheduler: logistic 0.7 -> 0.1 over 50 iterations.
    pub fn default_attention() -> Self {
        Self::new(0.7, 0.1, 50, Decay::Logistic)
    }

    /// Default latent-mixing scheduler: 0.6 for the first 10 iterations, then 0.
    pub fn default_latent() -> Self {
        Self::new(0.6, 0.0, 10, Decay::Stepped)
    }

    /// A spec that yields `value` at every iteration.
    pub fn constant(value: f64, steps: usize) -> Self {
        Self::new(value, value, steps.max(1), Decay::Stepped)
    }

    /// Checks the step-independent invariants.
    pub fn validate(&self) -> Result<(), ScheduleError> {
        for (name, value) in [("start", self.start), ("end", self.end)] {
            if !(0.0..=1.0).contains(&value) {
                return Err(ScheduleError::OutOfUnitRange { name, value });
            }
        }
        if self.start < self.end {
            return Err(ScheduleError::NotDecaying { start: self.start, end: self.end });
        }
        if self.until < 1 {
            return Err(ScheduleError::UntilOutOfRange { until: self.until, steps: 0 });
        }
        Ok(())
    }

    /// Weight at iteration `i`. Assumes the spec has been validated.
    fn weight_at(&self, i: usize) -> f64 {
        let (start, end, until) = (self.start, self.end, self.until);
        let range = start - end;
        match self.decay {
            Decay::Stepped => {
                if i < until {
                    start
                } else {
                    end
                }
            }
            Decay::Linear => {
                if i < until {
                    start - range * i as f64 / until as f64
                } else {
                    end
                }
            }
            Decay::Negexp => {
                if i < until {
                    end + range * (-3.0 * i as f64 / until as f64).exp()
                } else {
                    end
                }
            }
            Decay::Logistic => {
                if until == 1 {
                    // The transition completes by iteration until - 1 = 0.
                    return end;
                }
                let center = (until - 1) as f64 / 2.0;
                let steepness = 10.0 / (until - 1) as f64;
                end + range / (1.0 + (steepness * (i as f64 - center)).exp())
            }
        }
    }
}

impl fmt::Display for SchedulerSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{},{},{},{}", self.start, self.end, self.until, self.decay)
    }
}

/// Parses the compact `start,end,until,type` form used on the command line.
impl FromStr for SchedulerSpec {
    type Err = ScheduleError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let parts: Vec<&str> = s.split(',').map(str::trim).collect();
        let [start, end, until, decay] = parts.as_slice() else {
            return Err(ScheduleError::Malformed(s.to_string()));
        };
        let malformed = || ScheduleError::Malformed(s.to_string());
        let spec = SchedulerSpec {
            start: start.parse().map_err(|_| malformed())?,
            end: end.parse().map_err(|_| malformed())?,
            until: until.parse().map_err(|_| malformed())?,
            decay: decay.parse()?,
        };
        spec.validate()?;
        Ok(spec)
    }
}

/// Realized per-iteration weights, indexed by denoising iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightSchedule {
    pub spec: SchedulerSpec,
    pub weights: Vec<f64>,
}

impl WeightSchedule {
    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    /// Weight for iteration `i`, or `None` past the end.
    pub fn get(&self, i: usize) -> Option<f64> {
        self.weights.get(i).copied()
    }

    /// `(i, w_i)` rows for tabular display.
    pub fn rows(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.weights.iter().copied().enumerate()
    }
}

/// Realizes `spec` into `steps` per-iteration weights.
pub fn make_schedule(spec: &SchedulerSpec, steps: usize) -> Result<WeightSchedule, ScheduleError> {
    if steps < 1 {
        return Err(ScheduleError::NoSteps);
    }
    spec.validate()?;
    if spec.until > steps {
        return Err(ScheduleError::UntilOutOfRange { until: spec.until, steps });
    }
    let weights = (0..steps).map(|i| spec.weight_at(i)).collect();
    Ok(WeightSchedule { spec: *spec, weights })
}

/// A realized schedule plus a printable `(i, w_i)` table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SchedulePreview {
    pub schedule: WeightSchedule,
    pub table: String,
}

pub fn preview_schedule(spec: &SchedulerSpec, steps: usize) -> Result<SchedulePreview, ScheduleError> {
    let schedule = make_schedule(spec, steps)?;
    let mut table = format!("# {spec} over {steps} steps\n    i  weight\n");
    for (i, w) in schedule.rows() {
        table.push_str(&format!("{i:>5}  {w:.4}\n"));
    }
    Ok(SchedulePreview { schedule, table })
}
