//! Assist-as-needed trial cost: robot effort, tracking error and stiffness,
//! each normalised so that it equals one at the expected maxima.

use std::io::{self, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::controller::{rad, AnglePair, MAX_TORQUE};

/// Maximum stiffness (Nm/rad).
pub const MAX_STIFFNESS: f64 = 400.0;
/// Maximum expected tracking error, degrees.
pub const MAX_ERROR_DEG: f64 = 2.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ObjectiveError {
    #[error("weights must be non-negative with at least one positive, got {0:?}")]
    BadWeights([f64; 3]),
    #[error("scale factors must be positive, got {0:?}")]
    BadScales([f64; 3]),
    #[error("joint count must be in 1..=4, got {0}")]
    JointCount(usize),
    #[error("log has {errors} error samples and {torques} torque samples; expected N and N-1 with N >= 2")]
    Lengths { errors: usize, torques: usize },
    #[error("time step must be positive, got {0}")]
    BadStep(f64),
    #[error("trial lasts {duration} s, cannot discard {discard} s")]
    TooShort { duration: f64, discard: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 3]", into = "[f64; 3]")]
pub struct CostWeights {
    pub effort: f64,
    pub tracking: f64,
    pub stiffness: f64,
}

impl CostWeights {
    pub fn new(effort: f64, tracking: f64, stiffness: f64) -> Result<Self, ObjectiveError> {
        let w = [effort, tracking, stiffness];
        if w.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) || w.iter().all(|v| *v == 0.0) {
            return Err(ObjectiveError::BadWeights(w));
        }
        Ok(Self {
            effort,
            tracking,
            stiffness,
        })
    }
}

impl Default for CostWeights {
    fn default() -> Self {
        Self {
            effort: 3.0,
            tracking: 1.0,
            stiffness: 0.1,
        }
    }
}

impl TryFrom<[f64; 3]> for CostWeights {
    type Error = ObjectiveError;
    fn try_from(w: [f64; 3]) -> Result<Self, Self::Error> {
        Self::new(w[0], w[1], w[2])
    }
}

impl From<CostWeights> for [f64; 3] {
    fn from(w: CostWeights) -> Self {
        [w.effort, w.tracking, w.stiffness]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 3]", into = "[f64; 3]")]
pub struct ScaleFactors {
    pub effort: f64,
    pub tracking: f64,
    pub stiffness: f64,
}

impl ScaleFactors {
    pub fn new(effort: f64, tracking: f64, stiffness: f64) -> Result<Self, ObjectiveError> {
        let j = [effort, tracking, stiffness];
        if j.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
            return Err(ObjectiveError::BadScales(j));
        }
        Ok(Self {
            effort,
            tracking,
            stiffness,
        })
    }
}

impl TryFrom<[f64; 3]> for ScaleFactors {
    type Error = ObjectiveError;
    fn try_from(j: [f64; 3]) -> Result<Self, Self::Error> {
        Self::new(j[0], j[1], j[2])
    }
}

impl From<ScaleFactors> for [f64; 3] {
    fn from(j: ScaleFactors) -> Self {
        [j.effort, j.tracking, j.stiffness]
    }
}

/// Scales when every controlled joint is also optimized.
pub fn default_scales(n_optimized: usize) -> Result<ScaleFactors, ObjectiveError> {
    scales_for(n_optimized, n_optimized)
}

/// Squared-norm normalisation over the controlled joints, summed maxima
/// over the optimized ones.
pub fn scales_for(n_controlled: usize, n_optimized: usize) -> Result<ScaleFactors, ObjectiveError> {
    for n in [n_controlled, n_optimized] {
        if !(1..=4).contains(&n) {
            return Err(ObjectiveError::JointCount(n));
        }
    }
    let dq = rad(MAX_ERROR_DEG);
    ScaleFactors::new(
        n_controlled as f64 * MAX_TORQUE * MAX_TORQUE,
        n_controlled as f64 * dq * dq,
        n_optimized as f64 * MAX_STIFFNESS,
    )
}

/// One logged trial. `errors` has N entries, `torques` N−1: the torque
/// computed on the final tick is never applied and is not logged.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialLog {
    pub dt: f64,
    pub torques: Vec<AnglePair>,
    pub errors: Vec<AnglePair>,
    /// Stiffness of the optimized joints only.
    pub stiffness: Vec<f64>,
}

impl TrialLog {
    pub fn validate(&self) -> Result<(), ObjectiveError> {
        if !(self.dt > 0.0) {
            return Err(ObjectiveError::BadStep(self.dt));
        }
        let n = self.errors.len();
        if n < 2 || self.torques.len() + 1 != n {
            return Err(ObjectiveError::Lengths {
                errors: n,
                torques: self.torques.len(),
            });
        }
        Ok(())
    }

    /// Number of recorded steps.
    pub fn steps(&self) -> usize {
        self.errors.len()
    }

    pub fn duration(&self) -> f64 {
        self.errors.len() as f64 * self.dt
    }

    /// Drops the first `discard_s` seconds.
    pub fn trim_transient(&self, discard_s: f64) -> Result<TrialLog, ObjectiveError> {
        self.validate()?;
        let skip = (discard_s / self.dt).round() as usize;
        if discard_s < 0.0 || skip + 2 > self.errors.len() {
            return Err(ObjectiveError::TooShort {
                duration: self.duration(),
                discard: discard_s,
            });
        }
        Ok(TrialLog {
            dt: self.dt,
            torques: self.torques[skip..].to_vec(),
            errors: self.errors[skip..].to_vec(),
            stiffness: self.stiffness.clone(),
        })
    }

    /// Trial mean of ‖u‖ / ‖u_max‖, in [0, 1].
    pub fn mean_assist_level(&self) -> f64 {
        if self.torques.is_empty() {
            return 0.0;
        }
        let umax = MAX_TORQUE * 2f64.sqrt();
        self.torques.iter().map(|u| u[0].hypot(u[1]) / umax).sum::<f64>() / self.torques.len() as f64
    }

    /// Delimited text: a `#` header with K and dt, a column header, then
    /// one row per step. The last row has empty torque columns.
    pub fn write_delimited<W: Write>(&self, mut out: W) -> io::Result<()> {
        let ks: Vec<String> = self.stiffness.iter().map(|k| k.to_string()).collect();
        writeln!(out, "# K={} dt={}", ks.join(";"), self.dt)?;
        writeln!(out, "t,u_hip,u_knee,e_hip,e_knee")?;
        for (i, e) in self.errors.iter().enumerate() {
            let t = i as f64 * self.dt;
            match self.torques.get(i) {
                Some(u) => writeln!(out, "{t},{},{},{},{}", u[0], u[1], e[0], e[1])?,
                None => writeln!(out, "{t},,,{},{}", e[0], e[1])?,
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostBreakdown {
    pub effort: f64,
    pub tracking: f64,
    pub stiffness: f64,
    pub total: f64,
}

pub fn evaluate(log: &TrialLog, weights: &CostWeights, scales: &ScaleFactors) -> Result<CostBreakdown, ObjectiveError> {
    log.validate()?;
    let sq = |v: &AnglePair| v[0] * v[0] + v[1] * v[1];
    let mean_sq = |xs: &[AnglePair]| xs.iter().map(sq).sum::<f64>() / xs.len() as f64;
    let effort = weights.effort / scales.effort * mean_sq(&log.torques);
    let tracking = weights.tracking / scales.tracking * mean_sq(&log.errors);
    let stiffness = weights.stiffness / scales.stiffness * log.stiffness.iter().sum::<f64>();
    Ok(CostBreakdown {
        effort,
        tracking,
        stiffness,
        total: effort + tracking + stiffness,
    })
}
