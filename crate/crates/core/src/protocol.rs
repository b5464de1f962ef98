//! The multi-day continuous optimisation protocol.
//!
//! A session alternates bouts of λ one-minute trials (one CMA-ES generation
//! each) with breaks, and closes every day with a randomised block of
//! validation trials. The session is a trial-level state machine: the next
//! trial is always determined by the state alone, so a session saved at any
//! trial boundary resumes exactly where it stopped. Batch mode simulates the
//! walker in-process; live mode receives logs from the streaming service.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use nalgebra::DVector;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cmaes::{
    best_so_far, default_params, rank_population, sample_population, step, ArchiveRecord, CmaError, CmaParams,
    CmaState, ParamOverrides, SampleArchive,
};
use crate::controller::{
    AnglePair, AssistController, ControlError, ControlSample, Deadband, ImpedanceGains, ReferencePath, CRITICAL_DAMPING,
};
use crate::objective::{evaluate, scales_for, CostBreakdown, CostWeights, ObjectiveError, ScaleFactors, TrialLog};
use crate::plant::{closed_loop_trial, HumanParams, HumanState, PlantError};

pub const SNAPSHOT_FORMAT: &str = "hilo-session";
pub const SNAPSHOT_VERSION: u32 = 1;

const STREAM_SAMPLER: u64 = 1;
const STREAM_PLANT: u64 = 2;
const STREAM_VALIDATION: u64 = 3;

#[derive(Debug, Error)]
pub enum ProtocolError {
    #[error("invalid session config field `{field}`: {reason}")]
    Config { field: String, reason: String },
    #[error("{0}")]
    OutOfPhase(&'static str),
    #[error(transparent)]
    Cma(#[from] CmaError),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Control(#[from] ControlError),
    #[error(transparent)]
    Plant(#[from] PlantError),
    #[error("session is finished")]
    Finished,
    #[error("session runs in live mode; trials must come from the stream")]
    NotBatch,
    #[error("trial {got:?} recorded while {expected:?} was due")]
    UnexpectedTrial { expected: Box<TrialKind>, got: Box<TrialKind> },
    #[error("snapshot version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("snapshot is corrupt: {0}")]
    Corrupt(String),
    #[error("config parse error: {0}")]
    Parse(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T> = std::result::Result<T, ProtocolError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Joint {
    LeftHip,
    LeftKnee,
    RightHip,
    RightKnee,
}

impl Joint {
    fn is_left(self) -> bool {
        matches!(self, Joint::LeftHip | Joint::LeftKnee)
    }

    /// 0 for the hip, 1 for the knee.
    fn axis(self) -> usize {
        match self {
            Joint::LeftHip | Joint::RightHip => 0,
            Joint::LeftKnee | Joint::RightKnee => 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Condition {
    NoAssist,
    Baseline,
    Best,
    LastMean,
}

impl Condition {
    pub const ALL: [Condition; 4] = [Condition::NoAssist, Condition::Baseline, Condition::Best, Condition::LastMean];
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SessionConfig {
    pub seed: u64,
    pub days: u32,
    pub generations_per_day: u32,
    pub lambda: usize,
    pub trial_s: f64,
    pub discard_s: f64,
    pub break_s: f64,
    pub validation_trial_s: f64,
    pub validation_rounds: u32,
    /// Baseline stiffness (Nm/rad).
    pub k_baseline: f64,
    /// Stiffness of task-leg joints that are not optimized (Nm/rad).
    pub k_fixed_leg: f64,
    /// Optimized joints; all on the task leg, which is the only leg
    /// simulated.
    pub optimized_joints: Vec<Joint>,
    pub deadband_deg: f64,
    pub weights: CostWeights,
    pub control_hz: f64,
    /// Off time between days (s).
    pub day_gap_s: f64,
    /// Whether the walker keeps learning during the off time.
    pub learn_off_time: bool,
    /// Trials come from the streaming client instead of the simulator.
    pub live: bool,
    /// Reference path file; the built-in gait loop when absent.
    pub path_file: Option<PathBuf>,
    pub cma: ParamOverrides,
    pub plant: HumanParams,
}

impl Default for SessionConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            days: 2,
            generations_per_day: 5,
            lambda: 7,
            trial_s: 60.0,
            discard_s: 15.0,
            break_s: 300.0,
            validation_trial_s: 180.0,
            validation_rounds: 3,
            k_baseline: 200.0,
            k_fixed_leg: 50.0,
            optimized_joints: vec![Joint::RightHip, Joint::RightKnee],
            deadband_deg: crate::controller::DEFAULT_DEADBAND_DEG,
            weights: CostWeights::default(),
            control_hz: 100.0,
            day_gap_s: 16.0 * 3600.0,
            learn_off_time: false,
            live: false,
            path_file: None,
            cma: ParamOverrides::default(),
            plant: HumanParams::default(),
        }
    }
}

impl SessionConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: SessionConfig = toml::from_str(text).map_err(|e| ProtocolError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serialises")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, reason: &str| {
            Err(ProtocolError::Config {
                field: field.to_string(),
                reason: reason.to_string(),
            })
        };
        for (field, v) in [
            ("days", self.days),
            ("generations_per_day", self.generations_per_day),
            ("validation_rounds", self.validation_rounds),
        ] {
            if v == 0 {
                return bad(field, "must be at least 1");
            }
        }
        if self.lambda < 2 {
            return bad("lambda", "must be at least 2");
        }
        if self.cma.lambda.is_some_and(|l| l != self.lambda) {
            return bad("cma.lambda", "conflicts with lambda");
        }
        for (field, v) in [
            ("trial_s", self.trial_s),
            ("break_s", self.break_s),
            ("validation_trial_s", self.validation_trial_s),
            ("control_hz", self.control_hz),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return bad(field, "must be positive");
            }
        }
        if !(self.discard_s >= 0.0) {
            return bad("discard_s", "must be non-negative");
        }
        if self.trial_s <= self.discard_s {
            return bad("trial_s", "must exceed discard_s");
        }
        if self.validation_trial_s <= self.discard_s {
            return bad("validation_trial_s", "must exceed discard_s");
        }
        if !(self.day_gap_s >= 0.0) {
            return bad("day_gap_s", "must be non-negative");
        }
        for (field, v) in [("k_baseline", self.k_baseline), ("k_fixed_leg", self.k_fixed_leg)] {
            if !(0.0..=400.0).contains(&v) {
                return bad(field, "must lie in [0, 400]");
            }
        }
        let joints = &self.optimized_joints;
        if joints.is_empty() {
            return bad("optimized_joints", "must not be empty");
        }
        if joints.iter().any(|j| j.is_left() != joints[0].is_left()) {
            return bad("optimized_joints", "must all be on one leg");
        }
        if joints.iter().any(|j| joints.iter().filter(|k| k.axis() == j.axis()).count() > 1) {
            return bad("optimized_joints", "contains a duplicate");
        }
        if Deadband::from_degrees(self.deadband_deg).is_err() {
            return bad("deadband_deg", "must be non-negative and finite");
        }
        if let Err(PlantError::Invalid { field, reason }) = self.plant.validate() {
            return bad(&format!("plant.{field}"), reason);
        }
        if let Err(e) = self.cma_params() {
            return bad("cma", &e.to_string());
        }
        Ok(())
    }

    /// Number of control ticks in a trial of `duration_s`.
    pub fn ticks(&self, duration_s: f64) -> usize {
        (duration_s * self.control_hz).round() as usize
    }

    pub fn dt(&self) -> f64 {
        1.0 / self.control_hz
    }

    pub fn cma_params(&self) -> Result<CmaParams> {
        let overrides = ParamOverrides {
            lambda: Some(self.lambda),
            ..self.cma.clone()
        };
        Ok(default_params(self.optimized_joints.len(), &overrides)?)
    }

    pub fn scales(&self) -> ScaleFactors {
        scales_for(2, self.optimized_joints.len()).expect("one to two optimized joints")
    }

    pub fn reference_path(&self) -> Result<ReferencePath> {
        match &self.path_file {
            Some(p) => Ok(ReferencePath::from_text(&fs::read_to_string(p)?)?),
            None => Ok(ReferencePath::default_gait()),
        }
    }

    /// Task-leg (hip, knee) stiffness for a decision vector over the
    /// optimized joints.
    pub fn leg_stiffness(&self, decision: &[f64]) -> [f64; 2] {
        let mut k = [self.k_fixed_leg; 2];
        for (joint, v) in self.optimized_joints.iter().zip(decision) {
            k[joint.axis()] = *v;
        }
        k
    }

    /// Generator for one concern, independent of every other concern.
    pub fn stream(&self, label: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(label);
        rng
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum TrialKind {
    Optimization { generation: u64, index: usize },
    Validation { day: u32, round: u32, condition: Condition },
}

/// Everything needed to run the next trial.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialSpec {
    pub kind: TrialKind,
    /// Stiffness of the optimized joints.
    pub decision: Vec<f64>,
    /// Task-leg (hip, knee) stiffness applied by the controller.
    pub leg_stiffness: [f64; 2],
    pub duration_s: f64,
    pub ticks: usize,
}

impl TrialSpec {
    pub fn gains(&self) -> ImpedanceGains {
        ImpedanceGains::new(self.leg_stiffness, CRITICAL_DAMPING).expect("stiffness within bounds")
    }
}

/// Per-trial metadata kept in the archive.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialInfo {
    pub day: u32,
    pub index: usize,
    pub cost: CostBreakdown,
    pub assist_level: f64,
}

pub type Record = ArchiveRecord<TrialInfo>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct PendingGeneration {
    candidates: Vec<Vec<f64>>,
    results: Vec<(CostBreakdown, f64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionResult {
    pub condition: Condition,
    pub stiffness: Vec<f64>,
    pub cost: CostBreakdown,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationRound {
    pub order: [Condition; 4],
    pub results: Vec<ConditionResult>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub day: u32,
    pub rounds: Vec<ValidationRound>,
}

impl ValidationReport {
    pub fn cost(&self, round: usize, condition: Condition) -> Option<&CostBreakdown> {
        self.rounds
            .get(round)?
            .results
            .iter()
            .find(|r| r.condition == condition)
            .map(|r| &r.cost)
    }

    /// Mean total cost of a condition over the rounds.
    pub fn mean_total(&self, condition: Condition) -> f64 {
        let costs: Vec<f64> = (0..self.rounds.len())
            .filter_map(|r| self.cost(r, condition).map(|c| c.total))
            .collect();
        costs.iter().sum::<f64>() / costs.len() as f64
    }
}

/// Mean, step size and covariance of the search distribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchPoint {
    pub generation: u64,
    pub mean: Vec<f64>,
    pub sigma: f64,
    /// Rows of C (unscaled by σ).
    pub covariance: Vec<Vec<f64>>,
}

impl SearchPoint {
    fn of(state: &CmaState) -> Self {
        let c = &state.cov.matrix;
        Self {
            generation: state.generation,
            mean: state.mean.iter().copied().collect(),
            sigma: state.sigma,
            covariance: (0..c.nrows()).map(|i| c.row(i).iter().copied().collect()).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct PendingValidation {
    best: Vec<f64>,
    last_mean: Vec<f64>,
    rounds: Vec<ValidationRound>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Session {
    pub config: SessionConfig,
    pub params: CmaParams,
    pub cma: CmaState,
    pub archive: SampleArchive<TrialInfo>,
    pub day: u32,
    pub generation_in_day: u32,
    pub reports: Vec<ValidationReport>,
    pub human: Option<HumanState>,
    /// Simulated time since the session started (s).
    pub clock_s: f64,
    /// Search distribution before the first and after every generation.
    pub history: Vec<SearchPoint>,
    pending_generation: Option<PendingGeneration>,
    pending_validation: Option<PendingValidation>,
    sampler: ChaCha8Rng,
    validation_rng: ChaCha8Rng,
    #[serde(skip)]
    path: Option<Arc<ReferencePath>>,
}

impl PartialEq for Session {
    fn eq(&self, other: &Self) -> bool {
        serde_json::to_value(self).ok() == serde_json::to_value(other).ok()
    }
}

#[derive(Serialize, Deserialize)]
struct Snapshot {
    format: String,
    version: u32,
    session: Session,
}

impl Session {
    pub fn new(config: SessionConfig) -> Result<Self> {
        config.validate()?;
        let params = config.cma_params()?;
        let path = Arc::new(config.reference_path()?);
        let human = (!config.live).then(|| HumanState::new(&config.plant, config.stream(STREAM_PLANT)));
        let cma = CmaState::new(&params);
        Ok(Self {
            history: vec![SearchPoint::of(&cma)],
            sampler: config.stream(STREAM_SAMPLER),
            validation_rng: config.stream(STREAM_VALIDATION),
            params,
            cma,
            archive: SampleArchive::new(),
            day: 0,
            generation_in_day: 0,
            reports: Vec::new(),
            human,
            clock_s: 0.0,
            pending_generation: None,
            pending_validation: None,
            path: Some(path),
            config,
        })
    }

    pub fn path(&self) -> &ReferencePath {
        self.path.as_ref().expect("path loaded at construction")
    }

    pub fn shared_path(&self) -> Arc<ReferencePath> {
        self.path.clone().expect("path loaded at construction")
    }

    pub fn deadband(&self) -> Deadband {
        Deadband::from_degrees(self.config.deadband_deg).expect("validated")
    }

    pub fn is_finished(&self) -> bool {
        self.day >= self.config.days
    }

    pub fn completed_generations(&self) -> u64 {
        self.cma.generation
    }

    /// Trials completed so far, optimisation and validation together.
    pub fn completed_trials(&self) -> usize {
        let pending = self.pending_generation.as_ref().map_or(0, |p| p.results.len());
        let validation: usize = self
            .reports
            .iter()
            .map(|r| r.rounds.iter().map(|x| x.results.len()).sum::<usize>())
            .sum::<usize>()
            + self
                .pending_validation
                .as_ref()
                .map_or(0, |v| v.rounds.iter().map(|x| x.results.len()).sum());
        self.archive.len() + pending + validation
    }

    fn in_validation(&self) -> bool {
        self.generation_in_day >= self.config.generations_per_day
    }

    /// Draws whatever randomness the next trial depends on. Idempotent.
    fn prepare(&mut self) -> Result<()> {
        if self.is_finished() {
            return Err(ProtocolError::Finished);
        }
        if self.in_validation() {
            if self.pending_validation.is_none() {
                let (_, best) = best_so_far(&self.archive)?;
                let best = best.candidate.clone();
                let last_mean = self.cma.clamped_mean(&self.params);
                let rounds = (0..self.config.validation_rounds)
                    .map(|_| {
                        let mut order = Condition::ALL;
                        order.shuffle(&mut self.validation_rng);
                        ValidationRound {
                            order,
                            results: Vec::new(),
                        }
                    })
                    .collect();
                self.pending_validation = Some(PendingValidation {
                    best,
                    last_mean,
                    rounds,
                });
            }
        } else if self.pending_generation.is_none() {
            let xs = sample_population(&self.cma, &self.params, &mut self.sampler)?;
            self.pending_generation = Some(PendingGeneration {
                candidates: xs.iter().map(|x| x.iter().copied().collect()).collect(),
                results: Vec::new(),
            });
        }
        Ok(())
    }

    /// The trial that is due next.
    pub fn next_trial(&mut self) -> Result<TrialSpec> {
        self.prepare()?;
        let cfg = &self.config;
        let (kind, decision, leg, duration) = if let Some(v) = &self.pending_validation {
            let r = v
                .rounds
                .iter()
                .position(|r| r.results.len() < 4)
                .expect("an incomplete round while validation is pending");
            let condition = v.rounds[r].order[v.rounds[r].results.len()];
            let decision = match condition {
                Condition::NoAssist => vec![0.0; cfg.optimized_joints.len()],
                Condition::Baseline => vec![cfg.k_baseline; cfg.optimized_joints.len()],
                Condition::Best => v.best.clone(),
                Condition::LastMean => v.last_mean.clone(),
            };
            let leg = match condition {
                Condition::NoAssist => [0.0; 2],
                _ => cfg.leg_stiffness(&decision),
            };
            let kind = TrialKind::Validation {
                day: self.day,
                round: r as u32,
                condition,
            };
            (kind, decision, leg, cfg.validation_trial_s)
        } else {
            let g = self.pending_generation.as_ref().expect("prepared");
            let index = g.results.len();
            let decision = g.candidates[index].clone();
            let kind = TrialKind::Optimization {
                generation: self.cma.generation,
                index,
            };
            let leg = cfg.leg_stiffness(&decision);
            (kind, decision, leg, cfg.trial_s)
        };
        Ok(TrialSpec {
            kind,
            decision,
            leg_stiffness: leg,
            duration_s: duration,
            ticks: self.config.ticks(duration),
        })
    }

    /// Scores a raw (untrimmed) trial log.
    pub fn score(&self, raw: &TrialLog) -> Result<CostBreakdown> {
        let trimmed = raw.trim_transient(self.config.discard_s)?;
        Ok(evaluate(&trimmed, &self.config.weights, &self.config.scales())?)
    }

    /// Records the outcome of the due trial. `human` carries the walker
    /// state after the trial in batch mode.
    pub fn record_trial(&mut self, kind: &TrialKind, raw: &TrialLog, human: Option<HumanState>) -> Result<()> {
        let spec = self.next_trial()?;
        if spec.kind != *kind {
            return Err(ProtocolError::UnexpectedTrial {
                expected: Box::new(spec.kind),
                got: Box::new(kind.clone()),
            });
        }
        let cost = self.score(raw)?;
        let assist = raw.mean_assist_level();
        let mut next = self.clone();
        let start = next.clock_s;
        next.clock_s += spec.duration_s;
        if let Some(h) = human {
            next.human = Some(h);
        }
        if let Some(h) = next.human.as_mut() {
            h.adapt(&next.config.plant, assist, spec.duration_s);
        }
        match spec.kind {
            TrialKind::Optimization { .. } => {
                let g = next.pending_generation.as_mut().expect("prepared");
                g.results.push((cost, assist, start));
                if g.results.len() == next.config.lambda {
                    next.finish_generation()?;
                }
            }
            TrialKind::Validation { round, condition, .. } => {
                let v = next.pending_validation.as_mut().expect("prepared");
                v.rounds[round as usize].results.push(ConditionResult {
                    condition,
                    stiffness: spec.decision.clone(),
                    cost,
                });
                if v.rounds.iter().all(|r| r.results.len() == 4) {
                    next.finish_day();
                }
            }
        }
        *self = next;
        Ok(())
    }

    fn finish_generation(&mut self) -> Result<()> {
        let g = self.pending_generation.take().expect("generation in progress");
        let fitness: Vec<f64> = g.results.iter().map(|r| r.0.total).collect();
        let xs: Vec<DVector<f64>> = g.candidates.iter().map(|c| DVector::from_column_slice(c)).collect();
        let ranked = rank_population(xs, fitness)?;
        let next = step(&self.cma, &self.params, &ranked)?;
        for (i, (x, (cost, assist, t))) in g.candidates.iter().zip(&g.results).enumerate() {
            self.archive.push(ArchiveRecord {
                generation: self.cma.generation,
                candidate: x.clone(),
                fitness: cost.total,
                timestamp: *t,
                info: TrialInfo {
                    day: self.day,
                    index: i,
                    cost: *cost,
                    assist_level: *assist,
                },
            })?;
        }
        self.cma = next;
        self.history.push(SearchPoint::of(&self.cma));
        self.generation_in_day += 1;
        self.clock_s += self.config.break_s;
        if let Some(h) = self.human.as_mut() {
            h.adapt(&self.config.plant, 0.0, self.config.break_s);
        }
        Ok(())
    }

    fn finish_day(&mut self) {
        let v = self.pending_validation.take().expect("validation in progress");
        self.reports.push(ValidationReport {
            day: self.day,
            rounds: v.rounds,
        });
        self.day += 1;
        self.generation_in_day = 0;
        self.clock_s += self.config.day_gap_s;
        if self.config.learn_off_time {
            if let Some(h) = self.human.as_mut() {
                h.adapt(&self.config.plant, 0.0, self.config.day_gap_s);
            }
        }
    }

    /// Simulates a trial against the walker without touching the session.
    pub fn simulate(&self, spec: &TrialSpec) -> Result<(TrialLog, HumanState)> {
        let mut human = self.human.clone().ok_or(ProtocolError::NotBatch)?;
        let log = closed_loop_trial(
            &mut human,
            &self.config.plant,
            self.path(),
            self.deadband(),
            spec.gains(),
            spec.decision.clone(),
            spec.ticks,
            self.config.dt(),
        );
        Ok((log, human))
    }

    /// Runs the due trial in batch mode and returns its trimmed log.
    pub fn run_trial(&mut self) -> Result<TrialLog> {
        if self.config.live {
            return Err(ProtocolError::NotBatch);
        }
        let spec = self.next_trial()?;
        let (log, human) = self.simulate(&spec)?;
        self.record_trial(&spec.kind, &log, Some(human))?;
        Ok(log.trim_transient(self.config.discard_s)?)
    }

    /// One full generation. On failure the session is left unchanged.
    pub fn run_generation(&mut self) -> Result<()> {
        let mut next = self.clone();
        next.next_trial()?;
        if next.in_validation() {
            return Err(ProtocolError::OutOfPhase("no generation budget left today"));
        }
        let target = next.cma.generation + 1;
        while next.cma.generation < target {
            next.run_trial()?;
        }
        *self = next;
        Ok(())
    }

    /// The validation block that closes the current day.
    pub fn run_validation(&mut self) -> Result<ValidationReport> {
        let mut next = self.clone();
        next.next_trial()?;
        if !next.in_validation() {
            return Err(ProtocolError::OutOfPhase("generations remain before validation"));
        }
        let reports = next.reports.len();
        while next.reports.len() == reports {
            next.run_trial()?;
        }
        *self = next;
        Ok(self.reports.last().expect("just pushed").clone())
    }

    pub fn run_day(&mut self) -> Result<ValidationReport> {
        let mut next = self.clone();
        while !next.in_validation() {
            next.run_generation()?;
        }
        let report = next.run_validation()?;
        *self = next;
        Ok(report)
    }

    pub fn run_to_end(&mut self) -> Result<()> {
        while !self.is_finished() {
            self.run_trial()?;
        }
        Ok(())
    }

    pub fn to_snapshot(&self) -> String {
        serde_json::to_string_pretty(&SnapshotRef {
            format: SNAPSHOT_FORMAT,
            version: SNAPSHOT_VERSION,
            session: self,
        })
        .expect("session serialises")
    }

    pub fn from_snapshot(text: &str) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(text).map_err(|e| ProtocolError::Corrupt(e.to_string()))?;
        if value.get("format").and_then(|f| f.as_str()) != Some(SNAPSHOT_FORMAT) {
            return Err(ProtocolError::Corrupt("not a session snapshot".into()));
        }
        let version = value
            .get("version")
            .and_then(|v| v.as_u64())
            .ok_or_else(|| ProtocolError::Corrupt("missing version".into()))?;
        if version != SNAPSHOT_VERSION as u64 {
            return Err(ProtocolError::VersionMismatch {
                found: version as u32,
                expected: SNAPSHOT_VERSION,
            });
        }
        let snap: Snapshot = serde_json::from_value(value).map_err(|e| ProtocolError::Corrupt(e.to_string()))?;
        let mut session = snap.session;
        session.config.validate()?;
        session.path = Some(Arc::new(session.config.reference_path()?));
        Ok(session)
    }

    /// Writes the snapshot through a temporary file so a crash never leaves
    /// a half-written snapshot behind.
    pub fn save(&self, dest: &Path) -> Result<()> {
        let tmp = dest.with_extension("tmp");
        fs::write(&tmp, self.to_snapshot())?;
        fs::rename(&tmp, dest)?;
        Ok(())
    }

    pub fn load(src: &Path) -> Result<Self> {
        Self::from_snapshot(&fs::read_to_string(src)?)
    }

    /// Archive as JSON lines, one record per sampled stiffness.
    pub fn write_archive<W: Write>(&self, mut out: W) -> io::Result<()> {
        for r in self.archive.records() {
            serde_json::to_writer(&mut out, r)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }
}

#[derive(Serialize)]
struct SnapshotRef<'a> {
    format: &'a str,
    version: u32,
    session: &'a Session,
}

/// A trial driven by an external stream of intended poses, one per control
/// tick. The live service and batch replay both step through this, so a
/// trace produces the same log either way.
pub struct TraceTrial<'a> {
    controller: AssistController<'a>,
    admittance: f64,
    ticks: usize,
    dt: f64,
    logged: Vec<f64>,
    torques: Vec<AnglePair>,
    errors: Vec<AnglePair>,
}

impl<'a> TraceTrial<'a> {
    pub fn new(session: &Session, path: &'a ReferencePath, spec: &TrialSpec) -> Self {
        let dt = session.config.dt();
        Self {
            controller: AssistController::new(path, session.deadband(), spec.gains(), dt).expect("positive control period"),
            admittance: session.config.plant.h_adm,
            ticks: spec.ticks,
            dt,
            logged: spec.decision.clone(),
            torques: Vec::with_capacity(spec.ticks),
            errors: Vec::with_capacity(spec.ticks),
        }
    }

    /// One control tick. The returned sample's `q_act` is the assisted pose.
    pub fn tick(&mut self, intended: AnglePair) -> ControlSample {
        let sample = self.controller.settle(intended, self.admittance);
        if self.errors.len() < self.ticks {
            self.errors.push(sample.error);
            self.torques.push(sample.command.torque);
        }
        sample
    }

    pub fn elapsed_ticks(&self) -> usize {
        self.errors.len()
    }

    pub fn is_complete(&self) -> bool {
        self.errors.len() >= self.ticks
    }

    pub fn remaining_s(&self) -> f64 {
        (self.ticks - self.errors.len()) as f64 * self.dt
    }

    /// Log of the ticks so far, untrimmed. The torque of the final tick
    /// acts after the trial and is not logged.
    pub fn log(&self) -> TrialLog {
        TrialLog {
            dt: self.dt,
            torques: self.torques[..self.torques.len().saturating_sub(1)].to_vec(),
            errors: self.errors.clone(),
            stiffness: self.logged.clone(),
        }
    }
}

/// Batch replay of an intended-pose trace, one pose per control tick.
pub fn replay_trace(session: &Session, spec: &TrialSpec, trace: &[AnglePair]) -> TrialLog {
    let path = session.shared_path();
    let mut trial = TraceTrial::new(session, &path, spec);
    for q in trace.iter().take(spec.ticks) {
        trial.tick(*q);
    }
    trial.log()
}

/// Costs of constant-stiffness trials of `config.trial_s`, one fresh walker
/// per seed. Used to map the cost landscape.
pub fn constant_stiffness_costs(config: &SessionConfig, path: &ReferencePath, leg_stiffness: [f64; 2], seeds: &[u64]) -> Vec<f64> {
    let gains = ImpedanceGains::new(leg_stiffness, CRITICAL_DAMPING).expect("non-negative stiffness");
    let deadband = Deadband::from_degrees(config.deadband_deg).expect("validated");
    let logged: Vec<f64> = config.optimized_joints.iter().map(|j| leg_stiffness[j.axis()]).collect();
    seeds
        .iter()
        .map(|&seed| {
            let mut human = HumanState::seeded(&config.plant, seed);
            let log = closed_loop_trial(
                &mut human,
                &config.plant,
                path,
                deadband,
                gains,
                logged.clone(),
                config.ticks(config.trial_s),
                config.dt(),
            );
            let trimmed = log.trim_transient(config.discard_s).expect("trial longer than transient");
            evaluate(&trimmed, &config.weights, &config.scales()).expect("well-formed log").total
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quick() -> SessionConfig {
        SessionConfig {
            seed: 11,
            days: 1,
            generations_per_day: 2,
            lambda: 3,
            trial_s: 2.0,
            discard_s: 0.5,
            break_s: 10.0,
            validation_trial_s: 1.0,
            validation_rounds: 2,
            ..SessionConfig::default()
        }
    }

    #[test]
    fn default_config_validates_and_round_trips() {
        let cfg = SessionConfig::default();
        cfg.validate().unwrap();
        assert_eq!(SessionConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
        assert_eq!(cfg.ticks(cfg.trial_s), 6000);
    }

    #[test]
    fn config_rejections() {
        let bad = |c: SessionConfig| c.validate().is_err();
        assert!(bad(SessionConfig {
            discard_s: 60.0,
            ..SessionConfig::default()
        }));
        assert!(bad(SessionConfig {
            lambda: 1,
            ..SessionConfig::default()
        }));
        assert!(bad(SessionConfig {
            optimized_joints: vec![Joint::LeftHip, Joint::RightKnee],
            ..SessionConfig::default()
        }));
        assert!(bad(SessionConfig {
            optimized_joints: vec![Joint::RightHip, Joint::RightHip],
            ..SessionConfig::default()
        }));
        assert!(SessionConfig::from_toml("unknown_key = 1").is_err());
        let err = SessionConfig {
            trial_s: 10.0,
            discard_s: 10.0,
            ..SessionConfig::default()
        }
        .validate()
        .unwrap_err();
        assert!(matches!(err, ProtocolError::Config { ref field, .. } if field == "trial_s"));
    }

    #[test]
    fn leg_stiffness_fills_fixed_joint() {
        let cfg = SessionConfig {
            optimized_joints: vec![Joint::LeftKnee],
            ..SessionConfig::default()
        };
        assert_eq!(cfg.leg_stiffness(&[123.0]), [50.0, 123.0]);
        assert_eq!(SessionConfig::default().leg_stiffness(&[1.0, 2.0]), [1.0, 2.0]);
    }

    #[test]
    fn streams_are_independent() {
        use rand::Rng;
        let cfg = SessionConfig::default();
        let a: u64 = cfg.stream(STREAM_SAMPLER).random();
        let b: u64 = cfg.stream(STREAM_PLANT).random();
        assert_ne!(a, b);
        assert_eq!(a, cfg.stream(STREAM_SAMPLER).random::<u64>());
    }

    #[test]
    fn generation_accounting() {
        let mut s = Session::new(quick()).unwrap();
        s.run_generation().unwrap();
        assert_eq!(s.archive.len(), 3);
        assert_eq!(s.cma.generation, 1);
        assert!((s.clock_s - (3.0 * 2.0 + 10.0)).abs() < 1e-12);
        assert_eq!(s.history.len(), 2);
        assert_eq!(s.history[1].generation, 1);
    }

    #[test]
    fn validation_block_shape() {
        let mut s = Session::new(quick()).unwrap();
        let report = s.run_day().unwrap();
        assert_eq!(report.rounds.len(), 2);
        for r in &report.rounds {
            assert_eq!(r.results.len(), 4);
            let mut seen: Vec<Condition> = r.results.iter().map(|c| c.condition).collect();
            assert_eq!(seen, r.order.to_vec());
            seen.sort_by_key(|c| *c as u8);
            assert_eq!(seen, Condition::ALL.to_vec());
        }
        let best = s
            .archive
            .records()
            .iter()
            .min_by(|a, b| a.fitness.total_cmp(&b.fitness))
            .unwrap();
        let used = &report.rounds[0].results.iter().find(|r| r.condition == Condition::Best).unwrap().stiffness;
        assert_eq!(used, &best.candidate);
        assert!(s.is_finished());
        assert!(matches!(s.run_trial(), Err(ProtocolError::Finished)));
    }

    #[test]
    fn no_assist_trial_logs_zero_torque() {
        let mut s = Session::new(quick()).unwrap();
        s.run_generation().unwrap();
        s.run_generation().unwrap();
        loop {
            let spec = s.next_trial().unwrap();
            let is_none = matches!(spec.kind, TrialKind::Validation { condition: Condition::NoAssist, .. });
            let log = s.run_trial().unwrap();
            if is_none {
                assert!(log.torques.iter().all(|u| *u == [0.0, 0.0]));
                break;
            }
        }
    }

    #[test]
    fn recording_the_wrong_trial_is_rejected() {
        let mut s = Session::new(quick()).unwrap();
        let spec = s.next_trial().unwrap();
        let (log, human) = s.simulate(&spec).unwrap();
        let wrong = TrialKind::Optimization {
            generation: 0,
            index: 2,
        };
        assert!(matches!(
            s.record_trial(&wrong, &log, Some(human.clone())),
            Err(ProtocolError::UnexpectedTrial { .. })
        ));
        s.record_trial(&spec.kind, &log, Some(human)).unwrap();
        assert_eq!(s.completed_trials(), 1);
    }

    #[test]
    fn snapshot_errors_are_distinct() {
        let s = Session::new(quick()).unwrap();
        let text = s.to_snapshot();
        assert_eq!(Session::from_snapshot(&text).unwrap(), s);
        assert!(matches!(
            Session::from_snapshot(&text[..text.len() / 2]),
            Err(ProtocolError::Corrupt(_))
        ));
        let bumped = text.replacen("\"version\": 1", "\"version\": 99", 1);
        assert!(matches!(
            Session::from_snapshot(&bumped),
            Err(ProtocolError::VersionMismatch { found: 99, .. })
        ));
    }
}
