//! Simulated walker for batch sessions.
//!
//! The walker is kinematic: it intends a pose on the reference path plus a
//! phase-localised bias and coloured motor noise, and the exoskeleton torque
//! displaces it through a linear admittance. The bias shrinks with practice
//! and may grow back when the walker leans on the robot.

use std::f64::consts::PI;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::controller::{
    rad, AnglePair, AssistController, ControlSample, Deadband, ImpedanceGains, JointPose, ReferencePath,
};
use crate::objective::{evaluate, scales_for, CostWeights, TrialLog};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PlantError {
    #[error("plant parameter `{field}` {reason}")]
    Invalid { field: &'static str, reason: &'static str },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HumanParams {
    /// Initial bias amplitude (rad).
    pub b0: f64,
    /// Per-joint gait phase at the bias peak, fraction of a cycle.
    pub bias_phase_center: [f64; 2],
    /// Per-joint full width of the raised-cosine bias bump.
    pub bias_phase_width: [f64; 2],
    /// Per-joint signed scaling of the bias.
    pub bias_weights: [f64; 2],
    /// Admittance (rad/Nm).
    pub h_adm: f64,
    /// Stationary motor noise standard deviation (rad).
    pub noise_std: f64,
    pub noise_corner_hz: f64,
    /// Learning time constant (s of practice).
    pub tau_learn: f64,
    pub gamma_coadapt: f64,
    /// Gait cycle period (s).
    pub t_gait: f64,
}

impl Default for HumanParams {
    fn default() -> Self {
        Self {
            b0: rad(3.0),
            // hip and knee flexion peaks of the default path
            bias_phase_center: [0.916, 0.704],
            bias_phase_width: [0.3, 0.3],
            bias_weights: [1.0, 1.0],
            h_adm: 5e-4,
            noise_std: rad(0.3),
            noise_corner_hz: 3.0,
            tau_learn: 3600.0,
            gamma_coadapt: 0.6,
            t_gait: 1.2,
        }
    }
}

impl HumanParams {
    pub fn validate(&self) -> Result<(), PlantError> {
        let nonneg = [
            ("b0", self.b0),
            ("bias_phase_width", self.bias_phase_width[0]),
            ("bias_phase_width", self.bias_phase_width[1]),
            ("h_adm", self.h_adm),
            ("noise_std", self.noise_std),
            ("noise_corner_hz", self.noise_corner_hz),
            ("gamma_coadapt", self.gamma_coadapt),
        ];
        for (field, v) in nonneg {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(PlantError::Invalid {
                    field,
                    reason: "must be finite and non-negative",
                });
            }
        }
        for (field, v) in [("t_gait", self.t_gait), ("tau_learn", self.tau_learn)] {
            if !(v > 0.0) {
                return Err(PlantError::Invalid {
                    field,
                    reason: "must be positive",
                });
            }
        }
        if !self.bias_phase_center.iter().all(|c| (0.0..1.0).contains(c)) {
            return Err(PlantError::Invalid {
                field: "bias_phase_center",
                reason: "must lie in [0, 1)",
            });
        }
        if self.bias_phase_width.iter().any(|w| *w > 1.0) {
            return Err(PlantError::Invalid {
                field: "bias_phase_width",
                reason: "cannot exceed one cycle",
            });
        }
        if self.bias_weights.iter().any(|w| !w.is_finite()) {
            return Err(PlantError::Invalid {
                field: "bias_weights",
                reason: "must be finite",
            });
        }
        Ok(())
    }

    /// Raised-cosine bump in [0, 1] for joint `j`.
    pub fn bump(&self, j: usize, phase: f64) -> f64 {
        let w = self.bias_phase_width[j];
        if w == 0.0 {
            return 0.0;
        }
        let d = (phase - self.bias_phase_center[j]).rem_euclid(1.0);
        let d = d.min(1.0 - d);
        if d >= 0.5 * w {
            0.0
        } else {
            0.5 * (1.0 + (2.0 * PI * d / w).cos())
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HumanState {
    /// Cumulative practice time (s).
    pub tau_practice: f64,
    /// Current bias amplitude (rad).
    pub b: f64,
    pub phase: f64,
    pub noise: AnglePair,
    rng: ChaCha8Rng,
    last_q: Option<AnglePair>,
}

impl HumanState {
    pub fn new(params: &HumanParams, rng: ChaCha8Rng) -> Self {
        Self {
            tau_practice: 0.0,
            b: params.b0,
            phase: 0.0,
            noise: [0.0; 2],
            rng,
            last_q: None,
        }
    }

    pub fn seeded(params: &HumanParams, seed: u64) -> Self {
        Self::new(params, ChaCha8Rng::seed_from_u64(seed))
    }

    /// Forgets the previous pose so the next velocity starts from rest.
    pub fn begin_trial(&mut self) {
        self.last_q = None;
    }

    /// Advances the gait phase and noise and returns the intended pose.
    pub fn advance(&mut self, params: &HumanParams, path: &ReferencePath, dt: f64) -> AnglePair {
        self.phase = (self.phase + dt / params.t_gait).rem_euclid(1.0);
        if self.phase >= 1.0 {
            self.phase = 0.0;
        }
        if params.noise_std > 0.0 {
            let a = (-2.0 * PI * params.noise_corner_hz * dt).exp();
            let s = params.noise_std * (1.0 - a * a).sqrt();
            for n in &mut self.noise {
                let xi: f64 = StandardNormal.sample(&mut self.rng);
                *n = a * *n + s * xi;
            }
        }
        let base = path.at_phase(self.phase);
        let mut q = [0.0; 2];
        for j in 0..2 {
            q[j] = base[j] + self.b * params.bias_weights[j] * params.bump(j, self.phase) + self.noise[j];
        }
        q
    }

    /// Pose after the assistance torque acts on the intended pose.
    pub fn realize(&mut self, params: &HumanParams, intended: AnglePair, torque: AnglePair, dt: f64) -> JointPose {
        let q = [
            intended[0] + params.h_adm * torque[0],
            intended[1] + params.h_adm * torque[1],
        ];
        let qd = match self.last_q {
            Some(p) => [(q[0] - p[0]) / dt, (q[1] - p[1]) / dt],
            None => [0.0; 2],
        };
        self.last_q = Some(q);
        JointPose { q, qd }
    }

    /// Open-loop step under a given torque.
    pub fn step(&mut self, params: &HumanParams, path: &ReferencePath, torque: AnglePair, dt: f64) -> JointPose {
        let intended = self.advance(params, path, dt);
        self.realize(params, intended, torque, dt)
    }

    /// Closed-loop step: the torque is the controller's response to the pose
    /// it produces.
    pub fn step_closed(
        &mut self,
        params: &HumanParams,
        path: &ReferencePath,
        controller: &mut AssistController<'_>,
        dt: f64,
    ) -> (JointPose, ControlSample) {
        let intended = self.advance(params, path, dt);
        let sample = controller.settle(intended, params.h_adm);
        let pose = self.realize(params, intended, sample.command.torque, dt);
        (pose, sample)
    }

    /// Practice-driven bias change over `dt` seconds at the given mean
    /// assist level in [0, 1]. Bias decays at rate (1 − γ·a)/τ and is kept
    /// in [0, 2 b0].
    pub fn adapt(&mut self, params: &HumanParams, assist_level: f64, dt: f64) {
        let rate = (params.gamma_coadapt * assist_level - 1.0) / params.tau_learn;
        self.b = (self.b * (rate * dt).exp()).clamp(0.0, 2.0 * params.b0);
        self.tau_practice += dt;
    }
}

/// Runs one closed-loop trial of `ticks` control steps and returns the raw
/// (untrimmed) log.
#[allow(clippy::too_many_arguments)]
pub fn closed_loop_trial(
    state: &mut HumanState,
    params: &HumanParams,
    path: &ReferencePath,
    deadband: Deadband,
    gains: ImpedanceGains,
    logged_stiffness: Vec<f64>,
    ticks: usize,
    dt: f64,
) -> TrialLog {
    let mut controller = AssistController::new(path, deadband, gains, dt).expect("positive control period");
    state.begin_trial();
    let mut torques = Vec::with_capacity(ticks.saturating_sub(1));
    let mut errors = Vec::with_capacity(ticks);
    for i in 0..ticks {
        let (_, sample) = state.step_closed(params, path, &mut controller, dt);
        errors.push(sample.error);
        if i + 1 < ticks {
            torques.push(sample.command.torque);
        }
    }
    TrialLog {
        dt,
        torques,
        errors,
        stiffness: logged_stiffness,
    }
}

/// Noise-free cost over whole gait cycles once the loop has settled.
fn steady_cost(params: &HumanParams, path: &ReferencePath, stiffness: AnglePair) -> f64 {
    let quiet = HumanParams {
        noise_std: 0.0,
        ..params.clone()
    };
    let dt = 0.01;
    let cycle = (params.t_gait / dt).round() as usize;
    let mut state = HumanState::seeded(&quiet, 0);
    let gains = ImpedanceGains::new(stiffness, crate::controller::CRITICAL_DAMPING).expect("non-negative stiffness");
    let log = closed_loop_trial(
        &mut state,
        &quiet,
        path,
        Deadband::default(),
        gains,
        stiffness.to_vec(),
        6 * cycle + 1,
        dt,
    );
    let log = log.trim_transient(2.0 * cycle as f64 * dt).expect("trial longer than warm-up");
    let scales = scales_for(2, 2).expect("two joints");
    evaluate(&log, &CostWeights::default(), &scales).expect("well-formed log").total
}

/// A walker without learning or co-adaptation whose expected trial cost is
/// minimised near `k_star`. Only the per-joint bias weights are tuned, so
/// that the noise-free cost is stationary at `k_star`; the achieved optimum
/// still has to be confirmed by sampling the landscape.
pub fn known_optimum_params(k_star: AnglePair) -> HumanParams {
    const STEP: f64 = 10.0;
    let path = ReferencePath::default_gait();
    let mut params = HumanParams {
        b0: rad(6.0),
        bias_phase_center: [0.916, 0.704],
        bias_phase_width: [0.6, 0.6],
        bias_weights: [1.0, 1.0],
        h_adm: 8e-3,
        noise_std: rad(0.02),
        noise_corner_hz: 1.0,
        tau_learn: 1e12,
        gamma_coadapt: 0.0,
        // slow walking keeps the damping share of the effort small; 60 s
        // trials and the 15 s transient both span whole cycles
        t_gait: 2.5,
    };
    let k = [k_star[0].clamp(STEP, 400.0 - STEP), k_star[1].clamp(STEP, 400.0 - STEP)];
    for _ in 0..3 {
        for j in 0..2 {
            // the slope in K_j falls as the bias on joint j grows
            let slope = |params: &HumanParams, w: f64| {
                let mut p = params.clone();
                p.bias_weights[j] = w;
                let (mut lo, mut hi) = (k, k);
                lo[j] -= STEP;
                hi[j] += STEP;
                steady_cost(&p, &path, hi) - steady_cost(&p, &path, lo)
            };
            let (mut a, mut b) = (0.2f64.ln(), 5f64.ln());
            for _ in 0..14 {
                let mid = 0.5 * (a + b);
                if slope(&params, mid.exp()) > 0.0 {
                    a = mid;
                } else {
                    b = mid;
                }
            }
            params.bias_weights[j] = (0.5 * (a + b)).exp();
        }
    }
    params
}
