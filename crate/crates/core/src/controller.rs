//! Assist-as-needed path control in the hip–knee angle plane.
//!
//! The reference point is the closest point on a closed piecewise-linear
//! path, the tracking error is passed through a per-joint deadband and the
//! assistance torque is an impedance law `u = K Δq + B Δq̇` with
//! `B = c_cr √K`, saturated at ±[`MAX_TORQUE`].
//!
//! Angles are radians throughout; degrees appear only in path files.

use std::f64::consts::PI;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Torque saturation per joint (Nm).
pub const MAX_TORQUE: f64 = 40.0;

/// Critical damping coefficient.
pub const CRITICAL_DAMPING: f64 = 10.0;

/// Default deadband radius, 1.5°.
pub const DEFAULT_DEADBAND_DEG: f64 = 1.5;

/// Hip range of motion in degrees.
pub const HIP_LIMITS_DEG: (f64, f64) = (-30.0, 120.0);
/// Knee range of motion in degrees.
pub const KNEE_LIMITS_DEG: (f64, f64) = (0.0, 120.0);

/// Points in the shipped default path.
pub const DEFAULT_PATH_POINTS: usize = 1000;

const DEFAULT_PATH_FILE: &str = include_str!("../data/reference_path.txt");

/// Segments grouped per bounding box for nearest-point pruning.
const CHUNK: usize = 16;

pub type AnglePair = [f64; 2];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ControlError {
    #[error("reference path needs at least 3 points, got {0}")]
    TooFewPoints(usize),
    #[error("reference path points {0} and {1} coincide")]
    DuplicatePoint(usize, usize),
    #[error("reference path point {index} outside joint limits: hip {hip_deg:.3}°, knee {knee_deg:.3}°")]
    OutOfLimits {
        index: usize,
        hip_deg: f64,
        knee_deg: f64,
    },
    #[error("reference path point {0} is not finite")]
    NonFinite(usize),
    #[error("path file line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("path file declares {declared} points but contains {found}")]
    CountMismatch { declared: usize, found: usize },
    #[error("negative stiffness {0}")]
    NegativeStiffness(f64),
    #[error("negative deadband radius {0}")]
    NegativeDeadband(f64),
    #[error("time step must be positive, got {0}")]
    NonPositiveStep(f64),
}

pub fn deg(rad: f64) -> f64 {
    rad * 180.0 / PI
}

pub fn rad(deg: f64) -> f64 {
    deg * PI / 180.0
}

/// Synthetic gait loop: two harmonics per joint, reduced loading-response
/// knee flexion. Returns `(hip, knee)` in degrees at gait phase `phase`.
pub fn synthetic_gait_deg(phase: f64) -> AnglePair {
    let a = 2.0 * PI * phase;
    let hip = 11.3 + 17.2 * a.cos() - 1.1 * a.sin() - 2.9 * (2.0 * a).cos() - 2.7 * (2.0 * a).sin();
    let knee = 20.1 - 5.7 * a.cos() - 21.6 * a.sin() - 11.0 * (2.0 * a).cos() + 7.6 * (2.0 * a).sin();
    [hip, knee]
}

#[derive(Debug, Clone, Copy)]
struct Chunk {
    first: usize,
    last: usize,
    min: AnglePair,
    max: AnglePair,
}

/// Closed reference path `Q_ref` with precomputed segment data.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(try_from = "Vec<AnglePair>", into = "Vec<AnglePair>")]
pub struct ReferencePath {
    points: Vec<AnglePair>,
    cumulative: Vec<f64>,
    total: f64,
    chunks: Vec<Chunk>,
}

impl PartialEq for ReferencePath {
    fn eq(&self, other: &Self) -> bool {
        self.points == other.points
    }
}

impl TryFrom<Vec<AnglePair>> for ReferencePath {
    type Error = ControlError;
    fn try_from(points: Vec<AnglePair>) -> Result<Self, Self::Error> {
        Self::new(points)
    }
}

impl From<ReferencePath> for Vec<AnglePair> {
    fn from(path: ReferencePath) -> Self {
        path.points
    }
}

/// Closest point on the path.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    pub point: AnglePair,
    /// Arclength fraction from the first point, in [0, 1).
    pub param: f64,
    pub segment: usize,
    pub distance: f64,
}

fn seg_project(q: AnglePair, a: AnglePair, b: AnglePair) -> (f64, AnglePair, f64) {
    let d = [b[0] - a[0], b[1] - a[1]];
    let len2 = d[0] * d[0] + d[1] * d[1];
    let t = (((q[0] - a[0]) * d[0] + (q[1] - a[1]) * d[1]) / len2).clamp(0.0, 1.0);
    let p = [a[0] + t * d[0], a[1] + t * d[1]];
    let e = [q[0] - p[0], q[1] - p[1]];
    (t, p, e[0] * e[0] + e[1] * e[1])
}

impl ReferencePath {
    /// Builds a path from radian pairs, validating the invariants.
    pub fn new(points: Vec<AnglePair>) -> Result<Self, ControlError> {
        let n = points.len();
        if n < 3 {
            return Err(ControlError::TooFewPoints(n));
        }
        let (hlo, hhi) = (rad(HIP_LIMITS_DEG.0), rad(HIP_LIMITS_DEG.1));
        let (klo, khi) = (rad(KNEE_LIMITS_DEG.0), rad(KNEE_LIMITS_DEG.1));
        for (i, p) in points.iter().enumerate() {
            if !(p[0].is_finite() && p[1].is_finite()) {
                return Err(ControlError::NonFinite(i));
            }
            let tol = 1e-12;
            if p[0] < hlo - tol || p[0] > hhi + tol || p[1] < klo - tol || p[1] > khi + tol {
                return Err(ControlError::OutOfLimits {
                    index: i,
                    hip_deg: deg(p[0]),
                    knee_deg: deg(p[1]),
                });
            }
            let next = (i + 1) % n;
            if points[next] == *p {
                return Err(ControlError::DuplicatePoint(i, next));
            }
        }
        let mut cumulative = Vec::with_capacity(n + 1);
        let mut acc = 0.0;
        cumulative.push(0.0);
        for i in 0..n {
            let a = points[i];
            let b = points[(i + 1) % n];
            acc += ((b[0] - a[0]).powi(2) + (b[1] - a[1]).powi(2)).sqrt();
            cumulative.push(acc);
        }
        let chunks = (0..n)
            .step_by(CHUNK)
            .map(|first| {
                let last = (first + CHUNK).min(n) - 1;
                let mut min = [f64::INFINITY; 2];
                let mut max = [f64::NEG_INFINITY; 2];
                for i in first..=last + 1 {
                    let p = points[i % n];
                    for j in 0..2 {
                        min[j] = min[j].min(p[j]);
                        max[j] = max[j].max(p[j]);
                    }
                }
                Chunk {
                    first,
                    last,
                    min,
                    max,
                }
            })
            .collect();
        Ok(Self {
            points,
            cumulative,
            total: acc,
            chunks,
        })
    }

    /// The shipped synthetic gait loop.
    pub fn default_gait() -> Self {
        Self::from_text(DEFAULT_PATH_FILE).expect("embedded reference path is valid")
    }

    /// Synthetic gait loop sampled at `points` uniform phases.
    pub fn synthetic(points: usize) -> Result<Self, ControlError> {
        let pts = (0..points)
            .map(|i| {
                let [h, k] = synthetic_gait_deg(i as f64 / points as f64);
                [rad(h), rad(k)]
            })
            .collect();
        Self::new(pts)
    }

    /// Parses the path file format: a header line with the point count
    /// followed by one `hip_deg, knee_deg` pair per line.
    pub fn from_text(text: &str) -> Result<Self, ControlError> {
        let mut lines = text
            .lines()
            .enumerate()
            .map(|(i, l)| (i + 1, l.trim()))
            .filter(|(_, l)| !l.is_empty());
        let (hline, header) = lines.next().ok_or(ControlError::Parse {
            line: 1,
            reason: "missing point count header".into(),
        })?;
        let declared: usize = header.parse().map_err(|_| ControlError::Parse {
            line: hline,
            reason: format!("expected point count, found `{header}`"),
        })?;
        let mut points = Vec::with_capacity(declared);
        for (line, l) in lines {
            let mut fields = l.split(',').map(str::trim);
            let mut next = |what: &str| -> Result<f64, ControlError> {
                let f = fields.next().ok_or_else(|| ControlError::Parse {
                    line,
                    reason: format!("missing {what}"),
                })?;
                f.parse::<f64>().map_err(|_| ControlError::Parse {
                    line,
                    reason: format!("bad {what} `{f}`"),
                })
            };
            let hip = next("hip angle")?;
            let knee = next("knee angle")?;
            if fields.next().is_some() {
                return Err(ControlError::Parse {
                    line,
                    reason: "expected two columns".into(),
                });
            }
            points.push([rad(hip), rad(knee)]);
        }
        if points.len() != declared {
            return Err(ControlError::CountMismatch {
                declared,
                found: points.len(),
            });
        }
        Self::new(points)
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("{}\n", self.points.len());
        for p in &self.points {
            let _ = writeln!(out, "{}, {}", deg(p[0]), deg(p[1]));
        }
        out
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[AnglePair] {
        &self.points
    }

    pub fn perimeter(&self) -> f64 {
        self.total
    }

    /// Axis-aligned bounding box `(min, max)`.
    pub fn bounds(&self) -> (AnglePair, AnglePair) {
        self.chunks.iter().fold(
            ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]),
            |(lo, hi), c| {
                (
                    [lo[0].min(c.min[0]), lo[1].min(c.min[1])],
                    [hi[0].max(c.max[0]), hi[1].max(c.max[1])],
                )
            },
        )
    }

    /// Same curve with the point list rotated left by `k`.
    pub fn rotated(&self, k: usize) -> Self {
        let mut pts = self.points.clone();
        let n = pts.len();
        pts.rotate_left(k % n);
        Self::new(pts).expect("rotation preserves validity")
    }

    /// Point at arclength fraction `s` (wrapped into [0, 1)).
    pub fn at_param(&self, s: f64) -> AnglePair {
        self.locate(s).0
    }

    fn locate(&self, s: f64) -> (AnglePair, usize) {
        let n = self.points.len();
        let target = s.rem_euclid(1.0) * self.total;
        let i = self.cumulative.partition_point(|&c| c <= target).saturating_sub(1).min(n - 1);
        let len = self.cumulative[i + 1] - self.cumulative[i];
        let t = ((target - self.cumulative[i]) / len).clamp(0.0, 1.0);
        let a = self.points[i];
        let b = self.points[(i + 1) % n];
        ([a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])], i)
    }

    /// Point at gait phase `phase`, interpolating linearly between samples
    /// (sample `i` sits at phase `i / len`).
    pub fn at_phase(&self, phase: f64) -> AnglePair {
        let n = self.points.len();
        let pos = phase.rem_euclid(1.0) * n as f64;
        let i = (pos.floor() as usize).min(n - 1);
        let t = pos - i as f64;
        let a = self.points[i];
        let b = self.points[(i + 1) % n];
        [a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])]
    }

    /// Euclidean-closest point on the closed polyline. Equal distances
    /// resolve to the lower arclength parameter.
    pub fn nearest(&self, q: AnglePair) -> Projection {
        self.nearest_seeded(q, None)
    }

    /// Same result as [`nearest`](Self::nearest); a segment near the answer
    /// tightens the pruning bound from the start.
    pub fn nearest_hinted(&self, q: AnglePair, hint: usize) -> Projection {
        self.nearest_seeded(q, Some(hint % self.points.len()))
    }

    fn segment_candidate(&self, q: AnglePair, s: usize) -> (f64, f64, usize, AnglePair) {
        let n = self.points.len();
        let (t, p, d2) = seg_project(q, self.points[s], self.points[(s + 1) % n]);
        let mut param = (self.cumulative[s] + t * (self.cumulative[s + 1] - self.cumulative[s])) / self.total;
        if param >= 1.0 {
            param = 0.0;
        }
        (d2, param, s, p)
    }

    fn nearest_seeded(&self, q: AnglePair, hint: Option<usize>) -> Projection {
        let mut best = hint.map(|s| self.segment_candidate(q, s));
        for chunk in &self.chunks {
            let dx = (chunk.min[0] - q[0]).max(0.0).max(q[0] - chunk.max[0]);
            let dy = (chunk.min[1] - q[1]).max(0.0).max(q[1] - chunk.max[1]);
            if let Some((d2, ..)) = best {
                if dx * dx + dy * dy > d2 {
                    continue;
                }
            }
            for s in chunk.first..=chunk.last {
                let cand = self.segment_candidate(q, s);
                let better = match best {
                    None => true,
                    Some((bd, bp, ..)) => cand.0 < bd || (cand.0 == bd && cand.1 < bp),
                };
                if better {
                    best = Some(cand);
                }
            }
        }
        let (d2, param, segment, point) = best.expect("path has segments");
        Projection {
            point,
            param,
            segment,
            distance: d2.sqrt(),
        }
    }
}

/// Deadband radius `r_db` (rad).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Deadband(f64);

impl Deadband {
    pub fn new(radius: f64) -> Result<Self, ControlError> {
        if !(radius >= 0.0) {
            return Err(ControlError::NegativeDeadband(radius));
        }
        Ok(Self(radius))
    }

    pub fn from_degrees(d: f64) -> Result<Self, ControlError> {
        Self::new(rad(d))
    }

    pub fn radius(self) -> f64 {
        self.0
    }

    fn apply(self, raw: f64) -> f64 {
        let r = self.0;
        if raw > r {
            raw - r
        } else if raw < -r {
            raw + r
        } else {
            0.0
        }
    }
}

impl Default for Deadband {
    fn default() -> Self {
        Self(rad(DEFAULT_DEADBAND_DEG))
    }
}

/// Measured joint angles and velocities.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct JointPose {
    pub q: AnglePair,
    pub qd: AnglePair,
}

/// Diagonal stiffness and the damping tied to it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImpedanceGains {
    stiffness: AnglePair,
    damping: AnglePair,
    c_cr: f64,
}

impl ImpedanceGains {
    pub fn new(stiffness: AnglePair, c_cr: f64) -> Result<Self, ControlError> {
        let b = damping_from_stiffness(&stiffness, c_cr)?;
        Ok(Self {
            stiffness,
            damping: [b[0], b[1]],
            c_cr,
        })
    }

    /// Zero stiffness and zero damping.
    pub fn none() -> Self {
        Self {
            stiffness: [0.0; 2],
            damping: [0.0; 2],
            c_cr: CRITICAL_DAMPING,
        }
    }

    pub fn stiffness(&self) -> AnglePair {
        self.stiffness
    }

    pub fn damping(&self) -> AnglePair {
        self.damping
    }

    pub fn c_cr(&self) -> f64 {
        self.c_cr
    }
}

/// `B = c_cr √K` componentwise.
pub fn damping_from_stiffness(stiffness: &[f64], c_cr: f64) -> Result<Vec<f64>, ControlError> {
    stiffness
        .iter()
        .map(|&k| {
            if k < 0.0 || k.is_nan() {
                Err(ControlError::NegativeStiffness(k))
            } else {
                Ok(c_cr * k.sqrt())
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct TorqueCommand {
    pub torque: AnglePair,
    pub saturated: [bool; 2],
}

/// Per-joint deadband error of `q_ref − q_act`.
pub fn deadband_error(q_ref: AnglePair, q_act: AnglePair, deadband: Deadband) -> AnglePair {
    [
        deadband.apply(q_ref[0] - q_act[0]),
        deadband.apply(q_ref[1] - q_act[1]),
    ]
}

pub fn impedance_torque(gains: &ImpedanceGains, error: AnglePair, error_rate: AnglePair) -> TorqueCommand {
    let mut cmd = TorqueCommand::default();
    for j in 0..2 {
        let raw = gains.stiffness[j] * error[j] + gains.damping[j] * error_rate[j];
        cmd.saturated[j] = raw.abs() > MAX_TORQUE;
        cmd.torque[j] = raw.clamp(-MAX_TORQUE, MAX_TORQUE);
    }
    cmd
}

/// Backward difference of the deadband error; zero when there is no
/// previous sample.
pub fn error_rate(current: AnglePair, previous: Option<AnglePair>, dt: f64) -> Result<AnglePair, ControlError> {
    if !(dt > 0.0) {
        return Err(ControlError::NonPositiveStep(dt));
    }
    Ok(match previous {
        Some(p) => [(current[0] - p[0]) / dt, (current[1] - p[1]) / dt],
        None => [0.0; 2],
    })
}

/// Everything the controller computed on one control tick.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ControlSample {
    pub q_act: AnglePair,
    pub q_ref: AnglePair,
    pub path_param: f64,
    pub error: AnglePair,
    pub error_rate: AnglePair,
    pub command: TorqueCommand,
}

/// Controller state for one trial: remembers the previous deadband error
/// for the damping term.
#[derive(Debug, Clone)]
pub struct AssistController<'a> {
    path: &'a ReferencePath,
    deadband: Deadband,
    gains: ImpedanceGains,
    dt: f64,
    previous: Option<AnglePair>,
    last_segment: usize,
}

impl<'a> AssistController<'a> {
    pub fn new(path: &'a ReferencePath, deadband: Deadband, gains: ImpedanceGains, dt: f64) -> Result<Self, ControlError> {
        if !(dt > 0.0) {
            return Err(ControlError::NonPositiveStep(dt));
        }
        Ok(Self {
            path,
            deadband,
            gains,
            dt,
            previous: None,
            last_segment: 0,
        })
    }

    pub fn gains(&self) -> &ImpedanceGains {
        &self.gains
    }

    /// One explicit control tick for a measured pose.
    pub fn control(&mut self, q_act: AnglePair) -> ControlSample {
        let proj = self.path.nearest_hinted(q_act, self.last_segment);
        let sample = self.evaluate(q_act, proj);
        self.previous = Some(sample.error);
        self.last_segment = proj.segment;
        sample
    }

    fn evaluate(&self, q_act: AnglePair, proj: Projection) -> ControlSample {
        let error = deadband_error(proj.point, q_act, self.deadband);
        let rate = error_rate(error, self.previous, self.dt).expect("dt checked at construction");
        ControlSample {
            q_act,
            q_ref: proj.point,
            path_param: proj.param,
            error,
            error_rate: rate,
            command: impedance_torque(&self.gains, error, rate),
        }
    }

    /// Closed-loop tick for a pose that yields to the applied torque:
    /// finds `q_act = intended + admittance · u(q_act)` and returns the
    /// controller output at that pose.
    pub fn settle(&mut self, intended: AnglePair, admittance: f64) -> ControlSample {
        if admittance == 0.0 {
            return self.control(intended);
        }
        // root of g(s) = param(nearest(pose(s))) - s over the arclength
        // parameter: bracket by doubling steps, then Illinois false position
        let wrap = |d: f64| d - d.round();
        let g = |s: f64| {
            let (q_ref, seg) = self.path.locate(s);
            let mut q = [0.0; 2];
            for j in 0..2 {
                q[j] = q_ref[j] - self.solve_joint(j, q_ref[j] - intended[j], admittance);
            }
            (wrap(self.path.nearest_hinted(q, seg).param - s), q)
        };
        const TOL: f64 = 1e-13;
        let mut a = self.path.nearest_hinted(intended, self.last_segment).param;
        let (mut ga, mut qa) = g(a);
        if ga.abs() <= TOL {
            return self.control(qa);
        }
        let dir = ga.signum();
        let mut step = ga.abs();
        let mut travelled = 0.0;
        let mut bracket = None;
        while travelled < 0.5 {
            let b = a + dir * step;
            let (gb, qb) = g(b);
            if gb.abs() <= TOL {
                return self.control(qb);
            }
            if gb.signum() != ga.signum() {
                bracket = Some((b, gb, qb));
                break;
            }
            travelled += step;
            (a, ga, qa) = (b, gb, qb);
            step *= 2.0;
        }
        let Some((mut b, mut gb, mut qb)) = bracket else {
            return self.control(qa);
        };
        let mut side = 0i8;
        for _ in 0..100 {
            if (b - a).abs() <= TOL {
                break;
            }
            let c = (a * gb - b * ga) / (gb - ga);
            let (gc, qc) = g(c);
            if gc.abs() <= TOL {
                return self.control(qc);
            }
            if gc.signum() == gb.signum() {
                (b, gb, qb) = (c, gc, qc);
                if side == 1 {
                    ga *= 0.5;
                }
                side = 1;
            } else {
                (a, ga, qa) = (c, gc, qc);
                if side == -1 {
                    gb *= 0.5;
                }
                side = -1;
            }
        }
        // a discontinuous projection can leave no exact root; keep the
        // better end of the final bracket
        let q_act = if ga.abs() <= gb.abs() { qa } else { qb };
        self.control(q_act)
    }

    /// Solves `x + h · sat(G · dz(x) + c) = e` for the raw error `x` of one
    /// joint. The left side is strictly increasing and piecewise linear.
    fn solve_joint(&self, j: usize, e: f64, h: f64) -> f64 {
        let k = self.gains.stiffness[j];
        let r = self.deadband.radius();
        let (g, c) = match self.previous {
            Some(prev) => {
                let bd = self.gains.damping[j] / self.dt;
                (k + bd, -bd * prev[j])
            }
            None => (k, 0.0),
        };
        let u_of = |x: f64| g * self.deadband.apply(x) + c;
        let tol = 1e-12 * (1.0 + e.abs());
        let consistent = |x: f64, u: f64| (x + h * u - e).abs() <= tol;
        let mut candidates = [f64::NAN; 5];
        candidates[0] = e - h * MAX_TORQUE;
        candidates[1] = e + h * MAX_TORQUE;
        candidates[2] = e - h * c;
        candidates[3] = (e + h * g * r - h * c) / (1.0 + h * g);
        candidates[4] = (e - h * g * r - h * c) / (1.0 + h * g);
        for x in candidates {
            let u = u_of(x).clamp(-MAX_TORQUE, MAX_TORQUE);
            if consistent(x, u) {
                return x;
            }
        }
        // numerical corner case: bisection on the monotone residual
        let (mut lo, mut hi) = (e - h * MAX_TORQUE - r, e + h * MAX_TORQUE + r);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if mid + h * u_of(mid).clamp(-MAX_TORQUE, MAX_TORQUE) > e {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        0.5 * (lo + hi)
    }
}
