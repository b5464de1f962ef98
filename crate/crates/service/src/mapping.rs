use hilo_core::controller::{AnglePair, ReferencePath};
use serde::{Deserialize, Serialize};

/// Fraction by which the path's bounding box is enlarged on screen.
pub const INFLATION: f64 = 0.2;

/// Affine map between the unit square and the hip–knee plane.
///
/// x runs along the hip angle and y along the knee angle, both increasing
/// with the angle. The box is the path's bounding box grown by 20% about
/// its centre.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScreenMapping {
    /// Hip angle at x = 0 and x = 1 (rad).
    pub hip_range: [f64; 2],
    /// Knee angle at y = 0 and y = 1 (rad).
    pub knee_range: [f64; 2],
}

impl ScreenMapping {
    pub fn for_path(path: &ReferencePath) -> Self {
        let (lo, hi) = path.bounds();
        let grow = |j: usize| {
            let half = (hi[j] - lo[j]) * (1.0 + INFLATION) / 2.0;
            let mid = (hi[j] + lo[j]) / 2.0;
            [mid - half, mid + half]
        };
        Self {
            hip_range: grow(0),
            knee_range: grow(1),
        }
    }

    fn span(&self) -> [f64; 2] {
        [self.hip_range[1] - self.hip_range[0], self.knee_range[1] - self.knee_range[0]]
    }

    pub fn to_angles(&self, p: [f64; 2]) -> AnglePair {
        let s = self.span();
        [self.hip_range[0] + p[0] * s[0], self.knee_range[0] + p[1] * s[1]]
    }

    /// Screen position of a pose, clamped to the unit square.
    pub fn to_screen(&self, q: AnglePair) -> [f64; 2] {
        let s = self.span();
        [
            ((q[0] - self.hip_range[0]) / s[0]).clamp(0.0, 1.0),
            ((q[1] - self.knee_range[0]) / s[1]).clamp(0.0, 1.0),
        ]
    }

    /// Semi-axes of the deadband circle on screen.
    pub fn radius(&self, r: f64) -> [f64; 2] {
        let s = self.span();
        [r / s[0], r / s[1]]
    }
}
