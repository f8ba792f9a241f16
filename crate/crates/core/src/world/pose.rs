use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

/// Wraps an angle into `[-pi, pi)`.
pub fn wrap_angle(a: f64) -> f64 {
    let w = (a + PI).rem_euclid(2.0 * PI) - PI;
    if w >= PI {
        w - 2.0 * PI
    } else {
        w
    }
}

/// Planar agent pose: position in meters, heading in radians
/// (counter-clockwise from +x).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub x: f64,
    pub y: f64,
    pub yaw: f64,
}

impl Pose {
    pub fn new(x: f64, y: f64, yaw: f64) -> Self {
        Pose { x, y, yaw: wrap_angle(yaw) }
    }

    pub fn distance(&self, other: &Pose) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }

    /// Expresses the world-frame displacement `other - self` in this pose's
    /// body frame (x forward, y left).
    pub fn local_offset(&self, other: &Pose) -> [f64; 2] {
        let (dx, dy) = (other.x - self.x, other.y - self.y);
        let (s, c) = self.yaw.sin_cos();
        [c * dx + s * dy, -s * dx + c * dy]
    }

    /// Translates by `offset` expressed in the body frame, then turns by
    /// `dyaw`.
    pub fn advance(&self, offset: [f64; 2], dyaw: f64) -> Pose {
        let (s, c) = self.yaw.sin_cos();
        Pose::new(self.x + c * offset[0] - s * offset[1], self.y + s * offset[0] + c * offset[1], self.yaw + dyaw)
    }
}

/// Navigation command: translation `u` in normalized step units (forward,
/// left), yaw change `phi`, and time shift `k` in seconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NavAction {
    pub u: [f64; 2],
    pub phi: f64,
    pub k: f64,
}

impl NavAction {
    pub fn new(u: [f64; 2], phi: f64, k: f64) -> Self {
        NavAction { u, phi: wrap_angle(phi), k }
    }

    pub fn zero(k: f64) -> Self {
        NavAction { u: [0.0, 0.0], phi: 0.0, k }
    }

    pub fn is_backward(&self) -> bool {
        self.u[0] < 0.0
    }
}

/// Default time-shift bounds in seconds.
pub const T_MIN: f64 = -16.0;
pub const T_MAX: f64 = 16.0;

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn wrap_convention() {
        assert_eq!(wrap_angle(PI), -PI);
        assert_eq!(wrap_angle(-PI), -PI);
        assert_eq!(wrap_angle(0.0), 0.0);
        assert!((wrap_angle(3.0 * PI / 2.0) + PI / 2.0).abs() < 1e-12);
    }

    #[test]
    fn local_offset_inverts_advance() {
        let p = Pose::new(1.0, 2.0, 0.7);
        let q = p.advance([0.3, -0.2], 0.1);
        let off = p.local_offset(&q);
        assert!((off[0] - 0.3).abs() < 1e-12 && (off[1] + 0.2).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn wrapped_angles_stay_in_range(a in -1e4f64..1e4) {
            let w = wrap_angle(a);
            prop_assert!((-PI..PI).contains(&w));
            prop_assert!(((a - w) / (2.0 * PI) - ((a - w) / (2.0 * PI)).round()).abs() < 1e-9);
        }
    }
}
