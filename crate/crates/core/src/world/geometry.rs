use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

/// Oriented 3D box with a planar velocity.
///
/// `size` is (w, l, h); length runs along the heading. Under the yaw-ignored
/// convention used for IoU, width spans x and length spans y.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Box3D {
    pub center: [f64; 3],
    pub size: [f64; 3],
    pub yaw: f64,
    pub velocity: [f64; 2],
}

impl Box3D {
    pub fn new(center: [f64; 3], size: [f64; 3], yaw: f64, velocity: [f64; 2]) -> Self {
        Self {
            center,
            size,
            yaw: wrap_angle(yaw),
            velocity,
        }
    }

    pub fn is_valid(&self) -> bool {
        self.size.iter().all(|&s| s > 0.0 && s.is_finite())
            && (-PI..PI).contains(&self.yaw)
            && self.center.iter().all(|c| c.is_finite())
    }

    pub fn speed(&self) -> f64 {
        self.velocity[0].hypot(self.velocity[1])
    }

    /// (cx, cy, cz, w, l, h)
    pub fn aligned(&self) -> [f64; 6] {
        [
            self.center[0],
            self.center[1],
            self.center[2],
            self.size[0],
            self.size[1],
            self.size[2],
        ]
    }

    /// Planar distance between centers.
    pub fn center_distance(&self, other: &Box3D) -> f64 {
        (self.center[0] - other.center[0]).hypot(self.center[1] - other.center[1])
    }

    pub fn range(&self) -> f64 {
        self.center[0].hypot(self.center[1])
    }

    pub fn azimuth(&self) -> f64 {
        self.center[1].atan2(self.center[0])
    }

    /// Point expressed in this box's heading frame, relative to its center.
    pub fn to_local(&self, p: [f64; 3]) -> [f64; 3] {
        let (s, c) = self.yaw.sin_cos();
        let dx = p[0] - self.center[0];
        let dy = p[1] - self.center[1];
        [c * dx + s * dy, -s * dx + c * dy, p[2] - self.center[2]]
    }
}

/// Wraps an angle into [−π, π).
pub fn wrap_angle(a: f64) -> f64 {
    let mut w = (a + PI).rem_euclid(2.0 * PI) - PI;
    if w >= PI {
        w -= 2.0 * PI;
    }
    if w < -PI {
        w = -PI;
    }
    w
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn wrap_examples() {
        assert_eq!(wrap_angle(0.0), 0.0);
        assert!((wrap_angle(PI) + PI).abs() < 1e-15);
        assert!((wrap_angle(3.0 * PI / 2.0) + PI / 2.0).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn wrap_stays_in_range(a in -1e4..1e4f64) {
            let w = wrap_angle(a);
            prop_assert!((-PI..PI).contains(&w));
            prop_assert!(((w - a) / (2.0 * PI)).fract().abs().min(1.0 - ((w - a) / (2.0 * PI)).fract().abs()) < 1e-9);
        }
    }
}
