use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::geometry::Box3D;
use super::scene::{gaussian, rng_for, FrameTag, ObjectInstance, CLASSES, NUM_CLASSES};

/// A proposed box that the detection head classifies and refines.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CandidateAnchor {
    pub anchor: Box3D,
    /// Assigned ground-truth instance, `None` for background.
    pub instance: Option<u64>,
    pub frame: FrameTag,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CandidateConfig {
    pub per_frame: usize,
    /// Std of the positive-anchor center jitter, meters.
    pub center_jitter: f64,
    /// Positive-anchor size factor range.
    pub size_jitter: [f64; 2],
    pub yaw_jitter: f64,
    /// Assigned anchors lie within this planar distance of their instance;
    /// background anchors lie beyond it from every instance.
    pub assign_radius: f64,
    pub area: f64,
}

impl Default for CandidateConfig {
    fn default() -> Self {
        Self {
            per_frame: 32,
            center_jitter: 0.5,
            size_jitter: [0.8, 1.2],
            yaw_jitter: 0.3,
            assign_radius: 2.0,
            area: 40.0,
        }
    }
}

/// One jittered positive per object, then background anchors up to
/// `per_frame` in total.
pub fn make_candidates(
    frame: &[ObjectInstance],
    tag: FrameTag,
    seed: u64,
    config: &CandidateConfig,
) -> Vec<CandidateAnchor> {
    let mut rng = rng_for(seed, 0xC0FFEE ^ tag as u64);
    let mut out = Vec::with_capacity(config.per_frame.max(frame.len()));
    let [lo, hi] = config.size_jitter;
    let factor = |rng: &mut rand_chacha::ChaCha8Rng| {
        if hi > lo {
            rng.random_range(lo..hi)
        } else {
            lo
        }
    };

    for obj in frame {
        let b = obj.bbox;
        let (dx, dy, dz) = loop {
            let d = (
                gaussian(&mut rng, config.center_jitter),
                gaussian(&mut rng, config.center_jitter),
                gaussian(&mut rng, config.center_jitter * 0.2),
            );
            if d.0.hypot(d.1) <= config.assign_radius {
                break d;
            }
        };
        let size = b.size.map(|s| s * factor(&mut rng));
        let yaw = b.yaw + gaussian(&mut rng, config.yaw_jitter);
        out.push(CandidateAnchor {
            anchor: Box3D::new(
                [b.center[0] + dx, b.center[1] + dy, b.center[2] + dz],
                size,
                yaw,
                [0.0, 0.0],
            ),
            instance: Some(obj.instance_id),
            frame: tag,
        });
    }

    let half = config.area / 2.0;
    while out.len() < config.per_frame {
        let x = rng.random_range(-half..half);
        let y = rng.random_range(-half..half);
        if frame
            .iter()
            .any(|o| (o.bbox.center[0] - x).hypot(o.bbox.center[1] - y) <= config.assign_radius)
        {
            continue;
        }
        let tpl = CLASSES[rng.random_range(0..NUM_CLASSES)];
        let size = tpl.size.map(|s| s * factor(&mut rng));
        let yaw = rng.random_range(-PI..PI);
        out.push(CandidateAnchor {
            anchor: Box3D::new([x, y, size[2] / 2.0], size, yaw, [0.0, 0.0]),
            instance: None,
            frame: tag,
        });
    }
    out
}
