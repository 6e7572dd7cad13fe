use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::geometry::Box3D;
use crate::error::{Error, Result};

pub const NUM_CLASSES: usize = 6;
/// Index of the background class in detection logits.
pub const BACKGROUND: usize = NUM_CLASSES;
pub const FRAME_DT: f64 = 0.5;
/// Speed above which an object counts as moving.
pub const MOVING_SPEED: f64 = 0.5;

#[derive(Debug, Clone, Copy)]
pub struct ClassTemplate {
    pub name: &'static str,
    pub size: [f64; 3],
    pub max_speed: f64,
    /// Mean lidar return intensity.
    pub reflectivity: f64,
    /// Mean radar cross-section in dBsm.
    pub rcs: f64,
}

pub const CLASSES: [ClassTemplate; NUM_CLASSES] = [
    ClassTemplate {
        name: "car",
        size: [1.9, 4.6, 1.6],
        max_speed: 10.0,
        reflectivity: 0.6,
        rcs: 10.0,
    },
    ClassTemplate {
        name: "truck",
        size: [2.5, 7.0, 3.0],
        max_speed: 8.0,
        reflectivity: 0.5,
        rcs: 15.0,
    },
    ClassTemplate {
        name: "bus",
        size: [2.9, 11.0, 3.4],
        max_speed: 6.0,
        reflectivity: 0.55,
        rcs: 20.0,
    },
    ClassTemplate {
        name: "pedestrian",
        size: [0.7, 0.7, 1.8],
        max_speed: 1.5,
        reflectivity: 0.3,
        rcs: 0.0,
    },
    ClassTemplate {
        name: "cyclist",
        size: [0.8, 1.8, 1.6],
        max_speed: 5.0,
        reflectivity: 0.4,
        rcs: 3.0,
    },
    ClassTemplate {
        name: "traffic_cone",
        size: [0.4, 0.4, 1.0],
        max_speed: 0.0,
        reflectivity: 0.9,
        rcs: -5.0,
    },
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Weather {
    Normal,
    Fog,
    Rain,
    Snow,
}

impl Weather {
    pub const ALL: [Weather; 4] = [Weather::Normal, Weather::Fog, Weather::Rain, Weather::Snow];

    pub fn name(self) -> &'static str {
        match self {
            Weather::Normal => "normal",
            Weather::Fog => "fog",
            Weather::Rain => "rain",
            Weather::Snow => "snow",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FrameTag {
    T,
    T1,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectInstance {
    pub instance_id: u64,
    pub class_id: usize,
    pub bbox: Box3D,
    pub moving: bool,
}

/// Ego state; features of the ego-level sensors are read from it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EgoState {
    pub x: f64,
    pub y: f64,
    pub yaw: f64,
    pub speed: f64,
    pub accel: [f64; 2],
    pub yaw_rate: f64,
    pub altitude: f64,
}

impl EgoState {
    /// Pose propagated to the given frame.
    pub fn at(&self, frame: FrameTag) -> EgoState {
        match frame {
            FrameTag::T => *self,
            FrameTag::T1 => {
                let (s, c) = self.yaw.sin_cos();
                EgoState {
                    x: self.x + self.speed * c * FRAME_DT,
                    y: self.y + self.speed * s * FRAME_DT,
                    yaw: super::geometry::wrap_angle(self.yaw + self.yaw_rate * FRAME_DT),
                    ..*self
                }
            }
        }
    }
}

/// Two temporally adjacent frames of the same scene.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenePair {
    pub scene_id: u64,
    pub frame_t: Vec<ObjectInstance>,
    pub frame_t1: Vec<ObjectInstance>,
    pub weather: Weather,
    pub ego: EgoState,
}

impl ScenePair {
    pub fn frame(&self, tag: FrameTag) -> &[ObjectInstance] {
        match tag {
            FrameTag::T => &self.frame_t,
            FrameTag::T1 => &self.frame_t1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldConfig {
    pub min_objects: usize,
    pub max_objects: usize,
    /// Side of the square area centered on the ego, meters.
    pub area: f64,
    pub min_separation: f64,
    /// Probability that an object is in motion.
    pub moving_prob: f64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            min_objects: 1,
            max_objects: 8,
            area: 40.0,
            min_separation: 1.0,
            moving_prob: 0.6,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        if self.min_objects > self.max_objects {
            return Err(Error::Config("min_objects exceeds max_objects".into()));
        }
        if !(self.area > 0.0)
            || self.min_separation < 0.0
            || !(0.0..=1.0).contains(&self.moving_prob)
        {
            return Err(Error::Config(
                "area must be positive, separation non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// Mixes two words into a well-distributed seed; stable across platforms.
pub fn stable_seed(a: u64, b: u64) -> u64 {
    fn splitmix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }
    splitmix(a ^ splitmix(b))
}

pub fn rng_for(seed: u64, salt: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(stable_seed(seed, salt))
}

/// Generates one scene pair; a pure function of `(global_seed, scene_index)`.
pub fn generate_scene(
    global_seed: u64,
    scene_index: u64,
    config: &WorldConfig,
) -> Result<ScenePair> {
    config.validate()?;
    let mut rng = rng_for(global_seed, scene_index);
    let half = config.area / 2.0;
    let count = rng.random_range(config.min_objects..=config.max_objects);
    let weather = Weather::ALL[rng.random_range(0..4)];
    let ego = EgoState {
        x: rng.random_range(-1000.0..1000.0),
        y: rng.random_range(-1000.0..1000.0),
        yaw: rng.random_range(-PI..PI),
        speed: rng.random_range(0.0..15.0),
        accel: [rng.random_range(-2.0..2.0), rng.random_range(-1.0..1.0)],
        yaw_rate: rng.random_range(-0.2..0.2),
        altitude: rng.random_range(0.0..50.0),
    };

    let mut objects: Vec<ObjectInstance> = Vec::with_capacity(count);
    let mut attempts = 0;
    while objects.len() < count {
        attempts += 1;
        if attempts > 1000 {
            return Err(Error::Generation(format!(
                "could not place {count} objects with separation {} after 1000 attempts",
                config.min_separation
            )));
        }
        let x = rng.random_range(-half..half);
        let y = rng.random_range(-half..half);
        if objects
            .iter()
            .any(|o| (o.bbox.center[0] - x).hypot(o.bbox.center[1] - y) < config.min_separation)
        {
            continue;
        }
        let class_id = rng.random_range(0..NUM_CLASSES);
        let tpl = CLASSES[class_id];
        let size = tpl.size.map(|s| s * rng.random_range(0.9..1.1));
        let yaw = rng.random_range(-PI..PI);
        let speed = if rng.random::<f64>() < config.moving_prob {
            rng.random::<f64>() * tpl.max_speed
        } else {
            0.0
        };
        let velocity = [speed * yaw.cos(), speed * yaw.sin()];
        let bbox = Box3D::new([x, y, size[2] / 2.0], size, yaw, velocity);
        objects.push(ObjectInstance {
            instance_id: objects.len() as u64,
            class_id,
            moving: bbox.speed() > MOVING_SPEED,
            bbox,
        });
    }

    let frame_t1 = objects
        .iter()
        .map(|o| {
            let mut b = o.bbox;
            b.center[0] += b.velocity[0] * FRAME_DT;
            b.center[1] += b.velocity[1] * FRAME_DT;
            ObjectInstance { bbox: b, ..*o }
        })
        .collect();

    Ok(ScenePair {
        scene_id: scene_index,
        frame_t: objects,
        frame_t1,
        weather,
        ego,
    })
}

/// Draws from N(0, std); zero std yields exactly zero.
pub(crate) fn gaussian(rng: &mut impl Rng, std: f64) -> f64 {
    if std == 0.0 {
        0.0
    } else {
        Normal::new(0.0, std).expect("finite std").sample(rng)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_scene() {
        let c = WorldConfig::default();
        for i in 0..20 {
            assert_eq!(
                generate_scene(7, i, &c).unwrap(),
                generate_scene(7, i, &c).unwrap()
            );
        }
        assert_ne!(
            generate_scene(7, 0, &c).unwrap(),
            generate_scene(8, 0, &c).unwrap()
        );
    }

    #[test]
    fn zero_objects_gives_empty_frames() {
        let c = WorldConfig {
            min_objects: 0,
            max_objects: 0,
            ..WorldConfig::default()
        };
        let s = generate_scene(1, 3, &c).unwrap();
        assert!(s.frame_t.is_empty() && s.frame_t1.is_empty());
    }

    #[test]
    fn constant_velocity_between_frames() {
        let c = WorldConfig::default();
        for i in 0..200 {
            let s = generate_scene(11, i, &c).unwrap();
            assert!((1..=8).contains(&s.frame_t.len()));
            for (a, b) in s.frame_t.iter().zip(&s.frame_t1) {
                assert_eq!(a.instance_id, b.instance_id);
                for k in 0..2 {
                    let expect = a.bbox.center[k] + a.bbox.velocity[k] * 0.5;
                    assert!((b.bbox.center[k] - expect).abs() < 1e-9);
                }
                assert_eq!(a.moving, a.bbox.speed() > MOVING_SPEED);
                assert!(a.bbox.is_valid());
            }
            for (i, a) in s.frame_t.iter().enumerate() {
                for b in &s.frame_t[i + 1..] {
                    assert!(a.bbox.center_distance(&b.bbox) >= 1.0);
                }
            }
        }
    }

    #[test]
    fn unsatisfiable_placement_errors() {
        let c = WorldConfig {
            min_objects: 8,
            max_objects: 8,
            area: 1.0,
            min_separation: 5.0,
            moving_prob: 0.5,
        };
        assert!(matches!(
            generate_scene(0, 0, &c),
            Err(Error::Generation(_))
        ));
    }
}
