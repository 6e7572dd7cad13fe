//! Per-modality surrogate sensor rendering.
//!
//! Every modality produces one feature row per candidate anchor. Object-level
//! sensors (lidar, radar, camera) describe what lies around the anchor;
//! ego-level sensors (imu, gnss) broadcast the same frame-level reading to
//! every candidate.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::candidates::CandidateAnchor;
use super::geometry::Box3D;
use super::scene::{gaussian, rng_for, EgoState, ObjectInstance, Weather, CLASSES, NUM_CLASSES};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Lidar,
    Radar,
    Camera,
    Imu,
    Gnss,
}

pub const NUM_MODALITIES: usize = 5;

impl Modality {
    pub const ALL: [Modality; NUM_MODALITIES] = [
        Modality::Lidar,
        Modality::Radar,
        Modality::Camera,
        Modality::Imu,
        Modality::Gnss,
    ];

    /// Modalities that observe individual objects rather than the ego.
    pub const OBJECT_LEVEL: [Modality; 3] = [Modality::Lidar, Modality::Radar, Modality::Camera];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Modality> {
        Self::ALL.get(i).copied()
    }

    pub fn dim(self) -> usize {
        match self {
            Modality::Lidar => 24,
            Modality::Radar => 8,
            Modality::Camera => 16,
            Modality::Imu => 6,
            Modality::Gnss => 3,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Modality::Lidar => "lidar",
            Modality::Radar => "radar",
            Modality::Camera => "camera",
            Modality::Imu => "imu",
            Modality::Gnss => "gnss",
        }
    }

    pub fn is_object_level(self) -> bool {
        Self::OBJECT_LEVEL.contains(&self)
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Modality::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown modality {s:?}")))
    }
}

/// Noise multipliers and dropout-probability addends per weather condition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WeatherTable {
    /// `[weather][modality]` multiplier on the base noise std.
    pub noise: [[f64; NUM_MODALITIES]; 4],
    /// `[weather][modality]` added to the modality's dropout probability.
    pub dropout: [[f64; NUM_MODALITIES]; 4],
}

impl Default for WeatherTable {
    fn default() -> Self {
        // Columns: lidar, radar, camera, imu, gnss.
        Self {
            noise: [
                [1.0, 1.0, 1.0, 1.0, 1.0],
                [1.5, 1.1, 3.0, 1.0, 1.0],
                [2.5, 1.3, 2.5, 1.0, 1.0],
                [2.0, 1.2, 2.0, 1.0, 1.0],
            ],
            dropout: [
                [0.0; 5],
                [0.0, 0.0, 0.05, 0.0, 0.0],
                [0.10, 0.0, 0.10, 0.0, 0.0],
                [0.05, 0.0, 0.05, 0.0, 0.0],
            ],
        }
    }
}

impl WeatherTable {
    pub fn noise(&self, w: Weather, m: Modality) -> f64 {
        self.noise[w as usize][m.index()]
    }

    pub fn dropout(&self, w: Weather, m: Modality) -> f64 {
        self.dropout[w as usize][m.index()]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RenderConfig {
    /// Base additive noise std per modality (lidar, radar, camera, imu, gnss).
    pub base_noise: [f64; NUM_MODALITIES],
    /// Global multiplier on every noise std; 0 renders noise-free features.
    pub noise_scale: f64,
    pub weather: WeatherTable,
    /// Expected lidar points scale: `k · h · max(w, l) / r²`.
    pub lidar_density: f64,
    pub lidar_max_points: usize,
    /// Margin added around an anchor footprint when gathering lidar points.
    pub lidar_margin: f64,
    /// Association radius for radar returns and camera objects.
    pub association_radius: f64,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            base_noise: [0.05, 0.05, 0.1, 0.05, 0.01],
            noise_scale: 1.0,
            weather: WeatherTable::default(),
            lidar_density: 3000.0,
            lidar_max_points: 300,
            lidar_margin: 1.0,
            association_radius: 3.0,
        }
    }
}

/// One modality's rendered features for every candidate of a frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModalityFeatures {
    pub modality: Modality,
    pub available: bool,
    /// Row-major `candidates × dim`.
    #[serde(with = "b64")]
    pub values: Vec<f64>,
    /// Candidate rows withheld from this modality (zeroed, never observed).
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub masked: Vec<usize>,
}

impl ModalityFeatures {
    pub fn rows(&self) -> usize {
        self.values.len() / self.modality.dim()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let d = self.modality.dim();
        &self.values[i * d..(i + 1) * d]
    }

    /// Whether candidate `i` carries an observation of this modality.
    pub fn observed(&self, i: usize) -> bool {
        self.available && !self.masked.contains(&i)
    }

    /// Zeroes candidate `i` and marks it withheld.
    pub fn mask_row(&mut self, i: usize) {
        let d = self.modality.dim();
        self.values[i * d..(i + 1) * d].fill(0.0);
        if !self.masked.contains(&i) {
            self.masked.push(i);
            self.masked.sort_unstable();
        }
    }
}

mod b64 {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &[f64], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&crate::tensor::encode_f64(v))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<f64>, D::Error> {
        let s = String::deserialize(d)?;
        crate::tensor::decode_f64(&s).map_err(serde::de::Error::custom)
    }
}

/// Fixed, mutually orthogonal 12-dim class codes (DCT-II rows, norm 2).
pub fn class_pattern(class_id: usize) -> [f64; 12] {
    let mut p = [0.0; 12];
    let k = class_id as f64 + 1.0;
    for (n, v) in p.iter_mut().enumerate() {
        *v = (PI / 12.0 * (n as f64 + 0.5) * k).cos();
    }
    let norm = p.iter().map(|v| v * v).sum::<f64>().sqrt();
    p.map(|v| 2.0 * v / norm)
}

/// Everything a sensor sees in one frame.
#[derive(Debug, Clone, Copy)]
pub struct FrameView<'a> {
    pub objects: &'a [ObjectInstance],
    pub ego: EgoState,
    pub weather: Weather,
}

#[derive(Debug, Clone, Copy)]
struct LidarPoint {
    p: [f64; 3],
    intensity: f64,
}

/// Expected lidar return count for an object; strictly falls with range.
pub fn lidar_point_count(b: &Box3D, config: &RenderConfig, occluded: bool) -> usize {
    let r = b.range().max(2.0);
    let expected = config.lidar_density * b.size[2] * b.size[0].max(b.size[1]) / (r * r);
    let expected = if occluded { expected * 0.5 } else { expected };
    (expected.round() as usize).min(config.lidar_max_points)
}

fn occluded(target: &ObjectInstance, objects: &[ObjectInstance]) -> bool {
    let (r, az) = (target.bbox.range(), target.bbox.azimuth());
    let half = (target.bbox.size[0].max(target.bbox.size[1]) / 2.0 / r.max(1.0)).atan();
    objects.iter().any(|o| {
        if o.instance_id == target.instance_id || o.bbox.range() >= r {
            return false;
        }
        let oh = (o.bbox.size[0].max(o.bbox.size[1]) / 2.0 / o.bbox.range().max(1.0)).atan();
        super::geometry::wrap_angle(o.bbox.azimuth() - az).abs() < half + oh
    })
}

fn lidar_cloud(view: &FrameView, seed: u64, config: &RenderConfig) -> Vec<LidarPoint> {
    let mut rng = rng_for(seed, 0x11DA_0001);
    let mut pts = Vec::new();
    for o in view.objects {
        let n = lidar_point_count(&o.bbox, config, occluded(o, view.objects));
        let (s, c) = o.bbox.yaw.sin_cos();
        let refl = CLASSES[o.class_id].reflectivity;
        for _ in 0..n {
            // Box-local: x' along width, y' along length.
            let lx = rng.random_range(-0.5..0.5) * o.bbox.size[0];
            let ly = rng.random_range(-0.5..0.5) * o.bbox.size[1];
            let lz = rng.random_range(-0.5..0.5) * o.bbox.size[2];
            let p = [
                o.bbox.center[0] + c * ly - s * lx + gaussian(&mut rng, 0.03),
                o.bbox.center[1] + s * ly + c * lx + gaussian(&mut rng, 0.03),
                o.bbox.center[2] + lz + gaussian(&mut rng, 0.03),
            ];
            pts.push(LidarPoint {
                p,
                intensity: refl + gaussian(&mut rng, 0.05),
            });
        }
    }
    pts
}

fn lidar_row(anchor: &Box3D, cloud: &[LidarPoint], margin: f64) -> [f64; 24] {
    let hw = anchor.size[0] / 2.0 + margin;
    let hl = anchor.size[1] / 2.0 + margin;
    let radius = hw.hypot(hl);
    let mut row = [0.0; 24];
    let inside: Vec<(&LidarPoint, [f64; 3])> = cloud
        .iter()
        .filter_map(|pt| {
            let l = anchor.to_local(pt.p);
            // to_local gives (along heading, lateral, z).
            (l[0].abs() <= hl && l[1].abs() <= hw).then_some((pt, l))
        })
        .collect();
    if inside.is_empty() {
        return row;
    }
    let n = inside.len() as f64;
    let mut centroid = [0.0; 3];
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    let mut intensity = 0.0;
    for (pt, l) in &inside {
        let d = (pt.p[0] - anchor.center[0]).hypot(pt.p[1] - anchor.center[1]) / radius;
        row[((d * 8.0) as usize).min(7)] += 1.0 / n;
        let zb = ((pt.p[2] / 4.0).clamp(0.0, 0.999) * 8.0) as usize;
        row[8 + zb] += 1.0 / n;
        for k in 0..3 {
            centroid[k] += pt.p[k] / n;
            lo[k] = lo[k].min(l[k]);
            hi[k] = hi[k].max(l[k]);
        }
        intensity += pt.intensity / n;
    }
    row[16] = (centroid[0] - anchor.center[0]) / 2.0;
    row[17] = (centroid[1] - anchor.center[1]) / 2.0;
    row[18] = (centroid[2] - anchor.center[2]) / 2.0;
    for k in 0..3 {
        row[19 + k] = (hi[k] - lo[k]) / 4.0;
    }
    row[22] = (1.0 + n).ln() / 301f64.ln();
    row[23] = intensity;
    row
}

struct RadarReturn {
    p: [f64; 2],
    radial_velocity: f64,
    rcs: f64,
}

fn radar_returns(view: &FrameView, seed: u64) -> Vec<RadarReturn> {
    let mut rng = rng_for(seed, 0x4ADA_0002);
    view.objects
        .iter()
        .map(|o| {
            let b = &o.bbox;
            let r = b.range().max(1e-6);
            let (ux, uy) = (b.center[0] / r, b.center[1] / r);
            RadarReturn {
                p: [
                    b.center[0] + gaussian(&mut rng, 0.3),
                    b.center[1] + gaussian(&mut rng, 0.3),
                ],
                radial_velocity: b.velocity[0] * ux + b.velocity[1] * uy,
                rcs: CLASSES[o.class_id].rcs + gaussian(&mut rng, 1.5),
            }
        })
        .collect()
}

fn radar_row(anchor: &Box3D, returns: &[RadarReturn], radius: f64) -> [f64; 8] {
    let az = anchor.azimuth();
    let mut row = [
        anchor.range() / 30.0,
        az.sin(),
        az.cos(),
        0.0,
        0.0,
        0.0,
        0.0,
        0.0,
    ];
    let best = returns
        .iter()
        .map(|r| {
            (
                r,
                (r.p[0] - anchor.center[0]).hypot(r.p[1] - anchor.center[1]),
            )
        })
        .filter(|(_, d)| *d <= radius)
        .min_by(|a, b| a.1.total_cmp(&b.1));
    if let Some((r, d)) = best {
        row[3] = (-d * d / 2.0).exp();
        row[4] = (r.p[0] - anchor.center[0]) / 3.0;
        row[5] = (r.p[1] - anchor.center[1]) / 3.0;
        row[6] = r.radial_velocity / 10.0;
        row[7] = r.rcs / 20.0;
    }
    row
}

fn camera_row(anchor: &Box3D, objects: &[ObjectInstance], radius: f64) -> [f64; 16] {
    let mut row = [0.0; 16];
    let nearest = objects
        .iter()
        .map(|o| (o, anchor.center_distance(&o.bbox)))
        .filter(|(_, d)| *d <= radius)
        .min_by(|a, b| a.1.total_cmp(&b.1));
    if let Some((o, d)) = nearest {
        let vis = (-d * d / (2.0 * 0.8 * 0.8)).exp();
        let az_o = o.bbox.azimuth();
        let rel = o.bbox.yaw - az_o;
        let apparent_width =
            (o.bbox.size[1] * rel.sin()).abs() + (o.bbox.size[0] * rel.cos()).abs();
        row[0] = vis;
        row[1] =
            super::geometry::wrap_angle(az_o - anchor.azimuth()) * anchor.range().max(1.0) / 3.0;
        row[2] = vis * apparent_width / 3.0;
        row[3] = vis * o.bbox.size[2] / 3.0;
        let code = class_pattern(o.class_id);
        for k in 0..12 {
            row[4 + k] = vis * code[k];
        }
    }
    row
}

/// Renders one modality for all candidates of a frame. Deterministic in its
/// inputs.
pub fn render_modality(
    view: &FrameView,
    candidates: &[CandidateAnchor],
    modality: Modality,
    seed: u64,
    config: &RenderConfig,
) -> ModalityFeatures {
    let dim = modality.dim();
    let mut values = Vec::with_capacity(candidates.len() * dim);
    match modality {
        Modality::Lidar => {
            let cloud = lidar_cloud(view, seed, config);
            for c in candidates {
                values.extend_from_slice(&lidar_row(&c.anchor, &cloud, config.lidar_margin));
            }
        }
        Modality::Radar => {
            let returns = radar_returns(view, seed);
            for c in candidates {
                values.extend_from_slice(&radar_row(
                    &c.anchor,
                    &returns,
                    config.association_radius,
                ));
            }
        }
        Modality::Camera => {
            for c in candidates {
                values.extend_from_slice(&camera_row(
                    &c.anchor,
                    view.objects,
                    config.association_radius,
                ));
            }
        }
        Modality::Imu => {
            let e = view.ego;
            let row = [
                e.accel[0],
                e.accel[1],
                e.yaw_rate * 5.0,
                e.accel[0],
                e.accel[1],
                e.yaw_rate * 5.0,
            ];
            for _ in candidates {
                values.extend_from_slice(&row);
            }
        }
        Modality::Gnss => {
            let e = view.ego;
            let row = [e.x / 1000.0, e.y / 1000.0, e.altitude / 50.0];
            for _ in candidates {
                values.extend_from_slice(&row);
            }
        }
    }

    let std = config.base_noise[modality.index()]
        * config.noise_scale
        * config.weather.noise(view.weather, modality);
    let mut rng = rng_for(seed, 0x0015_E000 + modality.index() as u64);
    if modality.is_object_level() {
        for v in values.iter_mut() {
            *v += gaussian(&mut rng, std);
        }
    } else {
        // Ego-level readings carry one noise draw per frame.
        let noise: Vec<f64> = (0..dim).map(|_| gaussian(&mut rng, std)).collect();
        for (i, v) in values.iter_mut().enumerate() {
            *v += noise[i % dim];
        }
    }
    ModalityFeatures {
        modality,
        available: true,
        values,
        masked: Vec::new(),
    }
}

pub fn class_name(class_id: usize) -> &'static str {
    if class_id < NUM_CLASSES {
        CLASSES[class_id].name
    } else {
        "background"
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::candidates::{make_candidates, CandidateConfig};
    use crate::world::scene::{generate_scene, FrameTag, WorldConfig};

    fn view(s: &crate::world::scene::ScenePair) -> FrameView<'_> {
        FrameView {
            objects: &s.frame_t,
            ego: s.ego,
            weather: s.weather,
        }
    }

    #[test]
    fn patterns_are_orthogonal() {
        for a in 0..NUM_CLASSES {
            for b in 0..NUM_CLASSES {
                let dot: f64 = class_pattern(a)
                    .iter()
                    .zip(class_pattern(b))
                    .map(|(x, y)| x * y)
                    .sum();
                let expect = if a == b { 4.0 } else { 0.0 };
                assert!((dot - expect).abs() < 1e-12, "{a} {b} {dot}");
            }
        }
    }

    #[test]
    fn unknown_modality_name_is_config_error() {
        assert!(matches!("sonar".parse::<Modality>(), Err(Error::Config(_))));
        assert_eq!("radar".parse::<Modality>().unwrap(), Modality::Radar);
    }

    #[test]
    fn ego_level_rows_are_broadcast() {
        let s = generate_scene(2, 4, &WorldConfig::default()).unwrap();
        let c = make_candidates(&s.frame_t, FrameTag::T, 1, &CandidateConfig::default());
        for m in [Modality::Imu, Modality::Gnss] {
            let f = render_modality(&view(&s), &c, m, 9, &RenderConfig::default());
            for i in 1..f.rows() {
                assert_eq!(f.row(i), f.row(0));
            }
        }
    }

    #[test]
    fn noise_free_camera_codes_match_for_same_class_and_pose() {
        let mut s = generate_scene(2, 4, &WorldConfig::default()).unwrap();
        let base = s.frame_t[0];
        s.frame_t = vec![base];
        let anchor = CandidateAnchor {
            anchor: base.bbox,
            instance: Some(base.instance_id),
            frame: FrameTag::T,
        };
        let cfg = RenderConfig {
            noise_scale: 0.0,
            ..RenderConfig::default()
        };
        let a = render_modality(&view(&s), &[anchor, anchor], Modality::Camera, 1, &cfg);
        assert_eq!(a.row(0), a.row(1));
        let b = render_modality(&view(&s), &[anchor], Modality::Camera, 99, &cfg);
        assert_eq!(&a.row(0)[4..], &b.row(0)[4..]);
        let code = class_pattern(base.class_id);
        for (got, want) in a.row(0)[4..16].iter().zip(&code) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn rendering_is_deterministic() {
        let s = generate_scene(5, 5, &WorldConfig::default()).unwrap();
        let c = make_candidates(&s.frame_t, FrameTag::T, 1, &CandidateConfig::default());
        for m in Modality::ALL {
            let a = render_modality(&view(&s), &c, m, 42, &RenderConfig::default());
            let b = render_modality(&view(&s), &c, m, 42, &RenderConfig::default());
            assert_eq!(a, b);
            assert_eq!(a.values.len(), 32 * m.dim());
            assert!(a.values.iter().all(|v| v.is_finite()));
        }
    }
}
