//! Synthetic roadside scenes: pedestrian trajectories plus camera, FTM, RSSI, IMU
//! and GPS streams at their native rates.
//!
//! The world frame is ENU anchored at the RSU's ground point. The camera (and the
//! co-located WiFi access point) sits `camera_height` meters above it.

use std::io::{BufRead, Write};
use std::path::Path;

use nalgebra::{Matrix3, Vector3};
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::calib::ReferenceRecord;
use crate::error::{Error, Result};
use crate::exec;
use crate::geodesy::{
    enu_to_geodetic, CameraIntrinsics, GeodeticCoord, PixelCoord, WorldCameraTransform, WorldPoint,
};
use crate::rng::{self, Rng};

pub const GRAVITY: f64 = 9.81;
pub const MAG_FIELD_UT: f64 = 50.0;
pub const CAMERA_HZ: f64 = 3.0;
pub const FTM_HZ: f64 = 3.0;
pub const RSSI_HZ: f64 = 3.0;
pub const IMU_HZ: f64 = 50.0;
pub const GPS_HZ: f64 = 1.0;
pub const TRUTH_HZ: f64 = 50.0;
/// Farthest depth the RGBD camera reports.
pub const MAX_DEPTH: f64 = 20.0;
pub const MIN_DEPTH: f64 = 0.5;

/// Depth noise standard deviation as a fraction of range, linear from `near` at 0 m
/// to `far` at `range` meters and flat beyond.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DepthNoise {
    pub near: f64,
    pub far: f64,
    pub range: f64,
}

impl DepthNoise {
    pub fn frac(&self, z: f64) -> f64 {
        let s = (z / self.range).clamp(0.0, 1.0);
        self.near + (self.far - self.near) * s
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseConfig {
    pub depth_noise_frac: DepthNoise,
    pub bbox_pixel_std: f64,
    pub ftm_std: f64,
    pub ftm_bias: f64,
    pub imu_accel_std: f64,
    pub imu_gyro_std: f64,
    pub imu_mag_std: f64,
    pub gps_white_std: f64,
    pub gps_bias_std: f64,
    pub gps_bias_rho: f64,
    pub rssi_p0: f64,
    pub rssi_gamma: f64,
    pub rssi_shadow_std: f64,
    pub detection_dropout_prob: f64,
    pub clock_offset_std: f64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self {
            depth_noise_frac: DepthNoise {
                near: 0.01,
                far: 0.09,
                range: 20.0,
            },
            bbox_pixel_std: 2.0,
            ftm_std: 0.5,
            ftm_bias: 0.5,
            imu_accel_std: 0.1,
            imu_gyro_std: 0.01,
            imu_mag_std: 1.0,
            gps_white_std: 1.0,
            gps_bias_std: 5.0,
            gps_bias_rho: 0.95,
            rssi_p0: -40.0,
            rssi_gamma: 2.2,
            rssi_shadow_std: 4.0,
            detection_dropout_prob: 0.05,
            clock_offset_std: 0.1,
        }
    }
}

impl NoiseConfig {
    /// Every noise source disabled; path-loss parameters keep their defaults.
    pub fn zero() -> Self {
        Self {
            depth_noise_frac: DepthNoise {
                near: 0.0,
                far: 0.0,
                range: 20.0,
            },
            bbox_pixel_std: 0.0,
            ftm_std: 0.0,
            ftm_bias: 0.0,
            imu_accel_std: 0.0,
            imu_gyro_std: 0.0,
            imu_mag_std: 0.0,
            gps_white_std: 0.0,
            gps_bias_std: 0.0,
            gps_bias_rho: 0.95,
            rssi_shadow_std: 0.0,
            detection_dropout_prob: 0.0,
            clock_offset_std: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let stds = [
            ("depth_noise_frac.near", self.depth_noise_frac.near),
            ("depth_noise_frac.far", self.depth_noise_frac.far),
            ("bbox_pixel_std", self.bbox_pixel_std),
            ("ftm_std", self.ftm_std),
            ("imu_accel_std", self.imu_accel_std),
            ("imu_gyro_std", self.imu_gyro_std),
            ("imu_mag_std", self.imu_mag_std),
            ("gps_white_std", self.gps_white_std),
            ("gps_bias_std", self.gps_bias_std),
            ("rssi_shadow_std", self.rssi_shadow_std),
            ("clock_offset_std", self.clock_offset_std),
        ];
        for (name, v) in stds {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::InvalidInput(format!("{name} must be a finite non-negative number")));
            }
        }
        if !(self.depth_noise_frac.range > 0.0) {
            return Err(Error::InvalidInput("depth_noise_frac.range must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.gps_bias_rho) {
            return Err(Error::InvalidInput("gps_bias_rho must be in [0, 1)".into()));
        }
        if !(0.0..1.0).contains(&self.detection_dropout_prob) {
            return Err(Error::InvalidInput("detection_dropout_prob must be in [0, 1)".into()));
        }
        if !(self.ftm_bias.is_finite() && self.rssi_p0.is_finite() && self.rssi_gamma.is_finite()) {
            return Err(Error::InvalidInput("ftm_bias and RSSI parameters must be finite".into()));
        }
        Ok(())
    }
}

/// Where pedestrians walk: an annular sector in front of the camera, measured on
/// the ground from the RSU.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WalkRegion {
    pub range_min: f64,
    pub range_max: f64,
    /// Half-width of the sector around the camera heading, degrees.
    pub half_angle: f64,
}

impl Default for WalkRegion {
    fn default() -> Self {
        Self {
            range_min: 3.0,
            range_max: 18.0,
            half_angle: 35.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaitConfig {
    /// Vertical bob amplitude, meters.
    pub bob_amplitude: f64,
    /// Heading sway amplitude, degrees.
    pub sway_amplitude: f64,
    pub frequency_min: f64,
    pub frequency_max: f64,
}

impl Default for GaitConfig {
    fn default() -> Self {
        Self {
            bob_amplitude: 0.03,
            sway_amplitude: 3.0,
            frequency_min: 1.8,
            frequency_max: 2.2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneConfig {
    pub scene_id: String,
    pub sequence: u32,
    pub duration: f64,
    pub n_pedestrians: usize,
    pub rsu_geodetic: GeodeticCoord,
    pub camera_height: f64,
    /// Compass heading of the optical axis, degrees clockwise from north.
    pub camera_yaw: f64,
    /// Downward tilt, degrees.
    pub camera_pitch: f64,
    pub intrinsics: CameraIntrinsics,
    pub noise: NoiseConfig,
    /// Urban-canyon severity. The shared GPS bias is scaled by `1 + gps_difficulty`.
    pub gps_difficulty: f64,
    pub seed: u64,
    /// Required distance between any two pedestrians at all times, meters. 0 disables it.
    pub min_separation: f64,
    pub region: WalkRegion,
    pub speed_min: f64,
    pub speed_max: f64,
    /// Height of the tracked body centroid (and the phone) above ground.
    pub centroid_height: f64,
    pub gait: GaitConfig,
    pub n_references: usize,
    /// Survey error of reference-point world coordinates, meters per axis.
    pub ref_survey_std: f64,
    pub ref_pixel_std: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            scene_id: "scene1".into(),
            sequence: 0,
            duration: 180.0,
            n_pedestrians: 2,
            rsu_geodetic: GeodeticCoord {
                lat: 40.5,
                lon: -74.45,
                alt: 30.0,
            },
            camera_height: 2.6,
            camera_yaw: 0.0,
            camera_pitch: 15.0,
            intrinsics: CameraIntrinsics::default(),
            noise: NoiseConfig::default(),
            gps_difficulty: 0.0,
            seed: 0,
            min_separation: 0.0,
            region: WalkRegion::default(),
            speed_min: 0.8,
            speed_max: 1.6,
            centroid_height: 1.0,
            gait: GaitConfig::default(),
            n_references: 6,
            ref_survey_std: 0.05,
            ref_pixel_std: 1.0,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidInput(m.into()));
        if !(self.duration > 0.0 && self.duration.is_finite()) {
            return bad("duration must be positive");
        }
        if self.n_pedestrians == 0 {
            return bad("n_pedestrians must be at least 1");
        }
        if !(2.4..=2.8).contains(&self.camera_height) {
            return bad("camera_height must be within [2.4, 2.8] m");
        }
        if !(self.gps_difficulty >= 0.0) {
            return bad("gps_difficulty must be non-negative");
        }
        if !(self.min_separation >= 0.0) {
            return bad("min_separation must be non-negative");
        }
        let r = &self.region;
        if !(r.range_min > 0.0 && r.range_max > r.range_min && r.half_angle > 0.0 && r.half_angle < 90.0) {
            return bad("walk region is empty");
        }
        if !(self.speed_min > 0.0 && self.speed_max >= self.speed_min) {
            return bad("speed range is invalid");
        }
        if !(self.gait.frequency_min > 0.0 && self.gait.frequency_max >= self.gait.frequency_min) {
            return bad("gait frequency range is invalid");
        }
        if self.n_references < 4 {
            return bad("at least 4 reference points are needed");
        }
        if !(self.ref_survey_std >= 0.0 && self.ref_pixel_std >= 0.0) {
            return bad("reference noise must be non-negative");
        }
        self.rsu_geodetic.validate()?;
        self.intrinsics.validate()?;
        self.noise.validate()
    }

    /// True world-to-camera transform.
    pub fn camera_transform(&self) -> WorldCameraTransform {
        WorldCameraTransform::looking_from(self.rsu_world().vector(), self.camera_yaw, self.camera_pitch)
    }

    /// Camera and access point position in the world frame.
    pub fn rsu_world(&self) -> WorldPoint {
        WorldPoint::new(0.0, 0.0, self.camera_height)
    }
}

/// Gait oscillation of one pedestrian.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Gait {
    pub bob_amplitude: f64,
    /// Radians.
    pub sway_amplitude: f64,
    pub frequency: f64,
    pub phase: f64,
}

impl Gait {
    pub const NONE: Gait = Gait {
        bob_amplitude: 0.0,
        sway_amplitude: 0.0,
        frequency: 2.0,
        phase: 0.0,
    };
}

/// Horizontal motion model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Motion {
    /// Uniform cubic B-spline with one control point per second; the first control
    /// point is at `t0`. `headings` are unwrapped yaw control values in radians.
    Spline {
        t0: f64,
        points: Vec<[f64; 2]>,
        headings: Vec<f64>,
    },
    /// Counter-clockwise circle.
    Circle {
        center: [f64; 2],
        radius: f64,
        speed: f64,
        phase: f64,
    },
    Stationary { position: [f64; 2], heading: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub motion: Motion,
    pub height: f64,
    pub gait: Gait,
}

/// Kinematic state in the world frame. `yaw` is counter-clockwise from east.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrajState {
    pub position: Vector3<f64>,
    pub velocity: Vector3<f64>,
    pub acceleration: Vector3<f64>,
    pub yaw: f64,
    pub yaw_rate: f64,
}

/// Cubic B-spline basis values and first two derivatives at `u` in [0, 1).
fn bspline_basis(u: f64) -> ([f64; 4], [f64; 4], [f64; 4]) {
    let u2 = u * u;
    let u3 = u2 * u;
    let b = [
        (1.0 - u).powi(3) / 6.0,
        (3.0 * u3 - 6.0 * u2 + 4.0) / 6.0,
        (-3.0 * u3 + 3.0 * u2 + 3.0 * u + 1.0) / 6.0,
        u3 / 6.0,
    ];
    let db = [
        -(1.0 - u).powi(2) / 2.0,
        (3.0 * u2 - 4.0 * u) / 2.0,
        (-3.0 * u2 + 2.0 * u + 1.0) / 2.0,
        u2 / 2.0,
    ];
    let ddb = [1.0 - u, 3.0 * u - 2.0, -3.0 * u + 1.0, u];
    (b, db, ddb)
}

impl Trajectory {
    pub fn state(&self, t: f64) -> TrajState {
        let (mut pos, mut vel, mut acc, yaw, mut yaw_rate) = match &self.motion {
            Motion::Stationary { position, heading } => (
                Vector3::new(position[0], position[1], 0.0),
                Vector3::zeros(),
                Vector3::zeros(),
                *heading,
                0.0,
            ),
            Motion::Circle {
                center,
                radius,
                speed,
                phase,
            } => {
                let w = speed / radius;
                let a = phase + w * t;
                let (s, c) = a.sin_cos();
                (
                    Vector3::new(center[0] + radius * c, center[1] + radius * s, 0.0),
                    Vector3::new(-speed * s, speed * c, 0.0),
                    Vector3::new(-speed * w * c, -speed * w * s, 0.0),
                    a + std::f64::consts::FRAC_PI_2,
                    w,
                )
            }
            Motion::Spline {
                t0,
                points,
                headings,
            } => {
                let segments = points.len() - 3;
                let x = (t - t0).clamp(0.0, segments as f64 - 1e-9);
                let i = (x.floor() as usize).min(segments - 1);
                let (b, db, ddb) = bspline_basis(x - i as f64);
                let mut p = Vector3::zeros();
                let mut v = Vector3::zeros();
                let mut a = Vector3::zeros();
                let (mut h, mut dh) = (0.0, 0.0);
                for k in 0..4 {
                    let cp = Vector3::new(points[i + k][0], points[i + k][1], 0.0);
                    p += cp * b[k];
                    v += cp * db[k];
                    a += cp * ddb[k];
                    h += headings[i + k] * b[k];
                    dh += headings[i + k] * db[k];
                }
                (p, v, a, h, dh)
            }
        };
        let g = &self.gait;
        let w = 2.0 * std::f64::consts::PI * g.frequency;
        let arg = w * t + g.phase;
        pos.z = self.height + g.bob_amplitude * arg.sin();
        vel.z = g.bob_amplitude * w * arg.cos();
        acc.z = -g.bob_amplitude * w * w * arg.sin();
        // Heading sway runs at the stride rate, half the step rate.
        let sway_arg = 0.5 * arg;
        yaw_rate += g.sway_amplitude * 0.5 * w * sway_arg.cos();
        TrajState {
            position: pos,
            velocity: vel,
            acceleration: acc,
            yaw: yaw + g.sway_amplitude * sway_arg.sin(),
            yaw_rate,
        }
    }

    pub fn position(&self, t: f64) -> Vector3<f64> {
        self.state(t).position
    }
}

/// Rotation taking world vectors into the body frame (x forward, y left, z up).
pub fn world_to_body(yaw: f64) -> Matrix3<f64> {
    let (s, c) = yaw.sin_cos();
    Matrix3::new(c, s, 0.0, -s, c, 0.0, 0.0, 0.0, 1.0)
}

/// Noise-free 9-axis IMU reading for a kinematic state.
pub fn ideal_imu(state: &TrajState) -> ([f64; 3], [f64; 3], [f64; 3]) {
    let r = world_to_body(state.yaw);
    let acc = r * (state.acceleration + Vector3::new(0.0, 0.0, GRAVITY));
    let mag = r * Vector3::new(0.0, MAG_FIELD_UT, 0.0);
    (acc.into(), [0.0, 0.0, state.yaw_rate], mag.into())
}

/// Log-distance path loss.
pub fn rssi_model(distance: f64, p0: f64, gamma: f64) -> f64 {
    p0 - 10.0 * gamma * distance.max(0.1).log10()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraObs {
    pub t: f64,
    pub u: f64,
    pub v: f64,
    pub depth: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl CameraObs {
    pub fn xyz(&self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FtmSample {
    pub t: f64,
    pub range: f64,
    pub std: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImuSample {
    pub t: f64,
    pub acc: [f64; 3],
    pub gyr: [f64; 3],
    pub mag: [f64; 3],
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GpsFix {
    pub t: f64,
    pub lat: f64,
    pub lon: f64,
    pub alt: f64,
}

impl GpsFix {
    pub fn geodetic(&self) -> GeodeticCoord {
        GeodeticCoord {
            lat: self.lat,
            lon: self.lon,
            alt: self.alt,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RssiSample {
    pub t: f64,
    pub rssi: f64,
}

/// Ground truth at 50 Hz: world ENU position and true camera-frame position.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TruthSample {
    pub t: f64,
    pub world: [f64; 3],
    pub camera: [f64; 3],
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PedestrianStreams {
    pub id: usize,
    pub camera: Vec<CameraObs>,
    pub ftm: Vec<FtmSample>,
    pub imu: Vec<ImuSample>,
    pub gps: Vec<GpsFix>,
    pub rssi: Vec<RssiSample>,
    pub truth: Vec<TruthSample>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub config: SceneConfig,
    /// True world-to-camera transform.
    pub transform: WorldCameraTransform,
    pub rsu_world: WorldPoint,
    pub references: Vec<ReferenceRecord>,
    pub trajectories: Vec<Trajectory>,
    pub pedestrians: Vec<PedestrianStreams>,
}

impl Scene {
    /// `(scene_id, sequence)` pair identifying the recording.
    pub fn key(&self) -> (&str, u32) {
        (&self.config.scene_id, self.config.sequence)
    }
}

fn normal(std: f64) -> Normal<f64> {
    Normal::new(0.0, std).expect("std validated non-negative")
}

fn ticks(duration: f64, hz: f64) -> impl Iterator<Item = f64> {
    let n = (duration * hz + 1e-9).floor() as usize;
    (0..=n).map(move |k| k as f64 / hz)
}

/// Sample time grid shifted by a clock offset: reported stamps are on the phone's
/// grid, the true instants are `stamp - offset`, restricted to `[0, duration]`.
fn phone_ticks(duration: f64, hz: f64, offset: f64) -> impl Iterator<Item = (f64, f64)> {
    let first = ((offset * hz).ceil() as i64).max(0);
    let last = ((duration + offset) * hz + 1e-9).floor() as i64;
    (first..=last).map(move |k| {
        let stamp = k as f64 / hz;
        (stamp, (stamp - offset).clamp(0.0, duration))
    })
}

fn sample_region(region: &WalkRegion, yaw_deg: f64, rng: &mut Rng) -> [f64; 2] {
    let r2 = rng.random_range(region.range_min.powi(2)..region.range_max.powi(2));
    let r = r2.sqrt();
    let bearing = (yaw_deg + rng.random_range(-region.half_angle..region.half_angle)).to_radians();
    [r * bearing.sin(), r * bearing.cos()]
}

fn dist2(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

/// Plans all pedestrians jointly at one control point per second. A pedestrian
/// whose next step would come within `clearance` of another holds position and
/// picks a new waypoint.
fn plan_control_points(cfg: &SceneConfig, clearance: f64, rng: &mut Rng) -> Option<Vec<(Vec<[f64; 2]>, Vec<f64>)>> {
    let n = cfg.n_pedestrians;
    // Two leading and trailing points so the spline covers [-1, duration + 1].
    let steps = cfg.duration.ceil() as usize + 5;
    let mut pos: Vec<[f64; 2]> = Vec::with_capacity(n);
    for _ in 0..n {
        let mut placed = None;
        for _ in 0..1000 {
            let p = sample_region(&cfg.region, cfg.camera_yaw, rng);
            if pos.iter().all(|q| dist2(p, *q) >= clearance) {
                placed = Some(p);
                break;
            }
        }
        pos.push(placed?);
    }
    let mut waypoint: Vec<[f64; 2]> = (0..n).map(|_| sample_region(&cfg.region, cfg.camera_yaw, rng)).collect();
    let mut speed: Vec<f64> = (0..n).map(|_| rng.random_range(cfg.speed_min..=cfg.speed_max)).collect();
    let mut heading: Vec<f64> = (0..n)
        .map(|i| (waypoint[i][1] - pos[i][1]).atan2(waypoint[i][0] - pos[i][0]))
        .collect();
    let mut out: Vec<(Vec<[f64; 2]>, Vec<f64>)> = (0..n)
        .map(|i| (vec![pos[i]], vec![heading[i]]))
        .collect();
    for _ in 1..steps {
        for i in 0..n {
            let d = dist2(pos[i], waypoint[i]);
            if d < 1e-9 {
                waypoint[i] = sample_region(&cfg.region, cfg.camera_yaw, rng);
                speed[i] = rng.random_range(cfg.speed_min..=cfg.speed_max);
            }
            let d = dist2(pos[i], waypoint[i]);
            let step = speed[i].min(d);
            let dir = [(waypoint[i][0] - pos[i][0]) / d, (waypoint[i][1] - pos[i][1]) / d];
            let next = [pos[i][0] + dir[0] * step, pos[i][1] + dir[1] * step];
            let clear = (0..n).filter(|&j| j != i).all(|j| dist2(next, pos[j]) >= clearance);
            if clear {
                if step > 1e-9 {
                    let target = dir[1].atan2(dir[0]);
                    // Unwrap so the heading spline never jumps by 2π.
                    let mut delta = target - heading[i];
                    delta -= (delta / std::f64::consts::TAU).round() * std::f64::consts::TAU;
                    heading[i] += delta;
                }
                pos[i] = next;
            } else {
                waypoint[i] = sample_region(&cfg.region, cfg.camera_yaw, rng);
            }
            out[i].0.push(pos[i]);
            out[i].1.push(heading[i]);
        }
    }
    Some(out)
}

fn min_pairwise_distance(trajs: &[Trajectory], duration: f64) -> f64 {
    let mut best = f64::INFINITY;
    for t in ticks(duration, 20.0) {
        let ps: Vec<_> = trajs.iter().map(|tr| tr.position(t)).collect();
        for i in 0..ps.len() {
            for j in i + 1..ps.len() {
                best = best.min((ps[i] - ps[j]).xy().norm());
            }
        }
    }
    best
}

const MAX_PLAN_ATTEMPTS: usize = 50;

/// Draws trajectories for every pedestrian of the scene.
pub fn generate_trajectories(cfg: &SceneConfig) -> Result<Vec<Trajectory>> {
    let margin = if cfg.min_separation > 0.0 { 1.0 } else { 0.0 };
    for attempt in 0..MAX_PLAN_ATTEMPTS {
        let mut rng = rng::derive(cfg.seed, &format!("trajectories/{attempt}"));
        let Some(plans) = plan_control_points(cfg, cfg.min_separation + margin, &mut rng) else {
            continue;
        };
        let trajs: Vec<Trajectory> = plans
            .into_iter()
            .map(|(points, headings)| {
                let g = &cfg.gait;
                Trajectory {
                    motion: Motion::Spline {
                        t0: -2.0,
                        points,
                        headings,
                    },
                    height: cfg.centroid_height,
                    gait: Gait {
                        bob_amplitude: g.bob_amplitude,
                        sway_amplitude: g.sway_amplitude.to_radians(),
                        frequency: rng.random_range(g.frequency_min..=g.frequency_max),
                        phase: rng.random_range(0.0..std::f64::consts::TAU),
                    },
                }
            })
            .collect();
        if cfg.min_separation == 0.0 || min_pairwise_distance(&trajs, cfg.duration) >= cfg.min_separation {
            return Ok(trajs);
        }
    }
    Err(Error::SeparationUnsatisfiable(cfg.min_separation))
}

/// Scene-shared GPS bias, one vector per 1 Hz epoch, AR(1) started from its
/// stationary distribution.
pub fn gps_bias_sequence(cfg: &SceneConfig) -> Vec<Vector3<f64>> {
    let n = (cfg.duration * GPS_HZ).ceil() as usize + 2;
    let rho = cfg.noise.gps_bias_rho;
    let scale = 1.0 + cfg.gps_difficulty;
    let sigma = cfg.noise.gps_bias_std;
    let mut rng = rng::derive(cfg.seed, "gps_bias");
    let init = normal(sigma);
    let innov = normal(sigma * (1.0 - rho * rho).sqrt());
    let mut b = Vector3::new(init.sample(&mut rng), init.sample(&mut rng), init.sample(&mut rng));
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        out.push(b * scale);
        b = b * rho + Vector3::new(innov.sample(&mut rng), innov.sample(&mut rng), innov.sample(&mut rng));
    }
    out
}

fn camera_stream(cfg: &SceneConfig, t_wc: &WorldCameraTransform, traj: &Trajectory, rng: &mut Rng) -> Vec<CameraObs> {
    let k = &cfg.intrinsics;
    let nz = &cfg.noise;
    let pix = normal(nz.bbox_pixel_std);
    let unit = normal(1.0);
    let mut out = Vec::new();
    for t in ticks(cfg.duration, CAMERA_HZ) {
        // Draws happen every tick so one pedestrian's visibility never shifts
        // another stream's random sequence.
        let (du, dv, dz, drop) = (pix.sample(rng), pix.sample(rng), unit.sample(rng), rng.random::<f64>());
        let pc = t_wc.apply(&traj.position(t));
        if !(MIN_DEPTH..=MAX_DEPTH).contains(&pc.z) {
            continue;
        }
        let Ok(px) = k.project_camera(&pc) else { continue };
        if !k.contains(&px) || drop < nz.detection_dropout_prob {
            continue;
        }
        let noisy = PixelCoord::new(px.u + du, px.v + dv);
        let depth = (pc.z * (1.0 + nz.depth_noise_frac.frac(pc.z) * dz)).max(1e-3);
        let xyz = k.unproject(&noisy, depth);
        out.push(CameraObs {
            t,
            u: noisy.u,
            v: noisy.v,
            depth,
            x: xyz.x,
            y: xyz.y,
            z: xyz.z,
        });
    }
    out
}

fn simulate_pedestrian(
    cfg: &SceneConfig,
    t_wc: &WorldCameraTransform,
    traj: &Trajectory,
    bias: &[Vector3<f64>],
    id: usize,
) -> PedestrianStreams {
    let nz = &cfg.noise;
    let rsu = cfg.rsu_world().vector();
    let stream_rng = |name: &str| rng::derive(cfg.seed, &format!("ped{id}/{name}"));
    let mut clock = stream_rng("clock");
    let offset = normal(nz.clock_offset_std);
    let (off_ftm, off_imu, off_gps, off_rssi) = (
        offset.sample(&mut clock),
        offset.sample(&mut clock),
        offset.sample(&mut clock),
        offset.sample(&mut clock),
    );

    let camera = camera_stream(cfg, t_wc, traj, &mut stream_rng("camera"));

    let mut r = stream_rng("ftm");
    let ftm_noise = normal(nz.ftm_std);
    let ftm = phone_ticks(cfg.duration, FTM_HZ, off_ftm)
        .map(|(stamp, t)| {
            let d = (traj.position(t) - rsu).norm();
            FtmSample {
                t: stamp,
                range: (d + nz.ftm_bias + ftm_noise.sample(&mut r)).max(0.0),
                std: nz.ftm_std,
            }
        })
        .collect();

    let mut r = stream_rng("rssi");
    let shadow = normal(nz.rssi_shadow_std);
    let rssi = phone_ticks(cfg.duration, RSSI_HZ, off_rssi)
        .map(|(stamp, t)| {
            let d = (traj.position(t) - rsu).norm();
            RssiSample {
                t: stamp,
                rssi: rssi_model(d, nz.rssi_p0, nz.rssi_gamma) + shadow.sample(&mut r),
            }
        })
        .collect();

    let mut r = stream_rng("imu");
    let (na, ng, nm) = (normal(nz.imu_accel_std), normal(nz.imu_gyro_std), normal(nz.imu_mag_std));
    let imu = phone_ticks(cfg.duration, IMU_HZ, off_imu)
        .map(|(stamp, t)| {
            let (acc, gyr, mag) = ideal_imu(&traj.state(t));
            let mut s = ImuSample {
                t: stamp,
                acc,
                gyr,
                mag,
            };
            for a in 0..3 {
                s.acc[a] += na.sample(&mut r);
                s.gyr[a] += ng.sample(&mut r);
                s.mag[a] += nm.sample(&mut r);
            }
            s
        })
        .collect();

    let mut r = stream_rng("gps");
    let white = normal(nz.gps_white_std);
    let gps = phone_ticks(cfg.duration, GPS_HZ, off_gps)
        .map(|(stamp, t)| {
            let epoch = ((t * GPS_HZ).round() as usize).min(bias.len() - 1);
            let w = Vector3::new(white.sample(&mut r), white.sample(&mut r), white.sample(&mut r));
            let p = traj.position(t) + bias[epoch] + w;
            let g = enu_to_geodetic(&WorldPoint::from(p), &cfg.rsu_geodetic);
            GpsFix {
                t: stamp,
                lat: g.lat,
                lon: g.lon,
                alt: g.alt,
            }
        })
        .collect();

    let truth = ticks(cfg.duration, TRUTH_HZ)
        .map(|t| {
            let p = traj.position(t);
            TruthSample {
                t,
                world: p.into(),
                camera: t_wc.apply(&p).into(),
            }
        })
        .collect();

    PedestrianStreams {
        id,
        camera,
        ftm,
        imu,
        gps,
        rssi,
        truth,
    }
}

/// Surveyed reference points visible in the image, with survey and pixel noise.
pub fn generate_references(cfg: &SceneConfig, t_wc: &WorldCameraTransform) -> Vec<ReferenceRecord> {
    let mut rng = rng::derive(cfg.seed, "references");
    let survey = normal(cfg.ref_survey_std);
    let pix = normal(cfg.ref_pixel_std);
    let k = &cfg.intrinsics;
    let mut out = Vec::with_capacity(cfg.n_references);
    while out.len() < cfg.n_references {
        let [x, y] = sample_region(
            &WalkRegion {
                range_min: 4.0,
                range_max: cfg.region.range_max.max(5.0),
                half_angle: cfg.region.half_angle,
            },
            cfg.camera_yaw,
            &mut rng,
        );
        // Alternate ground markings and elevated fixtures so subsets are rarely coplanar.
        let z = if out.len() % 2 == 0 { 0.0 } else { rng.random_range(0.5..3.0) };
        let p = Vector3::new(x, y, z);
        let Ok(px) = k.project_camera(&t_wc.apply(&p)) else { continue };
        if !k.contains(&px) {
            continue;
        }
        let noisy_world = p + Vector3::new(survey.sample(&mut rng), survey.sample(&mut rng), survey.sample(&mut rng));
        let g = enu_to_geodetic(&WorldPoint::from(noisy_world), &cfg.rsu_geodetic);
        out.push(ReferenceRecord {
            lat: g.lat,
            lon: g.lon,
            alt: g.alt,
            u: px.u + pix.sample(&mut rng),
            v: px.v + pix.sample(&mut rng),
        });
    }
    out
}

/// Builds streams for the given trajectories.
pub fn simulate_with_trajectories(cfg: &SceneConfig, trajectories: Vec<Trajectory>) -> Result<Scene> {
    cfg.validate()?;
    let transform = cfg.camera_transform();
    let bias = gps_bias_sequence(cfg);
    let pedestrians: Vec<PedestrianStreams> = trajectories
        .iter()
        .enumerate()
        .map(|(id, tr)| simulate_pedestrian(cfg, &transform, tr, &bias, id))
        .collect();
    if pedestrians.iter().all(|p| p.camera.is_empty()) {
        return Err(Error::CameraSeesNothing);
    }
    Ok(Scene {
        config: cfg.clone(),
        transform,
        rsu_world: cfg.rsu_world(),
        references: generate_references(cfg, &transform),
        trajectories,
        pedestrians,
    })
}

pub fn generate_scene(cfg: &SceneConfig) -> Result<Scene> {
    cfg.validate()?;
    let trajectories = generate_trajectories(cfg)?;
    simulate_with_trajectories(cfg, trajectories)
}

/// Generates independent scenes, in parallel when enabled.
pub fn generate_scenes(cfgs: &[SceneConfig]) -> Result<Vec<Scene>> {
    exec::try_map(cfgs, generate_scene)
}

#[derive(Serialize, Deserialize)]
struct SceneFile {
    config: SceneConfig,
    transform: WorldCameraTransform,
    rsu_world: WorldPoint,
    references: Vec<ReferenceRecord>,
    trajectories: Vec<Trajectory>,
}

pub(crate) fn write_jsonl_file<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut out = Vec::new();
    for it in items {
        serde_json::to_writer(&mut out, it)?;
        out.push(b'\n');
    }
    std::fs::File::create(path)
        .and_then(|mut f| f.write_all(&out))
        .map_err(|e| Error::io(path, e))
}

pub(crate) fn read_jsonl_file<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::MalformedRecord {
            line: i + 1,
            reason: e.to_string(),
        })?);
    }
    Ok(out)
}

/// Writes `scene.json`, `refs.jsonl` and `streams/<ped>/<modality>.jsonl` under `dir`.
pub fn write_scene(dir: &Path, scene: &Scene) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let file = SceneFile {
        config: scene.config.clone(),
        transform: scene.transform,
        rsu_world: scene.rsu_world,
        references: scene.references.clone(),
        trajectories: scene.trajectories.clone(),
    };
    let path = dir.join("scene.json");
    let json = serde_json::to_vec_pretty(&file)?;
    std::fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
    crate::calib::write_reference_jsonl(&dir.join("refs.jsonl"), &scene.references)?;
    for p in &scene.pedestrians {
        let pd = dir.join("streams").join(p.id.to_string());
        std::fs::create_dir_all(&pd).map_err(|e| Error::io(&pd, e))?;
        write_jsonl_file(&pd.join("camera.jsonl"), &p.camera)?;
        write_jsonl_file(&pd.join("ftm.jsonl"), &p.ftm)?;
        write_jsonl_file(&pd.join("imu.jsonl"), &p.imu)?;
        write_jsonl_file(&pd.join("gps.jsonl"), &p.gps)?;
        write_jsonl_file(&pd.join("rssi.jsonl"), &p.rssi)?;
        write_jsonl_file(&pd.join("truth.jsonl"), &p.truth)?;
    }
    Ok(())
}

pub fn read_scene(dir: &Path) -> Result<Scene> {
    let path = dir.join("scene.json");
    let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let file: SceneFile = serde_json::from_slice(&bytes)?;
    let mut pedestrians = Vec::with_capacity(file.trajectories.len());
    for id in 0..file.trajectories.len() {
        let pd = dir.join("streams").join(id.to_string());
        pedestrians.push(PedestrianStreams {
            id,
            camera: read_jsonl_file(&pd.join("camera.jsonl"))?,
            ftm: read_jsonl_file(&pd.join("ftm.jsonl"))?,
            imu: read_jsonl_file(&pd.join("imu.jsonl"))?,
            gps: read_jsonl_file(&pd.join("gps.jsonl"))?,
            rssi: read_jsonl_file(&pd.join("rssi.jsonl"))?,
            truth: read_jsonl_file(&pd.join("truth.jsonl"))?,
        });
    }
    Ok(Scene {
        config: file.config,
        transform: file.transform,
        rsu_world: file.rsu_world,
        references: file.references,
        trajectories: file.trajectories,
        pedestrians,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geodesy::{geodetic_to_enu, WorldCameraTransform};

    fn quiet(n: usize, seed: u64) -> SceneConfig {
        SceneConfig {
            duration: 30.0,
            n_pedestrians: n,
            noise: NoiseConfig::zero(),
            seed,
            ..SceneConfig::default()
        }
    }

    #[test]
    fn zero_noise_streams_match_truth() {
        let scene = generate_scene(&quiet(1, 3)).unwrap();
        let p = &scene.pedestrians[0];
        let tr = &scene.trajectories[0];
        assert!(!p.camera.is_empty());
        for obs in &p.camera {
            let truth = scene.transform.apply(&tr.position(obs.t));
            assert!((Vector3::from(obs.xyz()) - truth).norm() < 1e-9);
            assert!((obs.depth - truth.z).abs() < 1e-9);
        }
        let rsu = scene.rsu_world.vector();
        for f in &p.ftm {
            assert!((f.range - (tr.position(f.t) - rsu).norm()).abs() < 1e-12);
        }
        for g in &p.gps {
            let enu = geodetic_to_enu(&g.geodetic(), &scene.config.rsu_geodetic);
            assert!((enu.vector() - tr.position(g.t)).norm() < 1e-6);
        }
    }

    #[test]
    fn deterministic_given_seed() {
        let cfg = SceneConfig {
            duration: 20.0,
            seed: 11,
            ..SceneConfig::default()
        };
        let a = generate_scene(&cfg).unwrap();
        assert_eq!(a, generate_scene(&cfg).unwrap());
        let b = generate_scene(&SceneConfig { seed: 12, ..cfg }).unwrap();
        assert_ne!(a.pedestrians[0].ftm, b.pedestrians[0].ftm);
    }

    #[test]
    fn camera_back_projection_is_self_consistent() {
        let cfg = SceneConfig {
            duration: 30.0,
            seed: 5,
            ..SceneConfig::default()
        };
        let scene = generate_scene(&cfg).unwrap();
        let k = &cfg.intrinsics;
        for p in &scene.pedestrians {
            for o in &p.camera {
                let back = k.unproject(&PixelCoord::new(o.u, o.v), o.depth);
                assert!((back - Vector3::from(o.xyz())).norm() < 1e-9);
            }
            assert!(p.ftm.iter().all(|f| f.range >= 0.0 && f.std == cfg.noise.ftm_std));
            for w in p.imu.windows(2) {
                assert!(w[1].t > w[0].t);
            }
        }
    }

    #[test]
    fn stationary_imu_is_gravity() {
        let tr = Trajectory {
            motion: Motion::Stationary {
                position: [3.0, 5.0],
                heading: 0.7,
            },
            height: 1.0,
            gait: Gait::NONE,
        };
        let (acc, gyr, mag) = ideal_imu(&tr.state(4.2));
        assert!((acc[0]).abs() < 1e-12 && acc[1].abs() < 1e-12);
        assert!((acc[2] - GRAVITY).abs() < 1e-12);
        assert_eq!(gyr, [0.0, 0.0, 0.0]);
        assert!((Vector3::from(mag).norm() - MAG_FIELD_UT).abs() < 1e-9);
    }

    #[test]
    fn circle_kinematics() {
        let (r, v) = (4.0, 1.2);
        let tr = Trajectory {
            motion: Motion::Circle {
                center: [0.0, 10.0],
                radius: r,
                speed: v,
                phase: 0.3,
            },
            height: 1.0,
            gait: Gait::NONE,
        };
        for t in [0.0, 1.7, 9.3] {
            let s = tr.state(t);
            let (acc, gyr, _) = ideal_imu(&s);
            let horiz = (acc[0].powi(2) + acc[1].powi(2)).sqrt();
            assert!((horiz - v * v / r).abs() < 1e-12);
            assert!((gyr[2] - v / r).abs() < 1e-12);
        }
    }

    #[test]
    fn spline_derivatives_match_finite_differences() {
        let cfg = SceneConfig {
            duration: 40.0,
            seed: 9,
            ..SceneConfig::default()
        };
        let trajs = generate_trajectories(&cfg).unwrap();
        let h = 1e-4;
        for tr in &trajs {
            for k in 0..200 {
                let t = 0.1 + k as f64 * 0.19;
                let s = tr.state(t);
                let fd_acc = (tr.position(t + h) - 2.0 * s.position + tr.position(t - h)) / (h * h);
                let fd_vel = (tr.position(t + h) - tr.position(t - h)) / (2.0 * h);
                assert!((fd_acc - s.acceleration).norm() < 1e-3, "t={t}");
                assert!((fd_vel - s.velocity).norm() < 1e-6);
                let fd_yaw = (tr.state(t + h).yaw - tr.state(t - h).yaw) / (2.0 * h);
                assert!((fd_yaw - s.yaw_rate).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn walking_speeds_are_plausible() {
        let cfg = SceneConfig {
            duration: 120.0,
            n_pedestrians: 3,
            seed: 2,
            ..SceneConfig::default()
        };
        let trajs = generate_trajectories(&cfg).unwrap();
        for tr in &trajs {
            let speeds: Vec<f64> = (0..1200).map(|k| tr.state(k as f64 * 0.1).velocity.xy().norm()).collect();
            let mean = speeds.iter().sum::<f64>() / speeds.len() as f64;
            assert!((0.6..=1.7).contains(&mean), "{mean}");
            assert!(speeds.iter().all(|&s| s <= cfg.speed_max + 1e-9));
        }
    }

    #[test]
    fn ftm_and_rssi_models() {
        assert_eq!(rssi_model(1.0, -40.0, 2.2), -40.0);
        assert!((rssi_model(10.0, -40.0, 2.0) - (-60.0)).abs() < 1e-12);
        let tr = Trajectory {
            motion: Motion::Stationary {
                position: [3.0, 4.0],
                heading: 0.0,
            },
            height: 2.6,
            gait: Gait::NONE,
        };
        let cfg = quiet(1, 0);
        let bias = gps_bias_sequence(&cfg);
        let streams = simulate_pedestrian(&cfg, &cfg.camera_transform(), &tr, &bias, 0);
        assert!(streams.ftm.iter().all(|f| (f.range - 5.0).abs() < 1e-12));
    }

    #[test]
    fn gps_bias_is_shared_and_correlated() {
        let cfg = SceneConfig {
            duration: 30.0,
            n_pedestrians: 2,
            seed: 4,
            noise: NoiseConfig {
                gps_white_std: 0.0,
                clock_offset_std: 0.0,
                ..NoiseConfig::default()
            },
            ..SceneConfig::default()
        };
        let scene = generate_scene(&cfg).unwrap();
        let err = |p: &PedestrianStreams, k: usize| {
            let g = &p.gps[k];
            geodetic_to_enu(&g.geodetic(), &cfg.rsu_geodetic).vector() - scene.trajectories[p.id].position(g.t)
        };
        for k in 0..scene.pedestrians[0].gps.len() {
            assert!((err(&scene.pedestrians[0], k) - err(&scene.pedestrians[1], k)).norm() < 1e-6);
        }

        let long = SceneConfig {
            duration: 10_000.0,
            seed: 1,
            noise: NoiseConfig {
                gps_bias_rho: 0.99,
                ..NoiseConfig::default()
            },
            ..SceneConfig::default()
        };
        let b: Vec<f64> = gps_bias_sequence(&long).iter().map(|v| v.x).collect();
        let mean = b.iter().sum::<f64>() / b.len() as f64;
        let var: f64 = b.iter().map(|x| (x - mean).powi(2)).sum();
        let cov: f64 = b.windows(2).map(|w| (w[0] - mean) * (w[1] - mean)).sum();
        assert!((cov / var - 0.99).abs() < 0.02, "{}", cov / var);
    }

    #[test]
    fn difficulty_increases_gps_error() {
        let mean_err = |difficulty: f64| {
            let mut total = 0.0;
            let mut n = 0;
            for seed in 0..10 {
                let cfg = SceneConfig {
                    duration: 30.0,
                    n_pedestrians: 1,
                    seed,
                    gps_difficulty: difficulty,
                    ..SceneConfig::default()
                };
                let s = generate_scene(&cfg).unwrap();
                for g in &s.pedestrians[0].gps {
                    let enu = geodetic_to_enu(&g.geodetic(), &cfg.rsu_geodetic).vector();
                    total += (enu - s.trajectories[0].position(g.t)).norm();
                    n += 1;
                }
            }
            total / n as f64
        };
        assert!(mean_err(3.0) > mean_err(0.0));
    }

    #[test]
    fn depth_noise_fraction_at_twenty_meters() {
        let dn = NoiseConfig::default().depth_noise_frac;
        assert!((dn.frac(20.0) - 0.09).abs() < 1e-12);
        assert!((dn.frac(0.0) - 0.01).abs() < 1e-12);
        let mut rng = rng::derive(0, "depth");
        let unit = normal(1.0);
        let z = 20.0;
        let errs: Vec<f64> = (0..10_000).map(|_| z * dn.frac(z) * unit.sample(&mut rng)).collect();
        let std = (errs.iter().map(|e| e * e).sum::<f64>() / errs.len() as f64).sqrt();
        assert!((std / z - 0.09).abs() < 0.005, "{}", std / z);
    }

    #[test]
    fn behind_camera_is_culled() {
        let cfg = quiet(1, 0);
        let tr = Trajectory {
            motion: Motion::Stationary {
                position: [0.0, -6.0],
                heading: 0.0,
            },
            height: 1.0,
            gait: Gait::NONE,
        };
        let mut rng = rng::derive(0, "cull");
        assert!(camera_stream(&cfg, &cfg.camera_transform(), &tr, &mut rng).is_empty());
        let err = simulate_with_trajectories(&cfg, vec![tr]).unwrap_err();
        assert!(matches!(err, Error::CameraSeesNothing));
    }

    #[test]
    fn separation_is_enforced() {
        let cfg = SceneConfig {
            duration: 90.0,
            n_pedestrians: 3,
            min_separation: 2.0,
            seed: 21,
            ..SceneConfig::default()
        };
        let trajs = generate_trajectories(&cfg).unwrap();
        assert!(min_pairwise_distance(&trajs, cfg.duration) >= 2.0);
        let impossible = SceneConfig {
            min_separation: 100.0,
            ..cfg
        };
        assert!(matches!(generate_trajectories(&impossible), Err(Error::SeparationUnsatisfiable(_))));
    }

    #[test]
    fn references_are_in_view() {
        let cfg = SceneConfig {
            ref_survey_std: 0.0,
            ref_pixel_std: 0.0,
            ..quiet(1, 8)
        };
        let t: WorldCameraTransform = cfg.camera_transform();
        let refs = generate_references(&cfg, &t);
        assert_eq!(refs.len(), 6);
        for r in &refs {
            let rp = r.to_reference(&cfg.rsu_geodetic).unwrap();
            let px = crate::geodesy::project(&cfg.intrinsics, &t, &rp.world).unwrap();
            assert!(px.distance(&rp.pixel) < 1e-6);
        }
    }

    #[test]
    fn scene_directory_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let scene = generate_scene(&SceneConfig {
            duration: 10.0,
            seed: 6,
            ..SceneConfig::default()
        })
        .unwrap();
        write_scene(dir.path(), &scene).unwrap();
        assert_eq!(read_scene(dir.path()).unwrap(), scene);
    }
}
