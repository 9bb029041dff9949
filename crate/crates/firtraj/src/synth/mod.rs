//! Deterministic synthetic FIR nighttime scenarios: closed-form deer and
//! ego kinematics on a flat ground plane, a pinhole camera, and
//! parameter-randomized suites. Rendering lives in [`render`].

pub mod noise;
pub mod render;

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{EgoPose, RiskLevel};
use crate::egomotion::wrap_angle;
use crate::error::{Error, Result};

/// Pinhole camera at a fixed mount height over the ground plane, zero
/// pitch/roll, looking along the vehicle heading.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub width: usize,
    pub height: usize,
    pub hfov_deg: f64,
    pub mount_height: f64,
}

impl Default for CameraIntrinsics {
    fn default() -> Self {
        CameraIntrinsics {
            width: 640,
            height: 480,
            hfov_deg: 50.0,
            mount_height: 0.75,
        }
    }
}

impl CameraIntrinsics {
    /// Focal length in pixels: width / (2 tan(hfov/2)).
    pub fn focal(&self) -> f64 {
        self.width as f64 / (2.0 * (self.hfov_deg.to_radians() / 2.0).tan())
    }

    pub fn cx(&self) -> f64 {
        self.width as f64 / 2.0
    }

    pub fn cy(&self) -> f64 {
        self.height as f64 / 2.0
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.hfov_deg > 0.0 && self.hfov_deg < 180.0) {
            return Err(Error::invalid(format!(
                "hfov must be in (0, 180), got {}",
                self.hfov_deg
            )));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::invalid("image dimensions must be positive"));
        }
        if !(self.mount_height > 0.0) {
            return Err(Error::invalid("mount height must be positive"));
        }
        Ok(())
    }

    /// Projects a camera-frame point (X right, Y down, Z forward, meters)
    /// to pixel coordinates.
    pub fn project(&self, p: [f64; 3]) -> Result<(f64, f64)> {
        let [x, y, z] = p;
        if z <= 0.0 {
            return Err(Error::invalid(format!("point behind camera, Z = {z}")));
        }
        let f = self.focal();
        Ok((self.cx() + f * x / z, self.cy() + f * y / z))
    }
}

/// Transforms a world point (x, y east/north, z up) into the camera frame
/// of a vehicle at `pose` with the camera `mount_height` above ground.
pub fn world_to_camera(pose: &EgoPose, mount_height: f64, p: [f64; 3]) -> [f64; 3] {
    let dx = p[0] - pose.x;
    let dy = p[1] - pose.y;
    let (sin, cos) = pose.yaw.sin_cos();
    [
        dx * sin - dy * cos,
        mount_height - p[2],
        dx * cos + dy * sin,
    ]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeerKind {
    Stationary,
    ConstantVelocity,
    Jump,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JumpSpec {
    pub frame: usize,
    pub velocity: [f64; 2],
}

/// Piecewise-constant-velocity deer on the ground plane. `position` is the
/// ground point below the body centroid; the silhouette spans
/// `body_height` vertically above it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeerMotionModel {
    pub kind: DeerKind,
    pub initial_position: [f64; 2],
    pub velocity: [f64; 2],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub jump: Option<JumpSpec>,
    pub body_width: f64,
    pub body_height: f64,
}

impl DeerMotionModel {
    pub fn validate(&self) -> Result<()> {
        match (self.kind, &self.jump) {
            (DeerKind::Jump, None) => {
                return Err(Error::invalid("jump deer requires jump fields"))
            }
            (DeerKind::Jump, Some(_)) => {}
            (_, Some(_)) => {
                return Err(Error::invalid("jump fields given for non-jump deer"))
            }
            (_, None) => {}
        }
        if !(self.body_width > 0.0 && self.body_height > 0.0) {
            return Err(Error::invalid("deer body size must be positive"));
        }
        Ok(())
    }

    pub fn position_at_rate(&self, t_s: f64, frame_rate: f64) -> [f64; 2] {
        let p = self.initial_position;
        let v = self.velocity;
        match (self.kind, &self.jump) {
            (DeerKind::Stationary, _) => p,
            (DeerKind::Jump, Some(jump)) => {
                let tj = jump.frame as f64 / frame_rate;
                if t_s < tj {
                    [p[0] + v[0] * t_s, p[1] + v[1] * t_s]
                } else {
                    let base = [p[0] + v[0] * tj, p[1] + v[1] * tj];
                    let dt = t_s - tj;
                    [
                        base[0] + jump.velocity[0] * dt,
                        base[1] + jump.velocity[1] * dt,
                    ]
                }
            }
            _ => [p[0] + v[0] * t_s, p[1] + v[1] * t_s],
        }
    }

    pub fn velocity_at(&self, t_s: f64, frame_rate: f64) -> [f64; 2] {
        match (self.kind, &self.jump) {
            (DeerKind::Stationary, _) => [0.0, 0.0],
            (DeerKind::Jump, Some(jump)) if t_s >= jump.frame as f64 / frame_rate => {
                jump.velocity
            }
            _ => self.velocity,
        }
    }
}

/// Closed-form ego kinematics: straight line or constant-turn arc, both at
/// constant speed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EgoModel {
    Straight {
        x0: f64,
        y0: f64,
        yaw: f64,
        speed: f64,
    },
    Turn {
        x0: f64,
        y0: f64,
        yaw0: f64,
        speed: f64,
        /// Radians per second, nonzero; positive turns left.
        yaw_rate: f64,
    },
}

impl EgoModel {
    pub fn speed(&self) -> f64 {
        match self {
            EgoModel::Straight { speed, .. } | EgoModel::Turn { speed, .. } => *speed,
        }
    }

    pub fn pose_at(&self, t_s: f64) -> EgoPose {
        match *self {
            EgoModel::Straight { x0, y0, yaw, speed } => {
                let (sin, cos) = yaw.sin_cos();
                EgoPose::new(x0 + speed * t_s * cos, y0 + speed * t_s * sin, yaw, speed)
            }
            EgoModel::Turn {
                x0,
                y0,
                yaw0,
                speed,
                yaw_rate,
            } => {
                let r = speed / yaw_rate;
                let (cx, cy) = (x0 - r * yaw0.sin(), y0 + r * yaw0.cos());
                let yaw = yaw0 + yaw_rate * t_s;
                EgoPose::new(
                    cx + r * yaw.sin(),
                    cy - r * yaw.cos(),
                    wrap_angle(yaw),
                    speed,
                )
            }
        }
    }

    /// Unsigned distance from a ground point to the ego path centerline.
    pub fn path_distance(&self, p: [f64; 2]) -> f64 {
        self.path_signed_lateral(p).abs()
    }

    /// Signed lateral offset of a ground point from the ego path, positive
    /// to the left of travel.
    pub fn path_signed_lateral(&self, p: [f64; 2]) -> f64 {
        match *self {
            EgoModel::Straight { x0, y0, yaw, .. } => {
                let (sin, cos) = yaw.sin_cos();
                -(p[0] - x0) * sin + (p[1] - y0) * cos
            }
            EgoModel::Turn {
                x0,
                y0,
                yaw0,
                speed,
                yaw_rate,
            } => {
                let r = speed / yaw_rate;
                let (cx, cy) = (x0 - r * yaw0.sin(), y0 + r * yaw0.cos());
                let d = ((p[0] - cx).powi(2) + (p[1] - cy).powi(2)).sqrt();
                yaw_rate.signum() * (r.abs() - d)
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            EgoModel::Straight { speed, .. } => {
                if speed < 0.0 {
                    return Err(Error::invalid("ego speed must be >= 0"));
                }
            }
            EgoModel::Turn {
                speed, yaw_rate, ..
            } => {
                if speed < 0.0 {
                    return Err(Error::invalid("ego speed must be >= 0"));
                }
                if yaw_rate == 0.0 {
                    return Err(Error::invalid("turn yaw_rate must be nonzero"));
                }
            }
        }
        Ok(())
    }
}

/// Ground strip alongside the ego path (signed-lateral band) of tall grass
/// that hides the part of a deer silhouette below `mask_height` whenever
/// the deer stands inside the band.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Occluder {
    pub lat0: f64,
    pub lat1: f64,
    pub mask_height: f64,
}

impl Occluder {
    pub fn contains(&self, signed_lateral: f64) -> bool {
        signed_lateral >= self.lat0.min(self.lat1) && signed_lateral <= self.lat0.max(self.lat1)
    }
}

/// Full deterministic world description; (Scenario, seed) fixes every
/// output byte.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub name: String,
    pub deer: Vec<DeerMotionModel>,
    pub ego: EgoModel,
    pub camera: CameraIntrinsics,
    pub frame_rate: f64,
    pub duration: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub occluders: Vec<Occluder>,
    pub seed: u64,
}

impl Scenario {
    pub fn validate(&self) -> Result<()> {
        self.camera.validate()?;
        self.ego.validate()?;
        for d in &self.deer {
            d.validate()?;
        }
        if self.duration == 0 {
            return Err(Error::invalid("duration must be >= 1"));
        }
        if !(self.frame_rate > 0.0) {
            return Err(Error::invalid("frame_rate must be positive"));
        }
        Ok(())
    }

    pub fn time_of(&self, frame: usize) -> f64 {
        frame as f64 / self.frame_rate
    }

    pub fn ego_pose(&self, frame: usize) -> EgoPose {
        self.ego.pose_at(self.time_of(frame))
    }

    pub fn deer_position(&self, deer_idx: usize, frame: usize) -> [f64; 2] {
        self.deer[deer_idx].position_at_rate(self.time_of(frame), self.frame_rate)
    }
}

pub fn write_scenario(path: &Path, scenario: &Scenario) -> Result<()> {
    let text = serde_json::to_string_pretty(scenario).map_err(|e| Error::json(path, e))?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn read_scenario(path: &Path) -> Result<Scenario> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let scenario: Scenario = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
    scenario.validate()?;
    Ok(scenario)
}

/// Risk labeling rule: a deer is high risk at frame t iff, extrapolating
/// its current velocity, its distance to the ego path centerline drops
/// below [`RISK_DISTANCE_M`] at any point within [`RISK_HORIZON_S`].
pub const RISK_HORIZON_S: f64 = 2.0;
pub const RISK_DISTANCE_M: f64 = 8.0;

pub fn risk_at(scenario: &Scenario, deer_idx: usize, frame: usize) -> RiskLevel {
    let t = scenario.time_of(frame);
    let pos = scenario.deer_position(deer_idx, frame);
    let vel = scenario.deer[deer_idx].velocity_at(t, scenario.frame_rate);
    let steps = (RISK_HORIZON_S * scenario.frame_rate).ceil() as usize;
    for k in 0..=steps {
        let dt = k as f64 / scenario.frame_rate;
        let p = [pos[0] + vel[0] * dt, pos[1] + vel[1] * dt];
        if scenario.ego.path_distance(p) < RISK_DISTANCE_M {
            return RiskLevel::High;
        }
    }
    RiskLevel::Low
}

/// Corridor half-width used for scenario design and as the pipeline
/// default: roughly half a vehicle width plus margin.
pub const CORRIDOR_HALF_WIDTH_M: f64 = 1.5;

/// First frame at which the deer's ground position is within `half_width`
/// of the ego path centerline.
pub fn gt_corridor_entry_frame(
    scenario: &Scenario,
    deer_idx: usize,
    half_width: f64,
) -> Option<usize> {
    (0..scenario.duration)
        .find(|&t| scenario.ego.path_distance(scenario.deer_position(deer_idx, t)) <= half_width)
}

/// First frame at which the deer is inside the corridor while the ego
/// longitudinal gap crosses zero (ground-truth bumper reach).
pub fn gt_reach_frame(scenario: &Scenario, deer_idx: usize, half_width: f64) -> Option<usize> {
    let mut prev_gap = f64::INFINITY;
    for t in 0..scenario.duration {
        let pose = scenario.ego_pose(t);
        let p = scenario.deer_position(deer_idx, t);
        let (sin, cos) = pose.yaw.sin_cos();
        let gap = (p[0] - pose.x) * cos + (p[1] - pose.y) * sin;
        let lateral = scenario.ego.path_distance(p);
        if t > 0 && prev_gap > 0.0 && gap <= 0.0 && lateral <= half_width {
            return Some(t);
        }
        prev_gap = gap;
    }
    None
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SuiteName {
    Stationary,
    Crossing,
    Jump,
    OccludedJump,
    CurveEgo,
}

impl std::str::FromStr for SuiteName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "stationary" => Ok(SuiteName::Stationary),
            "crossing" => Ok(SuiteName::Crossing),
            "jump" => Ok(SuiteName::Jump),
            "occluded_jump" => Ok(SuiteName::OccludedJump),
            "curve_ego" => Ok(SuiteName::CurveEgo),
            other => Err(Error::invalid(format!(
                "unknown suite `{other}` (expected stationary|crossing|jump|occluded_jump|curve_ego)"
            ))),
        }
    }
}

impl std::fmt::Display for SuiteName {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            SuiteName::Stationary => "stationary",
            SuiteName::Crossing => "crossing",
            SuiteName::Jump => "jump",
            SuiteName::OccludedJump => "occluded_jump",
            SuiteName::CurveEgo => "curve_ego",
        };
        f.write_str(s)
    }
}

pub const DEFAULT_SUITE_DURATION: usize = 90;

pub fn make_suite(name: SuiteName, count: usize, seed: u64) -> Result<Vec<Scenario>> {
    make_suite_with(name, count, seed, None)
}

/// Suite generation with an explicit duration (frames). Scenarios are
/// rejection-sampled until the deer stays fully visible for the whole
/// duration, or, in scenarios that end in a corridor collision, until
/// shortly past the collision.
pub fn make_suite_with(
    name: SuiteName,
    count: usize,
    seed: u64,
    duration: Option<usize>,
) -> Result<Vec<Scenario>> {
    if count == 0 {
        return Err(Error::invalid("suite count must be >= 1"));
    }
    let duration = duration.unwrap_or(DEFAULT_SUITE_DURATION);
    let mut scenarios = Vec::with_capacity(count);
    for i in 0..count {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64 + 1);
        let mut accepted = None;
        for _attempt in 0..500 {
            let scenario = sample_scenario(name, i, duration, &mut rng);
            if scenario_usable(&scenario) {
                accepted = Some(scenario);
                break;
            }
        }
        let scenario = accepted.ok_or_else(|| {
            Error::consistency(format!(
                "suite {name} scenario {i}: no valid parameters found in 500 draws"
            ))
        })?;
        scenarios.push(scenario);
    }
    Ok(scenarios)
}

fn sample_scenario(name: SuiteName, index: usize, duration: usize, rng: &mut ChaCha8Rng) -> Scenario {
    let rate = 30.0;
    let t_total = duration as f64 / rate;
    let camera = CameraIntrinsics::default();
    let seed = rng.gen::<u64>();
    let body_width = rng.gen_range(0.9..1.3);
    let body_height = rng.gen_range(1.2..1.6);

    // World-frame start pose is randomized so nothing secretly assumes the
    // origin or axis-aligned headings.
    let x0 = rng.gen_range(-40.0..40.0);
    let y0 = rng.gen_range(-40.0..40.0);
    let yaw = rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI);
    let (sin, cos) = yaw.sin_cos();
    let fwd = [cos, sin];
    let left = [-sin, cos];
    let at = |forward: f64, lateral: f64| -> [f64; 2] {
        [
            x0 + forward * fwd[0] + lateral * left[0],
            y0 + forward * fwd[1] + lateral * left[1],
        ]
    };

    let mut occluders = Vec::new();
    let (ego, deer) = match name {
        SuiteName::Stationary => {
            let speed = rng.gen_range(6.0..14.0);
            let side = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            let lateral = side * rng.gen_range(2.5..12.0);
            let forward = speed * t_total + rng.gen_range(6.0..18.0);
            (
                EgoModel::Straight { x0, y0, yaw, speed },
                DeerMotionModel {
                    kind: DeerKind::Stationary,
                    initial_position: at(forward, lateral),
                    velocity: [0.0, 0.0],
                    jump: None,
                    body_width,
                    body_height,
                },
            )
        }
        SuiteName::Crossing => {
            let speed = rng.gen_range(8.0..16.0);
            let side = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            let lat0 = side * rng.gen_range(5.0..12.0);
            let t_cross = rng.gen_range(0.45 * t_total..0.8 * t_total);
            let v_lat = -lat0 / t_cross;
            let gap = rng.gen_range(4.0..26.0);
            let fwd0 = speed * t_cross + gap;
            let v_fwd = rng.gen_range(-1.0..1.0);
            (
                EgoModel::Straight { x0, y0, yaw, speed },
                DeerMotionModel {
                    kind: DeerKind::ConstantVelocity,
                    initial_position: at(fwd0, lat0),
                    velocity: [
                        v_fwd * fwd[0] + v_lat * left[0],
                        v_fwd * fwd[1] + v_lat * left[1],
                    ],
                    jump: None,
                    body_width,
                    body_height,
                },
            )
        }
        SuiteName::Jump | SuiteName::OccludedJump => {
            let speed = rng.gen_range(8.0..15.0);
            let side = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            let lat0 = side * rng.gen_range(5.5..10.0);
            let jump_frame =
                rng.gen_range((duration as f64 * 0.3) as usize..(duration as f64 * 0.85) as usize);
            // The jump is cued by ego proximity: it fires when the ego has
            // closed to `trigger` meters, which fixes jump_frame in closed
            // form for a constant-speed ego.
            let trigger = rng.gen_range(20.0..30.0);
            let fwd0 = speed * (jump_frame as f64 / rate) + trigger;
            let v_lat_j = -side * rng.gen_range(3.0..6.0);
            let v_fwd_j = rng.gen_range(-0.8..0.8);
            if name == SuiteName::OccludedJump {
                let width = rng.gen_range(1.8..3.2);
                occluders.push(Occluder {
                    lat0: lat0 - width / 2.0,
                    lat1: lat0 + width / 2.0,
                    mask_height: rng.gen_range(0.35..0.6),
                });
            }
            (
                EgoModel::Straight { x0, y0, yaw, speed },
                DeerMotionModel {
                    kind: DeerKind::Jump,
                    initial_position: at(fwd0, lat0),
                    velocity: [0.0, 0.0],
                    jump: Some(JumpSpec {
                        frame: jump_frame,
                        velocity: [
                            v_fwd_j * fwd[0] + v_lat_j * left[0],
                            v_fwd_j * fwd[1] + v_lat_j * left[1],
                        ],
                    }),
                    body_width,
                    body_height,
                },
            )
        }
        SuiteName::CurveEgo => {
            let speed = rng.gen_range(8.0..14.0);
            let radius = rng.gen_range(70.0..220.0);
            let side = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            let yaw_rate = side * speed / radius;
            let ego = EgoModel::Turn {
                x0,
                y0,
                yaw0: yaw,
                speed,
                yaw_rate,
            };
            let t_ahead = t_total * rng.gen_range(1.08..1.35);
            let base = ego.pose_at(t_ahead);
            let lat_side = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            let lateral = lat_side * rng.gen_range(2.5..9.0);
            let (bsin, bcos) = base.yaw.sin_cos();
            let position = [base.x - lateral * bsin, base.y + lateral * bcos];
            let (kind, velocity) = if rng.gen_bool(0.5) {
                (DeerKind::Stationary, [0.0, 0.0])
            } else {
                let dir = rng.gen_range(0.0..std::f64::consts::TAU);
                let mag = rng.gen_range(0.2..0.8);
                (
                    DeerKind::ConstantVelocity,
                    [mag * dir.cos(), mag * dir.sin()],
                )
            };
            (
                ego,
                DeerMotionModel {
                    kind,
                    initial_position: position,
                    velocity,
                    jump: None,
                    body_width,
                    body_height,
                },
            )
        }
    };

    Scenario {
        name: format!("{name}-{index:03}"),
        deer: vec![deer],
        ego,
        camera,
        frame_rate: rate,
        duration,
        occluders,
        seed,
    }
}

/// Camera-frame deer centroid and image-plane silhouette extents, shared
/// by validation, the renderer and oracle tests.
pub struct DeerProjection {
    pub z: f64,
    pub u_c: f64,
    pub v_c: f64,
    pub half_w: f64,
    pub half_h: f64,
}

pub fn project_deer(scenario: &Scenario, deer_idx: usize, frame: usize) -> Option<DeerProjection> {
    let deer = &scenario.deer[deer_idx];
    let pose = scenario.ego_pose(frame);
    let p = scenario.deer_position(deer_idx, frame);
    let centroid = [p[0], p[1], deer.body_height / 2.0];
    let cam = world_to_camera(&pose, scenario.camera.mount_height, centroid);
    if cam[2] <= 0.5 {
        return None;
    }
    let f = scenario.camera.focal();
    let (u_c, v_c) = scenario.camera.project(cam).ok()?;
    Some(DeerProjection {
        z: cam[2],
        u_c,
        v_c,
        half_w: f * deer.body_width / 2.0 / cam[2],
        half_h: f * deer.body_height / 2.0 / cam[2],
    })
}

fn fully_visible(scenario: &Scenario, deer_idx: usize, frame: usize) -> bool {
    let Some(p) = project_deer(scenario, deer_idx, frame) else {
        return false;
    };
    let (w, h) = (scenario.camera.width as f64, scenario.camera.height as f64);
    p.z >= 3.0
        && p.z <= 120.0
        && p.half_w <= 90.0
        && p.half_h >= 2.5
        && p.u_c - p.half_w >= 6.0
        && p.u_c + p.half_w <= w - 6.0
        && p.v_c - p.half_h >= 6.0
        && p.v_c + p.half_h <= h - 6.0
}

fn scenario_usable(scenario: &Scenario) -> bool {
    // Collision scenarios only need visibility up to shortly after the
    // ground-truth bumper-reach moment.
    let mut until = scenario.duration;
    if let Some(tc) = gt_reach_frame(scenario, 0, CORRIDOR_HALF_WIDTH_M) {
        until = until.min(tc + 10);
    }
    (0..until).all(|t| fully_visible(scenario, 0, t))
}
