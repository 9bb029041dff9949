//! Planar ego-motion forecasting: extrapolate the camera vehicle's future
//! per-frame pose deltas from past odometry. Deltas live in the body frame
//! of the pose they extend (x forward, y left), which makes them constant
//! along straight lines and circular arcs alike.

use std::path::{Path, PathBuf};

use crate::data::EgoPose;
use crate::error::{Error, Result};

/// One body-frame pose increment.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EgoDelta {
    pub dx: f64,
    pub dy: f64,
    pub dyaw: f64,
}

impl EgoDelta {
    pub const ZERO: EgoDelta = EgoDelta {
        dx: 0.0,
        dy: 0.0,
        dyaw: 0.0,
    };

    pub fn is_finite(&self) -> bool {
        self.dx.is_finite() && self.dy.is_finite() && self.dyaw.is_finite()
    }
}

/// Per-future-frame pose deltas over a fixed horizon.
#[derive(Debug, Clone, PartialEq)]
pub struct EgoMotionForecast {
    pub deltas: Vec<EgoDelta>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum EgoPredictorKind {
    ConstantVelocity,
    ConstantTurnRate,
    /// Forecast read from a CSV file, row 0 aligned to the first future frame.
    External(PathBuf),
}

/// Wraps an angle into (-pi, pi].
pub fn wrap_angle(a: f64) -> f64 {
    let mut a = a.rem_euclid(2.0 * std::f64::consts::PI);
    if a > std::f64::consts::PI {
        a -= 2.0 * std::f64::consts::PI;
    }
    a
}

/// Relative motion from `p` to `q`, expressed in `p`'s body frame.
pub fn body_step(p: &EgoPose, q: &EgoPose) -> EgoDelta {
    let dx_w = q.x - p.x;
    let dy_w = q.y - p.y;
    let (sin, cos) = p.yaw.sin_cos();
    EgoDelta {
        dx: dx_w * cos + dy_w * sin,
        dy: -dx_w * sin + dy_w * cos,
        dyaw: wrap_angle(q.yaw - p.yaw),
    }
}

/// Standard SE(2) composition: applies a body-frame delta to a pose. The
/// speed field carries over unchanged; deltas encode geometry only.
pub fn compose_pose(pose: &EgoPose, delta: &EgoDelta) -> EgoPose {
    let (sin, cos) = pose.yaw.sin_cos();
    EgoPose {
        x: pose.x + delta.dx * cos - delta.dy * sin,
        y: pose.y + delta.dx * sin + delta.dy * cos,
        yaw: wrap_angle(pose.yaw + delta.dyaw),
        speed: pose.speed,
    }
}

/// Composition of two body-frame deltas into one.
pub fn compose_delta(a: &EgoDelta, b: &EgoDelta) -> EgoDelta {
    let (sin, cos) = a.dyaw.sin_cos();
    EgoDelta {
        dx: a.dx + b.dx * cos - b.dy * sin,
        dy: a.dy + b.dx * sin + b.dy * cos,
        dyaw: wrap_angle(a.dyaw + b.dyaw),
    }
}

/// Rolls a forecast out from a starting pose, returning the H future poses.
pub fn rollout(start: &EgoPose, forecast: &EgoMotionForecast) -> Vec<EgoPose> {
    let mut poses = Vec::with_capacity(forecast.deltas.len());
    let mut pose = *start;
    for delta in &forecast.deltas {
        pose = compose_pose(&pose, delta);
        poses.push(pose);
    }
    poses
}

pub fn predict_future(
    history: &[EgoPose],
    horizon: usize,
    kind: &EgoPredictorKind,
) -> Result<EgoMotionForecast> {
    for pose in history {
        if !pose.is_finite() {
            return Err(Error::invalid(format!("non-finite pose in history: {pose:?}")));
        }
    }
    let step = match kind {
        EgoPredictorKind::ConstantVelocity => {
            let n = history.len();
            if n < 2 {
                return Err(Error::invalid(format!(
                    "constant_velocity needs >= 2 poses, got {n}"
                )));
            }
            let mut step = body_step(&history[n - 2], &history[n - 1]);
            step.dyaw = 0.0;
            step
        }
        EgoPredictorKind::ConstantTurnRate => {
            let n = history.len();
            if n < 3 {
                return Err(Error::invalid(format!(
                    "constant_turn_rate needs >= 3 poses, got {n}"
                )));
            }
            let a = body_step(&history[n - 3], &history[n - 2]);
            let b = body_step(&history[n - 2], &history[n - 1]);
            EgoDelta {
                dx: (a.dx + b.dx) / 2.0,
                dy: (a.dy + b.dy) / 2.0,
                dyaw: wrap_angle((a.dyaw + b.dyaw) / 2.0),
            }
        }
        EgoPredictorKind::External(path) => {
            return read_external_forecast(path, horizon);
        }
    };
    Ok(EgoMotionForecast {
        deltas: vec![step; horizon],
    })
}

/// Decoder conditioning features: per-step (dx/1 m, dy/0.5 m, dyaw/0.05 rad),
/// each clipped to [-4, 4].
pub fn normalize_forecast(forecast: &EgoMotionForecast) -> Vec<[f64; 3]> {
    forecast
        .deltas
        .iter()
        .map(|d| {
            [
                (d.dx / 1.0).clamp(-4.0, 4.0),
                (d.dy / 0.5).clamp(-4.0, 4.0),
                (d.dyaw / 0.05).clamp(-4.0, 4.0),
            ]
        })
        .collect()
}

pub const EXTERNAL_FORECAST_HEADER: &str = "frame_index,dx_m,dy_m,dyaw_rad";

pub fn read_external_forecast(path: &Path, horizon: usize) -> Result<EgoMotionForecast> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, header)) if header.trim() == EXTERNAL_FORECAST_HEADER => {}
        Some((_, header)) => {
            return Err(Error::format(format!(
                "{}: line 1: expected header `{EXTERNAL_FORECAST_HEADER}`, got `{header}`",
                path.display()
            )))
        }
        None => return Err(Error::format(format!("{}: empty file", path.display()))),
    }
    let mut deltas = Vec::new();
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let lineno = i + 1;
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 4 {
            return Err(Error::format(format!(
                "{}: line {lineno}: expected 4 fields, got {}",
                path.display(),
                fields.len()
            )));
        }
        let idx: usize = fields[0].trim().parse().map_err(|_| {
            Error::format(format!(
                "{}: line {lineno}: unparsable frame_index",
                path.display()
            ))
        })?;
        if idx != deltas.len() {
            return Err(Error::format(format!(
                "{}: line {lineno}: expected frame_index {}, got {idx}",
                path.display(),
                deltas.len()
            )));
        }
        let mut vals = [0.0f64; 3];
        for (k, field) in fields[1..].iter().enumerate() {
            vals[k] = field.trim().parse().map_err(|_| {
                Error::format(format!(
                    "{}: line {lineno}: unparsable value `{field}`",
                    path.display()
                ))
            })?;
        }
        deltas.push(EgoDelta {
            dx: vals[0],
            dy: vals[1],
            dyaw: vals[2],
        });
    }
    if deltas.len() < horizon {
        return Err(Error::consistency(format!(
            "{}: forecast has {} rows, horizon needs {horizon}",
            path.display(),
            deltas.len()
        )));
    }
    deltas.truncate(horizon);
    Ok(EgoMotionForecast { deltas })
}

pub fn write_external_forecast(path: &Path, forecast: &EgoMotionForecast) -> Result<()> {
    let mut text = String::from(EXTERNAL_FORECAST_HEADER);
    text.push('\n');
    for (i, d) in forecast.deltas.iter().enumerate() {
        text.push_str(&format!("{},{},{},{}\n", i, d.dx, d.dy, d.dyaw));
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}
