//! Forecast scoring (displacement errors over box centers) and collision
//! risk: flat-ground calibration, time to collision, and the warning
//! decision.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::data::{BoundingBox, DatasetManifest, EgoPose, NormalizedBox};
use crate::error::{Error, Result};
use crate::model::net::{predict, ModelConfig, ModelParams, TrajectoryForecast};
use crate::model::windows::PreparedWindow;

/// Warn when the time to collision is at or below this many seconds.
pub const DEFAULT_TTC_THRESHOLD_S: f64 = 2.0;

pub fn centers(boxes: &[NormalizedBox]) -> Vec<[f64; 2]> {
    boxes.iter().map(|b| b.center()).collect()
}

fn check_pair(pred: &[[f64; 2]], gt: &[[f64; 2]]) -> Result<()> {
    if pred.is_empty() || pred.len() != gt.len() {
        return Err(Error::invalid(format!(
            "center sequences of length {} and {} (need equal, >= 1)",
            pred.len(),
            gt.len()
        )));
    }
    Ok(())
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

/// Mean Euclidean distance between predicted and ground-truth centers.
pub fn ade(pred: &[[f64; 2]], gt: &[[f64; 2]]) -> Result<f64> {
    check_pair(pred, gt)?;
    let sum: f64 = pred.iter().zip(gt).map(|(&p, &g)| dist(p, g)).sum();
    Ok(sum / pred.len() as f64)
}

/// Euclidean distance between the final predicted and ground-truth
/// centers.
pub fn fde(pred: &[[f64; 2]], gt: &[[f64; 2]]) -> Result<f64> {
    check_pair(pred, gt)?;
    Ok(dist(*pred.last().unwrap(), *gt.last().unwrap()))
}

/// Minimum ADE over samples, paired with the FDE of the ADE-minimizing
/// sample (ties go to the earliest sample).
pub fn best_sample_eval(samples: &[Vec<[f64; 2]>], gt: &[[f64; 2]]) -> Result<(f64, f64)> {
    if samples.is_empty() {
        return Err(Error::invalid("best_sample_eval needs at least one sample"));
    }
    let mut best: Option<(f64, usize)> = None;
    for (i, sample) in samples.iter().enumerate() {
        let a = ade(sample, gt)?;
        if best.map_or(true, |(b, _)| a < b) {
            best = Some((a, i));
        }
    }
    let (min_ade, idx) = best.unwrap();
    Ok((min_ade, fde(&samples[idx], gt)?))
}

/// Per-window scores: means over samples plus the best-of-S pair.
#[derive(Debug, Clone, PartialEq)]
pub struct ForecastScore {
    pub ade: f64,
    pub fde: f64,
    pub min_ade: f64,
    pub min_fde: f64,
}

pub fn score_forecast(
    forecast: &TrajectoryForecast,
    future: &[NormalizedBox],
) -> Result<ForecastScore> {
    let gt = centers(future);
    let samples: Vec<Vec<[f64; 2]>> = forecast.samples.iter().map(|s| centers(s)).collect();
    let mut ade_sum = 0.0;
    let mut fde_sum = 0.0;
    for s in &samples {
        ade_sum += ade(s, &gt)?;
        fde_sum += fde(s, &gt)?;
    }
    let n = samples.len() as f64;
    let (min_ade, min_fde) = best_sample_eval(&samples, &gt)?;
    Ok(ForecastScore {
        ade: ade_sum / n,
        fde: fde_sum / n,
        min_ade,
        min_fde,
    })
}

pub const EVAL_REPORT_HEADER: &str = "preset,horizon_s,ade,fde,min_ade,min_fde,n_windows";

/// One evaluation row: a (preset, horizon) pairing averaged over windows.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalRow {
    pub preset: String,
    pub horizon_s: f64,
    pub ade: f64,
    pub fde: f64,
    pub min_ade: f64,
    pub min_fde: f64,
    pub n_windows: usize,
}

pub fn write_eval_report(path: &Path, rows: &[EvalRow]) -> Result<()> {
    let mut text = String::from(EVAL_REPORT_HEADER);
    text.push('\n');
    for r in rows {
        text.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.preset, r.horizon_s, r.ade, r.fde, r.min_ade, r.min_fde, r.n_windows
        ));
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Scores a model over prepared windows: one fresh noise draw per window
/// from a stream seeded by `seed`, so evaluation is deterministic.
///
/// The horizon in seconds comes from `cfg.horizon`, which may differ from
/// the horizon the checkpoint was trained at: the decoder weights are
/// shared across time, so longer rollouts only need windows whose futures
/// cover them.
pub fn evaluate_windows(
    params: &ModelParams,
    cfg: &ModelConfig,
    windows: &[PreparedWindow],
    frame_rate: f64,
    seed: u64,
    preset_label: &str,
) -> Result<EvalRow> {
    if windows.is_empty() {
        return Err(Error::invalid("no windows to evaluate"));
    }
    if !(frame_rate > 0.0) {
        return Err(Error::invalid(format!("frame rate {frame_rate} must be positive")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sums = [0.0f64; 4];
    for w in windows {
        if w.future_boxes.len() != cfg.horizon {
            return Err(Error::invalid(format!(
                "window at t0 {} has a {}-step future, horizon is {}",
                w.window.t0,
                w.future_boxes.len(),
                cfg.horizon
            )));
        }
        let forecast = predict(params, cfg, w, &mut rng)?;
        let s = score_forecast(&forecast, &w.future_boxes)?;
        sums[0] += s.ade;
        sums[1] += s.fde;
        sums[2] += s.min_ade;
        sums[3] += s.min_fde;
    }
    let n = windows.len() as f64;
    Ok(EvalRow {
        preset: preset_label.to_string(),
        horizon_s: cfg.horizon as f64 / frame_rate,
        ade: sums[0] / n,
        fde: sums[1] / n,
        min_ade: sums[2] / n,
        min_fde: sums[3] / n,
        n_windows: windows.len(),
    })
}

/// Pinhole flat-ground calibration: level camera at `mount_height` meters
/// over the ground plane, principal point at the image center.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroundCalibration {
    pub focal_px: f64,
    pub cx: f64,
    pub cy: f64,
    pub mount_height: f64,
}

impl GroundCalibration {
    pub fn new(focal_px: f64, cx: f64, cy: f64, mount_height: f64) -> Result<Self> {
        if !(focal_px > 0.0 && mount_height > 0.0 && cx.is_finite() && cy.is_finite()) {
            return Err(Error::invalid(format!(
                "bad calibration: focal {focal_px}, mount height {mount_height}"
            )));
        }
        Ok(GroundCalibration {
            focal_px,
            cx,
            cy,
            mount_height,
        })
    }

    /// Builds calibration from dataset metadata. Without a recorded mount
    /// height the metric ground plane is unrecoverable, so TTC is
    /// unavailable rather than approximated.
    pub fn from_manifest(m: &DatasetManifest) -> Result<Self> {
        let mount = m.mount_height_m.ok_or_else(|| {
            Error::unsupported(
                "time to collision needs metric calibration; the manifest records no mount_height_m",
            )
        })?;
        let focal = m.image_width as f64 / (2.0 * (m.hfov_deg.to_radians() / 2.0).tan());
        GroundCalibration::new(
            focal,
            m.image_width as f64 / 2.0,
            m.image_height as f64 / 2.0,
            mount,
        )
    }

    /// Ground position under a box in the camera's body frame:
    /// `[forward, lateral]` meters, lateral positive to the left. Uses the
    /// box's bottom edge as the ground contact, so the box must not be
    /// occlusion-truncated.
    pub fn ground_from_box(&self, bbox: &BoundingBox) -> Result<[f64; 2]> {
        let dv = bbox.y1() - self.cy;
        if dv <= 0.0 {
            return Err(Error::invalid(format!(
                "box bottom at v {} is above the horizon row {}",
                bbox.y1(),
                self.cy
            )));
        }
        let forward = self.focal_px * self.mount_height / dv;
        let right = (bbox.cx - self.cx) * forward / self.focal_px;
        Ok([forward, -right])
    }
}

/// Time to collision against a deer forecast, both trajectories sampled
/// at `frame_rate` with index 0 being the current frame in a shared
/// ground frame. Returns the first future step at which the vehicle
/// reaches a deer that is inside its corridor: the longitudinal gap in
/// the ego frame of that step crosses from positive to non-positive while
/// the deer sits within `half_width` meters laterally. `None` when the
/// deer is never reached within the forecast.
pub fn ttc(
    ego: &[EgoPose],
    deer: &[[f64; 2]],
    half_width: f64,
    frame_rate: f64,
) -> Result<Option<f64>> {
    if ego.len() != deer.len() || ego.is_empty() {
        return Err(Error::invalid(format!(
            "ego and deer forecasts of length {} and {} (need equal, >= 1)",
            ego.len(),
            deer.len()
        )));
    }
    if !(half_width > 0.0) || !(frame_rate > 0.0) {
        return Err(Error::invalid(format!(
            "half width {half_width} and frame rate {frame_rate} must be positive"
        )));
    }
    let body = |pose: &EgoPose, p: [f64; 2]| -> (f64, f64) {
        let (dx, dy) = (p[0] - pose.x, p[1] - pose.y);
        let (sin, cos) = pose.yaw.sin_cos();
        (dx * cos + dy * sin, -dx * sin + dy * cos)
    };
    let mut prev_gap = body(&ego[0], deer[0]).0;
    for k in 1..ego.len() {
        let (gap, lateral) = body(&ego[k], deer[k]);
        if prev_gap > 0.0 && gap <= 0.0 && lateral.abs() <= half_width {
            return Ok(Some(k as f64 / frame_rate));
        }
        prev_gap = gap;
    }
    Ok(None)
}

/// Warning decision for one track at one anchor frame.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RiskDecision {
    pub track_id: String,
    pub t0: usize,
    pub ttc: Option<f64>,
    pub warn: bool,
}

/// Warn exactly when a TTC exists and is at or below the threshold.
pub fn decide(track_id: &str, t0: usize, ttc: Option<f64>, threshold: f64) -> RiskDecision {
    RiskDecision {
        track_id: track_id.to_string(),
        t0,
        ttc,
        warn: ttc.map_or(false, |t| t <= threshold),
    }
}
