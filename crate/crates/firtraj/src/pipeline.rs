//! Frame-order orchestration over one rendered sequence: detect, associate
//! into tracks, forecast eligible tracks, and turn each forecast into a
//! collision decision, emitting everything as a JSON-lines event stream.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::data::{
    denormalize_box, load_gray_png, normalize_box, BoundingBox, DatasetDir, EgoPose, Image,
    NormalizedBox, RiskLevel,
};
use crate::egomotion::{
    compose_pose, normalize_forecast, predict_future, EgoDelta, EgoMotionForecast,
    EgoPredictorKind,
};
use crate::error::{Error, Result};
use crate::flow::{roi_pool, FlowSource, PooledFlow};
use crate::metrics::{decide, ttc, GroundCalibration, DEFAULT_TTC_THRESHOLD_S};
use crate::model::net::{group_shapes, predict, ObservationWindow};
use crate::model::windows::FlowIterator;
use crate::model::{ModelConfig, ModelParams, PreparedWindow};
use crate::perception::{detect, iou, Detector, DEFAULT_RISK_THRESHOLD};
use crate::synth::CORRIDOR_HALF_WIDTH_M;

pub const DEFAULT_ASSOCIATION_IOU: f64 = 0.3;
pub const DEFAULT_MAX_MISSES: usize = 5;

/// One tracked animal. `boxes` holds the observed (frame, box) pairs with
/// strictly increasing frame indices; `risk_history` is aligned with it.
#[derive(Debug, Clone)]
pub struct Track {
    pub track_id: String,
    pub boxes: Vec<(usize, BoundingBox)>,
    pub risk_history: Vec<RiskLevel>,
    /// Frames elapsed since the last matched detection.
    pub misses: usize,
    /// Pooled flow per frame pair, keyed by the pair's earlier frame.
    pooled: BTreeMap<usize, PooledFlow>,
    last_forecast_frame: Option<usize>,
}

impl Track {
    fn new(track_id: String, frame: usize, bbox: BoundingBox, risk: RiskLevel) -> Self {
        Track {
            track_id,
            boxes: vec![(frame, bbox)],
            risk_history: vec![risk],
            misses: 0,
            pooled: BTreeMap::new(),
            last_forecast_frame: None,
        }
    }

    /// Number of observed frames.
    pub fn age(&self) -> usize {
        self.boxes.len()
    }

    pub fn latest(&self) -> (usize, &BoundingBox) {
        let (frame, bbox) = self.boxes.last().expect("tracks are never empty");
        (*frame, bbox)
    }

    fn observe(&mut self, frame: usize, bbox: BoundingBox, risk: RiskLevel) {
        debug_assert!(self.latest().0 < frame);
        self.boxes.push((frame, bbox));
        self.risk_history.push(risk);
        self.misses = 0;
    }

    /// True when the last `tau` observations are `tau` consecutive frames
    /// ending at `frame`. Windows are only built over gap-free history.
    fn consecutive_tail(&self, frame: usize, tau: usize) -> bool {
        if self.boxes.len() < tau || self.latest().0 != frame {
            return false;
        }
        let tail = &self.boxes[self.boxes.len() - tau..];
        tail.iter()
            .enumerate()
            .all(|(i, (f, _))| *f == frame + 1 - tau + i)
    }
}

/// Runtime knobs of the tracking loop. Detector choice and checkpoint path
/// live at the CLI layer, which resolves them into the `run` arguments.
#[derive(Debug, Clone)]
pub struct PipelineConfig {
    pub ego: EgoPredictorKind,
    pub flow_source: FlowSource,
    pub ttc_threshold_s: f64,
    pub association_iou: f64,
    pub max_misses: usize,
    /// Frames between repeated forecasts of one track; 1 re-predicts every
    /// frame.
    pub predict_stride: usize,
    pub risk_threshold: f64,
    pub corridor_half_width_m: f64,
    /// Seed of the decoder noise stream.
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            ego: EgoPredictorKind::ConstantVelocity,
            flow_source: FlowSource::GroundTruth,
            ttc_threshold_s: DEFAULT_TTC_THRESHOLD_S,
            association_iou: DEFAULT_ASSOCIATION_IOU,
            max_misses: DEFAULT_MAX_MISSES,
            predict_stride: 1,
            risk_threshold: DEFAULT_RISK_THRESHOLD,
            corridor_half_width_m: CORRIDOR_HALF_WIDTH_M,
            seed: 0,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.ttc_threshold_s > 0.0 && self.ttc_threshold_s.is_finite()) {
            return Err(Error::config("ttc threshold must be positive and finite"));
        }
        if !(self.association_iou > 0.0 && self.association_iou <= 1.0) {
            return Err(Error::config("association iou must be in (0, 1]"));
        }
        if self.predict_stride == 0 {
            return Err(Error::config("predict stride must be >= 1"));
        }
        if !(self.risk_threshold >= 0.0 && self.risk_threshold <= 1.0) {
            return Err(Error::config("risk threshold must be in [0, 1]"));
        }
        if !(self.corridor_half_width_m > 0.0 && self.corridor_half_width_m.is_finite()) {
            return Err(Error::config("corridor half width must be positive"));
        }
        Ok(())
    }
}

/// Outcome of matching one frame's detections against the live tracks.
/// Indices refer to the input slices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Association {
    pub matches: Vec<(usize, usize)>,
    pub unmatched_tracks: Vec<usize>,
    pub unmatched_detections: Vec<usize>,
}

/// Greedy one-to-one matching by descending IoU; pairs below the threshold
/// never match. Ties break toward lower track then detection index.
pub fn associate(
    tracks: &[BoundingBox],
    detections: &[BoundingBox],
    iou_threshold: f64,
) -> Association {
    let mut pairs = Vec::new();
    for (ti, tb) in tracks.iter().enumerate() {
        for (di, db) in detections.iter().enumerate() {
            let overlap = iou(tb, db);
            if overlap >= iou_threshold {
                pairs.push((overlap, ti, di));
            }
        }
    }
    pairs.sort_by(|a, b| {
        b.0.partial_cmp(&a.0)
            .expect("iou is finite")
            .then(a.1.cmp(&b.1))
            .then(a.2.cmp(&b.2))
    });
    let mut track_used = vec![false; tracks.len()];
    let mut det_used = vec![false; detections.len()];
    let mut matches = Vec::new();
    for (_, ti, di) in pairs {
        if !track_used[ti] && !det_used[di] {
            track_used[ti] = true;
            det_used[di] = true;
            matches.push((ti, di));
        }
    }
    Association {
        matches,
        unmatched_tracks: (0..tracks.len()).filter(|&i| !track_used[i]).collect(),
        unmatched_detections: (0..detections.len()).filter(|&i| !det_used[i]).collect(),
    }
}

/// One line of the event stream. Everything the loop does is replayable
/// from these: raw detections, track updates, forecast samples, decisions.
#[derive(Debug, Clone, Serialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum PipelineEvent {
    Detection {
        frame: usize,
        sequence_id: String,
        bbox: BoundingBox,
        confidence: f64,
        risk_score: f64,
        risk: RiskLevel,
    },
    #[serde(rename = "track")]
    TrackUpdate {
        frame: usize,
        sequence_id: String,
        track_id: String,
        bbox: BoundingBox,
        age: usize,
        misses: usize,
        risk: RiskLevel,
    },
    Forecast {
        frame: usize,
        sequence_id: String,
        track_id: String,
        samples: Vec<Vec<NormalizedBox>>,
    },
    Decision {
        frame: usize,
        sequence_id: String,
        track_id: String,
        t0: usize,
        ttc: Option<f64>,
        warn: bool,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct RunSummary {
    pub frames: usize,
    pub detections: usize,
    pub tracks_opened: usize,
    pub forecasts: usize,
    pub decisions: usize,
    pub warnings: usize,
}

fn emit(out: &mut dyn Write, event: &PipelineEvent) -> Result<()> {
    let line = serde_json::to_string(event)
        .map_err(|e| Error::format(format!("event does not serialize: {e}")))?;
    out.write_all(line.as_bytes())
        .and_then(|_| out.write_all(b"\n"))
        .map_err(|e| Error::io("<event stream>", e))
}

/// Per-axis constant-velocity fit (least squares over the step index) of
/// a ground track. Extending with the last single-step difference instead
/// would amplify the pixel quantization of box bottom edges into meters
/// of drift over the extension.
fn fit_velocity(pts: &[[f64; 2]]) -> [f64; 2] {
    if pts.len() < 2 {
        return [0.0, 0.0];
    }
    let mean_t = (pts.len() as f64 - 1.0) / 2.0;
    let mut stt = 0.0;
    let mut stp = [0.0, 0.0];
    for (k, p) in pts.iter().enumerate() {
        let dt = k as f64 - mean_t;
        stt += dt * dt;
        stp[0] += dt * p[0];
        stp[1] += dt * p[1];
    }
    [stp[0] / stt, stp[1] / stt]
}

/// Minimum TTC over the forecast samples of one track: each sample's boxes
/// are inverted to ground positions in the predicted future camera frames,
/// extended at the fitted constant ground velocity to cover `n_steps`, and
/// scanned for the first corridor crossing. Samples whose boxes leave the
/// ground (bottom edge above the horizon) fall back to the fitted motion
/// from the last valid step.
#[allow(clippy::too_many_arguments)]
fn forecast_ttc(
    calib: &GroundCalibration,
    current_box: &BoundingBox,
    samples: &[Vec<NormalizedBox>],
    start: &EgoPose,
    ego: &EgoMotionForecast,
    image_dims: (f64, f64),
    n_steps: usize,
    half_width: f64,
    frame_rate: f64,
) -> Result<Option<f64>> {
    let ground_at = |pose: &EgoPose, offset: [f64; 2]| -> [f64; 2] {
        let placed = compose_pose(
            pose,
            &EgoDelta {
                dx: offset[0],
                dy: offset[1],
                dyaw: 0.0,
            },
        );
        [placed.x, placed.y]
    };

    let mut poses = Vec::with_capacity(n_steps + 1);
    poses.push(*start);
    for delta in ego.deltas.iter().take(n_steps) {
        poses.push(compose_pose(poses.last().expect("nonempty"), delta));
    }
    let last_delta = *ego.deltas.last().unwrap_or(&EgoDelta::ZERO);
    while poses.len() < n_steps + 1 {
        poses.push(compose_pose(poses.last().expect("nonempty"), &last_delta));
    }

    let Ok(current_offset) = calib.ground_from_box(current_box) else {
        return Ok(None);
    };
    let current = ground_at(start, current_offset);

    let mut best: Option<f64> = None;
    for sample in samples {
        let mut pts = Vec::with_capacity(n_steps + 1);
        pts.push(current);
        for (k, nbox) in sample.iter().take(n_steps).enumerate() {
            let bbox = denormalize_box(nbox, image_dims.0, image_dims.1)?;
            match calib.ground_from_box(&bbox) {
                Ok(offset) => pts.push(ground_at(&poses[k + 1], offset)),
                Err(_) => break,
            }
        }
        let velocity = fit_velocity(&pts);
        while pts.len() < n_steps + 1 {
            let last = *pts.last().expect("nonempty");
            pts.push([last[0] + velocity[0], last[1] + velocity[1]]);
        }
        if let Some(t) = ttc(&poses, &pts, half_width, frame_rate)? {
            best = Some(best.map_or(t, |b: f64| b.min(t)));
        }
    }
    Ok(best)
}

/// Runs the full tracking loop over one sequence, writing events in frame
/// order. Configuration and checkpoint consistency are checked before any
/// frame is touched; identical inputs and seed replay identical bytes.
pub fn run(
    data: &DatasetDir,
    detector: &Detector,
    cfg: &ModelConfig,
    params: &ModelParams,
    pc: &PipelineConfig,
    out: &mut dyn Write,
) -> Result<RunSummary> {
    cfg.validate()?;
    pc.validate()?;
    let expected = group_shapes(cfg)?;
    let actual: Vec<(String, Vec<usize>)> = params
        .groups
        .iter()
        .map(|g| (g.name.clone(), g.shape.clone()))
        .collect();
    if actual != expected {
        return Err(Error::config(
            "checkpoint parameters do not match the model configuration",
        ));
    }

    let n = data.sequence.records.len();
    if data.sequence.odometry.len() != n {
        return Err(Error::consistency(format!(
            "{} odometry rows for {} frames",
            data.sequence.odometry.len(),
            n
        )));
    }
    let needs_images =
        matches!(detector, Detector::Heatmap(_)) || cfg.streams.use_context;
    if needs_images && data.sequence.frame_paths.len() != n {
        return Err(Error::consistency(format!(
            "{} frame images for {} records",
            data.sequence.frame_paths.len(),
            n
        )));
    }
    let calib = GroundCalibration::from_manifest(&data.manifest)?;
    let (iw, ih) = (
        data.manifest.image_width as f64,
        data.manifest.image_height as f64,
    );
    let frame_rate = data.manifest.frame_rate_hz;
    let sequence_id = data.manifest.set_id.clone();
    let ttc_steps = ((pc.ttc_threshold_s + 1.0) * frame_rate).ceil() as usize;
    let n_steps = cfg.horizon.max(ttc_steps);

    let mut rng = ChaCha8Rng::seed_from_u64(pc.seed);
    let mut flows = FlowIterator::new(data, pc.flow_source);
    let blank = Image {
        width: 1,
        height: 1,
        data: vec![0.0],
    };
    let mut context: Vec<Vec<f32>> = Vec::new();
    let mut tracks: Vec<Track> = Vec::new();
    let mut next_track = 1usize;
    let mut summary = RunSummary::default();

    for t in 0..n {
        let record = &data.sequence.records[t];
        if record.frame_index != t {
            return Err(Error::consistency(format!(
                "record {} carries frame index {}",
                t, record.frame_index
            )));
        }
        let image = if needs_images {
            load_gray_png(&data.sequence.frame_paths[t])?
        } else {
            blank.clone()
        };
        let detections = detect(detector, &image, Some(record), pc.risk_threshold)?;
        for d in &detections {
            emit(
                out,
                &PipelineEvent::Detection {
                    frame: t,
                    sequence_id: sequence_id.clone(),
                    bbox: d.bbox,
                    confidence: d.confidence,
                    risk_score: d.risk_score,
                    risk: d.risk,
                },
            )?;
        }
        summary.detections += detections.len();

        if cfg.streams.use_context {
            context.push(image.downsample(cfg.context_width, cfg.context_height).data);
            if context.len() > cfg.tau {
                context.remove(0);
            }
        }

        let track_boxes: Vec<BoundingBox> = tracks.iter().map(|tr| *tr.latest().1).collect();
        let det_boxes: Vec<BoundingBox> = detections.iter().map(|d| d.bbox).collect();
        let assoc = associate(&track_boxes, &det_boxes, pc.association_iou);

        // Pool the (t-1, t) flow on the pre-update boxes of tracks that
        // were observed at t-1, before those boxes are replaced below.
        if cfg.streams.use_motion && t > 0 {
            let continuing: Vec<usize> = assoc
                .matches
                .iter()
                .map(|&(ti, _)| ti)
                .filter(|&ti| tracks[ti].latest().0 == t - 1)
                .collect();
            if !continuing.is_empty() {
                let field = flows.pair(t - 1)?;
                for ti in continuing {
                    let cell = roi_pool(&field, tracks[ti].latest().1, cfg.roi_grid)?;
                    tracks[ti].pooled.insert(t - 1, cell);
                }
            }
        }

        for &(ti, di) in &assoc.matches {
            let d = &detections[di];
            tracks[ti].observe(t, d.bbox, d.risk);
        }
        for &ti in &assoc.unmatched_tracks {
            tracks[ti].misses += 1;
        }
        for &di in &assoc.unmatched_detections {
            let d = &detections[di];
            let id = format!("track-{next_track:04}");
            next_track += 1;
            tracks.push(Track::new(id, t, d.bbox, d.risk));
            summary.tracks_opened += 1;
        }
        tracks.retain(|tr| tr.misses <= pc.max_misses);

        for tr in &tracks {
            if tr.latest().0 != t {
                continue;
            }
            emit(
                out,
                &PipelineEvent::TrackUpdate {
                    frame: t,
                    sequence_id: sequence_id.clone(),
                    track_id: tr.track_id.clone(),
                    bbox: *tr.latest().1,
                    age: tr.age(),
                    misses: tr.misses,
                    risk: *tr.risk_history.last().expect("aligned with boxes"),
                },
            )?;
        }

        for tr in &mut tracks {
            let eligible = tr.consecutive_tail(t, cfg.tau)
                && *tr.risk_history.last().expect("aligned with boxes") == RiskLevel::High
                && tr
                    .last_forecast_frame
                    .map_or(true, |f| t - f >= pc.predict_stride);
            if !eligible {
                continue;
            }
            let first = t + 1 - cfg.tau;
            let past_boxes: Vec<NormalizedBox> = tr.boxes[tr.boxes.len() - cfg.tau..]
                .iter()
                .map(|(_, b)| normalize_box(b, iw, ih))
                .collect::<Result<_>>()?;
            let pooled_flow: Vec<PooledFlow> = if cfg.streams.use_motion {
                (first..t)
                    .map(|pair| {
                        tr.pooled.get(&pair).cloned().ok_or_else(|| {
                            Error::consistency(format!(
                                "track {} lacks pooled flow for pair {}",
                                tr.track_id, pair
                            ))
                        })
                    })
                    .collect::<Result<_>>()?
            } else {
                Vec::new()
            };
            let ctx = if cfg.streams.use_context {
                debug_assert_eq!(context.len(), cfg.tau);
                context.clone()
            } else {
                Vec::new()
            };
            let ego_history = data.sequence.odometry[first..=t].to_vec();
            let ego_forecast = predict_future(&ego_history, cfg.horizon, &pc.ego)?;
            let prepared = PreparedWindow {
                window: ObservationWindow {
                    past_boxes,
                    pooled_flow,
                    context: ctx,
                    ego_history,
                    t0: t,
                },
                ego_features: normalize_forecast(&ego_forecast),
                future_boxes: Vec::new(),
                sequence_id: sequence_id.clone(),
                track_id: tr.track_id.clone(),
            };
            let forecast = predict(params, cfg, &prepared, &mut rng)?;
            emit(
                out,
                &PipelineEvent::Forecast {
                    frame: t,
                    sequence_id: sequence_id.clone(),
                    track_id: tr.track_id.clone(),
                    samples: forecast.samples.clone(),
                },
            )?;
            summary.forecasts += 1;
            tr.last_forecast_frame = Some(t);

            let ttc_s = forecast_ttc(
                &calib,
                tr.latest().1,
                &forecast.samples,
                &data.sequence.odometry[t],
                &ego_forecast,
                (iw, ih),
                n_steps,
                pc.corridor_half_width_m,
                frame_rate,
            )?;
            let decision = decide(&tr.track_id, t, ttc_s, pc.ttc_threshold_s);
            emit(
                out,
                &PipelineEvent::Decision {
                    frame: t,
                    sequence_id: sequence_id.clone(),
                    track_id: decision.track_id,
                    t0: decision.t0,
                    ttc: decision.ttc,
                    warn: decision.warn,
                },
            )?;
            summary.decisions += 1;
            if decision.warn {
                summary.warnings += 1;
            }
        }
        summary.frames += 1;
    }
    Ok(summary)
}

/// `run` into a freshly created file.
pub fn run_to_file(
    data: &DatasetDir,
    detector: &Detector,
    cfg: &ModelConfig,
    params: &ModelParams,
    pc: &PipelineConfig,
    path: &Path,
) -> Result<RunSummary> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut writer = std::io::BufWriter::new(file);
    let summary = run(data, detector, cfg, params, pc, &mut writer)?;
    writer.flush().map_err(|e| Error::io(path, e))?;
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::load_dataset_dir;
    use crate::model::net::init_params;
    use crate::model::{Precision, Preset, StreamSet};
    use crate::synth::render::{generate, render_frame};
    use crate::synth::{
        gt_reach_frame, CameraIntrinsics, DeerKind, DeerMotionModel, EgoModel, Occluder, Scenario,
    };
    use rand::Rng;

    fn unit_box(cx: f64, cy: f64) -> BoundingBox {
        BoundingBox {
            cx,
            cy,
            w: 1.0,
            h: 1.0,
        }
    }

    fn tiny_config(preset: Preset) -> ModelConfig {
        ModelConfig {
            tau: 8,
            horizon: 4,
            samples: 3,
            best_of: 1,
            noise_dim: 4,
            traj_hidden: 8,
            convlstm_channels: 3,
            convlstm_kernel: 3,
            fusion_widths: vec![10, 8],
            decoder_hidden: 8,
            context_width: 16,
            context_height: 12,
            roi_grid: 2,
            streams: preset.streams(),
            precision: Precision::F32,
        }
    }

    fn straight_scenario(
        name: &str,
        deer: DeerMotionModel,
        speed: f64,
        duration: usize,
        occluders: Vec<Occluder>,
    ) -> Scenario {
        Scenario {
            name: name.to_string(),
            deer: vec![deer],
            ego: EgoModel::Straight {
                x0: 0.0,
                y0: 0.0,
                yaw: 0.0,
                speed,
            },
            camera: CameraIntrinsics::default(),
            frame_rate: 30.0,
            duration,
            occluders,
            seed: 7,
        }
    }

    fn standing_deer(forward: f64, lateral: f64) -> DeerMotionModel {
        DeerMotionModel {
            kind: DeerKind::Stationary,
            initial_position: [forward, lateral],
            velocity: [0.0, 0.0],
            jump: None,
            body_width: 1.1,
            body_height: 1.4,
        }
    }

    fn run_bytes(
        data: &DatasetDir,
        cfg: &ModelConfig,
        params: &ModelParams,
        pc: &PipelineConfig,
    ) -> (RunSummary, Vec<u8>) {
        let mut buf = Vec::new();
        let summary = run(data, &Detector::Oracle, cfg, params, pc, &mut buf).unwrap();
        (summary, buf)
    }

    fn events(bytes: &[u8]) -> Vec<serde_json::Value> {
        std::str::from_utf8(bytes)
            .unwrap()
            .lines()
            .map(|l| serde_json::from_str(l).unwrap())
            .collect()
    }

    #[test]
    fn greedy_association_prefers_the_highest_overlap() {
        // Unit squares: iou of two boxes offset by dx is (1-dx)/(1+dx), so
        // dx = 0.25 gives 0.6 and dx = 3/17 gives 0.7. The cross overlaps
        // are pushed below threshold by vertical separation. Greedy takes
        // (t2, d2) at 0.7 first, then (t1, d1) at 0.6.
        let tracks = [unit_box(0.0, 0.0), unit_box(0.0, 3.0)];
        let detections = [unit_box(0.25, 0.0), unit_box(3.0 / 17.0, 3.0)];
        let a = associate(&tracks, &detections, DEFAULT_ASSOCIATION_IOU);
        assert_eq!(a.matches, vec![(1, 1), (0, 0)]);
        assert!(a.unmatched_tracks.is_empty());
        assert!(a.unmatched_detections.is_empty());

        let single = associate(
            &[unit_box(0.0, 0.0)],
            &[unit_box(1.0 / 9.0, 0.0)],
            DEFAULT_ASSOCIATION_IOU,
        );
        assert_eq!(single.matches, vec![(0, 0)]);

        let disjoint = associate(&[unit_box(0.0, 0.0)], &[unit_box(5.0, 5.0)], 0.3);
        assert!(disjoint.matches.is_empty());
        assert_eq!(disjoint.unmatched_tracks, vec![0]);
        assert_eq!(disjoint.unmatched_detections, vec![0]);
    }

    #[test]
    fn association_is_injective_both_ways() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for _ in 0..200 {
            let nt = rng.gen_range(0..6);
            let nd = rng.gen_range(0..6);
            let boxes = |rng: &mut ChaCha8Rng, n: usize| -> Vec<BoundingBox> {
                (0..n)
                    .map(|_| BoundingBox {
                        cx: rng.gen_range(0.0..4.0),
                        cy: rng.gen_range(0.0..4.0),
                        w: rng.gen_range(0.5..2.0),
                        h: rng.gen_range(0.5..2.0),
                    })
                    .collect()
            };
            let tracks = boxes(&mut rng, nt);
            let dets = boxes(&mut rng, nd);
            let a = associate(&tracks, &dets, 0.2);
            let mut t_seen = std::collections::HashSet::new();
            let mut d_seen = std::collections::HashSet::new();
            for &(ti, di) in &a.matches {
                assert!(t_seen.insert(ti), "track {ti} matched twice");
                assert!(d_seen.insert(di), "detection {di} matched twice");
                assert!(iou(&tracks[ti], &dets[di]) >= 0.2);
            }
            assert_eq!(a.matches.len() + a.unmatched_tracks.len(), nt);
            assert_eq!(a.matches.len() + a.unmatched_detections.len(), nd);
        }
    }

    #[test]
    fn low_risk_deer_never_triggers_forecasts() {
        let dir = tempfile::tempdir().unwrap();
        // A deer standing 12 m off the path stays below the risk distance
        // for the whole approach.
        let scenario = straight_scenario("far-deer", standing_deer(55.0, 12.0), 10.0, 30, vec![]);
        generate(&scenario, dir.path(), false).unwrap();
        let data = load_dataset_dir(dir.path()).unwrap();
        let cfg = tiny_config(Preset::Baseline);
        let params = init_params(&cfg, 1).unwrap();
        let (summary, bytes) = run_bytes(&data, &cfg, &params, &PipelineConfig::default());
        assert_eq!(summary.forecasts, 0);
        assert_eq!(summary.decisions, 0);
        assert_eq!(summary.warnings, 0);
        assert!(summary.detections > 0);
        for event in events(&bytes) {
            let kind = event["type"].as_str().unwrap();
            assert!(kind == "detection" || kind == "track", "unexpected {kind}");
            assert_eq!(event["risk"].as_str().unwrap(), "low");
        }
    }

    #[test]
    fn single_deer_yields_one_track_and_cold_start_holds() {
        let dir = tempfile::tempdir().unwrap();
        let scenario = straight_scenario("near-deer", standing_deer(60.0, 2.0), 10.0, 30, vec![]);
        generate(&scenario, dir.path(), false).unwrap();
        let data = load_dataset_dir(dir.path()).unwrap();
        let cfg = tiny_config(Preset::Baseline);
        let params = init_params(&cfg, 1).unwrap();
        let (summary, bytes) = run_bytes(&data, &cfg, &params, &PipelineConfig::default());

        let events = events(&bytes);
        let ids: std::collections::HashSet<&str> = events
            .iter()
            .filter(|e| e["type"] == "track")
            .map(|e| e["track_id"].as_str().unwrap())
            .collect();
        assert_eq!(ids.len(), 1);
        assert!(ids.contains("track-0001"));

        let forecast_frames: Vec<usize> = events
            .iter()
            .filter(|e| e["type"] == "forecast")
            .map(|e| e["frame"].as_u64().unwrap() as usize)
            .collect();
        // First forecast exactly when tau = 8 observations exist, then one
        // per frame; a matching decision follows each forecast.
        assert_eq!(forecast_frames, (7..30).collect::<Vec<_>>());
        assert_eq!(summary.forecasts, 23);
        assert_eq!(summary.decisions, 23);
        for e in &events {
            if e["type"] == "forecast" {
                assert_eq!(e["samples"].as_array().unwrap().len(), cfg.samples);
            }
        }
    }

    #[test]
    fn forecast_stride_limits_repredictions() {
        let dir = tempfile::tempdir().unwrap();
        let scenario = straight_scenario("near-deer", standing_deer(60.0, 2.0), 10.0, 30, vec![]);
        generate(&scenario, dir.path(), false).unwrap();
        let data = load_dataset_dir(dir.path()).unwrap();
        let cfg = tiny_config(Preset::Baseline);
        let params = init_params(&cfg, 1).unwrap();
        let pc = PipelineConfig {
            predict_stride: 5,
            ..PipelineConfig::default()
        };
        let (_, bytes) = run_bytes(&data, &cfg, &params, &pc);
        let forecast_frames: Vec<usize> = events(&bytes)
            .iter()
            .filter(|e| e["type"] == "forecast")
            .map(|e| e["frame"].as_u64().unwrap() as usize)
            .collect();
        assert_eq!(forecast_frames, vec![7, 12, 17, 22, 27]);
    }

    #[test]
    fn event_stream_replays_byte_for_byte() {
        let dir = tempfile::tempdir().unwrap();
        // Crossing deer, all four streams active: exercises flow pooling,
        // context windows, and the stochastic decoder in one run.
        let deer = DeerMotionModel {
            kind: DeerKind::ConstantVelocity,
            initial_position: [45.0, 6.0],
            velocity: [0.0, -3.5],
            jump: None,
            body_width: 1.1,
            body_height: 1.4,
        };
        let scenario = straight_scenario("crossing", deer, 9.0, 24, vec![]);
        generate(&scenario, dir.path(), false).unwrap();
        let data = load_dataset_dir(dir.path()).unwrap();
        let cfg = tiny_config(Preset::Lmcv);
        let params = init_params(&cfg, 5).unwrap();
        let pc = PipelineConfig {
            seed: 11,
            ..PipelineConfig::default()
        };
        let (s1, b1) = run_bytes(&data, &cfg, &params, &pc);
        let (s2, b2) = run_bytes(&data, &cfg, &params, &pc);
        assert_eq!(s1, s2);
        assert_eq!(b1, b2);
        assert!(s1.forecasts > 0);

        // Frames never decrease along the stream, and forecasts only
        // follow high-risk track updates at the same frame.
        let events = events(&b1);
        let mut last_frame = 0;
        for e in &events {
            let frame = e["frame"].as_u64().unwrap() as usize;
            assert!(frame >= last_frame);
            last_frame = frame;
        }
        for e in &events {
            if e["type"] == "forecast" {
                let frame = e["frame"].clone();
                let id = e["track_id"].clone();
                let update = events.iter().find(|u| {
                    u["type"] == "track" && u["frame"] == frame && u["track_id"] == id
                });
                assert_eq!(update.unwrap()["risk"].as_str().unwrap(), "high");
            }
        }

        let other = PipelineConfig {
            seed: 12,
            ..PipelineConfig::default()
        };
        let (_, b3) = run_bytes(&data, &cfg, &params, &other);
        assert_ne!(b1, b3, "decoder noise seed must reach the samples");
    }

    #[test]
    fn mismatched_checkpoint_fails_before_any_event() {
        let dir = tempfile::tempdir().unwrap();
        let scenario = straight_scenario("near-deer", standing_deer(60.0, 2.0), 10.0, 12, vec![]);
        generate(&scenario, dir.path(), false).unwrap();
        let data = load_dataset_dir(dir.path()).unwrap();
        let cfg = tiny_config(Preset::Baseline);
        let other = ModelConfig {
            traj_hidden: 12,
            ..cfg.clone()
        };
        let params = init_params(&other, 1).unwrap();
        let mut buf = Vec::new();
        let err = run(
            &data,
            &Detector::Oracle,
            &cfg,
            &params,
            &PipelineConfig::default(),
            &mut buf,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Config { .. }), "{err:?}");
        assert!(buf.is_empty());
    }

    #[test]
    fn track_ids_follow_the_miss_rules() {
        // Single-deer mirror of the lifecycle rules, replayed directly on
        // the annotation stream: a detection continues the live track when
        // it overlaps enough, misses accumulate otherwise, and a track is
        // dropped once misses exceed the budget. A head-height occluder
        // band hides the crossing deer completely for a controlled number
        // of frames: a short gap keeps the track id, a gap beyond the miss
        // budget forces a fresh one.
        let crossing = |band: [f64; 2]| -> Scenario {
            let deer = DeerMotionModel {
                kind: DeerKind::ConstantVelocity,
                initial_position: [40.0, 6.0],
                velocity: [0.0, -3.5],
                jump: None,
                body_width: 1.1,
                body_height: 1.4,
            };
            let occluder = Occluder {
                lat0: band[0],
                lat1: band[1],
                mask_height: 2.0,
            };
            straight_scenario("occluded", deer, 8.0, 50, vec![occluder])
        };
        // 3.5 m/s crosses 0.25 m in ~2 frames and 1.4 m in ~12.
        for (band, want_two_ids) in [([4.2, 4.45], false), ([3.0, 4.4], true)] {
            let scenario = crossing(band);
            let dir = tempfile::tempdir().unwrap();
            generate(&scenario, dir.path(), false).unwrap();
            let data = load_dataset_dir(dir.path()).unwrap();
            let cfg = tiny_config(Preset::Baseline);
            let params = init_params(&cfg, 1).unwrap();
            let pc = PipelineConfig::default();
            let (_, bytes) = run_bytes(&data, &cfg, &params, &pc);

            let mut expected: Vec<(usize, String)> = Vec::new();
            let mut live: Option<(usize, BoundingBox, String)> = None;
            let mut next = 1usize;
            let mut gap_frames = 0usize;
            for t in 0..scenario.duration {
                let (_, boxes) = render_frame(&scenario, t);
                assert!(boxes.len() <= 1);
                match boxes.first() {
                    Some(b) => {
                        let matched = live.as_ref().is_some_and(|(last, prev, _)| {
                            t - last <= pc.max_misses + 1
                                && iou(prev, &b.bbox) >= pc.association_iou
                        });
                        if matched {
                            let id = live.take().unwrap().2;
                            expected.push((t, id.clone()));
                            live = Some((t, b.bbox, id));
                        } else {
                            let id = format!("track-{next:04}");
                            next += 1;
                            expected.push((t, id.clone()));
                            live = Some((t, b.bbox, id));
                        }
                    }
                    None => {
                        if let Some((last, _, _)) = &live {
                            if t - last > pc.max_misses {
                                live = None;
                            }
                        }
                        if !expected.is_empty() {
                            gap_frames += 1;
                        }
                    }
                }
            }
            assert!(gap_frames > 0, "occluder never hid the deer");
            assert_eq!(next == 3, want_two_ids, "gap of {gap_frames} frames");

            let got: Vec<(usize, String)> = events(&bytes)
                .iter()
                .filter(|e| e["type"] == "track")
                .map(|e| {
                    (
                        e["frame"].as_u64().unwrap() as usize,
                        e["track_id"].as_str().unwrap().to_string(),
                    )
                })
                .collect();
            assert_eq!(got, expected, "band {band:?}");
        }
    }

    #[test]
    fn predicted_reach_time_matches_the_scenario_oracle() {
        // Feed the decision layer perfect forecasts (the renderer's own
        // future boxes) and check the recovered TTC against the scenario
        // oracle. Covers the inverse projection, pose composition, and
        // constant-velocity extension together. Annotation boxes snap to
        // pixel extents, and at ~20 m a one-pixel bottom-edge shift moves
        // the recovered range by almost a meter, so the comparison gets a
        // few frames of slack.
        let scenario =
            straight_scenario("head-on", standing_deer(25.0, 0.5), 10.0, 90, vec![]);
        let calib = GroundCalibration::new(
            scenario.camera.focal(),
            scenario.camera.cx(),
            scenario.camera.cy(),
            scenario.camera.mount_height,
        )
        .unwrap();
        let reach = gt_reach_frame(&scenario, 0, CORRIDOR_HALF_WIDTH_M).unwrap();

        let t0 = 10usize;
        let horizon = 30usize;
        let (iw, ih) = (
            scenario.camera.width as f64,
            scenario.camera.height as f64,
        );
        let boxes_at = |t: usize| -> BoundingBox {
            let (_, boxes) = render_frame(&scenario, t);
            boxes[0].bbox
        };
        let sample: Vec<NormalizedBox> = (t0 + 1..=t0 + horizon)
            .map(|t| normalize_box(&boxes_at(t), iw, ih).unwrap())
            .collect();
        let history: Vec<EgoPose> = (0..=t0).map(|t| scenario.ego_pose(t)).collect();
        let ego_forecast =
            predict_future(&history, horizon, &EgoPredictorKind::ConstantVelocity).unwrap();

        let n_steps = 90usize;
        let ttc_s = forecast_ttc(
            &calib,
            &boxes_at(t0),
            &[sample],
            &scenario.ego_pose(t0),
            &ego_forecast,
            (iw, ih),
            n_steps,
            CORRIDOR_HALF_WIDTH_M,
            scenario.frame_rate,
        )
        .unwrap()
        .unwrap();
        let expected = (reach - t0) as f64 / scenario.frame_rate;
        assert!(
            (ttc_s - expected).abs() <= 4.0 / scenario.frame_rate,
            "ttc {ttc_s} vs oracle {expected}"
        );

        // A deer standing far outside the corridor produces no TTC.
        let far = straight_scenario("far", standing_deer(60.0, 9.0), 10.0, 90, vec![]);
        let far_boxes = |t: usize| -> BoundingBox {
            let (_, boxes) = render_frame(&far, t);
            boxes[0].bbox
        };
        let far_sample: Vec<NormalizedBox> = (t0 + 1..=t0 + horizon)
            .map(|t| normalize_box(&far_boxes(t), iw, ih).unwrap())
            .collect();
        let none = forecast_ttc(
            &calib,
            &far_boxes(t0),
            &[far_sample],
            &far.ego_pose(t0),
            &ego_forecast,
            (iw, ih),
            n_steps,
            CORRIDOR_HALF_WIDTH_M,
            far.frame_rate,
        )
        .unwrap();
        assert_eq!(none, None);
    }
}
