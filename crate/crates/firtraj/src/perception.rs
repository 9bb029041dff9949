//! Deer detection, preliminary risk classification, and detector scoring.
//!
//! Two detectors stand behind one interface: an oracle that replays
//! ground-truth annotations, used to isolate the downstream stages from
//! detection noise, and a small fully-convolutional center-heatmap
//! detector that can be trained on the synthetic suites when annotations
//! are not available at inference time.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{
    list_dataset_dirs, load_dataset_dir, load_gray_png, BoundingBox, FrameRecord, Image, RiskLevel,
};
use crate::error::{Error, Result};
use crate::model::checkpoint::{load_raw, save_raw};
use crate::model::layers::init_uniform;
use crate::model::net::{BoundParams, ModelParams, ParamGroup};
use crate::model::tape::{Real, Tape, Tensor, Var};
use crate::model::train::TrainReport;

/// Detections scoring at or above this risk probability are classified as
/// high risk unless the caller overrides the threshold.
pub const DEFAULT_RISK_THRESHOLD: f64 = 0.5;

/// IoU at which a prediction may claim a ground-truth box during AP
/// matching.
pub const DEFAULT_IOU_THRESHOLD: f64 = 0.5;

/// Intersection over union of two boxes. Symmetric, in [0, 1], and 0 for
/// boxes that only touch along an edge.
pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let ix = (a.x1().min(b.x1()) - a.x0().max(b.x0())).max(0.0);
    let iy = (a.y1().min(b.y1()) - a.y0().max(b.y0())).max(0.0);
    let inter = ix * iy;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// One detected animal with its preliminary risk assessment.
#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub bbox: BoundingBox,
    pub confidence: f64,
    /// Probability that this animal is on a collision-relevant path.
    pub risk_score: f64,
    pub risk: RiskLevel,
}

impl Detection {
    /// `risk` is `High` exactly when `risk_score >= risk_threshold`, so
    /// changing the threshold repartitions detections without touching
    /// their scores.
    pub fn new(bbox: BoundingBox, confidence: f64, risk_score: f64, risk_threshold: f64) -> Self {
        let risk = if risk_score >= risk_threshold {
            RiskLevel::High
        } else {
            RiskLevel::Low
        };
        Detection {
            bbox,
            confidence,
            risk_score,
            risk,
        }
    }
}

/// Detection backend. The oracle needs per-frame annotations; the heatmap
/// detector needs only pixels.
pub enum Detector {
    Oracle,
    Heatmap(Box<HeatmapDetector>),
}

/// Runs the detector on one frame. Output is sorted by descending
/// confidence; ties keep their producing order.
pub fn detect(
    detector: &Detector,
    frame: &Image,
    record: Option<&FrameRecord>,
    risk_threshold: f64,
) -> Result<Vec<Detection>> {
    match detector {
        Detector::Oracle => {
            let record = record.ok_or_else(|| {
                Error::config("oracle detector needs ground-truth annotations for every frame")
            })?;
            let mut out: Vec<Detection> = record
                .boxes
                .iter()
                .map(|b| {
                    let score = match b.risk {
                        RiskLevel::High => 1.0,
                        RiskLevel::Low => 0.0,
                    };
                    Detection::new(b.bbox, 1.0, score, risk_threshold)
                })
                .collect();
            out.sort_by(|a, b| b.confidence.total_cmp(&a.confidence));
            Ok(out)
        }
        Detector::Heatmap(det) => det.detect(frame, risk_threshold),
    }
}

/// Risk probability for one box. The oracle reads the annotation that
/// overlaps the box; the learned path reads the risk head at the box
/// center.
pub fn classify_risk(
    detector: &Detector,
    frame: &Image,
    bbox: &BoundingBox,
    record: Option<&FrameRecord>,
) -> Result<f64> {
    match detector {
        Detector::Oracle => {
            let record = record.ok_or_else(|| {
                Error::config("oracle risk classification needs ground-truth annotations")
            })?;
            let best = record
                .boxes
                .iter()
                .map(|b| (iou(bbox, &b.bbox), b))
                .filter(|(overlap, _)| *overlap > 0.0)
                .max_by(|a, b| a.0.total_cmp(&b.0));
            match best {
                Some((_, annotated)) => Ok(match annotated.risk {
                    RiskLevel::High => 1.0,
                    RiskLevel::Low => 0.0,
                }),
                None => Err(Error::invalid(format!(
                    "no annotation overlaps box at ({:.1}, {:.1})",
                    bbox.cx, bbox.cy
                ))),
            }
        }
        Detector::Heatmap(det) => det.risk_score_at(frame, bbox),
    }
}

/// Keeps only high-risk detections, preserving order.
pub fn filter_high_risk(detections: &[Detection]) -> Vec<Detection> {
    detections
        .iter()
        .filter(|d| d.risk == RiskLevel::High)
        .cloned()
        .collect()
}

/// Predictions and ground truth for one frame, the matching unit of AP.
#[derive(Debug, Clone)]
pub struct ApFrame {
    pub predictions: Vec<Detection>,
    pub ground_truth: Vec<BoundingBox>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ApEvaluation {
    pub ap: f64,
    pub n_gt: usize,
    pub n_predictions: usize,
    /// Set when there is nothing to detect but predictions exist; AP is
    /// pinned to 0 in that degenerate case.
    pub empty_gt_with_predictions: bool,
}

/// 11-point interpolated average precision over a set of frames.
///
/// Predictions are ranked by confidence across all frames (ties broken by
/// frame and then producing order, so the ranking is deterministic) and
/// matched greedily: each prediction claims the unmatched ground-truth box
/// in its frame with the highest IoU at or above the threshold, and every
/// ground-truth box can be claimed at most once.
pub fn average_precision(frames: &[ApFrame], iou_threshold: f64) -> Result<ApEvaluation> {
    if !(iou_threshold > 0.0 && iou_threshold <= 1.0) {
        return Err(Error::invalid(format!(
            "iou threshold {iou_threshold} outside (0, 1]"
        )));
    }
    let n_gt: usize = frames.iter().map(|f| f.ground_truth.len()).sum();
    let mut ranked: Vec<(f64, usize, usize)> = Vec::new();
    for (fi, frame) in frames.iter().enumerate() {
        for (pi, p) in frame.predictions.iter().enumerate() {
            if !(p.confidence.is_finite() && (0.0..=1.0).contains(&p.confidence)) {
                return Err(Error::invalid(format!(
                    "prediction confidence {} outside [0, 1]",
                    p.confidence
                )));
            }
            ranked.push((p.confidence, fi, pi));
        }
    }
    let n_predictions = ranked.len();
    if n_gt == 0 {
        return Ok(ApEvaluation {
            ap: 0.0,
            n_gt,
            n_predictions,
            empty_gt_with_predictions: n_predictions > 0,
        });
    }
    ranked.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| (a.1, a.2).cmp(&(b.1, b.2))));

    let mut claimed: Vec<Vec<bool>> = frames
        .iter()
        .map(|f| vec![false; f.ground_truth.len()])
        .collect();
    let mut curve: Vec<(f64, f64)> = Vec::with_capacity(ranked.len());
    let mut tp = 0usize;
    for (rank, &(_, fi, pi)) in ranked.iter().enumerate() {
        let pred = &frames[fi].predictions[pi].bbox;
        let mut best: Option<(f64, usize)> = None;
        for (gi, gt) in frames[fi].ground_truth.iter().enumerate() {
            if claimed[fi][gi] {
                continue;
            }
            let overlap = iou(pred, gt);
            if overlap >= iou_threshold && best.map_or(true, |(b, _)| overlap > b) {
                best = Some((overlap, gi));
            }
        }
        if let Some((_, gi)) = best {
            claimed[fi][gi] = true;
            tp += 1;
        }
        curve.push((tp as f64 / n_gt as f64, tp as f64 / (rank + 1) as f64));
    }

    let mut ap = 0.0;
    for k in 0..=10 {
        let level = k as f64 / 10.0;
        let best = curve
            .iter()
            .filter(|(recall, _)| *recall >= level)
            .map(|(_, precision)| *precision)
            .fold(0.0, f64::max);
        ap += best;
    }
    Ok(ApEvaluation {
        ap: ap / 11.0,
        n_gt,
        n_predictions,
        empty_gt_with_predictions: false,
    })
}

pub const AP_REPORT_HEADER: &str = "sequence_id,ap,iou_threshold,n_gt,n_pred";

#[derive(Debug, Clone, PartialEq)]
pub struct ApReportRow {
    pub sequence_id: String,
    pub iou_threshold: f64,
    pub evaluation: ApEvaluation,
}

pub fn write_ap_report(path: &Path, rows: &[ApReportRow]) -> Result<()> {
    let mut text = String::from(AP_REPORT_HEADER);
    text.push('\n');
    for row in rows {
        text.push_str(&format!(
            "{},{},{},{},{}\n",
            row.sequence_id,
            row.evaluation.ap,
            row.iou_threshold,
            row.evaluation.n_gt,
            row.evaluation.n_predictions
        ));
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Scores a detector on every sequence under `root`: one AP row per
/// sequence plus a pooled score over all frames.
pub fn evaluate_detector(
    detector: &Detector,
    root: &Path,
    iou_threshold: f64,
    risk_threshold: f64,
) -> Result<(Vec<ApReportRow>, ApEvaluation)> {
    let mut rows = Vec::new();
    let mut pooled: Vec<ApFrame> = Vec::new();
    for dir in list_dataset_dirs(root)? {
        let data = load_dataset_dir(&dir)?;
        let blank = Image::new(data.manifest.image_width, data.manifest.image_height);
        let mut frames = Vec::with_capacity(data.sequence.records.len());
        for (idx, record) in data.sequence.records.iter().enumerate() {
            let stored;
            let pixels: &Image = match detector {
                Detector::Oracle => &blank,
                Detector::Heatmap(_) => {
                    stored = load_gray_png(&data.sequence.frame_paths[idx])?;
                    &stored
                }
            };
            let predictions = detect(detector, pixels, Some(record), risk_threshold)?;
            frames.push(ApFrame {
                predictions,
                ground_truth: record.boxes.iter().map(|b| b.bbox).collect(),
            });
        }
        let sequence_id = data
            .sequence
            .records
            .first()
            .map(|r| r.sequence_id.clone())
            .unwrap_or_else(|| dir.display().to_string());
        rows.push(ApReportRow {
            sequence_id,
            iou_threshold,
            evaluation: average_precision(&frames, iou_threshold)?,
        });
        pooled.extend(frames);
    }
    let overall = average_precision(&pooled, iou_threshold)?;
    Ok((rows, overall))
}

/// Total downsampling factor of the heatmap network: two stride-2 convs,
/// so one heatmap cell covers a 4x4 block of input pixels.
pub const HEATMAP_STRIDE: usize = 4;

/// Center-map bias at initialization, ln(0.1 / 0.9): the untrained
/// detector predicts the rare-positive prior instead of 0.5, which keeps
/// the focal loss from being dominated by the empty background early on.
const CENTER_PRIOR_BIAS: f64 = -2.197224577336220;

const FOCAL_NEGATIVE_POWER: i32 = 4;
const LAMBDA_SIZE: f64 = 0.1;
const LAMBDA_OFFSET: f64 = 1.0;
const LAMBDA_RISK: f64 = 1.0;

/// Geometry and decoding thresholds of the heatmap detector. Frames are
/// resampled to `input_width x input_height` before the network runs, so
/// the detector is independent of the native frame size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeatmapConfig {
    pub input_width: usize,
    pub input_height: usize,
    pub stem_channels: usize,
    pub mid_channels: usize,
    /// Center-map probability below which peaks are discarded.
    pub score_threshold: f64,
    pub max_detections: usize,
}

impl Default for HeatmapConfig {
    fn default() -> Self {
        HeatmapConfig {
            input_width: 320,
            input_height: 240,
            stem_channels: 8,
            mid_channels: 16,
            score_threshold: 0.25,
            max_detections: 8,
        }
    }
}

impl HeatmapConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_width == 0
            || self.input_height == 0
            || self.input_width % HEATMAP_STRIDE != 0
            || self.input_height % HEATMAP_STRIDE != 0
        {
            return Err(Error::config(format!(
                "input {}x{} must be positive and divisible by {HEATMAP_STRIDE}",
                self.input_width, self.input_height
            )));
        }
        if self.stem_channels == 0 || self.mid_channels == 0 {
            return Err(Error::config("channel counts must be >= 1"));
        }
        if !(self.score_threshold > 0.0 && self.score_threshold < 1.0) {
            return Err(Error::config(format!(
                "score threshold {} outside (0, 1)",
                self.score_threshold
            )));
        }
        if self.max_detections == 0 {
            return Err(Error::config("max_detections must be >= 1"));
        }
        Ok(())
    }

    fn grid(&self) -> (usize, usize) {
        (
            self.input_height / HEATMAP_STRIDE,
            self.input_width / HEATMAP_STRIDE,
        )
    }
}

fn heatmap_weight_specs(cfg: &HeatmapConfig) -> Vec<(&'static str, Vec<usize>)> {
    let s = cfg.stem_channels;
    let m = cfg.mid_channels;
    vec![
        ("stem.w", vec![s, 1, 3, 3]),
        ("mid.w", vec![m, s, 3, 3]),
        ("top.w", vec![m, m, 3, 3]),
        ("center.w", vec![1, m, 1, 1]),
        ("size.w", vec![2, m, 1, 1]),
        ("offset.w", vec![2, m, 1, 1]),
        ("risk.w", vec![1, m, 1, 1]),
    ]
}

/// Parameter group names and shapes of the detector in storage order,
/// each weight followed by its bias.
pub fn heatmap_group_shapes(cfg: &HeatmapConfig) -> Result<Vec<(String, Vec<usize>)>> {
    cfg.validate()?;
    let mut out = Vec::new();
    for (name, shape) in heatmap_weight_specs(cfg) {
        let bias_len = shape[0];
        out.push((name.to_string(), shape));
        out.push((name.replace(".w", ".b"), vec![bias_len]));
    }
    Ok(out)
}

/// Seed-deterministic initialization: uniform fan-in weights, zero biases
/// except the center head, which starts at the low-probability prior.
pub fn init_heatmap_params(cfg: &HeatmapConfig, seed: u64) -> Result<ModelParams> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut groups = Vec::new();
    for (name, shape) in heatmap_weight_specs(cfg) {
        let fan_in = shape[1] * shape[2] * shape[3];
        let w: Tensor<f64> = init_uniform(&mut rng, fan_in, &shape);
        let bias_len = shape[0];
        groups.push(ParamGroup {
            name: name.to_string(),
            shape,
            data: w.data,
        });
        let mut bias = vec![0.0f64; bias_len];
        if name == "center.w" {
            bias[0] = CENTER_PRIOR_BIAS;
        }
        groups.push(ParamGroup {
            name: name.replace(".w", ".b"),
            shape: vec![bias_len],
            data: bias,
        });
    }
    Ok(ModelParams { groups })
}

/// The learned detector: a three-conv backbone at stride 4 with 1x1 heads
/// for center probability, log-size, sub-cell offset, and risk.
#[derive(Debug, Clone, PartialEq)]
pub struct HeatmapDetector {
    pub config: HeatmapConfig,
    pub params: ModelParams,
}

struct HeatmapMaps {
    center: Var,
    size: Var,
    offset: Var,
    risk: Var,
}

fn heatmap_forward<T: Real>(
    tape: &mut Tape<T>,
    bound: &BoundParams,
    input: Var,
) -> HeatmapMaps {
    let x = tape.conv2d(input, bound.var("stem.w"), bound.var("stem.b"), 2, 1);
    let x = tape.relu(x);
    let x = tape.conv2d(x, bound.var("mid.w"), bound.var("mid.b"), 2, 1);
    let x = tape.relu(x);
    let x = tape.conv2d(x, bound.var("top.w"), bound.var("top.b"), 1, 1);
    let feat = tape.relu(x);
    HeatmapMaps {
        center: tape.conv2d(feat, bound.var("center.w"), bound.var("center.b"), 1, 0),
        size: tape.conv2d(feat, bound.var("size.w"), bound.var("size.b"), 1, 0),
        offset: tape.conv2d(feat, bound.var("offset.w"), bound.var("offset.b"), 1, 0),
        risk: tape.conv2d(feat, bound.var("risk.w"), bound.var("risk.b"), 1, 0),
    }
}

fn logistic(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

impl HeatmapDetector {
    pub fn new(config: HeatmapConfig, seed: u64) -> Result<Self> {
        let params = init_heatmap_params(&config, seed)?;
        Ok(HeatmapDetector { config, params })
    }

    fn run(&self, frame: &Image) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>)> {
        self.config.validate()?;
        if frame.width == 0 || frame.height == 0 {
            return Err(Error::invalid("empty frame"));
        }
        let input = frame.downsample(self.config.input_width, self.config.input_height);
        let mut tape: Tape<f32> = Tape::new();
        let bound = BoundParams::bind(&mut tape, &self.params);
        let x = tape.leaf(Tensor::from_vec(
            &[1, 1, self.config.input_height, self.config.input_width],
            input.data,
        ));
        let maps = heatmap_forward(&mut tape, &bound, x);
        let read = |v: Var| -> Vec<f64> { tape.value(v).data.iter().map(|&x| x as f64).collect() };
        Ok((
            read(maps.center),
            read(maps.size),
            read(maps.offset),
            read(maps.risk),
        ))
    }

    /// Decodes peaks of the center map into boxes in frame coordinates,
    /// sorted by descending confidence. A cell is a peak when no 3x3
    /// neighbor scores higher; plateau ties go to the first cell in
    /// row-major order.
    pub fn detect(&self, frame: &Image, risk_threshold: f64) -> Result<Vec<Detection>> {
        let (center, size, offset, risk) = self.run(frame)?;
        let (ho, wo) = self.config.grid();
        let scores: Vec<f64> = center.iter().map(|&z| logistic(z)).collect();

        let mut peaks: Vec<(f64, usize, usize)> = Vec::new();
        for y in 0..ho {
            for x in 0..wo {
                let s = scores[y * wo + x];
                if s < self.config.score_threshold {
                    continue;
                }
                let mut is_peak = true;
                'scan: for dy in -1i64..=1 {
                    for dx in -1i64..=1 {
                        if dy == 0 && dx == 0 {
                            continue;
                        }
                        let (ny, nx) = (y as i64 + dy, x as i64 + dx);
                        if ny < 0 || nx < 0 || ny >= ho as i64 || nx >= wo as i64 {
                            continue;
                        }
                        let n = scores[ny as usize * wo + nx as usize];
                        let earlier = (ny as usize, nx as usize) < (y, x);
                        if n > s || (n == s && earlier) {
                            is_peak = false;
                            break 'scan;
                        }
                    }
                }
                if is_peak {
                    peaks.push((s, y, x));
                }
            }
        }
        peaks.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| (a.1, a.2).cmp(&(b.1, b.2))));
        peaks.truncate(self.config.max_detections);

        let (fw, fh) = (frame.width as f64, frame.height as f64);
        let sx = fw / self.config.input_width as f64;
        let sy = fh / self.config.input_height as f64;
        let cell = HEATMAP_STRIDE as f64;
        let mut out = Vec::with_capacity(peaks.len());
        for (score, y, x) in peaks {
            let i = y * wo + x;
            let ox = offset[i].clamp(0.0, 1.0);
            let oy = offset[ho * wo + i].clamp(0.0, 1.0);
            let w_cells = size[i].clamp(-8.0, 8.0).exp();
            let h_cells = size[ho * wo + i].clamp(-8.0, 8.0).exp();
            let bbox = BoundingBox {
                cx: ((x as f64 + ox) * cell * sx).clamp(0.0, fw),
                cy: ((y as f64 + oy) * cell * sy).clamp(0.0, fh),
                w: (w_cells * cell * sx).max(1.0),
                h: (h_cells * cell * sy).max(1.0),
            }
            .clamp_to_image(fw, fh)?;
            out.push(Detection::new(
                bbox,
                score,
                logistic(risk[i]),
                risk_threshold,
            ));
        }
        Ok(out)
    }

    /// Risk-head probability at the cell under the box center.
    pub fn risk_score_at(&self, frame: &Image, bbox: &BoundingBox) -> Result<f64> {
        bbox.validate(frame.width as f64, frame.height as f64)?;
        let (_, _, _, risk) = self.run(frame)?;
        let (ho, wo) = self.config.grid();
        let col = ((bbox.cx / frame.width as f64 * wo as f64) as usize).min(wo - 1);
        let row = ((bbox.cy / frame.height as f64 * ho as f64) as usize).min(ho - 1);
        Ok(logistic(risk[row * wo + col]))
    }
}

/// One training frame at detector resolution.
#[derive(Debug, Clone)]
pub struct HeatmapSample {
    /// Grayscale pixels, `input_height * input_width`, row-major.
    pub input: Vec<f32>,
    pub objects: Vec<HeatmapObject>,
}

/// A ground-truth animal mapped into input-pixel coordinates.
#[derive(Debug, Clone)]
pub struct HeatmapObject {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
    pub high_risk: bool,
}

/// Loads every `frame_stride`-th frame of every sequence under `root`,
/// resampled to the detector input size with boxes rescaled to match.
/// Objects whose center falls outside the input are dropped.
pub fn load_heatmap_samples(
    root: &Path,
    cfg: &HeatmapConfig,
    frame_stride: usize,
) -> Result<Vec<HeatmapSample>> {
    cfg.validate()?;
    if frame_stride == 0 {
        return Err(Error::invalid("frame_stride must be >= 1"));
    }
    let mut samples = Vec::new();
    for dir in list_dataset_dirs(root)? {
        let data = load_dataset_dir(&dir)?;
        let sx = cfg.input_width as f64 / data.manifest.image_width as f64;
        let sy = cfg.input_height as f64 / data.manifest.image_height as f64;
        for idx in (0..data.sequence.frame_paths.len()).step_by(frame_stride) {
            let img = load_gray_png(&data.sequence.frame_paths[idx])?;
            let input = img.downsample(cfg.input_width, cfg.input_height).data;
            let objects = data.sequence.records[idx]
                .boxes
                .iter()
                .filter_map(|b| {
                    let cx = b.bbox.cx * sx;
                    let cy = b.bbox.cy * sy;
                    let inside = cx > 0.0
                        && cx < cfg.input_width as f64
                        && cy > 0.0
                        && cy < cfg.input_height as f64;
                    inside.then(|| HeatmapObject {
                        cx,
                        cy,
                        w: (b.bbox.w * sx).max(1.0),
                        h: (b.bbox.h * sy).max(1.0),
                        high_risk: b.risk == RiskLevel::High,
                    })
                })
                .collect();
            samples.push(HeatmapSample { input, objects });
        }
    }
    if samples.is_empty() {
        return Err(Error::invalid(format!(
            "{}: no frames to train on",
            root.display()
        )));
    }
    Ok(samples)
}

struct PositiveCell {
    batch: usize,
    row: usize,
    col: usize,
    offset: [f64; 2],
    log_size: [f64; 2],
    risk: f64,
}

struct HeatmapTargets {
    /// Gaussian-splatted center map, `batch * ho * wo`, exactly 1 at
    /// object centers.
    heat: Vec<f64>,
    positives: Vec<PositiveCell>,
    ho: usize,
    wo: usize,
}

fn build_targets(batch: &[&HeatmapSample], cfg: &HeatmapConfig) -> HeatmapTargets {
    let (ho, wo) = cfg.grid();
    let cell = HEATMAP_STRIDE as f64;
    let mut heat = vec![0.0f64; batch.len() * ho * wo];
    let mut positives: Vec<PositiveCell> = Vec::new();
    for (b, sample) in batch.iter().enumerate() {
        for obj in &sample.objects {
            let cxc = obj.cx / cell;
            let cyc = obj.cy / cell;
            let col = (cxc as usize).min(wo - 1);
            let row = (cyc as usize).min(ho - 1);
            if positives
                .iter()
                .any(|p| p.batch == b && p.row == row && p.col == col)
            {
                continue;
            }
            let w_cells = (obj.w / cell).max(1e-3);
            let h_cells = (obj.h / cell).max(1e-3);
            let sigma = (w_cells.min(h_cells) / 3.0).max(0.75);
            let reach = (3.0 * sigma).ceil() as i64;
            for dy in -reach..=reach {
                for dx in -reach..=reach {
                    let (y, x) = (row as i64 + dy, col as i64 + dx);
                    if y < 0 || x < 0 || y >= ho as i64 || x >= wo as i64 {
                        continue;
                    }
                    let g = (-((dx * dx + dy * dy) as f64) / (2.0 * sigma * sigma)).exp();
                    let idx = (b * ho + y as usize) * wo + x as usize;
                    heat[idx] = heat[idx].max(g);
                }
            }
            heat[(b * ho + row) * wo + col] = 1.0;
            positives.push(PositiveCell {
                batch: b,
                row,
                col,
                offset: [cxc - col as f64, cyc - row as f64],
                log_size: [w_cells.ln(), h_cells.ln()],
                risk: if obj.high_risk { 1.0 } else { 0.0 },
            });
        }
    }
    HeatmapTargets {
        heat,
        positives,
        ho,
        wo,
    }
}

/// Builds the detector loss on the tape: a penalty-reduced focal loss on
/// the center map, L1 on log-size and offset at positive cells, and
/// binary cross-entropy on the risk head at positive cells. Everything is
/// normalized by the number of positives (at least 1, so empty batches
/// stay finite).
fn detector_loss<T: Real>(
    tape: &mut Tape<T>,
    maps: &HeatmapMaps,
    targets: &HeatmapTargets,
    batch: usize,
) -> Var {
    let (ho, wo) = (targets.ho, targets.wo);
    let plane = ho * wo;
    let n_heat = batch * plane;
    let heat_shape = [batch, 1, ho, wo];
    let n_pos = targets.positives.len().max(1) as f64;
    let neg_one = T::from_f64(-1.0);

    let p = tape.sigmoid(maps.center);
    let ones = tape.leaf(Tensor::from_vec(&heat_shape, vec![T::ONE; n_heat]));
    let minus_p = tape.scale(p, neg_one);
    let one_minus_p = tape.add(minus_p, ones);
    let ln_p = tape.ln(p);
    let ln_q = tape.ln(one_minus_p);
    let focus_pos = tape.mul(one_minus_p, one_minus_p);
    let pos_term = tape.mul(focus_pos, ln_p);
    let focus_neg = tape.mul(p, p);
    let neg_term = tape.mul(focus_neg, ln_q);

    let mut w_pos = vec![T::ZERO; n_heat];
    for pc in &targets.positives {
        w_pos[(pc.batch * ho + pc.row) * wo + pc.col] = T::from_f64(-1.0 / n_pos);
    }
    let w_neg: Vec<T> = targets
        .heat
        .iter()
        .map(|&y| T::from_f64(-(1.0 - y).powi(FOCAL_NEGATIVE_POWER) / n_pos))
        .collect();
    let center_pos = tape.weighted_sum(pos_term, w_pos);
    let center_neg = tape.weighted_sum(neg_term, w_neg);
    let mut total = tape.add(center_pos, center_neg);

    // L1 regression at positive cells: weights are zero elsewhere, so the
    // dense target planes only need valid values where they are used.
    let pair_shape = [batch, 2, ho, wo];
    let reg = |map: Var,
                   values: &dyn Fn(&PositiveCell) -> [f64; 2],
                   lambda: f64,
                   tape: &mut Tape<T>|
     -> Var {
        let mut neg_target = vec![T::ZERO; 2 * n_heat];
        let mut weights = vec![T::ZERO; 2 * n_heat];
        for pc in &targets.positives {
            let v = values(pc);
            for ch in 0..2 {
                let idx = ((pc.batch * 2 + ch) * ho + pc.row) * wo + pc.col;
                neg_target[idx] = T::from_f64(-v[ch]);
                weights[idx] = T::from_f64(lambda / n_pos);
            }
        }
        let shift = tape.leaf(Tensor::from_vec(&pair_shape, neg_target));
        let diff = tape.add(map, shift);
        let pos_half = tape.relu(diff);
        let flipped = tape.scale(diff, neg_one);
        let neg_half = tape.relu(flipped);
        let magnitude = tape.add(pos_half, neg_half);
        tape.weighted_sum(magnitude, weights)
    };
    let size_loss = reg(maps.size, &|pc| pc.log_size, LAMBDA_SIZE, tape);
    total = tape.add(total, size_loss);
    let offset_loss = reg(maps.offset, &|pc| pc.offset, LAMBDA_OFFSET, tape);
    total = tape.add(total, offset_loss);

    let r = tape.sigmoid(maps.risk);
    let minus_r = tape.scale(r, neg_one);
    let one_minus_r = tape.add(minus_r, ones);
    let ln_r = tape.ln(r);
    let ln_1r = tape.ln(one_minus_r);
    let mut w_hit = vec![T::ZERO; n_heat];
    let mut w_miss = vec![T::ZERO; n_heat];
    for pc in &targets.positives {
        let idx = (pc.batch * ho + pc.row) * wo + pc.col;
        w_hit[idx] = T::from_f64(-LAMBDA_RISK * pc.risk / n_pos);
        w_miss[idx] = T::from_f64(-LAMBDA_RISK * (1.0 - pc.risk) / n_pos);
    }
    let risk_hit = tape.weighted_sum(ln_r, w_hit);
    let risk_miss = tape.weighted_sum(ln_1r, w_miss);
    total = tape.add(total, risk_hit);
    tape.add(total, risk_miss)
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeatmapTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub seed: u64,
}

impl Default for HeatmapTrainConfig {
    fn default() -> Self {
        HeatmapTrainConfig {
            epochs: 20,
            batch_size: 8,
            learning_rate: 0.05,
            momentum: 0.9,
            seed: 0,
        }
    }
}

/// Trains the detector in place with minibatch SGD. Shuffling comes from
/// one stream seeded by `seed`, so identical inputs give identical
/// histories.
pub fn train_heatmap(
    det: &mut HeatmapDetector,
    samples: &[HeatmapSample],
    tc: &HeatmapTrainConfig,
) -> Result<TrainReport> {
    det.config.validate()?;
    if samples.is_empty() {
        return Err(Error::invalid("no training samples"));
    }
    if tc.batch_size == 0 || tc.epochs == 0 {
        return Err(Error::invalid("batch_size and epochs must be >= 1"));
    }
    if !(tc.learning_rate > 0.0) || !(0.0..1.0).contains(&tc.momentum) {
        return Err(Error::invalid(format!(
            "bad optimizer settings: lr {} momentum {}",
            tc.learning_rate, tc.momentum
        )));
    }
    let plane = det.config.input_width * det.config.input_height;
    for s in samples {
        if s.input.len() != plane {
            return Err(Error::invalid(format!(
                "sample has {} pixels, detector expects {plane}",
                s.input.len()
            )));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed);
    let mut velocity: Vec<Vec<f64>> = det
        .params
        .groups
        .iter()
        .map(|g| vec![0.0; g.data.len()])
        .collect();
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut epoch_losses = Vec::with_capacity(tc.epochs);
    let mut global_step = 0usize;

    for epoch in 0..tc.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut steps = 0usize;
        for chunk in order.chunks(tc.batch_size) {
            let batch: Vec<&HeatmapSample> = chunk.iter().map(|&i| &samples[i]).collect();
            let targets = build_targets(&batch, &det.config);

            let mut tape: Tape<f32> = Tape::new();
            let bound = BoundParams::bind(&mut tape, &det.params);
            let mut pixels = Vec::with_capacity(batch.len() * plane);
            for s in &batch {
                pixels.extend_from_slice(&s.input);
            }
            let input = tape.leaf(Tensor::from_vec(
                &[
                    batch.len(),
                    1,
                    det.config.input_height,
                    det.config.input_width,
                ],
                pixels,
            ));
            let maps = heatmap_forward(&mut tape, &bound, input);
            let loss = detector_loss(&mut tape, &maps, &targets, batch.len());
            let loss_val = tape.value(loss).data[0] as f64;
            if !loss_val.is_finite() {
                return Err(Error::Numeric {
                    step: global_step,
                    msg: format!("epoch {epoch}: detector loss became non-finite"),
                });
            }
            loss_sum += loss_val;
            steps += 1;

            tape.backward(&[(loss, vec![1.0f32])]);
            for (gi, group) in det.params.groups.iter_mut().enumerate() {
                let grad = tape
                    .grad(bound.vars[gi])
                    .expect("every detector parameter participates in the loss graph");
                let vel = &mut velocity[gi];
                for (j, value) in group.data.iter_mut().enumerate() {
                    let g = grad[j] as f64;
                    vel[j] = tc.momentum * vel[j] + g;
                    *value -= tc.learning_rate * vel[j];
                }
            }
            if !det.params.all_finite() {
                return Err(Error::Numeric {
                    step: global_step,
                    msg: format!("epoch {epoch}: detector parameters became non-finite"),
                });
            }
            global_step += 1;
        }
        epoch_losses.push(loss_sum / steps as f64);
    }
    Ok(TrainReport { epoch_losses })
}

const DETECTOR_KIND: &str = "heatmap";

#[derive(Serialize, Deserialize)]
struct DetectorMeta {
    kind: String,
    config: HeatmapConfig,
}

/// Saves the detector in the shared checkpoint container, tagged so a
/// forecaster checkpoint cannot be loaded as a detector by mistake.
pub fn save_detector(path: &Path, det: &HeatmapDetector) -> Result<()> {
    det.config.validate()?;
    let meta = DetectorMeta {
        kind: DETECTOR_KIND.to_string(),
        config: det.config.clone(),
    };
    let json = serde_json::to_string(&meta).map_err(|e| Error::json(path, e))?;
    save_raw(path, &json, &det.params.groups)
}

pub fn load_detector(path: &Path) -> Result<HeatmapDetector> {
    let (json, groups) = load_raw(path)?;
    let meta: DetectorMeta = serde_json::from_str(&json).map_err(|e| Error::json(path, e))?;
    if meta.kind != DETECTOR_KIND {
        return Err(Error::format(format!(
            "{}: checkpoint holds a {} model, not a detector",
            path.display(),
            meta.kind
        )));
    }
    let expected = heatmap_group_shapes(&meta.config)?;
    if groups.len() != expected.len() {
        return Err(Error::consistency(format!(
            "{}: {} parameter groups, detector config needs {}",
            path.display(),
            groups.len(),
            expected.len()
        )));
    }
    for (g, (name, shape)) in groups.iter().zip(&expected) {
        if &g.name != name || &g.shape != shape {
            return Err(Error::consistency(format!(
                "{}: group {} with shape {:?}, expected {} with {:?}",
                path.display(),
                g.name,
                g.shape,
                name,
                shape
            )));
        }
    }
    Ok(HeatmapDetector {
        config: meta.config,
        params: ModelParams { groups },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::AnnotatedBox;
    use crate::synth::render::render_frame;
    use crate::synth::{make_suite, SuiteName};
    use rand::Rng;

    fn boxed(cx: f64, cy: f64, w: f64, h: f64) -> BoundingBox {
        BoundingBox { cx, cy, w, h }
    }

    #[test]
    fn iou_matches_hand_computed_overlaps() {
        let a = boxed(1.0, 1.0, 2.0, 2.0);
        assert_eq!(iou(&a, &a), 1.0);
        let shifted = boxed(2.0, 1.0, 2.0, 2.0);
        assert!((iou(&a, &shifted) - 1.0 / 3.0).abs() < 1e-12);
        let far = boxed(10.0, 10.0, 2.0, 2.0);
        assert_eq!(iou(&a, &far), 0.0);
        let touching = boxed(3.0, 1.0, 2.0, 2.0);
        assert_eq!(iou(&a, &touching), 0.0);
    }

    #[test]
    fn iou_is_symmetric_bounded_and_reflexive() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..1000 {
            let mut random_box = || {
                boxed(
                    rng.gen_range(0.0..100.0),
                    rng.gen_range(0.0..100.0),
                    rng.gen_range(0.1..40.0),
                    rng.gen_range(0.1..40.0),
                )
            };
            let a = random_box();
            let b = random_box();
            let ab = iou(&a, &b);
            assert_eq!(ab, iou(&b, &a));
            assert!((0.0..=1.0).contains(&ab));
            assert!((iou(&a, &a) - 1.0).abs() < 1e-12);
        }
    }

    fn record_with(boxes: Vec<(BoundingBox, RiskLevel)>) -> FrameRecord {
        FrameRecord {
            sequence_id: "seq".into(),
            frame_index: 0,
            timestamp_s: 0.0,
            boxes: boxes
                .into_iter()
                .enumerate()
                .map(|(i, (bbox, risk))| AnnotatedBox {
                    track_id: format!("deer-{i}"),
                    bbox,
                    label: "deer".into(),
                    risk,
                })
                .collect(),
        }
    }

    #[test]
    fn oracle_detect_replays_annotations_with_unit_confidence() {
        let frame = Image::new(64, 48);
        let record = record_with(vec![
            (boxed(10.0, 10.0, 4.0, 6.0), RiskLevel::High),
            (boxed(30.0, 20.0, 6.0, 8.0), RiskLevel::Low),
        ]);
        let dets = detect(&Detector::Oracle, &frame, Some(&record), 0.5).unwrap();
        assert_eq!(dets.len(), 2);
        assert!(dets.iter().all(|d| d.confidence == 1.0));
        assert_eq!(dets[0].risk_score, 1.0);
        assert_eq!(dets[0].risk, RiskLevel::High);
        assert_eq!(dets[1].risk_score, 0.0);
        assert_eq!(dets[1].risk, RiskLevel::Low);

        let empty = detect(&Detector::Oracle, &frame, Some(&record_with(vec![])), 0.5).unwrap();
        assert!(empty.is_empty());

        let err = detect(&Detector::Oracle, &frame, None, 0.5).unwrap_err();
        assert!(matches!(err, Error::Config(_)), "got {err:?}");
    }

    #[test]
    fn oracle_risk_reads_the_overlapping_annotation() {
        let frame = Image::new(64, 48);
        let record = record_with(vec![
            (boxed(10.0, 10.0, 4.0, 6.0), RiskLevel::High),
            (boxed(30.0, 20.0, 6.0, 8.0), RiskLevel::Low),
        ]);
        let probe = boxed(11.0, 10.0, 4.0, 6.0);
        let score = classify_risk(&Detector::Oracle, &frame, &probe, Some(&record)).unwrap();
        assert_eq!(score, 1.0);
        let low = classify_risk(
            &Detector::Oracle,
            &frame,
            &boxed(30.0, 21.0, 6.0, 8.0),
            Some(&record),
        )
        .unwrap();
        assert_eq!(low, 0.0);
        let miss = classify_risk(
            &Detector::Oracle,
            &frame,
            &boxed(55.0, 40.0, 4.0, 4.0),
            Some(&record),
        );
        assert!(miss.is_err());
    }

    #[test]
    fn filter_keeps_only_high_risk_in_order() {
        let high = Detection::new(boxed(1.0, 1.0, 1.0, 1.0), 1.0, 0.9, 0.5);
        let low = Detection::new(boxed(2.0, 2.0, 1.0, 1.0), 1.0, 0.1, 0.5);
        let kept = filter_high_risk(&[high.clone(), low.clone()]);
        assert_eq!(kept, vec![high.clone()]);
        assert!(filter_high_risk(&[]).is_empty());
        assert!(filter_high_risk(&[low.clone(), low]).is_empty());
    }

    #[test]
    fn risk_threshold_only_moves_the_partition() {
        let scores = [0.2, 0.4, 0.6, 0.8];
        let at = |threshold: f64| -> Vec<Detection> {
            scores
                .iter()
                .map(|&s| Detection::new(boxed(1.0, 1.0, 1.0, 1.0), 1.0, s, threshold))
                .collect()
        };
        let loose = at(0.3);
        let strict = at(0.7);
        for (a, b) in loose.iter().zip(&strict) {
            assert_eq!(a.risk_score, b.risk_score);
        }
        assert_eq!(filter_high_risk(&loose).len(), 3);
        assert_eq!(filter_high_risk(&strict).len(), 1);
    }

    fn ap_frame(confidences: [f64; 3]) -> ApFrame {
        // Two ground-truth boxes; the first and third predictions match
        // them exactly, the second hits empty space.
        let gt_a = boxed(10.0, 10.0, 4.0, 4.0);
        let gt_b = boxed(30.0, 30.0, 4.0, 4.0);
        let stray = boxed(55.0, 55.0, 4.0, 4.0);
        ApFrame {
            predictions: vec![
                Detection::new(gt_a, confidences[0], 1.0, 0.5),
                Detection::new(stray, confidences[1], 1.0, 0.5),
                Detection::new(gt_b, confidences[2], 1.0, 0.5),
            ],
            ground_truth: vec![gt_a, gt_b],
        }
    }

    #[test]
    fn average_precision_matches_the_hand_enumerated_curve() {
        // Ranked TP, FP, TP with 2 ground truth: recall levels 0..0.5 see
        // precision 1, levels 0.6..1.0 see 2/3, so AP = (6 + 5 * 2/3)/11.
        let eval = average_precision(&[ap_frame([0.9, 0.8, 0.7])], 0.5).unwrap();
        assert!((eval.ap - 28.0 / 33.0).abs() < 1e-9, "ap {}", eval.ap);
        assert_eq!(eval.n_gt, 2);
        assert_eq!(eval.n_predictions, 3);
        assert!(!eval.empty_gt_with_predictions);
    }

    #[test]
    fn average_precision_handles_the_degenerate_cases() {
        let gt = boxed(10.0, 10.0, 4.0, 4.0);
        let perfect = ApFrame {
            predictions: vec![Detection::new(gt, 1.0, 1.0, 0.5)],
            ground_truth: vec![gt],
        };
        assert_eq!(average_precision(&[perfect], 0.5).unwrap().ap, 1.0);

        let silent = ApFrame {
            predictions: vec![],
            ground_truth: vec![gt],
        };
        assert_eq!(average_precision(&[silent], 0.5).unwrap().ap, 0.0);

        let hallucinating = ApFrame {
            predictions: vec![Detection::new(gt, 0.9, 1.0, 0.5)],
            ground_truth: vec![],
        };
        let eval = average_precision(&[hallucinating], 0.5).unwrap();
        assert_eq!(eval.ap, 0.0);
        assert!(eval.empty_gt_with_predictions);

        assert!(average_precision(&[], 0.0).is_err());
        assert!(average_precision(&[], 1.5).is_err());
    }

    #[test]
    fn demoting_a_true_positive_never_raises_ap() {
        // The false positive walks up the ranking as true positives are
        // swapped below it; AP must fall (or hold) at every step.
        let fp_last = average_precision(&[ap_frame([0.9, 0.7, 0.8])], 0.5).unwrap();
        let fp_mid = average_precision(&[ap_frame([0.9, 0.8, 0.7])], 0.5).unwrap();
        let fp_first = average_precision(&[ap_frame([0.8, 0.9, 0.7])], 0.5).unwrap();
        assert_eq!(fp_last.ap, 1.0);
        assert!((fp_mid.ap - 28.0 / 33.0).abs() < 1e-9);
        assert!((fp_first.ap - 2.0 / 3.0).abs() < 1e-9);
        assert!(fp_last.ap >= fp_mid.ap && fp_mid.ap >= fp_first.ap);
    }

    #[test]
    fn oracle_filter_matches_the_annotated_high_set_on_every_suite() {
        let suites = [
            SuiteName::Stationary,
            SuiteName::Crossing,
            SuiteName::Jump,
            SuiteName::OccludedJump,
            SuiteName::CurveEgo,
        ];
        for suite in suites {
            let scenarios = make_suite(suite, 2, 7).unwrap();
            for scenario in &scenarios {
                let frame = Image::new(scenario.camera.width, scenario.camera.height);
                for t in (0..scenario.duration).step_by(10) {
                    let (_, boxes) = render_frame(scenario, t);
                    let record = FrameRecord {
                        sequence_id: scenario.name.clone(),
                        frame_index: t,
                        timestamp_s: scenario.time_of(t),
                        boxes: boxes.clone(),
                    };
                    let dets =
                        detect(&Detector::Oracle, &frame, Some(&record), 0.5).unwrap();
                    let kept = filter_high_risk(&dets);
                    let expected: Vec<BoundingBox> = boxes
                        .iter()
                        .filter(|b| b.risk == RiskLevel::High)
                        .map(|b| b.bbox)
                        .collect();
                    assert_eq!(kept.len(), expected.len(), "{} frame {t}", scenario.name);
                    for (d, e) in kept.iter().zip(&expected) {
                        assert_eq!(d.bbox, *e);
                    }
                }
            }
        }
    }

    #[test]
    fn ap_report_file_round_trips() {
        let dir = tempfile::TempDir::new().unwrap();
        let path = dir.path().join("ap.csv");
        let rows = vec![ApReportRow {
            sequence_id: "crossing-000".into(),
            iou_threshold: 0.5,
            evaluation: ApEvaluation {
                ap: 0.75,
                n_gt: 8,
                n_predictions: 9,
                empty_gt_with_predictions: false,
            },
        }];
        write_ap_report(&path, &rows).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(
            text,
            "sequence_id,ap,iou_threshold,n_gt,n_pred\ncrossing-000,0.75,0.5,8,9\n"
        );
    }

    fn tiny_config() -> HeatmapConfig {
        HeatmapConfig {
            input_width: 32,
            input_height: 24,
            stem_channels: 2,
            mid_channels: 3,
            score_threshold: 0.05,
            max_detections: 4,
        }
    }

    #[test]
    fn heatmap_targets_place_centers_offsets_and_log_sizes() {
        let cfg = tiny_config();
        let sample = HeatmapSample {
            input: vec![0.0; 32 * 24],
            objects: vec![HeatmapObject {
                cx: 13.0,
                cy: 10.0,
                w: 8.0,
                h: 6.0,
                high_risk: true,
            }],
        };
        let t = build_targets(&[&sample], &cfg);
        assert_eq!((t.ho, t.wo), (6, 8));
        assert_eq!(t.positives.len(), 1);
        let pc = &t.positives[0];
        assert_eq!((pc.row, pc.col), (2, 3));
        assert!((pc.offset[0] - 0.25).abs() < 1e-12);
        assert!((pc.offset[1] - 0.5).abs() < 1e-12);
        assert!((pc.log_size[0] - (2.0f64).ln()).abs() < 1e-12);
        assert!((pc.log_size[1] - (1.5f64).ln()).abs() < 1e-12);
        assert_eq!(pc.risk, 1.0);
        assert_eq!(t.heat[(2 * 8) + 3], 1.0);
        let neighbor = t.heat[(2 * 8) + 4];
        assert!(neighbor > 0.0 && neighbor < 1.0);
    }

    fn random_sample(cfg: &HeatmapConfig, seed: u64) -> HeatmapSample {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        HeatmapSample {
            input: (0..cfg.input_width * cfg.input_height)
                .map(|_| rng.gen_range(0.0..1.0))
                .collect(),
            objects: vec![
                HeatmapObject {
                    cx: rng.gen_range(6.0..26.0),
                    cy: rng.gen_range(6.0..18.0),
                    w: rng.gen_range(3.0..9.0),
                    h: rng.gen_range(3.0..7.0),
                    high_risk: true,
                },
                HeatmapObject {
                    cx: rng.gen_range(6.0..26.0),
                    cy: rng.gen_range(6.0..18.0),
                    w: rng.gen_range(3.0..9.0),
                    h: rng.gen_range(3.0..7.0),
                    high_risk: false,
                },
            ],
        }
    }

    #[test]
    fn detector_loss_gradients_match_finite_differences() {
        let cfg = tiny_config();
        let samples = [random_sample(&cfg, 1), random_sample(&cfg, 2)];
        let batch: Vec<&HeatmapSample> = samples.iter().collect();
        let targets = build_targets(&batch, &cfg);
        let params = init_heatmap_params(&cfg, 3).unwrap();

        let eval = |p: &ModelParams, with_backward: bool| -> (f64, Vec<Vec<f64>>) {
            let mut tape: Tape<f64> = Tape::new();
            let bound = BoundParams::bind(&mut tape, p);
            let mut pixels = Vec::new();
            for s in &batch {
                pixels.extend(s.input.iter().map(|&v| v as f64));
            }
            let input = tape.leaf(Tensor::from_vec(
                &[2, 1, cfg.input_height, cfg.input_width],
                pixels,
            ));
            let maps = heatmap_forward(&mut tape, &bound, input);
            let loss = detector_loss(&mut tape, &maps, &targets, 2);
            let value = tape.value(loss).data[0];
            let grads = if with_backward {
                tape.backward(&[(loss, vec![1.0])]);
                bound
                    .vars
                    .iter()
                    .map(|&v| tape.grad(v).unwrap().to_vec())
                    .collect()
            } else {
                vec![]
            };
            (value, grads)
        };

        let (_, grads) = eval(&params, true);
        let eps = 1e-5;
        let mut checked = 0;
        for (gi, group) in params.groups.iter().enumerate() {
            let stride = (group.data.len() / 3).max(1);
            for j in (0..group.data.len()).step_by(stride).take(3) {
                let mut plus = params.clone();
                plus.groups[gi].data[j] += eps;
                let mut minus = params.clone();
                minus.groups[gi].data[j] -= eps;
                let numeric = (eval(&plus, false).0 - eval(&minus, false).0) / (2.0 * eps);
                let analytic = grads[gi][j];
                let rel = (analytic - numeric).abs()
                    / analytic.abs().max(numeric.abs()).max(1e-6);
                assert!(
                    rel < 1e-4,
                    "{}[{j}]: analytic {analytic} numeric {numeric} rel {rel}",
                    group.name
                );
                checked += 1;
            }
        }
        assert!(checked >= 30, "only {checked} coordinates probed");
    }

    #[test]
    fn untrained_detector_decodes_valid_sorted_boxes() {
        let cfg = tiny_config();
        let det = HeatmapDetector::new(cfg, 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut frame = Image::new(64, 48);
        for v in frame.data.iter_mut() {
            *v = rng.gen_range(0.0..1.0);
        }
        let dets = det.detect(&frame, 0.5).unwrap();
        assert!(dets.len() <= det.config.max_detections);
        for pair in dets.windows(2) {
            assert!(pair[0].confidence >= pair[1].confidence);
        }
        for d in &dets {
            d.bbox.validate(64.0, 48.0).unwrap();
            assert!(d.bbox.x0() >= 0.0 && d.bbox.x1() <= 64.0);
            assert!(d.bbox.y0() >= 0.0 && d.bbox.y1() <= 48.0);
            assert!((0.0..=1.0).contains(&d.risk_score));
        }
        let again = det.detect(&frame, 0.5).unwrap();
        assert_eq!(dets, again);
    }

    #[test]
    fn training_reduces_the_detector_loss() {
        let cfg = HeatmapConfig {
            input_width: 80,
            input_height: 60,
            ..tiny_config()
        };
        let samples: Vec<HeatmapSample> = (0..6)
            .map(|i| {
                let mut s = random_sample(&cfg, 20 + i);
                s.input = vec![0.1; cfg.input_width * cfg.input_height];
                for obj in &s.objects {
                    // Paint a bright blob where the object sits so there
                    // is signal to learn from.
                    for dy in -2i64..=2 {
                        for dx in -2i64..=2 {
                            let x = (obj.cx as i64 + dx).clamp(0, cfg.input_width as i64 - 1);
                            let y = (obj.cy as i64 + dy).clamp(0, cfg.input_height as i64 - 1);
                            s.input[y as usize * cfg.input_width + x as usize] = 0.9;
                        }
                    }
                }
                s
            })
            .collect();
        let mut det = HeatmapDetector::new(cfg, 7).unwrap();
        let tc = HeatmapTrainConfig {
            epochs: 80,
            batch_size: 3,
            learning_rate: 0.03,
            momentum: 0.9,
            seed: 8,
        };
        let report = train_heatmap(&mut det, &samples, &tc).unwrap();
        let first = report.epoch_losses[0];
        let last = *report.epoch_losses.last().unwrap();
        assert!(
            last < 0.5 * first,
            "loss {first} only reached {last} after {} epochs",
            tc.epochs
        );
    }

    #[test]
    fn detector_checkpoint_round_trips() {
        let dir = tempfile::TempDir::new().unwrap();
        let path = dir.path().join("det.ckpt");
        let det = HeatmapDetector::new(tiny_config(), 9).unwrap();
        save_detector(&path, &det).unwrap();
        let loaded = load_detector(&path).unwrap();
        assert_eq!(loaded.config, det.config);

        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut frame = Image::new(96, 72);
        for v in frame.data.iter_mut() {
            *v = rng.gen_range(0.0..1.0);
        }
        assert_eq!(
            det.detect(&frame, 0.5).unwrap(),
            loaded.detect(&frame, 0.5).unwrap()
        );

        let wrong = dir.path().join("wrong.ckpt");
        save_raw(&wrong, "{\"kind\":\"other\"}", &det.params.groups).unwrap();
        let err = load_detector(&wrong).unwrap_err();
        assert!(matches!(err, Error::Format(_) | Error::Json { .. }), "got {err:?}");
    }

    #[test]
    fn training_rejects_bad_inputs() {
        let mut det = HeatmapDetector::new(tiny_config(), 11).unwrap();
        let err = train_heatmap(&mut det, &[], &HeatmapTrainConfig::default()).unwrap_err();
        assert!(matches!(err, Error::InvalidArgument(_)));
        let bad = HeatmapSample {
            input: vec![0.0; 10],
            objects: vec![],
        };
        let err = train_heatmap(&mut det, &[bad], &HeatmapTrainConfig::default()).unwrap_err();
        assert!(matches!(err, Error::InvalidArgument(_)));
    }
}
