//! Window assembly: turns a generated dataset directory into model-ready
//! observation windows with pooled flow, downsampled context, and
//! normalized ego conditioning.

use std::collections::BTreeMap;
use std::path::Path;

use crate::data::{
    list_dataset_dirs, load_dataset_dir, load_gray_png, normalize_box, BoundingBox, DatasetDir,
    Image, NormalizedBox,
};
use crate::egomotion::{normalize_forecast, predict_future, EgoPredictorKind};
use crate::error::{Error, Result};
use crate::flow::{
    estimate_flow, read_flow_checked, roi_pool, BlockMatchParams, FlowField, FlowSource,
    PooledFlow,
};
use crate::synth::render::gt_flow;
use crate::synth::{read_scenario, Scenario};

use super::net::{ModelConfig, ObservationWindow};

/// A window plus everything the forward pass and the loss need alongside
/// it. `future_boxes` is empty when the source track ends before a full
/// horizon and futures were not required.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedWindow {
    pub window: ObservationWindow,
    /// Normalized ego-motion conditioning, one `[dx, dy, dyaw]` row per
    /// future step.
    pub ego_features: Vec<[f64; 3]>,
    pub future_boxes: Vec<NormalizedBox>,
    pub sequence_id: String,
    pub track_id: String,
}

#[derive(Debug, Clone)]
pub struct WindowOptions {
    /// Step between consecutive window anchors within one track run.
    pub stride: usize,
    pub flow_source: FlowSource,
    pub ego: EgoPredictorKind,
    /// When set, windows without a full ground-truth future are dropped;
    /// otherwise they are kept with `future_boxes` empty.
    pub require_future: bool,
}

impl Default for WindowOptions {
    fn default() -> Self {
        WindowOptions {
            stride: 1,
            flow_source: FlowSource::GroundTruth,
            ego: EgoPredictorKind::ConstantVelocity,
            require_future: true,
        }
    }
}

/// Per-track box timeline: one slot per frame.
fn track_timelines(data: &DatasetDir) -> BTreeMap<String, Vec<Option<BoundingBox>>> {
    let len = data.sequence.records.len();
    let mut tracks: BTreeMap<String, Vec<Option<BoundingBox>>> = BTreeMap::new();
    for record in &data.sequence.records {
        for b in &record.boxes {
            tracks
                .entry(b.track_id.clone())
                .or_insert_with(|| vec![None; len])
                [record.frame_index] = Some(b.bbox);
        }
    }
    tracks
}

/// Flow fields per frame pair, produced in ascending pair order so block
/// matching can reuse the previous decoded frame.
pub(crate) struct FlowIterator<'a> {
    data: &'a DatasetDir,
    source: FlowSource,
    scenario: Option<Scenario>,
    prev_frame: Option<(usize, Image)>,
}

impl<'a> FlowIterator<'a> {
    pub(crate) fn new(data: &'a DatasetDir, source: FlowSource) -> Self {
        FlowIterator {
            data,
            source,
            scenario: None,
            prev_frame: None,
        }
    }

    fn frame(&mut self, index: usize) -> Result<Image> {
        if let Some((i, img)) = &self.prev_frame {
            if *i == index {
                return Ok(img.clone());
            }
        }
        load_gray_png(&self.data.sequence.frame_paths[index])
    }

    /// Flow for the pair (t, t+1), on the frame-t pixel grid.
    pub(crate) fn pair(&mut self, t: usize) -> Result<FlowField> {
        let (w, h) = (self.data.manifest.image_width, self.data.manifest.image_height);
        match self.source {
            FlowSource::GroundTruth => {
                let path = self.data.flow_path(t);
                if path.is_file() {
                    return read_flow_checked(&path, w, h);
                }
                if self.scenario.is_none() {
                    self.scenario = Some(read_scenario(&self.data.scenario_path())?);
                }
                gt_flow(self.scenario.as_ref().expect("just loaded"), t)
            }
            FlowSource::BlockMatching => {
                let a = self.frame(t)?;
                let b = load_gray_png(&self.data.sequence.frame_paths[t + 1])?;
                let flow = estimate_flow(&a, &b, &BlockMatchParams::default())?;
                self.prev_frame = Some((t + 1, b));
                Ok(flow)
            }
        }
    }
}

/// Assembles every complete window of every track in one dataset
/// directory. Flow fields are produced once per frame pair and pooled for
/// each track visible there.
pub fn prepare_windows(
    data: &DatasetDir,
    cfg: &ModelConfig,
    opts: &WindowOptions,
) -> Result<Vec<PreparedWindow>> {
    cfg.validate()?;
    if opts.stride == 0 {
        return Err(Error::invalid("window stride must be >= 1"));
    }
    let len = data.sequence.records.len();
    let (iw, ih) = (
        data.manifest.image_width as f64,
        data.manifest.image_height as f64,
    );
    let tracks = track_timelines(data);

    let mut pooled: BTreeMap<&str, BTreeMap<usize, PooledFlow>> = BTreeMap::new();
    if cfg.streams.use_motion {
        let mut flows = FlowIterator::new(data, opts.flow_source);
        for t in 0..len.saturating_sub(1) {
            let needed: Vec<(&str, &BoundingBox)> = tracks
                .iter()
                .filter_map(|(id, boxes)| boxes[t].as_ref().map(|b| (id.as_str(), b)))
                .collect();
            if needed.is_empty() {
                continue;
            }
            let field = flows.pair(t)?;
            for (id, bbox) in needed {
                let cell = roi_pool(&field, bbox, cfg.roi_grid)?;
                pooled.entry(id).or_default().insert(t, cell);
            }
        }
    }

    let mut context: Vec<Vec<f32>> = Vec::new();
    if cfg.streams.use_context {
        context.reserve(len);
        for path in &data.sequence.frame_paths {
            let img = load_gray_png(path)?;
            context.push(
                img.downsample(cfg.context_width, cfg.context_height)
                    .data,
            );
        }
    }

    let mut windows = Vec::new();
    for (id, boxes) in &tracks {
        let mut run_start = None;
        for t in 0..=len {
            let present = t < len && boxes[t].is_some();
            match (run_start, present) {
                (None, true) => run_start = Some(t),
                (Some(a), false) => {
                    emit_run_windows(
                        data, cfg, opts, id, boxes, &pooled, &context, a, t, iw, ih,
                        &mut windows,
                    )?;
                    run_start = None;
                }
                _ => {}
            }
        }
    }
    Ok(windows)
}

#[allow(clippy::too_many_arguments)]
fn emit_run_windows(
    data: &DatasetDir,
    cfg: &ModelConfig,
    opts: &WindowOptions,
    track_id: &str,
    boxes: &[Option<BoundingBox>],
    pooled: &BTreeMap<&str, BTreeMap<usize, PooledFlow>>,
    context: &[Vec<f32>],
    run_start: usize,
    run_end: usize,
    iw: f64,
    ih: f64,
    windows: &mut Vec<PreparedWindow>,
) -> Result<()> {
    if run_end - run_start < cfg.tau {
        return Ok(());
    }
    let mut t0 = run_start + cfg.tau - 1;
    while t0 < run_end {
        let future_frames_available = run_end - 1 - t0;
        let full_future = future_frames_available >= cfg.horizon;
        if opts.require_future && !full_future {
            break;
        }
        let past_start = t0 + 1 - cfg.tau;
        let past_boxes: Vec<NormalizedBox> = (past_start..=t0)
            .map(|t| normalize_box(boxes[t].as_ref().expect("inside run"), iw, ih))
            .collect::<Result<_>>()?;
        let future_boxes: Vec<NormalizedBox> = if full_future {
            (t0 + 1..=t0 + cfg.horizon)
                .map(|t| normalize_box(boxes[t].as_ref().expect("inside run"), iw, ih))
                .collect::<Result<_>>()?
        } else {
            Vec::new()
        };
        let pooled_flow: Vec<PooledFlow> = if cfg.streams.use_motion {
            let per_track = pooled.get(track_id).ok_or_else(|| {
                Error::consistency(format!("no pooled flow for track {track_id}"))
            })?;
            (past_start..t0)
                .map(|t| {
                    per_track.get(&t).cloned().ok_or_else(|| {
                        Error::consistency(format!("missing pooled flow for pair {t}"))
                    })
                })
                .collect::<Result<_>>()?
        } else {
            Vec::new()
        };
        let ctx: Vec<Vec<f32>> = if cfg.streams.use_context {
            context[past_start..=t0].to_vec()
        } else {
            Vec::new()
        };
        let ego_history = data.sequence.odometry[past_start..=t0].to_vec();
        let forecast = predict_future(&ego_history, cfg.horizon, &opts.ego)?;
        let ego_features = normalize_forecast(&forecast);

        windows.push(PreparedWindow {
            window: ObservationWindow {
                past_boxes,
                pooled_flow,
                context: ctx,
                ego_history,
                t0,
            },
            ego_features,
            future_boxes,
            sequence_id: data.manifest.set_id.clone(),
            track_id: track_id.to_string(),
        });
        t0 += opts.stride;
    }
    Ok(())
}

/// Assembles windows for every dataset directory under a suite root.
pub fn prepare_suite_windows(
    suite_root: &Path,
    cfg: &ModelConfig,
    opts: &WindowOptions,
) -> Result<Vec<PreparedWindow>> {
    let mut windows = Vec::new();
    for dir in list_dataset_dirs(suite_root)? {
        let data = load_dataset_dir(&dir)?;
        windows.extend(prepare_windows(&data, cfg, opts)?);
    }
    if windows.is_empty() {
        return Err(Error::invalid(format!(
            "{}: no usable windows (tracks shorter than tau + horizon?)",
            suite_root.display()
        )));
    }
    Ok(windows)
}
