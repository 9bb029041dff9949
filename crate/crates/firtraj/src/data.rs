//! Domain types, unit normalization and the dataset file formats
//! (annotation JSONL, odometry CSV, manifest JSON, PNG frames) shared by
//! every other module.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Per-deer risk label. `High` marks animals the prediction stage must
/// process; `Low` ones are filtered out early.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RiskLevel {
    High,
    Low,
}

/// Axis-aligned box in pixel coordinates, stored as center + size.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BoundingBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        BoundingBox { cx, cy, w, h }
    }

    pub fn x0(&self) -> f64 {
        self.cx - self.w / 2.0
    }

    pub fn x1(&self) -> f64 {
        self.cx + self.w / 2.0
    }

    pub fn y0(&self) -> f64 {
        self.cy - self.h / 2.0
    }

    pub fn y1(&self) -> f64 {
        self.cy + self.h / 2.0
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    /// Checks the box invariants against an image of the given size:
    /// positive extent and center inside the image.
    pub fn validate(&self, image_width: f64, image_height: f64) -> Result<()> {
        if !(self.cx.is_finite() && self.cy.is_finite() && self.w.is_finite() && self.h.is_finite())
        {
            return Err(Error::malformed(format!("non-finite box {self:?}")));
        }
        if self.w <= 0.0 || self.h <= 0.0 {
            return Err(Error::malformed(format!(
                "box with non-positive extent w={} h={}",
                self.w, self.h
            )));
        }
        if self.cx < 0.0 || self.cx > image_width || self.cy < 0.0 || self.cy > image_height {
            return Err(Error::malformed(format!(
                "box center ({}, {}) outside {image_width}x{image_height} image",
                self.cx, self.cy
            )));
        }
        Ok(())
    }

    /// Clamps the box edges to the image rectangle. Boxes whose center lies
    /// outside the image are rejected rather than clamped.
    pub fn clamp_to_image(&self, image_width: f64, image_height: f64) -> Result<BoundingBox> {
        self.validate(image_width, image_height)?;
        let x0 = self.x0().max(0.0);
        let x1 = self.x1().min(image_width);
        let y0 = self.y0().max(0.0);
        let y1 = self.y1().min(image_height);
        Ok(BoundingBox {
            cx: (x0 + x1) / 2.0,
            cy: (y0 + y1) / 2.0,
            w: x1 - x0,
            h: y1 - y0,
        })
    }
}

/// Box expressed as fractions of the image dimensions. Model inputs and
/// outputs live in this space.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormalizedBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl NormalizedBox {
    pub fn as_array(&self) -> [f64; 4] {
        [self.cx, self.cy, self.w, self.h]
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        NormalizedBox {
            cx: a[0],
            cy: a[1],
            w: a[2],
            h: a[3],
        }
    }

    pub fn center(&self) -> [f64; 2] {
        [self.cx, self.cy]
    }
}

pub fn normalize_box(
    bbox: &BoundingBox,
    image_width: f64,
    image_height: f64,
) -> Result<NormalizedBox> {
    if image_width <= 0.0 || image_height <= 0.0 {
        return Err(Error::invalid(format!(
            "image dimensions must be positive, got {image_width}x{image_height}"
        )));
    }
    bbox.validate(image_width, image_height)?;
    Ok(NormalizedBox {
        cx: bbox.cx / image_width,
        cy: bbox.cy / image_height,
        w: bbox.w / image_width,
        h: bbox.h / image_height,
    })
}

pub fn denormalize_box(
    nbox: &NormalizedBox,
    image_width: f64,
    image_height: f64,
) -> Result<BoundingBox> {
    if image_width <= 0.0 || image_height <= 0.0 {
        return Err(Error::invalid(format!(
            "image dimensions must be positive, got {image_width}x{image_height}"
        )));
    }
    Ok(BoundingBox {
        cx: nbox.cx * image_width,
        cy: nbox.cy * image_height,
        w: nbox.w * image_width,
        h: nbox.h * image_height,
    })
}

/// One annotated deer instance within a frame.
#[derive(Debug, Clone, PartialEq)]
pub struct AnnotatedBox {
    pub track_id: String,
    pub bbox: BoundingBox,
    pub label: String,
    pub risk: RiskLevel,
}

/// Per-frame annotation record.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameRecord {
    pub sequence_id: String,
    pub frame_index: usize,
    pub timestamp_s: f64,
    pub boxes: Vec<AnnotatedBox>,
}

#[derive(Serialize, Deserialize)]
struct BoxJson {
    track_id: String,
    cx: f64,
    cy: f64,
    w: f64,
    h: f64,
    label: String,
    risk: RiskLevel,
}

#[derive(Serialize, Deserialize)]
struct FrameJson {
    sequence_id: String,
    frame_index: usize,
    timestamp_s: f64,
    boxes: Vec<BoxJson>,
}

impl From<&FrameRecord> for FrameJson {
    fn from(r: &FrameRecord) -> Self {
        FrameJson {
            sequence_id: r.sequence_id.clone(),
            frame_index: r.frame_index,
            timestamp_s: r.timestamp_s,
            boxes: r
                .boxes
                .iter()
                .map(|b| BoxJson {
                    track_id: b.track_id.clone(),
                    cx: b.bbox.cx,
                    cy: b.bbox.cy,
                    w: b.bbox.w,
                    h: b.bbox.h,
                    label: b.label.clone(),
                    risk: b.risk,
                })
                .collect(),
        }
    }
}

impl From<FrameJson> for FrameRecord {
    fn from(j: FrameJson) -> Self {
        FrameRecord {
            sequence_id: j.sequence_id,
            frame_index: j.frame_index,
            timestamp_s: j.timestamp_s,
            boxes: j
                .boxes
                .into_iter()
                .map(|b| AnnotatedBox {
                    track_id: b.track_id,
                    bbox: BoundingBox::new(b.cx, b.cy, b.w, b.h),
                    label: b.label,
                    risk: b.risk,
                })
                .collect(),
        }
    }
}

pub fn write_annotations(path: &Path, records: &[FrameRecord]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for record in records {
        let json = FrameJson::from(record);
        let line = serde_json::to_string(&json).map_err(|e| Error::json(path, e))?;
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_annotations(path: &Path) -> Result<Vec<FrameRecord>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = BufReader::new(file);
    let mut records = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let json: FrameJson = serde_json::from_str(&line).map_err(|e| {
            Error::malformed(format!("{}:{}: {e}", path.display(), i + 1))
        })?;
        records.push(FrameRecord::from(json));
    }
    Ok(records)
}

/// Planar vehicle pose plus speed, in the world frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EgoPose {
    pub x: f64,
    pub y: f64,
    pub yaw: f64,
    pub speed: f64,
}

impl EgoPose {
    pub fn new(x: f64, y: f64, yaw: f64, speed: f64) -> Self {
        EgoPose { x, y, yaw, speed }
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.yaw.is_finite() && self.speed.is_finite()
    }
}

pub const ODOMETRY_HEADER: &str = "frame_index,x_m,y_m,yaw_rad,speed_mps";

pub fn write_odometry(path: &Path, poses: &[EgoPose]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    writeln!(w, "{ODOMETRY_HEADER}").map_err(|e| Error::io(path, e))?;
    for (i, p) in poses.iter().enumerate() {
        writeln!(w, "{},{},{},{},{}", i, p.x, p.y, p.yaw, p.speed)
            .map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_odometry(path: &Path) -> Result<Vec<EgoPose>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = BufReader::new(file);
    let mut lines = reader.lines().enumerate();
    match lines.next() {
        Some((_, Ok(header))) if header.trim() == ODOMETRY_HEADER => {}
        Some((_, Ok(header))) => {
            return Err(Error::format(format!(
                "{}: line 1: expected header `{ODOMETRY_HEADER}`, got `{header}`",
                path.display()
            )))
        }
        Some((_, Err(e))) => return Err(Error::io(path, e)),
        None => {
            return Err(Error::format(format!(
                "{}: empty odometry file",
                path.display()
            )))
        }
    }
    let mut poses = Vec::new();
    for (i, line) in lines {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let lineno = i + 1;
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 5 {
            return Err(Error::format(format!(
                "{}: line {lineno}: expected 5 fields, got {}",
                path.display(),
                fields.len()
            )));
        }
        let parse = |s: &str, name: &str| -> Result<f64> {
            s.trim().parse::<f64>().map_err(|_| {
                Error::format(format!(
                    "{}: line {lineno}: unparsable {name} `{s}`",
                    path.display()
                ))
            })
        };
        let idx: usize = fields[0].trim().parse().map_err(|_| {
            Error::format(format!(
                "{}: line {lineno}: unparsable frame_index `{}`",
                path.display(),
                fields[0]
            ))
        })?;
        if idx != poses.len() {
            return Err(Error::format(format!(
                "{}: line {lineno}: expected frame_index {}, got {idx}",
                path.display(),
                poses.len()
            )));
        }
        poses.push(EgoPose {
            x: parse(fields[1], "x_m")?,
            y: parse(fields[2], "y_m")?,
            yaw: parse(fields[3], "yaw_rad")?,
            speed: parse(fields[4], "speed_mps")?,
        });
    }
    Ok(poses)
}

/// Dataset-level metadata written next to the frames.
///
/// `mount_height_m` records the camera height above the flat ground plane;
/// it is what makes metric ground-plane recovery (and therefore TTC)
/// possible from box geometry alone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub image_width: usize,
    pub image_height: usize,
    pub frame_rate_hz: f64,
    pub hfov_deg: f64,
    pub set_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mount_height_m: Option<f64>,
}

pub fn write_manifest(path: &Path, manifest: &DatasetManifest) -> Result<()> {
    let text = serde_json::to_string_pretty(manifest).map_err(|e| Error::json(path, e))?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn read_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path, e))
}

/// Observation/prediction window geometry.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WindowConfig {
    pub tau: usize,
    pub horizon: usize,
    pub frame_rate: f64,
}

impl Default for WindowConfig {
    fn default() -> Self {
        WindowConfig {
            tau: 60,
            horizon: 30,
            frame_rate: 30.0,
        }
    }
}

impl WindowConfig {
    pub fn validate(&self) -> Result<()> {
        if self.tau < 2 {
            return Err(Error::invalid(format!("tau must be >= 2, got {}", self.tau)));
        }
        if self.horizon < 1 {
            return Err(Error::invalid("horizon must be >= 1"));
        }
        if !(self.frame_rate > 0.0) {
            return Err(Error::invalid(format!(
                "frame_rate must be positive, got {}",
                self.frame_rate
            )));
        }
        Ok(())
    }
}

/// Index span of one observation window within a sequence: frames
/// `t0-tau+1 ..= t0` are observed, `t0+1 ..= t0+horizon` are the future.
/// Spans index into the owning sequence; they never copy frame data.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WindowSpan {
    pub t0: usize,
    pub tau: usize,
    pub horizon: usize,
}

impl WindowSpan {
    pub fn past_start(&self) -> usize {
        self.t0 + 1 - self.tau
    }

    pub fn future_end(&self) -> usize {
        self.t0 + self.horizon
    }
}

/// One window per t0 with a full observation history and a full future;
/// sequences shorter than tau + horizon yield no windows.
pub fn slide_windows(sequence_len: usize, config: &WindowConfig) -> Vec<WindowSpan> {
    let need = config.tau + config.horizon;
    if sequence_len < need {
        return Vec::new();
    }
    (config.tau - 1..sequence_len - config.horizon)
        .map(|t0| WindowSpan {
            t0,
            tau: config.tau,
            horizon: config.horizon,
        })
        .collect()
}

/// One leave-one-out evaluation fold.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Fold {
    pub train: Vec<String>,
    pub test: String,
}

pub fn make_leave_one_out_folds(set_ids: &[String]) -> Result<Vec<Fold>> {
    if set_ids.len() < 2 {
        return Err(Error::invalid(format!(
            "leave-one-out needs >= 2 sets, got {}",
            set_ids.len()
        )));
    }
    let mut seen = std::collections::HashSet::new();
    for id in set_ids {
        if !seen.insert(id) {
            return Err(Error::invalid(format!("duplicate set id `{id}`")));
        }
    }
    Ok((0..set_ids.len())
        .map(|i| Fold {
            train: set_ids
                .iter()
                .enumerate()
                .filter(|(j, _)| *j != i)
                .map(|(_, id)| id.clone())
                .collect(),
            test: set_ids[i].clone(),
        })
        .collect())
}

/// Single-channel image with intensities in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(width: usize, height: usize) -> Self {
        Image {
            width,
            height,
            data: vec![0.0; width * height],
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: f32) {
        self.data[y * self.width + x] = v;
    }

    /// Area-mean downsampling to an arbitrary smaller grid. Cells follow the
    /// same equal-split-with-trailing-remainder partition as ROI pooling.
    pub fn downsample(&self, out_width: usize, out_height: usize) -> Image {
        let xs = partition_spans(self.width, out_width);
        let ys = partition_spans(self.height, out_height);
        let mut out = Image::new(out_width, out_height);
        for (j, &(y0, y1)) in ys.iter().enumerate() {
            for (i, &(x0, x1)) in xs.iter().enumerate() {
                let mut sum = 0.0f64;
                for y in y0..y1 {
                    for x in x0..x1 {
                        sum += self.get(x, y) as f64;
                    }
                }
                let n = ((y1 - y0) * (x1 - x0)) as f64;
                out.set(i, j, (sum / n) as f32);
            }
        }
        out
    }
}

/// Splits `len` items into `cells` contiguous spans of equal size, with the
/// remainder distributed to the trailing cells. Returns half-open ranges.
/// When `len < cells`, cells duplicate items via nearest sampling so every
/// span is non-empty.
pub fn partition_spans(len: usize, cells: usize) -> Vec<(usize, usize)> {
    assert!(cells > 0, "partition into zero cells");
    assert!(len > 0, "partition of empty range");
    if len < cells {
        return (0..cells)
            .map(|i| {
                let idx = (i * len + len / 2) / cells;
                let idx = idx.min(len - 1);
                (idx, idx + 1)
            })
            .collect();
    }
    let base = len / cells;
    let rem = len % cells;
    let mut spans = Vec::with_capacity(cells);
    let mut start = 0;
    for i in 0..cells {
        let size = if i >= cells - rem { base + 1 } else { base };
        spans.push((start, start + size));
        start += size;
    }
    spans
}

pub fn save_gray_png(path: &Path, img: &Image) -> Result<()> {
    let mut bytes = Vec::with_capacity(img.width * img.height);
    for &v in &img.data {
        bytes.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let w = BufWriter::new(file);
    let encoder = image::codecs::png::PngEncoder::new_with_quality(
        w,
        image::codecs::png::CompressionType::Fast,
        image::codecs::png::FilterType::NoFilter,
    );
    image::ImageEncoder::write_image(
        encoder,
        &bytes,
        img.width as u32,
        img.height as u32,
        image::ExtendedColorType::L8,
    )
    .map_err(|e| Error::format(format!("{}: png encode: {e}", path.display())))?;
    Ok(())
}

pub fn load_gray_png(path: &Path) -> Result<Image> {
    let dynamic = image::open(path)
        .map_err(|e| Error::format(format!("{}: png decode: {e}", path.display())))?;
    let (width, height) = (dynamic.width() as usize, dynamic.height() as usize);
    let mut img = Image::new(width, height);
    match dynamic {
        image::DynamicImage::ImageLuma16(buf) => {
            for (i, p) in buf.pixels().enumerate() {
                img.data[i] = p.0[0] as f32 / u16::MAX as f32;
            }
        }
        other => {
            let buf = other.to_luma8();
            for (i, p) in buf.pixels().enumerate() {
                img.data[i] = p.0[0] as f32 / u8::MAX as f32;
            }
        }
    }
    Ok(img)
}

/// A loaded sequence: frame paths (decoded lazily), aligned annotation
/// records and odometry.
#[derive(Debug, Clone)]
pub struct SequenceData {
    pub frame_paths: Vec<PathBuf>,
    pub records: Vec<FrameRecord>,
    pub odometry: Vec<EgoPose>,
}

pub fn load_sequence(
    frames_dir: &Path,
    annotations_file: &Path,
    odometry_file: &Path,
) -> Result<SequenceData> {
    let mut frames: Vec<(usize, PathBuf)> = Vec::new();
    let entries = fs::read_dir(frames_dir).map_err(|e| Error::io(frames_dir, e))?;
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(frames_dir, e))?;
        let path = entry.path();
        if path.extension().and_then(|e| e.to_str()) != Some("png") {
            continue;
        }
        let stem = path
            .file_stem()
            .and_then(|s| s.to_str())
            .ok_or_else(|| Error::format(format!("{}: non-UTF8 frame name", path.display())))?;
        let index: usize = stem.parse().map_err(|_| {
            Error::format(format!(
                "{}: frame name is not a zero-padded index",
                path.display()
            ))
        })?;
        frames.push((index, path));
    }
    frames.sort();
    for (expected, (index, path)) in frames.iter().enumerate() {
        if *index != expected {
            return Err(Error::format(format!(
                "{}: missing frame {expected}",
                path.display()
            )));
        }
    }
    let frame_paths: Vec<PathBuf> = frames.into_iter().map(|(_, p)| p).collect();

    let records = read_annotations(annotations_file)?;
    for (expected, record) in records.iter().enumerate() {
        if record.frame_index != expected {
            return Err(Error::format(format!(
                "{}: missing frame {expected}",
                annotations_file.display()
            )));
        }
    }
    let odometry = read_odometry(odometry_file)?;

    if records.len() != frame_paths.len() || odometry.len() != frame_paths.len() {
        return Err(Error::consistency(format!(
            "{} frames, {} annotation records, {} odometry rows",
            frame_paths.len(),
            records.len(),
            odometry.len()
        )));
    }
    Ok(SequenceData {
        frame_paths,
        records,
        odometry,
    })
}

/// A dataset directory as written by the generator: manifest, frames,
/// annotations, odometry, optional scenario description and flow files.
#[derive(Debug, Clone)]
pub struct DatasetDir {
    pub root: PathBuf,
    pub manifest: DatasetManifest,
    pub sequence: SequenceData,
}

impl DatasetDir {
    pub fn scenario_path(&self) -> PathBuf {
        self.root.join("scenario.json")
    }

    pub fn flow_path(&self, frame_index: usize) -> PathBuf {
        self.root.join("flow").join(format!("{frame_index:06}.bin"))
    }
}

pub fn load_dataset_dir(root: &Path) -> Result<DatasetDir> {
    let manifest = read_manifest(&root.join("manifest.json"))?;
    let sequence = load_sequence(
        &root.join("frames"),
        &root.join("annotations.jsonl"),
        &root.join("odometry.csv"),
    )?;
    for record in &sequence.records {
        let expected = record.frame_index as f64 / manifest.frame_rate_hz;
        if (record.timestamp_s - expected).abs() > 1e-6 {
            return Err(Error::consistency(format!(
                "frame {} timestamp {} differs from {expected} implied by {} Hz",
                record.frame_index, record.timestamp_s, manifest.frame_rate_hz
            )));
        }
    }
    Ok(DatasetDir {
        root: root.to_path_buf(),
        manifest,
        sequence,
    })
}

/// Lists scenario subdirectories of a suite root in sorted order.
pub fn list_dataset_dirs(root: &Path) -> Result<Vec<PathBuf>> {
    let mut dirs = Vec::new();
    let entries = fs::read_dir(root).map_err(|e| Error::io(root, e))?;
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(root, e))?;
        let path = entry.path();
        if path.is_dir() && path.join("manifest.json").is_file() {
            dirs.push(path);
        }
    }
    dirs.sort();
    if dirs.is_empty() {
        return Err(Error::invalid(format!(
            "{}: no dataset directories (subdirs with manifest.json)",
            root.display()
        )));
    }
    Ok(dirs)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalize_centered_box() {
        let b = BoundingBox::new(320.0, 240.0, 64.0, 48.0);
        let n = normalize_box(&b, 640.0, 480.0).unwrap();
        assert_eq!(n.as_array(), [0.5, 0.5, 0.1, 0.1]);
    }

    #[test]
    fn normalize_round_trip_exact() {
        let b = BoundingBox::new(123.0, 45.0, 10.0, 20.0);
        let n = normalize_box(&b, 640.0, 480.0).unwrap();
        let back = denormalize_box(&n, 640.0, 480.0).unwrap();
        assert_eq!(back, b);
    }

    #[test]
    fn normalize_rejects_out_of_bounds_center() {
        let b = BoundingBox::new(700.0, 240.0, 64.0, 48.0);
        let err = normalize_box(&b, 640.0, 480.0).unwrap_err();
        assert!(matches!(err, Error::MalformedAnnotation(_)), "{err}");
    }

    #[test]
    fn normalize_rejects_bad_image_dims() {
        let b = BoundingBox::new(320.0, 240.0, 64.0, 48.0);
        let err = normalize_box(&b, 0.0, 480.0).unwrap_err();
        assert!(matches!(err, Error::InvalidArgument(_)), "{err}");
    }

    #[test]
    fn clamp_keeps_interior_box() {
        let b = BoundingBox::new(320.0, 240.0, 64.0, 48.0);
        assert_eq!(b.clamp_to_image(640.0, 480.0).unwrap(), b);
    }

    #[test]
    fn clamp_cuts_border_box() {
        let b = BoundingBox::new(630.0, 240.0, 40.0, 48.0);
        let c = b.clamp_to_image(640.0, 480.0).unwrap();
        assert_eq!((c.x0(), c.x1()), (610.0, 640.0));
        assert_eq!(c.w, 30.0);
        assert_eq!(c.h, 48.0);
    }

    #[test]
    fn window_counts_match_examples() {
        let cfg = WindowConfig::default();
        assert_eq!(slide_windows(90, &cfg).len(), 1);
        assert_eq!(slide_windows(90, &cfg)[0].t0, 59);
        assert_eq!(slide_windows(91, &cfg).len(), 2);
        assert_eq!(slide_windows(89, &cfg).len(), 0);
        assert_eq!(slide_windows(200, &cfg).len(), 111);
    }

    #[test]
    fn window_count_formula_sweep() {
        let cfg = WindowConfig::default();
        for len in 0..=200usize {
            let expected = (len + 1).saturating_sub(cfg.tau + cfg.horizon);
            assert_eq!(slide_windows(len, &cfg).len(), expected, "len={len}");
        }
    }

    #[test]
    fn window_span_ranges() {
        let cfg = WindowConfig {
            tau: 3,
            horizon: 2,
            frame_rate: 30.0,
        };
        let spans = slide_windows(5, &cfg);
        assert_eq!(spans.len(), 1);
        assert_eq!(spans[0].t0, 2);
        assert_eq!(spans[0].past_start(), 0);
        assert_eq!(spans[0].future_end(), 4);
    }

    #[test]
    fn folds_partition_and_cover() {
        let ids: Vec<String> = ["a", "b", "c", "d", "e"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let folds = make_leave_one_out_folds(&ids).unwrap();
        assert_eq!(folds.len(), 5);
        let mut tests: Vec<&str> = folds.iter().map(|f| f.test.as_str()).collect();
        tests.sort();
        assert_eq!(tests, ["a", "b", "c", "d", "e"]);
        for fold in &folds {
            assert_eq!(fold.train.len(), 4);
            assert!(!fold.train.contains(&fold.test));
        }
    }

    #[test]
    fn folds_minimal_pair() {
        let ids: Vec<String> = ["a", "b"].iter().map(|s| s.to_string()).collect();
        let folds = make_leave_one_out_folds(&ids).unwrap();
        assert_eq!(folds.len(), 2);
        assert_eq!(folds[0].train, vec!["b".to_string()]);
        assert_eq!(folds[0].test, "a");
        assert_eq!(folds[1].train, vec!["a".to_string()]);
        assert_eq!(folds[1].test, "b");
    }

    #[test]
    fn folds_reject_duplicates_and_singletons() {
        let dup: Vec<String> = ["a", "a"].iter().map(|s| s.to_string()).collect();
        assert!(make_leave_one_out_folds(&dup).is_err());
        let one: Vec<String> = vec!["a".to_string()];
        assert!(make_leave_one_out_folds(&one).is_err());
    }

    #[test]
    fn partition_trailing_remainder() {
        assert_eq!(
            partition_spans(10, 8),
            vec![
                (0, 1),
                (1, 2),
                (2, 3),
                (3, 4),
                (4, 5),
                (5, 6),
                (6, 8),
                (8, 10)
            ]
        );
        assert_eq!(partition_spans(6, 3), vec![(0, 2), (2, 4), (4, 6)]);
    }

    #[test]
    fn partition_degenerate_duplicates_nearest() {
        let spans = partition_spans(2, 4);
        assert_eq!(spans.len(), 4);
        for &(s, e) in &spans {
            assert_eq!(e, s + 1);
            assert!(s < 2);
        }
        assert!(spans.windows(2).all(|w| w[0].0 <= w[1].0));
    }

    #[test]
    fn annotations_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("annotations.jsonl");
        let records = vec![
            FrameRecord {
                sequence_id: "seq0".into(),
                frame_index: 0,
                timestamp_s: 0.0,
                boxes: vec![AnnotatedBox {
                    track_id: "deer0".into(),
                    bbox: BoundingBox::new(320.5, 200.25, 48.0, 36.0),
                    label: "deer".into(),
                    risk: RiskLevel::High,
                }],
            },
            FrameRecord {
                sequence_id: "seq0".into(),
                frame_index: 1,
                timestamp_s: 1.0 / 30.0,
                boxes: vec![],
            },
        ];
        write_annotations(&path, &records).unwrap();
        let back = read_annotations(&path).unwrap();
        assert_eq!(back, records);
    }

    #[test]
    fn annotations_missing_field_is_malformed() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("annotations.jsonl");
        fs::write(
            &path,
            "{\"sequence_id\":\"s\",\"frame_index\":0,\"boxes\":[]}\n",
        )
        .unwrap();
        let err = read_annotations(&path).unwrap_err();
        assert!(matches!(err, Error::MalformedAnnotation(_)), "{err}");
        assert!(err.to_string().contains(":1:"), "{err}");
    }

    #[test]
    fn odometry_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("odometry.csv");
        let poses = vec![
            EgoPose::new(0.0, 0.0, 0.0, 10.0),
            EgoPose::new(0.3333333333333333, -0.125, 0.01, 10.0),
        ];
        write_odometry(&path, &poses).unwrap();
        let back = read_odometry(&path).unwrap();
        assert_eq!(back, poses);
    }

    #[test]
    fn odometry_rejects_bad_header_and_rows() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("odometry.csv");
        fs::write(&path, "frame,x,y\n").unwrap();
        assert!(matches!(
            read_odometry(&path).unwrap_err(),
            Error::Format(_)
        ));
        fs::write(
            &path,
            format!("{ODOMETRY_HEADER}\n0,0.0,0.0,0.0,1.0\n1,abc,0.0,0.0,1.0\n"),
        )
        .unwrap();
        let err = read_odometry(&path).unwrap_err();
        assert!(err.to_string().contains("line 3"), "{err}");
    }

    #[test]
    fn odometry_rejects_index_gap() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("odometry.csv");
        fs::write(
            &path,
            format!("{ODOMETRY_HEADER}\n0,0,0,0,1\n2,0,0,0,1\n"),
        )
        .unwrap();
        let err = read_odometry(&path).unwrap_err();
        assert!(err.to_string().contains("expected frame_index 1"), "{err}");
    }

    #[test]
    fn manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.json");
        let manifest = DatasetManifest {
            image_width: 640,
            image_height: 480,
            frame_rate_hz: 30.0,
            hfov_deg: 50.0,
            set_id: "crossing-000".into(),
            mount_height_m: Some(0.75),
        };
        write_manifest(&path, &manifest).unwrap();
        assert_eq!(read_manifest(&path).unwrap(), manifest);
    }

    #[test]
    fn png_round_trip_quantized() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("frame.png");
        let mut img = Image::new(17, 9);
        for (i, v) in img.data.iter_mut().enumerate() {
            *v = (i % 256) as f32 / 255.0;
        }
        save_gray_png(&path, &img).unwrap();
        let back = load_gray_png(&path).unwrap();
        assert_eq!((back.width, back.height), (17, 9));
        for (a, b) in img.data.iter().zip(&back.data) {
            assert!((a - b).abs() < 0.5 / 255.0 + 1e-6);
        }
    }

    #[test]
    fn downsample_constant_and_mean() {
        let mut img = Image::new(4, 2);
        img.data = vec![0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0];
        let out = img.downsample(2, 1);
        assert_eq!(out.data, vec![0.5, 0.5]);
    }

    #[test]
    fn load_sequence_detects_gaps_and_mismatches() {
        let dir = tempfile::tempdir().unwrap();
        let frames = dir.path().join("frames");
        fs::create_dir(&frames).unwrap();
        let img = Image::new(4, 4);
        for i in [0usize, 1, 2] {
            save_gray_png(&frames.join(format!("{i:06}.png")), &img).unwrap();
        }
        let ann = dir.path().join("annotations.jsonl");
        let odo = dir.path().join("odometry.csv");
        let records: Vec<FrameRecord> = (0..3)
            .map(|i| FrameRecord {
                sequence_id: "s".into(),
                frame_index: i,
                timestamp_s: i as f64 / 30.0,
                boxes: vec![],
            })
            .collect();
        write_annotations(&ann, &records).unwrap();
        write_odometry(&odo, &vec![EgoPose::new(0.0, 0.0, 0.0, 0.0); 3]).unwrap();
        let seq = load_sequence(&frames, &ann, &odo).unwrap();
        assert_eq!(seq.frame_paths.len(), 3);

        // Odometry one row short: consistency error.
        write_odometry(&odo, &vec![EgoPose::new(0.0, 0.0, 0.0, 0.0); 2]).unwrap();
        assert!(matches!(
            load_sequence(&frames, &ann, &odo).unwrap_err(),
            Error::Consistency(_)
        ));
        write_odometry(&odo, &vec![EgoPose::new(0.0, 0.0, 0.0, 0.0); 3]).unwrap();

        // Annotation record for frame 1 missing: format error naming the gap.
        let gappy = vec![records[0].clone(), records[2].clone()];
        write_annotations(&ann, &gappy).unwrap();
        let err = load_sequence(&frames, &ann, &odo).unwrap_err();
        assert!(err.to_string().contains("missing frame 1"), "{err}");
        write_annotations(&ann, &records).unwrap();

        // Frame file gap: format error naming the gap.
        fs::remove_file(frames.join("000001.png")).unwrap();
        let err = load_sequence(&frames, &ann, &odo).unwrap_err();
        assert!(err.to_string().contains("missing frame 1"), "{err}");
    }
}
