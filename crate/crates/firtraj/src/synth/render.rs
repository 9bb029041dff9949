//! Rasterizer and dataset writer for synthetic scenarios: textured
//! ground/sky background with a road band, warm constant-intensity deer
//! silhouettes, tight annotation boxes, closed-form odometry, and
//! per-pixel ground-truth optical flow.

use std::path::Path;

use crate::data::{
    save_gray_png, write_annotations, write_manifest, write_odometry, AnnotatedBox, BoundingBox,
    DatasetManifest, FrameRecord, Image,
};
use crate::error::{Error, Result};
use crate::flow::{write_flow, FlowField};

use super::noise::{fbm2, value_noise1, value_noise2};
use super::{project_deer, risk_at, world_to_camera, write_scenario, DeerProjection, Scenario};
use crate::egomotion::wrap_angle;

const ROAD_HALF_WIDTH_M: f64 = 3.5;
const ROAD_EDGE_BLEND_M: f64 = 0.35;
const STRIP_EDGE_BLEND_M: f64 = 0.2;

/// Ground texture fades to a flat tone between these depths so sub-pixel
/// texture near the horizon cannot alias under the flow warp.
const TEXTURE_FADE_NEAR_M: f64 = 25.0;
const TEXTURE_FADE_FAR_M: f64 = 75.0;

const GRASS_FLAT: f32 = 0.41;
const ROAD_FLAT: f32 = 0.245;
const STRIP_FLAT: f32 = 0.54;

const SEED_ROAD: u64 = 0x726f6164;
const SEED_STRIP: u64 = 0x73747270;
const SEED_TREE_H: u64 = 0x74726565;
const SEED_TREE_T: u64 = 0x626172;
const SEED_FILL: u64 = 0x66696c6c;

fn smoothstep(edge0: f64, edge1: f64, x: f64) -> f64 {
    let t = ((x - edge0) / (edge1 - edge0)).clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

fn mix(a: f32, b: f32, t: f32) -> f32 {
    a + (b - a) * t
}

/// Per-frame, per-deer sprite placement: projected centroid and extents,
/// the occlusion row (image v below which the silhouette is hidden by
/// tall grass), and the fill intensity.
struct Sprite {
    proj: DeerProjection,
    v_mask: Option<f64>,
    fill: f32,
}

impl Sprite {
    /// Silhouette membership in sprite-normalized coordinates: a body
    /// ellipse topped by a smaller head ellipse, together spanning exactly
    /// [-1, 1] in both axes.
    fn covers(&self, u: f64, v: f64) -> bool {
        if let Some(m) = self.v_mask {
            if v > m {
                return false;
            }
        }
        let nx = (u - self.proj.u_c) / self.proj.half_w;
        let ny = (v - self.proj.v_c) / self.proj.half_h;
        let body = (nx / 1.0).powi(2) + ((ny - 0.15) / 0.85).powi(2) <= 1.0;
        if body {
            return true;
        }
        (nx / 0.45).powi(2) + ((ny + 0.75) / 0.25).powi(2) <= 1.0
    }

    /// Where a sprite-local point lands in the next frame, given the next
    /// frame's projection of the same deer.
    fn advect(&self, u: f64, v: f64, next: &DeerProjection) -> (f64, f64) {
        let nx = (u - self.proj.u_c) / self.proj.half_w;
        let ny = (v - self.proj.v_c) / self.proj.half_h;
        (
            next.u_c + nx * next.half_w,
            next.v_c + ny * next.half_h,
        )
    }
}

fn sprites_at(scenario: &Scenario, frame: usize) -> Vec<Option<Sprite>> {
    let cam = &scenario.camera;
    let f = cam.focal();
    (0..scenario.deer.len())
        .map(|i| {
            let proj = project_deer(scenario, i, frame)?;
            let ground = scenario.deer_position(i, frame);
            let lateral = scenario.ego.path_signed_lateral(ground);
            let v_mask = scenario
                .occluders
                .iter()
                .filter(|o| o.contains(lateral))
                .map(|o| cam.cy() + f * (cam.mount_height - o.mask_height) / proj.z)
                .fold(None, |acc: Option<f64>, v| {
                    Some(acc.map_or(v, |a: f64| a.min(v)))
                });
            let fill_noise = value_noise1(i as f64 * 7.3 + 0.5, scenario.seed ^ SEED_FILL);
            Some(Sprite {
                proj,
                v_mask,
                fill: 0.84 + 0.08 * fill_noise,
            })
        })
        .collect()
}

/// Background intensity at a pixel center, as a pure function of the
/// world: sky with a noisy treeline above the horizon, textured grass with
/// a darker road band and brighter tall-grass strips below it.
fn background_at(scenario: &Scenario, pose: &crate::data::EgoPose, u: f64, v: f64) -> f32 {
    let cam = &scenario.camera;
    let f = cam.focal();
    let seed = scenario.seed;
    let xn = (u - cam.cx()) / f;
    let dv = v - cam.cy();
    if dv <= 0.5 {
        // Sky: texture is a function of world azimuth and row only, so it
        // moves rigidly under ego yaw and is static under translation.
        let az = pose.yaw - xn.atan();
        let elevation = (-dv).max(0.0) / cam.cy();
        let tree_top = 0.22 + 0.14 * value_noise1(az * 2.2, seed ^ SEED_TREE_H) as f64;
        if elevation < tree_top {
            0.30 + 0.10 * value_noise2(az * 30.0, v * 0.08, seed ^ SEED_TREE_T)
        } else {
            0.055 + 0.02 * (1.0 - elevation as f32)
        }
    } else {
        let z = f * cam.mount_height / dv;
        let x = xn * z;
        let (sin, cos) = pose.yaw.sin_cos();
        let px = pose.x + z * cos + x * sin;
        let py = pose.y + z * sin - x * cos;
        let lateral = scenario.ego.path_signed_lateral([px, py]);

        let fade = smoothstep(TEXTURE_FADE_FAR_M, TEXTURE_FADE_NEAR_M, z) as f32;
        let grass_tex = 0.30 + 0.22 * fbm2(px * 1.7, py * 1.7, seed);
        let grass = mix(GRASS_FLAT, grass_tex, fade);

        let road_tex = 0.20 + 0.09 * fbm2(px * 1.1, py * 1.1, seed ^ SEED_ROAD);
        let road = mix(ROAD_FLAT, road_tex, fade);

        let mut ground = {
            let w = smoothstep(
                ROAD_HALF_WIDTH_M + ROAD_EDGE_BLEND_M,
                ROAD_HALF_WIDTH_M - ROAD_EDGE_BLEND_M,
                lateral.abs(),
            ) as f32;
            mix(grass, road, w)
        };
        for occ in &scenario.occluders {
            let lo = occ.lat0.min(occ.lat1);
            let hi = occ.lat0.max(occ.lat1);
            let inside = smoothstep(lo - STRIP_EDGE_BLEND_M, lo + STRIP_EDGE_BLEND_M, lateral)
                * smoothstep(hi + STRIP_EDGE_BLEND_M, hi - STRIP_EDGE_BLEND_M, lateral);
            if inside > 0.0 {
                let strip_tex = 0.46 + 0.16 * fbm2(px * 2.3, py * 2.3, seed ^ SEED_STRIP);
                let strip = mix(STRIP_FLAT, strip_tex, fade);
                ground = mix(ground, strip, inside as f32);
            }
        }
        ground
    }
}

/// 7-tap Gaussian (sigma 1) used to soften sprite edges.
const BLUR_TAPS: [f32; 7] = [
    0.004_433_05,
    0.054_005_58,
    0.242_036_35,
    0.399_050_03,
    0.242_036_35,
    0.054_005_58,
    0.004_433_05,
];

/// Renders one frame and its annotations. Boxes tightly bound the visible
/// (post-occlusion) silhouette, rasterized at pixel resolution.
pub fn render_frame(scenario: &Scenario, frame: usize) -> (Image, Vec<AnnotatedBox>) {
    let cam = &scenario.camera;
    let (w, h) = (cam.width, cam.height);
    let pose = scenario.ego_pose(frame);
    let mut img = Image::new(w, h);
    for y in 0..h {
        let v = y as f64 + 0.5;
        for x in 0..w {
            let u = x as f64 + 0.5;
            img.set(x, y, background_at(scenario, &pose, u, v));
        }
    }

    let mut boxes = Vec::new();
    for (i, sprite) in sprites_at(scenario, frame).into_iter().enumerate() {
        let Some(sprite) = sprite else { continue };
        let p = &sprite.proj;
        let pad = 4.0;
        let x0 = ((p.u_c - p.half_w - pad).floor().max(0.0)) as usize;
        let x1 = ((p.u_c + p.half_w + pad).ceil().min(w as f64)) as usize;
        let y0 = ((p.v_c - p.half_h - pad).floor().max(0.0)) as usize;
        let y1 = ((p.v_c + p.half_h + pad).ceil().min(h as f64)) as usize;
        if x0 >= x1 || y0 >= y1 {
            continue;
        }
        let (bw, bh) = (x1 - x0, y1 - y0);

        // 2x2 supersampled coverage, occlusion applied before the blur so
        // the grass edge is as soft as the silhouette edge.
        let mut alpha = vec![0.0f32; bw * bh];
        let mut bounds: Option<(usize, usize, usize, usize)> = None;
        for y in y0..y1 {
            for x in x0..x1 {
                let mut cover = 0.0f32;
                for (su, sv) in [(0.25, 0.25), (0.75, 0.25), (0.25, 0.75), (0.75, 0.75)] {
                    if sprite.covers(x as f64 + su, y as f64 + sv) {
                        cover += 0.25;
                    }
                }
                alpha[(y - y0) * bw + (x - x0)] = cover;
                if sprite.covers(x as f64 + 0.5, y as f64 + 0.5) {
                    bounds = Some(match bounds {
                        None => (x, x, y, y),
                        Some((a, b, c, d)) => (a.min(x), b.max(x), c.min(y), d.max(y)),
                    });
                }
            }
        }

        let mut blurred = vec![0.0f32; bw * bh];
        for y in 0..bh {
            for x in 0..bw {
                let mut acc = 0.0;
                for (k, tap) in BLUR_TAPS.iter().enumerate() {
                    let xx = (x as isize + k as isize - 3).clamp(0, bw as isize - 1) as usize;
                    acc += tap * alpha[y * bw + xx];
                }
                blurred[y * bw + x] = acc;
            }
        }
        for y in 0..bh {
            for x in 0..bw {
                let mut acc = 0.0;
                for (k, tap) in BLUR_TAPS.iter().enumerate() {
                    let yy = (y as isize + k as isize - 3).clamp(0, bh as isize - 1) as usize;
                    acc += tap * blurred[yy * bw + x];
                }
                if acc > 0.0 {
                    let bg = img.get(x0 + x, y0 + y);
                    img.set(x0 + x, y0 + y, bg + (sprite.fill - bg) * acc.min(1.0));
                }
            }
        }

        if let Some((bx0, bx1, by0, by1)) = bounds {
            let bbox = BoundingBox::new(
                (bx0 + bx1 + 1) as f64 / 2.0,
                (by0 + by1 + 1) as f64 / 2.0,
                (bx1 - bx0 + 1) as f64,
                (by1 - by0 + 1) as f64,
            );
            if bbox.validate(w as f64, h as f64).is_ok() {
                boxes.push(AnnotatedBox {
                    track_id: format!("deer-{i}"),
                    bbox,
                    label: "deer".to_string(),
                    risk: risk_at(scenario, i, frame),
                });
            }
        }
    }
    (img, boxes)
}

/// Ground-truth optical flow from `frame` to `frame + 1`: sprite-local
/// advection on deer pixels, exact plane reprojection on ground pixels,
/// pure yaw rotation on sky pixels.
pub fn gt_flow(scenario: &Scenario, frame: usize) -> Result<FlowField> {
    if frame + 1 >= scenario.duration {
        return Err(Error::invalid(format!(
            "flow needs frames {} and {}, duration is {}",
            frame,
            frame + 1,
            scenario.duration
        )));
    }
    let cam = &scenario.camera;
    let f = cam.focal();
    let (w, h) = (cam.width, cam.height);
    let pose0 = scenario.ego_pose(frame);
    let pose1 = scenario.ego_pose(frame + 1);
    let dyaw = wrap_angle(pose1.yaw - pose0.yaw);

    let sprites = sprites_at(scenario, frame);
    let next: Vec<Option<DeerProjection>> = (0..scenario.deer.len())
        .map(|i| project_deer(scenario, i, frame + 1))
        .collect();

    let mut field = FlowField::zeros(w, h);
    for y in 0..h {
        let v = y as f64 + 0.5;
        for x in 0..w {
            let u = x as f64 + 0.5;
            let mut uv = None;
            for (sprite, next_proj) in sprites.iter().zip(&next) {
                if let (Some(s), Some(n)) = (sprite, next_proj) {
                    if s.covers(u, v) {
                        uv = Some(s.advect(u, v, n));
                        break;
                    }
                }
            }
            let (u1, v1) = match uv {
                Some(t) => t,
                None if v - cam.cy() > 0.5 => {
                    let z = f * cam.mount_height / (v - cam.cy());
                    let xn = (u - cam.cx()) / f;
                    let (sin, cos) = pose0.yaw.sin_cos();
                    let px = pose0.x + z * cos + xn * z * sin;
                    let py = pose0.y + z * sin - xn * z * cos;
                    let c1 = world_to_camera(&pose1, cam.mount_height, [px, py, 0.0]);
                    match cam.project(c1) {
                        Ok(t) => t,
                        Err(_) => (u, v),
                    }
                }
                None => {
                    // Sky rows: the ray's world azimuth is fixed, so the
                    // pixel shifts by the yaw change only.
                    let xn = (u - cam.cx()) / f;
                    (cam.cx() + f * (xn.atan() + dyaw).tan(), v)
                }
            };
            field.u[y * w + x] = (u1 - u) as f32;
            field.v[y * w + x] = (v1 - v) as f32;
        }
    }
    Ok(field)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GenerateSummary {
    pub frames: usize,
    pub boxes: usize,
    pub warnings: Vec<String>,
}

/// Renders a scenario into a dataset directory: `manifest.json`,
/// `frames/%06d.png`, `annotations.jsonl`, `odometry.csv`,
/// `scenario.json`, and with `with_flow` also `flow/%06d.bin` for each
/// consecutive frame pair. Identical (scenario, seed) produce identical
/// bytes.
pub fn generate(scenario: &Scenario, out_dir: &Path, with_flow: bool) -> Result<GenerateSummary> {
    scenario.validate()?;
    let frames_dir = out_dir.join("frames");
    std::fs::create_dir_all(&frames_dir).map_err(|e| Error::io(&frames_dir, e))?;
    if with_flow {
        let flow_dir = out_dir.join("flow");
        std::fs::create_dir_all(&flow_dir).map_err(|e| Error::io(&flow_dir, e))?;
    }

    let mut records = Vec::with_capacity(scenario.duration);
    let mut poses = Vec::with_capacity(scenario.duration);
    let mut seen = vec![false; scenario.deer.len()];
    let mut total_boxes = 0usize;
    for t in 0..scenario.duration {
        let (img, boxes) = render_frame(scenario, t);
        save_gray_png(&frames_dir.join(format!("{t:06}.png")), &img)?;
        for b in &boxes {
            if let Some(idx) = b.track_id.strip_prefix("deer-").and_then(|s| s.parse::<usize>().ok())
            {
                seen[idx] = true;
            }
        }
        total_boxes += boxes.len();
        records.push(FrameRecord {
            sequence_id: scenario.name.clone(),
            frame_index: t,
            timestamp_s: scenario.time_of(t),
            boxes,
        });
        poses.push(scenario.ego_pose(t));

        if with_flow && t + 1 < scenario.duration {
            let field = gt_flow(scenario, t)?;
            write_flow(&out_dir.join("flow").join(format!("{t:06}.bin")), &field)?;
        }
    }

    write_annotations(&out_dir.join("annotations.jsonl"), &records)?;
    write_odometry(&out_dir.join("odometry.csv"), &poses)?;
    write_manifest(
        &out_dir.join("manifest.json"),
        &DatasetManifest {
            image_width: scenario.camera.width,
            image_height: scenario.camera.height,
            frame_rate_hz: scenario.frame_rate,
            hfov_deg: scenario.camera.hfov_deg,
            set_id: scenario.name.clone(),
            mount_height_m: Some(scenario.camera.mount_height),
        },
    )?;
    write_scenario(&out_dir.join("scenario.json"), scenario)?;

    let warnings = seen
        .iter()
        .enumerate()
        .filter(|(_, s)| !**s)
        .map(|(i, _)| format!("deer {i} is never visible in {}", scenario.name))
        .collect();
    Ok(GenerateSummary {
        frames: scenario.duration,
        boxes: total_boxes,
        warnings,
    })
}
