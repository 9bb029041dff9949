//! Dense optical flow (block matching), the FLW1 flow file format, and ROI
//! pooling of flow inside a box.
//!
//! FLW1 layout: 16-byte header (magic `FLW1`, width u32 LE, height u32 LE,
//! reserved u32 = 0), then the full `u` plane and the full `v` plane, each
//! row-major little-endian f32. Displacements are in pixels, from frame t
//! to frame t+1, sampled on frame t's pixel grid.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::data::{partition_spans, BoundingBox, Image};
use crate::error::{Error, Result};

pub const FLW1_MAGIC: [u8; 4] = *b"FLW1";

#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    pub width: usize,
    pub height: usize,
    pub u: Vec<f32>,
    pub v: Vec<f32>,
}

impl FlowField {
    pub fn zeros(width: usize, height: usize) -> Self {
        FlowField {
            width,
            height,
            u: vec![0.0; width * height],
            v: vec![0.0; width * height],
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> (f32, f32) {
        let i = y * self.width + x;
        (self.u[i], self.v[i])
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, u: f32, v: f32) {
        let i = y * self.width + x;
        self.u[i] = u;
        self.v[i] = v;
    }
}

pub fn write_flow(path: &Path, flow: &FlowField) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut header = Vec::with_capacity(16);
    header.extend_from_slice(&FLW1_MAGIC);
    header.extend_from_slice(&(flow.width as u32).to_le_bytes());
    header.extend_from_slice(&(flow.height as u32).to_le_bytes());
    header.extend_from_slice(&0u32.to_le_bytes());
    w.write_all(&header).map_err(|e| Error::io(path, e))?;
    let mut buf = Vec::with_capacity(flow.u.len() * 4);
    for plane in [&flow.u, &flow.v] {
        buf.clear();
        for &val in plane {
            buf.extend_from_slice(&val.to_le_bytes());
        }
        w.write_all(&buf).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_flow(path: &Path) -> Result<FlowField> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let mut header = [0u8; 16];
    r.read_exact(&mut header)
        .map_err(|_| Error::format(format!("{}: truncated FLW1 header", path.display())))?;
    if header[0..4] != FLW1_MAGIC {
        return Err(Error::format(format!(
            "{}: bad magic {:02x?}, expected FLW1",
            path.display(),
            &header[0..4]
        )));
    }
    let width = u32::from_le_bytes(header[4..8].try_into().unwrap()) as usize;
    let height = u32::from_le_bytes(header[8..12].try_into().unwrap()) as usize;
    if width == 0 || height == 0 || width > 1 << 15 || height > 1 << 15 {
        return Err(Error::format(format!(
            "{}: implausible dimensions {width}x{height}",
            path.display()
        )));
    }
    let n = width * height;
    let mut bytes = vec![0u8; n * 8];
    r.read_exact(&mut bytes)
        .map_err(|_| Error::format(format!("{}: truncated FLW1 payload", path.display())))?;
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing).map_err(|e| Error::io(path, e))? != 0 {
        return Err(Error::format(format!(
            "{}: trailing bytes after FLW1 payload",
            path.display()
        )));
    }
    let mut flow = FlowField::zeros(width, height);
    for i in 0..n {
        flow.u[i] = f32::from_le_bytes(bytes[i * 4..i * 4 + 4].try_into().unwrap());
    }
    for i in 0..n {
        let o = (n + i) * 4;
        flow.v[i] = f32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    }
    Ok(flow)
}

/// Reads a flow file and checks its dimensions against the expected frame
/// size (e.g. from the dataset manifest).
pub fn read_flow_checked(path: &Path, width: usize, height: usize) -> Result<FlowField> {
    let flow = read_flow(path)?;
    if flow.width != width || flow.height != height {
        return Err(Error::format(format!(
            "{}: flow is {}x{}, frames are {width}x{height}",
            path.display(),
            flow.width,
            flow.height
        )));
    }
    Ok(flow)
}

/// Where per-pair flow comes from during window assembly.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FlowSource {
    /// Exact flow: FLW1 files when present, otherwise regenerated from the
    /// scenario description.
    GroundTruth,
    BlockMatching,
}

/// Mean flow per cell of a G x G grid over a box, plus a degeneracy flag
/// set when the box had fewer than G pixel rows or columns and cells had to
/// duplicate pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct PooledFlow {
    pub g: usize,
    /// Layout: `grid[(row * g + col) * 2 + c]`, c = 0 for u, 1 for v.
    pub grid: Vec<f32>,
    pub degenerate: bool,
}

pub fn roi_pool(flow: &FlowField, bbox: &BoundingBox, g: usize) -> Result<PooledFlow> {
    if g == 0 {
        return Err(Error::invalid("roi grid size must be >= 1"));
    }
    let clamped = bbox.clamp_to_image(flow.width as f64, flow.height as f64)?;
    let x0 = clamped.x0().floor().max(0.0) as usize;
    let y0 = clamped.y0().floor().max(0.0) as usize;
    let x1 = (clamped.x1().ceil() as usize).clamp(x0 + 1, flow.width);
    let y1 = (clamped.y1().ceil() as usize).clamp(y0 + 1, flow.height);
    let (bw, bh) = (x1 - x0, y1 - y0);
    let degenerate = bw < g || bh < g;
    let xs = partition_spans(bw, g);
    let ys = partition_spans(bh, g);
    let mut grid = vec![0.0f32; g * g * 2];
    for (j, &(cy0, cy1)) in ys.iter().enumerate() {
        for (i, &(cx0, cx1)) in xs.iter().enumerate() {
            let mut su = 0.0f64;
            let mut sv = 0.0f64;
            for y in cy0..cy1 {
                for x in cx0..cx1 {
                    let (u, v) = flow.get(x0 + x, y0 + y);
                    su += u as f64;
                    sv += v as f64;
                }
            }
            let n = ((cy1 - cy0) * (cx1 - cx0)) as f64;
            grid[(j * g + i) * 2] = (su / n) as f32;
            grid[(j * g + i) * 2 + 1] = (sv / n) as f32;
        }
    }
    Ok(PooledFlow {
        g,
        grid,
        degenerate,
    })
}

#[derive(Debug, Clone, Copy)]
pub struct BlockMatchParams {
    pub block: usize,
    pub stride: usize,
    pub radius: isize,
}

impl Default for BlockMatchParams {
    fn default() -> Self {
        BlockMatchParams {
            block: 8,
            stride: 4,
            radius: 8,
        }
    }
}

/// Block-matching flow: per block, the displacement minimizing the sum of
/// absolute differences over a bounded search window; ties broken by
/// smaller displacement magnitude, then lexicographic (u, v). The sparse
/// block-center grid is bilinearly upsampled to dense resolution.
pub fn estimate_flow(a: &Image, b: &Image, params: &BlockMatchParams) -> Result<FlowField> {
    if a.width != b.width || a.height != b.height {
        return Err(Error::invalid(format!(
            "frame sizes differ: {}x{} vs {}x{}",
            a.width, a.height, b.width, b.height
        )));
    }
    let bs = params.block;
    let r = params.radius;
    if a.width < bs || a.height < bs {
        return Err(Error::invalid("frame smaller than one block"));
    }
    let nbx = (a.width - bs) / params.stride + 1;
    let nby = (a.height - bs) / params.stride + 1;
    let mut bu = vec![0.0f32; nbx * nby];
    let mut bv = vec![0.0f32; nbx * nby];

    for by in 0..nby {
        let y0 = by * params.stride;
        for bx in 0..nbx {
            let x0 = bx * params.stride;
            let mut best = (f64::INFINITY, i64::MAX, isize::MAX, isize::MAX);
            let mut best_d = (0isize, 0isize);
            for dv in -r..=r {
                let ty = y0 as isize + dv;
                if ty < 0 || ty as usize + bs > a.height {
                    continue;
                }
                for du in -r..=r {
                    let tx = x0 as isize + du;
                    if tx < 0 || tx as usize + bs > a.width {
                        continue;
                    }
                    let mut sad = 0.0f64;
                    for row in 0..bs {
                        let ai = (y0 + row) * a.width + x0;
                        let bi = (ty as usize + row) * b.width + tx as usize;
                        for col in 0..bs {
                            sad += (a.data[ai + col] - b.data[bi + col]).abs() as f64;
                        }
                    }
                    let key = (sad, (du * du + dv * dv) as i64, du, dv);
                    if key < best {
                        best = key;
                        best_d = (du, dv);
                    }
                }
            }
            bu[by * nbx + bx] = best_d.0 as f32;
            bv[by * nbx + bx] = best_d.1 as f32;
        }
    }

    // Bilinear upsampling from block centers, clamped at the borders.
    let half = (bs / 2) as f32;
    let stride = params.stride as f32;
    let mut flow = FlowField::zeros(a.width, a.height);
    for y in 0..a.height {
        let gy = ((y as f32 - half) / stride).clamp(0.0, (nby - 1) as f32);
        let jy = (gy.floor() as usize).min(nby - 1);
        let jy1 = (jy + 1).min(nby - 1);
        let fy = gy - jy as f32;
        for x in 0..a.width {
            let gx = ((x as f32 - half) / stride).clamp(0.0, (nbx - 1) as f32);
            let jx = (gx.floor() as usize).min(nbx - 1);
            let jx1 = (jx + 1).min(nbx - 1);
            let fx = gx - jx as f32;
            let lerp = |p: &[f32]| -> f32 {
                let top = p[jy * nbx + jx] * (1.0 - fx) + p[jy * nbx + jx1] * fx;
                let bot = p[jy1 * nbx + jx] * (1.0 - fx) + p[jy1 * nbx + jx1] * fx;
                top * (1.0 - fy) + bot * fy
            };
            flow.set(x, y, lerp(&bu), lerp(&bv));
        }
    }
    Ok(flow)
}
