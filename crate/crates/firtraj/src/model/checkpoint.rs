//! Checkpoint container: a fixed magic and version, an embedded JSON
//! configuration, then named tensor groups as little-endian f32 payloads
//! until end of file.

use std::path::Path;

use crate::error::{Error, Result};

use super::net::{group_shapes, ModelConfig, ModelParams, ParamGroup};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"TRJ1";
pub const CHECKPOINT_VERSION: u32 = 1;

const MAX_RANK: usize = 8;

fn push_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

/// Serializes any configuration string plus tensor groups into the
/// container; the model wrappers below fix the config to `ModelConfig`.
pub fn save_raw(path: &Path, config_json: &str, groups: &[ParamGroup]) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    push_u32(&mut buf, CHECKPOINT_VERSION);
    let cfg_bytes = config_json.as_bytes();
    push_u32(&mut buf, cfg_bytes.len() as u32);
    buf.extend_from_slice(cfg_bytes);
    for g in groups {
        let numel: usize = g.shape.iter().product();
        if numel != g.data.len() {
            return Err(Error::consistency(format!(
                "group {} has {} values but shape {:?}",
                g.name,
                g.data.len(),
                g.shape
            )));
        }
        push_u32(&mut buf, g.name.len() as u32);
        buf.extend_from_slice(g.name.as_bytes());
        push_u32(&mut buf, g.shape.len() as u32);
        for &d in &g.shape {
            push_u32(&mut buf, d as u32);
        }
        for &v in &g.data {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

struct Cursor<'a> {
    path: &'a Path,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format(format!(
                "{}: truncated reading {what} ({} bytes left, {n} needed)",
                self.path.display(),
                self.bytes.len() - self.pos
            )));
        }
        let slice = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn done(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

pub fn load_raw(path: &Path) -> Result<(String, Vec<ParamGroup>)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut cur = Cursor {
        path,
        bytes: &bytes,
        pos: 0,
    };
    let magic = cur.take(4, "magic")?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::format(format!(
            "{}: bad magic {magic:?}, expected {CHECKPOINT_MAGIC:?}",
            path.display()
        )));
    }
    let version = cur.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::format(format!(
            "{}: unsupported checkpoint version {version}",
            path.display()
        )));
    }
    let cfg_len = cur.u32("config length")? as usize;
    let cfg_bytes = cur.take(cfg_len, "config JSON")?;
    let config_json = std::str::from_utf8(cfg_bytes)
        .map_err(|e| Error::format(format!("{}: config is not UTF-8: {e}", path.display())))?
        .to_string();

    let mut groups = Vec::new();
    while !cur.done() {
        let name_len = cur.u32("group name length")? as usize;
        let name = std::str::from_utf8(cur.take(name_len, "group name")?)
            .map_err(|e| {
                Error::format(format!("{}: group name is not UTF-8: {e}", path.display()))
            })?
            .to_string();
        let rank = cur.u32("group rank")? as usize;
        if rank == 0 || rank > MAX_RANK {
            return Err(Error::format(format!(
                "{}: group {name} has implausible rank {rank}",
                path.display()
            )));
        }
        let mut shape = Vec::with_capacity(rank);
        let mut numel = 1usize;
        for _ in 0..rank {
            let d = cur.u32("group dimension")? as usize;
            numel = numel.checked_mul(d).ok_or_else(|| {
                Error::format(format!("{}: group {name} overflows", path.display()))
            })?;
            shape.push(d);
        }
        let payload = cur.take(numel * 4, "group payload")?;
        let data = payload
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
            .collect();
        groups.push(ParamGroup { name, shape, data });
    }
    Ok((config_json, groups))
}

pub fn save_model(path: &Path, cfg: &ModelConfig, params: &ModelParams) -> Result<()> {
    cfg.validate()?;
    let json = serde_json::to_string(cfg).expect("config serializes");
    save_raw(path, &json, &params.groups)
}

/// Loads and fully validates a forecaster checkpoint: the embedded config
/// must parse, and the stored groups must match its expected layout
/// exactly.
pub fn load_model(path: &Path) -> Result<(ModelConfig, ModelParams)> {
    let (json, groups) = load_raw(path)?;
    let cfg: ModelConfig =
        serde_json::from_str(&json).map_err(|e| Error::json(path, e))?;
    let expected = group_shapes(&cfg)?;
    if groups.len() != expected.len() {
        return Err(Error::consistency(format!(
            "{}: {} parameter groups stored, config implies {}",
            path.display(),
            groups.len(),
            expected.len()
        )));
    }
    for (g, (name, shape)) in groups.iter().zip(&expected) {
        if &g.name != name || &g.shape != shape {
            return Err(Error::consistency(format!(
                "{}: group {} with shape {:?} where {name} {shape:?} was expected",
                path.display(),
                g.name,
                g.shape
            )));
        }
    }
    Ok((cfg, ModelParams { groups }))
}
