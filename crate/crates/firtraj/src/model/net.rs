//! The forecaster network: per-stream encoders over the observation
//! window, MLP fusion, and a stochastic recurrent decoder emitting S
//! residual box trajectories, plus the best-of-K variety loss.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{EgoPose, NormalizedBox};
use crate::error::{Error, Result};
use crate::flow::PooledFlow;

use super::layers::{
    convlstm_sequence, init_uniform, lstm_cell, lstm_sequence, GateParams,
};
use super::tape::{Real, Tape, Tensor, Var};
use super::windows::PreparedWindow;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Precision {
    #[serde(rename = "f32")]
    F32,
    #[serde(rename = "f64")]
    F64,
}

/// Which input streams feed fusion / the decoder. Location (past boxes)
/// is the backbone and is always on; motion, context, and ego are the
/// ablation axes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StreamSet {
    pub use_location: bool,
    pub use_motion: bool,
    pub use_context: bool,
    pub use_ego: bool,
}

/// Named stream combinations evaluated by the ablation table.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    Baseline,
    Lcv,
    Lmv,
    Lmc,
    Lmcv,
}

pub const ALL_PRESETS: [Preset; 5] = [
    Preset::Baseline,
    Preset::Lcv,
    Preset::Lmv,
    Preset::Lmc,
    Preset::Lmcv,
];

impl Preset {
    pub fn streams(self) -> StreamSet {
        let (m, c, v) = match self {
            Preset::Baseline => (false, false, false),
            Preset::Lcv => (false, true, true),
            Preset::Lmv => (true, false, true),
            Preset::Lmc => (true, true, false),
            Preset::Lmcv => (true, true, true),
        };
        StreamSet {
            use_location: true,
            use_motion: m,
            use_context: c,
            use_ego: v,
        }
    }
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(Preset::Baseline),
            "lcv" => Ok(Preset::Lcv),
            "lmv" => Ok(Preset::Lmv),
            "lmc" => Ok(Preset::Lmc),
            "lmcv" => Ok(Preset::Lmcv),
            other => Err(Error::invalid(format!(
                "unknown preset `{other}` (expected baseline|lcv|lmv|lmc|lmcv)"
            ))),
        }
    }
}

impl std::fmt::Display for Preset {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Preset::Baseline => "baseline",
            Preset::Lcv => "lcv",
            Preset::Lmv => "lmv",
            Preset::Lmc => "lmc",
            Preset::Lmcv => "lmcv",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub tau: usize,
    pub horizon: usize,
    pub samples: usize,
    pub best_of: usize,
    pub noise_dim: usize,
    pub traj_hidden: usize,
    pub convlstm_channels: usize,
    pub convlstm_kernel: usize,
    pub fusion_widths: Vec<usize>,
    pub decoder_hidden: usize,
    pub context_width: usize,
    pub context_height: usize,
    pub roi_grid: usize,
    pub streams: StreamSet,
    pub precision: Precision,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            tau: 60,
            horizon: 30,
            samples: 10,
            best_of: 5,
            noise_dim: 16,
            traj_hidden: 128,
            convlstm_channels: 16,
            convlstm_kernel: 3,
            fusion_widths: vec![256, 128],
            decoder_hidden: 128,
            context_width: 80,
            context_height: 60,
            roi_grid: 8,
            streams: Preset::Lmcv.streams(),
            precision: Precision::F32,
        }
    }
}

impl ModelConfig {
    pub fn with_preset(preset: Preset) -> Self {
        ModelConfig {
            streams: preset.streams(),
            ..Default::default()
        }
    }

    /// Small 64-bit configuration for finite-difference verification.
    pub fn gradcheck_preset() -> Self {
        ModelConfig {
            tau: 5,
            horizon: 3,
            samples: 2,
            best_of: 1,
            noise_dim: 4,
            traj_hidden: 8,
            convlstm_channels: 3,
            convlstm_kernel: 3,
            fusion_widths: vec![10, 8],
            decoder_hidden: 8,
            context_width: 16,
            context_height: 12,
            roi_grid: 4,
            streams: Preset::Lmcv.streams(),
            precision: Precision::F64,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.streams.use_location {
            return Err(Error::config("the location stream cannot be disabled"));
        }
        if self.best_of == 0 || self.samples < self.best_of {
            return Err(Error::config(format!(
                "need samples >= best_of >= 1, got S={} K={}",
                self.samples, self.best_of
            )));
        }
        if self.tau == 0 || self.horizon == 0 {
            return Err(Error::config("tau and horizon must be >= 1"));
        }
        if self.fusion_widths.is_empty() {
            return Err(Error::config("fusion_widths must be nonempty"));
        }
        if self.convlstm_kernel % 2 == 0 {
            return Err(Error::config("convlstm kernel must be odd"));
        }
        if self.context_width == 0 || self.context_height == 0 || self.roi_grid == 0 {
            return Err(Error::config("context size and roi grid must be positive"));
        }
        Ok(())
    }

    /// Width of the concatenated encoder outputs entering fusion.
    pub fn fusion_input_width(&self) -> usize {
        let mut w = self.traj_hidden;
        if self.streams.use_motion {
            w += self.convlstm_channels;
        }
        if self.streams.use_context {
            w += self.convlstm_channels;
        }
        w
    }

    /// Per-step decoder input width: previous box plus optional ego
    /// features.
    fn decoder_input_width(&self) -> usize {
        4 + if self.streams.use_ego { 3 } else { 0 }
    }
}

/// One model input: the observed past of a single track plus the aligned
/// scene and ego data.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationWindow {
    pub past_boxes: Vec<NormalizedBox>,
    pub pooled_flow: Vec<PooledFlow>,
    pub context: Vec<Vec<f32>>,
    pub ego_history: Vec<EgoPose>,
    pub t0: usize,
}

impl ObservationWindow {
    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        if self.past_boxes.len() != cfg.tau {
            return Err(Error::invalid(format!(
                "window has {} past boxes, config tau is {}",
                self.past_boxes.len(),
                cfg.tau
            )));
        }
        if cfg.streams.use_motion && self.pooled_flow.len() != cfg.tau - 1 {
            return Err(Error::invalid(format!(
                "window has {} pooled-flow steps, expected tau-1 = {}",
                self.pooled_flow.len(),
                cfg.tau - 1
            )));
        }
        for p in &self.pooled_flow {
            if p.g != cfg.roi_grid {
                return Err(Error::invalid(format!(
                    "pooled flow grid {} does not match config {}",
                    p.g, cfg.roi_grid
                )));
            }
        }
        if cfg.streams.use_context && self.context.len() != cfg.tau {
            return Err(Error::invalid(format!(
                "window has {} context frames, expected tau = {}",
                self.context.len(),
                cfg.tau
            )));
        }
        let ctx_len = cfg.context_width * cfg.context_height;
        for c in &self.context {
            if c.len() != ctx_len {
                return Err(Error::invalid(format!(
                    "context frame has {} pixels, config wants {}x{}",
                    c.len(),
                    cfg.context_width,
                    cfg.context_height
                )));
            }
        }
        let finite = self
            .past_boxes
            .iter()
            .flat_map(|b| b.as_array())
            .all(|v| v.is_finite())
            && self
                .pooled_flow
                .iter()
                .flat_map(|p| p.grid.iter())
                .all(|v| v.is_finite())
            && self
                .context
                .iter()
                .flat_map(|c| c.iter())
                .all(|v| v.is_finite());
        if !finite {
            return Err(Error::invalid("window contains non-finite values"));
        }
        Ok(())
    }
}

/// S sampled future box sequences, each H steps.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryForecast {
    pub samples: Vec<Vec<NormalizedBox>>,
}

/// One named parameter group; the master copy is f64 and is narrowed to
/// the configured precision when a graph is built.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGroup {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub groups: Vec<ParamGroup>,
}

impl ModelParams {
    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.groups.iter().position(|g| g.name == name)
    }

    pub fn group(&self, name: &str) -> Option<&ParamGroup> {
        self.index_of(name).map(|i| &self.groups[i])
    }

    pub fn all_finite(&self) -> bool {
        self.groups
            .iter()
            .all(|g| g.data.iter().all(|v| v.is_finite()))
    }
}

struct GroupSpec {
    name: &'static str,
    shape: Vec<usize>,
    fan_in: usize,
}

fn group_specs(cfg: &ModelConfig) -> Vec<GroupSpec> {
    let mut specs = Vec::new();
    let mut gate = |name: &'static str, input: usize, hidden: usize| {
        specs.push(GroupSpec {
            name,
            shape: vec![input + hidden, 4 * hidden],
            fan_in: input + hidden,
        });
    };
    let th = cfg.traj_hidden;
    gate("traj.l0.w", 4, th);
    gate("traj.l1.w", th, th);

    let cc = cfg.convlstm_channels;
    let k = cfg.convlstm_kernel;
    let mut conv_gate = |name: &'static str, in_ch: usize| {
        specs.push(GroupSpec {
            name,
            shape: vec![4 * cc, in_ch + cc, k, k],
            fan_in: (in_ch + cc) * k * k,
        });
    };
    if cfg.streams.use_motion {
        conv_gate("motion.l0.w", 2);
        conv_gate("motion.l1.w", cc);
    }
    if cfg.streams.use_context {
        conv_gate("context.l0.w", 1);
        conv_gate("context.l1.w", cc);
    }

    let mut prev = cfg.fusion_input_width();
    for (i, &width) in cfg.fusion_widths.iter().enumerate() {
        specs.push(GroupSpec {
            name: match i {
                0 => "fusion.0.w",
                1 => "fusion.1.w",
                2 => "fusion.2.w",
                _ => "fusion.x.w",
            },
            shape: vec![prev, width],
            fan_in: prev,
        });
        prev = width;
    }

    let dh = cfg.decoder_hidden;
    specs.push(GroupSpec {
        name: "dec.init.w",
        shape: vec![prev + cfg.noise_dim, 4 * dh],
        fan_in: prev + cfg.noise_dim,
    });
    let dec_in = cfg.decoder_input_width();
    specs.push(GroupSpec {
        name: "dec.l0.w",
        shape: vec![dec_in + dh, 4 * dh],
        fan_in: dec_in + dh,
    });
    specs.push(GroupSpec {
        name: "dec.l1.w",
        shape: vec![dh + dh, 4 * dh],
        fan_in: dh + dh,
    });
    specs.push(GroupSpec {
        name: "head.w",
        shape: vec![dh, 4],
        fan_in: dh,
    });
    specs
}

/// The exact parameter group names and shapes a configuration produces,
/// in storage order: each weight followed by its bias.
pub fn group_shapes(cfg: &ModelConfig) -> Result<Vec<(String, Vec<usize>)>> {
    cfg.validate()?;
    let mut out = Vec::new();
    for spec in group_specs(cfg) {
        let bias_len = match spec.shape.len() {
            2 => spec.shape[1],
            4 => spec.shape[0],
            _ => unreachable!("weights are matrices or conv kernels"),
        };
        let bias_name = spec.name.replace(".w", ".b");
        out.push((spec.name.to_string(), spec.shape));
        out.push((bias_name, vec![bias_len]));
    }
    Ok(out)
}

/// Seed-deterministic initialization: uniform fan-in weights, zero biases
/// except recurrent forget gates, which start at 1 so early training does
/// not wash out state.
pub fn init_params(cfg: &ModelConfig, seed: u64) -> Result<ModelParams> {
    cfg.validate()?;
    use rand::SeedableRng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut groups = Vec::new();
    for spec in group_specs(cfg) {
        let w: Tensor<f64> = init_uniform(&mut rng, spec.fan_in, &spec.shape);
        groups.push(ParamGroup {
            name: spec.name.to_string(),
            shape: spec.shape.clone(),
            data: w.data,
        });
        let bias_name = spec.name.replace(".w", ".b");
        let bias_len = match spec.shape.len() {
            2 => spec.shape[1],
            4 => spec.shape[0],
            _ => unreachable!("weights are matrices or conv kernels"),
        };
        let mut bias = vec![0.0f64; bias_len];
        let is_gate = spec.name.starts_with("traj.")
            || spec.name.starts_with("motion.")
            || spec.name.starts_with("context.")
            || spec.name.starts_with("dec.l");
        if is_gate {
            let block = bias_len / 4;
            for v in bias.iter_mut().skip(block).take(block) {
                *v = 1.0;
            }
        }
        groups.push(ParamGroup {
            name: bias_name,
            shape: vec![bias_len],
            data: bias,
        });
    }
    Ok(ModelParams { groups })
}

/// Parameters bound onto a tape for one forward/backward pass; group
/// order mirrors `ModelParams.groups`.
pub struct BoundParams {
    pub vars: Vec<Var>,
    names: Vec<String>,
}

impl BoundParams {
    pub fn bind<T: Real>(tape: &mut Tape<T>, params: &ModelParams) -> Self {
        let mut vars = Vec::with_capacity(params.groups.len());
        let mut names = Vec::with_capacity(params.groups.len());
        for g in &params.groups {
            let data = g.data.iter().map(|&v| T::from_f64(v)).collect();
            vars.push(tape.leaf(Tensor::from_vec(&g.shape, data)));
            names.push(g.name.clone());
        }
        BoundParams { vars, names }
    }

    pub fn var(&self, name: &str) -> Var {
        let idx = self
            .names
            .iter()
            .position(|n| n == name)
            .unwrap_or_else(|| panic!("unknown parameter group {name}"));
        self.vars[idx]
    }

    fn gate(&self, prefix: &str) -> GateParams {
        GateParams {
            w: self.var(&format!("{prefix}.w")),
            b: self.var(&format!("{prefix}.b")),
        }
    }
}

/// All decoder outputs of one batched pass: per-step boxes for rows
/// (window, sample) in row-major order, plus the bound noise leaf.
pub struct DecodeOut {
    pub step_boxes: Vec<Var>,
    pub rows: usize,
    pub noise_var: Var,
}

fn to_t<T: Real>(vals: impl IntoIterator<Item = f64>) -> Vec<T> {
    vals.into_iter().map(T::from_f64).collect()
}

/// Encoder over past boxes: 2-layer recurrent stack, final hidden state.
fn traj_encoder<T: Real>(
    tape: &mut Tape<T>,
    bound: &BoundParams,
    cfg: &ModelConfig,
    windows: &[&PreparedWindow],
) -> Var {
    let batch = windows.len();
    let xs: Vec<Var> = (0..cfg.tau)
        .map(|t| {
            let mut data = Vec::with_capacity(batch * 4);
            for w in windows {
                data.extend(to_t::<T>(w.window.past_boxes[t].as_array()));
            }
            tape.leaf(Tensor::from_vec(&[batch, 4], data))
        })
        .collect();
    let l0 = lstm_sequence(tape, &xs, &bound.gate("traj.l0"), batch, cfg.traj_hidden);
    let l1 = lstm_sequence(tape, &l0, &bound.gate("traj.l1"), batch, cfg.traj_hidden);
    *l1.last().expect("tau >= 1")
}

/// Shared 2-layer convolutional-recurrent encoder: final hidden map,
/// spatially mean-pooled to a channel vector.
#[allow(clippy::too_many_arguments)]
fn conv_encoder<T: Real>(
    tape: &mut Tape<T>,
    bound: &BoundParams,
    cfg: &ModelConfig,
    prefix: &str,
    xs: &[Var],
    batch: usize,
    in_ch: usize,
    height: usize,
    width: usize,
) -> Var {
    let cc = cfg.convlstm_channels;
    let k = cfg.convlstm_kernel;
    let l0 = convlstm_sequence(
        tape,
        xs,
        &bound.gate(&format!("{prefix}.l0")),
        batch,
        in_ch,
        cc,
        height,
        width,
        k,
    );
    let l1 = convlstm_sequence(
        tape,
        &l0,
        &bound.gate(&format!("{prefix}.l1")),
        batch,
        cc,
        cc,
        height,
        width,
        k,
    );
    tape.spatial_mean(*l1.last().expect("nonempty sequence"))
}

fn motion_inputs<T: Real>(
    tape: &mut Tape<T>,
    cfg: &ModelConfig,
    windows: &[&PreparedWindow],
) -> Vec<Var> {
    let batch = windows.len();
    let g = cfg.roi_grid;
    (0..cfg.tau - 1)
        .map(|t| {
            let mut data = Vec::with_capacity(batch * 2 * g * g);
            for w in windows {
                let grid = &w.window.pooled_flow[t].grid;
                // Stored interleaved per cell; the encoder wants channel
                // planes.
                for ch in 0..2 {
                    for cell in 0..g * g {
                        data.push(T::from_f64(grid[cell * 2 + ch] as f64));
                    }
                }
            }
            tape.leaf(Tensor::from_vec(&[batch, 2, g, g], data))
        })
        .collect()
}

fn context_inputs<T: Real>(
    tape: &mut Tape<T>,
    cfg: &ModelConfig,
    windows: &[&PreparedWindow],
) -> Vec<Var> {
    let batch = windows.len();
    let (cw, ch) = (cfg.context_width, cfg.context_height);
    (0..cfg.tau)
        .map(|t| {
            let mut data = Vec::with_capacity(batch * cw * ch);
            for w in windows {
                data.extend(w.window.context[t].iter().map(|&v| T::from_f64(v as f64)));
            }
            tape.leaf(Tensor::from_vec(&[batch, 1, ch, cw], data))
        })
        .collect()
}

/// Concatenated enabled-stream encodings through the fusion MLP
/// (affine + tanh per layer).
fn fuse<T: Real>(
    tape: &mut Tape<T>,
    bound: &BoundParams,
    cfg: &ModelConfig,
    parts: &[Var],
    batch: usize,
) -> Var {
    let mut x = if parts.len() == 1 {
        parts[0]
    } else {
        tape.concat_inner(parts, &[batch, cfg.fusion_input_width()])
    };
    for i in 0..cfg.fusion_widths.len() {
        let w = bound.var(&format!("fusion.{i}.w"));
        let b = bound.var(&format!("fusion.{i}.b"));
        let a = tape.affine(x, w, b);
        x = tape.tanh_of(a);
    }
    x
}

/// Full batched forward pass. `noise` must be [batch * samples,
/// noise_dim], rows grouped by window. Returns per-step decoder outputs.
pub fn forward<T: Real>(
    tape: &mut Tape<T>,
    bound: &BoundParams,
    cfg: &ModelConfig,
    windows: &[&PreparedWindow],
    noise: &Tensor<T>,
) -> Result<DecodeOut> {
    cfg.validate()?;
    if windows.is_empty() {
        return Err(Error::invalid("empty window batch"));
    }
    for w in windows {
        w.window.validate(cfg)?;
        if cfg.streams.use_ego && w.ego_features.len() != cfg.horizon {
            return Err(Error::invalid(format!(
                "window has {} ego feature steps, expected horizon = {}",
                w.ego_features.len(),
                cfg.horizon
            )));
        }
    }
    let batch = windows.len();
    let rows = batch * cfg.samples;
    assert_eq!(noise.shape, vec![rows, cfg.noise_dim], "noise shape");

    let mut parts = vec![traj_encoder(tape, bound, cfg, windows)];
    if cfg.streams.use_motion {
        let xs = motion_inputs(tape, cfg, windows);
        parts.push(conv_encoder(
            tape,
            bound,
            cfg,
            "motion",
            &xs,
            batch,
            2,
            cfg.roi_grid,
            cfg.roi_grid,
        ));
    }
    if cfg.streams.use_context {
        let xs = context_inputs(tape, cfg, windows);
        parts.push(conv_encoder(
            tape,
            bound,
            cfg,
            "context",
            &xs,
            batch,
            1,
            cfg.context_height,
            cfg.context_width,
        ));
    }
    let code = fuse(tape, bound, cfg, &parts, batch);

    // Decoder initial state: affine of (code, per-sample noise), squashed,
    // split into (h, c) for both layers.
    let dh = cfg.decoder_hidden;
    let code_rep = tape.repeat_rows(code, cfg.samples);
    let fused_width = *cfg.fusion_widths.last().expect("validated nonempty");
    let noise_var = tape.leaf(noise.clone());
    let init_in = tape.concat_inner(&[code_rep, noise_var], &[rows, fused_width + cfg.noise_dim]);
    let init_w = bound.var("dec.init.w");
    let init_b = bound.var("dec.init.b");
    let init_aff = tape.affine(init_in, init_w, init_b);
    let init = tape.tanh_of(init_aff);
    let mut h0 = tape.slice_inner(init, 0, dh, &[rows, dh]);
    let mut c0 = tape.slice_inner(init, dh, dh, &[rows, dh]);
    let mut h1 = tape.slice_inner(init, 2 * dh, dh, &[rows, dh]);
    let mut c1 = tape.slice_inner(init, 3 * dh, dh, &[rows, dh]);

    // Residual rollout from the last observed box.
    let mut last = Vec::with_capacity(batch * 4);
    for w in windows {
        last.extend(to_t::<T>(
            w.window.past_boxes.last().expect("tau >= 1").as_array(),
        ));
    }
    let last_leaf = tape.leaf(Tensor::from_vec(&[batch, 4], last));
    let mut prev_box = tape.repeat_rows(last_leaf, cfg.samples);

    let l0 = bound.gate("dec.l0");
    let l1 = bound.gate("dec.l1");
    let head_w = bound.var("head.w");
    let head_b = bound.var("head.b");
    let mut step_boxes = Vec::with_capacity(cfg.horizon);
    for k in 0..cfg.horizon {
        let x = if cfg.streams.use_ego {
            let mut ego = Vec::with_capacity(batch * 3);
            for w in windows {
                ego.extend(to_t::<T>(w.ego_features[k]));
            }
            let ego_leaf = tape.leaf(Tensor::from_vec(&[batch, 3], ego));
            let ego_rep = tape.repeat_rows(ego_leaf, cfg.samples);
            tape.concat_inner(&[prev_box, ego_rep], &[rows, 7])
        } else {
            prev_box
        };
        let (nh0, nc0) = lstm_cell(tape, x, h0, c0, &l0, rows, dh);
        let (nh1, nc1) = lstm_cell(tape, nh0, h1, c1, &l1, rows, dh);
        h0 = nh0;
        c0 = nc0;
        h1 = nh1;
        c1 = nc1;
        let delta = tape.affine(h1, head_w, head_b);
        prev_box = tape.add(prev_box, delta);
        if !tape.value(prev_box).data.iter().all(|v| v.is_finite()) {
            return Err(Error::Numeric {
                step: k,
                msg: "decoder produced a non-finite box".to_string(),
            });
        }
        step_boxes.push(prev_box);
    }
    Ok(DecodeOut {
        step_boxes,
        rows,
        noise_var,
    })
}

/// Extracts the forecast values for one window row block.
pub fn read_forecast<T: Real>(
    tape: &Tape<T>,
    out: &DecodeOut,
    cfg: &ModelConfig,
    window_idx: usize,
) -> TrajectoryForecast {
    let samples = (0..cfg.samples)
        .map(|s| {
            let row = window_idx * cfg.samples + s;
            out.step_boxes
                .iter()
                .map(|&v| {
                    let d = &tape.value(v).data[row * 4..row * 4 + 4];
                    NormalizedBox::from_array([
                        d[0].to_f64(),
                        d[1].to_f64(),
                        d[2].to_f64(),
                        d[3].to_f64(),
                    ])
                })
                .collect()
        })
        .collect();
    TrajectoryForecast { samples }
}

/// Outcome of attaching the variety loss to a decode: the scalar loss
/// node, the per-row sample errors, and which rows were selected.
pub struct VarietyLoss {
    pub loss: Var,
    pub per_row_mse: Vec<f64>,
    pub selected: Vec<bool>,
}

/// Best-of-K objective: per sample, the MSE over all H x 4 coordinates
/// against the ground-truth future; the loss averages each window's K
/// smallest samples. Only selected samples receive gradient.
pub fn variety_loss<T: Real>(
    tape: &mut Tape<T>,
    out: &DecodeOut,
    cfg: &ModelConfig,
    futures: &[&[NormalizedBox]],
) -> Result<VarietyLoss> {
    if cfg.best_of > cfg.samples {
        return Err(Error::invalid(format!(
            "best_of {} exceeds samples {}",
            cfg.best_of, cfg.samples
        )));
    }
    let batch = futures.len();
    assert_eq!(batch * cfg.samples, out.rows, "future count mismatch");
    for f in futures {
        if f.len() != cfg.horizon {
            return Err(Error::invalid(format!(
                "future has {} steps, expected horizon = {}",
                f.len(),
                cfg.horizon
            )));
        }
    }
    let stacked = tape.concat_inner(&out.step_boxes, &[out.rows, cfg.horizon * 4]);
    let mut target = Vec::with_capacity(out.rows * cfg.horizon * 4);
    for f in futures {
        for _ in 0..cfg.samples {
            for b in f.iter() {
                target.extend(b.as_array().map(T::from_f64));
            }
        }
    }
    let mse = tape.row_mse(stacked, &target);
    let per_row: Vec<f64> = tape.value(mse).data.iter().map(|v| v.to_f64()).collect();

    let mut weights = vec![T::ZERO; out.rows];
    let mut selected = vec![false; out.rows];
    let weight = T::from_f64(1.0 / (batch * cfg.best_of) as f64);
    for w in 0..batch {
        let mut order: Vec<usize> = (0..cfg.samples).collect();
        order.sort_by(|&a, &b| {
            per_row[w * cfg.samples + a]
                .partial_cmp(&per_row[w * cfg.samples + b])
                .expect("finite mse")
        });
        for &s in order.iter().take(cfg.best_of) {
            weights[w * cfg.samples + s] = weight;
            selected[w * cfg.samples + s] = true;
        }
    }
    let loss = tape.weighted_sum(mse, weights);
    Ok(VarietyLoss {
        loss,
        per_row_mse: per_row,
        selected,
    })
}

/// Standard-normal draw via the Box-Muller transform.
pub fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

pub fn draw_noise<T: Real>(rng: &mut ChaCha8Rng, rows: usize, dim: usize) -> Tensor<T> {
    let data = (0..rows * dim).map(|_| T::from_f64(gaussian(rng))).collect();
    Tensor::from_vec(&[rows, dim], data)
}

/// Single-window inference with freshly drawn noise.
pub fn predict(
    params: &ModelParams,
    cfg: &ModelConfig,
    window: &PreparedWindow,
    rng: &mut ChaCha8Rng,
) -> Result<TrajectoryForecast> {
    match cfg.precision {
        Precision::F32 => predict_t::<f32>(params, cfg, window, rng),
        Precision::F64 => predict_t::<f64>(params, cfg, window, rng),
    }
}

fn predict_t<T: Real>(
    params: &ModelParams,
    cfg: &ModelConfig,
    window: &PreparedWindow,
    rng: &mut ChaCha8Rng,
) -> Result<TrajectoryForecast> {
    let mut tape: Tape<T> = Tape::new();
    let bound = BoundParams::bind(&mut tape, params);
    let noise = draw_noise(rng, cfg.samples, cfg.noise_dim);
    let out = forward(&mut tape, &bound, cfg, &[window], &noise)?;
    Ok(read_forecast(&tape, &out, cfg, 0))
}

/// Spec-level encoder entry points (single window, values out). These are
/// the building blocks `forward` wires together; exposed for direct
/// testing and reuse.
pub fn encode_trajectory(
    params: &ModelParams,
    cfg: &ModelConfig,
    past_boxes: &[NormalizedBox],
) -> Result<Vec<f64>> {
    if past_boxes.len() != cfg.tau {
        return Err(Error::invalid(format!(
            "expected tau = {} boxes, got {}",
            cfg.tau,
            past_boxes.len()
        )));
    }
    if past_boxes
        .iter()
        .flat_map(|b| b.as_array())
        .any(|v| !v.is_finite())
    {
        return Err(Error::invalid("non-finite box input"));
    }
    let mut tape: Tape<f64> = Tape::new();
    let bound = BoundParams::bind(&mut tape, params);
    let xs: Vec<Var> = past_boxes
        .iter()
        .map(|b| tape.leaf(Tensor::from_vec(&[1, 4], b.as_array().to_vec())))
        .collect();
    let l0 = lstm_sequence(&mut tape, &xs, &bound.gate("traj.l0"), 1, cfg.traj_hidden);
    let l1 = lstm_sequence(&mut tape, &l0, &bound.gate("traj.l1"), 1, cfg.traj_hidden);
    Ok(tape.value(*l1.last().unwrap()).data.clone())
}

pub fn encode_motion(
    params: &ModelParams,
    cfg: &ModelConfig,
    pooled: &[PooledFlow],
) -> Result<Vec<f64>> {
    if pooled.len() != cfg.tau - 1 {
        return Err(Error::invalid(format!(
            "expected tau-1 = {} pooled flow steps, got {}",
            cfg.tau - 1,
            pooled.len()
        )));
    }
    for p in pooled {
        if p.g != cfg.roi_grid {
            return Err(Error::invalid("pooled grid size mismatch"));
        }
        if p.grid.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("non-finite flow input"));
        }
    }
    let mut tape: Tape<f64> = Tape::new();
    let bound = BoundParams::bind(&mut tape, params);
    let g = cfg.roi_grid;
    let xs: Vec<Var> = pooled
        .iter()
        .map(|p| {
            let mut data = Vec::with_capacity(2 * g * g);
            for ch in 0..2 {
                for cell in 0..g * g {
                    data.push(p.grid[cell * 2 + ch] as f64);
                }
            }
            tape.leaf(Tensor::from_vec(&[1, 2, g, g], data))
        })
        .collect();
    let pooled_var = conv_encoder(&mut tape, &bound, cfg, "motion", &xs, 1, 2, g, g);
    Ok(tape.value(pooled_var).data.clone())
}

pub fn encode_context(
    params: &ModelParams,
    cfg: &ModelConfig,
    frames: &[Vec<f32>],
) -> Result<Vec<f64>> {
    if frames.len() != cfg.tau {
        return Err(Error::invalid(format!(
            "expected tau = {} context frames, got {}",
            cfg.tau,
            frames.len()
        )));
    }
    let (cw, ch) = (cfg.context_width, cfg.context_height);
    for f in frames {
        if f.len() != cw * ch {
            return Err(Error::invalid("context frame size mismatch"));
        }
        if f.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("non-finite context input"));
        }
    }
    let mut tape: Tape<f64> = Tape::new();
    let bound = BoundParams::bind(&mut tape, params);
    let xs: Vec<Var> = frames
        .iter()
        .map(|f| {
            let data: Vec<f64> = f.iter().map(|&v| v as f64).collect();
            tape.leaf(Tensor::from_vec(&[1, 1, ch, cw], data))
        })
        .collect();
    let pooled_var = conv_encoder(&mut tape, &bound, cfg, "context", &xs, 1, 1, ch, cw);
    Ok(tape.value(pooled_var).data.clone())
}
