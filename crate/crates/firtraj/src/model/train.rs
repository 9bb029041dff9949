//! Minibatch SGD with momentum over the best-of-K objective.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

use super::net::{
    draw_noise, forward, variety_loss, BoundParams, ModelConfig, ModelParams, Precision,
};
use super::tape::{Real, Tape};
use super::windows::PreparedWindow;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 16,
            learning_rate: 0.01,
            momentum: 0.9,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    /// Mean step loss per epoch.
    pub epoch_losses: Vec<f64>,
}

/// Trains in place. Shuffling and decoder noise come from one stream
/// seeded by `seed`, so identical inputs give identical histories.
pub fn train(
    params: &mut ModelParams,
    cfg: &ModelConfig,
    windows: &[PreparedWindow],
    tc: &TrainConfig,
) -> Result<TrainReport> {
    cfg.validate()?;
    if windows.is_empty() {
        return Err(Error::invalid("no training windows"));
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
    for w in windows {
        w.window.validate(cfg)?;
        if w.future_boxes.len() != cfg.horizon {
            return Err(Error::invalid(format!(
                "training window at t0 {} lacks a full {}-step future",
                w.window.t0, cfg.horizon
            )));
        }
    }
    match cfg.precision {
        Precision::F32 => train_t::<f32>(params, cfg, windows, tc),
        Precision::F64 => train_t::<f64>(params, cfg, windows, tc),
    }
}

fn train_t<T: Real>(
    params: &mut ModelParams,
    cfg: &ModelConfig,
    windows: &[PreparedWindow],
    tc: &TrainConfig,
) -> Result<TrainReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed);
    let mut velocity: Vec<Vec<f64>> = params
        .groups
        .iter()
        .map(|g| vec![0.0; g.data.len()])
        .collect();
    let mut epoch_losses = Vec::with_capacity(tc.epochs);
    let mut order: Vec<usize> = (0..windows.len()).collect();
    let mut global_step = 0usize;

    for epoch in 0..tc.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut steps = 0usize;
        for chunk in order.chunks(tc.batch_size) {
            let batch: Vec<&PreparedWindow> = chunk.iter().map(|&i| &windows[i]).collect();
            let futures: Vec<&[crate::data::NormalizedBox]> =
                batch.iter().map(|w| w.future_boxes.as_slice()).collect();

            let mut tape: Tape<T> = Tape::new();
            let bound = BoundParams::bind(&mut tape, params);
            let noise = draw_noise(&mut rng, batch.len() * cfg.samples, cfg.noise_dim);
            let out = forward(&mut tape, &bound, cfg, &batch, &noise).map_err(|e| match e {
                Error::Numeric { step, msg } => Error::Numeric {
                    step,
                    msg: format!("epoch {epoch} step {global_step}: {msg}"),
                },
                other => other,
            })?;
            let loss = variety_loss(&mut tape, &out, cfg, &futures)?;
            let loss_val = tape.value(loss.loss).data[0].to_f64();
            if !loss_val.is_finite() {
                return Err(Error::Numeric {
                    step: global_step,
                    msg: format!("epoch {epoch}: loss became non-finite"),
                });
            }
            loss_sum += loss_val;
            steps += 1;

            tape.backward(&[(loss.loss, vec![T::ONE])]);
            for (gi, group) in params.groups.iter_mut().enumerate() {
                let grad = tape
                    .grad(bound.vars[gi])
                    .expect("every parameter participates in the loss graph");
                let vel = &mut velocity[gi];
                for (j, value) in group.data.iter_mut().enumerate() {
                    let g = grad[j].to_f64();
                    vel[j] = tc.momentum * vel[j] + g;
                    *value -= tc.learning_rate * vel[j];
                }
            }
            if !params.all_finite() {
                return Err(Error::Numeric {
                    step: global_step,
                    msg: format!("epoch {epoch}: parameters became non-finite"),
                });
            }
            global_step += 1;
        }
        epoch_losses.push(loss_sum / steps as f64);
    }
    Ok(TrainReport { epoch_losses })
}

pub const LOSS_HISTORY_HEADER: &str = "epoch,mean_loss";

pub fn write_loss_history(path: &Path, report: &TrainReport) -> Result<()> {
    let mut text = String::from(LOSS_HISTORY_HEADER);
    text.push('\n');
    for (epoch, loss) in report.epoch_losses.iter().enumerate() {
        text.push_str(&format!("{epoch},{loss}\n"));
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::NormalizedBox;
    use crate::model::net::{init_params, ObservationWindow, Preset};
    use rand::Rng;

    fn overfit_cfg() -> ModelConfig {
        ModelConfig {
            tau: 6,
            horizon: 3,
            samples: 2,
            best_of: 1,
            noise_dim: 2,
            traj_hidden: 8,
            convlstm_channels: 2,
            convlstm_kernel: 3,
            fusion_widths: vec![8],
            decoder_hidden: 8,
            context_width: 8,
            context_height: 6,
            roi_grid: 3,
            streams: Preset::Baseline.streams(),
            precision: Precision::F64,
        }
    }

    /// Linear track: box drifts at a per-window rate, so the future is a
    /// deterministic function of the past.
    fn linear_window(cfg: &ModelConfig, idx: u64) -> PreparedWindow {
        let mut rng = ChaCha8Rng::seed_from_u64(idx);
        let x0 = rng.gen_range(0.2..0.6);
        let y0 = rng.gen_range(0.3..0.6);
        let dx = rng.gen_range(-0.01..0.01);
        let dy = rng.gen_range(-0.008..0.008);
        let boxes = |t: usize| NormalizedBox {
            cx: x0 + dx * t as f64,
            cy: y0 + dy * t as f64,
            w: 0.08,
            h: 0.1,
        };
        PreparedWindow {
            window: ObservationWindow {
                past_boxes: (0..cfg.tau).map(boxes).collect(),
                pooled_flow: vec![],
                context: vec![],
                ego_history: vec![],
                t0: cfg.tau - 1,
            },
            ego_features: (0..cfg.horizon).map(|_| [0.2, 0.0, 0.0]).collect(),
            future_boxes: (cfg.tau..cfg.tau + cfg.horizon).map(boxes).collect(),
            sequence_id: format!("lin-{idx}"),
            track_id: "deer-0".to_string(),
        }
    }

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let cfg = overfit_cfg();
        let mut params = init_params(&cfg, 1).unwrap();
        // A zeroed head makes every sample repeat the last observed box;
        // with the future equal to that box the loss and all gradients
        // vanish.
        for name in ["head.w", "head.b"] {
            let idx = params.index_of(name).unwrap();
            params.groups[idx].data.iter_mut().for_each(|v| *v = 0.0);
        }
        let mut w = linear_window(&cfg, 0);
        let last = *w.window.past_boxes.last().unwrap();
        w.future_boxes = vec![last; cfg.horizon];
        let before = params.clone();
        let report = train(
            &mut params,
            &cfg,
            &[w],
            &TrainConfig {
                epochs: 3,
                batch_size: 4,
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(report.epoch_losses, vec![0.0, 0.0, 0.0]);
        assert_eq!(params, before);
    }

    #[test]
    fn overfits_a_small_linear_set() {
        let cfg = overfit_cfg();
        let mut params = init_params(&cfg, 2).unwrap();
        let windows: Vec<PreparedWindow> =
            (0..10).map(|i| linear_window(&cfg, i)).collect();
        let tc = TrainConfig {
            epochs: 200,
            batch_size: 10,
            learning_rate: 0.05,
            momentum: 0.9,
            seed: 3,
        };
        let report = train(&mut params, &cfg, &windows, &tc).unwrap();
        let first = report.epoch_losses[0];
        let last = *report.epoch_losses.last().unwrap();
        assert!(last.is_finite() && first.is_finite());
        assert!(
            last < 0.1 * first,
            "loss {first} only reached {last} after {} epochs",
            tc.epochs
        );
    }

    #[test]
    fn identical_seeds_reproduce_the_loss_history() {
        let cfg = overfit_cfg();
        let windows: Vec<PreparedWindow> = (0..6).map(|i| linear_window(&cfg, i)).collect();
        let tc = TrainConfig {
            epochs: 4,
            batch_size: 4,
            ..Default::default()
        };
        let mut a = init_params(&cfg, 5).unwrap();
        let mut b = init_params(&cfg, 5).unwrap();
        let ra = train(&mut a, &cfg, &windows, &tc).unwrap();
        let rb = train(&mut b, &cfg, &windows, &tc).unwrap();
        assert_eq!(ra, rb);
        assert_eq!(a, b);

        let mut c = init_params(&cfg, 5).unwrap();
        let rc = train(
            &mut c,
            &cfg,
            &windows,
            &TrainConfig { seed: 99, ..tc },
        )
        .unwrap();
        assert_ne!(ra, rc);
    }

    #[test]
    fn runaway_learning_rate_reports_divergence() {
        let cfg = overfit_cfg();
        let mut params = init_params(&cfg, 6).unwrap();
        let windows: Vec<PreparedWindow> = (0..4).map(|i| linear_window(&cfg, i)).collect();
        let err = train(
            &mut params,
            &cfg,
            &windows,
            &TrainConfig {
                epochs: 50,
                batch_size: 4,
                learning_rate: 1e12,
                ..Default::default()
            },
        )
        .unwrap_err();
        assert!(matches!(err, Error::Numeric { .. }), "got {err:?}");
        assert_eq!(err.exit_code(), 4);
    }

    #[test]
    fn windows_without_futures_are_rejected() {
        let cfg = overfit_cfg();
        let mut params = init_params(&cfg, 7).unwrap();
        let mut w = linear_window(&cfg, 0);
        w.future_boxes.clear();
        let err = train(&mut params, &cfg, &[w], &TrainConfig::default()).unwrap_err();
        assert!(matches!(err, Error::InvalidArgument(_)));
    }

    #[test]
    fn loss_history_file_round_trips() {
        let dir = tempfile::TempDir::new().unwrap();
        let path = dir.path().join("loss.csv");
        let report = TrainReport {
            epoch_losses: vec![0.5, 0.25],
        };
        write_loss_history(&path, &report).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text, "epoch,mean_loss\n0,0.5\n1,0.25\n");
    }
}
