//! Recurrent building blocks expressed as tape ops: a gated (LSTM)
//! layer over batched row vectors and its convolutional counterpart over
//! NCHW feature maps. Both carry their parameters as a single fused gate
//! weight and bias (input-forget-cell-output order).

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::tape::{Real, Tape, Tensor, Var};

/// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) initialization.
pub fn init_uniform<T: Real>(rng: &mut ChaCha8Rng, fan_in: usize, shape: &[usize]) -> Tensor<T> {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| T::from_f64(rng.gen_range(-bound..bound)))
        .collect();
    Tensor::from_vec(shape, data)
}

/// Gate weights for one recurrent layer: W is [(input+hidden), 4*hidden],
/// b is [4*hidden].
pub struct GateParams {
    pub w: Var,
    pub b: Var,
}

/// Runs one gated recurrent layer over `xs` (each [rows, input]); returns
/// the hidden state after every step. Zero initial state.
pub fn lstm_sequence<T: Real>(
    tape: &mut Tape<T>,
    xs: &[Var],
    params: &GateParams,
    rows: usize,
    hidden: usize,
) -> Vec<Var> {
    let mut h = tape.leaf(Tensor::zeros(&[rows, hidden]));
    let mut c = tape.leaf(Tensor::zeros(&[rows, hidden]));
    let mut outputs = Vec::with_capacity(xs.len());
    for &x in xs {
        let (h2, c2) = lstm_cell(tape, x, h, c, params, rows, hidden);
        h = h2;
        c = c2;
        outputs.push(h);
    }
    outputs
}

/// One gated recurrent step with externally threaded state, for decoders
/// whose next input depends on the previous output.
pub fn lstm_cell<T: Real>(
    tape: &mut Tape<T>,
    x: Var,
    h: Var,
    c: Var,
    params: &GateParams,
    rows: usize,
    hidden: usize,
) -> (Var, Var) {
    let input = tape.value(x).shape[1];
    let cat = tape.concat_inner(&[x, h], &[rows, input + hidden]);
    let gates = tape.affine(cat, params.w, params.b);
    gate_step(tape, gates, c, &[rows, hidden], hidden)
}

/// Runs one convolutional gated recurrent layer over `xs` (each
/// [batch, in_channels, height, width]); same-size hidden maps, odd
/// kernel, stride 1. Returns the hidden map after every step.
#[allow(clippy::too_many_arguments)]
pub fn convlstm_sequence<T: Real>(
    tape: &mut Tape<T>,
    xs: &[Var],
    params: &GateParams,
    batch: usize,
    in_channels: usize,
    channels: usize,
    height: usize,
    width: usize,
    kernel: usize,
) -> Vec<Var> {
    assert!(kernel % 2 == 1, "convlstm kernel must be odd");
    let mut h = tape.leaf(Tensor::zeros(&[batch, channels, height, width]));
    let mut c = tape.leaf(Tensor::zeros(&[batch, channels, height, width]));
    let mut outputs = Vec::with_capacity(xs.len());
    for &x in xs {
        let cat = tape.concat_inner(&[x, h], &[batch, in_channels + channels, height, width]);
        let gates = tape.conv2d(cat, params.w, params.b, 1, kernel / 2);
        let (h2, c2) = gate_step(
            tape,
            gates,
            c,
            &[batch, channels, height, width],
            channels * height * width,
        );
        h = h2;
        c = c2;
        outputs.push(h);
    }
    outputs
}

/// Shared gating algebra once the fused pre-activations exist: the gates
/// tensor holds 4 equal blocks (i, f, g, o) along the inner axis;
/// `block` is the per-row element count of one block and `state_shape`
/// the shape of h/c.
fn gate_step<T: Real>(
    tape: &mut Tape<T>,
    gates: Var,
    c_prev: Var,
    state_shape: &[usize],
    block: usize,
) -> (Var, Var) {
    let i_pre = tape.slice_inner(gates, 0, block, state_shape);
    let f_pre = tape.slice_inner(gates, block, block, state_shape);
    let g_pre = tape.slice_inner(gates, 2 * block, block, state_shape);
    let o_pre = tape.slice_inner(gates, 3 * block, block, state_shape);
    let i = tape.sigmoid(i_pre);
    let f = tape.sigmoid(f_pre);
    let g = tape.tanh_of(g_pre);
    let o = tape.sigmoid(o_pre);
    let fc = tape.mul(f, c_prev);
    let ig = tape.mul(i, g);
    let c = tape.add(fc, ig);
    let ct = tape.tanh_of(c);
    let h = tape.mul(o, ct);
    (h, c)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn zero_params_give_zero_hidden_states() {
        let mut tape: Tape<f64> = Tape::new();
        let w = tape.leaf(Tensor::zeros(&[3 + 4, 16]));
        let b = tape.leaf(Tensor::zeros(&[16]));
        let params = GateParams { w, b };
        let xs: Vec<Var> = (0..5)
            .map(|s| {
                tape.leaf(Tensor::from_vec(
                    &[2, 3],
                    (0..6).map(|i| (i + s) as f64 * 0.1).collect(),
                ))
            })
            .collect();
        let hs = lstm_sequence(&mut tape, &xs, &params, 2, 4);
        for h in hs {
            assert!(tape.value(h).data.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn lstm_is_deterministic_for_fixed_seed_params() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(42);
            let mut tape: Tape<f64> = Tape::new();
            let wt = init_uniform(&mut rng, 7, &[7, 16]);
            let bt = init_uniform(&mut rng, 7, &[16]);
            let w = tape.leaf(wt);
            let b = tape.leaf(bt);
            let params = GateParams { w, b };
            let xs: Vec<Var> = (0..6)
                .map(|s| {
                    tape.leaf(Tensor::from_vec(
                        &[1, 3],
                        vec![0.1 * s as f64, -0.2, 0.05 * s as f64],
                    ))
                })
                .collect();
            let hs = lstm_sequence(&mut tape, &xs, &params, 1, 4);
            tape.value(*hs.last().unwrap()).data.clone()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn lstm_final_state_depends_on_early_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let wt: Tensor<f64> = init_uniform(&mut rng, 5, &[1 + 4, 16]);
        let bt: Tensor<f64> = init_uniform(&mut rng, 5, &[16]);
        let run = |first: f64| {
            let mut tape: Tape<f64> = Tape::new();
            let w = tape.leaf(wt.clone());
            let b = tape.leaf(bt.clone());
            let params = GateParams { w, b };
            let xs: Vec<Var> = (0..8)
                .map(|s| {
                    let v = if s == 0 { first } else { 0.3 };
                    tape.leaf(Tensor::from_vec(&[1, 1], vec![v]))
                })
                .collect();
            let hs = lstm_sequence(&mut tape, &xs, &params, 1, 4);
            tape.value(*hs.last().unwrap()).data.clone()
        };
        assert_ne!(run(0.0), run(2.0));
    }

    #[test]
    fn convlstm_zero_input_zero_bias_stays_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut tape: Tape<f64> = Tape::new();
        let wt = init_uniform(&mut rng, 9 * 3, &[4 * 2, 1 + 2, 3, 3]);
        let w = tape.leaf(wt);
        let b = tape.leaf(Tensor::zeros(&[8]));
        let params = GateParams { w, b };
        let xs: Vec<Var> = (0..4)
            .map(|_| tape.leaf(Tensor::zeros(&[1, 1, 4, 5])))
            .collect();
        let hs = convlstm_sequence(&mut tape, &xs, &params, 1, 1, 2, 4, 5, 3);
        for h in hs {
            assert!(tape.value(h).data.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn convlstm_gradients_match_finite_differences() {
        // End-to-end cell check: two timesteps, then spatial mean and a
        // scalar reduction; perturb weight entries.
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let wt: Tensor<f64> = init_uniform(&mut rng, 9 * 3, &[4 * 2, 1 + 2, 3, 3]);
        let bt: Tensor<f64> = init_uniform(&mut rng, 9 * 3, &[8]);
        let x0: Vec<f64> = (0..12).map(|i| 0.1 * i as f64 - 0.5).collect();
        let x1: Vec<f64> = (0..12).map(|i| 0.07 * i as f64).collect();

        let eval = |wd: &[f64], bd: &[f64]| -> (f64, Vec<f64>, Vec<f64>) {
            let mut tape: Tape<f64> = Tape::new();
            let w = tape.leaf(Tensor::from_vec(&[8, 3, 3, 3], wd.to_vec()));
            let b = tape.leaf(Tensor::from_vec(&[8], bd.to_vec()));
            let params = GateParams { w, b };
            let xs = vec![
                tape.leaf(Tensor::from_vec(&[1, 1, 3, 4], x0.clone())),
                tape.leaf(Tensor::from_vec(&[1, 1, 3, 4], x1.clone())),
            ];
            let hs = convlstm_sequence(&mut tape, &xs, &params, 1, 1, 2, 3, 4, 3);
            let pooled = tape.spatial_mean(*hs.last().unwrap());
            let out = tape.weighted_sum(pooled, vec![1.0, -0.5]);
            let loss = tape.value(out).data[0];
            tape.backward(&[(out, vec![1.0])]);
            (
                loss,
                tape.grad(w).unwrap().to_vec(),
                tape.grad(b).unwrap().to_vec(),
            )
        };

        let (_, gw, gb) = eval(&wt.data, &bt.data);
        let eps = 1e-6;
        for idx in [0usize, 13, 57, 100, 215] {
            let mut plus = wt.data.clone();
            plus[idx] += eps;
            let mut minus = wt.data.clone();
            minus[idx] -= eps;
            let fd = (eval(&plus, &bt.data).0 - eval(&minus, &bt.data).0) / (2.0 * eps);
            assert!(
                (gw[idx] - fd).abs() < 1e-6 + 1e-4 * fd.abs(),
                "w[{idx}]: {} vs {}",
                gw[idx],
                fd
            );
        }
        for idx in [0usize, 3, 7] {
            let mut plus = bt.data.clone();
            plus[idx] += eps;
            let mut minus = bt.data.clone();
            minus[idx] -= eps;
            let fd = (eval(&wt.data, &plus).0 - eval(&wt.data, &minus).0) / (2.0 * eps);
            assert!((gb[idx] - fd).abs() < 1e-6 + 1e-4 * fd.abs());
        }
    }

    #[test]
    fn init_uniform_respects_fan_in_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t: Tensor<f64> = init_uniform(&mut rng, 100, &[100, 40]);
        assert!(t.data.iter().all(|v| v.abs() <= 0.1));
        assert!(t.data.iter().any(|v| v.abs() > 0.05));
    }
}
