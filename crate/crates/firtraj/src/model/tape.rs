//! Minimal reverse-mode automatic differentiation on a flat tape, generic
//! over f32/f64. The op set is exactly what the forecaster and the
//! lightweight detector need: GEMM-backed affine and convolution layers,
//! pointwise gates, slicing/concatenation, and the loss reductions.

use std::fmt::Debug;
use std::ops::{Add, AddAssign, Div, Mul, Neg, Sub};

/// Scalar type the tape computes in. f32 is the training default; f64 is
/// used by finite-difference verification.
pub trait Real:
    Copy
    + Debug
    + PartialOrd
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + AddAssign
    + 'static
{
    const ZERO: Self;
    const ONE: Self;
    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
    fn exp(self) -> Self;
    fn tanh(self) -> Self;
    fn is_finite(self) -> bool;
    /// C = alpha * A(m x k) * B(k x n) + beta * C, arbitrary strides.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
        rsc: isize,
        csc: isize,
    );
}

impl Real for f32 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn exp(self) -> Self {
        f32::exp(self)
    }
    fn tanh(self) -> Self {
        f32::tanh(self)
    }
    fn is_finite(self) -> bool {
        f32::is_finite(self)
    }
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
        rsc: isize,
        csc: isize,
    ) {
        unsafe {
            matrixmultiply::sgemm(
                m,
                k,
                n,
                alpha,
                a.as_ptr(),
                rsa,
                csa,
                b.as_ptr(),
                rsb,
                csb,
                beta,
                c.as_mut_ptr(),
                rsc,
                csc,
            );
        }
    }
}

impl Real for f64 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;
    fn from_f64(x: f64) -> Self {
        x
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn exp(self) -> Self {
        f64::exp(self)
    }
    fn tanh(self) -> Self {
        f64::tanh(self)
    }
    fn is_finite(self) -> bool {
        f64::is_finite(self)
    }
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
        rsc: isize,
        csc: isize,
    ) {
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                alpha,
                a.as_ptr(),
                rsa,
                csa,
                b.as_ptr(),
                rsb,
                csb,
                beta,
                c.as_mut_ptr(),
                rsc,
                csc,
            );
        }
    }
}

/// Dense row-major tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![T::ZERO; n],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), data.len(), "shape/data mismatch");
        Tensor {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Rows of the leading axis; product of the remaining axes.
    pub fn outer_inner(&self) -> (usize, usize) {
        let outer = self.shape[0];
        (outer, self.numel() / outer)
    }
}

/// Handle to a tape node.
/// Arguments below this are clamped before taking logs; see [`Tape::ln`].
pub const LN_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op<T> {
    Leaf,
    Affine {
        x: Var,
        w: Var,
        b: Var,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
    },
    Sigmoid {
        x: Var,
    },
    Tanh {
        x: Var,
    },
    Relu {
        x: Var,
    },
    Ln {
        x: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        c: T,
    },
    ConcatInner {
        parts: Vec<Var>,
    },
    SliceInner {
        x: Var,
        start: usize,
        len: usize,
    },
    RepeatRows {
        x: Var,
        times: usize,
    },
    SpatialMean {
        x: Var,
    },
    RowMse {
        x: Var,
        target: Vec<T>,
    },
    WeightedSum {
        x: Var,
        weights: Vec<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

/// Single-use computation graph: build forward with the op methods, call
/// [`Tape::backward`], then read gradients of leaves.
pub struct Tape<T: Real> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn conv_out(extent: usize, k: usize, pad: usize, stride: usize) -> usize {
    (extent + 2 * pad - k) / stride + 1
}

/// Gathers padded convolution patches into a (Cin*kh*kw) x (B*Ho*Wo)
/// column matrix.
#[allow(clippy::too_many_arguments)]
fn im2col<T: Real>(
    x: &[T],
    batch: usize,
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    pad: usize,
    stride: usize,
) -> (Vec<T>, usize, usize) {
    let ho = conv_out(h, kh, pad, stride);
    let wo = conv_out(w, kw, pad, stride);
    let rows = cin * kh * kw;
    let cols = batch * ho * wo;
    let mut out = vec![T::ZERO; rows * cols];
    for b in 0..batch {
        for oy in 0..ho {
            for ox in 0..wo {
                let j = (b * ho + oy) * wo + ox;
                for ci in 0..cin {
                    for ky in 0..kh {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..kw {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let r = (ci * kh + ky) * kw + kx;
                            out[r * cols + j] =
                                x[((b * cin + ci) * h + iy as usize) * w + ix as usize];
                        }
                    }
                }
            }
        }
    }
    (out, rows, cols)
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Gradient of the last backward pass with respect to `v`, if any path
    /// reached it.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// y = x W + b with x: [m,k], W: [k,n], b: [n].
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Var {
        let (xv, wv, bv) = (&self.nodes[x.0].value, &self.nodes[w.0].value, &self.nodes[b.0].value);
        assert_eq!(xv.shape.len(), 2, "affine input must be 2-D");
        let (m, k) = (xv.shape[0], xv.shape[1]);
        assert_eq!(wv.shape, vec![k, wv.shape[1]], "weight shape mismatch");
        let n = wv.shape[1];
        assert_eq!(bv.shape, vec![n], "bias shape mismatch");
        let mut y = vec![T::ZERO; m * n];
        T::gemm(
            m,
            k,
            n,
            T::ONE,
            &xv.data,
            k as isize,
            1,
            &wv.data,
            n as isize,
            1,
            T::ZERO,
            &mut y,
            n as isize,
            1,
        );
        for row in 0..m {
            for col in 0..n {
                y[row * n + col] += bv.data[col];
            }
        }
        self.push(Tensor::from_vec(&[m, n], y), Op::Affine { x, w, b })
    }

    /// Same-rank 2-D convolution, NCHW input, OIHW weights, odd kernels.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Var {
        let (xv, wv, bv) = (&self.nodes[x.0].value, &self.nodes[w.0].value, &self.nodes[b.0].value);
        assert_eq!(xv.shape.len(), 4, "conv input must be NCHW");
        assert_eq!(wv.shape.len(), 4, "conv weight must be OIHW");
        let (batch, cin, h, wd) = (xv.shape[0], xv.shape[1], xv.shape[2], xv.shape[3]);
        let (cout, wcin, kh, kw) = (wv.shape[0], wv.shape[1], wv.shape[2], wv.shape[3]);
        assert_eq!(cin, wcin, "conv channel mismatch");
        assert_eq!(bv.shape, vec![cout]);
        let ho = conv_out(h, kh, pad, stride);
        let wo = conv_out(wd, kw, pad, stride);
        let (col, rows, cols) = im2col(&xv.data, batch, cin, h, wd, kh, kw, pad, stride);
        let mut flat = vec![T::ZERO; cout * cols];
        T::gemm(
            cout,
            rows,
            cols,
            T::ONE,
            &wv.data,
            rows as isize,
            1,
            &col,
            cols as isize,
            1,
            T::ZERO,
            &mut flat,
            cols as isize,
            1,
        );
        let mut y = vec![T::ZERO; batch * cout * ho * wo];
        for bi in 0..batch {
            for co in 0..cout {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let j = (bi * ho + oy) * wo + ox;
                        y[((bi * cout + co) * ho + oy) * wo + ox] =
                            flat[co * cols + j] + bv.data[co];
                    }
                }
            }
        }
        self.push(
            Tensor::from_vec(&[batch, cout, ho, wo], y),
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            },
        )
    }

    fn map_unary(&mut self, x: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let xv = &self.nodes[x.0].value;
        let data = xv.data.iter().map(|&v| f(v)).collect();
        let shape = xv.shape.clone();
        self.push(Tensor { shape, data }, op)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.map_unary(
            x,
            |v| T::ONE / (T::ONE + (-v).exp()),
            Op::Sigmoid { x },
        )
    }

    pub fn tanh_of(&mut self, x: Var) -> Var {
        self.map_unary(x, |v| v.tanh(), Op::Tanh { x })
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.map_unary(
            x,
            |v| if v > T::ZERO { v } else { T::ZERO },
            Op::Relu { x },
        )
    }

    /// Natural log with the argument floored at [`LN_FLOOR`], so values a
    /// mask will zero out stay finite instead of producing NaN products.
    pub fn ln(&mut self, x: Var) -> Var {
        let floor = T::from_f64(LN_FLOOR);
        self.map_unary(
            x,
            |v| {
                let clamped = if v > floor { v } else { floor };
                T::from_f64(clamped.to_f64().ln())
            },
            Op::Ln { x },
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(av.shape, bv.shape, "add shape mismatch");
        let data = av
            .data
            .iter()
            .zip(&bv.data)
            .map(|(&x, &y)| x + y)
            .collect();
        let shape = av.shape.clone();
        self.push(Tensor { shape, data }, Op::Add { a, b })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(av.shape, bv.shape, "mul shape mismatch");
        let data = av
            .data
            .iter()
            .zip(&bv.data)
            .map(|(&x, &y)| x * y)
            .collect();
        let shape = av.shape.clone();
        self.push(Tensor { shape, data }, Op::Mul { a, b })
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        self.map_unary(x, |v| v * c, Op::Scale { x, c })
    }

    /// Concatenates along the flattened non-leading axes; all parts share
    /// the leading dimension. `out_shape` names the resulting axes (e.g.
    /// channel concat of NCHW inputs).
    pub fn concat_inner(&mut self, parts: &[Var], out_shape: &[usize]) -> Var {
        assert!(!parts.is_empty());
        let outer = self.nodes[parts[0].0].value.shape[0];
        let total: usize = parts
            .iter()
            .map(|p| {
                let v = &self.nodes[p.0].value;
                assert_eq!(v.shape[0], outer, "concat leading-dim mismatch");
                v.numel() / outer
            })
            .sum();
        assert_eq!(out_shape.iter().product::<usize>(), outer * total);
        assert_eq!(out_shape[0], outer);
        let mut data = vec![T::ZERO; outer * total];
        let mut offset = 0;
        for p in parts {
            let v = &self.nodes[p.0].value;
            let inner = v.numel() / outer;
            for row in 0..outer {
                data[row * total + offset..row * total + offset + inner]
                    .copy_from_slice(&v.data[row * inner..(row + 1) * inner]);
            }
            offset += inner;
        }
        self.push(
            Tensor::from_vec(out_shape, data),
            Op::ConcatInner {
                parts: parts.to_vec(),
            },
        )
    }

    /// Per-leading-row slice of `len` flattened elements starting at
    /// `start`; `out_shape` names the result (e.g. a channel block).
    pub fn slice_inner(&mut self, x: Var, start: usize, len: usize, out_shape: &[usize]) -> Var {
        let xv = &self.nodes[x.0].value;
        let (outer, inner) = xv.outer_inner();
        assert!(start + len <= inner, "slice out of range");
        assert_eq!(out_shape.iter().product::<usize>(), outer * len);
        assert_eq!(out_shape[0], outer);
        let mut data = vec![T::ZERO; outer * len];
        for row in 0..outer {
            data[row * len..(row + 1) * len]
                .copy_from_slice(&xv.data[row * inner + start..row * inner + start + len]);
        }
        self.push(
            Tensor::from_vec(out_shape, data),
            Op::SliceInner { x, start, len },
        )
    }

    /// Each leading row is repeated `times` times consecutively.
    pub fn repeat_rows(&mut self, x: Var, times: usize) -> Var {
        let xv = &self.nodes[x.0].value;
        let (outer, inner) = xv.outer_inner();
        let mut shape = xv.shape.clone();
        shape[0] = outer * times;
        let mut data = vec![T::ZERO; outer * times * inner];
        for row in 0..outer {
            for t in 0..times {
                data[(row * times + t) * inner..(row * times + t + 1) * inner]
                    .copy_from_slice(&xv.data[row * inner..(row + 1) * inner]);
            }
        }
        self.push(Tensor::from_vec(&shape, data), Op::RepeatRows { x, times })
    }

    /// [B,C,H,W] -> [B,C] mean over the spatial axes.
    pub fn spatial_mean(&mut self, x: Var) -> Var {
        let xv = &self.nodes[x.0].value;
        assert_eq!(xv.shape.len(), 4);
        let (batch, c, h, w) = (xv.shape[0], xv.shape[1], xv.shape[2], xv.shape[3]);
        let inv = T::from_f64(1.0 / (h * w) as f64);
        let mut data = vec![T::ZERO; batch * c];
        for b in 0..batch {
            for ch in 0..c {
                let mut acc = T::ZERO;
                for i in 0..h * w {
                    acc += xv.data[(b * c + ch) * h * w + i];
                }
                data[b * c + ch] = acc * inv;
            }
        }
        self.push(Tensor::from_vec(&[batch, c], data), Op::SpatialMean { x })
    }

    /// Per-row mean squared error against a constant target of equal
    /// shape: [R,C] -> [R].
    pub fn row_mse(&mut self, x: Var, target: &[T]) -> Var {
        let xv = &self.nodes[x.0].value;
        let (rows, cols) = xv.outer_inner();
        assert_eq!(target.len(), rows * cols, "target shape mismatch");
        let inv = T::from_f64(1.0 / cols as f64);
        let mut data = vec![T::ZERO; rows];
        for r in 0..rows {
            let mut acc = T::ZERO;
            for c in 0..cols {
                let d = xv.data[r * cols + c] - target[r * cols + c];
                acc += d * d;
            }
            data[r] = acc * inv;
        }
        self.push(
            Tensor::from_vec(&[rows], data),
            Op::RowMse {
                x,
                target: target.to_vec(),
            },
        )
    }

    /// Scalar dot product with fixed weights: [R] -> [1].
    pub fn weighted_sum(&mut self, x: Var, weights: Vec<T>) -> Var {
        let xv = &self.nodes[x.0].value;
        assert_eq!(xv.numel(), weights.len());
        let mut acc = T::ZERO;
        for (v, w) in xv.data.iter().zip(&weights) {
            acc += *v * *w;
        }
        self.push(
            Tensor::from_vec(&[1], vec![acc]),
            Op::WeightedSum { x, weights },
        )
    }

    fn grad_buf(&mut self, v: Var) -> &mut Vec<T> {
        let n = self.nodes[v.0].value.numel();
        self.grads[v.0].get_or_insert_with(|| vec![T::ZERO; n])
    }

    /// Reverse sweep from the given seeds; gradients accumulate and are
    /// readable via [`Tape::grad`] until the next backward call.
    pub fn backward(&mut self, seeds: &[(Var, Vec<T>)]) {
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        for (v, seed) in seeds {
            assert_eq!(seed.len(), self.nodes[v.0].value.numel(), "seed shape");
            let buf = self.grad_buf(*v);
            for (g, s) in buf.iter_mut().zip(seed) {
                *g += *s;
            }
        }
        for i in (0..self.nodes.len()).rev() {
            let Some(gy) = self.grads[i].take() else {
                continue;
            };
            // Ops read their own stored value (for gate derivatives) and
            // parent values; both are immutable during the sweep.
            let node_value = std::mem::replace(
                &mut self.nodes[i].value,
                Tensor {
                    shape: vec![],
                    data: vec![],
                },
            );
            let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
            self.apply_backward(&op, &node_value, &gy);
            self.nodes[i].value = node_value;
            self.nodes[i].op = op;
            self.grads[i] = Some(gy);
        }
    }

    fn apply_backward(&mut self, op: &Op<T>, y: &Tensor<T>, gy: &[T]) {
        match op {
            Op::Leaf => {}
            Op::Affine { x, w, b } => {
                let (m, n) = (y.shape[0], y.shape[1]);
                let k = self.nodes[x.0].value.shape[1];
                let xd = self.nodes[x.0].value.data.clone();
                let wd = self.nodes[w.0].value.data.clone();
                {
                    let gx = self.grad_buf(*x);
                    T::gemm(
                        m,
                        n,
                        k,
                        T::ONE,
                        gy,
                        n as isize,
                        1,
                        &wd,
                        1,
                        n as isize,
                        T::ONE,
                        gx,
                        k as isize,
                        1,
                    );
                }
                {
                    let gw = self.grad_buf(*w);
                    T::gemm(
                        k,
                        m,
                        n,
                        T::ONE,
                        &xd,
                        1,
                        k as isize,
                        gy,
                        n as isize,
                        1,
                        T::ONE,
                        gw,
                        n as isize,
                        1,
                    );
                }
                let gb = self.grad_buf(*b);
                for row in 0..m {
                    for col in 0..n {
                        gb[col] += gy[row * n + col];
                    }
                }
            }
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            } => {
                let xs = self.nodes[x.0].value.shape.clone();
                let ws = self.nodes[w.0].value.shape.clone();
                let (batch, cin, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
                let (cout, _, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
                let (ho, wo) = (y.shape[2], y.shape[3]);
                let cols = batch * ho * wo;
                let rows = cin * kh * kw;
                // The column matrix is rebuilt rather than cached: the
                // gather is cheap next to the GEMMs and caching it for
                // every unrolled timestep would dominate memory.
                let (col, _, _) = im2col(
                    &self.nodes[x.0].value.data,
                    batch,
                    cin,
                    h,
                    wd,
                    kh,
                    kw,
                    *pad,
                    *stride,
                );
                let mut gflat = vec![T::ZERO; cout * cols];
                for bi in 0..batch {
                    for co in 0..cout {
                        for oy in 0..ho {
                            for ox in 0..wo {
                                let j = (bi * ho + oy) * wo + ox;
                                gflat[co * cols + j] =
                                    gy[((bi * cout + co) * ho + oy) * wo + ox];
                            }
                        }
                    }
                }
                {
                    let gw = self.grad_buf(*w);
                    T::gemm(
                        cout,
                        cols,
                        rows,
                        T::ONE,
                        &gflat,
                        cols as isize,
                        1,
                        &col,
                        1,
                        cols as isize,
                        T::ONE,
                        gw,
                        rows as isize,
                        1,
                    );
                }
                {
                    let gb = self.grad_buf(*b);
                    for co in 0..cout {
                        for j in 0..cols {
                            gb[co] += gflat[co * cols + j];
                        }
                    }
                }
                let wdata = self.nodes[w.0].value.data.clone();
                let mut gcol = vec![T::ZERO; rows * cols];
                T::gemm(
                    rows,
                    cout,
                    cols,
                    T::ONE,
                    &wdata,
                    1,
                    rows as isize,
                    &gflat,
                    cols as isize,
                    1,
                    T::ZERO,
                    &mut gcol,
                    cols as isize,
                    1,
                );
                let gx = self.grad_buf(*x);
                for bi in 0..batch {
                    for oy in 0..ho {
                        for ox in 0..wo {
                            let j = (bi * ho + oy) * wo + ox;
                            for ci in 0..cin {
                                for ky in 0..kh {
                                    let iy = (oy * stride + ky) as isize - *pad as isize;
                                    if iy < 0 || iy >= h as isize {
                                        continue;
                                    }
                                    for kx in 0..kw {
                                        let ix = (ox * stride + kx) as isize - *pad as isize;
                                        if ix < 0 || ix >= wd as isize {
                                            continue;
                                        }
                                        let r = (ci * kh + ky) * kw + kx;
                                        gx[((bi * cin + ci) * h + iy as usize) * wd
                                            + ix as usize] += gcol[r * cols + j];
                                    }
                                }
                            }
                        }
                    }
                }
            }
            Op::Sigmoid { x } => {
                let gx = self.grad_buf(*x);
                for i in 0..gy.len() {
                    let s = y.data[i];
                    gx[i] += gy[i] * s * (T::ONE - s);
                }
            }
            Op::Tanh { x } => {
                let gx = self.grad_buf(*x);
                for i in 0..gy.len() {
                    let t = y.data[i];
                    gx[i] += gy[i] * (T::ONE - t * t);
                }
            }
            Op::Relu { x } => {
                let gx = self.grad_buf(*x);
                for i in 0..gy.len() {
                    if y.data[i] > T::ZERO {
                        gx[i] += gy[i];
                    }
                }
            }
            Op::Ln { x } => {
                let floor = T::from_f64(LN_FLOOR);
                let xd = self.nodes[x.0].value.data.clone();
                let gx = self.grad_buf(*x);
                for i in 0..gy.len() {
                    if xd[i] > floor {
                        gx[i] += gy[i] / xd[i];
                    }
                }
            }
            Op::Add { a, b } => {
                {
                    let ga = self.grad_buf(*a);
                    for i in 0..gy.len() {
                        ga[i] += gy[i];
                    }
                }
                let gb = self.grad_buf(*b);
                for i in 0..gy.len() {
                    gb[i] += gy[i];
                }
            }
            Op::Mul { a, b } => {
                let ad = self.nodes[a.0].value.data.clone();
                let bd = self.nodes[b.0].value.data.clone();
                {
                    let ga = self.grad_buf(*a);
                    for i in 0..gy.len() {
                        ga[i] += gy[i] * bd[i];
                    }
                }
                let gb = self.grad_buf(*b);
                for i in 0..gy.len() {
                    gb[i] += gy[i] * ad[i];
                }
            }
            Op::Scale { x, c } => {
                let gx = self.grad_buf(*x);
                for i in 0..gy.len() {
                    gx[i] += gy[i] * *c;
                }
            }
            Op::ConcatInner { parts } => {
                let outer = y.shape[0];
                let total = y.numel() / outer;
                let mut offset = 0;
                for p in parts {
                    let inner = self.nodes[p.0].value.numel() / outer;
                    let gp = self.grad_buf(*p);
                    for row in 0..outer {
                        for i in 0..inner {
                            gp[row * inner + i] += gy[row * total + offset + i];
                        }
                    }
                    offset += inner;
                }
            }
            Op::SliceInner { x, start, len } => {
                let (outer, inner) = self.nodes[x.0].value.outer_inner();
                let gx = self.grad_buf(*x);
                for row in 0..outer {
                    for i in 0..*len {
                        gx[row * inner + start + i] += gy[row * len + i];
                    }
                }
            }
            Op::RepeatRows { x, times } => {
                let (outer, inner) = self.nodes[x.0].value.outer_inner();
                let gx = self.grad_buf(*x);
                for row in 0..outer {
                    for t in 0..*times {
                        for i in 0..inner {
                            gx[row * inner + i] += gy[(row * times + t) * inner + i];
                        }
                    }
                }
            }
            Op::SpatialMean { x } => {
                let xs = self.nodes[x.0].value.shape.clone();
                let (batch, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
                let inv = T::from_f64(1.0 / (h * w) as f64);
                let gx = self.grad_buf(*x);
                for b in 0..batch {
                    for ch in 0..c {
                        let g = gy[b * c + ch] * inv;
                        for i in 0..h * w {
                            gx[(b * c + ch) * h * w + i] += g;
                        }
                    }
                }
            }
            Op::RowMse { x, target } => {
                let (rows, cols) = self.nodes[x.0].value.outer_inner();
                let xd = self.nodes[x.0].value.data.clone();
                let inv2 = T::from_f64(2.0 / cols as f64);
                let gx = self.grad_buf(*x);
                for r in 0..rows {
                    for c in 0..cols {
                        gx[r * cols + c] +=
                            gy[r] * inv2 * (xd[r * cols + c] - target[r * cols + c]);
                    }
                }
            }
            Op::WeightedSum { x, weights } => {
                let gx = self.grad_buf(*x);
                for i in 0..weights.len() {
                    gx[i] += gy[0] * weights[i];
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    /// Central finite difference of a scalar graph with respect to one
    /// leaf entry.
    fn fd_grad(
        build: &dyn Fn(&mut Tape<f64>, &[Vec<f64>]) -> Var,
        leaves: &[Vec<f64>],
        leaf_idx: usize,
        elem: usize,
    ) -> f64 {
        let eps = 1e-6;
        let mut eval = |delta: f64| {
            let mut bent: Vec<Vec<f64>> = leaves.to_vec();
            bent[leaf_idx][elem] += delta;
            let mut tape = Tape::new();
            let out = build(&mut tape, &bent);
            tape.value(out).data[0]
        };
        (eval(eps) - eval(-eps)) / (2.0 * eps)
    }

    fn check_all_grads(build: &dyn Fn(&mut Tape<f64>, &[Vec<f64>]) -> Var, leaves: &[Vec<f64>]) {
        let mut tape = Tape::new();
        let out = build(&mut tape, leaves);
        assert_eq!(tape.value(out).numel(), 1, "graph must end in a scalar");
        tape.backward(&[(out, vec![1.0])]);
        // Leaves are pushed first by every builder, in order.
        for (li, leaf) in leaves.iter().enumerate() {
            let analytic = tape.grad(Var(li)).unwrap_or(&[]).to_vec();
            for e in 0..leaf.len() {
                let numeric = fd_grad(build, leaves, li, e);
                let a = if analytic.is_empty() { 0.0 } else { analytic[e] };
                let denom = a.abs().max(numeric.abs()).max(1e-4);
                assert!(
                    (a - numeric).abs() / denom < 1e-5,
                    "leaf {li} elem {e}: analytic {a} vs numeric {numeric}"
                );
            }
        }
    }

    #[test]
    fn affine_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let leaves = vec![rand_vec(&mut rng, 6), rand_vec(&mut rng, 12), rand_vec(&mut rng, 4)];
        let build = |tape: &mut Tape<f64>, ls: &[Vec<f64>]| {
            let x = tape.leaf(Tensor::from_vec(&[2, 3], ls[0].clone()));
            let w = tape.leaf(Tensor::from_vec(&[3, 4], ls[1].clone()));
            let b = tape.leaf(Tensor::from_vec(&[4], ls[2].clone()));
            let y = tape.affine(x, w, b);
            let t = tape.tanh_of(y);
            tape.weighted_sum(t, vec![0.3; 8])
        };
        check_all_grads(&build, &leaves);
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        // Two batch items, 2 in channels, 4x5 input, 3 out channels, 3x3
        // kernel, stride 1, same padding.
        let leaves = vec![
            rand_vec(&mut rng, 2 * 2 * 4 * 5),
            rand_vec(&mut rng, 3 * 2 * 3 * 3),
            rand_vec(&mut rng, 3),
        ];
        let build = |tape: &mut Tape<f64>, ls: &[Vec<f64>]| {
            let x = tape.leaf(Tensor::from_vec(&[2, 2, 4, 5], ls[0].clone()));
            let w = tape.leaf(Tensor::from_vec(&[3, 2, 3, 3], ls[1].clone()));
            let b = tape.leaf(Tensor::from_vec(&[3], ls[2].clone()));
            let y = tape.conv2d(x, w, b, 1, 1);
            let s = tape.sigmoid(y);
            let n = tape.value(s).numel();
            tape.weighted_sum(s, vec![0.11; n])
        };
        check_all_grads(&build, &leaves);
    }

    #[test]
    fn strided_conv_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let leaves = vec![
            rand_vec(&mut rng, 1 * 1 * 6 * 6),
            rand_vec(&mut rng, 2 * 1 * 3 * 3),
            rand_vec(&mut rng, 2),
        ];
        let build = |tape: &mut Tape<f64>, ls: &[Vec<f64>]| {
            let x = tape.leaf(Tensor::from_vec(&[1, 1, 6, 6], ls[0].clone()));
            let w = tape.leaf(Tensor::from_vec(&[2, 1, 3, 3], ls[1].clone()));
            let b = tape.leaf(Tensor::from_vec(&[2], ls[2].clone()));
            let y = tape.conv2d(x, w, b, 2, 1);
            assert_eq!(tape.value(y).shape, vec![1, 2, 3, 3]);
            let r = tape.relu(y);
            let n = tape.value(r).numel();
            tape.weighted_sum(r, vec![-0.2; n])
        };
        check_all_grads(&build, &leaves);
    }

    #[test]
    fn gate_arithmetic_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let leaves = vec![rand_vec(&mut rng, 8), rand_vec(&mut rng, 8)];
        let build = |tape: &mut Tape<f64>, ls: &[Vec<f64>]| {
            let a = tape.leaf(Tensor::from_vec(&[2, 4], ls[0].clone()));
            let b = tape.leaf(Tensor::from_vec(&[2, 4], ls[1].clone()));
            let sa = tape.sigmoid(a);
            let tb = tape.tanh_of(b);
            let prod = tape.mul(sa, tb);
            let sum = tape.add(prod, a);
            let sc = tape.scale(sum, 0.7);
            tape.weighted_sum(sc, vec![0.25; 8])
        };
        check_all_grads(&build, &leaves);
    }

    #[test]
    fn log_gradients_match_finite_differences_away_from_the_floor() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let leaves = vec![(0..6).map(|_| rng.gen_range(0.05..2.0)).collect::<Vec<f64>>()];
        let build = |tape: &mut Tape<f64>, ls: &[Vec<f64>]| {
            let x = tape.leaf(Tensor::from_vec(&[2, 3], ls[0].clone()));
            let s = tape.sigmoid(x);
            let l = tape.ln(s);
            tape.weighted_sum(l, vec![0.4; 6])
        };
        check_all_grads(&build, &leaves);
    }

    #[test]
    fn log_floor_zeroes_value_and_gradient_below_threshold() {
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.leaf(Tensor::from_vec(&[3], vec![0.0, -2.0, 1.0]));
        let l = tape.ln(x);
        assert_eq!(tape.value(l).data[0], LN_FLOOR.ln());
        assert_eq!(tape.value(l).data[1], LN_FLOOR.ln());
        assert_eq!(tape.value(l).data[2], 0.0);
        let s = tape.weighted_sum(l, vec![1.0; 3]);
        tape.backward(&[(s, vec![1.0])]);
        let g = tape.grad(x).unwrap();
        assert_eq!(g[0], 0.0);
        assert_eq!(g[1], 0.0);
        assert_eq!(g[2], 1.0);
    }

    #[test]
    fn reshaping_ops_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let leaves = vec![rand_vec(&mut rng, 6), rand_vec(&mut rng, 4)];
        let build = |tape: &mut Tape<f64>, ls: &[Vec<f64>]| {
            let a = tape.leaf(Tensor::from_vec(&[2, 3], ls[0].clone()));
            let b = tape.leaf(Tensor::from_vec(&[2, 2], ls[1].clone()));
            let cat = tape.concat_inner(&[a, b], &[2, 5]);
            let sl = tape.slice_inner(cat, 1, 3, &[2, 3]);
            let rep = tape.repeat_rows(sl, 2);
            tape.weighted_sum(rep, vec![0.4; 12])
        };
        check_all_grads(&build, &leaves);
    }

    #[test]
    fn pooling_and_loss_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let target = rand_vec(&mut rng, 4);
        let leaves = vec![rand_vec(&mut rng, 2 * 2 * 2 * 3)];
        let build = move |tape: &mut Tape<f64>, ls: &[Vec<f64>]| {
            let x = tape.leaf(Tensor::from_vec(&[2, 2, 2, 3], ls[0].clone()));
            let pooled = tape.spatial_mean(x);
            let mse = tape.row_mse(pooled, &target);
            tape.weighted_sum(mse, vec![0.5, 0.5])
        };
        check_all_grads(&build, &leaves);
    }

    #[test]
    fn weighted_sum_masks_gradient_rows() {
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.leaf(Tensor::from_vec(&[3], vec![1.0, 2.0, 3.0]));
        let y = tape.weighted_sum(x, vec![1.0, 0.0, 2.0]);
        assert_eq!(tape.value(y).data[0], 7.0);
        tape.backward(&[(y, vec![1.0])]);
        assert_eq!(tape.grad(x).unwrap(), &[1.0, 0.0, 2.0]);
    }

    #[test]
    fn backward_accumulates_over_shared_nodes() {
        // y = x*x + x: dy/dx = 2x + 1.
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.leaf(Tensor::from_vec(&[1], vec![3.0]));
        let sq = tape.mul(x, x);
        let y = tape.add(sq, x);
        let s = tape.weighted_sum(y, vec![1.0]);
        tape.backward(&[(s, vec![1.0])]);
        assert_eq!(tape.grad(x).unwrap(), &[7.0]);
    }

    #[test]
    fn f32_and_f64_agree_on_small_graph() {
        fn run<T: Real>() -> f64 {
            let mut tape: Tape<T> = Tape::new();
            let vals: Vec<T> = [0.3, -0.7, 0.1, 0.9]
                .iter()
                .map(|&v| T::from_f64(v))
                .collect();
            let x = tape.leaf(Tensor::from_vec(&[2, 2], vals));
            let s = tape.sigmoid(x);
            let t = tape.tanh_of(s);
            let out = tape.weighted_sum(t, vec![T::from_f64(0.25); 4]);
            tape.value(out).data[0].to_f64()
        }
        assert!((run::<f32>() - run::<f64>()).abs() < 1e-6);
    }
}
