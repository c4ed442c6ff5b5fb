//! Minimal dense-layer toolkit with hand-written backward passes.
//!
//! Every model keeps its parameters in one flat `Vec<f64>`; layers are views
//! into it by offset. This keeps checkpointing, gradient checks and the
//! optimizer trivial.

use ndarray::{s, Array2, ArrayView2, ArrayViewMut2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};

/// Builder that hands out parameter offsets.
#[derive(Debug, Default)]
pub(crate) struct Layout {
    len: usize,
}

impl Layout {
    pub fn dense(&mut self, n_in: usize, n_out: usize) -> Dense {
        let d = Dense {
            w: self.len,
            b: self.len + n_in * n_out,
            n_in,
            n_out,
        };
        self.len += n_in * n_out + n_out;
        d
    }

    pub fn len(&self) -> usize {
        self.len
    }
}

/// `y = x W + b` with `W` stored row-major as `n_in × n_out`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct Dense {
    w: usize,
    b: usize,
    pub n_in: usize,
    pub n_out: usize,
}

impl Dense {
    fn weight<'a>(&self, params: &'a [f64]) -> ArrayView2<'a, f64> {
        ArrayView2::from_shape((self.n_in, self.n_out), &params[self.w..self.b]).unwrap()
    }

    fn bias<'a>(&self, params: &'a [f64]) -> &'a [f64] {
        &params[self.b..self.b + self.n_out]
    }

    /// Scaled-normal weights (fan-in), zero bias.
    pub fn init<R: Rng + ?Sized>(&self, params: &mut [f64], gain: f64, rng: &mut R) {
        let std = gain / (self.n_in as f64).sqrt();
        let normal = Normal::new(0.0, std).unwrap();
        for p in &mut params[self.w..self.b] {
            *p = normal.sample(rng);
        }
        params[self.b..self.b + self.n_out].fill(0.0);
    }

    pub fn zero_init(&self, params: &mut [f64]) {
        params[self.w..self.b + self.n_out].fill(0.0);
    }

    pub fn forward(&self, params: &[f64], x: ArrayView2<f64>) -> Array2<f64> {
        let mut y = x.dot(&self.weight(params));
        let b = self.bias(params);
        for mut row in y.rows_mut() {
            for (v, bb) in row.iter_mut().zip(b) {
                *v += bb;
            }
        }
        y
    }

    /// Accumulates parameter gradients and returns `dL/dx`.
    pub fn backward(
        &self,
        params: &[f64],
        x: ArrayView2<f64>,
        dy: ArrayView2<f64>,
        grads: &mut [f64],
    ) -> Array2<f64> {
        {
            let (gw, gb) = grads[self.w..self.b + self.n_out].split_at_mut(self.n_in * self.n_out);
            let mut gw = ArrayViewMut2::from_shape((self.n_in, self.n_out), gw).unwrap();
            ndarray::linalg::general_mat_mul(1.0, &x.t(), &dy, 1.0, &mut gw);
            for (g, col) in gb.iter_mut().zip(dy.axis_iter(Axis(1))) {
                *g += col.sum();
            }
        }
        dy.dot(&self.weight(params).t())
    }
}

pub(crate) fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

pub(crate) fn silu_grad(x: f64) -> f64 {
    let s = 1.0 / (1.0 + (-x).exp());
    s * (1.0 + x * (1.0 - s))
}

/// Stacks each row with its temporal neighbours, `[x(t-1), x(t), x(t+1)]`,
/// zero-padded at sequence boundaries. `x` holds `batch` sequences of length `len`.
pub(crate) fn im2col3(x: ArrayView2<f64>, len: usize) -> Array2<f64> {
    let (rows, d) = x.dim();
    let mut out = Array2::zeros((rows, 3 * d));
    for r in 0..rows {
        let t = r % len;
        if t > 0 {
            out.slice_mut(s![r, 0..d]).assign(&x.row(r - 1));
        }
        out.slice_mut(s![r, d..2 * d]).assign(&x.row(r));
        if t + 1 < len {
            out.slice_mut(s![r, 2 * d..3 * d]).assign(&x.row(r + 1));
        }
    }
    out
}

/// Adjoint of [`im2col3`].
pub(crate) fn col2im3(dcol: ArrayView2<f64>, len: usize) -> Array2<f64> {
    let (rows, d3) = dcol.dim();
    let d = d3 / 3;
    let mut out = Array2::zeros((rows, d));
    for r in 0..rows {
        let t = r % len;
        {
            let mut row = out.row_mut(r);
            row += &dcol.slice(s![r, d..2 * d]);
        }
        if t > 0 {
            let mut prev = out.row_mut(r - 1);
            prev += &dcol.slice(s![r, 0..d]);
        }
        if t + 1 < len {
            let mut next = out.row_mut(r + 1);
            next += &dcol.slice(s![r, 2 * d..3 * d]);
        }
    }
    out
}

/// Adaptive-moment optimizer over a flat parameter vector, with global-norm clipping.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip_norm: Option<f64>,
    pub(crate) m: Vec<f64>,
    pub(crate) v: Vec<f64>,
    pub(crate) t: u64,
}

impl Adam {
    pub fn new(n: usize, lr: f64, clip_norm: Option<f64>) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        let scale = match self.clip_norm {
            Some(max) => {
                let norm = grads.iter().map(|g| g * g).sum::<f64>().sqrt();
                if norm > max {
                    max / norm
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grads[i] * scale;
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mh = self.m[i] / bc1;
            let vh = self.v[i] / bc2;
            params[i] -= self.lr * mh / (vh.sqrt() + self.eps);
        }
    }
}

/// Central finite-difference gradient of `f` at `params`, for gradient checks.
pub(crate) fn numeric_grad(params: &[f64], eps: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut p = params.to_vec();
    (0..p.len())
        .map(|i| {
            let orig = p[i];
            p[i] = orig + eps;
            let hi = f(&p);
            p[i] = orig - eps;
            let lo = f(&p);
            p[i] = orig;
            (hi - lo) / (2.0 * eps)
        })
        .collect()
}

/// Max relative error between analytic and numeric gradients, using a
/// combined scale so near-zero entries do not blow up the ratio.
pub(crate) fn max_rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let scale = numeric
        .iter()
        .map(|v| v.abs())
        .fold(0.0, f64::max)
        .max(1e-8);
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / (a.abs().max(n.abs()).max(1e-3 * scale)))
        .fold(0.0, f64::max)
}
