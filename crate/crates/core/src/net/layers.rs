//! Convolution, pooling and upsampling with their backward passes.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::field::{Field3, Shape};

/// A stride-1 convolution with zero padding `kernel / 2`.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    /// `out × in × kernel × kernel`, row-major.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct ConvTape {
    /// im2col matrix, `(in · k · k) × pixels`.
    col: Vec<f64>,
    in_shape: Shape,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvGrad {
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl ConvGrad {
    pub fn zeros_like(conv: &Conv2d) -> Self {
        ConvGrad {
            weights: vec![0.0; conv.weights.len()],
            bias: vec![0.0; conv.bias.len()],
        }
    }

    pub fn axpy(&mut self, alpha: f64, other: &ConvGrad) {
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            *a += alpha * b;
        }
        for (a, b) in self.bias.iter_mut().zip(&other.bias) {
            *a += alpha * b;
        }
    }
}

impl Conv2d {
    pub fn zeros(in_channels: usize, out_channels: usize, kernel: usize) -> Self {
        Conv2d {
            in_channels,
            out_channels,
            kernel,
            weights: vec![0.0; out_channels * in_channels * kernel * kernel],
            bias: vec![0.0; out_channels],
        }
    }

    /// Zero-mean normal weights with variance `2 / fan_in`, zero biases.
    pub fn he_init(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let mut conv = Self::zeros(in_channels, out_channels, kernel);
        let fan_in = (in_channels * kernel * kernel) as f64;
        let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("positive std");
        for w in &mut conv.weights {
            *w = normal.sample(rng);
        }
        conv
    }

    pub fn param_count(&self) -> usize {
        self.weights.len() + self.bias.len()
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    fn im2col(&self, x: &Field3) -> Vec<f64> {
        let s = x.shape();
        let (h, w) = (s.height, s.width);
        let n = h * w;
        if self.kernel == 1 {
            return x.as_slice().to_vec();
        }
        let k = self.kernel;
        let pad = (k / 2) as isize;
        let src = x.as_slice();
        let mut col = vec![0.0; self.patch_len() * n];
        for ci in 0..s.channels {
            let chan = &src[ci * n..(ci + 1) * n];
            for ky in 0..k {
                let dy = ky as isize - pad;
                for kx in 0..k {
                    let dx = kx as isize - pad;
                    let row = ((ci * k + ky) * k + kx) * n;
                    let dst = &mut col[row..row + n];
                    for y in 0..h {
                        let sy = y as isize + dy;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        let srow = &chan[sy as usize * w..(sy as usize + 1) * w];
                        let drow = &mut dst[y * w..(y + 1) * w];
                        let x0 = (-dx).max(0) as usize;
                        let x1 = (w as isize - dx.max(0)) as usize;
                        for xx in x0..x1 {
                            drow[xx] = srow[(xx as isize + dx) as usize];
                        }
                    }
                }
            }
        }
        col
    }

    fn col2im(&self, col: &[f64], shape: Shape) -> Field3 {
        let (h, w) = (shape.height, shape.width);
        let n = h * w;
        if self.kernel == 1 {
            return Field3::from_raw(shape, col.to_vec());
        }
        let k = self.kernel;
        let pad = (k / 2) as isize;
        let mut out = Field3::zeros(shape);
        let dst = out.as_mut_slice();
        for ci in 0..shape.channels {
            let chan = &mut dst[ci * n..(ci + 1) * n];
            for ky in 0..k {
                let dy = ky as isize - pad;
                for kx in 0..k {
                    let dx = kx as isize - pad;
                    let row = ((ci * k + ky) * k + kx) * n;
                    let src = &col[row..row + n];
                    for y in 0..h {
                        let sy = y as isize + dy;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        let x0 = (-dx).max(0) as usize;
                        let x1 = (w as isize - dx.max(0)) as usize;
                        for xx in x0..x1 {
                            chan[sy as usize * w + (xx as isize + dx) as usize] += src[y * w + xx];
                        }
                    }
                }
            }
        }
        out
    }

    pub fn forward(&self, x: &Field3) -> (Field3, ConvTape) {
        let s = x.shape();
        debug_assert_eq!(s.channels, self.in_channels);
        let n = s.pixels();
        let col = self.im2col(x);
        let out_shape = s.with_channels(self.out_channels);
        let mut out = vec![0.0; out_shape.len()];
        for (o, b) in out.chunks_mut(n).zip(&self.bias) {
            o.fill(*b);
        }
        let kk = self.patch_len();
        // out[oc, p] += W[oc, q] * col[q, p]
        unsafe {
            matrixmultiply::dgemm(
                self.out_channels,
                kk,
                n,
                1.0,
                self.weights.as_ptr(),
                kk as isize,
                1,
                col.as_ptr(),
                n as isize,
                1,
                1.0,
                out.as_mut_ptr(),
                n as isize,
                1,
            );
        }
        let out = Field3::from_raw(out_shape, out);
        (out, ConvTape { col, in_shape: s })
    }

    /// Accumulates parameter gradients into `grad`; returns the input gradient
    /// when `need_input` is set.
    pub fn backward(
        &self,
        tape: &ConvTape,
        d_out: &Field3,
        grad: &mut ConvGrad,
        need_input: bool,
    ) -> Option<Field3> {
        let n = tape.in_shape.pixels();
        let kk = self.patch_len();
        let dout = d_out.as_slice();
        for (gb, row) in grad.bias.iter_mut().zip(dout.chunks(n)) {
            *gb += row.iter().sum::<f64>();
        }
        // dW[oc, q] += dout[oc, p] * col[q, p]
        unsafe {
            matrixmultiply::dgemm(
                self.out_channels,
                n,
                kk,
                1.0,
                dout.as_ptr(),
                n as isize,
                1,
                tape.col.as_ptr(),
                1,
                n as isize,
                1.0,
                grad.weights.as_mut_ptr(),
                kk as isize,
                1,
            );
        }
        if !need_input {
            return None;
        }
        // dcol[q, p] = W[oc, q] * dout[oc, p]
        let mut dcol = vec![0.0; kk * n];
        unsafe {
            matrixmultiply::dgemm(
                kk,
                self.out_channels,
                n,
                1.0,
                self.weights.as_ptr(),
                1,
                kk as isize,
                dout.as_ptr(),
                n as isize,
                1,
                0.0,
                dcol.as_mut_ptr(),
                n as isize,
                1,
            );
        }
        Some(self.col2im(&dcol, tape.in_shape))
    }
}

pub fn relu_in_place(x: &mut Field3) {
    for v in x.as_mut_slice() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

/// Masks `d` by `out > 0` where `out` is a ReLU output.
pub fn relu_backward(out: &Field3, d: &mut Field3) {
    for (g, &o) in d.as_mut_slice().iter_mut().zip(out.as_slice()) {
        if o <= 0.0 {
            *g = 0.0;
        }
    }
}

/// 2×2 max pooling with stride 2. Returns the flat source index of each max
/// (first maximum in scan order wins).
pub fn max_pool2(x: &Field3) -> (Field3, Vec<usize>) {
    let s = x.shape();
    let (h2, w2) = (s.height / 2, s.width / 2);
    let out_shape = Shape {
        channels: s.channels,
        height: h2,
        width: w2,
    };
    let src = x.as_slice();
    let mut out = Field3::zeros(out_shape);
    let mut idx = vec![0usize; out_shape.len()];
    let dst = out.as_mut_slice();
    for c in 0..s.channels {
        for i in 0..h2 {
            for j in 0..w2 {
                let mut best = s.index(c, 2 * i, 2 * j);
                for (di, dj) in [(0, 1), (1, 0), (1, 1)] {
                    let k = s.index(c, 2 * i + di, 2 * j + dj);
                    if src[k] > src[best] {
                        best = k;
                    }
                }
                let o = out_shape.index(c, i, j);
                dst[o] = src[best];
                idx[o] = best;
            }
        }
    }
    (out, idx)
}

pub fn max_pool2_backward(d_out: &Field3, idx: &[usize], in_shape: Shape) -> Field3 {
    let mut d = Field3::zeros(in_shape);
    let dst = d.as_mut_slice();
    for (&g, &k) in d_out.as_slice().iter().zip(idx) {
        dst[k] += g;
    }
    d
}

/// Nearest-neighbour 2× upsampling.
pub fn upsample2(x: &Field3) -> Field3 {
    let s = x.shape();
    let out_shape = Shape {
        channels: s.channels,
        height: 2 * s.height,
        width: 2 * s.width,
    };
    Field3::from_fn(out_shape, |c, i, j| x.get(c, i / 2, j / 2))
}

pub fn upsample2_backward(d_out: &Field3) -> Field3 {
    let s = d_out.shape();
    let in_shape = Shape {
        channels: s.channels,
        height: s.height / 2,
        width: s.width / 2,
    };
    let mut d = Field3::zeros(in_shape);
    let src = d_out.as_slice();
    let dst = d.as_mut_slice();
    for c in 0..s.channels {
        for i in 0..s.height {
            for j in 0..s.width {
                dst[in_shape.index(c, i / 2, j / 2)] += src[s.index(c, i, j)];
            }
        }
    }
    d
}

/// Stacks `a` and `b` along channels.
pub fn concat(a: &Field3, b: &Field3) -> Field3 {
    debug_assert_eq!((a.height(), a.width()), (b.height(), b.width()));
    let shape = a.shape().with_channels(a.channels() + b.channels());
    let mut data = Vec::with_capacity(shape.len());
    data.extend_from_slice(a.as_slice());
    data.extend_from_slice(b.as_slice());
    Field3::from_raw(shape, data)
}

/// Inverse of [`concat`] on gradients.
pub fn split(d: &Field3, first: usize) -> (Field3, Field3) {
    let s = d.shape();
    let cut = first * s.pixels();
    let (a, b) = d.as_slice().split_at(cut);
    (
        Field3::from_raw(s.with_channels(first), a.to_vec()),
        Field3::from_raw(s.with_channels(s.channels - first), b.to_vec()),
    )
}
