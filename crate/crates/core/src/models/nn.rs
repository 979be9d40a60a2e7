//! Dense and convolutional layers as views into a flat parameter vector,
//! with hand-written gradients.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

/// Row-major `outputs x inputs` weights followed by `outputs` biases, stored
/// at `offset` in the owning model's parameter vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dense {
    pub offset: usize,
    pub inputs: usize,
    pub outputs: usize,
}

impl Dense {
    pub fn len(&self) -> usize {
        self.outputs * (self.inputs + 1)
    }

    fn bias_offset(&self) -> usize {
        self.offset + self.outputs * self.inputs
    }

    /// `out = W x + b`
    pub fn forward(&self, params: &[f64], x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.inputs);
        let w = &params[self.offset..self.bias_offset()];
        let b = &params[self.bias_offset()..self.bias_offset() + self.outputs];
        for ((o, row), &bias) in out.iter_mut().zip(w.chunks_exact(self.inputs)).zip(b) {
            *o = bias + dot(row, x);
        }
    }

    /// Accumulates `dL/dW`, `dL/db` into `grads` and, when asked, `dL/dx` into `g_x`.
    pub fn backward(
        &self,
        params: &[f64],
        x: &[f64],
        g_out: &[f64],
        grads: &mut [f64],
        g_x: Option<&mut [f64]>,
    ) {
        let (gw, gb) = grads[self.offset..self.bias_offset() + self.outputs]
            .split_at_mut(self.outputs * self.inputs);
        for ((row, gbias), &g) in gw.chunks_exact_mut(self.inputs).zip(gb.iter_mut()).zip(g_out) {
            if g == 0.0 {
                continue;
            }
            *gbias += g;
            for (gwij, &xj) in row.iter_mut().zip(x) {
                *gwij += g * xj;
            }
        }
        if let Some(g_x) = g_x {
            let w = &params[self.offset..self.bias_offset()];
            for (row, &g) in w.chunks_exact(self.inputs).zip(g_out) {
                if g == 0.0 {
                    continue;
                }
                for (gx, &wij) in g_x.iter_mut().zip(row) {
                    *gx += g * wij;
                }
            }
        }
    }

    /// Weights `N(0, gain^2 / inputs)`, zero bias.
    pub fn init_normal<R: Rng + ?Sized>(&self, params: &mut [f64], gain: f64, rng: &mut R) {
        let std = gain / (self.inputs.max(1) as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("finite std");
        for w in &mut params[self.offset..self.bias_offset()] {
            *w = normal.sample(rng);
        }
        params[self.bias_offset()..self.bias_offset() + self.outputs].fill(0.0);
    }

    pub fn init_zero(&self, params: &mut [f64]) {
        params[self.offset..self.offset + self.len()].fill(0.0);
    }

    pub fn weights_mut<'a>(&self, params: &'a mut [f64]) -> &'a mut [f64] {
        &mut params[self.offset..self.bias_offset()]
    }

    pub fn bias_mut<'a>(&self, params: &'a mut [f64]) -> &'a mut [f64] {
        let b = self.bias_offset();
        &mut params[b..b + self.outputs]
    }
}

/// How a convolution reads past the image border.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Padding {
    #[default]
    Zero,
    /// Wrap around, as on a torus.
    Circular,
}

/// Stride-1 2-D convolution over row-major `height x width` maps with
/// interleaved channels. Weights are `[out][ky][kx][in]`, followed by
/// `outputs` biases.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Conv {
    pub offset: usize,
    pub width: usize,
    pub height: usize,
    pub inputs: usize,
    pub outputs: usize,
    pub kernel: usize,
    pub padding: Padding,
}

impl Conv {
    fn taps(&self) -> usize {
        self.kernel * self.kernel * self.inputs
    }

    pub fn len(&self) -> usize {
        self.outputs * (self.taps() + 1)
    }

    fn bias_offset(&self) -> usize {
        self.offset + self.outputs * self.taps()
    }

    /// Input coordinate read at `i` along an axis of length `n`.
    #[inline]
    fn source(&self, i: isize, n: isize) -> Option<isize> {
        match self.padding {
            Padding::Zero => (0..n).contains(&i).then_some(i),
            Padding::Circular => Some(i.rem_euclid(n)),
        }
    }

    /// Calls `f(out_pos, in_pos, tap)` for every kernel tap that reads the
    /// input, where `tap` indexes the `[ky][kx]` block of a weight row.
    #[inline]
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        let r = (self.kernel / 2) as isize;
        let (w, h) = (self.width as isize, self.height as isize);
        for y in 0..h {
            for x in 0..w {
                let out_pos = (y * w + x) as usize;
                for ky in 0..self.kernel as isize {
                    let Some(sy) = self.source(y + ky - r, h) else {
                        continue;
                    };
                    for kx in 0..self.kernel as isize {
                        let Some(sx) = self.source(x + kx - r, w) else {
                            continue;
                        };
                        f(out_pos, (sy * w + sx) as usize, (ky * self.kernel as isize + kx) as usize);
                    }
                }
            }
        }
    }

    pub fn forward(&self, params: &[f64], x: &[f64], out: &mut [f64]) {
        let (ci, co, taps) = (self.inputs, self.outputs, self.taps());
        debug_assert_eq!(x.len(), self.width * self.height * ci);
        let w = &params[self.offset..self.bias_offset()];
        let b = &params[self.bias_offset()..self.bias_offset() + co];
        for px in out.chunks_exact_mut(co) {
            px.copy_from_slice(b);
        }
        self.for_each_tap(|op, ip, tap| {
            let xin = &x[ip * ci..(ip + 1) * ci];
            for (o, acc) in out[op * co..(op + 1) * co].iter_mut().enumerate() {
                *acc += dot(&w[o * taps + tap * ci..o * taps + (tap + 1) * ci], xin);
            }
        });
    }

    pub fn backward(
        &self,
        params: &[f64],
        x: &[f64],
        g_out: &[f64],
        grads: &mut [f64],
        mut g_x: Option<&mut [f64]>,
    ) {
        let (ci, co, taps) = (self.inputs, self.outputs, self.taps());
        let bias = self.bias_offset();
        for px in g_out.chunks_exact(co) {
            for (gb, &g) in grads[bias..bias + co].iter_mut().zip(px) {
                *gb += g;
            }
        }
        let w = &params[self.offset..bias];
        let (gw, _) = grads[self.offset..bias].split_at_mut(co * taps);
        self.for_each_tap(|op, ip, tap| {
            let xin = &x[ip * ci..(ip + 1) * ci];
            for (o, &g) in g_out[op * co..(op + 1) * co].iter().enumerate() {
                if g == 0.0 {
                    continue;
                }
                let at = o * taps + tap * ci;
                for (gwi, &xi) in gw[at..at + ci].iter_mut().zip(xin) {
                    *gwi += g * xi;
                }
                if let Some(gx) = g_x.as_deref_mut() {
                    for (gxi, &wi) in gx[ip * ci..(ip + 1) * ci].iter_mut().zip(&w[at..at + ci]) {
                        *gxi += g * wi;
                    }
                }
            }
        });
    }

    /// Weights `N(0, gain^2 / fan_in)`, zero bias.
    pub fn init_normal<R: Rng + ?Sized>(&self, params: &mut [f64], gain: f64, rng: &mut R) {
        let std = gain / (self.taps().max(1) as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("finite std");
        for w in &mut params[self.offset..self.bias_offset()] {
            *w = normal.sample(rng);
        }
        params[self.bias_offset()..self.bias_offset() + self.outputs].fill(0.0);
    }

    pub fn init_zero(&self, params: &mut [f64]) {
        params[self.offset..self.offset + self.len()].fill(0.0);
    }

    /// Weight rows of output channels `range`.
    pub fn weights_of_mut<'a>(&self, params: &'a mut [f64], range: std::ops::Range<usize>) -> &'a mut [f64] {
        let taps = self.taps();
        &mut params[self.offset + range.start * taps..self.offset + range.end * taps]
    }

    pub fn bias_mut<'a>(&self, params: &'a mut [f64]) -> &'a mut [f64] {
        let b = self.bias_offset();
        &mut params[b..b + self.outputs]
    }
}

/// Hands out consecutive parameter ranges.
#[derive(Debug, Default)]
pub struct Layout {
    len: usize,
}

impl Layout {
    pub fn dense(&mut self, inputs: usize, outputs: usize) -> Dense {
        let d = Dense {
            offset: self.len,
            inputs,
            outputs,
        };
        self.len += d.len();
        d
    }

    pub fn conv(&mut self, (width, height): (usize, usize), inputs: usize, outputs: usize, kernel: usize, padding: Padding) -> Conv {
        let c = Conv {
            offset: self.len,
            width,
            height,
            inputs,
            outputs,
            kernel,
            padding,
        };
        self.len += c.len();
        c
    }

    pub fn len(&self) -> usize {
        self.len
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Hidden-layer nonlinearity.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Tanh,
    Relu,
}

impl Activation {
    pub fn apply(self, v: &mut [f64]) {
        match self {
            Activation::Tanh => tanh_inplace(v),
            Activation::Relu => v.iter_mut().for_each(|x| *x = x.max(0.0)),
        }
    }

    /// Given the activated `h` and `dL/dh`, overwrites `g` with `dL/da`.
    pub fn backward(self, h: &[f64], g: &mut [f64]) {
        match self {
            Activation::Tanh => tanh_backward(h, g),
            Activation::Relu => {
                for (gi, &hi) in g.iter_mut().zip(h) {
                    if hi <= 0.0 {
                        *gi = 0.0;
                    }
                }
            }
        }
    }
}

/// In-place `tanh`.
pub fn tanh_inplace(v: &mut [f64]) {
    for x in v {
        *x = x.tanh();
    }
}

/// Given `h = tanh(a)` and `dL/dh`, overwrites `g` with `dL/da`.
pub fn tanh_backward(h: &[f64], g: &mut [f64]) {
    for (gi, &hi) in g.iter_mut().zip(h) {
        *gi *= 1.0 - hi * hi;
    }
}

/// Numerically stable log-softmax.
pub fn log_softmax(logits: &[f64], out: &mut [f64]) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|&l| (l - max).exp()).sum::<f64>().ln();
    for (o, &l) in out.iter_mut().zip(logits) {
        *o = l - lse;
    }
}
