//! Minimal neural-network layers with explicit backward passes.
//!
//! All tensors are `f32`, row-major. Convolutional feature maps are NCHW.
//! Matrix products go through `matrixmultiply::sgemm`; transposes are
//! expressed with strides so nothing is copied.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imagery::Image;

/// `C = op(A)·op(B) + beta·C` where `op(A)` is `m×k` and `op(B)` is `k×n`.
/// `a` is stored `m×k` (or `k×m` when `ta`), `b` is stored `k×n`
/// (or `n×k` when `tb`), `c` is `m×n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(m: usize, k: usize, n: usize, a: &[f32], ta: bool, b: &[f32], tb: bool, c: &mut [f32], beta: f32) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|v| *v *= beta);
        return;
    }
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the strides above address exactly the m×k / k×n / m×n
    // extents whose lengths are checked by the debug assertions and
    // guaranteed by every caller in this crate.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// A trainable tensor and its accumulated gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub value: Vec<f32>,
    pub grad: Vec<f32>,
}

impl Param {
    pub fn zeros(n: usize) -> Self {
        Self::filled(n, 0.0)
    }

    pub fn filled(n: usize, v: f32) -> Self {
        Self {
            value: vec![v; n],
            grad: vec![0.0; n],
        }
    }

    pub fn uniform(n: usize, bound: f32, rng: &mut impl Rng) -> Self {
        Self {
            value: (0..n).map(|_| rng.gen_range(-bound..=bound)).collect(),
            grad: vec![0.0; n],
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = 0.0);
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }
}

/// Named tensors of a model in a fixed order; drives checkpoints.
pub trait Parameterized {
    fn tensors(&self) -> Vec<(String, &Vec<f32>)>;
    fn tensors_mut(&mut self) -> Vec<(String, &mut Vec<f32>)>;
    fn params_mut(&mut self) -> Vec<&mut Param>;

    fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    fn parameter_count(&mut self) -> usize {
        self.params_mut().iter().map(|p| p.len()).sum()
    }
}

/// Optimization schedule for one training stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Training-curve sampling interval, in steps.
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 5000,
            learning_rate: 1e-4,
            batch_size: 1,
            seed: 0,
            log_every: 50,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, stage: &str) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config(format!("{stage}: steps must be at least 1")));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Config(format!(
                "{stage}: learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config(format!("{stage}: batch size must be at least 1")));
        }
        if self.log_every == 0 {
            return Err(Error::Config(format!("{stage}: log_every must be at least 1")));
        }
        Ok(())
    }
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f32,
    beta1: f32,
    beta2: f32,
    eps: f32,
    t: i32,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr: lr as f32,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn step(&mut self, params: &mut [&mut Param]) {
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.len()]).collect();
            self.v = params.iter().map(|p| vec![0.0; p.len()]).collect();
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        let step = self.lr * bc2.sqrt() / bc1;
        for ((p, m), v) in params.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            for i in 0..p.value.len() {
                let g = p.grad[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                p.value[i] -= step * m[i] / (v[i].sqrt() + self.eps * bc2.sqrt());
            }
        }
    }
}

/// Fully connected layer, `y = x·Wᵀ + b` on a batch of rows.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weight: Param,
    pub bias: Param,
}

impl Linear {
    pub fn new(in_dim: usize, out_dim: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (in_dim as f32).sqrt();
        Self {
            in_dim,
            out_dim,
            weight: Param::uniform(in_dim * out_dim, bound, rng),
            bias: Param::uniform(out_dim, bound, rng),
        }
    }

    pub fn forward(&self, x: &[f32], rows: usize) -> Vec<f32> {
        let mut y = Vec::with_capacity(rows * self.out_dim);
        for _ in 0..rows {
            y.extend_from_slice(&self.bias.value);
        }
        gemm(rows, self.in_dim, self.out_dim, x, false, &self.weight.value, true, &mut y, 1.0);
        y
    }

    /// Accumulates parameter gradients and returns `dL/dx`.
    pub fn backward(&mut self, x: &[f32], dy: &[f32], rows: usize) -> Vec<f32> {
        let (mut gw, mut gb) = (std::mem::take(&mut self.weight.grad), std::mem::take(&mut self.bias.grad));
        let dx = self.backward_into(x, dy, rows, &mut gw, &mut gb, true);
        self.weight.grad = gw;
        self.bias.grad = gb;
        dx.expect("input grad requested")
    }

    /// Accumulates into caller-owned gradient buffers, so several workers
    /// can differentiate one shared layer.
    pub fn backward_into(
        &self,
        x: &[f32],
        dy: &[f32],
        rows: usize,
        gw: &mut [f32],
        gb: &mut [f32],
        need_input_grad: bool,
    ) -> Option<Vec<f32>> {
        gemm(self.out_dim, rows, self.in_dim, dy, true, x, false, gw, 1.0);
        for r in dy.chunks_exact(self.out_dim) {
            for (g, d) in gb.iter_mut().zip(r) {
                *g += d;
            }
        }
        need_input_grad.then(|| {
            let mut dx = vec![0.0; rows * self.in_dim];
            gemm(rows, self.out_dim, self.in_dim, dy, false, &self.weight.value, false, &mut dx, 0.0);
            dx
        })
    }
}

pub fn relu_inplace(x: &mut [f32]) {
    x.iter_mut().for_each(|v| *v = v.max(0.0));
}

/// Zeroes `dy` where the forward output was not positive.
pub fn relu_backward(out: &[f32], dy: &mut [f32]) {
    for (d, o) in dy.iter_mut().zip(out) {
        if *o <= 0.0 {
            *d = 0.0;
        }
    }
}

/// NCHW feature map.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn zeros(n: usize, c: usize, h: usize, w: usize) -> Self {
        Self {
            n,
            c,
            h,
            w,
            data: vec![0.0; n * c * h * w],
        }
    }

    pub fn from_data(n: usize, c: usize, h: usize, w: usize, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), n * c * h * w, "tensor data length");
        Self { n, c, h, w, data }
    }

    pub fn hw(&self) -> usize {
        self.h * self.w
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let s = self.c * self.hw();
        &self.data[i * s..(i + 1) * s]
    }

    pub fn image_mut(&mut self, i: usize) -> &mut [f32] {
        let s = self.c * self.hw();
        &mut self.data[i * s..(i + 1) * s]
    }

    /// Concatenates along channels.
    pub fn concat(parts: &[&Tensor]) -> Tensor {
        let first = parts[0];
        let (n, h, w) = (first.n, first.h, first.w);
        let c: usize = parts.iter().map(|p| p.c).sum();
        let mut out = Tensor::zeros(n, c, h, w);
        let hw = h * w;
        for i in 0..n {
            let mut off = 0;
            let dst = out.image_mut(i);
            for p in parts {
                assert!(p.n == n && p.h == h && p.w == w, "concat shape mismatch");
                let src = p.image(i);
                dst[off..off + src.len()].copy_from_slice(src);
                off += p.c * hw;
            }
        }
        out
    }

    /// Splits a channel-concatenated gradient back into its parts.
    pub fn split(&self, channels: &[usize]) -> Vec<Tensor> {
        let hw = self.hw();
        let mut outs: Vec<Tensor> = channels.iter().map(|&c| Tensor::zeros(self.n, c, self.h, self.w)).collect();
        for i in 0..self.n {
            let src = self.image(i);
            let mut off = 0;
            for o in outs.iter_mut() {
                let len = o.c * hw;
                o.image_mut(i).copy_from_slice(&src[off..off + len]);
                off += len;
            }
        }
        outs
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.data.len(), other.data.len());
        self.data.iter_mut().zip(&other.data).for_each(|(a, b)| *a += b);
    }
}

/// 3×3 convolution, stride 1, zero padding 1.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv3x3 {
    pub in_ch: usize,
    pub out_ch: usize,
    pub weight: Param,
    pub bias: Param,
}

/// Strided matrix view: element `(r, c)` lives at `offset + r·rs + c·cs`.
#[derive(Clone, Copy)]
struct View {
    offset: usize,
    rs: usize,
    cs: usize,
}

impl View {
    fn new(offset: usize, rs: usize, cs: usize) -> Self {
        Self { offset, rs, cs }
    }

    fn check(&self, rows: usize, cols: usize, len: usize) {
        let last = self.offset + (rows - 1) * self.rs + (cols - 1) * self.cs;
        assert!(last < len, "strided view exceeds its buffer ({last} >= {len})");
    }
}

/// `C = A·B + beta·C` on strided views.
#[allow(clippy::too_many_arguments)]
fn gemm_view(m: usize, k: usize, n: usize, a: &[f32], va: View, b: &[f32], vb: View, c: &mut [f32], vc: View, beta: f32) {
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    va.check(m, k, a.len());
    vb.check(k, n, b.len());
    vc.check(m, n, c.len());
    // SAFETY: every view was bounds-checked against its slice above and the
    // output slice is exclusively borrowed.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr().add(va.offset),
            va.rs as isize,
            va.cs as isize,
            b.as_ptr().add(vb.offset),
            vb.rs as isize,
            vb.cs as isize,
            beta,
            c.as_mut_ptr().add(vc.offset),
            vc.rs as isize,
            vc.cs as isize,
        );
    }
}

/// Zero-padded planes laid out so that every 3×3 tap is a constant shift.
///
/// Each channel occupies `stride` values: a margin of `wp + 1`, the
/// `(h + 2)×(w + 2)` padded plane, and another margin. Computing on the
/// whole padded grid lets a tap at offset `(dy, dx)` read the plane shifted
/// by `dy·wp + dx`, so a convolution is nine GEMMs with no column buffer.
struct Padded {
    wp: usize,
    np: usize,
    margin: usize,
    stride: usize,
}

impl Padded {
    fn new(h: usize, w: usize) -> Self {
        let wp = w + 2;
        let np = (h + 2) * wp;
        let margin = wp + 1;
        Self {
            wp,
            np,
            margin,
            stride: np + 2 * margin,
        }
    }

    fn tap_shift(&self, tap: usize) -> isize {
        (tap / 3) as isize * self.wp as isize + (tap % 3) as isize - self.wp as isize - 1
    }

    fn pack(&self, x: &[f32], c: usize, h: usize, w: usize) -> Vec<f32> {
        let mut buf = vec![0.0f32; c * self.stride];
        for ci in 0..c {
            for y in 0..h {
                let dst = ci * self.stride + self.margin + (y + 1) * self.wp + 1;
                buf[dst..dst + w].copy_from_slice(&x[(ci * h + y) * w..(ci * h + y + 1) * w]);
            }
        }
        buf
    }

    fn unpack_add(&self, buf: &[f32], out: &mut [f32], c: usize, h: usize, w: usize) {
        for ci in 0..c {
            for y in 0..h {
                let src = ci * self.stride + self.margin + (y + 1) * self.wp + 1;
                out[(ci * h + y) * w..(ci * h + y + 1) * w]
                    .iter_mut()
                    .zip(&buf[src..src + w])
                    .for_each(|(o, v)| *o += v);
            }
        }
    }
}

impl Conv3x3 {
    pub fn new(in_ch: usize, out_ch: usize, rng: &mut impl Rng) -> Self {
        let fan_in = in_ch * 9;
        let bound = 1.0 / (fan_in as f32).sqrt();
        Self {
            in_ch,
            out_ch,
            weight: Param::uniform(out_ch * fan_in, bound, rng),
            bias: Param::uniform(out_ch, bound, rng),
        }
    }

    /// View of the `out × in` weight slice for one tap.
    fn tap_view(&self, tap: usize) -> View {
        View::new(tap, self.in_ch * 9, 9)
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        assert_eq!(x.c, self.in_ch, "conv input channels");
        let pad = Padded::new(x.h, x.w);
        let mut out = Tensor::zeros(x.n, self.out_ch, x.h, x.w);
        let mut acc = vec![0.0f32; self.out_ch * pad.np];
        for i in 0..x.n {
            let xp = pad.pack(x.image(i), x.c, x.h, x.w);
            for tap in 0..9 {
                let off = (pad.margin as isize + pad.tap_shift(tap)) as usize;
                let beta = if tap == 0 { 0.0 } else { 1.0 };
                gemm_view(
                    self.out_ch,
                    self.in_ch,
                    pad.np,
                    &self.weight.value,
                    self.tap_view(tap),
                    &xp,
                    View::new(off, pad.stride, 1),
                    &mut acc,
                    View::new(0, pad.np, 1),
                    beta,
                );
            }
            let y = out.image_mut(i);
            let hw = x.h * x.w;
            for o in 0..self.out_ch {
                let b = self.bias.value[o];
                for r in 0..x.h {
                    let src = o * pad.np + (r + 1) * pad.wp + 1;
                    y[o * hw + r * x.w..o * hw + (r + 1) * x.w]
                        .iter_mut()
                        .zip(&acc[src..src + x.w])
                        .for_each(|(d, v)| *d = v + b);
                }
            }
        }
        out
    }

    /// Accumulates parameter gradients; returns `dL/dx` when `need_input_grad`.
    pub fn backward(&mut self, x: &Tensor, dy: &Tensor, need_input_grad: bool) -> Option<Tensor> {
        let pad = Padded::new(x.h, x.w);
        let hw = x.hw();
        let mut dx = need_input_grad.then(|| Tensor::zeros(x.n, x.c, x.h, x.w));
        for i in 0..x.n {
            let xp = pad.pack(x.image(i), x.c, x.h, x.w);
            // dy on the padded grid, zero on the border ring and margins.
            let g = dy.image(i);
            let dyp = pad.pack(g, self.out_ch, x.h, x.w);
            for (o, b) in self.bias.grad.iter_mut().enumerate() {
                *b += g[o * hw..(o + 1) * hw].iter().sum::<f32>();
            }
            for tap in 0..9 {
                let off = (pad.margin as isize + pad.tap_shift(tap)) as usize;
                let wv = self.tap_view(tap);
                // dW_tap[o, ci] += Σ_p dy[o, p] · x[ci, p + shift]
                gemm_view(
                    self.out_ch,
                    pad.np,
                    self.in_ch,
                    &dyp,
                    View::new(pad.margin, pad.stride, 1),
                    &xp,
                    View::new(off, 1, pad.stride),
                    &mut self.weight.grad,
                    wv,
                    1.0,
                );
            }
            if let Some(dx) = dx.as_mut() {
                let mut dxp = vec![0.0f32; x.c * pad.stride];
                for tap in 0..9 {
                    let off = (pad.margin as isize + pad.tap_shift(tap)) as usize;
                    // dx[ci, p + shift] += Σ_o W_tap[o, ci] · dy[o, p]
                    gemm_view(
                        self.in_ch,
                        self.out_ch,
                        pad.np,
                        &self.weight.value,
                        View::new(tap, 9, self.in_ch * 9),
                        &dyp,
                        View::new(pad.margin, pad.stride, 1),
                        &mut dxp,
                        View::new(off, pad.stride, 1),
                        1.0,
                    );
                }
                pad.unpack_add(&dxp, dx.image_mut(i), x.c, x.h, x.w);
            }
        }
        dx
    }
}

/// Per-channel batch normalization over N×H×W.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm2d {
    pub channels: usize,
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Vec<f32>,
    pub running_var: Vec<f32>,
    pub momentum: f32,
    pub eps: f32,
}

/// Saved activations of a training-mode batch-norm forward pass.
pub struct BnCache {
    xhat: Tensor,
    inv_std: Vec<f32>,
}

impl BatchNorm2d {
    pub fn new(channels: usize) -> Self {
        Self {
            channels,
            gamma: Param::filled(channels, 1.0),
            beta: Param::zeros(channels),
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    fn batch_stats(&self, x: &Tensor) -> (Vec<f32>, Vec<f32>) {
        let hw = x.hw();
        let count = (x.n * hw) as f64;
        let mut mean = vec![0.0f32; x.c];
        let mut var = vec![0.0f32; x.c];
        for c in 0..x.c {
            let mut s = 0.0f64;
            for i in 0..x.n {
                s += x.image(i)[c * hw..(c + 1) * hw].iter().map(|v| *v as f64).sum::<f64>();
            }
            let m = s / count;
            let mut q = 0.0f64;
            for i in 0..x.n {
                q += x.image(i)[c * hw..(c + 1) * hw]
                    .iter()
                    .map(|v| (*v as f64 - m).powi(2))
                    .sum::<f64>();
            }
            mean[c] = m as f32;
            var[c] = (q / count) as f32;
        }
        (mean, var)
    }

    fn apply(&self, x: &Tensor, mean: &[f32], var: &[f32]) -> (Tensor, Tensor, Vec<f32>) {
        let hw = x.hw();
        let inv_std: Vec<f32> = var.iter().map(|v| 1.0 / (v + self.eps).sqrt()).collect();
        let mut xhat = x.clone();
        let mut y = x.clone();
        for i in 0..x.n {
            let xi = xhat.image_mut(i);
            for c in 0..x.c {
                xi[c * hw..(c + 1) * hw]
                    .iter_mut()
                    .for_each(|v| *v = (*v - mean[c]) * inv_std[c]);
            }
            let yi = y.image_mut(i);
            let xi = xhat.image(i);
            for c in 0..x.c {
                let (g, b) = (self.gamma.value[c], self.beta.value[c]);
                yi[c * hw..(c + 1) * hw]
                    .iter_mut()
                    .zip(&xi[c * hw..(c + 1) * hw])
                    .for_each(|(o, v)| *o = g * v + b);
            }
        }
        (y, xhat, inv_std)
    }

    /// Training-mode forward: normalizes with batch statistics and updates
    /// the running estimates.
    pub fn forward_train(&mut self, x: &Tensor) -> (Tensor, BnCache) {
        let (mean, var) = self.batch_stats(x);
        let count = (x.n * x.hw()) as f32;
        let unbias = if count > 1.0 { count / (count - 1.0) } else { 1.0 };
        for c in 0..self.channels {
            self.running_mean[c] = (1.0 - self.momentum) * self.running_mean[c] + self.momentum * mean[c];
            self.running_var[c] = (1.0 - self.momentum) * self.running_var[c] + self.momentum * var[c] * unbias;
        }
        let (y, xhat, inv_std) = self.apply(x, &mean, &var);
        (y, BnCache { xhat, inv_std })
    }

    pub fn forward_eval(&self, x: &Tensor) -> Tensor {
        self.apply(x, &self.running_mean, &self.running_var).0
    }

    /// Replaces the running statistics with the exact statistics of `x`.
    /// Eval-mode output on `x` then equals the training-mode output.
    pub fn recalibrate(&mut self, x: &Tensor) {
        let (mean, var) = self.batch_stats(x);
        self.running_mean = mean;
        self.running_var = var;
    }

    pub fn backward(&mut self, cache: &BnCache, dy: &Tensor) -> Tensor {
        let hw = dy.hw();
        let count = (dy.n * hw) as f32;
        let mut dx = Tensor::zeros(dy.n, dy.c, dy.h, dy.w);
        for c in 0..self.channels {
            let (mut sum_dy, mut sum_dy_xhat) = (0.0f32, 0.0f32);
            for i in 0..dy.n {
                let d = &dy.image(i)[c * hw..(c + 1) * hw];
                let xh = &cache.xhat.image(i)[c * hw..(c + 1) * hw];
                sum_dy += d.iter().sum::<f32>();
                sum_dy_xhat += d.iter().zip(xh).map(|(a, b)| a * b).sum::<f32>();
            }
            self.gamma.grad[c] += sum_dy_xhat;
            self.beta.grad[c] += sum_dy;
            let scale = self.gamma.value[c] * cache.inv_std[c] / count;
            for i in 0..dy.n {
                let d = &dy.image(i)[c * hw..(c + 1) * hw];
                let xh = &cache.xhat.image(i)[c * hw..(c + 1) * hw];
                let out = &mut dx.image_mut(i)[c * hw..(c + 1) * hw];
                for ((o, dv), x) in out.iter_mut().zip(d).zip(xh) {
                    *o = scale * (count * dv - sum_dy - x * sum_dy_xhat);
                }
            }
        }
        dx
    }
}

/// Conv → batch-norm → ReLU, the hidden stage of both watermark networks.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvBnRelu {
    pub conv: Conv3x3,
    pub bn: BatchNorm2d,
}

pub struct StageCache {
    conv_out: Tensor,
    bn: BnCache,
    out: Tensor,
}

impl StageCache {
    pub fn output(&self) -> &Tensor {
        &self.out
    }
}

impl ConvBnRelu {
    pub fn new(in_ch: usize, out_ch: usize, rng: &mut impl Rng) -> Self {
        Self {
            conv: Conv3x3::new(in_ch, out_ch, rng),
            bn: BatchNorm2d::new(out_ch),
        }
    }

    pub fn forward_train(&mut self, x: &Tensor) -> StageCache {
        let conv_out = self.conv.forward(x);
        let (mut out, bn) = self.bn.forward_train(&conv_out);
        relu_inplace(&mut out.data);
        StageCache { conv_out, bn, out }
    }

    pub fn forward_eval(&self, x: &Tensor) -> Tensor {
        let mut out = self.bn.forward_eval(&self.conv.forward(x));
        relu_inplace(&mut out.data);
        out
    }

    pub fn recalibrate(&mut self, x: &Tensor) -> Tensor {
        let conv_out = self.conv.forward(x);
        self.bn.recalibrate(&conv_out);
        let mut out = self.bn.forward_eval(&conv_out);
        relu_inplace(&mut out.data);
        out
    }

    pub fn backward(&mut self, x: &Tensor, cache: &StageCache, mut dy: Tensor, need_input_grad: bool) -> Option<Tensor> {
        relu_backward(&cache.out.data, &mut dy.data);
        let d_conv = self.bn.backward(&cache.bn, &dy);
        let _ = &cache.conv_out;
        self.conv.backward(x, &d_conv, need_input_grad)
    }

    pub fn tensors<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Vec<f32>)>) {
        out.push((format!("{prefix}.conv.weight"), &self.conv.weight.value));
        out.push((format!("{prefix}.conv.bias"), &self.conv.bias.value));
        out.push((format!("{prefix}.bn.gamma"), &self.bn.gamma.value));
        out.push((format!("{prefix}.bn.beta"), &self.bn.beta.value));
        out.push((format!("{prefix}.bn.running_mean"), &self.bn.running_mean));
        out.push((format!("{prefix}.bn.running_var"), &self.bn.running_var));
    }

    pub fn tensors_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Vec<f32>)>) {
        out.push((format!("{prefix}.conv.weight"), &mut self.conv.weight.value));
        out.push((format!("{prefix}.conv.bias"), &mut self.conv.bias.value));
        out.push((format!("{prefix}.bn.gamma"), &mut self.bn.gamma.value));
        out.push((format!("{prefix}.bn.beta"), &mut self.bn.beta.value));
        out.push((format!("{prefix}.bn.running_mean"), &mut self.bn.running_mean));
        out.push((format!("{prefix}.bn.running_var"), &mut self.bn.running_var));
    }

    pub fn params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Param>) {
        out.push(&mut self.conv.weight);
        out.push(&mut self.conv.bias);
        out.push(&mut self.bn.gamma);
        out.push(&mut self.bn.beta);
    }
}

/// Stacks same-shape images into an NCHW tensor.
pub fn images_to_tensor(images: &[&Image]) -> Tensor {
    let (h, w, c) = images[0].shape();
    let mut data = Vec::with_capacity(images.len() * c * h * w);
    for img in images {
        assert_eq!(img.shape(), (h, w, c), "batch images must share a shape");
        data.extend(img.to_chw_f32());
    }
    Tensor::from_data(images.len(), c, h, w, data)
}

pub fn tensor_to_images(t: &Tensor) -> Vec<Image> {
    (0..t.n)
        .map(|i| Image::from_chw_f32(t.h, t.w, t.c, t.image(i)).expect("tensor shape is consistent"))
        .collect()
}

/// Writes an HWC `f64` gradient into batch slot `i` of an NCHW tensor.
pub fn scatter_hwc_grad(t: &mut Tensor, i: usize, grad: &[f64], scale: f64) {
    let (hw, c) = (t.hw(), t.c);
    let dst = t.image_mut(i);
    for (p, px) in grad.chunks_exact(c).enumerate() {
        for (ch, g) in px.iter().enumerate() {
            dst[ch * hw + p] += (g * scale) as f32;
        }
    }
}

/// Clamps into [0, 1] in place; returns the mask of unclamped entries.
pub fn clamp01_with_mask(x: &mut [f32]) -> Vec<bool> {
    x.iter_mut()
        .map(|v| {
            let inside = (0.0..=1.0).contains(v);
            *v = v.clamp(0.0, 1.0);
            inside
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(7)
    }

    #[test]
    fn gemm_transposes() {
        // A = [[1,2,3],[4,5,6]] (2x3), B = [[1,0],[0,1],[1,1]] (3x2)
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let b = [1.0, 0.0, 0.0, 1.0, 1.0, 1.0];
        let mut c = [0.0; 4];
        gemm(2, 3, 2, &a, false, &b, false, &mut c, 0.0);
        assert_eq!(c, [4.0, 5.0, 10.0, 11.0]);
        let at = [1.0, 4.0, 2.0, 5.0, 3.0, 6.0];
        let bt = [1.0, 0.0, 1.0, 0.0, 1.0, 1.0];
        let mut c2 = [0.0; 4];
        gemm(2, 3, 2, &at, true, &bt, true, &mut c2, 0.0);
        assert_eq!(c2, c);
    }

    /// Central differences of `loss(x) = Σ r ⊙ f(x)` against backward.
    fn check_grad(analytic: &[f32], f: impl Fn(usize, f32) -> f64, probes: usize, tol: f64) {
        let eps = 1e-2f32;
        for i in (0..analytic.len()).step_by((analytic.len() / probes).max(1)) {
            let fd = (f(i, eps) - f(i, -eps)) / (2.0 * eps as f64);
            let a = analytic[i] as f64;
            assert!(
                (fd - a).abs() <= tol * fd.abs().max(a.abs()).max(1e-2),
                "index {i}: analytic {a} vs numeric {fd}"
            );
        }
    }

    fn dot(a: &[f32], b: &[f32]) -> f64 {
        a.iter().zip(b).map(|(x, y)| *x as f64 * *y as f64).sum()
    }

    #[test]
    fn linear_gradients() {
        let mut r = rng();
        let mut lin = Linear::new(5, 4, &mut r);
        let x: Vec<f32> = (0..15).map(|_| r.gen_range(-1.0..1.0)).collect();
        let proj: Vec<f32> = (0..12).map(|_| r.gen_range(-1.0..1.0)).collect();
        let dx = lin.backward(&x, &proj, 3);
        let base = lin.clone();
        check_grad(&lin.weight.grad.clone(), |i, e| {
            let mut l = base.clone();
            l.weight.value[i] += e;
            dot(&l.forward(&x, 3), &proj)
        }, 10, 1e-2);
        check_grad(&dx, |i, e| {
            let mut xx = x.clone();
            xx[i] += e;
            dot(&base.forward(&xx, 3), &proj)
        }, 10, 1e-2);
    }

    #[test]
    fn conv_preserves_shape_and_gradients() {
        let mut r = rng();
        let mut conv = Conv3x3::new(2, 3, &mut r);
        let x = Tensor::from_data(2, 2, 5, 6, (0..120).map(|_| r.gen_range(-1.0..1.0)).collect());
        let y = conv.forward(&x);
        assert_eq!((y.n, y.c, y.h, y.w), (2, 3, 5, 6));
        let proj: Vec<f32> = (0..y.data.len()).map(|_| r.gen_range(-1.0..1.0)).collect();
        let dy = Tensor::from_data(2, 3, 5, 6, proj.clone());
        let base = conv.clone();
        let dx = conv.backward(&x, &dy, true).unwrap();
        check_grad(&conv.weight.grad.clone(), |i, e| {
            let mut c = base.clone();
            c.weight.value[i] += e;
            dot(&c.forward(&x).data, &proj)
        }, 12, 1e-2);
        check_grad(&dx.data, |i, e| {
            let mut xx = x.clone();
            xx.data[i] += e;
            dot(&base.forward(&xx).data, &proj)
        }, 20, 1e-2);
    }

    #[test]
    fn batchnorm_gradients() {
        let mut r = rng();
        let mut bn = BatchNorm2d::new(3);
        bn.gamma.value = vec![0.5, 1.5, -0.7];
        bn.beta.value = vec![0.1, -0.2, 0.3];
        let x = Tensor::from_data(2, 3, 4, 4, (0..96).map(|_| r.gen_range(-2.0..2.0)).collect());
        let proj: Vec<f32> = (0..96).map(|_| r.gen_range(-1.0..1.0)).collect();
        let base = bn.clone();
        let (_, cache) = bn.forward_train(&x);
        let dx = bn.backward(&cache, &Tensor::from_data(2, 3, 4, 4, proj.clone()));
        check_grad(&dx.data, |i, e| {
            let mut b = base.clone();
            let mut xx = x.clone();
            xx.data[i] += e;
            dot(&b.forward_train(&xx).0.data, &proj)
        }, 24, 2e-2);
        check_grad(&bn.gamma.grad.clone(), |i, e| {
            let mut b = base.clone();
            b.gamma.value[i] += e;
            dot(&b.forward_train(&x).0.data, &proj)
        }, 3, 1e-2);
    }

    #[test]
    fn recalibrated_eval_matches_train_mode() {
        let mut r = rng();
        let mut stage = ConvBnRelu::new(3, 4, &mut r);
        let x = Tensor::from_data(1, 3, 6, 6, (0..108).map(|_| r.gen_range(0.0..1.0)).collect());
        stage.recalibrate(&x);
        let train = stage.clone().forward_train(&x).out;
        let eval = stage.forward_eval(&x);
        for (a, b) in train.data.iter().zip(&eval.data) {
            assert!((a - b).abs() <= 1e-5 * a.abs().max(1.0), "{a} vs {b}");
        }
    }

    #[test]
    fn concat_split_inverse() {
        let a = Tensor::from_data(2, 1, 2, 2, (0..8).map(|v| v as f32).collect());
        let b = Tensor::from_data(2, 2, 2, 2, (0..16).map(|v| 100.0 + v as f32).collect());
        let cat = Tensor::concat(&[&a, &b]);
        assert_eq!(cat.c, 3);
        assert_eq!(&cat.image(1)[..4], &a.image(1)[..]);
        let parts = cat.split(&[1, 2]);
        assert_eq!(parts[0], a);
        assert_eq!(parts[1], b);
    }

    #[test]
    fn adam_descends_a_quadratic() {
        let mut p = Param::filled(3, 5.0);
        let mut opt = Adam::new(0.1);
        for _ in 0..500 {
            p.grad = p.value.iter().map(|v| 2.0 * (v - 1.0)).collect();
            opt.step(&mut [&mut p]);
        }
        assert!(p.value.iter().all(|v| (v - 1.0).abs() < 1e-2), "{:?}", p.value);
    }

    #[test]
    fn train_config_rejects_zero_steps() {
        let cfg = TrainConfig { steps: 0, ..Default::default() };
        assert!(matches!(cfg.validate("x"), Err(Error::Config(_))));
    }
}
