//! Image quality measures and the watermark training losses.
//!
//! Everything here runs in `f64`. SSIM is evaluated on pixels rescaled to
//! the [0, 255] dynamic range with an 11×11 Gaussian window (σ = 1.5) over
//! fully-contained windows only; multi-channel scores are channel means.
//!
//! The gradient routines return derivatives with respect to the *second*
//! (candidate) argument in the same HWC layout as [`Image::data`].

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imagery::{check_same_shape, Image};
use crate::par;

/// Weights of the embedding loss (`alpha`) and the extraction loss
/// (`beta`, `gamma`, `mu`).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub mu: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 0.3,
            beta: 0.3,
            gamma: 0.5,
            mu: 0.5,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta), ("gamma", self.gamma), ("mu", self.mu)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("loss weight {name} must be >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SsimConstants {
    pub k1: f64,
    pub k2: f64,
    pub dynamic_range: f64,
    pub window: usize,
    pub sigma: f64,
    /// Number of dyadic scales for MS-SSIM.
    pub scales: usize,
}

impl Default for SsimConstants {
    fn default() -> Self {
        Self {
            k1: 0.01,
            k2: 0.03,
            dynamic_range: 255.0,
            window: 11,
            sigma: 1.5,
            scales: 5,
        }
    }
}

impl SsimConstants {
    pub fn c1(&self) -> f64 {
        (self.k1 * self.dynamic_range).powi(2)
    }

    pub fn c2(&self) -> f64 {
        (self.k2 * self.dynamic_range).powi(2)
    }

    fn kernel(&self) -> Vec<f64> {
        gaussian_kernel(self.window, self.sigma)
    }
}

pub(crate) fn gaussian_kernel(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let raw: Vec<f64> = (0..size)
        .map(|i| (-(i as f64 - c).powi(2) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / s).collect()
}

/// Mean squared error over all pixels and channels.
pub fn mse(x: &Image, y: &Image) -> Result<f64> {
    check_same_shape(x, y)?;
    let n = x.data().len() as f64;
    Ok(x.data()
        .iter()
        .zip(y.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / n)
}

/// Peak signal-to-noise ratio in dB with peak 1.0. Identical images give
/// `f64::INFINITY`.
pub fn psnr(x: &Image, y: &Image) -> Result<f64> {
    Ok(psnr_from_mse(mse(x, y)?))
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        -10.0 * mse.log10()
    }
}

/// Reciprocal of PSNR; identical images give 0.
pub fn ber(x: &Image, y: &Image) -> Result<f64> {
    Ok(ber_from_psnr(psnr(x, y)?))
}

pub fn ber_from_psnr(psnr: f64) -> f64 {
    if psnr.is_infinite() {
        0.0
    } else {
        1.0 / psnr
    }
}

/// Normalized correlation (cosine similarity of the flattened pixels).
pub fn nc(w: &Image, w_prime: &Image) -> Result<f64> {
    check_same_shape(w, w_prime)?;
    let (mut dot, mut nw, mut np) = (0.0, 0.0, 0.0);
    for (a, b) in w.data().iter().zip(w_prime.data()) {
        dot += a * b;
        nw += a * a;
        np += b * b;
    }
    if nw == 0.0 || np == 0.0 {
        return Err(Error::Validation(
            "normalized correlation is undefined for an all-zero image".into(),
        ));
    }
    Ok(dot / (nw.sqrt() * np.sqrt()))
}

/// Separable filtering over fully-contained windows.
fn filter_valid(plane: &[f64], h: usize, w: usize, k: &[f64]) -> (Vec<f64>, usize, usize) {
    let n = k.len();
    let (oh, ow) = (h + 1 - n, w + 1 - n);
    let mut tmp = vec![0.0; h * ow];
    for r in 0..h {
        let row = &plane[r * w..(r + 1) * w];
        let out = &mut tmp[r * ow..(r + 1) * ow];
        for (ox, o) in out.iter_mut().enumerate() {
            *o = k.iter().zip(&row[ox..ox + n]).map(|(a, b)| a * b).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for oy in 0..oh {
        let dst = &mut out[oy * ow..(oy + 1) * ow];
        for (t, kt) in k.iter().enumerate() {
            let src = &tmp[(oy + t) * ow..(oy + t + 1) * ow];
            for (d, s) in dst.iter_mut().zip(src) {
                *d += kt * s;
            }
        }
    }
    (out, oh, ow)
}

/// Adjoint of [`filter_valid`]: scatters an `oh × ow` map back onto `h × w`.
fn filter_valid_adjoint(g: &[f64], h: usize, w: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (oh, ow) = (h + 1 - n, w + 1 - n);
    let mut tmp = vec![0.0; h * ow];
    for oy in 0..oh {
        let src = &g[oy * ow..(oy + 1) * ow];
        for (t, kt) in k.iter().enumerate() {
            let dst = &mut tmp[(oy + t) * ow..(oy + t + 1) * ow];
            for (d, s) in dst.iter_mut().zip(src) {
                *d += kt * s;
            }
        }
    }
    let mut out = vec![0.0; h * w];
    for r in 0..h {
        let src = &tmp[r * ow..(r + 1) * ow];
        let dst = &mut out[r * w..(r + 1) * w];
        for (ox, s) in src.iter().enumerate() {
            for (t, kt) in k.iter().enumerate() {
                dst[ox + t] += kt * s;
            }
        }
    }
    out
}

/// Local statistics of one channel pair on the [0, L] scale.
struct WindowStats {
    xs: Vec<f64>,
    ys: Vec<f64>,
    mu_x: Vec<f64>,
    mu_y: Vec<f64>,
    sxx: Vec<f64>,
    syy: Vec<f64>,
    sxy: Vec<f64>,
}

fn window_stats(x: &[f64], y: &[f64], h: usize, w: usize, c: &SsimConstants, k: &[f64]) -> WindowStats {
    let xs: Vec<f64> = x.iter().map(|v| v * c.dynamic_range).collect();
    let ys: Vec<f64> = y.iter().map(|v| v * c.dynamic_range).collect();
    let xx: Vec<f64> = xs.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = ys.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = xs.iter().zip(&ys).map(|(a, b)| a * b).collect();
    let (mu_x, _, _) = filter_valid(&xs, h, w, k);
    let (mu_y, _, _) = filter_valid(&ys, h, w, k);
    let (exx, _, _) = filter_valid(&xx, h, w, k);
    let (eyy, _, _) = filter_valid(&yy, h, w, k);
    let (exy, _, _) = filter_valid(&xy, h, w, k);
    let sxx = exx.iter().zip(&mu_x).map(|(e, m)| e - m * m).collect();
    let syy = eyy.iter().zip(&mu_y).map(|(e, m)| e - m * m).collect();
    let sxy = exy
        .iter()
        .zip(mu_x.iter().zip(&mu_y))
        .map(|(e, (a, b))| e - a * b)
        .collect();
    WindowStats {
        xs,
        ys,
        mu_x,
        mu_y,
        sxx,
        syy,
        sxy,
    }
}

/// `(mean SSIM, mean contrast-structure)` of one channel.
fn ssim_plane(x: &[f64], y: &[f64], h: usize, w: usize, c: &SsimConstants) -> (f64, f64) {
    let k = c.kernel();
    let s = window_stats(x, y, h, w, c, &k);
    let (c1, c2) = (c.c1(), c.c2());
    let n = s.mu_x.len() as f64;
    let (mut acc_s, mut acc_cs) = (0.0, 0.0);
    for q in 0..s.mu_x.len() {
        let (mx, my) = (s.mu_x[q], s.mu_y[q]);
        let a1 = 2.0 * mx * my + c1;
        let b1 = mx * mx + my * my + c1;
        let a2 = 2.0 * s.sxy[q] + c2;
        let b2 = s.sxx[q] + s.syy[q] + c2;
        acc_s += (a1 * a2) / (b1 * b2);
        acc_cs += a2 / b2;
    }
    (acc_s / n, acc_cs / n)
}

/// Gradient of `g_ssim·SSIM + g_cs·CS` with respect to `y` (unscaled pixels).
fn ssim_plane_grad_y(
    x: &[f64],
    y: &[f64],
    h: usize,
    w: usize,
    c: &SsimConstants,
    g_ssim: f64,
    g_cs: f64,
) -> Vec<f64> {
    let k = c.kernel();
    let s = window_stats(x, y, h, w, c, &k);
    let (c1, c2) = (c.c1(), c.c2());
    let n = s.mu_x.len();
    let (ds, dc) = (g_ssim / n as f64, g_cs / n as f64);
    let mut g_mu = vec![0.0; n];
    let mut g_exy = vec![0.0; n];
    let mut g_eyy = vec![0.0; n];
    for q in 0..n {
        let (mx, my) = (s.mu_x[q], s.mu_y[q]);
        let a1 = 2.0 * mx * my + c1;
        let b1 = mx * mx + my * my + c1;
        let a2 = 2.0 * s.sxy[q] + c2;
        let b2 = s.sxx[q] + s.syy[q] + c2;
        let denom = b1 * b2;
        let ssim = a1 * a2 / denom;
        let cs = a2 / b2;
        let ds_dmu = 2.0 * mx * (a2 - a1) / denom - ssim * 2.0 * my * (b2 - b1) / denom;
        let ds_dexy = 2.0 * a1 / denom;
        let ds_deyy = -ssim / b2;
        let dc_dmu = (-2.0 * mx + 2.0 * my * cs) / b2;
        let dc_dexy = 2.0 / b2;
        let dc_deyy = -cs / b2;
        g_mu[q] = ds * ds_dmu + dc * dc_dmu;
        g_exy[q] = ds * ds_dexy + dc * dc_dexy;
        g_eyy[q] = ds * ds_deyy + dc * dc_deyy;
    }
    let a_mu = filter_valid_adjoint(&g_mu, h, w, &k);
    let a_exy = filter_valid_adjoint(&g_exy, h, w, &k);
    let a_eyy = filter_valid_adjoint(&g_eyy, h, w, &k);
    (0..h * w)
        .map(|p| (a_mu[p] + s.xs[p] * a_exy[p] + 2.0 * s.ys[p] * a_eyy[p]) * c.dynamic_range)
        .collect()
}

fn check_window(x: &Image, y: &Image, c: &SsimConstants) -> Result<()> {
    check_same_shape(x, y)?;
    if x.height() < c.window || x.width() < c.window {
        return Err(Error::Validation(format!(
            "image {}x{} is smaller than the {}x{} SSIM window",
            x.height(),
            x.width(),
            c.window,
            c.window
        )));
    }
    Ok(())
}

/// Mean SSIM over windows and channels with default constants.
pub fn ssim(x: &Image, y: &Image) -> Result<f64> {
    ssim_with(x, y, &SsimConstants::default())
}

pub fn ssim_with(x: &Image, y: &Image, c: &SsimConstants) -> Result<f64> {
    check_window(x, y, c)?;
    let (h, w, ch) = x.shape();
    let per: Vec<f64> = par::map_range(ch, |k| ssim_plane(&x.plane(k), &y.plane(k), h, w, c).0);
    Ok(per.iter().sum::<f64>() / ch as f64)
}

/// Largest scale count (capped at `c.scales`) whose coarsest level still
/// fits one window.
pub fn feasible_scales(height: usize, width: usize, c: &SsimConstants) -> usize {
    let mut m = 0;
    let (mut h, mut w) = (height, width);
    while m < c.scales && h >= c.window && w >= c.window {
        m += 1;
        h /= 2;
        w /= 2;
    }
    m
}

/// 2×2 average pooling with floor semantics.
fn downsample(p: &[f64], h: usize, w: usize) -> (Vec<f64>, usize, usize) {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            let i = 2 * y * w + 2 * x;
            out[y * ow + x] = 0.25 * (p[i] + p[i + 1] + p[i + w] + p[i + w + 1]);
        }
    }
    (out, oh, ow)
}

fn downsample_adjoint(g: &[f64], h: usize, w: usize) -> Vec<f64> {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0.0; h * w];
    for y in 0..oh {
        for x in 0..ow {
            let v = 0.25 * g[y * ow + x];
            let i = 2 * y * w + 2 * x;
            out[i] += v;
            out[i + 1] += v;
            out[i + w] += v;
            out[i + w + 1] += v;
        }
    }
    out
}

/// Per-scale SSIM terms of one channel, clamped at zero.
fn ms_terms(x: &[f64], y: &[f64], h: usize, w: usize, c: &SsimConstants, m: usize) -> Vec<(f64, Vec<f64>, Vec<f64>, usize, usize)> {
    let mut out = Vec::with_capacity(m);
    let (mut xs, mut ys, mut hh, mut ww) = (x.to_vec(), y.to_vec(), h, w);
    for j in 0..m {
        let (s, _) = ssim_plane(&xs, &ys, hh, ww, c);
        out.push((s.max(0.0), xs.clone(), ys.clone(), hh, ww));
        if j + 1 < m {
            let (nx, nh, nw) = downsample(&xs, hh, ww);
            let (ny, _, _) = downsample(&ys, hh, ww);
            xs = nx;
            ys = ny;
            hh = nh;
            ww = nw;
        }
    }
    out
}

fn resolve_scales(x: &Image, c: &SsimConstants, scales: Option<usize>) -> Result<usize> {
    let feasible = feasible_scales(x.height(), x.width(), c);
    match scales {
        Some(0) => Err(Error::Validation("MS-SSIM needs at least one scale".into())),
        Some(m) if m > feasible => Err(Error::Validation(format!(
            "{m} MS-SSIM scales do not fit a {}x{} image (at most {feasible})",
            x.height(),
            x.width()
        ))),
        Some(m) => Ok(m),
        None => {
            if feasible < c.scales {
                log::debug!(
                    "MS-SSIM reduced from {} to {feasible} scales for {}x{} input",
                    c.scales,
                    x.height(),
                    x.width()
                );
            }
            Ok(feasible)
        }
    }
}

/// Multi-scale SSIM: product over dyadic scales of the per-scale SSIM
/// (luminance and contrast-structure at every scale, unit exponents).
/// The scale count shrinks to what the image size supports.
pub fn ms_ssim(x: &Image, y: &Image) -> Result<f64> {
    ms_ssim_with(x, y, &SsimConstants::default(), None)
}

pub fn ms_ssim_with(x: &Image, y: &Image, c: &SsimConstants, scales: Option<usize>) -> Result<f64> {
    check_window(x, y, c)?;
    let m = resolve_scales(x, c, scales)?;
    let (h, w, ch) = x.shape();
    let per: Vec<f64> = par::map_range(ch, |k| {
        ms_terms(&x.plane(k), &y.plane(k), h, w, c, m)
            .iter()
            .map(|t| t.0)
            .product()
    });
    Ok(per.iter().sum::<f64>() / ch as f64)
}

fn scatter_plane(grad: &mut [f64], plane: &[f64], c: usize, channels: usize, scale: f64) {
    for (p, g) in plane.iter().enumerate() {
        grad[p * channels + c] += scale * g;
    }
}

/// SSIM and its gradient with respect to `y`.
pub fn ssim_grad(x: &Image, y: &Image, c: &SsimConstants) -> Result<(f64, Vec<f64>)> {
    check_window(x, y, c)?;
    let (h, w, ch) = x.shape();
    let per: Vec<(f64, Vec<f64>)> = par::map_range(ch, |k| {
        let (xp, yp) = (x.plane(k), y.plane(k));
        let (s, _) = ssim_plane(&xp, &yp, h, w, c);
        (s, ssim_plane_grad_y(&xp, &yp, h, w, c, 1.0, 0.0))
    });
    let mut grad = vec![0.0; x.data().len()];
    let mut total = 0.0;
    for (k, (s, g)) in per.iter().enumerate() {
        total += s;
        scatter_plane(&mut grad, g, k, ch, 1.0 / ch as f64);
    }
    Ok((total / ch as f64, grad))
}

/// MS-SSIM and its gradient with respect to `y`.
pub fn ms_ssim_grad(x: &Image, y: &Image, c: &SsimConstants, scales: Option<usize>) -> Result<(f64, Vec<f64>)> {
    check_window(x, y, c)?;
    let m = resolve_scales(x, c, scales)?;
    let (h, w, ch) = x.shape();
    let per: Vec<(f64, Vec<f64>)> = par::map_range(ch, |k| {
        let terms = ms_terms(&x.plane(k), &y.plane(k), h, w, c, m);
        let value: f64 = terms.iter().map(|t| t.0).product();
        // Walk coarse to fine, carrying the gradient down the pyramid.
        let mut carry: Option<Vec<f64>> = None;
        for j in (0..m).rev() {
            let (s, xs, ys, hh, ww) = &terms[j];
            let mut g = match carry.take() {
                Some(coarse) => downsample_adjoint(&coarse, *hh, *ww),
                None => vec![0.0; hh * ww],
            };
            if *s > 0.0 {
                let others: f64 = terms
                    .iter()
                    .enumerate()
                    .filter(|(i, _)| *i != j)
                    .map(|(_, t)| t.0)
                    .product();
                let local = ssim_plane_grad_y(xs, ys, *hh, *ww, c, others, 0.0);
                g.iter_mut().zip(&local).for_each(|(a, b)| *a += b);
            }
            carry = Some(g);
        }
        (value, carry.expect("at least one scale"))
    });
    let mut grad = vec![0.0; x.data().len()];
    let mut total = 0.0;
    for (k, (v, g)) in per.iter().enumerate() {
        total += v;
        scatter_plane(&mut grad, g, k, ch, 1.0 / ch as f64);
    }
    Ok((total / ch as f64, grad))
}

/// Embedding loss `alpha · mse(k, k')`.
pub fn loss_le(k: &Image, k_prime: &Image, wts: &LossWeights) -> Result<f64> {
    Ok(wts.alpha * mse(k, k_prime)?)
}

/// Embedding loss and its gradient with respect to `k_prime`.
pub fn loss_le_grad(k: &Image, k_prime: &Image, wts: &LossWeights) -> Result<(f64, Vec<f64>)> {
    let value = loss_le(k, k_prime, wts)?;
    let n = k.data().len() as f64;
    let grad = k
        .data()
        .iter()
        .zip(k_prime.data())
        .map(|(a, b)| wts.alpha * 2.0 * (b - a) / n)
        .collect();
    Ok((value, grad))
}

/// Extraction loss `beta·mse + gamma·(1 − ssim) + mu·(1 − ms_ssim)`.
pub fn loss_ld(w: &Image, w_prime: &Image, wts: &LossWeights) -> Result<f64> {
    let c = SsimConstants::default();
    let mut v = wts.beta * mse(w, w_prime)?;
    if wts.gamma != 0.0 {
        v += wts.gamma * (1.0 - ssim_with(w, w_prime, &c)?);
    }
    if wts.mu != 0.0 {
        v += wts.mu * (1.0 - ms_ssim_with(w, w_prime, &c, None)?);
    }
    Ok(v)
}

/// Extraction loss and its gradient with respect to `w_prime`.
pub fn loss_ld_grad(w: &Image, w_prime: &Image, wts: &LossWeights) -> Result<(f64, Vec<f64>)> {
    check_same_shape(w, w_prime)?;
    let c = SsimConstants::default();
    let n = w.data().len() as f64;
    let mut value = wts.beta * mse(w, w_prime)?;
    let mut grad: Vec<f64> = w
        .data()
        .iter()
        .zip(w_prime.data())
        .map(|(a, b)| wts.beta * 2.0 * (b - a) / n)
        .collect();
    if wts.gamma != 0.0 {
        let (s, g) = ssim_grad(w, w_prime, &c)?;
        value += wts.gamma * (1.0 - s);
        grad.iter_mut().zip(&g).for_each(|(a, b)| *a -= wts.gamma * b);
    }
    if wts.mu != 0.0 {
        let (s, g) = ms_ssim_grad(w, w_prime, &c, None)?;
        value += wts.mu * (1.0 - s);
        grad.iter_mut().zip(&g).for_each(|(a, b)| *a -= wts.mu * b);
    }
    Ok((value, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(h: usize, w: usize, seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::from_fn(h, w, |_, _| [rng.gen(), rng.gen(), rng.gen()])
    }

    /// Smooth random image: blurred noise plus a gradient, closer to the
    /// statistics of real renders than white noise.
    fn smooth_image(h: usize, w: usize, seed: u64) -> Image {
        let base = random_image(h, w, seed);
        Image::from_fn(h, w, |y, x| {
            let mut px = [0.0; 3];
            for (c, v) in px.iter_mut().enumerate() {
                let mut acc = 0.0;
                let mut cnt = 0.0;
                for dy in -2i64..=2 {
                    for dx in -2i64..=2 {
                        let yy = (y as i64 + dy).clamp(0, h as i64 - 1) as usize;
                        let xx = (x as i64 + dx).clamp(0, w as i64 - 1) as usize;
                        acc += base.get(yy, xx, c);
                        cnt += 1.0;
                    }
                }
                *v = 0.6 * acc / cnt + 0.4 * (x + y) as f64 / (h + w) as f64;
            }
            px
        })
    }

    /// Direct per-window SSIM, one window at a time, no separable filtering.
    fn brute_ssim(x: &Image, y: &Image) -> f64 {
        let c = SsimConstants::default();
        let n = c.window;
        let g1 = gaussian_kernel(n, c.sigma);
        let (h, w, ch) = x.shape();
        let mut total = 0.0;
        for k in 0..ch {
            let mut acc = 0.0;
            let mut count = 0.0;
            for oy in 0..=h - n {
                for ox in 0..=w - n {
                    let (mut mx, mut my, mut exx, mut eyy, mut exy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                    for i in 0..n {
                        for j in 0..n {
                            let g = g1[i] * g1[j];
                            let a = 255.0 * x.get(oy + i, ox + j, k);
                            let b = 255.0 * y.get(oy + i, ox + j, k);
                            mx += g * a;
                            my += g * b;
                            exx += g * a * a;
                            eyy += g * b * b;
                            exy += g * a * b;
                        }
                    }
                    let (vx, vy, cxy) = (exx - mx * mx, eyy - my * my, exy - mx * my);
                    acc += ((2.0 * mx * my + c.c1()) * (2.0 * cxy + c.c2()))
                        / ((mx * mx + my * my + c.c1()) * (vx + vy + c.c2()));
                    count += 1.0;
                }
            }
            total += acc / count;
        }
        total / ch as f64
    }

    #[test]
    fn mse_examples() {
        let a = Image::filled(4, 4, 3, 0.3);
        assert_eq!(mse(&a, &a).unwrap(), 0.0);
        let zeros = Image::filled(4, 4, 3, 0.0);
        let ones = Image::filled(4, 4, 3, 1.0);
        assert_eq!(mse(&zeros, &ones).unwrap(), 1.0);
        let x = Image::new(2, 2, 1, vec![0.0; 4]).unwrap();
        let y = Image::new(2, 2, 1, vec![0.5, 0.0, 0.0, 0.0]).unwrap();
        assert!((mse(&x, &y).unwrap() - 0.0625).abs() < 1e-15);
        assert!(mse(&x, &zeros).is_err());
    }

    #[test]
    fn psnr_examples() {
        let a = Image::filled(4, 4, 3, 0.3);
        assert_eq!(psnr(&a, &a).unwrap(), f64::INFINITY);
        assert!((psnr_from_mse(1e-3) - 30.0).abs() < 1e-12);
        let b = Image::filled(4, 4, 3, 0.3 + 0.1);
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-9);
    }

    #[test]
    fn ber_examples() {
        assert!((ber_from_psnr(20.0) - 0.05).abs() < 1e-15);
        assert!((ber_from_psnr(33.74) - 0.02964).abs() < 5e-6);
        let a = Image::filled(4, 4, 3, 0.3);
        assert_eq!(ber(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn nc_examples() {
        let w = smooth_image(16, 16, 3);
        assert!((nc(&w, &w).unwrap() - 1.0).abs() < 1e-12);
        let mut half = w.clone();
        half.data_mut().iter_mut().for_each(|v| *v *= 0.5);
        assert!((nc(&w, &half).unwrap() - 1.0).abs() < 1e-12);
        let left = Image::from_fn(4, 4, |_, x| if x < 2 { [1.0; 3] } else { [0.0; 3] });
        let right = Image::from_fn(4, 4, |_, x| if x >= 2 { [0.7; 3] } else { [0.0; 3] });
        assert_eq!(nc(&left, &right).unwrap(), 0.0);
        let zero = Image::filled(4, 4, 3, 0.0);
        assert!(matches!(nc(&w.resized(4, 4).unwrap(), &zero), Err(Error::Validation(_))));
    }

    #[test]
    fn ssim_examples() {
        let x = smooth_image(24, 20, 1);
        assert!((ssim(&x, &x).unwrap() - 1.0).abs() < 1e-12);
        let c = SsimConstants::default();
        let zeros = Image::filled(16, 16, 3, 0.0);
        let ones = Image::filled(16, 16, 3, 1.0);
        let expected = c.c1() / (255.0 * 255.0 + c.c1());
        assert!((ssim(&zeros, &ones).unwrap() - expected).abs() < 1e-12);
        assert!((expected - 0.0001).abs() < 1e-5);
        let small = Image::filled(10, 30, 3, 0.2);
        assert!(matches!(ssim(&small, &small), Err(Error::Validation(_))));
    }

    #[test]
    fn ssim_matches_brute_force_windows() {
        for seed in 0..4 {
            let x = smooth_image(19, 23, seed);
            let y = smooth_image(19, 23, seed + 100);
            let fast = ssim(&x, &y).unwrap();
            let slow = brute_ssim(&x, &y);
            assert!((fast - slow).abs() < 1e-10, "{fast} vs {slow}");
        }
    }

    #[test]
    fn ms_ssim_examples() {
        let x = smooth_image(64, 64, 5);
        assert!((ms_ssim(&x, &x).unwrap() - 1.0).abs() < 1e-12);
        let mut y = x.clone();
        y.data_mut().iter_mut().enumerate().for_each(|(i, v)| *v = (*v + 0.03 * ((i % 7) as f64 - 3.0) / 3.0).clamp(0.0, 1.0));
        let c = SsimConstants::default();
        let single = ms_ssim_with(&x, &y, &c, Some(1)).unwrap();
        assert!((single - ssim(&x, &y).unwrap()).abs() < 1e-6);
        assert_eq!(feasible_scales(64, 64, &c), 3);
        assert_eq!(feasible_scales(176, 200, &c), 5);
        assert_eq!(feasible_scales(175, 200, &c), 4);
        assert!(ms_ssim_with(&x, &y, &c, Some(4)).is_err());
    }

    #[test]
    fn ms_ssim_random_pair_bounded_by_scale_terms() {
        let x = random_image(256, 256, 11);
        let y = random_image(256, 256, 12);
        let c = SsimConstants::default();
        let v = ms_ssim(&x, &y).unwrap();
        assert!((0.0..=1.0).contains(&v));
        let max_term = (0..3)
            .map(|k| {
                ms_terms(&x.plane(k), &y.plane(k), 256, 256, &c, 5)
                    .iter()
                    .map(|t| t.0)
                    .fold(0.0, f64::max)
            })
            .fold(0.0, f64::max);
        assert!(v <= max_term + 1e-12);
    }

    #[test]
    fn loss_examples() {
        let wts = LossWeights::default();
        let k = smooth_image(16, 16, 2);
        assert_eq!(loss_le(&k, &k, &wts).unwrap(), 0.0);
        let other = smooth_image(16, 16, 3);
        let zero_alpha = LossWeights { alpha: 0.0, ..wts };
        assert_eq!(loss_le(&k, &other, &zero_alpha).unwrap(), 0.0);
        // alpha = 0.3 with an MSE of exactly 0.01.
        let a = Image::filled(4, 4, 3, 0.2);
        let b = Image::filled(4, 4, 3, 0.3);
        assert!((loss_le(&a, &b, &wts).unwrap() - 0.003).abs() < 1e-12);

        let w = smooth_image(32, 32, 4);
        assert!(loss_ld(&w, &w, &wts).unwrap().abs() < 1e-12);
        let none = LossWeights { alpha: 0.3, beta: 0.0, gamma: 0.0, mu: 0.0 };
        assert_eq!(loss_ld(&w, &smooth_image(32, 32, 9), &none).unwrap(), 0.0);
    }

    fn finite_difference_check(w: &Image, wp: &Image, wts: &LossWeights, probes: &[usize]) {
        let (_, grad) = loss_ld_grad(w, wp, wts).unwrap();
        let eps = 1e-6;
        for &i in probes {
            let mut plus = wp.clone();
            plus.data_mut()[i] += eps;
            let mut minus = wp.clone();
            minus.data_mut()[i] -= eps;
            let fd = (loss_ld(w, &plus, wts).unwrap() - loss_ld(w, &minus, wts).unwrap()) / (2.0 * eps);
            let rel = (fd - grad[i]).abs() / fd.abs().max(1e-8);
            assert!(
                rel < 1e-4 || (fd - grad[i]).abs() < 1e-10,
                "index {i}: analytic {} vs finite difference {fd}",
                grad[i]
            );
        }
    }

    #[test]
    fn loss_ld_gradient_matches_finite_differences() {
        let w = smooth_image(16, 16, 21);
        let wp = smooth_image(16, 16, 22);
        let probes: Vec<usize> = (0..w.data().len()).step_by(37).collect();
        finite_difference_check(&w, &wp, &LossWeights::default(), &probes);
    }

    #[test]
    fn ms_ssim_gradient_across_scales() {
        // 48x48 supports two scales, exercising the pyramid adjoint.
        let w = smooth_image(48, 48, 31);
        let wp = smooth_image(48, 48, 32);
        let c = SsimConstants::default();
        let (_, grad) = ms_ssim_grad(&w, &wp, &c, None).unwrap();
        let scale = grad.iter().fold(0.0f64, |m, g| m.max(g.abs()));
        for i in (0..wp.data().len()).step_by(301) {
            let eps = 1e-4;
            let mut plus = wp.clone();
            plus.data_mut()[i] += eps;
            let mut minus = wp.clone();
            minus.data_mut()[i] -= eps;
            let fd = (ms_ssim(&w, &plus).unwrap() - ms_ssim(&w, &minus).unwrap()) / (2.0 * eps);
            assert!((fd - grad[i]).abs() <= 1e-4 * fd.abs().max(1e-2 * scale), "{i}: {fd} vs {}", grad[i]);
        }
    }

    #[test]
    fn metrics_are_deterministic() {
        let x = smooth_image(40, 40, 1);
        let y = smooth_image(40, 40, 2);
        assert_eq!(ssim(&x, &y).unwrap().to_bits(), ssim(&x, &y).unwrap().to_bits());
        assert_eq!(ms_ssim(&x, &y).unwrap().to_bits(), ms_ssim(&x, &y).unwrap().to_bits());
        let seq = par::sequential(|| ssim(&x, &y).unwrap());
        assert_eq!(seq.to_bits(), ssim(&x, &y).unwrap().to_bits());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]

        #[test]
        fn symmetric_metrics(seed in any::<u64>()) {
            let x = random_image(14, 15, seed);
            let y = random_image(14, 15, seed ^ 0xdead);
            prop_assert_eq!(mse(&x, &y).unwrap(), mse(&y, &x).unwrap());
            prop_assert!(mse(&x, &y).unwrap() >= 0.0);
            prop_assert_eq!(psnr(&x, &y).unwrap(), psnr(&y, &x).unwrap());
            prop_assert!((ssim(&x, &y).unwrap() - ssim(&y, &x).unwrap()).abs() < 1e-12);
            prop_assert!(ssim(&x, &y).unwrap() <= 1.0 + 1e-9);
        }

        #[test]
        fn nc_scale_invariant(seed in any::<u64>(), s in 0.05f64..3.0) {
            let x = random_image(6, 7, seed);
            let y = random_image(6, 7, seed.wrapping_add(1));
            let mut ys = y.clone();
            ys.data_mut().iter_mut().for_each(|v| *v *= s);
            prop_assert!((nc(&x, &y).unwrap() - nc(&x, &ys).unwrap()).abs() < 1e-12);
        }
    }
}
