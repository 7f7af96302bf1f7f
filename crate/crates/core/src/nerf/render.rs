//! Ray sampling and alpha compositing.
//!
//! Along a ray with samples `t_0 < … < t_{n-1}`: `δ_i = t_{i+1} − t_i`
//! (the last `δ` is [`FAR_DELTA`]), `α_i = 1 − exp(−σ_i δ_i)`,
//! `T_i = ∏_{j<i} (1 − α_j)`, `w_i = T_i α_i`, `C = Σ w_i c_i` plus
//! `(1 − Σ w_i)·1` on a white background.

use serde::{Deserialize, Serialize};

use super::field::{Net, RadianceField};
use crate::camera::{rays_for_pose, CameraIntrinsics, CameraPose, RayBatch};
use crate::error::{Error, Result};
use crate::imagery::Image;
use crate::par;

/// Length assigned to the interval behind the last sample.
pub const FAR_DELTA: f64 = 1e10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplingConfig {
    pub n_coarse: usize,
    pub n_fine: usize,
    pub perturb: bool,
    pub white_background: bool,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self {
            n_coarse: 64,
            n_fine: 64,
            perturb: true,
            white_background: true,
        }
    }
}

impl SamplingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_coarse < 2 {
            return Err(Error::Config(format!("n_coarse must be at least 2, got {}", self.n_coarse)));
        }
        Ok(())
    }

    pub fn deterministic(self) -> Self {
        Self { perturb: false, ..self }
    }
}

/// Compositing result for one ray, with what the backward pass needs.
#[derive(Clone, Debug, PartialEq)]
pub struct Composite {
    pub color: [f64; 3],
    pub weights: Vec<f64>,
    /// `T_0 … T_n`; the last entry is the transmittance past every sample.
    pub transmittance: Vec<f64>,
    pub deltas: Vec<f64>,
}

pub fn deltas(t: &[f64]) -> Vec<f64> {
    let mut d: Vec<f64> = t.windows(2).map(|w| w[1] - w[0]).collect();
    d.push(FAR_DELTA);
    d
}

pub fn composite(t: &[f64], sigma: &[f64], rgb: &[[f64; 3]], white_background: bool) -> Composite {
    let n = t.len();
    let deltas = deltas(t);
    let mut transmittance = Vec::with_capacity(n + 1);
    let mut weights = Vec::with_capacity(n);
    let mut color = [0.0; 3];
    let mut acc = 0.0;
    // Accumulating the optical depth keeps T exact for long runs of samples.
    let mut depth = 0.0_f64;
    for i in 0..n {
        let tr = (-depth).exp();
        let tau = sigma[i] * deltas[i];
        let w = tr * -(-tau).exp_m1();
        transmittance.push(tr);
        weights.push(w);
        for k in 0..3 {
            color[k] += w * rgb[i][k];
        }
        acc += w;
        depth += tau;
    }
    transmittance.push((-depth).exp());
    if white_background {
        for c in color.iter_mut() {
            *c += 1.0 - acc;
        }
    }
    Composite {
        color,
        weights,
        transmittance,
        deltas,
    }
}

/// Gradients of `g · C` with respect to every `σ_i` and `c_i`.
///
/// `∂/∂c_i = w_i g` and `∂/∂σ_i = δ_i (e_i T_{i+1} − Σ_{k>i} e_k w_k)` with
/// `e_k = g · (c_k − b)` and `b` the background colour.
pub fn composite_backward(comp: &Composite, rgb: &[[f64; 3]], white_background: bool, g: [f64; 3]) -> (Vec<f64>, Vec<[f64; 3]>) {
    let n = comp.weights.len();
    let b = if white_background { 1.0 } else { 0.0 };
    let e: Vec<f64> = rgb
        .iter()
        .map(|c| g[0] * (c[0] - b) + g[1] * (c[1] - b) + g[2] * (c[2] - b))
        .collect();
    let mut d_sigma = vec![0.0; n];
    let mut tail = 0.0;
    for i in (0..n).rev() {
        d_sigma[i] = comp.deltas[i] * (e[i] * comp.transmittance[i + 1] - tail);
        tail += e[i] * comp.weights[i];
    }
    let d_rgb = comp.weights.iter().map(|w| [w * g[0], w * g[1], w * g[2]]).collect();
    (d_sigma, d_rgb)
}

/// `n` depths on `[t_near, t_far]`: evenly spaced, or one uniform draw per
/// stratum when `jitter` supplies `n` numbers in [0, 1).
pub fn stratified_samples(t_near: f64, t_far: f64, n: usize, jitter: Option<&[f64]>) -> Vec<f64> {
    let step = if n > 1 { (t_far - t_near) / (n - 1) as f64 } else { 0.0 };
    let even: Vec<f64> = (0..n).map(|i| t_near + step * i as f64).collect();
    match jitter {
        None => even,
        Some(u) => (0..n)
            .map(|i| {
                let lo = if i == 0 { even[0] } else { 0.5 * (even[i - 1] + even[i]) };
                let hi = if i + 1 == n { even[n - 1] } else { 0.5 * (even[i] + even[i + 1]) };
                lo + (hi - lo) * u[i]
            })
            .collect(),
    }
}

/// Inverse-CDF sampling of the piecewise-constant density with
/// `weights[i]` on `[bins[i], bins[i+1]]` at the quantiles `u`.
pub fn sample_pdf(bins: &[f64], weights: &[f64], u: &[f64]) -> Vec<f64> {
    assert_eq!(bins.len(), weights.len() + 1, "bins must bracket the weights");
    let w: Vec<f64> = weights.iter().map(|w| w.max(0.0) + 1e-5).collect();
    let total: f64 = w.iter().sum();
    let mut cdf = Vec::with_capacity(w.len() + 1);
    cdf.push(0.0);
    let mut acc = 0.0;
    for v in &w {
        acc += v / total;
        cdf.push(acc.min(1.0));
    }
    u.iter()
        .map(|&q| {
            let idx = cdf.partition_point(|c| *c <= q).clamp(1, cdf.len() - 1);
            let (c0, c1) = (cdf[idx - 1], cdf[idx]);
            let denom = if c1 - c0 < 1e-12 { 1.0 } else { c1 - c0 };
            bins[idx - 1] + (q - c0) / denom * (bins[idx] - bins[idx - 1])
        })
        .collect()
}

/// Deterministic quantiles `0, 1/(n-1), …, 1`.
pub fn even_quantiles(n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![0.5];
    }
    (0..n).map(|i| i as f64 / (n - 1) as f64).collect()
}

/// Fine depths: coarse samples merged with importance samples drawn from
/// the interior coarse weights over the coarse midpoints.
pub fn fine_depths(t_coarse: &[f64], coarse_weights: &[f64], u: &[f64]) -> Vec<f64> {
    let n = t_coarse.len();
    if u.is_empty() || n < 3 {
        return t_coarse.to_vec();
    }
    let mids: Vec<f64> = t_coarse.windows(2).map(|w| 0.5 * (w[0] + w[1])).collect();
    let extra = sample_pdf(&mids, &coarse_weights[1..n - 1], u);
    let mut all: Vec<f64> = t_coarse.iter().copied().chain(extra).collect();
    all.sort_by(|a, b| a.partial_cmp(b).expect("finite depths"));
    all
}

/// Anything that maps points and view directions to density and colour.
pub trait Field: Sync {
    fn query(&self, net: Net, points: &[[f64; 3]], dirs: &[[f64; 3]]) -> (Vec<f64>, Vec<[f64; 3]>);

    fn has_fine(&self) -> bool {
        true
    }
}

impl Field for RadianceField {
    fn query(&self, net: Net, points: &[[f64; 3]], dirs: &[[f64; 3]]) -> (Vec<f64>, Vec<[f64; 3]>) {
        let (pos, dir) = self.encode(points, dirs);
        let cache = self.net(net).forward(&pos, &dir, points.len());
        (cache.sigma(), cache.colors())
    }
}

/// Per-ray random numbers for one render call.
#[derive(Clone, Debug, Default)]
pub struct RayJitter {
    /// `n_coarse` stratified offsets per ray.
    pub strata: Vec<f64>,
    /// `n_fine` sorted quantiles per ray.
    pub quantiles: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RenderOutput {
    pub coarse: Vec<[f64; 3]>,
    pub fine: Vec<[f64; 3]>,
    /// Coarse weights, `n_coarse` per ray.
    pub weights: Vec<f64>,
}

pub(crate) fn ray_points(o: [f64; 3], d: [f64; 3], t: &[f64]) -> Vec<[f64; 3]> {
    t.iter()
        .map(|s| [o[0] + s * d[0], o[1] + s * d[1], o[2] + s * d[2]])
        .collect()
}

fn check_finite(first_ray: usize, per_ray: usize, sigma: &[f64], rgb: &[[f64; 3]]) -> Result<()> {
    if let Some(i) = sigma
        .iter()
        .zip(rgb)
        .position(|(s, c)| !s.is_finite() || c.iter().any(|v| !v.is_finite()))
    {
        return Err(Error::Numeric(format!(
            "field returned a non-finite value on ray {}",
            first_ray + i / per_ray
        )));
    }
    Ok(())
}

/// Rays rendered per parallel work item.
pub const RAY_CHUNK: usize = 256;

/// Renders a batch of rays through the coarse and fine networks.
pub fn render_rays<F: Field>(field: &F, rays: &RayBatch, scfg: &SamplingConfig, jitter: Option<&RayJitter>) -> Result<RenderOutput> {
    scfg.validate()?;
    let n = rays.len();
    let nc = scfg.n_coarse;
    let nf = if field.has_fine() { scfg.n_fine } else { 0 };
    let even_q = even_quantiles(nf.max(1));
    let chunks = n.div_ceil(RAY_CHUNK);
    let parts = par::try_map_range(chunks, |ci| {
        let range = ci * RAY_CHUNK..((ci + 1) * RAY_CHUNK).min(n);
        let mut t_all = Vec::with_capacity(range.len());
        let (mut pts, mut dirs) = (Vec::new(), Vec::new());
        for r in range.clone() {
            let strata = jitter.filter(|_| scfg.perturb).map(|j| &j.strata[r * nc..(r + 1) * nc]);
            let t = stratified_samples(rays.t_near, rays.t_far, nc, strata);
            pts.extend(ray_points(rays.origins[r], rays.directions[r], &t));
            dirs.extend(std::iter::repeat_n(rays.directions[r], nc));
            t_all.push(t);
        }
        let (sigma, rgb) = field.query(Net::Coarse, &pts, &dirs);
        check_finite(range.start, nc, &sigma, &rgb)?;
        let mut coarse = Vec::with_capacity(range.len());
        let mut weights = Vec::with_capacity(range.len() * nc);
        let mut fine_t = Vec::with_capacity(range.len());
        for (k, r) in range.clone().enumerate() {
            let s = k * nc..(k + 1) * nc;
            let comp = composite(&t_all[k], &sigma[s.clone()], &rgb[s], scfg.white_background);
            coarse.push(comp.color);
            if nf > 0 {
                let q = match jitter.filter(|_| scfg.perturb) {
                    Some(j) => &j.quantiles[r * nf..(r + 1) * nf],
                    None => &even_q[..],
                };
                fine_t.push(fine_depths(&t_all[k], &comp.weights, q));
            }
            weights.extend(comp.weights);
        }
        let fine = if nf == 0 {
            coarse.clone()
        } else {
            let (mut pts, mut dirs) = (Vec::new(), Vec::new());
            for (k, r) in range.clone().enumerate() {
                pts.extend(ray_points(rays.origins[r], rays.directions[r], &fine_t[k]));
                dirs.extend(std::iter::repeat_n(rays.directions[r], fine_t[k].len()));
            }
            let (sigma, rgb) = field.query(Net::Fine, &pts, &dirs);
            check_finite(range.start, nc + nf, &sigma, &rgb)?;
            let mut off = 0;
            fine_t
                .iter()
                .map(|t| {
                    let s = off..off + t.len();
                    off += t.len();
                    composite(t, &sigma[s.clone()], &rgb[s], scfg.white_background).color
                })
                .collect()
        };
        Ok::<_, Error>((coarse, fine, weights))
    })?;
    let mut out = RenderOutput {
        coarse: Vec::with_capacity(n),
        fine: Vec::with_capacity(n),
        weights: Vec::with_capacity(n * nc),
    };
    for (c, f, w) in parts {
        out.coarse.extend(c);
        out.fine.extend(f);
        out.weights.extend(w);
    }
    Ok(out)
}

/// Full-image render from `pose` using the fine output and no jitter.
pub fn render_view<F: Field>(
    field: &F,
    intr: &CameraIntrinsics,
    pose: &CameraPose,
    scfg: &SamplingConfig,
    t_near: f64,
    t_far: f64,
) -> Result<Image> {
    let rays = rays_for_pose(intr, pose, t_near, t_far)?;
    let out = render_rays(field, &rays, &scfg.deterministic(), None)?;
    let data = out
        .fine
        .iter()
        .flat_map(|c| c.iter().map(|v| v.clamp(0.0, 1.0)))
        .collect();
    Image::new(intr.height, intr.width, 3, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Constant density and colour for `x < end`, empty beyond.
    struct Slab {
        sigma: f64,
        color: [f64; 3],
        end: f64,
    }

    impl Field for Slab {
        fn query(&self, _: Net, points: &[[f64; 3]], _: &[[f64; 3]]) -> (Vec<f64>, Vec<[f64; 3]>) {
            let sigma = points.iter().map(|p| if p[0] < self.end { self.sigma } else { 0.0 }).collect();
            (sigma, vec![self.color; points.len()])
        }

        fn has_fine(&self) -> bool {
            false
        }
    }

    struct Broken;

    impl Field for Broken {
        fn query(&self, _: Net, points: &[[f64; 3]], _: &[[f64; 3]]) -> (Vec<f64>, Vec<[f64; 3]>) {
            let sigma = points.iter().map(|p| if p[1] > 0.5 { f64::NAN } else { 1.0 }).collect();
            (sigma, vec![[0.5; 3]; points.len()])
        }
    }

    fn x_ray(t_near: f64, t_far: f64) -> RayBatch {
        RayBatch::new(vec![[0.0; 3]], vec![[1.0, 0.0, 0.0]], t_near, t_far).unwrap()
    }

    fn slab_error(n: usize, end: f64) -> f64 {
        let field = Slab { sigma: 0.5, color: [0.2, 0.6, 0.9], end };
        let scfg = SamplingConfig { n_coarse: n, n_fine: 0, perturb: false, white_background: false };
        let out = render_rays(&field, &x_ray(2.0, 6.0), &scfg, None).unwrap();
        let opacity = 1.0 - (-0.5 * (end.min(6.0) - 2.0)).exp();
        (0..3).map(|k| (out.fine[0][k] - field.color[k] * opacity).abs()).fold(0.0, f64::max)
    }

    #[test]
    fn homogeneous_medium_matches_closed_form() {
        assert!(slab_error(256, 6.0) < 1e-3);
    }

    #[test]
    fn doubling_samples_reduces_quadrature_error() {
        // The medium ends between samples, so the error tracks the spacing.
        let errs: Vec<f64> = [64, 128, 256].iter().map(|&n| slab_error(n, 5.0)).collect();
        assert!(errs[0] > errs[1] && errs[1] > errs[2], "{errs:?}");
        assert!(errs[2] < 1e-2);
    }

    #[test]
    fn zero_density_field_renders_white() {
        let intr = CameraIntrinsics::new(6, 5, 8.0).unwrap();
        let pose = crate::synth::orbit_pose(4.0, 30.0, 20.0).unwrap();
        let field = Slab { sigma: 0.0, color: [0.1; 3], end: f64::INFINITY };
        let img = render_view(&field, &intr, &pose, &SamplingConfig::default(), 2.0, 6.0).unwrap();
        assert!(img.data().iter().all(|v| *v == 1.0));
    }

    #[test]
    fn rendering_is_deterministic() {
        let intr = CameraIntrinsics::new(8, 8, 10.0).unwrap();
        let pose = crate::synth::orbit_pose(4.0, 10.0, 30.0).unwrap();
        let cfg = crate::nerf::FieldConfig { depth: 2, width: 16, skips: vec![], color_width: 8, ..Default::default() };
        let field = RadianceField::new(cfg, 4).unwrap();
        let scfg = SamplingConfig { n_coarse: 16, n_fine: 16, ..Default::default() };
        let a = render_view(&field, &intr, &pose, &scfg, 2.0, 6.0).unwrap();
        let b = render_view(&field, &intr, &pose, &scfg, 2.0, 6.0).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn non_finite_output_names_the_ray() {
        let rays = RayBatch::new(
            vec![[0.0; 3], [0.0, 1.0, 0.0], [0.0; 3]],
            vec![[1.0, 0.0, 0.0]; 3],
            2.0,
            6.0,
        )
        .unwrap();
        match render_rays(&Broken, &rays, &SamplingConfig::default(), None) {
            Err(Error::Numeric(msg)) => assert!(msg.contains("ray 1"), "{msg}"),
            other => panic!("expected numeric error, got {other:?}"),
        }
    }

    #[test]
    fn empty_space_is_white() {
        let t = stratified_samples(2.0, 6.0, 16, None);
        let c = composite(&t, &[0.0; 16], &[[0.3, 0.2, 0.1]; 16], true);
        assert_eq!(c.color, [1.0, 1.0, 1.0]);
    }

    #[test]
    fn composite_gradient_matches_finite_differences() {
        let t = [2.0, 2.7, 3.1, 4.6];
        let sigma = [0.4, 1.3, 0.2, 0.9];
        let rgb = [[0.1, 0.5, 0.9], [0.8, 0.3, 0.2], [0.6, 0.6, 0.1], [0.2, 0.9, 0.4]];
        let g = [0.7, -0.4, 1.1];
        let f = |s: &[f64], c: &[[f64; 3]]| {
            let col = composite(&t, s, c, true).color;
            g[0] * col[0] + g[1] * col[1] + g[2] * col[2]
        };
        let comp = composite(&t, &sigma, &rgb, true);
        let (ds, dc) = composite_backward(&comp, &rgb, true, g);
        let h = 1e-6;
        for i in 0..4 {
            let (mut p, mut m) = (sigma, sigma);
            p[i] += h;
            m[i] -= h;
            let fd = (f(&p, &rgb) - f(&m, &rgb)) / (2.0 * h);
            assert!((fd - ds[i]).abs() <= 1e-4 * fd.abs().max(1e-8), "sigma {i}: {} vs {fd}", ds[i]);
            for k in 0..3 {
                let (mut p, mut m) = (rgb, rgb);
                p[i][k] += h;
                m[i][k] -= h;
                let fd = (f(&sigma, &p) - f(&sigma, &m)) / (2.0 * h);
                assert!((fd - dc[i][k]).abs() <= 1e-4 * fd.abs().max(1e-8));
            }
        }
    }

    #[test]
    fn pdf_sampling_follows_weights() {
        let bins = [0.0, 1.0, 2.0];
        let s = sample_pdf(&bins, &[1.0, 0.0], &even_quantiles(101));
        let in_first = s.iter().filter(|v| **v <= 1.0).count();
        assert!(in_first >= 99, "{in_first}");
        assert!(s.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn uniform_weights_give_uniform_samples() {
        // Kolmogorov-Smirnov against U(2, 6) at the 5% level.
        let n = 10_000;
        let bins: Vec<f64> = (0..=32).map(|i| 2.0 + 4.0 * i as f64 / 32.0).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut u: Vec<f64> = (0..n).map(|_| rng.gen::<f64>()).collect();
        u.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let s = sample_pdf(&bins, &[1.0; 32], &u);
        let d = s
            .iter()
            .enumerate()
            .map(|(i, v)| {
                let f = (v - 2.0) / 4.0;
                (f - i as f64 / n as f64).abs().max((f - (i + 1) as f64 / n as f64).abs())
            })
            .fold(0.0, f64::max);
        assert!(d < 1.36 / (n as f64).sqrt(), "KS statistic {d}");
    }

    #[test]
    fn stratified_samples_stay_in_strata() {
        let u = vec![0.999; 8];
        let t = stratified_samples(2.0, 6.0, 8, Some(&u));
        assert!(t.windows(2).all(|w| w[0] < w[1]));
        assert!(t[0] >= 2.0 && t[7] <= 6.0);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn weights_are_a_sub_probability(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = rng.gen_range(2..40);
            let jitter: Vec<f64> = (0..n).map(|_| rng.gen()).collect();
            let t = stratified_samples(2.0, 6.0, n, Some(&jitter));
            let sigma: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..20.0) * rng.gen::<f64>().powi(3)).collect();
            let rgb = vec![[0.5; 3]; n];
            let c = composite(&t, &sigma, &rgb, false);
            let total: f64 = c.weights.iter().sum();
            let product: f64 = t.iter().enumerate().map(|(i, _)| (-sigma[i] * c.deltas[i]).exp()).product();
            prop_assert!(c.weights.iter().all(|w| (0.0..=1.0).contains(w)));
            prop_assert!(total <= 1.0 + 1e-12);
            prop_assert!((total - (1.0 - product)).abs() < 1e-9);
            prop_assert!(c.transmittance.windows(2).all(|w| w[1] <= w[0]));
        }
    }
}
