//! Radiance-field optimization on random ray minibatches.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::field::{Mlp, Net, RadianceField};
use super::render::{composite, composite_backward, fine_depths, ray_points, render_view, stratified_samples, SamplingConfig};
use crate::camera::rays_for_pose;
use crate::dataset::{Frame, Scene};
use crate::error::{Error, Result};
use crate::metrics::{psnr, psnr_from_mse};
use crate::nn::{Adam, Parameterized, TrainConfig};
use crate::par;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NerfTrainConfig {
    #[serde(flatten)]
    pub train: TrainConfig,
    /// Learning rate reached at the last step (exponential decay).
    pub lr_final: f64,
    /// Validation interval in steps; 0 disables periodic validation.
    pub val_every: usize,
    /// Number of validation frames rendered at each check.
    pub val_frames: usize,
    pub t_near: f64,
    pub t_far: f64,
    /// Global gradient-norm cap; 0 disables clipping.
    pub grad_clip: f64,
}

impl Default for NerfTrainConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig {
                steps: 20_000,
                learning_rate: 5e-4,
                batch_size: 1024,
                seed: 0,
                log_every: 100,
            },
            lr_final: 5e-5,
            val_every: 2000,
            val_frames: 1,
            t_near: 2.0,
            t_far: 6.0,
            grad_clip: 0.0,
        }
    }
}

impl NerfTrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.train.validate("nerf")?;
        if !(self.lr_final.is_finite() && self.lr_final > 0.0) {
            return Err(Error::Config(format!("nerf: lr_final must be positive, got {}", self.lr_final)));
        }
        if !(0.0 <= self.t_near && self.t_near < self.t_far && self.t_far.is_finite()) {
            return Err(Error::Config(format!(
                "nerf: need 0 <= t_near < t_far, got [{}, {}]",
                self.t_near, self.t_far
            )));
        }
        if !(self.grad_clip >= 0.0) {
            return Err(Error::Config(format!("nerf: grad_clip must be >= 0, got {}", self.grad_clip)));
        }
        Ok(())
    }

    pub fn learning_rate_at(&self, step: usize) -> f64 {
        let frac = step as f64 / self.train.steps.max(1) as f64;
        self.train.learning_rate * (self.lr_final / self.train.learning_rate).powf(frac)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NerfLogPoint {
    pub step: usize,
    pub loss: f64,
    /// Fine-network PSNR on the minibatch.
    pub train_psnr: f64,
    pub val_psnr: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct NerfOutcome {
    pub field: RadianceField,
    pub log: Vec<NerfLogPoint>,
}

/// Rays handled by one gradient work item.
const TRAIN_CHUNK: usize = 64;

struct RayPool {
    origins: Vec<[f64; 3]>,
    dirs: Vec<[f64; 3]>,
    targets: Vec<[f64; 3]>,
}

impl RayPool {
    fn build(scene: &Scene, t_near: f64, t_far: f64) -> Result<Self> {
        let n = scene.frames.len() * scene.intrinsics.pixel_count();
        let mut pool = RayPool {
            origins: Vec::with_capacity(n),
            dirs: Vec::with_capacity(n),
            targets: Vec::with_capacity(n),
        };
        for f in &scene.frames {
            let rays = rays_for_pose(&scene.intrinsics, &f.pose, t_near, t_far)?;
            pool.origins.extend(rays.origins);
            pool.dirs.extend(rays.directions);
            pool.targets
                .extend(f.image.data().chunks_exact(3).map(|c| [c[0], c[1], c[2]]));
        }
        Ok(pool)
    }
}

struct ChunkGrad {
    loss_coarse: f64,
    loss_fine: f64,
    coarse: Vec<Vec<f32>>,
    fine: Vec<Vec<f32>>,
}

/// Renders `depths` through `net`, accumulates the squared error and the
/// parameter gradient of `scale · Σ ‖C − target‖²`. Returns the per-ray
/// coarse weights and the summed squared error.
#[allow(clippy::too_many_arguments)]
fn pass(
    field: &RadianceField,
    net: Net,
    origins: &[[f64; 3]],
    dirs: &[[f64; 3]],
    targets: &[[f64; 3]],
    depths: &[Vec<f64>],
    white: bool,
    scale: f64,
    grads: &mut [Vec<f32>],
) -> (Vec<Vec<f64>>, f64) {
    let mut pts = Vec::new();
    let mut pdirs = Vec::new();
    for (k, t) in depths.iter().enumerate() {
        pts.extend(ray_points(origins[k], dirs[k], t));
        pdirs.extend(std::iter::repeat_n(dirs[k], t.len()));
    }
    let (pos, dir) = field.encode(&pts, &pdirs);
    let mlp: &Mlp = field.net(net);
    let cache = mlp.forward(&pos, &dir, pts.len());
    let sigma = cache.sigma();
    let rgb = cache.colors();
    let mut d_sigma = Vec::with_capacity(pts.len());
    let mut d_rgb = Vec::with_capacity(pts.len() * 3);
    let mut weights = Vec::with_capacity(depths.len());
    let mut sq = 0.0;
    let mut off = 0;
    for (k, t) in depths.iter().enumerate() {
        let s = off..off + t.len();
        off += t.len();
        let comp = composite(t, &sigma[s.clone()], &rgb[s.clone()], white);
        let mut g = [0.0; 3];
        for c in 0..3 {
            let e = comp.color[c] - targets[k][c];
            sq += e * e;
            g[c] = 2.0 * scale * e;
        }
        let (ds, dc) = composite_backward(&comp, &rgb[s], white, g);
        d_sigma.extend(ds.iter().map(|v| *v as f32));
        d_rgb.extend(dc.iter().flat_map(|c| c.map(|v| v as f32)));
        weights.push(comp.weights);
    }
    mlp.backward(&cache, &d_sigma, &d_rgb, grads);
    (weights, sq)
}

#[allow(clippy::too_many_arguments)]
fn chunk_gradient(
    field: &RadianceField,
    pool: &RayPool,
    rays: &[usize],
    strata: &[f64],
    quantiles: &[f64],
    scfg: &SamplingConfig,
    cfg: &NerfTrainConfig,
    scale: f64,
) -> ChunkGrad {
    let nc = scfg.n_coarse;
    let nf = scfg.n_fine;
    let origins: Vec<[f64; 3]> = rays.iter().map(|&r| pool.origins[r]).collect();
    let dirs: Vec<[f64; 3]> = rays.iter().map(|&r| pool.dirs[r]).collect();
    let targets: Vec<[f64; 3]> = rays.iter().map(|&r| pool.targets[r]).collect();
    let coarse_t: Vec<Vec<f64>> = (0..rays.len())
        .map(|k| {
            let jitter = scfg.perturb.then(|| &strata[k * nc..(k + 1) * nc]);
            stratified_samples(cfg.t_near, cfg.t_far, nc, jitter)
        })
        .collect();
    let mut gc = field.coarse.zero_grads();
    let mut gf = field.fine.zero_grads();
    let white = scfg.white_background;
    let (weights, sq_c) = pass(field, Net::Coarse, &origins, &dirs, &targets, &coarse_t, white, scale, &mut gc);
    let fine_t: Vec<Vec<f64>> = coarse_t
        .iter()
        .zip(&weights)
        .enumerate()
        .map(|(k, (t, w))| fine_depths(t, w, &quantiles[k * nf..(k + 1) * nf]))
        .collect();
    let (_, sq_f) = pass(field, Net::Fine, &origins, &dirs, &targets, &fine_t, white, scale, &mut gf);
    ChunkGrad {
        loss_coarse: sq_c,
        loss_fine: sq_f,
        coarse: gc,
        fine: gf,
    }
}

fn validation_psnr(field: &RadianceField, scene: &Scene, val: &[Frame], scfg: &SamplingConfig, cfg: &NerfTrainConfig) -> Result<f64> {
    let mut total = 0.0;
    let n = val.len().min(cfg.val_frames.max(1));
    for f in &val[..n] {
        let img = render_view(field, &scene.intrinsics, &f.pose, scfg, cfg.t_near, cfg.t_far)?;
        total += psnr(&img, &f.image)?;
    }
    Ok(total / n as f64)
}

/// Fits `field` to the frames of `scene` with the sum of coarse and fine
/// photometric errors, averaged over rays and channels. `val` frames share
/// the scene intrinsics and are used only for logging.
pub fn train_nerf(
    scene: &Scene,
    val: &[Frame],
    mut field: RadianceField,
    scfg: &SamplingConfig,
    cfg: &NerfTrainConfig,
) -> Result<NerfOutcome> {
    scene.validate()?;
    scfg.validate()?;
    cfg.validate()?;
    let pool = RayPool::build(scene, cfg.t_near, cfg.t_far)?;
    let total_rays = pool.origins.len();
    let batch = cfg.train.batch_size;
    let (nc, nf) = (scfg.n_coarse, scfg.n_fine);
    let scale = 1.0 / (3 * batch) as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
    let mut opt = Adam::new(cfg.train.learning_rate);
    let mut log = Vec::new();
    let even = super::render::even_quantiles(nf.max(1));
    for step in 0..cfg.train.steps {
        let rays: Vec<usize> = (0..batch).map(|_| rng.gen_range(0..total_rays)).collect();
        let strata: Vec<f64> = (0..batch * nc).map(|_| rng.gen()).collect();
        let quantiles: Vec<f64> = if scfg.perturb {
            (0..batch * nf).map(|_| rng.gen()).collect()
        } else {
            (0..batch).flat_map(|_| even[..nf].iter().copied()).collect()
        };
        let n_chunks = batch.div_ceil(TRAIN_CHUNK);
        let parts = par::map_range(n_chunks, |ci| {
            let r = ci * TRAIN_CHUNK..((ci + 1) * TRAIN_CHUNK).min(batch);
            chunk_gradient(
                &field,
                &pool,
                &rays[r.clone()],
                &strata[r.start * nc..r.end * nc],
                &quantiles[r.start * nf..r.end * nf],
                scfg,
                cfg,
                scale,
            )
        });
        let mut gc = field.coarse.zero_grads();
        let mut gf = field.fine.zero_grads();
        let (mut lc, mut lf) = (0.0, 0.0);
        for p in &parts {
            lc += p.loss_coarse;
            lf += p.loss_fine;
            for (acc, g) in gc.iter_mut().zip(&p.coarse).chain(gf.iter_mut().zip(&p.fine)) {
                acc.iter_mut().zip(g).for_each(|(a, b)| *a += b);
            }
        }
        let loss = (lc + lf) * scale;
        if !loss.is_finite() {
            return Err(Error::Training {
                stage: "nerf",
                step,
                detail: format!("loss is {loss}"),
            });
        }
        if cfg.grad_clip > 0.0 {
            let norm = gc
                .iter()
                .chain(&gf)
                .flat_map(|g| g.iter())
                .map(|v| (*v as f64) * (*v as f64))
                .sum::<f64>()
                .sqrt();
            if norm > cfg.grad_clip {
                let k = (cfg.grad_clip / norm) as f32;
                gc.iter_mut().chain(gf.iter_mut()).flat_map(|g| g.iter_mut()).for_each(|v| *v *= k);
            }
        }
        {
            let mut params = field.params_mut();
            for (p, g) in params.iter_mut().zip(gc.into_iter().chain(gf)) {
                p.grad = g;
            }
            opt.lr = cfg.learning_rate_at(step) as f32;
            opt.step(&mut params);
        }
        let last = step + 1 == cfg.train.steps;
        let validate_now =
            !val.is_empty() && ((cfg.val_every > 0 && (step + 1) % cfg.val_every == 0) || (last && cfg.val_every > 0));
        if step % cfg.train.log_every == 0 || last || validate_now {
            let val_psnr = if validate_now {
                Some(validation_psnr(&field, scene, val, scfg, cfg)?)
            } else {
                None
            };
            let train_psnr = psnr_from_mse(lf * scale);
            log::debug!("nerf step {step}: loss {loss:.5}, train psnr {train_psnr:.2}, val {val_psnr:?}");
            log.push(NerfLogPoint {
                step,
                loss,
                train_psnr,
                val_psnr,
            });
        }
    }
    Ok(NerfOutcome { field, log })
}
