//! Watermark embedding network and joint embedder/extractor training.
//!
//! `A = conv(w)`, `B = conv(k)`, `C = conv([A, B])`, `D = conv([A, B, C])`,
//! `k' = conv([A, B, C, D])` clamped to [0, 1].

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::extractor::ExtractorModel;
use crate::imagery::Image;
use crate::metrics::{self, LossWeights};
use crate::nn::{
    clamp01_with_mask, images_to_tensor, scatter_hwc_grad, tensor_to_images, Adam, Conv3x3, ConvBnRelu, Param,
    Parameterized, StageCache, Tensor, TrainConfig,
};
use crate::par;

pub const HIDDEN: usize = 32;

#[derive(Clone, Debug, PartialEq)]
pub struct EmbedderModel {
    pub a: ConvBnRelu,
    pub b: ConvBnRelu,
    pub c: ConvBnRelu,
    pub d: ConvBnRelu,
    pub out: Conv3x3,
}

pub struct EmbedCache {
    k: Tensor,
    w: Tensor,
    a: StageCache,
    b: StageCache,
    c: StageCache,
    d: StageCache,
    ab: Tensor,
    abc: Tensor,
    abcd: Tensor,
    mask: Vec<bool>,
    pub output: Tensor,
}

impl EmbedderModel {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            a: ConvBnRelu::new(3, HIDDEN, &mut rng),
            b: ConvBnRelu::new(3, HIDDEN, &mut rng),
            c: ConvBnRelu::new(2 * HIDDEN, HIDDEN, &mut rng),
            d: ConvBnRelu::new(3 * HIDDEN, HIDDEN, &mut rng),
            out: Conv3x3::new(4 * HIDDEN, 3, &mut rng),
        }
    }

    pub fn channel_plan() -> Vec<(usize, usize)> {
        vec![
            (3, HIDDEN),
            (3, HIDDEN),
            (2 * HIDDEN, HIDDEN),
            (3 * HIDDEN, HIDDEN),
            (4 * HIDDEN, 3),
        ]
    }

    pub fn forward_train(&mut self, k: &Tensor, w: &Tensor) -> EmbedCache {
        let a = self.a.forward_train(w);
        let b = self.b.forward_train(k);
        let ab = Tensor::concat(&[a.output(), b.output()]);
        let c = self.c.forward_train(&ab);
        let abc = Tensor::concat(&[a.output(), b.output(), c.output()]);
        let d = self.d.forward_train(&abc);
        let abcd = Tensor::concat(&[a.output(), b.output(), c.output(), d.output()]);
        let mut output = self.out.forward(&abcd);
        let mask = clamp01_with_mask(&mut output.data);
        EmbedCache {
            k: k.clone(),
            w: w.clone(),
            a,
            b,
            c,
            d,
            ab,
            abc,
            abcd,
            mask,
            output,
        }
    }

    pub fn backward(&mut self, cache: &EmbedCache, mut d_out: Tensor) {
        for (d, keep) in d_out.data.iter_mut().zip(&cache.mask) {
            if !keep {
                *d = 0.0;
            }
        }
        let d_abcd = self.out.backward(&cache.abcd, &d_out, true).expect("input grad requested");
        let mut p = d_abcd.split(&[HIDDEN; 4]).into_iter();
        let (mut d_a, mut d_b, mut d_c, d_d) = (p.next().unwrap(), p.next().unwrap(), p.next().unwrap(), p.next().unwrap());
        let d_abc = self.d.backward(&cache.abc, &cache.d, d_d, true).expect("input grad requested");
        let mut p = d_abc.split(&[HIDDEN; 3]).into_iter();
        d_a.add_assign(&p.next().unwrap());
        d_b.add_assign(&p.next().unwrap());
        d_c.add_assign(&p.next().unwrap());
        let d_ab = self.c.backward(&cache.ab, &cache.c, d_c, true).expect("input grad requested");
        let mut p = d_ab.split(&[HIDDEN; 2]).into_iter();
        d_a.add_assign(&p.next().unwrap());
        d_b.add_assign(&p.next().unwrap());
        self.b.backward(&cache.k, &cache.b, d_b, false);
        self.a.backward(&cache.w, &cache.a, d_a, false);
    }

    pub fn forward_eval(&self, k: &Tensor, w: &Tensor) -> Tensor {
        let a = self.a.forward_eval(w);
        let b = self.b.forward_eval(k);
        let c = self.c.forward_eval(&Tensor::concat(&[&a, &b]));
        let d = self.d.forward_eval(&Tensor::concat(&[&a, &b, &c]));
        let mut out = self.out.forward(&Tensor::concat(&[&a, &b, &c, &d]));
        clamp01_with_mask(&mut out.data);
        out
    }
}

impl Parameterized for EmbedderModel {
    fn tensors(&self) -> Vec<(String, &Vec<f32>)> {
        let mut v = Vec::new();
        self.a.tensors("a", &mut v);
        self.b.tensors("b", &mut v);
        self.c.tensors("c", &mut v);
        self.d.tensors("d", &mut v);
        v.push(("out.weight".into(), &self.out.weight.value));
        v.push(("out.bias".into(), &self.out.bias.value));
        v
    }

    fn tensors_mut(&mut self) -> Vec<(String, &mut Vec<f32>)> {
        let mut v = Vec::new();
        self.a.tensors_mut("a", &mut v);
        self.b.tensors_mut("b", &mut v);
        self.c.tensors_mut("c", &mut v);
        self.d.tensors_mut("d", &mut v);
        v.push(("out.weight".into(), &mut self.out.weight.value));
        v.push(("out.bias".into(), &mut self.out.bias.value));
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = Vec::new();
        self.a.params_mut(&mut v);
        self.b.params_mut(&mut v);
        self.c.params_mut(&mut v);
        self.d.params_mut(&mut v);
        v.push(&mut self.out.weight);
        v.push(&mut self.out.bias);
        v
    }
}

/// Hides `w` in host `k`, returning the watermarked image `k'`.
pub fn embed(model: &EmbedderModel, k: &Image, w: &Image) -> Result<Image> {
    k.ensure_rgb()?;
    w.ensure_rgb()?;
    if k.shape() != w.shape() {
        return Err(Error::Validation(format!(
            "host {:?} and watermark {:?} differ in shape",
            k.shape(),
            w.shape()
        )));
    }
    let out = model.forward_eval(&images_to_tensor(&[k]), &images_to_tensor(&[w]));
    Ok(tensor_to_images(&out).remove(0))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct JointPoint {
    pub step: usize,
    pub loss_e: f64,
    pub loss_d: f64,
    pub psnr: f64,
}

pub struct JointOutcome {
    pub embedder: EmbedderModel,
    pub extractor: ExtractorModel,
    pub curve: Vec<JointPoint>,
}

/// Trains embedder and extractor end to end on `(k, w)` pairs, minimizing
/// `Le(k, k') + Ld(w, D(k'))` averaged over a minibatch of hosts.
pub fn train_joint(
    hosts: &[Image],
    w: &Image,
    weights: &LossWeights,
    cfg: &TrainConfig,
    init: Option<(EmbedderModel, ExtractorModel)>,
) -> Result<JointOutcome> {
    cfg.validate("joint")?;
    weights.validate()?;
    if hosts.is_empty() {
        return Err(Error::Config("joint training needs at least one host image".into()));
    }
    w.ensure_rgb()?;
    for k in hosts {
        k.ensure_rgb()?;
        if k.shape() != w.shape() {
            return Err(Error::Validation(format!(
                "host {:?} and watermark {:?} differ in shape",
                k.shape(),
                w.shape()
            )));
        }
    }
    let (mut emb, mut ext) = init.unwrap_or_else(|| (EmbedderModel::new(cfg.seed), ExtractorModel::new(cfg.seed.wrapping_add(1))));
    let mut opt_e = Adam::new(cfg.learning_rate);
    let mut opt_d = Adam::new(cfg.learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let batch = cfg.batch_size.min(hosts.len());
    let wb = images_to_tensor(&vec![w; batch]);
    let (h, wd) = (w.height(), w.width());
    let mut curve = Vec::new();
    for step in 0..cfg.steps {
        let picks: Vec<&Image> = if batch == hosts.len() {
            hosts.iter().collect()
        } else {
            (0..batch).map(|_| &hosts[rng.gen_range(0..hosts.len())]).collect()
        };
        let k = images_to_tensor(&picks);
        emb.zero_grad();
        ext.zero_grad();
        let e_cache = emb.forward_train(&k, &wb);
        let d_cache = ext.forward_train(&e_cache.output);
        let k_prime = tensor_to_images(&e_cache.output);
        let w_prime = tensor_to_images(&d_cache.output);
        let terms: Vec<Result<((f64, Vec<f64>), (f64, Vec<f64>))>> = par::map_range(batch, |i| {
            Ok((
                metrics::loss_le_grad(picks[i], &k_prime[i], weights)?,
                metrics::loss_ld_grad(w, &w_prime[i], weights)?,
            ))
        });
        let scale = 1.0 / batch as f64;
        let (mut le, mut ld, mut mse_sum) = (0.0, 0.0, 0.0);
        let mut d_kp = Tensor::zeros(batch, 3, h, wd);
        let mut d_wp = Tensor::zeros(batch, 3, h, wd);
        for (i, t) in terms.into_iter().enumerate() {
            let ((le_i, g_e), (ld_i, g_d)) = t?;
            le += le_i * scale;
            ld += ld_i * scale;
            mse_sum += metrics::mse(picks[i], &k_prime[i])? * scale;
            scatter_hwc_grad(&mut d_kp, i, &g_e, scale);
            scatter_hwc_grad(&mut d_wp, i, &g_d, scale);
        }
        if !(le + ld).is_finite() {
            return Err(Error::Training {
                stage: "joint",
                step,
                detail: format!("loss is {}", le + ld),
            });
        }
        let through = ext.backward(&d_cache, d_wp, true).expect("input grad requested");
        d_kp.add_assign(&through);
        emb.backward(&e_cache, d_kp);
        if step % cfg.log_every == 0 || step + 1 == cfg.steps {
            let psnr = metrics::psnr_from_mse(mse_sum);
            log::debug!("joint step {step}: le {le:.6} ld {ld:.5} psnr {psnr:.2}");
            curve.push(JointPoint {
                step,
                loss_e: le,
                loss_d: ld,
                psnr,
            });
        }
        opt_e.step(&mut emb.params_mut());
        opt_d.step(&mut ext.params_mut());
    }
    Ok(JointOutcome {
        embedder: emb,
        extractor: ext,
        curve,
    })
}

/// Embedder half of [`train_joint`].
pub fn train_embedder(hosts: &[Image], w: &Image, weights: &LossWeights, cfg: &TrainConfig) -> Result<EmbedderModel> {
    Ok(train_joint(hosts, w, weights, cfg, None)?.embedder)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::psnr;

    fn pattern(h: usize, w: usize, phase: f64) -> Image {
        Image::from_fn(h, w, |y, x| {
            let (fy, fx) = (y as f64 / h as f64, x as f64 / w as f64);
            [
                0.5 + 0.4 * (6.0 * fx + phase).sin(),
                0.5 + 0.4 * (4.0 * fy - phase).cos(),
                0.5 + 0.3 * (9.0 * fx * fy + phase).sin(),
            ]
        })
    }

    #[test]
    fn shape_and_range_for_random_model() {
        let m = EmbedderModel::new(0);
        for (h, w) in [(8, 8), (13, 21), (32, 32)] {
            let out = embed(&m, &pattern(h, w, 0.0), &pattern(h, w, 1.0)).unwrap();
            assert_eq!(out.shape(), (h, w, 3));
            out.validate().unwrap();
        }
    }

    #[test]
    fn mismatched_shapes_rejected() {
        let m = EmbedderModel::new(0);
        assert!(matches!(
            embed(&m, &pattern(8, 8, 0.0), &pattern(8, 9, 0.0)),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn watermark_branch_is_live() {
        let mut m = EmbedderModel::new(5);
        let (k, w) = (pattern(16, 16, 0.0), pattern(16, 16, 2.0));
        let before = embed(&m, &k, &w).unwrap();
        m.a.conv.weight.value.iter_mut().for_each(|v| *v = 0.0);
        m.a.conv.bias.value.iter_mut().for_each(|v| *v = 0.0);
        assert_ne!(embed(&m, &k, &w).unwrap(), before);
    }

    #[test]
    fn zero_steps_is_config_error() {
        let cfg = TrainConfig { steps: 0, ..TrainConfig::default() };
        let k = pattern(8, 8, 0.0);
        assert!(matches!(
            train_joint(&[k.clone()], &k, &LossWeights::default(), &cfg, None),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn short_run_lowers_embedding_loss() {
        let k = pattern(32, 32, 0.0);
        let w = pattern(32, 32, 2.5);
        let cfg = TrainConfig {
            steps: 200,
            learning_rate: 1e-3,
            log_every: 199,
            ..TrainConfig::default()
        };
        let out = train_joint(&[k.clone()], &w, &LossWeights::default(), &cfg, None).unwrap();
        let first = &out.curve[0];
        let last = out.curve.last().unwrap();
        assert!(last.loss_e < first.loss_e, "{} !< {}", last.loss_e, first.loss_e);
        assert!(psnr(&k, &embed(&out.embedder, &k, &w).unwrap()).unwrap().is_finite());
    }
}
