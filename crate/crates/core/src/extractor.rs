//! Watermark extraction network.
//!
//! Feature maps `E = conv(s)`, `F = conv(E)`, `G = conv([E, F])`, and the
//! output `w' = conv([E, F, G])` clamped to [0, 1]. Hidden stages are
//! conv → batch-norm → ReLU with 32 channels.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imagery::Image;
use crate::metrics::{self, LossWeights};
use crate::nn::{
    clamp01_with_mask, images_to_tensor, scatter_hwc_grad, tensor_to_images, Adam, Conv3x3, ConvBnRelu, Param,
    Parameterized, StageCache, Tensor, TrainConfig,
};

pub const HIDDEN: usize = 32;

#[derive(Clone, Debug, PartialEq)]
pub struct ExtractorModel {
    pub e: ConvBnRelu,
    pub f: ConvBnRelu,
    pub g: ConvBnRelu,
    pub out: Conv3x3,
}

/// Activations saved by [`ExtractorModel::forward_train`].
pub struct ExtractCache {
    input: Tensor,
    e: StageCache,
    f: StageCache,
    g: StageCache,
    ef: Tensor,
    efg: Tensor,
    mask: Vec<bool>,
    pub output: Tensor,
}

impl ExtractorModel {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            e: ConvBnRelu::new(3, HIDDEN, &mut rng),
            f: ConvBnRelu::new(HIDDEN, HIDDEN, &mut rng),
            g: ConvBnRelu::new(2 * HIDDEN, HIDDEN, &mut rng),
            out: Conv3x3::new(3 * HIDDEN, 3, &mut rng),
        }
    }

    pub fn channel_plan() -> Vec<(usize, usize)> {
        vec![(3, HIDDEN), (HIDDEN, HIDDEN), (2 * HIDDEN, HIDDEN), (3 * HIDDEN, 3)]
    }

    pub fn forward_train(&mut self, s: &Tensor) -> ExtractCache {
        let e = self.e.forward_train(s);
        let f = self.f.forward_train(e.output());
        let ef = Tensor::concat(&[e.output(), f.output()]);
        let g = self.g.forward_train(&ef);
        let efg = Tensor::concat(&[e.output(), f.output(), g.output()]);
        let mut output = self.out.forward(&efg);
        let mask = clamp01_with_mask(&mut output.data);
        ExtractCache {
            input: s.clone(),
            e,
            f,
            g,
            ef,
            efg,
            mask,
            output,
        }
    }

    /// Accumulates parameter gradients; returns `dL/ds` when requested.
    pub fn backward(&mut self, cache: &ExtractCache, mut d_out: Tensor, need_input_grad: bool) -> Option<Tensor> {
        for (d, keep) in d_out.data.iter_mut().zip(&cache.mask) {
            if !keep {
                *d = 0.0;
            }
        }
        let d_efg = self.out.backward(&cache.efg, &d_out, true).expect("input grad requested");
        let mut parts = d_efg.split(&[HIDDEN, HIDDEN, HIDDEN]).into_iter();
        let (mut d_e, mut d_f, d_g) = (parts.next().unwrap(), parts.next().unwrap(), parts.next().unwrap());
        let d_ef = self.g.backward(&cache.ef, &cache.g, d_g, true).expect("input grad requested");
        let mut parts = d_ef.split(&[HIDDEN, HIDDEN]).into_iter();
        d_e.add_assign(&parts.next().unwrap());
        d_f.add_assign(&parts.next().unwrap());
        let d_e2 = self.f.backward(cache.e.output(), &cache.f, d_f, true).expect("input grad requested");
        d_e.add_assign(&d_e2);
        self.e.backward(&cache.input, &cache.e, d_e, need_input_grad)
    }

    pub fn forward_eval(&self, s: &Tensor) -> Tensor {
        let e = self.e.forward_eval(s);
        let f = self.f.forward_eval(&e);
        let g = self.g.forward_eval(&Tensor::concat(&[&e, &f]));
        let mut out = self.out.forward(&Tensor::concat(&[&e, &f, &g]));
        clamp01_with_mask(&mut out.data);
        out
    }

    /// Sets every batch-norm running statistic to the exact statistics of
    /// `s`, so inference on `s` reproduces the training-mode output.
    pub fn recalibrate(&mut self, s: &Tensor) {
        let e = self.e.recalibrate(s);
        let f = self.f.recalibrate(&e);
        self.g.recalibrate(&Tensor::concat(&[&e, &f]));
    }
}

impl Parameterized for ExtractorModel {
    fn tensors(&self) -> Vec<(String, &Vec<f32>)> {
        let mut v = Vec::new();
        self.e.tensors("e", &mut v);
        self.f.tensors("f", &mut v);
        self.g.tensors("g", &mut v);
        v.push(("out.weight".into(), &self.out.weight.value));
        v.push(("out.bias".into(), &self.out.bias.value));
        v
    }

    fn tensors_mut(&mut self) -> Vec<(String, &mut Vec<f32>)> {
        let mut v = Vec::new();
        self.e.tensors_mut("e", &mut v);
        self.f.tensors_mut("f", &mut v);
        self.g.tensors_mut("g", &mut v);
        v.push(("out.weight".into(), &mut self.out.weight.value));
        v.push(("out.bias".into(), &mut self.out.bias.value));
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = Vec::new();
        self.e.params_mut(&mut v);
        self.f.params_mut(&mut v);
        self.g.params_mut(&mut v);
        v.push(&mut self.out.weight);
        v.push(&mut self.out.bias);
        v
    }
}

/// Recovers the candidate watermark `w'` from a rendered view.
pub fn extract(model: &ExtractorModel, s: &Image) -> Result<Image> {
    s.ensure_rgb()?;
    let out = model.forward_eval(&images_to_tensor(&[s]));
    Ok(tensor_to_images(&out).remove(0))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FinetuneConfig {
    #[serde(flatten)]
    pub train: TrainConfig,
    /// Weight of the repulsion term pushing negatives toward mid-gray.
    pub lambda_neg: f64,
    /// Standard deviation of Gaussian jitter added to the secret render
    /// at each step (0 disables it).
    pub input_noise: f64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig {
                steps: 3000,
                learning_rate: 1e-4,
                ..TrainConfig::default()
            },
            lambda_neg: 0.0,
            input_noise: 0.0,
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        self.train.validate("finetune")?;
        if !(self.lambda_neg.is_finite() && self.lambda_neg >= 0.0) {
            return Err(Error::Config(format!("lambda_neg must be >= 0, got {}", self.lambda_neg)));
        }
        if !(self.input_noise.is_finite() && self.input_noise >= 0.0) {
            return Err(Error::Config(format!("input_noise must be >= 0, got {}", self.input_noise)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FinetunePoint {
    pub step: usize,
    pub loss: f64,
    pub nc: f64,
}

pub struct FinetuneOutcome {
    pub model: ExtractorModel,
    pub curve: Vec<FinetunePoint>,
}

/// Overfits the extractor to map the secret render onto the watermark.
pub fn finetune_extractor(
    model: &ExtractorModel,
    secret_render: &Image,
    w: &Image,
    negatives: &[Image],
    weights: &LossWeights,
    cfg: &FinetuneConfig,
) -> Result<FinetuneOutcome> {
    cfg.validate()?;
    weights.validate()?;
    secret_render.ensure_rgb()?;
    w.ensure_rgb()?;
    if secret_render.shape() != w.shape() {
        return Err(Error::Validation(format!(
            "secret render {:?} and watermark {:?} differ in shape",
            secret_render.shape(),
            w.shape()
        )));
    }
    for n in negatives {
        if n.shape() != w.shape() {
            return Err(Error::Validation("negative views must match the watermark shape".into()));
        }
    }
    let mut model = model.clone();
    let mut opt = Adam::new(cfg.train.learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
    let jitter = Normal::new(0.0, cfg.input_noise.max(f64::MIN_POSITIVE)).map_err(|e| Error::Config(e.to_string()))?;
    let gray = Image::filled(w.height(), w.width(), 3, 0.5);
    let clean = images_to_tensor(&[secret_render]);
    let negs: Vec<Tensor> = negatives.iter().map(|n| images_to_tensor(&[n])).collect();
    let mut curve = Vec::new();
    for step in 0..cfg.train.steps {
        model.zero_grad();
        let mut input = clean.clone();
        if cfg.input_noise > 0.0 {
            input
                .data
                .iter_mut()
                .for_each(|v| *v = (*v + jitter.sample(&mut rng) as f32).clamp(0.0, 1.0));
        }
        let cache = model.forward_train(&input);
        let w_prime = tensor_to_images(&cache.output).remove(0);
        let (mut loss, grad) = metrics::loss_ld_grad(w, &w_prime, weights)?;
        let mut d_out = Tensor::zeros(1, 3, w.height(), w.width());
        scatter_hwc_grad(&mut d_out, 0, &grad, 1.0);
        model.backward(&cache, d_out, false);
        if cfg.lambda_neg > 0.0 && !negs.is_empty() {
            let scale = cfg.lambda_neg / negs.len() as f64;
            for neg in &negs {
                let nc_cache = model.forward_train(neg);
                let out = tensor_to_images(&nc_cache.output).remove(0);
                let m = metrics::mse(&gray, &out)?;
                loss += scale * m;
                let n = out.data().len() as f64;
                let g: Vec<f64> = out.data().iter().map(|v| 2.0 * (v - 0.5) / n).collect();
                let mut d = Tensor::zeros(1, 3, w.height(), w.width());
                scatter_hwc_grad(&mut d, 0, &g, scale);
                model.backward(&nc_cache, d, false);
            }
        }
        if !loss.is_finite() {
            return Err(Error::Training {
                stage: "finetune",
                step,
                detail: format!("loss is {loss}"),
            });
        }
        if step % cfg.train.log_every == 0 || step + 1 == cfg.train.steps {
            let nc = metrics::nc(w, &w_prime)?;
            log::debug!("finetune step {step}: loss {loss:.5} nc {nc:.4}");
            curve.push(FinetunePoint { step, loss, nc });
        }
        opt.step(&mut model.params_mut());
    }
    model.recalibrate(&clean);
    Ok(FinetuneOutcome { model, curve })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pattern(h: usize, w: usize, phase: f64) -> Image {
        Image::from_fn(h, w, |y, x| {
            let (fy, fx) = (y as f64 / h as f64, x as f64 / w as f64);
            [
                0.5 + 0.4 * (7.0 * fx + phase).sin(),
                0.5 + 0.4 * (5.0 * fy - phase).cos(),
                0.5 + 0.4 * (3.0 * (fx + fy) + phase).sin(),
            ]
        })
    }

    #[test]
    fn preserves_shape_and_range() {
        let m = ExtractorModel::new(1);
        let out = extract(&m, &pattern(20, 13, 0.0)).unwrap();
        assert_eq!(out.shape(), (20, 13, 3));
        out.validate().unwrap();
    }

    #[test]
    fn rejects_non_rgb_input() {
        let m = ExtractorModel::new(1);
        let gray = Image::filled(8, 8, 1, 0.5);
        assert!(matches!(extract(&m, &gray), Err(Error::Validation(_))));
    }

    #[test]
    fn inference_is_deterministic() {
        let m = ExtractorModel::new(3);
        let s = pattern(16, 16, 0.3);
        assert_eq!(extract(&m, &s).unwrap(), extract(&m, &s).unwrap());
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        let mut m = ExtractorModel::new(4);
        let s = images_to_tensor(&[&pattern(9, 9, 0.1)]);
        let proj: Vec<f32> = (0..243).map(|i| ((i * 37 % 17) as f32 - 8.0) / 8.0).collect();
        let cache = m.forward_train(&s);
        let dx = m.backward(&cache, Tensor::from_data(1, 3, 9, 9, proj.clone()), true).unwrap();
        let objective = |t: &Tensor| -> f64 {
            let mut mm = m.clone();
            let out = mm.forward_train(t).output;
            out.data.iter().zip(&proj).map(|(a, b)| *a as f64 * *b as f64).sum()
        };
        // Directional derivative along a fixed dense direction. Single
        // precision and ReLU kinks limit the attainable agreement; wiring
        // mistakes in the dense concatenations show up as O(1) errors.
        let dir: Vec<f32> = (0..243).map(|i| ((i * 53 % 23) as f32 - 11.0) / 11.0).collect();
        let eps = 1e-3f32;
        let shifted = |sign: f32| {
            let mut t = s.clone();
            t.data.iter_mut().zip(&dir).for_each(|(v, d)| *v += sign * eps * d);
            objective(&t)
        };
        let fd = (shifted(1.0) - shifted(-1.0)) / (2.0 * eps as f64);
        let analytic: f64 = dx.data.iter().zip(&dir).map(|(a, b)| *a as f64 * *b as f64).sum();
        assert!((fd - analytic).abs() <= 5e-2 * fd.abs().max(1.0), "{analytic} vs {fd}");
    }

    #[test]
    fn finetune_decreases_extraction_loss() {
        let model = ExtractorModel::new(9);
        let s = pattern(24, 24, 0.0);
        let w = pattern(24, 24, 2.0);
        let cfg = FinetuneConfig {
            train: TrainConfig {
                steps: 40,
                learning_rate: 1e-3,
                log_every: 10,
                ..TrainConfig::default()
            },
            ..FinetuneConfig::default()
        };
        let weights = LossWeights::default();
        let before = metrics::loss_ld(&w, &extract(&model, &s).unwrap(), &weights).unwrap();
        let out = finetune_extractor(&model, &s, &w, &[], &weights, &cfg).unwrap();
        let after = metrics::loss_ld(&w, &extract(&out.model, &s).unwrap(), &weights).unwrap();
        assert!(after < before, "{after} !< {before}");
        assert_eq!(out.curve.last().unwrap().step, 39);
    }

    #[test]
    fn recalibrated_inference_matches_training_output() {
        let mut m = ExtractorModel::new(2);
        let s = images_to_tensor(&[&pattern(12, 12, 0.7)]);
        let train = m.clone().forward_train(&s).output;
        m.recalibrate(&s);
        let eval = m.forward_eval(&s);
        for (a, b) in train.data.iter().zip(&eval.data) {
            assert!((a - b).abs() < 1e-5);
        }
    }
}
