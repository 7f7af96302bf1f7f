//! Training-set corruption: Gaussian, salt-and-pepper, speckle and Poisson.
//!
//! Default severities are estimates; the attack suite sweeps them.

use std::fmt;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imagery::Image;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseKind {
    None,
    Gaussian,
    SaltPepper,
    Speckle,
    Poisson,
}

impl NoiseKind {
    pub const ATTACKS: [NoiseKind; 4] = [
        NoiseKind::Gaussian,
        NoiseKind::SaltPepper,
        NoiseKind::Speckle,
        NoiseKind::Poisson,
    ];

    pub fn name(self) -> &'static str {
        match self {
            NoiseKind::None => "none",
            NoiseKind::Gaussian => "gaussian",
            NoiseKind::SaltPepper => "salt_pepper",
            NoiseKind::Speckle => "speckle",
            NoiseKind::Poisson => "poisson",
        }
    }
}

impl fmt::Display for NoiseKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for NoiseKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().replace('-', "_").as_str() {
            "none" => Ok(NoiseKind::None),
            "gaussian" => Ok(NoiseKind::Gaussian),
            "salt_pepper" | "pepper" => Ok(NoiseKind::SaltPepper),
            "speckle" => Ok(NoiseKind::Speckle),
            "poisson" => Ok(NoiseKind::Poisson),
            other => Err(Error::Config(format!("unknown noise kind '{other}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseConfig {
    pub kind: NoiseKind,
    /// Standard deviation; 0.1 corresponds to variance 0.01.
    pub gaussian_sigma: f64,
    pub sp_amount: f64,
    pub speckle_sigma: f64,
    pub poisson_scale: f64,
    pub seed: u64,
    /// Also corrupt the watermarked frames.
    pub include_embedded: bool,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self {
            kind: NoiseKind::None,
            gaussian_sigma: 0.1,
            sp_amount: 0.02,
            speckle_sigma: 0.1,
            poisson_scale: 255.0,
            seed: 0,
            include_embedded: false,
        }
    }
}

impl NoiseConfig {
    pub fn of_kind(kind: NoiseKind) -> Self {
        Self {
            kind,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let nonneg = |name: &str, v: f64| {
            if v.is_finite() && v >= 0.0 {
                Ok(())
            } else {
                Err(Error::Config(format!("noise.{name} must be finite and non-negative, got {v}")))
            }
        };
        nonneg("gaussian_sigma", self.gaussian_sigma)?;
        nonneg("speckle_sigma", self.speckle_sigma)?;
        if !(0.0..=1.0).contains(&self.sp_amount) {
            return Err(Error::Config(format!("noise.sp_amount must lie in [0, 1], got {}", self.sp_amount)));
        }
        if !(self.poisson_scale.is_finite() && self.poisson_scale > 0.0) {
            return Err(Error::Config(format!(
                "noise.poisson_scale must be positive, got {}",
                self.poisson_scale
            )));
        }
        Ok(())
    }
}

/// Seed used for frame `index` of a dataset.
pub fn frame_seed(seed: u64, index: usize) -> u64 {
    seed ^ index as u64
}

/// Applies the configured corruption with `cfg.seed`.
pub fn apply_noise(img: &Image, cfg: &NoiseConfig) -> Result<Image> {
    apply_noise_seeded(img, cfg, cfg.seed)
}

pub fn apply_noise_seeded(img: &Image, cfg: &NoiseConfig, seed: u64) -> Result<Image> {
    cfg.validate()?;
    img.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = img.clone();
    let data = out.data_mut();
    match cfg.kind {
        NoiseKind::None => return Ok(out),
        NoiseKind::Gaussian => {
            let n = Normal::new(0.0, cfg.gaussian_sigma).map_err(|e| Error::Config(e.to_string()))?;
            data.iter_mut().for_each(|v| *v += n.sample(&mut rng));
        }
        NoiseKind::Speckle => {
            let n = Normal::new(0.0, cfg.speckle_sigma).map_err(|e| Error::Config(e.to_string()))?;
            data.iter_mut().for_each(|v| *v += *v * n.sample(&mut rng));
        }
        NoiseKind::SaltPepper => {
            let channels = img.channels();
            let pixels = img.height() * img.width();
            let count = (cfg.sp_amount * pixels as f64).round() as usize;
            for p in sample(&mut rng, pixels, count.min(pixels)) {
                let v = if rng.gen_bool(0.5) { 1.0 } else { 0.0 };
                data[p * channels..(p + 1) * channels].iter_mut().for_each(|x| *x = v);
            }
        }
        NoiseKind::Poisson => {
            for v in data.iter_mut() {
                let lambda = *v * cfg.poisson_scale;
                let k = if lambda > 0.0 {
                    Poisson::new(lambda).map_err(|e| Error::Numeric(e.to_string()))?.sample(&mut rng)
                } else {
                    0.0
                };
                *v = k / cfg.poisson_scale;
            }
        }
    }
    data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn gradient(h: usize, w: usize) -> Image {
        Image::from_fn(h, w, |y, x| {
            let v = (y * w + x) as f64 / (h * w) as f64;
            [v, 1.0 - v, 0.5]
        })
    }

    fn mean_std(v: &[f64]) -> (f64, f64) {
        let m = v.iter().sum::<f64>() / v.len() as f64;
        let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64;
        (m, var.sqrt())
    }

    #[test]
    fn none_is_identity() {
        let img = gradient(17, 9);
        let out = apply_noise(&img, &NoiseConfig::default()).unwrap();
        assert_eq!(out, img);
    }

    #[test]
    fn full_salt_pepper_saturates() {
        let cfg = NoiseConfig {
            sp_amount: 1.0,
            ..NoiseConfig::of_kind(NoiseKind::SaltPepper)
        };
        let out = apply_noise(&gradient(32, 32), &cfg).unwrap();
        assert!(out.data().iter().all(|v| *v == 0.0 || *v == 1.0));
    }

    #[test]
    fn gaussian_moments() {
        let img = Image::filled(256, 256, 1, 0.5);
        let cfg = NoiseConfig {
            gaussian_sigma: 0.05,
            seed: 11,
            ..NoiseConfig::of_kind(NoiseKind::Gaussian)
        };
        let (m, s) = mean_std(apply_noise(&img, &cfg).unwrap().data());
        assert!((m - 0.5).abs() <= 3.0 * 0.05 / 256.0, "mean {m}");
        assert!((s - 0.05).abs() <= 0.005, "std {s}");
    }

    #[test]
    fn speckle_is_unbiased() {
        let img = Image::filled(256, 256, 1, 0.4);
        let cfg = NoiseConfig {
            seed: 5,
            ..NoiseConfig::of_kind(NoiseKind::Speckle)
        };
        let (m, _) = mean_std(apply_noise(&img, &cfg).unwrap().data());
        assert!((m - 0.4).abs() <= 3.0 * 0.04 / 256.0, "mean {m}");
    }

    #[test]
    fn poisson_preserves_mean() {
        let img = Image::filled(128, 128, 1, 0.3);
        let cfg = NoiseConfig::of_kind(NoiseKind::Poisson);
        let (m, s) = mean_std(apply_noise(&img, &cfg).unwrap().data());
        let expected_std = (0.3f64 / 255.0).sqrt();
        assert!((m - 0.3).abs() <= 4.0 * expected_std / 128.0, "mean {m}");
        assert!((s - expected_std).abs() <= 0.1 * expected_std, "std {s}");
    }

    #[test]
    fn distinct_seeds_decorrelate() {
        let img = Image::filled(256, 256, 1, 0.5);
        let a = apply_noise_seeded(&img, &NoiseConfig::of_kind(NoiseKind::Gaussian), frame_seed(3, 0)).unwrap();
        let b = apply_noise_seeded(&img, &NoiseConfig::of_kind(NoiseKind::Gaussian), frame_seed(3, 1)).unwrap();
        let da: Vec<f64> = a.data().iter().map(|v| v - 0.5).collect();
        let db: Vec<f64> = b.data().iter().map(|v| v - 0.5).collect();
        let dot: f64 = da.iter().zip(&db).map(|(x, y)| x * y).sum();
        let na: f64 = da.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb: f64 = db.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((dot / (na * nb)).abs() < 0.05);
    }

    #[test]
    fn unknown_kind_is_config_error() {
        assert!(matches!("blur".parse::<NoiseKind>(), Err(Error::Config(_))));
        assert_eq!("salt-pepper".parse::<NoiseKind>().unwrap(), NoiseKind::SaltPepper);
    }

    #[test]
    fn out_of_range_amount_rejected() {
        let cfg = NoiseConfig {
            sp_amount: 1.5,
            ..NoiseConfig::of_kind(NoiseKind::SaltPepper)
        };
        assert!(matches!(apply_noise(&gradient(4, 4), &cfg), Err(Error::Config(_))));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn output_in_range_and_deterministic(kind_ix in 0usize..4, seed in any::<u64>()) {
            let cfg = NoiseConfig { seed, ..NoiseConfig::of_kind(NoiseKind::ATTACKS[kind_ix]) };
            let img = gradient(12, 10);
            let a = apply_noise(&img, &cfg).unwrap();
            let b = apply_noise(&img, &cfg).unwrap();
            prop_assert!(a.data().iter().all(|v| (0.0..=1.0).contains(v)));
            prop_assert_eq!(a, b);
        }
    }
}
