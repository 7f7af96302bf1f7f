//! Radiance-field MLPs: a ReLU trunk with a skip connection of the encoded
//! position, a rectified density head, and a view-dependent colour branch.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::encoding::{encode_into, EncodingConfig};
use crate::error::{Error, Result};
use crate::nn::{relu_backward, relu_inplace, Linear, Param, Parameterized};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FieldConfig {
    pub depth: usize,
    pub width: usize,
    /// Trunk layers whose output is concatenated with the encoded position.
    pub skips: Vec<usize>,
    pub color_width: usize,
    /// Initial bias of the density head.
    pub sigma_bias: f32,
    pub encoding: EncodingConfig,
}

impl Default for FieldConfig {
    fn default() -> Self {
        Self {
            depth: 8,
            width: 256,
            skips: vec![4],
            color_width: 128,
            sigma_bias: -0.1,
            encoding: EncodingConfig::default(),
        }
    }
}

impl FieldConfig {
    /// Reduced network used for single-CPU runs.
    pub fn desk() -> Self {
        Self {
            depth: 4,
            width: 64,
            skips: vec![2],
            color_width: 32,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.width == 0 || self.color_width == 0 {
            return Err(Error::Config("field depth and widths must be positive".into()));
        }
        if let Some(s) = self.skips.iter().find(|&&s| s + 1 >= self.depth) {
            return Err(Error::Config(format!(
                "skip after layer {s} needs a following trunk layer (depth {})",
                self.depth
            )));
        }
        if !self.sigma_bias.is_finite() {
            return Err(Error::Config("sigma_bias must be finite".into()));
        }
        Ok(())
    }
}

/// One coarse or fine network.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub trunk: Vec<Linear>,
    pub sigma: Linear,
    pub feature: Linear,
    pub color: Linear,
    pub rgb: Linear,
    skip_after: Vec<bool>,
    pos_width: usize,
    dir_width: usize,
}

/// Activations of one forward pass.
pub struct MlpCache {
    rows: usize,
    inputs: Vec<Vec<f32>>,
    outputs: Vec<Vec<f32>>,
    sigma_raw: Vec<f32>,
    color_in: Vec<f32>,
    color_h: Vec<f32>,
    pub rgb: Vec<f32>,
}

impl MlpCache {
    /// Rectified density per point.
    pub fn sigma(&self) -> Vec<f64> {
        self.sigma_raw.iter().map(|v| v.max(0.0) as f64).collect()
    }

    pub fn colors(&self) -> Vec<[f64; 3]> {
        self.rgb
            .chunks_exact(3)
            .map(|c| [c[0] as f64, c[1] as f64, c[2] as f64])
            .collect()
    }

    pub fn rows(&self) -> usize {
        self.rows
    }
}

fn concat_rows(a: &[f32], wa: usize, b: &[f32], wb: usize, rows: usize) -> Vec<f32> {
    let mut out = Vec::with_capacity(rows * (wa + wb));
    for r in 0..rows {
        out.extend_from_slice(&a[r * wa..(r + 1) * wa]);
        out.extend_from_slice(&b[r * wb..(r + 1) * wb]);
    }
    out
}

fn split_rows(x: &[f32], wa: usize, wb: usize, rows: usize) -> (Vec<f32>, Vec<f32>) {
    let (mut a, mut b) = (Vec::with_capacity(rows * wa), Vec::with_capacity(rows * wb));
    for r in x.chunks_exact(wa + wb) {
        a.extend_from_slice(&r[..wa]);
        b.extend_from_slice(&r[wa..]);
    }
    (a, b)
}

impl Mlp {
    pub fn new(cfg: &FieldConfig, rng: &mut ChaCha8Rng) -> Self {
        let (pw, dw) = (cfg.encoding.pos_width(), cfg.encoding.dir_width());
        let skip_after: Vec<bool> = (0..cfg.depth).map(|i| cfg.skips.contains(&i)).collect();
        let mut trunk = Vec::with_capacity(cfg.depth);
        for i in 0..cfg.depth {
            let in_dim = if i == 0 {
                pw
            } else if skip_after[i - 1] {
                cfg.width + pw
            } else {
                cfg.width
            };
            trunk.push(Linear::new(in_dim, cfg.width, rng));
        }
        let mut sigma = Linear::new(cfg.width, 1, rng);
        sigma.bias.value[0] = cfg.sigma_bias;
        Self {
            trunk,
            sigma,
            feature: Linear::new(cfg.width, cfg.width, rng),
            color: Linear::new(cfg.width + dw, cfg.color_width, rng),
            rgb: Linear::new(cfg.color_width, 3, rng),
            skip_after,
            pos_width: pw,
            dir_width: dw,
        }
    }

    fn width(&self) -> usize {
        self.sigma.in_dim
    }

    /// Evaluates `rows` points given their encoded positions and directions.
    pub fn forward(&self, pos: &[f32], dir: &[f32], rows: usize) -> MlpCache {
        let w = self.width();
        let mut inputs = Vec::with_capacity(self.trunk.len());
        let mut outputs: Vec<Vec<f32>> = Vec::with_capacity(self.trunk.len());
        for (i, layer) in self.trunk.iter().enumerate() {
            let input = if i == 0 {
                pos.to_vec()
            } else if self.skip_after[i - 1] {
                concat_rows(&outputs[i - 1], w, pos, self.pos_width, rows)
            } else {
                outputs[i - 1].clone()
            };
            let mut h = layer.forward(&input, rows);
            relu_inplace(&mut h);
            inputs.push(input);
            outputs.push(h);
        }
        let h = outputs.last().expect("non-empty trunk");
        let sigma_raw = self.sigma.forward(h, rows);
        let feat = self.feature.forward(h, rows);
        let color_in = concat_rows(&feat, w, dir, self.dir_width, rows);
        let mut color_h = self.color.forward(&color_in, rows);
        relu_inplace(&mut color_h);
        let mut rgb = self.rgb.forward(&color_h, rows);
        rgb.iter_mut().for_each(|v| *v = 1.0 / (1.0 + (-*v).exp()));
        MlpCache {
            rows,
            inputs,
            outputs,
            sigma_raw,
            color_in,
            color_h,
            rgb,
        }
    }

    /// Backpropagates gradients with respect to the rectified density and
    /// the sigmoid colour into `grads` (laid out as [`Mlp::linears`]).
    pub fn backward(&self, cache: &MlpCache, d_sigma: &[f32], d_rgb: &[f32], grads: &mut [Vec<f32>]) {
        let rows = cache.rows;
        let w = self.width();
        let nt = self.trunk.len();
        let (trunk_g, head_g) = grads.split_at_mut(2 * nt);
        let [gsw, gsb, gfw, gfb, gcw, gcb, grw, grb] = head_g else {
            panic!("gradient buffer layout mismatch");
        };
        let d_raw: Vec<f32> = d_rgb
            .iter()
            .zip(&cache.rgb)
            .map(|(g, s)| g * s * (1.0 - s))
            .collect();
        let mut d_ch = self
            .rgb
            .backward_into(&cache.color_h, &d_raw, rows, grw, grb, true)
            .expect("input grad");
        relu_backward(&cache.color_h, &mut d_ch);
        let d_cin = self
            .color
            .backward_into(&cache.color_in, &d_ch, rows, gcw, gcb, true)
            .expect("input grad");
        let (d_feat, _) = split_rows(&d_cin, w, self.dir_width, rows);
        let h = cache.outputs.last().expect("non-empty trunk");
        let mut d_h = self
            .feature
            .backward_into(h, &d_feat, rows, gfw, gfb, true)
            .expect("input grad");
        let d_sraw: Vec<f32> = d_sigma
            .iter()
            .zip(&cache.sigma_raw)
            .map(|(g, r)| if *r > 0.0 { *g } else { 0.0 })
            .collect();
        let d_h2 = self
            .sigma
            .backward_into(h, &d_sraw, rows, gsw, gsb, true)
            .expect("input grad");
        d_h.iter_mut().zip(&d_h2).for_each(|(a, b)| *a += b);
        for i in (0..nt).rev() {
            relu_backward(&cache.outputs[i], &mut d_h);
            let (gw, rest) = trunk_g[2 * i..].split_at_mut(1);
            let d_in = self.trunk[i].backward_into(&cache.inputs[i], &d_h, rows, &mut gw[0], &mut rest[0], i > 0);
            if i == 0 {
                break;
            }
            let d_in = d_in.expect("input grad");
            d_h = if self.skip_after[i - 1] {
                split_rows(&d_in, w, self.pos_width, rows).0
            } else {
                d_in
            };
        }
    }

    /// Layers in gradient-buffer order.
    pub fn linears(&self) -> Vec<&Linear> {
        let mut v: Vec<&Linear> = self.trunk.iter().collect();
        v.extend([&self.sigma, &self.feature, &self.color, &self.rgb]);
        v
    }

    pub fn linears_mut(&mut self) -> Vec<&mut Linear> {
        let mut v: Vec<&mut Linear> = self.trunk.iter_mut().collect();
        v.extend([&mut self.sigma, &mut self.feature, &mut self.color, &mut self.rgb]);
        v
    }

    /// Zeroed buffers matching [`Mlp::backward`]'s layout.
    pub fn zero_grads(&self) -> Vec<Vec<f32>> {
        self.linears()
            .iter()
            .flat_map(|l| [vec![0.0; l.weight.len()], vec![0.0; l.bias.len()]])
            .collect()
    }
}

/// Coarse and fine networks sharing one configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct RadianceField {
    pub config: FieldConfig,
    pub coarse: Mlp,
    pub fine: Mlp,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Net {
    Coarse,
    Fine,
}

impl RadianceField {
    pub fn new(config: FieldConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let coarse = Mlp::new(&config, &mut rng);
        let fine = Mlp::new(&config, &mut rng);
        Ok(Self { config, coarse, fine })
    }

    pub fn net(&self, which: Net) -> &Mlp {
        match which {
            Net::Coarse => &self.coarse,
            Net::Fine => &self.fine,
        }
    }

    /// Encodes points and unit view directions for network input.
    pub fn encode(&self, points: &[[f64; 3]], dirs: &[[f64; 3]]) -> (Vec<f32>, Vec<f32>) {
        let e = &self.config.encoding;
        let mut pos = Vec::with_capacity(points.len() * e.pos_width());
        let mut dir = Vec::with_capacity(points.len() * e.dir_width());
        for (p, d) in points.iter().zip(dirs) {
            encode_into(*p, e.l_pos, e.include_input, &mut pos);
            encode_into(*d, e.l_dir, e.include_input, &mut dir);
        }
        (pos, dir)
    }
}

impl Parameterized for RadianceField {
    fn tensors(&self) -> Vec<(String, &Vec<f32>)> {
        let mut v = Vec::new();
        for (name, net) in [("coarse", &self.coarse), ("fine", &self.fine)] {
            for (i, l) in net.linears().into_iter().enumerate() {
                v.push((format!("{name}.{i}.weight"), &l.weight.value));
                v.push((format!("{name}.{i}.bias"), &l.bias.value));
            }
        }
        v
    }

    fn tensors_mut(&mut self) -> Vec<(String, &mut Vec<f32>)> {
        let mut v = Vec::new();
        for (name, net) in [("coarse", &mut self.coarse), ("fine", &mut self.fine)] {
            for (i, l) in net.linears_mut().into_iter().enumerate() {
                v.push((format!("{name}.{i}.weight"), &mut l.weight.value));
                v.push((format!("{name}.{i}.bias"), &mut l.bias.value));
            }
        }
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = Vec::new();
        for net in [&mut self.coarse, &mut self.fine] {
            for l in net.linears_mut() {
                v.push(&mut l.weight);
                v.push(&mut l.bias);
            }
        }
        v
    }
}
