//! Sinusoidal positional encoding.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncodingConfig {
    pub l_pos: usize,
    pub l_dir: usize,
    pub include_input: bool,
}

impl Default for EncodingConfig {
    fn default() -> Self {
        Self {
            l_pos: 10,
            l_dir: 4,
            include_input: true,
        }
    }
}

impl EncodingConfig {
    pub fn pos_width(&self) -> usize {
        encoded_width(self.l_pos, self.include_input)
    }

    pub fn dir_width(&self) -> usize {
        encoded_width(self.l_dir, self.include_input)
    }
}

pub fn encoded_width(octaves: usize, include_input: bool) -> usize {
    3 * (usize::from(include_input) + 2 * octaves)
}

/// `[v, sin(2^0 π v), cos(2^0 π v), …, sin(2^(L-1) π v), cos(2^(L-1) π v)]`.
pub fn positional_encode(v: [f64; 3], octaves: usize, include_input: bool) -> Vec<f64> {
    let mut out = Vec::with_capacity(encoded_width(octaves, include_input));
    if include_input {
        out.extend_from_slice(&v);
    }
    for j in 0..octaves {
        let f = (1u64 << j) as f64 * PI;
        out.extend(v.iter().map(|x| (f * x).sin()));
        out.extend(v.iter().map(|x| (f * x).cos()));
    }
    out
}

/// Single-precision encoding appended to `out`, for network inputs.
pub(crate) fn encode_into(v: [f64; 3], octaves: usize, include_input: bool, out: &mut Vec<f32>) {
    if include_input {
        out.extend(v.iter().map(|x| *x as f32));
    }
    for j in 0..octaves {
        let f = (1u64 << j) as f64 * PI;
        out.extend(v.iter().map(|x| (f * x).sin() as f32));
        out.extend(v.iter().map(|x| (f * x).cos() as f32));
    }
}
