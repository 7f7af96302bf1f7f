//! Pixel containers and PNG I/O.
//!
//! Pixels are stored row-major, channel-interleaved (HWC) as `f64` in the
//! normalized range [0, 1]. The 255 dynamic range only appears inside the
//! metric constants.

use std::path::Path;

use image::imageops::FilterType;
use image::{ImageBuffer, Rgb, Rgb32FImage};

use crate::error::{Error, Result};

/// An H×W×C image. Construction only checks the shape; the [0, 1] range
/// invariant is established by [`load_image`] and [`clamp01`] and checked
/// by [`Image::validate`].
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::Validation(format!(
                "image dimensions must be positive, got {height}x{width}x{channels}"
            )));
        }
        if data.len() != height * width * channels {
            return Err(Error::Validation(format!(
                "pixel buffer has {} values, expected {height}x{width}x{channels}",
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Self {
        Self::new(height, width, channels, vec![value; height * width * channels])
            .expect("positive dimensions")
    }

    /// Builds an RGB image from a per-pixel function of `(row, col)`.
    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> [f64; 3]) -> Self {
        let mut data = Vec::with_capacity(height * width * 3);
        for y in 0..height {
            for x in 0..width {
                data.extend_from_slice(&f(y, x));
            }
        }
        Self::new(height, width, 3, data).expect("positive dimensions")
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f64) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.shape() == other.shape()
    }

    /// Checks that every value is finite and inside [0, 1].
    pub fn validate(&self) -> Result<()> {
        if let Some((i, v)) = self
            .data
            .iter()
            .enumerate()
            .find(|(_, v)| !v.is_finite() || **v < 0.0 || **v > 1.0)
        {
            return Err(Error::Validation(format!(
                "pixel value {v} at flat index {i} is outside [0, 1]"
            )));
        }
        Ok(())
    }

    pub fn ensure_rgb(&self) -> Result<()> {
        if self.channels != 3 {
            return Err(Error::Validation(format!(
                "expected a 3-channel image, got {} channels",
                self.channels
            )));
        }
        Ok(())
    }

    /// Planar (CHW) single-precision copy, the layout the conv networks use.
    pub fn to_chw_f32(&self) -> Vec<f32> {
        let hw = self.height * self.width;
        let mut out = vec![0.0f32; hw * self.channels];
        for (p, px) in self.data.chunks_exact(self.channels).enumerate() {
            for (c, v) in px.iter().enumerate() {
                out[c * hw + p] = *v as f32;
            }
        }
        out
    }

    pub fn from_chw_f32(height: usize, width: usize, channels: usize, chw: &[f32]) -> Result<Self> {
        let hw = height * width;
        if chw.len() != hw * channels {
            return Err(Error::Validation("planar buffer size mismatch".into()));
        }
        let mut data = vec![0.0; hw * channels];
        for c in 0..channels {
            for p in 0..hw {
                data[p * channels + c] = chw[c * hw + p] as f64;
            }
        }
        Self::new(height, width, channels, data)
    }

    /// Copy of one channel as a row-major plane.
    pub fn plane(&self, c: usize) -> Vec<f64> {
        self.data
            .chunks_exact(self.channels)
            .map(|px| px[c])
            .collect()
    }

    /// Bilinear (tent-filter) resize.
    pub fn resized(&self, height: usize, width: usize) -> Result<Image> {
        self.ensure_rgb()?;
        if (height, width) == (self.height, self.width) {
            return Ok(self.clone());
        }
        let buf: Rgb32FImage = ImageBuffer::from_raw(
            self.width as u32,
            self.height as u32,
            self.data.iter().map(|v| *v as f32).collect(),
        )
        .expect("buffer size checked at construction");
        let out = image::imageops::resize(&buf, width as u32, height as u32, FilterType::Triangle);
        let data = out
            .into_raw()
            .into_iter()
            .map(|v| (v as f64).clamp(0.0, 1.0))
            .collect();
        Image::new(height, width, 3, data)
    }
}

/// Reference/candidate pair with matching shapes, the input of every metric.
#[derive(Clone, Debug)]
pub struct ImagePair {
    pub reference: Image,
    pub candidate: Image,
}

impl ImagePair {
    pub fn new(reference: Image, candidate: Image) -> Result<Self> {
        check_same_shape(&reference, &candidate)?;
        Ok(Self {
            reference,
            candidate,
        })
    }
}

pub(crate) fn check_same_shape(a: &Image, b: &Image) -> Result<()> {
    if !a.same_shape(b) {
        return Err(Error::Validation(format!(
            "shape mismatch: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// Loads an 8-bit RGB or RGBA image, compositing alpha over white and
/// optionally resizing to `target_size = (height, width)`.
pub fn load_image(path: impl AsRef<Path>, target_size: Option<(usize, usize)>) -> Result<Image> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let decoded = image::load_from_memory(&bytes).map_err(|e| Error::Decode {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let rgba = decoded.to_rgba8();
    let (w, h) = rgba.dimensions();
    let mut data = Vec::with_capacity((w * h * 3) as usize);
    for px in rgba.pixels() {
        let a = px[3] as f64 / 255.0;
        for c in 0..3 {
            let v = px[c] as f64 / 255.0;
            data.push(v * a + (1.0 - a));
        }
    }
    let img = Image::new(h as usize, w as usize, 3, data)?;
    match target_size {
        Some((th, tw)) => img.resized(th, tw),
        None => Ok(img),
    }
}

/// Writes an 8-bit RGB PNG. Values are rounded to the nearest level.
pub fn save_image(img: &Image, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    img.ensure_rgb()?;
    img.validate()?;
    let raw: Vec<u8> = img
        .data
        .iter()
        .map(|v| (v * 255.0).round() as u8)
        .collect();
    let buf: ImageBuffer<Rgb<u8>, Vec<u8>> =
        ImageBuffer::from_raw(img.width as u32, img.height as u32, raw).expect("sized buffer");
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut encoded = Vec::new();
    buf.write_to(&mut std::io::Cursor::new(&mut encoded), image::ImageFormat::Png)
        .map_err(|e| Error::Format(format!("png encode: {e}")))?;
    std::fs::write(path, encoded).map_err(|e| Error::io(path, e))
}

/// Elementwise clamp into [0, 1]. Rejects non-finite input.
pub fn clamp01(img: &Image) -> Result<Image> {
    if let Some(v) = img.data.iter().find(|v| !v.is_finite()) {
        return Err(Error::Validation(format!("cannot clamp non-finite value {v}")));
    }
    let mut out = img.clone();
    out.data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    Ok(out)
}
