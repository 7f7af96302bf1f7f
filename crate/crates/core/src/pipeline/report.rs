//! CSV tables, PNG charts and the run summary.

use std::fs;
use std::path::Path;

use image::{Rgb, RgbImage};
use imageproc::drawing::{draw_filled_rect_mut, draw_hollow_rect_mut, draw_line_segment_mut};
use imageproc::rect::Rect;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub fn write_csv<T: Serialize>(path: impl AsRef<Path>, rows: &[T]) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_csv<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<Vec<T>> {
    let path = path.as_ref();
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    r.deserialize().map(|row| row.map_err(|e| csv_error(path, e))).collect()
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    if e.is_io_error() {
        match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            _ => unreachable!(),
        }
    } else {
        Error::Decode {
            path: path.to_path_buf(),
            message: e.to_string(),
        }
    }
}

pub fn write_json<T: Serialize>(path: impl AsRef<Path>, value: &T) -> Result<()> {
    let path = path.as_ref();
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Format(e.to_string()))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

const PLOT_W: u32 = 480;
const PLOT_H: u32 = 320;
const MARGIN: f32 = 30.0;
const WHITE: Rgb<u8> = Rgb([255, 255, 255]);
const AXIS: Rgb<u8> = Rgb([40, 40, 40]);
const GRID: Rgb<u8> = Rgb([225, 225, 225]);
pub const BLUE: Rgb<u8> = Rgb([31, 119, 180]);
pub const ORANGE: Rgb<u8> = Rgb([255, 127, 14]);
pub const RED: Rgb<u8> = Rgb([214, 39, 40]);

fn canvas() -> RgbImage {
    let mut img = RgbImage::from_pixel(PLOT_W, PLOT_H, WHITE);
    for i in 1..5 {
        let y = MARGIN + (PLOT_H as f32 - 2.0 * MARGIN) * i as f32 / 5.0;
        draw_line_segment_mut(&mut img, (MARGIN, y), (PLOT_W as f32 - MARGIN, y), GRID);
    }
    let r = Rect::at(MARGIN as i32, MARGIN as i32).of_size(PLOT_W - 2 * MARGIN as u32, PLOT_H - 2 * MARGIN as u32);
    draw_hollow_rect_mut(&mut img, r, AXIS);
    img
}

fn save_png(img: &RgbImage, path: &Path) -> Result<()> {
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

/// Maps data onto the plot area; degenerate ranges are widened.
struct Axes {
    x: (f64, f64),
    y: (f64, f64),
}

impl Axes {
    fn fit(points: impl Iterator<Item = (f64, f64)> + Clone, y_extra: &[f64]) -> Self {
        let span = |it: &mut dyn Iterator<Item = f64>| {
            it.filter(|v| v.is_finite())
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)))
        };
        let mut x = span(&mut points.clone().map(|p| p.0));
        let mut y = span(&mut points.map(|p| p.1).chain(y_extra.iter().copied()));
        for r in [&mut x, &mut y] {
            if !r.0.is_finite() {
                *r = (0.0, 1.0);
            }
            if r.1 - r.0 < 1e-12 {
                *r = (r.0 - 0.5, r.1 + 0.5);
            }
        }
        Self { x, y }
    }

    fn map(&self, (x, y): (f64, f64)) -> (f32, f32) {
        let w = PLOT_W as f64 - 2.0 * MARGIN as f64;
        let h = PLOT_H as f64 - 2.0 * MARGIN as f64;
        let y = if y.is_finite() { y } else { self.y.1 };
        let px = MARGIN as f64 + (x - self.x.0) / (self.x.1 - self.x.0) * w;
        let py = MARGIN as f64 + (1.0 - (y - self.y.0) / (self.y.1 - self.y.0)) * h;
        (px as f32, py as f32)
    }
}

/// Polyline chart; every series is drawn with square markers.
pub fn line_plot(path: impl AsRef<Path>, series: &[(Vec<(f64, f64)>, Rgb<u8>)]) -> Result<()> {
    let mut img = canvas();
    let axes = Axes::fit(series.iter().flat_map(|s| s.0.iter().copied()), &[]);
    for (pts, color) in series {
        let mapped: Vec<(f32, f32)> = pts.iter().map(|p| axes.map(*p)).collect();
        for pair in mapped.windows(2) {
            draw_line_segment_mut(&mut img, pair[0], pair[1], *color);
        }
        for (x, y) in mapped {
            draw_filled_rect_mut(&mut img, Rect::at(x as i32 - 2, y as i32 - 2).of_size(5, 5), *color);
        }
    }
    save_png(&img, path.as_ref())
}

/// Bar chart with an optional horizontal threshold line.
pub fn bar_plot(path: impl AsRef<Path>, values: &[f64], threshold: Option<f64>) -> Result<()> {
    let mut img = canvas();
    let extra: Vec<f64> = threshold.into_iter().chain([0.0]).collect();
    let axes = Axes::fit(values.iter().enumerate().map(|(i, v)| (i as f64, *v)), &extra);
    let n = values.len().max(1) as f32;
    let slot = (PLOT_W as f32 - 2.0 * MARGIN) / n;
    let (_, base) = axes.map((0.0, axes.y.0));
    for (i, v) in values.iter().enumerate() {
        let (_, top) = axes.map((0.0, *v));
        let x = MARGIN + slot * (i as f32 + 0.2);
        let h = (base - top).max(1.0);
        draw_filled_rect_mut(&mut img, Rect::at(x as i32, top as i32).of_size((slot * 0.6).max(1.0) as u32, h as u32), BLUE);
    }
    if let Some(t) = threshold {
        let (_, y) = axes.map((0.0, t));
        draw_line_segment_mut(&mut img, (MARGIN, y), (PLOT_W as f32 - MARGIN, y), RED);
    }
    save_png(&img, path.as_ref())
}

/// Machine-readable run summary; `None` marks a missing stage output.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub missing: Vec<String>,
    pub embedding: Option<EmbeddingSummary>,
    pub nerf: Option<NerfSummary>,
    pub verification: Option<serde_json::Value>,
    pub sweep: Option<Vec<super::SweepRow>>,
    pub attacks: Option<Vec<super::AttackRow>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingSummary {
    pub hosts: usize,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NerfSummary {
    pub views: usize,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
}

fn fmt_opt(v: Option<f64>, digits: usize) -> String {
    v.map(|x| format!("{x:.digits$}")).unwrap_or_else(|| "missing".into())
}

impl RunReport {
    pub fn to_markdown(&self) -> String {
        let mut s = String::from("# Run report\n\n");
        if !self.missing.is_empty() {
            s.push_str("Missing stage outputs:\n\n");
            for m in &self.missing {
                s.push_str(&format!("- {m}: missing\n"));
            }
            s.push('\n');
        }
        s.push_str("## Imperceptibility and extraction\n\n| quantity | PSNR (dB) | SSIM |\n|---|---|---|\n");
        let e = self.embedding.as_ref();
        s.push_str(&format!(
            "| host vs watermarked host | {} | {} |\n",
            fmt_opt(e.map(|e| e.mean_psnr), 2),
            fmt_opt(e.map(|e| e.mean_ssim), 4)
        ));
        let v = self.verification.as_ref();
        let num = |k: &str| v.and_then(|v| v.get(k)).and_then(|x| x.as_f64());
        s.push_str(&format!(
            "| watermark vs extracted | {} | {} |\n",
            fmt_opt(num("psnr_db"), 2),
            fmt_opt(num("ssim"), 4)
        ));
        let n = self.nerf.as_ref();
        s.push_str(&format!(
            "| held-out novel views | {} | {} |\n\n",
            fmt_opt(n.map(|n| n.mean_psnr), 2),
            fmt_opt(n.map(|n| n.mean_ssim), 4)
        ));
        s.push_str(&format!(
            "Verification: NC {} against tau {}, decision {}.\n\n",
            fmt_opt(num("nc"), 4),
            fmt_opt(num("tau"), 2),
            v.and_then(|v| v.get("decision")).and_then(|d| d.as_str()).unwrap_or("missing")
        ));
        s.push_str("## Angle sweep\n\n");
        match &self.sweep {
            Some(rows) => {
                s.push_str("| angle (deg) | PSNR (dB) | SSIM | NC |\n|---|---|---|---|\n");
                for r in rows {
                    s.push_str(&format!("| {} | {:.2} | {:.4} | {:.4} |\n", r.angle_deg, r.psnr_db, r.ssim, r.nc));
                }
            }
            None => s.push_str("missing\n"),
        }
        s.push_str("\n## Noise attacks\n\n");
        match &self.attacks {
            Some(rows) => {
                s.push_str("| noise | BER | NC | PSNR (dB) | SSIM |\n|---|---|---|---|---|\n");
                for r in rows {
                    s.push_str(&format!(
                        "| {} | {:.5} | {:.4} | {:.2} | {:.4} |\n",
                        r.kind, r.ber, r.nc, r.psnr_db, r.ssim
                    ));
                }
            }
            None => s.push_str("missing\n"),
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[derive(Debug, PartialEq, Serialize, Deserialize)]
    struct Row {
        a: usize,
        b: f64,
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.csv");
        let rows = vec![Row { a: 1, b: 0.25 }, Row { a: 2, b: -1e-9 }];
        write_csv(&p, &rows).unwrap();
        assert_eq!(read_csv::<Row>(&p).unwrap(), rows);
    }

    #[test]
    fn plots_are_deterministic_pngs() {
        let dir = tempfile::tempdir().unwrap();
        let (a, b) = (dir.path().join("a.png"), dir.path().join("b.png"));
        let pts = vec![(0.0, 30.0), (10.0, 20.0), (30.0, f64::INFINITY)];
        line_plot(&a, &[(pts.clone(), BLUE)]).unwrap();
        line_plot(&b, &[(pts, BLUE)]).unwrap();
        assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
        bar_plot(&a, &[0.9, 0.95, 0.2], Some(0.85)).unwrap();
        bar_plot(&b, &[], None).unwrap();
        let img = image::open(&a).unwrap();
        assert_eq!((img.width(), img.height()), (PLOT_W, PLOT_H));
    }

    #[test]
    fn empty_report_marks_everything_missing() {
        let md = RunReport::default().to_markdown();
        assert!(md.matches("missing").count() >= 5);
    }
}
