//! Box overlays, density heatmaps and the count stamp.
//!
//! Every renderer is deterministic and output is PNG, so tests can compare
//! bytes.

use std::io::Cursor;
use std::path::Path;

use image::{ImageFormat, Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::density::{gaussian_blur_5x5, BlurConfig};
use crate::domain::{Artifacts, DensityMap, Detection, DetectionKind, FrameResult};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Colormap {
    #[default]
    Jet,
    Gray,
}

impl Colormap {
    /// Color for `v` in [0, 1].
    pub fn color(self, v: f64) -> [u8; 3] {
        let v = v.clamp(0.0, 1.0);
        let to_u8 = |x: f64| (x.clamp(0.0, 1.0) * 255.0).round() as u8;
        match self {
            Colormap::Jet => [
                to_u8(1.5 - (4.0 * v - 3.0).abs()),
                to_u8(1.5 - (4.0 * v - 2.0).abs()),
                to_u8(1.5 - (4.0 * v - 1.0).abs()),
            ],
            Colormap::Gray => [to_u8(v); 3],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RenderConfig {
    pub body_color: [u8; 3],
    pub head_color: [u8; 3],
    pub line_width: u32,
    pub heatmap_alpha: f64,
    pub colormap: Colormap,
    /// Pixels per font dot; shrunk automatically when the text won't fit.
    pub stamp_scale: u32,
    pub stamp_color: [u8; 3],
    pub stamp_background: [u8; 3],
    /// Gap between the stamp and the image's left and bottom edges.
    pub stamp_margin: u32,
}

impl Default for RenderConfig {
    fn default() -> Self {
        RenderConfig {
            body_color: [0, 255, 0],
            head_color: [255, 0, 255],
            line_width: 2,
            heatmap_alpha: 0.5,
            colormap: Colormap::Jet,
            stamp_scale: 2,
            stamp_color: [255, 255, 255],
            stamp_background: [0, 0, 0],
            stamp_margin: 4,
        }
    }
}

impl RenderConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.heatmap_alpha) {
            return Err(Error::InvalidParameter(format!(
                "heatmap_alpha = {} outside [0, 1]",
                self.heatmap_alpha
            )));
        }
        if self.line_width == 0 || self.stamp_scale == 0 {
            return Err(Error::InvalidParameter(
                "line_width and stamp_scale must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

fn check_image(img: &RgbImage) -> Result<()> {
    if img.width() == 0 || img.height() == 0 {
        return Err(Error::EmptyImage);
    }
    Ok(())
}

/// Pixel rectangle `[x0, x1] x [y0, y1]` (inclusive) covered by a box
/// clipped to the image.
pub fn box_pixels(d: &Detection, width: u32, height: u32) -> Option<(u32, u32, u32, u32)> {
    let b = d.bbox.clip(f64::from(width), f64::from(height))?;
    let x0 = b.x_min().floor() as u32;
    let y0 = b.y_min().floor() as u32;
    let x1 = (b.x_max().ceil() as u32)
        .saturating_sub(1)
        .max(x0)
        .min(width - 1);
    let y1 = (b.y_max().ceil() as u32)
        .saturating_sub(1)
        .max(y0)
        .min(height - 1);
    Some((x0, y0, x1, y1))
}

/// Whether pixel `(x, y)` lies on the outline of `rect` drawn `lw` wide,
/// inward.
pub fn on_outline((x0, y0, x1, y1): (u32, u32, u32, u32), lw: u32, x: u32, y: u32) -> bool {
    let inside = x >= x0 && x <= x1 && y >= y0 && y <= y1;
    inside && (x < x0 + lw || x + lw > x1 || y < y0 + lw || y + lw > y1)
}

/// Draws box outlines, clipped to the image.
pub fn render_boxes(img: &RgbImage, dets: &[Detection], cfg: &RenderConfig) -> Result<RgbImage> {
    check_image(img)?;
    cfg.validate()?;
    let mut out = img.clone();
    let (w, h) = img.dimensions();
    for d in dets {
        let Some(rect) = box_pixels(d, w, h) else {
            continue;
        };
        let color = Rgb(match d.kind {
            DetectionKind::Body => cfg.body_color,
            DetectionKind::Head => cfg.head_color,
        });
        let (x0, y0, x1, y1) = rect;
        for y in y0..=y1 {
            for x in x0..=x1 {
                if on_outline(rect, cfg.line_width, x, y) {
                    out.put_pixel(x, y, color);
                }
            }
        }
    }
    Ok(out)
}

/// Bilinear sample of `m` at continuous cell coordinates, edges clamped.
fn bilinear(m: &DensityMap, r: f64, c: f64) -> f64 {
    let r = r.clamp(0.0, (m.height() - 1) as f64);
    let c = c.clamp(0.0, (m.width() - 1) as f64);
    let (r0, c0) = (r.floor() as usize, c.floor() as usize);
    let (r1, c1) = ((r0 + 1).min(m.height() - 1), (c0 + 1).min(m.width() - 1));
    let (fr, fc) = (r - r0 as f64, c - c0 as f64);
    let top = m.get(r0, c0) * (1.0 - fc) + m.get(r0, c1) * fc;
    let bottom = m.get(r1, c0) * (1.0 - fc) + m.get(r1, c1) * fc;
    top * (1.0 - fr) + bottom * fr
}

/// Overlays a density map: bilinear upscale to the image, divide by the
/// map max, colormap, alpha-blend. A zero map leaves the image unchanged.
pub fn render_heatmap(img: &RgbImage, m: &DensityMap, cfg: &RenderConfig) -> Result<RgbImage> {
    check_image(img)?;
    cfg.validate()?;
    let max = m.max();
    if !(max > 0.0) || cfg.heatmap_alpha == 0.0 {
        return Ok(img.clone());
    }
    let (w, h) = img.dimensions();
    let sy = m.height() as f64 / f64::from(h);
    let sx = m.width() as f64 / f64::from(w);
    let a = cfg.heatmap_alpha;
    let mut out = img.clone();
    for (x, y, px) in out.enumerate_pixels_mut() {
        let v = bilinear(
            m,
            (f64::from(y) + 0.5) * sy - 0.5,
            (f64::from(x) + 0.5) * sx - 0.5,
        );
        let color = cfg.colormap.color((v / max).max(0.0));
        for c in 0..3 {
            let blended = (1.0 - a) * f64::from(px.0[c]) + a * f64::from(color[c]);
            px.0[c] = blended.round().clamp(0.0, 255.0) as u8;
        }
    }
    Ok(out)
}

const GLYPH_W: u32 = 5;
const GLYPH_H: u32 = 7;

/// 5x7 digit bitmaps, one row per byte, most significant of 5 bits on the
/// left.
const DIGITS: [[u8; 7]; 10] = [
    [
        0b01110, 0b10001, 0b10011, 0b10101, 0b11001, 0b10001, 0b01110,
    ],
    [
        0b00100, 0b01100, 0b00100, 0b00100, 0b00100, 0b00100, 0b01110,
    ],
    [
        0b01110, 0b10001, 0b00001, 0b00010, 0b00100, 0b01000, 0b11111,
    ],
    [
        0b11111, 0b00010, 0b00100, 0b00010, 0b00001, 0b10001, 0b01110,
    ],
    [
        0b00010, 0b00110, 0b01010, 0b10010, 0b11111, 0b00010, 0b00010,
    ],
    [
        0b11111, 0b10000, 0b11110, 0b00001, 0b00001, 0b10001, 0b01110,
    ],
    [
        0b00110, 0b01000, 0b10000, 0b11110, 0b10001, 0b10001, 0b01110,
    ],
    [
        0b11111, 0b00001, 0b00010, 0b00100, 0b01000, 0b01000, 0b01000,
    ],
    [
        0b01110, 0b10001, 0b10001, 0b01110, 0b10001, 0b10001, 0b01110,
    ],
    [
        0b01110, 0b10001, 0b10001, 0b01111, 0b00001, 0b00010, 0b01100,
    ],
];

/// Whether dot `(col, row)` of `digit`'s glyph is lit.
pub fn glyph_dot(digit: u8, col: u32, row: u32) -> bool {
    DIGITS[digit as usize][row as usize] >> (GLYPH_W - 1 - col) & 1 == 1
}

/// Where and how large the count stamp is drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StampLayout {
    pub scale: u32,
    /// Top-left of the background box.
    pub x: u32,
    pub y: i64,
    pub width: u32,
    pub height: u32,
}

impl StampLayout {
    /// Top-left of glyph `i`'s first dot.
    pub fn glyph_origin(&self, i: usize) -> (i64, i64) {
        let s = i64::from(self.scale);
        let x = i64::from(self.x) + s + i as i64 * (i64::from(GLYPH_W) + 1) * s;
        (x, self.y + s)
    }
}

/// Bottom-left layout; the scale shrinks until the text fits the width.
pub fn stamp_layout(width: u32, height: u32, digits: usize, cfg: &RenderConfig) -> StampLayout {
    let n = digits as u32;
    let size = |s: u32| ((n * GLYPH_W + (n - 1) + 2) * s, (GLYPH_H + 2) * s);
    let mut scale = cfg.stamp_scale.max(1);
    while scale > 1 && size(scale).0 + 2 * cfg.stamp_margin > width {
        scale -= 1;
    }
    let (w, h) = size(scale);
    StampLayout {
        scale,
        x: cfg.stamp_margin,
        y: i64::from(height) - i64::from(cfg.stamp_margin) - i64::from(h),
        width: w,
        height: h,
    }
}

/// Draws `n` in the bottom-left corner on an opaque background.
pub fn stamp_count(img: &RgbImage, n: u64, cfg: &RenderConfig) -> Result<RgbImage> {
    check_image(img)?;
    cfg.validate()?;
    let text = n.to_string();
    let (w, h) = img.dimensions();
    let layout = stamp_layout(w, h, text.len(), cfg);
    let mut out = img.clone();
    let mut put = |x: i64, y: i64, c: [u8; 3]| {
        if x >= 0 && y >= 0 && x < i64::from(w) && y < i64::from(h) {
            out.put_pixel(x as u32, y as u32, Rgb(c));
        }
    };
    for dy in 0..i64::from(layout.height) {
        for dx in 0..i64::from(layout.width) {
            put(
                i64::from(layout.x) + dx,
                layout.y + dy,
                cfg.stamp_background,
            );
        }
    }
    let s = i64::from(layout.scale);
    for (i, ch) in text.bytes().enumerate() {
        let digit = ch - b'0';
        let (gx, gy) = layout.glyph_origin(i);
        for row in 0..GLYPH_H {
            for col in 0..GLYPH_W {
                if !glyph_dot(digit, col, row) {
                    continue;
                }
                for py in 0..s {
                    for px in 0..s {
                        put(
                            gx + i64::from(col) * s + px,
                            gy + i64::from(row) * s + py,
                            cfg.stamp_color,
                        );
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Overlay for a pipeline result: boxes for detector paths, a blurred
/// heatmap for the density path, then the count stamp.
pub fn render_result(
    img: &RgbImage,
    result: &FrameResult,
    cfg: &RenderConfig,
    blur: &BlurConfig,
) -> Result<RgbImage> {
    let overlaid = match &result.artifacts {
        Some(Artifacts::Detections(d)) => render_boxes(img, d, cfg)?,
        Some(Artifacts::Density(m)) => render_heatmap(img, &gaussian_blur_5x5(m, blur)?, cfg)?,
        None => img.clone(),
    };
    stamp_count(&overlaid, result.count, cfg)
}

pub fn encode_png(img: &RgbImage) -> Result<Vec<u8>> {
    let mut buf = Cursor::new(Vec::new());
    img.write_to(&mut buf, ImageFormat::Png)?;
    Ok(buf.into_inner())
}

pub fn save_png(img: &RgbImage, path: &Path) -> Result<()> {
    std::fs::write(path, encode_png(img)?).map_err(|e| Error::io(path, e))
}
