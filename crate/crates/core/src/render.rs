//! Output artifacts: heatmap PNGs, colour overlays, curve CSVs and SVG plots.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::dataset::GrayImage;
use crate::eigencam::Heatmap;
use crate::{Error, Result};

/// Colormap stops (viridis), evenly spaced over `[0, 1]`, interpolated linearly.
pub const COLORMAP: [[u8; 3]; 9] = [
    [68, 1, 84],
    [70, 50, 126],
    [59, 82, 139],
    [44, 114, 142],
    [33, 145, 140],
    [40, 174, 128],
    [94, 201, 98],
    [173, 220, 48],
    [253, 231, 37],
];

pub fn colormap(v: f32) -> [u8; 3] {
    let x = v.clamp(0.0, 1.0) * (COLORMAP.len() - 1) as f32;
    let i = (x.floor() as usize).min(COLORMAP.len() - 2);
    let t = x - i as f32;
    std::array::from_fn(|c| {
        let (a, b) = (COLORMAP[i][c] as f32, COLORMAP[i + 1][c] as f32);
        (a + (b - a) * t).round() as u8
    })
}

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn img_err(path: &Path) -> impl FnOnce(image::ImageError) -> Error + '_ {
    move |source| Error::Image { path: path.to_path_buf(), source }
}

pub fn save_heatmap_png(path: &Path, heat: &Heatmap) -> Result<()> {
    let bytes = heat.values.iter().map(|&v| to_u8(v)).collect();
    let img = image::GrayImage::from_raw(heat.width as u32, heat.height as u32, bytes)
        .ok_or_else(|| Error::shape("heatmap png", "buffer size mismatch"))?;
    img.save_with_format(path, image::ImageFormat::Png).map_err(img_err(path))
}

/// Colour-mapped heatmap blended over the grayscale image with weight `alpha`.
pub fn overlay(image: &GrayImage, heat: &Heatmap, alpha: f32) -> Result<image::RgbImage> {
    if (image.width, image.height) != (heat.width, heat.height) {
        return Err(Error::shape("overlay", "image and heatmap differ in size"));
    }
    let mut out = image::RgbImage::new(image.width as u32, image.height as u32);
    for (i, px) in out.pixels_mut().enumerate() {
        let g = image.data[i].clamp(0.0, 1.0) * 255.0;
        let c = colormap(heat.values[i]);
        px.0 = std::array::from_fn(|k| ((1.0 - alpha) * g + alpha * c[k] as f32).round() as u8);
    }
    Ok(out)
}

pub fn save_overlay_png(path: &Path, image: &GrayImage, heat: &Heatmap) -> Result<()> {
    overlay(image, heat, 0.5)?.save_with_format(path, image::ImageFormat::Png).map_err(img_err(path))
}

pub fn curve_csv(header: (&str, &str), points: &[(f64, f64)]) -> String {
    let mut s = format!("{},{}\n", header.0, header.1);
    for (x, y) in points {
        let _ = writeln!(s, "{x:.6},{y:.6}");
    }
    s
}

/// Line plot on fixed `[0, 1]²` axes.
pub fn curve_svg(title: &str, axes: (&str, &str), points: &[(f64, f64)], diagonal: bool) -> String {
    let (w, h, m) = (320.0, 320.0, 40.0);
    let px = |x: f64| m + x * (w - 2.0 * m);
    let py = |y: f64| h - m - y * (h - 2.0 * m);
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#);
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<rect x="{m}" y="{m}" width="{}" height="{}" fill="none" stroke="black"/>"#,
        w - 2.0 * m,
        h - 2.0 * m
    );
    for t in [0.0, 0.5, 1.0] {
        let _ = writeln!(s, r#"<text x="{}" y="{}" font-size="10" text-anchor="middle">{t}</text>"#, px(t), h - m + 14.0);
        let _ = writeln!(s, r#"<text x="{}" y="{}" font-size="10" text-anchor="end">{t}</text>"#, m - 4.0, py(t) + 3.0);
    }
    if diagonal {
        let _ = writeln!(
            s,
            r#"<line x1="{}" y1="{}" x2="{}" y2="{}" stroke="gray" stroke-dasharray="4 3"/>"#,
            px(0.0),
            py(0.0),
            px(1.0),
            py(1.0)
        );
    }
    let pts: Vec<String> = points.iter().map(|&(x, y)| format!("{:.2},{:.2}", px(x), py(y))).collect();
    let _ = writeln!(s, r#"<polyline fill="none" stroke="steelblue" stroke-width="2" points="{}"/>"#, pts.join(" "));
    let _ = writeln!(s, r#"<text x="{}" y="20" font-size="13" text-anchor="middle">{title}</text>"#, w / 2.0);
    let _ = writeln!(s, r#"<text x="{}" y="{}" font-size="11" text-anchor="middle">{}</text>"#, w / 2.0, h - 8.0, axes.0);
    let _ = writeln!(
        s,
        r#"<text x="12" y="{}" font-size="11" text-anchor="middle" transform="rotate(-90 12 {})">{}</text>"#,
        h / 2.0,
        h / 2.0,
        axes.1
    );
    s.push_str("</svg>\n");
    s
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}
