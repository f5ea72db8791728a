use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use rescalekit::render::Gray8;
use rescalekit::Tensor;

use crate::failure::{Context, Failure};

pub fn write_png(img: &Gray8, path: &Path) -> Result<(), Failure> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).at(dir)?;
    }
    let file = File::create(path).at(path)?;
    let mut enc = png::Encoder::new(BufWriter::new(file), img.width as u32, img.height as u32);
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header().at(path)?;
    writer.write_image_data(&img.pixels).at(path)?;
    writer.finish().at(path)
}

/// Impulse-response panels side by side, each scaled to its own peak and
/// centred on a square canvas, separated by one dark column.
pub fn heatmap(panels: &[Tensor]) -> Gray8 {
    let side = panels.iter().map(|p| p.height().max(p.width())).max().unwrap_or(1);
    let width = panels.len() * (side + 1) - 1;
    let mut pixels = vec![0u8; width * side];
    for (i, p) in panels.iter().enumerate() {
        let peak = p.max_abs();
        let (oy, ox) = ((side - p.height()) / 2, i * (side + 1) + (side - p.width()) / 2);
        for y in 0..p.height() {
            for x in 0..p.width() {
                let v = if peak > 0.0 { p.at(0, 0, y, x).abs() / peak } else { 0.0 };
                pixels[(oy + y) * width + ox + x] = (v.sqrt() * 255.0).round() as u8;
            }
        }
    }
    Gray8 { width, height: side, pixels }
}
