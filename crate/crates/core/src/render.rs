//! 8-bit grayscale rendering of tensors.

use std::fs;
use std::path::Path;

use crate::error::{dim_err, param_err, Result};
use crate::tensor::Tensor;

/// Grayscale image, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Gray8 {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

/// Lays the channels of batch entry 0 side by side and maps `[lo, hi]`
/// linearly onto `[0, 255]`, clamping outside values.
pub fn to_gray8(t: &Tensor, lo: f32, hi: f32) -> Result<Gray8> {
    if !(hi > lo) {
        return Err(param_err!("empty value range [{lo}, {hi}]"));
    }
    if t.batch() == 0 {
        return Err(dim_err!("cannot render an empty batch"));
    }
    let [_, c, h, w] = t.shape();
    let width = c * w;
    let mut pixels = vec![0u8; width * h];
    for ch in 0..c {
        let plane = t.plane(0, ch);
        for y in 0..h {
            for x in 0..w {
                let v = (plane[y * w + x] - lo) / (hi - lo);
                let v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
                pixels[y * width + ch * w + x] = (v * 255.0).round() as u8;
            }
        }
    }
    Ok(Gray8 { width, height: h, pixels })
}

/// Symmetric range from the largest magnitude, never narrower than 1e-12.
pub fn to_gray8_auto(t: &Tensor) -> Result<Gray8> {
    let m = t.max_abs().max(1e-12);
    to_gray8(t, -m, m)
}

/// Binary PGM (P5).
pub fn write_pgm(img: &Gray8, path: impl AsRef<Path>) -> Result<()> {
    let mut bytes = format!("P5\n{} {}\n255\n", img.width, img.height).into_bytes();
    bytes.extend_from_slice(&img.pixels);
    fs::write(path, bytes)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn maps_range_and_clamps() {
        let t = Tensor::new([1, 2, 1, 2], vec![-1.0, 1.0, 0.0, 5.0]).unwrap();
        let g = to_gray8(&t, -1.0, 1.0).unwrap();
        assert_eq!((g.width, g.height), (4, 1));
        assert_eq!(g.pixels, vec![0, 255, 128, 255]);
        assert!(to_gray8(&t, 1.0, 1.0).is_err());
    }

    #[test]
    fn pgm_header() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.pgm");
        write_pgm(&Gray8 { width: 2, height: 1, pixels: vec![7, 9] }, &p).unwrap();
        assert_eq!(fs::read(&p).unwrap(), b"P5\n2 1\n255\n\x07\x09");
    }
}
