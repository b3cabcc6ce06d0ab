//! Structural dissimilarity between two images.
//!
//! SSIM uses 7x7 uniform windows at stride 1 over valid positions, population
//! statistics inside each window and constants `C1 = 0.01^2`, `C2 = 0.03^2`
//! for a unit dynamic range. SSIM is averaged over windows and channels;
//! `DSSIM = (1 - SSIM) / 2`. Images smaller than the window use a window as
//! large as the image.

use crate::error::{DivaError, Result};
use crate::tensor::Tensor;

pub const WINDOW: usize = 7;
const C1: f64 = 0.01 * 0.01;
const C2: f64 = 0.03 * 0.03;

/// Sample flagged when its DSSIM exceeds this.
pub const DEFAULT_THRESHOLD: f64 = 0.01;

fn hwc(t: &Tensor) -> Result<(usize, usize, usize)> {
    match t.shape() {
        [h, w, c] => Ok((*h, *w, *c)),
        [1, h, w, c] => Ok((*h, *w, *c)),
        s => Err(DivaError::InvalidArgument(format!(
            "DSSIM expects an [h, w, c] image, got shape {s:?}"
        ))),
    }
}

/// Mean SSIM over windows and channels.
pub fn ssim(a: &Tensor, b: &Tensor) -> Result<f64> {
    let (h, w, c) = hwc(a)?;
    if hwc(b)? != (h, w, c) {
        return Err(DivaError::ShapeMismatch {
            at: "dssim".into(),
            expected: a.shape().to_vec(),
            got: b.shape().to_vec(),
        });
    }
    if h == 0 || w == 0 || c == 0 {
        return Err(DivaError::InvalidArgument("empty image".into()));
    }
    let (wh, ww) = (WINDOW.min(h), WINDOW.min(w));
    let count = (wh * ww) as f64;
    let (da, db) = (a.data(), b.data());
    let mut total = 0.0;
    let mut windows = 0usize;
    for ch in 0..c {
        for i in 0..=h - wh {
            for j in 0..=w - ww {
                let (mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for di in 0..wh {
                    for dj in 0..ww {
                        let k = ((i + di) * w + (j + dj)) * c + ch;
                        let (x, y) = (da[k] as f64, db[k] as f64);
                        sa += x;
                        sb += y;
                        saa += x * x;
                        sbb += y * y;
                        sab += x * y;
                    }
                }
                let (ma, mb) = (sa / count, sb / count);
                let va = saa / count - ma * ma;
                let vb = sbb / count - mb * mb;
                let cov = sab / count - ma * mb;
                total += ((2.0 * ma * mb + C1) * (2.0 * cov + C2))
                    / ((ma * ma + mb * mb + C1) * (va + vb + C2));
                windows += 1;
            }
        }
    }
    Ok(total / windows as f64)
}

/// `(1 - SSIM) / 2`, clamped to `[0, 1]`.
pub fn dssim(a: &Tensor, b: &Tensor) -> Result<f64> {
    Ok(((1.0 - ssim(a, b)?) / 2.0).clamp(0.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_images_have_zero_dissimilarity() {
        let a = Tensor::from_fn(&[9, 8, 2], |i| ((i * 37) % 11) as f32 / 10.0);
        assert_eq!(dssim(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn black_versus_white() {
        let a = Tensor::zeros(&[8, 8, 1]);
        let b = Tensor::full(&[8, 8, 1], 1.0);
        let expected = (1.0 - C1 / (1.0 + C1)) / 2.0;
        assert!((dssim(&a, &b).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let a = Tensor::zeros(&[8, 8, 1]);
        let b = Tensor::zeros(&[8, 7, 1]);
        assert!(dssim(&a, &b).is_err());
    }
}
