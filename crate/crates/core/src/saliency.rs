//! Visual saliency maps and the saliency-weighted pseudo fusion target.
//!
//! Saliency of a pixel is the histogram-weighted sum of intensity distances
//! to every quantized gray level, max-normalized over the image. Two source
//! saliency maps are ratio-normalized into weight maps `m1 + m2 = 1`, and the
//! pseudo fused image is the pointwise convex combination
//! `u_m = m1 * x + m2 * y`, which serves as the critic's real sample.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_BINS: usize = 256;

/// Per-pixel saliency in `[0, 1]`, same shape as the source image.
#[derive(Debug, Clone)]
pub struct SaliencyMap {
    values: Tensor,
}

impl SaliencyMap {
    pub fn values(&self) -> &Tensor {
        &self.values
    }

    /// Wrap precomputed saliency values (used by tests and callers that
    /// derive weights from a source other than `vsm`).
    pub fn from_values(values: Tensor) -> Self {
        SaliencyMap { values }
    }
}

/// Saliency-weighted pseudo fused image with its weight maps.
#[derive(Debug, Clone)]
pub struct PseudoFusion {
    pub u_m: Tensor,
    pub m1: Tensor,
    pub m2: Tensor,
}

fn check_image(img: &Tensor, context: &'static str) -> Result<()> {
    if img.numel() == 0 {
        return Err(Error::Usage(alloc::format!("{context}: empty image")));
    }
    if img.data().iter().any(|&v| !(0.0..=1.0).contains(&v)) {
        return Err(Error::Usage(alloc::format!(
            "{context}: image values must lie in [0, 1]"
        )));
    }
    Ok(())
}

fn quantize(v: f64, bins: usize) -> usize {
    let level = libm::floor(v * (bins - 1) as f64 + 0.5) as usize;
    level.min(bins - 1)
}

/// Histogram-contrast visual saliency map.
///
/// `S(p) = sum_j hist(j) * |level(p) - j|` over `bins` quantized levels,
/// then normalized by the maximum. A constant image has no contrast; it
/// falls back to 0.5 everywhere.
pub fn vsm(img: &Tensor, bins: usize) -> Result<SaliencyMap> {
    check_image(img, "vsm")?;
    if bins < 2 {
        return Err(Error::Usage(alloc::format!("vsm: bins must be >= 2, got {bins}")));
    }
    let levels: Vec<usize> = img.data().iter().map(|&v| quantize(v, bins)).collect();
    let mut hist = vec![0.0f64; bins];
    for &l in &levels {
        hist[l] += 1.0;
    }
    // Saliency per level, then broadcast to pixels.
    let mut per_level = vec![0.0f64; bins];
    for (l, s) in per_level.iter_mut().enumerate() {
        let mut acc = 0.0;
        for (j, &h) in hist.iter().enumerate() {
            if h > 0.0 {
                acc += h * (l as f64 - j as f64).abs();
            }
        }
        *s = acc;
    }
    let raw: Vec<f64> = levels.iter().map(|&l| per_level[l]).collect();
    let mx = raw.iter().cloned().fold(0.0f64, f64::max);
    let values = if mx > 0.0 {
        raw.iter().map(|&v| v / mx).collect()
    } else {
        vec![0.5; raw.len()]
    };
    Ok(SaliencyMap {
        values: Tensor::new(img.shape(), values)?,
    })
}

/// Weight maps and pseudo fusion from precomputed saliency maps.
/// Where both saliencies vanish the weights fall back to one half each.
pub fn pseudo_from_saliency(
    x: &Tensor,
    y: &Tensor,
    sx: &SaliencyMap,
    sy: &SaliencyMap,
) -> Result<PseudoFusion> {
    if x.shape() != y.shape() {
        return Err(Error::Usage(alloc::format!(
            "pseudo_fusion: shapes do not conform: {:?} vs {:?}",
            x.shape(),
            y.shape()
        )));
    }
    let n = x.numel();
    let mut m1 = vec![0.0; n];
    let mut m2 = vec![0.0; n];
    let mut um = vec![0.0; n];
    let (sxd, syd) = (sx.values.data(), sy.values.data());
    for i in 0..n {
        let sum = sxd[i] + syd[i];
        let w1 = if sum > 0.0 { sxd[i] / sum } else { 0.5 };
        let w2 = 1.0 - w1;
        m1[i] = w1;
        m2[i] = w2;
        um[i] = w1 * x.data()[i] + w2 * y.data()[i];
    }
    Ok(PseudoFusion {
        u_m: Tensor::new(x.shape(), um)?,
        m1: Tensor::new(x.shape(), m1)?,
        m2: Tensor::new(x.shape(), m2)?,
    })
}

/// Pseudo fused target `u_m = m1*x + m2*y` with weights from VSM saliency.
pub fn pseudo_fusion(x: &Tensor, y: &Tensor) -> Result<PseudoFusion> {
    pseudo_fusion_with_bins(x, y, DEFAULT_BINS)
}

pub fn pseudo_fusion_with_bins(x: &Tensor, y: &Tensor, bins: usize) -> Result<PseudoFusion> {
    check_image(x, "pseudo_fusion")?;
    check_image(y, "pseudo_fusion")?;
    let sx = vsm(x, bins)?;
    let sy = vsm(y, bins)?;
    pseudo_from_saliency(x, y, &sx, &sy)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn image(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    /// Per-pixel recomputation straight from the definition, independent of
    /// the per-level table used by `vsm`.
    fn vsm_oracle(img: &Tensor, bins: usize) -> Vec<f64> {
        let levels: Vec<usize> = img.data().iter().map(|&v| quantize(v, bins)).collect();
        let mut hist = vec![0.0f64; bins];
        for &l in &levels {
            hist[l] += 1.0;
        }
        let raw: Vec<f64> = levels
            .iter()
            .map(|&l| {
                hist.iter()
                    .enumerate()
                    .map(|(j, &h)| h * (l as f64 - j as f64).abs())
                    .sum::<f64>()
            })
            .collect();
        let mx = raw.iter().cloned().fold(0.0f64, f64::max);
        if mx > 0.0 {
            raw.iter().map(|&v| v / mx).collect()
        } else {
            vec![0.5; raw.len()]
        }
    }

    #[test]
    fn worked_two_by_two_example() {
        // levels {0, 255}: S(0) = 1*255, S(255) = 3*255; normalized by 765.
        let img = image(&[2, 2], &[0.0, 0.0, 0.0, 1.0]);
        let s = vsm(&img, 256).unwrap();
        let third = 255.0 / 765.0;
        let expected = [third, third, third, 1.0];
        for (got, want) in s.values().data().iter().zip(expected) {
            assert!((got - want).abs() < 1e-15, "{got} vs {want}");
        }
        assert_eq!(s.values().data(), vsm_oracle(&img, 256).as_slice());
    }

    #[test]
    fn constant_image_falls_back_to_half() {
        let img = Tensor::full(&[4, 4], 0.7);
        let s = vsm(&img, 256).unwrap();
        assert!(s.values().data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn photometric_negative_has_identical_saliency() {
        // A checker of 0s and 1s has a symmetric histogram, so the negative
        // image maps levels 0 <-> 255 without changing any distance sum.
        let data: Vec<f64> = (0..16).map(|i| ((i % 2) ^ (i / 4 % 2)) as f64).collect();
        let img = image(&[4, 4], &data);
        let neg_data: Vec<f64> = data.iter().map(|v| 1.0 - v).collect();
        let neg = image(&[4, 4], &neg_data);
        let s = vsm(&img, 256).unwrap();
        let sn = vsm(&neg, 256).unwrap();
        assert_eq!(s.values().data(), sn.values().data());
        assert_eq!(s.values().data(), vsm_oracle(&img, 256).as_slice());
    }

    #[test]
    fn vsm_matches_oracle_on_random_image() {
        let mut rng = crate::rng::SeedStream::new(31);
        let data: Vec<f64> = (0..64).map(|_| rng.uniform()).collect();
        let img = image(&[8, 8], &data);
        let s = vsm(&img, 256).unwrap();
        assert_eq!(s.values().data(), vsm_oracle(&img, 256).as_slice());
    }

    #[test]
    fn empty_image_is_usage_error() {
        let img = Tensor::zeros(&[1, 0]);
        assert!(matches!(vsm(&img, 256), Err(Error::Usage(_))));
    }

    #[test]
    fn pointwise_weighting_example() {
        let x = image(&[1], &[0.8]);
        let y = image(&[1], &[0.4]);
        let sx = SaliencyMap::from_values(image(&[1], &[0.6]));
        let sy = SaliencyMap::from_values(image(&[1], &[0.2]));
        let pf = pseudo_from_saliency(&x, &y, &sx, &sy).unwrap();
        assert!((pf.m1.data()[0] - 0.75).abs() < 1e-15);
        assert!((pf.u_m.data()[0] - 0.7).abs() < 1e-15);
    }

    #[test]
    fn equal_sources_fuse_to_themselves() {
        let mut rng = crate::rng::SeedStream::new(3);
        let data: Vec<f64> = (0..36).map(|_| rng.uniform()).collect();
        let x = image(&[6, 6], &data);
        let pf = pseudo_fusion(&x, &x).unwrap();
        for (u, v) in pf.u_m.data().iter().zip(&data) {
            assert!((u - v).abs() < 1e-15);
        }
    }

    #[test]
    fn one_sided_saliency_selects_that_source() {
        let x = image(&[2], &[0.9, 0.1]);
        let y = image(&[2], &[0.3, 0.6]);
        let sx = SaliencyMap::from_values(image(&[2], &[0.8, 0.4]));
        let sy = SaliencyMap::from_values(image(&[2], &[0.0, 0.0]));
        let pf = pseudo_from_saliency(&x, &y, &sx, &sy).unwrap();
        assert_eq!(pf.u_m.data(), x.data());
    }

    #[test]
    fn weights_sum_to_one_and_fusion_is_convex() {
        let mut rng = crate::rng::SeedStream::new(17);
        let xd: Vec<f64> = (0..256).map(|_| rng.uniform()).collect();
        let yd: Vec<f64> = (0..256).map(|_| rng.uniform()).collect();
        let x = image(&[16, 16], &xd);
        let y = image(&[16, 16], &yd);
        let pf = pseudo_fusion(&x, &y).unwrap();
        for i in 0..256 {
            assert!((pf.m1.data()[i] + pf.m2.data()[i] - 1.0).abs() < 1e-12);
            let (lo, hi) = (xd[i].min(yd[i]), xd[i].max(yd[i]));
            assert!(pf.u_m.data()[i] >= lo - 1e-12 && pf.u_m.data()[i] <= hi + 1e-12);
        }
        // Fallback pixels also satisfy the weight invariant.
        let flat = Tensor::full(&[4, 4], 0.3);
        let pf = pseudo_fusion(&flat, &flat).unwrap();
        for i in 0..16 {
            assert!((pf.m1.data()[i] + pf.m2.data()[i] - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn doubling_bins_barely_moves_smooth_images() {
        // Smooth ramps: quantization at 256 vs 512 bins shifts u_m by < 0.01.
        let n = 32;
        let xd: Vec<f64> = (0..n * n).map(|i| (i % n) as f64 / (n - 1) as f64).collect();
        let yd: Vec<f64> = (0..n * n).map(|i| (i / n) as f64 / (n - 1) as f64).collect();
        let x = image(&[n, n], &xd);
        let y = image(&[n, n], &yd);
        let a = pseudo_fusion_with_bins(&x, &y, 256).unwrap();
        let b = pseudo_fusion_with_bins(&x, &y, 512).unwrap();
        for (ua, ub) in a.u_m.data().iter().zip(b.u_m.data()) {
            assert!((ua - ub).abs() < 0.01);
        }
    }

    #[test]
    fn shape_mismatch_is_usage_error() {
        let x = Tensor::zeros(&[2, 2]);
        let y = Tensor::zeros(&[2, 3]);
        assert!(matches!(pseudo_fusion(&x, &y), Err(Error::Usage(_))));
    }
}
