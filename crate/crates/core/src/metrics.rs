//! Fusion quality metrics: mutual information, feature mutual information
//! on Sobel gradient maps, and histogram entropy.
//!
//! Histograms bin `[0, 1]` values with an inclusive right edge at 1.0; MI
//! sums use compensated summation so symmetry holds to 1e-12 regardless of
//! iteration order.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::math::{self, KahanSum};
use crate::tensor::Tensor;

pub const DEFAULT_BINS: usize = 256;

/// Per-pair quality report. `mi_total` is the summed two-source fusion MI
/// `I(u; x) + I(u; y)`.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub pair_id: String,
    pub mi_x: f64,
    pub mi_y: f64,
    pub mi_total: f64,
    pub fmi: f64,
    pub entropy_u: f64,
}

fn check_image(img: &Tensor, context: &'static str) -> Result<()> {
    if img.numel() == 0 {
        return Err(Error::Usage(format!("{context}: empty image")));
    }
    Ok(())
}

fn bin_index(v: f64, bins: usize) -> usize {
    let idx = libm::floor(v * bins as f64) as usize;
    idx.min(bins - 1)
}

/// Normalized histogram over `[0, 1]`.
pub fn histogram(img: &Tensor, bins: usize) -> Vec<f64> {
    let mut h = vec![0.0; bins];
    for &v in img.data() {
        h[bin_index(v, bins)] += 1.0;
    }
    let n = img.numel() as f64;
    for p in h.iter_mut() {
        *p /= n;
    }
    h
}

/// Shannon entropy in bits of the binned intensity distribution.
pub fn entropy(img: &Tensor, bins: usize) -> Result<f64> {
    check_image(img, "entropy")?;
    let mut acc = KahanSum::default();
    for &p in &histogram(img, bins) {
        if p > 0.0 {
            acc.add(-p * math::log2(p));
        }
    }
    Ok(acc.value())
}

/// Mutual information `I(a; b)` in bits from the joint intensity histogram.
pub fn mutual_information(a: &Tensor, b: &Tensor, bins: usize) -> Result<f64> {
    check_image(a, "mutual_information")?;
    check_image(b, "mutual_information")?;
    if a.shape() != b.shape() {
        return Err(Error::shape("mutual_information", a.shape(), b.shape()));
    }
    let n = a.numel() as f64;
    let mut joint = vec![0.0f64; bins * bins];
    for (&va, &vb) in a.data().iter().zip(b.data()) {
        joint[bin_index(va, bins) * bins + bin_index(vb, bins)] += 1.0;
    }
    let mut pa = vec![0.0f64; bins];
    let mut pb = vec![0.0f64; bins];
    for i in 0..bins {
        for j in 0..bins {
            let p = joint[i * bins + j] / n;
            pa[i] += p;
            pb[j] += p;
        }
    }
    let mut acc = KahanSum::default();
    for i in 0..bins {
        if pa[i] == 0.0 {
            continue;
        }
        for j in 0..bins {
            let p = joint[i * bins + j] / n;
            if p > 0.0 {
                acc.add(p * math::log2(p / (pa[i] * pb[j])));
            }
        }
    }
    Ok(acc.value())
}

/// Sobel gradient magnitude with replicated borders, min-max normalized to
/// `[0, 1]`. A constant-gradient (flat) map stays all zeros.
pub fn sobel_magnitude(img: &Tensor) -> Result<Tensor> {
    check_image(img, "sobel_magnitude")?;
    let sh = img.shape();
    if sh.len() != 2 {
        return Err(Error::shape("sobel_magnitude", sh, &[0, 0]));
    }
    let (h, w) = (sh[0], sh[1]);
    let at = |r: isize, c: isize| -> f64 {
        let r = r.clamp(0, h as isize - 1) as usize;
        let c = c.clamp(0, w as isize - 1) as usize;
        img.data()[r * w + c]
    };
    let mut mag = vec![0.0; h * w];
    for r in 0..h as isize {
        for c in 0..w as isize {
            let gx = at(r - 1, c + 1) + 2.0 * at(r, c + 1) + at(r + 1, c + 1)
                - at(r - 1, c - 1)
                - 2.0 * at(r, c - 1)
                - at(r + 1, c - 1);
            let gy = at(r + 1, c - 1) + 2.0 * at(r + 1, c) + at(r + 1, c + 1)
                - at(r - 1, c - 1)
                - 2.0 * at(r - 1, c)
                - at(r - 1, c + 1);
            mag[r as usize * w + c as usize] = math::sqrt(gx * gx + gy * gy);
        }
    }
    let mx = mag.iter().cloned().fold(0.0f64, f64::max);
    let mn = mag.iter().cloned().fold(f64::INFINITY, f64::min);
    if mx > mn {
        for v in mag.iter_mut() {
            *v = (*v - mn) / (mx - mn);
        }
    } else {
        mag.fill(0.0);
    }
    Tensor::new(sh, mag)
}

/// Normalized feature MI of one source against the fused gradient map:
/// `2 I(Gu; Gs) / (H(Gu) + H(Gs))`, with the degenerate zero-entropy rule.
fn fmi_term(gu: &Tensor, gs: &Tensor, bins: usize) -> Result<f64> {
    let hu = entropy(gu, bins)?;
    let hs = entropy(gs, bins)?;
    if hu == 0.0 || hs == 0.0 {
        let identical = gu.data() == gs.data();
        return Ok(if identical { 1.0 } else { 0.0 });
    }
    Ok(2.0 * mutual_information(gu, gs, bins)? / (hu + hs))
}

/// Feature mutual information: gradient-magnitude maps of `u`, `x`, `y`,
/// mean of the two normalized per-source terms. Always in `[0, 1]`.
pub fn fmi(u: &Tensor, x: &Tensor, y: &Tensor) -> Result<f64> {
    fmi_with_bins(u, x, y, DEFAULT_BINS)
}

pub fn fmi_with_bins(u: &Tensor, x: &Tensor, y: &Tensor, bins: usize) -> Result<f64> {
    if u.shape() != x.shape() || u.shape() != y.shape() {
        return Err(Error::shape("fmi", u.shape(), x.shape()));
    }
    let gu = sobel_magnitude(u)?;
    let gx = sobel_magnitude(x)?;
    let gy = sobel_magnitude(y)?;
    Ok(0.5 * (fmi_term(&gu, &gx, bins)? + fmi_term(&gu, &gy, bins)?))
}

/// Full quality report for one fused pair.
pub fn report(pair_id: &str, u: &Tensor, x: &Tensor, y: &Tensor) -> Result<MetricReport> {
    let mi_x = mutual_information(u, x, DEFAULT_BINS)?;
    let mi_y = mutual_information(u, y, DEFAULT_BINS)?;
    Ok(MetricReport {
        pair_id: String::from(pair_id),
        mi_x,
        mi_y,
        mi_total: mi_x + mi_y,
        fmi: fmi(u, x, y)?,
        entropy_u: entropy(u, DEFAULT_BINS)?,
    })
}
