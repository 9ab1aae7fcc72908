//! Recovery quality metrics: PSNR and SSIM, whole-frame and masked-region.
//!
//! LPIPS/VFID-style perceptual scores need pretrained networks; they plug
//! in through [`ExternalScorer`] and are reported when a scorer is
//! registered, never computed here.

use ndarray::{Array2, Array3};

use crate::error::{Error, Result};
use crate::videodata::{MaskSequence, VideoSequence};

/// PSNR cap applied when MSE is below 1e-10 (identical inputs).
pub const PSNR_CAP_DB: f64 = 100.0;

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

/// Quality of one recovered sequence against its reference.
#[derive(Clone, Debug, serde::Serialize)]
pub struct QualityReport {
    pub psnr_db: f64,
    /// `None` when the evaluation region was too small for the SSIM window.
    pub ssim: Option<f64>,
    pub per_frame: Vec<(f64, Option<f64>)>,
    /// Set when a masked evaluation found no masked pixels.
    pub empty_region: bool,
}

/// Peak signal-to-noise ratio in dB over `[H, W, 3]` frames.
pub fn psnr(a: &Array3<f64>, b: &Array3<f64>, peak: f64) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch(format!(
            "psnr: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let n = a.len() as f64;
    let mse: f64 = a
        .iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / n;
    Ok(psnr_from_mse(mse, peak))
}

fn psnr_from_mse(mse: f64, peak: f64) -> f64 {
    if mse < 1e-10 {
        PSNR_CAP_DB
    } else {
        10.0 * (peak * peak / mse).log10()
    }
}

/// Mean local SSIM with a Gaussian window over valid positions, averaged
/// over channels.
pub fn ssim(a: &Array3<f64>, b: &Array3<f64>) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch(format!(
            "ssim: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let (h, w) = (a.shape()[0], a.shape()[1]);
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::InvalidArgument(format!(
            "ssim: image {h}x{w} smaller than the {SSIM_WINDOW}-pixel window"
        )));
    }
    let kernel = gaussian_kernel();
    let c1 = (SSIM_K1 * 1.0f64).powi(2);
    let c2 = (SSIM_K2 * 1.0f64).powi(2);
    let mut total = 0.0;
    for ch in 0..a.shape()[2] {
        let pa = plane(a, ch);
        let pb = plane(b, ch);
        total += ssim_plane(&pa, &pb, &kernel, c1, c2);
    }
    Ok(total / a.shape()[2] as f64)
}

fn plane(a: &Array3<f64>, ch: usize) -> Array2<f64> {
    a.index_axis(ndarray::Axis(2), ch).to_owned()
}

fn gaussian_kernel() -> Array2<f64> {
    let half = (SSIM_WINDOW / 2) as isize;
    let mut k = Array2::<f64>::zeros((SSIM_WINDOW, SSIM_WINDOW));
    let mut sum = 0.0;
    for y in 0..SSIM_WINDOW {
        for x in 0..SSIM_WINDOW {
            let dy = y as isize - half;
            let dx = x as isize - half;
            let v = (-((dy * dy + dx * dx) as f64) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
            k[[y, x]] = v;
            sum += v;
        }
    }
    k.mapv_inplace(|v| v / sum);
    k
}

fn ssim_plane(a: &Array2<f64>, b: &Array2<f64>, kernel: &Array2<f64>, c1: f64, c2: f64) -> f64 {
    let (h, w) = (a.shape()[0], a.shape()[1]);
    let oh = h - SSIM_WINDOW + 1;
    let ow = w - SSIM_WINDOW + 1;
    let mut acc = 0.0;
    for oy in 0..oh {
        for ox in 0..ow {
            let mut mu_a = 0.0;
            let mut mu_b = 0.0;
            let mut aa = 0.0;
            let mut bb = 0.0;
            let mut ab = 0.0;
            for ky in 0..SSIM_WINDOW {
                for kx in 0..SSIM_WINDOW {
                    let wgt = kernel[[ky, kx]];
                    let va = a[[oy + ky, ox + kx]];
                    let vb = b[[oy + ky, ox + kx]];
                    mu_a += wgt * va;
                    mu_b += wgt * vb;
                    aa += wgt * va * va;
                    bb += wgt * vb * vb;
                    ab += wgt * va * vb;
                }
            }
            let var_a = aa - mu_a * mu_a;
            let var_b = bb - mu_b * mu_b;
            let cov = ab - mu_a * mu_b;
            let s = ((2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2))
                / ((mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2));
            acc += s;
        }
    }
    acc / (oh * ow) as f64
}

/// Sequence-level report: mean PSNR/SSIM over frames plus per-frame pairs.
pub fn sequence_quality(a: &VideoSequence, b: &VideoSequence) -> Result<QualityReport> {
    if a.frames.shape() != b.frames.shape() {
        return Err(Error::ShapeMismatch(format!(
            "sequence_quality: {:?} vs {:?}",
            a.frames.shape(),
            b.frames.shape()
        )));
    }
    let mut per_frame = Vec::with_capacity(a.len());
    for fi in 0..a.len() {
        let fa = a.frame(fi);
        let fb = b.frame(fi);
        let p = psnr(&fa, &fb, 1.0)?;
        let s = ssim(&fa, &fb).ok();
        per_frame.push((p, s));
    }
    Ok(aggregate(per_frame, false))
}

fn aggregate(per_frame: Vec<(f64, Option<f64>)>, empty: bool) -> QualityReport {
    let n = per_frame.len() as f64;
    let psnr_db = per_frame.iter().map(|(p, _)| p).sum::<f64>() / n.max(1.0);
    let ssims: Vec<f64> = per_frame.iter().filter_map(|(_, s)| *s).collect();
    let ssim = if ssims.is_empty() {
        None
    } else {
        Some(ssims.iter().sum::<f64>() / ssims.len() as f64)
    };
    QualityReport {
        psnr_db,
        ssim,
        per_frame,
        empty_region: empty,
    }
}

/// Quality restricted to `mask == 1` pixels: PSNR over masked pixels only,
/// SSIM over the masked bounding box of each frame. An empty mask yields a
/// flagged-empty report rather than NaNs.
pub fn masked_region_metrics(
    a: &VideoSequence,
    b: &VideoSequence,
    mask: &MaskSequence,
) -> Result<QualityReport> {
    if a.frames.shape() != b.frames.shape() {
        return Err(Error::ShapeMismatch(format!(
            "masked_region_metrics: {:?} vs {:?}",
            a.frames.shape(),
            b.frames.shape()
        )));
    }
    if !mask.matches(a) {
        return Err(Error::ShapeMismatch(
            "masked_region_metrics: mask does not match frames".into(),
        ));
    }
    let (h, w) = (a.height(), a.width());
    let mut per_frame = Vec::new();
    let mut any = false;
    for fi in 0..a.len() {
        // masked MSE
        let mut se = 0.0;
        let mut count = 0usize;
        let (mut y0, mut y1, mut x0, mut x1) = (h, 0usize, w, 0usize);
        for y in 0..h {
            for x in 0..w {
                if mask.masks[[fi, y, x]] == 1.0 {
                    count += 1;
                    y0 = y0.min(y);
                    y1 = y1.max(y + 1);
                    x0 = x0.min(x);
                    x1 = x1.max(x + 1);
                    for c in 0..3 {
                        let d = a.frames[[fi, y, x, c]] - b.frames[[fi, y, x, c]];
                        se += d * d;
                    }
                }
            }
        }
        if count == 0 {
            continue;
        }
        any = true;
        let mse = se / (count * 3) as f64;
        let p = psnr_from_mse(mse, 1.0);
        // SSIM over the bounding box when it fits the window
        let s = if y1 - y0 >= SSIM_WINDOW && x1 - x0 >= SSIM_WINDOW {
            let crop = |v: &VideoSequence| {
                v.frames
                    .slice(ndarray::s![fi, y0..y1, x0..x1, ..])
                    .to_owned()
            };
            ssim(&crop(a), &crop(b)).ok()
        } else {
            None
        };
        per_frame.push((p, s));
    }
    if !any {
        return Ok(QualityReport {
            psnr_db: f64::NAN,
            ssim: None,
            per_frame: Vec::new(),
            empty_region: true,
        });
    }
    Ok(aggregate(per_frame, false))
}

/// Plug-in point for perceptual scorers backed by external models.
pub trait ExternalScorer {
    fn name(&self) -> &str;
    fn score(&self, recovered: &VideoSequence, reference: &VideoSequence) -> Result<f64>;
}
