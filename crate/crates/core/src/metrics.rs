//! Image-quality and landmark metrics plus the evaluation report.

use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;

pub const PSNR_CAP: f64 = 100.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;
/// Half extent of the landmark template patch.
pub const TEMPLATE_RADIUS: usize = 4;
/// Search radius of the landmark locator, in pixels.
pub const SEARCH_RADIUS: usize = 6;
pub const REPORT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum MetricsError {
    #[error("shape mismatch: {0:?} vs {1:?}")]
    Shape(Vec<usize>, Vec<usize>),
    #[error("image {h}x{w} smaller than the {window}x{window} window")]
    TooSmall { h: usize, w: usize, window: usize },
    #[error("expected a single [C, H, W] image, got {0:?}")]
    NotImage(Vec<usize>),
    #[error("landmark counts differ: {0} vs {1}")]
    Count(usize, usize),
}

type Result<T> = std::result::Result<T, MetricsError>;

fn same_shape(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(MetricsError::Shape(a.shape().to_vec(), b.shape().to_vec()));
    }
    Ok(())
}

/// `(C, H, W)` of an image stored as `[C, H, W]` or `[1, C, H, W]`.
pub fn image_dims(t: &Tensor) -> Result<(usize, usize, usize)> {
    match *t.shape() {
        [c, h, w] | [1, c, h, w] => Ok((c, h, w)),
        _ => Err(MetricsError::NotImage(t.shape().to_vec())),
    }
}

pub fn mse(a: &Tensor, b: &Tensor) -> Result<f64> {
    same_shape(a, b)?;
    let s: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    Ok(s / a.numel() as f64)
}

/// Peak signal-to-noise ratio for unit dynamic range, capped at
/// [`PSNR_CAP`].
pub fn psnr(a: &Tensor, b: &Tensor) -> Result<f64> {
    let m = mse(a, b)?;
    if m == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / m).log10()).min(PSNR_CAP))
}

pub fn l1_distance(a: &Tensor, b: &Tensor) -> Result<f64> {
    same_shape(a, b)?;
    let s: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs())
        .sum();
    Ok(s / a.numel() as f64)
}

/// Channel mean of an image.
pub fn grayscale(t: &Tensor) -> Result<(Vec<f64>, usize, usize)> {
    let (c, h, w) = image_dims(t)?;
    let mut g = vec![0.0; h * w];
    for ch in 0..c {
        for (o, v) in g.iter_mut().zip(&t.data()[ch * h * w..(ch + 1) * h * w]) {
            *o += v;
        }
    }
    g.iter_mut().for_each(|v| *v /= c as f64);
    Ok((g, h, w))
}

/// Normalized 1-D Gaussian taps of the SSIM window.
pub fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut k = [0.0; SSIM_WINDOW];
    let r = (SSIM_WINDOW / 2) as f64;
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - r;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

// valid separable filtering
fn filter_valid(x: &[f64], h: usize, w: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (oh, ow) = (h - n + 1, w - n + 1);
    let mut tmp = vec![0.0; h * ow];
    for y in 0..h {
        for x0 in 0..ow {
            tmp[y * ow + x0] = (0..n).map(|i| k[i] * x[y * w + x0 + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y0 in 0..oh {
        for x0 in 0..ow {
            out[y0 * ow + x0] = (0..n).map(|i| k[i] * tmp[(y0 + i) * ow + x0]).sum();
        }
    }
    out
}

/// Mean local SSIM of the grayscale images over valid window positions.
pub fn ssim(a: &Tensor, b: &Tensor) -> Result<f64> {
    same_shape(a, b)?;
    let (ga, h, w) = grayscale(a)?;
    let (gb, _, _) = grayscale(b)?;
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(MetricsError::TooSmall {
            h,
            w,
            window: SSIM_WINDOW,
        });
    }
    let k = gaussian_window();
    let prod = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| p * q).collect::<Vec<_>>();
    let mu_a = filter_valid(&ga, h, w, &k);
    let mu_b = filter_valid(&gb, h, w, &k);
    let aa = filter_valid(&prod(&ga, &ga), h, w, &k);
    let bb = filter_valid(&prod(&gb, &gb), h, w, &k);
    let ab = filter_valid(&prod(&ga, &gb), h, w, &k);
    let mut total = 0.0;
    for i in 0..mu_a.len() {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = aa[i] - ma * ma;
        let vb = bb[i] - mb * mb;
        let cov = ab[i] - ma * mb;
        total += ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2))
            / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2));
    }
    Ok(total / mu_a.len() as f64)
}

/// Average Euclidean distance between corresponding pixel landmarks.
pub fn akd(pred: &[[f64; 2]], gt: &[[f64; 2]]) -> Result<f64> {
    if pred.len() != gt.len() || pred.is_empty() {
        return Err(MetricsError::Count(pred.len(), gt.len()));
    }
    let s: f64 = pred
        .iter()
        .zip(gt)
        .map(|(p, q)| ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)).sqrt())
        .sum();
    Ok(s / pred.len() as f64)
}

fn patch(g: &[f64], h: usize, w: usize, cx: isize, cy: isize, r: isize) -> Vec<f64> {
    let mut out = Vec::with_capacity(((2 * r + 1) * (2 * r + 1)) as usize);
    for dy in -r..=r {
        for dx in -r..=r {
            let x = (cx + dx).clamp(0, w as isize - 1) as usize;
            let y = (cy + dy).clamp(0, h as isize - 1) as usize;
            out.push(g[y * w + x]);
        }
    }
    out
}

/// Normalized cross-correlation; flat patches correlate as 0 (or 1 with an
/// equally flat partner of the same level).
pub fn ncc(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut num, mut va, mut vb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        num += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    if va < 1e-12 || vb < 1e-12 {
        return if va < 1e-12 && vb < 1e-12 && (ma - mb).abs() < 1e-6 {
            1.0
        } else {
            0.0
        };
    }
    num / (va * vb).sqrt()
}

// vertex offset of the parabola through (−1, l), (0, c), (1, r)
fn parabolic(l: f64, c: f64, r: f64) -> f64 {
    let d = l - 2.0 * c + r;
    if d >= 0.0 {
        return 0.0;
    }
    (0.5 * (l - r) / d).clamp(-0.5, 0.5)
}

// best displacement of `tpl` within `SEARCH_RADIUS` of (cx, cy) in `g`,
// refined by a parabola through the neighboring scores
fn match_offset(tpl: &[f64], g: &[f64], h: usize, w: usize, cx: isize, cy: isize) -> [f64; 2] {
    let r = TEMPLATE_RADIUS as isize;
    let s = SEARCH_RADIUS as isize;
    let side = (2 * s + 1) as usize;
    let mut scores = vec![f64::NEG_INFINITY; side * side];
    let mut best = (0isize, 0isize, f64::NEG_INFINITY);
    for dy in -s..=s {
        for dx in -s..=s {
            let v = ncc(tpl, &patch(g, h, w, cx + dx, cy + dy, r));
            scores[((dy + s) as usize) * side + (dx + s) as usize] = v;
            // ties go to the smallest displacement, then scan order
            let closer = dx * dx + dy * dy < best.0 * best.0 + best.1 * best.1;
            if v > best.2 + 1e-12 || ((v - best.2).abs() <= 1e-12 && closer) {
                best = (dx, dy, v);
            }
        }
    }
    let at = |dx: isize, dy: isize| scores[((dy + s) as usize) * side + (dx + s) as usize];
    let (bx, by, c) = best;
    let ox = if bx.abs() < s {
        parabolic(at(bx - 1, by), c, at(bx + 1, by))
    } else {
        0.0
    };
    let oy = if by.abs() < s {
        parabolic(at(bx, by - 1), c, at(bx, by + 1))
    } else {
        0.0
    };
    [bx as f64 + ox, by as f64 + oy]
}

/// Locates each reference landmark in `target` by matching a template cut
/// from `reference` around it. Pixel coordinates in and out.
///
/// The parabolic refinement is biased wherever the score surface is
/// asymmetric, so the refinement of the template against its own image is
/// subtracted; identical frames then locate every landmark exactly.
pub fn locate_landmarks(
    reference: &Tensor,
    target: &Tensor,
    landmarks_px: &[[f64; 2]],
) -> Result<Vec<[f64; 2]>> {
    same_shape(reference, target)?;
    let (gr, h, w) = grayscale(reference)?;
    let (gt, _, _) = grayscale(target)?;
    let r = TEMPLATE_RADIUS as isize;
    Ok(landmarks_px
        .iter()
        .map(|p| {
            let (cx, cy) = (p[0].round() as isize, p[1].round() as isize);
            let tpl = patch(&gr, h, w, cx, cy, r);
            let found = match_offset(&tpl, &gt, h, w, cx, cy);
            let bias = match_offset(&tpl, &gr, h, w, cx, cy);
            [p[0] + found[0] - bias[0], p[1] + found[1] - bias[1]]
        })
        .collect())
}

/// AKD of `target` against the analytic landmarks of `reference`.
pub fn landmark_akd(reference: &Tensor, target: &Tensor, landmarks_px: &[[f64; 2]]) -> Result<f64> {
    let found = locate_landmarks(reference, target, landmarks_px)?;
    akd(&found, landmarks_px)
}

/// Metrics of one test pair. Fields that need a ground-truth frame are
/// absent for cross-identity pairs.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PairMetrics {
    pub index: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub ssim: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub psnr: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub l1: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub akd: Option<f64>,
    /// L1 of the rectified frame against ground truth.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub rectified_l1: Option<f64>,
    /// L1 of the model's (augmented) driving input against ground truth.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub driving_l1: Option<f64>,
    /// Landmark distance of the rectified frame to ground truth, pixels.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub rectified_akd: Option<f64>,
    /// Rectified frame equals the driving input bit for bit.
    pub rectified_is_driving: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub ssim: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub psnr: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub l1: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub akd: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub rectified_l1: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub driving_l1: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub rectified_akd: Option<f64>,
    /// Pairs whose rectified frame equals the driving input.
    pub rectified_is_driving: usize,
}

fn mean_of(pairs: &[PairMetrics], f: impl Fn(&PairMetrics) -> Option<f64>) -> Option<f64> {
    let vals: Vec<f64> = pairs.iter().filter_map(f).collect();
    if vals.is_empty() {
        None
    } else {
        Some(vals.iter().sum::<f64>() / vals.len() as f64)
    }
}

impl Aggregate {
    /// Arithmetic means in pair order.
    pub fn of(pairs: &[PairMetrics]) -> Self {
        Self {
            ssim: mean_of(pairs, |p| p.ssim),
            psnr: mean_of(pairs, |p| p.psnr),
            l1: mean_of(pairs, |p| p.l1),
            akd: mean_of(pairs, |p| p.akd),
            rectified_l1: mean_of(pairs, |p| p.rectified_l1),
            driving_l1: mean_of(pairs, |p| p.driving_l1),
            rectified_akd: mean_of(pairs, |p| p.rectified_akd),
            rectified_is_driving: pairs.iter().filter(|p| p.rectified_is_driving).count(),
        }
    }
}

/// The evaluation report, serialized as one JSON document.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub schema_version: u32,
    pub protocol: String,
    pub delta: f64,
    pub pair_count: usize,
    /// How AKD landmarks are obtained.
    pub landmark_source: String,
    /// Echo of the evaluated model and test-set settings.
    pub config: serde_json::Value,
    pub aggregate: Aggregate,
    pub pairs: Vec<PairMetrics>,
}

pub const LANDMARK_SOURCE: &str =
    "analytic renderer landmarks on the ground-truth frame, located on the \
compared frame by normalized cross-correlation of 9x9 templates within 6 px";

impl MetricsReport {
    pub fn new(
        protocol: &str,
        delta: f64,
        config: serde_json::Value,
        pairs: Vec<PairMetrics>,
    ) -> Self {
        Self {
            schema_version: REPORT_SCHEMA_VERSION,
            protocol: protocol.to_string(),
            delta,
            pair_count: pairs.len(),
            landmark_source: LANDMARK_SOURCE.to_string(),
            config,
            aggregate: Aggregate::of(&pairs),
            pairs,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

#[cfg(test)]
mod tests;
