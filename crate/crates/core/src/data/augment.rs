use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;

use super::face::{to_normalized, to_pixel};
use super::DataError;

/// Default augmentation half-range `δ`.
pub const DEFAULT_DELTA: f64 = 0.3;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FillMode {
    /// Repeat the outermost content rows and columns.
    #[default]
    Replicate,
    Zero,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentParams {
    /// Vertical factor.
    pub alpha: f64,
    /// Horizontal factor.
    pub beta: f64,
    pub delta: f64,
    pub fill: FillMode,
}

impl AugmentParams {
    pub fn new(alpha: f64, beta: f64, delta: f64, fill: FillMode) -> Result<Self, DataError> {
        let p = Self {
            alpha,
            beta,
            delta,
            fill,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn identity() -> Self {
        Self {
            alpha: 1.0,
            beta: 1.0,
            delta: 0.0,
            fill: FillMode::Replicate,
        }
    }

    /// Both factors uniform in `[1 − δ, 1 + δ]`.
    pub fn sample<R: Rng>(rng: &mut R, delta: f64, fill: FillMode) -> Self {
        let mut draw = || {
            if delta > 0.0 {
                rng.gen_range(1.0 - delta..=1.0 + delta)
            } else {
                1.0
            }
        };
        let alpha = draw();
        let beta = draw();
        Self {
            alpha,
            beta,
            delta,
            fill,
        }
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let (lo, hi) = (1.0 - self.delta, 1.0 + self.delta);
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta)] {
            if !(v >= lo - 1e-12 && v <= hi + 1e-12) || !(0.0..1.0).contains(&self.delta) {
                return Err(DataError::OutOfRange(format!(
                    "{name} = {v} outside [1 - {d}, 1 + {d}]",
                    d = self.delta
                )));
            }
        }
        Ok(())
    }
}

/// `⌊v + 0.5⌋`.
pub fn round_half_up(v: f64) -> usize {
    (v + 0.5).floor() as usize
}

/// The analytic pixel map of one augmentation on an `h × w` frame: content
/// resized to `hd × wd` and placed with its top-left corner at
/// `(left, top)`. Negative offsets crop.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentGeometry {
    pub h: usize,
    pub w: usize,
    pub hd: usize,
    pub wd: usize,
    pub top: i64,
    pub left: i64,
}

impl AugmentGeometry {
    pub fn new(h: usize, w: usize, a: &AugmentParams) -> Self {
        let hd = round_half_up(a.alpha * h as f64).max(2);
        let wd = round_half_up(a.beta * w as f64).max(2);
        Self {
            h,
            w,
            hd,
            wd,
            top: (h as i64 - hd as i64).div_euclid(2),
            left: (w as i64 - wd as i64).div_euclid(2),
        }
    }

    fn ratio_x(&self) -> f64 {
        (self.wd - 1) as f64 / (self.w - 1) as f64
    }

    fn ratio_y(&self) -> f64 {
        (self.hd - 1) as f64 / (self.h - 1) as f64
    }

    /// Original pixel position to augmented pixel position.
    pub fn forward_px(&self, p: [f64; 2]) -> [f64; 2] {
        [
            self.left as f64 + p[0] * self.ratio_x(),
            self.top as f64 + p[1] * self.ratio_y(),
        ]
    }

    /// Augmented pixel position to original pixel position.
    pub fn inverse_px(&self, p: [f64; 2]) -> [f64; 2] {
        [
            (p[0] - self.left as f64) * (self.w - 1) as f64 / (self.wd - 1) as f64,
            (p[1] - self.top as f64) * (self.h - 1) as f64 / (self.hd - 1) as f64,
        ]
    }

    /// Normalized-coordinate version of [`Self::forward_px`].
    pub fn forward_normalized(&self, p: [f64; 2]) -> [f64; 2] {
        let q = self.forward_px([to_pixel(p[0], self.w), to_pixel(p[1], self.h)]);
        [to_normalized(q[0], self.w), to_normalized(q[1], self.h)]
    }

    /// Whether augmented pixel `(x, y)` shows resized content rather than fill.
    pub fn is_content(&self, x: usize, y: usize) -> bool {
        let (x, y) = (x as i64, y as i64);
        x >= self.left
            && x < self.left + self.wd as i64
            && y >= self.top
            && y < self.top + self.hd as i64
    }
}

/// Align-corners bilinear lookup of one `[h, w]` plane at a pixel position
/// inside `[0, h−1] × [0, w−1]`.
pub fn bilinear(plane: &[f64], h: usize, w: usize, x: f64, y: f64) -> f64 {
    let x = x.clamp(0.0, (w - 1) as f64);
    let y = y.clamp(0.0, (h - 1) as f64);
    let (x0, y0) = (x.floor() as usize, y.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
    let (fx, fy) = (x - x0 as f64, y - y0 as f64);
    let top = plane[y0 * w + x0] * (1.0 - fx) + plane[y0 * w + x1] * fx;
    let bot = plane[y1 * w + x0] * (1.0 - fx) + plane[y1 * w + x1] * fx;
    top * (1.0 - fy) + bot * fy
}

#[derive(Clone, Debug)]
pub struct Augmented {
    pub image: Tensor,
    /// Normalized coordinates.
    pub landmarks: Vec<[f64; 2]>,
    pub geometry: AugmentGeometry,
}

/// Anisotropic squeeze or stretch of a square `[C, H, W]` frame, padded (or
/// cropped) back to `H × W` around the center.
pub fn expression_preserved_augment(
    image: &Tensor,
    landmarks: &[[f64; 2]],
    a: &AugmentParams,
) -> Result<Augmented, DataError> {
    a.validate()?;
    let &[c, h, w] = image.shape() else {
        return Err(DataError::Shape(format!(
            "expected [C, H, W], got {:?}",
            image.shape()
        )));
    };
    if h != w {
        return Err(DataError::Shape(format!(
            "augmentation needs a square frame, got {h}x{w}"
        )));
    }
    let g = AugmentGeometry::new(h, w, a);
    let mut out = vec![0.0; c * h * w];
    for y in 0..h {
        for x in 0..w {
            if a.fill == FillMode::Zero && !g.is_content(x, y) {
                continue;
            }
            let [sx, sy] = g.inverse_px([x as f64, y as f64]);
            for ch in 0..c {
                let plane = &image.data()[ch * h * w..(ch + 1) * h * w];
                out[(ch * h + y) * w + x] = bilinear(plane, h, w, sx, sy);
            }
        }
    }
    Ok(Augmented {
        image: Tensor::new(vec![c, h, w], out).unwrap(),
        landmarks: landmarks.iter().map(|&p| g.forward_normalized(p)).collect(),
        geometry: g,
    })
}

/// Maps an augmented frame back onto the original lattice. Pixels whose
/// preimage falls outside the augmented frame are `None`.
pub fn invert_augment(augmented: &Tensor, g: &AugmentGeometry) -> Vec<Option<f64>> {
    let (c, h, w) = (augmented.shape()[0], g.h, g.w);
    let mut out = vec![None; c * h * w];
    for y in 0..h {
        for x in 0..w {
            let [ax, ay] = g.forward_px([x as f64, y as f64]);
            if ax < -1e-9 || ay < -1e-9 || ax > (w - 1) as f64 + 1e-9 || ay > (h - 1) as f64 + 1e-9
            {
                continue;
            }
            for ch in 0..c {
                let plane = &augmented.data()[ch * h * w..(ch + 1) * h * w];
                out[(ch * h + y) * w + x] = Some(bilinear(plane, h, w, ax, ay));
            }
        }
    }
    out
}
