use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::tensor::{lattice_coord, Tensor};

use super::DataError;

pub const NUM_LANDMARKS: usize = 10;
/// Landmark order of [`FaceParams::landmarks`].
pub const LANDMARK_NAMES: [&str; NUM_LANDMARKS] = [
    "eye_left",
    "eye_right",
    "nose_bridge",
    "nose_tip",
    "mouth_left",
    "mouth_right",
    "oval_left",
    "oval_right",
    "oval_top",
    "oval_bottom",
];

pub const ROTATION_MAX: f64 = std::f64::consts::PI / 8.0;
pub const TRANSLATION_MAX: f64 = 0.1;
pub const SCALE_RANGE: (f64, f64) = (0.7, 1.3);
/// Semi-axis of the head along the face's vertical, before scaling.
pub const HEAD_HEIGHT: f64 = 0.5;
const SUPERSAMPLE: usize = 4;
const EYE_Y: f64 = -0.12;
const MOUTH_Y: f64 = 0.25;
const BRIDGE_Y: f64 = -0.1;

/// Per-identity appearance, fixed for a video.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Identity {
    /// Head height over width.
    pub aspect: f64,
    /// Horizontal offset of each eye from the face axis.
    pub eye_spacing: f64,
    pub eye_size: f64,
    /// Half width of the mouth.
    pub mouth_width: f64,
    pub nose_length: f64,
    pub skin: [f64; 3],
    pub feature_color: [f64; 3],
    pub background: [f64; 3],
    pub background_freq: f64,
    pub background_phase: [f64; 2],
}

impl Identity {
    pub fn sample(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut color = |lo: f64, hi: f64| -> [f64; 3] {
            [
                rng.gen_range(lo..hi),
                rng.gen_range(lo..hi),
                rng.gen_range(lo..hi),
            ]
        };
        let skin = color(0.55, 0.9);
        let feature_color = color(0.05, 0.3);
        let background = color(0.15, 0.6);
        Self {
            aspect: rng.gen_range(1.1..1.35),
            eye_spacing: rng.gen_range(0.12..0.17),
            eye_size: rng.gen_range(0.05..0.075),
            mouth_width: rng.gen_range(0.09..0.14),
            nose_length: rng.gen_range(0.15..0.22),
            skin,
            feature_color,
            background,
            background_freq: rng.gen_range(3.0..7.0),
            background_phase: [rng.gen_range(0.0..6.3), rng.gen_range(0.0..6.3)],
        }
    }

    fn head_width(&self) -> f64 {
        HEAD_HEIGHT / self.aspect
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    /// In-plane rotation, radians.
    pub rotation: f64,
    /// Translation in normalized units.
    pub translation: [f64; 2],
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Expression {
    pub mouth_open: f64,
    pub eye_open: f64,
    pub brow_raise: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FaceParams {
    pub identity: Identity,
    pub pose: Pose,
    pub expression: Expression,
    pub scale: f64,
}

fn check_range(name: &str, v: f64, lo: f64, hi: f64) -> Result<(), DataError> {
    if !(lo..=hi).contains(&v) {
        return Err(DataError::OutOfRange(format!(
            "{name} = {v} outside [{lo}, {hi}]"
        )));
    }
    Ok(())
}

impl FaceParams {
    pub fn validate(&self) -> Result<(), DataError> {
        let e = &self.expression;
        check_range("rotation", self.pose.rotation, -ROTATION_MAX, ROTATION_MAX)?;
        check_range(
            "translation x",
            self.pose.translation[0],
            -TRANSLATION_MAX,
            TRANSLATION_MAX,
        )?;
        check_range(
            "translation y",
            self.pose.translation[1],
            -TRANSLATION_MAX,
            TRANSLATION_MAX,
        )?;
        check_range("mouth_open", e.mouth_open, 0.0, 1.0)?;
        check_range("eye_open", e.eye_open, 0.0, 1.0)?;
        check_range("brow_raise", e.brow_raise, -1.0, 1.0)?;
        check_range("scale", self.scale, SCALE_RANGE.0, SCALE_RANGE.1)?;
        check_range("aspect", self.identity.aspect, 1.0, 1.5)?;
        Ok(())
    }

    /// Face-local to normalized image coordinates.
    pub fn to_image(&self, local: [f64; 2]) -> [f64; 2] {
        let (s, c) = self.pose.rotation.sin_cos();
        let [x, y] = local;
        [
            self.pose.translation[0] + self.scale * (c * x - s * y),
            self.pose.translation[1] + self.scale * (s * x + c * y),
        ]
    }

    fn to_local(&self, p: [f64; 2]) -> [f64; 2] {
        let (s, c) = self.pose.rotation.sin_cos();
        let (x, y) = (
            (p[0] - self.pose.translation[0]) / self.scale,
            (p[1] - self.pose.translation[1]) / self.scale,
        );
        [c * x + s * y, -s * x + c * y]
    }

    /// Landmarks in face-local coordinates, ordered as [`LANDMARK_NAMES`].
    pub fn local_landmarks(&self) -> [[f64; 2]; NUM_LANDMARKS] {
        let id = &self.identity;
        let (rx, ry) = (id.head_width(), HEAD_HEIGHT);
        [
            [-id.eye_spacing, EYE_Y],
            [id.eye_spacing, EYE_Y],
            [0.0, BRIDGE_Y],
            [0.0, BRIDGE_Y + id.nose_length],
            [-id.mouth_width, MOUTH_Y],
            [id.mouth_width, MOUTH_Y],
            [-rx, 0.0],
            [rx, 0.0],
            [0.0, -ry],
            [0.0, ry],
        ]
    }

    /// Landmarks in normalized image coordinates.
    pub fn landmarks(&self) -> Vec<[f64; 2]> {
        self.local_landmarks()
            .iter()
            .map(|&p| self.to_image(p))
            .collect()
    }

    fn background(&self, p: [f64; 2]) -> [f64; 3] {
        let id = &self.identity;
        let t = (id.background_freq * p[0] + id.background_phase[0]).sin()
            * (id.background_freq * p[1] + id.background_phase[1]).cos();
        id.background.map(|c| (c + 0.12 * t).clamp(0.0, 1.0))
    }

    /// Color at normalized image point `p`.
    fn shade(&self, p: [f64; 2]) -> [f64; 3] {
        let id = &self.identity;
        let e = &self.expression;
        let [x, y] = self.to_local(p);
        let (rx, ry) = (id.head_width(), HEAD_HEIGHT);
        let r2 = (x / rx).powi(2) + (y / ry).powi(2);
        if r2 > 1.0 {
            return self.background(p);
        }
        let dark = id.feature_color;
        // mouth between a shallow upper arc and an opening lower arc
        let u = x / id.mouth_width;
        if u.abs() <= 1.0 {
            let bulge = 1.0 - u * u;
            let top = MOUTH_Y - 0.012 * bulge;
            let bottom = MOUTH_Y + (0.01 + 0.08 * e.mouth_open) * bulge;
            if y >= top && y <= bottom {
                return [0.5, 0.1, 0.12];
            }
        }
        for side in [-1.0, 1.0] {
            let (ex, ey) = (x - side * id.eye_spacing, y - EYE_Y);
            let half_h = id.eye_size * (0.25 + 0.45 * e.eye_open);
            let sclera = (ex / (1.5 * id.eye_size)).powi(2) + (ey / half_h).powi(2);
            if sclera <= 1.0 {
                let pupil = ex * ex + ey * ey <= (0.6 * id.eye_size).powi(2);
                return if pupil {
                    [0.08, 0.06, 0.1]
                } else {
                    [0.95, 0.95, 0.92]
                };
            }
            let by = EYE_Y - 0.09 - 0.035 * e.brow_raise;
            let brow = segment_distance(
                [x, y],
                [side * id.eye_spacing - 0.07, by + 0.01],
                [side * id.eye_spacing + 0.07, by - 0.01],
            );
            if brow <= 0.018 {
                return dark;
            }
        }
        let nose = segment_distance([x, y], [0.0, BRIDGE_Y], [0.0, BRIDGE_Y + id.nose_length]);
        if nose <= 0.014 {
            return id.skin.map(|c| c * 0.7);
        }
        let shading = 1.0 - 0.18 * r2;
        id.skin.map(|c| c * shading)
    }
}

fn segment_distance(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
    let t = (((p[0] - a[0]) * dx + (p[1] - a[1]) * dy) / (dx * dx + dy * dy)).clamp(0.0, 1.0);
    ((p[0] - a[0] - t * dx).powi(2) + (p[1] - a[1] - t * dy).powi(2)).sqrt()
}

/// Supersampled rendering: `[3, h, w]` image in `[0, 1]` and the 10
/// landmarks in normalized coordinates.
pub fn render_face(
    p: &FaceParams,
    h: usize,
    w: usize,
) -> Result<(Tensor, Vec<[f64; 2]>), DataError> {
    if h < 32 || w < 32 {
        return Err(DataError::OutOfRange(format!(
            "image extent {h}x{w} below 32"
        )));
    }
    p.validate()?;
    let mut img = vec![0.0; 3 * h * w];
    let (sx, sy) = (2.0 / (w - 1) as f64, 2.0 / (h - 1) as f64);
    let n = SUPERSAMPLE as f64;
    for y in 0..h {
        for x in 0..w {
            let (cx, cy) = (lattice_coord(x, w), lattice_coord(y, h));
            let mut acc = [0.0; 3];
            for j in 0..SUPERSAMPLE {
                for i in 0..SUPERSAMPLE {
                    let q = [
                        cx + ((i as f64 + 0.5) / n - 0.5) * sx,
                        cy + ((j as f64 + 0.5) / n - 0.5) * sy,
                    ];
                    let c = p.shade(q);
                    (0..3).for_each(|k| acc[k] += c[k]);
                }
            }
            for (k, a) in acc.iter().enumerate() {
                img[(k * h + y) * w + x] = a / (n * n);
            }
        }
    }
    Ok((Tensor::new(vec![3, h, w], img).unwrap(), p.landmarks()))
}

/// Normalized `[−1, 1]` coordinate to pixel units on an axis of `len` samples.
pub fn to_pixel(v: f64, len: usize) -> f64 {
    (v + 1.0) / 2.0 * (len - 1) as f64
}

pub fn to_normalized(px: f64, len: usize) -> f64 {
    px / (len - 1) as f64 * 2.0 - 1.0
}

pub fn landmarks_to_pixels(points: &[[f64; 2]], h: usize, w: usize) -> Vec<[f64; 2]> {
    points
        .iter()
        .map(|p| [to_pixel(p[0], w), to_pixel(p[1], h)])
        .collect()
}
