use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;

use super::face::{
    render_face, Expression, FaceParams, Identity, Pose, ROTATION_MAX, SCALE_RANGE, TRANSLATION_MAX,
};
use super::DataError;

/// Largest per-frame change of each walked quantity.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WalkSteps {
    pub rotation: f64,
    pub translation: f64,
    pub mouth: f64,
    pub eye: f64,
    pub brow: f64,
}

pub const WALK_STEPS: WalkSteps = WalkSteps {
    rotation: 0.06,
    translation: 0.025,
    mouth: 0.2,
    eye: 0.2,
    brow: 0.25,
};

#[derive(Clone, Debug)]
pub struct Frame {
    pub image: Tensor,
    /// Normalized coordinates.
    pub landmarks: Vec<[f64; 2]>,
    pub params: FaceParams,
}

/// Bounded random walk step, reflected at the interval ends.
fn walk<R: Rng>(rng: &mut R, v: f64, step: f64, lo: f64, hi: f64) -> f64 {
    let mut x = v + rng.gen_range(-step..=step);
    if x > hi {
        x = 2.0 * hi - x;
    }
    if x < lo {
        x = 2.0 * lo - x;
    }
    x.clamp(lo, hi)
}

/// Per-frame parameters of one video: fixed identity and scale, walking pose
/// and expression.
pub fn video_params(identity_seed: u64, frames: usize, motion_seed: u64) -> Vec<FaceParams> {
    let identity = Identity::sample(identity_seed);
    let mut rng = ChaCha8Rng::seed_from_u64(motion_seed);
    let scale = rng.gen_range(SCALE_RANGE.0..=SCALE_RANGE.1);
    let mut pose = Pose {
        rotation: rng.gen_range(-ROTATION_MAX..=ROTATION_MAX),
        translation: [
            rng.gen_range(-TRANSLATION_MAX..=TRANSLATION_MAX),
            rng.gen_range(-TRANSLATION_MAX..=TRANSLATION_MAX),
        ],
    };
    let mut expr = Expression {
        mouth_open: rng.gen_range(0.0..=1.0),
        eye_open: rng.gen_range(0.0..=1.0),
        brow_raise: rng.gen_range(-1.0..=1.0),
    };
    let s = WALK_STEPS;
    let mut out = Vec::with_capacity(frames);
    for f in 0..frames {
        if f > 0 {
            pose.rotation = walk(
                &mut rng,
                pose.rotation,
                s.rotation,
                -ROTATION_MAX,
                ROTATION_MAX,
            );
            for t in &mut pose.translation {
                *t = walk(
                    &mut rng,
                    *t,
                    s.translation,
                    -TRANSLATION_MAX,
                    TRANSLATION_MAX,
                );
            }
            expr.mouth_open = walk(&mut rng, expr.mouth_open, s.mouth, 0.0, 1.0);
            expr.eye_open = walk(&mut rng, expr.eye_open, s.eye, 0.0, 1.0);
            expr.brow_raise = walk(&mut rng, expr.brow_raise, s.brow, -1.0, 1.0);
        }
        out.push(FaceParams {
            identity: identity.clone(),
            pose,
            expression: expr,
            scale,
        });
    }
    out
}

/// Renders a whole video at `size × size`.
pub fn sample_video(
    identity_seed: u64,
    frames: usize,
    motion_seed: u64,
    size: usize,
) -> Result<Vec<Frame>, DataError> {
    if frames < 2 {
        return Err(DataError::OutOfRange(format!(
            "a video needs at least 2 frames, got {frames}"
        )));
    }
    video_params(identity_seed, frames, motion_seed)
        .into_iter()
        .map(|params| {
            let (image, landmarks) = render_face(&params, size, size)?;
            Ok(Frame {
                image,
                landmarks,
                params,
            })
        })
        .collect()
}
