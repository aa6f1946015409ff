use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;

use super::augment::{expression_preserved_augment, AugmentParams, FillMode};
use super::face::{render_face, FaceParams};
use super::video::video_params;
use super::{heldout_identity_seed, mix_seed, DataError};

/// Frames per held-out video from which test pairs are drawn.
pub const TEST_VIDEO_FRAMES: usize = 20;
/// Default number of held-out identities.
pub const DEFAULT_HELDOUT: usize = 20;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Protocol {
    SameScale,
    DifferentScale,
    CrossIdentity,
}

impl Protocol {
    pub fn name(&self) -> &'static str {
        match self {
            Protocol::SameScale => "same-scale",
            Protocol::DifferentScale => "different-scale",
            Protocol::CrossIdentity => "cross-identity",
        }
    }
}

impl std::str::FromStr for Protocol {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "same-scale" => Ok(Protocol::SameScale),
            "different-scale" => Ok(Protocol::DifferentScale),
            "cross-identity" => Ok(Protocol::CrossIdentity),
            other => Err(format!("unknown protocol {other}")),
        }
    }
}

#[derive(Clone, Debug)]
pub struct TestFrame {
    pub image: Tensor,
    pub landmarks: Vec<[f64; 2]>,
    pub params: FaceParams,
    pub identity_seed: u64,
}

#[derive(Clone, Debug)]
pub struct AugmentedDriving {
    pub image: Tensor,
    pub landmarks: Vec<[f64; 2]>,
    pub params: AugmentParams,
}

#[derive(Clone, Debug)]
pub struct TestPair {
    pub index: usize,
    pub source: TestFrame,
    pub driving: TestFrame,
    /// `I_D'`, different-scale protocol only.
    pub augmented: Option<AugmentedDriving>,
    /// `I_GT`, absent for cross-identity pairs.
    pub ground_truth: Option<Tensor>,
}

impl TestPair {
    /// The frame fed to the model as driving input.
    pub fn model_driving(&self) -> &Tensor {
        self.augmented
            .as_ref()
            .map_or(&self.driving.image, |a| &a.image)
    }

    pub fn model_driving_landmarks(&self) -> &[[f64; 2]] {
        self.augmented
            .as_ref()
            .map_or(&self.driving.landmarks, |a| &a.landmarks)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TestsetSpec {
    pub protocol: Protocol,
    pub pairs: usize,
    pub seed: u64,
    pub delta: f64,
    pub size: usize,
    pub heldout: usize,
}

fn render(params: &FaceParams, identity_seed: u64, size: usize) -> Result<TestFrame, DataError> {
    let (image, landmarks) = render_face(params, size, size)?;
    Ok(TestFrame {
        image,
        landmarks,
        params: params.clone(),
        identity_seed,
    })
}

/// Deterministic list of test pairs drawn from the held-out identities of
/// the corpus seeded with `spec.seed`.
pub fn build_testset(spec: &TestsetSpec) -> Result<Vec<TestPair>, DataError> {
    if spec.pairs == 0 {
        return Err(DataError::OutOfRange("need at least one test pair".into()));
    }
    if spec.heldout < 2 && spec.protocol == Protocol::CrossIdentity {
        return Err(DataError::OutOfRange(
            "cross-identity pairs need two held-out identities".into(),
        ));
    }
    if spec.heldout == 0 {
        return Err(DataError::OutOfRange(
            "need at least one held-out identity".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(spec.seed, 0x7e57));
    let mut pairs = Vec::with_capacity(spec.pairs);
    for index in 0..spec.pairs {
        let id_s = rng.gen_range(0..spec.heldout) as u64;
        let seed_s = heldout_identity_seed(spec.seed, id_s);
        let motion = mix_seed(spec.seed, 0x1_0000 + index as u64);
        let video = video_params(seed_s, TEST_VIDEO_FRAMES, motion);
        let fs = rng.gen_range(0..TEST_VIDEO_FRAMES);
        let mut fd = rng.gen_range(0..TEST_VIDEO_FRAMES - 1);
        if fd >= fs {
            fd += 1;
        }
        let source = render(&video[fs], seed_s, spec.size)?;
        let pair = match spec.protocol {
            Protocol::SameScale | Protocol::DifferentScale => {
                let driving = render(&video[fd], seed_s, spec.size)?;
                let augmented = if spec.protocol == Protocol::DifferentScale {
                    let params = AugmentParams::sample(&mut rng, spec.delta, FillMode::Replicate);
                    let a =
                        expression_preserved_augment(&driving.image, &driving.landmarks, &params)?;
                    Some(AugmentedDriving {
                        image: a.image,
                        landmarks: a.landmarks,
                        params,
                    })
                } else {
                    None
                };
                let ground_truth = Some(driving.image.clone());
                TestPair {
                    index,
                    source,
                    driving,
                    augmented,
                    ground_truth,
                }
            }
            Protocol::CrossIdentity => {
                let mut id_d = rng.gen_range(0..spec.heldout as u64 - 1);
                if id_d >= id_s {
                    id_d += 1;
                }
                let seed_d = heldout_identity_seed(spec.seed, id_d);
                let other = video_params(seed_d, TEST_VIDEO_FRAMES, mix_seed(motion, 1));
                let driving = render(&other[fd], seed_d, spec.size)?;
                TestPair {
                    index,
                    source,
                    driving,
                    augmented: None,
                    ground_truth: None,
                }
            }
        };
        pairs.push(pair);
    }
    Ok(pairs)
}
