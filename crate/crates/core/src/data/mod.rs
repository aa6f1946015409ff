//! Procedural face corpus with analytic landmarks, the scale augmentation and
//! the evaluation protocols.
//!
//! Corpus layout on disk:
//!
//! ```text
//! corpus/
//!   manifest.json
//!   video_0000/frame_000.ppm … frame_NNN.ppm
//!   video_0000/meta.json          identity/motion seeds, per-frame params and landmarks
//!   heldout_0000/…                same layout, identities never used for training
//! ```

mod augment;
mod corpus;
mod face;
pub mod ppm;
mod testset;
mod video;

pub use augment::{
    bilinear, expression_preserved_augment, invert_augment, round_half_up, AugmentGeometry,
    AugmentParams, Augmented, FillMode, DEFAULT_DELTA,
};
pub use corpus::{
    load_corpus, read_manifest, synthesize_corpus, Corpus, CorpusSpec, FrameMeta, LoadedVideo,
    Manifest, VideoMeta, CORPUS_FORMAT_VERSION, MANIFEST_FILE, META_FILE,
};
pub use face::{
    landmarks_to_pixels, render_face, to_normalized, to_pixel, Expression, FaceParams, Identity,
    Pose, HEAD_HEIGHT, LANDMARK_NAMES, NUM_LANDMARKS, ROTATION_MAX, SCALE_RANGE, TRANSLATION_MAX,
};
pub use testset::{
    build_testset, AugmentedDriving, Protocol, TestFrame, TestPair, TestsetSpec, DEFAULT_HELDOUT,
    TEST_VIDEO_FRAMES,
};
pub use video::{sample_video, video_params, Frame, WalkSteps, WALK_STEPS};

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("parameter out of range: {0}")]
    OutOfRange(String),
    #[error("shape: {0}")]
    Shape(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("corrupt corpus: {0}")]
    Corrupt(String),
}

/// SplitMix64 finalizer over `a ⊕ golden·(b+1)`; used to derive independent
/// seeds.
pub fn mix_seed(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_add(1).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn train_identity_seed(corpus_seed: u64, video: u64) -> u64 {
    mix_seed(corpus_seed, video)
}

pub fn heldout_identity_seed(corpus_seed: u64, index: u64) -> u64 {
    mix_seed(corpus_seed, (1 << 40) + index)
}
