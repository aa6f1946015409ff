//! Objective, optimizer and the training loop.

mod adam;
mod checkpoint;
mod losses;

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use adam::{Adam, AdamConfig};
pub use checkpoint::{
    Checkpoint, CheckpointError, MAGIC as CHECKPOINT_MAGIC, VERSION as CHECKPOINT_VERSION,
};
pub use losses::{
    blur_decimate, equivariance_loss, keypoint_distance_loss, mean_keypoint_l1,
    reconstruction_loss, texture_filters, total_loss, total_loss_value, LossParts, LossWeights,
    PyramidLoss, BLUR_TAPS, PYRAMID_LEVELS, TEXTURE_CHANNELS,
};

use crate::data::{
    expression_preserved_augment, mix_seed, AugmentParams, Corpus, DataError, FillMode,
};
use crate::generator::generate;
use crate::geometry::{random_tps_with, NUM_FIDUCIAL};
use crate::model::{Ablation, Model, ModelConfig};
use crate::nn::Bound;
use crate::tensor::{Tape, Tensor, TensorError, Var};

/// Seed of the frozen texture filters in the feature stack.
pub const TEXTURE_SEED: u64 = 0x7e87_0e5e;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub weights: LossWeights,
    /// Minimum keypoint separation (L1) enforced by the spread loss.
    pub gamma: f64,
    /// Augmentation range: α, β ~ U[1 − δ, 1 + δ].
    pub delta: f64,
    pub fill: FillMode,
    pub batch: usize,
    pub iterations: u64,
    pub adam: AdamConfig,
    pub seed: u64,
    pub ablation: Ablation,
    pub model: ModelConfig,
    /// Lattice jitter of the random warps used by the equivariance loss.
    pub eq_strength: f64,
    /// Whether those warps also draw a random scale and rotation.
    pub eq_affine: bool,
    /// Adds the frozen texture conv to the feature stack.
    pub texture_features: bool,
    /// Iterations between checkpoint writes; 0 writes only at the end.
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            weights: LossWeights::default(),
            gamma: 0.1,
            delta: 0.3,
            fill: FillMode::Replicate,
            batch: 8,
            iterations: 20_000,
            adam: AdamConfig::default(),
            seed: 0,
            ablation: Ablation::FULL,
            model: ModelConfig::desk(),
            eq_strength: 0.05,
            eq_affine: true,
            texture_features: true,
            checkpoint_every: 1000,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), String> {
        let w = &self.weights;
        if !(w.reconstruction > 0.0 && w.equivariance > 0.0 && w.distance > 0.0) {
            return Err(format!("loss weights must be positive, got {w:?}"));
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(format!("gamma must lie in (0, 1), got {}", self.gamma));
        }
        if !(0.0..1.0).contains(&self.delta) {
            return Err(format!("delta must lie in [0, 1), got {}", self.delta));
        }
        if self.batch == 0 {
            return Err("batch must be at least 1".into());
        }
        let a = &self.adam;
        if !(a.learning_rate > 0.0
            && (0.0..1.0).contains(&a.beta1)
            && (0.0..1.0).contains(&a.beta2)
            && a.eps > 0.0)
        {
            return Err(format!("invalid optimizer settings {a:?}"));
        }
        if !(self.eq_strength >= 0.0 && self.eq_strength < 0.5) {
            return Err(format!(
                "eq_strength must lie in [0, 0.5), got {}",
                self.eq_strength
            ));
        }
        self.model.validate()
    }

    pub fn features(&self) -> PyramidLoss {
        PyramidLoss::new(
            PYRAMID_LEVELS,
            self.texture_features.then_some(TEXTURE_SEED),
        )
    }

    /// Seed of the initial parameters.
    pub fn init_seed(&self) -> u64 {
        mix_seed(self.seed, u64::MAX)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("log: {0}")]
    Log(std::io::Error),
    #[error("non-finite loss at iteration {}: {record:?}", record.iteration)]
    NonFinite { record: LogRecord },
}

/// One line of the JSON-lines training log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    /// 1-based index of the completed step.
    pub iteration: u64,
    pub rec: f64,
    pub rect: f64,
    pub eq: f64,
    pub dist: f64,
    pub total: f64,
}

impl LogRecord {
    pub fn is_finite(&self) -> bool {
        [self.rec, self.rect, self.eq, self.dist, self.total]
            .iter()
            .all(|v| v.is_finite())
    }
}

/// Inputs of one optimization step.
#[derive(Clone, Debug)]
pub struct Batch {
    pub source: Tensor,
    /// Scale-augmented driving frames fed to the model.
    pub driving: Tensor,
    /// Un-augmented driving frames.
    pub ground_truth: Tensor,
    /// `[N, T+3, 2]` warps for the equivariance loss.
    pub transforms: Tensor,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.source.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// RNG of step `iteration`; independent of every other step so that a
/// resumed run replays the same batches.
pub fn step_rng(seed: u64, iteration: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(iteration);
    rng
}

fn stack(frames: &[Tensor]) -> Tensor {
    let mut shape = vec![frames.len()];
    shape.extend_from_slice(frames[0].shape());
    Tensor::new(
        shape,
        frames
            .iter()
            .flat_map(|f| f.data().iter().copied())
            .collect(),
    )
    .unwrap()
}

/// Draws a batch of same-video (source, driving) pairs with fresh scale
/// augmentation of the driving frame. `frame(video, index)` yields
/// `[3, H, W]` frames.
pub fn sample_pairs<R: Rng>(
    rng: &mut R,
    videos: usize,
    frames: usize,
    config: &TrainConfig,
    frame: impl Fn(usize, usize) -> Tensor,
) -> Result<Batch, TrainError> {
    if videos == 0 || frames < 2 {
        return Err(DataError::Corrupt(format!(
            "need videos of at least 2 frames, got {videos} x {frames}"
        ))
        .into());
    }
    let (mut src, mut drv, mut gt, mut tps) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for _ in 0..config.batch {
        let v = rng.gen_range(0..videos);
        let i = rng.gen_range(0..frames);
        let mut j = rng.gen_range(0..frames - 1);
        if j >= i {
            j += 1;
        }
        let a = AugmentParams::sample(rng, config.delta, config.fill);
        let driving = frame(v, j);
        let aug = expression_preserved_augment(&driving, &[], &a)?;
        src.push(frame(v, i));
        drv.push(aug.image);
        gt.push(driving);
        tps.push(random_tps_with(rng, config.eq_strength, config.eq_affine).coefficients());
    }
    let transforms = stack(&tps);
    debug_assert_eq!(transforms.shape()[1], NUM_FIDUCIAL + 3);
    Ok(Batch {
        source: stack(&src),
        driving: stack(&drv),
        ground_truth: stack(&gt),
        transforms,
    })
}

/// [`sample_pairs`] over the training videos of a corpus.
pub fn sample_batch<R: Rng>(
    rng: &mut R,
    corpus: &Corpus,
    config: &TrainConfig,
) -> Result<Batch, TrainError> {
    sample_pairs(
        rng,
        corpus.train.len(),
        corpus.manifest.frames_per_video,
        config,
        |v, f| corpus.train_frame(v, f),
    )
}

/// [`sample_pairs`] treating `frames` as one video.
pub fn sample_batch_from_frames<R: Rng>(
    rng: &mut R,
    frames: &[Tensor],
    config: &TrainConfig,
) -> Result<Batch, TrainError> {
    sample_pairs(rng, 1, frames.len(), config, |_, f| frames[f].clone())
}

/// Loss parts and total of one batch, built on `tape`.
pub fn objective(
    tape: &mut Tape,
    p: &Bound,
    model: &Model,
    batch: &Batch,
    config: &TrainConfig,
    features: &PyramidLoss,
) -> crate::tensor::Result<(Var, LossParts)> {
    let source = tape.constant(batch.source.clone());
    let driving = tape.constant(batch.driving.clone());
    let gt = tape.constant(batch.ground_truth.clone());
    let g = generate(tape, p, model, source, driving, config.ablation)?;
    let rec = features.distance(tape, gt, g.output)?;
    let rect = if config.ablation.scale_transform {
        features.distance(tape, gt, g.rectified)?
    } else {
        tape.constant(Tensor::scalar(0.0))
    };
    let detector = &model.detector;
    let eq = equivariance_loss(
        tape,
        source,
        Some(g.kp_source),
        &batch.transforms,
        |t, img| crate::motion::detect_keypoints(t, p, detector, img),
    )?;
    let kps = tape.concat(&[g.kp_source, g.kp_driving], 0)?;
    let dist = keypoint_distance_loss(tape, kps, config.gamma)?;
    let parts = LossParts {
        rec,
        rect,
        eq,
        dist,
    };
    let total = total_loss(tape, &parts, &config.weights)?;
    Ok((total, parts))
}

/// Value of the objective without building gradients.
pub fn evaluate_objective(
    model: &Model,
    batch: &Batch,
    config: &TrainConfig,
) -> crate::tensor::Result<LogRecord> {
    let mut tape = Tape::new();
    let p = model.store.bind(&mut tape);
    let (total, parts) = objective(&mut tape, &p, model, batch, config, &config.features())?;
    let v = |x: Var| tape.value(x).item();
    Ok(LogRecord {
        iteration: 0,
        rec: v(parts.rec),
        rect: v(parts.rect),
        eq: v(parts.eq),
        dist: v(parts.dist),
        total: v(total),
    })
}

/// Model plus optimizer state; owns the parameters during training.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub config: TrainConfig,
    pub model: Model,
    pub adam: Adam,
    /// Steps completed.
    pub iteration: u64,
    features: PyramidLoss,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self, TrainError> {
        config.validate().map_err(TrainError::Config)?;
        let model = Model::new(config.model.clone(), config.init_seed());
        let adam = Adam::new(config.adam, model.store.tensors());
        let features = config.features();
        Ok(Self {
            config,
            model,
            adam,
            iteration: 0,
            features,
        })
    }

    /// Restores a trainer from a checkpoint written by [`Trainer::checkpoint`].
    pub fn from_checkpoint(ckpt: Checkpoint) -> Result<Self, TrainError> {
        let mut t = Self::new(ckpt.config.clone())?;
        t.model
            .store
            .load_from(&ckpt.params)
            .map_err(|e| CheckpointError::Mismatch(e.to_string()))?;
        t.adam = ckpt.adam;
        t.iteration = ckpt.iteration;
        Ok(t)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.config.clone(),
            iteration: self.iteration,
            seed: self.config.seed,
            params: self.model.store.clone(),
            adam: self.adam.clone(),
        }
    }

    /// The batch step `iteration` would draw.
    pub fn batch_for(&self, corpus: &Corpus, iteration: u64) -> Result<Batch, TrainError> {
        sample_batch(
            &mut step_rng(self.config.seed, iteration),
            corpus,
            &self.config,
        )
    }

    /// One Adam step on `batch`. A non-finite loss leaves the parameters
    /// untouched and is reported as [`TrainError::NonFinite`].
    pub fn step_on(&mut self, batch: &Batch) -> Result<LogRecord, TrainError> {
        let mut tape = Tape::new();
        let p = self.model.store.bind(&mut tape);
        let (total, parts) = objective(
            &mut tape,
            &p,
            &self.model,
            batch,
            &self.config,
            &self.features,
        )?;
        let v = |x: Var| tape.value(x).item();
        let record = LogRecord {
            iteration: self.iteration + 1,
            rec: v(parts.rec),
            rect: v(parts.rect),
            eq: v(parts.eq),
            dist: v(parts.dist),
            total: v(total),
        };
        if !record.is_finite() {
            return Err(TrainError::NonFinite { record });
        }
        tape.backward(total)?;
        let grads = p.gradients(&tape);
        drop(tape);
        if grads
            .iter()
            .any(|g| g.data().iter().any(|v| !v.is_finite()))
        {
            return Err(TrainError::NonFinite { record });
        }
        self.adam.update(self.model.store.tensors_mut(), &grads);
        self.iteration += 1;
        Ok(record)
    }

    /// Samples the next batch and steps on it.
    pub fn step(&mut self, corpus: &Corpus) -> Result<LogRecord, TrainError> {
        let batch = self.batch_for(corpus, self.iteration)?;
        self.step_on(&batch)
    }
}

/// Where the loop writes its artifacts.
pub struct TrainSinks<'a> {
    pub log: Option<&'a mut dyn Write>,
    /// Called with every periodic checkpoint.
    pub on_checkpoint: Option<&'a mut dyn FnMut(&Checkpoint) -> Result<(), CheckpointError>>,
}

impl Default for TrainSinks<'_> {
    fn default() -> Self {
        Self {
            log: None,
            on_checkpoint: None,
        }
    }
}

/// Steps until `trainer.config.iterations` steps are complete, logging one
/// JSON line per step. On a non-finite loss the trainer is left at the last
/// good state so the caller can write a diagnostic checkpoint.
pub fn run(
    trainer: &mut Trainer,
    corpus: &Corpus,
    mut sinks: TrainSinks<'_>,
) -> Result<(), TrainError> {
    if corpus.size() != trainer.config.model.image_size {
        return Err(TrainError::Config(format!(
            "corpus frames are {0}x{0}, model expects {1}x{1}",
            corpus.size(),
            trainer.config.model.image_size
        )));
    }
    while trainer.iteration < trainer.config.iterations {
        let record = trainer.step(corpus)?;
        if let Some(log) = sinks.log.as_mut() {
            let line = serde_json::to_string(&record).expect("log record serializes");
            writeln!(log, "{line}").map_err(TrainError::Log)?;
        }
        let every = trainer.config.checkpoint_every;
        if every > 0
            && trainer.iteration % every == 0
            && trainer.iteration < trainer.config.iterations
        {
            if let Some(f) = sinks.on_checkpoint.as_mut() {
                f(&trainer.checkpoint())?;
            }
        }
    }
    if let Some(log) = sinks.log.as_mut() {
        log.flush().map_err(TrainError::Log)?;
    }
    Ok(())
}

/// Trains from scratch and returns the final checkpoint.
pub fn train(config: TrainConfig, corpus: &Corpus) -> Result<Checkpoint, TrainError> {
    let mut trainer = Trainer::new(config)?;
    run(&mut trainer, corpus, TrainSinks::default())?;
    Ok(trainer.checkpoint())
}
