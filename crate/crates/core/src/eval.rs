//! Runs a model over test pairs and held-out frames.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{landmarks_to_pixels, TestPair};
use crate::generator::generate;
use crate::geometry::random_tps_with;
use crate::metrics::{l1_distance, landmark_akd, psnr, ssim, MetricsError, PairMetrics};
use crate::model::{Ablation, Model};
use crate::motion::detect_keypoints;
use crate::tensor::{Tape, Tensor, TensorError};
use crate::training::equivariance_loss;

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

/// Model outputs and metrics of one pair.
#[derive(Clone, Debug)]
pub struct PairOutput {
    pub index: usize,
    /// `I_rst`, `[3, H, W]`.
    pub generated: Tensor,
    /// `I_D̂`, `[3, H, W]`.
    pub rectified: Tensor,
    pub metrics: PairMetrics,
}

fn batched(t: &Tensor) -> Tensor {
    let mut shape = vec![1];
    shape.extend_from_slice(t.shape());
    t.clone().reshaped(shape).unwrap()
}

fn unbatched(t: &Tensor) -> Tensor {
    t.clone().reshaped(t.shape()[1..].to_vec()).unwrap()
}

/// Forward pass of one pair; returns `(I_rst, I_D̂)` as `[3, H, W]`.
pub fn run_pair(
    model: &Model,
    ablation: Ablation,
    source: &Tensor,
    driving: &Tensor,
) -> Result<(Tensor, Tensor), TensorError> {
    let mut tape = Tape::new();
    let p = model.store.bind(&mut tape);
    let s = tape.constant(batched(source));
    let d = tape.constant(batched(driving));
    let g = generate(&mut tape, &p, model, s, d, ablation)?;
    Ok((
        unbatched(tape.value(g.output)),
        unbatched(tape.value(g.rectified)),
    ))
}

pub fn evaluate_pair(
    model: &Model,
    ablation: Ablation,
    pair: &TestPair,
) -> Result<PairOutput, EvalError> {
    let driving = pair.model_driving();
    let (generated, rectified) = run_pair(model, ablation, &pair.source.image, driving)?;
    let mut m = PairMetrics {
        index: pair.index,
        rectified_is_driving: rectified.data() == driving.data(),
        ..PairMetrics::default()
    };
    if let Some(gt) = &pair.ground_truth {
        let size = gt.shape()[1];
        let lm = landmarks_to_pixels(&pair.driving.landmarks, size, size);
        m.ssim = Some(ssim(&generated, gt)?);
        m.psnr = Some(psnr(&generated, gt)?);
        m.l1 = Some(l1_distance(&generated, gt)?);
        m.akd = Some(landmark_akd(gt, &generated, &lm)?);
        m.rectified_l1 = Some(l1_distance(&rectified, gt)?);
        m.driving_l1 = Some(l1_distance(driving, gt)?);
        m.rectified_akd = Some(landmark_akd(gt, &rectified, &lm)?);
    }
    Ok(PairOutput {
        index: pair.index,
        generated,
        rectified,
        metrics: m,
    })
}

/// Worker count: `OSTNET_THREADS` if set, else the available parallelism.
pub fn thread_count() -> usize {
    std::env::var("OSTNET_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// Evaluates every pair; results come back in pair order whatever the
/// thread count, and each pair is computed independently, so the output
/// does not depend on `threads`.
pub fn evaluate_pairs(
    model: &Model,
    ablation: Ablation,
    pairs: &[TestPair],
    threads: usize,
) -> Result<Vec<PairOutput>, EvalError> {
    let threads = threads.clamp(1, pairs.len().max(1));
    if threads == 1 {
        return pairs
            .iter()
            .map(|p| evaluate_pair(model, ablation, p))
            .collect();
    }
    let chunk = pairs.len().div_ceil(threads);
    let results: Vec<Result<Vec<PairOutput>, EvalError>> = std::thread::scope(|s| {
        let handles: Vec<_> = pairs
            .chunks(chunk)
            .map(|c| {
                s.spawn(move || {
                    c.iter()
                        .map(|p| evaluate_pair(model, ablation, p))
                        .collect()
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("evaluation worker panicked"))
            .collect()
    });
    let mut out = Vec::with_capacity(pairs.len());
    for r in results {
        out.extend(r?);
    }
    Ok(out)
}

/// Detector behavior on a set of frames.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KeypointStats {
    pub frames: usize,
    /// Mean equivariance loss under seeded random warps.
    pub equivariance: f64,
    /// Per frame, the smallest L1 distance between two keypoints.
    pub min_pair_distance: Vec<f64>,
    /// Fraction of frames whose keypoints are all at least `gamma` apart.
    pub spread_fraction: f64,
    pub gamma: f64,
}

pub fn min_pair_l1(points: &[f64]) -> f64 {
    let k = points.len() / 2;
    let mut best = f64::INFINITY;
    for i in 0..k {
        for j in i + 1..k {
            let d = (points[2 * i] - points[2 * j]).abs()
                + (points[2 * i + 1] - points[2 * j + 1]).abs();
            best = best.min(d);
        }
    }
    best
}

/// Equivariance loss and keypoint spread over `frames` (`[3, H, W]` each).
/// Warps are drawn from `seed` with the given strength, so two models see
/// the same warps.
pub fn keypoint_stats(
    model: &Model,
    frames: &[Tensor],
    seed: u64,
    strength: f64,
    with_affine: bool,
    gamma: f64,
) -> Result<KeypointStats, TensorError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut eq_total = 0.0;
    let mut mins = Vec::with_capacity(frames.len());
    const CHUNK: usize = 8;
    for chunk in frames.chunks(CHUNK) {
        let n = chunk.len();
        let mut shape = vec![n];
        shape.extend_from_slice(chunk[0].shape());
        let images = Tensor::new(
            shape,
            chunk
                .iter()
                .flat_map(|f| f.data().iter().copied())
                .collect(),
        )?;
        let coeffs: Vec<f64> = (0..n)
            .flat_map(|_| {
                random_tps_with(&mut rng, strength, with_affine)
                    .coefficients()
                    .into_data()
            })
            .collect();
        let transforms = Tensor::new(vec![n, crate::geometry::NUM_FIDUCIAL + 3, 2], coeffs)?;
        let mut tape = Tape::new();
        let p = model.store.bind(&mut tape);
        let x = tape.constant(images);
        let kp = detect_keypoints(&mut tape, &p, &model.detector, x)?;
        let eq = equivariance_loss(&mut tape, x, Some(kp), &transforms, |t, img| {
            detect_keypoints(t, &p, &model.detector, img)
        })?;
        eq_total += tape.value(eq).item() * n as f64;
        let k = tape.shape(kp)[1];
        for b in 0..n {
            mins.push(min_pair_l1(
                &tape.value(kp).data()[b * k * 2..(b + 1) * k * 2],
            ));
        }
    }
    let spread = mins.iter().filter(|&&d| d >= gamma).count() as f64 / mins.len().max(1) as f64;
    Ok(KeypointStats {
        frames: frames.len(),
        equivariance: eq_total / frames.len().max(1) as f64,
        min_pair_distance: mins,
        spread_fraction: spread,
        gamma,
    })
}
