//! Trains the three ablation arms on one synthetic corpus and writes a
//! summary that the acceptance suite reads.
//!
//! The full configuration (100 identities, 64×64, 20k iterations, batch 8)
//! takes many hours on a CPU. Every arm checkpoints periodically and resumes
//! where it stopped, so the run can be interrupted. `--iters`, `--videos`
//! and `--size` shrink it for a quick look; the summary records what ran.
//!
//! ```text
//! cargo run --release --example desk_run -- --out target/desk-run
//! cargo run --release --example desk_run -- --out /tmp/small --iters 200 --videos 20
//! ```

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::Parser;
use ostnet::data::{
    build_testset, load_corpus, synthesize_corpus, CorpusSpec, Protocol, TestsetSpec,
};
use ostnet::eval::{evaluate_pairs, keypoint_stats, run_pair, thread_count, KeypointStats};
use ostnet::metrics::{psnr, Aggregate, MetricsReport};
use ostnet::model::{Ablation, ModelConfig};
use ostnet::training::{run, Checkpoint, TrainConfig, TrainSinks, Trainer};
use serde::Serialize;

#[derive(Parser)]
struct Args {
    #[arg(long, default_value = "target/desk-run")]
    out: PathBuf,
    #[arg(long, default_value_t = 20_000)]
    iters: u64,
    #[arg(long, default_value_t = 100)]
    videos: usize,
    #[arg(long, default_value_t = 20)]
    frames: usize,
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long, default_value_t = 8)]
    batch: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 200)]
    pairs: usize,
    #[arg(long, default_value_t = 500)]
    checkpoint_every: u64,
}

#[derive(Serialize)]
struct RunConfig {
    size: usize,
    identities: usize,
    frames_per_video: usize,
    iterations: u64,
    batch: usize,
    seed: u64,
    pairs: usize,
    delta: f64,
}

#[derive(Serialize)]
struct ArmSummary {
    ablation: Ablation,
    label: String,
    iterations: u64,
    /// Wall time of the training steps run by this invocation.
    train_seconds: f64,
    steps_this_run: u64,
    aggregate: Aggregate,
}

#[derive(Serialize)]
struct Summary {
    config: RunConfig,
    arms: Vec<ArmSummary>,
    keypoints_initial: KeypointStats,
    keypoints_final: KeypointStats,
    /// Full model driven by its own source frame, per held-out identity.
    self_reenact_psnr: Vec<f64>,
}

fn train_arm(
    dir: &Path,
    config: TrainConfig,
    corpus: &ostnet::data::Corpus,
) -> Result<(Trainer, f64, u64), Box<dyn std::error::Error>> {
    fs::create_dir_all(dir)?;
    let ckpt_path = dir.join("checkpoint.ostn");
    let mut trainer = if ckpt_path.exists() {
        let mut t = Trainer::from_checkpoint(Checkpoint::load(&ckpt_path)?)?;
        t.config.iterations = config.iterations;
        t
    } else {
        Trainer::new(config)?
    };
    let start_iter = trainer.iteration;
    let mut log = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(dir.join("train.jsonl"))?;
    let started = Instant::now();
    let mut save = |c: &Checkpoint| {
        eprintln!("  checkpoint at {}", c.iteration);
        c.save(&ckpt_path)
    };
    run(
        &mut trainer,
        corpus,
        TrainSinks {
            log: Some(&mut log),
            on_checkpoint: Some(&mut save),
        },
    )?;
    log.flush()?;
    trainer.checkpoint().save(&ckpt_path)?;
    let steps = trainer.iteration - start_iter;
    Ok((trainer, started.elapsed().as_secs_f64(), steps))
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let a = Args::parse();
    let corpus_dir = a.out.join("corpus");
    if !corpus_dir.join("manifest.json").exists() {
        eprintln!("synthesizing {} identities at {1}x{1}", a.videos, a.size);
        synthesize_corpus(
            &CorpusSpec {
                seed: a.seed,
                videos: a.videos,
                frames: a.frames,
                heldout: ostnet::data::DEFAULT_HELDOUT,
                size: a.size,
            },
            &corpus_dir,
        )?;
    }
    let corpus = load_corpus(&corpus_dir)?;
    let base = TrainConfig {
        model: ModelConfig {
            image_size: a.size,
            ..ModelConfig::desk()
        },
        iterations: a.iters,
        batch: a.batch,
        seed: a.seed,
        checkpoint_every: a.checkpoint_every,
        ..TrainConfig::default()
    };
    let pairs = build_testset(&TestsetSpec {
        protocol: Protocol::DifferentScale,
        pairs: a.pairs,
        seed: corpus.manifest.seed,
        delta: base.delta,
        size: a.size,
        heldout: corpus.manifest.heldout.len(),
    })?;
    let heldout_frames: Vec<_> = (0..corpus.heldout.len())
        .flat_map(|v| (0..corpus.manifest.frames_per_video).map(move |f| (v, f)))
        .map(|(v, f)| corpus.heldout_frame(v, f))
        .collect();
    let kp = |model: &ostnet::model::Model| {
        keypoint_stats(
            model,
            &heldout_frames,
            a.seed ^ 0x6b70,
            base.eq_strength,
            base.eq_affine,
            base.gamma,
        )
    };

    let mut arms = Vec::new();
    let mut keypoints = None;
    let mut self_psnr = Vec::new();
    for ablation in [Ablation::BASELINE, Ablation::ST_ONLY, Ablation::FULL] {
        let label = ablation.label().to_string();
        eprintln!("arm {label}: training to {} iterations", a.iters);
        let config = TrainConfig {
            ablation,
            ..base.clone()
        };
        let initial = Trainer::new(config.clone())?.model;
        let dir = a.out.join(label.replace(['+', ' '], "_"));
        let (trainer, secs, steps) = train_arm(&dir, config, &corpus)?;
        if steps > 0 {
            eprintln!(
                "  {steps} steps in {secs:.0}s ({:.2}s/step)",
                secs / steps as f64
            );
        }
        let outputs = evaluate_pairs(&trainer.model, ablation, &pairs, thread_count())?;
        let report = MetricsReport::new(
            Protocol::DifferentScale.name(),
            base.delta,
            serde_json::json!({ "ablation": ablation, "iteration": trainer.iteration }),
            outputs.into_iter().map(|o| o.metrics).collect(),
        );
        fs::write(dir.join("report.json"), report.to_json() + "\n")?;
        let agg = &report.aggregate;
        eprintln!(
            "  ssim {:.4} l1 {:.4} rectified l1 {:.4} (driving {:.4}) rectified akd {:.3}",
            agg.ssim.unwrap_or(f64::NAN),
            agg.l1.unwrap_or(f64::NAN),
            agg.rectified_l1.unwrap_or(f64::NAN),
            agg.driving_l1.unwrap_or(f64::NAN),
            agg.rectified_akd.unwrap_or(f64::NAN),
        );
        if ablation == Ablation::FULL {
            keypoints = Some((kp(&initial)?, kp(&trainer.model)?));
            for v in 0..corpus.heldout.len() {
                let frame = corpus.heldout_frame(v, 0);
                let (generated, _) = run_pair(&trainer.model, ablation, &frame, &frame)?;
                self_psnr.push(psnr(&generated, &frame)?);
            }
        }
        arms.push(ArmSummary {
            ablation,
            label,
            iterations: trainer.iteration,
            train_seconds: secs,
            steps_this_run: steps,
            aggregate: report.aggregate.clone(),
        });
    }
    let (keypoints_initial, keypoints_final) = keypoints.expect("full arm ran");
    let summary = Summary {
        config: RunConfig {
            size: a.size,
            identities: a.videos,
            frames_per_video: a.frames,
            iterations: a.iters,
            batch: a.batch,
            seed: a.seed,
            pairs: a.pairs,
            delta: base.delta,
        },
        arms,
        keypoints_initial,
        keypoints_final,
        self_reenact_psnr: self_psnr,
    };
    let path = a.out.join("summary.json");
    fs::write(&path, serde_json::to_string_pretty(&summary)? + "\n")?;
    eprintln!("wrote {}", path.display());
    Ok(())
}
