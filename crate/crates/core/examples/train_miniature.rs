//! Trains a miniature model for a few hundred steps on a freshly
//! synthesized corpus, then saves and reloads the checkpoint.
//!
//! ```text
//! cargo run --release --example train_miniature -- [steps] [out-dir]
//! ```

use std::path::PathBuf;
use std::time::Instant;

use ostnet::data::{load_corpus, synthesize_corpus, CorpusSpec};
use ostnet::model::ModelConfig;
use ostnet::training::{run, Checkpoint, TrainConfig, TrainSinks, Trainer};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let steps: u64 = args.next().map(|s| s.parse()).transpose()?.unwrap_or(200);
    let out = args
        .next()
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("ostnet-miniature"));

    let size = 32;
    let corpus_dir = out.join("corpus");
    if !corpus_dir.join("manifest.json").exists() {
        synthesize_corpus(
            &CorpusSpec {
                seed: 1,
                videos: 12,
                frames: 8,
                heldout: 4,
                size,
            },
            &corpus_dir,
        )?;
    }
    let corpus = load_corpus(&corpus_dir)?;

    let config = TrainConfig {
        model: ModelConfig {
            image_size: size,
            ..ModelConfig::miniature()
        },
        batch: 4,
        iterations: steps,
        checkpoint_every: 0,
        adam: ostnet::training::AdamConfig {
            learning_rate: 2e-3,
            ..Default::default()
        },
        ..TrainConfig::default()
    };
    let mut trainer = Trainer::new(config)?;
    println!(
        "{} parameters, {} steps of batch {}",
        trainer.model.store.numel(),
        steps,
        trainer.config.batch
    );

    let start = Instant::now();
    let mut log = Vec::new();
    run(
        &mut trainer,
        &corpus,
        TrainSinks {
            log: Some(&mut log),
            on_checkpoint: None,
        },
    )?;
    let records: Vec<ostnet::training::LogRecord> = String::from_utf8(log)?
        .lines()
        .map(serde_json::from_str)
        .collect::<Result<_, _>>()?;
    let every = (records.len() / 10).max(1);
    for r in records.iter().step_by(every).chain(records.last()) {
        println!(
            "iter {:5}  total {:.4}  rec {:.4}  rect {:.4}  eq {:.4}  dist {:.4}",
            r.iteration, r.total, r.rec, r.rect, r.eq, r.dist
        );
    }
    println!("{:.1}s", start.elapsed().as_secs_f64());

    let path = out.join("checkpoint.ostn");
    trainer.checkpoint().save(&path)?;
    let reloaded = Checkpoint::load(&path)?;
    assert_eq!(reloaded.iteration, trainer.iteration);
    println!("checkpoint: {}", path.display());
    Ok(())
}
