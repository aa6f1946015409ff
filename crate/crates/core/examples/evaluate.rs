//! Evaluates a checkpoint on the three test protocols. Defaults to the
//! output of the `train_miniature` example.
//!
//! ```text
//! cargo run --release --example evaluate -- [checkpoint.ostn] [corpus-dir]
//! ```

use std::path::PathBuf;

use ostnet::data::{build_testset, read_manifest, Protocol, TestsetSpec};
use ostnet::eval::{evaluate_pairs, thread_count};
use ostnet::metrics::Aggregate;
use ostnet::training::{Checkpoint, Trainer};

fn show(v: Option<f64>) -> String {
    v.map_or("   n/a".into(), |v| format!("{v:6.3}"))
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let default = std::env::temp_dir().join("ostnet-miniature");
    let mut args = std::env::args().skip(1).map(PathBuf::from);
    let ckpt = args
        .next()
        .unwrap_or_else(|| default.join("checkpoint.ostn"));
    let corpus = args.next().unwrap_or_else(|| default.join("corpus"));

    let checkpoint = Checkpoint::load(&ckpt)?;
    let ablation = checkpoint.config.ablation;
    let model = Trainer::from_checkpoint(checkpoint)?.model;
    let manifest = read_manifest(&corpus)?;
    println!(
        "{} ({}), {} held-out identities",
        ckpt.display(),
        ablation.label(),
        manifest.heldout.len()
    );
    println!("protocol          ssim   psnr     l1    akd  rect-l1  drv-l1");
    for protocol in [
        Protocol::SameScale,
        Protocol::DifferentScale,
        Protocol::CrossIdentity,
    ] {
        let pairs = build_testset(&TestsetSpec {
            protocol,
            pairs: 40,
            seed: manifest.seed,
            delta: 0.3,
            size: manifest.size,
            heldout: manifest.heldout.len(),
        })?;
        let outputs = evaluate_pairs(&model, ablation, &pairs, thread_count())?;
        let metrics: Vec<_> = outputs.into_iter().map(|o| o.metrics).collect();
        let a = Aggregate::of(&metrics);
        println!(
            "{:<15} {} {} {} {} {}  {}",
            protocol.name(),
            show(a.ssim),
            show(a.psnr),
            show(a.l1),
            show(a.akd),
            show(a.rectified_l1),
            show(a.driving_l1)
        );
    }
    Ok(())
}
