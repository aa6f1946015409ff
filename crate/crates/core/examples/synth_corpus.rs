//! Synthesizes a small face-video corpus, reloads it and writes a contact
//! sheet of the first frame of every training video.
//!
//! ```text
//! cargo run --release --example synth_corpus -- /tmp/corpus
//! ```

use std::path::PathBuf;

use ostnet::data::{load_corpus, ppm, synthesize_corpus, CorpusSpec};
use ostnet::tensor::Tensor;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let out = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("ostnet-corpus"));
    let spec = CorpusSpec {
        seed: 7,
        videos: 6,
        frames: 8,
        heldout: 4,
        size: 64,
    };
    let manifest = synthesize_corpus(&spec, &out)?;
    println!(
        "{}: {} training videos, {} held-out identities, {} frames each at {4}x{4}",
        out.display(),
        manifest.train.len(),
        manifest.heldout.len(),
        manifest.frames_per_video,
        manifest.size,
    );

    let corpus = load_corpus(&out)?;
    for v in &corpus.train {
        let scales: Vec<f64> = v.meta.frames.iter().map(|f| f.params.scale).collect();
        let lo = scales.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = scales.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        println!(
            "  {}: scale {lo:.3}..{hi:.3}, first nose tip at ({:.1}, {:.1}) px",
            v.name, v.meta.frames[0].landmarks_px[3][0], v.meta.frames[0].landmarks_px[3][1]
        );
    }

    // one row: first frame of each video side by side
    let s = corpus.size();
    let n = corpus.train.len();
    let frames: Vec<Tensor> = (0..n).map(|v| corpus.train_frame(v, 0)).collect();
    let sheet = Tensor::from_fn(vec![3, s, s * n], |i| {
        let (c, rest) = (i / (s * s * n), i % (s * s * n));
        let (y, x) = (rest / (s * n), rest % (s * n));
        frames[x / s].data()[(c * s + y) * s + x % s]
    });
    let path = out.join("contact_sheet.ppm");
    ppm::save(&path, &sheet)?;
    println!("contact sheet: {}", path.display());
    Ok(())
}
