//! Animates one face with the motion of another identity's video and writes
//! `[rectified | generated]` panels per frame.
//!
//! ```text
//! cargo run --release --example reenact -- [checkpoint.ostn] [out-dir]
//! ```

use std::path::PathBuf;

use ostnet::data::{ppm, render_face, sample_video, video_params};
use ostnet::eval::run_pair;
use ostnet::model::{Ablation, Model, ModelConfig};
use ostnet::tensor::Tensor;
use ostnet::training::{Checkpoint, Trainer};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1).map(PathBuf::from);
    let (model, ablation) = match args.next() {
        Some(path) => {
            let c = Checkpoint::load(&path)?;
            let ablation = c.config.ablation;
            (Trainer::from_checkpoint(c)?.model, ablation)
        }
        None => (Model::new(ModelConfig::desk(), 0), Ablation::FULL),
    };
    let out = args
        .next()
        .unwrap_or_else(|| std::env::temp_dir().join("ostnet-reenact"));
    std::fs::create_dir_all(&out)?;
    let size = model.config.image_size;

    // a small source face driven by a larger face of another identity
    let mut src = video_params(100, 2, 100).remove(0);
    src.scale = 0.8;
    let (source, _) = render_face(&src, size, size)?;
    let driving = sample_video(200, 6, 201, size)?;

    for (i, frame) in driving.iter().enumerate() {
        let (generated, rectified) = run_pair(&model, ablation, &source, &frame.image)?;
        let panel = Tensor::from_fn(vec![3, size, 2 * size], |j| {
            let (c, rest) = (j / (2 * size * size), j % (2 * size * size));
            let (y, x) = (rest / (2 * size), rest % (2 * size));
            let img = if x < size { &rectified } else { &generated };
            img.data()[(c * size + y) * size + x % size]
        });
        ppm::save(&out.join(format!("panel_{i:04}.ppm")), &panel)?;
        println!(
            "frame {i}: driving scale {:.3}, rectified == driving: {}",
            frame.params.scale,
            rectified.data() == frame.image.data()
        );
    }
    println!("panels in {}", out.display());
    Ok(())
}
