//! Keypoint detection and the centroid distance vectors that encode facial
//! scale. Loads a trained checkpoint if one is given, else uses fresh
//! parameters.
//!
//! ```text
//! cargo run --release --example keypoints -- [checkpoint.ostn]
//! ```

use ostnet::data::{render_face, video_params};
use ostnet::eval::min_pair_l1;
use ostnet::geometry::KeypointSet;
use ostnet::model::{Model, ModelConfig};
use ostnet::motion::detect_keypoints;
use ostnet::tensor::{Tape, Tensor};
use ostnet::training::{Checkpoint, Trainer};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let model = match std::env::args().nth(1) {
        Some(path) => Trainer::from_checkpoint(Checkpoint::load(path.as_ref())?)?.model,
        None => Model::new(ModelConfig::desk(), 0),
    };
    let size = model.config.image_size;

    // one identity at two facial scales
    let base = video_params(21, 2, 21).remove(0);
    let mut faces = Vec::new();
    for scale in [0.8, 1.2] {
        let mut p = base.clone();
        p.scale = scale;
        faces.push(render_face(&p, size, size)?.0);
    }
    let batch = Tensor::new(
        vec![2, 3, size, size],
        faces.iter().flat_map(|f| f.data().to_vec()).collect(),
    )?;

    let mut tape = Tape::new();
    let p = model.store.bind(&mut tape);
    let x = tape.constant(batch);
    let kp = detect_keypoints(&mut tape, &p, &model.detector, x)?;
    let sets = KeypointSet::from_batch(tape.value(kp));

    for (scale, set) in [0.8, 1.2].iter().zip(&sets) {
        let d = set.distance_vectors();
        let spread = d.iter().map(|v| v[0].hypot(v[1])).sum::<f64>() / d.len() as f64;
        let flat: Vec<f64> = set.points().iter().flatten().copied().collect();
        println!(
            "scale {scale}: centroid ({:+.3}, {:+.3}), mean |distance vector| {spread:.4}, min pair L1 {:.4}",
            set.centroid()[0],
            set.centroid()[1],
            min_pair_l1(&flat)
        );
        for (k, q) in set.points().iter().enumerate().take(5) {
            println!("  k{k:02}: ({:+.3}, {:+.3})", q[0], q[1]);
        }
    }
    Ok(())
}
