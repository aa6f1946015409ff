//! Expression-preserved augmentation: squeezes a rendered face to a new
//! facial scale, maps its landmarks analytically and inverts the warp.
//!
//! ```text
//! cargo run --release --example augment -- 0.8 1.2
//! ```

use ostnet::data::{
    expression_preserved_augment, invert_augment, landmarks_to_pixels, ppm, render_face,
    video_params, AugmentParams, FillMode,
};
use ostnet::tensor::Tensor;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1).map(|a| a.parse::<f64>());
    let alpha = args.next().transpose()?.unwrap_or(0.8);
    let beta = args.next().transpose()?.unwrap_or(1.2);
    let size = 64;

    let params = video_params(3, 2, 3).remove(0);
    let (face, landmarks) = render_face(&params, size, size)?;
    let a = AugmentParams::new(alpha, beta, 0.3, FillMode::Replicate)?;
    let aug = expression_preserved_augment(&face, &landmarks, &a)?;
    let g = &aug.geometry;
    println!("alpha {alpha} beta {beta}: content {}x{} px", g.hd, g.wd);

    // landmarks follow the squeeze analytically, no re-detection needed
    let before = landmarks_to_pixels(&landmarks, size, size);
    let after = landmarks_to_pixels(&aug.landmarks, size, size);
    for (i, (p, q)) in before.iter().zip(&after).enumerate().take(4) {
        println!(
            "  landmark {i}: ({:5.1}, {:5.1}) -> ({:5.1}, {:5.1})",
            p[0], p[1], q[0], q[1]
        );
    }

    let back = invert_augment(&aug.image, g);
    let (mut err, mut n) = (0.0, 0);
    for (r, o) in back.iter().zip(face.data()) {
        if let Some(r) = r {
            err += (r - o).abs();
            n += 1;
        }
    }
    println!(
        "inverse: MAE {:.4} over {n} recoverable samples",
        err / n as f64
    );

    let dir = std::env::temp_dir();
    let panel = Tensor::from_fn(vec![3, size, 2 * size], |i| {
        let (c, rest) = (i / (2 * size * size), i % (2 * size * size));
        let (y, x) = (rest / (2 * size), rest % (2 * size));
        let src = if x < size { &face } else { &aug.image };
        src.data()[(c * size + y) * size + x % size]
    });
    let path = dir.join("augment_panel.ppm");
    ppm::save(&path, &panel)?;
    println!("original | augmented: {}", path.display());
    Ok(())
}
