//! Thin-plate-spline rectification: builds warps from fiducial points,
//! checks the affine and interpolation properties and warps a face.
//!
//! ```text
//! cargo run --release --example tps_rectify
//! ```

use ostnet::data::{ppm, render_face, video_params};
use ostnet::geometry::{base_points, solve_tps, FiducialSet};
use ostnet::tensor::Tape;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let identity = solve_tps(&FiducialSet::base())?;
    let max_radial = |t: &ostnet::geometry::TpsTransform| {
        t.radial()
            .iter()
            .flatten()
            .fold(0.0f64, |m, v| m.max(v.abs()))
    };
    println!(
        "identity fiducials: max radial weight {:.1e}",
        max_radial(&identity)
    );

    // horizontal stretch about the center: an affine map, so no bending
    let stretch = solve_tps(&FiducialSet::map_base(|[x, y]| [0.8 * x, y]))?;
    println!(
        "stretch fiducials: max radial weight {:.1e}, affine {:?}",
        max_radial(&stretch),
        stretch.affine()
    );

    // a bent configuration still hits every control point
    let bent = FiducialSet::map_base(|[x, y]| [x + 0.05 * (3.0 * y).sin(), y - 0.04 * x * x]);
    let t = solve_tps(&bent)?;
    let worst = base_points()
        .iter()
        .zip(bent.points())
        .map(|(&b, c)| {
            let p = t.apply(b);
            (p[0] - c[0]).abs().max((p[1] - c[1]).abs())
        })
        .fold(0.0f64, f64::max);
    println!("bent fiducials: max interpolation error {worst:.1e}");

    // warp a face with each transform (backward sampling)
    let size = 64;
    let (face, _) = render_face(&video_params(11, 2, 11).remove(0), size, size)?;
    let dir = std::env::temp_dir();
    for (name, tr) in [("identity", &identity), ("stretch", &stretch), ("bent", &t)] {
        let mut tape = Tape::new();
        let x = tape.constant(face.clone().reshaped(vec![1, 3, size, size])?);
        let grid = tape.constant(tr.grid(size, size));
        let y = tape.grid_sample(x, grid)?;
        let out = tape.value(y).clone().reshaped(vec![3, size, size])?;
        let diff = out
            .data()
            .iter()
            .zip(face.data())
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
            / face.data().len() as f64;
        let path = dir.join(format!("tps_{name}.ppm"));
        ppm::save(&path, &out)?;
        println!("{name}: mean change {diff:.4}, saved {}", path.display());
    }
    Ok(())
}
