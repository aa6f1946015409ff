//! Self-check suites: gradient checks, spline exactness, augmentation
//! landmark mapping and brute-force oracle equivalence.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::data::{
    expression_preserved_augment, invert_augment, render_face, to_pixel, AugmentParams, Expression,
    FaceParams, FillMode, Identity, Pose,
};
use crate::geometry::{
    apply_tps_var, base_points, centroid_distance_vectors, gaussian_heatmaps_var, solve_tps,
    solve_tps_var, tps_grid_var, FiducialSet, TpsTransform, NUM_FIDUCIAL,
};
use crate::metrics;
use crate::model::{Model, ModelConfig};
use crate::motion::{combine_flows, soft_argmax, sparse_motions, spatial_softmax};
use crate::nn::Bound;
use crate::scale_transform::rectify;
use crate::tensor::gradcheck::{check, GradcheckOptions};
use crate::tensor::{identity_grid, lattice_coord, Result as TResult, Tape, Tensor, Var};
use crate::training::{
    blur_decimate, keypoint_distance_loss, objective, sample_batch_from_frames, PyramidLoss,
    TrainConfig,
};

/// Outcome of one suite.
#[derive(Clone, Debug, Serialize)]
pub struct SuiteReport {
    pub name: String,
    pub checks: usize,
    pub failures: Vec<String>,
    /// Largest observed error as a fraction of its tolerance; at most 1
    /// when every check passed.
    pub worst: f64,
    /// Gradient-check probes redrawn because their stencil crossed a branch
    /// of a piecewise operation.
    pub redrawn: usize,
}

impl SuiteReport {
    fn new(name: &str) -> Self {
        Self {
            name: name.to_string(),
            checks: 0,
            failures: Vec::new(),
            worst: 0.0,
            redrawn: 0,
        }
    }

    pub fn passed(&self) -> bool {
        self.checks > 0 && self.failures.is_empty()
    }

    /// Records one measured error; `what` names the failing case.
    fn record(&mut self, what: impl FnOnce() -> String, err: f64, tolerance: f64) {
        self.checks += 1;
        if err.is_nan() || err > tolerance {
            self.failures
                .push(format!("{}: error {err:.3e} > {tolerance:.1e}", what()));
        }
        let ratio = err / tolerance;
        if ratio.is_nan() || ratio > self.worst {
            self.worst = ratio;
        }
    }

    fn fail(&mut self, msg: String) {
        self.checks += 1;
        self.failures.push(msg);
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct VerifyReport {
    pub suites: Vec<SuiteReport>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.suites.iter().all(SuiteReport::passed)
    }

    pub fn failures(&self) -> Vec<String> {
        self.suites
            .iter()
            .flat_map(|s| s.failures.iter().map(move |f| format!("{}: {f}", s.name)))
            .collect()
    }

    /// One line per suite, then the failures.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for s in &self.suites {
            let _ = writeln!(
                out,
                "{:<6} {:<24} checks {:>5}  failures {:>3}  worst error/tolerance {:.3}{}",
                if s.passed() { "PASS" } else { "FAIL" },
                s.name,
                s.checks,
                s.failures.len(),
                s.worst,
                if s.redrawn > 0 {
                    format!("  redrawn probes {}", s.redrawn)
                } else {
                    String::new()
                }
            );
        }
        for f in self.failures() {
            let _ = writeln!(out, "  {f}");
        }
        out
    }
}

#[derive(Clone, Copy, Debug)]
pub struct VerifyOptions {
    /// Random trials per gradient-checked operation.
    pub trials: usize,
    pub seed: u64,
    /// `(α, β)` draws of the augmentation suite.
    pub augment_trials: usize,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self {
            trials: 20,
            seed: 0,
            augment_trials: 500,
        }
    }
}

pub fn run_all(opts: &VerifyOptions) -> VerifyReport {
    VerifyReport {
        suites: vec![
            gradcheck_suite(opts),
            composed_gradcheck_suite(opts),
            tps_suite(opts),
            augmentation_suite(opts),
            oracle_suite(opts),
            metrics_oracle_suite(opts),
        ],
    }
}

// ---------------------------------------------------------------- gradcheck

fn uniform<R: Rng>(rng: &mut R, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(lo..hi))
}

/// Values with magnitude in `[0.1, 1]` and random sign, away from kinks at 0.
fn away_from_zero<R: Rng>(rng: &mut R, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| {
        let m = rng.gen_range(0.1..1.0);
        if rng.gen_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// Scalar `Σ r·y` with fixed pseudo-random weights, so every output entry
/// carries a distinct upstream gradient.
fn project(tape: &mut Tape, y: Var) -> TResult<Var> {
    let shape = tape.shape(y).to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(shape.iter().product::<usize>() as u64);
    let r = tape.constant(uniform(&mut rng, &shape, -1.0, 1.0));
    let m = tape.mul(y, r)?;
    Ok(tape.sum(m))
}

type Inputs = fn(&mut ChaCha8Rng) -> Vec<Tensor>;
type Body = fn(&mut Tape, &[Var]) -> TResult<Var>;

/// Every differentiable operation with an input generator.
pub fn gradcheck_cases() -> Vec<(&'static str, Inputs, Body)> {
    fn base_jitter(rng: &mut ChaCha8Rng, n: usize, s: f64) -> Tensor {
        let base = base_points();
        Tensor::from_fn(vec![n, NUM_FIDUCIAL, 2], |i| {
            base[(i / 2) % NUM_FIDUCIAL][i % 2] + rng.gen_range(-s..s)
        })
    }
    vec![
        (
            "conv2d",
            |r| {
                vec![
                    uniform(r, &[2, 3, 5, 5], -1.0, 1.0),
                    uniform(r, &[4, 3, 3, 3], -1.0, 1.0),
                    uniform(r, &[4], -1.0, 1.0),
                ]
            },
            |t, v| {
                let y = t.conv2d(v[0], v[1], v[2], 1, 1)?;
                project(t, y)
            },
        ),
        (
            "conv2d_strided",
            |r| {
                vec![
                    uniform(r, &[1, 2, 6, 6], -1.0, 1.0),
                    uniform(r, &[3, 2, 3, 3], -1.0, 1.0),
                    uniform(r, &[3], -1.0, 1.0),
                ]
            },
            |t, v| {
                let y = t.conv2d(v[0], v[1], v[2], 2, 0)?;
                project(t, y)
            },
        ),
        (
            "avg_pool2",
            |r| vec![uniform(r, &[2, 2, 4, 6], -1.0, 1.0)],
            |t, v| {
                let y = t.avg_pool2(v[0])?;
                project(t, y)
            },
        ),
        (
            "upsample_bilinear2",
            |r| vec![uniform(r, &[1, 2, 3, 4], -1.0, 1.0)],
            |t, v| {
                let y = t.upsample_bilinear2(v[0])?;
                project(t, y)
            },
        ),
        (
            "add",
            |r| {
                vec![
                    uniform(r, &[3, 4], -1.0, 1.0),
                    uniform(r, &[3, 4], -1.0, 1.0),
                ]
            },
            |t, v| {
                let y = t.add(v[0], v[1])?;
                project(t, y)
            },
        ),
        (
            "sub",
            |r| {
                vec![
                    uniform(r, &[3, 4], -1.0, 1.0),
                    uniform(r, &[3, 4], -1.0, 1.0),
                ]
            },
            |t, v| {
                let y = t.sub(v[0], v[1])?;
                project(t, y)
            },
        ),
        (
            "mul",
            |r| {
                vec![
                    uniform(r, &[3, 4], -1.0, 1.0),
                    uniform(r, &[3, 4], -1.0, 1.0),
                ]
            },
            |t, v| {
                let y = t.mul(v[0], v[1])?;
                project(t, y)
            },
        ),
        (
            "scale",
            |r| vec![uniform(r, &[3, 4], -1.0, 1.0)],
            |t, v| {
                let y = t.scale(v[0], -1.7);
                project(t, y)
            },
        ),
        (
            "add_scalar",
            |r| vec![uniform(r, &[3, 4], -1.0, 1.0)],
            |t, v| {
                let y = t.add_scalar(v[0], 0.3);
                let y = t.mul(y, y)?;
                project(t, y)
            },
        ),
        (
            "abs",
            |r| vec![away_from_zero(r, &[3, 4])],
            |t, v| {
                let y = t.abs(v[0]);
                project(t, y)
            },
        ),
        (
            "relu",
            |r| vec![away_from_zero(r, &[3, 4])],
            |t, v| {
                let y = t.relu(v[0]);
                project(t, y)
            },
        ),
        (
            "leaky_relu",
            |r| vec![away_from_zero(r, &[3, 4])],
            |t, v| {
                let y = t.leaky_relu(v[0], 0.2);
                project(t, y)
            },
        ),
        (
            "sigmoid",
            |r| vec![uniform(r, &[3, 4], -3.0, 3.0)],
            |t, v| {
                let y = t.sigmoid(v[0]);
                project(t, y)
            },
        ),
        (
            "tanh",
            |r| vec![uniform(r, &[3, 4], -2.0, 2.0)],
            |t, v| {
                let y = t.tanh(v[0]);
                project(t, y)
            },
        ),
        (
            "exp",
            |r| vec![uniform(r, &[3, 4], -2.0, 2.0)],
            |t, v| {
                let y = t.exp(v[0]);
                project(t, y)
            },
        ),
        (
            "sum",
            |r| vec![uniform(r, &[3, 4], -1.0, 1.0)],
            |t, v| {
                let y = t.mul(v[0], v[0])?;
                Ok(t.sum(y))
            },
        ),
        (
            "mean",
            |r| vec![uniform(r, &[3, 4], -1.0, 1.0)],
            |t, v| {
                let y = t.mul(v[0], v[0])?;
                Ok(t.mean(y))
            },
        ),
        (
            "mean_abs_diff",
            |r| {
                let a = uniform(r, &[3, 4], -1.0, 1.0);
                let d = away_from_zero(r, &[3, 4]);
                let b = Tensor::from_fn(vec![3, 4], |i| a.data()[i] + d.data()[i]);
                vec![a, b]
            },
            |t, v| t.mean_abs_diff(v[0], v[1]),
        ),
        (
            "add_channelwise",
            |r| {
                vec![
                    uniform(r, &[2, 3, 2, 2], -1.0, 1.0),
                    uniform(r, &[2, 3], -1.0, 1.0),
                    uniform(r, &[3], -1.0, 1.0),
                ]
            },
            |t, v| {
                let y = t.add_channelwise(v[0], v[1])?;
                let y = t.add_channelwise(y, v[2])?;
                let y = t.mul(y, y)?;
                project(t, y)
            },
        ),
        (
            "linear",
            |r| {
                vec![
                    uniform(r, &[3, 5], -1.0, 1.0),
                    uniform(r, &[4, 5], -1.0, 1.0),
                    uniform(r, &[4], -1.0, 1.0),
                ]
            },
            |t, v| {
                let y = t.linear(v[0], v[1], v[2])?;
                project(t, y)
            },
        ),
        (
            "bmm",
            |r| {
                vec![
                    uniform(r, &[2, 3, 4], -1.0, 1.0),
                    uniform(r, &[2, 4, 5], -1.0, 1.0),
                ]
            },
            |t, v| {
                let y = t.bmm(v[0], v[1])?;
                project(t, y)
            },
        ),
        (
            "bmm_broadcast",
            |r| {
                vec![
                    uniform(r, &[1, 3, 4], -1.0, 1.0),
                    uniform(r, &[2, 4, 2], -1.0, 1.0),
                ]
            },
            |t, v| {
                let y = t.bmm(v[0], v[1])?;
                project(t, y)
            },
        ),
        (
            "instance_norm",
            |r| {
                vec![
                    uniform(r, &[2, 3, 4, 4], -1.0, 1.0),
                    uniform(r, &[3], 0.5, 1.5),
                    uniform(r, &[3], -1.0, 1.0),
                ]
            },
            |t, v| {
                let y = t.instance_norm(v[0], v[1], v[2])?;
                project(t, y)
            },
        ),
        (
            "softmax",
            |r| vec![uniform(r, &[2, 4, 3], -2.0, 2.0)],
            |t, v| {
                let y = t.softmax(v[0], 1)?;
                project(t, y)
            },
        ),
        (
            "reshape_permute",
            |r| vec![uniform(r, &[2, 3, 4], -1.0, 1.0)],
            |t, v| {
                let y = t.permute(v[0], &[2, 0, 1])?;
                let y = t.reshape(y, &[4, 6])?;
                let y = t.mul(y, y)?;
                project(t, y)
            },
        ),
        (
            "concat_narrow",
            |r| {
                vec![
                    uniform(r, &[2, 3], -1.0, 1.0),
                    uniform(r, &[2, 2], -1.0, 1.0),
                ]
            },
            |t, v| {
                let c = t.concat(&[v[0], v[1]], 1)?;
                let n = t.narrow(c, 1, 1, 3)?;
                let y = t.mul(n, n)?;
                project(t, y)
            },
        ),
        (
            "grid_sample",
            |r| {
                vec![
                    uniform(r, &[1, 2, 5, 5], -1.0, 1.0),
                    uniform(r, &[1, 3, 3, 2], -0.95, 0.95),
                ]
            },
            |t, v| {
                let y = t.grid_sample(v[0], v[1])?;
                project(t, y)
            },
        ),
        (
            "solve_tps",
            |r| vec![base_jitter(r, 2, 0.1)],
            |t, v| {
                let y = solve_tps_var(t, v[0])?;
                project(t, y)
            },
        ),
        (
            "tps_grid",
            |r| vec![uniform(r, &[1, NUM_FIDUCIAL + 3, 2], -0.2, 0.2)],
            |t, v| {
                let y = tps_grid_var(t, v[0], 5, 4)?;
                project(t, y)
            },
        ),
        (
            "apply_tps",
            |r| {
                vec![
                    uniform(r, &[2, NUM_FIDUCIAL + 3, 2], -0.2, 0.2),
                    uniform(r, &[2, 4, 2], -0.9, 0.9),
                ]
            },
            |t, v| {
                let y = apply_tps_var(t, v[0], v[1])?;
                project(t, y)
            },
        ),
        (
            "rectify",
            |r| vec![uniform(r, &[1, 3, 8, 8], 0.0, 1.0), base_jitter(r, 1, 0.08)],
            |t, v| {
                let y = rectify(t, v[0], v[1])?;
                project(t, y)
            },
        ),
        (
            "gaussian_heatmaps",
            |r| vec![uniform(r, &[1, 3, 2], -0.9, 0.9)],
            |t, v| {
                let y = gaussian_heatmaps_var(t, v[0], 0.3, 5, 5)?;
                project(t, y)
            },
        ),
        (
            "centroid_distance_vectors",
            |r| vec![uniform(r, &[2, 4, 2], -0.9, 0.9)],
            |t, v| {
                let y = centroid_distance_vectors(t, v[0])?;
                project(t, y)
            },
        ),
        (
            "soft_argmax",
            |r| vec![uniform(r, &[1, 2, 4, 4], -2.0, 2.0)],
            |t, v| {
                let h = spatial_softmax(t, v[0])?;
                let y = soft_argmax(t, h)?;
                project(t, y)
            },
        ),
        (
            "sparse_motions",
            |r| {
                vec![
                    uniform(r, &[1, 3, 2], -0.9, 0.9),
                    uniform(r, &[1, 3, 2], -0.9, 0.9),
                ]
            },
            |t, v| {
                let y = sparse_motions(t, v[0], v[1], 4, 4)?;
                project(t, y)
            },
        ),
        (
            "combine_flows",
            |r| {
                vec![
                    uniform(r, &[1, 3, 2, 2], 0.0, 1.0),
                    uniform(r, &[1, 3, 2, 2, 2], -1.0, 1.0),
                ]
            },
            |t, v| {
                let y = combine_flows(t, v[0], v[1])?;
                project(t, y)
            },
        ),
        (
            "blur_decimate",
            |r| vec![uniform(r, &[1, 2, 7, 7], -1.0, 1.0)],
            |t, v| {
                let y = blur_decimate(t, v[0])?;
                project(t, y)
            },
        ),
        (
            "pyramid_distance",
            |r| {
                let a = uniform(r, &[1, 3, 16, 16], 0.0, 1.0);
                let d = away_from_zero(r, &[1, 3, 16, 16]);
                let b = Tensor::from_fn(vec![1, 3, 16, 16], |i| a.data()[i] + 0.3 * d.data()[i]);
                vec![a, b]
            },
            |t, v| PyramidLoss::new(4, Some(7)).distance(t, v[0], v[1]),
        ),
        (
            "keypoint_distance_loss",
            |r| vec![uniform(r, &[2, 5, 2], -0.15, 0.15)],
            |t, v| keypoint_distance_loss(t, v[0], 0.1),
        ),
    ]
}

fn gradcheck_into(
    report: &mut SuiteReport,
    name: &str,
    trial: usize,
    inputs: &[Tensor],
    f: impl Fn(&mut Tape, &[Var]) -> TResult<Var>,
    opts: &GradcheckOptions,
) {
    match check(inputs, f, opts) {
        Ok(r) if r.checked == 0 => report.fail(format!(
            "{name} trial {trial}: no probe off a branch boundary"
        )),
        Ok(r) => {
            report.redrawn += r.skipped;
            report.record(
            || {
                let (i, e, a, n) = r.worst.unwrap_or_default();
                format!("{name} trial {trial} input {i} entry {e}: analytic {a:.6e} numeric {n:.6e}")
            },
            r.max_rel_err,
            opts.tolerance,
        )
        }
        Err(e) => report.fail(format!("{name} trial {trial}: {e}")),
    }
}

/// Central differences against every primitive, `opts.trials` random
/// draws each.
pub fn gradcheck_suite(opts: &VerifyOptions) -> SuiteReport {
    let g = GradcheckOptions::default();
    let mut report = SuiteReport::new("gradcheck primitives");
    for (ci, (name, inputs, body)) in gradcheck_cases().into_iter().enumerate() {
        for trial in 0..opts.trials {
            let seed = opts.seed ^ ((ci as u64) << 32) ^ trial as u64;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = inputs(&mut rng);
            gradcheck_into(
                &mut report,
                name,
                trial,
                &x,
                body,
                &GradcheckOptions { seed, ..g.clone() },
            );
        }
    }
    report
}

/// Miniature model with every parameter perturbed, so zero-initialized
/// paths carry gradient too.
pub fn perturbed_miniature(seed: u64) -> Model {
    let mut model = Model::new(ModelConfig::miniature(), seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    for t in model.store.tensors_mut() {
        for v in t.data_mut() {
            *v += rng.gen_range(-0.1..0.1);
        }
    }
    model
}

/// Gradient of the full training objective on a 16×16 miniature model.
pub fn composed_gradcheck_suite(opts: &VerifyOptions) -> SuiteReport {
    let g = GradcheckOptions {
        entries_per_input: 1,
        skip_branch_changes: true,
        ..GradcheckOptions::default()
    };
    let mut report = SuiteReport::new("gradcheck objective");
    let config = TrainConfig {
        model: ModelConfig::miniature(),
        batch: 2,
        ..TrainConfig::default()
    };
    let features = config.features();
    for trial in 0..opts.trials {
        let seed = opts.seed.wrapping_add(1000 + trial as u64);
        let model = perturbed_miniature(seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let size = config.model.image_size;
        let frames: Vec<Tensor> = (0..4)
            .map(|_| uniform(&mut rng, &[3, size, size], 0.0, 1.0))
            .collect();
        let batch = match sample_batch_from_frames(&mut rng, &frames, &config) {
            Ok(b) => b,
            Err(e) => {
                report.fail(format!("trial {trial}: {e}"));
                continue;
            }
        };
        let params: Vec<Tensor> = model.store.tensors().to_vec();
        gradcheck_into(
            &mut report,
            "objective",
            trial,
            &params,
            |tape, vars| {
                let p = Bound::from_vars(vars.to_vec());
                Ok(objective(tape, &p, &model, &batch, &config, &features)?.0)
            },
            &GradcheckOptions { seed, ..g.clone() },
        );
    }
    report
}

// --------------------------------------------------------------------- TPS

pub const TPS_TOLERANCE: f64 = 1e-9;
pub const TPS_IDENTITY_TOLERANCE: f64 = 1e-12;

/// Affine fiducials give zero radial weights and exact affine grids;
/// identity fiducials give the identity grid; every transform interpolates
/// its fiducials.
pub fn tps_suite(opts: &VerifyOptions) -> SuiteReport {
    let mut report = SuiteReport::new("tps exactness");
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x7b5);
    let (h, w) = (17, 13);

    let id = TpsTransform::identity();
    let grid = id.grid(h, w);
    report.record(
        || "identity grid".into(),
        grid.max_abs_diff(&identity_grid(1, h, w)),
        TPS_IDENTITY_TOLERANCE,
    );

    for trial in 0..opts.trials.max(1) {
        let a = [
            [
                rng.gen_range(0.6..1.4),
                rng.gen_range(-0.4..0.4),
                rng.gen_range(-0.3..0.3),
            ],
            [
                rng.gen_range(-0.4..0.4),
                rng.gen_range(0.6..1.4),
                rng.gen_range(-0.3..0.3),
            ],
        ];
        let map = |p: [f64; 2]| {
            [
                a[0][0] * p[0] + a[0][1] * p[1] + a[0][2],
                a[1][0] * p[0] + a[1][1] * p[1] + a[1][2],
            ]
        };
        let t = match solve_tps(&FiducialSet::map_base(map)) {
            Ok(t) => t,
            Err(e) => {
                report.fail(format!("affine trial {trial}: {e}"));
                continue;
            }
        };
        let radial = t
            .radial()
            .iter()
            .flat_map(|r| r.iter())
            .fold(0.0f64, |m, v| m.max(v.abs()));
        report.record(
            || format!("affine trial {trial} radial weights"),
            radial,
            TPS_TOLERANCE,
        );
        let grid = t.grid(h, w);
        let mut err = 0.0f64;
        for y in 0..h {
            for x in 0..w {
                let want = map([lattice_coord(x, w), lattice_coord(y, h)]);
                let i = (y * w + x) * 2;
                err = err
                    .max((grid.data()[i] - want[0]).abs())
                    .max((grid.data()[i + 1] - want[1]).abs());
            }
        }
        report.record(|| format!("affine trial {trial} grid"), err, TPS_TOLERANCE);

        let jittered: Vec<[f64; 2]> = base_points()
            .iter()
            .map(|p| {
                [
                    p[0] + rng.gen_range(-0.15..0.15),
                    p[1] + rng.gen_range(-0.15..0.15),
                ]
            })
            .collect();
        let t = solve_tps(&FiducialSet::new(jittered.clone()).unwrap()).unwrap();
        let mut err = 0.0f64;
        for (b, f) in base_points().iter().zip(&jittered) {
            let v = t.apply(*b);
            err = err.max((v[0] - f[0]).abs()).max((v[1] - f[1]).abs());
        }
        report.record(
            || format!("interpolation trial {trial}"),
            err,
            TPS_TOLERANCE,
        );
    }
    report
}

// ------------------------------------------------------------ augmentation

pub const AUGMENT_SIZE: usize = 64;
pub const LANDMARK_TOLERANCE_PX: f64 = 0.5;
pub const INVERSE_TOLERANCE: f64 = 3e-2;
/// Marker dot width used to measure where a landmark lands after warping.
const MARKER_SIGMA_PX: f64 = 1.5;
const MARKER_MARGIN_PX: f64 = 5.0;

fn random_face<R: Rng>(rng: &mut R) -> FaceParams {
    FaceParams {
        identity: Identity::sample(rng.gen()),
        pose: Pose {
            rotation: rng.gen_range(-0.3..0.3),
            translation: [rng.gen_range(-0.08..0.08), rng.gen_range(-0.08..0.08)],
        },
        expression: Expression {
            mouth_open: rng.gen_range(0.0..1.0),
            eye_open: rng.gen_range(0.2..1.0),
            brow_raise: rng.gen_range(0.0..1.0),
        },
        scale: rng.gen_range(0.8..1.2),
    }
}

/// Intensity centroid of a single-channel image.
fn centroid(img: &Tensor, size: usize) -> [f64; 2] {
    let (mut s, mut sx, mut sy) = (0.0, 0.0, 0.0);
    for y in 0..size {
        for x in 0..size {
            let v = img.data()[y * size + x];
            s += v;
            sx += v * x as f64;
            sy += v * y as f64;
        }
    }
    [sx / s, sy / s]
}

/// Landmarks mapped by the analytic forward map against the centroid of a
/// marker dot rendered at the landmark and pushed through the same
/// augmentation; the analytic inverse against the original frame.
pub fn augmentation_suite(opts: &VerifyOptions) -> SuiteReport {
    let mut report = SuiteReport::new("augmentation");
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0xa06);
    let n = AUGMENT_SIZE;
    let per_face = 10;
    let mut face = None;
    for trial in 0..opts.augment_trials {
        if trial % per_face == 0 {
            let p = random_face(&mut rng);
            face = match render_face(&p, n, n) {
                Ok(f) => Some(f),
                Err(e) => {
                    report.fail(format!("render {trial}: {e}"));
                    None
                }
            };
        }
        let Some((image, landmarks)) = &face else {
            continue;
        };
        let a = match AugmentParams::new(
            rng.gen_range(0.7..=1.3),
            rng.gen_range(0.7..=1.3),
            0.3,
            FillMode::Zero,
        ) {
            Ok(a) => a,
            Err(e) => {
                report.fail(format!("params {trial}: {e}"));
                continue;
            }
        };
        let aug = match expression_preserved_augment(image, landmarks, &a) {
            Ok(x) => x,
            Err(e) => {
                report.fail(format!("augment {trial}: {e}"));
                continue;
            }
        };
        for (li, l) in landmarks.iter().enumerate() {
            let px = [to_pixel(l[0], n), to_pixel(l[1], n)];
            let want = aug.geometry.forward_px(px);
            let inside = |p: [f64; 2]| {
                p.iter()
                    .all(|&c| c >= MARKER_MARGIN_PX && c <= n as f64 - 1.0 - MARKER_MARGIN_PX)
            };
            if !inside(px) || !inside(want) {
                continue;
            }
            let dot = Tensor::from_fn(vec![1, n, n], |i| {
                let (x, y) = ((i % n) as f64, (i / n) as f64);
                (-((x - px[0]).powi(2) + (y - px[1]).powi(2))
                    / (2.0 * MARKER_SIGMA_PX * MARKER_SIGMA_PX))
                    .exp()
            });
            let moved = match expression_preserved_augment(&dot, &[], &a) {
                Ok(m) => m.image,
                Err(e) => {
                    report.fail(format!("marker {trial}: {e}"));
                    continue;
                }
            };
            let got = centroid(&moved, n);
            let err = ((got[0] - want[0]).powi(2) + (got[1] - want[1]).powi(2)).sqrt();
            // analytic landmark list must agree with the geometry map too
            let listed = [
                to_pixel(aug.landmarks[li][0], n),
                to_pixel(aug.landmarks[li][1], n),
            ];
            let err =
                err.max(((listed[0] - want[0]).powi(2) + (listed[1] - want[1]).powi(2)).sqrt());
            report.record(
                || {
                    format!(
                        "trial {trial} alpha {:.3} beta {:.3} landmark {li}",
                        a.alpha, a.beta
                    )
                },
                err,
                LANDMARK_TOLERANCE_PX,
            );
        }
        let back = invert_augment(&aug.image, &aug.geometry);
        let (mut s, mut c) = (0.0, 0usize);
        for (v, o) in back.iter().zip(image.data()) {
            if let Some(v) = v {
                s += (v - o).abs();
                c += 1;
            }
        }
        let mae = if c == 0 { f64::NAN } else { s / c as f64 };
        report.record(
            || format!("trial {trial} inverse MAE"),
            mae,
            INVERSE_TOLERANCE,
        );
    }
    report
}

// ----------------------------------------------------------------- oracles

pub const ORACLE_TOLERANCE: f64 = 1e-12;

pub mod oracle {
    //! Direct loop implementations used as references.

    use crate::tensor::{lattice_coord, Tensor};

    pub fn conv2d(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize, pad: usize) -> Tensor {
        let (n, c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let (o, k) = (w.shape()[0], w.shape()[2]);
        let oh = (h + 2 * pad - k) / stride + 1;
        let ow = (wd + 2 * pad - k) / stride + 1;
        let mut out = vec![0.0; n * o * oh * ow];
        for b0 in 0..n {
            for oc in 0..o {
                for y in 0..oh {
                    for xx in 0..ow {
                        let mut s = b.data()[oc];
                        for ic in 0..c {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = (y * stride + ky) as isize - pad as isize;
                                    let ix = (xx * stride + kx) as isize - pad as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                        continue;
                                    }
                                    s += w.data()[((oc * c + ic) * k + ky) * k + kx]
                                        * x.data()
                                            [((b0 * c + ic) * h + iy as usize) * wd + ix as usize];
                                }
                            }
                        }
                        out[((b0 * o + oc) * oh + y) * ow + xx] = s;
                    }
                }
            }
        }
        Tensor::new(vec![n, o, oh, ow], out).unwrap()
    }

    pub fn avg_pool2(x: &Tensor) -> Tensor {
        let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let (oh, ow) = (h / 2, w / 2);
        Tensor::from_fn(vec![n, c, oh, ow], |i| {
            let (pl, y, xx) = (i / (oh * ow), (i / ow) % oh, i % ow);
            let at = |dy: usize, dx: usize| x.data()[pl * h * w + (2 * y + dy) * w + 2 * xx + dx];
            (at(0, 0) + at(0, 1) + at(1, 0) + at(1, 1)) / 4.0
        })
    }

    /// Align-corners bilinear doubling.
    pub fn upsample_bilinear2(x: &Tensor) -> Tensor {
        let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let (oh, ow) = (2 * h, 2 * w);
        let src = |o: usize, out_len: usize, in_len: usize| {
            if in_len == 1 {
                0.0
            } else {
                o as f64 * (in_len - 1) as f64 / (out_len - 1) as f64
            }
        };
        Tensor::from_fn(vec![n, c, oh, ow], |i| {
            let (pl, oy, ox) = (i / (oh * ow), (i / ow) % oh, i % ow);
            let (sy, sx) = (src(oy, oh, h), src(ox, ow, w));
            let (y0, x0) = (sy.floor() as usize, sx.floor() as usize);
            let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
            let (fy, fx) = (sy - y0 as f64, sx - x0 as f64);
            let at = |y: usize, xx: usize| x.data()[pl * h * w + y * w + xx];
            at(y0, x0) * (1.0 - fy) * (1.0 - fx)
                + at(y0, x1) * (1.0 - fy) * fx
                + at(y1, x0) * fy * (1.0 - fx)
                + at(y1, x1) * fy * fx
        })
    }

    /// `y = x·Wᵀ + b` with `W` as `[out, in]`.
    pub fn linear(x: &Tensor, w: &Tensor, b: &Tensor) -> Tensor {
        let (n, f) = (x.shape()[0], x.shape()[1]);
        let g = w.shape()[0];
        Tensor::from_fn(vec![n, g], |i| {
            let (r, o) = (i / g, i % g);
            b.data()[o]
                + (0..f)
                    .map(|j| x.data()[r * f + j] * w.data()[o * f + j])
                    .sum::<f64>()
        })
    }

    /// `exp(−‖p − x‖² / 2σ²)` on the normalized lattice.
    pub fn heatmaps(kps: &Tensor, sigma: f64, h: usize, w: usize) -> Tensor {
        let (n, k) = (kps.shape()[0], kps.shape()[1]);
        Tensor::from_fn(vec![n, k, h, w], |i| {
            let (nk, y, x) = (i / (h * w), (i / w) % h, i % w);
            let dx = lattice_coord(x, w) - kps.data()[nk * 2];
            let dy = lattice_coord(y, h) - kps.data()[nk * 2 + 1];
            (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp()
        })
    }

    /// Per-pixel mask-weighted sum of candidate flows.
    pub fn combine_flows(masks: &Tensor, cands: &Tensor) -> Tensor {
        let (n, k1, h, w) = (
            masks.shape()[0],
            masks.shape()[1],
            masks.shape()[2],
            masks.shape()[3],
        );
        let mut out = vec![0.0; n * h * w * 2];
        for b in 0..n {
            for y in 0..h {
                for x in 0..w {
                    for c in 0..2 {
                        let mut s = 0.0;
                        for k in 0..k1 {
                            let mi = ((b * k1 + k) * h + y) * w + x;
                            s += masks.data()[mi] * cands.data()[mi * 2 + c];
                        }
                        out[((b * h + y) * w + x) * 2 + c] = s;
                    }
                }
            }
        }
        Tensor::new(vec![n, h, w, 2], out).unwrap()
    }

    /// Align-corners bilinear sampling with border clamp.
    pub fn grid_sample(x: &Tensor, grid: &Tensor) -> Tensor {
        let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let (gh, gw) = (grid.shape()[1], grid.shape()[2]);
        Tensor::from_fn(vec![n, c, gh, gw], |i| {
            let (b, ch, y, xx) = (
                i / (c * gh * gw),
                (i / (gh * gw)) % c,
                (i / gw) % gh,
                i % gw,
            );
            let gi = ((b * gh + y) * gw + xx) * 2;
            let px = ((grid.data()[gi] + 1.0) * 0.5 * (w - 1) as f64).clamp(0.0, (w - 1) as f64);
            let py =
                ((grid.data()[gi + 1] + 1.0) * 0.5 * (h - 1) as f64).clamp(0.0, (h - 1) as f64);
            let (x0, y0) = (px.floor() as usize, py.floor() as usize);
            let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
            let (fx, fy) = (px - x0 as f64, py - y0 as f64);
            let at = |yy: usize, xq: usize| x.data()[((b * c + ch) * h + yy) * w + xq];
            at(y0, x0) * (1.0 - fy) * (1.0 - fx)
                + at(y0, x1) * (1.0 - fy) * fx
                + at(y1, x0) * fy * (1.0 - fx)
                + at(y1, x1) * fy * fx
        })
    }
}

fn forward(
    inputs: &[Tensor],
    f: impl FnOnce(&mut Tape, &[Var]) -> TResult<Var>,
) -> TResult<Tensor> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let y = f(&mut tape, &vars)?;
    Ok(tape.value(y).clone())
}

/// Tape operations against [`oracle`] loops.
pub fn oracle_suite(opts: &VerifyOptions) -> SuiteReport {
    let mut report = SuiteReport::new("oracle equivalence");
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x0ac1e);
    for trial in 0..opts.trials {
        let mut cmp = |name: &str, got: TResult<Tensor>, want: Tensor| match got {
            Ok(g) if g.shape() == want.shape() => report.record(
                || format!("{name} trial {trial}"),
                g.max_abs_diff(&want),
                ORACLE_TOLERANCE,
            ),
            Ok(g) => report.fail(format!(
                "{name} trial {trial}: shape {:?} vs {:?}",
                g.shape(),
                want.shape()
            )),
            Err(e) => report.fail(format!("{name} trial {trial}: {e}")),
        };
        let (stride, pad) = [(1, 1), (2, 0), (1, 0), (2, 1)][trial % 4];
        let x = uniform(&mut rng, &[2, 3, 7, 6], -1.0, 1.0);
        let w = uniform(&mut rng, &[4, 3, 3, 3], -1.0, 1.0);
        let b = uniform(&mut rng, &[4], -1.0, 1.0);
        let got = forward(&[x.clone(), w.clone(), b.clone()], |t, v| {
            t.conv2d(v[0], v[1], v[2], stride, pad)
        });
        cmp("conv2d", got, oracle::conv2d(&x, &w, &b, stride, pad));

        let x = uniform(&mut rng, &[2, 3, 6, 8], -1.0, 1.0);
        cmp(
            "avg_pool2",
            forward(&[x.clone()], |t, v| t.avg_pool2(v[0])),
            oracle::avg_pool2(&x),
        );
        let x = uniform(&mut rng, &[1, 2, 3 + trial % 3, 4], -1.0, 1.0);
        cmp(
            "upsample_bilinear2",
            forward(&[x.clone()], |t, v| t.upsample_bilinear2(v[0])),
            oracle::upsample_bilinear2(&x),
        );

        let (x, w, b) = (
            uniform(&mut rng, &[5, 7], -1.0, 1.0),
            uniform(&mut rng, &[3, 7], -1.0, 1.0),
            uniform(&mut rng, &[3], -1.0, 1.0),
        );
        cmp(
            "linear",
            forward(&[x.clone(), w.clone(), b.clone()], |t, v| {
                t.linear(v[0], v[1], v[2])
            }),
            oracle::linear(&x, &w, &b),
        );

        let kps = uniform(&mut rng, &[2, 4, 2], -1.0, 1.0);
        cmp(
            "gaussian_heatmaps",
            forward(&[kps.clone()], |t, v| {
                gaussian_heatmaps_var(t, v[0], 0.1, 9, 7)
            }),
            oracle::heatmaps(&kps, 0.1, 9, 7),
        );

        let masks = uniform(&mut rng, &[2, 4, 3, 5], 0.0, 1.0);
        let cands = uniform(&mut rng, &[2, 4, 3, 5, 2], -1.5, 1.5);
        cmp(
            "combine_flows",
            forward(&[masks.clone(), cands.clone()], |t, v| {
                combine_flows(t, v[0], v[1])
            }),
            oracle::combine_flows(&masks, &cands),
        );

        let x = uniform(&mut rng, &[2, 3, 5, 6], -1.0, 1.0);
        let grid = uniform(&mut rng, &[2, 4, 3, 2], -1.3, 1.3);
        cmp(
            "grid_sample",
            forward(&[x.clone(), grid.clone()], |t, v| t.grid_sample(v[0], v[1])),
            oracle::grid_sample(&x, &grid),
        );
    }
    report
}

pub mod metric_oracle {
    //! Straightforward reimplementations of the image metrics.

    use crate::tensor::Tensor;

    fn gray(t: &Tensor) -> (Vec<f64>, usize, usize) {
        let s = t.shape();
        let (c, h, w) = (s[s.len() - 3], s[s.len() - 2], s[s.len() - 1]);
        let g = (0..h * w)
            .map(|p| (0..c).map(|ch| t.data()[ch * h * w + p]).sum::<f64>() / c as f64)
            .collect();
        (g, h, w)
    }

    /// Direct 2-D window evaluation of mean SSIM.
    pub fn ssim(a: &Tensor, b: &Tensor) -> f64 {
        let (ga, h, w) = gray(a);
        let (gb, _, _) = gray(b);
        let win = 11usize;
        let sigma: f64 = 1.5;
        let mut k = vec![0.0; win * win];
        for y in 0..win {
            for x in 0..win {
                let (dy, dx) = (y as f64 - 5.0, x as f64 - 5.0);
                k[y * win + x] = (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp();
            }
        }
        let ks: f64 = k.iter().sum();
        k.iter_mut().for_each(|v| *v /= ks);
        let (c1, c2) = (1e-4, 9e-4);
        let mut total = 0.0;
        let mut count = 0;
        for y0 in 0..=h - win {
            for x0 in 0..=w - win {
                let (mut ma, mut mb) = (0.0, 0.0);
                for y in 0..win {
                    for x in 0..win {
                        let i = (y0 + y) * w + x0 + x;
                        ma += k[y * win + x] * ga[i];
                        mb += k[y * win + x] * gb[i];
                    }
                }
                let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
                for y in 0..win {
                    for x in 0..win {
                        let i = (y0 + y) * w + x0 + x;
                        let kv = k[y * win + x];
                        va += kv * (ga[i] - ma) * (ga[i] - ma);
                        vb += kv * (gb[i] - mb) * (gb[i] - mb);
                        cov += kv * (ga[i] - ma) * (gb[i] - mb);
                    }
                }
                total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                    / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                count += 1;
            }
        }
        total / count as f64
    }

    pub fn psnr(a: &Tensor, b: &Tensor) -> f64 {
        let mut s = 0.0;
        for i in 0..a.numel() {
            s += (a.data()[i] - b.data()[i]).powi(2);
        }
        let mse = s / a.numel() as f64;
        if mse == 0.0 {
            100.0
        } else {
            (-10.0 * mse.log10()).min(100.0)
        }
    }

    pub fn l1(a: &Tensor, b: &Tensor) -> f64 {
        let mut s = 0.0;
        for i in 0..a.numel() {
            s += (a.data()[i] - b.data()[i]).abs();
        }
        s / a.numel() as f64
    }

    pub fn akd(a: &[[f64; 2]], b: &[[f64; 2]]) -> f64 {
        let mut s = 0.0;
        for i in 0..a.len() {
            s += (a[i][0] - b[i][0]).hypot(a[i][1] - b[i][1]);
        }
        s / a.len() as f64
    }
}

pub const SSIM_ORACLE_TOLERANCE: f64 = 1e-6;
pub const METRIC_ORACLE_TOLERANCE: f64 = 1e-9;

/// Metrics against [`metric_oracle`].
pub fn metrics_oracle_suite(opts: &VerifyOptions) -> SuiteReport {
    let mut report = SuiteReport::new("metric oracles");
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x3e7);
    for trial in 0..opts.trials {
        let a = uniform(&mut rng, &[3, 24, 20], 0.0, 1.0);
        let b = Tensor::from_fn(vec![3, 24, 20], |i| {
            (a.data()[i] + rng.gen_range(-0.2..0.2)).clamp(0.0, 1.0)
        });
        match metrics::ssim(&a, &b) {
            Ok(s) => report.record(
                || format!("ssim trial {trial}"),
                (s - metric_oracle::ssim(&a, &b)).abs(),
                SSIM_ORACLE_TOLERANCE,
            ),
            Err(e) => report.fail(format!("ssim trial {trial}: {e}")),
        }
        match metrics::psnr(&a, &b) {
            Ok(s) => report.record(
                || format!("psnr trial {trial}"),
                (s - metric_oracle::psnr(&a, &b)).abs(),
                METRIC_ORACLE_TOLERANCE,
            ),
            Err(e) => report.fail(format!("psnr trial {trial}: {e}")),
        }
        match metrics::l1_distance(&a, &b) {
            Ok(s) => report.record(
                || format!("l1 trial {trial}"),
                (s - metric_oracle::l1(&a, &b)).abs(),
                METRIC_ORACLE_TOLERANCE,
            ),
            Err(e) => report.fail(format!("l1 trial {trial}: {e}")),
        }
        let p: Vec<[f64; 2]> = (0..10)
            .map(|_| [rng.gen_range(0.0..64.0), rng.gen_range(0.0..64.0)])
            .collect();
        let q: Vec<[f64; 2]> = (0..10)
            .map(|_| [rng.gen_range(0.0..64.0), rng.gen_range(0.0..64.0)])
            .collect();
        match metrics::akd(&p, &q) {
            Ok(s) => report.record(
                || format!("akd trial {trial}"),
                (s - metric_oracle::akd(&p, &q)).abs(),
                METRIC_ORACLE_TOLERANCE,
            ),
            Err(e) => report.fail(format!("akd trial {trial}: {e}")),
        }
    }
    report
}
