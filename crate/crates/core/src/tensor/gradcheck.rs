//! Central finite-difference checks of tape gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Result, Tape, Tensor, Var};

/// Gradients smaller than this (times `max(1, |f|)`) are compared on an
/// absolute scale: rounding in `f(x ± h)` grows with `|f|`, so near-zero
/// gradients of a large objective are resolved no finer than that.
pub const REL_FLOOR: f64 = 1e-5;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    relative_error_at(analytic, numeric, 0.0)
}

/// [`relative_error`] for a function whose value at the probe is `value`.
pub fn relative_error_at(analytic: f64, numeric: f64, value: f64) -> f64 {
    let floor = REL_FLOOR * value.abs().max(1.0);
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

#[derive(Clone, Debug)]
pub struct GradcheckOptions {
    pub step: f64,
    pub tolerance: f64,
    /// Entries probed per input tensor; all entries when the tensor is smaller.
    pub entries_per_input: usize,
    pub seed: u64,
    /// Redraw an entry whose stencil `x ± h` takes a different branch of some
    /// piecewise operation than `x` does; central differences say nothing
    /// about the derivative there.
    pub skip_branch_changes: bool,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tolerance: 1e-4,
            entries_per_input: 8,
            seed: 0,
            skip_branch_changes: false,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradcheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
    /// (input index, flat entry, analytic, numeric) of the worst entry.
    pub worst: Option<(usize, usize, f64, f64)>,
    pub tolerance: f64,
    /// Entries redrawn because their stencil crossed a branch.
    pub skipped: usize,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.checked > 0 && self.max_rel_err <= self.tolerance
    }

    pub fn merge(&mut self, other: &GradcheckReport) {
        self.checked += other.checked;
        self.skipped += other.skipped;
        if other.max_rel_err > self.max_rel_err {
            self.max_rel_err = other.max_rel_err;
            self.worst = other.worst;
        }
    }

    pub fn empty(tolerance: f64) -> Self {
        Self {
            checked: 0,
            max_rel_err: 0.0,
            worst: None,
            tolerance,
            skipped: 0,
        }
    }
}

// value and branch signature
fn evaluate<F>(inputs: &[Tensor], f: &F) -> Result<(f64, u64)>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    Ok((tape.value(loss).item(), tape.branch_signature()))
}

/// Analytic gradients of the scalar `f(inputs)` for every input.
pub fn analytic_gradients<F>(inputs: &[Tensor], f: &F) -> Result<Vec<Tensor>>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    tape.backward(loss)?;
    Ok(vars.iter().map(|&v| tape.grad_or_zeros(v)).collect())
}

/// Redraws allowed per probed entry before giving up on it.
const MAX_REDRAWS: usize = 64;

/// Compares analytic gradients of `f` against central differences at a
/// random subset of entries of every input.
pub fn check<F>(inputs: &[Tensor], f: F, opts: &GradcheckOptions) -> Result<GradcheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let analytic = analytic_gradients(inputs, &f)?;
    let (value, signature) = evaluate(inputs, &f)?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = GradcheckReport::empty(opts.tolerance);
    let mut probe = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        let n = input.numel();
        let exhaustive = n <= opts.entries_per_input;
        let wanted = if exhaustive {
            n
        } else {
            opts.entries_per_input
        };
        let mut next = 0;
        let mut draws = 0;
        while next < wanted && draws < wanted * MAX_REDRAWS {
            draws += 1;
            let e = if exhaustive {
                next
            } else {
                rng.gen_range(0..n)
            };
            let orig = input.data()[e];
            probe[i].data_mut()[e] = orig + opts.step;
            let (plus, sp) = evaluate(&probe, &f)?;
            probe[i].data_mut()[e] = orig - opts.step;
            let (minus, sm) = evaluate(&probe, &f)?;
            probe[i].data_mut()[e] = orig;
            if opts.skip_branch_changes && (sp != signature || sm != signature) {
                report.skipped += 1;
                if exhaustive {
                    next += 1;
                }
                continue;
            }
            next += 1;
            let numeric = (plus - minus) / (2.0 * opts.step);
            let a = analytic[i].data()[e];
            let err = relative_error_at(a, numeric, value);
            report.checked += 1;
            if err > report.max_rel_err || report.worst.is_none() {
                report.max_rel_err = report.max_rel_err.max(err);
                report.worst = Some((i, e, a, numeric));
            }
        }
    }
    Ok(report)
}
