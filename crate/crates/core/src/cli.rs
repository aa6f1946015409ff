//! Command-line entry points: `synth | train | eval | reenact | verify`.
//!
//! Exit codes:
//!
//! | code | meaning |
//! |------|---------|
//! | 0 | success |
//! | 1 | verification failure or other runtime error |
//! | 2 | bad arguments or unusable output path |
//! | 3 | corrupt or missing corpus |
//! | 4 | non-finite loss (a diagnostic checkpoint is written) |
//! | 5 | unreadable checkpoint or one that does not fit the model |
//! | 6 | missing input frames |

use std::ffi::OsString;
use std::fs;
use std::io::{self, BufRead, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::data::{
    build_testset, load_corpus, ppm, read_manifest, synthesize_corpus, CorpusSpec, DataError,
    Protocol, TestsetSpec, DEFAULT_DELTA, DEFAULT_HELDOUT,
};
use crate::eval::{evaluate_pairs, run_pair, thread_count};
use crate::model::{Ablation, Model};
use crate::tensor::Tensor;
use crate::training::{
    run, Checkpoint, CheckpointError, LogRecord, TrainConfig, TrainError, TrainSinks, Trainer,
};
use crate::verify::{run_all, VerifyOptions};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_CORPUS: i32 = 3;
pub const EXIT_NON_FINITE: i32 = 4;
pub const EXIT_CHECKPOINT: i32 = 5;
pub const EXIT_MISSING_FRAMES: i32 = 6;

pub const CHECKPOINT_FILE: &str = "checkpoint.ostn";
pub const DIAGNOSTIC_FILE: &str = "diagnostic.ostn";
pub const LOG_FILE: &str = "train.jsonl";
pub const REPORT_FILE: &str = "report.json";
pub const PAIRS_DIR: &str = "pairs";

#[derive(Debug, thiserror::Error)]
#[error("{message}")]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    pub fn new(code: i32, message: impl Into<String>) -> Self {
        Self {
            code,
            message: message.into(),
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(
    name = "ostnet",
    version,
    about = "Scale-aware talking-head reenactment"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render the synthetic face corpus.
    Synth(SynthArgs),
    /// Train a model on a corpus.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a test protocol.
    Eval(EvalArgs),
    /// Drive one source image with a directory of frames.
    Reenact(ReenactArgs),
    /// Run the gradient, geometry and oracle suites.
    Verify(VerifyArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    /// Training identities, one video each.
    #[arg(long, default_value_t = 100)]
    pub videos: usize,
    #[arg(long, default_value_t = 20)]
    pub frames: usize,
    /// Held-out identities.
    #[arg(long, default_value_t = DEFAULT_HELDOUT)]
    pub heldout: usize,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    /// Directory receiving the checkpoint and the log.
    #[arg(long)]
    pub out: PathBuf,
    /// JSON training config supplying defaults; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Continue from the checkpoint in `--out`.
    #[arg(long)]
    pub resume: bool,
    /// Total iterations to reach.
    #[arg(long)]
    pub iters: Option<u64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Frame size; must match the corpus.
    #[arg(long)]
    pub size: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub delta: Option<f64>,
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long)]
    pub checkpoint_every: Option<u64>,
    /// Disable the scale transformation.
    #[arg(long)]
    pub no_st: bool,
    /// Disable the scale embedding.
    #[arg(long)]
    pub no_se: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Corpus whose held-out identities supply the test pairs.
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value = "different-scale")]
    pub protocol: Protocol,
    #[arg(long, default_value_t = 200)]
    pub pairs: usize,
    #[arg(long, default_value_t = DEFAULT_DELTA)]
    pub delta: f64,
    /// Test-set seed; defaults to the corpus seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Must match the corpus if given.
    #[arg(long)]
    pub size: Option<usize>,
    #[arg(long)]
    pub no_st: bool,
    #[arg(long)]
    pub no_se: bool,
    /// Skip the per-pair image dumps.
    #[arg(long)]
    pub no_dump: bool,
}

#[derive(Debug, Args)]
pub struct ReenactArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Source image (PPM).
    #[arg(long)]
    pub source: PathBuf,
    /// Directory of driving frames (PPM, processed in name order).
    #[arg(long)]
    pub driving: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub no_st: bool,
    #[arg(long)]
    pub no_se: bool,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 20)]
    pub trials: usize,
    #[arg(long, default_value_t = 500)]
    pub augment_trials: usize,
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code. Messages go to stderr, reports to stdout.
pub fn run_from<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match execute(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {}", e.message);
            e.code
        }
    }
}

pub fn execute(command: Command) -> Result<()> {
    match command {
        Command::Synth(a) => cmd_synth(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Reenact(a) => cmd_reenact(&a),
        Command::Verify(a) => cmd_verify(&a),
    }
}

/// Creates `dir` and checks that a file can be written inside it.
pub fn prepare_out_dir(dir: &Path) -> Result<()> {
    let unusable = |e: io::Error| {
        CliError::new(
            EXIT_USAGE,
            format!("output directory {} unusable: {e}", dir.display()),
        )
    };
    fs::create_dir_all(dir).map_err(unusable)?;
    let probe = dir.join(".ostnet-write-probe");
    fs::write(&probe, b"").map_err(unusable)?;
    fs::remove_file(&probe).map_err(unusable)
}

fn corpus_error(e: DataError) -> CliError {
    CliError::new(EXIT_CORPUS, e.to_string())
}

fn checkpoint_error(path: &Path, e: CheckpointError) -> CliError {
    CliError::new(EXIT_CHECKPOINT, format!("{}: {e}", path.display()))
}

fn write_error(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::new(EXIT_USAGE, format!("cannot write {}: {e}", path.display()))
}

fn ablation_from(base: Ablation, no_st: bool, no_se: bool) -> Ablation {
    Ablation {
        scale_transform: base.scale_transform && !no_st,
        scale_embedding: base.scale_embedding && !no_se,
    }
}

pub fn cmd_synth(a: &SynthArgs) -> Result<()> {
    if a.size < 32 {
        return Err(CliError::new(
            EXIT_USAGE,
            format!("frames must be at least 32 pixels, got {}", a.size),
        ));
    }
    prepare_out_dir(&a.out)?;
    let spec = CorpusSpec {
        seed: a.seed,
        videos: a.videos,
        frames: a.frames,
        heldout: a.heldout,
        size: a.size,
    };
    let manifest = synthesize_corpus(&spec, &a.out).map_err(|e| match e {
        DataError::Io { .. } => CliError::new(EXIT_USAGE, e.to_string()),
        other => CliError::new(EXIT_FAILURE, other.to_string()),
    })?;
    println!(
        "wrote {} training and {} held-out videos of {} frames ({}x{}) to {}",
        manifest.train.len(),
        manifest.heldout.len(),
        manifest.frames_per_video,
        manifest.size,
        manifest.size,
        a.out.display()
    );
    Ok(())
}

/// The training config a fresh `train` run would use, before the corpus
/// size is applied.
pub fn train_config(a: &TrainArgs) -> Result<TrainConfig> {
    let mut c = match &a.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| {
                CliError::new(EXIT_USAGE, format!("config {}: {e}", path.display()))
            })?;
            serde_json::from_str(&text)
                .map_err(|e| CliError::new(EXIT_USAGE, format!("config {}: {e}", path.display())))?
        }
        None => TrainConfig::default(),
    };
    if let Some(v) = a.iters {
        c.iterations = v;
    }
    if let Some(v) = a.seed {
        c.seed = v;
    }
    if let Some(v) = a.size {
        c.model.image_size = v;
    }
    if let Some(v) = a.batch {
        c.batch = v;
    }
    if let Some(v) = a.lr {
        c.adam.learning_rate = v;
    }
    if let Some(v) = a.delta {
        c.delta = v;
    }
    if let Some(v) = a.gamma {
        c.gamma = v;
    }
    if let Some(v) = a.checkpoint_every {
        c.checkpoint_every = v;
    }
    c.ablation = ablation_from(c.ablation, a.no_st, a.no_se);
    Ok(c)
}

/// Keeps the log lines of iterations `1..=upto`, so a resumed run appends
/// without gaps or repeats.
fn trim_log(path: &Path, upto: u64) -> Result<()> {
    let file = match fs::File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(()),
        Err(e) => return Err(write_error(path, e)),
    };
    let mut kept = String::new();
    for line in io::BufReader::new(file).lines() {
        let line = line.map_err(|e| write_error(path, e))?;
        match serde_json::from_str::<LogRecord>(&line) {
            Ok(r) if r.iteration <= upto => {
                kept.push_str(&line);
                kept.push('\n');
            }
            _ => {}
        }
    }
    fs::write(path, kept).map_err(|e| write_error(path, e))
}

// Forwards log lines to the file and echoes every `every`-th to stderr.
struct ProgressLog<W: Write> {
    inner: W,
    lines: u64,
    every: u64,
    pending: Vec<u8>,
}

impl<W: Write> Write for ProgressLog<W> {
    fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
        let n = self.inner.write(buf)?;
        for &b in &buf[..n] {
            if b == b'\n' {
                self.lines += 1;
                if self.every > 0 && self.lines % self.every == 0 {
                    eprintln!("{}", String::from_utf8_lossy(&self.pending));
                }
                self.pending.clear();
            } else {
                self.pending.push(b);
            }
        }
        Ok(n)
    }

    fn flush(&mut self) -> io::Result<()> {
        self.inner.flush()
    }
}

pub fn cmd_train(a: &TrainArgs) -> Result<()> {
    prepare_out_dir(&a.out)?;
    let ckpt_path = a.out.join(CHECKPOINT_FILE);
    let log_path = a.out.join(LOG_FILE);
    let manifest = read_manifest(&a.corpus).map_err(corpus_error)?;

    let mut trainer = if a.resume {
        let ckpt = Checkpoint::load(&ckpt_path).map_err(|e| checkpoint_error(&ckpt_path, e))?;
        let mut t = Trainer::from_checkpoint(ckpt).map_err(|e| match e {
            TrainError::Checkpoint(e) => checkpoint_error(&ckpt_path, e),
            other => CliError::new(EXIT_CHECKPOINT, other.to_string()),
        })?;
        if let Some(n) = a.iters {
            t.config.iterations = n;
        }
        trim_log(&log_path, t.iteration)?;
        t
    } else {
        let mut config = train_config(a)?;
        if a.size.is_none() {
            config.model.image_size = manifest.size;
        }
        let t = Trainer::new(config).map_err(|e| CliError::new(EXIT_USAGE, e.to_string()))?;
        fs::write(&log_path, b"").map_err(|e| write_error(&log_path, e))?;
        t
    };
    if trainer.config.model.image_size != manifest.size {
        return Err(CliError::new(
            EXIT_USAGE,
            format!(
                "model expects {0}x{0} frames, corpus holds {1}x{1}",
                trainer.config.model.image_size, manifest.size
            ),
        ));
    }
    let corpus = load_corpus(&a.corpus).map_err(corpus_error)?;

    let log_file = fs::OpenOptions::new()
        .append(true)
        .create(true)
        .open(&log_path)
        .map_err(|e| write_error(&log_path, e))?;
    let mut log = ProgressLog {
        inner: io::BufWriter::new(log_file),
        lines: trainer.iteration,
        every: 100,
        pending: Vec::new(),
    };
    let mut save = |c: &Checkpoint| c.save(&ckpt_path);
    let sinks = TrainSinks {
        log: Some(&mut log),
        on_checkpoint: Some(&mut save),
    };
    let outcome = run(&mut trainer, &corpus, sinks);
    log.flush().map_err(|e| write_error(&log_path, e))?;
    match outcome {
        Ok(()) => {}
        Err(TrainError::NonFinite { record }) => {
            let diag = a.out.join(DIAGNOSTIC_FILE);
            trainer
                .checkpoint()
                .save(&diag)
                .map_err(|e| write_error(&diag, e))?;
            return Err(CliError::new(
                EXIT_NON_FINITE,
                format!(
                    "non-finite loss at iteration {}: {record:?}; last good state in {}",
                    record.iteration,
                    diag.display()
                ),
            ));
        }
        Err(TrainError::Checkpoint(e)) => return Err(write_error(&ckpt_path, e)),
        Err(TrainError::Log(e)) => return Err(write_error(&log_path, e)),
        Err(TrainError::Data(e)) => return Err(corpus_error(e)),
        Err(e) => return Err(CliError::new(EXIT_FAILURE, e.to_string())),
    }
    trainer
        .checkpoint()
        .save(&ckpt_path)
        .map_err(|e| write_error(&ckpt_path, e))?;
    println!(
        "trained to iteration {}; checkpoint {}",
        trainer.iteration,
        ckpt_path.display()
    );
    Ok(())
}

/// Loads a checkpoint into a model.
pub fn load_model(path: &Path) -> Result<(Model, Checkpoint)> {
    let ckpt = Checkpoint::load(path).map_err(|e| checkpoint_error(path, e))?;
    ckpt.config
        .validate()
        .map_err(|e| CliError::new(EXIT_CHECKPOINT, format!("{}: {e}", path.display())))?;
    let mut model = Model::new(ckpt.config.model.clone(), ckpt.config.init_seed());
    model
        .store
        .load_from(&ckpt.params)
        .map_err(|e| checkpoint_error(path, CheckpointError::Mismatch(e.to_string())))?;
    Ok((model, ckpt))
}

pub fn cmd_eval(a: &EvalArgs) -> Result<()> {
    prepare_out_dir(&a.out)?;
    let manifest = read_manifest(&a.corpus).map_err(corpus_error)?;
    if let Some(s) = a.size {
        if s != manifest.size {
            return Err(CliError::new(
                EXIT_USAGE,
                format!(
                    "--size {s} disagrees with the corpus size {}",
                    manifest.size
                ),
            ));
        }
    }
    if !(0.0..1.0).contains(&a.delta) {
        return Err(CliError::new(
            EXIT_USAGE,
            format!("delta must lie in [0, 1), got {}", a.delta),
        ));
    }
    let (model, ckpt) = load_model(&a.checkpoint)?;
    if model.config.image_size != manifest.size {
        return Err(CliError::new(
            EXIT_CHECKPOINT,
            format!(
                "checkpoint model expects {0}x{0} frames, corpus holds {1}x{1}",
                model.config.image_size, manifest.size
            ),
        ));
    }
    let spec = TestsetSpec {
        protocol: a.protocol,
        pairs: a.pairs,
        seed: a.seed.unwrap_or(manifest.seed),
        delta: a.delta,
        size: manifest.size,
        heldout: manifest.heldout.len(),
    };
    let pairs = build_testset(&spec).map_err(|e| CliError::new(EXIT_USAGE, e.to_string()))?;
    let ablation = ablation_from(ckpt.config.ablation, a.no_st, a.no_se);
    let outputs = evaluate_pairs(&model, ablation, &pairs, thread_count())
        .map_err(|e| CliError::new(EXIT_FAILURE, e.to_string()))?;

    if !a.no_dump {
        let dir = a.out.join(PAIRS_DIR);
        fs::create_dir_all(&dir).map_err(|e| write_error(&dir, e))?;
        for o in &outputs {
            for (kind, img) in [("generated", &o.generated), ("rectified", &o.rectified)] {
                let path = dir.join(format!("pair_{:04}_{kind}.ppm", o.index));
                ppm::save(&path, img).map_err(|e| write_error(&path, e))?;
            }
        }
    }
    let config = serde_json::json!({
        "checkpoint_iteration": ckpt.iteration,
        "train_seed": ckpt.seed,
        "ablation": ablation,
        "model": ckpt.config.model,
        "testset": spec,
    });
    let report = crate::metrics::MetricsReport::new(
        a.protocol.name(),
        a.delta,
        config,
        outputs.into_iter().map(|o| o.metrics).collect(),
    );
    let path = a.out.join(REPORT_FILE);
    fs::write(&path, report.to_json() + "\n").map_err(|e| write_error(&path, e))?;
    let agg = &report.aggregate;
    let show = |v: Option<f64>| v.map_or("n/a".to_string(), |v| format!("{v:.4}"));
    println!(
        "{} pairs ({}, {}): ssim {} psnr {} l1 {} akd {} rectified l1 {} (driving {}) rectified akd {}",
        report.pair_count,
        report.protocol,
        ablation.label(),
        show(agg.ssim),
        show(agg.psnr),
        show(agg.l1),
        show(agg.akd),
        show(agg.rectified_l1),
        show(agg.driving_l1),
        show(agg.rectified_akd)
    );
    Ok(())
}

fn missing(msg: impl Into<String>) -> CliError {
    CliError::new(EXIT_MISSING_FRAMES, msg)
}

fn load_frame(path: &Path, size: usize) -> Result<Tensor> {
    let img = ppm::load(path).map_err(|e| missing(format!("{}: {e}", path.display())))?;
    if img.shape()[1] != size || img.shape()[2] != size {
        return Err(CliError::new(
            EXIT_USAGE,
            format!(
                "{} is {}x{}, the model expects {size}x{size}",
                path.display(),
                img.shape()[2],
                img.shape()[1]
            ),
        ));
    }
    Ok(img)
}

/// `[3, H, W]` images side by side.
pub fn hconcat(images: &[&Tensor]) -> Tensor {
    let (h, widths): (usize, Vec<usize>) = (
        images[0].shape()[1],
        images.iter().map(|i| i.shape()[2]).collect(),
    );
    let total: usize = widths.iter().sum();
    let mut out = Tensor::zeros(vec![3, h, total]);
    let mut x0 = 0;
    for (img, &w) in images.iter().zip(&widths) {
        let src = img.data();
        let dst = out.data_mut();
        for c in 0..3 {
            for y in 0..h {
                let from = (c * h + y) * w;
                let to = (c * h + y) * total + x0;
                dst[to..to + w].copy_from_slice(&src[from..from + w]);
            }
        }
        x0 += w;
    }
    out
}

/// Driving frames of a directory, in name order.
pub fn list_frames(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries =
        fs::read_dir(dir).map_err(|e| missing(format!("driving frames {}: {e}", dir.display())))?;
    let mut frames = Vec::new();
    for e in entries {
        let path = e
            .map_err(|e| missing(format!("driving frames {}: {e}", dir.display())))?
            .path();
        if path.extension().is_some_and(|x| x == "ppm") {
            frames.push(path);
        }
    }
    if frames.is_empty() {
        return Err(missing(format!("no PPM frames in {}", dir.display())));
    }
    frames.sort();
    Ok(frames)
}

pub fn cmd_reenact(a: &ReenactArgs) -> Result<()> {
    prepare_out_dir(&a.out)?;
    if !a.source.is_file() {
        return Err(missing(format!("source {} not found", a.source.display())));
    }
    let frames = list_frames(&a.driving)?;
    let (model, ckpt) = load_model(&a.checkpoint)?;
    let size = model.config.image_size;
    let source = load_frame(&a.source, size)?;
    let ablation = ablation_from(ckpt.config.ablation, a.no_st, a.no_se);
    for (i, path) in frames.iter().enumerate() {
        let driving = load_frame(path, size)?;
        let (generated, rectified) = run_pair(&model, ablation, &source, &driving)
            .map_err(|e| CliError::new(EXIT_FAILURE, e.to_string()))?;
        let out = a.out.join(format!("panel_{i:04}.ppm"));
        ppm::save(&out, &hconcat(&[&rectified, &generated])).map_err(|e| write_error(&out, e))?;
    }
    println!(
        "wrote {} panels (rectified | generated) to {}",
        frames.len(),
        a.out.display()
    );
    Ok(())
}

pub fn cmd_verify(a: &VerifyArgs) -> Result<()> {
    let report = run_all(&VerifyOptions {
        trials: a.trials,
        seed: a.seed,
        augment_trials: a.augment_trials,
    });
    print!("{}", report.render());
    if report.passed() {
        Ok(())
    } else {
        Err(CliError::new(
            EXIT_FAILURE,
            format!("verification failed:\n  {}", report.failures().join("\n  ")),
        ))
    }
}
