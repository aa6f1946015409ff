use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use ostnet::cli::{
    CHECKPOINT_FILE, DIAGNOSTIC_FILE, EXIT_CHECKPOINT, EXIT_CORPUS, EXIT_MISSING_FRAMES,
    EXIT_NON_FINITE, EXIT_USAGE, LOG_FILE, PAIRS_DIR, REPORT_FILE,
};
use ostnet::data::ppm;
use ostnet::metrics::MetricsReport;
use ostnet::model::ModelConfig;
use ostnet::training::{Checkpoint, LogRecord, TrainConfig};
use tempfile::TempDir;

fn ostnet<S: AsRef<std::ffi::OsStr>>(args: &[S]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ostnet"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok<S: AsRef<std::ffi::OsStr>>(args: &[S]) -> Output {
    let out = ostnet(args);
    assert!(
        out.status.success(),
        "{:?}\nstdout: {}\nstderr: {}",
        out.status,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn code<S: AsRef<std::ffi::OsStr>>(args: &[S]) -> i32 {
    ostnet(args).status.code().expect("exit code")
}

fn p(path: &Path) -> String {
    path.display().to_string()
}

/// Small corpus: 2 training videos and 3 held-out identities at 32×32.
fn corpus(root: &Path) -> PathBuf {
    let dir = root.join("corpus");
    ok(&[
        "synth",
        "--out",
        &p(&dir),
        "--size",
        "32",
        "--videos",
        "2",
        "--frames",
        "3",
        "--heldout",
        "3",
        "--seed",
        "5",
    ]);
    dir
}

/// Training config with a few channels per layer so steps take milliseconds.
fn small_config(root: &Path) -> PathBuf {
    let c = TrainConfig {
        model: ModelConfig {
            image_size: 32,
            ..ModelConfig::miniature()
        },
        batch: 2,
        checkpoint_every: 0,
        ..TrainConfig::default()
    };
    let path = root.join("config.json");
    fs::write(&path, serde_json::to_string(&c).unwrap()).unwrap();
    path
}

fn train(corpus: &Path, config: &Path, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec![
        "train".to_string(),
        "--corpus".into(),
        p(corpus),
        "--config".into(),
        p(config),
        "--out".into(),
        p(out),
    ];
    args.extend(extra.iter().map(|s| s.to_string()));
    ostnet(&args)
}

fn log_records(dir: &Path) -> Vec<LogRecord> {
    fs::read_to_string(dir.join(LOG_FILE))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

fn files_under(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    for e in fs::read_dir(dir).unwrap() {
        let path = e.unwrap().path();
        if path.is_dir() {
            out.extend(files_under(&path));
        } else {
            out.push(path);
        }
    }
    out.sort();
    out
}

#[test]
fn synth_writes_frames_metadata_and_manifest() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path().join("c");
    ok(&[
        "synth",
        "--out",
        &p(&dir),
        "--videos",
        "2",
        "--frames",
        "3",
        "--heldout",
        "0",
        "--size",
        "32",
    ]);
    let files = files_under(&dir);
    let count = |ext: &str| {
        files
            .iter()
            .filter(|f| f.extension().is_some_and(|e| e == ext))
            .count()
    };
    assert_eq!(count("ppm"), 6);
    assert_eq!(count("json"), 3);
    assert!(dir.join("manifest.json").exists());
}

#[test]
fn synth_is_byte_deterministic() {
    let tmp = TempDir::new().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for d in [&a, &b] {
        ok(&[
            "synth",
            "--out",
            &p(d),
            "--videos",
            "2",
            "--frames",
            "2",
            "--heldout",
            "1",
            "--size",
            "32",
            "--seed",
            "9",
        ]);
    }
    let (fa, fb) = (files_under(&a), files_under(&b));
    assert_eq!(fa.len(), fb.len());
    for (x, y) in fa.iter().zip(&fb) {
        assert_eq!(x.strip_prefix(&a).unwrap(), y.strip_prefix(&b).unwrap());
        assert_eq!(
            fs::read(x).unwrap(),
            fs::read(y).unwrap(),
            "{}",
            x.display()
        );
    }
}

#[test]
fn synth_honours_the_frame_size() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path().join("c");
    ok(&[
        "synth",
        "--out",
        &p(&dir),
        "--videos",
        "1",
        "--frames",
        "2",
        "--heldout",
        "1",
        "--size",
        "48",
    ]);
    for f in files_under(&dir) {
        if f.extension().is_some_and(|e| e == "ppm") {
            let img = ppm::load(&f).unwrap();
            assert_eq!(img.shape(), &[3, 48, 48]);
        }
    }
    assert_eq!(
        code(&["synth", "--out", &p(&tmp.path().join("x")), "--size", "16"]),
        EXIT_USAGE
    );
}

#[test]
fn train_logs_one_record_per_iteration() {
    let tmp = TempDir::new().unwrap();
    let (c, cfg, out) = (
        corpus(tmp.path()),
        small_config(tmp.path()),
        tmp.path().join("run"),
    );
    let o = train(&c, &cfg, &out, &["--iters", "10"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let log = log_records(&out);
    assert_eq!(
        log.iter().map(|r| r.iteration).collect::<Vec<_>>(),
        (1..=10).collect::<Vec<_>>()
    );
    assert!(log.iter().all(|r| r.is_finite() && r.total > 0.0));
    let ckpt = Checkpoint::load(&out.join(CHECKPOINT_FILE)).unwrap();
    assert_eq!(ckpt.iteration, 10);
}

#[test]
fn resume_continues_without_gaps_and_matches_a_straight_run() {
    let tmp = TempDir::new().unwrap();
    let (c, cfg) = (corpus(tmp.path()), small_config(tmp.path()));
    let (split, straight) = (tmp.path().join("split"), tmp.path().join("straight"));
    assert!(train(&c, &cfg, &split, &["--iters", "2"]).status.success());
    assert!(train(&c, &cfg, &split, &["--resume", "--iters", "4"])
        .status
        .success());
    assert!(train(&c, &cfg, &straight, &["--iters", "4"])
        .status
        .success());
    let log = log_records(&split);
    assert_eq!(
        log.iter().map(|r| r.iteration).collect::<Vec<_>>(),
        [1, 2, 3, 4]
    );
    assert_eq!(log, log_records(&straight));
    assert_eq!(
        fs::read(split.join(CHECKPOINT_FILE)).unwrap(),
        fs::read(straight.join(CHECKPOINT_FILE)).unwrap()
    );
}

#[test]
fn no_st_trains_the_baseline_arm() {
    let tmp = TempDir::new().unwrap();
    let (c, cfg, out) = (
        corpus(tmp.path()),
        small_config(tmp.path()),
        tmp.path().join("run"),
    );
    assert!(
        train(&c, &cfg, &out, &["--iters", "2", "--no-st", "--no-se"])
            .status
            .success()
    );
    let ckpt = Checkpoint::load(&out.join(CHECKPOINT_FILE)).unwrap();
    assert!(!ckpt.config.ablation.scale_transform && !ckpt.config.ablation.scale_embedding);
    assert!(log_records(&out).iter().all(|r| r.rect == 0.0));
}

#[test]
fn identical_seeds_give_identical_checkpoints_and_reports() {
    let tmp = TempDir::new().unwrap();
    let (c, cfg) = (corpus(tmp.path()), small_config(tmp.path()));
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for d in [&a, &b] {
        assert!(train(&c, &cfg, d, &["--iters", "3", "--seed", "11"])
            .status
            .success());
    }
    let ca = fs::read(a.join(CHECKPOINT_FILE)).unwrap();
    assert_eq!(ca, fs::read(b.join(CHECKPOINT_FILE)).unwrap());
    let (ea, eb) = (tmp.path().join("ea"), tmp.path().join("eb"));
    for (e, threads) in [(&ea, "1"), (&eb, "3")] {
        let out = Command::new(env!("CARGO_BIN_EXE_ostnet"))
            .env("OSTNET_THREADS", threads)
            .args([
                "eval",
                "--checkpoint",
                &p(&a.join(CHECKPOINT_FILE)),
                "--corpus",
                &p(&c),
                "--out",
                &p(e),
                "--pairs",
                "6",
            ])
            .output()
            .unwrap();
        assert!(out.status.success());
    }
    assert_eq!(
        fs::read(ea.join(REPORT_FILE)).unwrap(),
        fs::read(eb.join(REPORT_FILE)).unwrap()
    );
    assert_eq!(files_under(&ea.join(PAIRS_DIR)).len(), 12);
}

fn untrained(tmp: &Path) -> (PathBuf, PathBuf) {
    let (c, cfg, out) = (corpus(tmp), small_config(tmp), tmp.join("untrained"));
    assert!(train(&c, &cfg, &out, &["--iters", "0"]).status.success());
    (c, out.join(CHECKPOINT_FILE))
}

fn eval(ckpt: &Path, corpus: &Path, out: &Path, extra: &[&str]) -> MetricsReport {
    let mut args = vec![
        "eval".to_string(),
        "--checkpoint".into(),
        p(ckpt),
        "--corpus".into(),
        p(corpus),
        "--out".into(),
        p(out),
    ];
    args.extend(extra.iter().map(|s| s.to_string()));
    ok(&args);
    serde_json::from_str(&fs::read_to_string(out.join(REPORT_FILE)).unwrap()).unwrap()
}

#[test]
fn untrained_model_passes_driving_frames_through() {
    let tmp = TempDir::new().unwrap();
    let (c, ckpt) = untrained(tmp.path());
    let r = eval(
        &ckpt,
        &c,
        &tmp.path().join("e"),
        &["--protocol", "same-scale", "--pairs", "8"],
    );
    assert_eq!(r.pair_count, 8);
    assert_eq!(r.aggregate.rectified_is_driving, 8);
    assert!(r.pairs.iter().all(|m| m.rectified_is_driving));
    let agg = &r.aggregate;
    for v in [agg.ssim, agg.psnr, agg.l1, agg.akd] {
        assert!(v.unwrap().is_finite());
    }
}

#[test]
fn zero_delta_reduces_to_the_same_scale_protocol() {
    let tmp = TempDir::new().unwrap();
    let (c, ckpt) = untrained(tmp.path());
    let same = eval(
        &ckpt,
        &c,
        &tmp.path().join("s"),
        &["--protocol", "same-scale", "--pairs", "5", "--no-dump"],
    );
    let diff = eval(
        &ckpt,
        &c,
        &tmp.path().join("d"),
        &[
            "--protocol",
            "different-scale",
            "--delta",
            "0",
            "--pairs",
            "5",
            "--no-dump",
        ],
    );
    for (a, b) in same.pairs.iter().zip(&diff.pairs) {
        assert_eq!((a.ssim, a.psnr, a.l1, a.akd), (b.ssim, b.psnr, b.l1, b.akd));
    }
    assert!(!tmp.path().join("s").join(PAIRS_DIR).exists());
}

#[test]
fn default_protocol_reports_two_hundred_pairs() {
    let tmp = TempDir::new().unwrap();
    let (c, ckpt) = untrained(tmp.path());
    let r = eval(&ckpt, &c, &tmp.path().join("e"), &["--no-dump"]);
    assert_eq!(r.protocol, "different-scale");
    assert_eq!(r.delta, 0.3);
    assert_eq!(r.pair_count, 200);
    assert_eq!(r.pairs.len(), 200);
    assert!(r.pairs.iter().enumerate().all(|(i, m)| m.index == i));
}

#[test]
fn cross_identity_evaluation_has_no_reference_metrics() {
    let tmp = TempDir::new().unwrap();
    let (c, ckpt) = untrained(tmp.path());
    let r = eval(
        &ckpt,
        &c,
        &tmp.path().join("e"),
        &["--protocol", "cross-identity", "--pairs", "3"],
    );
    assert_eq!(r.pair_count, 3);
    assert!(r.aggregate.ssim.is_none() && r.aggregate.l1.is_none());
}

#[test]
fn reenact_writes_one_panel_per_driving_frame() {
    let tmp = TempDir::new().unwrap();
    let (c, ckpt) = untrained(tmp.path());
    let driving = tmp.path().join("drv");
    fs::create_dir_all(&driving).unwrap();
    for i in 0..5 {
        let from = c.join(format!("heldout_0001/frame_00{}.ppm", i % 3));
        fs::copy(from, driving.join(format!("d{i}.ppm"))).unwrap();
    }
    let out = tmp.path().join("panels");
    ok(&[
        "reenact",
        "--checkpoint",
        &p(&ckpt),
        "--source",
        &p(&c.join("heldout_0000/frame_000.ppm")),
        "--driving",
        &p(&driving),
        "--out",
        &p(&out),
    ]);
    let panels = files_under(&out)
        .into_iter()
        .filter(|f| f.extension().is_some_and(|e| e == "ppm"))
        .collect::<Vec<_>>();
    assert_eq!(panels.len(), 5);
    let first = ppm::load(&panels[0]).unwrap();
    assert_eq!(first.shape(), &[3, 32, 64]);
    // untrained: the left half (rectified) is the driving frame
    let drv = ppm::load(&driving.join("d0.ppm")).unwrap();
    for ch in 0..3 {
        for y in 0..32 {
            for x in 0..32 {
                assert_eq!(
                    first.data()[(ch * 32 + y) * 64 + x],
                    drv.data()[(ch * 32 + y) * 32 + x]
                );
            }
        }
    }
}

#[test]
fn reenact_reports_missing_frames() {
    let tmp = TempDir::new().unwrap();
    let (c, ckpt) = untrained(tmp.path());
    let empty = tmp.path().join("empty");
    fs::create_dir_all(&empty).unwrap();
    let source = c.join("heldout_0000/frame_000.ppm");
    let run = |src: &Path, drv: &Path| {
        code(&[
            "reenact",
            "--checkpoint",
            &p(&ckpt),
            "--source",
            &p(src),
            "--driving",
            &p(drv),
            "--out",
            &p(&tmp.path().join("o")),
        ])
    };
    assert_eq!(run(&source, &empty), EXIT_MISSING_FRAMES);
    assert_eq!(
        run(&source, &tmp.path().join("nowhere")),
        EXIT_MISSING_FRAMES
    );
    assert_eq!(
        run(&tmp.path().join("absent.ppm"), &c.join("heldout_0001")),
        EXIT_MISSING_FRAMES
    );
}

#[test]
fn damaged_inputs_map_to_documented_exit_codes() {
    let tmp = TempDir::new().unwrap();
    let (c, ckpt) = untrained(tmp.path());
    let cfg = small_config(tmp.path());

    let bad = tmp.path().join("bad.ostn");
    fs::write(&bad, b"NOPE0000").unwrap();
    let ev = |ck: &Path, corpus: &Path| {
        code(&[
            "eval",
            "--checkpoint",
            &p(ck),
            "--corpus",
            &p(corpus),
            "--out",
            &p(&tmp.path().join("e")),
            "--pairs",
            "1",
        ])
    };
    assert_eq!(ev(&bad, &c), EXIT_CHECKPOINT);
    let mut bytes = fs::read(&ckpt).unwrap();
    bytes[4] = 77;
    let wrong_version = tmp.path().join("v.ostn");
    fs::write(&wrong_version, bytes).unwrap();
    assert_eq!(ev(&wrong_version, &c), EXIT_CHECKPOINT);
    assert_eq!(ev(&ckpt, &tmp.path().join("no-corpus")), EXIT_CORPUS);

    let broken = tmp.path().join("broken");
    fs::create_dir_all(&broken).unwrap();
    fs::write(broken.join("manifest.json"), "{").unwrap();
    assert_eq!(
        train(&broken, &cfg, &tmp.path().join("t"), &["--iters", "1"])
            .status
            .code(),
        Some(EXIT_CORPUS)
    );

    let file = tmp.path().join("plain-file");
    fs::write(&file, b"x").unwrap();
    assert_eq!(
        code(&["synth", "--out", &p(&file.join("sub")), "--videos", "1"]),
        EXIT_USAGE
    );
    assert_eq!(code(&["frobnicate"]), EXIT_USAGE);
    assert_eq!(code(&["train", "--corpus", &p(&c)]), EXIT_USAGE);
}

#[test]
fn exploding_training_exits_with_a_diagnostic_checkpoint() {
    let tmp = TempDir::new().unwrap();
    let (c, cfg, out) = (
        corpus(tmp.path()),
        small_config(tmp.path()),
        tmp.path().join("run"),
    );
    let o = train(&c, &cfg, &out, &["--iters", "5", "--lr", "1e300"]);
    assert_eq!(
        o.status.code(),
        Some(EXIT_NON_FINITE),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
    let diag = Checkpoint::load(&out.join(DIAGNOSTIC_FILE)).unwrap();
    let logged = log_records(&out).len() as u64;
    assert_eq!(diag.iteration, logged);
}

#[test]
fn verify_reports_every_suite() {
    let out = ok(&["verify", "--trials", "1", "--augment-trials", "5"]);
    let text = String::from_utf8_lossy(&out.stdout);
    for suite in ["gradcheck", "tps", "augment", "oracle"] {
        assert!(
            text.to_lowercase().contains(suite),
            "{suite} missing in\n{text}"
        );
    }
}
