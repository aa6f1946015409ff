use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;

use super::face::{landmarks_to_pixels, FaceParams};
use super::video::sample_video;
use super::{heldout_identity_seed, mix_seed, ppm, train_identity_seed, DataError};

pub const CORPUS_FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const META_FILE: &str = "meta.json";

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusSpec {
    pub seed: u64,
    pub videos: usize,
    pub frames: usize,
    pub heldout: usize,
    pub size: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub seed: u64,
    pub size: usize,
    pub frames_per_video: usize,
    pub train: Vec<String>,
    pub heldout: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameMeta {
    pub index: usize,
    pub file: String,
    pub params: FaceParams,
    /// Normalized coordinates.
    pub landmarks: Vec<[f64; 2]>,
    pub landmarks_px: Vec<[f64; 2]>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VideoMeta {
    pub identity_seed: u64,
    pub motion_seed: u64,
    pub frames: Vec<FrameMeta>,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn write_video(
    dir: &Path,
    identity_seed: u64,
    motion_seed: u64,
    spec: &CorpusSpec,
) -> Result<(), DataError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let frames = sample_video(identity_seed, spec.frames, motion_seed, spec.size)?;
    let mut meta = VideoMeta {
        identity_seed,
        motion_seed,
        frames: Vec::with_capacity(frames.len()),
    };
    for (i, f) in frames.iter().enumerate() {
        let file = format!("frame_{i:03}.ppm");
        let path = dir.join(&file);
        ppm::save(&path, &f.image).map_err(io_err(&path))?;
        meta.frames.push(FrameMeta {
            index: i,
            file,
            params: f.params.clone(),
            landmarks: f.landmarks.clone(),
            landmarks_px: landmarks_to_pixels(&f.landmarks, spec.size, spec.size),
        });
    }
    let path = dir.join(META_FILE);
    let json = serde_json::to_string_pretty(&meta).expect("metadata serializes");
    fs::write(&path, json).map_err(io_err(&path))
}

/// Renders the corpus into `out`, creating it if needed.
pub fn synthesize_corpus(spec: &CorpusSpec, out: &Path) -> Result<Manifest, DataError> {
    if spec.frames < 2 {
        return Err(DataError::OutOfRange(format!(
            "need at least 2 frames per video, got {}",
            spec.frames
        )));
    }
    fs::create_dir_all(out).map_err(io_err(out))?;
    let mut manifest = Manifest {
        format_version: CORPUS_FORMAT_VERSION,
        seed: spec.seed,
        size: spec.size,
        frames_per_video: spec.frames,
        train: Vec::new(),
        heldout: Vec::new(),
    };
    for v in 0..spec.videos {
        let name = format!("video_{v:04}");
        let id = train_identity_seed(spec.seed, v as u64);
        write_video(&out.join(&name), id, mix_seed(id, 1), spec)?;
        manifest.train.push(name);
    }
    for v in 0..spec.heldout {
        let name = format!("heldout_{v:04}");
        let id = heldout_identity_seed(spec.seed, v as u64);
        write_video(&out.join(&name), id, mix_seed(id, 1), spec)?;
        manifest.heldout.push(name);
    }
    let path = out.join(MANIFEST_FILE);
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, json).map_err(io_err(&path))?;
    Ok(manifest)
}

/// One video held in memory as 8-bit frames.
#[derive(Clone, Debug)]
pub struct LoadedVideo {
    pub name: String,
    pub meta: VideoMeta,
    frames: Vec<Vec<u8>>,
}

#[derive(Clone, Debug)]
pub struct Corpus {
    pub root: PathBuf,
    pub manifest: Manifest,
    pub train: Vec<LoadedVideo>,
    pub heldout: Vec<LoadedVideo>,
}

impl Corpus {
    pub fn size(&self) -> usize {
        self.manifest.size
    }

    /// `[3, size, size]` frame of a training video.
    pub fn train_frame(&self, video: usize, frame: usize) -> Tensor {
        let s = self.size();
        ppm::from_bytes(&self.train[video].frames[frame], s, s)
    }

    pub fn heldout_frame(&self, video: usize, frame: usize) -> Tensor {
        let s = self.size();
        ppm::from_bytes(&self.heldout[video].frames[frame], s, s)
    }
}

fn corrupt(msg: impl Into<String>) -> DataError {
    DataError::Corrupt(msg.into())
}

fn load_video(root: &Path, name: &str, manifest: &Manifest) -> Result<LoadedVideo, DataError> {
    let dir = root.join(name);
    let meta_path = dir.join(META_FILE);
    let text = fs::read_to_string(&meta_path)
        .map_err(|e| corrupt(format!("{}: {e}", meta_path.display())))?;
    let meta: VideoMeta = serde_json::from_str(&text)
        .map_err(|e| corrupt(format!("{}: {e}", meta_path.display())))?;
    if meta.frames.len() != manifest.frames_per_video {
        return Err(corrupt(format!(
            "{name}: {} frames listed, manifest says {}",
            meta.frames.len(),
            manifest.frames_per_video
        )));
    }
    let mut frames = Vec::with_capacity(meta.frames.len());
    for f in &meta.frames {
        let path = dir.join(&f.file);
        let file =
            fs::File::open(&path).map_err(|e| corrupt(format!("{}: {e}", path.display())))?;
        let (h, w, bytes) = ppm::read_raw(std::io::BufReader::new(file))
            .map_err(|e| corrupt(format!("{}: {e}", path.display())))?;
        if h != manifest.size || w != manifest.size {
            return Err(corrupt(format!(
                "{}: {w}x{h}, expected {}",
                path.display(),
                manifest.size
            )));
        }
        frames.push(bytes);
    }
    Ok(LoadedVideo {
        name: name.to_string(),
        meta,
        frames,
    })
}

/// Reads and checks `root/manifest.json` without touching the frames.
pub fn read_manifest(root: &Path) -> Result<Manifest, DataError> {
    let path = root.join(MANIFEST_FILE);
    let text =
        fs::read_to_string(&path).map_err(|e| corrupt(format!("{}: {e}", path.display())))?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| corrupt(format!("{}: {e}", path.display())))?;
    if manifest.format_version != CORPUS_FORMAT_VERSION {
        return Err(corrupt(format!(
            "corpus format {} unsupported (expected {CORPUS_FORMAT_VERSION})",
            manifest.format_version
        )));
    }
    if manifest.frames_per_video < 2 {
        return Err(corrupt("videos must hold at least 2 frames"));
    }
    Ok(manifest)
}

/// Reads the manifest and every frame under `root`.
pub fn load_corpus(root: &Path) -> Result<Corpus, DataError> {
    let manifest = read_manifest(root)?;
    let train = manifest
        .train
        .iter()
        .map(|n| load_video(root, n, &manifest))
        .collect::<Result<Vec<_>, _>>()?;
    let heldout = manifest
        .heldout
        .iter()
        .map(|n| load_video(root, n, &manifest))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Corpus {
        root: root.to_path_buf(),
        manifest,
        train,
        heldout,
    })
}
