//! Binary checkpoint container.
//!
//! ```text
//! "OSTN" | u32 version | u64 len | config JSON | u64 iteration | u64 seed
//!        | u64 adam step | u64 record count
//!        | records: u64 name len | name | tensor (u64 rank, u64 extents, f64 values)
//! ```
//! All integers and reals little-endian. Record names are `param/<name>`,
//! `adam.m/<name>` and `adam.v/<name>`.

use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use crate::nn::ParamStore;
use crate::tensor::{Tensor, TensorError};

use super::adam::Adam;
use super::TrainConfig;

pub const MAGIC: &[u8; 4] = b"OSTN";
pub const VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("checkpoint io: {0}")]
    Io(#[from] io::Error),
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("checkpoint version {found} unsupported (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("checkpoint config: {0}")]
    Config(#[from] serde_json::Error),
    #[error("checkpoint decode: {0}")]
    Decode(String),
    #[error("checkpoint does not match the model: {0}")]
    Mismatch(String),
}

impl From<TensorError> for CheckpointError {
    fn from(e: TensorError) -> Self {
        match e {
            TensorError::Io(e) => CheckpointError::Io(e),
            other => CheckpointError::Decode(other.to_string()),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    /// Iterations completed.
    pub iteration: u64,
    /// Base seed; the sampler stream of iteration `i` is derived from
    /// `(seed, i)`, so this plus `iteration` is the full RNG state.
    pub seed: u64,
    pub params: ParamStore,
    pub adam: Adam,
}

fn read_u64<R: Read>(r: &mut R) -> io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_len<R: Read>(r: &mut R, what: &str, max: u64) -> Result<usize, CheckpointError> {
    let n = read_u64(r)?;
    if n > max {
        return Err(CheckpointError::Decode(format!(
            "{what} length {n} implausible"
        )));
    }
    Ok(n as usize)
}

fn read_string<R: Read>(r: &mut R, max: u64) -> Result<String, CheckpointError> {
    let n = read_len(r, "string", max)?;
    let mut buf = vec![0u8; n];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|e| CheckpointError::Decode(e.to_string()))
}

fn write_record<W: Write>(w: &mut W, name: &str, t: &Tensor) -> Result<(), CheckpointError> {
    w.write_all(&(name.len() as u64).to_le_bytes())?;
    w.write_all(name.as_bytes())?;
    t.write_to(w)?;
    Ok(())
}

impl Checkpoint {
    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<(), CheckpointError> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        let config = serde_json::to_string(&self.config)?;
        w.write_all(&(config.len() as u64).to_le_bytes())?;
        w.write_all(config.as_bytes())?;
        w.write_all(&self.iteration.to_le_bytes())?;
        w.write_all(&self.seed.to_le_bytes())?;
        w.write_all(&self.adam.step.to_le_bytes())?;
        let n = self.params.len();
        w.write_all(&(3 * n as u64).to_le_bytes())?;
        for (i, name) in self.params.names().iter().enumerate() {
            write_record(w, &format!("param/{name}"), &self.params.tensors()[i])?;
        }
        for (i, name) in self.params.names().iter().enumerate() {
            write_record(w, &format!("adam.m/{name}"), &self.adam.m[i])?;
        }
        for (i, name) in self.params.names().iter().enumerate() {
            write_record(w, &format!("adam.v/{name}"), &self.adam.v[i])?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self, CheckpointError> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let mut v = [0u8; 4];
        r.read_exact(&mut v)?;
        let version = u32::from_le_bytes(v);
        if version != VERSION {
            return Err(CheckpointError::Version {
                found: version,
                expected: VERSION,
            });
        }
        let config: TrainConfig = serde_json::from_str(&read_string(r, 1 << 20)?)?;
        let iteration = read_u64(r)?;
        let seed = read_u64(r)?;
        let step = read_u64(r)?;
        let count = read_len(r, "record count", 1 << 20)?;
        let mut params = ParamStore::new();
        let mut m = Vec::new();
        let mut v = Vec::new();
        for _ in 0..count {
            let name = read_string(r, 1 << 16)?;
            let t = Tensor::read_from(r)?;
            if let Some(n) = name.strip_prefix("param/") {
                if params.find(n).is_some() {
                    return Err(CheckpointError::Decode(format!("duplicate record {name}")));
                }
                params.add(n, t);
            } else if let Some(n) = name.strip_prefix("adam.m/") {
                m.push((n.to_string(), t));
            } else if let Some(n) = name.strip_prefix("adam.v/") {
                v.push((n.to_string(), t));
            } else {
                return Err(CheckpointError::Decode(format!("unknown record {name}")));
            }
        }
        let order =
            |moments: Vec<(String, Tensor)>, kind: &str| -> Result<Vec<Tensor>, CheckpointError> {
                if moments.len() != params.len() {
                    return Err(CheckpointError::Decode(format!(
                        "{} {kind} records for {} parameters",
                        moments.len(),
                        params.len()
                    )));
                }
                params
                    .ids()
                    .zip(moments)
                    .map(|(id, (n, t))| {
                        if n != params.name(id) || t.shape() != params.get(id).shape() {
                            Err(CheckpointError::Decode(format!(
                                "{kind} record {n} out of place"
                            )))
                        } else {
                            Ok(t)
                        }
                    })
                    .collect()
            };
        let m = order(m, "adam.m")?;
        let v = order(v, "adam.v")?;
        let adam = Adam {
            config: config.adam,
            step,
            m,
            v,
        };
        Ok(Self {
            config,
            iteration,
            seed,
            params,
            adam,
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)
            .expect("writing to memory cannot fail");
        buf
    }

    /// Writes to a temporary sibling, then renames over `path`.
    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let tmp = path.with_extension("tmp");
        {
            let mut f = io::BufWriter::new(fs::File::create(&tmp)?);
            self.write_to(&mut f)?;
            f.flush()?;
            f.get_ref().sync_all()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let mut f = io::BufReader::new(fs::File::open(path)?);
        Self::read_from(&mut f)
    }
}
