//! Binary dataset and checkpoint files. All integers and floats are little-endian.
//!
//! Dataset: `"KSEG"`, version byte, then `count, T, H, W` as `u32`; per scan
//! `T·H·W` `f32` intensities followed by `T·H·W` `u8` labels.
//!
//! Checkpoint: `"KSEGCKPT"`, `u32` version, nine `u32` config fields, `u64`
//! step, `u64` seed, `u32` tensor count; per tensor a `u32`-length-prefixed
//! UTF-8 name, `u32` rank, `u32` dims and `f64` values; finally a flag byte
//! and, when set, the Adam hyper-parameters, step and both moment buffers.

use crate::model::{ModelConfig, ModelError, ModelParams};
use crate::phantom::CineScan;
use crate::tensor::{Tensor, TensorError};
use crate::train::{Adam, AdamConfig};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use thiserror::Error;

pub const DATASET_MAGIC: &[u8; 4] = b"KSEG";
pub const DATASET_VERSION: u8 = 1;
pub const DATASET_HEADER_LEN: usize = 4 + 1 + 4 * 4;
pub const CHECKPOINT_MAGIC: &[u8; 8] = b"KSEGCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("bad magic bytes, not a {0} file")]
    BadMagic(&'static str),
    #[error("unsupported {kind} version {found} (expected {expected})")]
    Version {
        kind: &'static str,
        found: u32,
        expected: u32,
    },
    #[error("file ends before the declared payload")]
    Truncated,
    #[error("{0} unexpected bytes after the declared payload")]
    TrailingBytes(usize),
    #[error("scans must share one shape; scan {index} is {found:?}, expected {expected:?}")]
    MixedShapes {
        index: usize,
        expected: [usize; 3],
        found: [usize; 3],
    },
    #[error("value does not fit the format: {0}")]
    Overflow(String),
    #[error("invalid tensor name")]
    BadName,
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

pub type Result<T> = std::result::Result<T, FormatError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> FormatError + '_ {
    move |source| FormatError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn u32_of(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| FormatError::Overflow(format!("{what} = {v}")))
}

/// Cursor over an in-memory file.
struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).ok_or(FormatError::Truncated)?;
        let out = self.buf.get(self.pos..end).ok_or(FormatError::Truncated)?;
        self.pos = end;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(8).ok_or(FormatError::Truncated)?)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn finish(&self) -> Result<()> {
        match self.buf.len() - self.pos {
            0 => Ok(()),
            n => Err(FormatError::TrailingBytes(n)),
        }
    }
}

pub fn encode_dataset(scans: &[CineScan]) -> Result<Vec<u8>> {
    let dims = scans
        .first()
        .map_or([0, 0, 0], |s| [s.frames, s.height, s.width]);
    for (index, s) in scans.iter().enumerate() {
        let found = [s.frames, s.height, s.width];
        if found != dims {
            return Err(FormatError::MixedShapes {
                index,
                expected: dims,
                found,
            });
        }
    }
    let voxels = dims.iter().product::<usize>();
    let mut out = Vec::with_capacity(DATASET_HEADER_LEN + scans.len() * voxels * 5);
    out.extend_from_slice(DATASET_MAGIC);
    out.push(DATASET_VERSION);
    out.extend_from_slice(&u32_of(scans.len(), "count")?.to_le_bytes());
    for (d, name) in dims.iter().zip(["frames", "height", "width"]) {
        out.extend_from_slice(&u32_of(*d, name)?.to_le_bytes());
    }
    for s in scans {
        for v in &s.image {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        out.extend_from_slice(&s.labels);
    }
    Ok(out)
}

pub fn decode_dataset(bytes: &[u8]) -> Result<Vec<CineScan>> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4).map_err(|_| FormatError::BadMagic("dataset"))? != DATASET_MAGIC {
        return Err(FormatError::BadMagic("dataset"));
    }
    let version = r.u8()?;
    if version != DATASET_VERSION {
        return Err(FormatError::Version {
            kind: "dataset",
            found: version as u32,
            expected: DATASET_VERSION as u32,
        });
    }
    let count = r.u32()? as usize;
    let (frames, height, width) = (r.u32()? as usize, r.u32()? as usize, r.u32()? as usize);
    let voxels = frames
        .checked_mul(height)
        .and_then(|v| v.checked_mul(width))
        .ok_or(FormatError::Truncated)?;
    // reject lying headers before allocating
    let payload = count.checked_mul(voxels * 5).ok_or(FormatError::Truncated)?;
    let remaining = bytes.len() - r.pos;
    if payload > remaining {
        return Err(FormatError::Truncated);
    }
    if payload < remaining {
        return Err(FormatError::TrailingBytes(remaining - payload));
    }
    let mut scans = Vec::with_capacity(count);
    for _ in 0..count {
        let image = r
            .take(voxels * 4)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        let labels = r.take(voxels)?.to_vec();
        scans.push(CineScan {
            frames,
            height,
            width,
            image,
            labels,
        });
    }
    r.finish()?;
    Ok(scans)
}

pub fn save_dataset(path: &Path, scans: &[CineScan]) -> Result<()> {
    let bytes = encode_dataset(scans)?;
    let mut f = BufWriter::new(File::create(path).map_err(io_err(path))?);
    f.write_all(&bytes).map_err(io_err(path))?;
    f.flush().map_err(io_err(path))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    let mut bytes = Vec::new();
    BufReader::new(File::open(path).map_err(io_err(path))?)
        .read_to_end(&mut bytes)
        .map_err(io_err(path))?;
    Ok(bytes)
}

pub fn load_dataset(path: &Path) -> Result<Vec<CineScan>> {
    decode_dataset(&read_file(path)?)
}

/// Everything needed to resume training or run inference.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub step: u64,
    pub seed: u64,
    pub optimizer: Option<Adam>,
}

fn config_fields(c: &ModelConfig) -> [usize; 9] {
    [
        c.latents,
        c.width,
        c.heads,
        c.encoder_layers,
        c.decoder_layers,
        c.frequencies,
        c.classes,
        c.ff_mult,
        c.modulated_features as usize,
    ]
}

pub fn encode_checkpoint(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    for v in config_fields(ckpt.params.config()) {
        out.extend_from_slice(&u32_of(v, "config field")?.to_le_bytes());
    }
    out.extend_from_slice(&ckpt.step.to_le_bytes());
    out.extend_from_slice(&ckpt.seed.to_le_bytes());
    let tensors = ckpt.params.tensors();
    out.extend_from_slice(&u32_of(tensors.len(), "tensor count")?.to_le_bytes());
    for (name, t) in ckpt.params.names().iter().zip(tensors) {
        out.extend_from_slice(&u32_of(name.len(), "name length")?.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&u32_of(t.shape().len(), "rank")?.to_le_bytes());
        for d in t.shape() {
            out.extend_from_slice(&u32_of(*d, "extent")?.to_le_bytes());
        }
        t.data().iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
    }
    match &ckpt.optimizer {
        None => out.push(0),
        Some(adam) => {
            out.push(1);
            let c = adam.config;
            for v in [c.lr, c.beta1, c.beta2, c.eps] {
                out.extend_from_slice(&v.to_le_bytes());
            }
            out.extend_from_slice(&adam.step.to_le_bytes());
            for buf in adam.first.iter().chain(&adam.second) {
                buf.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
            }
        }
    }
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(8).map_err(|_| FormatError::BadMagic("checkpoint"))? != CHECKPOINT_MAGIC {
        return Err(FormatError::BadMagic("checkpoint"));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(FormatError::Version {
            kind: "checkpoint",
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let mut f = [0usize; 9];
    for v in &mut f {
        *v = r.u32()? as usize;
    }
    let config = ModelConfig {
        latents: f[0],
        width: f[1],
        heads: f[2],
        encoder_layers: f[3],
        decoder_layers: f[4],
        frequencies: f[5],
        classes: f[6],
        ff_mult: f[7],
        modulated_features: match f[8] {
            0 => false,
            1 => true,
            _ => return Err(FormatError::Overflow(format!("feature flag {}", f[8]))),
        },
    };
    let step = r.u64()?;
    let seed = r.u64()?;
    let count = r.u32()? as usize;
    let mut named = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| FormatError::BadName)?
            .to_string();
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or(FormatError::Truncated)?;
        let data = r.f64s(n)?;
        named.push((name, Tensor::new(shape, data)?));
    }
    let params = ModelParams::from_named(config, named)?;
    let optimizer = match r.u8()? {
        0 => None,
        _ => {
            let h = r.f64s(4)?;
            let config = AdamConfig {
                lr: h[0],
                beta1: h[1],
                beta2: h[2],
                eps: h[3],
            };
            let step = r.u64()?;
            let sizes: Vec<usize> = params.tensors().iter().map(Tensor::len).collect();
            let first = sizes.iter().map(|&n| r.f64s(n)).collect::<Result<Vec<_>>>()?;
            let second = sizes.iter().map(|&n| r.f64s(n)).collect::<Result<Vec<_>>>()?;
            Some(Adam {
                config,
                step,
                first,
                second,
            })
        }
    };
    r.finish()?;
    Ok(Checkpoint {
        params,
        step,
        seed,
        optimizer,
    })
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let bytes = encode_checkpoint(ckpt)?;
    let mut f = BufWriter::new(File::create(path).map_err(io_err(path))?);
    f.write_all(&bytes).map_err(io_err(path))?;
    f.flush().map_err(io_err(path))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    decode_checkpoint(&read_file(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::{generate_dataset, Jitter, PhantomParams};

    fn small_scans(n: usize) -> Vec<CineScan> {
        let base = PhantomParams {
            height: 16,
            width: 16,
            frames: 2,
            inner_radius: 3.0,
            outer_radius: 5.0,
            center: (8.0, 8.0),
            ..Default::default()
        };
        let jitter = Jitter {
            center: 1.0,
            ..Default::default()
        };
        generate_dataset(n, &base, &jitter, 5).unwrap()
    }

    #[test]
    fn dataset_size_matches_layout() {
        let bytes = encode_dataset(&small_scans(3)).unwrap();
        assert_eq!(bytes.len(), DATASET_HEADER_LEN + 3 * (2 * 16 * 16 * 5));
    }

    #[test]
    fn dataset_rejects_corruption() {
        let mut bytes = encode_dataset(&small_scans(2)).unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_dataset(&bad), Err(FormatError::BadMagic(_))));
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(decode_dataset(&bad), Err(FormatError::Version { .. })));
        assert!(matches!(
            decode_dataset(&bytes[..bytes.len() - 1]),
            Err(FormatError::Truncated)
        ));
        bytes.push(0);
        assert!(matches!(decode_dataset(&bytes), Err(FormatError::TrailingBytes(1))));
    }

    #[test]
    fn dataset_rejects_mixed_shapes() {
        let mut scans = small_scans(2);
        scans[1].frames = 1;
        assert!(matches!(encode_dataset(&scans), Err(FormatError::MixedShapes { .. })));
    }

    #[test]
    fn checkpoint_rejects_bad_magic_and_truncation() {
        let params = ModelParams::init(
            ModelConfig {
                latents: 2,
                width: 4,
                heads: 2,
                encoder_layers: 1,
                decoder_layers: 1,
                frequencies: 1,
                classes: 3,
                ff_mult: 1,
                modulated_features: true,
            },
            0,
        )
        .unwrap();
        let ckpt = Checkpoint {
            params,
            step: 3,
            seed: 4,
            optimizer: None,
        };
        let bytes = encode_checkpoint(&ckpt).unwrap();
        assert_eq!(decode_checkpoint(&bytes).unwrap(), ckpt);
        assert!(matches!(decode_checkpoint(b"KSEGCKPX"), Err(FormatError::BadMagic(_))));
        assert!(matches!(
            decode_checkpoint(&bytes[..bytes.len() - 2]),
            Err(FormatError::Truncated)
        ));
    }
}
