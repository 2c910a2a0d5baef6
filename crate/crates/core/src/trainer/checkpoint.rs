//! Versioned binary checkpoint container.
//!
//! Layout (little endian): magic, format version, then the body, then an
//! FNV-1a 64 checksum of everything before it. The body holds the config
//! snapshot as text, counters, the data RNG state, every parameter tensor
//! with its name and kind, and the optimizer's momentum buffers.

use std::io::Write;
use std::path::Path;

use ndarray::{ArrayD, IxDyn};

use super::TrainConfig;
use crate::nn::{ParamEntry, ParamKind};
use crate::{Error, Result};

pub const MAGIC: &[u8; 8] = b"HWDNCKPT";
pub const FORMAT_VERSION: u32 = 1;

/// Serializable position of a `ChaCha8Rng`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub num_classes: usize,
    /// Completed epochs.
    pub epoch: usize,
    /// Completed optimizer steps.
    pub step: u64,
    pub rng: RngState,
    pub params: Vec<ParamEntry<f32>>,
    /// Momentum buffer per parameter, aligned with `params`.
    pub momentum: Vec<Option<ArrayD<f32>>>,
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| (h ^ b as u64).wrapping_mul(0x100_0000_01b3))
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn str(&mut self, s: &str) {
        self.u64(s.len() as u64);
        self.0.extend_from_slice(s.as_bytes());
    }
    fn tensor(&mut self, t: &ArrayD<f32>) {
        self.u32(t.ndim() as u32);
        for &d in t.shape() {
            self.u64(d as u64);
        }
        for v in t.iter() {
            self.0.extend_from_slice(&v.to_bits().to_le_bytes());
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or("truncated")?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u8(&mut self) -> std::result::Result<u8, String> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn len(&mut self) -> std::result::Result<usize, String> {
        let n = self.u64()?;
        usize::try_from(n).ok().filter(|&n| n <= self.bytes.len()).ok_or_else(|| format!("implausible length {n}"))
    }
    fn str(&mut self) -> std::result::Result<String, String> {
        let n = self.len()?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| "non-utf8 string".to_string())
    }
    fn tensor(&mut self) -> std::result::Result<ArrayD<f32>, String> {
        let ndim = self.u32()? as usize;
        if ndim > 8 {
            return Err(format!("implausible rank {ndim}"));
        }
        let shape = (0..ndim).map(|_| self.len()).collect::<std::result::Result<Vec<_>, _>>()?;
        let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).filter(|&n| n <= self.bytes.len()).ok_or("implausible tensor size")?;
        let raw = self.take(n * 4)?;
        let data = raw.chunks_exact(4).map(|c| f32::from_bits(u32::from_le_bytes(c.try_into().unwrap()))).collect();
        ArrayD::from_shape_vec(IxDyn(&shape), data).map_err(|e| e.to_string())
    }
}

fn kind_code(k: ParamKind) -> u8 {
    match k {
        ParamKind::Weight => 0,
        ParamKind::NoDecay => 1,
        ParamKind::Buffer => 2,
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(MAGIC);
        w.u32(FORMAT_VERSION);
        w.str(&self.config.to_text());
        w.u64(self.num_classes as u64);
        w.u64(self.epoch as u64);
        w.u64(self.step);
        w.0.extend_from_slice(&self.rng.seed);
        w.u64(self.rng.stream);
        w.0.extend_from_slice(&self.rng.word_pos.to_le_bytes());
        w.u64(self.params.len() as u64);
        for (p, m) in self.params.iter().zip(&self.momentum) {
            w.str(&p.name);
            w.u8(kind_code(p.kind));
            w.tensor(&p.value);
            match m {
                Some(m) => {
                    w.u8(1);
                    w.tensor(m);
                }
                None => w.u8(0),
            }
        }
        let sum = fnv1a(&w.0);
        w.u64(sum);
        w.0
    }

    /// Parses a container. `path` only labels errors.
    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |reason: String| Error::Checkpoint { path: path.into(), reason };
        if bytes.len() < 12 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file (bad magic)".into()));
        }
        let found = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if found != FORMAT_VERSION {
            return Err(Error::Version { found, expected: FORMAT_VERSION });
        }
        if bytes.len() < 20 {
            return Err(bad("truncated".into()));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 8);
        if fnv1a(body) != u64::from_le_bytes(tail.try_into().unwrap()) {
            return Err(bad("checksum mismatch (file is corrupt or truncated)".into()));
        }
        let mut r = Reader { bytes: body, pos: 12 };
        let parsed = (|| -> std::result::Result<Self, String> {
            let text = r.str()?;
            let config = TrainConfig::from_text(&text).map_err(|e| e.to_string())?;
            let num_classes = r.len()?;
            let epoch = r.len()?;
            let step = r.u64()?;
            let seed: [u8; 32] = r.take(32)?.try_into().unwrap();
            let stream = r.u64()?;
            let word_pos = u128::from_le_bytes(r.take(16)?.try_into().unwrap());
            let n = r.len()?;
            let mut params = Vec::with_capacity(n);
            let mut momentum = Vec::with_capacity(n);
            for _ in 0..n {
                let name = r.str()?;
                let kind = match r.u8()? {
                    0 => ParamKind::Weight,
                    1 => ParamKind::NoDecay,
                    2 => ParamKind::Buffer,
                    k => return Err(format!("unknown parameter kind {k}")),
                };
                let value = r.tensor()?;
                let m = match r.u8()? {
                    0 => None,
                    1 => Some(r.tensor()?),
                    f => return Err(format!("bad momentum flag {f}")),
                };
                params.push(ParamEntry { name, kind, value });
                momentum.push(m);
            }
            if r.pos != body.len() {
                return Err("trailing bytes".into());
            }
            Ok(Self { config, num_classes, epoch, step, rng: RngState { seed, stream, word_pos }, params, momentum })
        })();
        parsed.map_err(bad)
    }

    /// Writes through a temporary file and renames it into place, so a
    /// reader never sees a partial checkpoint.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&self.to_bytes()).and_then(|_| f.sync_all()).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}
