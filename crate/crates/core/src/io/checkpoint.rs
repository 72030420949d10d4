//! Versioned binary checkpoints.
//!
//! Layout (all integers and reals little-endian):
//!
//! ```text
//! header   "SAGS" | version u32 | mode u8 | payload length u64 | crc32 u32
//! payload  config TOML (u32 length + UTF-8) | seed u64 | bounds 6×f32
//!          point count u32 | pair count u32
//!          anchors N×3 f32 | base scales N f32 | origins N u32 (u32::MAX = grown)
//!          pairs M×2 u32
//!          tensor count u32, then per tensor: name (u32 length + UTF-8),
//!          rows u32, cols u32, rows×cols f32
//! ```
//!
//! A Lite checkpoint stores keypoints and parent pairs only; midpoint
//! positions, scales and features are recomputed when the model is rebuilt.

use std::fs;
use std::path::Path;

use sags_tensor::{ParamStore, Tensor};
use serde::{Deserialize, Serialize};

use crate::geometry::Aabb;
use crate::model::{Ablations, ModelConfig, SagsModel};
use crate::{Result, SagsError};

pub const MAGIC: &[u8; 4] = b"SAGS";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: usize = 21;
const NO_ORIGIN: u32 = u32::MAX;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointMode {
    Full,
    Lite,
}

impl CheckpointMode {
    fn byte(self) -> u8 {
        match self {
            CheckpointMode::Full => 0,
            CheckpointMode::Lite => 1,
        }
    }

    pub fn of(model: &SagsModel) -> Self {
        if model.is_lite() {
            CheckpointMode::Lite
        } else {
            CheckpointMode::Full
        }
    }
}

#[derive(Serialize, Deserialize)]
struct ConfigEcho {
    model: ModelConfig,
    ablations: Ablations,
}

struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn f32s(&mut self, v: &[f32]) {
        for x in v {
            self.0.extend_from_slice(&x.to_le_bytes());
        }
    }

    fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.0.extend_from_slice(s.as_bytes());
    }
}

fn count(n: usize, what: &str) -> Result<u32> {
    u32::try_from(n).map_err(|_| SagsError::Contract(format!("{what} count {n} exceeds the checkpoint format")))
}

/// Serializes `model`; the mode follows the model (Lite models write Lite files).
pub fn write_checkpoint(model: &SagsModel) -> Result<Vec<u8>> {
    let echo = ConfigEcho {
        model: model.config().clone(),
        ablations: model.ablations(),
    };
    let toml = toml::to_string(&echo).map_err(|e| SagsError::Config(e.to_string()))?;
    let mut w = Writer(Vec::new());
    w.str(&toml);
    w.u64(model.seed());
    let b = model.bounds();
    w.f32s(&b.min);
    w.f32s(&b.max);
    let n = model.anchors().len();
    w.u32(count(n, "point")?);
    w.u32(count(model.pairs().len(), "pair")?);
    for p in model.anchors() {
        w.f32s(p);
    }
    w.f32s(model.base_scales());
    for o in model.origins() {
        w.u32(o.unwrap_or(NO_ORIGIN));
    }
    for &(a, b) in model.pairs() {
        w.u32(a);
        w.u32(b);
    }
    let store = model.store();
    w.u32(count(store.len(), "tensor")?);
    for (_, p) in store.iter() {
        w.str(&p.name);
        w.u32(count(p.tensor.rows(), "row")?);
        w.u32(count(p.tensor.cols(), "column")?);
        w.f32s(p.tensor.data());
    }
    let payload = w.0;

    let mut out = Vec::with_capacity(HEADER_LEN + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(CheckpointMode::of(model).byte());
    out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    out.extend_from_slice(&crc32fast::hash(&payload).to_le_bytes());
    out.extend_from_slice(&payload);
    Ok(out)
}

/// Writes the checkpoint and returns its size in bytes.
pub fn save_checkpoint(model: &SagsModel, path: &Path) -> Result<usize> {
    let bytes = write_checkpoint(model)?;
    fs::write(path, &bytes).map_err(|e| SagsError::io(path, e))?;
    Ok(bytes.len())
}

pub fn load_checkpoint(path: &Path) -> Result<SagsModel> {
    let bytes = fs::read(path).map_err(|e| SagsError::io(path, e))?;
    read_checkpoint(&bytes)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn err(&self, message: impl Into<String>) -> SagsError {
        SagsError::Checkpoint {
            offset: self.pos,
            message: message.into(),
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(self.err(format!("truncated while reading {what}")));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn f32s(&mut self, n: usize, what: &str) -> Result<Vec<f32>> {
        let len = n.checked_mul(4).ok_or_else(|| self.err(format!("{what} length overflows")))?;
        let raw = self.take(len, what)?;
        Ok(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect())
    }

    fn str(&mut self, what: &str) -> Result<String> {
        let n = self.u32(what)? as usize;
        let at = self.pos;
        let raw = self.take(n, what)?;
        String::from_utf8(raw.to_vec()).map_err(|_| SagsError::Checkpoint {
            offset: at,
            message: format!("{what} is not UTF-8"),
        })
    }
}

pub fn read_checkpoint(bytes: &[u8]) -> Result<SagsModel> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(SagsError::Checkpoint {
            offset: 0,
            message: "bad magic, not a checkpoint".into(),
        });
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(SagsError::Checkpoint {
            offset: 4,
            message: format!("unsupported version {version} (expected {VERSION})"),
        });
    }
    let mode = match r.take(1, "mode")?[0] {
        0 => CheckpointMode::Full,
        1 => CheckpointMode::Lite,
        m => {
            return Err(SagsError::Checkpoint {
                offset: 8,
                message: format!("unknown mode flag {m}"),
            })
        }
    };
    let declared = r.u64("payload length")?;
    let crc = r.u32("checksum")?;
    let available = (bytes.len() - HEADER_LEN) as u64;
    if available < declared {
        return Err(SagsError::Checkpoint {
            offset: bytes.len(),
            message: format!("truncated: payload declares {declared} bytes, {available} present"),
        });
    }
    if available > declared {
        return Err(SagsError::Checkpoint {
            offset: HEADER_LEN + declared as usize,
            message: format!("{} trailing bytes after payload", available - declared),
        });
    }
    if crc32fast::hash(&bytes[HEADER_LEN..]) != crc {
        return Err(SagsError::Checkpoint {
            offset: 17,
            message: "checksum mismatch, file is corrupted".into(),
        });
    }

    let toml_at = r.pos;
    let echo: ConfigEcho = toml::from_str(&r.str("config")?).map_err(|e| SagsError::Checkpoint {
        offset: toml_at,
        message: format!("config echo: {e}"),
    })?;
    if echo.model.lite != (mode == CheckpointMode::Lite) {
        return Err(r.err("mode flag disagrees with the stored configuration"));
    }
    let seed = r.u64("seed")?;
    let lo = r.f32s(3, "bounds")?;
    let hi = r.f32s(3, "bounds")?;
    let bounds = Aabb {
        min: [lo[0], lo[1], lo[2]],
        max: [hi[0], hi[1], hi[2]],
    };
    let n = r.u32("point count")? as usize;
    let m = r.u32("pair count")? as usize;
    if mode == CheckpointMode::Full && m != 0 {
        return Err(r.err("full checkpoint with midpoint pairs"));
    }
    let flat = r.f32s(n.saturating_mul(3), "anchors")?;
    let anchors = flat.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect();
    let base_scale = r.f32s(n, "base scales")?;
    let origin = (0..n)
        .map(|_| r.u32("origins").map(|o| (o != NO_ORIGIN).then_some(o)))
        .collect::<Result<Vec<_>>>()?;
    let pairs = (0..m)
        .map(|_| Ok((r.u32("pairs")?, r.u32("pairs")?)))
        .collect::<Result<Vec<_>>>()?;
    let tensors = r.u32("tensor count")?;
    let mut store = ParamStore::new();
    for _ in 0..tensors {
        let name = r.str("tensor name")?;
        let rows = r.u32("tensor rows")? as usize;
        let cols = r.u32("tensor cols")? as usize;
        let at = r.pos;
        let data = r.f32s(rows.saturating_mul(cols), &format!("tensor `{name}`"))?;
        let t = Tensor::new(rows, cols, data).map_err(|e| SagsError::Checkpoint {
            offset: at,
            message: e.to_string(),
        })?;
        store.add(name, t);
    }
    if r.pos != bytes.len() {
        return Err(r.err("payload length disagrees with its contents"));
    }
    SagsModel::assemble(
        echo.model,
        echo.ablations,
        seed,
        store,
        bounds,
        anchors,
        base_scale,
        origin,
        pairs,
    )
}
