//! Bit-exact named-tensor container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "DMPK" | version u32 | entry count u32
//! per entry, sorted by name:
//!   name length u32 | name (UTF-8) | dtype u8 (0 = f32) | trainable u8
//!   | rank u8 | dims u64 x rank | payload f32 x numel | FNV-1a u64 of the entry bytes
//! metadata length u32 | metadata (JSON) | FNV-1a u64 of the metadata
//! ```

use std::fs;
use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::BackboneConfig;
use crate::diffusion::ScheduleKind;
use crate::dmp::Patch;
use crate::error::{Error, Result};
use crate::numcore::{fnv1a64, ParamStore, RngState, Tensor};

use super::{Phase, TrainConfig};

pub const MAGIC: &[u8; 4] = b"DMPK";
pub const VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;

/// Serializes tensors and an opaque metadata record.
pub fn encode(tensors: &ParamStore, meta: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + tensors.numel() * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors.iter() {
        let start = out.len();
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(DTYPE_F32);
        out.push(t.requires_grad() as u8);
        out.push(t.shape().len() as u8);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        let h = fnv1a64(&out[start..]);
        out.extend_from_slice(&h.to_le_bytes());
    }
    out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    out.extend_from_slice(meta);
    out.extend_from_slice(&fnv1a64(meta).to_le_bytes());
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, entry: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Integrity {
                entry: entry.to_string(),
                detail: format!("truncated: need {n} bytes at offset {}", self.pos),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, entry: &str) -> Result<u8> {
        Ok(self.take(1, entry)?[0])
    }

    fn u32(&mut self, entry: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, entry)?.try_into().unwrap()))
    }

    fn u64(&mut self, entry: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, entry)?.try_into().unwrap()))
    }
}

fn integrity(entry: &str, detail: impl Into<String>) -> Error {
    Error::Integrity {
        entry: entry.to_string(),
        detail: detail.into(),
    }
}

/// Parses a container, verifying every checksum.
pub fn decode(bytes: &[u8]) -> Result<(ParamStore, Vec<u8>)> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "header")? != MAGIC {
        return Err(integrity("header", "bad magic"));
    }
    let version = r.u32("header")?;
    if version != VERSION {
        return Err(integrity("header", format!("unsupported version {version}")));
    }
    let count = r.u32("header")?;
    let mut store = ParamStore::new();
    let mut prev: Option<String> = None;
    for idx in 0..count {
        let start = r.pos;
        let label = format!("entry #{idx}");
        let len = r.u32(&label)? as usize;
        let name = std::str::from_utf8(r.take(len, &label)?)
            .map_err(|_| integrity(&label, "name is not UTF-8"))?
            .to_string();
        let dtype = r.u8(&name)?;
        if dtype != DTYPE_F32 {
            return Err(integrity(&name, format!("unknown dtype tag {dtype}")));
        }
        let trainable = match r.u8(&name)? {
            0 => false,
            1 => true,
            v => return Err(integrity(&name, format!("bad trainable flag {v}"))),
        };
        let rank = r.u8(&name)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let d = r.u64(&name)?;
            shape.push(usize::try_from(d).map_err(|_| integrity(&name, "dimension overflows usize"))?);
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| integrity(&name, "payload size overflows"))?;
        let payload = r.take(numel, &name)?;
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let expected = fnv1a64(&bytes[start..r.pos]);
        if r.u64(&name)? != expected {
            return Err(integrity(&name, "checksum mismatch"));
        }
        if prev.as_deref().is_some_and(|p| p >= name.as_str()) {
            return Err(integrity(&name, "entries not sorted by name"));
        }
        prev = Some(name.clone());
        store.insert(name, Tensor::new(shape, data)?.with_grad(trainable));
    }
    let len = r.u32("metadata")? as usize;
    let meta = r.take(len, "metadata")?.to_vec();
    if r.u64("metadata")? != fnv1a64(&meta) {
        return Err(integrity("metadata", "checksum mismatch"));
    }
    if r.pos != bytes.len() {
        return Err(integrity("trailer", format!("{} unexpected trailing bytes", bytes.len() - r.pos)));
    }
    Ok((store, meta))
}

/// Writes to a sibling temporary file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let file_name = path.file_name().and_then(|n| n.to_str()).unwrap_or("out");
    let tmp = dir.join(format!(".{file_name}.tmp{}", std::process::id()));
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScheduleSpec {
    pub kind: ScheduleKind,
    pub steps: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub backbone: BackboneConfig,
    pub patch: Patch,
    pub schedule: ScheduleSpec,
    /// Digest of the backbone when it is frozen.
    pub frozen_digest: Option<u64>,
    pub iteration: u64,
    pub phase: Phase,
    pub train: Option<TrainConfig>,
    /// Named stream positions for resuming.
    pub rng: Vec<(String, RngState)>,
    /// Batch cursor `(epoch, position)` of the data iterator.
    pub data_cursor: Option<(u64, usize)>,
    /// Optimizer step count.
    pub optim_step: u64,
}

/// Model parameters, optional optimizer/EMA state (stored under `optim.` and
/// `ema.` prefixes) and run metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub tensors: ParamStore,
}

pub const OPTIM_PREFIX: &str = "optim.";
pub const EMA_PREFIX: &str = "ema.";

impl Checkpoint {
    /// Tensors belonging to the model itself.
    pub fn model_params(&self) -> ParamStore {
        let mut p = ParamStore::new();
        for (name, t) in self.tensors.iter() {
            if !name.starts_with(OPTIM_PREFIX) && !name.starts_with(EMA_PREFIX) {
                p.insert(name.clone(), t.clone());
            }
        }
        p
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = serde_json::to_vec(&self.meta).map_err(|e| Error::config(format!("metadata: {e}")))?;
        Ok(encode(&self.tensors, &meta))
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (tensors, meta) = decode(bytes)?;
        let meta = serde_json::from_slice(&meta).map_err(|e| integrity("metadata", e.to_string()))?;
        Ok(Checkpoint { meta, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::Rng;

    fn store(rng: &mut Rng) -> ParamStore {
        let mut p = ParamStore::new();
        p.insert("b", Tensor::new(vec![2, 3], rng.normal_vec(6)).unwrap().with_grad(true));
        p.insert("a", Tensor::new(vec![4], rng.normal_vec(4)).unwrap());
        p.insert("c.scalar", Tensor::scalar(f32::MIN_POSITIVE));
        p
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let p = store(&mut Rng::new(1));
        let bytes = encode(&p, b"{\"k\":1}");
        let (q, meta) = decode(&bytes).unwrap();
        assert_eq!(meta, b"{\"k\":1}");
        assert_eq!(q, p);
        assert_eq!(encode(&q, &meta), bytes);
    }

    #[test]
    fn bytes_independent_of_insertion_order() {
        let mut rng = Rng::new(2);
        let a = Tensor::new(vec![3], rng.normal_vec(3)).unwrap();
        let b = Tensor::new(vec![2], rng.normal_vec(2)).unwrap();
        let mut p1 = ParamStore::new();
        p1.insert("zeta", a.clone());
        p1.insert("alpha", b.clone());
        let mut p2 = ParamStore::new();
        p2.insert("alpha", b);
        p2.insert("zeta", a);
        assert_eq!(encode(&p1, b""), encode(&p2, b""));
    }

    #[test]
    fn truncation_names_entry() {
        let p = store(&mut Rng::new(3));
        let bytes = encode(&p, b"{}");
        // cut into the payload of the second entry ("b")
        let cut = 12 + (4 + 1 + 3 + 8 + 16 + 8) + 4 + 1 + 3 + 16 + 6;
        match decode(&bytes[..cut]) {
            Err(Error::Integrity { entry, .. }) => assert_eq!(entry, "b"),
            other => panic!("unexpected {other:?}"),
        }
        for len in [0, 3, 11, bytes.len() - 1] {
            assert!(matches!(decode(&bytes[..len]), Err(Error::Integrity { .. })));
        }
    }

    #[test]
    fn flipped_bit_detected() {
        let p = store(&mut Rng::new(4));
        let mut bytes = encode(&p, b"{}");
        bytes[40] ^= 0x10;
        assert!(matches!(decode(&bytes), Err(Error::Integrity { .. })));
    }

    #[test]
    fn bad_magic_and_version() {
        let mut bytes = encode(&ParamStore::new(), b"");
        bytes[0] = b'X';
        assert!(decode(&bytes).is_err());
        let mut bytes = encode(&ParamStore::new(), b"");
        bytes[4] = 2;
        match decode(&bytes) {
            Err(Error::Integrity { detail, .. }) => assert!(detail.contains("version")),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn atomic_write_leaves_no_temp_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.dmpk");
        write_atomic(&path, b"hello").unwrap();
        write_atomic(&path, b"world").unwrap();
        assert_eq!(fs::read(&path).unwrap(), b"world");
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 1);
    }
}
