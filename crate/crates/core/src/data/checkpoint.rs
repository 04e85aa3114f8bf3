//! Versioned checkpoint container.
//!
//! ```text
//! magic        8 bytes  "AFACKPT\0"
//! version      u32
//! arch         u64 length + UTF-8 `key=value` lines
//! tensors      u64 count, then per tensor:
//!                u32 name length, name, u32 rank, u64 dims, f64 data
//! state        u32 stage, u64 epoch, u64 seed, tensor table of momenta
//! checksum     SHA-256 of every preceding byte
//! ```
//!
//! Integers and floats are little-endian.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::nn::{Arch, Model};
use crate::tensor::Tensor;
use crate::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"AFACKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;

/// Optimizer and schedule state needed to resume.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainState {
    pub stage: u32,
    /// Completed epochs.
    pub epoch: u64,
    pub seed: u64,
    /// SGD momentum buffers keyed by parameter name.
    pub momentum: BTreeMap<String, Tensor>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub state: TrainState,
}

fn put_table(out: &mut Vec<u8>, table: &BTreeMap<String, Tensor>) {
    out.extend((table.len() as u64).to_le_bytes());
    for (name, t) in table {
        out.extend((name.len() as u32).to_le_bytes());
        out.extend(name.as_bytes());
        out.extend((t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend((d as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend(v.to_le_bytes());
        }
    }
}

pub fn encode_checkpoint(ckpt: &Checkpoint) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend(CHECKPOINT_MAGIC);
    out.extend(CHECKPOINT_VERSION.to_le_bytes());
    let arch = ckpt.model.arch.to_text();
    out.extend((arch.len() as u64).to_le_bytes());
    out.extend(arch.as_bytes());
    put_table(&mut out, ckpt.model.params());
    out.extend(ckpt.state.stage.to_le_bytes());
    out.extend(ckpt.state.epoch.to_le_bytes());
    out.extend(ckpt.state.seed.to_le_bytes());
    put_table(&mut out, &ckpt.state.momentum);
    let digest = Sha256::digest(&out);
    out.extend(digest);
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self) -> Result<usize> {
        let v = self.u64()?;
        usize::try_from(v)
            .ok()
            .filter(|&v| v <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint(format!("implausible length {v}")))
    }

    fn string(&mut self, n: usize) -> Result<String> {
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::Checkpoint("non-UTF-8 text".into()))
    }

    fn table(&mut self) -> Result<BTreeMap<String, Tensor>> {
        let count = self.len()?;
        let mut table = BTreeMap::new();
        for _ in 0..count {
            let nlen = self.u32()? as usize;
            let name = self.string(nlen)?;
            let rank = self.u32()? as usize;
            if rank > 8 {
                return Err(Error::Checkpoint(format!("tensor {name} has rank {rank}")));
            }
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(self.len()?);
            }
            let n = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .and_then(|n| n.checked_mul(8))
                .ok_or_else(|| Error::Checkpoint(format!("tensor {name} is too large")))?;
            let raw = self.take(n)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            let t = Tensor::new(shape, data).map_err(|e| Error::Checkpoint(e.to_string()))?;
            if table.insert(name.clone(), t).is_some() {
                return Err(Error::Checkpoint(format!("duplicate tensor {name}")));
            }
        }
        Ok(table)
    }
}

/// Verifies the checksum first, so nothing is parsed from a damaged file.
pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < CHECKPOINT_MAGIC.len() + 4 + DIGEST_LEN {
        return Err(Error::Checkpoint("file too short".into()));
    }
    let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
    if Sha256::digest(body).as_slice() != digest {
        return Err(Error::Checkpoint("checksum mismatch".into()));
    }
    let mut r = Reader { bytes: body, pos: 0 };
    if r.take(8)? != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "version {version}, expected {CHECKPOINT_VERSION}"
        )));
    }
    let alen = r.len()?;
    let arch = Arch::from_text(&r.string(alen)?).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let params = r.table()?;
    let model = Model::from_parts(arch, params)?;
    let stage = r.u32()?;
    let epoch = r.u64()?;
    let seed = r.u64()?;
    let momentum = r.table()?;
    if r.pos != body.len() {
        return Err(Error::Checkpoint("trailing bytes before checksum".into()));
    }
    Ok(Checkpoint {
        model,
        state: TrainState {
            stage,
            epoch,
            seed,
            momentum,
        },
    })
}

/// Writes to a sibling temp file and renames it into place.
pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let bytes = encode_checkpoint(ckpt);
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let ctx = || format!("writing checkpoint {}", path.display());
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(ctx(), e))?;
    tmp.write_all(&bytes).map_err(|e| Error::io(ctx(), e))?;
    tmp.as_file().sync_all().map_err(|e| Error::io(ctx(), e))?;
    tmp.persist(path).map_err(|e| Error::io(ctx(), e.error))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path)
        .map_err(|e| Error::io(format!("reading checkpoint {}", path.display()), e))?;
    decode_checkpoint(&bytes)
}
