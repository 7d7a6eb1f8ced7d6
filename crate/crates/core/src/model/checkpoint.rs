//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic "TAEMICKP" | version u32 | config: u64 length + JSON
//! | param count u32 | per param: name (u32 length + UTF-8), decay u8,
//!   rank u32, extents u64 × rank, values f64 × numel
//! | has_state u8 | [state JSON block | RNG seed 32 bytes, stream u64,
//!   word position u128 | first moments | second moments]
//! | SHA-256 of everything above
//! ```

use std::path::Path;

use sha2::{Digest, Sha256};

use super::{TaemiConfig, TaemiModel};
use crate::error::{Error, Result};
use crate::optim::{RngState, TrainState};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"TAEMICKP";
pub const CHECKPOINT_VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;

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
    fn bytes(&mut self, b: &[u8]) {
        self.0.extend_from_slice(b);
    }
    fn block(&mut self, b: &[u8]) {
        self.u64(b.len() as u64);
        self.bytes(b);
    }
    fn floats(&mut self, xs: &[f64]) {
        for x in xs {
            self.bytes(&x.to_le_bytes());
        }
    }
}

struct Reader<'b> {
    buf: &'b [u8],
    pos: usize,
}

impl<'b> Reader<'b> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'b [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::CorruptCheckpoint(format!("truncated while reading {what}")));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }
    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }
    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
    fn len(&mut self, what: &str) -> Result<usize> {
        let n = self.u64(what)?;
        usize::try_from(n).map_err(|_| Error::CorruptCheckpoint(format!("{what}: length {n} too large")))
    }
    fn block(&mut self, what: &str) -> Result<&'b [u8]> {
        let n = self.len(what)?;
        self.take(n, what)
    }
    fn floats(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| overflow(what))?, what)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
}

fn overflow(what: &str) -> Error {
    Error::CorruptCheckpoint(format!("{what}: size overflow"))
}

fn encode(model: &TaemiModel, state: Option<&TrainState>) -> Vec<u8> {
    let mut w = Writer(Vec::new());
    w.bytes(CHECKPOINT_MAGIC);
    w.u32(CHECKPOINT_VERSION);
    w.block(&serde_json::to_vec(&model.config).expect("plain data serializes"));
    w.u32(model.params.len() as u32);
    for p in model.params.iter() {
        w.u32(p.name.len() as u32);
        w.bytes(p.name.as_bytes());
        w.u8(p.decay as u8);
        w.u32(p.tensor.shape().len() as u32);
        for &e in p.tensor.shape() {
            w.u64(e as u64);
        }
        w.floats(p.tensor.data());
    }
    match state {
        None => w.u8(0),
        Some(s) => {
            w.u8(1);
            w.block(&serde_json::to_vec(&s.meta()).expect("plain data serializes"));
            let rng = RngState::capture(&s.rng);
            w.bytes(&rng.seed);
            w.u64(rng.stream);
            w.bytes(&rng.word_pos.to_le_bytes());
            for m in &s.optimizer.m {
                w.floats(m);
            }
            for v in &s.optimizer.v {
                w.floats(v);
            }
        }
    }
    let digest = Sha256::digest(&w.0);
    w.bytes(&digest);
    w.0
}

fn decode(buf: &[u8]) -> Result<(TaemiModel, Option<TrainState>)> {
    if buf.len() < CHECKPOINT_MAGIC.len() + 4 + DIGEST_LEN {
        return Err(Error::CorruptCheckpoint(format!("file is only {} bytes", buf.len())));
    }
    if &buf[..CHECKPOINT_MAGIC.len()] != CHECKPOINT_MAGIC {
        return Err(Error::CorruptCheckpoint("bad magic".into()));
    }
    let (body, digest) = buf.split_at(buf.len() - DIGEST_LEN);
    if Sha256::digest(body).as_slice() != digest {
        return Err(Error::CorruptCheckpoint("checksum mismatch (truncated or modified file)".into()));
    }
    let mut r = Reader {
        buf: body,
        pos: CHECKPOINT_MAGIC.len(),
    };
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::CheckpointVersion {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let corrupt = |what: &str, e: &dyn std::fmt::Display| Error::CorruptCheckpoint(format!("{what}: {e}"));
    let config: TaemiConfig = serde_json::from_slice(r.block("config")?).map_err(|e| corrupt("config", &e))?;
    let mut model = TaemiModel::seeded(config, 0).map_err(|e| corrupt("config", &e))?;

    let count = r.u32("parameter count")? as usize;
    if count != model.params.len() {
        return Err(Error::CorruptCheckpoint(format!(
            "{count} parameters stored, configuration has {}",
            model.params.len()
        )));
    }
    for p in model.params.iter_mut() {
        let name_len = r.u32("parameter name")? as usize;
        let name = std::str::from_utf8(r.take(name_len, "parameter name")?).map_err(|e| corrupt("parameter name", &e))?;
        if name != p.name {
            return Err(Error::CorruptCheckpoint(format!("expected parameter {}, found {name}", p.name)));
        }
        let decay = r.u8("decay flag")? != 0;
        let rank = r.u32("rank")? as usize;
        let mut shape = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            shape.push(r.len("extent")?);
        }
        if shape != p.tensor.shape() || decay != p.decay {
            return Err(Error::CorruptCheckpoint(format!(
                "{name}: stored shape {shape:?} does not match {:?}",
                p.tensor.shape()
            )));
        }
        let values = r.floats(p.tensor.numel(), name)?;
        p.tensor = Tensor::new(shape, values)?.requiring_grad();
    }

    let state = match r.u8("state flag")? {
        0 => None,
        1 => {
            let meta = serde_json::from_slice(r.block("train state")?).map_err(|e| corrupt("train state", &e))?;
            let seed: [u8; 32] = r.take(32, "rng seed")?.try_into().expect("32 bytes");
            let stream = r.u64("rng stream")?;
            let word_pos = u128::from_le_bytes(r.take(16, "rng position")?.try_into().expect("16 bytes"));
            let rng = RngState { seed, stream, word_pos }.restore();
            let sizes: Vec<usize> = model.params.iter().map(|p| p.tensor.numel()).collect();
            let m = sizes.iter().map(|&n| r.floats(n, "first moment")).collect::<Result<Vec<_>>>()?;
            let v = sizes.iter().map(|&n| r.floats(n, "second moment")).collect::<Result<Vec<_>>>()?;
            Some(TrainState::from_meta(meta, m, v, rng))
        }
        f => return Err(Error::CorruptCheckpoint(format!("bad state flag {f}"))),
    };
    if r.pos != body.len() {
        return Err(Error::CorruptCheckpoint(format!("{} trailing bytes", body.len() - r.pos)));
    }
    model.params.check_finite().map_err(|e| corrupt("parameters", &e))?;
    Ok((model, state))
}

/// Writes atomically: the file appears complete or not at all.
pub fn save_checkpoint(model: &TaemiModel, state: Option<&TrainState>, path: &Path) -> Result<()> {
    let bytes = encode(model, state);
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    std::fs::write(&tmp, &bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<(TaemiModel, Option<TrainState>)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}
