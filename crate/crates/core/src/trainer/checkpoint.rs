//! Binary checkpoints and the line-delimited metrics log.
//!
//! Layout (little endian):
//!
//! ```text
//! magic "TFLWCKPT" | version u32 | config digest [32]
//! params | adam step u64, m, v | soup flag u8 [+ params]
//! rng seed [32], stream u64, word_pos u128
//! progress/phase state as length-prefixed JSON
//! sha256 of everything above [32]
//! ```
//!
//! A parameter set is `count u64` followed by, per tensor, a length-prefixed
//! name, `rank u64`, dims `u64`, and the `f64` data.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{AdamW, MetricRecord, NdpoPhaseState, Progress, TrainerState};
use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"TFLWCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    /// sha256 of the run configuration.
    pub config_digest: [u8; 32],
    pub state: TrainerState,
}

#[derive(Serialize, Deserialize)]
struct Extra {
    progress: Progress,
    ndpo: Option<NdpoPhaseState>,
    log: Vec<MetricRecord>,
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_bytes(out: &mut Vec<u8>, b: &[u8]) {
    put_u64(out, b.len() as u64);
    out.extend_from_slice(b);
}

fn put_tensor(out: &mut Vec<u8>, name: &str, t: &Tensor) {
    put_bytes(out, name.as_bytes());
    put_u64(out, t.rank() as u64);
    for &d in t.shape() {
        put_u64(out, d as u64);
    }
    for &x in t.data() {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

fn put_store(out: &mut Vec<u8>, s: &ParamStore) {
    put_u64(out, s.len() as u64);
    for (n, t) in s.names().iter().zip(s.values()) {
        put_tensor(out, n, t);
    }
}

fn put_moments(out: &mut Vec<u8>, names: &[String], ts: &[Tensor]) {
    put_u64(out, ts.len() as u64);
    for (n, t) in names.iter().zip(ts) {
        put_tensor(out, n, t);
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Corrupt("unexpected end of data".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn len(&mut self) -> Result<usize> {
        let n = self.u64()?;
        if n > (self.buf.len() - self.pos) as u64 * 8 + 64 {
            return Err(Error::Corrupt(format!("implausible length {n}")));
        }
        Ok(n as usize)
    }

    fn bytes(&mut self) -> Result<&'a [u8]> {
        let n = self.len()?;
        self.take(n)
    }

    fn tensor(&mut self) -> Result<(String, Tensor)> {
        let name = String::from_utf8(self.bytes()?.to_vec())
            .map_err(|_| Error::Corrupt("bad name".into()))?;
        let rank = self.len()?;
        let shape = (0..rank).map(|_| self.len()).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let raw = self.take(n * 8)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok((name, Tensor::new(&shape, data)?))
    }

    fn store(&mut self) -> Result<ParamStore> {
        let n = self.len()?;
        let mut s = ParamStore::new();
        for _ in 0..n {
            let (name, t) = self.tensor()?;
            if s.find(&name).is_some() {
                return Err(Error::Corrupt(format!("duplicate parameter {name}")));
            }
            s.add(name, t);
        }
        Ok(s)
    }

    fn tensors(&mut self) -> Result<Vec<Tensor>> {
        let n = self.len()?;
        (0..n).map(|_| self.tensor().map(|(_, t)| t)).collect()
    }
}

pub fn encode_checkpoint(ck: &Checkpoint) -> Vec<u8> {
    let st = &ck.state;
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&ck.config_digest);
    put_store(&mut out, &st.params);
    put_u64(&mut out, st.opt.step);
    put_moments(&mut out, st.params.names(), &st.opt.m);
    put_moments(&mut out, st.params.names(), &st.opt.v);
    match &st.soup {
        Some(s) => {
            out.push(1);
            put_store(&mut out, s);
        }
        None => out.push(0),
    }
    out.extend_from_slice(&st.rng.get_seed());
    put_u64(&mut out, st.rng.get_stream());
    out.extend_from_slice(&st.rng.get_word_pos().to_le_bytes());
    let extra = Extra {
        progress: st.progress.clone(),
        ndpo: st.ndpo.clone(),
        log: st.log.clone(),
    };
    put_bytes(
        &mut out,
        &serde_json::to_vec(&extra).expect("serializable state"),
    );
    let sum = Sha256::digest(&out);
    out.extend_from_slice(&sum);
    out
}

pub fn decode_checkpoint(buf: &[u8]) -> Result<Checkpoint> {
    if buf.len() < 8 + 4 + 32 + 32 {
        return Err(Error::Corrupt("checksum mismatch: file too short".into()));
    }
    let (body, sum) = buf.split_at(buf.len() - 32);
    if Sha256::digest(body).as_slice() != sum {
        return Err(Error::Corrupt("checksum mismatch".into()));
    }
    let mut r = Reader { buf: body, pos: 0 };
    if r.take(8)? != CHECKPOINT_MAGIC {
        return Err(Error::Corrupt("not a checkpoint file".into()));
    }
    let version = u32::from_le_bytes(r.take(4)?.try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(Error::VersionMismatch {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let config_digest: [u8; 32] = r.take(32)?.try_into().unwrap();
    let params = r.store()?;
    let step = r.u64()?;
    let m = r.tensors()?;
    let v = r.tensors()?;
    if m.len() != params.len() || v.len() != params.len() {
        return Err(Error::Corrupt(
            "optimizer state does not match parameters".into(),
        ));
    }
    let soup = match r.take(1)?[0] {
        0 => None,
        1 => Some(r.store()?),
        f => return Err(Error::Corrupt(format!("bad soup flag {f}"))),
    };
    let seed: [u8; 32] = r.take(32)?.try_into().unwrap();
    let stream = r.u64()?;
    let word_pos = u128::from_le_bytes(r.take(16)?.try_into().unwrap());
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(stream);
    rng.set_word_pos(word_pos);
    let extra: Extra = serde_json::from_slice(r.bytes()?)
        .map_err(|e| Error::Corrupt(format!("state record: {e}")))?;
    if r.pos != body.len() {
        return Err(Error::Corrupt("trailing data".into()));
    }
    Ok(Checkpoint {
        config_digest,
        state: TrainerState {
            params,
            opt: AdamW { step, m, v },
            soup,
            rng,
            progress: extra.progress,
            ndpo: extra.ndpo,
            log: extra.log,
        },
    })
}

pub fn save_checkpoint(ck: &Checkpoint, path: &Path) -> Result<()> {
    fs::write(path, encode_checkpoint(ck)).map_err(|e| Error::io(path, e))
}

/// Loads a checkpoint, checking it against `expected_digest` when given.
pub fn load_checkpoint(path: &Path, expected_digest: Option<&[u8; 32]>) -> Result<Checkpoint> {
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    let ck = decode_checkpoint(&buf)?;
    if let Some(d) = expected_digest {
        if d != &ck.config_digest {
            return Err(Error::DigestMismatch {
                checkpoint: hex(&ck.config_digest),
                config: hex(d),
            });
        }
    }
    Ok(ck)
}

pub fn write_metrics_jsonl(path: &Path, records: &[MetricRecord]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    for r in records {
        let line = serde_json::to_string(r).expect("serializable record");
        writeln!(f, "{line}").map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

pub fn read_metrics_jsonl(path: &Path) -> Result<Vec<MetricRecord>> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for line in BufReader::new(f).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| Error::Corrupt(format!("metrics line: {e}")))?,
        );
    }
    Ok(out)
}
