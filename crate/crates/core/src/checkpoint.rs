//! Versioned binary checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "PGCK" u32:version u64:step
//! rng: [u8;32] seed, u64 stream, u128 word position
//! u32:n_meta   { str key, str value }*
//! u32:n_arrays { str name, u32 rows, u32 cols, f32 data[rows*cols] }*
//! u32:n_counters { str name, u64 value }*
//! ```
//! where `str` is a u32 byte length followed by UTF-8 bytes.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::optim::Adam;
use crate::params::ParamStore;
use crate::rng::RngState;
use crate::trainer::ModelState;

pub const MAGIC: &[u8; 4] = b"PGCK";
pub const FORMAT_VERSION: u32 = 1;

const OPTIMIZERS: [&str; 3] = ["pretrain", "gen", "critic"];

/// Everything read back from a checkpoint file.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub state: ModelState,
    pub meta: BTreeMap<String, String>,
}

struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.0.extend_from_slice(s.as_bytes());
    }
    fn array(&mut self, name: &str, a: &Array2<f64>) {
        self.str(name);
        self.u32(a.nrows() as u32);
        self.u32(a.ncols() as u32);
        for &x in a.iter() {
            self.0.extend_from_slice(&(x as f32).to_le_bytes());
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .at
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::CorruptCheckpoint(format!("truncated at byte {}", self.at)))?;
        let s = &self.buf[self.at..end];
        self.at = end;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn str(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::CorruptCheckpoint("invalid UTF-8 in string".into()))
    }
    fn array(&mut self) -> Result<(String, Array2<f64>)> {
        let name = self.str()?;
        let rows = self.u32()? as usize;
        let cols = self.u32()? as usize;
        let bytes = self.take(rows.checked_mul(cols).and_then(|n| n.checked_mul(4)).ok_or_else(|| {
            Error::CorruptCheckpoint(format!("array {name} has an impossible shape"))
        })?)?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        Ok((name, Array2::from_shape_vec((rows, cols), data).expect("length checked")))
    }
}

fn opt_key(opt: &str, part: &str, name: &str) -> String {
    format!("opt.{opt}.{part}/{name}")
}

/// Write atomically: a temporary file next to `path` is renamed over it.
pub fn save_checkpoint(state: &ModelState, meta: &[(String, String)], path: &Path) -> Result<()> {
    let mut w = Writer(Vec::new());
    w.0.extend_from_slice(MAGIC);
    w.u32(FORMAT_VERSION);
    w.u64(state.step);
    let rng = RngState::capture(&state.rng);
    w.0.extend_from_slice(&rng.seed);
    w.u64(rng.stream);
    w.0.extend_from_slice(&rng.word_pos.to_le_bytes());

    let opts = [&state.pretrain_opt, &state.gen_opt, &state.critic_opt];
    let mut all_meta: Vec<(String, String)> = meta.to_vec();
    for (tag, opt) in OPTIMIZERS.iter().zip(opts) {
        for (k, v) in [("lr", opt.lr), ("beta1", opt.beta1), ("beta2", opt.beta2), ("eps", opt.eps)] {
            all_meta.push((format!("opt.{tag}.{k}"), format!("{v:?}")));
        }
    }
    w.u32(all_meta.len() as u32);
    for (k, v) in &all_meta {
        w.str(k);
        w.str(v);
    }

    let mut arrays: Vec<(String, &Array2<f64>)> = state.params.iter().map(|(n, a)| (n.clone(), a)).collect();
    for (tag, opt) in OPTIMIZERS.iter().zip(opts) {
        arrays.extend(opt.m.iter().map(|(n, a)| (opt_key(tag, "m", n), a)));
        arrays.extend(opt.v.iter().map(|(n, a)| (opt_key(tag, "v", n), a)));
    }
    w.u32(arrays.len() as u32);
    for (n, a) in &arrays {
        w.array(n, a);
    }

    w.u32(OPTIMIZERS.len() as u32);
    for (tag, opt) in OPTIMIZERS.iter().zip(opts) {
        w.str(&format!("opt.{tag}.t"));
        w.u64(opt.t);
    }

    let tmp = path.with_extension("ckpt.tmp");
    std::fs::write(&tmp, &w.0).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = Reader { buf: &buf, at: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::CorruptCheckpoint(format!("{} is not a checkpoint", path.display())));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::CheckpointVersion {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let step = r.u64()?;
    let seed: [u8; 32] = r.take(32)?.try_into().unwrap();
    let stream = r.u64()?;
    let word_pos = u128::from_le_bytes(r.take(16)?.try_into().unwrap());

    let mut meta = BTreeMap::new();
    for _ in 0..r.u32()? {
        let k = r.str()?;
        meta.insert(k, r.str()?);
    }
    let mut params = ParamStore::new();
    let mut moments: BTreeMap<String, Array2<f64>> = BTreeMap::new();
    for _ in 0..r.u32()? {
        let (name, a) = r.array()?;
        if name.starts_with("opt.") {
            moments.insert(name, a);
        } else {
            params.insert(name, a);
        }
    }
    let mut counters = BTreeMap::new();
    for _ in 0..r.u32()? {
        let k = r.str()?;
        counters.insert(k, r.u64()?);
    }
    if r.at != buf.len() {
        return Err(Error::CorruptCheckpoint(format!("{} trailing bytes", buf.len() - r.at)));
    }

    let mut opts = Vec::new();
    for tag in OPTIMIZERS {
        let hyper = |k: &str| -> Result<f64> {
            let key = format!("opt.{tag}.{k}");
            meta.get(&key)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::CorruptCheckpoint(format!("missing {key}")))
        };
        let mut opt = Adam::new(hyper("lr")?, hyper("beta1")?, hyper("beta2")?);
        opt.eps = hyper("eps")?;
        opt.t = *counters
            .get(&format!("opt.{tag}.t"))
            .ok_or_else(|| Error::CorruptCheckpoint(format!("missing opt.{tag}.t")))?;
        for (part, map) in [("m", &mut opt.m), ("v", &mut opt.v)] {
            let prefix = format!("opt.{tag}.{part}/");
            for (k, a) in &moments {
                if let Some(name) = k.strip_prefix(&prefix) {
                    map.insert(name.to_string(), a.clone());
                }
            }
        }
        opts.push(opt);
    }
    meta.retain(|k, _| !k.starts_with("opt."));
    let critic_opt = opts.pop().unwrap();
    let gen_opt = opts.pop().unwrap();
    let pretrain_opt = opts.pop().unwrap();
    Ok(Checkpoint {
        state: ModelState {
            params,
            pretrain_opt,
            gen_opt,
            critic_opt,
            step,
            rng: RngState { seed, stream, word_pos }.restore(),
        },
        meta,
    })
}

/// Short stable identifier of a checkpoint file's contents.
pub fn checkpoint_id(path: &Path) -> Result<String> {
    let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(format!("{:016x}", fnv1a(&buf)))
}

pub fn fnv1a(bytes: &[u8]) -> u64 {
    bytes
        .iter()
        .fold(0xcbf29ce484222325u64, |h, &b| (h ^ b as u64).wrapping_mul(0x100000001b3))
}
