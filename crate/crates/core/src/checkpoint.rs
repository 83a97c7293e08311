//! Binary checkpoint container.
//!
//! Layout, all integers little endian:
//!
//! ```text
//! "TSLAB1"
//! u32 n, n bytes   config block: `key=value` lines
//! u32 count        number of parameters
//! per parameter:   u32 name length, name bytes, u32 ndim, ndim x u64 dims,
//!                  product(dims) x f64
//! ```
//!
//! The config block carries the model configuration plus the fingerprint
//! of the vocabulary the model was trained with.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::model::{param_specs, ModelConfig, ModelWeights};

pub const MAGIC: &[u8; 6] = b"TSLAB1";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub weights: ModelWeights,
    pub vocab_fingerprint: String,
}

fn config_block(c: &ModelConfig, fingerprint: &str) -> String {
    format!(
        "vocab_size={}\nd_model={}\nlayers={}\nheads={}\nffn={}\nmax_len={}\nseed={}\nvocab_fingerprint={}\n",
        c.vocab_size, c.d_model, c.layers, c.heads, c.ffn, c.max_len, c.seed, fingerprint
    )
}

pub fn to_bytes(ck: &Checkpoint) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    let block = config_block(&ck.weights.config, &ck.vocab_fingerprint);
    out.extend_from_slice(&(block.len() as u32).to_le_bytes());
    out.extend_from_slice(block.as_bytes());
    let specs = param_specs(&ck.weights.config);
    out.extend_from_slice(&(specs.len() as u32).to_le_bytes());
    for ((name, _), p) in specs.iter().zip(&ck.weights.params) {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(p.shape().len() as u32).to_le_bytes());
        for &d in p.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in p.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }

    fn u64(&mut self) -> Result<usize> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()) as usize)
    }

    fn str(&mut self, n: usize) -> Result<&'a str> {
        std::str::from_utf8(self.take(n)?).map_err(|_| Error::Checkpoint("invalid utf-8".into()))
    }
}

fn parse_config(block: &str) -> Result<(ModelConfig, String)> {
    let mut kv = BTreeMap::new();
    for line in block.lines().filter(|l| !l.trim().is_empty()) {
        let (k, v) = line.split_once('=').ok_or_else(|| Error::Checkpoint(format!("bad config line {line:?}")))?;
        kv.insert(k.trim(), v.trim());
    }
    let num = |k: &str| -> Result<u64> {
        kv.get(k)
            .ok_or_else(|| Error::Checkpoint(format!("config is missing {k}")))?
            .parse()
            .map_err(|_| Error::Checkpoint(format!("config value {k} is not an integer")))
    };
    let cfg = ModelConfig {
        vocab_size: num("vocab_size")? as usize,
        d_model: num("d_model")? as usize,
        layers: num("layers")? as usize,
        heads: num("heads")? as usize,
        ffn: num("ffn")? as usize,
        max_len: num("max_len")? as usize,
        seed: num("seed")?,
    };
    let fp = kv.get("vocab_fingerprint").map(|s| s.to_string()).unwrap_or_default();
    Ok((cfg, fp))
}

pub fn from_bytes(buf: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(MAGIC.len())? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let n = r.u32()?;
    let (config, vocab_fingerprint) = parse_config(r.str(n)?)?;
    config.validate()?;
    let specs = param_specs(&config);
    let count = r.u32()?;
    if count != specs.len() {
        return Err(Error::Checkpoint(format!("expected {} parameters, found {count}", specs.len())));
    }
    let mut params = Vec::with_capacity(count);
    for (name, shape) in &specs {
        let len = r.u32()?;
        let got = r.str(len)?;
        if got != name {
            return Err(Error::Checkpoint(format!("expected parameter {name}, found {got}")));
        }
        let ndim = r.u32()?;
        let dims = (0..ndim).map(|_| r.u64()).collect::<Result<Vec<_>>>()?;
        if &dims != shape {
            return Err(Error::Checkpoint(format!("{name}: shape {dims:?} != {shape:?}")));
        }
        let numel: usize = dims.iter().product();
        let bytes = r.take(numel * 8)?;
        let data = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        params.push(Tensor::new(dims, data)?);
    }
    if r.pos != buf.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", buf.len() - r.pos)));
    }
    Ok(Checkpoint { weights: ModelWeights::from_params(config, params)?, vocab_fingerprint })
}

pub fn save(ck: &Checkpoint, path: &Path) -> Result<()> {
    fs::write(path, to_bytes(ck))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    from_bytes(&fs::read(path)?)
}
