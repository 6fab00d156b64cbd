//! `XFC1` checkpoints: config, parameters, Adam moments, and RNG position.
//!
//! Layout (little-endian): magic `XFC1`, `u32` version, `u64` config length and
//! the config as JSON, `u64` Adam step, then the RNG seed (32 bytes), stream
//! (`u64`) and word position (`u128`). A `u32` entry count follows, then one
//! table entry per tensor: `u32` name length and name, `u8` dtype (0 = f64),
//! `u32` rank and `u64` dims, `u64` byte offset into the data section. Last
//! comes the `u64` data length and the raw buffers. Tensor names are
//! `param/<name>`, `adam.m/<name>` and `adam.v/<name>`.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::AdamState;
use crate::config::ExperimentConfig;
use crate::error::{format_err, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"XFC1";
pub const CHECKPOINT_VERSION: u32 = 1;
const DTYPE_F64: u8 = 0;

/// Exact position of a ChaCha8 stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ExperimentConfig,
    pub params: ParamStore,
    pub adam: AdamState,
    pub rng: RngState,
}

fn err(detail: impl Into<String>) -> crate::Error {
    format_err("XFC1", detail)
}

impl Checkpoint {
    pub fn write(&self, out: &mut impl Write) -> Result<()> {
        let mut entries: Vec<(String, Vec<usize>, &[f64])> = Vec::new();
        for (name, t) in self.params.iter() {
            entries.push((format!("param/{name}"), t.shape().to_vec(), t.data()));
        }
        for (prefix, moments) in [("adam.m", &self.adam.m), ("adam.v", &self.adam.v)] {
            for (name, buf) in moments {
                entries.push((format!("{prefix}/{name}"), vec![buf.len()], buf));
            }
        }
        let config = self.config.to_json()?;
        out.write_all(CHECKPOINT_MAGIC)?;
        out.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        out.write_all(&(config.len() as u64).to_le_bytes())?;
        out.write_all(config.as_bytes())?;
        out.write_all(&self.adam.step.to_le_bytes())?;
        out.write_all(&self.rng.seed)?;
        out.write_all(&self.rng.stream.to_le_bytes())?;
        out.write_all(&self.rng.word_pos.to_le_bytes())?;
        out.write_all(&(entries.len() as u32).to_le_bytes())?;
        let mut offset = 0u64;
        for (name, shape, data) in &entries {
            out.write_all(&(name.len() as u32).to_le_bytes())?;
            out.write_all(name.as_bytes())?;
            out.write_all(&[DTYPE_F64])?;
            out.write_all(&(shape.len() as u32).to_le_bytes())?;
            for &d in shape {
                out.write_all(&(d as u64).to_le_bytes())?;
            }
            out.write_all(&offset.to_le_bytes())?;
            offset += 8 * data.len() as u64;
        }
        out.write_all(&offset.to_le_bytes())?;
        for (_, _, data) in &entries {
            for v in *data {
                out.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read(r: &mut impl Read) -> Result<Self> {
        let mut buf = Vec::new();
        r.read_to_end(&mut buf)?;
        let mut c = Cursor { buf: &buf, pos: 0 };
        if c.take(4)? != CHECKPOINT_MAGIC {
            return Err(err("bad magic"));
        }
        let version = c.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(err(format!("unsupported version {version}")));
        }
        let config_len = c.u64()? as usize;
        let config_text =
            std::str::from_utf8(c.take(config_len)?).map_err(|e| err(e.to_string()))?;
        let config = ExperimentConfig::from_json(config_text)?;
        let step = c.u64()?;
        let seed: [u8; 32] = c.take(32)?.try_into().expect("32 bytes");
        let stream = c.u64()?;
        let word_pos = u128::from_le_bytes(c.take(16)?.try_into().expect("16 bytes"));
        let count = c.u32()? as usize;
        let mut table = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name_len = c.u32()? as usize;
            let name = std::str::from_utf8(c.take(name_len)?)
                .map_err(|e| err(e.to_string()))?
                .to_string();
            let dtype = c.take(1)?[0];
            if dtype != DTYPE_F64 {
                return Err(err(format!("{name}: unsupported dtype {dtype}")));
            }
            let rank = c.u32()? as usize;
            let shape = (0..rank)
                .map(|_| c.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let offset = c.u64()? as usize;
            table.push((name, shape, offset));
        }
        let data_len = c.u64()? as usize;
        let data = c.take(data_len)?;
        if c.pos != buf.len() {
            return Err(err("trailing bytes"));
        }
        let mut params = ParamStore::new();
        let mut m = BTreeMap::new();
        let mut v = BTreeMap::new();
        for (name, shape, offset) in table {
            let n: usize = shape.iter().product();
            let end = n
                .checked_mul(8)
                .and_then(|b| b.checked_add(offset))
                .filter(|&e| e <= data.len())
                .ok_or_else(|| err(format!("{name}: buffer out of range")))?;
            let values: Vec<f64> = data[offset..end]
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
                .collect();
            if let Some(p) = name.strip_prefix("param/") {
                params.insert(p, Tensor::new(&shape, values)?);
            } else if let Some(p) = name.strip_prefix("adam.m/") {
                m.insert(p.to_string(), values);
            } else if let Some(p) = name.strip_prefix("adam.v/") {
                v.insert(p.to_string(), values);
            } else {
                return Err(err(format!("unknown entry {name}")));
            }
        }
        let t = &config.train;
        let adam = AdamState {
            lr: t.lr,
            beta1: t.beta1,
            beta2: t.beta2,
            eps: t.eps,
            step,
            m,
            v,
        };
        Ok(Self {
            config,
            params,
            adam,
            rng: RngState {
                seed,
                stream,
                word_pos,
            },
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read(&mut std::fs::File::open(path)?)
    }
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| err("truncated"))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn rng_state_resumes_the_stream() {
        let mut a = ChaCha8Rng::seed_from_u64(11);
        a.set_stream(3);
        let _: [u64; 5] = std::array::from_fn(|_| a.random());
        let mut b = RngState::capture(&a).restore();
        assert_eq!(a.random::<u64>(), b.random::<u64>());
    }

    #[test]
    fn roundtrip_is_exact() {
        let mut params = ParamStore::new();
        params.insert(
            "a.weight",
            Tensor::new(&[2, 2], vec![0.1, -2.5, 1e-300, 7.0]).unwrap(),
        );
        params.insert("b", Tensor::new(&[1], vec![3.0]).unwrap());
        let mut adam = AdamState::new(1e-4, 0.9, 0.999, 1e-8);
        adam.step = 7;
        adam.m.insert("b".into(), vec![0.25]);
        adam.v.insert("b".into(), vec![0.5]);
        let ck = Checkpoint {
            config: ExperimentConfig::small_toy(),
            params,
            adam,
            rng: RngState::capture(&ChaCha8Rng::seed_from_u64(5)),
        };
        let mut buf = Vec::new();
        ck.write(&mut buf).unwrap();
        assert_eq!(&buf[..4], b"XFC1");
        assert_eq!(Checkpoint::read(&mut buf.as_slice()).unwrap(), ck);
        buf.truncate(buf.len() - 1);
        assert!(Checkpoint::read(&mut buf.as_slice()).is_err());
    }
}
