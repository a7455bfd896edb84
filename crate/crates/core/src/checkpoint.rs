//! `MSFC` checkpoint container.
//!
//! All integers little-endian; payloads are `f64` little-endian.
//!
//! ```text
//! "MSFC" | version u16 (=1)
//! model config: groups u32, blocks u32, channels u32, scale u32,
//!               use_ca u8, ca_reduction u32, use_multifan u8
//! tensor count u32, then per tensor (sorted by path):
//!     path length u16, path UTF-8, dims 4 x u32, payload
//! train state flag u8; when 1:
//!     epoch u64, step u64, adam t u64,
//!     first moments then second moments, one payload per tensor, same order
//! crc32 u32 over every preceding byte
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::layers::ParamStore;
use crate::model::{Model, ModelConfig};
use crate::tensor::{Shape, Tensor};

pub const MAGIC: &[u8; 4] = b"MSFC";
pub const VERSION: u16 = 1;

/// First and second moment estimates of the ADAM optimizer.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
    pub t: u64,
}

impl AdamState {
    pub fn for_params(params: &ParamStore) -> Self {
        let zeros: BTreeMap<String, Tensor> = params
            .iter()
            .map(|(k, v)| (k.clone(), Tensor::zeros(v.shape())))
            .collect();
        AdamState {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }
}

/// Progress needed to resume training exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    /// Epochs fully completed.
    pub epoch: u64,
    /// Optimizer steps taken.
    pub step: u64,
    pub adam: AdamState,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub train: Option<TrainState>,
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u16(&mut self, v: u16) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u32(&mut self, v: usize) -> Result<()> {
        let v = u32::try_from(v).map_err(|_| Error::Format(format!("{v} does not fit u32")))?;
        self.0.extend_from_slice(&v.to_le_bytes());
        Ok(())
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn payload(&mut self, t: &Tensor) {
        for v in t.data() {
            self.0.extend_from_slice(&v.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Truncated {
                expected: self.pos + n,
                found: self.buf.len(),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }
    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn payload(&mut self, shape: Shape) -> Result<Tensor> {
        let bytes = self.take(shape.numel() * 8)?;
        let data = bytes
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
            .collect();
        Tensor::from_vec(shape, data)
    }
    fn flag(&mut self) -> Result<bool> {
        match self.u8()? {
            0 => Ok(false),
            1 => Ok(true),
            v => Err(Error::Format(format!("bad flag byte {v}"))),
        }
    }
}

impl Checkpoint {
    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(MAGIC);
        w.u16(VERSION);
        let c = &self.model.config;
        w.u32(c.groups)?;
        w.u32(c.blocks)?;
        w.u32(c.channels)?;
        w.u32(c.scale)?;
        w.u8(c.use_ca as u8);
        w.u32(c.ca_reduction)?;
        w.u8(c.use_multifan as u8);
        let params = &self.model.params;
        w.u32(params.len())?;
        for (name, t) in params.iter() {
            let bytes = name.as_bytes();
            let len = u16::try_from(bytes.len()).map_err(|_| Error::Format("parameter path too long".into()))?;
            w.u16(len);
            w.0.extend_from_slice(bytes);
            for d in t.shape().dims() {
                w.u32(d)?;
            }
            w.payload(t);
        }
        match &self.train {
            None => w.u8(0),
            Some(ts) => {
                w.u8(1);
                w.u64(ts.epoch);
                w.u64(ts.step);
                w.u64(ts.adam.t);
                for moments in [&ts.adam.m, &ts.adam.v] {
                    for (name, p) in params.iter() {
                        let t = moments
                            .get(name)
                            .ok_or_else(|| Error::Format(format!("optimizer state lacks {name}")))?;
                        if t.shape() != p.shape() {
                            return Err(Error::Format(format!("optimizer state for {name} has wrong shape")));
                        }
                        w.payload(t);
                    }
                }
            }
        }
        let crc = crc32fast::hash(&w.0);
        w.0.extend_from_slice(&crc.to_le_bytes());
        Ok(w.0)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 2 + 4 {
            return Err(Error::Truncated {
                expected: MAGIC.len() + 6,
                found: bytes.len(),
            });
        }
        if &bytes[..4] != MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
        let computed = crc32fast::hash(body);
        if stored != computed {
            return Err(Error::Checksum { stored, computed });
        }
        let mut r = Reader { buf: body, pos: 4 };
        let version = r.u16()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let config = ModelConfig {
            groups: r.u32()?,
            blocks: r.u32()?,
            channels: r.u32()?,
            scale: r.u32()?,
            use_ca: r.flag()?,
            ca_reduction: r.u32()?,
            use_multifan: r.flag()?,
        };
        let count = r.u32()?;
        let mut params = ParamStore::new();
        let mut order = Vec::with_capacity(count);
        for _ in 0..count {
            let len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::Format("parameter path is not UTF-8".into()))?
                .to_string();
            let shape = Shape::new(r.u32()?, r.u32()?, r.u32()?, r.u32()?);
            let t = r.payload(shape)?;
            order.push((name.clone(), shape));
            params.insert(name, t).map_err(|e| Error::Format(e.to_string()))?;
        }
        let train = if r.flag()? {
            let epoch = r.u64()?;
            let step = r.u64()?;
            let t = r.u64()?;
            let read_moments = |r: &mut Reader| -> Result<BTreeMap<String, Tensor>> {
                order
                    .iter()
                    .map(|(name, shape)| Ok((name.clone(), r.payload(*shape)?)))
                    .collect()
            };
            let m = read_moments(&mut r)?;
            let v = read_moments(&mut r)?;
            Some(TrainState {
                epoch,
                step,
                adam: AdamState { m, v, t },
            })
        } else {
            None
        };
        if r.pos != body.len() {
            return Err(Error::Format(format!("{} unexpected trailing bytes", body.len() - r.pos)));
        }
        let model = Model::from_parts(config, params).map_err(|e| Error::Format(e.to_string()))?;
        Ok(Checkpoint { model, train })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let bytes = self.encode()?;
        fs::write(path.as_ref(), bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let bytes = fs::read(path.as_ref()).map_err(|e| Error::io(path.as_ref(), e))?;
        Checkpoint::decode(&bytes)
    }
}
