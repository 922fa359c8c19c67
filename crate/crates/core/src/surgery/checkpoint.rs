use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{ModelConfig, Network};
use crate::tensor::{Real, Tensor};

pub const MAGIC: [u8; 4] = *b"UDCK";
pub const VERSION: u32 = 1;

/// One named tensor of a checkpoint.
#[derive(Clone, Debug, PartialEq)]
pub struct Record<T> {
    pub name: String,
    pub value: Tensor<T>,
}

impl<T> Record<T> {
    pub fn new(name: impl Into<String>, value: Tensor<T>) -> Self {
        Record { name: name.into(), value }
    }
}

/// Network configuration plus named tensors in registry order, optionally
/// followed by optimizer momentum buffers.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T> {
    pub config: ModelConfig,
    pub records: Vec<Record<T>>,
    pub optimizer: Option<Vec<Record<T>>>,
}

impl<T: Real> Checkpoint<T> {
    /// Snapshot of every registered parameter, running statistics included.
    pub fn from_network(net: &Network<T>) -> Self {
        Checkpoint {
            config: net.config().clone(),
            records: net.store().iter().map(|(_, p)| Record::new(p.name.clone(), p.value.clone())).collect(),
            optimizer: None,
        }
    }

    pub fn record(&self, name: &str) -> Option<&Record<T>> {
        self.records.iter().find(|r| r.name == name)
    }

    /// Copies records into `net`. Every record must name a parameter with the
    /// same extents. Returns the parameters the checkpoint did not cover.
    pub fn apply_partial(&self, net: &mut Network<T>) -> Result<Vec<String>> {
        let store = net.store_mut();
        for r in &self.records {
            let p = store.by_name_mut(&r.name).map_err(|_| Error::UnknownTensor(r.name.clone()))?;
            if p.value.shape() != r.value.shape() {
                return Err(Error::ExtentMismatch {
                    name: r.name.clone(),
                    expected: p.value.shape().to_vec(),
                    found: r.value.shape().to_vec(),
                });
            }
            p.value = r.value.clone();
        }
        let missing = store
            .iter()
            .filter(|(_, p)| self.record(&p.name).is_none())
            .map(|(_, p)| p.name.clone())
            .collect();
        Ok(missing)
    }

    /// Builds the configured network and loads every parameter strictly.
    pub fn to_network(&self) -> Result<Network<T>> {
        let mut net = Network::build(&self.config)?;
        if let Some(name) = self.apply_partial(&mut net)?.into_iter().next() {
            return Err(Error::MissingTensor(name));
        }
        Ok(net)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(T::BYTES);
        let cfg = self.config.to_toml();
        out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
        out.extend_from_slice(cfg.as_bytes());
        write_records(&mut out, &self.records);
        match &self.optimizer {
            None => out.push(0),
            Some(state) => {
                out.push(1);
                write_records(&mut out, state);
            }
        }
        out
    }

    /// Parses a checkpoint; payloads of either precision are converted to `T`.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let header = |detail: &str| Error::CorruptRecord {
            name: "<header>".into(),
            detail: detail.into(),
        };
        let magic: [u8; 4] = r.take(4).map_err(|_| header("truncated magic"))?.try_into().expect("4 bytes");
        if magic != MAGIC {
            return Err(Error::BadMagic(magic));
        }
        let version = r.u32().map_err(|_| header("truncated version"))?;
        if version != VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        let width = r.u8().map_err(|_| header("truncated precision"))?;
        if width != 4 && width != 8 {
            return Err(header(&format!("unsupported precision of {width} bytes")));
        }
        let len = r.u32().map_err(|_| header("truncated config length"))? as usize;
        let text = r.take(len).map_err(|_| header("truncated config"))?;
        let text = std::str::from_utf8(text).map_err(|_| header("config is not utf-8"))?;
        let config = ModelConfig::from_toml(text)?;
        let records = read_records(&mut r, width, "parameters")?;
        let optimizer = match r.u8().map_err(|_| header("missing optimizer flag"))? {
            0 => None,
            1 => Some(read_records(&mut r, width, "optimizer")?),
            f => return Err(header(&format!("bad optimizer flag {f}"))),
        };
        if r.pos != bytes.len() {
            return Err(Error::CorruptRecord {
                name: "<trailer>".into(),
                detail: format!("{} unexpected trailing bytes", bytes.len() - r.pos),
            });
        }
        Ok(Checkpoint { config, records, optimizer })
    }

    /// Payload width in bytes (4 or 8) recorded in a serialized header.
    pub fn stored_width(bytes: &[u8]) -> Result<u8> {
        if bytes.len() < 9 {
            return Err(Error::CorruptRecord {
                name: "<header>".into(),
                detail: "truncated header".into(),
            });
        }
        if bytes[..4] != MAGIC {
            return Err(Error::BadMagic(bytes[..4].try_into().expect("4 bytes")));
        }
        Ok(bytes[8])
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_bytes(&fs::read(path).map_err(|e| Error::io(path, e))?)
    }
}

fn write_records<T: Real>(out: &mut Vec<u8>, records: &[Record<T>]) {
    out.extend_from_slice(&(records.len() as u32).to_le_bytes());
    for r in records {
        out.extend_from_slice(&(r.name.len() as u32).to_le_bytes());
        out.extend_from_slice(r.name.as_bytes());
        out.push(r.value.rank() as u8);
        for &e in r.value.shape() {
            out.extend_from_slice(&(e as u64).to_le_bytes());
        }
        out.extend_from_slice(&(r.value.numel() as u64).to_le_bytes());
        for &v in r.value.data() {
            v.write_le(out);
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

struct Truncated;

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], Truncated> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or(Truncated)?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, Truncated> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, Truncated> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, Truncated> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

fn read_records<T: Real>(r: &mut Reader<'_>, width: u8, section: &str) -> Result<Vec<Record<T>>> {
    let corrupt = |name: &str, detail: String| Error::CorruptRecord {
        name: name.to_string(),
        detail,
    };
    let count = r.u32().map_err(|_| corrupt(section, "truncated record count".into()))?;
    let mut records = Vec::with_capacity(count.min(1 << 16) as usize);
    for i in 0..count {
        let anon = format!("{section}[{i}]");
        let len = r.u32().map_err(|_| corrupt(&anon, "truncated name length".into()))? as usize;
        let name = r.take(len).map_err(|_| corrupt(&anon, "truncated name".into()))?;
        let name = String::from_utf8(name.to_vec()).map_err(|_| corrupt(&anon, "name is not utf-8".into()))?;
        let trunc = |what: &str| corrupt(&name, format!("truncated {what}"));
        let rank = r.u8().map_err(|_| trunc("rank"))?;
        let shape = (0..rank)
            .map(|_| r.u64().map(|e| e as usize).map_err(|_| trunc("extents")))
            .collect::<Result<Vec<_>>>()?;
        let values = r.u64().map_err(|_| trunc("value count"))? as usize;
        let expected = shape.iter().try_fold(1usize, |a, &e| a.checked_mul(e));
        if expected != Some(values) {
            return Err(corrupt(&name, format!("extents {shape:?} but {values} payload values")));
        }
        let bytes = values
            .checked_mul(width as usize)
            .ok_or_else(|| corrupt(&name, "payload size overflows".into()))?;
        let payload = r.take(bytes).map_err(|_| trunc("payload"))?;
        let data: Vec<T> = if width == 8 {
            payload.chunks_exact(8).map(|c| T::from_f64(f64::read_le(c))).collect()
        } else {
            payload.chunks_exact(4).map(|c| T::from_f64(f32::read_le(c) as f64)).collect()
        };
        records.push(Record::new(name, Tensor::new(shape, data)?));
    }
    Ok(records)
}
