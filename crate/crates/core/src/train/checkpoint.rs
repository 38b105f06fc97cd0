//! Binary checkpoint format.
//!
//! ```text
//! "ELN1" | u64 header length | JSON header | entries...
//! entry = u32 name length | name | u8 dtype | u8 rank | u64 dims[rank] | values (LE)
//! ```
//!
//! Batch-norm statistics are stored as `{layer}.running_mean` and
//! `{layer}.running_var`, Adam moments as `adam.m.{name}` and `adam.v.{name}`.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use super::optim::{Adam, AdamConfig};
use crate::model::{BnStats, ElNet, ModelConfig, ParamStore};
use crate::ndarr::{DType, Scalar, Tensor};
use crate::{Error, Result};

pub const MAGIC: &[u8; 4] = b"ELN1";
const VERSION: u32 = 1;

/// What a checkpoint holds.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CheckpointKind {
    /// Every tensor of an [`ElNet`].
    Full,
    /// Backbone weights only, as produced by pretraining.
    Backbone,
}

/// Position of a ChaCha8 stream.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    /// 32-byte key, hex encoded.
    pub seed: String,
    pub stream: u64,
    /// 128-bit word position, decimal.
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed().iter().map(|b| format!("{b:02x}")).collect(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        let bad = || Error::Checkpoint("malformed rng state".into());
        if self.seed.len() != 64 {
            return Err(bad());
        }
        let mut seed = [0u8; 32];
        for (i, b) in seed.iter_mut().enumerate() {
            *b = u8::from_str_radix(&self.seed[2 * i..2 * i + 2], 16).map_err(|_| bad())?;
        }
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos.parse().map_err(|_| bad())?);
        Ok(rng)
    }
}

#[derive(Serialize, Deserialize)]
struct OptimHeader {
    step: u64,
    config: AdamConfig,
}

#[derive(Serialize, Deserialize)]
struct Header {
    version: u32,
    kind: CheckpointKind,
    model: ModelConfig,
    epoch: usize,
    frozen: Vec<String>,
    buffers: Vec<String>,
    rng: Option<RngState>,
    optimizer: Option<OptimHeader>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T: Scalar = f32> {
    pub kind: CheckpointKind,
    pub model: ModelConfig,
    pub store: ParamStore<T>,
    pub epoch: usize,
    pub rng: Option<RngState>,
    pub optimizer: Option<Adam<T>>,
}

impl<T: Scalar> Checkpoint<T> {
    pub fn from_model(net: &ElNet<T>, epoch: usize) -> Self {
        Self {
            kind: CheckpointKind::Full,
            model: net.config.clone(),
            store: net.store.clone(),
            epoch,
            rng: None,
            optimizer: None,
        }
    }

    pub fn to_model(&self) -> Result<ElNet<T>> {
        if self.kind != CheckpointKind::Full {
            return Err(Error::Checkpoint("a backbone checkpoint does not hold a full model".into()));
        }
        let mut net = ElNet::new(self.model.clone(), 0)?;
        self.load_into(&mut net)?;
        Ok(net)
    }

    /// Copy the stored tensors into `net`. A tensor whose shape differs is
    /// reported by name; a full checkpoint also requires an equal config.
    pub fn load_into(&self, net: &mut ElNet<T>) -> Result<()> {
        let mut staged = net.store.clone();
        staged.load_values(&self.store)?;
        if self.kind == CheckpointKind::Full && self.model != net.config {
            return Err(Error::Checkpoint(format!(
                "model config differs: checkpoint has {:?}, model has {:?}",
                self.model, net.config
            )));
        }
        net.store = staged;
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            version: VERSION,
            kind: self.kind,
            model: self.model.clone(),
            epoch: self.epoch,
            frozen: self.store.frozen_names().map(String::from).collect(),
            buffers: self.store.buffers().keys().cloned().collect(),
            rng: self.rng.clone(),
            optimizer: self.optimizer.as_ref().map(|o| OptimHeader {
                step: o.step,
                config: o.config,
            }),
        };
        let json = serde_json::to_vec(&header).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (name, t) in self.store.params() {
            write_entry(&mut out, name, t);
        }
        for (name, b) in self.store.buffers() {
            write_entry(&mut out, &format!("{name}.running_mean"), &b.mean);
            write_entry(&mut out, &format!("{name}.running_var"), &b.var);
        }
        if let Some(opt) = &self.optimizer {
            for (name, t) in &opt.m {
                write_entry(&mut out, &format!("adam.m.{name}"), t);
            }
            for (name, t) in &opt.v {
                write_entry(&mut out, &format!("adam.v.{name}"), t);
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Checkpoint("bad magic; expected an ELN1 checkpoint".into()));
        }
        let hlen = r.u64()? as usize;
        let header: Header =
            serde_json::from_slice(r.take(hlen)?).map_err(|e| Error::Checkpoint(format!("header: {e}")))?;
        if header.version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {}", header.version)));
        }
        let mut tensors = BTreeMap::new();
        while r.pos < bytes.len() {
            let (name, t) = r.entry::<T>()?;
            if tensors.insert(name.clone(), t).is_some() {
                return Err(Error::Checkpoint(format!("duplicate tensor `{name}`")));
            }
        }

        let mut store = ParamStore::new();
        for layer in &header.buffers {
            let mut take = |suffix: &str| {
                tensors
                    .remove(&format!("{layer}.{suffix}"))
                    .ok_or_else(|| Error::Checkpoint(format!("missing `{layer}.{suffix}`")))
            };
            let mean = take("running_mean")?;
            let var = take("running_var")?;
            store.insert_buffer(layer.clone(), BnStats { mean, var });
        }
        let mut optimizer = header.optimizer.map(|o| {
            let mut a = Adam::new(o.config);
            a.step = o.step;
            a
        });
        let names: Vec<String> = tensors.keys().cloned().collect();
        for name in names {
            let t = tensors.remove(&name).expect("listed key");
            let moment = name
                .strip_prefix("adam.m.")
                .map(|n| (true, n))
                .or_else(|| name.strip_prefix("adam.v.").map(|n| (false, n)));
            match (moment, optimizer.as_mut()) {
                (Some((true, n)), Some(opt)) => {
                    opt.m.insert(n.to_string(), t);
                }
                (Some((false, n)), Some(opt)) => {
                    opt.v.insert(n.to_string(), t);
                }
                (Some(_), None) => return Err(Error::Checkpoint(format!("`{name}` without optimizer state"))),
                (None, _) => store.insert(name.clone(), t, false),
            }
        }
        for name in &header.frozen {
            if !store.contains(name) {
                return Err(Error::Checkpoint(format!("frozen tensor `{name}` is missing")));
            }
            let t = store.get(name)?.clone();
            store.insert(name.clone(), t, true);
        }
        Ok(Self {
            kind: header.kind,
            model: header.model,
            store,
            epoch: header.epoch,
            rng: header.rng,
            optimizer,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let bytes = self.to_bytes()?;
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}

fn write_entry<T: Scalar>(out: &mut Vec<u8>, name: &str, t: &Tensor<T>) {
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(T::DTYPE.code());
    out.push(t.rank() as u8);
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in t.data() {
        match T::DTYPE {
            DType::F32 => out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes()),
            DType::F64 => out.extend_from_slice(&v.as_f64().to_le_bytes()),
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Checkpoint(format!("truncated at byte {} (wanted {n} more)", self.pos))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn entry<T: Scalar>(&mut self) -> Result<(String, Tensor<T>)> {
        let len = self.u32()? as usize;
        let name = String::from_utf8(self.take(len)?.to_vec())
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
        let code = self.u8()?;
        let dtype = DType::from_code(code)
            .ok_or_else(|| Error::Checkpoint(format!("`{name}`: unknown dtype code {code}")))?;
        let rank = self.u8()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(self.u64()? as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = self.take(
            numel
                .checked_mul(dtype.size())
                .ok_or_else(|| Error::Checkpoint(format!("`{name}`: size overflow")))?,
        )?;
        let data: Vec<T> = match dtype {
            DType::F32 => raw
                .chunks_exact(4)
                .map(|c| T::from_f64(f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64))
                .collect(),
            DType::F64 => raw
                .chunks_exact(8)
                .map(|c| T::from_f64(f64::from_le_bytes(c.try_into().expect("8 bytes"))))
                .collect(),
        };
        let t = Tensor::new(&shape, data).map_err(|e| Error::Checkpoint(format!("`{name}`: {e}")))?;
        Ok((name, t))
    }
}
