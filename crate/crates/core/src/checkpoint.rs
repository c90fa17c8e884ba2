//! Binary checkpoint format.
//!
//! ```text
//! "DSPP" u32 version
//! u32 len, config text (key = value lines)
//! u64 epoch
//! u32 count, then per tensor: u32 name len, name, u32 rank, rank x u32 dims, f64 data   (parameters)
//! u32 count, same layout                                                             (velocities)
//! u32 count, then per epoch: u64 epoch, f64 lr, f64 train loss, u8 has-validation,
//!   and if set f64 accuracy, precision, recall, f1, auc and u8 degenerate
//! ```
//! Integers and floats are little-endian.

use std::collections::BTreeMap;
use std::path::Path;

use crate::config::parse_kv;
use crate::error::{Error, Result};
use crate::eval::Metrics;
use crate::model::{build_model, AblationConfig, BackboneConfig, Model};
use crate::tensor::Tensor;
use crate::train::EpochRecord;

const MAGIC: &[u8; 4] = b"DSPP";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub velocities: BTreeMap<String, Tensor>,
    /// Number of completed epochs, cumulative across fine-tuning.
    pub epoch: usize,
    pub history: Vec<EpochRecord>,
}

/// Config text describing an architecture, as stored in checkpoints.
pub fn architecture_text(backbone: &BackboneConfig, ablation: &AblationConfig) -> String {
    backbone
        .to_kv()
        .into_iter()
        .chain(ablation.to_kv())
        .map(|(k, v)| format!("{k} = {v}\n"))
        .collect()
}

pub fn parse_architecture(text: &str) -> Result<(BackboneConfig, AblationConfig)> {
    let mut backbone = BackboneConfig::default();
    let mut ablation = AblationConfig::default();
    for (k, v) in parse_kv(text)? {
        if !backbone.apply(&k, &v)? && !ablation.apply(&k, &v)? {
            return Err(Error::Format(format!("unknown architecture key `{k}`")));
        }
    }
    Ok((backbone, ablation))
}

impl Checkpoint {
    pub fn fresh(model: Model) -> Self {
        Self {
            model,
            velocities: BTreeMap::new(),
            epoch: 0,
            history: Vec::new(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, VERSION);
        put_str(&mut out, &architecture_text(&self.model.backbone, &self.model.ablation));
        out.extend_from_slice(&(self.epoch as u64).to_le_bytes());
        let params = self.model.params();
        put_u32(&mut out, params.len() as u32);
        for (name, t) in params {
            put_tensor(&mut out, &name, t);
        }
        put_u32(&mut out, self.velocities.len() as u32);
        for (name, t) in &self.velocities {
            put_tensor(&mut out, name, t);
        }
        put_u32(&mut out, self.history.len() as u32);
        for r in &self.history {
            out.extend_from_slice(&(r.epoch as u64).to_le_bytes());
            put_f64(&mut out, r.lr);
            put_f64(&mut out, r.train_loss);
            match &r.val {
                Some((m, auc)) => {
                    out.push(1);
                    for v in [m.accuracy, m.precision, m.recall, m.f1, *auc] {
                        put_f64(&mut out, v);
                    }
                    out.push(u8::from(m.degenerate));
                }
                None => out.push(0),
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let (backbone, ablation) = parse_architecture(&r.string()?)?;
        let epoch = r.u64()? as usize;
        let mut model = build_model(&backbone, &ablation, 0)?;
        let mut stored = BTreeMap::new();
        for _ in 0..r.u32()? {
            let (name, t) = r.tensor()?;
            stored.insert(name, t);
        }
        for (name, slot) in model.params_mut() {
            let t = stored
                .remove(&name)
                .ok_or_else(|| Error::Incompatible(format!("checkpoint lacks parameter `{name}`")))?;
            if t.shape() != slot.shape() {
                return Err(Error::Incompatible(format!(
                    "parameter `{name}`: checkpoint {:?}, architecture {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            *slot = t;
        }
        if let Some(extra) = stored.keys().next() {
            return Err(Error::Incompatible(format!("unexpected parameter `{extra}`")));
        }
        let mut velocities = BTreeMap::new();
        for _ in 0..r.u32()? {
            let (name, t) = r.tensor()?;
            velocities.insert(name, t);
        }
        let mut history = Vec::new();
        for _ in 0..r.u32()? {
            let epoch = r.u64()? as usize;
            let (lr, train_loss) = (r.f64()?, r.f64()?);
            let val = match r.u8()? {
                0 => None,
                1 => {
                    let v = [r.f64()?, r.f64()?, r.f64()?, r.f64()?, r.f64()?];
                    let m = Metrics {
                        accuracy: v[0],
                        precision: v[1],
                        recall: v[2],
                        f1: v[3],
                        degenerate: r.u8()? != 0,
                    };
                    Some((m, v[4]))
                }
                b => return Err(Error::Format(format!("bad validation flag {b}"))),
            };
            history.push(EpochRecord {
                epoch,
                lr,
                train_loss,
                val,
            });
        }
        if r.pos != bytes.len() {
            return Err(Error::Format(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self {
            model,
            velocities,
            epoch,
            history,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(std::fs::write(path, self.to_bytes())?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_f64(out: &mut Vec<u8>, v: f64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len() as u32);
    out.extend_from_slice(s.as_bytes());
}

fn put_tensor(out: &mut Vec<u8>, name: &str, t: &Tensor) {
    put_str(out, name);
    put_u32(out, t.rank() as u32);
    for &d in t.shape() {
        put_u32(out, d as u32);
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
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
            .ok_or_else(|| Error::Format(format!("truncated checkpoint at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Format("invalid utf-8".into()))
    }

    fn tensor(&mut self) -> Result<(String, Tensor)> {
        let name = self.string()?;
        let rank = self.u32()? as usize;
        let shape = (0..rank)
            .map(|_| self.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let numel: usize = shape.iter().product();
        let raw = self.take(
            numel
                .checked_mul(8)
                .ok_or_else(|| Error::Format("tensor too large".into()))?,
        )?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| Error::Format(format!("tensor `{name}`: {e}")))?;
        Ok((name, t))
    }
}
