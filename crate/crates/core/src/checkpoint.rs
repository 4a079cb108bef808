//! Binary checkpoint: the experiment config plus every named parameter.
//!
//! Layout (little-endian):
//!
//! ```text
//! magic    8 bytes  "PFUSECK\0"
//! version  u32      1
//! hash     32 bytes sha256 of the config text
//! config   u64 length + UTF-8 TOML
//! seed     u64      training seed
//! count    u64      number of parameters
//! per parameter:
//!   name   u32 length + UTF-8
//!   rank   u32, then rank x u64 dims
//!   values f64 x product(dims)
//! ```

use std::io::{Read, Write};
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::autodiff::Tensor;
use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::model::Model;

pub const MAGIC: &[u8; 8] = b"PFUSECK\0";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: ExperimentConfig,
    pub seed: u64,
    pub params: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn from_model(config: &ExperimentConfig, seed: u64, model: &Model) -> Self {
        Self {
            config: config.clone(),
            seed,
            params: model
                .params
                .iter()
                .map(|(_, n, t)| (n.to_string(), t.clone()))
                .collect(),
        }
    }

    /// Rebuilds the model layout from the config and loads every parameter.
    pub fn to_model(&self) -> Result<Model> {
        let mut model = Model::new(
            self.config.dims(),
            self.config.model.clone(),
            self.config.task,
            self.config.ablation,
            self.seed,
        )?;
        if model.params.len() != self.params.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds {} parameters, model layout has {}",
                self.params.len(),
                model.params.len()
            )));
        }
        for (name, t) in &self.params {
            let id = model
                .params
                .id(name)
                .ok_or_else(|| Error::Checkpoint(format!("unknown parameter {name:?}")))?;
            let slot = model.params.get_mut(id);
            if slot.shape() != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter {name:?} has shape {:?}, layout expects {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            *slot = t.clone();
        }
        Ok(model)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let text = self.config.to_toml();
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&Sha256::digest(text.as_bytes()));
        out.extend_from_slice(&(text.len() as u64).to_le_bytes());
        out.extend_from_slice(text.as_bytes());
        out.extend_from_slice(&self.seed.to_le_bytes());
        out.extend_from_slice(&(self.params.len() as u64).to_le_bytes());
        for (name, t) in &self.params {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for d in t.shape() {
                out.extend_from_slice(&(*d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let hash = r.take(32)?.to_vec();
        let len = r.u64()? as usize;
        let text = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Checkpoint("config is not UTF-8".into()))?;
        if Sha256::digest(text.as_bytes()).as_slice() != hash.as_slice() {
            return Err(Error::Checkpoint("config hash mismatch".into()));
        }
        let config = ExperimentConfig::from_toml(text)?;
        let seed = r.u64()?;
        let count = r.u64()? as usize;
        let mut params = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let n = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(n)?)
                .map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?
                .to_string();
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let numel: usize = shape.iter().product();
            let raw = r.take(numel.checked_mul(8).ok_or_else(|| Error::Checkpoint("shape overflow".into()))?)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            params.push((name, Tensor::new(shape, data)?));
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self { config, seed, params })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|e| *e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::Checkpoint(format!("truncated at byte {}", self.pos))),
        }
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cohort::generate_cohort;

    #[test]
    fn roundtrip_preserves_predictions_bitwise() {
        let cfg = ExperimentConfig::micro();
        let model = Model::new(cfg.dims(), cfg.model.clone(), cfg.task, cfg.ablation, 9).unwrap();
        let ck = Checkpoint::from_model(&cfg, 9, &model);
        let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
        assert_eq!(back.config, cfg);
        let restored = back.to_model().unwrap();
        let (eps, _) = generate_cohort(&cfg.cohort).unwrap();
        assert_eq!(model.predict(&eps[0]).unwrap(), restored.predict(&eps[0]).unwrap());
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        ck.save(&p).unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), ck.to_bytes());
        assert_eq!(Checkpoint::load(&p).unwrap().params.len(), model.params.len());
    }

    #[test]
    fn corruption_is_detected() {
        let cfg = ExperimentConfig::micro();
        let model = Model::new(cfg.dims(), cfg.model.clone(), cfg.task, cfg.ablation, 0).unwrap();
        let bytes = Checkpoint::from_model(&cfg, 0, &model).to_bytes();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Checkpoint(_))));
        let mut bad = bytes.clone();
        bad[60] ^= 1;
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Checkpoint(_))));
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        let mut long = bytes.clone();
        long.push(0);
        assert!(Checkpoint::from_bytes(&long).is_err());
    }

    #[test]
    fn layout_mismatch_is_rejected() {
        let cfg = ExperimentConfig::micro();
        let model = Model::new(cfg.dims(), cfg.model.clone(), cfg.task, cfg.ablation, 0).unwrap();
        let mut ck = Checkpoint::from_model(&cfg, 0, &model);
        ck.config.ablation = crate::model::Variant::A4;
        assert!(matches!(ck.to_model(), Err(Error::Checkpoint(_))));
    }
}
