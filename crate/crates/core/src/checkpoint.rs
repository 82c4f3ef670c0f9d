//! On-disk checkpoints: a directory holding `manifest.toml`, parameter blobs
//! (`params.bin` + `params.json`) and, when present, the optimizer moments
//! (`adam_m.*`, `adam_v.*`) in the same format.
//!
//! Blobs are little-endian f32 concatenated in store order; the JSON index
//! lists `{name, shape, offset}` with offsets counted in elements.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autograd::ParamStore;
use crate::config::RunConfig;
use crate::error::{ensure, Error, Result};
use crate::tensor::Tensor;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format: u32,
    /// Optimizer steps completed.
    pub step: u64,
    pub seed: u64,
    pub variant: String,
    pub has_optimizer: bool,
    /// Adam step counter (bias correction).
    pub adam_t: u64,
    pub config: RunConfig,
}

#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub m: ParamStore<f32>,
    pub v: ParamStore<f32>,
    pub t: u64,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub step: u64,
    pub variant: String,
    pub config: RunConfig,
    pub params: ParamStore<f32>,
    pub optimizer: Option<OptimizerState>,
}

#[derive(Debug, Serialize, Deserialize)]
struct IndexEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

fn write_blob(dir: &Path, stem: &str, store: &ParamStore<f32>) -> Result<()> {
    let mut bytes = Vec::with_capacity(store.num_scalars() * 4);
    let mut index = Vec::with_capacity(store.len());
    let mut offset = 0;
    for (name, t) in store.iter() {
        index.push(IndexEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            offset,
        });
        offset += t.len();
        for v in t.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    let bin = dir.join(format!("{stem}.bin"));
    fs::write(&bin, bytes).map_err(|e| Error::io(&bin, e))?;
    let idx = dir.join(format!("{stem}.json"));
    fs::write(&idx, serde_json::to_string_pretty(&index)?).map_err(|e| Error::io(&idx, e))
}

fn read_blob(dir: &Path, stem: &str) -> Result<ParamStore<f32>> {
    let idx = dir.join(format!("{stem}.json"));
    let index: Vec<IndexEntry> = serde_json::from_str(&fs::read_to_string(&idx).map_err(|e| Error::io(&idx, e))?)?;
    let bin = dir.join(format!("{stem}.bin"));
    let bytes = fs::read(&bin).map_err(|e| Error::io(&bin, e))?;
    ensure!(bytes.len() % 4 == 0, Checkpoint, "{} is not a whole number of f32 values", bin.display());
    let values: Vec<f32> = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
    let mut store = ParamStore::new();
    for e in index {
        let n: usize = e.shape.iter().product();
        ensure!(
            e.offset + n <= values.len(),
            Checkpoint,
            "tensor {} runs past the end of {}",
            e.name,
            bin.display()
        );
        store.insert(e.name, Tensor::from_vec(&e.shape, values[e.offset..e.offset + n].to_vec())?);
    }
    Ok(store)
}

impl Checkpoint {
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_blob(dir, "params", &self.params)?;
        if let Some(opt) = &self.optimizer {
            write_blob(dir, "adam_m", &opt.m)?;
            write_blob(dir, "adam_v", &opt.v)?;
        }
        let manifest = CheckpointManifest {
            format: FORMAT_VERSION,
            step: self.step,
            seed: self.config.train.seed,
            variant: self.variant.clone(),
            has_optimizer: self.optimizer.is_some(),
            adam_t: self.optimizer.as_ref().map_or(0, |o| o.t),
            config: self.config.clone(),
        };
        let text = toml::to_string(&manifest).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let path = dir.join("manifest.toml");
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    pub fn read_manifest(dir: &Path) -> Result<CheckpointManifest> {
        let path = dir.join("manifest.toml");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let m: CheckpointManifest = toml::from_str(&text).map_err(|e| Error::Checkpoint(e.to_string()))?;
        ensure!(m.format == FORMAT_VERSION, Checkpoint, "unsupported checkpoint format {}", m.format);
        m.config.validate()?;
        Ok(m)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let m = Self::read_manifest(dir)?;
        let params = read_blob(dir, "params")?;
        let optimizer = if m.has_optimizer {
            Some(OptimizerState {
                m: read_blob(dir, "adam_m")?,
                v: read_blob(dir, "adam_v")?,
                t: m.adam_t,
            })
        } else {
            None
        };
        Ok(Self {
            step: m.step,
            variant: m.variant,
            config: m.config,
            params,
            optimizer,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let mut params = ParamStore::new();
        params.insert("a.weight", Tensor::from_fn(&[2, 3], |i| (i as f32).sin() / 3.0));
        params.insert("a.bias", Tensor::from_vec(&[2], vec![f32::MIN_POSITIVE, -0.0]).unwrap());
        let ck = Checkpoint {
            step: 17,
            variant: "no-ffe".into(),
            config: RunConfig::default(),
            params: params.clone(),
            optimizer: Some(OptimizerState {
                m: params.clone(),
                v: params.clone(),
                t: 17,
            }),
        };
        ck.save(dir.path()).unwrap();
        let back = Checkpoint::load(dir.path()).unwrap();
        assert_eq!(back.step, 17);
        assert_eq!(back.variant, "no-ffe");
        assert_eq!(back.config, ck.config);
        assert_eq!(back.params.names(), params.names());
        for ((_, a), (_, b)) in back.params.iter().zip(params.iter()) {
            let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(a), bits(b));
        }
        assert_eq!(back.optimizer.unwrap().t, 17);
    }

    #[test]
    fn truncated_blob_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mut params = ParamStore::new();
        params.insert("w", Tensor::<f32>::zeros(&[4]));
        Checkpoint {
            step: 0,
            variant: "baseline".into(),
            config: RunConfig::default(),
            params,
            optimizer: None,
        }
        .save(dir.path())
        .unwrap();
        fs::write(dir.path().join("params.bin"), [0u8; 8]).unwrap();
        assert!(Checkpoint::load(dir.path()).is_err());
    }
}
