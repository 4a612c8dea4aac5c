//! Checkpoint files.
//!
//! ```text
//! [u8; 8]  magic "SRPTCKPT"
//! u32      format version (1)
//! u32      metadata length in bytes
//! [u8]     metadata, a UTF-8 JSON object; key "config" echoes the SerpentConfig
//! u32      tensor count
//! ...      tensor records (see `tensor::write_tensor`)
//! ```
//!
//! Integers are little-endian. Model parameters use their canonical names;
//! other tensors (optimizer state) use prefixed names.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde_json::{Map, Value};

use super::config::SerpentConfig;
use super::model::SerpentModel;
use crate::error::{Error, Result};
use crate::nn::Module;
use crate::scalar::Scalar;
use crate::tensor::{read_tensor, write_tensor, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"SRPTCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T> {
    pub config: SerpentConfig,
    /// Extra metadata fields besides `config`.
    pub meta: Map<String, Value>,
    pub tensors: Vec<(String, Tensor<T>)>,
}

impl<T: Scalar> Checkpoint<T> {
    pub fn from_model(model: &SerpentModel<T>) -> Self {
        let mut tensors = Vec::new();
        model.visit("", &mut |name, t| tensors.push((name.to_string(), t.detach())));
        Self {
            config: model.config.clone(),
            meta: Map::new(),
            tensors,
        }
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Builds the model, first checking the stored config against `expected`.
    pub fn to_model(&self, expected: Option<&SerpentConfig>) -> Result<SerpentModel<T>> {
        if let Some(cfg) = expected {
            cfg.ensure_matches(&self.config)?;
        }
        let mut model = SerpentModel::new(self.config.clone(), 0)?;
        model.load_tensors(&self.tensors)?;
        Ok(model)
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        let mut meta = self.meta.clone();
        meta.insert("config".into(), serde_json::to_value(&self.config)?);
        let meta = serde_json::to_vec(&Value::Object(meta))?;
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        w.write_all(&(meta.len() as u32).to_le_bytes())?;
        w.write_all(&meta)?;
        w.write_all(&(self.tensors.len() as u32).to_le_bytes())?;
        for (name, t) in &self.tensors {
            write_tensor(w, name, t)?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let mut u = [0u8; 4];
        r.read_exact(&mut u)?;
        let version = u32::from_le_bytes(u);
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        r.read_exact(&mut u)?;
        let mut meta = vec![0u8; u32::from_le_bytes(u) as usize];
        r.read_exact(&mut meta)?;
        let Value::Object(mut meta) = serde_json::from_slice(&meta)? else {
            return Err(Error::Format("metadata is not a JSON object".into()));
        };
        let config = meta
            .remove("config")
            .ok_or_else(|| Error::Format("metadata lacks `config`".into()))?;
        let config: SerpentConfig = serde_json::from_value(config)?;
        r.read_exact(&mut u)?;
        let count = u32::from_le_bytes(u);
        let tensors = (0..count)
            .map(|_| read_tensor(r).map_err(Error::from))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { config, meta, tensors })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::data(path, e.to_string()))?;
        Self::read_from(&mut BufReader::new(file))
    }
}
