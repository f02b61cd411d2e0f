use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelConfig, Transformer};
use crate::container::{self, MODEL_MAGIC};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
    /// Offset into the payload, in f64 elements.
    offset: usize,
    trainable: bool,
}

#[derive(Serialize, Deserialize)]
struct ModelHeader {
    version: u32,
    config: ModelConfig,
    params: Vec<ParamEntry>,
}

impl Transformer {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut payload = Vec::with_capacity(self.params.num_scalars());
        let mut entries = Vec::with_capacity(self.params.len());
        for p in self.params.iter() {
            entries.push(ParamEntry {
                name: p.name.clone(),
                shape: p.value.shape().to_vec(),
                offset: payload.len(),
                trainable: p.trainable,
            });
            payload.extend_from_slice(p.value.data());
        }
        let header = ModelHeader {
            version: FORMAT_VERSION,
            config: self.config.clone(),
            params: entries,
        };
        container::encode(MODEL_MAGIC, &header, &payload)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (header, payload): (ModelHeader, Vec<f64>) = container::decode(MODEL_MAGIC, bytes)?;
        if header.version != FORMAT_VERSION {
            return Err(Error::Load(format!(
                "model format version {} unsupported",
                header.version
            )));
        }
        // Build the layout, then overwrite every value from the file.
        let mut model = Transformer::new(header.config, 0)?;
        if header.params.len() != model.params.len() {
            return Err(Error::Load(format!(
                "expected {} parameters, file has {}",
                model.params.len(),
                header.params.len()
            )));
        }
        for (i, entry) in header.params.iter().enumerate() {
            let expected = model.params.get(i);
            if expected.name != entry.name || expected.value.shape() != entry.shape.as_slice() {
                return Err(Error::Load(format!(
                    "parameter {i} is {} {:?}, expected {} {:?}",
                    entry.name,
                    entry.shape,
                    expected.name,
                    expected.value.shape()
                )));
            }
            let n: usize = entry.shape.iter().product();
            let data = payload
                .get(entry.offset..entry.offset + n)
                .ok_or_else(|| Error::Load(format!("payload truncated at {}", entry.name)))?;
            *model.params.value_mut(i) = Tensor::new(entry.shape.clone(), data.to_vec())?;
        }
        for (i, entry) in header.params.iter().enumerate() {
            model.params.set_trainable(i, entry.trainable);
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bitwise() {
        let cfg = ModelConfig {
            n_layers: 1,
            n_heads: 2,
            d_model: 4,
            d_ff: 6,
            vocab_size: 36,
            max_src_len: 5,
            max_tgt_len: 5,
        };
        let mut m = Transformer::new(cfg, 11).unwrap();
        m.set_trainable(false);
        let bytes = m.to_bytes().unwrap();
        let back = Transformer::from_bytes(&bytes).unwrap();
        assert_eq!(back.checksum(), m.checksum());
        assert!(back.is_frozen());
        assert_eq!(back.config(), m.config());
        assert!(Transformer::from_bytes(&bytes[..bytes.len() - 8]).is_err());
    }
}
