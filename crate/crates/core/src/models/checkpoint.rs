//! Versioned binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!   magic           5 bytes, b"UPTB1"
//!   config_len      u32
//!   config          config_len bytes of canonical JSON (serde field order)
//!   param_count     u32
//!   then per parameter, in name (BTreeMap) order:
//!     name_len      u32
//!     name          utf-8 bytes
//!     ndim          u32
//!     extents       ndim x u32
//!     values        product(extents) x f64

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use super::{param_spec, Model, ModelConfig};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 5] = b"UPTB1";

pub fn save_model<S: Scalar>(model: &Model<S>, path: &Path) -> Result<()> {
    let mut bytes = Vec::new();
    bytes.extend_from_slice(CHECKPOINT_MAGIC);
    let config = serde_json::to_vec(model.config()).expect("config serializes");
    bytes.extend_from_slice(&(config.len() as u32).to_le_bytes());
    bytes.extend_from_slice(&config);
    bytes.extend_from_slice(&(model.params().len() as u32).to_le_bytes());
    for (name, tensor) in model.params() {
        bytes.extend_from_slice(&(name.len() as u32).to_le_bytes());
        bytes.extend_from_slice(name.as_bytes());
        bytes.extend_from_slice(&(tensor.rank() as u32).to_le_bytes());
        for &e in tensor.shape() {
            bytes.extend_from_slice(&(e as u32).to_le_bytes());
        }
        for &v in tensor.data() {
            bytes.extend_from_slice(&v.as_f64().to_le_bytes());
        }
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    what: String,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, field: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::format(&self.what, format!("truncated at {field}")));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self, field: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, field)?.try_into().unwrap()))
    }
}

pub fn load_model<S: Scalar>(path: &Path) -> Result<Model<S>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let what = path.display().to_string();
    let mut r = Reader {
        bytes: &bytes,
        pos: 0,
        what: what.clone(),
    };
    if r.take(5, "magic")? != CHECKPOINT_MAGIC {
        return Err(Error::format(&what, "bad magic, not a UPTB1 checkpoint"));
    }
    let config_len = r.u32("config length")? as usize;
    let config: ModelConfig = serde_json::from_slice(r.take(config_len, "config")?)
        .map_err(|e| Error::format(&what, format!("bad config JSON: {e}")))?;
    config.validate()?;

    let count = r.u32("parameter count")? as usize;
    let mut params = BTreeMap::new();
    for _ in 0..count {
        let name_len = r.u32("name length")? as usize;
        let name = String::from_utf8(r.take(name_len, "name")?.to_vec())
            .map_err(|_| Error::format(&what, "non-utf8 parameter name"))?;
        let ndim = r.u32("ndim")? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u32("extent")? as usize);
        }
        let len: usize = shape.iter().product();
        let raw = r.take(len * 8, &format!("values of {name}"))?;
        let data: Vec<S> = raw
            .chunks_exact(8)
            .map(|c| S::of(f64::from_le_bytes(c.try_into().unwrap())))
            .collect();
        params.insert(name, Tensor::new(shape, data)?);
    }

    // The stored roster must match what the config demands.
    let expected = param_spec(&config);
    if expected.len() != params.len() {
        return Err(Error::format(
            &what,
            format!("expected {} parameters, found {}", expected.len(), params.len()),
        ));
    }
    for spec in &expected {
        match params.get(&spec.name) {
            Some(t) if t.shape() == spec.shape.as_slice() => {}
            Some(t) => {
                return Err(Error::format(
                    &what,
                    format!(
                        "parameter {} has shape {:?}, config demands {:?}",
                        spec.name,
                        t.shape(),
                        spec.shape
                    ),
                ))
            }
            None => {
                return Err(Error::format(&what, format!("missing parameter {}", spec.name)))
            }
        }
    }
    Model::from_parts(config, params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::digit_vocabulary;
    use crate::models::{build_model, Arch};

    fn tiny() -> Model<f64> {
        let mut cfg = ModelConfig::new(Arch::Rnnt, digit_vocabulary());
        cfg.encoder_hidden = 8;
        cfg.decoder_hidden = 6;
        cfg.features = crate::features::FeatureConfig::fast_4khz();
        build_model(cfg).unwrap()
    }

    #[test]
    fn roundtrip_preserves_params_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let model = tiny();
        save_model(&model, &path).unwrap();
        let back: Model<f64> = load_model(&path).unwrap();
        assert_eq!(back.config(), model.config());
        for (name, p) in model.params() {
            let bits_a: Vec<u64> = p.data().iter().map(|v| v.to_bits()).collect();
            let bits_b: Vec<u64> = back.params()[name].data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(bits_a, bits_b, "{name}");
        }
    }

    #[test]
    fn bad_magic_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        std::fs::write(&path, b"NOTUPTB-whatever").unwrap();
        let err = load_model::<f64>(&path).unwrap_err().to_string();
        assert!(err.contains("magic"), "{err}");
    }

    #[test]
    fn truncated_checkpoint_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let model = tiny();
        save_model(&model, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        assert!(load_model::<f64>(&path).is_err());
    }
}
