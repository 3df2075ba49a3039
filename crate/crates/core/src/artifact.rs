//! Checkpoint container: a JSON manifest next to a binary blob.
//!
//! `name.json` lists the model config, provenance, the CRC-32 and length of
//! the blob, and for every tensor its name, section, dtype, shape, byte
//! offset and byte length. `name.bin` holds the tensors back to back in
//! manifest order: `f64` values little-endian, quantization indices as
//! signed bytes. Sections are `params`, `adapters` (LoRA factors, named
//! `adapters/<layer>/A|B`) and `quantized` (`quantized/<param>/indices|scales`).

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lora::{AdapterSet, LoraAdapter, LoraConfig};
use crate::model::{Checkpoint, LayerId, ModelConfig};
use crate::numerics::Tensor;
use crate::quantizer::{QuantSpec, QuantizedTensor, QuantizedWeights};

pub const FORMAT_NAME: &str = "quant-unlearn-checkpoint";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Section {
    Params,
    Adapters,
    Quantized,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Dtype {
    F64,
    I8,
}

impl Dtype {
    fn width(self) -> usize {
        match self {
            Dtype::F64 => 8,
            Dtype::I8 => 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub section: Section,
    pub dtype: Dtype,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub length: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub config: ModelConfig,
    pub provenance: String,
    pub blob: String,
    pub blob_len: usize,
    pub crc32: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lora: Option<LoraConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub quant_spec: Option<QuantSpec>,
    pub tensors: Vec<TensorEntry>,
}

/// Everything one container file can hold.
#[derive(Clone, Debug, PartialEq)]
pub struct Artifact {
    pub checkpoint: Checkpoint,
    pub adapters: Option<AdapterSet>,
    pub quantized: Option<QuantizedWeights>,
}

pub fn blob_path(manifest_path: &Path) -> PathBuf {
    manifest_path.with_extension("bin")
}

struct BlobWriter {
    bytes: Vec<u8>,
    entries: Vec<TensorEntry>,
}

impl BlobWriter {
    fn f64(&mut self, name: String, section: Section, t: &Tensor) {
        let offset = self.bytes.len();
        for v in t.data() {
            self.bytes.extend_from_slice(&v.to_le_bytes());
        }
        self.entries.push(TensorEntry {
            name,
            section,
            dtype: Dtype::F64,
            shape: t.shape().to_vec(),
            offset,
            length: self.bytes.len() - offset,
        });
    }

    fn i8(&mut self, name: String, section: Section, shape: &[usize], data: &[i8]) {
        let offset = self.bytes.len();
        self.bytes.extend(data.iter().map(|&v| v as u8));
        self.entries.push(TensorEntry {
            name,
            section,
            dtype: Dtype::I8,
            shape: shape.to_vec(),
            offset,
            length: data.len(),
        });
    }
}

fn adapter_prefix(layer: LayerId) -> String {
    format!("adapters/{layer}")
}

impl Artifact {
    pub fn from_checkpoint(checkpoint: Checkpoint) -> Self {
        Self {
            checkpoint,
            adapters: None,
            quantized: None,
        }
    }

    /// Write `path` (manifest) and its sibling `.bin` blob.
    pub fn save(&self, path: &Path) -> Result<()> {
        self.checkpoint.validate()?;
        let mut w = BlobWriter {
            bytes: Vec::new(),
            entries: Vec::new(),
        };
        for (name, shape) in self.checkpoint.config.schema() {
            debug_assert_eq!(self.checkpoint.params[&name].shape(), shape.as_slice());
            w.f64(name.clone(), Section::Params, &self.checkpoint.params[&name]);
        }
        if let Some(set) = &self.adapters {
            set.check_against(&self.checkpoint)?;
            for ad in &set.adapters {
                let p = adapter_prefix(ad.layer);
                w.f64(format!("{p}/A"), Section::Adapters, &ad.a);
                w.f64(format!("{p}/B"), Section::Adapters, &ad.b);
            }
        }
        if let Some(qw) = &self.quantized {
            for (name, q) in &qw.tensors {
                let p = format!("quantized/{name}");
                w.i8(format!("{p}/indices"), Section::Quantized, &q.shape, &q.indices);
                let scales = Tensor::new(vec![q.scales.len()], q.scales.clone())?;
                w.f64(format!("{p}/scales"), Section::Quantized, &scales);
            }
        }
        let blob = blob_path(path);
        let manifest = Manifest {
            format: FORMAT_NAME.into(),
            version: FORMAT_VERSION,
            config: self.checkpoint.config.clone(),
            provenance: self.checkpoint.provenance.clone(),
            blob: blob
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_default(),
            blob_len: w.bytes.len(),
            crc32: crc32fast::hash(&w.bytes),
            lora: self.adapters.as_ref().map(|s| s.config.clone()),
            quant_spec: self.quantized.as_ref().map(|q| q.spec),
            tensors: w.entries,
        };
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(&blob, &w.bytes).map_err(|e| Error::io(&blob, e))?;
        let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        fs::write(path, json + "\n").map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::Manifest {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        if manifest.format != FORMAT_NAME || manifest.version != FORMAT_VERSION {
            return Err(Error::Manifest {
                path: path.to_path_buf(),
                message: format!(
                    "unsupported format {} v{}",
                    manifest.format, manifest.version
                ),
            });
        }
        let blob_file = path.with_file_name(&manifest.blob);
        let bytes = fs::read(&blob_file).map_err(|e| Error::io(&blob_file, e))?;
        let found = crc32fast::hash(&bytes);
        if bytes.len() != manifest.blob_len || found != manifest.crc32 {
            return Err(Error::Checksum {
                path: blob_file,
                expected: manifest.crc32,
                found,
            });
        }

        let mut params = BTreeMap::new();
        let mut f64s: BTreeMap<&str, Tensor> = BTreeMap::new();
        let mut i8s: BTreeMap<&str, (Vec<usize>, Vec<i8>)> = BTreeMap::new();
        for e in &manifest.tensors {
            let n: usize = e.shape.iter().product();
            let end = e.offset.checked_add(e.length);
            if n * e.dtype.width() != e.length || end.is_none_or(|end| end > bytes.len()) {
                return Err(Error::Schema {
                    name: e.name.clone(),
                    message: format!(
                        "shape {:?} ({:?}) inconsistent with byte range {}+{}",
                        e.shape, e.dtype, e.offset, e.length
                    ),
                });
            }
            let raw = &bytes[e.offset..e.offset + e.length];
            match e.dtype {
                Dtype::F64 => {
                    let data = raw
                        .chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                        .collect();
                    let t = Tensor::new(e.shape.clone(), data).map_err(|err| Error::Schema {
                        name: e.name.clone(),
                        message: err.to_string(),
                    })?;
                    if e.section == Section::Params {
                        params.insert(e.name.clone(), t);
                    } else {
                        f64s.insert(&e.name, t);
                    }
                }
                Dtype::I8 => {
                    let data = raw.iter().map(|&b| b as i8).collect();
                    i8s.insert(&e.name, (e.shape.clone(), data));
                }
            }
        }

        let checkpoint = Checkpoint {
            config: manifest.config.clone(),
            provenance: manifest.provenance.clone(),
            params,
        };
        checkpoint.validate()?;

        let adapters = match &manifest.lora {
            None => None,
            Some(cfg) => {
                let mut adapters = Vec::new();
                for layer in checkpoint.config.linear_layers() {
                    let p = adapter_prefix(layer);
                    let (Some(a), Some(b)) = (
                        f64s.remove(format!("{p}/A").as_str()),
                        f64s.remove(format!("{p}/B").as_str()),
                    ) else {
                        continue;
                    };
                    adapters.push(LoraAdapter {
                        layer,
                        rank: a.shape()[0],
                        alpha: cfg.alpha,
                        a,
                        b,
                    });
                }
                let set = AdapterSet {
                    config: cfg.clone(),
                    adapters,
                };
                set.check_against(&checkpoint)?;
                Some(set)
            }
        };

        let quantized = match manifest.quant_spec {
            None => None,
            Some(spec) => {
                let mut tensors = BTreeMap::new();
                for layer in checkpoint.config.linear_layers() {
                    let name = layer.param_name();
                    let p = format!("quantized/{name}");
                    let Some((shape, indices)) = i8s.remove(format!("{p}/indices").as_str())
                    else {
                        continue;
                    };
                    let scales = f64s
                        .remove(format!("{p}/scales").as_str())
                        .ok_or_else(|| Error::Schema {
                            name: format!("{p}/scales"),
                            message: "missing".into(),
                        })?
                        .into_data();
                    if scales.is_empty() || indices.len() % scales.len() != 0 {
                        return Err(Error::Schema {
                            name: p,
                            message: "scale count does not divide index count".into(),
                        });
                    }
                    tensors.insert(
                        name,
                        QuantizedTensor {
                            indices,
                            scales,
                            spec,
                            shape,
                        },
                    );
                }
                Some(QuantizedWeights { spec, tensors })
            }
        };

        Ok(Self {
            checkpoint,
            adapters,
            quantized,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lora::{attach, LoraTargets};
    use crate::model::{init_model, load_checkpoint, save_checkpoint};
    use crate::quantizer::quantize_weights;

    fn tiny() -> Checkpoint {
        init_model(&ModelConfig {
            vocab_size: 11,
            d_model: 8,
            n_layers: 1,
            n_heads: 2,
            d_ff: 16,
            context_len: 8,
            seed: 9,
        })
        .unwrap()
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.json");
        let mut ck = tiny();
        ck.provenance = "target".into();
        ck.params.get_mut("tok_emb").unwrap().data_mut()[0] = f64::MIN_POSITIVE;
        save_checkpoint(&ck, &path).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back, ck);
        for (a, b) in ck.params.values().zip(back.params.values()) {
            for (x, y) in a.data().iter().zip(b.data()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn truncated_blob_is_a_checksum_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.json");
        save_checkpoint(&tiny(), &path).unwrap();
        let blob = blob_path(&path);
        let bytes = fs::read(&blob).unwrap();
        fs::write(&blob, &bytes[..bytes.len() / 2]).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Checksum { .. })));
    }

    #[test]
    fn edited_shape_is_a_schema_error_naming_the_parameter() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.json");
        save_checkpoint(&tiny(), &path).unwrap();
        let mut m: Manifest = serde_json::from_str(&fs::read_to_string(&path).unwrap()).unwrap();
        let e = m
            .tensors
            .iter_mut()
            .find(|e| e.name == "blocks.0.mlp_up.weight")
            .unwrap();
        e.shape = vec![8, 16];
        fs::write(&path, serde_json::to_string(&m).unwrap()).unwrap();
        match load_checkpoint(&path) {
            Err(Error::Schema { name, .. }) => assert_eq!(name, "blocks.0.mlp_up.weight"),
            other => panic!("expected schema error, got {other:?}"),
        }
    }

    #[test]
    fn missing_file_is_an_io_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            load_checkpoint(&dir.path().join("nope.json")),
            Err(Error::Io { .. })
        ));
    }

    #[test]
    fn adapters_and_quantized_sections_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("full.json");
        let ck = tiny();
        let mut set = attach(
            &ck,
            &LoraConfig {
                rank: 2,
                targets: LoraTargets::MlpOnly,
                ..Default::default()
            },
        )
        .unwrap();
        set.adapters[0].b.data_mut()[3] = 0.5;
        let qw = quantize_weights(&ck, &QuantSpec::int4()).unwrap();
        let art = Artifact {
            checkpoint: ck,
            adapters: Some(set),
            quantized: Some(qw),
        };
        art.save(&path).unwrap();
        assert_eq!(Artifact::load(&path).unwrap(), art);
    }
}
