//! Checkpoints: `manifest.json` describing every tensor plus `tensors.bin`,
//! the concatenated little-endian `f64` data.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{GlabError, Result};
use crate::garfa::GarfaParams;
use crate::lslora::{LoraAdapter, LoraFactors, LoraSpec};
use crate::model::{Model, ModelConfig, ModelParams, Projection};
use crate::numcore::Tensor;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const BLOB_FILE: &str = "tensors.bin";
const FORMAT: &str = "glab-checkpoint-v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    /// Byte offset into the blob.
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub config: ModelConfig,
    pub lora: Option<LoraSpec>,
    pub garfa_layers: Option<BTreeSet<usize>>,
    pub tensors: Vec<TensorEntry>,
}

/// Write the model, its adapters and GARFA scalars into `dir`.
pub fn save(model: &Model, dir: &Path) -> Result<Vec<String>> {
    fs::create_dir_all(dir).map_err(|e| GlabError::io(dir, e))?;
    let mut named: Vec<(String, &Tensor)> = model.params.named_tensors();
    if let Some(l) = &model.lora {
        named.extend(l.named_tensors());
    }
    if let Some(g) = &model.garfa {
        named.extend(g.raw.iter().map(|(&(l, k), t)| (format!("garfa.{l}.{k}"), t)));
    }
    let mut blob = Vec::new();
    let mut tensors = Vec::with_capacity(named.len());
    for (name, t) in named {
        tensors.push(TensorEntry {
            name,
            shape: t.shape.clone(),
            dtype: "f64".into(),
            offset: blob.len(),
        });
        for v in &t.data {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = Manifest {
        format: FORMAT.into(),
        config: model.config.clone(),
        lora: model.lora.as_ref().map(|l| l.spec.clone()),
        garfa_layers: model.garfa.as_ref().map(|g| g.layer_set.clone()),
        tensors,
    };
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    let mpath = dir.join(MANIFEST_FILE);
    let bpath = dir.join(BLOB_FILE);
    fs::write(&mpath, text + "\n").map_err(|e| GlabError::io(&mpath, e))?;
    fs::write(&bpath, blob).map_err(|e| GlabError::io(&bpath, e))?;
    Ok(vec![MANIFEST_FILE.into(), BLOB_FILE.into()])
}

/// Read every tensor of a checkpoint by name.
pub fn read_tensors(dir: &Path) -> Result<(Manifest, BTreeMap<String, Tensor>)> {
    let mpath = dir.join(MANIFEST_FILE);
    let bpath = dir.join(BLOB_FILE);
    let text = fs::read_to_string(&mpath).map_err(|e| GlabError::io(&mpath, e))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| GlabError::parse(&mpath, e.to_string()))?;
    if manifest.format != FORMAT {
        return Err(GlabError::parse(
            &mpath,
            format!("unknown format {:?}", manifest.format),
        ));
    }
    let blob = fs::read(&bpath).map_err(|e| GlabError::io(&bpath, e))?;
    let mut out = BTreeMap::new();
    for e in &manifest.tensors {
        if e.dtype != "f64" {
            return Err(GlabError::parse(
                &mpath,
                format!("{}: unsupported dtype {}", e.name, e.dtype),
            ));
        }
        let n: usize = e.shape.iter().product();
        let end = e.offset + 8 * n;
        if end > blob.len() {
            return Err(GlabError::parse(
                &bpath,
                format!("{} runs past the end of the blob", e.name),
            ));
        }
        let data = blob[e.offset..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        out.insert(e.name.clone(), Tensor::new(e.shape.clone(), data)?);
    }
    Ok((manifest, out))
}

/// Rebuild a model from a checkpoint directory.
pub fn load(dir: &Path) -> Result<Model> {
    let (manifest, mut tensors) = read_tensors(dir)?;
    let mpath = dir.join(MANIFEST_FILE);
    let mut take = |name: &str, shape: &[usize]| -> Result<Tensor> {
        let t = tensors
            .remove(name)
            .ok_or_else(|| GlabError::parse(&mpath, format!("missing tensor {name}")))?;
        if t.shape != shape {
            return Err(GlabError::parse(
                &mpath,
                format!("tensor {name} has shape {:?}, expected {:?}", t.shape, shape),
            ));
        }
        Ok(t)
    };

    let config = manifest.config.clone();
    let mut params = ModelParams::init(&config, 0)?;
    for (name, t) in params.named_tensors_mut() {
        *t = take(&name, &t.shape.clone())?;
    }

    let lora = match &manifest.lora {
        Some(spec) => {
            let mut factors = BTreeMap::new();
            for &l in &spec.layers {
                for &p in &spec.targets {
                    let (d, k) = p.shape(&config);
                    let a = take(&format!("lora.{l}.{p}.A"), &[spec.rank, k])?.with_requires_grad(true);
                    let b = take(&format!("lora.{l}.{p}.B"), &[d, spec.rank])?.with_requires_grad(true);
                    factors.insert((l, p), LoraFactors { a, b });
                }
            }
            Some(LoraAdapter {
                spec: spec.clone(),
                factors,
            })
        }
        None => None,
    };

    let garfa = match &manifest.garfa_layers {
        Some(set) => {
            let mut g = GarfaParams::init_identity(set, config.n_kv_heads)?;
            for (&(l, k), t) in g.raw.iter_mut() {
                *t = take(&format!("garfa.{l}.{k}"), &[1])?.with_requires_grad(true);
            }
            Some(g)
        }
        None => None,
    };

    let mut model = Model {
        config,
        params,
        lora: None,
        garfa: None,
    };
    if let Some(l) = lora {
        model.attach_lora(l)?;
    }
    if let Some(g) = garfa {
        model.attach_garfa(g)?;
    }
    Ok(model)
}

/// Parse `lora.<layer>.<projection>.{A|B}`.
pub fn parse_lora_name(name: &str) -> Option<(usize, Projection, char)> {
    let mut it = name.split('.');
    if it.next()? != "lora" {
        return None;
    }
    let layer = it.next()?.parse().ok()?;
    let proj = it.next()?.parse().ok()?;
    let which = match it.next()? {
        "A" => 'A',
        "B" => 'B',
        _ => return None,
    };
    it.next().is_none().then_some((layer, proj, which))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = Model::init(&ModelConfig::toy(), 5).unwrap();
        let spec = LoraSpec {
            rank: 2,
            targets: [Projection::Q, Projection::Down].into(),
            layers: [3].into(),
            ..LoraSpec::default()
        };
        m.attach_lora(LoraAdapter::inject(&spec, &m.config, 9).unwrap())
            .unwrap();
        let mut g = GarfaParams::init_identity(&[2].into(), 2).unwrap();
        g.set_alpha(2, 1, 3.5).unwrap();
        m.attach_garfa(g).unwrap();

        save(&m, dir.path()).unwrap();
        let back = load(dir.path()).unwrap();
        assert_eq!(back.params.fingerprint(), m.params.fingerprint());
        assert_eq!(back.lora, m.lora);
        assert_eq!(back.garfa, m.garfa);

        let (manifest, tensors) = read_tensors(dir.path()).unwrap();
        assert!(tensors.contains_key("lora.3.down.B"));
        assert_eq!(manifest.tensors[0].offset, 0);
    }

    #[test]
    fn lora_names() {
        assert_eq!(parse_lora_name("lora.3.gate.A"), Some((3, Projection::Gate, 'A')));
        assert_eq!(parse_lora_name("lora.3.gate.C"), None);
        assert_eq!(parse_lora_name("layers.3.wq"), None);
    }

    #[test]
    fn truncated_blob_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let m = Model::init(&ModelConfig::toy(), 1).unwrap();
        save(&m, dir.path()).unwrap();
        let blob = dir.path().join(BLOB_FILE);
        let bytes = fs::read(&blob).unwrap();
        fs::write(&blob, &bytes[..bytes.len() / 2]).unwrap();
        let err = load(dir.path()).unwrap_err().to_string();
        assert!(err.contains("tensors.bin"), "{err}");
    }
}
