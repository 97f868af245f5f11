//! Model files: `<stem>.json` manifest plus `<stem>.bin` holding every tensor
//! as little-endian `f32`, concatenated in manifest order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::{ArchDescriptor, NetParams, ParamSet};
use crate::tensor::Tensor;
use crate::train::TrainConfig;

const FORMAT: &str = "oral3d-model/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: String,
    pub arch: ArchDescriptor,
    pub tensors: Vec<TensorEntry>,
    pub train: Option<TrainConfig>,
}

fn entries(set: &ParamSet<f32>) -> impl Iterator<Item = TensorEntry> + '_ {
    set.names().iter().zip(set.tensors()).map(|(n, t)| TensorEntry { name: n.clone(), shape: t.shape().to_vec() })
}

pub fn save_model(stem: impl AsRef<Path>, params: &NetParams<f32>, train: Option<&TrainConfig>) -> Result<()> {
    let stem = stem.as_ref();
    if let Some(dir) = stem.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let manifest = Manifest {
        format: FORMAT.into(),
        arch: params.arch.clone(),
        tensors: entries(&params.generator).chain(entries(&params.discriminator)).collect(),
        train: train.cloned(),
    };
    let mut blob = Vec::new();
    for t in params.generator.tensors().iter().chain(params.discriminator.tensors()) {
        for v in t.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(stem.with_extension("bin"), blob)?;
    fs::write(stem.with_extension("json"), serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(())
}

pub fn load_model(stem: impl AsRef<Path>) -> Result<(NetParams<f32>, Option<TrainConfig>)> {
    let stem = stem.as_ref();
    let manifest: Manifest = serde_json::from_slice(&fs::read(stem.with_extension("json"))?)?;
    if manifest.format != FORMAT {
        return Err(Error::Format(format!("unknown model format {:?}", manifest.format)));
    }
    let blob = fs::read(stem.with_extension("bin"))?;
    let need: usize = manifest.tensors.iter().map(|e| e.shape.iter().product::<usize>()).sum();
    if blob.len() != need * 4 {
        return Err(Error::Format(format!("parameter blob has {} bytes, manifest needs {}", blob.len(), need * 4)));
    }
    let mut values = blob.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]));
    let (mut g, mut d) = ((Vec::new(), Vec::new()), (Vec::new(), Vec::new()));
    for e in manifest.tensors {
        let n = e.shape.iter().product();
        let t = Tensor::new(e.shape, values.by_ref().take(n).collect())?;
        let dst = if e.name.starts_with("d.") { &mut d } else { &mut g };
        dst.0.push(e.name);
        dst.1.push(t);
    }
    let params = NetParams::from_parts(manifest.arch, ParamSet::from_parts(g.0, g.1)?, ParamSet::from_parts(d.0, d.1)?)?;
    Ok((params, manifest.train))
}
