//! `<name>.model.json` manifest plus `<name>.weights.f64` (or `.f32`)
//! little-endian blob holding every parameter and running buffer in
//! manifest order.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::graph::{ModelGraph, NodeSpec};
use super::layers::{LayerSpec, Shape3};
use crate::error::{Error, Result};

pub const MODEL_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WeightDtype {
    F32,
    F64,
}

impl WeightDtype {
    fn width(self) -> usize {
        match self {
            WeightDtype::F32 => 4,
            WeightDtype::F64 => 8,
        }
    }

    fn extension(self) -> &'static str {
        match self {
            WeightDtype::F32 => ".weights.f32",
            WeightDtype::F64 => ".weights.f64",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorRecord {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeRecord {
    pub name: String,
    pub inputs: Vec<usize>,
    pub layer: LayerSpec,
    pub output_shape: Shape3,
    pub params: Vec<TensorRecord>,
    pub buffers: Vec<TensorRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub architecture: String,
    pub input_shape: Shape3,
    pub dtype: WeightDtype,
    pub param_count: usize,
    /// Parameters plus buffers, the number of values in the blob.
    pub value_count: usize,
    pub nodes: Vec<NodeRecord>,
}

/// Strip `.model.json` or a weights extension so any of the files names the
/// model.
pub fn model_base(path: &Path) -> PathBuf {
    let s = path.to_string_lossy();
    for ext in [".model.json", ".weights.f64", ".weights.f32"] {
        if let Some(stem) = s.strip_suffix(ext) {
            return PathBuf::from(stem);
        }
    }
    path.to_path_buf()
}

fn with_suffix(base: &Path, suffix: &str) -> PathBuf {
    let mut s = base.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

pub fn manifest_path(base: &Path) -> PathBuf {
    with_suffix(&model_base(base), ".model.json")
}

pub fn manifest(g: &ModelGraph, dtype: WeightDtype) -> Manifest {
    let nodes: Vec<NodeRecord> = g
        .nodes
        .iter()
        .map(|n| NodeRecord {
            name: n.name.clone(),
            inputs: n.inputs.clone(),
            layer: n.layer.spec.clone(),
            output_shape: n.out_shape,
            params: n
                .layer
                .params
                .iter()
                .map(|p| TensorRecord {
                    name: p.name.clone(),
                    shape: p.shape.clone(),
                })
                .collect(),
            buffers: n
                .layer
                .buffers
                .iter()
                .map(|b| TensorRecord {
                    name: b.name.clone(),
                    shape: vec![b.value.len()],
                })
                .collect(),
        })
        .collect();
    let value_count = nodes
        .iter()
        .flat_map(|n| n.params.iter().chain(&n.buffers))
        .map(|t| t.shape.iter().product::<usize>())
        .sum();
    Manifest {
        version: MODEL_FORMAT_VERSION,
        architecture: g.architecture.clone(),
        input_shape: g.input_shape,
        dtype,
        param_count: g.param_count(),
        value_count,
        nodes,
    }
}

/// Writes manifest and blob next to `base`; returns the manifest path.
pub fn save_weights(g: &ModelGraph, base: &Path, dtype: WeightDtype) -> Result<PathBuf> {
    let base = model_base(base);
    let m = manifest(g, dtype);
    let values = g
        .nodes
        .iter()
        .flat_map(|n| n.layer.params.iter().map(|p| &p.value).chain(n.layer.buffers.iter().map(|b| &b.value)))
        .flatten();
    let blob: Vec<u8> = match dtype {
        WeightDtype::F64 => values.flat_map(|v| v.to_le_bytes()).collect(),
        WeightDtype::F32 => values.flat_map(|&v| (v as f32).to_le_bytes()).collect(),
    };
    if let Some(dir) = base.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let mpath = with_suffix(&base, ".model.json");
    fs::write(&mpath, serde_json::to_vec_pretty(&m)?)?;
    fs::write(with_suffix(&base, dtype.extension()), blob)?;
    Ok(mpath)
}

pub fn load_weights(path: &Path) -> Result<ModelGraph> {
    let base = model_base(path);
    let text = fs::read(with_suffix(&base, ".model.json"))?;
    let m: Manifest = serde_json::from_slice(&text).map_err(|e| Error::CorruptModel(format!("manifest: {e}")))?;
    if m.version != MODEL_FORMAT_VERSION {
        return Err(Error::CorruptModel(format!("unsupported version {}", m.version)));
    }
    let bytes = fs::read(with_suffix(&base, m.dtype.extension()))?;
    let width = m.dtype.width();
    if bytes.len() != m.value_count * width {
        return Err(Error::CorruptModel(format!(
            "blob holds {} bytes, manifest implies {} values of {width} bytes",
            bytes.len(),
            m.value_count
        )));
    }
    let values: Vec<f64> = match m.dtype {
        WeightDtype::F64 => bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect(),
        WeightDtype::F32 => bytes
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4-byte chunk"))))
            .collect(),
    };
    let specs = m
        .nodes
        .iter()
        .map(|n| NodeSpec {
            name: n.name.clone(),
            inputs: n.inputs.clone(),
            layer: n.layer.clone(),
        })
        .collect();
    let mut g = ModelGraph::from_specs(&m.architecture, m.input_shape, specs, 0)
        .map_err(|e| Error::CorruptModel(format!("graph: {e}")))?;
    let fresh = manifest(&g, m.dtype);
    if fresh.nodes != m.nodes || fresh.value_count != m.value_count || fresh.param_count != m.param_count {
        return Err(Error::CorruptModel("manifest records disagree with the layer specs".into()));
    }
    let mut it = values.into_iter();
    for n in &mut g.nodes {
        let layer = &mut n.layer;
        for v in layer
            .params
            .iter_mut()
            .map(|p| &mut p.value)
            .chain(layer.buffers.iter_mut().map(|b| &mut b.value))
        {
            v.iter_mut().for_each(|x| *x = it.next().expect("length checked"));
        }
    }
    if g.params().flat_map(|p| &p.value).any(|v| !v.is_finite()) {
        return Err(Error::CorruptModel("non-finite weight".into()));
    }
    Ok(g)
}
