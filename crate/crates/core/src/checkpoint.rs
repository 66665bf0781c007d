//! Single-file checkpoints: a safetensors container holding every parameter,
//! the per-class schedule state, and a JSON header echoing the run config.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use safetensors::tensor::{Dtype as StDtype, TensorView};
use safetensors::SafeTensors;
use serde::{Deserialize, Serialize};

use crate::adversary::ClassState;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::train::Models;

pub const FORMAT_VERSION: u32 = 1;
const HEADER_KEY: &str = "icfd";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    num_classes: usize,
    image_size: usize,
    class_names: Vec<String>,
    config: RunConfig,
}

/// Everything needed to resume evaluation from disk.
pub struct Checkpoint {
    pub models: Models,
    pub state: ClassState,
    pub config: RunConfig,
    pub class_names: Vec<String>,
}

fn ckpt_err(path: &Path, msg: impl std::fmt::Display) -> Error {
    Error::Checkpoint(format!("{}: {msg}", path.display()))
}

fn f32_bytes(t: &Tensor) -> Result<Vec<u8>> {
    let v = t.flatten_all()?.to_dtype(DType::F32)?.to_vec1::<f32>()?;
    Ok(v.iter().flat_map(|x| x.to_le_bytes()).collect())
}

fn f64_bytes(v: &[f64]) -> Vec<u8> {
    v.iter().flat_map(|x| x.to_le_bytes()).collect()
}

/// Serializes models and state to bytes. Equal inputs give equal bytes.
pub fn checkpoint_bytes(models: &Models, state: &ClassState, config: &RunConfig, class_names: &[String]) -> Result<Vec<u8>> {
    let header = Header {
        format_version: FORMAT_VERSION,
        num_classes: state.num_classes(),
        image_size: models.image_size,
        class_names: class_names.to_vec(),
        config: config.clone(),
    };
    let header = serde_json::to_string(&header).map_err(|e| Error::Checkpoint(e.to_string()))?;

    let mut blobs: Vec<(String, Vec<usize>, StDtype, Vec<u8>)> = Vec::new();
    for (prefix, store) in models.stores() {
        for (name, var) in store.iter() {
            blobs.push((
                format!("{prefix}.{name}"),
                var.dims().to_vec(),
                StDtype::F32,
                f32_bytes(var.as_tensor())?,
            ));
        }
    }
    let k = state.num_classes();
    for (name, v) in [
        ("state.acc", state.accuracies()),
        ("state.eps", state.epsilons()),
        ("state.beta", state.betas()),
    ] {
        blobs.push((name.to_string(), vec![k], StDtype::F64, f64_bytes(v)));
    }
    let views = blobs
        .iter()
        .map(|(n, shape, dt, data)| {
            TensorView::new(*dt, shape.clone(), data)
                .map(|v| (n.clone(), v))
                .map_err(|e| Error::Checkpoint(e.to_string()))
        })
        .collect::<Result<Vec<_>>>()?;
    let meta = HashMap::from([(HEADER_KEY.to_string(), header)]);
    safetensors::serialize(views, Some(meta)).map_err(|e| Error::Checkpoint(e.to_string()))
}

pub fn save_checkpoint(
    path: &Path,
    models: &Models,
    state: &ClassState,
    config: &RunConfig,
    class_names: &[String],
) -> Result<()> {
    let bytes = checkpoint_bytes(models, state, config, class_names)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_f64(st: &SafeTensors, name: &str, k: usize, path: &Path) -> Result<Vec<f64>> {
    let v = st.tensor(name).map_err(|e| ckpt_err(path, format!("{name}: {e}")))?;
    if v.dtype() != StDtype::F64 || v.shape() != [k] {
        return Err(ckpt_err(path, format!("{name}: expected f64[{k}]")));
    }
    Ok(v.data()
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect())
}

pub fn load_checkpoint_bytes(bytes: &[u8], path: &Path) -> Result<Checkpoint> {
    let (_, meta) = SafeTensors::read_metadata(bytes).map_err(|e| ckpt_err(path, format!("corrupt container: {e}")))?;
    let header = meta
        .metadata()
        .as_ref()
        .and_then(|m| m.get(HEADER_KEY))
        .ok_or_else(|| ckpt_err(path, "missing header"))?;
    let header: Header = serde_json::from_str(header).map_err(|e| ckpt_err(path, format!("bad header: {e}")))?;
    if header.format_version != FORMAT_VERSION {
        return Err(ckpt_err(
            path,
            format!("format version {} (expected {FORMAT_VERSION})", header.format_version),
        ));
    }
    let st = SafeTensors::deserialize(bytes).map_err(|e| ckpt_err(path, format!("corrupt container: {e}")))?;

    let device = Device::Cpu;
    let models = Models::build(&header.config, header.num_classes, header.image_size, DType::F32, &device)?;
    let mut expected = 3;
    for (prefix, store) in models.stores() {
        for (name, var) in store.iter() {
            let key = format!("{prefix}.{name}");
            let v = st.tensor(&key).map_err(|_| ckpt_err(path, format!("missing tensor {key}")))?;
            if v.dtype() != StDtype::F32 || v.shape() != var.dims() {
                return Err(ckpt_err(path, format!("tensor {key} has wrong dtype or shape")));
            }
            let data: Vec<f32> = v
                .data()
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            store.assign(name, &Tensor::from_vec(data, var.dims(), &device)?)?;
            expected += 1;
        }
    }
    if st.len() != expected {
        return Err(ckpt_err(path, format!("{} tensors stored, {expected} expected", st.len())));
    }
    let k = header.num_classes;
    let state = ClassState::from_parts(
        read_f64(&st, "state.acc", k, path)?,
        read_f64(&st, "state.eps", k, path)?,
        read_f64(&st, "state.beta", k, path)?,
        header.config.schedule,
    )
    .map_err(|e| ckpt_err(path, e))?;
    Ok(Checkpoint {
        models,
        state,
        config: header.config,
        class_names: header.class_names,
    })
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    load_checkpoint_bytes(&bytes, path)
}
