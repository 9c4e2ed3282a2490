//! Single-file model checkpoints: named tensors plus the model configuration.

use std::collections::HashMap;
use std::path::Path;

use safetensors::tensor::TensorView;
use safetensors::{Dtype, SafeTensors};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gemm::NetScalar;
use crate::model::{FcDenseNet, ModelConfig};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

/// Header key holding [`CheckpointHeader`] as JSON. A single key keeps the
/// file bytes independent of hash-map iteration order.
const HEADER_KEY: &str = "longct";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub config: ModelConfig,
    /// Free-form provenance such as the epoch a checkpoint was taken at.
    #[serde(default)]
    pub note: String,
}

pub fn to_bytes<T: NetScalar>(model: &FcDenseNet<T>, note: &str) -> Result<Vec<u8>> {
    let header = CheckpointHeader {
        format_version: CHECKPOINT_FORMAT_VERSION,
        config: model.config.clone(),
        note: note.to_string(),
    };
    let mut named: Vec<(String, Vec<usize>, Vec<u8>)> = Vec::new();
    let encode = |v: &[T]| {
        let mut b = Vec::with_capacity(v.len() * std::mem::size_of::<T>());
        v.iter().for_each(|&x| x.to_le(&mut b));
        b
    };
    for (name, p) in model.params() {
        named.push((name, p.shape.clone(), encode(&p.value)));
    }
    for (name, b) in model.buffers() {
        named.push((name, vec![b.len()], encode(b)));
    }
    let views = named
        .iter()
        .map(|(n, shape, bytes)| Ok((n.as_str(), TensorView::new(T::DTYPE, shape.clone(), bytes)?)))
        .collect::<Result<Vec<_>>>()?;
    let meta = HashMap::from([(HEADER_KEY.to_string(), serde_json::to_string(&header).expect("serializable header"))]);
    Ok(safetensors::serialize(views, Some(meta))?)
}

pub fn save<T: NetScalar>(model: &FcDenseNet<T>, path: &Path, note: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, to_bytes(model, note)?)?;
    Ok(())
}

pub fn read_header(bytes: &[u8]) -> Result<CheckpointHeader> {
    let (_, meta) = SafeTensors::read_metadata(bytes)?;
    let raw = meta
        .metadata()
        .as_ref()
        .and_then(|m| m.get(HEADER_KEY))
        .ok_or_else(|| Error::Checkpoint("missing checkpoint header".into()))?;
    let header: CheckpointHeader =
        serde_json::from_str(raw).map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
    if header.format_version != CHECKPOINT_FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "format version {} (expected {CHECKPOINT_FORMAT_VERSION})",
            header.format_version
        )));
    }
    Ok(header)
}

fn decode<T: NetScalar>(view: &TensorView<'_>) -> Result<Vec<T>> {
    let data = view.data();
    Ok(match view.dtype() {
        Dtype::F32 => data.chunks_exact(4).map(|c| T::of(f32::from_le(c) as f64)).collect(),
        Dtype::F64 => data.chunks_exact(8).map(|c| T::of(f64::from_le(c))).collect(),
        other => return Err(Error::Checkpoint(format!("unsupported dtype {other:?}"))),
    })
}

pub fn from_bytes<T: NetScalar>(bytes: &[u8]) -> Result<(FcDenseNet<T>, CheckpointHeader)> {
    let header = read_header(bytes)?;
    let tensors = SafeTensors::deserialize(bytes)?;
    let mut model = FcDenseNet::<T>::new(header.config.clone(), 0)?;
    let expected = model.params().len() + model.buffers().len();
    if tensors.len() != expected {
        return Err(Error::Checkpoint(format!("{} tensors, expected {expected}", tensors.len())));
    }
    for (name, p) in model.params_mut() {
        let view = tensors.tensor(&name)?;
        if view.shape() != p.shape.as_slice() {
            return Err(Error::Checkpoint(format!("{name}: shape {:?}, expected {:?}", view.shape(), p.shape)));
        }
        p.value = decode(&view)?;
    }
    for (name, b) in model.buffers_mut() {
        let view = tensors.tensor(&name)?;
        if view.shape() != [b.len()] {
            return Err(Error::Checkpoint(format!("{name}: shape {:?}", view.shape())));
        }
        *b = decode(&view)?;
    }
    Ok((model, header))
}

pub fn load<T: NetScalar>(path: &Path) -> Result<(FcDenseNet<T>, CheckpointHeader)> {
    from_bytes(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Variant;
    use crate::tensor::Act;

    fn tiny() -> ModelConfig {
        ModelConfig { first_conv_filters: 4, growth_rate: 2, down_blocks: vec![1, 1], up_blocks: vec![1, 1], bottleneck_layers: 1, ..ModelConfig::new(Variant::Longitudinal) }
    }

    #[test]
    fn roundtrip_preserves_outputs_and_bytes() {
        let mut model = FcDenseNet::<f32>::new(tiny(), 7).unwrap();
        model.buffers_mut()[0].1[0] = 0.5;
        let bytes = to_bytes(&model, "epoch 3").unwrap();
        assert_eq!(bytes, to_bytes(&model, "epoch 3").unwrap());
        let (back, header) = from_bytes::<f32>(&bytes).unwrap();
        assert_eq!(header.note, "epoch 3");
        assert_eq!(header.config, model.config);
        let x = Act::from_nchw(1, 2, 8, 8, &vec![0.25f32; 128]);
        assert_eq!(back.forward_eval(&x).unwrap().data, model.forward_eval(&x).unwrap().data);
        let (wide, _) = from_bytes::<f64>(&bytes).unwrap();
        assert_eq!(wide.params()[0].1.value[0], model.params()[0].1.value[0] as f64);
    }

    #[test]
    fn corrupted_or_foreign_files_are_rejected() {
        let model = FcDenseNet::<f32>::new(tiny(), 7).unwrap();
        let bytes = to_bytes(&model, "").unwrap();
        assert!(from_bytes::<f32>(&bytes[..bytes.len() / 2]).is_err());
        let plain = safetensors::serialize(Vec::<(&str, TensorView)>::new(), None).unwrap();
        assert!(matches!(from_bytes::<f32>(&plain), Err(Error::Checkpoint(_))));
    }
}
