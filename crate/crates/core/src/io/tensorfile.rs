//! Named-array container files (safetensors layout) with a JSON metadata string.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use safetensors::tensor::{Dtype, SafeTensors, TensorView};

use crate::error::{Error, Result};

/// Key under which the metadata string is stored in the file header.
const META_KEY: &str = "occpose";

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(ArrayD<f32>),
    F64(ArrayD<f64>),
    I32(ArrayD<i32>),
    U8(ArrayD<u8>),
}

impl TensorData {
    pub fn shape(&self) -> &[usize] {
        match self {
            TensorData::F32(a) => a.shape(),
            TensorData::F64(a) => a.shape(),
            TensorData::I32(a) => a.shape(),
            TensorData::U8(a) => a.shape(),
        }
    }

    fn dtype(&self) -> Dtype {
        match self {
            TensorData::F32(_) => Dtype::F32,
            TensorData::F64(_) => Dtype::F64,
            TensorData::I32(_) => Dtype::I32,
            TensorData::U8(_) => Dtype::U8,
        }
    }

    fn bytes(&self) -> Vec<u8> {
        match self {
            TensorData::F32(a) => a.iter().flat_map(|v| v.to_le_bytes()).collect(),
            TensorData::F64(a) => a.iter().flat_map(|v| v.to_le_bytes()).collect(),
            TensorData::I32(a) => a.iter().flat_map(|v| v.to_le_bytes()).collect(),
            TensorData::U8(a) => a.iter().copied().collect(),
        }
    }

    pub fn into_f32(self, name: &str) -> Result<ArrayD<f32>> {
        match self {
            TensorData::F32(a) => Ok(a),
            other => Err(Error::Format(format!("tensor {name}: expected f32, found {:?}", other.dtype()))),
        }
    }

    pub fn into_f64(self, name: &str) -> Result<ArrayD<f64>> {
        match self {
            TensorData::F64(a) => Ok(a),
            other => Err(Error::Format(format!("tensor {name}: expected f64, found {:?}", other.dtype()))),
        }
    }

    pub fn into_i32(self, name: &str) -> Result<ArrayD<i32>> {
        match self {
            TensorData::I32(a) => Ok(a),
            other => Err(Error::Format(format!("tensor {name}: expected i32, found {:?}", other.dtype()))),
        }
    }

    pub fn into_u8(self, name: &str) -> Result<ArrayD<u8>> {
        match self {
            TensorData::U8(a) => Ok(a),
            other => Err(Error::Format(format!("tensor {name}: expected u8, found {:?}", other.dtype()))),
        }
    }
}

fn fmt_err(e: impl std::fmt::Display) -> Error {
    Error::Format(e.to_string())
}

pub fn write_tensors(path: &Path, tensors: &BTreeMap<String, TensorData>, metadata: &str) -> Result<()> {
    let bytes: Vec<(String, Vec<u8>, &TensorData)> =
        tensors.iter().map(|(k, t)| (k.clone(), t.bytes(), t)).collect();
    let views = bytes
        .iter()
        .map(|(k, b, t)| Ok((k.clone(), TensorView::new(t.dtype(), t.shape().to_vec(), b).map_err(fmt_err)?)))
        .collect::<Result<Vec<_>>>()?;
    let meta = Some([(META_KEY.to_string(), metadata.to_string())].into_iter().collect());
    safetensors::serialize_to_file(views, &meta, path).map_err(fmt_err)
}

fn le_chunks<const N: usize, T>(data: &[u8], f: fn([u8; N]) -> T) -> Vec<T> {
    data.chunks_exact(N).map(|c| f(c.try_into().expect("chunk size"))).collect()
}

pub fn read_tensors(path: &Path) -> Result<(BTreeMap<String, TensorData>, String)> {
    let buf = std::fs::read(path)?;
    let (_, header) = SafeTensors::read_metadata(&buf).map_err(fmt_err)?;
    let metadata = header
        .metadata()
        .as_ref()
        .and_then(|m| m.get(META_KEY).cloned())
        .ok_or_else(|| Error::Format(format!("{}: missing metadata", path.display())))?;
    let st = SafeTensors::deserialize(&buf).map_err(fmt_err)?;
    let mut out = BTreeMap::new();
    for (name, view) in st.tensors() {
        let shape = IxDyn(view.shape());
        let data = view.data();
        let t = match view.dtype() {
            Dtype::F32 => TensorData::F32(ArrayD::from_shape_vec(shape, le_chunks(data, f32::from_le_bytes)).map_err(fmt_err)?),
            Dtype::F64 => TensorData::F64(ArrayD::from_shape_vec(shape, le_chunks(data, f64::from_le_bytes)).map_err(fmt_err)?),
            Dtype::I32 => TensorData::I32(ArrayD::from_shape_vec(shape, le_chunks(data, i32::from_le_bytes)).map_err(fmt_err)?),
            Dtype::U8 => TensorData::U8(ArrayD::from_shape_vec(shape, data.to_vec()).map_err(fmt_err)?),
            other => return Err(Error::Format(format!("tensor {name}: unsupported dtype {other:?}"))),
        };
        out.insert(name, t);
    }
    Ok((out, metadata))
}
