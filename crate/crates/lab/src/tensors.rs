//! Thin `f32` layer over the safetensors container.

use std::borrow::Cow;
use std::collections::HashMap;
use std::path::Path;

use safetensors::tensor::{Dtype, SafeTensors, View};

use crate::error::{LabError, Result};

/// Borrowed `f32` tensor serialized little-endian on demand.
pub struct F32View<'a> {
    pub data: &'a [f32],
    pub shape: Vec<usize>,
}

impl View for F32View<'_> {
    fn dtype(&self) -> Dtype {
        Dtype::F32
    }

    fn shape(&self) -> &[usize] {
        &self.shape
    }

    fn data(&self) -> Cow<'_, [u8]> {
        Cow::Owned(self.data.iter().flat_map(|v| v.to_le_bytes()).collect())
    }

    fn data_len(&self) -> usize {
        self.data.len() * 4
    }
}

pub fn write(
    path: &Path,
    tensors: Vec<(String, F32View<'_>)>,
    metadata: HashMap<String, String>,
) -> Result<()> {
    safetensors::serialize_to_file(tensors, &Some(metadata), path)
        .map_err(|e| LabError::format(path, format!("safetensors write: {e}")))
}

pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| LabError::io(path, e))
}

pub fn parse<'a>(path: &Path, bytes: &'a [u8]) -> Result<SafeTensors<'a>> {
    SafeTensors::deserialize(bytes).map_err(|e| LabError::format(path, format!("safetensors: {e}")))
}

pub fn metadata(path: &Path, bytes: &[u8]) -> Result<HashMap<String, String>> {
    let (_, meta) = SafeTensors::read_metadata(bytes)
        .map_err(|e| LabError::format(path, format!("safetensors: {e}")))?;
    Ok(meta.metadata().clone().unwrap_or_default())
}

/// Copies tensor `name` into `dst`, checking dtype and shape.
pub fn copy_into(
    path: &Path,
    st: &SafeTensors<'_>,
    name: &str,
    stored: &str,
    shape: &[usize],
    dst: &mut [f32],
) -> Result<()> {
    let view = st
        .tensor(stored)
        .map_err(|_| LabError::format(path, format!("missing tensor `{name}`")))?;
    if view.dtype() != Dtype::F32 {
        return Err(LabError::format(
            path,
            format!(
                "tensor `{name}` has dtype {:?}; only F32 is supported",
                view.dtype()
            ),
        ));
    }
    if view.shape() != shape {
        return Err(LabError::format(
            path,
            format!(
                "tensor `{name}` has shape {:?}, expected {shape:?}",
                view.shape()
            ),
        ));
    }
    for (d, b) in dst.iter_mut().zip(view.data().chunks_exact(4)) {
        *d = f32::from_le_bytes(b.try_into().unwrap());
    }
    Ok(())
}
