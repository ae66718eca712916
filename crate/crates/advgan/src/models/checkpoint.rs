//! Checkpoint directory format: a JSON manifest naming every tensor plus
//! one little-endian raw file per tensor. Round trips are bit-exact.

use std::fs;
use std::path::Path;

use ndarray::ArrayD;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Param;
use crate::Scalar;

#[derive(Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub kind: String,
    pub arch: String,
    pub dtype: String,
    pub seed: u64,
    /// Extra model metadata (for generators: the perturbation bound).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epsilon: Option<f64>,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub file: String,
}

pub fn dtype_name<F: Scalar>() -> &'static str {
    match std::mem::size_of::<F>() {
        4 => "f32",
        8 => "f64",
        _ => "unknown",
    }
}

fn tensor_to_bytes<F: Scalar>(t: &ArrayD<F>) -> Vec<u8> {
    let mut out = Vec::with_capacity(t.len() * std::mem::size_of::<F>());
    for &v in t.as_standard_layout().iter() {
        if std::mem::size_of::<F>() == 4 {
            out.extend_from_slice(&(v.to_f32().unwrap()).to_le_bytes());
        } else {
            out.extend_from_slice(&(v.to_f64().unwrap()).to_le_bytes());
        }
    }
    out
}

fn tensor_from_bytes<F: Scalar>(bytes: &[u8], shape: &[usize]) -> Result<ArrayD<F>> {
    let elem = std::mem::size_of::<F>();
    let expected: usize = shape.iter().product::<usize>() * elem;
    if bytes.len() != expected {
        return Err(Error::CorruptTensor(format!(
            "expected {expected} bytes, found {}",
            bytes.len()
        )));
    }
    let mut values = Vec::with_capacity(bytes.len() / elem);
    for chunk in bytes.chunks_exact(elem) {
        let v = if elem == 4 {
            F::from_f32(f32::from_le_bytes(chunk.try_into().unwrap())).unwrap()
        } else {
            F::from_f64(f64::from_le_bytes(chunk.try_into().unwrap())).unwrap()
        };
        values.push(v);
    }
    ArrayD::from_shape_vec(ndarray::IxDyn(shape), values)
        .map_err(|e| Error::CorruptTensor(e.to_string()))
}

/// Writes manifest + tensor files for a set of named parameters.
pub fn save_params<F: Scalar>(
    dir: &Path,
    kind: &str,
    arch: &str,
    seed: u64,
    epsilon: Option<f64>,
    params: &[(String, &Param<F>)],
) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut tensors = Vec::new();
    for (name, p) in params {
        let file = format!("{}.bin", name.replace('.', "_"));
        fs::write(dir.join(&file), tensor_to_bytes(&p.value))?;
        tensors.push(TensorEntry {
            name: name.clone(),
            shape: p.value.shape().to_vec(),
            file,
        });
    }
    let manifest = Manifest {
        kind: kind.to_string(),
        arch: arch.to_string(),
        dtype: dtype_name::<F>().to_string(),
        seed,
        epsilon,
        tensors,
    };
    fs::write(
        dir.join("manifest.json"),
        serde_json::to_vec_pretty(&manifest)?,
    )?;
    Ok(())
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join("manifest.json");
    let bytes = fs::read(&path)
        .map_err(|_| Error::ManifestMismatch(format!("missing manifest at {}", path.display())))?;
    Ok(serde_json::from_slice(&bytes)?)
}

/// Loads manifest tensors into an existing parameter set built from the
/// manifest's architecture. Shapes must match exactly.
pub fn load_params<F: Scalar>(
    dir: &Path,
    manifest: &Manifest,
    params: &mut [(String, &mut Param<F>)],
) -> Result<()> {
    if manifest.dtype != dtype_name::<F>() {
        return Err(Error::ManifestMismatch(format!(
            "dtype {} does not match requested {}",
            manifest.dtype,
            dtype_name::<F>()
        )));
    }
    if manifest.tensors.len() != params.len() {
        return Err(Error::ManifestMismatch(format!(
            "manifest has {} tensors, model has {}",
            manifest.tensors.len(),
            params.len()
        )));
    }
    for (entry, (name, p)) in manifest.tensors.iter().zip(params.iter_mut()) {
        if &entry.name != name {
            return Err(Error::ManifestMismatch(format!(
                "tensor '{}' does not match model parameter '{name}'",
                entry.name
            )));
        }
        if entry.shape != p.value.shape() {
            return Err(Error::ManifestMismatch(format!(
                "tensor '{}' shape {:?} does not match model shape {:?}",
                entry.name,
                entry.shape,
                p.value.shape()
            )));
        }
        let bytes = fs::read(dir.join(&entry.file))
            .map_err(|_| Error::CorruptTensor(format!("missing tensor file '{}'", entry.file)))?;
        p.value = tensor_from_bytes(&bytes, &entry.shape)?;
    }
    Ok(())
}
