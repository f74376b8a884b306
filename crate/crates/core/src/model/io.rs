//! Fitted-model files.
//!
//! ```text
//! b"TGPM" | version: u32 | header length: u64 | header: JSON (UTF-8)
//! | members: .dtf tensors in the order listed in the header
//! ```
//!
//! The header holds the model configuration and the member names:
//! `params`, `fixed_effect`, `train_x`, `train_residual`, `B_1..B_D`,
//! `L_1..L_D`. Matrices are stored as order-2 tensors.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dtf;
use crate::error::{Error, Result};
use crate::factorization::FactorBasis;
use crate::model::{FittedModel, GpStructure, ModelConfig};
use crate::tensor::DenseTensor;
use crate::Matrix;

pub const MODEL_MAGIC: &[u8; 4] = b"TGPM";
pub const MODEL_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    config: ModelConfig,
    members: Vec<String>,
}

fn member_names(d: usize) -> Vec<String> {
    let mut names: Vec<String> = ["params", "fixed_effect", "train_x", "train_residual"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    names.extend((1..=d).map(|i| format!("B_{i}")));
    names.extend((1..=d).map(|i| format!("L_{i}")));
    names
}

fn matrix_tensor(m: &Matrix) -> DenseTensor {
    DenseTensor::from_matrix(m)
}

fn tensor_matrix(t: &DenseTensor, name: &str) -> Result<Matrix> {
    if t.order() != 2 {
        return Err(Error::Format(format!("member {name} is not a matrix")));
    }
    Ok(Matrix::from_row_slice(t.shape()[0], t.shape()[1], t.data()))
}

pub fn write_model<W: Write>(w: &mut W, model: &FittedModel) -> Result<()> {
    let d = model.structure.n_modes();
    let header = Header {
        config: ModelConfig {
            kernels: Some(model.structure.kernels.clone()),
            ..model.config.clone()
        },
        members: member_names(d),
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::Format(e.to_string()))?;
    w.write_all(MODEL_MAGIC)?;
    w.write_all(&MODEL_VERSION.to_le_bytes())?;
    w.write_all(&(json.len() as u64).to_le_bytes())?;
    w.write_all(&json)?;
    dtf::write_to(
        w,
        &DenseTensor::new(vec![model.params.len()], model.params.clone())?,
    )?;
    dtf::write_to(w, &model.fixed_effect)?;
    dtf::write_to(w, &matrix_tensor(&model.train_x))?;
    dtf::write_to(w, &model.train_residual)?;
    for b in model
        .structure
        .bases_b
        .factors
        .iter()
        .chain(&model.structure.bases_l.factors)
    {
        dtf::write_to(w, &matrix_tensor(b))?;
    }
    Ok(())
}

pub fn read_model<R: Read>(r: &mut R) -> Result<FittedModel> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MODEL_MAGIC {
        return Err(Error::Format(format!("bad model magic {magic:?}")));
    }
    let mut b4 = [0u8; 4];
    r.read_exact(&mut b4)?;
    let version = u32::from_le_bytes(b4);
    if version != MODEL_VERSION {
        return Err(Error::Format(format!(
            "unsupported model version {version}"
        )));
    }
    let mut b8 = [0u8; 8];
    r.read_exact(&mut b8)?;
    let len = usize::try_from(u64::from_le_bytes(b8))
        .map_err(|_| Error::Format("header too long".into()))?;
    if len > 1 << 24 {
        return Err(Error::Format(format!("implausible header length {len}")));
    }
    let mut json = vec![0u8; len];
    r.read_exact(&mut json)?;
    let header: Header =
        serde_json::from_slice(&json).map_err(|e| Error::Format(format!("model header: {e}")))?;
    let d = header.config.n_modes();
    if header.members != member_names(d) {
        return Err(Error::Format(format!(
            "unexpected member list {:?}",
            header.members
        )));
    }
    let params = dtf::read_from(r)?;
    if params.order() != 1 {
        return Err(Error::Format("params member must be a vector".into()));
    }
    let fixed_effect = dtf::read_from(r)?;
    let train_x = tensor_matrix(&dtf::read_from(r)?, "train_x")?;
    let train_residual = dtf::read_from(r)?;
    let mut bases = Vec::with_capacity(2 * d);
    for name in &header.members[4..] {
        bases.push(tensor_matrix(&dtf::read_from(r)?, name)?);
    }
    let bases_l = FactorBasis::new(bases.split_off(d))?;
    let bases_b = FactorBasis::new(bases)?;
    let structure = GpStructure::new(header.config.kernel_set(), bases_b, bases_l)?;
    FittedModel::from_parts(
        header.config,
        fixed_effect,
        structure,
        params.into_data(),
        train_x,
        train_residual,
    )
}

pub fn save_model(path: impl AsRef<Path>, model: &FittedModel) -> Result<()> {
    let mut buf = Vec::new();
    write_model(&mut buf, model)?;
    fs::write(path, buf)?;
    Ok(())
}

pub fn load_model(path: impl AsRef<Path>) -> Result<FittedModel> {
    let bytes = fs::read(path)?;
    let mut cursor = &bytes[..];
    let model = read_model(&mut cursor)?;
    if !cursor.is_empty() {
        return Err(Error::Format(format!(
            "{} trailing bytes after model",
            cursor.len()
        )));
    }
    Ok(model)
}
