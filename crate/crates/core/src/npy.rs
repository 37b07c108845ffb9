//! NPY array files (v1.0/v2.0, little-endian, C order, `<f4` or `<f2`).
//!
//! Latents are rank 4. Other arrays this crate exchanges (attention probes,
//! entropy maps, session corridor grids) go through [`read_array`] and
//! [`write_array`] with their own rank checks.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use half::f16;
use npyz::{DType, NpyFile, Order, WriterBuilder};

use crate::error::{Error, Result};
use crate::tensor::{Dtype, LatentTensor, Shape};

/// A decoded array of any rank, widened to `f32`.
#[derive(Clone, Debug, PartialEq)]
pub struct Array {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
    pub dtype: Dtype,
}

impl Array {
    pub fn rank(&self) -> usize {
        self.shape.len()
    }
}

fn format_err(e: std::io::Error) -> Error {
    Error::Format(e.to_string())
}

fn unravel(shape: &[usize], mut flat: usize) -> Vec<usize> {
    let mut index = vec![0; shape.len()];
    for (slot, &dim) in index.iter_mut().zip(shape).rev() {
        *slot = flat % dim.max(1);
        flat /= dim.max(1);
    }
    index
}

/// Decodes an NPY stream, rejecting anything but little-endian C-order
/// `f4`/`f2` data and any non-finite value.
pub fn decode<R: Read>(reader: R) -> Result<Array> {
    let file = NpyFile::new(reader).map_err(format_err)?;
    if file.order() != Order::C {
        return Err(Error::Format(
            "Fortran-order arrays are not supported".into(),
        ));
    }
    let descr = match file.dtype() {
        DType::Plain(ts) => ts.to_string(),
        other => {
            return Err(Error::Format(format!(
                "unsupported dtype {}",
                other.descr()
            )))
        }
    };
    let shape: Vec<usize> = file.shape().iter().map(|&d| d as usize).collect();
    let (dtype, data) = match descr.as_str() {
        "<f4" => (Dtype::F32, file.into_vec::<f32>().map_err(format_err)?),
        "<f2" => {
            let raw = file.into_vec::<f16>().map_err(format_err)?;
            (Dtype::F16, raw.into_iter().map(f16::to_f32).collect())
        }
        other => {
            return Err(Error::Format(format!(
                "unsupported dtype {other} (expected <f4 or <f2)"
            )))
        }
    };
    if let Some(i) = data.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            index: unravel(&shape, i),
            value: data[i],
        });
    }
    Ok(Array { shape, data, dtype })
}

/// Encodes `data` with the given shape as an NPY v1.0 stream.
pub fn encode<W: Write>(writer: W, shape: &[usize], data: &[f32], dtype: Dtype) -> Result<()> {
    let expected: usize = shape.iter().product();
    if expected != data.len() {
        return Err(Error::Shape {
            expected: format!("{expected} values for shape {shape:?}"),
            got: format!("{} values", data.len()),
        });
    }
    let dims: Vec<u64> = shape.iter().map(|&d| d as u64).collect();
    let io = |e: std::io::Error| Error::Format(e.to_string());
    match dtype {
        Dtype::F32 => {
            let mut w = npyz::WriteOptions::new()
                .default_dtype()
                .shape(&dims)
                .writer(writer)
                .begin_nd()
                .map_err(io)?;
            w.extend(data.iter().copied()).map_err(io)?;
            w.finish().map_err(io)
        }
        Dtype::F16 => {
            let mut w = npyz::WriteOptions::<f16>::new()
                .default_dtype()
                .shape(&dims)
                .writer(writer)
                .begin_nd()
                .map_err(io)?;
            w.extend(data.iter().map(|&v| f16::from_f32(v)))
                .map_err(io)?;
            w.finish().map_err(io)
        }
    }
}

pub fn read_array(path: impl AsRef<Path>) -> Result<Array> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    decode(BufReader::new(file))
}

pub fn write_array(
    path: impl AsRef<Path>,
    shape: &[usize],
    data: &[f32],
    dtype: Dtype,
) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    encode(&mut w, shape, data, dtype)?;
    w.flush().map_err(|e| Error::io(path, e))
}

/// Loads a rank-4 latent. The file's storage dtype is remembered so it can be
/// written back in the same precision.
pub fn load_tensor(path: impl AsRef<Path>) -> Result<LatentTensor> {
    let array = read_array(path)?;
    match array.shape[..] {
        [b, c, h, w] => LatentTensor::with_dtype(Shape::new(b, c, h, w), array.data, array.dtype),
        _ => Err(Error::Rank(array.rank())),
    }
}

pub fn save_tensor(t: &LatentTensor, path: impl AsRef<Path>, dtype: Dtype) -> Result<()> {
    write_array(path, &t.shape().dims(), t.data(), dtype)
}
