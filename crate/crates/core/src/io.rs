//! File formats.
//!
//! `NCT1` tensor container, little-endian throughout:
//!
//! ```text
//! b"NCT1" | u32 dtype (0 = float32, 1 = float64) | u32 rank
//!         | rank x u64 shape | prod(shape) elements
//! ```
//!
//! A parameter directory holds `manifest.json` (model config plus one entry
//! per tensor) and one `.nct` file per tensor.
//!
//! Adjacency CSV columns: `query_gene,key_gene,weight`, one row per matrix
//! entry in row-major order.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grn::{GRNConfig, GRNParams};
use crate::tensor::{AnyTensor, DType, Tensor};

const MAGIC: &[u8; 4] = b"NCT1";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const ADJACENCY_HEADER: [&str; 3] = ["query_gene", "key_gene", "weight"];

fn dtype_code(d: DType) -> u32 {
    match d {
        DType::Float32 => 0,
        DType::Float64 => 1,
    }
}

pub fn write_nct<W: Write>(w: &mut W, t: &AnyTensor) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&dtype_code(t.dtype()).to_le_bytes())?;
    w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
    for &d in t.shape() {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    match t {
        AnyTensor::F32(t) => {
            for v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        AnyTensor::F64(t) => {
            for v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
    }
    Ok(())
}

fn read_array<const N: usize, R: Read>(r: &mut R) -> Result<[u8; N]> {
    let mut b = [0u8; N];
    r.read_exact(&mut b)
        .map_err(|e| Error::Format(format!("truncated NCT1 stream: {e}")))?;
    Ok(b)
}

pub fn read_nct<R: Read>(r: &mut R) -> Result<AnyTensor> {
    if &read_array::<4, _>(r)? != MAGIC {
        return Err(Error::Format("missing NCT1 magic".into()));
    }
    let dtype = match u32::from_le_bytes(read_array(r)?) {
        0 => DType::Float32,
        1 => DType::Float64,
        c => return Err(Error::Format(format!("unknown NCT1 dtype code {c}"))),
    };
    let rank = u32::from_le_bytes(read_array(r)?) as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let d = u64::from_le_bytes(read_array(r)?);
        shape.push(usize::try_from(d).map_err(|_| Error::Format(format!("dimension {d} too large")))?);
    }
    let n = shape
        .iter()
        .try_fold(1usize, |a, &d| a.checked_mul(d))
        .ok_or_else(|| Error::Format(format!("shape {shape:?} overflows")))?;
    let mut bytes = Vec::new();
    let want = n as u64 * dtype.size_bytes() as u64;
    r.take(want).read_to_end(&mut bytes)?;
    if bytes.len() as u64 != want {
        return Err(Error::Format(format!(
            "NCT1 payload has {} bytes, shape {shape:?} needs {want}",
            bytes.len()
        )));
    }
    Ok(match dtype {
        DType::Float32 => AnyTensor::F32(Tensor::with_non_finite(
            shape,
            bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        )?),
        DType::Float64 => AnyTensor::F64(Tensor::with_non_finite(
            shape,
            bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        )?),
    })
}

pub fn save_nct(path: &Path, t: &AnyTensor) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_nct(&mut w, t)?;
    w.flush()?;
    Ok(())
}

pub fn load_nct(path: &Path) -> Result<AnyTensor> {
    read_nct(&mut BufReader::new(File::open(path)?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub file: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamsManifest {
    pub config: GRNConfig,
    pub tensors: Vec<TensorEntry>,
}

/// Writes `manifest.json` and one `.nct` file per tensor into `dir`.
pub fn save_params(dir: &Path, cfg: &GRNConfig, params: &GRNParams) -> Result<ParamsManifest> {
    std::fs::create_dir_all(dir)?;
    let mut tensors = Vec::new();
    for (name, t) in params.named_tensors() {
        let file = format!("{name}.nct");
        tensors.push(TensorEntry {
            name,
            file: file.clone(),
            dtype: DType::Float64,
            shape: t.shape().to_vec(),
        });
        save_nct(&dir.join(&file), &AnyTensor::F64(t))?;
    }
    let manifest = ParamsManifest {
        config: cfg.clone(),
        tensors,
    };
    let json = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Format(e.to_string()))?;
    std::fs::write(dir.join(MANIFEST_FILE), json)?;
    Ok(manifest)
}

pub fn load_params(dir: &Path) -> Result<(GRNConfig, GRNParams)> {
    let text = std::fs::read_to_string(dir.join(MANIFEST_FILE))?;
    let manifest: ParamsManifest =
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("{MANIFEST_FILE}: {e}")))?;
    let mut named = BTreeMap::new();
    for e in &manifest.tensors {
        let t = match load_nct(&dir.join(&e.file))? {
            AnyTensor::F64(t) => t,
            AnyTensor::F32(_) => {
                return Err(Error::DType {
                    op: "load params",
                    lhs: "float64",
                    rhs: "float32",
                })
            }
        };
        if t.shape() != e.shape.as_slice() {
            return Err(Error::Format(format!(
                "{}: manifest shape {:?}, file shape {:?}",
                e.file,
                e.shape,
                t.shape()
            )));
        }
        named.insert(e.name.clone(), t);
    }
    let params = GRNParams::from_named(&manifest.config, named)?;
    Ok((manifest.config, params))
}

pub fn write_adjacency_csv<W: Write>(w: W, adjacency: &Tensor<f64>) -> Result<()> {
    let (n, m) = adjacency.dims2("adjacency csv")?;
    let mut out = csv::Writer::from_writer(w);
    let csv_err = |e: csv::Error| Error::Io(e.to_string());
    out.write_record(ADJACENCY_HEADER).map_err(csv_err)?;
    for i in 0..n {
        for j in 0..m {
            out.write_record([i.to_string(), j.to_string(), adjacency.at2(i, j).to_string()])
                .map_err(csv_err)?;
        }
    }
    out.flush()?;
    Ok(())
}

/// Reads an adjacency CSV back into an `[n x m]` matrix.
pub fn read_adjacency_csv<R: Read>(r: R) -> Result<Tensor<f64>> {
    let mut rdr = csv::Reader::from_reader(r);
    let header = rdr.headers().map_err(|e| Error::Format(e.to_string()))?;
    if header.iter().ne(ADJACENCY_HEADER) {
        return Err(Error::Format(format!("unexpected adjacency header {header:?}")));
    }
    let mut entries = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| Error::Format(e.to_string()))?;
        let parse_err = |e: &dyn std::fmt::Display| Error::Format(format!("{rec:?}: {e}"));
        let i: usize = rec[0].parse().map_err(|e| parse_err(&e))?;
        let j: usize = rec[1].parse().map_err(|e| parse_err(&e))?;
        let w: f64 = rec[2].parse().map_err(|e| parse_err(&e))?;
        entries.push((i, j, w));
    }
    let n = entries.iter().map(|e| e.0 + 1).max().unwrap_or(0);
    let m = entries.iter().map(|e| e.1 + 1).max().unwrap_or(0);
    if entries.len() != n * m {
        return Err(Error::Format(format!(
            "{} entries do not fill a {n} x {m} matrix",
            entries.len()
        )));
    }
    let mut data = vec![0.0; n * m];
    for (i, j, w) in entries {
        data[i * m + j] = w;
    }
    Tensor::with_non_finite(vec![n, m], data)
}
