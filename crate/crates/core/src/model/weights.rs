use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use super::params::{ModelParams, Parameter};
use crate::autograd::Tensor;
use crate::error::{bail, Result};

const MAGIC: &[u8] = b"XCEW1\n";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    trainable: bool,
    /// Byte offset into the blob section.
    offset: u64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    params: Vec<Entry>,
}

/// `XCEW1\n`, one JSON manifest line, then the tensors as little-endian
/// `f64` in manifest order.
pub fn write_weights<W: Write>(params: &ModelParams, mut w: W) -> Result<()> {
    let mut offset = 0u64;
    let entries = params
        .params()
        .iter()
        .map(|p| {
            let e = Entry { name: p.name.clone(), shape: p.tensor.shape().to_vec(), trainable: p.trainable, offset };
            offset += 8 * p.tensor.numel() as u64;
            e
        })
        .collect();
    let manifest = serde_json::to_string(&Manifest { params: entries }).map_err(|e| crate::XceError::Format(e.to_string()))?;
    w.write_all(MAGIC)?;
    w.write_all(manifest.as_bytes())?;
    w.write_all(b"\n")?;
    for p in params.params() {
        for v in p.tensor.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads weights and checks them against `config`.
pub fn read_weights<R: Read>(r: R, config: &ModelConfig) -> Result<ModelParams> {
    let mut r = BufReader::new(r);
    let mut magic = [0u8; 6];
    if r.read_exact(&mut magic).is_err() || magic != MAGIC {
        bail!(Format, "not an XCEW1 weight file");
    }
    let mut line = String::new();
    r.read_line(&mut line)?;
    if !line.ends_with('\n') {
        bail!(Format, "truncated manifest");
    }
    let manifest: Manifest = serde_json::from_str(line.trim_end()).map_err(|e| crate::XceError::Format(format!("bad manifest: {e}")))?;
    let mut blob = Vec::new();
    r.read_to_end(&mut blob)?;
    let mut expected = 0u64;
    let mut params = Vec::with_capacity(manifest.params.len());
    for e in manifest.params {
        if e.offset != expected {
            bail!(Format, "parameter {} at offset {}, expected {}", e.name, e.offset, expected);
        }
        let n: usize = e.shape.iter().product();
        let end = expected as usize + 8 * n;
        if end > blob.len() {
            bail!(Format, "parameter {} runs past the end of the file", e.name);
        }
        let data = blob[expected as usize..end].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        let tensor = Tensor::new(&e.shape, data).map_err(|_| crate::XceError::Format(format!("parameter {} has invalid shape {:?}", e.name, e.shape)))?;
        params.push(Parameter { name: e.name, tensor, trainable: e.trainable, grad: None });
        expected = end as u64;
    }
    if expected as usize != blob.len() {
        bail!(Format, "{} trailing bytes after the last parameter", blob.len() - expected as usize);
    }
    ModelParams::from_parts(config.clone(), params)
}

pub fn save_weights(params: &ModelParams, path: &Path) -> Result<()> {
    crate::cli::atomic_write(path, |f| write_weights(params, BufWriter::new(f)))
}

pub fn load_weights(path: &Path, config: &ModelConfig) -> Result<ModelParams> {
    read_weights(File::open(path)?, config)
}
