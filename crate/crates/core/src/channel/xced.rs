//! `XCED1` dataset files.
//!
//! Layout: the ASCII magic `XCED1\n`, one line of compact JSON describing the
//! generating [`DatasetSpec`] and the sample count, then one block per sample
//! of little-endian `f64`: `snr_linear`, `h_true` (M interleaved `re, im`
//! pairs), `h_ls` (same layout). Path metadata is not stored.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::array::ArrayConfig;
use super::dataset::{ChannelSample, Dataset, DatasetSpec, SnrPolicy};
use crate::error::{bail, Result};
use crate::numerics::ComplexVector;

pub const MAGIC: &[u8] = b"XCED1\n";

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    m: usize,
    wavelength: f64,
    paths: usize,
    far_paths: usize,
    r_min: f64,
    r_max: f64,
    snr: SnrPolicy,
    n_samples: usize,
    base_seed: u64,
}

pub fn write<W: Write>(ds: &Dataset, mut w: W) -> Result<()> {
    let spec = &ds.spec;
    let header = Header {
        m: spec.array.antennas(),
        wavelength: spec.array.wavelength(),
        paths: spec.paths,
        far_paths: spec.far_paths,
        r_min: spec.r_range.0,
        r_max: spec.r_range.1,
        snr: spec.snr,
        n_samples: ds.samples.len(),
        base_seed: spec.base_seed,
    };
    w.write_all(MAGIC)?;
    serde_json::to_writer(&mut w, &header).map_err(|e| crate::XceError::Format(e.to_string()))?;
    w.write_all(b"\n")?;
    for s in &ds.samples {
        w.write_all(&s.snr_linear.to_le_bytes())?;
        for v in [&s.h_true, &s.h_ls] {
            for x in v.to_interleaved() {
                w.write_all(&x.to_le_bytes())?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read<R: Read>(r: R) -> Result<Dataset> {
    let mut r = BufReader::new(r);
    let mut magic = [0u8; 6];
    if r.read_exact(&mut magic).is_err() || magic != MAGIC {
        bail!(Format, "not an XCED1 dataset (bad magic)");
    }
    let mut line = String::new();
    r.read_line(&mut line)?;
    if !line.ends_with('\n') {
        bail!(Format, "truncated XCED1 header");
    }
    let h: Header = serde_json::from_str(line.trim_end()).map_err(|e| crate::XceError::Format(format!("bad XCED1 header: {e}")))?;
    let spec = DatasetSpec {
        array: ArrayConfig::new(h.m, h.wavelength)?,
        paths: h.paths,
        far_paths: h.far_paths,
        r_range: (h.r_min, h.r_max),
        snr: h.snr,
        n_samples: h.n_samples,
        base_seed: h.base_seed,
    };
    spec.validate()?;

    let block = 8 * (1 + 4 * h.m);
    let mut buf = vec![0u8; block];
    let mut samples = Vec::with_capacity(h.n_samples);
    for i in 0..h.n_samples {
        if r.read_exact(&mut buf).is_err() {
            bail!(Format, "truncated XCED1 file: sample {} of {} incomplete", i, h.n_samples);
        }
        let vals: Vec<f64> = buf.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        let snr_linear = vals[0];
        if !(snr_linear > 0.0) {
            bail!(Format, "sample {} has invalid SNR {}", i, snr_linear);
        }
        samples.push(ChannelSample {
            snr_linear,
            h_true: ComplexVector::from_interleaved(&vals[1..1 + 2 * h.m])?,
            h_ls: ComplexVector::from_interleaved(&vals[1 + 2 * h.m..])?,
            paths: Vec::new(),
            seed: h.base_seed.wrapping_add(i as u64),
        });
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        bail!(Format, "trailing bytes after {} XCED1 samples", h.n_samples);
    }
    Ok(Dataset { spec, samples })
}

/// Writes atomically: a temporary sibling file is renamed into place.
pub fn save(ds: &Dataset, path: &Path) -> Result<()> {
    crate::cli::atomic_write(path, |f| write(ds, BufWriter::new(f)))
}

pub fn load(path: &Path) -> Result<Dataset> {
    read(fs::File::open(path)?)
}
