//! On-disk scene batches: a directory of little-endian binary tensors plus a
//! `manifest.json` describing them.
//!
//! Complex tensors store interleaved `(re, im)` pairs. All tensors are
//! row-major with the sample index first, e.g. `pilots` has shape
//! `[samples, L, N]`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::DVector;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sysmodel::{CMat, Sample, SystemConfig};

pub const FORMAT_VERSION: u32 = 1;
const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F64,
    C128,
    U8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub file: String,
    pub dtype: Dtype,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub seed: u64,
    /// Index of the first stored sample within the seeded dataset.
    pub first_index: u64,
    pub n_samples: usize,
    pub config: SystemConfig,
    pub tensors: Vec<TensorEntry>,
}

fn write_f64s<W: Write>(out: &mut W, values: impl Iterator<Item = f64>) -> Result<()> {
    for v in values {
        out.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

/// Row-major entries of a matrix.
fn row_major<T: Copy>(m: &nalgebra::DMatrix<T>) -> impl Iterator<Item = T> + '_ {
    (0..m.nrows()).flat_map(move |i| (0..m.ncols()).map(move |j| m[(i, j)]))
}

fn complex_parts(z: Complex64) -> [f64; 2] {
    [z.re, z.im]
}

/// Write `samples` (drawn from `(cfg, seed)` starting at `first_index`) into `dir`.
pub fn save_dataset(dir: &Path, cfg: &SystemConfig, seed: u64, first_index: u64, samples: &[Sample]) -> Result<Manifest> {
    std::fs::create_dir_all(dir)?;
    let s = samples.len();
    let (l, n, m) = (cfg.pilot_len, cfg.n_devices, cfg.n_antennas);
    for smp in samples {
        if smp.pilots.shape() != (l, n) || smp.received.shape() != (l, m) {
            return Err(Error::shape("sample dimensions disagree with the configuration"));
        }
    }
    let entry = |name: &str, dtype, shape: Vec<usize>| TensorEntry {
        name: name.to_string(),
        file: format!("{name}.bin"),
        dtype,
        shape,
    };
    let tensors = vec![
        entry("pilots", Dtype::C128, vec![s, l, n]),
        entry("gains", Dtype::F64, vec![s, n]),
        entry("activities", Dtype::U8, vec![s, n]),
        entry("eff_pathloss", Dtype::F64, vec![s, n]),
        entry("received", Dtype::C128, vec![s, l, m]),
        entry("emp_cov", Dtype::C128, vec![s, l, l]),
    ];
    for t in &tensors {
        let mut out = BufWriter::new(File::create(dir.join(&t.file))?);
        for smp in samples {
            match t.name.as_str() {
                "pilots" => write_f64s(&mut out, row_major(&smp.pilots).flat_map(complex_parts))?,
                "received" => write_f64s(&mut out, row_major(&smp.received).flat_map(complex_parts))?,
                "emp_cov" => write_f64s(&mut out, row_major(&smp.emp_cov).flat_map(complex_parts))?,
                "gains" => write_f64s(&mut out, smp.gains.iter().copied())?,
                "eff_pathloss" => write_f64s(&mut out, smp.eff_pathloss.iter().copied())?,
                "activities" => out.write_all(&smp.activities.iter().map(|&a| a as u8).collect::<Vec<_>>())?,
                _ => unreachable!(),
            }
        }
        out.flush()?;
    }
    let manifest = Manifest { format_version: FORMAT_VERSION, seed, first_index, n_samples: s, config: cfg.clone(), tensors };
    let file = File::create(dir.join(MANIFEST))?;
    serde_json::to_writer_pretty(BufWriter::new(file), &manifest)?;
    Ok(manifest)
}

fn read_tensor(dir: &Path, t: &TensorEntry) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    BufReader::new(File::open(dir.join(&t.file))?).read_to_end(&mut buf)?;
    let width = match t.dtype {
        Dtype::F64 => 8,
        Dtype::C128 => 16,
        Dtype::U8 => 1,
    };
    let expected = t.shape.iter().product::<usize>() * width;
    if buf.len() != expected {
        return Err(Error::shape(format!("{} holds {} bytes, manifest implies {expected}", t.file, buf.len())));
    }
    Ok(buf)
}

fn f64_at(buf: &[u8], i: usize) -> f64 {
    f64::from_le_bytes(buf[8 * i..8 * i + 8].try_into().expect("slice of 8 bytes"))
}

fn complex_matrix(buf: &[u8], offset: usize, rows: usize, cols: usize) -> CMat {
    CMat::from_fn(rows, cols, |i, j| {
        let k = offset + i * cols + j;
        Complex64::new(f64_at(buf, 2 * k), f64_at(buf, 2 * k + 1))
    })
}

/// Read a dataset written by [`save_dataset`].
pub fn load_dataset(dir: &Path) -> Result<(Manifest, Vec<Sample>)> {
    let manifest: Manifest = serde_json::from_reader(BufReader::new(File::open(dir.join(MANIFEST))?))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::config(format!("unsupported dataset format {}", manifest.format_version)));
    }
    let cfg = &manifest.config;
    let (s, l, n, m) = (manifest.n_samples, cfg.pilot_len, cfg.n_devices, cfg.n_antennas);
    let find = |name: &str| -> Result<Vec<u8>> {
        let t = manifest
            .tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| Error::config(format!("manifest lacks tensor `{name}`")))?;
        read_tensor(dir, t)
    };
    let pilots = find("pilots")?;
    let gains = find("gains")?;
    let acts = find("activities")?;
    let eff = find("eff_pathloss")?;
    let received = find("received")?;
    let emp = find("emp_cov")?;
    if pilots.len() != s * l * n * 16 || received.len() != s * l * m * 16 || acts.len() != s * n {
        return Err(Error::shape("tensor sizes disagree with the manifest configuration"));
    }
    let samples = (0..s)
        .map(|i| Sample {
            pilots: complex_matrix(&pilots, i * l * n, l, n),
            gains: DVector::from_fn(n, |k, _| f64_at(&gains, i * n + k)),
            activities: acts[i * n..(i + 1) * n].iter().map(|&a| a != 0).collect(),
            eff_pathloss: DVector::from_fn(n, |k, _| f64_at(&eff, i * n + k)),
            received: complex_matrix(&received, i * l * m, l, m),
            emp_cov: complex_matrix(&emp, i * l * l, l, l),
            noise_power: cfg.noise_power,
        })
        .collect();
    Ok((manifest, samples))
}
