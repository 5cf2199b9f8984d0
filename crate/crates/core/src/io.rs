//! On-disk formats: raw little-endian `f64` arrays with TOML sidecars,
//! binary PGM quick-looks, and plain CSV tables.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::likelihood::{Dataset, NoiseSpec};
use crate::scalar::Real;

pub const SCHEMA_VERSION: u32 = 1;
const DTYPE: &str = "f64-le";

/// Sidecar of a stack of fields sharing one grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FieldSidecar {
    pub schema_version: u32,
    pub kind: String,
    pub dtype: String,
    pub shape: Vec<usize>,
    pub pixel_size: Vec<f64>,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSidecar {
    pub schema_version: u32,
    pub dtype: String,
    pub len: usize,
    pub noise_sigma: NoiseSpec,
}

/// Sidecar of a plain vector such as a latent point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VectorSidecar {
    pub schema_version: u32,
    pub kind: String,
    pub dtype: String,
    pub len: usize,
}

fn bin_path(dir: &Path, name: &str) -> PathBuf {
    dir.join(format!("{name}.bin"))
}

fn sidecar_path(dir: &Path, name: &str) -> PathBuf {
    dir.join(format!("{name}.toml"))
}

fn write_raw(path: &Path, values: impl Iterator<Item = f64>) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for v in values {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

fn read_raw(path: &Path) -> Result<Vec<f64>> {
    let bytes = fs::read(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    if bytes.len() % 8 != 0 {
        return Err(Error::Format(format!("{}: length is not a multiple of 8", path.display())));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect())
}

fn write_toml<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    let text = toml::to_string(value).map_err(|e| Error::Format(e.to_string()))?;
    fs::write(path, text)?;
    Ok(())
}

fn read_toml<S: for<'de> Deserialize<'de>>(path: &Path) -> Result<S> {
    let text = fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

/// Writes `fields` back to back into `<name>.bin` with a `<name>.toml` sidecar.
pub fn write_field_stack<T: Real>(dir: &Path, name: &str, kind: &str, grid: &Grid, fields: &[Vec<T>]) -> Result<()> {
    if let Some(f) = fields.iter().find(|f| f.len() != grid.size()) {
        return Err(Error::DimensionMismatch {
            expected: grid.size(),
            got: f.len(),
            context: "field written to disk",
        });
    }
    write_raw(&bin_path(dir, name), fields.iter().flatten().map(|v| v.to_f64_lossy()))?;
    write_toml(
        &sidecar_path(dir, name),
        &FieldSidecar {
            schema_version: SCHEMA_VERSION,
            kind: kind.to_string(),
            dtype: DTYPE.to_string(),
            shape: grid.shape().to_vec(),
            pixel_size: grid.pixel_size().to_vec(),
            count: fields.len(),
        },
    )
}

pub fn write_field<T: Real>(dir: &Path, name: &str, kind: &str, grid: &Grid, values: &[T]) -> Result<()> {
    write_field_stack(dir, name, kind, grid, &[values.to_vec()])
}

/// Reads a field stack and its grid.
pub fn read_field_stack(dir: &Path, name: &str) -> Result<(Grid, FieldSidecar, Vec<Vec<f64>>)> {
    let sidecar: FieldSidecar = read_toml(&sidecar_path(dir, name))?;
    check_header(sidecar.schema_version, &sidecar.dtype)?;
    let grid = Grid::new(sidecar.shape.clone(), sidecar.pixel_size.clone())?;
    let raw = read_raw(&bin_path(dir, name))?;
    if raw.len() != grid.size() * sidecar.count {
        return Err(Error::Format(format!(
            "{name}: expected {} values, found {}",
            grid.size() * sidecar.count,
            raw.len()
        )));
    }
    let fields = if grid.size() == 0 {
        Vec::new()
    } else {
        raw.chunks(grid.size()).map(<[f64]>::to_vec).collect()
    };
    Ok((grid, sidecar, fields))
}

fn check_header(version: u32, dtype: &str) -> Result<()> {
    if version != SCHEMA_VERSION {
        return Err(Error::Format(format!("unsupported schema_version {version}")));
    }
    if dtype != DTYPE {
        return Err(Error::Format(format!("unsupported dtype {dtype}")));
    }
    Ok(())
}

pub fn write_vector<T: Real>(dir: &Path, name: &str, kind: &str, values: &[T]) -> Result<()> {
    write_raw(&bin_path(dir, name), values.iter().map(|v| v.to_f64_lossy()))?;
    write_toml(
        &sidecar_path(dir, name),
        &VectorSidecar {
            schema_version: SCHEMA_VERSION,
            kind: kind.to_string(),
            dtype: DTYPE.to_string(),
            len: values.len(),
        },
    )
}

pub fn read_vector(dir: &Path, name: &str) -> Result<(VectorSidecar, Vec<f64>)> {
    let sidecar: VectorSidecar = read_toml(&sidecar_path(dir, name))?;
    check_header(sidecar.schema_version, &sidecar.dtype)?;
    let values = read_raw(&bin_path(dir, name))?;
    if values.len() != sidecar.len {
        return Err(Error::Format(format!("{name}: expected {} values, found {}", sidecar.len, values.len())));
    }
    Ok((sidecar, values))
}

pub fn write_dataset(dir: &Path, name: &str, data: &Dataset<f64>) -> Result<()> {
    write_raw(&bin_path(dir, name), data.d().iter().copied())?;
    let sigmas = data.noise().sigmas();
    let noise_sigma = match sigmas.first() {
        Some(&s) if sigmas.iter().all(|&x| x == s) => NoiseSpec::White(s),
        _ => NoiseSpec::Diagonal(sigmas),
    };
    write_toml(
        &sidecar_path(dir, name),
        &DatasetSidecar {
            schema_version: SCHEMA_VERSION,
            dtype: DTYPE.to_string(),
            len: data.len(),
            noise_sigma,
        },
    )
}

pub fn read_dataset(dir: &Path, name: &str) -> Result<Dataset<f64>> {
    let sidecar: DatasetSidecar = read_toml(&sidecar_path(dir, name))?;
    check_header(sidecar.schema_version, &sidecar.dtype)?;
    let d = read_raw(&bin_path(dir, name))?;
    if d.len() != sidecar.len {
        return Err(Error::Format(format!("{name}: expected {} values, found {}", sidecar.len, d.len())));
    }
    let noise = sidecar.noise_sigma.build(d.len())?;
    Dataset::new(d, noise)
}

/// Grey-scale PGM (P5) of the first 2-d slice, scaled to the value range.
pub fn write_pgm<T: Real>(path: &Path, grid: &Grid, values: &[T]) -> Result<()> {
    let shape = grid.shape();
    let (rows, cols) = match shape.len() {
        1 => (1, shape[0]),
        _ => (shape[0], shape[1]),
    };
    let slice: Vec<f64> = values[..rows * cols].iter().map(|v| v.to_f64_lossy()).collect();
    let (lo, hi) = slice
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let span = if hi > lo { hi - lo } else { 1.0 };
    let mut w = BufWriter::new(fs::File::create(path)?);
    write!(w, "P5\n{cols} {rows}\n255\n")?;
    let pixels: Vec<u8> = slice
        .iter()
        .map(|&v| ((v - lo) / span * 255.0).round().clamp(0.0, 255.0) as u8)
        .collect();
    w.write_all(&pixels)?;
    w.flush()?;
    Ok(())
}

/// CSV with a header line; numbers use the shortest round-trip form.
pub fn write_csv(path: &Path, header: &[&str], rows: impl IntoIterator<Item = Vec<f64>>) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    writeln!(w, "{}", header.join(","))?;
    for row in rows {
        let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        writeln!(w, "{}", line.join(","))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv(path: &Path) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    let text = fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Format(format!("{}: empty CSV", path.display())))?
        .split(',')
        .map(str::to_string)
        .collect();
    let rows = lines
        .filter(|l| !l.is_empty())
        .map(|l| {
            l.split(',')
                .map(|x| x.parse::<f64>().map_err(|e| Error::Format(format!("{}: {e}", path.display()))))
                .collect()
        })
        .collect::<Result<_>>()?;
    Ok((header, rows))
}
