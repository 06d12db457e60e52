//! Parameter checkpoint files.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   8 bytes  "CLIRCKPT"
//! version u32      currently 1
//! count   u32      number of records
//! record, repeated `count` times:
//!   name_len u32
//!   name     name_len bytes of UTF-8
//!   ndim     u32
//!   dims     ndim × u64
//!   values   prod(dims) × f64, row-major
//! ```
//!
//! Records appear in registry order, so saving the same registry twice yields
//! byte-identical files. Freeze flags are *not* persisted: which parameters
//! train is a property of the run that loads the checkpoint, not of the
//! weights themselves.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::tensor::{ParamRegistry, ParamTensor};

const MAGIC: &[u8; 8] = b"CLIRCKPT";
const VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub struct CheckpointRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

/// Write every parameter whose name matches the filter.
pub fn save_where(
    registry: &ParamRegistry,
    path: impl AsRef<Path>,
    filter: impl Fn(&str) -> bool,
) -> Result<()> {
    let selected: Vec<&ParamTensor> = registry.iter().filter(|p| filter(p.name())).collect();
    let mut w = BufWriter::new(File::create(path.as_ref())?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(selected.len() as u32).to_le_bytes())?;
    for p in selected {
        w.write_all(&(p.name().len() as u32).to_le_bytes())?;
        w.write_all(p.name().as_bytes())?;
        w.write_all(&(p.shape().len() as u32).to_le_bytes())?;
        for &d in p.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for &v in p.values().iter() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn save(registry: &ParamRegistry, path: impl AsRef<Path>) -> Result<()> {
    save_where(registry, path, |_| true)
}

pub fn load(path: impl AsRef<Path>) -> Result<Vec<CheckpointRecord>> {
    let path = path.as_ref();
    let display = path.display().to_string();
    let mut r = BufReader::new(File::open(path)?);
    let fail = |message: &str| Error::Format {
        path: display.clone(),
        message: message.to_string(),
    };

    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(|_| fail("file too short for header"))?;
    if &magic != MAGIC {
        return Err(fail("bad magic; not a parameter checkpoint"));
    }
    let version = read_u32(&mut r).map_err(|_| fail("truncated version field"))?;
    if version != VERSION {
        return Err(fail(&format!("unsupported version {version}, expected {VERSION}")));
    }
    let count = read_u32(&mut r).map_err(|_| fail("truncated record count"))?;

    let mut records = Vec::with_capacity(count as usize);
    for i in 0..count {
        let truncated = || fail(&format!("truncated record {i}"));
        let name_len = read_u32(&mut r).map_err(|_| truncated())? as usize;
        let mut name_bytes = vec![0u8; name_len];
        r.read_exact(&mut name_bytes).map_err(|_| truncated())?;
        let name = String::from_utf8(name_bytes)
            .map_err(|_| fail(&format!("record {i} name is not UTF-8")))?;
        let ndim = read_u32(&mut r).map_err(|_| truncated())? as usize;
        if ndim == 0 || ndim > 2 {
            return Err(fail(&format!("record '{name}' has unsupported rank {ndim}")));
        }
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(read_u64(&mut r).map_err(|_| truncated())? as usize);
        }
        let n: usize = shape.iter().product();
        let mut values = Vec::with_capacity(n);
        let mut buf = [0u8; 8];
        for _ in 0..n {
            r.read_exact(&mut buf).map_err(|_| truncated())?;
            values.push(f64::from_le_bytes(buf));
        }
        records.push(CheckpointRecord { name, shape, values });
    }
    Ok(records)
}

fn read_u32(r: &mut impl Read) -> std::io::Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_u64(r: &mut impl Read) -> std::io::Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}

impl ParamRegistry {
    /// Add every record as a new parameter (trainable by default; callers set
    /// freeze flags afterwards). Fails if a name already exists.
    pub fn absorb_records(&mut self, records: Vec<CheckpointRecord>) -> Result<()> {
        for rec in records {
            let (rows, cols) = match rec.shape.as_slice() {
                [n] => (1, *n),
                [r, c] => (*r, *c),
                other => {
                    return Err(Error::shape(
                        format!("checkpoint record '{}'", rec.name),
                        other,
                        &[],
                    ))
                }
            };
            let values = Array2::from_shape_vec((rows, cols), rec.values).map_err(|_| {
                Error::shape(
                    format!("checkpoint record '{}'", rec.name),
                    &rec.shape,
                    &[rows, cols],
                )
            })?;
            self.insert(ParamTensor::new(rec.name, rec.shape, values)?)?;
        }
        Ok(())
    }

    /// Overwrite values of existing parameters from records; every record must
    /// match an existing name and shape.
    pub fn restore_records(&mut self, records: Vec<CheckpointRecord>) -> Result<()> {
        for rec in records {
            let p = self.require_mut(&rec.name)?;
            if p.shape() != rec.shape.as_slice() {
                return Err(Error::shape(
                    format!("restore of '{}'", rec.name),
                    p.shape(),
                    &rec.shape,
                ));
            }
            let dim = p.values().dim();
            let values = Array2::from_shape_vec(dim, rec.values)
                .map_err(|_| Error::shape(format!("restore of '{}'", rec.name), &rec.shape, &[dim.0, dim.1]))?;
            *p.values_mut() = values;
        }
        Ok(())
    }
}
