//! Instance files, the binary image container and portable-graymap export.
//!
//! Image container, all integers little-endian:
//!
//! | offset | size | field                                  |
//! |--------|------|----------------------------------------|
//! | 0      | 4    | magic `SPIM`                           |
//! | 4      | 4    | width (u32)                            |
//! | 8      | 4    | height (u32)                           |
//! | 12     | 4    | dtype (u32): 0 = f64, 1 = u16          |
//! | 16     | ...  | `width * height` samples, row-major    |

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::Array2;

use crate::error::{Result, SpimError};
use crate::model::{normalize_instance, NppInstance};

pub const IMAGE_MAGIC: [u8; 4] = *b"SPIM";

/// Parses a JSON array of numbers or one number per line. Blank lines and
/// lines starting with `#` are skipped. Every value must be positive and
/// finite.
pub fn parse_instance(text: &str) -> Result<Vec<f64>> {
    let trimmed = text.trim_start();
    let numbers: Vec<f64> = if trimmed.starts_with('[') {
        serde_json::from_str(trimmed)
            .map_err(|e| SpimError::InvalidInstance(format!("bad JSON array: {e}")))?
    } else {
        text.lines()
            .enumerate()
            .map(|(i, line)| (i, line.trim()))
            .filter(|(_, line)| !line.is_empty() && !line.starts_with('#'))
            .map(|(i, line)| {
                line.parse::<f64>().map_err(|_| {
                    SpimError::InvalidInstance(format!("line {}: not a number: {line:?}", i + 1))
                })
            })
            .collect::<Result<_>>()?
    };
    if numbers.is_empty() {
        return Err(SpimError::InvalidInstance("no numbers found".into()));
    }
    if let Some((i, x)) = numbers
        .iter()
        .enumerate()
        .find(|(_, x)| !(x.is_finite() && **x > 0.0))
    {
        return Err(SpimError::InvalidInstance(format!(
            "entry {} is not a positive finite number: {x}",
            i + 1
        )));
    }
    Ok(numbers)
}

pub fn read_instance(path: &Path) -> Result<NppInstance> {
    let text = fs::read_to_string(path).map_err(|e| {
        SpimError::InvalidInstance(format!("cannot read {}: {e}", path.display()))
    })?;
    normalize_instance(&parse_instance(&text)?)
}

/// Writes `numbers` as a JSON array.
pub fn write_instance(path: &Path, numbers: &[f64]) -> Result<()> {
    fs::write(path, serde_json::to_string(numbers)?)?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SampleType {
    F64,
    U16,
}

impl SampleType {
    fn code(self) -> u32 {
        match self {
            SampleType::F64 => 0,
            SampleType::U16 => 1,
        }
    }

    fn from_code(code: u32) -> Result<Self> {
        match code {
            0 => Ok(SampleType::F64),
            1 => Ok(SampleType::U16),
            other => Err(SpimError::Parse(format!("unknown sample type {other}"))),
        }
    }
}

/// Writes `data` to the container. `U16` samples are rounded and clamped.
pub fn write_image<W: Write>(mut out: W, data: &Array2<f64>, dtype: SampleType) -> Result<()> {
    let (height, width) = data.dim();
    let dim = |v: usize| {
        u32::try_from(v).map_err(|_| SpimError::Geometry(format!("dimension {v} exceeds u32")))
    };
    out.write_all(&IMAGE_MAGIC)?;
    out.write_u32::<LittleEndian>(dim(width)?)?;
    out.write_u32::<LittleEndian>(dim(height)?)?;
    out.write_u32::<LittleEndian>(dtype.code())?;
    for &v in data.iter() {
        match dtype {
            SampleType::F64 => out.write_f64::<LittleEndian>(v)?,
            SampleType::U16 => out.write_u16::<LittleEndian>(v.round().clamp(0.0, u16::MAX as f64) as u16)?,
        }
    }
    Ok(())
}

pub fn read_image<R: Read>(mut input: R) -> Result<(Array2<f64>, SampleType)> {
    let mut magic = [0u8; 4];
    input.read_exact(&mut magic)?;
    if magic != IMAGE_MAGIC {
        return Err(SpimError::Parse(format!("bad magic {magic:?}")));
    }
    let width = input.read_u32::<LittleEndian>()? as usize;
    let height = input.read_u32::<LittleEndian>()? as usize;
    let dtype = SampleType::from_code(input.read_u32::<LittleEndian>()?)?;
    let len = width
        .checked_mul(height)
        .ok_or_else(|| SpimError::Parse("image too large".into()))?;
    let mut samples = Vec::with_capacity(len.min(1 << 26));
    for _ in 0..len {
        samples.push(match dtype {
            SampleType::F64 => input.read_f64::<LittleEndian>()?,
            SampleType::U16 => input.read_u16::<LittleEndian>()? as f64,
        });
    }
    let data = Array2::from_shape_vec((height, width), samples)
        .map_err(|e| SpimError::Parse(e.to_string()))?;
    Ok((data, dtype))
}

/// Plain (P2) graymap with `0..=full_scale` mapped linearly onto `0..=maxval`.
pub fn write_pgm<W: Write>(mut out: W, data: &Array2<f64>, full_scale: f64, maxval: u16) -> Result<()> {
    if !(full_scale > 0.0 && full_scale.is_finite()) || maxval == 0 {
        return Err(SpimError::InvalidArgument(format!(
            "graymap scale must be positive, got {full_scale} / {maxval}"
        )));
    }
    let (height, width) = data.dim();
    writeln!(out, "P2\n{width} {height}\n{maxval}")?;
    for row in data.rows() {
        let line: Vec<String> = row
            .iter()
            .map(|&v| {
                ((v / full_scale * maxval as f64).round().clamp(0.0, maxval as f64) as u16).to_string()
            })
            .collect();
        writeln!(out, "{}", line.join(" "))?;
    }
    Ok(())
}
