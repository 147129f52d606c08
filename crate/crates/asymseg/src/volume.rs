//! Dense 3D grids and the RVOL on-disk format.
//!
//! Three grid types share one fixed memory layout: channel is the slowest
//! axis, then x, then y, with z fastest. An RVOL file is a single-line
//! JSON header (`dims`, `channels`, `spacing`, `dtype`) terminated by a
//! newline, followed immediately by the raw payload: little-endian `f32`
//! for scalar grids (`"f32le"`), one byte per voxel for masks (`"u8"`).
//! Payloads round-trip bit-exactly.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Grid extents in voxels.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Dims {
    pub nx: usize,
    pub ny: usize,
    pub nz: usize,
}

impl Dims {
    pub fn new(nx: usize, ny: usize, nz: usize) -> Self {
        Dims { nx, ny, nz }
    }

    pub fn voxel_count(&self) -> usize {
        self.nx * self.ny * self.nz
    }

    /// Linear index of voxel (x, y, z); z is the fastest axis.
    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        (x * self.ny + y) * self.nz + z
    }

    /// Inverse of [`Dims::index`].
    #[inline]
    pub fn coords(&self, index: usize) -> (usize, usize, usize) {
        let z = index % self.nz;
        let rest = index / self.nz;
        (rest / self.ny, rest % self.ny, z)
    }

    #[inline]
    pub fn contains(&self, x: i64, y: i64, z: i64) -> bool {
        x >= 0
            && y >= 0
            && z >= 0
            && (x as usize) < self.nx
            && (y as usize) < self.ny
            && (z as usize) < self.nz
    }

    pub fn as_array(&self) -> [usize; 3] {
        [self.nx, self.ny, self.nz]
    }

    pub fn as_tuple(&self) -> (usize, usize, usize) {
        (self.nx, self.ny, self.nz)
    }
}

impl From<[usize; 3]> for Dims {
    fn from(a: [usize; 3]) -> Self {
        Dims::new(a[0], a[1], a[2])
    }
}

pub(crate) fn check_dims_match(a: Dims, b: Dims) -> Result<()> {
    if a != b {
        return Err(Error::DimensionMismatch {
            left: a.as_tuple(),
            right: b.as_tuple(),
        });
    }
    Ok(())
}

/// Multi-channel scalar grid with physical voxel spacing in millimetres.
///
/// Immutable after construction; all invariants (positive dims and
/// spacing, finite data, length = channels * nx * ny * nz) are enforced
/// by [`Volume::new`].
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    dims: Dims,
    channels: usize,
    spacing: [f64; 3],
    data: Vec<f32>,
}

impl Volume {
    pub fn new(dims: Dims, channels: usize, spacing: [f64; 3], data: Vec<f32>) -> Result<Self> {
        if dims.voxel_count() == 0 {
            return Err(Error::invalid("dims", "all axes must be positive"));
        }
        if channels == 0 {
            return Err(Error::invalid("channels", "must be positive"));
        }
        if spacing.iter().any(|s| !s.is_finite() || *s <= 0.0) {
            return Err(Error::invalid(
                "spacing",
                format!("components must be finite and positive, got {spacing:?}"),
            ));
        }
        let expected = channels * dims.voxel_count();
        if data.len() != expected {
            return Err(Error::invalid(
                "data",
                format!("length {} does not match {expected}", data.len()),
            ));
        }
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        Ok(Volume {
            dims,
            channels,
            spacing,
            data,
        })
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// Voxels of one channel, in (x, y, z) layout.
    pub fn channel(&self, c: usize) -> &[f32] {
        let n = self.dims.voxel_count();
        &self.data[c * n..(c + 1) * n]
    }

    #[inline]
    pub fn get(&self, c: usize, x: usize, y: usize, z: usize) -> f32 {
        self.data[c * self.dims.voxel_count() + self.dims.index(x, y, z)]
    }
}

/// Binary grid; every value is exactly 0 or 1.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    dims: Dims,
    data: Vec<u8>,
}

impl Mask {
    pub fn new(dims: Dims, data: Vec<u8>) -> Result<Self> {
        if data.len() != dims.voxel_count() {
            return Err(Error::invalid(
                "mask data",
                format!("length {} does not match dims", data.len()),
            ));
        }
        if let Some(bad) = data.iter().find(|v| **v > 1) {
            return Err(Error::invalid(
                "mask data",
                format!("values must be 0 or 1, found {bad}"),
            ));
        }
        Ok(Mask { dims, data })
    }

    pub fn zeros(dims: Dims) -> Self {
        Mask {
            dims,
            data: vec![0; dims.voxel_count()],
        }
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> u8 {
        self.data[self.dims.index(x, y, z)]
    }

    /// Number of set voxels.
    pub fn lesion_voxels(&self) -> usize {
        self.data.iter().map(|&v| v as usize).sum()
    }
}

/// Per-voxel lesion probabilities; every value lies in [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct ProbabilityMap {
    dims: Dims,
    data: Vec<f64>,
}

impl ProbabilityMap {
    pub fn new(dims: Dims, data: Vec<f64>) -> Result<Self> {
        if data.len() != dims.voxel_count() {
            return Err(Error::invalid(
                "probability data",
                format!("length {} does not match dims", data.len()),
            ));
        }
        if let Some(index) = data.iter().position(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::invalid(
                "probability data",
                format!("value {} at index {index} outside [0, 1]", data[index]),
            ));
        }
        Ok(ProbabilityMap { dims, data })
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }
}

/// Per-voxel inclusive threshold: output is 1 wherever `p >= t`.
pub fn threshold(p: &ProbabilityMap, t: f64) -> Result<Mask> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::invalid(
            "threshold",
            format!("{t} outside [0, 1]"),
        ));
    }
    let data = p.data.iter().map(|&v| u8::from(v >= t)).collect();
    Ok(Mask {
        dims: p.dims,
        data,
    })
}

#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub enum Dtype {
    #[serde(rename = "f32le")]
    F32le,
    #[serde(rename = "u8")]
    U8,
}

/// The JSON header that opens every RVOL file.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RvolHeader {
    pub dims: [usize; 3],
    pub channels: usize,
    pub spacing: [f64; 3],
    pub dtype: Dtype,
}

/// Read and parse the header line of an RVOL file without touching the
/// payload. Used by the CLI to dispatch on dtype and recover spacing.
pub fn read_header(path: &Path) -> Result<RvolHeader> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = BufReader::new(file);
    read_header_from(&mut reader, path)
}

fn read_header_from<R: Read>(reader: &mut R, path: &Path) -> Result<RvolHeader> {
    let mut line = Vec::new();
    let mut byte = [0u8; 1];
    loop {
        match reader.read(&mut byte).map_err(|e| Error::io(path, e))? {
            0 => {
                return Err(Error::MalformedHeader {
                    path: path.to_path_buf(),
                    reason: "file ended before the header newline".into(),
                })
            }
            _ => {
                if byte[0] == b'\n' {
                    break;
                }
                line.push(byte[0]);
                if line.len() > 4096 {
                    return Err(Error::MalformedHeader {
                        path: path.to_path_buf(),
                        reason: "header line exceeds 4096 bytes".into(),
                    });
                }
            }
        }
    }
    serde_json::from_slice(&line).map_err(|e| Error::MalformedHeader {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

fn read_payload(path: &Path) -> Result<(RvolHeader, Vec<u8>)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = BufReader::new(file);
    let header = read_header_from(&mut reader, path)?;
    let voxels: usize = header.dims.iter().product::<usize>() * header.channels;
    let expected = match header.dtype {
        Dtype::F32le => voxels * 4,
        Dtype::U8 => voxels,
    };
    let mut payload = Vec::new();
    reader
        .read_to_end(&mut payload)
        .map_err(|e| Error::io(path, e))?;
    if payload.len() != expected {
        return Err(Error::PayloadLength {
            path: path.to_path_buf(),
            expected,
            actual: payload.len(),
        });
    }
    Ok((header, payload))
}

fn decode_f32(payload: &[u8]) -> Vec<f32> {
    payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect()
}

fn write_rvol(path: &Path, header: &RvolHeader, payload: &[u8]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut writer = BufWriter::new(file);
    let line = serde_json::to_string(header).expect("header serialization cannot fail");
    writer
        .write_all(line.as_bytes())
        .and_then(|_| writer.write_all(b"\n"))
        .and_then(|_| writer.write_all(payload))
        .and_then(|_| writer.flush())
        .map_err(|e| Error::io(path, e))
}

pub fn load_volume(path: &Path) -> Result<Volume> {
    let (header, payload) = read_payload(path)?;
    if header.dtype != Dtype::F32le {
        return Err(Error::MalformedHeader {
            path: path.to_path_buf(),
            reason: "expected dtype f32le for a volume".into(),
        });
    }
    Volume::new(
        header.dims.into(),
        header.channels,
        header.spacing,
        decode_f32(&payload),
    )
}

pub fn save_volume(v: &Volume, path: &Path) -> Result<()> {
    let header = RvolHeader {
        dims: v.dims.as_array(),
        channels: v.channels,
        spacing: v.spacing,
        dtype: Dtype::F32le,
    };
    let mut payload = Vec::with_capacity(v.data.len() * 4);
    for value in &v.data {
        payload.extend_from_slice(&value.to_le_bytes());
    }
    write_rvol(path, &header, &payload)
}

pub fn load_mask(path: &Path) -> Result<Mask> {
    let (header, payload) = read_payload(path)?;
    if header.dtype != Dtype::U8 {
        return Err(Error::MalformedHeader {
            path: path.to_path_buf(),
            reason: "expected dtype u8 for a mask".into(),
        });
    }
    if header.channels != 1 {
        return Err(Error::MalformedHeader {
            path: path.to_path_buf(),
            reason: format!("masks are single-channel, header says {}", header.channels),
        });
    }
    Mask::new(header.dims.into(), payload)
}

pub fn save_mask(m: &Mask, spacing: [f64; 3], path: &Path) -> Result<()> {
    let header = RvolHeader {
        dims: m.dims.as_array(),
        channels: 1,
        spacing,
        dtype: Dtype::U8,
    };
    write_rvol(path, &header, &m.data)
}

pub fn load_probability_map(path: &Path) -> Result<ProbabilityMap> {
    let (header, payload) = read_payload(path)?;
    if header.dtype != Dtype::F32le || header.channels != 1 {
        return Err(Error::MalformedHeader {
            path: path.to_path_buf(),
            reason: "expected a single-channel f32le probability map".into(),
        });
    }
    let data: Vec<f64> = decode_f32(&payload).into_iter().map(f64::from).collect();
    ProbabilityMap::new(header.dims.into(), data)
}

pub fn save_probability_map(p: &ProbabilityMap, spacing: [f64; 3], path: &Path) -> Result<()> {
    let header = RvolHeader {
        dims: p.dims.as_array(),
        channels: 1,
        spacing,
        dtype: Dtype::F32le,
    };
    let mut payload = Vec::with_capacity(p.data.len() * 4);
    for value in &p.data {
        payload.extend_from_slice(&(*value as f32).to_le_bytes());
    }
    write_rvol(path, &header, &payload)
}
