//! In-memory volume container and the `.mvox` file format.
//!
//! A volume is a dense scalar array over `channels x spatial`, stored in
//! C order with the last spatial axis fastest. Spatial axes are always in
//! `(z, y, x)` order for 3D data and `(y, x)` for 2D. The `.mvox` format is
//! a single JSON header line (UTF-8, newline terminated) followed by the raw
//! little-endian payload, so files are streamable and the header stays
//! human-inspectable with `head -1`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{ByteOrder, LittleEndian};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VolumeKind {
    /// Scanner intensities, one or more channels, f32 payload.
    Image,
    /// Integer class ids in `[0, num_classes)`, single channel, u8 payload.
    Labelmap,
    /// Per-class probabilities, one channel per class, f32 payload.
    Softmax,
}

#[derive(Debug, Clone, PartialEq)]
pub enum VoxelData {
    F32(Vec<f32>),
    U8(Vec<u8>),
}

impl VoxelData {
    pub fn len(&self) -> usize {
        match self {
            VoxelData::F32(v) => v.len(),
            VoxelData::U8(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn dtype_name(&self) -> &'static str {
        match self {
            VoxelData::F32(_) => "f32",
            VoxelData::U8(_) => "u8",
        }
    }
}

impl From<Vec<f32>> for VoxelData {
    fn from(v: Vec<f32>) -> Self {
        VoxelData::F32(v)
    }
}

impl From<Vec<u8>> for VoxelData {
    fn from(v: Vec<u8>) -> Self {
        VoxelData::U8(v)
    }
}

/// Header line of a `.mvox` file. `shape` is channel-first: `[C, z, y, x]`
/// (or `[C, y, x]` for 2D); `spacing` covers the spatial axes only, in mm.
#[derive(Debug, Serialize, Deserialize)]
struct MvoxHeader {
    shape: Vec<usize>,
    spacing: Vec<f64>,
    dtype: String,
    kind: VolumeKind,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    kind: VolumeKind,
    num_channels: usize,
    shape: Vec<usize>,
    spacing: Vec<f64>,
    data: VoxelData,
}

impl Volume {
    pub fn new(
        kind: VolumeKind,
        num_channels: usize,
        shape: Vec<usize>,
        spacing: Vec<f64>,
        data: VoxelData,
    ) -> Result<Self> {
        if shape.len() != 2 && shape.len() != 3 {
            return Err(Error::validation(format!(
                "volume must have 2 or 3 spatial axes, got {}",
                shape.len()
            )));
        }
        if shape.iter().any(|&e| e == 0) {
            return Err(Error::validation("volume axes must be nonempty"));
        }
        if spacing.len() != shape.len() {
            return Err(Error::validation(format!(
                "spacing has {} entries for {} spatial axes",
                spacing.len(),
                shape.len()
            )));
        }
        if spacing.iter().any(|&s| !s.is_finite() || s <= 0.0) {
            return Err(Error::validation("spacing entries must be positive and finite"));
        }
        if num_channels == 0 {
            return Err(Error::validation("volume must have at least one channel"));
        }
        let expected = num_channels * shape.iter().product::<usize>();
        if data.len() != expected {
            return Err(Error::validation(format!(
                "payload holds {} samples, header shape implies {}",
                data.len(),
                expected
            )));
        }
        match (kind, &data) {
            (VolumeKind::Labelmap, VoxelData::U8(_)) => {
                if num_channels != 1 {
                    return Err(Error::validation("labelmap must be single-channel"));
                }
            }
            (VolumeKind::Labelmap, _) => {
                return Err(Error::validation("labelmap payload must be u8"));
            }
            (VolumeKind::Image | VolumeKind::Softmax, VoxelData::F32(_)) => {}
            (_, d) => {
                return Err(Error::validation(format!(
                    "{kind:?} volume cannot hold {} payload",
                    d.dtype_name()
                )));
            }
        }
        Ok(Volume { kind, num_channels, shape, spacing, data })
    }

    pub fn new_image(
        num_channels: usize,
        shape: Vec<usize>,
        spacing: Vec<f64>,
        data: Vec<f32>,
    ) -> Result<Self> {
        Volume::new(VolumeKind::Image, num_channels, shape, spacing, VoxelData::F32(data))
    }

    pub fn new_labelmap(shape: Vec<usize>, spacing: Vec<f64>, data: Vec<u8>) -> Result<Self> {
        Volume::new(VolumeKind::Labelmap, 1, shape, spacing, VoxelData::U8(data))
    }

    pub fn new_softmax(
        num_classes: usize,
        shape: Vec<usize>,
        spacing: Vec<f64>,
        data: Vec<f32>,
    ) -> Result<Self> {
        Volume::new(VolumeKind::Softmax, num_classes, shape, spacing, VoxelData::F32(data))
    }

    pub fn kind(&self) -> VolumeKind {
        self.kind
    }

    pub fn num_channels(&self) -> usize {
        self.num_channels
    }

    /// Spatial shape in `(z, y, x)` (3D) or `(y, x)` (2D) order.
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn spacing(&self) -> &[f64] {
        &self.spacing
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn spatial_len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn data(&self) -> &VoxelData {
        &self.data
    }

    /// Float payload. Panics on labelmaps: callers dispatch on `kind()`
    /// first, so a mismatch is a bug, not an input error.
    pub fn as_f32(&self) -> &[f32] {
        match &self.data {
            VoxelData::F32(v) => v,
            VoxelData::U8(_) => panic!("expected f32 payload"),
        }
    }

    /// Label payload. Panics on f32 volumes (see `as_f32`).
    pub fn as_u8(&self) -> &[u8] {
        match &self.data {
            VoxelData::U8(v) => v,
            VoxelData::F32(_) => panic!("expected u8 payload"),
        }
    }

    pub fn as_f32_mut(&mut self) -> &mut [f32] {
        match &mut self.data {
            VoxelData::F32(v) => v,
            VoxelData::U8(_) => panic!("expected f32 payload"),
        }
    }

    pub fn as_u8_mut(&mut self) -> &mut [u8] {
        match &mut self.data {
            VoxelData::U8(v) => v,
            VoxelData::F32(_) => panic!("expected u8 payload"),
        }
    }

    /// Channel `c` as a contiguous spatial slice (f32 volumes).
    pub fn channel(&self, c: usize) -> &[f32] {
        let n = self.spatial_len();
        &self.as_f32()[c * n..(c + 1) * n]
    }

    pub fn set_spacing(&mut self, spacing: Vec<f64>) -> Result<()> {
        if spacing.len() != self.shape.len() {
            return Err(Error::validation("spacing length must match spatial axes"));
        }
        self.spacing = spacing;
        Ok(())
    }

    /// Check that a labelmap only holds class ids below `num_classes`.
    pub fn validate_labels(&self, num_classes: usize) -> Result<()> {
        let data = self.as_u8();
        if let Some(&bad) = data.iter().find(|&&v| (v as usize) >= num_classes) {
            return Err(Error::validation(format!(
                "labelmap value {bad} outside [0, {num_classes})"
            )));
        }
        Ok(())
    }

    /// Check that a softmax volume's per-voxel channel sums are within `tol`
    /// of one.
    pub fn validate_softmax(&self, tol: f32) -> Result<()> {
        if self.kind != VolumeKind::Softmax {
            return Err(Error::validation("not a softmax volume"));
        }
        let n = self.spatial_len();
        let data = self.as_f32();
        for v in 0..n {
            let mut sum = 0.0f32;
            for c in 0..self.num_channels {
                sum += data[c * n + v];
            }
            if (sum - 1.0).abs() > tol {
                return Err(Error::validation(format!(
                    "softmax channel sum {sum} at voxel {v} deviates from 1 by more than {tol}"
                )));
            }
        }
        Ok(())
    }

    pub fn write_mvox(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io_at(path, e))?;
        let mut w = BufWriter::new(file);
        let mut shape = Vec::with_capacity(1 + self.shape.len());
        shape.push(self.num_channels);
        shape.extend_from_slice(&self.shape);
        let header = MvoxHeader {
            shape,
            spacing: self.spacing.clone(),
            dtype: self.data.dtype_name().to_string(),
            kind: self.kind,
        };
        let mut line = serde_json::to_string(&header)?;
        line.push('\n');
        w.write_all(line.as_bytes()).map_err(|e| Error::io_at(path, e))?;
        match &self.data {
            VoxelData::F32(v) => {
                let mut buf = vec![0u8; v.len() * 4];
                LittleEndian::write_f32_into(v, &mut buf);
                w.write_all(&buf).map_err(|e| Error::io_at(path, e))?;
            }
            VoxelData::U8(v) => {
                w.write_all(v).map_err(|e| Error::io_at(path, e))?;
            }
        }
        w.flush().map_err(|e| Error::io_at(path, e))?;
        Ok(())
    }

    pub fn read_mvox(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io_at(path, e))?;
        let mut r = BufReader::new(file);
        let mut line = Vec::new();
        let mut byte = [0u8; 1];
        loop {
            match r.read(&mut byte).map_err(|e| Error::io_at(path, e))? {
                0 => {
                    return Err(Error::validation(format!(
                        "{}: missing newline-terminated header",
                        path.display()
                    )))
                }
                _ => {
                    if byte[0] == b'\n' {
                        break;
                    }
                    line.push(byte[0]);
                    if line.len() > 64 * 1024 {
                        return Err(Error::validation(format!(
                            "{}: header line exceeds 64 KiB",
                            path.display()
                        )));
                    }
                }
            }
        }
        let header: MvoxHeader = serde_json::from_slice(&line).map_err(|e| {
            Error::validation(format!("{}: malformed header: {e}", path.display()))
        })?;
        if header.shape.len() < 3 || header.shape.len() > 4 {
            return Err(Error::validation(format!(
                "{}: header shape must be [C, y, x] or [C, z, y, x]",
                path.display()
            )));
        }
        let num_channels = header.shape[0];
        let spatial: Vec<usize> = header.shape[1..].to_vec();
        let voxels: usize = num_channels * spatial.iter().product::<usize>();
        let mut payload = Vec::new();
        r.read_to_end(&mut payload).map_err(|e| Error::io_at(path, e))?;
        let data = match header.dtype.as_str() {
            "f32" => {
                if payload.len() != voxels * 4 {
                    return Err(Error::validation(format!(
                        "{}: truncated payload: got {} bytes, header implies {}",
                        path.display(),
                        payload.len(),
                        voxels * 4
                    )));
                }
                let mut values = vec![0.0f32; voxels];
                LittleEndian::read_f32_into(&payload, &mut values);
                VoxelData::F32(values)
            }
            "u8" => {
                if payload.len() != voxels {
                    return Err(Error::validation(format!(
                        "{}: truncated payload: got {} bytes, header implies {}",
                        path.display(),
                        payload.len(),
                        voxels
                    )));
                }
                VoxelData::U8(payload)
            }
            other => {
                return Err(Error::validation(format!(
                    "{}: unknown dtype {other:?}",
                    path.display()
                )))
            }
        };
        Volume::new(header.kind, num_channels, spatial, header.spacing, data)
    }
}
