//! BMT1 binary container.
//!
//! Layout: the magic `BMT1`, a little-endian `u32` header length, a UTF-8
//! JSON header listing the arrays (name, dtype, shape, units, horizon), then
//! each array's row-major little-endian payload in header order.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{BevMap, BevSequence, Cell, CellSet, GridSpec, MotionField};

pub const MAGIC: &[u8; 4] = b"BMT1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    U8,
    F32,
}

impl DType {
    fn width(self) -> usize {
        match self {
            DType::U8 => 1,
            DType::F32 => 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArrayHeader {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub units: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub horizon_seconds: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    arrays: Vec<ArrayHeader>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    meta: BTreeMap<String, serde_json::Value>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ArrayData {
    U8(Vec<u8>),
    F32(Vec<f32>),
}

impl ArrayData {
    fn len(&self) -> usize {
        match self {
            ArrayData::U8(v) => v.len(),
            ArrayData::F32(v) => v.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedArray {
    pub header: ArrayHeader,
    pub data: ArrayData,
}

impl NamedArray {
    pub fn as_u8(&self) -> Result<&[u8]> {
        match &self.data {
            ArrayData::U8(v) => Ok(v),
            ArrayData::F32(_) => Err(Error::ShapeMismatch(format!(
                "array '{}' is f32, expected u8",
                self.header.name
            ))),
        }
    }

    pub fn as_f32(&self) -> Result<&[f32]> {
        match &self.data {
            ArrayData::F32(v) => Ok(v),
            ArrayData::U8(_) => Err(Error::ShapeMismatch(format!(
                "array '{}' is u8, expected f32",
                self.header.name
            ))),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.header.shape
    }
}

/// An ordered collection of named arrays plus free-form JSON metadata.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Container {
    arrays: Vec<NamedArray>,
    meta: BTreeMap<String, serde_json::Value>,
}

impl Container {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn arrays(&self) -> &[NamedArray] {
        &self.arrays
    }

    pub fn push(
        &mut self,
        name: &str,
        shape: Vec<usize>,
        data: ArrayData,
        units: Option<&str>,
        horizon_seconds: Option<f64>,
    ) -> Result<()> {
        let expected: usize = shape.iter().product();
        if data.len() != expected {
            return Err(Error::ShapeMismatch(format!(
                "array '{name}' has {} elements, shape {shape:?} needs {expected}",
                data.len()
            )));
        }
        let dtype = match data {
            ArrayData::U8(_) => DType::U8,
            ArrayData::F32(_) => DType::F32,
        };
        let array = NamedArray {
            header: ArrayHeader {
                name: name.to_string(),
                dtype,
                shape,
                units: units.map(str::to_string),
                horizon_seconds,
            },
            data,
        };
        match self.arrays.iter_mut().find(|a| a.header.name == name) {
            Some(slot) => *slot = array,
            None => self.arrays.push(array),
        }
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&NamedArray> {
        self.arrays.iter().find(|a| a.header.name == name)
    }

    pub fn require(&self, name: &str) -> Result<&NamedArray> {
        self.get(name)
            .ok_or_else(|| Error::ShapeMismatch(format!("container has no array '{name}'")))
    }

    pub fn set_meta(&mut self, key: &str, value: serde_json::Value) {
        self.meta.insert(key.to_string(), value);
    }

    pub fn meta(&self, key: &str) -> Option<&serde_json::Value> {
        self.meta.get(key)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            arrays: self.arrays.iter().map(|a| a.header.clone()).collect(),
            meta: self.meta.clone(),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let payload: usize = self
            .arrays
            .iter()
            .map(|a| a.data.len() * a.header.dtype.width())
            .sum();
        let mut out = Vec::with_capacity(8 + json.len() + payload);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        for a in &self.arrays {
            match &a.data {
                ArrayData::U8(v) => out.extend_from_slice(v),
                ArrayData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let fail = |offset: usize, reason: String| Error::Format { offset, reason };
        if bytes.len() < 8 {
            return Err(fail(0, format!("{} bytes is shorter than the preamble", bytes.len())));
        }
        if &bytes[..4] != MAGIC {
            return Err(fail(0, "bad magic, expected BMT1".into()));
        }
        let header_len = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let header_end = 8usize
            .checked_add(header_len)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| fail(4, format!("header length {header_len} exceeds file")))?;
        let text = std::str::from_utf8(&bytes[8..header_end])
            .map_err(|e| fail(8 + e.valid_up_to(), "header is not UTF-8".into()))?;
        let header: Header =
            serde_json::from_str(text).map_err(|e| fail(8, format!("bad header: {e}")))?;

        let mut offset = header_end;
        let mut arrays = Vec::with_capacity(header.arrays.len());
        for h in header.arrays {
            let count = h
                .shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| fail(offset, format!("array '{}' shape overflows", h.name)))?;
            let size = count * h.dtype.width();
            let end = offset
                .checked_add(size)
                .filter(|&e| e <= bytes.len())
                .ok_or_else(|| {
                    fail(
                        offset,
                        format!("array '{}' needs {size} bytes, file truncated", h.name),
                    )
                })?;
            let raw = &bytes[offset..end];
            let data = match h.dtype {
                DType::U8 => ArrayData::U8(raw.to_vec()),
                DType::F32 => ArrayData::F32(
                    raw.chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                ),
            };
            arrays.push(NamedArray { header: h, data });
            offset = end;
        }
        if offset != bytes.len() {
            return Err(fail(offset, format!("{} trailing bytes", bytes.len() - offset)));
        }
        Ok(Container {
            arrays,
            meta: header.meta,
        })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    pub fn put_grid(&mut self, spec: &GridSpec) {
        self.set_meta("grid", serde_json::to_value(spec).expect("grid serializes"));
    }

    pub fn grid(&self) -> Result<GridSpec> {
        let value = self
            .meta("grid")
            .ok_or_else(|| Error::ShapeMismatch("container has no grid metadata".into()))?;
        GridSpec::deserialize(value)
            .map_err(|e| Error::InvalidGrid(format!("grid metadata: {e}")))
    }

    /// Stores `[T, H, W, C]` occupancy under `name` and the grid in metadata.
    pub fn put_sequence(&mut self, name: &str, seq: &BevSequence) -> Result<()> {
        let spec = seq.spec();
        let data = seq
            .frames()
            .iter()
            .flat_map(|f| f.as_raw().iter().copied())
            .collect();
        self.push(
            name,
            vec![seq.len(), spec.rows(), spec.cols(), spec.layers()],
            ArrayData::U8(data),
            Some("occupancy"),
            Some(seq.horizon_seconds),
        )?;
        self.put_grid(spec);
        let indices: Vec<i32> = seq.frames().iter().map(|f| f.frame_index).collect();
        self.set_meta(&format!("{name}.frame_indices"), serde_json::json!(indices));
        Ok(())
    }

    pub fn sequence(&self, name: &str) -> Result<BevSequence> {
        let spec = self.grid()?;
        let array = self.require(name)?;
        let raw = array.as_u8()?;
        let shape = array.shape();
        let frame = spec.rows() * spec.cols() * spec.layers();
        if shape.len() != 4 || shape[1..] != [spec.rows(), spec.cols(), spec.layers()] {
            return Err(Error::ShapeMismatch(format!(
                "sequence '{name}' shape {shape:?} does not match grid"
            )));
        }
        let indices: Vec<i32> = self
            .meta(&format!("{name}.frame_indices"))
            .and_then(|v| serde_json::from_value(v.clone()).ok())
            .unwrap_or_else(|| (0..shape[0] as i32).map(|t| t + 1 - shape[0] as i32).collect());
        let frames = raw
            .chunks_exact(frame)
            .zip(indices.iter().chain(std::iter::repeat(&0)))
            .map(|(chunk, &idx)| BevMap::from_raw(spec, chunk.to_vec(), idx))
            .collect::<Result<Vec<_>>>()?;
        BevSequence::new(frames, array.header.horizon_seconds.unwrap_or(1.0))
    }

    /// Stores one `[H, W, C]` frame.
    pub fn put_map(&mut self, name: &str, map: &BevMap) -> Result<()> {
        self.push(
            name,
            vec![map.rows(), map.cols(), map.layers()],
            ArrayData::U8(map.as_raw().to_vec()),
            Some("occupancy"),
            None,
        )?;
        self.put_grid(map.spec());
        self.set_meta(&format!("{name}.frame_index"), serde_json::json!(map.frame_index));
        Ok(())
    }

    pub fn map(&self, name: &str) -> Result<BevMap> {
        let spec = self.grid()?;
        let array = self.require(name)?;
        if array.shape() != [spec.rows(), spec.cols(), spec.layers()] {
            return Err(Error::ShapeMismatch(format!(
                "map '{name}' shape {:?} does not match grid",
                array.shape()
            )));
        }
        let index = self
            .meta(&format!("{name}.frame_index"))
            .and_then(|v| v.as_i64())
            .unwrap_or(0) as i32;
        BevMap::from_raw(spec, array.as_u8()?.to_vec(), index)
    }

    /// Stores `name` as `[H, W, 2]` f32 cell displacements and `{name}_valid` as `[H, W]` u8.
    pub fn put_motion(&mut self, name: &str, motion: &MotionField, horizon: f64) -> Result<()> {
        let data = motion
            .displacements()
            .iter()
            .flat_map(|d| [d[0] as f32, d[1] as f32])
            .collect();
        self.push(
            name,
            vec![motion.rows(), motion.cols(), 2],
            ArrayData::F32(data),
            Some("cells"),
            Some(horizon),
        )?;
        self.push(
            &format!("{name}_valid"),
            vec![motion.rows(), motion.cols()],
            ArrayData::U8(motion.mask().iter().map(|&v| u8::from(v)).collect()),
            Some("mask"),
            None,
        )
    }

    pub fn motion(&self, name: &str) -> Result<MotionField> {
        let array = self.require(name)?;
        if array.header.units.as_deref().is_some_and(|u| u != "cells") {
            return Err(Error::ShapeMismatch(format!(
                "motion '{name}' stored in {:?}, expected cells",
                array.header.units
            )));
        }
        let shape = array.shape();
        if shape.len() != 3 || shape[2] != 2 {
            return Err(Error::ShapeMismatch(format!(
                "motion '{name}' shape {shape:?} is not [H, W, 2]"
            )));
        }
        let (rows, cols) = (shape[0], shape[1]);
        let displacement = array
            .as_f32()?
            .chunks_exact(2)
            .map(|c| [c[0] as f64, c[1] as f64])
            .collect();
        let valid = match self.get(&format!("{name}_valid")) {
            Some(mask) => mask.as_u8()?.iter().map(|&v| v != 0).collect(),
            None => vec![true; rows * cols],
        };
        MotionField::from_parts(rows, cols, displacement, valid)
    }

    /// Stores cell coordinates as `[N, 2]` f32.
    pub fn put_cells(&mut self, name: &str, cells: &CellSet) -> Result<()> {
        let data = cells
            .coords
            .iter()
            .flat_map(|c| [c.row as f32, c.col as f32])
            .collect();
        self.push(
            name,
            vec![cells.len(), 2],
            ArrayData::F32(data),
            Some("cells"),
            None,
        )?;
        self.set_meta(&format!("{name}.source_frame"), serde_json::json!(cells.source_frame));
        Ok(())
    }

    pub fn cells(&self, name: &str) -> Result<CellSet> {
        let array = self.require(name)?;
        let coords = array
            .as_f32()?
            .chunks_exact(2)
            .map(|c| {
                if c[0] < 0.0 || c[1] < 0.0 || c[0].fract() != 0.0 || c[1].fract() != 0.0 {
                    return Err(Error::ShapeMismatch(format!(
                        "cell list '{name}' holds non-integer coordinate {c:?}"
                    )));
                }
                Ok(Cell::new(c[0] as usize, c[1] as usize))
            })
            .collect::<Result<Vec<_>>>()?;
        let source_frame = self
            .meta(&format!("{name}.source_frame"))
            .and_then(|v| v.as_i64())
            .unwrap_or(0) as i32;
        Ok(CellSet {
            coords,
            source_frame,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample() -> Container {
        let mut c = Container::new();
        c.push("a", vec![2, 3], ArrayData::U8(vec![1, 0, 1, 1, 0, 0]), None, None)
            .unwrap();
        c.push(
            "b",
            vec![2],
            ArrayData::F32(vec![1.5, -2.25]),
            Some("cells"),
            Some(1.0),
        )
        .unwrap();
        c
    }

    #[test]
    fn layout_starts_with_magic_and_length() {
        let bytes = sample().to_bytes();
        assert_eq!(&bytes[..4], b"BMT1");
        let len = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        assert_eq!(bytes.len(), 8 + len + 6 + 8);
        assert_eq!(&bytes[8 + len..8 + len + 6], &[1, 0, 1, 1, 0, 0]);
        assert_eq!(&bytes[8 + len + 6..8 + len + 10], &1.5f32.to_le_bytes());
    }

    #[test]
    fn truncated_payload_reports_offset() {
        let bytes = sample().to_bytes();
        let cut = &bytes[..bytes.len() - 2];
        let len = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        match Container::from_bytes(cut) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 8 + len + 6),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn bad_magic_and_trailing_bytes() {
        let mut bytes = sample().to_bytes();
        bytes.push(7);
        assert!(matches!(
            Container::from_bytes(&bytes),
            Err(Error::Format { .. })
        ));
        bytes[0] = b'X';
        assert!(matches!(
            Container::from_bytes(&bytes),
            Err(Error::Format { offset: 0, .. })
        ));
    }

    #[test]
    fn shape_mismatch_on_push() {
        let mut c = Container::new();
        assert!(c
            .push("x", vec![3], ArrayData::U8(vec![1, 2]), None, None)
            .is_err());
    }

    proptest! {
        #[test]
        fn bytes_round_trip(
            u in proptest::collection::vec(any::<u8>(), 0..64),
            f in proptest::collection::vec(-1e6f32..1e6, 0..32),
        ) {
            let mut c = Container::new();
            c.push("u", vec![u.len()], ArrayData::U8(u.clone()), None, None).unwrap();
            c.push("f", vec![f.len()], ArrayData::F32(f.clone()), Some("m"), Some(0.5)).unwrap();
            c.set_meta("k", serde_json::json!({"x": 1}));
            let back = Container::from_bytes(&c.to_bytes()).unwrap();
            prop_assert_eq!(back, c);
        }
    }
}
