//! Flat parameter snapshot and its little-endian wire format.
//!
//! ```text
//! magic    4 bytes  "BMPV"
//! version  u16      1
//! entries  u32
//! per entry: kind u8, rows u32, cols u32
//! payload  sum(rows * cols) x f32
//! ```

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PARAM_MAGIC: &[u8; 4] = b"BMPV";
pub const PARAM_VERSION: u16 = 1;
/// Bytes per layout entry in the header.
pub const ENTRY_HEADER_BYTES: usize = 9;
/// Fixed header bytes before the entry table.
pub const PARAM_HEADER_BYTES: usize = 4 + 2 + 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[repr(u8)]
pub enum EntryKind {
    Weight = 0,
    Bias = 1,
    NormScale = 2,
    NormShift = 3,
    RunningMean = 4,
    RunningVar = 5,
}

impl EntryKind {
    pub fn trainable(self) -> bool {
        !matches!(self, EntryKind::RunningMean | EntryKind::RunningVar)
    }

    fn from_u8(v: u8) -> Option<Self> {
        Some(match v {
            0 => EntryKind::Weight,
            1 => EntryKind::Bias,
            2 => EntryKind::NormScale,
            3 => EntryKind::NormShift,
            4 => EntryKind::RunningMean,
            5 => EntryKind::RunningVar,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayoutEntry {
    pub kind: EntryKind,
    pub rows: usize,
    pub cols: usize,
}

impl LayoutEntry {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    layout: Vec<LayoutEntry>,
    data: Vec<f32>,
}

impl ParamVector {
    pub fn new(layout: Vec<LayoutEntry>, data: Vec<f32>) -> Result<Self> {
        let expected: usize = layout.iter().map(LayoutEntry::len).sum();
        if expected != data.len() {
            return Err(Error::Layout(format!(
                "layout describes {expected} values, payload has {}",
                data.len()
            )));
        }
        Ok(Self { layout, data })
    }

    pub fn layout(&self) -> &[LayoutEntry] {
        &self.layout
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Slices of the payload, one per layout entry.
    pub fn entries(&self) -> impl Iterator<Item = (&LayoutEntry, &[f32])> {
        let mut offset = 0;
        self.layout.iter().map(move |e| {
            let s = &self.data[offset..offset + e.len()];
            offset += e.len();
            (e, s)
        })
    }

    /// Encoded size in bytes for a layout, without encoding anything.
    pub fn encoded_len_for(layout: &[LayoutEntry]) -> usize {
        PARAM_HEADER_BYTES
            + layout.len() * ENTRY_HEADER_BYTES
            + 4 * layout.iter().map(LayoutEntry::len).sum::<usize>()
    }

    pub fn encoded_len(&self) -> usize {
        Self::encoded_len_for(&self.layout)
    }

    /// Euclidean distance between two vectors with equal layout.
    pub fn l2_distance(&self, other: &Self) -> Result<f64> {
        if self.layout != other.layout {
            return Err(Error::Layout("l2 distance between different layouts".into()));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a as f64 - b as f64).powi(2))
            .sum::<f64>()
            .sqrt())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.encoded_len());
        out.extend_from_slice(PARAM_MAGIC);
        out.extend_from_slice(&PARAM_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.layout.len() as u32).to_le_bytes());
        for e in &self.layout {
            out.push(e.kind as u8);
            out.extend_from_slice(&(e.rows as u32).to_le_bytes());
            out.extend_from_slice(&(e.cols as u32).to_le_bytes());
        }
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = crate::codec::Reader::new(bytes);
        let magic = r.take(4)?;
        if magic != PARAM_MAGIC {
            return Err(r.error_at(0, format!("bad magic {magic:?}")));
        }
        let version = r.u16()?;
        if version != PARAM_VERSION {
            return Err(r.error_at(4, format!("unsupported version {version}")));
        }
        let count = r.u32()? as usize;
        let mut layout = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let at = r.offset();
            let kind = r.u8()?;
            let kind = EntryKind::from_u8(kind)
                .ok_or_else(|| r.error_at(at, format!("unknown entry kind {kind}")))?;
            let rows = r.u32()? as usize;
            let cols = r.u32()? as usize;
            layout.push(LayoutEntry { kind, rows, cols });
        }
        let n: usize = layout.iter().map(LayoutEntry::len).sum();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            data.push(r.f32()?);
        }
        r.finish()?;
        Ok(Self { layout, data })
    }
}
