//! Binary field snapshots.
//!
//! A 32-byte little-endian header followed by `f64` values:
//!
//! | bytes  | content                                              |
//! |--------|------------------------------------------------------|
//! | 0..4   | magic `QGF1`                                         |
//! | 4..8   | `nx` (u32)                                           |
//! | 8..12  | `ny` (u32)                                           |
//! | 12..16 | layer count (u32)                                    |
//! | 16..20 | value kind tag (u32, see [`SnapshotKind`])           |
//! | 20..24 | mode count `K` for ξ bases, otherwise 0 (u32)        |
//! | 24..32 | auxiliary f64: ∬(ψ1 − ψ2) for PV snapshots, else 0   |
//!
//! Cell fields store `nx·ny` values per layer, row-major, layer-outermost.
//! A ξ basis stores, for each mode and then each layer, `ξᵘ` on the
//! `nx·ny` x-faces followed by `ξᵛ` on the `nx·(ny+1)` y-faces.

use std::path::Path;

use crate::error::{QgError, Result};
use crate::field::{LayeredField, LAYERS};
use crate::grid::Grid;

pub const MAGIC: &[u8; 4] = b"QGF1";
pub const HEADER_LEN: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SnapshotKind {
    Pv = 1,
    StreamFunction = 2,
    XiBasis = 3,
}

impl SnapshotKind {
    fn from_tag(tag: u32) -> Option<Self> {
        match tag {
            1 => Some(Self::Pv),
            2 => Some(Self::StreamFunction),
            3 => Some(Self::XiBasis),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Snapshot {
    pub nx: u32,
    pub ny: u32,
    pub layers: u32,
    pub kind: SnapshotKind,
    pub modes: u32,
    pub aux: f64,
    pub values: Vec<f64>,
}

impl Snapshot {
    /// Number of values the header promises.
    pub fn expected_len(&self) -> usize {
        let (nx, ny, layers) = (self.nx as usize, self.ny as usize, self.layers as usize);
        match self.kind {
            SnapshotKind::XiBasis => self.modes as usize * layers * (nx * ny + nx * (ny + 1)),
            _ => layers * nx * ny,
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + 8 * self.values.len());
        out.extend_from_slice(MAGIC);
        for v in [self.nx, self.ny, self.layers, self.kind as u32, self.modes] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&self.aux.to_le_bytes());
        for v in &self.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN {
            return Err(QgError::Format {
                offset: bytes.len(),
                message: format!("header needs {HEADER_LEN} bytes"),
            });
        }
        if &bytes[0..4] != MAGIC {
            return Err(QgError::Format {
                offset: 0,
                message: "bad magic, expected QGF1".into(),
            });
        }
        let word = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap());
        let kind = SnapshotKind::from_tag(word(16)).ok_or_else(|| QgError::Format {
            offset: 16,
            message: format!("unknown value kind {}", word(16)),
        })?;
        let mut snap = Self {
            nx: word(4),
            ny: word(8),
            layers: word(12),
            kind,
            modes: word(20),
            aux: f64::from_le_bytes(bytes[24..32].try_into().unwrap()),
            values: Vec::new(),
        };
        if snap.layers as usize != LAYERS {
            return Err(QgError::Format {
                offset: 12,
                message: format!("expected {LAYERS} layers, found {}", snap.layers),
            });
        }
        let want = snap.expected_len();
        let payload = &bytes[HEADER_LEN..];
        if payload.len() != 8 * want {
            let offset = HEADER_LEN + 8 * (payload.len() / 8).min(want);
            return Err(QgError::Format {
                offset,
                message: format!(
                    "payload holds {} bytes, header promises {} values ({} bytes)",
                    payload.len(),
                    want,
                    8 * want
                ),
            });
        }
        snap.values = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(snap)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::decode(&std::fs::read(path)?)
    }

    pub fn from_field(field: &LayeredField, kind: SnapshotKind, aux: f64) -> Self {
        let g = field.grid();
        Self {
            nx: g.nx as u32,
            ny: g.ny as u32,
            layers: LAYERS as u32,
            kind,
            modes: 0,
            aux,
            values: field.data().to_vec(),
        }
    }

    /// Rebuilds a cell field, checking the dimensions against `grid`.
    pub fn into_field(self, grid: Grid, kind: SnapshotKind) -> Result<LayeredField> {
        if self.kind != kind {
            return Err(QgError::Format {
                offset: 16,
                message: format!("expected {kind:?} snapshot, found {:?}", self.kind),
            });
        }
        if self.nx as usize != grid.nx || self.ny as usize != grid.ny {
            return Err(QgError::GridMismatch(format!(
                "snapshot is {}x{}, grid is {}x{}",
                self.nx, self.ny, grid.nx, grid.ny
            )));
        }
        LayeredField::from_vec(grid, self.values).ok_or(QgError::Dimension {
            what: "snapshot payload",
            expected: 2 * grid.cells(),
            got: 0,
        })
    }
}
