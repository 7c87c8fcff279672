//! Hyperspectral data cubes and their binary file format.
//!
//! ```text
//! "HSC1"                       4 bytes
//! width, height, bands         u32 little-endian each
//! kind                         u8 (0 fluorescence, 1 white, 2 dark)
//! padding                      3 bytes
//! wavelengths                  bands × f64 little-endian, nm
//! planes                       bands × height × width × f32 little-endian
//! ```

use std::path::Path;

use crate::error::{Error, Result};
use crate::spectral::WavelengthGrid;

pub const CUBE_MAGIC: &[u8; 4] = b"HSC1";
pub const HEADER_BYTES: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CubeKind {
    Fluorescence,
    White,
    Dark,
}

impl CubeKind {
    fn code(self) -> u8 {
        match self {
            CubeKind::Fluorescence => 0,
            CubeKind::White => 1,
            CubeKind::Dark => 2,
        }
    }

    fn from_code(c: u8) -> Option<Self> {
        match c {
            0 => Some(CubeKind::Fluorescence),
            1 => Some(CubeKind::White),
            2 => Some(CubeKind::Dark),
            _ => None,
        }
    }
}

/// `W × H × Λ` cube stored band-major: plane `b` holds row-major pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct DataCube {
    width: usize,
    height: usize,
    grid: WavelengthGrid,
    kind: CubeKind,
    values: Vec<f32>,
}

impl DataCube {
    pub fn new(width: usize, height: usize, grid: WavelengthGrid, kind: CubeKind, values: Vec<f32>) -> Result<Self> {
        let n = width * height * grid.len();
        if values.len() != n {
            return Err(Error::dim("DataCube::new", n, values.len()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "DataCube::new" });
        }
        Ok(Self { width, height, grid, kind, values })
    }

    pub fn zeros(width: usize, height: usize, grid: WavelengthGrid, kind: CubeKind) -> Self {
        let n = width * height * grid.len();
        Self { width, height, grid, kind, values: vec![0.0; n] }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn bands(&self) -> usize {
        self.grid.len()
    }

    pub fn pixels(&self) -> usize {
        self.width * self.height
    }

    pub fn grid(&self) -> &WavelengthGrid {
        &self.grid
    }

    pub fn kind(&self) -> CubeKind {
        self.kind
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f32] {
        &mut self.values
    }

    pub fn plane(&self, band: usize) -> &[f32] {
        let p = self.pixels();
        &self.values[band * p..(band + 1) * p]
    }

    pub fn get(&self, band: usize, x: usize, y: usize) -> f32 {
        self.values[band * self.pixels() + y * self.width + x]
    }

    pub fn set(&mut self, band: usize, x: usize, y: usize, v: f32) {
        let p = self.pixels();
        self.values[band * p + y * self.width + x] = v;
    }

    /// Spectrum at pixel `(x, y)` widened to `f64`.
    pub fn spectrum(&self, x: usize, y: usize) -> Vec<f64> {
        let p = self.pixels();
        let i = y * self.width + x;
        (0..self.bands()).map(|b| self.values[b * p + i] as f64).collect()
    }

    /// Per-pixel mean over bands, row-major.
    pub fn mean_image(&self) -> Vec<f64> {
        let p = self.pixels();
        let mut out = vec![0.0; p];
        for b in 0..self.bands() {
            for (o, v) in out.iter_mut().zip(self.plane(b)) {
                *o += *v as f64;
            }
        }
        let n = self.bands().max(1) as f64;
        out.iter_mut().for_each(|v| *v /= n);
        out
    }

    pub fn same_shape(&self, other: &DataCube) -> Result<()> {
        if self.width != other.width || self.height != other.height {
            return Err(Error::dim("cube size", self.pixels(), other.pixels()));
        }
        if !self.grid.same_as(&other.grid) {
            return Err(Error::dim("cube grid", self.bands(), other.bands()));
        }
        Ok(())
    }

    /// Payload byte count implied by a header.
    pub fn payload_bytes(width: usize, height: usize, bands: usize) -> u64 {
        width as u64 * height as u64 * bands as u64 * 4
    }
}

pub fn encode_cube(cube: &DataCube) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_BYTES + cube.bands() * 8 + cube.values.len() * 4);
    out.extend_from_slice(CUBE_MAGIC);
    for d in [cube.width, cube.height, cube.bands()] {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    out.push(cube.kind.code());
    out.extend_from_slice(&[0, 0, 0]);
    for w in cube.grid.wavelengths() {
        out.extend_from_slice(&w.to_le_bytes());
    }
    for v in &cube.values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_cube(bytes: &[u8], context: &str) -> Result<DataCube> {
    let fmt = |offset: usize, reason: String| Error::Format {
        context: context.to_string(),
        offset: offset as u64,
        reason,
    };
    if bytes.len() < HEADER_BYTES {
        return Err(fmt(
            bytes.len(),
            format!("truncated header: needs {} more bytes", HEADER_BYTES - bytes.len()),
        ));
    }
    if &bytes[..4] != CUBE_MAGIC {
        return Err(fmt(0, "bad magic, expected HSC1".into()));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes")) as usize;
    let (width, height, bands) = (u32_at(4), u32_at(8), u32_at(12));
    let kind = CubeKind::from_code(bytes[16]).ok_or_else(|| fmt(16, format!("unknown cube kind {}", bytes[16])))?;
    let grid_end = HEADER_BYTES as u64 + bands as u64 * 8;
    let total = grid_end + DataCube::payload_bytes(width, height, bands);
    if (bytes.len() as u64) < total {
        return Err(fmt(
            bytes.len(),
            format!("truncated payload: needs {} more bytes", total - bytes.len() as u64),
        ));
    }
    if (bytes.len() as u64) > total {
        return Err(fmt(total as usize, format!("{} trailing bytes after payload", bytes.len() as u64 - total)));
    }
    let grid_end = grid_end as usize;
    let wavelengths = bytes[HEADER_BYTES..grid_end]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    let grid = WavelengthGrid::new(wavelengths).map_err(|e| fmt(HEADER_BYTES, format!("invalid wavelength grid: {e}")))?;
    let values: Vec<f32> = bytes[grid_end..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    if let Some(i) = values.iter().position(|v| !v.is_finite()) {
        return Err(fmt(grid_end + 4 * i, "non-finite sample value".into()));
    }
    DataCube::new(width, height, grid, kind, values)
}

pub fn save_cube(cube: &DataCube, path: &Path) -> Result<()> {
    std::fs::write(path, encode_cube(cube)).map_err(|e| Error::io(path, e))
}

pub fn load_cube(path: &Path) -> Result<DataCube> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_cube(&bytes, &path.display().to_string())
}
