//! Grayscale PGM rendering of 2-D maps, with a CSV of the raw values.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

/// Row-major `width × height` map with an optional validity mask.
#[derive(Debug, Clone, PartialEq)]
pub struct Map2d {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f64>,
    pub valid: Option<Vec<bool>>,
}

impl Map2d {
    pub fn new(width: usize, height: usize, values: Vec<f64>, valid: Option<Vec<bool>>) -> Result<Self> {
        if values.len() != width * height {
            return Err(Error::dim("Map2d::new", width * height, values.len()));
        }
        if let Some(v) = &valid {
            if v.len() != values.len() {
                return Err(Error::dim("Map2d validity", values.len(), v.len()));
            }
        }
        Ok(Self { width, height, values, valid })
    }

    pub fn is_valid(&self, i: usize) -> bool {
        self.values[i].is_finite() && self.valid.as_ref().is_none_or(|v| v[i])
    }

    /// Values at valid entries, in row-major order.
    pub fn valid_values(&self) -> Vec<f64> {
        (0..self.values.len()).filter(|&i| self.is_valid(i)).map(|i| self.values[i]).collect()
    }
}

/// 8-bit gray levels: `round(255·(v - min)/(max - min))` over valid entries,
/// 0 for invalid ones, 128 everywhere when the range is empty.
pub fn gray_levels(map: &Map2d) -> Vec<u8> {
    let valid = map.valid_values();
    let lo = valid.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = valid.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    (0..map.values.len())
        .map(|i| {
            if !map.is_valid(i) {
                0
            } else if !(hi > lo) {
                128
            } else {
                (255.0 * (map.values[i] - lo) / (hi - lo)).round().clamp(0.0, 255.0) as u8
            }
        })
        .collect()
}

pub fn encode_pgm(width: usize, height: usize, pixels: &[u8]) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    out
}

/// Parses a binary PGM with maxval 255.
pub fn decode_pgm(bytes: &[u8], context: &str) -> Result<(usize, usize, Vec<u8>)> {
    let fmt = |offset: usize, reason: &str| Error::Format {
        context: context.to_string(),
        offset: offset as u64,
        reason: reason.to_string(),
    };
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(fmt(pos, "truncated PGM header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    if fields[0] != "P5" || fields[3] != "255" {
        return Err(fmt(0, "expected a P5 PGM with maxval 255"));
    }
    let w: usize = fields[1].parse().map_err(|_| fmt(3, "bad width"))?;
    let h: usize = fields[2].parse().map_err(|_| fmt(3, "bad height"))?;
    let data = &bytes[(pos + 1).min(bytes.len())..];
    if data.len() != w * h {
        return Err(fmt(pos + 1, &format!("expected {} pixel bytes, found {}", w * h, data.len())));
    }
    Ok((w, h, data.to_vec()))
}

/// Raw values, one image row per line; invalid entries are written as `nan`.
pub fn map_csv(map: &Map2d) -> String {
    let mut s = String::new();
    for y in 0..map.height {
        for x in 0..map.width {
            let i = y * map.width + x;
            if x > 0 {
                s.push(',');
            }
            if map.is_valid(i) {
                let _ = write!(s, "{}", map.values[i]);
            } else {
                s.push_str("nan");
            }
        }
        s.push('\n');
    }
    s
}

pub fn parse_map_csv(text: &str, context: &str) -> Result<Map2d> {
    let perr = |reason: String| Error::Parse { context: context.to_string(), reason };
    let mut values = Vec::new();
    let mut valid = Vec::new();
    let mut width = None;
    let mut height = 0;
    for (line, row) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let cells: Vec<&str> = row.split(',').map(str::trim).collect();
        match width {
            None => width = Some(cells.len()),
            Some(w) if w != cells.len() => {
                return Err(perr(format!("row {} has {} values, expected {w}", line + 1, cells.len())));
            }
            _ => {}
        }
        for c in cells {
            let v: f64 = c.parse().map_err(|_| perr(format!("row {}: '{c}' is not a number", line + 1)))?;
            valid.push(v.is_finite());
            values.push(v);
        }
        height += 1;
    }
    let width = width.ok_or_else(|| perr("empty map".into()))?;
    Map2d::new(width, height, values, Some(valid))
}

pub fn csv_companion(path: &Path) -> PathBuf {
    path.with_extension("csv")
}

/// Writes `path` as a PGM and the raw values next to it as CSV.
pub fn render_map(map: &Map2d, path: &Path) -> Result<PathBuf> {
    let pgm = encode_pgm(map.width, map.height, &gray_levels(map));
    std::fs::write(path, pgm).map_err(|e| Error::io(path, e))?;
    let csv = csv_companion(path);
    std::fs::write(&csv, map_csv(map)).map_err(|e| Error::io(&csv, e))?;
    Ok(csv)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn constant_map_is_mid_gray() {
        let m = Map2d::new(3, 2, vec![4.2; 6], None).unwrap();
        assert_eq!(gray_levels(&m), vec![128; 6]);
    }

    #[test]
    fn endpoints_map_to_black_and_white() {
        let m = Map2d::new(1, 2, vec![0.0, 1.0], None).unwrap();
        assert_eq!(gray_levels(&m), vec![0, 255]);
        let masked = Map2d::new(3, 1, vec![5.0, 1.0, 3.0], Some(vec![false, true, true])).unwrap();
        assert_eq!(gray_levels(&masked), vec![0, 0, 255]);
    }

    #[test]
    fn pgm_and_csv_round_trip_preserve_rank_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let values: Vec<f64> = (0..35).map(|_| rng.random_range(-3.0..9.0)).collect();
        let map = Map2d::new(7, 5, values, None).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("z0.pgm");
        let csv_path = render_map(&map, &path).unwrap();
        let (w, h, px) = decode_pgm(&std::fs::read(&path).unwrap(), "z0.pgm").unwrap();
        assert_eq!((w, h), (7, 5));
        let back = parse_map_csv(&std::fs::read_to_string(csv_path).unwrap(), "csv").unwrap();
        assert_eq!(back.values, map.values);
        let (lo, hi) = (back.values.iter().copied().fold(f64::INFINITY, f64::min), back.values.iter().copied().fold(f64::NEG_INFINITY, f64::max));
        for i in 0..35 {
            for j in 0..35 {
                if back.values[i] < back.values[j] {
                    assert!(px[i] <= px[j]);
                }
            }
            let approx = lo + px[i] as f64 / 255.0 * (hi - lo);
            assert!((approx - back.values[i]).abs() <= 0.5 / 255.0 * (hi - lo) + 1e-12);
        }
    }
}
