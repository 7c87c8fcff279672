//! Labeled datasets on disk and train/test splitting.
//!
//! A dataset is a CSV with one sample per row:
//!
//! ```text
//! id,domain,c_ppix,saturated,f_0..f_{m-1},r_0..r_{m-1}
//! ```
//!
//! plus a `<stem>.grid.json` sidecar holding `{"wavelengths_nm": [...]}`.
//! A missing label is an empty field. Optics metadata is not stored. Numbers
//! are written in shortest round-trip form, so write followed by read is
//! exact.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::spectral::{Domain, LabeledSample, Role, Spectrum, WavelengthGrid};

const FIXED_COLUMNS: usize = 4;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GridSidecar {
    wavelengths_nm: Vec<f64>,
}

pub fn sidecar_path(csv_path: &Path) -> PathBuf {
    let stem = csv_path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    csv_path.with_file_name(format!("{stem}.grid.json"))
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn dataset_csv(samples: &[LabeledSample]) -> Result<String> {
    let Some(first) = samples.first() else {
        return Err(Error::Config("cannot write an empty dataset".into()));
    };
    let grid = first.grid().clone();
    let mut s = String::from("id,domain,c_ppix,saturated");
    for prefix in ["f", "r"] {
        for j in 0..grid.len() {
            let _ = write!(s, ",{prefix}_{j}");
        }
    }
    s.push('\n');
    for smp in samples {
        if !smp.grid().same_as(&grid) {
            return Err(Error::dim("dataset grid", grid.len(), smp.grid().len()));
        }
        let _ = write!(s, "{},{},{},{}", smp.id, smp.domain.as_str(), opt(smp.c_ppix), smp.saturated as u8);
        for v in smp.fluo.values().iter().chain(smp.reflectance.values()) {
            let _ = write!(s, ",{v}");
        }
        s.push('\n');
    }
    Ok(s)
}

pub fn write_dataset(samples: &[LabeledSample], csv_path: &Path) -> Result<()> {
    let text = dataset_csv(samples)?;
    std::fs::write(csv_path, text).map_err(|e| Error::io(csv_path, e))?;
    let side = GridSidecar { wavelengths_nm: samples[0].grid().wavelengths().to_vec() };
    let json = serde_json::to_string_pretty(&side).map_err(|e| Error::Config(e.to_string()))?;
    let sp = sidecar_path(csv_path);
    std::fs::write(&sp, json).map_err(|e| Error::io(&sp, e))
}

pub fn parse_dataset(text: &str, grid: &WavelengthGrid, context: &str) -> Result<Vec<LabeledSample>> {
    let perr = |reason: String| Error::Parse { context: context.to_string(), reason };
    let m = grid.len();
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
    let headers = reader.headers().map_err(|e| perr(e.to_string()))?.clone();
    if headers.len() != FIXED_COLUMNS + 2 * m || headers.get(0) != Some("id") {
        return Err(perr(format!(
            "expected {} columns for a {m}-band grid, found {}",
            FIXED_COLUMNS + 2 * m,
            headers.len()
        )));
    }
    let mut out = Vec::new();
    for (line, rec) in reader.records().enumerate() {
        let row = line + 2;
        let rec = rec.map_err(|e| perr(e.to_string()))?;
        let num = |i: usize| -> Result<f64> {
            rec[i].parse::<f64>().map_err(|_| perr(format!("row {row}, column {}: '{}' is not a number", i + 1, &rec[i])))
        };
        let maybe = |i: usize| -> Result<Option<f64>> { if rec[i].is_empty() { Ok(None) } else { num(i).map(Some) } };
        let id = rec[0].parse::<u64>().map_err(|_| perr(format!("row {row}: bad id '{}'", &rec[0])))?;
        let domain = Domain::parse(&rec[1]).ok_or_else(|| perr(format!("row {row}: unknown domain '{}'", &rec[1])))?;
        let saturated = match &rec[3] {
            "0" => false,
            "1" => true,
            other => return Err(perr(format!("row {row}: saturated must be 0 or 1, got '{other}'"))),
        };
        let fluo = (0..m).map(|j| num(FIXED_COLUMNS + j)).collect::<Result<Vec<_>>>()?;
        let refl = (0..m).map(|j| num(FIXED_COLUMNS + m + j)).collect::<Result<Vec<_>>>()?;
        let mut s = LabeledSample::new(
            id,
            Spectrum::new(grid.clone(), fluo, Role::Fluorescence)?,
            Spectrum::new(grid.clone(), refl, Role::Reflectance)?,
            maybe(2)?,
            domain,
        )?;
        s.saturated = saturated;
        out.push(s);
    }
    Ok(out)
}

pub fn read_grid_sidecar(path: &Path) -> Result<WavelengthGrid> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let side: GridSidecar = serde_json::from_str(&text).map_err(|e| Error::Parse {
        context: path.display().to_string(),
        reason: e.to_string(),
    })?;
    WavelengthGrid::new(side.wavelengths_nm)
}

/// Reads a dataset CSV and its grid sidecar.
pub fn read_dataset(csv_path: &Path) -> Result<Vec<LabeledSample>> {
    let grid = read_grid_sidecar(&sidecar_path(csv_path))?;
    let text = std::fs::read_to_string(csv_path).map_err(|e| Error::io(csv_path, e))?;
    parse_dataset(&text, &grid, &csv_path.display().to_string())
}

/// Train and test indices. When every label is present the split is
/// stratified: each concentration level contributes `round(n_level · f)`
/// training samples. Index lists come back sorted.
pub fn split_indices(labels: &[Option<f64>], fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::Config(format!("split fraction must lie in (0, 1), got {fraction}")));
    }
    if labels.len() < 2 {
        return Err(Error::Config(format!("splitting needs at least 2 samples, got {}", labels.len())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut groups: BTreeMap<u64, Vec<usize>> = BTreeMap::new();
    if labels.iter().all(Option::is_some) {
        for (i, l) in labels.iter().enumerate() {
            groups.entry(l.expect("checked").to_bits()).or_default().push(i);
        }
    } else {
        groups.insert(0, (0..labels.len()).collect());
    }
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for idx in groups.values_mut() {
        idx.shuffle(&mut rng);
        let n_train = (idx.len() as f64 * fraction).round() as usize;
        train.extend_from_slice(&idx[..n_train]);
        test.extend_from_slice(&idx[n_train..]);
    }
    if train.is_empty() || test.is_empty() {
        return Err(Error::Config(format!(
            "split fraction {fraction} leaves an empty side for {} samples",
            labels.len()
        )));
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok((train, test))
}

pub fn split_dataset(samples: &[LabeledSample], fraction: f64, seed: u64) -> Result<(Vec<LabeledSample>, Vec<LabeledSample>)> {
    let labels: Vec<Option<f64>> = samples.iter().map(|s| s.c_ppix).collect();
    let (tr, te) = split_indices(&labels, fraction, seed)?;
    Ok((
        tr.iter().map(|&i| samples[i].clone()).collect(),
        te.iter().map(|&i| samples[i].clone()).collect(),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simulate::{simulate_dataset, SimConfig};

    #[test]
    fn unlabeled_split_sizes() {
        let labels = vec![None; 100];
        let (tr, te) = split_indices(&labels, 0.85, 1).unwrap();
        assert_eq!((tr.len(), te.len()), (85, 15));
        let mut all: Vec<usize> = tr.iter().chain(&te).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..100).collect::<Vec<_>>());
        assert_eq!(split_indices(&labels, 0.85, 1).unwrap(), (tr, te));
    }

    #[test]
    fn stratified_split_per_level() {
        let labels: Vec<Option<f64>> = (0..100).map(|i| Some([0.0, 0.2, 0.6, 1.25, 2.5][i % 5])).collect();
        let (tr, te) = split_indices(&labels, 0.85, 9).unwrap();
        for level in [0.0, 0.2, 0.6, 1.25, 2.5] {
            assert_eq!(tr.iter().filter(|&&i| labels[i] == Some(level)).count(), 17);
            assert_eq!(te.iter().filter(|&&i| labels[i] == Some(level)).count(), 3);
        }
    }

    #[test]
    fn bad_fractions() {
        let labels = vec![None; 10];
        for f in [0.0, 1.0, -0.5, f64::NAN] {
            assert!(matches!(split_indices(&labels, f, 0), Err(Error::Config(_))));
        }
        assert!(matches!(split_indices(&[None], 0.5, 0), Err(Error::Config(_))));
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let data = simulate_dataset(&SimConfig::phantom(2, 3)).unwrap();
        let text = dataset_csv(&data).unwrap();
        let data: Vec<LabeledSample> = data.into_iter().map(|mut s| { s.optics = None; s }).collect();
        let back = parse_dataset(&text, data[0].grid(), "mem").unwrap();
        assert_eq!(back, data);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("phantom.csv");
        write_dataset(&data[..5], &p).unwrap();
        assert!(dir.path().join("phantom.grid.json").exists());
        assert_eq!(read_dataset(&p).unwrap(), data[..5].to_vec());
    }

    #[test]
    fn malformed_rows_are_parse_errors() {
        let data = simulate_dataset(&SimConfig::phantom(1, 3)).unwrap();
        let text = dataset_csv(&data[..1]).unwrap().replacen(",phantom,", ",mars,", 1);
        assert!(matches!(parse_dataset(&text, data[0].grid(), "x"), Err(Error::Parse { .. })));
    }
}
