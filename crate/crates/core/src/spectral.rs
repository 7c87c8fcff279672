//! Wavelength grids, spectra, endmember libraries and the linear mixing model.
//!
//! A measured fluorescence spectrum is modelled as a nonnegative combination
//! of K endmember emission spectra, `y = B z`, where the columns of `B` are the
//! endmembers sampled on a shared [`WavelengthGrid`]. Everything downstream
//! (correction, unmixing, the networks' fixed decoder) builds on [`mix`].

use std::fmt;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;

/// Index of the PpIX 634 nm photostate in every abundance vector.
pub const PPIX634: usize = 0;

/// Ordered sampling wavelengths in nm.
#[derive(Clone, PartialEq)]
pub struct WavelengthGrid {
    wavelengths: Arc<[f64]>,
}

impl WavelengthGrid {
    pub fn new(wavelengths: Vec<f64>) -> Result<Self> {
        if wavelengths.is_empty() {
            return Err(Error::Config("wavelength grid is empty".into()));
        }
        for (i, &w) in wavelengths.iter().enumerate() {
            if !w.is_finite() || w <= 0.0 {
                return Err(Error::Config(format!(
                    "wavelength {w} at index {i} is not a positive finite value"
                )));
            }
            if i > 0 && w <= wavelengths[i - 1] {
                return Err(Error::Config(format!(
                    "wavelengths not strictly increasing at index {i}"
                )));
            }
        }
        Ok(Self {
            wavelengths: wavelengths.into(),
        })
    }

    /// `count` samples from `start` in steps of `step` nm.
    pub fn uniform(start: f64, step: f64, count: usize) -> Result<Self> {
        Self::new((0..count).map(|i| start + step * i as f64).collect())
    }

    pub fn len(&self) -> usize {
        self.wavelengths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.wavelengths.is_empty()
    }

    pub fn wavelengths(&self) -> &[f64] {
        &self.wavelengths
    }

    pub fn first(&self) -> f64 {
        self.wavelengths[0]
    }

    pub fn last(&self) -> f64 {
        self.wavelengths[self.len() - 1]
    }

    /// Index of the sample nearest to `nm`.
    pub fn nearest_index(&self, nm: f64) -> usize {
        let mut best = 0;
        for (i, &w) in self.wavelengths.iter().enumerate() {
            if (w - nm).abs() < (self.wavelengths[best] - nm).abs() {
                best = i;
            }
        }
        best
    }

    pub fn same_as(&self, other: &WavelengthGrid) -> bool {
        Arc::ptr_eq(&self.wavelengths, &other.wavelengths) || self == other
    }

    /// Mean step between neighbouring samples.
    pub fn mean_step(&self) -> f64 {
        if self.len() < 2 {
            0.0
        } else {
            (self.last() - self.first()) / (self.len() - 1) as f64
        }
    }
}

impl Default for WavelengthGrid {
    /// 450 to 747 nm inclusive in 3 nm steps (100 samples).
    fn default() -> Self {
        Self::uniform(450.0, 3.0, 100).expect("default grid is valid")
    }
}

impl fmt::Debug for WavelengthGrid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "WavelengthGrid({} samples, {}..={} nm)",
            self.len(),
            self.first(),
            self.last()
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Fluorescence,
    Reflectance,
    Dark,
    Endmember,
    Corrected,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Spectrum {
    grid: WavelengthGrid,
    values: Vec<f64>,
    role: Role,
}

impl Spectrum {
    pub fn new(grid: WavelengthGrid, values: Vec<f64>, role: Role) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::dim("Spectrum::new", grid.len(), values.len()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "Spectrum::new" });
        }
        Ok(Self { grid, values, role })
    }

    pub fn zeros(grid: WavelengthGrid, role: Role) -> Self {
        let values = vec![0.0; grid.len()];
        Self { grid, values, role }
    }

    pub fn grid(&self) -> &WavelengthGrid {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn with_role(mut self, role: Role) -> Self {
        self.role = role;
        self
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Value at the grid sample nearest to `nm`.
    pub fn at_nm(&self, nm: f64) -> f64 {
        self.values[self.grid.nearest_index(nm)]
    }

    pub fn scaled(&self, factor: f64) -> Spectrum {
        Spectrum {
            grid: self.grid.clone(),
            values: self.values.iter().map(|v| v * factor).collect(),
            role: self.role,
        }
    }
}

/// Linear interpolation of `spectrum` onto `target`. Fails on extrapolation.
pub fn resample(spectrum: &Spectrum, target: &WavelengthGrid) -> Result<Spectrum> {
    let src = spectrum.grid.wavelengths();
    let vals = &spectrum.values;
    let (lo, hi) = (spectrum.grid.first(), spectrum.grid.last());
    let mut out = Vec::with_capacity(target.len());
    let mut seg = 0usize;
    for &w in target.wavelengths() {
        if w < lo || w > hi {
            return Err(Error::Range {
                op: "resample",
                value: w,
                lo,
                hi,
            });
        }
        while seg + 1 < src.len() && src[seg + 1] < w {
            seg += 1;
        }
        if src[seg] == w || src.len() == 1 {
            out.push(vals[seg]);
            continue;
        }
        let (x0, x1) = (src[seg], src[seg + 1]);
        if x1 == w {
            out.push(vals[seg + 1]);
            continue;
        }
        let t = (w - x0) / (x1 - x0);
        out.push(vals[seg] + t * (vals[seg + 1] - vals[seg]));
    }
    Spectrum::new(target.clone(), out, spectrum.role)
}

/// Endmember spectra as the columns of an m×K matrix.
#[derive(Debug, Clone)]
pub struct EndmemberLibrary {
    grid: WavelengthGrid,
    names: Vec<String>,
    /// Row-major m×K.
    matrix: Arc<[f64]>,
}

impl EndmemberLibrary {
    /// Builds a library from raw columns, peak-normalizing each to 1.
    pub fn from_columns(grid: WavelengthGrid, names: Vec<String>, columns: Vec<Vec<f64>>) -> Result<Self> {
        let k = columns.len();
        if k == 0 {
            return Err(Error::Config("endmember library needs at least one column".into()));
        }
        if names.len() != k {
            return Err(Error::dim("EndmemberLibrary names", k, names.len()));
        }
        let m = grid.len();
        let mut matrix = vec![0.0; m * k];
        for (j, col) in columns.iter().enumerate() {
            if col.len() != m {
                return Err(Error::dim("EndmemberLibrary column", m, col.len()));
            }
            if col.iter().any(|v| !v.is_finite() || *v < 0.0) {
                return Err(Error::Config(format!(
                    "endmember '{}' has negative or non-finite values",
                    names[j]
                )));
            }
            let peak = col.iter().cloned().fold(0.0, f64::max);
            if peak <= 0.0 {
                return Err(Error::Degenerate {
                    op: "EndmemberLibrary",
                    reason: format!("endmember '{}' is identically zero", names[j]),
                });
            }
            for (i, v) in col.iter().enumerate() {
                matrix[i * k + j] = v / peak;
            }
        }
        let lib = Self {
            grid,
            names,
            matrix: matrix.into(),
        };
        let sv = lib.normalized_smallest_singular_value();
        if sv <= 1e-6 {
            return Err(Error::Degenerate {
                op: "EndmemberLibrary",
                reason: format!("columns are linearly dependent (smallest singular value {sv:e})"),
            });
        }
        Ok(lib)
    }

    pub fn grid(&self) -> &WavelengthGrid {
        &self.grid
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    /// Number of endmembers K.
    pub fn k(&self) -> usize {
        self.names.len()
    }

    /// Number of wavelength samples m.
    pub fn m(&self) -> usize {
        self.grid.len()
    }

    /// Row-major m×K matrix.
    pub fn matrix(&self) -> &[f64] {
        &self.matrix
    }

    pub(crate) fn shared_matrix(&self) -> Arc<[f64]> {
        Arc::clone(&self.matrix)
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.matrix[row * self.k() + col]
    }

    pub fn column(&self, col: usize) -> Vec<f64> {
        (0..self.m()).map(|i| self.get(i, col)).collect()
    }

    pub fn endmember(&self, col: usize) -> Spectrum {
        Spectrum {
            grid: self.grid.clone(),
            values: self.column(col),
            role: Role::Endmember,
        }
    }

    /// Smallest singular value after scaling every column to unit L2 norm.
    pub fn normalized_smallest_singular_value(&self) -> f64 {
        let (m, k) = (self.m(), self.k());
        let mut a = self.matrix.to_vec();
        for j in 0..k {
            let n = (0..m).map(|i| a[i * k + j].powi(2)).sum::<f64>().sqrt();
            for i in 0..m {
                a[i * k + j] /= n;
            }
        }
        linalg::smallest_singular_value(&a, m, k)
    }

    /// Parses a `wavelength_nm,<name1>,...` CSV and resamples onto `grid`.
    pub fn from_csv_path(path: &Path, grid: &WavelengthGrid) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_csv_str(&text, grid, &path.display().to_string())
    }

    pub fn from_csv_str(text: &str, grid: &WavelengthGrid, context: &str) -> Result<Self> {
        let parse_err = |reason: String| Error::Parse {
            context: context.to_string(),
            reason,
        };
        let mut reader = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .from_reader(text.as_bytes());
        let headers = reader.headers().map_err(|e| parse_err(e.to_string()))?.clone();
        if headers.get(0) != Some("wavelength_nm") || headers.len() < 2 {
            return Err(parse_err("header must be `wavelength_nm,<name1>,...`".into()));
        }
        let names: Vec<String> = headers.iter().skip(1).map(str::to_string).collect();
        let mut wl = Vec::new();
        let mut cols = vec![Vec::new(); names.len()];
        for (line, rec) in reader.records().enumerate() {
            let rec = rec.map_err(|e| parse_err(e.to_string()))?;
            if rec.len() != names.len() + 1 {
                return Err(parse_err(format!("row {} has {} fields", line + 2, rec.len())));
            }
            let num = |s: &str| {
                s.parse::<f64>()
                    .map_err(|_| parse_err(format!("row {}: '{s}' is not a number", line + 2)))
            };
            wl.push(num(&rec[0])?);
            for (j, col) in cols.iter_mut().enumerate() {
                col.push(num(&rec[j + 1])?);
            }
        }
        let src_grid = WavelengthGrid::new(wl)?;
        let columns = cols
            .into_iter()
            .map(|c| {
                let s = Spectrum::new(src_grid.clone(), c, Role::Endmember)?;
                Ok(resample(&s, grid)?.into_values())
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_columns(grid.clone(), names, columns)
    }

    pub fn to_csv_string(&self) -> String {
        let mut s = String::from("wavelength_nm");
        for n in &self.names {
            s.push(',');
            s.push_str(n);
        }
        s.push('\n');
        for (i, w) in self.grid.wavelengths().iter().enumerate() {
            s.push_str(&w.to_string());
            for j in 0..self.k() {
                s.push(',');
                s.push_str(&self.get(i, j).to_string());
            }
            s.push('\n');
        }
        s
    }
}

/// Nonnegative abundances, index 0 = PpIX634 by convention.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AbundanceVector {
    z: Vec<f64>,
}

impl AbundanceVector {
    pub fn new(z: Vec<f64>) -> Result<Self> {
        if let Some(v) = z.iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(Error::Range {
                op: "AbundanceVector::new",
                value: *v,
                lo: 0.0,
                hi: f64::INFINITY,
            });
        }
        Ok(Self { z })
    }

    pub fn zeros(k: usize) -> Self {
        Self { z: vec![0.0; k] }
    }

    pub fn values(&self) -> &[f64] {
        &self.z
    }

    pub fn into_values(self) -> Vec<f64> {
        self.z
    }

    pub fn len(&self) -> usize {
        self.z.len()
    }

    pub fn is_empty(&self) -> bool {
        self.z.is_empty()
    }

    pub fn ppix634(&self) -> f64 {
        self.z[PPIX634]
    }

    pub fn l2_norm(&self) -> f64 {
        self.z.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Unit-L2 rescaling. The second element flags the all-zero case, where the
/// input is returned unchanged.
pub fn normalize_l2(z: &AbundanceVector) -> (AbundanceVector, bool) {
    let n = z.l2_norm();
    if n > 0.0 {
        (
            AbundanceVector {
                z: z.z.iter().map(|v| v / n).collect(),
            },
            false,
        )
    } else {
        (z.clone(), true)
    }
}

/// `out = B z` for a row-major m×K matrix. Shared by [`mix`] and the
/// networks' fixed decoder so both produce bit-identical results.
pub(crate) fn mix_into(matrix: &[f64], k: usize, z: &[f64], out: &mut [f64]) {
    for (row, o) in matrix.chunks_exact(k).zip(out.iter_mut()) {
        let mut acc = 0.0;
        for (b, zj) in row.iter().zip(z) {
            acc += b * zj;
        }
        *o = acc;
    }
}

pub fn mix(lib: &EndmemberLibrary, z: &AbundanceVector) -> Result<Spectrum> {
    if z.len() != lib.k() {
        return Err(Error::dim("mix", lib.k(), z.len()));
    }
    let mut out = vec![0.0; lib.m()];
    mix_into(lib.matrix(), lib.k(), z.values(), &mut out);
    Ok(Spectrum {
        grid: lib.grid.clone(),
        values: out,
        role: Role::Corrected,
    })
}

/// Mean of squared element differences.
pub fn mse(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::dim("mse", a.len(), b.len()));
    }
    if a.is_empty() {
        return Ok(0.0);
    }
    let s: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok(s / a.len() as f64)
}

/// Pearson correlation coefficient. Zero variance is an error, never NaN.
pub fn pearson_r(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::dim("pearson_r", x.len(), y.len()));
    }
    if x.len() < 2 {
        return Err(Error::Degenerate {
            op: "pearson_r",
            reason: format!("need at least 2 pairs, got {}", x.len()),
        });
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if !(sxx > 0.0) || !(syy > 0.0) {
        return Err(Error::Degenerate {
            op: "pearson_r",
            reason: "zero variance".into(),
        });
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Phantom,
    Pbh,
    Human,
    Synthetic,
}

impl Domain {
    pub fn as_str(&self) -> &'static str {
        match self {
            Domain::Phantom => "phantom",
            Domain::Pbh => "pbh",
            Domain::Human => "human",
            Domain::Synthetic => "synthetic",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "phantom" => Domain::Phantom,
            "pbh" => Domain::Pbh,
            "human" => Domain::Human,
            "synthetic" => Domain::Synthetic,
            _ => return None,
        })
    }
}

/// Optical properties a sample was generated or measured with.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OpticsMeta {
    pub mu_a_405: f64,
    pub mu_s_635: f64,
    pub geometric_factor: f64,
}

/// Paired fluorescence and white-light spectra with an optional PpIX label.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSample {
    pub id: u64,
    pub fluo: Spectrum,
    pub reflectance: Spectrum,
    pub c_ppix: Option<f64>,
    pub domain: Domain,
    pub optics: Option<OpticsMeta>,
    pub saturated: bool,
}

impl LabeledSample {
    pub fn new(id: u64, fluo: Spectrum, reflectance: Spectrum, c_ppix: Option<f64>, domain: Domain) -> Result<Self> {
        if !fluo.grid().same_as(reflectance.grid()) {
            return Err(Error::Config(format!(
                "sample {id}: fluorescence and reflectance grids differ"
            )));
        }
        if let Some(c) = c_ppix {
            if !(c >= 0.0) {
                return Err(Error::Range {
                    op: "LabeledSample::new",
                    value: c,
                    lo: 0.0,
                    hi: f64::INFINITY,
                });
            }
        }
        Ok(Self {
            id,
            fluo,
            reflectance,
            c_ppix,
            domain,
            optics: None,
            saturated: false,
        })
    }

    pub fn grid(&self) -> &WavelengthGrid {
        self.fluo.grid()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_library(rng: &mut ChaCha8Rng, m: usize, k: usize) -> EndmemberLibrary {
        let grid = WavelengthGrid::uniform(400.0, 1.0, m).unwrap();
        let cols = (0..k)
            .map(|_| (0..m).map(|_| rng.random::<f64>()).collect())
            .collect();
        EndmemberLibrary::from_columns(grid, (0..k).map(|i| format!("e{i}")).collect(), cols).unwrap()
    }

    #[test]
    fn default_grid_shape() {
        let g = WavelengthGrid::default();
        assert_eq!(g.len(), 100);
        assert_eq!(g.first(), 450.0);
        assert_eq!(g.last(), 747.0);
    }

    #[test]
    fn grid_rejects_non_increasing() {
        assert!(WavelengthGrid::new(vec![450.0, 450.0]).is_err());
        assert!(WavelengthGrid::new(vec![-1.0, 2.0]).is_err());
        assert!(WavelengthGrid::new(vec![1.0, f64::NAN]).is_err());
    }

    #[test]
    fn resample_identity_and_midpoint() {
        let g = WavelengthGrid::default();
        let s = Spectrum::new(g.clone(), (0..100).map(|i| (i as f64).sin()).collect(), Role::Fluorescence).unwrap();
        assert_eq!(resample(&s, &g).unwrap(), s);

        let two = WavelengthGrid::new(vec![450.0, 453.0]).unwrap();
        let s = Spectrum::new(two, vec![0.0, 1.0], Role::Reflectance).unwrap();
        let q = WavelengthGrid::new(vec![451.5]).unwrap();
        let r = resample(&s, &q).unwrap();
        assert_eq!(r.values(), &[0.5]);
        assert_eq!(r.role(), Role::Reflectance);
    }

    #[test]
    fn resample_rejects_extrapolation() {
        let s = Spectrum::zeros(WavelengthGrid::default(), Role::Dark);
        let q = WavelengthGrid::new(vec![449.0, 500.0]).unwrap();
        assert!(matches!(resample(&s, &q), Err(Error::Range { .. })));
    }

    #[test]
    fn resample_matches_two_neighbour_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let src = WavelengthGrid::default();
        let vals: Vec<f64> = (0..100).map(|_| rng.random::<f64>()).collect();
        let s = Spectrum::new(src.clone(), vals.clone(), Role::Fluorescence).unwrap();
        let target = WavelengthGrid::uniform(451.0, 5.9, 50).unwrap();
        let out = resample(&s, &target).unwrap();
        let w = src.wavelengths();
        for (q, got) in target.wavelengths().iter().zip(out.values()) {
            let mut i = 0;
            while !(w[i] <= *q && *q <= w[i + 1]) {
                i += 1;
            }
            let t = (q - w[i]) / (w[i + 1] - w[i]);
            let want = vals[i] * (1.0 - t) + vals[i + 1] * t;
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn resample_exact_on_shared_points() {
        let src = WavelengthGrid::default();
        let s = Spectrum::new(src, (0..100).map(|i| (i * i) as f64).collect(), Role::Fluorescence).unwrap();
        let target = WavelengthGrid::uniform(450.0, 6.0, 50).unwrap();
        let out = resample(&s, &target).unwrap();
        for (i, v) in out.values().iter().enumerate() {
            assert_eq!(*v, ((2 * i) * (2 * i)) as f64);
        }
    }

    #[test]
    fn mix_basis_zero_and_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let lib = random_library(&mut rng, 100, 5);
        for k in 0..5 {
            let mut e = vec![0.0; 5];
            e[k] = 1.0;
            let s = mix(&lib, &AbundanceVector::new(e).unwrap()).unwrap();
            assert_eq!(s.values(), lib.column(k).as_slice());
            assert_eq!(s.role(), Role::Corrected);
        }
        let s = mix(&lib, &AbundanceVector::zeros(5)).unwrap();
        assert!(s.values().iter().all(|v| *v == 0.0));

        let z: Vec<f64> = (0..5).map(|_| rng.random::<f64>()).collect();
        let s = mix(&lib, &AbundanceVector::new(z.clone()).unwrap()).unwrap();
        for i in 0..100 {
            let mut acc = 0.0;
            for k in 0..5 {
                acc += lib.column(k)[i] * z[k];
            }
            assert!((s.values()[i] - acc).abs() < 1e-12);
        }
        assert!(mix(&lib, &AbundanceVector::zeros(4)).is_err());
    }

    #[test]
    fn mse_cases() {
        assert_eq!(mse(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(mse(&[1.0, 1.0], &[0.0, 0.0]).unwrap(), 1.0);
        assert!(mse(&[1.0], &[1.0, 2.0]).is_err());
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a: Vec<f64> = (0..100).map(|_| rng.random()).collect();
        let b: Vec<f64> = (0..100).map(|_| rng.random()).collect();
        let mut acc = 0.0;
        for i in 0..100 {
            acc += (a[i] - b[i]).powi(2);
        }
        assert!((mse(&a, &b).unwrap() - acc / 100.0).abs() < 1e-12);
    }

    #[test]
    fn pearson_cases() {
        let x = [1.0, 2.0, 4.0, 7.0];
        let neg: Vec<f64> = x.iter().map(|v| -v).collect();
        assert!((pearson_r(&x, &x).unwrap() - 1.0).abs() < 1e-15);
        assert!((pearson_r(&x, &neg).unwrap() + 1.0).abs() < 1e-15);
        assert!(matches!(
            pearson_r(&x, &[3.0; 4]),
            Err(Error::Degenerate { .. })
        ));
        assert!(pearson_r(&[1.0], &[1.0]).is_err());
    }

    #[test]
    fn pearson_matches_definitional_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x: Vec<f64> = (0..50).map(|_| rng.random()).collect();
        let y: Vec<f64> = x.iter().map(|v| v + rng.random::<f64>()).collect();
        let n = 50.0;
        let mx = x.iter().sum::<f64>() / n;
        let my = y.iter().sum::<f64>() / n;
        let cov = x.iter().zip(&y).map(|(a, b)| (a - mx) * (b - my)).sum::<f64>() / n;
        let sx = (x.iter().map(|a| (a - mx).powi(2)).sum::<f64>() / n).sqrt();
        let sy = (y.iter().map(|b| (b - my).powi(2)).sum::<f64>() / n).sqrt();
        assert!((pearson_r(&x, &y).unwrap() - cov / (sx * sy)).abs() < 1e-12);
    }

    #[test]
    fn normalize_cases() {
        let (z, deg) = normalize_l2(&AbundanceVector::new(vec![3.0, 4.0, 0.0, 0.0, 0.0]).unwrap());
        assert!(!deg);
        assert!((z.values()[0] - 0.6).abs() < 1e-15 && (z.values()[1] - 0.8).abs() < 1e-15);
        let e1 = AbundanceVector::new(vec![1.0, 0.0, 0.0]).unwrap();
        assert_eq!(normalize_l2(&e1).0, e1);
        let (z, deg) = normalize_l2(&AbundanceVector::zeros(5));
        assert!(deg);
        assert_eq!(z.values(), &[0.0; 5]);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let z = AbundanceVector::new((0..5).map(|_| rng.random::<f64>()).collect()).unwrap();
        assert!((normalize_l2(&z).0.l2_norm() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn library_rejects_dependent_columns() {
        let g = WavelengthGrid::uniform(400.0, 1.0, 4).unwrap();
        let c = vec![1.0, 2.0, 3.0, 4.0];
        let r = EndmemberLibrary::from_columns(g, vec!["a".into(), "b".into()], vec![c.clone(), c]);
        assert!(matches!(r, Err(Error::Degenerate { .. })));
    }

    #[test]
    fn library_csv_round_trip_and_resample() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let lib = random_library(&mut rng, 20, 3);
        let text = lib.to_csv_string();
        let back = EndmemberLibrary::from_csv_str(&text, lib.grid(), "mem").unwrap();
        assert_eq!(back.names(), lib.names());
        for (a, b) in back.matrix().iter().zip(lib.matrix()) {
            assert!((a - b).abs() < 1e-15);
        }
        let coarse = WavelengthGrid::uniform(401.0, 2.0, 9).unwrap();
        let r = EndmemberLibrary::from_csv_str(&text, &coarse, "mem").unwrap();
        assert_eq!(r.m(), 9);
        assert!(EndmemberLibrary::from_csv_str("nm,a\n1,2\n", lib.grid(), "mem").is_err());
    }

    #[test]
    fn sample_requires_shared_grid() {
        let a = Spectrum::zeros(WavelengthGrid::default(), Role::Fluorescence);
        let b = Spectrum::zeros(WavelengthGrid::uniform(450.0, 2.0, 100).unwrap(), Role::Reflectance);
        assert!(LabeledSample::new(0, a.clone(), b, None, Domain::Synthetic).is_err());
        assert!(LabeledSample::new(0, a.clone(), a.clone(), Some(-1.0), Domain::Synthetic).is_err());
        assert!(LabeledSample::new(0, a.clone(), a, Some(0.2), Domain::Phantom).is_ok());
    }
}
