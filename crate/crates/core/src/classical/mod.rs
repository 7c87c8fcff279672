//! Classical benchmark: dual-band reflectance correction followed by NNLS.
//!
//! The scale factor is `s = mean(ref over band1)^alpha · mean(ref over band2)^beta`
//! and the corrected spectrum is `fluo / s`. `beta` is calibrated on labeled
//! data by grid search.

mod nnls;

pub use nnls::{kkt_scale, kkt_violation, nnls, nnls_detailed, solve_nnls, NnlsSolution, KKT_TOLERANCE};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::spectral::{pearson_r, AbundanceVector, EndmemberLibrary, LabeledSample, Role, Spectrum, PPIX634};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DualBandParams {
    pub band1: (f64, f64),
    pub band2: (f64, f64),
    pub alpha: f64,
    pub beta: f64,
}

impl Default for DualBandParams {
    fn default() -> Self {
        Self {
            band1: (450.0, 480.0),
            band2: (610.0, 640.0),
            alpha: 1.0,
            beta: 0.0,
        }
    }
}

impl DualBandParams {
    pub fn validate(&self) -> Result<()> {
        for (lo, hi) in [self.band1, self.band2] {
            if !(lo < hi) {
                return Err(Error::Config(format!("band [{lo}, {hi}] must have lo < hi")));
            }
        }
        if !self.alpha.is_finite() || !self.beta.is_finite() {
            return Err(Error::Config("dual-band exponents must be finite".into()));
        }
        Ok(())
    }
}

fn band_mean(spec: &Spectrum, (lo, hi): (f64, f64)) -> Result<f64> {
    let (sum, n) = spec
        .grid()
        .wavelengths()
        .iter()
        .zip(spec.values())
        .filter(|(w, _)| **w >= lo && **w <= hi)
        .fold((0.0, 0usize), |(s, n), (_, v)| (s + v, n + 1));
    if n == 0 {
        return Err(Error::Config(format!("band [{lo}, {hi}] contains no grid samples")));
    }
    Ok(sum / n as f64)
}

/// Mean reflectance in both bands.
pub fn band_means(reflectance: &Spectrum, p: &DualBandParams) -> Result<(f64, f64)> {
    p.validate()?;
    let m1 = band_mean(reflectance, p.band1)?;
    let m2 = band_mean(reflectance, p.band2)?;
    if !(m1 > 0.0) || !(m2 > 0.0) {
        return Err(Error::Degenerate {
            op: "dual_band_scale",
            reason: format!("nonpositive band mean ({m1:e}, {m2:e})"),
        });
    }
    Ok((m1, m2))
}

pub fn dual_band_scale(reflectance: &Spectrum, p: &DualBandParams) -> Result<f64> {
    let (m1, m2) = band_means(reflectance, p)?;
    Ok(m1.powf(p.alpha) * m2.powf(p.beta))
}

pub fn dual_band_correct(fluo: &Spectrum, reflectance: &Spectrum, p: &DualBandParams) -> Result<Spectrum> {
    if !fluo.grid().same_as(reflectance.grid()) {
        return Err(Error::dim("dual_band_correct", fluo.len(), reflectance.len()));
    }
    let s = dual_band_scale(reflectance, p)?;
    Spectrum::new(
        fluo.grid().clone(),
        fluo.values().iter().map(|v| v / s).collect(),
        Role::Corrected,
    )
}

pub const BETA_GRID_MIN: f64 = -2.0;
pub const BETA_GRID_STEP: f64 = 0.05;
pub const BETA_GRID_POINTS: usize = 81;

pub fn beta_grid() -> Vec<f64> {
    (0..BETA_GRID_POINTS)
        .map(|i| (i as f64 - 40.0) * BETA_GRID_STEP)
        .collect()
}

/// Picks the best `(beta, r)` pair: highest R, then smaller |beta|, then the
/// earlier candidate.
pub fn select_beta(candidates: &[(f64, f64)]) -> Option<(f64, f64)> {
    let mut best: Option<(f64, f64)> = None;
    for &(beta, r) in candidates {
        if !r.is_finite() {
            continue;
        }
        best = match best {
            None => Some((beta, r)),
            Some((bb, br)) if r > br || (r == br && beta.abs() < bb.abs()) => Some((beta, r)),
            keep => keep,
        };
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Calibration {
    pub params: DualBandParams,
    pub r: f64,
}

/// Grid-searches `beta` to maximize the Pearson R between the NNLS PpIX634
/// abundance of corrected spectra and the labels.
pub fn calibrate_beta(train: &[LabeledSample], lib: &EndmemberLibrary, p0: &DualBandParams) -> Result<Calibration> {
    p0.validate()?;
    let mut levels: Vec<f64> = train.iter().filter_map(|s| s.c_ppix).collect();
    levels.sort_by(f64::total_cmp);
    levels.dedup();
    if levels.len() < 2 {
        return Err(Error::Config("calibrate_beta needs at least two distinct c_ppix labels".into()));
    }
    // NNLS is positively homogeneous, so nnls(fluo / s) = nnls(fluo) / s and a
    // single solve per sample serves every beta.
    let rows: Vec<Option<(f64, f64, f64, f64)>> = train
        .par_iter()
        .map(|s| -> Result<Option<(f64, f64, f64, f64)>> {
            let Some(c) = s.c_ppix else { return Ok(None) };
            let Ok((m1, m2)) = band_means(&s.reflectance, p0) else { return Ok(None) };
            let z = nnls(lib, &s.fluo)?;
            Ok(Some((z.ppix634(), m1, m2, c)))
        })
        .collect::<Result<_>>()?;
    let rows: Vec<(f64, f64, f64, f64)> = rows.into_iter().flatten().collect();
    if rows.len() < 2 {
        return Err(Error::Degenerate {
            op: "calibrate_beta",
            reason: "all reflectances are degenerate".into(),
        });
    }
    let labels: Vec<f64> = rows.iter().map(|r| r.3).collect();
    let candidates: Vec<(f64, f64)> = beta_grid()
        .into_iter()
        .map(|beta| {
            let pred: Vec<f64> = rows
                .iter()
                .map(|&(a, m1, m2, _)| a / (m1.powf(p0.alpha) * m2.powf(beta)))
                .collect();
            (beta, pearson_r(&pred, &labels).unwrap_or(f64::NAN))
        })
        .collect();
    let (beta, r) = select_beta(&candidates).ok_or_else(|| Error::Degenerate {
        op: "calibrate_beta",
        reason: "no beta produced a defined correlation".into(),
    })?;
    Ok(Calibration {
        params: DualBandParams { beta, ..*p0 },
        r,
    })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SampleFlags {
    pub degenerate_reflectance: bool,
    pub saturated: bool,
}

impl SampleFlags {
    pub fn to_field(&self) -> String {
        let mut parts = Vec::new();
        if self.degenerate_reflectance {
            parts.push("degenerate");
        }
        if self.saturated {
            parts.push("saturated");
        }
        parts.join("|")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BaselineResult {
    pub id: u64,
    pub z: AbundanceVector,
    /// ||B z - corrected||₂; zero for degenerate samples.
    pub residual: f64,
    pub corrected: Option<Spectrum>,
    pub flags: SampleFlags,
}

pub fn unmix_one(sample: &LabeledSample, lib: &EndmemberLibrary, p: &DualBandParams) -> Result<BaselineResult> {
    let flags = SampleFlags {
        saturated: sample.saturated,
        ..Default::default()
    };
    match dual_band_correct(&sample.fluo, &sample.reflectance, p) {
        Ok(corrected) => {
            let (z, sol) = nnls_detailed(lib, &corrected)?;
            Ok(BaselineResult {
                id: sample.id,
                z,
                residual: sol.residual,
                corrected: Some(corrected),
                flags,
            })
        }
        Err(Error::Degenerate { .. }) => Ok(BaselineResult {
            id: sample.id,
            z: AbundanceVector::zeros(lib.k()),
            residual: 0.0,
            corrected: None,
            flags: SampleFlags {
                degenerate_reflectance: true,
                ..flags
            },
        }),
        Err(e) => Err(e),
    }
}

/// Dual-band correction then NNLS for every sample, in input order.
pub fn unmix_baseline(samples: &[LabeledSample], lib: &EndmemberLibrary, p: &DualBandParams) -> Result<Vec<BaselineResult>> {
    samples.par_iter().map(|s| unmix_one(s, lib, p)).collect()
}

/// `id,c_ppix,abundance_<name>...,residual,flags`
pub fn baseline_report_csv(results: &[BaselineResult], samples: &[LabeledSample], lib: &EndmemberLibrary) -> String {
    let mut out = String::from("id,c_ppix");
    for n in lib.names() {
        out.push_str(",abundance_");
        out.push_str(&n.to_lowercase());
    }
    out.push_str(",residual,flags\n");
    for (r, s) in results.iter().zip(samples) {
        out.push_str(&r.id.to_string());
        out.push(',');
        if let Some(c) = s.c_ppix {
            out.push_str(&c.to_string());
        }
        for v in r.z.values() {
            out.push(',');
            out.push_str(&v.to_string());
        }
        out.push(',');
        out.push_str(&r.residual.to_string());
        out.push(',');
        out.push_str(&r.flags.to_field());
        out.push('\n');
    }
    out
}

/// PpIX634 abundance column of a result set.
pub fn ppix_predictions(results: &[BaselineResult]) -> Vec<f64> {
    results.iter().map(|r| r.z.values()[PPIX634]).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simulate::default_library;
    use crate::spectral::{mix, Domain, WavelengthGrid};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn constant(grid: &WavelengthGrid, v: f64, role: Role) -> Spectrum {
        Spectrum::new(grid.clone(), vec![v; grid.len()], role).unwrap()
    }

    #[test]
    fn scale_of_unit_and_constant_reflectance() {
        let g = WavelengthGrid::default();
        let one = constant(&g, 1.0, Role::Reflectance);
        for (a, b) in [(1.0, 0.0), (0.3, -1.7), (2.0, 2.0)] {
            let p = DualBandParams { alpha: a, beta: b, ..Default::default() };
            assert_eq!(dual_band_scale(&one, &p).unwrap(), 1.0);
        }
        let c = constant(&g, 3.5, Role::Reflectance);
        let p = DualBandParams { alpha: 1.0, beta: 0.0, ..Default::default() };
        assert_eq!(dual_band_scale(&c, &p).unwrap(), 3.5);
    }

    #[test]
    fn scale_matches_direct_oracle() {
        let g = WavelengthGrid::default();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let vals: Vec<f64> = (0..100).map(|_| 0.1 + rng.random::<f64>()).collect();
        let r = Spectrum::new(g.clone(), vals.clone(), Role::Reflectance).unwrap();
        let p = DualBandParams { alpha: 0.7, beta: 0.3, ..Default::default() };
        let (mut s1, mut n1, mut s2, mut n2) = (0.0, 0.0, 0.0, 0.0);
        for (i, w) in g.wavelengths().iter().enumerate() {
            if (450.0..=480.0).contains(w) {
                s1 += vals[i];
                n1 += 1.0;
            }
            if (610.0..=640.0).contains(w) {
                s2 += vals[i];
                n2 += 1.0;
            }
        }
        let want = (s1 / n1).powf(0.7) * (s2 / n2).powf(0.3);
        assert!((dual_band_scale(&r, &p).unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn degenerate_reflectance() {
        let g = WavelengthGrid::default();
        let z = constant(&g, 0.0, Role::Reflectance);
        assert!(matches!(
            dual_band_scale(&z, &DualBandParams::default()),
            Err(Error::Degenerate { .. })
        ));
        let bad = DualBandParams { band1: (100.0, 200.0), ..Default::default() };
        assert!(matches!(dual_band_scale(&constant(&g, 1.0, Role::Reflectance), &bad), Err(Error::Config(_))));
    }

    #[test]
    fn correct_identity_and_scalar_attenuation() {
        let g = WavelengthGrid::default();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let fluo = Spectrum::new(g.clone(), (0..100).map(|_| rng.random::<f64>()).collect(), Role::Fluorescence).unwrap();
        let one = constant(&g, 1.0, Role::Reflectance);
        let p = DualBandParams { beta: 0.4, alpha: 0.6, ..Default::default() };
        let c = dual_band_correct(&fluo, &one, &p).unwrap();
        assert_eq!(c.values(), fluo.values());
        assert_eq!(c.role(), Role::Corrected);

        let a = 0.37;
        let att = dual_band_correct(&fluo.scaled(a), &one.scaled(a), &p).unwrap();
        for (x, y) in att.values().iter().zip(fluo.values()) {
            assert!((x - y).abs() < 1e-10);
        }
    }

    #[test]
    fn correction_is_scale_equivariant() {
        let g = WavelengthGrid::default();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let fluo = Spectrum::new(g.clone(), (0..100).map(|_| rng.random::<f64>()).collect(), Role::Fluorescence).unwrap();
        let refl = Spectrum::new(g.clone(), (0..100).map(|_| 0.2 + rng.random::<f64>()).collect(), Role::Reflectance).unwrap();
        let p = DualBandParams { alpha: 1.0, beta: -0.35, ..Default::default() };
        let base = dual_band_correct(&fluo, &refl, &p).unwrap();
        let a = 2.7;
        let f_scaled = dual_band_correct(&fluo.scaled(a), &refl, &p).unwrap();
        let r_scaled = dual_band_correct(&fluo, &refl.scaled(a), &p).unwrap();
        let k = a.powf(-p.alpha - p.beta);
        for i in 0..100 {
            assert!((f_scaled.values()[i] - a * base.values()[i]).abs() < 1e-10);
            assert!((r_scaled.values()[i] - k * base.values()[i]).abs() < 1e-10);
        }
    }

    fn scalar_attenuation_set(lib: &EndmemberLibrary) -> Vec<LabeledSample> {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let g = lib.grid().clone();
        let mut out = Vec::new();
        for (i, &c) in [0.0, 0.2, 0.6, 1.25, 2.5].iter().enumerate() {
            for j in 0..6 {
                let z = AbundanceVector::new(vec![c, 0.1 * c, 0.2, 0.3, 0.1]).unwrap();
                let truth = mix(lib, &z).unwrap();
                let a = (rng.random_range(-1.0..1.0f64)).exp();
                let refl = Spectrum::new(g.clone(), vec![a; g.len()], Role::Reflectance).unwrap();
                out.push(
                    LabeledSample::new((i * 6 + j) as u64, truth.scaled(a).with_role(Role::Fluorescence), refl, Some(c), Domain::Synthetic)
                        .unwrap(),
                );
            }
        }
        out
    }

    #[test]
    fn calibration_on_scalar_attenuation_picks_zero() {
        let lib = default_library(&WavelengthGrid::default()).unwrap();
        let data = scalar_attenuation_set(&lib);
        let cal = calibrate_beta(&data, &lib, &DualBandParams::default()).unwrap();
        assert_eq!(cal.params.beta, 0.0);
        assert!(cal.r >= 0.999);
        let res = unmix_baseline(&data, &lib, &cal.params).unwrap();
        let pred = ppix_predictions(&res);
        let labels: Vec<f64> = data.iter().map(|s| s.c_ppix.unwrap()).collect();
        assert!(pearson_r(&pred, &labels).unwrap() >= 0.999);
        // zero-concentration abundances sit below every top-level abundance
        let max_zero = pred[..6].iter().cloned().fold(f64::MIN, f64::max);
        let min_top = pred[24..].iter().cloned().fold(f64::MAX, f64::min);
        assert!(max_zero <= min_top);
    }

    #[test]
    fn calibration_needs_two_levels() {
        let lib = default_library(&WavelengthGrid::default()).unwrap();
        let data: Vec<_> = scalar_attenuation_set(&lib).into_iter().take(6).collect();
        assert!(matches!(calibrate_beta(&data, &lib, &DualBandParams::default()), Err(Error::Config(_))));
        let mut degenerate = scalar_attenuation_set(&lib);
        for s in degenerate.iter_mut() {
            s.reflectance = Spectrum::zeros(lib.grid().clone(), Role::Reflectance);
        }
        assert!(matches!(
            calibrate_beta(&degenerate, &lib, &DualBandParams::default()),
            Err(Error::Degenerate { .. })
        ));
    }

    #[test]
    fn beta_tie_break() {
        assert_eq!(select_beta(&[(-0.05, 0.9), (0.05, 0.9)]), Some((-0.05, 0.9)));
        assert_eq!(select_beta(&[(-0.1, 0.9), (0.05, 0.9)]), Some((0.05, 0.9)));
        assert_eq!(select_beta(&[(-0.1, 0.95), (0.0, 0.9)]), Some((-0.1, 0.95)));
        assert_eq!(select_beta(&[(0.0, f64::NAN)]), None);
        let grid = beta_grid();
        assert_eq!(grid.len(), 81);
        assert_eq!(grid[0], -2.0);
        assert_eq!(grid[40], 0.0);
        assert_eq!(grid[80], 2.0);
    }

    #[test]
    fn degenerate_sample_is_flagged() {
        let lib = default_library(&WavelengthGrid::default()).unwrap();
        let mut data = scalar_attenuation_set(&lib);
        data[3].reflectance = Spectrum::zeros(lib.grid().clone(), Role::Reflectance);
        let res = unmix_baseline(&data, &lib, &DualBandParams::default()).unwrap();
        assert!(res[3].flags.degenerate_reflectance);
        assert!(res[3].z.values().iter().all(|v| *v == 0.0));
        let csv = baseline_report_csv(&res, &data, &lib);
        assert!(csv.starts_with("id,c_ppix,abundance_ppix634,abundance_ppix620,abundance_lipofuscin,abundance_nadh,abundance_flavins,residual,flags\n"));
        assert!(csv.lines().nth(4).unwrap().ends_with(",degenerate"));
    }
}
