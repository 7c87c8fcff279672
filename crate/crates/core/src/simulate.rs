//! Synthetic endmember libraries and labeled phantom-style datasets.
//!
//! The forward model: abundances are mixed into a true emission spectrum,
//! which is then attenuated by wavelength-dependent absorption and scattering
//! (power laws anchored at 405 nm and 635 nm) and a geometric factor `g`. The
//! paired white-light spectrum sees the same emission-path attenuation but not
//! the excitation-path loss, which is what makes dual-band correction
//! imperfect and gives the networks something to learn.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::spectral::{
    mix, AbundanceVector, Domain, EndmemberLibrary, LabeledSample, OpticsMeta, Role, Spectrum,
    WavelengthGrid,
};

/// Phantom PpIX ladder in µg/ml.
pub const PHANTOM_LEVELS: [f64; 5] = [0.0, 0.2, 0.6, 1.25, 2.5];
/// Pig-brain homogenate ladder in pmol/mg.
pub const PBH_LEVELS: [f64; 7] = [0.0, 0.5, 0.75, 1.0, 2.0, 3.0, 4.0];
pub const PHANTOM_MU_A_405: [f64; 3] = [18.0, 42.0, 60.0];
pub const PHANTOM_MU_S_635: [f64; 3] = [8.7, 11.6, 14.5];

pub const DEFAULT_ENDMEMBERS: [&str; 5] = ["PpIX634", "PpIX620", "lipofuscin", "NADH", "flavins"];

fn gaussian(x: f64, mu: f64, sigma: f64) -> f64 {
    (-0.5 * ((x - mu) / sigma).powi(2)).exp()
}

/// Parametric five-component library: PpIX634, PpIX620, lipofuscin, NADH,
/// flavins, each peak-normalized.
pub fn default_library(grid: &WavelengthGrid) -> Result<EndmemberLibrary> {
    if grid.first() > 460.0 || grid.last() < 704.0 {
        return Err(Error::Range {
            op: "default_library",
            value: if grid.first() > 460.0 { grid.first() } else { grid.last() },
            lo: 460.0,
            hi: 704.0,
        });
    }
    let w = grid.wavelengths();
    let col = |f: &dyn Fn(f64) -> f64| w.iter().map(|&x| f(x)).collect::<Vec<f64>>();
    let columns = vec![
        col(&|x| gaussian(x, 634.0, 12.0) + 0.25 * gaussian(x, 704.0, 15.0)),
        col(&|x| gaussian(x, 620.0, 12.0)),
        col(&|x| gaussian(x, 570.0, 60.0)),
        col(&|x| gaussian(x, 460.0, 45.0)),
        col(&|x| gaussian(x, 525.0, 40.0)),
    ];
    EndmemberLibrary::from_columns(
        grid.clone(),
        DEFAULT_ENDMEMBERS.iter().map(|s| s.to_string()).collect(),
        columns,
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OpticsConfig {
    /// Absorption coefficient at 405 nm, cm⁻¹.
    pub mu_a_405: f64,
    /// Reduced scattering coefficient at 635 nm, cm⁻¹.
    pub mu_s_635: f64,
    pub absorption_exponent: f64,
    pub scattering_exponent: f64,
    /// Effective emission path length, cm.
    pub path_cm: f64,
    /// Effective excitation path length, cm.
    pub excitation_path_cm: f64,
}

impl OpticsConfig {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            self.mu_a_405,
            self.mu_s_635,
            self.absorption_exponent,
            self.scattering_exponent,
            self.path_cm,
            self.excitation_path_cm,
        ];
        if fields.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Config(format!("optics parameters must be finite and ≥ 0: {self:?}")));
        }
        Ok(())
    }

    pub fn mu_a(&self, nm: f64) -> f64 {
        self.mu_a_405 * (405.0 / nm).powf(self.absorption_exponent)
    }

    pub fn mu_s(&self, nm: f64) -> f64 {
        self.mu_s_635 * (nm / 635.0).powf(-self.scattering_exponent)
    }

    /// The same optics with absorption and scattering scaled.
    pub fn jittered(&self, absorption: f64, scattering: f64) -> Self {
        Self {
            mu_a_405: self.mu_a_405 * absorption,
            mu_s_635: self.mu_s_635 * scattering,
            ..*self
        }
    }
}

/// The 3×3 phantom grid over absorption and scattering, absorption-major.
pub fn phantom_presets() -> Vec<OpticsConfig> {
    let mut out = Vec::with_capacity(9);
    for &mu_a_405 in &PHANTOM_MU_A_405 {
        for &mu_s_635 in &PHANTOM_MU_S_635 {
            out.push(OpticsConfig {
                mu_a_405,
                mu_s_635,
                absorption_exponent: 1.0,
                scattering_exponent: 1.2,
                path_cm: 0.02,
                excitation_path_cm: 0.02,
            });
        }
    }
    out
}

/// Attenuates a true emission spectrum; returns `(fluorescence, reflectance)`.
pub fn apply_attenuation(truth: &Spectrum, optics: &OpticsConfig, g: f64) -> Result<(Spectrum, Spectrum)> {
    if !(g > 0.0) || !g.is_finite() {
        return Err(Error::Range {
            op: "apply_attenuation",
            value: g,
            lo: f64::MIN_POSITIVE,
            hi: f64::INFINITY,
        });
    }
    optics.validate()?;
    let excitation = (-optics.mu_a_405 * optics.excitation_path_cm).exp();
    let mut fluo = Vec::with_capacity(truth.len());
    let mut refl = Vec::with_capacity(truth.len());
    for (&nm, &v) in truth.grid().wavelengths().iter().zip(truth.values()) {
        let emission = (-(optics.mu_a(nm) + optics.mu_s(nm)) * optics.path_cm).exp();
        fluo.push(g * excitation * emission * v);
        refl.push(g * emission);
    }
    Ok((
        Spectrum::new(truth.grid().clone(), fluo, Role::Fluorescence)?,
        Spectrum::new(truth.grid().clone(), refl, Role::Reflectance)?,
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseConfig {
    pub read_sigma: f64,
    pub shot_coeff: f64,
}

impl NoiseConfig {
    pub const OFF: NoiseConfig = NoiseConfig {
        read_sigma: 0.0,
        shot_coeff: 0.0,
    };

    pub fn is_off(&self) -> bool {
        self.read_sigma == 0.0 && self.shot_coeff == 0.0
    }

    fn sigma(&self, signal: f64) -> f64 {
        self.read_sigma + self.shot_coeff * signal.max(0.0).sqrt()
    }
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self {
            read_sigma: 0.002,
            shot_coeff: 0.004,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SaturationConfig {
    pub probability: f64,
    /// Reflectance values above this are clipped.
    pub cap: f64,
}

impl SaturationConfig {
    pub const OFF: SaturationConfig = SaturationConfig {
        probability: 0.0,
        cap: f64::MAX,
    };
}

impl Default for SaturationConfig {
    fn default() -> Self {
        Self {
            probability: 0.1,
            cap: 0.6,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SimConfig {
    pub library: EndmemberLibrary,
    pub concentration_levels: Vec<f64>,
    pub optics_presets: Vec<OpticsConfig>,
    pub samples_per_cell: usize,
    pub noise: NoiseConfig,
    pub geometry_range: (f64, f64),
    pub saturation: SaturationConfig,
    /// Relative ± jitter applied to each preset's absorption and scattering.
    pub optics_jitter: f64,
    pub domain: Domain,
    pub seed: u64,
}

impl SimConfig {
    /// Five phantom levels × nine optics presets on the default grid.
    pub fn phantom(samples_per_cell: usize, seed: u64) -> Self {
        let library = default_library(&WavelengthGrid::default()).expect("default grid covers the library");
        Self {
            library,
            concentration_levels: PHANTOM_LEVELS.to_vec(),
            optics_presets: phantom_presets(),
            samples_per_cell,
            noise: NoiseConfig::default(),
            geometry_range: (0.5, 2.0),
            saturation: SaturationConfig::default(),
            optics_jitter: 0.1,
            domain: Domain::Phantom,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.concentration_levels.is_empty() {
            return Err(Error::Config("concentration_levels is empty".into()));
        }
        if self.optics_presets.is_empty() {
            return Err(Error::Config("optics_presets is empty".into()));
        }
        if self.concentration_levels.iter().any(|c| !(*c >= 0.0) || !c.is_finite()) {
            return Err(Error::Config("concentration levels must be finite and ≥ 0".into()));
        }
        if self.samples_per_cell == 0 {
            return Err(Error::Config("samples_per_cell must be ≥ 1".into()));
        }
        let (lo, hi) = self.geometry_range;
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return Err(Error::Config(format!("geometry_range must satisfy 0 < min ≤ max, got {lo}..{hi}")));
        }
        if !(0.0..=1.0).contains(&self.saturation.probability) {
            return Err(Error::Config("saturation.probability must lie in [0, 1]".into()));
        }
        if !(0.0..1.0).contains(&self.optics_jitter) {
            return Err(Error::Config("optics_jitter must lie in [0, 1)".into()));
        }
        if self.noise.read_sigma < 0.0 || self.noise.shot_coeff < 0.0 {
            return Err(Error::Config("noise parameters must be ≥ 0".into()));
        }
        for o in &self.optics_presets {
            o.validate()?;
        }
        Ok(())
    }

    pub fn cell_count(&self) -> usize {
        self.concentration_levels.len() * self.optics_presets.len()
    }
}

/// Ground truth for a generated sample, kept alongside the measured pair.
#[derive(Debug, Clone)]
pub struct SimulatedSample {
    pub sample: LabeledSample,
    pub abundances: AbundanceVector,
    pub truth: Spectrum,
    pub optics: OpticsConfig,
    pub g: f64,
}

fn add_noise(values: &mut [f64], noise: &NoiseConfig, rng: &mut ChaCha8Rng) {
    if noise.is_off() {
        return;
    }
    for v in values.iter_mut() {
        let sigma = noise.sigma(*v);
        if sigma > 0.0 {
            let n: f64 = Normal::new(0.0, sigma).expect("sigma is positive").sample(rng);
            *v += n;
        }
    }
}

fn cell_rng(seed: u64, cell: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(cell as u64 + 1);
    rng
}

/// Generates every (level, preset) cell, keeping ground truth.
pub fn simulate_with_truth(cfg: &SimConfig) -> Result<Vec<SimulatedSample>> {
    cfg.validate()?;
    let n_presets = cfg.optics_presets.len();
    let cells: Vec<(usize, f64, OpticsConfig)> = cfg
        .concentration_levels
        .iter()
        .enumerate()
        .flat_map(|(li, &c)| {
            cfg.optics_presets
                .iter()
                .enumerate()
                .map(move |(pi, o)| (li * n_presets + pi, c, *o))
        })
        .collect();
    let per_cell: Vec<Vec<SimulatedSample>> = cells
        .par_iter()
        .map(|&(cell, c, preset)| simulate_cell(cfg, cell, c, &preset))
        .collect::<Result<_>>()?;
    Ok(per_cell.into_iter().flatten().collect())
}

fn simulate_cell(cfg: &SimConfig, cell: usize, level: f64, preset: &OpticsConfig) -> Result<Vec<SimulatedSample>> {
    let mut rng = cell_rng(cfg.seed, cell);
    let k = cfg.library.k();
    let grid = cfg.library.grid().clone();
    let (g_lo, g_hi) = (cfg.geometry_range.0.ln(), cfg.geometry_range.1.ln());
    let mut out = Vec::with_capacity(cfg.samples_per_cell);
    for i in 0..cfg.samples_per_cell {
        let mut z = vec![0.0; k];
        z[0] = level;
        let rho = rng.random_range(0.0..=0.3);
        if k > 1 {
            z[1] = rho * level;
        }
        for v in z.iter_mut().skip(2) {
            *v = rng.random_range(0.05..=0.4);
        }
        let abundances = AbundanceVector::new(z)?;
        let truth = mix(&cfg.library, &abundances)?;
        let j = cfg.optics_jitter;
        let (ja, js) = if j > 0.0 {
            (rng.random_range(1.0 - j..=1.0 + j), rng.random_range(1.0 - j..=1.0 + j))
        } else {
            (1.0, 1.0)
        };
        let optics = preset.jittered(ja, js);
        let g = if g_hi > g_lo { rng.random_range(g_lo..=g_hi).exp() } else { cfg.geometry_range.0 };
        let (fluo, refl) = apply_attenuation(&truth, &optics, g)?;
        let mut f = fluo.into_values();
        let mut r = refl.into_values();
        add_noise(&mut f, &cfg.noise, &mut rng);
        add_noise(&mut r, &cfg.noise, &mut rng);
        let mut saturated = false;
        if cfg.saturation.probability > 0.0 && rng.random_bool(cfg.saturation.probability) {
            for v in r.iter_mut() {
                if *v > cfg.saturation.cap {
                    *v = cfg.saturation.cap;
                    saturated = true;
                }
            }
        }
        for v in f.iter_mut().chain(r.iter_mut()) {
            *v = v.max(0.0);
        }
        let id = (cell * cfg.samples_per_cell + i) as u64;
        let mut sample = LabeledSample::new(
            id,
            Spectrum::new(grid.clone(), f, Role::Fluorescence)?,
            Spectrum::new(grid.clone(), r, Role::Reflectance)?,
            Some(level),
            cfg.domain,
        )?;
        sample.optics = Some(OpticsMeta {
            mu_a_405: optics.mu_a_405,
            mu_s_635: optics.mu_s_635,
            geometric_factor: g,
        });
        sample.saturated = saturated;
        out.push(SimulatedSample {
            sample,
            abundances,
            truth,
            optics,
            g,
        });
    }
    Ok(out)
}

pub fn simulate_dataset(cfg: &SimConfig) -> Result<Vec<LabeledSample>> {
    Ok(simulate_with_truth(cfg)?.into_iter().map(|s| s.sample).collect())
}

/// Random nonnegative combinations of the endmembers, z ~ U[0,1]^K, with
/// optional additive Gaussian noise of standard deviation `noise_sigma`.
pub fn augment_linear(lib: &EndmemberLibrary, n: usize, seed: u64, noise_sigma: f64) -> Result<Vec<Spectrum>> {
    Ok(augment_linear_labeled(lib, n, seed, noise_sigma)?.into_iter().map(|(s, _)| s).collect())
}

/// [`augment_linear`] keeping the abundances each spectrum was mixed from.
pub fn augment_linear_labeled(
    lib: &EndmemberLibrary,
    n: usize,
    seed: u64,
    noise_sigma: f64,
) -> Result<Vec<(Spectrum, AbundanceVector)>> {
    if n == 0 {
        return Err(Error::Config("augment_linear needs n ≥ 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = if noise_sigma > 0.0 {
        Some(Normal::new(0.0, noise_sigma).map_err(|e| Error::Config(e.to_string()))?)
    } else {
        None
    };
    (0..n)
        .map(|_| {
            let z = AbundanceVector::new((0..lib.k()).map(|_| rng.random::<f64>()).collect())?;
            let s = mix(lib, &z)?;
            let v = match &noise {
                None => s.into_values(),
                Some(d) => s.values().iter().map(|x| x + d.sample(&mut rng)).collect(),
            };
            Ok((Spectrum::new(lib.grid().clone(), v, Role::Corrected)?, z))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quiet_cfg() -> SimConfig {
        let mut cfg = SimConfig::phantom(3, 7);
        cfg.noise = NoiseConfig::OFF;
        cfg.saturation = SaturationConfig::OFF;
        cfg
    }

    #[test]
    fn library_peaks_and_normalization() {
        let grid = WavelengthGrid::default();
        let lib = default_library(&grid).unwrap();
        assert_eq!(lib.k(), 5);
        assert_eq!(lib.names()[0], "PpIX634");
        let col = lib.column(0);
        let argmax = (0..col.len()).max_by(|&a, &b| col[a].total_cmp(&col[b])).unwrap();
        assert!((grid.wavelengths()[argmax] - 634.0).abs() <= grid.mean_step());
        for k in 0..5 {
            assert_eq!(lib.column(k).iter().cloned().fold(f64::MIN, f64::max), 1.0);
        }
        assert!(lib.normalized_smallest_singular_value() > 1e-6);
    }

    #[test]
    fn library_gram_determinant_is_nonzero() {
        // independent check via the determinant of the normalized Gram matrix
        let lib = default_library(&WavelengthGrid::default()).unwrap();
        let cols: Vec<Vec<f64>> = (0..5)
            .map(|k| {
                let c = lib.column(k);
                let n = c.iter().map(|v| v * v).sum::<f64>().sqrt();
                c.iter().map(|v| v / n).collect()
            })
            .collect();
        let mut g = [[0.0f64; 5]; 5];
        for i in 0..5 {
            for j in 0..5 {
                g[i][j] = cols[i].iter().zip(&cols[j]).map(|(a, b)| a * b).sum();
            }
        }
        // Gaussian elimination determinant
        let mut det = 1.0;
        for c in 0..5 {
            let p = (c..5).max_by(|&a, &b| g[a][c].abs().total_cmp(&g[b][c].abs())).unwrap();
            g.swap(c, p);
            if p != c {
                det = -det;
            }
            det *= g[c][c];
            for r in c + 1..5 {
                let f = g[r][c] / g[c][c];
                for cc in c..5 {
                    g[r][cc] -= f * g[c][cc];
                }
            }
        }
        // det(G) = Π σ_i², and every σ_i ≤ √5, so σ_min² ≥ det / 5⁴
        assert!(det / 625.0 > 1e-12, "gram determinant {det}");
    }

    #[test]
    fn library_requires_coverage() {
        let narrow = WavelengthGrid::uniform(500.0, 3.0, 50).unwrap();
        assert!(matches!(default_library(&narrow), Err(Error::Range { .. })));
    }

    #[test]
    fn attenuation_identity_and_linearity() {
        let grid = WavelengthGrid::default();
        let truth = Spectrum::new(grid.clone(), (0..100).map(|i| i as f64 * 0.01).collect(), Role::Corrected).unwrap();
        let zero = OpticsConfig {
            mu_a_405: 0.0,
            mu_s_635: 0.0,
            absorption_exponent: 1.0,
            scattering_exponent: 1.2,
            path_cm: 0.1,
            excitation_path_cm: 0.05,
        };
        let (f, r) = apply_attenuation(&truth, &zero, 1.0).unwrap();
        assert_eq!(f.values(), truth.values());
        assert!(r.values().iter().all(|v| *v == 1.0));

        let o = phantom_presets()[4];
        let (f1, r1) = apply_attenuation(&truth, &o, 1.0).unwrap();
        let (f2, r2) = apply_attenuation(&truth, &o, 2.0).unwrap();
        for i in 0..100 {
            assert_eq!(f2.values()[i], 2.0 * f1.values()[i]);
            assert_eq!(r2.values()[i], 2.0 * r1.values()[i]);
        }
        assert!(apply_attenuation(&truth, &o, 0.0).is_err());
    }

    #[test]
    fn attenuation_closed_form_at_634() {
        let grid = WavelengthGrid::new(vec![634.0]).unwrap();
        let truth = Spectrum::new(grid, vec![1.0], Role::Corrected).unwrap();
        let o = OpticsConfig {
            mu_a_405: 18.0,
            mu_s_635: 8.7,
            absorption_exponent: 1.0,
            scattering_exponent: 1.2,
            path_cm: 0.1,
            excitation_path_cm: 0.05,
        };
        let (f, r) = apply_attenuation(&truth, &o, 1.0).unwrap();
        // µa(634) = 18·405/634 = 11.498422712933754
        // µs'(634) = 8.7·(634/635)^-1.2 = 8.71646947317914
        let mu_a = 18.0 * 405.0 / 634.0;
        let mu_s = 8.7 * (634.0f64 / 635.0).powf(-1.2);
        let want_r = (-(mu_a + mu_s) * 0.1).exp();
        let want_f = (-18.0f64 * 0.05).exp() * want_r;
        assert!((r.values()[0] - want_r).abs() < 1e-12);
        assert!((f.values()[0] - want_f).abs() < 1e-12);
        // frozen from an independent evaluation
        assert!((r.values()[0] - 0.13245805911943392).abs() < 1e-12);
        assert!((f.values()[0] - 0.05385342802608841).abs() < 1e-12);
    }

    #[test]
    fn dataset_has_45_cells_and_intact_labels() {
        let cfg = SimConfig::phantom(2, 42);
        assert_eq!(cfg.cell_count(), 45);
        let data = simulate_with_truth(&cfg).unwrap();
        assert_eq!(data.len(), 90);
        for (i, s) in data.iter().enumerate() {
            let cell = i / 2;
            assert_eq!(s.sample.c_ppix, Some(PHANTOM_LEVELS[cell / 9]));
            if s.sample.c_ppix == Some(0.0) {
                assert_eq!(s.abundances.values()[0], 0.0);
                assert_eq!(s.abundances.values()[1], 0.0);
            }
            assert!(s.sample.fluo.values().iter().all(|v| *v >= 0.0));
        }
    }

    #[test]
    fn dataset_is_deterministic() {
        let cfg = SimConfig::phantom(3, 11);
        let a = simulate_dataset(&cfg).unwrap();
        let b = simulate_dataset(&cfg).unwrap();
        assert_eq!(a, b);
        let mut other = cfg.clone();
        other.seed = 12;
        assert_ne!(a, simulate_dataset(&other).unwrap());
    }

    #[test]
    fn noise_free_sample_recomposes_by_hand() {
        let mut cfg = quiet_cfg();
        cfg.optics_presets.truncate(1);
        cfg.geometry_range = (1.0, 1.0);
        let data = simulate_with_truth(&cfg).unwrap();
        let s = &data[4];
        assert_eq!(s.g, 1.0);
        let truth = mix(&cfg.library, &s.abundances).unwrap();
        let (f, r) = apply_attenuation(&truth, &s.optics, 1.0).unwrap();
        assert_eq!(s.sample.fluo.values(), f.values());
        assert_eq!(s.sample.reflectance.values(), r.values());
    }

    #[test]
    fn fluorescence_at_634_increases_with_concentration() {
        let mut cfg = quiet_cfg();
        cfg.optics_presets.truncate(1);
        cfg.optics_jitter = 0.0;
        cfg.geometry_range = (1.0, 1.0);
        let lib = cfg.library.clone();
        // Fix the non-PpIX abundances so only the level varies.
        let optics = cfg.optics_presets[0];
        let mut last = f64::NEG_INFINITY;
        for &c in &PHANTOM_LEVELS {
            let z = AbundanceVector::new(vec![c, 0.1 * c, 0.2, 0.2, 0.2]).unwrap();
            let (f, _) = apply_attenuation(&mix(&lib, &z).unwrap(), &optics, 1.0).unwrap();
            let v = f.at_nm(634.0);
            assert!(v > last);
            last = v;
        }
        // and the simulator's cell means follow the same order
        let data = simulate_with_truth(&cfg).unwrap();
        let per_level: Vec<f64> = data
            .chunks(cfg.samples_per_cell)
            .map(|c| c.iter().map(|s| s.sample.fluo.at_nm(634.0)).sum::<f64>())
            .collect();
        assert!(per_level.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn saturation_is_flagged_and_clipped() {
        let mut cfg = SimConfig::phantom(4, 3);
        cfg.saturation = SaturationConfig {
            probability: 1.0,
            cap: 0.3,
        };
        let data = simulate_dataset(&cfg).unwrap();
        assert!(data.iter().any(|s| s.saturated));
        for s in &data {
            assert!(s.reflectance.values().iter().all(|v| *v <= 0.3));
        }
    }

    #[test]
    fn config_errors() {
        let mut cfg = SimConfig::phantom(1, 0);
        cfg.concentration_levels.clear();
        assert!(matches!(simulate_dataset(&cfg), Err(Error::Config(_))));
        let mut cfg = SimConfig::phantom(1, 0);
        cfg.optics_presets.clear();
        assert!(matches!(simulate_dataset(&cfg), Err(Error::Config(_))));
        let mut cfg = SimConfig::phantom(1, 0);
        cfg.geometry_range = (2.0, 1.0);
        assert!(simulate_dataset(&cfg).is_err());
    }

    #[test]
    fn augment_first_draw_and_nonnegativity() {
        let lib = default_library(&WavelengthGrid::default()).unwrap();
        let out = augment_linear(&lib, 1, 9, 0.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let z: Vec<f64> = (0..5).map(|_| rng.random::<f64>()).collect();
        let want = mix(&lib, &AbundanceVector::new(z).unwrap()).unwrap();
        assert_eq!(out[0].values(), want.values());
        let many = augment_linear(&lib, 200, 1, 0.0).unwrap();
        assert!(many.iter().flat_map(|s| s.values()).all(|v| *v >= 0.0));
        assert!(augment_linear(&lib, 0, 1, 0.0).is_err());
    }

    #[test]
    fn augment_monte_carlo_mean() {
        let lib = default_library(&WavelengthGrid::default()).unwrap();
        let n = 100_000;
        let out = augment_linear(&lib, n, 2024, 0.0).unwrap();
        let expect = mix(&lib, &AbundanceVector::new(vec![0.5; 5]).unwrap()).unwrap();
        for i in 0..lib.m() {
            let mean = out.iter().map(|s| s.values()[i]).sum::<f64>() / n as f64;
            // Var of Σ b_k U_k = Σ b_k² / 12
            let var: f64 = (0..5).map(|k| lib.get(i, k).powi(2) / 12.0).sum();
            let se = (var / n as f64).sqrt();
            assert!((mean - expect.values()[i]).abs() <= 3.0 * se + 1e-15, "wavelength {i}");
        }
    }
}
