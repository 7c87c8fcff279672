//! End-to-end reproduction run: simulate, split, fit the baseline and both
//! networks, then measure correlation, variance reduction, the NNLS
//! reconstruction floor and robustness to saturated reflectance.
//!
//! Everything written by [`run_repro`] is a pure function of the resolved
//! configuration. Wall-clock timings only go to the log.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;

use crate::classical::{calibrate_beta, dual_band_correct, nnls, Calibration, DualBandParams};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::models::{corrected_examples, history_csv, AcuNet, AcuSa, Examples, FitOutcome, TrainConfig};
use crate::pipeline::evaluate::{comparison_table, evaluate, EvalReport};
use crate::pipeline::{foreground_mask, render_map, save_cube, split_indices, unmix_cube, CubeKind, DataCube, Engine, Map2d, Mask};
use crate::simulate::{augment_linear_labeled, simulate_dataset, simulate_with_truth, OpticsConfig, SaturationConfig, SimConfig, SimulatedSample};
use crate::spectral::{mse, EndmemberLibrary, LabeledSample, Role, Spectrum};

pub const SUMMARY_FILE: &str = "summary.txt";
pub const REPORT_FILE: &str = "repro.json";

pub(crate) fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// JSON recorded inside checkpoints and `run.json`.
pub fn provenance(seed: u64, what: &str) -> serde_json::Value {
    serde_json::json!({
        "tool": "luxmix",
        "version": env!("CARGO_PKG_VERSION"),
        "seed": seed,
        "what": what,
    })
}

/// `var(x / mean(x))` with the unbiased estimator: variance on a scale that
/// does not depend on the units of `x`.
pub fn relative_variance(values: &[f64]) -> Result<f64> {
    let n = values.len();
    if n < 2 {
        return Err(Error::Degenerate { op: "relative_variance", reason: format!("{n} values") });
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if !(mean.abs() > 0.0) {
        return Err(Error::Degenerate { op: "relative_variance", reason: "zero mean".into() });
    }
    let v = values.iter().map(|x| (x / mean - 1.0).powi(2)).sum::<f64>() / (n - 1) as f64;
    Ok(v)
}

/// Nearest-rank percentile (`p` in `[0, 100]`) of unsorted values.
pub fn percentile(values: &[f64], p: f64) -> Option<f64> {
    if values.is_empty() || !(0.0..=100.0).contains(&p) {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let rank = ((p / 100.0) * v.len() as f64).ceil().max(1.0) as usize;
    Some(v[rank - 1])
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

/// 99th percentile over median of the map values inside `mask`.
pub fn spike_ratio(values: &[f64], mask: &Mask) -> Result<f64> {
    let inside: Vec<f64> = values.iter().zip(&mask.data).filter(|(_, m)| **m).map(|(v, _)| *v).collect();
    let (Some(p99), Some(med)) = (percentile(&inside, 99.0), median(&inside)) else {
        return Err(Error::Degenerate { op: "spike_ratio", reason: "empty foreground".into() });
    };
    if !(med > 0.0) {
        return Err(Error::Degenerate { op: "spike_ratio", reason: format!("median {med}") });
    }
    Ok(p99 / med)
}

/// Calibrates `beta` on `train` and evaluates the corrected NNLS baseline on
/// `test`.
pub fn run_baseline(lib: &EndmemberLibrary, train: &[LabeledSample], test: &[LabeledSample], p0: &DualBandParams) -> Result<(Calibration, EvalReport)> {
    let cal = calibrate_beta(train, lib, p0)?;
    let engine = Engine::Baseline { lib: lib.clone(), params: cal.params };
    Ok((cal, evaluate(&engine, test)?))
}

/// Stage-1 sets: noise-free true spectra of the split's samples, and for
/// training, `ratio × n` random linear mixtures on top.
pub fn stage1_sets(
    lib: &EndmemberLibrary,
    train: &[&SimulatedSample],
    test: &[&SimulatedSample],
    ratio: f64,
    noise_sigma: f64,
    seed: u64,
) -> Result<(Examples, Examples)> {
    let truths = |s: &[&SimulatedSample]| -> Vec<(Spectrum, crate::AbundanceVector)> {
        s.iter().map(|s| (s.truth.clone().with_role(Role::Corrected), s.abundances.clone())).collect()
    };
    let mut tr = truths(train);
    let n_aug = (ratio * tr.len() as f64).round() as usize;
    if n_aug > 0 {
        tr.extend(augment_linear_labeled(lib, n_aug, seed, noise_sigma)?);
    }
    Ok((corrected_examples(&tr, lib.m())?, corrected_examples(&truths(test), lib.m())?))
}

/// Stratified split of simulated samples by their labels.
pub fn split_sims(sims: &[SimulatedSample], fraction: f64, seed: u64) -> Result<(Vec<&SimulatedSample>, Vec<&SimulatedSample>)> {
    let labels: Vec<Option<f64>> = sims.iter().map(|s| s.sample.c_ppix).collect();
    let (tr, te) = split_indices(&labels, fraction, seed)?;
    Ok((tr.iter().map(|&i| &sims[i]).collect(), te.iter().map(|&i| &sims[i]).collect()))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MethodSummary {
    pub method: String,
    pub pearson_r: Option<f64>,
    pub mse_recon: Option<f64>,
    pub test_samples: usize,
}

impl From<&EvalReport> for MethodSummary {
    fn from(r: &EvalReport) -> Self {
        Self { method: r.method.clone(), pearson_r: r.pearson_r, mse_recon: r.mse_recon, test_samples: r.predictions.len() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VarianceCheck {
    pub level: f64,
    pub samples: usize,
    pub raw: f64,
    pub baseline: f64,
    pub acusa: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NnlsFloor {
    pub spectra: usize,
    pub acusa_mse: f64,
    pub nnls_mse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SaturationCheck {
    pub foreground_pixels: usize,
    pub saturated_pixels: usize,
    pub baseline_ratio: f64,
    pub acusa_ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReproSummary {
    pub seed: u64,
    pub train_samples: usize,
    pub test_samples: usize,
    pub baseline_beta: f64,
    pub baseline: MethodSummary,
    pub acunet: MethodSummary,
    pub acusa: MethodSummary,
    pub acunet_best_epoch: usize,
    pub stage1_best_epoch: usize,
    pub stage2_best_epoch: usize,
    /// Argmax of the twin encoder on each pure endmember.
    pub guidance_argmax: Vec<usize>,
    pub nnls_floor: NnlsFloor,
    pub variance: VarianceCheck,
    pub saturation: SaturationCheck,
}

fn fmt_r(r: Option<f64>) -> String {
    r.map_or("undefined".into(), |v| format!("{v:.4}"))
}

impl ReproSummary {
    pub fn text(&self, reports: &[&EvalReport]) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "luxmix repro, seed {}", self.seed);
        let _ = writeln!(s, "train {} / test {} samples", self.train_samples, self.test_samples);
        let _ = writeln!(s, "baseline beta {}", self.baseline_beta);
        s.push('\n');
        s.push_str(&comparison_table(reports));
        s.push('\n');
        let _ = writeln!(s, "R baseline {}  acu-sa {}  acu-net {}", fmt_r(self.baseline.pearson_r), fmt_r(self.acusa.pearson_r), fmt_r(self.acunet.pearson_r));
        let _ = writeln!(
            s,
            "best epochs: acu-net {}, stage 1 {}, stage 2 {}",
            self.acunet_best_epoch, self.stage1_best_epoch, self.stage2_best_epoch
        );
        let _ = writeln!(s, "guidance argmax {:?}", self.guidance_argmax);
        let f = &self.nnls_floor;
        let _ = writeln!(s, "recon MSE on {} corrected spectra: acu-sa {:.6e}, nnls {:.6e}", f.spectra, f.acusa_mse, f.nnls_mse);
        let v = &self.variance;
        let _ = writeln!(
            s,
            "relative variance at {} ({} samples): raw {:.6e}, baseline {:.6e} ({:.3} of raw), acu-sa {:.6e} ({:.3} of raw)",
            v.level,
            v.samples,
            v.raw,
            v.baseline,
            v.baseline / v.raw,
            v.acusa,
            v.acusa / v.raw
        );
        let c = &self.saturation;
        let _ = writeln!(
            s,
            "saturation cube ({} foreground, {} saturated px): p99/median baseline {:.4}, acu-sa {:.4}",
            c.foreground_pixels, c.saturated_pixels, c.baseline_ratio, c.acusa_ratio
        );
        s
    }
}

/// Synthetic scene with a disk of constant concentration on a dark
/// background, and a few bright spots whose reflectance is clipped.
#[derive(Debug, Clone)]
pub struct SaturationScene {
    pub fluo: DataCube,
    pub white: DataCube,
    pub disk: Mask,
    pub spots: Mask,
}

const BACKGROUND_REFLECTANCE: f32 = 0.02;

pub fn saturation_scene(base: &SimConfig, size: usize, level: f64, seed: u64) -> Result<SaturationScene> {
    let c = size as f64 / 2.0;
    let radius = 0.4 * size as f64;
    let spot_r = (size as f64 / 16.0).max(1.5);
    let spot_centers = [(c - radius / 2.0, c - radius / 3.0), (c + radius / 2.5, c), (c, c + radius / 2.0)];
    let inside = |x: usize, y: usize, cx: f64, cy: f64, r: f64| {
        let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
        dx * dx + dy * dy <= r * r
    };
    let mut disk = vec![false; size * size];
    let mut spots = vec![false; size * size];
    for y in 0..size {
        for x in 0..size {
            let i = y * size + x;
            disk[i] = inside(x, y, c, c, radius);
            spots[i] = disk[i] && spot_centers.iter().any(|&(sx, sy)| inside(x, y, sx, sy, spot_r));
        }
    }
    let n_spot = spots.iter().filter(|s| **s).count();
    let n_plain = disk.iter().filter(|d| **d).count() - n_spot;
    let preset: OpticsConfig = base.optics_presets[base.optics_presets.len() / 2];
    let cell = |n: usize, g: (f64, f64), saturation: SaturationConfig, seed: u64| SimConfig {
        library: base.library.clone(),
        concentration_levels: vec![level],
        optics_presets: vec![preset],
        samples_per_cell: n.max(1),
        noise: base.noise,
        geometry_range: g,
        saturation,
        optics_jitter: base.optics_jitter,
        domain: base.domain,
        seed,
    };
    let plain = simulate_dataset(&cell(n_plain, (0.8, 1.25), SaturationConfig::OFF, seed))?;
    let cap = base.saturation.cap.min(0.6);
    let bright = simulate_dataset(&cell(n_spot, (1.8, 2.0), SaturationConfig { probability: 1.0, cap }, seed.wrapping_add(1)))?;
    let grid = base.library.grid().clone();
    let (bands, px) = (grid.len(), size * size);
    let mut fv = vec![0.0f32; bands * px];
    let mut wv = vec![BACKGROUND_REFLECTANCE; bands * px];
    let (mut pi, mut bi) = (0, 0);
    for i in 0..px {
        if !disk[i] {
            continue;
        }
        let s = if spots[i] {
            bi += 1;
            &bright[bi - 1]
        } else {
            pi += 1;
            &plain[pi - 1]
        };
        for b in 0..bands {
            fv[b * px + i] = s.fluo.values()[b] as f32;
            wv[b * px + i] = s.reflectance.values()[b] as f32;
        }
    }
    Ok(SaturationScene {
        fluo: DataCube::new(size, size, grid.clone(), CubeKind::Fluorescence, fv)?,
        white: DataCube::new(size, size, grid, CubeKind::White, wv)?,
        disk: Mask::new(size, size, disk)?,
        spots: Mask::new(size, size, spots)?,
    })
}

fn variance_set(base: &SimConfig, level: f64, per_preset: usize, seed: u64) -> Result<Vec<LabeledSample>> {
    simulate_dataset(&SimConfig {
        concentration_levels: vec![level],
        samples_per_cell: per_preset,
        saturation: SaturationConfig::OFF,
        seed,
        ..base.clone()
    })
}

fn at_634(values: &[f64], idx: usize) -> f64 {
    values[idx]
}

/// Files and numbers from one reproduction run.
#[derive(Debug, Clone)]
pub struct ReproOutcome {
    pub summary: ReproSummary,
    pub reports: Vec<EvalReport>,
    pub acunet: AcuNet,
    pub acusa: AcuSa,
    pub files: Vec<PathBuf>,
}

fn train_logged<F: FnOnce() -> Result<FitOutcome>>(what: &str, epochs: usize, f: F) -> Result<FitOutcome> {
    let t = Instant::now();
    log::info!("training {what} for {epochs} epochs");
    let out = f()?;
    let last = out.history.last();
    log::info!(
        "{what}: {:.1} s, best epoch {}, final test R {}",
        t.elapsed().as_secs_f64(),
        out.best_epoch,
        last.map_or(f64::NAN, |r| r.test_r)
    );
    Ok(out)
}

/// Runs the whole experiment described by `cfg` (already resolved) and
/// writes its outputs to `out`.
pub fn run_repro(cfg: &RunConfig, out: &Path) -> Result<ReproOutcome> {
    cfg.validate()?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut files = vec![cfg.write_resolved(out)?];
    let mut put = |name: &str, bytes: Vec<u8>| -> Result<()> {
        let p = out.join(name);
        write_file(&p, bytes)?;
        files.push(p);
        Ok(())
    };
    let seed = cfg.seed;
    let sim = cfg.sim.to_sim_config()?;
    let lib = sim.library.clone();
    let t = Instant::now();
    let sims = simulate_with_truth(&sim)?;
    log::info!("simulated {} samples in {:.1} s", sims.len(), t.elapsed().as_secs_f64());
    let (train_sims, test_sims) = split_sims(&sims, cfg.train.acunet.split, seed)?;
    let train: Vec<LabeledSample> = train_sims.iter().map(|s| s.sample.clone()).collect();
    let test: Vec<LabeledSample> = test_sims.iter().map(|s| s.sample.clone()).collect();

    let (cal, base_report) = run_baseline(&lib, &train, &test, &cfg.baseline)?;
    log::info!("baseline beta {} (train R {:.4}), test R {:?}", cal.params.beta, cal.r, base_report.pearson_r);

    let mut net = AcuNet::build(&cfg.acunet)?;
    let tc = TrainConfig { epochs: cfg.repro.acunet_epochs, ..cfg.train.acunet };
    let fit_net = train_logged("acu-net", tc.epochs, || net.train(&lib, &train, &test, &tc))?;
    net.params = fit_net.best.clone();
    let net_report = evaluate(&Engine::AcuNet { lib: lib.clone(), net: Box::new(net.clone()) }, &test)?;

    let mut sa = AcuSa::build(&cfg.acusa, &lib)?;
    let (s1_train, s1_test) = stage1_sets(&lib, &train_sims, &test_sims, cfg.train.augment_ratio, sim.noise.read_sigma, seed.wrapping_add(3))?;
    let tc1 = TrainConfig { epochs: cfg.repro.stage1_epochs, ..cfg.train.stage1 };
    let fit1 = train_logged("acu-sa stage 1", tc1.epochs, || sa.train_stage1(&s1_train, &s1_test, &tc1))?;
    sa.hu_params = fit1.best.clone();
    let guidance = sa.guidance_argmax()?;
    let tc2 = TrainConfig { epochs: cfg.repro.stage2_epochs, ..cfg.train.stage2 };
    let fit2 = train_logged("acu-sa stage 2", tc2.epochs, || sa.train_stage2(&train, &test, &tc2))?;
    sa.norm_params = fit2.best.clone();
    let sa_engine = Engine::AcuSa(Box::new(sa.clone()));
    let sa_report = evaluate(&sa_engine, &test)?;

    // Reconstruction floor on the corrected spectra ACU-SA produced.
    let sa_out = sa.predict(&test)?;
    let mut sa_mse = 0.0;
    let mut nnls_mse = 0.0;
    for (corrected, z) in &sa_out {
        sa_mse += mse(&sa.decode_values(z.values())?, corrected.values())?;
        let zn = nnls(&lib, corrected)?;
        nnls_mse += mse(&sa.decode_values(zn.values())?, corrected.values())?;
    }
    let n = sa_out.len() as f64;
    let floor = NnlsFloor { spectra: sa_out.len(), acusa_mse: sa_mse / n, nnls_mse: nnls_mse / n };

    let vset = variance_set(&sim, cfg.repro.variance_level, cfg.repro.variance_samples_per_preset, seed.wrapping_add(4))?;
    let i634 = lib.grid().nearest_index(634.0);
    let raw: Vec<f64> = vset.iter().map(|s| at_634(s.fluo.values(), i634)).collect();
    let base_corr = vset
        .iter()
        .map(|s| Ok(at_634(dual_band_correct(&s.fluo, &s.reflectance, &cal.params)?.values(), i634)))
        .collect::<Result<Vec<f64>>>()?;
    let sa_corr: Vec<f64> = sa.predict(&vset)?.iter().map(|(c, _)| at_634(c.values(), i634)).collect();
    let variance = VarianceCheck {
        level: cfg.repro.variance_level,
        samples: vset.len(),
        raw: relative_variance(&raw)?,
        baseline: relative_variance(&base_corr)?,
        acusa: relative_variance(&sa_corr)?,
    };

    let scene = saturation_scene(&sim, cfg.repro.cube_size, cfg.repro.cube_level, seed.wrapping_add(5))?;
    let fg = foreground_mask(&scene.white);
    if fg.degenerate {
        return Err(Error::Degenerate { op: "saturation scene", reason: "foreground mask is empty".into() });
    }
    let base_engine = Engine::Baseline { lib: lib.clone(), params: cal.params };
    let base_maps = unmix_cube(&scene.fluo, &scene.white, &fg.mask, &base_engine, 1)?;
    let sa_maps = unmix_cube(&scene.fluo, &scene.white, &fg.mask, &sa_engine, 1)?;
    let saturation = SaturationCheck {
        foreground_pixels: fg.mask.count(),
        saturated_pixels: scene.spots.count(),
        baseline_ratio: spike_ratio(&base_maps.planes[0], &fg.mask)?,
        acusa_ratio: spike_ratio(&sa_maps.planes[0], &fg.mask)?,
    };

    let summary = ReproSummary {
        seed,
        train_samples: train.len(),
        test_samples: test.len(),
        baseline_beta: cal.params.beta,
        baseline: (&base_report).into(),
        acunet: (&net_report).into(),
        acusa: (&sa_report).into(),
        acunet_best_epoch: fit_net.best_epoch,
        stage1_best_epoch: fit1.best_epoch,
        stage2_best_epoch: fit2.best_epoch,
        guidance_argmax: guidance,
        nnls_floor: floor,
        variance,
        saturation,
    };

    let reports = vec![base_report, net_report, sa_report];
    for r in &reports {
        put(&format!("{}_predictions.csv", r.method), r.to_csv().into_bytes())?;
        put(&format!("{}_report.txt", r.method), r.summary().into_bytes())?;
    }
    put("acu-net_history.csv", history_csv(&fit_net.history).into_bytes())?;
    put("acu-sa_stage1_history.csv", history_csv(&fit1.history).into_bytes())?;
    put("acu-sa_stage2_history.csv", history_csv(&fit2.history).into_bytes())?;
    let refs: Vec<&EvalReport> = reports.iter().collect();
    put(SUMMARY_FILE, summary.text(&refs).into_bytes())?;
    let json = serde_json::to_string_pretty(&summary).map_err(|e| Error::Config(e.to_string()))? + "\n";
    put(REPORT_FILE, json.into_bytes())?;
    put("run.json", (serde_json::to_string_pretty(&provenance(seed, "repro")).expect("json") + "\n").into_bytes())?;

    let prov = |what: &str| provenance(seed, what);
    let net_path = out.join("acu-net.ckpt");
    net.save(&net_path, prov("acu-net"))?;
    let (hu_path, norm_path) = (out.join("acu-sa-hu.ckpt"), out.join("acu-sa-norm.ckpt"));
    sa.save(&hu_path, &norm_path, prov("acu-sa"))?;
    files.extend([net_path, hu_path, norm_path]);
    for (cube, name) in [(&scene.fluo, "saturation_fluo.hsc"), (&scene.white, "saturation_white.hsc")] {
        let p = out.join(name);
        save_cube(cube, &p)?;
        files.push(p);
    }
    for (maps, name) in [(&base_maps, "saturation_baseline_ppix634.pgm"), (&sa_maps, "saturation_acu-sa_ppix634.pgm")] {
        let map = Map2d::new(maps.width, maps.height, maps.planes[0].clone(), Some(maps.valid.clone()))?;
        let p = out.join(name);
        files.push(render_map(&map, &p)?);
        files.push(p);
    }
    Ok(ReproOutcome { summary, reports, acunet: net, acusa: sa, files })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_variance_is_scale_free() {
        let v = [1.0, 2.0, 3.0, 4.0];
        let a = relative_variance(&v).unwrap();
        let scaled: Vec<f64> = v.iter().map(|x| x * 37.5).collect();
        assert!((relative_variance(&scaled).unwrap() - a).abs() < 1e-15);
        // mean 2.5, sample variance 5/3
        assert!((a - (5.0 / 3.0) / 6.25).abs() < 1e-15);
        assert!(relative_variance(&[1.0]).is_err());
        assert!(relative_variance(&[1.0, -1.0]).is_err());
    }

    #[test]
    fn percentiles_by_nearest_rank() {
        let v: Vec<f64> = (1..=100).rev().map(f64::from).collect();
        assert_eq!(percentile(&v, 99.0), Some(99.0));
        assert_eq!(percentile(&v, 100.0), Some(100.0));
        assert_eq!(percentile(&v, 0.0), Some(1.0));
        assert_eq!(median(&v), Some(50.5));
        assert_eq!(median(&[3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(percentile(&[], 50.0), None);
    }

    #[test]
    fn spike_ratio_ignores_background() {
        let mask = Mask::new(3, 1, vec![true, true, false]).unwrap();
        assert_eq!(spike_ratio(&[2.0, 2.0, 100.0], &mask).unwrap(), 1.0);
        let empty = Mask::new(3, 1, vec![false; 3]).unwrap();
        assert!(spike_ratio(&[1.0; 3], &empty).is_err());
    }

    #[test]
    fn saturation_scene_layout() {
        let base = SimConfig::phantom(1, 3);
        let s = saturation_scene(&base, 24, 1.25, 9).unwrap();
        assert!(s.spots.count() > 0);
        assert!(s.spots.data.iter().zip(&s.disk.data).all(|(sp, d)| !sp || *d));
        let fg = foreground_mask(&s.white);
        assert!(!fg.degenerate);
        let inter = fg.mask.data.iter().zip(&s.disk.data).filter(|(a, b)| **a && **b).count();
        let union = fg.mask.data.iter().zip(&s.disk.data).filter(|(a, b)| **a || **b).count();
        assert!(inter as f64 / union as f64 > 0.9);
        // spot reflectance is clipped at the cap somewhere in the long-wave range
        let i = s.spots.data.iter().position(|v| *v).unwrap();
        let (x, y) = (i % 24, i / 24);
        let r = s.white.spectrum(x, y);
        assert!(r.iter().any(|v| (*v - 0.6).abs() < 1e-6));
    }
}
