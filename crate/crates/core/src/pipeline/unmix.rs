//! Applying an unmixing engine to samples and to whole cubes.

use rayon::prelude::*;

use super::cube::DataCube;
use super::preprocess::{tile_origins, Mask};
use crate::classical::{unmix_baseline, DualBandParams};
use crate::error::{Error, Result};
use crate::models::{AcuNet, AcuSa};
use crate::spectral::{mix_into, AbundanceVector, Domain, EndmemberLibrary, LabeledSample, Role, Spectrum};

/// Something that maps (fluorescence, reflectance) pairs to abundances.
#[derive(Debug, Clone)]
pub enum Engine {
    Baseline { lib: EndmemberLibrary, params: DualBandParams },
    AcuNet { lib: EndmemberLibrary, net: Box<AcuNet> },
    AcuSa(Box<AcuSa>),
}

/// Per-sample engine output. `corrected` is the spectrum the abundances
/// were fitted to, when the engine has one.
#[derive(Debug, Clone, PartialEq)]
pub struct Unmixed {
    pub z: AbundanceVector,
    pub corrected: Option<Spectrum>,
}

impl Engine {
    pub fn name(&self) -> &'static str {
        match self {
            Engine::Baseline { .. } => "baseline",
            Engine::AcuNet { .. } => "acu-net",
            Engine::AcuSa(_) => "acu-sa",
        }
    }

    pub fn library(&self) -> &EndmemberLibrary {
        match self {
            Engine::Baseline { lib, .. } | Engine::AcuNet { lib, .. } => lib,
            Engine::AcuSa(m) => &m.lib,
        }
    }

    pub fn unmix(&self, samples: &[LabeledSample]) -> Result<Vec<Unmixed>> {
        let lib = self.library();
        for s in samples {
            if !s.grid().same_as(lib.grid()) {
                return Err(Error::dim("engine grid", lib.m(), s.grid().len()));
            }
        }
        match self {
            Engine::Baseline { lib, params } => Ok(unmix_baseline(samples, lib, params)?
                .into_iter()
                .map(|r| Unmixed { z: r.z, corrected: r.corrected })
                .collect()),
            Engine::AcuNet { net, .. } => Ok(net
                .predict(samples)?
                .into_iter()
                .map(|z| Unmixed { z, corrected: None })
                .collect()),
            Engine::AcuSa(m) => Ok(m
                .predict(samples)?
                .into_iter()
                .map(|(c, z)| Unmixed { z, corrected: Some(c) })
                .collect()),
        }
    }
}

/// Reconstruction error of `B·z` against the engine's corrected spectrum,
/// or against the measured fluorescence when there is none.
pub fn reconstruction_mse(lib: &EndmemberLibrary, u: &Unmixed, sample: &LabeledSample) -> f64 {
    let target = u.corrected.as_ref().map_or(sample.fluo.values(), |c| c.values());
    let mut y = vec![0.0; lib.m()];
    mix_into(lib.matrix(), lib.k(), u.z.values(), &mut y);
    y.iter().zip(target).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / y.len() as f64
}

/// K abundance planes, the 634 nm intensity of the spectrum each pixel was
/// unmixed from, and the pixels that were unmixed.
#[derive(Debug, Clone, PartialEq)]
pub struct AbundanceMaps {
    pub width: usize,
    pub height: usize,
    pub names: Vec<String>,
    /// `K × (width·height)`, row-major planes.
    pub planes: Vec<Vec<f64>>,
    pub intensity: Vec<f64>,
    pub valid: Vec<bool>,
}

fn intensity_634(lib: &EndmemberLibrary, u: &Unmixed) -> f64 {
    let i = lib.grid().nearest_index(634.0);
    match &u.corrected {
        Some(c) => c.values()[i],
        None => (0..lib.k()).map(|j| lib.get(i, j) * u.z.values()[j]).sum(),
    }
}

const PIXEL_CHUNK: usize = 1024;

/// Unmixes every masked pixel (`region == 1`) or every fully masked
/// `region × region` tile, writing each result to all pixels it covers.
/// Background stays zero and invalid.
pub fn unmix_cube(fluo: &DataCube, white: &DataCube, mask: &Mask, engine: &Engine, region: usize) -> Result<AbundanceMaps> {
    fluo.same_shape(white)?;
    let lib = engine.library();
    if !fluo.grid().same_as(lib.grid()) {
        return Err(Error::dim("cube grid vs engine", lib.m(), fluo.bands()));
    }
    if mask.width != fluo.width() || mask.height != fluo.height() {
        return Err(Error::dim("mask size", fluo.pixels(), mask.width * mask.height));
    }
    if region == 0 {
        return Err(Error::Config("region size must be ≥ 1".into()));
    }
    let (w, h) = (fluo.width(), fluo.height());
    let origins: Vec<(usize, usize)> = if region == 1 {
        (0..w * h).filter(|&i| mask.data[i]).map(|i| (i % w, i / w)).collect()
    } else {
        tile_origins(mask, region)
    };
    let grid = fluo.grid().clone();
    let area = (region * region) as f64;
    let average = |cube: &DataCube, x: usize, y: usize| -> Vec<f64> {
        let p = cube.pixels();
        (0..cube.bands())
            .map(|b| {
                let plane = &cube.values()[b * p..(b + 1) * p];
                let mut s = 0.0;
                for yy in y..y + region {
                    for xx in x..x + region {
                        s += plane[yy * w + xx] as f64;
                    }
                }
                s / area
            })
            .collect()
    };
    let results: Vec<Vec<Unmixed>> = origins
        .par_chunks(PIXEL_CHUNK)
        .map(|chunk| {
            let samples = chunk
                .iter()
                .map(|&(x, y)| {
                    let f = Spectrum::new(grid.clone(), average(fluo, x, y), Role::Fluorescence)?;
                    let r = Spectrum::new(grid.clone(), average(white, x, y), Role::Reflectance)?;
                    LabeledSample::new((y * w + x) as u64, f, r, None, Domain::Human)
                })
                .collect::<Result<Vec<_>>>()?;
            engine.unmix(&samples)
        })
        .collect::<Result<_>>()?;
    let k = lib.k();
    let mut planes = vec![vec![0.0; w * h]; k];
    let mut intensity = vec![0.0; w * h];
    let mut valid = vec![false; w * h];
    for (&(x, y), u) in origins.iter().zip(results.iter().flatten()) {
        let inten = intensity_634(lib, u);
        for yy in y..y + region {
            for xx in x..x + region {
                let i = yy * w + xx;
                for (j, plane) in planes.iter_mut().enumerate() {
                    plane[i] = u.z.values()[j];
                }
                intensity[i] = inten;
                valid[i] = true;
            }
        }
    }
    Ok(AbundanceMaps { width: w, height: h, names: lib.names().to_vec(), planes, intensity, valid })
}
