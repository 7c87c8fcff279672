//! Browser bindings: simulate one attenuated measurement, correct it with
//! the dual-band baseline and unmix it with NNLS.

use luxmix::classical::{dual_band_correct, nnls, DualBandParams};
use luxmix::simulate::{apply_attenuation, default_library, phantom_presets, OpticsConfig};
use luxmix::spectral::{mix, AbundanceVector, EndmemberLibrary, Spectrum, WavelengthGrid};
use wasm_bindgen::prelude::*;

/// Autofluorescence abundances shared by every demo spectrum.
const BACKGROUND: [f64; 3] = [0.2, 0.15, 0.25];
/// Fraction of PpIX in its 620 nm photostate.
const PHOTOSTATE_RATIO: f64 = 0.15;

fn library() -> Result<EndmemberLibrary, JsError> {
    let grid = WavelengthGrid::uniform(450.0, 3.0, 100).map_err(err)?;
    default_library(&grid).map_err(err)
}

fn err(e: luxmix::Error) -> JsError {
    JsError::new(&e.to_string())
}

fn preset(index: usize) -> Result<OpticsConfig, JsError> {
    let all = phantom_presets();
    let n = all.len();
    all.get(index).copied().ok_or_else(|| JsError::new(&format!("preset {index} out of range 0..{n}")))
}

fn baseline(beta: f64) -> DualBandParams {
    DualBandParams { beta, ..DualBandParams::default() }
}

#[wasm_bindgen]
pub fn wavelengths() -> Result<Vec<f64>, JsError> {
    Ok(library()?.grid().wavelengths().to_vec())
}

#[wasm_bindgen(js_name = endmemberNames)]
pub fn endmember_names() -> Result<Vec<String>, JsError> {
    Ok(library()?.names().to_vec())
}

#[wasm_bindgen(js_name = presetCount)]
pub fn preset_count() -> usize {
    phantom_presets().len()
}

/// One noise-free measurement of a known mixture.
#[wasm_bindgen]
pub struct Measurement {
    lib: EndmemberLibrary,
    truth: Spectrum,
    fluo: Spectrum,
    reflectance: Spectrum,
}

#[wasm_bindgen]
impl Measurement {
    /// `c_ppix` in µg/ml, `preset` indexes the nine phantom optics,
    /// `g` is the geometric intensity factor.
    #[wasm_bindgen(constructor)]
    pub fn new(c_ppix: f64, preset_index: usize, g: f64) -> Result<Measurement, JsError> {
        let lib = library()?;
        let mut z = vec![c_ppix, PHOTOSTATE_RATIO * c_ppix];
        z.extend_from_slice(&BACKGROUND);
        let truth = mix(&lib, &AbundanceVector::new(z).map_err(err)?).map_err(err)?;
        let (fluo, reflectance) = apply_attenuation(&truth, &preset(preset_index)?, g).map_err(err)?;
        Ok(Self { lib, truth, fluo, reflectance })
    }

    pub fn truth(&self) -> Vec<f64> {
        self.truth.values().to_vec()
    }

    pub fn fluorescence(&self) -> Vec<f64> {
        self.fluo.values().to_vec()
    }

    pub fn reflectance(&self) -> Vec<f64> {
        self.reflectance.values().to_vec()
    }

    /// Fluorescence divided by the dual-band reflectance scale.
    pub fn corrected(&self, beta: f64) -> Result<Vec<f64>, JsError> {
        Ok(dual_band_correct(&self.fluo, &self.reflectance, &baseline(beta)).map_err(err)?.into_values())
    }

    /// NNLS abundances of the raw fluorescence.
    #[wasm_bindgen(js_name = unmixRaw)]
    pub fn unmix_raw(&self) -> Result<Vec<f64>, JsError> {
        Ok(nnls(&self.lib, &self.fluo).map_err(err)?.values().to_vec())
    }

    /// NNLS abundances after dual-band correction.
    #[wasm_bindgen(js_name = unmixCorrected)]
    pub fn unmix_corrected(&self, beta: f64) -> Result<Vec<f64>, JsError> {
        let c = dual_band_correct(&self.fluo, &self.reflectance, &baseline(beta)).map_err(err)?;
        Ok(nnls(&self.lib, &c).map_err(err)?.values().to_vec())
    }
}

/// PpIX634 abundance for every optics preset at `g = 1`: raw values first,
/// then dual-band corrected ones.
#[wasm_bindgen(js_name = presetSweep)]
pub fn preset_sweep(c_ppix: f64, beta: f64) -> Result<Vec<f64>, JsError> {
    let n = preset_count();
    let mut raw = Vec::with_capacity(n);
    let mut corrected = Vec::with_capacity(n);
    for i in 0..n {
        let m = Measurement::new(c_ppix, i, 1.0)?;
        raw.push(m.unmix_raw()?[0]);
        corrected.push(m.unmix_corrected(beta)?[0]);
    }
    raw.extend(corrected);
    Ok(raw)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unattenuated_mixture_unmixes_to_its_abundances() {
        let m = Measurement::new(1.25, 0, 1.0).unwrap();
        let lib = library().unwrap();
        let z = nnls(&lib, &m.truth).unwrap();
        assert!((z.values()[0] - 1.25).abs() < 1e-8);
        assert_eq!(m.fluorescence().len(), 100);
    }

    #[test]
    fn sweep_has_raw_and_corrected_halves() {
        let v = preset_sweep(1.0, 0.0).unwrap();
        assert_eq!(v.len(), 2 * preset_count());
        assert!(v.iter().all(|x| x.is_finite() && *x >= 0.0));
    }
}
