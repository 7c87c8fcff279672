//! Correlation, reconstruction and per-level statistics for one method on a
//! labeled test set.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use super::unmix::{reconstruction_mse, Engine};
use crate::error::{Error, Result};
use crate::spectral::{pearson_r, LabeledSample};

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub id: u64,
    pub c_ppix: f64,
    pub predicted: f64,
    pub mse_recon: Option<f64>,
    pub saturated: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LevelStats {
    pub level: f64,
    pub count: usize,
    pub mean: f64,
    /// Unbiased sample variance; NaN for a single sample.
    pub variance: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Stratum {
    pub count: usize,
    pub pearson_r: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub method: String,
    /// Sorted by sample id.
    pub predictions: Vec<Prediction>,
    pub pearson_r: Option<f64>,
    /// Why R is undefined, when it is.
    pub r_note: Option<String>,
    pub mse_recon: Option<f64>,
    pub levels: Vec<LevelStats>,
    pub saturated: Stratum,
    pub unsaturated: Stratum,
}

fn stratum(preds: &[&Prediction]) -> Stratum {
    let x: Vec<f64> = preds.iter().map(|p| p.predicted).collect();
    let y: Vec<f64> = preds.iter().map(|p| p.c_ppix).collect();
    Stratum { count: preds.len(), pearson_r: pearson_r(&x, &y).ok() }
}

/// Builds a report from per-sample predictions. Predictions are sorted by id
/// first, so the report does not depend on input order.
pub fn report_from_predictions(method: &str, mut predictions: Vec<Prediction>) -> Result<EvalReport> {
    if predictions.is_empty() {
        return Err(Error::Usage("cannot evaluate an empty test set".into()));
    }
    predictions.sort_by_key(|p| p.id);
    let x: Vec<f64> = predictions.iter().map(|p| p.predicted).collect();
    let y: Vec<f64> = predictions.iter().map(|p| p.c_ppix).collect();
    let (pearson, r_note) = match pearson_r(&x, &y) {
        Ok(r) => (Some(r), None),
        Err(e) => (None, Some(e.to_string())),
    };
    let mse: Vec<f64> = predictions.iter().filter_map(|p| p.mse_recon).collect();
    let mse_recon = (mse.len() == predictions.len()).then(|| mse.iter().sum::<f64>() / mse.len() as f64);
    let mut by_level: BTreeMap<u64, Vec<f64>> = BTreeMap::new();
    for p in &predictions {
        by_level.entry(p.c_ppix.to_bits()).or_default().push(p.predicted);
    }
    let mut levels: Vec<LevelStats> = by_level
        .into_iter()
        .map(|(bits, v)| {
            let n = v.len();
            let mean = v.iter().sum::<f64>() / n as f64;
            let variance = if n > 1 {
                v.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / (n - 1) as f64
            } else {
                f64::NAN
            };
            LevelStats { level: f64::from_bits(bits), count: n, mean, variance }
        })
        .collect();
    levels.sort_by(|a, b| a.level.total_cmp(&b.level));
    let sat: Vec<&Prediction> = predictions.iter().filter(|p| p.saturated).collect();
    let unsat: Vec<&Prediction> = predictions.iter().filter(|p| !p.saturated).collect();
    Ok(EvalReport {
        method: method.to_string(),
        pearson_r: pearson,
        r_note,
        mse_recon,
        levels,
        saturated: stratum(&sat),
        unsaturated: stratum(&unsat),
        predictions,
    })
}

/// Runs `engine` on a labeled test set and reports R against `c_ppix`.
pub fn evaluate(engine: &Engine, test: &[LabeledSample]) -> Result<EvalReport> {
    if let Some(s) = test.iter().find(|s| s.c_ppix.is_none()) {
        return Err(Error::Usage(format!("evaluation needs labels; sample {} has none", s.id)));
    }
    let out = engine.unmix(test)?;
    let lib = engine.library();
    let preds = test
        .iter()
        .zip(&out)
        .map(|(s, u)| Prediction {
            id: s.id,
            c_ppix: s.c_ppix.expect("checked"),
            predicted: u.z.ppix634(),
            mse_recon: Some(reconstruction_mse(lib, u, s)),
            saturated: s.saturated,
        })
        .collect();
    report_from_predictions(engine.name(), preds)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or("undefined".into(), |r| format!("{r:.4}"))
}

impl EvalReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("id,c_ppix,predicted_ppix634,mse_recon,saturated\n");
        for p in &self.predictions {
            let mse = p.mse_recon.map(|m| m.to_string()).unwrap_or_default();
            let _ = writeln!(s, "{},{},{},{},{}", p.id, p.c_ppix, p.predicted, mse, p.saturated as u8);
        }
        s
    }

    pub fn summary(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "method            {}", self.method);
        let _ = writeln!(s, "samples           {}", self.predictions.len());
        let _ = write!(s, "pearson R         {}", fmt_opt(self.pearson_r));
        if let Some(n) = &self.r_note {
            let _ = write!(s, " ({n})");
        }
        s.push('\n');
        let _ = writeln!(s, "mean recon MSE    {}", self.mse_recon.map_or("n/a".into(), |m| format!("{m:.4e}")));
        let _ = writeln!(s, "saturated         n={} R={}", self.saturated.count, fmt_opt(self.saturated.pearson_r));
        let _ = writeln!(s, "unsaturated       n={} R={}", self.unsaturated.count, fmt_opt(self.unsaturated.pearson_r));
        let _ = writeln!(s, "level      n      mean        variance");
        for l in &self.levels {
            let _ = writeln!(s, "{:<10} {:<6} {:<11.5} {:.5e}", l.level, l.count, l.mean, l.variance);
        }
        s
    }
}

/// Side-by-side table of several reports.
pub fn comparison_table(reports: &[&EvalReport]) -> String {
    let mut s = String::from("method      R          recon MSE\n");
    for r in reports {
        let _ = writeln!(
            s,
            "{:<11} {:<10} {}",
            r.method,
            fmt_opt(r.pearson_r),
            r.mse_recon.map_or("n/a".into(), |m| format!("{m:.4e}"))
        );
    }
    s
}
