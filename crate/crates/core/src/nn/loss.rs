//! Homoscedastic-uncertainty weighting of multi-task losses.
//!
//! Each task loss `L_i` gets a learned `σ_i > 0` and the combined objective is
//! `Σ L_i / (2σ_i²) + Σ log σ_i`. The weights are stored as `log σ` so they
//! stay positive without constraints. For fixed `L_i > 0` the objective is
//! stationary in `σ_i` exactly at `σ_i² = L_i`.

use super::params::{ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub(crate) fn homoscedastic_value(losses: &[f64], log_sigmas: &[f64]) -> Result<f64> {
    if losses.len() != log_sigmas.len() {
        return Err(Error::Config(format!(
            "{} task losses but {} loss weights",
            losses.len(),
            log_sigmas.len()
        )));
    }
    Ok(losses
        .iter()
        .zip(log_sigmas)
        .map(|(l, s)| 0.5 * l * (-2.0 * s).exp() + s)
        .sum())
}

/// Combined loss for plain values, with `σ_i` given directly.
pub fn homoscedastic_loss(task_losses: &[f64], sigmas: &[f64]) -> Result<f64> {
    if sigmas.iter().any(|s| !(*s > 0.0)) {
        return Err(Error::Config("loss weights σ must be positive".into()));
    }
    let logs: Vec<f64> = sigmas.iter().map(|s| s.ln()).collect();
    homoscedastic_value(task_losses, &logs)
}

/// Derivative of the combined loss with respect to `σ_i` (not `log σ_i`):
/// `-L_i / σ_i³ + 1 / σ_i`.
pub fn homoscedastic_dsigma(task_loss: f64, sigma: f64) -> f64 {
    -task_loss / sigma.powi(3) + 1.0 / sigma
}

/// Learned `log σ` parameters for the concentration, reconstruction and
/// endmember-guidance tasks. Only the ones a model uses are registered.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct LossWeights {
    pub log_sigma_c: Option<ParamId>,
    pub log_sigma_rec: Option<ParamId>,
    pub log_sigma_eg: Option<ParamId>,
}

impl LossWeights {
    pub fn register(store: &mut ParamStore, concentration: bool, reconstruction: bool, guidance: bool) -> Result<Self> {
        let mut add = |on: bool, name: &str| -> Result<Option<ParamId>> {
            if on {
                Ok(Some(store.add(name, Tensor::scalar(0.0), false)?))
            } else {
                Ok(None)
            }
        };
        Ok(Self {
            log_sigma_c: add(concentration, "log_sigma_c")?,
            log_sigma_rec: add(reconstruction, "log_sigma_rec")?,
            log_sigma_eg: add(guidance, "log_sigma_eg")?,
        })
    }

    pub fn find(store: &ParamStore) -> Self {
        Self {
            log_sigma_c: store.find("log_sigma_c"),
            log_sigma_rec: store.find("log_sigma_rec"),
            log_sigma_eg: store.find("log_sigma_eg"),
        }
    }

    /// σ values currently held in `store`.
    pub fn sigmas(&self, store: &ParamStore) -> [Option<f64>; 3] {
        let get = |id: Option<ParamId>| id.map(|i| store.value(i).data()[0].exp());
        [get(self.log_sigma_c), get(self.log_sigma_rec), get(self.log_sigma_eg)]
    }
}
