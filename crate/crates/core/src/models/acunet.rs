//! Residual 1-D CNN mapping stacked spectra to nonnegative abundances.
//!
//! Layout with the default plan at m = 100 (2 input channels):
//!
//! ```text
//! block1  conv 2→16 k5, conv 16→16 k5, residual, pool2      (L 100 → 50)
//! trans   conv 16→32 k5
//! block2  2 × conv 32→32 k5, residual, pool2                  (L 50 → 25)
//! trans   conv 32→64 k3
//! block3  3 × conv 64→64 k3, residual, pool2                  (L 25 → 12)
//! trans   conv 64→128 k3
//! block4  2 × conv 128→128 k3, residual, pool2                (L 12 → 6)
//! dense   768 → 256 → 64 → K, ReLU on every layer including the output
//! ```
//!
//! Hidden weights are He-uniform with zero biases; the output layer starts
//! at zero weights and bias 0.1 so no output unit is dead at step zero.
//!
//! Inside a block every conv but the last is followed by ReLU; the block
//! output is `relu(h + skip)` where the skip is the block input, or the first
//! conv's output when the first conv changes the channel count.

use std::path::Path;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::train::{fit, Examples, FitOutcome, TrainConfig};
use crate::error::{Error, Result};
use crate::nn::checkpoint::{self, Checkpoint, Dtype};
use crate::nn::{he_uniform, homoscedastic_loss, Graph, LossWeights, NodeId, ParamId, ParamStore, Tensor};
use crate::spectral::{mix, mse, AbundanceVector, EndmemberLibrary, LabeledSample, Spectrum};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlockPlan {
    pub channels: usize,
    pub convs: usize,
    pub kernel: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AcuNetConfig {
    /// Spectrum length.
    pub m: usize,
    /// Number of endmembers (output width).
    pub k: usize,
    pub in_channels: usize,
    pub blocks: Vec<BlockPlan>,
    /// Hidden dense widths; the K-wide output layer is appended.
    pub fc: Vec<usize>,
    pub pool: usize,
    pub seed: u64,
}

impl Default for AcuNetConfig {
    fn default() -> Self {
        Self {
            m: 100,
            k: 5,
            in_channels: 2,
            blocks: vec![
                BlockPlan { channels: 16, convs: 2, kernel: 5 },
                BlockPlan { channels: 32, convs: 2, kernel: 5 },
                BlockPlan { channels: 64, convs: 3, kernel: 3 },
                BlockPlan { channels: 128, convs: 2, kernel: 3 },
            ],
            fc: vec![256, 64],
            pool: 2,
            seed: 0,
        }
    }
}

impl AcuNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.blocks.len() != 4 {
            return Err(Error::Config(format!("expected 4 residual blocks, got {}", self.blocks.len())));
        }
        for b in &self.blocks {
            if !(2..=3).contains(&b.convs) {
                return Err(Error::Config(format!("residual blocks hold 2-3 convolutions, got {}", b.convs)));
            }
            if b.kernel % 2 == 0 {
                return Err(Error::Config(format!("kernel size must be odd, got {}", b.kernel)));
            }
            if b.channels == 0 {
                return Err(Error::Config("block channel count must be positive".into()));
            }
        }
        if self.pool == 0 || self.k == 0 || self.in_channels == 0 {
            return Err(Error::Config("pool, k and in_channels must be positive".into()));
        }
        if self.m < 16 || self.final_length() == 0 {
            return Err(Error::Config(format!(
                "spectrum length {} too short for four pooling stages",
                self.m
            )));
        }
        Ok(())
    }

    pub fn final_length(&self) -> usize {
        let mut l = self.m;
        for _ in &self.blocks {
            l /= self.pool.max(1);
        }
        l
    }

    pub fn flat_features(&self) -> usize {
        self.blocks.last().map_or(0, |b| b.channels) * self.final_length()
    }
}

pub(crate) const OUTPUT_BIAS: f64 = 0.1;

#[derive(Debug, Clone, Copy)]
pub(crate) struct Layer {
    pub w: ParamId,
    pub b: ParamId,
}

impl Layer {
    pub(crate) fn conv(store: &mut ParamStore, name: &str, c_in: usize, c_out: usize, k: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        let w = store.add(format!("{name}.w"), he_uniform(vec![c_out, c_in, k], c_in * k, rng), true)?;
        let b = store.add(format!("{name}.b"), Tensor::zeros(vec![c_out]), false)?;
        Ok(Self { w, b })
    }

    pub(crate) fn dense(store: &mut ParamStore, name: &str, f_in: usize, f_out: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        let w = store.add(format!("{name}.w"), he_uniform(vec![f_out, f_in], f_in, rng), true)?;
        let b = store.add(format!("{name}.b"), Tensor::zeros(vec![f_out]), false)?;
        Ok(Self { w, b })
    }

    /// Output layers start at zero weights and a small positive bias so every
    /// unit behind the final ReLU is active for every input at step zero.
    pub(crate) fn output(store: &mut ParamStore, name: &str, shape: Vec<usize>) -> Result<Self> {
        let c_out = shape[0];
        let w = store.add(format!("{name}.w"), Tensor::zeros(shape), true)?;
        let b = store.add(format!("{name}.b"), Tensor::new(vec![c_out], vec![OUTPUT_BIAS; c_out])?, false)?;
        Ok(Self { w, b })
    }

    pub(crate) fn nodes(&self, g: &mut Graph, store: &ParamStore, frozen: bool) -> (NodeId, NodeId) {
        if frozen {
            (g.frozen_param(store, self.w), g.frozen_param(store, self.b))
        } else {
            (g.param(store, self.w), g.param(store, self.b))
        }
    }
}

/// Parameter ids of an [`AcuNetConfig`] layout; the values live in a
/// [`ParamStore`].
#[derive(Debug, Clone)]
pub struct AcuNetLayout {
    pub cfg: AcuNetConfig,
    blocks: Vec<Vec<Layer>>,
    transitions: Vec<Layer>,
    fc: Vec<Layer>,
}

impl AcuNetLayout {
    /// Registers freshly initialized parameters under `prefix` in `store`.
    pub fn register(cfg: &AcuNetConfig, store: &mut ParamStore, prefix: &str) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut blocks = Vec::new();
        let mut transitions = Vec::new();
        let mut c_in = cfg.in_channels;
        for (bi, plan) in cfg.blocks.iter().enumerate() {
            if bi > 0 {
                transitions.push(Layer::conv(store, &format!("{prefix}trans{bi}"), c_in, plan.channels, plan.kernel, &mut rng)?);
                c_in = plan.channels;
            }
            let mut layers = Vec::new();
            for ci in 0..plan.convs {
                let src = if ci == 0 { c_in } else { plan.channels };
                layers.push(Layer::conv(
                    store,
                    &format!("{prefix}block{}.conv{}", bi + 1, ci + 1),
                    src,
                    plan.channels,
                    plan.kernel,
                    &mut rng,
                )?);
            }
            blocks.push(layers);
            c_in = plan.channels;
        }
        let mut fc = Vec::new();
        let mut f_in = cfg.flat_features();
        for (i, &w) in cfg.fc.iter().enumerate() {
            fc.push(Layer::dense(store, &format!("{prefix}fc{}", i + 1), f_in, w, &mut rng)?);
            f_in = w;
        }
        fc.push(Layer::output(store, &format!("{prefix}fc{}", cfg.fc.len() + 1), vec![cfg.k, f_in])?);
        Ok(Self { cfg: cfg.clone(), blocks, transitions, fc })
    }

    /// Forward pass `x: (b, in_channels, m) → (b, K)`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: NodeId, frozen: bool) -> Result<NodeId> {
        let shape = g.value(x).shape().to_vec();
        if shape.len() != 3 || shape[1] != self.cfg.in_channels || shape[2] != self.cfg.m {
            return Err(Error::dim("acu-net input", self.cfg.m, *shape.last().unwrap_or(&0)));
        }
        let mut h = x;
        let mut c_in = self.cfg.in_channels;
        for (bi, layers) in self.blocks.iter().enumerate() {
            let plan = self.cfg.blocks[bi];
            if bi > 0 {
                let (w, b) = self.transitions[bi - 1].nodes(g, store, frozen);
                let t = g.conv1d(h, w, b)?;
                h = g.relu(t)?;
                c_in = plan.channels;
            }
            let mut skip = h;
            let mut cur = h;
            for (ci, layer) in layers.iter().enumerate() {
                let (w, b) = layer.nodes(g, store, frozen);
                cur = g.conv1d(cur, w, b)?;
                let last = ci + 1 == layers.len();
                if !last {
                    cur = g.relu(cur)?;
                }
                if ci == 0 && c_in != plan.channels {
                    skip = cur;
                }
            }
            let sum = g.add(cur, skip)?;
            let act = g.relu(sum)?;
            h = g.maxpool1d(act, self.cfg.pool)?;
            c_in = plan.channels;
        }
        let mut f = g.flatten(h)?;
        for layer in &self.fc {
            let (w, b) = layer.nodes(g, store, frozen);
            let d = g.dense(f, w, b)?;
            f = g.relu(d)?;
        }
        Ok(f)
    }
}

/// Closed-form parameter count of a layout (weights plus biases).
pub fn parameter_count(cfg: &AcuNetConfig) -> usize {
    let conv = |ci: usize, co: usize, k: usize| co * ci * k + co;
    let mut n = 0;
    let mut c_in = cfg.in_channels;
    for (bi, plan) in cfg.blocks.iter().enumerate() {
        if bi > 0 {
            n += conv(c_in, plan.channels, plan.kernel);
            c_in = plan.channels;
        }
        n += conv(c_in, plan.channels, plan.kernel);
        n += (plan.convs - 1) * conv(plan.channels, plan.channels, plan.kernel);
        c_in = plan.channels;
    }
    let mut f_in = cfg.flat_features();
    for &w in cfg.fc.iter().chain(std::iter::once(&cfg.k)) {
        n += f_in * w + w;
        f_in = w;
    }
    n
}

pub const ARCH: &str = "acu-net";

/// Trainable ACU-Net: layout, the concentration and reconstruction loss
/// weights, and their values.
#[derive(Debug, Clone)]
pub struct AcuNet {
    pub layout: AcuNetLayout,
    pub weights: LossWeights,
    pub params: ParamStore,
    /// Reconstruct from `z / ||z||₂` instead of `z`.
    pub unit_norm_reconstruction: bool,
}

impl AcuNet {
    pub fn build(cfg: &AcuNetConfig) -> Result<Self> {
        let mut params = ParamStore::new();
        let layout = AcuNetLayout::register(cfg, &mut params, "")?;
        let weights = LossWeights::register(&mut params, true, true, false)?;
        Ok(Self { layout, weights, params, unit_norm_reconstruction: false })
    }

    pub fn config(&self) -> &AcuNetConfig {
        &self.layout.cfg
    }

    /// Abundances for a `(b, 2, m)` input, row-major `b × K`.
    pub fn forward_values(&self, x: Tensor) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let xi = g.input(x)?;
        let z = self.layout.forward(&mut g, &self.params, xi, true)?;
        Ok(g.value(z).data().to_vec())
    }

    pub fn predict(&self, samples: &[LabeledSample]) -> Result<Vec<AbundanceVector>> {
        let k = self.layout.cfg.k;
        let mut out = Vec::with_capacity(samples.len());
        for chunk in samples.chunks(PREDICT_CHUNK) {
            let x = stack_pairs(chunk, self.layout.cfg.m)?;
            for z in self.forward_values(x)?.chunks_exact(k) {
                out.push(AbundanceVector::new(z.to_vec())?);
            }
        }
        Ok(out)
    }

    /// Trains on labeled pairs; the returned outcome holds the best-test-R
    /// parameters, `self` keeps the final ones.
    pub fn train(
        &mut self,
        lib: &EndmemberLibrary,
        train: &[LabeledSample],
        test: &[LabeledSample],
        tc: &TrainConfig,
    ) -> Result<FitOutcome> {
        check_library(&self.layout.cfg, lib)?;
        let tr = pair_examples(train, self.layout.cfg.m)?;
        let te = pair_examples(test, self.layout.cfg.m)?;
        let Self { layout, weights, params, unit_norm_reconstruction } = self;
        let (layout, weights, unit) = (&*layout, *weights, *unit_norm_reconstruction);
        let matrix = lib.shared_matrix();
        fit(
            params,
            &tr,
            &te,
            tc,
            |g, store, data, idx| {
                let x = g.input(data.batch_input(idx))?;
                acunet_loss_graph(g, layout, &weights, store, x, &matrix, data.batch_recon(idx), data.batch_labels(idx), unit)
            },
            |store, data| {
                let k = layout.cfg.k;
                let mut z0 = Vec::with_capacity(data.len());
                let idx: Vec<usize> = (0..data.len()).collect();
                for c in idx.chunks(PREDICT_CHUNK) {
                    let mut g = Graph::new();
                    let x = g.input(data.batch_input(c))?;
                    let z = layout.forward(&mut g, store, x, true)?;
                    z0.extend(g.value(z).data().chunks_exact(k).map(|r| r[0]));
                }
                Ok(z0)
            },
        )
    }

    pub fn save(&self, path: &Path, provenance: serde_json::Value) -> Result<()> {
        checkpoint::save(path, ARCH, config_json(&self.layout.cfg)?, provenance, &self.params, Dtype::F64)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.manifest.arch != ARCH {
            return Err(Error::Config(format!("checkpoint holds '{}', expected '{ARCH}'", ck.manifest.arch)));
        }
        let cfg: AcuNetConfig = serde_json::from_value(ck.manifest.config.clone())
            .map_err(|e| Error::Config(format!("checkpoint config: {e}")))?;
        let mut net = Self::build(&cfg)?;
        net.params.load_values_from(&ck.params)?;
        Ok(net)
    }
}

pub(crate) const PREDICT_CHUNK: usize = 256;

pub(crate) fn config_json<T: Serialize>(cfg: &T) -> Result<serde_json::Value> {
    serde_json::to_value(cfg).map_err(|e| Error::Config(e.to_string()))
}

pub(crate) fn check_library(cfg: &AcuNetConfig, lib: &EndmemberLibrary) -> Result<()> {
    if lib.m() != cfg.m {
        return Err(Error::dim("library grid", cfg.m, lib.m()));
    }
    if lib.k() != cfg.k {
        return Err(Error::dim("library endmembers", cfg.k, lib.k()));
    }
    Ok(())
}

/// `(b, 2, m)` tensor of fluorescence and reflectance channels.
pub fn stack_pairs(samples: &[LabeledSample], m: usize) -> Result<Tensor> {
    let mut data = Vec::with_capacity(samples.len() * 2 * m);
    for s in samples {
        if s.fluo.len() != m {
            return Err(Error::dim("sample grid", m, s.fluo.len()));
        }
        data.extend_from_slice(s.fluo.values());
        data.extend_from_slice(s.reflectance.values());
    }
    Tensor::new(vec![samples.len(), 2, m], data)
}

/// Two-channel examples labeled by `c_ppix`.
pub fn pair_examples(samples: &[LabeledSample], m: usize) -> Result<Examples> {
    let labels = samples
        .iter()
        .map(|s| s.c_ppix.ok_or_else(|| Error::Usage(format!("sample {} has no PpIX label", s.id))))
        .collect::<Result<Vec<f64>>>()?;
    let inputs = stack_pairs(samples, m)?.into_data();
    let recon = samples.iter().flat_map(|s| s.fluo.values().iter().copied()).collect();
    Ok(Examples { channels: 2, m, inputs, recon, labels })
}

/// Concentration and reconstruction objective for a batch:
/// `(z₀ - c)²` and `||Bz - fluo||²`, each averaged over the batch, weighted
/// by learned uncertainties.
#[allow(clippy::too_many_arguments)]
pub fn acunet_loss_graph(
    g: &mut Graph,
    layout: &AcuNetLayout,
    weights: &LossWeights,
    store: &ParamStore,
    x: NodeId,
    matrix: &Arc<[f64]>,
    fluo: Vec<f64>,
    c_ppix: Vec<f64>,
    unit_norm_reconstruction: bool,
) -> Result<NodeId> {
    let (sc, sr) = match (weights.log_sigma_c, weights.log_sigma_rec) {
        (Some(c), Some(r)) => (c, r),
        _ => return Err(Error::Usage("acu-net loss needs σ_c and σ_rec".into())),
    };
    let cfg = &layout.cfg;
    let z = layout.forward(g, store, x, false)?;
    let z0 = g.column(z, 0)?;
    let lc = g.squared_error(z0, c_ppix)?;
    let zr = if unit_norm_reconstruction { g.row_normalize(z)? } else { z };
    let rec = g.fixed_linear(zr, Arc::clone(matrix), cfg.m, cfg.k)?;
    let lr = g.squared_error(rec, fluo)?;
    let sc = g.param(store, sc);
    let sr = g.param(store, sr);
    g.homoscedastic(vec![lc, lr], vec![sc, sr])
}

/// The same objective for one sample and plain σ values.
pub fn acunet_loss(
    z: &AbundanceVector,
    c_ppix: Option<f64>,
    lib: &EndmemberLibrary,
    fluo: &Spectrum,
    sigma_c: f64,
    sigma_rec: f64,
) -> Result<f64> {
    let c = c_ppix.ok_or_else(|| Error::Usage("acu-net loss needs a PpIX label".into()))?;
    let rec = mix(lib, z)?;
    let lr = mse(rec.values(), fluo.values())? * fluo.len() as f64;
    homoscedastic_loss(&[(z.ppix634() - c).powi(2), lr], &[sigma_c, sigma_rec])
}
