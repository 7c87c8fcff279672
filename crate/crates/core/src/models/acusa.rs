//! Two-stage model: a shallow normalization CNN `g` followed by an unmixing
//! autoencoder whose encoder `f` is shared with a twin that sees the pure
//! endmember spectra, and whose decoder is the fixed map `z ↦ Bz`.
//!
//! Stage 1 trains `f` alone on corrected spectra. Stage 2 freezes `f` and
//! trains `g` so that `f(g(fluo, ref))₀` matches the PpIX label.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::acunet::{check_library, config_json, pair_examples, stack_pairs, AcuNetConfig, AcuNetLayout, Layer, PREDICT_CHUNK};
use super::train::{fit, Examples, FitOutcome, TrainConfig};
use crate::error::{Error, Result};
use crate::nn::checkpoint::{self, Checkpoint, Dtype};
use crate::nn::{Graph, LossWeights, NodeId, ParamStore, Tensor};
use crate::spectral::{AbundanceVector, EndmemberLibrary, LabeledSample, Role, Spectrum};

pub const ARCH_HU: &str = "acu-sa-hu";
pub const ARCH_NORM: &str = "acu-sa-norm";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NormConfig {
    pub m: usize,
    pub in_channels: usize,
    /// Widths of the hidden layers; the output layer has one channel.
    pub channels: Vec<usize>,
    /// One kernel per layer, hidden layers first.
    pub kernels: Vec<usize>,
    pub seed: u64,
}

impl Default for NormConfig {
    fn default() -> Self {
        Self {
            m: 100,
            in_channels: 2,
            channels: vec![16, 16, 16],
            kernels: vec![5, 5, 3, 3],
            seed: 1,
        }
    }
}

impl NormConfig {
    pub fn validate(&self) -> Result<()> {
        if self.kernels.len() != self.channels.len() + 1 {
            return Err(Error::Config(format!(
                "{} hidden layers need {} kernels, got {}",
                self.channels.len(),
                self.channels.len() + 1,
                self.kernels.len()
            )));
        }
        if self.kernels.iter().any(|k| k % 2 == 0) {
            return Err(Error::Config("normalization kernels must be odd".into()));
        }
        if self.m == 0 || self.in_channels == 0 || self.channels.contains(&0) {
            return Err(Error::Config("normalization net sizes must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AcuSaConfig {
    pub hu: AcuNetConfig,
    pub norm: NormConfig,
}

impl Default for AcuSaConfig {
    fn default() -> Self {
        Self {
            hu: AcuNetConfig { in_channels: 1, seed: 2, ..AcuNetConfig::default() },
            norm: NormConfig::default(),
        }
    }
}

impl AcuSaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hu.in_channels != 1 {
            return Err(Error::Config("the unmixing encoder takes one input channel".into()));
        }
        if self.norm.m != self.hu.m {
            return Err(Error::dim("normalization net length", self.hu.m, self.norm.m));
        }
        self.hu.validate()?;
        self.norm.validate()
    }
}

/// Convolution stack `(b, 2, m) → (b, 1, m)`, ReLU after every layer.
#[derive(Debug, Clone)]
pub struct NormLayout {
    pub cfg: NormConfig,
    layers: Vec<Layer>,
}

impl NormLayout {
    pub fn register(cfg: &NormConfig, store: &mut ParamStore) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut layers = Vec::new();
        let mut c_in = cfg.in_channels;
        let last = cfg.kernels.len();
        for (i, (&k, &c_out)) in cfg.kernels.iter().zip(cfg.channels.iter().chain([1].iter())).enumerate() {
            let name = format!("norm.conv{}", i + 1);
            layers.push(if i + 1 == last {
                Layer::output(store, &name, vec![c_out, c_in, k])?
            } else {
                Layer::conv(store, &name, c_in, c_out, k, &mut rng)?
            });
            c_in = c_out;
        }
        Ok(Self { cfg: cfg.clone(), layers })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: NodeId, frozen: bool) -> Result<NodeId> {
        let shape = g.value(x).shape().to_vec();
        if shape.len() != 3 || shape[1] != self.cfg.in_channels || shape[2] != self.cfg.m {
            return Err(Error::dim("normalization input", self.cfg.m, *shape.last().unwrap_or(&0)));
        }
        let mut h = x;
        for layer in &self.layers {
            let (w, b) = layer.nodes(g, store, frozen);
            let c = g.conv1d(h, w, b)?;
            h = g.relu(c)?;
        }
        Ok(h)
    }
}

#[derive(Debug, Clone)]
pub struct AcuSa {
    pub cfg: AcuSaConfig,
    pub lib: EndmemberLibrary,
    pub hu: AcuNetLayout,
    /// `σ_rec` and `σ_EG` live next to the encoder weights.
    pub weights: LossWeights,
    pub hu_params: ParamStore,
    pub norm: NormLayout,
    pub norm_params: ParamStore,
}

impl AcuSa {
    pub fn build(cfg: &AcuSaConfig, lib: &EndmemberLibrary) -> Result<Self> {
        cfg.validate()?;
        check_library(&cfg.hu, lib)?;
        let mut hu_params = ParamStore::new();
        let hu = AcuNetLayout::register(&cfg.hu, &mut hu_params, "hu.")?;
        let weights = LossWeights::register(&mut hu_params, false, true, true)?;
        let mut norm_params = ParamStore::new();
        let norm = NormLayout::register(&cfg.norm, &mut norm_params)?;
        Ok(Self { cfg: cfg.clone(), lib: lib.clone(), hu, weights, hu_params, norm, norm_params })
    }

    pub fn m(&self) -> usize {
        self.cfg.hu.m
    }

    pub fn k(&self) -> usize {
        self.cfg.hu.k
    }

    /// Endmember columns as a `(K, 1, m)` batch.
    pub fn pure_batch(&self) -> Tensor {
        let data = (0..self.k()).flat_map(|j| self.lib.column(j)).collect();
        Tensor::new(vec![self.k(), 1, self.m()], data).expect("library shape")
    }

    /// Encoder `f` on a `(b, 1, m)` node.
    pub fn encode(&self, g: &mut Graph, store: &ParamStore, x: NodeId, frozen: bool) -> Result<NodeId> {
        self.hu.forward(g, store, x, frozen)
    }

    /// Twin encoder on the pure endmembers; same parameters, same graph.
    pub fn twin(&self, g: &mut Graph, store: &ParamStore, frozen: bool) -> Result<NodeId> {
        let x = g.input(self.pure_batch())?;
        self.hu.forward(g, store, x, frozen)
    }

    /// Fixed decoder `z ↦ Bz`.
    pub fn decode(&self, g: &mut Graph, z: NodeId) -> Result<NodeId> {
        g.fixed_linear(z, self.lib.shared_matrix(), self.m(), self.k())
    }

    /// Decoder outputs for plain abundance rows.
    pub fn decode_values(&self, z: &[f64]) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let zi = g.input(Tensor::new(vec![z.len() / self.k().max(1), self.k()], z.to_vec())?)?;
        let y = self.decode(&mut g, zi)?;
        Ok(g.value(y).data().to_vec())
    }

    /// Guidance plus reconstruction objective on a `(b, 1, m)` batch of
    /// corrected spectra.
    pub fn stage1_loss(&self, g: &mut Graph, store: &ParamStore, x: Tensor) -> Result<NodeId> {
        let (s_rec, s_eg) = match (self.weights.log_sigma_rec, self.weights.log_sigma_eg) {
            (Some(r), Some(e)) => (r, e),
            _ => return Err(Error::Usage("stage-1 loss needs σ_rec and σ_EG".into())),
        };
        let target = x.data().to_vec();
        let xi = g.input(x)?;
        let z = self.encode(g, store, xi, false)?;
        let rec = self.decode(g, z)?;
        let l_rec = g.squared_error(rec, target)?;
        let logits = self.twin(g, store, false)?;
        let l_eg = g.softmax_ce(logits, (0..self.k()).collect())?;
        let se = g.param(store, s_eg);
        let sr = g.param(store, s_rec);
        g.homoscedastic(vec![l_eg, l_rec], vec![se, sr])
    }

    /// `(f(g(x))₀ - c)²` averaged over a `(b, 2, m)` batch, with `f` frozen.
    pub fn stage2_loss(&self, g: &mut Graph, hu: &ParamStore, norm: &ParamStore, x: Tensor, c_ppix: Vec<f64>) -> Result<NodeId> {
        let xi = g.input(x)?;
        let corrected = self.norm.forward(g, norm, xi, false)?;
        let z = self.encode(g, hu, corrected, true)?;
        let z0 = g.column(z, 0)?;
        g.squared_error(z0, c_ppix)
    }

    /// Softmax argmax of the twin encoder on each pure endmember.
    pub fn guidance_argmax(&self) -> Result<Vec<usize>> {
        let mut g = Graph::new();
        let logits = self.twin(&mut g, &self.hu_params, true)?;
        Ok(g.value(logits)
            .data()
            .chunks_exact(self.k())
            .map(|row| {
                row.iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
                    .0
            })
            .collect())
    }

    /// Encoder abundances for corrected spectra rows (`b × m`).
    pub fn unmix_values(&self, spectra: &[f64]) -> Result<Vec<f64>> {
        let m = self.m();
        let mut out = Vec::with_capacity(spectra.len() / m * self.k());
        for chunk in spectra.chunks(PREDICT_CHUNK * m) {
            let mut g = Graph::new();
            let x = g.input(Tensor::new(vec![chunk.len() / m, 1, m], chunk.to_vec())?)?;
            let z = self.encode(&mut g, &self.hu_params, x, true)?;
            out.extend_from_slice(g.value(z).data());
        }
        Ok(out)
    }

    /// Normalization-net output for a `(b, 2, m)` tensor, row-major `b × m`.
    pub fn correct_values(&self, x: Tensor) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let xi = g.input(x)?;
        let y = self.norm.forward(&mut g, &self.norm_params, xi, true)?;
        Ok(g.value(y).data().to_vec())
    }

    /// Corrected spectrum `g(fluo, ref)` and abundances `f(g(·))` per sample.
    pub fn predict(&self, samples: &[LabeledSample]) -> Result<Vec<(Spectrum, AbundanceVector)>> {
        let (m, k) = (self.m(), self.k());
        let mut out = Vec::with_capacity(samples.len());
        for chunk in samples.chunks(PREDICT_CHUNK) {
            let corrected = self.correct_values(stack_pairs(chunk, m)?)?;
            let z = self.unmix_values(&corrected)?;
            for (i, s) in chunk.iter().enumerate() {
                let spec = Spectrum::new(s.grid().clone(), corrected[i * m..(i + 1) * m].to_vec(), Role::Corrected)?;
                out.push((spec, AbundanceVector::new(z[i * k..(i + 1) * k].to_vec())?));
            }
        }
        Ok(out)
    }

    /// Stage 1: self-supervised unmixing of corrected spectra. `train` and
    /// `test` are single-channel examples labeled by their true PpIX634
    /// abundance, which only feeds the reported test R.
    pub fn train_stage1(&mut self, train: &Examples, test: &Examples, tc: &TrainConfig) -> Result<FitOutcome> {
        for e in [train, test] {
            if e.channels != 1 || e.m != self.m() {
                return Err(Error::dim("stage-1 examples", self.m(), e.m));
            }
        }
        let mut params = std::mem::take(&mut self.hu_params);
        let me = &*self;
        let out = fit(
            &mut params,
            train,
            test,
            tc,
            |g, store, data, idx| me.stage1_loss(g, store, data.batch_input(idx)),
            |store, data| me.encoder_z0(store, data),
        );
        self.hu_params = params;
        out
    }

    /// Stage 2: trains the normalization net against PpIX labels with the
    /// encoder frozen.
    pub fn train_stage2(&mut self, train: &[LabeledSample], test: &[LabeledSample], tc: &TrainConfig) -> Result<FitOutcome> {
        let tr = pair_examples(train, self.m())?;
        let te = pair_examples(test, self.m())?;
        let mut params = std::mem::take(&mut self.norm_params);
        let me = &*self;
        let out = fit(
            &mut params,
            &tr,
            &te,
            tc,
            |g, store, data, idx| me.stage2_loss(g, &me.hu_params, store, data.batch_input(idx), data.batch_labels(idx)),
            |store, data| {
                let idx: Vec<usize> = (0..data.len()).collect();
                let mut z0 = Vec::with_capacity(data.len());
                for c in idx.chunks(PREDICT_CHUNK) {
                    let mut g = Graph::new();
                    let x = g.input(data.batch_input(c))?;
                    let y = me.norm.forward(&mut g, store, x, true)?;
                    let z = me.encode(&mut g, &me.hu_params, y, true)?;
                    z0.extend(g.value(z).data().chunks_exact(me.k()).map(|r| r[0]));
                }
                Ok(z0)
            },
        );
        self.norm_params = params;
        out
    }

    fn encoder_z0(&self, store: &ParamStore, data: &Examples) -> Result<Vec<f64>> {
        let idx: Vec<usize> = (0..data.len()).collect();
        let mut z0 = Vec::with_capacity(data.len());
        for c in idx.chunks(PREDICT_CHUNK) {
            let mut g = Graph::new();
            let x = g.input(data.batch_input(c))?;
            let z = self.encode(&mut g, store, x, true)?;
            z0.extend(g.value(z).data().chunks_exact(self.k()).map(|r| r[0]));
        }
        Ok(z0)
    }

    pub fn save(&self, hu_path: &Path, norm_path: &Path, provenance: serde_json::Value) -> Result<()> {
        let cfg = config_json(&self.cfg)?;
        checkpoint::save(hu_path, ARCH_HU, cfg.clone(), provenance.clone(), &self.hu_params, Dtype::F64)?;
        checkpoint::save(norm_path, ARCH_NORM, cfg, provenance, &self.norm_params, Dtype::F64)
    }

    /// Rebuilds from an encoder checkpoint and, if given, a normalization
    /// checkpoint; without one the normalization net keeps its fresh
    /// initialization.
    pub fn from_checkpoints(lib: &EndmemberLibrary, hu: &Checkpoint, norm: Option<&Checkpoint>) -> Result<Self> {
        let expect = |ck: &Checkpoint, arch: &str| {
            if ck.manifest.arch == arch {
                Ok(())
            } else {
                Err(Error::Config(format!("checkpoint holds '{}', expected '{arch}'", ck.manifest.arch)))
            }
        };
        expect(hu, ARCH_HU)?;
        let cfg: AcuSaConfig = serde_json::from_value(hu.manifest.config.clone())
            .map_err(|e| Error::Config(format!("checkpoint config: {e}")))?;
        let mut model = Self::build(&cfg, lib)?;
        model.hu_params.load_values_from(&hu.params)?;
        if let Some(n) = norm {
            expect(n, ARCH_NORM)?;
            model.norm_params.load_values_from(&n.params)?;
        }
        Ok(model)
    }
}

/// Single-channel stage-1 examples from corrected spectra and their true
/// abundances.
pub fn corrected_examples(spectra: &[(Spectrum, AbundanceVector)], m: usize) -> Result<Examples> {
    let mut inputs = Vec::with_capacity(spectra.len() * m);
    let mut labels = Vec::with_capacity(spectra.len());
    for (s, z) in spectra {
        if s.len() != m {
            return Err(Error::dim("corrected spectrum", m, s.len()));
        }
        inputs.extend_from_slice(s.values());
        labels.push(z.ppix634());
    }
    Ok(Examples { channels: 1, m, recon: inputs.clone(), inputs, labels })
}

/// Reference evaluation of the stage-1 objective from plain encoder outputs:
/// `z` is `b × K` for inputs `x` (`b × m`), `logits` is the twin output on
/// the K pure endmembers.
pub fn stage1_objective(
    lib: &EndmemberLibrary,
    z: &[f64],
    x: &[f64],
    logits: &[f64],
    sigma_eg: f64,
    sigma_rec: f64,
) -> Result<f64> {
    let (m, k) = (lib.m(), lib.k());
    let b = x.len() / m;
    let mut rec = 0.0;
    let mut y = vec![0.0; m];
    for i in 0..b {
        crate::spectral::mix_into(lib.matrix(), k, &z[i * k..(i + 1) * k], &mut y);
        rec += y.iter().zip(&x[i * m..(i + 1) * m]).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
    }
    rec /= b as f64;
    let ce: f64 = logits
        .chunks_exact(k)
        .enumerate()
        .map(|(j, row)| crate::nn::softmax_ce(row, j))
        .sum::<f64>()
        / k as f64;
    crate::nn::homoscedastic_loss(&[ce, rec], &[sigma_eg, sigma_rec])
}
