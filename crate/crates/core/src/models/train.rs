//! Mini-batch training loop shared by every model and stage.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{adamw_step, AdamWConfig, Graph, NodeId, ParamStore, PlateauConfig, PlateauScheduler, Tensor};
use crate::spectral::pearson_r;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: AdamWConfig,
    pub scheduler: PlateauConfig,
    pub split: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_size: 64,
            optimizer: AdamWConfig::default(),
            scheduler: PlateauConfig::default(),
            split: 0.85,
            seed: 42,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.split > 0.0 && self.split < 1.0) {
            return Err(Error::Config(format!("split must lie in (0, 1), got {}", self.split)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be ≥ 1".into()));
        }
        if !(self.optimizer.lr >= 0.0) || !self.optimizer.lr.is_finite() {
            return Err(Error::Config("learning rate must be finite and ≥ 0".into()));
        }
        Ok(())
    }
}

/// Network inputs with one regression label per example.
///
/// `recon` holds the spectrum a reconstruction term compares against (the
/// measured fluorescence, or the input itself for self-supervised stages).
#[derive(Debug, Clone, PartialEq)]
pub struct Examples {
    pub channels: usize,
    pub m: usize,
    /// `n × channels × m`.
    pub inputs: Vec<f64>,
    /// `n × m`.
    pub recon: Vec<f64>,
    pub labels: Vec<f64>,
}

impl Examples {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.labels.len();
        if self.inputs.len() != n * self.channels * self.m {
            return Err(Error::dim("examples inputs", n * self.channels * self.m, self.inputs.len()));
        }
        if self.recon.len() != n * self.m {
            return Err(Error::dim("examples recon", n * self.m, self.recon.len()));
        }
        Ok(())
    }

    pub fn batch_input(&self, idx: &[usize]) -> Tensor {
        let w = self.channels * self.m;
        let mut data = Vec::with_capacity(idx.len() * w);
        for &i in idx {
            data.extend_from_slice(&self.inputs[i * w..(i + 1) * w]);
        }
        Tensor::new(vec![idx.len(), self.channels, self.m], data).expect("sizes agree")
    }

    pub fn batch_recon(&self, idx: &[usize]) -> Vec<f64> {
        let mut out = Vec::with_capacity(idx.len() * self.m);
        for &i in idx {
            out.extend_from_slice(&self.recon[i * self.m..(i + 1) * self.m]);
        }
        out
    }

    pub fn batch_labels(&self, idx: &[usize]) -> Vec<f64> {
        idx.iter().map(|&i| self.labels[i]).collect()
    }

    pub fn subset(&self, idx: &[usize]) -> Examples {
        Examples {
            channels: self.channels,
            m: self.m,
            inputs: self.batch_input(idx).into_data(),
            recon: self.batch_recon(idx),
            labels: self.batch_labels(idx),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub test_loss: f64,
    /// NaN when the correlation is undefined.
    pub test_r: f64,
    pub lr: f64,
}

pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut s = String::from("epoch,train_loss,test_loss,test_r,lr\n");
    for r in history {
        let _ = writeln!(s, "{},{:e},{:e},{},{:e}", r.epoch, r.train_loss, r.test_loss, r.test_r, r.lr);
    }
    s
}

#[derive(Debug, Clone)]
pub struct FitOutcome {
    pub history: Vec<EpochRecord>,
    /// Parameters at the epoch with the highest test R.
    pub best: ParamStore,
    pub best_epoch: usize,
}

/// Chunked evaluation of a loss over every example, averaged per example.
pub fn mean_loss<L>(store: &ParamStore, data: &Examples, chunk: usize, loss: &L) -> Result<f64>
where
    L: Fn(&mut Graph, &ParamStore, &Examples, &[usize]) -> Result<NodeId>,
{
    let idx: Vec<usize> = (0..data.len()).collect();
    let mut total = 0.0;
    for c in idx.chunks(chunk.max(1)) {
        let mut g = Graph::new();
        let l = loss(&mut g, store, data, c)?;
        total += g.value(l).data()[0] * c.len() as f64;
    }
    Ok(total / data.len().max(1) as f64)
}

/// Runs `tc.epochs` epochs of AdamW on `store`.
///
/// `loss` builds the scalar training objective for a batch of indices.
/// `predict` returns the model's concentration estimate for every example,
/// which is correlated with `labels` to give the per-epoch test R.
pub fn fit<L, P>(
    store: &mut ParamStore,
    train: &Examples,
    test: &Examples,
    tc: &TrainConfig,
    loss: L,
    predict: P,
) -> Result<FitOutcome>
where
    L: Fn(&mut Graph, &ParamStore, &Examples, &[usize]) -> Result<NodeId>,
    P: Fn(&ParamStore, &Examples) -> Result<Vec<f64>>,
{
    tc.validate()?;
    train.validate()?;
    test.validate()?;
    if train.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    let mut scheduler = PlateauScheduler::new(tc.optimizer.lr, tc.scheduler);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut history = Vec::with_capacity(tc.epochs);
    let mut best = store.clone();
    let mut best_r = f64::NAN;
    let mut best_epoch = 0;
    for epoch in 1..=tc.epochs {
        let lr = scheduler.lr();
        let hp = AdamWConfig { lr, ..tc.optimizer };
        let mut rng = ChaCha8Rng::seed_from_u64(tc.seed);
        rng.set_stream(epoch as u64);
        order.sort_unstable();
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        for batch in order.chunks(tc.batch_size) {
            let mut g = Graph::new();
            let l = loss(&mut g, store, train, batch)?;
            let value = g.value(l).data()[0];
            let grads = g.backward(l)?;
            if let Some(map) = grads.for_store(store) {
                adamw_step(store, map, &hp);
            }
            sum += value * batch.len() as f64;
        }
        let train_loss = sum / train.len() as f64;
        if !train_loss.is_finite() {
            return Err(Error::NonFinite { op: "training loss" });
        }
        let (test_loss, test_r) = if test.is_empty() {
            (f64::NAN, f64::NAN)
        } else {
            let tl = mean_loss(store, test, tc.batch_size.max(64), &loss)?;
            let pred = predict(store, test)?;
            (tl, pearson_r(&pred, &test.labels).unwrap_or(f64::NAN))
        };
        history.push(EpochRecord { epoch, train_loss, test_loss, test_r, lr });
        log::info!("epoch {epoch}: train {train_loss:.4e} test {test_loss:.4e} R {test_r:.4} lr {lr:.2e}");
        if epoch == 1 || test_r > best_r || (best_r.is_nan() && !test_r.is_nan()) {
            best_r = test_r;
            best = store.clone();
            best_epoch = epoch;
        }
        scheduler.step(train_loss);
    }
    Ok(FitOutcome { history, best, best_epoch })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamId;

    // y = w·x fitted by squared error on a single weight
    fn toy() -> (ParamStore, ParamId, Examples) {
        let mut s = ParamStore::new();
        let id = s.add("w", Tensor::new(vec![1, 1], vec![0.1]).unwrap(), false).unwrap();
        let xs: Vec<f64> = (0..40).map(|i| i as f64 / 40.0).collect();
        let ex = Examples {
            channels: 1,
            m: 1,
            inputs: xs.clone(),
            recon: xs.clone(),
            labels: xs.iter().map(|x| 3.0 * x).collect(),
        };
        (s, id, ex)
    }

    fn loss(id: ParamId) -> impl Fn(&mut Graph, &ParamStore, &Examples, &[usize]) -> Result<NodeId> {
        move |g, s, d, idx| {
            let x = g.input(Tensor::new(vec![idx.len(), 1], d.batch_recon(idx))?)?;
            let w = g.param(s, id);
            let b = g.input(Tensor::zeros(vec![1]))?;
            let y = g.dense(x, w, b)?;
            g.squared_error(y, d.batch_labels(idx))
        }
    }

    fn predict(id: ParamId) -> impl Fn(&ParamStore, &Examples) -> Result<Vec<f64>> {
        move |s, d| Ok(d.recon.iter().map(|x| x * s.value(id).data()[0]).collect())
    }

    #[test]
    fn learns_a_scalar_and_is_deterministic() {
        let tc = TrainConfig { epochs: 150, batch_size: 8, optimizer: AdamWConfig { lr: 0.05, weight_decay: 0.0, ..Default::default() }, ..Default::default() };
        let (mut s1, id, ex) = toy();
        let test = ex.subset(&[1, 5, 9, 30]);
        let h1 = fit(&mut s1, &ex, &test, &tc, loss(id), predict(id)).unwrap();
        assert!((s1.value(id).data()[0] - 3.0).abs() < 1e-2);
        let (mut s2, _, _) = toy();
        let h2 = fit(&mut s2, &ex, &test, &tc, loss(id), predict(id)).unwrap();
        assert_eq!(h1.history, h2.history);
        assert_eq!(s1.checksum(), s2.checksum());
    }

    #[test]
    fn zero_lr_is_a_no_op() {
        let tc = TrainConfig { epochs: 5, optimizer: AdamWConfig { lr: 0.0, ..Default::default() }, ..Default::default() };
        let (mut s, id, ex) = toy();
        let before = s.checksum();
        let out = fit(&mut s, &ex, &ex.subset(&[0, 1, 2]), &tc, loss(id), predict(id)).unwrap();
        assert_eq!(s.checksum(), before);
        let first = out.history[0].train_loss;
        // batches differ per epoch, so only the summation order changes
        assert!(out.history.iter().all(|r| (r.train_loss - first).abs() <= 1e-12 * first.abs()));
    }

    #[test]
    fn empty_training_set_is_config_error() {
        let (mut s, id, ex) = toy();
        let empty = ex.subset(&[]);
        let r = fit(&mut s, &empty, &ex, &TrainConfig::default(), loss(id), predict(id));
        assert!(matches!(r, Err(Error::Config(_))));
    }

    #[test]
    fn history_csv_header() {
        let csv = history_csv(&[EpochRecord { epoch: 1, train_loss: 0.5, test_loss: 0.25, test_r: 0.9, lr: 1e-3 }]);
        assert!(csv.starts_with("epoch,train_loss,test_loss,test_r,lr\n1,"));
    }
}
