//! Finite-difference sweep over every graph kernel and every training
//! objective, used by `luxmix gradcheck` and the test suites.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::Result;
use crate::models::acunet::{acunet_loss_graph, stack_pairs};
use crate::models::{AcuNet, AcuNetConfig, AcuSa, AcuSaConfig};
use crate::nn::gradcheck::{gradcheck, Evaluation, GradcheckReport};
use crate::nn::{Graph, NodeId, ParamStore, Tensor};
use crate::simulate::{simulate_dataset, SimConfig};
use crate::spectral::LabeledSample;

pub const SWEEP_EPS: f64 = 1e-5;
pub const SWEEP_PROBES: usize = 100;
pub const SWEEP_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone)]
pub struct SweepCase {
    pub name: &'static str,
    pub report: GradcheckReport,
}

impl SweepCase {
    pub fn passed(&self) -> bool {
        self.report.max_rel_error <= SWEEP_TOLERANCE
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: Vec<usize>, lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).expect("shape")
}

/// Values bounded away from zero so ReLU and max-pool ties are unlikely.
fn spread(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor {
    let mut t = uniform(rng, shape, 0.1, 1.0);
    for v in t.data_mut() {
        if rng.random_bool(0.5) {
            *v = -*v;
        }
    }
    t
}

fn evaluate<F>(store: &ParamStore, grads: bool, build: &F) -> Result<Evaluation>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<NodeId>,
{
    let mut g = Graph::new();
    let loss = build(&mut g, store)?;
    let gradients = if grads { Some(g.backward(loss)?) } else { None };
    Ok(Evaluation { value: g.value(loss).data()[0], gradients, signature: g.kink_signature() })
}

fn check<F>(name: &'static str, mut store: ParamStore, probes: usize, seed: u64, build: F) -> Result<SweepCase>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<NodeId>,
{
    let report = gradcheck(&mut store, SWEEP_EPS, probes, seed, |s, grads| evaluate(s, grads, &build))?;
    Ok(SweepCase { name, report })
}

/// Squared error against a fixed random target turns any node into a scalar.
fn readout(g: &mut Graph, x: NodeId, target: &[f64]) -> Result<NodeId> {
    g.squared_error(x, target.to_vec())
}

fn kernel_cases(probes: usize, seed: u64) -> Result<Vec<SweepCase>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let target = |rng: &mut ChaCha8Rng, n: usize| -> Vec<f64> { (0..n).map(|_| rng.random_range(-1.0..1.0)).collect() };

    let mut s = ParamStore::new();
    let x = s.add("x", spread(&mut rng, vec![2, 3, 13]), false)?;
    let w = s.add("w", spread(&mut rng, vec![4, 3, 5]), true)?;
    let b = s.add("b", spread(&mut rng, vec![4]), false)?;
    let t = target(&mut rng, 2 * 4 * 13);
    out.push(check("conv1d", s, probes, seed, move |g, st| {
        let (x, w, b) = (g.param(st, x), g.param(st, w), g.param(st, b));
        let y = g.conv1d(x, w, b)?;
        readout(g, y, &t)
    })?);

    let mut s = ParamStore::new();
    let x = s.add("x", spread(&mut rng, vec![3, 7]), false)?;
    let w = s.add("w", spread(&mut rng, vec![5, 7]), true)?;
    let b = s.add("b", spread(&mut rng, vec![5]), false)?;
    let t = target(&mut rng, 15);
    out.push(check("dense", s, probes, seed, move |g, st| {
        let (x, w, b) = (g.param(st, x), g.param(st, w), g.param(st, b));
        let y = g.dense(x, w, b)?;
        readout(g, y, &t)
    })?);

    let mut s = ParamStore::new();
    let x = s.add("x", spread(&mut rng, vec![4, 9]), false)?;
    let t = target(&mut rng, 36);
    out.push(check("relu", s, probes, seed, move |g, st| {
        let x = g.param(st, x);
        let y = g.relu(x)?;
        readout(g, y, &t)
    })?);

    let mut s = ParamStore::new();
    let x = s.add("x", spread(&mut rng, vec![2, 3, 12]), false)?;
    let t = target(&mut rng, 2 * 3 * 6);
    out.push(check("maxpool1d", s, probes, seed, move |g, st| {
        let x = g.param(st, x);
        let y = g.maxpool1d(x, 2)?;
        readout(g, y, &t)
    })?);

    let mut s = ParamStore::new();
    let a = s.add("a", spread(&mut rng, vec![3, 6]), false)?;
    let c = s.add("c", spread(&mut rng, vec![3, 6]), false)?;
    let t = target(&mut rng, 18);
    out.push(check("add", s, probes, seed, move |g, st| {
        let (a, c) = (g.param(st, a), g.param(st, c));
        let y = g.add(a, c)?;
        readout(g, y, &t)
    })?);

    let mut s = ParamStore::new();
    let x = s.add("x", spread(&mut rng, vec![2, 3, 4]), false)?;
    let t = target(&mut rng, 24);
    out.push(check("flatten_reshape", s, probes, seed, move |g, st| {
        let x = g.param(st, x);
        let f = g.flatten(x)?;
        let y = g.reshape(f, vec![4, 6])?;
        readout(g, y, &t)
    })?);

    let (rows, cols) = (11, 5);
    let matrix: Arc<[f64]> = uniform(&mut rng, vec![rows * cols], 0.0, 1.0).into_data().into();
    let mut s = ParamStore::new();
    let z = s.add("z", uniform(&mut rng, vec![3, cols], 0.2, 1.0), false)?;
    let t = target(&mut rng, 3 * rows);
    out.push(check("fixed_linear", s, probes, seed, move |g, st| {
        let z = g.param(st, z);
        let y = g.fixed_linear(z, Arc::clone(&matrix), rows, cols)?;
        readout(g, y, &t)
    })?);

    let mut s = ParamStore::new();
    let z = s.add("z", uniform(&mut rng, vec![4, 5], 0.2, 1.0), false)?;
    let t = target(&mut rng, 20);
    let t0 = target(&mut rng, 4);
    out.push(check("row_normalize_column", s, probes, seed, move |g, st| {
        let z = g.param(st, z);
        let n = g.row_normalize(z)?;
        let a = readout(g, n, &t)?;
        let c = g.column(n, 0)?;
        let b = readout(g, c, &t0)?;
        let both = g.add(a, b)?;
        g.sum(both)
    })?);

    let mut s = ParamStore::new();
    let x = s.add("logits", spread(&mut rng, vec![5, 5]), false)?;
    out.push(check("softmax_ce", s, probes, seed, move |g, st| {
        let x = g.param(st, x);
        g.softmax_ce(x, vec![0, 1, 2, 3, 4])
    })?);

    let mut s = ParamStore::new();
    let a = s.add("a", spread(&mut rng, vec![6]), false)?;
    let c = s.add("c", spread(&mut rng, vec![6]), false)?;
    let l0 = s.add("log_sigma_a", Tensor::scalar(rng.random_range(-0.5..0.5)), false)?;
    let l1 = s.add("log_sigma_c", Tensor::scalar(rng.random_range(-0.5..0.5)), false)?;
    let (ta, tc) = (target(&mut rng, 6), target(&mut rng, 6));
    out.push(check("homoscedastic", s, probes, seed, move |g, st| {
        let (a, c) = (g.param(st, a), g.param(st, c));
        let la = readout(g, a, &ta)?;
        let lc = readout(g, c, &tc)?;
        let (s0, s1) = (g.param(st, l0), g.param(st, l1));
        g.homoscedastic(vec![la, lc], vec![s0, s1])
    })?);
    Ok(out)
}

/// Moves every parameter off its initial value so that zero-initialised
/// layers pass gradient to the layers below them.
fn jitter(store: &mut ParamStore, sd: f64, rng: &mut ChaCha8Rng) {
    let normal = Normal::new(0.0, sd).expect("sd > 0");
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        for v in store.get_mut(id).value.data_mut() {
            *v += normal.sample(rng);
        }
    }
}

fn batch(seed: u64, n: usize) -> Result<Vec<LabeledSample>> {
    let mut cfg = SimConfig::phantom(1, seed);
    cfg.concentration_levels = vec![0.6, 1.25];
    let all = simulate_dataset(&cfg)?;
    let step = (all.len() / n).max(1);
    Ok(all.into_iter().step_by(step).take(n).collect())
}

fn objective_cases(probes: usize, seed: u64) -> Result<Vec<SweepCase>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let samples = batch(seed, 4)?;
    let labels: Vec<f64> = samples.iter().map(|s| s.c_ppix.unwrap_or(0.0)).collect();
    let mut out = Vec::new();

    for unit in [false, true] {
        let mut net = AcuNet::build(&AcuNetConfig { seed, ..AcuNetConfig::default() })?;
        net.unit_norm_reconstruction = unit;
        jitter(&mut net.params, 0.02, &mut rng);
        let lib = SimConfig::phantom(1, seed).library;
        let matrix = lib.shared_matrix();
        let x = stack_pairs(&samples, lib.m())?;
        let fluo: Vec<f64> = samples.iter().flat_map(|s| s.fluo.values().iter().copied()).collect();
        let (layout, weights) = (net.layout.clone(), net.weights);
        let labels = labels.clone();
        let name = if unit { "acu-net objective (unit-norm z)" } else { "acu-net objective" };
        out.push(check(name, net.params, probes, seed, move |g, st| {
            let xi = g.input(x.clone())?;
            acunet_loss_graph(g, &layout, &weights, st, xi, &matrix, fluo.clone(), labels.clone(), unit)
        })?);
    }

    let lib = SimConfig::phantom(1, seed).library;
    let mut cfg = AcuSaConfig::default();
    cfg.hu.seed = seed.wrapping_add(1);
    cfg.norm.seed = seed.wrapping_add(2);
    let mut sa = AcuSa::build(&cfg, &lib)?;
    jitter(&mut sa.hu_params, 0.02, &mut rng);
    jitter(&mut sa.norm_params, 0.02, &mut rng);
    let m = sa.m();
    let corrected: Vec<f64> = samples.iter().flat_map(|s| s.fluo.values().iter().copied()).collect();
    let x1 = Tensor::new(vec![samples.len(), 1, m], corrected)?;
    let hu = std::mem::take(&mut sa.hu_params);
    let model = sa.clone();
    out.push(check("acu-sa stage-1 objective", hu.clone(), probes, seed, move |g, st| model.stage1_loss(g, st, x1.clone()))?);

    let x2 = stack_pairs(&samples, m)?;
    let norm = std::mem::take(&mut sa.norm_params);
    out.push(check("acu-sa stage-2 objective", norm, probes, seed, move |g, st| {
        sa.stage2_loss(g, &hu, st, x2.clone(), labels.clone())
    })?);
    Ok(out)
}

/// Runs every case with `probes` probes each.
pub fn gradient_sweep(probes: usize, seed: u64) -> Result<Vec<SweepCase>> {
    let mut cases = kernel_cases(probes, seed)?;
    cases.extend(objective_cases(probes, seed)?);
    Ok(cases)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn jitter_moves_every_parameter() {
        let mut s = ParamStore::new();
        let id = s.add("w", Tensor::zeros(vec![50]), true).unwrap();
        jitter(&mut s, 0.1, &mut ChaCha8Rng::seed_from_u64(1));
        assert!(s.value(id).data().iter().all(|v| *v != 0.0));
    }
}
