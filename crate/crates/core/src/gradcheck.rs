//! Central finite-difference checks of analytic gradients, in f64.
//!
//! The scalar probed is `sum(w * y)` for a fixed random `w` of the output's
//! shape, so every output element contributes with a different weight.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const FD_STEP: f64 = 1e-5;
pub const REL_TOL: f64 = 1e-3;
pub const ABS_FLOOR: f64 = 1e-8;

/// Outcome of one gradient check.
#[derive(Debug, Clone)]
pub struct CheckResult {
    pub name: String,
    pub checked: usize,
    pub max_rel: f64,
    pub max_abs: f64,
    /// First failing element as `(input label, flat index, analytic, numeric)`.
    pub failure: Option<(String, usize, f64, f64)>,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.failure.is_none()
    }
}

impl fmt::Display for CheckResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:<32} {:>6} elems  max rel {:.2e}  max abs {:.2e}  {}",
            self.name,
            self.checked,
            self.max_rel,
            self.max_abs,
            if self.passed() { "ok" } else { "FAIL" }
        )?;
        if let Some((label, i, a, n)) = &self.failure {
            write!(f, "  [{label}[{i}]: analytic {a:.6e} vs numeric {n:.6e}]")?;
        }
        Ok(())
    }
}

fn seed_of(name: &str) -> u64 {
    name.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

/// Deterministic subset of `0..len` of size at most `max`.
fn sample_indices(len: usize, max: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    if len <= max {
        return (0..len).collect();
    }
    let mut idx: Vec<usize> = (0..max).map(|_| rng.gen_range(0..len)).collect();
    idx.sort_unstable();
    idx.dedup();
    idx
}

fn probe(g: &mut Graph<f64>, y: Var, weights: &mut Option<Tensor<f64>>, seed: u64) -> Result<Var> {
    let shape = g.shape(y).to_vec();
    let w = weights
        .get_or_insert_with(|| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
            Tensor::rand_uniform(&shape, -1.0, 1.0, &mut rng)
        })
        .clone();
    if w.shape() != shape.as_slice() {
        return Err(Error::GradCheck("output shape changed under perturbation".into()));
    }
    let wv = g.constant(w);
    let p = g.mul(y, wv)?;
    g.sum(p)
}

struct Tally {
    checked: usize,
    max_rel: f64,
    max_abs: f64,
    failure: Option<(String, usize, f64, f64)>,
}

impl Tally {
    fn new() -> Self {
        Self {
            checked: 0,
            max_rel: 0.0,
            max_abs: 0.0,
            failure: None,
        }
    }

    fn add(&mut self, label: &str, i: usize, a: f64, n: f64) {
        self.checked += 1;
        let diff = (a - n).abs();
        let scale = a.abs().max(n.abs());
        self.max_abs = self.max_abs.max(diff);
        let ok = if scale > ABS_FLOOR {
            let rel = diff / scale;
            self.max_rel = self.max_rel.max(rel);
            rel < REL_TOL
        } else {
            diff < ABS_FLOOR
        };
        if !ok && self.failure.is_none() {
            self.failure = Some((label.to_string(), i, a, n));
        }
    }

    fn finish(self, name: &str) -> CheckResult {
        CheckResult {
            name: name.to_string(),
            checked: self.checked,
            max_rel: self.max_rel,
            max_abs: self.max_abs,
            failure: self.failure,
        }
    }
}

/// Checks gradients w.r.t. every tensor in `inputs` (at most `max_elems` sampled elements each).
pub fn check_inputs<F>(name: &str, inputs: &[Tensor<f64>], max_elems: usize, f: F) -> Result<CheckResult>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let seed = seed_of(name);
    let mut weights = None;
    let eval = |xs: &[Tensor<f64>], weights: &mut Option<Tensor<f64>>| -> Result<(Graph<f64>, Vec<Var>, Var)> {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|x| g.input(x.clone())).collect();
        let y = f(&mut g, &vars)?;
        let l = probe(&mut g, y, weights, seed)?;
        Ok((g, vars, l))
    };
    let (g, vars, loss) = eval(inputs, &mut weights)?;
    let grads = g.backward(loss)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tally = Tally::new();
    let mut xs = inputs.to_vec();
    for (k, &v) in vars.iter().enumerate() {
        let zero = Tensor::zeros(inputs[k].shape());
        let analytic = grads.get(v).unwrap_or(&zero).clone();
        for i in sample_indices(inputs[k].len(), max_elems, &mut rng) {
            let x0 = xs[k].data()[i];
            xs[k].data_mut()[i] = x0 + FD_STEP;
            let (gp, _, lp) = eval(&xs, &mut weights)?;
            xs[k].data_mut()[i] = x0 - FD_STEP;
            let (gm, _, lm) = eval(&xs, &mut weights)?;
            xs[k].data_mut()[i] = x0;
            let numeric = (gp.value(lp).item() - gm.value(lm).item()) / (2.0 * FD_STEP);
            tally.add(&format!("input{k}"), i, analytic.data()[i], numeric);
        }
    }
    Ok(tally.finish(name))
}

/// Checks gradients w.r.t. the named parameters of a store.
pub fn check_params<F>(
    name: &str,
    store: &ParamStore<f64>,
    names: &[String],
    max_elems: usize,
    f: F,
) -> Result<CheckResult>
where
    F: Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var>,
{
    let seed = seed_of(name);
    let mut weights = None;
    let eval = |s: &ParamStore<f64>, weights: &mut Option<Tensor<f64>>| -> Result<(Graph<f64>, Var)> {
        let mut g = Graph::new();
        let y = f(&mut g, s)?;
        let l = probe(&mut g, y, weights, seed)?;
        Ok((g, l))
    };
    let (g, loss) = eval(store, &mut weights)?;
    let grads = g.backward(loss)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tally = Tally::new();
    let mut s = store.clone();
    for pname in names {
        let t = store
            .get(pname)
            .ok_or_else(|| Error::GradCheck(format!("unknown parameter {pname}")))?;
        let zero = Tensor::zeros(t.shape());
        let analytic = grads.param(pname).unwrap_or(&zero).clone();
        for i in sample_indices(t.len(), max_elems, &mut rng) {
            let x0 = t.data()[i];
            s.get_mut(pname).unwrap().data_mut()[i] = x0 + FD_STEP;
            let (gp, lp) = eval(&s, &mut weights)?;
            s.get_mut(pname).unwrap().data_mut()[i] = x0 - FD_STEP;
            let (gm, lm) = eval(&s, &mut weights)?;
            s.get_mut(pname).unwrap().data_mut()[i] = x0;
            let numeric = (gp.value(lp).item() - gm.value(lm).item()) / (2.0 * FD_STEP);
            tally.add(pname, i, analytic.data()[i], numeric);
        }
    }
    Ok(tally.finish(name))
}

/// Gradient suites grouped by pipeline module.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Suite {
    Core,
    Geometry,
    Ldm,
    Attention,
    Network,
}

impl Suite {
    pub const ALL: [Suite; 5] = [Suite::Core, Suite::Geometry, Suite::Ldm, Suite::Attention, Suite::Network];

    pub fn name(self) -> &'static str {
        match self {
            Suite::Core => "core",
            Suite::Geometry => "geometry",
            Suite::Ldm => "ldm",
            Suite::Attention => "attention",
            Suite::Network => "network",
        }
    }

    pub fn parse(s: &str) -> Option<Vec<Suite>> {
        match s {
            "all" => Some(Self::ALL.to_vec()),
            _ => Self::ALL.iter().copied().find(|m| m.name() == s).map(|m| vec![m]),
        }
    }

    pub fn run(self) -> Result<Vec<CheckResult>> {
        match self {
            Suite::Core => suites::core(),
            Suite::Geometry => suites::geometry(),
            Suite::Ldm => suites::ldm(),
            Suite::Attention => suites::attention(),
            Suite::Network => suites::network(),
        }
    }
}

mod suites;
