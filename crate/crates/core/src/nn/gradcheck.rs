//! Central finite-difference verification of analytic gradients.

use rand::{seq::index, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;

use super::network::{network_backward, network_forward, LayerSpec, NetworkSpec, ParamStore, Trace};
use super::ops::{self, Segment};
use crate::error::{Error, Result};

pub const FD_EPSILON: f64 = 1e-5;
/// Gradients smaller than this are compared absolutely.
const REL_FLOOR: f64 = 1e-6;

/// Objective evaluated on the network output.
#[derive(Debug, Clone)]
pub enum Objective {
    /// Cross-entropy of per-row labels; the network must end in softmax.
    CrossEntropy(Vec<usize>),
    /// Mean squared error against a target of the output's shape.
    Mse(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    /// Parameters skipped because a perturbation crossed a ReLU or max-pool
    /// switching point.
    pub skipped: usize,
}

pub struct Problem<'a> {
    pub spec: &'a NetworkSpec,
    pub input: &'a [f64],
    pub aux: &'a [&'a [f64]],
    pub segments: &'a [Segment],
    pub objective: &'a Objective,
}

impl Problem<'_> {
    fn run(&self, params: &ParamStore) -> Result<(f64, Trace)> {
        let trace = network_forward(self.spec, params, self.input, self.aux, self.segments, usize::MAX)?;
        let loss = match self.objective {
            Objective::CrossEntropy(labels) => {
                let k = self.spec.output_dim();
                let labels: Vec<Option<usize>> = labels.iter().map(|&l| Some(l)).collect();
                ops::ce_masked(trace.output(), k, &labels).0
            }
            Objective::Mse(target) => {
                ops::mse_masked(trace.output(), target, self.spec.output_dim(), &vec![true; trace.rows]).0
            }
        };
        Ok((loss, trace))
    }

    /// Loss at `plus` minus loss at `minus`, summed term by term so the
    /// difference does not cancel against the full loss.
    fn loss_difference(&self, plus: &[f64], minus: &[f64]) -> f64 {
        match self.objective {
            Objective::CrossEntropy(labels) => {
                let k = self.spec.output_dim();
                let nll = |p: &[f64], r: usize, c: usize| p[r * k + c].max(ops::PROB_FLOOR).ln();
                let sum: f64 = labels.iter().enumerate().map(|(r, &c)| nll(minus, r, c) - nll(plus, r, c)).sum();
                sum / labels.len().max(1) as f64
            }
            Objective::Mse(target) => {
                let sum: f64 = plus
                    .iter()
                    .zip(minus)
                    .zip(target)
                    .map(|((p, m), t)| (p - m) * (p + m - 2.0 * t))
                    .sum();
                sum / target.len().max(1) as f64
            }
        }
    }

    /// Analytic loss gradient for every parameter.
    pub fn gradient(&self, params: &ParamStore) -> Result<(f64, ParamStore)> {
        let (loss, trace) = self.run(params)?;
        let k = self.spec.output_dim();
        let grads = match self.objective {
            Objective::CrossEntropy(labels) => {
                let sm = self
                    .spec
                    .softmax_index()
                    .filter(|&i| i + 1 == self.spec.layers.len())
                    .ok_or_else(|| Error::Invalid("cross-entropy needs a final softmax layer".into()))?;
                let labels: Vec<Option<usize>> = labels.iter().map(|&l| Some(l)).collect();
                let (_, g) = ops::ce_masked(trace.output(), k, &labels);
                network_backward(self.spec, params, &trace, g, sm)?
            }
            Objective::Mse(target) => {
                let (_, g) = ops::mse_masked(trace.output(), target, k, &vec![true; trace.rows]);
                network_backward(self.spec, params, &trace, g, self.spec.layers.len())?
            }
        };
        Ok((loss, grads))
    }
}

/// ReLU sign pattern and max-pool winners; a perturbation that changes
/// either crossed a kink where central differences are meaningless.
fn switch_pattern(spec: &NetworkSpec, trace: &Trace) -> (Vec<bool>, Vec<u32>) {
    let mut signs = Vec::new();
    for (i, layer) in spec.layers.iter().enumerate() {
        if let LayerSpec::ReLU { .. } = layer {
            signs.extend(trace.acts[i].iter().map(|v| *v > 0.0));
        }
    }
    (signs, trace.pool_winners())
}

/// Compares analytic gradients with central differences on up to
/// `per_tensor` randomly chosen entries of every parameter tensor.
pub fn gradient_check(problem: &Problem, params: &ParamStore, per_tensor: usize, seed: u64) -> Result<GradCheckReport> {
    problem.spec.validate()?;
    params.check_matches(problem.spec)?;
    let (_, analytic) = problem.gradient(params)?;
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);

    let mut picks = Vec::new();
    let mut offset = 0;
    for t in params.tensors() {
        let k = per_tensor.min(t.len());
        let mut chosen: Vec<usize> = index::sample(&mut rng, t.len(), k).into_iter().collect();
        chosen.sort_unstable();
        picks.extend(chosen.into_iter().map(|i| offset + i));
        offset += t.len();
    }

    let (_, base_trace) = problem.run(params)?;
    let base_pattern = switch_pattern(problem.spec, &base_trace);

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        checked: 0,
        skipped: 0,
    };
    let mut work = params.clone();
    for i in picks {
        let orig = work.get(i);
        work.set(i, orig + FD_EPSILON);
        let (_, tp) = problem.run(&work)?;
        work.set(i, orig - FD_EPSILON);
        let (_, tm) = problem.run(&work)?;
        work.set(i, orig);
        if switch_pattern(problem.spec, &tp) != base_pattern
            || switch_pattern(problem.spec, &tm) != base_pattern
        {
            report.skipped += 1;
            continue;
        }
        let numeric = problem.loss_difference(tp.output(), tm.output()) / (2.0 * FD_EPSILON);
        let a = analytic.get(i);
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR);
        report.max_rel_error = report.max_rel_error.max(rel);
        report.checked += 1;
    }
    Ok(report)
}
