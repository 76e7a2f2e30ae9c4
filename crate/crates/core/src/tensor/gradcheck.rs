use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Graph, Real, Tensor, Var};
use crate::Result;

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    /// Central-difference half step.
    pub eps: f64,
    /// Coordinates to probe; every coordinate is probed when there are fewer.
    pub samples: usize,
    pub seed: u64,
    /// Lower bound on the relative-error denominator. Coordinates whose
    /// gradient is below it are effectively compared absolutely, with
    /// tolerance `floor * rel_tol`.
    pub floor: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions { eps: 1e-3, samples: 64, seed: 0, floor: 1e-8 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(input, flat index)` of the worst coordinate.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

/// Compares reverse-mode gradients of `f` against central differences.
///
/// Non-scalar outputs are reduced with a fixed random projection
/// `sum(r * f(x))`, so every output element contributes. The relative error
/// per coordinate is `|a - n| / max(floor, |a| + |n|)`.
pub fn grad_check<T, F>(f: F, inputs: &[Tensor<T>], opts: GradCheckOptions) -> Result<GradCheckReport>
where
    T: Real,
    F: Fn(&mut Graph<T>, &[Var]) -> Result<Var>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let out_shape = g.shape(out).to_vec();
    let proj: Tensor<T> = if g.value(out).numel() == 1 {
        Tensor::full(&out_shape, T::one())
    } else {
        Tensor::from_fn(&out_shape, |_| T::of(rng.gen_range(-1.0..1.0)))
    };
    let r = g.constant(proj.clone());
    let weighted = g.mul(out, r)?;
    let loss = g.sum(weighted);
    let grads = g.backward(loss)?;
    let analytic: Vec<Tensor<T>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| grads.get_or_zeros(v, t.shape()))
        .collect();

    let eval = |xs: &[Tensor<T>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.value(out)
            .data()
            .iter()
            .zip(proj.data())
            .map(|(a, b)| a.as_f64() * b.as_f64())
            .sum())
    };

    let offsets: Vec<usize> = inputs
        .iter()
        .scan(0, |acc, t| {
            let o = *acc;
            *acc += t.numel();
            Some(o)
        })
        .collect();
    let total: usize = inputs.iter().map(|t| t.numel()).sum();
    let mut coords: Vec<usize> = if total <= opts.samples {
        (0..total).collect()
    } else {
        sample(&mut rng, total, opts.samples).into_vec()
    };
    coords.sort_unstable();

    let mut report = GradCheckReport { max_rel_error: 0.0, worst: (0, 0), analytic: 0.0, numeric: 0.0, checked: 0 };
    let mut work = inputs.to_vec();
    for flat in coords {
        let which = offsets.partition_point(|&o| o <= flat) - 1;
        let idx = flat - offsets[which];
        let x0 = work[which].data()[idx];
        let plus = x0 + T::of(opts.eps);
        let minus = x0 - T::of(opts.eps);
        work[which].data_mut()[idx] = plus;
        let fp = eval(&work)?;
        work[which].data_mut()[idx] = minus;
        let fm = eval(&work)?;
        work[which].data_mut()[idx] = x0;
        // the representable step may differ from 2 eps in low precision
        let numeric = (fp - fm) / (plus.as_f64() - minus.as_f64());
        let a = analytic[which].data()[idx].as_f64();
        let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(opts.floor);
        report.checked += 1;
        if rel > report.max_rel_error || report.checked == 1 {
            report.max_rel_error = rel.max(report.max_rel_error);
            report.worst = (which, idx);
            report.analytic = a;
            report.numeric = numeric;
        }
    }
    Ok(report)
}
