//! Finite-difference verification of every differentiable operation, every
//! network block and the whole network.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::net::{self, DemMode, NetConfig};
use crate::tensor::{grad_check, ConvGeom, GradCheckOptions, GradCheckReport, Graph, ParamSet, Real, Tensor, Var};
use crate::Result;

#[derive(Clone, Debug)]
pub struct CheckResult {
    pub name: String,
    pub report: GradCheckReport,
    pub tolerance: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.report.max_rel_error < self.tolerance
    }
}

fn uniform<T: Real>(shape: &[usize], rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> Tensor<T> {
    Tensor::from_fn(shape, |_| T::of(rng.gen_range(lo..hi)))
}

/// Magnitudes in `[0.2, 1]` with random sign, clear of the relu kink.
fn off_zero<T: Real>(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<T> {
    Tensor::from_fn(shape, |_| {
        let m = rng.gen_range(0.2..1.0);
        T::of(if rng.gen_bool(0.5) { m } else { -m })
    })
}

/// A shuffled ramp: no two values are close, so max pooling has no near ties.
fn ramp<T: Real>(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let mut idx: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        idx.swap(i, rng.gen_range(0..=i));
    }
    Tensor::new(shape, idx.into_iter().map(|i| T::of(i as f64 * 0.05 - n as f64 * 0.025)).collect()).unwrap()
}

fn cube<T: Real>(v: T) -> T {
    v * v * v
}

fn cube_slope<T: Real>(v: T) -> T {
    T::of(3.0) * v * v
}

type OpUnderTest<'a, T> = dyn Fn(&mut Graph<T>, &[Var]) -> Result<Var> + 'a;

/// One check per tensor operation at precision `T`.
pub fn op_checks<T: Real>(eps: f64, seed: u64) -> Result<Vec<(String, GradCheckReport)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let opts = GradCheckOptions { eps, samples: 96, seed, ..Default::default() };
    let mut out = Vec::new();
    let mut run = |name: &str, f: &OpUnderTest<'_, T>, inputs: &[Tensor<T>]| -> Result<()> {
        out.push((name.to_string(), grad_check(f, inputs, opts)?));
        Ok(())
    };
    let r = |shape: &[usize], rng: &mut ChaCha8Rng| uniform::<T>(shape, rng, -1.0, 1.0);

    let x = r(&[2, 3, 8, 8], &mut rng);
    let w = r(&[4, 3, 3, 3], &mut rng);
    let b = r(&[4], &mut rng);
    run("conv2d", &|g, v| g.conv2d(v[0], v[1], Some(v[2]), ConvGeom::new(1, 1, 1)), &[x.clone(), w.clone(), b.clone()])?;
    run("conv2d_strided_dilated", &|g, v| g.conv2d(v[0], v[1], Some(v[2]), ConvGeom::new(2, 2, 2)), &[x.clone(), w, b])?;
    let w1 = r(&[2, 3, 1, 1], &mut rng);
    run("conv2d_pointwise", &|g, v| g.conv2d(v[0], v[1], None, ConvGeom::new(1, 0, 1)), &[x, w1])?;

    let xt = r(&[2, 3, 4, 4], &mut rng);
    let wt = r(&[3, 2, 4, 4], &mut rng);
    let bt = r(&[2], &mut rng);
    run("conv_transpose2d", &|g, v| g.conv_transpose2d(v[0], v[1], Some(v[2]), 2, 1), &[xt, wt, bt])?;

    let xd = ramp::<T>(&[2, 2, 8, 8], &mut rng);
    run("maxpool2d", &|g, v| g.maxpool2d(v[0]), std::slice::from_ref(&xd))?;
    run("region_maxpool", &|g, v| g.region_maxpool(v[0], 3, 2), &[xd])?;

    let a = off_zero::<T>(&[2, 4, 8, 8], &mut rng);
    let c = r(&[2, 4, 8, 8], &mut rng);
    run("relu", &|g, v| Ok(g.relu(v[0])), std::slice::from_ref(&a))?;
    run("sigmoid", &|g, v| Ok(g.sigmoid(v[0])), std::slice::from_ref(&c))?;
    run("add", &|g, v| g.add(v[0], v[1]), &[a.clone(), c.clone()])?;
    run("sub", &|g, v| g.sub(v[0], v[1]), &[a.clone(), c.clone()])?;
    run("mul", &|g, v| g.mul(v[0], v[1]), &[a.clone(), c.clone()])?;
    run("scale", &|g, v| Ok(g.scale(v[0], T::of(-1.5))), std::slice::from_ref(&c))?;
    run("add_scalar", &|g, v| Ok(g.add_scalar(v[0], T::of(0.25))), std::slice::from_ref(&c))?;
    run("map", &|g, v| Ok(g.map(v[0], cube, cube_slope)), std::slice::from_ref(&a))?;
    run("concat_channels", &|g, v| g.concat_channels(&[v[0], v[1]]), &[a, c.clone()])?;
    run("reshape", &|g, v| g.reshape(v[0], &[2, 256]), std::slice::from_ref(&c))?;
    run("sum", &|g, v| Ok(g.sum(v[0])), std::slice::from_ref(&c))?;
    run("mean", &|g, v| Ok(g.mean(v[0])), &[c])?;

    let fx = r(&[3, 6], &mut rng);
    let fw = r(&[5, 6], &mut rng);
    let fb = r(&[5], &mut rng);
    run("linear", &|g, v| g.linear(v[0], v[1], Some(v[2])), &[fx, fw, fb])?;
    let bv = r(&[2, 3], &mut rng);
    run("broadcast_spatial", &|g, v| g.broadcast_spatial(v[0], 4, 5), &[bv])?;

    // predictions away from 0 and 1 keep the third derivative of ln(p) moderate
    let p = uniform::<T>(&[2, 1, 4, 4], &mut rng, 0.2, 0.8);
    let t: Tensor<T> = Tensor::from_fn(&[2, 1, 4, 4], |_| T::of(rng.gen_range(0..2) as f64));
    run("bce_loss", &|g, v| g.bce_loss(v[0], &t), &[p])?;
    Ok(out)
}

fn rand64(shape: &[usize], rng: &mut ChaCha8Rng, scale: f64) -> Tensor<f64> {
    uniform(shape, rng, -scale, scale)
}

/// Named conv weight/bias pairs with shapes `(cout, cin, k)`.
fn convs(rng: &mut ChaCha8Rng, prefix: &str, parts: &[(&str, usize, usize, usize)]) -> (Vec<String>, Vec<Tensor<f64>>) {
    let mut names = Vec::new();
    let mut ts = Vec::new();
    for &(p, co, ci, k) in parts {
        names.push(format!("{prefix}.{p}.w"));
        ts.push(rand64(&[co, ci, k, k], rng, 0.5));
        names.push(format!("{prefix}.{p}.b"));
        ts.push(rand64(&[co], rng, 0.1));
    }
    (names, ts)
}

fn lookup(names: &[String], vars: &[Var]) -> HashMap<String, Var> {
    names.iter().cloned().zip(vars.iter().copied()).collect()
}

/// Residual, interim, upsampling, pyramid pooling and enhancement blocks (f64).
pub fn block_checks(seed: u64) -> Result<Vec<(String, GradCheckReport)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let opts = GradCheckOptions { eps: 1e-6, samples: 96, seed, ..Default::default() };
    let mut out = Vec::new();

    let (n, ps) = convs(&mut rng, "r", &[("conv1", 3, 3, 3), ("conv2", 3, 3, 3)]);
    let mut inputs = vec![rand64(&[2, 3, 5, 5], &mut rng, 1.0)];
    inputs.extend(ps);
    let r = grad_check(|g, v| net::residual_unit(g, &lookup(&n, &v[1..]), "r", v[0]), &inputs, opts)?;
    out.push(("residual_unit".to_string(), r));

    let (n, ps) = convs(&mut rng, "i", &[("d1", 2, 2, 3), ("d2", 2, 2, 3), ("d3", 2, 2, 3), ("d4", 2, 2, 3)]);
    let mut inputs = vec![rand64(&[1, 2, 6, 6], &mut rng, 1.0)];
    inputs.extend(ps);
    let r = grad_check(|g, v| net::interim_unit(g, &lookup(&n, &v[1..]), "i", v[0]), &inputs, opts)?;
    out.push(("interim_unit".to_string(), r));

    let (mut n, mut ps) = convs(&mut rng, "u", &[("reduce", 2, 8, 1)]);
    n.extend(["u.up.w".to_string(), "u.up.b".to_string()]);
    ps.extend([rand64(&[2, 2, 4, 4], &mut rng, 0.5), rand64(&[2], &mut rng, 0.1)]);
    let (n2, ps2) = convs(&mut rng, "u", &[("expand", 4, 2, 1)]);
    n.extend(n2);
    ps.extend(ps2);
    let mut inputs = vec![rand64(&[2, 8, 3, 3], &mut rng, 1.0)];
    inputs.extend(ps);
    let r = grad_check(|g, v| net::upsampling_unit(g, &lookup(&n, &v[1..]), "u", v[0]), &inputs, opts)?;
    out.push(("upsampling_unit".to_string(), r));

    let l = ramp::<f64>(&[2, 2, 8, 8], &mut rng);
    let inputs = vec![l, rand64(&[2, 42], &mut rng, 1.0), rand64(&[2], &mut rng, 1.0)];
    let n = vec!["fc.w".to_string(), "fc.b".to_string()];
    let r = grad_check(|g, v| net::spp_global(g, &lookup(&n, &v[1..]), "fc", v[0], 3), &inputs, opts)?;
    out.push(("spp_global".to_string(), r));

    let mut n = Vec::new();
    let mut inputs = vec![rand64(&[2, 2, 4, 4], &mut rng, 1.0), rand64(&[2, 2, 4, 4], &mut rng, 1.0)];
    for s in ["a", "b"] {
        let prefix = format!("d.{s}");
        let (ln, lp) = convs(&mut rng, &prefix, &[("local", 2, 2, 3)]);
        n.extend(ln);
        inputs.extend(lp);
        n.extend([format!("{prefix}.fc.w"), format!("{prefix}.fc.b")]);
        inputs.extend([rand64(&[2, 42], &mut rng, 0.5), rand64(&[2], &mut rng, 0.5)]);
        let (gn, gp) = convs(&mut rng, &prefix, &[("gate_l", 2, 4, 1), ("gate_g", 2, 4, 1)]);
        n.extend(gn);
        inputs.extend(gp);
    }
    let r = grad_check(
        |g, v| {
            let (a, b, _) = net::dem_forward(g, &lookup(&n, &v[2..]), "d", v[0], v[1], DemMode::Gated, 3)?;
            g.concat_channels(&[a, b])
        },
        &inputs,
        opts,
    )?;
    out.push(("dem_forward".to_string(), r));
    Ok(out)
}

/// Denominator floor for the whole-network check. Some gate weights deep in
/// the encoder have gradients near 1e-9, below the roughly 5e-9 rounding
/// noise of a central difference on this output, so they are compared on an
/// absolute scale of `floor * tolerance`.
pub const NETWORK_FLOOR: f64 = 1e-4;

/// Whole forward pass in f64 with respect to inputs and every parameter.
pub fn network_check(cfg: &NetConfig, samples: usize, seed: u64) -> Result<GradCheckReport> {
    let ps: ParamSet<f64> = net::init_params(cfg)?.cast();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = cfg.input_size;
    let names: Vec<String> = ps.iter().map(|p| p.name.clone()).collect();
    let mut inputs = vec![
        uniform::<f64>(&[1, cfg.in_channels_a, s, s], &mut rng, 0.0, 1.0),
        uniform::<f64>(&[1, cfg.in_channels_b, s, s], &mut rng, 0.0, 1.0),
    ];
    inputs.extend(ps.iter().map(|p| p.value.clone()));
    let two = cfg.variant.two_branch();
    grad_check(
        |g, v| net::forward(g, &lookup(&names, &v[2..]), cfg, v[0], two.then_some(v[1])),
        &inputs,
        GradCheckOptions { eps: 1e-5, samples, seed, floor: NETWORK_FLOOR },
    )
}

/// Every check with its tolerance: 1e-4 in f64, 1e-3 in f32.
pub fn gradient_suite(cfg: &NetConfig, samples: usize, seed: u64) -> Result<Vec<CheckResult>> {
    fn tagged(v: Vec<(String, GradCheckReport)>, suffix: &'static str, tolerance: f64) -> impl Iterator<Item = CheckResult> {
        v.into_iter().map(move |(name, report)| CheckResult { name: format!("{name}{suffix}"), report, tolerance })
    }
    let mut out: Vec<CheckResult> = Vec::new();
    out.extend(tagged(op_checks::<f64>(1e-5, seed)?, "/f64", 1e-4));
    out.extend(tagged(op_checks::<f32>(1e-2, seed)?, "/f32", 1e-3));
    out.extend(tagged(block_checks(seed)?, "/f64", 1e-4));
    out.push(CheckResult { name: "network/f64".to_string(), report: network_check(cfg, samples, seed)?, tolerance: 1e-4 });
    Ok(out)
}
