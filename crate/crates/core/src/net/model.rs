use super::blocks::{conv, conv_relu, dem_forward, interim_unit, residual_unit, tconv_relu, upsampling_unit, DemActivations};
use super::params::{bind, Lookup};
use super::NetConfig;
use crate::tensor::{ConvGeom, Graph, ParamSet, Real, Tensor, Var};
use crate::{Error, Result};

/// Graph nodes of interest from one forward pass.
#[derive(Clone, Debug)]
pub struct Trace {
    /// Probability map `N x 1 x H x W`.
    pub output: Var,
    /// Branch-a feature shape after the stem and after each block.
    pub stages: Vec<(String, Vec<usize>)>,
    /// One entry per enhancement site, in site order.
    pub dems: Vec<DemActivations>,
}

fn encode<T: Real>(g: &mut Graph<T>, p: &impl Lookup, cfg: &NetConfig, br: &str, k: usize, x: Var) -> Result<Var> {
    let mut x = g.maxpool2d(x)?;
    if k > 1 {
        x = conv_relu(g, p, &format!("{br}.enc{k}.widen"), x, ConvGeom::same(3, 1))?;
    }
    for j in 1..=cfg.res_counts[k - 1] {
        x = residual_unit(g, p, &format!("{br}.enc{k}.res{j}"), x)?;
    }
    Ok(x)
}

fn check_input<T: Real>(g: &Graph<T>, x: Var, cin: usize, cfg: &NetConfig) -> Result<usize> {
    let (n, c, h, w) = g.value(x).dims4()?;
    if c != cin || h != cfg.input_size || w != cfg.input_size {
        return Err(Error::shape(format!(
            "input {:?} does not match {cin} channels at {s}x{s}",
            g.shape(x),
            s = cfg.input_size
        )));
    }
    Ok(n)
}

/// Forward pass recording intermediate nodes. `x_b` is ignored by the
/// single-branch variant and required by all others.
pub fn forward_traced<T: Real>(g: &mut Graph<T>, p: &impl Lookup, cfg: &NetConfig, x_a: Var, x_b: Option<Var>) -> Result<Trace> {
    cfg.validate()?;
    let n = check_input(g, x_a, cfg.in_channels_a, cfg)?;
    let mut xs = vec![x_a];
    let mut names = vec!["a"];
    if cfg.variant.two_branch() {
        let x_b = x_b.ok_or_else(|| Error::shape("two-branch network needs the second modality"))?;
        if check_input(g, x_b, cfg.in_channels_b, cfg)? != n {
            return Err(Error::shape("modalities differ in batch size"));
        }
        xs.push(x_b);
        names.push("b");
    }
    let mode = cfg.variant.dem_mode();
    let mut stages = Vec::new();
    let mut dems = Vec::new();
    let mut exchange = |g: &mut Graph<T>, xs: &mut Vec<Var>, site: usize| -> Result<()> {
        if let Some(mode) = mode {
            let (a, b, acts) = dem_forward(g, p, &format!("dem{site}"), xs[0], xs[1], mode, cfg.spp_levels)?;
            xs[0] = a;
            xs[1] = b;
            dems.push(acts);
        }
        Ok(())
    };

    for (x, br) in xs.iter_mut().zip(&names) {
        *x = conv_relu(g, p, &format!("{br}.stem"), *x, ConvGeom::new(2, 3, 1))?;
    }
    stages.push(("stem".to_string(), g.shape(xs[0]).to_vec()));

    let mut skips: Vec<Vec<Var>> = Vec::with_capacity(3);
    for k in 1..=4 {
        for (x, br) in xs.iter_mut().zip(&names) {
            *x = encode(g, p, cfg, br, k, *x)?;
        }
        exchange(g, &mut xs, k)?;
        stages.push((format!("enc{k}"), g.shape(xs[0]).to_vec()));
        if k < 4 {
            skips.push(xs.clone());
        }
    }

    for (x, br) in xs.iter_mut().zip(&names) {
        *x = interim_unit(g, p, &format!("{br}.inter"), *x)?;
    }
    stages.push(("interim".to_string(), g.shape(xs[0]).to_vec()));

    for k in 1..=4 {
        for (i, (x, br)) in xs.iter_mut().zip(&names).enumerate() {
            *x = upsampling_unit(g, p, &format!("{br}.dec{k}"), *x)?;
            if k < 4 {
                // decoder k joins the enhanced output of encoder 4 - k
                *x = g.add(*x, skips[3 - k][i])?;
            }
        }
        exchange(g, &mut xs, 4 + k)?;
        stages.push((format!("dec{k}"), g.shape(xs[0]).to_vec()));
    }

    for (x, br) in xs.iter_mut().zip(&names) {
        let y = tconv_relu(g, p, &format!("{br}.head.up"), *x)?;
        *x = conv_relu(g, p, &format!("{br}.head.conv"), y, ConvGeom::same(3, 1))?;
    }
    stages.push(("head".to_string(), g.shape(xs[0]).to_vec()));

    let cat = if xs.len() == 1 { xs[0] } else { g.concat_channels(&xs)? };
    let logits = conv(g, p, "fuse", cat, ConvGeom::new(1, 0, 1))?;
    let output = g.sigmoid(logits);
    Ok(Trace { output, stages, dems })
}

/// Probability map `N x 1 x H x W`, every value in `(0, 1)`.
pub fn forward<T: Real>(g: &mut Graph<T>, p: &impl Lookup, cfg: &NetConfig, x_a: Var, x_b: Option<Var>) -> Result<Var> {
    forward_traced(g, p, cfg, x_a, x_b).map(|t| t.output)
}

/// Inference with frozen parameters on `N x C x H x W` inputs.
pub fn predict<T: Real>(params: &ParamSet<T>, cfg: &NetConfig, image: &Tensor<T>, traj: Option<&Tensor<T>>) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let p = bind(&mut g, params, false);
    let xa = g.constant(image.clone());
    let xb = traj.map(|t| g.constant(t.clone()));
    let y = forward(&mut g, &p, cfg, xa, xb)?;
    Ok(g.value(y).clone())
}
