//! Building blocks of one branch and the enhancement module between branches.
//!
//! Every block reads its weights through a [`Lookup`] under a name prefix,
//! so the same code serves training, inference and gradient checks.

use super::params::Lookup;
use crate::tensor::{ConvGeom, Graph, Real, Var};
use crate::{Error, Result};

pub(crate) fn conv<T: Real>(g: &mut Graph<T>, p: &impl Lookup, name: &str, x: Var, geom: ConvGeom) -> Result<Var> {
    let w = p.var(&format!("{name}.w"))?;
    let b = p.var(&format!("{name}.b"))?;
    g.conv2d(x, w, Some(b), geom)
}

pub(crate) fn conv_relu<T: Real>(g: &mut Graph<T>, p: &impl Lookup, name: &str, x: Var, geom: ConvGeom) -> Result<Var> {
    let y = conv(g, p, name, x, geom)?;
    Ok(g.relu(y))
}

pub(crate) fn tconv_relu<T: Real>(g: &mut Graph<T>, p: &impl Lookup, name: &str, x: Var) -> Result<Var> {
    let w = p.var(&format!("{name}.w"))?;
    let b = p.var(&format!("{name}.b"))?;
    let y = g.conv_transpose2d(x, w, Some(b), 2, 1)?;
    Ok(g.relu(y))
}

/// `relu(conv2(relu(conv1(x))) + x)` with 3x3 same-size convolutions.
pub fn residual_unit<T: Real>(g: &mut Graph<T>, p: &impl Lookup, prefix: &str, x: Var) -> Result<Var> {
    let y = conv_relu(g, p, &format!("{prefix}.conv1"), x, ConvGeom::same(3, 1))?;
    let y = conv(g, p, &format!("{prefix}.conv2"), y, ConvGeom::same(3, 1))?;
    let s = g.add(y, x)?;
    Ok(g.relu(s))
}

/// Cascade of dilated 3x3 convolutions (rates 1, 2, 4, 8); every stage is
/// added back onto the input.
pub fn interim_unit<T: Real>(g: &mut Graph<T>, p: &impl Lookup, prefix: &str, x: Var) -> Result<Var> {
    let mut acc = x;
    let mut d = x;
    for (i, rate) in [1, 2, 4, 8].into_iter().enumerate() {
        d = conv_relu(g, p, &format!("{prefix}.d{}", i + 1), d, ConvGeom::same(3, rate))?;
        acc = g.add(acc, d)?;
    }
    Ok(acc)
}

/// 1x1 reduce, 4x4 stride-2 transposed conv, 1x1 expand; relu after each.
pub fn upsampling_unit<T: Real>(g: &mut Graph<T>, p: &impl Lookup, prefix: &str, x: Var) -> Result<Var> {
    let pw = ConvGeom::new(1, 0, 1);
    let y = conv_relu(g, p, &format!("{prefix}.reduce"), x, pw)?;
    let y = tconv_relu(g, p, &format!("{prefix}.up"), y)?;
    conv_relu(g, p, &format!("{prefix}.expand"), y, pw)
}

/// Deepest usable pyramid for a plane whose shorter side is `extent`:
/// level `j` needs a `2^(j-1)` grid.
pub fn spp_levels_for(requested: usize, extent: usize) -> usize {
    let fit = 1 + extent.max(1).ilog2() as usize;
    requested.min(fit)
}

/// Multi-level region max pooling flattened into one vector per sample,
/// followed by a fully connected layer `fc`.
pub fn spp_global<T: Real>(g: &mut Graph<T>, p: &impl Lookup, fc: &str, l: Var, levels: usize) -> Result<Var> {
    let (n, c, h, w) = g.value(l).dims4()?;
    if levels == 0 {
        return Err(Error::InvalidGrid { gy: 0, gx: 0, h, w });
    }
    let mut parts = Vec::with_capacity(levels);
    for j in 0..levels {
        let grid = 1 << j;
        let r = g.region_maxpool(l, grid, grid)?;
        parts.push(g.reshape(r, &[n, c * grid * grid])?);
    }
    let flat = g.concat_channels(&parts)?;
    let w = p.var(&format!("{fc}.w"))?;
    let b = p.var(&format!("{fc}.b"))?;
    g.linear(flat, w, Some(b))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DemMode {
    Gated,
    Ungated,
    LocalOnly,
}

impl DemMode {
    pub fn uses_global(self) -> bool {
        self != DemMode::LocalOnly
    }

    pub fn uses_gates(self) -> bool {
        self == DemMode::Gated
    }
}

/// Intermediate maps of one enhancement site, as graph nodes.
#[derive(Clone, Copy, Debug)]
pub struct DemActivations {
    pub local_a: Var,
    pub local_b: Var,
    pub global_a: Option<Var>,
    pub global_b: Option<Var>,
    /// `(theta_L, theta_G)` computed from modality a.
    pub gates_a: Option<(Var, Var)>,
    pub gates_b: Option<(Var, Var)>,
}

struct Message {
    local: Var,
    global: Option<Var>,
    gates: Option<(Var, Var)>,
    out: Var,
}

fn message<T: Real>(g: &mut Graph<T>, p: &impl Lookup, prefix: &str, f: Var, mode: DemMode, levels: usize) -> Result<Message> {
    let (_, _, h, w) = g.value(f).dims4()?;
    let local = conv(g, p, &format!("{prefix}.local"), f, ConvGeom::same(3, 1))?;
    if !mode.uses_global() {
        return Ok(Message { local, global: None, gates: None, out: local });
    }
    let levels = spp_levels_for(levels, h.min(w));
    let v = spp_global(g, p, &format!("{prefix}.fc"), local, levels)?;
    let global = g.broadcast_spatial(v, h, w)?;
    if !mode.uses_gates() {
        let out = g.add(local, global)?;
        return Ok(Message { local, global: Some(global), gates: None, out });
    }
    let cat = g.concat_channels(&[local, global])?;
    let pw = ConvGeom::new(1, 0, 1);
    let tl = conv(g, p, &format!("{prefix}.gate_l"), cat, pw)?;
    let tl = g.sigmoid(tl);
    let tg = conv(g, p, &format!("{prefix}.gate_g"), cat, pw)?;
    let tg = g.sigmoid(tg);
    let wl = g.mul(tl, local)?;
    let wg = g.mul(tg, global)?;
    let out = g.add(wl, wg)?;
    Ok(Message { local, global: Some(global), gates: Some((tl, tg)), out })
}

/// Exchanges messages between two same-shaped feature maps: each output is
/// its input plus the message computed from the other modality. `levels`
/// is the requested pyramid depth, reduced to what the plane can hold.
pub fn dem_forward<T: Real>(
    g: &mut Graph<T>,
    p: &impl Lookup,
    prefix: &str,
    f_a: Var,
    f_b: Var,
    mode: DemMode,
    levels: usize,
) -> Result<(Var, Var, DemActivations)> {
    if g.shape(f_a) != g.shape(f_b) {
        return Err(Error::shape(format!("dem inputs {:?} vs {:?}", g.shape(f_a), g.shape(f_b))));
    }
    let ma = message(g, p, &format!("{prefix}.a"), f_a, mode, levels)?;
    let mb = message(g, p, &format!("{prefix}.b"), f_b, mode, levels)?;
    let ha = g.add(f_a, mb.out)?;
    let hb = g.add(f_b, ma.out)?;
    let acts = DemActivations {
        local_a: ma.local,
        local_b: mb.local,
        global_a: ma.global,
        global_b: mb.global,
        gates_a: ma.gates,
        gates_b: mb.gates,
    };
    Ok((ha, hb, acts))
}
