use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::blocks::spp_levels_for;
use super::NetConfig;
use crate::tensor::{xavier_init, Graph, ParamSet, Real, Tensor, Var};
use crate::{Error, Result};

/// One entry of the parameter layout.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    /// Xavier fans; `None` for biases, which start at zero.
    pub fans: Option<(usize, usize)>,
}

struct Layout(Vec<ParamSpec>);

impl Layout {
    fn conv(&mut self, name: &str, cout: usize, cin: usize, k: usize) {
        let kk = k * k;
        self.push(format!("{name}.w"), vec![cout, cin, k, k], Some((cin * kk, cout * kk)));
        self.push(format!("{name}.b"), vec![cout], None);
    }

    fn tconv(&mut self, name: &str, cin: usize, cout: usize, k: usize) {
        let kk = k * k;
        self.push(format!("{name}.w"), vec![cin, cout, k, k], Some((cin * kk, cout * kk)));
        self.push(format!("{name}.b"), vec![cout], None);
    }

    fn linear(&mut self, name: &str, dout: usize, din: usize) {
        self.push(format!("{name}.w"), vec![dout, din], Some((din, dout)));
        self.push(format!("{name}.b"), vec![dout], None);
    }

    fn push(&mut self, name: String, shape: Vec<usize>, fans: Option<(usize, usize)>) {
        self.0.push(ParamSpec { name, shape, fans });
    }
}

/// Channel width and spatial extent at enhancement site `i` (1..=8).
pub(crate) fn site_geometry(cfg: &NetConfig, i: usize) -> (usize, usize) {
    let s = cfg.input_size;
    match i {
        1..=4 => (cfg.stage_channels(i), s >> (i + 1)),
        5..=7 => (cfg.stage_channels(8 - i), s >> (9 - i)),
        8 => (cfg.base_channels, s / 2),
        _ => unreachable!("site {i}"),
    }
}

fn branch(l: &mut Layout, cfg: &NetConfig, br: &str, cin: usize) {
    let b = cfg.base_channels;
    l.conv(&format!("{br}.stem"), b, cin, 7);
    for k in 1..=4 {
        let c = cfg.stage_channels(k);
        if k > 1 {
            l.conv(&format!("{br}.enc{k}.widen"), c, c / 2, 3);
        }
        for j in 1..=cfg.res_counts[k - 1] {
            l.conv(&format!("{br}.enc{k}.res{j}.conv1"), c, c, 3);
            l.conv(&format!("{br}.enc{k}.res{j}.conv2"), c, c, 3);
        }
    }
    let c4 = cfg.stage_channels(4);
    for d in 1..=4 {
        l.conv(&format!("{br}.inter.d{d}"), c4, c4, 3);
    }
    for k in 1..=4 {
        let cin = cfg.stage_channels(5 - k);
        let cout = if k == 4 { b } else { cin / 2 };
        let mid = (cin / 4).max(1);
        l.conv(&format!("{br}.dec{k}.reduce"), mid, cin, 1);
        l.tconv(&format!("{br}.dec{k}.up"), mid, mid, 4);
        l.conv(&format!("{br}.dec{k}.expand"), cout, mid, 1);
    }
    let h = cfg.head_channels();
    l.tconv(&format!("{br}.head.up"), b, h, 4);
    l.conv(&format!("{br}.head.conv"), h, h, 3);
}

fn dem(l: &mut Layout, cfg: &NetConfig, site: usize, src: &str) {
    let (c, hw) = site_geometry(cfg, site);
    let p = format!("dem{site}.{src}");
    l.conv(&format!("{p}.local"), c, c, 3);
    let mode = cfg.variant.dem_mode().expect("dem params only for exchanging variants");
    if mode.uses_global() {
        let levels = spp_levels_for(cfg.spp_levels, hw);
        let cells: usize = (0..levels).map(|j| 1usize << (2 * j)).sum();
        l.linear(&format!("{p}.fc"), c, cells * c);
    }
    if mode.uses_gates() {
        l.conv(&format!("{p}.gate_l"), c, 2 * c, 1);
        l.conv(&format!("{p}.gate_g"), c, 2 * c, 1);
    }
}

/// Every trainable tensor of the network for `cfg`, in a fixed order.
pub fn param_layout(cfg: &NetConfig) -> Vec<ParamSpec> {
    let mut l = Layout(Vec::new());
    branch(&mut l, cfg, "a", cfg.in_channels_a);
    if cfg.variant.two_branch() {
        branch(&mut l, cfg, "b", cfg.in_channels_b);
    }
    if cfg.variant.dem_mode().is_some() {
        for site in 1..=8 {
            dem(&mut l, cfg, site, "a");
            dem(&mut l, cfg, site, "b");
        }
    }
    let branches = if cfg.variant.two_branch() { 2 } else { 1 };
    l.conv("fuse", 1, branches * cfg.head_channels(), 1);
    l.0
}

/// Xavier-uniform weights and zero biases, seeded by `cfg.seed`.
pub fn init_params(cfg: &NetConfig) -> Result<ParamSet<f32>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut ps = ParamSet::new();
    for spec in param_layout(cfg) {
        let t = match spec.fans {
            Some((fi, fo)) => xavier_init(&spec.shape, fi, fo, &mut rng),
            None => Tensor::zeros(&spec.shape),
        };
        ps.insert(spec.name, t)?;
    }
    Ok(ps)
}

/// Resolves parameter names to graph nodes.
pub trait Lookup {
    fn var(&self, name: &str) -> Result<Var>;
}

impl Lookup for HashMap<String, Var> {
    fn var(&self, name: &str) -> Result<Var> {
        self.get(name).copied().ok_or_else(|| Error::Config(format!("missing parameter `{name}`")))
    }
}

/// Parameters recorded as leaves of one graph, in parameter-set order.
pub struct Binding {
    pub vars: Vec<Var>,
    index: HashMap<String, usize>,
}

impl Lookup for Binding {
    fn var(&self, name: &str) -> Result<Var> {
        self.index
            .get(name)
            .map(|&i| self.vars[i])
            .ok_or_else(|| Error::Config(format!("missing parameter `{name}`")))
    }
}

/// Records every parameter on `g`; with `trainable` their gradients are tracked.
pub fn bind<T: Real>(g: &mut Graph<T>, params: &ParamSet<T>, trainable: bool) -> Binding {
    let mut vars = Vec::with_capacity(params.len());
    let mut index = HashMap::with_capacity(params.len());
    for (i, p) in params.iter().enumerate() {
        vars.push(g.leaf(p.value.clone(), trainable));
        index.insert(p.name.clone(), i);
    }
    Binding { vars, index }
}
