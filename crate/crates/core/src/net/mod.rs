//! Two-branch encoder/decoder segmentation network with cross-modal
//! enhancement between the branches, plus training and checkpoints.

mod blocks;
mod checkpoint;
mod model;
mod params;
mod train;

use std::path::Path;
use std::str::FromStr;

use crate::kv::KeyValues;
use crate::{Error, Result};

pub use blocks::{dem_forward, interim_unit, residual_unit, spp_global, spp_levels_for, upsampling_unit, DemActivations, DemMode};
pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint};
pub use model::{forward, forward_traced, predict, Trace};
pub use params::{bind, init_params, param_layout, Binding, Lookup, ParamSpec};
pub use train::{batch_tensors, train, TrainOptions, TrainReport};

/// How the two branches exchange messages.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    /// Local and global messages, each reweighted by a learned gate.
    Full,
    /// Local and global messages added without gates.
    NoGate,
    /// Only the local message, added without a gate.
    LocalOnly,
    /// Two branches without any message exchange.
    Bypass,
    /// Single aerial-image branch.
    ImageOnly,
}

impl Variant {
    pub const ALL: [Variant; 5] = [Variant::Full, Variant::NoGate, Variant::LocalOnly, Variant::Bypass, Variant::ImageOnly];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoGate => "no-gate",
            Variant::LocalOnly => "local-only",
            Variant::Bypass => "bypass",
            Variant::ImageOnly => "image-only",
        }
    }

    pub fn dem_mode(self) -> Option<DemMode> {
        match self {
            Variant::Full => Some(DemMode::Gated),
            Variant::NoGate => Some(DemMode::Ungated),
            Variant::LocalOnly => Some(DemMode::LocalOnly),
            Variant::Bypass | Variant::ImageOnly => None,
        }
    }

    pub fn two_branch(self) -> bool {
        self != Variant::ImageOnly
    }
}

impl FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetConfig {
    pub in_channels_a: usize,
    pub in_channels_b: usize,
    pub base_channels: usize,
    /// Residual units per encoding block.
    pub res_counts: [usize; 4],
    pub spp_levels: usize,
    pub input_size: usize,
    pub seed: u64,
    pub variant: Variant,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig::desk()
    }
}

const KEYS: [&str; 8] =
    ["in_channels_a", "in_channels_b", "base_channels", "res_counts", "spp_levels", "input_size", "seed", "variant"];

impl NetConfig {
    /// Laptop-sized profile: 8 base channels, one residual unit per block, 64 px.
    pub fn desk() -> Self {
        NetConfig {
            in_channels_a: 3,
            in_channels_b: 1,
            base_channels: 8,
            res_counts: [1, 1, 1, 1],
            spp_levels: 3,
            input_size: 64,
            seed: 0,
            variant: Variant::Full,
        }
    }

    /// The smaller profile used for finite-difference checks.
    pub fn gradcheck() -> Self {
        NetConfig { base_channels: 4, input_size: 32, ..NetConfig::desk() }
    }

    pub fn with_variant(&self, variant: Variant) -> Self {
        NetConfig { variant, ..self.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.input_size == 0 || !self.input_size.is_multiple_of(32) {
            return bad(format!("input_size must be a positive multiple of 32, got {}", self.input_size));
        }
        if self.spp_levels == 0 {
            return bad("spp_levels must be at least 1".into());
        }
        if self.in_channels_a == 0 || self.in_channels_b == 0 || self.base_channels == 0 {
            return bad("channel counts must be positive".into());
        }
        if self.res_counts.contains(&0) {
            return bad(format!("res_counts must be positive, got {:?}", self.res_counts));
        }
        Ok(())
    }

    /// Channel width of the per-branch head output.
    pub fn head_channels(&self) -> usize {
        (self.base_channels / 2).max(1)
    }

    /// Output width of encoding block `k` (1-based).
    pub fn stage_channels(&self, k: usize) -> usize {
        self.base_channels << (k - 1)
    }

    pub fn from_kv(kv: &KeyValues) -> Result<Self> {
        kv.check_keys(&KEYS)?;
        let d = NetConfig::desk();
        let res_counts = match kv.get_list::<usize>("res_counts")? {
            None => d.res_counts,
            Some(v) => v
                .try_into()
                .map_err(|v: Vec<usize>| Error::Config(format!("res_counts needs 4 entries, got {}", v.len())))?,
        };
        let cfg = NetConfig {
            in_channels_a: kv.get_or("in_channels_a", d.in_channels_a)?,
            in_channels_b: kv.get_or("in_channels_b", d.in_channels_b)?,
            base_channels: kv.get_or("base_channels", d.base_channels)?,
            res_counts,
            spp_levels: kv.get_or("spp_levels", d.spp_levels)?,
            input_size: kv.get_or("input_size", d.input_size)?,
            seed: kv.get_or("seed", d.seed)?,
            variant: kv.get("variant").map_or(Ok(d.variant), str::parse)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_kv(&self) -> KeyValues {
        let mut kv = KeyValues::new();
        kv.set("in_channels_a", self.in_channels_a);
        kv.set("in_channels_b", self.in_channels_b);
        kv.set("base_channels", self.base_channels);
        let rc: Vec<String> = self.res_counts.iter().map(|c| c.to_string()).collect();
        kv.set("res_counts", rc.join(","));
        kv.set("spp_levels", self.spp_levels);
        kv.set("input_size", self.input_size);
        kv.set("seed", self.seed);
        kv.set("variant", self.variant.name());
        kv
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_kv(&KeyValues::load(path)?)
    }
}

#[cfg(test)]
mod tests;
