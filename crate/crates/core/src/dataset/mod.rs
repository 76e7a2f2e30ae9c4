//! Aligned (aerial image, heat-map, mask) triplets: storage, augmentation,
//! procedural generation and train/validation splits.

mod augment;
mod synth;

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::raster::{BinaryMask, RasterTile};
use crate::{Error, Result};

pub use augment::{augment, augment_dataset};
pub use synth::{synth_dataset, synth_scene, SceneSpec, SCENE_BOUNDS};

#[derive(Clone, Debug, PartialEq)]
pub struct SampleTriplet {
    /// Three channels in `[0, 1]`.
    pub image: RasterTile,
    /// One channel in `[0, 1]`.
    pub heatmap: RasterTile,
    pub mask: BinaryMask,
}

impl SampleTriplet {
    pub fn new(image: RasterTile, heatmap: RasterTile, mask: BinaryMask) -> Result<Self> {
        let (h, w) = (mask.height(), mask.width());
        let fits = |t: &RasterTile| t.height() == h && t.width() == w;
        if !fits(&image) || !fits(&heatmap) || image.channels() != 3 || heatmap.channels() != 1 {
            return Err(Error::shape(format!(
                "triplet image {}x{}x{}, heat-map {}x{}x{}, mask {h}x{w}",
                image.height(),
                image.width(),
                image.channels(),
                heatmap.height(),
                heatmap.width(),
                heatmap.channels()
            )));
        }
        Ok(SampleTriplet { image, heatmap, mask })
    }

    /// `(H, W)`.
    pub fn size(&self) -> (usize, usize) {
        (self.mask.height(), self.mask.width())
    }

    pub fn paths(dir: &Path, id: &str) -> [PathBuf; 3] {
        [dir.join(format!("{id}.img.rft")), dir.join(format!("{id}.trj.rft")), dir.join(format!("{id}.msk.pgm"))]
    }

    pub fn save(&self, dir: impl AsRef<Path>, id: &str) -> Result<()> {
        let [img, trj, msk] = Self::paths(dir.as_ref(), id);
        self.image.save_rft(img)?;
        self.heatmap.save_rft(trj)?;
        self.mask.save_pgm(msk)
    }

    pub fn load(dir: impl AsRef<Path>, id: &str) -> Result<Self> {
        let [img, trj, msk] = Self::paths(dir.as_ref(), id);
        Self::new(RasterTile::load_rft(img)?, RasterTile::load_rft(trj)?, BinaryMask::load_pgm(msk)?)
    }
}

/// Sorted ids of the triplets stored in `dir`, keyed by their mask files.
pub fn list_ids(dir: impl AsRef<Path>) -> Result<Vec<String>> {
    let mut ids = Vec::new();
    for entry in fs::read_dir(dir)? {
        let name = entry?.file_name();
        if let Some(id) = name.to_str().and_then(|n| n.strip_suffix(".msk.pgm")) {
            ids.push(id.to_string());
        }
    }
    ids.sort();
    Ok(ids)
}

pub fn load_dir(dir: impl AsRef<Path>) -> Result<Vec<(String, SampleTriplet)>> {
    let dir = dir.as_ref();
    list_ids(dir)?
        .into_iter()
        .map(|id| SampleTriplet::load(dir, &id).map(|t| (id, t)))
        .collect()
}

/// Seeded shuffle, then the first `ceil(n * train_frac)` items train.
pub fn make_splits<T: Clone>(items: &[T], train_frac: f64, seed: u64) -> Result<(Vec<T>, Vec<T>)> {
    if items.is_empty() {
        return Err(Error::EmptyInput);
    }
    if !(train_frac > 0.0 && train_frac < 1.0) {
        return Err(Error::Config(format!("train fraction must lie in (0, 1), got {train_frac}")));
    }
    let n = items.len();
    // absorb representation error such as 10 * 0.7 = 7.000000000000001
    let k = ((n as f64 * train_frac - 1e-9).ceil() as usize).min(n);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let pick = |ix: &[usize]| ix.iter().map(|&i| items[i].clone()).collect();
    Ok((pick(&order[..k]), pick(&order[k..])))
}
