//! Geometric augmentation applied identically to all rasters of a triplet.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::SampleTriplet;
use crate::raster::{BinaryMask, RasterTile};
use crate::{Error, Result};

/// Output pixel `(r, c)` reads input pixel `f(r, c)`; output is `h x w`.
fn remap_tile(t: &RasterTile, h: usize, w: usize, f: impl Fn(usize, usize) -> (usize, usize)) -> RasterTile {
    let ch = t.channels();
    let mut out = RasterTile::zeros(h, w, ch);
    for r in 0..h {
        for c in 0..w {
            let (sr, sc) = f(r, c);
            for k in 0..ch {
                out.set(r, c, k, t.get(sr, sc, k));
            }
        }
    }
    out
}

fn remap_mask(m: &BinaryMask, h: usize, w: usize, f: impl Fn(usize, usize) -> (usize, usize)) -> BinaryMask {
    BinaryMask::from_fn(h, w, |r, c| {
        let (sr, sc) = f(r, c);
        m.get(sr, sc)
    })
}

impl SampleTriplet {
    fn remap(&self, h: usize, w: usize, f: impl Fn(usize, usize) -> (usize, usize) + Copy) -> SampleTriplet {
        SampleTriplet {
            image: remap_tile(&self.image, h, w, f),
            heatmap: remap_tile(&self.heatmap, h, w, f),
            mask: remap_mask(&self.mask, h, w, f),
        }
    }

    pub fn hflip(&self) -> SampleTriplet {
        let (h, w) = self.size();
        self.remap(h, w, |r, c| (r, w - 1 - c))
    }

    pub fn vflip(&self) -> SampleTriplet {
        let (h, w) = self.size();
        self.remap(h, w, |r, c| (h - 1 - r, c))
    }

    /// Quarter turn clockwise.
    pub fn rot90(&self) -> SampleTriplet {
        let (h, w) = self.size();
        self.remap(w, h, |r, c| (h - 1 - c, r))
    }

    pub fn rot180(&self) -> SampleTriplet {
        let (h, w) = self.size();
        self.remap(h, w, |r, c| (h - 1 - r, w - 1 - c))
    }

    pub fn rot270(&self) -> SampleTriplet {
        let (h, w) = self.size();
        self.remap(w, h, |r, c| (c, w - 1 - r))
    }

    /// Square window `size` at `(top, left)` resized back to full
    /// resolution: bilinear for the rasters, nearest for the mask.
    pub fn crop_resize(&self, top: usize, left: usize, size: usize) -> Result<SampleTriplet> {
        let (h, w) = self.size();
        if size == 0 || top + size > h || left + size > w {
            return Err(Error::shape(format!("crop {size} at ({top},{left}) exceeds {h}x{w}")));
        }
        Ok(SampleTriplet {
            image: resize_bilinear(&self.image, top, left, size, h, w),
            heatmap: resize_bilinear(&self.heatmap, top, left, size, h, w),
            mask: BinaryMask::from_fn(h, w, |r, c| {
                let sr = top + ((r as f64 + 0.5) * size as f64 / h as f64) as usize;
                let sc = left + ((c as f64 + 0.5) * size as f64 / w as f64) as usize;
                self.mask.get(sr.min(top + size - 1), sc.min(left + size - 1))
            }),
        })
    }
}

/// Half-pixel-centred bilinear sampling of a square window, edges clamped.
fn resize_bilinear(t: &RasterTile, top: usize, left: usize, size: usize, h: usize, w: usize) -> RasterTile {
    let axis = |i: usize, n: usize| {
        let s = ((i as f64 + 0.5) * size as f64 / n as f64 - 0.5).clamp(0.0, (size - 1) as f64);
        let i0 = s.floor() as usize;
        let i1 = (i0 + 1).min(size - 1);
        (i0, i1, s - i0 as f64)
    };
    let ch = t.channels();
    let mut out = RasterTile::zeros(h, w, ch);
    for r in 0..h {
        let (r0, r1, fy) = axis(r, h);
        for c in 0..w {
            let (c0, c1, fx) = axis(c, w);
            for k in 0..ch {
                let at = |rr: usize, cc: usize| t.get(top + rr, left + cc, k) as f64;
                let v = (1.0 - fy) * ((1.0 - fx) * at(r0, c0) + fx * at(r0, c1))
                    + fy * ((1.0 - fx) * at(r1, c0) + fx * at(r1, c1));
                out.set(r, c, k, v as f32);
            }
        }
    }
    out
}

/// The seven added variants of one square triplet: horizontal and vertical
/// flips, three rotations and two random crops with side in `[0.7, 0.9]`.
pub fn augment<R: Rng + ?Sized>(t: &SampleTriplet, rng: &mut R) -> Result<Vec<SampleTriplet>> {
    let (h, w) = t.size();
    if h != w {
        return Err(Error::NonSquare { h, w });
    }
    let mut out = vec![t.hflip(), t.vflip(), t.rot90(), t.rot180(), t.rot270()];
    for _ in 0..2 {
        let scale: f64 = rng.gen_range(0.7..=0.9);
        let size = ((scale * h as f64).round() as usize).clamp(1, h);
        let top = rng.gen_range(0..=h - size);
        let left = rng.gen_range(0..=w - size);
        out.push(t.crop_resize(top, left, size)?);
    }
    Ok(out)
}

/// Originals followed by their variants: `8 n` triplets.
pub fn augment_dataset(data: &[SampleTriplet], seed: u64) -> Result<Vec<SampleTriplet>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = data.to_vec();
    for t in data {
        out.extend(augment(t, &mut rng)?);
    }
    Ok(out)
}
