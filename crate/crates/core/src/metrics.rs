//! Binarization and IoU scores: per-tile IoU, its mean over tiles (A_IoU),
//! and the IoU of the stitched global map (G_IoU) computed from count sums.

use std::fmt::Write as _;

use crate::par;
use crate::raster::RasterTile;
use crate::{Error, Result};

pub use crate::raster::BinaryMask;

pub const DEFAULT_THRESHOLD: f32 = 0.5;

/// Road where the probability is strictly greater than `threshold`.
pub fn binarize(map: &RasterTile, threshold: f32) -> Result<BinaryMask> {
    if map.channels() != 1 {
        return Err(Error::shape(format!("probability map must have one channel, got {}", map.channels())));
    }
    let bits = map.values().iter().map(|&v| (v > threshold) as u8).collect();
    BinaryMask::new(map.height(), map.width(), bits)
}

/// Intersection and union pixel counts of two masks.
pub fn overlap(pred: &BinaryMask, truth: &BinaryMask) -> Result<(u64, u64)> {
    if pred.height() != truth.height() || pred.width() != truth.width() {
        return Err(Error::shape(format!(
            "mask {}x{} vs {}x{}",
            pred.height(),
            pred.width(),
            truth.height(),
            truth.width()
        )));
    }
    let (mut inter, mut union) = (0u64, 0u64);
    for (&a, &b) in pred.bits().iter().zip(truth.bits()) {
        inter += (a & b) as u64;
        union += (a | b) as u64;
    }
    Ok((inter, union))
}

fn ratio(inter: u64, union: u64) -> f64 {
    // two empty masks agree perfectly
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

pub fn iou(pred: &BinaryMask, truth: &BinaryMask) -> Result<f64> {
    overlap(pred, truth).map(|(i, u)| ratio(i, u))
}

#[derive(Clone, Debug, PartialEq)]
pub struct TileResult {
    pub id: String,
    pub intersection: u64,
    pub union: u64,
    pub iou: f64,
}

impl TileResult {
    pub fn new(id: impl Into<String>, pred: &BinaryMask, truth: &BinaryMask) -> Result<Self> {
        let (intersection, union) = overlap(pred, truth)?;
        Ok(TileResult { id: id.into(), intersection, union, iou: ratio(intersection, union) })
    }
}

/// Mean of per-pair IoU.
pub fn a_iou(pairs: &[(BinaryMask, BinaryMask)]) -> Result<f64> {
    let results = score_pairs(pairs)?;
    a_iou_of(&results)
}

/// IoU of the stitched map of a tile partition: `sum |∩| / sum |∪|`.
pub fn g_iou(pairs: &[(BinaryMask, BinaryMask)]) -> Result<f64> {
    let results = score_pairs(pairs)?;
    g_iou_of(&results)
}

fn score_pairs(pairs: &[(BinaryMask, BinaryMask)]) -> Result<Vec<TileResult>> {
    if pairs.is_empty() {
        return Err(Error::EmptyInput);
    }
    par::map_range(pairs.len(), |i| TileResult::new(i.to_string(), &pairs[i].0, &pairs[i].1))
        .into_iter()
        .collect()
}

pub fn a_iou_of(results: &[TileResult]) -> Result<f64> {
    if results.is_empty() {
        return Err(Error::EmptyInput);
    }
    Ok(results.iter().map(|r| r.iou).sum::<f64>() / results.len() as f64)
}

pub fn g_iou_of(results: &[TileResult]) -> Result<f64> {
    if results.is_empty() {
        return Err(Error::EmptyInput);
    }
    let inter: u64 = results.iter().map(|r| r.intersection).sum();
    let union: u64 = results.iter().map(|r| r.union).sum();
    Ok(ratio(inter, union))
}

/// Report lines `tile_id,intersection,union,iou`, then `A_IoU=` and `G_IoU=`.
pub fn format_report(results: &[TileResult]) -> Result<String> {
    let a = a_iou_of(results)?;
    let g = g_iou_of(results)?;
    let mut s = String::new();
    for r in results {
        let _ = writeln!(s, "{},{},{},{:.4}", r.id, r.intersection, r.union, r.iou);
    }
    let _ = writeln!(s, "A_IoU={a:.4}");
    let _ = writeln!(s, "G_IoU={g:.4}");
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn mask(rows: &[&str]) -> BinaryMask {
        let h = rows.len();
        let w = rows[0].len();
        BinaryMask::from_fn(h, w, |r, c| rows[r].as_bytes()[c] == b'1')
    }

    #[test]
    fn threshold_is_strict() {
        let half = RasterTile::filled(3, 3, 1, 0.5);
        assert_eq!(binarize(&half, 0.5).unwrap().count(), 0);
        let one = RasterTile::filled(3, 3, 1, 1.0);
        assert_eq!(binarize(&one, 0.5).unwrap().count(), 9);
        assert!(binarize(&RasterTile::zeros(2, 2, 3), 0.5).is_err());
    }

    #[test]
    fn iou_cases() {
        let a = mask(&["1100", "0000", "0000", "0000"]);
        assert_eq!(iou(&a, &a).unwrap(), 1.0);
        let b = mask(&["0011", "0000", "0000", "0000"]);
        assert_eq!(iou(&a, &b).unwrap(), 0.0);
        // |∩| = 2, |∪| = 5
        let p = mask(&["1110", "0100", "0000", "0000"]);
        let q = mask(&["0110", "0000", "0001", "0000"]);
        assert_eq!(overlap(&p, &q).unwrap(), (2, 5));
        assert_eq!(iou(&p, &q).unwrap(), 0.4);
        let z = BinaryMask::zeros(4, 4);
        assert_eq!(iou(&z, &z).unwrap(), 1.0);
        assert!(iou(&z, &BinaryMask::zeros(4, 3)).is_err());
    }

    #[test]
    fn averaged_and_stitched() {
        let a = mask(&["11", "00"]);
        let z = BinaryMask::zeros(2, 2);
        assert_eq!(a_iou(&[(a.clone(), a.clone())]).unwrap(), 1.0);
        assert_eq!(a_iou(&[(a.clone(), a.clone()), (a.clone(), mask(&["00", "11"]))]).unwrap(), 0.5);
        assert!(a_iou(&[]).is_err());
        assert!(g_iou(&[]).is_err());
        assert_eq!(g_iou(&[(a.clone(), z.clone())]).unwrap(), iou(&a, &z).unwrap());
        // (∩,∪) = (2,5) and (3,5)
        let p1 = mask(&["1110", "0100", "0000", "0000"]);
        let q1 = mask(&["0110", "0000", "0001", "0000"]);
        let p2 = mask(&["1110", "0000", "0000", "0000"]);
        let q2 = mask(&["1111", "1000", "0000", "0000"]);
        assert_eq!(overlap(&p2, &q2).unwrap(), (3, 5));
        assert_eq!(g_iou(&[(p1, q1), (p2, q2)]).unwrap(), 0.5);
    }

    #[test]
    fn report_format() {
        let a = mask(&["1110", "0100", "0000", "0000"]);
        let b = mask(&["0110", "0000", "0001", "0000"]);
        let r = vec![TileResult::new("t0", &a, &b).unwrap()];
        assert_eq!(format_report(&r).unwrap(), "t0,2,5,0.4000\nA_IoU=0.4000\nG_IoU=0.4000\n");
    }

    proptest! {
        #[test]
        fn iou_symmetry_and_bounds(a in prop::collection::vec(0u8..2, 16), b in prop::collection::vec(0u8..2, 16)) {
            let ma = BinaryMask::new(4, 4, a).unwrap();
            let mb = BinaryMask::new(4, 4, b).unwrap();
            let x = iou(&ma, &mb).unwrap();
            prop_assert_eq!(x, iou(&mb, &ma).unwrap());
            prop_assert!((0.0..=1.0).contains(&x));
            prop_assert_eq!(iou(&ma, &ma).unwrap(), 1.0);
        }

        #[test]
        fn binarize_is_monotone(v in prop::collection::vec(0.0f32..1.0, 25), t1 in 0.0f32..1.0, t2 in 0.0f32..1.0) {
            let m = RasterTile::new(5, 5, 1, v).unwrap();
            let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
            let a = binarize(&m, lo).unwrap();
            let b = binarize(&m, hi).unwrap();
            prop_assert!(a.bits().iter().zip(b.bits()).all(|(x, y)| x >= y));
        }
    }
}
