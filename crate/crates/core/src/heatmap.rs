//! Trajectory heat-map rendering: project fixes to pixel counts, compress the
//! counts with `ln(1 + c) / ln(1 + c_max)`, then smooth with a 3x3 binomial
//! Gaussian using replicate borders.

use crate::par;
use crate::raster::{RasterSpec, RasterTile};
use crate::trajectory::{TrajectorySample, TrajectoryStore};
use crate::{Error, Result};

/// Integer weights of the smoothing kernel; they sum to 16.
pub const GAUSS3: [[u32; 3]; 3] = [[1, 2, 1], [2, 4, 2], [1, 2, 1]];

/// Counts samples per pixel. Every sample must lie inside the spec bounds
/// (inclusive of the upper edges, which clamp to the last row/column).
pub fn project_counts(samples: &[TrajectorySample], spec: &RasterSpec) -> Result<RasterTile> {
    let b = &spec.bounds;
    let mut tile = RasterTile::zeros(spec.height, spec.width, 1);
    let w = spec.width;
    let vals = tile.values_mut();
    for s in samples {
        if !(s.lon >= b.lon_l && s.lon <= b.lon_u && s.lat >= b.lat_l && s.lat <= b.lat_u) {
            return Err(Error::SampleOutOfBounds { lon: s.lon, lat: s.lat });
        }
        let (r, c) = spec.pixel_of(s.lon, s.lat);
        vals[r * w + c] += 1.0;
    }
    Ok(tile)
}

/// Per-tile logarithmic normalization into `[0, 1]`.
pub fn log_normalize(counts: &RasterTile) -> RasterTile {
    let mut out = counts.clone();
    let c_max = counts.values().iter().fold(0.0f32, |m, &v| m.max(v));
    if c_max <= 0.0 {
        out.values_mut().fill(0.0);
        return out;
    }
    let denom = (c_max as f64).ln_1p();
    for v in out.values_mut() {
        *v = ((v.max(0.0) as f64).ln_1p() / denom) as f32;
    }
    out
}

/// 3x3 binomial smoothing with replicate padding.
///
/// The weighted sum is formed in f64, where every term and partial sum of
/// f32 inputs is exact, so constants are preserved bit-for-bit and outputs
/// never leave the input range.
pub fn gaussian_smooth3(tile: &RasterTile) -> Result<RasterTile> {
    if tile.channels() != 1 {
        return Err(Error::shape(format!("smoothing expects one channel, got {}", tile.channels())));
    }
    let (h, w) = (tile.height(), tile.width());
    let src = tile.values();
    let mut out = RasterTile::zeros(h, w, 1);
    par::for_each_chunk_mut(out.values_mut(), w, |r, row| {
        for (c, o) in row.iter_mut().enumerate() {
            let mut acc = 0.0f64;
            for (dy, krow) in GAUSS3.iter().enumerate() {
                let rr = (r + dy).saturating_sub(1).min(h - 1);
                for (dx, &k) in krow.iter().enumerate() {
                    let cc = (c + dx).saturating_sub(1).min(w - 1);
                    acc += k as f64 * src[rr * w + cc] as f64;
                }
            }
            *o = (acc / 16.0) as f32;
        }
    });
    Ok(out)
}

/// Heat-map of every stored sample inside `spec.bounds`.
pub fn render_heatmap(store: &TrajectoryStore, spec: &RasterSpec) -> Result<RasterTile> {
    spec.bounds.validate()?;
    let samples = store.query_bbox(&spec.bounds)?;
    let counts = project_counts(&samples, spec)?;
    gaussian_smooth3(&log_normalize(&counts))
}

/// Renders many tiles from one store, one task per tile.
pub fn render_tiles(store: &TrajectoryStore, specs: &[RasterSpec]) -> Result<Vec<RasterTile>> {
    par::map_slice(specs, |s| render_heatmap(store, s))
        .into_iter()
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trajectory::GeoBounds;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sample(lon: f64, lat: f64) -> TrajectorySample {
        TrajectorySample { vid: "v".into(), lon, lat, t: 0, sp: 1.0, si: 60 }
    }

    fn spec4() -> RasterSpec {
        RasterSpec::new(GeoBounds::new(0.0, 0.0, 4.0, 4.0).unwrap(), 4, 4).unwrap()
    }

    // direct double-loop smoothing, written independently of the kernel above
    fn smooth_oracle(v: &[f32], h: usize, w: usize) -> Vec<f64> {
        let k = [[1.0, 2.0, 1.0], [2.0, 4.0, 2.0], [1.0, 2.0, 1.0]];
        let mut out = vec![0.0; h * w];
        for r in 0..h as isize {
            for c in 0..w as isize {
                let mut s = 0.0;
                for i in -1..=1isize {
                    for j in -1..=1isize {
                        let rr = (r + i).clamp(0, h as isize - 1) as usize;
                        let cc = (c + j).clamp(0, w as isize - 1) as usize;
                        s += k[(i + 1) as usize][(j + 1) as usize] / 16.0 * v[rr * w + cc] as f64;
                    }
                }
                out[r as usize * w + c as usize] = s;
            }
        }
        out
    }

    #[test]
    fn empty_projection() {
        let t = project_counts(&[], &spec4()).unwrap();
        assert!(t.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn colocated_samples_land_in_one_pixel() {
        // col = floor(3.5 / 4 * 4) = 3, row = floor((4 - 1.5) / 4 * 4) = 2
        let s = vec![sample(3.5, 1.5); 3];
        let t = project_counts(&s, &spec4()).unwrap();
        for r in 0..4 {
            for c in 0..4 {
                assert_eq!(t.get(r, c, 0), if (r, c) == (2, 3) { 3.0 } else { 0.0 });
            }
        }
        assert_eq!(t.values().iter().sum::<f32>(), 3.0);
    }

    #[test]
    fn north_west_corner_is_origin_pixel() {
        let t = project_counts(&[sample(0.0, 4.0)], &spec4()).unwrap();
        assert_eq!(t.get(0, 0, 0), 1.0);
    }

    #[test]
    fn out_of_bounds_sample_is_rejected() {
        assert!(matches!(
            project_counts(&[sample(5.0, 1.0)], &spec4()),
            Err(Error::SampleOutOfBounds { .. })
        ));
    }

    #[test]
    fn log_normalize_cases() {
        let z = RasterTile::zeros(3, 3, 1);
        assert_eq!(log_normalize(&z), z);
        let t = RasterTile::new(1, 3, 1, vec![0.0, 1.0, 3.0]).unwrap();
        let n = log_normalize(&t);
        assert_eq!(n.values()[0], 0.0);
        assert!((n.values()[1] - 0.5).abs() < 1e-7);
        assert_eq!(n.values()[2], 1.0);
        let u = RasterTile::filled(2, 2, 1, 7.0);
        assert!(log_normalize(&u).values().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn smoothing_preserves_constants() {
        for v in [0.0f32, 0.1, 0.3333, 1.0, 17.25] {
            let t = RasterTile::filled(5, 7, 1, v);
            assert_eq!(gaussian_smooth3(&t).unwrap(), t);
        }
    }

    #[test]
    fn impulse_response_is_the_kernel() {
        let mut t = RasterTile::zeros(5, 5, 1);
        t.set(2, 2, 0, 1.0);
        let s = gaussian_smooth3(&t).unwrap();
        for dy in 0..3 {
            for dx in 0..3 {
                assert_eq!(s.get(1 + dy, 1 + dx, 0), GAUSS3[dy][dx] as f32 / 16.0);
            }
        }
        assert_eq!(s.get(0, 0, 0), 0.0);
        assert!(gaussian_smooth3(&RasterTile::zeros(2, 2, 3)).is_err());
    }

    #[test]
    fn smoothing_matches_double_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let v: Vec<f32> = (0..256).map(|_| rng.gen::<f32>()).collect();
            let t = RasterTile::new(16, 16, 1, v.clone()).unwrap();
            let s = gaussian_smooth3(&t).unwrap();
            for (a, b) in s.values().iter().zip(smooth_oracle(&v, 16, 16)) {
                assert!((*a as f64 - b).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn render_composes_stages_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let samples: Vec<_> = (0..400).map(|_| sample(rng.gen_range(0.0..5.0), rng.gen_range(-1.0..4.0))).collect();
        let store = TrajectoryStore::build(samples.clone(), 0.3).unwrap();
        let spec = RasterSpec::new(GeoBounds::new(0.5, 0.0, 4.5, 3.0).unwrap(), 12, 16).unwrap();
        let inside: Vec<_> = samples.iter().filter(|s| spec.bounds.contains(s.lon, s.lat)).cloned().collect();
        let manual = gaussian_smooth3(&log_normalize(&project_counts(&inside, &spec).unwrap())).unwrap();
        assert_eq!(render_heatmap(&store, &spec).unwrap(), manual);
    }

    #[test]
    fn dense_row_spreads_to_neighbours() {
        let spec = RasterSpec::new(GeoBounds::new(0.0, 0.0, 8.0, 8.0).unwrap(), 8, 8).unwrap();
        // row 4 covers lat in (3, 4]
        let samples: Vec<_> = (0..8).flat_map(|c| vec![sample(c as f64 + 0.5, 3.5); 20]).collect();
        let store = TrajectoryStore::build(samples.clone(), 1.0).unwrap();
        let counts = project_counts(&store.query_bbox(&spec.bounds).unwrap(), &spec).unwrap();
        let norm = log_normalize(&counts);
        assert!((0..8).all(|c| norm.get(4, c, 0) == 1.0));
        let heat = render_heatmap(&store, &spec).unwrap();
        assert!((0..8).all(|c| heat.get(3, c, 0) > 0.0 && heat.get(5, c, 0) > 0.0));
        assert!((0..8).all(|c| heat.get(1, c, 0) == 0.0));
    }

    #[test]
    fn empty_store_renders_zeros() {
        let store = TrajectoryStore::build(vec![], 0.1).unwrap();
        let t = render_heatmap(&store, &spec4()).unwrap();
        assert!(t.values().iter().all(|&v| v == 0.0));
    }

    proptest! {
        #[test]
        fn heat_is_unit_range(pts in prop::collection::vec((0.0f64..4.0, 0.0f64..4.0), 0..300), h in 1usize..10, w in 1usize..10) {
            let store = TrajectoryStore::build(pts.iter().map(|&(a, b)| sample(a, b)).collect(), 0.5).unwrap();
            let spec = RasterSpec::new(GeoBounds::new(0.0, 0.0, 4.0, 4.0).unwrap(), h, w).unwrap();
            let counts = project_counts(&store.query_bbox(&spec.bounds).unwrap(), &spec).unwrap();
            prop_assert_eq!(counts.values().iter().sum::<f32>() as usize, pts.len());
            let heat = render_heatmap(&store, &spec).unwrap();
            prop_assert!(heat.values().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }

        #[test]
        fn log_normalize_is_monotone(c in prop::collection::vec(0u32..1000, 1..50)) {
            let t = RasterTile::new(1, c.len(), 1, c.iter().map(|&v| v as f32).collect()).unwrap();
            let n = log_normalize(&t);
            for i in 0..c.len() {
                for j in 0..c.len() {
                    if c[i] >= c[j] {
                        prop_assert!(n.values()[i] >= n.values()[j]);
                    }
                }
            }
        }

        #[test]
        fn smoothing_stays_within_extrema(v in prop::collection::vec(-5.0f32..5.0, 36)) {
            let t = RasterTile::new(6, 6, 1, v.clone()).unwrap();
            let lo = v.iter().cloned().fold(f32::INFINITY, f32::min);
            let hi = v.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            let s = gaussian_smooth3(&t).unwrap();
            prop_assert!(s.values().iter().all(|&x| x >= lo && x <= hi));
        }
    }
}
