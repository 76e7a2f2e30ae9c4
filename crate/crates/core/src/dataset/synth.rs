//! Procedural scenes: roads as thick polylines, tree blobs hiding roads in
//! the image, road-like tracks missing from the labels, GPS fixes along the
//! roads plus off-road clusters, and an optional white haze.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::SampleTriplet;
use crate::heatmap::render_heatmap;
use crate::kv::KeyValues;
use crate::raster::{BinaryMask, RasterSpec, RasterTile};
use crate::trajectory::{GeoBounds, TrajectorySample, TrajectoryStore};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    pub size: usize,
    pub road_count: usize,
    /// Inclusive road width range in pixels.
    pub road_width: (f64, f64),
    pub occluder_count: usize,
    /// Inclusive occluder radius range in pixels.
    pub occluder_radius: (f64, f64),
    pub distractor_count: usize,
    /// Expected GPS fixes per road pixel.
    pub traj_density: f64,
    /// Standard deviation of positional noise, pixels.
    pub traj_noise_px: f64,
    pub spurious_cluster_count: usize,
    pub fog_alpha: f64,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            size: 64,
            road_count: 3,
            road_width: (3.0, 6.0),
            occluder_count: 3,
            occluder_radius: (3.0, 6.0),
            distractor_count: 1,
            traj_density: 0.5,
            traj_noise_px: 1.0,
            spurious_cluster_count: 1,
            fog_alpha: 0.0,
            seed: 0,
        }
    }
}

const KEYS: [&str; 13] = [
    "size",
    "road_count",
    "road_width_min",
    "road_width_max",
    "occluder_count",
    "occluder_radius_min",
    "occluder_radius_max",
    "distractor_count",
    "traj_density",
    "traj_noise_px",
    "spurious_cluster_count",
    "fog_alpha",
    "seed",
];

/// Geographic frame every synthetic scene is placed in.
pub const SCENE_BOUNDS: [f64; 4] = [116.30, 39.90, 116.32, 39.92];

/// Fixes per off-road cluster.
const CLUSTER_SAMPLES: usize = 60;

impl SceneSpec {
    /// Many trees over the roads, extra road-like tracks and half-strength haze.
    pub fn occlusion_heavy() -> Self {
        SceneSpec { occluder_count: 10, occluder_radius: (4.0, 8.0), distractor_count: 3, fog_alpha: 0.5, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.size == 0 {
            return bad("size must be positive");
        }
        if !(0.0..=1.0).contains(&self.fog_alpha) {
            return bad("fog_alpha must lie in [0, 1]");
        }
        let range_ok = |(lo, hi): (f64, f64)| lo.is_finite() && hi.is_finite() && 0.0 < lo && lo <= hi;
        if !range_ok(self.road_width) || !range_ok(self.occluder_radius) {
            return bad("width and radius ranges need 0 < min <= max");
        }
        if !(self.traj_density >= 0.0 && self.traj_density.is_finite()) || !(self.traj_noise_px >= 0.0 && self.traj_noise_px.is_finite()) {
            return bad("traj_density and traj_noise_px must be finite and nonnegative");
        }
        Ok(())
    }

    pub fn from_kv(kv: &KeyValues) -> Result<Self> {
        kv.check_keys(&KEYS)?;
        let d = SceneSpec::default();
        let s = SceneSpec {
            size: kv.get_or("size", d.size)?,
            road_count: kv.get_or("road_count", d.road_count)?,
            road_width: (kv.get_or("road_width_min", d.road_width.0)?, kv.get_or("road_width_max", d.road_width.1)?),
            occluder_count: kv.get_or("occluder_count", d.occluder_count)?,
            occluder_radius: (
                kv.get_or("occluder_radius_min", d.occluder_radius.0)?,
                kv.get_or("occluder_radius_max", d.occluder_radius.1)?,
            ),
            distractor_count: kv.get_or("distractor_count", d.distractor_count)?,
            traj_density: kv.get_or("traj_density", d.traj_density)?,
            traj_noise_px: kv.get_or("traj_noise_px", d.traj_noise_px)?,
            spurious_cluster_count: kv.get_or("spurious_cluster_count", d.spurious_cluster_count)?,
            fog_alpha: kv.get_or("fog_alpha", d.fog_alpha)?,
            seed: kv.get_or("seed", d.seed)?,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn to_kv(&self) -> KeyValues {
        let mut kv = KeyValues::new();
        kv.set("size", self.size);
        kv.set("road_count", self.road_count);
        kv.set("road_width_min", self.road_width.0);
        kv.set("road_width_max", self.road_width.1);
        kv.set("occluder_count", self.occluder_count);
        kv.set("occluder_radius_min", self.occluder_radius.0);
        kv.set("occluder_radius_max", self.occluder_radius.1);
        kv.set("distractor_count", self.distractor_count);
        kv.set("traj_density", self.traj_density);
        kv.set("traj_noise_px", self.traj_noise_px);
        kv.set("spurious_cluster_count", self.spurious_cluster_count);
        kv.set("fog_alpha", self.fog_alpha);
        kv.set("seed", self.seed);
        kv
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_kv(&KeyValues::load(path)?)
    }

    pub fn raster_spec(&self) -> RasterSpec {
        let [a, b, c, d] = SCENE_BOUNDS;
        RasterSpec::new(GeoBounds { lon_l: a, lat_l: b, lon_u: c, lat_u: d }, self.size, self.size)
            .expect("fixed bounds are valid")
    }
}

type Pt = (f64, f64);

/// Squared distance from `p` to segment `ab`.
fn seg_dist2(p: Pt, a: Pt, b: Pt) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 { 0.0 } else { (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0) };
    let (qx, qy) = (a.0 + t * dx - p.0, a.1 + t * dy - p.1);
    qx * qx + qy * qy
}

struct Polyline {
    pts: Vec<Pt>,
    width: f64,
}

impl Polyline {
    fn covers(&self, p: Pt) -> bool {
        let r2 = (self.width / 2.0).powi(2);
        self.pts.windows(2).any(|s| seg_dist2(p, s[0], s[1]) <= r2)
    }

    fn length(&self) -> f64 {
        self.pts.windows(2).map(|s| ((s[1].0 - s[0].0).powi(2) + (s[1].1 - s[0].1).powi(2)).sqrt()).sum()
    }

    /// Point at arc length `d` from the start.
    fn at(&self, mut d: f64) -> Pt {
        for s in self.pts.windows(2) {
            let l = ((s[1].0 - s[0].0).powi(2) + (s[1].1 - s[0].1).powi(2)).sqrt();
            if d <= l && l > 0.0 {
                let t = d / l;
                return (s[0].0 + t * (s[1].0 - s[0].0), s[0].1 + t * (s[1].1 - s[0].1));
            }
            d -= l;
        }
        *self.pts.last().unwrap()
    }
}

/// Point on side `side` (0 top, 1 right, 2 bottom, 3 left) of an `n` square.
fn border_point<R: Rng>(rng: &mut R, side: usize, n: f64) -> Pt {
    let t = rng.gen_range(0.1 * n..0.9 * n);
    match side {
        0 => (t, 0.0),
        1 => (n, t),
        2 => (t, n),
        _ => (0.0, t),
    }
}

/// Border-to-border polyline with one or two interior bends. Points are `(x, y)`.
fn random_polyline<R: Rng>(rng: &mut R, n: f64, width: f64) -> Polyline {
    let s0 = rng.gen_range(0..4);
    let s1 = (s0 + rng.gen_range(1..4)) % 4;
    let mut pts = vec![border_point(rng, s0, n)];
    for _ in 0..rng.gen_range(1..=2) {
        pts.push((rng.gen_range(0.2 * n..0.8 * n), rng.gen_range(0.2 * n..0.8 * n)));
    }
    pts.push(border_point(rng, s1, n));
    Polyline { pts, width }
}

fn paint(img: &mut RasterTile, r: usize, c: usize, rgb: [f64; 3], jitter: f64) {
    for (k, v) in rgb.iter().enumerate() {
        img.set(r, c, k, (v + jitter).clamp(0.0, 1.0) as f32);
    }
}

/// One deterministic scene and the raw fixes its heat-map was rendered from.
pub fn synth_scene(spec: &SceneSpec) -> Result<(SampleTriplet, Vec<TrajectorySample>)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n = spec.size;
    let nf = n as f64;
    let centre = |r: usize, c: usize| (c as f64 + 0.5, r as f64 + 0.5);

    let roads: Vec<Polyline> = (0..spec.road_count)
        .map(|_| {
            let w = rng.gen_range(spec.road_width.0..=spec.road_width.1);
            random_polyline(&mut rng, nf, w)
        })
        .collect();
    let distractors: Vec<Polyline> = (0..spec.distractor_count)
        .map(|_| {
            let w = rng.gen_range(spec.road_width.0..=spec.road_width.1);
            random_polyline(&mut rng, nf, w)
        })
        .collect();
    let mask = BinaryMask::from_fn(n, n, |r, c| roads.iter().any(|p| p.covers(centre(r, c))));

    // textured vegetation background
    let base = [rng.gen_range(0.25..0.35), rng.gen_range(0.40..0.50), rng.gen_range(0.20..0.30)];
    let mut image = RasterTile::zeros(n, n, 3);
    for r in 0..n {
        for c in 0..n {
            let j = rng.gen_range(-0.08..0.08);
            paint(&mut image, r, c, base, j);
        }
    }
    let road_rgb = [0.62, 0.62, 0.60];
    for r in 0..n {
        for c in 0..n {
            let p = centre(r, c);
            if distractors.iter().any(|d| d.covers(p)) {
                paint(&mut image, r, c, [0.58, 0.57, 0.55], rng.gen_range(-0.04..0.04));
            }
            if mask.get(r, c) {
                paint(&mut image, r, c, road_rgb, rng.gen_range(-0.04..0.04));
            }
        }
    }
    // trees centred on roads when there are any
    let tree_rgb = [0.12, 0.33, 0.12];
    for _ in 0..spec.occluder_count {
        let (cx, cy) = match roads.len() {
            0 => (rng.gen_range(0.0..nf), rng.gen_range(0.0..nf)),
            k => {
                let road = &roads[rng.gen_range(0..k)];
                road.at(rng.gen_range(0.0..=road.length()))
            }
        };
        let rad = rng.gen_range(spec.occluder_radius.0..=spec.occluder_radius.1);
        for r in 0..n {
            for c in 0..n {
                let (x, y) = centre(r, c);
                if (x - cx).powi(2) + (y - cy).powi(2) <= rad * rad {
                    paint(&mut image, r, c, tree_rgb, rng.gen_range(-0.05..0.05));
                }
            }
        }
    }
    if spec.fog_alpha > 0.0 {
        let a = spec.fog_alpha as f32;
        for v in image.values_mut() {
            *v = (1.0 - a) * *v + a;
        }
    }

    // GPS fixes in pixel coordinates, then mapped to lon/lat
    let rs = spec.raster_spec();
    let noise = Normal::new(0.0, spec.traj_noise_px.max(1e-12)).expect("finite sigma");
    let mut pts: Vec<(usize, Pt)> = Vec::new();
    for (i, road) in roads.iter().enumerate() {
        // length times width approximates the road's pixel count
        let count = (spec.traj_density * road.length() * road.width).round() as usize;
        for _ in 0..count {
            let (x, y) = road.at(rng.gen_range(0.0..=road.length()));
            let (dx, dy) = if spec.traj_noise_px > 0.0 { (noise.sample(&mut rng), noise.sample(&mut rng)) } else { (0.0, 0.0) };
            pts.push((i, (x + dx, y + dy)));
        }
    }
    let cluster = Normal::new(0.0, 3.0).expect("finite sigma");
    for k in 0..spec.spurious_cluster_count {
        let (cx, cy) = (rng.gen_range(0.1 * nf..0.9 * nf), rng.gen_range(0.1 * nf..0.9 * nf));
        for _ in 0..CLUSTER_SAMPLES {
            pts.push((roads.len() + k, (cx + cluster.sample(&mut rng), cy + cluster.sample(&mut rng))));
        }
    }
    let samples: Vec<TrajectorySample> = pts
        .into_iter()
        .filter(|(_, (x, y))| (0.0..nf).contains(x) && (0.0..nf).contains(y))
        .enumerate()
        .map(|(t, (vid, (x, y)))| {
            let (lon, lat) = rs.coord_of(y, x);
            TrajectorySample { vid: format!("v{vid}"), lon, lat, t: t as i64, sp: rng.gen_range(0.0..20.0), si: 1 }
        })
        .filter(|s| rs.bounds.contains(s.lon, s.lat))
        .collect();
    let store = TrajectoryStore::build(samples.clone(), (rs.bounds.width() / 8.0).max(1e-9))?;
    let heatmap = render_heatmap(&store, &rs)?;
    Ok((SampleTriplet::new(image, heatmap, mask)?, samples))
}

/// `count` scenes derived from `base` with seeds `seed * 1_000_003 + i`,
/// generated in parallel.
pub fn synth_dataset(base: &SceneSpec, count: usize, seed: u64) -> Result<Vec<SampleTriplet>> {
    crate::par::map_range(count, |i| {
        let spec = SceneSpec { seed: seed.wrapping_mul(1_000_003).wrapping_add(i as u64), ..base.clone() };
        synth_scene(&spec).map(|(t, _)| t)
    })
    .into_iter()
    .collect()
}
