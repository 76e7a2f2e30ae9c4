//! GPS trajectory samples, the CSV exchange format and a grid index for
//! tile-sized bounding-box queries.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::io::Read;

use crate::{Error, Result};

pub const CSV_HEADER: &str = "vid,lon,lat,t,sp,si";

/// One GPS fix.
///
/// `sp` and `si` are carried through unchanged; nothing downstream reads them.
#[derive(Clone, Debug, PartialEq)]
pub struct TrajectorySample {
    pub vid: String,
    pub lon: f64,
    pub lat: f64,
    /// Unix seconds.
    pub t: i64,
    /// Speed, unit as recorded by the provider.
    pub sp: f64,
    /// Sampling interval in seconds.
    pub si: u32,
}

/// Axis-aligned lon/lat box. Membership is half-open: `[lower, upper)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GeoBounds {
    pub lon_l: f64,
    pub lat_l: f64,
    pub lon_u: f64,
    pub lat_u: f64,
}

impl GeoBounds {
    pub fn new(lon_l: f64, lat_l: f64, lon_u: f64, lat_u: f64) -> Result<Self> {
        let b = GeoBounds { lon_l, lat_l, lon_u, lat_u };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        let all_finite = [self.lon_l, self.lat_l, self.lon_u, self.lat_u]
            .iter()
            .all(|v| v.is_finite());
        if !all_finite || self.lon_l >= self.lon_u || self.lat_l >= self.lat_u {
            return Err(Error::InvalidBounds(format!("{self:?}")));
        }
        Ok(())
    }

    /// Parses `lon_l,lat_l,lon_u,lat_u`.
    pub fn parse(s: &str) -> Result<Self> {
        let parts: Vec<f64> = s
            .split(',')
            .map(|p| p.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::InvalidBounds(s.to_string()))?;
        match parts[..] {
            [a, b, c, d] => GeoBounds::new(a, b, c, d),
            _ => Err(Error::InvalidBounds(s.to_string())),
        }
    }

    #[inline]
    pub fn contains(&self, lon: f64, lat: f64) -> bool {
        lon >= self.lon_l && lon < self.lon_u && lat >= self.lat_l && lat < self.lat_u
    }

    pub fn width(&self) -> f64 {
        self.lon_u - self.lon_l
    }

    pub fn height(&self) -> f64 {
        self.lat_u - self.lat_l
    }
}

/// Parses the trajectory CSV from a reader.
pub fn parse_samples<R: Read>(mut reader: R) -> Result<Vec<TrajectorySample>> {
    let mut text = String::new();
    reader
        .read_to_string(&mut text)
        .map_err(|e| Error::MalformedRow { line: 0, reason: e.to_string() })?;
    parse_samples_str(&text)
}

pub fn parse_samples_str(text: &str) -> Result<Vec<TrajectorySample>> {
    let mut lines = text.split('\n');
    // an entirely empty stream has no rows either
    match lines.next().map(|l| l.strip_suffix('\r').unwrap_or(l)) {
        None | Some("") if text.is_empty() => return Ok(Vec::new()),
        Some(CSV_HEADER) => {}
        _ => {
            return Err(Error::MalformedRow { line: 1, reason: format!("header must be `{CSV_HEADER}`") })
        }
    }
    let mut out = Vec::new();
    let mut pending_blank = None;
    for (i, raw) in lines.enumerate() {
        let line_no = i + 2;
        let line = raw.strip_suffix('\r').unwrap_or(raw);
        if line.is_empty() {
            // only tolerated as the final terminator
            pending_blank.get_or_insert(line_no);
            continue;
        }
        if let Some(blank) = pending_blank {
            return Err(Error::MalformedRow { line: blank, reason: "empty row".into() });
        }
        out.push(parse_row(line, line_no)?);
    }
    Ok(out)
}

fn parse_row(line: &str, line_no: usize) -> Result<TrajectorySample> {
    let malformed = |reason: &str| Error::MalformedRow { line: line_no, reason: reason.to_string() };
    let fields: Vec<&str> = line.split(',').collect();
    if fields.len() != 6 {
        return Err(malformed(&format!("expected 6 fields, found {}", fields.len())));
    }
    let real = |s: &str, what: &str| -> Result<f64> {
        s.parse::<f64>()
            .ok()
            .filter(|v| v.is_finite())
            .ok_or_else(|| malformed(&format!("bad {what} `{s}`")))
    };
    let lon = real(fields[1], "lon")?;
    let lat = real(fields[2], "lat")?;
    let t = fields[3].parse::<i64>().map_err(|_| malformed("bad t"))?;
    let sp = real(fields[4], "sp")?;
    let si = fields[5].parse::<u32>().map_err(|_| malformed("bad si"))?;
    if !(-180.0..=180.0).contains(&lon) || !(-90.0..=90.0).contains(&lat) || sp < 0.0 || si == 0 {
        return Err(Error::RangeError { line: line_no });
    }
    Ok(TrajectorySample { vid: fields[0].to_string(), lon, lat, t, sp, si })
}

/// Writes samples in the CSV format accepted by [`parse_samples`].
pub fn serialize_samples(samples: &[TrajectorySample]) -> String {
    let mut s = String::with_capacity(32 * (samples.len() + 1));
    s.push_str(CSV_HEADER);
    s.push('\n');
    for p in samples {
        // `{}` on f64 is the shortest round-tripping decimal, never exponent form
        let _ = writeln!(s, "{},{},{},{},{},{}", p.vid, p.lon, p.lat, p.t, p.sp, p.si);
    }
    s
}

/// Immutable sample collection with a sparse uniform-grid index.
#[derive(Clone, Debug)]
pub struct TrajectoryStore {
    samples: Vec<TrajectorySample>,
    cell_deg: f64,
    cells: HashMap<(i64, i64), Vec<u32>>,
}

impl TrajectoryStore {
    pub fn build(samples: Vec<TrajectorySample>, cell_deg: f64) -> Result<Self> {
        if !cell_deg.is_finite() || cell_deg <= 0.0 {
            return Err(Error::InvalidCellSize(cell_deg));
        }
        let mut cells: HashMap<(i64, i64), Vec<u32>> = HashMap::new();
        for (i, s) in samples.iter().enumerate() {
            let key = cell_key(s.lon, s.lat, cell_deg);
            cells.entry(key).or_default().push(i as u32);
        }
        Ok(TrajectoryStore { samples, cell_deg, cells })
    }

    pub fn samples(&self) -> &[TrajectorySample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn cell_deg(&self) -> f64 {
        self.cell_deg
    }

    /// Grid key of the cell holding `(lon, lat)`.
    pub fn cell_of(&self, lon: f64, lat: f64) -> (i64, i64) {
        cell_key(lon, lat, self.cell_deg)
    }

    /// Iterates `(cell key, sample indices)` for every occupied cell.
    pub fn cells(&self) -> impl Iterator<Item = ((i64, i64), &[u32])> {
        self.cells.iter().map(|(k, v)| (*k, v.as_slice()))
    }

    /// Indices of samples inside `bounds`, ascending.
    pub fn query_indices(&self, bounds: &GeoBounds) -> Result<Vec<usize>> {
        bounds.validate()?;
        let (x0, y0) = cell_key(bounds.lon_l, bounds.lat_l, self.cell_deg);
        let (x1, y1) = cell_key(bounds.lon_u, bounds.lat_u, self.cell_deg);
        let span = (x1 - x0 + 1) as u128 * (y1 - y0 + 1) as u128;
        let mut hits = Vec::new();
        let mut take = |idx: &[u32]| {
            for &i in idx {
                let s = &self.samples[i as usize];
                if bounds.contains(s.lon, s.lat) {
                    hits.push(i as usize);
                }
            }
        };
        if span <= self.cells.len() as u128 {
            for y in y0..=y1 {
                for x in x0..=x1 {
                    if let Some(idx) = self.cells.get(&(x, y)) {
                        take(idx);
                    }
                }
            }
        } else {
            for (&(x, y), idx) in &self.cells {
                if (x0..=x1).contains(&x) && (y0..=y1).contains(&y) {
                    take(idx);
                }
            }
        }
        hits.sort_unstable();
        Ok(hits)
    }

    /// Samples inside `bounds`, in original order.
    pub fn query_bbox(&self, bounds: &GeoBounds) -> Result<Vec<TrajectorySample>> {
        Ok(self
            .query_indices(bounds)?
            .into_iter()
            .map(|i| self.samples[i].clone())
            .collect())
    }
}

fn cell_key(lon: f64, lat: f64, cell_deg: f64) -> (i64, i64) {
    ((lon / cell_deg).floor() as i64, (lat / cell_deg).floor() as i64)
}
