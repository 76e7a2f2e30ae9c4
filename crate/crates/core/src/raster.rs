//! Raster tiles, binary masks and their on-disk formats.
//!
//! `RFT1` layout: the magic `RFT1`, then `H`, `W`, `C` as little-endian u32,
//! then `H*W*C` little-endian f32 values, row-major and channel-last.
//! Masks are also written as binary PGM (`P5`, maxval 255).

use std::io::{Read, Write};
use std::path::Path;

use crate::trajectory::GeoBounds;
use crate::{Error, Result};

pub const RFT_MAGIC: &[u8; 4] = b"RFT1";

/// `H x W x C` grid of f32 values, row 0 at the north edge.
#[derive(Clone, Debug, PartialEq)]
pub struct RasterTile {
    height: usize,
    width: usize,
    channels: usize,
    values: Vec<f32>,
}

impl RasterTile {
    pub fn new(height: usize, width: usize, channels: usize, values: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::shape(format!("raster extents must be positive: {height}x{width}x{channels}")));
        }
        if values.len() != height * width * channels {
            return Err(Error::shape(format!(
                "raster {height}x{width}x{channels} needs {} values, got {}",
                height * width * channels,
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Format("raster values must be finite".into()));
        }
        Ok(RasterTile { height, width, channels, values })
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        assert!(height > 0 && width > 0 && channels > 0, "raster extents must be positive");
        RasterTile { height, width, channels, values: vec![0.0; height * width * channels] }
    }

    pub fn filled(height: usize, width: usize, channels: usize, v: f32) -> Self {
        let mut t = Self::zeros(height, width, channels);
        t.values.fill(v);
        t
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f32] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f32> {
        self.values
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize, ch: usize) -> f32 {
        self.values[(r * self.width + c) * self.channels + ch]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, ch: usize, v: f32) {
        self.values[(r * self.width + c) * self.channels + ch] = v;
    }

    /// Planar (`C x H x W`) copy of the values, the layout network tensors use.
    pub fn to_planar(&self) -> Vec<f32> {
        let hw = self.height * self.width;
        let mut out = vec![0.0; self.values.len()];
        for p in 0..hw {
            for ch in 0..self.channels {
                out[ch * hw + p] = self.values[p * self.channels + ch];
            }
        }
        out
    }

    pub fn from_planar(height: usize, width: usize, channels: usize, planar: &[f32]) -> Result<Self> {
        let hw = height * width;
        if planar.len() != hw * channels {
            return Err(Error::shape("planar buffer length"));
        }
        let mut values = vec![0.0; planar.len()];
        for ch in 0..channels {
            for p in 0..hw {
                values[p * channels + ch] = planar[ch * hw + p];
            }
        }
        RasterTile::new(height, width, channels, values)
    }

    pub fn write_rft<W: Write>(&self, mut w: W) -> Result<()> {
        let mut buf = Vec::with_capacity(16 + 4 * self.values.len());
        buf.extend_from_slice(RFT_MAGIC);
        for d in [self.height, self.width, self.channels] {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in &self.values {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read_rft<R: Read>(mut r: R) -> Result<Self> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        Self::from_rft_bytes(&bytes)
    }

    pub fn from_rft_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..4] != RFT_MAGIC {
            return Err(Error::Format("missing RFT1 header".into()));
        }
        let dim = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
        let (h, w, c) = (dim(0), dim(1), dim(2));
        let n = h
            .checked_mul(w)
            .and_then(|v| v.checked_mul(c))
            .ok_or_else(|| Error::Format("RFT1 extents overflow".into()))?;
        if bytes.len() != 16 + 4 * n {
            return Err(Error::Format(format!("RFT1 payload is {} bytes, expected {}", bytes.len() - 16, 4 * n)));
        }
        let values = bytes[16..]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        RasterTile::new(h, w, c, values)
    }

    pub fn save_rft(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut bytes = Vec::new();
        self.write_rft(&mut bytes)?;
        std::fs::write(path, bytes)?;
        Ok(())
    }

    pub fn load_rft(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_rft_bytes(&std::fs::read(path)?)
    }
}

/// Target grid for rasterizing a geographic box.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RasterSpec {
    pub bounds: GeoBounds,
    pub height: usize,
    pub width: usize,
}

impl RasterSpec {
    pub fn new(bounds: GeoBounds, height: usize, width: usize) -> Result<Self> {
        bounds.validate()?;
        if height == 0 || width == 0 {
            return Err(Error::shape(format!("raster size must be positive: {height}x{width}")));
        }
        Ok(RasterSpec { bounds, height, width })
    }

    /// Pixel `(row, col)` of a coordinate, clamped into the grid.
    #[inline]
    pub fn pixel_of(&self, lon: f64, lat: f64) -> (usize, usize) {
        let b = &self.bounds;
        let c = ((lon - b.lon_l) / (b.lon_u - b.lon_l) * self.width as f64).floor();
        let r = ((b.lat_u - lat) / (b.lat_u - b.lat_l) * self.height as f64).floor();
        let clamp = |v: f64, n: usize| (v.max(0.0) as usize).min(n - 1);
        (clamp(r, self.height), clamp(c, self.width))
    }

    /// Coordinate of a continuous pixel position (`row`, `col` in pixel units).
    pub fn coord_of(&self, row: f64, col: f64) -> (f64, f64) {
        let b = &self.bounds;
        let lon = b.lon_l + col / self.width as f64 * b.width();
        let lat = b.lat_u - row / self.height as f64 * b.height();
        (lon, lat)
    }
}

/// Binary `H x W` road mask, one byte per pixel holding 0 or 1.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    bits: Vec<u8>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, bits: Vec<u8>) -> Result<Self> {
        if bits.len() != height * width {
            return Err(Error::shape(format!("mask {height}x{width} needs {} values", height * width)));
        }
        if bits.iter().any(|&b| b > 1) {
            return Err(Error::Format("mask values must be 0 or 1".into()));
        }
        Ok(BinaryMask { height, width, bits })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        BinaryMask { height, width, bits: vec![0; height * width] }
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut bits = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                bits.push(f(r, c) as u8);
            }
        }
        BinaryMask { height, width, bits }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> bool {
        self.bits[r * self.width + c] != 0
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, on: bool) {
        self.bits[r * self.width + c] = on as u8;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().map(|&b| b as usize).sum()
    }

    /// Single-channel raster with 1.0 on road pixels.
    pub fn to_raster(&self) -> RasterTile {
        let values = self.bits.iter().map(|&b| b as f32).collect();
        RasterTile { height: self.height, width: self.width, channels: 1, values }
    }

    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(self.bits.iter().map(|&b| if b != 0 { 255u8 } else { 0 }));
        out
    }

    /// Reads a binary PGM; any nonzero gray level counts as road.
    pub fn from_pgm(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Format(format!("PGM: {m}"));
        let mut pos = 0;
        let mut token = || -> Result<String> {
            loop {
                while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                    pos += 1;
                }
                if pos < bytes.len() && bytes[pos] == b'#' {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                    continue;
                }
                break;
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(bad("truncated header"));
            }
            Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
        };
        if token()? != "P5" {
            return Err(bad("expected P5"));
        }
        let w: usize = token()?.parse().map_err(|_| bad("width"))?;
        let h: usize = token()?.parse().map_err(|_| bad("height"))?;
        let maxval: usize = token()?.parse().map_err(|_| bad("maxval"))?;
        if maxval == 0 || maxval > 255 {
            return Err(bad("only 8-bit PGM is supported"));
        }
        // exactly one whitespace byte separates the header from the raster
        pos += 1;
        let data = bytes.get(pos..).ok_or_else(|| bad("truncated raster"))?;
        if data.len() != w * h {
            return Err(bad("raster size does not match header"));
        }
        Ok(BinaryMask { height: h, width: w, bits: data.iter().map(|&b| (b != 0) as u8).collect() })
    }

    pub fn save_pgm(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_pgm())?;
        Ok(())
    }

    pub fn load_pgm(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_pgm(&std::fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn rft_layout_is_exact() {
        let t = RasterTile::new(1, 2, 1, vec![1.0, -2.5]).unwrap();
        let mut bytes = Vec::new();
        t.write_rft(&mut bytes).unwrap();
        let mut expect = b"RFT1".to_vec();
        for d in [1u32, 2, 1] {
            expect.extend_from_slice(&d.to_le_bytes());
        }
        expect.extend_from_slice(&1.0f32.to_le_bytes());
        expect.extend_from_slice(&(-2.5f32).to_le_bytes());
        assert_eq!(bytes, expect);
    }

    #[test]
    fn rft_rejects_truncation_and_bad_magic() {
        let t = RasterTile::filled(2, 2, 3, 0.25);
        let mut bytes = Vec::new();
        t.write_rft(&mut bytes).unwrap();
        assert!(RasterTile::from_rft_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(RasterTile::from_rft_bytes(&bad).is_err());
    }

    #[test]
    fn planar_conversion() {
        let t = RasterTile::new(1, 2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(t.to_planar(), vec![1.0, 3.0, 2.0, 4.0]);
        assert_eq!(RasterTile::from_planar(1, 2, 2, &t.to_planar()).unwrap(), t);
    }

    #[test]
    fn pgm_encoding() {
        let m = BinaryMask::new(2, 2, vec![1, 0, 0, 1]).unwrap();
        let bytes = m.to_pgm();
        assert!(bytes.starts_with(b"P5\n2 2\n255\n"));
        assert_eq!(&bytes[bytes.len() - 4..], &[255, 0, 0, 255]);
        assert_eq!(BinaryMask::from_pgm(&bytes).unwrap(), m);
        assert!(BinaryMask::from_pgm(&bytes[..bytes.len() - 1]).is_err());
        assert!(BinaryMask::new(1, 1, vec![2]).is_err());
    }

    #[test]
    fn pixel_mapping_corners() {
        let spec = RasterSpec::new(GeoBounds::new(0.0, 0.0, 4.0, 4.0).unwrap(), 4, 4).unwrap();
        assert_eq!(spec.pixel_of(0.0, 4.0), (0, 0));
        assert_eq!(spec.pixel_of(4.0, 0.0), (3, 3));
        assert_eq!(spec.pixel_of(3.5, 1.5), (2, 3));
    }

    proptest! {
        #[test]
        fn rft_round_trip(h in 1usize..6, w in 1usize..6, c in 1usize..4, seed in any::<u32>()) {
            let vals: Vec<f32> = (0..h * w * c).map(|i| ((i as u32).wrapping_mul(seed) as f32) * 1e-3).collect();
            let t = RasterTile::new(h, w, c, vals).unwrap();
            let mut bytes = Vec::new();
            t.write_rft(&mut bytes).unwrap();
            prop_assert_eq!(RasterTile::from_rft_bytes(&bytes).unwrap(), t);
        }
    }
}
