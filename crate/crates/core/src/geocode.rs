//! Geohash encoding/decoding plus the per-cell trainable embedding table.
//! Coordinates are interleaved bit-by-bit (even bits longitude, odd bits
//! latitude) and packed into base32 characters.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const BASE32: &[u8] = b"0123456789bcdefghjkmnpqrstuvwxyz";

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GeohashConfig {
    pub precision: usize,
    pub embed_dim: usize,
}

impl Default for GeohashConfig {
    fn default() -> Self {
        Self { precision: 6, embed_dim: 256 }
    }
}

impl GeohashConfig {
    pub fn validate(&self) -> Result<()> {
        if !(1..=12).contains(&self.precision) {
            return Err(Error::Config(format!(
                "geohash precision {} outside [1, 12]",
                self.precision
            )));
        }
        if self.embed_dim == 0 {
            return Err(Error::Config("geohash embed_dim must be positive".into()));
        }
        Ok(())
    }
}

fn check_bounds(lat: f64, lon: f64) -> Result<()> {
    if !(-90.0..=90.0).contains(&lat) || !lat.is_finite() {
        return Err(Error::Argument(format!("latitude {lat} outside [-90, 90]")));
    }
    if !(-180.0..=180.0).contains(&lon) || !lon.is_finite() {
        return Err(Error::Argument(format!("longitude {lon} outside [-180, 180]")));
    }
    Ok(())
}

pub fn geohash_encode(lat: f64, lon: f64, precision: usize) -> Result<String> {
    check_bounds(lat, lon)?;
    if !(1..=12).contains(&precision) {
        return Err(Error::Argument(format!("precision {precision} outside [1, 12]")));
    }
    let mut lat_range = (-90.0f64, 90.0f64);
    let mut lon_range = (-180.0f64, 180.0f64);
    let mut hash = String::with_capacity(precision);
    let mut ch = 0usize;
    let mut bits_in_char = 0usize;
    let mut even = true; // even-numbered bits refine longitude
    while hash.len() < precision {
        let range = if even { &mut lon_range } else { &mut lat_range };
        let coord = if even { lon } else { lat };
        let mid = (range.0 + range.1) / 2.0;
        ch <<= 1;
        if coord >= mid {
            ch |= 1;
            range.0 = mid;
        } else {
            range.1 = mid;
        }
        even = !even;
        bits_in_char += 1;
        if bits_in_char == 5 {
            hash.push(BASE32[ch] as char);
            ch = 0;
            bits_in_char = 0;
        }
    }
    Ok(hash)
}

/// Returns `(lat_center, lon_center, lat_err, lon_err)` where the errors are
/// half the cell extent in each direction.
pub fn geohash_decode(hash: &str) -> Result<(f64, f64, f64, f64)> {
    if hash.is_empty() {
        return Err(Error::Parse("empty geohash".into()));
    }
    let mut lat_range = (-90.0f64, 90.0f64);
    let mut lon_range = (-180.0f64, 180.0f64);
    let mut even = true;
    for c in hash.chars() {
        let idx = BASE32
            .iter()
            .position(|&b| b as char == c)
            .ok_or_else(|| Error::Parse(format!("invalid geohash character {c:?}")))?;
        for shift in (0..5).rev() {
            let bit = (idx >> shift) & 1;
            let range = if even { &mut lon_range } else { &mut lat_range };
            let mid = (range.0 + range.1) / 2.0;
            if bit == 1 {
                range.0 = mid;
            } else {
                range.1 = mid;
            }
            even = !even;
        }
    }
    let lat = (lat_range.0 + lat_range.1) / 2.0;
    let lon = (lon_range.0 + lon_range.1) / 2.0;
    let lat_err = (lat_range.1 - lat_range.0) / 2.0;
    let lon_err = (lon_range.1 - lon_range.0) / 2.0;
    Ok((lat, lon, lat_err, lon_err))
}

/// One zero-initialized trainable vector per distinct geohash cell, grown
/// lazily on first access. Growth happens during data preparation; training
/// reads a materialized copy of the same rows, so lookups stay pure.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GeoEmbeddingTable {
    pub config: GeohashConfig,
    index: BTreeMap<String, usize>,
    vectors: Vec<Vec<f64>>,
}

impl GeoEmbeddingTable {
    pub fn new(config: GeohashConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { config, index: BTreeMap::new(), vectors: Vec::new() })
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn cell(&self, lat: f64, lon: f64) -> Result<String> {
        geohash_encode(lat, lon, self.config.precision)
    }

    /// Index of the containing cell, creating a zero vector on first access.
    pub fn intern(&mut self, lat: f64, lon: f64) -> Result<usize> {
        let cell = self.cell(lat, lon)?;
        if let Some(&i) = self.index.get(&cell) {
            return Ok(i);
        }
        let i = self.vectors.len();
        self.vectors.push(vec![0.0; self.config.embed_dim]);
        self.index.insert(cell, i);
        Ok(i)
    }

    pub fn cell_index(&self, lat: f64, lon: f64) -> Result<Option<usize>> {
        Ok(self.index.get(&self.cell(lat, lon)?).copied())
    }

    /// The trainable vector of the containing cell.
    pub fn vector(&mut self, lat: f64, lon: f64) -> Result<&[f64]> {
        let i = self.intern(lat, lon)?;
        Ok(&self.vectors[i])
    }

    pub fn vector_at(&self, index: usize) -> &[f64] {
        &self.vectors[index]
    }

    pub fn vector_at_mut(&mut self, index: usize) -> &mut [f64] {
        &mut self.vectors[index]
    }

    /// Rows in insertion order, e.g. for materializing into a `ParamStore`.
    pub fn rows(&self) -> &[Vec<f64>] {
        &self.vectors
    }
}
